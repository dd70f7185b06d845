//! Analytic gradients of every head and of the distillation term against
//! central finite differences.

mod support;

use support::gradcheck::{head_errors, kd_error, total_error, Head, SEEDS, TOL};

fn check_head(head: Head) {
    for seed in 0..SEEDS {
        let (dz, dp) = head_errors(head, seed);
        assert!(
            dz <= TOL,
            "{head:?} seed {seed}: embedding gradient error {dz:e}"
        );
        assert!(
            dp <= TOL,
            "{head:?} seed {seed}: prototype gradient error {dp:e}"
        );
    }
}

#[test]
fn arcface_head() {
    check_head(Head::Arcface);
}

#[test]
fn elastic_head_with_fixed_margin() {
    check_head(Head::Elastic);
}

#[test]
fn adaface_head() {
    check_head(Head::Adaface);
}

#[test]
fn kd_term() {
    for seed in 0..SEEDS {
        let e = kd_error(seed);
        assert!(e <= TOL, "seed {seed}: {e:e}");
    }
}

#[test]
fn total_objective() {
    for seed in 0..SEEDS {
        let e = total_error(seed);
        assert!(e <= TOL, "seed {seed}: {e:e}");
    }
}
