//! Analytic-versus-numeric gradient errors at `D = 8`, `C = 5`.

use fairkd::losses::{
    adaface_margins, head_backward, kd_embedding_grad, kd_embedding_loss_with,
    sample_elastic_margin, total_loss, ClassPrototypes, KdReduction, MarginConfig, NormStats,
    TargetMargin,
};
use fairkd::rng::rng_for;
use rand_distr::{Distribution, StandardNormal};

use super::finite_diff::{central_gradient, relative_error};

pub const DIM: usize = 8;
pub const CLASSES: usize = 5;
pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const SEEDS: u64 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Arcface,
    /// Elastic margin drawn once and then held fixed.
    Elastic,
    /// Adaptive margins computed from the norm statistics and held fixed.
    Adaface,
}

pub struct Case {
    pub embedding: Vec<f64>,
    pub teacher: Vec<f64>,
    pub protos: Vec<f64>,
    pub y: usize,
}

pub fn case(seed: u64) -> Case {
    let mut rng = rng_for(seed, &["gradcheck"]);
    let mut draw = |n: usize, scale: f64| -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect()
    };
    Case {
        embedding: draw(DIM, 3.0),
        teacher: draw(DIM, 3.0),
        protos: draw(CLASSES * DIM, 1.0),
        y: seed as usize % CLASSES,
    }
}

fn head_loss(z: &[f64], protos: &[f64], y: usize, s: f64, target: TargetMargin) -> f64 {
    let p = ClassPrototypes::from_flat(CLASSES, DIM, protos.to_vec()).unwrap();
    head_backward(z, &p.unit().unwrap(), y, s, target, None)
        .unwrap()
        .0
}

fn head_setup(head: Head, seed: u64, c: &Case) -> (f64, TargetMargin) {
    match head {
        Head::Arcface => {
            let cfg = MarginConfig::arcface(64.0, 0.5);
            (cfg.s, TargetMargin::Angular { m: cfg.m })
        }
        Head::Elastic => {
            let cfg = MarginConfig::elastic_default();
            let m = sample_elastic_margin(&cfg, &mut rng_for(seed, &["margin"]));
            (cfg.s, TargetMargin::Angular { m })
        }
        Head::Adaface => {
            let cfg = MarginConfig::adaface_default();
            let raw = c.embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
            // Shift the statistics per seed so both signs of the margin occur.
            let stats = NormStats::new(raw + (seed as f64 - 10.0) * 0.5, 2.0).unwrap();
            (cfg.s, adaface_margins(raw, &cfg, &stats).unwrap())
        }
    }
}

/// Relative errors of the embedding and prototype gradients.
pub fn head_errors(head: Head, seed: u64) -> (f64, f64) {
    let c = case(seed);
    let (s, target) = head_setup(head, seed, &c);
    let p = ClassPrototypes::from_flat(CLASSES, DIM, c.protos.clone()).unwrap();
    let mut d_protos = vec![0.0; CLASSES * DIM];
    let (_, d_z) = head_backward(
        &c.embedding,
        &p.unit().unwrap(),
        c.y,
        s,
        target,
        Some(&mut d_protos),
    )
    .unwrap();
    let num_z = central_gradient(&c.embedding, STEP, |z| {
        head_loss(z, &c.protos, c.y, s, target)
    });
    let num_p = central_gradient(&c.protos, STEP, |w| {
        head_loss(&c.embedding, w, c.y, s, target)
    });
    (
        relative_error(&d_z, &num_z),
        relative_error(&d_protos, &num_p),
    )
}

/// Worst error over both reductions, raw and normalized.
pub fn kd_error(seed: u64) -> f64 {
    let c = case(seed);
    let mut worst: f64 = 0.0;
    for reduction in [KdReduction::Mean, KdReduction::Sum] {
        for normalized in [false, true] {
            let g = kd_embedding_grad(&c.teacher, &c.embedding, reduction, normalized).unwrap();
            let num = central_gradient(&c.embedding, STEP, |z| {
                kd_embedding_grad(&c.teacher, z, reduction, normalized)
                    .unwrap()
                    .loss
            });
            worst = worst.max(relative_error(&g.d_student, &num));
        }
    }
    worst
}

/// Error of `∂(cls + λ·kd)/∂z` with an arcface head and λ = 3.
pub fn total_error(seed: u64) -> f64 {
    let c = case(seed);
    let (s, target) = head_setup(Head::Arcface, seed, &c);
    let lambda = 3.0;
    let p = ClassPrototypes::from_flat(CLASSES, DIM, c.protos.clone()).unwrap();
    let (_, d_cls) = head_backward(&c.embedding, &p.unit().unwrap(), c.y, s, target, None).unwrap();
    let kd = kd_embedding_grad(&c.teacher, &c.embedding, KdReduction::Mean, false).unwrap();
    let analytic: Vec<f64> = d_cls
        .iter()
        .zip(&kd.d_student)
        .map(|(a, b)| a + lambda * b)
        .collect();
    let num = central_gradient(&c.embedding, STEP, |z| {
        let cls = head_loss(z, &c.protos, c.y, s, target);
        let kd = kd_embedding_loss_with(&c.teacher, z, KdReduction::Mean).unwrap();
        total_loss(cls, kd, lambda)
    });
    relative_error(&analytic, &num)
}
