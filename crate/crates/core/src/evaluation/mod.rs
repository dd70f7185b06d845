//! Pair verification, threshold selection and group fairness metrics.

mod fixture;
mod protocol;
mod report;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::geometry::cosine_similarity;
use crate::manifest::FeatureStore;
use crate::parallel::{self, Execution};
use crate::rng::rng_for;

pub use fixture::{verify_fixture, FixtureCheck, FixtureRow, PublishedFixture};
pub use protocol::{GroupProtocol, PairProtocol, ProtocolPair, PROTOCOL_MAGIC};
pub use report::{
    build_report, render_table, round_half_away, EvalReport, GroupAccuracy, ReportMetadata,
    TableFormat, REPORT_SCHEMA,
};

pub const DEFAULT_FOLDS: usize = 10;

/// Cosine score and ground truth for every pair of `group`, in protocol
/// order. Each distinct sample is embedded once.
pub fn score_pairs<F>(
    embed: F,
    group: &GroupProtocol,
    store: &FeatureStore,
    exec: Execution,
) -> Result<Vec<(f64, bool)>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    let mut ids: Vec<&str> = Vec::new();
    let mut index = std::collections::HashMap::new();
    for p in &group.pairs {
        for id in [p.sample_a.as_str(), p.sample_b.as_str()] {
            if !index.contains_key(id) {
                store.get(id)?;
                index.insert(id, ids.len());
                ids.push(id);
            }
        }
    }
    let embeddings: Vec<Vec<f64>> = parallel::map_slice(exec, &ids, |id| {
        embed(store.get(id).expect("presence checked"))
    })
    .into_iter()
    .collect::<Result<_>>()?;
    parallel::map_slice(exec, &group.pairs, |p| {
        let a = &embeddings[index[p.sample_a.as_str()]];
        let b = &embeddings[index[p.sample_b.as_str()]];
        Ok((cosine_similarity(a, b)?, p.same))
    })
    .into_iter()
    .collect()
}

fn check_scores(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite { what: "scores" });
    }
    Ok(())
}

/// Candidate thresholds in increasing order with the number of correct
/// predictions each one yields under `same ⇔ score ≥ t`.
fn threshold_sweep(scores: &[f64], labels: &[bool]) -> Vec<(f64, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut correct = labels.iter().filter(|&&l| l).count();
    let mut out = vec![(f64::NEG_INFINITY, correct)];
    let mut i = 0;
    while i < order.len() {
        let v = scores[order[i]];
        while i < order.len() && scores[order[i]] == v {
            if labels[order[i]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let t = match order.get(i) {
            Some(&next) => {
                let hi = scores[next];
                let mid = v + (hi - v) / 2.0;
                if mid > v {
                    mid
                } else {
                    hi
                }
            }
            None => f64::INFINITY,
        };
        out.push((t, correct));
    }
    out
}

/// Threshold maximizing accuracy over the midpoints of adjacent distinct
/// scores and the two infinite sentinels. The lowest maximizer wins.
pub fn best_threshold_accuracy(scores: &[f64], labels: &[bool]) -> Result<(f64, f64)> {
    check_scores(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut best = (f64::NEG_INFINITY, 0usize);
    for (i, (t, c)) in threshold_sweep(scores, labels).into_iter().enumerate() {
        if i == 0 || c > best.1 {
            best = (t, c);
        }
    }
    Ok((best.0, 100.0 * best.1 as f64 / scores.len() as f64))
}

/// Accuracy in percent of `same ⇔ score ≥ threshold`.
pub fn accuracy_at(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_scores(scores, labels)?;
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    let correct = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == l)
        .count();
    Ok(100.0 * correct as f64 / scores.len() as f64)
}

/// Fold index of every pair. Positives and negatives are shuffled
/// separately and dealt round-robin, so fold sizes differ by at most one
/// and every fold carries its share of each class.
pub fn stratified_folds(labels: &[bool], k: usize, seed: u64) -> Vec<usize> {
    let mut rng = rng_for(seed, &["kfold"]);
    let mut pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let mut neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);
    let mut fold = vec![0; labels.len()];
    for (slot, &i) in pos.iter().chain(&neg).enumerate() {
        fold[i] = slot % k;
    }
    fold
}

/// Mean held-out accuracy over `k` stratified folds, fitting the threshold
/// on the remaining `k − 1` folds each time.
pub fn kfold_verification_accuracy(
    scores: &[f64],
    labels: &[bool],
    k: usize,
    seed: u64,
) -> Result<f64> {
    check_scores(scores, labels)?;
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "k-fold needs k >= 2, got {k}"
        )));
    }
    if scores.len() < k {
        return Err(Error::TooFewPairs {
            needed: k,
            got: scores.len(),
        });
    }
    let fold = stratified_folds(labels, k, seed);
    let mut total = 0.0;
    for f in 0..k {
        let (mut fit_s, mut fit_l, mut held_s, mut held_l) = (vec![], vec![], vec![], vec![]);
        for i in 0..scores.len() {
            if fold[i] == f {
                held_s.push(scores[i]);
                held_l.push(labels[i]);
            } else {
                fit_s.push(scores[i]);
                fit_l.push(labels[i]);
            }
        }
        let (t, _) = best_threshold_accuracy(&fit_s, &fit_l)?;
        total += accuracy_at(&held_s, &held_l, t)?;
    }
    Ok(total / k as f64)
}

/// Sample standard deviation (divisor `G − 1`).
pub fn fairness_std(accuracies: &[f64]) -> Result<f64> {
    if accuracies.len() < 2 {
        return Err(Error::TooFewGroups(accuracies.len()));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let ss: f64 = accuracies.iter().map(|a| (a - mean) * (a - mean)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

/// Skewed error ratio `(100 − min) / (100 − max)`.
pub fn ser(accuracies: &[f64]) -> Result<f64> {
    if accuracies.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = accuracies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = accuracies.iter().copied().fold(f64::INFINITY, f64::min);
    if max >= 100.0 {
        return Err(Error::DegenerateDenominator);
    }
    Ok((100.0 - min) / (100.0 - max))
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Verification settings for [`evaluate_protocol`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationConfig {
    pub folds: usize,
    pub seed: u64,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        VerificationConfig {
            folds: DEFAULT_FOLDS,
            seed: 0,
        }
    }
}

/// k-fold verification accuracy of every protocol group, in protocol order.
pub fn evaluate_protocol<F>(
    embed: F,
    protocol: &PairProtocol,
    store: &FeatureStore,
    cfg: VerificationConfig,
    exec: Execution,
) -> Result<Vec<GroupAccuracy>>
where
    F: Fn(&[f64]) -> Result<Vec<f64>> + Sync,
{
    parallel::try_map_range(exec, protocol.groups.len(), |g| {
        let group = &protocol.groups[g];
        let scored = score_pairs(&embed, group, store, Execution::Sequential)?;
        let (scores, labels): (Vec<f64>, Vec<bool>) = scored.into_iter().unzip();
        let seed = crate::rng::derive_seed(cfg.seed, &["verify", &group.name]);
        Ok(GroupAccuracy {
            group: group.name.clone(),
            accuracy: kfold_verification_accuracy(&scores, &labels, cfg.folds, seed)?,
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn threshold_examples() {
        let (_, acc) =
            best_threshold_accuracy(&[0.9, 0.8, 0.3, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(acc, 100.0);
        let (_, acc) = best_threshold_accuracy(&[0.9, 0.2], &[false, true]).unwrap();
        assert_eq!(acc, 50.0);
        let (t, acc) = best_threshold_accuracy(&[0.4, 0.1, 0.7], &[true; 3]).unwrap();
        assert_eq!((t, acc), (f64::NEG_INFINITY, 100.0));
        assert!(matches!(
            best_threshold_accuracy(&[], &[]),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn adjacent_floats_still_separate() {
        let a = 0.5f64;
        let b = f64::from_bits(a.to_bits() + 1);
        let (t, acc) = best_threshold_accuracy(&[a, b], &[false, true]).unwrap();
        assert_eq!(acc, 100.0);
        assert!(t > a && t <= b);
    }

    #[test]
    fn kfold_examples() {
        let scores = [0.9, 0.8, 0.3, 0.1];
        let labels = [true, true, false, false];
        assert_eq!(
            kfold_verification_accuracy(&scores, &labels, 2, 3).unwrap(),
            100.0
        );
        assert!(matches!(
            kfold_verification_accuracy(&scores, &labels, 10, 3),
            Err(Error::TooFewPairs { needed: 10, got: 4 })
        ));

        let mut rng = crate::rng::rng_from_seed(8);
        let n = 4000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let acc = kfold_verification_accuracy(&scores, &labels, 10, 1).unwrap();
        assert!((acc - 50.0).abs() <= 3.0, "{acc}");
    }

    #[test]
    fn folds_are_stratified() {
        let labels: Vec<bool> = (0..37).map(|i| i % 3 == 0).collect();
        let fold = stratified_folds(&labels, 10, 4);
        for f in 0..10 {
            let size = fold.iter().filter(|&&x| x == f).count();
            assert!((3..=4).contains(&size));
        }
        let pos_per_fold: Vec<usize> = (0..10)
            .map(|f| (0..37).filter(|&i| fold[i] == f && labels[i]).count())
            .collect();
        let (lo, hi) = (
            pos_per_fold.iter().min().unwrap(),
            pos_per_fold.iter().max().unwrap(),
        );
        assert!(hi - lo <= 1);
    }

    #[test]
    fn metric_examples() {
        let r100 = [97.40, 96.07, 95.52, 95.95];
        let kd_syn = [95.63, 93.20, 92.25, 91.55];
        assert_abs_diff_eq!(fairness_std(&r100).unwrap(), 0.81, epsilon = 0.005);
        assert_abs_diff_eq!(fairness_std(&kd_syn).unwrap(), 1.78, epsilon = 0.005);
        assert_abs_diff_eq!(ser(&r100).unwrap(), 1.72, epsilon = 0.005);
        assert_abs_diff_eq!(ser(&kd_syn).unwrap(), 1.93, epsilon = 0.005);
        assert_eq!(fairness_std(&[91.0; 4]).unwrap(), 0.0);
        assert_eq!(ser(&[91.0; 4]).unwrap(), 1.0);
        assert!(matches!(fairness_std(&[90.0]), Err(Error::TooFewGroups(1))));
        assert!(matches!(
            ser(&[90.0, 100.0]),
            Err(Error::DegenerateDenominator)
        ));
    }

    proptest! {
        #[test]
        fn std_translation_and_scale(
            acc in prop::collection::vec(50.0f64..99.0, 2..8),
            c in -40.0f64..40.0,
            k in 0.1f64..3.0,
        ) {
            let base = fairness_std(&acc).unwrap();
            let shifted: Vec<f64> = acc.iter().map(|a| a + c).collect();
            let scaled: Vec<f64> = acc.iter().map(|a| a * k).collect();
            prop_assert!((fairness_std(&shifted).unwrap() - base).abs() < 1e-9);
            prop_assert!((fairness_std(&scaled).unwrap() - k * base).abs() < 1e-9);
        }

        #[test]
        fn ser_bounds_and_permutation(
            acc in prop::collection::vec(50.0f64..99.99, 1..8),
            rot in 0usize..8,
        ) {
            let s = ser(&acc).unwrap();
            prop_assert!(s >= 1.0);
            let all_equal = acc.iter().all(|&a| a == acc[0]);
            prop_assert_eq!(s == 1.0, all_equal);
            let mut p = acc.clone();
            p.rotate_left(rot % acc.len());
            prop_assert_eq!(ser(&p).unwrap(), s);
            prop_assert!((mean(&p).unwrap() - mean(&acc).unwrap()).abs() < 1e-9);
            if acc.len() > 1 {
                prop_assert!((fairness_std(&p).unwrap() - fairness_std(&acc).unwrap()).abs() < 1e-9);
            }
        }

        #[test]
        // The gap between classes exceeds the spread within each class, so
        // every fitted midpoint also separates the held-out fold.
        fn kfold_is_perfect_with_wide_margin(
            pos in prop::collection::vec(0.8f64..1.0, 5..30),
            neg in prop::collection::vec(0.0f64..0.2, 5..30),
            k in 2usize..6,
            seed in any::<u64>(),
        ) {
            let scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
            let labels: Vec<bool> = (0..scores.len()).map(|i| i < pos.len()).collect();
            prop_assert_eq!(best_threshold_accuracy(&scores, &labels).unwrap().1, 100.0);
            prop_assert_eq!(kfold_verification_accuracy(&scores, &labels, k, seed).unwrap(), 100.0);
        }
    }
}
