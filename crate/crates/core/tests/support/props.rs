//! Strategies and checks shared by the property tests and the acceptance run.

use std::collections::{BTreeMap, HashSet};

use fairkd::manifest::{DatasetManifest, Source};
use fairkd::parallel::Execution;
use fairkd::sampling::{balanced_merge, group_quotas, identity_scores, manifest_stats, mix_merge};
use fairkd::synthdata::gen_pair_protocol;
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

use super::{build_manifest, normalized, IdentitySpec};

/// Identities with a dominant group drawn per identity.
fn identities(groups: usize, max: usize) -> impl Strategy<Value = Vec<(usize, Vec<f64>, usize)>> {
    prop::collection::vec(
        (
            0..groups,
            0.3f64..3.0,
            prop::collection::vec(0.01f64..1.0, groups),
            1usize..4,
        ),
        0..max,
    )
    .prop_map(|raw| {
        raw.into_iter()
            .map(|(g, boost, mut weights, images)| {
                weights[g] += boost;
                (g, normalized(&weights), images)
            })
            .collect()
    })
}

/// One to three manifests over `groups` groups with distinct identity ids.
pub fn manifest_pools(groups: usize) -> impl Strategy<Value = Vec<DatasetManifest>> {
    prop::collection::vec(identities(groups, 25), 1..4).prop_map(move |sets| {
        sets.into_iter()
            .enumerate()
            .map(|(k, ids)| {
                let specs: Vec<IdentitySpec> = ids
                    .into_iter()
                    .enumerate()
                    .map(|(i, (_, labels, images))| IdentitySpec {
                        id: format!("m{k}-{i:04}"),
                        source: Source::Synthetic,
                        labels,
                        images,
                    })
                    .collect();
                build_manifest(&format!("m{k}"), groups, &specs)
            })
            .collect()
    })
}

pub fn merge_case() -> impl Strategy<Value = (usize, Vec<DatasetManifest>, usize)> {
    (2usize..5).prop_flat_map(|g| (Just(g), manifest_pools(g), g..80usize))
}

fn scores_by_id(manifests: &[DatasetManifest]) -> BTreeMap<String, (usize, f64)> {
    manifests
        .iter()
        .flat_map(|m| identity_scores(m, Execution::Sequential).unwrap())
        .map(|s| (s.identity_id, (s.group, s.score)))
        .collect()
}

/// Group counts follow the quotas (capped by supply), differ by at most one
/// when no quota falls short, and no dropped identity outranks a kept one.
pub fn check_balanced_merge(
    groups: usize,
    inputs: &[DatasetManifest],
    total: usize,
) -> Result<(), TestCaseError> {
    let merged = balanced_merge(inputs, total).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let scores = scores_by_id(inputs);
    let kept: HashSet<&str> = merged.identities().into_iter().collect();
    let quotas = group_quotas(total, groups);
    let counts = manifest_stats(&merged).group_identities(groups);

    for g in 0..groups {
        let available = scores.values().filter(|(gg, _)| *gg == g).count();
        prop_assert_eq!(counts[g], quotas[g].min(available));
        let short = merged.shortfalls.iter().any(|s| s.group == g);
        prop_assert_eq!(short, available < quotas[g]);

        let (scores, kept) = (&scores, &kept);
        let in_group = |keep: bool| {
            scores
                .iter()
                .filter(move |(id, (gg, _))| *gg == g && kept.contains(id.as_str()) == keep)
                .map(|(_, (_, s))| *s)
        };
        let min_kept = in_group(true).fold(f64::INFINITY, f64::min);
        let max_dropped = in_group(false).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(
            min_kept >= max_dropped,
            "group {} kept {} < dropped {}",
            g,
            min_kept,
            max_dropped
        );
    }
    if merged.shortfalls.is_empty() {
        let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
        prop_assert!(hi - lo <= 1, "{:?}", counts);
    }
    let images: usize = inputs
        .iter()
        .flat_map(|m| &m.entries)
        .filter(|e| kept.contains(e.identity_id.as_str()))
        .count();
    prop_assert_eq!(images, merged.len());
    Ok(())
}

pub fn mix_case() -> impl Strategy<Value = (usize, usize, f64)> {
    (2usize..5, 4usize..60, 0.3f64..3.0).prop_filter("total below group count", |(g, t, _)| t >= g)
}

/// With ample supply in every cell, the real share of a 0.7 mix is within
/// `1/total` of the request and groups stay balanced.
pub fn check_mix(groups: usize, total: usize, bias: f64) -> Result<(), TestCaseError> {
    let cell = |prefix: &str, source: Source| -> Vec<IdentitySpec> {
        (0..groups * total)
            .map(|i| {
                let g = i % groups;
                let mut w = vec![0.1; groups];
                w[g] += bias + (i as f64) * 1e-3;
                IdentitySpec {
                    id: format!("{prefix}-{i:04}"),
                    source,
                    labels: normalized(&w),
                    images: 1 + i % 2,
                }
            })
            .collect()
    };
    let real = build_manifest("real", groups, &cell("r", Source::Real));
    let synth = build_manifest("syn", groups, &cell("s", Source::Synthetic));
    let mix =
        mix_merge(&[real], &[synth], 0.7, total).map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert!(mix.shortfalls.is_empty());
    let stats = manifest_stats(&mix);
    prop_assert_eq!(stats.identities(), total);
    prop_assert!(
        (stats.real_share() - 0.7).abs() <= 1.0 / total as f64 + 1e-12,
        "share {} total {}",
        stats.real_share(),
        total
    );
    let counts = stats.group_identities(groups);
    prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
    Ok(())
}

pub fn protocol_case() -> impl Strategy<Value = (usize, Vec<usize>, f64, u64)> {
    (
        1usize..5,
        prop::collection::vec(2usize..7, 4..24),
        0.05f64..1.0,
        any::<u64>(),
    )
}

fn choose2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Balanced positives and negatives, no repeated pair, pairs labelled by
/// identity and every sample inside its own group.
pub fn check_protocol(
    groups: usize,
    images: &[usize],
    fraction: f64,
    seed: u64,
) -> Result<(), TestCaseError> {
    let ids: Vec<IdentitySpec> = images
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            let mut labels = vec![0.0; groups];
            labels[i % groups] = 1.0;
            IdentitySpec {
                id: format!("id-{i:04}"),
                source: Source::Real,
                labels,
                images: n,
            }
        })
        .collect();
    let manifest = build_manifest("eval", groups, &ids);

    // Largest pair count every group can supply on both sides.
    let mut cap = usize::MAX;
    for g in 0..groups {
        let sizes: Vec<usize> = images
            .iter()
            .enumerate()
            .filter(|(i, _)| i % groups == g)
            .map(|(_, &n)| n)
            .collect();
        let pos: usize = sizes.iter().map(|&n| choose2(n)).sum();
        let neg = choose2(sizes.iter().sum()) - pos;
        cap = cap.min(pos.min(neg));
    }
    if cap == 0 {
        return Ok(());
    }
    let half = ((cap as f64 * fraction).ceil() as usize).clamp(1, cap);
    let protocol = gen_pair_protocol(&manifest, 2 * half, seed)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;

    prop_assert_eq!(protocol.groups.len(), groups);
    let identity_of = |s: &str| s.rsplit_once('-').unwrap().0.to_string();
    for g in &protocol.groups {
        prop_assert_eq!(g.positives(), half);
        prop_assert_eq!(g.negatives(), half);
        let mut seen = HashSet::new();
        for p in &g.pairs {
            let key = if p.sample_a < p.sample_b {
                (&p.sample_a, &p.sample_b)
            } else {
                (&p.sample_b, &p.sample_a)
            };
            prop_assert!(seen.insert(key), "duplicate pair {:?}", key);
            prop_assert_ne!(&p.sample_a, &p.sample_b);
            prop_assert_eq!(p.same, identity_of(&p.sample_a) == identity_of(&p.sample_b));
        }
    }
    protocol
        .validate()
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    protocol
        .validate_against(&manifest)
        .map_err(|e| TestCaseError::fail(e.to_string()))?;
    let again = gen_pair_protocol(&manifest, 2 * half, seed).unwrap();
    prop_assert_eq!(protocol.to_text(), again.to_text());
    Ok(())
}
