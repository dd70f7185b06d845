use std::collections::{BTreeMap, HashSet};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::evaluation::{GroupProtocol, PairProtocol, ProtocolPair};
use crate::manifest::DatasetManifest;
use crate::rng::{rng_for, Rng};
use crate::sampling::{identity_soft_label, score_identity};

pub fn group_name(g: usize) -> String {
    format!("g{g}")
}

/// Samples of each group's identities, in manifest order.
fn group_pools<'a>(
    manifest: &'a DatasetManifest,
    excluded: &HashSet<&str>,
) -> Result<Vec<Vec<Vec<&'a str>>>> {
    let mut pools = vec![Vec::new(); manifest.groups];
    for (id, entries) in manifest.by_identity() {
        if excluded.contains(id) {
            continue;
        }
        let label = identity_soft_label(entries.iter().map(|e| e.soft_labels.as_slice()))?;
        let (g, _) = score_identity(&label);
        pools[g].push(entries.iter().map(|e| e.sample_id.as_str()).collect());
    }
    Ok(pools)
}

fn choose2(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Draws `need` distinct unordered pairs. Small candidate sets are
/// enumerated; large ones are sampled by rejection.
fn draw_pairs<'a>(
    need: usize,
    available: usize,
    enumerate: impl Fn() -> Vec<(&'a str, &'a str)>,
    random: impl Fn(&mut Rng) -> (&'a str, &'a str),
    rng: &mut Rng,
) -> Vec<(&'a str, &'a str)> {
    if need * 2 >= available {
        let all = enumerate();
        return rand::seq::index::sample(rng, all.len(), need)
            .into_iter()
            .map(|i| all[i])
            .collect();
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(need);
    while out.len() < need {
        let (a, b) = random(rng);
        let key = if a < b { (a, b) } else { (b, a) };
        if seen.insert(key) {
            out.push((a, b));
        }
    }
    out
}

fn group_protocol(
    g: usize,
    pool: &[Vec<&str>],
    pairs_per_group: usize,
    seed: u64,
) -> Result<GroupProtocol> {
    let name = group_name(g);
    let half = pairs_per_group / 2;
    if half == 0 {
        return Ok(GroupProtocol {
            name,
            pairs: vec![],
        });
    }
    if pool.len() < 2 {
        return Err(Error::InsufficientIdentities {
            group: group_name(g),
            reason: format!("{} identities, at least 2 needed", pool.len()),
        });
    }
    let multi: Vec<&Vec<&str>> = pool.iter().filter(|s| s.len() >= 2).collect();
    let positives_available: usize = multi.iter().map(|s| choose2(s.len())).sum();
    if positives_available < half {
        return Err(Error::InsufficientIdentities {
            group: group_name(g),
            reason: format!("{positives_available} same-identity pairs available, {half} needed"),
        });
    }
    let total: usize = pool.iter().map(Vec::len).sum();
    let negatives_available = choose2(total) - pool.iter().map(|s| choose2(s.len())).sum::<usize>();
    if negatives_available < half {
        return Err(Error::InsufficientIdentities {
            group: group_name(g),
            reason: format!("{negatives_available} cross-identity pairs available, {half} needed"),
        });
    }

    let mut rng = rng_for(seed, &["protocol", &name]);
    let positives = draw_pairs(
        half,
        positives_available,
        || {
            let mut all = Vec::new();
            for s in &multi {
                for i in 0..s.len() {
                    for j in i + 1..s.len() {
                        all.push((s[i], s[j]));
                    }
                }
            }
            all
        },
        |rng| {
            let s = multi[rng.random_range(0..multi.len())];
            let i = rng.random_range(0..s.len());
            let mut j = rng.random_range(0..s.len() - 1);
            if j >= i {
                j += 1;
            }
            (s[i], s[j])
        },
        &mut rng,
    );
    let negatives = draw_pairs(
        half,
        negatives_available,
        || {
            let mut all = Vec::new();
            for a in 0..pool.len() {
                for b in a + 1..pool.len() {
                    for &x in &pool[a] {
                        for &y in &pool[b] {
                            all.push((x, y));
                        }
                    }
                }
            }
            all
        },
        |rng| {
            let a = rng.random_range(0..pool.len());
            let mut b = rng.random_range(0..pool.len() - 1);
            if b >= a {
                b += 1;
            }
            let x = pool[a][rng.random_range(0..pool[a].len())];
            let y = pool[b][rng.random_range(0..pool[b].len())];
            (x, y)
        },
        &mut rng,
    );
    let pair = |(a, b): (&str, &str), same| ProtocolPair {
        sample_a: a.to_string(),
        sample_b: b.to_string(),
        same,
    };
    let mut pairs: Vec<ProtocolPair> = positives.into_iter().map(|p| pair(p, true)).collect();
    pairs.extend(negatives.into_iter().map(|p| pair(p, false)));
    Ok(GroupProtocol { name, pairs })
}

fn build(
    manifest: &DatasetManifest,
    excluded: &HashSet<&str>,
    pairs_per_group: usize,
    seed: u64,
) -> Result<PairProtocol> {
    if pairs_per_group % 2 != 0 {
        return Err(Error::OddPairCount(pairs_per_group));
    }
    let pools = group_pools(manifest, excluded)?;
    let groups = pools
        .iter()
        .enumerate()
        .map(|(g, pool)| group_protocol(g, pool, pairs_per_group, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(PairProtocol {
        groups,
        meta: BTreeMap::from([
            ("manifest".to_string(), manifest.name.clone()),
            ("pairs_per_group".to_string(), pairs_per_group.to_string()),
            ("seed".to_string(), seed.to_string()),
        ]),
    })
}

/// `pairs_per_group / 2` same-identity and as many cross-identity pairs per
/// group, with no repeated unordered pair. A sample's group is the dominant
/// soft label of its identity.
pub fn gen_pair_protocol(
    manifest: &DatasetManifest,
    pairs_per_group: usize,
    seed: u64,
) -> Result<PairProtocol> {
    build(manifest, &HashSet::new(), pairs_per_group, seed)
}

/// As [`gen_pair_protocol`], skipping every identity that appears in any of
/// the `training` manifests.
pub fn gen_pair_protocol_holdout(
    manifest: &DatasetManifest,
    training: &[&DatasetManifest],
    pairs_per_group: usize,
    seed: u64,
) -> Result<PairProtocol> {
    let excluded: HashSet<&str> = training
        .iter()
        .flat_map(|m| m.entries.iter().map(|e| e.identity_id.as_str()))
        .collect();
    build(manifest, &excluded, pairs_per_group, seed)
}
