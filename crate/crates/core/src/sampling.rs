//! Ethnicity-aware merging of dataset manifests.
//!
//! Every identity is scored by the mean of its images' soft group labels:
//! the identity joins the group with the largest mean mass, and that mass is
//! its score. Merging concatenates the inputs and keeps, per group, the
//! highest-scoring identities up to an equal share of the requested total.
//! Ties are broken by identity id. A group that cannot fill its share keeps
//! everything it has and the gap is recorded as a [`Shortfall`]; quota is
//! never moved to other groups.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, ManifestEntry, Shortfall, Source};
use crate::parallel::{self, Execution};

/// Arithmetic mean of the soft-label vectors of one identity's images.
pub fn identity_soft_label<'a, I>(labels: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut iter = labels.into_iter();
    let first = iter.next().ok_or(Error::EmptyIdentity)?;
    let mut sum = first.to_vec();
    let mut n = 1usize;
    for l in iter {
        if l.len() != sum.len() {
            return Err(Error::DimensionMismatch {
                expected: sum.len(),
                actual: l.len(),
            });
        }
        sum.iter_mut().zip(l).for_each(|(s, x)| *s += x);
        n += 1;
    }
    sum.iter_mut().for_each(|s| *s /= n as f64);
    Ok(sum)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentityScore {
    pub identity_id: String,
    pub group: usize,
    pub score: f64,
    pub source: Source,
}

/// Argmax group (lowest index on ties) and its mass.
pub fn score_identity(mean_labels: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (g, &p) in mean_labels.iter().enumerate() {
        if p > best.1 {
            best = (g, p);
        }
    }
    best
}

/// Scores every identity of a manifest, in first-appearance order.
pub fn identity_scores(manifest: &DatasetManifest, exec: Execution) -> Result<Vec<IdentityScore>> {
    let groups = manifest.by_identity();
    parallel::map_slice(exec, &groups, |(id, entries)| {
        let mean = identity_soft_label(entries.iter().map(|e| e.soft_labels.as_slice()))?;
        let (group, score) = score_identity(&mean);
        Ok(IdentityScore {
            identity_id: id.to_string(),
            group,
            score,
            source: entries[0].source,
        })
    })
    .into_iter()
    .collect()
}

/// `⌊total/G⌋` per group, plus one for the first `total mod G` groups.
pub fn group_quotas(total: usize, groups: usize) -> Vec<usize> {
    (0..groups)
        .map(|g| total / groups + usize::from(g < total % groups))
        .collect()
}

/// Largest-remainder apportionment of `total` seats to `weights`;
/// remainder ties go to the lower index.
pub fn largest_remainder(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if weights.is_empty() || !(sum > 0.0) {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut seats: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = seats.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        seats[i] += 1;
    }
    seats
}

fn concat(manifests: &[DatasetManifest], name: &str) -> Result<DatasetManifest> {
    let groups = manifests
        .first()
        .map(|m| m.groups)
        .ok_or(Error::EmptyInput)?;
    let mut owner: HashMap<&str, &str> = HashMap::new();
    let mut out = DatasetManifest::new(name, groups);
    for m in manifests {
        if m.groups != groups {
            return Err(Error::InvalidManifest(format!(
                "`{}` has {} groups, expected {groups}",
                m.name, m.groups
            )));
        }
        m.validate()?;
        for id in m.identities() {
            if let Some(first) = owner.insert(id, &m.name) {
                return Err(Error::DuplicateIdentityAcrossSources {
                    identity: id.to_string(),
                    first: first.to_string(),
                    second: m.name.clone(),
                });
            }
        }
        out.entries.extend(m.entries.iter().cloned());
    }
    out.validate()?;
    Ok(out)
}

/// Picks the `quota` best identities of a cell. Returns the kept ids and
/// the number available.
fn select_top<'a>(cell: &mut [&'a IdentityScore], quota: usize) -> (Vec<&'a str>, usize) {
    cell.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.identity_id.cmp(&b.identity_id))
    });
    let kept = cell
        .iter()
        .take(quota)
        .map(|s| s.identity_id.as_str())
        .collect();
    (kept, cell.len())
}

fn filter_entries(
    all: DatasetManifest,
    kept: &HashSet<&str>,
    shortfalls: Vec<Shortfall>,
) -> DatasetManifest {
    let DatasetManifest {
        name,
        groups,
        entries,
        ..
    } = all;
    let entries: Vec<ManifestEntry> = entries
        .into_iter()
        .filter(|e| kept.contains(e.identity_id.as_str()))
        .collect();
    DatasetManifest {
        name,
        groups,
        entries,
        meta: BTreeMap::new(),
        shortfalls,
    }
}

/// Concatenates `manifests` and keeps a group-balanced set of
/// `total_identities` identities, all images of each kept identity included.
pub fn balanced_merge(
    manifests: &[DatasetManifest],
    total_identities: usize,
) -> Result<DatasetManifest> {
    balanced_merge_with(manifests, total_identities, Execution::default())
}

pub fn balanced_merge_with(
    manifests: &[DatasetManifest],
    total_identities: usize,
    exec: Execution,
) -> Result<DatasetManifest> {
    let all = concat(manifests, "merged")?;
    let g = all.groups;
    if total_identities < g {
        return Err(Error::InvalidConfig(format!(
            "total identities {total_identities} is below the group count {g}"
        )));
    }
    let scores = identity_scores(&all, exec)?;
    let mut cells: Vec<Vec<&IdentityScore>> = vec![Vec::new(); g];
    for s in &scores {
        cells[s.group].push(s);
    }
    let mut kept = HashSet::new();
    let mut shortfalls = Vec::new();
    for (group, (cell, quota)) in cells
        .iter_mut()
        .zip(group_quotas(total_identities, g))
        .enumerate()
    {
        let (ids, available) = select_top(cell, quota);
        if available < quota {
            shortfalls.push(Shortfall {
                group,
                source: None,
                requested: quota,
                available,
            });
        }
        kept.extend(ids);
    }
    Ok(filter_entries(all, &kept, shortfalls))
}

/// Real identity count for a mix: two-party largest remainder between the
/// real and synthetic shares of `total`.
pub fn mix_real_total(total: usize, real_fraction: f64) -> usize {
    largest_remainder(total, &[real_fraction, 1.0 - real_fraction])[0]
}

/// Per-group `(real, synthetic)` identity quotas for a mix.
pub fn mix_quotas(total: usize, groups: usize, real_fraction: f64) -> Vec<(usize, usize)> {
    let quotas = group_quotas(total, groups);
    let real_total = mix_real_total(total, real_fraction);
    let weights: Vec<f64> = quotas.iter().map(|&q| q as f64).collect();
    let real = largest_remainder(real_total, &weights);
    quotas.iter().zip(real).map(|(&q, r)| (r, q - r)).collect()
}

/// Merges real and synthetic pools into a group-balanced mix with
/// `real_fraction` of the identities drawn from the real pool.
pub fn mix_merge(
    real: &[DatasetManifest],
    synthetic: &[DatasetManifest],
    real_fraction: f64,
    total_identities: usize,
) -> Result<DatasetManifest> {
    mix_merge_with(
        real,
        synthetic,
        real_fraction,
        total_identities,
        Execution::default(),
    )
}

pub fn mix_merge_with(
    real: &[DatasetManifest],
    synthetic: &[DatasetManifest],
    real_fraction: f64,
    total_identities: usize,
    exec: Execution,
) -> Result<DatasetManifest> {
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::InvalidConfig(
            "mix needs both a real and a synthetic pool".into(),
        ));
    }
    if !(real_fraction > 0.0 && real_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "real fraction must lie in (0, 1), got {real_fraction}"
        )));
    }
    let mut inputs: Vec<DatasetManifest> = real.to_vec();
    inputs.extend(synthetic.iter().cloned());
    for (m, expected) in inputs.iter().zip(
        std::iter::repeat_n(Source::Real, real.len()).chain(std::iter::repeat(Source::Synthetic)),
    ) {
        if let Some(e) = m.entries.iter().find(|e| e.source != expected) {
            return Err(Error::InvalidManifest(format!(
                "`{}` is in the {expected} pool but sample `{}` is {}",
                m.name, e.sample_id, e.source
            )));
        }
    }
    let all = concat(&inputs, "mix")?;
    let g = all.groups;
    if total_identities < g {
        return Err(Error::InvalidConfig(format!(
            "total identities {total_identities} is below the group count {g}"
        )));
    }
    let scores = identity_scores(&all, exec)?;
    let mut cells: BTreeMap<(usize, Source), Vec<&IdentityScore>> = BTreeMap::new();
    for s in &scores {
        cells.entry((s.group, s.source)).or_default().push(s);
    }
    let mut kept = HashSet::new();
    let mut shortfalls = Vec::new();
    for (group, (real_q, syn_q)) in mix_quotas(total_identities, g, real_fraction)
        .into_iter()
        .enumerate()
    {
        for (source, quota) in [(Source::Real, real_q), (Source::Synthetic, syn_q)] {
            let mut empty = Vec::new();
            let cell = cells.get_mut(&(group, source)).unwrap_or(&mut empty);
            let (ids, available) = select_top(cell, quota);
            if available < quota {
                shortfalls.push(Shortfall {
                    group,
                    source: Some(source),
                    requested: quota,
                    available,
                });
            }
            kept.extend(ids);
        }
    }
    Ok(filter_entries(all, &kept, shortfalls))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CellCount {
    pub identities: usize,
    pub images: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ManifestStats {
    /// Keyed by (assigned group, source).
    pub cells: BTreeMap<(usize, Source), CellCount>,
}

impl ManifestStats {
    pub fn identities(&self) -> usize {
        self.cells.values().map(|c| c.identities).sum()
    }

    pub fn images(&self) -> usize {
        self.cells.values().map(|c| c.images).sum()
    }

    pub fn group_identities(&self, groups: usize) -> Vec<usize> {
        let mut out = vec![0; groups];
        for ((g, _), c) in &self.cells {
            if *g < groups {
                out[*g] += c.identities;
            }
        }
        out
    }

    pub fn source_identities(&self, source: Source) -> usize {
        self.cells
            .iter()
            .filter(|((_, s), _)| *s == source)
            .map(|(_, c)| c.identities)
            .sum()
    }

    /// Fraction of identities from the real source; zero for an empty manifest.
    pub fn real_share(&self) -> f64 {
        let total = self.identities();
        if total == 0 {
            0.0
        } else {
            self.source_identities(Source::Real) as f64 / total as f64
        }
    }
}

/// Identity and image counts per (group, source).
pub fn manifest_stats(manifest: &DatasetManifest) -> ManifestStats {
    let mut stats = ManifestStats::default();
    for (_, entries) in manifest.by_identity() {
        let Ok(mean) = identity_soft_label(entries.iter().map(|e| e.soft_labels.as_slice())) else {
            continue;
        };
        let (group, _) = score_identity(&mean);
        let cell = stats.cells.entry((group, entries[0].source)).or_default();
        cell.identities += 1;
        cell.images += entries.len();
    }
    stats
}
