//! Procedural toy universes: identities with group structure and
//! group-dependent hardness, a "real" source, distribution-shifted
//! "synthetic" sources, a held-out evaluation source, and balanced pair
//! protocols.
//!
//! Image features follow `x = M_g·(z + j) + A_g·n + σ_g·ε` where `z` is the
//! identity latent, `j` per-image identity jitter, `n` a nuisance latent
//! shared in distribution by all identities of a group, and `ε` pixel
//! noise. Every row of `M_g` and `A_g` equals its mirror row, so coordinate
//! reversal preserves the clean signal.

mod protocol;

use std::collections::BTreeMap;

use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{DatasetManifest, FeatureStore, ManifestEntry, Source};
use crate::parallel::{self, Execution};
use crate::rng::{rng_for, Rng};
use crate::sampling::largest_remainder;

pub use protocol::{gen_pair_protocol, gen_pair_protocol_holdout, group_name};

/// How the synthetic latent distribution departs from the real one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticShift {
    /// Norm of the offset added to every synthetic identity latent.
    pub mean_shift: f64,
    /// Identity spread multiplier on the uncollapsed latent directions.
    pub inflate: f64,
    /// Identity spread multiplier on the collapsed latent directions.
    pub collapse: f64,
    pub collapsed_dims: usize,
    /// Per-image jitter multiplier on the collapsed latent directions.
    pub jitter_inflate: f64,
}

impl Default for SyntheticShift {
    fn default() -> Self {
        SyntheticShift {
            mean_shift: 1.0,
            inflate: 1.3,
            collapse: 0.15,
            collapsed_dims: 3,
            jitter_inflate: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UniverseConfig {
    pub n_groups: usize,
    pub real_identities: usize,
    pub synthetic_sources: usize,
    /// Identities in each synthetic source.
    pub synthetic_identities: usize,
    pub eval_identities: usize,
    pub images_per_identity: usize,
    pub eval_images_per_identity: usize,
    pub latent_dim: usize,
    pub nuisance_dim: usize,
    pub feature_dim: usize,
    /// Pixel noise scale of each group.
    pub noise_scales: Vec<f64>,
    pub group_mean_scale: f64,
    /// Size of each group's private perturbation of the shared mixing map.
    pub group_mixing: f64,
    pub nuisance_scale: f64,
    /// Per-image identity jitter of the real source.
    pub jitter_scale: f64,
    /// Dirichlet concentration on the true group; `inf` gives one-hot labels.
    pub label_concentration: f64,
    pub real_group_weights: Vec<f64>,
    pub synthetic_group_weights: Vec<f64>,
    pub synthetic: SyntheticShift,
    pub seed: u64,
}

impl Default for UniverseConfig {
    fn default() -> Self {
        UniverseConfig {
            n_groups: 4,
            real_identities: 160,
            synthetic_sources: 2,
            synthetic_identities: 80,
            eval_identities: 160,
            images_per_identity: 8,
            eval_images_per_identity: 6,
            latent_dim: 8,
            nuisance_dim: 4,
            feature_dim: 24,
            noise_scales: vec![0.25, 0.35, 0.45, 0.55],
            group_mean_scale: 0.7,
            group_mixing: 0.5,
            nuisance_scale: 1.0,
            jitter_scale: 0.35,
            label_concentration: 30.0,
            real_group_weights: vec![1.0; 4],
            synthetic_group_weights: vec![0.35, 0.3, 0.2, 0.15],
            synthetic: SyntheticShift::default(),
            seed: 0,
        }
    }
}

impl UniverseConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let g = self.n_groups;
        if g < 2 {
            return bad(format!("n_groups must be at least 2, got {g}"));
        }
        for (name, dim) in [
            ("latent_dim", self.latent_dim),
            ("nuisance_dim", self.nuisance_dim),
            ("feature_dim", self.feature_dim),
        ] {
            if dim < 2 {
                return bad(format!("{name} must be at least 2, got {dim}"));
            }
        }
        for (name, len) in [
            ("noise_scales", self.noise_scales.len()),
            ("real_group_weights", self.real_group_weights.len()),
            (
                "synthetic_group_weights",
                self.synthetic_group_weights.len(),
            ),
        ] {
            if len != g {
                return bad(format!("{name} has {len} entries for {g} groups"));
            }
        }
        if self
            .noise_scales
            .iter()
            .any(|s| !(*s >= 0.0 && s.is_finite()))
        {
            return bad(format!(
                "noise_scales must be non-negative: {:?}",
                self.noise_scales
            ));
        }
        for w in [&self.real_group_weights, &self.synthetic_group_weights] {
            if w.iter().any(|x| !(*x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
                return bad(format!(
                    "group weights must be non-negative and not all zero: {w:?}"
                ));
            }
        }
        for (name, v) in [
            ("group_mean_scale", self.group_mean_scale),
            ("group_mixing", self.group_mixing),
            ("nuisance_scale", self.nuisance_scale),
            ("jitter_scale", self.jitter_scale),
            ("synthetic.mean_shift", self.synthetic.mean_shift),
            ("synthetic.inflate", self.synthetic.inflate),
            ("synthetic.collapse", self.synthetic.collapse),
            ("synthetic.jitter_inflate", self.synthetic.jitter_inflate),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if self.synthetic.collapsed_dims > self.latent_dim {
            return bad(format!(
                "synthetic.collapsed_dims {} exceeds latent_dim {}",
                self.synthetic.collapsed_dims, self.latent_dim
            ));
        }
        if !(self.label_concentration > 0.0) {
            return bad(format!(
                "label_concentration must be positive, got {}",
                self.label_concentration
            ));
        }
        if self.images_per_identity == 0 || self.eval_images_per_identity == 0 {
            return bad("images per identity must be positive".into());
        }
        Ok(())
    }
}

/// Which population a source samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceKind {
    Real,
    Synthetic(usize),
    /// Held-out real identities for verification.
    Eval,
}

impl SourceKind {
    pub fn name(self) -> String {
        match self {
            SourceKind::Real => "real".into(),
            SourceKind::Synthetic(i) => format!("synth{i}"),
            SourceKind::Eval => "eval".into(),
        }
    }

    pub fn source(self) -> Source {
        match self {
            SourceKind::Synthetic(_) => Source::Synthetic,
            _ => Source::Real,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Identity {
    pub identity_id: String,
    pub kind: SourceKind,
    pub index: usize,
    pub group: usize,
    pub latent: Vec<f64>,
    pub soft_label: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub sample_id: String,
    pub identity_id: String,
    pub feature: Vec<f64>,
    pub soft_labels: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GeneratedSource {
    pub kind: SourceKind,
    pub identities: Vec<Identity>,
    pub manifest: DatasetManifest,
    pub features: FeatureStore,
}

#[derive(Debug, Clone)]
pub struct GeneratedUniverse {
    pub real: GeneratedSource,
    pub synthetic: Vec<GeneratedSource>,
    pub eval: GeneratedSource,
}

/// Fixed structure shared by all sources of one universe.
#[derive(Debug, Clone)]
pub struct Universe {
    cfg: UniverseConfig,
    group_means: Vec<Vec<f64>>,
    /// Per group, row-major `feature_dim × latent_dim`.
    mixing: Vec<Vec<f64>>,
    /// Per group, row-major `feature_dim × nuisance_dim`.
    nuisance: Vec<Vec<f64>>,
    synth_offset: Vec<f64>,
    synth_spread: Vec<f64>,
    synth_jitter: Vec<f64>,
}

fn normals(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// `rows × cols` map whose row `r` equals row `rows − 1 − r`.
fn mirrored(rows: usize, cols: usize, base: &[f64], scale: f64, rng: &mut Rng) -> Vec<f64> {
    let half = rows.div_ceil(2);
    let mut top = Vec::with_capacity(half * cols);
    for i in 0..half * cols {
        let z: f64 = StandardNormal.sample(rng);
        top.push(base.get(i).copied().unwrap_or(0.0) + scale * z);
    }
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        let src = r.min(rows - 1 - r);
        out[r * cols..(r + 1) * cols].copy_from_slice(&top[src * cols..(src + 1) * cols]);
    }
    out
}

fn mat_vec(m: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(m.chunks(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Normalized independent Gamma draws, i.e. a Dirichlet sample.
fn dirichlet(alpha: &[f64], rng: &mut Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.iter_mut().for_each(|d| *d /= sum);
        draws
    } else {
        let top = alpha
            .iter()
            .enumerate()
            .fold(0, |best, (i, &a)| if a > alpha[best] { i } else { best });
        one_hot(alpha.len(), top)
    }
}

fn one_hot(n: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

impl Universe {
    pub fn new(cfg: UniverseConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(cfg.seed, &["world"]);
        let (g, l, p, f) = (
            cfg.n_groups,
            cfg.latent_dim,
            cfg.nuisance_dim,
            cfg.feature_dim,
        );
        let group_means = (0..g)
            .map(|_| {
                normals(l, &mut rng)
                    .into_iter()
                    .map(|x| x * cfg.group_mean_scale)
                    .collect()
            })
            .collect();
        let latent_scale = 1.0 / (l as f64).sqrt();
        let nuisance_scale = 1.0 / (p as f64).sqrt();
        let shared = mirrored(f, l, &[], latent_scale, &mut rng);
        let mixing = (0..g)
            .map(|_| {
                let m = mirrored(f, l, &[], cfg.group_mixing * latent_scale, &mut rng);
                m.iter().zip(&shared).map(|(a, b)| a + b).collect()
            })
            .collect();
        let nuisance = (0..g)
            .map(|_| mirrored(f, p, &[], cfg.nuisance_scale * nuisance_scale, &mut rng))
            .collect();

        let dir = normals(l, &mut rng);
        let n = crate::geometry::norm(&dir).max(f64::MIN_POSITIVE);
        let synth_offset = dir
            .iter()
            .map(|d| d / n * cfg.synthetic.mean_shift)
            .collect();
        let s = &cfg.synthetic;
        let synth_spread = (0..l)
            .map(|d| {
                if d < s.collapsed_dims {
                    s.collapse
                } else {
                    s.inflate
                }
            })
            .collect();
        let synth_jitter = (0..l)
            .map(|d| {
                if d < s.collapsed_dims {
                    s.jitter_inflate
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Universe {
            cfg,
            group_means,
            mixing,
            nuisance,
            synth_offset,
            synth_spread,
            synth_jitter,
        })
    }

    pub fn config(&self) -> &UniverseConfig {
        &self.cfg
    }

    pub fn kinds(&self) -> Vec<SourceKind> {
        let mut kinds = vec![SourceKind::Real];
        kinds.extend((0..self.cfg.synthetic_sources).map(SourceKind::Synthetic));
        kinds.push(SourceKind::Eval);
        kinds
    }

    fn identity_count(&self, kind: SourceKind) -> usize {
        match kind {
            SourceKind::Real => self.cfg.real_identities,
            SourceKind::Synthetic(_) => self.cfg.synthetic_identities,
            SourceKind::Eval => self.cfg.eval_identities,
        }
    }

    fn images_per_identity(&self, kind: SourceKind) -> usize {
        match kind {
            SourceKind::Eval => self.cfg.eval_images_per_identity,
            _ => self.cfg.images_per_identity,
        }
    }

    /// True group of every identity of a source, grouped and in index order.
    fn group_plan(&self, kind: SourceKind) -> Vec<usize> {
        let weights = match kind {
            SourceKind::Synthetic(_) => &self.cfg.synthetic_group_weights,
            _ => &self.cfg.real_group_weights,
        };
        let counts = largest_remainder(self.identity_count(kind), weights);
        counts
            .iter()
            .enumerate()
            .flat_map(|(g, &c)| std::iter::repeat_n(g, c))
            .collect()
    }

    fn identity(&self, kind: SourceKind, index: usize, group: usize) -> Identity {
        let name = kind.name();
        let mut rng = rng_for(self.cfg.seed, &["identity", &name, &index.to_string()]);
        let l = self.cfg.latent_dim;
        let noise = normals(l, &mut rng);
        let latent = match kind {
            SourceKind::Synthetic(_) => (0..l)
                .map(|d| {
                    self.group_means[group][d]
                        + self.synth_offset[d]
                        + self.synth_spread[d] * noise[d]
                })
                .collect(),
            _ => (0..l)
                .map(|d| self.group_means[group][d] + noise[d])
                .collect(),
        };
        let kappa = self.cfg.label_concentration;
        let soft_label = if kappa.is_infinite() {
            one_hot(self.cfg.n_groups, group)
        } else if kind == SourceKind::Eval {
            one_hot(self.cfg.n_groups, group)
        } else {
            let mut alpha = vec![1.0; self.cfg.n_groups];
            alpha[group] = kappa;
            dirichlet(&alpha, &mut rng)
        };
        Identity {
            identity_id: format!("{name}-{index:05}"),
            kind,
            index,
            group,
            latent,
            soft_label,
        }
    }

    /// Identities of one source, deterministic per seed.
    pub fn gen_identities(&self, kind: SourceKind, exec: Execution) -> Vec<Identity> {
        let plan = self.group_plan(kind);
        parallel::map_slice(
            exec,
            &plan.iter().copied().enumerate().collect::<Vec<_>>(),
            |&(i, g)| self.identity(kind, i, g),
        )
    }

    /// Images of one identity. Image soft labels scatter around the
    /// identity label with the same concentration.
    pub fn gen_images(&self, identity: &Identity, rng: &mut Rng) -> Vec<GeneratedImage> {
        let cfg = &self.cfg;
        let (l, p, f) = (cfg.latent_dim, cfg.nuisance_dim, cfg.feature_dim);
        let g = identity.group;
        let jitter_scale: Vec<f64> = match identity.kind {
            SourceKind::Synthetic(_) => self
                .synth_jitter
                .iter()
                .map(|j| j * cfg.jitter_scale)
                .collect(),
            _ => vec![cfg.jitter_scale; l],
        };
        let kappa = cfg.label_concentration;
        (0..self.images_per_identity(identity.kind))
            .map(|k| {
                let z: Vec<f64> = identity
                    .latent
                    .iter()
                    .zip(&jitter_scale)
                    .map(|(&m, &s)| {
                        m + s * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
                    })
                    .collect();
                let n = normals(p, rng);
                let mut x = vec![0.0; f];
                mat_vec(&self.mixing[g], l, &z, &mut x);
                mat_vec(&self.nuisance[g], p, &n, &mut x);
                let sigma = cfg.noise_scales[g];
                for v in x.iter_mut() {
                    let e: f64 = StandardNormal.sample(rng);
                    *v += sigma * e;
                }
                let soft_labels = if kappa.is_infinite() || identity.kind == SourceKind::Eval {
                    identity.soft_label.clone()
                } else {
                    let alpha: Vec<f64> = identity
                        .soft_label
                        .iter()
                        .map(|q| (kappa * q).max(1e-3))
                        .collect();
                    dirichlet(&alpha, rng)
                };
                GeneratedImage {
                    sample_id: format!("{}-{k:03}", identity.identity_id),
                    identity_id: identity.identity_id.clone(),
                    feature: x,
                    soft_labels,
                }
            })
            .collect()
    }

    /// Identities, manifest and features of one source. `payload_file` is
    /// the features file name recorded in each entry's payload reference.
    pub fn gen_source(
        &self,
        kind: SourceKind,
        payload_file: &str,
        exec: Execution,
    ) -> Result<GeneratedSource> {
        let identities = self.gen_identities(kind, exec);
        let name = kind.name();
        let images = parallel::map_slice(exec, &identities, |id| {
            let mut rng = rng_for(self.cfg.seed, &["images", &name, &id.index.to_string()]);
            self.gen_images(id, &mut rng)
        });
        let mut manifest = DatasetManifest::new(name.clone(), self.cfg.n_groups);
        let mut features = FeatureStore::new(self.cfg.feature_dim);
        manifest.meta = BTreeMap::from([
            ("universe_seed".to_string(), self.cfg.seed.to_string()),
            ("source_kind".to_string(), name),
        ]);
        for img in images.into_iter().flatten() {
            manifest.entries.push(ManifestEntry {
                payload_ref: format!("{payload_file}#{}", img.sample_id),
                sample_id: img.sample_id.clone(),
                identity_id: img.identity_id,
                source: kind.source(),
                soft_labels: img.soft_labels,
            });
            features.insert(img.sample_id, img.feature)?;
        }
        manifest.validate()?;
        Ok(GeneratedSource {
            kind,
            identities,
            manifest,
            features,
        })
    }

    pub fn generate(&self, exec: Execution) -> Result<GeneratedUniverse> {
        let file = |k: SourceKind| format!("{}.features.tsv", k.name());
        Ok(GeneratedUniverse {
            real: self.gen_source(SourceKind::Real, &file(SourceKind::Real), exec)?,
            synthetic: (0..self.cfg.synthetic_sources)
                .map(|i| {
                    let k = SourceKind::Synthetic(i);
                    self.gen_source(k, &file(k), exec)
                })
                .collect::<Result<_>>()?,
            eval: self.gen_source(SourceKind::Eval, &file(SourceKind::Eval), exec)?,
        })
    }
}

impl GeneratedUniverse {
    /// All synthetic sources concatenated, with their features.
    pub fn synthetic_union(&self) -> Result<(DatasetManifest, FeatureStore)> {
        let first = self.synthetic.first().ok_or(Error::EmptyManifest)?;
        let mut manifest = DatasetManifest::new("synthetic", first.manifest.groups);
        let mut store = FeatureStore::new(first.features.dim());
        for s in &self.synthetic {
            manifest.entries.extend(s.manifest.entries.iter().cloned());
            store.merge(s.features.clone())?;
        }
        Ok((manifest, store))
    }
}
