use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::encoder::{Encoder, EncoderSpec};
use super::{hflip_augment, lr_at_epoch, sgd_step, TrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{norm, Sample};
use crate::io::{parse_error, read_to_string, write_atomic};
use crate::losses::{
    adaface_margins, head_backward, kd_embedding_grad, sample_elastic_margin, total_loss,
    ClassPrototypes, LossConfig, MarginKind, NormStats, TargetMargin,
};
use crate::manifest::{DatasetManifest, FeatureStore};
use crate::rng::{rng_for, Rng};

/// Labelled samples with dense class indices `0..classes`.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    samples: Vec<Sample>,
    classes: usize,
}

impl TrainingSet {
    pub fn new(samples: Vec<Sample>, classes: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::EmptyManifest);
        }
        let dim = samples[0].feature.len();
        for s in &samples {
            if s.label >= classes {
                return Err(Error::IndexOutOfRange {
                    index: s.label,
                    len: classes,
                });
            }
            if s.feature.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: s.feature.len(),
                });
            }
        }
        Ok(TrainingSet { samples, classes })
    }

    pub fn from_manifest(manifest: &DatasetManifest, store: &FeatureStore) -> Result<Self> {
        let classes = manifest.identities().len();
        Self::new(store.samples(manifest)?, classes)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.samples[0].feature.len()
    }
}

/// A pretrained encoder that can only be evaluated.
#[derive(Debug, Clone)]
pub struct Teacher {
    encoder: Encoder,
}

impl Teacher {
    pub fn new(encoder: Encoder) -> Self {
        Teacher { encoder }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.encoder.forward(x)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn embedding_dim(&self) -> usize {
        self.encoder.embedding_dim()
    }

    pub fn digest(&self) -> String {
        self.encoder.digest()
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub encoder: Encoder,
    pub prototypes: ClassPrototypes,
    pub norm_stats: NormStats,
    /// Training stream position after the last batch.
    pub rng: Rng,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's samples.
    pub loss: f64,
    pub cls_loss: f64,
    /// Present only for distillation runs.
    pub kd_loss: Option<f64>,
}

const TRACE_MAGIC: &str = "#fairkd-trace v1";
const TRACE_COLUMNS: &str = "epoch\tlr\tloss\tcls_loss\tkd_loss";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    pub records: Vec<EpochRecord>,
    pub meta: BTreeMap<String, String>,
}

impl TrainTrace {
    pub fn is_finite(&self) -> bool {
        self.records.iter().all(|r| {
            r.loss.is_finite() && r.cls_loss.is_finite() && r.kd_loss.is_none_or(f64::is_finite)
        })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(TRACE_MAGIC);
        out.push('\n');
        for (k, v) in &self.meta {
            let _ = writeln!(out, "#meta {k} {v}");
        }
        out.push_str(TRACE_COLUMNS);
        out.push('\n');
        for r in &self.records {
            let kd = r.kd_loss.map_or_else(|| "-".to_string(), |k| k.to_string());
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.epoch, r.lr, r.loss, r.cls_loss, kd
            );
        }
        out
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        if lines.next().map(|(_, l)| l) != Some(TRACE_MAGIC) {
            return Err(parse_error(path, 1, format!("expected `{TRACE_MAGIC}`")));
        }
        let mut trace = TrainTrace::default();
        for (i, line) in lines {
            let lineno = i + 1;
            if let Some(meta) = line.strip_prefix("#meta ") {
                let (k, v) = meta.split_once(' ').unwrap_or((meta, ""));
                trace.meta.insert(k.into(), v.into());
                continue;
            }
            if line.is_empty() || line.starts_with('#') || line == TRACE_COLUMNS {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(parse_error(path, lineno, "expected 5 fields"));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| parse_error(path, lineno, format!("bad number `{s}`")))
            };
            trace.records.push(EpochRecord {
                epoch: f[0]
                    .parse()
                    .map_err(|_| parse_error(path, lineno, "bad epoch"))?,
                lr: num(f[1])?,
                loss: num(f[2])?,
                cls_loss: num(f[3])?,
                kd_loss: if f[4] == "-" { None } else { Some(num(f[4])?) },
            });
        }
        Ok(trace)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?, path)
    }
}

/// Trains `spec` and a fresh prototype matrix on the classification loss
/// alone. `loss_cfg.lambda` is ignored.
pub fn train_from_scratch(
    spec: &EncoderSpec,
    data: &TrainingSet,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainTrace)> {
    run(spec, None, data, loss_cfg, train_cfg)
}

/// Trains a student against `cls + λ·kd`, with the teacher embedding the
/// same augmented inputs. The teacher is never updated.
pub fn distill(
    teacher: &Teacher,
    student_spec: &EncoderSpec,
    data: &TrainingSet,
    loss_cfg: &LossConfig,
    train_cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainTrace)> {
    if teacher.embedding_dim() != student_spec.embedding_dim {
        return Err(Error::DimensionMismatch {
            expected: teacher.embedding_dim(),
            actual: student_spec.embedding_dim,
        });
    }
    if teacher.encoder().input_dim() != student_spec.input_dim {
        return Err(Error::DimensionMismatch {
            expected: teacher.encoder().input_dim(),
            actual: student_spec.input_dim,
        });
    }
    let before = teacher.digest();
    let out = run(student_spec, Some(teacher), data, loss_cfg, train_cfg)?;
    if teacher.digest() != before {
        return Err(Error::FrozenViolation);
    }
    Ok(out)
}

struct Forwarded {
    index: usize,
    feature: Vec<f64>,
    cache: super::encoder::ForwardCache,
}

fn run(
    spec: &EncoderSpec,
    teacher: Option<&Teacher>,
    data: &TrainingSet,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainTrace)> {
    loss_cfg.validate()?;
    cfg.validate()?;
    if spec.input_dim != data.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: spec.input_dim,
            actual: data.feature_dim(),
        });
    }
    let mut encoder = Encoder::new(spec.clone())?;
    let mut prototypes = ClassPrototypes::random(
        data.classes(),
        spec.embedding_dim,
        &mut rng_for(cfg.seed, &["prototypes"]),
    );
    let mut rng = rng_for(cfg.seed, &["train"]);
    let mut stats = NormStats::uninitialized();
    let margin = &loss_cfg.margin;

    let mut enc_velocity = vec![0.0; encoder.parameters().len()];
    let mut proto_velocity = vec![0.0; prototypes.as_flat().len()];
    let mut order: Vec<usize> = (0..data.samples().len()).collect();
    let mut trace = TrainTrace::default();

    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg)?;
        order.shuffle(&mut rng);
        let (mut sum_total, mut sum_cls, mut sum_kd) = (0.0, 0.0, 0.0);

        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |loss: f64| Error::DivergenceDetected {
                epoch,
                batch: batch_no,
                loss,
            };
            let unit = prototypes.unit()?;

            let mut fwd = Vec::with_capacity(batch.len());
            for &i in batch {
                let feature = hflip_augment(&data.samples()[i].feature, cfg.hflip_prob, &mut rng);
                let cache = encoder.forward_cached(&feature)?;
                if cache.output().iter().any(|v| !v.is_finite()) {
                    return Err(diverged(f64::NAN));
                }
                fwd.push(Forwarded {
                    index: i,
                    feature,
                    cache,
                });
            }

            let norms: Vec<f64> = fwd.iter().map(|f| norm(f.cache.output())).collect();
            if margin.kind == MarginKind::Adaface && !stats.is_initialized() {
                stats = NormStats::from_batch(&norms)?;
            }

            let mut enc_grad = vec![0.0; encoder.parameters().len()];
            let mut proto_grad = vec![0.0; prototypes.as_flat().len()];
            for (f, &raw_norm) in fwd.iter().zip(&norms) {
                let target = match margin.kind {
                    MarginKind::Arcface => TargetMargin::Angular { m: margin.m },
                    MarginKind::ElasticArcface => TargetMargin::Angular {
                        m: sample_elastic_margin(margin, &mut rng),
                    },
                    MarginKind::Adaface => adaface_margins(raw_norm, margin, &stats)?,
                };
                let z = f.cache.output();
                let y = data.samples()[f.index].label;
                let (cls, mut d_z) =
                    head_backward(z, &unit, y, margin.s, target, Some(&mut proto_grad))?;
                let mut loss = cls;
                if let Some(t) = teacher {
                    let t_emb = t.forward(&f.feature)?;
                    let kd = kd_embedding_grad(
                        &t_emb,
                        z,
                        loss_cfg.kd_reduction,
                        loss_cfg.kd_on_normalized,
                    )?;
                    loss = total_loss(cls, kd.loss, loss_cfg.lambda);
                    for (d, k) in d_z.iter_mut().zip(&kd.d_student) {
                        *d += loss_cfg.lambda * k;
                    }
                    sum_kd += kd.loss;
                }
                if !loss.is_finite() {
                    return Err(diverged(loss));
                }
                sum_total += loss;
                sum_cls += cls;
                encoder.backward(&f.cache, &d_z, &mut enc_grad)?;
            }

            if margin.kind == MarginKind::Adaface {
                stats.update(&norms, margin.ema_momentum)?;
            }

            let inv = 1.0 / batch.len() as f64;
            for (g, p) in enc_grad.iter_mut().zip(encoder.parameters()) {
                *g = *g * inv + cfg.weight_decay * p;
            }
            for (g, p) in proto_grad.iter_mut().zip(prototypes.as_flat()) {
                *g = *g * inv + cfg.weight_decay * p;
            }
            sgd_step(
                encoder.parameters_mut(),
                &enc_grad,
                lr,
                cfg.momentum,
                &mut enc_velocity,
            )?;
            sgd_step(
                prototypes.as_flat_mut(),
                &proto_grad,
                lr,
                cfg.momentum,
                &mut proto_velocity,
            )?;
            if encoder.parameters().iter().any(|p| !p.is_finite())
                || prototypes.as_flat().iter().any(|p| !p.is_finite())
            {
                return Err(diverged(f64::NAN));
            }
        }

        let n = data.samples().len() as f64;
        trace.records.push(EpochRecord {
            epoch,
            lr,
            loss: sum_total / n,
            cls_loss: sum_cls / n,
            kd_loss: teacher.map(|_| sum_kd / n),
        });
    }

    Ok((
        TrainedModel {
            encoder,
            prototypes,
            norm_stats: stats,
            rng,
        },
        trace,
    ))
}
