//! Seed sweeps of the real-vs-synthetic study: a teacher trained on the
//! real source, and students trained from scratch on real data, from
//! scratch on synthetic data, and distilled on synthetic data. All four are
//! verified on the held-out real identities.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::evaluation::{
    build_report, evaluate_protocol, EvalReport, ReportMetadata, VerificationConfig,
};
use crate::losses::{LossConfig, MarginConfig};
use crate::manifest::{DatasetManifest, FeatureStore};
use crate::parallel::{self, Execution};
use crate::synthdata::{gen_pair_protocol_holdout, Universe, UniverseConfig};
use crate::training::{
    distill, train_from_scratch, Encoder, EncoderSpec, Teacher, TrainConfig, TrainingSet,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapStudyConfig {
    pub universe: UniverseConfig,
    pub teacher: EncoderSpec,
    pub student: EncoderSpec,
    pub loss: LossConfig,
    pub teacher_train: TrainConfig,
    pub student_train: TrainConfig,
    pub pairs_per_group: usize,
    pub folds: usize,
}

impl Default for GapStudyConfig {
    fn default() -> Self {
        let universe = UniverseConfig::default();
        let input_dim = universe.feature_dim;
        let short = TrainConfig {
            epochs: 12,
            batch_size: 32,
            lr_milestones: vec![6, 9, 11],
            weight_decay: 5e-4,
            ..TrainConfig::default()
        };
        GapStudyConfig {
            teacher: EncoderSpec {
                input_dim,
                hidden_widths: vec![64, 64],
                embedding_dim: 16,
                activation: Default::default(),
                init_seed: 1,
            },
            student: EncoderSpec {
                input_dim,
                hidden_widths: vec![32],
                embedding_dim: 16,
                activation: Default::default(),
                init_seed: 2,
            },
            universe,
            // Desk-scale head: a few hundred classes need a much smaller
            // scale than the production setting. Raw teacher norms are
            // unconstrained, so distillation compares unit embeddings.
            loss: LossConfig {
                lambda: 100.0,
                kd_on_normalized: true,
                ..LossConfig::new(MarginConfig::adaface(16.0, 0.2))
            },
            teacher_train: short.clone(),
            student_train: short,
            pairs_per_group: 400,
            folds: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapOutcome {
    pub seed: u64,
    pub teacher: EvalReport,
    pub scratch_real: EvalReport,
    pub scratch_synthetic: EvalReport,
    pub kd_synthetic: EvalReport,
}

impl GapOutcome {
    pub fn kd_beats_scratch(&self) -> bool {
        self.kd_synthetic.average > self.scratch_synthetic.average
    }

    pub fn synthetic_gap(&self) -> bool {
        self.scratch_synthetic.average < self.scratch_real.average
    }
}

fn evaluate(
    encoder: &Encoder,
    protocol: &crate::evaluation::PairProtocol,
    store: &FeatureStore,
    seed: u64,
    folds: usize,
    meta: ReportMetadata,
) -> Result<EvalReport> {
    let groups = evaluate_protocol(
        |x| encoder.forward(x),
        protocol,
        store,
        VerificationConfig { folds, seed },
        Execution::Sequential,
    )?;
    build_report(groups, meta)
}

fn meta(model: &str, data: &str, distilled: bool, cfg: &GapStudyConfig) -> ReportMetadata {
    ReportMetadata {
        model_id: model.into(),
        data_id: data.into(),
        distilled: Some(distilled),
        loss_kind: cfg.loss.margin.kind.as_str().into(),
    }
}

fn training_set(manifest: &DatasetManifest, store: &FeatureStore) -> Result<TrainingSet> {
    TrainingSet::from_manifest(manifest, store)
}

/// One full study for `seed`, which seeds the universe and every run.
pub fn run_gap_seed(cfg: &GapStudyConfig, seed: u64) -> Result<GapOutcome> {
    let universe = Universe::new(UniverseConfig {
        seed,
        ..cfg.universe.clone()
    })?;
    let data = universe.generate(Execution::Sequential)?;
    let (synth_manifest, synth_store) = data.synthetic_union()?;
    let real_set = training_set(&data.real.manifest, &data.real.features)?;
    let synth_set = training_set(&synth_manifest, &synth_store)?;
    let protocol = gen_pair_protocol_holdout(
        &data.eval.manifest,
        &[&data.real.manifest, &synth_manifest],
        cfg.pairs_per_group,
        seed,
    )?;

    let with_seed = |t: &TrainConfig| TrainConfig { seed, ..t.clone() };
    let (teacher, _) = train_from_scratch(
        &cfg.teacher,
        &real_set,
        &cfg.loss,
        &with_seed(&cfg.teacher_train),
    )?;
    let teacher = Teacher::new(teacher.encoder);
    let student_cfg = with_seed(&cfg.student_train);
    let (scratch_real, _) = train_from_scratch(&cfg.student, &real_set, &cfg.loss, &student_cfg)?;
    let (scratch_synth, _) = train_from_scratch(&cfg.student, &synth_set, &cfg.loss, &student_cfg)?;
    let (kd_synth, _) = distill(&teacher, &cfg.student, &synth_set, &cfg.loss, &student_cfg)?;

    let eval = |e: &Encoder, m| evaluate(e, &protocol, &data.eval.features, seed, cfg.folds, m);
    Ok(GapOutcome {
        seed,
        teacher: eval(teacher.encoder(), meta("teacher", "real", false, cfg))?,
        scratch_real: eval(&scratch_real.encoder, meta("student", "real", false, cfg))?,
        scratch_synthetic: eval(
            &scratch_synth.encoder,
            meta("student", "synthetic", false, cfg),
        )?,
        kd_synthetic: eval(&kd_synth.encoder, meta("student", "synthetic", true, cfg))?,
    })
}

/// Independent seeds run concurrently; results are in `seeds` order.
pub fn run_gap_study(
    cfg: &GapStudyConfig,
    seeds: &[u64],
    exec: Execution,
) -> Result<Vec<GapOutcome>> {
    parallel::map_slice(exec, seeds, |&s| run_gap_seed(cfg, s))
        .into_iter()
        .collect()
}
