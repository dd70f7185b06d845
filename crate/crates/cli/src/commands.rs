use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use fairkd::config::RunConfig;
use fairkd::evaluation::{
    build_report, evaluate_protocol, render_table, verify_fixture, EvalReport, PairProtocol,
    PublishedFixture, ReportMetadata, TableFormat, VerificationConfig,
};
use fairkd::io::write_atomic;
use fairkd::manifest::{DatasetManifest, FeatureStore};
use fairkd::parallel::Execution;
use fairkd::sampling::{balanced_merge_with, manifest_stats, mix_merge_with};
use fairkd::synthdata::{gen_pair_protocol_holdout, Universe};
use fairkd::training::{
    distill, train_from_scratch, Checkpoint, EncoderSpec, Teacher, TrainingSet,
};
use fairkd::Error;

use crate::{Cli, Command, Format, Role};

const BUNDLED_FIXTURE: &str = include_str!("../../core/fixtures/published_tables.tsv");
const TOOL_VERSION: &str = concat!("fairkd ", env!("CARGO_PKG_VERSION"));

struct Ctx {
    cfg: RunConfig,
    exec: Execution,
}

impl Ctx {
    fn provenance(&self) -> BTreeMap<String, String> {
        BTreeMap::from([
            ("config_digest".to_string(), self.cfg.digest()),
            ("tool_version".to_string(), TOOL_VERSION.to_string()),
        ])
    }
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    if let Command::VerifyTables { fixture } = &cli.command {
        return verify_tables(fixture.as_deref());
    }
    let mut overrides = cli.overrides.clone();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &overrides)?;
    let ctx = Ctx {
        cfg,
        exec: if cli.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        },
    };
    match cli.command {
        Command::SynthGen { out } => synth_gen(&ctx, &out)?,
        Command::Merge { out, total, inputs } => merge(&ctx, &out, total, &inputs)?,
        Command::Mix {
            out,
            total,
            real_fraction,
            real,
            synthetic,
        } => mix(&ctx, &out, total, real_fraction, &real, &synthetic)?,
        Command::Train {
            manifest,
            out,
            trace,
            role,
        } => train(&ctx, &manifest, &out, trace, role)?,
        Command::Distill {
            teacher,
            manifest,
            out,
            trace,
        } => {
            let teacher =
                teacher.ok_or_else(|| Error::InvalidConfig("distill needs --teacher".into()))?;
            distill_cmd(&ctx, &teacher, &manifest, &out, trace)?
        }
        Command::Eval {
            checkpoint,
            protocol,
            manifest,
            out,
            model_id,
        } => eval(&ctx, &checkpoint, &protocol, &manifest, &out, model_id)?,
        Command::Report {
            format,
            out,
            reports,
        } => report(format, out.as_deref(), &reports)?,
        Command::VerifyTables { .. } => unreachable!("handled above"),
    }
    Ok(ExitCode::SUCCESS)
}

/// Input paths are checked before any work so a typo is a usage error.
fn require(flag: &str, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(
            Error::InvalidConfig(format!("{flag}: `{}` is not a file", path.display())).into(),
        );
    }
    Ok(())
}

fn parent(path: &Path) -> &Path {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."))
}

fn file_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// `name` for `dir/name.manifest.tsv`.
fn manifest_stem(manifest_path: &Path) -> String {
    let name = file_name(manifest_path);
    name.strip_suffix(".manifest.tsv")
        .or_else(|| name.rsplit_once('.').map(|(s, _)| s))
        .unwrap_or(&name)
        .to_string()
}

/// `dir/name.manifest.tsv` pairs with `dir/name.features.tsv`.
fn features_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_file_name(format!("{}.features.tsv", manifest_stem(manifest_path)))
}

fn load_manifest(flag: &str, path: &Path) -> Result<(DatasetManifest, FeatureStore)> {
    require(flag, path)?;
    let manifest = DatasetManifest::read(path)?;
    let store = FeatureStore::resolve(&manifest, parent(path))
        .with_context(|| format!("loading features for {}", path.display()))?;
    Ok((manifest, store))
}

/// Every artifact is rendered first and then written, each atomically.
fn write_all(files: &[(PathBuf, Vec<u8>)]) -> Result<()> {
    for (path, bytes) in files {
        write_atomic(path, bytes)?;
    }
    Ok(())
}

fn manifest_with_features(
    ctx: &Ctx,
    mut manifest: DatasetManifest,
    store: &FeatureStore,
    out: &Path,
    extra: BTreeMap<String, String>,
) -> Result<Vec<(PathBuf, Vec<u8>)>> {
    let features = features_path(out);
    let features_name = file_name(&features);
    for e in &mut manifest.entries {
        e.payload_ref = format!("{features_name}#{}", e.sample_id);
    }
    manifest.meta.extend(ctx.provenance());
    manifest.meta.extend(extra);
    manifest.validate()?;
    let ids = manifest.entries.iter().map(|e| e.sample_id.as_str());
    let feature_text = store.to_text_with_meta(ids, &ctx.provenance())?;
    Ok(vec![
        (out.to_path_buf(), manifest.to_text().into_bytes()),
        (features, feature_text.into_bytes()),
    ])
}

fn synth_gen(ctx: &Ctx, out: &Path) -> Result<()> {
    let universe = Universe::new(ctx.cfg.universe_config())?;
    let data = universe.generate(ctx.exec)?;
    let mut training: Vec<&DatasetManifest> = vec![&data.real.manifest];
    training.extend(data.synthetic.iter().map(|s| &s.manifest));
    let mut protocol = gen_pair_protocol_holdout(
        &data.eval.manifest,
        &training,
        ctx.cfg.eval.pairs_per_group,
        ctx.cfg.seed,
    )?;
    protocol.meta.extend(ctx.provenance());

    let mut files = Vec::new();
    for source in std::iter::once(&data.real)
        .chain(&data.synthetic)
        .chain([&data.eval])
    {
        let name = source.kind.name();
        let mut manifest = source.manifest.clone();
        manifest.meta.extend(ctx.provenance());
        let ids = manifest.entries.iter().map(|e| e.sample_id.as_str());
        let features = source.features.to_text_with_meta(ids, &ctx.provenance())?;
        files.push((
            out.join(format!("{name}.manifest.tsv")),
            manifest.to_text().into_bytes(),
        ));
        files.push((
            out.join(format!("{name}.features.tsv")),
            features.into_bytes(),
        ));
    }
    files.push((
        out.join("eval.protocol.tsv"),
        protocol.to_text().into_bytes(),
    ));
    files.push((out.join("run.toml"), ctx.cfg.to_toml().into_bytes()));

    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_all(&files)?;
    for source in std::iter::once(&data.real)
        .chain(&data.synthetic)
        .chain([&data.eval])
    {
        let stats = manifest_stats(&source.manifest);
        println!(
            "{}\tidentities={}\timages={}",
            source.kind.name(),
            stats.identities(),
            stats.images()
        );
    }
    Ok(())
}

fn load_inputs(flag: &str, paths: &[PathBuf]) -> Result<(Vec<DatasetManifest>, FeatureStore)> {
    let mut manifests = Vec::new();
    let mut store: Option<FeatureStore> = None;
    for p in paths {
        let (m, s) = load_manifest(flag, p)?;
        manifests.push(m);
        match &mut store {
            Some(all) => all.merge(s)?,
            None => store = Some(s),
        }
    }
    Ok((manifests, store.ok_or(Error::EmptyInput)?))
}

fn input_names(paths: &[PathBuf]) -> String {
    paths
        .iter()
        .map(|p| file_name(p))
        .collect::<Vec<_>>()
        .join(",")
}

fn print_stats(manifest: &DatasetManifest) {
    let stats = manifest_stats(manifest);
    println!(
        "identities={}\timages={}\treal_share={:.4}",
        stats.identities(),
        stats.images(),
        stats.real_share()
    );
    for s in &manifest.shortfalls {
        println!("shortfall\t{s}");
    }
}

fn merge(ctx: &Ctx, out: &Path, total: Option<usize>, inputs: &[PathBuf]) -> Result<()> {
    let (manifests, store) = load_inputs("inputs", inputs)?;
    let total = total.unwrap_or_else(|| manifests.iter().map(|m| m.identities().len()).sum());
    let mut merged = balanced_merge_with(&manifests, total, ctx.exec)?;
    merged.name = manifest_stem(out);
    let extra = BTreeMap::from([
        ("inputs".to_string(), input_names(inputs)),
        ("total_identities".to_string(), total.to_string()),
    ]);
    let files = manifest_with_features(ctx, merged.clone(), &store, out, extra)?;
    write_all(&files)?;
    print_stats(&merged);
    Ok(())
}

fn mix(
    ctx: &Ctx,
    out: &Path,
    total: usize,
    real_fraction: f64,
    real: &[PathBuf],
    synthetic: &[PathBuf],
) -> Result<()> {
    let (real_m, mut store) = load_inputs("real", real)?;
    let (synth_m, synth_store) = load_inputs("synthetic", synthetic)?;
    store.merge(synth_store)?;
    let mut mixed = mix_merge_with(&real_m, &synth_m, real_fraction, total, ctx.exec)?;
    mixed.name = manifest_stem(out);
    let extra = BTreeMap::from([
        ("real_inputs".to_string(), input_names(real)),
        ("synthetic_inputs".to_string(), input_names(synthetic)),
        ("real_fraction".to_string(), real_fraction.to_string()),
        ("total_identities".to_string(), total.to_string()),
        (
            "real_share".to_string(),
            manifest_stats(&mixed).real_share().to_string(),
        ),
    ]);
    let files = manifest_with_features(ctx, mixed.clone(), &store, out, extra)?;
    write_all(&files)?;
    print_stats(&mixed);
    Ok(())
}

fn trace_path(out: &Path, trace: Option<PathBuf>) -> PathBuf {
    trace.unwrap_or_else(|| out.with_extension("trace.tsv"))
}

fn spec_for(ctx: &Ctx, role: Role, input_dim: usize) -> EncoderSpec {
    let spec = match role {
        Role::Teacher => &ctx.cfg.teacher,
        Role::Student => &ctx.cfg.student,
    };
    EncoderSpec {
        input_dim,
        ..spec.clone()
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::Teacher => "teacher",
        Role::Student => "student",
    }
}

fn run_meta(
    ctx: &Ctx,
    role: Role,
    manifest: &DatasetManifest,
    distilled: bool,
) -> BTreeMap<String, String> {
    let mut meta = ctx.provenance();
    meta.insert("role".into(), role_name(role).into());
    meta.insert("data".into(), manifest.name.clone());
    meta.insert("distilled".into(), distilled.to_string());
    meta.insert("loss_kind".into(), ctx.cfg.loss.margin.kind.as_str().into());
    meta
}

fn save_run(
    out: &Path,
    trace_out: PathBuf,
    model: fairkd::training::TrainedModel,
    mut trace: fairkd::training::TrainTrace,
    meta: BTreeMap<String, String>,
) -> Result<()> {
    let mut ckpt = Checkpoint::new(model);
    ckpt.meta = meta.clone();
    trace.meta.extend(meta);
    write_all(&[
        (out.to_path_buf(), ckpt.to_bytes()),
        (trace_out, trace.to_text().into_bytes()),
    ])?;
    for r in &trace.records {
        println!(
            "epoch {}\tlr {}\tloss {:.6}{}",
            r.epoch,
            r.lr,
            r.loss,
            r.kd_loss
                .map(|k| format!("\tkd {k:.6}"))
                .unwrap_or_default()
        );
    }
    Ok(())
}

fn train(
    ctx: &Ctx,
    manifest_path: &Path,
    out: &Path,
    trace: Option<PathBuf>,
    role: Role,
) -> Result<()> {
    let (manifest, store) = load_manifest("manifest", manifest_path)?;
    let data = TrainingSet::from_manifest(&manifest, &store)?;
    let spec = spec_for(ctx, role, data.feature_dim());
    let (model, trace_rec) =
        train_from_scratch(&spec, &data, &ctx.cfg.loss, &ctx.cfg.train_config())?;
    let meta = run_meta(ctx, role, &manifest, false);
    save_run(out, trace_path(out, trace), model, trace_rec, meta)
}

fn distill_cmd(
    ctx: &Ctx,
    teacher_path: &Path,
    manifest_path: &Path,
    out: &Path,
    trace: Option<PathBuf>,
) -> Result<()> {
    require("teacher", teacher_path)?;
    let (manifest, store) = load_manifest("manifest", manifest_path)?;
    let data = TrainingSet::from_manifest(&manifest, &store)?;
    let spec = spec_for(ctx, Role::Student, data.feature_dim());
    let teacher_ckpt = Checkpoint::load_expecting(teacher_path, spec.embedding_dim)?;
    let teacher = Teacher::new(teacher_ckpt.model.encoder);
    let (model, trace_rec) = distill(
        &teacher,
        &spec,
        &data,
        &ctx.cfg.loss,
        &ctx.cfg.train_config(),
    )?;
    let mut meta = run_meta(ctx, Role::Student, &manifest, true);
    meta.insert("teacher_digest".into(), teacher.digest());
    save_run(out, trace_path(out, trace), model, trace_rec, meta)
}

fn eval(
    ctx: &Ctx,
    checkpoint: &Path,
    protocol_path: &Path,
    manifest_path: &Path,
    out: &Path,
    model_id: Option<String>,
) -> Result<()> {
    require("checkpoint", checkpoint)?;
    require("protocol", protocol_path)?;
    let (manifest, store) = load_manifest("manifest", manifest_path)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let protocol = PairProtocol::read(protocol_path)?;
    protocol.validate_against(&manifest)?;
    let encoder = &ckpt.model.encoder;
    let groups = evaluate_protocol(
        |x| encoder.forward(x),
        &protocol,
        &store,
        VerificationConfig {
            folds: ctx.cfg.eval.folds,
            seed: ctx.cfg.seed,
        },
        ctx.exec,
    )?;
    let get = |k: &str| ckpt.meta.get(k).cloned().unwrap_or_default();
    let metadata = ReportMetadata {
        model_id: model_id.unwrap_or_else(|| get("role")),
        data_id: get("data"),
        distilled: ckpt.meta.get("distilled").and_then(|d| d.parse().ok()),
        loss_kind: get("loss_kind"),
    };
    let mut report = build_report(groups, metadata)?;
    report.provenance = ctx.provenance();
    report
        .provenance
        .insert("model_digest".into(), encoder.digest());
    report
        .provenance
        .insert("protocol".into(), file_name(protocol_path));
    if let Some(d) = ckpt.meta.get("config_digest") {
        report
            .provenance
            .insert("training_config_digest".into(), d.clone());
    }
    write_atomic(out, report.to_json().as_bytes())?;
    print!("{}", render_table(&[report], TableFormat::Markdown)?);
    Ok(())
}

fn report(format: Format, out: Option<&Path>, paths: &[PathBuf]) -> Result<()> {
    let reports = paths
        .iter()
        .map(|p| {
            require("reports", p)?;
            Ok(EvalReport::read(p)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let format = match format {
        Format::Md => TableFormat::Markdown,
        Format::Csv => TableFormat::Csv,
    };
    let table = render_table(&reports, format)?;
    match out {
        Some(path) => write_atomic(path, table.as_bytes())?,
        None => print!("{table}"),
    }
    Ok(())
}

fn verify_tables(fixture: Option<&Path>) -> Result<ExitCode> {
    let fx = match fixture {
        Some(path) => {
            require("fixture", path)?;
            PublishedFixture::read(path)?
        }
        None => PublishedFixture::parse(BUNDLED_FIXTURE, Path::new("<bundled>"))?,
    };
    let checks = verify_fixture(&fx)?;
    println!("row\tcomputed (avg/std/ser)\tprinted (avg/std/ser)\tmax |delta|\tresult");
    let mut failed = 0;
    for c in &checks {
        let delta = c.deltas.iter().map(|d| d.abs()).fold(0.0, f64::max);
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        failed += usize::from(!c.pass);
        println!(
            "{}\t{}\t{}\t{delta:.4}\t{verdict}",
            c.id,
            c.computed.join("/"),
            c.printed.join("/")
        );
    }
    println!(
        "{} rows, {} passed, {failed} failed",
        checks.len(),
        checks.len() - failed
    );
    Ok(if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
