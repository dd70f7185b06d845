use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use fairkd::evaluation::{evaluate_protocol, VerificationConfig};
use fairkd::parallel::Execution;
use fairkd::sampling::identity_scores;
use fairkd::synthdata::{gen_pair_protocol, Universe, UniverseConfig};
use fairkd::training::{Encoder, EncoderSpec};

const MODES: [(&str, Execution); 2] = [
    ("sequential", Execution::Sequential),
    ("parallel", Execution::Parallel),
];

fn universe() -> Universe {
    Universe::new(UniverseConfig::default()).unwrap()
}

fn encoder(input_dim: usize) -> Encoder {
    Encoder::new(EncoderSpec {
        input_dim,
        hidden_widths: vec![64, 64],
        embedding_dim: 16,
        activation: Default::default(),
        init_seed: 1,
    })
    .unwrap()
}

fn generation(c: &mut Criterion) {
    let u = universe();
    let mut g = c.benchmark_group("generate_universe");
    g.sample_size(10);
    for (name, exec) in MODES {
        g.bench_function(name, |b| b.iter(|| u.generate(exec).unwrap()));
    }
    g.finish();
}

fn scoring(c: &mut Criterion) {
    let data = universe().generate(Execution::Parallel).unwrap();
    let (manifest, store) = (&data.eval.manifest, &data.eval.features);
    let enc = encoder(store.dim());
    let protocol = gen_pair_protocol(manifest, 400, 0).unwrap();
    let cfg = VerificationConfig { folds: 10, seed: 0 };

    let mut g = c.benchmark_group("evaluate_protocol");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| evaluate_protocol(|x| enc.forward(x), &protocol, store, cfg, exec).unwrap())
        });
    }
    g.finish();

    let samples = store.samples(manifest).unwrap();
    let inputs: Vec<&[f64]> = samples.iter().map(|s| s.feature.as_slice()).collect();
    let mut g = c.benchmark_group("embed_batch");
    for (name, exec) in MODES {
        g.bench_with_input(
            BenchmarkId::new(name, inputs.len()),
            &inputs,
            |b, inputs| b.iter(|| enc.embed_batch(black_box(inputs), exec).unwrap()),
        );
    }
    g.finish();

    let mut g = c.benchmark_group("identity_scores");
    for (name, exec) in MODES {
        g.bench_function(name, |b| {
            b.iter(|| identity_scores(black_box(manifest), exec).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, generation, scoring);
criterion_main!(benches);
