use std::hint::black_box;

use bundlenat::compat_graph::{frequency_from_bundles, normalize_cooccurrence};
use bundlenat::data::{build_instances, split_80_20, synth_planted, GenerationInstance, SynthConfig};
use bundlenat::model::{BundleNat, ModelConfig};
use bundlenat::par::Parallelism;
use bundlenat::pretrain::{train_mf_bpr, BprConfig};
use bundlenat::training::batch_gradient;
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

const MODES: [(&str, Parallelism); 2] = [("sequential", Parallelism::Sequential), ("parallel", Parallelism::Parallel)];

struct Fixture {
    model: BundleNat,
    instances: Vec<GenerationInstance>,
}

fn fixture() -> (bundlenat::data::InteractionTables, Fixture) {
    let tables = synth_planted(&SynthConfig::default()).unwrap().tables;
    let (inst, _) = build_instances(&tables, 5, 100, 7, Parallelism::Parallel).unwrap();
    let split = split_80_20(inst, tables.vocab, 7).unwrap();
    let dim = 16;
    let bpr = train_mf_bpr(
        tables.vocab.users,
        tables.vocab.items,
        &tables.user_item,
        &BprConfig { dim, epochs: 2, seed: 7, ..BprConfig::default() },
    )
    .unwrap();
    let graph = normalize_cooccurrence(&frequency_from_bundles(&split.train_bundles(), tables.vocab.items).unwrap()).unwrap();
    let model = BundleNat::init(ModelConfig::with_dim(dim), bpr.embeddings, graph, 7).unwrap();
    (tables, Fixture { model, instances: split.test })
}

fn bench(c: &mut Criterion) {
    let (tables, mut fx) = fixture();
    let mut group = c.benchmark_group("build_instances");
    for (name, mode) in MODES {
        group.bench_function(name, |b| b.iter(|| build_instances(black_box(&tables), 5, 100, 7, mode).unwrap()));
    }
    group.finish();

    let mut group = c.benchmark_group("predict_many");
    group.sample_size(10);
    for (name, mode) in MODES {
        group.bench_with_input(BenchmarkId::new(name, fx.instances.len()), &mode, |b, &mode| {
            b.iter(|| fx.model.predict_many(black_box(&fx.instances), 5, mode).unwrap())
        });
    }
    group.finish();

    let mut group = c.benchmark_group("batch_gradient");
    group.sample_size(10);
    let batch: Vec<GenerationInstance> = fx.instances[..32].to_vec();
    for (name, mode) in MODES {
        group.bench_function(name, |b| {
            b.iter(|| {
                let refs: Vec<&GenerationInstance> = batch.iter().collect();
                let loss = batch_gradient(&mut fx.model, &refs, 0.0, 0, mode).unwrap();
                fx.model.params.zero_grad();
                loss
            })
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
