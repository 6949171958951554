use std::collections::{BTreeSet, HashSet};
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use bundlenat::checkpoint::Checkpoint;
use bundlenat::compat_graph::{
    build_frequency_matrix, frequency_from_bundles, gnn_forward, init_gnn, normalize_cooccurrence, GnnShape,
};
use bundlenat::data::{build_instances, split_80_20, synth_planted, DatasetSplit, GenerationInstance, SynthConfig};
use bundlenat::decoder::{decoder_ffn, init_decoder, one_token_attention, cross_attention, DecoderShape};
use bundlenat::encoder::{encode, init_encoder, EncoderShape};
use bundlenat::eval::{
    evaluate, latency_account, precision_at_k, precision_plus_at_k, recall_at_k, BundlePredictor, PopBaseline,
    PrecisionMode,
};
use bundlenat::layers::ForwardCtx;
use bundlenat::model::{BundleNat, ModelConfig};
use bundlenat::numerics::{finite_diff_check, softmax_rows, ParamStore, Tape, Tensor, Var};
use bundlenat::par::Parallelism;
use bundlenat::pretrain::{auc_eval, leave_one_out_split, train_mf_bpr, BprConfig, PreferenceEmbeddings};
use bundlenat::rng::{indexed_rng, stage_rng, Rng};
use bundlenat::training::{hungarian_match, oaxe_slot_loss, slot_costs, train, TrainConfig};
use bundlenat::Result;
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Written straight to stderr so the verdict shows without `--nocapture`.
fn verdict(n: usize, what: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr().lock(), "criterion {n:>2} [{tag}] {what}: {detail}");
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..n {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn uniform(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn weighted(tape: &mut Tape, out: Var, r: &Tensor) -> Result<Var> {
    let w = tape.constant(r.clone());
    let p = tape.mul(out, w)?;
    Ok(tape.sum(p))
}

// ---------------------------------------------------------------- 1

fn toy_model(seed: u64) -> BundleNat {
    let cfg = ModelConfig { heads: 1, enc_depth: 1, dec_depth: 1, gnn_layers: 1, ..ModelConfig::with_dim(4) };
    let mut rng = stage_rng(seed, "toy");
    let prefs = PreferenceEmbeddings { user_table: uniform(&mut rng, 2, 4), item_table: uniform(&mut rng, 10, 4) };
    let bundles: Vec<Vec<usize>> = (0..10).map(|i| vec![i, (i + 1) % 10]).collect();
    let graph = normalize_cooccurrence(&frequency_from_bundles(&bundles, 10).unwrap()).unwrap();
    BundleNat::init(cfg, prefs, graph, seed).unwrap()
}

fn op_gradients() -> Vec<(&'static str, f64)> {
    let (n, d, heads) = (6, 8, 1);
    let mut rng = stage_rng(1, "acceptance-ops");
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    init_encoder(&mut store, EncoderShape { dim: d, heads, depth: 1, ffn_hidden: d, layernorm: false }, &mut rng)
        .unwrap();
    store.insert("x", uniform(&mut rng, n, d)).unwrap();
    let r = uniform(&mut rng, n, d);
    let shape = EncoderShape { dim: d, heads, depth: 1, ffn_hidden: d, layernorm: false };
    let err = finite_diff_check(
        |tape, s| {
            let x = tape.param(s, "x")?;
            let y = encode(tape, s, &shape, x, &mut ForwardCtx::eval())?;
            weighted(tape, y, &r)
        },
        &mut store,
        3e-5,
    )
    .unwrap();
    out.push(("encoder attention+ffn", err));

    let dshape = DecoderShape { dim: d, heads, depth: 1, ffn_hidden: d, n_items: 10, layernorm: false };
    let mut store = ParamStore::new();
    init_decoder(&mut store, dshape, &mut rng).unwrap();
    store.insert("h", uniform(&mut rng, 1, d)).unwrap();
    store.insert("xf", uniform(&mut rng, n, d)).unwrap();
    let r = uniform(&mut rng, 1, d);
    let err = finite_diff_check(
        |tape, s| {
            let h = tape.param(s, "h")?;
            let xf = tape.param(s, "xf")?;
            let mut ctx = ForwardCtx::eval();
            let h1 = one_token_attention(tape, s, 0, heads, h, &mut ctx)?;
            let h2 = cross_attention(tape, s, 0, heads, h1, xf, &mut ctx)?;
            let h3 = decoder_ffn(tape, s, 0, h2, &mut ctx)?;
            weighted(tape, h3, &r)
        },
        &mut store,
        3e-5,
    )
    .unwrap();
    out.push(("decoder attention+ffn", err));

    let f = build_frequency_matrix(&[(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 4), (3, 4), (3, 5), (3, 0)], n, 4)
        .unwrap();
    let graph = normalize_cooccurrence(&f).unwrap();
    let mut store = ParamStore::new();
    init_gnn(&mut store, GnnShape { n_items: n, dim: d, layers: 1 }, &mut rng).unwrap();
    *store.value_mut("gnn.z").unwrap() = uniform(&mut rng, n, d);
    *store.value_mut("gnn.0.b").unwrap() = uniform(&mut rng, 1, d);
    let r = uniform(&mut rng, n, d);
    let err = finite_diff_check(
        |tape, s| {
            let prop = tape.constant(graph.propagation_matrix());
            let c = gnn_forward(tape, s, prop, 1)?;
            weighted(tape, c, &r)
        },
        &mut store,
        3e-5,
    )
    .unwrap();
    out.push(("gnn", err));
    out
}

fn pipeline_gradient() -> f64 {
    let mut model = toy_model(3);
    let inst = GenerationInstance { user: 1, candidates: vec![4, 0, 2, 9, 7, 5], bundle: vec![2, 4] };
    let targets: Vec<f64> = inst.candidates.iter().map(|c| f64::from(u8::from(inst.bundle.contains(c)))).collect();
    let mut params = std::mem::take(&mut model.params);
    finite_diff_check(
        |tape, p| {
            let mut m = model.clone();
            m.params = p.clone();
            let c = m.compat_var(tape)?.expect("compat enabled");
            let rows = tape.gather_rows(c, &inst.candidates)?;
            let z = m.logits_var(tape, &inst, Some(rows), &mut ForwardCtx::eval())?;
            let zc = tape.gather_cols(z, &inst.candidates)?;
            tape.bce_with_logits(zc, &targets)
        },
        &mut params,
        3e-5,
    )
    .unwrap()
}

#[test]
fn criterion_01_gradient_correctness() {
    let t0 = Instant::now();
    let mut results = op_gradients();
    results.push(("full pipeline", pipeline_gradient()));
    let elapsed = t0.elapsed();
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let pass = worst < 1e-5 && elapsed < Duration::from_secs(60);
    let detail: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect();
    verdict(1, "gradient check", pass, &format!("{} in {elapsed:.1?}", detail.join(", ")));
    assert!(pass, "{results:?} {elapsed:?}");
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_candidate_order_invariance() {
    let t0 = Instant::now();
    let data = planted_split();
    let mut rng = stage_rng(2, "acceptance-perm");
    let prefs = PreferenceEmbeddings {
        user_table: uniform(&mut rng, data.vocab.users, 16),
        item_table: uniform(&mut rng, data.vocab.items, 16),
    };
    let graph = normalize_cooccurrence(&frequency_from_bundles(&data.train_bundles(), data.vocab.items).unwrap()).unwrap();
    let model = BundleNat::init(ModelConfig::with_dim(16), prefs, graph, 2).unwrap();
    let compat = model.compat_table().unwrap();
    let mut mismatches = 0;
    for inst in data.test.iter().take(50) {
        let base: BTreeSet<usize> = model.decode_with(inst, compat.as_ref(), 5).unwrap().bundle.into_iter().collect();
        for _ in 0..20 {
            let mut p = inst.clone();
            p.candidates.shuffle(&mut rng);
            let got: BTreeSet<usize> = model.decode_with(&p, compat.as_ref(), 5).unwrap().bundle.into_iter().collect();
            mismatches += usize::from(got != base);
        }
    }
    let elapsed = t0.elapsed();
    let pass = mismatches == 0 && elapsed < Duration::from_secs(60);
    verdict(2, "candidate-order invariance", pass, &format!("{mismatches} mismatches in 1000 permutations, {elapsed:.1?}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_hungarian_oracle() {
    let mut rng = stage_rng(3, "acceptance-hungarian");
    let mut bad = 0;
    for k in 2..=6 {
        let perms = permutations(k);
        for _ in 0..100 {
            let cost: Vec<Vec<f64>> = (0..k).map(|_| (0..k).map(|_| rng.random_range(0.0..10.0)).collect()).collect();
            let brute = perms
                .iter()
                .map(|p| p.iter().enumerate().map(|(s, &t)| cost[s][t]).sum::<f64>())
                .fold(f64::INFINITY, f64::min);
            bad += usize::from(hungarian_match(&cost).unwrap().cost != brute);
        }
    }
    let mut worst_oaxe = 0.0f64;
    for _ in 0..100 {
        let dists = softmax_rows(&uniform(&mut rng, 4, 12)).unwrap();
        let mut items: Vec<usize> = (0..12).collect();
        items.shuffle(&mut rng);
        let targets = &items[..4];
        let cost = slot_costs(&dists, targets).unwrap();
        let brute = permutations(4)
            .iter()
            .map(|p| p.iter().enumerate().map(|(s, &t)| cost[s][t]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        worst_oaxe = worst_oaxe.max((oaxe_slot_loss(&dists, targets).unwrap() - brute).abs());
    }
    let pass = bad == 0 && worst_oaxe <= 1e-10;
    verdict(3, "Hungarian oracle", pass, &format!("{bad}/500 cost mismatches, OaXE K=4 max gap {worst_oaxe:.1e}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_cooccurrence_construction() {
    let f = build_frequency_matrix(&[(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (2, 2)], 3, 3).unwrap();
    let g = normalize_cooccurrence(&f).unwrap();
    let worked = [
        (g.weight(0, 1), 0.4),
        (g.weight(0, 2), 1.0 / 20f64.sqrt()),
        (g.weight(0, 0), 0.4),
        (g.weight(2, 2), 0.5),
    ];
    let worked_ok = worked.iter().all(|(a, b)| (a - b).abs() < 1e-12);
    let mut rng = stage_rng(4, "acceptance-graph");
    let mut bad = 0;
    for _ in 0..100 {
        let (items, bundles) = (rng.random_range(1..30), rng.random_range(1..20));
        let pairs: Vec<(usize, usize)> = (0..rng.random_range(1..80))
            .map(|_| (rng.random_range(0..bundles), rng.random_range(0..items)))
            .collect();
        let m = normalize_cooccurrence(&build_frequency_matrix(&pairs, items, bundles).unwrap()).unwrap();
        let m = m.matrix();
        let ok = (0..items).all(|i| (0..items).all(|j| m.get(i, j) >= 0.0 && m.get(i, j) == m.get(j, i)));
        bad += usize::from(!ok);
    }
    let pass = worked_ok && bad == 0;
    verdict(4, "co-occurrence construction", pass, &format!("worked example {worked_ok}, {bad}/100 asymmetric or negative"));
    assert!(pass);
}

// ---------------------------------------------------------------- 5

fn oracle_precision(p: &[usize], t: &[usize], mode: PrecisionMode) -> f64 {
    let truth: HashSet<usize> = t.iter().copied().collect();
    match mode {
        PrecisionMode::FirstMatch => f64::from(u8::from(p[0] == t[0])),
        PrecisionMode::Member => f64::from(u8::from(truth.contains(&p[0]))),
    }
}

#[test]
fn criterion_05_metric_oracles() {
    let mut rng = stage_rng(5, "acceptance-metrics");
    let mut mismatches = 0;
    let mut dominance_violations = 0;
    for run in 0..20 {
        let k = 1 + run % 6;
        let (mut pred, mut truth) = (Vec::new(), Vec::new());
        for _ in 0..50 {
            let mut pool: Vec<usize> = (0..3 * k + 2).collect();
            pool.shuffle(&mut rng);
            pred.push(pool[..k].to_vec());
            pool.shuffle(&mut rng);
            truth.push(pool[..k].to_vec());
        }
        let n = pred.len() as f64;
        let sets: Vec<(HashSet<usize>, HashSet<usize>)> = pred
            .iter()
            .zip(&truth)
            .map(|(p, t)| (p.iter().copied().collect(), t.iter().copied().collect()))
            .collect();
        let plus_oracle = sets.iter().filter(|(p, t)| !p.is_disjoint(t)).count() as f64 / n;
        let recall_oracle = sets.iter().map(|(p, t)| p.intersection(t).count() as f64 / k as f64).sum::<f64>() / n;
        let plus = precision_plus_at_k(&pred, &truth).unwrap();
        let recall = recall_at_k(&pred, &truth, k).unwrap();
        mismatches += usize::from(plus != plus_oracle) + usize::from(recall != recall_oracle);
        let mut best = recall;
        for mode in [PrecisionMode::FirstMatch, PrecisionMode::Member] {
            let oracle = pred.iter().zip(&truth).map(|(p, t)| oracle_precision(p, t, mode)).sum::<f64>() / n;
            let got = precision_at_k(&pred, &truth, mode).unwrap();
            mismatches += usize::from(got != oracle);
            best = best.max(got);
        }
        dominance_violations += usize::from(plus < best);
    }
    let pass = mismatches == 0 && dominance_violations == 0;
    verdict(5, "metric oracles", pass, &format!("{mismatches} mismatches over 1000 instances, {dominance_violations} dominance violations"));
    assert!(pass);
}

// ---------------------------------------------------------------- 6

#[test]
fn criterion_06_pretrain_sanity() {
    let tables = synth_planted(&SynthConfig::default()).unwrap().tables;
    let loo = leave_one_out_split(&tables.user_item, 6);
    let known: HashSet<(usize, usize)> = tables.user_item.iter().copied().collect();
    let cfg = BprConfig { epochs: 50, seed: 6, ..BprConfig::default() };
    let trained = train_mf_bpr(tables.vocab.users, tables.vocab.items, &loo.train, &cfg).unwrap();
    let auc = auc_eval(&trained.embeddings, tables.vocab.items, &loo.held_out, &known, 100, 6, Parallelism::Parallel).unwrap();
    let random = train_mf_bpr(tables.vocab.users, tables.vocab.items, &loo.train, &BprConfig { epochs: 0, ..cfg }).unwrap();
    let auc0 = auc_eval(&random.embeddings, tables.vocab.items, &loo.held_out, &known, 100, 6, Parallelism::Parallel).unwrap();
    let pass = auc >= 0.9 && (auc0 - 0.5).abs() <= 0.05;
    verdict(6, "pretrain sanity", pass, &format!("held-out AUC {auc:.4} after 50 epochs, random {auc0:.4}"));
    assert!(pass);
}

// ---------------------------------------------------------------- 7 and 10

struct Pipeline {
    pop_recall: f64,
    full_recall: f64,
    ablated_recall: f64,
    full_elapsed: Duration,
}

fn planted_split() -> DatasetSplit {
    let tables = synth_planted(&SynthConfig::default()).unwrap().tables;
    let (instances, _) = build_instances(&tables, 5, 100, 7, Parallelism::Parallel).unwrap();
    split_80_20(instances, tables.vocab, 7).unwrap()
}

/// Settings used for the end-to-end learning checks.
fn learning_config() -> TrainConfig {
    TrainConfig { lr: 1e-3, dropout: 0.2, weight_decay: 1e-3, epochs: 12, batch: 16, seed: 7, ..TrainConfig::default() }
}

fn pipeline() -> &'static Pipeline {
    static RUN: OnceLock<Pipeline> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let tables = synth_planted(&SynthConfig::default()).unwrap().tables;
        let (instances, _) = build_instances(&tables, 5, 100, 7, Parallelism::Parallel).unwrap();
        let split = split_80_20(instances, tables.vocab, 7).unwrap();
        let bpr = train_mf_bpr(
            tables.vocab.users,
            tables.vocab.items,
            &tables.user_item,
            &BprConfig { seed: 7, ..BprConfig::default() },
        )
        .unwrap();
        let graph = normalize_cooccurrence(&frequency_from_bundles(&split.train_bundles(), tables.vocab.items).unwrap()).unwrap();
        let fit = |cfg: ModelConfig| {
            let mut model = BundleNat::init(cfg, bpr.embeddings.clone(), graph.clone(), 7).unwrap();
            train(&mut model, &split.train, &learning_config()).unwrap();
            evaluate(&model, &split.test, 5, PrecisionMode::FirstMatch, Parallelism::Parallel).unwrap().recall
        };
        let pop = PopBaseline::fit(&split.train, tables.vocab.items).unwrap();
        let pop_recall = evaluate(&pop, &split.test, 5, PrecisionMode::FirstMatch, Parallelism::Parallel).unwrap().recall;
        let full_recall = fit(ModelConfig::default());
        let full_elapsed = t0.elapsed();
        let ablated_recall = fit(ModelConfig { use_compat: false, ..ModelConfig::default() });
        Pipeline { pop_recall, full_recall, ablated_recall, full_elapsed }
    })
}

fn overfit_recall() -> f64 {
    let tables = synth_planted(&SynthConfig::default()).unwrap().tables;
    let split = planted_split();
    let few: Vec<GenerationInstance> = split.train[..10].to_vec();
    let bpr = train_mf_bpr(split.vocab.users, split.vocab.items, &tables.user_item, &BprConfig { seed: 7, ..BprConfig::default() })
        .unwrap();
    let graph = normalize_cooccurrence(&frequency_from_bundles(&split.train_bundles(), split.vocab.items).unwrap()).unwrap();
    let mut model = BundleNat::init(ModelConfig::default(), bpr.embeddings, graph, 7).unwrap();
    let cfg = TrainConfig { epochs: 200, batch: 1, dropout: 0.0, weight_decay: 0.0, ..learning_config() };
    train(&mut model, &few, &cfg).unwrap();
    evaluate(&model, &few, 5, PrecisionMode::FirstMatch, Parallelism::Parallel).unwrap().recall
}

#[test]
fn criterion_07_end_to_end_learning() {
    let p = pipeline();
    let overfit = overfit_recall();
    let pass = p.full_recall >= 0.60
        && p.full_recall - p.pop_recall >= 0.15
        && p.full_elapsed < Duration::from_secs(15 * 60)
        && overfit == 1.0;
    verdict(
        7,
        "end-to-end learning",
        pass,
        &format!(
            "test Recall@5 {:.4} (need >= 0.60), POP {:.4} (gap {:.4}, need >= 0.15), pipeline {:.0?}, overfit train Recall@5 {overfit:.4}",
            p.full_recall,
            p.pop_recall,
            p.full_recall - p.pop_recall,
            p.full_elapsed
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_10_ablation_direction() {
    let p = pipeline();
    let gap = p.full_recall - p.ablated_recall;
    let pass = gap >= 0.05;
    verdict(
        10,
        "compatibility ablation",
        pass,
        &format!("full {:.4}, compatibility zeroed {:.4}, gap {gap:.4} (need >= 0.05)", p.full_recall, p.ablated_recall),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_08_one_shot_latency() {
    let split = planted_split();
    let mut rng = stage_rng(8, "acceptance-latency");
    let prefs = PreferenceEmbeddings {
        user_table: uniform(&mut rng, split.vocab.users, 8),
        item_table: uniform(&mut rng, split.vocab.items, 8),
    };
    let graph = normalize_cooccurrence(&frequency_from_bundles(&split.train_bundles(), split.vocab.items).unwrap()).unwrap();
    let model = BundleNat::init(ModelConfig::with_dim(8), prefs, graph, 8).unwrap();
    let rows = latency_account(&model, &split.test[..3], &[1, 5, 20]).unwrap();
    let pass = rows.iter().all(|r| r.nat_passes_per_bundle == 1 && r.autoregressive_passes_per_bundle == r.k)
        && model.passes_per_bundle(20) == 1;
    let detail: Vec<String> = rows
        .iter()
        .map(|r| format!("k={} one-shot {} vs autoregressive {}", r.k, r.nat_passes_per_bundle, r.autoregressive_passes_per_bundle))
        .collect();
    verdict(8, "one-shot latency", pass, &detail.join("; "));
    assert!(pass);
}

// ---------------------------------------------------------------- 9

fn run(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_bundlenat"))
        .args(["--seed", "9", "--out"])
        .arg(dir)
        .args(args)
        .env("BUNDLENAT_THREADS", "2")
        .output()
        .expect("spawn bundlenat")
}

fn stage_outputs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let d = dir.to_str().unwrap();
    let steps: [&[&str]; 5] = [
        &["synth", "--items", "100", "--users", "40", "--clusters", "5", "--candidates", "30"],
        &["prepare", "--data", d, "--candidates", "30"],
        &["pretrain", "--data", d, "--dim", "8", "--epochs", "5"],
        &["build-graph", "--data", d],
        &["train", "--data", d, "--dim", "8", "--heads", "2", "--epochs", "2", "--batch", "4", "--dropout", "0.1"],
    ];
    for step in steps {
        let out = run(dir, step);
        assert!(out.status.success(), "{step:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    ["train.inst", "test.inst", "pretrain.ckpt", "graph.ckpt", "model.ckpt", "loss.csv"]
        .iter()
        .map(|f| (f.to_string(), std::fs::read(dir.join(f)).unwrap()))
        .collect()
}

#[test]
fn criterion_09_determinism() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = stage_outputs(a.path());
    let second = stage_outputs(b.path());
    let differing: Vec<&str> = first.iter().zip(&second).filter(|(x, y)| x.1 != y.1).map(|(x, _)| x.0.as_str()).collect();

    let bytes = std::fs::read(a.path().join("model.ckpt")).unwrap();
    let model = BundleNat::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
    let round_trip = model.to_checkpoint().to_bytes() == bytes;

    let d = a.path().to_str().unwrap();
    let mismatch = run(a.path(), &["train", "--data", d, "--dim", "16", "--epochs", "1"]);
    let exit = mismatch.status.code();

    let pass = differing.is_empty() && round_trip && exit == Some(2);
    verdict(
        9,
        "determinism",
        pass,
        &format!(
            "{} stage outputs compared, differing {differing:?}; checkpoint round trip bit-exact {round_trip}; width mismatch exit {exit:?}",
            first.len()
        ),
    );
    assert!(pass);
}

#[test]
fn sequential_and_parallel_training_agree() {
    let split = planted_split();
    let mut rng = indexed_rng(9, "acceptance-modes", 0);
    let prefs = PreferenceEmbeddings {
        user_table: uniform(&mut rng, split.vocab.users, 8),
        item_table: uniform(&mut rng, split.vocab.items, 8),
    };
    let graph = normalize_cooccurrence(&frequency_from_bundles(&split.train_bundles(), split.vocab.items).unwrap()).unwrap();
    let fit = |mode| {
        let mut m = BundleNat::init(ModelConfig::with_dim(8), prefs.clone(), graph.clone(), 1).unwrap();
        let cfg = TrainConfig { epochs: 1, batch: 8, dropout: 0.1, parallelism: mode, ..TrainConfig::default() };
        train(&mut m, &split.train[..64], &cfg).unwrap();
        m.to_checkpoint().to_bytes()
    };
    assert_eq!(fit(Parallelism::Sequential), fit(Parallelism::Parallel));
}
