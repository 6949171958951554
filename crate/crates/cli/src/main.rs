use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use bundlenat::compat_graph::{frequency_from_bundles, normalize_cooccurrence, CooccurrenceGraph};
use bundlenat::data::{
    build_instances, read_instances, split_80_20, synth_planted, write_instances, GenerationInstance, InteractionTables,
    SynthConfig,
};
use bundlenat::eval::{
    emit_report, evaluate, latency_account, BprBaseline, BundlePredictor, DatasetFingerprint, EvalReport, PopBaseline,
    PrecisionMode,
};
use bundlenat::model::{BundleNat, ModelConfig};
use bundlenat::par::{self, Parallelism};
use bundlenat::pretrain::{train_mf_bpr, BprConfig, PreferenceEmbeddings};
use bundlenat::training::{grid_search, train, GridSpec, TrainConfig};
use bundlenat::{Error, Result};

const PRETRAIN_FILE: &str = "pretrain.ckpt";
const GRAPH_FILE: &str = "graph.ckpt";
const MODEL_FILE: &str = "model.ckpt";
const LOSS_FILE: &str = "loss.csv";
const GRID_FILE: &str = "grid.tsv";
const REPORT_FILE: &str = "report.json";
const CLUSTER_FILE: &str = "clusters.tsv";

#[derive(Parser)]
#[command(name = "bundlenat", version, about = "One-shot personalized bundle generation")]
struct Cli {
    /// Seed for every random stage.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = "BUNDLENAT_THREADS", default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-cluster dataset plus its train/test instances.
    Synth(SynthArgs),
    /// Build train/test generation instances from interaction tables.
    Prepare(PrepareArgs),
    /// Train MF-BPR preference embeddings.
    Pretrain(PretrainArgs),
    /// Build the item co-occurrence graph from training bundles.
    BuildGraph(DataArgs),
    /// Train the bundle generator.
    Train(TrainArgs),
    /// Grid search over learning rate, dropout and weight decay.
    Gridsearch(GridArgs),
    /// Score a model and baselines on the test split.
    Eval(EvalArgs),
    /// Generate one bundle for an inline instance.
    Infer(InferArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 200)]
    users: usize,
    #[arg(long, default_value_t = 10)]
    clusters: usize,
    #[arg(long, default_value_t = 5)]
    bundle_size: usize,
    #[arg(long, default_value_t = 100)]
    candidates: usize,
    #[arg(long, default_value_t = 5)]
    bundles_per_user: usize,
    #[arg(long, default_value_t = 20)]
    bundles_per_cluster: usize,
    #[arg(long, default_value_t = 5)]
    extra_items: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
}

#[derive(Args)]
struct PrepareArgs {
    /// Directory holding user_item.tsv, user_bundle.tsv, bundle_item.tsv.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 5)]
    bundle_size: usize,
    #[arg(long, default_value_t = 100)]
    candidates: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 1)]
    negatives: usize,
}

#[derive(Args)]
struct DataArgs {
    /// Directory holding train.inst and test.inst.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Clone)]
struct ModelArgs {
    /// Preference embedding width; the model width is twice this.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Encoder and decoder blocks.
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 2)]
    gnn_layers: usize,
    /// FFN hidden width (default: model width).
    #[arg(long)]
    ffn_hidden: Option<usize>,
    #[arg(long)]
    layernorm: bool,
    /// Leave the compatibility signal out of the encoder input.
    #[arg(long)]
    no_compat: bool,
    /// Leave the preference signal out of the encoder input.
    #[arg(long)]
    no_preference: bool,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        let base = ModelConfig::with_dim(self.dim);
        ModelConfig {
            heads: self.heads,
            enc_depth: self.depth,
            dec_depth: self.depth,
            gnn_layers: self.gnn_layers,
            ffn_hidden: self.ffn_hidden.unwrap_or(base.ffn_hidden),
            layernorm: self.layernorm,
            use_compat: !self.no_compat,
            use_preference: !self.no_preference,
            ..base
        }
    }
}

#[derive(Args, Clone)]
struct Inputs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained embeddings (default: <data>/pretrain.ckpt).
    #[arg(long)]
    pretrain: Option<PathBuf>,
    /// Co-occurrence graph (default: <data>/graph.ckpt).
    #[arg(long)]
    graph: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 1e-5)]
    weight_decay: f64,
    /// Instances per update; the loss is averaged over the batch.
    #[arg(long, default_value_t = 1)]
    batch: usize,
}

#[derive(Args)]
struct GridArgs {
    #[command(flatten)]
    inputs: Inputs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, value_delimiter = ',', default_value = "1e-4,1e-3,1e-2,1e-1")]
    lrs: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4")]
    dropouts: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "1e-5,1e-4,1e-3,1e-2,1e-1")]
    weight_decays: Vec<f64>,
    /// Train grid points concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    /// Trained model (default: <data>/model.ckpt).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Baselines to score alongside the model: pop, bpr.
    #[arg(long, value_delimiter = ',', default_value = "pop,bpr")]
    baselines: Vec<String>,
    #[arg(long, default_value = "first-match")]
    precision: String,
    /// Bundle sizes for the decoder pass accounting.
    #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
    latency_k: Vec<usize>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    /// One instance in the `u=..|c=..|b=..` line format.
    #[arg(long)]
    instance: String,
    /// Bundle size (default: size of the instance's `b` list).
    #[arg(long)]
    k: Option<usize>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = par::init_threads(cli.threads) {
            eprintln!("error: cannot configure {} threads: {e}", cli.threads);
            return ExitCode::from(1);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Argument(_) => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn run(cli: &Cli) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::Synth(a) => synth(a, cli.seed, out),
        Command::Prepare(a) => {
            let tables = InteractionTables::load_dir(&a.data, None)?;
            prepare(&tables, a.bundle_size, a.candidates, cli.seed, out)
        }
        Command::Pretrain(a) => pretrain(a, cli.seed, out),
        Command::BuildGraph(a) => {
            let split = read_instances(&a.data)?;
            let f = frequency_from_bundles(&split.train_bundles(), split.vocab.items)?;
            let graph = normalize_cooccurrence(&f)?;
            let path = out.join(GRAPH_FILE);
            graph.write(&path)?;
            info!("wrote {}", path.display());
            Ok(())
        }
        Command::Train(a) => train_cmd(a, cli.seed, out),
        Command::Gridsearch(a) => gridsearch(a, cli.seed, out),
        Command::Eval(a) => eval_cmd(a, cli.seed, out),
        Command::Infer(a) => {
            let model = BundleNat::load(&a.model)?;
            let inst = GenerationInstance::parse_line(&a.instance).map_err(Error::Data)?;
            let k = a.k.unwrap_or(inst.bundle.len());
            let bundle = model.predict(&inst, k)?;
            let ids: Vec<String> = bundle.iter().map(usize::to_string).collect();
            println!("{}", ids.join(","));
            Ok(())
        }
    }
}

fn synth(a: &SynthArgs, seed: u64, out: &Path) -> Result<()> {
    let cfg = SynthConfig {
        n_users: a.users,
        n_items: a.items,
        n_clusters: a.clusters,
        bundles_per_user: a.bundles_per_user,
        k: a.bundle_size,
        m: a.candidates,
        noise_rate: a.noise,
        seed,
        bundles_per_cluster: a.bundles_per_cluster,
        extra_items_per_cluster: a.extra_items,
    };
    let planted = synth_planted(&cfg)?;
    planted.tables.write_dir(out)?;
    let clusters: String = planted
        .cluster_of_item
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{i}\t{c}\n"))
        .collect();
    let path = out.join(CLUSTER_FILE);
    std::fs::write(&path, clusters).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    prepare(&planted.tables, a.bundle_size, a.candidates, seed, out)
}

fn prepare(tables: &InteractionTables, k: usize, m: usize, seed: u64, out: &Path) -> Result<()> {
    let (instances, stats) = build_instances(tables, k, m, seed, Parallelism::Parallel)?;
    if stats.skipped_small > 0 {
        log::warn!("skipped {} bundles with fewer than {k} items", stats.skipped_small);
    }
    let split = split_80_20(instances, tables.vocab, seed)?;
    write_instances(&split, out)?;
    info!("wrote {} train / {} test instances to {}", split.train.len(), split.test.len(), out.display());
    Ok(())
}

fn pretrain(a: &PretrainArgs, seed: u64, out: &Path) -> Result<()> {
    let tables = InteractionTables::load_dir(&a.data, None)?;
    let cfg = BprConfig {
        dim: a.dim,
        epochs: a.epochs,
        lr: a.lr,
        weight_decay: a.weight_decay,
        negatives_per_positive: a.negatives,
        seed,
        ..BprConfig::default()
    };
    let outcome = train_mf_bpr(tables.vocab.users, tables.vocab.items, &tables.user_item, &cfg)?;
    if let Some(l) = outcome.epoch_losses.last() {
        info!("final BPR loss {l:.6}");
    }
    let path = out.join(PRETRAIN_FILE);
    outcome.embeddings.export(&path)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn load_inputs(inputs: &Inputs, dim: usize) -> Result<(bundlenat::data::DatasetSplit, PreferenceEmbeddings, CooccurrenceGraph)> {
    let split = read_instances(&inputs.data)?;
    let pre = inputs.pretrain.clone().unwrap_or_else(|| inputs.data.join(PRETRAIN_FILE));
    let prefs = PreferenceEmbeddings::import(&pre, Some(dim))?;
    let graph_path = inputs.graph.clone().unwrap_or_else(|| inputs.data.join(GRAPH_FILE));
    let graph = CooccurrenceGraph::read(&graph_path)?;
    Ok((split, prefs, graph))
}

fn train_cmd(a: &TrainArgs, seed: u64, out: &Path) -> Result<()> {
    let (split, prefs, graph) = load_inputs(&a.inputs, a.model.dim)?;
    let mut model = BundleNat::init(a.model.config(), prefs, graph, seed)?;
    let cfg = TrainConfig {
        lr: a.lr,
        dropout: a.dropout,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch: a.batch,
        seed,
        parallelism: Parallelism::Parallel,
    };
    let log = train(&mut model, &split.train, &cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let path = out.join(MODEL_FILE);
    model.save(&path)?;
    let loss_path = out.join(LOSS_FILE);
    std::fs::write(&loss_path, log.to_csv()).map_err(|e| Error::Data(format!("{}: {e}", loss_path.display())))?;
    info!("wrote {} and {}", path.display(), loss_path.display());
    Ok(())
}

fn gridsearch(a: &GridArgs, seed: u64, out: &Path) -> Result<()> {
    let (split, prefs, graph) = load_inputs(&a.inputs, a.model.dim)?;
    let cfg = a.model.config();
    let grid = GridSpec { lrs: a.lrs.clone(), dropouts: a.dropouts.clone(), weight_decays: a.weight_decays.clone() };
    let base = TrainConfig { epochs: a.epochs, batch: a.batch, seed, ..TrainConfig::default() };
    let jobs = if a.jobs > 1 { Parallelism::Parallel } else { Parallelism::Sequential };
    let result = grid_search(
        &split.train,
        split.k,
        &grid,
        &base,
        || BundleNat::init(cfg, prefs.clone(), graph.clone(), seed),
        jobs,
    )?;
    std::fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let path = out.join(GRID_FILE);
    std::fs::write(&path, result.table()).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    print!("{}", result.table());
    println!(
        "best: lr={} dropout={} weight_decay={}",
        result.best.lr, result.best.dropout, result.best.weight_decay
    );
    Ok(())
}

fn eval_cmd(a: &EvalArgs, seed: u64, out: &Path) -> Result<()> {
    let mode: PrecisionMode = a.precision.parse()?;
    let split = read_instances(&a.data)?;
    let model = BundleNat::load(&a.model.clone().unwrap_or_else(|| a.data.join(MODEL_FILE)))?;
    let k = split.k;
    let mut methods = Vec::new();
    for name in &a.baselines {
        let predictor: Box<dyn BundlePredictor> = match name.as_str() {
            "pop" => Box::new(PopBaseline::fit(&split.train, split.vocab.items)?),
            "bpr" => Box::new(BprBaseline { prefs: model.prefs.clone() }),
            other => return Err(Error::Argument(format!("unknown baseline {other:?} (expected pop or bpr)"))),
        };
        methods.push(evaluate(predictor.as_ref(), &split.test, k, mode, Parallelism::Parallel)?);
    }
    methods.push(evaluate(&model, &split.test, k, mode, Parallelism::Parallel)?);
    let ks: Vec<usize> = a.latency_k.iter().copied().filter(|&lk| lk <= split.m).collect();
    let sample: Vec<GenerationInstance> = split.test.iter().take(10).cloned().collect();
    let latency = if sample.is_empty() { Vec::new() } else { latency_account(&model, &sample, &ks)? };
    let mut config = BTreeMap::new();
    config.insert("seed".to_string(), seed.to_string());
    config.insert("k".to_string(), k.to_string());
    config.insert("m".to_string(), split.m.to_string());
    let report = EvalReport {
        precision_mode: mode,
        methods,
        latency,
        dataset: DatasetFingerprint::of(&split),
        config,
    };
    let path = out.join(REPORT_FILE);
    emit_report(&report, &path)?;
    print!("{}", report.render_table());
    info!("wrote {}", path.display());
    Ok(())
}
