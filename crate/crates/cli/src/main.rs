use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ili_core::checkpoint::TrainState;
use ili_core::graph::{edge_frequency, infer_ili_with, IliGraph, IliOptions, LogitsMatrix};
use ili_core::losses::MetricVariant;
use ili_core::net::embed;
use ili_core::retrieval::evaluate;
use ili_core::synth::{generate, save_generated, SplitDataset, SynthConfig};
use ili_core::trainer::{insertion_sweep, resume_training, run_training_to, TrainConfig};
use ili_core::Error;

const SEED_ENV: &str = "ILI_SEED";

#[derive(Parser)]
#[command(name = "ili", version, about = "Audio-visual retrieval with inferred latent interaction graphs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted hidden co-occurring events
    GenData(GenDataArgs),
    /// Train teacher then student and write checkpoints
    Train(TrainArgs),
    /// Infer an interaction graph from logits or a checkpoint
    InferGraph(InferGraphArgs),
    /// Evaluate cross-modal retrieval MAP of a checkpoint
    Eval(EvalArgs),
    /// Edge-frequency matrix and heatmap over stored graphs
    FreqHeatmap(FreqHeatmapArgs),
    /// Compare final MAP across transition epochs and a no-regularizer baseline
    SweepInsertion(SweepArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file with synthesis settings; flags override its values
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for train.csv, test.csv and meta.json
    #[arg(long)]
    out: PathBuf,
    /// Number of classes [default: 6]
    #[arg(long)]
    classes: Option<usize>,
    /// Number of clips [default: 1200]
    #[arg(long)]
    clips: Option<usize>,
    /// Audio feature width [default: 16]
    #[arg(long)]
    audio_dim: Option<usize>,
    /// Visual feature width [default: 32]
    #[arg(long)]
    visual_dim: Option<usize>,
    /// Weight of hidden-event prototypes in the features [default: 0.8]
    #[arg(long)]
    mix_strength: Option<f64>,
    /// Gaussian noise scale [default: 0.3]
    #[arg(long)]
    noise: Option<f64>,
    /// Fraction of each class kept for training [default: 0.8]
    #[arg(long)]
    train_fraction: Option<f64>,
    /// Random seed; falls back to the config file, then ILI_SEED [default: 42]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Clone)]
struct TrainOverrides {
    /// JSON file mirroring the training configuration; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Total epochs [default: 1000]
    #[arg(long)]
    epochs: Option<usize>,
    /// Last teacher epoch M [default: 400]
    #[arg(long)]
    transition_epoch: Option<usize>,
    /// Minibatch size, clamped to the training set [default: 400]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Adam learning rate [default: 0.0001]
    #[arg(long)]
    lr: Option<f64>,
    /// Regularizer weight gamma [default: 0.005]
    #[arg(long)]
    gamma: Option<f64>,
    /// Metric-loss margin [default: 1.2]
    #[arg(long)]
    margin: Option<f64>,
    /// Soft-label activation threshold for pair sampling [default: 0.5]
    #[arg(long)]
    tau: Option<f64>,
    /// Hidden layer width [default: 1024]
    #[arg(long)]
    hidden: Option<usize>,
    /// Dropout rate [default: 0.15]
    #[arg(long)]
    dropout: Option<f64>,
    /// Metric loss: triplet, hard_triplet, contrastive or n_pair [default: triplet]
    #[arg(long)]
    lir_variant: Option<MetricVariant>,
    /// Comma-separated checkpoint epochs [default: 300,400,500,600,700,800,900]
    #[arg(long, value_delimiter = ',')]
    checkpoint_epochs: Option<Vec<usize>>,
    /// Sparsity penalty of graph inference [default: 0.01]
    #[arg(long)]
    lambda_reg: Option<f64>,
    /// Minimum checkpoint frequency of a stable edge [default: 0.7142857142857143]
    #[arg(long)]
    min_freq: Option<f64>,
    /// Random seed; falls back to the config file, then ILI_SEED [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory with train.csv and optionally test.csv, meta.json
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and log.csv
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint directory with its stored configuration
    #[arg(long, conflicts_with = "config")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["logits", "ckpt"]))]
struct InferGraphArgs {
    /// Logits CSV with one column per audio then visual class node
    #[arg(long)]
    logits: Option<PathBuf>,
    /// Checkpoint directory; logits are computed on the training clips of --data
    #[arg(long, requires = "data")]
    ckpt: Option<PathBuf>,
    /// Dataset directory used with --ckpt
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output adjacency CSV
    #[arg(long)]
    out: PathBuf,
    /// Lasso penalty on parent weights; 0 gives least squares
    #[arg(long, default_value_t = ili_core::graph::DEFAULT_LAMBDA_REG)]
    lambda_reg: f64,
    /// Random restarts of the permutation search
    #[arg(long, default_value_t = ili_core::grasp::DEFAULT_RESTARTS)]
    restarts: usize,
    /// Seed for restart orderings; falls back to ILI_SEED [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory or model file
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset directory; test.csv is evaluated
    #[arg(long)]
    data: PathBuf,
    /// Per-query AP CSV
    #[arg(long)]
    out: PathBuf,
    /// Also write the top-k retrieved clips per query next to --out
    #[arg(long)]
    topk: Option<usize>,
}

#[derive(Args)]
struct FreqHeatmapArgs {
    /// Glob matching graph CSV files, e.g. 'run/ckpt_epoch_*/graph.csv'
    #[arg(long)]
    graphs: String,
    /// Weight above which an edge counts as present
    #[arg(long, default_value_t = ili_core::graph::DEFAULT_EPSILON)]
    epsilon: f64,
    /// Output prefix; writes <prefix>.csv and <prefix>.svg
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated transition epochs
    #[arg(long = "m", value_delimiter = ',', required = true)]
    m_values: Vec<usize>,
    /// Comparison table CSV
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainOverrides,
}

/// A failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Diverged { .. } => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn input_error(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| input_error(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Reads an optional JSON config and reports whether it set `seed`.
fn read_json_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<(T, bool), Failure> {
    let Some(path) = path else {
        return Ok((T::default(), false));
    };
    let text = std::fs::read_to_string(path).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    let has_seed = value.get("seed").is_some();
    let config = serde_json::from_value(value).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    Ok((config, has_seed))
}

fn resolve_seed(flag: Option<u64>, from_file: bool, current: u64) -> Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if from_file {
        return Ok(current);
    }
    Ok(env_seed()?.unwrap_or(current))
}

fn gen_data(args: GenDataArgs) -> Result<(), Failure> {
    let (mut cfg, has_seed): (SynthConfig, bool) = read_json_config(args.config.as_deref())?;
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = args.$field { cfg.$field = v; } )* };
    }
    apply!(classes, clips, audio_dim, visual_dim, mix_strength, noise, train_fraction);
    if args.classes.is_some() {
        cfg.cooccurrence = resized(&cfg.cooccurrence_matrix(), cfg.classes);
    }
    cfg.seed = resolve_seed(args.seed, has_seed, cfg.seed)?;
    let generated = generate(&cfg)?;
    save_generated(&args.out, &cfg, &generated)?;
    println!(
        "wrote {} training and {} test clips to {}",
        generated.data.train.len(),
        generated.data.test.len(),
        args.out.display()
    );
    Ok(())
}

/// Truncates or zero-pads a square matrix to `classes` rows and columns.
fn resized(q: &[Vec<f64>], classes: usize) -> Vec<Vec<f64>> {
    (0..classes)
        .map(|i| {
            (0..classes)
                .map(|j| q.get(i).and_then(|r| r.get(j)).copied().unwrap_or(0.0))
                .collect()
        })
        .collect()
}

fn train_config(o: &TrainOverrides) -> Result<TrainConfig, Failure> {
    let (mut cfg, has_seed): (TrainConfig, bool) = read_json_config(o.config.as_deref())?;
    if let Some(v) = o.epochs {
        cfg.epochs_total = v;
    }
    macro_rules! apply {
        ($($field:ident),*) => { $( if let Some(v) = o.$field.clone() { cfg.$field = v; } )* };
    }
    apply!(
        transition_epoch,
        batch_size,
        lr,
        gamma,
        margin,
        tau,
        hidden,
        dropout,
        lir_variant,
        checkpoint_epochs,
        lambda_reg,
        min_freq
    );
    cfg.seed = resolve_seed(o.seed, has_seed, cfg.seed)?;
    Ok(cfg)
}

fn load_data(dir: &Path) -> Result<SplitDataset, Failure> {
    if !dir.join("train.csv").exists() {
        return Err(input_error(format!("{}: no train.csv", dir.display())));
    }
    Ok(SplitDataset::load_dir(dir)?)
}

fn train(args: TrainArgs) -> Result<(), Failure> {
    let data = load_data(&args.data)?;
    let outcome = match &args.resume {
        Some(ckpt) => {
            if !ckpt.exists() {
                return Err(input_error(format!("{}: checkpoint not found", ckpt.display())));
            }
            resume_training(&data, ckpt, Some(&args.out))?
        }
        None => {
            let cfg = train_config(&args.overrides)?;
            cfg.validate()?;
            run_training_to(&data, &cfg, &args.out)?
        }
    };
    if let Some(last) = outcome.log.epochs.last() {
        println!("epoch {}: loss {:.6}", last.epoch, last.total);
    }
    if !data.test.is_empty() {
        let r = evaluate(&outcome.params, &data.test)?;
        println!("{}", r.summary_line());
    }
    println!("graph edges: {}", outcome.graph.edges().len());
    Ok(())
}

fn infer_graph(args: InferGraphArgs) -> Result<(), Failure> {
    let seed = match args.seed {
        Some(s) => s,
        None => env_seed()?.unwrap_or(0),
    };
    let logits = match (&args.logits, &args.ckpt, &args.data) {
        (Some(path), _, _) => LogitsMatrix::load_csv(path)?,
        (None, Some(ckpt), Some(data_dir)) => {
            let state = TrainState::load_dir(ckpt)?;
            let data = load_data(data_dir)?;
            let (za, zv) = embed(&state.params, &data.train.audio_matrix(), &data.train.visual_matrix())?;
            LogitsMatrix::from_parts(&za, &zv, state.class_names)?
        }
        _ => return Err(input_error("give --logits, or --ckpt with --data")),
    };
    let opts = IliOptions {
        lambda_reg: args.lambda_reg,
        restarts: args.restarts,
        seed,
        ..IliOptions::default()
    };
    let graph = infer_ili_with(&logits, &opts)?;
    graph.save_csv(&args.out)?;
    if graph.is_zero() {
        println!("no edges found; wrote the zero graph to {}", args.out.display());
    } else {
        println!("{} edges written to {}", graph.edges().len(), args.out.display());
    }
    Ok(())
}

fn eval(args: EvalArgs) -> Result<(), Failure> {
    if !args.ckpt.exists() {
        return Err(input_error(format!("{}: checkpoint not found", args.ckpt.display())));
    }
    let state = TrainState::load_dir(&args.ckpt)?;
    let data = load_data(&args.data)?;
    if data.test.is_empty() {
        return Err(input_error(format!("{}: no test clips", args.data.display())));
    }
    let result = evaluate(&state.params, &data.test)?;
    let ids: Vec<String> = data.test.clips.iter().map(|c| c.clip_id.clone()).collect();
    result.save_csv(&args.out, &ids)?;
    if let Some(k) = args.topk {
        let path = topk_path(&args.out, k);
        std::fs::write(&path, result.top_k_csv(&ids, &data.test.labels(), k))
            .map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    }
    println!("{}", result.summary_line());
    Ok(())
}

fn topk_path(out: &Path, k: usize) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "results".into(), |s| s.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}_top{k}.csv"))
}

fn freq_heatmap(args: FreqHeatmapArgs) -> Result<(), Failure> {
    let mut paths: Vec<PathBuf> = glob::glob(&args.graphs)
        .map_err(|e| input_error(format!("bad glob {:?}: {e}", args.graphs)))?
        .filter_map(std::result::Result::ok)
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(input_error(format!("no graph files match {:?}", args.graphs)));
    }
    let graphs = paths.iter().map(|p| IliGraph::load_csv(p)).collect::<Result<Vec<_>, _>>()?;
    let freq = edge_frequency(&graphs, args.epsilon)?;
    let prefix = args.out.to_string_lossy().into_owned();
    for (ext, body) in [("csv", freq.to_csv_string()), ("svg", freq.to_svg())] {
        let path = PathBuf::from(format!("{prefix}.{ext}"));
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| input_error(format!("{}: {e}", parent.display())))?;
        }
        std::fs::write(&path, body).map_err(|e| input_error(format!("{}: {e}", path.display())))?;
    }
    println!("edge frequencies over {} graphs written to {prefix}.csv and {prefix}.svg", graphs.len());
    Ok(())
}

fn sweep(args: SweepArgs) -> Result<(), Failure> {
    let data = load_data(&args.data)?;
    let mut cfg = train_config(&args.overrides)?;
    for &m in &args.m_values {
        cfg.transition_epoch = m;
        cfg.validate()?;
    }
    let table = insertion_sweep(&data, &cfg, &args.m_values)?;
    std::fs::write(&args.out, table.to_csv_string())
        .map_err(|e| input_error(format!("{}: {e}", args.out.display())))?;
    print!("{}", table.to_csv_string());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::InferGraph(a) => infer_graph(a),
        Command::Eval(a) => eval(a),
        Command::FreqHeatmap(a) => freq_heatmap(a),
        Command::SweepInsertion(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
