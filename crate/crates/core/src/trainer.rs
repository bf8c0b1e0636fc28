//! Two-stage training: teacher epochs `1..=M`, graph inference at `M`, then
//! student epochs with the interaction regularizer, plus checkpointing and
//! the insertion-epoch sweep.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainState;
use crate::error::{Error, Result};
use crate::graph::{
    edge_frequency, infer_ili_with, node_class, stable_edges, IliGraph, IliOptions, LogitsMatrix, Modality,
    DEFAULT_EPSILON, DEFAULT_LAMBDA_REG, DEFAULT_MIN_FREQ,
};
use crate::grasp::DEFAULT_RESTARTS;
use crate::linalg::{format_real, DenseMatrix};
use crate::losses::{
    loss_and_gradient, Batch, EdgePairs, LossConfig, MetricVariant, ModalityWeightTable, Triplet, DEFAULT_GAMMA,
    DEFAULT_MARGIN, DEFAULT_TAU,
};
use crate::net::{
    adam_step, embed, sigmoid_matrix, AdamConfig, DropoutMode, ModelParams, NetShape, OptimizerState,
    DEFAULT_ADAM_EPS, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_LEARNING_RATE,
};
use crate::retrieval::evaluate;
use crate::synth::{Dataset, SplitDataset};

pub const DEFAULT_PAIR_BUDGET: usize = 4;
pub const DEFAULT_HIDDEN: usize = 1024;
pub const DEFAULT_DROPOUT: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs_total: usize,
    pub transition_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub margin: f64,
    pub gamma: f64,
    pub tau: f64,
    pub weights: ModalityWeightTable,
    pub checkpoint_epochs: Vec<usize>,
    pub seed: u64,
    pub lir_variant: MetricVariant,
    pub min_freq: f64,
    pub epsilon: f64,
    pub lambda_reg: f64,
    pub graph_restarts: usize,
    pub pair_budget: usize,
    pub hidden: usize,
    pub dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs_total: 1000,
            transition_epoch: 400,
            batch_size: 400,
            lr: DEFAULT_LEARNING_RATE,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            margin: DEFAULT_MARGIN,
            gamma: DEFAULT_GAMMA,
            tau: DEFAULT_TAU,
            weights: ModalityWeightTable::default(),
            checkpoint_epochs: (3..=9).map(|k| k * 100).collect(),
            seed: 0,
            lir_variant: MetricVariant::Triplet,
            min_freq: DEFAULT_MIN_FREQ,
            epsilon: DEFAULT_EPSILON,
            lambda_reg: DEFAULT_LAMBDA_REG,
            graph_restarts: DEFAULT_RESTARTS,
            pair_budget: DEFAULT_PAIR_BUDGET,
            hidden: DEFAULT_HIDDEN,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            gamma: self.gamma,
            tau: self.tau,
            weights: self.weights,
            variant: self.lir_variant,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: DEFAULT_ADAM_EPS,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.transition_epoch < 1 || self.transition_epoch >= self.epochs_total {
            return bad(format!(
                "transition epoch must satisfy 1 <= M < epochs_total, got M={} with {} epochs",
                self.transition_epoch, self.epochs_total
            ));
        }
        if self.batch_size < 2 {
            return bad(format!("batch size must be at least 2, got {}", self.batch_size));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0,1), got {b}"));
            }
        }
        if self.checkpoint_epochs.windows(2).any(|w| w[0] >= w[1]) || self.checkpoint_epochs.first() == Some(&0) {
            return bad("checkpoint epochs must be positive and strictly increasing".into());
        }
        if !(self.min_freq > 0.0 && self.min_freq <= 1.0) {
            return bad(format!("min_freq must lie in (0,1], got {}", self.min_freq));
        }
        if !(self.epsilon >= 0.0) || !(self.lambda_reg >= 0.0) {
            return bad("epsilon and lambda_reg must be >= 0".into());
        }
        if self.pair_budget == 0 || self.hidden == 0 {
            return bad("pair budget and hidden width must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0,1), got {}", self.dropout));
        }
        self.loss_config().validate()
    }

    fn graph_options(&self) -> IliOptions {
        IliOptions {
            lambda_reg: self.lambda_reg,
            restarts: self.graph_restarts,
            seed: self.seed,
            ..IliOptions::default()
        }
    }

    /// Epochs at which a graph is inferred: the checkpoints reached by the
    /// run plus the transition epoch.
    pub fn graph_epochs(&self) -> Vec<usize> {
        let mut e: Vec<usize> = self
            .checkpoint_epochs
            .iter()
            .copied()
            .filter(|&e| e <= self.epochs_total)
            .chain([self.transition_epoch])
            .collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

/// Loss components of one epoch, averaged over clips, with retrieval MAP on
/// evaluation epochs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub av_sal: f64,
    pub metric: f64,
    pub lir: f64,
    pub map: Option<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointGraph {
    pub epoch: usize,
    pub graph: IliGraph,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub graphs: Vec<CheckpointGraph>,
    pub lir_graph: Option<IliGraph>,
}

impl TrainLog {
    pub fn completed_epochs(&self) -> usize {
        self.epochs.len()
    }

    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|r| r.total).collect()
    }

    pub fn graph_at(&self, epoch: usize) -> Option<&IliGraph> {
        self.graphs.iter().find(|g| g.epoch == epoch).map(|g| &g.graph)
    }

    /// `epoch,loss_total,loss_avsal,loss_triplet,loss_lir,map_a2v,map_v2a`,
    /// with the MAP cells empty off evaluation epochs.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("epoch,loss_total,loss_avsal,loss_triplet,loss_lir,map_a2v,map_v2a\n");
        for r in &self.epochs {
            let (a, v) = r
                .map
                .map_or((String::new(), String::new()), |(a, v)| (format_real(a), format_real(v)));
            let _ = writeln!(
                s,
                "{},{},{},{},{},{a},{v}",
                r.epoch,
                format_real(r.total),
                format_real(r.av_sal),
                format_real(r.metric),
                format_real(r.lir)
            );
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

/// `k`-point trailing moving average; entry `i` averages `values[i+1-k..=i]`
/// (fewer at the start).
pub fn moving_average(values: &[f64], k: usize) -> Vec<f64> {
    let k = k.max(1);
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(k);
            values[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for a (purpose, epoch, batch) triple.
fn stream_seed(seed: u64, purpose: u64, epoch: usize, batch: usize) -> u64 {
    [purpose, epoch as u64, batch as u64]
        .iter()
        .fold(splitmix(seed), |acc, &x| splitmix(acc ^ x))
}

const SHUFFLE: u64 = 1;
const TRIPLETS: u64 = 2;
const DROPOUT: u64 = 3;
const PAIRS: u64 = 4;

/// One triplet per batch row: the row's audio proxy as anchor, a uniformly
/// drawn same-label row (possibly itself) as positive and a uniformly drawn
/// different-label row as negative. Rows whose label fills the batch get no
/// triplet.
pub fn sample_triplets<R: Rng>(labels: &[usize], rng: &mut R) -> Vec<Triplet> {
    let mut out = Vec::with_capacity(labels.len());
    for (i, &l) in labels.iter().enumerate() {
        let same: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] == l).collect();
        let diff: Vec<usize> = (0..labels.len()).filter(|&k| labels[k] != l).collect();
        if diff.is_empty() {
            continue;
        }
        let positive = same[rng.random_range(0..same.len())];
        let negative = diff[rng.random_range(0..diff.len())];
        out.push(Triplet {
            anchor: i,
            positive,
            negative,
        });
    }
    out
}

/// For every nonzero graph entry, up to `budget` distinct (source, target)
/// row pairs whose soft labels for the endpoint classes exceed `tau`, drawn
/// uniformly from the candidate product.
pub fn sample_pairs<R: Rng>(
    soft_audio: &DenseMatrix,
    soft_visual: &DenseMatrix,
    graph: &IliGraph,
    tau: f64,
    budget: usize,
    rng: &mut R,
) -> Vec<EdgePairs> {
    let c = graph.num_classes();
    let active = |node: usize| -> Vec<usize> {
        let (modality, class) = node_class(node, c);
        let s = match modality {
            Modality::Audio => soft_audio,
            Modality::Visual => soft_visual,
        };
        (0..s.rows()).filter(|&r| s.get(r, class) > tau).collect()
    };
    graph
        .edges()
        .into_iter()
        .map(|(from, to, _)| {
            let src = active(from);
            let dst = active(to);
            let total = src.len() * dst.len();
            let pairs = if total == 0 {
                Vec::new()
            } else {
                index::sample(rng, total, budget.min(total))
                    .into_iter()
                    .map(|k| (src[k / dst.len()], dst[k % dst.len()]))
                    .collect()
            };
            EdgePairs { from, to, pairs }
        })
        .collect()
}

/// Trained parameters with their log and the graph driving the student stage
/// (the last inferred graph when no regularizer graph was built).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
    pub graph: IliGraph,
}

pub(crate) fn check_dataset(data: &SplitDataset, config: &TrainConfig) -> Result<()> {
    let n = data.train.len();
    let c = data.num_classes();
    if n == 0 {
        return Err(Error::InsufficientData("training set is empty".into()));
    }
    if data.train.clips.iter().chain(&data.test.clips).any(|x| x.label >= c) {
        return Err(Error::Argument(format!("labels must lie below {c}")));
    }
    if n <= 2 * c + 2 {
        return Err(Error::InsufficientData(format!(
            "graph inference over {} logit columns needs more than {} training clips, got {n}",
            2 * c,
            2 * c + 2
        )));
    }
    config.validate()
}

fn new_state(data: &SplitDataset, config: &TrainConfig) -> Result<TrainState> {
    check_dataset(data, config)?;
    let shape = NetShape {
        audio_dim: data.audio_dim(),
        visual_dim: data.visual_dim(),
        hidden: config.hidden,
        classes: data.num_classes(),
    };
    let params = ModelParams::init(&shape, config.seed);
    let optimizer = OptimizerState::new(&params);
    Ok(TrainState {
        config: config.clone(),
        class_names: data.class_names.clone(),
        params,
        optimizer,
        log: TrainLog::default(),
        teacher_soft: None,
    })
}

fn soft_labels(params: &ModelParams, data: &Dataset) -> Result<(DenseMatrix, DenseMatrix)> {
    let (za, zv) = embed(params, &data.audio_matrix(), &data.visual_matrix())?;
    Ok((sigmoid_matrix(&za), sigmoid_matrix(&zv)))
}

fn infer_graph(state: &TrainState, data: &Dataset) -> Result<IliGraph> {
    let (za, zv) = embed(&state.params, &data.audio_matrix(), &data.visual_matrix())?;
    let logits = LogitsMatrix::from_parts(&za, &zv, state.class_names.clone())?;
    infer_ili_with(&logits, &state.config.graph_options())
}

/// Graph used by the regularizer: stable edges of the epoch-M graph across
/// every graph inferred so far, or the epoch-M graph alone.
fn regularizer_graph(log: &TrainLog, config: &TrainConfig) -> Result<IliGraph> {
    let m = config.transition_epoch;
    let base = log
        .graph_at(m)
        .ok_or_else(|| Error::Argument(format!("no graph inferred at epoch {m}")))?;
    let history: Vec<IliGraph> = log
        .graphs
        .iter()
        .filter(|g| g.epoch <= m)
        .map(|g| g.graph.clone())
        .collect();
    if history.len() < 2 {
        return Ok(base.clone());
    }
    let freq = edge_frequency(&history, config.epsilon)?;
    stable_edges(&freq, base, config.min_freq)
}

fn run_epoch(state: &mut TrainState, data: &Dataset, out: Option<&Path>) -> Result<EpochRecord> {
    let epoch = state.log.completed_epochs() + 1;
    let config = state.config.clone();
    let loss_cfg = config.loss_config();
    let adam = config.adam();
    let n = data.len();
    let bs = config.batch_size.min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, SHUFFLE, epoch, 0)));
    let student = epoch > config.transition_epoch;
    let graph = if student { state.log.lir_graph.clone() } else { None };
    let mut sums = [0.0f64; 4];
    for (b, rows) in order.chunks(bs).enumerate() {
        let (audio, visual) = data.batch_matrices(rows);
        let labels: Vec<usize> = rows.iter().map(|&i| data.clips[i].label).collect();
        let triplets = sample_triplets(
            &labels,
            &mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, TRIPLETS, epoch, b)),
        );
        let pairs = match (&graph, &state.teacher_soft) {
            (Some(g), Some((sa, sv))) => sample_pairs(
                &sa.select_rows(rows),
                &sv.select_rows(rows),
                g,
                config.tau,
                config.pair_budget,
                &mut ChaCha8Rng::seed_from_u64(stream_seed(config.seed, PAIRS, epoch, b)),
            ),
            _ => Vec::new(),
        };
        let batch = Batch {
            audio,
            visual,
            labels,
            triplets,
            pairs,
        };
        let dropout = DropoutMode {
            rate: config.dropout,
            seed: stream_seed(config.seed, DROPOUT, epoch, b),
            train: true,
        };
        let (parts, grads) = loss_and_gradient(&state.params, &batch, graph.as_ref(), &loss_cfg, &dropout)?;
        if !parts.total.is_finite() {
            return Err(diverged(state, epoch, "non-finite loss", out));
        }
        adam_step(&mut state.params, &grads, &mut state.optimizer, &adam);
        if !state.params.is_finite() {
            return Err(diverged(state, epoch, "non-finite parameters", out));
        }
        let w = rows.len() as f64;
        for (s, v) in sums.iter_mut().zip([parts.total, parts.av_sal, parts.metric, parts.lir]) {
            *s += w * v;
        }
    }
    let n = n as f64;
    Ok(EpochRecord {
        epoch,
        total: sums[0] / n,
        av_sal: sums[1] / n,
        metric: sums[2] / n,
        lir: sums[3] / n,
        map: None,
    })
}

fn diverged(state: &TrainState, epoch: usize, what: &str, out: Option<&Path>) -> Error {
    let dump = out.map(|dir| {
        let path = dir.join(format!("diverged_epoch_{epoch}"));
        match state.save_dir(&path, None) {
            Ok(()) => path.display().to_string(),
            Err(e) => format!("{what}; dump failed: {e}"),
        }
    });
    let last = state.log.epochs.last().map_or_else(String::new, |r| {
        format!("; last completed epoch {} had loss {}", r.epoch, r.total)
    });
    Error::Diverged {
        epoch,
        dump: dump.unwrap_or_else(|| format!("{what}{last}")),
    }
}

fn train_loop(mut state: TrainState, data: &SplitDataset, out: Option<&Path>) -> Result<TrainOutcome> {
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    train_epochs(&mut state, data, out)?;
    let graph = state
        .log
        .lir_graph
        .clone()
        .or_else(|| state.log.graphs.last().map(|g| g.graph.clone()))
        .unwrap_or_else(|| IliGraph::zero(state.class_names.clone()));
    if let Some(dir) = out {
        state.log.save_csv(&dir.join("log.csv"))?;
        state.save_dir(&dir.join("final"), Some(&graph))?;
    }
    Ok(TrainOutcome {
        params: state.params,
        log: state.log,
        graph,
    })
}

fn train_epochs(state: &mut TrainState, data: &SplitDataset, out: Option<&Path>) -> Result<()> {
    let config = state.config.clone();
    let graph_epochs = config.graph_epochs();
    while state.log.completed_epochs() < config.epochs_total {
        let mut record = run_epoch(state, &data.train, out)?;
        let epoch = record.epoch;
        if graph_epochs.contains(&epoch) {
            let graph = infer_graph(state, &data.train)?;
            state.log.graphs.push(CheckpointGraph { epoch, graph });
            if !data.test.is_empty() {
                let r = evaluate(&state.params, &data.test)?;
                record.map = Some((r.map_a2v, r.map_v2a));
            }
        }
        if epoch == config.transition_epoch {
            let g = regularizer_graph(&state.log, &config)?;
            if g.is_zero() {
                log::warn!("no stable interaction edges at epoch {epoch}; the regularizer stays inactive");
            }
            state.log.lir_graph = Some(g);
            state.teacher_soft = Some(soft_labels(&state.params, &data.train)?);
        }
        state.log.epochs.push(record);
        if graph_epochs.contains(&epoch) {
            if let Some((a, v)) = record.map {
                log::info!("epoch {epoch}: loss {:.5}, MAP A->V {a:.4} V->A {v:.4}", record.total);
            }
            if let Some(dir) = out {
                let graph = state.log.graph_at(epoch).cloned();
                state.save_dir(&dir.join(format!("ckpt_epoch_{epoch}")), graph.as_ref())?;
            }
        }
    }
    Ok(())
}

/// Runs the full schedule in memory.
pub fn run_training(data: &SplitDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_loop(new_state(data, config)?, data, None)
}

/// Runs the full schedule, writing `ckpt_epoch_<E>/` directories at every
/// graph epoch, `final/` and `log.csv` under `out`.
pub fn run_training_to(data: &SplitDataset, config: &TrainConfig, out: &Path) -> Result<TrainOutcome> {
    train_loop(new_state(data, config)?, data, Some(out))
}

/// Continues a run from a checkpoint directory with its stored configuration.
pub fn resume_training(data: &SplitDataset, checkpoint: &Path, out: Option<&Path>) -> Result<TrainOutcome> {
    let state = TrainState::load_dir(checkpoint)?;
    check_dataset(data, &state.config)?;
    if state.params.shape().audio_dim != data.audio_dim() || state.params.shape().visual_dim != data.visual_dim() {
        return Err(Error::Dimension("checkpoint and dataset feature widths differ".into()));
    }
    train_loop(state, data, out)
}

/// Final test MAP of one schedule in an insertion sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// `None` for the no-regularizer baseline.
    pub transition_epoch: Option<usize>,
    pub gamma: f64,
    pub final_loss: f64,
    pub map_a2v: f64,
    pub map_v2a: f64,
    pub map_avg: f64,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn baseline(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.transition_epoch.is_none())
    }

    /// `setting,transition_epoch,gamma,final_loss,map_a2v,map_v2a,map_avg`.
    pub fn to_csv_string(&self) -> String {
        let mut s = String::from("setting,transition_epoch,gamma,final_loss,map_a2v,map_v2a,map_avg\n");
        for r in &self.rows {
            let (name, m) = r
                .transition_epoch
                .map_or(("baseline".to_string(), String::new()), |m| (format!("M={m}"), m.to_string()));
            let _ = writeln!(
                s,
                "{name},{m},{},{},{},{},{}",
                format_real(r.gamma),
                format_real(r.final_loss),
                format_real(r.map_a2v),
                format_real(r.map_v2a),
                format_real(r.map_avg)
            );
        }
        s
    }
}

fn sweep_row(data: &SplitDataset, config: &TrainConfig, m: Option<usize>) -> Result<SweepRow> {
    let outcome = run_training(data, config)?;
    let r = evaluate(&outcome.params, &data.test)?;
    Ok(SweepRow {
        transition_epoch: m,
        gamma: config.gamma,
        final_loss: outcome.log.epochs.last().map_or(f64::NAN, |e| e.total),
        map_a2v: r.map_a2v,
        map_v2a: r.map_v2a,
        map_avg: r.map_avg,
        log: outcome.log,
    })
}

/// One run per transition epoch plus a `gamma = 0` baseline, rows sorted with
/// the baseline first and then by `M`.
pub fn insertion_sweep(data: &SplitDataset, config: &TrainConfig, m_values: &[usize]) -> Result<SweepTable> {
    if m_values.is_empty() {
        return Err(Error::Argument("no transition epochs given".into()));
    }
    if data.test.is_empty() {
        return Err(Error::InsufficientData("the sweep compares test MAP but the test set is empty".into()));
    }
    let mut ms = m_values.to_vec();
    ms.sort_unstable();
    ms.dedup();
    let baseline = TrainConfig {
        gamma: 0.0,
        ..config.clone()
    };
    let mut rows = vec![sweep_row(data, &baseline, None)?];
    for m in ms {
        let cfg = TrainConfig {
            transition_epoch: m,
            ..config.clone()
        };
        log::info!("insertion sweep: M = {m}");
        rows.push(sweep_row(data, &cfg, Some(m))?);
    }
    Ok(SweepTable { rows })
}
