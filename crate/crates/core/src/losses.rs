//! Loss terms: soft-label alignment, proxy metric losses (triplet and its
//! ablation variants), the graph-weighted interaction regularizer, and the
//! teacher/student composites together with their gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{node_class, IliGraph, Modality};
use crate::linalg::DenseMatrix;
use crate::net::{backward, forward_cached, DropoutMode, ForwardOutput, Gradients, ModelParams, OutputGrads};

pub const DEFAULT_MARGIN: f64 = 1.2;
pub const DEFAULT_GAMMA: f64 = 0.005;
pub const DEFAULT_TAU: f64 = 0.5;

/// Regularizer weight per (source modality, target modality).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityWeightTable {
    pub w_aa: f64,
    pub w_vv: f64,
    pub w_av: f64,
    pub w_va: f64,
}

impl Default for ModalityWeightTable {
    fn default() -> Self {
        Self {
            w_aa: 0.1,
            w_vv: 0.1,
            w_av: 0.4,
            w_va: 0.4,
        }
    }
}

impl ModalityWeightTable {
    pub fn weight(&self, from: Modality, to: Modality) -> f64 {
        match (from, to) {
            (Modality::Audio, Modality::Audio) => self.w_aa,
            (Modality::Visual, Modality::Visual) => self.w_vv,
            (Modality::Audio, Modality::Visual) => self.w_av,
            (Modality::Visual, Modality::Audio) => self.w_va,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MetricVariant {
    #[default]
    Triplet,
    HardTriplet,
    Contrastive,
    NPair,
}

impl std::str::FromStr for MetricVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "triplet" => Ok(Self::Triplet),
            "hard_triplet" => Ok(Self::HardTriplet),
            "contrastive" => Ok(Self::Contrastive),
            "n_pair" => Ok(Self::NPair),
            other => Err(Error::Argument(format!("unknown metric variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub gamma: f64,
    pub tau: f64,
    pub weights: ModalityWeightTable,
    pub variant: MetricVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            margin: DEFAULT_MARGIN,
            gamma: DEFAULT_GAMMA,
            tau: DEFAULT_TAU,
            weights: ModalityWeightTable::default(),
            variant: MetricVariant::Triplet,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin must be > 0, got {}", self.margin)));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0,1), got {}", self.tau)));
        }
        let w = &self.weights;
        if [w.w_aa, w.w_vv, w.w_av, w.w_va].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("modality weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Batch rows forming one (anchor, positive, negative) triple: the anchor
/// indexes audio proxies, positive and negative index visual proxies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
}

/// Sampled clip pairs for one nonzero graph entry `from → to`. Each pair is
/// `(source row, target row)`; the source contributes its embedding in the
/// modality of `from`, the target in the modality of `to`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgePairs {
    pub from: usize,
    pub to: usize,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub av_sal: f64,
    pub metric: f64,
    /// Unscaled regularizer value (the total includes `gamma ×` this).
    pub lir: f64,
}

fn check_one_hot(y: &DenseMatrix) -> Result<()> {
    for r in 0..y.rows() {
        let row = y.row(r);
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(Error::Argument(format!("label row {r} is not one-hot")));
        }
    }
    Ok(())
}

/// One-hot matrix for class indices.
pub fn one_hot(labels: &[usize], classes: usize) -> DenseMatrix {
    DenseMatrix::from_fn(labels.len(), classes, |r, c| if labels[r] == c { 1.0 } else { 0.0 })
}

/// `(1/B) Σ_n ‖s_a,n − y_n‖² + ‖s_v,n − y_n‖²`
pub fn av_sal(s_a: &DenseMatrix, s_v: &DenseMatrix, y: &DenseMatrix) -> Result<f64> {
    if s_a.shape() != y.shape() || s_v.shape() != y.shape() {
        return Err(Error::Dimension("soft labels and targets differ in shape".into()));
    }
    check_one_hot(y)?;
    let b = y.rows().max(1) as f64;
    let sq = |s: &DenseMatrix| -> f64 {
        s.as_slice()
            .iter()
            .zip(y.as_slice())
            .map(|(p, t)| (p - t) * (p - t))
            .sum()
    };
    Ok((sq(s_a) + sq(s_v)) / b)
}

/// Gradient of the alignment loss with respect to one modality's logits.
fn av_sal_logit_grad(soft: &DenseMatrix, y: &DenseMatrix) -> DenseMatrix {
    let b = y.rows().max(1) as f64;
    let mut g = soft.clone();
    g.as_mut_slice()
        .iter_mut()
        .zip(y.as_slice())
        .for_each(|(s, t)| *s = 2.0 / b * (*s - t) * *s * (1.0 - *s));
    g
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean of `[‖a−p‖² − ‖a−n‖² + α]₊` over row-aligned triples.
pub fn proxy_triplet(anchors: &DenseMatrix, positives: &DenseMatrix, negatives: &DenseMatrix, margin: f64) -> Result<f64> {
    if anchors.shape() != positives.shape() || anchors.shape() != negatives.shape() {
        return Err(Error::Dimension("triplet inputs differ in shape".into()));
    }
    let b = anchors.rows();
    if b == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..b)
        .map(|i| {
            let a = anchors.row(i);
            (sq_dist(a, positives.row(i)) - sq_dist(a, negatives.row(i)) + margin).max(0.0)
        })
        .sum();
    Ok(total / b as f64)
}

/// Builds triplets for every audio anchor, using the hardest in-batch
/// negative: the different-label visual proxy nearest to the anchor.
fn hardest_negatives(anchors: &DenseMatrix, visual: &DenseMatrix, labels: &[usize], triplets: &[Triplet]) -> Vec<Triplet> {
    triplets
        .iter()
        .map(|t| {
            let a = anchors.row(t.anchor);
            let mut best = t.negative;
            let mut best_d = f64::INFINITY;
            for k in 0..visual.rows() {
                if labels[k] == labels[t.anchor] {
                    continue;
                }
                let d = sq_dist(a, visual.row(k));
                if d < best_d {
                    best_d = d;
                    best = k;
                }
            }
            Triplet { negative: best, ..*t }
        })
        .collect()
}

/// Value of the configured metric loss over proxies, with gradients
/// `(d_audio_proxy, d_visual_proxy)`.
pub fn metric_loss(
    variant: MetricVariant,
    audio_proxy: &DenseMatrix,
    visual_proxy: &DenseMatrix,
    labels: &[usize],
    triplets: &[Triplet],
    margin: f64,
) -> (f64, DenseMatrix, DenseMatrix) {
    let (b, c) = audio_proxy.shape();
    let mut ga = DenseMatrix::zeros(b, c);
    let mut gv = DenseMatrix::zeros(visual_proxy.rows(), c);
    if triplets.is_empty() {
        return (0.0, ga, gv);
    }
    let scale = 1.0 / triplets.len() as f64;
    let mut total = 0.0;
    match variant {
        MetricVariant::Triplet | MetricVariant::HardTriplet => {
            let hard;
            let used = if variant == MetricVariant::HardTriplet {
                hard = hardest_negatives(audio_proxy, visual_proxy, labels, triplets);
                &hard[..]
            } else {
                triplets
            };
            for t in used {
                let a = audio_proxy.row(t.anchor);
                let p = visual_proxy.row(t.positive);
                let n = visual_proxy.row(t.negative);
                let h = sq_dist(a, p) - sq_dist(a, n) + margin;
                if h <= 0.0 {
                    continue;
                }
                total += h;
                // d/da = 2(n - p), d/dp = -2(a - p), d/dn = 2(a - n)
                let (dp, dn): (Vec<f64>, Vec<f64>) = (0..c)
                    .map(|k| (-2.0 * (a[k] - p[k]) * scale, 2.0 * (a[k] - n[k]) * scale))
                    .unzip();
                for k in 0..c {
                    let da = 2.0 * (n[k] - p[k]) * scale;
                    ga.row_mut(t.anchor)[k] += da;
                }
                gv.row_mut(t.positive).iter_mut().zip(&dp).for_each(|(g, d)| *g += d);
                gv.row_mut(t.negative).iter_mut().zip(&dn).for_each(|(g, d)| *g += d);
            }
        }
        MetricVariant::Contrastive => {
            for t in triplets {
                let a = audio_proxy.row(t.anchor).to_vec();
                let p = visual_proxy.row(t.positive).to_vec();
                let n = visual_proxy.row(t.negative).to_vec();
                total += sq_dist(&a, &p);
                for k in 0..c {
                    let d = 2.0 * (a[k] - p[k]) * scale;
                    ga.row_mut(t.anchor)[k] += d;
                    gv.row_mut(t.positive)[k] -= d;
                }
                let dist = sq_dist(&a, &n).sqrt();
                let gap = margin - dist;
                if gap > 0.0 {
                    total += gap * gap;
                    if dist > 0.0 {
                        // d/da [α − D]² = −2(α − D)(a − n)/D
                        for k in 0..c {
                            let d = -2.0 * gap * (a[k] - n[k]) / dist * scale;
                            ga.row_mut(t.anchor)[k] += d;
                            gv.row_mut(t.negative)[k] -= d;
                        }
                    }
                }
            }
        }
        MetricVariant::NPair => {
            for t in triplets {
                let a = audio_proxy.row(t.anchor).to_vec();
                let p = visual_proxy.row(t.positive).to_vec();
                let ap = dot(&a, &p);
                let negs: Vec<usize> = (0..visual_proxy.rows())
                    .filter(|&k| labels[k] != labels[t.anchor])
                    .collect();
                let logits: Vec<f64> = negs.iter().map(|&k| dot(&a, visual_proxy.row(k)) - ap).collect();
                // ln(1 + Σ e^x) computed stably.
                let m = logits.iter().cloned().fold(0.0, f64::max);
                let denom = (-m).exp() + logits.iter().map(|x| (x - m).exp()).sum::<f64>();
                total += m + denom.ln();
                let weights: Vec<f64> = logits.iter().map(|x| (x - m).exp() / denom).collect();
                let wsum: f64 = weights.iter().sum();
                for (&k, &w) in negs.iter().zip(&weights) {
                    let nk = visual_proxy.row(k).to_vec();
                    for j in 0..c {
                        ga.row_mut(t.anchor)[j] += w * (nk[j] - p[j]) * scale;
                        gv.row_mut(k)[j] += w * a[j] * scale;
                    }
                }
                for j in 0..c {
                    gv.row_mut(t.positive)[j] -= wsum * a[j] * scale;
                }
            }
        }
    }
    (total * scale, ga, gv)
}

/// Metric-loss value for an ablation variant.
pub fn ablation_loss(
    variant: MetricVariant,
    audio_proxy: &DenseMatrix,
    visual_proxy: &DenseMatrix,
    labels: &[usize],
    triplets: &[Triplet],
    config: &LossConfig,
) -> f64 {
    metric_loss(variant, audio_proxy, visual_proxy, labels, triplets, config.margin).0
}

fn embedding_row<'a>(z_a: &'a DenseMatrix, z_v: &'a DenseMatrix, m: Modality, row: usize) -> &'a [f64] {
    match m {
        Modality::Audio => z_a.row(row),
        Modality::Visual => z_v.row(row),
    }
}

/// Graph-weighted mean cross-clip embedding distance, with gradients
/// `(d_z_a, d_z_v)`.
pub fn lir_with_grad(
    z_a: &DenseMatrix,
    z_v: &DenseMatrix,
    graph: &IliGraph,
    pairs: &[EdgePairs],
    weights: &ModalityWeightTable,
) -> (f64, DenseMatrix, DenseMatrix) {
    let c = graph.num_classes();
    let mut ga = DenseMatrix::zeros(z_a.rows(), z_a.cols());
    let mut gv = DenseMatrix::zeros(z_v.rows(), z_v.cols());
    let mut total = 0.0;
    for edge in pairs {
        let a_ij = graph.weight(edge.from, edge.to);
        if a_ij == 0.0 || edge.pairs.is_empty() {
            continue;
        }
        let (m_src, _) = node_class(edge.from, c);
        let (m_dst, _) = node_class(edge.to, c);
        let w = weights.weight(m_src, m_dst) * a_ij / edge.pairs.len() as f64;
        for &(n, m) in &edge.pairs {
            let x = embedding_row(z_a, z_v, m_src, n).to_vec();
            let y = embedding_row(z_a, z_v, m_dst, m).to_vec();
            let d = sq_dist(&x, &y).sqrt();
            total += w * d;
            if d == 0.0 {
                continue;
            }
            let g: Vec<f64> = x.iter().zip(&y).map(|(p, q)| w * (p - q) / d).collect();
            let src = match m_src {
                Modality::Audio => ga.row_mut(n),
                Modality::Visual => gv.row_mut(n),
            };
            src.iter_mut().zip(&g).for_each(|(s, d)| *s += d);
            let dst = match m_dst {
                Modality::Audio => ga.row_mut(m),
                Modality::Visual => gv.row_mut(m),
            };
            dst.iter_mut().zip(&g).for_each(|(s, d)| *s -= d);
        }
    }
    (total, ga, gv)
}

pub fn lir(z_a: &DenseMatrix, z_v: &DenseMatrix, graph: &IliGraph, pairs: &[EdgePairs], weights: &ModalityWeightTable) -> f64 {
    lir_with_grad(z_a, z_v, graph, pairs, weights).0
}

/// Alignment plus metric loss on the cross-attention proxies.
pub fn teacher_loss(out: &ForwardOutput, labels: &[usize], triplets: &[Triplet], config: &LossConfig) -> Result<LossBreakdown> {
    let y = one_hot(labels, out.audio_logits.cols());
    let align = av_sal(&out.audio_soft, &out.visual_soft, &y)?;
    let (metric, _, _) = metric_loss(config.variant, &out.audio_proxy, &out.visual_proxy, labels, triplets, config.margin);
    Ok(LossBreakdown {
        total: align + metric,
        av_sal: align,
        metric,
        lir: 0.0,
    })
}

/// Teacher loss plus `gamma ×` the interaction regularizer.
pub fn student_loss(
    out: &ForwardOutput,
    labels: &[usize],
    triplets: &[Triplet],
    graph: &IliGraph,
    pairs: &[EdgePairs],
    config: &LossConfig,
) -> Result<LossBreakdown> {
    let mut parts = teacher_loss(out, labels, triplets, config)?;
    parts.lir = lir(&out.audio_logits, &out.visual_logits, graph, pairs, &config.weights);
    parts.total += config.gamma * parts.lir;
    Ok(parts)
}

/// Everything needed to evaluate the objective on one minibatch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub audio: DenseMatrix,
    pub visual: DenseMatrix,
    pub labels: Vec<usize>,
    pub triplets: Vec<Triplet>,
    /// Regularizer pairs; ignored when no graph is supplied.
    pub pairs: Vec<EdgePairs>,
}

/// Forward pass, loss breakdown and exact parameter gradients of the teacher
/// objective (`graph = None`) or the student objective.
pub fn loss_and_gradient(
    params: &ModelParams,
    batch: &Batch,
    graph: Option<&IliGraph>,
    config: &LossConfig,
    dropout: &DropoutMode,
) -> Result<(LossBreakdown, Gradients)> {
    let (out, cache) = forward_cached(params, &batch.audio, &batch.visual, dropout)?;
    let (b, c) = out.audio_logits.shape();
    if batch.labels.len() != b || batch.labels.iter().any(|&l| l >= c) {
        return Err(Error::Argument("batch labels do not match the batch".into()));
    }
    let y = one_hot(&batch.labels, c);
    let align = av_sal(&out.audio_soft, &out.visual_soft, &y)?;
    let (metric, d_pa, d_pv) = metric_loss(
        config.variant,
        &out.audio_proxy,
        &out.visual_proxy,
        &batch.labels,
        &batch.triplets,
        config.margin,
    );
    let mut grads = OutputGrads::zeros(b, c);
    grads.audio_logits = av_sal_logit_grad(&out.audio_soft, &y);
    grads.visual_logits = av_sal_logit_grad(&out.visual_soft, &y);
    grads.audio_proxy = d_pa;
    grads.visual_proxy = d_pv;
    let mut lir_value = 0.0;
    if let Some(g) = graph {
        if config.gamma > 0.0 && !g.is_zero() {
            let (v, dza, dzv) = lir_with_grad(&out.audio_logits, &out.visual_logits, g, &batch.pairs, &config.weights);
            lir_value = v;
            let gamma = config.gamma;
            for (dst, src) in [(&mut grads.audio_logits, &dza), (&mut grads.visual_logits, &dzv)] {
                dst.as_mut_slice()
                    .iter_mut()
                    .zip(src.as_slice())
                    .for_each(|(d, s)| *d += gamma * s);
            }
        } else {
            lir_value = lir(&out.audio_logits, &out.visual_logits, g, &batch.pairs, &config.weights);
        }
    }
    let gamma = if graph.is_some() { config.gamma } else { 0.0 };
    let parts = LossBreakdown {
        total: align + metric + gamma * lir_value,
        av_sal: align,
        metric,
        lir: lir_value,
    };
    Ok((parts, backward(params, &cache, &grads)))
}
