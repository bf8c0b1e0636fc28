//! Two-branch embedding network shared by the teacher and student stages.
//!
//! Each modality branch is three tanh affine layers with inverted dropout
//! followed by a linear projection to C outputs. The projection output is at
//! once the class logits and the embedding. A batch-level cross-attention
//! layer turns the two embeddings into the proxies used by the metric loss.
//! Gradients are derived by hand for this fixed architecture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, DenseMatrix};

pub const HIDDEN_LAYERS: usize = 3;

/// Layer widths of the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetShape {
    pub audio_dim: usize,
    pub visual_dim: usize,
    pub hidden: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Affine {
    /// `in × out`
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Affine {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: glorot_matrix(fan_in, fan_out, rng),
            bias: vec![0.0; fan_out],
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DenseMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn apply(&self, input: &DenseMatrix) -> DenseMatrix {
        let mut out = DenseMatrix::zeros(input.rows(), self.weight.cols());
        for r in 0..out.rows() {
            out.row_mut(r).copy_from_slice(&self.bias);
        }
        gemm(1.0, input, false, &self.weight, false, 1.0, &mut out);
        out
    }
}

fn glorot_matrix(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.random_range(-limit..limit))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub hidden: Vec<Affine>,
    pub projection: Affine,
}

impl Branch {
    fn init(input: usize, hidden: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layers = Vec::with_capacity(HIDDEN_LAYERS);
        let mut fan_in = input;
        for _ in 0..HIDDEN_LAYERS {
            layers.push(Affine::glorot(fan_in, hidden, rng));
            fan_in = hidden;
        }
        Self {
            hidden: layers,
            projection: Affine::glorot(hidden, classes, rng),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Affine> {
        self.hidden.iter().chain(std::iter::once(&self.projection))
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Affine> {
        self.hidden.iter_mut().chain(std::iter::once(&mut self.projection))
    }

    fn input_dim(&self) -> usize {
        self.hidden[0].weight.rows()
    }
}

/// Query/key/value projections (each C×C) for one attention direction.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: DenseMatrix,
    pub key: DenseMatrix,
    pub value: DenseMatrix,
}

impl AttentionParams {
    fn init(classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            query: glorot_matrix(classes, classes, rng),
            key: glorot_matrix(classes, classes, rng),
            value: glorot_matrix(classes, classes, rng),
        }
    }

    pub fn zeros(classes: usize) -> Self {
        Self {
            query: DenseMatrix::zeros(classes, classes),
            key: DenseMatrix::zeros(classes, classes),
            value: DenseMatrix::zeros(classes, classes),
        }
    }
}

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub audio: Branch,
    pub visual: Branch,
    /// Audio embeddings attend over visual embeddings.
    pub audio_attention: AttentionParams,
    /// Visual embeddings attend over audio embeddings.
    pub visual_attention: AttentionParams,
}

pub type Gradients = ModelParams;

impl ModelParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init(shape: &NetShape, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let audio = Branch::init(shape.audio_dim, shape.hidden, shape.classes, &mut rng);
        let visual = Branch::init(shape.visual_dim, shape.hidden, shape.classes, &mut rng);
        let audio_attention = AttentionParams::init(shape.classes, &mut rng);
        let visual_attention = AttentionParams::init(shape.classes, &mut rng);
        Self {
            audio,
            visual,
            audio_attention,
            visual_attention,
        }
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            audio_dim: self.audio.input_dim(),
            visual_dim: self.visual.input_dim(),
            hidden: self.audio.hidden[0].weight.cols(),
            classes: self.audio.projection.weight.cols(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let zero_branch = |b: &Branch| Branch {
            hidden: b.hidden.iter().map(Affine::zeros_like).collect(),
            projection: b.projection.zeros_like(),
        };
        let c = self.shape().classes;
        Self {
            audio: zero_branch(&self.audio),
            visual: zero_branch(&self.visual),
            audio_attention: AttentionParams::zeros(c),
            visual_attention: AttentionParams::zeros(c),
        }
    }

    /// Every parameter tensor in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for branch in [&self.audio, &self.visual] {
            for layer in branch.layers() {
                out.push(layer.weight.as_slice());
                out.push(&layer.bias);
            }
        }
        for att in [&self.audio_attention, &self.visual_attention] {
            out.push(att.query.as_slice());
            out.push(att.key.as_slice());
            out.push(att.value.as_slice());
        }
        out
    }

    /// Mutable view of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for branch in [&mut self.audio, &mut self.visual] {
            for layer in branch.layers_mut() {
                out.push(layer.weight.as_mut_slice());
                out.push(&mut layer.bias);
            }
        }
        for att in [&mut self.audio_attention, &mut self.visual_attention] {
            out.push(att.query.as_mut_slice());
            out.push(att.key.as_mut_slice());
            out.push(att.value.as_mut_slice());
        }
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub audio_logits: DenseMatrix,
    pub visual_logits: DenseMatrix,
    pub audio_soft: DenseMatrix,
    pub visual_soft: DenseMatrix,
    pub audio_proxy: DenseMatrix,
    pub visual_proxy: DenseMatrix,
}

impl ForwardOutput {
    /// Embeddings are the projection outputs.
    pub fn audio_embeddings(&self) -> &DenseMatrix {
        &self.audio_logits
    }

    pub fn visual_embeddings(&self) -> &DenseMatrix {
        &self.visual_logits
    }

    pub fn batch_size(&self) -> usize {
        self.audio_logits.rows()
    }
}

/// Dropout configuration for one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DropoutMode {
    pub rate: f64,
    pub seed: u64,
    pub train: bool,
}

impl DropoutMode {
    pub fn eval() -> Self {
        Self {
            rate: 0.0,
            seed: 0,
            train: false,
        }
    }

    fn active(&self) -> bool {
        self.train && self.rate > 0.0
    }
}

struct LayerCache {
    input: DenseMatrix,
    /// tanh of the pre-activation
    activation: DenseMatrix,
    /// Inverted dropout multipliers (0 or 1/keep); `None` when dropout is off.
    mask: Option<Vec<f64>>,
}

struct BranchCache {
    layers: Vec<LayerCache>,
    projection_input: DenseMatrix,
}

struct AttentionCache {
    query_src: DenseMatrix,
    key_src: DenseMatrix,
    q: DenseMatrix,
    k: DenseMatrix,
    v: DenseMatrix,
    weights: DenseMatrix,
}

/// Intermediate values kept for the backward pass.
pub struct ForwardCache {
    audio: BranchCache,
    visual: BranchCache,
    audio_attention: AttentionCache,
    visual_attention: AttentionCache,
}

fn branch_forward(
    branch: &Branch,
    input: &DenseMatrix,
    dropout: &DropoutMode,
    rng: &mut ChaCha8Rng,
) -> (DenseMatrix, BranchCache) {
    let keep = 1.0 - dropout.rate;
    let mut h = input.clone();
    let mut layers = Vec::with_capacity(branch.hidden.len());
    for layer in &branch.hidden {
        let mut act = layer.apply(&h);
        act.as_mut_slice().iter_mut().for_each(|v| *v = v.tanh());
        let mut out = act.clone();
        let mask = if dropout.active() {
            let m: Vec<f64> = (0..out.as_slice().len())
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            out.as_mut_slice().iter_mut().zip(&m).for_each(|(v, s)| *v *= s);
            Some(m)
        } else {
            None
        };
        layers.push(LayerCache {
            input: std::mem::replace(&mut h, out),
            activation: act,
            mask,
        });
    }
    let logits = branch.projection.apply(&h);
    (
        logits,
        BranchCache {
            layers,
            projection_input: h,
        },
    )
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_matrix(m: &DenseMatrix) -> DenseMatrix {
    let mut s = m.clone();
    s.as_mut_slice().iter_mut().for_each(|v| *v = sigmoid(*v));
    s
}

fn softmax_rows(m: &mut DenseMatrix) {
    for r in 0..m.rows() {
        let row = m.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
}

fn attention_forward(
    query_src: &DenseMatrix,
    key_src: &DenseMatrix,
    params: &AttentionParams,
) -> (DenseMatrix, AttentionCache) {
    let b = query_src.rows();
    let c = query_src.cols();
    let q = query_src.matmul(&params.query).expect("query shape");
    let k = key_src.matmul(&params.key).expect("key shape");
    let v = key_src.matmul(&params.value).expect("value shape");
    let mut weights = DenseMatrix::zeros(b, key_src.rows());
    gemm(1.0 / (c as f64).sqrt(), &q, false, &k, true, 0.0, &mut weights);
    softmax_rows(&mut weights);
    let mut proxy = query_src.clone();
    gemm(1.0, &weights, false, &v, false, 1.0, &mut proxy);
    (
        proxy,
        AttentionCache {
            query_src: query_src.clone(),
            key_src: key_src.clone(),
            q,
            k,
            v,
            weights,
        },
    )
}

/// Residual single-head attention over the batch in both directions:
/// audio rows query the visual rows and vice versa. Returns
/// `(audio_proxy, visual_proxy)`.
pub fn cross_attention_proxy(
    z_a: &DenseMatrix,
    z_v: &DenseMatrix,
    audio_attention: &AttentionParams,
    visual_attention: &AttentionParams,
) -> Result<(DenseMatrix, DenseMatrix)> {
    if z_a.rows() == 0 {
        return Err(Error::Dimension("cross-attention over an empty batch".into()));
    }
    if z_a.shape() != z_v.shape() {
        return Err(Error::Dimension(format!(
            "audio embeddings {:?} and visual embeddings {:?} differ",
            z_a.shape(),
            z_v.shape()
        )));
    }
    let c = z_a.cols();
    for att in [audio_attention, visual_attention] {
        for m in [&att.query, &att.key, &att.value] {
            if m.shape() != (c, c) {
                return Err(Error::Dimension(format!("attention projections must be {c}x{c}")));
            }
        }
    }
    let (pa, _) = attention_forward(z_a, z_v, audio_attention);
    let (pv, _) = attention_forward(z_v, z_a, visual_attention);
    Ok((pa, pv))
}

fn check_inputs(params: &ModelParams, audio: &DenseMatrix, visual: &DenseMatrix) -> Result<()> {
    let shape = params.shape();
    if audio.cols() != shape.audio_dim || visual.cols() != shape.visual_dim {
        return Err(Error::Dimension(format!(
            "inputs are {}/{} wide, network expects {}/{}",
            audio.cols(),
            visual.cols(),
            shape.audio_dim,
            shape.visual_dim
        )));
    }
    if audio.rows() != visual.rows() {
        return Err(Error::Dimension("audio and visual batches differ in length".into()));
    }
    if audio.rows() == 0 {
        return Err(Error::Dimension("empty batch".into()));
    }
    Ok(())
}

pub fn forward(
    params: &ModelParams,
    audio: &DenseMatrix,
    visual: &DenseMatrix,
    dropout: &DropoutMode,
) -> Result<ForwardOutput> {
    forward_cached(params, audio, visual, dropout).map(|(out, _)| out)
}

/// Forward pass that also returns what [`backward`] needs.
pub fn forward_cached(
    params: &ModelParams,
    audio: &DenseMatrix,
    visual: &DenseMatrix,
    dropout: &DropoutMode,
) -> Result<(ForwardOutput, ForwardCache)> {
    check_inputs(params, audio, visual)?;
    let mut rng = ChaCha8Rng::seed_from_u64(dropout.seed);
    let (audio_logits, audio_cache) = branch_forward(&params.audio, audio, dropout, &mut rng);
    let (visual_logits, visual_cache) = branch_forward(&params.visual, visual, dropout, &mut rng);
    let (audio_proxy, audio_att) =
        attention_forward(&audio_logits, &visual_logits, &params.audio_attention);
    let (visual_proxy, visual_att) =
        attention_forward(&visual_logits, &audio_logits, &params.visual_attention);
    let out = ForwardOutput {
        audio_soft: sigmoid_matrix(&audio_logits),
        visual_soft: sigmoid_matrix(&visual_logits),
        audio_logits,
        visual_logits,
        audio_proxy,
        visual_proxy,
    };
    Ok((
        out,
        ForwardCache {
            audio: audio_cache,
            visual: visual_cache,
            audio_attention: audio_att,
            visual_attention: visual_att,
        },
    ))
}

/// Inference-mode embeddings `(audio, visual)` for a set of clips.
pub fn embed(params: &ModelParams, audio: &DenseMatrix, visual: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix)> {
    check_inputs(params, audio, visual)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eval = DropoutMode::eval();
    let (a, _) = branch_forward(&params.audio, audio, &eval, &mut rng);
    let (v, _) = branch_forward(&params.visual, visual, &eval, &mut rng);
    Ok((a, v))
}

/// Loss gradients with respect to the network outputs. Soft-label
/// gradients must already be folded into the logit gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputGrads {
    pub audio_logits: DenseMatrix,
    pub visual_logits: DenseMatrix,
    pub audio_proxy: DenseMatrix,
    pub visual_proxy: DenseMatrix,
}

impl OutputGrads {
    pub fn zeros(batch: usize, classes: usize) -> Self {
        Self {
            audio_logits: DenseMatrix::zeros(batch, classes),
            visual_logits: DenseMatrix::zeros(batch, classes),
            audio_proxy: DenseMatrix::zeros(batch, classes),
            visual_proxy: DenseMatrix::zeros(batch, classes),
        }
    }
}

fn add_into(dst: &mut DenseMatrix, src: &DenseMatrix) {
    dst.as_mut_slice()
        .iter_mut()
        .zip(src.as_slice())
        .for_each(|(d, s)| *d += s);
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        out.iter_mut().zip(m.row(r)).for_each(|(o, v)| *o += v);
    }
    out
}

/// Backpropagates through one attention direction; accumulates into the
/// query-source and key-source gradients.
fn attention_backward(
    params: &AttentionParams,
    cache: &AttentionCache,
    d_proxy: &DenseMatrix,
    grads: &mut AttentionParams,
    d_query_src: &mut DenseMatrix,
    d_key_src: &mut DenseMatrix,
) {
    let b = cache.weights.rows();
    let bk = cache.weights.cols();
    let c = d_proxy.cols();
    let scale = 1.0 / (c as f64).sqrt();
    // Residual path.
    add_into(d_query_src, d_proxy);

    let mut d_v = DenseMatrix::zeros(bk, c);
    gemm(1.0, &cache.weights, true, d_proxy, false, 0.0, &mut d_v);
    let mut d_weights = DenseMatrix::zeros(b, bk);
    gemm(1.0, d_proxy, false, &cache.v, true, 0.0, &mut d_weights);
    // Softmax Jacobian, then the 1/sqrt(C) scaling.
    let mut d_scores = DenseMatrix::zeros(b, bk);
    for r in 0..b {
        let w = cache.weights.row(r);
        let dw = d_weights.row(r);
        let dot: f64 = w.iter().zip(dw).map(|(a, g)| a * g).sum();
        for (o, (a, g)) in d_scores.row_mut(r).iter_mut().zip(w.iter().zip(dw)) {
            *o = a * (g - dot) * scale;
        }
    }
    let mut d_q = DenseMatrix::zeros(b, c);
    gemm(1.0, &d_scores, false, &cache.k, false, 0.0, &mut d_q);
    let mut d_k = DenseMatrix::zeros(bk, c);
    gemm(1.0, &d_scores, true, &cache.q, false, 0.0, &mut d_k);

    gemm(1.0, &cache.query_src, true, &d_q, false, 1.0, &mut grads.query);
    gemm(1.0, &cache.key_src, true, &d_k, false, 1.0, &mut grads.key);
    gemm(1.0, &cache.key_src, true, &d_v, false, 1.0, &mut grads.value);

    gemm(1.0, &d_q, false, &params.query, true, 1.0, d_query_src);
    gemm(1.0, &d_k, false, &params.key, true, 1.0, d_key_src);
    gemm(1.0, &d_v, false, &params.value, true, 1.0, d_key_src);
}

fn branch_backward(branch: &Branch, cache: &BranchCache, d_logits: &DenseMatrix, grads: &mut Branch) {
    let proj = &branch.projection;
    gemm(1.0, &cache.projection_input, true, d_logits, false, 0.0, &mut grads.projection.weight);
    grads.projection.bias = column_sums(d_logits);
    let mut d_h = DenseMatrix::zeros(d_logits.rows(), proj.weight.rows());
    gemm(1.0, d_logits, false, &proj.weight, true, 0.0, &mut d_h);
    for (idx, layer) in branch.hidden.iter().enumerate().rev() {
        let lc = &cache.layers[idx];
        let mut d_pre = d_h;
        {
            let dp = d_pre.as_mut_slice();
            if let Some(mask) = &lc.mask {
                dp.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
            }
            dp.iter_mut()
                .zip(lc.activation.as_slice())
                .for_each(|(g, t)| *g *= 1.0 - t * t);
        }
        let g = &mut grads.hidden[idx];
        gemm(1.0, &lc.input, true, &d_pre, false, 0.0, &mut g.weight);
        g.bias = column_sums(&d_pre);
        if idx == 0 {
            break;
        }
        let mut next = DenseMatrix::zeros(d_pre.rows(), layer.weight.rows());
        gemm(1.0, &d_pre, false, &layer.weight, true, 0.0, &mut next);
        d_h = next;
    }
}

/// Exact parameter gradients given loss gradients at the outputs.
pub fn backward(params: &ModelParams, cache: &ForwardCache, output_grads: &OutputGrads) -> Gradients {
    let mut grads = params.zeros_like();
    let mut d_audio = output_grads.audio_logits.clone();
    let mut d_visual = output_grads.visual_logits.clone();
    attention_backward(
        &params.audio_attention,
        &cache.audio_attention,
        &output_grads.audio_proxy,
        &mut grads.audio_attention,
        &mut d_audio,
        &mut d_visual,
    );
    attention_backward(
        &params.visual_attention,
        &cache.visual_attention,
        &output_grads.visual_proxy,
        &mut grads.visual_attention,
        &mut d_visual,
        &mut d_audio,
    );
    branch_backward(&params.audio, &cache.audio, &d_audio, &mut grads.audio);
    branch_backward(&params.visual, &cache.visual, &d_visual, &mut grads.visual);
    grads
}

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;
pub const DEFAULT_BETA1: f64 = 0.9;
pub const DEFAULT_BETA2: f64 = 0.999;
pub const DEFAULT_ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first_moment: ModelParams,
    pub second_moment: ModelParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self {
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: DEFAULT_LEARNING_RATE,
            beta1: DEFAULT_BETA1,
            beta2: DEFAULT_BETA2,
            eps: DEFAULT_ADAM_EPS,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(params: &mut ModelParams, grads: &Gradients, state: &mut OptimizerState, cfg: &AdamConfig) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let OptimizerState {
        first_moment,
        second_moment,
        ..
    } = state;
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(grads.tensors())
        .zip(first_moment.tensors_mut())
        .zip(second_moment.tensors_mut())
    {
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::StandardNormal;

    fn tiny_shape() -> NetShape {
        NetShape {
            audio_dim: 4,
            visual_dim: 6,
            hidden: 5,
            classes: 3,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn zero_network_gives_half_soft_labels() {
        let params = ModelParams::init(&tiny_shape(), 1).zeros_like();
        let out = forward(&params, &DenseMatrix::zeros(2, 4), &DenseMatrix::zeros(2, 6), &DropoutMode::eval()).unwrap();
        assert!(out.audio_logits.as_slice().iter().all(|&v| v == 0.0));
        assert!(out.visual_soft.as_slice().iter().all(|&v| v == 0.5));
        assert!(out.audio_soft.as_slice().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn eval_mode_ignores_seed() {
        let params = ModelParams::init(&tiny_shape(), 2);
        let a = random(3, 4, 1);
        let v = random(3, 6, 2);
        let mk = |seed| DropoutMode { rate: 0.5, seed, train: false };
        let o1 = forward(&params, &a, &v, &mk(1)).unwrap();
        let o2 = forward(&params, &a, &v, &mk(2)).unwrap();
        assert_eq!(o1, o2);
    }

    #[test]
    fn train_mode_is_deterministic_per_seed() {
        let params = ModelParams::init(&tiny_shape(), 2);
        let a = random(3, 4, 1);
        let v = random(3, 6, 2);
        let mode = DropoutMode { rate: 0.15, seed: 9, train: true };
        assert_eq!(forward(&params, &a, &v, &mode).unwrap(), forward(&params, &a, &v, &mode).unwrap());
        let other = DropoutMode { seed: 10, ..mode };
        assert_ne!(forward(&params, &a, &v, &mode).unwrap(), forward(&params, &a, &v, &other).unwrap());
    }

    #[test]
    fn forward_rejects_wrong_widths() {
        let params = ModelParams::init(&tiny_shape(), 2);
        assert!(forward(&params, &random(2, 5, 1), &random(2, 6, 1), &DropoutMode::eval()).is_err());
        assert!(forward(&params, &random(2, 4, 1), &random(3, 6, 1), &DropoutMode::eval()).is_err());
    }

    #[test]
    fn soft_labels_strictly_inside_unit_interval() {
        let params = ModelParams::init(&tiny_shape(), 4);
        let out = forward(&params, &random(6, 4, 3), &random(6, 6, 4), &DropoutMode::eval()).unwrap();
        assert!(out.audio_soft.as_slice().iter().all(|&s| s > 0.0 && s < 1.0));
    }

    #[test]
    fn glorot_bounds() {
        let params = ModelParams::init(&tiny_shape(), 5);
        let limit = (6.0f64 / 9.0).sqrt();
        assert!(params.audio.hidden[0].weight.as_slice().iter().all(|w| w.abs() <= limit));
        assert!(params.audio.hidden[0].bias.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn single_row_attention_adds_value() {
        let att = AttentionParams::init(3, &mut ChaCha8Rng::seed_from_u64(1));
        let za = random(1, 3, 2);
        let zv = random(1, 3, 3);
        let (pa, _) = cross_attention_proxy(&za, &zv, &att, &att).unwrap();
        let v = zv.matmul(&att.value).unwrap();
        for k in 0..3 {
            assert!((pa.get(0, k) - (za.get(0, k) + v.get(0, k))).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_value_projection_is_identity() {
        let mut att = AttentionParams::init(3, &mut ChaCha8Rng::seed_from_u64(1));
        att.value = DenseMatrix::zeros(3, 3);
        let za = random(4, 3, 2);
        let zv = random(4, 3, 3);
        let (pa, pv) = cross_attention_proxy(&za, &zv, &att, &att).unwrap();
        assert_eq!(pa, za);
        assert_eq!(pv, zv);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let att = AttentionParams::init(3, &mut ChaCha8Rng::seed_from_u64(7));
        let (_, cache) = attention_forward(&random(6, 3, 1), &random(6, 3, 2), &att);
        for r in 0..6 {
            let s: f64 = cache.weights.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn attention_rejects_empty_batch() {
        let att = AttentionParams::zeros(3);
        let e = DenseMatrix::zeros(0, 3);
        assert!(cross_attention_proxy(&e, &e, &att, &att).is_err());
    }

    /// Finite-difference check with a linear readout of every output.
    #[test]
    fn backward_matches_finite_differences_for_linear_readout() {
        let shape = tiny_shape();
        let params = ModelParams::init(&shape, 11);
        let a = random(5, 4, 1);
        let v = random(5, 6, 2);
        let weights = OutputGrads {
            audio_logits: random(5, 3, 3),
            visual_logits: random(5, 3, 4),
            audio_proxy: random(5, 3, 5),
            visual_proxy: random(5, 3, 6),
        };
        let mode = DropoutMode { rate: 0.3, seed: 5, train: true };
        let readout = |p: &ModelParams| {
            let o = forward(p, &a, &v, &mode).unwrap();
            let dot = |x: &DenseMatrix, y: &DenseMatrix| -> f64 {
                x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).sum()
            };
            dot(&o.audio_logits, &weights.audio_logits)
                + dot(&o.visual_logits, &weights.visual_logits)
                + dot(&o.audio_proxy, &weights.audio_proxy)
                + dot(&o.visual_proxy, &weights.visual_proxy)
        };
        let (_, cache) = forward_cached(&params, &a, &v, &mode).unwrap();
        let grads = backward(&params, &cache, &weights);
        let h = 1e-5;
        let mut probe = params.clone();
        let n_tensors = params.tensors().len();
        for t in 0..n_tensors {
            for i in 0..params.tensors()[t].len() {
                let orig = probe.tensors()[t][i];
                probe.tensors_mut()[t][i] = orig + h;
                let up = readout(&probe);
                probe.tensors_mut()[t][i] = orig - h;
                let down = readout(&probe);
                probe.tensors_mut()[t][i] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.tensors()[t][i];
                assert!((fd - an).abs() / an.abs().max(1.0) < 1e-6, "tensor {t} index {i}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let shape = NetShape { audio_dim: 1, visual_dim: 1, hidden: 1, classes: 1 };
        let mut params = ModelParams::init(&shape, 1);
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|g| *g = 1.0));
        let mut state = OptimizerState::new(&params);
        let cfg = AdamConfig::default();
        adam_step(&mut params, &grads, &mut state, &cfg);
        // m_hat = v_hat = 1, so the step is lr / (1 + eps).
        let expected = cfg.lr / (1.0 + cfg.eps);
        for (p, b) in params.tensors().iter().zip(before.tensors()) {
            assert!((b[0] - p[0] - expected).abs() < 1e-15);
        }
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut params = ModelParams::init(&tiny_shape(), 1);
        let before = params.clone();
        let mut state = OptimizerState::new(&params);
        let mut g = params.zeros_like();
        g.tensors_mut()[0][0] = 2.0;
        adam_step(&mut params, &g, &mut state, &AdamConfig::default());
        let m_after = state.first_moment.tensors()[0][0];
        let frozen = params.clone();
        adam_step(&mut params, &before.zeros_like(), &mut state, &AdamConfig::default());
        // Parameters with zero gradient history stay put; moments decay.
        assert_eq!(params.tensors()[1], frozen.tensors()[1]);
        assert_eq!(state.first_moment.tensors()[0][0], 0.9 * m_after);
        assert_eq!(params.tensors()[2], before.tensors()[2]);
    }

    #[test]
    fn adam_is_deterministic() {
        let params = ModelParams::init(&tiny_shape(), 3);
        let mut grads = params.zeros_like();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        grads.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|g| *g = rng.sample(StandardNormal)));
        let run = || {
            let mut p = params.clone();
            let mut s = OptimizerState::new(&p);
            adam_step(&mut p, &grads, &mut s, &AdamConfig::default());
            (p, s)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn adam_stays_finite_on_bounded_gradients() {
        let shape = NetShape { audio_dim: 2, visual_dim: 2, hidden: 2, classes: 2 };
        let mut params = ModelParams::init(&shape, 1);
        let mut state = OptimizerState::new(&params);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = AdamConfig { lr: 1e-2, ..AdamConfig::default() };
        for _ in 0..10_000 {
            let mut g = params.zeros_like();
            g.tensors_mut().into_iter().for_each(|t| t.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0)));
            adam_step(&mut params, &g, &mut state, &cfg);
        }
        assert!(params.is_finite());
        assert!(state.second_moment.tensors().iter().all(|t| t.iter().all(|&v| v >= 0.0)));
    }
}
