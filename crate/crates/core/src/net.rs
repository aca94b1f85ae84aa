//! Small differentiable MLP with hand-derived gradients.
//!
//! The model factors into an encoder `f_phi` producing a feature vector, a
//! classification head `p_psi` producing softmax probabilities over those
//! features, and a linear projection used only by contrastive pre-training.
//! ReLU follows every encoder layer (features are non-negative, as with a
//! post-pooling convolutional backbone); the head applies ReLU between hidden
//! layers only; the projection is linear.
//!
//! Gradients are exact and verified against central finite differences by
//! [`finite_diff_check`], which every loss in the crate is tested through.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dot, Matrix};
use crate::rng::{seed_stream, TAG_INIT};

/// Probabilities are clamped to this floor before any logarithm.
pub const PROB_CLAMP: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("checkpoint error on {path}: {message}")]
    Checkpoint { path: String, message: String },
}

/// One linear layer: `y = W x + b` with `W` of shape (out, in).
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Layer {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    fn kaiming<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = (6.0 / in_dim as f64).sqrt();
        let mut layer = Layer::zeros(out_dim, in_dim);
        for v in layer.weight.data_mut() {
            *v = rng.gen_range(-bound..bound);
        }
        // non-zero biases keep dead-ReLU inputs from collapsing the
        // projection to an exact zero vector
        let bias_bound = 1.0 / (in_dim as f64).sqrt();
        for b in &mut layer.bias {
            *b = rng.gen_range(-bias_bound..bias_bound);
        }
        layer
    }
}

/// Network architecture description: `input -> hidden.. -> feature_dim`
/// encoder, `feature_dim -> class_count` head, `feature_dim -> embedding_dim`
/// projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub class_count: usize,
    pub embedding_dim: usize,
}

impl NetConfig {
    pub fn new(input_dim: usize, class_count: usize) -> Self {
        NetConfig {
            input_dim,
            hidden_dims: vec![64],
            feature_dim: 16,
            class_count,
            embedding_dim: 32,
        }
    }
}

/// Encoder, head and projection parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub encoder: Vec<Layer>,
    pub head: Vec<Layer>,
    pub projection: Vec<Layer>,
    pub feature_dim: usize,
    pub class_count: usize,
}

impl ModelParams {
    /// Kaiming-uniform fan-in initialisation, drawn from a ChaCha stream
    /// derived from `seed`. Per layer the weights are drawn first (row-major)
    /// and then the biases, in encoder/head/projection order.
    pub fn init(cfg: &NetConfig, seed: u64) -> Self {
        let mut rng = seed_stream(seed, TAG_INIT, 0);
        let mut encoder = Vec::new();
        let mut prev = cfg.input_dim;
        for &h in &cfg.hidden_dims {
            encoder.push(Layer::kaiming(h, prev, &mut rng));
            prev = h;
        }
        encoder.push(Layer::kaiming(cfg.feature_dim, prev, &mut rng));
        let head = vec![Layer::kaiming(cfg.class_count, cfg.feature_dim, &mut rng)];
        let projection = vec![Layer::kaiming(cfg.embedding_dim, cfg.feature_dim, &mut rng)];
        ModelParams {
            encoder,
            head,
            projection,
            feature_dim: cfg.feature_dim,
            class_count: cfg.class_count,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.first().map_or(0, Layer::in_dim)
    }

    pub fn embedding_dim(&self) -> usize {
        self.projection.last().map_or(0, Layer::out_dim)
    }

    /// Verifies that consecutive layer shapes compose and the head/projection
    /// output arities match the configured dimensions.
    pub fn validate(&self) -> Result<(), NetError> {
        let chain = |layers: &[Layer], name: &str| -> Result<(usize, usize), NetError> {
            let first = layers
                .first()
                .ok_or_else(|| NetError::Parameter(format!("{name} has no layers")))?;
            let mut prev = first.out_dim();
            for (k, layer) in layers.iter().enumerate().skip(1) {
                if layer.in_dim() != prev {
                    return Err(NetError::ShapeMismatch(format!(
                        "{name} layer {k} expects input {}, got {prev}",
                        layer.in_dim()
                    )));
                }
                prev = layer.out_dim();
            }
            Ok((first.in_dim(), prev))
        };
        let (_, enc_out) = chain(&self.encoder, "encoder")?;
        if enc_out != self.feature_dim {
            return Err(NetError::ShapeMismatch(format!(
                "encoder output {enc_out} != feature_dim {}",
                self.feature_dim
            )));
        }
        let (head_in, head_out) = chain(&self.head, "head")?;
        if head_in != self.feature_dim || head_out != self.class_count {
            return Err(NetError::ShapeMismatch(format!(
                "head maps {head_in} -> {head_out}, expected {} -> {}",
                self.feature_dim, self.class_count
            )));
        }
        let (proj_in, _) = chain(&self.projection, "projection")?;
        if proj_in != self.feature_dim {
            return Err(NetError::ShapeMismatch(format!(
                "projection expects input {proj_in} != feature_dim {}",
                self.feature_dim
            )));
        }
        Ok(())
    }

    /// Flattens every parameter (weights row-major, then bias, per layer; in
    /// encoder/head/projection order) into one vector.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layers in [&self.encoder, &self.head, &self.projection] {
            for layer in layers.iter() {
                out.extend_from_slice(layer.weight.data());
                out.extend_from_slice(&layer.bias);
            }
        }
        out
    }

    /// Rebuilds a parameter tree of this shape from flattened values.
    pub fn with_flat(&self, values: &[f64]) -> ModelParams {
        let mut params = self.clone();
        let mut cursor = 0;
        for layers in [
            &mut params.encoder,
            &mut params.head,
            &mut params.projection,
        ] {
            for layer in layers.iter_mut() {
                let w = layer.weight.data_mut();
                w.copy_from_slice(&values[cursor..cursor + w.len()]);
                cursor += w.len();
                let blen = layer.bias.len();
                layer.bias.copy_from_slice(&values[cursor..cursor + blen]);
                cursor += blen;
            }
        }
        assert_eq!(cursor, values.len(), "flat parameter length mismatch");
        params
    }

    pub fn param_count(&self) -> usize {
        let count = |layers: &[Layer]| -> usize {
            layers
                .iter()
                .map(|l| l.weight.data().len() + l.bias.len())
                .sum()
        };
        count(&self.encoder) + count(&self.head) + count(&self.projection)
    }
}

/// Gradients (or momentum) with the same shape tree as [`ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub encoder: Vec<Layer>,
    pub head: Vec<Layer>,
    pub projection: Vec<Layer>,
}

impl GradientBundle {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let zero = |layers: &[Layer]| {
            layers
                .iter()
                .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
                .collect()
        };
        GradientBundle {
            encoder: zero(&params.encoder),
            head: zero(&params.head),
            projection: zero(&params.projection),
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        self.add_scaled(other, 1.0);
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        let add = |a: &mut Vec<Layer>, b: &[Layer]| {
            for (la, lb) in a.iter_mut().zip(b) {
                la.weight.add_scaled(&lb.weight, scale);
                for (x, y) in la.bias.iter_mut().zip(&lb.bias) {
                    *x += scale * y;
                }
            }
        };
        add(&mut self.encoder, &other.encoder);
        add(&mut self.head, &other.head);
        add(&mut self.projection, &other.projection);
    }

    pub fn scale(&mut self, s: f64) {
        for layers in [&mut self.encoder, &mut self.head, &mut self.projection] {
            for layer in layers.iter_mut() {
                layer.weight.scale(s);
                for b in &mut layer.bias {
                    *b *= s;
                }
            }
        }
    }

    /// Flattened values in the same order as [`ModelParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layers in [&self.encoder, &self.head, &self.projection] {
            for layer in layers.iter() {
                out.extend_from_slice(layer.weight.data());
                out.extend_from_slice(&layer.bias);
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Per-layer pre-activations and activations of one MLP stack.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub input: Vec<f64>,
    pub pre: Vec<Vec<f64>>,
    pub post: Vec<Vec<f64>>,
}

impl MlpTrace {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("mlp has at least one layer")
    }
}

/// Full forward trace through encoder and head.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub encoder: MlpTrace,
    pub head: MlpTrace,
    /// Encoder output `f_phi(x)`.
    pub features: Vec<f64>,
    /// Head output before softmax.
    pub logits: Vec<f64>,
    /// Softmax probabilities; non-negative, summing to 1.
    pub probs: Vec<f64>,
}

/// Forward trace through encoder and projection, ending in an L2-normalised
/// embedding.
#[derive(Clone, Debug)]
pub struct EmbedTrace {
    pub encoder: MlpTrace,
    pub projection: MlpTrace,
    pub raw: Vec<f64>,
    pub norm: f64,
    pub embedding: Vec<f64>,
}

fn relu_after(kind: StackKind, layer: usize, total: usize) -> bool {
    match kind {
        StackKind::Encoder => true,
        StackKind::Head => layer + 1 < total,
        StackKind::Projection => false,
    }
}

#[derive(Clone, Copy)]
enum StackKind {
    Encoder,
    Head,
    Projection,
}

fn mlp_forward(layers: &[Layer], kind: StackKind, x: &[f64]) -> Result<MlpTrace, NetError> {
    let first = layers
        .first()
        .ok_or_else(|| NetError::Parameter("empty layer stack".into()))?;
    if x.len() != first.in_dim() {
        return Err(NetError::ShapeMismatch(format!(
            "input dimension {} != layer input {}",
            x.len(),
            first.in_dim()
        )));
    }
    let mut pre = Vec::with_capacity(layers.len());
    let mut post = Vec::with_capacity(layers.len());
    let mut current = x.to_vec();
    for (k, layer) in layers.iter().enumerate() {
        let mut z = layer.weight.matvec(&current);
        for (zv, b) in z.iter_mut().zip(&layer.bias) {
            *zv += b;
        }
        pre.push(z.clone());
        if relu_after(kind, k, layers.len()) {
            for v in &mut z {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        post.push(z.clone());
        current = z;
    }
    Ok(MlpTrace {
        input: x.to_vec(),
        pre,
        post,
    })
}

/// Backward through one MLP stack. Returns per-layer gradients and the
/// gradient with respect to the stack input.
fn mlp_backward(
    layers: &[Layer],
    kind: StackKind,
    trace: &MlpTrace,
    d_out: &[f64],
) -> (Vec<Layer>, Vec<f64>) {
    let mut grads: Vec<Layer> = layers
        .iter()
        .map(|l| Layer::zeros(l.out_dim(), l.in_dim()))
        .collect();
    let mut g = d_out.to_vec();
    for k in (0..layers.len()).rev() {
        if relu_after(kind, k, layers.len()) {
            for (gv, pre) in g.iter_mut().zip(&trace.pre[k]) {
                if *pre <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        let input = if k == 0 {
            &trace.input
        } else {
            &trace.post[k - 1]
        };
        for (b, gv) in grads[k].bias.iter_mut().zip(&g) {
            *b += gv;
        }
        grads[k].weight.add_outer(&g, input, 1.0);
        g = layers[k].weight.tr_matvec(&g);
    }
    (grads, g)
}

/// Numerically stabilised softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// `ln(max(p, PROB_CLAMP))` and the corresponding subgradient factor; the
/// derivative is zero while the clamp is active.
pub fn clamped_ln(p: f64) -> (f64, f64) {
    if p >= PROB_CLAMP {
        (p.ln(), 1.0 / p)
    } else {
        (PROB_CLAMP.ln(), 0.0)
    }
}

/// Runs encoder and head on `x`, producing features and softmax probabilities.
pub fn forward(params: &ModelParams, x: &[f64]) -> Result<ForwardTrace, NetError> {
    let encoder = mlp_forward(&params.encoder, StackKind::Encoder, x)?;
    let features = encoder.output().to_vec();
    let head = mlp_forward(&params.head, StackKind::Head, &features)?;
    let logits = head.output().to_vec();
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("logits".into()));
    }
    let probs = softmax(&logits);
    if probs.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("probs".into()));
    }
    Ok(ForwardTrace {
        encoder,
        head,
        features,
        logits,
        probs,
    })
}

/// Backward through head-softmax and encoder. `d_probs` is the upstream
/// gradient on the softmax output, `d_features` an optional extra gradient
/// applied directly to the encoder output.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    d_probs: Option<&[f64]>,
    d_features: Option<&[f64]>,
) -> GradientBundle {
    let mut bundle = GradientBundle::zeros_like(params);
    let mut d_feat = vec![0.0; params.feature_dim];
    if let Some(dp) = d_probs {
        // softmax jacobian: d_logit_k = p_k (g_k - sum_j g_j p_j)
        let inner = dot(dp, &trace.probs);
        let d_logits: Vec<f64> = trace
            .probs
            .iter()
            .zip(dp)
            .map(|(&p, &g)| p * (g - inner))
            .collect();
        let (head_grads, d_head_in) =
            mlp_backward(&params.head, StackKind::Head, &trace.head, &d_logits);
        bundle.head = head_grads;
        for (a, b) in d_feat.iter_mut().zip(&d_head_in) {
            *a += b;
        }
    }
    if let Some(df) = d_features {
        for (a, b) in d_feat.iter_mut().zip(df) {
            *a += b;
        }
    }
    let (encoder_grads, _) =
        mlp_backward(&params.encoder, StackKind::Encoder, &trace.encoder, &d_feat);
    bundle.encoder = encoder_grads;
    bundle
}

/// Runs encoder and projection on `x` and L2-normalises the result.
pub fn forward_embed(params: &ModelParams, x: &[f64]) -> Result<EmbedTrace, NetError> {
    let encoder = mlp_forward(&params.encoder, StackKind::Encoder, x)?;
    let features = encoder.output().to_vec();
    let projection = mlp_forward(&params.projection, StackKind::Projection, &features)?;
    let raw = projection.output().to_vec();
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(NetError::NonFinite("projection output".into()));
    }
    let norm = crate::linalg::l2_norm(&raw);
    if norm < 1e-12 {
        return Err(NetError::NonFinite("projection output collapsed to zero".into()));
    }
    let embedding = raw.iter().map(|v| v / norm).collect();
    Ok(EmbedTrace {
        encoder,
        projection,
        raw,
        norm,
        embedding,
    })
}

/// Backward from a gradient on the normalised embedding through projection
/// and encoder. The head receives no gradient.
pub fn backward_embed(
    params: &ModelParams,
    trace: &EmbedTrace,
    d_embedding: &[f64],
) -> GradientBundle {
    let mut bundle = GradientBundle::zeros_like(params);
    // d_raw = (d_e - (d_e . e) e) / ||raw||
    let inner = dot(d_embedding, &trace.embedding);
    let d_raw: Vec<f64> = d_embedding
        .iter()
        .zip(&trace.embedding)
        .map(|(&g, &e)| (g - inner * e) / trace.norm)
        .collect();
    let (proj_grads, d_feat) = mlp_backward(
        &params.projection,
        StackKind::Projection,
        &trace.projection,
        &d_raw,
    );
    bundle.projection = proj_grads;
    let (encoder_grads, _) =
        mlp_backward(&params.encoder, StackKind::Encoder, &trace.encoder, &d_feat);
    bundle.encoder = encoder_grads;
    bundle
}

/// Momentum buffers for [`sgd_step`].
#[derive(Clone, Debug)]
pub struct SgdState {
    pub velocity: GradientBundle,
}

impl SgdState {
    pub fn zeros_like(params: &ModelParams) -> Self {
        SgdState {
            velocity: GradientBundle::zeros_like(params),
        }
    }
}

/// Momentum SGD with decoupled weight decay:
/// `v <- momentum * v + g`, `w <- w - lr * v - lr * weight_decay * w`.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &GradientBundle,
    state: &mut SgdState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    state.velocity.scale(momentum);
    state.velocity.add_assign(grads);
    let step = |layers: &mut Vec<Layer>, vel: &[Layer]| {
        for (layer, v) in layers.iter_mut().zip(vel) {
            let decay = lr * weight_decay;
            let w = layer.weight.data_mut();
            for (wv, vv) in w.iter_mut().zip(v.weight.data()) {
                *wv -= lr * vv + decay * *wv;
            }
            for (bv, vv) in layer.bias.iter_mut().zip(&v.bias) {
                *bv -= lr * vv + decay * *bv;
            }
        }
    };
    step(&mut params.encoder, &state.velocity.encoder);
    step(&mut params.head, &state.velocity.head);
    step(&mut params.projection, &state.velocity.projection);
}

/// Result of a finite-difference gradient check.
#[derive(Clone, Debug)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares the analytic gradient of `loss_fn` against central finite
/// differences (h = 1e-5) at `params`. The error per parameter is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1)`.
pub fn finite_diff_check<F>(params: &ModelParams, loss_fn: F, tolerance: f64) -> FiniteDiffReport
where
    F: Fn(&ModelParams) -> (f64, GradientBundle),
{
    let h = 1e-5;
    let (_, analytic) = loss_fn(params);
    let analytic = analytic.to_flat();
    let base = params.to_flat();
    let mut max_rel_error: f64 = 0.0;
    let mut worst_param = 0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += h;
        let (loss_plus, _) = loss_fn(&params.with_flat(&plus));
        let mut minus = base.clone();
        minus[i] -= h;
        let (loss_minus, _) = loss_fn(&params.with_flat(&minus));
        let numeric = (loss_plus - loss_minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        let err = (analytic[i] - numeric).abs() / denom;
        if err > max_rel_error {
            max_rel_error = err;
            worst_param = i;
        }
    }
    FiniteDiffReport {
        max_rel_error,
        worst_param,
        checked: base.len(),
        tolerance,
        passed: max_rel_error <= tolerance,
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SMCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: u32,
    feature_dim: usize,
    class_count: usize,
    encoder: Vec<[usize; 2]>,
    head: Vec<[usize; 2]>,
    projection: Vec<[usize; 2]>,
    blocks: Vec<String>,
    epoch: Option<usize>,
}

fn shapes(layers: &[Layer]) -> Vec<[usize; 2]> {
    layers.iter().map(|l| [l.out_dim(), l.in_dim()]).collect()
}

fn ckpt_err(path: &Path, message: impl Into<String>) -> NetError {
    NetError::Checkpoint {
        path: path.display().to_string(),
        message: message.into(),
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".json");
    path.with_file_name(name)
}

fn write_blocks(
    path: &Path,
    template: &ModelParams,
    blocks: &[(&str, Vec<f64>)],
    epoch: Option<usize>,
) -> Result<(), NetError> {
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        feature_dim: template.feature_dim,
        class_count: template.class_count,
        encoder: shapes(&template.encoder),
        head: shapes(&template.head),
        projection: shapes(&template.projection),
        blocks: blocks.iter().map(|(n, _)| n.to_string()).collect(),
        epoch,
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (_, values) in blocks {
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-temp-then-rename keeps checkpoints atomic
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| ckpt_err(path, e.to_string()))?;
    fs::rename(&tmp, path).map_err(|e| ckpt_err(path, e.to_string()))?;
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| ckpt_err(path, e.to_string()))?;
    fs::write(manifest_path(path), json).map_err(|e| ckpt_err(path, e.to_string()))?;
    Ok(())
}

fn read_blocks(path: &Path) -> Result<(ModelParams, Vec<Vec<f64>>, CheckpointManifest), NetError> {
    let manifest_text = fs::read_to_string(manifest_path(path))
        .map_err(|e| ckpt_err(path, format!("missing shape manifest: {e}")))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&manifest_text).map_err(|e| ckpt_err(path, e.to_string()))?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported version {}", manifest.version),
        ));
    }
    let bytes = fs::read(path).map_err(|e| ckpt_err(path, e.to_string()))?;
    if bytes.len() < 12 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(ckpt_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(ckpt_err(path, format!("unsupported version {version}")));
    }
    let block_count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if block_count != manifest.blocks.len() {
        return Err(ckpt_err(path, "block count disagrees with manifest"));
    }
    let build = |shape_list: &[[usize; 2]]| -> Vec<Layer> {
        shape_list.iter().map(|s| Layer::zeros(s[0], s[1])).collect()
    };
    let template = ModelParams {
        encoder: build(&manifest.encoder),
        head: build(&manifest.head),
        projection: build(&manifest.projection),
        feature_dim: manifest.feature_dim,
        class_count: manifest.class_count,
    };
    template.validate()?;
    let block_len = template.param_count();
    let expected = 12 + block_count * block_len * 8;
    if bytes.len() != expected {
        return Err(ckpt_err(
            path,
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut blocks = Vec::with_capacity(block_count);
    let mut cursor = 12;
    for _ in 0..block_count {
        let mut values = Vec::with_capacity(block_len);
        for _ in 0..block_len {
            values.push(f64::from_le_bytes(
                bytes[cursor..cursor + 8].try_into().unwrap(),
            ));
            cursor += 8;
        }
        blocks.push(values);
    }
    Ok((template, blocks, manifest))
}

/// Writes model parameters as a versioned flat binary of little-endian f64
/// values with a JSON shape manifest saved alongside (`<file>.json`).
pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<(), NetError> {
    write_blocks(path.as_ref(), params, &[("params", params.to_flat())], None)
}

/// Loads model parameters written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams, NetError> {
    let path = path.as_ref();
    let (template, blocks, manifest) = read_blocks(path)?;
    if manifest.blocks != ["params"] {
        return Err(ckpt_err(path, "not a plain model checkpoint"));
    }
    Ok(template.with_flat(&blocks[0]))
}

/// Full training checkpoint: parameters plus the two momentum buffers and the
/// last completed epoch.
pub fn save_train_checkpoint(
    params: &ModelParams,
    velocity_mle: &GradientBundle,
    velocity_cluster: &GradientBundle,
    epoch: usize,
    path: impl AsRef<Path>,
) -> Result<(), NetError> {
    write_blocks(
        path.as_ref(),
        params,
        &[
            ("params", params.to_flat()),
            ("momentum_mle", velocity_mle.to_flat()),
            ("momentum_cluster", velocity_cluster.to_flat()),
        ],
        Some(epoch),
    )
}

/// Loads a checkpoint written by [`save_train_checkpoint`]; returns the
/// parameters, both momentum buffers and the stored epoch.
pub fn load_train_checkpoint(
    path: impl AsRef<Path>,
) -> Result<(ModelParams, GradientBundle, GradientBundle, usize), NetError> {
    let path = path.as_ref();
    let (template, blocks, manifest) = read_blocks(path)?;
    if manifest.blocks != ["params", "momentum_mle", "momentum_cluster"] {
        return Err(ckpt_err(path, "not a training checkpoint"));
    }
    let params = template.with_flat(&blocks[0]);
    let mut vel_mle = GradientBundle::zeros_like(&params);
    let flat = vel_mle.to_flat();
    assert_eq!(flat.len(), blocks[1].len());
    vel_mle = bundle_with_flat(&params, &blocks[1]);
    let vel_clu = bundle_with_flat(&params, &blocks[2]);
    let epoch = manifest
        .epoch
        .ok_or_else(|| ckpt_err(path, "training checkpoint missing epoch"))?;
    Ok((params, vel_mle, vel_clu, epoch))
}

fn bundle_with_flat(params: &ModelParams, values: &[f64]) -> GradientBundle {
    let as_params = params.with_flat(values);
    GradientBundle {
        encoder: as_params.encoder,
        head: as_params.head,
        projection: as_params.projection,
    }
}
