//! The query-based mask decoder: token features initialize one query per
//! token position, an N-layer Cross-Self-FFN stack refines them against
//! the superpoint visual features, and each layer's queries yield mask
//! logits by inner product with the superpoint features plus a predicted
//! quality score from a small MLP head.
//!
//! Every sub-block is pre-normalized with a residual connection. Masks
//! binarize at logit > 0; the sentence-level mask is the [CLS] row.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::annotation::AnnotatedDescription;
use crate::autodiff::{Tape, Var};
use crate::mask::PhraseMaskSet;
use crate::superpoint::{broadcast_mask, FeatureMatrix, SuperpointLogits, SuperpointPartition};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("non-finite activation in {context}")]
    NonFiniteActivation { context: String },
    #[error("head index {head} out of range for {tokens} tokens")]
    IndexOutOfRange { head: usize, tokens: usize },
    #[error("checkpoint i/o at {path}: {message}")]
    CheckpointIo { path: String, message: String },
    #[error("bad checkpoint: {message}")]
    CheckpointFormat { message: String },
}

fn shape_mismatch(context: impl Into<String>) -> ModelError {
    ModelError::ShapeMismatch {
        context: context.into(),
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Decoder width `d`.
    pub model_dim: usize,
    /// Token feature width `e`.
    pub token_dim: usize,
    /// Pooled superpoint feature width `c`.
    pub pooled_dim: usize,
    /// Number of decoder layers.
    pub num_layers: usize,
    /// Attention heads; must divide `model_dim`.
    pub num_heads: usize,
    /// FFN hidden width.
    pub ffn_hidden: usize,
    /// Mask logits binarize strictly above this value.
    pub binarize_threshold: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            model_dim: 32,
            token_dim: 32,
            pooled_dim: 16,
            num_layers: 6,
            num_heads: 4,
            ffn_hidden: 128,
            binarize_threshold: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_layers == 0 {
            return Err(shape_mismatch("num_layers must be at least 1"));
        }
        if self.num_heads == 0 || self.model_dim % self.num_heads != 0 {
            return Err(shape_mismatch(format!(
                "model_dim {} must be divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if self.model_dim == 0 || self.token_dim == 0 || self.pooled_dim == 0 || self.ffn_hidden == 0
        {
            return Err(shape_mismatch("all widths must be positive"));
        }
        Ok(())
    }
}

/// A dense layer's parameters; bias is a `1 x out` row.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParams {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

/// Query/key/value/output projections of one attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
}

/// Learned gain and bias of one normalization, both `1 x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Array2<f64>,
    pub bias: Array2<f64>,
}

/// Parameters of one Cross-Self-FFN decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub cross_norm: NormParams,
    pub cross_attn: AttentionParams,
    pub self_norm: NormParams,
    pub self_attn: AttentionParams,
    pub ffn_norm: NormParams,
    pub ffn_in: LinearParams,
    pub ffn_out: LinearParams,
}

/// All learnable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// `W1`: pooled -> visual features, `c x d`.
    pub visual_proj: Array2<f64>,
    /// `W2`: pooled -> superpoint features, `c x d`.
    pub superpoint_proj: Array2<f64>,
    /// `W3`: token features -> initial queries, `e x d`.
    pub token_proj: Array2<f64>,
    pub layers: Vec<LayerParams>,
    /// Quality head, `d -> d -> 1` with sigmoid output.
    pub score_hidden: LinearParams,
    pub score_out: LinearParams,
}

const NORM_EPS: f64 = 1e-5;

fn uniform_fan_in(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

fn init_linear(rng: &mut ChaCha8Rng, input: usize, output: usize) -> LinearParams {
    LinearParams {
        weight: uniform_fan_in(rng, input, output),
        bias: Array2::zeros((1, output)),
    }
}

fn init_norm(dim: usize) -> NormParams {
    NormParams {
        gain: Array2::ones((1, dim)),
        bias: Array2::zeros((1, dim)),
    }
}

impl ModelState {
    /// Seeded initialization: weights uniform in `+-1/sqrt(fan_in)`, biases
    /// zero, norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.model_dim;
        let layers = (0..config.num_layers)
            .map(|_| LayerParams {
                cross_norm: init_norm(d),
                cross_attn: AttentionParams {
                    query: init_linear(&mut rng, d, d),
                    key: init_linear(&mut rng, d, d),
                    value: init_linear(&mut rng, d, d),
                    output: init_linear(&mut rng, d, d),
                },
                self_norm: init_norm(d),
                self_attn: AttentionParams {
                    query: init_linear(&mut rng, d, d),
                    key: init_linear(&mut rng, d, d),
                    value: init_linear(&mut rng, d, d),
                    output: init_linear(&mut rng, d, d),
                },
                ffn_norm: init_norm(d),
                ffn_in: init_linear(&mut rng, d, config.ffn_hidden),
                ffn_out: init_linear(&mut rng, config.ffn_hidden, d),
            })
            .collect();
        Ok(Self {
            visual_proj: uniform_fan_in(&mut rng, config.pooled_dim, d),
            superpoint_proj: uniform_fan_in(&mut rng, config.pooled_dim, d),
            token_proj: uniform_fan_in(&mut rng, config.token_dim, d),
            layers,
            score_hidden: init_linear(&mut rng, d, d),
            score_out: init_linear(&mut rng, d, 1),
        })
    }

    /// Every parameter tensor with a stable name, in a fixed order shared
    /// by the optimizer, gradients, and checkpoints.
    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out: Vec<(String, &Array2<f64>)> = vec![
            ("visual_proj".into(), &self.visual_proj),
            ("superpoint_proj".into(), &self.superpoint_proj),
            ("token_proj".into(), &self.token_proj),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            let linears = [
                ("cross_attn.query", &layer.cross_attn.query),
                ("cross_attn.key", &layer.cross_attn.key),
                ("cross_attn.value", &layer.cross_attn.value),
                ("cross_attn.output", &layer.cross_attn.output),
                ("self_attn.query", &layer.self_attn.query),
                ("self_attn.key", &layer.self_attn.key),
                ("self_attn.value", &layer.self_attn.value),
                ("self_attn.output", &layer.self_attn.output),
                ("ffn_in", &layer.ffn_in),
                ("ffn_out", &layer.ffn_out),
            ];
            for (name, linear) in linears {
                out.push((format!("layers.{i}.{name}.weight"), &linear.weight));
                out.push((format!("layers.{i}.{name}.bias"), &linear.bias));
            }
            let norms = [
                ("cross_norm", &layer.cross_norm),
                ("self_norm", &layer.self_norm),
                ("ffn_norm", &layer.ffn_norm),
            ];
            for (name, norm) in norms {
                out.push((format!("layers.{i}.{name}.gain"), &norm.gain));
                out.push((format!("layers.{i}.{name}.bias"), &norm.bias));
            }
        }
        out.push(("score_hidden.weight".into(), &self.score_hidden.weight));
        out.push(("score_hidden.bias".into(), &self.score_hidden.bias));
        out.push(("score_out.weight".into(), &self.score_out.weight));
        out.push(("score_out.bias".into(), &self.score_out.bias));
        out
    }

    /// Mutable variant of [`named_params`]; identical names and order.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out: Vec<(String, &mut Array2<f64>)> = vec![
            ("visual_proj".into(), &mut self.visual_proj),
            ("superpoint_proj".into(), &mut self.superpoint_proj),
            ("token_proj".into(), &mut self.token_proj),
        ];
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let linears = [
                ("cross_attn.query", &mut layer.cross_attn.query),
                ("cross_attn.key", &mut layer.cross_attn.key),
                ("cross_attn.value", &mut layer.cross_attn.value),
                ("cross_attn.output", &mut layer.cross_attn.output),
                ("self_attn.query", &mut layer.self_attn.query),
                ("self_attn.key", &mut layer.self_attn.key),
                ("self_attn.value", &mut layer.self_attn.value),
                ("self_attn.output", &mut layer.self_attn.output),
                ("ffn_in", &mut layer.ffn_in),
                ("ffn_out", &mut layer.ffn_out),
            ];
            for (name, linear) in linears {
                out.push((format!("layers.{i}.{name}.weight"), &mut linear.weight));
                out.push((format!("layers.{i}.{name}.bias"), &mut linear.bias));
            }
            let norms = [
                ("cross_norm", &mut layer.cross_norm),
                ("self_norm", &mut layer.self_norm),
                ("ffn_norm", &mut layer.ffn_norm),
            ];
            for (name, norm) in norms {
                out.push((format!("layers.{i}.{name}.gain"), &mut norm.gain));
                out.push((format!("layers.{i}.{name}.bias"), &mut norm.bias));
            }
        }
        out.push(("score_hidden.weight".into(), &mut self.score_hidden.weight));
        out.push(("score_hidden.bias".into(), &mut self.score_hidden.bias));
        out.push(("score_out.weight".into(), &mut self.score_out.weight));
        out.push(("score_out.bias".into(), &mut self.score_out.bias));
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.len()).sum()
    }
}

/// Attention probabilities of one layer, per head; rows are queries.
#[derive(Debug, Clone)]
pub struct LayerAttention {
    pub cross: Vec<Array2<f64>>,
    pub self_attn: Vec<Array2<f64>>,
}

/// Everything the forward pass produces, for every layer: query snapshots
/// (layer 0 is the initial queries), mask logits, predicted scores, and the
/// attention probabilities.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `num_layers + 1` snapshots of shape `(L+2) x d`.
    pub queries: Vec<Array2<f64>>,
    /// `num_layers + 1` logit matrices of shape `(L+2) x N_s`.
    pub logits: Vec<Array2<f64>>,
    /// `num_layers + 1` score columns of shape `(L+2) x 1`, in `[0, 1]`.
    pub scores: Vec<Array2<f64>>,
    /// One entry per decoder layer.
    pub attention: Vec<LayerAttention>,
}

/// Tape handles for every parameter, in `named_params` order.
pub(crate) struct StateVars {
    pub ordered: Vec<(String, Var)>,
    pub visual_proj: Var,
    pub superpoint_proj: Var,
    pub token_proj: Var,
    pub layers: Vec<LayerVars>,
    pub score_hidden: (Var, Var),
    pub score_out: (Var, Var),
}

pub(crate) struct AttnVars {
    query: (Var, Var),
    key: (Var, Var),
    value: (Var, Var),
    output: (Var, Var),
}

pub(crate) struct LayerVars {
    cross_norm: (Var, Var),
    cross_attn: AttnVars,
    self_norm: (Var, Var),
    self_attn: AttnVars,
    ffn_norm: (Var, Var),
    ffn_in: (Var, Var),
    ffn_out: (Var, Var),
}

/// Register every parameter as a tape input. The `ordered` list matches
/// `ModelState::named_params` exactly.
pub(crate) fn register_state(tape: &mut Tape, state: &ModelState) -> StateVars {
    let mut ordered = Vec::new();
    let mut reg = |tape: &mut Tape, name: String, value: &Array2<f64>| -> Var {
        let var = tape.input(value.clone());
        ordered.push((name, var));
        var
    };
    let visual_proj = reg(tape, "visual_proj".into(), &state.visual_proj);
    let superpoint_proj = reg(tape, "superpoint_proj".into(), &state.superpoint_proj);
    let token_proj = reg(tape, "token_proj".into(), &state.token_proj);
    let mut layers = Vec::new();
    for (i, layer) in state.layers.iter().enumerate() {
        let mut linear = |tape: &mut Tape, name: &str, params: &LinearParams| {
            (
                reg(tape, format!("layers.{i}.{name}.weight"), &params.weight),
                reg(tape, format!("layers.{i}.{name}.bias"), &params.bias),
            )
        };
        let cross_attn = AttnVars {
            query: linear(tape, "cross_attn.query", &layer.cross_attn.query),
            key: linear(tape, "cross_attn.key", &layer.cross_attn.key),
            value: linear(tape, "cross_attn.value", &layer.cross_attn.value),
            output: linear(tape, "cross_attn.output", &layer.cross_attn.output),
        };
        let self_attn = AttnVars {
            query: linear(tape, "self_attn.query", &layer.self_attn.query),
            key: linear(tape, "self_attn.key", &layer.self_attn.key),
            value: linear(tape, "self_attn.value", &layer.self_attn.value),
            output: linear(tape, "self_attn.output", &layer.self_attn.output),
        };
        let ffn_in = linear(tape, "ffn_in", &layer.ffn_in);
        let ffn_out = linear(tape, "ffn_out", &layer.ffn_out);
        let mut norm = |tape: &mut Tape, name: &str, params: &NormParams| {
            (
                reg(tape, format!("layers.{i}.{name}.gain"), &params.gain),
                reg(tape, format!("layers.{i}.{name}.bias"), &params.bias),
            )
        };
        layers.push(LayerVars {
            cross_norm: norm(tape, "cross_norm", &layer.cross_norm),
            cross_attn,
            self_norm: norm(tape, "self_norm", &layer.self_norm),
            self_attn,
            ffn_norm: norm(tape, "ffn_norm", &layer.ffn_norm),
            ffn_in,
            ffn_out,
        });
    }
    let score_hidden = (
        reg(tape, "score_hidden.weight".into(), &state.score_hidden.weight),
        reg(tape, "score_hidden.bias".into(), &state.score_hidden.bias),
    );
    let score_out = (
        reg(tape, "score_out.weight".into(), &state.score_out.weight),
        reg(tape, "score_out.bias".into(), &state.score_out.bias),
    );
    StateVars {
        ordered,
        visual_proj,
        superpoint_proj,
        token_proj,
        layers,
        score_hidden,
        score_out,
    }
}

fn linear(tape: &mut Tape, x: Var, params: (Var, Var)) -> Var {
    let product = tape.matmul(x, params.0);
    tape.add_row(product, params.1)
}

/// Multi-head scaled dot-product attention; returns the output and the
/// per-head attention probabilities (plain values, for inspection).
fn attention(
    tape: &mut Tape,
    queries_in: Var,
    keys_in: Var,
    params: &AttnVars,
    num_heads: usize,
) -> (Var, Vec<Array2<f64>>) {
    let q = linear(tape, queries_in, params.query);
    let k = linear(tape, keys_in, params.key);
    let v = linear(tape, keys_in, params.value);
    let dim = tape.value(q).ncols();
    let head_dim = dim / num_heads;
    let scaling = 1.0 / (head_dim as f64).sqrt();

    let mut contexts = Vec::with_capacity(num_heads);
    let mut probabilities = Vec::with_capacity(num_heads);
    for h in 0..num_heads {
        let (from, to) = (h * head_dim, (h + 1) * head_dim);
        let qh = tape.slice_cols(q, from, to);
        let kh = tape.slice_cols(k, from, to);
        let vh = tape.slice_cols(v, from, to);
        let kh_t = tape.transpose(kh);
        let raw = tape.matmul(qh, kh_t);
        let scaled = tape.scale(raw, scaling);
        let probs = tape.softmax_rows(scaled);
        probabilities.push(tape.value(probs).clone());
        contexts.push(tape.matmul(probs, vh));
    }
    let merged = tape.concat_cols(&contexts);
    (linear(tape, merged, params.output), probabilities)
}

/// One pre-norm residual Cross-Self-FFN block on the tape.
fn decoder_layer_graph(
    tape: &mut Tape,
    q_prev: Var,
    f_v: Var,
    layer: &LayerVars,
    num_heads: usize,
) -> (Var, LayerAttention) {
    let normed = tape.layer_norm(q_prev, layer.cross_norm.0, layer.cross_norm.1, NORM_EPS);
    let (cross_out, cross_probs) = attention(tape, normed, f_v, &layer.cross_attn, num_heads);
    let q = tape.add(q_prev, cross_out);

    let normed = tape.layer_norm(q, layer.self_norm.0, layer.self_norm.1, NORM_EPS);
    let (self_out, self_probs) = attention(tape, normed, normed, &layer.self_attn, num_heads);
    let q = tape.add(q, self_out);

    let normed = tape.layer_norm(q, layer.ffn_norm.0, layer.ffn_norm.1, NORM_EPS);
    let hidden = linear(tape, normed, layer.ffn_in);
    let activated = tape.gelu(hidden);
    let ffn_out = linear(tape, activated, layer.ffn_out);
    let q = tape.add(q, ffn_out);

    (
        q,
        LayerAttention {
            cross: cross_probs,
            self_attn: self_probs,
        },
    )
}

pub(crate) struct TraceVars {
    pub queries: Vec<Var>,
    pub logits: Vec<Var>,
    pub scores: Vec<Var>,
    pub attention: Vec<LayerAttention>,
}

/// The full decoder graph from token features and projected superpoint
/// features: query snapshots, per-layer mask logits, and score columns.
pub(crate) fn build_decoder_graph(
    tape: &mut Tape,
    config: &ModelConfig,
    state: &StateVars,
    token_features: Var,
    f_v: Var,
    f_sp: Var,
) -> TraceVars {
    let f_sp_t = tape.transpose(f_sp);
    let mut queries = vec![tape.matmul(token_features, state.token_proj)];
    let mut attention_trace = Vec::new();
    for layer in &state.layers {
        let (next, probs) =
            decoder_layer_graph(tape, *queries.last().unwrap(), f_v, layer, config.num_heads);
        queries.push(next);
        attention_trace.push(probs);
    }
    let mut logits = Vec::with_capacity(queries.len());
    let mut scores = Vec::with_capacity(queries.len());
    for &q in &queries {
        logits.push(tape.matmul(q, f_sp_t));
        let hidden = linear(tape, q, state.score_hidden);
        let activated = tape.gelu(hidden);
        let raw = linear(tape, activated, state.score_out);
        scores.push(tape.sigmoid(raw));
    }
    TraceVars {
        queries,
        logits,
        scores,
        attention: attention_trace,
    }
}

/// Initial queries from token features: `Q_0 = E * W3`.
///
/// `token_features` must be `(L+2) x e` with the two special rows in place
/// (row 0 is [CLS], the last row the end marker).
pub fn init_queries(
    token_features: &FeatureMatrix,
    token_proj: &Array2<f64>,
) -> Result<FeatureMatrix, ModelError> {
    if token_features.ncols() != token_proj.nrows() {
        return Err(shape_mismatch(format!(
            "token features width {} does not match projection input {}",
            token_features.ncols(),
            token_proj.nrows()
        )));
    }
    Ok(token_features.dot(token_proj))
}

/// Run one decoder layer outside a training graph.
pub fn decoder_layer(
    q_prev: &FeatureMatrix,
    f_v: &FeatureMatrix,
    layer: &LayerParams,
    config: &ModelConfig,
) -> Result<(FeatureMatrix, LayerAttention), ModelError> {
    config.validate()?;
    let d = config.model_dim;
    if q_prev.ncols() != d || f_v.ncols() != d {
        return Err(shape_mismatch(format!(
            "queries are {} wide and visual features {} wide; both must be {d}",
            q_prev.ncols(),
            f_v.ncols()
        )));
    }
    let mut tape = Tape::new();
    let mut ordered = Vec::new();
    let mut reg = |tape: &mut Tape, value: &Array2<f64>| -> Var {
        let var = tape.input(value.clone());
        ordered.push((String::new(), var));
        var
    };
    let vars = LayerVars {
        cross_norm: (reg(&mut tape, &layer.cross_norm.gain), reg(&mut tape, &layer.cross_norm.bias)),
        cross_attn: AttnVars {
            query: (reg(&mut tape, &layer.cross_attn.query.weight), reg(&mut tape, &layer.cross_attn.query.bias)),
            key: (reg(&mut tape, &layer.cross_attn.key.weight), reg(&mut tape, &layer.cross_attn.key.bias)),
            value: (reg(&mut tape, &layer.cross_attn.value.weight), reg(&mut tape, &layer.cross_attn.value.bias)),
            output: (reg(&mut tape, &layer.cross_attn.output.weight), reg(&mut tape, &layer.cross_attn.output.bias)),
        },
        self_norm: (reg(&mut tape, &layer.self_norm.gain), reg(&mut tape, &layer.self_norm.bias)),
        self_attn: AttnVars {
            query: (reg(&mut tape, &layer.self_attn.query.weight), reg(&mut tape, &layer.self_attn.query.bias)),
            key: (reg(&mut tape, &layer.self_attn.key.weight), reg(&mut tape, &layer.self_attn.key.bias)),
            value: (reg(&mut tape, &layer.self_attn.value.weight), reg(&mut tape, &layer.self_attn.value.bias)),
            output: (reg(&mut tape, &layer.self_attn.output.weight), reg(&mut tape, &layer.self_attn.output.bias)),
        },
        ffn_norm: (reg(&mut tape, &layer.ffn_norm.gain), reg(&mut tape, &layer.ffn_norm.bias)),
        ffn_in: (reg(&mut tape, &layer.ffn_in.weight), reg(&mut tape, &layer.ffn_in.bias)),
        ffn_out: (reg(&mut tape, &layer.ffn_out.weight), reg(&mut tape, &layer.ffn_out.bias)),
    };
    let q_var = tape.input(q_prev.clone());
    let f_v_var = tape.input(f_v.clone());
    let (q_next, probs) = decoder_layer_graph(&mut tape, q_var, f_v_var, &vars, config.num_heads);
    let out = tape.value(q_next).clone();
    if !out.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteActivation {
            context: "decoder layer output".into(),
        });
    }
    Ok((out, probs))
}

/// Full forward pass from projected features.
///
/// `f_v` and `f_sp` are the `N_s x d` visual and superpoint features
/// (already projected from pooled features), `token_features` is
/// `(L+2) x e`. Deterministic: identical inputs and state give a
/// bit-identical trace.
pub fn forward(
    f_v: &FeatureMatrix,
    f_sp: &FeatureMatrix,
    token_features: &FeatureMatrix,
    config: &ModelConfig,
    state: &ModelState,
) -> Result<ForwardTrace, ModelError> {
    config.validate()?;
    let d = config.model_dim;
    if f_v.dim() != f_sp.dim() {
        return Err(shape_mismatch(format!(
            "visual features {:?} and superpoint features {:?} differ",
            f_v.dim(),
            f_sp.dim()
        )));
    }
    if f_v.ncols() != d {
        return Err(shape_mismatch(format!(
            "feature width {} does not match model width {d}",
            f_v.ncols()
        )));
    }
    if token_features.ncols() != config.token_dim {
        return Err(shape_mismatch(format!(
            "token feature width {} does not match configured width {}",
            token_features.ncols(),
            config.token_dim
        )));
    }
    if state.layers.len() != config.num_layers {
        return Err(shape_mismatch(format!(
            "state has {} layers, config expects {}",
            state.layers.len(),
            config.num_layers
        )));
    }

    let mut tape = Tape::new();
    let state_vars = register_state(&mut tape, state);
    let token_var = tape.input(token_features.clone());
    let f_v_var = tape.input(f_v.clone());
    let f_sp_var = tape.input(f_sp.clone());
    let trace_vars = build_decoder_graph(&mut tape, config, &state_vars, token_var, f_v_var, f_sp_var);

    let collect = |vars: &[Var], what: &str| -> Result<Vec<Array2<f64>>, ModelError> {
        vars.iter()
            .map(|&v| {
                let value = tape.value(v).clone();
                if value.iter().all(|x| x.is_finite()) {
                    Ok(value)
                } else {
                    Err(ModelError::NonFiniteActivation {
                        context: what.to_string(),
                    })
                }
            })
            .collect()
    };
    Ok(ForwardTrace {
        queries: collect(&trace_vars.queries, "queries")?,
        logits: collect(&trace_vars.logits, "mask logits")?,
        scores: collect(&trace_vars.scores, "scores")?,
        attention: trace_vars.attention,
    })
}

/// Select, binarize, and broadcast the final-layer masks for a description.
///
/// Each phrase reads the logit row of its head token (offset by one for the
/// leading [CLS] row); sentence-level sentinels read row 0. The sentence
/// mask is always attached.
pub fn predict_masks(
    trace: &ForwardTrace,
    desc: &AnnotatedDescription,
    part: &SuperpointPartition,
    config: &ModelConfig,
) -> Result<PhraseMaskSet, ModelError> {
    let final_logits = trace.logits.last().expect("trace has at least one layer");
    let rows = final_logits.nrows();
    let tokens = desc.token_len();
    if rows != tokens + 2 {
        return Err(shape_mismatch(format!(
            "trace has {rows} query rows but description has {tokens} tokens"
        )));
    }
    if final_logits.ncols() != part.num_superpoints() {
        return Err(shape_mismatch(format!(
            "trace covers {} superpoints, partition has {}",
            final_logits.ncols(),
            part.num_superpoints()
        )));
    }
    let row_mask = |row: usize| {
        let logits = SuperpointLogits {
            scene_id: part.scene_id().to_string(),
            values: final_logits.row(row).to_vec(),
        };
        broadcast_mask(&logits.binarize(config.binarize_threshold), part)
            .expect("superpoint count already checked")
    };

    let mut masks = Vec::with_capacity(desc.phrases.len());
    for phrase in &desc.phrases {
        if phrase.is_sentence_level {
            masks.push(row_mask(0));
            continue;
        }
        if phrase.head_index >= tokens {
            return Err(ModelError::IndexOutOfRange {
                head: phrase.head_index,
                tokens,
            });
        }
        masks.push(row_mask(phrase.head_index + 1));
    }
    Ok(PhraseMaskSet {
        masks,
        sentence_mask: Some(row_mask(0)),
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<CheckpointTensor>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Write config and all named tensors as a self-describing JSON container.
/// Stable: saving a loaded checkpoint reproduces the bytes exactly.
pub fn save_checkpoint(
    config: &ModelConfig,
    state: &ModelState,
    path: &Path,
) -> Result<(), ModelError> {
    let tensors = state
        .named_params()
        .into_iter()
        .map(|(name, tensor)| CheckpointTensor {
            name,
            rows: tensor.nrows(),
            cols: tensor.ncols(),
            data: tensor.iter().copied().collect(),
        })
        .collect();
    let checkpoint = Checkpoint {
        format_version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors,
    };
    let mut text =
        serde_json::to_string(&checkpoint).expect("checkpoint serialization is infallible");
    text.push('\n');
    fs::write(path, text).map_err(|e| ModelError::CheckpointIo {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Load a checkpoint, validating version, tensor names, and shapes.
pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelState), ModelError> {
    let raw = fs::read_to_string(path).map_err(|e| ModelError::CheckpointIo {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let checkpoint: Checkpoint =
        serde_json::from_str(&raw).map_err(|e| ModelError::CheckpointFormat {
            message: e.to_string(),
        })?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(ModelError::CheckpointFormat {
            message: format!(
                "unsupported format version {} (expected {CHECKPOINT_VERSION})",
                checkpoint.format_version
            ),
        });
    }
    let mut state = ModelState::init(&checkpoint.config, 0)?;
    let mut params = state.named_params_mut();
    if params.len() != checkpoint.tensors.len() {
        return Err(ModelError::CheckpointFormat {
            message: format!(
                "checkpoint has {} tensors, model expects {}",
                checkpoint.tensors.len(),
                params.len()
            ),
        });
    }
    for (slot, tensor) in params.iter_mut().zip(&checkpoint.tensors) {
        if slot.0 != tensor.name {
            return Err(ModelError::CheckpointFormat {
                message: format!("unexpected tensor {} (expected {})", tensor.name, slot.0),
            });
        }
        if slot.1.dim() != (tensor.rows, tensor.cols) || tensor.data.len() != tensor.rows * tensor.cols
        {
            return Err(ModelError::CheckpointFormat {
                message: format!("tensor {} has inconsistent shape", tensor.name),
            });
        }
        *slot.1 = Array2::from_shape_vec((tensor.rows, tensor.cols), tensor.data.clone())
            .expect("length checked above");
    }
    Ok((checkpoint.config, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::PhraseTarget;
    use ndarray::array;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            model_dim: 8,
            token_dim: 6,
            pooled_dim: 4,
            num_layers: 2,
            num_heads: 2,
            ffn_hidden: 16,
            binarize_threshold: 0.0,
        }
    }

    fn toy_inputs(config: &ModelConfig, n_s: usize, tokens: usize) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
        let d = config.model_dim;
        let f_v = Array2::from_shape_fn((n_s, d), |(r, c)| ((r * 5 + c * 3) % 7) as f64 / 7.0 - 0.4);
        let f_sp = Array2::from_shape_fn((n_s, d), |(r, c)| ((r * 11 + c * 2) % 5) as f64 / 5.0 - 0.3);
        let e = Array2::from_shape_fn((tokens + 2, config.token_dim), |(r, c)| {
            ((r * 7 + c * 13) % 9) as f64 / 9.0 - 0.5
        });
        (f_v, f_sp, e)
    }

    #[test]
    fn init_queries_matches_plain_products() {
        let zeros = Array2::<f64>::zeros((3, 2));
        let w = array![[0.0, 1.0], [1.0, 0.0]];
        assert_eq!(init_queries(&zeros, &w).unwrap(), Array2::<f64>::zeros((3, 2)));

        let eye = Array2::<f64>::eye(2);
        let features = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(init_queries(&features, &eye).unwrap(), features);

        let single = array![[1.0, 2.0]];
        assert_eq!(init_queries(&single, &w).unwrap(), array![[2.0, 1.0]]);
    }

    #[test]
    fn init_queries_rejects_width_mismatch() {
        let features = Array2::<f64>::zeros((3, 4));
        let w = Array2::<f64>::zeros((5, 2));
        assert!(matches!(
            init_queries(&features, &w).unwrap_err(),
            ModelError::ShapeMismatch { .. }
        ));
    }

    #[test]
    fn single_visual_row_forces_unit_attention() {
        let config = toy_config();
        let state = ModelState::init(&config, 7).unwrap();
        let (f_v, _, e) = toy_inputs(&config, 1, 3);
        let q0 = init_queries(&e, &state.token_proj).unwrap();
        let (_, attention) = decoder_layer(&q0, &f_v, &state.layers[0], &config).unwrap();
        for head in &attention.cross {
            assert_eq!(head.ncols(), 1);
            assert!(head.iter().all(|&p| (p - 1.0).abs() < 1e-15));
        }
    }

    #[test]
    fn single_query_self_attention_is_unit() {
        let config = toy_config();
        let state = ModelState::init(&config, 7).unwrap();
        let (f_v, _, _) = toy_inputs(&config, 4, 3);
        let q = Array2::from_shape_fn((1, config.model_dim), |(_, c)| c as f64 / 8.0);
        let (_, attention) = decoder_layer(&q, &f_v, &state.layers[0], &config).unwrap();
        for head in &attention.self_attn {
            assert_eq!(head.dim(), (1, 1));
            assert!((head[(0, 0)] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn visual_row_permutation_leaves_layer_output_unchanged() {
        let config = toy_config();
        let state = ModelState::init(&config, 3).unwrap();
        let (f_v, _, e) = toy_inputs(&config, 5, 4);
        let q0 = init_queries(&e, &state.token_proj).unwrap();
        let (base, _) = decoder_layer(&q0, &f_v, &state.layers[0], &config).unwrap();

        let permuted = f_v.select(ndarray::Axis(0), &[4, 2, 0, 1, 3]);
        let (shuffled, _) = decoder_layer(&q0, &permuted, &state.layers[0], &config).unwrap();
        for (a, b) in base.iter().zip(shuffled.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_records_every_layer() {
        let mut config = toy_config();
        config.num_layers = 1;
        let state = ModelState::init(&config, 1).unwrap();
        let (f_v, f_sp, e) = toy_inputs(&config, 4, 3);
        let trace = forward(&f_v, &f_sp, &e, &config, &state).unwrap();
        assert_eq!(trace.queries.len(), 2);
        assert_eq!(trace.logits.len(), 2);
        assert_eq!(trace.scores.len(), 2);
        assert_eq!(trace.attention.len(), 1);
        for logits in &trace.logits {
            assert_eq!(logits.dim(), (5, 4));
        }
        for scores in &trace.scores {
            assert_eq!(scores.dim(), (5, 1));
            assert!(scores.iter().all(|&s| (0.0..=1.0).contains(&s)));
        }
    }

    #[test]
    fn zero_superpoint_features_zero_all_logits() {
        let config = toy_config();
        let state = ModelState::init(&config, 2).unwrap();
        let (f_v, _, e) = toy_inputs(&config, 4, 3);
        let f_sp = Array2::zeros((4, config.model_dim));
        let trace = forward(&f_v, &f_sp, &e, &config, &state).unwrap();
        for logits in &trace.logits {
            assert!(logits.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let config = toy_config();
        let state = ModelState::init(&config, 11).unwrap();
        let (f_v, f_sp, e) = toy_inputs(&config, 6, 4);
        let a = forward(&f_v, &f_sp, &e, &config, &state).unwrap();
        let b = forward(&f_v, &f_sp, &e, &config, &state).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert_eq!(x, y);
        }
        for (x, y) in a.queries.iter().zip(&b.queries) {
            assert_eq!(x, y);
        }
    }

    fn trace_with_final_logits(logits: Array2<f64>) -> ForwardTrace {
        let rows = logits.nrows();
        ForwardTrace {
            queries: vec![Array2::zeros((rows, 2))],
            scores: vec![Array2::zeros((rows, 1))],
            logits: vec![logits],
            attention: vec![],
        }
    }

    fn single_phrase_desc(head: usize, tokens: usize) -> AnnotatedDescription {
        AnnotatedDescription {
            description_id: "d".into(),
            scene_id: "s".into(),
            tokens: (0..tokens).map(|i| format!("t{i}")).collect(),
            phrases: vec![PhraseTarget::new((head, head), [0].into())],
        }
    }

    #[test]
    fn saturated_logits_give_full_and_empty_masks() {
        let part = SuperpointPartition::new("s", vec![0, 0, 1], 2).unwrap();
        let config = toy_config();
        let desc = single_phrase_desc(0, 1);

        let all_high = trace_with_final_logits(Array2::from_elem((3, 2), 10.0));
        let masks = predict_masks(&all_high, &desc, &part, &config).unwrap();
        assert_eq!(masks.masks[0].count(), 3);

        let all_low = trace_with_final_logits(Array2::from_elem((3, 2), -10.0));
        let masks = predict_masks(&all_low, &desc, &part, &config).unwrap();
        assert_eq!(masks.masks[0].count(), 0);
    }

    #[test]
    fn logit_row_thresholds_and_broadcasts() {
        let part = SuperpointPartition::new("s", vec![0, 0, 1], 2).unwrap();
        let config = toy_config();
        let desc = single_phrase_desc(0, 1);
        // Head row is token 0 -> query row 1.
        let mut logits = Array2::zeros((3, 2));
        logits[(1, 0)] = 2.0;
        logits[(1, 1)] = -1.0;
        let trace = trace_with_final_logits(logits);
        let masks = predict_masks(&trace, &desc, &part, &config).unwrap();
        assert_eq!(
            masks.masks[0].iter().collect::<Vec<_>>(),
            [true, true, false]
        );
    }

    #[test]
    fn head_index_out_of_range_is_rejected() {
        let part = SuperpointPartition::new("s", vec![0], 1).unwrap();
        let config = toy_config();
        let mut desc = single_phrase_desc(0, 2);
        desc.phrases[0].head_index = 2;
        let trace = trace_with_final_logits(Array2::zeros((4, 1)));
        assert_eq!(
            predict_masks(&trace, &desc, &part, &config).unwrap_err(),
            ModelError::IndexOutOfRange { head: 2, tokens: 2 }
        );
    }

    #[test]
    fn sentence_sentinel_reads_cls_row() {
        let part = SuperpointPartition::new("s", vec![0, 1], 2).unwrap();
        let config = toy_config();
        let mut desc = single_phrase_desc(0, 1);
        desc.phrases = vec![PhraseTarget::sentence_level(1, [0].into())];
        let mut logits = Array2::from_elem((3, 2), -5.0);
        logits[(0, 0)] = 3.0; // [CLS] row selects superpoint 0 only
        let trace = trace_with_final_logits(logits);
        let masks = predict_masks(&trace, &desc, &part, &config).unwrap();
        assert_eq!(masks.masks[0].iter().collect::<Vec<_>>(), [true, false]);
        assert_eq!(masks.sentence_mask.unwrap(), masks.masks[0]);
    }

    #[test]
    fn attention_rows_are_normalized_everywhere() {
        let config = toy_config();
        let state = ModelState::init(&config, 5).unwrap();
        let (f_v, f_sp, e) = toy_inputs(&config, 5, 6);
        let trace = forward(&f_v, &f_sp, &e, &config, &state).unwrap();
        for layer in &trace.attention {
            for head in layer.cross.iter().chain(&layer.self_attn) {
                for row in head.rows() {
                    assert!(row.iter().all(|&p| p >= 0.0));
                    assert!((row.sum() - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn positive_scaling_of_superpoint_features_keeps_masks() {
        let config = toy_config();
        let state = ModelState::init(&config, 9).unwrap();
        let (f_v, f_sp, e) = toy_inputs(&config, 5, 3);
        let part = SuperpointPartition::new("s", vec![0, 1, 2, 3, 4], 5).unwrap();
        let desc = single_phrase_desc(1, 3);

        let base = forward(&f_v, &f_sp, &e, &config, &state).unwrap();
        let scaled = forward(&f_v, &(&f_sp * 3.5), &e, &config, &state).unwrap();
        for (a, b) in base.logits.iter().zip(&scaled.logits) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((y - 3.5 * x).abs() < 1e-9);
            }
        }
        assert_eq!(
            predict_masks(&base, &desc, &part, &config).unwrap(),
            predict_masks(&scaled, &desc, &part, &config).unwrap()
        );
    }

    #[test]
    fn superpoint_permutation_permutes_logit_columns() {
        let config = toy_config();
        let state = ModelState::init(&config, 13).unwrap();
        let (f_v, f_sp, e) = toy_inputs(&config, 5, 3);
        let perm = [3usize, 0, 4, 1, 2];
        let f_v_p = f_v.select(ndarray::Axis(0), &perm);
        let f_sp_p = f_sp.select(ndarray::Axis(0), &perm);

        let base = forward(&f_v, &f_sp, &e, &config, &state).unwrap();
        let permuted = forward(&f_v_p, &f_sp_p, &e, &config, &state).unwrap();
        for (a, b) in base.logits.iter().zip(&permuted.logits) {
            for (new_col, &old_col) in perm.iter().enumerate() {
                for r in 0..a.nrows() {
                    assert!((a[(r, old_col)] - b[(r, new_col)]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn checkpoint_roundtrips_byte_stable() {
        let dir = tempfile::TempDir::new().unwrap();
        let config = toy_config();
        let state = ModelState::init(&config, 21).unwrap();
        let first = dir.path().join("model.ckpt");
        save_checkpoint(&config, &state, &first).unwrap();

        let (loaded_config, loaded_state) = load_checkpoint(&first).unwrap();
        assert_eq!(loaded_config, config);
        assert_eq!(loaded_state, state);

        let second = dir.path().join("again.ckpt");
        save_checkpoint(&loaded_config, &loaded_state, &second).unwrap();
        assert_eq!(
            std::fs::read(&first).unwrap(),
            std::fs::read(&second).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_foreign_versions() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(
            &path,
            r#"{"format_version":99,"config":{"model_dim":8,"token_dim":6,"pooled_dim":4,"num_layers":1,"num_heads":2,"ffn_hidden":16,"binarize_threshold":0.0},"tensors":[]}"#,
        )
        .unwrap();
        assert!(matches!(
            load_checkpoint(&path).unwrap_err(),
            ModelError::CheckpointFormat { .. }
        ));
    }

    #[test]
    fn config_validation_catches_bad_head_counts() {
        let mut config = toy_config();
        config.num_heads = 3;
        assert!(config.validate().is_err());
        config.num_heads = 0;
        assert!(config.validate().is_err());
        config = toy_config();
        config.num_layers = 0;
        assert!(config.validate().is_err());
    }
}
