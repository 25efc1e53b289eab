//! Instrumented forward pass.
//!
//! [`forward`] runs GPT-2 on a token sequence and keeps every intermediate
//! vector for every position: block inputs, normalised inputs, per-head
//! queries/keys/values, attention probabilities, head outputs, MLP
//! coefficients and block outputs. Nothing is dropped or cached between
//! calls, so a trace is a pure function of the bundle and the ids.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::lens;
use crate::ops::{gelu_tanh, layer_norm_into, softmax, softmax_scores};
use crate::tensor::{argmax, linear, Matrix};
use crate::weights::{LayerNormParams, ModelBundle};

pub use crate::ops::layer_norm;

/// Every captured vector of one transformer block, for all positions.
///
/// Matrices are `[t, d]` unless noted; head `j` of a `[t, d]` attention
/// matrix occupies columns `j*d/h .. (j+1)*d/h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    pub n_heads: usize,
    pub block_input: Matrix,
    pub ln1_out: Matrix,
    pub queries: Matrix,
    pub keys: Matrix,
    pub values: Matrix,
    /// One `[t, t]` matrix per head; row `i` is the distribution of position
    /// `i` over positions `0..=i`, zero above the diagonal.
    pub attention: Vec<Matrix>,
    /// Concatenated head outputs `A_0 .. A_{h-1}` (input of `W_O`).
    pub head_outputs: Matrix,
    pub attn_out: Matrix,
    pub residual_mid: Matrix,
    pub ln2_out: Matrix,
    /// `[t, N]` pre-nonlinearity `x·FF1 + b`.
    pub mlp_pre_activations: Matrix,
    /// `[t, N]` post-nonlinearity coefficients of the `FF2` rows.
    pub mlp_activations: Matrix,
    pub mlp_out: Matrix,
    pub block_output: Matrix,
}

impl LayerTrace {
    pub fn head_dim(&self) -> usize {
        self.queries.cols() / self.n_heads
    }

    fn head_slice<'a>(&self, m: &'a Matrix, pos: usize, head: usize) -> &'a [f32] {
        let dh = self.head_dim();
        &m.row(pos)[head * dh..(head + 1) * dh]
    }

    pub fn query(&self, pos: usize, head: usize) -> &[f32] {
        self.head_slice(&self.queries, pos, head)
    }

    pub fn key(&self, pos: usize, head: usize) -> &[f32] {
        self.head_slice(&self.keys, pos, head)
    }

    pub fn value(&self, pos: usize, head: usize) -> &[f32] {
        self.head_slice(&self.values, pos, head)
    }

    pub fn head_output(&self, pos: usize, head: usize) -> &[f32] {
        self.head_slice(&self.head_outputs, pos, head)
    }

    /// Attention probabilities of `pos` over positions `0..=pos`.
    pub fn attention_row(&self, head: usize, pos: usize) -> &[f32] {
        &self.attention[head].row(pos)[..=pos]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub token_ids: Vec<u32>,
    pub analyzed_position: usize,
    pub layers: Vec<LayerTrace>,
    /// `ln_f` applied to the last block output at the analysed position.
    pub final_ln_out: Vec<f32>,
    pub logits: Vec<f32>,
    pub next_token_distribution: Vec<f32>,
}

impl Trace {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn predicted_token(&self) -> u32 {
        argmax(&self.logits) as u32
    }

    /// `hs^L` at the analysed position (input of `ln_f`).
    pub fn final_hidden(&self) -> &[f32] {
        self.layers
            .last()
            .expect("traces have at least one layer")
            .block_output
            .row(self.analyzed_position)
    }

    /// `hs^l` at the analysed position, for `l` in `0..=L`.
    pub fn residual(&self, l: usize) -> &[f32] {
        if l == self.layers.len() {
            self.final_hidden()
        } else {
            self.layers[l].block_input.row(self.analyzed_position)
        }
    }
}

/// Forward pass analysing the last position.
pub fn forward(bundle: &ModelBundle, ids: &[u32]) -> Result<Trace> {
    forward_at(bundle, ids, ids.len().saturating_sub(1))
}

pub fn forward_at(bundle: &ModelBundle, ids: &[u32], analyzed_position: usize) -> Result<Trace> {
    let cfg = bundle.config();
    if ids.is_empty() {
        return Err(Error::EmptyInput);
    }
    if ids.len() > cfg.max_positions {
        return Err(Error::InputTooLong {
            len: ids.len(),
            max_positions: cfg.max_positions,
        });
    }
    if analyzed_position >= ids.len() {
        return Err(Error::IndexOutOfRange {
            what: "analyzed position",
            index: analyzed_position,
            limit: ids.len(),
        });
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id: bad,
            vocab_size: cfg.vocab_size,
        });
    }

    let t = ids.len();
    let d = cfg.d_model;
    let w = bundle.weights();
    let mut hidden = Matrix::zeros(t, d);
    for (i, &id) in ids.iter().enumerate() {
        let tok = w.token_embedding.row(id as usize);
        let pos = w.position_embedding.row(i);
        for (h, (a, b)) in hidden.row_mut(i).iter_mut().zip(tok.iter().zip(pos)) {
            *h = a + b;
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let layer = run_block(bundle, l, hidden)?;
        hidden = layer.block_output.clone();
        layers.push(layer);
    }

    let mut final_ln_out = vec![0.0; d];
    layer_norm_into(
        hidden.row(analyzed_position),
        &w.ln_f.scale,
        &w.ln_f.shift,
        cfg.ln_epsilon,
        &mut final_ln_out,
    );
    let logits = lens::decode(bundle, &final_ln_out);
    let next_token_distribution = softmax(&logits);

    Ok(Trace {
        token_ids: ids.to_vec(),
        analyzed_position,
        layers,
        final_ln_out,
        logits,
        next_token_distribution,
    })
}

fn normalize_rows(x: &Matrix, ln: &LayerNormParams, eps: f32) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        layer_norm_into(x.row(i), &ln.scale, &ln.shift, eps, out.row_mut(i));
    }
    out
}

/// `Σ_i weights[i] · rows[i]`, accumulated in index order.
pub(crate) fn weighted_sum<'a, W: Copy + Into<f64>>(
    weights: &[W],
    rows: impl Iterator<Item = &'a [f32]>,
    width: usize,
) -> Vec<f32> {
    let mut acc = vec![0.0f64; width];
    for (&a, v) in weights.iter().zip(rows) {
        let a: f64 = a.into();
        for (o, &x) in acc.iter_mut().zip(v) {
            *o += a * x as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

fn run_block(bundle: &ModelBundle, l: usize, block_input: Matrix) -> Result<LayerTrace> {
    let cfg = bundle.config();
    let lw = bundle.layer(l);
    let (t, d, h) = (block_input.rows(), cfg.d_model, cfg.n_heads);
    let dh = d / h;
    let eps = cfg.ln_epsilon;

    let ln1_out = normalize_rows(&block_input, &lw.ln1, eps);
    let queries = linear(&ln1_out, &lw.w_q, Some(&lw.b_q));
    let keys = linear(&ln1_out, &lw.w_k, Some(&lw.b_k));
    let values = linear(&ln1_out, &lw.w_v, Some(&lw.b_v));

    let scale = 1.0 / (dh as f64).sqrt();
    let mut attention = Vec::with_capacity(h);
    let mut head_outputs = Matrix::zeros(t, d);
    for j in 0..h {
        let cols = j * dh..(j + 1) * dh;
        let mut probs = Matrix::zeros(t, t);
        for i in 0..t {
            let q = &queries.row(i)[cols.clone()];
            let scores: Vec<f64> = (0..=i).map(|m| dot_f64(q, &keys.row(m)[cols.clone()]) * scale).collect();
            let row = softmax_scores(&scores);
            for (p, &r) in probs.row_mut(i)[..=i].iter_mut().zip(&row) {
                *p = r as f32;
            }
            let out = weighted_sum(&row, (0..=i).map(|m| &values.row(m)[cols.clone()]), dh);
            head_outputs.row_mut(i)[cols.clone()].copy_from_slice(&out);
        }
        attention.push(probs);
    }

    let attn_out = linear(&head_outputs, &lw.w_o, Some(&lw.b_o));
    let mut residual_mid = Matrix::zeros(t, d);
    for i in 0..t {
        for ((r, a), b) in residual_mid.row_mut(i).iter_mut().zip(block_input.row(i)).zip(attn_out.row(i)) {
            *r = a + b;
        }
    }
    let ln2_out = normalize_rows(&residual_mid, &lw.ln2, eps);
    let mlp_pre_activations = linear(&ln2_out, &lw.ff1, Some(&lw.b_ff1));
    let mut mlp_activations = mlp_pre_activations.clone();
    for v in mlp_activations.data_mut() {
        *v = gelu_tanh(*v as f64) as f32;
    }
    let mlp_out = linear(&mlp_activations, &lw.ff2, Some(&lw.b_ff2));
    let mut block_output = Matrix::zeros(t, d);
    for i in 0..t {
        for ((o, r), m) in block_output.row_mut(i).iter_mut().zip(residual_mid.row(i)).zip(mlp_out.row(i)) {
            *o = r + m;
        }
    }
    if !block_output.is_finite() {
        return Err(Error::InvalidArgument(format!("non-finite activations in layer {l}")));
    }

    Ok(LayerTrace {
        n_heads: h,
        block_input,
        ln1_out,
        queries,
        keys,
        values,
        attention,
        head_outputs,
        attn_out,
        residual_mid,
        ln2_out,
        mlp_pre_activations,
        mlp_activations,
        mlp_out,
        block_output,
    })
}

/// A broken trace identity.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub layer: Option<usize>,
    pub check: &'static str,
    pub detail: String,
}

pub const RECONSTRUCTION_TOLERANCE: f32 = 1e-4;
pub const RECOMPOSITION_TOLERANCE: f32 = 1e-4;
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
}

/// Checks the block identity, head recomposition, attention normalisation
/// and causality of every layer. Empty means the trace is consistent.
pub fn verify_trace(trace: &Trace) -> Vec<Violation> {
    let mut out = Vec::new();
    let t = trace.seq_len();
    for (l, layer) in trace.layers.iter().enumerate() {
        let mut push = |check: &'static str, detail: String| {
            out.push(Violation {
                layer: Some(l),
                check,
                detail,
            })
        };

        let all = [
            &layer.block_input,
            &layer.ln1_out,
            &layer.queries,
            &layer.keys,
            &layer.values,
            &layer.head_outputs,
            &layer.attn_out,
            &layer.residual_mid,
            &layer.ln2_out,
            &layer.mlp_activations,
            &layer.mlp_out,
            &layer.block_output,
        ];
        if !all.iter().all(|m| m.is_finite()) || !layer.attention.iter().all(Matrix::is_finite) {
            push("finite values", "captured vectors contain NaN or Inf".into());
        }

        let mut worst_block = 0.0f32;
        let mut worst_mid = 0.0f32;
        for i in 0..t {
            let mid: Vec<f32> = layer
                .block_input
                .row(i)
                .iter()
                .zip(layer.attn_out.row(i))
                .map(|(a, b)| a + b)
                .collect();
            let rebuilt: Vec<f32> = mid.iter().zip(layer.mlp_out.row(i)).map(|(a, b)| a + b).collect();
            worst_block = worst_block.max(max_abs_diff(&rebuilt, layer.block_output.row(i)));
            worst_mid = worst_mid.max(max_abs_diff(&mid, layer.residual_mid.row(i)));
        }
        if !(worst_block <= RECONSTRUCTION_TOLERANCE) {
            push(
                "block reconstruction",
                format!("max |hs_in + attn_out + mlp_out - hs_out| = {worst_block:e}"),
            );
        }
        if !(worst_mid <= RECONSTRUCTION_TOLERANCE) {
            push(
                "residual after attention",
                format!("max |hs_in + attn_out - residual_mid| = {worst_mid:e}"),
            );
        }

        let dh = layer.head_dim();
        for j in 0..layer.n_heads {
            let probs = &layer.attention[j];
            for i in 0..t {
                let row = probs.row(i);
                if row[i + 1..].iter().any(|&a| a != 0.0) {
                    push("causal mask", format!("head {j}, position {i} attends to a later position"));
                }
                if row[..=i].iter().any(|&a| !(a >= 0.0)) {
                    push("attention non-negative", format!("head {j}, position {i}"));
                }
                let sum: f64 = row[..=i].iter().map(|&a| a as f64).sum();
                if !((sum - 1.0).abs() <= ROW_SUM_TOLERANCE) {
                    push(
                        "attention rows sum to 1",
                        format!("head {j}, position {i}: row sums to {sum}"),
                    );
                }
                let rebuilt = weighted_sum(&row[..=i], (0..=i).map(|m| layer.value(m, j)), dh);
                let err = max_abs_diff(&rebuilt, layer.head_output(i, j));
                if !(err <= RECOMPOSITION_TOLERANCE) {
                    push(
                        "head recomposition",
                        format!("head {j}, position {i}: max |A_j - Σ a v| = {err:e}"),
                    );
                }
            }
        }

        if let Some(next) = trace.layers.get(l + 1) {
            if next.block_input != layer.block_output {
                push("layer chaining", format!("block output of layer {l} differs from input of layer {}", l + 1));
            }
        }
    }

    let total: f64 = trace.next_token_distribution.iter().map(|&p| p as f64).sum();
    if !((total - 1.0).abs() <= ROW_SUM_TOLERANCE) {
        out.push(Violation {
            layer: None,
            check: "distribution sums to 1",
            detail: format!("next-token distribution sums to {total}"),
        });
    }
    if argmax(&trace.logits) != argmax(&trace.next_token_distribution) {
        out.push(Violation {
            layer: None,
            check: "argmax consistency",
            detail: "argmax of logits differs from argmax of distribution".into(),
        });
    }
    out
}

/// Writes one safetensors file per layer (`layer_000.safetensors`, ...),
/// `final.safetensors` and `trace.json` with the token ids.
pub fn dump_trace(trace: &Trace, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let m = |name: &str, x: &Matrix| (name.to_string(), x.shape().to_vec(), x.data().to_vec());
    for (l, layer) in trace.layers.iter().enumerate() {
        let t = layer.block_input.rows();
        let mut attention = Vec::with_capacity(layer.n_heads * t * t);
        for a in &layer.attention {
            attention.extend_from_slice(a.data());
        }
        let tensors = vec![
            m("block_input", &layer.block_input),
            m("ln1_out", &layer.ln1_out),
            m("queries", &layer.queries),
            m("keys", &layer.keys),
            m("values", &layer.values),
            ("attention".to_string(), vec![layer.n_heads, t, t], attention),
            m("head_outputs", &layer.head_outputs),
            m("attn_out", &layer.attn_out),
            m("residual_mid", &layer.residual_mid),
            m("ln2_out", &layer.ln2_out),
            m("mlp_pre_activations", &layer.mlp_pre_activations),
            m("mlp_activations", &layer.mlp_activations),
            m("mlp_out", &layer.mlp_out),
            m("block_output", &layer.block_output),
        ];
        crate::dump::write_safetensors(&dir.join(format!("layer_{l:03}.safetensors")), &tensors)?;
    }
    let v = |name: &str, x: &[f32]| (name.to_string(), vec![x.len()], x.to_vec());
    crate::dump::write_safetensors(
        &dir.join("final.safetensors"),
        &[
            v("final_ln_out", &trace.final_ln_out),
            v("logits", &trace.logits),
            v("next_token_distribution", &trace.next_token_distribution),
        ],
    )?;
    let meta = serde_json::json!({
        "token_ids": trace.token_ids,
        "analyzed_position": trace.analyzed_position,
        "n_layers": trace.layers.len(),
    });
    std::fs::write(dir.join("trace.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}
