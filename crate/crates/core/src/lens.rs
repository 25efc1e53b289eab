//! Vocabulary projections: the logit lens and the OV / QK circuits.
//!
//! `LL(x) = softmax(ln_f(x) · Eᵀ)`. Head-space vectors (length `d/h`) are
//! first lifted to the residual space: through the head's rows of `W_O`
//! (values and head outputs) or through the opposite side of the QK circuit
//! (queries via `W_K`, keys via `W_Q`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{layer_norm, softmax_f64};
use crate::tensor::{matmul_transposed, Matrix};
use crate::weights::ModelBundle;

/// Whether the projection applies the final layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensMode {
    #[default]
    FinalNorm,
    /// Diagnostic only: decode the raw vector without `ln_f`.
    NoFinalNorm,
}

/// Raw logits `x · Eᵀ` of an already-normalised vector.
pub fn decode(bundle: &ModelBundle, normalized: &[f32]) -> Vec<f32> {
    let x = Matrix::from_vec(1, normalized.len(), normalized.to_vec());
    matmul_transposed(&x, bundle.token_embedding()).into_vec()
}

#[derive(Debug, Clone, Copy)]
pub struct Lens<'a> {
    bundle: &'a ModelBundle,
    mode: LensMode,
}

impl<'a> Lens<'a> {
    pub fn new(bundle: &'a ModelBundle) -> Self {
        Self {
            bundle,
            mode: LensMode::FinalNorm,
        }
    }

    pub fn with_mode(bundle: &'a ModelBundle, mode: LensMode) -> Self {
        Self { bundle, mode }
    }

    pub fn bundle(&self) -> &'a ModelBundle {
        self.bundle
    }

    pub fn mode(&self) -> LensMode {
        self.mode
    }

    pub fn vocab_size(&self) -> usize {
        self.bundle.config().vocab_size
    }

    fn prepare(&self, x: &[f32]) -> Vec<f32> {
        match self.mode {
            LensMode::FinalNorm => {
                let ln = &self.bundle.weights().ln_f;
                layer_norm(x, &ln.scale, &ln.shift, self.bundle.config().ln_epsilon)
            }
            LensMode::NoFinalNorm => x.to_vec(),
        }
    }

    fn check_len(&self, x: &[f32]) -> Result<()> {
        let d = self.bundle.config().d_model;
        if x.len() != d {
            return Err(Error::InvalidArgument(format!(
                "logit lens expects a vector of length {d}, got {}",
                x.len()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        self.check_len(x)?;
        Ok(decode(self.bundle, &self.prepare(x)))
    }

    /// Logits of many vectors at once, `[n, vocab]`.
    pub fn logits_batch(&self, xs: &[Vec<f32>]) -> Result<Matrix> {
        let d = self.bundle.config().d_model;
        let mut stacked = Matrix::zeros(xs.len(), d);
        for (i, x) in xs.iter().enumerate() {
            self.check_len(x)?;
            stacked.row_mut(i).copy_from_slice(&self.prepare(x));
        }
        Ok(matmul_transposed(&stacked, self.bundle.token_embedding()))
    }

    /// The logit lens: full distribution, top-k and target statistics.
    pub fn project(&self, x: &[f32], k: usize, target: Option<u32>) -> Result<LensProjection> {
        LensProjection::from_logits(&self.logits(x)?, k, target)
    }

    pub fn top_k(&self, x: &[f32], k: usize) -> Result<Vec<u32>> {
        if k > self.vocab_size() {
            return Err(k_too_large(k, self.vocab_size()));
        }
        Ok(top_k_indices(&self.logits(x)?, k))
    }

    /// Top-k token ids for each vector; batching amortises the decoder pass.
    pub fn top_k_batch(&self, xs: &[Vec<f32>], k: usize) -> Result<Vec<Vec<u32>>> {
        if k > self.vocab_size() {
            return Err(k_too_large(k, self.vocab_size()));
        }
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(xs.len());
        for chunk in xs.chunks(CHUNK) {
            let logits = self.logits_batch(chunk)?;
            for i in 0..chunk.len() {
                out.push(top_k_indices(logits.row(i), k));
            }
        }
        Ok(out)
    }
}

fn k_too_large(k: usize, vocab: usize) -> Error {
    Error::InvalidArgument(format!("k = {k} exceeds the vocabulary size {vocab}"))
}

/// Convenience wrapper for `Lens::new(bundle).project(..)`.
pub fn logit_lens(bundle: &ModelBundle, x: &[f32], k: usize, target: Option<u32>) -> Result<LensProjection> {
    Lens::new(bundle).project(x, k, target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenProb {
    pub id: u32,
    pub prob: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStatus {
    pub id: u32,
    /// 0-based; 0 is the most probable token.
    pub rank: usize,
    pub prob: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensProjection {
    pub probs: Vec<f32>,
    pub top_k: Vec<TokenProb>,
    pub entropy_nats: f64,
    pub target: Option<TargetStatus>,
}

impl LensProjection {
    pub fn from_logits(logits: &[f32], k: usize, target: Option<u32>) -> Result<Self> {
        let v = logits.len();
        if k > v {
            return Err(k_too_large(k, v));
        }
        if let Some(id) = target {
            if id as usize >= v {
                return Err(Error::TokenOutOfRange { id, vocab_size: v });
            }
        }
        let probs64 = softmax_f64(logits);
        let entropy_nats = entropy_f64(&probs64);
        let probs: Vec<f32> = probs64.iter().map(|&p| p as f32).collect();
        let top_k = top_k_indices(logits, k)
            .into_iter()
            .map(|id| TokenProb {
                id,
                prob: probs[id as usize],
            })
            .collect();
        let target = target.map(|id| TargetStatus {
            id,
            rank: rank_in(logits, id),
            prob: probs[id as usize],
        });
        Ok(Self {
            probs,
            top_k,
            entropy_nats,
            target,
        })
    }

    pub fn top1(&self) -> Option<u32> {
        self.top_k.first().map(|t| t.id)
    }

    /// Rank of `id` by probability (ties broken by ascending id).
    pub fn rank_of(&self, id: u32) -> usize {
        rank_in(&self.probs, id)
    }
}

fn cmp_desc(values: &[f32], a: u32, b: u32) -> std::cmp::Ordering {
    values[b as usize]
        .total_cmp(&values[a as usize])
        .then(a.cmp(&b))
}

/// Indices of the `k` largest values, descending, ties by ascending index.
pub fn top_k_indices(values: &[f32], k: usize) -> Vec<u32> {
    let k = k.min(values.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| cmp_desc(values, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| cmp_desc(values, a, b));
    idx
}

/// Number of entries ordered before `id` under the top-k ordering.
pub fn rank_in(values: &[f32], id: u32) -> usize {
    let v = values[id as usize];
    values
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > v || (x == v && (j as u32) < id))
        .count()
}

/// Entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(probs: &[f32]) -> f64 {
    probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| {
            let p = p as f64;
            -p * p.ln()
        })
        .sum()
}

pub fn entropy_f64(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

fn check_head(bundle: &ModelBundle, layer: usize, head: usize, len: usize) -> Result<()> {
    let cfg = bundle.config();
    if layer >= cfg.n_layers {
        return Err(Error::IndexOutOfRange {
            what: "layer",
            index: layer,
            limit: cfg.n_layers,
        });
    }
    if head >= cfg.n_heads {
        return Err(Error::IndexOutOfRange {
            what: "head",
            index: head,
            limit: cfg.n_heads,
        });
    }
    if len != cfg.head_dim() {
        return Err(Error::InvalidArgument(format!(
            "head vector has length {len}, expected {}",
            cfg.head_dim()
        )));
    }
    Ok(())
}

/// OV circuit: `head_vec · W_O[j·d/h .. (j+1)·d/h, :]` (no bias).
pub fn ov_project(bundle: &ModelBundle, layer: usize, head: usize, head_vec: &[f32]) -> Result<Vec<f32>> {
    check_head(bundle, layer, head, head_vec.len())?;
    let w_o = &bundle.layer(layer).w_o;
    let dh = head_vec.len();
    let mut out = vec![0.0f32; w_o.cols()];
    for (r, &a) in head_vec.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(w_o.row(head * dh + r)) {
            *o += a * w;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QkSide {
    Query,
    Key,
}

/// QK circuit: a query is read through the head's slice of `W_K`, a key
/// through the head's slice of `W_Q` (`vec · W_slice^T`).
pub fn qk_project(
    bundle: &ModelBundle,
    layer: usize,
    head: usize,
    vec: &[f32],
    side: QkSide,
) -> Result<Vec<f32>> {
    check_head(bundle, layer, head, vec.len())?;
    let lw = bundle.layer(layer);
    let w = match side {
        QkSide::Query => &lw.w_k,
        QkSide::Key => &lw.w_q,
    };
    let dh = vec.len();
    Ok((0..w.rows())
        .map(|c| crate::tensor::dot(&w.row(c)[head * dh..(head + 1) * dh], vec))
        .collect())
}

/// Places a head-space vector in its slot of an otherwise-zero `d`-vector
/// (the "no circuit" reading of a head).
pub fn embed_head(bundle: &ModelBundle, head: usize, head_vec: &[f32]) -> Vec<f32> {
    let d = bundle.config().d_model;
    let dh = head_vec.len();
    let mut out = vec![0.0; d];
    out[head * dh..(head + 1) * dh].copy_from_slice(head_vec);
    out
}
