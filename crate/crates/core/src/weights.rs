//! Model bundles: configuration, weights and tokenizer assets for one GPT-2
//! checkpoint.
//!
//! Every matrix is kept in the orientation `output = input · W + bias`
//! (row index = input dimension), which is also how the published GPT-2
//! checkpoints store their `Conv1D` weights. Containers that store the
//! transposed (`[out, in]`) layout are transposed on load. The fused
//! `c_attn` projection is split into query, key and value thirds.
//!
//! The decoder is the token embedding read transposed; it is never stored a
//! second time.

use std::collections::HashMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::tokenizer::Tokenizer;

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "model.safetensors";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ln_epsilon: f32,
}

/// The subset of a Hugging Face `config.json` that GPT-2 needs.
#[derive(Debug, Deserialize)]
struct HfConfig {
    n_layer: usize,
    n_head: usize,
    n_embd: usize,
    #[serde(default)]
    n_inner: Option<usize>,
    vocab_size: usize,
    n_positions: usize,
    #[serde(default)]
    layer_norm_epsilon: Option<f32>,
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Parameters of the canonical schema (tied decoder counted once).
    pub fn parameter_count(&self) -> usize {
        canonical_schema(self).iter().map(|(_, [r, c])| r * c).sum()
    }

    pub fn from_json_str(raw: &str) -> std::result::Result<Self, serde_json::Error> {
        let hf: HfConfig = serde_json::from_str(raw)?;
        Ok(Self {
            n_layers: hf.n_layer,
            n_heads: hf.n_head,
            d_model: hf.n_embd,
            d_mlp: hf.n_inner.unwrap_or(4 * hf.n_embd),
            vocab_size: hf.vocab_size,
            max_positions: hf.n_positions,
            ln_epsilon: hf.layer_norm_epsilon.unwrap_or(1e-5),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).map_err(|source| Error::Load {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json_str(&raw).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub scale: Vec<f32>,
    pub shift: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormParams,
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub b_q: Vec<f32>,
    pub b_k: Vec<f32>,
    pub b_v: Vec<f32>,
    pub w_o: Matrix,
    pub b_o: Vec<f32>,
    pub ln2: LayerNormParams,
    /// `[d, N]`: column `n` is the input-side vector of MLP neuron `n`.
    pub ff1: Matrix,
    pub b_ff1: Vec<f32>,
    /// `[N, d]`: row `n` is the output-side vector of MLP neuron `n`.
    pub ff2: Matrix,
    pub b_ff2: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BundleWeights {
    /// `[vocab, d]`; also the (transposed) decoder.
    pub token_embedding: Matrix,
    /// `[max_positions, d]`
    pub position_embedding: Matrix,
    pub layers: Vec<LayerWeights>,
    pub ln_f: LayerNormParams,
}

/// An immutable, validated model: configuration, weights and tokenizer.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    config: ModelConfig,
    weights: BundleWeights,
    tokenizer: Tokenizer,
    source: Option<PathBuf>,
}

/// A named tensor in canonical orientation.
#[derive(Debug, Clone, Copy)]
pub struct TensorRef<'a> {
    pub shape: [usize; 2],
    pub data: &'a [f32],
}

impl ModelBundle {
    /// Assembles a bundle without validating it; see [`validate_bundle`].
    pub fn from_parts(config: ModelConfig, weights: BundleWeights, tokenizer: Tokenizer) -> Self {
        Self {
            config,
            weights,
            tokenizer,
            source: None,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn weights(&self) -> &BundleWeights {
        &self.weights
    }

    pub fn layer(&self, l: usize) -> &LayerWeights {
        &self.weights.layers[l]
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn source(&self) -> Option<&Path> {
        self.source.as_deref()
    }

    /// Token embedding `E`; the decoder is `Eᵀ`.
    pub fn token_embedding(&self) -> &Matrix {
        &self.weights.token_embedding
    }

    /// Every canonical tensor with its name, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, TensorRef<'_>)> {
        fn mat(m: &Matrix) -> TensorRef<'_> {
            TensorRef {
                shape: m.shape(),
                data: m.data(),
            }
        }
        fn vector(v: &[f32]) -> TensorRef<'_> {
            TensorRef {
                shape: [1, v.len()],
                data: v,
            }
        }
        let w = &self.weights;
        let mut out = vec![
            ("wte".to_string(), mat(&w.token_embedding)),
            ("wpe".to_string(), mat(&w.position_embedding)),
        ];
        for (l, lw) in w.layers.iter().enumerate() {
            let p = |s: &str| format!("h.{l}.{s}");
            out.push((p("ln_1.scale"), vector(&lw.ln1.scale)));
            out.push((p("ln_1.shift"), vector(&lw.ln1.shift)));
            out.push((p("attn.w_q"), mat(&lw.w_q)));
            out.push((p("attn.w_k"), mat(&lw.w_k)));
            out.push((p("attn.w_v"), mat(&lw.w_v)));
            out.push((p("attn.b_q"), vector(&lw.b_q)));
            out.push((p("attn.b_k"), vector(&lw.b_k)));
            out.push((p("attn.b_v"), vector(&lw.b_v)));
            out.push((p("attn.w_o"), mat(&lw.w_o)));
            out.push((p("attn.b_o"), vector(&lw.b_o)));
            out.push((p("ln_2.scale"), vector(&lw.ln2.scale)));
            out.push((p("ln_2.shift"), vector(&lw.ln2.shift)));
            out.push((p("mlp.ff1"), mat(&lw.ff1)));
            out.push((p("mlp.b_ff1"), vector(&lw.b_ff1)));
            out.push((p("mlp.ff2"), mat(&lw.ff2)));
            out.push((p("mlp.b_ff2"), vector(&lw.b_ff2)));
        }
        out.push(("ln_f.scale".to_string(), vector(&w.ln_f.scale)));
        out.push(("ln_f.shift".to_string(), vector(&w.ln_f.shift)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }
}

/// Expected canonical shapes, in the order produced by [`ModelBundle::tensors`].
pub fn canonical_schema(config: &ModelConfig) -> Vec<(String, [usize; 2])> {
    let (d, n, v, p) = (config.d_model, config.d_mlp, config.vocab_size, config.max_positions);
    let mut out = vec![("wte".to_string(), [v, d]), ("wpe".to_string(), [p, d])];
    for l in 0..config.n_layers {
        let name = |s: &str| format!("h.{l}.{s}");
        out.extend([
            (name("ln_1.scale"), [1, d]),
            (name("ln_1.shift"), [1, d]),
            (name("attn.w_q"), [d, d]),
            (name("attn.w_k"), [d, d]),
            (name("attn.w_v"), [d, d]),
            (name("attn.b_q"), [1, d]),
            (name("attn.b_k"), [1, d]),
            (name("attn.b_v"), [1, d]),
            (name("attn.w_o"), [d, d]),
            (name("attn.b_o"), [1, d]),
            (name("ln_2.scale"), [1, d]),
            (name("ln_2.shift"), [1, d]),
            (name("mlp.ff1"), [d, n]),
            (name("mlp.b_ff1"), [1, n]),
            (name("mlp.ff2"), [n, d]),
            (name("mlp.b_ff2"), [1, d]),
        ]);
    }
    out.push(("ln_f.scale".to_string(), [1, d]));
    out.push(("ln_f.shift".to_string(), [1, d]));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationCheck {
    pub check: String,
    pub passed: bool,
    pub message: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<ValidationCheck>,
}

impl ValidationReport {
    fn record(&mut self, check: impl Into<String>, passed: bool, failure: impl FnOnce() -> String) {
        let message = (!passed).then(failure);
        self.checks.push(ValidationCheck {
            check: check.into(),
            passed,
            message,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ValidationCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

/// Runs every schema check against a bundle. Never fails; failures are
/// report entries.
pub fn validate_bundle(bundle: &ModelBundle) -> ValidationReport {
    let cfg = &bundle.config;
    let mut report = ValidationReport::default();
    for (what, value) in [
        ("n_layers", cfg.n_layers),
        ("n_heads", cfg.n_heads),
        ("d_model", cfg.d_model),
        ("d_mlp", cfg.d_mlp),
        ("vocab_size", cfg.vocab_size),
        ("max_positions", cfg.max_positions),
    ] {
        report.record(format!("{what} is positive"), value > 0, || format!("{what} must be positive"));
    }
    report.record(
        "head dimension is integral",
        cfg.n_heads > 0 && cfg.d_model % cfg.n_heads == 0,
        || format!("d mod h != 0 (d={}, h={})", cfg.d_model, cfg.n_heads),
    );
    report.record(
        "layer norm epsilon is positive",
        cfg.ln_epsilon > 0.0 && cfg.ln_epsilon.is_finite(),
        || format!("epsilon must be positive (got {})", cfg.ln_epsilon),
    );
    report.record(
        "layer count matches config",
        bundle.weights.layers.len() == cfg.n_layers,
        || format!("expected {} layers, found {}", cfg.n_layers, bundle.weights.layers.len()),
    );
    report.record(
        "tokenizer matches vocab_size",
        bundle.tokenizer.vocab_size() == cfg.vocab_size,
        || {
            format!(
                "tokenizer has {} tokens, config declares {}",
                bundle.tokenizer.vocab_size(),
                cfg.vocab_size
            )
        },
    );

    let found: HashMap<String, TensorRef<'_>> = bundle.tensors().into_iter().collect();
    for (name, shape) in canonical_schema(cfg) {
        match found.get(&name) {
            None => report.record(format!("tensor {name} present"), false, || format!("missing tensor {name}")),
            Some(t) => {
                report.record(format!("tensor {name} shape"), t.shape == shape, || {
                    format!("{name}: expected shape {shape:?}, found {:?}", t.shape)
                });
                report.record(format!("tensor {name} finite"), t.data.iter().all(|v| v.is_finite()), || {
                    format!("{name} contains non-finite values")
                });
            }
        }
    }
    report
}

/// Loads `config.json`, `model.safetensors`, `vocab.json` and `merges.txt`
/// from `dir` and validates the result.
pub fn load_model_bundle(dir: &Path) -> Result<ModelBundle> {
    let config_path = dir.join(CONFIG_FILE);
    let weights_path = dir.join(WEIGHTS_FILE);
    if !config_path.exists() {
        return Err(Error::Load {
            path: config_path,
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "config file not found"),
        });
    }
    let config = ModelConfig::load(&config_path)?;
    if config.n_heads == 0 || config.d_model % config.n_heads != 0 {
        return Err(Error::Validation(format!(
            "d mod h != 0 (d={}, h={})",
            config.d_model, config.n_heads
        )));
    }
    let tokenizer = Tokenizer::from_dir(dir)?;

    let file = File::open(&weights_path).map_err(|source| Error::Load {
        path: weights_path.clone(),
        source,
    })?;
    // SAFETY: the mapping is read-only and dropped before this function
    // returns; all tensor data is copied out into owned buffers.
    let mmap = unsafe { memmap2::Mmap::map(&file) }.map_err(|source| Error::Load {
        path: weights_path.clone(),
        source,
    })?;
    let container = SafeTensors::deserialize(&mmap).map_err(|e| Error::Parse {
        path: weights_path.clone(),
        message: e.to_string(),
    })?;
    let weights = read_weights(&container, &config)?;
    drop(container);
    drop(mmap);

    let mut bundle = ModelBundle::from_parts(config, weights, tokenizer);
    bundle.source = Some(dir.to_path_buf());
    let report = validate_bundle(&bundle);
    if !report.all_passed() {
        let msgs: Vec<String> = report.failures().filter_map(|c| c.message.clone()).collect();
        return Err(Error::Validation(msgs.join("; ")));
    }
    Ok(bundle)
}

struct Container<'a> {
    st: &'a SafeTensors<'a>,
    names: HashMap<String, String>,
}

impl<'a> Container<'a> {
    fn new(st: &'a SafeTensors<'a>) -> Self {
        let names = st
            .names()
            .into_iter()
            .map(|n| {
                let short = n.strip_prefix("transformer.").unwrap_or(n).to_string();
                (short, n.to_string())
            })
            .collect();
        Self { st, names }
    }

    fn shape(&self, name: &str) -> Option<Vec<usize>> {
        let full = self.names.get(name)?;
        self.st.tensor(full).ok().map(|t| t.shape().to_vec())
    }

    fn read(&self, name: &str, expected: &[usize]) -> Result<Vec<f32>> {
        let full = self.names.get(name).ok_or_else(|| Error::Tensor {
            name: name.to_string(),
            message: format!("missing (expected shape {expected:?})"),
        })?;
        let view = self.st.tensor(full).map_err(|e| Error::Tensor {
            name: name.to_string(),
            message: e.to_string(),
        })?;
        if view.shape() != expected {
            return Err(Error::Tensor {
                name: name.to_string(),
                message: format!("expected shape {expected:?}, found {:?}", view.shape()),
            });
        }
        let bytes = view.data();
        let values = match view.dtype() {
            Dtype::F32 => bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
            Dtype::F16 => bytes
                .chunks_exact(2)
                .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            Dtype::BF16 => bytes
                .chunks_exact(2)
                .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
                .collect(),
            other => {
                return Err(Error::Tensor {
                    name: name.to_string(),
                    message: format!("unsupported dtype {other:?}"),
                })
            }
        };
        Ok(values)
    }

    fn matrix(&self, name: &str, rows: usize, cols: usize, transposed: bool) -> Result<Matrix> {
        if transposed {
            let data = self.read(name, &[cols, rows])?;
            Ok(Matrix::from_vec(cols, rows, data).transpose())
        } else {
            Ok(Matrix::from_vec(rows, cols, self.read(name, &[rows, cols])?))
        }
    }

    fn ln(&self, prefix: &str, d: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            scale: self.read(&format!("{prefix}.weight"), &[d])?,
            shift: self.read(&format!("{prefix}.bias"), &[d])?,
        })
    }
}

fn read_weights(st: &SafeTensors<'_>, config: &ModelConfig) -> Result<BundleWeights> {
    let c = Container::new(st);
    let (d, n) = (config.d_model, config.d_mlp);

    // Conv1D checkpoints store c_attn as [d, 3d]; nn.Linear exports as [3d, d].
    let transposed = match c.shape("h.0.attn.c_attn.weight") {
        Some(s) if s == [3 * d, d] => true,
        _ => false,
    };

    let token_embedding = c.matrix("wte.weight", config.vocab_size, d, false)?;
    let position_embedding = c.matrix("wpe.weight", config.max_positions, d, false)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| format!("h.{l}.{s}");
        let qkv = c.matrix(&p("attn.c_attn.weight"), d, 3 * d, transposed)?;
        let qkv_b = c.read(&p("attn.c_attn.bias"), &[3 * d])?;
        layers.push(LayerWeights {
            ln1: c.ln(&p("ln_1"), d)?,
            w_q: qkv.columns(0, d),
            w_k: qkv.columns(d, 2 * d),
            w_v: qkv.columns(2 * d, 3 * d),
            b_q: qkv_b[..d].to_vec(),
            b_k: qkv_b[d..2 * d].to_vec(),
            b_v: qkv_b[2 * d..].to_vec(),
            w_o: c.matrix(&p("attn.c_proj.weight"), d, d, transposed)?,
            b_o: c.read(&p("attn.c_proj.bias"), &[d])?,
            ln2: c.ln(&p("ln_2"), d)?,
            ff1: c.matrix(&p("mlp.c_fc.weight"), d, n, transposed)?,
            b_ff1: c.read(&p("mlp.c_fc.bias"), &[n])?,
            ff2: c.matrix(&p("mlp.c_proj.weight"), n, d, transposed)?,
            b_ff2: c.read(&p("mlp.c_proj.bias"), &[d])?,
        });
    }
    Ok(BundleWeights {
        token_embedding,
        position_embedding,
        layers,
        ln_f: c.ln("ln_f", d)?,
    })
}

/// Writes a bundle's weights as a GPT-2 style safetensors container plus
/// `config.json` (used to build test fixtures and toy checkpoints).
pub fn write_checkpoint(bundle: &ModelBundle, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = bundle.config();
    let config = serde_json::json!({
        "model_type": "gpt2",
        "n_layer": cfg.n_layers,
        "n_head": cfg.n_heads,
        "n_embd": cfg.d_model,
        "n_inner": cfg.d_mlp,
        "vocab_size": cfg.vocab_size,
        "n_positions": cfg.max_positions,
        "layer_norm_epsilon": cfg.ln_epsilon,
    });
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(&config)?)?;

    let w = bundle.weights();
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = vec![
        ("wte.weight".into(), w.token_embedding.shape().to_vec(), w.token_embedding.data().to_vec()),
        ("wpe.weight".into(), w.position_embedding.shape().to_vec(), w.position_embedding.data().to_vec()),
        ("ln_f.weight".into(), vec![cfg.d_model], w.ln_f.scale.clone()),
        ("ln_f.bias".into(), vec![cfg.d_model], w.ln_f.shift.clone()),
    ];
    let d = cfg.d_model;
    for (l, lw) in w.layers.iter().enumerate() {
        let p = |s: &str| format!("h.{l}.{s}");
        let mut qkv = Matrix::zeros(d, 3 * d);
        for i in 0..d {
            let row = qkv.row_mut(i);
            row[..d].copy_from_slice(lw.w_q.row(i));
            row[d..2 * d].copy_from_slice(lw.w_k.row(i));
            row[2 * d..].copy_from_slice(lw.w_v.row(i));
        }
        let qkv_b: Vec<f32> = lw.b_q.iter().chain(&lw.b_k).chain(&lw.b_v).copied().collect();
        tensors.extend([
            (p("ln_1.weight"), vec![d], lw.ln1.scale.clone()),
            (p("ln_1.bias"), vec![d], lw.ln1.shift.clone()),
            (p("attn.c_attn.weight"), vec![d, 3 * d], qkv.into_vec()),
            (p("attn.c_attn.bias"), vec![3 * d], qkv_b),
            (p("attn.c_proj.weight"), vec![d, d], lw.w_o.data().to_vec()),
            (p("attn.c_proj.bias"), vec![d], lw.b_o.clone()),
            (p("ln_2.weight"), vec![d], lw.ln2.scale.clone()),
            (p("ln_2.bias"), vec![d], lw.ln2.shift.clone()),
            (p("mlp.c_fc.weight"), lw.ff1.shape().to_vec(), lw.ff1.data().to_vec()),
            (p("mlp.c_fc.bias"), vec![cfg.d_mlp], lw.b_ff1.clone()),
            (p("mlp.c_proj.weight"), lw.ff2.shape().to_vec(), lw.ff2.data().to_vec()),
            (p("mlp.c_proj.bias"), vec![d], lw.b_ff2.clone()),
        ]);
    }
    crate::dump::write_safetensors(&dir.join(WEIGHTS_FILE), &tensors)?;
    write_tokenizer(bundle.tokenizer(), dir)
}

fn write_tokenizer(tok: &Tokenizer, dir: &Path) -> Result<()> {
    let vocab = tok.vocab();
    let map: std::collections::BTreeMap<&str, u32> =
        (0..vocab.len() as u32).map(|id| (vocab.token(id).expect("dense"), id)).collect();
    std::fs::write(dir.join("vocab.json"), serde_json::to_string(&map)?)?;
    let mut text = String::from("#version: 0.2\n");
    for (l, r) in vocab.ranked_merges() {
        text.push_str(&format!("{} {}\n", vocab.token(l).expect("id"), vocab.token(r).expect("id")));
    }
    std::fs::write(dir.join("merges.txt"), text)?;
    Ok(())
}
