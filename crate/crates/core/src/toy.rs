//! Small random-weight models for tests and demos.

use rand::rngs::StdRng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Matrix;
use crate::tokenizer::byte_level_tokenizer;
use crate::weights::{validate_bundle, BundleWeights, LayerNormParams, LayerWeights, ModelBundle, ModelConfig};

/// The toy shape used throughout the test-suite: L=2, d=8, h=2, N=16 over a
/// byte-level vocabulary with 32 letter-pair merges.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 8,
        d_mlp: 16,
        vocab_size: 256 + 32,
        max_positions: 32,
        ln_epsilon: 1e-5,
    }
}

struct Sampler {
    rng: StdRng,
}

impl Sampler {
    fn vec(&mut self, n: usize, mean: f32, std: f32) -> Vec<f32> {
        let dist = Normal::new(mean, std).expect("finite std");
        (0..n).map(|_| dist.sample(&mut self.rng)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize, std: f32) -> Matrix {
        Matrix::from_vec(rows, cols, self.vec(rows * cols, 0.0, std))
    }

    fn ln(&mut self, d: usize) -> LayerNormParams {
        LayerNormParams {
            scale: self.vec(d, 1.0, 0.2),
            shift: self.vec(d, 0.0, 0.1),
        }
    }
}

/// A validated bundle with Gaussian weights. The vocabulary must hold at
/// least the 256 byte tokens; ids above 255 are letter-pair merges.
pub fn random_bundle(config: ModelConfig, seed: u64) -> Result<ModelBundle> {
    if config.vocab_size < 256 {
        return Err(Error::InvalidArgument(format!(
            "toy vocabulary needs at least 256 tokens, got {}",
            config.vocab_size
        )));
    }
    let tokenizer = byte_level_tokenizer(config.vocab_size - 256)?;
    let mut s = Sampler {
        rng: StdRng::seed_from_u64(seed),
    };
    let (d, n) = (config.d_model, config.d_mlp);
    let w = 1.0 / (d as f32).sqrt();
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            ln1: s.ln(d),
            w_q: s.matrix(d, d, w),
            w_k: s.matrix(d, d, w),
            w_v: s.matrix(d, d, w),
            b_q: s.vec(d, 0.0, 0.05),
            b_k: s.vec(d, 0.0, 0.05),
            b_v: s.vec(d, 0.0, 0.05),
            w_o: s.matrix(d, d, w),
            b_o: s.vec(d, 0.0, 0.05),
            ln2: s.ln(d),
            ff1: s.matrix(d, n, w),
            b_ff1: s.vec(n, 0.0, 0.05),
            ff2: s.matrix(n, d, 1.0 / (n as f32).sqrt()),
            b_ff2: s.vec(d, 0.0, 0.05),
        })
        .collect();
    let weights = BundleWeights {
        token_embedding: s.matrix(config.vocab_size, d, 0.5),
        position_embedding: s.matrix(config.max_positions, d, 0.1),
        layers,
        ln_f: s.ln(d),
    };
    let bundle = ModelBundle::from_parts(config, weights, tokenizer);
    let report = validate_bundle(&bundle);
    if !report.all_passed() {
        let msgs: Vec<_> = report.failures().map(|c| c.message.clone().unwrap_or_else(|| c.check.clone())).collect();
        return Err(Error::Validation(msgs.join("; ")));
    }
    Ok(bundle)
}

/// [`random_bundle`] on [`toy_config`].
pub fn toy_bundle(seed: u64) -> ModelBundle {
    random_bundle(toy_config(), seed).expect("toy configuration is valid")
}
