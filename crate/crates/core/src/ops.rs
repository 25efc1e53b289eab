//! Elementwise numerics shared by the forward pass and the lens.

/// Layer normalisation with population variance:
/// `(x - mean) / sqrt(var + eps) * scale + shift`.
pub fn layer_norm(x: &[f32], scale: &[f32], shift: &[f32], eps: f32) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    layer_norm_into(x, scale, shift, eps, &mut out);
    out
}

pub fn layer_norm_into(x: &[f32], scale: &[f32], shift: &[f32], eps: f32, out: &mut [f32]) {
    debug_assert_eq!(x.len(), scale.len());
    debug_assert_eq!(x.len(), shift.len());
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps as f64).sqrt();
    for i in 0..x.len() {
        out[i] = ((x[i] as f64 - mean) * inv * scale[i] as f64 + shift[i] as f64) as f32;
    }
}

/// The tanh approximation of GELU used by the GPT-2 checkpoints.
#[inline]
pub fn gelu_tanh(x: f64) -> f64 {
    let sqrt_2_over_pi = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (sqrt_2_over_pi * (x + 0.044715 * x * x * x)).tanh())
}

/// Numerically stable softmax into `f32`, normalised in `f64`.
pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

/// Softmax over `f64` attention scores.
pub fn softmax_scores(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut exps: Vec<f64> = scores.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= total;
    }
    exps
}

/// Softmax returning `f64` probabilities (used where sums are checked tightly).
pub fn softmax_f64(logits: &[f32]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut exps: Vec<f64> = logits.iter().map(|&v| ((v - max) as f64).exp()).collect();
    let total: f64 = exps.iter().sum();
    for e in &mut exps {
        *e /= total;
    }
    exps
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_pass_oracle(x: &[f32], scale: &[f32], shift: &[f32], eps: f64) -> Vec<f64> {
        let mut mean = 0.0;
        for &v in x {
            mean += v as f64;
        }
        mean /= x.len() as f64;
        let mut var = 0.0;
        for &v in x {
            var += (v as f64 - mean) * (v as f64 - mean);
        }
        var /= x.len() as f64;
        x.iter()
            .zip(scale.iter().zip(shift))
            .map(|(&v, (&g, &b))| (v as f64 - mean) / (var + eps).sqrt() * g as f64 + b as f64)
            .collect()
    }

    #[test]
    fn zeros_stay_zero() {
        let out = layer_norm(&[0.0; 6], &[1.0; 6], &[0.0; 6], 1e-5);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unit_variance_input_is_nearly_unchanged() {
        let out = layer_norm(&[1.0, -1.0], &[1.0; 2], &[0.0; 2], 1e-5);
        assert!((out[0] - 1.0).abs() < 1e-4);
        assert!((out[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn matches_two_pass_oracle_on_random_vectors() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..50 {
            let d = rng.random_range(1..64);
            let x: Vec<f32> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let g: Vec<f32> = (0..d).map(|_| rng.random_range(0.5..1.5)).collect();
            let b: Vec<f32> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            let got = layer_norm(&x, &g, &b, 1e-5);
            let want = two_pass_oracle(&x, &g, &b, 1e-5);
            for (a, w) in got.iter().zip(&want) {
                assert!((*a as f64 - w).abs() < 1e-6, "{a} vs {w}");
            }
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_tanh(0.0), 0.0);
        // 0.5 * 1 * (1 + tanh(0.7978845608 * 1.044715)) = 0.8411920
        assert!((gelu_tanh(1.0) - 0.841_192).abs() < 1e-6);
        assert!((gelu_tanh(-1.0) + 0.158_808).abs() < 1e-6);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0, 1000.0, -5.0]);
        let s: f32 = p.iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
        assert!((p[0] - 0.5).abs() < 1e-6);
    }
}
