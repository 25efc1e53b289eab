//! Straight-line f64 reference forward pass shared by the integration suites.

use lensflow_core::tensor::Matrix;
use lensflow_core::ModelBundle;

/// Straight-line f64 GPT-2 forward pass over the analysed position only,
/// written from the textbook formulas with no shared helpers.
pub struct Oracle {
    pub block_inputs: Vec<Vec<f64>>,
    pub head_outputs: Vec<Vec<Vec<f64>>>,
    pub block_outputs: Vec<Vec<f64>>,
    pub logits: Vec<f64>,
}

fn ln(x: &[f64], g: &[f32], b: &[f32], eps: f32) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mu) / (var + eps as f64).sqrt() * g[i] as f64 + b[i] as f64)
        .collect()
}

fn affine(x: &[f64], w: &Matrix, b: &[f32]) -> Vec<f64> {
    (0..w.cols())
        .map(|c| b[c] as f64 + (0..w.rows()).map(|r| x[r] * w.get(r, c) as f64).sum::<f64>())
        .collect()
}

pub fn oracle(bundle: &ModelBundle, ids: &[u32]) -> Oracle {
    let cfg = bundle.config();
    let w = bundle.weights();
    let (d, h) = (cfg.d_model, cfg.n_heads);
    let dh = d / h;
    let t = ids.len();
    let mut x: Vec<Vec<f64>> = ids
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            (0..d)
                .map(|c| w.token_embedding.get(id as usize, c) as f64 + w.position_embedding.get(p, c) as f64)
                .collect()
        })
        .collect();
    let mut out = Oracle {
        block_inputs: vec![],
        head_outputs: vec![],
        block_outputs: vec![],
        logits: vec![],
    };
    for lw in &w.layers {
        out.block_inputs.push(x[t - 1].clone());
        let a: Vec<Vec<f64>> = x.iter().map(|r| ln(r, &lw.ln1.scale, &lw.ln1.shift, cfg.ln_epsilon)).collect();
        let q: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &lw.w_q, &lw.b_q)).collect();
        let k: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &lw.w_k, &lw.b_k)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|r| affine(r, &lw.w_v, &lw.b_v)).collect();
        let mut concat = vec![vec![0.0; d]; t];
        for (p, row) in concat.iter_mut().enumerate() {
            for j in 0..h {
                let s = j * dh;
                let scores: Vec<f64> = (0..=p)
                    .map(|i| (0..dh).map(|c| q[p][s + c] * k[i][s + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
                for (i, sc) in scores.iter().enumerate() {
                    let p_i = (sc - mx).exp() / z;
                    for c in 0..dh {
                        row[s + c] += p_i * v[i][s + c];
                    }
                }
            }
        }
        out.head_outputs
            .push((0..h).map(|j| concat[t - 1][j * dh..(j + 1) * dh].to_vec()).collect());
        for p in 0..t {
            let attn = affine(&concat[p], &lw.w_o, &lw.b_o);
            let mid: Vec<f64> = x[p].iter().zip(&attn).map(|(a, b)| a + b).collect();
            let m_in = ln(&mid, &lw.ln2.scale, &lw.ln2.shift, cfg.ln_epsilon);
            let pre = affine(&m_in, &lw.ff1, &lw.b_ff1);
            let act: Vec<f64> = pre
                .iter()
                .map(|&u| 0.5 * u * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3))).tanh()))
                .collect();
            let mlp = affine(&act, &lw.ff2, &lw.b_ff2);
            x[p] = mid.iter().zip(&mlp).map(|(a, b)| a + b).collect();
        }
        out.block_outputs.push(x[t - 1].clone());
    }
    let f = ln(&x[t - 1], &w.ln_f.scale, &w.ln_f.shift, cfg.ln_epsilon);
    out.logits = (0..cfg.vocab_size)
        .map(|id| (0..d).map(|c| f[c] * w.token_embedding.get(id, c) as f64).sum())
        .collect();
    out
}

#[allow(dead_code)]
pub fn assert_close(a: &[f32], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((*x as f64 - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

