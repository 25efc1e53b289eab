//! Logit lens and circuit projections.

use std::path::PathBuf;

use lensflow_core::lens::{embed_head, entropy, top_k_indices, LensProjection};
use lensflow_core::toy::{random_bundle, toy_bundle, toy_config};
use lensflow_core::weights::BundleWeights;
use lensflow_core::{forward, load_model_bundle, logit_lens, ov_project, qk_project, Lens, LensMode, ModelBundle, QkSide};
use proptest::prelude::*;

fn fixture() -> ModelBundle {
    load_model_bundle(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny-gpt2")).unwrap()
}

fn sum(p: &[f32]) -> f64 {
    p.iter().map(|&x| x as f64).sum()
}

#[test]
fn final_hidden_state_projects_to_the_prediction() {
    let bundle = fixture();
    let ids = bundle.tokenizer().encode("The capital of Japan is the city of");
    let trace = forward(&bundle, &ids).unwrap();
    let proj = logit_lens(&bundle, trace.final_hidden(), 10, Some(trace.predicted_token())).unwrap();
    assert_eq!(proj.top1(), Some(trace.predicted_token()));
    assert_eq!(proj.target.unwrap().rank, 0);
    assert!((sum(&proj.probs) - 1.0).abs() < 1e-5);
    for (a, b) in proj.probs.iter().zip(&trace.next_token_distribution) {
        assert!((a - b).abs() < 1e-7);
    }
}

#[test]
fn projections_are_well_formed() {
    let bundle = fixture();
    let ids = bundle.tokenizer().encode("When Mary and John went to the store, John gave a drink to");
    let trace = forward(&bundle, &ids).unwrap();
    let ln_v = (bundle.config().vocab_size as f64).ln();
    for l in 0..=trace.n_layers() {
        let proj = logit_lens(&bundle, trace.residual(l), 50, Some(5335)).unwrap();
        assert!((sum(&proj.probs) - 1.0).abs() < 1e-5);
        assert!(proj.entropy_nats >= 0.0 && proj.entropy_nats <= ln_v + 1e-9);
        assert!((proj.entropy_nats - entropy(&proj.probs)).abs() < 1e-4);
        for w in proj.top_k.windows(2) {
            assert!(w[0].prob > w[1].prob || (w[0].prob == w[1].prob && w[0].id < w[1].id));
        }
        let target = proj.target.unwrap();
        assert_eq!(proj.rank_of(5335), target.rank);
    }
}

#[test]
fn oversized_k_is_rejected() {
    let bundle = toy_bundle(1);
    let x = vec![0.1; 8];
    assert!(logit_lens(&bundle, &x, 289, None).is_err());
    assert!(logit_lens(&bundle, &x, 288, None).is_ok());
    assert!(logit_lens(&bundle, &[0.0; 7], 5, None).is_err());
}

#[test]
fn ov_and_qk_lift_head_vectors_to_model_width() {
    let bundle = fixture();
    let dh = bundle.config().head_dim();
    let v: Vec<f32> = (0..dh).map(|i| i as f32 * 0.1 - 0.3).collect();
    assert_eq!(ov_project(&bundle, 1, 3, &v).unwrap().len(), 32);
    assert_eq!(qk_project(&bundle, 0, 2, &v, QkSide::Query).unwrap().len(), 32);
    assert!(ov_project(&bundle, 0, 4, &v).is_err());
    assert!(qk_project(&bundle, 0, 4, &v, QkSide::Key).is_err());
    assert!(ov_project(&bundle, 2, 0, &v).is_err());
    assert!(ov_project(&bundle, 0, 0, &v[1..]).is_err());
}

#[test]
fn ov_uses_the_head_rows_of_w_o() {
    let bundle = toy_bundle(3);
    let (d, dh) = (bundle.config().d_model, bundle.config().head_dim());
    let v = [0.5, -1.0, 2.0, 0.25];
    let w_o = &bundle.layer(1).w_o;
    let out = ov_project(&bundle, 1, 1, &v).unwrap();
    for c in 0..d {
        let expected: f32 = (0..dh).map(|r| v[r] * w_o.get(dh + r, c)).sum();
        assert!((out[c] - expected).abs() < 1e-6);
    }
    // equal to the full concat product with other heads zeroed
    let padded = embed_head(&bundle, 1, &v);
    for c in 0..d {
        let full: f32 = (0..d).map(|r| padded[r] * w_o.get(r, c)).sum();
        assert!((out[c] - full).abs() < 1e-6);
    }
}

#[test]
fn qk_reads_queries_through_keys_and_keys_through_queries() {
    let bundle = toy_bundle(4);
    let (d, dh) = (bundle.config().d_model, bundle.config().head_dim());
    let v = [0.5, -1.0, 2.0, 0.25];
    let lw = bundle.layer(0);
    let q = qk_project(&bundle, 0, 1, &v, QkSide::Query).unwrap();
    let k = qk_project(&bundle, 0, 1, &v, QkSide::Key).unwrap();
    for c in 0..d {
        let via_k: f32 = (0..dh).map(|r| v[r] * lw.w_k.get(c, dh + r)).sum();
        let via_q: f32 = (0..dh).map(|r| v[r] * lw.w_q.get(c, dh + r)).sum();
        assert!((q[c] - via_k).abs() < 1e-6);
        assert!((k[c] - via_q).abs() < 1e-6);
    }
}

#[test]
fn zero_head_vector_projects_like_zero() {
    let bundle = toy_bundle(5);
    let zero = ov_project(&bundle, 0, 0, &[0.0; 4]).unwrap();
    assert!(zero.iter().all(|&x| x == 0.0));
    let a = logit_lens(&bundle, &zero, 5, None).unwrap();
    let b = logit_lens(&bundle, &[0.0; 8], 5, None).unwrap();
    assert_eq!(a, b);
    let qz = qk_project(&bundle, 1, 1, &[0.0; 4], QkSide::Query).unwrap();
    assert_eq!(logit_lens(&bundle, &qz, 5, None).unwrap(), b);
}

fn with_zero_final_shift(seed: u64) -> ModelBundle {
    let toy = random_bundle(toy_config(), seed).unwrap();
    let mut weights: BundleWeights = toy.weights().clone();
    weights.ln_f.shift.fill(0.0);
    ModelBundle::from_parts(toy.config().clone(), weights, toy.tokenizer().clone())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn lens_ignores_positive_scale_without_shift(
        x in prop::collection::vec(-3.0f32..3.0, 8),
        c in 0.25f32..8.0,
        seed in 0u64..50,
    ) {
        let norm: f32 = x.iter().map(|v| v * v).sum::<f32>().sqrt();
        prop_assume!(norm > 0.5);
        let bundle = with_zero_final_shift(seed);
        let scaled: Vec<f32> = x.iter().map(|v| v * c).collect();
        let a = logit_lens(&bundle, &x, 10, None).unwrap();
        let b = logit_lens(&bundle, &scaled, 10, None).unwrap();
        // layer-norm epsilon makes the normalisation only approximately scale free
        for (p, q) in a.probs.iter().zip(&b.probs) {
            prop_assert!((p - q).abs() < 1e-5);
        }
    }

    #[test]
    fn circuits_are_linear(
        a in prop::collection::vec(-2.0f32..2.0, 4),
        b in prop::collection::vec(-2.0f32..2.0, 4),
        layer in 0usize..2,
        head in 0usize..2,
    ) {
        let bundle = toy_bundle(6);
        let ab: Vec<f32> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        for project in [
            |bd: &ModelBundle, l, h, v: &[f32]| ov_project(bd, l, h, v).unwrap(),
            |bd: &ModelBundle, l, h, v: &[f32]| qk_project(bd, l, h, v, QkSide::Query).unwrap(),
            |bd: &ModelBundle, l, h, v: &[f32]| qk_project(bd, l, h, v, QkSide::Key).unwrap(),
        ] {
            let lhs = project(&bundle, layer, head, &ab);
            let pa = project(&bundle, layer, head, &a);
            let pb = project(&bundle, layer, head, &b);
            for i in 0..lhs.len() {
                prop_assert!((lhs[i] - (pa[i] + pb[i])).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn ranks_agree_with_top_k(logits in prop::collection::vec(-4.0f32..4.0, 1..60), k in 1usize..10) {
        let k = k.min(logits.len());
        let proj = LensProjection::from_logits(&logits, k, None).unwrap();
        let top = top_k_indices(&logits, k);
        prop_assert_eq!(proj.top_k.iter().map(|t| t.id).collect::<Vec<_>>(), top.clone());
        for (r, id) in top.iter().enumerate() {
            prop_assert_eq!(proj.rank_of(*id), r);
        }
        prop_assert!((sum(&proj.probs) - 1.0).abs() < 1e-5);
    }
}

#[test]
fn diagnostic_mode_skips_the_final_norm() {
    let bundle = toy_bundle(7);
    let x = [0.3, -0.2, 1.5, 0.0, -2.0, 0.7, 0.1, 0.9];
    let with = Lens::new(&bundle).logits(&x).unwrap();
    let without = Lens::with_mode(&bundle, LensMode::NoFinalNorm).logits(&x).unwrap();
    assert_ne!(with, without);
    let e = bundle.token_embedding();
    for (id, &l) in without.iter().enumerate() {
        let direct: f32 = (0..8).map(|c| x[c] * e.get(id, c)).sum();
        assert!((l - direct).abs() < 1e-5);
    }
}

#[test]
fn batched_top_k_matches_single_projections() {
    let bundle = fixture();
    let lens = Lens::new(&bundle);
    let xs: Vec<Vec<f32>> = (0..70).map(|i| (0..32).map(|c| ((i * 31 + c * 7) % 13) as f32 - 6.0).collect()).collect();
    let batched = lens.top_k_batch(&xs, 50).unwrap();
    for (x, top) in xs.iter().zip(&batched) {
        assert_eq!(&lens.top_k(x, 50).unwrap(), top);
    }
}
