//! Forward pass on random toy models: brute-force oracle, determinism,
//! prefix consistency and trace verification.

use lensflow_core::toy::{random_bundle, toy_bundle, toy_config};
use lensflow_core::trace::{dump_trace, forward_at};
use lensflow_core::{forward, verify_trace, Error, Trace};
use proptest::prelude::*;

mod common;
use common::{assert_close, oracle};

#[test]
fn toy_forward_matches_brute_force_oracle() {
    for seed in 0..8 {
        let bundle = toy_bundle(seed);
        let ids: Vec<u32> = (0..(3 + seed as u32 % 9)).map(|i| (i * 37 + seed as u32 * 11) % 288).collect();
        let trace = forward(&bundle, &ids).unwrap();
        let expected = oracle(&bundle, &ids);
        let p = trace.analyzed_position;
        for (l, lt) in trace.layers.iter().enumerate() {
            assert_close(lt.block_input.row(p), &expected.block_inputs[l], 1e-6, "block input");
            for j in 0..lt.n_heads {
                assert_close(lt.head_output(p, j), &expected.head_outputs[l][j], 1e-6, "head output");
            }
            assert_close(lt.block_output.row(p), &expected.block_outputs[l], 1e-6, "block output");
        }
        assert_close(&trace.logits, &expected.logits, 1e-5, "logits");
        assert!(verify_trace(&trace).is_empty());
    }
}

#[test]
fn single_token_attends_to_itself() {
    let bundle = toy_bundle(4);
    let trace = forward(&bundle, &[42]).unwrap();
    for lt in &trace.layers {
        for j in 0..lt.n_heads {
            assert_eq!(lt.attention_row(j, 0), &[1.0]);
        }
    }
}

#[test]
fn repeated_runs_are_bit_identical() {
    let bundle = toy_bundle(5);
    let ids = [1, 100, 7, 260, 3, 3, 99];
    assert_eq!(forward(&bundle, &ids).unwrap(), forward(&bundle, &ids).unwrap());
}

#[test]
fn prefix_keeps_earlier_keys_and_values() {
    let bundle = toy_bundle(6);
    let ids = [10, 200, 33, 250, 5, 17, 80, 81];
    let full = forward(&bundle, &ids).unwrap();
    let prefix = forward(&bundle, &ids[..ids.len() - 1]).unwrap();
    for (a, b) in full.layers.iter().zip(&prefix.layers) {
        for i in 0..ids.len() - 1 {
            for (x, y) in a.keys.row(i).iter().zip(b.keys.row(i)) {
                assert!((x - y).abs() <= 1e-6);
            }
            for (x, y) in a.values.row(i).iter().zip(b.values.row(i)) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn analysed_position_selects_the_row() {
    let bundle = toy_bundle(7);
    let ids = [3, 4, 5, 6];
    let full = forward(&bundle, &ids).unwrap();
    let at1 = forward_at(&bundle, &ids, 1).unwrap();
    let prefix = forward(&bundle, &ids[..2]).unwrap();
    assert_eq!(at1.analyzed_position, 1);
    assert_eq!(at1.final_hidden(), full.layers[1].block_output.row(1));
    assert_eq!(at1.logits, prefix.logits);
    assert!(forward_at(&bundle, &ids, 4).is_err());
}

#[test]
fn rejects_bad_inputs() {
    let bundle = toy_bundle(1);
    assert!(matches!(forward(&bundle, &[]), Err(Error::EmptyInput)));
    let long = vec![1u32; toy_config().max_positions + 1];
    match forward(&bundle, &long) {
        Err(e @ Error::InputTooLong { .. }) => assert!(e.to_string().contains("32")),
        other => panic!("expected InputTooLong, got {other:?}"),
    }
    assert!(matches!(forward(&bundle, &[288]), Err(Error::TokenOutOfRange { id: 288, .. })));
}

fn sample_trace() -> Trace {
    forward(&toy_bundle(9), &[5, 6, 7, 300 % 288, 9]).unwrap()
}

#[test]
fn zeroed_attention_output_breaks_reconstruction_everywhere() {
    let mut trace = sample_trace();
    for lt in &mut trace.layers {
        lt.attn_out.data_mut().fill(0.0);
    }
    let violations = verify_trace(&trace);
    for l in 0..trace.n_layers() {
        assert!(
            violations.iter().any(|v| v.layer == Some(l) && v.check == "block reconstruction"),
            "layer {l}: {violations:?}"
        );
    }
}

#[test]
fn renormalised_row_is_reported() {
    let mut trace = sample_trace();
    let pos = trace.analyzed_position;
    let probs = &mut trace.layers[1].attention[0];
    let row = probs.row_mut(pos);
    for a in row.iter_mut() {
        *a *= 0.9;
    }
    let violations = verify_trace(&trace);
    assert!(violations
        .iter()
        .any(|v| v.layer == Some(1) && v.check == "attention rows sum to 1"));
}

#[test]
fn future_attention_is_reported() {
    let mut trace = sample_trace();
    trace.layers[0].attention[1].set(0, 2, 1e-9);
    assert!(verify_trace(&trace).iter().any(|v| v.check == "causal mask"));
}

#[test]
fn dump_writes_one_file_per_layer() {
    let trace = sample_trace();
    let dir = tempfile::tempdir().unwrap();
    dump_trace(&trace, dir.path()).unwrap();
    for l in 0..trace.n_layers() {
        let tensors = lensflow_core::dump::read_safetensors(&dir.path().join(format!("layer_{l:03}.safetensors"))).unwrap();
        let names: Vec<&str> = tensors.iter().map(|(n, _, _)| n.as_str()).collect();
        assert!(names.contains(&"block_output"), "{names:?}");
        assert!(names.contains(&"attention"), "{names:?}");
    }
    assert!(dir.path().join("final.safetensors").exists());
    assert!(dir.path().join("trace.json").exists());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_trace_verifies(seed in 0u64..1000, ids in prop::collection::vec(0u32..288, 1..20)) {
        let bundle = toy_bundle(seed);
        let trace = forward(&bundle, &ids).unwrap();
        prop_assert!(verify_trace(&trace).is_empty());
    }

    #[test]
    fn other_toy_shapes_verify(layers in 1usize..4, heads in 1usize..4, seed in 0u64..100) {
        let mut cfg = toy_config();
        cfg.n_layers = layers;
        cfg.n_heads = heads;
        cfg.d_model = 4 * heads;
        let bundle = random_bundle(cfg, seed).unwrap();
        let trace = forward(&bundle, &[1, 2, 3]).unwrap();
        prop_assert_eq!(trace.n_layers(), layers);
        prop_assert!(verify_trace(&trace).is_empty());
    }
}
