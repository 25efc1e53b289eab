//! Engine logits against the reference runtime on the random-weight fixture.

use std::path::PathBuf;

use lensflow_core::dump::read_safetensors;
use lensflow_core::tensor::argmax;
use lensflow_core::{forward, load_model_bundle, verify_trace};
use serde::Deserialize;

#[derive(Deserialize)]
struct Reference {
    parity: Vec<ParityCase>,
}

#[derive(Deserialize)]
struct ParityCase {
    prompt: String,
    ids: Vec<u32>,
    argmax: u32,
}

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny-gpt2")
}

fn reference() -> Reference {
    let raw = std::fs::read_to_string(fixture_dir().join("reference.json")).unwrap();
    serde_json::from_str(&raw).unwrap()
}

fn golden(name: &str) -> (Vec<usize>, Vec<f32>) {
    let tensors = read_safetensors(&fixture_dir().join("reference_logits.safetensors")).unwrap();
    tensors
        .into_iter()
        .find(|(n, _, _)| n == name)
        .map(|(_, shape, data)| (shape, data))
        .unwrap()
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        ab += x as f64 * y as f64;
        aa += x as f64 * x as f64;
        bb += y as f64 * y as f64;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

#[test]
fn logits_match_reference_runtime() {
    let bundle = load_model_bundle(&fixture_dir()).unwrap();
    let reference = reference();
    let (shape, logits) = golden("logits");
    let vocab = shape[1];
    assert_eq!(shape[0], reference.parity.len());
    for (i, case) in reference.parity.iter().enumerate() {
        assert_eq!(bundle.tokenizer().encode(&case.prompt), case.ids, "{}", case.prompt);
        let trace = forward(&bundle, &case.ids).unwrap();
        let expected = &logits[i * vocab..(i + 1) * vocab];
        let max_diff = trace
            .logits
            .iter()
            .zip(expected)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        let cos = cosine(&trace.logits, expected);
        assert!(cos > 0.999_999, "{}: cosine {cos}", case.prompt);
        assert!(max_diff < 1e-3, "{}: max |diff| {max_diff}", case.prompt);
        assert_eq!(trace.predicted_token(), case.argmax, "{}", case.prompt);
        assert_eq!(argmax(expected) as u32, case.argmax);
    }
}

#[test]
fn block_inputs_match_reference_runtime() {
    let bundle = load_model_bundle(&fixture_dir()).unwrap();
    let reference = reference();
    let (shape, hidden) = golden("block_inputs");
    let (n_layers, d) = (shape[1], shape[2]);
    for (i, case) in reference.parity.iter().enumerate() {
        let trace = forward(&bundle, &case.ids).unwrap();
        for l in 0..n_layers {
            let offset = (i * n_layers + l) * d;
            for (a, b) in trace.residual(l).iter().zip(&hidden[offset..offset + d]) {
                assert!((a - b).abs() < 1e-4, "{} layer {l}: {a} vs {b}", case.prompt);
            }
        }
    }
}

#[test]
fn fixture_traces_satisfy_invariants() {
    let bundle = load_model_bundle(&fixture_dir()).unwrap();
    for case in reference().parity {
        let trace = forward(&bundle, &case.ids).unwrap();
        assert!(verify_trace(&trace).is_empty(), "{}", case.prompt);
    }
}
