//! Checkpoint loading and validation.

use std::path::{Path, PathBuf};

use lensflow_core::dump::{read_safetensors, write_safetensors};
use lensflow_core::toy::toy_bundle;
use lensflow_core::weights::{write_checkpoint, WEIGHTS_FILE};
use lensflow_core::{forward, load_model_bundle, validate_bundle, Error, ModelBundle, ModelConfig};

fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny-gpt2")
}

fn gpt2_config(n_layer: usize, n_embd: usize, n_head: usize) -> ModelConfig {
    let raw = format!(
        r#"{{"n_layer": {n_layer}, "n_head": {n_head}, "n_embd": {n_embd}, "n_inner": null,
            "vocab_size": 50257, "n_positions": 1024, "layer_norm_epsilon": 1e-5}}"#
    );
    ModelConfig::from_json_str(&raw).unwrap()
}

#[test]
fn published_configs_have_expected_sizes() {
    let small = gpt2_config(12, 768, 12);
    assert_eq!((small.n_layers, small.n_heads, small.d_model, small.d_mlp), (12, 12, 768, 3072));
    assert_eq!(small.head_dim(), 64);
    assert_eq!(small.parameter_count(), 124_439_808);
    let medium = gpt2_config(24, 1024, 16);
    assert_eq!((medium.parameter_count() as f64 / 1e6).round(), 355.0);
}

#[test]
fn loads_the_fixture() {
    let bundle = load_model_bundle(&fixture_dir()).unwrap();
    let cfg = bundle.config();
    assert_eq!(
        (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.d_mlp, cfg.vocab_size, cfg.max_positions),
        (2, 4, 32, 128, 50257, 64)
    );
    assert!(validate_bundle(&bundle).all_passed());
    assert_eq!(bundle.parameter_count(), cfg.parameter_count());
    assert_eq!(bundle.source(), Some(fixture_dir().as_path()));
}

#[test]
fn loading_twice_is_bit_identical() {
    let a = load_model_bundle(&fixture_dir()).unwrap();
    let b = load_model_bundle(&fixture_dir()).unwrap();
    for ((na, ta), (nb, tb)) in a.tensors().iter().zip(b.tensors().iter()) {
        assert_eq!(na, nb);
        let bits_a: Vec<u32> = ta.data.iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u32> = tb.data.iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "{na}");
    }
}

fn same_weights(a: &ModelBundle, b: &ModelBundle) {
    assert_eq!(a.config(), b.config());
    assert_eq!(a.weights(), b.weights());
}

#[test]
fn written_checkpoints_load_back() {
    let toy = toy_bundle(3);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&toy, dir.path()).unwrap();
    let loaded = load_model_bundle(dir.path()).unwrap();
    same_weights(&toy, &loaded);
    assert_eq!(loaded.tokenizer().encode("abba"), toy.tokenizer().encode("abba"));
    let ids = toy.tokenizer().encode("hello there");
    assert_eq!(forward(&toy, &ids).unwrap(), forward(&loaded, &ids).unwrap());
}

fn rewrite_tensors(dir: &Path, edit: impl Fn(&str, &mut Vec<usize>, &mut Vec<f32>)) {
    let path = dir.join(WEIGHTS_FILE);
    let mut tensors = read_safetensors(&path).unwrap();
    for (name, shape, data) in &mut tensors {
        edit(name, shape, data);
    }
    write_safetensors(&path, &tensors).unwrap();
}

fn transpose(shape: &mut Vec<usize>, data: &mut Vec<f32>) {
    let (r, c) = (shape[0], shape[1]);
    let mut out = vec![0.0; data.len()];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    *data = out;
    *shape = vec![c, r];
}

#[test]
fn linear_layout_is_transposed_on_load() {
    let toy = toy_bundle(8);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&toy, dir.path()).unwrap();
    rewrite_tensors(dir.path(), |name, shape, data| {
        if name.starts_with("h.") && name.ends_with(".weight") && shape.len() == 2 {
            transpose(shape, data);
        }
    });
    let loaded = load_model_bundle(dir.path()).unwrap();
    same_weights(&toy, &loaded);
}

#[test]
fn prefixed_names_are_accepted() {
    let toy = toy_bundle(2);
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&toy, dir.path()).unwrap();
    let path = dir.path().join(WEIGHTS_FILE);
    let renamed: Vec<_> = read_safetensors(&path)
        .unwrap()
        .into_iter()
        .map(|(n, s, d)| (format!("transformer.{n}"), s, d))
        .collect();
    write_safetensors(&path, &renamed).unwrap();
    same_weights(&toy, &load_model_bundle(dir.path()).unwrap());
}

#[test]
fn transposed_tensor_is_named_in_the_error() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&toy_bundle(1), dir.path()).unwrap();
    rewrite_tensors(dir.path(), |name, shape, data| {
        if name == "h.1.mlp.c_fc.weight" {
            transpose(shape, data);
        }
    });
    let err = load_model_bundle(dir.path()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("h.1.mlp.c_fc.weight"), "{msg}");
    assert!(msg.contains("[8, 16]"), "{msg}");
}

#[test]
fn missing_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&toy_bundle(1), dir.path()).unwrap();
    std::fs::remove_file(dir.path().join("merges.txt")).unwrap();
    let err = load_model_bundle(dir.path()).unwrap_err();
    assert!(matches!(err, Error::Load { .. }), "{err:?}");
    assert!(err.to_string().contains("merges.txt"), "{err}");

    let empty = tempfile::tempdir().unwrap();
    let err = load_model_bundle(empty.path()).unwrap_err();
    assert!(err.to_string().contains("config.json"), "{err}");
}

#[test]
fn unreadable_config_is_a_parse_error() {
    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&toy_bundle(1), dir.path()).unwrap();
    std::fs::write(dir.path().join("config.json"), "{ not json").unwrap();
    assert!(matches!(load_model_bundle(dir.path()), Err(Error::Parse { .. })));
}

#[test]
fn indivisible_heads_fail_validation() {
    let toy = toy_bundle(1);
    let mut cfg = toy.config().clone();
    cfg.n_heads = 3;
    let bad = ModelBundle::from_parts(cfg, toy.weights().clone(), toy.tokenizer().clone());
    let report = validate_bundle(&bad);
    assert!(!report.all_passed());
    assert!(report
        .failures()
        .any(|c| c.message.as_deref().unwrap_or("").contains("d mod h != 0")));

    let dir = tempfile::tempdir().unwrap();
    write_checkpoint(&toy, dir.path()).unwrap();
    let raw = std::fs::read_to_string(dir.path().join("config.json")).unwrap();
    std::fs::write(dir.path().join("config.json"), raw.replace("\"n_head\": 2", "\"n_head\": 3")).unwrap();
    let err = load_model_bundle(dir.path()).unwrap_err();
    assert!(err.to_string().contains("d mod h != 0"), "{err}");
}

#[test]
fn non_positive_epsilon_fails_validation() {
    let toy = toy_bundle(1);
    let mut cfg = toy.config().clone();
    cfg.ln_epsilon = 0.0;
    let bad = ModelBundle::from_parts(cfg, toy.weights().clone(), toy.tokenizer().clone());
    assert!(validate_bundle(&bad)
        .failures()
        .any(|c| c.message.as_deref().unwrap_or("").starts_with("epsilon must be positive")));
}

#[test]
fn valid_bundle_passes_every_check() {
    let report = validate_bundle(&toy_bundle(1));
    assert!(report.all_passed());
    assert!(report.checks.len() > 16 * 2);
}
