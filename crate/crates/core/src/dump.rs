//! Writing named-tensor containers (safetensors layout).

use std::collections::HashMap;
use std::path::Path;

use safetensors::{Dtype, View};

use crate::error::{Error, Result};

struct F32Tensor<'a> {
    shape: &'a [usize],
    bytes: Vec<u8>,
}

impl View for &F32Tensor<'_> {
    fn dtype(&self) -> Dtype {
        Dtype::F32
    }

    fn shape(&self) -> &[usize] {
        self.shape
    }

    fn data(&self) -> std::borrow::Cow<'_, [u8]> {
        std::borrow::Cow::Borrowed(&self.bytes)
    }

    fn data_len(&self) -> usize {
        self.bytes.len()
    }
}

/// Writes `f32` tensors, little-endian, to a single safetensors file.
pub fn write_safetensors(path: &Path, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let prepared: Vec<(String, F32Tensor<'_>)> = tensors
        .iter()
        .map(|(name, shape, data)| {
            debug_assert_eq!(shape.iter().product::<usize>(), data.len());
            let bytes = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            (name.clone(), F32Tensor { shape, bytes })
        })
        .collect();
    let views: Vec<(&str, &F32Tensor<'_>)> = prepared.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let metadata: Option<HashMap<String, String>> = Some(HashMap::from([("format".into(), "lensflow".into())]));
    safetensors::serialize_to_file(views, &metadata, path).map_err(|e| Error::Tensor {
        name: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Reads every `f32` tensor of a safetensors file (tests and tooling).
pub fn read_safetensors(path: &Path) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let bytes = std::fs::read(path).map_err(|source| Error::Load {
        path: path.to_path_buf(),
        source,
    })?;
    let st = safetensors::SafeTensors::deserialize(&bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut out = Vec::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(Error::Tensor {
                name,
                message: format!("expected F32, found {:?}", view.dtype()),
            });
        }
        let data = view
            .data()
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push((name, view.shape().to_vec(), data));
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}
