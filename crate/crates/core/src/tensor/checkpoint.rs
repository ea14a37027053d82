use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParameterVector, Scalar, Tensor, TensorError};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Sidecar describing a raw little-endian parameter payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamManifest {
    pub version: u32,
    pub dtype: String,
    pub total_dim: usize,
    pub sha256: String,
    pub segments: Vec<SegmentEntry>,
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TensorError {
    TensorError::Usage(format!("{}: {e}", path.display()))
}

/// Writes `stem.json` and `stem.bin`. Returns the manifest.
pub fn save_parameters<S: Scalar>(stem: &Path, params: &ParameterVector<S>) -> Result<ParamManifest, TensorError> {
    let mut payload = Vec::with_capacity(params.total_dim() * S::BYTES);
    for s in params.segments() {
        for x in s.value.data() {
            x.write_le(&mut payload);
        }
    }
    let manifest = ParamManifest {
        version: MANIFEST_VERSION,
        dtype: S::DTYPE.to_string(),
        total_dim: params.total_dim(),
        sha256: hex::encode(Sha256::digest(&payload)),
        segments: params
            .segments()
            .iter()
            .map(|s| SegmentEntry { name: s.name.clone(), shape: s.value.shape().to_vec() })
            .collect(),
    };
    let (json, bin) = paths(stem);
    if let Some(dir) = json.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(&bin, &payload).map_err(|e| io_err(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&json, e))?;
    fs::write(&json, text).map_err(|e| io_err(&json, e))?;
    Ok(manifest)
}

fn decode<T: Scalar, S: Scalar>(payload: &[u8]) -> Vec<S> {
    payload.chunks_exact(T::BYTES).map(|c| S::of(T::read_le(c).f64())).collect()
}

/// Reads a checkpoint written by [`save_parameters`], converting precision
/// when the stored dtype differs from `S`.
pub fn load_parameters<S: Scalar>(stem: &Path) -> Result<(ParameterVector<S>, ParamManifest), TensorError> {
    let (json, bin) = paths(stem);
    let text = fs::read_to_string(&json).map_err(|e| io_err(&json, e))?;
    let manifest: ParamManifest = serde_json::from_str(&text).map_err(|e| io_err(&json, e))?;
    if manifest.version != MANIFEST_VERSION {
        return Err(io_err(&json, format!("unsupported manifest version {}", manifest.version)));
    }
    let payload = fs::read(&bin).map_err(|e| io_err(&bin, e))?;
    let hash = hex::encode(Sha256::digest(&payload));
    if hash != manifest.sha256 {
        return Err(io_err(&bin, "content hash mismatch"));
    }
    let flat: Vec<S> = match manifest.dtype.as_str() {
        "f32" => decode::<f32, S>(&payload),
        "f64" => decode::<f64, S>(&payload),
        other => return Err(io_err(&json, format!("unknown dtype {other}"))),
    };
    let width = if manifest.dtype == "f32" { 4 } else { 8 };
    if flat.len() != manifest.total_dim || payload.len() != manifest.total_dim * width {
        return Err(io_err(&bin, format!("payload holds {} values, manifest says {}", flat.len(), manifest.total_dim)));
    }
    let mut params = ParameterVector::new();
    let mut off = 0;
    for seg in &manifest.segments {
        let n: usize = seg.shape.iter().product();
        if off + n > flat.len() {
            return Err(io_err(&json, "segment shapes exceed total_dim"));
        }
        params.push(seg.name.clone(), Tensor::new(seg.shape.clone(), flat[off..off + n].to_vec())?)?;
        off += n;
    }
    if off != flat.len() {
        return Err(io_err(&json, "segment shapes do not cover total_dim"));
    }
    Ok((params, manifest))
}
