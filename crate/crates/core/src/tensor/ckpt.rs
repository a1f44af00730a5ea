//! `.ckpt` parameter files: a JSON manifest line describing names, shapes
//! and trainability, followed by one flat little-endian f32 blob.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TensorError;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    entries: Vec<CheckpointEntry>,
    dtype: String,
}

/// Saves parameters in manifest order. Values are quantized to f32.
pub fn save_checkpoint(
    path: &Path,
    params: &[(CheckpointEntry, &[f64])],
) -> Result<(), TensorError> {
    for (entry, data) in params {
        let want: usize = entry.shape.iter().product();
        if want != data.len() {
            return Err(TensorError::Checkpoint(format!(
                "{}: shape {:?} vs {} values",
                entry.name,
                entry.shape,
                data.len()
            )));
        }
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let manifest = Manifest {
        entries: params.iter().map(|(e, _)| e.clone()).collect(),
        dtype: "f32".into(),
    };
    serde_json::to_writer(&mut w, &manifest)
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    w.write_all(b"\n")?;
    for (_, data) in params {
        for &v in *data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Loads a checkpoint, widening values back to f64.
pub fn load_checkpoint(path: &Path) -> Result<Vec<(CheckpointEntry, Vec<f64>)>, TensorError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    let manifest: Manifest = serde_json::from_str(line.trim_end())
        .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
    if manifest.dtype != "f32" {
        return Err(TensorError::Checkpoint(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in manifest.entries {
        let n: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; n * 4];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        out.push((entry, data));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(TensorError::Checkpoint(format!(
            "{} trailing bytes after blob",
            rest.len()
        )));
    }
    Ok(out)
}
