//! Checkpoint directories: `manifest.json` plus one raw little-endian `f64`
//! file per weight tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config, input, Result};
use crate::network::{prepare_inference_weights, Mode, Model, NetworkSpec};
use crate::neuron::LifParams;
use crate::quant::QuantParams;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
    /// Scale-quantization parameters for inference export, when known.
    #[serde(default)]
    pub quant: Option<QuantParams>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub mode: Mode,
    pub spec: NetworkSpec,
    #[serde(default)]
    pub lif: Option<Vec<LifParams>>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `model` into a new directory; refuses to overwrite an existing
/// checkpoint. With `export_bits`, the manifest records the scale
/// parameters each tensor is exported with.
pub fn save_checkpoint(model: &Model, dir: &Path, export_bits: Option<u32>) -> Result<()> {
    if dir.join(MANIFEST).exists() {
        return config(format!("refusing to overwrite checkpoint {}", dir.display()));
    }
    fs::create_dir_all(dir)?;
    let params: Vec<Option<QuantParams>> = match export_bits {
        Some(b) => prepare_inference_weights(&model.weights, b)?.params,
        None => vec![None; model.weights.len()],
    };
    let names: Vec<&str> = model
        .spec
        .layers
        .iter()
        .filter(|l| l.kind.is_weighted())
        .map(|l| l.name.as_str())
        .collect();
    let mut tensors = Vec::with_capacity(model.weights.len());
    for (i, (w, q)) in model.weights.iter().zip(params).enumerate() {
        let name = names.get(i).copied().unwrap_or("tensor");
        let file = format!("{i:02}_{name}.bin");
        let bytes: Vec<u8> = w.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(dir.join(&file), bytes)?;
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape: w.shape().to_vec(),
            file,
            quant: q,
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        mode: model.spec.mode,
        spec: model.spec.clone(),
        lif: model.lif.clone(),
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| crate::Error::Input(format!("cannot read {}: {e}", path.display())))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| crate::Error::Input(format!("invalid manifest {}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return input(format!("unsupported checkpoint format version {}", m.format_version));
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let m = read_manifest(dir)?;
    m.spec.validate()?;
    let shapes = m.spec.weight_shapes();
    if shapes.len() != m.tensors.len() {
        return input(format!("manifest lists {} tensors, network needs {}", m.tensors.len(), shapes.len()));
    }
    let mut weights = Vec::with_capacity(shapes.len());
    for (entry, shape) in m.tensors.iter().zip(&shapes) {
        if &entry.shape != shape {
            return input(format!("tensor {} has shape {:?}, expected {shape:?}", entry.name, entry.shape));
        }
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.contains("..") {
            return input(format!("tensor file name {:?} must be a plain file name", entry.file));
        }
        let raw = fs::read(dir.join(&entry.file))?;
        let n: usize = shape.iter().product();
        if raw.len() != n * 8 {
            return input(format!("tensor file {} has {} bytes, expected {}", entry.file, raw.len(), n * 8));
        }
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        weights.push(Tensor::new(shape.clone(), data)?);
    }
    if let Some(lif) = &m.lif {
        if lif.len() != m.spec.spiking_layers().len() {
            return input("LIF parameter count differs from the number of spiking layers");
        }
        for p in lif {
            p.validate()?;
        }
    }
    Ok(Model {
        spec: m.spec.with_mode(m.mode),
        weights,
        lif: m.lif,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_cnn32h;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = Model::init(build_cnn32h(24, 3).unwrap().with_mode(Mode::Snn), 4);
        // computed values exercise the last bit of the JSON float parser
        m.lif = Some(
            (1..=4)
                .map(|k| LifParams::new(1.0 - 0.0713 / k as f64, (k as f64).sqrt() * 0.3171).unwrap())
                .collect(),
        );
        let path = dir.path().join("ck");
        save_checkpoint(&m, &path, Some(6)).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, m);
        let man = read_manifest(&path).unwrap();
        assert!(man.tensors.iter().all(|t| t.quant.is_some()));
        assert!(save_checkpoint(&m, &path, None).is_err());
    }

    #[test]
    fn truncated_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = Model::init(build_cnn32h(24, 3).unwrap(), 4);
        let path = dir.path().join("ck");
        save_checkpoint(&m, &path, None).unwrap();
        let man = read_manifest(&path).unwrap();
        let f = path.join(&man.tensors[0].file);
        let raw = fs::read(&f).unwrap();
        fs::write(&f, &raw[..raw.len() - 8]).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap_err().kind(), "input");
    }
}
