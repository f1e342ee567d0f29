//! Checkpoint files: one JSON manifest line followed by a blob of
//! little-endian `f64` values.
//!
//! Gate matrices are stored raw (before the sigmoid) under their parameter
//! names, next to the base weights.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{ArchSpec, Model};
use crate::tensor::Tensor;
use crate::wf::{wf_wrap_with_bounds, LayerSelection, WfModel};

pub const FORMAT_VERSION: u32 = 1;
const FORMAT_NAME: &str = "wfnet-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateInfo {
    /// Names of the wrapped base layers.
    pub layers: Vec<String>,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub masking: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub arch: ArchSpec,
    pub gates: Option<GateInfo>,
    pub tensors: Vec<TensorEntry>,
    pub blob_len: usize,
    /// Hex SHA-256 of the blob.
    pub sha256: String,
}

/// A loaded model, plain or gated.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    Plain(Model),
    Gated(WfModel),
}

impl Checkpoint {
    pub fn into_plain(self) -> Result<Model> {
        match self {
            Checkpoint::Plain(m) => Ok(m),
            Checkpoint::Gated(_) => Err(Error::Checkpoint("expected a plain model, found a gated one".into())),
        }
    }

    pub fn into_gated(self) -> Result<WfModel> {
        match self {
            Checkpoint::Gated(m) => Ok(m),
            Checkpoint::Plain(_) => Err(Error::Checkpoint("expected a gated model, found a plain one".into())),
        }
    }
}

fn encode(arch: ArchSpec, gates: Option<GateInfo>, tensors: Vec<(&str, &Tensor)>) -> Result<Vec<u8>> {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        entries.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: blob.len() });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT_NAME.into(),
        version: FORMAT_VERSION,
        arch,
        gates,
        tensors: entries,
        blob_len: blob.len(),
        sha256: hex::encode(Sha256::digest(&blob)),
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&blob);
    Ok(out)
}

/// Serialize a plain model.
pub fn save_model(model: &Model) -> Result<Vec<u8>> {
    encode(model.spec(), None, model.store().iter().map(|(_, p)| (p.name(), p.value())).collect())
}

/// Serialize a gated model, including its raw gate matrices.
pub fn save_gated(model: &WfModel) -> Result<Vec<u8>> {
    let first = model.layers().first().ok_or_else(|| Error::Checkpoint("gated model without layers".into()))?;
    let gates = GateInfo {
        layers: model.layers().iter().map(|l| l.name.clone()).collect(),
        clip_lo: first.gate_weights.clip_lo,
        clip_hi: first.gate_weights.clip_hi,
        masking: model.masking_enabled(),
    };
    encode(model.base().spec(), Some(gates), model.store().iter().map(|(_, p)| (p.name(), p.value())).collect())
}

/// Split `bytes` into its manifest and checked blob.
pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::Checkpoint(format!("not a checkpoint: format `{}`", manifest.format)));
    }
    if manifest.version != FORMAT_VERSION {
        return Err(Error::CheckpointVersion { found: manifest.version, supported: FORMAT_VERSION });
    }
    let blob = &bytes[nl + 1..];
    if blob.len() != manifest.blob_len {
        return Err(Error::Checkpoint(format!(
            "blob is {} bytes, manifest declares {}{}",
            blob.len(),
            manifest.blob_len,
            if blob.len() < manifest.blob_len { " (truncated)" } else { "" }
        )));
    }
    if hex::encode(Sha256::digest(blob)) != manifest.sha256 {
        return Err(Error::CheckpointChecksum);
    }
    let mut expected = 0;
    for t in &manifest.tensors {
        let bytes = t.shape.iter().product::<usize>().checked_mul(8);
        let end = bytes.and_then(|b| t.offset.checked_add(b));
        match end {
            Some(end) if t.offset == expected && end <= blob.len() => expected = end,
            _ => return Err(Error::CheckpointOffset { name: t.name.clone(), offset: t.offset, blob_len: blob.len() }),
        }
    }
    if expected != blob.len() {
        return Err(Error::Checkpoint(format!("tensors cover {expected} of {} blob bytes", blob.len())));
    }
    Ok((manifest, blob))
}

fn decode_tensors(manifest: &Manifest, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    manifest
        .tensors
        .iter()
        .map(|t| {
            let n: usize = t.shape.iter().product();
            let data = blob[t.offset..t.offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            Ok((t.name.clone(), Tensor::new(t.shape.clone(), data)?))
        })
        .collect()
}

/// Rebuild the model a checkpoint describes. Nothing is returned unless every
/// tensor was read and matched.
pub fn load_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (manifest, blob) = read_manifest(bytes)?;
    let tensors = decode_tensors(&manifest, blob)?;
    let mut base = Model::new(manifest.arch, 0)?;
    let Some(gates) = manifest.gates else {
        if tensors.len() != base.store().len() {
            return Err(Error::Checkpoint(format!(
                "{} tensors for a model with {} parameters",
                tensors.len(),
                base.store().len()
            )));
        }
        base.load_params(tensors.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        return Ok(Checkpoint::Plain(base));
    };
    let mut model =
        wf_wrap_with_bounds(base, &LayerSelection::Named(gates.layers.clone()), gates.clip_lo, gates.clip_hi)?;
    if tensors.len() != model.store().len() {
        return Err(Error::Checkpoint(format!(
            "{} tensors for a gated model with {} parameters",
            tensors.len(),
            model.store().len()
        )));
    }
    for (name, t) in tensors {
        let id = model.store().find(&name).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
        model.store_mut().set_value(id, t)?;
    }
    model.set_masking(gates.masking);
    Ok(Checkpoint::Gated(model))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_file(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    load_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ArchId;
    use crate::wf::wf_wrap;

    fn cnn() -> Model {
        Model::new(ArchSpec::new(ArchId::SmallCnn, 5, 16).unwrap(), 3).unwrap()
    }

    fn gated() -> WfModel {
        let mut m = wf_wrap(cnn(), &LayerSelection::Default).unwrap();
        let a = m.layers()[1].gate_biases.clone();
        a.row_mut(m.store_mut(), 2)[7] = -1.234567890123;
        m
    }

    fn same_values(a: &crate::autodiff::ParamStore, b: &crate::autodiff::ParamStore) {
        assert_eq!(a.len(), b.len());
        for (_, p) in a.iter() {
            let q = b.get(b.find(p.name()).unwrap());
            assert_eq!(p.value().shape(), q.value().shape());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(p.value()), bits(q.value()), "{}", p.name());
        }
    }

    #[test]
    fn round_trips_are_bit_exact() {
        let m = cnn();
        let bytes = save_model(&m).unwrap();
        let back = load_checkpoint(&bytes).unwrap().into_plain().unwrap();
        same_values(m.store(), back.store());
        assert_eq!(save_model(&back).unwrap(), bytes);

        let g = gated();
        let bytes = save_gated(&g).unwrap();
        let back = load_checkpoint(&bytes).unwrap().into_gated().unwrap();
        same_values(g.store(), back.store());
        assert_eq!(save_gated(&back).unwrap(), bytes);
        assert!(back.masking_enabled());
    }

    #[test]
    fn gated_size_matches_architecture() {
        let g = gated();
        let bytes = save_gated(&g).unwrap();
        let params: usize = g.base().store().iter().filter(|(_, p)| !p.name().starts_with("wf.")).map(|(_, p)| p.value().len()).sum();
        // conv1 (8 filters) and conv2 (16) each carry weight and bias gates for 5 classes.
        let gates = 5 * 2 * (8 + 16);
        let (manifest, blob) = read_manifest(&bytes).unwrap();
        assert_eq!(blob.len(), (params + gates) * 8);
        assert_eq!(bytes.len(), blob.len() + serde_json::to_vec(&manifest).unwrap().len() + 1);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = save_gated(&gated()).unwrap();
        assert!(matches!(load_checkpoint(&bytes[..bytes.len() - 8]), Err(Error::Checkpoint(m)) if m.contains("truncated")));

        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 1;
        assert!(matches!(load_checkpoint(&flipped), Err(Error::CheckpointChecksum)));

        let (mut manifest, blob) = read_manifest(&bytes).unwrap();
        let reencode = |m: &Manifest| {
            let mut out = serde_json::to_vec(m).unwrap();
            out.push(b'\n');
            out.extend_from_slice(blob);
            out
        };
        manifest.version = 2;
        assert!(matches!(load_checkpoint(&reencode(&manifest)), Err(Error::CheckpointVersion { found: 2, .. })));
        manifest.version = FORMAT_VERSION;
        manifest.tensors[1].offset = blob.len();
        assert!(matches!(load_checkpoint(&reencode(&manifest)), Err(Error::CheckpointOffset { .. })));
        assert!(load_checkpoint(b"{}").is_err());
    }

    #[test]
    fn kind_mismatch_is_an_error() {
        let bytes = save_model(&cnn()).unwrap();
        assert!(load_checkpoint(&bytes).unwrap().into_gated().is_err());
    }
}
