//! Two-file checkpoint format.
//!
//! A checkpoint directory holds:
//!
//! * `manifest.json`: architecture, optional MoE metadata, and the ordered
//!   tensor table (`name`, `shape`, `dtype`, `byte_offset`).
//! * `tensors.bin`: no header; the raw little-endian `f32` payload of every
//!   tensor, row-major, concatenated in manifest order.
//!
//! Tensors are widened to `f64` on load. Saving the same checkpoint twice
//! produces identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::MoeMethod;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_NAME: &str = "moemix-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const TENSORS_FILE: &str = "tensors.bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Dense,
    Traditional,
    Btx,
    Bts,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Dense => "dense",
            ModelKind::Traditional => "traditional",
            ModelKind::Btx => "btx",
            ModelKind::Bts => "bts",
        }
    }
}

impl From<MoeMethod> for ModelKind {
    fn from(m: MoeMethod) -> Self {
        match m {
            MoeMethod::Traditional => ModelKind::Traditional,
            MoeMethod::Btx => ModelKind::Btx,
            MoeMethod::Bts => ModelKind::Bts,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Arch {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn check(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_blocks == 0
            || self.n_heads == 0
            || self.d_ff == 0
        {
            return Err(Error::Format(format!("arch has a zero extent: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Format(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeMeta {
    pub model_type: String,
    pub num_experts: usize,
    pub num_experts_per_tok: usize,
    pub router_layers: Vec<String>,
    pub router_layers_index: Vec<usize>,
    pub alpha: f64,
    pub stitch_freq: Option<usize>,
    pub expert_names: Vec<String>,
    pub seed: u64,
    /// Per-expert architecture under `bts`, where widths may differ from the hub.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub expert_archs: Vec<Arch>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
}

impl TensorEntry {
    pub fn byte_len(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub format_version: u32,
    pub model_kind: ModelKind,
    pub arch: Arch,
    pub moe: Option<MoeMeta>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    /// Builds a checkpoint, deriving the tensor table from `tensors`.
    pub fn new(
        model_kind: ModelKind,
        arch: Arch,
        moe: Option<MoeMeta>,
        tensors: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut ckpt = Self {
            manifest: Manifest {
                format: FORMAT_NAME.to_string(),
                format_version: FORMAT_VERSION,
                model_kind,
                arch,
                moe,
                tensors: Vec::new(),
            },
            tensors,
        };
        ckpt.rebuild_table();
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Recomputes manifest entries and offsets from the tensor map.
    pub fn rebuild_table(&mut self) {
        let mut offset = 0u64;
        self.manifest.tensors = self
            .tensors
            .iter()
            .map(|(name, t)| {
                let e = TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".to_string(),
                    byte_offset: offset,
                };
                offset += e.byte_len();
                e
            })
            .collect();
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Replaces an existing tensor with one of the same shape.
    pub fn replace(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != tensor.shape() {
            return Err(Error::DimensionMismatch {
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
                context: "checkpoint replace",
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn blob_len(&self) -> u64 {
        self.manifest.tensors.iter().map(TensorEntry::byte_len).sum()
    }

    /// Checks manifest/tensor agreement and the table layout rules.
    pub fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        if m.tensors.len() != self.tensors.len() {
            return Err(Error::InvariantViolation(format!(
                "manifest lists {} tensors, checkpoint holds {}",
                m.tensors.len(),
                self.tensors.len()
            )));
        }
        let mut expected_offset = 0u64;
        for (i, entry) in m.tensors.iter().enumerate() {
            if i > 0 && m.tensors[i - 1].name >= entry.name {
                return Err(Error::InvariantViolation(format!(
                    "tensor names not strictly sorted at '{}'",
                    entry.name
                )));
            }
            if entry.dtype != "f32" {
                return Err(Error::InvariantViolation(format!(
                    "unsupported dtype '{}' for '{}'",
                    entry.dtype, entry.name
                )));
            }
            if entry.byte_offset != expected_offset {
                return Err(Error::InvariantViolation(format!(
                    "tensor '{}' at offset {} but expected {}",
                    entry.name, entry.byte_offset, expected_offset
                )));
            }
            expected_offset += entry.byte_len();
            let t = self.tensors.get(&entry.name).ok_or_else(|| {
                Error::InvariantViolation(format!("no tensor for entry '{}'", entry.name))
            })?;
            if t.shape() != entry.shape.as_slice() {
                return Err(Error::InvariantViolation(format!(
                    "tensor '{}' has shape {:?}, manifest says {:?}",
                    entry.name,
                    t.shape(),
                    entry.shape
                )));
            }
        }
        if let Some(moe) = &m.moe {
            for entry in &m.tensors {
                if let Some(i) = expert_index(&entry.name) {
                    if i >= moe.num_experts {
                        return Err(Error::InvariantViolation(format!(
                            "'{}' names expert {i} but num_experts is {}",
                            entry.name, moe.num_experts
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of every tensor, keyed by name.
    pub fn checksums(&self) -> BTreeMap<String, String> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.clone(), hex(&t.sha256())))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save(self, dir)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        load(dir)
    }
}

/// The `<i>` of the first `experts.expert_<i>` segment pair in a tensor name.
pub fn expert_index(name: &str) -> Option<usize> {
    let segs: Vec<&str> = name.split('.').collect();
    segs.windows(2).find_map(|w| {
        if w[0] == "experts" {
            w[1].strip_prefix("expert_")?.parse().ok()
        } else {
            None
        }
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_json(manifest: &Manifest) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    bytes.push(b'\n');
    bytes
}

pub fn encode_blob(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut blob = Vec::with_capacity(ckpt.blob_len() as usize);
    for entry in &ckpt.manifest.tensors {
        let t = &ckpt.tensors[&entry.name];
        for &v in t.data() {
            let f = v as f32;
            if !f.is_finite() {
                return Err(Error::InvariantViolation(format!(
                    "value {v} in '{}' does not fit in f32",
                    entry.name
                )));
            }
            blob.extend_from_slice(&f.to_le_bytes());
        }
    }
    Ok(blob)
}

pub fn save(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    ckpt.validate()?;
    let blob = encode_blob(ckpt)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mpath = dir.join(MANIFEST_FILE);
    fs::write(&mpath, manifest_json(&ckpt.manifest)).map_err(|e| Error::io(&mpath, e))?;
    let tpath = dir.join(TENSORS_FILE);
    fs::write(&tpath, blob).map_err(|e| Error::io(&tpath, e))?;
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.format != FORMAT_NAME {
        return Err(Error::Format(format!(
            "unknown format '{}', expected '{FORMAT_NAME}'",
            manifest.format
        )));
    }
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let manifest = load_manifest(dir)?;
    let tpath = dir.join(TENSORS_FILE);
    let blob = fs::read(&tpath).map_err(|e| Error::io(&tpath, e))?;
    let expected: u64 = manifest.tensors.iter().map(TensorEntry::byte_len).sum();
    if blob.len() as u64 != expected {
        return Err(Error::Shape(format!(
            "{} is {} bytes, manifest describes {expected}",
            tpath.display(),
            blob.len()
        )));
    }
    let mut tensors = BTreeMap::new();
    for entry in &manifest.tensors {
        let start = entry.byte_offset as usize;
        let end = start + entry.byte_len() as usize;
        if end > blob.len() {
            return Err(Error::Shape(format!(
                "tensor '{}' extends past the end of the blob",
                entry.name
            )));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor '{}'", entry.name)));
        }
    }
    let ckpt = Checkpoint { manifest, tensors };
    ckpt.validate()?;
    Ok(ckpt)
}

/// Fingerprint of both checkpoint files, for byte-equality checks.
pub fn directory_digest(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for file in [MANIFEST_FILE, TENSORS_FILE] {
        let p = dir.join(file);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(hex(&h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Arch {
        Arch {
            vocab_size: 4,
            d_model: 2,
            n_blocks: 1,
            n_heads: 1,
            d_ff: 2,
        }
    }

    #[test]
    fn empty_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = Checkpoint::new(ModelKind::Dense, arch(), None, BTreeMap::new()).unwrap();
        ckpt.save(dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join(TENSORS_FILE)).unwrap().len(), 0);
        let text = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(text.contains("\"tensors\": []"));
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ckpt);
    }

    #[test]
    fn two_by_two_tensor_is_sixteen_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "w".to_string(),
            Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        );
        let ckpt = Checkpoint::new(ModelKind::Dense, arch(), None, tensors).unwrap();
        ckpt.save(dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join(TENSORS_FILE)).unwrap().len(), 16);
    }

    #[test]
    fn truncated_blob_is_a_shape_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert("a".to_string(), Tensor::full(vec![3], 0.5).unwrap());
        Checkpoint::new(ModelKind::Dense, arch(), None, tensors)
            .unwrap()
            .save(dir.path())
            .unwrap();
        let p = dir.path().join(TENSORS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 1]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Shape(_))));
    }

    #[test]
    fn bad_format_name_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        Checkpoint::new(ModelKind::Dense, arch(), None, BTreeMap::new())
            .unwrap()
            .save(dir.path())
            .unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).unwrap().replace(FORMAT_NAME, "other");
        fs::write(&p, text).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn expert_index_parsing() {
        assert_eq!(
            expert_index("blocks.0.mlp.gate_proj.experts.expert_2.weight"),
            Some(2)
        );
        assert_eq!(expert_index("experts.expert_11.tok_embeddings.weight"), Some(11));
        assert_eq!(expert_index("blocks.0.mlp.gate_proj.weight"), None);
    }

    #[test]
    fn out_of_range_expert_name_violates_invariant() {
        let mut tensors = BTreeMap::new();
        tensors.insert(
            "blocks.0.mlp.up_proj.experts.expert_3.weight".to_string(),
            Tensor::full(vec![2], 1.0).unwrap(),
        );
        let moe = MoeMeta {
            model_type: "t".into(),
            num_experts: 2,
            num_experts_per_tok: 1,
            router_layers: vec![],
            router_layers_index: vec![],
            alpha: 0.0,
            stitch_freq: None,
            expert_names: vec!["a".into(), "b".into()],
            seed: 0,
            expert_archs: vec![],
        };
        assert!(matches!(
            Checkpoint::new(ModelKind::Btx, arch(), Some(moe), tensors),
            Err(Error::InvariantViolation(_))
        ));
    }

    #[test]
    fn f32_overflow_rejected_on_save() {
        let dir = tempfile::tempdir().unwrap();
        let mut tensors = BTreeMap::new();
        tensors.insert("big".to_string(), Tensor::full(vec![1], 1e300).unwrap());
        let ckpt = Checkpoint::new(ModelKind::Dense, arch(), None, tensors).unwrap();
        assert!(matches!(
            ckpt.save(dir.path()),
            Err(Error::InvariantViolation(_))
        ));
    }
}
