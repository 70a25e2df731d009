//! Seeded random dense checkpoints, used as stand-in experts.

use std::collections::BTreeMap;

use crate::checkpoint::{Arch, Checkpoint, ModelKind};
use crate::error::Result;
use crate::model::{
    attn_norm_name, attn_proj_name, ffn_norm_name, proj_name, Projection, EMBEDDINGS, FINAL_NORM,
};
use crate::tensor::Tensor;

/// Derives a per-tensor seed so every tensor gets an independent stream.
pub fn tensor_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the base seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Dense model with unit-variance embeddings, `1/sqrt(fan_in)` projections
/// and unit norm gains.
pub fn random_dense(arch: Arch, seed: u64) -> Result<Checkpoint> {
    arch.check()?;
    let Arch {
        vocab_size: v,
        d_model: d,
        d_ff: f,
        ..
    } = arch;
    let mut tensors = BTreeMap::new();
    let mut gauss = |name: String, shape: Vec<usize>, std: f64| -> Result<()> {
        let t = Tensor::gaussian(shape, 0.0, std, tensor_seed(seed, &name))?;
        tensors.insert(name, t);
        Ok(())
    };
    gauss(EMBEDDINGS.into(), vec![v, d], 1.0)?;
    let sd = 1.0 / (d as f64).sqrt();
    let sf = 1.0 / (f as f64).sqrt();
    for l in 0..arch.n_blocks {
        for w in ["q", "k", "v", "o"] {
            gauss(attn_proj_name(l, w), vec![d, d], sd)?;
        }
        gauss(proj_name(l, Projection::Gate), vec![d, f], sd)?;
        gauss(proj_name(l, Projection::Up), vec![d, f], sd)?;
        gauss(proj_name(l, Projection::Down), vec![f, d], sf)?;
    }
    for l in 0..arch.n_blocks {
        tensors.insert(attn_norm_name(l), Tensor::full(vec![d], 1.0)?);
        tensors.insert(ffn_norm_name(l), Tensor::full(vec![d], 1.0)?);
    }
    tensors.insert(FINAL_NORM.into(), Tensor::full(vec![d], 1.0)?);
    Checkpoint::new(ModelKind::Dense, arch, None, tensors)
}
