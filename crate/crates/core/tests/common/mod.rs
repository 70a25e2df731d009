#![allow(dead_code)]

use moemix::checkpoint::{Arch, Checkpoint};
use moemix::compose::compose;
use moemix::model::init::random_dense;
use moemix::model::RouteSite;
use moemix::{BtsModel, MoeConfig, MoeModel, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn arch(vocab_size: usize, d_model: usize, n_blocks: usize, n_heads: usize, d_ff: usize) -> Arch {
    Arch {
        vocab_size,
        d_model,
        n_blocks,
        n_heads,
        d_ff,
    }
}

pub fn experts(arch: Arch, n: usize, seed: u64) -> Vec<Checkpoint> {
    (0..n)
        .map(|i| random_dense(arch, seed.wrapping_mul(1000) + i as u64).unwrap())
        .collect()
}

pub fn config(method: &str, n: usize, k: usize, seed: u64) -> MoeConfig {
    let experts: Vec<_> = (0..n)
        .map(|i| json!({"expert_name": format!("expert_{i}"), "model_id": format!("expert_{i}")}))
        .collect();
    let router_layers = if method == "traditional" {
        json!(["mlp.gate_proj", "mlp.up_proj", "mlp.down_proj"])
    } else {
        json!(["gate_proj", "up_proj", "down_proj"])
    };
    let doc = json!({
        "moe_method": method,
        "stitch_freq": 1,
        "model_type": "micro",
        "num_experts_per_tok": k,
        "experts": experts,
        "router_layers": router_layers,
        "alpha": 0.0,
        "router_layers_index": [],
        "seed": seed,
    });
    MoeConfig::from_json(&doc.to_string()).unwrap()
}

pub fn composed(method: &str, arch: Arch, n: usize, k: usize, seed: u64) -> (Checkpoint, MoeModel) {
    let (ckpt, _) = compose(&config(method, n, k, seed), &experts(arch, n, seed)).unwrap();
    let model = MoeModel::from_checkpoint(&ckpt).unwrap();
    (ckpt, model)
}

/// Replaces every router with `gaussian(0, std)` so routing is far from uniform.
pub fn randomize_routers(model: &mut MoeModel, std: f64, seed: u64) {
    let routers: Vec<(usize, RouteSite, Vec<usize>)> = model
        .blocks
        .iter()
        .enumerate()
        .flat_map(|(l, b)| {
            b.ffn
                .routers()
                .into_iter()
                .map(move |(s, w)| (l, s, w.shape().to_vec()))
        })
        .collect();
    for (i, (l, s, shape)) in routers.into_iter().enumerate() {
        let t = Tensor::gaussian(shape, 0.0, std, seed * 97 + i as u64).unwrap();
        model.set_router(l, s, t).unwrap();
    }
}

pub fn bts(arch: Arch, n_total: usize, freq: usize, seed: u64) -> (Checkpoint, BtsModel) {
    let mut cfg = config("bts", n_total, 1, seed);
    cfg.stitch_freq = Some(freq);
    cfg.router_layers.clear();
    let (ckpt, _) = compose(&cfg, &experts(arch, n_total, seed)).unwrap();
    let model = BtsModel::from_checkpoint(&ckpt).unwrap();
    (ckpt, model)
}

/// Replaces every stitch tensor with `gaussian(0, std)`, keeping biases.
pub fn randomize_stitches(model: &mut BtsModel, std: f64, seed: u64) {
    let params: Vec<(String, Vec<usize>)> = model
        .stitch_params()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for (i, (name, shape)) in params.into_iter().enumerate() {
        let t = Tensor::gaussian(shape, 0.0, std, seed * 131 + i as u64).unwrap();
        model.set_stitch_param(&name, t).unwrap();
    }
}

pub fn random_ids(vocab: usize, len: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
}

/// Experts branched from one seed model: `base + eps · gaussian` per tensor.
pub fn branched_experts(arch: Arch, n: usize, eps: f64, seed: u64) -> Vec<Checkpoint> {
    let base = random_dense(arch, seed).unwrap();
    (0..n)
        .map(|i| {
            let mut c = base.clone();
            let names: Vec<String> = c.tensors.keys().cloned().collect();
            for (j, name) in names.iter().enumerate() {
                let t = &c.tensors[name];
                let noise = Tensor::gaussian(t.shape().to_vec(), 0.0, eps, seed * 7919 + (i * 1000 + j) as u64).unwrap();
                let v = t.add(&noise).unwrap();
                c.replace(name, v).unwrap();
            }
            c
        })
        .collect()
}
