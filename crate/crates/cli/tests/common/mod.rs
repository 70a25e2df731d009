#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

pub fn moemix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_moemix"))
        .args(args)
        .output()
        .expect("spawn moemix")
}

pub fn ok(args: &[&str]) -> String {
    let out = moemix(args);
    assert!(
        out.status.success(),
        "moemix {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes `n` seeded dense experts and a config for `method` into `dir`;
/// returns the config path.
pub fn setup(dir: &Path, method: &str, n: usize, k: usize, n_blocks: usize) -> PathBuf {
    let blocks = n_blocks.to_string();
    let mut experts = vec![];
    for i in 0..n {
        let name = format!("e{i}");
        let seed = i.to_string();
        ok(&[
            "init-expert", "--out", p(&dir.join(&name)), "--seed", &seed, "--d-model", "8",
            "--n-blocks", &blocks, "--n-heads", "2", "--d-ff", "12",
        ]);
        experts.push(json!({"expert_name": name, "model_id": name}));
    }
    let router_layers = match method {
        "traditional" => json!(["mlp.gate_proj", "mlp.up_proj", "mlp.down_proj"]),
        "btx" => json!(["gate_proj", "up_proj", "down_proj"]),
        _ => json!([]),
    };
    let cfg = json!({
        "moe_method": method,
        "model_type": "micro",
        "num_experts_per_tok": k,
        "stitch_freq": 1,
        "experts": experts,
        "router_layers": router_layers,
        "alpha": 0.01,
        "router_layers_index": [],
        "seed": 3,
    });
    let path = dir.join(format!("{method}.json"));
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

pub fn compose(dir: &Path, method: &str, n: usize, k: usize, n_blocks: usize) -> PathBuf {
    let cfg = setup(dir, method, n, k, n_blocks);
    let out = dir.join(format!("{method}_model"));
    ok(&["compose", "--config", p(&cfg), "--out", p(&out)]);
    out
}

pub fn schema() -> jsonschema::Validator {
    let raw = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../docs/trace.schema.json")).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&raw).unwrap()).unwrap()
}
