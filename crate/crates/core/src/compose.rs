//! Merges expert checkpoints into one MoE checkpoint.
//!
//! Under `traditional` and `btx`, every parameter is either *converted*
//! (matched by a `router_layers` selector in a selected block, stored once
//! per expert under `...experts.expert_<i>.weight`) or *shared* (averaged
//! elementwise over all experts). Fresh routers are added for every
//! converted block (traditional) or projection (btx).
//!
//! Under `bts` nothing is averaged: the hub is embedded under `hub.*`, each
//! remaining expert under `experts.expert_<i>.*`, and stitch tensors are
//! added at the stitch sites.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Arch, Checkpoint, ModelKind, MoeMeta};
use crate::config::{self, AlignPolicy, Diagnostic, MoeConfig, MoeMethod};
use crate::error::{Error, Result};
use crate::model::init::tensor_seed;
use crate::model::{router_name, Projection, RouteSite};
use crate::stitch;
use crate::tensor::Tensor;

pub const ROUTER_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentAction {
    pub name: String,
    pub policy_applied: AlignPolicy,
    pub shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompositionReport {
    /// Averaged parameters (output names).
    pub shared_param_names: Vec<String>,
    /// Source parameters that were split per expert.
    pub converted_param_names: Vec<String>,
    /// Namespaced per-expert output names.
    pub expert_param_names: Vec<String>,
    /// Routers or stitch tensors created during composition.
    pub new_param_names: Vec<String>,
    pub alignment_actions: Vec<AlignmentAction>,
    /// Selectors that matched no executable projection (e.g. `attn` targets).
    pub unmatched_selectors: Vec<String>,
}

impl CompositionReport {
    /// Checks that the three name sets are disjoint and cover `ckpt` exactly.
    pub fn check_coverage(&self, ckpt: &Checkpoint) -> Result<()> {
        let mut seen = BTreeMap::new();
        for name in self
            .shared_param_names
            .iter()
            .chain(&self.expert_param_names)
            .chain(&self.new_param_names)
        {
            if seen.insert(name.as_str(), ()).is_some() {
                return Err(Error::InvariantViolation(format!(
                    "'{name}' reported in more than one category"
                )));
            }
        }
        if seen.len() != ckpt.tensors.len() || ckpt.tensors.keys().any(|k| !seen.contains_key(k.as_str())) {
            return Err(Error::InvariantViolation(
                "composition report does not cover the checkpoint".into(),
            ));
        }
        Ok(())
    }
}

/// Matches one glob segment; `*` stands for any run of characters.
fn glob_segment(pattern: &str, text: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == text;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !text.starts_with(first) || !text[first.len()..].ends_with(last) {
        return false;
    }
    let mut rest = &text[first.len()..text.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// True when the selector's dotted segments match a contiguous run of the
/// name's segments.
pub fn selector_matches(selector: &str, name: &str) -> bool {
    let pat: Vec<&str> = selector.split('.').collect();
    let segs: Vec<&str> = name.split('.').collect();
    if pat.len() > segs.len() {
        return false;
    }
    segs.windows(pat.len())
        .any(|w| w.iter().zip(&pat).all(|(s, p)| glob_segment(p, s)))
}

/// Parses a canonical FFN projection name `blocks.<l>.mlp.<p>_proj.weight`.
pub fn parse_projection(name: &str) -> Option<(usize, Projection)> {
    let rest = name.strip_prefix("blocks.")?;
    let (block, tail) = rest.split_once('.')?;
    let block = block.parse().ok()?;
    let p = match tail {
        "mlp.gate_proj.weight" => Projection::Gate,
        "mlp.up_proj.weight" => Projection::Up,
        "mlp.down_proj.weight" => Projection::Down,
        _ => return None,
    };
    Some((block, p))
}

/// Decides whether a source parameter is converted into per-expert copies.
/// `indices` empty means every block.
pub fn selector_match(
    name: &str,
    selectors: &[String],
    indices: &[usize],
) -> Option<(usize, Projection)> {
    let (block, p) = parse_projection(name)?;
    if !indices.is_empty() && !indices.contains(&block) {
        return None;
    }
    selectors
        .iter()
        .any(|s| selector_matches(s, name))
        .then_some((block, p))
}

/// Loads every expert named in `config`, resolving `model_id` against
/// `base_dir`, and composes them.
pub fn compose_from_dir(config: &MoeConfig, base_dir: &Path) -> Result<(Checkpoint, CompositionReport)> {
    let diags = config::validate(config);
    if !diags.is_empty() {
        return Err(Error::Config(diags));
    }
    let experts = config
        .experts
        .iter()
        .map(|e| {
            let dir = base_dir.join(&e.model_id);
            Checkpoint::load(&dir).map_err(|err| Error::MissingExpert {
                name: e.expert_name.clone(),
                reason: err.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    compose(config, &experts)
}

/// Composes already-loaded dense expert checkpoints, aligned with
/// `config.experts`.
pub fn compose(config: &MoeConfig, experts: &[Checkpoint]) -> Result<(Checkpoint, CompositionReport)> {
    let mut diags = config::validate(config);
    if experts.len() != config.experts.len() {
        return Err(Error::MissingExpert {
            name: format!("{} checkpoints for {} experts", experts.len(), config.experts.len()),
            reason: "expert list and checkpoints differ in length".into(),
        });
    }
    let base = &experts[0].manifest.arch;
    diags.extend(config::validate_blocks(config, base.n_blocks));
    for (i, ckpt) in experts.iter().enumerate() {
        let field = format!("experts[{i}].model_id");
        let a = &ckpt.manifest.arch;
        if ckpt.manifest.model_kind != ModelKind::Dense {
            diags.push(Diagnostic::new(
                field.clone(),
                format!("expected a dense checkpoint, got {}", ckpt.manifest.model_kind.as_str()),
            ));
        }
        if a.vocab_size != base.vocab_size || a.n_blocks != base.n_blocks || a.n_heads != base.n_heads {
            diags.push(Diagnostic::new(
                field,
                "vocab_size, n_blocks and n_heads must match the base expert",
            ));
        }
    }
    if !diags.is_empty() {
        return Err(Error::Config(diags));
    }
    match config.moe_method {
        MoeMethod::Traditional | MoeMethod::Btx => compose_routed(config, experts),
        MoeMethod::Bts => compose_stitched(config, experts),
    }
}

fn moe_meta(config: &MoeConfig, expert_names: Vec<String>, expert_archs: Vec<Arch>) -> MoeMeta {
    MoeMeta {
        model_type: config.model_type.clone(),
        num_experts: config.num_experts(),
        num_experts_per_tok: config.num_experts_per_tok,
        router_layers: config.router_layers.clone(),
        router_layers_index: config.router_layers_index.clone(),
        alpha: config.alpha,
        stitch_freq: match config.moe_method {
            MoeMethod::Bts => config.stitch_freq,
            _ => None,
        },
        expert_names,
        seed: config.seed,
        expert_archs,
    }
}

fn compose_routed(config: &MoeConfig, experts: &[Checkpoint]) -> Result<(Checkpoint, CompositionReport)> {
    let n = experts.len();
    let base = &experts[0];
    for (i, ckpt) in experts.iter().enumerate().skip(1) {
        if let Some(missing) = base.tensors.keys().find(|k| !ckpt.tensors.contains_key(*k)) {
            return Err(Error::MissingExpert {
                name: config.experts[i].expert_name.clone(),
                reason: format!("lacks tensor '{missing}'"),
            });
        }
        if let Some(extra) = ckpt.tensors.keys().find(|k| !base.tensors.contains_key(*k)) {
            return Err(Error::MissingExpert {
                name: config.experts[0].expert_name.clone(),
                reason: format!("lacks tensor '{extra}'"),
            });
        }
    }

    let mut report = CompositionReport::default();
    let mut out = BTreeMap::new();
    let mut converted: BTreeMap<usize, Vec<Projection>> = BTreeMap::new();

    for name in base.tensors.keys() {
        let sources: Vec<&Tensor> = experts.iter().map(|c| &c.tensors[name]).collect();
        if let Some((block, p)) = selector_match(name, &config.router_layers, &config.router_layers_index) {
            let shape = sources[0].shape();
            if sources.iter().any(|t| t.shape() != shape) {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    shapes: sources.iter().map(|t| t.shape().to_vec()).collect(),
                });
            }
            converted.entry(block).or_default().push(p);
            report.converted_param_names.push(name.clone());
            for (e, t) in sources.into_iter().enumerate() {
                let out_name = crate::model::expert_proj_name(block, p, e);
                report.expert_param_names.push(out_name.clone());
                out.insert(out_name, t.clone());
            }
        } else {
            let (avg, action) = average(name, &sources, config.align)?;
            if let Some(a) = action {
                report.alignment_actions.push(a);
            }
            report.shared_param_names.push(name.clone());
            out.insert(name.clone(), avg);
        }
    }

    let d = base.manifest.arch.d_model;
    let mut router = |name: String| -> Result<()> {
        let t = Tensor::gaussian(vec![d, n], 0.0, ROUTER_INIT_STD, tensor_seed(config.seed, &name))?;
        report.new_param_names.push(name.clone());
        out.insert(name, t);
        Ok(())
    };
    for (&block, projs) in &converted {
        match config.moe_method {
            MoeMethod::Traditional => router(router_name(block, RouteSite::Block))?,
            MoeMethod::Btx => {
                for &p in projs {
                    router(router_name(block, p.into()))?;
                }
            }
            MoeMethod::Bts => unreachable!(),
        }
    }

    report.unmatched_selectors = config
        .router_layers
        .iter()
        .filter(|s| {
            !report
                .converted_param_names
                .iter()
                .any(|n| selector_matches(s, n))
        })
        .cloned()
        .collect();
    report.expert_param_names.sort();
    report.new_param_names.sort();

    let names = config.experts.iter().map(|e| e.expert_name.clone()).collect();
    let ckpt = Checkpoint::new(
        config.moe_method.into(),
        base.manifest.arch,
        Some(moe_meta(config, names, Vec::new())),
        out,
    )?;
    report.check_coverage(&ckpt)?;
    Ok((ckpt, report))
}

/// Elementwise mean in expert order, honoring the alignment policy.
fn average(name: &str, sources: &[&Tensor], policy: AlignPolicy) -> Result<(Tensor, Option<AlignmentAction>)> {
    let first = sources[0];
    let n = sources.len() as f64;
    let mismatch = || Error::ShapeMismatch {
        name: name.to_string(),
        shapes: sources.iter().map(|t| t.shape().to_vec()).collect(),
    };
    if sources.iter().all(|t| t.shape() == first.shape()) {
        let mut acc = vec![0.0; first.len()];
        for t in sources {
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let data = acc.into_iter().map(|v| v / n).collect();
        return Ok((Tensor::new(first.shape().to_vec(), data)?, None));
    }
    if policy == AlignPolicy::Strict || sources.iter().any(|t| t.shape().len() != first.shape().len()) {
        return Err(mismatch());
    }

    let rank = first.shape().len();
    let min: Vec<usize> = (0..rank)
        .map(|ax| sources.iter().map(|t| t.shape()[ax]).min().unwrap())
        .collect();
    let strides = |shape: &[usize]| -> Vec<usize> {
        let mut s = vec![1; shape.len()];
        for ax in (0..shape.len().saturating_sub(1)).rev() {
            s[ax] = s[ax + 1] * shape[ax + 1];
        }
        s
    };
    let first_strides = strides(first.shape());
    let mut data = first.data().to_vec();
    for (flat, slot) in data.iter_mut().enumerate() {
        let idx: Vec<usize> = (0..rank)
            .map(|ax| flat / first_strides[ax] % first.shape()[ax])
            .collect();
        if idx.iter().zip(&min).all(|(i, m)| i < m) {
            let sum: f64 = sources
                .iter()
                .map(|t| {
                    let st = strides(t.shape());
                    t.data()[idx.iter().zip(&st).map(|(i, s)| i * s).sum::<usize>()]
                })
                .sum();
            *slot = sum / n;
        }
    }
    let action = AlignmentAction {
        name: name.to_string(),
        policy_applied: AlignPolicy::TruncateToMin,
        shapes: sources.iter().map(|t| t.shape().to_vec()).collect(),
    };
    Ok((Tensor::new(first.shape().to_vec(), data)?, Some(action)))
}

fn compose_stitched(config: &MoeConfig, experts: &[Checkpoint]) -> Result<(Checkpoint, CompositionReport)> {
    let mut report = CompositionReport::default();
    let mut out = BTreeMap::new();
    for (i, ckpt) in experts.iter().enumerate() {
        let prefix = if i == 0 {
            stitch::HUB_PREFIX.to_string()
        } else {
            stitch::expert_prefix(i - 1)
        };
        for (name, t) in &ckpt.tensors {
            let full = format!("{prefix}{name}");
            report.expert_param_names.push(full.clone());
            out.insert(full, t.clone());
        }
    }
    let hub_arch = experts[0].manifest.arch;
    let expert_archs: Vec<Arch> = experts[1..].iter().map(|c| c.manifest.arch).collect();
    let freq = config.stitch_freq.expect("validated");
    for (name, t) in stitch::init_stitch_tensors(&hub_arch, &expert_archs, freq, config.seed)? {
        report.new_param_names.push(name.clone());
        out.insert(name, t);
    }
    report.expert_param_names.sort();
    report.new_param_names.sort();
    report.unmatched_selectors = config.router_layers.clone();

    let names = config.experts[1..].iter().map(|e| e.expert_name.clone()).collect();
    let ckpt = Checkpoint::new(
        ModelKind::Bts,
        hub_arch,
        Some(moe_meta(config, names, expert_archs)),
        out,
    )?;
    report.check_coverage(&ckpt)?;
    Ok((ckpt, report))
}
