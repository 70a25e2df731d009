//! BTS overlay: a frozen hub and frozen experts run block-by-block in
//! lockstep, exchanging hidden states through trainable stitch layers.
//!
//! Stitch sites are the blocks `l` with `(l + 1) % stitch_freq == 0`, plus
//! the last block. Intermediate sites run `hub_into_experts`; the last site
//! runs `experts_into_hub`, so the hub's head sees the fused state.
//!
//! Tensor names at site `s`:
//!
//! * experts into hub: `stitch.<s>.hub_gate.weight` (`d_hub × (E+1)`),
//!   `stitch.<s>.hub_gate.bias` (`E+1`), and per expert
//!   `stitch.<s>.experts.expert_<i>.proj.weight` (`d_i × d_hub`).
//! * hub into experts, per expert: `stitch.<s>.experts.expert_<i>.proj.weight`
//!   (`d_hub × d_i`), `...gate.weight` (`d_i`), `...gate.bias` (`1`).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{Arch, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::model::ffn::RouterGrads;
use crate::model::init::tensor_seed;
use crate::model::layers::Rows;
use crate::model::{BlockCache, MoeModel};
use crate::tensor::{self, Tensor};

pub const HUB_PREFIX: &str = "hub.";
/// Initial hub logit in the experts-into-hub gate (softmax ≈ hub-only).
pub const HUB_GATE_BIAS: f64 = 6.0;
/// Initial bias of the hub-into-experts sigmoid gate (≈ expert passthrough).
pub const EXPERT_GATE_BIAS: f64 = -6.0;
pub const STITCH_INIT_STD: f64 = 0.02;

pub fn expert_prefix(i: usize) -> String {
    format!("experts.expert_{i}.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ExpertsIntoHub,
    HubIntoExperts,
}

/// Blocks that carry a stitch layer, ascending.
pub fn stitch_sites(n_blocks: usize, stitch_freq: usize) -> Vec<usize> {
    let mut sites: Vec<usize> = (0..n_blocks)
        .filter(|l| (l + 1) % stitch_freq == 0)
        .collect();
    if n_blocks > 0 && sites.last() != Some(&(n_blocks - 1)) {
        sites.push(n_blocks - 1);
    }
    sites
}

pub fn site_direction(site: usize, n_blocks: usize) -> Direction {
    if site + 1 == n_blocks {
        Direction::ExpertsIntoHub
    } else {
        Direction::HubIntoExperts
    }
}

fn hub_gate_name(site: usize, field: &str) -> String {
    format!("stitch.{site}.hub_gate.{field}")
}

fn expert_param_name(site: usize, expert: usize, field: &str) -> String {
    format!("stitch.{site}.experts.expert_{expert}.{field}")
}

#[derive(Debug, Clone, PartialEq)]
pub enum StitchLayer {
    ExpertsIntoHub {
        site: usize,
        gate_weight: Tensor,
        gate_bias: Tensor,
        /// `P_e`, mapping expert states into the hub space.
        proj: Vec<Tensor>,
    },
    HubIntoExperts {
        site: usize,
        /// `Q_e`, mapping the hub state into each expert space.
        proj: Vec<Tensor>,
        gate_weight: Vec<Tensor>,
        gate_bias: Vec<Tensor>,
    },
}

impl StitchLayer {
    pub fn site(&self) -> usize {
        match self {
            StitchLayer::ExpertsIntoHub { site, .. } | StitchLayer::HubIntoExperts { site, .. } => *site,
        }
    }

    pub fn direction(&self) -> Direction {
        match self {
            StitchLayer::ExpertsIntoHub { .. } => Direction::ExpertsIntoHub,
            StitchLayer::HubIntoExperts { .. } => Direction::HubIntoExperts,
        }
    }

    /// Every trainable tensor with its checkpoint name.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            StitchLayer::ExpertsIntoHub {
                site,
                gate_weight,
                gate_bias,
                proj,
            } => {
                out.push((hub_gate_name(*site, "weight"), gate_weight));
                out.push((hub_gate_name(*site, "bias"), gate_bias));
                for (e, p) in proj.iter().enumerate() {
                    out.push((expert_param_name(*site, e, "proj.weight"), p));
                }
            }
            StitchLayer::HubIntoExperts {
                site,
                proj,
                gate_weight,
                gate_bias,
            } => {
                for e in 0..proj.len() {
                    out.push((expert_param_name(*site, e, "proj.weight"), &proj[e]));
                    out.push((expert_param_name(*site, e, "gate.weight"), &gate_weight[e]));
                    out.push((expert_param_name(*site, e, "gate.bias"), &gate_bias[e]));
                }
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            StitchLayer::ExpertsIntoHub {
                site,
                gate_weight,
                gate_bias,
                proj,
            } => {
                out.push((hub_gate_name(*site, "weight"), gate_weight));
                out.push((hub_gate_name(*site, "bias"), gate_bias));
                for (e, p) in proj.iter_mut().enumerate() {
                    out.push((expert_param_name(*site, e, "proj.weight"), p));
                }
            }
            StitchLayer::HubIntoExperts {
                site,
                proj,
                gate_weight,
                gate_bias,
            } => {
                for (e, ((p, w), b)) in proj
                    .iter_mut()
                    .zip(gate_weight.iter_mut())
                    .zip(gate_bias.iter_mut())
                    .enumerate()
                {
                    out.push((expert_param_name(*site, e, "proj.weight"), p));
                    out.push((expert_param_name(*site, e, "gate.weight"), w));
                    out.push((expert_param_name(*site, e, "gate.bias"), b));
                }
            }
        }
        out
    }
}

/// Fresh stitch tensors for every site, initialized so the composed model
/// starts out computing the hub: the hub gate favors the hub, expert
/// projections into the hub are zero, and expert gates are nearly closed.
pub fn init_stitch_tensors(
    hub: &Arch,
    experts: &[Arch],
    stitch_freq: usize,
    seed: u64,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    let n_e = experts.len();
    let dh = hub.d_model;
    let gauss = |name: &str, shape: Vec<usize>| {
        Tensor::gaussian(shape, 0.0, STITCH_INIT_STD, tensor_seed(seed, name))
    };
    for site in stitch_sites(hub.n_blocks, stitch_freq) {
        match site_direction(site, hub.n_blocks) {
            Direction::ExpertsIntoHub => {
                let w = hub_gate_name(site, "weight");
                out.insert(w.clone(), gauss(&w, vec![dh, n_e + 1])?);
                let mut bias = vec![0.0; n_e + 1];
                bias[0] = HUB_GATE_BIAS;
                out.insert(hub_gate_name(site, "bias"), Tensor::vector(bias)?);
                for (e, a) in experts.iter().enumerate() {
                    out.insert(
                        expert_param_name(site, e, "proj.weight"),
                        Tensor::zeros(vec![a.d_model, dh])?,
                    );
                }
            }
            Direction::HubIntoExperts => {
                for (e, a) in experts.iter().enumerate() {
                    let p = expert_param_name(site, e, "proj.weight");
                    out.insert(p.clone(), gauss(&p, vec![dh, a.d_model])?);
                    let g = expert_param_name(site, e, "gate.weight");
                    out.insert(g.clone(), gauss(&g, vec![a.d_model])?);
                    out.insert(
                        expert_param_name(site, e, "gate.bias"),
                        Tensor::vector(vec![EXPERT_GATE_BIAS])?,
                    );
                }
            }
        }
    }
    Ok(out)
}

fn check_len(v: &[f64], n: usize, context: &'static str) -> Result<()> {
    if v.len() != n {
        return Err(Error::DimensionMismatch {
            lhs: vec![v.len()],
            rhs: vec![n],
            context,
        });
    }
    Ok(())
}

/// `α = softmax(h0·w_gate + b)`; returns `α₀·h0 + Σ_e α_{e+1}·(h_e·P_e)` and `α`.
pub fn stitch_experts_into_hub(
    h0: &[f64],
    h_experts: &[Vec<f64>],
    layer: &StitchLayer,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let StitchLayer::ExpertsIntoHub {
        gate_weight,
        gate_bias,
        proj,
        ..
    } = layer
    else {
        return Err(Error::ModeMismatch {
            expected: "experts_into_hub stitch",
            actual: "hub_into_experts".into(),
        });
    };
    check_len(h0, gate_weight.rows(), "stitch hub state")?;
    if h_experts.len() != proj.len() || gate_weight.cols() != proj.len() + 1 {
        return Err(Error::DimensionMismatch {
            lhs: vec![h_experts.len()],
            rhs: gate_weight.shape().to_vec(),
            context: "stitch expert count",
        });
    }
    let mut logits = tensor::vec_mat(h0, gate_weight);
    tensor::axpy(&mut logits, 1.0, gate_bias.data());
    let alpha = tensor::softmax(&logits)?;
    let mut out: Vec<f64> = h0.iter().map(|v| v * alpha[0]).collect();
    for (e, (h, p)) in h_experts.iter().zip(proj).enumerate() {
        check_len(h, p.rows(), "stitch expert state")?;
        tensor::axpy(&mut out, alpha[e + 1], &tensor::vec_mat(h, p));
    }
    Ok((out, alpha))
}

/// For each expert: `s_e = σ(h_e·g_e + c_e)`, `h_e' = s_e·(h0·Q_e) + (1 − s_e)·h_e`.
pub fn stitch_hub_into_experts(
    h0: &[f64],
    h_experts: &[Vec<f64>],
    layer: &StitchLayer,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let StitchLayer::HubIntoExperts {
        proj,
        gate_weight,
        gate_bias,
        ..
    } = layer
    else {
        return Err(Error::ModeMismatch {
            expected: "hub_into_experts stitch",
            actual: "experts_into_hub".into(),
        });
    };
    if h_experts.len() != proj.len() {
        return Err(Error::DimensionMismatch {
            lhs: vec![h_experts.len()],
            rhs: vec![proj.len()],
            context: "stitch expert count",
        });
    }
    let mut outs = Vec::with_capacity(proj.len());
    let mut gates = Vec::with_capacity(proj.len());
    for (e, h) in h_experts.iter().enumerate() {
        check_len(h0, proj[e].rows(), "stitch hub state")?;
        check_len(h, proj[e].cols(), "stitch expert state")?;
        check_len(h, gate_weight[e].len(), "stitch expert gate")?;
        let s = tensor::sigmoid(tensor::dot(h, gate_weight[e].data()) + gate_bias[e].data()[0]);
        let q = tensor::vec_mat(h0, &proj[e]);
        outs.push(q.iter().zip(h).map(|(qv, hv)| s * qv + (1.0 - s) * hv).collect());
        gates.push(s);
    }
    Ok((outs, gates))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchSiteTrace {
    pub block: usize,
    pub direction: Direction,
    /// Per token: the `α` vector (hub first) or the `s_e` of every expert.
    pub gates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BtsModel {
    pub hub: MoeModel,
    pub experts: Vec<MoeModel>,
    pub stitches: Vec<StitchLayer>,
    pub stitch_freq: usize,
    pub expert_names: Vec<String>,
}

/// Stitch-site inputs kept for the backward pass.
#[derive(Debug, Clone)]
struct SiteCache {
    layer: usize,
    hub_in: Rows,
    experts_in: Vec<Rows>,
    gates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct BtsCache {
    hub_blocks: Vec<BlockCache>,
    expert_blocks: Vec<Vec<BlockCache>>,
    sites: Vec<SiteCache>,
    hub_final: Rows,
    pub logits: Rows,
}

impl BtsModel {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        if m.model_kind != ModelKind::Bts {
            return Err(Error::ModeMismatch {
                expected: "bts",
                actual: m.model_kind.as_str().into(),
            });
        }
        let moe = m
            .moe
            .as_ref()
            .ok_or_else(|| Error::Format("bts checkpoint without moe metadata".into()))?;
        let freq = moe
            .stitch_freq
            .filter(|&f| f > 0)
            .ok_or_else(|| Error::Format("bts checkpoint without stitch_freq".into()))?;
        if moe.expert_archs.len() != moe.num_experts {
            return Err(Error::Format(format!(
                "{} expert archs for {} experts",
                moe.expert_archs.len(),
                moe.num_experts
            )));
        }
        let hub = MoeModel::from_parts(ckpt, HUB_PREFIX, m.arch)?;
        let experts = moe
            .expert_archs
            .iter()
            .enumerate()
            .map(|(i, a)| {
                if a.vocab_size != m.arch.vocab_size || a.n_blocks != m.arch.n_blocks {
                    return Err(Error::Format(format!(
                        "expert {i} differs from the hub in vocab or depth"
                    )));
                }
                MoeModel::from_parts(ckpt, &expert_prefix(i), *a)
            })
            .collect::<Result<Vec<_>>>()?;

        let n_e = experts.len();
        let dh = m.arch.d_model;
        let mut stitches = Vec::new();
        for site in stitch_sites(m.arch.n_blocks, freq) {
            let get = |name: String, shape: Vec<usize>| -> Result<Tensor> {
                let t = ckpt.get(&name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::InvariantViolation(format!(
                        "'{name}' has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                Ok(t.clone())
            };
            stitches.push(match site_direction(site, m.arch.n_blocks) {
                Direction::ExpertsIntoHub => StitchLayer::ExpertsIntoHub {
                    site,
                    gate_weight: get(hub_gate_name(site, "weight"), vec![dh, n_e + 1])?,
                    gate_bias: get(hub_gate_name(site, "bias"), vec![n_e + 1])?,
                    proj: (0..n_e)
                        .map(|e| {
                            get(
                                expert_param_name(site, e, "proj.weight"),
                                vec![experts[e].arch.d_model, dh],
                            )
                        })
                        .collect::<Result<_>>()?,
                },
                Direction::HubIntoExperts => {
                    let mut proj = Vec::new();
                    let mut gate_weight = Vec::new();
                    let mut gate_bias = Vec::new();
                    for (e, ex) in experts.iter().enumerate() {
                        let de = ex.arch.d_model;
                        proj.push(get(expert_param_name(site, e, "proj.weight"), vec![dh, de])?);
                        gate_weight.push(get(expert_param_name(site, e, "gate.weight"), vec![de])?);
                        gate_bias.push(get(expert_param_name(site, e, "gate.bias"), vec![1])?);
                    }
                    StitchLayer::HubIntoExperts {
                        site,
                        proj,
                        gate_weight,
                        gate_bias,
                    }
                }
            });
        }
        Ok(Self {
            hub,
            experts,
            stitches,
            stitch_freq: freq,
            expert_names: moe.expert_names.clone(),
        })
    }

    /// Every stitch tensor by checkpoint name.
    pub fn stitch_params(&self) -> BTreeMap<String, &Tensor> {
        self.stitches.iter().flat_map(|s| s.params()).collect()
    }

    /// Replaces a stitch tensor with one of the same shape.
    pub fn set_stitch_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        for layer in &mut self.stitches {
            for (n, slot) in layer.params_mut() {
                if n == name {
                    if slot.shape() != value.shape() {
                        return Err(Error::DimensionMismatch {
                            lhs: slot.shape().to_vec(),
                            rhs: value.shape().to_vec(),
                            context: "set_stitch_param",
                        });
                    }
                    *slot = value;
                    return Ok(());
                }
            }
        }
        Err(Error::MissingTensor(name.to_string()))
    }

    pub(crate) fn forward_cached(&self, ids: &[u32]) -> Result<BtsCache> {
        self.hub.check_ids(ids)?;
        let n_blocks = self.hub.arch.n_blocks;
        let mut hub_x = self.hub.embed(ids);
        let mut exp_x: Vec<Rows> = self.experts.iter().map(|e| e.embed(ids)).collect();
        let mut hub_blocks = Vec::with_capacity(n_blocks);
        let mut expert_blocks = vec![Vec::with_capacity(n_blocks); self.experts.len()];
        let mut sites = Vec::new();
        let mut next_stitch = self.stitches.iter().enumerate().peekable();

        for l in 0..n_blocks {
            let (y, c) = self.hub.blocks[l].forward(&hub_x, self.hub.arch.n_heads, 1, l)?;
            hub_x = y;
            hub_blocks.push(c);
            for (e, ex) in self.experts.iter().enumerate() {
                let (y, c) = ex.blocks[l].forward(&exp_x[e], ex.arch.n_heads, 1, l)?;
                exp_x[e] = y;
                expert_blocks[e].push(c);
            }
            if let Some((si, layer)) = next_stitch.next_if(|(_, s)| s.site() == l) {
                let mut gates = Vec::with_capacity(ids.len());
                let hub_in = hub_x.clone();
                let experts_in = exp_x.clone();
                for t in 0..ids.len() {
                    let states: Vec<Vec<f64>> = experts_in.iter().map(|x| x[t].clone()).collect();
                    match layer {
                        StitchLayer::ExpertsIntoHub { .. } => {
                            let (h, alpha) = stitch_experts_into_hub(&hub_in[t], &states, layer)?;
                            hub_x[t] = h;
                            gates.push(alpha);
                        }
                        StitchLayer::HubIntoExperts { .. } => {
                            let (hs, s) = stitch_hub_into_experts(&hub_in[t], &states, layer)?;
                            for (e, h) in hs.into_iter().enumerate() {
                                exp_x[e][t] = h;
                            }
                            gates.push(s);
                        }
                    }
                }
                sites.push(SiteCache {
                    layer: si,
                    hub_in,
                    experts_in,
                    gates,
                });
            }
        }
        let logits = self.hub.head(&hub_x);
        Ok(BtsCache {
            hub_blocks,
            expert_blocks,
            sites,
            hub_final: hub_x,
            logits,
        })
    }

    /// Runs hub and experts in lockstep; logits come from the hub's head.
    pub fn forward(&self, ids: &[u32]) -> Result<(Tensor, Vec<StitchSiteTrace>)> {
        let cache = self.forward_cached(ids)?;
        let sites = cache
            .sites
            .iter()
            .map(|s| {
                let layer = &self.stitches[s.layer];
                StitchSiteTrace {
                    block: layer.site(),
                    direction: layer.direction(),
                    gates: s.gates.clone(),
                }
            })
            .collect();
        Ok((Tensor::from_rows(&cache.logits)?, sites))
    }

    /// Greedy decoding through the hub's head; gate values cover every
    /// returned id.
    pub fn generate(&self, prompt: &[u32], max_new: usize) -> Result<(Vec<u32>, Vec<StitchSiteTrace>)> {
        self.hub.check_ids(prompt)?;
        let mut ids = prompt.to_vec();
        for _ in 0..max_new {
            let cache = self.forward_cached(&ids)?;
            let last = cache.logits.last().expect("non-empty sequence");
            ids.push(tensor::argmax(last) as u32);
        }
        let (_, sites) = self.forward(&ids)?;
        Ok((ids, sites))
    }

    /// Stitch-parameter gradients for the given logit gradient.
    pub(crate) fn backward(&self, cache: &BtsCache, dlogits: &[Vec<f64>]) -> Result<BTreeMap<String, Vec<f64>>> {
        let t_len = dlogits.len();
        let mut grads: BTreeMap<String, Vec<f64>> = self
            .stitch_params()
            .into_iter()
            .map(|(n, t)| (n, vec![0.0; t.len()]))
            .collect();
        let mut dhub = self.hub.head_backward(&cache.hub_final, dlogits);
        let mut dexp: Vec<Rows> = self
            .experts
            .iter()
            .map(|e| vec![vec![0.0; e.arch.d_model]; t_len])
            .collect();
        let mut unused = RouterGrads::new();
        let mut site_iter = cache.sites.iter().rev().peekable();
        let first_site = self.stitches.first().map_or(0, |s| s.site());

        for l in (0..self.hub.arch.n_blocks).rev() {
            if let Some(sc) = site_iter.next_if(|s| self.stitches[s.layer].site() == l) {
                self.site_backward(sc, &mut dhub, &mut dexp, &mut grads);
            }
            // Nothing trainable sits below the first stitch site.
            if l == first_site {
                break;
            }
            dhub = self.hub.blocks[l].backward(&cache.hub_blocks[l], &dhub, self.hub.arch.n_heads, &mut unused, None);
            for (e, ex) in self.experts.iter().enumerate() {
                if dexp[e].iter().all(|r| r.iter().all(|v| *v == 0.0)) {
                    continue;
                }
                dexp[e] = ex.blocks[l].backward(&cache.expert_blocks[e][l], &dexp[e], ex.arch.n_heads, &mut unused, None);
            }
        }
        Ok(grads)
    }

    fn site_backward(
        &self,
        sc: &SiteCache,
        dhub: &mut Rows,
        dexp: &mut [Rows],
        grads: &mut BTreeMap<String, Vec<f64>>,
    ) {
        let layer = &self.stitches[sc.layer];
        let site = layer.site();
        match layer {
            StitchLayer::ExpertsIntoHub {
                gate_weight, proj, ..
            } => {
                for t in 0..dhub.len() {
                    let dout = dhub[t].clone();
                    let h0 = &sc.hub_in[t];
                    let alpha = &sc.gates[t];
                    let projected: Vec<Vec<f64>> = proj
                        .iter()
                        .enumerate()
                        .map(|(e, p)| tensor::vec_mat(&sc.experts_in[e][t], p))
                        .collect();
                    let mut dalpha = vec![tensor::dot(&dout, h0)];
                    dalpha.extend(projected.iter().map(|p| tensor::dot(&dout, p)));
                    let inner = tensor::dot(alpha, &dalpha);
                    let dz: Vec<f64> = alpha.iter().zip(&dalpha).map(|(a, d)| a * (d - inner)).collect();
                    tensor::add_outer(grads.get_mut(&hub_gate_name(site, "weight")).unwrap(), h0, &dz);
                    tensor::axpy(grads.get_mut(&hub_gate_name(site, "bias")).unwrap(), 1.0, &dz);
                    let mut dh0: Vec<f64> = dout.iter().map(|g| g * alpha[0]).collect();
                    tensor::axpy(&mut dh0, 1.0, &tensor::vec_mat_t(&dz, gate_weight));
                    dhub[t] = dh0;
                    for (e, p) in proj.iter().enumerate() {
                        let dp: Vec<f64> = dout.iter().map(|g| g * alpha[e + 1]).collect();
                        let he = &sc.experts_in[e][t];
                        tensor::add_outer(grads.get_mut(&expert_param_name(site, e, "proj.weight")).unwrap(), he, &dp);
                        tensor::axpy(&mut dexp[e][t], 1.0, &tensor::vec_mat_t(&dp, p));
                    }
                }
            }
            StitchLayer::HubIntoExperts {
                proj, gate_weight, ..
            } => {
                for t in 0..dhub.len() {
                    let h0 = &sc.hub_in[t];
                    for (e, q_proj) in proj.iter().enumerate() {
                        let s = sc.gates[t][e];
                        let he = &sc.experts_in[e][t];
                        let dout = dexp[e][t].clone();
                        let q = tensor::vec_mat(h0, q_proj);
                        let ds: f64 = dout.iter().zip(q.iter().zip(he)).map(|(g, (qv, hv))| g * (qv - hv)).sum();
                        let dzs = ds * s * (1.0 - s);
                        tensor::axpy(grads.get_mut(&expert_param_name(site, e, "gate.weight")).unwrap(), dzs, he);
                        grads.get_mut(&expert_param_name(site, e, "gate.bias")).unwrap()[0] += dzs;
                        let dq: Vec<f64> = dout.iter().map(|g| g * s).collect();
                        tensor::add_outer(grads.get_mut(&expert_param_name(site, e, "proj.weight")).unwrap(), h0, &dq);
                        tensor::axpy(&mut dhub[t], 1.0, &tensor::vec_mat_t(&dq, q_proj));
                        let mut dh: Vec<f64> = dout.iter().map(|g| g * (1.0 - s)).collect();
                        tensor::axpy(&mut dh, dzs, gate_weight[e].data());
                        dexp[e][t] = dh;
                    }
                }
            }
        }
    }
}
