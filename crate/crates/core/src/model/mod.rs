//! Executable decoder-only transformer with dense, Traditional-MoE and BTX
//! feed-forward regimes.
//!
//! Parameter naming (all matrices are `[in, out]`):
//!
//! | tensor | shape |
//! |---|---|
//! | `tok_embeddings.weight` | `vocab × d` (also the tied output head) |
//! | `blocks.<l>.attn_norm.weight`, `blocks.<l>.ffn_norm.weight` | `d` |
//! | `blocks.<l>.attn.{q,k,v,o}_proj.weight` | `d × d` |
//! | `blocks.<l>.mlp.{gate,up}_proj.weight` | `d × d_ff` |
//! | `blocks.<l>.mlp.down_proj.weight` | `d_ff × d` |
//! | `final_norm.weight` | `d` |
//!
//! Converted projections store one copy per expert under
//! `blocks.<l>.mlp.<proj>.experts.expert_<i>.weight`. Routers are
//! `blocks.<l>.mlp.router.weight` (traditional) or
//! `blocks.<l>.mlp.<proj>.router.weight` (btx), each `d × E`.

pub mod ffn;
pub mod init;
pub mod layers;
pub mod routing;

use std::collections::BTreeMap;

use crate::checkpoint::{Arch, Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub use ffn::{Ffn, FfnLayer, ProjWeights};
pub use layers::Attention;
pub use routing::{gate, Projection, RouteDecision, RouteSite};

use ffn::{FfnCache, LbGrad, RouterGrads};
use layers::{AttnCache, Rows, NORM_EPS};

pub const EMBEDDINGS: &str = "tok_embeddings.weight";
pub const FINAL_NORM: &str = "final_norm.weight";

pub fn attn_norm_name(block: usize) -> String {
    format!("blocks.{block}.attn_norm.weight")
}

pub fn ffn_norm_name(block: usize) -> String {
    format!("blocks.{block}.ffn_norm.weight")
}

pub fn attn_proj_name(block: usize, which: &str) -> String {
    format!("blocks.{block}.attn.{which}_proj.weight")
}

pub fn proj_name(block: usize, p: Projection) -> String {
    format!("blocks.{block}.mlp.{}.weight", p.module())
}

pub fn expert_proj_name(block: usize, p: Projection, expert: usize) -> String {
    format!(
        "blocks.{block}.mlp.{}.experts.expert_{expert}.weight",
        p.module()
    )
}

pub fn router_name(block: usize, site: RouteSite) -> String {
    match site {
        RouteSite::Block => format!("blocks.{block}.mlp.router.weight"),
        RouteSite::Gate => format!("blocks.{block}.mlp.gate_proj.router.weight"),
        RouteSite::Up => format!("blocks.{block}.mlp.up_proj.router.weight"),
        RouteSite::Down => format!("blocks.{block}.mlp.down_proj.router.weight"),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn: Attention,
    pub ffn_norm: Tensor,
    pub ffn: FfnLayer,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache {
    attn: AttnCache,
    /// FFN inputs after the norm, one per position.
    normed: Rows,
    /// Residual stream entering the FFN half.
    mid: Rows,
    ffn: Vec<FfnCache>,
}

impl BlockCache {
    pub(crate) fn decisions(&self) -> impl Iterator<Item = &RouteDecision> {
        self.ffn.iter().flat_map(|c| c.decisions())
    }
}

impl Block {
    pub(crate) fn forward(
        &self,
        x: &[Vec<f64>],
        n_heads: usize,
        k: usize,
        block: usize,
    ) -> Result<(Rows, BlockCache)> {
        let (mid, attn) = self.attn.forward(x, n_heads);
        let mut out = Vec::with_capacity(x.len());
        let mut normed = Vec::with_capacity(x.len());
        let mut caches = Vec::with_capacity(x.len());
        for (t, row) in mid.iter().enumerate() {
            let b = tensor::rms_norm(row, self.ffn_norm.data(), NORM_EPS);
            let (f, c) = self.ffn.forward(&b, k, t, block)?;
            let mut y = row.clone();
            tensor::axpy(&mut y, 1.0, &f);
            out.push(y);
            normed.push(b);
            caches.push(c);
        }
        Ok((
            out,
            BlockCache {
                attn,
                normed,
                mid,
                ffn: caches,
            },
        ))
    }

    pub(crate) fn backward(
        &self,
        cache: &BlockCache,
        dy: &[Vec<f64>],
        n_heads: usize,
        grads: &mut RouterGrads,
        lb: Option<&LbGrad>,
    ) -> Rows {
        let dmid: Rows = dy
            .iter()
            .enumerate()
            .map(|(t, g)| {
                let db = self
                    .ffn
                    .backward(&cache.ffn[t], &cache.normed[t], g, grads, lb);
                let mut dm =
                    tensor::rms_norm_backward(&cache.mid[t], self.ffn_norm.data(), NORM_EPS, &db);
                tensor::axpy(&mut dm, 1.0, g);
                dm
            })
            .collect();
        self.attn.backward(&cache.attn, &dmid, n_heads)
    }
}

/// Per-call forward record; never shared between calls.
#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub blocks: Vec<BlockCache>,
    pub final_in: Rows,
    pub logits: Rows,
}

impl ForwardCache {
    pub(crate) fn decisions(&self) -> Vec<RouteDecision> {
        self.blocks
            .iter()
            .flat_map(|b| b.decisions().cloned())
            .collect()
    }
}

/// Output of a traced forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// `T × vocab` next-token logits.
    pub logits: Tensor,
    pub decisions: Vec<RouteDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub arch: Arch,
    pub kind: ModelKind,
    pub num_experts: usize,
    /// Experts activated per token per routing site.
    pub k: usize,
    pub alpha: f64,
    pub expert_names: Vec<String>,
    pub embeddings: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Tensor,
}

fn expect_shape(t: &Tensor, name: &str, shape: &[usize]) -> Result<()> {
    if t.shape() != shape {
        return Err(Error::InvariantViolation(format!(
            "'{name}' has shape {:?}, expected {shape:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn take(ckpt: &Checkpoint, prefix: &str, name: &str, shape: &[usize]) -> Result<Tensor> {
    let full = format!("{prefix}{name}");
    let t = ckpt.get(&full)?;
    expect_shape(t, &full, shape)?;
    Ok(t.clone())
}

impl MoeModel {
    /// Builds an executable model from a dense, traditional or btx checkpoint.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let m = &ckpt.manifest;
        match m.model_kind {
            ModelKind::Bts => Err(Error::ModeMismatch {
                expected: "dense, traditional or btx",
                actual: "bts".into(),
            }),
            ModelKind::Dense => Self::from_parts(ckpt, "", m.arch),
            ModelKind::Traditional | ModelKind::Btx => {
                let moe = m.moe.as_ref().ok_or_else(|| {
                    Error::Format("routed checkpoint without moe metadata".into())
                })?;
                let mut model = Self::from_parts(ckpt, "", m.arch)?;
                model.alpha = moe.alpha;
                model.expert_names = moe.expert_names.clone();
                if moe.num_experts_per_tok == 0 || moe.num_experts_per_tok > moe.num_experts {
                    return Err(Error::KOutOfRange {
                        k: moe.num_experts_per_tok,
                        num_experts: moe.num_experts,
                    });
                }
                model.k = moe.num_experts_per_tok;
                Ok(model)
            }
        }
    }

    /// Reads the model whose tensors live under `prefix` (used for the hub
    /// and experts embedded in a bts checkpoint).
    pub(crate) fn from_parts(ckpt: &Checkpoint, prefix: &str, arch: Arch) -> Result<Self> {
        arch.check()?;
        let kind = if prefix.is_empty() {
            ckpt.manifest.model_kind
        } else {
            ModelKind::Dense
        };
        let num_experts = match (kind, &ckpt.manifest.moe) {
            (ModelKind::Traditional | ModelKind::Btx, Some(moe)) => moe.num_experts,
            _ => 1,
        };
        let Arch {
            vocab_size: v,
            d_model: d,
            d_ff: f,
            ..
        } = arch;
        let embeddings = take(ckpt, prefix, EMBEDDINGS, &[v, d])?;
        let final_norm = take(ckpt, prefix, FINAL_NORM, &[d])?;
        let mut blocks = Vec::with_capacity(arch.n_blocks);
        for l in 0..arch.n_blocks {
            let attn = Attention {
                norm: take(ckpt, prefix, &attn_norm_name(l), &[d])?,
                q: take(ckpt, prefix, &attn_proj_name(l, "q"), &[d, d])?,
                k: take(ckpt, prefix, &attn_proj_name(l, "k"), &[d, d])?,
                v: take(ckpt, prefix, &attn_proj_name(l, "v"), &[d, d])?,
                o: take(ckpt, prefix, &attn_proj_name(l, "o"), &[d, d])?,
            };
            let ffn_norm = take(ckpt, prefix, &ffn_norm_name(l), &[d])?;
            let shape = |p: Projection| match p {
                Projection::Down => vec![f, d],
                _ => vec![d, f],
            };
            // Per projection: the shared tensor, or one copy per expert.
            let mut projs: Vec<std::result::Result<Tensor, Vec<Tensor>>> = Vec::new();
            for p in Projection::ALL {
                let shared = proj_name(l, p);
                if ckpt.tensors.contains_key(&format!("{prefix}{shared}")) {
                    projs.push(Ok(take(ckpt, prefix, &shared, &shape(p))?));
                } else {
                    let copies = (0..num_experts)
                        .map(|e| take(ckpt, prefix, &expert_proj_name(l, p, e), &shape(p)))
                        .collect::<Result<Vec<_>>>()?;
                    projs.push(Err(copies));
                }
            }
            let ffn = match kind {
                ModelKind::Dense | ModelKind::Bts => {
                    let mut it = projs.into_iter().map(|p| {
                        p.map_err(|_| Error::Format(format!("dense block {l} has expert copies")))
                    });
                    FfnLayer::Dense(Ffn {
                        gate: it.next().unwrap()?,
                        up: it.next().unwrap()?,
                        down: it.next().unwrap()?,
                    })
                }
                ModelKind::Traditional => {
                    let rname = router_name(l, RouteSite::Block);
                    if ckpt.tensors.contains_key(&rname) {
                        let router = take(ckpt, "", &rname, &[d, num_experts])?;
                        let pick = |i: usize, e: usize| match &projs[i] {
                            Ok(t) => t.clone(),
                            Err(copies) => copies[e].clone(),
                        };
                        let experts = (0..num_experts)
                            .map(|e| Ffn {
                                gate: pick(0, e),
                                up: pick(1, e),
                                down: pick(2, e),
                            })
                            .collect();
                        FfnLayer::Traditional { router, experts }
                    } else {
                        let mut it = projs.into_iter().map(|p| {
                            p.map_err(|_| {
                                Error::Format(format!("block {l} has expert copies but no router"))
                            })
                        });
                        FfnLayer::Dense(Ffn {
                            gate: it.next().unwrap()?,
                            up: it.next().unwrap()?,
                            down: it.next().unwrap()?,
                        })
                    }
                }
                ModelKind::Btx => {
                    let mut slots = Vec::with_capacity(3);
                    for (p, w) in Projection::ALL.into_iter().zip(projs) {
                        slots.push(match w {
                            Ok(t) => ProjWeights::Shared(t),
                            Err(experts) => ProjWeights::Routed {
                                router: take(
                                    ckpt,
                                    "",
                                    &router_name(l, p.into()),
                                    &[d, num_experts],
                                )?,
                                experts,
                            },
                        });
                    }
                    let mut it = slots.into_iter();
                    let (gate, up, down) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
                    if matches!(
                        (&gate, &up, &down),
                        (ProjWeights::Shared(_), ProjWeights::Shared(_), ProjWeights::Shared(_))
                    ) {
                        FfnLayer::Dense(Ffn {
                            gate: unwrap_shared(gate),
                            up: unwrap_shared(up),
                            down: unwrap_shared(down),
                        })
                    } else {
                        FfnLayer::Btx { gate, up, down }
                    }
                }
            };
            blocks.push(Block {
                attn,
                ffn_norm,
                ffn,
            });
        }
        Ok(Self {
            arch,
            kind,
            num_experts,
            k: 1,
            alpha: 0.0,
            expert_names: Vec::new(),
            embeddings,
            blocks,
            final_norm,
        })
    }

    /// Blocks that carry at least one router.
    pub fn routed_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .enumerate()
            .filter(|(_, b)| b.ffn.is_routed())
            .map(|(l, _)| l)
            .collect()
    }

    /// Routing sites per token: one per traditional block, one per routed
    /// projection under btx.
    pub fn sites_per_token(&self) -> usize {
        self.blocks.iter().map(|b| b.ffn.routers().len()).sum()
    }

    /// Every router tensor with its checkpoint name.
    pub fn routers(&self) -> Vec<(String, &Tensor)> {
        self.blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| {
                b.ffn
                    .routers()
                    .into_iter()
                    .map(move |(site, t)| (router_name(l, site), t))
            })
            .collect()
    }

    pub fn set_router(&mut self, block: usize, site: RouteSite, value: Tensor) -> Result<()> {
        let slot = self
            .blocks
            .get_mut(block)
            .and_then(|b| b.ffn.router_mut(site))
            .ok_or_else(|| Error::MissingTensor(router_name(block, site)))?;
        if slot.shape() != value.shape() {
            return Err(Error::DimensionMismatch {
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
                context: "set_router",
            });
        }
        *slot = value;
        Ok(())
    }

    pub(crate) fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("token ids"));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.arch.vocab_size) {
            return Err(Error::TokenOutOfVocab {
                id,
                vocab_size: self.arch.vocab_size,
            });
        }
        Ok(())
    }

    /// Residual stream before block `0`.
    pub(crate) fn embed(&self, ids: &[u32]) -> Rows {
        layers::embed(&self.embeddings, ids)
    }

    pub(crate) fn head(&self, rows: &[Vec<f64>]) -> Rows {
        layers::head(&self.embeddings, &self.final_norm, rows)
    }

    pub(crate) fn head_backward(&self, rows: &[Vec<f64>], dlogits: &[Vec<f64>]) -> Rows {
        layers::head_backward(&self.embeddings, &self.final_norm, rows, dlogits)
    }

    pub(crate) fn forward_cached(&self, ids: &[u32]) -> Result<ForwardCache> {
        self.check_ids(ids)?;
        let mut x = self.embed(ids);
        let mut caches = Vec::with_capacity(self.blocks.len());
        for (l, block) in self.blocks.iter().enumerate() {
            let (y, c) = block.forward(&x, self.arch.n_heads, self.k, l)?;
            caches.push(c);
            x = y;
        }
        let logits = self.head(&x);
        Ok(ForwardCache {
            blocks: caches,
            final_in: x,
            logits,
        })
    }

    /// Causal forward pass returning next-token logits and every routing
    /// decision, ordered by block, then token, then site.
    pub fn forward(&self, ids: &[u32]) -> Result<ForwardOutput> {
        let cache = self.forward_cached(ids)?;
        let decisions = cache.decisions();
        let logits = Tensor::from_rows(&cache.logits)?;
        Ok(ForwardOutput { logits, decisions })
    }

    /// Greedy decoding. The returned decisions cover every returned id.
    pub fn generate(&self, prompt: &[u32], max_new: usize) -> Result<(Vec<u32>, Vec<RouteDecision>)> {
        self.check_ids(prompt)?;
        let mut ids = prompt.to_vec();
        for _ in 0..max_new {
            let cache = self.forward_cached(&ids)?;
            let last = cache.logits.last().expect("non-empty sequence");
            ids.push(tensor::argmax(last) as u32);
        }
        let decisions = self.forward_cached(&ids)?.decisions();
        Ok((ids, decisions))
    }

    /// Backpropagates `dlogits` through the whole network and returns the
    /// gradient of every router, keyed by checkpoint name.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        dlogits: &[Vec<f64>],
        grads: &mut RouterGrads,
        lb: Option<&LbGrad>,
    ) {
        let mut dx = self.head_backward(&cache.final_in, dlogits);
        for (block, bc) in self.blocks.iter().zip(&cache.blocks).rev() {
            dx = block.backward(bc, &dx, self.arch.n_heads, grads, lb);
        }
    }
}

fn unwrap_shared(w: ProjWeights) -> Tensor {
    match w {
        ProjWeights::Shared(t) => t,
        ProjWeights::Routed { .. } => unreachable!("checked by caller"),
    }
}

/// Name-keyed view of accumulated router gradients.
pub(crate) fn named_router_grads(
    model: &MoeModel,
    grads: &RouterGrads,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for (l, b) in model.blocks.iter().enumerate() {
        for (site, router) in b.ffn.routers() {
            let data = grads
                .get(&(l, site))
                .cloned()
                .unwrap_or_else(|| vec![0.0; router.len()]);
            out.insert(
                router_name(l, site),
                Tensor::new(router.shape().to_vec(), data)?,
            );
        }
    }
    Ok(out)
}
