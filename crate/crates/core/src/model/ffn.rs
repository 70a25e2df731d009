//! Feed-forward regimes: dense SiLU-gated FFN, Traditional MoE (one router
//! per block, whole-FFN experts) and BTX (one router per projection).

use std::collections::BTreeMap;

use crate::error::Result;
use crate::model::routing::{self, Projection, RouteDecision, RouteSite};
use crate::tensor::{self, Tensor};

/// `down(silu(gate(x)) ⊙ up(x))` with `[in, out]` weight matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub gate: Tensor,
    pub up: Tensor,
    pub down: Tensor,
}

#[derive(Debug, Clone)]
pub(crate) struct DenseCache {
    a: Vec<f64>,
    u: Vec<f64>,
}

impl Ffn {
    pub fn forward(&self, b: &[f64]) -> Vec<f64> {
        self.forward_cached(b).0
    }

    pub fn proj(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Gate => &self.gate,
            Projection::Up => &self.up,
            Projection::Down => &self.down,
        }
    }

    fn forward_cached(&self, b: &[f64]) -> (Vec<f64>, DenseCache) {
        let a = tensor::vec_mat(b, &self.gate);
        let u = tensor::vec_mat(b, &self.up);
        let m = hidden(&a, &u);
        (tensor::vec_mat(&m, &self.down), DenseCache { a, u })
    }

    fn backward(&self, cache: &DenseCache, dy: &[f64]) -> Vec<f64> {
        let dm = tensor::vec_mat_t(dy, &self.down);
        let (da, du) = hidden_backward(&cache.a, &cache.u, &dm);
        let mut db = tensor::vec_mat_t(&da, &self.gate);
        tensor::axpy(&mut db, 1.0, &tensor::vec_mat_t(&du, &self.up));
        db
    }
}

fn hidden(a: &[f64], u: &[f64]) -> Vec<f64> {
    a.iter().zip(u).map(|(&x, &y)| tensor::silu(x) * y).collect()
}

fn hidden_backward(a: &[f64], u: &[f64], dm: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let da = a
        .iter()
        .zip(u)
        .zip(dm)
        .map(|((&x, &y), &g)| g * y * tensor::silu_grad(x))
        .collect();
    let du = a.iter().zip(dm).map(|(&x, &g)| g * tensor::silu(x)).collect();
    (da, du)
}

/// Weights of one projection under BTX: either shared (averaged) or
/// split into per-expert copies behind a router.
#[derive(Debug, Clone, PartialEq)]
pub enum ProjWeights {
    Shared(Tensor),
    Routed { router: Tensor, experts: Vec<Tensor> },
}

#[derive(Debug, Clone, PartialEq)]
pub enum FfnLayer {
    Dense(Ffn),
    Traditional { router: Tensor, experts: Vec<Ffn> },
    Btx {
        gate: ProjWeights,
        up: ProjWeights,
        down: ProjWeights,
    },
}

/// Load-balancing term folded into the logit gradient of every decision:
/// `scale · p ⊙ (f − f·p)` where `p` is the full softmax over all experts.
#[derive(Debug, Clone)]
pub(crate) struct LbGrad {
    pub scale: f64,
    pub f: Vec<f64>,
}

impl LbGrad {
    fn logit_grad(&self, d: &RouteDecision) -> Vec<f64> {
        let p = d.full_probs();
        let fp = tensor::dot(&self.f, &p);
        p.iter()
            .zip(&self.f)
            .map(|(pe, fe)| self.scale * pe * (fe - fp))
            .collect()
    }
}

/// Router gradients keyed by `(block, site)`.
pub(crate) type RouterGrads = BTreeMap<(usize, RouteSite), Vec<f64>>;

#[derive(Debug, Clone)]
#[allow(clippy::large_enum_variant)]
pub(crate) enum FfnCache {
    Dense(DenseCache),
    Traditional {
        decision: RouteDecision,
        experts: Vec<(DenseCache, Vec<f64>)>,
    },
    Btx {
        gate: ProjCache,
        up: ProjCache,
        down: ProjCache,
        a: Vec<f64>,
        u: Vec<f64>,
        m: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
pub(crate) enum ProjCache {
    Shared,
    Routed {
        decision: RouteDecision,
        outputs: Vec<Vec<f64>>,
    },
}

impl FfnCache {
    pub(crate) fn decisions(&self) -> Vec<&RouteDecision> {
        match self {
            FfnCache::Dense(_) => vec![],
            FfnCache::Traditional { decision, .. } => vec![decision],
            FfnCache::Btx { gate, up, down, .. } => [gate, up, down]
                .into_iter()
                .filter_map(|c| match c {
                    ProjCache::Routed { decision, .. } => Some(decision),
                    ProjCache::Shared => None,
                })
                .collect(),
        }
    }
}

impl ProjWeights {
    fn forward(
        &self,
        z: &[f64],
        b: &[f64],
        k: usize,
        token: usize,
        block: usize,
        site: RouteSite,
    ) -> Result<(Vec<f64>, ProjCache)> {
        match self {
            ProjWeights::Shared(w) => Ok((tensor::vec_mat(z, w), ProjCache::Shared)),
            ProjWeights::Routed { router, experts } => {
                let decision = routing::route(b, router, k, token, block, site)?;
                let mut out = vec![0.0; experts[0].cols()];
                let mut outputs = Vec::with_capacity(k);
                for (&e, &w) in decision.selected.iter().zip(&decision.weights) {
                    let o = tensor::vec_mat(z, &experts[e]);
                    tensor::axpy(&mut out, w, &o);
                    outputs.push(o);
                }
                Ok((out, ProjCache::Routed { decision, outputs }))
            }
        }
    }

    /// Returns `dz`; accumulates router gradients and adds the router's
    /// contribution to `db`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        cache: &ProjCache,
        dout: &[f64],
        z_len: usize,
        b: &[f64],
        db: &mut [f64],
        grads: &mut RouterGrads,
        lb: Option<&LbGrad>,
    ) -> Vec<f64> {
        match (self, cache) {
            (ProjWeights::Shared(w), _) => tensor::vec_mat_t(dout, w),
            (ProjWeights::Routed { router, experts }, ProjCache::Routed { decision, outputs }) => {
                let mut dz = vec![0.0; z_len];
                let mut dw = Vec::with_capacity(outputs.len());
                for ((&e, &w), o) in decision.selected.iter().zip(&decision.weights).zip(outputs) {
                    dw.push(tensor::dot(dout, o));
                    tensor::axpy(&mut dz, w, &tensor::vec_mat_t(dout, &experts[e]));
                }
                router_backward(decision, &dw, router, b, db, grads, lb);
                dz
            }
            (ProjWeights::Routed { .. }, ProjCache::Shared) => {
                unreachable!("routed projection always caches its decision")
            }
        }
    }
}

fn router_backward(
    decision: &RouteDecision,
    dweights: &[f64],
    router: &Tensor,
    b: &[f64],
    db: &mut [f64],
    grads: &mut RouterGrads,
    lb: Option<&LbGrad>,
) {
    let mut dg = routing::weights_backward(decision, dweights);
    if let Some(lb) = lb {
        tensor::axpy(&mut dg, 1.0, &lb.logit_grad(decision));
    }
    let acc = grads
        .entry((decision.block, decision.site))
        .or_insert_with(|| vec![0.0; router.len()]);
    tensor::add_outer(acc, b, &dg);
    tensor::axpy(db, 1.0, &tensor::vec_mat_t(&dg, router));
}

impl FfnLayer {
    pub fn is_routed(&self) -> bool {
        !matches!(self, FfnLayer::Dense(_))
    }

    /// Router matrices in this layer, by site.
    pub fn routers(&self) -> Vec<(RouteSite, &Tensor)> {
        match self {
            FfnLayer::Dense(_) => vec![],
            FfnLayer::Traditional { router, .. } => vec![(RouteSite::Block, router)],
            FfnLayer::Btx { gate, up, down } => Projection::ALL
                .iter()
                .zip([gate, up, down])
                .filter_map(|(&p, w)| match w {
                    ProjWeights::Routed { router, .. } => Some((RouteSite::from(p), router)),
                    ProjWeights::Shared(_) => None,
                })
                .collect(),
        }
    }

    pub(crate) fn router_mut(&mut self, site: RouteSite) -> Option<&mut Tensor> {
        match (self, site) {
            (FfnLayer::Traditional { router, .. }, RouteSite::Block) => Some(router),
            (FfnLayer::Btx { gate, up, down }, site) => {
                let slot = match site {
                    RouteSite::Gate => gate,
                    RouteSite::Up => up,
                    RouteSite::Down => down,
                    RouteSite::Block => return None,
                };
                match slot {
                    ProjWeights::Routed { router, .. } => Some(router),
                    ProjWeights::Shared(_) => None,
                }
            }
            _ => None,
        }
    }

    pub(crate) fn forward(
        &self,
        b: &[f64],
        k: usize,
        token: usize,
        block: usize,
    ) -> Result<(Vec<f64>, FfnCache)> {
        match self {
            FfnLayer::Dense(ffn) => {
                let (y, c) = ffn.forward_cached(b);
                Ok((y, FfnCache::Dense(c)))
            }
            FfnLayer::Traditional { router, experts } => {
                let decision = routing::route(b, router, k, token, block, RouteSite::Block)?;
                let mut y = vec![0.0; b.len()];
                let mut caches = Vec::with_capacity(k);
                for (&e, &w) in decision.selected.iter().zip(&decision.weights) {
                    let (ye, c) = experts[e].forward_cached(b);
                    tensor::axpy(&mut y, w, &ye);
                    caches.push((c, ye));
                }
                Ok((
                    y,
                    FfnCache::Traditional {
                        decision,
                        experts: caches,
                    },
                ))
            }
            FfnLayer::Btx { gate, up, down } => {
                let (a, gate_c) = gate.forward(b, b, k, token, block, RouteSite::Gate)?;
                let (u, up_c) = up.forward(b, b, k, token, block, RouteSite::Up)?;
                let m = hidden(&a, &u);
                let (y, down_c) = down.forward(&m, b, k, token, block, RouteSite::Down)?;
                Ok((
                    y,
                    FfnCache::Btx {
                        gate: gate_c,
                        up: up_c,
                        down: down_c,
                        a,
                        u,
                        m,
                    },
                ))
            }
        }
    }

    /// Gradient with respect to the FFN input `b`.
    pub(crate) fn backward(
        &self,
        cache: &FfnCache,
        b: &[f64],
        dy: &[f64],
        grads: &mut RouterGrads,
        lb: Option<&LbGrad>,
    ) -> Vec<f64> {
        match (self, cache) {
            (FfnLayer::Dense(ffn), FfnCache::Dense(c)) => ffn.backward(c, dy),
            (
                FfnLayer::Traditional { router, experts },
                FfnCache::Traditional {
                    decision,
                    experts: caches,
                },
            ) => {
                let mut db = vec![0.0; b.len()];
                let mut dw = Vec::with_capacity(caches.len());
                for ((&e, &w), (c, ye)) in
                    decision.selected.iter().zip(&decision.weights).zip(caches)
                {
                    dw.push(tensor::dot(dy, ye));
                    let scaled: Vec<f64> = dy.iter().map(|g| g * w).collect();
                    tensor::axpy(&mut db, 1.0, &experts[e].backward(c, &scaled));
                }
                router_backward(decision, &dw, router, b, &mut db, grads, lb);
                db
            }
            (
                FfnLayer::Btx { gate, up, down },
                FfnCache::Btx {
                    gate: gate_c,
                    up: up_c,
                    down: down_c,
                    a,
                    u,
                    m,
                },
            ) => {
                let mut db = vec![0.0; b.len()];
                let dm = down.backward(down_c, dy, m.len(), b, &mut db, grads, lb);
                let (da, du) = hidden_backward(a, u, &dm);
                let dgate = gate.backward(gate_c, &da, b.len(), b, &mut db, grads, lb);
                let dup = up.backward(up_c, &du, b.len(), b, &mut db, grads, lb);
                tensor::axpy(&mut db, 1.0, &dgate);
                tensor::axpy(&mut db, 1.0, &dup);
                db
            }
            _ => unreachable!("cache kind always matches the layer that produced it"),
        }
    }
}
