//! Top-k gating: logits `g = h·W`, selection `S = TopK(g, k)`, and weights
//! `w_e = exp(g_e) / Σ_{j∈S} exp(g_j)` for `e ∈ S`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// One of the three FFN projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Gate,
    Up,
    Down,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Gate, Projection::Up, Projection::Down];

    /// Module name inside a block, e.g. `gate_proj`.
    pub fn module(self) -> &'static str {
        match self {
            Projection::Gate => "gate_proj",
            Projection::Up => "up_proj",
            Projection::Down => "down_proj",
        }
    }
}

/// Where inside a block a routing decision was made. Traditional MoE routes
/// the whole FFN once (`Block`); BTX routes each projection separately.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RouteSite {
    Block,
    Gate,
    Up,
    Down,
}

impl From<Projection> for RouteSite {
    fn from(p: Projection) -> Self {
        match p {
            Projection::Gate => RouteSite::Gate,
            Projection::Up => RouteSite::Up,
            Projection::Down => RouteSite::Down,
        }
    }
}

impl RouteSite {
    pub fn as_str(self) -> &'static str {
        match self {
            RouteSite::Block => "block",
            RouteSite::Gate => "gate",
            RouteSite::Up => "up",
            RouteSite::Down => "down",
        }
    }
}

impl fmt::Display for RouteSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RouteSite {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "block" => Ok(RouteSite::Block),
            "gate" => Ok(RouteSite::Gate),
            "up" => Ok(RouteSite::Up),
            "down" => Ok(RouteSite::Down),
            other => Err(format!(
                "unknown projection '{other}' (expected block, gate, up or down)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub token_index: usize,
    pub block: usize,
    #[serde(rename = "projection")]
    pub site: RouteSite,
    /// Expert indices, highest logit first.
    pub selected: Vec<usize>,
    /// Renormalized weights aligned with `selected`.
    pub weights: Vec<f64>,
    /// The full logit vector over all experts.
    pub logits: Vec<f64>,
}

impl RouteDecision {
    pub fn num_experts(&self) -> usize {
        self.logits.len()
    }

    /// The highest-weighted expert.
    pub fn top1(&self) -> usize {
        self.selected[0]
    }

    /// Softmax over all experts, not just the selected ones.
    pub fn full_probs(&self) -> Vec<f64> {
        tensor::softmax(&self.logits).expect("decisions carry at least one logit")
    }

    /// Weights scattered to a dense vector, zero for unselected experts.
    pub fn dense_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.logits.len()];
        for (&e, &v) in self.selected.iter().zip(&self.weights) {
            w[e] = v;
        }
        w
    }
}

/// Routes one hidden state through the gating matrix `w` (`d × E`).
pub fn gate(h: &Tensor, w: &Tensor, k: usize) -> Result<RouteDecision> {
    if h.shape().len() != 1 {
        return Err(Error::Shape(format!(
            "gate input must be a vector, got {:?}",
            h.shape()
        )));
    }
    route(h.data(), w, k, 0, 0, RouteSite::Block)
}

pub(crate) fn route(
    h: &[f64],
    w: &Tensor,
    k: usize,
    token_index: usize,
    block: usize,
    site: RouteSite,
) -> Result<RouteDecision> {
    if w.shape().len() != 2 || w.rows() != h.len() {
        return Err(Error::DimensionMismatch {
            lhs: vec![h.len()],
            rhs: w.shape().to_vec(),
            context: "gate",
        });
    }
    let num_experts = w.cols();
    if k == 0 || k > num_experts {
        return Err(Error::KOutOfRange { k, num_experts });
    }
    let logits = tensor::vec_mat(h, w);
    let selected = tensor::top_k_indices(&logits, k)?;
    let chosen: Vec<f64> = selected.iter().map(|&e| logits[e]).collect();
    let weights = tensor::softmax(&chosen)?;
    Ok(RouteDecision {
        token_index,
        block,
        site,
        selected,
        weights,
        logits,
    })
}

/// Pulls `dL/dw` (aligned with `selected`) back to the full logit vector
/// through the renormalized softmax. Unselected logits get zero.
pub(crate) fn weights_backward(decision: &RouteDecision, dweights: &[f64]) -> Vec<f64> {
    let mut dg = vec![0.0; decision.num_experts()];
    let inner: f64 = decision
        .weights
        .iter()
        .zip(dweights)
        .map(|(w, d)| w * d)
        .sum();
    for ((&e, &w), &d) in decision.selected.iter().zip(&decision.weights).zip(dweights) {
        dg[e] = w * (d - inner);
    }
    dg
}
