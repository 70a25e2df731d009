//! Per-token routing statistics: aggregated expert weights, dominant
//! experts, block/projection filters and collapse diagnostics.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelKind;
use crate::error::{Error, Result};
use crate::model::{MoeModel, RouteDecision, RouteSite};
use crate::stitch::StitchSiteTrace;
use crate::tensor;

pub const DEFAULT_COLLAPSE_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub index: usize,
    pub surface: String,
}

impl TokenInfo {
    pub fn list<S: Into<String>>(surfaces: impl IntoIterator<Item = S>) -> Vec<TokenInfo> {
        surfaces
            .into_iter()
            .enumerate()
            .map(|(index, s)| TokenInfo {
                index,
                surface: s.into(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceModelMeta {
    pub mode: ModelKind,
    pub num_experts: usize,
    pub k: usize,
    pub n_blocks: usize,
    /// Blocks that carry a router.
    pub routed_blocks: Vec<usize>,
    pub expert_names: Vec<String>,
}

impl TraceModelMeta {
    pub fn of(model: &MoeModel) -> Self {
        Self {
            mode: model.kind,
            num_experts: model.num_experts,
            k: model.k,
            n_blocks: model.arch.n_blocks,
            routed_blocks: model.routed_blocks(),
            expert_names: model.expert_names.clone(),
        }
    }

    /// Routing sites each token passes through in one routed block.
    pub fn sites_per_block(&self) -> usize {
        match self.mode {
            ModelKind::Btx => 3,
            _ => 1,
        }
    }

    fn valid_sites(&self) -> &'static [RouteSite] {
        match self.mode {
            ModelKind::Btx => &[RouteSite::Gate, RouteSite::Up, RouteSite::Down],
            _ => &[RouteSite::Block],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingTrace {
    pub tokens: Vec<TokenInfo>,
    pub decisions: Vec<RouteDecision>,
    pub model: TraceModelMeta,
}

impl RoutingTrace {
    pub fn new(model: TraceModelMeta, tokens: Vec<TokenInfo>, decisions: Vec<RouteDecision>) -> Result<Self> {
        let trace = Self {
            tokens,
            decisions,
            model,
        };
        trace.validate()?;
        Ok(trace)
    }

    /// `|tokens| · |routed blocks| · sites per block`.
    pub fn expected_decisions(&self) -> usize {
        self.tokens.len() * self.model.routed_blocks.len() * self.model.sites_per_block()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.model.num_experts;
        for d in &self.decisions {
            if d.token_index >= self.tokens.len() {
                return Err(Error::InvariantViolation(format!(
                    "decision for token {} but trace has {} tokens",
                    d.token_index,
                    self.tokens.len()
                )));
            }
            if d.logits.len() != e || d.selected.iter().any(|&s| s >= e) || d.selected.len() != d.weights.len() {
                return Err(Error::InvariantViolation(format!(
                    "malformed decision at token {} block {}",
                    d.token_index, d.block
                )));
            }
        }
        if self.decisions.len() != self.expected_decisions() {
            return Err(Error::InvariantViolation(format!(
                "{} decisions, expected {}",
                self.decisions.len(),
                self.expected_decisions()
            )));
        }
        Ok(())
    }
}

/// Restricts aggregation to some blocks and/or projections; `None` keeps all.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceFilter {
    #[serde(default)]
    pub blocks: Option<BTreeSet<usize>>,
    #[serde(default)]
    pub projections: Option<BTreeSet<RouteSite>>,
}

impl TraceFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn accepts(&self, d: &RouteDecision) -> bool {
        self.blocks.as_ref().is_none_or(|b| b.contains(&d.block))
            && self.projections.as_ref().is_none_or(|p| p.contains(&d.site))
    }

    pub fn check(&self, meta: &TraceModelMeta) -> Result<()> {
        if let Some(blocks) = &self.blocks {
            if let Some(b) = blocks.iter().find(|&&b| b >= meta.n_blocks) {
                return Err(Error::InvalidFilter(format!(
                    "block {b} out of range for {} blocks",
                    meta.n_blocks
                )));
            }
        }
        if let Some(projections) = &self.projections {
            let valid = meta.valid_sites();
            if let Some(p) = projections.iter().find(|p| !valid.contains(p)) {
                return Err(Error::InvalidFilter(format!(
                    "projection '{p}' does not occur in a {} model",
                    meta.mode.as_str()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenSummary {
    pub token_index: usize,
    /// Mean of the per-site weight vectors, unselected experts counting 0.
    pub weights: Vec<f64>,
    /// `None` when the filter left this token without sites.
    pub dominant: Option<usize>,
    pub site_count: usize,
    pub empty_filter: bool,
}

/// `w̄_{t,e} = (1/|L_t|) Σ_{(l,p) ∈ L_t} w_{t,e}^{(l,p)}` for every token.
pub fn aggregate(trace: &RoutingTrace, filter: &TraceFilter) -> Result<Vec<TokenSummary>> {
    filter.check(&trace.model)?;
    let e = trace.model.num_experts;
    let mut sums = vec![vec![0.0; e]; trace.tokens.len()];
    let mut counts = vec![0usize; trace.tokens.len()];
    for d in trace.decisions.iter().filter(|d| filter.accepts(d)) {
        let t = d.token_index;
        for (&x, &w) in d.selected.iter().zip(&d.weights) {
            sums[t][x] += w;
        }
        counts[t] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .enumerate()
        .map(|(t, (sum, n))| {
            if n == 0 {
                return TokenSummary {
                    token_index: t,
                    weights: vec![0.0; e],
                    dominant: None,
                    site_count: 0,
                    empty_filter: true,
                };
            }
            let weights: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
            TokenSummary {
                token_index: t,
                dominant: Some(tensor::argmax(&weights)),
                weights,
                site_count: n,
                empty_filter: false,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    /// Share of decisions whose top-1 choice is each expert.
    pub top1_fraction: Vec<f64>,
    /// Mean of the unfiltered `w̄` over tokens.
    pub mean_weight: Vec<f64>,
    /// Experts never chosen top-1.
    pub dead_experts: Vec<usize>,
    pub collapse_threshold: f64,
    /// Some expert's top-1 share exceeds the threshold.
    pub collapse: bool,
}

pub fn expert_utilization(trace: &RoutingTrace, threshold: f64) -> Result<Utilization> {
    if trace.decisions.is_empty() {
        return Err(Error::EmptyInput("routing trace"));
    }
    let e = trace.model.num_experts;
    let mut top1 = vec![0.0; e];
    for d in &trace.decisions {
        top1[d.top1()] += 1.0;
    }
    let n = trace.decisions.len() as f64;
    let top1_fraction: Vec<f64> = top1.iter().map(|c| c / n).collect();

    let summaries = aggregate(trace, &TraceFilter::all())?;
    let routed: Vec<&TokenSummary> = summaries.iter().filter(|s| s.site_count > 0).collect();
    let mut mean_weight = vec![0.0; e];
    for s in &routed {
        tensor::axpy(&mut mean_weight, 1.0, &s.weights);
    }
    for v in &mut mean_weight {
        *v /= routed.len() as f64;
    }
    let collapse = top1_fraction.iter().any(|&f| f > threshold);
    Ok(Utilization {
        dead_experts: (0..e).filter(|&i| top1[i] == 0.0).collect(),
        top1_fraction,
        mean_weight,
        collapse_threshold: threshold,
        collapse,
    })
}

/// The JSON document served to the visualizer; see `docs/trace.schema.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceDocument {
    pub tokens: Vec<TokenInfo>,
    pub decisions: Vec<RouteDecision>,
    pub summaries: Vec<TokenSummary>,
    /// Absent for a trace without decisions.
    pub utilization: Option<Utilization>,
    pub model: TraceModelMeta,
}

pub fn export_trace(trace: &RoutingTrace, summaries: Vec<TokenSummary>, threshold: f64) -> Result<TraceDocument> {
    if summaries.len() != trace.tokens.len() {
        return Err(Error::InvariantViolation(format!(
            "{} summaries for {} tokens",
            summaries.len(),
            trace.tokens.len()
        )));
    }
    let utilization = if trace.decisions.is_empty() {
        None
    } else {
        Some(expert_utilization(trace, threshold)?)
    };
    Ok(TraceDocument {
        tokens: trace.tokens.clone(),
        decisions: trace.decisions.clone(),
        summaries,
        utilization,
        model: trace.model.clone(),
    })
}

impl TraceDocument {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace documents serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("trace document: {e}")))
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }
}

/// Gate values recorded by a BTS forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchTrace {
    pub tokens: Vec<TokenInfo>,
    pub expert_names: Vec<String>,
    pub sites: Vec<StitchSiteTrace>,
}
