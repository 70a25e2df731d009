//! Loading models and producing trace documents, shared by the commands
//! and the HTTP service.

use std::path::Path;

use moemix::checkpoint::{Checkpoint, ModelKind};
use moemix::stitch::BtsModel;
use moemix::trace::{aggregate, export_trace, StitchTrace, TokenInfo, TraceDocument, TraceFilter, TraceModelMeta};
use moemix::{ByteTokenizer, Error, MoeModel, Result, RoutingTrace};

#[derive(Debug, Clone)]
pub enum Loaded {
    Routed(MoeModel),
    Stitched(BtsModel),
}

impl Loaded {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        Ok(match ckpt.manifest.model_kind {
            ModelKind::Bts => Loaded::Stitched(BtsModel::from_checkpoint(ckpt)?),
            _ => Loaded::Routed(MoeModel::from_checkpoint(ckpt)?),
        })
    }

    pub fn load(dir: &Path) -> Result<(Checkpoint, Self)> {
        let ckpt = Checkpoint::load(dir)?;
        let model = Self::from_checkpoint(&ckpt)?;
        Ok((ckpt, model))
    }

    /// Greedy continuation of `prompt`.
    pub fn generate(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        match self {
            Loaded::Routed(m) => m.generate(prompt, max_new).map(|(ids, _)| ids),
            Loaded::Stitched(m) => m.generate(prompt, max_new).map(|(ids, _)| ids),
        }
    }

    pub fn routed(&self) -> Result<&MoeModel> {
        match self {
            Loaded::Routed(m) => Ok(m),
            Loaded::Stitched(_) => Err(Error::ModeMismatch {
                expected: "traditional or btx",
                actual: "bts".into(),
            }),
        }
    }

    pub fn stitched(&self) -> Result<&BtsModel> {
        match self {
            Loaded::Stitched(m) => Ok(m),
            Loaded::Routed(m) => Err(Error::ModeMismatch {
                expected: "bts",
                actual: m.kind.as_str().into(),
            }),
        }
    }
}

fn surfaces(ids: &[u32]) -> Vec<TokenInfo> {
    let tok = ByteTokenizer;
    TokenInfo::list(ids.iter().map(|&id| tok.surface(id)))
}

/// Runs the prompt (plus `max_new` greedy tokens) and builds the trace
/// document. An empty prompt yields a document with empty arrays.
pub fn trace_document(
    model: &MoeModel,
    prompt: &str,
    max_new: usize,
    filter: &TraceFilter,
    collapse_threshold: f64,
) -> Result<TraceDocument> {
    filter.check(&TraceModelMeta::of(model))?;
    let trace = routing_trace(model, prompt, max_new)?;
    let summaries = aggregate(&trace, filter)?;
    export_trace(&trace, summaries, collapse_threshold)
}

/// Unfiltered routing trace of prompt plus continuation.
pub fn routing_trace(model: &MoeModel, prompt: &str, max_new: usize) -> Result<RoutingTrace> {
    let meta = TraceModelMeta::of(model);
    let ids = ByteTokenizer.encode(prompt);
    if ids.is_empty() {
        return RoutingTrace::new(meta, vec![], vec![]);
    }
    let (ids, decisions) = model.generate(&ids, max_new)?;
    RoutingTrace::new(meta, surfaces(&ids), decisions)
}

pub fn stitch_trace(model: &BtsModel, prompt: &str, max_new: usize) -> Result<StitchTrace> {
    let ids = ByteTokenizer.encode(prompt);
    let (ids, sites) = model.generate(&ids, max_new)?;
    Ok(StitchTrace {
        tokens: surfaces(&ids),
        expert_names: model.expert_names.clone(),
        sites,
    })
}
