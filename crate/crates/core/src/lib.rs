//! Mixture-of-Experts composition and execution engine.
//!
//! Merges dense decoder checkpoints into one MoE model (Traditional, BTX or
//! BTS), trains only routers or stitch layers, and records per-token routing
//! traces for inspection.

pub mod checkpoint;
pub mod compose;
pub mod config;
pub mod error;
pub mod model;
pub mod stitch;
pub mod tensor;
pub mod tokenizer;
pub mod trace;
pub mod train;

pub use checkpoint::{Arch, Checkpoint, Manifest, ModelKind, MoeMeta};
pub use config::{Diagnostic, MoeConfig, MoeMethod};
pub use error::{Error, Result};
pub use model::{MoeModel, RouteDecision, RouteSite};
pub use stitch::BtsModel;
pub use tensor::Tensor;
pub use tokenizer::ByteTokenizer;
pub use trace::{RoutingTrace, TokenSummary, TraceFilter};
