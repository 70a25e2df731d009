//! The composition configuration document and its validation.
//!
//! Field names follow the JSON configuration dictionary users already write
//! for MoE merging (`moe_method`, `num_experts_per_tok`, `router_layers`, ...),
//! so such documents load unchanged.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MoeMethod {
    Traditional,
    Btx,
    Bts,
}

impl MoeMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            MoeMethod::Traditional => "traditional",
            MoeMethod::Btx => "btx",
            MoeMethod::Bts => "bts",
        }
    }
}

/// How `compose` treats shared tensors whose shapes differ across experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignPolicy {
    /// Any mismatch is an error.
    #[default]
    Strict,
    /// Average the overlapping leading block, keep the first expert's values elsewhere.
    TruncateToMin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertSpec {
    pub expert_name: String,
    /// Checkpoint directory, resolved relative to the config file.
    pub model_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoeConfig {
    pub moe_method: MoeMethod,
    #[serde(default)]
    pub stitch_freq: Option<usize>,
    pub model_type: String,
    pub num_experts_per_tok: usize,
    /// The first entry is the base model (the hub under `bts`).
    pub experts: Vec<ExpertSpec>,
    #[serde(default)]
    pub router_layers: Vec<String>,
    #[serde(default)]
    pub alpha: f64,
    /// Blocks converted to MoE form; empty means every block.
    #[serde(default)]
    pub router_layers_index: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub align: AlignPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

impl MoeConfig {
    /// Parses a JSON document; syntax and type errors become a single
    /// diagnostic pointing at the offending field path.
    pub fn from_json(text: &str) -> std::result::Result<Self, Vec<Diagnostic>> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|err| {
            let path = err.path().to_string();
            let field = if path == "." { "$".to_string() } else { path };
            vec![Diagnostic::new(field, err.into_inner().to_string())]
        })
    }

    /// Reads, parses and validates a configuration file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config = Self::from_json(&text).map_err(Error::Config)?;
        let diags = validate(&config);
        if !diags.is_empty() {
            return Err(Error::Config(diags));
        }
        Ok(config)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Number of experts in the composed model. Under `bts` the first entry is
    /// the hub and is not counted.
    pub fn num_experts(&self) -> usize {
        match self.moe_method {
            MoeMethod::Bts => self.experts.len().saturating_sub(1),
            _ => self.experts.len(),
        }
    }

    pub fn block_selected(&self, block: usize) -> bool {
        self.router_layers_index.is_empty() || self.router_layers_index.contains(&block)
    }
}

/// Checks every invariant that does not need the expert checkpoints.
/// An empty result means the configuration is valid.
pub fn validate(config: &MoeConfig) -> Vec<Diagnostic> {
    let mut diags = Vec::new();
    let n = config.experts.len();

    if config.model_type.trim().is_empty() {
        diags.push(Diagnostic::new("model_type", "must not be empty"));
    }
    if n == 0 {
        diags.push(Diagnostic::new("experts", "at least one expert is required"));
    }
    if config.moe_method == MoeMethod::Bts && n == 1 {
        diags.push(Diagnostic::new(
            "experts",
            "bts needs a hub and at least one expert",
        ));
    }
    for (i, e) in config.experts.iter().enumerate() {
        if e.expert_name.trim().is_empty() {
            diags.push(Diagnostic::new(
                format!("experts[{i}].expert_name"),
                "must not be empty",
            ));
        } else if config.experts[..i]
            .iter()
            .any(|o| o.expert_name == e.expert_name)
        {
            diags.push(Diagnostic::new(
                format!("experts[{i}].expert_name"),
                format!("duplicate expert name '{}'", e.expert_name),
            ));
        }
        if e.model_id.trim().is_empty() {
            diags.push(Diagnostic::new(
                format!("experts[{i}].model_id"),
                "must not be empty",
            ));
        }
    }

    if config.num_experts_per_tok == 0 {
        diags.push(Diagnostic::new("num_experts_per_tok", "must be at least 1"));
    } else if n > 0 && config.num_experts_per_tok > n {
        diags.push(Diagnostic::new(
            "num_experts_per_tok",
            format!(
                "{} exceeds the number of experts ({n})",
                config.num_experts_per_tok
            ),
        ));
    }

    if !config.alpha.is_finite() || config.alpha < 0.0 {
        diags.push(Diagnostic::new("alpha", "must be a finite value >= 0"));
    }

    match config.moe_method {
        MoeMethod::Bts => match config.stitch_freq {
            None => diags.push(Diagnostic::new("stitch_freq", "required for bts")),
            Some(0) => diags.push(Diagnostic::new("stitch_freq", "must be at least 1")),
            Some(_) => {}
        },
        MoeMethod::Traditional | MoeMethod::Btx => {
            if config.router_layers.is_empty() {
                diags.push(Diagnostic::new(
                    "router_layers",
                    "at least one selector is required for router-based methods",
                ));
            }
        }
    }

    for (i, sel) in config.router_layers.iter().enumerate() {
        if sel.is_empty() || sel.split('.').any(str::is_empty) {
            diags.push(Diagnostic::new(
                format!("router_layers[{i}]"),
                format!("malformed selector '{sel}'"),
            ));
        }
    }

    for (i, &b) in config.router_layers_index.iter().enumerate() {
        if config.router_layers_index[..i].contains(&b) {
            diags.push(Diagnostic::new(
                format!("router_layers_index[{i}]"),
                format!("duplicate block index {b}"),
            ));
        }
    }

    diags
}

/// Checks the block indices against the experts' depth.
pub fn validate_blocks(config: &MoeConfig, n_blocks: usize) -> Vec<Diagnostic> {
    config
        .router_layers_index
        .iter()
        .enumerate()
        .filter(|(_, &b)| b >= n_blocks)
        .map(|(i, &b)| {
            Diagnostic::new(
                format!("router_layers_index[{i}]"),
                format!("block {b} out of range for {n_blocks} blocks"),
            )
        })
        .collect()
}
