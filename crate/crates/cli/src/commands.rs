use std::fmt::Write as _;
use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use moemix::checkpoint::{Arch, Checkpoint};
use moemix::compose::compose_from_dir;
use moemix::model::init::random_dense;
use moemix::tokenizer::{self, ByteTokenizer};
use moemix::trace::{TraceFilter, DEFAULT_COLLAPSE_THRESHOLD};
use moemix::train::{self, FrequencyMode, LossBreakdown, TrainConfig};
use moemix::{MoeConfig, RouteSite};

use crate::engine::{self, Loaded};
use crate::error::{CliError, CliResult};
use crate::server::{self, ServeConfig};

#[derive(Debug, Parser)]
#[command(name = "moemix", version, about = "Compose, train and inspect Mixture-of-Experts models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a seeded random dense checkpoint to use as an expert.
    InitExpert(InitExpertArgs),
    /// Merge dense experts into one MoE checkpoint as described by a config.
    Compose(ComposeArgs),
    /// Greedy continuation of a prompt.
    Generate(GenerateArgs),
    /// Routing trace document for a prompt (traditional and btx models).
    Trace(TraceArgs),
    /// Stitch gate values for a prompt (bts models).
    StitchTrace(StitchTraceArgs),
    /// Train routers or stitch layers on a text corpus.
    Train(TrainArgs),
    /// Serve trace documents over HTTP.
    Serve(ServeArgs),
    /// Summarize a checkpoint.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct InitExpertArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = tokenizer::VOCAB_SIZE)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    pub d_model: usize,
    #[arg(long, default_value_t = 2)]
    pub n_blocks: usize,
    #[arg(long, default_value_t = 4)]
    pub n_heads: usize,
    #[arg(long, default_value_t = 64)]
    pub d_ff: usize,
}

#[derive(Debug, Args)]
pub struct ComposeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory that `model_id` entries are resolved against; defaults to
    /// the config file's directory.
    #[arg(long)]
    pub experts_dir: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 16)]
    pub max_new: usize,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    /// Restrict aggregation to these blocks, e.g. `--blocks 0,2`.
    #[arg(long, value_delimiter = ',')]
    pub blocks: Option<Vec<usize>>,
    /// Restrict aggregation to these projections: block, gate, up, down.
    #[arg(long, value_delimiter = ',', value_parser = parse_site)]
    pub projections: Option<Vec<RouteSite>>,
}

fn parse_site(s: &str) -> Result<RouteSite, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown projection '{s}' (expected block, gate, up or down)"))
}

impl FilterArgs {
    pub fn filter(&self) -> TraceFilter {
        TraceFilter {
            blocks: self.blocks.as_ref().map(|b| b.iter().copied().collect()),
            projections: self.projections.as_ref().map(|p| p.iter().copied().collect()),
        }
    }
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub max_new: usize,
    #[command(flatten)]
    pub filter: FilterArgs,
    #[arg(long, default_value_t = DEFAULT_COLLAPSE_THRESHOLD)]
    pub collapse_threshold: f64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct StitchTraceArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub max_new: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Plain text, one training sequence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    /// Load-balancing weight; defaults to the checkpoint's alpha.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sequences per step; the whole corpus when omitted.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Count all k selections (weight 1/k) in the load-balancing frequency.
    #[arg(long)]
    pub all_k: bool,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    #[arg(long, default_value_t = 4096)]
    pub max_prompt_bytes: usize,
    #[arg(long, default_value_t = 64)]
    pub max_new_limit: usize,
    #[arg(long, default_value_t = 10_000)]
    pub timeout_ms: u64,
    /// Requests remembered for `/api/experts`.
    #[arg(long, default_value_t = 32)]
    pub history: usize,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Print the raw manifest instead of a summary.
    #[arg(long)]
    pub json: bool,
}

pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> CliResult<()> {
    match cli.command {
        Command::InitExpert(a) => init_expert(&a, out),
        Command::Compose(a) => compose(&a, out),
        Command::Generate(a) => generate(&a, out),
        Command::Trace(a) => trace(&a, out),
        Command::StitchTrace(a) => stitch_trace(&a, out),
        Command::Train(a) => train_cmd(&a, out),
        Command::Serve(a) => serve(&a),
        Command::Inspect(a) => inspect(&a, out),
    }
}

fn emit(out: &mut dyn std::io::Write, text: &str) -> CliResult<()> {
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_or_print(path: Option<&Path>, text: &str, out: &mut dyn std::io::Write) -> CliResult<()> {
    match path {
        Some(p) => write_file(p, text),
        None => emit(out, &format!("{text}\n")),
    }
}

fn init_expert(a: &InitExpertArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let arch = Arch {
        vocab_size: a.vocab_size,
        d_model: a.d_model,
        n_blocks: a.n_blocks,
        n_heads: a.n_heads,
        d_ff: a.d_ff,
    };
    let ckpt = random_dense(arch, a.seed)?;
    ckpt.save(&a.out)?;
    emit(out, &format!("wrote dense expert ({} tensors) to {}\n", ckpt.tensors.len(), a.out.display()))
}

fn compose(a: &ComposeArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let mut config = MoeConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(alpha) = a.alpha {
        config.alpha = alpha;
    }
    let base = match &a.experts_dir {
        Some(d) => d.clone(),
        None => a.config.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let (ckpt, report) = compose_from_dir(&config, &base)?;
    report.check_coverage(&ckpt)?;
    ckpt.save(&a.out)?;
    let report_json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_file(&a.out.join("report.json"), &format!("{report_json}\n"))?;
    let mut msg = format!(
        "composed {} model: {} shared, {} expert, {} new tensors -> {}\n",
        ckpt.manifest.model_kind.as_str(),
        report.shared_param_names.len(),
        report.expert_param_names.len(),
        report.new_param_names.len(),
        a.out.display()
    );
    for s in &report.unmatched_selectors {
        let _ = writeln!(msg, "note: selector '{s}' matched no feed-forward projection");
    }
    for act in &report.alignment_actions {
        let _ = writeln!(msg, "note: '{}' aligned by {:?} from shapes {:?}", act.name, act.policy_applied, act.shapes);
    }
    emit(out, &msg)
}

fn non_empty_prompt(prompt: &str) -> CliResult<Vec<u32>> {
    let ids = ByteTokenizer.encode(prompt);
    if ids.is_empty() {
        return Err(moemix::Error::EmptyInput("prompt").into());
    }
    Ok(ids)
}

fn generate(a: &GenerateArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let ids = non_empty_prompt(&a.prompt)?;
    let (_, model) = Loaded::load(&a.model)?;
    let all = model.generate(&ids, a.max_new)?;
    let text = ByteTokenizer.decode(&all)?;
    emit(out, &format!("{text}\n"))
}

fn trace(a: &TraceArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    non_empty_prompt(&a.prompt)?;
    let (_, model) = Loaded::load(&a.model)?;
    let doc = engine::trace_document(model.routed()?, &a.prompt, a.max_new, &a.filter.filter(), a.collapse_threshold)?;
    write_or_print(a.out.as_deref(), &doc.to_json(), out)
}

fn stitch_trace(a: &StitchTraceArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    non_empty_prompt(&a.prompt)?;
    let (_, model) = Loaded::load(&a.model)?;
    let doc = engine::stitch_trace(model.stitched()?, &a.prompt, a.max_new)?;
    let json = serde_json::to_string_pretty(&doc).expect("stitch traces serialize");
    write_or_print(a.out.as_deref(), &json, out)
}

pub fn read_corpus(path: &Path) -> CliResult<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let tok = ByteTokenizer;
    let seqs: Vec<Vec<u32>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| tok.encode(l))
        .collect();
    if seqs.is_empty() {
        return Err(moemix::Error::EmptyInput("corpus").into());
    }
    Ok(seqs)
}

pub fn loss_csv(curve: &[LossBreakdown]) -> String {
    let mut s = String::from("step,ce,lb,alpha,total\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{},{}", l.ce, l.lb, l.alpha, l.total);
    }
    s
}

fn train_cmd(a: &TrainArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let data = read_corpus(&a.corpus)?;
    let (mut ckpt, model) = Loaded::load(&a.model)?;
    let manifest_alpha = ckpt.manifest.moe.as_ref().map_or(0.0, |m| m.alpha);
    let cfg = TrainConfig {
        steps: a.steps,
        lr: a.lr,
        alpha: a.alpha.unwrap_or(manifest_alpha),
        seed: a.seed,
        batch_size: a.batch_size,
        frequency_mode: if a.all_k { FrequencyMode::AllK } else { FrequencyMode::Top1 },
    };
    let before = train::frozen_checksums(&ckpt);
    let curve = match model {
        Loaded::Routed(mut m) => {
            let (_, curve) = train::train(&mut m, &data, &cfg)?;
            train::write_routers(&m, &mut ckpt)?;
            curve
        }
        Loaded::Stitched(mut m) => {
            let (_, curve) = train::train_stitches(&mut m, &data, &cfg)?;
            train::write_stitches(&m, &mut ckpt)?;
            curve
        }
    };
    if train::frozen_checksums(&ckpt) != before {
        return Err(moemix::Error::InvariantViolation("a frozen tensor changed during training".into()).into());
    }
    ckpt.save(&a.out)?;
    write_file(&a.out.join("loss.csv"), &loss_csv(&curve))?;
    let summary = match (curve.first(), curve.last()) {
        (Some(f), Some(l)) => format!("loss {:.6} -> {:.6} over {} steps", f.total, l.total, curve.len()),
        _ => "no steps run".to_string(),
    };
    emit(out, &format!("{summary}; wrote {}\n", a.out.display()))
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let cfg = ServeConfig {
        bind: a.bind,
        model_dir: a.model.clone(),
        max_prompt_bytes: a.max_prompt_bytes,
        max_new_limit: a.max_new_limit,
        request_timeout: Duration::from_millis(a.timeout_ms),
        history: a.history,
    };
    cfg.check()?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io("<runtime>", e))?;
    rt.block_on(server::serve(cfg))
}

fn inspect(a: &InspectArgs, out: &mut dyn std::io::Write) -> CliResult<()> {
    let ckpt = Checkpoint::load(&a.model)?;
    if a.json {
        let m = serde_json::to_string_pretty(&ckpt.manifest).expect("manifest serializes");
        return emit(out, &format!("{m}\n"));
    }
    let m = &ckpt.manifest;
    let mut s = String::new();
    let a_ = m.arch;
    let _ = writeln!(s, "kind        {}", m.model_kind.as_str());
    let _ = writeln!(
        s,
        "arch        vocab {} d_model {} blocks {} heads {} d_ff {}",
        a_.vocab_size, a_.d_model, a_.n_blocks, a_.n_heads, a_.d_ff
    );
    if let Some(moe) = &m.moe {
        let _ = writeln!(s, "experts     {} ({})", moe.num_experts, moe.expert_names.join(", "));
        let _ = writeln!(s, "top-k       {}", moe.num_experts_per_tok);
        let _ = writeln!(s, "alpha       {}", moe.alpha);
        if let Some(f) = moe.stitch_freq {
            let _ = writeln!(s, "stitch_freq {f}");
        }
    }
    let params: usize = ckpt.tensors.values().map(|t| t.len()).sum();
    let _ = writeln!(s, "tensors     {} ({params} parameters, {} bytes on disk)", ckpt.tensors.len(), ckpt.blob_len());
    for e in &m.tensors {
        let _ = writeln!(s, "  {:<56} {:?}", e.name, e.shape);
    }
    emit(out, &s)
}

/// Flushes and maps the outcome to a process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    let result = run(cli, &mut lock);
    let _ = lock.flush();
    match result {
        Ok(()) => 0,
        Err(e) => {
            for line in e.report() {
                eprintln!("error: {line}");
            }
            e.exit_code()
        }
    }
}
