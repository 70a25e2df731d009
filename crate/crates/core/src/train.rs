//! Losses, analytic gradients and plain SGD for the trainable subsets:
//! routers (traditional/btx) and stitch layers (bts). Everything else stays
//! frozen.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind};
use crate::error::{Error, Result};
use crate::model::ffn::{LbGrad, RouterGrads};
use crate::model::layers::Rows;
use crate::model::{named_router_grads, router_name, MoeModel, RouteDecision, RouteSite};
use crate::stitch::BtsModel;
use crate::tensor::{self, Tensor};

/// How `f_e` counts routing decisions in the load-balancing loss.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyMode {
    /// Each decision counts once, for its top-1 expert.
    #[default]
    Top1,
    /// Each of the `k` selected experts receives `1/k`.
    AllK,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub lb: f64,
    pub alpha: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(ce: f64, lb: f64, alpha: f64) -> Self {
        // alpha == 0 must leave the total bitwise equal to ce.
        let total = if alpha == 0.0 { ce } else { ce + alpha * lb };
        Self { ce, lb, alpha, total }
    }
}

/// `f_e`: share of decisions assigned to each expert.
pub fn expert_frequencies(decisions: &[RouteDecision], num_experts: usize, mode: FrequencyMode) -> Result<Vec<f64>> {
    if decisions.is_empty() {
        return Err(Error::EmptyInput("routing decisions"));
    }
    let mut f = vec![0.0; num_experts];
    for d in decisions {
        check_decision(d, num_experts)?;
        match mode {
            FrequencyMode::Top1 => f[d.top1()] += 1.0,
            FrequencyMode::AllK => {
                let share = 1.0 / d.selected.len() as f64;
                for &e in &d.selected {
                    f[e] += share;
                }
            }
        }
    }
    let n = decisions.len() as f64;
    Ok(f.into_iter().map(|c| c / n).collect())
}

fn check_decision(d: &RouteDecision, num_experts: usize) -> Result<()> {
    if d.logits.len() != num_experts {
        return Err(Error::DimensionMismatch {
            lhs: vec![d.logits.len()],
            rhs: vec![num_experts],
            context: "routing decision logits",
        });
    }
    Ok(())
}

/// `P_e`: mean full-softmax probability of each expert.
pub fn mean_probabilities(decisions: &[RouteDecision], num_experts: usize) -> Result<Vec<f64>> {
    if decisions.is_empty() {
        return Err(Error::EmptyInput("routing decisions"));
    }
    let mut p = vec![0.0; num_experts];
    for d in decisions {
        check_decision(d, num_experts)?;
        tensor::axpy(&mut p, 1.0, &d.full_probs());
    }
    let n = decisions.len() as f64;
    Ok(p.into_iter().map(|v| v / n).collect())
}

/// `lb = E · Σ_e f_e · P_e`; exactly 1 under uniform routing.
pub fn load_balance_loss(decisions: &[RouteDecision], num_experts: usize) -> Result<f64> {
    load_balance_loss_with(decisions, num_experts, FrequencyMode::Top1)
}

pub fn load_balance_loss_with(decisions: &[RouteDecision], num_experts: usize, mode: FrequencyMode) -> Result<f64> {
    let f = expert_frequencies(decisions, num_experts, mode)?;
    let p = mean_probabilities(decisions, num_experts)?;
    Ok(num_experts as f64 * tensor::dot(&f, &p))
}

/// Mean next-token cross-entropy over every position that has a successor,
/// and its gradient with respect to each sequence's logits.
fn cross_entropy(batch_logits: &[Rows], batch: &[Vec<u32>]) -> Result<(f64, Vec<Rows>)> {
    let m: usize = batch.iter().map(|s| s.len().saturating_sub(1)).sum();
    if m == 0 {
        return Err(Error::EmptyInput("training targets"));
    }
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(batch.len());
    for (logits, ids) in batch_logits.iter().zip(batch) {
        let mut g = vec![vec![0.0; logits[0].len()]; logits.len()];
        for t in 0..ids.len().saturating_sub(1) {
            let target = ids[t + 1] as usize;
            let p = tensor::softmax(&logits[t])?;
            loss -= p[target].ln();
            for (gv, pv) in g[t].iter_mut().zip(&p) {
                *gv = pv / m as f64;
            }
            g[t][target] -= 1.0 / m as f64;
        }
        grads.push(g);
    }
    Ok((loss / m as f64, grads))
}

fn check_batch(batch: &[Vec<u32>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch"));
    }
    Ok(())
}

fn require_routed(model: &MoeModel) -> Result<()> {
    match model.kind {
        ModelKind::Traditional | ModelKind::Btx if model.num_experts > 0 && !model.routed_blocks().is_empty() => Ok(()),
        other => Err(Error::ModeMismatch {
            expected: "traditional or btx",
            actual: other.as_str().into(),
        }),
    }
}

/// Total loss of a routed model over a batch.
pub fn router_loss(model: &MoeModel, batch: &[Vec<u32>], alpha: f64, mode: FrequencyMode) -> Result<LossBreakdown> {
    router_loss_and_grads(model, batch, alpha, mode, false).map(|(l, _)| l)
}

/// Analytic gradient of the total loss with respect to every router, with
/// top-k selections and `f_e` held fixed.
pub fn router_grads(
    model: &MoeModel,
    batch: &[Vec<u32>],
    alpha: f64,
    mode: FrequencyMode,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    router_loss_and_grads(model, batch, alpha, mode, true)
}

fn router_loss_and_grads(
    model: &MoeModel,
    batch: &[Vec<u32>],
    alpha: f64,
    mode: FrequencyMode,
    with_grads: bool,
) -> Result<(LossBreakdown, BTreeMap<String, Tensor>)> {
    require_routed(model)?;
    check_batch(batch)?;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::NonFinite(format!("alpha = {alpha}")));
    }
    let caches = batch
        .iter()
        .map(|ids| model.forward_cached(ids))
        .collect::<Result<Vec<_>>>()?;
    let decisions: Vec<RouteDecision> = caches.iter().flat_map(|c| c.decisions()).collect();
    let e = model.num_experts;
    let f = expert_frequencies(&decisions, e, mode)?;
    let p = mean_probabilities(&decisions, e)?;
    let lb = e as f64 * tensor::dot(&f, &p);
    let logits: Vec<Rows> = caches.iter().map(|c| c.logits.clone()).collect();
    let (ce, dlogits) = cross_entropy(&logits, batch)?;
    let loss = LossBreakdown::new(ce, lb, alpha);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss:?}")));
    }
    if !with_grads {
        return Ok((loss, BTreeMap::new()));
    }

    let lb_grad = (alpha != 0.0).then(|| LbGrad {
        scale: alpha * e as f64 / decisions.len() as f64,
        f,
    });
    let mut grads = RouterGrads::new();
    for (cache, dl) in caches.iter().zip(&dlogits) {
        model.backward(cache, dl, &mut grads, lb_grad.as_ref());
    }
    Ok((loss, named_router_grads(model, &grads)?))
}

/// Mean next-token cross-entropy of a BTS model.
pub fn stitch_loss(model: &BtsModel, batch: &[Vec<u32>]) -> Result<f64> {
    check_batch(batch)?;
    let logits = batch
        .iter()
        .map(|ids| model.forward_cached(ids).map(|c| c.logits))
        .collect::<Result<Vec<_>>>()?;
    Ok(cross_entropy(&logits, batch)?.0)
}

/// Analytic cross-entropy gradient with respect to every stitch tensor.
pub fn stitch_grads(model: &BtsModel, batch: &[Vec<u32>]) -> Result<(f64, BTreeMap<String, Tensor>)> {
    check_batch(batch)?;
    let caches = batch
        .iter()
        .map(|ids| model.forward_cached(ids))
        .collect::<Result<Vec<_>>>()?;
    let logits: Vec<Rows> = caches.iter().map(|c| c.logits.clone()).collect();
    let (ce, dlogits) = cross_entropy(&logits, batch)?;
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (cache, dl) in caches.iter().zip(&dlogits) {
        for (name, g) in model.backward(cache, dl)? {
            match acc.get_mut(&name) {
                Some(a) => tensor::axpy(a, 1.0, &g),
                None => {
                    acc.insert(name, g);
                }
            }
        }
    }
    let params = model.stitch_params();
    let grads = acc
        .into_iter()
        .map(|(name, g)| {
            let shape = params[&name].shape().to_vec();
            Tensor::new(shape, g).map(|t| (name, t))
        })
        .collect::<Result<_>>()?;
    Ok((ce, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub alpha: f64,
    pub seed: u64,
    /// Sequences drawn per step; `None` uses the whole dataset every step.
    pub batch_size: Option<usize>,
    pub frequency_mode: FrequencyMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            lr: 0.1,
            alpha: 0.0,
            seed: 0,
            batch_size: None,
            frequency_mode: FrequencyMode::Top1,
        }
    }
}

/// Bookkeeping for a run: what is trainable and how far it has gone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub trainable: Vec<String>,
    pub lr: f64,
    pub step: usize,
    pub seed: u64,
}

fn batch_for_step(dataset: &[Vec<u32>], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<u32>> {
    match cfg.batch_size {
        Some(b) if b < dataset.len() => sample(rng, dataset.len(), b)
            .into_iter()
            .map(|i| dataset[i].clone())
            .collect(),
        _ => dataset.to_vec(),
    }
}

fn check_train(dataset: &[Vec<u32>], cfg: &TrainConfig) -> Result<()> {
    check_batch(dataset)?;
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::NonFinite(format!("learning rate {}", cfg.lr)));
    }
    if cfg.batch_size == Some(0) {
        return Err(Error::EmptyInput("batch_size"));
    }
    Ok(())
}

fn sgd(param: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor> {
    if lr == 0.0 {
        return Ok(param.clone());
    }
    param.sub(&grad.scale(lr))
}

/// Plain SGD on the routers. Returns the loss measured before each update.
pub fn train(model: &mut MoeModel, dataset: &[Vec<u32>], cfg: &TrainConfig) -> Result<(TrainState, Vec<LossBreakdown>)> {
    require_routed(model)?;
    check_train(dataset, cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    let trainable: Vec<String> = model.routers().into_iter().map(|(n, _)| n).collect();
    for _ in 0..cfg.steps {
        let batch = batch_for_step(dataset, cfg, &mut rng);
        let (loss, grads) = router_grads(model, &batch, cfg.alpha, cfg.frequency_mode)?;
        curve.push(loss);
        let current: Vec<(usize, RouteSite, Tensor)> = model
            .blocks
            .iter()
            .enumerate()
            .flat_map(|(l, b)| b.ffn.routers().into_iter().map(move |(s, w)| (l, s, w.clone())))
            .collect();
        for (l, site, w) in current {
            let g = &grads[&router_name(l, site)];
            model.set_router(l, site, sgd(&w, g, cfg.lr)?)?;
        }
    }
    model.alpha = cfg.alpha;
    Ok((
        TrainState {
            trainable,
            lr: cfg.lr,
            step: cfg.steps,
            seed: cfg.seed,
        },
        curve,
    ))
}

/// Plain SGD on the stitch layers. `lb` is always 0 for bts models.
pub fn train_stitches(model: &mut BtsModel, dataset: &[Vec<u32>], cfg: &TrainConfig) -> Result<(TrainState, Vec<LossBreakdown>)> {
    check_train(dataset, cfg)?;
    let trainable: Vec<String> = model.stitch_params().into_keys().collect();
    if trainable.is_empty() {
        return Err(Error::EmptyInput("stitch parameters"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let batch = batch_for_step(dataset, cfg, &mut rng);
        let (ce, grads) = stitch_grads(model, &batch)?;
        curve.push(LossBreakdown::new(ce, 0.0, 0.0));
        let updates = model
            .stitch_params()
            .into_iter()
            .map(|(name, p)| sgd(p, &grads[&name], cfg.lr).map(|t| (name, t)))
            .collect::<Result<Vec<_>>>()?;
        for (name, t) in updates {
            model.set_stitch_param(&name, t)?;
        }
    }
    Ok((
        TrainState {
            trainable,
            lr: cfg.lr,
            step: cfg.steps,
            seed: cfg.seed,
        },
        curve,
    ))
}

/// Copies trained routers back into the checkpoint they came from.
pub fn write_routers(model: &MoeModel, ckpt: &mut Checkpoint) -> Result<()> {
    for (name, t) in model.routers() {
        ckpt.replace(&name, t.clone())?;
    }
    if let Some(moe) = ckpt.manifest.moe.as_mut() {
        moe.alpha = model.alpha;
    }
    Ok(())
}

/// Copies trained stitch tensors back into a bts checkpoint.
pub fn write_stitches(model: &BtsModel, ckpt: &mut Checkpoint) -> Result<()> {
    for (name, t) in model.stitch_params() {
        ckpt.replace(&name, t.clone())?;
    }
    Ok(())
}

/// Names of the trainable tensors in a checkpoint: routers or stitch layers.
pub fn is_trainable(name: &str) -> bool {
    name.starts_with("stitch.") || name.ends_with(".router.weight")
}

/// SHA-256 of every frozen tensor, for before/after comparisons.
pub fn frozen_checksums(ckpt: &Checkpoint) -> BTreeMap<String, String> {
    ckpt.checksums()
        .into_iter()
        .filter(|(name, _)| !is_trainable(name))
        .collect()
}

/// Central differences of `f` around `at`, one coordinate at a time.
pub fn finite_difference(at: &Tensor, step: f64, mut f: impl FnMut(&Tensor) -> Result<f64>) -> Result<Tensor> {
    let mut out = Vec::with_capacity(at.len());
    let mut data = at.data().to_vec();
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + step;
        let plus = f(&Tensor::new(at.shape().to_vec(), data.clone())?)?;
        data[i] = orig - step;
        let minus = f(&Tensor::new(at.shape().to_vec(), data.clone())?)?;
        data[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(at.shape().to_vec(), out)
}

/// `max |a − n| / max(max |n|, 1e-8)`: error relative to the gradient's scale.
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs())
        .fold(0.0, f64::max);
    let scale = numeric.data().iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
    diff / scale
}

/// Finite-difference oracle for one router of a routed model.
pub fn router_fd_check(
    model: &MoeModel,
    batch: &[Vec<u32>],
    alpha: f64,
    block: usize,
    site: RouteSite,
    step: f64,
) -> Result<f64> {
    let (_, grads) = router_grads(model, batch, alpha, FrequencyMode::Top1)?;
    let name = router_name(block, site);
    let analytic = grads.get(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
    let at = model
        .routers()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::MissingTensor(name.clone()))?;
    // f_e is held fixed in the analytic gradient; freeze it here too.
    let decisions: Vec<RouteDecision> = batch
        .iter()
        .map(|ids| model.forward(ids).map(|o| o.decisions))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let f = expert_frequencies(&decisions, model.num_experts, FrequencyMode::Top1)?;
    let mut probe = model.clone();
    let numeric = finite_difference(&at, step, |w| {
        probe.set_router(block, site, w.clone())?;
        fixed_f_loss(&probe, batch, alpha, &f)
    })?;
    Ok(relative_error(analytic, &numeric))
}

fn fixed_f_loss(model: &MoeModel, batch: &[Vec<u32>], alpha: f64, f: &[f64]) -> Result<f64> {
    let outs = batch.iter().map(|ids| model.forward(ids)).collect::<Result<Vec<_>>>()?;
    let decisions: Vec<RouteDecision> = outs.iter().flat_map(|o| o.decisions.clone()).collect();
    let p = mean_probabilities(&decisions, model.num_experts)?;
    let lb = model.num_experts as f64 * tensor::dot(f, &p);
    let logits: Vec<Rows> = outs
        .iter()
        .map(|o| (0..o.logits.rows()).map(|r| o.logits.row(r).to_vec()).collect())
        .collect();
    let (ce, _) = cross_entropy(&logits, batch)?;
    Ok(ce + alpha * lb)
}

/// Finite-difference oracle for one stitch tensor of a bts model.
pub fn stitch_fd_check(model: &BtsModel, batch: &[Vec<u32>], name: &str, step: f64) -> Result<f64> {
    let (_, grads) = stitch_grads(model, batch)?;
    let analytic = grads.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
    let at = (*model
        .stitch_params()
        .get(name)
        .ok_or_else(|| Error::MissingTensor(name.to_string()))?)
    .clone();
    let mut probe = model.clone();
    let numeric = finite_difference(&at, step, |w| {
        probe.set_stitch_param(name, w.clone())?;
        stitch_loss(&probe, batch)
    })?;
    Ok(relative_error(analytic, &numeric))
}
