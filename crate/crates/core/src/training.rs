//! Fine-tuning: task losses, the Bregman proximal-point objective, AdamW
//! steps over the trainable set, the epoch loop and evaluation metrics.
//!
//! The objective at every step is
//!
//! ```text
//! (1 − μ) · L_vanilla(θ) + μ · E_x[ ℓ(f(x; θ), f(x; θ_t)) ]
//! ```
//!
//! where θ_t is the previous optimizer iterate (held constant) and ℓ is the
//! symmetric KL divergence between Bernoulli outputs. For regression heads
//! ℓ is the squared output difference.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::model::{GraphInput, Model, TaskKind};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::{derive_seed, seeded_rng, Tensor};

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

fn check_labels(labels: &[f64], task: TaskKind) -> Result<()> {
    if task == TaskKind::Classification {
        if let Some(bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
            bail!(Data, "classification label {bad} is not 0 or 1");
        }
    }
    Ok(())
}

/// Mean binary cross-entropy (classification) or mean squared error.
pub fn vanilla_loss(tape: &mut Tape<'_>, preds: Var, labels: &[f64], task: TaskKind) -> Result<Var> {
    check_labels(labels, task)?;
    let n = tape.value(preds).numel();
    if n != labels.len() {
        bail!(Shape, "{n} predictions for {} labels", labels.len());
    }
    let y = tape.leaf(Tensor::vector(labels.to_vec()), false);
    match task {
        TaskKind::Classification => {
            let p = tape.clamp(preds, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let one = tape.leaf(Tensor::scalar(1.0), false);
            let log_p = tape.log(p)?;
            let q = tape.sub(one, p)?;
            let log_q = tape.log(q)?;
            let not_y = tape.sub(one, y)?;
            let pos = tape.mul(y, log_p)?;
            let neg = tape.mul(not_y, log_q)?;
            let ll = tape.add(pos, neg)?;
            let mean = tape.mean(ll);
            Ok(tape.scale(mean, -1.0))
        }
        TaskKind::Regression => {
            let diff = tape.sub(preds, y)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        }
    }
}

/// `KL(p‖q) + KL(q‖p)` for Bernoulli distributions, after clamping.
pub fn symmetric_kl(p: f64, q: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let q = q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    let logit = |x: f64| x.ln() - (1.0 - x).ln();
    (p - q) * (logit(p) - logit(q))
}

/// Mean divergence between current outputs and the constant outputs of the
/// previous iterate. Gradients flow into `preds` only.
pub fn bregman_divergence(tape: &mut Tape<'_>, preds: Var, prev: &[f64], task: TaskKind) -> Result<Var> {
    let n = tape.value(preds).numel();
    if n != prev.len() {
        bail!(Shape, "{n} predictions for {} previous outputs", prev.len());
    }
    match task {
        TaskKind::Classification => {
            let clamped: Vec<f64> = prev.iter().map(|q| q.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)).collect();
            let prev_logit: Vec<f64> = clamped.iter().map(|q| q.ln() - (1.0 - q).ln()).collect();
            let q = tape.leaf(Tensor::vector(clamped), false);
            let q_logit = tape.leaf(Tensor::vector(prev_logit), false);
            let one = tape.leaf(Tensor::scalar(1.0), false);
            let p = tape.clamp(preds, PROB_CLAMP, 1.0 - PROB_CLAMP);
            let log_p = tape.log(p)?;
            let comp = tape.sub(one, p)?;
            let log_comp = tape.log(comp)?;
            let p_logit = tape.sub(log_p, log_comp)?;
            let dp = tape.sub(p, q)?;
            let dl = tape.sub(p_logit, q_logit)?;
            let terms = tape.mul(dp, dl)?;
            Ok(tape.mean(terms))
        }
        TaskKind::Regression => {
            let q = tape.leaf(Tensor::vector(prev.to_vec()), false);
            let diff = tape.sub(preds, q)?;
            let sq = tape.mul(diff, diff)?;
            Ok(tape.mean(sq))
        }
    }
}

/// `(1 − μ)·vanilla + μ·bregman`.
pub fn total_loss(tape: &mut Tape<'_>, vanilla: Var, bregman: Var, mu: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&mu) {
        bail!(Config, "mu must lie in [0, 1), got {mu}");
    }
    let a = tape.scale(vanilla, 1.0 - mu);
    let b = tape.scale(bregman, mu);
    tape.add(a, b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub seed: u64,
    /// Epochs without eval improvement before stopping; 0 disables.
    pub patience: usize,
    /// When false the Bregman branch is not evaluated at all.
    pub bregman: bool,
    /// Cap on optimizer steps, mostly for short diagnostic runs.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            epochs: 20,
            mu: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            eps: 1e-8,
            seed: 0,
            patience: 10,
            bregman: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mu) {
            bail!(Config, "mu must lie in [0, 1), got {}", self.mu);
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(self.lr > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_metric: Option<f64>,
}

/// Optimizer state plus the previous-iterate snapshot of the trainable set.
#[derive(Clone, Debug)]
pub struct TrainState {
    /// Trainable parameter ids, in store order.
    pub ids: Vec<usize>,
    /// θ_t: trainable values before the most recent step.
    pub prev: Vec<Tensor>,
    pub optimizer: AdamW,
    pub step: u64,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    pub fn new(model: &Model, config: &TrainConfig) -> Self {
        let ids = model.params.trainable_ids();
        let prev: Vec<Tensor> = ids.iter().map(|&i| model.params.get(i).tensor.clone()).collect();
        let refs: Vec<&Tensor> = prev.iter().collect();
        let optimizer = AdamW::new(config.optimizer(), &refs);
        TrainState {
            ids,
            prev,
            optimizer,
            step: 0,
            history: Vec::new(),
        }
    }

    pub fn current(&self, model: &Model) -> Vec<Tensor> {
        self.ids.iter().map(|&i| model.params.get(i).tensor.clone()).collect()
    }
}

/// One AdamW update of the trainable set; θ_t becomes the pre-step θ.
pub fn adamw_step(state: &mut TrainState, model: &mut Model, grads: &[Option<Tensor>]) -> Result<()> {
    if grads.len() != state.ids.len() {
        bail!(
            Contract,
            "{} gradients for {} trainable tensors",
            grads.len(),
            state.ids.len()
        );
    }
    let names: Vec<String> = state.ids.iter().map(|&i| model.params.get(i).name.clone()).collect();
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
    let pre_step = state.current(model);
    let mut tensors = model.params.tensors_mut(&state.ids);
    state.optimizer.update(&mut tensors, &grad_refs, &name_refs)?;
    state.prev = pre_step;
    state.step += 1;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Ap,
    Rmse,
}

impl Metric {
    pub fn default_for(task: TaskKind) -> Metric {
        match task {
            TaskKind::Classification => Metric::Auc,
            TaskKind::Regression => Metric::Rmse,
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, Metric::Rmse)
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Auc => "auc",
            Metric::Ap => "ap",
            Metric::Rmse => "rmse",
        }
    }
}

fn split_classes(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        bail!(Shape, "{} scores for {} labels", scores.len(), labels.len());
    }
    check_labels(labels, TaskKind::Classification)?;
    let pos = labels.iter().filter(|&&y| y == 1.0).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        bail!(UndefinedMetric, "needs both classes, got {pos} positive and {neg} negative");
    }
    Ok((pos, neg))
}

/// ROC AUC via midranks: probability that a random positive outscores a
/// random negative, ties counting one half.
pub fn roc_auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, neg) = split_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps midranks integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if labels[k] == 1.0 {
                rank_sum2 += mid2;
            }
        }
        i = j + 1;
    }
    let pos = pos as u64;
    let u2 = rank_sum2 - pos * (pos + 1);
    Ok(u2 as f64 / (2 * pos * neg as u64) as f64)
}

/// Average precision: `Σ (R_k − R_{k−1}) · P_k` over distinct score
/// thresholds taken in decreasing order.
pub fn average_precision(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (pos, _) = split_classes(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1.0 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn rmse(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() || preds.is_empty() {
        bail!(Shape, "{} predictions for {} targets", preds.len(), targets.len());
    }
    let mse = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / preds.len() as f64;
    Ok(mse.sqrt())
}

pub fn compute_metric(metric: Metric, preds: &[f64], labels: &[f64]) -> Result<f64> {
    match metric {
        Metric::Auc => roc_auc(preds, labels),
        Metric::Ap => average_precision(preds, labels),
        Metric::Rmse => rmse(preds, labels),
    }
}

pub fn evaluate(model: &Model, data: &[GraphInput], task: TaskKind, metric: Metric) -> Result<f64> {
    if matches!(metric, Metric::Auc | Metric::Ap) != (task == TaskKind::Classification) {
        bail!(Config, "metric {} does not fit a {task:?} task", metric.name());
    }
    if data.is_empty() {
        bail!(Data, "evaluation set is empty");
    }
    let preds = model.predict_values(data, task)?;
    let labels: Vec<f64> = data.iter().map(|g| g.label).collect();
    compute_metric(metric, &preds, &labels)
}

#[derive(Clone, Debug)]
pub struct FitReport {
    pub state: TrainState,
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

impl FitReport {
    pub fn history(&self) -> &[EpochRecord] {
        &self.state.history
    }
}

/// Loss of one batch on `tape`, with the Bregman branch evaluated against
/// the θ_t snapshot when enabled.
fn batch_objective<'a>(
    model: &'a Model,
    tape: &mut Tape<'a>,
    vars: &[Var],
    batch: &[&'a GraphInput],
    prev: &[Tensor],
    task: TaskKind,
    config: &TrainConfig,
) -> Result<Var> {
    let mut outs = Vec::with_capacity(batch.len());
    for input in batch {
        outs.push(model.forward(tape, vars, input, task)?);
    }
    let preds = tape.stack(&outs)?;
    let labels: Vec<f64> = batch.iter().map(|g| g.label).collect();
    let vanilla = vanilla_loss(tape, preds, &labels, task)?;
    if !config.bregman {
        return Ok(vanilla);
    }
    let prev_out: Vec<f64> = {
        let mut snap = Tape::new();
        let svars = model.bind_snapshot(&mut snap, prev);
        let mut v = Vec::with_capacity(batch.len());
        for input in batch {
            let y = model.forward(&mut snap, &svars, input, task)?;
            v.push(snap.value(y).item());
        }
        v
    };
    let breg = bregman_divergence(tape, preds, &prev_out, task)?;
    total_loss(tape, vanilla, breg, config.mu)
}

/// Fine-tunes the trainable parameters of `model`. With a non-empty eval set
/// the best-eval trainables are restored at the end.
pub fn fit(model: &mut Model, train: &[GraphInput], eval: &[GraphInput], task: TaskKind, config: &TrainConfig) -> Result<FitReport> {
    config.validate()?;
    if train.is_empty() {
        bail!(Data, "training set is empty");
    }
    let metric = Metric::default_for(task);
    let mut state = TrainState::new(model, config);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut since_best = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut rng = seeded_rng(derive_seed(config.seed, 0x5eed_0000 + epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut stop = false;
        for chunk in order.chunks(config.batch_size) {
            if chunk.is_empty() {
                log::warn!("skipping empty batch");
                continue;
            }
            let batch: Vec<&GraphInput> = chunk.iter().map(|&i| &train[i]).collect();
            let grads = {
                let mut tape = Tape::new();
                let vars = model.bind(&mut tape, true);
                let loss = batch_objective(model, &mut tape, &vars, &batch, &state.prev, task, config)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    bail!(Training, "loss became {value} at step {}", state.step);
                }
                loss_sum += value;
                batches += 1;
                let mut g = tape.backward(loss)?;
                state.ids.iter().map(|&i| g.take(vars[i])).collect::<Vec<_>>()
            };
            adamw_step(&mut state, model, &grads)?;
            if config.max_steps.is_some_and(|m| state.step as usize >= m) {
                stop = true;
                break;
            }
        }
        let eval_metric = if eval.is_empty() {
            None
        } else {
            Some(evaluate(model, eval, task, metric)?)
        };
        let train_loss = if batches == 0 { 0.0 } else { loss_sum / batches as f64 };
        log::debug!("epoch {epoch}: train loss {train_loss:.5}, eval {eval_metric:?}");
        state.history.push(EpochRecord {
            epoch,
            train_loss,
            eval_metric,
        });
        if let Some(m) = eval_metric {
            let improved = match &best {
                None => true,
                Some((_, b, _)) => {
                    if metric.higher_is_better() {
                        m > *b
                    } else {
                        m < *b
                    }
                }
            };
            if improved {
                best = Some((epoch, m, state.current(model)));
                since_best = 0;
            } else {
                since_best += 1;
                if config.patience > 0 && since_best >= config.patience {
                    break 'epochs;
                }
            }
        }
        if stop {
            break;
        }
    }
    let (best_epoch, best_metric) = match best {
        Some((epoch, m, values)) => {
            for (&id, t) in state.ids.iter().zip(values) {
                model.params.get_mut(id).tensor = t;
            }
            (Some(epoch), Some(m))
        }
        None => (None, None),
    };
    Ok(FitReport {
        state,
        best_epoch,
        best_metric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regression_loss_zero_at_labels() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.5, -2.0]), false);
        let l = vanilla_loss(&mut tape, p, &[1.5, -2.0], TaskKind::Regression).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn bce_half_probability() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.5]), false);
        let l = vanilla_loss(&mut tape, p, &[1.0], TaskKind::Classification).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn bce_rejects_bad_labels() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.5]), false);
        assert!(matches!(
            vanilla_loss(&mut tape, p, &[0.3], TaskKind::Classification),
            Err(crate::error::LabError::Data(_))
        ));
    }

    #[test]
    fn bce_is_batch_permutation_invariant() {
        let eval = |p: Vec<f64>, y: &[f64]| {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::vector(p), false);
            let l = vanilla_loss(&mut tape, v, y, TaskKind::Classification).unwrap();
            tape.value(l).item()
        };
        let a = eval(vec![0.2, 0.9, 0.6], &[0.0, 1.0, 1.0]);
        let b = eval(vec![0.6, 0.2, 0.9], &[1.0, 0.0, 1.0]);
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn symmetric_kl_examples() {
        assert_eq!(symmetric_kl(0.3, 0.3), 0.0);
        assert!((symmetric_kl(0.75, 0.25) - 3f64.ln()).abs() < 1e-12);
        assert_eq!(symmetric_kl(0.1, 0.8), symmetric_kl(0.8, 0.1));
    }

    #[test]
    fn total_loss_arithmetic() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::scalar(2.0), false);
        let b = tape.leaf(Tensor::scalar(4.0), false);
        let t = total_loss(&mut tape, v, b, 0.5).unwrap();
        assert_eq!(tape.value(t).item(), 3.0);
        let t0 = total_loss(&mut tape, v, b, 0.0).unwrap();
        assert_eq!(tape.value(t0).item(), 2.0);
        assert!(total_loss(&mut tape, v, b, 1.0).is_err());
    }

    #[test]
    fn metric_examples() {
        let auc = roc_auc(&[0.9, 0.8, 0.3, 0.2], &[1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(average_precision(&[0.9, 0.1], &[1.0, 0.0]).unwrap(), 1.0);
        assert!((rmse(&[1.0, 2.0], &[1.0, 4.0]).unwrap() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn single_class_metrics_are_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1.0, 1.0]),
            Err(crate::error::LabError::UndefinedMetric(_))
        ));
        assert!(matches!(
            average_precision(&[0.1, 0.2], &[0.0, 0.0]),
            Err(crate::error::LabError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn tied_scores_count_half() {
        assert_eq!(roc_auc(&[0.5, 0.5], &[1.0, 0.0]).unwrap(), 0.5);
    }
}
