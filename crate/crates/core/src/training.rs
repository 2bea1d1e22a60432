//! Pose-supervised training of the mask network through the full matching
//! pipeline, plus a directly mask-supervised baseline.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CartesianScan, Pose, Scan};
use crate::masknet::{Conv2d, InputFrame, MaskNet, Tape};
use crate::matching::Matcher;
use crate::scalar::{wrap_angle, Real};

/// Scan pair with the ground-truth pose `p` such that `z2 = warp_pose(z1, p)`.
#[derive(Debug, Clone)]
pub struct TrainingSample<T> {
    pub z1: Scan<T>,
    pub z2: Scan<T>,
    pub pose_gt: Pose<T>,
}

/// Cartesian scans with per-pixel binary labels (1 = keep).
#[derive(Debug, Clone)]
pub struct MaskSample<T> {
    /// One scan for single-input networks, two for dual-input.
    pub inputs: Vec<CartesianScan<T>>,
    pub labels: Vec<Array2<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub loss_weights: [f64; 3],
    pub optimizer: OptimizerKind,
    pub max_steps: usize,
    /// Validation evaluations without improvement before stopping; 0 disables early stopping.
    pub validation_patience: usize,
    pub validation_fraction: f64,
    /// Steps between validation evaluations.
    pub validation_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 5,
            beta: 1.0,
            loss_weights: [1.0; 3],
            optimizer: OptimizerKind::adam(),
            max_steps: 1000,
            validation_patience: 5,
            validation_fraction: 0.1,
            validation_interval: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::config("train.learning_rate", "must be finite and non-negative"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::config("train.beta", "must be positive"));
        }
        if self.loss_weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::config("train.loss_weights", "must all be positive"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::config("train.validation_fraction", "must lie in [0, 1)"));
        }
        if self.validation_interval == 0 {
            return Err(Error::config("train.validation_interval", "must be at least 1"));
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return Err(Error::config("train.optimizer", "adam needs beta1, beta2 in [0, 1) and eps > 0"));
            }
        }
        Ok(())
    }
}

/// Weighted squared pose error (heading residual wrapped) and its gradient w.r.t. `pred`.
pub fn pose_mse_loss<T: Real>(pred: &Pose<T>, gt: &Pose<T>, w: [T; 3]) -> (T, [T; 3]) {
    let r = [
        pred.dx - gt.dx,
        pred.dy - gt.dy,
        wrap_angle(pred.dtheta - gt.dtheta),
    ];
    let two = T::of(2.0);
    let loss = (0..3).fold(T::zero(), |acc, i| acc + w[i] * r[i] * r[i]);
    (loss, [0, 1, 2].map(|i| two * w[i] * r[i]))
}

/// Mean per-pixel binary cross-entropy and its gradient w.r.t. the prediction.
pub fn bce_loss<T: Real>(pred: &Array2<T>, label: &Array2<T>) -> Result<(T, Array2<T>)> {
    if pred.dim() != label.dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} does not match label {:?}",
            pred.dim(),
            label.dim()
        )));
    }
    let n = pred.len() as f64;
    let eps = 1e-12;
    let mut loss = 0.0;
    let grad = ndarray::Zip::from(pred).and(label).map_collect(|p, y| {
        let p = p.f64().clamp(eps, 1.0 - eps);
        let y = y.f64();
        loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        T::of((p - y) / (p * (1.0 - p)) / n)
    });
    Ok((T::of(loss / n), grad))
}

/// Moment accumulators mirroring the network's layers.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub step: u64,
    m: Vec<Conv2d<T>>,
    v: Vec<Conv2d<T>>,
}

fn zeros_like<T: Real>(layers: &[Conv2d<T>]) -> Vec<Conv2d<T>> {
    layers
        .iter()
        .map(|l| Conv2d::zeros(l.in_channels(), l.out_channels(), l.kernel()))
        .collect()
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, net: &MaskNet<T>) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam { .. } => (zeros_like(net.layers()), zeros_like(net.layers())),
        };
        Self { kind, step: 0, m, v }
    }

    /// One update `alpha <- alpha - lr * direction(grads)`.
    pub fn apply(&mut self, net: &mut MaskNet<T>, grads: &[Conv2d<T>], lr: f64) -> Result<()> {
        if grads.len() != net.layers().len() {
            return Err(Error::Shape("gradient list does not match the network".into()));
        }
        self.step += 1;
        let lr_t = T::of(lr);
        match self.kind {
            OptimizerKind::Sgd => {
                for (l, g) in net.layers_mut().iter_mut().zip(grads) {
                    l.weight.scaled_add(-lr_t, &g.weight);
                    l.bias.scaled_add(-lr_t, &g.bias);
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let update = |p: &mut T, g: T, m: &mut T, v: &mut T| {
                    let g = g.f64();
                    let mf = beta1 * m.f64() + (1.0 - beta1) * g;
                    let vf = beta2 * v.f64() + (1.0 - beta2) * g * g;
                    *m = T::of(mf);
                    *v = T::of(vf);
                    let step = lr * (mf / c1) / ((vf / c2).sqrt() + eps);
                    *p = T::of(p.f64() - step);
                };
                for (((l, g), m), v) in net
                    .layers_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(self.m.iter_mut())
                    .zip(self.v.iter_mut())
                {
                    ndarray::Zip::from(&mut l.weight)
                        .and(&g.weight)
                        .and(&mut m.weight)
                        .and(&mut v.weight)
                        .for_each(|p, g, m, v| update(p, *g, m, v));
                    ndarray::Zip::from(&mut l.bias)
                        .and(&g.bias)
                        .and(&mut m.bias)
                        .and(&mut v.bias)
                        .for_each(|p, g, m, v| update(p, *g, m, v));
                }
            }
        }
        Ok(())
    }
}

/// Loss before the step plus diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub max_abs_score: f64,
    pub grad_norm: f64,
}

fn check_sample<T: Real>(matcher: &Matcher<T>, s: &TrainingSample<T>) -> Result<()> {
    if !matcher.grid().region().contains(&s.pose_gt) {
        return Err(Error::Data(format!(
            "ground-truth pose {:?} lies outside the search region",
            s.pose_gt
        )));
    }
    Ok(())
}

fn check_beta<T: Real>(matcher: &Matcher<T>, cfg: &TrainConfig) -> Result<()> {
    if (matcher.beta().f64() - cfg.beta).abs() > 1e-12 * cfg.beta {
        return Err(Error::config(
            "train.beta",
            format!("matcher uses {} but the config says {}", matcher.beta(), cfg.beta),
        ));
    }
    Ok(())
}

fn add_into<T: Real>(acc: &mut [Conv2d<T>], g: &[Conv2d<T>], scale: T) {
    for (a, b) in acc.iter_mut().zip(g) {
        a.weight.scaled_add(scale, &b.weight);
        a.bias.scaled_add(scale, &b.bias);
    }
}

fn grad_norm<T: Real>(g: &[Conv2d<T>]) -> f64 {
    g.iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
        .map(|v| v.f64() * v.f64())
        .sum::<f64>()
        .sqrt()
}

/// Mean batch loss and its gradient with respect to every parameter.
pub fn batch_gradient<T: Real>(
    net: &MaskNet<T>,
    batch: &[TrainingSample<T>],
    matcher: &Matcher<T>,
    cfg: &TrainConfig,
) -> Result<(f64, Vec<Conv2d<T>>, f64)> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let w = cfg.loss_weights.map(T::of);
    let per_sample: Vec<Result<(f64, Vec<Conv2d<T>>, f64)>> = batch
        .par_iter()
        .map(|s| {
            check_sample(matcher, s)?;
            let trace = matcher.forward(&s.z1, &s.z2, Some(net))?;
            let max_c = trace.volume.max_abs().f64();
            let (loss, dpose) = pose_mse_loss(&trace.estimate.mean, &s.pose_gt, w);
            let grads = matcher.backward(trace, Some(net), dpose)?;
            Ok((loss.f64(), grads.net.expect("network supplied"), max_c))
        })
        .collect();
    let scale = T::of(1.0 / batch.len() as f64);
    let mut acc = zeros_like(net.layers());
    let mut loss = 0.0;
    let mut max_c = 0f64;
    for r in per_sample {
        let (l, g, c) = r?;
        loss += l;
        max_c = max_c.max(c);
        add_into(&mut acc, &g, scale);
    }
    Ok((loss / batch.len() as f64, acc, max_c))
}

fn non_finite<T: Real>(what: &str, net: &MaskNet<T>, max_c: f64) -> Error {
    Error::NonFinite(format!(
        "{what} (max |C| = {max_c:e}, max |alpha| = {:e})",
        net.max_abs_parameter().f64()
    ))
}

/// One optimizer step on the mean pose loss of `batch`; returns the pre-step loss.
pub fn train_step<T: Real>(
    net: &mut MaskNet<T>,
    batch: &[TrainingSample<T>],
    matcher: &Matcher<T>,
    cfg: &TrainConfig,
    opt: &mut OptimizerState<T>,
) -> Result<StepReport> {
    check_beta(matcher, cfg)?;
    let (loss, grads, max_c) = batch_gradient(net, batch, matcher, cfg)?;
    let gn = grad_norm(&grads);
    if !loss.is_finite() || !gn.is_finite() {
        return Err(non_finite("loss or gradient", net, max_c));
    }
    opt.apply(net, &grads, cfg.learning_rate)?;
    if !net.is_finite() {
        return Err(non_finite("parameters after update", net, max_c));
    }
    Ok(StepReport {
        loss,
        max_abs_score: max_c,
        grad_norm: gn,
    })
}

/// Mean pose loss of `net` (or raw scans when `None`) over `samples`.
pub fn evaluate_pose_loss<T: Real>(
    net: Option<&MaskNet<T>>,
    samples: &[TrainingSample<T>],
    matcher: &Matcher<T>,
    weights: [f64; 3],
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let w = weights.map(T::of);
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let e = matcher.match_scans(&s.z1, &s.z2, net)?;
            Ok(pose_mse_loss(&e.mean, &s.pose_gt, w).0.f64())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights with the lowest validation loss seen (initial weights included).
    pub net: MaskNet<T>,
    pub history: Vec<HistoryRow>,
    pub initial_val_loss: Option<f64>,
    pub best_val_loss: Option<f64>,
    pub best_step: usize,
    pub steps_run: usize,
    pub stopped_early: bool,
}

/// Writes `step,train_loss,val_loss` (empty validation cells where none was computed).
pub fn write_history_csv(path: &Path, history: &[HistoryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "train_loss", "val_loss"])?;
    for r in history {
        w.write_record([
            r.step.to_string(),
            r.train_loss.to_string(),
            r.val_loss.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Seeded train/validation split: `(train, validation)` indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    idx.shuffle(&mut rng);
    let n_val = if n < 2 || fraction <= 0.0 {
        0
    } else {
        ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1)
    };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Cycles through shuffled epochs of the training indices.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut s = Self {
            order: indices,
            pos: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.order.shuffle(&mut self.rng);
                    self.pos = 0;
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

struct EarlyStop<T> {
    best: Option<(f64, usize, MaskNet<T>)>,
    bad: usize,
    patience: usize,
}

impl<T: Real> EarlyStop<T> {
    /// Records a validation loss; returns true when training should stop.
    fn observe(&mut self, loss: f64, step: usize, net: &MaskNet<T>) -> bool {
        let improved = self.best.as_ref().is_none_or(|(b, _, _)| loss < *b);
        if improved {
            self.best = Some((loss, step, net.clone()));
            self.bad = 0;
        } else {
            self.bad += 1;
        }
        self.patience > 0 && self.bad >= self.patience
    }
}

fn run_loop<T: Real, S>(
    mut net: MaskNet<T>,
    dataset: &[S],
    cfg: &TrainConfig,
    mut step_fn: impl FnMut(&mut MaskNet<T>, &[S], &mut OptimizerState<T>) -> Result<f64>,
    mut val_fn: impl FnMut(&MaskNet<T>, &[S]) -> Result<f64>,
) -> Result<TrainOutcome<T>>
where
    S: Clone,
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    if cfg.max_steps == 0 {
        return Ok(TrainOutcome {
            net,
            history: Vec::new(),
            initial_val_loss: None,
            best_val_loss: None,
            best_step: 0,
            steps_run: 0,
            stopped_early: false,
        });
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.validation_fraction, cfg.seed);
    // Without a held-out split, validate on the training data itself.
    let val_set: Vec<S> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| dataset[i].clone()).collect()
    } else {
        val_idx.iter().map(|&i| dataset[i].clone()).collect()
    };
    let mut sampler = BatchSampler::new(train_idx, cfg.seed);
    let mut opt = OptimizerState::new(cfg.optimizer, &net);
    let mut stop = EarlyStop {
        best: None,
        bad: 0,
        patience: cfg.validation_patience,
    };
    let initial = val_fn(&net, &val_set)?;
    stop.observe(initial, 0, &net);
    let mut history = Vec::with_capacity(cfg.max_steps);
    let mut stopped_early = false;
    let mut steps_run = 0;
    for step in 1..=cfg.max_steps {
        let batch: Vec<S> = sampler.next(cfg.batch_size).into_iter().map(|i| dataset[i].clone()).collect();
        let loss = step_fn(&mut net, &batch, &mut opt)?;
        steps_run = step;
        let val = if step % cfg.validation_interval == 0 || step == cfg.max_steps {
            Some(val_fn(&net, &val_set)?)
        } else {
            None
        };
        history.push(HistoryRow {
            step,
            train_loss: loss,
            val_loss: val,
        });
        log::debug!("step {step}: train {loss:.6e} val {val:?}");
        if let Some(v) = val {
            if stop.observe(v, step, &net) {
                stopped_early = step < cfg.max_steps;
                break;
            }
        }
    }
    let (best_loss, best_step, best_net) = stop.best.expect("initial validation recorded");
    Ok(TrainOutcome {
        net: best_net,
        history,
        initial_val_loss: Some(initial),
        best_val_loss: Some(best_loss),
        best_step,
        steps_run,
        stopped_early,
    })
}

/// Pose-supervised training with early stopping on a held-out split.
pub fn train<T: Real>(
    net: MaskNet<T>,
    dataset: &[TrainingSample<T>],
    matcher: &Matcher<T>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    check_beta(matcher, cfg)?;
    for s in dataset {
        check_sample(matcher, s)?;
    }
    run_loop(
        net,
        dataset,
        cfg,
        |net, batch, opt| Ok(train_step(net, batch, matcher, cfg, opt)?.loss),
        |net, val| evaluate_pose_loss(Some(net), val, matcher, cfg.loss_weights),
    )
}

fn check_mask_sample<T: Real>(net: &MaskNet<T>, s: &MaskSample<T>) -> Result<()> {
    if net.config().input_frame == InputFrame::Polar {
        return Err(Error::config(
            "net.input_frame",
            "mask supervision uses Cartesian labels; polar-frame networks are not supported",
        ));
    }
    let n = net.config().io_channels();
    if s.inputs.len() != n || s.labels.len() != n {
        return Err(Error::Shape(format!(
            "network expects {n} input(s) and label(s), sample has {} and {}",
            s.inputs.len(),
            s.labels.len()
        )));
    }
    if s.labels.iter().flatten().any(|v| *v != T::zero() && *v != T::one()) {
        return Err(Error::Data("mask labels must be 0 or 1".into()));
    }
    Ok(())
}

fn mask_loss<T: Real>(net: &MaskNet<T>, s: &MaskSample<T>, grad: bool) -> Result<(f64, Option<Vec<Conv2d<T>>>)> {
    let inputs: Vec<&Array2<T>> = s.inputs.iter().map(|c| c.power()).collect();
    let mut tape = Tape::new();
    let masks = net.forward(&inputs, grad.then_some(&mut tape))?;
    let k = masks.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(masks.len());
    for (m, l) in masks.iter().zip(&s.labels) {
        let (v, g) = bce_loss(m, l)?;
        loss += v.f64() / k;
        grads.push(g.mapv(|x| x * T::of(1.0 / k)));
    }
    if !grad {
        return Ok((loss, None));
    }
    Ok((loss, Some(net.backward(tape, &grads)?.layers)))
}

/// Mean BCE over samples.
pub fn evaluate_mask_loss<T: Real>(net: &MaskNet<T>, samples: &[MaskSample<T>]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Data("no samples to evaluate".into()));
    }
    let losses: Vec<Result<f64>> = samples.par_iter().map(|s| Ok(mask_loss(net, s, false)?.0)).collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// One optimizer step on mean BCE against mask labels.
pub fn mask_train_step<T: Real>(
    net: &mut MaskNet<T>,
    batch: &[MaskSample<T>],
    cfg: &TrainConfig,
    opt: &mut OptimizerState<T>,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::Data("empty batch".into()));
    }
    let per: Vec<Result<(f64, Option<Vec<Conv2d<T>>>)>> = batch.par_iter().map(|s| mask_loss(net, s, true)).collect();
    let scale = T::of(1.0 / batch.len() as f64);
    let mut acc = zeros_like(net.layers());
    let mut loss = 0.0;
    for r in per {
        let (l, g) = r?;
        loss += l;
        add_into(&mut acc, &g.expect("gradient requested"), scale);
    }
    loss /= batch.len() as f64;
    let gn = grad_norm(&acc);
    if !loss.is_finite() || !gn.is_finite() {
        return Err(non_finite("mask loss or gradient", net, 0.0));
    }
    opt.apply(net, &acc, cfg.learning_rate)?;
    if !net.is_finite() {
        return Err(non_finite("parameters after update", net, 0.0));
    }
    Ok(StepReport {
        loss,
        max_abs_score: 0.0,
        grad_norm: gn,
    })
}

/// Baseline: supervise the masks directly with binary cross-entropy.
pub fn train_mask_supervised<T: Real>(
    net: MaskNet<T>,
    dataset: &[MaskSample<T>],
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    for s in dataset {
        check_mask_sample(&net, s)?;
    }
    run_loop(
        net,
        dataset,
        cfg,
        |net, batch, opt| Ok(mask_train_step(net, batch, cfg, opt)?.loss),
        |net, val| evaluate_mask_loss(net, val),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_pose_grid, warp_pose, GridResolution, SearchRegion};
    use crate::masknet::MaskNetConfig;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn loss_examples() {
        let gt = Pose::new(0.3, -0.2, 0.1);
        let (l, g) = pose_mse_loss(&gt, &gt, [1.0_f64; 3]);
        assert_eq!(l, 0.0);
        assert_eq!(g, [0.0; 3]);
        let (l, g) = pose_mse_loss(&Pose::new(1.3, -0.2, 0.1), &gt, [1.0; 3]);
        assert!((l - 1.0).abs() < 1e-12);
        assert!((g[0] - 2.0).abs() < 1e-12 && g[1] == 0.0 && g[2] == 0.0);
        let (l, _) = pose_mse_loss(&Pose::new(0.0, 0.0, 0.5), &Pose::identity(), [1.0_f64, 1.0, 4.0]);
        assert!((l - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_wraps_heading() {
        let (l, _) = pose_mse_loss(
            &Pose::new(0.0, 0.0, std::f64::consts::PI - 0.05),
            &Pose::new(0.0, 0.0, -std::f64::consts::PI + 0.05),
            [1.0; 3],
        );
        assert!((l - 0.01).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn loss_nonnegative_and_gradient_correct(
            a in prop::array::uniform3(-2.0f64..2.0),
            b in prop::array::uniform3(-2.0f64..2.0),
            w in prop::array::uniform3(0.1f64..5.0),
        ) {
            let (p, q) = (Pose::new(a[0], a[1], a[2]), Pose::new(b[0], b[1], b[2]));
            let (l, g) = pose_mse_loss(&p, &q, w);
            prop_assert!(l >= 0.0);
            let h = 1e-6;
            for i in 0..3 {
                let mut ap = a; ap[i] += h;
                let mut am = a; am[i] -= h;
                let lp = pose_mse_loss(&Pose::new(ap[0], ap[1], ap[2]), &q, w).0;
                let lm = pose_mse_loss(&Pose::new(am[0], am[1], am[2]), &q, w).0;
                prop_assert!(((lp - lm) / (2.0 * h) - g[i]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bce_examples() {
        let p = Array2::from_elem((2, 2), 0.5);
        let (l, _) = bce_loss(&p, &Array2::ones((2, 2))).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let p = Array2::from_shape_vec((1, 2), vec![0.2, 0.9]).unwrap();
        let (l, g) = bce_loss(&p, &p).unwrap();
        let entropy = |q: f64| -(q * q.ln() + (1.0 - q) * (1.0 - q).ln());
        assert!((l - (entropy(0.2) + entropy(0.9)) / 2.0).abs() < 1e-12);
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    fn toy_net() -> MaskNet<f64> {
        MaskNet::<f64>::new(MaskNetConfig::desk(), 7).unwrap()
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut net = toy_net();
        let before = net.clone();
        let mut grads = zeros_like(net.layers());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for l in grads.iter_mut() {
            l.weight.mapv_inplace(|_| rng.random_range(-2.0..2.0));
            l.bias.mapv_inplace(|_| rng.random_range(-2.0..2.0));
        }
        let kind = OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut opt = OptimizerState::new(kind, &net);
        opt.apply(&mut net, &grads, 0.01).unwrap();
        assert_eq!(opt.step, 1);
        for ((a, b), g) in net.layers().iter().zip(before.layers()).zip(&grads) {
            for ((pa, pb), g) in a.weight.iter().zip(b.weight.iter()).zip(g.weight.iter()) {
                let expected = pb - 0.01 * g / (g.abs() + 1e-8);
                assert!((pa - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sgd_step_is_plain_descent() {
        let mut net = toy_net();
        let before = net.clone();
        let mut grads = zeros_like(net.layers());
        grads[0].weight.fill(1.0);
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, &net);
        opt.apply(&mut net, &grads, 0.5).unwrap();
        let d = &before.layers()[0].weight - &net.layers()[0].weight;
        assert!(d.iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert_eq!(net.layers()[1], before.layers()[1]);
    }

    fn scene(seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<(f64, f64)> = (0..8).map(|_| (rng.random_range(3.0..13.0), rng.random_range(3.0..13.0))).collect();
        Array2::from_shape_fn((16, 16), |(u, v)| {
            pts.iter()
                .map(|(x, y)| (-((u as f64 - x).powi(2) + (v as f64 - y).powi(2)) / 3.0).exp())
                .sum::<f64>()
                .min(1.0)
        })
    }

    fn setup(n: usize) -> (Matcher<f64>, Vec<TrainingSample<f64>>) {
        let grid = make_pose_grid(
            SearchRegion::symmetric(2.0, 2.0, 0.1),
            GridResolution::new(1.0, 1.0, 0.05),
        )
        .unwrap();
        let matcher = Matcher::new(grid, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let samples = (0..n)
            .map(|i| {
                let s1 = CartesianScan::new(scene(i as u64), 1.0).unwrap();
                let p = Pose::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), rng.random_range(-0.08..0.08));
                TrainingSample {
                    z2: Scan::Cartesian(warp_pose(&s1, &p)),
                    z1: Scan::Cartesian(s1),
                    pose_gt: p,
                }
            })
            .collect();
        (matcher, samples)
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-2,
            batch_size: 2,
            beta: 0.2,
            max_steps: 4,
            validation_interval: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let (matcher, samples) = setup(2);
        let mut net = toy_net();
        let before = net.clone();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            optimizer: OptimizerKind::Sgd,
            ..cfg()
        };
        let mut opt = OptimizerState::new(cfg.optimizer, &net);
        let r = train_step(&mut net, &samples, &matcher, &cfg, &mut opt).unwrap();
        assert!(r.loss > 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn small_sgd_steps_descend() {
        let (matcher, samples) = setup(1);
        let mut net = toy_net();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Sgd,
            ..cfg()
        };
        let mut opt = OptimizerState::new(cfg.optimizer, &net);
        let l1 = train_step(&mut net, &samples, &matcher, &cfg, &mut opt).unwrap().loss;
        let l2 = train_step(&mut net, &samples, &matcher, &cfg, &mut opt).unwrap().loss;
        assert!(l2 <= l1, "{l2} > {l1}");
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let (matcher, samples) = setup(3);
        let mut net = toy_net();
        if let Some(l) = net.layers_mut().last_mut() {
            l.weight.mapv_inplace(|w| w * 100.0);
        }
        let cfg = cfg();
        let (_, grads, _) = batch_gradient(&net, &samples, &matcher, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        for _ in 0..10 {
            let li = rng.random_range(0..net.layers().len());
            let wi = rng.random_range(0..net.layers()[li].weight.len());
            let eval = |d: f64| {
                let mut probe = net.clone();
                probe.layers_mut()[li].weight.as_slice_mut().unwrap()[wi] += d;
                evaluate_pose_loss(Some(&probe), &samples, &matcher, cfg.loss_weights).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = grads[li].weight.as_slice().unwrap()[wi];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-3, "layer {li}: fd {fd} vs {an}");
        }
    }

    #[test]
    fn zero_max_steps_returns_initial_net() {
        let (matcher, samples) = setup(2);
        let net = toy_net();
        let out = train(net.clone(), &samples, &matcher, &TrainConfig { max_steps: 0, ..cfg() }).unwrap();
        assert_eq!(out.net, net);
        assert!(out.history.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (matcher, samples) = setup(6);
        let a = train(toy_net(), &samples, &matcher, &cfg()).unwrap();
        let b = train(toy_net(), &samples, &matcher, &cfg()).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.net, b.net);
        assert_eq!(a.history.len(), 4);
        assert!(a.history[1].val_loss.is_some() && a.history[0].val_loss.is_none());
    }

    #[test]
    fn identity_pairs_reduce_validation_loss() {
        // Distinct scenes, each matched against a copy of itself offset by an
        // on-grid pose: a net that keeps informative pixels lowers the loss.
        let (matcher, samples) = setup(10);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            max_steps: 30,
            validation_interval: 5,
            validation_patience: 0,
            ..cfg()
        };
        let out = train(toy_net(), &samples, &matcher, &cfg).unwrap();
        assert!(out.best_val_loss.unwrap() <= out.initial_val_loss.unwrap());
        assert!(out.net.is_finite());
    }

    #[test]
    fn out_of_region_sample_rejected() {
        let (matcher, mut samples) = setup(1);
        samples[0].pose_gt = Pose::new(5.0, 0.0, 0.0);
        assert!(train(toy_net(), &samples, &matcher, &cfg()).is_err());
    }

    #[test]
    fn beta_mismatch_rejected() {
        let (matcher, samples) = setup(1);
        let mut net = toy_net();
        let c = TrainConfig { beta: 1.0, ..cfg() };
        let mut opt = OptimizerState::new(c.optimizer, &net);
        assert!(matches!(
            train_step(&mut net, &samples, &matcher, &c, &mut opt),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn mask_supervision_learns_separable_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<MaskSample<f64>> = (0..8)
            .map(|_| {
                let z = Array2::from_shape_fn((16, 16), |_| if rng.random::<f64>() < 0.3 { 0.9 } else { 0.1 });
                let label = z.mapv(|v| if v > 0.5 { 1.0 } else { 0.0 });
                MaskSample {
                    inputs: vec![CartesianScan::new(z, 1.0).unwrap()],
                    labels: vec![label],
                }
            })
            .collect();
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 4,
            max_steps: 300,
            validation_interval: 50,
            validation_patience: 0,
            validation_fraction: 0.0,
            ..TrainConfig::default()
        };
        let out = train_mask_supervised(toy_net(), &samples, &cfg).unwrap();
        let final_loss = evaluate_mask_loss(&out.net, &samples).unwrap();
        assert!(final_loss < 0.1, "{final_loss}");
    }

    #[test]
    fn mask_supervision_rejects_polar_nets_and_soft_labels() {
        let z = CartesianScan::new(Array2::from_elem((16, 16), 0.5), 1.0).unwrap();
        let polar = MaskNet::<f64>::new(
            MaskNetConfig {
                input_frame: InputFrame::Polar,
                ..MaskNetConfig::desk()
            },
            1,
        )
        .unwrap();
        let ok = MaskSample {
            inputs: vec![z.clone()],
            labels: vec![Array2::ones((16, 16))],
        };
        assert!(train_mask_supervised(polar, &[ok], &cfg()).is_err());
        let soft = MaskSample {
            inputs: vec![z],
            labels: vec![Array2::from_elem((16, 16), 0.5)],
        };
        assert!(train_mask_supervised(toy_net(), &[soft], &cfg()).is_err());
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_history_csv(
            &path,
            &[
                HistoryRow { step: 1, train_loss: 0.5, val_loss: None },
                HistoryRow { step: 2, train_loss: 0.25, val_loss: Some(0.125) },
            ],
        )
        .unwrap();
        let text = std::fs::read_to_string(path).unwrap();
        assert_eq!(text, "step,train_loss,val_loss\n1,0.5,\n2,0.25,0.125\n");
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (t, v) = split_indices(20, 0.1, 4);
        assert_eq!(v.len(), 2);
        assert_eq!(t.len(), 18);
        assert!(v.iter().all(|i| !t.contains(i)));
        assert_eq!(split_indices(20, 0.1, 4), (t, v));
        assert_eq!(split_indices(1, 0.5, 0).1.len(), 0);
    }
}
