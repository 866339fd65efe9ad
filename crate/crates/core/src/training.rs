//! Optimization loop for both model kinds: Adam on plane-wise MSE with a
//! restarting cosine schedule, global-norm clipping and best-validation
//! model selection.
//!
//! ICENet gradients come from the implicit backward pass at each sample's
//! equilibrium; ECENet gradients from reverse accumulation through the stack.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::block::{Planes, PreparedBlock};
use crate::classical::{mean_nmse, nmse_planes};
use crate::error::{Error, Result};
use crate::explicit_net::ecenet_backprop;
use crate::fixed_point::{deq_backward_prepared, deq_forward_tolerant, SolveConfig};
use crate::model::Model;
use crate::ofdm_frame::FrameSample;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub epochs: usize,
    pub cosine_period_epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    /// Global gradient-norm clip.
    pub grad_clip: f64,
    /// Sample counts of the train / validation / test splits.
    pub split_sizes: [usize; 3],
    pub snr_range_db: (f64, f64),
    /// Epochs whose divergence-flag rate exceeds this abort training.
    pub max_flag_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-3,
            lr_final: 1e-5,
            epochs: 100,
            cosine_period_epochs: 50,
            batch_size: 20,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            grad_clip: 1.0,
            split_sizes: [1500, 300, 200],
            snr_range_db: (-10.0, 15.0),
            max_flag_rate: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return Err(Error::Config("need 0 < lr_final <= lr_init".into()));
        }
        if self.epochs == 0 || self.cosine_period_epochs == 0 {
            return Err(Error::Config("epochs and cosine_period_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps_opt > 0.0) {
            return Err(Error::Config("Adam betas must be in [0, 1) and eps_opt > 0".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be > 0".into()));
        }
        if self.split_sizes.iter().any(|&n| n == 0) {
            return Err(Error::Config("every split needs at least one sample".into()));
        }
        let (lo, hi) = self.snr_range_db;
        if !(lo <= hi) {
            return Err(Error::Config("snr_range_db must have lo <= hi".into()));
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_init` to `lr_final`, restarting every period.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let period = cfg.cosine_period_epochs as f64;
    let phase = (epoch % cfg.cosine_period_epochs) as f64 / period;
    cfg.lr_final + 0.5 * (cfg.lr_init - cfg.lr_final) * (1.0 + (std::f64::consts::PI * phase).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-sample MSE over the epoch's training batches.
    pub train_loss: f64,
    pub val_nmse: f64,
    /// Mean forward iterations per training sample (block count for ECENet).
    pub mean_iters: f64,
    pub flagged: usize,
    pub skipped_batches: usize,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_nmse: f64,
    pub wall_time_s: f64,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,val_nmse,mean_iters\n");
        for r in &self.epochs {
            writeln!(s, "{},{:e},{:e},{:e},{}", r.epoch, r.lr, r.train_loss, r.val_nmse, r.mean_iters).unwrap();
        }
        s
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * grad[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + cfg.eps_opt);
        }
    }
}

fn sample_planes(s: &FrameSample) -> (Planes, Vec<f64>) {
    let x = Planes {
        rows: s.n_subcarriers,
        cols: s.n_symbols,
        data: s.x_f64(),
    };
    (x, s.y_f64())
}

fn mse_and_grad(z: &[f64], y: &[f64], scale: f64) -> (f64, Vec<f64>) {
    let n = z.len() as f64;
    let mse = z.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let g = z.iter().zip(y).map(|(a, b)| scale * 2.0 * (a - b) / n).collect();
    (mse, g)
}

/// Mean NMSE of a model over samples, through the shared metric.
pub fn validation_nmse(model: &Model, samples: &[FrameSample], solve: &SolveConfig) -> Result<f64> {
    let mut per = Vec::with_capacity(samples.len());
    for s in samples {
        let (x, _) = sample_planes(s);
        let est = model.estimate(&x, solve)?;
        per.push(nmse_planes(&est.planes.data, s)?);
    }
    Ok(mean_nmse(&per))
}

struct BatchOutcome {
    loss_sum: f64,
    iters_sum: usize,
    flagged: usize,
    /// `None` when the adjoint solve diverged and the batch is skipped.
    grads: Option<Vec<Vec<f64>>>,
}

fn icenet_batch(model: &Model, batch: &[&FrameSample], solve: &SolveConfig) -> Result<BatchOutcome> {
    let params = &model.blocks()[0];
    let prep = PreparedBlock::new(params);
    let mut grad = vec![0.0; params.count()];
    let mut out = BatchOutcome {
        loss_sum: 0.0,
        iters_sum: 0,
        flagged: 0,
        grads: None,
    };
    let backward_cfg = solve.backward();
    let mut ok = true;
    for s in batch {
        let (x, y) = sample_planes(s);
        let fwd = deq_forward_tolerant(&x, &prep, solve)?;
        out.iters_sum += fwd.result.iters_used;
        out.flagged += fwd.flagged as usize;
        let (mse, g) = mse_and_grad(&fwd.estimate.data, &y, 1.0 / batch.len() as f64);
        out.loss_sum += mse;
        if !ok {
            continue;
        }
        match deq_backward_prepared(&fwd.estimate, &x, &prep, &x.with_data(g), &backward_cfg) {
            Ok(d) => grad.iter_mut().zip(&d.grad).for_each(|(a, b)| *a += b),
            Err(Error::Divergence { .. }) | Err(Error::Numeric(_)) => ok = false,
            Err(e) => return Err(e),
        }
    }
    if ok {
        out.grads = Some(vec![grad]);
    }
    Ok(out)
}

fn ecenet_batch(model: &Model, batch: &[&FrameSample]) -> Result<BatchOutcome> {
    let blocks = model.blocks();
    let mut grads: Vec<Vec<f64>> = blocks.iter().map(|b| vec![0.0; b.count()]).collect();
    let mut loss_sum = 0.0;
    for s in batch {
        let (x, y) = sample_planes(s);
        let mut mse = 0.0;
        let r = ecenet_backprop(&x, blocks, |z| {
            let (m, g) = mse_and_grad(&z.data, &y, 1.0 / batch.len() as f64);
            mse = m;
            Ok(z.with_data(g))
        })?;
        loss_sum += mse;
        for (acc, g) in grads.iter_mut().zip(&r.grads) {
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
    Ok(BatchOutcome {
        loss_sum,
        iters_sum: blocks.len() * batch.len(),
        flagged: 0,
        grads: Some(grads),
    })
}

fn clip_global(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Trains `model` in place of a copy and returns the best-validation model
/// with the per-epoch report. Data order is shuffled per epoch from the
/// configured seed; everything else is deterministic given the inputs.
pub fn train(
    model: Model,
    train_set: &[FrameSample],
    val_set: &[FrameSample],
    cfg: &TrainConfig,
    solve: &SolveConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    solve.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Argument("training and validation sets must be non-empty".into()));
    }
    let start = Instant::now();
    let mut model = model;
    for b in model.blocks_mut() {
        b.quantize_f32();
    }
    let mut adams: Vec<Adam> = model.blocks().iter().map(|b| Adam::new(b.count())).collect();
    let mut best = (model.clone(), f64::INFINITY, 0usize);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut rng = seed::rng(seed::derive(cfg.seed, &[seed::STREAM_SHUFFLE, epoch as u64]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut iters_sum, mut flagged, mut skipped) = (0.0, 0usize, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FrameSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let outcome = match model {
                Model::Icenet(_) => icenet_batch(&model, &batch, solve)?,
                Model::Ecenet(_) => ecenet_batch(&model, &batch)?,
            };
            loss_sum += outcome.loss_sum;
            iters_sum += outcome.iters_sum;
            flagged += outcome.flagged;
            let Some(mut grads) = outcome.grads else {
                skipped += 1;
                continue;
            };
            clip_global(&mut grads, cfg.grad_clip);
            for ((block, adam), g) in model.blocks_mut().iter_mut().zip(&mut adams).zip(&grads) {
                adam.step(&mut block.values, g, lr, cfg);
                block.quantize_f32();
                if block.values.iter().any(|v| !v.is_finite()) {
                    return Err(Error::TrainingAborted(format!(
                        "non-finite parameters after an update in epoch {epoch}"
                    )));
                }
            }
        }
        let n = train_set.len() as f64;
        let rate = flagged as f64 / n;
        if rate > cfg.max_flag_rate {
            return Err(Error::TrainingAborted(format!(
                "epoch {epoch}: {flagged} of {} equilibrium solves diverged ({:.0}% > {:.0}%)",
                train_set.len(),
                100.0 * rate,
                100.0 * cfg.max_flag_rate
            )));
        }
        let val_nmse = validation_nmse(&model, val_set, solve)?;
        if val_nmse < best.1 {
            best = (model.clone(), val_nmse, epoch);
        }
        records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            val_nmse,
            mean_iters: iters_sum as f64 / n,
            flagged,
            skipped_batches: skipped,
        });
    }
    Ok((
        best.0,
        TrainReport {
            epochs: records,
            best_epoch: best.2,
            best_val_nmse: best.1,
            wall_time_s: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0, &cfg) - 1e-3).abs() < 1e-15);
        assert!((lr_at(50, &cfg) - 1e-3).abs() < 1e-15);
        assert!((lr_at(25, &cfg) - 5.05e-4).abs() < 1e-12);
        // one step short of the cycle end: 1e-5 + 4.95e-4 (1 + cos(0.98 pi))
        assert!((lr_at(49, &cfg) - 1.097_66e-5).abs() < 1e-9);
        assert!((0..100).all(|e| lr_at(e, &cfg) >= cfg.lr_final && lr_at(e, &cfg) <= cfg.lr_init));
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig {
                lr_final: 2e-3,
                ..ok.clone()
            },
            TrainConfig {
                batch_size: 0,
                ..ok.clone()
            },
            TrainConfig {
                split_sizes: [10, 0, 10],
                ..ok.clone()
            },
            TrainConfig {
                lr_final: 0.0,
                ..ok.clone()
            },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn clipping_scales_to_the_bound() {
        let mut g = vec![vec![3.0, 0.0], vec![4.0]];
        clip_global(&mut g, 1.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[1][0] - 0.8).abs() < 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut a = Adam::new(2);
        let mut p = vec![1.0, 1.0];
        a.step(&mut p, &[0.5, -2.0], 0.01, &cfg);
        assert!((p[0] - 0.99).abs() < 1e-6 && (p[1] - 1.01).abs() < 1e-6);
    }
}
