//! Denoising objective, AdamW and the warmup-cosine learning-rate schedule.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::model::{Conditioning, DenoiserModel, Level};
use crate::diffusion::{collision_loss, forward_sample, states_to_world, NoiseSchedule};
use crate::error::{Error, Result};
use crate::seed;
use crate::workspace::Workspace;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub collision_weight: f64,
    /// Collision loss applies for `t <= ceil(collision_fraction * T_diff)`.
    pub collision_fraction: f64,
}

impl OptimConfig {
    pub fn for_level(level: Level, total_steps: usize) -> Self {
        let (peak_lr, weight_decay) = match level {
            Level::High | Level::Flat => (1e-4, 1e-3),
            Level::Low => (2e-4, 5e-3),
        };
        OptimConfig {
            peak_lr,
            final_lr: 1e-5,
            warmup_steps: 2000,
            total_steps,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 1.0,
            batch_size: 64,
            collision_weight: 0.1,
            collision_fraction: 0.1,
        }
    }

    /// Linear warmup from 0 to `peak_lr`, then cosine decay to `final_lr` at
    /// `total_steps`; constant afterwards.
    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.peak_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.peak_lr;
        }
        let p = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.final_lr + 0.5 * (self.peak_lr - self.final_lr) * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn collision_cutoff(&self, steps: usize) -> usize {
        (self.collision_fraction * steps as f64).ceil() as usize
    }
}

/// One supervised example: a clean trajectory and its conditioning.
#[derive(Clone, Debug)]
pub struct TrainSample {
    /// Clean trajectory in model coordinates, `states * 2` values.
    pub x0: Vec<f64>,
    pub cond: Conditioning,
    /// State indices inpainted from `x0` in the noisy input, as at sampling.
    pub fixed: Vec<usize>,
    /// Scene for the collision term; `None` disables it.
    pub workspace: Option<Workspace>,
}

/// Per-sample diffusion step and noise.
#[derive(Clone, Debug)]
pub struct Draw {
    pub t: usize,
    pub eps: Vec<f64>,
}

impl Draw {
    pub fn random(rng: &mut impl Rng, steps: usize, width: usize) -> Self {
        Draw {
            t: rng.random_range(1..=steps),
            eps: (0..width).map(|_| rng.sample(StandardNormal)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub mse: f64,
    pub collision: f64,
}

/// Loss and parameter gradient for fixed draws.
pub fn loss_and_grad(
    model: &DenoiserModel,
    sched: &NoiseSchedule,
    optim: &OptimConfig,
    batch: &[TrainSample],
    draws: &[Draw],
) -> Result<(LossParts, Vec<f64>)> {
    let b = batch.len();
    if b == 0 || draws.len() != b {
        return Err(Error::Precondition("batch and draws must be non-empty and aligned".into()));
    }
    let width = model.config.states * 2;
    let mut x_t = Vec::with_capacity(b * width);
    for (s, d) in batch.iter().zip(draws) {
        if s.x0.len() != width {
            return Err(Error::shape(width, s.x0.len()));
        }
        let mut xt = forward_sample(&s.x0, d.t, &d.eps, sched)?;
        for &i in &s.fixed {
            xt[2 * i] = s.x0[2 * i];
            xt[2 * i + 1] = s.x0[2 * i + 1];
        }
        x_t.extend(xt);
    }
    let ts: Vec<usize> = draws.iter().map(|d| d.t).collect();
    let conds: Vec<Conditioning> = batch.iter().map(|s| s.cond.clone()).collect();
    let mut g = Graph::new(&model.params);
    let fwd = model.forward(&mut g, &x_t, &ts, &conds)?;
    let pred = &g.value(fwd.output).data;

    let cutoff = optim.collision_cutoff(sched.steps);
    let scale = 1.0 / (b * width) as f64;
    let mut parts = LossParts::default();
    let mut dpred = vec![0.0; pred.len()];
    for (i, s) in batch.iter().enumerate() {
        let p = &pred[i * width..(i + 1) * width];
        for (k, (&y, &x)) in p.iter().zip(&s.x0).enumerate() {
            parts.mse += (y - x) * (y - x) * scale;
            dpred[i * width + k] = 2.0 * (y - x) * scale;
        }
        if let (Some(ws), true) = (&s.workspace, draws[i].t <= cutoff) {
            let (l, grad) = collision_loss(&states_to_world(p), ws, ws.robot_radius);
            let w = optim.collision_weight / b as f64;
            parts.collision += l / b as f64;
            // d q / d x = 1/2
            for (k, gq) in grad.iter().enumerate() {
                dpred[i * width + 2 * k] += w * 0.5 * gq.x;
                dpred[i * width + 2 * k + 1] += w * 0.5 * gq.y;
            }
        }
    }
    parts.total = parts.mse + optim.collision_weight * parts.collision;
    let mut grad = vec![0.0; model.params.len()];
    g.backward(fwd.output, dpred, &mut grad);
    Ok((parts, grad))
}

/// Model plus AdamW moments and step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DenoiserModel,
    pub optim: OptimConfig,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: usize,
    /// Base seed of the per-step draw streams.
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: DenoiserModel, optim: OptimConfig, seed: u64) -> Self {
        let n = model.params.len();
        TrainState {
            model,
            optim,
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            seed,
        }
    }

    pub fn lr(&self) -> f64 {
        self.optim.lr(self.step)
    }

    /// Stream `stream` of the current step; resuming from a checkpoint
    /// replays the same draws. Stream 1 is reserved for diffusion noise.
    pub fn step_rng(&self, stream: u64) -> rand_chacha::ChaCha8Rng {
        seed::rng(seed::derive(seed::derive(self.seed, self.step as u64), stream))
    }

    /// Draws noise for `batch`, then applies one optimizer step.
    pub fn train_step(&mut self, sched: &NoiseSchedule, batch: &[TrainSample]) -> Result<LossParts> {
        let mut rng = self.step_rng(1);
        let width = self.model.config.states * 2;
        let draws: Vec<Draw> = batch.iter().map(|_| Draw::random(&mut rng, sched.steps, width)).collect();
        self.step_with(sched, batch, &draws)
    }

    pub fn step_with(&mut self, sched: &NoiseSchedule, batch: &[TrainSample], draws: &[Draw]) -> Result<LossParts> {
        let (parts, mut grad) = loss_and_grad(&self.model, sched, &self.optim, batch, draws)?;
        if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step: self.step,
                loss: parts.total,
            });
        }
        clip_global_norm(&mut grad, self.optim.clip_norm);
        self.apply(&grad);
        Ok(parts)
    }

    fn apply(&mut self, grad: &[f64]) {
        let lr = self.optim.lr(self.step);
        self.step += 1;
        adamw_update(&mut self.model.params, &mut self.m, &mut self.v, grad, self.step, lr, &self.optim);
    }
}

/// One AdamW update with decoupled weight decay; `t` is the 1-based step.
pub fn adamw_update(params: &mut [f64], m: &mut [f64], v: &mut [f64], grad: &[f64], t: usize, lr: f64, o: &OptimConfig) {
    let bc1 = 1.0 - o.beta1.powi(t as i32);
    let bc2 = 1.0 - o.beta2.powi(t as i32);
    for (((p, m), v), &g) in params.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad) {
        *m = o.beta1 * *m + (1.0 - o.beta1) * g;
        *v = o.beta2 * *v + (1.0 - o.beta2) * g * g;
        let update = (*m / bc1) / ((*v / bc2).sqrt() + o.eps);
        *p -= lr * (update + o.weight_decay * *p);
    }
}

/// Rescales `grad` so its L2 norm is at most `max_norm`; returns the
/// original norm.
pub fn clip_global_norm(grad: &mut [f64], max_norm: f64) -> f64 {
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grad.iter_mut() {
            *g *= s;
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule_closed_form() {
        let o = OptimConfig::for_level(Level::High, 10_000);
        assert_eq!(o.lr(0), 0.0);
        assert!((o.lr(1000) - 0.5e-4).abs() < 1e-18);
        assert!((o.lr(2000) - 1e-4).abs() < 1e-18);
        let mid = 2000 + 4000;
        assert!((o.lr(mid) - (1e-5 + 0.5 * (1e-4 - 1e-5))).abs() < 1e-15);
        assert!((o.lr(10_000) - 1e-5).abs() < 1e-18);
        assert!((o.lr(20_000) - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![3.0, 4.0];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0] - 0.6).abs() < 1e-15 && (g[1] - 0.8).abs() < 1e-15);
        let mut small = vec![0.1, 0.2];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![0.1, 0.2]);
    }
}
