//! Central finite-difference verification of analytic gradients.

use rand::seq::index;

use super::model::DenoiserModel;
use super::train::{loss_and_grad, Draw, OptimConfig, TrainSample};
use crate::diffusion::NoiseSchedule;
use crate::seed;

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Objective {
    fn loss(&self, params: &[f64]) -> f64;
    fn gradient(&self, params: &[f64]) -> Vec<f64>;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

/// Gradients below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

/// Compares the analytic gradient against central differences with step `h`
/// on `count` parameters chosen without replacement (all if fewer).
pub fn gradient_check(obj: &dyn Objective, params: &[f64], count: usize, h: f64, seed: u64) -> GradCheck {
    let analytic = obj.gradient(params);
    let mut rng = seed::rng(seed);
    let picks = index::sample(&mut rng, params.len(), count.min(params.len())).into_vec();
    let mut p = params.to_vec();
    let mut out = GradCheck {
        max_rel_error: 0.0,
        worst_index: 0,
        checked: picks.len(),
    };
    for i in picks {
        let orig = p[i];
        p[i] = orig + h;
        let up = obj.loss(&p);
        p[i] = orig - h;
        let down = obj.loss(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(REL_FLOOR);
        if err > out.max_rel_error {
            out.max_rel_error = err;
            out.worst_index = i;
        }
    }
    out
}

/// The training objective of a denoiser with frozen draws.
pub struct DenoiserObjective<'a> {
    pub model: &'a DenoiserModel,
    pub sched: &'a NoiseSchedule,
    pub optim: &'a OptimConfig,
    pub batch: &'a [TrainSample],
    pub draws: &'a [Draw],
}

impl DenoiserObjective<'_> {
    fn with(&self, params: &[f64]) -> DenoiserModel {
        let mut m = self.model.clone();
        m.params.copy_from_slice(params);
        m
    }
}

impl Objective for DenoiserObjective<'_> {
    fn loss(&self, params: &[f64]) -> f64 {
        let m = self.with(params);
        loss_and_grad(&m, self.sched, self.optim, self.batch, self.draws).expect("valid batch").0.total
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let m = self.with(params);
        loss_and_grad(&m, self.sched, self.optim, self.batch, self.draws).expect("valid batch").1
    }
}

/// Linear denoiser `x0_hat = W x_t + c` under mean squared error.
pub struct LinearToy {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl LinearToy {
    pub fn dims(&self) -> (usize, usize) {
        (self.inputs[0].len(), self.targets[0].len())
    }

    pub fn param_count(&self) -> usize {
        let (n, m) = self.dims();
        m * n + m
    }

    fn residuals(&self, params: &[f64]) -> Vec<Vec<f64>> {
        let (n, m) = self.dims();
        self.inputs
            .iter()
            .zip(&self.targets)
            .map(|(x, y)| {
                (0..m)
                    .map(|r| params[m * n + r] + (0..n).map(|c| params[r * n + c] * x[c]).sum::<f64>() - y[r])
                    .collect()
            })
            .collect()
    }
}

impl Objective for LinearToy {
    fn loss(&self, params: &[f64]) -> f64 {
        let k = (self.inputs.len() * self.dims().1) as f64;
        self.residuals(params).iter().flatten().map(|r| r * r).sum::<f64>() / k
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let (n, m) = self.dims();
        let k = (self.inputs.len() * m) as f64;
        let mut g = vec![0.0; params.len()];
        for (res, x) in self.residuals(params).iter().zip(&self.inputs) {
            for r in 0..m {
                let d = 2.0 * res[r] / k;
                for c in 0..n {
                    g[r * n + c] += d * x[c];
                }
                g[m * n + r] += d;
            }
        }
        g
    }
}

/// Wraps an objective and perturbs one gradient entry; a negative control.
pub struct Corrupted<'a> {
    pub inner: &'a dyn Objective,
    pub index: usize,
    pub offset: f64,
}

impl Objective for Corrupted<'_> {
    fn loss(&self, params: &[f64]) -> f64 {
        self.inner.loss(params)
    }

    fn gradient(&self, params: &[f64]) -> Vec<f64> {
        let mut g = self.inner.gradient(params);
        g[self.index] += self.offset;
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn toy() -> (LinearToy, Vec<f64>) {
        let mut rng = seed::rng(4);
        let mut v = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let toy = LinearToy {
            inputs: (0..5).map(|_| v(6)).collect(),
            targets: (0..5).map(|_| v(6)).collect(),
        };
        let params = v(toy.param_count());
        (toy, params)
    }

    #[test]
    fn linear_toy_is_exact() {
        let (toy, params) = toy();
        let r = gradient_check(&toy, &params, 1000, 1e-3, 1);
        assert_eq!(r.checked, toy.param_count());
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let (toy, params) = toy();
        let bad = Corrupted {
            inner: &toy,
            index: 3,
            offset: 1e-2,
        };
        let r = gradient_check(&bad, &params, 1000, 1e-3, 1);
        assert!(r.max_rel_error > 1e-3);
        assert_eq!(r.worst_index, 3);
    }
}
