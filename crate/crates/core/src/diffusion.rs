//! Discrete-time Gaussian diffusion over trajectories.
//!
//! Trajectories live in *model coordinates* `x = 2q - 1`, so the unit-square
//! workspace maps to `[-1, 1]^2`. Tensors are flat `[batch, len, 2]`
//! buffers. The denoiser predicts the clean sample `x0` directly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::workspace::{Vec2, Workspace};

pub const LINEAR_BETA_MIN: f64 = 1e-4;
pub const LINEAR_BETA_MAX: f64 = 0.02;
pub const COSINE_OFFSET: f64 = 0.008;
const COSINE_MAX_BETA: f64 = 0.999;
const GUIDANCE_STREAM: u64 = 0x6775_6964;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

impl std::str::FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::Unknown {
                what: "schedule kind",
                value: other.into(),
            }),
        }
    }
}

/// Per-step coefficients. Vectors are indexed by `t - 1` for `t in 1..=steps`;
/// the accessors accept `t = 0` with the convention `alpha_bar(0) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    #[serde(rename = "T_diff")]
    pub steps: usize,
    pub beta: Vec<f64>,
    #[serde(skip)]
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Coefficients of the Gaussian posterior `q(x_{t-1} | x_t, x0)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Posterior {
    pub coef_x0: f64,
    pub coef_xt: f64,
    pub sigma: f64,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Precondition("schedule needs at least one step".into()));
        }
        if !(0.0 < beta_min && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::Precondition(format!("invalid beta range [{beta_min}, {beta_max}]")));
        }
        let beta = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Ok(Self::from_betas(ScheduleKind::Linear, beta))
    }

    /// Squared-cosine profile `f(t) = cos^2((t/T + s) / (1 + s) * pi/2)`,
    /// `alpha_bar_t = f(t) / f(0)`, with betas capped below one.
    pub fn cosine(steps: usize, offset: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Precondition("schedule needs at least one step".into()));
        }
        let f = |t: f64| {
            let a = (t / steps as f64 + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            a.cos().powi(2)
        };
        let beta = (1..=steps)
            .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, COSINE_MAX_BETA))
            .collect();
        Ok(Self::from_betas(ScheduleKind::Cosine, beta))
    }

    /// Default constants for each kind.
    pub fn new(kind: ScheduleKind, steps: usize) -> Result<Self> {
        match kind {
            ScheduleKind::Linear => Self::linear(steps, LINEAR_BETA_MIN, LINEAR_BETA_MAX),
            ScheduleKind::Cosine => Self::cosine(steps, COSINE_OFFSET),
        }
    }

    fn from_betas(kind: ScheduleKind, beta: Vec<f64>) -> Self {
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut acc = 1.0;
        let alpha_bar = alpha
            .iter()
            .map(|a| {
                acc *= a;
                acc
            })
            .collect();
        NoiseSchedule {
            kind,
            steps: beta.len(),
            beta,
            alpha,
            alpha_bar,
        }
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta[t - 1]
    }

    pub fn posterior(&self, t: usize) -> Result<Posterior> {
        if t == 0 || t > self.steps {
            return Err(Error::Precondition(format!("reverse step needs t in 1..={}, got {t}", self.steps)));
        }
        let ab = self.alpha_bar(t);
        let ab_prev = self.alpha_bar(t - 1);
        let beta = self.beta(t);
        Ok(Posterior {
            coef_x0: ab_prev.sqrt() * beta / (1.0 - ab),
            coef_xt: self.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
            sigma: (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0).sqrt(),
        })
    }

    /// JSON dump `{kind, T_diff, beta[], alpha_bar[]}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("schedule serialization is infallible")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let raw: NoiseSchedule = serde_json::from_str(s)?;
        if raw.beta.len() != raw.steps {
            return Err(Error::shape(raw.steps, raw.beta.len()));
        }
        Ok(Self::from_betas(raw.kind, raw.beta))
    }
}

/// Closed-form marginal `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn forward_sample(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>> {
    if t > sched.steps {
        return Err(Error::Precondition(format!("t = {t} exceeds {} steps", sched.steps)));
    }
    if x0.len() != eps.len() {
        return Err(Error::shape(x0.len(), eps.len()));
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// One ancestral step `x_{t-1} = c1 x0_hat + c2 x_t + sigma_t noise`.
/// At `t = 1` the noise term vanishes.
pub fn reverse_step(x_t: &[f64], t: usize, x0_hat: &[f64], sched: &NoiseSchedule, noise: &[f64]) -> Result<Vec<f64>> {
    let p = sched.posterior(t)?;
    if x_t.len() != x0_hat.len() || x_t.len() != noise.len() {
        return Err(Error::shape(x_t.len(), x0_hat.len().min(noise.len())));
    }
    let sigma = if t == 1 { 0.0 } else { p.sigma };
    Ok(x_t
        .iter()
        .zip(x0_hat)
        .zip(noise)
        .map(|((xt, x0), z)| p.coef_x0 * x0 + p.coef_xt * xt + sigma * z)
        .collect())
}

pub fn to_model(q: Vec2) -> [f64; 2] {
    [2.0 * q.x - 1.0, 2.0 * q.y - 1.0]
}

pub fn to_world(x: &[f64]) -> Vec2 {
    Vec2::new(0.5 * (x[0] + 1.0), 0.5 * (x[1] + 1.0))
}

pub fn states_to_model(states: &[Vec2]) -> Vec<f64> {
    states.iter().flat_map(|&q| to_model(q)).collect()
}

pub fn states_to_world(x: &[f64]) -> Vec<Vec2> {
    x.chunks_exact(2).map(to_world).collect()
}

/// Overwrites the fixed state indices of a single `[len, 2]` trajectory
/// (model coordinates).
pub fn clamp_conditions(x: &mut [f64], fixed: &[(usize, Vec2)]) {
    for &(i, q) in fixed {
        let m = to_model(q);
        x[2 * i] = m[0];
        x[2 * i + 1] = m[1];
    }
}

/// Hinge-squared clearance penalty `mean_i max(0, margin - sd(q_i))^2` and
/// its gradient with respect to each state (workspace coordinates).
pub fn collision_loss(states: &[Vec2], ws: &Workspace, margin: f64) -> (f64, Vec<Vec2>) {
    let n = states.len().max(1) as f64;
    let mut loss = 0.0;
    let grad = states
        .iter()
        .map(|&q| {
            let (sd, g) = ws.signed_distance_gradient(q);
            let v = margin - sd;
            if v > 0.0 {
                loss += v * v / n;
                g * (-2.0 * v / n)
            } else {
                Vec2::ZERO
            }
        })
        .collect();
    (loss, grad)
}

/// Collision-gradient steering applied to each clean-sample prediction.
#[derive(Clone, Copy, Debug)]
pub struct Guidance<'a> {
    pub workspace: &'a Workspace,
    pub strength: f64,
    /// Perturbation scale relative to the gradient norm.
    pub grad_noise: f64,
    pub margin: f64,
}

impl Guidance<'_> {
    /// `x0 <- x0 - strength * (g + grad_noise * |g| * xi)` for one
    /// trajectory in model coordinates.
    pub fn apply(&self, x0_hat: &mut [f64], rng: &mut ChaCha8Rng) {
        if self.strength == 0.0 {
            return;
        }
        let states = states_to_world(x0_hat);
        let (_, grad) = collision_loss(&states, self.workspace, self.margin);
        // d q / d x = 1/2
        let g: Vec<f64> = grad.iter().flat_map(|g| [0.5 * g.x, 0.5 * g.y]).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (x, gi) in x0_hat.iter_mut().zip(&g) {
            let xi: f64 = rng.sample(StandardNormal);
            *x -= self.strength * (gi + self.grad_noise * norm * xi);
        }
    }
}

/// Batched x0-prediction denoiser.
pub trait Denoiser {
    /// `x_t` is `[batch, len, 2]`; returns the predicted `x0` of equal shape.
    fn denoise(&self, x_t: &[f64], t: usize, batch: usize) -> Vec<f64>;
}

impl<F: Fn(&[f64], usize, usize) -> Vec<f64>> Denoiser for F {
    fn denoise(&self, x_t: &[f64], t: usize, batch: usize) -> Vec<f64> {
        self(x_t, t, batch)
    }
}

/// One trajectory to draw in a batched reverse chain.
#[derive(Clone, Debug, Default)]
pub struct SampleSpec {
    /// Inpainted states (index, workspace configuration).
    pub fixed: Vec<(usize, Vec2)>,
    pub seed: u64,
}

fn gaussian(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out {
        *v = rng.sample(StandardNormal);
    }
}

/// Runs the full ancestral reverse chain for a batch of trajectories of
/// `len` states and returns them in workspace coordinates.
///
/// Predictions are clipped to the workspace, optionally guided, and fixed
/// states are re-imposed at initialization, on every prediction and after
/// every step. Each item draws noise from its own seeded stream.
pub fn sample(
    denoiser: &dyn Denoiser,
    sched: &NoiseSchedule,
    len: usize,
    specs: &[SampleSpec],
    guidance: Option<&Guidance>,
) -> Vec<Vec<Vec2>> {
    let batch = specs.len();
    let width = 2 * len;
    let mut rngs: Vec<ChaCha8Rng> = specs.iter().map(|s| seed::rng(s.seed)).collect();
    let mut guide_rngs: Vec<ChaCha8Rng> = specs
        .iter()
        .map(|s| seed::rng(seed::derive(s.seed, GUIDANCE_STREAM)))
        .collect();
    let mut x = vec![0.0; batch * width];
    for (b, spec) in specs.iter().enumerate() {
        let row = &mut x[b * width..(b + 1) * width];
        gaussian(&mut rngs[b], row);
        clamp_conditions(row, &spec.fixed);
    }
    let mut noise = vec![0.0; width];
    for t in (1..=sched.steps).rev() {
        let mut x0_hat = denoiser.denoise(&x, t, batch);
        let post = sched.posterior(t).expect("t within schedule");
        let sigma = if t == 1 { 0.0 } else { post.sigma };
        for (b, spec) in specs.iter().enumerate() {
            let pred = &mut x0_hat[b * width..(b + 1) * width];
            for v in pred.iter_mut() {
                *v = v.clamp(-1.0, 1.0);
            }
            if let Some(g) = guidance {
                g.apply(pred, &mut guide_rngs[b]);
            }
            clamp_conditions(pred, &spec.fixed);
            gaussian(&mut rngs[b], &mut noise);
            let row = &mut x[b * width..(b + 1) * width];
            for ((xt, x0), z) in row.iter_mut().zip(pred.iter()).zip(&noise) {
                *xt = post.coef_x0 * x0 + post.coef_xt * *xt + sigma * z;
            }
            clamp_conditions(row, &spec.fixed);
        }
    }
    x.chunks_exact(width)
        .zip(specs)
        .map(|(row, spec)| {
            let mut states: Vec<Vec2> = states_to_world(row).into_iter().map(Vec2::clamp_unit).collect();
            // Fixed states round-trip through model coordinates inexactly.
            for &(i, q) in &spec.fixed {
                states[i] = q;
            }
            states
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workspace::Obstacle;

    #[test]
    fn linear_schedule_examples() {
        let s = NoiseSchedule::linear(1, 1e-4, 1e-4).unwrap();
        assert!((s.alpha_bar(1) - 0.9999).abs() < 1e-15);
        let s = NoiseSchedule::linear(2, 1e-4, 0.02).unwrap();
        assert!((s.alpha_bar(2) - 0.9999 * 0.98).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.979902).abs() < 1e-12);
    }

    #[test]
    fn cosine_schedule_reaches_noise() {
        let s = NoiseSchedule::cosine(100, COSINE_OFFSET).unwrap();
        assert!(s.alpha_bar(100) < 0.01);
        assert!(s.alpha_bar(1) > 0.99);
        assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn bad_schedules_are_rejected() {
        assert!(NoiseSchedule::linear(0, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::cosine(0, 0.008).is_err());
        assert!("quadratic".parse::<ScheduleKind>().is_err());
    }

    #[test]
    fn forward_sample_examples() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 10).unwrap();
        assert_eq!(forward_sample(&[0.3, -0.2], 0, &[5.0, 5.0], &s).unwrap(), vec![0.3, -0.2]);
        assert!(forward_sample(&[0.0], 11, &[0.0], &s).is_err());
        let quarter = NoiseSchedule {
            kind: ScheduleKind::Linear,
            steps: 1,
            beta: vec![0.75],
            alpha: vec![0.25],
            alpha_bar: vec![0.25],
        };
        let x = forward_sample(&[1.0], 1, &[2.0], &quarter).unwrap();
        assert!((x[0] - (0.5 + 0.75f64.sqrt() * 2.0)).abs() < 1e-12);
        assert!((x[0] - 2.232051).abs() < 1e-6);
    }

    #[test]
    fn terminal_reverse_step_returns_prediction() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 50).unwrap();
        let out = reverse_step(&[0.7, -3.0], 1, &[0.1, 0.2], &s, &[9.0, 9.0]).unwrap();
        assert!((out[0] - 0.1).abs() < 1e-12 && (out[1] - 0.2).abs() < 1e-12);
        assert!(reverse_step(&[0.0], 0, &[0.0], &s, &[0.0]).is_err());
    }

    #[test]
    fn posterior_fixed_point_matches_direct_formula() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 100).unwrap();
        let t = 37;
        let v = 0.4;
        let out = reverse_step(&[v], t, &[v], &s, &[0.0]).unwrap()[0];
        // Product of N(x_t; sqrt(a) x, beta) and N(x; sqrt(abp) x0, 1 - abp).
        let (ab, abp, beta) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t));
        let a = 1.0 - beta;
        let var = 1.0 / (a / beta + 1.0 / (1.0 - abp));
        let mean = var * (a.sqrt() * v / beta + abp.sqrt() * v / (1.0 - abp));
        assert!((var - beta * (1.0 - abp) / (1.0 - ab)).abs() < 1e-15);
        assert!((out - mean).abs() < 1e-14);
    }

    #[test]
    fn clamp_examples() {
        let mut x = vec![0.5; 6];
        clamp_conditions(&mut x, &[(0, Vec2::new(0.0, 0.0))]);
        assert_eq!(x, vec![-1.0, -1.0, 0.5, 0.5, 0.5, 0.5]);
        let before = x.clone();
        clamp_conditions(&mut x, &[]);
        assert_eq!(x, before);
    }

    fn circle_ws(robot_radius: f64) -> Workspace {
        Workspace {
            seed: 0,
            robot_radius,
            obstacles: vec![Obstacle::Circle {
                center: Vec2::new(0.5, 0.5),
                radius: 0.1,
            }],
            start: Vec2::new(0.1, 0.5),
            goal: Vec2::new(0.9, 0.5),
        }
    }

    #[test]
    fn collision_loss_examples() {
        let ws = circle_ws(0.0);
        let free = [Vec2::new(0.1, 0.1), Vec2::new(0.9, 0.9)];
        let (l, g) = collision_loss(&free, &ws, 0.02);
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == Vec2::ZERO));

        let margin = 0.02;
        let states = [Vec2::new(0.1, 0.1), Vec2::new(0.5, 0.5), Vec2::new(0.9, 0.9)];
        let (l, _) = collision_loss(&states, &ws, margin);
        assert!((l - (margin + 0.1f64).powi(2) / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_guidance_is_bitwise_identical() {
        let sched = NoiseSchedule::new(ScheduleKind::Cosine, 20).unwrap();
        let ws = circle_ws(0.02);
        let model = |x: &[f64], _t: usize, _b: usize| x.iter().map(|v| 0.5 * v).collect::<Vec<_>>();
        let specs = vec![SampleSpec {
            fixed: vec![(0, ws.start), (8, ws.goal)],
            seed: 17,
        }];
        let plain = sample(&model, &sched, 9, &specs, None);
        let g = Guidance {
            workspace: &ws,
            strength: 0.0,
            grad_noise: 1.0,
            margin: 0.02,
        };
        let guided = sample(&model, &sched, 9, &specs, Some(&g));
        assert_eq!(plain, guided);
        assert_eq!(plain[0][0], ws.start);
        assert_eq!(plain[0][8], ws.goal);
    }

    #[test]
    fn schedule_json_round_trip() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 16).unwrap();
        let json = s.to_json();
        assert!(json.starts_with(r#"{"kind":"cosine","T_diff":16,"beta":["#));
        assert_eq!(NoiseSchedule::from_json(&json).unwrap(), s);
    }
}
