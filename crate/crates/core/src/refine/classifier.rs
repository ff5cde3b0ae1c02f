//! Learned collision detector: an MLP over a local occupancy patch.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ViolationDetector;
use crate::error::{Error, Result};
use crate::expert::DatasetRecord;
use crate::nets::graph::{Graph, Linear, ParamBuilder, Tensor};
use crate::nets::train::{adamw_update, OptimConfig};
use crate::nets::Level;
use crate::seed;
use crate::workspace::{subdivisions, OccupancyGrid, Vec2, Workspace, VALIDATION_STEP};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub grid_resolution: usize,
    /// Odd side length of the occupancy patch, in cells.
    pub patch: usize,
    pub hidden: usize,
    pub samples: usize,
    pub train_fraction: f64,
    /// Standard deviations of the perturbations applied to expert states.
    pub noise_sigmas: Vec<f64>,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub threshold: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            grid_resolution: 128,
            patch: 11,
            hidden: 64,
            samples: 20_000,
            train_fraction: 0.8,
            noise_sigmas: vec![0.01, 0.02, 0.05],
            steps: 4000,
            batch_size: 128,
            lr: 1e-3,
            threshold: 0.5,
        }
    }
}

impl ClassifierConfig {
    pub fn features(&self) -> usize {
        self.patch * self.patch + 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch % 2 == 0 || self.grid_resolution == 0 || self.hidden == 0 {
            return Err(Error::Precondition("classifier patch must be odd and sizes positive".into()));
        }
        if !(0.0 < self.train_fraction && self.train_fraction < 1.0) {
            return Err(Error::Precondition("train_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// Occupancy patch centred on `q` (one sample per cell pitch, outside the
/// square reads as free) followed by the offset of `q` inside its cell.
pub fn patch_features(grid: &OccupancyGrid, q: Vec2, patch: usize, out: &mut Vec<f64>) {
    let n = grid.resolution;
    let h = (patch / 2) as isize;
    let pitch = 1.0 / n as f64;
    for dr in -h..=h {
        for dc in -h..=h {
            let p = Vec2::new(q.x + dc as f64 * pitch, q.y + dr as f64 * pitch);
            let inside = (0.0..1.0).contains(&p.x) && (0.0..1.0).contains(&p.y);
            let occ = inside && {
                let (r, c) = OccupancyGrid::cell_of(p, n);
                grid.occupied[r * n + c]
            };
            out.push(if occ { 1.0 } else { 0.0 });
        }
    }
    let frac = |v: f64| 2.0 * ((v * n as f64).fract() - 0.5);
    out.push(frac(q.x.clamp(0.0, 1.0)));
    out.push(frac(q.y.clamp(0.0, 1.0)));
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CollisionClassifier {
    pub config: ClassifierConfig,
    pub params: Vec<f64>,
    #[serde(skip)]
    layers: Vec<Linear>,
}

fn layers(config: &ClassifierConfig, init_seed: u64) -> (Vec<f64>, Vec<Linear>) {
    let mut rng = seed::rng(init_seed);
    let mut pb = ParamBuilder::new(&mut rng);
    let l = vec![
        pb.linear(config.features(), config.hidden),
        pb.linear(config.hidden, config.hidden),
        pb.linear(config.hidden, 1),
    ];
    (pb.values, l)
}

impl CollisionClassifier {
    pub fn new(config: ClassifierConfig, init_seed: u64) -> Result<Self> {
        config.validate()?;
        let (params, layers) = layers(&config, init_seed);
        Ok(CollisionClassifier { config, params, layers })
    }

    fn from_parts(config: ClassifierConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let (init, layers) = layers(&config, 0);
        if init.len() != params.len() {
            return Err(Error::shape(init.len(), params.len()));
        }
        Ok(CollisionClassifier { config, params, layers })
    }

    fn logits_node(&self, g: &mut Graph, x: Vec<f64>, rows: usize) -> usize {
        let mut h = g.input(Tensor::new(x, vec![rows, self.config.features()]));
        for (k, &l) in self.layers.iter().enumerate() {
            h = g.linear(h, l);
            if k + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        h
    }

    fn features(&self, grid: &OccupancyGrid, qs: &[Vec2]) -> Vec<f64> {
        let mut x = Vec::with_capacity(qs.len() * self.config.features());
        for &q in qs {
            patch_features(grid, q, self.config.patch, &mut x);
        }
        x
    }

    /// Collision probabilities for a batch of configurations.
    pub fn probabilities(&self, grid: &OccupancyGrid, qs: &[Vec2]) -> Result<Vec<f64>> {
        if grid.resolution != self.config.grid_resolution {
            return Err(Error::shape(self.config.grid_resolution, grid.resolution));
        }
        if qs.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.params);
        let out = self.logits_node(&mut g, self.features(grid, qs), qs.len());
        Ok(g.value(out).data.iter().map(|&z| sigmoid(z)).collect())
    }

    pub fn classify(&self, grid: &OccupancyGrid, q: Vec2) -> Result<f64> {
        Ok(self.probabilities(grid, &[q])?[0])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw: CollisionClassifier = serde_json::from_slice(&std::fs::read(path)?)?;
        Self::from_parts(raw.config, raw.params)
    }

    /// Mean binary cross-entropy over `(features, label)` rows and its gradient.
    fn loss_and_grad(&self, x: Vec<f64>, y: &[f64]) -> (f64, Vec<f64>) {
        let mut g = Graph::new(&self.params);
        let out = self.logits_node(&mut g, x, y.len());
        let z = &g.value(out).data;
        let b = y.len() as f64;
        // softplus(z) - y z, computed stably.
        let loss = z.iter().zip(y).map(|(&z, &y)| z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z).sum::<f64>() / b;
        let dz: Vec<f64> = z.iter().zip(y).map(|(&z, &y)| (sigmoid(z) - y) / b).collect();
        let mut grad = vec![0.0; self.params.len()];
        g.backward(out, dz, &mut grad);
        (loss, grad)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// A configuration in a scene with its ground-truth label.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub scene: usize,
    pub q: Vec2,
    pub in_collision: bool,
}

/// Equal thirds of expert states, perturbed expert states and uniform
/// configurations, labelled by the exact checker.
pub fn build_classifier_dataset(records: &[DatasetRecord], config: &ClassifierConfig, seed: u64) -> Result<Vec<LabeledPoint>> {
    if records.is_empty() {
        return Err(Error::Precondition("classifier dataset needs at least one scene".into()));
    }
    let mut rng = seed::rng(seed::derive_labeled(seed, "classifier-data", 0));
    let mut out = Vec::with_capacity(config.samples);
    for k in 0..config.samples {
        let scene = rng.random_range(0..records.len());
        let rec = &records[scene];
        let traj = &rec.trajectory;
        let q = match k % 3 {
            0 => traj[rng.random_range(0..traj.len())],
            1 => {
                let sigma = config.noise_sigmas[rng.random_range(0..config.noise_sigmas.len())];
                let nd = Normal::new(0.0, sigma).map_err(|e| Error::Precondition(e.to_string()))?;
                let base = traj[rng.random_range(0..traj.len())];
                Vec2::new(base.x + nd.sample(&mut rng), base.y + nd.sample(&mut rng)).clamp_unit()
            }
            _ => Vec2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
        };
        out.push(LabeledPoint {
            scene,
            q,
            in_collision: rec.workspace.point_in_collision(q),
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub positive_fraction: f64,
}

/// F1 and friends with "in collision" as the positive class.
pub fn binary_metrics(pred: &[bool], truth: &[bool]) -> ClassifierReport {
    let mut c = [[0usize; 2]; 2];
    for (&p, &t) in pred.iter().zip(truth) {
        c[p as usize][t as usize] += 1;
    }
    let (tp, fp, fn_) = (c[1][1] as f64, c[1][0] as f64, c[0][1] as f64);
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    ClassifierReport {
        f1: ratio(2.0 * precision * recall, precision + recall),
        precision,
        recall,
        accuracy: ratio((c[0][0] + c[1][1]) as f64, pred.len() as f64),
        test_samples: pred.len(),
        positive_fraction: ratio(truth.iter().filter(|&&t| t).count() as f64, truth.len() as f64),
        ..ClassifierReport::default()
    }
}

/// Trains on the first `train_fraction` of a freshly drawn dataset and
/// reports metrics on the rest.
pub fn train_collision_classifier(records: &[DatasetRecord], config: &ClassifierConfig, seed: u64) -> Result<(CollisionClassifier, ClassifierReport)> {
    config.validate()?;
    let data = build_classifier_dataset(records, config, seed)?;
    let positives = data.iter().filter(|p| p.in_collision).count();
    if positives == 0 || positives == data.len() {
        return Err(Error::Precondition("classifier dataset has a single class".into()));
    }
    let grids: Vec<OccupancyGrid> = records
        .par_iter()
        .map(|r| OccupancyGrid::rasterize(&r.workspace, config.grid_resolution))
        .collect();
    let mut model = CollisionClassifier::new(config.clone(), seed::derive_labeled(seed, "classifier-init", 0))?;
    let feats: Vec<Vec<f64>> = data
        .iter()
        .map(|p| {
            let mut f = Vec::with_capacity(config.features());
            patch_features(&grids[p.scene], p.q, config.patch, &mut f);
            f
        })
        .collect();
    let n_train = ((data.len() as f64) * config.train_fraction).round() as usize;
    let optim = OptimConfig {
        peak_lr: config.lr,
        weight_decay: 0.0,
        ..OptimConfig::for_level(Level::High, config.steps)
    };
    let (mut m, mut v) = (vec![0.0; model.params.len()], vec![0.0; model.params.len()]);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut rng = seed::rng(seed::derive_labeled(seed, "classifier-train", 0));
    let mut cursor = order.len();
    for step in 0..config.steps {
        let mut x = Vec::with_capacity(config.batch_size * config.features());
        let mut y = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let i = order[cursor];
            cursor += 1;
            x.extend_from_slice(&feats[i]);
            y.push(if data[i].in_collision { 1.0 } else { 0.0 });
        }
        let (loss, grad) = model.loss_and_grad(x, &y);
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        // Cosine decay without warmup.
        let lr = config.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / config.steps as f64).cos());
        adamw_update(&mut model.params, &mut m, &mut v, &grad, step + 1, lr, &optim);
    }
    let test = &data[n_train..];
    let mut g = Graph::new(&model.params);
    let out = model.logits_node(&mut g, feats[n_train..].concat(), test.len());
    let pred: Vec<bool> = g.value(out).data.iter().map(|&z| sigmoid(z) > config.threshold).collect();
    let truth: Vec<bool> = test.iter().map(|p| p.in_collision).collect();
    let report = ClassifierReport {
        train_samples: n_train,
        ..binary_metrics(&pred, &truth)
    };
    Ok((model, report))
}

/// Flags states using classifier probabilities at the same densified
/// waypoints the exact checker visits.
pub struct LearnedDetector<'a> {
    pub classifier: &'a CollisionClassifier,
    pub grid: OccupancyGrid,
}

impl<'a> LearnedDetector<'a> {
    pub fn new(classifier: &'a CollisionClassifier, ws: &Workspace) -> Self {
        LearnedDetector {
            classifier,
            grid: OccupancyGrid::rasterize(ws, classifier.config.grid_resolution),
        }
    }
}

impl ViolationDetector for LearnedDetector<'_> {
    fn violations(&self, states: &[Vec2]) -> Vec<usize> {
        let mut points = Vec::new();
        let mut owner = Vec::new();
        for (i, &q) in states.iter().enumerate() {
            match states.get(i + 1) {
                Some(&next) => {
                    let n = subdivisions(q.distance(next), VALIDATION_STEP);
                    points.extend((0..n).map(|k| q.lerp(next, k as f64 / n as f64)));
                    owner.extend(std::iter::repeat_n(i, n));
                }
                None => {
                    points.push(q);
                    owner.push(i);
                }
            }
        }
        let probs = self.classifier.probabilities(&self.grid, &points).expect("grid matches classifier");
        let mut flagged: Vec<usize> = owner
            .iter()
            .zip(&probs)
            .filter(|(_, &p)| p > self.classifier.config.threshold)
            .map(|(&i, _)| i)
            .collect();
        flagged.dedup();
        flagged
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_examples() {
        let r = binary_metrics(&[true, true, false, false], &[true, false, true, false]);
        assert_eq!((r.precision, r.recall, r.f1, r.accuracy), (0.5, 0.5, 0.5, 0.5));
        let r = binary_metrics(&[false, false], &[true, false]);
        assert_eq!(r.f1, 0.0);
    }

    #[test]
    fn patch_reads_occupancy_around_query() {
        let n = 8;
        let mut occupied = vec![false; n * n];
        occupied[3 * n + 4] = true;
        let grid = OccupancyGrid {
            resolution: n,
            occupied,
            start_cell: (0, 0),
            goal_cell: (0, 0),
        };
        let mut f = Vec::new();
        patch_features(&grid, OccupancyGrid::cell_center(3, 4, n), 3, &mut f);
        assert_eq!(f.len(), 11);
        assert_eq!(&f[..9], &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(f[9].abs() < 1e-12 && f[10].abs() < 1e-12);
    }
}
