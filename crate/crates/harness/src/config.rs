//! Experiment configuration and the method catalogue.

use std::path::{Path, PathBuf};

use cdp_core::cascade::{AugmentConfig, CascadeConfig, TrainSettings};
use cdp_core::expert::DatasetParams;
use cdp_core::nets::Level;
use cdp_core::refine::classifier::ClassifierConfig;
use cdp_core::refine::RefineParams;
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Planner {
    /// Replays the stored expert trajectory.
    Expert,
    /// Straight segment from start to goal.
    StraightLine,
    Flat,
    Cascade,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    Off,
    Low,
    Cascaded,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    Exact,
    Learned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub planner: Planner,
    #[serde(default)]
    pub guidance: f64,
    #[serde(default)]
    pub guidance_noise: f64,
    #[serde(default = "refine_off")]
    pub refine: RefineMode,
    #[serde(default = "detector_exact")]
    pub detector: DetectorKind,
}

fn refine_off() -> RefineMode {
    RefineMode::Off
}

fn detector_exact() -> DetectorKind {
    DetectorKind::Exact
}

impl MethodSpec {
    pub fn new(name: &str, planner: Planner) -> Self {
        MethodSpec {
            name: name.to_string(),
            planner,
            guidance: 0.0,
            guidance_noise: 0.0,
            refine: RefineMode::Off,
            detector: DetectorKind::Exact,
        }
    }

    pub fn guided(mut self, strength: f64, noise: f64) -> Self {
        self.guidance = strength;
        self.guidance_noise = noise;
        self
    }

    pub fn refined(mut self, mode: RefineMode, detector: DetectorKind) -> Self {
        self.refine = mode;
        self.detector = detector;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let learned = |p: Planner| matches!(p, Planner::Flat | Planner::Cascade);
        if self.refine != RefineMode::Off && self.planner != Planner::Cascade {
            return Err(HarnessError::Validation(format!("method {}: refinement needs the cascaded planner", self.name)));
        }
        if (self.guidance != 0.0 || self.guidance_noise != 0.0) && !learned(self.planner) {
            return Err(HarnessError::Validation(format!("method {}: guidance needs a diffusion planner", self.name)));
        }
        if !(self.guidance >= 0.0 && self.guidance_noise >= 0.0) {
            return Err(HarnessError::Validation(format!("method {}: guidance values must be non-negative", self.name)));
        }
        Ok(())
    }

    /// Models this method loads.
    pub fn needs(&self) -> Vec<Level> {
        match self.planner {
            Planner::Flat => vec![Level::Flat],
            Planner::Cascade => vec![Level::High, Level::Low],
            _ => vec![],
        }
    }
}

/// Method names used by the ablation tables.
pub mod names {
    pub const EXPERT: &str = "expert";
    pub const STRAIGHT: &str = "straight_line";
    pub const FLAT: &str = "flat";
    pub const CASCADE: &str = "cascade";
    pub const REFINE: &str = "cascade+refine";
    pub const CASCADED_REFINE: &str = "cascade+cascaded_refine";
    pub const GUIDANCE: &str = "cascade+guidance";
    pub const NOISY: &str = "cascade+noisy_guidance";
    pub const GUIDANCE_REFINE: &str = "cascade+guidance+refine";
    pub const NOISY_REFINE: &str = "cascade+noisy_guidance+refine";
    pub const LEARNED_REFINE: &str = "cascade+refine_learned";
}

pub fn default_methods(guidance: f64, noise: f64) -> Vec<MethodSpec> {
    use names::*;
    use DetectorKind::*;
    use RefineMode::*;
    vec![
        MethodSpec::new(EXPERT, Planner::Expert),
        MethodSpec::new(STRAIGHT, Planner::StraightLine),
        MethodSpec::new(FLAT, Planner::Flat),
        MethodSpec::new(CASCADE, Planner::Cascade),
        MethodSpec::new(REFINE, Planner::Cascade).refined(Low, Exact),
        MethodSpec::new(CASCADED_REFINE, Planner::Cascade).refined(Cascaded, Exact),
        MethodSpec::new(GUIDANCE, Planner::Cascade).guided(guidance, 0.0),
        MethodSpec::new(NOISY, Planner::Cascade).guided(guidance, noise),
        MethodSpec::new(GUIDANCE_REFINE, Planner::Cascade).guided(guidance, 0.0).refined(Low, Exact),
        MethodSpec::new(NOISY_REFINE, Planner::Cascade).guided(guidance, noise).refined(Low, Exact),
        MethodSpec::new(LEARNED_REFINE, Planner::Cascade).refined(Low, Learned),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Base seed; drawn from entropy and written back when absent.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub dataset: DatasetParams,
    pub cascade: CascadeConfig,
    pub high_training: TrainSettings,
    pub low_training: TrainSettings,
    pub flat_training: TrainSettings,
    pub augment: AugmentConfig,
    pub classifier: ClassifierConfig,
    pub refine: RefineParams,
    /// Guidance strength and gradient-noise scale of the default methods.
    pub guidance: f64,
    pub guidance_noise: f64,
    pub methods: Vec<MethodSpec>,
    /// Training steps at which snapshots are kept for the learning curves.
    pub curve_steps: Vec<usize>,
    /// Test scenes evaluated per learning-curve point.
    pub curve_scenes: usize,
    /// Timed runs per instance; the median is reported.
    pub timing_repeats: usize,
    /// Training checkpoints are refreshed this often.
    pub checkpoint_every: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let guidance = 100.0;
        let guidance_noise = 1.0;
        ExperimentConfig {
            seed: None,
            out_dir: PathBuf::from("runs/default"),
            train_scenes: 2000,
            test_scenes: 200,
            dataset: DatasetParams::default(),
            cascade: CascadeConfig::default(),
            high_training: TrainSettings { warmup_steps: 200, peak_lr: Some(1e-3), ..TrainSettings::default() },
            low_training: TrainSettings { warmup_steps: 200, ..TrainSettings::default() },
            flat_training: TrainSettings { warmup_steps: 200, peak_lr: Some(1e-3), ..TrainSettings::default() },
            augment: AugmentConfig::default(),
            classifier: ClassifierConfig::default(),
            refine: RefineParams::default(),
            guidance,
            guidance_noise,
            methods: default_methods(guidance, guidance_noise),
            curve_steps: vec![1000, 2000, 3000, 4000],
            curve_scenes: 50,
            timing_repeats: 3,
            checkpoint_every: 500,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| HarnessError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_slice(&raw).map_err(|e| HarnessError::Validation(format!("invalid config {}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn training(&self, level: Level) -> &TrainSettings {
        match level {
            Level::High => &self.high_training,
            Level::Low => &self.low_training,
            Level::Flat => &self.flat_training,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Validation(m));
        if self.train_scenes == 0 || self.test_scenes == 0 {
            return bad("dataset sizes must be positive".into());
        }
        if self.dataset.horizon != self.cascade.horizon {
            return bad(format!("dataset horizon {} differs from cascade horizon {}", self.dataset.horizon, self.cascade.horizon));
        }
        self.cascade.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.refine.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        self.classifier.validate().map_err(|e| HarnessError::Validation(e.to_string()))?;
        if self.timing_repeats == 0 || self.checkpoint_every == 0 {
            return bad("timing_repeats and checkpoint_every must be positive".into());
        }
        for level in [Level::High, Level::Low, Level::Flat] {
            let t = self.training(level);
            if t.steps == 0 || t.batch_size == 0 {
                return bad(format!("{level} training needs positive steps and batch size"));
            }
            if t.peak_lr.is_some_and(|lr| !(lr > 0.0 && lr.is_finite())) {
                return bad(format!("{level} peak learning rate must be positive"));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for m in &self.methods {
            m.validate()?;
            if !seen.insert(&m.name) {
                return bad(format!("duplicate method name {}", m.name));
            }
        }
        Ok(())
    }

    /// The seed; only valid after resolution.
    pub fn base_seed(&self) -> u64 {
        self.seed.expect("seed resolved before use")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let c = ExperimentConfig::default();
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        c.validate().unwrap();
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let c: ExperimentConfig = serde_json::from_str(r#"{"train_scenes": 50, "seed": 3}"#).unwrap();
        assert_eq!((c.train_scenes, c.seed, c.test_scenes), (50, Some(3), 200));
        assert!(serde_json::from_str::<ExperimentConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn refinement_requires_cascade() {
        let m = MethodSpec::new("x", Planner::Flat).refined(RefineMode::Low, DetectorKind::Exact);
        assert!(m.validate().is_err());
        let m = MethodSpec::new("x", Planner::Expert).guided(1.0, 0.0);
        assert!(m.validate().is_err());
    }
}
