//! Pipeline stages and the on-disk layout of a run directory.
//!
//! Every stage is resumable: finished artifacts are reused and training
//! restarts from its latest periodic checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use cdp_core::cascade::{resume_flat, resume_high, resume_low, Cascade, TrainRecord};
use cdp_core::expert::{generate_dataset, Dataset, Split};
use cdp_core::nets::{checkpoint, Level, TrainState};
use cdp_core::refine::classifier::{train_collision_classifier, ClassifierReport, CollisionClassifier};
use cdp_core::seed;
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{names, DetectorKind, ExperimentConfig, MethodSpec, Planner};
use crate::error::{HarnessError, Result};
use crate::eval::{aggregate, EvalContext, Instance, MethodMetrics, MethodTiming, Models, PlanResult};

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn checkpoint(&self, level: Level) -> PathBuf {
        self.root.join("checkpoints").join(format!("{level}.ckpt"))
    }

    pub fn partial(&self, level: Level) -> PathBuf {
        self.root.join("checkpoints").join(format!("{level}.partial.ckpt"))
    }

    pub fn snapshot(&self, level: Level, step: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("{level}_step{step}.ckpt"))
    }

    pub fn train_log(&self, level: Level) -> PathBuf {
        self.root.join("logs").join(format!("train_{level}.jsonl"))
    }

    pub fn classifier(&self) -> PathBuf {
        self.root.join("checkpoints").join("collision.json")
    }

    pub fn classifier_report(&self) -> PathBuf {
        self.root.join("collision_report.json")
    }

    pub fn results(&self, method: &str) -> PathBuf {
        let safe: String = method.chars().map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' }).collect();
        self.root.join("results").join(format!("{safe}.jsonl"))
    }

    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.json")
    }

    pub fn timing(&self) -> PathBuf {
        self.root.join("timing.json")
    }

    pub fn plots(&self) -> PathBuf {
        self.root.join("plots")
    }
}

fn level_seed(base: u64, level: Level) -> u64 {
    seed::derive_labeled(base, &format!("train-{level}"), 0)
}

pub fn data_seed(base: u64) -> u64 {
    seed::derive_labeled(base, "data", 0)
}

/// Generates (or reuses matching) train and test datasets.
pub fn gen_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<(Dataset, Dataset)> {
    let base = data_seed(cfg.base_seed());
    let get = |split: Split, n: usize| -> Result<Dataset> {
        if let Ok(d) = Dataset::load(&layout.data(), split) {
            if d.manifest.n == n && d.manifest.base_seed == base && d.manifest.horizon == cfg.dataset.horizon {
                return Ok(d);
            }
        }
        info!("generating {n} {} scenes", split.as_str());
        let d = generate_dataset(n, base, split, &cfg.dataset)?;
        d.save(&layout.data())?;
        Ok(d)
    };
    Ok((get(Split::Train, cfg.train_scenes)?, get(Split::Test, cfg.test_scenes)?))
}

pub fn load_dataset(layout: &Layout, split: Split) -> Result<Dataset> {
    let path = Dataset::records_path(&layout.data(), split);
    if !path.exists() {
        return Err(HarnessError::missing(path, "run gen-data first"));
    }
    Ok(Dataset::load(&layout.data(), split)?)
}

pub fn load_checkpoint(layout: &Layout, level: Level) -> Result<TrainState> {
    let path = layout.checkpoint(level);
    if !path.exists() {
        return Err(HarnessError::missing(path, format!("run train-{level} first")));
    }
    Ok(checkpoint::load(&path)?)
}

/// Keeps log lines up to `step`, so a resumed run does not duplicate them.
fn truncate_log(path: &Path, step: usize) -> Result<()> {
    let Ok(text) = fs::read_to_string(path) else {
        return Ok(());
    };
    let kept: String = text
        .lines()
        .filter(|l| serde_json::from_str::<TrainRecord>(l).is_ok_and(|r| r.step <= step))
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept)?;
    Ok(())
}

/// Trains one level to its configured step count, resuming if possible.
pub fn train_stage(cfg: &ExperimentConfig, layout: &Layout, level: Level) -> Result<TrainState> {
    let settings = cfg.training(level);
    // Finished or partial runs are reused only under identical settings.
    let matches = |s: &TrainState| s.model.config == cfg.cascade.model_config(level).with_seed(s.model.config.init_seed) && s.optim == settings.optim(level);
    if let Ok(done) = checkpoint::load(&layout.checkpoint(level)) {
        if done.step >= settings.steps && matches(&done) {
            return Ok(done);
        }
    }
    let records = load_dataset(layout, Split::Train)?.records;
    let level_seed = level_seed(cfg.base_seed(), level);
    let state = match checkpoint::load(&layout.partial(level)) {
        Ok(s) if matches(&s) => {
            info!("resuming {level} training at step {}", s.step);
            s
        }
        _ => settings.new_state(&cfg.cascade, level, level_seed)?,
    };
    let log_path = layout.train_log(level);
    fs::create_dir_all(log_path.parent().unwrap())?;
    truncate_log(&log_path, state.step)?;
    let mut log_file = fs::OpenOptions::new().create(true).append(true).open(&log_path)?;
    let mut failure: Option<HarnessError> = None;
    let mut log = |r: &TrainRecord, s: &TrainState| {
        let line = serde_json::to_string(r).expect("record serializes");
        let mut io = || -> Result<()> {
            writeln!(log_file, "{line}")?;
            if r.step % cfg.checkpoint_every == 0 {
                checkpoint::save(s, &layout.partial(level))?;
            }
            if cfg.curve_steps.contains(&r.step) {
                checkpoint::save(s, &layout.snapshot(level, r.step))?;
            }
            Ok(())
        };
        if let Err(e) = io() {
            failure.get_or_insert(e);
        }
        if r.step % 250 == 0 {
            info!("{level} step {} loss {:.5}", r.step, r.loss);
        }
    };
    let state = match level {
        Level::High => resume_high(&records, &cfg.cascade, settings, state, &mut log)?,
        Level::Flat => resume_flat(&records, &cfg.cascade, settings, state, &mut log)?,
        Level::Low => {
            let high = load_checkpoint(layout, Level::High)?;
            resume_low(&records, &high.model, &cfg.cascade, settings, &cfg.augment, level_seed, state, &mut log)?
        }
    };
    if let Some(e) = failure {
        return Err(e);
    }
    checkpoint::save(&state, &layout.checkpoint(level))?;
    let _ = fs::remove_file(layout.partial(level));
    Ok(state)
}

pub fn classifier_stage(cfg: &ExperimentConfig, layout: &Layout) -> Result<(CollisionClassifier, ClassifierReport)> {
    if let (Ok(model), Ok(raw)) = (CollisionClassifier::load(&layout.classifier()), fs::read(layout.classifier_report())) {
        if model.config == cfg.classifier {
            return Ok((model, serde_json::from_slice(&raw)?));
        }
    }
    let records = load_dataset(layout, Split::Train)?.records;
    let (model, report) = train_collision_classifier(&records, &cfg.classifier, seed::derive_labeled(cfg.base_seed(), "classifier", 0))?;
    model.save(&layout.classifier())?;
    fs::write(layout.classifier_report(), serde_json::to_string_pretty(&report)?)?;
    info!("collision classifier held-out F1 {:.4}", report.f1);
    Ok((model, report))
}

/// Loads what `methods` need; missing checkpoints are named in the error.
pub fn load_models(cfg: &ExperimentConfig, layout: &Layout, methods: &[MethodSpec]) -> Result<Models> {
    let mut models = Models::default();
    let needs = |l: Level| methods.iter().any(|m| m.needs().contains(&l));
    if needs(Level::High) {
        let high = load_checkpoint(layout, Level::High)?.model;
        let low = load_checkpoint(layout, Level::Low)?.model;
        models.cascade = Some(Cascade::new(cfg.cascade.clone(), high, low)?);
    }
    if needs(Level::Flat) {
        models.flat = Some(load_checkpoint(layout, Level::Flat)?.model);
    }
    if methods.iter().any(|m| m.detector == DetectorKind::Learned && m.refine != crate::config::RefineMode::Off) {
        let path = layout.classifier();
        if !path.exists() {
            return Err(HarnessError::missing(path, "run train-collision first"));
        }
        models.classifier = Some(CollisionClassifier::load(&path)?);
    }
    Ok(models)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub label: String,
    pub method: String,
    pub success_rate: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Ablations {
    /// Refinement and guidance, each with refinement unless stated.
    pub refinement_guidance: Vec<AblationCell>,
    /// Low-level refinement against cascaded refinement and guidance.
    pub refinement_variants: Vec<AblationCell>,
}

pub const REFINEMENT_GUIDANCE: [(&str, &str); 6] = [
    ("no refinement", names::CASCADE),
    ("refinement", names::REFINE),
    ("guidance", names::GUIDANCE_REFINE),
    ("noisy guidance", names::NOISY_REFINE),
    ("guidance, no refinement", names::GUIDANCE),
    ("noisy guidance, no refinement", names::NOISY),
];

pub const REFINEMENT_VARIANTS: [(&str, &str); 3] = [
    ("low-only", names::REFINE),
    ("cascaded", names::CASCADED_REFINE),
    ("low+guidance", names::GUIDANCE_REFINE),
];

impl Ablations {
    pub fn from_metrics(metrics: &[MethodMetrics]) -> Self {
        let cells = |table: &[(&str, &str)]| {
            table
                .iter()
                .map(|&(label, method)| AblationCell {
                    label: label.to_string(),
                    method: method.to_string(),
                    success_rate: metrics.iter().find(|m| m.method == method).map(|m| m.success_rate),
                })
                .collect()
        };
        Ablations {
            refinement_guidance: cells(&REFINEMENT_GUIDANCE),
            refinement_variants: cells(&REFINEMENT_VARIANTS),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub steps: usize,
    pub cascade: Option<f64>,
    pub flat: Option<f64>,
}

/// Reproducible evaluation summary; wall-clock numbers live in `timing.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub seed: u64,
    pub test_scenes: usize,
    pub methods: Vec<MethodMetrics>,
    pub ablations: Ablations,
    pub curves: Vec<CurvePoint>,
    pub classifier: Option<ClassifierReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub seed: u64,
    pub timing_repeats: usize,
    pub methods: Vec<MethodTiming>,
}

pub fn write_results(path: &Path, results: &[PlanResult]) -> Result<()> {
    fs::create_dir_all(path.parent().unwrap())?;
    let mut out = String::new();
    for r in results {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<PlanResult>> {
    let text = fs::read_to_string(path).map_err(|_| HarnessError::missing(path, "run eval first"))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Success rate of the cascade and flat snapshots saved at `curve_steps`.
fn learning_curves(cfg: &ExperimentConfig, layout: &Layout, instances: &[Instance], threads: Option<usize>) -> Result<Vec<CurvePoint>> {
    let subset = &instances[..cfg.curve_scenes.min(instances.len())];
    let wants = |p: Planner| cfg.methods.iter().any(|m| m.planner == p);
    let mut out = Vec::new();
    for &steps in &cfg.curve_steps {
        let load = |l: Level| checkpoint::load(&layout.snapshot(l, steps)).ok().map(|s| s.model);
        let mut models = Models::default();
        if wants(Planner::Cascade) {
            if let (Some(h), Some(l)) = (load(Level::High), load(Level::Low)) {
                models.cascade = Some(Cascade::new(cfg.cascade.clone(), h, l)?);
            }
        }
        if wants(Planner::Flat) {
            models.flat = load(Level::Flat);
        }
        let ctx = EvalContext {
            models: &models,
            refine: &cfg.refine,
            horizon: cfg.cascade.horizon,
            timing_repeats: 1,
        };
        let rate = |present: bool, spec: MethodSpec| -> Result<Option<f64>> {
            if !present || subset.is_empty() {
                return Ok(None);
            }
            let res = ctx.evaluate(std::slice::from_ref(&spec), subset, threads)?.remove(0);
            Ok(Some(res.iter().filter(|r| r.success).count() as f64 / res.len() as f64))
        };
        out.push(CurvePoint {
            steps,
            cascade: rate(models.cascade.is_some(), MethodSpec::new(names::CASCADE, Planner::Cascade))?,
            flat: rate(models.flat.is_some(), MethodSpec::new(names::FLAT, Planner::Flat))?,
        });
    }
    Ok(out)
}

/// Evaluates every configured method on the test set and writes
/// `results/`, `metrics.json` and `timing.json`.
pub fn eval_stage(cfg: &ExperimentConfig, layout: &Layout, threads: Option<usize>) -> Result<Metrics> {
    let test = load_dataset(layout, Split::Test)?;
    let models = load_models(cfg, layout, &cfg.methods)?;
    let instances = Instance::from_records(&test.records, cfg.base_seed());
    let ctx = EvalContext {
        models: &models,
        refine: &cfg.refine,
        horizon: cfg.cascade.horizon,
        timing_repeats: cfg.timing_repeats,
    };
    let results = ctx.evaluate(&cfg.methods, &instances, threads)?;
    let mut metrics = Vec::new();
    let mut timings = Vec::new();
    for (spec, res) in cfg.methods.iter().zip(&results) {
        write_results(&layout.results(&spec.name), res)?;
        let (m, t) = aggregate(&spec.name, res)?;
        info!("{}: success {:.3}", m.method, m.success_rate);
        metrics.push(m);
        timings.push(t);
    }
    let classifier = fs::read(layout.classifier_report()).ok().and_then(|raw| serde_json::from_slice(&raw).ok());
    let metrics = Metrics {
        seed: cfg.base_seed(),
        test_scenes: instances.len(),
        ablations: Ablations::from_metrics(&metrics),
        methods: metrics,
        curves: learning_curves(cfg, layout, &instances, threads)?,
        classifier,
    };
    fs::write(layout.metrics(), serde_json::to_string_pretty(&metrics)?)?;
    let timing = Timing {
        seed: cfg.base_seed(),
        timing_repeats: cfg.timing_repeats,
        methods: timings,
    };
    fs::write(layout.timing(), serde_json::to_string_pretty(&timing)?)?;
    Ok(metrics)
}

/// Runs every stage in order, reusing finished artifacts.
pub fn run_experiment(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<PathBuf> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    cfg.save(&layout.config())?;
    gen_data(cfg, &layout)?;
    let needs = |l: Level| cfg.methods.iter().any(|m| m.needs().contains(&l));
    if needs(Level::High) {
        train_stage(cfg, &layout, Level::High)?;
        train_stage(cfg, &layout, Level::Low)?;
    }
    if needs(Level::Flat) {
        train_stage(cfg, &layout, Level::Flat)?;
    }
    if cfg.methods.iter().any(|m| m.detector == DetectorKind::Learned) {
        classifier_stage(cfg, &layout)?;
    }
    eval_stage(cfg, &layout, threads)?;
    crate::report::report_stage(cfg, &layout)?;
    Ok(layout.root)
}
