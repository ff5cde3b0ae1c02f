//! The `cdp` command line.

use std::fs;
use std::path::{Path, PathBuf};

use cdp_core::expert::Split;
use cdp_core::nets::Level;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::{DetectorKind, ExperimentConfig, MethodSpec, Planner, RefineMode};
use crate::error::{HarnessError, Result};
use crate::eval::{EvalContext, Instance, PlanResult};
use crate::experiment::{self, Layout};
use crate::report;

#[derive(Debug, Parser)]
#[command(name = "cdp", version, about = "Cascaded diffusion motion planning experiments")]
pub struct Cli {
    /// Experiment config (JSON); defaults to <out>/config.json or built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Base seed; drawn from entropy when neither given nor recorded.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test datasets with the expert planner.
    GenData,
    /// Train the coarse sub-goal model.
    TrainHigh,
    /// Train the segment model; needs the high checkpoint for augmentation.
    TrainLow,
    /// Train the single-level baseline.
    TrainFlat,
    /// Train the learned collision detector.
    TrainCollision,
    /// Plan on test scenes and write one JSON line per plan.
    Plan(PlanArgs),
    /// Refine plans written by `plan`.
    Repair(RepairArgs),
    /// Evaluate all configured methods on the test set.
    Eval,
    /// Write tables and plots from an evaluated run.
    Report,
    /// Every stage in order.
    Run,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long, value_enum, default_value = "cascade")]
    pub planner: Planner,
    /// Guidance strength.
    #[arg(long, default_value_t = 0.0)]
    pub guidance: f64,
    /// Standard deviation of guidance-gradient noise.
    #[arg(long, default_value_t = 0.0)]
    pub guidance_noise: f64,
    #[arg(long, value_enum, default_value = "off")]
    pub refine: RefineMode,
    #[arg(long, value_enum, default_value = "exact")]
    pub detector: DetectorKind,
    /// Test scene indices; all scenes when omitted.
    #[arg(long)]
    pub index: Vec<usize>,
    /// Plan only the first n scenes.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Defaults to <out>/plans.jsonl.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RepairArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// Defaults to the input path with a `.repaired.jsonl` suffix.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "low")]
    pub refine: RefineMode,
    #[arg(long, value_enum, default_value = "exact")]
    pub detector: DetectorKind,
}

/// One line of a plan file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanRecord {
    pub spec: MethodSpec,
    pub result: PlanResult,
}

/// Method name derived from its settings.
pub fn method_name(planner: Planner, guidance: f64, noise: f64, refine: RefineMode, detector: DetectorKind) -> String {
    let mut s = match planner {
        Planner::Expert => "expert".to_string(),
        Planner::StraightLine => "straight_line".to_string(),
        Planner::Flat => "flat".to_string(),
        Planner::Cascade => "cascade".to_string(),
    };
    if guidance > 0.0 {
        s += &format!("+guidance{guidance}");
        if noise > 0.0 {
            s += &format!("+noise{noise}");
        }
    }
    match refine {
        RefineMode::Off => {}
        RefineMode::Low => s += "+refine",
        RefineMode::Cascaded => s += "+cascaded_refine",
    }
    if refine != RefineMode::Off && detector == DetectorKind::Learned {
        s += "_learned";
    }
    s
}

fn resolve_config(cli: &Cli) -> Result<(ExperimentConfig, Layout)> {
    let recorded = |dir: &Path| ExperimentConfig::load(&Layout::new(dir).config()).ok();
    let mut cfg = match (&cli.config, &cli.out) {
        (Some(p), _) => ExperimentConfig::load(p)?,
        (None, Some(out)) => recorded(out).unwrap_or_default(),
        (None, None) => ExperimentConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seed = Some(s);
    }
    if cfg.seed.is_none() {
        cfg.seed = recorded(&cfg.out_dir).and_then(|c| c.seed);
    }
    if cfg.seed.is_none() {
        let s: u64 = rand::random();
        eprintln!("seed {s} (drawn from entropy)");
        cfg.seed = Some(s);
    }
    cfg.validate()?;
    let layout = Layout::new(&cfg.out_dir);
    cfg.save(&layout.config())?;
    Ok((cfg, layout))
}

fn write_lines<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn read_plans(path: &Path) -> Result<Vec<PlanRecord>> {
    let text = fs::read_to_string(path).map_err(|_| HarnessError::missing(path, "write it with `plan`"))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| HarnessError::Validation(format!("{}: {e}", path.display()))))
        .collect()
}

fn test_instances(cfg: &ExperimentConfig, layout: &Layout) -> Result<Vec<Instance>> {
    let test = experiment::load_dataset(layout, Split::Test)?;
    Ok(Instance::from_records(&test.records, cfg.base_seed()))
}

fn plan_command(cfg: &ExperimentConfig, layout: &Layout, a: &PlanArgs) -> Result<()> {
    let spec = MethodSpec {
        name: method_name(a.planner, a.guidance, a.guidance_noise, a.refine, a.detector),
        planner: a.planner,
        guidance: a.guidance,
        guidance_noise: a.guidance_noise,
        refine: a.refine,
        detector: a.detector,
    };
    spec.validate()?;
    let all = test_instances(cfg, layout)?;
    let mut chosen: Vec<Instance> = if a.index.is_empty() {
        all
    } else {
        a.index
            .iter()
            .map(|&i| all.get(i).cloned().ok_or_else(|| HarnessError::Validation(format!("scene index {i} out of range (test set has {})", all.len()))))
            .collect::<Result<_>>()?
    };
    if let Some(n) = a.limit {
        chosen.truncate(n);
    }
    let models = experiment::load_models(cfg, layout, std::slice::from_ref(&spec))?;
    let ctx = EvalContext {
        models: &models,
        refine: &cfg.refine,
        horizon: cfg.cascade.horizon,
        timing_repeats: 1,
    };
    let results = ctx.evaluate(std::slice::from_ref(&spec), &chosen, None)?.remove(0);
    let ok = results.iter().filter(|r| r.success).count();
    let records: Vec<PlanRecord> = results.into_iter().map(|result| PlanRecord { spec: spec.clone(), result }).collect();
    let path = a.output.clone().unwrap_or_else(|| layout.root.join("plans.jsonl"));
    write_lines(&path, &records)?;
    println!("{}: {ok}/{} successful, written to {}", spec.name, records.len(), path.display());
    Ok(())
}

fn repair_command(cfg: &ExperimentConfig, layout: &Layout, a: &RepairArgs) -> Result<()> {
    if a.refine == RefineMode::Off {
        return Err(HarnessError::Validation("repair needs --refine low or cascaded".into()));
    }
    let plans = read_plans(&a.input)?;
    let instances = test_instances(cfg, layout)?;
    let mut specs = Vec::with_capacity(plans.len());
    for p in &plans {
        let mut spec = p.spec.clone();
        if spec.refine != RefineMode::Off {
            return Err(HarnessError::Validation(format!("{}: plan {} is already refined", a.input.display(), p.result.index)));
        }
        spec.refine = a.refine;
        spec.detector = a.detector;
        spec.name = method_name(spec.planner, spec.guidance, spec.guidance_noise, spec.refine, spec.detector);
        spec.validate()?;
        specs.push(spec);
    }
    let models = experiment::load_models(cfg, layout, &specs)?;
    let ctx = EvalContext {
        models: &models,
        refine: &cfg.refine,
        horizon: cfg.cascade.horizon,
        timing_repeats: 1,
    };
    let mut out = Vec::with_capacity(plans.len());
    for (p, spec) in plans.iter().zip(specs) {
        let inst = instances
            .get(p.result.index)
            .filter(|i| i.seed == p.result.seed)
            .ok_or_else(|| HarnessError::Validation(format!("plan {} does not belong to this run's test set", p.result.index)))?;
        let mut result = ctx.repair_result(&spec, inst, &p.result.trajectory)?;
        result.wall_time_s += p.result.wall_time_s;
        out.push(PlanRecord { spec, result });
    }
    let ok = out.iter().filter(|r| r.result.success).count();
    let path = a.output.clone().unwrap_or_else(|| {
        let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "plans".into());
        a.input.with_file_name(format!("{stem}.repaired.jsonl"))
    });
    write_lines(&path, &out)?;
    println!("repaired {} plans: {ok} successful, written to {}", out.len(), path.display());
    Ok(())
}

fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(HarnessError::Validation("--threads must be at least 1".into()));
        }
        // A global pool can only be installed once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (cfg, layout) = resolve_config(cli)?;
    eprintln!("seed {} run directory {}", cfg.base_seed(), layout.root.display());
    match &cli.command {
        Command::GenData => {
            let (train, test) = experiment::gen_data(&cfg, &layout)?;
            println!("datasets: {} train, {} test scenes in {}", train.records.len(), test.records.len(), layout.data().display());
        }
        Command::TrainHigh => report_training(experiment::train_stage(&cfg, &layout, Level::High)?.step, Level::High),
        Command::TrainLow => report_training(experiment::train_stage(&cfg, &layout, Level::Low)?.step, Level::Low),
        Command::TrainFlat => report_training(experiment::train_stage(&cfg, &layout, Level::Flat)?.step, Level::Flat),
        Command::TrainCollision => {
            let (_, r) = experiment::classifier_stage(&cfg, &layout)?;
            println!("collision classifier: held-out F1 {:.4} (precision {:.4}, recall {:.4})", r.f1, r.precision, r.recall);
        }
        Command::Plan(a) => plan_command(&cfg, &layout, a)?,
        Command::Repair(a) => repair_command(&cfg, &layout, a)?,
        Command::Eval => {
            let m = experiment::eval_stage(&cfg, &layout, cli.threads)?;
            for r in &m.methods {
                println!("{:<32} success {:.3}", r.method, r.success_rate);
            }
        }
        Command::Report => {
            report::report_stage(&cfg, &layout)?;
            println!("report written to {}", layout.root.display());
        }
        Command::Run => {
            let root = experiment::run_experiment(&cfg, cli.threads)?;
            println!("results in {}", root.display());
        }
    }
    Ok(())
}

fn report_training(step: usize, level: Level) {
    println!("{level} model trained to step {step}");
}

/// Parses `args` (program name first) and runs the command; returns the
/// process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
