//! Per-instance planning, success judgement and aggregate metrics.

use std::collections::HashMap;
use std::time::Instant;

use cdp_core::cascade::{plan_flat, Cascade, GuidanceSettings};
use cdp_core::expert::DatasetRecord;
use cdp_core::nets::DenoiserModel;
use cdp_core::refine::classifier::{CollisionClassifier, LearnedDetector};
use cdp_core::refine::{ExactDetector, RefineParams, RepairContext, RepairReport, Repaired, ViolationDetector};
use cdp_core::seed;
use cdp_core::workspace::{path_length, OccupancyGrid, Vec2, Workspace, VALIDATION_STEP};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DetectorKind, MethodSpec, Planner, RefineMode};
use crate::error::{HarnessError, Result};

/// Final state must lie within one robot diameter of the goal.
pub const GOAL_TOLERANCE: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub method: String,
    pub index: usize,
    pub seed: u64,
    pub trajectory: Vec<Vec2>,
    pub per_state_valid: Vec<bool>,
    pub success: bool,
    pub wall_time_s: f64,
    pub cost: f64,
    pub goal_error: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repair: Option<RepairReport>,
}

/// Total Euclidean length.
pub fn plan_cost(traj: &[Vec2]) -> f64 {
    path_length(traj)
}

pub fn judge(method: &str, inst: &Instance, trajectory: Vec<Vec2>, wall_time_s: f64) -> PlanResult {
    let validity = inst.workspace.path_valid(&trajectory, VALIDATION_STEP);
    let goal_error = trajectory.last().map_or(f64::INFINITY, |q| q.distance(inst.workspace.goal));
    PlanResult {
        method: method.to_string(),
        index: inst.index,
        seed: inst.seed,
        cost: plan_cost(&trajectory),
        success: validity.valid && goal_error <= GOAL_TOLERANCE,
        per_state_valid: validity.per_state,
        trajectory,
        wall_time_s,
        goal_error,
        repair: None,
    }
}

/// A test scene with its per-instance seed.
#[derive(Clone, Debug)]
pub struct Instance {
    pub index: usize,
    pub seed: u64,
    pub workspace: Workspace,
    pub expert: Vec<Vec2>,
}

impl Instance {
    pub fn from_records(records: &[DatasetRecord], base_seed: u64) -> Vec<Instance> {
        records
            .iter()
            .enumerate()
            .map(|(index, r)| Instance {
                index,
                seed: seed::derive_labeled(base_seed, "eval", index as u64),
                workspace: r.workspace.clone(),
                expert: r.trajectory.clone(),
            })
            .collect()
    }
}

#[derive(Default)]
pub struct Models {
    pub cascade: Option<Cascade>,
    pub flat: Option<DenoiserModel>,
    pub classifier: Option<CollisionClassifier>,
}

pub struct EvalContext<'a> {
    pub models: &'a Models,
    pub refine: &'a RefineParams,
    pub horizon: usize,
    pub timing_repeats: usize,
}

fn unavailable(what: &str) -> HarnessError {
    HarnessError::Validation(format!("{what} model not loaded"))
}

/// Runs `f` `repeats` times; returns the first result and the median time.
fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut times = Vec::with_capacity(repeats.max(1));
    let t = Instant::now();
    let out = f()?;
    times.push(t.elapsed().as_secs_f64());
    for _ in 1..repeats {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64());
    }
    Ok((out, median(&mut times)))
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl EvalContext<'_> {
    fn guidance(spec: &MethodSpec) -> GuidanceSettings {
        GuidanceSettings {
            strength: spec.guidance,
            grad_noise: spec.guidance_noise,
        }
    }

    /// Unrefined trajectory of a method.
    pub fn base_plan(&self, spec: &MethodSpec, inst: &Instance) -> Result<Vec<Vec2>> {
        let ws = &inst.workspace;
        Ok(match spec.planner {
            Planner::Expert => inst.expert.clone(),
            Planner::StraightLine => (0..=self.horizon).map(|i| ws.start.lerp(ws.goal, i as f64 / self.horizon as f64)).collect(),
            Planner::Flat => {
                let flat = self.models.flat.as_ref().ok_or_else(|| unavailable("flat"))?;
                plan_flat(flat, ws, inst.seed, &Self::guidance(spec))?.states
            }
            Planner::Cascade => {
                let cascade = self.models.cascade.as_ref().ok_or_else(|| unavailable("cascade"))?;
                cascade.plan(ws, inst.seed, &Self::guidance(spec))?.states
            }
        })
    }

    /// Applies the method's refinement to `states`.
    pub fn refine(&self, spec: &MethodSpec, inst: &Instance, states: &[Vec2]) -> Result<Repaired> {
        let cascade = self.models.cascade.as_ref().ok_or_else(|| unavailable("cascade"))?;
        let ws = &inst.workspace;
        let grid = OccupancyGrid::rasterize(ws, cascade.config.grid_resolution);
        let exact = ExactDetector(ws);
        let learned;
        let detector: &dyn ViolationDetector = match spec.detector {
            DetectorKind::Exact => &exact,
            DetectorKind::Learned => {
                let clf = self.models.classifier.as_ref().ok_or_else(|| unavailable("collision classifier"))?;
                learned = LearnedDetector::new(clf, ws);
                &learned
            }
        };
        let ctx = RepairContext {
            cascade,
            workspace: ws,
            grid: &grid,
            detector,
            params: self.refine,
            guidance: Self::guidance(spec),
        };
        let seed = seed::derive_labeled(inst.seed, "repair", 0);
        Ok(match spec.refine {
            RefineMode::Off => Repaired {
                states: states.to_vec(),
                report: RepairReport::default(),
            },
            RefineMode::Low => ctx.repair(states, seed)?,
            RefineMode::Cascaded => ctx.cascaded_repair(states, seed)?,
        })
    }

    /// Refinement of an existing plan, judged; the time covers only the repair.
    pub fn repair_result(&self, spec: &MethodSpec, inst: &Instance, states: &[Vec2]) -> Result<PlanResult> {
        let (rep, t) = timed(self.timing_repeats, || self.refine(spec, inst, states))?;
        let mut r = judge(&spec.name, inst, rep.states, t);
        r.repair = Some(rep.report);
        Ok(r)
    }

    pub fn run_method(&self, spec: &MethodSpec, inst: &Instance) -> Result<PlanResult> {
        Ok(self.run_instance(std::slice::from_ref(spec), inst)?.remove(0))
    }

    /// All methods on one instance; methods sharing planner and guidance
    /// share the unrefined plan.
    pub fn run_instance(&self, methods: &[MethodSpec], inst: &Instance) -> Result<Vec<PlanResult>> {
        let mut base: HashMap<(Planner, u64, u64), (Vec<Vec2>, f64)> = HashMap::new();
        let mut out = Vec::with_capacity(methods.len());
        for spec in methods {
            let key = (spec.planner, spec.guidance.to_bits(), spec.guidance_noise.to_bits());
            if !base.contains_key(&key) {
                let planned = timed(self.timing_repeats, || self.base_plan(spec, inst))?;
                base.insert(key, planned);
            }
            let (states, t_plan) = &base[&key];
            let result = if spec.refine == RefineMode::Off {
                judge(&spec.name, inst, states.clone(), *t_plan)
            } else {
                let mut r = self.repair_result(spec, inst, states)?;
                r.wall_time_s += t_plan;
                r
            };
            out.push(result);
        }
        Ok(out)
    }

    /// Per-method results in method order, instances in index order.
    pub fn evaluate(&self, methods: &[MethodSpec], instances: &[Instance], threads: Option<usize>) -> Result<Vec<Vec<PlanResult>>> {
        let run = || instances.par_iter().map(|inst| self.run_instance(methods, inst)).collect::<Result<Vec<_>>>();
        let per_instance = match threads {
            Some(n) => rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| HarnessError::Validation(e.to_string()))?
                .install(run)?,
            None => run()?,
        };
        let mut per_method: Vec<Vec<PlanResult>> = methods.iter().map(|_| Vec::with_capacity(instances.len())).collect();
        for row in per_instance {
            for (k, r) in row.into_iter().enumerate() {
                per_method[k].push(r);
            }
        }
        Ok(per_method)
    }
}

/// Deterministic aggregate of one method's results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: String,
    pub instances: usize,
    pub successes: usize,
    pub success_rate: f64,
    /// Over successful plans; absent when none succeeded.
    pub mean_cost: Option<f64>,
    pub repairs_triggered: usize,
}

/// Wall-clock aggregate, kept apart from the reproducible metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodTiming {
    pub method: String,
    pub mean_time_s: f64,
    pub median_time_s: f64,
    /// Mean over instances where refinement re-sampled at least one window.
    pub mean_time_repair_triggered_s: Option<f64>,
}

fn triggered(r: &PlanResult) -> bool {
    r.repair.as_ref().is_some_and(|rep| rep.model_calls > 0)
}

pub fn aggregate(method: &str, results: &[PlanResult]) -> Result<(MethodMetrics, MethodTiming)> {
    if let Some(bad) = results.iter().find(|r| r.success && r.per_state_valid.iter().any(|&v| !v)) {
        return Err(HarnessError::Validation(format!("{method}: instance {} reports success with invalid states", bad.index)));
    }
    let n = results.len();
    let ok: Vec<&PlanResult> = results.iter().filter(|r| r.success).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let costs: Vec<f64> = ok.iter().map(|r| r.cost).collect();
    let mut times: Vec<f64> = results.iter().map(|r| r.wall_time_s).collect();
    let trig: Vec<f64> = results.iter().filter(|r| triggered(r)).map(|r| r.wall_time_s).collect();
    let metrics = MethodMetrics {
        method: method.to_string(),
        instances: n,
        successes: ok.len(),
        success_rate: if n == 0 { 0.0 } else { ok.len() as f64 / n as f64 },
        mean_cost: mean(&costs),
        repairs_triggered: trig.len(),
    };
    let timing = MethodTiming {
        method: method.to_string(),
        mean_time_s: mean(&times).unwrap_or(f64::NAN),
        median_time_s: median(&mut times),
        mean_time_repair_triggered_s: mean(&trig),
    };
    Ok((metrics, timing))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst(ws: Workspace) -> Instance {
        Instance {
            index: 0,
            seed: 1,
            expert: vec![ws.start, ws.goal],
            workspace: ws,
        }
    }

    #[test]
    fn cost_examples() {
        let line: Vec<Vec2> = (0..5).map(|i| Vec2::new(i as f64 / 4.0, 0.0)).collect();
        assert!((plan_cost(&line) - 1.0).abs() < 1e-15);
        let lp = vec![Vec2::new(0.0, 0.0), Vec2::new(1.0, 0.0), Vec2::new(0.0, 0.0)];
        assert_eq!(plan_cost(&lp), 2.0);
    }

    #[test]
    fn success_needs_goal_and_validity() {
        let ws = Workspace::empty(Vec2::new(0.1, 0.1), Vec2::new(0.9, 0.9), 0.01);
        let i = inst(ws.clone());
        let r = judge("m", &i, vec![ws.start, ws.goal], 0.0);
        assert!(r.success && r.goal_error == 0.0);
        let r = judge("m", &i, vec![ws.start, Vec2::new(0.9, 0.87)], 0.0);
        assert!(!r.success && (r.goal_error - 0.03).abs() < 1e-12);
    }

    #[test]
    fn aggregate_rejects_success_with_invalid_state() {
        let ws = Workspace::empty(Vec2::new(0.1, 0.1), Vec2::new(0.9, 0.9), 0.01);
        let mut r = judge("m", &inst(ws.clone()), vec![ws.start, ws.goal], 0.5);
        let (m, t) = aggregate("m", std::slice::from_ref(&r)).unwrap();
        assert_eq!((m.successes, m.success_rate, t.median_time_s), (1, 1.0, 0.5));
        r.per_state_valid[0] = false;
        assert!(aggregate("m", &[r]).is_err());
    }

    #[test]
    fn median_examples() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0]), 2.5);
        assert!(median(&mut []).is_nan());
    }
}
