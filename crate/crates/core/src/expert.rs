//! Expert demonstrations: RRT planning, shortcut smoothing, fixed-horizon
//! resampling and JSON-lines dataset persistence.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::workspace::{
    generate_workspace, path_length, GenerationParams, Vec2, Workspace, VALIDATION_STEP,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RrtParams {
    pub max_iters: usize,
    pub step_size: f64,
    pub goal_bias: f64,
}

impl Default for RrtParams {
    fn default() -> Self {
        RrtParams {
            max_iters: 20_000,
            step_size: 0.05,
            goal_bias: 0.1,
        }
    }
}

/// A collision-free polyline from the scene's start to its goal.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPath {
    pub states: Vec<Vec2>,
    pub planning_time: f64,
}

impl ExpertPath {
    pub fn cost(&self) -> f64 {
        path_length(&self.states)
    }
}

/// Goal-biased RRT in the unit square. Every new node tries a straight
/// connection to the goal.
pub fn rrt_plan(ws: &Workspace, params: &RrtParams, rng_seed: u64) -> Result<ExpertPath> {
    if !(params.step_size > 0.0) || !(0.0..=1.0).contains(&params.goal_bias) || params.max_iters == 0 {
        return Err(Error::Precondition("RRT parameters must be positive".into()));
    }
    ws.validate()?;
    let clock = Instant::now();
    let (start, goal) = (ws.start, ws.goal);
    if ws.segment_free(start, goal, VALIDATION_STEP) {
        return Ok(ExpertPath {
            states: vec![start, goal],
            planning_time: clock.elapsed().as_secs_f64(),
        });
    }

    let mut rng = seed::rng(rng_seed);
    let mut nodes = vec![start];
    let mut parent = vec![usize::MAX];
    for _ in 0..params.max_iters {
        let target = if rng.random_bool(params.goal_bias) {
            goal
        } else {
            Vec2::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0))
        };
        let (near, _) = nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (i, n.distance(target)))
            .fold((0, f64::INFINITY), |b, c| if c.1 < b.1 { c } else { b });
        let from = nodes[near];
        let d = from.distance(target);
        if d < 1e-9 {
            continue;
        }
        let new = if d > params.step_size {
            from.lerp(target, params.step_size / d)
        } else {
            target
        };
        if !ws.segment_free(from, new, VALIDATION_STEP) {
            continue;
        }
        nodes.push(new);
        parent.push(near);
        if ws.segment_free(new, goal, VALIDATION_STEP) {
            let mut states = vec![goal];
            let mut i = nodes.len() - 1;
            while i != usize::MAX {
                states.push(nodes[i]);
                i = parent[i];
            }
            states.reverse();
            if states[states.len() - 2] == goal {
                states.pop();
            }
            return Ok(ExpertPath {
                states,
                planning_time: clock.elapsed().as_secs_f64(),
            });
        }
    }
    Err(Error::PlanningFailed {
        iterations: params.max_iters,
    })
}

fn point_at(path: &[Vec2], cumulative: &[f64], s: f64) -> (usize, Vec2) {
    let seg = cumulative.partition_point(|&c| c <= s).clamp(1, path.len() - 1) - 1;
    let len = cumulative[seg + 1] - cumulative[seg];
    let frac = if len > 0.0 { ((s - cumulative[seg]) / len).clamp(0.0, 1.0) } else { 0.0 };
    (seg, path[seg].lerp(path[seg + 1], frac))
}

fn cumulative_lengths(path: &[Vec2]) -> Vec<f64> {
    let mut acc = 0.0;
    std::iter::once(0.0)
        .chain(path.windows(2).map(|w| {
            acc += w[0].distance(w[1]);
            acc
        }))
        .collect()
}

/// Randomized partial shortcutting followed by a greedy vertex pass. A
/// replacement is accepted only if it is collision-free and strictly shorter.
pub fn shortcut(path: &ExpertPath, ws: &Workspace, attempts: usize, rng_seed: u64) -> ExpertPath {
    let mut rng = seed::rng(rng_seed);
    let mut states = path.states.clone();
    for _ in 0..attempts {
        if states.len() < 3 {
            break;
        }
        let cum = cumulative_lengths(&states);
        let total = *cum.last().unwrap();
        let (mut s1, mut s2) = (rng.random_range(0.0..total), rng.random_range(0.0..total));
        if s1 > s2 {
            std::mem::swap(&mut s1, &mut s2);
        }
        let (i, a) = point_at(&states, &cum, s1);
        let (j, b) = point_at(&states, &cum, s2);
        if j <= i {
            continue;
        }
        let old = (s2 - s1).max(0.0);
        // Validity is checked on discretized segments, so the partial
        // segments on either side of the shortcut need their own check.
        if a.distance(b) + 1e-12 >= old
            || !ws.segment_free(a, b, VALIDATION_STEP)
            || !ws.segment_free(states[i], a, VALIDATION_STEP)
            || !ws.segment_free(b, states[j + 1], VALIDATION_STEP)
        {
            continue;
        }
        let mut next = Vec::with_capacity(states.len());
        next.extend_from_slice(&states[..=i]);
        if a != states[i] {
            next.push(a);
        }
        if b != states[j + 1] {
            next.push(b);
        }
        next.extend_from_slice(&states[j + 1..]);
        if path_length(&next) < path_length(&states) {
            states = next;
        }
    }

    let mut greedy = vec![states[0]];
    let mut i = 0;
    while i + 1 < states.len() {
        let j = (i + 1..states.len())
            .rev()
            .find(|&j| j == i + 1 || ws.segment_free(states[i], states[j], VALIDATION_STEP))
            .unwrap();
        greedy.push(states[j]);
        i = j;
    }
    if path_length(&greedy) + 1e-12 < path_length(&states) {
        states = greedy;
    }
    ExpertPath {
        states,
        planning_time: path.planning_time,
    }
}

/// Resamples a polyline to `horizon + 1` states equally spaced in arc length.
/// Endpoints are copied exactly.
pub fn resample_fixed_horizon(states: &[Vec2], horizon: usize) -> Result<Vec<Vec2>> {
    if horizon == 0 {
        return Err(Error::Precondition("horizon must be at least 1".into()));
    }
    let Some(&first) = states.first() else {
        return Err(Error::Precondition("empty path".into()));
    };
    let last = *states.last().unwrap();
    if states.len() == 1 {
        return Ok(vec![first; horizon + 1]);
    }
    let cum = cumulative_lengths(states);
    let total = *cum.last().unwrap();
    let mut out: Vec<Vec2> = (0..=horizon)
        .map(|k| point_at(states, &cum, total * k as f64 / horizon as f64).1)
        .collect();
    out[0] = first;
    out[horizon] = last;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Unknown {
                what: "split",
                value: other.into(),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub workspace: Workspace,
    pub trajectory: Vec<Vec2>,
    pub expert_seed: u64,
    pub planning_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub base_seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<DatasetRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetParams {
    pub horizon: usize,
    pub generation: GenerationParams,
    pub rrt: RrtParams,
    pub shortcut_attempts: usize,
    /// Clearance added to the robot radius while planning expert paths.
    pub expert_clearance: f64,
    pub max_expert_retries: usize,
    /// Store measured RRT wall time; when false `planning_time_s` is 0 and
    /// dataset files are reproducible byte-for-byte.
    pub record_timing: bool,
}

impl Default for DatasetParams {
    fn default() -> Self {
        DatasetParams {
            horizon: 64,
            generation: GenerationParams::default(),
            rrt: RrtParams::default(),
            shortcut_attempts: 200,
            expert_clearance: 0.02,
            max_expert_retries: 20,
            record_timing: false,
        }
    }
}

/// Seed of the `index`-th scene of a split.
pub fn workspace_seed(base_seed: u64, split: Split, index: usize) -> u64 {
    seed::derive_labeled(base_seed, split.as_str(), index as u64)
}

/// Plans, smooths and resamples one expert trajectory for `ws`, retrying
/// with fresh expert seeds whenever the resampled result fails validation.
pub fn expert_record(ws: &Workspace, params: &DatasetParams) -> Result<DatasetRecord> {
    let planning_ws = ws.inflated(params.expert_clearance);
    let mut last_err = None;
    for attempt in 0..params.max_expert_retries {
        let expert_seed = seed::derive_labeled(ws.seed, "expert", attempt as u64);
        let raw = match rrt_plan(&planning_ws, &params.rrt, expert_seed) {
            Ok(p) => p,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let smooth = shortcut(&raw, &planning_ws, params.shortcut_attempts, seed::derive(expert_seed, 1));
        let trajectory = resample_fixed_horizon(&smooth.states, params.horizon)?;
        if ws.path_valid(&trajectory, VALIDATION_STEP).valid {
            return Ok(DatasetRecord {
                workspace: ws.clone(),
                trajectory,
                expert_seed,
                planning_time_s: if params.record_timing { raw.planning_time } else { 0.0 },
            });
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::Exhausted(format!("no valid expert trajectory for workspace {}", ws.seed))
    }))
}

/// Builds `n` (scene, expert trajectory) records. Records are generated in
/// parallel; each one depends only on `(base_seed, split, index)`.
pub fn generate_dataset(n: usize, base_seed: u64, split: Split, params: &DatasetParams) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Precondition("dataset size must be at least 1".into()));
    }
    let records = (0..n)
        .into_par_iter()
        .map(|i| {
            let ws = generate_workspace(workspace_seed(base_seed, split, i), &params.generation)?;
            expert_record(&ws, params)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest: DatasetManifest {
            n,
            horizon: params.horizon,
            base_seed,
            split,
        },
        records,
    })
}

impl Dataset {
    pub fn records_path(dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("{}.jsonl", split.as_str()))
    }

    pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
        dir.join(format!("{}.manifest.json", split.as_str()))
    }

    pub fn write_records<W: Write>(&self, mut w: W) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_records(&mut buf).expect("writing to memory");
        buf
    }

    pub fn read_records<R: BufRead>(r: R) -> Result<Vec<DatasetRecord>> {
        r.lines()
            .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
            .map(|l| Ok(serde_json::from_str(&l?)?))
            .collect()
    }

    /// Writes `<split>.jsonl` and `<split>.manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(fs::File::create(Self::records_path(dir, self.manifest.split))?);
        self.write_records(&mut w)?;
        w.flush()?;
        fs::write(
            Self::manifest_path(dir, self.manifest.split),
            serde_json::to_string_pretty(&self.manifest)?,
        )?;
        Ok(())
    }

    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let manifest: DatasetManifest =
            serde_json::from_str(&fs::read_to_string(Self::manifest_path(dir, split))?)?;
        let records = Self::read_records(BufReader::new(fs::File::open(Self::records_path(dir, split))?))?;
        if records.len() != manifest.n {
            return Err(Error::Precondition(format!(
                "manifest lists {} records, file has {}",
                manifest.n,
                records.len()
            )));
        }
        Ok(Dataset { manifest, records })
    }

    /// Checks the dataset invariants against the exact collision checker.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.trajectory.len() != self.manifest.horizon + 1 {
                return Err(Error::shape(self.manifest.horizon + 1, r.trajectory.len()));
            }
            if !r.workspace.path_valid(&r.trajectory, VALIDATION_STEP).valid {
                return Err(Error::Precondition(format!("record {i} trajectory is not collision-free")));
            }
        }
        Ok(())
    }
}
