//! Two-level hierarchy: sub-sampled high-level trajectories, densified
//! reference channels, level-wise training and the high -> low planner.

use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::{forward_sample, sample, states_to_model, states_to_world, Guidance, NoiseSchedule, SampleSpec, ScheduleKind};
use crate::error::{Error, Result};
use crate::expert::DatasetRecord;
use crate::nets::train::LossParts;
use crate::nets::{Conditioning, DenoiserConfig, DenoiserModel, Level, OptimConfig, TrainSample, TrainState};
use crate::seed;
use crate::workspace::{OccupancyGrid, Symmetry, Vec2, Workspace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CascadeConfig {
    /// Raw steps of a full plan; plans have `horizon + 1` states.
    pub horizon: usize,
    /// Raw steps between consecutive sub-goals.
    pub subgoal_spacing: usize,
    /// Raw steps between consecutive high-level states.
    pub high_stride: usize,
    /// Interior raw offsets of the reference anchors within a segment.
    pub reference_offsets: Vec<usize>,
    pub grid_resolution: usize,
    #[serde(default)]
    pub schedules: LevelSchedules,
}

/// Noise schedule family and `T_diff` of each level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LevelSchedules {
    pub kind: ScheduleKind,
    pub high: usize,
    pub low: usize,
    pub flat: usize,
}

impl Default for LevelSchedules {
    fn default() -> Self {
        LevelSchedules {
            kind: ScheduleKind::Cosine,
            high: 100,
            low: 64,
            flat: 100,
        }
    }
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            horizon: 64,
            subgoal_spacing: 8,
            high_stride: 2,
            reference_offsets: vec![2, 4, 6],
            grid_resolution: 32,
            schedules: LevelSchedules::default(),
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Precondition(m.to_string()));
        if self.high_stride == 0 || self.subgoal_spacing == 0 || self.horizon == 0 {
            return bad("horizon, spacing and stride must be positive");
        }
        if self.horizon % self.subgoal_spacing != 0 {
            return bad("sub-goal spacing must divide the horizon");
        }
        if self.subgoal_spacing % self.high_stride != 0 {
            return bad("high-level stride must divide the sub-goal spacing");
        }
        let expected: Vec<usize> = (1..self.subgoal_spacing / self.high_stride).map(|k| k * self.high_stride).collect();
        if self.reference_offsets != expected {
            return bad("reference offsets must be the interior multiples of the high-level stride");
        }
        Ok(())
    }

    pub fn full_states(&self) -> usize {
        self.horizon + 1
    }

    pub fn high_states(&self) -> usize {
        self.horizon / self.high_stride + 1
    }

    pub fn segments(&self) -> usize {
        self.horizon / self.subgoal_spacing
    }

    pub fn segment_states(&self) -> usize {
        self.subgoal_spacing + 1
    }

    /// High-level states per segment, endpoints included.
    pub fn anchors_per_segment(&self) -> usize {
        self.subgoal_spacing / self.high_stride + 1
    }

    /// Raw trajectory index of high-level state `i`.
    pub fn raw_index(&self, i: usize) -> usize {
        i * self.high_stride
    }

    /// Denoiser presets sized for this hierarchy.
    pub fn model_config(&self, level: Level) -> DenoiserConfig {
        let mut c = DenoiserConfig::for_level(level);
        c.states = match level {
            Level::High => self.high_states(),
            Level::Low => self.segment_states(),
            Level::Flat => self.full_states(),
        };
        c.grid_resolution = self.grid_resolution;
        c.schedule = self.schedules.kind;
        c.diffusion_steps = match level {
            Level::High => self.schedules.high,
            Level::Low => self.schedules.low,
            Level::Flat => self.schedules.flat,
        };
        c
    }
}

/// One phase-shifted high-level training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HighSequence {
    pub phase: usize,
    /// Raw indices into the source trajectory.
    pub indices: Vec<usize>,
    pub states: Vec<Vec2>,
}

/// For each phase `p < high_stride`, the states `q_p, q_{p+s}, ...` with the
/// terminal state appended when the stride skips it.
pub fn subsample_hierarchy(traj: &[Vec2], cfg: &CascadeConfig) -> Result<Vec<HighSequence>> {
    if cfg.high_stride == 0 || traj.is_empty() {
        return Err(Error::Precondition("empty trajectory or zero stride".into()));
    }
    let horizon = traj.len() - 1;
    if horizon % cfg.high_stride != 0 {
        return Err(Error::Precondition(format!(
            "stride {} does not divide horizon {horizon}",
            cfg.high_stride
        )));
    }
    Ok((0..cfg.high_stride)
        .map(|phase| {
            let mut indices: Vec<usize> = (phase..=horizon).step_by(cfg.high_stride).collect();
            if *indices.last().unwrap() != horizon {
                indices.push(horizon);
            }
            HighSequence {
                phase,
                states: indices.iter().map(|&i| traj[i]).collect(),
                indices,
            }
        })
        .collect())
}

/// Densifies segment anchors at offsets `0, s, 2s, ..., spacing` to one
/// state per raw step by linear interpolation.
pub fn make_reference(anchors: &[Vec2], cfg: &CascadeConfig) -> Result<Vec<Vec2>> {
    if anchors.len() != cfg.anchors_per_segment() {
        return Err(Error::shape(format!("{} anchors", cfg.anchors_per_segment()), anchors.len()));
    }
    let s = cfg.high_stride;
    let mut out = Vec::with_capacity(cfg.segment_states());
    for w in anchors.windows(2) {
        out.extend((0..s).map(|k| w[0].lerp(w[1], k as f64 / s as f64)));
    }
    out.push(*anchors.last().unwrap());
    Ok(out)
}

/// Reference-channel augmentation for low-level training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Probability of jittered ground-truth anchors; otherwise a bank sample.
    pub p_gt: f64,
    /// Jitter standard deviation on interior anchors (workspace units).
    pub sigma_aug: f64,
    /// Intermediate diffusion step as a fraction of the high-level `T_diff`.
    pub t_mid_fraction: f64,
    /// High-model predictions stored per training record.
    pub bank_variants: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            enabled: true,
            p_gt: 0.5,
            sigma_aug: 0.01,
            t_mid_fraction: 0.25,
            bank_variants: 4,
        }
    }
}

impl AugmentConfig {
    pub fn disabled() -> Self {
        AugmentConfig {
            enabled: false,
            p_gt: 1.0,
            sigma_aug: 0.0,
            ..Self::default()
        }
    }
}

/// Training-run settings shared by all levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Overrides the per-level peak learning rate.
    pub peak_lr: Option<f64>,
    /// Train on random dihedral transforms of each scene.
    pub symmetry_augment: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 4000,
            batch_size: 64,
            warmup_steps: 2000,
            peak_lr: None,
            symmetry_augment: true,
        }
    }
}

impl TrainSettings {
    pub fn optim(&self, level: Level) -> OptimConfig {
        let base = OptimConfig::for_level(level, self.steps);
        OptimConfig {
            batch_size: self.batch_size,
            warmup_steps: self.warmup_steps,
            peak_lr: self.peak_lr.unwrap_or(base.peak_lr),
            ..base
        }
    }

    pub fn new_state(&self, cascade: &CascadeConfig, level: Level, seed: u64) -> Result<TrainState> {
        let cfg = cascade.model_config(level).with_seed(seed::derive_labeled(seed, "init", 0));
        let model = DenoiserModel::new(cfg)?;
        Ok(TrainState::new(model, self.optim(level), seed::derive_labeled(seed, "train", 0)))
    }
}

/// A dataset record with its identity-frame occupancy grid.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub workspace: Workspace,
    pub trajectory: Vec<Vec2>,
    pub grid: OccupancyGrid,
}

pub fn prepare(records: &[DatasetRecord], cascade: &CascadeConfig) -> Result<Vec<Prepared>> {
    use rayon::prelude::*;
    records
        .par_iter()
        .map(|r| {
            if r.trajectory.len() != cascade.full_states() {
                return Err(Error::shape(format!("{} states", cascade.full_states()), r.trajectory.len()));
            }
            Ok(Prepared {
                grid: OccupancyGrid::rasterize(&r.workspace, cascade.grid_resolution),
                workspace: r.workspace.clone(),
                trajectory: r.trajectory.clone(),
            })
        })
        .collect()
}

/// Produces random training samples.
pub trait BatchSource: Sync {
    fn draw(&self, rng: &mut ChaCha8Rng) -> TrainSample;
}

fn pick_symmetry(rng: &mut ChaCha8Rng, enabled: bool) -> Symmetry {
    if enabled {
        Symmetry(rng.random_range(0..8))
    } else {
        Symmetry::IDENTITY
    }
}

fn model_sample(
    rec: &Prepared,
    sym: Symmetry,
    states: &[Vec2],
    goal: Vec2,
    subgoal: Option<Vec2>,
    reference: &[Vec2],
) -> TrainSample {
    let states: Vec<Vec2> = states.iter().map(|&q| sym.apply(q)).collect();
    let (first, last) = (states[0], *states.last().unwrap());
    let grid = rec.grid.transformed(sym).with_markers(first, subgoal.map(|g| sym.apply(g)).unwrap_or(last));
    let reference: Vec<Vec2> = reference.iter().map(|&q| sym.apply(q)).collect();
    let ref_channels = if reference.is_empty() {
        vec![0.0; states.len() * 2]
    } else {
        states_to_model(&reference)
    };
    TrainSample {
        x0: states_to_model(&states),
        cond: Conditioning::new(&grid, first, sym.apply(goal), subgoal.map(|g| sym.apply(g)), ref_channels),
        fixed: vec![0, states.len() - 1],
        workspace: Some(rec.workspace.transformed(sym)),
    }
}

/// Phase-shifted high-level sequences.
pub struct HighSource<'a> {
    pub data: &'a [Prepared],
    pub cascade: &'a CascadeConfig,
    pub symmetry: bool,
}

impl BatchSource for HighSource<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> TrainSample {
        let rec = &self.data[rng.random_range(0..self.data.len())];
        let phase = rng.random_range(0..self.cascade.high_stride);
        let sym = pick_symmetry(rng, self.symmetry);
        let seqs = subsample_hierarchy(&rec.trajectory, self.cascade).expect("prepared trajectory");
        let seq = &seqs[phase].states;
        model_sample(rec, sym, seq, *seq.last().unwrap(), None, &[])
    }
}

/// Whole trajectories for the non-hierarchical baseline.
pub struct FlatSource<'a> {
    pub data: &'a [Prepared],
    pub symmetry: bool,
}

impl BatchSource for FlatSource<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> TrainSample {
        let rec = &self.data[rng.random_range(0..self.data.len())];
        let sym = pick_symmetry(rng, self.symmetry);
        let traj = &rec.trajectory;
        model_sample(rec, sym, traj, *traj.last().unwrap(), None, &[])
    }
}

/// 9-state segments with sub-goal conditioning and reference channels.
pub struct LowSource<'a> {
    pub data: &'a [Prepared],
    pub cascade: &'a CascadeConfig,
    /// `bank[record][variant]`: high-level predictions in the identity frame.
    pub bank: &'a [Vec<Vec<Vec2>>],
    pub augment: &'a AugmentConfig,
    pub symmetry: bool,
}

impl LowSource<'_> {
    /// Reference anchors for the window starting at raw index `start`.
    pub fn anchors(&self, rng: &mut ChaCha8Rng, rec_index: usize, start: usize) -> Vec<Vec2> {
        let c = self.cascade;
        let traj = &self.data[rec_index].trajectory;
        let n = c.anchors_per_segment();
        let gt: Vec<Vec2> = (0..n).map(|k| traj[start + k * c.high_stride]).collect();
        if !self.augment.enabled {
            return gt;
        }
        let bank = &self.bank[rec_index];
        if bank.is_empty() || rng.random_bool(self.augment.p_gt.clamp(0.0, 1.0)) {
            let mut out = gt;
            for q in &mut out[1..n - 1] {
                let dx: f64 = rng.sample(StandardNormal);
                let dy: f64 = rng.sample(StandardNormal);
                *q += Vec2::new(dx, dy) * self.augment.sigma_aug;
            }
            out
        } else {
            let pred = &bank[rng.random_range(0..bank.len())];
            let first = start / c.high_stride;
            let mut out: Vec<Vec2> = pred[first..first + n].to_vec();
            // Segment endpoints are always clamped, so the reference keeps them exact.
            out[0] = gt[0];
            out[n - 1] = gt[n - 1];
            out
        }
    }
}

impl BatchSource for LowSource<'_> {
    fn draw(&self, rng: &mut ChaCha8Rng) -> TrainSample {
        let c = self.cascade;
        let idx = rng.random_range(0..self.data.len());
        let rec = &self.data[idx];
        // Windows start on the phase-0 high-level grid.
        let starts = (c.horizon - c.subgoal_spacing) / c.high_stride;
        let start = rng.random_range(0..=starts) * c.high_stride;
        let sym = pick_symmetry(rng, self.symmetry);
        let anchors = self.anchors(rng, idx, start);
        let reference = make_reference(&anchors, c).expect("anchor count");
        let seg = &rec.trajectory[start..=start + c.subgoal_spacing];
        let goal = *rec.trajectory.last().unwrap();
        model_sample(rec, sym, seg, goal, Some(*seg.last().unwrap()), &reference)
    }
}

/// One-shot high-model predictions from ground truth noised to `t_mid`.
pub fn build_reference_bank(
    high: &DenoiserModel,
    data: &[Prepared],
    cascade: &CascadeConfig,
    augment: &AugmentConfig,
    seed: u64,
) -> Result<Vec<Vec<Vec<Vec2>>>> {
    if !augment.enabled || augment.bank_variants == 0 || augment.p_gt >= 1.0 {
        return Ok(vec![Vec::new(); data.len()]);
    }
    let sched = high.config.noise_schedule()?;
    let t_mid = ((augment.t_mid_fraction * sched.steps as f64).round() as usize).clamp(1, sched.steps);
    let n = cascade.high_states();
    let mut jobs = Vec::new();
    for (r, rec) in data.iter().enumerate() {
        for v in 0..augment.bank_variants {
            jobs.push((r, v, rec));
        }
    }
    let mut bank = vec![Vec::with_capacity(augment.bank_variants); data.len()];
    for chunk in jobs.chunks(64) {
        let mut x_t = Vec::with_capacity(chunk.len() * 2 * n);
        let mut conds = Vec::with_capacity(chunk.len());
        for &(r, v, rec) in chunk {
            let seq = &subsample_hierarchy(&rec.trajectory, cascade)?[0].states;
            let x0 = states_to_model(seq);
            let mut rng = seed::rng(seed::derive_labeled(seed, "bank", (r * augment.bank_variants + v) as u64));
            let eps: Vec<f64> = (0..x0.len()).map(|_| rng.sample(StandardNormal)).collect();
            let mut xt = forward_sample(&x0, t_mid, &eps, &sched)?;
            for i in [0, n - 1] {
                xt[2 * i] = x0[2 * i];
                xt[2 * i + 1] = x0[2 * i + 1];
            }
            x_t.extend(xt);
            let (s, g) = (seq[0], *seq.last().unwrap());
            conds.push(Conditioning::new(&rec.grid.with_markers(s, g), s, g, None, vec![0.0; 2 * n]));
        }
        let pred = high.denoise(&x_t, t_mid, &conds)?;
        for (k, &(r, _, rec)) in chunk.iter().enumerate() {
            let row: Vec<f64> = pred[k * 2 * n..(k + 1) * 2 * n].iter().map(|v| v.clamp(-1.0, 1.0)).collect();
            let mut states = states_to_world(&row);
            states[0] = rec.trajectory[0];
            states[n - 1] = *rec.trajectory.last().unwrap();
            bank[r].push(states);
        }
    }
    Ok(bank)
}

/// One logged optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub mse: f64,
    pub collision: f64,
}

/// Runs optimizer steps until `state.step == until`, drawing each batch
/// from the step's own random stream.
pub fn train(state: &mut TrainState, source: &dyn BatchSource, until: usize, log: &mut dyn FnMut(&TrainRecord, &TrainState)) -> Result<()> {
    let sched = state.model.config.noise_schedule()?;
    while state.step < until {
        let mut rng = state.step_rng(0);
        let batch: Vec<TrainSample> = (0..state.optim.batch_size).map(|_| source.draw(&mut rng)).collect();
        let lr = state.lr();
        let LossParts { total, mse, collision } = state.train_step(&sched, &batch)?;
        let rec = TrainRecord {
            step: state.step,
            lr,
            loss: total,
            mse,
            collision,
        };
        log(&rec, state);
    }
    Ok(())
}

pub fn train_high(
    records: &[DatasetRecord],
    cascade: &CascadeConfig,
    settings: &TrainSettings,
    seed: u64,
    log: &mut dyn FnMut(&TrainRecord, &TrainState),
) -> Result<TrainState> {
    let state = settings.new_state(cascade, Level::High, seed)?;
    resume_high(records, cascade, settings, state, log)
}

/// Continues a high-level run from `state` up to `settings.steps`.
pub fn resume_high(
    records: &[DatasetRecord],
    cascade: &CascadeConfig,
    settings: &TrainSettings,
    mut state: TrainState,
    log: &mut dyn FnMut(&TrainRecord, &TrainState),
) -> Result<TrainState> {
    cascade.validate()?;
    check_level(&state, Level::High)?;
    let data = prepare(records, cascade)?;
    let source = HighSource {
        data: &data,
        cascade,
        symmetry: settings.symmetry_augment,
    };
    train(&mut state, &source, settings.steps, log)?;
    Ok(state)
}

fn check_level(state: &TrainState, level: Level) -> Result<()> {
    if state.model.config.level != level {
        return Err(Error::Precondition(format!("expected a {level} model, got {}", state.model.config.level)));
    }
    Ok(())
}

pub fn train_low(
    records: &[DatasetRecord],
    high: &DenoiserModel,
    cascade: &CascadeConfig,
    settings: &TrainSettings,
    augment: &AugmentConfig,
    seed: u64,
    log: &mut dyn FnMut(&TrainRecord, &TrainState),
) -> Result<TrainState> {
    let state = settings.new_state(cascade, Level::Low, seed)?;
    resume_low(records, high, cascade, settings, augment, seed, state, log)
}

/// Continues a low-level run; the reference bank is rebuilt from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn resume_low(
    records: &[DatasetRecord],
    high: &DenoiserModel,
    cascade: &CascadeConfig,
    settings: &TrainSettings,
    augment: &AugmentConfig,
    seed: u64,
    mut state: TrainState,
    log: &mut dyn FnMut(&TrainRecord, &TrainState),
) -> Result<TrainState> {
    cascade.validate()?;
    check_level(&state, Level::Low)?;
    let data = prepare(records, cascade)?;
    let bank = build_reference_bank(high, &data, cascade, augment, seed)?;
    let source = LowSource {
        data: &data,
        cascade,
        bank: &bank,
        augment,
        symmetry: settings.symmetry_augment,
    };
    train(&mut state, &source, settings.steps, log)?;
    Ok(state)
}

pub fn train_flat(
    records: &[DatasetRecord],
    cascade: &CascadeConfig,
    settings: &TrainSettings,
    seed: u64,
    log: &mut dyn FnMut(&TrainRecord, &TrainState),
) -> Result<TrainState> {
    let state = settings.new_state(cascade, Level::Flat, seed)?;
    resume_flat(records, cascade, settings, state, log)
}

pub fn resume_flat(
    records: &[DatasetRecord],
    cascade: &CascadeConfig,
    settings: &TrainSettings,
    mut state: TrainState,
    log: &mut dyn FnMut(&TrainRecord, &TrainState),
) -> Result<TrainState> {
    cascade.validate()?;
    check_level(&state, Level::Flat)?;
    let data = prepare(records, cascade)?;
    let source = FlatSource {
        data: &data,
        symmetry: settings.symmetry_augment,
    };
    train(&mut state, &source, settings.steps, log)?;
    Ok(state)
}

/// Collision-gradient steering of the high-level (or flat) sampler.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GuidanceSettings {
    pub strength: f64,
    pub grad_noise: f64,
}

impl GuidanceSettings {
    pub fn bind<'w>(&self, ws: &'w Workspace) -> Option<Guidance<'w>> {
        (self.strength > 0.0).then_some(Guidance {
            workspace: ws,
            strength: self.strength,
            grad_noise: self.grad_noise,
            margin: ws.robot_radius,
        })
    }
}

/// A sampled full-horizon trajectory and how long it took.
#[derive(Clone, Debug, PartialEq)]
pub struct Plan {
    pub states: Vec<Vec2>,
    /// High-level sample (empty for the flat planner).
    pub high: Vec<Vec2>,
    pub wall_time_s: f64,
}

/// A trained high/low model pair.
#[derive(Clone, Debug)]
pub struct Cascade {
    pub config: CascadeConfig,
    pub high: DenoiserModel,
    pub low: DenoiserModel,
}

/// A low-level window to sample: fixed endpoints and reference states.
#[derive(Clone, Debug)]
pub struct SegmentRequest {
    pub start: Vec2,
    pub end: Vec2,
    pub reference: Vec<Vec2>,
    pub seed: u64,
}

impl Cascade {
    pub fn new(config: CascadeConfig, high: DenoiserModel, low: DenoiserModel) -> Result<Self> {
        config.validate()?;
        if high.config.level != Level::High || high.config.states != config.high_states() {
            return Err(Error::Precondition("high model does not match the hierarchy".into()));
        }
        if low.config.level != Level::Low || low.config.states != config.segment_states() {
            return Err(Error::Precondition("low model does not match the hierarchy".into()));
        }
        Ok(Cascade { config, high, low })
    }

    /// Samples the high level with the given states inpainted.
    pub fn sample_high(&self, ws: &Workspace, grid: &OccupancyGrid, fixed: Vec<(usize, Vec2)>, seed: u64, guidance: &GuidanceSettings) -> Result<Vec<Vec2>> {
        let n = self.config.high_states();
        let cond = Conditioning::new(&grid.with_markers(ws.start, ws.goal), ws.start, ws.goal, None, vec![0.0; 2 * n]);
        let sched = self.high.config.noise_schedule()?;
        let bound = self.high.bind(&[cond])?;
        let g = guidance.bind(ws);
        let spec = SampleSpec { fixed, seed };
        Ok(sample(&bound, &sched, n, &[spec], g.as_ref()).remove(0))
    }

    /// Samples independent low-level windows in one batch.
    pub fn sample_segments(&self, ws: &Workspace, grid: &OccupancyGrid, requests: &[SegmentRequest], guidance: &GuidanceSettings) -> Result<Vec<Vec<Vec2>>> {
        if requests.is_empty() {
            return Ok(Vec::new());
        }
        let n = self.config.segment_states();
        let conds: Vec<Conditioning> = requests
            .iter()
            .map(|r| {
                let grid = grid.with_markers(r.start, r.end);
                Conditioning::new(&grid, r.start, ws.goal, Some(r.end), states_to_model(&r.reference))
            })
            .collect();
        let specs: Vec<SampleSpec> = requests
            .iter()
            .map(|r| SampleSpec {
                fixed: vec![(0, r.start), (n - 1, r.end)],
                seed: r.seed,
            })
            .collect();
        let sched = self.low.config.noise_schedule()?;
        let bound = self.low.bind(&conds)?;
        let g = guidance.bind(ws);
        Ok(sample(&bound, &sched, n, &specs, g.as_ref()))
    }

    /// Low-level requests for segments `first..last` of a high-level sample.
    pub fn segment_requests(&self, high: &[Vec2], segments: std::ops::Range<usize>, seed: u64) -> Result<Vec<SegmentRequest>> {
        let per = self.config.subgoal_spacing / self.config.high_stride;
        segments
            .map(|k| {
                let anchors = &high[k * per..=(k + 1) * per];
                Ok(SegmentRequest {
                    start: anchors[0],
                    end: *anchors.last().unwrap(),
                    reference: make_reference(anchors, &self.config)?,
                    seed: seed::derive_labeled(seed, "low", k as u64),
                })
            })
            .collect()
    }

    /// Full cascaded plan: high-level sample, then every segment refined by
    /// the low level with its sub-goal and reference channels.
    pub fn plan(&self, ws: &Workspace, seed: u64, guidance: &GuidanceSettings) -> Result<Plan> {
        let started = Instant::now();
        let grid = OccupancyGrid::rasterize(ws, self.config.grid_resolution);
        let n = self.config.high_states();
        let high = self.sample_high(ws, &grid, vec![(0, ws.start), (n - 1, ws.goal)], seed::derive_labeled(seed, "high", 0), guidance)?;
        let requests = self.segment_requests(&high, 0..self.config.segments(), seed)?;
        // Guidance steers the high level only.
        let segments = self.sample_segments(ws, &grid, &requests, &GuidanceSettings::default())?;
        let states = stitch(&segments);
        Ok(Plan {
            states,
            high,
            wall_time_s: started.elapsed().as_secs_f64(),
        })
    }
}

/// Joins segments that share endpoints.
pub fn stitch(segments: &[Vec<Vec2>]) -> Vec<Vec2> {
    let mut out: Vec<Vec2> = Vec::new();
    for seg in segments {
        let skip = usize::from(!out.is_empty());
        out.extend_from_slice(&seg[skip..]);
    }
    out
}

/// Single diffusion pass over the full horizon.
pub fn plan_flat(flat: &DenoiserModel, ws: &Workspace, seed: u64, guidance: &GuidanceSettings) -> Result<Plan> {
    let started = Instant::now();
    let n = flat.config.states;
    let grid = OccupancyGrid::rasterize(ws, flat.config.grid_resolution);
    let cond = Conditioning::new(&grid, ws.start, ws.goal, None, vec![0.0; 2 * n]);
    let sched: NoiseSchedule = flat.config.noise_schedule()?;
    let bound = flat.bind(&[cond])?;
    let g = guidance.bind(ws);
    let spec = SampleSpec {
        fixed: vec![(0, ws.start), (n - 1, ws.goal)],
        seed: seed::derive_labeled(seed, "flat", 0),
    };
    let states = sample(&bound, &sched, n, &[spec], g.as_ref()).remove(0);
    Ok(Plan {
        states,
        high: Vec::new(),
        wall_time_s: started.elapsed().as_secs_f64(),
    })
}
