//! Conditional x0-prediction denoiser: occupancy-grid encoder, configuration
//! encoder, time embedding and a 1D temporal U-Net over the horizon axis.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::graph::{Conv1d, Conv2d, Graph, GroupNorm, Linear, NodeId, ParamBuilder, Tensor};
use crate::diffusion::{Denoiser, NoiseSchedule, ScheduleKind};
use crate::error::{Error, Result};
use crate::seed;
use crate::workspace::{OccupancyGrid, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    High,
    Low,
    Flat,
}

impl Level {
    pub fn as_str(self) -> &'static str {
        match self {
            Level::High => "high",
            Level::Low => "low",
            Level::Flat => "flat",
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "high" => Ok(Level::High),
            "low" => Ok(Level::Low),
            "flat" => Ok(Level::Flat),
            other => Err(Error::Unknown {
                what: "level",
                value: other.into(),
            }),
        }
    }
}

/// Width of the configuration input: current, goal and sub-goal (zeros when
/// the level has no sub-goal).
pub const CONFIG_INPUT: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub level: Level,
    /// Number of states in the denoised sequence.
    pub states: usize,
    /// U-Net channel width per resolution level.
    pub channels: Vec<usize>,
    pub grid_resolution: usize,
    pub obs_channels: Vec<usize>,
    pub obs_dim: usize,
    pub cfg_dim: usize,
    pub time_dim: usize,
    /// Sinusoid features before the time MLP.
    pub time_freqs: usize,
    pub groups: usize,
    pub kernel: usize,
    pub schedule: ScheduleKind,
    pub diffusion_steps: usize,
    pub init_seed: u64,
}

impl DenoiserConfig {
    fn preset(level: Level, states: usize, channels: Vec<usize>, diffusion_steps: usize) -> Self {
        DenoiserConfig {
            level,
            states,
            channels,
            grid_resolution: 32,
            obs_channels: vec![16, 32, 64],
            obs_dim: 128,
            cfg_dim: 64,
            time_dim: 64,
            time_freqs: 32,
            groups: 8,
            kernel: 3,
            schedule: ScheduleKind::Cosine,
            diffusion_steps,
            init_seed: 0,
        }
    }

    /// 33 states at stride 2 over a 64-step horizon.
    pub fn high() -> Self {
        Self::preset(Level::High, 33, vec![32, 64, 128], 100)
    }

    /// One 8-step segment.
    pub fn low() -> Self {
        Self::preset(Level::Low, 9, vec![32, 64], 64)
    }

    /// Full 65-state horizon in one pass.
    pub fn flat() -> Self {
        Self::preset(Level::Flat, 65, vec![32, 64, 128], 100)
    }

    pub fn for_level(level: Level) -> Self {
        match level {
            Level::High => Self::high(),
            Level::Low => Self::low(),
            Level::Flat => Self::flat(),
        }
    }

    pub fn with_seed(mut self, init_seed: u64) -> Self {
        self.init_seed = init_seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Precondition(m.to_string()));
        if self.states < 2 {
            return bad("denoiser needs at least two states");
        }
        if self.channels.is_empty() || self.obs_channels.is_empty() {
            return bad("empty channel list");
        }
        if self.channels.iter().any(|c| c % self.groups != 0) {
            return bad("channel widths must be multiples of the group count");
        }
        let down = 1usize << self.obs_channels.len();
        if self.grid_resolution % down != 0 {
            return bad("grid resolution must be divisible by the encoder downsampling");
        }
        if self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.time_freqs % 2 != 0 {
            return bad("time feature count must be even");
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.schedule, self.diffusion_steps)
    }

    pub fn cond_dim(&self) -> usize {
        self.obs_dim + self.cfg_dim + self.time_dim
    }

    fn obs_flat(&self) -> usize {
        let side = self.grid_resolution >> self.obs_channels.len();
        side * side * self.obs_channels.last().unwrap()
    }

    /// Sequence length at each U-Net level.
    pub fn level_lengths(&self) -> Vec<usize> {
        let mut lens = vec![self.states];
        for _ in 1..self.channels.len() {
            let l = *lens.last().unwrap();
            lens.push((l - 1) / 2 + 1);
        }
        lens
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv1d,
    gn1: GroupNorm,
    cond: Linear,
    conv2: Conv1d,
    gn2: GroupNorm,
    skip: Option<Conv1d>,
}

impl ResBlock {
    fn build(pb: &mut ParamBuilder, cfg: &DenoiserConfig, cin: usize, cout: usize) -> Self {
        ResBlock {
            conv1: pb.conv1d(cin, cout, cfg.kernel, 1),
            gn1: pb.group_norm(cout, cfg.groups),
            cond: pb.linear(cfg.cond_dim(), cout),
            conv2: pb.conv1d(cout, cout, cfg.kernel, 1),
            gn2: pb.group_norm(cout, cfg.groups),
            skip: (cin != cout).then(|| pb.conv1d(cin, cout, 1, 1)),
        }
    }
}

#[derive(Clone, Debug)]
struct UpStage {
    up_conv: Conv1d,
    blocks: [ResBlock; 2],
}

#[derive(Clone, Debug)]
struct Layers {
    obs_convs: Vec<Conv2d>,
    obs_out: Linear,
    cfg1: Linear,
    cfg2: Linear,
    time1: Linear,
    time2: Linear,
    input: Conv1d,
    down: Vec<[ResBlock; 2]>,
    downsample: Vec<Conv1d>,
    mid: ResBlock,
    up: Vec<UpStage>,
    out_norm: GroupNorm,
    output: Conv1d,
}

impl Layers {
    fn build(cfg: &DenoiserConfig, pb: &mut ParamBuilder) -> Self {
        let mut obs_convs = Vec::new();
        let mut cin = 3;
        for &c in &cfg.obs_channels {
            obs_convs.push(pb.conv2d(cin, c, 3, 2));
            cin = c;
        }
        let obs_out = pb.linear(cfg.obs_flat(), cfg.obs_dim);
        let cfg1 = pb.linear(CONFIG_INPUT, cfg.cfg_dim);
        let cfg2 = pb.linear(cfg.cfg_dim, cfg.cfg_dim);
        let time1 = pb.linear(cfg.time_freqs, cfg.time_dim);
        let time2 = pb.linear(cfg.time_dim, cfg.time_dim);

        let k = cfg.kernel;
        let res = |pb: &mut ParamBuilder, cin: usize, cout: usize| ResBlock::build(pb, cfg, cin, cout);

        let ch = &cfg.channels;
        let input = pb.conv1d(4, ch[0], k, 1);
        let mut down = Vec::new();
        let mut downsample = Vec::new();
        let mut prev = ch[0];
        for (i, &c) in ch.iter().enumerate() {
            down.push([res(pb, prev, c), res(pb, c, c)]);
            if i + 1 < ch.len() {
                downsample.push(pb.conv1d(c, c, k, 2));
            }
            prev = c;
        }
        let last = *ch.last().unwrap();
        let mid = res(pb, last, last);
        let mut up = Vec::new();
        for i in (0..ch.len() - 1).rev() {
            let up_conv = pb.conv1d(ch[i + 1], ch[i], k, 1);
            up.push(UpStage {
                up_conv,
                blocks: [res(pb, 2 * ch[i], ch[i]), res(pb, ch[i], ch[i])],
            });
        }
        let out_norm = pb.group_norm(ch[0], cfg.groups);
        let output = pb.conv1d_zero(ch[0], 2, 1);
        Layers {
            obs_convs,
            obs_out,
            cfg1,
            cfg2,
            time1,
            time2,
            input,
            down,
            downsample,
            mid,
            up,
            out_norm,
            output,
        }
    }
}

/// Per-trajectory conditioning for one denoiser call.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    /// Channels-last grid `[res, res, 3]`.
    pub grid: Vec<f64>,
    /// Current, goal and sub-goal configurations in model coordinates.
    pub config: [f64; CONFIG_INPUT],
    /// Reference channels in model coordinates, `states * 2` values.
    pub reference: Vec<f64>,
}

impl Conditioning {
    /// Builds conditioning from a grid and workspace-frame configurations.
    pub fn new(grid: &OccupancyGrid, current: Vec2, goal: Vec2, subgoal: Option<Vec2>, reference: Vec<f64>) -> Self {
        let m = |q: Vec2| [2.0 * q.x - 1.0, 2.0 * q.y - 1.0];
        let (c, g) = (m(current), m(goal));
        let s = subgoal.map(m).unwrap_or([0.0, 0.0]);
        Conditioning {
            grid: grid.channels(),
            config: [c[0], c[1], g[0], g[1], s[0], s[1]],
            reference,
        }
    }
}

/// Sinusoidal embedding of the diffusion step.
pub fn time_features(t: usize, freqs: usize) -> Vec<f64> {
    let half = freqs / 2;
    let mut out = Vec::with_capacity(freqs);
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * w).sin());
    }
    for k in 0..half {
        let w = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
        out.push((t as f64 * w).cos());
    }
    out
}

/// Encoder outputs reused across all reverse steps of one sampling call.
#[derive(Clone, Debug)]
pub struct CachedFeatures {
    pub obs: Tensor,
    pub cfg: Tensor,
}

#[derive(Clone, Debug)]
pub struct DenoiserModel {
    pub config: DenoiserConfig,
    pub params: Vec<f64>,
    layers: Layers,
}

/// Graph nodes of one forward pass.
pub struct Forward {
    pub obs: NodeId,
    pub cfg: NodeId,
    pub output: NodeId,
}

impl DenoiserModel {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.init_seed);
        let mut pb = ParamBuilder::new(&mut rng);
        let layers = Layers::build(&config, &mut pb);
        Ok(DenoiserModel {
            params: pb.values,
            config,
            layers,
        })
    }

    /// Rebuilds the layer layout and installs stored parameters.
    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        let mut model = Self::new(config)?;
        if params.len() != model.params.len() {
            return Err(Error::shape(format!("{} parameters", model.params.len()), params.len()));
        }
        model.params = params;
        Ok(model)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn level(&self) -> Level {
        self.config.level
    }

    fn res_block(&self, g: &mut Graph, x: NodeId, cond: NodeId, b: &ResBlock) -> NodeId {
        let h = g.conv1d(x, b.conv1);
        let h = g.group_norm(h, b.gn1);
        let c = g.linear(cond, b.cond);
        let h = g.channel_bias(h, c);
        let h = g.silu(h);
        let h = g.conv1d(h, b.conv2);
        let h = g.group_norm(h, b.gn2);
        let h = g.silu(h);
        let skip = match b.skip {
            Some(s) => g.conv1d(x, s),
            None => x,
        };
        g.add(h, skip)
    }

    /// `grids: [B, res, res, 3] -> [B, obs_dim]`.
    pub fn encode_observation_node(&self, g: &mut Graph, grids: NodeId) -> NodeId {
        let mut h = grids;
        for &c in &self.layers.obs_convs {
            h = g.conv2d(h, c);
            h = g.silu(h);
        }
        let b = g.value(h).shape[0];
        let h = g.reshape(h, vec![b, self.config.obs_flat()]);
        g.linear(h, self.layers.obs_out)
    }

    /// `configs: [B, 6] -> [B, cfg_dim]`.
    pub fn encode_config_node(&self, g: &mut Graph, configs: NodeId) -> NodeId {
        let h = g.linear(configs, self.layers.cfg1);
        let h = g.silu(h);
        g.linear(h, self.layers.cfg2)
    }

    /// Temporal U-Net given encoded conditioning.
    /// `x_t` and `reference` are `[B, states, 2]`.
    pub fn unet_node(&self, g: &mut Graph, x_t: NodeId, reference: NodeId, obs: NodeId, cfg: NodeId, t: &[usize]) -> NodeId {
        let b = t.len();
        let tf: Vec<f64> = t.iter().flat_map(|&t| time_features(t, self.config.time_freqs)).collect();
        let tf = g.input(Tensor::new(tf, vec![b, self.config.time_freqs]));
        let te = g.linear(tf, self.layers.time1);
        let te = g.silu(te);
        let te = g.linear(te, self.layers.time2);
        let cond = g.concat(&[obs, cfg, te]);
        let cond = g.silu(cond);

        let inp = g.concat(&[x_t, reference]);
        let mut h = g.conv1d(inp, self.layers.input);
        let mut skips = Vec::new();
        for (i, blocks) in self.layers.down.iter().enumerate() {
            h = self.res_block(g, h, cond, &blocks[0]);
            h = self.res_block(g, h, cond, &blocks[1]);
            skips.push(h);
            if let Some(&ds) = self.layers.downsample.get(i) {
                h = g.conv1d(h, ds);
            }
        }
        h = self.res_block(g, h, cond, &self.layers.mid);
        skips.pop();
        for stage in &self.layers.up {
            let skip = skips.pop().unwrap();
            let len = g.value(skip).shape[1];
            h = g.upsample(h, len);
            h = g.conv1d(h, stage.up_conv);
            h = g.concat(&[h, skip]);
            h = self.res_block(g, h, cond, &stage.blocks[0]);
            h = self.res_block(g, h, cond, &stage.blocks[1]);
        }
        let h = g.group_norm(h, self.layers.out_norm);
        let h = g.silu(h);
        g.conv1d(h, self.layers.output)
    }

    fn check_batch(&self, conds: &[Conditioning]) -> Result<()> {
        let res = self.config.grid_resolution;
        for c in conds {
            if c.grid.len() != res * res * 3 {
                return Err(Error::shape(format!("grid {res}x{res}x3"), c.grid.len()));
            }
            if c.reference.len() != self.config.states * 2 {
                return Err(Error::shape(format!("reference of {} states", self.config.states), c.reference.len() / 2));
            }
        }
        Ok(())
    }

    /// Full forward pass for a batch; records the graph for training.
    pub fn forward(&self, g: &mut Graph, x_t: &[f64], t: &[usize], conds: &[Conditioning]) -> Result<Forward> {
        self.check_batch(conds)?;
        let b = conds.len();
        let (s, res) = (self.config.states, self.config.grid_resolution);
        if x_t.len() != b * s * 2 || t.len() != b {
            return Err(Error::shape(format!("[{b}, {s}, 2]"), x_t.len()));
        }
        let grids = g.input(Tensor::new(conds.iter().flat_map(|c| c.grid.iter().copied()).collect(), vec![b, res, res, 3]));
        let configs = g.input(Tensor::new(conds.iter().flat_map(|c| c.config).collect(), vec![b, CONFIG_INPUT]));
        let refs = g.input(Tensor::new(conds.iter().flat_map(|c| c.reference.iter().copied()).collect(), vec![b, s, 2]));
        let x = g.input(Tensor::new(x_t.to_vec(), vec![b, s, 2]));
        let obs = self.encode_observation_node(g, grids);
        let cfg = self.encode_config_node(g, configs);
        let output = self.unet_node(g, x, refs, obs, cfg, t);
        Ok(Forward { obs, cfg, output })
    }

    /// Observation features for one grid.
    pub fn encode_observation(&self, grid: &OccupancyGrid) -> Result<Vec<f64>> {
        let res = self.config.grid_resolution;
        if grid.resolution != res {
            return Err(Error::shape(format!("grid resolution {res}"), grid.resolution));
        }
        let mut g = Graph::new(&self.params);
        let x = g.input(Tensor::new(grid.channels(), vec![1, res, res, 3]));
        let y = self.encode_observation_node(&mut g, x);
        Ok(g.value(y).data.clone())
    }

    /// Encoder outputs for a batch of conditioning records.
    pub fn encode(&self, conds: &[Conditioning]) -> Result<CachedFeatures> {
        self.check_batch(conds)?;
        let b = conds.len();
        let res = self.config.grid_resolution;
        let mut g = Graph::new(&self.params);
        let grids = g.input(Tensor::new(conds.iter().flat_map(|c| c.grid.iter().copied()).collect(), vec![b, res, res, 3]));
        let configs = g.input(Tensor::new(conds.iter().flat_map(|c| c.config).collect(), vec![b, CONFIG_INPUT]));
        let obs = self.encode_observation_node(&mut g, grids);
        let cfg = self.encode_config_node(&mut g, configs);
        Ok(CachedFeatures {
            obs: g.value(obs).clone(),
            cfg: g.value(cfg).clone(),
        })
    }

    /// x0 prediction from precomputed encoder features.
    pub fn denoise_cached(&self, x_t: &[f64], t: &[usize], features: &CachedFeatures, references: &[f64]) -> Vec<f64> {
        let b = t.len();
        let s = self.config.states;
        let mut g = Graph::new(&self.params);
        let x = g.input(Tensor::new(x_t.to_vec(), vec![b, s, 2]));
        let r = g.input(Tensor::new(references.to_vec(), vec![b, s, 2]));
        let obs = g.input(features.obs.clone());
        let cfg = g.input(features.cfg.clone());
        let y = self.unet_node(&mut g, x, r, obs, cfg, t);
        g.value(y).data.clone()
    }

    /// x0 prediction for a batch; `x_t` is `[B, states, 2]`.
    pub fn denoise(&self, x_t: &[f64], t: usize, conds: &[Conditioning]) -> Result<Vec<f64>> {
        if t == 0 {
            return Err(Error::Precondition("diffusion step must be at least 1".into()));
        }
        let mut g = Graph::new(&self.params);
        let ts = vec![t; conds.len()];
        let fwd = self.forward(&mut g, x_t, &ts, conds)?;
        Ok(g.value(fwd.output).data.clone())
    }

    /// Binds conditioning so the model can drive [`crate::diffusion::sample`].
    pub fn bind(&self, conds: &[Conditioning]) -> Result<BoundDenoiser<'_>> {
        let features = self.encode(conds)?;
        let references = conds.iter().flat_map(|c| c.reference.iter().copied()).collect();
        Ok(BoundDenoiser {
            model: self,
            features,
            references,
        })
    }
}

/// A model with fixed conditioning and cached encoder features.
pub struct BoundDenoiser<'m> {
    model: &'m DenoiserModel,
    features: CachedFeatures,
    references: Vec<f64>,
}

impl Denoiser for BoundDenoiser<'_> {
    fn denoise(&self, x_t: &[f64], t: usize, batch: usize) -> Vec<f64> {
        self.model.denoise_cached(x_t, &vec![t; batch], &self.features, &self.references)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workspace::{Obstacle, Workspace};

    fn scene() -> Workspace {
        Workspace {
            seed: 0,
            robot_radius: 0.02,
            obstacles: vec![Obstacle::Circle {
                center: Vec2::new(0.5, 0.5),
                radius: 0.15,
            }],
            start: Vec2::new(0.1, 0.1),
            goal: Vec2::new(0.9, 0.9),
        }
    }

    fn small_cond(model: &DenoiserModel, ws: &Workspace) -> Conditioning {
        let grid = OccupancyGrid::rasterize(ws, model.config.grid_resolution);
        Conditioning::new(&grid, ws.start, ws.goal, None, vec![0.0; model.config.states * 2])
    }

    #[test]
    fn presets_have_expected_level_lengths() {
        assert_eq!(DenoiserConfig::high().level_lengths(), vec![33, 17, 9]);
        assert_eq!(DenoiserConfig::low().level_lengths(), vec![9, 5]);
        assert_eq!(DenoiserConfig::flat().level_lengths(), vec![65, 33, 17]);
    }

    #[test]
    fn fresh_model_predicts_zero_with_input_shape() {
        for cfg in [DenoiserConfig::high(), DenoiserConfig::low()] {
            let model = DenoiserModel::new(cfg).unwrap();
            let ws = scene();
            let c = small_cond(&model, &ws);
            let s = model.config.states;
            let x: Vec<f64> = (0..2 * s * 2).map(|i| (i as f64 * 0.37).sin()).collect();
            let y = model.denoise(&x, 5, &[c.clone(), c]).unwrap();
            assert_eq!(y.len(), x.len());
            assert!(y.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn cached_and_direct_paths_agree() {
        let mut model = DenoiserModel::new(DenoiserConfig::low().with_seed(3)).unwrap();
        for (i, p) in model.params.iter_mut().enumerate() {
            *p += 1e-3 * (i as f64).cos();
        }
        let ws = scene();
        let c = small_cond(&model, &ws);
        let x: Vec<f64> = (0..18).map(|i| (i as f64).sin()).collect();
        let direct = model.denoise(&x, 7, std::slice::from_ref(&c)).unwrap();
        let bound = model.bind(&[c]).unwrap();
        let cached = Denoiser::denoise(&bound, &x, 7, 1);
        assert_eq!(direct, cached);
        assert!(direct.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn observation_features_distinguish_grids() {
        let model = DenoiserModel::new(DenoiserConfig::high()).unwrap();
        let ws = scene();
        let empty = Workspace::empty(ws.start, ws.goal, 0.02);
        let a = model.encode_observation(&OccupancyGrid::rasterize(&ws, 32)).unwrap();
        let b = model.encode_observation(&OccupancyGrid::rasterize(&empty, 32)).unwrap();
        let a2 = model.encode_observation(&OccupancyGrid::rasterize(&ws, 32)).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a, a2);
        assert_ne!(a, b);
        let shifted = Workspace {
            obstacles: vec![Obstacle::Circle {
                center: Vec2::new(0.5 + 1.0 / 32.0, 0.5),
                radius: 0.15,
            }],
            ..ws
        };
        assert_ne!(a, model.encode_observation(&OccupancyGrid::rasterize(&shifted, 32)).unwrap());
        assert!(model.encode_observation(&OccupancyGrid::rasterize(&empty, 16)).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let model = DenoiserModel::new(DenoiserConfig::low()).unwrap();
        let c = small_cond(&model, &scene());
        assert!(model.denoise(&[0.0; 10], 1, std::slice::from_ref(&c)).is_err());
        assert!(model.denoise(&[0.0; 18], 0, std::slice::from_ref(&c)).is_err());
        let bad = Conditioning {
            reference: vec![0.0; 4],
            ..c
        };
        assert!(model.denoise(&[0.0; 18], 1, &[bad]).is_err());
    }
}
