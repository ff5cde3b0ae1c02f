use cdp_core::diffusion::{collision_loss, states_to_model, NoiseSchedule, ScheduleKind};
use cdp_core::nets::gradcheck::{gradient_check, DenoiserObjective, Objective};
use cdp_core::nets::model::{Conditioning, DenoiserConfig, DenoiserModel};
use cdp_core::nets::train::{Draw, OptimConfig, TrainSample};
use cdp_core::nets::Level;
use cdp_core::workspace::{generate_workspace, GenerationParams, OccupancyGrid, Vec2, Workspace};
use rand::Rng;
use rand_distr::StandardNormal;

const TOL: f64 = 1e-4;

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn central(f: &dyn Fn(Vec2) -> f64, q: Vec2, h: f64) -> Vec2 {
    Vec2::new(
        (f(Vec2::new(q.x + h, q.y)) - f(Vec2::new(q.x - h, q.y))) / (2.0 * h),
        (f(Vec2::new(q.x, q.y + h)) - f(Vec2::new(q.x, q.y - h))) / (2.0 * h),
    )
}

/// Points whose difference quotients disagree across step sizes sit on a
/// crease of the distance field and carry no classical gradient.
fn smooth_at(f: &dyn Fn(Vec2) -> f64, q: Vec2) -> bool {
    let (a, b) = (central(f, q, 1e-6), central(f, q, 1e-5));
    (a.x - b.x).abs() < 1e-7 && (a.y - b.y).abs() < 1e-7
}

fn scenes() -> Vec<Workspace> {
    (0..10).map(|k| generate_workspace(40 + k, &GenerationParams::default()).unwrap()).collect()
}

#[test]
fn signed_distance_gradient_matches_finite_differences() {
    let mut rng = cdp_core::seed::rng(1);
    let (mut checked, mut worst) = (0, 0.0f64);
    for ws in scenes() {
        let f = |q: Vec2| ws.signed_distance(q);
        for _ in 0..100 {
            let q = Vec2::new(rng.random(), rng.random());
            if !smooth_at(&f, q) {
                continue;
            }
            let (_, g) = ws.signed_distance_gradient(q);
            let n = central(&f, q, 1e-6);
            worst = worst.max(rel(g.x, n.x)).max(rel(g.y, n.y));
            checked += 1;
        }
    }
    assert!(checked >= 900, "only {checked} smooth points");
    assert!(worst <= TOL, "max relative error {worst:e}");
}

#[test]
fn collision_loss_gradient_matches_finite_differences() {
    let mut rng = cdp_core::seed::rng(2);
    let (mut active, mut worst) = (0, 0.0f64);
    for ws in scenes() {
        let states: Vec<Vec2> = (0..16).map(|_| Vec2::new(rng.random(), rng.random())).collect();
        let margin = 0.05;
        let (_, grad) = collision_loss(&states, &ws, margin);
        for i in 0..states.len() {
            let f = |q: Vec2| {
                let mut s = states.clone();
                s[i] = q;
                collision_loss(&s, &ws, margin).0
            };
            if !smooth_at(&f, states[i]) {
                continue;
            }
            let n = central(&f, states[i], 1e-6);
            worst = worst.max(rel(grad[i].x, n.x)).max(rel(grad[i].y, n.y));
            active += (grad[i].norm() > 0.0) as usize;
        }
    }
    assert!(active > 10, "only {active} states inside the margin");
    assert!(worst <= TOL, "max relative error {worst:e}");
}

fn small_config() -> DenoiserConfig {
    DenoiserConfig {
        level: Level::Low,
        states: 9,
        channels: vec![8, 16],
        grid_resolution: 8,
        obs_channels: vec![4, 8],
        obs_dim: 8,
        cfg_dim: 8,
        time_dim: 8,
        time_freqs: 4,
        groups: 4,
        kernel: 3,
        schedule: ScheduleKind::Cosine,
        diffusion_steps: 10,
        init_seed: 3,
    }
}

#[test]
fn full_denoiser_gradient_matches_finite_differences() {
    let cfg = small_config();
    let mut model = DenoiserModel::new(cfg.clone()).unwrap();
    // Break the zero-initialised output layer so every parameter matters.
    let mut rng = cdp_core::seed::rng(4);
    for p in model.params.iter_mut() {
        *p += 0.1 * rng.sample::<f64, _>(StandardNormal);
    }
    let sched = NoiseSchedule::new(cfg.schedule, cfg.diffusion_steps).unwrap();
    let optim = OptimConfig { collision_fraction: 1.0, ..OptimConfig::for_level(Level::Low, 10) };
    let ws = generate_workspace(77, &GenerationParams::default()).unwrap();
    let grid = OccupancyGrid::rasterize(&ws, cfg.grid_resolution).with_markers(ws.start, ws.goal);
    let batch: Vec<TrainSample> = (0..3)
        .map(|k| {
            let states: Vec<Vec2> = (0..cfg.states).map(|i| ws.start.lerp(ws.goal, i as f64 / 8.0) + Vec2::new(0.01 * k as f64, 0.0)).collect();
            let x0 = states_to_model(&states);
            let reference = x0.iter().map(|v| v * 0.9).collect();
            TrainSample {
                cond: Conditioning::new(&grid, ws.start, ws.goal, Some(ws.goal), reference),
                x0,
                fixed: vec![0, cfg.states - 1],
                workspace: Some(ws.clone()),
            }
        })
        .collect();
    let draws: Vec<Draw> = (0..3).map(|_| Draw::random(&mut rng, cfg.diffusion_steps, cfg.states * 2)).collect();
    let obj = DenoiserObjective { model: &model, sched: &sched, optim: &optim, batch: &batch, draws: &draws };
    let g = obj.gradient(&model.params);
    assert!(g.iter().any(|v| v.abs() > 1e-8));
    let check = gradient_check(&obj, &model.params, 300, 1e-5, 8);
    assert_eq!(check.checked, 300.min(model.params.len()));
    assert!(check.max_rel_error <= TOL, "max relative error {:e} at {}", check.max_rel_error, check.worst_index);
}
