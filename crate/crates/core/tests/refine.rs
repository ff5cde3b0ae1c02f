use cdp_core::cascade::{Cascade, CascadeConfig, GuidanceSettings};
use cdp_core::nets::{DenoiserModel, Level};
use cdp_core::refine::{merge_segments, repair_windows, ExactDetector, RefineParams, RepairContext};
use cdp_core::workspace::{OccupancyGrid, Obstacle, Vec2, Workspace, VALIDATION_STEP};
use proptest::prelude::*;

fn cascade() -> Cascade {
    let cfg = CascadeConfig::default();
    let high = DenoiserModel::new(cfg.model_config(Level::High).with_seed(1)).unwrap();
    let low = DenoiserModel::new(cfg.model_config(Level::Low).with_seed(2)).unwrap();
    Cascade::new(cfg, high, low).unwrap()
}

/// A horizontal sweep whose middle crosses a box of the given width.
fn scene(x0: f64, width: f64) -> (Workspace, Vec<Vec2>) {
    let ws = Workspace {
        obstacles: vec![Obstacle::Rect { min: Vec2::new(x0, 0.3), max: Vec2::new(x0 + width, 0.45) }],
        ..Workspace::empty(Vec2::new(0.05, 0.4), Vec2::new(0.95, 0.4), 0.02)
    };
    let states = (0..=64).map(|i| ws.start.lerp(ws.goal, i as f64 / 64.0)).collect();
    (ws, states)
}

fn outside(windows: &[(usize, usize)], i: usize) -> bool {
    windows.iter().all(|&(s, g)| i <= s || i >= g)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn repair_only_touches_window_interiors(x0 in 0.1f64..0.8, width in 0.01f64..0.12, seed in any::<u64>(), passes in 0usize..3) {
        let c = cascade();
        let (ws, states) = scene(x0, width);
        let grid = OccupancyGrid::rasterize(&ws, c.config.grid_resolution);
        let params = RefineParams { max_passes: passes, ..RefineParams::default() };
        let ctx = RepairContext { cascade: &c, workspace: &ws, grid: &grid, detector: &ExactDetector(&ws), params: &params, guidance: GuidanceSettings::default() };
        let out = ctx.repair(&states, seed).unwrap();
        prop_assert_eq!(out.states.len(), states.len());
        prop_assert_eq!(out.states[0], states[0]);
        prop_assert_eq!(out.states[64], states[64]);
        prop_assert_eq!(out.report.pass_count, passes.min(out.report.pass_count));
        if passes == 0 {
            prop_assert_eq!(&out.states, &states);
            prop_assert_eq!(out.report.model_calls, 0);
        }
        for (i, (a, b)) in out.states.iter().zip(&states).enumerate() {
            if outside(&out.report.windows, i) {
                prop_assert_eq!(a, b, "state {} moved outside {:?}", i, out.report.windows);
            }
        }
        let before = ws.path_valid(&states, VALIDATION_STEP).violations();
        prop_assert_eq!(&out.report.segments_before, &merge_segments(&before, params.merge_gap));
        prop_assert_eq!(out.report.success_after, ws.path_valid(&out.states, VALIDATION_STEP).valid);
    }

    #[test]
    fn cascaded_repair_only_touches_its_window(x0 in 0.1f64..0.6, width in 0.02f64..0.25, seed in any::<u64>()) {
        let c = cascade();
        let (ws, states) = scene(x0, width);
        let grid = OccupancyGrid::rasterize(&ws, c.config.grid_resolution);
        let params = RefineParams { cascade_threshold: 2, ..RefineParams::default() };
        let ctx = RepairContext { cascade: &c, workspace: &ws, grid: &grid, detector: &ExactDetector(&ws), params: &params, guidance: GuidanceSettings::default() };
        let out = ctx.cascaded_repair(&states, seed).unwrap();
        prop_assert_eq!(out.states[0], states[0]);
        prop_assert_eq!(out.states[64], states[64]);
        for (i, (a, b)) in out.states.iter().zip(&states).enumerate() {
            if outside(&out.report.windows, i) {
                prop_assert_eq!(a, b);
            }
        }
        for &(s, g) in &out.report.windows {
            prop_assert_eq!((g - s) % 8, 0);
        }
    }

    #[test]
    fn windows_cover_patches_in_whole_blocks(idx in prop::collection::vec(0usize..65, 1..12)) {
        let p = RefineParams::default();
        let segs = merge_segments(&idx, p.merge_gap);
        let w = repair_windows(&segs, &p, 8, 64);
        for seg in &segs {
            prop_assert!(w.iter().any(|&(s, g)| s <= seg.start.saturating_sub(p.m_s) && (seg.end + p.m_g).min(64) <= g));
        }
        for &(s, g) in &w {
            prop_assert!(g <= 64 && (g - s) % 8 == 0 && g > s);
        }
        for pair in w.windows(2) {
            prop_assert!(pair[0].1 <= pair[1].0);
        }
    }
}

#[test]
fn valid_plans_are_left_alone() {
    let c = cascade();
    let ws = Workspace::empty(Vec2::new(0.1, 0.1), Vec2::new(0.9, 0.9), 0.02);
    let states: Vec<Vec2> = (0..=64).map(|i| ws.start.lerp(ws.goal, i as f64 / 64.0)).collect();
    let grid = OccupancyGrid::rasterize(&ws, c.config.grid_resolution);
    let params = RefineParams::default();
    let ctx = RepairContext { cascade: &c, workspace: &ws, grid: &grid, detector: &ExactDetector(&ws), params: &params, guidance: GuidanceSettings::default() };
    for out in [ctx.repair(&states, 1).unwrap(), ctx.cascaded_repair(&states, 1).unwrap()] {
        assert_eq!(out.states, states);
        assert_eq!(out.report.model_calls, 0);
        assert!(out.report.success_before && out.report.success_after);
    }
}

#[test]
fn wrong_length_is_rejected() {
    let c = cascade();
    let (ws, states) = scene(0.4, 0.05);
    let grid = OccupancyGrid::rasterize(&ws, c.config.grid_resolution);
    let params = RefineParams::default();
    let ctx = RepairContext { cascade: &c, workspace: &ws, grid: &grid, detector: &ExactDetector(&ws), params: &params, guidance: GuidanceSettings::default() };
    assert!(ctx.repair(&states[..40], 0).is_err());
}
