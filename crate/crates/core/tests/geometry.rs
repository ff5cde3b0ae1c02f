use cdp_core::refine::{merge_segments, patch_endpoints, CollisionSegment, RefineParams};
use cdp_core::workspace::{generate_workspace, GenerationParams, Obstacle, Vec2, Workspace, VALIDATION_STEP};
use proptest::prelude::*;
use rand::Rng;

/// Fills every gap shorter than `merge_gap` on a dense bitmap, then reads off runs.
fn brute_merge(indices: &[usize], merge_gap: usize) -> Vec<CollisionSegment> {
    let Some(&top) = indices.iter().max() else { return Vec::new() };
    let mut marked = vec![false; top + 1];
    for &i in indices {
        marked[i] = true;
    }
    let mut filled = marked.clone();
    for a in 0..=top {
        if !marked[a] {
            continue;
        }
        for b in a + 1..=top {
            if marked[b] {
                if b - a - 1 < merge_gap {
                    filled[a..=b].iter_mut().for_each(|v| *v = true);
                }
                break;
            }
        }
    }
    let mut out = Vec::new();
    let mut i = 0;
    while i <= top {
        if filled[i] {
            let s = i;
            while i < top && filled[i + 1] {
                i += 1;
            }
            out.push(CollisionSegment { start: s, end: i });
        }
        i += 1;
    }
    out
}

#[test]
fn merge_worked_cases() {
    let seg = |start, end| CollisionSegment { start, end };
    assert_eq!(merge_segments(&[5, 6, 9, 10], 3), vec![seg(5, 10)]);
    assert_eq!(merge_segments(&[5, 6, 10, 11], 3), vec![seg(5, 6), seg(10, 11)]);
    assert_eq!(merge_segments(&[], 3), vec![]);
    assert_eq!(merge_segments(&[0], 3), vec![seg(0, 0)]);

    let p = RefineParams::default();
    assert_eq!(patch_endpoints(seg(5, 10), &p, 64), (3, 12));
    assert_eq!(patch_endpoints(seg(0, 1), &p, 64), (0, 3));
    assert_eq!(patch_endpoints(seg(63, 64), &p, 64), (61, 64));
}

#[test]
fn merge_matches_brute_force_on_ten_thousand_sets() {
    let mut rng = cdp_core::seed::rng(11);
    for _ in 0..10_000 {
        let n = rng.random_range(0..20);
        let top = rng.random_range(1..80);
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..top)).collect();
        let gap = rng.random_range(1..6);
        assert_eq!(merge_segments(&idx, gap), brute_merge(&idx, gap), "{idx:?} gap {gap}");
    }
}

proptest! {
    #[test]
    fn merge_is_order_independent_and_idempotent(mut idx in prop::collection::vec(0usize..100, 0..30), gap in 1usize..6) {
        let a = merge_segments(&idx, gap);
        idx.reverse();
        prop_assert_eq!(&a, &merge_segments(&idx, gap));
        let covered: Vec<usize> = a.iter().flat_map(|s| s.start..=s.end).collect();
        prop_assert_eq!(&a, &merge_segments(&covered, gap));
        for w in a.windows(2) {
            prop_assert!(w[1].start - w[0].end - 1 >= gap);
        }
    }

    #[test]
    fn patches_stay_in_horizon(start in 0usize..65, len in 0usize..10, ms in 0usize..5, mg in 0usize..5) {
        let end = (start + len).min(64);
        let p = RefineParams { m_s: ms, m_g: mg, ..RefineParams::default() };
        let (a, b) = patch_endpoints(CollisionSegment { start, end }, &p, 64);
        prop_assert!(a <= start && end <= b && b <= 64);
    }
}

fn oracle_collides(ws: &Workspace, q: Vec2) -> bool {
    ws.obstacles.iter().any(|o| match *o {
        Obstacle::Circle { center, radius } => {
            let (dx, dy) = (q.x - center.x, q.y - center.y);
            (dx * dx + dy * dy).sqrt() <= radius + ws.robot_radius
        }
        Obstacle::Rect { min, max } => {
            let dx = (min.x - q.x).max(q.x - max.x).max(0.0);
            let dy = (min.y - q.y).max(q.y - max.y).max(0.0);
            let inside = dx == 0.0 && dy == 0.0;
            inside || (dx * dx + dy * dy).sqrt() <= ws.robot_radius
        }
    })
}

/// Point-checks every interpolated waypoint at the validation spacing.
fn oracle_per_state(ws: &Workspace, path: &[Vec2]) -> Vec<bool> {
    (0..path.len())
        .map(|i| {
            let a = path[i];
            match path.get(i + 1) {
                None => !oracle_collides(ws, a),
                Some(&b) => {
                    let d = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
                    let n = ((d / VALIDATION_STEP - 1e-12).ceil() as usize).max(1);
                    (0..n).all(|k| {
                        let s = k as f64 / n as f64;
                        !oracle_collides(ws, Vec2::new(a.x + (b.x - a.x) * s, a.y + (b.y - a.y) * s))
                    })
                }
            }
        })
        .collect()
}

#[test]
fn path_valid_matches_dense_oracle_on_random_paths() {
    let mut rng = cdp_core::seed::rng(5);
    let mut invalid = 0;
    for k in 0..100 {
        let ws = generate_workspace(1000 + k, &GenerationParams::default()).unwrap();
        let n = rng.random_range(2..20);
        let path: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random(), rng.random())).collect();
        let got = ws.path_valid(&path, VALIDATION_STEP);
        let want = oracle_per_state(&ws, &path);
        assert_eq!(got.per_state, want, "scene {k}");
        assert_eq!(got.valid, want.iter().all(|&v| v));
        invalid += !got.valid as usize;
    }
    // Both outcomes must be exercised.
    assert!(invalid > 10 && invalid < 100, "{invalid} invalid paths");
}

#[test]
fn straight_segment_tunnelling_is_caught() {
    let ws = Workspace {
        obstacles: vec![Obstacle::Rect { min: Vec2::new(0.45, 0.0), max: Vec2::new(0.55, 1.0) }],
        ..Workspace::empty(Vec2::new(0.1, 0.5), Vec2::new(0.9, 0.5), 0.02)
    };
    let v = ws.path_valid(&[ws.start, ws.goal], VALIDATION_STEP);
    assert_eq!(v.per_state, vec![false, true]);
}
