//! Plan repair: find violating states, merge them into segments, widen each
//! segment to patch endpoints and re-sample those windows.

pub mod classifier;

use serde::{Deserialize, Serialize};

use crate::cascade::{Cascade, GuidanceSettings, SegmentRequest};
use crate::error::{Error, Result};
use crate::seed;
use crate::workspace::{OccupancyGrid, Vec2, Workspace, VALIDATION_STEP};

/// Inclusive run of state indices on a full-horizon trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CollisionSegment {
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineParams {
    /// States added before a segment.
    pub m_s: usize,
    /// States added after a segment.
    pub m_g: usize,
    /// Runs separated by fewer valid states than this are merged.
    pub merge_gap: usize,
    pub max_passes: usize,
    /// Cascaded repair re-runs the high level above this many violations.
    pub cascade_threshold: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams {
            m_s: 2,
            m_g: 2,
            merge_gap: 3,
            max_passes: 1,
            cascade_threshold: 8,
        }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if self.merge_gap == 0 {
            return Err(Error::Precondition("merge_gap must be at least 1".into()));
        }
        Ok(())
    }
}

/// Flags states whose position or outgoing edge is in collision.
pub trait ViolationDetector {
    fn violations(&self, states: &[Vec2]) -> Vec<usize>;
}

/// Ground-truth geometry.
pub struct ExactDetector<'a>(pub &'a Workspace);

impl ViolationDetector for ExactDetector<'_> {
    fn violations(&self, states: &[Vec2]) -> Vec<usize> {
        find_violations(states, self.0)
    }
}

/// Indices flagged by dense-waypoint validation.
pub fn find_violations(states: &[Vec2], ws: &Workspace) -> Vec<usize> {
    ws.path_valid(states, VALIDATION_STEP).violations()
}

/// Groups indices into maximal consecutive runs, then joins runs separated
/// by fewer than `merge_gap` valid states. Input order and duplicates do
/// not matter.
pub fn merge_segments(indices: &[usize], merge_gap: usize) -> Vec<CollisionSegment> {
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    let mut out: Vec<CollisionSegment> = Vec::new();
    for i in idx {
        match out.last_mut() {
            Some(seg) if i - seg.end - 1 < merge_gap => seg.end = i,
            _ => out.push(CollisionSegment { start: i, end: i }),
        }
    }
    out
}

/// `(max(0, start - m_s), min(horizon, end + m_g))`.
pub fn patch_endpoints(seg: CollisionSegment, params: &RefineParams, horizon: usize) -> (usize, usize) {
    (seg.start.saturating_sub(params.m_s), (seg.end + params.m_g).min(horizon))
}

/// Widens `[start, end]` to a whole number of `spacing`-step blocks inside
/// `[0, horizon]`, growing about equally on both sides.
fn pad_window(start: usize, end: usize, spacing: usize, horizon: usize) -> (usize, usize) {
    let len = end - start;
    let span = (len.div_ceil(spacing).max(1) * spacing).min(horizon);
    let mut s = start.saturating_sub((span - len) / 2);
    if s + span > horizon {
        s = horizon - span;
    }
    (s, s + span)
}

/// Repair windows for a set of segments: patch endpoints, padded to
/// multiples of the low-level horizon, with overlapping windows fused.
pub fn repair_windows(segments: &[CollisionSegment], params: &RefineParams, spacing: usize, horizon: usize) -> Vec<(usize, usize)> {
    let mut windows: Vec<(usize, usize)> = segments
        .iter()
        .map(|&seg| {
            let (s, g) = patch_endpoints(seg, params, horizon);
            pad_window(s, g, spacing, horizon)
        })
        .collect();
    loop {
        let mut fused: Vec<(usize, usize)> = Vec::new();
        let mut changed = false;
        for &(s, g) in &windows {
            match fused.last_mut() {
                // Windows may share a boundary state; interior overlap fuses.
                Some(last) if s < last.1 => {
                    *last = pad_window(last.0, g.max(last.1), spacing, horizon);
                    changed = true;
                }
                _ => fused.push((s, g)),
            }
        }
        windows = fused;
        if !changed {
            return windows;
        }
    }
}

/// Summary of one repair call.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RepairReport {
    pub segments_before: Vec<CollisionSegment>,
    pub segments_after: Vec<CollisionSegment>,
    /// Windows actually re-sampled, inclusive state ranges.
    pub windows: Vec<(usize, usize)>,
    /// Low-level windows plus high-level chains sampled.
    pub model_calls: usize,
    pub high_calls: usize,
    pub pass_count: usize,
    pub success_before: bool,
    pub success_after: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Repaired {
    pub states: Vec<Vec2>,
    pub report: RepairReport,
}

/// Shared inputs of the repair routines.
pub struct RepairContext<'a> {
    pub cascade: &'a Cascade,
    pub workspace: &'a Workspace,
    pub grid: &'a OccupancyGrid,
    pub detector: &'a dyn ViolationDetector,
    pub params: &'a RefineParams,
    /// Applies to the high-level re-run of cascaded repair only.
    pub guidance: GuidanceSettings,
}

impl RepairContext<'_> {
    fn horizon(&self) -> usize {
        self.cascade.config.horizon
    }

    fn exact_valid(&self, states: &[Vec2]) -> bool {
        self.workspace.path_valid(states, VALIDATION_STEP).valid
    }

    fn check(&self, states: &[Vec2]) -> Result<()> {
        if states.len() != self.horizon() + 1 {
            return Err(Error::shape(format!("{} states", self.horizon() + 1), states.len()));
        }
        self.params.validate()
    }

    /// Re-samples the violating windows with the low model, left to right,
    /// for at most `max_passes` passes.
    pub fn repair(&self, states: &[Vec2], seed: u64) -> Result<Repaired> {
        self.check(states)?;
        let spacing = self.cascade.config.subgoal_spacing;
        let mut out = states.to_vec();
        let mut report = RepairReport {
            segments_before: merge_segments(&self.detector.violations(states), self.params.merge_gap),
            success_before: self.exact_valid(states),
            ..RepairReport::default()
        };
        let mut segments = report.segments_before.clone();
        for pass in 0..self.params.max_passes {
            if segments.is_empty() {
                break;
            }
            let windows = repair_windows(&segments, self.params, spacing, self.horizon());
            let mut requests = Vec::new();
            for &(s, g) in &windows {
                for a in (s..g).step_by(spacing) {
                    let b = a + spacing;
                    requests.push((
                        a,
                        SegmentRequest {
                            start: out[a],
                            end: out[b],
                            reference: out[a..=b].to_vec(),
                            seed: seed::derive_labeled(seed, "repair", (pass * (self.horizon() + 1) + a) as u64),
                        },
                    ));
                }
            }
            let reqs: Vec<SegmentRequest> = requests.iter().map(|(_, r)| r.clone()).collect();
            let samples = self.cascade.sample_segments(self.workspace, self.grid, &reqs, &GuidanceSettings::default())?;
            for ((a, _), seg) in requests.iter().zip(samples) {
                out[*a..=*a + spacing].copy_from_slice(&seg);
            }
            report.model_calls += reqs.len();
            report.windows.extend(windows);
            report.pass_count = pass + 1;
            segments = merge_segments(&self.detector.violations(&out), self.params.merge_gap);
        }
        report.segments_after = merge_segments(&self.detector.violations(&out), self.params.merge_gap);
        report.success_after = self.exact_valid(&out);
        Ok(Repaired { states: out, report })
    }

    /// Re-runs the whole cascade between the outermost patch endpoints when
    /// more than `cascade_threshold` states violate; otherwise [`Self::repair`].
    pub fn cascaded_repair(&self, states: &[Vec2], seed: u64) -> Result<Repaired> {
        self.check(states)?;
        let violations = self.detector.violations(states);
        if violations.len() <= self.params.cascade_threshold {
            return self.repair(states, seed);
        }
        let cfg = &self.cascade.config;
        let (spacing, stride, horizon) = (cfg.subgoal_spacing, cfg.high_stride, cfg.horizon);
        let segments = merge_segments(&violations, self.params.merge_gap);
        let (lo, hi) = segments.iter().fold((horizon, 0), |(lo, hi), &seg| {
            let (s, g) = patch_endpoints(seg, self.params, horizon);
            (lo.min(s), hi.max(g))
        });
        let lo = lo / spacing * spacing;
        let hi = (hi.div_ceil(spacing) * spacing).min(horizon);
        let fixed: Vec<(usize, Vec2)> = (0..cfg.high_states())
            .filter(|&i| i * stride <= lo || i * stride >= hi)
            .map(|i| (i, states[i * stride]))
            .collect();
        let high = self.cascade.sample_high(self.workspace, self.grid, fixed, seed::derive_labeled(seed, "repair-high", 0), &self.guidance)?;
        let requests = self.cascade.segment_requests(&high, lo / spacing..hi / spacing, seed::derive_labeled(seed, "repair-low", 0))?;
        let samples = self.cascade.sample_segments(self.workspace, self.grid, &requests, &GuidanceSettings::default())?;
        let mut out = states.to_vec();
        for (k, seg) in (lo / spacing..hi / spacing).zip(samples) {
            out[k * spacing..=(k + 1) * spacing].copy_from_slice(&seg);
        }
        let report = RepairReport {
            segments_before: segments,
            segments_after: merge_segments(&self.detector.violations(&out), self.params.merge_gap),
            windows: vec![(lo, hi)],
            model_calls: 1 + requests.len(),
            high_calls: 1,
            pass_count: 1,
            success_before: self.exact_valid(states),
            success_after: self.exact_valid(&out),
        };
        Ok(Repaired { states: out, report })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(start: usize, end: usize) -> CollisionSegment {
        CollisionSegment { start, end }
    }

    #[test]
    fn merge_examples() {
        assert_eq!(merge_segments(&[5, 6, 9, 10], 3), vec![seg(5, 10)]);
        assert_eq!(merge_segments(&[5, 6, 10, 11], 3), vec![seg(5, 6), seg(10, 11)]);
        assert_eq!(merge_segments(&[10, 5, 6, 9, 9], 3), vec![seg(5, 10)]);
        assert!(merge_segments(&[], 3).is_empty());
    }

    #[test]
    fn patch_examples() {
        let p = RefineParams::default();
        assert_eq!(patch_endpoints(seg(5, 10), &p, 64), (3, 12));
        assert_eq!(patch_endpoints(seg(1, 10), &p, 64), (0, 12));
        assert_eq!(patch_endpoints(seg(60, 64), &p, 64), (58, 64));
    }

    #[test]
    fn windows_are_block_aligned_and_cover_patches() {
        let p = RefineParams::default();
        let w = repair_windows(&[seg(5, 10)], &p, 8, 64);
        assert_eq!(w.len(), 1);
        let (s, g) = w[0];
        assert!(s <= 3 && g >= 12 && (g - s) % 8 == 0);
        let w = repair_windows(&[seg(62, 63)], &p, 8, 64);
        assert_eq!(w, vec![(56, 64)]);
        let w = repair_windows(&[seg(0, 1)], &p, 8, 64);
        assert_eq!(w, vec![(0, 8)]);
        // Nearby segments whose padded windows overlap are fused.
        let w = repair_windows(&[seg(10, 10), seg(16, 16)], &p, 8, 64);
        assert_eq!(w.len(), 1);
        assert!(w[0].0 <= 8 && w[0].1 >= 18);
    }
}
