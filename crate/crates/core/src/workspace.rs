//! Planning scenes in the unit square: obstacles, collision predicates,
//! exact signed distances, dense-waypoint validation and occupancy
//! rasterization.
//!
//! The robot is a disc of radius `robot_radius`; configurations are its
//! center. All distances are Euclidean in workspace units.

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use rand::Rng;
use serde::de::{self, Deserializer, SeqAccess, Visitor};
use serde::ser::{SerializeTuple, Serializer};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expert::{self, RrtParams};
use crate::seed;

/// Waypoint spacing used for dense path validation (half the default robot radius).
pub const VALIDATION_STEP: f64 = 0.01;

/// A 2D configuration or vector. Serialized as `[x, y]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn lerp(self, o: Vec2, s: f64) -> Vec2 {
        Vec2::new(self.x + (o.x - self.x) * s, self.y + (o.y - self.y) * s)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn clamp_unit(self) -> Vec2 {
        Vec2::new(self.x.clamp(0.0, 1.0), self.y.clamp(0.0, 1.0))
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl AddAssign for Vec2 {
    fn add_assign(&mut self, o: Vec2) {
        self.x += o.x;
        self.y += o.y;
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, s: f64) -> Vec2 {
        Vec2::new(self.x * s, self.y * s)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl Serialize for Vec2 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut t = s.serialize_tuple(2)?;
        t.serialize_element(&self.x)?;
        t.serialize_element(&self.y)?;
        t.end()
    }
}

impl<'de> Deserialize<'de> for Vec2 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct PairVisitor;
        impl<'de> Visitor<'de> for PairVisitor {
            type Value = Vec2;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a [x, y] pair")
            }
            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> std::result::Result<Vec2, A::Error> {
                let x = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(0, &self))?;
                let y = seq.next_element()?.ok_or_else(|| de::Error::invalid_length(1, &self))?;
                if seq.next_element::<f64>()?.is_some() {
                    return Err(de::Error::invalid_length(3, &self));
                }
                Ok(Vec2::new(x, y))
            }
        }
        d.deserialize_tuple(2, PairVisitor)
    }
}

fn sign(v: f64) -> f64 {
    if v < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// A static obstacle: a disc or an axis-aligned box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Obstacle {
    Circle { center: Vec2, radius: f64 },
    Rect { min: Vec2, max: Vec2 },
}

impl Obstacle {
    /// Exact signed distance to the obstacle surface (negative inside).
    pub fn distance(&self, q: Vec2) -> f64 {
        self.distance_and_gradient(q).0
    }

    /// Signed distance and its spatial gradient. On the medial axis an
    /// arbitrary but deterministic subgradient is returned.
    pub fn distance_and_gradient(&self, q: Vec2) -> (f64, Vec2) {
        match *self {
            Obstacle::Circle { center, radius } => {
                let d = q - center;
                let n = d.norm();
                let g = if n > 0.0 { d * (1.0 / n) } else { Vec2::new(1.0, 0.0) };
                (n - radius, g)
            }
            Obstacle::Rect { min, max } => {
                let c = (min + max) * 0.5;
                let h = (max - min) * 0.5;
                let p = q - c;
                let dx = p.x.abs() - h.x;
                let dy = p.y.abs() - h.y;
                if dx > 0.0 || dy > 0.0 {
                    let ox = dx.max(0.0);
                    let oy = dy.max(0.0);
                    let n = ox.hypot(oy);
                    (n, Vec2::new(sign(p.x) * ox / n, sign(p.y) * oy / n))
                } else if dx > dy {
                    (dx, Vec2::new(sign(p.x), 0.0))
                } else {
                    (dy, Vec2::new(0.0, sign(p.y)))
                }
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let inside = |v: Vec2| (0.0..=1.0).contains(&v.x) && (0.0..=1.0).contains(&v.y);
        match *self {
            Obstacle::Circle { center, radius } => {
                if !(radius > 0.0) || !center.is_finite() {
                    return Err(Error::Precondition(format!("invalid circle radius {radius}")));
                }
                let lo = center - Vec2::new(radius, radius);
                let hi = center + Vec2::new(radius, radius);
                if !inside(lo) || !inside(hi) {
                    return Err(Error::Precondition("circle leaves the unit square".into()));
                }
            }
            Obstacle::Rect { min, max } => {
                if !(min.x < max.x && min.y < max.y) {
                    return Err(Error::Precondition("rectangle min must be below max".into()));
                }
                if !inside(min) || !inside(max) {
                    return Err(Error::Precondition("rectangle leaves the unit square".into()));
                }
            }
        }
        Ok(())
    }

    pub fn transformed(&self, sym: Symmetry) -> Obstacle {
        match *self {
            Obstacle::Circle { center, radius } => Obstacle::Circle {
                center: sym.apply(center),
                radius,
            },
            Obstacle::Rect { min, max } => {
                let a = sym.apply(min);
                let b = sym.apply(max);
                Obstacle::Rect {
                    min: Vec2::new(a.x.min(b.x), a.y.min(b.y)),
                    max: Vec2::new(a.x.max(b.x), a.y.max(b.y)),
                }
            }
        }
    }
}

/// A planning scene. Field order is the serialization order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Workspace {
    pub seed: u64,
    pub robot_radius: f64,
    pub obstacles: Vec<Obstacle>,
    pub start: Vec2,
    pub goal: Vec2,
}

/// Per-state and overall outcome of dense path validation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PathValidity {
    /// `per_state[i]` is false when state `i` or any densified waypoint
    /// between it and state `i + 1` collides.
    pub per_state: Vec<bool>,
    pub valid: bool,
}

impl PathValidity {
    pub fn violations(&self) -> Vec<usize> {
        self.per_state
            .iter()
            .enumerate()
            .filter_map(|(i, &ok)| (!ok).then_some(i))
            .collect()
    }
}

impl Workspace {
    pub fn empty(start: Vec2, goal: Vec2, robot_radius: f64) -> Self {
        Workspace {
            seed: 0,
            robot_radius,
            obstacles: Vec::new(),
            start,
            goal,
        }
    }

    /// Signed clearance of the robot disc at `q`: distance to the nearest
    /// obstacle surface minus the robot radius. `+inf` for an empty scene.
    pub fn signed_distance(&self, q: Vec2) -> f64 {
        self.obstacles
            .iter()
            .map(|o| o.distance(q))
            .fold(f64::INFINITY, f64::min)
            - self.robot_radius
    }

    /// Signed clearance and its gradient (taken from the nearest obstacle).
    pub fn signed_distance_gradient(&self, q: Vec2) -> (f64, Vec2) {
        let mut best = (f64::INFINITY, Vec2::ZERO);
        for o in &self.obstacles {
            let (d, g) = o.distance_and_gradient(q);
            if d < best.0 {
                best = (d, g);
            }
        }
        (best.0 - self.robot_radius, best.1)
    }

    /// Boundary contact (clearance exactly zero) counts as collision.
    pub fn point_in_collision(&self, q: Vec2) -> bool {
        self.signed_distance(q) <= 0.0
    }

    /// True when every densified waypoint of the segment `a -> b` is free.
    pub fn segment_free(&self, a: Vec2, b: Vec2, max_step: f64) -> bool {
        let n = subdivisions(a.distance(b), max_step);
        (0..=n).all(|k| !self.point_in_collision(a.lerp(b, k as f64 / n as f64)))
    }

    /// Dense-waypoint validation of a path.
    pub fn path_valid(&self, path: &[Vec2], max_step: f64) -> PathValidity {
        let mut per_state = Vec::with_capacity(path.len());
        for (i, &q) in path.iter().enumerate() {
            let ok = match path.get(i + 1) {
                Some(&next) => {
                    let n = subdivisions(q.distance(next), max_step);
                    (0..n).all(|k| !self.point_in_collision(q.lerp(next, k as f64 / n as f64)))
                }
                None => !self.point_in_collision(q),
            };
            per_state.push(ok);
        }
        let valid = per_state.iter().all(|&v| v);
        PathValidity { per_state, valid }
    }

    /// Copy of this scene with the robot radius grown by `margin`.
    pub fn inflated(&self, margin: f64) -> Workspace {
        Workspace {
            robot_radius: self.robot_radius + margin,
            ..self.clone()
        }
    }

    pub fn transformed(&self, sym: Symmetry) -> Workspace {
        Workspace {
            seed: self.seed,
            robot_radius: self.robot_radius,
            obstacles: self.obstacles.iter().map(|o| o.transformed(sym)).collect(),
            start: sym.apply(self.start),
            goal: sym.apply(self.goal),
        }
    }

    /// Checks the record invariants: valid obstacles, free and distinct endpoints.
    pub fn validate(&self) -> Result<()> {
        if !(self.robot_radius >= 0.0) {
            return Err(Error::Precondition("robot radius must be non-negative".into()));
        }
        for o in &self.obstacles {
            o.validate()?;
        }
        if self.start == self.goal {
            return Err(Error::Precondition("start equals goal".into()));
        }
        if self.point_in_collision(self.start) {
            return Err(Error::Precondition("start configuration in collision".into()));
        }
        if self.point_in_collision(self.goal) {
            return Err(Error::Precondition("goal configuration in collision".into()));
        }
        Ok(())
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("workspace serialization is infallible")
    }

    pub fn from_json_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// Number of equal sub-steps needed so that no step exceeds `max_step`.
pub fn subdivisions(dist: f64, max_step: f64) -> usize {
    ((dist / max_step - 1e-12).ceil() as usize).max(1)
}

/// Linearly interpolates a path so consecutive waypoints are at most
/// `max_step` apart. Every input state is kept, in order.
pub fn densify(path: &[Vec2], max_step: f64) -> Vec<Vec2> {
    let mut out = Vec::with_capacity(path.len());
    for w in path.windows(2) {
        let n = subdivisions(w[0].distance(w[1]), max_step);
        out.extend((0..n).map(|k| w[0].lerp(w[1], k as f64 / n as f64)));
    }
    out.extend(path.last().copied());
    out
}

/// Total Euclidean length of a polyline.
pub fn path_length(path: &[Vec2]) -> f64 {
    path.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// One of the eight symmetries of the unit square, used for data augmentation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Symmetry(pub u8);

impl Symmetry {
    pub const IDENTITY: Symmetry = Symmetry(0);

    pub fn all() -> impl Iterator<Item = Symmetry> {
        (0..8).map(Symmetry)
    }

    fn parts(self) -> (bool, bool, bool) {
        (self.0 & 1 != 0, self.0 & 2 != 0, self.0 & 4 != 0)
    }

    /// Maps a point of the unit square to its image.
    pub fn apply(self, q: Vec2) -> Vec2 {
        let (swap, fx, fy) = self.parts();
        let (mut x, mut y) = if swap { (q.y, q.x) } else { (q.x, q.y) };
        if fx {
            x = 1.0 - x;
        }
        if fy {
            y = 1.0 - y;
        }
        Vec2::new(x, y)
    }

    /// The same map in centered coordinates `[-1, 1]^2`.
    pub fn apply_centered(self, x: f64, y: f64) -> (f64, f64) {
        let (swap, fx, fy) = self.parts();
        let (mut a, mut b) = if swap { (y, x) } else { (x, y) };
        if fx {
            a = -a;
        }
        if fy {
            b = -b;
        }
        (a, b)
    }

    /// Maps grid cell `(row, col)` on an `n x n` grid. Cell centers map onto
    /// cell centers, so rasterization commutes with the symmetry.
    pub fn apply_cell(self, row: usize, col: usize, n: usize) -> (usize, usize) {
        let (swap, fx, fy) = self.parts();
        let (mut c, mut r) = if swap { (row, col) } else { (col, row) };
        if fx {
            c = n - 1 - c;
        }
        if fy {
            r = n - 1 - r;
        }
        (r, c)
    }
}

/// Top-down binary occupancy image with start and goal markers.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub resolution: usize,
    /// Row-major; row `i` spans `y in [i/n, (i+1)/n)`.
    pub occupied: Vec<bool>,
    pub start_cell: (usize, usize),
    pub goal_cell: (usize, usize),
}

impl OccupancyGrid {
    /// Marks a cell occupied iff its center is in collision for the robot disc.
    pub fn rasterize(ws: &Workspace, resolution: usize) -> Self {
        let n = resolution;
        let occupied = (0..n * n)
            .map(|k| ws.point_in_collision(Self::cell_center(k / n, k % n, n)))
            .collect();
        OccupancyGrid {
            resolution: n,
            occupied,
            start_cell: Self::cell_of(ws.start, n),
            goal_cell: Self::cell_of(ws.goal, n),
        }
    }

    pub fn cell_center(row: usize, col: usize, n: usize) -> Vec2 {
        Vec2::new((col as f64 + 0.5) / n as f64, (row as f64 + 0.5) / n as f64)
    }

    pub fn cell_of(q: Vec2, n: usize) -> (usize, usize) {
        let idx = |v: f64| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
        (idx(q.y), idx(q.x))
    }

    /// Same obstacles, markers moved to new start/goal configurations.
    pub fn with_markers(&self, start: Vec2, goal: Vec2) -> Self {
        OccupancyGrid {
            start_cell: Self::cell_of(start, self.resolution),
            goal_cell: Self::cell_of(goal, self.resolution),
            ..self.clone()
        }
    }

    pub fn transformed(&self, sym: Symmetry) -> Self {
        let n = self.resolution;
        let mut occupied = vec![false; n * n];
        for r in 0..n {
            for c in 0..n {
                let (r2, c2) = sym.apply_cell(r, c, n);
                occupied[r2 * n + c2] = self.occupied[r * n + c];
            }
        }
        OccupancyGrid {
            resolution: n,
            occupied,
            start_cell: sym.apply_cell(self.start_cell.0, self.start_cell.1, n),
            goal_cell: sym.apply_cell(self.goal_cell.0, self.goal_cell.1, n),
        }
    }

    /// Channels-last image `[n, n, 3]`: occupancy, start marker, goal marker.
    pub fn write_channels(&self, out: &mut [f64]) {
        let n = self.resolution;
        debug_assert_eq!(out.len(), n * n * 3);
        for (k, &occ) in self.occupied.iter().enumerate() {
            out[3 * k] = if occ { 1.0 } else { 0.0 };
            out[3 * k + 1] = 0.0;
            out[3 * k + 2] = 0.0;
        }
        out[3 * (self.start_cell.0 * n + self.start_cell.1) + 1] = 1.0;
        out[3 * (self.goal_cell.0 * n + self.goal_cell.1) + 2] = 1.0;
    }

    pub fn channels(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.resolution * self.resolution * 3];
        self.write_channels(&mut v);
        v
    }
}

/// Bounds for procedural scene generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    /// Inclusive obstacle-count range.
    pub obstacle_count: (usize, usize),
    pub circle_radius: (f64, f64),
    pub rect_side: (f64, f64),
    pub robot_radius: f64,
    pub min_separation: f64,
    /// Extra clearance demanded around the start and goal.
    pub endpoint_clearance: f64,
    /// Extra clearance under which the scene must be solvable by RRT.
    pub solve_clearance: f64,
    pub max_resamples: usize,
    pub rrt: RrtParams,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            obstacle_count: (5, 12),
            circle_radius: (0.03, 0.12),
            rect_side: (0.05, 0.2),
            robot_radius: 0.02,
            min_separation: 0.5,
            endpoint_clearance: 0.03,
            solve_clearance: 0.02,
            max_resamples: 200,
            rrt: RrtParams::default(),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Generates a solvable scene from `seed`. Unsolvable draws are rejected and
/// redrawn from the same seeded stream, so the result depends on `seed` only.
pub fn generate_workspace(seed: u64, params: &GenerationParams) -> Result<Workspace> {
    let mut rng = seed::rng(seed);
    let r = params.robot_radius;
    for attempt in 0..params.max_resamples {
        let count = rng.random_range(params.obstacle_count.0..=params.obstacle_count.1);
        let mut obstacles = Vec::with_capacity(count);
        for _ in 0..count {
            if rng.random_bool(0.5) {
                let radius = uniform(&mut rng, params.circle_radius);
                let cx = rng.random_range(radius..1.0 - radius);
                let cy = rng.random_range(radius..1.0 - radius);
                obstacles.push(Obstacle::Circle {
                    center: Vec2::new(cx, cy),
                    radius,
                });
            } else {
                let w = uniform(&mut rng, params.rect_side);
                let h = uniform(&mut rng, params.rect_side);
                let x0 = rng.random_range(0.0..1.0 - w);
                let y0 = rng.random_range(0.0..1.0 - h);
                obstacles.push(Obstacle::Rect {
                    min: Vec2::new(x0, y0),
                    max: Vec2::new(x0 + w, y0 + h),
                });
            }
        }
        let mut ws = Workspace {
            seed,
            robot_radius: r,
            obstacles,
            start: Vec2::ZERO,
            goal: Vec2::ZERO,
        };
        let sample_free = |rng: &mut rand_chacha::ChaCha8Rng| -> Option<Vec2> {
            (0..200).find_map(|_| {
                let q = Vec2::new(rng.random_range(r..1.0 - r), rng.random_range(r..1.0 - r));
                (ws.signed_distance(q) > params.endpoint_clearance).then_some(q)
            })
        };
        let Some(start) = sample_free(&mut rng) else { continue };
        let goal = (0..200).find_map(|_| sample_free(&mut rng).filter(|g| g.distance(start) >= params.min_separation));
        let Some(goal) = goal else { continue };
        ws.start = start;
        ws.goal = goal;
        let check = ws.inflated(params.solve_clearance);
        let rrt_seed = seed::derive_labeled(seed, "solvable", attempt as u64);
        if expert::rrt_plan(&check, &params.rrt, rrt_seed).is_ok() {
            return Ok(ws);
        }
    }
    Err(Error::Exhausted(format!(
        "no solvable workspace for seed {seed} after {} draws",
        params.max_resamples
    )))
}
