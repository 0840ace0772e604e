//! Agent state, discrete motion, depth sensing, occupancy mapping and echo
//! capture.

use std::io::Write as _;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::acoustics::{trace_rir, AcousticsConfig, AcousticsError, Rir, SourceReceiverQuery};
use crate::grid::{first_wall, heading_vector, segment_clear, CellWalker};
use crate::world::World;

pub const STEP_METERS: f64 = 1.0;
pub const TURN_DEGREES: f64 = 90.0;
/// Field of view of the depth scan, degrees.
pub const SCAN_FOV_DEG: f64 = 90.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Degrees counter-clockwise from +x.
    pub theta_deg: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta_deg: f64) -> Self {
        Self { x, y, theta_deg }
    }

    pub fn position(&self) -> (f64, f64) {
        (self.x, self.y)
    }
}

/// True pose plus the pose the agent believes it has. The two differ only
/// when noise is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub pose: Pose,
    pub believed: Pose,
}

impl AgentPose {
    pub fn exact(pose: Pose) -> Self {
        Self {
            pose,
            believed: pose,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Motion {
    MoveForward,
    TurnLeft,
    TurnRight,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Sampling {
    Sample,
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionCommand {
    pub motion: Motion,
    pub sampling: Sampling,
}

pub const NUM_ACTIONS: usize = 6;

impl ActionCommand {
    pub fn new(motion: Motion, sampling: Sampling) -> Self {
        Self { motion, sampling }
    }

    /// Composite index: `2 * motion + (0 for Sample, 1 for Skip)`.
    pub fn index(&self) -> usize {
        let m = match self.motion {
            Motion::MoveForward => 0,
            Motion::TurnLeft => 1,
            Motion::TurnRight => 2,
        };
        2 * m + usize::from(self.sampling == Sampling::Skip)
    }

    pub fn from_index(i: usize) -> Self {
        assert!(i < NUM_ACTIONS, "action index {i} out of range");
        let motion = [Motion::MoveForward, Motion::TurnLeft, Motion::TurnRight][i / 2];
        let sampling = if i % 2 == 0 {
            Sampling::Sample
        } else {
            Sampling::Skip
        };
        Self { motion, sampling }
    }

    pub fn samples(&self) -> bool {
        self.sampling == Sampling::Sample
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub translation_sigma: f64,
    pub rotation_sigma_deg: f64,
    /// Draws beyond this many standard deviations are rejected.
    pub truncation: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            translation_sigma: 0.05,
            rotation_sigma_deg: 2.0,
            truncation: 3.0,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        Self::default()
    }

    pub fn on(translation_sigma: f64, rotation_sigma_deg: f64) -> Self {
        Self {
            enabled: true,
            translation_sigma,
            rotation_sigma_deg,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.translation_sigma >= 0.0
            && self.rotation_sigma_deg >= 0.0
            && self.truncation > 0.0)
        {
            return Err("noise sigmas must be >= 0 and truncation > 0".into());
        }
        Ok(())
    }
}

fn truncated_normal<R: Rng>(rng: &mut R, sigma: f64, bound: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= bound {
            return z * sigma;
        }
    }
}

/// Turns the heading by `delta` degrees, keeping it in [0, 360).
pub fn turn(theta_deg: f64, delta: f64) -> f64 {
    (theta_deg + delta).rem_euclid(360.0)
}

/// Applies one motion command. Returns the new pose and whether a forward
/// move was blocked. Without noise the rng is not touched.
pub fn apply_action<R: Rng>(
    world: &World,
    agent: &AgentPose,
    cmd: ActionCommand,
    noise: &NoiseConfig,
    rng: &mut R,
) -> (AgentPose, bool) {
    let p = agent.pose;
    let (mut next, blocked) = match cmd.motion {
        Motion::TurnLeft => (
            Pose {
                theta_deg: turn(p.theta_deg, TURN_DEGREES),
                ..p
            },
            false,
        ),
        Motion::TurnRight => (
            Pose {
                theta_deg: turn(p.theta_deg, -TURN_DEGREES),
                ..p
            },
            false,
        ),
        Motion::MoveForward => {
            let (hx, hy) = heading_vector(p.theta_deg);
            let dest = (p.x + STEP_METERS * hx, p.y + STEP_METERS * hy);
            if segment_clear(world, (p.x, p.y), dest) {
                (
                    Pose {
                        x: dest.0,
                        y: dest.1,
                        ..p
                    },
                    false,
                )
            } else {
                (p, true)
            }
        }
    };
    if !noise.enabled {
        return (AgentPose::exact(next), blocked);
    }
    // actuation noise on successful moves; the heading stays on the lattice
    if cmd.motion == Motion::MoveForward && !blocked {
        let dist = STEP_METERS + truncated_normal(rng, noise.translation_sigma, noise.truncation);
        let ang = p.theta_deg + truncated_normal(rng, noise.rotation_sigma_deg, noise.truncation);
        let r = ang.to_radians();
        let dest = (p.x + dist * r.cos(), p.y + dist * r.sin());
        if segment_clear(world, (p.x, p.y), dest) {
            next.x = dest.0;
            next.y = dest.1;
        }
    }
    // sensor noise is drawn afresh each step and does not accumulate
    let believed = Pose {
        x: next.x + truncated_normal(rng, noise.translation_sigma, noise.truncation),
        y: next.y + truncated_normal(rng, noise.translation_sigma, noise.truncation),
        theta_deg: next.theta_deg
            + truncated_normal(rng, noise.rotation_sigma_deg, noise.truncation),
    };
    (
        AgentPose {
            pose: next,
            believed,
        },
        blocked,
    )
}

/// Believed pose for a freshly placed agent.
pub fn observe_pose<R: Rng>(pose: Pose, noise: &NoiseConfig, rng: &mut R) -> AgentPose {
    if !noise.enabled {
        return AgentPose::exact(pose);
    }
    let believed = Pose {
        x: pose.x + truncated_normal(rng, noise.translation_sigma, noise.truncation),
        y: pose.y + truncated_normal(rng, noise.translation_sigma, noise.truncation),
        theta_deg: pose.theta_deg
            + truncated_normal(rng, noise.rotation_sigma_deg, noise.truncation),
    };
    AgentPose { pose, believed }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthScan {
    pub ranges: Vec<f64>,
    pub max_range: f64,
}

impl DepthScan {
    /// Bearing offset of ray `r` relative to the heading, degrees.
    pub fn bearing_offset(r: usize, count: usize) -> f64 {
        -SCAN_FOV_DEG / 2.0 + SCAN_FOV_DEG * r as f64 / (count - 1) as f64
    }

    pub fn min(&self) -> f64 {
        self.ranges.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.ranges.iter().copied().fold(0.0, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.ranges.iter().sum::<f64>() / self.ranges.len() as f64
    }
}

fn rotate(v: (f64, f64), deg: f64) -> (f64, f64) {
    let (s, c) = deg.to_radians().sin_cos();
    (c * v.0 - s * v.1, s * v.0 + c * v.1)
}

fn ray_direction(theta_deg: f64, offset_deg: f64) -> (f64, f64) {
    // rotating the exact lattice heading keeps scans exactly rotation-equivariant
    rotate(heading_vector(theta_deg), offset_deg)
}

/// `count` depth rays spread over the field of view centered on the heading.
pub fn depth_scan(world: &World, pose: &Pose, count: usize, max_range: f64) -> DepthScan {
    assert!(count >= 3, "a depth scan needs at least 3 rays");
    let ranges = (0..count)
        .map(|r| {
            let dir = ray_direction(pose.theta_deg, DepthScan::bearing_offset(r, count));
            let t = first_wall(world, (pose.x, pose.y), dir, max_range).map_or(max_range, |h| h.t);
            t.clamp(1e-9, max_range)
        })
        .collect();
    DepthScan { ranges, max_range }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MapCell {
    Unknown,
    Free,
    Occupied,
}

/// Agent-built tri-state map at world cell resolution, plus a 1 m visit grid
/// anchored at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupancyMap {
    pub width: usize,
    pub height: usize,
    pub cell_size: f64,
    pub cells: Vec<MapCell>,
    pub visit_width: usize,
    pub visit_height: usize,
    pub visit_counts: Vec<u32>,
    free_cells: usize,
}

impl OccupancyMap {
    pub fn new(world: &World) -> Self {
        let [ew, eh] = world.extent();
        let (vw, vh) = (ew.ceil() as usize, eh.ceil() as usize);
        Self {
            width: world.width(),
            height: world.height(),
            cell_size: world.cell_size(),
            cells: vec![MapCell::Unknown; world.width() * world.height()],
            visit_width: vw,
            visit_height: vh,
            visit_counts: vec![0; vw * vh],
            free_cells: 0,
        }
    }

    pub fn get(&self, i: i64, j: i64) -> MapCell {
        if i < 0 || j < 0 || i as usize >= self.width || j as usize >= self.height {
            return MapCell::Unknown;
        }
        self.cells[j as usize * self.width + i as usize]
    }

    fn mark(&mut self, cell: (i64, i64), value: MapCell) {
        let (i, j) = cell;
        if i < 0 || j < 0 || i as usize >= self.width || j as usize >= self.height {
            return;
        }
        let slot = &mut self.cells[j as usize * self.width + i as usize];
        if *slot == MapCell::Unknown {
            *slot = value;
            if value == MapCell::Free {
                self.free_cells += 1;
            }
        }
    }

    pub fn covered_area(&self) -> f64 {
        self.free_cells as f64 * self.cell_size * self.cell_size
    }

    pub fn count(&self, value: MapCell) -> usize {
        self.cells.iter().filter(|&&c| c == value).count()
    }

    /// 1 m visit cell containing a point, clamped to the grid.
    pub fn visit_cell(&self, x: f64, y: f64) -> (usize, usize) {
        let clamp = |v: f64, n: usize| (v.floor().max(0.0) as usize).min(n - 1);
        (clamp(x, self.visit_width), clamp(y, self.visit_height))
    }

    pub fn visit_count_at(&self, x: f64, y: f64) -> u32 {
        let (i, j) = self.visit_cell(x, y);
        self.visit_counts[j * self.visit_width + i]
    }

    pub fn total_visits(&self) -> u64 {
        self.visit_counts.iter().map(|&v| v as u64).sum()
    }

    /// Projects a scan taken at `believed` into the map (first write wins).
    /// Does not touch visit counts.
    pub fn integrate(&mut self, believed: &Pose, scan: &DepthScan) {
        let origin = (believed.x, believed.y);
        let cs = self.cell_size;
        self.mark(
            (
                (origin.0 / cs).floor() as i64,
                (origin.1 / cs).floor() as i64,
            ),
            MapCell::Free,
        );
        let count = scan.ranges.len();
        for (r, &range) in scan.ranges.iter().enumerate() {
            let dir = rotate(
                heading_vector(believed.theta_deg),
                DepthScan::bearing_offset(r, count),
            );
            let mut walker = CellWalker::new(cs, origin, dir);
            // cells entered strictly before the range are free; the one
            // entered at the range is the obstacle
            let tol = 1e-9;
            loop {
                if walker.next_t() >= range - tol {
                    break;
                }
                let step = walker.advance();
                self.mark(step.cell, MapCell::Free);
            }
            if range < scan.max_range {
                let hit = walker.advance();
                self.mark(hit.cell, MapCell::Occupied);
            }
        }
    }

    /// Like [`OccupancyMap::integrate`], then also marks the wedge between
    /// each pair of adjacent rays free out to the shorter of their ranges,
    /// using `subdivisions` interpolated rays per gap.
    pub fn integrate_fan(&mut self, believed: &Pose, scan: &DepthScan, subdivisions: usize) {
        self.integrate(believed, scan);
        let origin = (believed.x, believed.y);
        let count = scan.ranges.len();
        for r in 0..count.saturating_sub(1) {
            let range = scan.ranges[r].min(scan.ranges[r + 1]);
            let a0 = DepthScan::bearing_offset(r, count);
            let a1 = DepthScan::bearing_offset(r + 1, count);
            for k in 1..subdivisions {
                let a = a0 + (a1 - a0) * k as f64 / subdivisions as f64;
                let dir = rotate(heading_vector(believed.theta_deg), a);
                let mut walker = CellWalker::new(self.cell_size, origin, dir);
                while walker.next_t() < range - 1e-9 {
                    let step = walker.advance();
                    self.mark(step.cell, MapCell::Free);
                }
            }
        }
    }

    /// True when the segment crosses no cell mapped as occupied.
    pub fn segment_clear(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy);
        let start = (
            (a.0 / self.cell_size).floor() as i64,
            (a.1 / self.cell_size).floor() as i64,
        );
        if self.get(start.0, start.1) == MapCell::Occupied {
            return false;
        }
        if len == 0.0 {
            return true;
        }
        let mut walker = CellWalker::new(self.cell_size, a, (dx / len, dy / len));
        while walker.next_t() < len {
            let s = walker.advance();
            if self.get(s.cell.0, s.cell.1) == MapCell::Occupied {
                return false;
            }
        }
        true
    }

    /// True when every cell the segment touches, ends included, is mapped
    /// free.
    pub fn segment_known_free(&self, a: (f64, f64), b: (f64, f64)) -> bool {
        let (dx, dy) = (b.0 - a.0, b.1 - a.1);
        let len = dx.hypot(dy);
        let start = (
            (a.0 / self.cell_size).floor() as i64,
            (a.1 / self.cell_size).floor() as i64,
        );
        if self.get(start.0, start.1) != MapCell::Free {
            return false;
        }
        if len == 0.0 {
            return true;
        }
        let mut walker = CellWalker::new(self.cell_size, a, (dx / len, dy / len));
        while walker.next_t() < len {
            let s = walker.advance();
            if self.get(s.cell.0, s.cell.1) != MapCell::Free {
                return false;
            }
        }
        true
    }

    /// Writes a binary graymap: unknown 128, free 255, occupied 0, with the
    /// top image row at the largest y.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = Vec::new();
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("write to vec");
        for j in (0..self.height).rev() {
            for i in 0..self.width {
                out.push(match self.cells[j * self.width + i] {
                    MapCell::Unknown => 128,
                    MapCell::Free => 255,
                    MapCell::Occupied => 0,
                });
            }
        }
        out
    }
}

/// Integrates the scan and counts one visit to the agent's current 1 m cell.
pub fn update_occupancy(map: &mut OccupancyMap, believed: &Pose, scan: &DepthScan) {
    map.integrate(believed, scan);
    let (i, j) = map.visit_cell(believed.x, believed.y);
    map.visit_counts[j * map.visit_width + i] += 1;
}

/// Echo response: source and receiver colocated at the (true) pose.
pub fn capture_echo(
    world: &World,
    pose: &Pose,
    cfg: &AcousticsConfig,
) -> Result<Rir, AcousticsError> {
    trace_rir(world, &echo_query(pose), cfg)
}

pub fn echo_query(pose: &Pose) -> SourceReceiverQuery {
    SourceReceiverQuery::new((pose.x, pose.y), (pose.x, pose.y), pose.theta_deg)
}
