//! Synthetic BEV worlds: moving rectangular objects, static sensing agents,
//! occlusion-aware observations and ground-truth sequences.
//!
//! Coordinates are in meters. Cell `(row, col)` covers
//! `[col*cs, (col+1)*cs) x [row*cs, (row+1)*cs)`, so `x` runs along columns
//! and `y` along rows.

use std::f64::consts::PI;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, RotatedBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub grid_height: usize,
    pub grid_width: usize,
    /// Meters per cell.
    pub cell_size: f64,
    pub num_agents: usize,
    pub num_objects: usize,
    /// Number of timestamps.
    pub duration: usize,
    pub seed: u64,
    /// Object speed bounds in cells per step.
    pub object_speed_range: (f64, f64),
    pub turn_probability: f64,
    /// Object box extent along its heading, meters.
    pub object_length: f64,
    /// Object box extent across its heading, meters.
    pub object_width: f64,
    /// Sensing radius of every agent, meters.
    pub sensing_range: f64,
    /// Per visible cell probability of a clutter return.
    pub clutter_rate: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            grid_height: 64,
            grid_width: 96,
            cell_size: 1.0,
            num_agents: 4,
            num_objects: 24,
            duration: 30,
            seed: 0,
            object_speed_range: (0.5, 1.5),
            turn_probability: 0.05,
            object_length: 4.0,
            object_width: 2.0,
            sensing_range: 30.0,
            clutter_rate: 0.01,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.grid_height == 0 || self.grid_width == 0 {
            return fail("grid must have non-zero area");
        }
        if self.duration == 0 {
            return fail("duration must be at least one timestamp");
        }
        if self.num_agents == 0 {
            return fail("at least one agent is required");
        }
        if !(self.cell_size > 0.0) || !self.cell_size.is_finite() {
            return fail("cell_size must be positive");
        }
        let (lo, hi) = self.object_speed_range;
        if !(lo >= 0.0 && hi >= lo) {
            return fail("object_speed_range must be non-negative and ordered");
        }
        if !(0.0..=1.0).contains(&self.turn_probability) {
            return fail("turn_probability must lie in [0, 1]");
        }
        if !(self.object_length > 0.0 && self.object_width > 0.0) {
            return fail("object extents must be positive");
        }
        if !(self.sensing_range > 0.0) {
            return fail("sensing_range must be positive");
        }
        if !(0.0..=1.0).contains(&self.clutter_rate) {
            return fail("clutter_rate must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_height * self.grid_width
    }

    pub fn extent_x(&self) -> f64 {
        self.grid_width as f64 * self.cell_size
    }

    pub fn extent_y(&self) -> f64 {
        self.grid_height as f64 * self.cell_size
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        ((col as f64 + 0.5) * self.cell_size, (row as f64 + 0.5) * self.cell_size)
    }

    /// Cell containing a metric position, if inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= 0.0 && y >= 0.0) {
            return None;
        }
        let col = (x / self.cell_size).floor() as usize;
        let row = (y / self.cell_size).floor() as usize;
        (row < self.grid_height && col < self.grid_width).then_some((row, col))
    }

    /// Cells whose centers fall inside `bx` (closed test).
    pub fn footprint(&self, bx: &RotatedBox<f64>) -> Vec<(usize, usize)> {
        let r = bx.bounding_radius();
        let cs = self.cell_size;
        let c0 = ((bx.x - r) / cs - 0.5).floor().max(0.0) as usize;
        let c1 = (((bx.x + r) / cs - 0.5).ceil().max(0.0) as usize).min(self.grid_width.saturating_sub(1));
        let r0 = ((bx.y - r) / cs - 0.5).floor().max(0.0) as usize;
        let r1 = (((bx.y + r) / cs - 0.5).ceil().max(0.0) as usize).min(self.grid_height.saturating_sub(1));
        let mut out = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                let (cx, cy) = self.cell_center(row, col);
                if bx.contains(cx, cy) {
                    out.push((row, col));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectState {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    /// Extent along heading.
    pub h: f64,
    /// Extent across heading.
    pub w: f64,
    pub heading: f64,
    /// Meters per step.
    pub vx: f64,
    pub vy: f64,
}

impl ObjectState {
    pub fn to_box(&self) -> RotatedBox<f64> {
        RotatedBox::new(self.x, self.y, self.h, self.w, self.heading)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentPose {
    pub agent_id: u32,
    pub x: f64,
    pub y: f64,
    pub sensing_range: f64,
    pub pose_error_std: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HitPoint {
    pub row: usize,
    pub col: usize,
    /// In `(0, 1]`.
    pub strength: f64,
    /// Heading of the reflecting surface's owner; random for clutter.
    pub heading: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub agent_id: u32,
    pub timestamp: usize,
    pub height: usize,
    pub width: usize,
    /// Row-major visibility grid.
    pub visible: Vec<bool>,
    pub hits: Vec<HitPoint>,
}

impl Observation {
    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        self.visible[row * self.width + col]
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|v| **v).count()
    }

    /// Shift the whole observation by an integer cell offset, dropping
    /// anything that leaves the grid. Models registration with a wrong pose.
    pub fn translated(&self, d_row: i64, d_col: i64) -> Observation {
        if d_row == 0 && d_col == 0 {
            return self.clone();
        }
        let shift = |r: usize, c: usize| -> Option<(usize, usize)> {
            let nr = r as i64 + d_row;
            let nc = c as i64 + d_col;
            (nr >= 0 && nc >= 0 && (nr as usize) < self.height && (nc as usize) < self.width)
                .then_some((nr as usize, nc as usize))
        };
        let mut visible = vec![false; self.visible.len()];
        for r in 0..self.height {
            for c in 0..self.width {
                if self.visible[r * self.width + c] {
                    if let Some((nr, nc)) = shift(r, c) {
                        visible[nr * self.width + nc] = true;
                    }
                }
            }
        }
        let hits = self
            .hits
            .iter()
            .filter_map(|h| shift(h.row, h.col).map(|(row, col)| HitPoint { row, col, ..*h }))
            .collect();
        Observation {
            visible,
            hits,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub timestamp: usize,
    pub objects: Vec<ObjectState>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_OBJECTS: u64 = 1;
const STREAM_MOTION: u64 = 2;
const STREAM_AGENTS: u64 = 3;
const STREAM_SENSE: u64 = 4;
const STREAM_POSE: u64 = 5;

fn margin(config: &WorldConfig) -> f64 {
    config.object_length.max(config.object_width) / 2.0
}

/// Draw the initial object population.
pub fn initial_objects(config: &WorldConfig) -> Vec<ObjectState> {
    let mut rng = rng_for(config.seed, STREAM_OBJECTS);
    let m = margin(config);
    let (ex, ey) = (config.extent_x(), config.extent_y());
    let (lo, hi) = config.object_speed_range;
    (0..config.num_objects)
        .map(|i| {
            let x = if ex > 2.0 * m {
                rng.gen_range(m..ex - m)
            } else {
                ex / 2.0
            };
            let y = if ey > 2.0 * m {
                rng.gen_range(m..ey - m)
            } else {
                ey / 2.0
            };
            let heading = rng.gen_range(-PI..PI);
            let speed = if hi > lo { rng.gen_range(lo..hi) } else { lo } * config.cell_size;
            ObjectState {
                id: i as u32,
                x,
                y,
                h: config.object_length,
                w: config.object_width,
                heading,
                vx: speed * heading.cos(),
                vy: speed * heading.sin(),
            }
        })
        .collect()
}

/// Roll an explicit initial population forward for `config.duration` frames.
/// Frame 0 is the initial state.
pub fn simulate(config: &WorldConfig, initial: Vec<ObjectState>) -> Result<Vec<GroundTruthFrame>> {
    config.validate()?;
    let mut rng = rng_for(config.seed, STREAM_MOTION);
    let (ex, ey) = (config.extent_x(), config.extent_y());
    let m = margin(config);
    let mut objects = initial;
    let mut frames = Vec::with_capacity(config.duration);
    for t in 0..config.duration {
        if t > 0 {
            for o in objects.iter_mut() {
                if config.turn_probability > 0.0 && rng.gen_bool(config.turn_probability) {
                    let turn = rng.gen_range(-PI / 2.0..PI / 2.0);
                    let (s, c) = turn.sin_cos();
                    let (vx, vy) = (o.vx * c - o.vy * s, o.vx * s + o.vy * c);
                    o.vx = vx;
                    o.vy = vy;
                }
                o.x += o.vx;
                o.y += o.vy;
                if ex > 2.0 * m {
                    if o.x < m {
                        o.x = 2.0 * m - o.x;
                        o.vx = -o.vx;
                    } else if o.x > ex - m {
                        o.x = 2.0 * (ex - m) - o.x;
                        o.vx = -o.vx;
                    }
                }
                if ey > 2.0 * m {
                    if o.y < m {
                        o.y = 2.0 * m - o.y;
                        o.vy = -o.vy;
                    } else if o.y > ey - m {
                        o.y = 2.0 * (ey - m) - o.y;
                        o.vy = -o.vy;
                    }
                }
                if o.vx != 0.0 || o.vy != 0.0 {
                    o.heading = o.vy.atan2(o.vx);
                }
                o.heading = wrap_angle(o.heading);
            }
        }
        frames.push(GroundTruthFrame {
            timestamp: t,
            objects: objects.clone(),
        });
    }
    Ok(frames)
}

/// Generate the full ground-truth sequence for a world.
pub fn generate_world(config: &WorldConfig) -> Result<Vec<GroundTruthFrame>> {
    config.validate()?;
    simulate(config, initial_objects(config))
}

/// Place agents on a jittered tiling of the grid so that their sensing
/// discs jointly cover most of the scene.
pub fn place_agents(config: &WorldConfig) -> Vec<AgentPose> {
    let mut rng = rng_for(config.seed, STREAM_AGENTS);
    let n = config.num_agents;
    let (ex, ey) = (config.extent_x(), config.extent_y());
    let rows = ((n as f64 * ey / ex).sqrt().round() as usize).clamp(1, n);
    let cols = n.div_ceil(rows);
    (0..n)
        .map(|k| {
            let (tr, tc) = (k / cols, k % cols);
            // the last row may be short; stretch its tiles
            let in_row = if tr == rows - 1 { n - tr * cols } else { cols };
            let tile_w = ex / in_row as f64;
            let tile_h = ey / rows as f64;
            let jx = rng.gen_range(-0.2..0.2) * tile_w;
            let jy = rng.gen_range(-0.2..0.2) * tile_h;
            AgentPose {
                agent_id: k as u32,
                x: ((tc as f64 + 0.5) * tile_w + jx).clamp(0.0, ex - 1e-6),
                y: ((tr as f64 + 0.5) * tile_h + jy).clamp(0.0, ey - 1e-6),
                sensing_range: config.sensing_range,
                pose_error_std: 0.0,
            }
        })
        .collect()
}

/// Visibility of every cell from `pose`.
///
/// A cell is visible if its center is within sensing range and no object
/// box strictly intersects the open segment from the agent to the center.
/// A box never occludes cells whose centers it contains.
pub fn visibility(frame: &GroundTruthFrame, pose: &AgentPose, config: &WorldConfig) -> Vec<bool> {
    let boxes: Vec<(RotatedBox<f64>, f64)> = frame
        .objects
        .iter()
        .map(|o| {
            let b = o.to_box();
            let r = b.bounding_radius();
            (b, r)
        })
        .collect();
    let (h, w) = (config.grid_height, config.grid_width);
    let mut visible = vec![false; h * w];
    let range2 = pose.sensing_range * pose.sensing_range;
    let a = (pose.x, pose.y);
    for row in 0..h {
        for col in 0..w {
            let (cx, cy) = config.cell_center(row, col);
            let (dx, dy) = (cx - a.0, cy - a.1);
            let len2 = dx * dx + dy * dy;
            if len2 > range2 {
                continue;
            }
            let blocked = boxes.iter().any(|(b, r)| {
                // distance from box center to the segment, as a cheap reject
                let t = if len2 > 0.0 {
                    (((b.x - a.0) * dx + (b.y - a.1) * dy) / len2).clamp(0.0, 1.0)
                } else {
                    0.0
                };
                let (px, py) = (a.0 + t * dx - b.x, a.1 + t * dy - b.y);
                if px * px + py * py >= r * r {
                    return false;
                }
                !b.contains(cx, cy) && b.segment_intersects_interior(a, (cx, cy))
            });
            visible[row * w + col] = !blocked;
        }
    }
    visible
}

/// Produce one agent's observation of a frame.
pub fn sense(frame: &GroundTruthFrame, pose: &AgentPose, config: &WorldConfig, seed: u64) -> Observation {
    let visible = visibility(frame, pose, config);
    let w = config.grid_width;
    let mut hits = Vec::new();
    for o in &frame.objects {
        for (row, col) in config.footprint(&o.to_box()) {
            if visible[row * w + col] {
                hits.push(HitPoint {
                    row,
                    col,
                    strength: 1.0,
                    heading: o.heading,
                });
            }
        }
    }
    let stream = STREAM_SENSE ^ ((pose.agent_id as u64) << 8) ^ ((frame.timestamp as u64) << 24);
    let mut rng = rng_for(seed, stream);
    if config.clutter_rate > 0.0 {
        for (idx, vis) in visible.iter().enumerate() {
            if *vis && rng.gen_bool(config.clutter_rate) {
                hits.push(HitPoint {
                    row: idx / w,
                    col: idx % w,
                    strength: rng.gen_range(0.05..=0.3),
                    heading: rng.gen_range(-PI..PI),
                });
            }
        }
    }
    Observation {
        agent_id: pose.agent_id,
        timestamp: frame.timestamp,
        height: config.grid_height,
        width: config.grid_width,
        visible,
        hits,
    }
}

/// Shift a pose by independent zero-mean Gaussian offsets in x and y.
pub fn perturb_pose(pose: &AgentPose, std: f64, seed: u64) -> AgentPose {
    if !(std > 0.0) {
        return pose.clone();
    }
    let mut rng = rng_for(seed, STREAM_POSE ^ ((pose.agent_id as u64) << 8));
    let normal = Normal::new(0.0, std).expect("finite std");
    AgentPose {
        x: pose.x + normal.sample(&mut rng),
        y: pose.y + normal.sample(&mut rng),
        pose_error_std: std,
        ..pose.clone()
    }
}

/// Write frames as `timestamp,id,x,y,h,w,alpha,vx,vy`.
pub fn write_ground_truth_csv<W: Write>(frames: &[GroundTruthFrame], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["timestamp", "id", "x", "y", "h", "w", "alpha", "vx", "vy"])?;
    for f in frames {
        for o in &f.objects {
            wtr.write_record(&[
                f.timestamp.to_string(),
                o.id.to_string(),
                format!("{:.6}", o.x),
                format!("{:.6}", o.y),
                format!("{:.6}", o.h),
                format!("{:.6}", o.w),
                format!("{:.6}", o.heading),
                format!("{:.6}", o.vx),
                format!("{:.6}", o.vy),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
