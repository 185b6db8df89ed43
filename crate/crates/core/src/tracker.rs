//! Kalman multi-object tracker: constant-velocity prediction, IoU +
//! Hungarian association, measurement update, birth and death.
//!
//! State layout is `(c, x, y, h, w, cos a, sin a, vx, vy)`; detections
//! measure the first seven components.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_matching;
use crate::error::{Error, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::linalg::Mat;
use crate::perception::DetectionBox;
use crate::scalar::Real;

pub const STATE_DIM: usize = 9;
pub const MEAS_DIM: usize = 7;
const IX: usize = 1;
const IY: usize = 2;
const IVX: usize = 7;
const IVY: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Diagonal of Q.
    pub process_noise: f64,
    /// Diagonal of R.
    pub measurement_noise: f64,
    /// Initial variance of measured components.
    pub initial_variance: f64,
    /// Initial variance of the unobserved velocity.
    pub initial_velocity_variance: f64,
    pub death_after: u32,
    pub iou_min: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            process_noise: 0.01,
            measurement_noise: 0.1,
            initial_variance: 10.0,
            initial_velocity_variance: 1000.0,
            death_after: 2,
            iou_min: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Track<T> {
    pub track_id: u32,
    pub state: [T; STATE_DIM],
    pub covariance: Mat<T>,
    pub age: u32,
    /// Consecutive unmatched steps.
    pub misses: u32,
}

impl<T: Real> Track<T> {
    pub fn x(&self) -> T {
        self.state[IX]
    }

    pub fn y(&self) -> T {
        self.state[IY]
    }

    pub fn vx(&self) -> T {
        self.state[IVX]
    }

    pub fn vy(&self) -> T {
        self.state[IVY]
    }

    pub fn heading(&self) -> T {
        self.state[6].atan2(self.state[5])
    }

    pub fn to_box(&self) -> RotatedBox<T> {
        let tiny = T::lit(1e-3);
        RotatedBox::new(
            self.state[IX],
            self.state[IY],
            self.state[3].max(tiny),
            self.state[4].max(tiny),
            self.heading(),
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackSet<T> {
    pub agent_id: u32,
    pub timestamp: usize,
    pub tracks: Vec<Track<T>>,
    /// Next identifier handed to a newborn track.
    pub next_id: u32,
}

impl<T: Real> TrackSet<T> {
    pub fn new(agent_id: u32, timestamp: usize) -> Self {
        Self {
            agent_id,
            timestamp,
            tracks: Vec::new(),
            next_id: 0,
        }
    }

    pub fn get(&self, track_id: u32) -> Option<&Track<T>> {
        self.tracks.iter().find(|t| t.track_id == track_id)
    }

    /// Tracks refreshed by a detection at this timestamp.
    pub fn active(&self) -> impl Iterator<Item = &Track<T>> {
        self.tracks.iter().filter(|t| t.misses == 0)
    }
}

/// Binary `tracks x detections` matching.
#[derive(Clone, Debug, PartialEq)]
pub struct AssociationMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<bool>,
}

impl AssociationMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![false; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.values[r * self.cols + c]
    }

    pub fn is_one_to_one(&self) -> bool {
        let rows_ok = (0..self.rows).all(|r| (0..self.cols).filter(|&c| self.get(r, c)).count() <= 1);
        let cols_ok = (0..self.cols).all(|c| (0..self.rows).filter(|&r| self.get(r, c)).count() <= 1);
        rows_ok && cols_ok
    }

    pub fn row_match(&self, r: usize) -> Option<usize> {
        (0..self.cols).find(|&c| self.get(r, c))
    }
}

fn transition<T: Real>() -> Mat<T> {
    let mut f = Mat::identity(STATE_DIM);
    f[(IX, IVX)] = T::one();
    f[(IY, IVY)] = T::one();
    f
}

/// Constant-velocity prediction one step ahead.
pub fn kalman_predict<T: Real>(tracks: &TrackSet<T>, config: &TrackerConfig) -> TrackSet<T> {
    let f = transition::<T>();
    let ft = f.transpose();
    let q = Mat::diag(&[T::lit(config.process_noise); STATE_DIM]);
    let tracks_out = tracks
        .tracks
        .iter()
        .map(|t| {
            let mut state = t.state;
            state[IX] += state[IVX];
            state[IY] += state[IVY];
            let covariance = f.mul(&t.covariance).mul(&ft).add(&q).symmetrized();
            Track {
                state,
                covariance,
                ..t.clone()
            }
        })
        .collect();
    TrackSet {
        agent_id: tracks.agent_id,
        timestamp: tracks.timestamp + 1,
        tracks: tracks_out,
        next_id: tracks.next_id,
    }
}

/// IoU affinity + maximum-weight matching, gated at `iou_min`.
pub fn associate<T: Real>(predicted: &TrackSet<T>, detections: &[DetectionBox<T>], iou_min: T) -> AssociationMatrix {
    let rows = predicted.tracks.len();
    let cols = detections.len();
    let mut out = AssociationMatrix::zeros(rows, cols);
    if rows == 0 || cols == 0 {
        return out;
    }
    let det_boxes: Vec<RotatedBox<T>> = detections.iter().map(|d| d.to_box()).collect();
    let mut affinity = Vec::with_capacity(rows * cols);
    for t in &predicted.tracks {
        let tb = t.to_box();
        affinity.extend(det_boxes.iter().map(|d| rotated_iou(&tb, d)));
    }
    for (r, m) in max_weight_matching(&affinity, rows, cols).into_iter().enumerate() {
        if let Some(c) = m {
            let iou = affinity[r * cols + c];
            if iou > T::zero() && iou >= iou_min {
                out.values[r * cols + c] = true;
            }
        }
    }
    out
}

fn measurement<T: Real>(d: &DetectionBox<T>) -> [T; MEAS_DIM] {
    let (s, c) = d.heading.sin_cos();
    [d.confidence, d.x, d.y, d.h, d.w, c, s]
}

fn initial_covariance<T: Real>(config: &TrackerConfig) -> Mat<T> {
    let mut d = [T::lit(config.initial_variance); STATE_DIM];
    d[IVX] = T::lit(config.initial_velocity_variance);
    d[IVY] = T::lit(config.initial_velocity_variance);
    Mat::diag(&d)
}

fn measurement_update<T: Real>(track: &Track<T>, z: &[T; MEAS_DIM], config: &TrackerConfig) -> Track<T> {
    let mut h = Mat::zeros(MEAS_DIM, STATE_DIM);
    for i in 0..MEAS_DIM {
        h[(i, i)] = T::one();
    }
    let ht = h.transpose();
    let r = Mat::diag(&[T::lit(config.measurement_noise); MEAS_DIM]);
    let p = &track.covariance;
    let s = h.mul(p).mul(&ht).add(&r);
    let Some(s_inv) = s.inverse() else {
        return track.clone();
    };
    let k = p.mul(&ht).mul(&s_inv);
    let innovation: Vec<T> = (0..MEAS_DIM).map(|i| z[i] - track.state[i]).collect();
    let correction = k.mul_vec(&innovation);
    let mut state = track.state;
    for (s, c) in state.iter_mut().zip(&correction) {
        *s += *c;
    }
    // Joseph form keeps the covariance symmetric positive semi-definite.
    let i_kh = Mat::identity(STATE_DIM).sub(&k.mul(&h));
    let covariance = i_kh
        .mul(p)
        .mul(&i_kh.transpose())
        .add(&k.mul(&r).mul(&k.transpose()))
        .symmetrized();
    Track {
        track_id: track.track_id,
        state,
        covariance,
        age: track.age + 1,
        misses: 0,
    }
}

/// Measurement update, death of stale tracks and birth of new ones.
pub fn kalman_update<T: Real>(
    tracks: &TrackSet<T>,
    assoc: &AssociationMatrix,
    detections: &[DetectionBox<T>],
    death_after: u32,
    config: &TrackerConfig,
) -> Result<TrackSet<T>> {
    if assoc.rows != tracks.tracks.len() || assoc.cols != detections.len() {
        return Err(Error::Shape {
            expected: format!("{}x{}", tracks.tracks.len(), detections.len()),
            actual: format!("{}x{}", assoc.rows, assoc.cols),
        });
    }
    if !assoc.is_one_to_one() {
        return Err(Error::Association);
    }
    let mut out = TrackSet {
        agent_id: tracks.agent_id,
        timestamp: tracks.timestamp,
        tracks: Vec::with_capacity(tracks.tracks.len() + detections.len()),
        next_id: tracks.next_id,
    };
    let mut det_used = vec![false; detections.len()];
    for (r, t) in tracks.tracks.iter().enumerate() {
        match assoc.row_match(r) {
            Some(c) => {
                det_used[c] = true;
                out.tracks
                    .push(measurement_update(t, &measurement(&detections[c]), config));
            }
            None => {
                let misses = t.misses + 1;
                if misses <= death_after {
                    out.tracks.push(Track {
                        misses,
                        age: t.age + 1,
                        ..t.clone()
                    });
                }
            }
        }
    }
    for (c, d) in detections.iter().enumerate() {
        if det_used[c] {
            continue;
        }
        let z = measurement(d);
        let mut state = [T::zero(); STATE_DIM];
        state[..MEAS_DIM].copy_from_slice(&z);
        out.tracks.push(Track {
            track_id: out.next_id,
            state,
            covariance: initial_covariance(config),
            age: 1,
            misses: 0,
        });
        out.next_id += 1;
    }
    Ok(out)
}

/// One agent's tracker: owns its track set and runs predict, associate and
/// update per frame.
#[derive(Clone, Debug)]
pub struct Tracker<T> {
    pub config: TrackerConfig,
    pub tracks: TrackSet<T>,
}

impl<T: Real> Tracker<T> {
    pub fn new(agent_id: u32, config: TrackerConfig) -> Self {
        Self {
            config,
            tracks: TrackSet::new(agent_id, 0),
        }
    }

    pub fn step(&mut self, timestamp: usize, detections: &[DetectionBox<T>]) -> Result<&TrackSet<T>> {
        let mut predicted = kalman_predict(&self.tracks, &self.config);
        predicted.timestamp = timestamp;
        let assoc = associate(&predicted, detections, T::lit(self.config.iou_min));
        self.tracks = kalman_update(&predicted, &assoc, detections, self.config.death_after, &self.config)?;
        Ok(&self.tracks)
    }
}

/// Write `agent,timestamp,track_id,x,y,h,w,alpha,vx,vy` rows for the tracks
/// refreshed at each timestamp.
pub fn write_tracks_csv<T: Real, W: Write>(history: &[TrackSet<T>], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record([
        "agent",
        "timestamp",
        "track_id",
        "x",
        "y",
        "h",
        "w",
        "alpha",
        "vx",
        "vy",
    ])?;
    for set in history {
        for t in set.active() {
            wtr.write_record(&[
                set.agent_id.to_string(),
                set.timestamp.to_string(),
                t.track_id.to_string(),
                format!("{:.6}", t.x().as_f64()),
                format!("{:.6}", t.y().as_f64()),
                format!("{:.6}", t.state[3].as_f64()),
                format!("{:.6}", t.state[4].as_f64()),
                format!("{:.6}", t.heading().as_f64()),
                format!("{:.6}", t.vx().as_f64()),
                format!("{:.6}", t.vy().as_f64()),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}
