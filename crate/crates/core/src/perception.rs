//! Single-agent perception: observation -> BEV features -> dense heatmap ->
//! sparse detections, plus the spatial confidence map.
//!
//! The encoder is a deterministic kernel-deposition stand-in for a learned
//! backbone. Every hit deposits a Gaussian bump (truncated at
//! `kernel_radius` cells) along a fixed non-negative channel pattern chosen
//! by the hit's heading bucket, so the direction of a feature vector encodes
//! orientation and its norm encodes evidence.

use std::cmp::Ordering;
use std::f64::consts::{PI, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::geometry::{rotated_iou, RotatedBox};
use crate::scalar::Real;
use crate::scenario::{Observation, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptionConfig {
    pub channels: usize,
    pub heading_buckets: usize,
    pub kernel_radius: usize,
    pub kernel_sigma: f64,
    /// Energy at which confidence reaches `1 - 1/e`.
    pub confidence_scale: f64,
    /// Half-size of the window used to refine box centers.
    pub refine_radius: usize,
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            heading_buckets: 16,
            kernel_radius: 2,
            kernel_sigma: 1.0,
            confidence_scale: 1.0,
            refine_radius: 2,
            conf_threshold: 0.5,
            nms_iou: 0.1,
        }
    }
}

/// Dense `H x W x C` feature grid, row-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub agent_id: u32,
    pub timestamp: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<T>,
}

impl<T: Real> FeatureMap<T> {
    pub fn zeros(agent_id: u32, timestamp: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            agent_id,
            timestamp,
            height,
            width,
            channels,
            values: vec![T::zero(); height * width * channels],
        }
    }

    #[inline]
    pub fn cell(&self, row: usize, col: usize) -> &[T] {
        let o = (row * self.width + col) * self.channels;
        &self.values[o..o + self.channels]
    }

    #[inline]
    pub fn cell_mut(&mut self, row: usize, col: usize) -> &mut [T] {
        let o = (row * self.width + col) * self.channels;
        &mut self.values[o..o + self.channels]
    }

    #[inline]
    pub fn cell_at(&self, idx: usize) -> &[T] {
        &self.values[idx * self.channels..(idx + 1) * self.channels]
    }

    pub fn energy(&self, row: usize, col: usize) -> T {
        l2(self.cell(row, col))
    }

    pub fn is_zero_cell(&self, idx: usize) -> bool {
        self.cell_at(idx).iter().all(|v| *v == T::zero())
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.height, self.width, self.channels)
    }

    pub fn scaled(&self, s: T) -> Self {
        Self {
            values: self.values.iter().map(|v| *v * s).collect(),
            ..self.clone()
        }
    }

    pub fn total(&self) -> T {
        self.values.iter().copied().sum()
    }
}

#[inline]
pub(crate) fn l2<T: Real>(v: &[T]) -> T {
    v.iter().map(|x| *x * *x).sum::<T>().sqrt()
}

/// Channel layout of [`DenseHeatmap`] entries.
pub const HEATMAP_CHANNELS: usize = 7;

/// Per-cell rotated box prediction `(c, x, y, h, w, cos, sin)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseHeatmap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<[T; HEATMAP_CHANNELS]>,
}

impl<T: Real> DenseHeatmap<T> {
    pub fn at(&self, row: usize, col: usize) -> &[T; HEATMAP_CHANNELS] {
        &self.values[row * self.width + col]
    }

    pub fn confidence(&self, row: usize, col: usize) -> T {
        self.at(row, col)[0]
    }

    fn box_at(&self, row: usize, col: usize) -> DetectionBox<T> {
        let v = self.at(row, col);
        DetectionBox {
            confidence: v[0],
            x: v[1],
            y: v[2],
            h: v[3],
            w: v[4],
            heading: v[6].atan2(v[5]),
            cell: (row, col),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionBox<T> {
    pub confidence: T,
    pub x: T,
    pub y: T,
    pub h: T,
    pub w: T,
    pub heading: T,
    /// Heatmap cell the box was decoded from.
    pub cell: (usize, usize),
}

impl<T: Real> DetectionBox<T> {
    pub fn to_box(&self) -> RotatedBox<T> {
        RotatedBox::new(self.x, self.y, self.h, self.w, self.heading)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> ConfidenceMap<T> {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![T::zero(); height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }
}

/// Encoder/decoder pair bound to one grid geometry.
#[derive(Clone, Debug)]
pub struct Perception<T> {
    pub config: PerceptionConfig,
    height: usize,
    width: usize,
    cell_size: T,
    box_length: T,
    box_width: T,
    /// Sparse non-negative unit vector per heading bucket.
    patterns: Vec<Vec<(usize, T)>>,
    /// `(d_row, d_col, weight)` deposition kernel.
    kernel: Vec<(i64, i64, T)>,
}

const PATTERN_SEED: u64 = 0x00C0_FFEE;

impl<T: Real> Perception<T> {
    pub fn new(world: &WorldConfig, config: PerceptionConfig) -> Self {
        let c = config.channels.max(1);
        let b = config.heading_buckets.max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(PATTERN_SEED);
        let patterns = (0..b)
            .map(|k| {
                let support: Vec<usize> = if c >= b {
                    (k..c).step_by(b).collect()
                } else {
                    (0..c).collect()
                };
                let raw: Vec<f64> = support.iter().map(|_| rng.gen_range(0.5..1.0)).collect();
                let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
                support
                    .into_iter()
                    .zip(raw)
                    .map(|(ch, v)| (ch, T::lit(v / norm)))
                    .collect()
            })
            .collect();
        let r = config.kernel_radius as i64;
        let s2 = 2.0 * config.kernel_sigma * config.kernel_sigma;
        let mut kernel = Vec::new();
        for dr in -r..=r {
            for dc in -r..=r {
                let d2 = (dr * dr + dc * dc) as f64;
                if d2 <= (r * r) as f64 {
                    kernel.push((dr, dc, T::lit((-d2 / s2).exp())));
                }
            }
        }
        Self {
            config,
            height: world.grid_height,
            width: world.grid_width,
            cell_size: T::lit(world.cell_size),
            box_length: T::lit(world.object_length),
            box_width: T::lit(world.object_width),
            patterns,
            kernel,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.config.channels
    }

    pub fn cell_size(&self) -> T {
        self.cell_size
    }

    pub fn bucket_width(&self) -> f64 {
        TAU / self.patterns.len() as f64
    }

    pub fn heading_bucket(&self, heading: f64) -> usize {
        let b = self.patterns.len();
        let k = ((heading + PI) / self.bucket_width()).floor();
        (k.max(0.0) as usize).min(b - 1)
    }

    pub fn bucket_center(&self, bucket: usize) -> f64 {
        -PI + (bucket as f64 + 0.5) * self.bucket_width()
    }

    pub fn pattern(&self, bucket: usize) -> &[(usize, T)] {
        &self.patterns[bucket]
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (T, T) {
        let half = T::lit(0.5);
        (
            (T::lit(col as f64) + half) * self.cell_size,
            (T::lit(row as f64) + half) * self.cell_size,
        )
    }

    /// Deterministic stand-in for the feature extractor.
    pub fn encode(&self, obs: &Observation) -> Result<FeatureMap<T>> {
        if obs.height != self.height || obs.width != self.width || obs.visible.len() != self.height * self.width {
            return Err(shape_err(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", obs.height, obs.width),
            ));
        }
        let mut feat = FeatureMap::zeros(
            obs.agent_id,
            obs.timestamp,
            self.height,
            self.width,
            self.config.channels,
        );
        for hit in &obs.hits {
            let pattern = &self.patterns[self.heading_bucket(hit.heading)];
            let s = T::lit(hit.strength);
            for &(dr, dc, k) in &self.kernel {
                let r = hit.row as i64 + dr;
                let c = hit.col as i64 + dc;
                if r < 0 || c < 0 || r as usize >= self.height || c as usize >= self.width {
                    continue;
                }
                let cell = feat.cell_mut(r as usize, c as usize);
                let amp = s * k;
                for &(ch, u) in pattern {
                    cell[ch] += amp * u;
                }
            }
        }
        for (idx, vis) in obs.visible.iter().enumerate() {
            if !vis {
                let c = self.config.channels;
                feat.values[idx * c..(idx + 1) * c].fill(T::zero());
            }
        }
        Ok(feat)
    }

    /// Heading bucket whose pattern has the largest inner product with `v`.
    pub fn best_bucket(&self, v: &[T]) -> usize {
        let mut best = 0;
        let mut best_dot = T::neg_infinity();
        for (k, p) in self.patterns.iter().enumerate() {
            let dot: T = p.iter().map(|&(ch, u)| v[ch] * u).sum();
            if dot > best_dot {
                best_dot = dot;
                best = k;
            }
        }
        best
    }

    /// Saturating map from feature energy to confidence.
    pub fn confidence_of(&self, energy: T) -> T {
        let c = T::one() - (-energy / T::lit(self.config.confidence_scale)).exp();
        c.max(T::zero()).min(T::one())
    }

    /// Dense box prediction for every cell.
    pub fn decode(&self, feat: &FeatureMap<T>) -> DenseHeatmap<T> {
        let (h, w) = (feat.height, feat.width);
        let energy: Vec<T> = (0..h * w).map(|i| l2(feat.cell_at(i))).collect();
        let rr = self.config.refine_radius as i64;
        let mut values = Vec::with_capacity(h * w);
        for row in 0..h {
            for col in 0..w {
                let idx = row * w + col;
                let e = energy[idx];
                let (cx, cy) = self.cell_center(row, col);
                if e <= T::zero() {
                    values.push([T::zero(), cx, cy, self.box_length, self.box_width, T::one(), T::zero()]);
                    continue;
                }
                let bucket = self.best_bucket(feat.cell_at(idx));
                let (s, c) = self.bucket_center(bucket).sin_cos();
                let (mut sx, mut sy, mut sw) = (T::zero(), T::zero(), T::zero());
                for dr in -rr..=rr {
                    for dc in -rr..=rr {
                        let r = row as i64 + dr;
                        let q = col as i64 + dc;
                        if r < 0 || q < 0 || r as usize >= h || q as usize >= w {
                            continue;
                        }
                        let ew = energy[r as usize * w + q as usize];
                        if ew > T::zero() {
                            let (px, py) = self.cell_center(r as usize, q as usize);
                            sx += ew * px;
                            sy += ew * py;
                            sw += ew;
                        }
                    }
                }
                values.push([
                    self.confidence_of(e),
                    sx / sw,
                    sy / sw,
                    self.box_length,
                    self.box_width,
                    T::lit(c),
                    T::lit(s),
                ]);
            }
        }
        DenseHeatmap {
            height: h,
            width: w,
            values,
        }
    }

    /// Decode and suppress with the configured thresholds.
    pub fn detect(&self, feat: &FeatureMap<T>) -> (DenseHeatmap<T>, Vec<DetectionBox<T>>) {
        let heat = self.decode(feat);
        let dets = nms(&heat, T::lit(self.config.conf_threshold), T::lit(self.config.nms_iou));
        (heat, dets)
    }
}

fn by_confidence<T: Real>(a: &DetectionBox<T>, b: &DetectionBox<T>) -> Ordering {
    b.confidence
        .partial_cmp(&a.confidence)
        .unwrap_or(Ordering::Equal)
        .then(a.cell.cmp(&b.cell))
}

/// Greedy non-maximum suppression over cells whose confidence exceeds
/// `conf_threshold`. Candidates are visited by descending confidence, ties
/// by `(row, col)`; a box is kept when its IoU with every kept box is below
/// `iou_threshold`.
pub fn nms<T: Real>(heatmap: &DenseHeatmap<T>, conf_threshold: T, iou_threshold: T) -> Vec<DetectionBox<T>> {
    let mut candidates: Vec<DetectionBox<T>> = Vec::new();
    for row in 0..heatmap.height {
        for col in 0..heatmap.width {
            if heatmap.confidence(row, col) > conf_threshold {
                candidates.push(heatmap.box_at(row, col));
            }
        }
    }
    candidates.sort_by(by_confidence);
    let mut kept: Vec<(DetectionBox<T>, RotatedBox<T>)> = Vec::new();
    for cand in candidates {
        let b = cand.to_box();
        if kept.iter().all(|(_, k)| rotated_iou(&b, k) < iou_threshold) {
            kept.push((cand, b));
        }
    }
    kept.into_iter().map(|(d, _)| d).collect()
}

/// Projection of the heatmap onto its confidence channel.
pub fn confidence_map<T: Real>(heatmap: &DenseHeatmap<T>) -> ConfidenceMap<T> {
    ConfidenceMap {
        height: heatmap.height,
        width: heatmap.width,
        values: heatmap.values.iter().map(|v| v[0]).collect(),
    }
}

/// Rebuild a heatmap that contains only the given boxes.
pub fn heatmap_from_boxes<T: Real>(height: usize, width: usize, boxes: &[DetectionBox<T>]) -> DenseHeatmap<T> {
    let mut values = vec![[T::zero(), T::zero(), T::zero(), T::one(), T::one(), T::one(), T::zero()]; height * width];
    for b in boxes {
        let (s, c) = b.heading.sin_cos();
        values[b.cell.0 * width + b.cell.1] = [b.confidence, b.x, b.y, b.h, b.w, c, s];
    }
    DenseHeatmap { height, width, values }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{sense, AgentPose, GroundTruthFrame, HitPoint, ObjectState};
    use rand::Rng;

    fn world(h: usize, w: usize) -> WorldConfig {
        WorldConfig {
            grid_height: h,
            grid_width: w,
            clutter_rate: 0.0,
            ..WorldConfig::default()
        }
    }

    fn obs_with(h: usize, w: usize, hits: Vec<HitPoint>) -> Observation {
        Observation {
            agent_id: 0,
            timestamp: 0,
            height: h,
            width: w,
            visible: vec![true; h * w],
            hits,
        }
    }

    fn hit(row: usize, col: usize, strength: f64, heading: f64) -> HitPoint {
        HitPoint {
            row,
            col,
            strength,
            heading,
        }
    }

    #[test]
    fn empty_observation_encodes_to_zero() {
        let p = Perception::<f64>::new(&world(8, 8), PerceptionConfig::default());
        let f = p.encode(&obs_with(8, 8, vec![])).unwrap();
        assert!(f.values.iter().all(|v| *v == 0.0));
        let heat = p.decode(&f);
        assert!(confidence_map(&heat).values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let p = Perception::<f64>::new(&world(8, 8), PerceptionConfig::default());
        assert!(p.encode(&obs_with(8, 9, vec![])).is_err());
    }

    #[test]
    fn single_hit_peaks_at_source() {
        let p = Perception::<f64>::new(&world(9, 9), PerceptionConfig::default());
        let f = p.encode(&obs_with(9, 9, vec![hit(4, 5, 1.0, 0.3)])).unwrap();
        for ch in 0..f.channels {
            let src = f.cell(4, 5)[ch];
            for r in 0..9 {
                for c in 0..9 {
                    assert!(f.cell(r, c)[ch] <= src);
                }
            }
        }
        assert!(f.energy(4, 5) > 0.0);
    }

    #[test]
    fn deposition_is_linear() {
        let p = Perception::<f64>::new(&world(10, 10), PerceptionConfig::default());
        let a = hit(3, 3, 0.7, 1.0);
        let b = hit(4, 5, 1.0, -2.0);
        let fa = p.encode(&obs_with(10, 10, vec![a])).unwrap();
        let fb = p.encode(&obs_with(10, 10, vec![b])).unwrap();
        let fab = p.encode(&obs_with(10, 10, vec![a, b])).unwrap();
        for i in 0..fab.values.len() {
            assert!((fab.values[i] - fa.values[i] - fb.values[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn invisible_cells_are_zero_and_features_non_negative() {
        let p = Perception::<f64>::new(&world(10, 10), PerceptionConfig::default());
        let mut obs = obs_with(10, 10, vec![hit(5, 5, 1.0, 0.0)]);
        obs.visible[5 * 10 + 6] = false;
        let f = p.encode(&obs).unwrap();
        assert!(f.cell(5, 6).iter().all(|v| *v == 0.0));
        assert!(f.values.iter().all(|v| *v >= 0.0 && v.is_finite()));
    }

    fn single_object_scene(heading: f64) -> (WorldConfig, Observation, ObjectState) {
        let w = world(24, 24);
        let o = ObjectState {
            id: 0,
            x: 12.3,
            y: 11.6,
            h: w.object_length,
            w: w.object_width,
            heading,
            vx: 0.0,
            vy: 0.0,
        };
        let frame = GroundTruthFrame {
            timestamp: 0,
            objects: vec![o.clone()],
        };
        let pose = AgentPose {
            agent_id: 0,
            x: 2.0,
            y: 2.0,
            sensing_range: 50.0,
            pose_error_std: 0.0,
        };
        let obs = sense(&frame, &pose, &w, 0);
        (w, obs, o)
    }

    #[test]
    fn decoded_peak_beats_neighbors_and_recovers_heading() {
        for k in 0..12 {
            let heading = -PI + 0.1 + k as f64 * 0.5;
            let (w, obs, o) = single_object_scene(heading);
            let p = Perception::<f64>::new(&w, PerceptionConfig::default());
            let heat = p.decode(&p.encode(&obs).unwrap());
            let conf = confidence_map(&heat);
            let (mut best, mut at) = (-1.0, (0, 0));
            for r in 0..24 {
                for c in 0..24 {
                    if conf.get(r, c) > best {
                        best = conf.get(r, c);
                        at = (r, c);
                    }
                }
            }
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (r, c) = ((at.0 as i64 + dr) as usize, (at.1 as i64 + dc) as usize);
                    assert!(conf.get(r, c) <= best);
                }
            }
            let v = heat.at(at.0, at.1);
            assert!((v[5] * v[5] + v[6] * v[6] - 1.0).abs() < 1e-6);
            let decoded = v[6].atan2(v[5]);
            let diff = crate::geometry::wrap_angle(decoded - o.heading).abs();
            assert!(diff <= p.bucket_width(), "heading error {diff}");
        }
    }

    #[test]
    fn object_detected_near_truth() {
        let (w, obs, o) = single_object_scene(0.4);
        let p = Perception::<f64>::new(&w, PerceptionConfig::default());
        let (_, dets) = p.detect(&p.encode(&obs).unwrap());
        assert_eq!(dets.len(), 1, "{dets:?}");
        let iou = rotated_iou(&dets[0].to_box(), &o.to_box());
        assert!(iou > 0.5, "iou {iou}");
    }

    #[test]
    fn nms_empty_and_duplicate() {
        let heat = DenseHeatmap::<f64> {
            height: 2,
            width: 2,
            values: vec![[0.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.0]; 4],
        };
        assert!(nms(&heat, 0.1, 0.5).is_empty());
        let mut heat = heat;
        heat.values[0] = [0.8, 5.0, 5.0, 4.0, 2.0, 1.0, 0.0];
        heat.values[3] = [0.9, 5.0, 5.0, 4.0, 2.0, 1.0, 0.0];
        let out = nms(&heat, 0.1, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].confidence, 0.9);
        assert_eq!(out[0].cell, (1, 1));
    }

    #[test]
    fn nms_tie_breaks_lexicographically() {
        let mut heat = DenseHeatmap::<f64> {
            height: 1,
            width: 3,
            values: vec![[0.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.0]; 3],
        };
        heat.values[2] = [0.7, 5.0, 5.0, 4.0, 2.0, 1.0, 0.0];
        heat.values[1] = [0.7, 5.0, 5.0, 4.0, 2.0, 1.0, 0.0];
        let out = nms(&heat, 0.1, 0.5);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].cell, (0, 1));
    }

    #[test]
    fn nms_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut heat = DenseHeatmap::<f64> {
                height: 6,
                width: 6,
                values: vec![[0.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.0]; 36],
            };
            for v in heat.values.iter_mut() {
                let a: f64 = rng.gen_range(-PI..PI);
                *v = [
                    rng.gen_range(0.0..1.0),
                    rng.gen_range(0.0..8.0),
                    rng.gen_range(0.0..8.0),
                    4.0,
                    2.0,
                    a.cos(),
                    a.sin(),
                ];
            }
            let first = nms(&heat, 0.2, 0.3);
            let again = nms(&heatmap_from_boxes(6, 6, &first), 0.2, 0.3);
            assert_eq!(first.len(), again.len());
            for (a, b) in first.iter().zip(&again) {
                assert_eq!(a.cell, b.cell);
                assert!((a.x - b.x).abs() < 1e-12 && (a.heading - b.heading).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn confidence_is_monotone_in_scale() {
        let (w, obs, _) = single_object_scene(1.0);
        let p = Perception::<f64>::new(&w, PerceptionConfig::default());
        let f = p.encode(&obs).unwrap();
        let base = confidence_map(&p.decode(&f));
        let up = confidence_map(&p.decode(&f.scaled(1.7)));
        for (a, b) in base.values.iter().zip(&up.values) {
            assert!(b >= a);
        }
        let max_heat = p.decode(&f).values.iter().map(|v| v[0]).fold(0.0, f64::max);
        let max_map = base.values.iter().copied().fold(0.0, f64::max);
        assert_eq!(max_heat, max_map);
    }

    #[test]
    fn object_cells_outshine_background() {
        use crate::scenario::{generate_world, place_agents};
        let mut wins = 0;
        for seed in 0..20 {
            let w = WorldConfig {
                seed,
                clutter_rate: 0.02,
                ..WorldConfig::default()
            };
            let frames = generate_world(&w).unwrap();
            let pose = &place_agents(&w)[0];
            let obs = sense(&frames[0], pose, &w, seed);
            let p = Perception::<f64>::new(&w, PerceptionConfig::default());
            let conf = confidence_map(&p.decode(&p.encode(&obs).unwrap()));
            let object_cells: Vec<(usize, usize)> = frames[0]
                .objects
                .iter()
                .flat_map(|o| w.footprint(&o.to_box()))
                .filter(|(r, c)| obs.is_visible(*r, *c))
                .collect();
            if object_cells.is_empty() {
                continue;
            }
            let mut bg: Vec<f64> = conf.values.clone();
            bg.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = bg[bg.len() / 2];
            let mean_obj = object_cells.iter().map(|(r, c)| conf.get(*r, *c)).sum::<f64>() / object_cells.len() as f64;
            if mean_obj > median {
                wins += 1;
            }
            assert!(object_cells.iter().all(|(r, c)| conf.get(*r, *c) > median));
        }
        assert!(wins > 0);
    }

    #[test]
    fn runs_in_single_precision() {
        let (w, obs, o) = single_object_scene(0.4);
        let p = Perception::<f32>::new(&w, PerceptionConfig::default());
        let (_, dets) = p.detect(&p.encode(&obs).unwrap());
        assert_eq!(dets.len(), 1);
        let gt = RotatedBox::<f32>::new(o.x as f32, o.y as f32, o.h as f32, o.w as f32, o.heading as f32);
        assert!(rotated_iou(&dets[0].to_box(), &gt) > 0.5);
    }
}
