//! Turning received messages back into features: decompression, motion
//! compensation of older content, and max fusion.

use crate::compression::{Codebook, SparseFeatureMap};
use crate::error::{shape_err, Error, Result};
use crate::exchange::{unpack, Payload, PragmaticMessage};
use crate::geometry::RotatedBox;
use crate::perception::FeatureMap;
use crate::scalar::Real;
use crate::scenario::WorldConfig;
use crate::tracker::{kalman_predict, TrackSet, TrackerConfig};

pub const SOURCE_EGO: u64 = 1;
pub const SOURCE_HISTORY: u64 = 1 << 1;

/// Provenance bit of a neighbor's contribution.
pub fn neighbor_source(agent_id: u32) -> u64 {
    1 << (2 + agent_id.min(61))
}

/// Per-cell integer displacement `(d_row, d_col)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<(i32, i32)>,
}

impl FlowMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![(0, 0); height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> (i32, i32) {
        self.values[row * self.width + col]
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|v| *v == (0, 0))
    }
}

/// A feature map plus, per cell, which sources contributed to it. Cells
/// with no source are absent.
#[derive(Clone, Debug, PartialEq)]
pub struct CollabFeature<T> {
    pub feature: FeatureMap<T>,
    pub provenance: Vec<u64>,
}

impl<T: Real> CollabFeature<T> {
    pub fn empty(agent_id: u32, timestamp: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            feature: FeatureMap::zeros(agent_id, timestamp, height, width, channels),
            provenance: vec![0; height * width],
        }
    }

    pub fn is_present(&self, idx: usize) -> bool {
        self.provenance[idx] != 0
    }

    pub fn present_cells(&self) -> usize {
        self.provenance.iter().filter(|p| **p != 0).count()
    }

    fn merge_cell(&mut self, idx: usize, v: &[T], source: u64) {
        let c = self.feature.channels;
        let dst = &mut self.feature.values[idx * c..(idx + 1) * c];
        if self.provenance[idx] == 0 {
            dst.copy_from_slice(v);
        } else {
            for (d, s) in dst.iter_mut().zip(v) {
                if *s > *d {
                    *d = *s;
                }
            }
        }
        self.provenance[idx] |= source;
    }

    /// Cell-wise maximum with `other` where either is present.
    pub fn merge(&mut self, other: &Self) {
        for idx in 0..other.provenance.len() {
            if other.provenance[idx] != 0 {
                let c = other.feature.channels;
                self.merge_cell(
                    idx,
                    &other.feature.values[idx * c..(idx + 1) * c],
                    other.provenance[idx],
                );
            }
        }
    }

    /// Every present cell multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            feature: self.feature.scaled(factor),
            provenance: self.provenance.clone(),
        }
    }
}

/// Reconstructed features of a delivered message. Raw-feature messages pass
/// through; code messages must match the local codebook version.
pub fn decompress<T: Real>(
    msg: &PragmaticMessage,
    codebook: &Codebook<T>,
    height: usize,
    width: usize,
) -> Result<SparseFeatureMap<T>> {
    match &msg.payload {
        Payload::Raw { channels, values } => {
            let mut out = SparseFeatureMap::empty(msg.sender, msg.timestamp, height, width, *channels);
            for (k, &(r, c)) in msg.cells.iter().enumerate() {
                let (row, col) = (r as usize, c as usize);
                if row >= height || col >= width {
                    return Err(Error::CellOutOfGrid {
                        row,
                        col,
                        height,
                        width,
                    });
                }
                let v = values[k * channels..(k + 1) * channels]
                    .iter()
                    .map(|x| T::lit(*x as f64))
                    .collect();
                out.cells.insert((row, col), v);
            }
            Ok(out)
        }
        Payload::Codes { .. } => {
            if msg.codebook_version != codebook.version_id {
                return Err(Error::CodebookVersion {
                    message: msg.codebook_version,
                    local: codebook.version_id,
                });
            }
            let grid = unpack(msg, height, width)?;
            let mut out = SparseFeatureMap::empty(msg.sender, msg.timestamp, height, width, codebook.dim());
            for (cell, group) in grid.entries {
                out.cells.insert(cell, codebook.reconstruct(&group)?);
            }
            Ok(out)
        }
    }
}

/// Predicted displacement over `steps` steps for every track, written on the
/// cells of its current box grown by `margin` cells on each side (features
/// spread a little beyond the object). Where boxes overlap the larger
/// displacement wins.
pub fn estimate_flow<T: Real>(
    prev: &TrackSet<T>,
    world: &WorldConfig,
    tracker: &TrackerConfig,
    steps: usize,
    margin: usize,
) -> FlowMap {
    motion(prev, world, tracker, 0, steps, margin, 0).0
}

/// Flow and support for content captured `age` steps before the step that
/// follows `prev`. Each footprint is moved back to where its track was at
/// capture time and carries the displacement accumulated since. Only tracks
/// at least `min_age` steps old and matched on their last step count; cells
/// outside their footprints have no trustworthy motion and are unsupported.
pub fn keyframe_motion<T: Real>(
    prev: &TrackSet<T>,
    world: &WorldConfig,
    tracker: &TrackerConfig,
    age: usize,
    margin: usize,
    min_age: u32,
) -> (FlowMap, Vec<bool>) {
    motion(prev, world, tracker, age.saturating_sub(1), age, margin, min_age)
}

fn motion<T: Real>(
    prev: &TrackSet<T>,
    world: &WorldConfig,
    tracker: &TrackerConfig,
    back: usize,
    steps: usize,
    margin: usize,
    min_age: u32,
) -> (FlowMap, Vec<bool>) {
    let mut flow = FlowMap::zeros(world.grid_height, world.grid_width);
    let mut support = vec![false; flow.values.len()];
    let predicted = kalman_predict(prev, tracker);
    let cs = world.cell_size;
    let grow = 2.0 * margin as f64 * cs;
    let mut nearest = vec![f64::INFINITY; flow.values.len()];
    for (old, new) in prev.tracks.iter().zip(&predicted.tracks) {
        if old.age < min_age || (min_age > 0 && old.misses > 0) {
            continue;
        }
        let step_dx = (new.x() - old.x()).as_f64();
        let step_dy = (new.y() - old.y()).as_f64();
        let d = (
            (steps as f64 * step_dy / cs).round() as i32,
            (steps as f64 * step_dx / cs).round() as i32,
        );
        let bx = old.to_box();
        let footprint = RotatedBox::new(
            old.x().as_f64() - back as f64 * step_dx,
            old.y().as_f64() - back as f64 * step_dy,
            bx.length.as_f64() + grow,
            bx.width.as_f64() + grow,
            bx.heading.as_f64(),
        );
        for (r, c) in world.footprint(&footprint) {
            let idx = r * flow.width + c;
            let (cx, cy) = world.cell_center(r, c);
            let dist = (cx - footprint.x).hypot(cy - footprint.y);
            if !support[idx] || dist < nearest[idx] {
                nearest[idx] = dist;
                flow.values[idx] = d;
            }
            support[idx] = true;
        }
    }
    (flow, support)
}

impl<T: Real> CollabFeature<T> {
    /// Drop every cell outside `keep`.
    pub fn restricted(&self, keep: &[bool]) -> Self {
        let mut out = self.clone();
        let c = out.feature.channels;
        for (idx, k) in keep.iter().enumerate() {
            if !k && out.provenance[idx] != 0 {
                out.provenance[idx] = 0;
                out.feature.values[idx * c..(idx + 1) * c].fill(T::zero());
            }
        }
        out
    }
}

/// Move every present cell by its flow. Cells leaving the grid vanish and
/// collisions keep the element-wise maximum.
pub fn warp<T: Real>(hist: &CollabFeature<T>, flow: &FlowMap) -> Result<CollabFeature<T>> {
    let f = &hist.feature;
    if flow.height != f.height || flow.width != f.width {
        return Err(shape_err(f.shape_string(), format!("{}x{}", flow.height, flow.width)));
    }
    let mut out = CollabFeature::empty(f.agent_id, f.timestamp + 1, f.height, f.width, f.channels);
    for idx in 0..f.height * f.width {
        if !hist.is_present(idx) {
            continue;
        }
        let (dr, dc) = flow.values[idx];
        let row = (idx / f.width) as i64 + dr as i64;
        let col = (idx % f.width) as i64 + dc as i64;
        if row < 0 || col < 0 || row >= f.height as i64 || col >= f.width as i64 {
            continue;
        }
        out.merge_cell(row as usize * f.width + col as usize, f.cell_at(idx), SOURCE_HISTORY);
    }
    Ok(out)
}

/// Same flow applied to a sparse map.
pub fn warp_sparse<T: Real>(z: &SparseFeatureMap<T>, flow: &FlowMap) -> Result<SparseFeatureMap<T>> {
    if flow.height != z.height || flow.width != z.width {
        return Err(shape_err(
            format!("{}x{}", z.height, z.width),
            format!("{}x{}", flow.height, flow.width),
        ));
    }
    let mut out = SparseFeatureMap::empty(z.agent_id, z.timestamp, z.height, z.width, z.channels);
    for (&(r, c), v) in &z.cells {
        let (dr, dc) = flow.get(r, c);
        let row = r as i64 + dr as i64;
        let col = c as i64 + dc as i64;
        if row < 0 || col < 0 || row >= z.height as i64 || col >= z.width as i64 {
            continue;
        }
        out.cells
            .entry((row as usize, col as usize))
            .and_modify(|e: &mut Vec<T>| {
                for (d, s) in e.iter_mut().zip(v) {
                    if *s > *d {
                        *d = *s;
                    }
                }
            })
            .or_insert_with(|| v.clone());
    }
    Ok(out)
}

fn check_sparse<T: Real>(z: &SparseFeatureMap<T>, h: usize, w: usize, c: usize) -> Result<()> {
    if z.height != h || z.width != w || (z.channels != c && !z.is_empty()) {
        return Err(shape_err(
            format!("{h}x{w}x{c}"),
            format!("{}x{}x{}", z.height, z.width, z.channels),
        ));
    }
    Ok(())
}

/// Max over the received maps and the carried history. This is what a
/// receiver remembers about its collaborators' content.
pub fn accumulate<T: Real>(
    decoded: &[SparseFeatureMap<T>],
    carried: Option<&CollabFeature<T>>,
    agent_id: u32,
    timestamp: usize,
    shape: (usize, usize, usize),
) -> Result<CollabFeature<T>> {
    let (h, w, c) = shape;
    let mut out = match carried {
        Some(prev) => {
            if prev.feature.height != h || prev.feature.width != w || prev.feature.channels != c {
                return Err(shape_err(format!("{h}x{w}x{c}"), prev.feature.shape_string()));
            }
            let mut p = prev.clone();
            p.feature.agent_id = agent_id;
            p.feature.timestamp = timestamp;
            p
        }
        None => CollabFeature::empty(agent_id, timestamp, h, w, c),
    };
    for z in decoded {
        check_sparse(z, h, w, c)?;
        let source = neighbor_source(z.agent_id);
        for (&(r, col), v) in &z.cells {
            out.merge_cell(r * w + col, v, source);
        }
    }
    Ok(out)
}

/// Point-wise maximum over ego, received maps and predicted history, each
/// counted only where present.
pub fn fuse<T: Real>(
    ego: &FeatureMap<T>,
    decoded: &[SparseFeatureMap<T>],
    predicted: Option<&CollabFeature<T>>,
) -> Result<CollabFeature<T>> {
    let (h, w, c) = (ego.height, ego.width, ego.channels);
    let mut out = CollabFeature {
        feature: ego.clone(),
        provenance: vec![SOURCE_EGO; h * w],
    };
    for z in decoded {
        check_sparse(z, h, w, c)?;
        let source = neighbor_source(z.agent_id);
        for (&(r, col), v) in &z.cells {
            out.merge_cell(r * w + col, v, source);
        }
    }
    if let Some(p) = predicted {
        if !p.feature.same_shape(ego) {
            return Err(shape_err(ego.shape_string(), p.feature.shape_string()));
        }
        for idx in 0..h * w {
            if p.is_present(idx) {
                let src = p.provenance[idx];
                out.merge_cell(idx, p.feature.cell_at(idx), src);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compression::quantize;
    use crate::exchange::pack;
    use crate::linalg::Mat;
    use crate::tracker::{Track, STATE_DIM};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn world(h: usize, w: usize) -> WorldConfig {
        WorldConfig {
            grid_height: h,
            grid_width: w,
            ..WorldConfig::default()
        }
    }

    fn track_set(tracks: Vec<(f64, f64, f64, f64)>) -> TrackSet<f64> {
        TrackSet {
            agent_id: 0,
            timestamp: 0,
            tracks: tracks
                .into_iter()
                .enumerate()
                .map(|(i, (x, y, vx, vy))| Track {
                    track_id: i as u32,
                    state: [0.9, x, y, 4.0, 2.0, 1.0, 0.0, vx, vy],
                    covariance: Mat::identity(STATE_DIM),
                    age: 3,
                    misses: 0,
                })
                .collect(),
            next_id: 5,
        }
    }

    fn random_collab(seed: u64, h: usize, w: usize, c: usize, density: f64) -> CollabFeature<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = CollabFeature::empty(0, 0, h, w, c);
        for idx in 0..h * w {
            if rng.gen_bool(density) {
                let v: Vec<f64> = (0..c).map(|_| rng.gen_range(0.0..1.0)).collect();
                out.merge_cell(idx, &v, SOURCE_HISTORY);
            }
        }
        out
    }

    #[test]
    fn flow_cases() {
        let cfg = TrackerConfig::default();
        let w = world(20, 20);
        assert!(estimate_flow(&track_set(vec![]), &w, &cfg, 1, 0).is_zero());
        assert!(estimate_flow(&track_set(vec![(10.0, 10.0, 0.0, 0.0)]), &w, &cfg, 1, 0).is_zero());
        let f = estimate_flow(&track_set(vec![(10.0, 10.0, 2.0, 0.0)]), &w, &cfg, 1, 0);
        let footprint = w.footprint(&RotatedBox::new(10.0, 10.0, 4.0, 2.0, 0.0));
        assert!(!footprint.is_empty());
        for idx in 0..400 {
            let cell = (idx / 20, idx % 20);
            let expect = if footprint.contains(&cell) { (0, 2) } else { (0, 0) };
            assert_eq!(f.values[idx], expect);
        }
    }

    #[test]
    fn multi_step_flow_scales() {
        let cfg = TrackerConfig::default();
        let w = world(20, 30);
        let f = estimate_flow(&track_set(vec![(15.0, 10.0, 1.0, 0.0)]), &w, &cfg, 3, 0);
        let footprint = w.footprint(&RotatedBox::new(15.0, 10.0, 4.0, 2.0, 0.0));
        for (r, c) in footprint {
            assert_eq!(f.get(r, c), (0, 3));
        }
        assert_eq!(f.get(10, 18), (0, 0));
        let grown = estimate_flow(&track_set(vec![(15.0, 10.0, 1.0, 0.0)]), &w, &cfg, 3, 1);
        assert_eq!(grown.get(10, 17), (0, 3));
        assert_eq!(grown.get(11, 15), (0, 3));
    }

    #[test]
    fn overlapping_flow_follows_nearest_track() {
        let cfg = TrackerConfig::default();
        let w = world(20, 20);
        let f = estimate_flow(
            &track_set(vec![(10.0, 10.0, 1.0, 0.0), (12.0, 10.0, 0.0, -3.0)]),
            &w,
            &cfg,
            1,
            0,
        );
        assert_eq!(f.get(10, 9), (0, 1));
        assert_eq!(f.get(10, 12), (-3, 0));
    }

    #[test]
    fn keyframe_motion_rewinds_footprint() {
        let cfg = TrackerConfig::default();
        let w = world(20, 30);
        // track now at x=15 moving 2 cells per step; content captured 3 steps ago sat at x=11
        let (f, support) = keyframe_motion(&track_set(vec![(15.0, 10.0, 2.0, 0.0)]), &w, &cfg, 3, 0, 0);
        assert_eq!(f.get(10, 11), (0, 6));
        assert!(support[10 * 30 + 11]);
        assert!(!support[10 * 30 + 15]);
        let (_, none) = keyframe_motion(&track_set(vec![(15.0, 10.0, 2.0, 0.0)]), &w, &cfg, 3, 0, 4);
        assert!(none.iter().all(|s| !s));
    }

    #[test]
    fn warp_identity_shift_and_discard() {
        let hist = random_collab(1, 6, 7, 3, 0.5);
        let zero = FlowMap::zeros(6, 7);
        let same = warp(&hist, &zero).unwrap();
        assert_eq!(same.feature.values, hist.feature.values);
        assert_eq!(same.present_cells(), hist.present_cells());

        let mut blob = CollabFeature::<f64>::empty(0, 0, 6, 7, 2);
        blob.merge_cell(8, &[1.0, 2.0], SOURCE_HISTORY);
        blob.merge_cell(9, &[3.0, 0.5], SOURCE_HISTORY);
        let mut flow = FlowMap::zeros(6, 7);
        flow.values[8] = (1, 2);
        flow.values[9] = (1, 2);
        let moved = warp(&blob, &flow).unwrap();
        assert_eq!(moved.present_cells(), 2);
        assert_eq!(moved.feature.cell(2, 3), &[1.0, 2.0]);
        assert_eq!(moved.feature.cell(2, 4), &[3.0, 0.5]);

        let off = FlowMap {
            height: 6,
            width: 7,
            values: vec![(100, 0); 42],
        };
        assert_eq!(warp(&hist, &off).unwrap().present_cells(), 0);
    }

    #[test]
    fn support_covers_grown_boxes_only() {
        let w = world(20, 20);
        let (_, s) = keyframe_motion(
            &track_set(vec![(10.0, 10.0, 1.0, 0.0)]),
            &w,
            &TrackerConfig::default(),
            1,
            1,
            0,
        );
        assert!(s[10 * 20 + 12] && s[11 * 20 + 10]);
        assert!(!s[10 * 20 + 14] && !s[0]);
        let hist = random_collab(2, 20, 20, 2, 1.0);
        let kept = hist.restricted(&s);
        assert_eq!(kept.present_cells(), s.iter().filter(|v| **v).count());
        assert!(kept.feature.total() <= hist.feature.total());
    }

    #[test]
    fn warp_never_creates_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..50 {
            let hist = random_collab(seed, 8, 8, 2, 0.6);
            let flow = FlowMap {
                height: 8,
                width: 8,
                values: (0..64)
                    .map(|_| (rng.gen_range(-2..=2), rng.gen_range(-2..=2)))
                    .collect(),
            };
            let out = warp(&hist, &flow).unwrap();
            assert!(out.feature.total() <= hist.feature.total() + 1e-9);
        }
    }

    #[test]
    fn fuse_identities() {
        let ego = random_collab(4, 5, 5, 3, 1.0).feature;
        let alone = fuse(&ego, &[], None).unwrap();
        assert_eq!(alone.feature, ego);
        let as_sparse = {
            let mut z = SparseFeatureMap::empty(1, 0, 5, 5, 3);
            for idx in 0..25 {
                z.cells.insert((idx / 5, idx % 5), ego.cell_at(idx).to_vec());
            }
            z
        };
        let hist = CollabFeature {
            feature: ego.clone(),
            provenance: vec![SOURCE_HISTORY; 25],
        };
        let same = fuse(&ego, &[as_sparse], Some(&hist)).unwrap();
        assert_eq!(same.feature, ego);
        assert!(same
            .provenance
            .iter()
            .all(|p| *p == SOURCE_EGO | SOURCE_HISTORY | neighbor_source(1)));
    }

    #[test]
    fn fuse_rejects_shape_mismatch() {
        let ego = FeatureMap::<f64>::zeros(0, 0, 4, 4, 2);
        let z = SparseFeatureMap {
            cells: [((0, 0), vec![1.0, 1.0, 1.0])].into_iter().collect(),
            ..SparseFeatureMap::empty(1, 0, 4, 4, 3)
        };
        assert!(fuse(&ego, &[z], None).is_err());
    }

    #[test]
    fn decompress_checks_version_and_reconstructs() {
        let cb = Codebook {
            codes: vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![3.0, 3.0]],
            n_r: 1,
            version_id: 9,
        };
        let mut z = SparseFeatureMap::empty(1, 0, 3, 3, 2);
        z.cells.insert((0, 1), vec![2.1, 0.4]);
        z.cells.insert((2, 2), vec![0.0, 0.9]);
        let msg = pack(&quantize(&z, &cb).unwrap(), 1, 0, 0, &cb).unwrap();
        let back = decompress(&msg, &cb, 3, 3).unwrap();
        assert_eq!(back.get(0, 1), Some(&[2.0, 0.5][..]));
        assert_eq!(back.get(2, 2), Some(&[0.0, 1.0][..]));
        assert_eq!(back.len(), 2);
        let other = Codebook {
            version_id: 10,
            ..cb.clone()
        };
        assert!(matches!(
            decompress(&msg, &other, 3, 3),
            Err(Error::CodebookVersion { .. })
        ));
        let empty = pack(
            &quantize(&SparseFeatureMap::empty(1, 0, 3, 3, 2), &cb).unwrap(),
            1,
            0,
            0,
            &cb,
        )
        .unwrap();
        assert!(decompress(&empty, &cb, 3, 3).unwrap().is_empty());
    }

    #[test]
    fn accumulate_keeps_max_and_sources() {
        let mut a = SparseFeatureMap::empty(1, 0, 2, 2, 1);
        a.cells.insert((0, 0), vec![0.5]);
        let mut b = SparseFeatureMap::empty(2, 0, 2, 2, 1);
        b.cells.insert((0, 0), vec![0.7]);
        b.cells.insert((1, 1), vec![0.2]);
        let acc = accumulate(&[a, b], None, 0, 0, (2, 2, 1)).unwrap();
        assert_eq!(acc.feature.values, vec![0.7, 0.0, 0.0, 0.2]);
        assert_eq!(acc.provenance[0], neighbor_source(1) | neighbor_source(2));
        assert_eq!(acc.present_cells(), 2);
    }
}
