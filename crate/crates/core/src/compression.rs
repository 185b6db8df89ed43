//! Message determination: which cells to send (spatial selection under a
//! budget, temporal sampling driven by track dynamics, collaborator demand)
//! and how to represent them (shared codebook, code indices).

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::perception::{ConfidenceMap, FeatureMap};
use crate::scalar::Real;
use crate::scenario::WorldConfig;
use crate::tracker::{TrackSet, STATE_DIM};

/// Dynamic level written for tracks that appear or disappear between the
/// two most recent timestamps.
pub const EMERGENT_DYNAMIC: f64 = 1.0e3;

/// Sample weight added to every cell's confidence during codebook learning.
pub const BASE_SAMPLE_WEIGHT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskKind {
    Spatial,
    Temporal,
    Request,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    pub height: usize,
    pub width: usize,
    pub kind: MaskKind,
    pub values: Vec<bool>,
}

impl SelectionMask {
    pub fn filled(height: usize, width: usize, kind: MaskKind, value: bool) -> Self {
        Self {
            height,
            width,
            kind,
            values: vec![value; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v).count()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Element-wise AND.
    pub fn and(&self, other: &Self) -> Self {
        assert!(self.same_shape(other), "mask shape");
        Self {
            values: self.values.iter().zip(&other.values).map(|(a, b)| *a && *b).collect(),
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynamicMatrix<T> {
    pub height: usize,
    pub width: usize,
    pub values: Vec<T>,
}

impl<T: Real> DynamicMatrix<T> {
    pub fn get(&self, row: usize, col: usize) -> T {
        self.values[row * self.width + col]
    }
}

/// Feature vectors for a sparse set of cells, ordered by `(row, col)`.
/// Absent cells carry no information (as opposed to zero-valued cells).
#[derive(Clone, Debug, PartialEq)]
pub struct SparseFeatureMap<T> {
    pub agent_id: u32,
    pub timestamp: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub cells: BTreeMap<(usize, usize), Vec<T>>,
}

impl<T: Real> SparseFeatureMap<T> {
    pub fn empty(agent_id: u32, timestamp: usize, height: usize, width: usize, channels: usize) -> Self {
        Self {
            agent_id,
            timestamp,
            height,
            width,
            channels,
            cells: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn get(&self, row: usize, col: usize) -> Option<&[T]> {
        self.cells.get(&(row, col)).map(|v| v.as_slice())
    }

    /// Dense copy with absent cells as zeros.
    pub fn to_dense(&self) -> FeatureMap<T> {
        let mut f = FeatureMap::zeros(self.agent_id, self.timestamp, self.height, self.width, self.channels);
        for (&(r, c), v) in &self.cells {
            f.cell_mut(r, c).copy_from_slice(v);
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    /// `n_L` codes of dimension `C`.
    pub codes: Vec<Vec<T>>,
    /// Codes combined per transmitted vector.
    pub n_r: usize,
    pub version_id: u32,
}

/// Per-cell code indices, `n_r` per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeIndexGrid {
    pub height: usize,
    pub width: usize,
    pub n_r: usize,
    pub entries: BTreeMap<(usize, usize), Vec<u32>>,
}

impl CodeIndexGrid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Pick the `b` highest-confidence cells (ties to the lower `(row, col)`).
pub fn spatial_select<T: Real>(conf: &ConfidenceMap<T>, budget: usize) -> SelectionMask {
    let n = conf.values.len();
    let mut mask = SelectionMask::filled(conf.height, conf.width, MaskKind::Spatial, false);
    if budget == 0 {
        return mask;
    }
    if budget >= n {
        mask.values.fill(true);
        return mask;
    }
    let mut order: Vec<usize> = (0..n).collect();
    let cmp = |a: &usize, b: &usize| {
        conf.values[*b]
            .partial_cmp(&conf.values[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    order.select_nth_unstable_by(budget - 1, cmp);
    for idx in &order[..budget] {
        mask.values[*idx] = true;
    }
    mask
}

/// L1 state change between the two most recent track sets, written at each
/// track's cell; emergent or vanished tracks get [`EMERGENT_DYNAMIC`].
pub fn temporal_dynamic<T: Real>(prev: &TrackSet<T>, prev2: &TrackSet<T>, world: &WorldConfig) -> DynamicMatrix<T> {
    let (h, w) = (world.grid_height, world.grid_width);
    let mut values = vec![T::zero(); h * w];
    let mut write = |x: T, y: T, v: T| {
        if let Some((r, c)) = world.cell_of(x.as_f64(), y.as_f64()) {
            let slot = &mut values[r * w + c];
            if v > *slot {
                *slot = v;
            }
        }
    };
    let big = T::lit(EMERGENT_DYNAMIC);
    for t in &prev.tracks {
        let v = match prev2.get(t.track_id) {
            Some(old) => (0..STATE_DIM).map(|i| (t.state[i] - old.state[i]).abs()).sum(),
            None => big,
        };
        write(t.x(), t.y(), v);
    }
    for old in &prev2.tracks {
        if prev.get(old.track_id).is_none() {
            write(old.x(), old.y(), big);
        }
    }
    DynamicMatrix {
        height: h,
        width: w,
        values,
    }
}

/// All cells on sampling timestamps, otherwise cells whose dynamic level
/// exceeds `threshold`.
pub fn temporal_sample<T: Real>(dynamics: &DynamicMatrix<T>, t: usize, interval: usize, threshold: T) -> SelectionMask {
    let interval = interval.max(1);
    if t.is_multiple_of(interval) {
        return SelectionMask::filled(dynamics.height, dynamics.width, MaskKind::Temporal, true);
    }
    SelectionMask {
        height: dynamics.height,
        width: dynamics.width,
        kind: MaskKind::Temporal,
        values: dynamics.values.iter().map(|v| *v > threshold).collect(),
    }
}

/// Features where spatial, temporal and request masks are all set. Cells
/// whose feature vector is entirely zero carry nothing and are omitted.
pub fn select_content<T: Real>(
    feat: &FeatureMap<T>,
    spatial: &SelectionMask,
    temporal: &SelectionMask,
    request: &SelectionMask,
) -> Result<SparseFeatureMap<T>> {
    for m in [spatial, temporal, request] {
        if m.height != feat.height || m.width != feat.width {
            return Err(shape_err(
                format!("{}x{}", feat.height, feat.width),
                format!("{}x{}", m.height, m.width),
            ));
        }
    }
    let mut out = SparseFeatureMap::empty(feat.agent_id, feat.timestamp, feat.height, feat.width, feat.channels);
    for idx in 0..feat.height * feat.width {
        if spatial.values[idx] && temporal.values[idx] && request.values[idx] && !feat.is_zero_cell(idx) {
            out.cells
                .insert((idx / feat.width, idx % feat.width), feat.cell_at(idx).to_vec());
        }
    }
    Ok(out)
}

#[inline]
fn sq_dist<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

#[inline]
fn sq_norm<T: Real>(a: &[T]) -> T {
    a.iter().map(|v| *v * *v).sum()
}

/// Nearest code by exact squared distance, lowest index on ties.
///
/// Distances are first screened with the expansion
/// `|x|^2 + |c|^2 - 2 x.c` over the non-zero entries of `x`; only codes
/// within the expansion's rounding margin of the best are rescored exactly.
fn nearest_code<T: Real>(x: &[T], codes: &[Vec<T>], code_norms: &[T]) -> (usize, T) {
    let nz: Vec<(usize, T)> = x.iter().copied().enumerate().filter(|(_, v)| *v != T::zero()).collect();
    let xn = sq_norm(x);
    let two = T::lit(2.0);
    let approx: Vec<T> = codes
        .iter()
        .zip(code_norms)
        .map(|(c, cn)| {
            let dot: T = nz.iter().map(|&(k, v)| v * c[k]).sum();
            xn + *cn - two * dot
        })
        .collect();
    let best_approx = approx.iter().copied().fold(T::infinity(), T::min);
    let max_norm = code_norms.iter().copied().fold(T::zero(), T::max);
    let margin = T::lit(64.0) * T::epsilon() * (xn + max_norm + T::one()) * T::lit(x.len() as f64 + 1.0);
    let mut best = (usize::MAX, T::infinity());
    for (i, a) in approx.iter().enumerate() {
        if *a <= best_approx + margin {
            let d = sq_dist(x, &codes[i]);
            if d < best.1 {
                best = (i, d);
            }
        }
    }
    best
}

/// Code indices for every cell of a sparse map. With `n_r > 1` codes are
/// chosen greedily against the running residual; the reconstruction is the
/// sum of the chosen codes.
pub fn quantize<T: Real>(z: &SparseFeatureMap<T>, codebook: &Codebook<T>) -> Result<CodeIndexGrid> {
    if codebook.codes.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    let dim = codebook.codes[0].len();
    if dim != z.channels {
        return Err(shape_err(
            format!("vectors of dimension {dim}"),
            format!("dimension {}", z.channels),
        ));
    }
    let norms: Vec<T> = codebook.codes.iter().map(|c| sq_norm(c)).collect();
    let n_r = codebook.n_r.max(1);
    let mut entries = BTreeMap::new();
    for (&cell, v) in &z.cells {
        entries.insert(cell, quantize_vector(v, codebook, &norms, n_r));
    }
    Ok(CodeIndexGrid {
        height: z.height,
        width: z.width,
        n_r,
        entries,
    })
}

fn quantize_vector<T: Real>(v: &[T], codebook: &Codebook<T>, norms: &[T], n_r: usize) -> Vec<u32> {
    let (first, _) = nearest_code(v, &codebook.codes, norms);
    let mut out = Vec::with_capacity(n_r);
    out.push(first as u32);
    if n_r == 1 {
        return out;
    }
    let mut residual: Vec<T> = v.iter().zip(&codebook.codes[first]).map(|(a, b)| *a - *b).collect();
    for _ in 1..n_r {
        let mut best = (0usize, T::infinity());
        for (i, c) in codebook.codes.iter().enumerate() {
            let d = sq_dist(&residual, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        for (r, c) in residual.iter_mut().zip(&codebook.codes[best.0]) {
            *r -= *c;
        }
        out.push(best.0 as u32);
    }
    out
}

/// Quantize a single vector; exposed for evaluation of quantization error.
pub fn quantize_one<T: Real>(v: &[T], codebook: &Codebook<T>) -> Result<Vec<u32>> {
    if codebook.codes.is_empty() {
        return Err(Error::EmptyCodebook);
    }
    let norms: Vec<T> = codebook.codes.iter().map(|c| sq_norm(c)).collect();
    Ok(quantize_vector(v, codebook, &norms, codebook.n_r.max(1)))
}

impl<T: Real> Codebook<T> {
    pub fn n_l(&self) -> usize {
        self.codes.len()
    }

    pub fn dim(&self) -> usize {
        self.codes.first().map_or(0, |c| c.len())
    }

    /// Bits needed for one code index.
    pub fn index_bits(&self) -> u32 {
        let n = self.codes.len().max(1);
        usize::BITS - (n - 1).leading_zeros()
    }

    /// Sum of the referenced codes.
    pub fn reconstruct(&self, indices: &[u32]) -> Result<Vec<T>> {
        let mut out = vec![T::zero(); self.dim()];
        for &i in indices {
            let code = self.codes.get(i as usize).ok_or(Error::IndexOutOfRange {
                index: i,
                size: self.codes.len(),
            })?;
            for (o, c) in out.iter_mut().zip(code) {
                *o += *c;
            }
        }
        Ok(out)
    }

    /// Content hash of the codes, used as the shared version identifier.
    pub fn content_version(codes: &[Vec<T>]) -> u32 {
        let mut h: u32 = 0x811c_9dc5;
        for code in codes {
            for v in code {
                for b in v.as_f32().to_le_bytes() {
                    h ^= b as u32;
                    h = h.wrapping_mul(0x0100_0193);
                }
            }
        }
        h
    }

    const MAGIC: u32 = u32::from_le_bytes(*b"CBK1");

    /// Binary layout: magic, version, n_L, C as little-endian u32, then
    /// `n_L * C` little-endian f32 values, code by code.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.n_l() * self.dim());
        for v in [Self::MAGIC, self.version_id, self.n_l() as u32, self.dim() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for code in &self.codes {
            for v in code {
                out.extend_from_slice(&v.as_f32().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], n_r: usize) -> Result<Self> {
        let word = |i: usize| -> Result<u32> {
            bytes
                .get(4 * i..4 * i + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::Wire("truncated codebook header".into()))
        };
        if word(0)? != Self::MAGIC {
            return Err(Error::Wire("bad codebook magic".into()));
        }
        let version_id = word(1)?;
        let n_l = word(2)? as usize;
        let dim = word(3)? as usize;
        let body = &bytes[16..];
        if body.len() != 4 * n_l * dim {
            return Err(Error::Wire(format!(
                "codebook body has {} bytes, expected {}",
                body.len(),
                4 * n_l * dim
            )));
        }
        let codes = body
            .chunks_exact(4 * dim.max(1))
            .take(n_l)
            .map(|chunk| {
                chunk
                    .chunks_exact(4)
                    .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
                    .collect()
            })
            .collect();
        Ok(Self { codes, n_r, version_id })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, n_r: usize) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf, n_r)
    }

    /// Quantize every code through f32 so that an in-memory codebook matches
    /// one read back from disk bit for bit.
    pub fn rounded_to_f32(mut self) -> Self {
        for code in self.codes.iter_mut() {
            for v in code.iter_mut() {
                *v = T::lit(v.as_f32() as f64);
            }
        }
        self
    }
}

/// Result of weighted Lloyd iterations.
#[derive(Clone, Debug)]
pub struct KMeansFit<T> {
    pub centers: Vec<Vec<T>>,
    /// Weighted objective after initialization and after every iteration.
    pub objective: Vec<T>,
}

struct Sample<'a, T> {
    x: &'a [T],
    nz: Vec<(usize, T)>,
    norm: T,
    w: T,
}

fn assign<T: Real>(samples: &[Sample<T>], centers: &[Vec<T>]) -> (Vec<usize>, Vec<T>) {
    let norms: Vec<T> = centers.iter().map(|c| sq_norm(c)).collect();
    let two = T::lit(2.0);
    let mut labels = Vec::with_capacity(samples.len());
    let mut dists = Vec::with_capacity(samples.len());
    for s in samples {
        let mut best = (0usize, T::infinity());
        for (j, (c, cn)) in centers.iter().zip(&norms).enumerate() {
            let dot: T = s.nz.iter().map(|&(k, v)| v * c[k]).sum();
            let d = (s.norm + *cn - two * dot).max(T::zero());
            if d < best.1 {
                best = (j, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1);
    }
    (labels, dists)
}

/// Weighted k-means with k-means++ seeding and exactly `iters` Lloyd steps.
/// Empty clusters are re-seeded at the sample farthest from its center.
pub fn weighted_kmeans<T: Real>(
    points: &[Vec<T>],
    weights: &[T],
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeansFit<T>> {
    if points.len() != weights.len() {
        return Err(shape_err(points.len(), weights.len()));
    }
    if k == 0 {
        return Err(Error::Config("codebook size must be at least 1".into()));
    }
    let dim = points.first().map_or(0, |p| p.len());
    let distinct: HashSet<Vec<u64>> = points
        .iter()
        .map(|p| p.iter().map(|v| v.as_f64().to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::InsufficientData(format!(
            "{} distinct vectors for {} codes",
            distinct.len(),
            k
        )));
    }
    let samples: Vec<Sample<T>> = points
        .iter()
        .zip(weights)
        .map(|(p, w)| Sample {
            x: p,
            nz: p.iter().copied().enumerate().filter(|(_, v)| *v != T::zero()).collect(),
            norm: sq_norm(p),
            w: *w,
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng, scores: &[T]| -> Option<usize> {
        let total: f64 = scores.iter().map(|s| s.as_f64()).sum();
        if !(total > 0.0) {
            return None;
        }
        let mut r = rng.gen_range(0.0..total);
        for (i, s) in scores.iter().enumerate() {
            r -= s.as_f64();
            if r < 0.0 {
                return Some(i);
            }
        }
        scores.iter().rposition(|s| *s > T::zero())
    };

    // k-means++ seeding.
    let first = pick(&mut rng, weights).unwrap_or(0);
    let mut centers: Vec<Vec<T>> = vec![points[first].clone()];
    let mut best_d: Vec<T> = samples.iter().map(|s| sq_dist(s.x, &centers[0])).collect();
    while centers.len() < k {
        let scores: Vec<T> = samples.iter().zip(&best_d).map(|(s, d)| s.w * *d).collect();
        let idx = match pick(&mut rng, &scores) {
            Some(i) => i,
            // all mass sits on existing centers; fall back to the farthest
            // distinct point
            None => best_d
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0),
        };
        centers.push(points[idx].clone());
        for (d, s) in best_d.iter_mut().zip(&samples) {
            let nd = sq_dist(s.x, centers.last().unwrap());
            if nd < *d {
                *d = nd;
            }
        }
    }

    let objective_of = |dists: &[T]| -> T { samples.iter().zip(dists).map(|(s, d)| s.w * *d).sum() };
    let (mut labels, mut dists) = assign(&samples, &centers);
    let mut objective = vec![objective_of(&dists)];
    for _ in 0..iters {
        let mut sums = vec![vec![T::zero(); dim]; k];
        let mut mass = vec![T::zero(); k];
        for (s, &l) in samples.iter().zip(&labels) {
            mass[l] += s.w;
            for &(ch, v) in &s.nz {
                sums[l][ch] += s.w * v;
            }
        }
        let mut taken: HashSet<usize> = HashSet::new();
        for j in 0..k {
            if mass[j] > T::zero() {
                centers[j] = sums[j].iter().map(|v| *v / mass[j]).collect();
            } else {
                let far = dists
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(Ordering::Equal).then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken.insert(far);
                centers[j] = points[far].clone();
            }
        }
        let (l, d) = assign(&samples, &centers);
        labels = l;
        dists = d;
        objective.push(objective_of(&dists));
    }
    Ok(KMeansFit { centers, objective })
}

/// Learn a shared codebook from per-cell feature vectors weighted by
/// `0.1 + confidence`. With `n_r > 1` the first code is pinned to zero so
/// greedy residual matching can never increase the error.
pub fn learn_codebook_from_samples<T: Real>(
    points: &[Vec<T>],
    weights: &[T],
    n_l: usize,
    n_r: usize,
    iters: usize,
    seed: u64,
) -> Result<(Codebook<T>, Vec<T>)> {
    let (codes, objective) = if n_r > 1 && n_l > 1 {
        let fit = weighted_kmeans(points, weights, n_l - 1, iters, seed)?;
        let dim = points[0].len();
        let mut codes = vec![vec![T::zero(); dim]];
        codes.extend(fit.centers);
        (codes, fit.objective)
    } else {
        let fit = weighted_kmeans(points, weights, n_l, iters, seed)?;
        (fit.centers, fit.objective)
    };
    let version_id = Codebook::content_version(&codes);
    Ok((
        Codebook {
            codes,
            n_r: n_r.max(1),
            version_id,
        },
        objective,
    ))
}

/// Codebook over every cell of the given feature maps.
pub fn learn_codebook<T: Real>(
    features: &[FeatureMap<T>],
    conf: &[ConfidenceMap<T>],
    n_l: usize,
    n_r: usize,
    iters: usize,
    seed: u64,
) -> Result<Codebook<T>> {
    if features.len() != conf.len() {
        return Err(shape_err(features.len(), conf.len()));
    }
    let mut points = Vec::new();
    let mut weights = Vec::new();
    for (f, c) in features.iter().zip(conf) {
        if c.values.len() != f.height * f.width {
            return Err(shape_err(f.height * f.width, c.values.len()));
        }
        for idx in 0..f.height * f.width {
            points.push(f.cell_at(idx).to_vec());
            weights.push(T::lit(BASE_SAMPLE_WEIGHT) + c.values[idx]);
        }
    }
    learn_codebook_from_samples(&points, &weights, n_l, n_r, iters, seed).map(|(cb, _)| cb)
}
