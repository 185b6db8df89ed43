//! Episode orchestration, calibration, sweeps, ablations and output files.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compression::{
    learn_codebook_from_samples, quantize, select_content, spatial_select, temporal_dynamic, temporal_sample,
    CodeIndexGrid, Codebook, MaskKind, SelectionMask, SparseFeatureMap, BASE_SAMPLE_WEIGHT,
};
use crate::error::{Error, Result};
use crate::exchange::{
    aggregate_metric, build_adjacency, build_request, pack, pack_raw, write_ledger_csv, AdjacencyMatrix, Channel,
    ChannelModel, LedgerEntry, PragmaticMessage,
};
use crate::metrics::{
    assemble_tradeoff, average_precision, clear_mot, write_tradeoff_csv, RunSummary, TrackFrame, TrackingReport,
    TradeoffRecord,
};
use crate::perception::{confidence_map, DetectionBox, FeatureMap, Perception, PerceptionConfig};
use crate::scalar::Real;
use crate::scenario::{
    generate_world, perturb_pose, place_agents, sense, write_ground_truth_csv, GroundTruthFrame, WorldConfig,
};
use crate::tracker::{write_tracks_csv, TrackSet, Tracker, TrackerConfig};
use crate::utilization::{
    accumulate, decompress, estimate_flow, fuse, keyframe_motion, warp, warp_sparse, CollabFeature,
};

/// Wall-clock duration of one simulator step.
pub const MS_PER_STEP: u64 = 100;

/// Center-distance gate for tracking scores, in meters.
pub const MOT_DISTANCE_GATE: f64 = 2.0;

/// Stages to switch off. Each flag removes one stage and nothing else.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Offer every cell regardless of confidence.
    pub spatial: bool,
    /// Send on every timestamp; also idles the predictor.
    pub temporal: bool,
    /// Put raw f32 feature vectors on the wire.
    pub channel: bool,
    /// No motion-compensated history and no compensation of late messages.
    pub predictor: bool,
    /// Single-agent perception only.
    pub collaboration: bool,
}

impl AblationFlags {
    pub fn uses_predictor(&self) -> bool {
        !self.predictor && !self.temporal
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub perception: PerceptionConfig,
    pub tracker: TrackerConfig,
    /// Cells each agent may offer per step, as a fraction of the grid.
    pub budget: f64,
    /// Budget axis of the sweep.
    pub budgets: Vec<f64>,
    /// Every `temporal_interval`-th step sends everything selected.
    pub temporal_interval: usize,
    pub temporal_intervals: Vec<usize>,
    /// Dynamic level above which a cell is sent off-cycle.
    pub dynamic_threshold: f64,
    pub codebook_size: usize,
    pub codes_per_vector: usize,
    /// Codebook axis of the sweep as `[size, codes_per_vector]` pairs.
    pub codebook_settings: Vec<[usize; 2]>,
    pub kmeans_iters: usize,
    pub calibration_seeds: Vec<u64>,
    /// Use every n-th timestamp of a calibration scene.
    pub calibration_stride: usize,
    pub calibration_max_samples: usize,
    pub channel: ChannelModel,
    pub latencies_ms: Vec<u64>,
    pub pose_error_std: f64,
    pub pose_errors: Vec<f64>,
    /// Confidence at which an agent considers a cell covered and stops
    /// requesting it.
    pub request_threshold: f64,
    /// Per-step attenuation of carried collaborative history.
    pub history_decay: f64,
    /// Cells added around each track box when writing flow.
    pub flow_margin: usize,
    /// Steps a track must have lived before content is carried along it.
    pub min_track_age: u32,
    pub ablate: AblationFlags,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub codebook_path: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig::default(),
            perception: PerceptionConfig::default(),
            tracker: TrackerConfig::default(),
            budget: 1.0,
            budgets: vec![0.0, 0.01, 0.05, 0.2, 1.0],
            temporal_interval: 1,
            temporal_intervals: vec![1, 2, 3, 4],
            dynamic_threshold: 2.5,
            codebook_size: 256,
            codes_per_vector: 1,
            codebook_settings: vec![[4, 1], [16, 1], [64, 1], [256, 1], [256, 2]],
            kmeans_iters: 10,
            calibration_seeds: vec![1000, 1001, 1002, 1003],
            calibration_stride: 3,
            calibration_max_samples: 20_000,
            channel: ChannelModel::default(),
            latencies_ms: vec![0, 100, 200, 300, 400, 500],
            pose_error_std: 0.0,
            pose_errors: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            request_threshold: 0.5,
            history_decay: 0.85,
            flow_margin: 0,
            min_track_age: 4,
            ablate: AblationFlags::default(),
            seeds: (0..5).collect(),
            output_dir: PathBuf::from("out"),
            codebook_path: None,
        }
    }
}

fn check_fraction(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} {v} outside [0, 1]")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.channel.validate()?;
        check_fraction("budget", self.budget)?;
        if self.budgets.is_empty() {
            return Err(Error::Config("budgets must not be empty".into()));
        }
        for b in &self.budgets {
            check_fraction("budget", *b)?;
        }
        if self.temporal_interval == 0 || self.temporal_intervals.contains(&0) {
            return Err(Error::Config("temporal interval must be at least 1".into()));
        }
        if self.codebook_size == 0 || self.codes_per_vector == 0 {
            return Err(Error::Config(
                "codebook size and codes per vector must be positive".into(),
            ));
        }
        if self.codebook_settings.iter().any(|[l, r]| *l == 0 || *r == 0) {
            return Err(Error::Config("codebook settings must be positive".into()));
        }
        if self.calibration_seeds.is_empty() {
            return Err(Error::Config("calibration_seeds must not be empty".into()));
        }
        if self.calibration_stride == 0 {
            return Err(Error::Config("calibration_stride must be at least 1".into()));
        }
        check_fraction("history_decay", self.history_decay)?;
        check_fraction("request_threshold", self.request_threshold)?;
        if !(self.pose_error_std >= 0.0) || self.pose_errors.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::Config("pose error must be non-negative".into()));
        }
        if self.perception.channels == 0 {
            return Err(Error::Config("perception.channels must be positive".into()));
        }
        Ok(())
    }

    /// Per-agent, per-step cell budget.
    pub fn budget_cells(&self) -> usize {
        (self.budget * self.world.cells() as f64).round() as usize
    }

    fn world_for(&self, seed: u64) -> WorldConfig {
        WorldConfig {
            seed,
            ..self.world.clone()
        }
    }

    fn needs_codebook(&self) -> bool {
        !self.ablate.collaboration && !self.ablate.channel
    }
}

/// Latency in whole steps for a delay in milliseconds.
pub fn latency_steps(ms: u64) -> usize {
    ((ms + MS_PER_STEP / 2) / MS_PER_STEP) as usize
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub ap50: f64,
    pub ap70: f64,
    pub mota: f64,
    pub motp: f64,
}

/// What one agent reported at every step.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentOutput<T> {
    pub agent_id: u32,
    pub detections: Vec<Vec<DetectionBox<T>>>,
    pub tracks: Vec<TrackSet<T>>,
}

impl<T: Real> AgentOutput<T> {
    fn new(agent_id: u32) -> Self {
        Self {
            agent_id,
            detections: Vec::new(),
            tracks: Vec::new(),
        }
    }
}

/// Exchange bookkeeping of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub t: usize,
    pub requests: Vec<SelectionMask>,
    pub adjacency: AdjacencyMatrix,
    pub sent: Vec<PragmaticMessage>,
    pub delivered: Vec<PragmaticMessage>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeResult<T> {
    pub seed: u64,
    pub ground_truth: Vec<GroundTruthFrame>,
    pub collaborative: Vec<AgentOutput<T>>,
    pub single: Vec<AgentOutput<T>>,
    pub ledger: Vec<LedgerEntry>,
    pub steps: Vec<StepTrace>,
    pub budget_cells: usize,
    pub raw_bytes: usize,
    pub scores: Scores,
    pub single_scores: Scores,
}

impl<T: Real> EpisodeResult<T> {
    pub fn summary(&self, setting: &str) -> RunSummary {
        RunSummary {
            setting: setting.to_string(),
            raw_bytes: self.raw_bytes,
            ap50: self.scores.ap50,
            ap70: self.scores.ap70,
            mota: self.scores.mota,
            motp: self.scores.motp,
        }
    }

    pub fn single_summary(&self, setting: &str) -> RunSummary {
        RunSummary {
            setting: setting.to_string(),
            raw_bytes: 0,
            ap50: self.single_scores.ap50,
            ap70: self.single_scores.ap70,
            mota: self.single_scores.mota,
            motp: self.single_scores.motp,
        }
    }
}

/// Scores over all agents, optionally restricted to some timestamps.
/// Detections of every agent are judged against every object in the scene.
pub fn evaluate<T: Real>(
    outputs: &[AgentOutput<T>],
    gt: &[GroundTruthFrame],
    timestamps: Option<&[usize]>,
) -> Result<Scores> {
    let steps = gt.len();
    let keep = |t: usize| timestamps.is_none_or(|ts| ts.contains(&t));
    let mut dets = Vec::new();
    let mut frames = Vec::new();
    let mut reports = Vec::new();
    for out in outputs {
        let base = out.agent_id as usize * steps;
        let mut seq_gt = Vec::new();
        let mut seq_tracks = Vec::new();
        for (t, frame) in gt.iter().enumerate() {
            if !keep(t) {
                continue;
            }
            frames.push(GroundTruthFrame {
                timestamp: base + t,
                objects: frame.objects.clone(),
            });
            if let Some(ds) = out.detections.get(t) {
                dets.extend(ds.iter().map(|d| (d.clone(), base + t)));
            }
            seq_gt.push(frame.clone());
            if let Some(set) = out.tracks.get(t) {
                seq_tracks.push(TrackFrame {
                    timestamp: t,
                    tracks: set
                        .active()
                        .map(|tr| {
                            let b = tr.to_box();
                            (
                                tr.track_id,
                                crate::geometry::RotatedBox::new(
                                    b.x.as_f64(),
                                    b.y.as_f64(),
                                    b.length.as_f64(),
                                    b.width.as_f64(),
                                    b.heading.as_f64(),
                                ),
                            )
                        })
                        .collect(),
                });
            }
        }
        reports.push(clear_mot(&seq_tracks, &seq_gt, MOT_DISTANCE_GATE)?);
    }
    let mot = TrackingReport::combine(&reports);
    Ok(Scores {
        ap50: average_precision(&dets, &frames, 0.5)?,
        ap70: average_precision(&dets, &frames, 0.7)?,
        mota: mot.mota,
        motp: mot.motp,
    })
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ a.wrapping_mul(0xD1B5_4A32_D192_ED03)
        ^ b.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7)
}

struct AgentState<T> {
    collab_tracker: Tracker<T>,
    single_tracker: Tracker<T>,
    /// Collaborative tracks after the two most recent steps.
    prev_tracks: TrackSet<T>,
    prev2_tracks: TrackSet<T>,
    /// Recently received content by arrival step, newest last.
    keyframes: VecDeque<(usize, CollabFeature<T>)>,
    prev_available: Option<SelectionMask>,
    /// One tracker per sender over the content of its late messages.
    link_trackers: BTreeMap<u32, Tracker<T>>,
}

/// Cells where an agent already has what it needs: offered by it and
/// confidently perceived by it.
fn availability<T: Real>(spatial: &SelectionMask, conf: &[T], threshold: T) -> SelectionMask {
    SelectionMask {
        height: spatial.height,
        width: spatial.width,
        kind: MaskKind::Spatial,
        values: spatial
            .values
            .iter()
            .zip(conf)
            .map(|(s, c)| *s && *c >= threshold)
            .collect(),
    }
}

/// Run one episode. A codebook is required unless collaboration or the
/// channel compressor is ablated.
pub fn run_episode<T: Real>(
    cfg: &ExperimentConfig,
    seed: u64,
    codebook: Option<&Codebook<T>>,
) -> Result<EpisodeResult<T>> {
    cfg.validate()?;
    if cfg.needs_codebook() && codebook.is_none() {
        return Err(Error::Config("a calibrated codebook is required".into()));
    }
    if let Some(cb) = codebook {
        if cfg.needs_codebook() && cb.dim() != cfg.perception.channels {
            return Err(Error::Shape {
                expected: format!("codes of dimension {}", cfg.perception.channels),
                actual: format!("dimension {}", cb.dim()),
            });
        }
    }
    let world = cfg.world_for(seed);
    let frames = generate_world(&world)?;
    let poses = place_agents(&world);
    let perception = Perception::<T>::new(&world, cfg.perception.clone());
    let (h, w, c) = (world.grid_height, world.grid_width, cfg.perception.channels);
    let n = poses.len();
    let budget = cfg.budget_cells();
    let collaborate = !cfg.ablate.collaboration;
    let predictor = cfg.ablate.uses_predictor();
    let req_thr = T::lit(cfg.request_threshold);
    let decay = T::lit(cfg.history_decay);
    let horizon = cfg.temporal_interval;
    let dyn_thr = T::lit(cfg.dynamic_threshold);
    let mut channel = Channel::new(ChannelModel {
        seed: mix(cfg.channel.seed, seed, 0xC4A7),
        ..cfg.channel.clone()
    });

    let mut agents: Vec<AgentState<T>> = poses
        .iter()
        .map(|p| AgentState {
            collab_tracker: Tracker::new(p.agent_id, cfg.tracker.clone()),
            single_tracker: Tracker::new(p.agent_id, cfg.tracker.clone()),
            prev_tracks: TrackSet::new(p.agent_id, 0),
            prev2_tracks: TrackSet::new(p.agent_id, 0),
            keyframes: VecDeque::new(),
            prev_available: None,
            link_trackers: BTreeMap::new(),
        })
        .collect();
    let mut collaborative: Vec<AgentOutput<T>> = poses.iter().map(|p| AgentOutput::new(p.agent_id)).collect();
    let mut single: Vec<AgentOutput<T>> = poses.iter().map(|p| AgentOutput::new(p.agent_id)).collect();
    let mut ledger = Vec::new();
    let mut steps = Vec::new();

    for (t, frame) in frames.iter().enumerate() {
        let mut features = Vec::with_capacity(n);
        let mut shared = Vec::with_capacity(n);
        let mut confs = Vec::with_capacity(n);
        for (i, pose) in poses.iter().enumerate() {
            let obs = sense(frame, pose, &world, seed);
            let feat = perception.encode(&obs)?;
            let (heat, dets) = perception.detect(&feat);
            let tracks = agents[i].single_tracker.step(t, &dets)?.clone();
            single[i].detections.push(dets);
            single[i].tracks.push(tracks);
            confs.push(confidence_map(&heat));
            // a sender places its content with its own, possibly wrong, pose
            let offered = if collaborate && cfg.pose_error_std > 0.0 {
                let noisy = perturb_pose(pose, cfg.pose_error_std, mix(seed, t as u64, 0x905E));
                let d_row = ((noisy.y - pose.y) / world.cell_size).round() as i64;
                let d_col = ((noisy.x - pose.x) / world.cell_size).round() as i64;
                Some(perception.encode(&obs.translated(d_row, d_col))?)
            } else {
                None
            };
            shared.push(offered);
            features.push(feat);
        }

        if !collaborate {
            for i in 0..n {
                collaborative[i].detections.push(single[i].detections[t].clone());
                collaborative[i].tracks.push(single[i].tracks[t].clone());
            }
            continue;
        }

        // message determination
        let spatial: Vec<SelectionMask> = confs
            .iter()
            .map(|cm| {
                if cfg.ablate.spatial {
                    SelectionMask::filled(h, w, MaskKind::Spatial, true)
                } else {
                    spatial_select(cm, budget)
                }
            })
            .collect();
        let temporal: Vec<SelectionMask> = agents
            .iter()
            .map(|a| {
                if cfg.ablate.temporal {
                    SelectionMask::filled(h, w, MaskKind::Temporal, true)
                } else {
                    let dynamics = temporal_dynamic(&a.prev_tracks, &a.prev2_tracks, &world);
                    temporal_sample(&dynamics, t, cfg.temporal_interval, dyn_thr)
                }
            })
            .collect();
        let requests: Vec<_> = agents
            .iter()
            .enumerate()
            .map(|(j, a)| build_request(j as u32, a.prev_available.as_ref(), h, w))
            .collect();
        let adjacency = build_adjacency(&spatial, &temporal, &requests, t)?;

        let mut sent = Vec::new();
        for i in 0..n {
            let source: &FeatureMap<T> = shared[i].as_ref().unwrap_or(&features[i]);
            let receivers: Vec<usize> = (0..n).filter(|&j| adjacency.get(i, j)).collect();
            if receivers.is_empty() {
                continue;
            }
            // quantize the union of requested cells once, then split
            let mut wanted = SelectionMask::filled(h, w, MaskKind::Request, false);
            for &j in &receivers {
                for (acc, r) in wanted.values.iter_mut().zip(&requests[j].mask.values) {
                    *acc |= *r;
                }
            }
            let offer = select_content(source, &spatial[i], &temporal[i], &wanted)?;
            let codes = match (cfg.ablate.channel, codebook) {
                (false, Some(cb)) => Some(quantize(&offer, cb)?),
                _ => None,
            };
            for &j in &receivers {
                let keep = |cell: &(usize, usize)| requests[j].mask.get(cell.0, cell.1);
                let msg = match (&codes, codebook) {
                    (Some(all), Some(cb)) => {
                        let grid = CodeIndexGrid {
                            entries: all
                                .entries
                                .iter()
                                .filter(|(k, _)| keep(k))
                                .map(|(k, v)| (*k, v.clone()))
                                .collect(),
                            ..all.clone()
                        };
                        pack(&grid, i as u32, j as u32, t, cb)?
                    }
                    _ => {
                        let z = SparseFeatureMap {
                            cells: offer
                                .cells
                                .iter()
                                .filter(|(k, _)| keep(k))
                                .map(|(k, v)| (*k, v.clone()))
                                .collect(),
                            ..SparseFeatureMap::empty(i as u32, t, h, w, c)
                        };
                        pack_raw(&z, i as u32, j as u32, t)?
                    }
                };
                ledger.push(LedgerEntry::of(&msg));
                sent.push(msg);
            }
        }
        let delivered = channel.transmit(sent.clone(), t);

        // message utilization
        let empty_book = Codebook {
            codes: Vec::new(),
            n_r: 1,
            version_id: 0,
        };
        let book = codebook.unwrap_or(&empty_book);
        for j in 0..n {
            let mut decoded = Vec::new();
            for msg in delivered.iter().filter(|m| m.receiver as usize == j) {
                let mut z = decompress(msg, book, h, w)?;
                let late = t.saturating_sub(msg.timestamp);
                if late > 0 && predictor {
                    let link = agents[j]
                        .link_trackers
                        .entry(msg.sender)
                        .or_insert_with(|| Tracker::new(msg.sender, cfg.tracker.clone()));
                    let (_, content_dets) = perception.detect(&z.to_dense());
                    let link_tracks = link.step(msg.timestamp, &content_dets)?;
                    let flow = estimate_flow(link_tracks, &world, &cfg.tracker, late, cfg.flow_margin);
                    z = warp_sparse(&z, &flow)?;
                }
                z.timestamp = t;
                decoded.push(z);
            }
            let a = &mut agents[j];
            let fused = if predictor {
                // every stored keyframe is moved along the tracks by its own age
                let mut predicted: Option<CollabFeature<T>> = None;
                for (arrived, kf) in &a.keyframes {
                    let age = t - arrived;
                    let (flow, support) = keyframe_motion(
                        &a.prev_tracks,
                        &world,
                        &cfg.tracker,
                        age,
                        cfg.flow_margin,
                        cfg.min_track_age,
                    );
                    let moved = warp(&kf.restricted(&support), &flow)?.scaled(decay.powi(age as i32));
                    match predicted.as_mut() {
                        Some(p) => p.merge(&moved),
                        None => predicted = Some(moved),
                    }
                }
                let fresh = accumulate(&decoded, None, j as u32, t, (h, w, c))?;
                // prediction only fills cells without fresh content or a confident ego view
                let open: Vec<bool> = (0..h * w)
                    .map(|idx| !fresh.is_present(idx) && confs[j].values[idx] < req_thr)
                    .collect();
                let mut hist = fresh.clone();
                if let Some(p) = &predicted {
                    hist.merge(&p.restricted(&open));
                }
                let fused = fuse(&features[j], &[], Some(&hist))?;
                a.keyframes.push_back((t, fresh));
                while a.keyframes.front().is_some_and(|(k, _)| t + 1 - k > horizon) {
                    a.keyframes.pop_front();
                }
                fused
            } else {
                fuse(&features[j], &decoded, None)?
            };
            let (_, dets) = perception.detect(&fused.feature);
            let tracks = a.collab_tracker.step(t, &dets)?.clone();
            a.prev2_tracks = std::mem::replace(&mut a.prev_tracks, tracks.clone());
            a.prev_available = Some(availability(&spatial[j], &confs[j].values, req_thr));
            collaborative[j].detections.push(dets);
            collaborative[j].tracks.push(tracks);
        }
        steps.push(StepTrace {
            t,
            requests: requests.into_iter().map(|r| r.mask).collect(),
            adjacency,
            sent,
            delivered,
        });
    }

    let raw_bytes = ledger.iter().map(|e| e.raw_bytes).sum();
    let scores = evaluate(&collaborative, &frames, None)?;
    let single_scores = evaluate(&single, &frames, None)?;
    Ok(EpisodeResult {
        seed,
        ground_truth: frames,
        collaborative,
        single,
        ledger,
        steps,
        budget_cells: budget,
        raw_bytes,
        scores,
        single_scores,
    })
}

/// Learn the shared codebook from single-agent features of calibration
/// scenes. Non-empty cells are pooled (every `calibration_stride`-th step),
/// weighted by `0.1 + confidence`, and subsampled to at most
/// `calibration_max_samples`. Codes are rounded through f32 so the result
/// equals its on-disk form.
pub fn calibrate_codebook<T: Real>(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<(Codebook<T>, Vec<T>)> {
    if seeds.is_empty() {
        return Err(Error::Config("calibration needs at least one seed".into()));
    }
    let mut points: Vec<Vec<T>> = Vec::new();
    let mut weights: Vec<T> = Vec::new();
    for &seed in seeds {
        let world = cfg.world_for(seed);
        let frames = generate_world(&world)?;
        let poses = place_agents(&world);
        let perception = Perception::<T>::new(&world, cfg.perception.clone());
        for frame in frames.iter().step_by(cfg.calibration_stride.max(1)) {
            for pose in &poses {
                let feat = perception.encode(&sense(frame, pose, &world, seed))?;
                let conf = confidence_map(&perception.decode(&feat));
                for idx in 0..feat.height * feat.width {
                    if !feat.is_zero_cell(idx) {
                        points.push(feat.cell_at(idx).to_vec());
                        weights.push(T::lit(BASE_SAMPLE_WEIGHT) + conf.values[idx]);
                    }
                }
            }
        }
    }
    if points.len() > cfg.calibration_max_samples {
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(
            seeds[0],
            points.len() as u64,
            0xCA11,
        )));
        order.truncate(cfg.calibration_max_samples);
        order.sort_unstable();
        points = order.iter().map(|&i| std::mem::take(&mut points[i])).collect();
        weights = order.iter().map(|&i| weights[i]).collect();
    }
    let (cb, objective) = learn_codebook_from_samples(
        &points,
        &weights,
        cfg.codebook_size,
        cfg.codes_per_vector,
        cfg.kmeans_iters,
        seeds[0],
    )?;
    let cb = cb.rounded_to_f32();
    let version_id = Codebook::content_version(&cb.codes);
    Ok((Codebook { version_id, ..cb }, objective))
}

/// Load the configured codebook if it exists, otherwise calibrate one.
pub fn obtain_codebook<T: Real>(cfg: &ExperimentConfig) -> Result<Codebook<T>> {
    if let Some(path) = &cfg.codebook_path {
        if path.exists() {
            let cb = Codebook::load(path, cfg.codes_per_vector)?;
            if cb.n_l() != cfg.codebook_size || cb.dim() != cfg.perception.channels {
                return Err(Error::Config(format!(
                    "codebook at {} has {} codes of dimension {}, configuration wants {} of {}",
                    path.display(),
                    cb.n_l(),
                    cb.dim(),
                    cfg.codebook_size,
                    cfg.perception.channels
                )));
            }
            return Ok(cb);
        }
    }
    Ok(calibrate_codebook(cfg, &cfg.calibration_seeds)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepAxis {
    Budget,
    Interval,
    Codebook,
    Latency,
    PoseError,
}

impl SweepAxis {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().replace('-', "_").as_str() {
            "budget" | "bandwidth" => Ok(Self::Budget),
            "interval" | "delta_t" | "dt" | "temporal" => Ok(Self::Interval),
            "codebook" => Ok(Self::Codebook),
            "latency" => Ok(Self::Latency),
            "pose_error" | "pose" => Ok(Self::PoseError),
            other => Err(Error::Config(format!(
                "unknown axis '{other}' (expected budget, interval, codebook, latency or pose_error)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Budget => "budget",
            Self::Interval => "interval",
            Self::Codebook => "codebook",
            Self::Latency => "latency",
            Self::PoseError => "pose_error",
        }
    }

    /// Configurations along this axis with their labels.
    pub fn settings(self, cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
        let with = |f: &dyn Fn(&mut ExperimentConfig)| {
            let mut c = cfg.clone();
            f(&mut c);
            c
        };
        match self {
            Self::Budget => cfg
                .budgets
                .iter()
                .map(|b| (format!("{b}"), with(&|c| c.budget = *b)))
                .collect(),
            Self::Interval => cfg
                .temporal_intervals
                .iter()
                .map(|d| (format!("{d}"), with(&|c| c.temporal_interval = *d)))
                .collect(),
            Self::Codebook => cfg
                .codebook_settings
                .iter()
                .map(|[l, r]| {
                    (
                        format!("{l}x{r}"),
                        with(&|c| {
                            c.codebook_size = *l;
                            c.codes_per_vector = *r;
                            c.codebook_path = None;
                        }),
                    )
                })
                .collect(),
            Self::Latency => cfg
                .latencies_ms
                .iter()
                .map(|ms| (format!("{ms}ms"), with(&|c| c.channel.latency = latency_steps(*ms))))
                .collect(),
            Self::PoseError => cfg
                .pose_errors
                .iter()
                .map(|p| (format!("{p}"), with(&|c| c.pose_error_std = *p)))
                .collect(),
        }
    }
}

/// Per-seed rows and the averaged records of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub axis: SweepAxis,
    pub runs: Vec<(u64, RunSummary)>,
    pub records: Vec<TradeoffRecord>,
}

/// Every setting of `axis` for every seed, averaged per setting.
pub fn sweep<T: Real>(cfg: &ExperimentConfig, axis: SweepAxis, seeds: &[u64]) -> Result<SweepOutcome> {
    let mut runs = Vec::new();
    let shared: Option<Codebook<T>> = if axis != SweepAxis::Codebook && cfg.needs_codebook() {
        Some(obtain_codebook(cfg)?)
    } else {
        None
    };
    for (label, setting) in axis.settings(cfg) {
        let own;
        let book = if axis == SweepAxis::Codebook && setting.needs_codebook() {
            own = calibrate_codebook::<T>(&setting, &setting.calibration_seeds)?.0;
            Some(&own)
        } else {
            shared.as_ref()
        };
        for &seed in seeds {
            let result = run_episode(&setting, seed, book)?;
            runs.push((seed, result.summary(&label)));
        }
    }
    let summaries: Vec<RunSummary> = runs.iter().map(|(_, r)| r.clone()).collect();
    let mut records = assemble_tradeoff(&summaries);
    if axis == SweepAxis::Budget {
        // keep budget order where traffic ties
        let order: Vec<String> = axis.settings(cfg).into_iter().map(|(l, _)| l).collect();
        records.sort_by(|a, b| {
            a.raw_bytes
                .partial_cmp(&b.raw_bytes)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(
                    order
                        .iter()
                        .position(|l| *l == a.budget)
                        .cmp(&order.iter().position(|l| *l == b.budget)),
                )
        });
    }
    Ok(SweepOutcome { axis, runs, records })
}

/// The full pipeline, each single-stage ablation, and the single-agent
/// baseline, averaged over seeds.
pub fn ablate<T: Real>(cfg: &ExperimentConfig, seeds: &[u64]) -> Result<Vec<TradeoffRecord>> {
    let base = ExperimentConfig {
        ablate: AblationFlags::default(),
        ..cfg.clone()
    };
    let variants: Vec<(&str, AblationFlags)> = vec![
        ("full", AblationFlags::default()),
        (
            "no_spatial",
            AblationFlags {
                spatial: true,
                ..Default::default()
            },
        ),
        (
            "no_temporal",
            AblationFlags {
                temporal: true,
                ..Default::default()
            },
        ),
        (
            "no_channel",
            AblationFlags {
                channel: true,
                ..Default::default()
            },
        ),
        (
            "no_predictor",
            AblationFlags {
                predictor: true,
                ..Default::default()
            },
        ),
        (
            "no_collaboration",
            AblationFlags {
                collaboration: true,
                ..Default::default()
            },
        ),
    ];
    let codebook: Codebook<T> = obtain_codebook(&base)?;
    let mut runs = Vec::new();
    for (name, flags) in variants {
        let setting = ExperimentConfig {
            ablate: flags,
            ..base.clone()
        };
        for &seed in seeds {
            runs.push(run_episode(&setting, seed, Some(&codebook))?.summary(name));
        }
    }
    Ok(assemble_tradeoff(&runs))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Write `agent,timestamp,confidence,x,y,h,w,alpha` rows.
pub fn write_detections_csv<T: Real, W: Write>(outputs: &[AgentOutput<T>], out: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(out);
    wtr.write_record(["agent", "timestamp", "confidence", "x", "y", "h", "w", "alpha"])?;
    for o in outputs {
        for (t, dets) in o.detections.iter().enumerate() {
            for d in dets {
                wtr.write_record(&[
                    o.agent_id.to_string(),
                    t.to_string(),
                    format!("{:.6}", d.confidence.as_f64()),
                    format!("{:.6}", d.x.as_f64()),
                    format!("{:.6}", d.y.as_f64()),
                    format!("{:.6}", d.h.as_f64()),
                    format!("{:.6}", d.w.as_f64()),
                    format!("{:.6}", d.heading.as_f64()),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Ground truth, detections, tracks, message ledger and a score summary of
/// one episode.
pub fn write_episode<T: Real>(result: &EpisodeResult<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let p = |name: &str| dir.join(name);
    write_ground_truth_csv(&result.ground_truth, create(&p("ground_truth.csv"))?)?;
    write_detections_csv(&result.collaborative, create(&p("detections.csv"))?)?;
    let tracks: Vec<TrackSet<T>> = result
        .collaborative
        .iter()
        .flat_map(|o| o.tracks.iter().cloned())
        .collect();
    write_tracks_csv(&tracks, create(&p("tracks.csv"))?)?;
    write_ledger_csv(&result.ledger, create(&p("ledger.csv"))?)?;
    let mut wtr = csv::Writer::from_writer(create(&p("summary.csv"))?);
    wtr.write_record(["mode", "raw_bytes", "paper_metric", "ap50", "ap70", "mota", "motp"])?;
    for (mode, bytes, s) in [
        ("collaborative", result.raw_bytes, result.scores),
        ("single_agent", 0, result.single_scores),
    ] {
        wtr.write_record(&[
            mode.to_string(),
            bytes.to_string(),
            format!("{:.6}", aggregate_metric(bytes)),
            format!("{:.6}", s.ap50),
            format!("{:.6}", s.ap70),
            format!("{:.6}", s.mota),
            format!("{:.6}", s.motp),
        ])?;
    }
    wtr.flush()?;
    Ok([
        "ground_truth.csv",
        "detections.csv",
        "tracks.csv",
        "ledger.csv",
        "summary.csv",
    ]
    .iter()
    .map(|n| p(n))
    .collect())
}

pub fn write_sweep(outcome: &SweepOutcome, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let name = outcome.axis.name();
    let path = dir.join(format!("sweep_{name}.csv"));
    write_tradeoff_csv(&outcome.records, create(&path)?)?;
    let mut wtr = csv::Writer::from_writer(create(&dir.join(format!("sweep_{name}_runs.csv")))?);
    wtr.write_record(["setting", "seed", "raw_bytes", "ap50", "ap70", "mota", "motp"])?;
    for (seed, r) in &outcome.runs {
        wtr.write_record(&[
            r.setting.clone(),
            seed.to_string(),
            r.raw_bytes.to_string(),
            format!("{:.6}", r.ap50),
            format!("{:.6}", r.ap70),
            format!("{:.6}", r.mota),
            format!("{:.6}", r.motp),
        ])?;
    }
    wtr.flush()?;
    Ok(path)
}

pub const PLOT_SCRIPT_NAME: &str = "plot_tradeoff.py";

const PLOT_SCRIPT: &str = r#"#!/usr/bin/env python3
"""Plot AP against communication volume for every sweep_*.csv next to this file.

usage: python3 plot_tradeoff.py [directory]
"""
import csv
import glob
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

root = sys.argv[1] if len(sys.argv) > 1 else os.path.dirname(os.path.abspath(__file__))
paths = sorted(p for p in glob.glob(os.path.join(root, "sweep_*.csv")) if not p.endswith("_runs.csv"))
paths += sorted(glob.glob(os.path.join(root, "ablation.csv")))
for path in paths:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        continue
    name = os.path.splitext(os.path.basename(path))[0]
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for ax, key, label in ((axes[0], "paper_metric", "log2(bytes per episode)"),
                           (axes[1], "raw_bytes", "bytes per episode")):
        x = [float(r[key]) for r in rows]
        for metric in ("ap50", "ap70"):
            ax.plot(x, [float(r[metric]) for r in rows], marker="o", label=metric.upper())
        for xi, r in zip(x, rows):
            ax.annotate(r["budget"], (xi, float(r["ap50"])), fontsize=7)
        ax.set_xlabel(label)
        ax.set_ylabel("AP")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.suptitle(name)
    fig.tight_layout()
    fig.savefig(os.path.join(root, name + ".png"), dpi=120)
    print("wrote", os.path.join(root, name + ".png"))
"#;

pub fn write_plot_script(dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(PLOT_SCRIPT_NAME);
    std::fs::write(&path, PLOT_SCRIPT)?;
    Ok(path)
}

pub fn write_ablation(records: &[TradeoffRecord], dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join("ablation.csv");
    write_tradeoff_csv(records, create(&path)?)?;
    Ok(path)
}
