//! Detection and tracking scores, and the rows of the trade-off curves.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::assignment::max_weight_matching;
use crate::error::{Error, Result};
use crate::exchange::aggregate_metric;
use crate::geometry::{rotated_iou, RotatedBox};
use crate::perception::DetectionBox;
use crate::scalar::Real;
use crate::scenario::GroundTruthFrame;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub confidence: f64,
    pub precision: f64,
    pub recall: f64,
}

fn f64_box<T: Real>(d: &DetectionBox<T>) -> RotatedBox<f64> {
    RotatedBox::new(
        d.x.as_f64(),
        d.y.as_f64(),
        d.h.as_f64(),
        d.w.as_f64(),
        d.heading.as_f64(),
    )
}

fn iou_if_close(a: &RotatedBox<f64>, b: &RotatedBox<f64>) -> f64 {
    let reach = a.bounding_radius() + b.bounding_radius();
    if (a.x - b.x).powi(2) + (a.y - b.y).powi(2) > reach * reach {
        return 0.0;
    }
    rotated_iou(a, b)
}

/// Precision/recall after each detection, in descending confidence, with
/// greedy matching to the best unmatched ground truth box of the same frame.
pub fn precision_recall<T: Real>(
    dets: &[(DetectionBox<T>, usize)],
    gt: &[GroundTruthFrame],
    iou_thr: f64,
) -> Result<Vec<PrPoint>> {
    if !(iou_thr > 0.0 && iou_thr <= 1.0) {
        return Err(Error::Config(format!("IoU threshold {iou_thr} outside (0, 1]")));
    }
    let total: usize = gt.iter().map(|f| f.objects.len()).sum();
    if total == 0 {
        return Err(Error::EmptyGroundTruth);
    }
    let frames: HashMap<usize, Vec<RotatedBox<f64>>> = gt
        .iter()
        .map(|f| (f.timestamp, f.objects.iter().map(|o| o.to_box()).collect()))
        .collect();
    let mut matched: HashMap<usize, Vec<bool>> = frames.iter().map(|(k, v)| (*k, vec![false; v.len()])).collect();

    let mut order: Vec<(f64, usize, RotatedBox<f64>)> = dets
        .iter()
        .map(|(d, f)| (d.confidence.as_f64(), *f, f64_box(d)))
        .collect();
    order.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.x.partial_cmp(&b.2.x).unwrap_or(Ordering::Equal))
            .then(a.2.y.partial_cmp(&b.2.y).unwrap_or(Ordering::Equal))
            .then(a.2.heading.partial_cmp(&b.2.heading).unwrap_or(Ordering::Equal))
    });

    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(order.len());
    for (k, (conf, frame, bx)) in order.iter().enumerate() {
        if let (Some(boxes), Some(used)) = (frames.get(frame), matched.get_mut(frame)) {
            let mut best = (None, iou_thr);
            for (g, gb) in boxes.iter().enumerate() {
                if used[g] {
                    continue;
                }
                let iou = iou_if_close(bx, gb);
                if iou >= best.1 {
                    best = (Some(g), iou);
                }
            }
            if let Some(g) = best.0 {
                used[g] = true;
                tp += 1;
            }
        }
        curve.push(PrPoint {
            confidence: *conf,
            precision: tp as f64 / (k + 1) as f64,
            recall: tp as f64 / total as f64,
        });
    }
    Ok(curve)
}

/// All-point interpolated average precision.
pub fn average_precision<T: Real>(
    dets: &[(DetectionBox<T>, usize)],
    gt: &[GroundTruthFrame],
    iou_thr: f64,
) -> Result<f64> {
    let curve = precision_recall(dets, gt, iou_thr)?;
    let mut envelope: Vec<f64> = curve.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(&envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrackingReport {
    pub mota: f64,
    pub motp: f64,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub id_switches: usize,
    pub gt_count: usize,
    pub matches: usize,
    pub iou_sum: f64,
}

impl TrackingReport {
    fn finish(mut self) -> Self {
        self.mota = if self.gt_count > 0 {
            1.0 - (self.false_negatives + self.false_positives + self.id_switches) as f64 / self.gt_count as f64
        } else {
            0.0
        };
        self.motp = if self.matches > 0 {
            self.iou_sum / self.matches as f64
        } else {
            0.0
        };
        self
    }

    /// Pool the counts of independent sequences.
    pub fn combine(reports: &[TrackingReport]) -> TrackingReport {
        let mut out = TrackingReport::default();
        for r in reports {
            out.false_negatives += r.false_negatives;
            out.false_positives += r.false_positives;
            out.id_switches += r.id_switches;
            out.gt_count += r.gt_count;
            out.matches += r.matches;
            out.iou_sum += r.iou_sum;
        }
        out.finish()
    }
}

/// Tracker output at one timestamp: `(track_id, box)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackFrame {
    pub timestamp: usize,
    pub tracks: Vec<(u32, RotatedBox<f64>)>,
}

/// CLEAR-MOT over one track sequence. Matches are gated by center distance;
/// a ground truth object keeps last frame's track while it stays in the
/// gate, the rest are matched by minimum total distance.
pub fn clear_mot(tracks: &[TrackFrame], gt: &[GroundTruthFrame], dist_thr: f64) -> Result<TrackingReport> {
    if !(dist_thr > 0.0) {
        return Err(Error::Config(format!("distance gate {dist_thr} must be positive")));
    }
    if gt.iter().all(|f| f.objects.is_empty()) {
        return Err(Error::EmptyGroundTruth);
    }
    let by_time: HashMap<usize, &TrackFrame> = tracks.iter().map(|f| (f.timestamp, f)).collect();
    let empty = TrackFrame {
        timestamp: 0,
        tracks: Vec::new(),
    };
    let mut report = TrackingReport::default();
    let mut last: HashMap<u32, u32> = HashMap::new();
    for frame in gt {
        let hyp = by_time.get(&frame.timestamp).copied().unwrap_or(&empty);
        let dist = |g: usize, h: usize| {
            let o = &frame.objects[g];
            let b = &hyp.tracks[h].1;
            ((o.x - b.x).powi(2) + (o.y - b.y).powi(2)).sqrt()
        };
        let mut gt_match: Vec<Option<usize>> = vec![None; frame.objects.len()];
        let mut hyp_used = vec![false; hyp.tracks.len()];
        for (g, o) in frame.objects.iter().enumerate() {
            if let Some(&tid) = last.get(&o.id) {
                if let Some(h) = hyp.tracks.iter().position(|(id, _)| *id == tid) {
                    if !hyp_used[h] && dist(g, h) <= dist_thr {
                        gt_match[g] = Some(h);
                        hyp_used[h] = true;
                    }
                }
            }
        }
        let free_g: Vec<usize> = (0..frame.objects.len()).filter(|g| gt_match[*g].is_none()).collect();
        let free_h: Vec<usize> = (0..hyp.tracks.len()).filter(|h| !hyp_used[*h]).collect();
        let mut weights = vec![0.0; free_g.len() * free_h.len()];
        for (a, &g) in free_g.iter().enumerate() {
            for (b, &h) in free_h.iter().enumerate() {
                let d = dist(g, h);
                weights[a * free_h.len() + b] = if d <= dist_thr { 1.0 + dist_thr - d } else { 0.0 };
            }
        }
        for (a, m) in max_weight_matching(&weights, free_g.len(), free_h.len())
            .into_iter()
            .enumerate()
        {
            if let Some(b) = m {
                let (g, h) = (free_g[a], free_h[b]);
                if dist(g, h) <= dist_thr {
                    gt_match[g] = Some(h);
                    hyp_used[h] = true;
                }
            }
        }
        for (g, m) in gt_match.iter().enumerate() {
            let o = &frame.objects[g];
            match m {
                Some(h) => {
                    let tid = hyp.tracks[*h].0;
                    if last.get(&o.id).is_some_and(|prev| *prev != tid) {
                        report.id_switches += 1;
                    }
                    last.insert(o.id, tid);
                    report.matches += 1;
                    report.iou_sum += iou_if_close(&o.to_box(), &hyp.tracks[*h].1);
                }
                None => report.false_negatives += 1,
            }
        }
        report.false_positives += hyp_used.iter().filter(|u| !**u).count();
        report.gt_count += frame.objects.len();
    }
    Ok(report.finish())
}

/// Scores and traffic of one episode at one setting.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub setting: String,
    pub raw_bytes: usize,
    pub ap50: f64,
    pub ap70: f64,
    pub mota: f64,
    pub motp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub budget: String,
    /// Mean bytes on the wire per episode.
    pub raw_bytes: f64,
    /// Log2 of `raw_bytes`.
    pub paper_metric: f64,
    pub ap50: f64,
    pub ap70: f64,
    pub mota: f64,
    pub motp: f64,
}

/// One record per setting, averaged over its runs and sorted by bytes.
pub fn assemble_tradeoff(runs: &[RunSummary]) -> Vec<TradeoffRecord> {
    let mut groups: BTreeMap<&str, (usize, Vec<&RunSummary>)> = BTreeMap::new();
    for (i, r) in runs.iter().enumerate() {
        groups.entry(r.setting.as_str()).or_insert((i, Vec::new())).1.push(r);
    }
    let mut ordered: Vec<(usize, TradeoffRecord)> = groups
        .into_iter()
        .map(|(setting, (first, rs))| {
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&RunSummary) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            let raw_bytes = mean(&|r| r.raw_bytes as f64);
            (
                first,
                TradeoffRecord {
                    budget: setting.to_string(),
                    raw_bytes,
                    paper_metric: aggregate_metric(raw_bytes.round() as usize),
                    ap50: mean(&|r| r.ap50),
                    ap70: mean(&|r| r.ap70),
                    mota: mean(&|r| r.mota),
                    motp: mean(&|r| r.motp),
                },
            )
        })
        .collect();
    ordered.sort_by(|a, b| {
        a.1.raw_bytes
            .partial_cmp(&b.1.raw_bytes)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    ordered.into_iter().map(|(_, r)| r).collect()
}

pub fn write_tradeoff_csv<W: Write>(records: &[TradeoffRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    if records.is_empty() {
        w.write_record(["budget", "raw_bytes", "paper_metric", "ap50", "ap70", "mota", "motp"])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::ObjectState;

    fn obj(id: u32, x: f64, y: f64) -> ObjectState {
        ObjectState {
            id,
            x,
            y,
            h: 4.0,
            w: 2.0,
            heading: 0.0,
            vx: 0.0,
            vy: 0.0,
        }
    }

    fn det(conf: f64, x: f64, y: f64) -> DetectionBox<f64> {
        DetectionBox {
            confidence: conf,
            x,
            y,
            h: 4.0,
            w: 2.0,
            heading: 0.0,
            cell: (0, 0),
        }
    }

    fn frame(t: usize, objects: Vec<ObjectState>) -> GroundTruthFrame {
        GroundTruthFrame { timestamp: t, objects }
    }

    #[test]
    fn ap_hand_cases() {
        let gt = vec![frame(0, vec![obj(0, 10.0, 10.0), obj(1, 30.0, 10.0)])];
        let perfect = vec![(det(1.0, 10.0, 10.0), 0), (det(1.0, 30.0, 10.0), 0)];
        assert_eq!(average_precision(&perfect, &gt, 0.5).unwrap(), 1.0);
        assert_eq!(average_precision::<f64>(&[], &gt, 0.5).unwrap(), 0.0);
        let ranked = vec![
            (det(0.9, 10.0, 10.0), 0),
            (det(0.8, 50.0, 50.0), 0),
            (det(0.7, 30.0, 10.0), 0),
        ];
        let ap = average_precision(&ranked, &gt, 0.5).unwrap();
        assert!((ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
        assert!(matches!(
            average_precision(&ranked, &[frame(0, vec![])], 0.5),
            Err(Error::EmptyGroundTruth)
        ));
    }

    #[test]
    fn ap_threshold_and_duplicates() {
        let gt = vec![frame(0, vec![obj(0, 10.0, 10.0)])];
        // shifted 1 m along the length: IoU 0.6
        let d = vec![(det(0.9, 11.0, 10.0), 0)];
        assert_eq!(average_precision(&d, &gt, 0.5).unwrap(), 1.0);
        assert_eq!(average_precision(&d, &gt, 0.7).unwrap(), 0.0);
        let dup = vec![(det(0.9, 10.0, 10.0), 0), (det(0.8, 10.0, 10.0), 0)];
        assert_eq!(average_precision(&dup, &gt, 0.5).unwrap(), 1.0);
        let wrong_frame = vec![(det(0.9, 10.0, 10.0), 1)];
        assert_eq!(average_precision(&wrong_frame, &gt, 0.5).unwrap(), 0.0);
    }

    fn tf(t: usize, tracks: Vec<(u32, f64, f64)>) -> TrackFrame {
        TrackFrame {
            timestamp: t,
            tracks: tracks
                .into_iter()
                .map(|(id, x, y)| (id, RotatedBox::new(x, y, 4.0, 2.0, 0.0)))
                .collect(),
        }
    }

    #[test]
    fn mot_perfect() {
        let gt: Vec<_> = (0..5)
            .map(|t| frame(t, vec![obj(0, t as f64, 0.0), obj(1, 20.0, t as f64)]))
            .collect();
        let tr: Vec<_> = (0..5)
            .map(|t| tf(t, vec![(7, t as f64, 0.0), (9, 20.0, t as f64)]))
            .collect();
        let r = clear_mot(&tr, &gt, 2.0).unwrap();
        assert_eq!(r.mota, 1.0);
        assert_eq!(r.id_switches, 0);
        assert!((r.motp - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mot_counts_by_hand() {
        // 10 ground-truth instances over 5 frames; one miss, one false alarm
        let gt: Vec<_> = (0..5)
            .map(|t| frame(t, vec![obj(0, 0.0, 0.0), obj(1, 20.0, 0.0)]))
            .collect();
        let mut tr: Vec<_> = (0..5).map(|t| tf(t, vec![(1, 0.0, 0.0), (2, 20.0, 0.0)])).collect();
        tr[2].tracks.remove(1);
        tr[3].tracks.push((3, RotatedBox::new(50.0, 50.0, 4.0, 2.0, 0.0)));
        let r = clear_mot(&tr, &gt, 2.0).unwrap();
        assert_eq!(
            (r.false_negatives, r.false_positives, r.id_switches, r.gt_count),
            (1, 1, 0, 10)
        );
        assert!((r.mota - 0.8).abs() < 1e-12);
    }

    #[test]
    fn relabel_costs_one_switch() {
        let gt: Vec<_> = (0..6).map(|t| frame(t, vec![obj(0, t as f64, 0.0)])).collect();
        let tr: Vec<_> = (0..6)
            .map(|t| tf(t, vec![(if t < 3 { 4 } else { 8 }, t as f64, 0.0)]))
            .collect();
        let r = clear_mot(&tr, &gt, 2.0).unwrap();
        assert_eq!(r.id_switches, 1);
        assert!((r.mota - (1.0 - 1.0 / 6.0)).abs() < 1e-12);
    }

    #[test]
    fn continuity_beats_closer_newcomer() {
        let gt = vec![frame(0, vec![obj(0, 0.0, 0.0)]), frame(1, vec![obj(0, 0.0, 0.0)])];
        let tr = vec![tf(0, vec![(1, 1.5, 0.0)]), tf(1, vec![(1, 1.5, 0.0), (2, 0.0, 0.0)])];
        let r = clear_mot(&tr, &gt, 2.0).unwrap();
        assert_eq!(r.id_switches, 0);
        assert_eq!(r.false_positives, 1);
    }

    #[test]
    fn tradeoff_assembly() {
        let run = |s: &str, b: usize, ap: f64| RunSummary {
            setting: s.into(),
            raw_bytes: b,
            ap50: ap,
            ap70: ap / 2.0,
            mota: 0.5,
            motp: 0.7,
        };
        let one = assemble_tradeoff(&[run("1.0", 1024, 0.8)]);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].paper_metric, 10.0);
        assert_eq!(one[0].ap50, 0.8);
        let recs = assemble_tradeoff(&[run("1.0", 4000, 0.8), run("0.1", 100, 0.5), run("1.0", 2000, 0.6)]);
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].budget, "0.1");
        assert_eq!(recs[1].raw_bytes, 3000.0);
        assert!((recs[1].ap50 - 0.7).abs() < 1e-12);
    }

    #[test]
    fn tradeoff_csv_header() {
        let mut buf = Vec::new();
        write_tradeoff_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "budget,raw_bytes,paper_metric,ap50,ap70,mota,motp\n"
        );
    }
}
