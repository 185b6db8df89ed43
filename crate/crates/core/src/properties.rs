//! Property tests over randomly generated inputs.

use nalgebra::DMatrix;
use proptest::collection::vec;
use proptest::prelude::*;

use crate::compression::{spatial_select, weighted_kmeans, CodeIndexGrid, Codebook, SparseFeatureMap};
use crate::exchange::{comm_volume, pack, unpack, PragmaticMessage};
use crate::perception::{ConfidenceMap, DetectionBox};
use crate::tracker::{Tracker, TrackerConfig};
use crate::utilization::{accumulate, fuse, warp, FlowMap};

fn grid_strategy() -> impl Strategy<Value = (usize, usize, CodeIndexGrid)> {
    (1usize..=1024, 1usize..=3, 1usize..30, 1usize..30).prop_flat_map(|(n_l, n_r, h, w)| {
        vec(((0..h, 0..w), vec(0..n_l as u32, n_r)), 0..50).prop_map(move |cells| {
            let grid = CodeIndexGrid {
                height: h,
                width: w,
                n_r,
                entries: cells.into_iter().collect(),
            };
            (n_l, n_r, grid)
        })
    })
}

fn sparse(agent: u32, h: usize, w: usize, c: usize, cells: Vec<(usize, Vec<f64>)>) -> SparseFeatureMap<f64> {
    let mut z = SparseFeatureMap::empty(agent, 0, h, w, c);
    for (idx, v) in cells {
        z.cells.insert(((idx / w) % h, idx % w), v);
    }
    z
}

fn cells_strategy(c: usize) -> impl Strategy<Value = Vec<(usize, Vec<f64>)>> {
    vec((0usize..20, vec(-2.0f64..2.0, c)), 0..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn pack_round_trips((n_l, n_r, grid) in grid_strategy(), version in any::<u32>(), t in 0usize..1000) {
        let cb = Codebook { codes: vec![vec![0.0f64]; n_l], n_r, version_id: version };
        let msg = pack(&grid, 1, 2, t, &cb).unwrap();
        let bytes = msg.to_bytes();
        prop_assert_eq!(bytes.len(), comm_volume(&msg).raw_bytes);
        let back = PragmaticMessage::from_bytes(&bytes, n_l, n_r, 1).unwrap();
        prop_assert_eq!(&back, &msg);
        prop_assert_eq!(unpack(&back, grid.height, grid.width).unwrap(), grid);
    }

    #[test]
    fn truncated_messages_are_rejected((n_l, n_r, grid) in grid_strategy(), cut in 1usize..8) {
        let cb = Codebook { codes: vec![vec![0.0f64]; n_l], n_r, version_id: 0 };
        let bytes = pack(&grid, 0, 1, 0, &cb).unwrap().to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(PragmaticMessage::from_bytes(&bytes[..keep], n_l, n_r, 1).is_err());
    }

    #[test]
    fn fusion_commutes_and_is_idempotent(
        ego in cells_strategy(3),
        a in cells_strategy(3),
        b in cells_strategy(3),
    ) {
        let (h, w) = (4, 5);
        let ego = sparse(0, h, w, 3, ego).to_dense();
        let a = sparse(1, h, w, 3, a);
        let b = sparse(2, h, w, 3, b);
        let ab = fuse(&ego, &[a.clone(), b.clone()], None).unwrap();
        let ba = fuse(&ego, &[b.clone(), a.clone()], None).unwrap();
        prop_assert_eq!(&ab, &ba);
        let aa = fuse(&ego, &[a.clone(), a.clone()], None).unwrap();
        prop_assert_eq!(aa, fuse(&ego, std::slice::from_ref(&a), None).unwrap());
        // fusing an already fused map with its inputs changes nothing
        let again = fuse(&ab.feature, &[a, b], None).unwrap();
        prop_assert_eq!(again.feature, ab.feature);
    }

    #[test]
    fn fusion_is_an_upper_bound(ego in cells_strategy(2), a in cells_strategy(2)) {
        let ego = sparse(0, 4, 5, 2, ego).to_dense();
        let a = sparse(1, 4, 5, 2, a);
        let fused = fuse(&ego, std::slice::from_ref(&a), None).unwrap();
        for (k, v) in fused.feature.values.iter().enumerate() {
            prop_assert!(*v >= ego.values[k]);
        }
        for (&(r, c), v) in &a.cells {
            for (ch, x) in v.iter().enumerate() {
                prop_assert!(fused.feature.cell(r, c)[ch] >= *x);
            }
        }
    }

    #[test]
    fn warp_moves_without_creating_cells(
        cells in cells_strategy(2),
        flows in vec((-3i32..=3, -3i32..=3), 20),
    ) {
        let (h, w) = (4, 5);
        let z = sparse(1, h, w, 2, cells);
        let hist = accumulate(&[z], None, 0, 0, (h, w, 2)).unwrap();
        let flow = FlowMap { height: h, width: w, values: flows };
        let moved = warp(&hist, &flow).unwrap();
        prop_assert!(moved.present_cells() <= hist.present_cells());
        let zero = warp(&hist, &FlowMap::zeros(h, w)).unwrap();
        prop_assert_eq!(zero.feature.values, hist.feature.values);
    }

    #[test]
    fn spatial_select_keeps_the_top(values in vec(0.0f64..1.0, 1..80), budget in 0usize..100) {
        let n = values.len();
        let mask = spatial_select(&ConfidenceMap { height: 1, width: n, values: values.clone() }, budget);
        prop_assert_eq!(mask.count(), budget.min(n));
        let lowest_kept = (0..n).filter(|&i| mask.values[i]).map(|i| values[i]).fold(f64::INFINITY, f64::min);
        let highest_dropped = (0..n).filter(|&i| !mask.values[i]).map(|i| values[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lowest_kept >= highest_dropped);
    }

    #[test]
    fn kmeans_objective_never_increases(
        points in vec(vec(-5.0f64..5.0, 3), 12..60),
        k in 1usize..6,
        seed in any::<u64>(),
    ) {
        let weights: Vec<f64> = (0..points.len()).map(|i| 0.1 + (i % 7) as f64 / 7.0).collect();
        let fit = weighted_kmeans(&points, &weights, k, 8, seed).unwrap();
        prop_assert_eq!(fit.objective.len(), 9);
        for pair in fit.objective.windows(2) {
            prop_assert!(pair[1] <= pair[0] * (1.0 + 1e-12) + 1e-12);
        }
    }

    #[test]
    fn codebook_bytes_round_trip(codes in vec(vec(-10.0f32..10.0, 4), 1..40), n_r in 1usize..3) {
        let codes: Vec<Vec<f64>> = codes.iter().map(|c| c.iter().map(|v| *v as f64).collect()).collect();
        let version_id = Codebook::<f64>::content_version(&codes);
        let cb = Codebook { codes, n_r, version_id };
        let back = Codebook::<f64>::from_bytes(&cb.to_bytes(), n_r).unwrap();
        prop_assert_eq!(back, cb);
    }

    #[test]
    fn kalman_covariance_stays_psd(
        frames in vec(vec((0.0f64..30.0, 0.0f64..30.0, -3.2f64..3.2, 0.5f64..1.0), 0..6), 1..25),
    ) {
        let mut tracker = Tracker::<f64>::new(0, TrackerConfig::default());
        for (t, dets) in frames.iter().enumerate() {
            let dets: Vec<DetectionBox<f64>> = dets
                .iter()
                .map(|&(x, y, heading, confidence)| DetectionBox { confidence, x, y, h: 4.0, w: 2.0, heading, cell: (0, 0) })
                .collect();
            for track in &tracker.step(t, &dets).unwrap().tracks {
                let cov = &track.covariance;
                let m = DMatrix::from_row_slice(cov.rows, cov.cols, &cov.data);
                prop_assert!((&m - m.transpose()).abs().max() < 1e-9);
                prop_assert!(m.symmetric_eigen().eigenvalues.min() >= -1e-9);
            }
        }
    }
}
