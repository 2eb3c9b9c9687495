use std::collections::BTreeMap;

use graphalign::align::{curriculum_weights, DifficultyTracker, MetricRow};
use graphalign::encoder::{EncoderDims, GraphInput, MultiScaleEncoder};
use graphalign::graphdata::Target;
use graphalign::numcore::{row_cosine_similarity, softmax_with_temperature, Matrix, ParamSet};
use graphalign::persist::{
    decode_checkpoint, encode_checkpoint, export_metrics, read_metrics, Checkpoint, CheckpointMeta,
};
use graphalign::pretrain::{dr_clip_loss, DomainCenters, DomainWeightMatrix};
use proptest::collection::vec;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
}

/// Rows kept away from zero so cosines are well defined.
fn nonzero_matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
    matrix(rows, cols).prop_filter("rows need a usable norm", |m| {
        m.iter_rows().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 1e-2)
    })
}

fn centers(domains: usize, dim: usize) -> impl Strategy<Value = DomainCenters> {
    (nonzero_matrix(domains, dim), nonzero_matrix(domains, dim)).prop_map(move |(g, t)| DomainCenters {
        domains: (0..domains).map(|d| format!("d{d}")).collect(),
        graph: g.iter_rows().map(<[f64]>::to_vec).collect(),
        text: t.iter_rows().map(<[f64]>::to_vec).collect(),
        sampled: vec![1; domains],
    })
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(v in vec(-50.0f64..50.0, 1..12), tau in 0.01f64..100.0) {
        let w = softmax_with_temperature(&v, tau).unwrap();
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
        if spread / tau < 700.0 {
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_stays_in_range(a in nonzero_matrix(4, 5), b in nonzero_matrix(3, 5)) {
        let s = row_cosine_similarity(&a, &b).unwrap();
        prop_assert!(s.as_slice().iter().all(|&c| (-1.0 - 1e-12..=1.0 + 1e-12).contains(&c)));
    }

    #[test]
    fn weight_matrices_are_well_formed(c in (2usize..6, 2usize..6).prop_flat_map(|(k, d)| centers(k, d))) {
        let w = DomainWeightMatrix::from_centers(&c).unwrap();
        let k = c.domains.len();
        for (m, wm) in [(&w.m_graph, &w.w_graph), (&w.m_text, &w.w_text)] {
            let mut max = 0.0f64;
            for a in 0..k {
                prop_assert_eq!(wm.get(a, a), 1.0);
                for b in 0..k {
                    prop_assert_eq!(wm.get(a, b), wm.get(b, a));
                    prop_assert!((1.0..=2.0).contains(&wm.get(a, b)));
                    prop_assert_eq!(wm.get(a, b), 1.0 + m.get(a, b));
                    max = max.max(m.get(a, b));
                }
            }
            prop_assert_eq!(max, 1.0);
        }
    }

    #[test]
    fn contrastive_loss_ignores_row_scale(
        (x, t, scales) in (1usize..8).prop_flat_map(|n| (nonzero_matrix(n, 4), nonzero_matrix(n, 4), vec(0.1f64..10.0, n))),
        tau in 0.05f64..2.0,
    ) {
        let n = x.rows();
        let ones = Matrix::filled(1, 1, 1.0);
        let domains = vec![0; n];
        let base = dr_clip_loss(&x, &t, &domains, &ones, &ones, tau).unwrap().loss;
        let mut xs = x.clone();
        for (r, s) in scales.iter().enumerate() {
            for v in xs.row_mut(r) {
                *v *= s;
            }
        }
        let scaled = dr_clip_loss(&xs, &t, &domains, &ones, &ones, tau).unwrap().loss;
        prop_assert!((base - scaled).abs() < 1e-10 * base.abs().max(1.0));
    }

    #[test]
    fn warmup_estimate_is_the_plain_average(obs in vec(0.0f64..5.0, 1..40)) {
        let mut t = DifficultyTracker::new(1000, 1.0, 0.7).unwrap();
        for (k, &g) in obs.iter().enumerate() {
            t.update(k + 1, &BTreeMap::from([(0, g)])).unwrap();
        }
        let mut sum = 0.0;
        for &g in &obs {
            sum += g;
        }
        prop_assert_eq!(t.smoothed(0).unwrap(), sum / obs.len() as f64);
    }

    #[test]
    fn inactive_domains_are_bit_invariant(first in 0.0f64..5.0, later in vec(0.0f64..5.0, 1..20), warm in 0.0f64..1.0) {
        let mut t = DifficultyTracker::new(30, warm, 0.7).unwrap();
        t.update(1, &BTreeMap::from([(0, first), (1, first + 1.0)])).unwrap();
        let held = t.domains[&1].clone();
        for (k, &g) in later.iter().enumerate() {
            t.update(k + 2, &BTreeMap::from([(0, g)])).unwrap();
        }
        prop_assert_eq!(t.smoothed(1).map(f64::to_bits), held.smoothed.map(f64::to_bits));
        prop_assert_eq!(&t.domains[&1], &held);
    }

    #[test]
    fn curriculum_weights_order_and_shift(g in vec(0.0f64..3.0, 2..6), shift in -5.0f64..5.0, tau in 0.1f64..10.0) {
        let mut a = DifficultyTracker::new(10, 0.0, 0.5).unwrap();
        let mut b = a.clone();
        a.update(1, &g.iter().copied().enumerate().collect()).unwrap();
        b.update(1, &g.iter().map(|v| v + shift.abs()).enumerate().collect()).unwrap();
        let active: Vec<usize> = (0..g.len()).collect();
        let wa = curriculum_weights(&a, &active, tau).unwrap();
        let wb = curriculum_weights(&b, &active, tau).unwrap();
        prop_assert!((wa.values().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..g.len() {
            prop_assert!((wa[&i] - wb[&i]).abs() < 1e-12);
            for j in 0..g.len() {
                if g[i] > g[j] {
                    prop_assert!(wa[&i] > wa[&j]);
                }
            }
        }
    }

    #[test]
    fn encoder_is_permutation_equivariant(
        n in 2usize..7,
        seed in 0u64..1000,
        perm_seed in any::<u64>(),
        feats in vec(-2.0f64..2.0, 7 * 3),
        extra in vec((0usize..7, 0usize..7), 0..8),
    ) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let dims = EncoderDims { input_dim: 3, hidden_dim: 4, layers: 2 };
        let enc = MultiScaleEncoder::new(dims, seed).unwrap();
        let features = Matrix::from_vec(n, 3, feats[..n * 3].to_vec()).unwrap();
        let mut edges: Vec<(usize, usize)> = (1..n).flat_map(|v| [(v - 1, v), (v, v - 1)]).collect();
        edges.extend(extra.iter().map(|&(u, v)| (u % n, v % n)).filter(|(u, v)| u != v));

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
        let mut moved = Matrix::zeros(n, 3);
        for i in 0..n {
            moved.row_mut(perm[i]).copy_from_slice(features.row(i));
        }
        let moved_edges: Vec<(usize, usize)> = edges.iter().map(|&(u, v)| (perm[u], perm[v])).collect();

        let input = |f, e, target: Target| GraphInput { task: target.kind(), features: f, edges: e, target };
        let (h, g, _) = enc.encode_node_graph(&input(&features, &edges, Target::Graph)).unwrap();
        let (h2, g2, _) = enc.encode_node_graph(&input(&moved, &moved_edges, Target::Graph)).unwrap();
        for (a, b) in g.iter().zip(&g2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for i in 0..n {
            for (a, b) in h.row(i).iter().zip(h2.row(perm[i])) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
        let (e1, _) = enc.task_representation(&input(&features, &edges, Target::Edge(0, 1))).unwrap();
        let (e2, _) = enc.task_representation(&input(&moved, &moved_edges, Target::Edge(perm[0], perm[1]))).unwrap();
        for (a, b) in e1.iter().zip(&e2) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise(
        shapes in vec((1usize..4, 1usize..5), 0..5),
        bits in vec(any::<u64>(), 60),
        seed in any::<u64>(),
    ) {
        let mut tensors = ParamSet::new();
        let mut it = bits.iter().cycle();
        for (i, (r, c)) in shapes.iter().enumerate() {
            let data = (0..r * c).map(|_| f64::from_bits(*it.next().unwrap())).collect();
            tensors.push(format!("t{i}"), Matrix::from_vec(*r, *c, data).unwrap()).unwrap();
        }
        let ckpt = Checkpoint {
            meta: CheckpointMeta {
                stage: "test".into(),
                seed,
                step: 3,
                domains: vec!["x".into()],
                config: serde_json::json!({"k": 1}),
                extra: serde_json::Value::Null,
            },
            tensors,
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        for (a, b) in ckpt.tensors.values().iter().zip(back.tensors.values()) {
            let x: Vec<u64> = a.as_slice().iter().map(|v| v.to_bits()).collect();
            let y: Vec<u64> = b.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(x, y);
        }
    }

    #[test]
    fn metrics_round_trip_exactly(values in vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 4..40)) {
        let rows: Vec<MetricRow> = values
            .chunks_exact(4)
            .enumerate()
            .map(|(i, c)| MetricRow {
                step: i + 1,
                domain: format!("d{}", i % 3),
                loss: c[0],
                grad_norm: c[1],
                smoothed: c[2],
                weight: c[3],
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        export_metrics(&rows, &path).unwrap();
        let back = read_metrics(&path).unwrap();
        prop_assert_eq!(back.len(), rows.len());
        for (a, b) in rows.iter().zip(&back) {
            prop_assert_eq!(a.loss.to_bits(), b.loss.to_bits());
            prop_assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
            prop_assert_eq!(a.smoothed.to_bits(), b.smoothed.to_bits());
            prop_assert_eq!(a.weight.to_bits(), b.weight.to_bits());
        }
    }
}
