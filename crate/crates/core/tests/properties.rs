mod common;

use common::{random_labels, random_sphere};
use proptest::prelude::*;
use projnce::losses::*;
use projnce::miest::{bound_prop1, bound_softnce, mixed_ksg, BoundTerms, KsgOptions};
use projnce::numerics::{Mat64, RngState};
use projnce::projections::*;

fn config(kind: LossKind, metric: Metric) -> LossConfig {
    let mut c = LossConfig::new(kind);
    c.kernel = KernelConfig::new(1.2, metric).unwrap();
    c
}

fn random_orthogonal(d: usize, rng: &mut RngState) -> Mat64 {
    let mut q: Vec<Vec<f64>> = Vec::new();
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        for u in &q {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            q.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Mat64::from_rows(&q).unwrap()
}

fn signed_permutation(d: usize, rng: &mut RngState) -> Mat64 {
    let perm = rng.permutation(d);
    let mut m = Mat64::zeros(d, d);
    for (r, &c) in perm.iter().enumerate() {
        m[(r, c)] = if rng.below(2) == 0 { 1.0 } else { -1.0 };
    }
    m
}

fn rotate(z: &Mat64, q: &Mat64) -> Mat64 {
    z.matmul(&q.transpose()).unwrap()
}

fn batch(z: Mat64, y: Vec<usize>, m: usize) -> EmbeddingBatch {
    EmbeddingBatch::new_unchecked(z, y, m, DEFAULT_TEMPERATURE).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn losses_ignore_batch_order(seed in any::<u64>(), n in 6usize..12, m in 2usize..4, d in 2usize..5) {
        let mut rng = RngState::new(seed);
        let z = random_sphere(n, d, &mut rng);
        let y = random_labels(n, m, &mut rng);
        let perm = rng.permutation(n);
        let mut inv = vec![0; n];
        for (a, &p) in perm.iter().enumerate() { inv[p] = a; }
        let zp = z.select_rows(&perm);
        let yp: Vec<usize> = perm.iter().map(|&p| y[p]).collect();
        let base = batch(z.clone(), y.clone(), m);
        let partners: Vec<usize> = base.partner_map().into_iter().map(Option::unwrap).collect();
        let pp: Vec<usize> = perm.iter().map(|&p| inv[partners[p]]).collect();
        for kind in LossKind::TRAINABLE {
            let cfg = config(kind, Metric::L1);
            let (a, b) = if kind == LossKind::Infonce {
                (
                    evaluate_loss(&base.clone().with_positives(partners.clone()).unwrap(), &cfg).unwrap(),
                    evaluate_loss(&batch(zp.clone(), yp.clone(), m).with_positives(pp.clone()).unwrap(), &cfg).unwrap(),
                )
            } else {
                (evaluate_loss(&base, &cfg).unwrap(), evaluate_loss(&batch(zp.clone(), yp.clone(), m), &cfg).unwrap())
            };
            prop_assert!((a.total - b.total).abs() <= 1e-12, "{:?}: {} vs {}", kind, a.total, b.total);
            for i in 0..n {
                for t in 0..d {
                    prop_assert!((a.d_loss_d_z[(perm[i], t)] - b.d_loss_d_z[(i, t)]).abs() <= 1e-10);
                }
            }
        }
    }

    #[test]
    fn losses_ignore_global_rotation(seed in any::<u64>(), n in 6usize..12, m in 2usize..4, d in 2usize..5) {
        let mut rng = RngState::new(seed);
        let z = random_sphere(n, d, &mut rng);
        let y = random_labels(n, m, &mut rng);
        let q = random_orthogonal(d, &mut rng);
        let s = signed_permutation(d, &mut rng);
        let cases = [
            (LossKind::Infonce, Metric::L2),
            (LossKind::Supcon, Metric::L2),
            (LossKind::Projnce, Metric::L2),
            (LossKind::Softnce, Metric::L2),
            (LossKind::Softsupcon, Metric::Cos),
        ];
        for (kind, metric) in cases {
            let cfg = config(kind, metric);
            let a = evaluate_loss(&batch(z.clone(), y.clone(), m), &cfg).unwrap().total;
            let b = evaluate_loss(&batch(rotate(&z, &q), y.clone(), m), &cfg).unwrap().total;
            prop_assert!((a - b).abs() <= 1e-10, "{:?}: {} vs {}", kind, a, b);
        }
        // coordinate-wise medians and ℓ1 kernels commute with signed permutations
        for kind in [LossKind::Mednce, LossKind::Medsupcon, LossKind::Softnce] {
            let cfg = config(kind, Metric::L1);
            let a = evaluate_loss(&batch(z.clone(), y.clone(), m), &cfg).unwrap().total;
            let b = evaluate_loss(&batch(rotate(&z, &s), y.clone(), m), &cfg).unwrap().total;
            prop_assert!((a - b).abs() <= 1e-10, "{:?}: {} vs {}", kind, a, b);
        }
    }

    #[test]
    fn breakdown_is_consistent(seed in any::<u64>(), beta in 0.0f64..10.0) {
        let mut rng = RngState::new(seed);
        let z = random_sphere(9, 3, &mut rng);
        let y = random_labels(9, 3, &mut rng);
        for kind in LossKind::TRAINABLE {
            let mut cfg = config(kind, Metric::L1);
            cfg.beta = beta;
            let b = evaluate_loss(&batch(z.clone(), y.clone(), 3), &cfg).unwrap();
            prop_assert!((b.total - (b.alignment + b.uniformity + b.beta * b.adjustment)).abs() <= 1e-10);
            if !kind.has_adjustment() {
                prop_assert_eq!(b.beta, 0.0);
            }
        }
    }

    #[test]
    fn kernel_shape(h in 0.05f64..3.0, d1 in 0.0f64..4.0, d2 in 0.0f64..4.0) {
        let k = KernelConfig::new(h, Metric::L1).unwrap();
        let (lo, hi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        prop_assert!(k.weight_at(lo) >= k.weight_at(hi));
        prop_assert!(k.weight_at(lo) >= 0.0);
        if hi > h { prop_assert_eq!(k.weight_at(hi), 0.0); }
    }

    #[test]
    fn soft_labels_are_distributions(seed in any::<u64>(), n in 4usize..30, h in 0.1f64..2.0) {
        let mut rng = RngState::new(seed);
        let z = random_sphere(n, 2, &mut rng);
        let y = random_labels(n, 2, &mut rng);
        for metric in [Metric::L1, Metric::L2, Metric::Cos] {
            let t = nw_soft_labels(&z, &z, &y, 2, &KernelConfig::new(h, metric).unwrap()).unwrap();
            for r in t.probs.iter_rows() {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(r.iter().all(|p| (0.0..=1.0).contains(p)));
            }
        }
    }

    #[test]
    fn ksg_invariances(seed in any::<u64>()) {
        let mut rng = RngState::new(seed);
        let n = 300;
        let y: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
        let mut x = Mat64::zeros(n, 2);
        for i in 0..n {
            x[(i, 0)] = rng.normal() + y[i] as f64;
            x[(i, 1)] = rng.normal();
        }
        let opts = KsgOptions { clamp_nonnegative: false, ..KsgOptions::default() };
        let base = mixed_ksg(&x, &y, opts).unwrap().value;
        let perm = rng.permutation(n);
        let yp: Vec<usize> = perm.iter().map(|&p| y[p]).collect();
        let permuted = mixed_ksg(&x.select_rows(&perm), &yp, opts).unwrap().value;
        prop_assert!((base - permuted).abs() <= 1e-12);
        let renamed: Vec<usize> = y.iter().map(|&c| [2, 0, 1][c]).collect();
        prop_assert!((base - mixed_ksg(&x, &renamed, opts).unwrap().value).abs() <= 1e-12);
    }

    #[test]
    fn bounds_fall_as_loss_rises(l1 in 0.0f64..10.0, l2 in 0.0f64..10.0, n in 2usize..1000) {
        let t = |l| [BoundTerms { loss: l, adjustment: 1.0, denominator_terms: n }];
        let (lo, hi) = if l1 <= l2 { (l1, l2) } else { (l2, l1) };
        prop_assert!(bound_softnce(&t(lo)).unwrap().value >= bound_softnce(&t(hi)).unwrap().value);
        prop_assert!(bound_prop1(&t(lo)).unwrap().value >= bound_prop1(&t(hi)).unwrap().value);
        prop_assert!((bound_prop1(&t(lo)).unwrap().value - ((n as f64).ln() - lo)).abs() < 1e-12);
    }

    #[test]
    fn bandwidth_shrinks(n in 2usize..1_000_000, d in 1usize..8) {
        prop_assert!(bandwidth_schedule(4 * n, d).unwrap() < bandwidth_schedule(n, d).unwrap());
    }
}

#[test]
fn projections_coincide_for_identical_members() {
    let mut rng = RngState::new(3);
    let v = random_sphere(2, 3, &mut rng);
    let mut z = Mat64::zeros(8, 3);
    let y = vec![0, 1, 0, 1, 0, 1, 0, 1];
    for i in 0..8 {
        z.row_mut(i).copy_from_slice(v.row(y[i]));
    }
    let t = nw_soft_labels(&z, &z, &y, 2, &KernelConfig::default()).unwrap();
    for c in 0..2 {
        let a = centroid(&z, &y, c, false).unwrap();
        let b = fhat(c, &z, &t, false).unwrap();
        let m = median_projection(&z, &y, c, false).unwrap();
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-15 && (a[k] - m[k]).abs() < 1e-15);
        }
    }
}

#[test]
fn temperature_keeps_toy_ordering() {
    // all-identical vs spread-out embeddings of one class pair
    let same = Mat64::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 1.0]]).unwrap();
    let mixed = Mat64::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let y = vec![0, 0, 1, 1];
    for tau in [0.05, 0.07, 0.5, 1.0] {
        let a = supcon(&EmbeddingBatch::new(same.clone(), y.clone(), 2, tau).unwrap(), AnchorPolicy::Strict).unwrap();
        let b = supcon(&EmbeddingBatch::new(mixed.clone(), y.clone(), 2, tau).unwrap(), AnchorPolicy::Strict).unwrap();
        assert!(a.total < b.total);
    }
}
