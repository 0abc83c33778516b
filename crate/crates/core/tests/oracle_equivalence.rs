mod common;

use common::{random_labels, random_sphere, Oracle, Role};
use projnce::losses::*;
use projnce::numerics::RngState;
use projnce::projections::*;

const TOL: f64 = 1e-12;

struct Case {
    z: projnce::numerics::Mat64,
    y: Vec<usize>,
    m: usize,
    h: f64,
}

fn cases() -> Vec<Case> {
    (0..50u64)
        .map(|seed| {
            let mut rng = RngState::new(seed).fork_named("oracle-case");
            let n = 6 + rng.below(5);
            let m = 2 + rng.below(2);
            let d = 2 + rng.below(3);
            Case {
                z: random_sphere(n, d, &mut rng),
                y: random_labels(n, m, &mut rng),
                m,
                h: if seed % 2 == 0 { DEFAULT_BANDWIDTH } else { 1.5 },
            }
        })
        .collect()
}

fn close(a: f64, b: f64, what: &str, seed: usize) {
    assert!((a - b).abs() <= TOL, "{what} case {seed}: {a} vs {b} (diff {:e})", (a - b).abs());
}

#[test]
fn every_loss_matches_double_loop() {
    for (s, c) in cases().iter().enumerate() {
        let o = Oracle { z: &c.z, y: &c.y, m: c.m, tau: DEFAULT_TEMPERATURE, h: c.h };
        let batch = EmbeddingBatch::new(c.z.clone(), c.y.clone(), c.m, DEFAULT_TEMPERATURE).unwrap();
        let kernel = KernelConfig::new(c.h, Metric::L1).unwrap();
        let value = |kind: LossKind| {
            let mut cfg = LossConfig::new(kind);
            cfg.kernel = kernel;
            evaluate_loss(&batch, &cfg).unwrap().total
        };
        close(value(LossKind::Infonce), o.selfp(Role::Identity, Role::Identity, false), "infonce", s);
        close(value(LossKind::Supcon), o.supcon(), "supcon", s);
        close(
            value(LossKind::Projnce),
            o.selfp(Role::Centroid, Role::Identity, false) + o.r(Role::Centroid, Role::Identity, false),
            "projnce",
            s,
        );
        close(value(LossKind::Softnce), o.selfp(Role::Nw, Role::Nw, true), "softnce", s);
        close(
            value(LossKind::Softsupcon),
            o.selfp(Role::Nw, Role::Identity, false) + o.r(Role::Nw, Role::Identity, false),
            "softsupcon",
            s,
        );
        close(value(LossKind::Mednce), o.selfp(Role::Median, Role::Median, true), "mednce", s);
        close(
            value(LossKind::Medsupcon),
            o.selfp(Role::Median, Role::Identity, false) + o.r(Role::Median, Role::Identity, false),
            "medsupcon",
            s,
        );

        let mut literal = LossConfig::new(LossKind::Projnce);
        literal.literal_denominator = true;
        close(
            evaluate_loss(&batch, &literal).unwrap().total,
            o.selfp(Role::Centroid, Role::Identity, true) + o.r(Role::Centroid, Role::Identity, false),
            "projnce literal",
            s,
        );
    }
}

#[test]
fn adjustment_term_matches_double_loop() {
    for (s, c) in cases().iter().enumerate() {
        let o = Oracle { z: &c.z, y: &c.y, m: c.m, tau: DEFAULT_TEMPERATURE, h: c.h };
        let batch = EmbeddingBatch::new(c.z.clone(), c.y.clone(), c.m, DEFAULT_TEMPERATURE).unwrap();
        let kernel = KernelConfig::new(c.h, Metric::L1).unwrap();
        for (pos, role) in [(ProjKind::Centroid, Role::Centroid), (ProjKind::NwSoft, Role::Nw), (ProjKind::Median, Role::Median)] {
            let spec = ProjectionSpec::new(pos, ProjKind::Identity).with_kernel(kernel);
            for strict in [false, true] {
                let opts = LossOptions { strict_class_exclusion: strict, ..LossOptions::default() };
                close(
                    adjustment_r(&batch, &spec, &opts).unwrap(),
                    o.r(role, Role::Identity, strict),
                    "R",
                    s,
                );
            }
        }
        let same = ProjectionSpec::new(ProjKind::Centroid, ProjKind::Centroid);
        assert_eq!(adjustment_r(&batch, &same, &LossOptions::default()).unwrap(), 1.0);
    }
}

#[test]
fn projections_match_double_loop() {
    for (s, c) in cases().iter().enumerate() {
        let o = Oracle { z: &c.z, y: &c.y, m: c.m, tau: DEFAULT_TEMPERATURE, h: c.h };
        let kernel = KernelConfig::new(c.h, Metric::L1).unwrap();
        let table = nw_soft_labels(&c.z, &c.z, &c.y, c.m, &kernel).unwrap();
        for j in 0..c.z.rows() {
            for k in 0..c.m {
                close(table.probs[(j, k)], o.soft(j, k), "soft label", s);
            }
        }
        for k in 0..c.m {
            let pairs = [
                (centroid(&c.z, &c.y, k, false).unwrap(), o.class_mean(k), "centroid"),
                (fhat(k, &c.z, &table, false).unwrap(), o.fhat(k), "fhat"),
                (median_projection(&c.z, &c.y, k, false).unwrap(), o.median(k), "median"),
            ];
            for (got, want, what) in pairs {
                for (a, b) in got.iter().zip(&want) {
                    close(*a, *b, what, s);
                }
            }
        }
    }
}
