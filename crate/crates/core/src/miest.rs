//! Mutual-information estimation between continuous points and discrete
//! labels, and the empirical lower bounds built from contrastive losses.

use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{digamma_unchecked, log_sum_exp_weighted, mean_stderr, Mat64, RngState};
use crate::synthdata::GmmSpec;

pub const DEFAULT_KSG_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiMethod {
    MixedKsg,
    OracleMc,
    BoundProp1,
    BoundSoftnce,
}

/// A mutual-information value in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    pub method: MiMethod,
    pub k: Option<usize>,
    pub n: usize,
    pub stderr: Option<f64>,
}

/// Flat JSON record as written next to experiment CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiRecord {
    pub method: MiMethod,
    pub value: f64,
    pub stderr: Option<f64>,
    pub k: Option<usize>,
    pub n: usize,
    pub seed: u64,
}

impl MiEstimate {
    pub fn record(&self, seed: u64) -> MiRecord {
        MiRecord {
            method: self.method,
            value: self.value,
            stderr: self.stderr,
            k: self.k,
            n: self.n,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsgOptions {
    pub k: usize,
    /// Report `max(estimate, 0)`.
    pub clamp_nonnegative: bool,
}

impl Default for KsgOptions {
    fn default() -> Self {
        Self {
            k: DEFAULT_KSG_K,
            clamp_nonnegative: true,
        }
    }
}

#[derive(PartialEq, PartialOrd)]
struct Dist(f64);

impl Eq for Dist {}

impl Ord for Dist {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| f64::max(m, (x - y).abs()))
}

/// Mixed KSG estimate of I(X;C) for continuous `samples` and discrete
/// `labels`.
///
/// The joint distance is the ℓ∞ distance in `samples` when labels agree and
/// infinite otherwise, so neighbours are searched within the point's class.
/// With `ρᵢ` the distance to the k-th other same-class point, each point
/// contributes `ψ(k̃ᵢ) + log N − ψ(n_x,i) − ψ(n_c,i)`: for `ρᵢ > 0`,
/// `k̃ᵢ = k` and `n_x,i` counts points strictly closer than `ρᵢ`; for
/// `ρᵢ = 0`, all three counts are of exact ties. Counts include the point
/// itself and `n_c,i` is its class size. Classes with at most `k` members use
/// `k = |class| − 1`, and singletons are treated as a zero radius.
pub fn mixed_ksg(samples: &Mat64, labels: &[usize], opts: KsgOptions) -> Result<MiEstimate> {
    let n = samples.rows();
    let k = opts.k;
    if k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    if n <= k {
        return Err(Error::InsufficientSamples { n, k });
    }
    if samples.cols() == 0 {
        return Err(Error::Domain("samples need at least one coordinate".into()));
    }
    // sweep order on the first coordinate, ties broken by index
    let key = |i: usize| samples.row(i)[0];
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    let mut pos = vec![0usize; n];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let num_labels = labels.iter().max().map_or(0, |m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_labels];
    for &i in &order {
        by_class[labels[i]].push(i);
    }
    let mut class_pos = vec![0usize; n];
    for members in &by_class {
        for (p, &i) in members.iter().enumerate() {
            class_pos[i] = p;
        }
    }

    let log_n = (n as f64).ln();
    let mut total = 0.0;
    let mut heap: BinaryHeap<Dist> = BinaryHeap::with_capacity(k + 1);
    for i in 0..n {
        let members = &by_class[labels[i]];
        let n_c = members.len();
        let k_i = k.min(n_c - 1);
        let xi = samples.row(i);
        let rho = if k_i == 0 {
            0.0
        } else {
            heap.clear();
            let p = class_pos[i];
            let consider = |j: usize, heap: &mut BinaryHeap<Dist>| -> bool {
                let dx0 = (key(j) - xi[0]).abs();
                if heap.len() == k_i && dx0 >= heap.peek().map_or(f64::INFINITY, |d| d.0) {
                    return false;
                }
                let d = linf(xi, samples.row(j));
                if heap.len() < k_i {
                    heap.push(Dist(d));
                } else if d < heap.peek().map_or(f64::INFINITY, |d| d.0) {
                    heap.pop();
                    heap.push(Dist(d));
                }
                true
            };
            let (mut lo, mut hi) = (p, p + 1);
            let (mut go_lo, mut go_hi) = (true, true);
            while go_lo || go_hi {
                if go_lo {
                    if lo == 0 {
                        go_lo = false;
                    } else {
                        lo -= 1;
                        go_lo = consider(members[lo], &mut heap);
                    }
                }
                if go_hi {
                    if hi >= members.len() {
                        go_hi = false;
                    } else {
                        go_hi = consider(members[hi], &mut heap);
                        hi += 1;
                    }
                }
            }
            heap.peek().map_or(0.0, |d| d.0)
        };

        let (k_tilde, n_x, n_cls) = if rho > 0.0 {
            (k_i, count_within(samples, &order, pos[i], xi, rho, false), n_c)
        } else {
            let ties = count_within(samples, &order, pos[i], xi, 0.0, true);
            let same = members
                .iter()
                .filter(|&&j| linf(xi, samples.row(j)) == 0.0)
                .count();
            (same, ties, n_c)
        };
        total += digamma_unchecked(k_tilde as f64) + log_n
            - digamma_unchecked(n_x as f64)
            - digamma_unchecked(n_cls as f64);
    }
    let mut value = total / n as f64;
    if opts.clamp_nonnegative {
        value = value.max(0.0);
    }
    Ok(MiEstimate {
        value,
        method: MiMethod::MixedKsg,
        k: Some(k),
        n,
        stderr: None,
    })
}

/// Points with ℓ∞ distance `< r` from `xi` (or `== 0` when `ties`), self
/// included.
fn count_within(samples: &Mat64, order: &[usize], p: usize, xi: &[f64], r: f64, ties: bool) -> usize {
    let inside = |j: usize| {
        let d = linf(xi, samples.row(j));
        if ties {
            d == 0.0
        } else {
            d < r
        }
    };
    let within_sweep = |j: usize| {
        let dx0 = (samples.row(j)[0] - xi[0]).abs();
        if ties {
            dx0 == 0.0
        } else {
            dx0 < r
        }
    };
    let mut count = 0;
    for &j in order[p..].iter() {
        if !within_sweep(j) {
            break;
        }
        count += usize::from(inside(j));
    }
    for &j in order[..p].iter().rev() {
        if !within_sweep(j) {
            break;
        }
        count += usize::from(inside(j));
    }
    count
}

/// Per-batch ingredients of an empirical bound: the loss value, the
/// adjustment term, and how many terms each loss denominator sums.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub loss: f64,
    pub adjustment: f64,
    pub denominator_terms: usize,
}

fn batch_mean(values: Vec<f64>, method: MiMethod, n: usize) -> MiEstimate {
    let (mean, se) = mean_stderr(&values);
    MiEstimate {
        value: mean,
        method,
        k: None,
        n,
        stderr: Some(se),
    }
}

/// `1 + log D − loss − R` averaged over held-out batches, where `D` is the
/// number of denominator terms (`N − 1` when the anchor is excluded).
pub fn bound_prop1(batches: &[BoundTerms]) -> Result<MiEstimate> {
    if batches.is_empty() {
        return Err(Error::Domain("bound needs at least one batch".into()));
    }
    let values = batches
        .iter()
        .map(|b| 1.0 + (b.denominator_terms as f64).ln() - b.loss - b.adjustment)
        .collect();
    Ok(batch_mean(values, MiMethod::BoundProp1, batches.len()))
}

/// `log D − loss` averaged over held-out batches; the SoftNCE denominator has
/// `D = N` terms.
pub fn bound_softnce(batches: &[BoundTerms]) -> Result<MiEstimate> {
    if batches.is_empty() {
        return Err(Error::Domain("bound needs at least one batch".into()));
    }
    let values = batches
        .iter()
        .map(|b| (b.denominator_terms as f64).ln() - b.loss)
        .collect();
    Ok(batch_mean(values, MiMethod::BoundSoftnce, batches.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyPoint {
    pub n: usize,
    /// Mean over trials of `log N − loss`.
    pub bound_mean: f64,
    /// Mean over trials of `|log N − loss − I(X;C)|`.
    pub gap: f64,
    pub gap_stderr: f64,
}

/// SoftNCE with the optimal critic `ψ*(x, c) = log p(c|x) − log π_c`,
/// evaluated on raw samples: `loss = (1/N) Σᵢ [−ψ*(xᵢ,cᵢ) + log Σⱼ e^{ψ*(xᵢ,cⱼ)}]`.
pub fn optimal_critic_softnce(log_post: &Mat64, labels: &[usize], log_priors: &[f64]) -> f64 {
    let n = labels.len();
    let m = log_priors.len();
    let mut counts = vec![0.0; m];
    for &c in labels {
        counts[c] += 1.0;
    }
    let mut crit = vec![0.0; m];
    let mut total = 0.0;
    for (i, &c) in labels.iter().enumerate() {
        let row = log_post.row(i);
        for (v, (lp, pr)) in crit.iter_mut().zip(row.iter().zip(log_priors)) {
            *v = lp - pr;
        }
        total += -crit[c] + log_sum_exp_weighted(&crit, &counts);
    }
    total / n as f64
}

/// Gap between the optimal-critic SoftNCE bound and `oracle_mi` for each
/// batch size, averaged over `trials` fresh batches.
pub fn softnce_consistency_curve(
    spec: &GmmSpec,
    sizes: &[usize],
    trials: usize,
    oracle_mi: f64,
    rng: &RngState,
) -> Result<Vec<ConsistencyPoint>> {
    if trials == 0 {
        return Err(Error::Domain("need at least one trial".into()));
    }
    let model = spec.posterior_model()?;
    let log_priors: Vec<f64> = spec.priors.iter().map(|p| p.ln()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        if n < 2 {
            return Err(Error::Domain(format!("batch size {n} below 2")));
        }
        let mut stream = rng.fork(n as u64);
        let mut gaps = Vec::with_capacity(trials);
        let mut bounds = Vec::with_capacity(trials);
        for _ in 0..trials {
            let data = spec.sample(n, &mut stream)?;
            let mut log_post = Mat64::zeros(n, spec.num_classes);
            for (i, x) in data.features.iter_rows().enumerate() {
                log_post.row_mut(i).copy_from_slice(&model.log_posterior(x)?);
            }
            let loss = optimal_critic_softnce(&log_post, &data.labels, &log_priors);
            let bound = (n as f64).ln() - loss;
            bounds.push(bound);
            gaps.push((bound - oracle_mi).abs());
        }
        let (gap, gap_stderr) = mean_stderr(&gaps);
        out.push(ConsistencyPoint {
            n,
            bound_mean: mean_stderr(&bounds).0,
            gap,
            gap_stderr,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::binary_gmm_spec;

    /// Straight O(N²) evaluation of the same estimator, used as an oracle for
    /// the sweep implementation.
    fn ksg_bruteforce(x: &Mat64, c: &[usize], k: usize) -> f64 {
        let n = x.rows();
        let mut total = 0.0;
        for i in 0..n {
            let xi = x.row(i);
            let mut same: Vec<f64> = (0..n)
                .filter(|&j| j != i && c[j] == c[i])
                .map(|j| linf(xi, x.row(j)))
                .collect();
            same.sort_by(f64::total_cmp);
            let n_c = same.len() + 1;
            let k_i = k.min(n_c - 1);
            let rho = if k_i == 0 { 0.0 } else { same[k_i - 1] };
            let (kt, nx) = if rho > 0.0 {
                (k_i, (0..n).filter(|&j| linf(xi, x.row(j)) < rho).count())
            } else {
                (
                    1 + same.iter().filter(|d| **d == 0.0).count(),
                    (0..n).filter(|&j| linf(xi, x.row(j)) == 0.0).count(),
                )
            };
            total += digamma_unchecked(kt as f64) + (n as f64).ln()
                - digamma_unchecked(nx as f64)
                - digamma_unchecked(n_c as f64);
        }
        total / n as f64
    }

    fn raw() -> KsgOptions {
        KsgOptions {
            k: 5,
            clamp_nonnegative: false,
        }
    }

    #[test]
    fn sweep_matches_bruteforce() {
        for seed in 0..5 {
            let mut rng = RngState::new(seed);
            let n = 300;
            let d = 1 + seed as usize % 3;
            let mut x = Mat64::from_vec(n, d, (0..n * d).map(|_| rng.normal()).collect()).unwrap();
            // some exact duplicates to exercise the tie branch
            for i in 0..20 {
                let src = x.row(i).to_vec();
                x.row_mut(i + 100).copy_from_slice(&src);
            }
            let c: Vec<usize> = (0..n).map(|i| (i * 7 + seed as usize) % 3).collect();
            let got = mixed_ksg(&x, &c, raw()).unwrap().value;
            let want = ksg_bruteforce(&x, &c, 5);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn deterministic_labels_give_log2() {
        let mut rng = RngState::new(3);
        let n = 4000;
        let mut data = Vec::with_capacity(n * 2);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.below(2);
            let center = if c == 1 { 10.0 } else { -10.0 };
            data.push(center + rng.normal());
            data.push(rng.normal());
            labels.push(c);
        }
        let x = Mat64::from_vec(n, 2, data).unwrap();
        let est = mixed_ksg(&x, &labels, raw()).unwrap();
        assert!((est.value - 2f64.ln()).abs() < 0.05, "{}", est.value);
    }

    #[test]
    fn invariances() {
        let mut rng = RngState::new(4);
        let n = 500;
        let x = Mat64::from_vec(n, 2, (0..2 * n).map(|_| rng.normal()).collect()).unwrap();
        let c: Vec<usize> = (0..n).map(|i| usize::from(x.row(i)[0] > 0.3)).collect();
        let base = mixed_ksg(&x, &c, raw()).unwrap().value;
        let perm = rng.permutation(n);
        let xp = x.select_rows(&perm);
        let cp: Vec<usize> = perm.iter().map(|&i| c[i]).collect();
        assert!((mixed_ksg(&xp, &cp, raw()).unwrap().value - base).abs() < 1e-12);
        let renamed: Vec<usize> = c.iter().map(|v| 1 - v).collect();
        assert!((mixed_ksg(&x, &renamed, raw()).unwrap().value - base).abs() < 1e-12);
    }

    #[test]
    fn errors_and_small_classes() {
        let x = Mat64::zeros(5, 1);
        assert!(matches!(
            mixed_ksg(&x, &[0; 5], KsgOptions::default()),
            Err(Error::InsufficientSamples { n: 5, k: 5 })
        ));
        let mut rng = RngState::new(1);
        let x = Mat64::from_vec(40, 1, (0..40).map(|_| rng.normal()).collect()).unwrap();
        let mut c = vec![0; 40];
        c[3] = 1; // singleton
        c[4] = 2;
        c[5] = 2;
        let est = mixed_ksg(&x, &c, raw()).unwrap();
        assert!(est.value.is_finite());
    }

    #[test]
    fn bounds_arithmetic() {
        // uniform soft labels: loss = log N
        let b = BoundTerms {
            loss: (256f64).ln(),
            adjustment: 1.0,
            denominator_terms: 256,
        };
        assert!(bound_softnce(&[b]).unwrap().value.abs() < 1e-15);
        // R = 1: 1 + log D − loss − 1 = log D − loss
        let b = BoundTerms {
            loss: 2.0,
            adjustment: 1.0,
            denominator_terms: 255,
        };
        let v = bound_prop1(&[b]).unwrap().value;
        assert!((v - ((255f64).ln() - 2.0)).abs() < 1e-12);
        let lo = bound_softnce(&[BoundTerms { loss: 3.0, ..b }]).unwrap().value;
        let hi = bound_softnce(&[BoundTerms { loss: 2.5, ..b }]).unwrap().value;
        assert!(lo <= hi);
        let two = bound_prop1(&[b, BoundTerms { loss: 3.0, ..b }]).unwrap();
        assert!((two.stderr.unwrap() - 0.5).abs() < 1e-12);
        assert!(bound_prop1(&[]).is_err());
    }

    #[test]
    fn optimal_critic_independent_labels() {
        let mut spec = binary_gmm_spec(2, 1.0).unwrap();
        spec.means = vec![vec![0.0; 2], vec![0.0; 2]];
        let curve = softnce_consistency_curve(&spec, &[256, 1024], 10, 0.0, &RngState::new(2)).unwrap();
        for p in curve {
            assert!(p.gap <= 0.02, "{p:?}");
        }
    }

    #[test]
    fn record_json_fields() {
        let est = MiEstimate {
            value: 0.5,
            method: MiMethod::MixedKsg,
            k: Some(5),
            n: 100,
            stderr: None,
        };
        let json = serde_json::to_string(&est.record(7)).unwrap();
        assert_eq!(
            json,
            r#"{"method":"mixed_ksg","value":0.5,"stderr":null,"k":5,"n":100,"seed":7}"#
        );
    }
}
