//! Contrastive losses over a batch of unit-sphere embeddings, each returned
//! with its alignment/uniformity/adjustment split and its exact gradient with
//! respect to the embeddings.
//!
//! The projection-based losses share one engine: anchor `i` contributes
//! `−ψ(zᵢ, g₊(cᵢ)) + log Σ_{j∈Dᵢ} exp ψ(zᵢ, g₋(cⱼ))` with `ψ(u, v) = u·v/τ`,
//! and the adjustment term is the leave-one-out ratio
//! `R = (1/N) Σᵢ Σ_{k≠i} e^{ψ(zᵢ,g₊(c_k))} / Σ_{k≠i} e^{ψ(zᵢ,g₋(c_k))}`.
//! SupCon and self-supervised InfoNCE have their own direct implementations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot_unchecked, normalize_backward, Mat64, RngState};
use crate::projections::{
    pull_renorm_one, renormalize_one, ClassIndex, ClassInputs, ClassTargets, KernelConfig,
    ProjKind, ProjectionSpec, SoftSource,
};

pub const DEFAULT_TEMPERATURE: f64 = 0.07;
/// Row norms of an [`EmbeddingBatch`] must be within this of 1.
pub const UNIT_NORM_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    z: Mat64,
    labels: Vec<usize>,
    num_classes: usize,
    tau: f64,
    positives: Option<Vec<usize>>,
    soft_labels: Option<Mat64>,
}

impl EmbeddingBatch {
    pub fn new(z: Mat64, labels: Vec<usize>, num_classes: usize, tau: f64) -> Result<Self> {
        for (i, row) in z.iter_rows().enumerate() {
            let n = crate::numerics::norm2(row);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Domain(format!("embedding {i} has norm {n}, expected 1")));
            }
        }
        Self::new_unchecked(z, labels, num_classes, tau)
    }

    /// Skips the unit-norm check; used when differentiating with respect to
    /// raw embeddings.
    pub fn new_unchecked(z: Mat64, labels: Vec<usize>, num_classes: usize, tau: f64) -> Result<Self> {
        if z.rows() < 2 {
            return Err(Error::Domain(format!("batch needs N >= 2, got {}", z.rows())));
        }
        if labels.len() != z.rows() {
            return Err(Error::Dimension {
                expected: z.rows(),
                got: labels.len(),
            });
        }
        if let Some(c) = labels.iter().find(|c| **c >= num_classes) {
            return Err(Error::Config(format!("label {c} out of range for {num_classes} classes")));
        }
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        if !z.is_finite() {
            return Err(Error::Domain("non-finite embedding".into()));
        }
        Ok(Self {
            z,
            labels,
            num_classes,
            tau,
            positives: None,
            soft_labels: None,
        })
    }

    /// Explicit positive partner `p(i) ≠ i` for every anchor.
    pub fn with_positives(mut self, positives: Vec<usize>) -> Result<Self> {
        if positives.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: positives.len(),
            });
        }
        if let Some(i) = positives
            .iter()
            .enumerate()
            .position(|(i, &p)| p == i || p >= self.len())
        {
            return Err(Error::MissingPositive(i));
        }
        self.positives = Some(positives);
        Ok(self)
    }

    /// Exact posteriors `N × M`, used when the soft source is analytic.
    pub fn with_soft_labels(mut self, probs: Mat64) -> Result<Self> {
        if probs.rows() != self.len() || probs.cols() != self.num_classes {
            return Err(Error::Dimension {
                expected: self.len() * self.num_classes,
                got: probs.rows() * probs.cols(),
            });
        }
        self.soft_labels = Some(probs);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.z.cols()
    }

    pub fn z(&self) -> &Mat64 {
        &self.z
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn positives(&self) -> Option<&[usize]> {
        self.positives.as_deref()
    }

    pub fn soft_labels(&self) -> Option<&Mat64> {
        self.soft_labels.as_ref()
    }

    /// Explicit partners if set, otherwise the next member of the same class
    /// in index order (cyclically). `None` for singleton classes.
    pub fn partner_map(&self) -> Vec<Option<usize>> {
        if let Some(p) = &self.positives {
            return p.iter().map(|&j| Some(j)).collect();
        }
        let classes = ClassIndex::new(&self.labels, self.num_classes);
        let mut out = vec![None; self.len()];
        for members in &classes.members {
            if members.len() < 2 {
                continue;
            }
            for (a, &i) in members.iter().enumerate() {
                out[i] = Some(members[(a + 1) % members.len()]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// `j ≠ i`
    #[default]
    ExcludeAnchor,
    /// `j = 1..N`
    IncludeAnchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AnchorPolicy {
    /// Anchors without a positive are an error.
    #[default]
    Strict,
    /// Anchors without a positive are dropped from the mean.
    Skip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossOptions {
    pub beta: f64,
    pub denominator: Denominator,
    /// In `R`, also drop every `k` with `c_k = cᵢ`.
    pub strict_class_exclusion: bool,
    pub anchor_policy: AnchorPolicy,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            beta: 1.0,
            denominator: Denominator::ExcludeAnchor,
            strict_class_exclusion: false,
            anchor_policy: AnchorPolicy::Strict,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub adjustment: f64,
    pub beta: f64,
    pub d_loss_d_z: Mat64,
    /// Anchors that entered the mean.
    pub anchors: usize,
    /// Terms in each anchor's denominator.
    pub denominator_terms: usize,
    /// Empty-support fallbacks taken while building projections.
    pub fallbacks: usize,
}

pub fn critic(u: &[f64], v: &[f64], tau: f64) -> f64 {
    dot_unchecked(u, v) / tau
}

/// Softmax over `ψ_u = zᵢ·v_u/τ` with multiplicities. Writes the
/// probabilities to `probs` and returns the log-sum-exp.
fn weighted_softmax<'v>(
    zi: &[f64],
    value: impl Fn(usize) -> &'v [f64],
    mult: &[f64],
    tau: f64,
    probs: &mut [f64],
) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for (u, &m) in mult.iter().enumerate() {
        if m > 0.0 {
            let s = dot_unchecked(zi, value(u)) / tau;
            probs[u] = s;
            if s > max {
                max = s;
            }
        }
    }
    let mut sum = 0.0;
    for (u, &m) in mult.iter().enumerate() {
        if m > 0.0 {
            let e = m * (probs[u] - max).exp();
            probs[u] = e;
            sum += e;
        } else {
            probs[u] = 0.0;
        }
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    max + sum.ln()
}

/// SupCon: anchor `i` contributes
/// `−(1/|P(i)|) Σ_{p∈P(i)} log( e^{zᵢ·z_p/τ} / Σ_{j≠i} e^{zᵢ·zⱼ/τ} )` with
/// `P(i)` the other members of `i`'s class.
pub fn supcon(batch: &EmbeddingBatch, policy: AnchorPolicy) -> Result<LossBreakdown> {
    let n = batch.len();
    let z = &batch.z;
    let tau = batch.tau;
    let labels = &batch.labels;
    let mut anchors = Vec::with_capacity(n);
    for i in 0..n {
        let has = (0..n).any(|p| p != i && labels[p] == labels[i]);
        if has {
            anchors.push(i);
        } else if policy == AnchorPolicy::Strict {
            return Err(Error::MissingPositive(i));
        }
    }
    if anchors.is_empty() {
        return Err(Error::MissingPositive(0));
    }
    let a = 1.0 / anchors.len() as f64;
    let mut grad = Mat64::zeros(n, z.cols());
    let mut align = 0.0;
    let mut unif = 0.0;
    let d = z.cols();
    let mut s = vec![0.0; n];
    let mut e = vec![0.0; n];
    for &i in &anchors {
        let zi = z.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                s[j] = dot_unchecked(zi, z.row(j)) / tau;
                max = max.max(s[j]);
            }
        }
        let mut sum = 0.0;
        let mut pos_sum = 0.0;
        let mut pos_count = 0usize;
        for j in 0..n {
            if j != i {
                e[j] = (s[j] - max).exp();
                sum += e[j];
                if labels[j] == labels[i] {
                    pos_sum += s[j];
                    pos_count += 1;
                }
            }
        }
        let lse = max + sum.ln();
        let inv_p = 1.0 / pos_count as f64;
        align -= a * inv_p * pos_sum;
        unif += a * lse;
        // ∂/∂zᵢ gets c·zⱼ, ∂/∂zⱼ gets c·zᵢ
        let mut gi = vec![0.0; d];
        let g = grad.as_mut_slice();
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut coef = e[j] / sum;
            if labels[j] == labels[i] {
                coef -= inv_p;
            }
            let c = a * coef / tau;
            let zj = z.row(j);
            let gj = &mut g[j * d..(j + 1) * d];
            for t in 0..d {
                gi[t] += c * zj[t];
                gj[t] += c * zi[t];
            }
        }
        for (a, v) in grad.row_mut(i).iter_mut().zip(&gi) {
            *a += v;
        }
    }
    Ok(LossBreakdown {
        total: align + unif,
        alignment: align,
        uniformity: unif,
        adjustment: 0.0,
        beta: 0.0,
        d_loss_d_z: grad,
        anchors: anchors.len(),
        denominator_terms: n - 1,
        fallbacks: 0,
    })
}

/// Self-supervised InfoNCE with one positive per anchor:
/// `−zᵢ·z_{p(i)}/τ + log Σ_{j≠i} e^{zᵢ·zⱼ/τ}`.
pub fn infonce_self(batch: &EmbeddingBatch, positives: &[usize]) -> Result<LossBreakdown> {
    let n = batch.len();
    if positives.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: positives.len(),
        });
    }
    let z = &batch.z;
    let tau = batch.tau;
    let a = 1.0 / n as f64;
    let mut grad = Mat64::zeros(n, z.cols());
    let mut align = 0.0;
    let mut unif = 0.0;
    let mut s = vec![0.0; n];
    for i in 0..n {
        let p = positives[i];
        if p == i || p >= n {
            return Err(Error::MissingPositive(i));
        }
        let zi = z.row(i);
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            if j != i {
                s[j] = dot_unchecked(zi, z.row(j)) / tau;
                max = max.max(s[j]);
            }
        }
        let sum: f64 = (0..n).filter(|&j| j != i).map(|j| (s[j] - max).exp()).sum();
        let lse = max + sum.ln();
        align -= a * s[p];
        unif += a * lse;
        for j in 0..n {
            if j == i {
                continue;
            }
            let mut coef = (s[j] - lse).exp();
            if j == p {
                coef -= 1.0;
            }
            let c = a * coef / tau;
            for t in 0..z.cols() {
                let (zit, zjt) = (z[(i, t)], z[(j, t)]);
                grad[(i, t)] += c * zjt;
                grad[(j, t)] += c * zit;
            }
        }
    }
    Ok(LossBreakdown {
        total: align + unif,
        alignment: align,
        uniformity: unif,
        adjustment: 0.0,
        beta: 0.0,
        d_loss_d_z: grad,
        anchors: n,
        denominator_terms: n - 1,
        fallbacks: 0,
    })
}

/// Distinct target vectors for one role: the batch rows themselves, or one
/// vector per present class.
#[derive(Clone, Copy)]
enum SampleSet<'a> {
    Rows,
    Classes(usize, &'a ClassTargets),
}

struct Cache {
    kinds: Vec<ProjKind>,
    targets: Vec<ClassTargets>,
    grads: Vec<Vec<Vec<f64>>>,
}

impl Cache {
    fn index(&self, kind: ProjKind) -> usize {
        self.kinds.iter().position(|k| *k == kind).expect("built")
    }
}

fn sample_kind(kind: ProjKind) -> Option<ProjKind> {
    match kind {
        ProjKind::Identity => None,
        other => Some(other),
    }
}

/// Shared engine for every projection-based loss.
fn projected(
    batch: &EmbeddingBatch,
    spec: &ProjectionSpec,
    opts: &LossOptions,
    with_r: bool,
) -> Result<LossBreakdown> {
    spec.validate()?;
    let n = batch.len();
    let d = batch.dim();
    let z = &batch.z;
    let tau = batch.tau;
    let labels = &batch.labels;
    let classes = ClassIndex::new(labels, batch.num_classes);
    let inputs = ClassInputs {
        z,
        labels,
        num_classes: batch.num_classes,
        classes: &classes,
        analytic_soft: batch.soft_labels.as_ref(),
    };
    if spec.uses_nw() && spec.soft_source == SoftSource::Analytic && batch.soft_labels.is_none() {
        return Err(Error::Config("analytic soft labels requested but none supplied".into()));
    }

    // class-level targets needed by either role
    let mut needed: Vec<ProjKind> = Vec::new();
    let pos_class = matches!(spec.positive, ProjKind::NwSoft | ProjKind::Median);
    if pos_class || (with_r && spec.positive == ProjKind::Centroid) {
        needed.push(spec.positive);
    }
    if let Some(k) = sample_kind(spec.negative) {
        if !needed.contains(&k) {
            needed.push(k);
        }
    }
    let mut cache = Cache {
        kinds: needed.clone(),
        targets: Vec::with_capacity(needed.len()),
        grads: Vec::with_capacity(needed.len()),
    };
    for &k in &needed {
        let t = ClassTargets::build(k, spec, &inputs)?;
        cache.grads.push(vec![vec![0.0; d]; t.values.len()]);
        cache.targets.push(t);
    }
    let fallbacks = cache.targets.iter().map(|t| t.fallbacks).sum();

    // positives
    let partners = if spec.positive == ProjKind::Identity {
        batch.partner_map()
    } else {
        Vec::new()
    };
    let mut anchors = Vec::with_capacity(n);
    for i in 0..n {
        let ok = match spec.positive {
            ProjKind::Identity => partners[i].is_some(),
            ProjKind::Centroid => classes.members[classes.slot(labels[i])].len() >= 2,
            _ => true,
        };
        if ok {
            anchors.push(i);
        } else if opts.anchor_policy == AnchorPolicy::Strict {
            return Err(Error::MissingPositive(i));
        }
    }
    if anchors.is_empty() {
        return Err(Error::MissingPositive(0));
    }
    let class_sums: Vec<Vec<f64>> = classes
        .members
        .iter()
        .map(|m| {
            let mut s = vec![0.0; d];
            for &j in m {
                for (a, v) in s.iter_mut().zip(z.row(j)) {
                    *a += v;
                }
            }
            s
        })
        .collect();

    let neg_set = match sample_kind(spec.negative) {
        None => SampleSet::Rows,
        Some(k) => {
            let idx = cache.index(k);
            SampleSet::Classes(idx, &cache.targets[idx])
        }
    };
    let set_len = |s: SampleSet<'_>| match s {
        SampleSet::Rows => n,
        SampleSet::Classes(_, t) => t.values.len(),
    };
    fn set_value<'v>(s: SampleSet<'v>, z: &'v Mat64, u: usize) -> &'v [f64] {
        match s {
            SampleSet::Rows => z.row(u),
            SampleSet::Classes(_, t) => &t.values[u],
        }
    }
    // multiplicities of each distinct target in anchor i's denominator
    let fill_mult = |s: SampleSet<'_>, i: usize, exclude_self: bool, exclude_class: bool, m: &mut Vec<f64>| {
        m.clear();
        match s {
            SampleSet::Rows => {
                for k in 0..n {
                    let skip = (exclude_self && k == i) || (exclude_class && labels[k] == labels[i]);
                    m.push(if skip { 0.0 } else { 1.0 });
                }
            }
            SampleSet::Classes(_, _) => {
                let own = classes.slot(labels[i]);
                for (u, members) in classes.members.iter().enumerate() {
                    let mut c = members.len() as f64;
                    if u == own {
                        if exclude_class {
                            c = 0.0;
                        } else if exclude_self {
                            c -= 1.0;
                        }
                    }
                    m.push(c);
                }
            }
        }
    };

    let a = 1.0 / anchors.len() as f64;
    let exclude_self = opts.denominator == Denominator::ExcludeAnchor;
    let mut dz = Mat64::zeros(n, d);
    let mut neg_grads = Mat64::zeros(set_len(neg_set), d);
    let mut leave_out_acc = vec![vec![0.0; d]; classes.len()];
    let mut align = 0.0;
    let mut unif = 0.0;
    let mut mult = Vec::with_capacity(n);
    let mut probs = vec![0.0; set_len(neg_set)];
    for &i in &anchors {
        let zi = z.row(i);
        let own = classes.slot(labels[i]);
        // positive target
        let (pos, pos_norm): (Vec<f64>, Option<f64>) = match spec.positive {
            ProjKind::Identity => (z.row(partners[i].expect("checked")).to_vec(), None),
            ProjKind::Centroid => {
                let cnt = classes.members[own].len() as f64 - 1.0;
                let raw: Vec<f64> = class_sums[own]
                    .iter()
                    .zip(zi)
                    .map(|(s, v)| (s - v) / cnt)
                    .collect();
                renormalize_one(raw, spec.renormalize)?
            }
            k => (cache.targets[cache.index(k)].values[own].clone(), None),
        };
        let psi_pos = dot_unchecked(zi, &pos) / tau;
        fill_mult(neg_set, i, exclude_self, false, &mut mult);
        if mult.iter().all(|m| *m <= 0.0) {
            return Err(Error::MissingNegative(i));
        }
        let lse = weighted_softmax(zi, |u| set_value(neg_set, z, u), &mult, tau, &mut probs);
        align -= a * psi_pos;
        unif += a * lse;

        // ∂/∂zᵢ
        let mut gi: Vec<f64> = pos.iter().map(|v| -a * v / tau).collect();
        let ng = neg_grads.as_mut_slice();
        for (u, &p) in probs.iter().enumerate() {
            if p != 0.0 {
                let v = set_value(neg_set, z, u);
                let c = a * p / tau;
                let ngu = &mut ng[u * d..(u + 1) * d];
                for t in 0..d {
                    gi[t] += c * v[t];
                    ngu[t] += c * zi[t];
                }
            }
        }
        for (acc, v) in dz.row_mut(i).iter_mut().zip(&gi) {
            *acc += v;
        }
        // ∂/∂positive
        let g_pos: Vec<f64> = zi.iter().map(|v| -a * v / tau).collect();
        match spec.positive {
            ProjKind::Identity => {
                let p = partners[i].expect("checked");
                for t in 0..d {
                    dz[(p, t)] += g_pos[t];
                }
            }
            ProjKind::Centroid => {
                let g = pull_renorm_one(&pos, pos_norm, &g_pos);
                let cnt = classes.members[own].len() as f64 - 1.0;
                for t in 0..d {
                    leave_out_acc[own][t] += g[t] / cnt;
                    dz[(i, t)] -= g[t] / cnt;
                }
            }
            k => {
                let idx = cache.index(k);
                for t in 0..d {
                    cache.grads[idx][own][t] += g_pos[t];
                }
            }
        }
    }

    // adjustment term
    let mut adjustment = 0.0;
    let beta = if with_r { opts.beta } else { 0.0 };
    if with_r {
        let pos_set = match sample_kind(spec.positive) {
            None => SampleSet::Rows,
            Some(k) => {
                let idx = cache.index(k);
                SampleSet::Classes(idx, &cache.targets[idx])
            }
        };
        if sample_kind(spec.positive) == sample_kind(spec.negative) && !opts.strict_class_exclusion {
            adjustment = 1.0;
        } else if sample_kind(spec.positive) == sample_kind(spec.negative) {
            // identical sets: the ratio is exactly one for every anchor that
            // still has another class to compare against
            for i in 0..n {
                fill_mult(pos_set, i, true, true, &mut mult);
                if mult.iter().all(|m| *m <= 0.0) {
                    return Err(Error::MissingNegative(i));
                }
            }
            adjustment = 1.0;
        } else {
            let mut pp = vec![0.0; set_len(pos_set)];
            let mut pn = vec![0.0; set_len(neg_set)];
            let mut mult_n = Vec::with_capacity(n);
            let mut pos_grads = Mat64::zeros(set_len(pos_set), d);
            let mut gi = vec![0.0; d];
            let r_scale = beta / n as f64;
            for i in 0..n {
                let zi = z.row(i);
                fill_mult(pos_set, i, true, opts.strict_class_exclusion, &mut mult);
                fill_mult(neg_set, i, true, opts.strict_class_exclusion, &mut mult_n);
                if mult.iter().all(|m| *m <= 0.0) || mult_n.iter().all(|m| *m <= 0.0) {
                    return Err(Error::MissingNegative(i));
                }
                let lse_p = weighted_softmax(zi, |u| set_value(pos_set, z, u), &mult, tau, &mut pp);
                let lse_n = weighted_softmax(zi, |u| set_value(neg_set, z, u), &mult_n, tau, &mut pn);
                let r_i = (lse_p - lse_n).exp();
                adjustment += r_i / n as f64;
                let c = r_scale * r_i / tau;
                if c == 0.0 {
                    continue;
                }
                gi.iter_mut().for_each(|v| *v = 0.0);
                for (probs, sign, set, grads) in [(&pp, 1.0, pos_set, &mut pos_grads), (&pn, -1.0, neg_set, &mut neg_grads)] {
                    let gs = grads.as_mut_slice();
                    for (u, &p) in probs.iter().enumerate() {
                        if p != 0.0 {
                            let v = set_value(set, z, u);
                            let cp = sign * c * p;
                            let gu = &mut gs[u * d..(u + 1) * d];
                            for t in 0..d {
                                gi[t] += cp * v[t];
                                gu[t] += cp * zi[t];
                            }
                        }
                    }
                }
                for (acc, v) in dz.row_mut(i).iter_mut().zip(&gi) {
                    *acc += v;
                }
            }
            scatter_set_grads(pos_set, &pos_grads, &mut dz, &mut cache.grads);
        }
    }
    scatter_set_grads(neg_set, &neg_grads, &mut dz, &mut cache.grads);

    for (slot, members) in classes.members.iter().enumerate() {
        for &j in members {
            for t in 0..d {
                dz[(j, t)] += leave_out_acc[slot][t];
            }
        }
    }
    for (t, g) in cache.targets.iter().zip(&cache.grads) {
        t.backward(g, &inputs, &mut dz);
    }

    Ok(LossBreakdown {
        total: align + unif + beta * adjustment,
        alignment: align,
        uniformity: unif,
        adjustment: if with_r { adjustment } else { 0.0 },
        beta,
        d_loss_d_z: dz,
        anchors: anchors.len(),
        denominator_terms: if exclude_self { n - 1 } else { n },
        fallbacks,
    })
}

fn scatter_set_grads(set: SampleSet<'_>, grads: &Mat64, dz: &mut Mat64, cache: &mut [Vec<Vec<f64>>]) {
    match set {
        SampleSet::Rows => {
            for (a, v) in dz.as_mut_slice().iter_mut().zip(grads.as_slice()) {
                *a += v;
            }
        }
        SampleSet::Classes(idx, _) => {
            for (slot, g) in grads.iter_rows().enumerate() {
                for (a, v) in cache[idx][slot].iter_mut().zip(g) {
                    *a += v;
                }
            }
        }
    }
}

/// Projection InfoNCE without the adjustment term.
pub fn selfp(batch: &EmbeddingBatch, spec: &ProjectionSpec, opts: &LossOptions) -> Result<LossBreakdown> {
    projected(batch, spec, opts, false)
}

/// Leave-one-out adjustment term `R`.
pub fn adjustment_r(batch: &EmbeddingBatch, spec: &ProjectionSpec, opts: &LossOptions) -> Result<f64> {
    let mut o = *opts;
    o.beta = 1.0;
    o.anchor_policy = AnchorPolicy::Skip;
    Ok(projected(batch, spec, &o, true)?.adjustment)
}

/// `selfp + β·R`.
pub fn projnce(batch: &EmbeddingBatch, spec: &ProjectionSpec, opts: &LossOptions) -> Result<LossBreakdown> {
    projected(batch, spec, opts, true)
}

fn soft_spec(positive: ProjKind, negative: ProjKind, kernel: Option<KernelConfig>, source: SoftSource) -> ProjectionSpec {
    let mut spec = ProjectionSpec::new(positive, negative);
    spec.kernel = Some(kernel.unwrap_or_default());
    spec.soft_source = source;
    spec
}

/// `g₊ = g₋ = f̂`, denominator over all `j`, no adjustment term.
pub fn softnce(batch: &EmbeddingBatch, kernel: Option<KernelConfig>, source: SoftSource) -> Result<LossBreakdown> {
    let spec = soft_spec(ProjKind::NwSoft, ProjKind::NwSoft, kernel, source);
    let opts = LossOptions {
        denominator: Denominator::IncludeAnchor,
        ..LossOptions::default()
    };
    selfp(batch, &spec, &opts)
}

/// `g₊ = f̂`, `g₋ = identity`, plus `β·R`.
pub fn softsupcon(
    batch: &EmbeddingBatch,
    kernel: Option<KernelConfig>,
    source: SoftSource,
    beta: f64,
) -> Result<LossBreakdown> {
    let spec = soft_spec(ProjKind::NwSoft, ProjKind::Identity, kernel, source);
    let opts = LossOptions {
        beta,
        ..LossOptions::default()
    };
    projnce(batch, &spec, &opts)
}

/// `g₊ = g₋ = median`, denominator over all `j`, no adjustment term.
pub fn mednce(batch: &EmbeddingBatch) -> Result<LossBreakdown> {
    let spec = ProjectionSpec::new(ProjKind::Median, ProjKind::Median);
    let opts = LossOptions {
        denominator: Denominator::IncludeAnchor,
        ..LossOptions::default()
    };
    selfp(batch, &spec, &opts)
}

/// `g₊ = median`, `g₋ = identity`, plus `β·R`.
pub fn medsupcon(batch: &EmbeddingBatch, beta: f64) -> Result<LossBreakdown> {
    let spec = ProjectionSpec::new(ProjKind::Median, ProjKind::Identity);
    let opts = LossOptions {
        beta,
        ..LossOptions::default()
    };
    projnce(batch, &spec, &opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "ce-probe-only")]
    CeProbeOnly,
    #[serde(rename = "infonce")]
    Infonce,
    #[serde(rename = "supcon")]
    Supcon,
    #[serde(rename = "projnce")]
    Projnce,
    #[serde(rename = "softnce")]
    Softnce,
    #[serde(rename = "softsupcon")]
    Softsupcon,
    #[serde(rename = "mednce")]
    Mednce,
    #[serde(rename = "medsupcon")]
    Medsupcon,
}

impl LossKind {
    /// The seven differentiable losses.
    pub const TRAINABLE: [LossKind; 7] = [
        LossKind::Infonce,
        LossKind::Supcon,
        LossKind::Projnce,
        LossKind::Softnce,
        LossKind::Softsupcon,
        LossKind::Mednce,
        LossKind::Medsupcon,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::CeProbeOnly => "ce-probe-only",
            LossKind::Infonce => "infonce",
            LossKind::Supcon => "supcon",
            LossKind::Projnce => "projnce",
            LossKind::Softnce => "softnce",
            LossKind::Softsupcon => "softsupcon",
            LossKind::Mednce => "mednce",
            LossKind::Medsupcon => "medsupcon",
        }
    }

    pub fn parse(s: &str) -> Result<LossKind> {
        std::iter::once(LossKind::CeProbeOnly)
            .chain(LossKind::TRAINABLE)
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown loss {s:?}")))
    }

    pub fn has_adjustment(self) -> bool {
        matches!(self, LossKind::Projnce | LossKind::Softsupcon | LossKind::Medsupcon)
    }
}

/// Loss selector with its options, as it appears in experiment configs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub loss: LossKind,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default)]
    pub kernel: KernelConfig,
    #[serde(default)]
    pub soft_source: SoftSource,
    /// Replaces the projections of `projnce` (default centroid/identity).
    #[serde(default)]
    pub projection: Option<ProjectionSpec>,
    #[serde(default)]
    pub anchor_policy: AnchorPolicy,
    #[serde(default)]
    pub strict_class_exclusion: bool,
    /// Sum the `projnce` denominator over all `j`, anchor included.
    #[serde(default)]
    pub literal_denominator: bool,
}

fn default_beta() -> f64 {
    1.0
}

impl LossConfig {
    pub fn new(loss: LossKind) -> Self {
        Self {
            loss,
            beta: 1.0,
            kernel: KernelConfig::default(),
            soft_source: SoftSource::NwEstimated,
            projection: None,
            anchor_policy: AnchorPolicy::Strict,
            strict_class_exclusion: false,
            literal_denominator: false,
        }
    }

    /// Projection pair and options this selector evaluates with. `supcon`
    /// and `infonce` report the equivalent projection form.
    pub fn resolved(&self) -> Result<(ProjectionSpec, LossOptions, bool)> {
        let kernel = Some(self.kernel);
        let mut opts = LossOptions {
            beta: self.beta,
            denominator: Denominator::ExcludeAnchor,
            strict_class_exclusion: self.strict_class_exclusion,
            anchor_policy: self.anchor_policy,
        };
        let with_source = |mut s: ProjectionSpec| {
            s.kernel = kernel;
            s.soft_source = self.soft_source;
            s
        };
        let (spec, with_r) = match self.loss {
            LossKind::CeProbeOnly => {
                return Err(Error::Config("ce-probe-only has no contrastive loss".into()))
            }
            LossKind::Infonce => (ProjectionSpec::new(ProjKind::Identity, ProjKind::Identity), false),
            LossKind::Supcon => (ProjectionSpec::new(ProjKind::Centroid, ProjKind::Identity), false),
            LossKind::Projnce => {
                if self.literal_denominator {
                    opts.denominator = Denominator::IncludeAnchor;
                }
                let base = self
                    .projection
                    .unwrap_or_else(|| ProjectionSpec::new(ProjKind::Centroid, ProjKind::Identity));
                (with_source(base), true)
            }
            LossKind::Softnce => {
                opts.denominator = Denominator::IncludeAnchor;
                (with_source(ProjectionSpec::new(ProjKind::NwSoft, ProjKind::NwSoft)), false)
            }
            LossKind::Softsupcon => (with_source(ProjectionSpec::new(ProjKind::NwSoft, ProjKind::Identity)), true),
            LossKind::Mednce => {
                opts.denominator = Denominator::IncludeAnchor;
                (ProjectionSpec::new(ProjKind::Median, ProjKind::Median), false)
            }
            LossKind::Medsupcon => (ProjectionSpec::new(ProjKind::Median, ProjKind::Identity), true),
        };
        if !with_r {
            opts.beta = 0.0;
        }
        Ok((spec, opts, with_r))
    }
}

/// Value, breakdown and `∂L/∂Z` of the configured loss.
pub fn evaluate_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossBreakdown> {
    match cfg.loss {
        LossKind::Supcon => supcon(batch, cfg.anchor_policy),
        LossKind::Infonce => {
            let partners = batch.partner_map();
            if partners.iter().all(Option::is_some) {
                let p: Vec<usize> = partners.into_iter().map(|p| p.expect("some")).collect();
                infonce_self(batch, &p)
            } else {
                let (spec, opts, _) = cfg.resolved()?;
                selfp(batch, &spec, &opts)
            }
        }
        _ => {
            let (spec, opts, with_r) = cfg.resolved()?;
            projected(batch, &spec, &opts, with_r)
        }
    }
}

pub fn loss_gradient(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<Mat64> {
    Ok(evaluate_loss(batch, cfg)?.d_loss_d_z)
}

/// Outcome of one finite-difference comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub loss: LossKind,
    pub seed: u64,
    pub relative_error: f64,
}

pub const GRADCHECK_EPS: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-5;

/// Compares the analytic gradient of `L(normalize(U))` with respect to raw
/// `U` against central differences on a random batch. Every class gets at
/// least two members so no anchor is skipped.
pub fn gradcheck(cfg: &LossConfig, seed: u64, n: usize, d_z: usize, num_classes: usize, tau: f64) -> Result<GradCheck> {
    let mut rng = RngState::new(seed);
    let u: Vec<f64> = (0..n * d_z).map(|_| rng.normal()).collect();
    let mut labels: Vec<usize> = (0..n).map(|i| i % num_classes).collect();
    rng.shuffle(&mut labels);
    let analytic_soft = if cfg.soft_source == SoftSource::Analytic {
        let mut p = Mat64::zeros(n, num_classes);
        for i in 0..n {
            let w: Vec<f64> = (0..num_classes).map(|_| rng.uniform() + 0.05).collect();
            let s: f64 = w.iter().sum();
            for c in 0..num_classes {
                p[(i, c)] = w[c] / s;
            }
        }
        Some(p)
    } else {
        None
    };
    let make = |u: &[f64]| -> Result<(EmbeddingBatch, Vec<f64>)> {
        let mut z = Mat64::zeros(n, d_z);
        let mut norms = Vec::with_capacity(n);
        for i in 0..n {
            let row = &u[i * d_z..(i + 1) * d_z];
            let nr = crate::numerics::norm2(row);
            norms.push(nr);
            for t in 0..d_z {
                z[(i, t)] = row[t] / nr;
            }
        }
        let mut b = EmbeddingBatch::new_unchecked(z, labels.clone(), num_classes, tau)?;
        if let Some(p) = &analytic_soft {
            b = b.with_soft_labels(p.clone())?;
        }
        Ok((b, norms))
    };
    let (batch, norms) = make(&u)?;
    let br = evaluate_loss(&batch, cfg)?;
    let mut analytic = Vec::with_capacity(n * d_z);
    for i in 0..n {
        analytic.extend(normalize_backward(batch.z().row(i), norms[i], br.d_loss_d_z.row(i)));
    }
    let numeric = crate::numerics::central_diff_grad(
        |theta| match make(theta).and_then(|(b, _)| evaluate_loss(&b, cfg)) {
            Ok(b) => b.total,
            Err(_) => f64::NAN,
        },
        &u,
        GRADCHECK_EPS,
    )?;
    Ok(GradCheck {
        loss: cfg.loss,
        seed,
        relative_error: crate::numerics::relative_l2_error(&analytic, &numeric, 1e-8),
    })
}
