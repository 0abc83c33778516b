//! Class-embedding functions g₊/g₋: identity, centroid, Nadaraya–Watson soft
//! conditional mean f̂, and coordinate-wise median, together with their
//! pullbacks to the batch embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{dot_unchecked, norm2, normalize_backward, Mat64, EPS_NORM};

/// Denominators of f̂ at or below this are treated as empty support.
pub const EPS_DEN: f64 = 1e-12;
pub const DEFAULT_BANDWIDTH: f64 = 0.6;
/// `h(256, 2) = 2.4 · 256^{−1/4} = 0.6`.
pub const BANDWIDTH_SCALE: f64 = 2.4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `K(t) = 1 − t²` on `[0, 1]`.
    #[default]
    EpanechnikovScaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Metric {
    #[default]
    #[serde(rename = "l1")]
    L1,
    #[serde(rename = "l2")]
    L2,
    /// `½ − ½·u·v/(‖u‖‖v‖)`
    #[serde(rename = "cos")]
    Cos,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::L2 => "l2",
            Metric::Cos => "cos",
        }
    }

    pub fn parse(s: &str) -> Result<Metric> {
        match s {
            "l1" => Ok(Metric::L1),
            "l2" => Ok(Metric::L2),
            "cos" => Ok(Metric::Cos),
            other => Err(Error::Config(format!("unknown metric {other:?}"))),
        }
    }

    pub fn distance(self, u: &[f64], v: &[f64]) -> f64 {
        match self {
            Metric::L1 => u.iter().zip(v).map(|(a, b)| (a - b).abs()).sum(),
            Metric::L2 => u
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt(),
            Metric::Cos => 0.5 - 0.5 * dot_unchecked(u, v) / (norm2(u) * norm2(v)),
        }
    }

    /// Adds `s·∂d/∂u` to `gu` and `s·∂d/∂v` to `gv`.
    fn accumulate_grad(self, u: &[f64], v: &[f64], s: f64, gu: &mut [f64], gv: &mut [f64]) {
        match self {
            Metric::L1 => {
                for t in 0..u.len() {
                    let sg = (u[t] - v[t]).signum() * f64::from(u[t] != v[t]);
                    gu[t] += s * sg;
                    gv[t] -= s * sg;
                }
            }
            Metric::L2 => {
                let d = self.distance(u, v);
                if d > 0.0 {
                    for t in 0..u.len() {
                        let g = s * (u[t] - v[t]) / d;
                        gu[t] += g;
                        gv[t] -= g;
                    }
                }
            }
            Metric::Cos => {
                let (nu, nv) = (norm2(u), norm2(v));
                let c = dot_unchecked(u, v);
                for t in 0..u.len() {
                    gu[t] += -0.5 * s * (v[t] / (nu * nv) - c * u[t] / (nu * nu * nu * nv));
                    gv[t] += -0.5 * s * (u[t] / (nu * nv) - c * v[t] / (nv * nv * nv * nu));
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    #[serde(default)]
    pub kernel: KernelKind,
    pub h: f64,
    #[serde(default)]
    pub metric: Metric,
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            kernel: KernelKind::EpanechnikovScaled,
            h: DEFAULT_BANDWIDTH,
            metric: Metric::L1,
        }
    }
}

impl KernelConfig {
    pub fn new(h: f64, metric: Metric) -> Result<Self> {
        let cfg = Self {
            kernel: KernelKind::EpanechnikovScaled,
            h,
            metric,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0) || !self.h.is_finite() {
            return Err(Error::Config(format!("bandwidth must be positive, got {}", self.h)));
        }
        Ok(())
    }

    /// `K_h` as a function of distance.
    pub fn weight_at(&self, d: f64) -> f64 {
        let t = d / self.h;
        if t <= 1.0 {
            (1.0 - t * t) / self.h
        } else {
            0.0
        }
    }

    /// `dK_h/dd`, zero outside the support.
    fn weight_slope(&self, d: f64) -> f64 {
        if d < self.h {
            -2.0 * d / (self.h * self.h * self.h)
        } else {
            0.0
        }
    }
}

pub fn kernel_weight(cfg: &KernelConfig, z: &[f64], zj: &[f64]) -> f64 {
    cfg.weight_at(cfg.metric.distance(z, zj))
}

/// `h = 2.4 · N^{−1/(d_z+2)}`.
pub fn bandwidth_schedule(n: usize, d_z: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::Domain(format!("bandwidth schedule needs N >= 2, got {n}")));
    }
    Ok(BANDWIDTH_SCALE * (n as f64).powf(-1.0 / (d_z as f64 + 2.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjKind {
    Identity,
    Centroid,
    NwSoft,
    Median,
}

impl ProjKind {
    pub fn name(self) -> &'static str {
        match self {
            ProjKind::Identity => "identity",
            ProjKind::Centroid => "centroid",
            ProjKind::NwSoft => "nw_soft",
            ProjKind::Median => "median",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SoftSource {
    #[default]
    NwEstimated,
    /// Exact posteriors supplied with the batch; constant in the embeddings.
    Analytic,
}

/// Which points serve as the NW reference set when the batch queries itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NwReference {
    /// Whole batch, the query included.
    #[default]
    Batch,
    /// Whole batch except the query.
    LeaveOneOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmptySupportPolicy {
    /// Rows without support take the one-hot observed label; classes with a
    /// vanishing f̂ denominator use the class centroid.
    #[default]
    Centroid,
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub positive: ProjKind,
    pub negative: ProjKind,
    #[serde(default)]
    pub kernel: Option<KernelConfig>,
    #[serde(default)]
    pub renormalize: bool,
    #[serde(default)]
    pub soft_source: SoftSource,
    #[serde(default)]
    pub nw_reference: NwReference,
    #[serde(default)]
    pub empty_support: EmptySupportPolicy,
}

impl ProjectionSpec {
    pub fn new(positive: ProjKind, negative: ProjKind) -> Self {
        Self {
            positive,
            negative,
            kernel: None,
            renormalize: false,
            soft_source: SoftSource::NwEstimated,
            nw_reference: NwReference::Batch,
            empty_support: EmptySupportPolicy::Centroid,
        }
    }

    pub fn with_kernel(mut self, kernel: KernelConfig) -> Self {
        self.kernel = Some(kernel);
        self
    }

    pub fn uses_nw(&self) -> bool {
        self.positive == ProjKind::NwSoft || self.negative == ProjKind::NwSoft
    }

    pub fn validate(&self) -> Result<()> {
        if self.uses_nw() && self.soft_source == SoftSource::NwEstimated {
            match &self.kernel {
                Some(k) => k.validate()?,
                None => return Err(Error::Config("nw_soft projection needs a kernel".into())),
            }
        }
        Ok(())
    }
}

/// Per-sample class posteriors, `N × M`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabelTable {
    pub probs: Mat64,
    pub source: SoftSource,
}

impl SoftLabelTable {
    pub fn analytic(probs: Mat64) -> Self {
        Self {
            probs,
            source: SoftSource::Analytic,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.probs.cols()
    }
}

/// NW estimate of `p(c | z_q)` for every query against a labelled reference
/// set.
pub fn nw_soft_labels(
    queries: &Mat64,
    reference: &Mat64,
    ref_labels: &[usize],
    num_classes: usize,
    cfg: &KernelConfig,
) -> Result<SoftLabelTable> {
    cfg.validate()?;
    if reference.rows() == 0 {
        return Err(Error::EmptySupport("reference set is empty".into()));
    }
    if ref_labels.len() != reference.rows() {
        return Err(Error::Dimension {
            expected: reference.rows(),
            got: ref_labels.len(),
        });
    }
    if queries.cols() != reference.cols() {
        return Err(Error::Dimension {
            expected: reference.cols(),
            got: queries.cols(),
        });
    }
    let mut probs = Mat64::zeros(queries.rows(), num_classes);
    for (q, zq) in queries.iter_rows().enumerate() {
        let row = probs.row_mut(q);
        let mut total = 0.0;
        for (zj, &c) in reference.iter_rows().zip(ref_labels) {
            let w = kernel_weight(cfg, zq, zj);
            if w > 0.0 {
                row[c] += w;
                total += w;
            }
        }
        if total <= 0.0 {
            return Err(Error::EmptySupport(format!("query {q} has no reference within h")));
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Ok(SoftLabelTable {
        probs,
        source: SoftSource::NwEstimated,
    })
}

fn maybe_renormalize(v: Vec<f64>, renormalize: bool) -> Result<Vec<f64>> {
    if !renormalize {
        return Ok(v);
    }
    let n = norm2(&v);
    if n <= EPS_NORM {
        return Err(Error::DegenerateNorm { norm: n });
    }
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Mean of the embeddings labelled `c`.
pub fn centroid(z: &Mat64, labels: &[usize], c: usize, renormalize: bool) -> Result<Vec<f64>> {
    let mut sum = vec![0.0; z.cols()];
    let mut count = 0usize;
    for (row, &l) in z.iter_rows().zip(labels) {
        if l == c {
            for (s, v) in sum.iter_mut().zip(row) {
                *s += v;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyClass(c));
    }
    maybe_renormalize(
        sum.into_iter().map(|s| s / count as f64).collect(),
        renormalize,
    )
}

/// `f̂(c) = Σⱼ p̂(c|zⱼ) zⱼ / Σⱼ p̂(c|zⱼ)`.
pub fn fhat(c: usize, z: &Mat64, soft: &SoftLabelTable, renormalize: bool) -> Result<Vec<f64>> {
    if soft.probs.rows() != z.rows() {
        return Err(Error::Dimension {
            expected: z.rows(),
            got: soft.probs.rows(),
        });
    }
    if c >= soft.num_classes() {
        return Err(Error::EmptyClass(c));
    }
    let mut sum = vec![0.0; z.cols()];
    let mut den = 0.0;
    for (j, row) in z.iter_rows().enumerate() {
        let w = soft.probs[(j, c)];
        den += w;
        for (s, v) in sum.iter_mut().zip(row) {
            *s += w * v;
        }
    }
    if den <= EPS_DEN {
        return Err(Error::EmptySupport(format!("f̂ denominator for class {c} is {den:e}")));
    }
    maybe_renormalize(sum.into_iter().map(|s| s / den).collect(), renormalize)
}

/// Order statistics selected by the median of `values`, with weights
/// (a single index, or the two middle indices at ½ each).
fn median_selection(values: &mut [(f64, usize)]) -> [(usize, f64); 2] {
    values.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let n = values.len();
    if n % 2 == 1 {
        [(values[n / 2].1, 1.0), (values[n / 2].1, 0.0)]
    } else {
        [(values[n / 2 - 1].1, 0.5), (values[n / 2].1, 0.5)]
    }
}

/// Coordinate-wise median of the embeddings labelled `c`.
pub fn median_projection(
    z: &Mat64,
    labels: &[usize],
    c: usize,
    renormalize: bool,
) -> Result<Vec<f64>> {
    let members: Vec<usize> = (0..z.rows()).filter(|&j| labels[j] == c).collect();
    if members.is_empty() {
        return Err(Error::EmptyClass(c));
    }
    let mut buf = Vec::with_capacity(members.len());
    let med = (0..z.cols())
        .map(|t| {
            buf.clear();
            buf.extend(members.iter().map(|&j| (z[(j, t)], j)));
            median_selection(&mut buf)
                .iter()
                .map(|&(j, w)| w * z[(j, t)])
                .sum()
        })
        .collect();
    maybe_renormalize(med, renormalize)
}

/// Classes present in a batch, in increasing label order.
#[derive(Debug, Clone)]
pub(crate) struct ClassIndex {
    pub present: Vec<usize>,
    pub slot_of: Vec<Option<usize>>,
    pub members: Vec<Vec<usize>>,
}

impl ClassIndex {
    pub fn new(labels: &[usize], num_classes: usize) -> Self {
        let mut slot_of = vec![None; num_classes];
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut present = Vec::new();
        let mut seen = vec![false; num_classes];
        for &c in labels {
            seen[c] = true;
        }
        for c in 0..num_classes {
            if seen[c] {
                slot_of[c] = Some(present.len());
                present.push(c);
                members.push(Vec::new());
            }
        }
        for (i, &c) in labels.iter().enumerate() {
            members[slot_of[c].expect("present")].push(i);
        }
        Self {
            present,
            slot_of,
            members,
        }
    }

    pub fn slot(&self, c: usize) -> usize {
        self.slot_of[c].expect("class present in batch")
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }
}

#[derive(Debug, Clone)]
struct NwPair {
    j: usize,
    l: usize,
    w: f64,
    d: f64,
}

/// Everything needed to differentiate NW soft labels through the kernel.
#[derive(Debug, Clone)]
struct NwTape {
    cfg: KernelConfig,
    pairs: Vec<NwPair>,
    row_totals: Vec<f64>,
    /// Rows that fell back to one-hot labels (no gradient).
    fallback_rows: Vec<bool>,
}

#[derive(Debug, Clone)]
enum ClassDetail {
    Centroid,
    Median {
        /// `[slot][coord]` selected order statistics.
        picks: Vec<Vec<[(usize, f64); 2]>>,
    },
    Nw {
        soft: Mat64,
        /// `Σⱼ s_jc` per slot.
        dens: Vec<f64>,
        tape: Option<NwTape>,
        /// Slots that fell back to the centroid.
        centroid_slots: Vec<bool>,
    },
}

/// One target vector per present class with its pullback to `Z`.
#[derive(Debug, Clone)]
pub(crate) struct ClassTargets {
    pub values: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
    norms: Option<Vec<f64>>,
    detail: ClassDetail,
    pub fallbacks: usize,
}

pub(crate) struct ClassInputs<'a> {
    pub z: &'a Mat64,
    pub labels: &'a [usize],
    pub num_classes: usize,
    pub classes: &'a ClassIndex,
    pub analytic_soft: Option<&'a Mat64>,
}

impl ClassTargets {
    pub fn build(kind: ProjKind, spec: &ProjectionSpec, inp: &ClassInputs<'_>) -> Result<Self> {
        let d = inp.z.cols();
        let cls = inp.classes;
        let class_mean = |slot: usize| -> Vec<f64> {
            let members = &cls.members[slot];
            let mut m = vec![0.0; d];
            for &j in members {
                for (a, v) in m.iter_mut().zip(inp.z.row(j)) {
                    *a += v;
                }
            }
            m.iter_mut().for_each(|a| *a /= members.len() as f64);
            m
        };
        let mut fallbacks = 0;
        let (raw, detail) = match kind {
            ProjKind::Centroid => ((0..cls.len()).map(class_mean).collect(), ClassDetail::Centroid),
            ProjKind::Median => {
                let mut picks = Vec::with_capacity(cls.len());
                let mut raw = Vec::with_capacity(cls.len());
                let mut buf = Vec::new();
                for members in &cls.members {
                    let mut p = Vec::with_capacity(d);
                    let mut v = Vec::with_capacity(d);
                    for t in 0..d {
                        buf.clear();
                        buf.extend(members.iter().map(|&j| (inp.z[(j, t)], j)));
                        let sel = median_selection(&mut buf);
                        v.push(sel.iter().map(|&(j, w)| w * inp.z[(j, t)]).sum());
                        p.push(sel);
                    }
                    picks.push(p);
                    raw.push(v);
                }
                (raw, ClassDetail::Median { picks })
            }
            ProjKind::NwSoft => {
                let (soft, tape, rows_fb) = match (spec.soft_source, inp.analytic_soft) {
                    (SoftSource::Analytic, Some(p)) => {
                        if p.rows() != inp.z.rows() || p.cols() != inp.num_classes {
                            return Err(Error::Dimension {
                                expected: inp.z.rows() * inp.num_classes,
                                got: p.rows() * p.cols(),
                            });
                        }
                        (p.clone(), None, 0)
                    }
                    (SoftSource::Analytic, None) => {
                        return Err(Error::Config(
                            "analytic soft labels requested but none supplied".into(),
                        ))
                    }
                    (SoftSource::NwEstimated, _) => {
                        let cfg = spec
                            .kernel
                            .ok_or_else(|| Error::Config("nw_soft projection needs a kernel".into()))?;
                        let (soft, tape) = batch_nw(inp, &cfg, spec)?;
                        let n_fb = tape.fallback_rows.iter().filter(|b| **b).count();
                        (soft, Some(tape), n_fb)
                    }
                };
                fallbacks += rows_fb;
                let mut raw = Vec::with_capacity(cls.len());
                let mut dens = Vec::with_capacity(cls.len());
                let mut centroid_slots = Vec::with_capacity(cls.len());
                for (slot, &c) in cls.present.iter().enumerate() {
                    let mut v = vec![0.0; d];
                    let mut den = 0.0;
                    for (j, row) in inp.z.iter_rows().enumerate() {
                        let w = soft[(j, c)];
                        if w != 0.0 {
                            den += w;
                            for (a, x) in v.iter_mut().zip(row) {
                                *a += w * x;
                            }
                        }
                    }
                    if den <= EPS_DEN {
                        if spec.empty_support == EmptySupportPolicy::Strict {
                            return Err(Error::EmptySupport(format!(
                                "f̂ denominator for class {c} is {den:e}"
                            )));
                        }
                        fallbacks += 1;
                        centroid_slots.push(true);
                        raw.push(class_mean(slot));
                    } else {
                        v.iter_mut().for_each(|a| *a /= den);
                        centroid_slots.push(false);
                        raw.push(v);
                    }
                    dens.push(den);
                }
                (
                    raw,
                    ClassDetail::Nw {
                        soft,
                        dens,
                        tape,
                        centroid_slots,
                    },
                )
            }
            ProjKind::Identity => {
                return Err(Error::Config("identity is not a class-level projection".into()))
            }
        };
        let (values, norms) = renormalize_all(&raw, spec.renormalize)?;
        Ok(Self {
            values,
            raw,
            norms,
            detail,
            fallbacks,
        })
    }

    /// Adds `Σ_slot ∂L/∂value_slot · ∂value_slot/∂Z` to `dz`.
    pub fn backward(&self, grads: &[Vec<f64>], inp: &ClassInputs<'_>, dz: &mut Mat64) {
        let raw_grads = pull_renorm(&self.values, &self.norms, grads);
        let cls = inp.classes;
        let add_mean = |slot: usize, g: &[f64], dz: &mut Mat64| {
            let members = &cls.members[slot];
            let s = 1.0 / members.len() as f64;
            for &j in members {
                for (a, v) in dz.row_mut(j).iter_mut().zip(g) {
                    *a += s * v;
                }
            }
        };
        match &self.detail {
            ClassDetail::Centroid => {
                for (slot, g) in raw_grads.iter().enumerate() {
                    add_mean(slot, g, dz);
                }
            }
            ClassDetail::Median { picks } => {
                for (slot, g) in raw_grads.iter().enumerate() {
                    for (t, sel) in picks[slot].iter().enumerate() {
                        for &(j, w) in sel {
                            dz[(j, t)] += w * g[t];
                        }
                    }
                }
            }
            ClassDetail::Nw {
                soft,
                dens,
                tape,
                centroid_slots,
            } => {
                let n = inp.z.rows();
                let m = inp.num_classes;
                // ∂L/∂s_jc, only needed when the soft labels depend on Z
                let mut g_soft = tape.as_ref().map(|_| Mat64::zeros(n, m));
                for (slot, g) in raw_grads.iter().enumerate() {
                    if centroid_slots[slot] {
                        add_mean(slot, g, dz);
                        continue;
                    }
                    let c = cls.present[slot];
                    let den = dens[slot];
                    let fh = &self.raw[slot];
                    for j in 0..n {
                        let w = soft[(j, c)];
                        let zj = inp.z.row(j);
                        if w != 0.0 {
                            let s = w / den;
                            for (a, v) in dz.row_mut(j).iter_mut().zip(g) {
                                *a += s * v;
                            }
                        }
                        if let Some(gs) = g_soft.as_mut() {
                            let mut acc = 0.0;
                            for t in 0..g.len() {
                                acc += g[t] * (zj[t] - fh[t]);
                            }
                            gs[(j, c)] += acc / den;
                        }
                    }
                }
                if let (Some(tape), Some(gs)) = (tape, g_soft) {
                    nw_backward(tape, soft, &gs, inp, dz);
                }
            }
        }
    }
}

fn renormalize_all(
    raw: &[Vec<f64>],
    renormalize: bool,
) -> Result<(Vec<Vec<f64>>, Option<Vec<f64>>)> {
    if !renormalize {
        return Ok((raw.to_vec(), None));
    }
    let mut norms = Vec::with_capacity(raw.len());
    let mut values = Vec::with_capacity(raw.len());
    for v in raw {
        let n = norm2(v);
        if n <= EPS_NORM {
            return Err(Error::DegenerateNorm { norm: n });
        }
        norms.push(n);
        values.push(v.iter().map(|x| x / n).collect());
    }
    Ok((values, Some(norms)))
}

fn pull_renorm(values: &[Vec<f64>], norms: &Option<Vec<f64>>, grads: &[Vec<f64>]) -> Vec<Vec<f64>> {
    match norms {
        None => grads.to_vec(),
        Some(ns) => values
            .iter()
            .zip(ns)
            .zip(grads)
            .map(|((v, &n), g)| normalize_backward(v, n, g))
            .collect(),
    }
}

/// Renormalizes a single vector, returning the norm for the pullback.
pub(crate) fn renormalize_one(v: Vec<f64>, renormalize: bool) -> Result<(Vec<f64>, Option<f64>)> {
    if !renormalize {
        return Ok((v, None));
    }
    let n = norm2(&v);
    if n <= EPS_NORM {
        return Err(Error::DegenerateNorm { norm: n });
    }
    Ok((v.iter().map(|x| x / n).collect(), Some(n)))
}

pub(crate) fn pull_renorm_one(value: &[f64], norm: Option<f64>, g: &[f64]) -> Vec<f64> {
    match norm {
        None => g.to_vec(),
        Some(n) => normalize_backward(value, n, g),
    }
}

/// NW soft labels of the batch against itself.
fn batch_nw(
    inp: &ClassInputs<'_>,
    cfg: &KernelConfig,
    spec: &ProjectionSpec,
) -> Result<(Mat64, NwTape)> {
    let n = inp.z.rows();
    let m = inp.num_classes;
    let mut soft = Mat64::zeros(n, m);
    let mut pairs = Vec::new();
    let mut row_totals = vec![0.0; n];
    let mut fallback_rows = vec![false; n];
    let include_self = spec.nw_reference == NwReference::Batch;
    for j in 0..n {
        let zj = inp.z.row(j);
        let row_start = pairs.len();
        for l in 0..n {
            if l == j && !include_self {
                continue;
            }
            let d = if l == j {
                0.0
            } else {
                cfg.metric.distance(zj, inp.z.row(l))
            };
            let w = cfg.weight_at(d);
            if w > 0.0 {
                pairs.push(NwPair { j, l, w, d });
            }
        }
        let total: f64 = pairs[row_start..].iter().map(|p| p.w).sum();
        if total <= 0.0 {
            if spec.empty_support == EmptySupportPolicy::Strict {
                return Err(Error::EmptySupport(format!("query {j} has no reference within h")));
            }
            fallback_rows[j] = true;
            soft[(j, inp.labels[j])] = 1.0;
            continue;
        }
        row_totals[j] = total;
        for p in &pairs[row_start..] {
            soft[(j, inp.labels[p.l])] += p.w;
        }
        for v in soft.row_mut(j) {
            *v /= total;
        }
    }
    Ok((
        soft,
        NwTape {
            cfg: *cfg,
            pairs,
            row_totals,
            fallback_rows,
        },
    ))
}

fn nw_backward(tape: &NwTape, soft: &Mat64, g_soft: &Mat64, inp: &ClassInputs<'_>, dz: &mut Mat64) {
    let n = inp.z.rows();
    let d = inp.z.cols();
    // Σ_c G_jc s_jc per row
    let mean_g: Vec<f64> = (0..n)
        .map(|j| dot_unchecked(g_soft.row(j), soft.row(j)))
        .collect();
    let mut gu = vec![0.0; d];
    let mut gv = vec![0.0; d];
    for p in &tape.pairs {
        if p.j == p.l || tape.fallback_rows[p.j] {
            continue;
        }
        let slope = tape.cfg.weight_slope(p.d);
        if slope == 0.0 {
            continue;
        }
        let g_w = (g_soft[(p.j, inp.labels[p.l])] - mean_g[p.j]) / tape.row_totals[p.j];
        gu.iter_mut().for_each(|v| *v = 0.0);
        gv.iter_mut().for_each(|v| *v = 0.0);
        tape.cfg.metric.accumulate_grad(
            inp.z.row(p.j),
            inp.z.row(p.l),
            g_w * slope,
            &mut gu,
            &mut gv,
        );
        for t in 0..d {
            dz[(p.j, t)] += gu[t];
            dz[(p.l, t)] += gv[t];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{normalize_sphere, RngState};

    fn random_sphere(n: usize, d: usize, rng: &mut RngState) -> Mat64 {
        let mut z = Mat64::zeros(n, d);
        for i in 0..n {
            let u: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            z.row_mut(i).copy_from_slice(&normalize_sphere(&u).unwrap());
        }
        z
    }

    #[test]
    fn kernel_weight_examples() {
        let cfg = KernelConfig::default();
        assert_eq!(cfg.h, 0.6);
        assert_eq!(cfg.metric, Metric::L1);
        assert!((kernel_weight(&cfg, &[0.2, 0.1], &[0.2, 0.1]) - 1.0 / 0.6).abs() < 1e-15);
        assert_eq!(kernel_weight(&cfg, &[0.0, 0.0], &[0.5, 0.5]), 0.0);
        let w = kernel_weight(&cfg, &[0.0, 0.0], &[0.1, 0.2]);
        assert!((w - 1.25).abs() < 1e-12, "{w}");
        let mut last = f64::INFINITY;
        for k in 0..100 {
            let w = cfg.weight_at(k as f64 * 0.01);
            assert!(w >= 0.0 && w <= last);
            last = w;
        }
    }

    #[test]
    fn cosine_dissimilarity() {
        assert!((Metric::Cos.distance(&[1.0, 0.0], &[1.0, 0.0])).abs() < 1e-15);
        assert!((Metric::Cos.distance(&[1.0, 0.0], &[-2.0, 0.0]) - 1.0).abs() < 1e-15);
        assert!((Metric::Cos.distance(&[1.0, 0.0], &[0.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn metric_gradients_match_differences() {
        let mut rng = RngState::new(6);
        for metric in [Metric::L1, Metric::L2, Metric::Cos] {
            let u: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let mut gu = vec![0.0; 3];
            let mut gv = vec![0.0; 3];
            metric.accumulate_grad(&u, &v, 1.0, &mut gu, &mut gv);
            for t in 0..3 {
                let e = 1e-6;
                let mut up = u.clone();
                up[t] += e;
                let mut um = u.clone();
                um[t] -= e;
                let fd = (metric.distance(&up, &v) - metric.distance(&um, &v)) / (2.0 * e);
                assert!((fd - gu[t]).abs() < 1e-7, "{metric:?}");
                let mut vp = v.clone();
                vp[t] += e;
                let mut vm = v.clone();
                vm[t] -= e;
                let fd = (metric.distance(&u, &vp) - metric.distance(&u, &vm)) / (2.0 * e);
                assert!((fd - gv[t]).abs() < 1e-7, "{metric:?}");
            }
        }
    }

    #[test]
    fn centroid_examples() {
        let z = Mat64::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(centroid(&z, &[0, 0], 0, false).unwrap(), vec![0.5, 0.5]);
        let r = centroid(&z, &[0, 0], 0, true).unwrap();
        assert!((norm2(&r) - 1.0).abs() < 1e-15);
        assert!(matches!(centroid(&z, &[0, 0], 1, false), Err(Error::EmptyClass(1))));
        let same = Mat64::from_rows(&vec![vec![0.6, 0.8]; 3]).unwrap();
        let c = centroid(&same, &[1, 1, 1], 1, false).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.8).abs() < 1e-15);

        let mut rng = RngState::new(2);
        let z = random_sphere(20, 3, &mut rng);
        let labels: Vec<usize> = (0..20).map(|i| i % 3).collect();
        for c in 0..3 {
            let got = centroid(&z, &labels, c, false).unwrap();
            let mut want = [0.0; 3];
            let mut cnt = 0.0;
            for i in (c..20).step_by(3) {
                for t in 0..3 {
                    want[t] += z[(i, t)];
                }
                cnt += 1.0;
            }
            for t in 0..3 {
                assert!((got[t] - want[t] / cnt).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn median_examples() {
        let z = Mat64::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0], vec![10.0, 10.0]]).unwrap();
        assert_eq!(median_projection(&z, &[0, 0, 0], 0, false).unwrap(), vec![1.0, 1.0]);
        assert_eq!(median_projection(&z, &[0, 1, 1], 0, false).unwrap(), vec![0.0, 0.0]);
        assert_eq!(median_projection(&z, &[0, 1, 1], 1, false).unwrap(), vec![5.5, 5.5]);
        assert!(median_projection(&z, &[0, 0, 0], 2, false).is_err());

        // an outlier moves the median less than the mean
        let base = vec![
            vec![1.0, 0.0],
            vec![0.9, 0.1],
            vec![0.95, -0.1],
            vec![1.05, 0.05],
            vec![1.0, -0.05],
        ];
        let mut bad = base.clone();
        bad[4] = vec![-5.0, 7.0];
        let (zb, zo) = (Mat64::from_rows(&base).unwrap(), Mat64::from_rows(&bad).unwrap());
        let l = [0; 5];
        let shift = |a: Vec<f64>, b: Vec<f64>| norm2(&[a[0] - b[0], a[1] - b[1]]);
        let dm = shift(
            median_projection(&zb, &l, 0, false).unwrap(),
            median_projection(&zo, &l, 0, false).unwrap(),
        );
        let dc = shift(
            centroid(&zb, &l, 0, false).unwrap(),
            centroid(&zo, &l, 0, false).unwrap(),
        );
        assert!(dm < dc, "{dm} vs {dc}");
    }

    #[test]
    fn nw_soft_label_examples() {
        let cfg = KernelConfig::default();
        let refs = Mat64::from_rows(&[vec![0.0, 0.0], vec![0.2, 0.0], vec![0.0, 0.1]]).unwrap();
        let q = Mat64::from_rows(&[vec![0.05, 0.05]]).unwrap();
        let one = nw_soft_labels(&q, &refs, &[1, 1, 1], 2, &cfg).unwrap();
        assert_eq!(one.probs.row(0), &[0.0, 1.0]);

        let refs = Mat64::from_rows(&[vec![0.1, 0.0], vec![-0.1, 0.0]]).unwrap();
        let q = Mat64::from_rows(&[vec![0.0, 0.0]]).unwrap();
        let half = nw_soft_labels(&q, &refs, &[0, 1], 2, &cfg).unwrap();
        assert!((half.probs[(0, 0)] - 0.5).abs() < 1e-15);

        let far = Mat64::from_rows(&[vec![5.0, 5.0]]).unwrap();
        assert!(matches!(
            nw_soft_labels(&far, &refs, &[0, 1], 2, &cfg),
            Err(Error::EmptySupport(_))
        ));

        let mut rng = RngState::new(9);
        let z = random_sphere(30, 2, &mut rng);
        let labels: Vec<usize> = (0..30).map(|_| rng.below(3)).collect();
        for metric in [Metric::L1, Metric::L2, Metric::Cos] {
            let cfg = KernelConfig::new(0.8, metric).unwrap();
            let t = nw_soft_labels(&z, &z, &labels, 3, &cfg).unwrap();
            for q in 0..30 {
                let mut num = [0.0; 3];
                let mut den = 0.0;
                for j in 0..30 {
                    let dist = metric.distance(z.row(q), z.row(j));
                    let w = if dist <= 0.8 {
                        (1.0 - (dist / 0.8).powi(2)) / 0.8
                    } else {
                        0.0
                    };
                    num[labels[j]] += w;
                    den += w;
                }
                let row = t.probs.row(q);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for c in 0..3 {
                    assert!((row[c] - num[c] / den).abs() < 1e-12);
                    assert!((0.0..=1.0).contains(&row[c]));
                }
            }
        }
    }

    #[test]
    fn fhat_examples() {
        let mut rng = RngState::new(1);
        let z = random_sphere(12, 3, &mut rng);
        let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
        let mut onehot = Mat64::zeros(12, 2);
        for (i, &c) in labels.iter().enumerate() {
            onehot[(i, c)] = 1.0;
        }
        let table = SoftLabelTable::analytic(onehot);
        for c in 0..2 {
            let a = fhat(c, &z, &table, false).unwrap();
            let b = centroid(&z, &labels, c, false).unwrap();
            for t in 0..3 {
                assert!((a[t] - b[t]).abs() < 1e-12);
            }
        }
        let mut single = Mat64::zeros(12, 2);
        single[(4, 1)] = 1.0;
        for i in 0..12 {
            single[(i, 0)] = 1.0 - single[(i, 1)];
        }
        let got = fhat(1, &z, &SoftLabelTable::analytic(single), false).unwrap();
        assert_eq!(got, z.row(4));

        let mut probs = Mat64::zeros(12, 2);
        for i in 0..12 {
            let p = rng.uniform();
            probs[(i, 0)] = p;
            probs[(i, 1)] = 1.0 - p;
        }
        let got = fhat(0, &z, &SoftLabelTable::analytic(probs.clone()), false).unwrap();
        let mut num = [0.0; 3];
        let mut den = 0.0;
        for i in 0..12 {
            den += probs[(i, 0)];
            for t in 0..3 {
                num[t] += probs[(i, 0)] * z[(i, t)];
            }
        }
        for t in 0..3 {
            assert!((got[t] - num[t] / den).abs() < 1e-12);
        }
        let zero = SoftLabelTable::analytic(Mat64::zeros(12, 2));
        assert!(matches!(fhat(0, &z, &zero, false), Err(Error::EmptySupport(_))));
    }

    #[test]
    fn projections_coincide_on_identical_members() {
        let z = Mat64::from_rows(&[
            vec![0.6, 0.8],
            vec![0.6, 0.8],
            vec![0.6, 0.8],
            vec![-1.0, 0.0],
            vec![-1.0, 0.0],
        ])
        .unwrap();
        let labels = [0, 0, 0, 1, 1];
        let mut onehot = Mat64::zeros(5, 2);
        for (i, &c) in labels.iter().enumerate() {
            onehot[(i, c)] = 1.0;
        }
        let t = SoftLabelTable::analytic(onehot);
        for c in 0..2 {
            let a = centroid(&z, &labels, c, false).unwrap();
            let b = median_projection(&z, &labels, c, false).unwrap();
            let f = fhat(c, &z, &t, false).unwrap();
            for k in 0..2 {
                assert!((a[k] - b[k]).abs() < 1e-15);
                assert!((a[k] - f[k]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bandwidth_schedule_anchor_and_rates() {
        assert!((bandwidth_schedule(256, 2).unwrap() - 0.6).abs() < 1e-15);
        assert!(bandwidth_schedule(1, 2).is_err());
        for n in [2usize, 3, 10, 256, 10_000] {
            for d in 1..5 {
                assert!(bandwidth_schedule(4 * n, d).unwrap() < bandwidth_schedule(n, d).unwrap());
            }
        }
        let rate = |n: usize| {
            let h = bandwidth_schedule(n, 2).unwrap();
            (n as f64).ln() / (h * h * n as f64)
        };
        assert!(rate(1 << 20) < rate(1 << 10) && rate(1 << 30) < rate(1 << 20));
    }

    #[test]
    fn spec_serde_names() {
        let spec = ProjectionSpec::new(ProjKind::NwSoft, ProjKind::Identity)
            .with_kernel(KernelConfig::new(0.4, Metric::Cos).unwrap());
        let json = serde_json::to_string(&spec).unwrap();
        assert!(json.contains(r#""positive":"nw_soft""#));
        assert!(json.contains(r#""metric":"cos""#));
        let back: ProjectionSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        let bad = ProjectionSpec::new(ProjKind::NwSoft, ProjKind::NwSoft);
        assert!(bad.validate().is_err());
    }
}
