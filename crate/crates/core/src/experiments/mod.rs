//! Experiment configurations and runners behind the `projnce-lab` commands.
//!
//! A resolved [`ExperimentConfig`] is written as `manifest.json` before any
//! result file; the manifest is itself a valid config, so re-running from it
//! reproduces the CSV outputs byte for byte.

pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::encoder::ProbeOptions;
use crate::error::{Error, Result};
use crate::losses::{adjustment_r, gradcheck, AnchorPolicy, EmbeddingBatch, GradCheck, LossConfig, LossKind, LossOptions, GRADCHECK_TOL};
use crate::miest::{softnce_consistency_curve, ConsistencyPoint, MiEstimate};
use crate::numerics::{mean_stderr, normalize_sphere, Mat64, RngState};
use crate::projections::{bandwidth_schedule, fhat, nw_soft_labels, KernelConfig, Metric, ProjKind, ProjectionSpec};
use crate::synthdata::{GmmSpec, DEFAULT_ORACLE_SAMPLES};
use crate::trainer::{train_with_checkpoints, GmmChoice, RunRecord, TrainConfig};

use svg::{Chart, Point, Series};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentName {
    MiBinary,
    MiMulticlass,
    BandwidthSweep,
    BoundCheck,
    SoftnceConsistency,
    NwConsistency,
    NoisyLabelProbe,
    Gradcheck,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 8] = [
        ExperimentName::MiBinary,
        ExperimentName::MiMulticlass,
        ExperimentName::BandwidthSweep,
        ExperimentName::BoundCheck,
        ExperimentName::SoftnceConsistency,
        ExperimentName::NwConsistency,
        ExperimentName::NoisyLabelProbe,
        ExperimentName::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentName::MiBinary => "mi-binary",
            ExperimentName::MiMulticlass => "mi-multiclass",
            ExperimentName::BandwidthSweep => "bandwidth-sweep",
            ExperimentName::BoundCheck => "bound-check",
            ExperimentName::SoftnceConsistency => "softnce-consistency",
            ExperimentName::NwConsistency => "nw-consistency",
            ExperimentName::NoisyLabelProbe => "noisy-label-probe",
            ExperimentName::Gradcheck => "gradcheck",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown experiment {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSection {
    pub name: ExperimentName,
    pub seeds: Vec<u64>,
    pub losses: Vec<LossKind>,
    pub noise_levels: Vec<f64>,
    pub bandwidths: Vec<f64>,
    pub metrics: Vec<Metric>,
    /// Batch sizes for the consistency studies.
    pub sizes: Vec<usize>,
    pub trials: usize,
    pub oracle_samples: usize,
    /// Batch shape used by `gradcheck`: rows, embedding dim, classes.
    pub gradcheck_shape: [usize; 3],
    pub code_version: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub arch: Vec<usize>,
    pub train_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub eval_every: usize,
    pub label_noise_p: f64,
    pub tau: f64,
    pub beta: f64,
    pub eval_samples: usize,
    pub bound_batches: usize,
    pub ksg_k: usize,
    pub anchor_policy: AnchorPolicy,
    pub probe: ProbeOptions,
}

/// Full experiment description; the JSON layout has the sections
/// `experiment`, `gmm`, `train`, `kernel` and `projection`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub gmm: GmmChoice,
    pub train: TrainSection,
    pub kernel: KernelConfig,
    pub projection: Option<ProjectionSpec>,
}

pub const DEFAULT_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
pub const MI_COMPARE_LOSSES: [LossKind; 4] = [LossKind::Supcon, LossKind::Projnce, LossKind::Softnce, LossKind::Softsupcon];

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

impl ExperimentConfig {
    pub fn defaults(name: ExperimentName) -> Self {
        let multiclass = name == ExperimentName::MiMulticlass;
        let t = if multiclass {
            TrainConfig::multiclass(LossKind::Supcon, 0)
        } else {
            TrainConfig::binary(LossKind::Supcon, 0)
        };
        let (losses, seeds): (Vec<LossKind>, Vec<u64>) = match name {
            ExperimentName::BandwidthSweep => (vec![LossKind::Softnce], DEFAULT_SEEDS.to_vec()),
            ExperimentName::NoisyLabelProbe => (vec![LossKind::Supcon, LossKind::Projnce], DEFAULT_SEEDS.to_vec()),
            ExperimentName::Gradcheck => (LossKind::TRAINABLE.to_vec(), (1..=20).collect()),
            ExperimentName::SoftnceConsistency | ExperimentName::NwConsistency => (Vec::new(), DEFAULT_SEEDS.to_vec()),
            _ => (MI_COMPARE_LOSSES.to_vec(), DEFAULT_SEEDS.to_vec()),
        };
        let sizes = match name {
            ExperimentName::SoftnceConsistency => vec![64, 256, 1024, 4096],
            ExperimentName::NwConsistency => vec![512, 2048, 8192],
            _ => Vec::new(),
        };
        Self {
            experiment: ExperimentSection {
                name,
                seeds,
                losses,
                noise_levels: if name == ExperimentName::NoisyLabelProbe { vec![0.0, 0.3] } else { Vec::new() },
                bandwidths: if name == ExperimentName::BandwidthSweep { vec![0.2, 0.4, 0.6, 0.8, 1.0] } else { Vec::new() },
                metrics: if name == ExperimentName::BandwidthSweep {
                    vec![Metric::L1, Metric::L2, Metric::Cos]
                } else {
                    Vec::new()
                },
                sizes,
                trials: 20,
                oracle_samples: DEFAULT_ORACLE_SAMPLES,
                gradcheck_shape: [8, 4, 3],
                code_version: env!("CARGO_PKG_VERSION").into(),
            },
            gmm: t.gmm.clone(),
            train: TrainSection {
                arch: t.arch.clone(),
                train_samples: t.train_samples,
                batch_size: t.batch_size,
                epochs: t.epochs,
                lr: t.lr,
                weight_decay: t.weight_decay,
                eval_every: t.eval_every,
                label_noise_p: t.label_noise_p,
                tau: t.tau,
                beta: t.loss.beta,
                eval_samples: t.eval_samples,
                bound_batches: t.bound_batches,
                ksg_k: t.ksg_k,
                anchor_policy: t.loss.anchor_policy,
                probe: t.probe,
            },
            kernel: t.loss.kernel,
            projection: None,
        }
    }

    /// Defaults for the named experiment overlaid with a (possibly partial)
    /// JSON config.
    pub fn from_json(name: Option<ExperimentName>, text: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(text)?;
        let in_file = over
            .get("experiment")
            .and_then(|e| e.get("name"))
            .and_then(Value::as_str)
            .map(ExperimentName::parse)
            .transpose()?;
        let name = match (name, in_file) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!("command {} but config is for {}", a.name(), b.name())))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("config names no experiment".into())),
        };
        let mut base = serde_json::to_value(Self::defaults(name))?;
        merge(&mut base, over);
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        let needs_losses = !matches!(e.name, ExperimentName::SoftnceConsistency | ExperimentName::NwConsistency);
        if needs_losses && e.losses.is_empty() {
            return Err(Error::Config("loss list is empty".into()));
        }
        if matches!(e.name, ExperimentName::SoftnceConsistency | ExperimentName::NwConsistency) && e.sizes.is_empty() {
            return Err(Error::Config("size list is empty".into()));
        }
        self.kernel.validate()?;
        if needs_losses && e.name != ExperimentName::Gradcheck {
            for &loss in &e.losses {
                self.train_config(loss, e.seeds[0])?.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn loss_config(&self, loss: LossKind) -> LossConfig {
        let mut l = LossConfig::new(loss);
        l.beta = self.train.beta;
        l.kernel = self.kernel;
        l.projection = self.projection;
        l.anchor_policy = self.train.anchor_policy;
        l
    }

    pub fn train_config(&self, loss: LossKind, seed: u64) -> Result<TrainConfig> {
        let t = &self.train;
        Ok(TrainConfig {
            loss: self.loss_config(loss),
            gmm: self.gmm.clone(),
            arch: t.arch.clone(),
            train_samples: t.train_samples,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lr: t.lr,
            weight_decay: t.weight_decay,
            seed,
            eval_every: t.eval_every,
            label_noise_p: t.label_noise_p,
            tau: t.tau,
            eval_samples: t.eval_samples,
            bound_batches: t.bound_batches,
            ksg_k: t.ksg_k,
            probe: t.probe,
        })
    }
}

/// Maps `f` over `items` on at most `jobs` threads, keeping input order.
pub fn par_map<T, R, F>(items: &[T], jobs: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    if jobs <= 1 {
        return items.iter().map(&f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| items.par_iter().map(&f).collect())
}

fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<S>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r.iter().map(AsRef::as_ref))?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains every `(loss, seed)` pair; results are ordered by loss (config
/// order), then seed.
pub fn mi_compare(cfg: &ExperimentConfig, jobs: usize, checkpoints: Option<&Path>) -> Result<Vec<RunRecord>> {
    let mut grid = Vec::new();
    for &loss in &cfg.experiment.losses {
        for &seed in &cfg.experiment.seeds {
            grid.push(cfg.train_config(loss, seed)?);
        }
    }
    par_map(&grid, jobs, |t| train_with_checkpoints(t, checkpoints))
}

fn curves_rows(records: &[RunRecord]) -> Vec<Vec<String>> {
    let mut rows = Vec::new();
    for r in records {
        for e in &r.rows {
            rows.push(vec![
                r.config.loss.loss.name().to_string(),
                r.config.seed.to_string(),
                e.epoch.to_string(),
                e.loss.to_string(),
                e.alignment.to_string(),
                e.uniformity.to_string(),
                e.adjustment.to_string(),
                opt(e.mi),
                opt(e.bound),
                opt(e.probe_acc),
            ]);
        }
    }
    rows
}

/// Seed mean ± stderr of the MI curve of each loss.
pub fn mi_curve_chart(records: &[RunRecord], title: &str) -> Chart {
    let mut series = Vec::new();
    let mut losses: Vec<LossKind> = Vec::new();
    for r in records {
        if !losses.contains(&r.config.loss.loss) {
            losses.push(r.config.loss.loss);
        }
    }
    for loss in losses {
        let runs: Vec<&RunRecord> = records.iter().filter(|r| r.config.loss.loss == loss).collect();
        let epochs: Vec<usize> = std::iter::once(0)
            .chain(runs[0].evals.iter().map(|e| e.epoch))
            .collect();
        let points = epochs
            .iter()
            .enumerate()
            .map(|(k, &epoch)| {
                let vals: Vec<f64> = runs
                    .iter()
                    .map(|r| if k == 0 { r.initial.mi.value } else { r.evals[k - 1].mi.value })
                    .collect();
                let (m, se) = mean_stderr(&vals);
                Point {
                    x: epoch as f64,
                    y: m,
                    band: Some(if se.is_finite() { se } else { 0.0 }),
                }
            })
            .collect();
        series.push(Series {
            label: loss.name().into(),
            points,
        });
    }
    Chart {
        title: title.into(),
        x_label: "epoch".into(),
        y_label: "I(f(X); C) [nats]".into(),
        log_x: false,
        series,
    }
}

/// Seed mean and stderr of the final MI for each loss, in config order.
pub fn final_mi_summary(records: &[RunRecord]) -> Vec<(LossKind, f64, f64)> {
    let mut out: Vec<(LossKind, Vec<f64>)> = Vec::new();
    for r in records {
        let v = r.final_eval().mi.value;
        match out.iter_mut().find(|(l, _)| *l == r.config.loss.loss) {
            Some((_, vs)) => vs.push(v),
            None => out.push((r.config.loss.loss, vec![v])),
        }
    }
    out.into_iter()
        .map(|(l, vs)| {
            let (m, se) = mean_stderr(&vs);
            (l, m, if se.is_finite() { se } else { 0.0 })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundRow {
    pub loss: String,
    pub seed: u64,
    pub epoch: usize,
    /// `prop1`, `cor1`, `softnce`, `supcon_raw` or `r_sanity`.
    pub kind: String,
    pub bound: f64,
    pub bound_stderr: f64,
    pub ksg_mi: f64,
    pub oracle_mi: f64,
    pub oracle_stderr: f64,
    /// Whether the row is a certified lower bound.
    pub certified: bool,
    pub pass: bool,
}

/// One row per bound per evaluated checkpoint, judged against the oracle
/// with a 3-sigma allowance; a leading row checks `R = 1` for equal
/// projections.
pub fn bound_rows(records: &[RunRecord], oracle: &MiEstimate) -> Result<Vec<BoundRow>> {
    let oracle_se = oracle.stderr.unwrap_or(0.0);
    let mut rows = Vec::new();
    if let Some(first) = records.first() {
        let spec = first.config.gmm.build()?;
        let mut rng = RngState::new(first.config.seed).fork_named("r-sanity");
        let data = spec.sample(first.config.batch_size, &mut rng)?;
        let z = crate::encoder::embed(&first.final_params, &data.features)?;
        let batch = EmbeddingBatch::new(z, data.labels, data.num_classes, first.config.tau)?;
        let opts = LossOptions {
            anchor_policy: AnchorPolicy::Skip,
            ..LossOptions::default()
        };
        let r = adjustment_r(&batch, &ProjectionSpec::new(ProjKind::Centroid, ProjKind::Centroid), &opts)?;
        rows.push(BoundRow {
            loss: "sanity".into(),
            seed: first.config.seed,
            epoch: first.config.epochs,
            kind: "r_sanity".into(),
            bound: r,
            bound_stderr: 0.0,
            ksg_mi: f64::NAN,
            oracle_mi: oracle.value,
            oracle_stderr: oracle_se,
            certified: false,
            pass: r == 1.0,
        });
    }
    for rec in records {
        let loss = rec.config.loss.loss;
        for e in std::iter::once(&rec.initial).chain(&rec.evals) {
            let mut push = |kind: &str, b: &MiEstimate, certified: bool| {
                let se = b.stderr.unwrap_or(0.0);
                let slack = 3.0 * (se * se + oracle_se * oracle_se).sqrt();
                rows.push(BoundRow {
                    loss: loss.name().into(),
                    seed: rec.config.seed,
                    epoch: e.epoch,
                    kind: kind.into(),
                    bound: b.value,
                    bound_stderr: se,
                    ksg_mi: e.mi.value,
                    oracle_mi: oracle.value,
                    oracle_stderr: oracle_se,
                    certified,
                    pass: b.value <= oracle.value + slack,
                });
            };
            if let Some(b) = &e.bound {
                let kind = match loss {
                    LossKind::Supcon => "cor1",
                    LossKind::Softnce => "softnce",
                    _ => "prop1",
                };
                push(kind, b, true);
            }
            if let Some(b) = &e.raw_bound {
                push("supcon_raw", b, false);
            }
        }
    }
    Ok(rows)
}

fn bound_csv_rows(rows: &[BoundRow]) -> Vec<Vec<String>> {
    rows.iter()
        .map(|r| {
            vec![
                r.loss.clone(),
                r.seed.to_string(),
                r.epoch.to_string(),
                r.kind.clone(),
                r.bound.to_string(),
                r.bound_stderr.to_string(),
                if r.ksg_mi.is_nan() { String::new() } else { r.ksg_mi.to_string() },
                r.oracle_mi.to_string(),
                r.oracle_stderr.to_string(),
                r.certified.to_string(),
                if r.pass { "PASS" } else { "FAIL" }.to_string(),
            ]
        })
        .collect()
}

/// Monte-Carlo `I(X;C)` of the configured mixture.
pub fn oracle_for(cfg: &ExperimentConfig) -> Result<MiEstimate> {
    let spec = cfg.gmm.build()?;
    spec.oracle_mi(cfg.experiment.oracle_samples, &mut RngState::new(0).fork_named("oracle"))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub metric: Metric,
    pub h: f64,
    pub seed: u64,
    pub probe_acc: f64,
    pub mi: f64,
    pub fallbacks: usize,
}

pub fn bandwidth_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<SweepRow>> {
    let loss = cfg.experiment.losses[0];
    let mut grid = Vec::new();
    for &metric in &cfg.experiment.metrics {
        for &h in &cfg.experiment.bandwidths {
            for &seed in &cfg.experiment.seeds {
                let mut t = cfg.train_config(loss, seed)?;
                t.loss.kernel = KernelConfig::new(h, metric)?;
                grid.push(t);
            }
        }
    }
    par_map(&grid, jobs, |t| {
        let r = train_with_checkpoints(t, None)?;
        let e = r.final_eval();
        Ok(SweepRow {
            metric: t.loss.kernel.metric,
            h: t.loss.kernel.h,
            seed: t.seed,
            probe_acc: e.probe_acc,
            mi: e.mi.value,
            fallbacks: r.fallbacks,
        })
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoisyRow {
    pub loss: LossKind,
    pub p: f64,
    pub seed: u64,
    pub accuracy: f64,
}

/// Trains on noisy labels; the probe is fit and scored on clean labels.
pub fn noisy_label_probe(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<NoisyRow>> {
    let mut grid = Vec::new();
    for &loss in &cfg.experiment.losses {
        for &p in &cfg.experiment.noise_levels {
            for &seed in &cfg.experiment.seeds {
                let mut t = cfg.train_config(loss, seed)?;
                t.label_noise_p = p;
                grid.push(t);
            }
        }
    }
    par_map(&grid, jobs, |t| {
        let r = train_with_checkpoints(t, None)?;
        Ok(NoisyRow {
            loss: t.loss.loss,
            p: t.label_noise_p,
            seed: t.seed,
            accuracy: r.final_eval().probe_acc,
        })
    })
}

pub fn gradcheck_matrix(cfg: &ExperimentConfig, jobs: usize) -> Result<Vec<GradCheck>> {
    let [n, d_z, m] = cfg.experiment.gradcheck_shape;
    let mut grid = Vec::new();
    for &loss in &cfg.experiment.losses {
        for &seed in &cfg.experiment.seeds {
            grid.push((loss, seed));
        }
    }
    par_map(&grid, jobs, |&(loss, seed)| {
        let mut l = cfg.loss_config(loss);
        l.anchor_policy = AnchorPolicy::Strict;
        gradcheck(&l, seed, n, d_z, m, cfg.train.tau)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NwRow {
    pub n: usize,
    pub seed: u64,
    pub h: f64,
    pub error: f64,
}

/// Fixed map `f(x) = normalize(W x)` into the 2-sphere with a Gaussian `W`.
pub fn fixed_map(input_dim: usize) -> Mat64 {
    let mut rng = RngState::new(0).fork_named("nw-map");
    Mat64::from_vec(2, input_dim, (0..2 * input_dim).map(|_| rng.normal()).collect()).expect("shape")
}

fn apply_map(w: &Mat64, x: &Mat64) -> Result<Mat64> {
    let mut z = Mat64::zeros(x.rows(), w.rows());
    for (i, row) in x.iter_rows().enumerate() {
        z.row_mut(i).copy_from_slice(&normalize_sphere(&w.matvec(row)?)?);
    }
    Ok(z)
}

/// `E[f(X) | C = c]` for every class, by Monte Carlo.
pub fn conditional_means(spec: &GmmSpec, w: &Mat64, n_mc: usize) -> Result<Vec<Vec<f64>>> {
    let mut rng = RngState::new(0).fork_named("nw-truth");
    let mut sums = vec![vec![0.0; w.rows()]; spec.num_classes];
    let mut counts = vec![0usize; spec.num_classes];
    let chunk = 50_000;
    let mut done = 0;
    while done < n_mc {
        let n = chunk.min(n_mc - done);
        let data = spec.sample(n, &mut rng)?;
        let z = apply_map(w, &data.features)?;
        for (row, &c) in z.iter_rows().zip(&data.labels) {
            counts[c] += 1;
            for (a, v) in sums[c].iter_mut().zip(row) {
                *a += v;
            }
        }
        done += n;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(s, k)| s.into_iter().map(|v| v / k.max(1) as f64).collect())
        .collect())
}

/// ℓ2 error between the batch NW estimate `f̂` and the conditional means,
/// with the bandwidth from [`bandwidth_schedule`], for every `(N, seed)`.
pub fn nw_consistency(cfg: &ExperimentConfig) -> Result<Vec<NwRow>> {
    let spec = cfg.gmm.build()?;
    let w = fixed_map(spec.ambient_dim);
    let truth = conditional_means(&spec, &w, cfg.experiment.oracle_samples)?;
    let mut rows = Vec::new();
    for &n in &cfg.experiment.sizes {
        let h = bandwidth_schedule(n, w.rows())?;
        let kernel = KernelConfig::new(h, cfg.kernel.metric)?;
        for &seed in &cfg.experiment.seeds {
            let mut rng = RngState::new(seed).fork(n as u64);
            let data = spec.sample(n, &mut rng)?;
            let z = apply_map(&w, &data.features)?;
            let soft = nw_soft_labels(&z, &z, &data.labels, spec.num_classes, &kernel)?;
            let mut sq = 0.0;
            for (c, t) in truth.iter().enumerate() {
                let est = fhat(c, &z, &soft, false)?;
                sq += est.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            }
            rows.push(NwRow {
                n,
                seed,
                h,
                error: sq.sqrt(),
            });
        }
    }
    Ok(rows)
}

/// Seed-mean error per batch size, in config order.
pub fn nw_mean_errors(rows: &[NwRow]) -> Vec<(usize, f64, f64)> {
    let mut sizes: Vec<usize> = Vec::new();
    for r in rows {
        if !sizes.contains(&r.n) {
            sizes.push(r.n);
        }
    }
    sizes
        .into_iter()
        .map(|n| {
            let v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.error).collect();
            let (m, se) = mean_stderr(&v);
            (n, m, if se.is_finite() { se } else { 0.0 })
        })
        .collect()
}

/// Optimal-critic SoftNCE gap per batch size against the oracle.
pub fn softnce_consistency(cfg: &ExperimentConfig) -> Result<(MiEstimate, Vec<ConsistencyPoint>)> {
    let spec = cfg.gmm.build()?;
    let oracle = oracle_for(cfg)?;
    let rng = RngState::new(cfg.experiment.seeds[0]).fork_named("softnce-consistency");
    let curve = softnce_consistency_curve(&spec, &cfg.experiment.sizes, cfg.experiment.trials, oracle.value, &rng)?;
    Ok((oracle, curve))
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
    /// Verdict for commands that check a criterion.
    pub pass: Option<bool>,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

/// Writes the manifest, runs the experiment, writes its CSV and SVG files.
pub fn run(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<Outcome> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    let manifest = out.join("manifest.json");
    write_text(&manifest, &cfg.to_json()?)?;
    let mut files = vec![manifest];
    let mut summary = Vec::new();
    let mut pass = None;
    let e = &cfg.experiment;
    match e.name {
        ExperimentName::MiBinary | ExperimentName::MiMulticlass => {
            let ck = out.join("checkpoints");
            fs::create_dir_all(&ck)?;
            let records = mi_compare(cfg, jobs, Some(&ck))?;
            let curves = out.join("curves.csv");
            write_csv(
                &curves,
                &["loss", "seed", "epoch", "loss_value", "alignment", "uniformity", "adjustment", "mi", "bound", "probe_acc"],
                curves_rows(&records),
            )?;
            let finals = out.join("final.csv");
            write_csv(
                &finals,
                &["loss", "seed", "mi_initial", "mi", "bound", "bound_stderr", "probe_acc", "checkpoint"],
                records.iter().map(|r| {
                    let f = r.final_eval();
                    vec![
                        r.config.loss.loss.name().to_string(),
                        r.config.seed.to_string(),
                        r.initial.mi.value.to_string(),
                        f.mi.value.to_string(),
                        opt(f.bound.as_ref().map(|b| b.value)),
                        opt(f.bound.as_ref().and_then(|b| b.stderr)),
                        f.probe_acc.to_string(),
                        r.final_checkpoint.clone(),
                    ]
                }),
            )?;
            let chart = out.join("mi_curves.svg");
            write_text(&chart, &mi_curve_chart(&records, &format!("{}: MI of embeddings", e.name.name())).render())?;
            for (l, m, se) in final_mi_summary(&records) {
                summary.push(format!("{:<11} final MI {m:.4} ± {se:.4} nats", l.name()));
            }
            files.extend([curves, finals, chart]);
        }
        ExperimentName::BoundCheck => {
            let records = mi_compare(cfg, jobs, None)?;
            let oracle = oracle_for(cfg)?;
            let rows = bound_rows(&records, &oracle)?;
            let path = out.join("bounds.csv");
            write_csv(
                &path,
                &["loss", "seed", "epoch", "kind", "bound", "bound_stderr", "ksg_mi", "oracle_mi", "oracle_stderr", "certified", "result"],
                bound_csv_rows(&rows),
            )?;
            let ok = rows.iter().filter(|r| r.certified || r.kind == "r_sanity").all(|r| r.pass);
            summary.push(format!(
                "oracle MI {:.4} ± {:.4}; {} certified rows, {} failing",
                oracle.value,
                oracle.stderr.unwrap_or(0.0),
                rows.iter().filter(|r| r.certified).count(),
                rows.iter().filter(|r| r.certified && !r.pass).count()
            ));
            pass = Some(ok);
            files.push(path);
        }
        ExperimentName::BandwidthSweep => {
            let rows = bandwidth_sweep(cfg, jobs)?;
            let path = out.join("sweep.csv");
            write_csv(
                &path,
                &["metric", "h", "seed", "probe_acc", "mi", "fallbacks"],
                rows.iter().map(|r| {
                    vec![
                        r.metric.name().to_string(),
                        r.h.to_string(),
                        r.seed.to_string(),
                        r.probe_acc.to_string(),
                        r.mi.to_string(),
                        r.fallbacks.to_string(),
                    ]
                }),
            )?;
            let series = e
                .metrics
                .iter()
                .map(|&m| Series {
                    label: m.name().into(),
                    points: e
                        .bandwidths
                        .iter()
                        .map(|&h| {
                            let v: Vec<f64> = rows.iter().filter(|r| r.metric == m && r.h == h).map(|r| r.probe_acc).collect();
                            let (mean, se) = mean_stderr(&v);
                            Point {
                                x: h,
                                y: mean,
                                band: Some(if se.is_finite() { se } else { 0.0 }),
                            }
                        })
                        .collect(),
                })
                .collect();
            let chart = out.join("bandwidth.svg");
            write_text(
                &chart,
                &Chart {
                    title: "SoftNCE probe accuracy by bandwidth".into(),
                    x_label: "h".into(),
                    y_label: "probe accuracy".into(),
                    log_x: false,
                    series,
                }
                .render(),
            )?;
            summary.push(format!(
                "recommended kernel: {} with h = {}",
                crate::projections::Metric::L1.name(),
                crate::projections::DEFAULT_BANDWIDTH
            ));
            files.extend([path, chart]);
        }
        ExperimentName::SoftnceConsistency => {
            let (oracle, curve) = softnce_consistency(cfg)?;
            let path = out.join("consistency.csv");
            write_csv(
                &path,
                &["n", "bound_mean", "gap", "gap_stderr", "oracle_mi"],
                curve.iter().map(|p| {
                    vec![
                        p.n.to_string(),
                        p.bound_mean.to_string(),
                        p.gap.to_string(),
                        p.gap_stderr.to_string(),
                        oracle.value.to_string(),
                    ]
                }),
            )?;
            let chart = out.join("consistency.svg");
            write_text(
                &chart,
                &Chart {
                    title: "Optimal-critic SoftNCE gap".into(),
                    x_label: "batch size N".into(),
                    y_label: "|log N − loss − I(X;C)| [nats]".into(),
                    log_x: true,
                    series: vec![Series {
                        label: "gap".into(),
                        points: curve
                            .iter()
                            .map(|p| Point {
                                x: p.n as f64,
                                y: p.gap,
                                band: Some(p.gap_stderr),
                            })
                            .collect(),
                    }],
                }
                .render(),
            )?;
            for p in &curve {
                summary.push(format!("N = {:>5}: gap {:.4} ± {:.4}", p.n, p.gap, p.gap_stderr));
            }
            files.extend([path, chart]);
        }
        ExperimentName::NwConsistency => {
            let rows = nw_consistency(cfg)?;
            let path = out.join("nw_consistency.csv");
            write_csv(
                &path,
                &["n", "seed", "h", "error"],
                rows.iter().map(|r| vec![r.n.to_string(), r.seed.to_string(), r.h.to_string(), r.error.to_string()]),
            )?;
            let means = nw_mean_errors(&rows);
            let chart = out.join("nw_consistency.svg");
            write_text(
                &chart,
                &Chart {
                    title: "NW class-mean estimate error".into(),
                    x_label: "batch size N".into(),
                    y_label: "ℓ2 error".into(),
                    log_x: true,
                    series: vec![Series {
                        label: "error".into(),
                        points: means.iter().map(|&(n, m, se)| Point { x: n as f64, y: m, band: Some(se) }).collect(),
                    }],
                }
                .render(),
            )?;
            for &(n, m, se) in &means {
                summary.push(format!("N = {n:>5}: error {m:.5} ± {se:.5}"));
            }
            if let (Some(first), Some(last)) = (means.first(), means.last()) {
                pass = Some(last.1 <= 0.5 * first.1 && rows.iter().all(|r| r.error > 0.0));
            }
            files.extend([path, chart]);
        }
        ExperimentName::NoisyLabelProbe => {
            let rows = noisy_label_probe(cfg, jobs)?;
            let path = out.join("noisy_probe.csv");
            write_csv(
                &path,
                &["loss", "p", "seed", "accuracy"],
                rows.iter().map(|r| vec![r.loss.name().to_string(), r.p.to_string(), r.seed.to_string(), r.accuracy.to_string()]),
            )?;
            let series = e
                .losses
                .iter()
                .map(|&l| Series {
                    label: l.name().into(),
                    points: e
                        .noise_levels
                        .iter()
                        .map(|&p| {
                            let v: Vec<f64> = rows.iter().filter(|r| r.loss == l && r.p == p).map(|r| r.accuracy).collect();
                            let (m, se) = mean_stderr(&v);
                            summary.push(format!("{:<11} p = {p}: accuracy {m:.4} ± {:.4}", l.name(), if se.is_finite() { se } else { 0.0 }));
                            Point {
                                x: p,
                                y: m,
                                band: Some(if se.is_finite() { se } else { 0.0 }),
                            }
                        })
                        .collect(),
                })
                .collect();
            let chart = out.join("noisy_probe.svg");
            write_text(
                &chart,
                &Chart {
                    title: "Probe accuracy under label noise".into(),
                    x_label: "label noise p".into(),
                    y_label: "clean-label probe accuracy".into(),
                    log_x: false,
                    series,
                }
                .render(),
            )?;
            files.extend([path, chart]);
        }
        ExperimentName::Gradcheck => {
            let checks = gradcheck_matrix(cfg, jobs)?;
            let path = out.join("gradcheck.csv");
            write_csv(
                &path,
                &["loss", "seed", "relative_error", "result"],
                checks.iter().map(|g| {
                    vec![
                        g.loss.name().to_string(),
                        g.seed.to_string(),
                        g.relative_error.to_string(),
                        if g.relative_error <= GRADCHECK_TOL { "PASS" } else { "FAIL" }.to_string(),
                    ]
                }),
            )?;
            for &l in &e.losses {
                let worst = checks.iter().filter(|g| g.loss == l).map(|g| g.relative_error).fold(0.0, f64::max);
                summary.push(format!("{:<11} worst relative error {worst:.3e}", l.name()));
            }
            pass = Some(checks.iter().all(|g| g.relative_error <= GRADCHECK_TOL));
            files.push(path);
        }
    }
    Ok(Outcome { files, summary, pass })
}
