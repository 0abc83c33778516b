//! Training loop: GMM data → encoder → contrastive loss → AdamW, with
//! periodic evaluation (Mixed KSG, bounds, linear probe) and checkpoints.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{self, AdamWState, MlpParams, ProbeOptions};
use crate::error::{Error, Result};
use crate::losses::{
    adjustment_r, evaluate_loss, AnchorPolicy, EmbeddingBatch, LossConfig, LossKind, DEFAULT_TEMPERATURE,
};
use crate::miest::{bound_prop1, bound_softnce, mixed_ksg, BoundTerms, KsgOptions, MiEstimate, DEFAULT_KSG_K};
use crate::numerics::{norm2, RngState};
use crate::synthdata::{binary_gmm_spec, multiclass_gmm_spec, GmmSpec, LabeledDataset};

pub const DEFAULT_EVAL_SAMPLES: usize = 10_000;
pub const DEFAULT_BOUND_BATCHES: usize = 20;
pub const DEFAULT_EVAL_EVERY: usize = 20;

/// Which mixture the run draws from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GmmChoice {
    Binary { ambient_dim: usize, sigma: f64 },
    /// The 32-component mixture; its random geometry is drawn from `spec_seed`.
    Multiclass { spec_seed: u64 },
    Custom { spec: GmmSpec },
}

impl GmmChoice {
    pub fn build(&self) -> Result<GmmSpec> {
        match self {
            GmmChoice::Binary { ambient_dim, sigma } => binary_gmm_spec(*ambient_dim, *sigma),
            GmmChoice::Multiclass { spec_seed } => {
                Ok(multiclass_gmm_spec(&mut RngState::new(*spec_seed).fork_named("gmm-spec")))
            }
            GmmChoice::Custom { spec } => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub gmm: GmmChoice,
    pub arch: Vec<usize>,
    pub train_samples: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub label_noise_p: f64,
    pub tau: f64,
    pub eval_samples: usize,
    pub bound_batches: usize,
    pub ksg_k: usize,
    pub probe: ProbeOptions,
}

impl TrainConfig {
    /// Binary mixture, `d_x = 5`, `σ = 1`, MLP 5-16-16-2, batch 256.
    pub fn binary(loss: LossKind, seed: u64) -> Self {
        let mut loss = LossConfig::new(loss);
        loss.anchor_policy = AnchorPolicy::Skip;
        Self {
            loss,
            gmm: GmmChoice::Binary {
                ambient_dim: 5,
                sigma: 1.0,
            },
            arch: vec![5, 16, 16, 2],
            train_samples: 12_800,
            batch_size: 256,
            epochs: 200,
            lr: 1e-2,
            weight_decay: 1e-4,
            seed,
            eval_every: DEFAULT_EVAL_EVERY,
            label_noise_p: 0.0,
            tau: DEFAULT_TEMPERATURE,
            eval_samples: DEFAULT_EVAL_SAMPLES,
            bound_batches: DEFAULT_BOUND_BATCHES,
            ksg_k: DEFAULT_KSG_K,
            probe: ProbeOptions::default(),
        }
    }

    /// 32-class mixture, 12,800 samples, MLP 8-32-32-4, batch 128.
    pub fn multiclass(loss: LossKind, seed: u64) -> Self {
        Self {
            gmm: GmmChoice::Multiclass { spec_seed: 0 },
            arch: vec![8, 32, 32, 4],
            batch_size: 128,
            ..Self::binary(loss, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size {} below 2", self.batch_size)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.label_noise_p) {
            return Err(Error::Config(format!("label_noise_p {} outside [0, 1]", self.label_noise_p)));
        }
        if !(self.lr >= 0.0 && self.weight_decay >= 0.0 && self.tau > 0.0) {
            return Err(Error::Config("lr, weight_decay must be ≥ 0 and tau > 0".into()));
        }
        if self.eval_every == 0 || self.bound_batches == 0 || self.ksg_k == 0 {
            return Err(Error::Config("eval_every, bound_batches and ksg_k must be positive".into()));
        }
        if self.train_samples < self.batch_size {
            return Err(Error::Config("train_samples smaller than one batch".into()));
        }
        if self.eval_samples <= self.ksg_k + 1 || self.eval_samples < self.batch_size {
            return Err(Error::Config("eval_samples too small".into()));
        }
        let spec = self.gmm.build()?;
        if self.arch.len() < 2 || self.arch[0] != spec.ambient_dim {
            return Err(Error::Config(format!(
                "architecture {:?} does not take {}-dimensional inputs",
                self.arch, spec.ambient_dim
            )));
        }
        if self.loss.loss != LossKind::CeProbeOnly {
            self.loss.resolved()?.0.validate()?;
        }
        Ok(())
    }

    pub fn checkpoint_id(&self, epoch: usize) -> String {
        format!("{}-seed{}-epoch{:04}", self.loss.loss.name(), self.seed, epoch)
    }
}

/// Metrics of one encoder on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub epoch: usize,
    pub mi: MiEstimate,
    /// The certified bound for this loss: the adjusted form for losses with
    /// an `R` term (SupCon included), `log N − loss` for SoftNCE.
    pub bound: Option<MiEstimate>,
    /// SupCon only: `log D − loss` without the adjustment.
    pub raw_bound: Option<MiEstimate>,
    pub probe_acc: f64,
    pub fallbacks: usize,
    pub max_norm_deviation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub alignment: f64,
    pub uniformity: f64,
    pub adjustment: f64,
    pub beta: f64,
    pub mi: Option<f64>,
    pub bound: Option<f64>,
    pub probe_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub rows: Vec<EpochRow>,
    /// Evaluation of the initial encoder.
    pub initial: EvalMetrics,
    pub evals: Vec<EvalMetrics>,
    pub final_checkpoint: String,
    pub final_params: MlpParams,
    pub skipped_anchors: usize,
    pub fallbacks: usize,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunRecord {
    pub fn final_eval(&self) -> &EvalMetrics {
        self.evals.last().unwrap_or(&self.initial)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["epoch", "loss", "alignment", "uniformity", "adjustment", "mi", "bound", "probe_acc"])?;
        for r in &self.rows {
            out.write_record([
                r.epoch.to_string(),
                r.loss.to_string(),
                r.alignment.to_string(),
                r.uniformity.to_string(),
                r.adjustment.to_string(),
                opt(r.mi),
                opt(r.bound),
                opt(r.probe_acc),
            ])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(buf)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest<'a> {
    pub config: &'a TrainConfig,
    pub seed: u64,
    pub code_version: &'static str,
}

pub fn write_manifest<W: Write>(cfg: &TrainConfig, w: W) -> Result<()> {
    serde_json::to_writer_pretty(
        w,
        &RunManifest {
            config: cfg,
            seed: cfg.seed,
            code_version: env!("CARGO_PKG_VERSION"),
        },
    )?;
    Ok(())
}

/// Scores `params` on `data` (labels taken as given). Pure: two calls with
/// the same inputs return identical metrics.
pub fn evaluate(params: &MlpParams, data: &LabeledDataset, cfg: &TrainConfig) -> Result<EvalMetrics> {
    if params.sizes() != cfg.arch.as_slice() || params.input_dim() != data.dim() {
        return Err(Error::Config(format!(
            "checkpoint {:?} does not match architecture {:?} on {}-dimensional data",
            params.sizes(),
            cfg.arch,
            data.dim()
        )));
    }
    let z = encoder::embed(params, &data.features)?;
    let max_norm_deviation = z
        .iter_rows()
        .map(|r| (norm2(r) - 1.0).abs())
        .fold(0.0, f64::max);
    let mi = mixed_ksg(
        &z,
        &data.labels,
        KsgOptions {
            k: cfg.ksg_k,
            ..KsgOptions::default()
        },
    )?;
    let probe_rng = &mut RngState::new(cfg.seed).fork_named("probe");
    let probe_acc = encoder::linear_probe(&z, &data.labels, data.num_classes, &cfg.probe, probe_rng)?.accuracy;

    let (mut bound, mut raw_bound, mut fallbacks) = (None, None, 0);
    if cfg.loss.loss != LossKind::CeProbeOnly {
        let (spec, opts, _) = cfg.loss.resolved()?;
        let b = cfg.batch_size;
        let count = cfg.bound_batches.min(data.len() / b).max(1);
        let mut terms = Vec::with_capacity(count);
        let mut raw = Vec::with_capacity(count);
        for k in 0..count {
            let idx: Vec<usize> = (k * b..((k + 1) * b).min(data.len())).collect();
            let batch = EmbeddingBatch::new(
                z.select_rows(&idx),
                idx.iter().map(|&i| data.labels[i]).collect(),
                data.num_classes,
                cfg.tau,
            )?;
            let br = evaluate_loss(&batch, &cfg.loss)?;
            fallbacks += br.fallbacks;
            let selfp_loss = br.alignment + br.uniformity;
            let r = if cfg.loss.loss.has_adjustment() {
                br.adjustment
            } else {
                adjustment_r(&batch, &spec, &opts)?
            };
            terms.push(BoundTerms {
                loss: selfp_loss,
                adjustment: r,
                denominator_terms: br.denominator_terms,
            });
            raw.push(BoundTerms {
                loss: selfp_loss,
                adjustment: 0.0,
                denominator_terms: br.denominator_terms,
            });
        }
        bound = Some(if cfg.loss.loss == LossKind::Softnce {
            bound_softnce(&terms)?
        } else {
            bound_prop1(&terms)?
        });
        if cfg.loss.loss == LossKind::Supcon {
            raw_bound = Some(bound_softnce(&raw)?);
        }
    }
    Ok(EvalMetrics {
        epoch: 0,
        mi,
        bound,
        raw_bound,
        probe_acc,
        fallbacks,
        max_norm_deviation,
    })
}

/// Loads a checkpoint and evaluates it.
pub fn evaluate_checkpoint(path: &Path, data: &LabeledDataset, cfg: &TrainConfig) -> Result<EvalMetrics> {
    evaluate(&MlpParams::load(path)?, data, cfg)
}

pub fn train(cfg: &TrainConfig) -> Result<RunRecord> {
    train_with_checkpoints(cfg, None)
}

/// As [`train`], also writing `<id>.pjnw` into `dir` at every evaluation.
pub fn train_with_checkpoints(cfg: &TrainConfig, dir: Option<&Path>) -> Result<RunRecord> {
    cfg.validate()?;
    let spec = cfg.gmm.build()?;
    let root = RngState::new(cfg.seed);
    let mut data = spec.sample(cfg.train_samples, &mut root.fork_named("train-data"))?;
    if cfg.label_noise_p > 0.0 {
        data = data.apply_label_noise(cfg.label_noise_p, &mut root.fork_named("label-noise"))?;
    }
    let mut params = MlpParams::he_uniform(&cfg.arch, &mut root.fork_named("init"))?;
    let mut adam = AdamWState::new(params.num_params(), cfg.lr, cfg.weight_decay);
    let mut eval_rng = root.fork_named("eval");
    let mut shuffle_rng = root.fork_named("shuffle");

    let mut eval_at = |params: &MlpParams, epoch: usize| -> Result<EvalMetrics> {
        let fresh = spec.sample(cfg.eval_samples, &mut eval_rng)?;
        let mut m = evaluate(params, &fresh, cfg)?;
        m.epoch = epoch;
        Ok(m)
    };
    let initial = eval_at(&params, 0)?;

    let beta = if cfg.loss.loss.has_adjustment() { cfg.loss.beta } else { 0.0 };
    let mut rows = Vec::with_capacity(cfg.epochs);
    let mut evals = Vec::new();
    let (mut skipped_anchors, mut fallbacks) = (0, 0);
    let abort = |epoch, batch, e: Error| Error::Training {
        epoch,
        batch,
        reason: e.to_string(),
    };

    for epoch in 1..=cfg.epochs {
        let perm = shuffle_rng.permutation(data.len());
        let mut sums = [0.0; 4];
        let mut batches = 0usize;
        if cfg.loss.loss != LossKind::CeProbeOnly {
            for (bi, idx) in perm.chunks(cfg.batch_size).enumerate() {
                if idx.len() < 2 {
                    continue;
                }
                let x = data.features.select_rows(idx);
                let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
                let tape = encoder::forward(&params, &x).map_err(|e| abort(epoch, bi, e))?;
                let batch = EmbeddingBatch::new(tape.z.clone(), labels, data.num_classes, cfg.tau)
                    .map_err(|e| abort(epoch, bi, e))?;
                let br = evaluate_loss(&batch, &cfg.loss).map_err(|e| abort(epoch, bi, e))?;
                if !br.total.is_finite() {
                    return Err(abort(epoch, bi, Error::Domain(format!("loss {}", br.total))));
                }
                skipped_anchors += idx.len() - br.anchors;
                fallbacks += br.fallbacks;
                sums[0] += br.total;
                sums[1] += br.alignment;
                sums[2] += br.uniformity;
                sums[3] += br.adjustment;
                batches += 1;
                let grads = encoder::backward(&params, &tape, &br.d_loss_d_z).map_err(|e| abort(epoch, bi, e))?;
                encoder::adamw_step(params.as_mut_slice(), grads.as_slice(), &mut adam)
                    .map_err(|e| abort(epoch, bi, e))?;
            }
        }
        let mean = |s: f64| if batches == 0 { 0.0 } else { s / batches as f64 };
        let mut row = EpochRow {
            epoch,
            loss: mean(sums[0]),
            alignment: mean(sums[1]),
            uniformity: mean(sums[2]),
            adjustment: mean(sums[3]),
            beta,
            mi: None,
            bound: None,
            probe_acc: None,
        };
        if epoch % cfg.eval_every == 0 || epoch == cfg.epochs {
            let m = eval_at(&params, epoch)?;
            row.mi = Some(m.mi.value);
            row.bound = m.bound.as_ref().map(|b| b.value);
            row.probe_acc = Some(m.probe_acc);
            evals.push(m);
            if let Some(dir) = dir {
                params.save(&dir.join(format!("{}.pjnw", cfg.checkpoint_id(epoch))))?;
            }
        }
        rows.push(row);
    }
    Ok(RunRecord {
        config: cfg.clone(),
        rows,
        initial,
        evals,
        final_checkpoint: cfg.checkpoint_id(cfg.epochs),
        final_params: params,
        skipped_anchors,
        fallbacks,
    })
}
