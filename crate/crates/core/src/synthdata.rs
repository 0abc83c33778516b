//! Gaussian-mixture classification tasks: specification, sampling, exact
//! class posteriors, label corruption and a Monte-Carlo mutual-information
//! oracle.
//!
//! Components live in a latent space and are pushed to the ambient feature
//! space by a linear map. The binary task uses the identity map; the 32-class
//! task uses a random 8×4 Gaussian matrix.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::miest::{MiEstimate, MiMethod};
use crate::numerics::{cholesky, forward_substitute, log_sum_exp, Mat64, RngState};

/// Diagonal jitter applied when a pushed-forward covariance fails to factor.
pub const COVARIANCE_JITTER: f64 = 1e-9;
pub const DEFAULT_ORACLE_SAMPLES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub num_classes: usize,
    pub latent_dim: usize,
    pub ambient_dim: usize,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Mat64>,
    pub priors: Vec<f64>,
    /// `ambient_dim × latent_dim`.
    pub projection: Mat64,
}

/// Two isotropic components at `±1` with a fair-coin prior. Class 1 is the
/// component at `+1`.
pub fn binary_gmm_spec(ambient_dim: usize, sigma: f64) -> Result<GmmSpec> {
    if ambient_dim == 0 {
        return Err(Error::Domain("ambient dimension must be positive".into()));
    }
    if !(sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let mut cov = Mat64::identity(ambient_dim);
    for v in cov.as_mut_slice() {
        *v *= sigma * sigma;
    }
    let spec = GmmSpec {
        num_classes: 2,
        latent_dim: ambient_dim,
        ambient_dim,
        means: vec![vec![-1.0; ambient_dim], vec![1.0; ambient_dim]],
        covariances: vec![cov.clone(), cov],
        priors: vec![0.5, 0.5],
        projection: Mat64::identity(ambient_dim),
    };
    spec.validate()?;
    Ok(spec)
}

pub const MULTICLASS_COMPONENTS: usize = 32;
pub const MULTICLASS_LATENT_DIM: usize = 4;
pub const MULTICLASS_AMBIENT_DIM: usize = 8;
/// Standard deviation of each latent mean coordinate.
pub const MULTICLASS_MEAN_SCALE: f64 = 3.0;
/// Ridge added to `AAᵀ` when drawing component covariances.
pub const MULTICLASS_COV_RIDGE: f64 = 0.1;

/// 32 equiprobable components in ℝ⁴ pushed to ℝ⁸ by a Gaussian random matrix.
///
/// Means have i.i.d. `N(0, 9)` coordinates; covariances are `AAᵀ + 0.1·I`
/// with standard-normal `A`.
pub fn multiclass_gmm_spec(rng: &mut RngState) -> GmmSpec {
    let m = MULTICLASS_COMPONENTS;
    let k = MULTICLASS_LATENT_DIM;
    let d = MULTICLASS_AMBIENT_DIM;
    let means = (0..m)
        .map(|_| (0..k).map(|_| MULTICLASS_MEAN_SCALE * rng.normal()).collect())
        .collect();
    let covariances = (0..m)
        .map(|_| {
            let a = Mat64::from_vec(k, k, (0..k * k).map(|_| rng.normal()).collect())
                .expect("square draw");
            let mut cov = a.matmul(&a.transpose()).expect("square product");
            for i in 0..k {
                cov[(i, i)] += MULTICLASS_COV_RIDGE;
            }
            cov
        })
        .collect();
    let projection =
        Mat64::from_vec(d, k, (0..d * k).map(|_| rng.normal()).collect()).expect("projection draw");
    GmmSpec {
        num_classes: m,
        latent_dim: k,
        ambient_dim: d,
        means,
        covariances,
        priors: vec![1.0 / m as f64; m],
        projection,
    }
}

impl GmmSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.num_classes;
        if m == 0 || self.latent_dim == 0 || self.ambient_dim == 0 {
            return Err(Error::Config("GMM dimensions must be positive".into()));
        }
        if self.means.len() != m || self.covariances.len() != m || self.priors.len() != m {
            return Err(Error::Dimension {
                expected: m,
                got: self.means.len().min(self.covariances.len()).min(self.priors.len()),
            });
        }
        let total: f64 = self.priors.iter().sum();
        if (total - 1.0).abs() > 1e-12 || self.priors.iter().any(|p| *p < 0.0) {
            return Err(Error::Config(format!("priors must sum to 1, got {total}")));
        }
        if self.projection.rows() != self.ambient_dim || self.projection.cols() != self.latent_dim {
            return Err(Error::Dimension {
                expected: self.ambient_dim * self.latent_dim,
                got: self.projection.rows() * self.projection.cols(),
            });
        }
        for (mean, cov) in self.means.iter().zip(&self.covariances) {
            if mean.len() != self.latent_dim {
                return Err(Error::Dimension {
                    expected: self.latent_dim,
                    got: mean.len(),
                });
            }
            for i in 0..cov.rows() {
                for j in 0..i {
                    if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * (1.0 + cov[(i, j)].abs()) {
                        return Err(Error::Config("covariance is not symmetric".into()));
                    }
                }
            }
            cholesky(cov)?;
        }
        Ok(())
    }

    /// Draws `n` labelled points. Latent `z ~ N(μ_c, K_c)`, features `P z`.
    pub fn sample(&self, n: usize, rng: &mut RngState) -> Result<LabeledDataset> {
        if n == 0 {
            return Err(Error::Domain("sample size must be at least 1".into()));
        }
        let factors = self
            .covariances
            .iter()
            .map(cholesky)
            .collect::<Result<Vec<_>>>()?;
        let identity = self.projection_is_identity();
        let mut features = Mat64::zeros(n, self.ambient_dim);
        let mut labels = Vec::with_capacity(n);
        let mut eps = vec![0.0; self.latent_dim];
        let mut latent = vec![0.0; self.latent_dim];
        for row in 0..n {
            let c = rng.categorical(&self.priors);
            labels.push(c);
            for e in eps.iter_mut() {
                *e = rng.normal();
            }
            let l = &factors[c];
            for i in 0..self.latent_dim {
                let mut v = self.means[c][i];
                for k in 0..=i {
                    v += l[(i, k)] * eps[k];
                }
                latent[i] = v;
            }
            if identity {
                features.row_mut(row).copy_from_slice(&latent);
            } else {
                let x = self.projection.matvec(&latent)?;
                features.row_mut(row).copy_from_slice(&x);
            }
        }
        Ok(LabeledDataset {
            num_classes: self.num_classes,
            features,
            true_labels: labels.clone(),
            labels,
            noise_prob: 0.0,
        })
    }

    fn projection_is_identity(&self) -> bool {
        self.latent_dim == self.ambient_dim && self.projection == Mat64::identity(self.ambient_dim)
    }

    /// Precomputes the per-class Gaussian factors used by
    /// [`PosteriorModel::posterior`].
    pub fn posterior_model(&self) -> Result<PosteriorModel> {
        self.validate()?;
        PosteriorModel::new(self)
    }

    pub fn analytic_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.posterior_model()?.posterior(x)
    }

    /// Monte-Carlo estimate of I(X;C) = E[log p(c|x) − log π_c].
    pub fn oracle_mi(&self, n_mc: usize, rng: &mut RngState) -> Result<MiEstimate> {
        if n_mc < 1000 {
            return Err(Error::Domain(format!("oracle needs n_mc >= 1000, got {n_mc}")));
        }
        let model = self.posterior_model()?;
        // chunked so memory stays bounded for n_mc = 10⁶
        let chunk = 50_000;
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut done = 0;
        while done < n_mc {
            let n = chunk.min(n_mc - done);
            let data = self.sample(n, rng)?;
            for (x, &c) in data.features.iter_rows().zip(&data.labels) {
                let logp = model.log_posterior(x)?;
                let term = logp[c] - self.priors[c].ln();
                sum += term;
                sum_sq += term * term;
            }
            done += n;
        }
        let n = n_mc as f64;
        let mean = sum / n;
        let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
        Ok(MiEstimate {
            value: mean,
            method: MiMethod::OracleMc,
            k: None,
            n: n_mc,
            stderr: Some((var / n).sqrt()),
        })
    }
}

#[derive(Debug, Clone)]
enum Evaluation {
    /// Full-rank map: densities of `N(Pμ, PKPᵀ)` in feature space.
    Ambient,
    /// Tall map: features are pulled back to latent coordinates by least
    /// squares, where the class densities are full rank.
    Latent { pinv: Mat64 },
}

/// Per-class Gaussian log-density factors for exact posteriors.
#[derive(Debug, Clone)]
pub struct PosteriorModel {
    log_priors: Vec<f64>,
    centers: Vec<Vec<f64>>,
    factors: Vec<Mat64>,
    half_log_dets: Vec<f64>,
    eval: Evaluation,
    ambient_dim: usize,
}

impl PosteriorModel {
    fn new(spec: &GmmSpec) -> Result<Self> {
        let p = &spec.projection;
        let square = spec.latent_dim == spec.ambient_dim;
        let mut centers = Vec::with_capacity(spec.num_classes);
        let mut factors = Vec::with_capacity(spec.num_classes);
        let mut half_log_dets = Vec::with_capacity(spec.num_classes);
        for (mean, cov) in spec.means.iter().zip(&spec.covariances) {
            let (center, mut sigma) = if square {
                let center = p.matvec(mean)?;
                let sigma = p.matmul(cov)?.matmul(&p.transpose())?;
                (center, sigma)
            } else {
                (mean.clone(), cov.clone())
            };
            let l = match cholesky(&sigma) {
                Ok(l) => l,
                Err(_) => {
                    for i in 0..sigma.rows() {
                        sigma[(i, i)] += COVARIANCE_JITTER;
                    }
                    cholesky(&sigma)?
                }
            };
            half_log_dets.push((0..l.rows()).map(|i| l[(i, i)].ln()).sum());
            centers.push(center);
            factors.push(l);
        }
        let eval = if square {
            Evaluation::Ambient
        } else {
            // (PᵀP)⁻¹Pᵀ via Cholesky of the Gram matrix
            let gram = p.transpose().matmul(p)?;
            let l = cholesky(&gram)?;
            let k = spec.latent_dim;
            let mut inv = Mat64::zeros(k, k);
            for col in 0..k {
                let mut e = vec![0.0; k];
                e[col] = 1.0;
                let y = forward_substitute(&l, &e);
                let x = backward_substitute_transpose(&l, &y);
                for row in 0..k {
                    inv[(row, col)] = x[row];
                }
            }
            Evaluation::Latent {
                pinv: inv.matmul(&p.transpose())?,
            }
        };
        Ok(Self {
            log_priors: spec.priors.iter().map(|p| p.ln()).collect(),
            centers,
            factors,
            half_log_dets,
            eval,
            ambient_dim: spec.ambient_dim,
        })
    }

    /// Unnormalized joint log-densities `log π_c + log p(x|c)` up to a
    /// class-independent constant.
    fn joint_log_terms(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.ambient_dim {
            return Err(Error::Dimension {
                expected: self.ambient_dim,
                got: x.len(),
            });
        }
        let point = match &self.eval {
            Evaluation::Ambient => x.to_vec(),
            Evaluation::Latent { pinv } => pinv.matvec(x)?,
        };
        let mut diff = vec![0.0; point.len()];
        Ok((0..self.centers.len())
            .map(|c| {
                for (d, (a, b)) in diff.iter_mut().zip(point.iter().zip(&self.centers[c])) {
                    *d = a - b;
                }
                let y = forward_substitute(&self.factors[c], &diff);
                let q: f64 = y.iter().map(|v| v * v).sum();
                self.log_priors[c] - self.half_log_dets[c] - 0.5 * q
            })
            .collect())
    }

    pub fn log_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let terms = self.joint_log_terms(x)?;
        let lse = log_sum_exp(&terms);
        Ok(terms.into_iter().map(|t| t - lse).collect())
    }

    pub fn posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let logp = self.log_posterior(x)?;
        let mut p: Vec<f64> = logp.into_iter().map(f64::exp).collect();
        let s: f64 = p.iter().sum();
        for v in &mut p {
            *v /= s;
        }
        Ok(p)
    }

    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }
}

fn backward_substitute_transpose(l: &Mat64, y: &[f64]) -> Vec<f64> {
    // solves Lᵀ x = y
    let n = l.rows();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Features with observed (possibly corrupted) and clean labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub num_classes: usize,
    pub features: Mat64,
    pub labels: Vec<usize>,
    pub true_labels: Vec<usize>,
    pub noise_prob: f64,
}

impl LabeledDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.rows();
        if self.labels.len() != n || self.true_labels.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: self.labels.len(),
            });
        }
        if let Some(bad) = self
            .labels
            .iter()
            .chain(&self.true_labels)
            .find(|c| **c >= self.num_classes)
        {
            return Err(Error::Config(format!(
                "label {bad} out of range for {} classes",
                self.num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(Error::Config("noise probability outside [0, 1]".into()));
        }
        Ok(())
    }

    /// Rows at `idx`, in order.
    pub fn subset(&self, idx: &[usize]) -> LabeledDataset {
        LabeledDataset {
            num_classes: self.num_classes,
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            true_labels: idx.iter().map(|&i| self.true_labels[i]).collect(),
            noise_prob: self.noise_prob,
        }
    }

    /// Each observed label is, with probability `p`, replaced by a uniform draw
    /// over the other `M − 1` classes. Clean labels are kept.
    pub fn apply_label_noise(&self, p: f64, rng: &mut RngState) -> Result<LabeledDataset> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Domain(format!("noise probability {p} outside [0, 1]")));
        }
        let m = self.num_classes;
        if m < 2 && p > 0.0 {
            return Err(Error::NoiseImpossible);
        }
        let mut out = self.clone();
        out.noise_prob = p;
        for label in out.labels.iter_mut() {
            if rng.uniform() < p {
                let r = rng.below(m - 1);
                *label = if r >= *label { r + 1 } else { r };
            }
        }
        Ok(out)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = (0..self.dim()).map(|i| format!("f{i}")).collect();
        header.push("label".into());
        header.push("true_label".into());
        wr.write_record(&header)?;
        for (i, row) in self.features.iter_rows().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            rec.push(self.labels[i].to_string());
            rec.push(self.true_labels[i].to_string());
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the CSV layout written by [`LabeledDataset::write_csv`]. The
    /// class count is one more than the largest label seen.
    pub fn read_csv<R: Read>(r: R) -> Result<LabeledDataset> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let width = headers.len();
        if width < 3
            || &headers[width - 2] != "label"
            || &headers[width - 1] != "true_label"
        {
            return Err(Error::Format("expected f0..fd,label,true_label header".into()));
        }
        let d = width - 2;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut true_labels = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            for field in rec.iter().take(d) {
                data.push(
                    field
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad feature {field:?}: {e}")))?,
                );
            }
            let parse_label = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::Format(format!("bad label {s:?}: {e}")))
            };
            labels.push(parse_label(&rec[d])?);
            true_labels.push(parse_label(&rec[d + 1])?);
        }
        let n = labels.len();
        let num_classes = labels.iter().chain(&true_labels).max().map_or(0, |m| m + 1);
        let noisy = labels.iter().zip(&true_labels).filter(|(a, b)| a != b).count();
        Ok(LabeledDataset {
            num_classes,
            features: Mat64::from_vec(n, d, data)?,
            labels,
            true_labels,
            noise_prob: if n == 0 { 0.0 } else { noisy as f64 / n as f64 },
        })
    }

    /// Binary layout: `"PJNC"`, `u32` version, `u64` rows, `u32` feature dim,
    /// `u32` class count, `f64` noise probability, then one row of
    /// `dim + 2` little-endian `f64`s per sample (features, label, clean label).
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DATASET_MAGIC)?;
        w.write_all(&DATASET_VERSION.to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u32).to_le_bytes())?;
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        w.write_all(&self.noise_prob.to_le_bytes())?;
        for (i, row) in self.features.iter_rows().enumerate() {
            for v in row {
                w.write_all(&v.to_le_bytes())?;
            }
            w.write_all(&(self.labels[i] as f64).to_le_bytes())?;
            w.write_all(&(self.true_labels[i] as f64).to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<LabeledDataset> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != DATASET_MAGIC {
            return Err(Error::Format("not a PJNC dataset".into()));
        }
        let version = read_u32(&mut r)?;
        if version != DATASET_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = read_u64(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let num_classes = read_u32(&mut r)? as usize;
        let noise_prob = read_f64(&mut r)?;
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut true_labels = Vec::with_capacity(n);
        for _ in 0..n {
            for _ in 0..d {
                data.push(read_f64(&mut r)?);
            }
            labels.push(read_f64(&mut r)? as usize);
            true_labels.push(read_f64(&mut r)? as usize);
        }
        let ds = LabeledDataset {
            num_classes,
            features: Mat64::from_vec(n, d, data)?,
            labels,
            true_labels,
            noise_prob,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn save_binary(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_binary(f)
    }

    pub fn load_binary(path: &Path) -> Result<LabeledDataset> {
        Self::read_binary(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const DATASET_MAGIC: &[u8; 4] = b"PJNC";
const DATASET_VERSION: u32 = 1;

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// I(X;C) for the d_x = 5, σ = 1 binary task, from adaptive quadrature
    /// of log 2 − E[log(1 + exp(−2s))] with s ~ N(5, 5).
    pub(crate) const BINARY_MI_QUADRATURE: f64 = 0.658_734_381_093_879_6;

    fn logistic(t: f64) -> f64 {
        1.0 / (1.0 + (-t).exp())
    }

    #[test]
    fn binary_spec_matches_setup() {
        let spec = binary_gmm_spec(5, 1.0).unwrap();
        assert_eq!(spec.num_classes, 2);
        assert_eq!(spec.ambient_dim, 5);
        assert_eq!(spec.means[1], vec![1.0; 5]);
        assert_eq!(spec.means[0], vec![-1.0; 5]);
        assert_eq!(spec.covariances[0], Mat64::identity(5));
        assert_eq!(spec.priors, vec![0.5, 0.5]);
        let one = binary_gmm_spec(1, 1.0).unwrap();
        assert_eq!(one.means, vec![vec![-1.0], vec![1.0]]);
        assert!((one.priors.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(binary_gmm_spec(0, 1.0).is_err());
        assert!(binary_gmm_spec(3, 0.0).is_err());
    }

    #[test]
    fn multiclass_spec_properties() {
        let a = multiclass_gmm_spec(&mut RngState::new(11));
        let b = multiclass_gmm_spec(&mut RngState::new(11));
        assert_eq!(a, b);
        assert_eq!(a.num_classes, 32);
        assert_eq!((a.latent_dim, a.ambient_dim), (4, 8));
        assert!(a.priors.iter().all(|p| (*p - 1.0 / 32.0).abs() < 1e-15));
        for cov in &a.covariances {
            cholesky(cov).unwrap();
        }
        a.validate().unwrap();
    }

    #[test]
    fn sample_shapes_and_frequencies() {
        let spec = multiclass_gmm_spec(&mut RngState::new(1));
        let data = spec.sample(12_800, &mut RngState::new(2)).unwrap();
        assert_eq!((data.features.rows(), data.features.cols()), (12_800, 8));
        assert_eq!(data.labels, data.true_labels);
        assert_eq!(data.noise_prob, 0.0);
        let one = spec.sample(1, &mut RngState::new(3)).unwrap();
        assert_eq!(one.len(), 1);

        let bin = binary_gmm_spec(5, 1.0).unwrap();
        let n = 100_000;
        let big = bin.sample(n, &mut RngState::new(4)).unwrap();
        let ones = big.labels.iter().filter(|c| **c == 1).count() as f64;
        let sd = (n as f64 * 0.25).sqrt();
        assert!((ones - 0.5 * n as f64).abs() < 3.0 * sd);

        let many = spec.sample(n, &mut RngState::new(5)).unwrap();
        let mut counts = vec![0usize; 32];
        for c in &many.labels {
            counts[*c] += 1;
        }
        let p = 1.0 / 32.0;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        // 32 simultaneous checks; 4σ keeps the family-wise false alarm rate low
        for c in counts {
            assert!((c as f64 - n as f64 * p).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn sample_is_deterministic() {
        let spec = binary_gmm_spec(5, 1.0).unwrap();
        let a = spec.sample(50, &mut RngState::new(9)).unwrap();
        let b = spec.sample(50, &mut RngState::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn label_noise() {
        let spec = binary_gmm_spec(2, 1.0).unwrap();
        let data = spec.sample(100_000, &mut RngState::new(1)).unwrap();
        let same = data.apply_label_noise(0.0, &mut RngState::new(2)).unwrap();
        assert_eq!(same.labels, data.labels);
        let flipped = data.apply_label_noise(1.0, &mut RngState::new(2)).unwrap();
        assert!(flipped.labels.iter().zip(&data.labels).all(|(a, b)| a != b));
        assert_eq!(flipped.true_labels, data.true_labels);
        let noisy = data.apply_label_noise(0.3, &mut RngState::new(3)).unwrap();
        let frac = noisy
            .labels
            .iter()
            .zip(&data.labels)
            .filter(|(a, b)| a != b)
            .count() as f64
            / data.len() as f64;
        assert!((frac - 0.3).abs() < 0.01, "flip fraction {frac}");
        assert_eq!(noisy.noise_prob, 0.3);

        let single = LabeledDataset {
            num_classes: 1,
            features: Mat64::zeros(3, 1),
            labels: vec![0; 3],
            true_labels: vec![0; 3],
            noise_prob: 0.0,
        };
        assert!(matches!(
            single.apply_label_noise(0.5, &mut RngState::new(0)),
            Err(Error::NoiseImpossible)
        ));
    }

    #[test]
    fn multiclass_noise_changes_only_flipped_rows() {
        let spec = multiclass_gmm_spec(&mut RngState::new(1));
        let data = spec.sample(5_000, &mut RngState::new(2)).unwrap();
        let noisy = data.apply_label_noise(0.5, &mut RngState::new(3)).unwrap();
        assert_eq!(noisy.true_labels, data.true_labels);
        assert_eq!(noisy.features, data.features);
        assert!(noisy.labels.iter().all(|c| *c < 32));
    }

    #[test]
    fn posterior_binary_closed_form() {
        let spec = binary_gmm_spec(5, 1.0).unwrap();
        let model = spec.posterior_model().unwrap();
        let p0 = model.posterior(&[0.0; 5]).unwrap();
        assert!((p0[0] - 0.5).abs() < 1e-12 && (p0[1] - 0.5).abs() < 1e-12);
        let mut rng = RngState::new(5);
        for _ in 0..100 {
            let x: Vec<f64> = (0..5).map(|_| 2.0 * rng.normal()).collect();
            let s: f64 = x.iter().sum();
            let closed = logistic(2.0 * s);
            // direct two-term Bayes with unnormalized isotropic densities
            let e1: f64 = x.iter().map(|v| (v - 1.0) * (v - 1.0)).sum::<f64>();
            let e0: f64 = x.iter().map(|v| (v + 1.0) * (v + 1.0)).sum::<f64>();
            let direct = 1.0 / (1.0 + (-(e0 - e1) / 2.0).exp());
            let got = model.posterior(&x).unwrap();
            assert!((got[1] - closed).abs() < 1e-12);
            assert!((got[1] - direct).abs() < 1e-12);
            assert!((got.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_multiclass_is_distribution() {
        let spec = multiclass_gmm_spec(&mut RngState::new(3));
        let model = spec.posterior_model().unwrap();
        let data = spec.sample(200, &mut RngState::new(4)).unwrap();
        let mut hits = 0;
        for (x, &c) in data.features.iter_rows().zip(&data.labels) {
            let p = model.posterior(x).unwrap();
            assert!(p.iter().all(|v| *v >= 0.0 && *v <= 1.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let best = (0..32).max_by(|a, b| p[*a].total_cmp(&p[*b])).unwrap();
            hits += usize::from(best == c);
        }
        // far better than the 1/32 chance level
        assert!(hits > 60, "{hits}");
        assert!(model.posterior(&[0.0; 3]).is_err());
    }

    #[test]
    fn oracle_matches_quadrature() {
        let spec = binary_gmm_spec(5, 1.0).unwrap();
        let est = spec.oracle_mi(DEFAULT_ORACLE_SAMPLES, &mut RngState::new(2024)).unwrap();
        let se = est.stderr.unwrap();
        assert!(se < 1e-3);
        assert!(
            (est.value - BINARY_MI_QUADRATURE).abs() < 4.0 * se,
            "{} ± {se} vs {BINARY_MI_QUADRATURE}",
            est.value
        );
    }

    #[test]
    fn oracle_degenerate_cases() {
        let wide = binary_gmm_spec(1, 100.0).unwrap();
        let est = wide.oracle_mi(20_000, &mut RngState::new(1)).unwrap();
        assert!(est.value <= 0.01);

        let mut same = binary_gmm_spec(3, 1.0).unwrap();
        same.means = vec![vec![0.0; 3], vec![0.0; 3]];
        let est = same.oracle_mi(20_000, &mut RngState::new(1)).unwrap();
        assert!(est.value.abs() <= 3.0 * est.stderr.unwrap() + 1e-12);

        let spec = multiclass_gmm_spec(&mut RngState::new(8));
        let est = spec.oracle_mi(20_000, &mut RngState::new(1)).unwrap();
        let se = est.stderr.unwrap();
        assert!(est.value >= -3.0 * se && est.value <= (32f64).ln() + 3.0 * se);
        assert!(spec.oracle_mi(10, &mut RngState::new(1)).is_err());
    }

    #[test]
    fn csv_and_binary_roundtrip() {
        let spec = binary_gmm_spec(3, 1.0).unwrap();
        let data = spec
            .sample(40, &mut RngState::new(1))
            .unwrap()
            .apply_label_noise(0.25, &mut RngState::new(2))
            .unwrap();
        let mut buf = Vec::new();
        data.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("f0,f1,f2,label,true_label\n"));
        let back = LabeledDataset::read_csv(&buf[..]).unwrap();
        assert_eq!(back.features, data.features);
        assert_eq!(back.labels, data.labels);
        assert_eq!(back.true_labels, data.true_labels);

        let mut bin = Vec::new();
        data.write_binary(&mut bin).unwrap();
        assert_eq!(&bin[..4], b"PJNC");
        assert_eq!(LabeledDataset::read_binary(&bin[..]).unwrap(), data);
        bin[0] = b'X';
        assert!(matches!(
            LabeledDataset::read_binary(&bin[..]),
            Err(Error::Format(_))
        ));
    }
}
