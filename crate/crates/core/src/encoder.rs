//! MLP encoder onto the unit sphere, its exact backward pass, AdamW, and the
//! linear probe used to score frozen embeddings.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm2, Mat64, RngState, EPS_NORM};
use crate::synthdata::read_u32;

/// Fully connected ReLU network, parameters stored flat. Layer `l` maps
/// `sizes[l] → sizes[l+1]` and occupies `W` (`out × in`, row-major)
/// followed by `b` (`out`).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    data: Vec<f64>,
}

fn layer_len(sizes: &[usize], l: usize) -> usize {
    sizes[l + 1] * sizes[l] + sizes[l + 1]
}

impl MlpParams {
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.iter().any(|s| *s == 0) {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let total = (0..sizes.len() - 1).map(|l| layer_len(sizes, l)).sum();
        Ok(Self {
            sizes: sizes.to_vec(),
            data: vec![0.0; total],
        })
    }

    /// He-uniform weights, zero biases.
    pub fn he_uniform(sizes: &[usize], rng: &mut RngState) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        for l in 0..p.num_layers() {
            let bound = (6.0 / sizes[l] as f64).sqrt();
            let (w, _) = p.layer_mut(l);
            for v in w.iter_mut() {
                *v = rng.uniform_range(-bound, bound);
            }
        }
        Ok(p)
    }

    pub fn from_flat(sizes: &[usize], data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(sizes)?;
        if data.len() != p.data.len() {
            return Err(Error::Dimension {
                expected: p.data.len(),
                got: data.len(),
            });
        }
        p.data = data;
        Ok(p)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("nonempty")
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    fn offset(&self, l: usize) -> usize {
        (0..l).map(|k| layer_len(&self.sizes, k)).sum()
    }

    /// `(W, b)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = self.offset(l);
        let nw = self.sizes[l + 1] * self.sizes[l];
        let nb = self.sizes[l + 1];
        (&self.data[off..off + nw], &self.data[off + nw..off + nw + nb])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.offset(l);
        let nw = self.sizes[l + 1] * self.sizes[l];
        let nb = self.sizes[l + 1];
        let (w, rest) = self.data[off..off + nw + nb].split_at_mut(nw);
        (w, rest)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Checkpoint layout: `"PJNW"`, `u32` version, `u32` count of layer
    /// sizes, the sizes as `u32`, then every parameter as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.sizes.len() as u32).to_le_bytes())?;
        for s in &self.sizes {
            w.write_all(&(*s as u32).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a PJNW checkpoint".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        if !(2..=64).contains(&count) {
            return Err(Error::Format(format!("implausible layer count {count}")));
        }
        let sizes = (0..count)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut p = Self::zeros(&sizes)?;
        let mut buf = [0u8; 8];
        for v in p.data.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_checkpoint(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"PJNW";
const CHECKPOINT_VERSION: u32 = 1;

/// Parses an architecture such as `"5,16,16,2"`.
pub fn parse_arch(s: &str) -> Result<Vec<usize>> {
    let sizes = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|e| Error::Config(format!("bad layer size {t:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::Config(format!("architecture {s:?} needs at least two positive sizes")));
    }
    Ok(sizes)
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTape {
    /// `acts[0]` is the input; `acts[l]` the ReLU output of hidden layer `l`.
    pub acts: Vec<Mat64>,
    /// Pre-activations of every layer; the last one is `u`.
    pub pre: Vec<Mat64>,
    pub norms: Vec<f64>,
    pub z: Mat64,
}

impl ForwardTape {
    pub fn u(&self) -> &Mat64 {
        self.pre.last().expect("at least one layer")
    }
}

fn affine(x: &Mat64, w: &[f64], b: &[f64], out: usize) -> Mat64 {
    let n = x.rows();
    let inp = x.cols();
    let mut y = Mat64::zeros(n, out);
    for r in 0..n {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for o in 0..out {
            let wo = &w[o * inp..(o + 1) * inp];
            let mut s = b[o];
            for i in 0..inp {
                s += wo[i] * xr[i];
            }
            yr[o] = s;
        }
    }
    y
}

pub fn forward(params: &MlpParams, x: &Mat64) -> Result<ForwardTape> {
    if x.cols() != params.input_dim() {
        return Err(Error::Dimension {
            expected: params.input_dim(),
            got: x.cols(),
        });
    }
    let layers = params.num_layers();
    let mut acts = Vec::with_capacity(layers);
    let mut pre = Vec::with_capacity(layers);
    acts.push(x.clone());
    for l in 0..layers {
        let (w, b) = params.layer(l);
        let y = affine(acts.last().expect("input"), w, b, params.sizes[l + 1]);
        if l + 1 < layers {
            let mut a = y.clone();
            for v in a.as_mut_slice() {
                *v = v.max(0.0);
            }
            acts.push(a);
        }
        pre.push(y);
    }
    let u = pre.last().expect("layer");
    let mut z = u.clone();
    let mut norms = Vec::with_capacity(u.rows());
    for r in 0..u.rows() {
        let nr = norm2(u.row(r));
        if !(nr > EPS_NORM) {
            return Err(Error::DegenerateNorm { norm: nr });
        }
        norms.push(nr);
        for v in z.row_mut(r) {
            *v /= nr;
        }
    }
    Ok(ForwardTape { acts, pre, norms, z })
}

/// Embeddings only.
pub fn embed(params: &MlpParams, x: &Mat64) -> Result<Mat64> {
    Ok(forward(params, x)?.z)
}

/// Gradient of the loss with respect to every parameter, given `∂L/∂Z`.
pub fn backward(params: &MlpParams, tape: &ForwardTape, d_loss_d_z: &Mat64) -> Result<MlpParams> {
    let z = &tape.z;
    if d_loss_d_z.rows() != z.rows() || d_loss_d_z.cols() != z.cols() {
        return Err(Error::Dimension {
            expected: z.rows() * z.cols(),
            got: d_loss_d_z.rows() * d_loss_d_z.cols(),
        });
    }
    let mut grad = MlpParams::zeros(&params.sizes)?;
    // through the sphere normalization: (I − zzᵀ) g / ‖u‖
    let mut g = Mat64::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let zr = z.row(r);
        let gr = d_loss_d_z.row(r);
        let zg: f64 = zr.iter().zip(gr).map(|(a, b)| a * b).sum();
        let out = g.row_mut(r);
        for t in 0..zr.len() {
            out[t] = (gr[t] - zg * zr[t]) / tape.norms[r];
        }
    }
    for l in (0..params.num_layers()).rev() {
        let inp = params.sizes[l];
        let out = params.sizes[l + 1];
        let a = &tape.acts[l];
        {
            let (gw, gb) = grad.layer_mut(l);
            for r in 0..a.rows() {
                let ar = a.row(r);
                let gr = g.row(r);
                for o in 0..out {
                    let go = gr[o];
                    if go == 0.0 {
                        continue;
                    }
                    gb[o] += go;
                    let row = &mut gw[o * inp..(o + 1) * inp];
                    for i in 0..inp {
                        row[i] += go * ar[i];
                    }
                }
            }
        }
        if l == 0 {
            break;
        }
        let (w, _) = params.layer(l);
        let prev = &tape.pre[l - 1];
        let mut gp = Mat64::zeros(a.rows(), inp);
        for r in 0..a.rows() {
            let gr = g.row(r);
            let pr = prev.row(r);
            let out_row = gp.row_mut(r);
            for o in 0..out {
                let go = gr[o];
                if go == 0.0 {
                    continue;
                }
                let wo = &w[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    out_row[i] += go * wo[i];
                }
            }
            for i in 0..inp {
                if pr[i] <= 0.0 {
                    out_row[i] = 0.0;
                }
            }
        }
        g = gp;
    }
    Ok(grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamWState {
    pub fn new(num_params: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    pub fn moments(&self) -> (&[f64], &[f64]) {
        (&self.m, &self.v)
    }
}

/// One AdamW update: `θ ← θ(1 − lr·wd)`, then the bias-corrected Adam step.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut AdamWState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            expected: params.len(),
            got: grads.len(),
        });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index: i });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let decay = 1.0 - state.lr * state.weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] = params[i] * decay - state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub epochs: usize,
    pub lr: f64,
    /// Fraction of rows held out for scoring by [`linear_probe`].
    pub holdout: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr: 0.1,
            holdout: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    /// `M × (d + 1)`, bias last.
    pub weights: Mat64,
    pub accuracy: f64,
    pub train_accuracy: f64,
}

fn probe_logits(w: &Mat64, x: &[f64], out: &mut [f64]) {
    let d = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        let wc = w.row(c);
        let mut s = wc[d];
        for t in 0..d {
            s += wc[t] * x[t];
        }
        *o = s;
    }
}

fn probe_accuracy(w: &Mat64, x: &Mat64, y: &[usize]) -> f64 {
    let mut logits = vec![0.0; w.rows()];
    let mut hits = 0usize;
    for (row, &c) in x.iter_rows().zip(y) {
        probe_logits(w, row, &mut logits);
        let mut best = 0;
        for k in 1..logits.len() {
            if logits[k] > logits[best] {
                best = k;
            }
        }
        hits += usize::from(best == c);
    }
    hits as f64 / y.len().max(1) as f64
}

/// Multinomial logistic regression by full-batch gradient descent on
/// `(train_x, train_y)`, scored on `(test_x, test_y)`.
pub fn probe_train_test(
    train_x: &Mat64,
    train_y: &[usize],
    test_x: &Mat64,
    test_y: &[usize],
    num_classes: usize,
    opts: &ProbeOptions,
) -> Result<ProbeResult> {
    let mut seen = vec![false; num_classes];
    for &c in train_y {
        if c >= num_classes {
            return Err(Error::Config(format!("label {c} out of range")));
        }
        seen[c] = true;
    }
    let distinct = seen.iter().filter(|s| **s).count();
    if distinct < 2 {
        return Err(Error::DegenerateLabels(distinct));
    }
    if test_x.cols() != train_x.cols() {
        return Err(Error::Dimension {
            expected: train_x.cols(),
            got: test_x.cols(),
        });
    }
    let d = train_x.cols();
    let n = train_x.rows() as f64;
    let mut w = Mat64::zeros(num_classes, d + 1);
    let mut grad = Mat64::zeros(num_classes, d + 1);
    let mut p = vec![0.0; num_classes];
    for _ in 0..opts.epochs {
        grad.as_mut_slice().iter_mut().for_each(|g| *g = 0.0);
        for (x, &c) in train_x.iter_rows().zip(train_y) {
            probe_logits(&w, x, &mut p);
            let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in p.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for (k, v) in p.iter_mut().enumerate() {
                *v /= s;
                let e = *v - f64::from(k == c);
                let gk = grad.row_mut(k);
                for t in 0..d {
                    gk[t] += e * x[t];
                }
                gk[d] += e;
            }
        }
        for (wv, gv) in w.as_mut_slice().iter_mut().zip(grad.as_slice()) {
            *wv -= opts.lr * gv / n;
        }
    }
    Ok(ProbeResult {
        accuracy: probe_accuracy(&w, test_x, test_y),
        train_accuracy: probe_accuracy(&w, train_x, train_y),
        weights: w,
    })
}

/// Random train/held-out split of the rows, then [`probe_train_test`].
pub fn linear_probe(
    embeddings: &Mat64,
    labels: &[usize],
    num_classes: usize,
    opts: &ProbeOptions,
    rng: &mut RngState,
) -> Result<ProbeResult> {
    let n = embeddings.rows();
    if labels.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: labels.len(),
        });
    }
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::DegenerateLabels(distinct.len()));
    }
    let perm = rng.permutation(n);
    let n_test = ((n as f64) * opts.holdout).round().clamp(1.0, (n - 1) as f64) as usize;
    let (test_idx, train_idx) = perm.split_at(n_test);
    let pick = |idx: &[usize]| idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    probe_train_test(
        &embeddings.select_rows(train_idx),
        &pick(train_idx),
        &embeddings.select_rows(test_idx),
        &pick(test_idx),
        num_classes,
        opts,
    )
}
