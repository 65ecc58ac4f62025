//! Frozen random-projection quantizer, span masking and the masked
//! prediction loss.
//!
//! Frames are normalised per utterance, stacked in non-overlapping groups of
//! [`STACK`] (one group per encoder frame), projected by a fixed random
//! matrix, L2-normalised and assigned to the nearest row of a fixed,
//! L2-normalised codebook.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ctc::argmax;
use crate::nnet::{subsampled_len, Ctx, Linear};
use crate::numerics::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Frames per quantizer group; matches the frontend's subsampling factor.
pub const STACK: usize = 4;

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub n_codes: usize,
    pub d_code: usize,
    pub seed: u64,
}

impl Default for QuantizerSpec {
    fn default() -> Self {
        Self {
            n_codes: 64,
            d_code: 8,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandomProjectionQuantizer {
    proj: Tensor,
    codebook: Tensor,
    seed: u64,
}

fn l2_normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

impl RandomProjectionQuantizer {
    pub fn new(d_feat: usize, spec: &QuantizerSpec) -> Result<Self> {
        if spec.n_codes == 0 || spec.d_code == 0 || d_feat == 0 {
            return Err(Error::config("quantizer dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let d_in = STACK * d_feat;
        let proj = Tensor::randn(&[d_in, spec.d_code], (1.0 / d_in as f64).sqrt(), &mut rng);
        let codebook = Tensor::randn(&[spec.n_codes, spec.d_code], 1.0, &mut rng);
        Self::from_parts(proj, codebook, spec.seed)
    }

    /// Builds a quantizer from explicit matrices; codebook rows are
    /// L2-normalised.
    pub fn from_parts(proj: Tensor, mut codebook: Tensor, seed: u64) -> Result<Self> {
        if proj.rank() != 2 || codebook.rank() != 2 || proj.shape()[1] != codebook.shape()[1] {
            return Err(Error::config(format!(
                "quantizer projection {:?} and codebook {:?} disagree",
                proj.shape(),
                codebook.shape()
            )));
        }
        if proj.shape()[0] % STACK != 0 {
            return Err(Error::config("projection input width must be a multiple of the stack size"));
        }
        for i in 0..codebook.rows() {
            l2_normalize(codebook.row_mut(i));
        }
        Ok(Self { proj, codebook, seed })
    }

    /// Rebuilds a stored quantizer without touching the codebook.
    pub(crate) fn from_stored(proj: Tensor, codebook: Tensor, seed: u64) -> Result<Self> {
        let mut q = Self::from_parts(proj, codebook.clone(), seed)?;
        q.codebook = codebook;
        Ok(q)
    }

    pub fn proj(&self) -> &Tensor {
        &self.proj
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn n_codes(&self) -> usize {
        self.codebook.rows()
    }

    pub fn d_feat(&self) -> usize {
        self.proj.shape()[0] / STACK
    }

    /// Index of the nearest codebook row by Euclidean distance; ties go to
    /// the lower index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for i in 0..self.codebook.rows() {
            let d: f64 = self.codebook.row(i).iter().zip(v).map(|(c, x)| (c - x) * (c - x)).sum();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }

    /// Normalised, stacked and projected unit vectors, one per encoder frame.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let d = self.d_feat();
        if features.rank() != 2 || features.last_dim() != d {
            return Err(Error::config(format!(
                "quantizer expects [T, {d}] features, got {:?}",
                features.shape()
            )));
        }
        let t = features.rows();
        let t_sub = subsampled_len(t);
        let mut mean = vec![0.0; d];
        let mut var = vec![0.0; d];
        for i in 0..t {
            for (m, x) in mean.iter_mut().zip(features.row(i)) {
                *m += x / t as f64;
            }
        }
        for i in 0..t {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(features.row(i)) {
                *v += (x - m) * (x - m) / t as f64;
            }
        }
        let d_code = self.proj.shape()[1];
        let mut out = Tensor::zeros(&[t_sub, d_code]);
        let mut stacked = vec![0.0; STACK * d];
        for j in 0..t_sub {
            for s in 0..STACK {
                for (k, x) in features.row(STACK * j + s).iter().enumerate() {
                    stacked[s * d + k] = (x - mean[k]) / (var[k] + NORM_EPS).sqrt();
                }
            }
            let row = out.row_mut(j);
            for (k, &x) in stacked.iter().enumerate() {
                for (o, w) in row.iter_mut().zip(self.proj.row(k)) {
                    *o += x * w;
                }
            }
            l2_normalize(row);
        }
        Ok(out)
    }

    /// One label per encoder frame.
    pub fn quantize(&self, features: &Tensor) -> Result<Vec<usize>> {
        let z = self.project(features)?;
        Ok((0..z.rows()).map(|j| self.nearest(z.row(j))).collect())
    }

    /// Serialised projection followed by codebook.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = self.proj.to_le_bytes();
        b.extend(self.codebook.to_le_bytes());
        b
    }

    pub fn sha256_hex(&self) -> String {
        Sha256::digest(self.to_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Per-frame probability of starting a span.
    pub start_prob: f64,
    /// Span length in frames, clipped at the sequence end.
    pub span: usize,
    /// Standard deviation of the replacement noise.
    pub noise_std: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            start_prob: 0.01,
            span: 20,
            noise_std: 0.1,
        }
    }
}

impl MaskSpec {
    /// Expected masked fraction far from the sequence edges.
    pub fn expected_fraction(&self) -> f64 {
        1.0 - (1.0 - self.start_prob).powi(self.span as i32)
    }
}

/// Masks spans of `features` with Gaussian noise. Returns the masked copy and
/// the sorted masked frame indices.
pub fn apply_mask<R: Rng + ?Sized>(features: &Tensor, spec: &MaskSpec, rng: &mut R) -> Result<(Tensor, Vec<usize>)> {
    if !(0.0..=1.0).contains(&spec.start_prob) || spec.noise_std < 0.0 {
        return Err(Error::config(format!("invalid mask spec {spec:?}")));
    }
    let t = features.rows();
    let mut masked = vec![false; t];
    for i in 0..t {
        if rng.random::<f64>() < spec.start_prob {
            masked[i..(i + spec.span).min(t)].iter_mut().for_each(|m| *m = true);
        }
    }
    let idx: Vec<usize> = (0..t).filter(|&i| masked[i]).collect();
    let mut out = features.clone();
    if !idx.is_empty() {
        let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
        for &i in &idx {
            out.row_mut(i).iter_mut().for_each(|v| *v = noise.sample(rng));
        }
    }
    Ok((out, idx))
}

/// Encoder frames whose quantizer group contains a masked input frame.
pub fn masked_subframes(masked_frames: &[usize], t_sub: usize) -> Vec<usize> {
    let mut out: Vec<usize> = masked_frames.iter().map(|&i| i / STACK).filter(|&j| j < t_sub).collect();
    out.dedup();
    out
}

/// Masked-prediction loss value and whether any position was masked.
pub struct MlmLoss {
    pub loss: Var,
    pub active: bool,
}

/// Cross-entropy of `logits: [T', N]` against `labels` at `indices` only,
/// averaged over those positions. An empty index set gives a constant zero.
pub fn masked_cross_entropy(g: &Graph, logits: Var, indices: &[usize], labels: &[usize]) -> Result<MlmLoss> {
    let shape = g.shape(logits);
    let (t, n) = (shape[0], shape[1]);
    if labels.len() != t {
        return Err(Error::config(format!("{} labels for {t} encoder frames", labels.len())));
    }
    if indices.is_empty() {
        return Ok(MlmLoss {
            loss: g.constant(Tensor::scalar(0.0)),
            active: false,
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::config(format!("label {bad} outside codebook of {n}")));
    }
    let rows = g.take_rows(logits, indices)?;
    let lp = g.log_softmax(rows, 1)?;
    let picked = indices.iter().enumerate().map(|(k, &i)| k * n + labels[i]).collect();
    let s = g.sum(g.take(lp, picked, vec![indices.len()])?);
    Ok(MlmLoss {
        loss: g.scale(s, -1.0 / indices.len() as f64),
        active: true,
    })
}

/// Masked-prediction loss from encoder states through the trainable
/// projection `proj_u`; only masked rows are projected.
pub fn mlm_loss(cx: &Ctx, h: Var, proj_u: &Linear, indices: &[usize], labels: &[usize]) -> Result<MlmLoss> {
    let g = cx.g;
    let t = g.shape(h)[0];
    if labels.len() != t {
        return Err(Error::config(format!("{} labels for {t} encoder frames", labels.len())));
    }
    if indices.is_empty() {
        return masked_cross_entropy(g, h, indices, labels);
    }
    let rows = g.take_rows(h, indices)?;
    let logits = proj_u.forward(cx, rows)?;
    let local: Vec<usize> = (0..indices.len()).collect();
    let local_labels: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
    masked_cross_entropy(g, logits, &local, &local_labels)
}

/// Histogram of code assignments.
pub fn code_histogram(labels: &[usize], n_codes: usize) -> Vec<usize> {
    let mut h = vec![0; n_codes];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Most likely code per frame from MLM logits.
pub fn predicted_codes(logits: &Tensor) -> Vec<usize> {
    (0..logits.rows()).map(|i| argmax(logits.row(i))).collect()
}
