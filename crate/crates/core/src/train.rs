//! Training loop: Adam with inverse-square-root warmup, global-norm
//! clipping, per-epoch metrics, best-k checkpoints by validation loss and a
//! resumable state file.
//!
//! Files in the output directory:
//!
//! - `metrics.csv`: one row per finished epoch
//! - `state.bin`: epoch, step, optimizer moments and best-k list
//! - `last.ckpt`: weights after the latest epoch
//! - `epoch-NNN.ckpt`: the best-k checkpoints
//! - `final.ckpt`: average of the best-k checkpoints

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{make_batches, Corpus, Split, Utterance};
use crate::decode::ctc_wer;
use crate::model::{average_checkpoints, load_checkpoint, save_checkpoint, LossBreakdown, LupetConfig, LupetModel};
use crate::nnet::Ctx;
use crate::numerics::{Graph, ParamStore};
use crate::{derive_seed, Error, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "# lupet-metrics v1\nepoch,step,l_attn,l_ctc,l_lid,l_mlm,l_ipa,total,dev_wer\n";
pub const STATE_FILE: &str = "state.bin";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
const STATE_MAGIC: &[u8; 4] = b"LUPS";
const STATE_VERSION: u32 = 1;

/// `peak * min(step / warmup, sqrt(warmup / step))` for 1-based steps.
pub fn learning_rate(step: usize, peak: f64, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let ids: Vec<_> = store.ids().collect();
    let sq: f64 = ids
        .iter()
        .filter_map(|&id| store.get(id).grad.as_ref())
        .flat_map(|g| g.data().iter())
        .map(|x| x * x)
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= k);
            }
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// First and second moments per parameter (empty for frozen ones).
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = |_| Vec::new();
        let m: Vec<Vec<f64>> = store.ids().map(zeros).collect();
        Self {
            beta1,
            beta2,
            eps,
            v: m.clone(),
            m,
        }
    }

    /// One bias-corrected update at 1-based `step`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64, step: usize) {
        let t = step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(g) = p.grad.as_ref() else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            if m.is_empty() {
                m.resize(g.len(), 0.0);
                v.resize(g.len(), 0.0);
            }
            let w = p.value.data_mut();
            for (((w, &g), m), v) in w.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestEntry {
    pub epoch: usize,
    pub val_loss: f64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    global_step: usize,
    data_seed: u64,
    mask_seed: u64,
    init_seed: u64,
    best: Vec<BestEntry>,
}

/// Everything needed to continue training bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub global_step: usize,
    /// Seed of the batch order; epoch `e` shuffles with `(data_seed, e)`.
    pub data_seed: u64,
    /// Seed of span masking, combined with utterance id and epoch.
    pub mask_seed: u64,
    pub init_seed: u64,
    pub adam: Adam,
    /// Sorted by validation loss, then epoch.
    pub best: Vec<BestEntry>,
}

impl TrainState {
    pub fn new(model: &LupetModel) -> Self {
        let c = &model.config;
        Self {
            epoch: 0,
            global_step: 0,
            data_seed: derive_seed(c.seed, "data", 0),
            mask_seed: c.seed,
            init_seed: c.seed,
            adam: Adam::new(&model.store, c.train.beta1, c.train.beta2, c.train.adam_eps),
            best: Vec::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = StateHeader {
            epoch: self.epoch,
            global_step: self.global_step,
            data_seed: self.data_seed,
            mask_seed: self.mask_seed,
            init_seed: self.init_seed,
            best: self.best.clone(),
        };
        let json = serde_json::to_vec(&header).expect("state header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.adam.beta1.to_le_bytes());
        out.extend_from_slice(&self.adam.beta2.to_le_bytes());
        out.extend_from_slice(&self.adam.eps.to_le_bytes());
        out.extend_from_slice(&(self.adam.m.len() as u32).to_le_bytes());
        for (m, v) in self.adam.m.iter().zip(&self.adam.v) {
            out.extend_from_slice(&(m.len() as u64).to_le_bytes());
            for x in m.iter().chain(v) {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("training state: {m}"));
        if bytes.len() < 12 + 32 || &bytes[..4] != STATE_MAGIC {
            return Err(bad("bad magic"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let mut pos = 4;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body.get(pos..pos + n).ok_or_else(|| bad("truncated"))?;
            pos += n;
            Ok(s)
        };
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("4 bytes"));
        let f64_at = |b: &[u8]| f64::from_le_bytes(b.try_into().expect("8 bytes"));
        if u32_at(take(4)?) != STATE_VERSION {
            return Err(bad("unsupported version"));
        }
        let n = u32_at(take(4)?) as usize;
        let header: StateHeader = serde_json::from_slice(take(n)?)?;
        let beta1 = f64_at(take(8)?);
        let beta2 = f64_at(take(8)?);
        let eps = f64_at(take(8)?);
        let n_params = u32_at(take(4)?) as usize;
        let mut m = Vec::with_capacity(n_params);
        let mut v = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let len = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
            let raw = take(16 * len)?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(f64_at).collect();
            m.push(vals[..len].to_vec());
            v.push(vals[len..].to_vec());
        }
        if pos != body.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self {
            epoch: header.epoch,
            global_step: header.global_step,
            data_seed: header.data_seed,
            mask_seed: header.mask_seed,
            init_seed: header.init_seed,
            adam: Adam { beta1, beta2, eps, m, v },
            best: header.best,
        })
    }
}

/// Per-epoch log line.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub loss: LossBreakdown,
    pub dev_wer: f64,
    pub val_loss: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.loss;
        format!(
            "{},{},{},{},{},{},{},{},{}\n",
            self.epoch, self.step, l.l_attn, l.l_ctc, l.l_lid, l.l_mlm, l.l_ipa, l.total, self.dev_wer
        )
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `state.bin` when present.
    pub resume: bool,
    /// Stop (without averaging) once this many epochs have finished.
    pub stop_after: Option<usize>,
    /// Decoding threads for dev WER.
    pub threads: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: LupetModel,
    pub metrics: Vec<EpochMetrics>,
    /// Whether all configured epochs ran and `final.ckpt` was written.
    pub finished: bool,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn save_model_atomic(model: &LupetModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    save_checkpoint(model, &tmp)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Training utterances: the configured language only for a monolingual run.
pub fn training_split<'a>(config: &LupetConfig, corpus: &'a Corpus, split: Split) -> Vec<&'a Utterance> {
    corpus
        .split(split)
        .into_iter()
        .filter(|u| config.language.is_none_or(|l| u.lid == l))
        .collect()
}

/// Mean validation loss over `utts`, without masking.
pub fn validation_loss(model: &LupetModel, utts: &[&Utterance], batch_size: usize) -> Result<f64> {
    let batches = make_batches(utts, batch_size, 0, 0)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for b in &batches {
        sum += model.eval_loss(b)?.total * b.len() as f64;
        n += b.len();
    }
    Ok(sum / n.max(1) as f64)
}

fn same_except_epochs(a: &LupetConfig, b: &LupetConfig) -> bool {
    let mut a = a.clone();
    a.train.epochs = b.train.epochs;
    &a == b
}

/// Trains `config` on `corpus`, writing artefacts to `out`.
pub fn train(config: LupetConfig, corpus: &Corpus, out: &Path, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    fs::create_dir_all(out)?;
    let state_path = out.join(STATE_FILE);
    let metrics_path = out.join(METRICS_FILE);
    let resuming = opts.resume && state_path.exists();
    let (mut model, mut state) = if resuming {
        let mut model = load_checkpoint(&out.join(LAST_CHECKPOINT))?;
        if !same_except_epochs(&model.config, &config) {
            return Err(Error::config("resume: configuration differs from the interrupted run"));
        }
        model.config.train.epochs = config.train.epochs;
        let state = TrainState::from_bytes(&fs::read(&state_path)?)?;
        (model, state)
    } else {
        let model = LupetModel::new(config.clone())?;
        let state = TrainState::new(&model);
        (model, state)
    };
    // Drop rows of epochs that had not been committed to the state.
    let log = if resuming && metrics_path.exists() {
        let text = fs::read_to_string(&metrics_path)?;
        let kept: String = text
            .split_inclusive('\n')
            .filter(|line| {
                line.split(',')
                    .next()
                    .and_then(|e| e.trim().parse::<usize>().ok())
                    .is_none_or(|e| e < state.epoch)
            })
            .collect();
        kept
    } else {
        METRICS_HEADER.to_string()
    };
    write_atomic(&metrics_path, log.as_bytes())?;

    let train_utts = training_split(&config, corpus, Split::Train);
    let dev_utts = training_split(&config, corpus, Split::Dev);
    if train_utts.is_empty() || dev_utts.is_empty() {
        return Err(Error::Data("training needs non-empty train and dev splits".into()));
    }
    let vocab = corpus.vocab()?;
    let names = corpus.info.language_names();
    let tc = config.train.clone();
    let threads = opts.threads.max(1);
    let mut metrics = Vec::new();

    while state.epoch < tc.epochs {
        if opts.stop_after.is_some_and(|s| state.epoch >= s) {
            return Ok(TrainOutcome {
                model,
                metrics,
                finished: false,
            });
        }
        let epoch = state.epoch;
        let batches = make_batches(&train_utts, tc.batch_size, state.data_seed, epoch)?;
        let mut acc = LossBreakdown::default();
        let mut mlm_batches = 0usize;
        for batch in &batches {
            model.store.zero_grads();
            let g = Graph::new();
            let out_loss = {
                let cx = Ctx::new(&g, &model.store);
                model.batch_loss(&cx, batch, epoch)?
            };
            let b = out_loss.breakdown;
            if !b.total.is_finite() {
                let dump = serde_json::json!({
                    "epoch": epoch,
                    "step": state.global_step + 1,
                    "ids": batch.ids,
                    "l_attn": b.l_attn, "l_ctc": b.l_ctc, "l_lid": b.l_lid,
                    "l_mlm": b.l_mlm, "l_ipa": b.l_ipa,
                });
                fs::write(out.join("nonfinite_batch.json"), serde_json::to_vec_pretty(&dump)?)?;
                return Err(Error::NonFinite(format!(
                    "epoch {epoch}, step {}, utterances {}",
                    state.global_step + 1,
                    batch.ids.join(" ")
                )));
            }
            let grads = g.backward(out_loss.total)?;
            grads.accumulate_into(&mut model.store);
            drop(grads);
            clip_grad_norm(&mut model.store, tc.grad_clip);
            state.global_step += 1;
            let lr = learning_rate(state.global_step, tc.peak_lr, tc.warmup_steps);
            state.adam.step(&mut model.store, lr, state.global_step);
            acc.l_attn += b.l_attn;
            acc.l_ctc += b.l_ctc;
            acc.l_lid += b.l_lid;
            acc.l_mlm += b.l_mlm;
            acc.l_ipa += b.l_ipa;
            acc.total += b.total;
            mlm_batches += usize::from(b.mlm_active);
        }
        model.store.zero_grads();
        let n = batches.len() as f64;
        let loss = LossBreakdown {
            l_attn: acc.l_attn / n,
            l_ctc: acc.l_ctc / n,
            l_lid: acc.l_lid / n,
            l_mlm: acc.l_mlm / n,
            l_ipa: acc.l_ipa / n,
            total: acc.total / n,
            mlm_active: mlm_batches > 0,
        };
        let dev_wer = ctc_wer(&model, &dev_utts, &vocab, &names, threads)?.avg();
        let val_loss = validation_loss(&model, &dev_utts, tc.batch_size)?;
        let row = EpochMetrics {
            epoch,
            step: state.global_step,
            loss,
            dev_wer,
            val_loss,
        };
        log::info!(
            "epoch {epoch}: total {:.4} attn {:.4} ctc {:.4} lid {:.4} mlm {:.4} ipa {:.4} dev_wer {:.4} val {:.4}",
            loss.total,
            loss.l_attn,
            loss.l_ctc,
            loss.l_lid,
            loss.l_mlm,
            loss.l_ipa,
            dev_wer,
            val_loss
        );

        // Best-k bookkeeping.
        let file = format!("epoch-{epoch:03}.ckpt");
        let mut best = state.best.clone();
        best.push(BestEntry {
            epoch,
            val_loss,
            file: file.clone(),
        });
        best.sort_by(|a, b| a.val_loss.total_cmp(&b.val_loss).then(a.epoch.cmp(&b.epoch)));
        let evicted: Vec<BestEntry> = best.split_off(best.len().min(tc.best_k));
        if best.iter().any(|e| e.epoch == epoch) {
            save_model_atomic(&model, &out.join(&file))?;
        }
        save_model_atomic(&model, &out.join(LAST_CHECKPOINT))?;
        state.best = best;
        state.epoch += 1;
        let mut f = fs::OpenOptions::new().append(true).open(&metrics_path)?;
        f.write_all(row.csv_row().as_bytes())?;
        write_atomic(&state_path, &state.to_bytes())?;
        for e in evicted {
            let p = out.join(&e.file);
            if p.exists() {
                fs::remove_file(p)?;
            }
        }
        metrics.push(row);
    }

    let paths: Vec<PathBuf> = state.best.iter().map(|e| out.join(&e.file)).collect();
    let refs: Vec<&Path> = paths.iter().map(PathBuf::as_path).collect();
    let mut final_model = average_checkpoints(&refs)?;
    final_model.config.train.epochs = tc.epochs;
    save_model_atomic(&final_model, &out.join(FINAL_CHECKPOINT))?;
    Ok(TrainOutcome {
        model: final_model,
        metrics,
        finished: true,
    })
}

/// Reads `metrics.csv` rows back (header lines skipped).
pub fn read_metrics(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("epoch"))
        .map(|l| {
            l.split(',')
                .map(|x| x.parse::<f64>().map_err(|e| Error::Data(format!("metrics: {e}"))))
                .collect()
        })
        .collect()
}
