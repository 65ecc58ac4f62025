//! Corpus-level decoding and model diagnostics.

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctc::{argmax, BLANK};
use crate::data::{Utterance, Vocab};
use crate::eval::{score_system, ScoreOptions, Transcript, WerReport};
use crate::model::LupetModel;
use crate::quantizer::{apply_mask, code_histogram, masked_subframes};
use crate::{derive_seed, Error, Result};

pub const THREADS_ENV: &str = "LUPET_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    CtcGreedy,
    AttentionBeam,
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ctc_greedy" => Ok(Self::CtcGreedy),
            "attention_beam" => Ok(Self::AttentionBeam),
            other => Err(Error::config(format!(
                "unknown decode mode {other:?}; expected ctc_greedy or attention_beam"
            ))),
        }
    }
}

/// One line of a hypothesis manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypRecord {
    pub id: String,
    pub lid: usize,
    pub language: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
}

impl HypRecord {
    pub fn transcript(&self) -> Transcript {
        Transcript {
            id: self.id.clone(),
            language: self.language.clone(),
            text: self.text.clone(),
        }
    }
}

/// Worker count from `LUPET_THREADS`, defaulting to the available cores.
pub fn threads_from_env() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

/// Runs `f` over `items` on up to `threads` workers; output order follows
/// input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("decode worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Decodes every utterance; the result is sorted by utterance id.
pub fn decode_utterances(
    model: &LupetModel,
    utts: &[&Utterance],
    vocab: &Vocab,
    languages: &[String],
    mode: DecodeMode,
    beam: usize,
    threads: usize,
) -> Result<Vec<HypRecord>> {
    if beam == 0 {
        return Err(Error::config("beam must be at least 1"));
    }
    let mut sorted: Vec<&Utterance> = utts.to_vec();
    sorted.sort_by(|a, b| a.id.cmp(&b.id));
    parallel_map(&sorted, threads, |u| {
        let (tokens, truncated) = match mode {
            DecodeMode::CtcGreedy => (model.decode_ctc_greedy(&u.features, u.lid)?, false),
            DecodeMode::AttentionBeam => {
                let h = model.decode_attention(&u.features, u.lid, beam)?;
                (h.tokens, h.truncated)
            }
        };
        Ok(HypRecord {
            id: u.id.clone(),
            lid: u.lid,
            language: languages.get(u.lid).cloned().unwrap_or_else(|| u.lid.to_string()),
            text: vocab.detokenize(&tokens),
            truncated,
        })
    })
}

pub fn reference_transcripts(utts: &[&Utterance], languages: &[String]) -> Vec<Transcript> {
    utts.iter()
        .map(|u| Transcript {
            id: u.id.clone(),
            language: languages.get(u.lid).cloned().unwrap_or_else(|| u.lid.to_string()),
            text: u.text.clone(),
        })
        .collect()
}

/// Word error report of CTC greedy decoding.
pub fn ctc_wer(
    model: &LupetModel,
    utts: &[&Utterance],
    vocab: &Vocab,
    languages: &[String],
    threads: usize,
) -> Result<WerReport> {
    let hyps = decode_utterances(model, utts, vocab, languages, DecodeMode::CtcGreedy, 1, threads)?;
    let hyps: Vec<Transcript> = hyps.iter().map(HypRecord::transcript).collect();
    score_system(&hyps, &reference_transcripts(utts, languages), &ScoreOptions::default())
}

/// Frame-level language confusion `[true][predicted]` of the LID head.
/// Each frame is assigned its most likely language, ignoring the blank.
pub fn lid_confusion(model: &LupetModel, utts: &[&Utterance]) -> Result<Vec<Vec<usize>>> {
    let n = model.config.n_lid;
    let mut conf = vec![vec![0usize; n]; n];
    for u in utts {
        let enc = model.encode(&u.features, u.lid)?;
        let z = enc
            .lid_logits
            .ok_or_else(|| Error::config("model has no language-identification head"))?;
        for t in 0..z.rows() {
            let row = z.row(t);
            let pred = argmax(&row[BLANK + 1..]);
            conf[u.lid][pred] += 1;
        }
    }
    Ok(conf)
}

pub fn lid_frame_accuracy(model: &LupetModel, utts: &[&Utterance]) -> Result<f64> {
    let conf = lid_confusion(model, utts)?;
    let total: usize = conf.iter().flatten().sum();
    let right: usize = (0..conf.len()).map(|i| conf[i][i]).sum();
    Ok(right as f64 / total.max(1) as f64)
}

/// Expert selection frequencies `[layer][lid][expert]`; both top-2 slots
/// count, and each row is normalised to sum to one.
pub fn router_stats(model: &LupetModel, utts: &[&Utterance]) -> Result<Vec<Vec<Vec<f64>>>> {
    let n_layers = model.n_moe_layers();
    if n_layers == 0 {
        return Err(Error::config("model has no mixture-of-experts layers"));
    }
    let (n_lid, n_exp) = (model.config.n_lid, model.config.n_experts);
    let mut counts = vec![vec![vec![0usize; n_exp]; n_lid]; n_layers];
    for u in utts {
        let enc = model.encode(&u.features, u.lid)?;
        for (layer, r) in enc.routings.iter().enumerate() {
            for pair in &r.experts {
                for &e in pair {
                    counts[layer][u.lid][e] += 1;
                }
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|layer| {
            layer
                .into_iter()
                .map(|row| {
                    let s: usize = row.iter().sum();
                    row.iter().map(|&c| if s == 0 { 0.0 } else { c as f64 / s as f64 }).collect()
                })
                .collect()
        })
        .collect())
}

/// Code histogram over the masked subframes of `epoch`'s training masks.
pub fn codebook_usage(model: &LupetModel, utts: &[&Utterance], epoch: usize) -> Result<Vec<usize>> {
    let q = model
        .quantizer()
        .ok_or_else(|| Error::config("model has no unit quantizer"))?;
    let mut hist = vec![0usize; q.n_codes()];
    for u in utts {
        let seed = derive_seed(model.config.seed, &format!("mask/{}", u.id), epoch as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (_, masked) = apply_mask(&u.features, &model.config.mask, &mut rng)?;
        let labels = q.quantize(&u.features)?;
        let idx = masked_subframes(&masked, labels.len());
        let picked: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        for (h, c) in hist.iter_mut().zip(code_histogram(&picked, q.n_codes())) {
            *h += c;
        }
    }
    Ok(hist)
}
