//! `lupet`: generate a synthetic corpus, train, decode, score and inspect.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or
//! usage.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use lupet_core::data::{generate_corpus, read_jsonl, write_jsonl, Corpus, CorpusSpec, Split, Utterance};
use lupet_core::decode::{
    codebook_usage, decode_utterances, lid_confusion, reference_transcripts, router_stats, threads_from_env, DecodeMode,
    HypRecord,
};
use lupet_core::eval::{parse_groups, score_system, MissingPolicy, ScoreOptions, Unit};
use lupet_core::model::{load_checkpoint, LupetConfig};
use lupet_core::train::{train, TrainOptions};

#[derive(Parser)]
#[command(name = "lupet", version, about = "Multilingual speech recognition on synthetic corpora")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multilingual corpus.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of languages (weights default to 10:3:1 for three).
        #[arg(long)]
        languages: Option<usize>,
        /// Relative amount of training data per language, e.g. 10,3,1.
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
        /// Utterance counts train,dev,test.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
        #[arg(long)]
        d_feat: Option<usize>,
        #[arg(long)]
        inventory: Option<usize>,
        #[arg(long)]
        overlap: Option<f64>,
    },
    /// Train a model and keep the averaged best checkpoints.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML configuration; its fields override the preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "lupet")]
        preset: String,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Training language (name or index) of a monolingual model.
        #[arg(long)]
        language: Option<String>,
        /// Continue an interrupted run in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Decode a split into a hypothesis manifest (JSONL).
    Decode {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value_t = Mode::CtcGreedy)]
        mode: Mode,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score hypotheses against references; writes `<out>.csv` and `<out>.json`.
    Score {
        #[arg(long)]
        hyp: PathBuf,
        /// Corpus directory or manifest.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Language groups, e.g. `high=latn;low=grek,cyrl`.
        #[arg(long)]
        groups: Option<String>,
        /// Also average without these languages.
        #[arg(long, value_delimiter = ',')]
        exclude: Vec<String>,
        /// Languages scored by characters instead of words.
        #[arg(long, value_delimiter = ',')]
        char_languages: Vec<String>,
        /// Fail on missing hypotheses instead of counting deletions.
        #[arg(long)]
        strict: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write model diagnostics as CSV.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        what: What,
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    #[value(name = "ctc_greedy")]
    CtcGreedy,
    #[value(name = "attention_beam")]
    AttentionBeam,
}

#[derive(Clone, Copy, ValueEnum)]
enum What {
    /// Code utilisation over masked subframes.
    Codebook,
    /// Expert selection frequency by true language.
    Router,
    /// Frame-level language confusion matrix.
    Lid,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.chain().any(|c| {
                c.downcast_ref::<lupet_core::Error>().is_some_and(lupet_core::Error::is_config)
                    || c.downcast_ref::<UsageError>().is_some()
            });
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}

#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    s.parse::<Split>().map_err(|_| usage(format!("unknown split {s:?}; expected train, dev or test")))
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            out,
            seed,
            languages,
            weights,
            counts,
            d_feat,
            inventory,
            overlap,
        } => {
            let mut spec = CorpusSpec {
                seed,
                ..CorpusSpec::default()
            };
            match (languages, weights) {
                (_, Some(w)) => {
                    if languages.is_some_and(|n| n != w.len()) {
                        return Err(usage("--languages disagrees with the number of --weights"));
                    }
                    spec.weights = w;
                }
                (Some(n), None) if n != spec.weights.len() => spec.weights = vec![1.0; n],
                _ => {}
            }
            if let Some(c) = counts {
                let [train, dev, test] = c[..] else {
                    return Err(usage("--counts takes train,dev,test"));
                };
                (spec.train, spec.dev, spec.test) = (train, dev, test);
            }
            if let Some(d) = d_feat {
                spec.d_feat = d;
            }
            if let Some(i) = inventory {
                spec.inventory_size = i;
            }
            if let Some(o) = overlap {
                spec.overlap = o;
            }
            let corpus = generate_corpus(&spec)?;
            corpus.save(&out)?;
            log::info!("wrote {} utterances to {}", corpus.utterances.len(), out.display());
        }
        Command::Train {
            data,
            out,
            config,
            preset,
            epochs,
            seed,
            language,
            resume,
        } => {
            let corpus = load_corpus(&data)?;
            let mut cfg = LupetConfig::preset(&preset)?;
            if let Some(path) = config {
                let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
                cfg = cfg.overlay_toml(&text)?;
            }
            let vocab = corpus.vocab()?;
            cfg = cfg.with_corpus(corpus.info.d_feat, vocab.len(), corpus.info.n_languages(), corpus.info.n_ipa());
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(l) = language {
                let names = corpus.info.language_names();
                let lid = names
                    .iter()
                    .position(|n| *n == l)
                    .or_else(|| l.parse::<usize>().ok())
                    .ok_or_else(|| usage(format!("unknown language {l:?}; corpus has {}", names.join(", "))))?;
                cfg.language = Some(lid);
            }
            cfg.validate()?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("config.toml"), cfg.to_toml())?;
            let opts = TrainOptions {
                resume,
                stop_after: None,
                threads: threads_from_env()?,
            };
            let outcome = train(cfg, &corpus, &out, &opts)?;
            if let Some(last) = outcome.metrics.last() {
                log::info!("finished at epoch {} with dev WER {:.4}", last.epoch, last.dev_wer);
            }
        }
        Command::Decode {
            checkpoint,
            data,
            split,
            mode,
            beam,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let split = parse_split(&split)?;
            let utts: Vec<&Utterance> = corpus.split(split);
            let mode = match mode {
                Mode::CtcGreedy => DecodeMode::CtcGreedy,
                Mode::AttentionBeam => DecodeMode::AttentionBeam,
            };
            let beam = beam.unwrap_or(model.config.train.beam);
            let hyps = decode_utterances(
                &model,
                &utts,
                &corpus.vocab()?,
                &corpus.info.language_names(),
                mode,
                beam,
                threads_from_env()?,
            )?;
            write_jsonl(&out, &hyps)?;
            let empty = hyps.iter().filter(|h| h.text.is_empty()).count();
            log::info!("decoded {} utterances ({empty} empty) to {}", hyps.len(), out.display());
        }
        Command::Score {
            hyp,
            reference,
            split,
            groups,
            exclude,
            char_languages,
            strict,
            out,
        } => {
            let hyps: Vec<HypRecord> = read_jsonl(&hyp)?;
            let corpus = load_corpus(&reference)?;
            let names = corpus.info.language_names();
            let split = parse_split(&split)?;
            let refs = reference_transcripts(&corpus.split(split), &names);
            let opts = ScoreOptions {
                units: char_languages.into_iter().map(|l| (l, Unit::Char)).collect::<HashMap<_, _>>(),
                missing: if strict { MissingPolicy::Error } else { MissingPolicy::Warn },
                groups: match groups {
                    Some(g) => parse_groups(&g)?,
                    None => Vec::new(),
                },
                exclude,
            };
            let hyps: Vec<_> = hyps.iter().map(HypRecord::transcript).collect();
            let report = score_system(&hyps, &refs, &opts)?;
            fs::write(out.with_extension("csv"), report.to_csv())?;
            fs::write(out.with_extension("json"), report.to_json())?;
            for l in &report.languages {
                println!("{}\t{:.2}%", l.language, 100.0 * l.rate);
            }
            println!("avg\t{:.2}%", 100.0 * report.avg());
        }
        Command::Inspect {
            checkpoint,
            data,
            what,
            split,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let corpus = load_corpus(&data)?;
            let utts = corpus.split(parse_split(&split)?);
            if utts.is_empty() {
                bail!("split has no utterances");
            }
            let names = corpus.info.language_names();
            let mut csv = String::new();
            match what {
                What::Codebook => {
                    let hist = codebook_usage(&model, &utts, model.config.mlm_start_epoch)?;
                    let total: usize = hist.iter().sum();
                    csv.push_str("code,count,fraction\n");
                    for (k, c) in hist.iter().enumerate() {
                        let f = if total == 0 { 0.0 } else { *c as f64 / total as f64 };
                        writeln!(csv, "{k},{c},{f}")?;
                    }
                }
                What::Router => {
                    let stats = router_stats(&model, &utts)?;
                    let n_exp = model.config.n_experts;
                    csv.push_str("layer,language");
                    for e in 0..n_exp {
                        write!(csv, ",expert{e}")?;
                    }
                    csv.push('\n');
                    for (layer, rows) in stats.iter().enumerate() {
                        for (lid, row) in rows.iter().enumerate() {
                            write!(csv, "{layer},{}", names[lid])?;
                            for f in row {
                                write!(csv, ",{f}")?;
                            }
                            csv.push('\n');
                        }
                    }
                }
                What::Lid => {
                    let conf = lid_confusion(&model, &utts)?;
                    csv.push_str("true");
                    for n in &names {
                        write!(csv, ",{n}")?;
                    }
                    csv.push('\n');
                    for (lid, row) in conf.iter().enumerate() {
                        write!(csv, "{}", names[lid])?;
                        for c in row {
                            write!(csv, ",{c}")?;
                        }
                        csv.push('\n');
                    }
                }
            }
            fs::write(&out, csv)?;
        }
    }
    Ok(())
}
