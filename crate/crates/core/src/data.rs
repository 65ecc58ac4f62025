//! Synthetic multilingual corpus, character vocabulary, manifest and
//! feature-file I/O, and batching.
//!
//! Every language draws its phonemes from a universal IPA set: a block shared
//! by all languages plus a block of its own. A phoneme sounds the same in
//! every language (one prototype vector per IPA symbol) but is written with a
//! language-specific character, so the spoken language is recoverable from
//! the text and, through the unique phonemes, from the audio. Words are
//! separated by silence, which is written as a space.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;
use crate::{derive_seed, Error, Result};

pub const BLANK: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPACE: usize = 4;

const SPECIALS: [&str; 4] = ["<blank>", "<sos>", "<eos>", "<unk>"];

/// Characters rendered for `<unk>` when detokenizing.
pub const UNK_CHAR: char = '\u{FFFD}';

const IPA: [&str; 64] = [
    "p", "b", "t", "d", "k", "g", "m", "n", "ŋ", "f", "v", "s", "z", "ʃ", "ʒ", "h", "l", "r", "j", "w", "i", "e",
    "a", "o", "u", "ɛ", "ɔ", "ə", "ɪ", "ʊ", "y", "ø", "æ", "ɑ", "θ", "ð", "x", "ɣ", "ʔ", "ts", "tʃ", "dʒ", "ɲ", "ʎ",
    "ɾ", "ʀ", "χ", "ç", "β", "ɸ", "ɬ", "ɹ", "ɨ", "ʉ", "ɯ", "ɤ", "œ", "ɒ", "ʌ", "ɐ", "c", "q", "ɟ", "ɖ",
];

/// Writing systems available to synthetic languages: name and the first
/// code point of a contiguous run of letters.
const SCRIPTS: [(&str, u32, usize); 10] = [
    ("latn", 0x61, 26),
    ("grek", 0x3B1, 17),
    ("cyrl", 0x430, 32),
    ("armn", 0x561, 38),
    ("geor", 0x10D0, 33),
    ("hebr", 0x5D0, 27),
    ("deva", 0x915, 37),
    ("thai", 0xE01, 46),
    ("hira", 0x3042, 30),
    ("hang", 0x3131, 30),
];

fn script_chars(script: usize) -> Vec<char> {
    let (_, start, n) = SCRIPTS[script];
    (start..start + n as u32).filter_map(char::from_u32).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageSpec {
    pub lid: usize,
    pub name: String,
    /// IPA ids (1-based into the corpus symbol table).
    pub phonemes: Vec<usize>,
    /// Character for each entry of `phonemes`.
    pub graphemes: Vec<char>,
    pub hours_weight: f64,
    pub prototype_seed: u64,
}

impl LanguageSpec {
    pub fn grapheme_of(&self, ipa: usize) -> Option<char> {
        self.phonemes.iter().position(|&p| p == ipa).map(|k| self.graphemes[k])
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub weights: Vec<f64>,
    pub inventory_size: usize,
    pub overlap: f64,
    pub d_feat: usize,
    pub noise_std: f64,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub phonemes_per_utt: (usize, usize),
    pub word_len: (usize, usize),
    pub frames_per_phoneme: (usize, usize),
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            weights: vec![10.0, 3.0, 1.0],
            inventory_size: 10,
            overlap: 0.5,
            d_feat: 16,
            noise_std: 0.1,
            train: 1400,
            dev: 150,
            test: 150,
            phonemes_per_utt: (3, 10),
            word_len: (2, 4),
            frames_per_phoneme: (8, 16),
        }
    }
}

/// Corpus-level metadata stored next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub seed: u64,
    pub d_feat: usize,
    pub ipa_symbols: Vec<String>,
    pub languages: Vec<LanguageSpec>,
    pub vocab: Vec<String>,
}

impl CorpusInfo {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::from_symbols(self.vocab.clone())
    }

    pub fn n_languages(&self) -> usize {
        self.languages.len()
    }

    pub fn n_ipa(&self) -> usize {
        self.ipa_symbols.len()
    }

    pub fn language_names(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.name.clone()).collect()
    }

    pub fn ipa_ids(&self, ipa: &str) -> Result<Vec<usize>> {
        ipa.split_whitespace()
            .map(|s| {
                self.ipa_symbols
                    .iter()
                    .position(|x| x == s)
                    .map(|i| i + 1)
                    .ok_or_else(|| Error::Data(format!("unknown IPA symbol {s:?}")))
            })
            .collect()
    }

    pub fn ipa_string(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.ipa_symbols[i - 1].as_str()).collect::<Vec<_>>().join(" ")
    }
}

/// Shared character vocabulary: four specials, the word separator, then every
/// language's graphemes.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    symbols: Vec<String>,
    index: HashMap<char, usize>,
}

impl Vocab {
    pub fn from_languages(langs: &[LanguageSpec]) -> Self {
        let mut symbols: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        symbols.push(" ".into());
        for l in langs {
            symbols.extend(l.graphemes.iter().map(|c| c.to_string()));
        }
        Self::from_symbols(symbols).expect("generated vocabulary is well formed")
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() <= SPACE || symbols[..4].iter().zip(SPECIALS).any(|(a, b)| a != b) || symbols[SPACE] != " " {
            return Err(Error::Data("vocabulary must start with the four specials and the space".into()));
        }
        let mut index = HashMap::new();
        for (i, s) in symbols.iter().enumerate().skip(SPACE) {
            let mut chars = s.chars();
            let (Some(c), None) = (chars.next(), chars.next()) else {
                return Err(Error::Data(format!("vocabulary entry {s:?} is not a single character")));
            };
            if index.insert(c, i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary character {c:?}")));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    /// Character ids; unknown characters map to `<unk>` with a warning.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.chars()
            .map(|c| match self.index.get(&c) {
                Some(&i) => i,
                None => {
                    log::warn!("character {c:?} not in vocabulary");
                    UNK
                }
            })
            .collect()
    }

    /// Text of `ids`; blank, sos and eos are dropped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter_map(|&i| match i {
                BLANK | SOS | EOS => None,
                UNK => Some(UNK_CHAR),
                i if i < self.symbols.len() => self.symbols[i].chars().next(),
                _ => Some(UNK_CHAR),
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub lid: usize,
    pub text: String,
    pub tokens: Vec<usize>,
    pub ipa: Vec<usize>,
    pub features: Tensor,
    pub split: Split,
}

impl Utterance {
    pub fn n_frames(&self) -> usize {
        self.features.rows()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub info: CorpusInfo,
    pub utterances: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&Utterance> {
        self.utterances.iter().filter(|u| u.split == split).collect()
    }

    pub fn vocab(&self) -> Result<Vocab> {
        self.info.vocab()
    }

    /// Utterances of one language, for monolingual training.
    pub fn only_language(&self, lid: usize) -> Result<Corpus> {
        if lid >= self.info.n_languages() {
            return Err(Error::config(format!(
                "language {lid} not in corpus of {} languages",
                self.info.n_languages()
            )));
        }
        Ok(Corpus {
            info: self.info.clone(),
            utterances: self.utterances.iter().filter(|u| u.lid == lid).cloned().collect(),
        })
    }
}

/// Splits `total` proportionally to `weights` by largest remainders; ties go
/// to the lower index.
pub fn proportional_counts(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let rest = total - counts.iter().sum::<usize>();
    for &i in order.iter().take(rest) {
        counts[i] += 1;
    }
    counts
}

/// Language specifications and the universal IPA table they index.
pub fn build_languages(spec: &CorpusSpec) -> Result<(Vec<LanguageSpec>, Vec<String>)> {
    let n = spec.weights.len();
    if n < 2 {
        return Err(Error::config(format!("need at least 2 languages, got {n}")));
    }
    if n > SCRIPTS.len() {
        return Err(Error::config(format!("at most {} languages are supported", SCRIPTS.len())));
    }
    if spec.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::config("language weights must be positive"));
    }
    if spec.inventory_size < 2 {
        return Err(Error::config("phoneme inventory must hold at least 2 phonemes"));
    }
    if !(0.0..=1.0).contains(&spec.overlap) {
        return Err(Error::config(format!("overlap {} outside [0, 1]", spec.overlap)));
    }
    let shared_f = spec.overlap * spec.inventory_size as f64;
    if (shared_f - shared_f.round()).abs() > 1e-9 {
        return Err(Error::config(format!(
            "overlap {} of an inventory of {} is not a whole number of phonemes",
            spec.overlap, spec.inventory_size
        )));
    }
    let shared = shared_f.round() as usize;
    let unique = spec.inventory_size - shared;
    let universal = shared + n * unique;
    if universal > IPA.len() {
        return Err(Error::config(format!(
            "{universal} distinct phonemes needed, only {} available",
            IPA.len()
        )));
    }
    let min_script = (0..n).map(|i| SCRIPTS[i].2).min().unwrap_or(0);
    if spec.inventory_size > min_script {
        return Err(Error::config(format!(
            "inventory of {} exceeds the smallest alphabet ({min_script})",
            spec.inventory_size
        )));
    }
    let symbols = IPA[..universal].iter().map(|s| s.to_string()).collect();
    let langs = (0..n)
        .map(|l| {
            let mut phonemes: Vec<usize> = (1..=shared).collect();
            let start = shared + l * unique;
            phonemes.extend(start + 1..=start + unique);
            LanguageSpec {
                lid: l,
                name: SCRIPTS[l].0.to_string(),
                graphemes: script_chars(l)[..spec.inventory_size].to_vec(),
                phonemes,
                hours_weight: spec.weights[l],
                prototype_seed: spec.seed,
            }
        })
        .collect();
    Ok((langs, symbols))
}

/// Prototype frame of every IPA symbol; index 0 is silence.
pub fn prototypes(seed: u64, n_ipa: usize, d_feat: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; d_feat]];
    for id in 1..=n_ipa {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "prototype", id as u64));
        out.push(Tensor::randn(&[d_feat], 1.0, &mut rng).into_data());
    }
    out
}

fn sample_words<R: Rng>(rng: &mut R, spec: &CorpusSpec, inventory: usize) -> Vec<Vec<usize>> {
    let (lo, hi) = spec.phonemes_per_utt;
    let (wlo, whi) = spec.word_len;
    let n = rng.random_range(lo..=hi);
    let mut lens = Vec::new();
    let mut remaining = n;
    while remaining > whi {
        let max = whi.min(remaining.saturating_sub(wlo)).max(wlo);
        let l = rng.random_range(wlo..=max);
        lens.push(l);
        remaining -= l;
    }
    if remaining > 0 {
        lens.push(remaining);
    }
    lens.into_iter()
        .map(|len| {
            let mut w: Vec<usize> = Vec::with_capacity(len);
            while w.len() < len {
                let k = rng.random_range(0..inventory);
                // Adjacent repeats would be indistinguishable in the audio.
                if w.last() != Some(&k) {
                    w.push(k);
                }
            }
            w
        })
        .collect()
}

fn render<R: Rng>(
    rng: &mut R,
    spec: &CorpusSpec,
    protos: &[Vec<f64>],
    segments: &[usize],
) -> Result<Tensor> {
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let (flo, fhi) = spec.frames_per_phoneme;
    let mut data = Vec::new();
    let mut frames = 0;
    for &seg in segments {
        let dur = rng.random_range(flo..=fhi);
        for _ in 0..dur {
            for &p in &protos[seg] {
                data.push((p + noise.sample(rng)) as f32 as f64);
            }
        }
        frames += dur;
    }
    Ok(Tensor::new(vec![frames, spec.d_feat], data)?)
}

/// Deterministic synthetic corpus.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    if spec.d_feat == 0 || spec.noise_std < 0.0 {
        return Err(Error::config("feature dimension must be positive and noise non-negative"));
    }
    if spec.phonemes_per_utt.0 == 0 || spec.phonemes_per_utt.0 > spec.phonemes_per_utt.1 {
        return Err(Error::config("invalid phonemes-per-utterance range"));
    }
    if spec.word_len.0 == 0 || spec.word_len.0 > spec.word_len.1 {
        return Err(Error::config("invalid word length range"));
    }
    if spec.frames_per_phoneme.0 == 0 || spec.frames_per_phoneme.0 > spec.frames_per_phoneme.1 {
        return Err(Error::config("invalid frames-per-phoneme range"));
    }
    let (langs, symbols) = build_languages(spec)?;
    let vocab = Vocab::from_languages(&langs);
    let protos = prototypes(spec.seed, symbols.len(), spec.d_feat);
    let n = langs.len();
    let equal = vec![1.0; n];
    let mut utterances = Vec::new();
    for split in Split::ALL {
        let (total, w) = match split {
            Split::Train => (spec.train, &spec.weights),
            Split::Dev => (spec.dev, &equal),
            Split::Test => (spec.test, &equal),
        };
        for (lang, count) in langs.iter().zip(proportional_counts(total, w)) {
            for i in 0..count {
                let tag = format!("utt/{}/{}", split.as_str(), lang.lid);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &tag, i as u64));
                let words = sample_words(&mut rng, spec, spec.inventory_size);
                let mut segments = Vec::new();
                let mut text = String::new();
                let mut ipa = Vec::new();
                for (wi, w) in words.iter().enumerate() {
                    if wi > 0 {
                        segments.push(0);
                        text.push(' ');
                    }
                    for &k in w {
                        segments.push(lang.phonemes[k]);
                        ipa.push(lang.phonemes[k]);
                        text.push(lang.graphemes[k]);
                    }
                }
                let features = render(&mut rng, spec, &protos, &segments)?;
                utterances.push(Utterance {
                    id: format!("{}-{}-{i:05}", split.as_str(), lang.name),
                    lid: lang.lid,
                    tokens: vocab.tokenize(&text),
                    text,
                    ipa,
                    features,
                    split,
                });
            }
        }
    }
    utterances.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(Corpus {
        info: CorpusInfo {
            seed: spec.seed,
            d_feat: spec.d_feat,
            ipa_symbols: symbols,
            languages: langs,
            vocab: vocab.symbols().to_vec(),
        },
        utterances,
    })
}

const LUPF_MAGIC: &[u8; 4] = b"LUPF";

/// Feature file: magic, `T` and `d_feat` as u32, then `T * d_feat` f32
/// values, all little-endian.
pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::Data(format!("features must be [T, d], got {:?}", features.shape())));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(LUPF_MAGIC)?;
    w.write_all(&(features.rows() as u32).to_le_bytes())?;
    w.write_all(&(features.last_dim() as u32).to_le_bytes())?;
    for &v in features.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 12 || &bytes[..4] != LUPF_MAGIC {
        return Err(Error::Data(format!("{}: not a feature file", path.display())));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[12..];
    if body.len() != t * d * 4 {
        return Err(Error::Data(format!(
            "{}: header says {t}x{d} but body holds {} bytes",
            path.display(),
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Tensor::new(vec![t, d], data)?)
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub lid: usize,
    pub text: String,
    pub ipa: String,
    pub feature_path: String,
    pub n_frames: usize,
    pub split: Split,
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "corpus.json";
const FEATURE_DIR: &str = "feats";

impl Corpus {
    pub fn records(&self) -> Vec<ManifestRecord> {
        self.utterances
            .iter()
            .map(|u| ManifestRecord {
                id: u.id.clone(),
                lid: u.lid,
                text: u.text.clone(),
                ipa: self.info.ipa_string(&u.ipa),
                feature_path: format!("{FEATURE_DIR}/{}.lupf", u.id),
                n_frames: u.n_frames(),
                split: u.split,
            })
            .collect()
    }

    /// Writes `manifest.jsonl`, `corpus.json` and one feature file per
    /// utterance under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(FEATURE_DIR))?;
        let records = self.records();
        for (u, r) in self.utterances.iter().zip(&records) {
            write_features(&dir.join(&r.feature_path), &u.features)?;
        }
        write_jsonl(&dir.join(MANIFEST_FILE), &records)?;
        let info = serde_json::to_string_pretty(&self.info)?;
        std::fs::write(dir.join(INFO_FILE), info + "\n")?;
        Ok(())
    }

    /// Loads a corpus from a directory or from a manifest path whose
    /// directory also holds `corpus.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, manifest) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
            (dir, path.to_path_buf())
        };
        let info_path = dir.join(INFO_FILE);
        let info: CorpusInfo = serde_json::from_str(
            &std::fs::read_to_string(&info_path)
                .map_err(|e| Error::Data(format!("{}: {e}", info_path.display())))?,
        )?;
        let vocab = info.vocab()?;
        let records: Vec<ManifestRecord> = read_jsonl(&manifest)?;
        let mut utterances = Vec::with_capacity(records.len());
        for r in records {
            let features = read_features(&dir.join(&r.feature_path))?;
            if features.rows() != r.n_frames || features.last_dim() != info.d_feat {
                return Err(Error::Data(format!(
                    "{}: features {:?} disagree with manifest ({} frames, d_feat {})",
                    r.id,
                    features.shape(),
                    r.n_frames,
                    info.d_feat
                )));
            }
            if r.lid >= info.n_languages() {
                return Err(Error::Data(format!("{}: unknown language {}", r.id, r.lid)));
            }
            utterances.push(Utterance {
                tokens: vocab.tokenize(&r.text),
                ipa: info.ipa_ids(&r.ipa)?,
                id: r.id,
                lid: r.lid,
                text: r.text,
                features,
                split: r.split,
            });
        }
        Ok(Self { info, utterances })
    }
}

/// Padded batch. Features are `[B, T_max, d_feat]`; frames at or past
/// `lengths[b]` are padding and never read by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<String>,
    pub lids: Vec<usize>,
    pub tokens: Vec<Vec<usize>>,
    pub ipa: Vec<Vec<usize>>,
    pub features: Tensor,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Unpadded features of item `b`.
    pub fn item_features(&self, b: usize) -> Tensor {
        let s = self.features.shape();
        let (t_max, d) = (s[1], s[2]);
        let start = b * t_max * d;
        Tensor::new(vec![self.lengths[b], d], self.features.data()[start..start + self.lengths[b] * d].to_vec())
            .expect("batch item shape")
    }
}

/// Pads `utts` to the longest one plus `extra_padding` frames.
pub fn collate(utts: &[&Utterance], extra_padding: usize) -> Result<Batch> {
    let d = utts.first().map(|u| u.features.last_dim()).unwrap_or(0);
    if utts.iter().any(|u| u.features.last_dim() != d) {
        return Err(Error::Data("utterances in a batch disagree on feature dimension".into()));
    }
    let t_max = utts.iter().map(|u| u.n_frames()).max().unwrap_or(0) + extra_padding;
    let mut data = vec![0.0; utts.len() * t_max * d];
    for (b, u) in utts.iter().enumerate() {
        let start = b * t_max * d;
        data[start..start + u.features.len()].copy_from_slice(u.features.data());
    }
    Ok(Batch {
        ids: utts.iter().map(|u| u.id.clone()).collect(),
        lids: utts.iter().map(|u| u.lid).collect(),
        tokens: utts.iter().map(|u| u.tokens.clone()).collect(),
        ipa: utts.iter().map(|u| u.ipa.clone()).collect(),
        features: Tensor::new(vec![utts.len(), t_max, d], data)?,
        lengths: utts.iter().map(|u| u.n_frames()).collect(),
    })
}

/// Shuffled visiting order for one epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "batches", epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Shuffled, padded batches covering every utterance once.
pub fn make_batches(utts: &[&Utterance], batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let order = epoch_order(utts.len(), seed, epoch);
    order
        .chunks(batch_size)
        .map(|c| collate(&c.iter().map(|&i| utts[i]).collect::<Vec<_>>(), 0))
        .collect()
}
