//! Error-rate scoring: Levenshtein alignment counts, per-language reports
//! with group averages, and relative change against a baseline.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Substitutions, deletions and insertions of one alignment.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditCounts {
    pub s: usize,
    pub d: usize,
    pub i: usize,
}

impl EditCounts {
    pub fn total(&self) -> usize {
        self.s + self.d + self.i
    }
}

/// Unit-cost Levenshtein alignment of `hyp` against `reference`. Among
/// optimal alignments the backtrace prefers, from the end, a diagonal step
/// (match or substitution), then an insertion, then a deletion.
pub fn edit_distance<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut cost = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        cost[i * w] = i;
    }
    for j in 0..=m {
        cost[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = cost[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            let ins = cost[i * w + j - 1] + 1;
            let del = cost[(i - 1) * w + j] + 1;
            cost[i * w + j] = diag.min(ins).min(del);
        }
    }
    let mut out = EditCounts::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = cost[i * w + j];
        if i > 0 && j > 0 {
            let miss = usize::from(reference[i - 1] != hyp[j - 1]);
            if cost[(i - 1) * w + j - 1] + miss == here {
                out.s += miss;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && cost[i * w + j - 1] + 1 == here {
            out.i += 1;
            j -= 1;
        } else {
            out.d += 1;
            i -= 1;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    /// Whitespace-separated words.
    Word,
    /// Unicode scalar values, whitespace dropped.
    Char,
}

impl std::str::FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(Self::Word),
            "char" => Ok(Self::Char),
            other => Err(Error::config(format!("unknown unit {other:?}; expected word or char"))),
        }
    }
}

pub fn split_units(text: &str, unit: Unit) -> Vec<String> {
    match unit {
        Unit::Word => text.split_whitespace().map(str::to_string).collect(),
        Unit::Char => text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect(),
    }
}

/// Text of one utterance, either reference or hypothesis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub language: String,
    pub text: String,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MissingPolicy {
    /// Score a missing hypothesis as empty (all deletions) and log a warning.
    #[default]
    Warn,
    Error,
}

#[derive(Clone, Debug, Default)]
pub struct ScoreOptions {
    /// Per-language unit; languages not listed use words.
    pub units: HashMap<String, Unit>,
    pub missing: MissingPolicy,
    /// Named language groups, each reported as an unweighted average.
    pub groups: Vec<(String, Vec<String>)>,
    /// Also report the average without these languages.
    pub exclude: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageScore {
    pub language: String,
    pub s: usize,
    pub d: usize,
    pub i: usize,
    pub n: usize,
    pub rate: f64,
}

impl LanguageScore {
    fn new(language: String, c: EditCounts, n: usize) -> Self {
        let rate = if n == 0 { 0.0 } else { c.total() as f64 / n as f64 };
        Self {
            language,
            s: c.s,
            d: c.d,
            i: c.i,
            n,
            rate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    /// Sorted by language name.
    pub languages: Vec<LanguageScore>,
    /// `avg`, `avg_<group>`, `avg_wo_<language>`, in that order.
    pub aggregates: Vec<(String, f64)>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl WerReport {
    pub fn rate(&self, language: &str) -> Option<f64> {
        self.languages.iter().find(|l| l.language == language).map(|l| l.rate)
    }

    pub fn aggregate(&self, name: &str) -> Option<f64> {
        self.aggregates.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn avg(&self) -> f64 {
        mean(self.languages.iter().map(|l| l.rate))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("language,S,D,I,N,rate\n");
        for l in &self.languages {
            writeln!(out, "{},{},{},{},{},{}", l.language, l.s, l.d, l.i, l.n, l.rate).expect("string write");
        }
        out
    }

    pub fn to_json(&self) -> String {
        let summary = serde_json::json!({
            "languages": self.languages,
            "aggregates": self.aggregates.iter().cloned().collect::<BTreeMap<_, _>>(),
        });
        serde_json::to_string_pretty(&summary).expect("report serialises")
    }
}

/// Accumulates edit counts per language and adds group averages.
pub fn score_system(hyps: &[Transcript], refs: &[Transcript], opts: &ScoreOptions) -> Result<WerReport> {
    let by_id: HashMap<&str, &Transcript> = hyps.iter().map(|h| (h.id.as_str(), h)).collect();
    if by_id.len() != hyps.len() {
        return Err(Error::Data("duplicate hypothesis ids".into()));
    }
    let ref_ids: HashMap<&str, ()> = refs.iter().map(|r| (r.id.as_str(), ())).collect();
    if let Some(h) = hyps.iter().find(|h| !ref_ids.contains_key(h.id.as_str())) {
        return Err(Error::Data(format!("hypothesis {} has no reference", h.id)));
    }
    let mut acc: BTreeMap<String, (EditCounts, usize)> = BTreeMap::new();
    for r in refs {
        let unit = opts.units.get(&r.language).copied().unwrap_or(Unit::Word);
        let hyp_text = match by_id.get(r.id.as_str()) {
            Some(h) => h.text.as_str(),
            None => match opts.missing {
                MissingPolicy::Warn => {
                    log::warn!("no hypothesis for {}; scored as all deletions", r.id);
                    ""
                }
                MissingPolicy::Error => return Err(Error::Data(format!("no hypothesis for {}", r.id))),
            },
        };
        let rt = split_units(&r.text, unit);
        let c = edit_distance(&rt, &split_units(hyp_text, unit));
        let e = acc.entry(r.language.clone()).or_default();
        e.0.s += c.s;
        e.0.d += c.d;
        e.0.i += c.i;
        e.1 += rt.len();
    }
    let languages: Vec<LanguageScore> = acc
        .into_iter()
        .map(|(lang, (c, n))| LanguageScore::new(lang, c, n))
        .collect();
    let rate_of = |name: &str| languages.iter().find(|l| l.language == name).map(|l| l.rate);
    let mut aggregates = vec![("avg".to_string(), mean(languages.iter().map(|l| l.rate)))];
    for (name, members) in &opts.groups {
        let rates = members
            .iter()
            .map(|m| rate_of(m).ok_or_else(|| Error::config(format!("group {name}: unknown language {m}"))))
            .collect::<Result<Vec<_>>>()?;
        aggregates.push((format!("avg_{name}"), mean(rates.into_iter())));
    }
    for ex in &opts.exclude {
        if rate_of(ex).is_none() {
            return Err(Error::config(format!("cannot exclude unknown language {ex}")));
        }
        let v = mean(languages.iter().filter(|l| &l.language != ex).map(|l| l.rate));
        aggregates.push((format!("avg_wo_{ex}"), v));
    }
    Ok(WerReport { languages, aggregates })
}

/// `100 (system - baseline) / baseline`; `None` when the baseline is 0.
pub fn relative_change(system: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (system - baseline) / baseline)
}

/// Per-language relative change plus the `avg` aggregate.
pub fn relative_wer(system: &WerReport, baseline: &WerReport) -> Result<Vec<(String, Option<f64>)>> {
    let names = |r: &WerReport| r.languages.iter().map(|l| l.language.clone()).collect::<Vec<_>>();
    if names(system) != names(baseline) {
        return Err(Error::Data("reports cover different languages".into()));
    }
    let mut out: Vec<(String, Option<f64>)> = system
        .languages
        .iter()
        .zip(&baseline.languages)
        .map(|(s, b)| (s.language.clone(), relative_change(s.rate, b.rate)))
        .collect();
    out.push(("avg".into(), relative_change(system.avg(), baseline.avg())));
    Ok(out)
}

/// Parses `name=a,b;other=c` into groups.
pub fn parse_groups(spec: &str) -> Result<Vec<(String, Vec<String>)>> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|part| {
            let (name, members) = part
                .split_once('=')
                .ok_or_else(|| Error::config(format!("group {part:?} must look like name=lang,lang")))?;
            let members: Vec<String> = members
                .split(',')
                .map(|m| m.trim().to_string())
                .filter(|m| !m.is_empty())
                .collect();
            if members.is_empty() {
                return Err(Error::config(format!("group {name} is empty")));
            }
            Ok((name.trim().to_string(), members))
        })
        .collect()
}
