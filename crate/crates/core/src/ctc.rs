//! Connectionist temporal classification.
//!
//! Every CTC alphabet in this crate reserves column 0 for the blank symbol, so
//! label ids are column indices in `1..=V` of a `[T', V + 1]` log-prob matrix.
//! The loss runs the log-domain alpha recursion over the blank-interleaved
//! target; its gradient is the reverse-mode adjoint of that same recursion.

use crate::numerics::{Graph, NumericsError, Tensor, Var};

pub const BLANK: usize = 0;

/// Upper bound on the number of paths the brute-force oracle will enumerate.
pub const BRUTEFORCE_MAX_PATHS: u128 = 10_000_000;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CtcError {
    #[error("target needs at least {needed} frames but only {frames} are available")]
    Infeasible { frames: usize, needed: usize },
    #[error("label {label} is outside 1..{alphabet} (column 0 is the blank)")]
    Label { label: usize, alphabet: usize },
    #[error("frame {frame} probabilities sum to {sum}")]
    NotNormalized { frame: usize, sum: f64 },
    #[error("brute-force instance has {paths} paths, limit is {BRUTEFORCE_MAX_PATHS}")]
    TooLarge { paths: u128 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, CtcError>;

/// Log posteriors and a label sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcInput {
    pub log_probs: Tensor,
    pub targets: Vec<usize>,
}

impl CtcInput {
    pub fn new(log_probs: Tensor, targets: Vec<usize>) -> Result<Self> {
        let input = Self { log_probs, targets };
        input.validate()?;
        Ok(input)
    }

    /// Checks per-frame normalisation, label range and feasibility.
    pub fn validate(&self) -> Result<()> {
        let (t, a) = frames_and_alphabet(&self.log_probs)?;
        for f in 0..t {
            let sum: f64 = self.log_probs.row(f).iter().map(|v| v.exp()).sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(CtcError::NotNormalized { frame: f, sum });
            }
        }
        check_targets(&self.targets, a, t)
    }
}

fn frames_and_alphabet(lp: &Tensor) -> Result<(usize, usize)> {
    match lp.shape() {
        [t, a] => Ok((*t, *a)),
        s => Err(NumericsError::Rank {
            op: "ctc",
            expected: 2,
            shape: s.to_vec(),
        }
        .into()),
    }
}

/// Minimum number of frames a label sequence needs: one per label plus one
/// blank between each pair of equal neighbours.
pub fn min_frames(targets: &[usize]) -> usize {
    let repeats = targets.windows(2).filter(|w| w[0] == w[1]).count();
    targets.len() + repeats
}

/// Label range and frame feasibility.
pub fn check_targets(targets: &[usize], alphabet: usize, frames: usize) -> Result<()> {
    if let Some(&label) = targets.iter().find(|&&l| l == BLANK || l >= alphabet) {
        return Err(CtcError::Label { label, alphabet });
    }
    let needed = min_frames(targets).max(1);
    if frames < needed {
        return Err(CtcError::Infeasible { frames, needed });
    }
    Ok(())
}

fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
}

/// Blank-interleaved target `[∅, y1, ∅, y2, ..., ∅]`.
fn extend(targets: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * targets.len() + 1);
    ext.push(BLANK);
    for &y in targets {
        ext.push(y);
        ext.push(BLANK);
    }
    ext
}

/// Whether state `s` may be entered from `s - 2` (skipping a blank).
fn can_skip(ext: &[usize], s: usize) -> bool {
    s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2]
}

/// Log-alpha table `[T, S]` and the total log-likelihood.
fn alpha_table(lp: &Tensor, ext: &[usize]) -> (Vec<f64>, f64) {
    let t_len = lp.rows();
    let s_len = ext.len();
    let mut alpha = vec![f64::NEG_INFINITY; t_len * s_len];
    alpha[0] = lp.at(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp.at(0, ext[1]);
    }
    for t in 1..t_len {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        let row = lp.row(t);
        for s in 0..s_len {
            let stay = prev[s];
            let step = if s >= 1 { prev[s - 1] } else { f64::NEG_INFINITY };
            let skip = if can_skip(ext, s) { prev[s - 2] } else { f64::NEG_INFINITY };
            let reach = lse3(stay, step, skip);
            cur[s] = if reach == f64::NEG_INFINITY {
                reach
            } else {
                row[ext[s]] + reach
            };
        }
    }
    let last = &alpha[(t_len - 1) * s_len..];
    let ll = if s_len > 1 {
        lse2(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    };
    (alpha, ll)
}

/// Negative log-likelihood of `targets` under `log_probs: [T', V + 1]`
/// without recording a graph.
pub fn ctc_loss_value(log_probs: &Tensor, targets: &[usize]) -> Result<f64> {
    let (t, a) = frames_and_alphabet(log_probs)?;
    check_targets(targets, a, t)?;
    let ext = extend(targets);
    Ok(-alpha_table(log_probs, &ext).1)
}

/// Differentiable CTC loss. `log_probs` must be log-normalised per frame
/// (typically the output of `log_softmax`); the result is a `[1]` tensor.
pub fn ctc_loss(g: &Graph, log_probs: Var, targets: &[usize]) -> Result<Var> {
    let lp = g.value(log_probs);
    let (t_len, a) = frames_and_alphabet(&lp)?;
    check_targets(targets, a, t_len)?;
    let ext = extend(targets);
    let (alpha, ll) = alpha_table(&lp, &ext);
    let out = Tensor::scalar(-ll);
    Ok(g.custom_op(out, &[log_probs], move |grad, sink| {
        let Some(glp) = sink.slot(log_probs) else {
            return;
        };
        let s_len = ext.len();
        let up = grad.item();
        let mut adj = vec![0.0; t_len * s_len];
        let last = (t_len - 1) * s_len;
        adj[last + s_len - 1] = -up * (alpha[last + s_len - 1] - ll).exp();
        if s_len > 1 {
            adj[last + s_len - 2] = -up * (alpha[last + s_len - 2] - ll).exp();
        }
        for t in (0..t_len).rev() {
            for s in 0..s_len {
                let a_ts = adj[t * s_len + s];
                let al = alpha[t * s_len + s];
                if a_ts == 0.0 || al == f64::NEG_INFINITY {
                    continue;
                }
                let emit = lp.at(t, ext[s]);
                glp[t * a + ext[s]] += a_ts;
                if t == 0 {
                    continue;
                }
                // alpha[t][s] - emit is the log-sum over predecessors.
                let reach = al - emit;
                let prev = (t - 1) * s_len;
                adj[prev + s] += a_ts * (alpha[prev + s] - reach).exp();
                if s >= 1 {
                    adj[prev + s - 1] += a_ts * (alpha[prev + s - 1] - reach).exp();
                }
                if can_skip(&ext, s) {
                    adj[prev + s - 2] += a_ts * (alpha[prev + s - 2] - reach).exp();
                }
            }
        }
    }))
}

/// Removes adjacent repeats, then blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Exhaustive oracle: sums the probability of every length-`T'` path over
/// the full alphabet whose collapse equals `targets`.
pub fn ctc_loss_bruteforce(input: &CtcInput) -> Result<f64> {
    let lp = &input.log_probs;
    let (t, a) = frames_and_alphabet(lp)?;
    let paths = (a as u128).checked_pow(t as u32).unwrap_or(u128::MAX);
    if paths > BRUTEFORCE_MAX_PATHS {
        return Err(CtcError::TooLarge { paths });
    }
    if let Some(&label) = input.targets.iter().find(|&&l| l == BLANK || l >= a) {
        return Err(CtcError::Label { label, alphabet: a });
    }
    let mut valid = Vec::new();
    let mut path = vec![0usize; t];
    for code in 0..paths as u64 {
        let mut c = code;
        for slot in path.iter_mut().rev() {
            *slot = (c % a as u64) as usize;
            c /= a as u64;
        }
        if collapse(&path) == input.targets {
            let logp: f64 = path.iter().enumerate().map(|(f, &k)| lp.at(f, k)).sum();
            valid.push(logp);
        }
    }
    if valid.is_empty() {
        return Err(CtcError::Infeasible {
            frames: t,
            needed: min_frames(&input.targets).max(1),
        });
    }
    let m = valid.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = valid.iter().map(|v| (v - m).exp()).sum();
    Ok(-(m + s.ln()))
}

/// Per-frame argmax, collapsed. Ties go to the lowest index.
pub fn ctc_greedy_decode(log_probs: &Tensor) -> Vec<usize> {
    let path: Vec<usize> = (0..log_probs.rows()).map(|t| argmax(log_probs.row(t))).collect();
    collapse(&path)
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Frame-level language targets: the utterance's language label repeated
/// once per output token.
pub fn make_lid_targets(lid: usize, tokens: usize) -> Vec<usize> {
    vec![lid; tokens]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckOptions, ParamStore};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_rows(rows: &[Vec<f64>]) -> Tensor {
        let lr: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|p| p.ln()).collect()).collect();
        Tensor::from_rows(&lr).unwrap()
    }

    fn random_log_probs(rng: &mut ChaCha8Rng, t: usize, a: usize) -> Tensor {
        let mut rows = Vec::new();
        for _ in 0..t {
            let logits: Vec<f64> = (0..a).map(|_| rng.random_range(-2.0..2.0)).collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            rows.push(logits.iter().map(|l| l - m - z.ln()).collect());
        }
        Tensor::from_rows(&rows).unwrap()
    }

    /// Random target of length `u` over labels `1..a` that fits in `t` frames.
    fn random_feasible(rng: &mut ChaCha8Rng, t: usize, a: usize, u: usize) -> Option<Vec<usize>> {
        let y: Vec<usize> = (0..u).map(|_| rng.random_range(1..a)).collect();
        (min_frames(&y) <= t).then_some(y)
    }

    #[test]
    fn single_frame_single_label() {
        let lp = log_rows(&[vec![0.3, 0.7]]);
        let l = ctc_loss_value(&lp, &[1]).unwrap();
        assert!((l - 0.356675).abs() < 1e-6);
        assert!((l + 0.7f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn two_frames_uniform_enumeration() {
        // Paths (a,a), (a,∅), (∅,a): 3 of 4 with probability 1/4 each.
        let lp = log_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]);
        let expected = -(0.75f64.ln());
        assert!((ctc_loss_value(&lp, &[1]).unwrap() - expected).abs() < 1e-12);
        let input = CtcInput::new(lp, vec![1]).unwrap();
        assert!((ctc_loss_bruteforce(&input).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.287682).abs() < 1e-6);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let lp = log_rows(&[vec![0.6, 0.4], vec![0.2, 0.8]]);
        let expected = -(0.6f64.ln() + 0.2f64.ln());
        let input = CtcInput::new(lp.clone(), vec![]).unwrap();
        assert!((ctc_loss_bruteforce(&input).unwrap() - expected).abs() < 1e-12);
        assert!((ctc_loss_value(&lp, &[]).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn dp_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 200 {
            let t = rng.random_range(1..=5);
            let v = rng.random_range(1..=3);
            let u = rng.random_range(0..=2);
            let lp = random_log_probs(&mut rng, t, v + 1);
            let Some(y) = random_feasible(&mut rng, t, v + 1, u) else { continue };
            let dp = ctc_loss_value(&lp, &y).unwrap();
            let bf = ctc_loss_bruteforce(&CtcInput::new(lp, y).unwrap()).unwrap();
            assert!((dp - bf).abs() <= 1e-9, "{dp} vs {bf}");
            checked += 1;
        }
        // The stated T'=5, V=3, U=2 case.
        let lp = random_log_probs(&mut rng, 5, 4);
        let dp = ctc_loss_value(&lp, &[2, 3]).unwrap();
        let bf = ctc_loss_bruteforce(&CtcInput::new(lp, vec![2, 3]).unwrap()).unwrap();
        assert!((dp - bf).abs() <= 1e-9);
    }

    #[test]
    fn errors() {
        let lp = log_rows(&[vec![0.5, 0.5]]);
        assert_eq!(
            ctc_loss_value(&lp, &[1, 1]).unwrap_err(),
            CtcError::Infeasible { frames: 1, needed: 3 }
        );
        assert_eq!(
            ctc_loss_value(&lp, &[2]).unwrap_err(),
            CtcError::Label { label: 2, alphabet: 2 }
        );
        assert_eq!(
            ctc_loss_value(&lp, &[0]).unwrap_err(),
            CtcError::Label { label: 0, alphabet: 2 }
        );
        let big = Tensor::full(&[12, 4], (0.25f64).ln());
        assert!(matches!(
            ctc_loss_bruteforce(&CtcInput { log_probs: big, targets: vec![1] }),
            Err(CtcError::TooLarge { .. })
        ));
        let bad = Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            CtcInput::new(bad, vec![1]),
            Err(CtcError::NotNormalized { frame: 0, .. })
        ));
    }

    #[test]
    fn deterministic_path_has_zero_loss() {
        let lp = log_rows(&[vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]);
        assert_eq!(ctc_loss_value(&lp, &[1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..20 {
            let t = rng.random_range(2..=7);
            let a = rng.random_range(2..=4);
            let u = rng.random_range(0..=3);
            let Some(y) = random_feasible(&mut rng, t, a, u) else { continue };
            let mut store = ParamStore::new();
            let id = store.add("logits", Tensor::randn(&[t, a], 1.5, &mut rng));
            let f = |g: &Graph, s: &ParamStore| {
                let lp = g.log_softmax(g.param(s, id), 1)?;
                ctc_loss(g, lp, &y)
            };
            let rep = grad_check(&store, f, &GradCheckOptions::default()).unwrap();
            assert!(rep.max_rel_err() <= 1e-4, "trial {trial}: {rep:?}");
        }
    }

    #[test]
    fn graph_loss_equals_plain_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let lp = random_log_probs(&mut rng, 6, 4);
        let g = Graph::new();
        let v = g.leaf(lp.clone());
        let l = ctc_loss(&g, v, &[1, 1, 3]).unwrap();
        assert_eq!(g.value(l).item(), ctc_loss_value(&lp, &[1, 1, 3]).unwrap());
    }

    #[test]
    fn greedy_decode_examples() {
        let onehot = |ids: &[usize], a: usize| {
            let rows: Vec<Vec<f64>> = ids
                .iter()
                .map(|&i| (0..a).map(|k| if k == i { 0.0 } else { -5.0 }).collect())
                .collect();
            Tensor::from_rows(&rows).unwrap()
        };
        // a = 1, b = 2, ∅ = 0
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 0, 1, 1, 2], 3)), vec![1, 1, 2]);
        assert!(ctc_greedy_decode(&onehot(&[0, 0, 0], 3)).is_empty());
        assert_eq!(ctc_greedy_decode(&onehot(&[1, 1, 0, 2], 3)), vec![1, 2]);
    }

    #[test]
    fn lid_targets() {
        assert_eq!(make_lid_targets(2, 4), vec![2, 2, 2, 2]);
        assert_eq!(make_lid_targets(0, 1), vec![0]);
        assert_eq!(collapse(&make_lid_targets(3, 5)), vec![3]);
        assert_eq!(min_frames(&make_lid_targets(3, 5)), 9);
    }

    proptest! {
        #[test]
        fn greedy_output_has_no_blank(path in prop::collection::vec(0usize..4, 0..20)) {
            let out = collapse(&path);
            prop_assert!(!out.contains(&BLANK));
            // Every emitted label starts a new run in the path.
            let runs = path.iter().enumerate()
                .filter(|(i, &p)| p != BLANK && (*i == 0 || path[i - 1] != p))
                .count();
            prop_assert_eq!(out.len(), runs);
        }

        #[test]
        fn loss_is_non_negative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lp = random_log_probs(&mut rng, 5, 3);
            if let Some(y) = random_feasible(&mut rng, 5, 3, 2) {
                prop_assert!(ctc_loss_value(&lp, &y).unwrap() >= 0.0);
            }
        }
    }
}
