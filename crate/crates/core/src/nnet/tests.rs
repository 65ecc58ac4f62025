use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::numerics::{grad_check, GradCheckOptions};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Largest relative error outside the attention key biases. Softmax is
/// invariant to a per-query shift, so their true gradient is exactly zero and
/// the relative error reduces to finite-difference noise.
fn max_err_without_key_bias(report: &crate::numerics::GradCheckReport) -> f64 {
    report
        .params
        .iter()
        .filter(|p| !p.name.ends_with(".k.b"))
        .map(|p| p.max_rel_err)
        .fold(0.0, f64::max)
}

fn dims(d: usize) -> ConformerDims {
    ConformerDims {
        d_model: d,
        heads: 2,
        d_ff: 2 * d,
        kernel: 3,
    }
}

#[test]
fn init_is_keyed_by_name_not_order() {
    let init = Init::new(5);
    let mut a = ParamStore::new();
    let a1 = init.normal(&mut a, "x", &[3, 2], 1.0);
    let a2 = init.normal(&mut a, "y", &[3, 2], 1.0);
    let mut b = ParamStore::new();
    let b2 = init.normal(&mut b, "y", &[3, 2], 1.0);
    let b1 = init.normal(&mut b, "x", &[3, 2], 1.0);
    assert_eq!(a.value(a1), b.value(b1));
    assert_eq!(a.value(a2), b.value(b2));
    assert_ne!(a.value(a1), a.value(a2));
}

#[test]
fn subsampled_lengths() {
    assert_eq!(subsampled_len(6), 0);
    assert_eq!(subsampled_len(MIN_FRAMES), 1);
    assert_eq!(subsampled_len(100), 24);
    for t in 7..400 {
        // Each stride-2 valid convolution maps t to floor((t - 1) / 2).
        assert_eq!(subsampled_len(t), ((t - 1) / 2 - 1) / 2);
        assert!(subsampled_len(t) * 4 <= t);
    }
}

#[test]
fn frontend_shapes_and_short_input() {
    let mut store = ParamStore::new();
    let fe = SubsamplingFrontend::new(&mut store, &Init::new(0), "fe", 5, 8);
    let g = Graph::inference();
    let cx = Ctx::new(&g, &store);
    let x = g.constant(Tensor::randn(&[37, 5], 1.0, &mut rng(1)));
    let y = fe.forward(&cx, x).unwrap();
    assert_eq!(g.shape(y), vec![subsampled_len(37), 8]);
    let short = g.constant(Tensor::zeros(&[6, 5]));
    assert!(fe.forward(&cx, short).unwrap_err().is_config());
}

#[test]
fn zeroed_residual_branches_leave_a_layer_norm() {
    let mut store = ParamStore::new();
    let layer = ConformerLayer::new(&mut store, &Init::new(2), "l", dims(8), None).unwrap();
    let EndFfn::Dense(ff2) = &layer.end else { unreachable!() };
    for id in [layer.ff1.down.w, layer.mha.o.w, layer.conv.pw_out.w, ff2.down.w] {
        store.get_mut(id).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::randn(&[6, 8], 2.0, &mut rng(3));
    let g = Graph::inference();
    let cx = Ctx::new(&g, &store);
    let (y, _) = layer.forward(&cx, g.constant(x.clone()), None).unwrap();
    let y = g.value(y);
    for i in 0..6 {
        let r = x.row(i);
        let mean = r.iter().sum::<f64>() / 8.0;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (a, v) in y.row(i).iter().zip(r) {
            assert!((a - (v - mean) / (var + LN_EPS).sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn spans_compose() {
    let mut store = ParamStore::new();
    let init = Init::new(4);
    let layers: Vec<_> = (0..5)
        .map(|i| ConformerLayer::new(&mut store, &init, &format!("enc.{i}"), dims(8), (i >= 3).then_some(3)).unwrap())
        .collect();
    let x = Tensor::randn(&[7, 8], 1.0, &mut rng(5));
    let r = Tensor::randn(&[7, 8], 1.0, &mut rng(6));
    let g = Graph::inference();
    let cx = Ctx::new(&g, &store);
    let xv = g.constant(x);
    let rv = g.constant(r);
    let (full, rf) = encode_span(&cx, &layers, 0..5, xv, Some(rv)).unwrap();
    let (a, ra) = encode_span(&cx, &layers, 0..2, xv, None).unwrap();
    let (b, rb) = encode_span(&cx, &layers, 2..5, a, Some(rv)).unwrap();
    assert_eq!(g.value(full).data(), g.value(b).data());
    assert!(ra.is_empty());
    assert_eq!(rf, rb);
    assert_eq!(rf.len(), 2);
    assert!(encode_span(&cx, &layers, 2..5, a, None).unwrap_err().is_config());
    assert!(encode_span(&cx, &layers, 4..6, a, Some(rv)).unwrap_err().is_config());
}

#[test]
fn conformer_layer_gradcheck() {
    let mut store = ParamStore::new();
    let layer = ConformerLayer::new(&mut store, &Init::new(7), "l", dims(8), Some(4)).unwrap();
    let x = Tensor::randn(&[5, 8], 1.0, &mut rng(8));
    let r = Tensor::randn(&[5, 8], 1.0, &mut rng(9));
    let w = Tensor::randn(&[5, 8], 1.0, &mut rng(10));
    let opts = GradCheckOptions {
        max_entries: Some(12),
        ..Default::default()
    };
    let report = grad_check::<_, Error>(
        &store,
        |g, s| {
            let cx = Ctx::new(g, s);
            let (y, _) = layer.forward(&cx, g.constant(x.clone()), Some(g.constant(r.clone())))?;
            Ok(g.sum(g.mul(y, g.constant(w.clone()))?))
        },
        &opts,
    )
    .unwrap();
    assert!(max_err_without_key_bias(&report) < 1e-5, "{:?}", report);
}

fn small_decoder(vocab: usize) -> (ParamStore, Decoder, Tensor) {
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &Init::new(11), "dec", vocab, 2, dims(8)).unwrap();
    let memory = Tensor::randn(&[6, 8], 1.0, &mut rng(12));
    (store, dec, memory)
}

#[test]
fn decoder_is_causal() {
    let (store, dec, memory) = small_decoder(7);
    let base = [1, 4, 5, 3, 6];
    let run = |tokens: &[usize]| {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &store);
        let m = g.constant(memory.clone());
        (*g.value(dec.forward(&cx, m, tokens).unwrap())).clone()
    };
    let ref_logits = run(&base);
    for u in 1..base.len() {
        let mut changed = base;
        changed[u] = (changed[u] + 1) % 7;
        let l = run(&changed);
        for p in 0..u {
            assert_eq!(l.row(p), ref_logits.row(p), "position {p} saw token {u}");
        }
        assert_ne!(l.row(u), ref_logits.row(u));
    }
}

#[test]
fn decoder_gradcheck_with_attention_loss() {
    let (store, dec, memory) = small_decoder(6);
    let opts = GradCheckOptions {
        max_entries: Some(10),
        ..Default::default()
    };
    let report = grad_check::<_, Error>(
        &store,
        |g, s| {
            let cx = Ctx::new(g, s);
            let m = g.constant(memory.clone());
            let logits = dec.forward(&cx, m, &[1, 3, 4, 5])?;
            attention_loss(g, logits, &[3, 4, 5], 2, 0.1)
        },
        &opts,
    )
    .unwrap();
    assert!(max_err_without_key_bias(&report) < 1e-5, "{:?}", report);
}

#[test]
fn attention_loss_limits() {
    let targets = [3, 7];
    let eos = 2;
    let mut one_hot = Tensor::full(&[3, 10], -1e4);
    for (u, &y) in targets.iter().chain([eos].iter()).enumerate() {
        one_hot.row_mut(u)[y] = 0.0;
    }
    let g = Graph::new();
    let l = attention_loss(&g, g.leaf(one_hot), &targets, eos, 0.0).unwrap();
    assert!(g.value(l).item().abs() < 1e-9);
    let u = attention_loss(&g, g.leaf(Tensor::zeros(&[3, 10])), &targets, eos, 0.0).unwrap();
    assert!((g.value(u).item() - 10f64.ln()).abs() < 1e-12);
    // Uniform predictions cost ln V whatever the smoothing.
    let s = attention_loss(&g, g.leaf(Tensor::zeros(&[3, 10])), &targets, eos, 0.1).unwrap();
    assert!((g.value(s).item() - 10f64.ln()).abs() < 1e-12);
}

#[test]
fn attention_loss_matches_smoothed_cross_entropy() {
    let logits = Tensor::randn(&[3, 5], 1.0, &mut rng(13));
    let targets = [4, 1];
    let eos = 2;
    let s = 0.1;
    let g = Graph::new();
    let l = attention_loss(&g, g.leaf(logits.clone()), &targets, eos, s).unwrap();
    let mut expect = 0.0;
    for (u, &y) in targets.iter().chain([eos].iter()).enumerate() {
        let row = logits.row(u);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        for (k, &z) in row.iter().enumerate() {
            let q = if k == y { 1.0 - s + s / 5.0 } else { s / 5.0 };
            expect -= q * (z - lse);
        }
    }
    expect /= 3.0;
    assert!((g.value(l).item() - expect).abs() < 1e-12);
    let g2 = Graph::new();
    let bad = g2.leaf(Tensor::zeros(&[2, 5]));
    assert!(attention_loss(&g2, bad, &targets, eos, s).is_err());
}

#[test]
fn beam_one_is_greedy() {
    let (store, dec, memory) = small_decoder(9);
    let scorer = DecoderScorer {
        decoder: &dec,
        store: &store,
        memory: &memory,
    };
    for max_len in [1, 3, 8] {
        let a = greedy_decode(&scorer, max_len, 1, 2).unwrap();
        let b = beam_search(&scorer, 1, max_len, 1, 2).unwrap();
        assert_eq!(a, b);
    }
}

/// Tokens: 0 = a, 1 = b, 2 = eos; 3 is the start symbol.
struct Table;

impl StepScorer for Table {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let p: [f64; 3] = match &prefix[1..] {
            [] => [0.5, 0.4, 0.1],
            [0] => [0.34, 0.33, 0.33],
            [1] => [0.05, 0.05, 0.9],
            _ => [0.01, 0.01, 0.98],
        };
        Ok(p.iter().map(|v| v.ln()).collect())
    }
}

/// Best length-normalised completed sequence by exhaustive enumeration.
fn enumerate_best(max_len: usize) -> (Vec<usize>, f64) {
    let mut best = (Vec::new(), f64::NEG_INFINITY);
    let mut stack = vec![(vec![3usize], 0.0)];
    while let Some((prefix, lp)) = stack.pop() {
        if prefix.len() > max_len {
            continue;
        }
        let next = Table.next_log_probs(&prefix).unwrap();
        for (tok, l) in next.into_iter().enumerate() {
            if tok == 2 {
                let score = (lp + l) / prefix.len() as f64;
                if score > best.1 {
                    best = (prefix[1..].to_vec(), score);
                }
            } else {
                let mut p = prefix.clone();
                p.push(tok);
                stack.push((p, lp + l));
            }
        }
    }
    best
}

#[test]
fn wider_beam_beats_greedy_on_toy_distribution() {
    let greedy = greedy_decode(&Table, 5, 3, 2).unwrap();
    assert_eq!(greedy.tokens, vec![0, 0]);
    let beam = beam_search(&Table, 2, 5, 3, 2).unwrap();
    let (tokens, score) = enumerate_best(5);
    assert_eq!(beam.tokens, tokens);
    assert!((beam.score - score).abs() < 1e-12);
    assert!(beam.score > greedy.score);
    assert!(beam.log_prob > greedy.log_prob);
}

#[test]
fn truncation_is_flagged() {
    struct NeverEnd;
    impl StepScorer for NeverEnd {
        fn next_log_probs(&self, _: &[usize]) -> Result<Vec<f64>> {
            Ok(vec![0.9f64.ln(), 0.1f64.ln()])
        }
    }
    let h = beam_search(&NeverEnd, 3, 4, 0, 1).unwrap();
    // eos is never in the top pruning set for long enough to finish.
    assert!(h.truncated || h.tokens.len() < 4);
    let g = greedy_decode(&NeverEnd, 4, 0, 1).unwrap();
    assert!(g.truncated);
    assert_eq!(g.tokens, vec![0; 4]);
    assert!(beam_search(&NeverEnd, 0, 4, 0, 1).unwrap_err().is_config());
}
