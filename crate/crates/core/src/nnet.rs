//! Conformer encoder layers, the convolutional subsampling frontend, the
//! transformer decoder, the attention loss and autoregressive decoding.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::moe::{MoeLayer, Routing};
use crate::numerics::{
    multi_head_attention, AttentionMask, AttentionParams, Graph, ParamId, ParamStore, Tensor, Var,
};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Graph plus the parameter store it binds parameters from.
#[derive(Copy, Clone)]
pub struct Ctx<'a> {
    pub g: &'a Graph,
    pub store: &'a ParamStore,
}

impl<'a> Ctx<'a> {
    pub fn new(g: &'a Graph, store: &'a ParamStore) -> Self {
        Self { g, store }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }
}

/// Name-keyed parameter initialiser. Each parameter draws from a stream
/// seeded by `(seed, name)`, so values do not depend on creation order.
#[derive(Copy, Clone, Debug)]
pub struct Init {
    pub seed: u64,
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn rng_for(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ fnv1a(name.as_bytes()))
    }

    pub fn normal(&self, store: &mut ParamStore, name: &str, shape: &[usize], std: f64) -> ParamId {
        let t = Tensor::randn(shape, std, &mut self.rng_for(name));
        store.add(name, t)
    }

    pub fn zeros(&self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        store.add(name, Tensor::zeros(shape))
    }

    pub fn ones(&self, store: &mut ParamStore, name: &str, shape: &[usize]) -> ParamId {
        store.add(name, Tensor::full(shape, 1.0))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// `[d_in, d_out]` weight with `N(0, 1/d_in)` entries and a zero bias.
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let w = init.normal(store, &format!("{name}.w"), &[d_in, d_out], (1.0 / d_in as f64).sqrt());
        let b = bias.then(|| init.zeros(store, &format!("{name}.b"), &[d_out]));
        Self { w, b }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        Ok(cx.g.linear(x, cx.p(self.w), self.b.map(|b| cx.p(b)))?)
    }

    pub fn d_out(&self, store: &ParamStore) -> usize {
        store.value(self.w).shape()[1]
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize) -> Self {
        Self {
            gain: init.ones(store, &format!("{name}.gain"), &[d]),
            bias: init.zeros(store, &format!("{name}.bias"), &[d]),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        Ok(cx.g.layer_norm(x, cx.p(self.gain), cx.p(self.bias), LN_EPS)?)
    }
}

/// `Linear(d, d_ff) -> swish -> Linear(d_ff, d)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize, d_ff: usize) -> Self {
        Self {
            up: Linear::new(store, init, &format!("{name}.up"), d, d_ff, true),
            down: Linear::new(store, init, &format!("{name}.down"), d_ff, d, true),
        }
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let h = self.up.forward(cx, x)?;
        self.down.forward(cx, cx.g.swish(h))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("d_model {d} is not divisible by {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, init, &format!("{name}.q"), d, d, true),
            k: Linear::new(store, init, &format!("{name}.k"), d, d, true),
            v: Linear::new(store, init, &format!("{name}.v"), d, d, true),
            o: Linear::new(store, init, &format!("{name}.o"), d, d, true),
            heads,
        })
    }

    pub fn forward(&self, cx: &Ctx, query: Var, memory: Var, mask: Option<&AttentionMask>) -> Result<Var> {
        let bias = |l: &Linear| l.b.map(|b| cx.p(b)).expect("attention projections carry biases");
        let p = AttentionParams {
            wq: cx.p(self.q.w),
            bq: bias(&self.q),
            wk: cx.p(self.k.w),
            bk: bias(&self.k),
            wv: cx.p(self.v.w),
            bv: bias(&self.v),
            wo: cx.p(self.o.w),
            bo: bias(&self.o),
        };
        Ok(multi_head_attention(cx.g, query, memory, memory, &p, self.heads, mask)?)
    }
}

/// Pointwise GLU, depthwise temporal convolution, norm, swish, pointwise.
#[derive(Clone, Debug)]
pub struct ConvModule {
    pub pw_in: Linear,
    pub depthwise: ParamId,
    pub depthwise_bias: ParamId,
    pub norm: LayerNorm,
    pub pw_out: Linear,
}

impl ConvModule {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d: usize, kernel: usize) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::config(format!("conv kernel must be odd, got {kernel}")));
        }
        Ok(Self {
            pw_in: Linear::new(store, init, &format!("{name}.pw_in"), d, 2 * d, true),
            depthwise: init.normal(
                store,
                &format!("{name}.dw"),
                &[kernel, d],
                (1.0 / kernel as f64).sqrt(),
            ),
            depthwise_bias: init.zeros(store, &format!("{name}.dw_b"), &[d]),
            norm: LayerNorm::new(store, init, &format!("{name}.norm"), d),
            pw_out: Linear::new(store, init, &format!("{name}.pw_out"), d, d, true),
        })
    }

    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let g = cx.g;
        let h = g.glu(self.pw_in.forward(cx, x)?)?;
        let h = g.conv1d_depthwise(h, cx.p(self.depthwise))?;
        let h = g.add_bias(h, cx.p(self.depthwise_bias))?;
        let h = g.swish(self.norm.forward(cx, h)?);
        self.pw_out.forward(cx, h)
    }
}

/// The end feed-forward slot of a conformer layer.
#[derive(Clone, Debug)]
pub enum EndFfn {
    Dense(FeedForward),
    Moe(MoeLayer),
}

/// Macaron conformer block:
/// `x + ½FFN`, `+ MHSA`, `+ Conv`, `+ ½FFN|MoE`, final layer norm.
#[derive(Clone, Debug)]
pub struct ConformerLayer {
    pub norm_ff1: LayerNorm,
    pub ff1: FeedForward,
    pub norm_mha: LayerNorm,
    pub mha: MultiHeadAttention,
    pub norm_conv: LayerNorm,
    pub conv: ConvModule,
    pub norm_ff2: LayerNorm,
    pub end: EndFfn,
    pub norm_out: LayerNorm,
}

#[derive(Clone, Copy, Debug)]
pub struct ConformerDims {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub kernel: usize,
}

impl ConformerLayer {
    /// `experts`: `Some(n)` replaces the end FFN with an `n`-expert MoE.
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, dims: ConformerDims, experts: Option<usize>) -> Result<Self> {
        let d = dims.d_model;
        let end = match experts {
            Some(n) => EndFfn::Moe(MoeLayer::new(store, init, &format!("{name}.moe"), d, dims.d_ff, n)?),
            None => EndFfn::Dense(FeedForward::new(store, init, &format!("{name}.ff2"), d, dims.d_ff)),
        };
        Ok(Self {
            norm_ff1: LayerNorm::new(store, init, &format!("{name}.norm_ff1"), d),
            ff1: FeedForward::new(store, init, &format!("{name}.ff1"), d, dims.d_ff),
            norm_mha: LayerNorm::new(store, init, &format!("{name}.norm_mha"), d),
            mha: MultiHeadAttention::new(store, init, &format!("{name}.mha"), d, dims.heads)?,
            norm_conv: LayerNorm::new(store, init, &format!("{name}.norm_conv"), d),
            conv: ConvModule::new(store, init, &format!("{name}.conv"), d, dims.kernel)?,
            norm_ff2: LayerNorm::new(store, init, &format!("{name}.norm_ff2"), d),
            end,
            norm_out: LayerNorm::new(store, init, &format!("{name}.norm_out"), d),
        })
    }

    pub fn is_moe(&self) -> bool {
        matches!(self.end, EndFfn::Moe(_))
    }

    /// Returns the layer output and, for MoE layers, the routing used.
    pub fn forward(&self, cx: &Ctx, x: Var, router_input: Option<Var>) -> Result<(Var, Option<Routing>)> {
        let g = cx.g;
        let h = self.ff1.forward(cx, self.norm_ff1.forward(cx, x)?)?;
        let x = g.add(x, g.scale(h, 0.5))?;
        let n = self.norm_mha.forward(cx, x)?;
        let x = g.add(x, self.mha.forward(cx, n, n, None)?)?;
        let x = g.add(x, self.conv.forward(cx, self.norm_conv.forward(cx, x)?)?)?;
        let n = self.norm_ff2.forward(cx, x)?;
        let (h, routing) = match &self.end {
            EndFfn::Dense(ff) => (ff.forward(cx, n)?, None),
            EndFfn::Moe(moe) => {
                let r = router_input.ok_or_else(|| Error::config("MoE layer needs a router input"))?;
                let (h, routing) = moe.forward(cx, n, r)?;
                (h, Some(routing))
            }
        };
        let x = g.add(x, g.scale(h, 0.5))?;
        Ok((self.norm_out.forward(cx, x)?, routing))
    }
}

/// Applies the contiguous layer span `range` of `layers`. MoE layers in the
/// span route on `router_input`; their routings are returned in order.
pub fn encode_span(
    cx: &Ctx,
    layers: &[ConformerLayer],
    range: Range<usize>,
    x: Var,
    router_input: Option<Var>,
) -> Result<(Var, Vec<Routing>)> {
    if range.end > layers.len() || range.start > range.end {
        return Err(Error::config(format!(
            "layer span {range:?} outside encoder of {} layers",
            layers.len()
        )));
    }
    let span = &layers[range];
    if router_input.is_none() && span.iter().any(ConformerLayer::is_moe) {
        return Err(Error::config("layer span contains MoE layers but no router input was given"));
    }
    let mut h = x;
    let mut routings = Vec::new();
    for layer in span {
        let (out, r) = layer.forward(cx, h, router_input)?;
        h = out;
        routings.extend(r);
    }
    Ok((h, routings))
}

/// Output length of a kernel-3, stride-2 valid convolution.
fn conv_out(t: usize) -> usize {
    if t < 3 {
        0
    } else {
        (t - 3) / 2 + 1
    }
}

/// Sub-sampled length after the two stride-2 frontend convolutions.
pub fn subsampled_len(t: usize) -> usize {
    conv_out(conv_out(t))
}

/// Shortest input that yields at least one encoder frame.
pub const MIN_FRAMES: usize = 7;

/// Two kernel-3 stride-2 temporal convolutions with swish, then a projection
/// to `d_model`. Reduces the frame rate by 4.
#[derive(Clone, Debug)]
pub struct SubsamplingFrontend {
    pub conv1: Linear,
    pub conv2: Linear,
    pub out: Linear,
}

impl SubsamplingFrontend {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, d_in: usize, d_model: usize) -> Self {
        Self {
            conv1: Linear::new(store, init, &format!("{name}.conv1"), 3 * d_in, d_model, true),
            conv2: Linear::new(store, init, &format!("{name}.conv2"), 3 * d_model, d_model, true),
            out: Linear::new(store, init, &format!("{name}.out"), d_model, d_model, true),
        }
    }

    fn unfold(cx: &Ctx, x: Var) -> Result<Var> {
        let shape = cx.g.shape(x);
        let (t, c) = (shape[0], shape[1]);
        let t_out = conv_out(t);
        let mut idx = Vec::with_capacity(t_out * 3 * c);
        for o in 0..t_out {
            let start = 2 * o * c;
            idx.extend(start..start + 3 * c);
        }
        Ok(cx.g.take(x, idx, vec![t_out, 3 * c])?)
    }

    /// `x: [T, d_in]` with `T >= MIN_FRAMES`; returns `[T', d_model]`.
    pub fn forward(&self, cx: &Ctx, x: Var) -> Result<Var> {
        let t = cx.g.shape(x)[0];
        if t < MIN_FRAMES {
            return Err(Error::config(format!("input has {t} frames, frontend needs at least {MIN_FRAMES}")));
        }
        let h = cx.g.swish(self.conv1.forward(cx, Self::unfold(cx, x)?)?);
        let h = cx.g.swish(self.conv2.forward(cx, Self::unfold(cx, h)?)?);
        self.out.forward(cx, h)
    }
}

/// Absolute sinusoidal position table `[t, d]`.
pub fn sinusoidal_pe(t: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[t, d]);
    for pos in 0..t {
        let row = pe.row_mut(pos);
        for i in (0..d).step_by(2) {
            let freq = (-(i as f64) * (10000f64).ln() / d as f64).exp();
            row[i] = (pos as f64 * freq).sin();
            if i + 1 < d {
                row[i + 1] = (pos as f64 * freq).cos();
            }
        }
    }
    pe
}

pub fn add_positions(cx: &Ctx, x: Var) -> Result<Var> {
    let s = cx.g.shape(x);
    let pe = cx.g.constant(sinusoidal_pe(s[0], s[1]));
    Ok(cx.g.add(x, pe)?)
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ff: LayerNorm,
    pub ff: FeedForward,
}

/// Pre-norm transformer decoder over a token vocabulary.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub embed: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub norm_out: LayerNorm,
    pub out: Linear,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, init: &Init, name: &str, vocab: usize, n_layers: usize, dims: ConformerDims) -> Result<Self> {
        let d = dims.d_model;
        let embed = init.normal(store, &format!("{name}.embed"), &[vocab, d], 1.0);
        let layers = (0..n_layers)
            .map(|i| {
                let p = format!("{name}.{i}");
                Ok(DecoderLayer {
                    norm_self: LayerNorm::new(store, init, &format!("{p}.norm_self"), d),
                    self_attn: MultiHeadAttention::new(store, init, &format!("{p}.self"), d, dims.heads)?,
                    norm_cross: LayerNorm::new(store, init, &format!("{p}.norm_cross"), d),
                    cross_attn: MultiHeadAttention::new(store, init, &format!("{p}.cross"), d, dims.heads)?,
                    norm_ff: LayerNorm::new(store, init, &format!("{p}.norm_ff"), d),
                    ff: FeedForward::new(store, init, &format!("{p}.ff"), d, dims.d_ff),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            embed,
            layers,
            norm_out: LayerNorm::new(store, init, &format!("{name}.norm_out"), d),
            out: Linear::new(store, init, &format!("{name}.out"), d, vocab, true),
        })
    }

    /// Logits `[len(inputs), vocab]`; position `u` sees `inputs[..=u]` and
    /// the whole encoder memory.
    pub fn forward(&self, cx: &Ctx, memory: Var, inputs: &[usize]) -> Result<Var> {
        let g = cx.g;
        let vocab = cx.store.value(self.embed).shape()[0];
        if let Some(&bad) = inputs.iter().find(|&&t| t >= vocab) {
            return Err(Error::config(format!("token {bad} outside vocabulary of {vocab}")));
        }
        let mut x = g.take_rows(cx.p(self.embed), inputs)?;
        x = add_positions(cx, x)?;
        let mask = AttentionMask::causal(inputs.len());
        for l in &self.layers {
            let n = l.norm_self.forward(cx, x)?;
            x = g.add(x, l.self_attn.forward(cx, n, n, Some(&mask))?)?;
            let n = l.norm_cross.forward(cx, x)?;
            x = g.add(x, l.cross_attn.forward(cx, n, memory, None)?)?;
            let n = l.norm_ff.forward(cx, x)?;
            x = g.add(x, l.ff.forward(cx, n)?)?;
        }
        let x = self.norm_out.forward(cx, x)?;
        self.out.forward(cx, x)
    }
}

/// Label-smoothed cross-entropy of teacher-forced decoder logits
/// `[U + 1, V]` against `targets ++ [eos]`, averaged over the `U + 1`
/// positions. The smoothed target puts `1 - s` on the label and `s / V` on
/// every class.
pub fn attention_loss(g: &Graph, logits: Var, targets: &[usize], eos: usize, smoothing: f64) -> Result<Var> {
    let shape = g.shape(logits);
    let (n, v) = (shape[0], shape[1]);
    if n != targets.len() + 1 {
        return Err(Error::config(format!(
            "decoder produced {n} positions for {} targets plus <eos>",
            targets.len()
        )));
    }
    let lp = g.log_softmax(logits, 1)?;
    let idx: Vec<usize> = targets
        .iter()
        .chain(std::iter::once(&eos))
        .enumerate()
        .map(|(u, &y)| u * v + y)
        .collect();
    let picked = g.sum(g.take(lp, idx, vec![n])?);
    let nll = g.scale(picked, -(1.0 - smoothing) / n as f64);
    if smoothing == 0.0 {
        return Ok(nll);
    }
    let all = g.scale(g.sum(lp), -smoothing / (v as f64 * n as f64));
    Ok(g.add(nll, all)?)
}

/// Next-token log-probabilities given a prefix that starts with `<sos>`.
pub trait StepScorer {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>>;
}

/// Decoder bound to fixed weights and one encoder output.
pub struct DecoderScorer<'a> {
    pub decoder: &'a Decoder,
    pub store: &'a ParamStore,
    pub memory: &'a Tensor,
}

impl StepScorer for DecoderScorer<'_> {
    fn next_log_probs(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, self.store);
        let mem = g.constant(self.memory.clone());
        let logits = self.decoder.forward(&cx, mem, prefix)?;
        let lp = g.value(g.log_softmax(logits, 1)?);
        Ok(lp.row(prefix.len() - 1).to_vec())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens, without `<sos>`/`<eos>`.
    pub tokens: Vec<usize>,
    /// Cumulative log-probability including `<eos>` when emitted.
    pub log_prob: f64,
    /// `log_prob` divided by the number of scored steps.
    pub score: f64,
    /// `max_len` was hit before `<eos>`.
    pub truncated: bool,
}

/// Argmax decoding, one token per step.
pub fn greedy_decode<S: StepScorer>(scorer: &S, max_len: usize, sos: usize, eos: usize) -> Result<Hypothesis> {
    let mut prefix = vec![sos];
    let mut log_prob = 0.0;
    for _ in 0..max_len {
        let lp = scorer.next_log_probs(&prefix)?;
        let best = crate::ctc::argmax(&lp);
        log_prob += lp[best];
        prefix.push(best);
        if best == eos {
            let steps = prefix.len() - 1;
            prefix.pop();
            prefix.remove(0);
            return Ok(Hypothesis {
                tokens: prefix,
                log_prob,
                score: log_prob / steps as f64,
                truncated: false,
            });
        }
    }
    let steps = prefix.len() - 1;
    prefix.remove(0);
    Ok(Hypothesis {
        tokens: prefix,
        log_prob,
        score: if steps == 0 { 0.0 } else { log_prob / steps as f64 },
        truncated: true,
    })
}

/// Beam search with cumulative log-prob pruning and length-normalised final
/// ranking. Ties keep the earlier candidate.
pub fn beam_search<S: StepScorer>(scorer: &S, beam: usize, max_len: usize, sos: usize, eos: usize) -> Result<Hypothesis> {
    if beam == 0 {
        return Err(Error::config("beam size must be at least 1"));
    }
    let mut live: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for _ in 0..max_len {
        let mut cand: Vec<(Vec<usize>, f64)> = Vec::new();
        for (tokens, lp_sum) in &live {
            let mut prefix = Vec::with_capacity(tokens.len() + 1);
            prefix.push(sos);
            prefix.extend_from_slice(tokens);
            let lp = scorer.next_log_probs(&prefix)?;
            let mut order: Vec<usize> = (0..lp.len()).collect();
            order.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]).then(a.cmp(&b)));
            for &tok in order.iter().take(beam) {
                let mut t = tokens.clone();
                t.push(tok);
                cand.push((t, lp_sum + lp[tok]));
            }
        }
        // Stable sort keeps generation order among equal scores.
        cand.sort_by(|a, b| b.1.total_cmp(&a.1));
        cand.truncate(beam);
        live.clear();
        for (mut tokens, lp_sum) in cand {
            if tokens.last() == Some(&eos) {
                let steps = tokens.len();
                tokens.pop();
                finished.push(Hypothesis {
                    tokens,
                    log_prob: lp_sum,
                    score: lp_sum / steps as f64,
                    truncated: false,
                });
            } else {
                live.push((tokens, lp_sum));
            }
        }
        if finished.len() >= beam || live.is_empty() {
            break;
        }
    }
    let pool = if finished.is_empty() {
        live.into_iter()
            .map(|(tokens, lp_sum)| {
                let steps = tokens.len().max(1);
                Hypothesis {
                    tokens,
                    log_prob: lp_sum,
                    score: lp_sum / steps as f64,
                    truncated: true,
                }
            })
            .collect()
    } else {
        finished
    };
    let mut best: Option<Hypothesis> = None;
    for h in pool {
        if best.as_ref().is_none_or(|b| h.score > b.score) {
            best = Some(h);
        }
    }
    best.ok_or_else(|| Error::config("beam search produced no hypothesis"))
}

#[cfg(test)]
mod tests;
