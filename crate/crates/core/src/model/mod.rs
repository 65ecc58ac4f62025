//! The assembled recognizer.
//!
//! The encoder is split into four consecutive blocks. After the shallow block
//! a language head is trained with CTC against the language label repeated
//! once per token, and its (soft-maxed) logits are mapped back into the
//! stream. The lower-middle block predicts random-projection units of the
//! unmasked input at masked positions. The upper-middle block predicts IPA
//! phonemes, again conditioning the stream on its prediction. The deep block
//! replaces its end feed-forward modules by language-routed experts. Token
//! CTC and an attention decoder sit on top. Each branch can be switched off,
//! which yields the baselines and ablations.

mod checkpoint;
mod config;

pub use checkpoint::{
    arch_hash, average_checkpoints, average_models, checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{CtcNormalization, LupetConfig, Reduction, RouterInput, SelfCondNorm, TrainConfig, PRESETS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ctc::{ctc_loss, ctc_greedy_decode, make_lid_targets, CtcError};
use crate::data::{Batch, EOS, SOS};
use crate::moe::Routing;
use crate::nnet::{
    add_positions, attention_loss, beam_search, encode_span, greedy_decode, ConformerDims, ConformerLayer, Ctx,
    Decoder, DecoderScorer, Hypothesis, Init, Linear, SubsamplingFrontend,
};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::quantizer::{apply_mask, masked_subframes, mlm_loss, RandomProjectionQuantizer};
use crate::{derive_seed, Error, Result};

/// Per-step loss components and their weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_attn: f64,
    pub l_ctc: f64,
    pub l_lid: f64,
    pub l_mlm: f64,
    pub l_ipa: f64,
    pub total: f64,
    pub mlm_active: bool,
}

impl LossBreakdown {
    /// Weighted combination of the components under `cfg`.
    pub fn combine(&self, cfg: &LupetConfig) -> f64 {
        let lam = cfg.lambda_ctc;
        let mut t = (1.0 - lam) * self.l_attn + lam * self.l_ctc;
        if cfg.use_lid {
            t += cfg.w1 * self.l_lid;
        }
        if self.mlm_active {
            t += cfg.w2 * self.l_mlm;
        }
        if cfg.use_ipa {
            t += cfg.w3 * self.l_ipa;
        }
        t
    }
}

/// Graph handles of one utterance's encoder pass.
pub struct EncoderVars {
    pub h: Var,
    pub h_lm: Var,
    pub lid_logits: Option<Var>,
    pub ipa_logits: Option<Var>,
    /// Vector added to the stream after the shallow block.
    pub lid_emb: Option<Var>,
    /// Vector fed to every router.
    pub router_input: Option<Var>,
    pub routings: Vec<Routing>,
}

/// Inference outputs of the encoder.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub memory: Tensor,
    pub ctc_log_probs: Tensor,
    pub lid_logits: Option<Tensor>,
    pub ipa_logits: Option<Tensor>,
    pub routings: Vec<Routing>,
}

/// Graph handles of one utterance's losses.
pub struct UtteranceLoss {
    pub attn: Var,
    pub ctc: Var,
    pub lid: Option<Var>,
    pub mlm: Option<Var>,
    pub ipa: Option<Var>,
}

pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// `h + lin(z')` where `z'` is `softmax(z)` or `z`. Returns the sum and the
/// added vector.
pub fn self_condition(cx: &Ctx, h: Var, z: Var, lin: &Linear, norm: SelfCondNorm) -> Result<(Var, Var)> {
    let z = match norm {
        SelfCondNorm::Softmax => cx.g.softmax(z, 1)?,
        SelfCondNorm::Raw => z,
    };
    let e = lin.forward(cx, z)?;
    Ok((cx.g.add(h, e)?, e))
}

#[derive(Clone, Debug)]
pub struct LupetModel {
    pub config: LupetConfig,
    pub store: ParamStore,
    frontend: SubsamplingFrontend,
    layers: Vec<ConformerLayer>,
    oracle: Option<ParamId>,
    lid_head: Option<Linear>,
    lid_sc: Option<Linear>,
    mlm_head: Option<Linear>,
    ipa_head: Option<Linear>,
    ipa_sc: Option<Linear>,
    ctc_head: Linear,
    decoder: Decoder,
    quantizer: Option<RandomProjectionQuantizer>,
}

pub const QUANTIZER_PROJ: &str = "rpq.proj";
pub const QUANTIZER_CODEBOOK: &str = "rpq.codebook";

impl LupetModel {
    pub fn new(config: LupetConfig) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut store = ParamStore::new();
        let init = Init::new(c.seed);
        let dims = ConformerDims {
            d_model: c.d_model,
            heads: c.heads,
            d_ff: c.d_ff,
            kernel: c.conv_kernel,
        };
        let oracle = (c.oracle_lid_dim > 0).then(|| init.normal(&mut store, "oracle_lid", &[c.n_lid, c.oracle_lid_dim], 1.0));
        let frontend = SubsamplingFrontend::new(&mut store, &init, "frontend", c.d_feat + c.oracle_lid_dim, c.d_model);
        let deep = c.stages()[3].clone();
        let layers = (0..c.n_enc_layers)
            .map(|i| {
                let experts = (c.use_moe && deep.contains(&i)).then_some(c.n_experts);
                ConformerLayer::new(&mut store, &init, &format!("enc.{i}"), dims, experts)
            })
            .collect::<Result<Vec<_>>>()?;
        let n_lid_classes = c.n_lid + 1;
        let n_ipa_classes = c.n_ipa + 1;
        let lid_head = c.use_lid.then(|| Linear::new(&mut store, &init, "lid.head", c.d_model, n_lid_classes, true));
        let lid_sc = c.use_lid.then(|| Linear::new(&mut store, &init, "lid.sc", n_lid_classes, c.d_model, true));
        let mlm_head = c
            .use_unit
            .then(|| Linear::new(&mut store, &init, "mlm.proj", c.d_model, c.quantizer.n_codes, true));
        let ipa_head = c.use_ipa.then(|| Linear::new(&mut store, &init, "ipa.head", c.d_model, n_ipa_classes, true));
        let ipa_sc = c.use_ipa.then(|| Linear::new(&mut store, &init, "ipa.sc", n_ipa_classes, c.d_model, true));
        let ctc_head = Linear::new(&mut store, &init, "ctc.head", c.d_model, c.vocab_size, true);
        let decoder = Decoder::new(&mut store, &init, "dec", c.vocab_size, c.n_dec_layers, dims)?;
        let quantizer = if c.use_unit {
            let q = RandomProjectionQuantizer::new(c.d_feat, &c.quantizer)?;
            store.add_frozen(QUANTIZER_PROJ, q.proj().clone());
            store.add_frozen(QUANTIZER_CODEBOOK, q.codebook().clone());
            Some(q)
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            frontend,
            layers,
            oracle,
            lid_head,
            lid_sc,
            mlm_head,
            ipa_head,
            ipa_sc,
            ctc_head,
            decoder,
            quantizer,
        })
    }

    pub fn quantizer(&self) -> Option<&RandomProjectionQuantizer> {
        self.quantizer.as_ref()
    }

    pub(crate) fn set_quantizer(&mut self, q: RandomProjectionQuantizer) {
        self.quantizer = Some(q);
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn n_moe_layers(&self) -> usize {
        self.layers.iter().filter(|l| l.is_moe()).count()
    }

    /// Encoder pass over (possibly masked) features of language `lid`.
    pub fn encode_vars(&self, cx: &Ctx, features: &Tensor, lid: usize) -> Result<EncoderVars> {
        let g = cx.g;
        let c = &self.config;
        if features.rank() != 2 || features.last_dim() != c.d_feat {
            return Err(Error::config(format!(
                "model expects [T, {}] features, got {:?}",
                c.d_feat,
                features.shape()
            )));
        }
        let mut x = g.constant(features.clone());
        if let Some(id) = self.oracle {
            if lid >= c.n_lid {
                return Err(Error::config(format!("language {lid} outside {} languages", c.n_lid)));
            }
            let emb = g.take_rows(cx.p(id), &vec![lid; features.rows()])?;
            x = g.concat_cols(&[x, emb])?;
        }
        let h = self.frontend.forward(cx, x)?;
        let h = add_positions(cx, h)?;
        let [s, lm, um, deep] = c.stages();

        let (mut h, _) = encode_span(cx, &self.layers, s, h, None)?;
        let mut lid_logits = None;
        let mut lid_emb = None;
        if let (Some(head), Some(sc)) = (&self.lid_head, &self.lid_sc) {
            let z = head.forward(cx, h)?;
            let (h2, e) = self_condition(cx, h, z, sc, c.self_cond_norm)?;
            h = h2;
            lid_logits = Some(z);
            lid_emb = Some(e);
        }
        let (h, _) = encode_span(cx, &self.layers, lm, h, None)?;
        let h_lm = h;
        let (mut h, _) = encode_span(cx, &self.layers, um, h, None)?;
        let h_um = h;
        let mut ipa_logits = None;
        if let (Some(head), Some(sc)) = (&self.ipa_head, &self.ipa_sc) {
            let z = head.forward(cx, h)?;
            let (h2, _) = self_condition(cx, h, z, sc, c.self_cond_norm)?;
            h = h2;
            ipa_logits = Some(z);
        }
        let router_input = c.use_moe.then(|| match c.effective_router_input() {
            RouterInput::LidEmbedding => lid_emb.expect("LID branch present"),
            RouterInput::UpperMiddle => h_um,
        });
        let (h, routings) = encode_span(cx, &self.layers, deep, h, router_input)?;
        Ok(EncoderVars {
            h,
            h_lm,
            lid_logits,
            ipa_logits,
            lid_emb,
            router_input,
            routings,
        })
    }

    fn ctc_term(&self, g: &Graph, logits: Var, targets: &[usize], id: &str) -> Result<Var> {
        let lp = g.log_softmax(logits, 1)?;
        let l = ctc_loss(g, lp, targets).map_err(|e| match e {
            CtcError::Numerics(n) => Error::Numerics(n),
            source => Error::Utterance {
                id: id.to_string(),
                source,
            },
        })?;
        Ok(match self.config.ctc_normalization {
            CtcNormalization::Utterance => l,
            CtcNormalization::Token => g.scale(l, 1.0 / targets.len().max(1) as f64),
        })
    }

    /// Loss terms of one utterance. `mask_seed` drives span masking when
    /// masked prediction is active.
    #[allow(clippy::too_many_arguments)]
    pub fn utterance_loss(
        &self,
        cx: &Ctx,
        id: &str,
        features: &Tensor,
        lid: usize,
        tokens: &[usize],
        ipa: &[usize],
        mlm_active: bool,
        mask_seed: u64,
    ) -> Result<UtteranceLoss> {
        let g = cx.g;
        let c = &self.config;
        let (input, masked) = if mlm_active {
            let mut rng = ChaCha8Rng::seed_from_u64(mask_seed);
            apply_mask(features, &c.mask, &mut rng)?
        } else {
            (features.clone(), Vec::new())
        };
        let enc = self.encode_vars(cx, &input, lid)?;
        let lid_loss = match enc.lid_logits {
            Some(z) => Some(self.ctc_term(g, z, &make_lid_targets(lid + 1, tokens.len()), id)?),
            None => None,
        };
        let mlm = match (&self.quantizer, &self.mlm_head, mlm_active) {
            (Some(q), Some(head), true) => {
                let labels = q.quantize(features)?;
                let idx = masked_subframes(&masked, labels.len());
                let m = mlm_loss(cx, enc.h_lm, head, &idx, &labels)?;
                m.active.then_some(m.loss)
            }
            _ => None,
        };
        let ipa_loss = match enc.ipa_logits {
            Some(z) => Some(self.ctc_term(g, z, ipa, id)?),
            None => None,
        };
        let ctc = self.ctc_term(g, self.ctc_head.forward(cx, enc.h)?, tokens, id)?;
        let mut dec_in = Vec::with_capacity(tokens.len() + 1);
        dec_in.push(SOS);
        dec_in.extend_from_slice(tokens);
        let logits = self.decoder.forward(cx, enc.h, &dec_in)?;
        let mut attn = attention_loss(g, logits, tokens, EOS, c.label_smoothing)?;
        if c.attn_reduction == Reduction::Sum {
            attn = g.scale(attn, dec_in.len() as f64);
        }
        Ok(UtteranceLoss {
            attn,
            ctc,
            lid: lid_loss,
            mlm,
            ipa: ipa_loss,
        })
    }

    /// Mean losses over a padded batch. Each item is cut to its own length,
    /// so padding never reaches the network.
    pub fn batch_loss(&self, cx: &Ctx, batch: &Batch, epoch: usize) -> Result<BatchLoss> {
        let g = cx.g;
        let c = &self.config;
        let active = c.mlm_active(epoch);
        let mut parts = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let seed = derive_seed(c.seed, &format!("mask/{}", batch.ids[b]), epoch as u64);
            parts.push(self.utterance_loss(
                cx,
                &batch.ids[b],
                &batch.item_features(b),
                batch.lids[b],
                &batch.tokens[b],
                &batch.ipa[b],
                active,
                seed,
            )?);
        }
        let mean = |vars: Vec<Var>| -> Result<Option<Var>> {
            if vars.is_empty() {
                return Ok(None);
            }
            let n = vars.len() as f64;
            Ok(Some(g.scale(g.add_n(&vars)?, 1.0 / n)))
        };
        let attn = mean(parts.iter().map(|p| p.attn).collect())?.ok_or_else(|| Error::Data("empty batch".into()))?;
        let ctc = mean(parts.iter().map(|p| p.ctc).collect())?.expect("non-empty batch");
        let lid = mean(parts.iter().filter_map(|p| p.lid).collect())?;
        let mlm = mean(parts.iter().filter_map(|p| p.mlm).collect())?;
        let ipa = mean(parts.iter().filter_map(|p| p.ipa).collect())?;

        let lam = c.lambda_ctc;
        let mut terms = vec![g.scale(attn, 1.0 - lam), g.scale(ctc, lam)];
        if let Some(v) = lid {
            terms.push(g.scale(v, c.w1));
        }
        if let Some(v) = mlm {
            terms.push(g.scale(v, c.w2));
        }
        if let Some(v) = ipa {
            terms.push(g.scale(v, c.w3));
        }
        let total = g.add_n(&terms)?;
        let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
        let breakdown = LossBreakdown {
            l_attn: g.value(attn).item(),
            l_ctc: g.value(ctc).item(),
            l_lid: val(lid),
            l_mlm: val(mlm),
            l_ipa: val(ipa),
            total: g.value(total).item(),
            mlm_active: mlm.is_some(),
        };
        Ok(BatchLoss { total, breakdown })
    }

    /// Evaluation loss (no masking) of a batch.
    pub fn eval_loss(&self, batch: &Batch) -> Result<LossBreakdown> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        Ok(self.batch_loss(&cx, batch, usize::MAX)?.breakdown)
    }

    pub fn encode(&self, features: &Tensor, lid: usize) -> Result<Encoded> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, &self.store);
        let enc = self.encode_vars(&cx, features, lid)?;
        let lp = g.log_softmax(self.ctc_head.forward(&cx, enc.h)?, 1)?;
        Ok(Encoded {
            memory: (*g.value(enc.h)).clone(),
            ctc_log_probs: (*g.value(lp)).clone(),
            lid_logits: enc.lid_logits.map(|v| (*g.value(v)).clone()),
            ipa_logits: enc.ipa_logits.map(|v| (*g.value(v)).clone()),
            routings: enc.routings,
        })
    }

    pub fn decode_ctc_greedy(&self, features: &Tensor, lid: usize) -> Result<Vec<usize>> {
        Ok(ctc_greedy_decode(&self.encode(features, lid)?.ctc_log_probs))
    }

    /// Attention decoding; hypotheses are capped at one token per encoder
    /// frame.
    pub fn decode_attention(&self, features: &Tensor, lid: usize, beam: usize) -> Result<Hypothesis> {
        let enc = self.encode(features, lid)?;
        let scorer = DecoderScorer {
            decoder: &self.decoder,
            store: &self.store,
            memory: &enc.memory,
        };
        let max_len = enc.memory.rows() + 1;
        if beam == 1 {
            greedy_decode(&scorer, max_len, SOS, EOS)
        } else {
            beam_search(&scorer, beam, max_len, SOS, EOS)
        }
    }

    /// Attention decoding with an explicit beam search even for beam 1.
    pub fn decode_attention_beam(&self, features: &Tensor, lid: usize, beam: usize) -> Result<Hypothesis> {
        let enc = self.encode(features, lid)?;
        let scorer = DecoderScorer {
            decoder: &self.decoder,
            store: &self.store,
            memory: &enc.memory,
        };
        beam_search(&scorer, beam, enc.memory.rows() + 1, SOS, EOS)
    }
}

#[cfg(test)]
mod tests;
