use serde::{Deserialize, Serialize};

use crate::quantizer::{MaskSpec, QuantizerSpec};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfCondNorm {
    /// Feed posteriors to the self-conditioning map.
    Softmax,
    /// Feed raw logits.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterInput {
    /// The language self-conditioning vector added after the shallow layers.
    LidEmbedding,
    /// Output of the upper-middle layers.
    UpperMiddle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CtcNormalization {
    /// Negative log-likelihood of the whole utterance.
    Utterance,
    /// Divided by the target length.
    Token,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Checkpoints kept (lowest validation loss) and averaged at the end.
    pub best_k: usize,
    pub beam: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 16,
            peak_lr: 1e-3,
            warmup_steps: 500,
            grad_clip: 5.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-9,
            best_k: 5,
            beam: 4,
        }
    }
}

/// Every architectural and training hyper-parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LupetConfig {
    pub preset: String,
    pub seed: u64,
    pub d_feat: usize,
    /// Token vocabulary including the CTC blank and specials.
    pub vocab_size: usize,
    pub n_lid: usize,
    pub n_ipa: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub conv_kernel: usize,
    pub n_enc_layers: usize,
    /// Last layer (1-based) of the shallow, lower-middle, upper-middle and
    /// deep blocks.
    pub stage_layers: [usize; 4],
    pub n_dec_layers: usize,
    pub lambda_ctc: f64,
    pub w1: f64,
    pub w2: f64,
    pub w3: f64,
    pub label_smoothing: f64,
    pub attn_reduction: Reduction,
    pub ctc_normalization: CtcNormalization,
    /// Masked prediction runs for `mlm_start_epoch <= epoch < mlm_end_epoch`
    /// (0-based epochs).
    pub mlm_start_epoch: usize,
    pub mlm_end_epoch: usize,
    pub mask: MaskSpec,
    pub quantizer: QuantizerSpec,
    pub n_experts: usize,
    pub use_lid: bool,
    pub use_unit: bool,
    pub use_ipa: bool,
    pub use_moe: bool,
    pub router_input: RouterInput,
    pub self_cond_norm: SelfCondNorm,
    /// Width of the known-language embedding appended to every input frame;
    /// 0 disables it.
    pub oracle_lid_dim: usize,
    /// Single training language of a monolingual model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub language: Option<usize>,
    pub train: TrainConfig,
}

impl Default for LupetConfig {
    fn default() -> Self {
        Self {
            preset: "vanilla".into(),
            seed: 0,
            d_feat: 16,
            vocab_size: 0,
            n_lid: 0,
            n_ipa: 0,
            d_model: 64,
            heads: 4,
            d_ff: 256,
            conv_kernel: 15,
            n_enc_layers: 8,
            stage_layers: [2, 4, 6, 8],
            n_dec_layers: 2,
            lambda_ctc: 0.3,
            w1: 0.3,
            w2: 0.07,
            w3: 0.3,
            label_smoothing: 0.1,
            attn_reduction: Reduction::Mean,
            ctc_normalization: CtcNormalization::Utterance,
            mlm_start_epoch: 5,
            mlm_end_epoch: 30,
            mask: MaskSpec::default(),
            quantizer: QuantizerSpec::default(),
            n_experts: 4,
            use_lid: false,
            use_unit: false,
            use_ipa: false,
            use_moe: false,
            router_input: RouterInput::LidEmbedding,
            self_cond_norm: SelfCondNorm::Softmax,
            oracle_lid_dim: 0,
            language: None,
            train: TrainConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 13] = [
    "vanilla",
    "oracle_lid",
    "lid_sc",
    "moe",
    "mono",
    "lupet",
    "lupet_no_U",
    "lupet_no_P",
    "lupet_no_UP",
    "lupet_no_LU",
    "lupet_w2_1",
    "lupet_Uto50ep",
    "lupet_large",
];

impl LupetConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            preset: name.to_string(),
            ..Self::default()
        };
        let lupet = Self {
            use_lid: true,
            use_unit: true,
            use_ipa: true,
            use_moe: true,
            ..base.clone()
        };
        let mut c = match name {
            "vanilla" => base,
            "oracle_lid" => Self {
                oracle_lid_dim: 8,
                ..base
            },
            "lid_sc" => Self { use_lid: true, ..base },
            "moe" => Self {
                use_moe: true,
                router_input: RouterInput::UpperMiddle,
                ..base
            },
            "mono" => Self {
                d_model: base.d_model / 2,
                d_ff: base.d_ff / 2,
                ..base
            },
            "lupet" => lupet,
            "lupet_no_U" => Self {
                use_unit: false,
                ..lupet
            },
            "lupet_no_P" => Self { use_ipa: false, ..lupet },
            "lupet_no_UP" => Self {
                use_unit: false,
                use_ipa: false,
                ..lupet
            },
            "lupet_no_LU" => Self {
                use_lid: false,
                use_unit: false,
                router_input: RouterInput::UpperMiddle,
                ..lupet
            },
            "lupet_w2_1" => Self { w2: 1.0, ..lupet },
            "lupet_Uto50ep" => Self {
                mlm_end_epoch: 50,
                ..lupet
            },
            "lupet_large" => Self {
                d_feat: 80,
                d_model: 512,
                heads: 8,
                d_ff: 2048,
                n_enc_layers: 12,
                stage_layers: [3, 6, 9, 12],
                n_dec_layers: 6,
                quantizer: QuantizerSpec {
                    n_codes: 8192,
                    d_code: 16,
                    ..QuantizerSpec::default()
                },
                n_experts: 8,
                train: TrainConfig {
                    epochs: 50,
                    batch_size: 12,
                    warmup_steps: 15000,
                    best_k: 10,
                    beam: 20,
                    ..TrainConfig::default()
                },
                ..lupet
            },
            other => {
                return Err(Error::config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        };
        c.preset = name.to_string();
        Ok(c)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Applies the keys present in `text` on top of `self`.
    pub fn overlay_toml(&self, text: &str) -> Result<Self> {
        fn merge(base: &mut toml::Table, over: toml::Table) {
            for (k, v) in over {
                match (base.get_mut(&k), v) {
                    (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
                    (_, v) => {
                        base.insert(k, v);
                    }
                }
            }
        }
        let mut base: toml::Table = toml::from_str(&self.to_toml()).expect("config round-trips through TOML");
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        merge(&mut base, over);
        toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises to TOML")
    }

    /// Fills the data-dependent sizes.
    pub fn with_corpus(mut self, d_feat: usize, vocab_size: usize, n_lid: usize, n_ipa: usize) -> Self {
        self.d_feat = d_feat;
        self.vocab_size = vocab_size;
        self.n_lid = n_lid;
        self.n_ipa = n_ipa;
        self
    }

    /// Layer indices `[start, end)` of the four encoder blocks.
    pub fn stages(&self) -> [std::ops::Range<usize>; 4] {
        let s = self.stage_layers;
        [0..s[0], s[0]..s[1], s[1]..s[2], s[2]..s[3]]
    }

    pub fn mlm_active(&self, epoch: usize) -> bool {
        self.use_unit && self.mlm_start_epoch <= epoch && epoch < self.mlm_end_epoch
    }

    /// Effective router input: the language vector needs the LID branch.
    pub fn effective_router_input(&self) -> RouterInput {
        if self.use_lid {
            self.router_input
        } else {
            RouterInput::UpperMiddle
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::config(m));
        let s = self.stage_layers;
        if !(s[0] < s[1] && s[1] < s[2] && s[2] < s[3]) || s[0] == 0 {
            return fail(format!("stage_layers {s:?} must be strictly increasing and positive"));
        }
        if s[3] != self.n_enc_layers {
            return fail(format!(
                "last stage layer {} must equal n_enc_layers {}",
                s[3], self.n_enc_layers
            ));
        }
        if [self.w1, self.w2, self.w3].iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return fail("loss weights must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_ctc) {
            return fail(format!("lambda_ctc {} outside [0, 1]", self.lambda_ctc));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("d_model {} not divisible by {} heads", self.d_model, self.heads));
        }
        if self.conv_kernel % 2 == 0 {
            return fail(format!("conv_kernel {} must be odd", self.conv_kernel));
        }
        if self.use_moe && self.n_experts < 2 {
            return fail(format!("top-2 routing needs at least 2 experts, got {}", self.n_experts));
        }
        if self.d_feat == 0 || self.vocab_size <= crate::data::SPACE || self.n_lid == 0 {
            return fail("d_feat, vocab_size and n_lid must be set from the corpus".into());
        }
        if self.use_ipa && self.n_ipa == 0 {
            return fail("IPA prediction needs n_ipa > 0".into());
        }
        if self.preset == "mono" && self.language.is_none() {
            return fail("the mono preset needs a training language".into());
        }
        if let Some(l) = self.language {
            if l >= self.n_lid {
                return fail(format!("language {l} outside {} languages", self.n_lid));
            }
        }
        if self.use_unit && (self.quantizer.n_codes == 0 || self.quantizer.d_code == 0) {
            return fail("quantizer needs n_codes and d_code > 0".into());
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.best_k == 0 || t.beam == 0 {
            return fail("epochs, batch_size, best_k and beam must be positive".into());
        }
        if !(t.peak_lr > 0.0) || !(t.grad_clip > 0.0) {
            return fail("peak_lr and grad_clip must be positive".into());
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) {
            return fail("Adam betas must lie in [0, 1)".into());
        }
        Ok(())
    }
}
