//! Direct speech-to-speech translation architectures.
//!
//! Every model is one [`Model`] value with optional components. The
//! [`Architecture`] decides which are built and how they are wired.

mod checkpoint;
mod spectrogram;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::configurable;
use crate::data::{TaskSpec, BOS, EOS};
use crate::error::{Error, Result};
use crate::nn::{BlockConfig, CrossMode, Dropout, Linear, SpeechEncoder, TokenDecoder, TransformerEncoder};
use crate::tensor::flops::Category;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use spectrogram::{decoder_steps, SpecDecoder, SpecOutputs};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// Speech encoder, text decoder, T2U encoder, unit decoder.
    UnitY,
    /// Single unit decoder over the speech encoder, auxiliary text decoder.
    S2ut,
    /// Single spectrogram decoder, auxiliary text decoder.
    S2specT,
    /// Two-pass: text decoder, T2S encoder, spectrogram decoder.
    S2specT2,
    /// Speech-to-text translation only.
    S2tt,
    /// Source transcription only.
    Asr,
}

impl Architecture {
    pub const ALL: [Architecture; 6] = [
        Architecture::UnitY,
        Architecture::S2ut,
        Architecture::S2specT,
        Architecture::S2specT2,
        Architecture::S2tt,
        Architecture::Asr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Architecture::UnitY => "unity",
            Architecture::S2ut => "s2ut",
            Architecture::S2specT => "s2spect",
            Architecture::S2specT2 => "s2spect2",
            Architecture::S2tt => "s2tt",
            Architecture::Asr => "asr",
        }
    }

    pub fn is_two_pass(self) -> bool {
        matches!(self, Architecture::UnitY | Architecture::S2specT2)
    }

    pub fn predicts_units(self) -> bool {
        matches!(self, Architecture::UnitY | Architecture::S2ut)
    }

    pub fn predicts_spectrogram(self) -> bool {
        matches!(self, Architecture::S2specT | Architecture::S2specT2)
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Architecture {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        Architecture::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown architecture {s:?}"))
    }
}

/// Architecture and loss hyperparameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub arch: Architecture,
    pub d_feat: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_head: usize,
    pub conv_kernel: usize,
    /// Conformer blocks in the speech encoder.
    pub n_enc: usize,
    /// First-pass (or only) text decoder depth.
    pub n_1st: usize,
    /// Second-pass decoder depth; the single decoder of S2UT and S2SpecT.
    pub n_2nd: usize,
    /// T2U / T2S encoder depth.
    pub n_t2u: usize,
    /// Auxiliary text decoder depth of single-pass models (0 disables it).
    pub n_aux: usize,
    /// Auxiliary ASR decoder depth (0 disables it; required for `asr`).
    pub n_asr: usize,
    pub t2u_encoder: bool,
    /// Second-pass attention to the speech encoder: none, parallel or sequential.
    pub speech_attention: CrossMode,
    pub text_vocab: usize,
    pub unit_vocab: usize,
    pub source_vocab: usize,
    pub d_spec: usize,
    pub reduction: usize,
    pub prenet_dim: usize,
    pub w_s2t: f64,
    pub w_ctc: f64,
    pub w_asr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

configurable!(ModelConfig {
    arch,
    d_feat,
    d_model,
    d_ff,
    n_head,
    conv_kernel,
    n_enc,
    n_1st,
    n_2nd,
    n_t2u,
    n_aux,
    n_asr,
    t2u_encoder,
    speech_attention,
    text_vocab,
    unit_vocab,
    source_vocab,
    d_spec,
    reduction,
    prenet_dim,
    w_s2t,
    w_ctc,
    w_asr,
    alpha,
    beta,
    gamma,
});

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::for_task(Architecture::UnitY, &TaskSpec::default())
    }
}

impl ModelConfig {
    /// Desk-scale defaults for `arch`, with vocabularies taken from `task`.
    pub fn for_task(arch: Architecture, task: &TaskSpec) -> Self {
        let (n_1st, n_2nd, n_t2u, n_aux, n_asr) = match arch {
            Architecture::UnitY => (4, 2, 2, 0, 0),
            Architecture::S2ut => (0, 6, 0, 2, 0),
            Architecture::S2specT => (0, 6, 0, 2, 0),
            Architecture::S2specT2 => (4, 6, 2, 0, 0),
            Architecture::S2tt => (4, 0, 0, 0, 0),
            Architecture::Asr => (0, 0, 0, 0, 4),
        };
        ModelConfig {
            arch,
            d_feat: task.d_feat,
            d_model: 32,
            d_ff: 64,
            n_head: 4,
            conv_kernel: 7,
            n_enc: 2,
            n_1st,
            n_2nd,
            n_t2u,
            n_aux,
            n_asr,
            t2u_encoder: n_t2u > 0,
            speech_attention: CrossMode::None,
            text_vocab: task.text_classes(),
            unit_vocab: task.unit_classes(),
            source_vocab: task.source_classes(),
            d_spec: task.d_spec,
            reduction: 3,
            prenet_dim: 16,
            w_s2t: 1.0,
            w_ctc: if arch == Architecture::S2ut { 1.0 } else { 0.0 },
            w_asr: 0.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 1.0,
        }
    }

    /// The layout of `arch` at width 8 with every present component one
    /// layer deep, for gradient checks.
    pub fn tiny(arch: Architecture, task: &TaskSpec) -> Self {
        let one = |n: usize| n.min(1);
        let base = ModelConfig::for_task(arch, task);
        ModelConfig {
            d_model: 8,
            d_ff: 16,
            n_head: 2,
            conv_kernel: 3,
            n_enc: 1,
            n_1st: one(base.n_1st),
            n_2nd: one(base.n_2nd),
            n_t2u: one(base.n_t2u),
            n_aux: one(base.n_aux),
            n_asr: one(base.n_asr),
            reduction: 2,
            prenet_dim: 4,
            ..base
        }
    }

    pub fn block(&self) -> BlockConfig {
        BlockConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_head: self.n_head,
            conv_kernel: self.conv_kernel,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.block().validate()?;
        let a = self.arch;
        let bad = |m: &str| Err(Error::invalid(format!("{a}: {m}")));
        if self.n_t2u > 0 && !self.t2u_encoder {
            return bad("n_t2u must be 0 when the T2U encoder is disabled");
        }
        if self.n_t2u == 0 && self.t2u_encoder && a.is_two_pass() {
            return bad("n_t2u = 0 requires t2u_encoder = false");
        }
        if self.reduction == 0 {
            return bad("reduction factor must be at least 1");
        }
        if self.d_feat == 0 {
            return bad("d_feat must be positive");
        }
        if self.speech_attention == CrossMode::Single {
            return bad("speech_attention must be none, parallel or sequential");
        }
        if self.speech_attention != CrossMode::None && a != Architecture::UnitY {
            return bad("speech attention in the second pass is only defined for unity");
        }
        for (name, v) in [("text_vocab", self.text_vocab), ("unit_vocab", self.unit_vocab), ("source_vocab", self.source_vocab)] {
            if v < 3 {
                return bad(&format!("{name} must be at least 3"));
            }
        }
        let need = |ok: bool, m: &str| if ok { Ok(()) } else { bad(m) };
        match a {
            Architecture::UnitY | Architecture::S2specT2 => {
                need(self.n_1st > 0, "first-pass decoder needs at least one layer")?;
                need(self.n_2nd > 0, "second-pass decoder needs at least one layer")?;
            }
            Architecture::S2ut | Architecture::S2specT => {
                need(self.n_2nd > 0, "decoder needs at least one layer")?;
            }
            Architecture::S2tt => need(self.n_1st > 0, "text decoder needs at least one layer")?,
            Architecture::Asr => need(self.n_asr > 0, "ASR decoder needs at least one layer")?,
        }
        if a.predicts_spectrogram() && (self.d_spec == 0 || self.prenet_dim == 0) {
            return bad("spectrogram width and pre-net size must be positive");
        }
        for (name, w) in [
            ("w_s2t", self.w_s2t),
            ("w_ctc", self.w_ctc),
            ("w_asr", self.w_asr),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return bad(&format!("{name} must be a finite non-negative number"));
            }
        }
        Ok(())
    }

    /// Cross-attention layout of the second-pass unit or spectrogram decoder.
    pub fn second_pass_mode(&self) -> CrossMode {
        match self.speech_attention {
            CrossMode::Parallel => CrossMode::Parallel,
            CrossMode::Sequential => CrossMode::Sequential,
            _ => CrossMode::Single,
        }
    }
}

/// Decoder outputs of one teacher-forced pass.
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutputs {
    /// Pre-logit states, one row per predicted token.
    pub states: Var,
    pub logits: Var,
}

/// Everything a teacher-forced forward pass produces.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutputs {
    pub h: Var,
    /// First-pass, auxiliary or only text decoder.
    pub text: Option<DecoderOutputs>,
    /// T2U / T2S encoder output (equal to the text states without one).
    pub z: Option<Var>,
    pub unit: Option<DecoderOutputs>,
    /// Log-probabilities of the CTC head over unit-decoder states.
    pub ctc_log_probs: Option<Var>,
    pub spec: Option<SpecOutputs>,
    pub asr: Option<DecoderOutputs>,
}

/// Teacher-forcing targets of one utterance. Token sequences carry neither
/// BOS nor EOS.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub text: &'a [usize],
    pub units: &'a [usize],
    pub source: &'a [usize],
    pub spec: Option<&'a Tensor>,
}

/// BOS-prefixed decoder input.
pub fn decoder_input(tokens: &[usize]) -> Vec<usize> {
    std::iter::once(BOS).chain(tokens.iter().copied()).collect()
}

/// EOS-terminated decoder target.
pub fn decoder_target(tokens: &[usize]) -> Vec<usize> {
    tokens.iter().copied().chain(std::iter::once(EOS)).collect()
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub encoder: SpeechEncoder,
    pub text_decoder: Option<TokenDecoder>,
    pub bridge: Option<TransformerEncoder>,
    pub unit_decoder: Option<TokenDecoder>,
    pub spec_decoder: Option<SpecDecoder>,
    pub asr_decoder: Option<TokenDecoder>,
    pub ctc_head: Option<Linear>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let cfg = config.block();
        let store = &mut params;
        let rng = &mut rng;
        let arch = config.arch;

        let encoder = SpeechEncoder::new(store, "enc", config.d_feat, config.n_enc, cfg, rng)?;
        let text_depth = match arch {
            Architecture::UnitY | Architecture::S2specT2 | Architecture::S2tt => config.n_1st,
            Architecture::S2ut | Architecture::S2specT => config.n_aux,
            Architecture::Asr => 0,
        };
        let text_decoder = (text_depth > 0)
            .then(|| TokenDecoder::new(store, "text", config.text_vocab, text_depth, &cfg, CrossMode::Single, rng));
        let bridge = arch
            .is_two_pass()
            .then(|| TransformerEncoder::new(store, "t2u", config.n_t2u, &cfg, rng));
        let unit_decoder = match arch {
            Architecture::UnitY => Some(TokenDecoder::new(
                store,
                "unit",
                config.unit_vocab,
                config.n_2nd,
                &cfg,
                config.second_pass_mode(),
                rng,
            )),
            Architecture::S2ut => {
                Some(TokenDecoder::new(store, "unit", config.unit_vocab, config.n_2nd, &cfg, CrossMode::Single, rng))
            }
            _ => None,
        };
        let spec_decoder = arch.predicts_spectrogram().then(|| {
            SpecDecoder::new(
                store,
                "spec",
                config.d_spec,
                config.reduction,
                config.prenet_dim,
                config.n_2nd,
                &cfg,
                CrossMode::Single,
                rng,
            )
        });
        let asr_decoder = (config.n_asr > 0)
            .then(|| TokenDecoder::new(store, "asr", config.source_vocab, config.n_asr, &cfg, CrossMode::Single, rng));
        // CTC over text tokens on top of unit-decoder states; blank is the extra last class
        let ctc_head = (arch == Architecture::S2ut)
            .then(|| Linear::new(store, "ctc", config.d_model, config.text_vocab + 1, Category::Projection, rng));

        Ok(Model { config, params, encoder, text_decoder, bridge, unit_decoder, spec_decoder, asr_decoder, ctc_head })
    }

    pub fn arch(&self) -> Architecture {
        self.config.arch
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn encode(&self, g: &mut Graph, features: &Tensor, drop: &mut Dropout) -> Result<Var> {
        self.encoder.forward(g, features, drop)
    }

    /// T2U / T2S encoder over first-pass states; identity when it has no layers.
    pub fn bridge(&self, g: &mut Graph, d_text: Var, drop: &mut Dropout) -> Result<Var> {
        match &self.bridge {
            Some(b) => b.forward(g, d_text, drop),
            None => Err(Error::MissingContext("model has no second pass")),
        }
    }

    /// Second-pass contexts: Z, then H when the unit decoder also attends speech.
    pub fn second_pass_contexts(&self, z: Var, h: Var) -> Vec<Var> {
        match self.config.second_pass_mode() {
            CrossMode::Single => vec![z],
            _ => vec![z, h],
        }
    }

    /// Unit pass given first-pass states. `h` is read only when the unit
    /// decoder attends the speech encoder.
    pub fn unit_pass(
        &self,
        g: &mut Graph,
        d_text: Var,
        h: Var,
        units: &[usize],
        drop: &mut Dropout,
    ) -> Result<(Var, DecoderOutputs)> {
        let dec = self.unit_decoder.as_ref().ok_or(Error::MissingContext("model has no unit decoder"))?;
        let z = self.bridge(g, d_text, drop)?;
        let ctx = self.second_pass_contexts(z, h);
        let (states, logits) = dec.forward(g, &decoder_input(units), &ctx, drop)?;
        Ok((z, DecoderOutputs { states, logits }))
    }

    fn token_pass(dec: &TokenDecoder, g: &mut Graph, tokens: &[usize], ctx: Var, drop: &mut Dropout) -> Result<DecoderOutputs> {
        let (states, logits) = dec.forward(g, &decoder_input(tokens), &[ctx], drop)?;
        Ok(DecoderOutputs { states, logits })
    }

    /// Teacher-forced forward pass of every component of the architecture.
    pub fn forward(&self, g: &mut Graph, features: &Tensor, t: &Targets, drop: &mut Dropout) -> Result<ForwardOutputs> {
        let arch = self.arch();
        if self.text_decoder.is_some() && t.text.is_empty() {
            return Err(Error::invalid("empty text target"));
        }
        if arch.predicts_units() && t.units.is_empty() {
            return Err(Error::invalid("empty unit target"));
        }
        if self.asr_decoder.is_some() && t.source.is_empty() {
            return Err(Error::invalid("empty source transcript"));
        }
        let h = self.encode(g, features, drop)?;
        let mut out =
            ForwardOutputs { h, text: None, z: None, unit: None, ctc_log_probs: None, spec: None, asr: None };
        if let Some(dec) = &self.text_decoder {
            out.text = Some(Self::token_pass(dec, g, t.text, h, drop)?);
        }
        if let Some(dec) = &self.asr_decoder {
            out.asr = Some(Self::token_pass(dec, g, t.source, h, drop)?);
        }
        match arch {
            Architecture::UnitY => {
                let d_text = out.text.expect("unity has a text decoder").states;
                let (z, unit) = self.unit_pass(g, d_text, h, t.units, drop)?;
                out.z = Some(z);
                out.unit = Some(unit);
            }
            Architecture::S2ut => {
                let dec = self.unit_decoder.as_ref().expect("s2ut has a unit decoder");
                let unit = Self::token_pass(dec, g, t.units, h, drop)?;
                let head = self.ctc_head.as_ref().expect("s2ut has a CTC head");
                let logits = head.forward(g, unit.states)?;
                out.ctc_log_probs = Some(g.log_softmax(logits));
                out.unit = Some(unit);
            }
            Architecture::S2specT | Architecture::S2specT2 => {
                let spec = t.spec.ok_or(Error::MissingContext("spectrogram target"))?;
                let dec = self.spec_decoder.as_ref().expect("spectrogram decoder");
                let grouped = dec.group_frames(spec)?;
                let ctx = if arch == Architecture::S2specT2 {
                    let d_text = out.text.expect("s2spect2 has a text decoder").states;
                    let z = self.bridge(g, d_text, drop)?;
                    out.z = Some(z);
                    z
                } else {
                    h
                };
                out.spec = Some(dec.forward(g, &grouped, &[ctx], drop)?);
            }
            Architecture::S2tt | Architecture::Asr => {}
        }
        Ok(out)
    }

    /// Freezes (or unfreezes) the feed-forward sublayers of the text decoder.
    pub fn set_text_ffn_frozen(&mut self, frozen: bool) -> Result<()> {
        let dec = self.text_decoder.as_ref().ok_or(Error::MissingContext("model has no text decoder"))?;
        for id in dec.stack.ffn_param_ids() {
            self.params.set_trainable(id, !frozen);
        }
        Ok(())
    }
}

/// Excludes the text decoder's FFN parameters from optimizer updates.
pub fn freeze_text_decoder_ffn(mut model: Model) -> Result<Model> {
    model.set_text_ffn_frozen(true)?;
    Ok(model)
}

pub fn unfreeze_text_decoder_ffn(mut model: Model) -> Result<Model> {
    model.set_text_ffn_frozen(false)?;
    Ok(model)
}
