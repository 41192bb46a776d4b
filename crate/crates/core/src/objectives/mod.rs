//! Training objectives of every architecture, with and without R-Drop.

mod pretrain;
mod train;

use std::fmt;

use crate::error::{Error, Result};
use crate::models::{decoder_target, Architecture, DecoderOutputs, ForwardOutputs, Model, ModelConfig, SpecOutputs, Targets};
use crate::nn::Dropout;
use crate::tensor::{Graph, Tensor, Var};

pub use pretrain::{denoise_pretrain_text_decoder, span_mask, PretrainOutcome, TextDenoiser, TEXT_DECODER_PREFIX};
pub use train::{
    average_checkpoints, learning_rate, train, train_with_hook, Adam, HasParams, LogRow, TrainConfig, TrainLog,
};

/// Loss values of one objective evaluation. Components a model does not
/// have are `None`. Under R-Drop, task components are summed over both passes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub s2u: Option<f64>,
    pub s2t: Option<f64>,
    pub asr: Option<f64>,
    pub ctc: Option<f64>,
    pub kl_s2u: Option<f64>,
    pub kl_s2t: Option<f64>,
    pub kl_asr: Option<f64>,
    pub l1: Option<f64>,
    pub l2: Option<f64>,
    pub eos: Option<f64>,
}

impl LossReport {
    pub const COMPONENTS: [&'static str; 10] = ["s2u", "s2t", "asr", "ctc", "kl_s2u", "kl_s2t", "kl_asr", "l1", "l2", "eos"];

    pub fn components(&self) -> [Option<f64>; 10] {
        [
            self.s2u, self.s2t, self.asr, self.ctc, self.kl_s2u, self.kl_s2t, self.kl_asr, self.l1, self.l2, self.eos,
        ]
    }

    fn components_mut(&mut self) -> [&mut Option<f64>; 10] {
        [
            &mut self.s2u,
            &mut self.s2t,
            &mut self.asr,
            &mut self.ctc,
            &mut self.kl_s2u,
            &mut self.kl_s2t,
            &mut self.kl_asr,
            &mut self.l1,
            &mut self.l2,
            &mut self.eos,
        ]
    }

    /// The total implied by the components and the weights in `cfg`.
    pub fn weighted_total(&self, cfg: &ModelConfig) -> f64 {
        let w = HeadWeights::of(cfg);
        let v = |x: Option<f64>| x.unwrap_or(0.0);
        v(self.s2u)
            + cfg.alpha * v(self.kl_s2u)
            + cfg.w_ctc * v(self.ctc)
            + w.s2t * (v(self.s2t) + cfg.beta * v(self.kl_s2t))
            + w.asr * (v(self.asr) + cfg.gamma * v(self.kl_asr))
            + v(self.l1)
            + v(self.l2)
            + v(self.eos)
    }

    /// Componentwise accumulation, used to average reports over a batch.
    pub fn add_scaled(&mut self, other: &LossReport, s: f64) {
        self.total += s * other.total;
        for (a, b) in self.components_mut().into_iter().zip(other.components()) {
            if let Some(b) = b {
                *a = Some(a.unwrap_or(0.0) + s * b);
            }
        }
    }
}

impl fmt::Display for LossReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "total={:.4}", self.total)?;
        for (name, v) in Self::COMPONENTS.iter().zip(self.components()) {
            if let Some(v) = v {
                write!(f, " {name}={v:.4}")?;
            }
        }
        Ok(())
    }
}

/// Weights of the text and ASR heads: the configured auxiliary weights, or 1
/// when the head is the model's primary task.
struct HeadWeights {
    s2t: f64,
    asr: f64,
}

impl HeadWeights {
    fn of(cfg: &ModelConfig) -> Self {
        HeadWeights {
            s2t: if cfg.arch == Architecture::S2tt { 1.0 } else { cfg.w_s2t },
            asr: if cfg.arch == Architecture::Asr { 1.0 } else { cfg.w_asr },
        }
    }
}

/// Graph handles of each loss term for one forward pass.
#[derive(Clone, Copy, Debug, Default)]
struct Terms {
    s2u: Option<Var>,
    s2t: Option<Var>,
    asr: Option<Var>,
    ctc: Option<Var>,
    l1: Option<Var>,
    l2: Option<Var>,
    eos: Option<Var>,
}

fn xent(g: &mut Graph, out: Option<DecoderOutputs>, tokens: &[usize], eps: f64) -> Result<Option<Var>> {
    out.map(|o| g.xent_smoothed(o.logits, &decoder_target(tokens), eps)).transpose()
}

/// L1, L2 and EOS losses of a spectrogram pass against grouped targets.
pub fn s2spect_terms(g: &mut Graph, out: &SpecOutputs, grouped: &Tensor) -> Result<(Var, Var, Var)> {
    let steps = grouped.rows();
    if g.shape(out.frames) != (steps, grouped.cols()) || g.rows(out.eos_logits) != steps {
        return Err(Error::shape(format!(
            "spectrogram prediction {:?} vs target {:?}",
            g.shape(out.frames),
            grouped.shape()
        )));
    }
    let l1 = g.l1_loss(out.frames, grouped.data())?;
    let l2 = g.l2_loss(out.frames, grouped.data())?;
    let mut stop = vec![0.0; steps];
    stop[steps - 1] = 1.0;
    let eos = g.bce_logits(out.eos_logits, &stop, 1.0)?;
    Ok((l1, l2, eos))
}

fn pass_terms(g: &mut Graph, model: &Model, out: &ForwardOutputs, t: &Targets, eps: f64) -> Result<Terms> {
    let mut terms = Terms {
        s2u: xent(g, out.unit, t.units, eps)?,
        s2t: xent(g, out.text, t.text, eps)?,
        asr: xent(g, out.asr, t.source, eps)?,
        ..Terms::default()
    };
    if let Some(lp) = out.ctc_log_probs {
        // Per target token, like the cross-entropy terms.
        let nll = g.ctc_loss(lp, t.text)?;
        terms.ctc = Some(g.scale(nll, 1.0 / t.text.len() as f64));
    }
    if let Some(spec) = &out.spec {
        let target = t.spec.ok_or(Error::MissingContext("spectrogram target"))?;
        let grouped = model.spec_decoder.as_ref().expect("spectrogram decoder").group_frames(target)?;
        let (l1, l2, eos) = s2spect_terms(g, spec, &grouped)?;
        terms.l1 = Some(l1);
        terms.l2 = Some(l2);
        terms.eos = Some(eos);
    }
    Ok(terms)
}

fn weighted_sum(g: &mut Graph, parts: &[(Option<Var>, f64)]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for &(v, w) in parts {
        if let Some(v) = v {
            let s = g.scale(v, w);
            acc = Some(match acc {
                Some(a) => g.add(a, s)?,
                None => s,
            });
        }
    }
    acc.ok_or_else(|| Error::invalid("objective has no terms"))
}

fn report_from(g: &Graph, terms: &[Terms], kl: [Option<Var>; 3], total: Var) -> LossReport {
    let sum = |f: fn(&Terms) -> Option<Var>| -> Option<f64> {
        terms.iter().map(|t| f(t).map(|v| g.scalar(v))).sum::<Option<f64>>()
    };
    LossReport {
        total: g.scalar(total),
        s2u: sum(|t| t.s2u),
        s2t: sum(|t| t.s2t),
        asr: sum(|t| t.asr),
        ctc: sum(|t| t.ctc),
        kl_s2u: kl[0].map(|v| g.scalar(v)),
        kl_s2t: kl[1].map(|v| g.scalar(v)),
        kl_asr: kl[2].map(|v| g.scalar(v)),
        l1: sum(|t| t.l1),
        l2: sum(|t| t.l2),
        eos: sum(|t| t.eos),
    }
}

fn combine(g: &mut Graph, cfg: &ModelConfig, terms: &[Terms], kl: [Option<Var>; 3]) -> Result<Var> {
    let w = HeadWeights::of(cfg);
    let mut parts = Vec::new();
    for t in terms {
        parts.extend([
            (t.s2u, 1.0),
            (t.ctc, cfg.w_ctc),
            (t.s2t, w.s2t),
            (t.asr, w.asr),
            (t.l1, 1.0),
            (t.l2, 1.0),
            (t.eos, 1.0),
        ]);
    }
    parts.extend([(kl[0], cfg.alpha), (kl[1], w.s2t * cfg.beta), (kl[2], w.asr * cfg.gamma)]);
    weighted_sum(g, &parts)
}

/// Weighted objective of one teacher-forced pass. Cross-entropies are token
/// means with label smoothing `eps`.
pub fn objective(g: &mut Graph, model: &Model, out: &ForwardOutputs, t: &Targets, eps: f64) -> Result<(Var, LossReport)> {
    let terms = pass_terms(g, model, out, t, eps)?;
    let total = combine(g, &model.config, &[terms], [None; 3])?;
    Ok((total, report_from(g, &[terms], [None; 3], total)))
}

/// Forward pass plus [`objective`].
pub fn single_pass_loss(
    g: &mut Graph,
    model: &Model,
    features: &Tensor,
    t: &Targets,
    eps: f64,
    drop: &mut Dropout,
) -> Result<(Var, LossReport)> {
    let out = model.forward(g, features, t, drop)?;
    objective(g, model, &out, t, eps)
}

/// `L_s2u + w_s2t · L_s2t` of a UnitY forward pass.
pub fn unity_loss(g: &mut Graph, model: &Model, out: &ForwardOutputs, t: &Targets, eps: f64) -> Result<(Var, LossReport)> {
    if model.arch() != Architecture::UnitY {
        return Err(Error::invalid(format!("unity_loss on a {} model", model.arch())));
    }
    objective(g, model, out, t, eps)
}

/// R-Drop objective: two passes over the duplicated input with independent
/// dropout masks (`seeds`), each task loss summed over both passes, plus the
/// symmetric KL between the passes for every discrete head.
pub fn rdrop_pair_loss(
    g: &mut Graph,
    model: &Model,
    features: &Tensor,
    t: &Targets,
    eps: f64,
    dropout: f64,
    seeds: (u64, u64),
) -> Result<(Var, LossReport)> {
    if model.arch() == Architecture::S2specT {
        return Err(Error::invalid("R-Drop is not defined for a continuous primary output"));
    }
    let mut outs = Vec::with_capacity(2);
    let mut terms = Vec::with_capacity(2);
    for seed in [seeds.0, seeds.1] {
        let mut drop = Dropout::new(dropout, seed);
        let out = model.forward(g, features, t, &mut drop)?;
        terms.push(pass_terms(g, model, &out, t, eps)?);
        outs.push(out);
    }
    let mut kl_of = |f: fn(&ForwardOutputs) -> Option<DecoderOutputs>| -> Result<Option<Var>> {
        match (f(&outs[0]), f(&outs[1])) {
            (Some(a), Some(b)) => Ok(Some(g.kl_symmetric(a.logits, b.logits)?)),
            _ => Ok(None),
        }
    };
    let kl = [kl_of(|o| o.unit)?, kl_of(|o| o.text)?, kl_of(|o| o.asr)?];
    let total = combine(g, &model.config, &terms, kl)?;
    Ok((total, report_from(g, &terms, kl, total)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weighted_total_follows_head_roles() {
        let mut cfg = ModelConfig { w_s2t: 0.5, beta: 2.0, ..Default::default() };
        let r = LossReport { s2u: Some(1.0), s2t: Some(2.0), kl_s2t: Some(0.25), ..Default::default() };
        assert!((r.weighted_total(&cfg) - (1.0 + 0.5 * (2.0 + 0.5))).abs() < 1e-12);
        cfg.arch = Architecture::S2tt;
        assert!((r.weighted_total(&cfg) - (1.0 + 2.0 + 0.5)).abs() < 1e-12);
    }
}
