//! Beam search for each pass and composed two-pass decoding.

mod beam;

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Read, Write};

pub use beam::{beam_search, greedy_search, normalize, BeamResult, Hypothesis, SearchParams, StepScorer};

use crate::configurable;
use crate::data::{EOS, MASK};
use crate::error::{Error, Result};
use crate::models::{decoder_input, Architecture, Model, SpecDecoder};
use crate::nn::{CrossCache, Dropout, IncrementalState, TokenDecoder};
use crate::tensor::{log_softmax, Graph, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub b_1st: usize,
    pub b_2nd: usize,
    pub max_text_len: usize,
    pub max_unit_len: usize,
    /// Length-penalty exponent of the text pass.
    pub text_len_penalty: f64,
    pub unit_len_penalty: f64,
    /// Stop probability above which spectrogram decoding ends.
    pub eos_threshold: f64,
}

configurable!(BeamConfig { b_1st, b_2nd, max_text_len, max_unit_len, text_len_penalty, unit_len_penalty, eos_threshold });

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            b_1st: 10,
            b_2nd: 1,
            max_text_len: 32,
            max_unit_len: 256,
            text_len_penalty: 1.0,
            unit_len_penalty: 0.0,
            eos_threshold: 0.5,
        }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.b_1st == 0 || self.b_2nd == 0 || self.max_text_len == 0 || self.max_unit_len == 0 {
            return Err(Error::invalid("beam sizes and maximum lengths must be at least 1"));
        }
        if self.text_len_penalty < 0.0 || self.unit_len_penalty < 0.0 {
            return Err(Error::invalid("length penalties must be non-negative"));
        }
        Ok(())
    }

    /// Unit length limit for a first-pass output of `text_len` tokens.
    pub fn unit_limit(&self, text_len: usize) -> usize {
        (10 * text_len.max(1)).min(self.max_unit_len)
    }
}

/// Scores tokens of a [`TokenDecoder`] against precomputed cross-attention.
pub struct DecoderScorer<'a> {
    params: &'a ParamStore,
    dec: &'a TokenDecoder,
    cross: CrossCache,
}

impl<'a> DecoderScorer<'a> {
    pub fn new(params: &'a ParamStore, dec: &'a TokenDecoder, contexts: &[&Tensor]) -> Result<Self> {
        let cross = dec.stack.precompute_cross(params, contexts)?;
        Ok(DecoderScorer { params, dec, cross })
    }
}

impl StepScorer for DecoderScorer<'_> {
    type State = IncrementalState;

    fn initial(&self) -> Result<IncrementalState> {
        Ok(self.dec.stack.new_state())
    }

    fn step(&self, state: &mut IncrementalState, token: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::inference(self.params);
        let (h, logits) = self.dec.step(&mut g, state, &self.cross, token)?;
        Ok((log_softmax(g.row(logits, 0)), g.row(h, 0).to_vec()))
    }
}

/// Best hypothesis of one token pass, without its incremental cache.
#[derive(Clone, Debug, PartialEq)]
pub struct PassOutput {
    /// Tokens without EOS.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub truncated: bool,
    /// Pre-logit states, one per generated token (EOS included).
    pub states: Tensor,
}

impl PassOutput {
    fn from_result<S>(r: &BeamResult<S>, d_model: usize) -> Result<Self> {
        let best = r.best();
        let flat: Vec<f64> = best.states.iter().flatten().copied().collect();
        Ok(PassOutput {
            tokens: best.output().to_vec(),
            score: best.score,
            truncated: r.truncated,
            states: Tensor::matrix(best.states.len(), d_model, flat)?,
        })
    }
}

/// Greedily decoded spectrogram.
#[derive(Clone, Debug, PartialEq)]
pub struct SpecOutput {
    /// `(steps · r) × d_spec` frames.
    pub frames: Tensor,
    pub steps: usize,
    /// The stop probability never crossed the threshold.
    pub truncated: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum SecondPass {
    Units(PassOutput),
    Spectrogram(SpecOutput),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TwoPassOutput {
    pub text: PassOutput,
    pub second: SecondPass,
}

impl TwoPassOutput {
    pub fn units(&self) -> Option<&PassOutput> {
        match &self.second {
            SecondPass::Units(u) => Some(u),
            SecondPass::Spectrogram(_) => None,
        }
    }
}

fn encode(model: &Model, features: &Tensor) -> Result<Tensor> {
    let mut g = Graph::inference(&model.params);
    let h = model.encode(&mut g, features, &mut Dropout::disabled())?;
    Ok(g.tensor(h))
}

fn text_pass(model: &Model, dec: &TokenDecoder, h: &Tensor, beam: usize, cfg: &BeamConfig) -> Result<PassOutput> {
    let scorer = DecoderScorer::new(&model.params, dec, &[h])?;
    let mut sp = SearchParams::new(beam, cfg.max_text_len, cfg.text_len_penalty);
    sp.banned.push(MASK);
    let r = beam_search(&scorer, &sp)?;
    PassOutput::from_result(&r, model.config.d_model)
}

fn unit_pass(model: &Model, contexts: &[&Tensor], beam: usize, max_len: usize, cfg: &BeamConfig) -> Result<PassOutput> {
    let dec = model.unit_decoder.as_ref().ok_or(Error::MissingContext("model has no unit decoder"))?;
    let scorer = DecoderScorer::new(&model.params, dec, contexts)?;
    let r = beam_search(&scorer, &SearchParams::new(beam, max_len, cfg.unit_len_penalty))?;
    PassOutput::from_result(&r, model.config.d_model)
}

/// Greedy spectrogram generation; stops after the first step whose stop
/// probability exceeds `threshold`, or after `max_steps`.
pub fn spectrogram_decode(
    params: &ParamStore,
    dec: &SpecDecoder,
    contexts: &[&Tensor],
    max_steps: usize,
    threshold: f64,
) -> Result<SpecOutput> {
    let cross = dec.stack.precompute_cross(params, contexts)?;
    let mut state = dec.stack.new_state();
    let width = dec.reduction * dec.d_spec;
    let mut prev = vec![0.0; width];
    let mut frames = Vec::new();
    let mut steps = 0;
    let mut truncated = true;
    while steps < max_steps {
        let mut g = Graph::inference(params);
        let out = dec.step(&mut g, &mut state, &cross, &prev)?;
        prev = g.row(out.frames, 0).to_vec();
        frames.extend_from_slice(&prev);
        steps += 1;
        let stop = 1.0 / (1.0 + (-g.row(out.eos_logits, 0)[0]).exp());
        if stop > threshold {
            truncated = false;
            break;
        }
    }
    Ok(SpecOutput { frames: Tensor::matrix(steps * dec.reduction, dec.d_spec, frames)?, steps, truncated })
}

/// Two-pass decoding: a text beam search, the best hypothesis's cached
/// first-pass states through the bridge encoder, then a second search over
/// units (or greedy spectrogram frames) conditioned on them.
pub fn two_pass_decode(model: &Model, features: &Tensor, cfg: &BeamConfig) -> Result<TwoPassOutput> {
    cfg.validate()?;
    if !model.arch().is_two_pass() {
        return Err(Error::invalid(format!("two-pass decoding of a {} model", model.arch())));
    }
    let h = encode(model, features)?;
    let text_dec = model.text_decoder.as_ref().ok_or(Error::MissingContext("model has no text decoder"))?;
    let text = text_pass(model, text_dec, &h, cfg.b_1st, cfg)?;

    let mut g = Graph::inference(&model.params);
    let d_text = g.constant(&text.states);
    let z = model.bridge(&mut g, d_text, &mut Dropout::disabled())?;
    let z = g.tensor(z);

    let second = if model.arch() == Architecture::UnitY {
        let limit = cfg.unit_limit(text.tokens.len());
        let contexts: Vec<&Tensor> = match model.config.second_pass_mode().contexts() {
            1 => vec![&z],
            _ => vec![&z, &h],
        };
        SecondPass::Units(unit_pass(model, &contexts, cfg.b_2nd, limit, cfg)?)
    } else {
        let dec = model.spec_decoder.as_ref().ok_or(Error::MissingContext("model has no spectrogram decoder"))?;
        let limit = cfg.unit_limit(text.tokens.len());
        SecondPass::Spectrogram(spectrogram_decode(&model.params, dec, &[&z], limit, cfg.eos_threshold)?)
    };
    Ok(TwoPassOutput { text, second })
}

/// Single-pass decoding. S2UT searches units with beam `beam`; S2SpecT
/// decodes frames greedily with the EOS threshold.
pub fn single_pass_decode(model: &Model, features: &Tensor, beam: usize, max_len: usize, cfg: &BeamConfig) -> Result<SecondPass> {
    let h = encode(model, features)?;
    match model.arch() {
        Architecture::S2ut => Ok(SecondPass::Units(unit_pass(model, &[&h], beam, max_len, cfg)?)),
        Architecture::S2specT => {
            let dec = model.spec_decoder.as_ref().ok_or(Error::MissingContext("model has no spectrogram decoder"))?;
            Ok(SecondPass::Spectrogram(spectrogram_decode(&model.params, dec, &[&h], max_len, cfg.eos_threshold)?))
        }
        a => Err(Error::invalid(format!("single-pass decoding of a {a} model"))),
    }
}

/// Text decoding with the primary (S2TT) or auxiliary text decoder, or the
/// transcript decoder of an ASR model.
pub fn text_decode(model: &Model, features: &Tensor, beam: usize, cfg: &BeamConfig) -> Result<PassOutput> {
    let h = encode(model, features)?;
    let dec = match model.arch() {
        Architecture::Asr => model.asr_decoder.as_ref(),
        _ => model.text_decoder.as_ref(),
    }
    .ok_or(Error::MissingContext("model has no text decoder"))?;
    text_pass(model, dec, &h, beam, cfg)
}

/// First-pass states of `tokens` by a full teacher-forced forward, including
/// the state that predicts EOS.
pub fn recompute_d_text(model: &Model, features: &Tensor, tokens: &[usize]) -> Result<Tensor> {
    let dec = model.text_decoder.as_ref().ok_or(Error::MissingContext("model has no text decoder"))?;
    let mut g = Graph::inference(&model.params);
    let mut drop = Dropout::disabled();
    let h = model.encode(&mut g, features, &mut drop)?;
    let (states, _) = dec.forward(&mut g, &decoder_input(tokens), &[h], &mut drop)?;
    Ok(g.tensor(states))
}

/// Decodes with whatever search the architecture calls for and returns one
/// output record.
pub fn decode_any(model: &Model, id: &str, features: &Tensor, cfg: &BeamConfig) -> Result<DecodeRecord> {
    let mut rec = DecodeRecord { id: id.to_string(), ..DecodeRecord::default() };
    let take_units = |rec: &mut DecodeRecord, second: SecondPass| match second {
        SecondPass::Units(u) => {
            rec.units = u.tokens;
            rec.unit_score = u.score;
            rec.unit_truncated = u.truncated;
        }
        SecondPass::Spectrogram(s) => {
            rec.unit_truncated = s.truncated;
        }
    };
    match model.arch() {
        Architecture::UnitY | Architecture::S2specT2 => {
            let out = two_pass_decode(model, features, cfg)?;
            rec.text = out.text.tokens;
            rec.text_score = out.text.score;
            rec.text_truncated = out.text.truncated;
            take_units(&mut rec, out.second);
        }
        Architecture::S2ut | Architecture::S2specT => {
            let out = single_pass_decode(model, features, cfg.b_1st, cfg.max_unit_len, cfg)?;
            take_units(&mut rec, out);
        }
        Architecture::S2tt | Architecture::Asr => {
            let out = text_decode(model, features, cfg.b_1st, cfg)?;
            rec.text = out.tokens;
            rec.text_score = out.score;
            rec.text_truncated = out.truncated;
        }
    }
    Ok(rec)
}

/// One line of a decode output file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DecodeRecord {
    pub id: String,
    pub text: Vec<usize>,
    pub units: Vec<usize>,
    pub text_score: f64,
    pub unit_score: f64,
    pub text_truncated: bool,
    pub unit_truncated: bool,
}

const DECODE_HEADER: &str = "id\ttext\tunits\ttext_score\tunit_score\ttext_truncated\tunit_truncated";

fn ids(xs: &[usize]) -> String {
    let mut s = String::new();
    for (i, x) in xs.iter().enumerate() {
        if i > 0 {
            s.push(' ');
        }
        write!(s, "{x}").unwrap();
    }
    s
}

pub fn write_decodes<W: Write>(mut w: W, records: &[DecodeRecord]) -> Result<()> {
    writeln!(w, "{DECODE_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.id,
            ids(&r.text),
            ids(&r.units),
            r.text_score,
            r.unit_score,
            u8::from(r.text_truncated),
            u8::from(r.unit_truncated)
        )?;
    }
    Ok(())
}

pub fn read_decodes<R: Read>(r: R) -> Result<Vec<DecodeRecord>> {
    let mut lines = BufReader::new(r).lines();
    match lines.next() {
        Some(Ok(h)) if h == DECODE_HEADER => {}
        _ => return Err(Error::Format("missing decode header".into())),
    }
    let bad = |n: usize, what: &str| Error::Format(format!("decode line {n}: bad {what}"));
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let n = i + 2;
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 7 {
            return Err(bad(n, "field count"));
        }
        let list = |s: &str| -> Result<Vec<usize>> {
            s.split_ascii_whitespace().map(|t| t.parse().map_err(|_| bad(n, "token id"))).collect()
        };
        let flag = |s: &str| match s {
            "0" => Ok(false),
            "1" => Ok(true),
            _ => Err(bad(n, "flag")),
        };
        out.push(DecodeRecord {
            id: f[0].to_string(),
            text: list(f[1])?,
            units: list(f[2])?,
            text_score: f[3].parse().map_err(|_| bad(n, "score"))?,
            unit_score: f[4].parse().map_err(|_| bad(n, "score"))?,
            text_truncated: flag(f[5])?,
            unit_truncated: flag(f[6])?,
        });
    }
    Ok(out)
}

/// Strips a trailing EOS, for comparing references and hypotheses.
pub fn strip_eos(tokens: &[usize]) -> &[usize] {
    match tokens.last() {
        Some(&EOS) => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decode_file_round_trip() {
        let recs = vec![
            DecodeRecord { id: "a".into(), text: vec![3, 4], units: vec![5], text_score: -1.25, ..Default::default() },
            DecodeRecord { id: "b".into(), unit_truncated: true, unit_score: -0.1, ..Default::default() },
        ];
        let mut buf = Vec::new();
        write_decodes(&mut buf, &recs).unwrap();
        assert_eq!(read_decodes(&buf[..]).unwrap(), recs);
        assert!(read_decodes("x\n".as_bytes()).is_err());
    }

    #[test]
    fn unit_limit_scales_with_text() {
        let cfg = BeamConfig { max_unit_len: 50, ..Default::default() };
        assert_eq!(cfg.unit_limit(0), 10);
        assert_eq!(cfg.unit_limit(3), 30);
        assert_eq!(cfg.unit_limit(9), 50);
    }
}
