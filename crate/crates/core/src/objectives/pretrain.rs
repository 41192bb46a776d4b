//! Denoising pretraining of the first-pass text decoder.
//!
//! A text encoder reads a span-masked sentence and the decoder reconstructs
//! the original. The decoder is built under the same parameter names and
//! shapes as the first-pass decoder of a two-pass model, so its weights load
//! directly with [`Model::load_params`](crate::models::Model::load_params).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::train::{fit, mix_seed, HasParams, TrainConfig, TrainLog};
use super::LossReport;
use crate::data::MASK;
use crate::error::{Error, Result};
use crate::models::{decoder_input, decoder_target, Checkpoint, ModelConfig};
use crate::nn::{add_positions, CrossMode, Dropout, TokenDecoder, TransformerEncoder};
use crate::tensor::{Graph, ParamId, ParamStore, Var};

/// Prefix shared by the pretrained decoder and the first-pass decoder.
pub const TEXT_DECODER_PREFIX: &str = "text.";

#[derive(Clone, Debug)]
pub struct TextDenoiser {
    pub params: ParamStore,
    embed: ParamId,
    encoder: TransformerEncoder,
    pub decoder: TokenDecoder,
}

impl HasParams for TextDenoiser {
    fn params(&self) -> &ParamStore {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
}

impl TextDenoiser {
    /// Decoder shaped like the first pass of `cfg`, with an `enc_layers`-deep text encoder.
    pub fn new(cfg: &ModelConfig, enc_layers: usize, seed: u64) -> Result<Self> {
        let block = cfg.block();
        block.validate()?;
        if cfg.n_1st == 0 {
            return Err(Error::invalid("pretraining needs a first-pass decoder depth n_1st > 0"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.d_model;
        let embed = params.add_randn("dn.embed", &[cfg.text_vocab, d], (1.0 / d as f64).sqrt(), &mut rng);
        let encoder = TransformerEncoder::new(&mut params, "dn.enc", enc_layers, &block, &mut rng);
        let decoder = TokenDecoder::new(&mut params, "text", cfg.text_vocab, cfg.n_1st, &block, CrossMode::Single, &mut rng);
        Ok(TextDenoiser { params, embed, encoder, decoder })
    }

    /// Teacher-forced reconstruction logits of `target` from `masked`.
    pub fn forward(&self, g: &mut Graph, masked: &[usize], target: &[usize], drop: &mut Dropout) -> Result<Var> {
        let table = g.param(self.embed);
        let x = g.embedding(table, masked)?;
        let x = add_positions(g, x, 0)?;
        let x = drop.apply(g, x);
        let mem = self.encoder.forward(g, x, drop)?;
        let (_, logits) = self.decoder.forward(g, &decoder_input(target), &[mem], drop)?;
        Ok(logits)
    }

    /// Greedy reconstruction, for monitoring.
    pub fn reconstruct(&self, masked: &[usize], max_len: usize) -> Result<Vec<usize>> {
        let mut out: Vec<usize> = Vec::new();
        while out.len() < max_len {
            let mut g = Graph::inference(&self.params);
            let logits = self.forward(&mut g, masked, &out, &mut Dropout::disabled())?;
            let last = g.row(logits, out.len());
            let best = crate::tensor::argmax(last);
            if best == crate::data::EOS {
                break;
            }
            out.push(best);
        }
        Ok(out)
    }

    /// The decoder's parameters, named like a first-pass decoder.
    pub fn export_decoder(&self) -> Checkpoint {
        let params = self
            .params
            .ids()
            .filter(|&id| self.params.name(id).starts_with(TEXT_DECODER_PREFIX))
            .map(|id| (self.params.name(id).to_string(), self.params.get(id).clone()))
            .collect();
        Checkpoint { config: String::new(), params }
    }
}

/// Replaces about `ratio · len` tokens, in spans of 1 to 3, by the mask token.
pub fn span_mask<R: Rng + ?Sized>(tokens: &[usize], ratio: f64, rng: &mut R) -> Vec<usize> {
    let mut out = tokens.to_vec();
    let target = (ratio * tokens.len() as f64).round() as usize;
    let mut masked = 0;
    while masked < target.min(tokens.len()) {
        let len = rng.random_range(1..=3usize);
        let start = rng.random_range(0..tokens.len());
        for t in out.iter_mut().skip(start).take(len) {
            if *t != MASK && masked < target {
                *t = MASK;
                masked += 1;
            }
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub denoiser: TextDenoiser,
    pub log: TrainLog,
}

/// Trains a [`TextDenoiser`] on `corpus`; masks are redrawn at every visit.
pub fn denoise_pretrain_text_decoder(
    corpus: &[Vec<usize>],
    mask_ratio: f64,
    model_cfg: &ModelConfig,
    enc_layers: usize,
    cfg: &TrainConfig,
) -> Result<PretrainOutcome> {
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::invalid("mask_ratio must lie in [0, 1)"));
    }
    if corpus.iter().any(Vec::is_empty) {
        return Err(Error::invalid("corpus contains an empty sentence"));
    }
    let mut denoiser = TextDenoiser::new(model_cfg, enc_layers, cfg.seed)?;
    let eps = cfg.label_smoothing;
    let log = fit(
        &mut denoiser,
        corpus.len(),
        cfg,
        |m, g, idx, step| {
            let sentence = &corpus[idx];
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, step, idx, 3));
            let masked = span_mask(sentence, mask_ratio, &mut rng);
            let mut drop = Dropout::new(cfg.dropout, mix_seed(cfg.seed, step, idx, 1));
            let logits = m.forward(g, &masked, sentence, &mut drop)?;
            let loss = g.xent_smoothed(logits, &decoder_target(sentence), eps)?;
            let report = LossReport { total: g.scalar(loss), s2t: Some(g.scalar(loss)), ..Default::default() };
            Ok((loss, report))
        },
        |_, _| Ok(false),
    )?;
    Ok(PretrainOutcome { denoiser, log })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn span_mask_hits_requested_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let toks: Vec<usize> = (3..13).collect();
        for ratio in [0.0, 0.3, 0.5, 0.9] {
            let m = span_mask(&toks, ratio, &mut rng);
            let n = m.iter().filter(|&&t| t == MASK).count();
            assert_eq!(n, (ratio * 10.0).round() as usize);
            assert!(m.iter().zip(&toks).all(|(a, b)| a == b || *a == MASK));
        }
    }
}
