//! Synthetic speech/text/unit translation task.
//!
//! Source sentences are walks of a sparse Markov chain over an inventory of
//! source symbols. Each symbol is rendered as `f` noisy copies of a fixed
//! feature template, maps to one target subword, and each subword maps to a
//! fixed string of `u` discrete units.

mod io;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::models::Targets;
use crate::tensor::Tensor;

pub use io::{read_dataset, read_dataset_from, write_dataset, write_dataset_to, DATASET_VERSION};

pub const BOS: usize = 0;
pub const EOS: usize = 1;
/// Mask token of the text vocabulary (denoising pretraining only).
pub const MASK: usize = 2;
/// Reserved ids at the start of text and source vocabularies.
pub const TEXT_SPECIALS: usize = 3;
/// Reserved ids at the start of the unit vocabulary.
pub const UNIT_SPECIALS: usize = 2;

/// Successor weights of the source-symbol Markov chain. Each weight selects
/// one fixed derangement of the inventory, so the transition matrix is
/// doubly stochastic and no symbol follows itself.
const TRANSITION_WEIGHTS: [f64; 3] = [0.6, 0.25, 0.15];

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub n_symbols: usize,
    /// Number of target subwords (at least `n_symbols`).
    pub text_vocab: usize,
    /// Number of discrete units.
    pub unit_vocab: usize,
    pub frames_per_symbol: usize,
    pub units_per_subword: usize,
    pub sigma: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub d_feat: usize,
    /// Width of the synthetic spectrogram frames.
    pub d_spec: usize,
    pub seed: u64,
}

crate::configurable!(TaskSpec {
    n_symbols,
    text_vocab,
    unit_vocab,
    frames_per_symbol,
    units_per_subword,
    sigma,
    min_len,
    max_len,
    d_feat,
    d_spec,
    seed,
});

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            n_symbols: 24,
            text_vocab: 28,
            unit_vocab: 32,
            frames_per_symbol: 8,
            units_per_subword: 4,
            sigma: 0.05,
            min_len: 3,
            max_len: 6,
            d_feat: 16,
            d_spec: 8,
            seed: 1,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_symbols < 3 {
            return Err(Error::invalid("n_symbols must be at least 3"));
        }
        if self.text_vocab < self.n_symbols {
            return Err(Error::invalid("text_vocab must cover every source symbol"));
        }
        if self.unit_vocab < 2 {
            return Err(Error::invalid("unit_vocab must be at least 2"));
        }
        if self.frames_per_symbol < 2 || self.units_per_subword < 2 {
            return Err(Error::invalid("frames_per_symbol and units_per_subword must be at least 2"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::invalid("sigma must be a finite non-negative number"));
        }
        if self.min_len < 1 || self.min_len > self.max_len {
            return Err(Error::invalid("sentence length range is empty"));
        }
        if self.d_feat == 0 || self.d_spec == 0 {
            return Err(Error::invalid("feature widths must be positive"));
        }
        Ok(())
    }

    /// Model-side text vocabulary size (subwords plus specials).
    pub fn text_classes(&self) -> usize {
        self.text_vocab + TEXT_SPECIALS
    }

    pub fn unit_classes(&self) -> usize {
        self.unit_vocab + UNIT_SPECIALS
    }

    /// Vocabulary of source transcripts (auxiliary ASR task).
    pub fn source_classes(&self) -> usize {
        self.n_symbols + TEXT_SPECIALS
    }

    /// Expected token distribution of generated text. The chain starts
    /// uniformly and its transition matrix is doubly stochastic, so every
    /// position is uniform over the symbols that map to subwords.
    pub fn unigram_distribution(&self) -> Vec<f64> {
        let lex = Lexicon::new(self);
        let mut p = vec![0.0; self.text_classes()];
        for &w in &lex.subword {
            p[w] = 1.0 / self.n_symbols as f64;
        }
        p
    }
}

/// The fixed, seed-determined mappings of a task.
#[derive(Clone, Debug)]
pub struct Lexicon {
    /// Feature template per source symbol, `n_symbols × d_feat`.
    pub templates: Vec<Vec<f64>>,
    /// Text id of each source symbol.
    pub subword: Vec<usize>,
    /// Unit string (unit ids) for each text id; empty for specials and unused subwords.
    pub units: Vec<Vec<usize>>,
    /// Spectrogram template and duration per unit id.
    pub spec_templates: Vec<Vec<f64>>,
    pub durations: Vec<usize>,
    successors: Vec<[usize; 3]>,
}

impl Lexicon {
    pub fn new(spec: &TaskSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_1e81_c0de);
        let templates = (0..spec.n_symbols)
            .map(|_| (0..spec.d_feat).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();

        let mut ids: Vec<usize> = (TEXT_SPECIALS..spec.text_classes()).collect();
        ids.shuffle(&mut rng);
        let subword: Vec<usize> = ids[..spec.n_symbols].to_vec();

        let mut units = vec![Vec::new(); spec.text_classes()];
        for &w in &subword {
            units[w] = unit_string(spec, &mut rng);
        }

        let spec_templates = (0..spec.unit_classes())
            .map(|_| (0..spec.d_spec).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let durations = (0..spec.unit_classes()).map(|_| rng.random_range(1..=2)).collect();

        let perms: Vec<Vec<usize>> = (0..TRANSITION_WEIGHTS.len()).map(|_| derangement(spec.n_symbols, &mut rng)).collect();
        let successors = (0..spec.n_symbols).map(|s| [perms[0][s], perms[1][s], perms[2][s]]).collect();

        Lexicon { templates, subword, units, spec_templates, durations, successors }
    }

    fn sample_sentence<R: Rng>(&self, spec: &TaskSpec, rng: &mut R) -> Vec<usize> {
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let mut s = vec![rng.random_range(0..spec.n_symbols)];
        while s.len() < len {
            let prev = *s.last().unwrap();
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut next = self.successors[prev][TRANSITION_WEIGHTS.len() - 1];
            for (j, w) in TRANSITION_WEIGHTS.iter().enumerate() {
                acc += w;
                if u < acc {
                    next = self.successors[prev][j];
                    break;
                }
            }
            s.push(next);
        }
        s
    }

    pub fn text_of(&self, symbols: &[usize]) -> Vec<usize> {
        symbols.iter().map(|&s| self.subword[s]).collect()
    }

    /// Units of a text sequence after collapsing.
    pub fn units_of(&self, text: &[usize]) -> Vec<usize> {
        let raw: Vec<usize> = text.iter().flat_map(|&w| self.units[w].iter().copied()).collect();
        collapse_units(&raw)
    }

    /// Synthetic spectrogram: each unit's template repeated for its duration.
    pub fn spectrogram(&self, units: &[usize]) -> Tensor {
        let d = self.spec_templates.first().map_or(0, Vec::len);
        let mut data = Vec::new();
        let mut rows = 0;
        for &u in units {
            for _ in 0..self.durations[u] {
                data.extend_from_slice(&self.spec_templates[u]);
                rows += 1;
            }
        }
        Tensor::matrix(rows, d, data).expect("spectrogram shape")
    }

    fn features<R: Rng>(&self, spec: &TaskSpec, symbols: &[usize], rng: &mut R) -> Tensor {
        let d = spec.d_feat;
        let t = symbols.len() * spec.frames_per_symbol;
        let mut data = Vec::with_capacity(t * d);
        for &s in symbols {
            for _ in 0..spec.frames_per_symbol {
                for &v in &self.templates[s] {
                    let noise: f64 = StandardNormal.sample(rng);
                    data.push(v + spec.sigma * noise);
                }
            }
        }
        normalize_utterance(&mut data, t, d);
        Tensor::matrix(t, d, data).expect("feature shape")
    }
}

fn unit_string<R: Rng>(spec: &TaskSpec, rng: &mut R) -> Vec<usize> {
    let n = spec.unit_vocab;
    let u = spec.units_per_subword;
    if u <= n {
        let mut pool: Vec<usize> = (0..n).collect();
        pool.shuffle(rng);
        pool[..u].iter().map(|&x| x + UNIT_SPECIALS).collect()
    } else {
        let mut out: Vec<usize> = Vec::with_capacity(u);
        while out.len() < u {
            let x = rng.random_range(0..n) + UNIT_SPECIALS;
            if out.last() != Some(&x) {
                out.push(x);
            }
        }
        out
    }
}

fn derangement<R: Rng>(n: usize, rng: &mut R) -> Vec<usize> {
    loop {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &x)| i != x) {
            return p;
        }
    }
}

/// Per-dimension zero mean, unit variance over the utterance. A dimension
/// with zero variance is only centered.
fn normalize_utterance(data: &mut [f64], rows: usize, cols: usize) {
    for c in 0..cols {
        let mean = (0..rows).map(|r| data[r * cols + c]).sum::<f64>() / rows as f64;
        let var = (0..rows).map(|r| (data[r * cols + c] - mean).powi(2)).sum::<f64>() / rows as f64;
        let inv = if var > 1e-24 { var.sqrt().recip() } else { 1.0 };
        for r in 0..rows {
            data[r * cols + c] = (data[r * cols + c] - mean) * inv;
        }
    }
}

/// One synthetic utterance.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub features: Tensor,
    /// Source transcript in the source vocabulary (for the ASR task).
    pub source: Vec<usize>,
    pub text: Vec<usize>,
    pub units: Vec<usize>,
    /// Spectrogram target for spectrogram models; derived from the units,
    /// never stored in dataset files.
    pub spectrogram: Option<Tensor>,
}

impl Example {
    pub fn targets(&self) -> Targets<'_> {
        Targets { text: &self.text, units: &self.units, source: &self.source, spec: self.spectrogram.as_ref() }
    }

    pub fn frames(&self) -> usize {
        self.features.rows()
    }

    /// |U| / T.
    pub fn length_ratio(&self) -> f64 {
        self.units.len() as f64 / self.frames() as f64
    }
}

/// Fills in the synthetic spectrogram target of every example.
pub fn attach_spectrograms(spec: &TaskSpec, examples: &mut [Example]) {
    let lex = Lexicon::new(spec);
    for e in examples {
        e.spectrogram = Some(lex.spectrogram(&e.units));
    }
}

/// Removes consecutive duplicates.
pub fn collapse_units(raw: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(raw.len());
    for &u in raw {
        if out.last() != Some(&u) {
            out.push(u);
        }
    }
    out
}

/// Keeps an example iff |U| / T ≤ threshold.
pub fn length_ratio_filter(example: &Example, threshold: f64) -> Result<bool> {
    ratio_keep(example.units.len(), example.frames(), threshold)
}

pub fn ratio_keep(units: usize, frames: usize, threshold: f64) -> Result<bool> {
    if threshold.is_nan() || threshold <= 0.0 {
        return Err(Error::invalid("length ratio threshold must be positive"));
    }
    if frames == 0 {
        return Err(Error::invalid("example has no frames"));
    }
    Ok(units as f64 / frames as f64 <= threshold)
}

fn make_example<R: Rng>(spec: &TaskSpec, lex: &Lexicon, id: String, symbols: &[usize], rng: &mut R) -> Example {
    let text = lex.text_of(symbols);
    Example {
        id,
        features: lex.features(spec, symbols, rng),
        source: symbols.iter().map(|&s| s + TEXT_SPECIALS).collect(),
        units: lex.units_of(&text),
        text,
        spectrogram: None,
    }
}

/// `n` independent examples, reproducible from `spec.seed`.
pub fn gen_dataset(spec: &TaskSpec, n: usize) -> Result<Vec<Example>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    let lex = Lexicon::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    Ok((0..n)
        .map(|i| {
            let s = lex.sample_sentence(spec, &mut rng);
            make_example(spec, &lex, format!("utt{i:05}"), &s, &mut rng)
        })
        .collect())
}

/// Unlabeled text sampled from the task's sentence distribution.
pub fn gen_text_corpus(spec: &TaskSpec, n: usize) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let lex = Lexicon::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x7e47_c0de);
    Ok((0..n).map(|_| lex.text_of(&lex.sample_sentence(spec, &mut rng))).collect())
}

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

/// Train/dev/test sets over distinct source sentences. Fails when the
/// sentence space is too small for the requested sizes.
pub fn gen_splits(spec: &TaskSpec, n_train: usize, n_dev: usize, n_test: usize) -> Result<Splits> {
    spec.validate()?;
    let total = n_train + n_dev + n_test;
    let lex = Lexicon::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut seen = HashSet::new();
    let mut sentences = Vec::with_capacity(total);
    let mut attempts = 0usize;
    while sentences.len() < total {
        attempts += 1;
        if attempts > 200 * total + 10_000 {
            return Err(Error::invalid(format!(
                "only {} distinct sentences found, {total} requested",
                sentences.len()
            )));
        }
        let s = lex.sample_sentence(spec, &mut rng);
        if seen.insert(s.clone()) {
            sentences.push(s);
        }
    }
    sentences.shuffle(&mut rng);
    let mut examples: Vec<Example> = sentences
        .iter()
        .enumerate()
        .map(|(i, s)| make_example(spec, &lex, format!("utt{i:05}"), s, &mut rng))
        .collect();
    let test = examples.split_off(n_train + n_dev);
    let dev = examples.split_off(n_train);
    Ok(Splits { train: examples, dev, test })
}
