//! Beam search over any incremental next-token scorer.

use std::cmp::Ordering;

use crate::data::{BOS, EOS};
use crate::error::{Error, Result};

/// Incremental next-token distribution with a cloneable cache.
pub trait StepScorer {
    type State: Clone;

    /// Fresh cache with no token consumed.
    fn initial(&self) -> Result<Self::State>;

    /// Consumes `token` and returns the log-probabilities of the next token
    /// together with the pre-logit state that produced them.
    fn step(&self, state: &mut Self::State, token: usize) -> Result<(Vec<f64>, Vec<f64>)>;
}

#[derive(Clone, Debug)]
pub struct Hypothesis<S> {
    /// Generated tokens, ending in EOS once finished.
    pub tokens: Vec<usize>,
    /// Sum of the chosen tokens' log-probabilities.
    pub score: f64,
    pub finished: bool,
    pub state: S,
    /// Pre-logit state that scored each token; same length as `tokens`.
    pub states: Vec<Vec<f64>>,
}

impl<S> Hypothesis<S> {
    /// Tokens without the trailing EOS.
    pub fn output(&self) -> &[usize] {
        if self.finished {
            &self.tokens[..self.tokens.len() - 1]
        } else {
            &self.tokens
        }
    }

    pub fn normalized(&self, p: f64) -> f64 {
        normalize(self.score, self.tokens.len(), p)
    }
}

#[derive(Clone, Debug)]
pub struct BeamResult<S> {
    /// Best first. Finished hypotheses only, unless `truncated`.
    pub hyps: Vec<Hypothesis<S>>,
    /// No hypothesis finished within the length limit.
    pub truncated: bool,
}

impl<S> BeamResult<S> {
    pub fn best(&self) -> &Hypothesis<S> {
        &self.hyps[0]
    }
}

/// `score / len^p`; the empty prefix keeps its raw score.
pub fn normalize(score: f64, len: usize, p: f64) -> f64 {
    if p == 0.0 || len == 0 {
        score
    } else {
        score / (len as f64).powf(p)
    }
}

/// Search limits for one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchParams {
    pub beam: usize,
    /// Maximum number of generated tokens, EOS included.
    pub max_len: usize,
    pub length_penalty: f64,
    /// Token ids never generated (BOS is always excluded).
    pub banned: Vec<usize>,
}

impl SearchParams {
    pub fn new(beam: usize, max_len: usize, length_penalty: f64) -> Self {
        SearchParams { beam, max_len, length_penalty, banned: Vec::new() }
    }
}

struct Live<S> {
    hyp: Hypothesis<S>,
    log_probs: Vec<f64>,
    pre_logit: Vec<f64>,
}

enum Cand {
    Done(usize),
    Expand { parent: usize, token: usize, score: f64 },
}

fn lex(a: &[usize], a_last: Option<usize>, b: &[usize], b_last: Option<usize>) -> Ordering {
    a.iter().copied().chain(a_last).cmp(b.iter().copied().chain(b_last))
}

/// Standard beam search. Every step expands each live hypothesis over the
/// whole vocabulary; finished hypotheses stay in the pool and compete for
/// the `beam` slots at their length-normalized score. Ties go to the
/// lexicographically smaller token sequence.
pub fn beam_search<T: StepScorer>(scorer: &T, params: &SearchParams) -> Result<BeamResult<T::State>> {
    if params.beam == 0 || params.max_len == 0 {
        return Err(Error::invalid("beam and max_len must be at least 1"));
    }
    let p = params.length_penalty;
    let mut state = scorer.initial()?;
    let (log_probs, pre_logit) = scorer.step(&mut state, BOS)?;
    let allowed: Vec<bool> =
        (0..log_probs.len()).map(|v| v != BOS && !params.banned.contains(&v)).collect();
    let root = Hypothesis { tokens: Vec::new(), score: 0.0, finished: false, state, states: Vec::new() };
    let mut live = vec![Live { hyp: root, log_probs, pre_logit }];
    let mut done: Vec<Hypothesis<T::State>> = Vec::new();

    for _ in 0..params.max_len {
        let mut cands: Vec<Cand> = (0..done.len()).map(Cand::Done).collect();
        for (i, l) in live.iter().enumerate() {
            if l.log_probs.len() != allowed.len() {
                return Err(Error::shape("scorer changed its vocabulary size"));
            }
            for (v, &lp) in l.log_probs.iter().enumerate() {
                if allowed[v] && lp > f64::NEG_INFINITY {
                    cands.push(Cand::Expand { parent: i, token: v, score: l.hyp.score + lp });
                }
            }
        }
        let key = |c: &Cand| -> (f64, &[usize], Option<usize>) {
            match *c {
                Cand::Done(i) => (done[i].normalized(p), &done[i].tokens, None),
                Cand::Expand { parent, token, score } => {
                    let prefix = &live[parent].hyp.tokens;
                    (normalize(score, prefix.len() + 1, p), prefix, Some(token))
                }
            }
        };
        cands.sort_by(|a, b| {
            let (sa, ta, la) = key(a);
            let (sb, tb, lb) = key(b);
            sb.total_cmp(&sa).then_with(|| lex(ta, la, tb, lb))
        });
        cands.truncate(params.beam);

        let mut next_done = Vec::new();
        let mut next_live = Vec::new();
        for c in cands {
            match c {
                Cand::Done(i) => next_done.push(done[i].clone()),
                Cand::Expand { parent, token, score } => {
                    let l = &live[parent];
                    let mut tokens = l.hyp.tokens.clone();
                    tokens.push(token);
                    let mut states = l.hyp.states.clone();
                    states.push(l.pre_logit.clone());
                    let mut state = l.hyp.state.clone();
                    if token == EOS {
                        next_done.push(Hypothesis { tokens, score, finished: true, state, states });
                    } else {
                        let (log_probs, pre_logit) = scorer.step(&mut state, token)?;
                        let hyp = Hypothesis { tokens, score, finished: false, state, states };
                        next_live.push(Live { hyp, log_probs, pre_logit });
                    }
                }
            }
        }
        done = next_done;
        live = next_live;
        if live.is_empty() {
            break;
        }
    }

    let rank = |hyps: &mut Vec<Hypothesis<T::State>>| {
        hyps.sort_by(|a, b| b.normalized(p).total_cmp(&a.normalized(p)).then_with(|| a.tokens.cmp(&b.tokens)));
    };
    if done.is_empty() {
        let mut hyps: Vec<_> = live.into_iter().map(|l| l.hyp).collect();
        rank(&mut hyps);
        Ok(BeamResult { hyps, truncated: true })
    } else {
        rank(&mut done);
        Ok(BeamResult { hyps: done, truncated: false })
    }
}

/// Greedy argmax chain, the reference for `beam = 1`.
pub fn greedy_search<T: StepScorer>(scorer: &T, params: &SearchParams) -> Result<(Vec<usize>, f64, bool)> {
    let mut state = scorer.initial()?;
    let (mut lp, _) = scorer.step(&mut state, BOS)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for _ in 0..params.max_len {
        let best = (0..lp.len())
            .filter(|&v| v != BOS && !params.banned.contains(&v))
            .fold(None, |acc: Option<usize>, v| match acc {
                Some(b) if lp[b] >= lp[v] => Some(b),
                _ => Some(v),
            })
            .ok_or_else(|| Error::invalid("every token is banned"))?;
        score += lp[best];
        tokens.push(best);
        if best == EOS {
            return Ok((tokens, score, false));
        }
        lp = scorer.step(&mut state, best)?.0;
    }
    Ok((tokens, score, true))
}
