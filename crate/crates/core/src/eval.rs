//! Corpus BLEU, chrF and exact match over token sequences.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::io::Write;

use crate::data::Example;
use crate::error::{Error, Result};
use crate::search::DecodeRecord;

/// Floor used in place of a zero n-gram precision.
pub const BLEU_EPSILON: f64 = 1e-16;

#[derive(Clone, Debug, PartialEq)]
pub struct BleuReport {
    /// 0 to 100.
    pub score: f64,
    /// Clipped precision of each order; `None` where the hypotheses hold no
    /// n-gram of that order.
    pub precisions: Vec<Option<f64>>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BLEU = {:.2} ", self.score)?;
        for (i, p) in self.precisions.iter().enumerate() {
            if i > 0 {
                f.write_str("/")?;
            }
            match p {
                Some(p) => write!(f, "{:.1}", 100.0 * p)?,
                None => f.write_str("-")?,
            }
        }
        write!(f, " (BP = {:.3}, hyp_len = {}, ref_len = {})", self.brevity_penalty, self.hyp_len, self.ref_len)
    }
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Matched (clipped), hypothesis and reference n-gram totals of one pair.
fn ngram_stats<T: Eq + Hash>(hyp: &[T], reference: &[T], n: usize) -> (usize, usize, usize) {
    let h = ngram_counts(hyp, n);
    let r = ngram_counts(reference, n);
    let matched = h.iter().map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, hyp.len().saturating_sub(n - 1), reference.len().saturating_sub(n - 1))
}

fn check_corpus<T>(hyps: &[T], refs: &[T]) -> Result<()> {
    if hyps.is_empty() {
        return Err(Error::invalid("empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!("{} hypotheses for {} references", hyps.len(), refs.len())));
    }
    Ok(())
}

/// Corpus BLEU with one reference per hypothesis. Zero precisions are
/// floored at [`BLEU_EPSILON`]; orders with no hypothesis n-grams at all
/// are left out of the geometric mean.
pub fn corpus_bleu<T: Eq + Hash, S: AsRef<[T]>>(hyps: &[S], refs: &[S], max_n: usize) -> Result<BleuReport> {
    check_corpus(hyps, refs)?;
    if max_n == 0 {
        return Err(Error::invalid("max_n must be at least 1"));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let (m, t, _) = ngram_stats(h, r, n);
            matched[n - 1] += m;
            total[n - 1] += t;
        }
    }
    let precisions: Vec<Option<f64>> = matched
        .iter()
        .zip(&total)
        .map(|(&m, &t)| (t > 0).then(|| if m == 0 { BLEU_EPSILON } else { m as f64 / t as f64 }))
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    let logs: Vec<f64> = precisions.iter().flatten().map(|p| p.ln()).collect();
    let score = if logs.is_empty() {
        0.0
    } else {
        100.0 * brevity_penalty * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
    };
    Ok(BleuReport { score, precisions, brevity_penalty, hyp_len, ref_len })
}

/// Fraction of hypotheses identical to their reference.
pub fn exact_match<T: PartialEq, S: AsRef<[T]>>(hyps: &[S], refs: &[S]) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let hits = hyps.iter().zip(refs).filter(|(h, r)| h.as_ref() == r.as_ref()).count();
    Ok(hits as f64 / hyps.len() as f64)
}

/// Corpus chrF over symbol n-grams of orders 1 to `n`, 0 to 100. Statistics
/// are pooled over the corpus; the F-score is averaged over the orders
/// present in both hypotheses and references.
pub fn chrf<T: Eq + Hash, S: AsRef<[T]>>(hyps: &[S], refs: &[S], n: usize, beta: f64) -> Result<f64> {
    check_corpus(hyps, refs)?;
    let b2 = beta * beta;
    let mut sum = 0.0;
    let mut orders = 0;
    for k in 1..=n {
        let (mut m, mut th, mut tr) = (0, 0, 0);
        for (h, r) in hyps.iter().zip(refs) {
            let (a, b, c) = ngram_stats(h.as_ref(), r.as_ref(), k);
            m += a;
            th += b;
            tr += c;
        }
        if th == 0 || tr == 0 {
            continue;
        }
        let p = m as f64 / th as f64;
        let r = m as f64 / tr as f64;
        orders += 1;
        if p + r > 0.0 {
            sum += (1.0 + b2) * p * r / (b2 * p + r);
        }
    }
    Ok(if orders == 0 { 0.0 } else { 100.0 * sum / orders as f64 })
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub model: String,
    /// `text` or `unit`.
    pub pass: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metrics<W: Write>(mut w: W, rows: &[MetricRow]) -> Result<()> {
    writeln!(w, "dataset,model,pass,metric,value")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{}", r.dataset, r.model, r.pass, r.metric, r.value)?;
    }
    Ok(())
}

/// Text and unit quality of decoded records against their references.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub text_bleu: f64,
    pub unit_bleu: f64,
    pub text_exact: f64,
    pub unit_exact: f64,
    pub text_chrf: f64,
    pub unit_chrf: f64,
    pub n: usize,
}

impl Evaluation {
    pub fn rows(&self, dataset: &str, model: &str) -> Vec<MetricRow> {
        let row = |pass: &str, metric: &str, value: f64| MetricRow {
            dataset: dataset.to_string(),
            model: model.to_string(),
            pass: pass.to_string(),
            metric: metric.to_string(),
            value,
        };
        vec![
            row("text", "bleu", self.text_bleu),
            row("text", "exact_match", self.text_exact),
            row("text", "chrf", self.text_chrf),
            row("unit", "bleu", self.unit_bleu),
            row("unit", "exact_match", self.unit_exact),
            row("unit", "chrf", self.unit_chrf),
        ]
    }
}

/// Scores `records` against the examples with the same ids.
pub fn evaluate(records: &[DecodeRecord], refs: &[Example]) -> Result<Evaluation> {
    let by_id: HashMap<&str, &Example> = refs.iter().map(|e| (e.id.as_str(), e)).collect();
    let mut pairs = Vec::with_capacity(records.len());
    for r in records {
        let e = by_id.get(r.id.as_str()).ok_or_else(|| Error::invalid(format!("no reference for {}", r.id)))?;
        pairs.push((r, *e));
    }
    let th: Vec<&[usize]> = pairs.iter().map(|(r, _)| r.text.as_slice()).collect();
    let tr: Vec<&[usize]> = pairs.iter().map(|(_, e)| e.text.as_slice()).collect();
    let uh: Vec<&[usize]> = pairs.iter().map(|(r, _)| r.units.as_slice()).collect();
    let ur: Vec<&[usize]> = pairs.iter().map(|(_, e)| e.units.as_slice()).collect();
    Ok(Evaluation {
        text_bleu: corpus_bleu(&th, &tr, 4)?.score,
        unit_bleu: corpus_bleu(&uh, &ur, 4)?.score,
        text_exact: exact_match(&th, &tr)?,
        unit_exact: exact_match(&uh, &ur)?,
        text_chrf: chrf(&th, &tr, 6, 2.0)?,
        unit_chrf: chrf(&uh, &ur, 6, 2.0)?,
        n: pairs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_mismatched_corpora_fail() {
        let e: Vec<Vec<u8>> = Vec::new();
        assert!(corpus_bleu(&e, &e, 4).is_err());
        assert!(exact_match(&[vec![1u8]], &[vec![1u8], vec![2]]).is_err());
    }

    #[test]
    fn empty_hypothesis_scores_zero() {
        let r = corpus_bleu(&[vec![]], &[vec![1u8, 2, 3]], 4).unwrap();
        assert_eq!(r.score, 0.0);
    }
}
