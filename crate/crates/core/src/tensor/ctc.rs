//! Connectionist temporal classification loss, forward-backward in log space.

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct CtcOutput {
    /// `-ln P(target | log_probs)`.
    pub loss: f64,
    /// d loss / d log_probs, row-major `frames × classes`.
    pub grad: Vec<f64>,
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp()).ln()
    }
}

#[inline]
fn lse3(a: f64, b: f64, c: f64) -> f64 {
    let m = a.max(b).max(c);
    if m == f64::NEG_INFINITY {
        m
    } else {
        m + ((a - m).exp() + (b - m).exp() + (c - m).exp()).ln()
    }
}

/// Minimum number of frames needed to emit `target`: one per label plus a
/// separating blank between each pair of equal neighbours.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

/// CTC loss over `log_probs` (`frames × classes`, rows are log-distributions)
/// with the blank at class `classes - 1`.
pub fn ctc_forward(
    log_probs: &[f64],
    frames: usize,
    classes: usize,
    target: &[usize],
) -> Result<CtcOutput> {
    if log_probs.len() != frames * classes || frames == 0 || classes < 2 {
        return Err(Error::shape(format!(
            "ctc log_probs has {} values for {frames}×{classes}",
            log_probs.len()
        )));
    }
    let blank = classes - 1;
    if let Some(&bad) = target.iter().find(|&&y| y >= blank) {
        return Err(Error::ClassOutOfRange { id: bad, classes: blank });
    }
    if min_frames(target) > frames {
        return Err(Error::TargetTooLong { target: target.len(), frames });
    }

    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s.is_multiple_of(2) { blank } else { target[s / 2] };
    // Transition s-2 -> s is allowed for non-blank labels differing from l'[s-2].
    let skip: Vec<bool> = (0..s_len)
        .map(|s| s >= 2 && label(s) != blank && label(s) != label(s - 2))
        .collect();
    let lp = |t: usize, s: usize| log_probs[t * classes + label(s)];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, 0);
    if s_len > 1 {
        alpha[1] = lp(0, 1);
    }
    for t in 1..frames {
        let (prev, cur) = alpha.split_at_mut(t * s_len);
        let prev = &prev[(t - 1) * s_len..];
        for s in 0..s_len {
            let a = prev[s];
            let b = if s >= 1 { prev[s - 1] } else { ninf };
            let c = if skip[s] { prev[s - 2] } else { ninf };
            cur[s] = lse3(a, b, c) + lp(t, s);
        }
    }
    let last = (frames - 1) * s_len;
    let log_p = if s_len > 1 {
        lse2(alpha[last + s_len - 1], alpha[last + s_len - 2])
    } else {
        alpha[last]
    };
    if !log_p.is_finite() {
        return Err(Error::NonFinite);
    }

    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = lp(frames - 1, s_len - 1);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, s_len - 2);
    }
    for t in (0..frames - 1).rev() {
        let (cur, next) = beta.split_at_mut((t + 1) * s_len);
        let cur = &mut cur[t * s_len..];
        for s in 0..s_len {
            let a = next[s];
            let b = if s + 1 < s_len { next[s + 1] } else { ninf };
            let c = if s + 2 < s_len && skip[s + 2] { next[s + 2] } else { ninf };
            cur[s] = lse3(a, b, c) + lp(t, s);
        }
    }

    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            let occ = (a + b - lp(t, s) - log_p).exp();
            grad[t * classes + label(s)] -= occ;
        }
    }
    Ok(CtcOutput { loss: -log_p, grad })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(frames: usize, classes: usize) -> Vec<f64> {
        vec![-(classes as f64).ln(); frames * classes]
    }

    #[test]
    fn single_frame_single_label() {
        // V=2 labels + blank, T=1, target [a]: only path is (a).
        let out = ctc_forward(&uniform(1, 3), 1, 3, &[0]).unwrap();
        assert!((out.loss - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_frames_single_label() {
        // Paths {aa, a-, -a}: 3/9 total probability.
        let out = ctc_forward(&uniform(2, 3), 2, 3, &[0]).unwrap();
        assert!((out.loss + (3.0f64 / 9.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_is_all_blank() {
        let out = ctc_forward(&uniform(2, 3), 2, 3, &[]).unwrap();
        assert!((out.loss - 2.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn repeated_labels_need_separator() {
        assert_eq!(min_frames(&[1, 1]), 3);
        assert!(matches!(
            ctc_forward(&uniform(2, 3), 2, 3, &[1, 1]),
            Err(Error::TargetTooLong { .. })
        ));
        assert!(ctc_forward(&uniform(3, 3), 3, 3, &[1, 1]).is_ok());
    }

    #[test]
    fn blank_in_target_rejected() {
        assert!(matches!(
            ctc_forward(&uniform(3, 3), 3, 3, &[2]),
            Err(Error::ClassOutOfRange { .. })
        ));
    }

    #[test]
    fn gradient_rows_sum_to_minus_one() {
        // Each frame's occupancies form a distribution over extended labels.
        let lp: Vec<f64> = (0..12).map(|i| -1.0 - 0.1 * i as f64).collect();
        let out = ctc_forward(&lp, 4, 3, &[0, 1]).unwrap();
        for t in 0..4 {
            let s: f64 = out.grad[t * 3..t * 3 + 3].iter().sum();
            assert!((s + 1.0).abs() < 1e-9, "frame {t}: {s}");
        }
    }
}
