//! Connectionist temporal classification: loss by log-space
//! forward–backward, greedy decoding, and a brute-force alignment oracle.
//!
//! Label index 0 is the blank. Every routine consumes per-frame
//! log-probabilities (already passed through log-softmax), laid out T×V.

use crate::error::{PalError, Result};
use crate::tensor::{Real, Tensor};

pub const BLANK: usize = 0;

/// Largest path count the brute-force oracle will enumerate.
pub const BRUTE_FORCE_LIMIT: u64 = 10_000_000;

/// Minimum frame count for which an alignment of `y` exists: one frame per
/// label plus one separating blank between each pair of equal neighbours.
pub fn required_min_length(y: &[usize]) -> usize {
    y.len() + y.windows(2).filter(|w| w[0] == w[1]).count()
}

#[inline]
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn lse(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(f64::NEG_INFINITY, lse2)
}

/// Forward (alpha) and backward (beta) log-probabilities over the
/// blank-interleaved label sequence. Both include the emission at their own
/// frame, so `alpha[t,s] + beta[t,s] − log_probs[t, l'(s)]` is the log-mass of
/// all alignments passing through lattice state `s` at frame `t`.
#[derive(Debug, Clone)]
pub struct CtcLattice {
    pub extended: Vec<usize>,
    pub frames: usize,
    pub alpha: Vec<f64>,
    pub beta: Vec<f64>,
    /// log P(y | X).
    pub log_likelihood: f64,
}

impl CtcLattice {
    pub fn states(&self) -> usize {
        self.extended.len()
    }

    pub fn alpha_at(&self, t: usize, s: usize) -> f64 {
        self.alpha[t * self.states() + s]
    }

    pub fn beta_at(&self, t: usize, s: usize) -> f64 {
        self.beta[t * self.states() + s]
    }
}

fn validate(log_probs: &[f64], frames: usize, vocab: usize, y: &[usize]) -> Result<()> {
    if log_probs.len() != frames * vocab {
        return Err(PalError::Dimension(format!(
            "ctc: {} log-probabilities for {frames}×{vocab}",
            log_probs.len()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&l| l == BLANK || l >= vocab) {
        return Err(PalError::Input(format!(
            "ctc: label {bad} is blank or outside vocabulary of {vocab}"
        )));
    }
    let need = required_min_length(y);
    if frames < need || frames == 0 {
        return Err(PalError::Infeasible {
            frames,
            required: need.max(1),
        });
    }
    Ok(())
}

fn extend(y: &[usize]) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * y.len() + 1);
    ext.push(BLANK);
    for &l in y {
        ext.push(l);
        ext.push(BLANK);
    }
    ext
}

/// Runs both recursions. `log_probs` is row-major T×V.
pub fn forward_backward(log_probs: &[f64], frames: usize, vocab: usize, y: &[usize]) -> Result<CtcLattice> {
    validate(log_probs, frames, vocab, y)?;
    let ext = extend(y);
    let s_len = ext.len();
    let ninf = f64::NEG_INFINITY;
    let emit = |t: usize, s: usize| log_probs[t * vocab + ext[s]];
    // A state may skip its predecessor when it is a label differing from the
    // label two steps back.
    let can_skip = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = emit(0, 0);
    if s_len > 1 {
        alpha[1] = emit(0, 1);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut acc = prev[s];
            if s >= 1 {
                acc = lse2(acc, prev[s - 1]);
            }
            if can_skip(s) {
                acc = lse2(acc, prev[s - 2]);
            }
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + emit(t, s) };
        }
    }

    let mut beta = vec![ninf; frames * s_len];
    let last = frames - 1;
    beta[last * s_len + s_len - 1] = emit(last, s_len - 1);
    if s_len > 1 {
        beta[last * s_len + s_len - 2] = emit(last, s_len - 2);
    }
    for t in (0..last).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut acc = next[s];
            if s + 1 < s_len {
                acc = lse2(acc, next[s + 1]);
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = lse2(acc, next[s + 2]);
            }
            beta[t * s_len + s] = if acc == ninf { ninf } else { acc + emit(t, s) };
        }
    }

    let end = &alpha[last * s_len..];
    let log_likelihood = if s_len > 1 {
        lse2(end[s_len - 1], end[s_len - 2])
    } else {
        end[0]
    };
    Ok(CtcLattice {
        extended: ext,
        frames,
        alpha,
        beta,
        log_likelihood,
    })
}

/// Loss `−log P(y|X)` and its gradient with respect to every entry of
/// `log_probs` (treated as free inputs, no renormalization).
pub fn ctc_loss_values(log_probs: &[f64], frames: usize, vocab: usize, y: &[usize]) -> Result<(f64, Vec<f64>)> {
    let lat = forward_backward(log_probs, frames, vocab, y)?;
    let ll = lat.log_likelihood;
    if !ll.is_finite() {
        return Err(PalError::Numeric(format!("ctc: log-likelihood {ll}")));
    }
    let s_len = lat.states();
    let mut grad = vec![0.0; frames * vocab];
    let mut occupancy = vec![f64::NEG_INFINITY; vocab];
    for t in 0..frames {
        occupancy.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
        for s in 0..s_len {
            let k = lat.extended[s];
            let a = lat.alpha[t * s_len + s];
            let b = lat.beta[t * s_len + s];
            if a == f64::NEG_INFINITY || b == f64::NEG_INFINITY {
                continue;
            }
            occupancy[k] = lse2(occupancy[k], a + b - log_probs[t * vocab + k]);
        }
        for k in 0..vocab {
            if occupancy[k] != f64::NEG_INFINITY {
                grad[t * vocab + k] = -(occupancy[k] - ll).exp();
            }
        }
    }
    Ok((-ll, grad))
}

/// CTC loss as a graph node over a T×V log-probability tensor, so the
/// gradient flows back into whatever produced `log_probs`.
pub fn ctc_loss<F: Real>(log_probs: &Tensor<F>, y: &[usize]) -> Result<Tensor<F>> {
    if log_probs.rank() != 2 {
        return Err(PalError::Dimension(format!(
            "ctc_loss expects T×V log-probabilities, got {:?}",
            log_probs.shape()
        )));
    }
    let (frames, vocab) = (log_probs.shape()[0], log_probs.shape()[1]);
    let lp = log_probs.to_f64_vec();
    let (loss, grad) = ctc_loss_values(&lp, frames, vocab, y)?;
    let grad: Vec<F> = grad.into_iter().map(F::of).collect();
    Ok(Tensor::from_op(vec![F::of(loss)], Vec::new(), vec![log_probs.clone()], move |g, _| {
        vec![Some(grad.iter().map(|&v| v * g[0]).collect())]
    }))
}

/// Collapses a frame-level path: merge runs, then drop blanks.
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != BLANK {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Per-frame argmax (ties go to the lowest index), then [`collapse`].
pub fn greedy_decode<F: Real>(log_probs: &[F], vocab: usize) -> Vec<usize> {
    let path: Vec<usize> = log_probs
        .chunks(vocab)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect();
    collapse(&path)
}

/// Exhaustive oracle: sums the probability of every frame-level path whose
/// collapse equals `y`.
pub fn ctc_brute_force(log_probs: &[f64], frames: usize, vocab: usize, y: &[usize]) -> Result<f64> {
    if log_probs.len() != frames * vocab {
        return Err(PalError::Dimension(format!(
            "ctc oracle: {} values for {frames}×{vocab}",
            log_probs.len()
        )));
    }
    let count = (vocab as u64).checked_pow(frames as u32).unwrap_or(u64::MAX);
    if count > BRUTE_FORCE_LIMIT {
        return Err(PalError::OracleScope(format!(
            "{vocab}^{frames} paths exceed the oracle limit of {BRUTE_FORCE_LIMIT}"
        )));
    }
    let mut path = vec![0usize; frames];
    let mut total = f64::NEG_INFINITY;
    for _ in 0..count {
        if collapse(&path) == y {
            let lp: f64 = path.iter().enumerate().map(|(t, &k)| log_probs[t * vocab + k]).sum();
            total = lse2(total, lp);
        }
        for slot in path.iter_mut() {
            *slot += 1;
            if *slot < vocab {
                break;
            }
            *slot = 0;
        }
    }
    Ok(-total)
}

/// Alpha–beta consistency: the per-frame log-mass of all alignments, which
/// must equal log P(y|X) at every frame.
pub fn per_frame_log_mass(lat: &CtcLattice, log_probs: &[f64], vocab: usize) -> Vec<f64> {
    let s_len = lat.states();
    (0..lat.frames)
        .map(|t| {
            lse((0..s_len).map(|s| {
                lat.alpha[t * s_len + s] + lat.beta[t * s_len + s] - log_probs[t * vocab + lat.extended[s]]
            }))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Seed;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn random_log_probs(seed: u64, frames: usize, vocab: usize) -> Vec<f64> {
        let mut rng = Seed(seed).rng();
        let mut out = Vec::with_capacity(frames * vocab);
        for _ in 0..frames {
            let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            out.extend(logits.iter().map(|l| l - z));
        }
        out
    }

    #[test]
    fn min_length_examples() {
        assert_eq!(required_min_length(&[1, 2, 3]), 3);
        assert_eq!(required_min_length(&[1, 1, 2]), 4);
        assert_eq!(required_min_length(&[]), 0);
    }

    #[test]
    fn single_frame_single_label() {
        let lp = random_log_probs(1, 1, 3);
        let (loss, _) = ctc_loss_values(&lp, 1, 3, &[2]).unwrap();
        assert!((loss + lp[2]).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        let h = 0.5f64.ln();
        let lp = vec![h, h, h, h];
        // Alignments (a,a), (−,a), (a,−) each carry probability 1/4.
        let oracle = -(3.0 * 0.25f64).ln();
        assert!((oracle - 0.28768).abs() < 1e-5);
        let (loss, _) = ctc_loss_values(&lp, 2, 2, &[1]).unwrap();
        assert!((loss - oracle).abs() < 1e-12);
        assert!((ctc_brute_force(&lp, 2, 2, &[1]).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_instance() {
        let lp = random_log_probs(7, 6, 4);
        let y = [1, 3, 3];
        let (loss, _) = ctc_loss_values(&lp, 6, 4, &y).unwrap();
        let oracle = ctc_brute_force(&lp, 6, 4, &y).unwrap();
        assert!((loss - oracle).abs() < 1e-9, "{loss} vs {oracle}");
    }

    #[test]
    fn brute_force_edge_cases() {
        let lp = random_log_probs(3, 4, 3);
        let all_blank: f64 = (0..4).map(|t| lp[t * 3]).sum();
        assert!((ctc_brute_force(&lp, 4, 3, &[]).unwrap() + all_blank).abs() < 1e-12);
        let (loss, _) = ctc_loss_values(&lp, 4, 3, &[]).unwrap();
        assert!((loss + all_blank).abs() < 1e-12);

        // One-hot path "1 1 − 2" spells [1, 2] with probability one.
        let mut onehot = vec![-1e30; 12];
        for (t, k) in [1usize, 1, 0, 2].into_iter().enumerate() {
            onehot[t * 3 + k] = 0.0;
        }
        assert_eq!(ctc_brute_force(&onehot, 4, 3, &[1, 2]).unwrap(), 0.0);
        assert_eq!(ctc_loss_values(&onehot, 4, 3, &[1, 2]).unwrap().0, 0.0);

        let big = vec![0.0; 30 * 4];
        assert!(matches!(ctc_brute_force(&big, 30, 4, &[1]), Err(PalError::OracleScope(_))));
    }

    #[test]
    fn lattice_rules() {
        let lp = random_log_probs(11, 5, 4);
        let y = [2, 1];
        let lat = forward_backward(&lp, 5, 4, &y).unwrap();
        for s in 2..lat.states() {
            assert_eq!(lat.alpha_at(0, s), f64::NEG_INFINITY);
        }
        let s = lat.states();
        let term = lse2(lat.alpha_at(4, s - 1), lat.alpha_at(4, s - 2));
        let (loss, _) = ctc_loss_values(&lp, 5, 4, &y).unwrap();
        assert_eq!(term, -loss);
        for m in per_frame_log_mass(&lat, &lp, 4) {
            assert!((m + loss).abs() < 1e-8);
        }
        assert!(lat.alpha.iter().chain(&lat.beta).all(|&v| v <= 0.0));
    }

    #[test]
    fn infeasible_target_errors() {
        let lp = random_log_probs(2, 3, 3);
        let err = ctc_loss_values(&lp, 3, 3, &[1, 1, 2]).unwrap_err();
        assert!(matches!(err, PalError::Infeasible { frames: 3, required: 4 }));
        assert!(matches!(ctc_loss_values(&lp, 3, 3, &[0]), Err(PalError::Input(_))));
    }

    #[test]
    fn greedy_examples() {
        let (a, b) = (1usize, 2usize);
        let path = [a, a, BLANK, a, b, b];
        let mut lp = vec![-5.0f64; path.len() * 3];
        for (t, &k) in path.iter().enumerate() {
            lp[t * 3 + k] = -0.1;
        }
        assert_eq!(greedy_decode(&lp, 3), vec![a, a, b]);
        let blanks = vec![0.0f64, -1.0, -1.0, 0.0, -2.0, -3.0];
        assert!(greedy_decode(&blanks, 3).is_empty());
        // Tie between classes 1 and 2 resolves to 1.
        assert_eq!(greedy_decode(&[-3.0f64, -1.0, -1.0], 3), vec![1]);
    }

    #[test]
    fn gradient_through_log_softmax() {
        let mut rng = Seed(5).rng();
        let logits: Vec<f64> = (0..5 * 4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let x = Tensor::<f64>::param(logits, &[5, 4]).unwrap();
        let err = grad_check(|x| ctc_loss(&x.log_softmax()?, &[1, 3, 1]), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gradient_wrt_raw_log_probs() {
        let lp = random_log_probs(9, 4, 3);
        let x = Tensor::<f64>::param(lp, &[4, 3]).unwrap();
        let err = grad_check(|x| ctc_loss(x, &[2, 1]), &x, 1e-6).unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
