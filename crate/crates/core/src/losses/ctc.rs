//! Log-space CTC forward-backward over an extended (blank-interleaved)
//! label sequence.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::{Error, Result};

/// Number of adjacent equal labels; each one forces an extra blank frame.
pub fn adjacent_repeats(target: &[usize]) -> usize {
    target.windows(2).filter(|w| w[0] == w[1]).count()
}

pub fn is_feasible(frames: usize, target: &[usize]) -> bool {
    frames >= target.len() + adjacent_repeats(target)
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

/// Returns `-log p(target | grid)` and its gradient with respect to every
/// entry of the `frames x width` log-probability grid.
///
/// The gradient is `-γ`, the negated posterior occupancy of each
/// (frame, label) pair; it treats grid entries as free log-probabilities.
pub fn ctc_forward_backward(
    log_probs: &[f64],
    frames: usize,
    width: usize,
    target: &[usize],
    blank: usize,
) -> Result<(f64, Vec<f64>)> {
    debug_assert_eq!(log_probs.len(), frames * width);
    if frames == 0 || !is_feasible(frames, target) {
        return Err(Error::NoValidAlignment {
            frames,
            target_len: target.len(),
            repeats: adjacent_repeats(target),
        });
    }
    let s_len = 2 * target.len() + 1;
    let label = |s: usize| if s % 2 == 0 { blank } else { target[s / 2] };
    // Skip transition s-2 -> s is allowed onto a non-blank differing from l'_{s-2}.
    let can_skip = |s: usize| s >= 2 && s % 2 == 1 && label(s) != label(s - 2);
    let lp = |t: usize, k: usize| log_probs[t * width + k];
    let ninf = f64::NEG_INFINITY;

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, label(1));
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
            alpha[t * s_len + s] = if acc == ninf { ninf } else { acc + lp(t, label(s)) };
        }
    }
    let last = (frames - 1) * s_len;
    let mut log_p = alpha[last + s_len - 1];
    if s_len > 1 {
        log_p = lse2(log_p, alpha[last + s_len - 2]);
    }
    if !log_p.is_finite() {
        return Err(Error::NonFinite("ctc likelihood"));
    }

    // beta excludes the emission at its own frame.
    let mut beta = vec![ninf; frames * s_len];
    beta[last + s_len - 1] = 0.0;
    if s_len > 1 {
        beta[last + s_len - 2] = 0.0;
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = (t + 1) * s_len;
            let mut acc = beta[next + s] + lp(t + 1, label(s));
            if s + 1 < s_len {
                acc = lse2(acc, beta[next + s + 1] + lp(t + 1, label(s + 1)));
            }
            if s + 2 < s_len && can_skip(s + 2) {
                acc = lse2(acc, beta[next + s + 2] + lp(t + 1, label(s + 2)));
            }
            beta[t * s_len + s] = acc;
        }
    }

    let mut grad = vec![0.0; frames * width];
    for t in 0..frames {
        for s in 0..s_len {
            let a = alpha[t * s_len + s];
            let b = beta[t * s_len + s];
            if a == ninf || b == ninf {
                continue;
            }
            grad[t * width + label(s)] -= (a + b - log_p).exp();
        }
    }
    Ok((-log_p, grad))
}


#[cfg(test)]
mod tests {
    use super::oracle::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ln(v: &[f64]) -> Vec<f64> {
        v.iter().map(|x| x.ln()).collect()
    }

    #[test]
    fn single_frame_single_label() {
        // width 2: label 0, blank 1
        let (loss, _) = ctc_forward_backward(&ln(&[0.6, 0.4]), 1, 2, &[0], 1).unwrap();
        assert!((loss - (-(0.6f64).ln())).abs() < 1e-12);
        assert!((loss - 0.5108).abs() < 1e-4);
    }

    #[test]
    fn two_frames_three_alignments() {
        let probs = [0.5, 0.5, 0.5, 0.5];
        let (loss, _) = ctc_forward_backward(&ln(&probs), 2, 2, &[0], 1).unwrap();
        let brute = brute_force_probability(&probs, 2, 2, &[0], 1);
        assert!((brute - 0.75).abs() < 1e-15);
        assert!((loss + brute.ln()).abs() < 1e-12);
        assert!((loss - 0.2877).abs() < 1e-4);
    }

    #[test]
    fn repeated_label_needs_blank_frame() {
        let probs = ln(&[0.5; 4]);
        assert_eq!(
            ctc_forward_backward(&probs, 2, 2, &[0, 0], 1),
            Err(Error::NoValidAlignment {
                frames: 2,
                target_len: 2,
                repeats: 1
            })
        );
        let probs3 = ln(&[0.5; 6]);
        let (loss, _) = ctc_forward_backward(&probs3, 3, 2, &[0, 0], 1).unwrap();
        // Only a-blank-a collapses to [a, a].
        assert!((loss - (-(0.125f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let z = rng.random_range(1..=3);
            let width = z + 1;
            let frames = rng.random_range(1..=6);
            let len = rng.random_range(0..=3.min(frames));
            let target: Vec<usize> = (0..len).map(|_| rng.random_range(0..z)).collect();
            let mut probs = Vec::new();
            for _ in 0..frames {
                let row: Vec<f64> = (0..width).map(|_| rng.random_range(0.05..1.0)).collect();
                let s: f64 = row.iter().sum();
                probs.extend(row.iter().map(|x| x / s));
            }
            let brute = brute_force_probability(&probs, frames, width, &target, z);
            match ctc_forward_backward(&ln(&probs), frames, width, &target, z) {
                Ok((loss, grad)) => {
                    assert!((loss + brute.ln()).abs() < 1e-10);
                    // Occupancies of each frame sum to one.
                    for t in 0..frames {
                        let s: f64 = grad[t * width..(t + 1) * width].iter().sum();
                        assert!((s + 1.0).abs() < 1e-10);
                    }
                }
                Err(_) => assert_eq!(brute, 0.0),
            }
        }
    }
}
