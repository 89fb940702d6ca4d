//! Evaluation metrics: teacher-forced NLL and a pairwise co-occurrence
//! divergence between sample sets.

use thiserror::Error;

use crate::data::TokenGrid;
use crate::model::ModelState;
use crate::trainer::{eval_bits_per_token, TrainError};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty sample set")]
    EmptySet,
    #[error("vocab size must be positive")]
    ZeroVocab,
    #[error("grid side {found} does not match expected {expected}")]
    SideMismatch { found: usize, expected: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Teacher-forced negative log-likelihood in bits per token, averaged
/// over held-out grids with decoding orders drawn from `menu` under a
/// fixed seed.
pub fn teacher_forced_nll(
    state: &ModelState,
    set: &[TokenGrid],
    menu: &[usize],
    seed: u64,
) -> Result<f64, MetricsError> {
    Ok(eval_bits_per_token(state, set, menu, seed)?)
}

/// Histogram over ordered (left, right) and (top, bottom) token pairs,
/// add-one smoothed, one distribution per direction.
fn pair_histograms(set: &[TokenGrid], vocab: usize) -> [Vec<f64>; 2] {
    let mut h = vec![1.0f64; vocab * vocab];
    let mut v = vec![1.0f64; vocab * vocab];
    for g in set {
        let s = g.side;
        for r in 0..s {
            for c in 0..s {
                let t = g.tokens[r * s + c] as usize;
                if c + 1 < s {
                    h[t * vocab + g.tokens[r * s + c + 1] as usize] += 1.0;
                }
                if r + 1 < s {
                    v[t * vocab + g.tokens[(r + 1) * s + c] as usize] += 1.0;
                }
            }
        }
    }
    for hist in [&mut h, &mut v] {
        let sum: f64 = hist.iter().sum();
        for x in hist.iter_mut() {
            *x /= sum;
        }
    }
    [h, v]
}

fn kl_bits(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi).log2())
        .sum()
}

fn js_bits(p: &[f64], q: &[f64]) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(&a, &b)| 0.5 * (a + b)).collect();
    0.5 * kl_bits(p, &m) + 0.5 * kl_bits(q, &m)
}

/// Jensen-Shannon divergence (base 2) between the neighbor-pair token
/// statistics of two sample sets, averaged over the horizontal and
/// vertical directions. Zero iff the smoothed pair histograms match;
/// bounded by 1 bit.
pub fn cooccurrence_divergence(
    a: &[TokenGrid],
    b: &[TokenGrid],
    vocab: usize,
) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    if vocab == 0 {
        return Err(MetricsError::ZeroVocab);
    }
    let side = a[0].side;
    for g in a.iter().chain(b) {
        if g.side != side {
            return Err(MetricsError::SideMismatch { found: g.side, expected: side });
        }
        debug_assert!(g.tokens.iter().all(|&t| (t as usize) < vocab));
    }
    let ha = pair_histograms(a, vocab);
    let hb = pair_histograms(b, vocab);
    Ok(0.5 * (js_bits(&ha[0], &hb[0]) + js_bits(&ha[1], &hb[1])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_grid, DataConfig};
    use crate::model::{init, test_config};

    fn corpus(seed: u64, count: usize, smoothness: f64) -> Vec<TokenGrid> {
        let cfg = DataConfig {
            side: 8,
            vocab_size: 8,
            num_classes: 2,
            smoothness,
            anisotropy: vec![0.5, -0.5],
            seed,
        };
        (0..count).map(|i| gen_grid(&cfg, i % 2, i as u64).unwrap()).collect()
    }

    #[test]
    fn untrained_uniform_model_scores_log2_vocab() {
        let mut state = init(&test_config(), 0).unwrap();
        for (_, _, data) in state.params.flat_mut() {
            data.fill(0.0);
        }
        let set: Vec<TokenGrid> = (0..3)
            .map(|i| TokenGrid { side: 4, tokens: vec![i; 16], class_id: 0 })
            .collect();
        let bpt = teacher_forced_nll(&state, &set, &[4, 8], 1).unwrap();
        assert!((bpt - 3.0).abs() < 1e-9, "expected log2(8) = 3 bits, got {bpt}");
    }

    #[test]
    fn identical_sets_have_zero_divergence() {
        let set = corpus(1, 8, 1.0);
        let d = cooccurrence_divergence(&set, &set, 8).unwrap();
        assert!(d.abs() < 1e-12);
    }

    #[test]
    fn divergence_is_symmetric_and_bounded() {
        let a = corpus(1, 8, 1.0);
        let b = corpus(2, 8, 1.0);
        let ab = cooccurrence_divergence(&a, &b, 8).unwrap();
        let ba = cooccurrence_divergence(&b, &a, 8).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab >= 0.0 && ab <= 1.0);
    }

    #[test]
    fn matched_distributions_beat_mismatched_ones() {
        let smooth_a = corpus(1, 16, 1.5);
        let smooth_b = corpus(2, 16, 1.5);
        let rough = corpus(3, 16, 0.2);
        let near = cooccurrence_divergence(&smooth_a, &smooth_b, 8).unwrap();
        let far = cooccurrence_divergence(&smooth_a, &rough, 8).unwrap();
        assert!(near < far, "same-texture divergence {near} not below cross-texture {far}");
    }

    #[test]
    fn empty_set_is_rejected() {
        let set = corpus(1, 2, 1.0);
        assert!(matches!(cooccurrence_divergence(&set, &[], 8), Err(MetricsError::EmptySet)));
    }
}
