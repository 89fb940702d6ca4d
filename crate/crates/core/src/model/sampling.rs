//! Temperature / top-k token sampling and classifier-free guidance.

use rand::Rng;

/// Samples a token id from a logit row after temperature scaling and
/// top-k truncation. `top_k = 1` is argmax (lowest index on ties).
pub fn sample_token<R: Rng>(logits: &[f64], temperature: f64, top_k: usize, rng: &mut R) -> usize {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(top_k >= 1 && top_k <= logits.len(), "top_k out of range");

    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    let kept = &order[..top_k];
    if top_k == 1 {
        return kept[0];
    }
    let max = logits[kept[0]];
    let weights: Vec<f64> = kept
        .iter()
        .map(|&i| ((logits[i] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut draw = rng.gen::<f64>() * total;
    for (w, &i) in weights.iter().zip(kept) {
        draw -= w;
        if draw <= 0.0 {
            return i;
        }
    }
    *kept.last().unwrap()
}

/// Classifier-free guidance: uncond + scale·(cond − uncond).
pub fn cfg_combine(cond: &[f64], uncond: &[f64], scale: f64) -> Vec<f64> {
    assert_eq!(cond.len(), uncond.len(), "cfg logit shape mismatch");
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| u + scale * (c - u))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn top_k_one_is_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = vec![0.1, 3.0, -1.0, 2.9];
        for _ in 0..32 {
            assert_eq!(sample_token(&logits, 5.0, 1, &mut rng), 1);
        }
    }

    #[test]
    fn dominant_logit_always_wins() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = vec![0.0, 1e9, 0.0, 0.0];
        for _ in 0..1000 {
            assert_eq!(sample_token(&logits, 1.0, 4, &mut rng), 1);
        }
    }

    #[test]
    fn uniform_logits_sample_uniformly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = vec![0.0; 4];
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample_token(&logits, 1.0, 4, &mut rng)] += 1;
        }
        for c in counts {
            let f = c as f64 / n as f64;
            assert!((f - 0.25).abs() < 0.01, "frequency {f}");
        }
    }

    #[test]
    fn cfg_examples() {
        let cond = vec![2.0, 0.0];
        let uncond = vec![1.0, 1.0];
        assert_eq!(cfg_combine(&cond, &uncond, 1.0), cond);
        assert_eq!(cfg_combine(&cond, &uncond, 0.0), uncond);
        assert_eq!(cfg_combine(&cond, &uncond, 2.0), vec![3.0, -1.0]);
    }
}
