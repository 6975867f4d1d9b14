// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy and nucleus (top-p) token selection.

use serde::{Deserialize, Serialize};

use crate::numeric::Rng;

/// How the next token is chosen from logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SamplingPolicy {
    /// Arg-max; ties go to the smallest token id.
    Greedy,
    /// Nucleus sampling over `softmax(logits / temperature)`.
    TopP { p: f64, temperature: f64 },
}

impl Default for SamplingPolicy {
    fn default() -> Self {
        Self::Greedy
    }
}

/// Index of the largest logit, lowest index on ties.
#[must_use]
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate().skip(1) {
        if z > logits[best] {
            best = i;
        }
    }
    best
}

/// The nucleus: the smallest prefix of tokens sorted by descending
/// probability whose mass reaches `p`, renormalized. Ties in probability keep
/// ascending token order.
#[must_use]
pub fn nucleus(logits: &[f64], p: f64, temperature: f64) -> Vec<(usize, f64)> {
    let t = if temperature > 0.0 { temperature } else { 1.0 };
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(usize, f64)> = logits
        .iter()
        .enumerate()
        .map(|(i, &z)| (i, ((z - max) / t).exp()))
        .collect();
    let total: f64 = probs.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut probs {
        *w /= total;
    }
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut mass = 0.0;
    let mut keep = probs.len();
    for (i, (_, w)) in probs.iter().enumerate() {
        mass += w;
        if mass >= p {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    let kept: f64 = probs.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut probs {
        *w /= kept;
    }
    probs
}

/// Pick a token. `rng` is only consumed by [`SamplingPolicy::TopP`].
pub fn sample(logits: &[f64], policy: &SamplingPolicy, rng: &mut Rng) -> u32 {
    match *policy {
        SamplingPolicy::Greedy => argmax(logits) as u32,
        SamplingPolicy::TopP { p, temperature } => {
            let dist = nucleus(logits, p, temperature);
            let u = rng.uniform();
            let mut acc = 0.0;
            for &(tok, w) in &dist {
                acc += w;
                if u < acc {
                    return tok as u32;
                }
            }
            dist.last().map_or(0, |&(tok, _)| tok as u32)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn greedy_ties_go_to_lowest_index() {
        let mut rng = Rng::new(0);
        assert_eq!(sample(&[0.0, 5.0, 5.0], &SamplingPolicy::Greedy, &mut rng), 1);
        assert_eq!(argmax(&[3.0, 3.0]), 0);
    }

    #[test]
    fn full_nucleus_keeps_every_token() {
        let dist = nucleus(&[0.0, 1.0, 2.0, 3.0], 1.0, 1.0);
        assert_eq!(dist.len(), 4);
        let s: f64 = dist.iter().map(|d| d.1).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nucleus_truncates_tail() {
        // probabilities 0.5, 0.3, 0.15, 0.05
        let logits: Vec<f64> = [0.5f64, 0.3, 0.15, 0.05].iter().map(|p| p.ln()).collect();
        let dist = nucleus(&logits, 0.9, 1.0);
        let toks: Vec<usize> = dist.iter().map(|d| d.0).collect();
        assert_eq!(toks, vec![0, 1, 2]);
        assert!((dist[0].1 - 0.5 / 0.95).abs() < 1e-12);
    }

    #[test]
    fn top_p_frequencies_match_truncated_distribution() {
        let probs = [0.5f64, 0.3, 0.15, 0.05];
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let policy = SamplingPolicy::TopP {
            p: 0.95,
            temperature: 1.0,
        };
        // Mass 0.5 + 0.3 + 0.15 reaches 0.95, so token 3 is cut and the rest renormalize.
        let expected = [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0];
        let mut rng = Rng::new(7);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sample(&logits, &policy, &mut rng) as usize] += 1;
        }
        for (c, e) in counts.iter().zip(expected) {
            let f = *c as f64 / n as f64;
            assert!((f - e).abs() <= 0.01, "freq {f} expected {e}");
        }
    }

    #[test]
    fn top_p_one_matches_full_softmax_sampling() {
        let logits = [0.2, -1.0, 1.3];
        let policy = SamplingPolicy::TopP {
            p: 1.0,
            temperature: 1.0,
        };
        let z: f64 = logits.iter().map(|v: &f64| v.exp()).sum();
        let mut rng = Rng::new(8);
        let n = 100_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[sample(&logits, &policy, &mut rng) as usize] += 1;
        }
        for (i, c) in counts.iter().enumerate() {
            let f = *c as f64 / n as f64;
            assert!((f - logits[i].exp() / z).abs() <= 0.01);
        }
    }
}
