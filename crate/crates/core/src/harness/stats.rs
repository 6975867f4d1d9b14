// SPDX-License-Identifier: MIT OR Apache-2.0

//! Wilson intervals and equal-count barrier bins.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::experiment::{Label, PromptRun};

/// Normal quantile for a two-sided 95% interval.
pub const Z_95: f64 = 1.96;

/// Number of barrier bins in a [`BinReport`].
pub const N_BINS: usize = 9;

/// Wilson score interval for `k` successes in `n` trials.
///
/// Computed for `k ≤ n/2` and mirrored otherwise, so for `k < n/2`,
/// `wilson_interval(n − k, n)` is exactly `(1 − hi, 1 − lo)`.
///
/// # Errors
///
/// [`Error::Binomial`] when `n = 0` or `k > n`; [`Error::Config`] for a
/// non-positive or non-finite `z`.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> Result<(f64, f64)> {
    if n == 0 || k > n {
        return Err(Error::Binomial {
            successes: k,
            trials: n,
        });
    }
    if !(z > 0.0 && z.is_finite()) {
        return Err(Error::Config(format!("z must be positive, got {z}")));
    }
    if 2 * k > n {
        let (lo, hi) = wilson_lower_half(n - k, n, z);
        return Ok((1.0 - hi, 1.0 - lo));
    }
    Ok(wilson_lower_half(k, n, z))
}

fn wilson_lower_half(k: u64, n: u64, z: f64) -> (f64, f64) {
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z / denom * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt();
    let lo = if k == 0 { 0.0 } else { (center - half).clamp(0.0, p) };
    let hi = (center + half).clamp(p, 1.0);
    (lo, hi)
}

/// One barrier bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub index: usize,
    pub count: u64,
    pub hallucinated: u64,
    pub rate: f64,
    pub lo: f64,
    pub hi: f64,
    pub barrier_min: f64,
    pub barrier_max: f64,
}

/// Hallucination rate per equal-count barrier bin, lowest barriers first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinReport {
    pub bins: Vec<Bin>,
}

/// Which barrier value represents an object token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarrierSource {
    /// Mean over the steered layers.
    #[default]
    MeanSteered,
    /// One steered layer.
    Layer(usize),
}

/// `(barrier, hallucinated)` for every emitted object token.
///
/// The barrier is the one measured on the step that emitted the token.
/// Tokens whose step has no record for the requested layer are skipped.
#[must_use]
pub fn object_samples(runs: &[PromptRun], source: BarrierSource) -> Vec<(f64, bool)> {
    let mut out = Vec::new();
    for run in runs {
        for (step, label) in run.trace.steps.iter().zip(&run.labels) {
            if *label == Label::Other {
                continue;
            }
            let h = match source {
                BarrierSource::MeanSteered => step.mean_barrier(),
                BarrierSource::Layer(l) => step.layers.iter().find(|r| r.layer == l).map(|r| r.h),
            };
            if let Some(h) = h {
                out.push((h, *label == Label::Hallucinated));
            }
        }
    }
    out
}

/// Sizes of `n_bins` contiguous bins over `n` items, differing by at most 1.
/// The first `n % n_bins` bins hold the extra item.
#[must_use]
pub fn bin_sizes(n: usize, n_bins: usize) -> Vec<usize> {
    (0..n_bins)
        .map(|i| n / n_bins + usize::from(i < n % n_bins))
        .collect()
}

/// Sort samples by barrier (stable, so ties keep input order), split into
/// [`N_BINS`] equal-count bins and attach 95% Wilson intervals.
///
/// # Errors
///
/// [`Error::TooFewTokens`] with fewer than [`N_BINS`] samples;
/// [`Error::NonFinite`] for a NaN barrier.
pub fn bin_analysis(samples: &[(f64, bool)]) -> Result<BinReport> {
    if samples.len() < N_BINS {
        return Err(Error::TooFewTokens {
            needed: N_BINS,
            got: samples.len(),
        });
    }
    if samples.iter().any(|(h, _)| h.is_nan()) {
        return Err(Error::NonFinite("barrier sample".into()));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut bins = Vec::with_capacity(N_BINS);
    let mut start = 0;
    for (index, size) in bin_sizes(sorted.len(), N_BINS).into_iter().enumerate() {
        let chunk = &sorted[start..start + size];
        start += size;
        let count = chunk.len() as u64;
        let hallucinated = chunk.iter().filter(|(_, bad)| *bad).count() as u64;
        let (lo, hi) = wilson_interval(hallucinated, count, Z_95)?;
        bins.push(Bin {
            index,
            count,
            hallucinated,
            rate: hallucinated as f64 / count as f64,
            lo,
            hi,
            barrier_min: chunk[0].0,
            barrier_max: chunk[chunk.len() - 1].0,
        });
    }
    Ok(BinReport { bins })
}

/// Least-squares fit `y = a + b x` with its coefficient of determination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub r_squared: f64,
}

/// Ordinary least squares over paired samples.
///
/// # Errors
///
/// [`Error::Shape`] for unequal lengths, [`Error::TooFewTokens`] for fewer
/// than two points, [`Error::NonFinite`] when all `x` are equal.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(Error::Shape {
            op: "linear_fit",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::TooFewTokens {
            needed: 2,
            got: x.len(),
        });
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::NonFinite("linear_fit with constant x".into()));
    }
    let slope = sxy / sxx;
    let r_squared = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok(LinearFit {
        intercept: my - slope * mx,
        slope,
        r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_of_ten() {
        let (lo, hi) = wilson_interval(0, 10, Z_95).unwrap();
        assert_eq!(lo, 0.0);
        assert!((hi - 0.2775).abs() < 1e-3, "{hi}");
    }

    #[test]
    fn mirror_is_exact() {
        for n in 1..40u64 {
            for k in 0..=n {
                let (lo, hi) = wilson_interval(k, n, Z_95).unwrap();
                let (mlo, mhi) = wilson_interval(n - k, n, Z_95).unwrap();
                if 2 * k < n {
                    assert_eq!((mlo, mhi), (1.0 - hi, 1.0 - lo));
                }
                assert!((lo - (1.0 - mhi)).abs() < 1e-15 && (hi - (1.0 - mlo)).abs() < 1e-15);
                let p = k as f64 / n as f64;
                assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
            }
        }
    }

    #[test]
    fn rejects_bad_counts() {
        assert!(wilson_interval(0, 0, Z_95).is_err());
        assert!(wilson_interval(3, 2, Z_95).is_err());
    }

    #[test]
    fn sizes_balanced() {
        for n in 9..200 {
            let s = bin_sizes(n, 9);
            assert_eq!(s.iter().sum::<usize>(), n);
            assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn singleton_bins() {
        let samples: Vec<(f64, bool)> = (0..9).map(|i| (f64::from(i), i % 2 == 0)).collect();
        let r = bin_analysis(&samples).unwrap();
        assert_eq!(r.bins.len(), 9);
        for (i, b) in r.bins.iter().enumerate() {
            assert_eq!(b.count, 1);
            assert_eq!(b.rate, if i % 2 == 0 { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn ties_keep_input_order() {
        let samples: Vec<(f64, bool)> = (0..18).map(|i| (0.5, i < 2)).collect();
        let r = bin_analysis(&samples).unwrap();
        assert!(r.bins.iter().all(|b| b.count == 2));
        assert_eq!(r.bins[0].hallucinated, 2);
        assert!(r.bins[1..].iter().all(|b| b.hallucinated == 0));
    }

    #[test]
    fn too_few() {
        assert!(matches!(
            bin_analysis(&[(0.0, true); 8]),
            Err(Error::TooFewTokens { needed: 9, got: 8 })
        ));
    }

    #[test]
    fn fit_exact_line() {
        let x = [2.0, 4.0, 8.0, 16.0];
        let y: Vec<f64> = x.iter().map(|v| 3.0 + 0.5 * v).collect();
        let f = linear_fit(&x, &y).unwrap();
        assert!((f.slope - 0.5).abs() < 1e-12 && (f.intercept - 3.0).abs() < 1e-12);
        assert!((f.r_squared - 1.0).abs() < 1e-12);
    }
}
