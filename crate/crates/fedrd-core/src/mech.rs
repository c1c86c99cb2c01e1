//! Differential-privacy primitives: clipping, Gaussian local perturbation,
//! Poisson Binomial quantization, and sum dequantization.
//!
//! The Poisson Binomial Mechanism (PBM) encodes a bounded real
//! `x in [-k, k]` as a `Binom(b, 1/2 + (beta/k) x)` draw. Summing the draws
//! of `M` parties and recentering gives an unbiased estimate of the sum of
//! the (clipped) inputs with variance `k^2 M / (4 beta^2 b)`.

use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::rng::StreamRng;

/// Binomial draws are taken as a sum of Bernoulli trials, which is exact and
/// cheap for the bin counts this simulator uses; larger bin counts are
/// rejected at parameter construction.
pub const MAX_BINS: u32 = 4096;

#[derive(Debug, Clone, PartialEq)]
pub enum MechError {
    Parameter(String),
    OutOfRange { value: f64, bound: f64 },
    CorruptedAggregate { index: usize, value: u64, max: u64 },
}

impl fmt::Display for MechError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MechError::Parameter(msg) => write!(f, "invalid mechanism parameter: {msg}"),
            MechError::OutOfRange { value, bound } => {
                write!(f, "input {value} outside [-{bound}, {bound}]; clip before quantizing")
            }
            MechError::CorruptedAggregate { index, value, max } => {
                write!(f, "aggregate entry {index} is {value}, above maximum {max}")
            }
        }
    }
}

impl core::error::Error for MechError {}

/// Parameters of the Poisson Binomial Mechanism.
///
/// `bins` is the bin count `b`, `slope` the encoding slope `beta in
/// [0, 1/4]`, `bound` the input range `k` (so inputs live in `[-k, k]`), and
/// `parties` the number of quantized values summed during estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PbmParams {
    pub bins: u32,
    pub slope: f64,
    pub bound: f64,
    pub parties: u32,
}

impl PbmParams {
    pub fn new(bins: u32, slope: f64, bound: f64, parties: u32) -> Result<Self, MechError> {
        if bins == 0 || bins > MAX_BINS {
            return Err(MechError::Parameter(alloc::format!(
                "bins must be in 1..={MAX_BINS}, got {bins}"
            )));
        }
        if !(0.0..=0.25).contains(&slope) {
            return Err(MechError::Parameter(alloc::format!(
                "slope must be in [0, 1/4], got {slope}"
            )));
        }
        if !(bound > 0.0) || !bound.is_finite() {
            return Err(MechError::Parameter(alloc::format!(
                "bound must be positive and finite, got {bound}"
            )));
        }
        if parties < 2 {
            return Err(MechError::Parameter(alloc::format!(
                "sum estimation needs at least 2 parties, got {parties}"
            )));
        }
        Ok(Self {
            bins,
            slope,
            bound,
            parties,
        })
    }
}

/// Output of PBM quantization: integer entries in `[0, bins]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantizedVector {
    values: Vec<u32>,
    bins: u32,
}

impl QuantizedVector {
    pub fn new(values: Vec<u32>, bins: u32) -> Result<Self, MechError> {
        if let Some((i, &v)) = values.iter().enumerate().find(|(_, &v)| v > bins) {
            return Err(MechError::CorruptedAggregate {
                index: i,
                value: v as u64,
                max: bins as u64,
            });
        }
        Ok(Self { values, bins })
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn bins(&self) -> u32 {
        self.bins
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Componentwise sum of two quantized vectors held by one party (for
    /// example a bank that owns both endpoint accounts of a transaction).
    /// The bin bound adds so downstream range checks stay exact.
    pub fn merge_sum(&self, other: &QuantizedVector) -> Result<QuantizedVector, MechError> {
        if self.len() != other.len() {
            return Err(MechError::Parameter(alloc::format!(
                "cannot merge quantized vectors of lengths {} and {}",
                self.len(),
                other.len()
            )));
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| a + b)
            .collect();
        Ok(QuantizedVector {
            values,
            bins: self.bins + other.bins,
        })
    }
}

/// Clamps each component to `[-k, k]`.
pub fn clip(v: &[f64], k: f64) -> Vec<f64> {
    debug_assert!(k > 0.0);
    v.iter().map(|&x| x.clamp(-k, k)).collect()
}

/// Adds i.i.d. `N(0, sigma2)` noise per component.
pub fn gaussian_perturb(
    e: &[f64],
    sigma2: f64,
    rng: &mut StreamRng,
) -> Result<Vec<f64>, MechError> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(MechError::Parameter(alloc::format!(
            "noise variance must be positive and finite, got {sigma2}"
        )));
    }
    let sigma = crate::math::sqrt(sigma2);
    Ok(e.iter().map(|&x| x + sigma * rng.normal()).collect())
}

/// Quantizes one scalar: a `Binom(bins, 1/2 + (slope/bound) x)` draw.
///
/// Inputs outside `[-bound, bound]` are an error rather than a silent clip;
/// clipping is the caller's declared responsibility.
pub fn pbm_quantize(x: f64, p: &PbmParams, rng: &mut StreamRng) -> Result<u32, MechError> {
    if !x.is_finite() || crate::math::abs(x) > p.bound {
        return Err(MechError::OutOfRange {
            value: x,
            bound: p.bound,
        });
    }
    let prob = 0.5 + (p.slope / p.bound) * x;
    let mut q = 0u32;
    for _ in 0..p.bins {
        if rng.bernoulli(prob) {
            q += 1;
        }
    }
    Ok(q)
}

/// Quantizes a vector componentwise.
pub fn pbm_quantize_vec(
    xs: &[f64],
    p: &PbmParams,
    rng: &mut StreamRng,
) -> Result<QuantizedVector, MechError> {
    let mut values = Vec::with_capacity(xs.len());
    for &x in xs {
        values.push(pbm_quantize(x, p, rng)?);
    }
    Ok(QuantizedVector {
        values,
        bins: p.bins,
    })
}

/// Recovers the unbiased sum estimate from an aggregated quantized vector:
/// `s_j = (bound / (slope * bins)) * (aggregate_j - bins * parties / 2)`.
pub fn pbm_sum_estimate(aggregate: &[u64], p: &PbmParams) -> Result<Vec<f64>, MechError> {
    if p.slope == 0.0 {
        return Err(MechError::Parameter(String::from(
            "slope must be positive for sum estimation",
        )));
    }
    let max = p.bins as u64 * p.parties as u64;
    if let Some((i, &v)) = aggregate.iter().enumerate().find(|(_, &v)| v > max) {
        return Err(MechError::CorruptedAggregate {
            index: i,
            value: v,
            max,
        });
    }
    let scale = p.bound / (p.slope * p.bins as f64);
    let center = p.bins as f64 * p.parties as f64 / 2.0;
    Ok(aggregate
        .iter()
        .map(|&q| scale * (q as f64 - center))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math;
    use alloc::vec;

    #[test]
    fn clip_clamps_and_is_idempotent() {
        assert_eq!(clip(&[0.5, -2.0], 1.0), vec![0.5, -1.0]);
        assert_eq!(clip(&[0.3, -0.9], 1.0), vec![0.3, -0.9]);
        let mut rng = StreamRng::from_key(5);
        for _ in 0..1000 {
            let v: Vec<f64> = (0..8).map(|_| rng.normal() * 3.0).collect();
            let k = rng.next_range(0.1, 2.0);
            let once = clip(&v, k);
            assert_eq!(clip(&once, k), once);
            assert!(once.iter().all(|&x| x.abs() <= k));
        }
    }

    #[test]
    fn gaussian_perturb_degenerate_noise_is_identity() {
        let e = vec![0.3, -0.8, 0.0, 1.0];
        let mut rng = StreamRng::from_key(1);
        let out = gaussian_perturb(&e, 1e-20, &mut rng).unwrap();
        for (a, b) in out.iter().zip(&e) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(gaussian_perturb(&e, 0.0, &mut rng).is_err());
        assert!(gaussian_perturb(&e, -1.0, &mut rng).is_err());
    }

    #[test]
    fn gaussian_perturb_has_requested_moments() {
        let n = 100_000;
        let sigma2 = 0.8;
        let mut rng = StreamRng::from_key(2);
        let e = [0.0];
        let draws: Vec<f64> = (0..n)
            .map(|_| gaussian_perturb(&e, sigma2, &mut rng).unwrap()[0])
            .collect();
        let mean = math::mean(&draws);
        let var = math::variance(&draws);
        let sigma = math::sqrt(sigma2);
        assert!(mean.abs() < 4.0 * sigma / (n as f64).sqrt(), "mean {mean}");
        assert!((var - sigma2).abs() < 0.1 * sigma2, "var {var}");
    }

    #[test]
    fn pbm_params_validate_ranges() {
        assert!(PbmParams::new(64, 0.25, 1.0, 3).is_ok());
        assert!(PbmParams::new(0, 0.25, 1.0, 3).is_err());
        assert!(PbmParams::new(MAX_BINS + 1, 0.25, 1.0, 3).is_err());
        assert!(PbmParams::new(64, 0.26, 1.0, 3).is_err());
        assert!(PbmParams::new(64, -0.01, 1.0, 3).is_err());
        assert!(PbmParams::new(64, 0.25, 0.0, 3).is_err());
        assert!(PbmParams::new(64, 0.25, 1.0, 1).is_err());
    }

    #[test]
    fn quantize_centered_input_has_mean_half_bins() {
        let p = PbmParams::new(16, 0.25, 1.0, 2).unwrap();
        let mut rng = StreamRng::from_key(3);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| pbm_quantize(0.0, &p, &mut rng).unwrap() as f64)
            .collect();
        for &d in &draws {
            assert!((0.0..=16.0).contains(&d));
        }
        let mean = math::mean(&draws);
        // Binomial(16, 1/2): mean 8, variance 4.
        let bound = 4.0 * 2.0 / (n as f64).sqrt();
        assert!((mean - 8.0).abs() < bound, "mean {mean}");
    }

    #[test]
    fn quantize_probability_formula_at_extremes() {
        // x = k with slope 1/4 puts the success probability at 3/4.
        let p = PbmParams::new(1, 0.25, 1.0, 2).unwrap();
        let mut rng = StreamRng::from_key(4);
        let n = 100_000;
        let mut ones = 0u64;
        for _ in 0..n {
            let q = pbm_quantize(1.0, &p, &mut rng).unwrap();
            assert!(q <= 1);
            ones += q as u64;
        }
        let rate = ones as f64 / n as f64;
        assert!((rate - 0.75).abs() < 4.0 * (0.25 * 0.75 / n as f64).sqrt(), "rate {rate}");
    }

    #[test]
    fn quantize_rejects_out_of_range_input() {
        let p = PbmParams::new(8, 0.2, 1.0, 2).unwrap();
        let mut rng = StreamRng::from_key(6);
        assert!(matches!(
            pbm_quantize(1.5, &p, &mut rng),
            Err(MechError::OutOfRange { .. })
        ));
        assert!(pbm_quantize(f64::NAN, &p, &mut rng).is_err());
    }

    #[test]
    fn sum_estimate_direct_evaluations() {
        // Exactly centered aggregate dequantizes to zero.
        let p = PbmParams::new(4, 0.25, 1.0, 2).unwrap();
        assert_eq!(pbm_sum_estimate(&[4], &p).unwrap(), vec![0.0]);
        // k = 1, beta = 1/4, b = 4, M = 2, aggregate 5 -> (1/1) * (5 - 4) = 1.
        assert_eq!(pbm_sum_estimate(&[5], &p).unwrap(), vec![1.0]);
        // Entries above bins * parties are corrupted.
        assert!(matches!(
            pbm_sum_estimate(&[9], &p),
            Err(MechError::CorruptedAggregate { .. })
        ));
    }

    #[test]
    fn end_to_end_sum_is_unbiased_with_stated_variance() {
        // M = 3 fixed values; Monte-Carlo mean within 4 sigma of the true
        // sum and variance within 10% of k^2 M / (4 beta^2 b). Inputs sit
        // near zero so the per-draw variance is at the stated worst case.
        let p = PbmParams::new(64, 0.25, 1.0, 3).unwrap();
        let inputs = [0.05, -0.03, 0.08];
        let true_sum: f64 = inputs.iter().sum();
        let trials = 100_000;
        let mut rng = StreamRng::from_key(7);
        let mut estimates = Vec::with_capacity(trials);
        for _ in 0..trials {
            let mut aggregate = 0u64;
            for &x in &inputs {
                aggregate += pbm_quantize(x, &p, &mut rng).unwrap() as u64;
            }
            estimates.push(pbm_sum_estimate(&[aggregate], &p).unwrap()[0]);
        }
        let stated_var = p.bound * p.bound * p.parties as f64
            / (4.0 * p.slope * p.slope * p.bins as f64);
        let mean = math::mean(&estimates);
        let var = math::variance(&estimates);
        let mean_bound = 4.0 * math::sqrt(stated_var / trials as f64);
        assert!((mean - true_sum).abs() < mean_bound, "mean {mean} vs {true_sum}");
        assert!((var - stated_var).abs() < 0.1 * stated_var, "var {var} vs {stated_var}");
    }

    #[test]
    fn merge_sum_adds_values_and_bins() {
        let a = QuantizedVector::new(vec![3, 4], 4).unwrap();
        let b = QuantizedVector::new(vec![1, 4], 4).unwrap();
        let merged = a.merge_sum(&b).unwrap();
        assert_eq!(merged.values(), &[4, 8]);
        assert_eq!(merged.bins(), 8);
        let c = QuantizedVector::new(vec![1], 4).unwrap();
        assert!(a.merge_sum(&c).is_err());
    }
}
