//! Frequency encodings.
//!
//! Layout is band-major: band `k` occupies `2n` consecutive slots holding
//! `cos(2^k π v_0..n)` followed by `sin(2^k π v_0..n)`. [`band_range`]
//! returns the slots of one band, which the opacity smoothness prior
//! differentiates against.

use std::f64::consts::PI;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncodingConfig {
    /// Integrated encoding levels for frustum positions.
    pub position_levels: usize,
    pub direction_levels: usize,
    pub pixel_levels: usize,
    /// Multiplier applied to world positions before encoding. The
    /// lowest band has period 2, so sampled positions should land in
    /// `(-1, 1)` after scaling.
    pub position_scale: f64,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            position_levels: 10,
            direction_levels: 4,
            pixel_levels: 10,
            position_scale: 1.0,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.position_levels == 0 || self.direction_levels == 0 || self.pixel_levels == 0 {
            return Err(crate::Error::Config(
                "encoding levels must all be at least 1".into(),
            ));
        }
        if !(self.position_scale > 0.0 && self.position_scale.is_finite()) {
            return Err(crate::Error::Config(
                "position_scale must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn position_dim(&self) -> usize {
        encoded_len(3, self.position_levels)
    }

    pub fn direction_dim(&self) -> usize {
        encoded_len(3, self.direction_levels)
    }

    pub fn pixel_dim(&self) -> usize {
        encoded_len(2, self.pixel_levels)
    }
}

pub fn encoded_len(n: usize, levels: usize) -> usize {
    2 * n * levels
}

/// Slots of band `k` for an `n`-dimensional input.
pub fn band_range(n: usize, k: usize) -> Range<usize> {
    2 * n * k..2 * n * (k + 1)
}

pub fn positional_encode(v: &[f64], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(encoded_len(v.len(), levels));
    positional_encode_into(v, levels, &mut out);
    out
}

pub fn positional_encode_into(v: &[f64], levels: usize, out: &mut Vec<f64>) {
    for k in 0..levels {
        let freq = (1u64 << k) as f64 * PI;
        out.extend(v.iter().map(|&x| (freq * x).cos()));
        out.extend(v.iter().map(|&x| (freq * x).sin()));
    }
}

/// Expected encoding of a Gaussian with the given mean and diagonal
/// covariance: each band is damped by `exp(-½ 4^k π² σ²)` per axis.
pub fn integrated_positional_encode(
    mean: &[f64; 3],
    variance: &[f64; 3],
    levels: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(encoded_len(3, levels));
    integrated_positional_encode_into(mean, variance, levels, &mut out)?;
    Ok(out)
}

pub fn integrated_positional_encode_into(
    mean: &[f64; 3],
    variance: &[f64; 3],
    levels: usize,
    out: &mut Vec<f64>,
) -> Result<()> {
    if variance.iter().any(|&v| !(v >= 0.0)) {
        return Err(input(format!(
            "variances must be non-negative, got {variance:?}"
        )));
    }
    for k in 0..levels {
        let freq = (1u64 << k) as f64 * PI;
        let damp = variance.map(|v| (-0.5 * freq * freq * v).exp());
        out.extend((0..3).map(|i| (freq * mean[i]).cos() * damp[i]));
        out.extend((0..3).map(|i| (freq * mean[i]).sin() * damp[i]));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn zero_input_layout() {
        let e = positional_encode(&[0.0, 0.0], 2);
        assert_eq!(e, vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(e[band_range(2, 1)], [1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn quarter_period() {
        let e = positional_encode(&[0.5], 1);
        assert!(e[0].abs() < 1e-16);
        assert_eq!(e[1], 1.0);
    }

    #[test]
    fn zero_variance_is_point_encoding() {
        let m = [0.3, -0.7, 0.11];
        let a = integrated_positional_encode(&m, &[0.0; 3], 6).unwrap();
        assert_eq!(a, positional_encode(&m, 6));
    }

    #[test]
    fn large_variance_vanishes() {
        let m = [0.3, -0.7, 0.11];
        // Lowest band has 4^0 π² σ² = π² σ²; make it exceed 60.
        let var = 61.0 / (PI * PI);
        let a = integrated_positional_encode(&m, &[var; 3], 5).unwrap();
        assert!(a.iter().all(|x| x.abs() < 1e-6));
    }

    #[test]
    fn negative_variance_rejected() {
        assert!(integrated_positional_encode(&[0.0; 3], &[0.1, -1e-9, 0.0], 2).is_err());
    }

    fn monte_carlo_check(mean: [f64; 3], var: [f64; 3], levels: usize, seed: u64) {
        let enc = integrated_positional_encode(&mean, &var, levels).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normals: Vec<Normal<f64>> = (0..3)
            .map(|i| Normal::new(mean[i], var[i].sqrt()).unwrap())
            .collect();
        let n = 1_000_000;
        let mut acc = vec![0.0; enc.len()];
        let mut buf = Vec::with_capacity(enc.len());
        for _ in 0..n {
            let x: Vec<f64> = normals.iter().map(|d| d.sample(&mut rng)).collect();
            buf.clear();
            positional_encode_into(&x, levels, &mut buf);
            for (a, b) in acc.iter_mut().zip(&buf) {
                *a += b;
            }
        }
        for (a, e) in acc.iter().zip(&enc) {
            let mc = a / n as f64;
            assert!((mc - e).abs() < 1e-3, "{mc} vs {e}");
        }
        // The damping must be visible well above the tolerance somewhere.
        let point = positional_encode(&mean, levels);
        let gap = enc
            .iter()
            .zip(&point)
            .map(|(e, p)| (e - p).abs())
            .fold(0.0, f64::max);
        assert!(gap > 1e-2, "damping too weak to be tested: {gap}");
    }

    // Variances keep 2^k π σ ≤ ¼ on every band so one draw's spread is small
    // enough for a 1e-3 tolerance at 10⁶ draws, while the damping itself
    // still moves the top band by a few percent.
    #[test]
    fn matches_monte_carlo_expectation() {
        monte_carlo_check([0.21, -0.4, 0.65], [1e-4, 5e-5, 8e-5], 4, 11);
        monte_carlo_check([-0.73, 0.05, 0.33], [1.5e-3, 6e-4, 1e-3], 2, 12);
    }

    proptest! {
        #[test]
        fn outputs_bounded_and_shaped(v in prop::collection::vec(-50.0f64..50.0, 1..5), levels in 1usize..8) {
            let e = positional_encode(&v, levels);
            prop_assert_eq!(e.len(), 2 * v.len() * levels);
            prop_assert!(e.iter().all(|x| x.abs() <= 1.0));
        }

        #[test]
        fn two_periodic(v in prop::collection::vec(-4.0f64..4.0, 1..4), levels in 1usize..6) {
            let shifted: Vec<f64> = v.iter().map(|x| x + 2.0).collect();
            let a = positional_encode(&v, levels);
            let b = positional_encode(&shifted, levels);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn damping_is_monotone_in_variance(
            m in prop::array::uniform3(-1.0f64..1.0),
            v in prop::array::uniform3(0.0f64..0.05),
            extra in prop::array::uniform3(0.0f64..0.05),
        ) {
            let bigger = [v[0] + extra[0], v[1] + extra[1], v[2] + extra[2]];
            let a = integrated_positional_encode(&m, &v, 5).unwrap();
            let b = integrated_positional_encode(&m, &bigger, 5).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y.abs() <= x.abs() + 1e-15);
                prop_assert!(x.abs() <= 1.0);
            }
        }
    }
}
