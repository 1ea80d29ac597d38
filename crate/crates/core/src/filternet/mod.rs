//! Two-dimensional transient filter.
//!
//! For every training pixel the filter maps `[γ(p), ℓτ, f(p)]` to a
//! transient color, an uncertainty `β ≥ β_min` and an opacity. With the
//! Concrete head the network predicts a location `α̃ > 0` and the opacity is
//! a Binary Concrete sample
//! `α = sigmoid((ln α̃ + ln U − ln(1 − U)) / t)`; evaluation fixes `U = ½`.
//!
//! The opacity's Jacobian with respect to the pixel encoding is built from
//! ordinary tape operations (forward-mode tangents through the ReLU stack),
//! so the smoothness prior can be differentiated with respect to the
//! weights without second-order reverse mode.

pub mod features;

pub use features::{
    FeatureConfig, FeatureExtractor, FeatureInputs, FeatureMap, FeatureNet, FeatureSource,
    FrozenReference, PreparedImage,
};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sfnerf_tape::{Matrix, Real, Tape, Var};

use crate::encoding::{band_range, positional_encode_into, EncodingConfig};
use crate::error::{input, Error, Result};
use crate::params::{Bound, Dense, ParamSet};

/// Added to the softplus so `ln α̃` stays finite.
pub const LOCATION_FLOOR: f64 = 1e-10;
/// Uniform noise is kept this far from 0 and 1.
const NOISE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpacityHead {
    /// Softplus location with a Binary Concrete sample.
    Concrete,
    /// Plain sigmoid opacity, no reparameterization.
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterNetConfig {
    pub depth: usize,
    pub width: usize,
    pub transient_dim: usize,
    pub beta_min: f64,
    pub opacity_head: OpacityHead,
}

impl Default for FilterNetConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            width: 128,
            transient_dim: 128,
            beta_min: 0.1,
            opacity_head: OpacityHead::Concrete,
        }
    }
}

impl FilterNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.width == 0 {
            return Err(Error::Config("filter layer sizes must be positive".into()));
        }
        if !(self.beta_min > 0.0) {
            return Err(Error::Config("beta_min must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterNet {
    pub config: FilterNetConfig,
    pub pixel_levels: usize,
    pub feature_dim: usize,
    pub layers: Vec<Dense>,
    /// Columns: raw opacity, transient RGB, raw uncertainty.
    pub head: Dense,
}

/// One pixel's transient prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransientOutput {
    /// `α̃` for the Concrete head, the opacity itself for the sigmoid head.
    pub location: f64,
    pub color: [f64; 3],
    pub beta: f64,
}

/// Tape outputs for `R` pixels.
#[derive(Clone, Copy, Debug)]
pub struct TransientVars<'t, T: Real> {
    /// `R × 1` opacity in `(0, 1)`.
    pub opacity: Var<'t, T>,
    /// `R × 1`, `α̃` or the sigmoid opacity depending on the head.
    pub location: Var<'t, T>,
    pub color: Var<'t, T>,
    pub beta: Var<'t, T>,
    /// `R × 4 L_p` Jacobian of the opacity with respect to `γ(p)`, when
    /// the smoothness prior was requested.
    pub jacobian: Option<Var<'t, T>>,
    /// `R × 1` per-pixel smoothness prior, when requested.
    pub smoothness: Option<Var<'t, T>>,
}

/// `R × 4 L_p` pixel encodings for coordinates in `[0, 1]²`.
pub fn pixel_features<T: Real>(pixels: &[[f64; 2]], levels: usize) -> Matrix<T> {
    let mut out = Vec::with_capacity(pixels.len() * 4 * levels);
    for p in pixels {
        positional_encode_into(p, levels, &mut out);
    }
    Matrix::from_f64(pixels.len(), 4 * levels, &out)
}

/// `logit(U)` for `U ~ Uniform(0, 1)`, one per pixel.
pub fn concrete_noise(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u = rng.random::<f64>().clamp(NOISE_EPS, 1.0 - NOISE_EPS);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

impl FilterNet {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        config: FilterNetConfig,
        encoding: &EncodingConfig,
        feature_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut fan_in = encoding.pixel_dim() + config.transient_dim + feature_dim;
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            layers.push(Dense::new(
                params,
                &format!("filter.layer{i}"),
                fan_in,
                config.width,
                rng,
            ));
            fan_in = config.width;
        }
        let head = Dense::new(params, "filter.head", config.width, 5, rng);
        Self {
            config,
            pixel_levels: encoding.pixel_levels,
            feature_dim,
            layers,
            head,
        }
    }

    pub fn pixel_dim(&self) -> usize {
        4 * self.pixel_levels
    }

    /// Full forward pass for `R` pixels.
    ///
    /// `noise` holds `logit(U)` per pixel (zeros give evaluation mode) and is
    /// ignored by the sigmoid head. With `smoothness` set, the per-pixel
    /// prior `Σ_k 2^k ‖∂α/∂γ_k(p)‖₁` is also built.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        pixels: Var<'t, T>,
        transient: Var<'t, T>,
        features: Var<'t, T>,
        noise: &[f64],
        temperature: f64,
        smoothness: bool,
    ) -> TransientVars<'t, T> {
        let tape = p.tape();
        let rows = pixels.shape().0;
        assert_eq!(noise.len(), rows, "one noise value per pixel");
        let mut h = tape.concat(&[pixels, transient, features]);
        let mut masks = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let pre = layer.apply(p, h);
            if smoothness {
                masks.push(
                    pre.value()
                        .map(|x| if x > T::zero() { T::one() } else { T::zero() }),
                );
            }
            h = pre.relu();
        }
        let raw = self.head.apply(p, h);
        let raw_alpha = raw.slice_cols(0, 1);
        let color = raw.slice_cols(1, 3).sigmoid();
        let beta = raw
            .slice_cols(4, 1)
            .softplus()
            .affine(1.0, self.config.beta_min);

        let (location, opacity, slope) = match self.config.opacity_head {
            OpacityHead::Concrete => {
                let loc = raw_alpha.softplus().affine(1.0, LOCATION_FLOOR);
                let u = tape.constant(Matrix::from_f64(rows, 1, noise));
                let inv_t = 1.0 / temperature;
                let alpha = (loc.ln() + u).scale(inv_t).sigmoid();
                let slope = smoothness.then(|| {
                    (alpha * alpha.one_minus() * raw_alpha.sigmoid() * loc.recip()).scale(inv_t)
                });
                (loc, alpha, slope)
            }
            OpacityHead::Sigmoid => {
                let alpha = raw_alpha.sigmoid();
                let slope = smoothness.then(|| alpha * alpha.one_minus());
                (alpha, alpha, slope)
            }
        };

        let jacobian = slope.map(|s| self.opacity_jacobian(p, &masks, s, rows));
        let smoothness = jacobian.map(|jac| {
            let band_weights =
                Matrix::from_fn(self.pixel_dim(), 1, |r, _| T::of((1u64 << (r / 4)) as f64));
            jac.abs().matmul(tape.constant(band_weights))
        });
        TransientVars {
            opacity,
            location,
            color,
            beta,
            jacobian,
            smoothness,
        }
    }

    /// `R × 4 L_p` Jacobian of the opacity with respect to the pixel
    /// encoding, given the ReLU masks of every hidden layer and
    /// `dα/d(raw)` per pixel.
    fn opacity_jacobian<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        masks: &[Matrix<T>],
        slope: Var<'t, T>,
        rows: usize,
    ) -> Var<'t, T> {
        let tape = p.tape();
        let d = self.pixel_dim();
        let repeated = |m: &Matrix<T>| {
            let mut data = Vec::with_capacity(m.len() * d);
            for r in 0..m.rows {
                for _ in 0..d {
                    data.extend_from_slice(m.row(r));
                }
            }
            tape.constant(Matrix::from_vec(m.rows * d, m.cols, data))
        };
        // Row r·D + j carries the tangent of pixel r along encoding slot j.
        let mut tangent =
            p[self.layers[0].weight].slice_rows(0, d).tile_rows(rows) * repeated(&masks[0]);
        for (layer, mask) in self.layers.iter().zip(masks).skip(1) {
            tangent = tangent.matmul(p[layer.weight]) * repeated(mask);
        }
        let draw = tangent.matmul(p[self.head.weight].slice_cols(0, 1));
        (draw * slope.repeat_rows(d)).reshape(rows, d)
    }

    /// Plain evaluation for one pixel.
    pub fn forward_pixel<T: Real>(
        &self,
        params: &ParamSet<T>,
        pixel: [f64; 2],
        transient: &[f64],
        feature: &[f64],
    ) -> Result<TransientOutput> {
        if pixel
            .iter()
            .chain(transient)
            .chain(feature)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite filter input".into()));
        }
        if transient.len() != self.config.transient_dim || feature.len() != self.feature_dim {
            return Err(input(format!(
                "filter expects a {}-dim transient embedding and {}-dim feature, got {} and {}",
                self.config.transient_dim,
                self.feature_dim,
                transient.len(),
                feature.len()
            )));
        }
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let out = self.forward(
            &p,
            tape.constant(pixel_features::<T>(&[pixel], self.pixel_levels)),
            tape.constant(Matrix::from_f64(1, transient.len(), transient)),
            tape.constant(Matrix::from_f64(1, feature.len(), feature)),
            &[0.0],
            1.0,
            false,
        );
        let c = out.color.value();
        Ok(TransientOutput {
            location: out.location.item().f64(),
            color: [c.data[0].f64(), c.data[1].f64(), c.data[2].f64()],
            beta: out.beta.item().f64(),
        })
    }

    /// Opacity and smoothness prior of one pixel given its encoded inputs;
    /// used to probe the prior against finite differences.
    pub fn probe<T: Real>(
        &self,
        params: &ParamSet<T>,
        pixel_encoding: &[f64],
        transient: &[f64],
        feature: &[f64],
        noise: f64,
        temperature: f64,
    ) -> (f64, f64, Vec<f64>) {
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let pix = tape.constant(Matrix::from_f64(1, pixel_encoding.len(), pixel_encoding));
        let out = self.forward(
            &p,
            pix,
            tape.constant(Matrix::from_f64(1, transient.len(), transient)),
            tape.constant(Matrix::from_f64(1, feature.len(), feature)),
            &[noise],
            temperature,
            true,
        );
        let sm = out.smoothness.expect("requested").item().f64();
        let jac = out.jacobian.expect("requested").value().to_f64();
        (out.opacity.item().f64(), sm, jac)
    }
}

/// Smoothness prior from a Jacobian with respect to a band-major encoding
/// of an `n`-dimensional input: `Σ_k 2^k Σ |J[band k]|`.
pub fn smoothness_from_jacobian(jacobian: &[f64], n: usize) -> f64 {
    let levels = jacobian.len() / (2 * n);
    (0..levels)
        .map(|k| {
            let s: f64 = jacobian[band_range(n, k)].iter().map(|v| v.abs()).sum();
            (1u64 << k) as f64 * s
        })
        .sum()
}

/// Binary Concrete opacity for a given `logit(U)`.
pub fn concrete_opacity(location: f64, temperature: f64, logit_u: f64) -> Result<f64> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!(
            "Concrete temperature must be positive, got {temperature}"
        )));
    }
    if !(location > 0.0) {
        return Err(input(format!(
            "opacity location must be positive, got {location}"
        )));
    }
    let z = (location.ln() + logit_u) / temperature;
    Ok(sfnerf_tape::activations::sigmoid(z))
}

/// Opacity with `U` fixed at ½.
pub fn eval_transient_opacity(location: f64, temperature: f64) -> Result<f64> {
    concrete_opacity(location, temperature, 0.0)
}

/// Opacity with `U ~ Uniform(0, 1)` drawn from `rng`.
pub fn sample_transient_opacity(
    location: f64,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let u = concrete_noise(1, rng)[0];
    concrete_opacity(location, temperature, u)
}

/// `α Cᵗ + (1 − α) C`, per channel.
pub fn blend(alpha: f64, transient: [f64; 3], static_color: [f64; 3]) -> [f64; 3] {
    std::array::from_fn(|c| alpha * transient[c] + (1.0 - alpha) * static_color[c])
}

/// Tape version of [`blend`] for `R` pixels.
pub fn blend_vars<'t, T: Real>(
    alpha: Var<'t, T>,
    transient: Var<'t, T>,
    static_color: Var<'t, T>,
) -> Var<'t, T> {
    static_color.mul_col(alpha.one_minus()) + transient.mul_col(alpha)
}
