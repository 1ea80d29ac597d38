//! Latent-conditional radiance field and volume rendering.
//!
//! A single MLP is shared between the coarse and fine passes. Density comes
//! from the trunk on integrated position features only; color comes from a
//! one-layer head on `[z, γ(d), ℓa]`, where `z` is the last trunk activation.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sfnerf_tape::{Matrix, Real, Tape, Var};

use crate::encoding::{integrated_positional_encode_into, positional_encode_into, EncodingConfig};
use crate::error::{input, Error, Result};
use crate::geometry::{FrustumSampleSet, Ray};
use crate::params::{Bound, Dense, ParamSet};

/// Raw density is shifted by this before the softplus, so a fresh network
/// starts close to empty space.
pub const DENSITY_SHIFT: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StaticFieldConfig {
    pub trunk_depth: usize,
    pub trunk_width: usize,
    pub color_width: usize,
    pub appearance_dim: usize,
}

impl Default for StaticFieldConfig {
    fn default() -> Self {
        Self {
            trunk_depth: 8,
            trunk_width: 256,
            color_width: 128,
            appearance_dim: 48,
        }
    }
}

impl StaticFieldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trunk_depth == 0 || self.trunk_width == 0 || self.color_width == 0 {
            return Err(Error::Config(
                "static field layer sizes must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StaticField {
    pub config: StaticFieldConfig,
    pub encoding: EncodingConfig,
    pub trunk: Vec<Dense>,
    pub density: Dense,
    /// Input rows are ordered `[z, γ(d), ℓa]`.
    pub color_hidden: Dense,
    pub color_out: Dense,
}

/// Per-sample output of the field.
#[derive(Clone, Debug, PartialEq)]
pub struct RadianceSample {
    pub density: f64,
    pub color: [f64; 3],
    pub feature: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderResult {
    pub color: [f64; 3],
    pub weights: Vec<f64>,
    /// Transmittance at the start of every interval.
    pub transmittance: Vec<f64>,
    pub opacity: f64,
}

/// Encoded inputs of `R` rays with `K` intervals each.
#[derive(Clone, Debug)]
pub struct SampleBatch<T: Real> {
    pub rays: usize,
    pub k: usize,
    /// `R·K × 6 L_x` integrated position features, ray-major.
    pub positions: Matrix<T>,
    /// `R × K` interval lengths.
    pub deltas: Matrix<T>,
}

impl<T: Real> SampleBatch<T> {
    pub fn new(sets: &[FrustumSampleSet], encoding: &EncodingConfig) -> Result<Self> {
        let k = sets.first().map(|s| s.len()).unwrap_or(0);
        if sets.iter().any(|s| s.len() != k) {
            return Err(input("all rays in a batch need the same interval count"));
        }
        let s = encoding.position_scale;
        let dim = encoding.position_dim();
        let mut feats = Vec::with_capacity(sets.len() * k * dim);
        let mut deltas = Vec::with_capacity(sets.len() * k);
        for set in sets {
            for (m, c) in set.means.iter().zip(&set.covariances) {
                integrated_positional_encode_into(
                    &m.map(|x| x * s),
                    &c.map(|x| x * s * s),
                    encoding.position_levels,
                    &mut feats,
                )?;
            }
            deltas.extend(set.deltas());
        }
        Ok(Self {
            rays: sets.len(),
            k,
            positions: Matrix::from_f64(sets.len() * k, dim, &feats),
            deltas: Matrix::from_f64(sets.len(), k, &deltas),
        })
    }
}

/// `R × 6 L_d` direction features.
pub fn direction_features<T: Real>(rays: &[Ray], encoding: &EncodingConfig) -> Matrix<T> {
    let mut out = Vec::with_capacity(rays.len() * encoding.direction_dim());
    for r in rays {
        positional_encode_into(&r.direction, encoding.direction_levels, &mut out);
    }
    Matrix::from_f64(rays.len(), encoding.direction_dim(), &out)
}

/// Tape outputs of one rendering pass.
#[derive(Clone, Copy, Debug)]
pub struct RenderVars<'t, T: Real> {
    /// `R × 3`.
    pub color: Var<'t, T>,
    /// `R × K`.
    pub weights: Var<'t, T>,
    /// `R × K`.
    pub density: Var<'t, T>,
}

impl StaticField {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        config: StaticFieldConfig,
        encoding: EncodingConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let w = config.trunk_width;
        let mut trunk = Vec::with_capacity(config.trunk_depth);
        let mut fan_in = encoding.position_dim();
        for i in 0..config.trunk_depth {
            trunk.push(Dense::new(
                params,
                &format!("static.trunk{i}"),
                fan_in,
                w,
                rng,
            ));
            fan_in = w;
        }
        let density = Dense::new(params, "static.density", w, 1, rng);
        let cond = encoding.direction_dim() + config.appearance_dim;
        let color_hidden = Dense::new(params, "static.color0", w + cond, config.color_width, rng);
        let color_out = Dense::new(params, "static.color1", config.color_width, 3, rng);
        Self {
            config,
            encoding,
            trunk,
            density,
            color_hidden,
            color_out,
        }
    }

    /// Density and color of `R·K` samples.
    ///
    /// `directions` is `R × 6 L_d` and `appearance` is `R × n_a`; both are
    /// shared by the `k` samples of their ray.
    pub fn forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        positions: Var<'t, T>,
        directions: Var<'t, T>,
        appearance: Var<'t, T>,
        k: usize,
    ) -> (Var<'t, T>, Var<'t, T>, Var<'t, T>) {
        let (sigma, h) = self.trunk_forward(p, positions);
        let rgb = self.color_head(p, h, directions, appearance, k);
        (sigma, rgb, h)
    }

    /// Density and trunk feature `z` from encoded positions; neither
    /// depends on direction or appearance.
    pub fn trunk_forward<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        positions: Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let mut h = positions;
        for layer in &self.trunk {
            h = layer.apply(p, h).relu();
        }
        let sigma = self
            .density
            .apply(p, h)
            .affine(1.0, DENSITY_SHIFT)
            .softplus();
        (sigma, h)
    }

    /// Colors of `R·K` samples from their trunk features.
    pub fn color_head<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        h: Var<'t, T>,
        directions: Var<'t, T>,
        appearance: Var<'t, T>,
        k: usize,
    ) -> Var<'t, T> {
        let pre = self.color_trunk_term(p, h);
        self.color_from_trunk_term(p, pre, directions, appearance, k)
    }

    /// The `z`-dependent part of the color layer's pre-activation. It does
    /// not involve the appearance embedding, so it can be cached while an
    /// embedding is fitted.
    pub fn color_trunk_term<'t, T: Real>(&self, p: &Bound<'t, T>, h: Var<'t, T>) -> Var<'t, T> {
        let w = self.config.trunk_width;
        h.matmul(p[self.color_hidden.weight].slice_rows(0, w))
    }

    pub fn color_from_trunk_term<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        trunk_term: Var<'t, T>,
        directions: Var<'t, T>,
        appearance: Var<'t, T>,
        k: usize,
    ) -> Var<'t, T> {
        let w = self.config.trunk_width;
        let rest = self.color_hidden.inputs - w;
        let cond = p.tape().concat(&[directions, appearance]);
        let per_ray = cond
            .matmul(p[self.color_hidden.weight].slice_rows(w, rest))
            .repeat_rows(k);
        let hidden = (trunk_term + per_ray)
            .add_row(p[self.color_hidden.bias])
            .relu();
        self.color_out.apply(p, hidden).sigmoid()
    }

    /// Composites one pass for a batch of rays; the background is black.
    pub fn render<'t, T: Real>(
        &self,
        p: &Bound<'t, T>,
        batch: &SampleBatch<T>,
        directions: Var<'t, T>,
        appearance: Var<'t, T>,
    ) -> RenderVars<'t, T> {
        let tape = p.tape();
        let positions = tape.constant(batch.positions.clone());
        let (sigma, rgb, _) = self.forward(p, positions, directions, appearance, batch.k);
        let density = sigma.reshape(batch.rays, batch.k);
        let (color, weights) = composite(density, rgb, tape.constant(batch.deltas.clone()));
        RenderVars {
            color,
            weights,
            density,
        }
    }

    /// Plain evaluation of the field on one ray's samples.
    pub fn query<T: Real>(
        &self,
        params: &ParamSet<T>,
        samples: &FrustumSampleSet,
        direction_encoding: &[f64],
        appearance: &[f64],
    ) -> Result<Vec<RadianceSample>> {
        if direction_encoding.len() != self.encoding.direction_dim() {
            return Err(input(format!(
                "direction encoding has {} entries, expected {}",
                direction_encoding.len(),
                self.encoding.direction_dim()
            )));
        }
        if appearance.len() != self.config.appearance_dim {
            return Err(input(format!(
                "appearance embedding has {} entries, expected {}",
                appearance.len(),
                self.config.appearance_dim
            )));
        }
        let batch = SampleBatch::<T>::new(std::slice::from_ref(samples), &self.encoding)?;
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let dirs = tape.constant(Matrix::from_f64(
            1,
            direction_encoding.len(),
            direction_encoding,
        ));
        let app = tape.constant(Matrix::from_f64(1, appearance.len(), appearance));
        let pos = tape.constant(batch.positions);
        let (sigma, rgb, z) = self.forward(&p, pos, dirs, app, batch.k);
        let (sigma, rgb, z) = (sigma.value(), rgb.value(), z.value());
        Ok((0..batch.k)
            .map(|i| RadianceSample {
                density: sigma.get(i, 0).f64(),
                color: [
                    rgb.get(i, 0).f64(),
                    rgb.get(i, 1).f64(),
                    rgb.get(i, 2).f64(),
                ],
                feature: z.row(i).iter().map(|x| x.f64()).collect(),
            })
            .collect())
    }
}

/// Alpha compositing on the tape. `density` and `deltas` are `R × K`, `rgb`
/// is `R·K × 3`; returns the `R × 3` colors and `R × K` weights.
pub fn composite<'t, T: Real>(
    density: Var<'t, T>,
    rgb: Var<'t, T>,
    deltas: Var<'t, T>,
) -> (Var<'t, T>, Var<'t, T>) {
    let (r, k) = density.shape();
    let optical = density * deltas;
    let transmittance = optical.cumsum_exclusive().scale(-1.0).exp();
    let alpha = optical.scale(-1.0).exp().one_minus();
    let weights = transmittance * alpha;
    let color = rgb.mul_col(weights.reshape(r * k, 1)).sum_row_groups(k);
    (color, weights)
}

/// Quadrature of the volume rendering integral for one ray.
pub fn render_ray(
    ray: &Ray,
    samples: &FrustumSampleSet,
    radiance: &[RadianceSample],
) -> Result<RenderResult> {
    if radiance.len() != samples.len() {
        return Err(input(format!(
            "{} radiance samples for {} intervals",
            radiance.len(),
            samples.len()
        )));
    }
    let deltas = samples.deltas();
    let k = radiance.len();
    let mut weights = Vec::with_capacity(k);
    let mut transmittance = Vec::with_capacity(k);
    let mut color = [0.0; 3];
    let mut acc = 0.0f64;
    for (i, (s, d)) in radiance.iter().zip(&deltas).enumerate() {
        if !s.density.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite density {} at sample {i} of the ray through pixel ({:.4}, {:.4}) of image {}",
                s.density, ray.pixel[0], ray.pixel[1], ray.image
            )));
        }
        let tr = (-acc).exp();
        let optical = s.density * d;
        let w = tr * (1.0 - (-optical).exp());
        for c in 0..3 {
            color[c] += w * s.color[c];
        }
        weights.push(w);
        transmittance.push(tr);
        acc += optical;
    }
    Ok(RenderResult {
        color,
        opacity: weights.iter().sum(),
        weights,
        transmittance,
    })
}
