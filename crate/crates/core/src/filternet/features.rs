//! Per-pixel image features for the transient filter.
//!
//! A backbone produces a raw feature vector for each pixel and a three-layer
//! adapter maps it to the filter's feature input. The backbone is either the
//! built-in reference encoder (a single learned filter over a local patch and
//! a coarser context patch, trained jointly with everything else) or frozen
//! maps loaded from `.feat` files.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sfnerf_tape::{Matrix, Real, Tape, Var};

use crate::error::{Error, Result};
use crate::params::{Bound, Dense, ParamSet};
use crate::raster::{read_raw, write_raw, Image};

/// Side of the square patches the reference encoder looks at.
pub const PATCH: usize = 5;
/// Downsampling factor of the context patch.
pub const CONTEXT_FACTOR: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSource {
    ReferenceEncoder,
    PrecomputedFiles,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub source: FeatureSource,
    /// Output width of the reference encoder, or the channel count of the
    /// precomputed maps.
    pub backbone_dim: usize,
    pub adapter_width: usize,
    /// `F`, the feature width seen by the filter.
    pub feature_dim: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            source: FeatureSource::ReferenceEncoder,
            backbone_dim: 32,
            adapter_width: 128,
            feature_dim: 128,
        }
    }
}

/// `H × W × F` map, row-major and channel-last.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn write_feat(&self, path: &Path) -> Result<()> {
        write_raw(path, self.width, self.height, self.dim, &self.data)
    }

    pub fn read_feat(path: &Path) -> Result<FeatureMap> {
        let (width, height, dim, data) = read_raw(path)?;
        Ok(FeatureMap {
            width,
            height,
            dim,
            data,
        })
    }

    /// Area-averaging downsample by an integer factor.
    pub fn downsample(&self, factor: usize) -> FeatureMap {
        let (w, h) = (self.width / factor, self.height / factor);
        let mut out = FeatureMap::new(w, h, self.dim);
        let norm = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut acc = vec![0f32; self.dim];
                for dy in 0..factor {
                    for dx in 0..factor {
                        for (a, v) in acc
                            .iter_mut()
                            .zip(self.at(x * factor + dx, y * factor + dy))
                        {
                            *a += v;
                        }
                    }
                }
                for (o, a) in out.at_mut(x, y).iter_mut().zip(acc) {
                    *o = a * norm;
                }
            }
        }
        out
    }

    /// Nearest-neighbour upsampling by an integer factor, for backbones
    /// whose maps are coarser than the image.
    pub fn upsample(&self, factor: usize) -> FeatureMap {
        let mut out = FeatureMap::new(self.width * factor, self.height * factor, self.dim);
        for y in 0..out.height {
            for x in 0..out.width {
                let src = self.at(x / factor, y / factor).to_vec();
                out.at_mut(x, y).copy_from_slice(&src);
            }
        }
        out
    }

    /// Brings a map to `width × height` when the sizes differ by an
    /// integer factor in either direction.
    pub fn resized_to(self, width: usize, height: usize) -> Option<FeatureMap> {
        if self.width == width && self.height == height {
            return Some(self);
        }
        if self.width > width && self.width % width == 0 {
            let f = self.width / width;
            if self.height / f == height {
                return Some(self.downsample(f));
            }
        }
        if width > self.width && width % self.width == 0 {
            let f = width / self.width;
            if self.height * f == height {
                return Some(self.upsample(f));
            }
        }
        None
    }

    /// Loads `<dir>/<stem>.feat` and brings it to the image size.
    pub fn load_for_image(
        dir: &Path,
        stem: &str,
        width: usize,
        height: usize,
        dim: usize,
    ) -> Result<FeatureMap> {
        let path = dir.join(format!("{stem}.feat"));
        if !path.is_file() {
            return Err(Error::Ingestion(format!(
                "no feature file for image {stem} (looked for {})",
                path.display()
            )));
        }
        let map = Self::read_feat(&path).map_err(|e| match e {
            Error::Ingestion(m) => Error::Ingestion(format!("image {stem}: {m}")),
            other => other,
        })?;
        if map.dim != dim {
            return Err(Error::Ingestion(format!(
                "image {stem}: feature file has {} channels, expected {dim}",
                map.dim
            )));
        }
        let (mw, mh) = (map.width, map.height);
        let map = map.resized_to(width, height).ok_or_else(|| {
            Error::Ingestion(format!(
                "image {stem}: feature map is {mw}x{mh}, which does not match the {width}x{height} image"
            ))
        })?;
        if !map.all_finite() {
            return Err(Error::Ingestion(format!(
                "image {stem}: feature file contains non-finite values"
            )));
        }
        Ok(map)
    }
}

/// A frozen image-to-features backbone.
pub trait FeatureExtractor {
    fn dim(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<FeatureMap>;
}

/// An image with its context-scale copy, ready for patch lookups.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    pub full: Image,
    pub context: Image,
    pub context_factor: usize,
}

impl PreparedImage {
    pub fn new(image: &Image) -> Self {
        let f = CONTEXT_FACTOR.min(image.width).min(image.height).max(1);
        Self {
            full: image.clone(),
            context: image.downsample(f),
            context_factor: f,
        }
    }

    /// Appends the `2·PATCH²·3` encoder inputs of pixel `(x, y)`, using
    /// clamp-to-edge padding.
    pub fn patch_into(&self, x: usize, y: usize, out: &mut Vec<f64>) {
        let r = (PATCH / 2) as isize;
        for (img, cx, cy) in [
            (&self.full, x as isize, y as isize),
            (
                &self.context,
                (x / self.context_factor) as isize,
                (y / self.context_factor) as isize,
            ),
        ] {
            for dy in -r..=r {
                for dx in -r..=r {
                    out.extend(
                        img.pixel_clamped(cx + dx, cy + dy)
                            .iter()
                            .map(|&v| v as f64),
                    );
                }
            }
        }
    }
}

pub const REFERENCE_INPUTS: usize = 2 * PATCH * PATCH * 3;

/// Raw per-pixel backbone inputs for a whole dataset.
#[derive(Clone, Debug)]
pub enum FeatureInputs {
    Images(Vec<PreparedImage>),
    Maps(Vec<FeatureMap>),
}

impl FeatureInputs {
    pub fn width(&self) -> usize {
        match self {
            FeatureInputs::Images(_) => REFERENCE_INPUTS,
            FeatureInputs::Maps(m) => m.first().map(|m| m.dim).unwrap_or(0),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            FeatureInputs::Images(v) => v.len(),
            FeatureInputs::Maps(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One row per `(image, x, y)`.
    pub fn rows<T: Real>(&self, pixels: &[(usize, usize, usize)]) -> Matrix<T> {
        let w = self.width();
        let mut data = Vec::with_capacity(pixels.len() * w);
        for &(i, x, y) in pixels {
            match self {
                FeatureInputs::Images(v) => v[i].patch_into(x, y, &mut data),
                FeatureInputs::Maps(v) => data.extend(v[i].at(x, y).iter().map(|&f| f as f64)),
            }
        }
        Matrix::from_f64(pixels.len(), w, &data)
    }
}

/// Backbone (when trainable) plus adapter.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNet {
    pub config: FeatureConfig,
    /// Present for the reference encoder only.
    pub encoder: Option<Dense>,
    pub adapter: [Dense; 3],
}

impl FeatureNet {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        config: FeatureConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let encoder = match config.source {
            FeatureSource::ReferenceEncoder => Some(Dense::new(
                params,
                "features.encoder",
                REFERENCE_INPUTS,
                config.backbone_dim,
                rng,
            )),
            FeatureSource::PrecomputedFiles => None,
        };
        let aw = config.adapter_width;
        let adapter = [
            Dense::new(params, "features.adapter0", config.backbone_dim, aw, rng),
            Dense::new(params, "features.adapter1", aw, aw, rng),
            Dense::new(params, "features.adapter2", aw, config.feature_dim, rng),
        ];
        Self {
            config,
            encoder,
            adapter,
        }
    }

    /// Maps raw backbone inputs (`R × inputs`) to `R × F` features.
    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, raw: Var<'t, T>) -> Var<'t, T> {
        let mut h = match &self.encoder {
            Some(e) => e.apply(p, raw).relu(),
            None => raw,
        };
        h = self.adapter[0].apply(p, h).relu();
        h = self.adapter[1].apply(p, h).relu();
        self.adapter[2].apply(p, h)
    }

    /// Full `H × W × F` feature map of one image.
    pub fn extract_map<T: Real>(
        &self,
        params: &ParamSet<T>,
        inputs: &FeatureInputs,
        image: usize,
        width: usize,
        height: usize,
    ) -> FeatureMap {
        let pixels: Vec<_> = (0..height)
            .flat_map(|y| (0..width).map(move |x| (image, x, y)))
            .collect();
        let tape = Tape::new();
        let p = params.bind_frozen(&tape);
        let raw = tape.constant(inputs.rows::<T>(&pixels));
        let f = self.apply(&p, raw);
        let v = f.value();
        FeatureMap {
            width,
            height,
            dim: v.cols,
            data: v.data.iter().map(|x| x.f64() as f32).collect(),
        }
    }
}

/// The reference encoder with fixed parameters, usable as a frozen
/// backbone (for example after pretraining on a held-out scene).
pub struct FrozenReference<'a, T: Real> {
    pub encoder: &'a Dense,
    pub params: &'a ParamSet<T>,
}

impl<T: Real> FeatureExtractor for FrozenReference<'_, T> {
    fn dim(&self) -> usize {
        self.encoder.outputs
    }

    fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let prep = FeatureInputs::Images(vec![PreparedImage::new(image)]);
        let pixels: Vec<_> = (0..image.height)
            .flat_map(|y| (0..image.width).map(move |x| (0, x, y)))
            .collect();
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = self
            .encoder
            .apply(&p, tape.constant(prep.rows::<T>(&pixels)))
            .relu();
        let v = out.value();
        let map = FeatureMap {
            width: image.width,
            height: image.height,
            dim: v.cols,
            data: v.data.iter().map(|x| x.f64() as f32).collect(),
        };
        if !map.all_finite() {
            return Err(Error::Numeric(
                "reference encoder produced non-finite features".into(),
            ));
        }
        Ok(map)
    }
}
