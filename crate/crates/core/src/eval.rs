//! Image-quality and decomposition metrics.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{input, Error, Result};
use crate::raster::{GrayMap, Image};

/// Reported PSNR when two images are identical.
pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(input(format!(
            "image shapes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(img: &Image, reference: &Image) -> Result<f64> {
    same_shape(img, reference)?;
    let n = img.data.len().max(1) as f64;
    Ok(img
        .data
        .iter()
        .zip(&reference.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / n)
}

/// `10·log10(1 / MSE)` over all pixels and channels, capped at
/// [`PSNR_CAP`].
pub fn psnr(img: &Image, reference: &Image) -> Result<f64> {
    let m = mse(img, reference)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let c = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

fn grayscale(img: &Image) -> Vec<f64> {
    img.data
        .chunks_exact(3)
        .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
        .collect()
}

/// Valid-mode separable Gaussian filter.
fn filter(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|k| g[k] * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Windowed SSIM on channel-mean grayscale: 11×11 Gaussian window with
/// σ = 1.5, unit dynamic range, averaged over all fully contained windows.
pub fn ssim(img: &Image, reference: &Image) -> Result<f64> {
    same_shape(img, reference)?;
    let (w, h) = (img.width, img.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(input(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let g = gaussian_window();
    let x = grayscale(img);
    let y = grayscale(reference);
    if x == y {
        return Ok(1.0);
    }
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
    let (mx, my) = (filter(&x, w, h, &g), filter(&y, w, h, &g));
    let (sxx, syy, sxy) = (
        filter(&xx, w, h, &g),
        filter(&yy, w, h, &g),
        filter(&xy, w, h, &g),
    );
    let n = mx.len();
    let mut total = 0.0;
    for i in 0..n {
        let (a, b) = (mx[i], my[i]);
        let va = sxx[i] - a * a;
        let vb = syy[i] - b * b;
        let cov = sxy[i] - a * b;
        total += ((2.0 * a * b + C1) * (2.0 * cov + C2)) / ((a * a + b * b + C1) * (va + vb + C2));
    }
    Ok(total / n as f64)
}

/// Intersection over union of `{opacity > threshold}` and the nonzero
/// support of `mask`; 1 when both sets are empty.
pub fn occluder_iou(opacity: &GrayMap, mask: &GrayMap, threshold: f64) -> Result<f64> {
    if opacity.width != mask.width || opacity.height != mask.height {
        return Err(input("opacity map and mask differ in shape"));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &m) in opacity.data.iter().zip(&mask.data) {
        let p = a as f64 > threshold;
        let q = m > 0.5;
        inter += (p && q) as usize;
        union += (p || q) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Fraction of map values strictly inside `(lo, hi)`.
pub fn ambiguous_fraction(map: &GrayMap, lo: f64, hi: f64) -> f64 {
    let n = map.data.len().max(1) as f64;
    map.data
        .iter()
        .filter(|&&v| (v as f64) > lo && (v as f64) < hi)
        .count() as f64
        / n
}

/// Anisotropic total variation: sum of absolute differences between
/// horizontal and vertical neighbours, divided by the pixel count.
pub fn total_variation(map: &GrayMap) -> f64 {
    let (w, h) = (map.width, map.height);
    let mut tv = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = map.get(x, y) as f64;
            if x + 1 < w {
                tv += (map.get(x + 1, y) as f64 - v).abs();
            }
            if y + 1 < h {
                tv += (map.get(x, y + 1) as f64 - v).abs();
            }
        }
    }
    tv / (w * h).max(1) as f64
}

/// Columns `[W/2, W)`, where test-view metrics are scored.
pub fn right_half(img: &Image) -> Image {
    img.crop_columns(img.width / 2, img.width)
}

/// Columns `[0, W/2)`, used to fit a test view's appearance embedding.
pub fn left_half(img: &Image) -> Image {
    img.crop_columns(0, img.width / 2)
}

/// Attachment point for a learned perceptual metric.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn distance(&self, img: &Image, reference: &Image) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub iou: Option<f64>,
    pub perceptual: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<ImageMetrics>,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v;
        n += 1;
    }
    (n > 0).then(|| s / n as f64)
}

impl MetricReport {
    /// Scores `img` against `reference` and appends a row.
    pub fn push(
        &mut self,
        name: impl Into<String>,
        img: &Image,
        reference: &Image,
        iou: Option<f64>,
        perceptual: Option<&dyn PerceptualMetric>,
    ) -> Result<()> {
        let row = ImageMetrics {
            name: name.into(),
            psnr: psnr(img, reference)?,
            ssim: ssim(img, reference)?,
            iou,
            perceptual: perceptual.map(|p| p.distance(img, reference)).transpose()?,
        };
        self.rows.push(row);
        Ok(())
    }

    pub fn mean_psnr(&self) -> Option<f64> {
        mean_of(self.rows.iter().map(|r| r.psnr))
    }

    pub fn mean_ssim(&self) -> Option<f64> {
        mean_of(self.rows.iter().map(|r| r.ssim))
    }

    pub fn mean_iou(&self) -> Option<f64> {
        mean_of(self.rows.iter().filter_map(|r| r.iou))
    }

    pub fn mean_perceptual(&self) -> Option<f64> {
        mean_of(self.rows.iter().filter_map(|r| r.perceptual))
    }

    /// Tab-separated table: header, one row per image, then a `mean` row.
    /// Missing values are written as `-`.
    pub fn to_tsv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        let mut s = String::from("image\tpsnr\tssim\tiou\tperceptual\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.6}\t{}\t{}",
                r.name,
                r.psnr,
                r.ssim,
                opt(r.iou),
                opt(r.perceptual)
            );
        }
        let _ = writeln!(
            s,
            "mean\t{}\t{}\t{}\t{}",
            opt(self.mean_psnr()),
            opt(self.mean_ssim()),
            opt(self.mean_iou()),
            opt(self.mean_perceptual())
        );
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image {
            width: w,
            height: h,
            data: (0..w * h * 3).map(|_| rng.random::<f32>()).collect(),
        }
    }

    #[test]
    fn psnr_examples() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let half = Image::filled(4, 4, [0.5; 3]);
        let zero = Image::new(4, 4);
        assert!((psnr(&half, &zero).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((psnr(&half, &zero).unwrap() - 6.0206).abs() < 1e-4);
        assert!(matches!(
            psnr(&half, &Image::new(4, 5)),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn psnr_matches_per_pixel_loop() {
        let (a, b) = (random_image(13, 7, 2), random_image(13, 7, 3));
        let mut acc = 0.0;
        for y in 0..7 {
            for x in 0..13 {
                let (p, q) = (a.pixel(x, y), b.pixel(x, y));
                for c in 0..3 {
                    acc += (p[c] as f64 - q[c] as f64).powi(2);
                }
            }
        }
        let expected = 10.0 * (1.0 / (acc / (13.0 * 7.0 * 3.0))).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 1e-9);
    }

    /// Direct SSIM: every window evaluated from scratch with unnormalised
    /// 2D Gaussian weights.
    fn ssim_direct(a: &Image, b: &Image) -> f64 {
        let (w, h) = (a.width, a.height);
        let ga = grayscale(a);
        let gb = grayscale(b);
        let r = SSIM_WINDOW as i64 / 2;
        let mut total = 0.0;
        let mut count = 0;
        for cy in r..h as i64 - r {
            for cx in r..w as i64 - r {
                let mut ws = 0.0;
                let (mut ma, mut mb) = (0.0, 0.0);
                let mut pts = Vec::new();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wt = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
                        let i = ((cy + dy) as usize) * w + (cx + dx) as usize;
                        pts.push((wt, ga[i], gb[i]));
                        ws += wt;
                        ma += wt * ga[i];
                        mb += wt * gb[i];
                    }
                }
                ma /= ws;
                mb /= ws;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for (wt, x, y) in pts {
                    va += wt * (x - ma) * (x - ma);
                    vb += wt * (y - mb) * (y - mb);
                    cov += wt * (x - ma) * (y - mb);
                }
                va /= ws;
                vb /= ws;
                cov /= ws;
                total += ((2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4))
                    / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_direct_windows() {
        for seed in 0..3 {
            let a = random_image(24, 19, seed);
            let mut b = a.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            for v in &mut b.data {
                *v = (*v + rng.random_range(-0.2..0.2f32)).clamp(0.0, 1.0);
            }
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_direct(&a, &b);
            assert!((fast - slow).abs() < 1e-6, "{fast} vs {slow}");
        }
    }

    #[test]
    fn ssim_identity_negative_and_size() {
        let a = random_image(16, 16, 4);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let neg = Image {
            data: a.data.iter().map(|v| 1.0 - v).collect(),
            ..a.clone()
        };
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(matches!(
            ssim(&Image::new(10, 20), &Image::new(10, 20)),
            Err(Error::Input(_))
        ));
    }

    fn rect(w: usize, h: usize, x0: usize, x1: usize, y0: usize, y1: usize) -> GrayMap {
        let mut m = GrayMap::new(w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(x, y, 1.0);
            }
        }
        m
    }

    #[test]
    fn iou_examples() {
        let m = rect(10, 10, 2, 6, 2, 6);
        assert_eq!(occluder_iou(&m, &m, 0.5).unwrap(), 1.0);
        assert_eq!(occluder_iou(&GrayMap::new(10, 10), &m, 0.5).unwrap(), 0.0);
        let shifted = rect(10, 10, 4, 8, 2, 6);
        assert!((occluder_iou(&shifted, &m, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        let empty = GrayMap::new(10, 10);
        assert_eq!(occluder_iou(&empty, &empty, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn variation_and_ambiguity() {
        let m = rect(4, 4, 0, 2, 0, 4);
        assert!((total_variation(&m) - 4.0 / 16.0).abs() < 1e-15);
        let mut g = GrayMap::new(2, 2);
        g.data = vec![0.0, 0.5, 0.96, 0.2];
        assert!((ambiguous_fraction(&g, 0.05, 0.95) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn report_has_one_row_per_image_plus_mean() {
        let mut rep = MetricReport::default();
        let a = random_image(16, 16, 5);
        rep.push("a", &a, &a, None, None).unwrap();
        rep.push("b", &a, &random_image(16, 16, 6), Some(0.5), None)
            .unwrap();
        let tsv = rep.to_tsv();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("a\t99.000000"));
        assert!(lines[3].starts_with("mean\t"));
        assert_eq!(rep.mean_iou(), Some(0.5));
    }

    #[test]
    fn psnr_falls_along_noise_ladder() {
        let clean = random_image(32, 32, 7);
        let mut last = f64::INFINITY;
        for (i, amp) in [0.01, 0.02, 0.05, 0.1, 0.2].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(50 + i as u64);
            let normal = Normal::new(0.0, amp).unwrap();
            let noisy = Image {
                data: clean
                    .data
                    .iter()
                    .map(|&v| v + normal.sample(&mut rng) as f32)
                    .collect(),
                ..clean.clone()
            };
            let p = psnr(&noisy, &clean).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric(s1 in 0u64..1000, s2 in 0u64..1000) {
            let (a, b) = (random_image(12, 12, s1), random_image(12, 12, s2));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
            let s = ssim(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
            let to_map = |img: &Image| GrayMap { width: 12, height: 12, data: img.data.iter().step_by(3).copied().collect() };
            let (ma, mb) = (to_map(&a), to_map(&b));
            prop_assert_eq!(occluder_iou(&ma, &mb.threshold(0.5), 0.5).unwrap(), occluder_iou(&mb, &ma.threshold(0.5), 0.5).unwrap());
        }
    }
}
