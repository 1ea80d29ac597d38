//! Pinhole cameras, ray generation and conical-frustum sampling along rays.
//!
//! Camera frame convention: `+x` right, `+y` up, the camera looks down `-z`;
//! image rows grow downwards. Poses map camera coordinates to world
//! coordinates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{input, Result};

pub type Vec3 = [f64; 3];

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

/// World-from-camera rigid transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    /// Row-major rotation; columns are the camera axes in world coordinates.
    pub rotation: [[f64; 3]; 3],
    /// Camera center in world coordinates.
    pub translation: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Camera at `eye` looking at `target`.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Self {
        let back = normalize(sub(eye, target));
        let right = normalize(cross(up, back));
        let true_up = cross(back, right);
        Self {
            rotation: [
                [right[0], true_up[0], back[0]],
                [right[1], true_up[1], back[1]],
                [right[2], true_up[2], back[2]],
            ],
            translation: eye,
        }
    }

    pub fn rotate(&self, v: Vec3) -> Vec3 {
        let r = &self.rotation;
        [dot(r[0], v), dot(r[1], v), dot(r[2], v)]
    }

    /// `max |RᵀR − I|` entry.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        let mut worst: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let col_dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((col_dot - target).abs());
            }
        }
        worst
    }

    /// Row-major 3×4 `[R | t]`.
    pub fn to_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1],
            r[2][2], t[2],
        ]
    }

    pub fn from_3x4(m: &[f64; 12]) -> Self {
        Self {
            rotation: [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]],
            translation: [m[3], m[7], m[11]],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

/// Pixel index: `x` is the column, `y` the row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Pixel {
    pub x: usize,
    pub y: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { x, y }
    }
}

impl Camera {
    pub fn new(
        intrinsics: Intrinsics,
        pose: Pose,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self {
            intrinsics,
            pose,
            width,
            height,
            near,
            far,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let k = &self.intrinsics;
        if !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(input(format!(
                "focal lengths must be positive, got ({}, {})",
                k.fx, k.fy
            )));
        }
        if self.pose.orthonormality_error() >= 1e-6 {
            return Err(input("camera rotation is not orthonormal"));
        }
        if !(self.near < self.far) || self.near < 0.0 {
            return Err(input(format!(
                "need 0 <= near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(input("image dimensions must be at least 1x1"));
        }
        Ok(())
    }

    /// Camera scaled for an image downsampled by `factor`.
    pub fn downsampled(&self, factor: usize) -> Camera {
        let s = 1.0 / factor as f64;
        Camera {
            intrinsics: Intrinsics {
                fx: self.intrinsics.fx * s,
                fy: self.intrinsics.fy * s,
                cx: self.intrinsics.cx * s,
                cy: self.intrinsics.cy * s,
            },
            width: self.width / factor,
            height: self.height / factor,
            ..*self
        }
    }

    /// Unnormalized world-space direction through a continuous image point
    /// (pixel centers sit at half-integers).
    fn direction_through(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        let cam = [(u - k.cx) / k.fx, -(v - k.cy) / k.fy, -1.0];
        self.pose.rotate(cam)
    }

    pub fn all_pixels(&self) -> Vec<Pixel> {
        (0..self.height)
            .flat_map(|y| (0..self.width).map(move |x| Pixel::new(x, y)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    /// Unit length.
    pub direction: Vec3,
    /// Pixel center normalized to `[0, 1]²` as `(x, y)`.
    pub pixel: [f64; 2],
    pub image: usize,
    /// Cone radius at unit distance along `direction`.
    pub radius: f64,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        add(self.origin, scale(self.direction, t))
    }
}

/// One ray per pixel, through the pixel center.
pub fn generate_rays(camera: &Camera, image: usize, pixels: &[Pixel]) -> Result<Vec<Ray>> {
    // Variance-matching radius for a square pixel footprint.
    let radius_scale = 2.0 / 12f64.sqrt();
    pixels
        .iter()
        .map(|p| {
            if p.x >= camera.width || p.y >= camera.height {
                return Err(input(format!(
                    "pixel ({}, {}) outside {}x{} image",
                    p.x, p.y, camera.width, camera.height
                )));
            }
            let (u, v) = (p.x as f64 + 0.5, p.y as f64 + 0.5);
            let d = normalize(camera.direction_through(u, v));
            let dn = normalize(camera.direction_through(u + 1.0, v));
            Ok(Ray {
                origin: camera.pose.translation,
                direction: d,
                pixel: [u / camera.width as f64, v / camera.height as f64],
                image,
                radius: norm(sub(dn, d)) * radius_scale,
                near: camera.near,
                far: camera.far,
            })
        })
        .collect()
}

/// Interval boundaries along a ray with the Gaussian approximation of each
/// conical frustum between consecutive boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct FrustumSampleSet {
    /// `K + 1` strictly increasing distances.
    pub t: Vec<f64>,
    pub means: Vec<Vec3>,
    pub covariances: Vec<Vec3>,
}

impl FrustumSampleSet {
    pub fn from_boundaries(ray: &Ray, t: Vec<f64>) -> Result<Self> {
        if t.len() < 2 {
            return Err(input("a sample set needs at least two boundaries"));
        }
        if let Some(w) = t.windows(2).find(|w| !(w[1] > w[0])) {
            return Err(input(format!(
                "sample boundaries must increase strictly ({} then {})",
                w[0], w[1]
            )));
        }
        let (means, covariances) = t
            .windows(2)
            .map(|w| conical_frustum_gaussian(ray, w[0], w[1]))
            .unzip();
        Ok(Self {
            t,
            means,
            covariances,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.t.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn midpoints(&self) -> Vec<f64> {
        self.t.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
    }
}

/// Mean and diagonal covariance of the cone section between `t0` and `t1`.
pub fn conical_frustum_gaussian(ray: &Ray, t0: f64, t1: f64) -> (Vec3, Vec3) {
    let mu = 0.5 * (t0 + t1);
    let hw = 0.5 * (t1 - t0);
    let (mu2, hw2) = (mu * mu, hw * hw);
    let denom = 3.0 * mu2 + hw2;
    let t_mean = mu + 2.0 * mu * hw2 / denom;
    let t_var = hw2 / 3.0 - (4.0 / 15.0) * hw2 * hw2 * (12.0 * mu2 - hw2) / (denom * denom);
    let r_var = ray.radius
        * ray.radius
        * (mu2 / 4.0 + (5.0 / 12.0) * hw2 - (4.0 / 15.0) * hw2 * hw2 / denom);
    let d = ray.direction;
    let mean = ray.at(t_mean);
    let mut cov = [0.0; 3];
    for i in 0..3 {
        let dd = d[i] * d[i];
        cov[i] = (t_var * dd + r_var * (1.0 - dd)).max(0.0);
    }
    (mean, cov)
}

/// `k` intervals covering `[near, far]`.
///
/// Without jitter the boundaries are uniform. With jitter every interior
/// boundary is drawn uniformly inside its own stratum
/// `[near + (i - ½)Δ, near + (i + ½)Δ)`; the end points stay at `near` and `far`.
pub fn stratified_sample(
    ray: &Ray,
    k: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<FrustumSampleSet> {
    if k == 0 {
        return Err(input("stratified sampling needs at least one interval"));
    }
    if !(ray.near < ray.far) {
        return Err(input("ray near bound must be below far bound"));
    }
    let span = ray.far - ray.near;
    let step = span / k as f64;
    let mut t = Vec::with_capacity(k + 1);
    t.push(ray.near);
    for i in 1..k {
        let offset = if jitter {
            rng.random::<f64>() - 0.5
        } else {
            0.0
        };
        t.push(ray.near + (i as f64 + offset) * step);
    }
    t.push(ray.far);
    FrustumSampleSet::from_boundaries(ray, t)
}

/// Inverse-CDF resampling of `k_fine` intervals from the piecewise-constant
/// histogram that `weights` define over the intervals of `coarse`.
///
/// Draws `k_fine + 1` boundaries at stratified CDF levels `(j + ξ)/(k_fine + 1)`
/// with `ξ = ½` when `jitter` is off. All-zero weights fall back to a uniform
/// histogram.
pub fn hierarchical_resample(
    ray: &Ray,
    coarse: &FrustumSampleSet,
    weights: &[f64],
    k_fine: usize,
    jitter: bool,
    rng: &mut impl Rng,
) -> Result<FrustumSampleSet> {
    if k_fine == 0 {
        return Err(input("resampling needs at least one interval"));
    }
    if weights.len() != coarse.len() {
        return Err(input(format!(
            "{} weights for {} intervals",
            weights.len(),
            coarse.len()
        )));
    }
    if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(input("resampling weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    let k = weights.len();
    let mut cdf = Vec::with_capacity(k + 1);
    cdf.push(0.0);
    let mut acc = 0.0;
    for &w in weights {
        acc += if total > 0.0 {
            w / total
        } else {
            1.0 / k as f64
        };
        cdf.push(acc);
    }
    cdf[k] = 1.0;

    let n = k_fine + 1;
    let mut t = Vec::with_capacity(n);
    let mut bin = 0;
    for j in 0..n {
        let xi = if jitter { rng.random::<f64>() } else { 0.5 };
        let u = (j as f64 + xi) / n as f64;
        while bin + 1 < k && cdf[bin + 1] <= u {
            bin += 1;
        }
        let (c0, c1) = (cdf[bin], cdf[bin + 1]);
        let frac = if c1 > c0 {
            ((u - c0) / (c1 - c0)).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (t0, t1) = (coarse.t[bin], coarse.t[bin + 1]);
        t.push(t0 + frac * (t1 - t0));
    }
    for i in 1..n {
        if t[i] <= t[i - 1] {
            t[i] = next_up(t[i - 1]);
        }
    }
    FrustumSampleSet::from_boundaries(ray, t)
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    if x > 0.0 {
        f64::from_bits(bits + 1)
    } else {
        f64::from_bits(bits - 1)
    }
}

/// Max-then-average smoothing of coarse weights plus a constant floor, so
/// resampling keeps some mass around every visible surface.
pub fn smooth_resample_weights(weights: &[f64], padding: f64) -> Vec<f64> {
    let k = weights.len();
    if k == 0 {
        return Vec::new();
    }
    let at = |i: isize| weights[i.clamp(0, k as isize - 1) as usize];
    let maxes: Vec<f64> = (0..=k as isize).map(|i| at(i - 1).max(at(i))).collect();
    (0..k)
        .map(|i| 0.5 * (maxes[i] + maxes[i + 1]) + padding)
        .collect()
}
