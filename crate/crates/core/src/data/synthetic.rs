//! Ground-truth synthetic scenes with injected 2D occluders.
//!
//! The static scene is an analytic radiance field: each primitive
//! contributes a soft density `σ_max · sigmoid(−sdf / w)` and a Lambertian
//! color shaded from the primitive's surface normal. Views on a ring around
//! the origin are rendered by dense quadrature, then training views get a
//! per-image color gain and hard-edged colored occluders composited in image
//! space. Test views stay clean.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SceneDataset;
use crate::error::{Error, Result};
use crate::geometry::{
    dot, generate_rays, normalize, sub, Camera, Intrinsics, Pixel, Pose, Ray, Vec3,
};
use crate::raster::{GrayMap, Image};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Shape {
    Sphere { center: Vec3, radius: f64 },
    Box { center: Vec3, half_extent: Vec3 },
}

impl Shape {
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Sphere { center, radius } => {
                let d = sub(p, center);
                dot(d, d).sqrt() - radius
            }
            Shape::Box {
                center,
                half_extent,
            } => {
                let q: Vec3 = std::array::from_fn(|i| (p[i] - center[i]).abs() - half_extent[i]);
                let outside: Vec3 = q.map(|v| v.max(0.0));
                dot(outside, outside).sqrt() + q[0].max(q[1]).max(q[2]).min(0.0)
            }
        }
    }

    fn normal(&self, p: Vec3) -> Vec3 {
        let h = 1e-5;
        let g: Vec3 = std::array::from_fn(|i| {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            self.sdf(a) - self.sdf(b)
        });
        let n = dot(g, g).sqrt();
        if n > 0.0 {
            g.map(|v| v / n)
        } else {
            [0.0, 0.0, 1.0]
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: [f64; 3],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OccluderSpec {
    pub min_count: usize,
    pub max_count: usize,
    /// Side (or diameter) range as a fraction of the image width.
    pub min_size: f64,
    pub max_size: f64,
    /// Occluder colors are random hues with at least this saturation and
    /// brightness.
    pub min_saturation: f64,
    pub min_value: f64,
}

impl Default for OccluderSpec {
    fn default() -> Self {
        Self {
            min_count: 3,
            max_count: 5,
            min_size: 0.12,
            max_size: 0.3,
            min_saturation: 0.6,
            min_value: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub width: usize,
    pub height: usize,
    pub train_images: usize,
    pub test_images: usize,
    /// Horizontal field of view in degrees.
    pub fov_degrees: f64,
    pub ring_radius: f64,
    /// Camera elevation oscillates between these angles (degrees) around
    /// the ring.
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub near: f64,
    pub far: f64,
    pub primitives: Vec<Primitive>,
    pub density_scale: f64,
    /// Width of the density falloff at primitive surfaces.
    pub softness: f64,
    pub light_direction: Vec3,
    pub ambient: f64,
    pub occluders: OccluderSpec,
    /// Per-channel gains are drawn from `[1 − jitter, 1 + jitter]`.
    pub jitter: f64,
    pub quadrature: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            train_images: 15,
            test_images: 4,
            fov_degrees: 40.0,
            ring_radius: 2.0,
            min_elevation: 15.0,
            max_elevation: 40.0,
            near: 1.0,
            far: 3.0,
            primitives: vec![
                Primitive {
                    shape: Shape::Box {
                        center: [0.0, 0.0, -0.45],
                        half_extent: [0.6, 0.6, 0.05],
                    },
                    albedo: [0.75, 0.72, 0.65],
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [0.0, 0.0, -0.05],
                        radius: 0.32,
                    },
                    albedo: [0.85, 0.3, 0.2],
                },
                Primitive {
                    shape: Shape::Box {
                        center: [0.32, -0.28, -0.22],
                        half_extent: [0.15, 0.15, 0.18],
                    },
                    albedo: [0.25, 0.7, 0.3],
                },
                Primitive {
                    shape: Shape::Sphere {
                        center: [-0.3, 0.3, -0.2],
                        radius: 0.2,
                    },
                    albedo: [0.2, 0.35, 0.85],
                },
            ],
            density_scale: 40.0,
            softness: 0.02,
            light_direction: [0.4, 0.3, 0.85],
            ambient: 0.35,
            occluders: OccluderSpec::default(),
            jitter: 0.15,
            quadrature: 4096,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.height == 0 {
            return bad("synthetic images need a positive size");
        }
        if self.train_images == 0 {
            return bad("synthetic scene needs at least one training image");
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return bad("synthetic near/far must satisfy 0 < near < far");
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return bad("field of view must be in (0, 180) degrees");
        }
        if self.occluders.min_count > self.occluders.max_count
            || !(0.0 < self.occluders.min_size
                && self.occluders.min_size <= self.occluders.max_size)
        {
            return bad("occluder count and size ranges must be ordered and positive");
        }
        if !(0.0..1.0).contains(&self.jitter) {
            return bad("photometric jitter must be in [0, 1)");
        }
        if self.quadrature == 0 || self.softness <= 0.0 || self.density_scale < 0.0 {
            return bad("quadrature, softness and density scale must be positive");
        }
        Ok(())
    }

    /// Density and color of the analytic field at `p`.
    pub fn field(&self, p: Vec3) -> (f64, [f64; 3]) {
        let mut total = 0.0;
        let mut weighted = [0.0; 3];
        let light = normalize(self.light_direction);
        for prim in &self.primitives {
            let z = -prim.shape.sdf(p) / self.softness;
            if z < -40.0 {
                continue;
            }
            let d = self.density_scale / (1.0 + (-z).exp());
            let shade =
                self.ambient + (1.0 - self.ambient) * dot(prim.shape.normal(p), light).max(0.0);
            for c in 0..3 {
                weighted[c] += d * prim.albedo[c] * shade;
            }
            total += d;
        }
        if total > 0.0 {
            (total, weighted.map(|w| w / total))
        } else {
            (0.0, [0.0; 3])
        }
    }

    /// Quadrature of the analytic field along one ray with `k` uniform
    /// intervals, evaluated at interval midpoints.
    pub fn render_ray(&self, ray: &Ray, k: usize) -> [f64; 3] {
        let step = (ray.far - ray.near) / k as f64;
        let mut acc = 0.0f64;
        let mut color = [0.0; 3];
        for i in 0..k {
            let t = ray.near + (i as f64 + 0.5) * step;
            let (sigma, c) = self.field(ray.at(t));
            if sigma > 0.0 {
                let w = (-acc).exp() * (1.0 - (-sigma * step).exp());
                for j in 0..3 {
                    color[j] += w * c[j];
                }
                acc += sigma * step;
            }
            if acc > 40.0 {
                break;
            }
        }
        color
    }

    pub fn cameras(&self) -> Result<Vec<Camera>> {
        let n = self.train_images + self.test_images;
        let f = 0.5 * self.width as f64 / (0.5 * self.fov_degrees.to_radians()).tan();
        let intr = Intrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * self.width as f64,
            cy: 0.5 * self.height as f64,
        };
        (0..n)
            .map(|i| {
                let theta = std::f64::consts::TAU * i as f64 / n as f64;
                let mix = 0.5 + 0.5 * (3.0 * theta).sin();
                let elev = (self.min_elevation + mix * (self.max_elevation - self.min_elevation))
                    .to_radians();
                let r = self.ring_radius;
                let eye = [
                    r * elev.cos() * theta.cos(),
                    r * elev.cos() * theta.sin(),
                    r * elev.sin(),
                ];
                let pose = Pose::look_at(eye, [0.0; 3], [0.0, 0.0, 1.0]);
                Camera::new(intr, pose, self.width, self.height, self.near, self.far)
            })
            .collect()
    }

    /// Test views spread evenly around the ring.
    pub fn test_ids(&self) -> Vec<usize> {
        let n = self.train_images + self.test_images;
        (0..self.test_images)
            .map(|j| ((2 * j + 1) * n) / (2 * self.test_images))
            .collect()
    }

    pub fn render_view(&self, camera: &Camera, k: usize) -> Result<Image> {
        let mut img = Image::new(camera.width, camera.height);
        let rays = generate_rays(camera, 0, &camera.all_pixels())?;
        for (ray, px) in rays.iter().zip(camera.all_pixels()) {
            let c = self.render_ray(ray, k);
            img.set_pixel(px.x, px.y, c.map(|v| v as f32));
        }
        Ok(img)
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    let rgb = match (i as i64).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    };
    rgb.map(|x| x as f32)
}

/// Paints random occluders into `img` and returns their mask.
fn add_occluders(img: &mut Image, spec: &OccluderSpec, rng: &mut impl Rng) -> GrayMap {
    let (w, h) = (img.width, img.height);
    let mut mask = GrayMap::new(w, h);
    let count = rng.random_range(spec.min_count..=spec.max_count);
    for _ in 0..count {
        let sw = rng.random_range(spec.min_size..=spec.max_size) * w as f64;
        let sh = rng.random_range(spec.min_size..=spec.max_size) * w as f64;
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let ellipse = rng.random_bool(0.5);
        let color = hsv_to_rgb(
            rng.random(),
            rng.random_range(spec.min_saturation..=1.0),
            rng.random_range(spec.min_value..=1.0),
        );
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / (0.5 * sw);
                let dy = (y as f64 + 0.5 - cy) / (0.5 * sh);
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    img.set_pixel(x, y, color);
                    mask.set(x, y, 1.0);
                }
            }
        }
    }
    mask
}

/// Renders a full dataset: images, cameras, masks, clean references and a
/// train/test split. Images are quantized to 8 bits so they survive a PNG
/// round trip unchanged.
pub fn generate_synthetic_scene(spec: &SyntheticSpec, seed: u64) -> Result<SceneDataset> {
    spec.validate()?;
    let cameras = spec.cameras()?;
    let test = spec.test_ids();
    let n = cameras.len();
    let train: Vec<usize> = (0..n).filter(|i| !test.contains(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    let mut clean = Vec::with_capacity(n);
    for (i, cam) in cameras.iter().enumerate() {
        let mut reference = spec.render_view(cam, spec.quadrature)?;
        reference.quantize_8bit();
        let mut img = reference.clone();
        let mut mask = GrayMap::new(cam.width, cam.height);
        if !test.contains(&i) {
            let gain: [f32; 3] = std::array::from_fn(|_| {
                rng.random_range(1.0 - spec.jitter..=1.0 + spec.jitter) as f32
            });
            for px in img.data.chunks_exact_mut(3) {
                for c in 0..3 {
                    px[c] = (px[c] * gain[c]).clamp(0.0, 1.0);
                }
            }
            mask = add_occluders(&mut img, &spec.occluders, &mut rng);
            let coverage = mask.count_nonzero() as f64 / (cam.width * cam.height) as f64;
            if coverage > 0.9 {
                return Err(Error::Config(format!(
                    "occluders cover {:.0}% of view {i}; at most 90% leaves the scene learnable",
                    100.0 * coverage
                )));
            }
            img.quantize_8bit();
        }
        images.push(img);
        masks.push(mask);
        clean.push(reference);
    }
    let ds = SceneDataset {
        names: (0..n).map(|i| format!("view{i:03}")).collect(),
        images,
        cameras,
        train,
        test,
        masks: Some(masks),
        clean: Some(clean),
        feature_dir: None,
    };
    ds.validate()?;
    Ok(ds)
}

/// Renders a single pixel of the clean scene with `k` quadrature
/// intervals; used to check quadrature convergence.
pub fn render_pixel(
    spec: &SyntheticSpec,
    camera: &Camera,
    pixel: Pixel,
    k: usize,
) -> Result<[f64; 3]> {
    let ray = generate_rays(camera, 0, &[pixel])?[0];
    Ok(spec.render_ray(&ray, k))
}
