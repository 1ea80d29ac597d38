//! Quadrature of the volume rendering integral against a closed form.
//!
//! Along a ray of unit length with constant density `σ` and color
//! `c(t) = (t, 0, 1 − t)`, the rendered red channel is
//! `∫₀¹ σ e^{−σt} t dt = (1 − e^{−σ}(1 + σ)) / σ`. The example prints the
//! quadrature error as the number of intervals grows.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfnerf::geometry::{stratified_sample, Ray};
use sfnerf::static_field::{render_ray, RadianceSample};

fn main() -> sfnerf::Result<()> {
    let sigma = 2.0;
    let ray = Ray {
        origin: [0.0; 3],
        direction: [0.0, 0.0, 1.0],
        pixel: [0.5, 0.5],
        image: 0,
        radius: 1e-3,
        near: 0.0,
        far: 1.0,
    };
    let total = 1.0 - (-sigma as f64).exp();
    let red = (1.0 - (-sigma as f64).exp() * (1.0 + sigma)) / sigma;
    let exact = [red, 0.0, total - red];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    println!("{:>7}  {:>12}  {:>12}", "K", "max error", "opacity");
    for k in [4, 16, 64, 256, 1024, 4096] {
        let samples = stratified_sample(&ray, k, false, &mut rng)?;
        let radiance: Vec<_> = samples
            .midpoints()
            .into_iter()
            .map(|t| RadianceSample {
                density: sigma,
                color: [t, 0.0, 1.0 - t],
                feature: Vec::new(),
            })
            .collect();
        let r = render_ray(&ray, &samples, &radiance)?;
        let err = (0..3)
            .map(|c| (r.color[c] - exact[c]).abs())
            .fold(0.0, f64::max);
        println!("{k:>7}  {err:>12.3e}  {:>12.8}", r.opacity);
    }
    println!("closed form: {exact:.8?}");
    Ok(())
}
