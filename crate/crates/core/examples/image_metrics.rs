//! PSNR and SSIM of a rendered image under increasing Gaussian noise, plus
//! the per-image report written by evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sfnerf::data::synthetic::SyntheticSpec;
use sfnerf::eval::{psnr, ssim, MetricReport};

fn main() -> sfnerf::Result<()> {
    let spec = SyntheticSpec {
        quadrature: 256,
        ..SyntheticSpec::default()
    };
    let camera = spec.cameras()?[0];
    let reference = spec.render_view(&camera, spec.quadrature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut report = MetricReport::default();
    for std in [0.0f64, 0.01, 0.03, 0.1, 0.3] {
        let noise = Normal::new(0.0, std.max(1e-12)).expect("finite deviation");
        let mut noisy = reference.clone();
        for v in &mut noisy.data {
            *v = (*v + noise.sample(&mut rng) as f32).clamp(0.0, 1.0);
        }
        let label = format!("noise{std}");
        report.push(&label, &noisy, &reference, None, None)?;
        println!(
            "{label:<10} psnr {:6.2} dB  ssim {:.4}",
            psnr(&noisy, &reference)?,
            ssim(&noisy, &reference)?
        );
    }
    print!("{}", report.to_tsv());
    Ok(())
}
