//! The smoothness prior on the opacity map and the total variation it
//! controls.
//!
//! The prior sums `2^k |∂α/∂γ_k|` over the bands of the pixel encoding.
//! Since every band's derivative with respect to the pixel coordinate is
//! bounded by `π 2^k` times its Jacobian entries, the prior scaled by `π`
//! bounds the gradient magnitude of the opacity map. The example compares
//! the prior with a finite-difference gradient at random pixels.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfnerf::encoding::{positional_encode, EncodingConfig};
use sfnerf::filternet::{FilterNet, FilterNetConfig};
use sfnerf::params::ParamSet;

fn main() {
    let levels = 6;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ParamSet::<f64>::new();
    let config = FilterNetConfig {
        depth: 3,
        width: 32,
        transient_dim: 8,
        ..FilterNetConfig::default()
    };
    let feature_dim = 8;
    let encoding = EncodingConfig {
        pixel_levels: levels,
        ..EncodingConfig::default()
    };
    let filter = FilterNet::new(&mut params, config, &encoding, feature_dim, &mut rng);
    let transient: Vec<f64> = (0..8).map(|_| rng.random_range(-0.1..0.1)).collect();
    let feature: Vec<f64> = (0..feature_dim)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    let temperature = 0.5;
    let alpha_at = |p: [f64; 2]| {
        filter
            .probe(
                &params,
                &positional_encode(&p, levels),
                &transient,
                &feature,
                0.0,
                temperature,
            )
            .0
    };

    let h = 1e-6;
    let mut worst_ratio = 0.0f64;
    println!("{:>14} {:>12} {:>12}", "pixel", "|grad a|_1", "pi * prior");
    for i in 0..12 {
        let p = [rng.random::<f64>(), rng.random::<f64>()];
        let (_, prior, _) = filter.probe(
            &params,
            &positional_encode(&p, levels),
            &transient,
            &feature,
            0.0,
            temperature,
        );
        let gx = (alpha_at([p[0] + h, p[1]]) - alpha_at([p[0] - h, p[1]])) / (2.0 * h);
        let gy = (alpha_at([p[0], p[1] + h]) - alpha_at([p[0], p[1] - h])) / (2.0 * h);
        let grad = gx.abs() + gy.abs();
        let bound = std::f64::consts::PI * prior;
        worst_ratio = worst_ratio.max(grad / bound);
        if i < 6 {
            println!("({:.3}, {:.3}) {grad:>12.5} {bound:>12.5}", p[0], p[1]);
        }
    }
    println!("largest gradient / bound ratio: {worst_ratio:.4} (at most 1)");
}
