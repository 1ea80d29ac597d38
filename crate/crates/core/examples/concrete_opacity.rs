//! Binary Concrete opacity: Monte Carlo statistics of the relaxed sample.
//!
//! For location `α̃` the probability that a sample exceeds ½ is
//! `α̃ / (1 + α̃)` at every temperature, while lower temperatures push the
//! samples towards 0 and 1.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfnerf::filternet::{eval_transient_opacity, sample_transient_opacity};

fn main() -> sfnerf::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 200_000;
    println!(
        "{:>6} {:>5}  {:>9} {:>9}  {:>9} {:>9}",
        "loc", "temp", "P(a>.5)", "expected", "binary", "eval"
    );
    for location in [0.1, 1.0, 4.0] {
        for temperature in [1.0, 0.5, 0.1] {
            let mut above = 0usize;
            let mut near_binary = 0usize;
            for _ in 0..n {
                let a = sample_transient_opacity(location, temperature, &mut rng)?;
                above += (a > 0.5) as usize;
                near_binary += !(0.05..=0.95).contains(&a) as usize;
            }
            println!(
                "{location:>6} {temperature:>5}  {:>9.4} {:>9.4}  {:>9.4} {:>9.4}",
                above as f64 / n as f64,
                location / (1.0 + location),
                near_binary as f64 / n as f64,
                eval_transient_opacity(location, temperature)?,
            );
        }
    }
    Ok(())
}
