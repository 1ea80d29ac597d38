//! Renders the default synthetic scene, injects occluders into the training
//! views and writes the result as a dataset directory.
//!
//! `cargo run --release --example synthetic_scene -- [OUT_DIR] [SEED]`

use std::path::PathBuf;

use sfnerf::data::synthetic::{generate_synthetic_scene, SyntheticSpec};

fn main() -> sfnerf::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sfnerf_synthetic"));
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);

    // Coarser quadrature keeps the example quick; the default is 4096.
    let spec = SyntheticSpec {
        quadrature: 512,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_scene(&spec, seed)?;
    let masks = ds
        .masks
        .as_ref()
        .expect("synthetic scenes carry occluder masks");
    for &i in &ds.train {
        let mask = &masks[i];
        let coverage = mask.count_nonzero() as f64 / (mask.width * mask.height) as f64;
        println!("{}  occluded {:5.1}%", ds.names[i], 100.0 * coverage);
    }
    println!(
        "{} training and {} held-out views",
        ds.train.len(),
        ds.test.len()
    );
    ds.export(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
