//! Trains on a synthetic scene with injected occluders and writes the
//! decomposition of a few training views: static render, transient color,
//! opacity, uncertainty and the blended reconstruction, next to the
//! ground-truth occluder mask.
//!
//! `cargo run --release --example train_decompose -- [STEPS] [OUT_DIR]`
//!
//! A few hundred steps show the static scene emerging; the compact
//! preset's full 2000 steps take several minutes on one core.

use std::path::PathBuf;
use std::time::Instant;

use sfnerf::data::synthetic::{generate_synthetic_scene, SyntheticSpec};
use sfnerf::eval::occluder_iou;
use sfnerf::trainer::{decompose, TrainConfig, Trainer};

fn main() -> sfnerf::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(600);
    let out = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("sfnerf_decompose"));
    std::fs::create_dir_all(&out).map_err(|e| sfnerf::Error::io(&out, e))?;

    let spec = SyntheticSpec {
        quadrature: 1024,
        ..SyntheticSpec::default()
    };
    let ds = generate_synthetic_scene(&spec, 1)?;
    let cfg = TrainConfig {
        steps,
        filter_warmup: steps / 4,
        ..TrainConfig::compact()
    };
    let mut trainer = Trainer::<f32>::new(cfg.clone(), &ds)?;
    let start = Instant::now();
    trainer.run(|_, r| {
        if r.step % 100 == 0 {
            println!(
                "step {:5}  loss {:10.3}  coarse {:8.4}  {:.0}s",
                r.step,
                r.losses.total,
                r.losses.coarse,
                start.elapsed().as_secs_f64()
            );
        }
        Ok(())
    })?;

    let masks = ds.masks.as_ref().expect("synthetic masks");
    let temperature = cfg.temperature_at(cfg.steps);
    for pos in 0..3 {
        let i = ds.train[pos];
        let d = decompose(
            &trainer.model,
            &cfg,
            &ds,
            trainer.feature_inputs(),
            pos,
            temperature,
        )?;
        let name = &ds.names[i];
        d.static_render
            .write_png(&out.join(format!("{name}_static.png")))?;
        d.transient_color
            .write_png(&out.join(format!("{name}_transient.png")))?;
        d.opacity
            .write_png(&out.join(format!("{name}_opacity.png")))?;
        d.blended
            .write_png(&out.join(format!("{name}_blended.png")))?;
        ds.images[i].write_png(&out.join(format!("{name}_observed.png")))?;
        masks[i].write_png(&out.join(format!("{name}_mask.png")))?;
        println!(
            "{name}: occluder IoU {:.3}",
            occluder_iou(&d.opacity, &masks[i], 0.5)?
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
