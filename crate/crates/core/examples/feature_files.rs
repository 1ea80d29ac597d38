//! Precomputed feature maps: writes one `.feat` file per training image
//! from a fixed backbone, reloads the dataset with the file-backed feature
//! source and checks that both routes yield the same per-pixel features.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sfnerf::data::synthetic::{generate_synthetic_scene, SyntheticSpec};
use sfnerf::data::{load_photocollection, LoadOptions};
use sfnerf::filternet::{FeatureConfig, FeatureNet, FeatureSource};
use sfnerf::params::ParamSet;

fn main() -> sfnerf::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| sfnerf::Error::io(std::env::temp_dir(), e))?;
    let spec = SyntheticSpec {
        width: 32,
        height: 32,
        train_images: 4,
        test_images: 1,
        quadrature: 256,
        ..SyntheticSpec::default()
    };
    generate_synthetic_scene(&spec, 1)?.export(dir.path())?;
    let ds = load_photocollection(
        dir.path(),
        &LoadOptions {
            downsample: 1,
            ..LoadOptions::default()
        },
    )?;

    // A randomly initialized reference encoder plus adapter plays the part of
    // a pretrained backbone here.
    let backbone = FeatureConfig {
        backbone_dim: 16,
        adapter_width: 32,
        feature_dim: 24,
        ..FeatureConfig::default()
    };
    let mut params = ParamSet::<f64>::new();
    let net = FeatureNet::new(&mut params, backbone, &mut ChaCha8Rng::seed_from_u64(5));
    let inputs = ds.feature_inputs(&backbone)?;
    let feat_dir = dir.path().join("features");
    std::fs::create_dir_all(&feat_dir).map_err(|e| sfnerf::Error::io(&feat_dir, e))?;
    let mut maps = Vec::new();
    for (pos, &i) in ds.train.iter().enumerate() {
        let img = &ds.images[i];
        let map = net.extract_map(&params, &inputs, pos, img.width, img.height);
        map.write_feat(&feat_dir.join(format!("{}.feat", ds.names[i])))?;
        maps.push(map);
    }

    let reloaded = load_photocollection(
        dir.path(),
        &LoadOptions {
            downsample: 1,
            ..LoadOptions::default()
        },
    )?;
    let files = FeatureConfig {
        source: FeatureSource::PrecomputedFiles,
        backbone_dim: backbone.feature_dim,
        ..FeatureConfig::default()
    };
    let from_files = reloaded.feature_inputs(&files)?;
    let probe: Vec<_> = (0..ds.train.len()).map(|pos| (pos, 3, 17)).collect();
    let rows = from_files.rows::<f64>(&probe);
    let mut worst = 0.0f64;
    for (r, &(pos, x, y)) in probe.iter().enumerate() {
        for (a, b) in rows.row(r).iter().zip(maps[pos].at(x, y)) {
            worst = worst.max((a - *b as f64).abs());
        }
    }
    println!(
        "{} feature files of width {}; max round-trip difference {worst:.2e}",
        maps.len(),
        from_files.width()
    );
    Ok(())
}
