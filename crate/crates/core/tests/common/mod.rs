#![allow(dead_code)]

use sfnerf::data::synthetic::{generate_synthetic_scene, SyntheticSpec};
use sfnerf::data::SceneDataset;
use sfnerf::trainer::{Precision, TrainConfig};

/// A network small enough for debug-speed unit runs.
pub fn tiny_config() -> TrainConfig {
    let mut c = TrainConfig {
        steps: 20,
        coarse_samples: 8,
        fine_samples: 8,
        rays_per_batch: 32,
        precision: Precision::F64,
        learning_rate: 5e-3,
        final_learning_rate: 1e-3,
        ..Default::default()
    };
    c.encoding.position_levels = 3;
    c.encoding.direction_levels = 2;
    c.encoding.pixel_levels = 3;
    c.field.trunk_depth = 2;
    c.field.trunk_width = 16;
    c.field.color_width = 8;
    c.field.appearance_dim = 4;
    c.filter.depth = 2;
    c.filter.width = 16;
    c.filter.transient_dim = 4;
    c.features.backbone_dim = 8;
    c.features.adapter_width = 8;
    c.features.feature_dim = 8;
    c.fit.steps = 40;
    c.fit.rays = 64;
    c
}

pub fn tiny_spec() -> SyntheticSpec {
    SyntheticSpec {
        width: 16,
        height: 16,
        train_images: 4,
        test_images: 2,
        quadrature: 128,
        ..Default::default()
    }
}

pub fn tiny_scene() -> SceneDataset {
    generate_synthetic_scene(&tiny_spec(), 3).unwrap()
}

/// A run configuration file for `tiny_config` on the dataset in `data`.
pub fn tiny_run_toml(data: &std::path::Path) -> String {
    sfnerf::cli::RunConfig {
        data: sfnerf::cli::DataConfig {
            path: data.to_path_buf(),
            downsample: 1,
            ..Default::default()
        },
        train: tiny_config(),
    }
    .to_toml()
}
