//! Joint optimization of the static field, FilterNet, feature adapter and
//! per-image embedding tables.
//!
//! Every step draws its randomness from ChaCha8 streams keyed by
//! `(seed, step, purpose)`, so a run is reproducible bit for bit and a
//! resumed run continues exactly where the checkpoint left off.

mod adam;
mod checkpoint;
mod config;
mod render;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfnerf_tape::{Matrix, Real, Tape, Var};

pub use adam::{Adam, Moments};
pub use checkpoint::{Checkpoint, ParamBlock, CHECKPOINT_VERSION};
pub use config::{AdamConfig, FitConfig, Precision, TrainConfig};
pub use render::{
    decompose, decomposition_ious, evaluate_test_views, fit_test_embedding, left_half_error,
    render_rays, render_view, static_passes, static_passes_with, Decomposition, Evaluation,
    FitResult, StaticPasses,
};

use crate::data::SceneDataset;
use crate::error::{Error, Result};
use crate::filternet::{
    blend_vars, concrete_noise, pixel_features, FeatureInputs, FeatureNet, FeatureSource,
    FilterNet, OpacityHead,
};
use crate::geometry::{generate_rays, FrustumSampleSet, Pixel, Ray};
use crate::losses::{
    coarse_loss_vars, residual_vars, sparsity_loss_vars, total_loss_vars, transient_loss_vars,
    LossBreakdown, LossVars,
};
use crate::params::{embedding_table, ParamId, ParamSet};
use crate::static_field::StaticField;

/// Random stream purposes within one step.
pub const STREAM_BATCH: u64 = 0;
pub const STREAM_JITTER: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
const STREAMS_PER_STEP: u64 = 4;
const STREAM_INIT: u64 = u64::MAX;

/// Generator for one `(seed, step, purpose)` triple.
pub fn step_rng(seed: u64, step: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step.wrapping_mul(STREAMS_PER_STEP).wrapping_add(purpose));
    rng
}

/// Generator for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_INIT);
    rng
}

/// Constant transient loss of a pixel with zero opacity and `β = 1/√2`,
/// minus the squared residual: `ln(1/√2)`.
pub const DISABLED_TRANSIENT_OFFSET: f64 = -0.5 * std::f64::consts::LN_2;

/// All trainable state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real> {
    pub params: ParamSet<T>,
    pub field: StaticField,
    pub features: FeatureNet,
    pub filter: FilterNet,
    /// `N × n_a`, row `j` belongs to the `j`-th training image.
    pub appearance: ParamId,
    /// `N × n_τ`, same row order.
    pub transient: ParamId,
    pub train_images: usize,
}

impl<T: Real> Model<T> {
    pub fn new(config: &TrainConfig, train_images: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(config.seed);
        let mut params = ParamSet::new();
        let field = StaticField::new(&mut params, config.field, config.encoding, &mut rng);
        let features = FeatureNet::new(&mut params, config.features, &mut rng);
        let filter = FilterNet::new(
            &mut params,
            config.filter,
            &config.encoding,
            config.features.feature_dim,
            &mut rng,
        );
        let n = train_images;
        let scale = config.embedding_scale;
        let appearance = embedding_table(
            &mut params,
            "embed.appearance",
            n,
            config.field.appearance_dim,
            scale,
            &mut rng,
        );
        let transient = embedding_table(
            &mut params,
            "embed.transient",
            n,
            config.filter.transient_dim,
            scale,
            &mut rng,
        );
        Ok(Self {
            params,
            field,
            features,
            filter,
            appearance,
            transient,
            train_images,
        })
    }

    /// Rebuilds the model described by a checkpoint and loads its values.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut model = Self::new(&ck.config, ck.train_images)?;
        if ck.blocks.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameter blocks, the configured model has {}",
                ck.blocks.len(),
                model.params.len()
            )));
        }
        for b in &ck.blocks {
            let id = model
                .params
                .find(&b.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter block {}", b.name)))?;
            let v = model.params.value_mut(id);
            if v.shape() != (b.rows, b.cols) {
                return Err(Error::Checkpoint(format!(
                    "{} is {}x{} in the checkpoint but {}x{} in the model",
                    b.name, b.rows, b.cols, v.rows, v.cols
                )));
            }
            *v = Matrix::from_f64(b.rows, b.cols, &b.value);
        }
        Ok(model)
    }

    pub fn appearance_row(&self, train_position: usize) -> Vec<f64> {
        self.params
            .value(self.appearance)
            .row(train_position)
            .iter()
            .map(|x| x.f64())
            .collect()
    }

    pub fn transient_row(&self, train_position: usize) -> Vec<f64> {
        self.params
            .value(self.transient)
            .row(train_position)
            .iter()
            .map(|x| x.f64())
            .collect()
    }
}

/// Uniformly drawn training pixels as `(train position, x, y)`.
pub fn sample_pixels(
    dataset: &SceneDataset,
    count: usize,
    rng: &mut impl Rng,
) -> Vec<(usize, usize, usize)> {
    let n = dataset.train.len();
    (0..count)
        .map(|_| {
            let j = rng.random_range(0..n);
            let img = &dataset.images[dataset.train[j]];
            (
                j,
                rng.random_range(0..img.width),
                rng.random_range(0..img.height),
            )
        })
        .collect()
}

/// Rays and `R × 3` target colors of sampled training pixels.
pub fn pixel_rays<T: Real>(
    dataset: &SceneDataset,
    pixels: &[(usize, usize, usize)],
) -> Result<(Vec<Ray>, Matrix<T>)> {
    let mut rays = Vec::with_capacity(pixels.len());
    let mut targets = Vec::with_capacity(pixels.len() * 3);
    for &(j, x, y) in pixels {
        let i = dataset.train[j];
        rays.push(generate_rays(&dataset.cameras[i], i, &[Pixel::new(x, y)])?[0]);
        targets.extend(dataset.images[i].pixel(x, y).map(|c| c as f64));
    }
    Ok((rays, Matrix::from_f64(pixels.len(), 3, &targets)))
}

/// Distinct, sorted train positions of a batch.
pub fn touched_rows(pixels: &[(usize, usize, usize)]) -> Vec<usize> {
    let mut rows: Vec<usize> = pixels.iter().map(|p| p.0).collect();
    rows.sort_unstable();
    rows.dedup();
    rows
}

/// Batch objective on a tape plus what the optimizer and callers need
/// from its construction.
pub struct BatchLoss<'t, T: Real> {
    pub total: Var<'t, T>,
    pub breakdown: LossBreakdown,
    /// Distinct train positions in the batch, sorted.
    pub touched: Vec<usize>,
    pub fine_sets: Vec<FrustumSampleSet>,
}

/// Scalars reported after each step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    /// Index of the step just taken (0-based).
    pub step: u64,
    pub learning_rate: f64,
    pub temperature: f64,
    pub losses: LossBreakdown,
}

pub struct Trainer<'d, T: Real> {
    pub config: TrainConfig,
    pub model: Model<T>,
    pub adam: Adam,
    /// Steps taken so far.
    pub step: u64,
    dataset: &'d SceneDataset,
    inputs: FeatureInputs,
}

impl<'d, T: Real> Trainer<'d, T> {
    pub fn new(config: TrainConfig, dataset: &'d SceneDataset) -> Result<Self> {
        let model = Model::new(&config, dataset.train.len())?;
        let adam = Adam::new(config.adam, &model.params);
        Self::assemble(config, model, adam, 0, dataset)
    }

    /// Continues a run from a checkpoint.
    pub fn resume(ck: &Checkpoint, dataset: &'d SceneDataset) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let mut adam = Adam::new(ck.config.adam, &model.params);
        for b in &ck.blocks {
            let id = model
                .params
                .find(&b.name)
                .expect("checked by from_checkpoint");
            adam.state[id.0] = b.moments.clone();
        }
        if ck.train_images != dataset.train.len() {
            return Err(Error::Ingestion(format!(
                "checkpoint was trained on {} images, dataset has {} in its training split",
                ck.train_images,
                dataset.train.len()
            )));
        }
        Self::assemble(ck.config.clone(), model, adam, ck.step, dataset)
    }

    fn assemble(
        config: TrainConfig,
        model: Model<T>,
        adam: Adam,
        step: u64,
        dataset: &'d SceneDataset,
    ) -> Result<Self> {
        dataset.validate()?;
        if dataset.train.is_empty() {
            return Err(Error::Ingestion("dataset has no training images".into()));
        }
        let inputs = dataset.feature_inputs(&config.features)?;
        if config.features.source == FeatureSource::PrecomputedFiles
            && inputs.width() != config.features.backbone_dim
        {
            return Err(Error::Ingestion(format!(
                "feature files have {} channels but features.backbone_dim is {}",
                inputs.width(),
                config.features.backbone_dim
            )));
        }
        Ok(Self {
            config,
            model,
            adam,
            step,
            dataset,
            inputs,
        })
    }

    pub fn dataset(&self) -> &'d SceneDataset {
        self.dataset
    }

    pub fn feature_inputs(&self) -> &FeatureInputs {
        &self.inputs
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let blocks = self
            .model
            .params
            .iter()
            .map(|(id, p)| ParamBlock {
                name: p.name.clone(),
                sparse: p.sparse,
                rows: p.value.rows,
                cols: p.value.cols,
                value: p.value.to_f64(),
                moments: self.adam.state[id.0].clone(),
            })
            .collect();
        Checkpoint {
            config: self.config.clone(),
            step: self.step,
            train_images: self.model.train_images,
            blocks,
        }
    }

    /// Builds the batch objective of `step` on `tape`.
    ///
    /// `noise` replaces the Concrete noise `logit(U)` of every ray (zeros
    /// give evaluation-mode opacity); `fine` replaces the resampled fine
    /// intervals.
    pub fn batch_loss<'t>(
        &self,
        tape: &'t Tape<T>,
        p: &crate::params::Bound<'t, T>,
        step: u64,
        noise: Option<&[f64]>,
        fine: Option<&[FrustumSampleSet]>,
    ) -> Result<BatchLoss<'t, T>> {
        let cfg = &self.config;
        let model = &self.model;
        let seed = cfg.seed;
        let pixels = sample_pixels(
            self.dataset,
            cfg.rays_per_batch,
            &mut step_rng(seed, step, STREAM_BATCH),
        );
        let (rays, targets) = pixel_rays::<T>(self.dataset, &pixels)?;
        let rows: Vec<usize> = pixels.iter().map(|p| p.0).collect();
        let touched = touched_rows(&pixels);

        let appearance = p[model.appearance].gather_rows(&rows);
        let mut jitter = step_rng(seed, step, STREAM_JITTER);
        let passes = static_passes_with(
            &model.field,
            p,
            &rays,
            appearance,
            cfg,
            Some(&mut jitter),
            fine,
        )?;
        let target = tape.constant(targets);

        let (transient, coarse, smoothness) = if cfg.filter_active_at(step) {
            let r = rays.len();
            let coords: Vec<[f64; 2]> = rays.iter().map(|r| r.pixel).collect();
            let pix = tape.constant(pixel_features(&coords, cfg.encoding.pixel_levels));
            let trans = p[model.transient].gather_rows(&rows);
            let feats = model
                .features
                .apply(p, tape.constant(self.inputs.rows(&pixels)));
            let sampled;
            let noise = match (noise, cfg.filter.opacity_head) {
                (Some(n), _) => n,
                (None, OpacityHead::Concrete) => {
                    sampled = concrete_noise(r, &mut step_rng(seed, step, STREAM_NOISE));
                    &sampled
                }
                (None, OpacityHead::Sigmoid) => {
                    sampled = vec![0.0; r];
                    &sampled
                }
            };
            let temperature = cfg.temperature_at(step);
            let want_smooth = cfg.losses.lambda_smooth > 0.0;
            let tv = model
                .filter
                .forward(p, pix, trans, feats, noise, temperature, want_smooth);
            let pred = blend_vars(tv.opacity, tv.color, passes.fine.color);
            let lt =
                transient_loss_vars(pred, target, tv.beta, tv.opacity, cfg.losses.lambda_alpha);
            let lc = coarse_loss_vars(
                tv.opacity,
                passes.coarse.color,
                target,
                cfg.losses.detach_coarse_mask,
            );
            (lt, lc, tv.smoothness)
        } else {
            let lt =
                residual_vars(passes.fine.color, target).affine(1.0, DISABLED_TRANSIENT_OFFSET);
            let lc = residual_vars(passes.coarse.color, target);
            (lt, lc, None)
        };
        let vars = LossVars {
            transient,
            coarse,
            smoothness,
            sparsity: sparsity_loss_vars(passes.coarse.density),
            appearance: p[model.appearance].gather_rows(&touched),
        };
        let (total, breakdown) = total_loss_vars(&vars, &cfg.losses);
        for (name, v) in breakdown.named() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite {name} loss ({v}) at step {step}"
                )));
            }
        }
        Ok(BatchLoss {
            total,
            breakdown,
            touched,
            fine_sets: passes.fine_sets,
        })
    }

    /// One optimization step.
    pub fn step(&mut self) -> Result<StepReport> {
        let step = self.step;
        let tape = Tape::new();
        let p = self.model.params.bind_all(&tape);
        let BatchLoss {
            total,
            breakdown: losses,
            touched,
            ..
        } = self.batch_loss(&tape, &p, step, None, None)?;
        let mut grads = tape.backward(total);
        let g: Vec<Option<Matrix<T>>> = p
            .vars()
            .iter()
            .map(|&v| grads.get(v).is_some().then(|| grads.take_or_zeros(v)))
            .collect();
        let learning_rate = self.config.learning_rate_at(step);
        self.adam
            .step(&mut self.model.params, &g, &touched, learning_rate);
        if !self.model.params.all_finite() {
            return Err(Error::Numeric(format!(
                "parameters became non-finite at step {step}"
            )));
        }
        self.step += 1;
        Ok(StepReport {
            step,
            learning_rate,
            temperature: self.config.temperature_at(step),
            losses,
        })
    }

    /// Steps until `config.steps`, handing every report to `observe`.
    pub fn run(&mut self, mut observe: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let report = self.step()?;
            observe(self, &report)?;
        }
        Ok(())
    }
}

/// Files written by [`train`] into an output directory.
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const SCALARS_FILE: &str = "scalars.tsv";
pub const VALIDATION_DIR: &str = "validation";

/// Append-only `step  term  value` log.
pub struct ScalarLog {
    path: PathBuf,
    file: fs::File,
}

impl ScalarLog {
    pub fn create(path: &Path) -> Result<Self> {
        let exists = path.exists();
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        if !exists {
            file.write_all(b"step\tterm\tvalue\n")
                .map_err(|e| Error::io(path, e))?;
        }
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn record(&mut self, r: &StepReport) -> Result<()> {
        let mut s = String::new();
        for (name, v) in r.losses.named() {
            s.push_str(&format!("{}\t{name}\t{v:e}\n", r.step));
        }
        s.push_str(&format!(
            "{}\tlearning_rate\t{:e}\n",
            r.step, r.learning_rate
        ));
        s.push_str(&format!("{}\ttemperature\t{:e}\n", r.step, r.temperature));
        self.file
            .write_all(s.as_bytes())
            .map_err(|e| Error::io(&self.path, e))
    }
}

/// Trains (or resumes) a run inside `out_dir`: scalar log, periodic
/// validation renders of the first training view, final checkpoint.
pub fn train<T: Real>(trainer: &mut Trainer<'_, T>, out_dir: &Path) -> Result<Checkpoint> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut log = ScalarLog::create(&out_dir.join(SCALARS_FILE))?;
    let log_every = trainer.config.log_every;
    let validate_every = trainer.config.validate_every;
    trainer.run(|t, r| {
        let done = r.step + 1;
        if log_every > 0 && (r.step % log_every == 0 || done == t.config.steps) {
            log.record(r)?;
        }
        if validate_every > 0 && done % validate_every == 0 {
            let dir = out_dir.join(VALIDATION_DIR);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let i = t.dataset().train[0];
            let img = render_view(
                &t.model,
                &t.config,
                &t.dataset().cameras[i],
                &t.model.appearance_row(0),
            )?;
            img.write_png(&dir.join(format!("step{done:07}.png")))?;
        }
        Ok(())
    })?;
    let ck = trainer.checkpoint();
    ck.save(&out_dir.join(CHECKPOINT_FILE))?;
    Ok(ck)
}
