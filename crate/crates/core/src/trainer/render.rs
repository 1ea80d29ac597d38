use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sfnerf_tape::{Matrix, Real, Tape, Var};

use super::{Adam, AdamConfig, Model, TrainConfig};
use crate::data::SceneDataset;
use crate::error::{Error, Result};
use crate::eval::{occluder_iou, right_half, MetricReport, PerceptualMetric};
use crate::filternet::{blend, pixel_features, FeatureInputs};
use crate::geometry::{
    generate_rays, hierarchical_resample, smooth_resample_weights, stratified_sample, Camera,
    FrustumSampleSet, Pixel, Ray,
};
use crate::losses::residual_vars;
use crate::params::{Bound, ParamSet};
use crate::raster::{GrayMap, Image};
use crate::static_field::{composite, direction_features, RenderVars, SampleBatch, StaticField};

/// Coarse and fine passes of one ray batch.
pub struct StaticPasses<'t, T: Real> {
    pub coarse: RenderVars<'t, T>,
    pub fine: RenderVars<'t, T>,
    /// Trunk features of the fine samples, `R·K_f × width`.
    pub fine_trunk: Var<'t, T>,
    /// Fine intervals of every ray.
    pub fine_sets: Vec<FrustumSampleSet>,
}

/// Stratified coarse pass, weight-guided resampling, fine pass. Without a
/// jitter generator both sampling stages are deterministic (evaluation
/// mode).
pub fn static_passes<'t, T: Real>(
    field: &StaticField,
    p: &Bound<'t, T>,
    rays: &[Ray],
    appearance: Var<'t, T>,
    cfg: &TrainConfig,
    jitter: Option<&mut ChaCha8Rng>,
) -> Result<StaticPasses<'t, T>> {
    static_passes_with(field, p, rays, appearance, cfg, jitter, None)
}

/// [`static_passes`] with the option of supplying the fine intervals
/// instead of resampling them from the coarse weights.
///
/// Resampling is not differentiated, so holding the fine intervals fixed
/// gives the function whose gradient the tape computes; finite-difference
/// checks rely on this.
pub fn static_passes_with<'t, T: Real>(
    field: &StaticField,
    p: &Bound<'t, T>,
    rays: &[Ray],
    appearance: Var<'t, T>,
    cfg: &TrainConfig,
    jitter: Option<&mut ChaCha8Rng>,
    fixed_fine: Option<&[FrustumSampleSet]>,
) -> Result<StaticPasses<'t, T>> {
    let tape = p.tape();
    let jit = jitter.is_some();
    let mut idle = ChaCha8Rng::seed_from_u64(0);
    let rng = match jitter {
        Some(r) => r,
        None => &mut idle,
    };
    let coarse_sets = rays
        .iter()
        .map(|r| stratified_sample(r, cfg.coarse_samples, jit, rng))
        .collect::<Result<Vec<_>>>()?;
    let cb = SampleBatch::<T>::new(&coarse_sets, &field.encoding)?;
    let dirs = tape.constant(direction_features(rays, &field.encoding));
    let coarse = field.render(p, &cb, dirs, appearance);

    let fine_sets = if let Some(sets) = fixed_fine {
        if sets.len() != rays.len() {
            return Err(Error::Input(format!(
                "{} fine sample sets for {} rays",
                sets.len(),
                rays.len()
            )));
        }
        sets.to_vec()
    } else {
        let w = coarse.weights.value();
        let mut sets = Vec::with_capacity(rays.len());
        for (i, (ray, set)) in rays.iter().zip(&coarse_sets).enumerate() {
            let row: Vec<f64> = w.row(i).iter().map(|x| x.f64()).collect();
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite coarse weights on the ray through pixel ({:.4}, {:.4}) of image {}",
                    ray.pixel[0], ray.pixel[1], ray.image
                )));
            }
            let smoothed = smooth_resample_weights(&row, cfg.resample_padding);
            sets.push(hierarchical_resample(
                ray,
                set,
                &smoothed,
                cfg.fine_samples,
                jit,
                rng,
            )?);
        }
        sets
    };
    let fb = SampleBatch::<T>::new(&fine_sets, &field.encoding)?;
    let (sigma, h) = field.trunk_forward(p, tape.constant(fb.positions));
    let rgb = field.color_head(p, h, dirs, appearance, fb.k);
    let density = sigma.reshape(fb.rays, fb.k);
    let (color, weights) = composite(density, rgb, tape.constant(fb.deltas));
    Ok(StaticPasses {
        coarse,
        fine: RenderVars {
            color,
            weights,
            density,
        },
        fine_trunk: h,
        fine_sets,
    })
}

fn tiled<T: Real>(row: &[f64], n: usize) -> Matrix<T> {
    Matrix::from_fn(n, row.len(), |_, c| T::of(row[c]))
}

fn check_appearance<T: Real>(model: &Model<T>, appearance: &[f64]) -> Result<()> {
    let want = model.field.config.appearance_dim;
    if appearance.len() != want {
        return Err(Error::Input(format!(
            "appearance embedding has {} entries, expected {want}",
            appearance.len()
        )));
    }
    Ok(())
}

/// Evaluation-mode static colors of `rays` under one appearance embedding.
pub fn render_rays<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    rays: &[Ray],
    appearance: &[f64],
) -> Result<Vec<[f64; 3]>> {
    check_appearance(model, appearance)?;
    let mut out = Vec::with_capacity(rays.len());
    for chunk in rays.chunks(cfg.render_chunk) {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let app = tape.constant(tiled(appearance, chunk.len()));
        let passes = static_passes(&model.field, &p, chunk, app, cfg, None)?;
        let c = passes.fine.color.value();
        out.extend(
            (0..chunk.len()).map(|i| [c.get(i, 0).f64(), c.get(i, 1).f64(), c.get(i, 2).f64()]),
        );
    }
    Ok(out)
}

/// Static render of a full view; the transient branch plays no part.
pub fn render_view<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    camera: &Camera,
    appearance: &[f64],
) -> Result<Image> {
    let pixels = camera.all_pixels();
    let rays = generate_rays(camera, 0, &pixels)?;
    let colors = render_rays(model, cfg, &rays, appearance)?;
    let mut img = Image::new(camera.width, camera.height);
    for (px, c) in pixels.iter().zip(colors) {
        img.set_pixel(px.x, px.y, c.map(|v| v as f32));
    }
    Ok(img)
}

/// Per-image outputs of the decomposition of a training view.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub static_render: Image,
    pub transient_color: Image,
    pub opacity: GrayMap,
    /// Raw uncertainty `β`, not normalized.
    pub uncertainty: GrayMap,
    /// `blend(opacity, transient_color, static_render)`.
    pub blended: Image,
}

/// Evaluation-mode decomposition of the training image at `train_position`
/// (`U = ½`, no sampling jitter) at Concrete temperature `temperature`.
pub fn decompose<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    dataset: &SceneDataset,
    inputs: &FeatureInputs,
    train_position: usize,
    temperature: f64,
) -> Result<Decomposition> {
    let Some(&i) = dataset.train.get(train_position) else {
        return Err(Error::Input(format!(
            "train position {train_position} out of range (the split has {} images)",
            dataset.train.len()
        )));
    };
    let cam = &dataset.cameras[i];
    let (w, h) = (cam.width, cam.height);
    let pixels = cam.all_pixels();
    let rays = generate_rays(cam, i, &pixels)?;
    let app_row = model.appearance_row(train_position);
    let trans_row = model.transient_row(train_position);
    let mut out = Decomposition {
        static_render: Image::new(w, h),
        transient_color: Image::new(w, h),
        opacity: GrayMap::new(w, h),
        uncertainty: GrayMap::new(w, h),
        blended: Image::new(w, h),
    };
    for (ray_chunk, px_chunk) in rays
        .chunks(cfg.render_chunk)
        .zip(pixels.chunks(cfg.render_chunk))
    {
        let n = ray_chunk.len();
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let app = tape.constant(tiled(&app_row, n));
        let passes = static_passes(&model.field, &p, ray_chunk, app, cfg, None)?;
        let stat = passes.fine.color.value().to_f64();
        let (alpha, color, beta) = if cfg.filter_enabled {
            let coords: Vec<[f64; 2]> = ray_chunk.iter().map(|r| r.pixel).collect();
            let pix = tape.constant(pixel_features(&coords, cfg.encoding.pixel_levels));
            let trans = tape.constant(tiled(&trans_row, n));
            let keys: Vec<_> = px_chunk
                .iter()
                .map(|q| (train_position, q.x, q.y))
                .collect();
            let feats = model.features.apply(&p, tape.constant(inputs.rows(&keys)));
            let tv = model
                .filter
                .forward(&p, pix, trans, feats, &vec![0.0; n], temperature, false);
            let (a, c, b) = (tv.opacity.value(), tv.color.value(), tv.beta.value());
            (a.to_f64(), c.to_f64(), b.to_f64())
        } else {
            (
                vec![0.0; n],
                vec![0.0; 3 * n],
                vec![std::f64::consts::FRAC_1_SQRT_2; n],
            )
        };
        for (k, q) in px_chunk.iter().enumerate() {
            let s = [stat[3 * k], stat[3 * k + 1], stat[3 * k + 2]];
            let ct = [color[3 * k], color[3 * k + 1], color[3 * k + 2]];
            out.static_render.set_pixel(q.x, q.y, s.map(|v| v as f32));
            out.transient_color
                .set_pixel(q.x, q.y, ct.map(|v| v as f32));
            out.opacity.set(q.x, q.y, alpha[k] as f32);
            out.uncertainty.set(q.x, q.y, beta[k] as f32);
            out.blended
                .set_pixel(q.x, q.y, blend(alpha[k], ct, s).map(|v| v as f32));
        }
    }
    Ok(out)
}

fn left_half_pixels(camera: &Camera) -> Vec<Pixel> {
    let half = camera.width / 2;
    (0..camera.height)
        .flat_map(|y| (0..half).map(move |x| Pixel::new(x, y)))
        .collect()
}

/// Mean squared error (over pixels and channels) of the static render
/// against columns `[0, W/2)` of `image`.
pub fn left_half_error<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    camera: &Camera,
    image: &Image,
    appearance: &[f64],
) -> Result<f64> {
    let pixels = left_half_pixels(camera);
    let rays = generate_rays(camera, 0, &pixels)?;
    let colors = render_rays(model, cfg, &rays, appearance)?;
    let mut acc = 0.0;
    for (q, c) in pixels.iter().zip(&colors) {
        let t = image.pixel(q.x, q.y);
        for ch in 0..3 {
            acc += (c[ch] - t[ch] as f64).powi(2);
        }
    }
    Ok(acc / (3 * pixels.len().max(1)) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitResult {
    pub embedding: Vec<f64>,
    /// [`left_half_error`] under the fitted embedding.
    pub error: f64,
}

/// Fits a fresh appearance embedding to the left half of `image` with the
/// model frozen.
///
/// Densities, fine samples and the trunk part of the color layer do not
/// depend on the embedding, so they are computed once; each iteration
/// only runs the rest of the color head on a random subset of the cached
/// pixels.
pub fn fit_test_embedding<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    camera: &Camera,
    image: &Image,
    image_id: usize,
) -> Result<FitResult> {
    if (image.width, image.height) != (camera.width, camera.height) {
        return Err(Error::Input(format!(
            "image {image_id} does not match its camera"
        )));
    }
    let dim = model.field.config.appearance_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(image_id as u64);
    let mut pixels = left_half_pixels(camera);
    if pixels.len() > cfg.fit.max_pixels {
        let mut keep = sample(&mut rng, pixels.len(), cfg.fit.max_pixels).into_vec();
        keep.sort_unstable();
        pixels = keep.into_iter().map(|k| pixels[k]).collect();
    }
    if pixels.is_empty() {
        return Err(Error::Input(format!(
            "image {image_id} has an empty left half"
        )));
    }
    let rays = generate_rays(camera, image_id, &pixels)?;
    let k = cfg.fine_samples;
    let cw = model.field.config.color_width;
    let dd = model.field.encoding.direction_dim();
    let zero = vec![0.0; dim];
    let (mut trunk, mut dirs, mut weights) = (Vec::new(), Vec::new(), Vec::new());
    for chunk in rays.chunks(cfg.render_chunk) {
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let app = tape.constant(tiled(&zero, chunk.len()));
        let passes = static_passes(&model.field, &p, chunk, app, cfg, None)?;
        trunk.extend_from_slice(
            &model
                .field
                .color_trunk_term(&p, passes.fine_trunk)
                .value()
                .data,
        );
        dirs.extend(direction_features::<T>(chunk, &model.field.encoding).data);
        weights.extend_from_slice(&passes.fine.weights.value().data);
    }
    let targets: Vec<[f64; 3]> = pixels
        .iter()
        .map(|q| image.pixel(q.x, q.y).map(|c| c as f64))
        .collect();

    let mut emb = ParamSet::<T>::new();
    let id = emb.add("appearance", Matrix::zeros(1, dim), false);
    let mut adam = Adam::new(AdamConfig::default(), &emb);
    let batch = cfg.fit.rays.min(pixels.len());
    for it in 0..cfg.fit.steps {
        let pick: Vec<usize> = (0..batch)
            .map(|_| rng.random_range(0..pixels.len()))
            .collect();
        let mut tm = Vec::with_capacity(batch * k * cw);
        let mut dm = Vec::with_capacity(batch * dd);
        let mut wm = Vec::with_capacity(batch * k);
        let mut tg = Vec::with_capacity(batch * 3);
        for &r in &pick {
            tm.extend_from_slice(&trunk[r * k * cw..(r + 1) * k * cw]);
            dm.extend_from_slice(&dirs[r * dd..(r + 1) * dd]);
            wm.extend_from_slice(&weights[r * k..(r + 1) * k]);
            tg.extend(targets[r].map(T::of));
        }
        let tape = Tape::new();
        let p = model.params.bind_frozen(&tape);
        let e = tape.param(emb.value(id).clone());
        let rgb = model.field.color_from_trunk_term(
            &p,
            tape.constant(Matrix::from_vec(batch * k, cw, tm)),
            tape.constant(Matrix::from_vec(batch, dd, dm)),
            e.tile_rows(batch),
            k,
        );
        let color = rgb
            .mul_col(tape.constant(Matrix::from_vec(batch * k, 1, wm)))
            .sum_row_groups(k);
        let loss = residual_vars(color, tape.constant(Matrix::from_vec(batch, 3, tg)))
            .sum()
            .scale(1.0 / (3 * batch) as f64);
        let value = loss.item().f64();
        if !value.is_finite() {
            return Err(Error::Numeric(format!(
                "appearance fit diverged on image {image_id} at iteration {it} (loss {value})"
            )));
        }
        let mut g = tape.backward(loss);
        let grad = g.take_or_zeros(e);
        adam.step(&mut emb, &[Some(grad)], &[], cfg.fit.learning_rate);
    }
    let embedding: Vec<f64> = emb.value(id).to_f64();
    if embedding.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!(
            "appearance fit diverged on image {image_id}"
        )));
    }
    let error = left_half_error(model, cfg, camera, image, &embedding)?;
    Ok(FitResult { embedding, error })
}

/// Test-view scores: fit on the left half, score the right half against
/// the clean reference (or the observed image when there is none).
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Full static render of each test view, in split order.
    pub renders: Vec<Image>,
    pub embeddings: Vec<Vec<f64>>,
}

pub fn evaluate_test_views<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    dataset: &SceneDataset,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<Evaluation> {
    let mut eval = Evaluation {
        report: MetricReport::default(),
        renders: Vec::new(),
        embeddings: Vec::new(),
    };
    for &i in &dataset.test {
        let cam = &dataset.cameras[i];
        let fit = fit_test_embedding(model, cfg, cam, &dataset.images[i], i)?;
        let render = render_view(model, cfg, cam, &fit.embedding)?;
        let reference = dataset
            .clean
            .as_ref()
            .map(|c| &c[i])
            .unwrap_or(&dataset.images[i]);
        eval.report.push(
            dataset.names[i].clone(),
            &right_half(&render),
            &right_half(reference),
            None,
            perceptual,
        )?;
        eval.renders.push(render);
        eval.embeddings.push(fit.embedding);
    }
    Ok(eval)
}

/// Occluder IoU of every training view with a ground-truth mask, in train
/// order.
pub fn decomposition_ious<T: Real>(
    model: &Model<T>,
    cfg: &TrainConfig,
    dataset: &SceneDataset,
    inputs: &FeatureInputs,
    temperature: f64,
    threshold: f64,
) -> Result<Option<Vec<f64>>> {
    let Some(masks) = &dataset.masks else {
        return Ok(None);
    };
    let mut out = Vec::with_capacity(dataset.train.len());
    for (j, &i) in dataset.train.iter().enumerate() {
        let d = decompose(model, cfg, dataset, inputs, j, temperature)?;
        out.push(occluder_iou(&d.opacity, &masks[i], threshold)?);
    }
    Ok(Some(out))
}
