mod common;

use sfnerf::trainer::{decompose, fit_test_embedding, left_half_error, Checkpoint, Model, Trainer};

fn run(steps: u64) -> Vec<f64> {
    let ds = common::tiny_scene();
    let mut cfg = common::tiny_config();
    cfg.steps = steps;
    let mut t = Trainer::<f64>::new(cfg, &ds).unwrap();
    let mut totals = Vec::new();
    t.run(|_, r| {
        totals.push(r.losses.total);
        Ok(())
    })
    .unwrap();
    totals
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn loss_decreases_over_a_short_run() {
    let totals = run(200);
    assert_eq!(totals.len(), 200);
    assert!(totals.iter().all(|v| v.is_finite()));
    let (head, tail) = (mean(&totals[..20]), mean(&totals[180..]));
    assert!(tail < head, "loss went from {head} to {tail}");
}

#[test]
fn runs_are_deterministic() {
    let ds = common::tiny_scene();
    let go = || {
        let mut t = Trainer::<f64>::new(common::tiny_config(), &ds).unwrap();
        t.run(|_, _| Ok(())).unwrap();
        t.checkpoint().to_bytes()
    };
    assert_eq!(go(), go());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let ds = common::tiny_scene();
    let cfg = common::tiny_config();
    let mut full = Trainer::<f64>::new(cfg.clone(), &ds).unwrap();
    full.run(|_, _| Ok(())).unwrap();

    let mut first = Trainer::<f64>::new(cfg.clone(), &ds).unwrap();
    for _ in 0..cfg.steps / 2 {
        first.step().unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    first.checkpoint().save(&path).unwrap();
    drop(first);
    let ck = Checkpoint::load(&path).unwrap();
    let mut second = Trainer::<f64>::resume(&ck, &ds).unwrap();
    second.run(|_, _| Ok(())).unwrap();

    let (a, b) = (full.checkpoint(), second.checkpoint());
    assert_eq!(a.step, b.step);
    for (x, y) in a.blocks.iter().zip(&b.blocks) {
        assert_eq!(x.name, y.name);
        for (u, v) in x.value.iter().zip(&y.value) {
            assert!((u - v).abs() <= 1e-6, "{}: {u} vs {v}", x.name);
        }
    }
}

#[test]
fn test_time_fit_recovers_training_embedding_quality() {
    let ds = common::tiny_scene();
    let mut cfg = common::tiny_config();
    cfg.steps = 150;
    cfg.fit.steps = 150;
    let mut t = Trainer::<f64>::new(cfg.clone(), &ds).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let model = &t.model;
    // Fitting a fresh code to a training view's left half should do about as
    // well as the code learned for it during training.
    let (pos, i) = (0, ds.train[0]);
    let reference = ds.clean.as_ref().unwrap();
    let learned = left_half_error(
        model,
        &cfg,
        &ds.cameras[i],
        &reference[i],
        &model.appearance_row(pos),
    )
    .unwrap();
    let fit = fit_test_embedding(model, &cfg, &ds.cameras[i], &reference[i], i).unwrap();
    assert!(fit.error.is_finite());
    assert!(
        fit.error <= 1.1 * learned,
        "fitted error {} vs learned {}",
        fit.error,
        learned
    );
}

#[test]
fn fitting_and_decomposition_leave_parameters_unchanged() {
    let ds = common::tiny_scene();
    let cfg = common::tiny_config();
    let mut t = Trainer::<f64>::new(cfg.clone(), &ds).unwrap();
    t.run(|_, _| Ok(())).unwrap();
    let before = t.checkpoint().to_bytes();
    let i = ds.test[0];
    fit_test_embedding(&t.model, &cfg, &ds.cameras[i], &ds.images[i], i).unwrap();
    decompose(&t.model, &cfg, &ds, t.feature_inputs(), 0, 0.5).unwrap();
    assert_eq!(t.checkpoint().to_bytes(), before);

    let reloaded =
        Model::<f64>::from_checkpoint(&Checkpoint::from_bytes(&before).unwrap()).unwrap();
    let a = decompose(&t.model, &cfg, &ds, t.feature_inputs(), 1, 0.5).unwrap();
    let b = decompose(&reloaded, &cfg, &ds, t.feature_inputs(), 1, 0.5).unwrap();
    assert_eq!(a.blended, b.blended);
    assert_eq!(a.opacity, b.opacity);
}

#[test]
fn f32_training_stays_finite() {
    let ds = common::tiny_scene();
    let mut cfg = common::tiny_config();
    cfg.precision = sfnerf::trainer::Precision::F32;
    let mut t = Trainer::<f32>::new(cfg, &ds).unwrap();
    t.run(|_, r| {
        assert!(r.losses.total.is_finite());
        Ok(())
    })
    .unwrap();
    assert!(t.model.params.all_finite());
}
