//! Objective terms, in plain scalar form and as tape expressions over a
//! batch of `R` rays.

use serde::{Deserialize, Serialize};
use sfnerf_tape::{Real, Var};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Opacity penalty inside the transient loss.
    pub lambda_alpha: f64,
    pub lambda_coarse: f64,
    pub lambda_smooth: f64,
    pub lambda_sparsity: f64,
    /// L2 penalty on the appearance embeddings of the images in a batch.
    pub lambda_appearance: f64,
    /// Stop the coarse loss from pushing on the transient opacity.
    pub detach_coarse_mask: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_alpha: 0.01,
            lambda_coarse: 1.0,
            lambda_smooth: 0.01,
            lambda_sparsity: 1e-4,
            lambda_appearance: 0.01,
            detach_coarse_mask: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_alpha,
            self.lambda_coarse,
            self.lambda_smooth,
            self.lambda_sparsity,
            self.lambda_appearance,
        ];
        if all.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::Config(
                "loss weights must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn squared_distance(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|c| (a[c] - b[c]).powi(2)).sum()
}

/// `‖Ĉ − C̄‖² / (2β²) + ln β + λ_α α`.
pub fn transient_loss(
    pred: [f64; 3],
    target: [f64; 3],
    beta: f64,
    alpha: f64,
    lambda_alpha: f64,
) -> f64 {
    squared_distance(pred, target) / (2.0 * beta * beta) + beta.ln() + lambda_alpha * alpha
}

/// `(1 − α) ‖C_coarse − C̄‖²`.
pub fn coarse_loss(alpha: f64, coarse: [f64; 3], target: [f64; 3]) -> f64 {
    (1.0 - alpha) * squared_distance(coarse, target)
}

/// `Σ_k ln(1 + 2σ_k²)` over one ray's coarse densities.
pub fn sparsity_loss(densities: &[f64]) -> f64 {
    densities.iter().map(|s| (1.0 + 2.0 * s * s).ln()).sum()
}

/// Per-ray values of every term.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RayTerms {
    pub transient: f64,
    pub coarse: f64,
    pub smoothness: f64,
    pub sparsity: f64,
}

/// Batch objective from per-ray terms and the appearance embeddings of the
/// images present in the batch (one entry per distinct image).
pub fn total_loss(rays: &[RayTerms], appearance: &[&[f64]], w: &LossWeights) -> f64 {
    let per_ray: f64 = rays
        .iter()
        .map(|r| {
            r.transient
                + w.lambda_coarse * r.coarse
                + w.lambda_smooth * r.smoothness
                + w.lambda_sparsity * r.sparsity
        })
        .sum();
    let emb: f64 = appearance
        .iter()
        .map(|e| e.iter().map(|v| v * v).sum::<f64>())
        .sum();
    per_ray + w.lambda_appearance * emb
}

/// `R × 1` squared color residuals.
pub fn residual_vars<'t, T: Real>(pred: Var<'t, T>, target: Var<'t, T>) -> Var<'t, T> {
    (pred - target).square().row_sum()
}

/// `R × 1` transient losses.
pub fn transient_loss_vars<'t, T: Real>(
    pred: Var<'t, T>,
    target: Var<'t, T>,
    beta: Var<'t, T>,
    alpha: Var<'t, T>,
    lambda_alpha: f64,
) -> Var<'t, T> {
    let res = residual_vars(pred, target);
    (res * beta.square().recip()).scale(0.5) + beta.ln() + alpha.scale(lambda_alpha)
}

/// `R × 1` coarse losses.
pub fn coarse_loss_vars<'t, T: Real>(
    alpha: Var<'t, T>,
    coarse: Var<'t, T>,
    target: Var<'t, T>,
    detach_mask: bool,
) -> Var<'t, T> {
    let alpha = if detach_mask { alpha.detach() } else { alpha };
    alpha.one_minus() * residual_vars(coarse, target)
}

/// `R × 1` sparsity losses from `R × K` coarse densities.
pub fn sparsity_loss_vars<'t, T: Real>(density: Var<'t, T>) -> Var<'t, T> {
    density.square().affine(2.0, 1.0).ln().row_sum()
}

/// Term sums of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub transient: f64,
    pub coarse: f64,
    pub smoothness: f64,
    pub sparsity: f64,
    pub appearance: f64,
}

impl LossBreakdown {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("total", self.total),
            ("transient", self.transient),
            ("coarse", self.coarse),
            ("smoothness", self.smoothness),
            ("sparsity", self.sparsity),
            ("appearance", self.appearance),
        ]
    }
}

/// Tape operands of [`total_loss_vars`].
#[derive(Clone, Copy, Debug)]
pub struct LossVars<'t, T: Real> {
    pub transient: Var<'t, T>,
    pub coarse: Var<'t, T>,
    pub smoothness: Option<Var<'t, T>>,
    pub sparsity: Var<'t, T>,
    /// Appearance rows of the distinct images in the batch.
    pub appearance: Var<'t, T>,
}

/// Scalar batch objective plus the unweighted term sums.
pub fn total_loss_vars<'t, T: Real>(
    v: &LossVars<'t, T>,
    w: &LossWeights,
) -> (Var<'t, T>, LossBreakdown) {
    let transient = v.transient.sum();
    let coarse = v.coarse.sum();
    let sparsity = v.sparsity.sum();
    let appearance = v.appearance.square().sum();
    let mut total = transient + coarse.scale(w.lambda_coarse) + sparsity.scale(w.lambda_sparsity);
    let mut smooth_value = 0.0;
    if let Some(s) = v.smoothness {
        let s = s.sum();
        smooth_value = s.item().f64();
        total = total + s.scale(w.lambda_smooth);
    }
    total = total + appearance.scale(w.lambda_appearance);
    let breakdown = LossBreakdown {
        total: total.item().f64(),
        transient: transient.item().f64(),
        coarse: coarse.item().f64(),
        smoothness: smooth_value,
        sparsity: sparsity.item().f64(),
        appearance: appearance.item().f64(),
    };
    (total, breakdown)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use sfnerf_tape::{Matrix, Tape};

    #[test]
    fn transient_examples() {
        let c = [0.2, 0.4, 0.6];
        assert_eq!(transient_loss(c, c, 1.0, 0.0, 0.01), 0.0);
        let t = [0.2 + 0.1, 0.4 + 0.1, 0.6];
        let l = transient_loss(c, t, 1.0, 0.0, 0.5);
        assert!((l - 0.01).abs() < 1e-15);
    }

    #[test]
    fn beta_optimum_equals_residual_norm() {
        let pred = [0.1, 0.7, 0.3];
        let target = [0.4, 0.2, 0.35];
        let r = squared_distance(pred, target).sqrt();
        // Golden-section search over β.
        let f = |b: f64| transient_loss(pred, target, b, 0.0, 0.0);
        let (mut lo, mut hi) = (0.01, 5.0);
        let g = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        assert!((0.5 * (lo + hi) - r).abs() < 1e-6);
    }

    #[test]
    fn coarse_examples() {
        assert_eq!(coarse_loss(1.0, [0.3; 3], [0.9; 3]), 0.0);
        let l = coarse_loss(0.0, [0.2, 0.0, 0.0], [0.0; 3]);
        assert!((l - 0.04).abs() < 1e-15);
    }

    #[test]
    fn sparsity_examples() {
        assert_eq!(sparsity_loss(&[0.0; 5]), 0.0);
        assert!((sparsity_loss(&[1.0; 8]) - 8.0 * 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn total_additivity_in_appearance_weight() {
        let rays = [
            RayTerms {
                transient: 0.3,
                coarse: 0.1,
                smoothness: 2.0,
                sparsity: 4.0,
            },
            RayTerms {
                transient: -0.2,
                coarse: 0.05,
                smoothness: 1.0,
                sparsity: 1.0,
            },
        ];
        let e1 = [0.1, -0.2];
        let e2 = [0.3, 0.4];
        let mut w = LossWeights {
            lambda_appearance: 0.0,
            ..Default::default()
        };
        let a = total_loss(&rays, &[&e1, &e2], &w);
        w.lambda_appearance = 1.0;
        let b = total_loss(&rays, &[&e1, &e2], &w);
        assert!((b - a - (0.05 + 0.25)).abs() < 1e-14);
    }

    #[test]
    fn perfect_fit_with_only_first_term_is_zero() {
        let w = LossWeights {
            lambda_alpha: 0.0,
            lambda_coarse: 0.0,
            lambda_smooth: 0.0,
            lambda_sparsity: 0.0,
            lambda_appearance: 0.0,
            detach_coarse_mask: false,
        };
        let c = [0.5, 0.1, 0.9];
        let rays = [RayTerms {
            transient: transient_loss(c, c, 1.0, 0.0, w.lambda_alpha),
            coarse: 3.0,
            smoothness: 3.0,
            sparsity: 3.0,
        }];
        assert_eq!(total_loss(&rays, &[&[1.0, 2.0]], &w), 0.0);
    }

    #[test]
    fn tape_terms_match_scalar_versions() {
        let tape = Tape::<f64>::new();
        let pred = [[0.1, 0.5, 0.9], [0.3, 0.3, 0.3]];
        let target = [[0.2, 0.4, 0.7], [0.0, 1.0, 0.5]];
        let beta = [0.3, 1.7];
        let alpha = [0.2, 0.9];
        let coarse = [[0.15, 0.45, 0.8], [0.6, 0.1, 0.2]];
        let dens = [[0.0, 1.0, 2.5], [0.3, 0.0, 7.0]];
        let m = |rows: &[[f64; 3]]| tape.constant(Matrix::from_f64(rows.len(), 3, &rows.concat()));
        let col = |v: &[f64]| tape.constant(Matrix::from_f64(v.len(), 1, v));
        let lt = transient_loss_vars(m(&pred), m(&target), col(&beta), col(&alpha), 0.3);
        let lc = coarse_loss_vars(col(&alpha), m(&coarse), m(&target), false);
        let ls = sparsity_loss_vars(m(&dens));
        for r in 0..2 {
            let e = transient_loss(pred[r], target[r], beta[r], alpha[r], 0.3);
            assert!((lt.value().data[r] - e).abs() < 1e-14);
            let e = coarse_loss(alpha[r], coarse[r], target[r]);
            assert!((lc.value().data[r] - e).abs() < 1e-14);
            let e = sparsity_loss(&dens[r]);
            assert!((ls.value().data[r] - e).abs() < 1e-14);
        }
    }

    #[test]
    fn coarse_gradient_matches_differences() {
        let alpha = 0.3;
        let coarse = [0.2, 0.6, 0.9];
        let target = [0.4, 0.1, 0.7];
        let tape = Tape::<f64>::new();
        let c = tape.param(Matrix::from_f64(1, 3, &coarse));
        let l = coarse_loss_vars(
            tape.constant(Matrix::scalar(alpha)),
            c,
            tape.constant(Matrix::from_f64(1, 3, &target)),
            false,
        )
        .sum();
        let g = tape.backward(l);
        let grad = g.get(c).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut p = coarse;
            let mut m = coarse;
            p[i] += h;
            m[i] -= h;
            let fd = (coarse_loss(alpha, p, target) - coarse_loss(alpha, m, target)) / (2.0 * h);
            assert!((fd - grad.data[i]).abs() <= 1e-4 * fd.abs().max(1e-12));
        }
    }

    #[test]
    fn detached_mask_blocks_opacity_gradient() {
        let tape = Tape::<f64>::new();
        let a = tape.param(Matrix::scalar(0.4));
        let c = tape.constant(Matrix::from_f64(1, 3, &[0.2, 0.3, 0.4]));
        let t = tape.constant(Matrix::from_f64(1, 3, &[0.0; 3]));
        let g = tape.backward(coarse_loss_vars(a, c, t, true).sum());
        assert!(g.get(a).is_none());
        let g = tape.backward(coarse_loss_vars(a, c, t, false).sum());
        assert!(g.get(a).unwrap().data[0] < 0.0);
    }

    proptest! {
        #[test]
        fn lower_bounds(
            pred in prop::array::uniform3(0.0f64..=1.0),
            target in prop::array::uniform3(0.0f64..=1.0),
            beta in 0.1f64..10.0,
            alpha in 0.0f64..=1.0,
            dens in prop::collection::vec(0.0f64..100.0, 1..16),
        ) {
            prop_assert!(transient_loss(pred, target, beta, alpha, 0.0) >= 0.1f64.ln());
            prop_assert!(coarse_loss(alpha, pred, target) >= 0.0);
            prop_assert!(sparsity_loss(&dens) >= 0.0);
        }

        #[test]
        fn sparsity_strictly_increasing(s in 1e-3f64..50.0, ds in 1e-3f64..1.0) {
            prop_assert!(sparsity_loss(&[s + ds]) > sparsity_loss(&[s]));
            prop_assert!(4.0 * s / (1.0 + 2.0 * s * s) > 0.0);
        }
    }
}
