use sfnerf_tape::{Matrix, Real};

use super::config::AdamConfig;
use crate::params::{ParamId, ParamSet};

/// Moment estimates of one parameter. Dense parameters keep a single step
/// counter; row-sparse tables keep one per row so bias correction only
/// advances on rows that were actually updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub counts: Vec<u64>,
}

/// Adam with lazy row updates for sparse parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub state: Vec<Moments>,
}

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &ParamSet<T>) -> Self {
        let state = params
            .iter()
            .map(|(_, p)| Moments {
                m: vec![0.0; p.value.len()],
                v: vec![0.0; p.value.len()],
                counts: vec![0; if p.sparse { p.value.rows } else { 1 }],
            })
            .collect();
        Self { config, state }
    }

    /// Applies one step. Parameters without a gradient are left alone;
    /// sparse parameters are updated only on `touched_rows`.
    pub fn step<T: Real>(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &[Option<Matrix<T>>],
        touched_rows: &[usize],
        learning_rate: f64,
    ) {
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let Some(g) = grads[id.0].as_ref() else {
                continue;
            };
            let sparse = params.param(id).sparse;
            let cols = g.cols;
            let Moments { m, v, counts } = &mut self.state[id.0];
            let value = params.value_mut(id);
            let mut update = |range: std::ops::Range<usize>, count: &mut u64| {
                *count += 1;
                let c1 = 1.0 - beta1.powi(*count as i32);
                let c2 = 1.0 - beta2.powi(*count as i32);
                for i in range {
                    let gi = g.data[i].f64();
                    m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                    v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                    let step = learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + epsilon);
                    value.data[i] = T::of(value.data[i].f64() - step);
                }
            };
            if sparse {
                for &r in touched_rows {
                    update(r * cols..(r + 1) * cols, &mut counts[r]);
                }
            } else {
                update(0..g.len(), &mut counts[0]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("w", Matrix::from_f64(1, 2, &[1.0, -1.0]), false);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        adam.step(
            &mut ps,
            &[Some(Matrix::from_f64(1, 2, &[3.0, -0.5]))],
            &[],
            0.1,
        );
        let v = ps.value(id);
        assert!((v.data[0] - 0.9).abs() < 1e-7);
        assert!((v.data[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn untouched_rows_stay_put() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add("table", Matrix::from_f64(3, 2, &[1.0; 6]), true);
        let mut adam = Adam::new(AdamConfig::default(), &ps);
        let g = Matrix::from_f64(3, 2, &[1.0; 6]);
        adam.step(&mut ps, &[Some(g.clone())], &[1], 0.1);
        adam.step(&mut ps, &[Some(g)], &[2], 0.1);
        let v = ps.value(id);
        assert_eq!(v.row(0), &[1.0, 1.0]);
        assert!((v.get(1, 0) - 0.9).abs() < 1e-7);
        assert!((v.get(2, 0) - 0.9).abs() < 1e-7);
        assert_eq!(adam.state[0].counts, vec![0, 1, 1]);
    }
}
