//! Named parameter storage and its binding onto a tape.

use std::ops::Index;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use sfnerf_tape::{Matrix, Real, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Real> {
    pub name: String,
    pub value: Matrix<T>,
    /// Row-sparse tables (per-image embeddings) are updated only on the
    /// rows touched by a batch.
    pub sparse: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Real> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>, sparse: bool) -> ParamId {
        let name = name.into();
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Param {
            name,
            value,
            sparse,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Places every parameter on `tape`; those for which `trainable`
    /// returns false become constants.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: impl Fn(ParamId) -> bool) -> Bound<'t, T> {
        let vars = self
            .iter()
            .map(|(id, p)| {
                if trainable(id) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { tape, vars }
    }

    pub fn bind_all<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| true)
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.bind(tape, |_| false)
    }

    /// Same parameters in another precision.
    pub fn convert<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: Matrix::from_f64(p.value.rows, p.value.cols, &p.value.to_f64()),
                    sparse: p.sparse,
                })
                .collect(),
        }
    }
}

/// Tape handles for a [`ParamSet`], indexed by [`ParamId`].
pub struct Bound<'t, T: Real> {
    tape: &'t Tape<T>,
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Real> Bound<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<'t, T: Real> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;
    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

/// Fully connected layer `y = x W + b` with `W` stored `in×out`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    /// Weights and bias drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let w = Matrix::from_fn(inputs, outputs, |_, _| {
            T::of(rng.random_range(-bound..bound))
        });
        let b = Matrix::from_fn(1, outputs, |_, _| T::of(rng.random_range(-bound..bound)));
        Self {
            weight: params.add(format!("{name}.weight"), w, false),
            bias: params.add(format!("{name}.bias"), b, false),
            inputs,
            outputs,
        }
    }

    pub fn apply<'t, T: Real>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Var<'t, T> {
        x.linear(p[self.weight], p[self.bias])
    }

    /// Plain evaluation of one input row.
    pub fn eval_row<T: Real>(&self, params: &ParamSet<T>, x: &[f64]) -> Vec<f64> {
        let w = params.value(self.weight);
        let b = params.value(self.bias);
        (0..self.outputs)
            .map(|o| {
                let mut acc = b.data[o].f64();
                for (i, &xi) in x.iter().enumerate() {
                    acc += xi * w.get(i, o).f64();
                }
                acc
            })
            .collect()
    }
}

/// Embedding table of `rows×dim` drawn from `N(0, scale²)`.
pub fn embedding_table<T: Real>(
    params: &mut ParamSet<T>,
    name: &str,
    rows: usize,
    dim: usize,
    scale: f64,
    rng: &mut impl Rng,
) -> ParamId {
    let normal = Normal::new(0.0, scale).expect("embedding scale must be positive");
    let m = Matrix::from_fn(rows, dim, |_, _| T::of(normal.sample(rng)));
    params.add(name, m, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn fan_in_bounds_respected() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = Dense::new(&mut ps, "l", 16, 8, &mut rng);
        assert!(ps.value(d.weight).data.iter().all(|x| x.abs() < 0.25));
        assert_eq!(ps.value(d.weight).shape(), (16, 8));
        assert_eq!(ps.value(d.bias).shape(), (1, 8));
        assert_eq!(ps.find("l.bias"), Some(d.bias));
    }

    #[test]
    fn frozen_binding_gives_no_gradients() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = Dense::new(&mut ps, "l", 3, 2, &mut rng);
        let tape = Tape::new();
        let b = ps.bind(&tape, |id| id == d.bias);
        let x = tape.constant(Matrix::from_f64(1, 3, &[1.0, 2.0, 3.0]));
        let y = d.apply(&b, x).sum();
        let g = tape.backward(y);
        assert!(g.get(b[d.weight]).is_none());
        assert_eq!(g.get(b[d.bias]).unwrap().data, vec![1.0, 1.0]);
    }

    #[test]
    fn eval_row_matches_tape() {
        let mut ps = ParamSet::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Dense::new(&mut ps, "l", 4, 3, &mut rng);
        let x = [0.1, -0.2, 0.3, 0.7];
        let tape = Tape::new();
        let b = ps.bind_frozen(&tape);
        let y = d.apply(&b, tape.constant(Matrix::from_f64(1, 4, &x)));
        let plain = d.eval_row(&ps, &x);
        for (a, e) in y.value().data.iter().zip(&plain) {
            assert!((a - e).abs() < 1e-14);
        }
    }
}
