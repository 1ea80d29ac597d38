//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records operations eagerly; [`Tape::backward`] returns the
//! gradient of a scalar node with respect to every leaf created with
//! [`Tape::param`]. Matrix products go through `matrixmultiply`.
//!
//! ```
//! use sfnerf_tape::{Matrix, Tape};
//!
//! let tape = Tape::<f64>::new();
//! let w = tape.param(Matrix::from_vec(2, 1, vec![0.5, -1.0]));
//! let x = tape.constant(Matrix::from_vec(1, 2, vec![2.0, 3.0]));
//! let loss = x.matmul(w).square().sum();
//! let grads = tape.backward(loss);
//! // d/dw (x·w)^2 = 2 (x·w) x = 2 * (-2) * [2, 3]
//! assert_eq!(grads.get(w).unwrap().data, vec![-8.0, -12.0]);
//! ```

mod matrix;
mod real;
mod tape;

pub use matrix::{gemm_into, matmul, pairwise_sum, Matrix};
pub use real::Real;
pub use tape::{activations, Gradients, Tape, Var};
