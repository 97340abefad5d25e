//! Minimal dense-tensor engine with tape-based reverse-mode differentiation.
//!
//! Values live in row-major [`Tensor`]s. A [`Tape`] records each primitive
//! application (matrix product, permutation, broadcasting arithmetic,
//! reductions, softmax, layer normalization, ...) and [`Tape::backward`]
//! replays it in reverse to produce [`Gradients`] for the leaves created with
//! `requires_grad`.
//!
//! ```
//! use diffcore::{Tape, Tensor};
//!
//! let mut tape = Tape::<f64>::new();
//! let x = tape.param(Tensor::new([2], vec![1.0, 2.0]).unwrap());
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum_all(sq).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
//! ```

mod error;
mod gradcheck;
mod kernels;
mod real;
mod tape;
mod tensor;

pub use error::{DiffError, Result};
pub use gradcheck::{finite_difference_check, finite_difference_check_many, REL_FLOOR};
pub use real::{Precision, Real};
pub use tape::{Binary, Gradients, Primitive, Tape, Unary, Var};
pub use tensor::{numel, Tensor};
