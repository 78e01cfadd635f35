//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Sized for small transformer decoders on a CPU: every op works on row-major
//! matrices (or vectors), values are `f32` or `f64` through [`Scalar`], and a
//! [`Graph`] records each forward op so [`Graph::backward`] can replay them in
//! reverse.
//!
//! ```
//! use coad_tensor::{Graph, Tensor};
//!
//! let w = Tensor::<f64>::from_f64(&[2, 1], &[0.5, -1.0]).unwrap();
//! let mut g = Graph::new(false, 0);
//! let x = g.input(Tensor::from_f64(&[1, 2], &[2.0, 3.0]).unwrap());
//! let wv = g.param(&w);
//! let y = g.matmul(x, wv).unwrap();
//! let loss = g.sum(y);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(wv).unwrap(), &[2.0, 3.0]);
//! ```

pub mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod optim;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Reduction, Var};
pub use tensor::{DType, Mask, Scalar, Tensor};
