//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Graphs are rebuilt for every forward pass. Shapes are explicit: the only
//! broadcast is [`Graph::add_bias`] along the trailing axis.
//!
//! ```
//! use usst_numcore::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let sq = g.square(x);
//! let loss = g.sum_all(sq);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, -4.0, 6.0]);
//! ```

mod error;
pub mod gradcheck;
mod graph;
mod kernels;
pub mod selftest;
mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{check_gradients, relative_error, GradCheckConfig, GradCheckReport, InputReport};
pub use graph::{Gradients, Graph, Pointwise, Var};
pub use tensor::Tensor;

/// Additive logit used to exclude attention positions.
pub const MASKED_LOGIT: f64 = -1e9;
