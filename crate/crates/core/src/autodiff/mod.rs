//! Dense reverse-mode automatic differentiation.
//!
//! Build a [`Tape`] with [`Tape::builder`], bind named leaves, run
//! [`evaluate`] and then [`backward`] with cotangent seeds on named outputs.
//!
//! ```
//! use std::collections::BTreeMap;
//! use fastswa::autodiff::{backward, evaluate, Tape, Tensor};
//!
//! let mut b = Tape::builder();
//! let x = b.leaf("x", &[3]).unwrap();
//! let sq = b.square(x);
//! let y = b.sum(sq);
//! b.output("y", y);
//! let tape = b.build();
//!
//! let mut inputs = BTreeMap::new();
//! inputs.insert("x".to_string(), Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap().with_grad());
//! let eval = evaluate(&tape, &inputs).unwrap();
//! assert_eq!(eval.output("y").unwrap().values(), &[14.0]);
//!
//! let mut seed = BTreeMap::new();
//! seed.insert("y".to_string(), Tensor::scalar(1.0).unwrap());
//! let grads = backward(&tape, &eval, &seed).unwrap();
//! assert_eq!(grads["x"].values(), &[2.0, 4.0, 6.0]);
//! ```

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_gradient, max_relative_error};
pub use tape::{backward, evaluate, Evaluation, NodeId, Tape, TapeBuilder};
pub use tensor::Tensor;
