//! Consistency-based semi-supervised training with SWA and fast-SWA weight
//! averaging, plus tools for looking at the loss surface around the
//! solutions it finds.
//!
//! ```
//! use fastswa::nets::{init_mlp, forward, MlpSpec};
//! use fastswa::autodiff::Tensor;
//!
//! let spec = MlpSpec::new(vec![2, 8, 2], 0.0)?;
//! let w = init_mlp(&spec, 7);
//! let x = Tensor::matrix(3, 2, vec![0.0, 1.0, 1.0, 0.0, -1.0, 0.5])?;
//! let p = forward(&w, &spec, &x, None, 0)?;
//! assert_eq!(p.len(), 3);
//! # Ok::<(), fastswa::Error>(())
//! ```

pub mod autodiff;
pub mod averaging;
pub mod config;
pub mod consistency;
pub mod data;
pub mod experiment;
pub mod geometry;
pub mod metrics;
pub mod nets;
pub mod rng;
pub mod schedule;

mod error;

pub use error::{Error, Result};
