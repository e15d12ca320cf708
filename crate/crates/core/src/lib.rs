//! Semi-supervised multi-target regression with disentangled feature
//! subspaces.
//!
//! An encoder maps inputs to features `Z`; a regressor maps `Z` to `M`
//! targets. A Jacobian penalty pushes each feature dimension to influence a
//! single target, after which a binary mask splits `Z` into one subspace per
//! target. Labeled batches train the regressor and a per-subspace contrastive
//! loss; unlabeled batches get pseudo ranks from spectral seriation of each
//! subspace and are trained to respect them.
//!
//! ```
//! use dscl::autodiff::Graph;
//! use dscl::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::vector(vec![1.0, -2.0, 3.0]));
//! let sq = g.square(x);
//! let loss = g.sum(sq);
//! g.backward(loss).unwrap();
//! assert_eq!(g.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
//! ```

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod disentangle;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod ranking;
pub mod tensor;

pub use error::{DsclError, Result};

/// Chapters of the guide in `book/`, compiled so their examples run as
/// doctests.
#[cfg(doctest)]
pub mod book {
    #[doc = include_str!("../../../book/src/configuration.md")]
    pub mod configuration {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    pub mod autodiff {}
    #[doc = include_str!("../../../book/src/subspaces.md")]
    pub mod subspaces {}
    #[doc = include_str!("../../../book/src/ranking.md")]
    pub mod ranking {}
    #[doc = include_str!("../../../book/src/training.md")]
    pub mod training {}
}
