//! Two-level hierarchical mixtures of Gaussian experts (HMoE).
//!
//! The crate covers the whole workbench:
//!
//! * [`model`]: mixing measures, softmax/Laplace gating, conditional densities,
//!   ancestral sampling and log-likelihoods for the three gating combinations.
//! * [`estimation`]: the over-specified maximum-likelihood estimator computed
//!   with a generalized EM algorithm.
//! * [`metrics`]: Voronoi cells and losses, Hellinger and total-variation
//!   distances, expert prediction error.
//! * [`polysys`]: the polynomial equation systems that govern over-specified
//!   estimation rates, with a numerical solvability search.
//! * [`ratelab`]: convergence-rate experiments (log-log slope regression).
//! * [`routing`]: the two-level token router with capacity-limited dispatch
//!   and combine tensors.
//! * [`cli`]: the `hmoe` command-line front end.

pub mod cli;
pub mod data;
pub mod error;
pub mod estimation;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod polysys;
pub mod quadrature;
pub mod ratelab;
pub mod rng;
pub mod routing;

pub use error::{HmoeError, Result};
pub use model::{ExpertAtom, GatingCombo, GroupAtom, MixingMeasure};
