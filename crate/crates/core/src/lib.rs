//! Ambiguity-aware heatmap regression toolkit.
//!
//! The crate is organised as a small pipeline over 2-D discrete
//! distributions on a pixel grid:
//!
//! - [`heatmap`]: grids, logits, softmax normalisation, soft-argmax decoding
//!   and Gaussian rendering.
//! - [`moments`]: weighted mean and covariance of a heatmap and the closed
//!   form 2×2 symmetric eigen-decomposition.
//! - [`losses`]: scalar distances, the plain regression loss, the
//!   ambiguity-guided (principal-axis scaled) loss, eigenvalue restrictions,
//!   the Jensen–Shannon distribution regulariser and a Mahalanobis baseline.
//! - [`gradients`]: exact gradients of the full objective with respect to
//!   logits, plus a finite-difference checker.
//! - [`synthetic`]: a contour-landmark simulator with anisotropic annotation
//!   noise, a linear heatmap predictor, optimizers and the stability,
//!   anisotropy and restriction experiments.
//! - [`metrics`]: NME, CED, failure rate and AUC.

pub mod error;
pub mod gradients;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod moments;
pub mod synthetic;

pub use error::{Error, Result};
pub use heatmap::{DiscreteHeatmap, Grid, Logits, Point};
pub use losses::{DistanceKind, LossConfig, LossParts, Objective, RestrictionMode};
pub use moments::{Covariance2, EigenPair2, Moments, WeightSums};
