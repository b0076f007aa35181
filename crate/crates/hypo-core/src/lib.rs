//! Hyperspherical prototypical learning for out-of-distribution
//! generalization, at desk scale.
//!
//! The crate trains an MLP encoder whose L2-normalized embeddings are pulled
//! toward per-class prototypes on the unit sphere (low intra-class variation)
//! while the prototypes repel each other (high inter-class separation), and
//! ships the measurement apparatus to check what that buys: empirical
//! variation and separation estimators (1-D Wasserstein and debiased Sinkhorn
//! divergence), the alignment slack of the trained embeddings, worst
//! environment risk, and executable verifiers for the inequalities and the
//! simplex-ETF geometry the objective is known to satisfy.
//!
//! Modules:
//! - [`geometry`]: sphere primitives and the vMF class posterior
//! - [`model`]: MLP encoder, prototype bank, nearest-prototype classifier
//! - [`loss`]: variation/separation objectives, hard negatives, baselines,
//!   and their analytic gradients
//! - [`gradcheck`]: finite-difference oracle for every gradient path
//! - [`train`]: minibatch SGD trainer with twin augmentations and schedules
//! - [`data`]: synthetic multi-environment dataset generator and CSV I/O
//! - [`metrics`]: Wasserstein/Sinkhorn variation and separation estimators
//! - [`theory`]: inequality verifiers and separation-loss optimality checks
//! - [`checkpoint`]: bit-exact JSON checkpoint round-tripping

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod theory;
pub mod train;

pub use error::{HypoError, Result};
