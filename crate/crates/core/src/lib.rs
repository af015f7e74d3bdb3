//! Self-supervised terrain representation learning, preference utilities and
//! preference-aligned local planning, exercised on a deterministic synthetic
//! terrain world.
//!
//! The crate is organised bottom-up:
//!
//! - [`worldsim`]: grid world, unicycle kinematics, visual and IPT sensor models.
//! - [`datapipe`]: rollouts, multi-view sample extraction, PSD features, dataset IO.
//! - [`nn`]: dense MLP kernel with exact reverse-mode gradients and AdamW.
//! - [`sterling`]: VICReg-based viewpoint-invariance and multi-modal objectives.
//! - [`preference`]: k-means, silhouette model selection, ranking-based utilities.
//! - [`patern`]: triplet pre-adaptation and proprioceptive preference extrapolation.
//! - [`planner`]: constant-curvature arc planner with terrain-preference costs.
//! - [`evalkit`]: Hausdorff, alignment and clustering metrics, benchmark runner.
//! - [`scenarios`]: the standard synthetic worlds and end-to-end pipelines.
//! - [`audit`]: finite-difference gradient audit over every training loss.
//!
//! Data-parallel loops go through [`par`], which uses rayon when the `parallel`
//! feature is enabled and falls back to sequential iteration otherwise.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod datapipe;
pub mod evalkit;
pub mod linalg;
pub mod nn;
pub mod par;
pub mod patern;
pub mod planner;
pub mod preference;
pub mod rng;
pub mod scenarios;
pub mod sterling;
pub mod worldsim;

pub use linalg::Matrix;
pub use par::ExecMode;
