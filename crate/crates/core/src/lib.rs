//! Numerical laboratory for maximal initial learning rates and Hessian
//! sharpness in deep ReLU MLPs.
//!
//! The crate implements, from scratch and in double precision:
//!
//! - bias-free ReLU MLPs with Kaiming / LeCun / NTK initialization
//!   ([`network`]);
//! - exact gradients, Hessian-vector products, a dense-Hessian oracle, and
//!   layer Jacobians ([`autodiff`]);
//! - mini-batch SGD with a per-layer learning-rate policy, full-batch GD,
//!   and the linear-classifier threshold baseline ([`training`]);
//! - the bisection search for the maximal initial learning rate eta*
//!   ([`milr`]);
//! - sharpness (dominant Hessian eigenvalue) by power iteration and
//!   Monte-Carlo estimates of `E||H||_F^2` ([`sharpness`]);
//! - the layer recursion system predicting `E||H_eff||_F^2` for random
//!   Kaiming networks, with brute-force Monte-Carlo verification oracles
//!   ([`theory`]);
//! - synthetic Gaussian classification data and IDX/CIFAR loaders
//!   ([`data`]);
//! - sweep orchestration, power-law fits, and CSV emission ([`analysis`]).

pub mod analysis;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod linalg;
pub mod milr;
pub mod network;
pub mod rng;
pub mod sharpness;
pub mod theory;
pub mod training;

pub use analysis::{FitResult, SweepPlan, SweepRow};
pub use autodiff::{Batch, LossKind, ParamVector};
pub use data::{Dataset, GaussianSpec, Split};
pub use error::{Error, Result};
pub use milr::{MilrConfig, MilrResult};
pub use network::{count_params, init_network, ArchSpec, ForwardTrace, InitScheme, Mlp};
pub use rng::Rng;
pub use sharpness::{FrobeniusStats, SharpnessEstimate};
pub use theory::{RecursionState, TheoryConfig, TheoryPrediction};
pub use training::{TrainConfig, TrainReport};
