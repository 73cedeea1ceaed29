//! Absorbing skip connections into single-hidden-layer MLPs.
//!
//! A block `x + W_down act(W_up x)` with ReLU or GELU can be rewritten as a
//! skipless block of the same width exactly when some subset `S` of hidden
//! units with `|S| >= d` satisfies `W_down[:, S] W_up[S, :] = -I`. This crate
//! searches for such subsets, builds the rewritten block, checks claimed
//! rewrites numerically and algebraically, and fits approximate rewrites
//! when no exact one exists.

pub mod absorption;
pub mod activation;
pub mod approx;
pub mod block;
pub mod error;
pub mod matrix;
pub mod sampling;
pub mod verification;

pub use absorption::{
    best_subset, characterization, check_subset_product, construct_absorbed, find_absorbing_subset,
    lift_reduced_solution, perturbation_condition, plant_instance, reduce_invertible_skip,
    Characterization, PlantConfig, SearchLimits, SubsetCertificate, Target,
};
pub use activation::ActivationKind;
pub use approx::{fit_approximate, ApproxConfig, ApproxInit, ApproxResult};
pub use block::{Block, BlockKind, Skip, Stack, VectorMap};
pub use error::{Error, Result};
pub use matrix::Matrix;
pub use sampling::{SamplerConfig, Sampling};
pub use verification::{
    algebraic_absorption_check, functional_equality, generic_probe, homogeneity_check,
    origin_jacobian_report, parity_check, planted_control_probe, ProbeStats, VerificationReport,
};
