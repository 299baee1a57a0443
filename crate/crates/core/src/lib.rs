//! Latent neural SDEs with a variational posterior drift: Euler–Maruyama
//! simulation, pathwise and Euler-backprop gradients, free-energy fitting and
//! closed-form Gaussian oracles.

pub mod backprop;
pub mod checks;
pub mod error;
pub mod experiment;
pub mod fields;
pub mod model;
pub mod oracle;
pub mod paths;
pub mod rng;
pub mod sensitivity;
pub mod solver;
pub mod variational;

pub use backprop::{euler_backward, euler_forward, euler_forward_with, EulerTape, TapeOptions};
pub use error::{Error, Result};
pub use fields::{Activation, Architecture, ParamVector, VectorField};
pub use model::{CostCounters, CostReport, LatentModel, ModelSystem};
pub use paths::{sample_wiener, shift_path, DriftShift, NoisePath, TimeMesh};
pub use sensitivity::{build_augmented, pathwise_gradients, AugmentedState, PathwiseResult};
pub use solver::{sde_solve, solve_terminal, SdeProblem, SdeSystem, Trajectory};
pub use variational::{
    free_energy, gd_fit, grad_free_energy, kl_term, BetaSharing, FitConfig, FreeEnergyReport,
    GaussianObservation, GradientEngine, MonteCarlo, ObservationModel, SeedPolicy,
    VariationalObjective,
};
pub use oracle::{
    follmer_affine_drift, follmer_mc_drift, follmer_sample, fundamental_matrix, terminal_law,
    GaussianLaw, LinearSdeSpec,
};
