//! Generalized estimating equations for bilateral, multi-frequency outcomes.
//!
//! The crate fits marginal mean models to clustered data where every
//! participant contributes one measurement per (ear, frequency) cell. Besides
//! the usual independence, exchangeable and unstructured working correlations
//! it provides the ear-by-frequency structured correlation
//!
//! ```text
//! rho(p1, p2) = 1 - alpha0 * alpha_ear^[same ear] * alpha_freq^[same frequency]
//! ```
//!
//! whose parameters are estimated from second-order estimating equations
//! (GEE1.5). A Monte Carlo harness compares the structured estimator against
//! worse-ear, average-ear and both-ear comparators.

pub mod cli;
pub mod correlation;
pub mod error;
pub mod estimator;
mod linalg;
pub mod model;
pub mod reduction;
pub mod simulation;

pub use correlation::{
    materialize, moment_estimate, rho_vector_and_jacobian, solve_alpha, AlphaSolution,
    AlphaSolverOptions, AlphaTransformed, CorrelationKind, CorrelationSpec, EarFreqAlpha,
    ResidualVector, ZCovariance,
};
pub use error::{GeeError, Result};
pub use estimator::{
    fit_gee1, fit_gee15, pearson_residuals, sandwich, score, solve_gee, wald_intervals,
    Gee15Options, GeeFit, GeeOptions, WaldInterval,
};
pub use model::{
    expand_design, mean_and_derivative, ClusterData, Covariate, CovariateLevel, Link,
    MeanModelSpec, VarianceFunction,
};
pub use reduction::{average_ear, worse_ear, ReducedCluster, ReductionKind};
pub use simulation::{
    dgp_correlation, run_scenario, simulate_cluster, DgpAlpha, Method, OperatingCharacteristics,
    RunOptions, ScenarioReport, SimulationScenario,
};
