//! Doubly robust estimation of an average treatment effect from a
//! non-probability sample combined with a probability survey sample.
//!
//! Nuisance models are fitted by bias-reduced, SCAD-penalized estimating
//! equations solved with local quadratic approximation and Newton-Raphson
//! (see [`solver::solve_penalized`]). Point estimators live in
//! [`estimators`], standard errors in [`variance`], and the Monte-Carlo
//! designs in [`simulation`].

pub mod cli_io;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod models;
pub mod penalty;
pub mod simulation;
pub mod solver;
pub mod system;
pub mod types;
pub mod variance;

pub use error::{Error, Result};
pub use models::{eval_link, predict, LinkEval, ModelRole};
pub use penalty::{hard_threshold, lqa_diag, penalized_score, scad_q, LqaDiagonal};
pub use solver::{cross_validate, default_grid, newton_block_update, solve_penalized, solve_unpenalized, Block, BlockSystem, CvResult, FitResult, Support};
pub use system::{jacobian_eta, jacobian_mu, partial_o, partial_q, phi, score_u, score_u_joint, BlockJacobian, ScoreVector};
pub use types::{derive_pop_size, validate, CombinedDataset, Link, ModelSpec, NuisanceParams, OutcomeKind, Parameterization, PenaltyConfig, UnitRecord, Violation};
pub use estimators::{estimate_dr, estimate_dr_joint, estimate_ipw, estimate_or, estimate_roster, estimate_set, EstimateConfig, EstimatorKind, OracleSupport};
pub use variance::{dr_se, sandwich_penalized, sandwich_unpenalized, v1_hat, v2_hat, AteReport, VarianceParts};
pub use simulation::{compute_metrics, draw_samples, generate_joint_case, generate_population, run_replications, CaseSpec, Metrics, ReplicationResult};
