//! Probability-flow ODE: solvers, divergence estimators, likelihoods.

mod likelihood;
pub mod solver;
pub mod trace;

pub use likelihood::{
    bits_per_dim, dequantize, divergence, log_likelihood, ode_rhs, sample_probe_seed,
    LikelihoodOut, LikelihoodRecord,
};
pub(crate) use likelihood::rhs_and_divergence;
pub use solver::{rk45_integrate, rk4_fixed, OdeSolution, SolverCfg};
pub use trace::{estimate_trace, probe, probe_matrix, ProbeLaw, TraceCfg, TraceMode};
