pub mod classify;
pub mod config;
pub mod container;
pub mod data;
pub mod diff;
pub mod error;
pub mod experiments;
pub mod flow;
pub mod rng;
pub mod robust;
pub mod score;
pub mod sde;
pub mod train;

pub use classify::{classify, evaluate_accuracy, marginal_loglik, ClassificationResult};
pub use config::Config;
pub use data::{Dataset, GmmSpec};
pub use error::{Error, Result};
pub use flow::{log_likelihood, LikelihoodOut, SolverCfg, TraceCfg, TraceMode};
pub use robust::{loglik_grad, pgd_attack, AttackCfg, CorruptionKind, CorruptionSpec, Norm};
pub use score::{AnalyticGmmScore, MlpArch, MlpScoreNet, ScoreModel};
pub use sde::{SdeKind, SdeSpec};
pub use train::{train, TrainCfg};
