//! Input gradients, PGD attacks and the corruption suite.

pub mod attack;
pub mod corrupt;
pub mod grad;

pub use attack::{
    attack_dataset, pgd_attack, pgd_step, project_ball, summarize_attacks, AttackCfg, AttackOutcome,
    AttackRecord, AttackSummary, Norm,
};
pub use corrupt::{
    corrupt, corruption_eval, CorruptionGrid, CorruptionKind, CorruptionMatrix, CorruptionSpec,
    SeverityTables,
};
pub use grad::{log_likelihood_fixed, loglik_grad};
