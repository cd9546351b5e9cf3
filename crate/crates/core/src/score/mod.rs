//! Score models `s(x, t, y) ≈ ∇ₓ log p_t(x | y)`.

mod analytic;
mod checkpoint;
mod mlp;

pub use analytic::{analytic_gaussian_score, AnalyticGmmScore, ClassMixture, Component};
pub(crate) use analytic::log_sum_exp;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use mlp::{time_embedding, Activation, MlpArch, MlpScoreNet, TapeForward, DEFAULT_TIME_EMBED_DIM};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::sde::SdeSpec;

/// Evaluation contract for a (class-conditional) score field.
///
/// Besides the score itself, likelihood computation needs Jacobian-vector
/// products (for the divergence) and gradients of the divergence (for
/// differentiating likelihoods with respect to the input), so models
/// expose both.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Number of classes; `y` must be below this.
    fn num_classes(&self) -> usize;

    fn sde(&self) -> &SdeSpec;

    fn score(&self, x: &[f64], t: f64, y: Option<usize>) -> Result<Vec<f64>>;

    /// The score together with `J ε` for every probe row `ε`, where `J = ∂s/∂x`.
    fn score_jvp(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        probes: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)>;

    /// `Jᵀ c + w · Σ_k ∇ₓ(ε_kᵀ J ε_k)` for cotangent `c`, probe rows `ε_k`
    /// and weight `w`.
    fn score_adjoint(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        cotangent: &[f64],
        probes: &Array2<f64>,
        probe_weight: f64,
    ) -> Result<Vec<f64>>;
}

pub(crate) fn check_label(y: Option<usize>, num_classes: usize) -> Result<()> {
    match y {
        Some(y) if y >= num_classes => Err(Error::out_of_range(
            "class label",
            y as f64,
            format!("[0, {num_classes})"),
        )),
        _ => Ok(()),
    }
}

pub(crate) fn check_probes(dim: usize, probes: &Array2<f64>) -> Result<()> {
    if probes.nrows() > 0 && probes.ncols() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: probes.ncols(),
        });
    }
    Ok(())
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn sde(&self) -> &SdeSpec {
        (**self).sde()
    }
    fn score(&self, x: &[f64], t: f64, y: Option<usize>) -> Result<Vec<f64>> {
        (**self).score(x, t, y)
    }
    fn score_jvp(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        probes: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        (**self).score_jvp(x, t, y, probes)
    }
    fn score_adjoint(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        cotangent: &[f64],
        probes: &Array2<f64>,
        probe_weight: f64,
    ) -> Result<Vec<f64>> {
        (**self).score_adjoint(x, t, y, cotangent, probes, probe_weight)
    }
}

impl ScoreModel for Box<dyn ScoreModel> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn sde(&self) -> &SdeSpec {
        (**self).sde()
    }
    fn score(&self, x: &[f64], t: f64, y: Option<usize>) -> Result<Vec<f64>> {
        (**self).score(x, t, y)
    }
    fn score_jvp(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        probes: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        (**self).score_jvp(x, t, y, probes)
    }
    fn score_adjoint(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        cotangent: &[f64],
        probes: &Array2<f64>,
        probe_weight: f64,
    ) -> Result<Vec<f64>> {
        (**self).score_adjoint(x, t, y, cotangent, probes, probe_weight)
    }
}
