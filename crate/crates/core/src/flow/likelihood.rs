//! Likelihoods from the probability-flow ODE via the instantaneous
//! change-of-variables formula.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::solver::{rk45_integrate, SolverCfg};
use super::trace::{probe_matrix, probe_weight, TraceCfg, TraceMode};
use crate::error::{check_dim, Error, Result};
use crate::rng;
use crate::score::ScoreModel;

/// `f(x, t) − ½ g(t)² s(x, t, y)`.
pub fn ode_rhs<M: ScoreModel + ?Sized>(model: &M, x: &[f64], t: f64, y: Option<usize>) -> Result<Vec<f64>> {
    let spec = model.sde();
    let s = model.score(x, t, y)?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score at t = {t}")));
    }
    let g2 = spec.diffusion_sq(t)?;
    let drift = spec.drift(x, t)?;
    Ok(drift.iter().zip(&s).map(|(f, s)| f - 0.5 * g2 * s).collect())
}

/// The rhs together with its divergence estimate over the given probes.
pub(crate) fn rhs_and_divergence<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    t: f64,
    y: Option<usize>,
    probes: &Array2<f64>,
    weight: f64,
) -> Result<(Vec<f64>, f64)> {
    let spec = model.sde();
    let (s, js) = model.score_jvp(x, t, y, probes)?;
    if s.iter().chain(js.iter()).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score or probe product at t = {t}")));
    }
    let g2 = spec.diffusion_sq(t)?;
    let drift = spec.drift(x, t)?;
    let rhs = drift.iter().zip(&s).map(|(f, s)| f - 0.5 * g2 * s).collect();
    let mut div = 0.0;
    for (eps, jeps) in probes.rows().into_iter().zip(js.rows()) {
        // the drift is linear in x, so its Jacobian applied to ε is drift(ε)
        let fe = spec.drift(eps.as_slice().expect("standard layout"), t)?;
        let quad: f64 = eps
            .iter()
            .zip(&fe)
            .zip(jeps.iter())
            .map(|((e, f), je)| e * (f - 0.5 * g2 * je))
            .sum();
        div += quad;
    }
    Ok((rhs, div * weight))
}

/// Divergence of the probability-flow vector field at `(x, t)`.
pub fn divergence<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    t: f64,
    y: Option<usize>,
    tcfg: &TraceCfg,
) -> Result<f64> {
    check_dim(model.dim(), x.len())?;
    let probes = probe_matrix(model.dim(), tcfg)?;
    let w = probe_weight(tcfg.mode, probes.nrows());
    rhs_and_divergence(model, x, t, y, &probes, w).map(|(_, d)| d)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodOut {
    /// `prior_term + div_integral`, in nats.
    pub logp: f64,
    pub prior_term: f64,
    pub div_integral: f64,
    pub x_terminal: Vec<f64>,
    pub nfe: usize,
}

impl LikelihoodOut {
    fn new(prior_term: f64, div_integral: f64, x_terminal: Vec<f64>, nfe: usize) -> Self {
        Self {
            logp: prior_term + div_integral,
            prior_term,
            div_integral,
            x_terminal,
            nfe,
        }
    }
}

/// Per-sample seed for the probe stream. Deliberately independent of the
/// class, so every class of a sample sees the same probes.
pub fn sample_probe_seed(root: u64, sample_id: usize) -> u64 {
    rng::derive_seed(root, "sample-probes", &[sample_id as u64])
}

/// `log p₀(x₀ | y)`: integrates `[x, ∫div]` from `t_eps` to `T` with the
/// adaptive solver and adds the prior log-density of the endpoint. Probes
/// are drawn from `tcfg.seed` and held fixed for the whole solve.
pub fn log_likelihood<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &[f64],
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
    y: Option<usize>,
) -> Result<LikelihoodOut> {
    let d = model.dim();
    check_dim(d, x0.len())?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input x0".into()));
    }
    let probes = probe_matrix(d, tcfg)?;
    let w = probe_weight(tcfg.mode, probes.nrows());
    let spec = model.sde();
    let mut state = x0.to_vec();
    state.push(0.0);
    let sol = rk45_integrate(
        |t, z| {
            let (mut rhs, div) = rhs_and_divergence(model, &z[..d], t, y, &probes, w)?;
            rhs.push(div);
            Ok(rhs)
        },
        &state,
        spec.t_eps,
        spec.t_max,
        cfg,
    )?;
    let x_t = sol.y[..d].to_vec();
    let prior = spec.prior_logpdf(&x_t);
    Ok(LikelihoodOut::new(prior, sol.y[d], x_t, sol.nfe))
}

/// One NDJSON line of per-sample likelihood output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LikelihoodRecord {
    pub sample_id: usize,
    pub label: Option<usize>,
    pub y_cond: Option<usize>,
    pub logp: f64,
    pub prior_term: f64,
    pub div_integral: f64,
    pub nfe: usize,
    pub n_probes: usize,
    pub mode: TraceMode,
}

impl LikelihoodRecord {
    pub fn new(
        sample_id: usize,
        label: Option<usize>,
        y_cond: Option<usize>,
        out: &LikelihoodOut,
        tcfg: &TraceCfg,
        dim: usize,
    ) -> Self {
        Self {
            sample_id,
            label,
            y_cond,
            logp: out.logp,
            prior_term: out.prior_term,
            div_integral: out.div_integral,
            nfe: out.nfe,
            n_probes: tcfg.effective_probes(dim),
            mode: tcfg.mode,
        }
    }
}

/// `(x + u) / levels` per coordinate.
pub fn dequantize(x_int: &[u32], levels: u32, u: &[f64]) -> Result<Vec<f64>> {
    check_dim(x_int.len(), u.len())?;
    if levels < 2 {
        return Err(Error::out_of_range("levels", levels as f64, "[2, inf)"));
    }
    x_int
        .iter()
        .zip(u)
        .map(|(&q, &ui)| {
            if q >= levels {
                return Err(Error::out_of_range("quantized value", q as f64, format!("[0, {levels})")));
            }
            if !(0.0..1.0).contains(&ui) {
                return Err(Error::out_of_range("dequantization noise", ui, "[0, 1)"));
            }
            Ok((q as f64 + ui) / levels as f64)
        })
        .collect()
}

/// Bits per dimension of a density over `[0, 1)^D` evaluated on data
/// dequantized from `levels` bins.
pub fn bits_per_dim(logp: f64, dim: usize, levels: u32) -> Result<f64> {
    if levels < 2 {
        return Err(Error::out_of_range("levels", levels as f64, "[2, inf)"));
    }
    Ok(-logp / (dim as f64 * std::f64::consts::LN_2) + (levels as f64).log2())
}

