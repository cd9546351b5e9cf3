//! Input gradients of log-likelihoods by differentiating a fixed-grid RK4
//! solve of the augmented probability-flow ODE (discretize, then
//! differentiate).

use ndarray::Array2;

use crate::error::{check_dim, check_finite, Error, Result};
use crate::flow::trace::{probe_matrix, probe_weight, TraceCfg, TraceMode};
use crate::flow::{rhs_and_divergence, LikelihoodOut};
use crate::score::ScoreModel;

/// Largest dimension for which the gradient path defaults to exact traces.
pub const EXACT_TRACE_MAX_DIM: usize = 16;

const RK4_B: [f64; 4] = [1.0 / 6.0, 2.0 / 6.0, 2.0 / 6.0, 1.0 / 6.0];

/// Probe block and weight for the fixed-grid path: `tcfg` if given, else
/// exact traces up to [`EXACT_TRACE_MAX_DIM`].
pub fn fixed_grid_probes(dim: usize, tcfg: Option<&TraceCfg>) -> Result<(Array2<f64>, f64)> {
    let cfg = match tcfg {
        Some(c) => c.clone(),
        None if dim <= EXACT_TRACE_MAX_DIM => TraceCfg::exact(),
        None => {
            return Err(Error::config(format!(
                "dimension {dim} exceeds the exact-trace limit {EXACT_TRACE_MAX_DIM}; pass a Hutchinson probe config"
            )))
        }
    };
    let probes = probe_matrix(dim, &cfg)?;
    let w = probe_weight(cfg.mode, probes.nrows());
    Ok((probes, w))
}

/// Grid exponent: `t` runs uniformly in `u = t^(1/p)`, packing steps
/// toward `t_eps` where the score changes fastest.
pub const GRID_POWER: f64 = 2.0;

/// `n + 1` times from `t0` to `t1`, uniform in `t^(1/GRID_POWER)`.
pub fn time_grid(t0: f64, t1: f64, n: usize) -> Vec<f64> {
    let (u0, u1) = (t0.powf(1.0 / GRID_POWER), t1.powf(1.0 / GRID_POWER));
    let mut g: Vec<f64> = (0..=n)
        .map(|k| (u0 + (u1 - u0) * k as f64 / n as f64).powf(GRID_POWER))
        .collect();
    g[0] = t0;
    g[n] = t1;
    g
}

/// Stage inputs of one RK4 step, kept for the reverse sweep.
struct Step {
    t: f64,
    h: f64,
    stages: [Vec<f64>; 4],
}

struct Forward {
    steps: Vec<Step>,
    out: LikelihoodOut,
}

fn forward<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &[f64],
    y: Option<usize>,
    n_steps: usize,
    probes: &Array2<f64>,
    w: f64,
) -> Result<Forward> {
    let d = model.dim();
    check_dim(d, x0.len())?;
    if n_steps < 8 {
        return Err(Error::config("fixed_steps must be at least 8"));
    }
    let spec = *model.sde();
    let grid = time_grid(spec.t_eps, spec.t_max, n_steps);
    let mut x = x0.to_vec();
    let mut ell = 0.0;
    let mut steps = Vec::with_capacity(n_steps);
    for n in 0..n_steps {
        let t = grid[n];
        let h = grid[n + 1] - t;
        let offsets = [0.0, 0.5 * h, 0.5 * h, h];
        let mut stages: [Vec<f64>; 4] = Default::default();
        let mut ks: Vec<Vec<f64>> = Vec::with_capacity(4);
        let mut xn = x.clone();
        for i in 0..4 {
            let xi: Vec<f64> = if i == 0 {
                x.clone()
            } else {
                x.iter().zip(&ks[i - 1]).map(|(a, k)| a + offsets[i] * k).collect()
            };
            let (k, div) = rhs_and_divergence(model, &xi, t + offsets[i], y, probes, w)?;
            for j in 0..d {
                xn[j] += h * RK4_B[i] * k[j];
            }
            ell += h * RK4_B[i] * div;
            ks.push(k);
            stages[i] = xi;
        }
        if xn.iter().any(|v| !v.is_finite()) || !ell.is_finite() {
            return Err(Error::NonFinite(format!("fixed-grid state at t = {}", t + h)));
        }
        x = xn;
        steps.push(Step { t, h, stages });
    }
    let prior = spec.prior_logpdf(&x);
    let out = LikelihoodOut {
        logp: prior + ell,
        prior_term: prior,
        div_integral: ell,
        x_terminal: x,
        nfe: 4 * n_steps,
    };
    Ok(Forward { steps, out })
}

/// `log p₀(x₀ | y)` on the fixed RK4 grid.
pub fn log_likelihood_fixed<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &[f64],
    y: Option<usize>,
    n_steps: usize,
    tcfg: Option<&TraceCfg>,
) -> Result<LikelihoodOut> {
    let (probes, w) = fixed_grid_probes(model.dim(), tcfg)?;
    forward(model, x0, y, n_steps, &probes, w).map(|f| f.out)
}

/// `J_fᵀ v + c ∇ₓ div f` for the probability-flow field `f`.
fn field_adjoint<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    t: f64,
    y: Option<usize>,
    v: &[f64],
    c: f64,
    probes: &Array2<f64>,
    w: f64,
) -> Result<Vec<f64>> {
    let spec = model.sde();
    let g2 = spec.diffusion_sq(t)?;
    // the drift is linear and diagonal, hence self-adjoint with a constant divergence
    let drift_v = spec.drift(v, t)?;
    let s_adj = model.score_adjoint(x, t, y, v, probes, c * w)?;
    Ok(drift_v.iter().zip(&s_adj).map(|(a, b)| a - 0.5 * g2 * b).collect())
}

/// Fixed-grid `log p₀(x | y)` and its gradient with respect to `x`.
pub fn loglik_grad<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    y: Option<usize>,
    n_steps: usize,
    tcfg: Option<&TraceCfg>,
) -> Result<(LikelihoodOut, Vec<f64>)> {
    let (probes, w) = fixed_grid_probes(model.dim(), tcfg)?;
    let fwd = forward(model, x, y, n_steps, &probes, w)?;
    let d = model.dim();
    // ∂/∂x_N of the standard-normal prior log-density
    let mut a: Vec<f64> = fwd.out.x_terminal.iter().map(|v| -v).collect();
    for step in fwd.steps.iter().rev() {
        let h = step.h;
        let offsets = [0.0, 0.5 * h, 0.5 * h, h];
        let mut stage_bar: [Vec<f64>; 4] = Default::default();
        let mut carry = vec![0.0; d];
        for i in (0..4).rev() {
            // k̄_i = b_i h ā + (offset of stage i+1) · X̄_{i+1}
            let kbar: Vec<f64> = (0..d).map(|j| RK4_B[i] * h * a[j] + carry[j]).collect();
            let xbar = field_adjoint(
                model,
                &step.stages[i],
                step.t + offsets[i],
                y,
                &kbar,
                RK4_B[i] * h,
                &probes,
                w,
            )?;
            if i > 0 {
                carry = xbar.iter().map(|v| offsets[i] * v).collect();
            }
            stage_bar[i] = xbar;
        }
        for sb in &stage_bar {
            for j in 0..d {
                a[j] += sb[j];
            }
        }
    }
    check_finite("log-likelihood gradient", &a)?;
    Ok((fwd.out, a))
}

/// Whether `tcfg` requests basis probes.
pub fn is_exact(tcfg: Option<&TraceCfg>, dim: usize) -> bool {
    match tcfg {
        Some(c) => c.mode == TraceMode::Exact,
        None => dim <= EXACT_TRACE_MAX_DIM,
    }
}
