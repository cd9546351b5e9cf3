//! Projected gradient attacks on the likelihood classifier.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::grad::{loglik_grad, EXACT_TRACE_MAX_DIM};
use crate::classify::{argmax, classify, log_sum_exp};
use crate::data::Dataset;
use crate::error::{check_dim, Error, Result};
use crate::flow::{sample_probe_seed, SolverCfg, TraceCfg};
use crate::rng;
use crate::score::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    L2,
}

impl std::str::FromStr for Norm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "linf" | "inf" => Ok(Norm::Linf),
            "l2" => Ok(Norm::L2),
            other => Err(Error::config(format!("unknown norm {other:?}"))),
        }
    }
}

/// ℓ∞ budget as a fraction of the data range.
pub const LINF_EPS_FRACTION: f64 = 8.0 / 255.0;
pub const L2_EPS: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackCfg {
    pub norm: Norm,
    /// Budget in model-input units.
    pub eps: f64,
    /// `None` means `eps / 4`.
    pub step_size: Option<f64>,
    pub n_steps: usize,
    pub random_start: bool,
    /// RK4 steps of the differentiated likelihood solve.
    pub fixed_steps: usize,
    /// Stop once the fixed-grid prediction is wrong by at least this many
    /// nats.
    pub early_stop_margin: Option<f64>,
    pub seed: u64,
}

impl Default for AttackCfg {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: LINF_EPS_FRACTION,
            step_size: None,
            n_steps: 40,
            random_start: false,
            fixed_steps: 32,
            early_stop_margin: Some(0.05),
            seed: 0,
        }
    }
}

impl AttackCfg {
    /// Default ℓ∞ attack for data spanning `range`.
    pub fn linf(range: f64) -> Self {
        Self {
            eps: LINF_EPS_FRACTION * range,
            ..Self::default()
        }
    }

    pub fn l2() -> Self {
        Self {
            norm: Norm::L2,
            eps: L2_EPS,
            ..Self::default()
        }
    }

    pub fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.eps / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eps >= 0.0) || !self.eps.is_finite() {
            return Err(Error::out_of_range("eps", self.eps, "[0, inf)"));
        }
        if self.eps > 0.0 && !(self.step() > 0.0 && self.step().is_finite()) {
            return Err(Error::out_of_range("step_size", self.step(), "(0, inf)"));
        }
        if self.n_steps == 0 {
            return Err(Error::config("n_steps must be at least 1"));
        }
        if self.fixed_steps < 8 {
            return Err(Error::config("fixed_steps must be at least 8"));
        }
        if let Some(m) = self.early_stop_margin {
            if !(m >= 0.0) {
                return Err(Error::out_of_range("early_stop_margin", m, "[0, inf)"));
            }
        }
        Ok(())
    }
}

pub fn linf_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Nearest point of the `norm` ball of radius `eps` around `x0`.
pub fn project_ball(x: &[f64], x0: &[f64], norm: Norm, eps: f64) -> Vec<f64> {
    match norm {
        Norm::Linf => x
            .iter()
            .zip(x0)
            .map(|(v, c)| v.clamp(c - eps, c + eps))
            .collect(),
        Norm::L2 => {
            let r = l2_dist(x, x0);
            if r <= eps {
                x.to_vec()
            } else {
                let k = eps / r;
                x.iter().zip(x0).map(|(v, c)| c + k * (v - c)).collect()
            }
        }
    }
}

/// Unprojected ascent step along `g`: sign for ℓ∞, unit direction for ℓ2.
pub fn pgd_step(x: &[f64], g: &[f64], norm: Norm, step: f64) -> Vec<f64> {
    match norm {
        Norm::Linf => x
            .iter()
            .zip(g)
            .map(|(v, gi)| {
                let s = if *gi > 0.0 {
                    1.0
                } else if *gi < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                v + step * s
            })
            .collect(),
        Norm::L2 => {
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return x.to_vec();
            }
            x.iter().zip(g).map(|(v, gi)| v + step * gi / n).collect()
        }
    }
}

fn in_domain(x: &[f64], domain: (f64, f64)) -> bool {
    x.iter().all(|v| *v >= domain.0 && *v <= domain.1)
}

/// Attack loss at `x`: the log posterior `ℓ_y − LSE(ℓ)` of the true class
/// (negative cross-entropy), its gradient and the class log-likelihoods.
pub fn attack_loss<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    y_true: usize,
    fixed_steps: usize,
    grad_trace: Option<&TraceCfg>,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let k = model.num_classes();
    let mut logps = Vec::with_capacity(k);
    let mut grads = Vec::with_capacity(k);
    for y in 0..k {
        let (out, g) = loglik_grad(model, x, Some(y), fixed_steps, grad_trace)?;
        logps.push(out.logp);
        grads.push(g);
    }
    let lse = log_sum_exp(&logps);
    let mut g = grads[y_true].clone();
    for (l, gy) in logps.iter().zip(&grads) {
        let p = (l - lse).exp();
        for (a, b) in g.iter_mut().zip(gy) {
            *a -= p * b;
        }
    }
    Ok((logps[y_true] - lse, g, logps))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub x_adv: Vec<f64>,
    pub success: bool,
    /// Adaptive-solver prediction at `x_adv`.
    pub y_pred_adv: Option<usize>,
    /// Attack loss before each update and at the final iterate.
    pub trace: Vec<f64>,
    /// Updates applied.
    pub steps: usize,
    pub failure: Option<String>,
}

impl AttackOutcome {
    pub fn final_loss(&self) -> f64 {
        self.trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Probes for the differentiated solves: exact up to
/// [`EXACT_TRACE_MAX_DIM`], else the (frozen) probes of `tcfg`.
fn grad_trace(dim: usize, tcfg: &TraceCfg) -> Option<TraceCfg> {
    (dim > EXACT_TRACE_MAX_DIM).then(|| tcfg.clone())
}

/// PGD on the negative cross-entropy of the class log-likelihoods, kept
/// inside `B(x0, eps) ∩ domain`. Success is judged by the adaptive
/// classifier under `cfg`/`tcfg`.
pub fn pgd_attack<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &[f64],
    y_true: usize,
    domain: (f64, f64),
    acfg: &AttackCfg,
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
) -> Result<AttackOutcome> {
    acfg.validate()?;
    check_dim(model.dim(), x0.len())?;
    if y_true >= model.num_classes() {
        return Err(Error::out_of_range(
            "y_true",
            y_true as f64,
            format!("[0, {})", model.num_classes()),
        ));
    }
    if !in_domain(x0, domain) {
        return Err(Error::config("attack start point lies outside the data domain"));
    }
    let gt = grad_trace(model.dim(), tcfg);
    let eps = acfg.eps;
    let step = acfg.step();
    let tol = 1e-12 * (1.0 + eps);
    let mut x = x0.to_vec();
    if acfg.random_start && eps > 0.0 {
        x = random_start(x0, acfg, domain);
    }
    let mut trace = Vec::new();
    let mut steps = 0;
    let mut failure = None;
    if eps > 0.0 {
        loop {
            let (loss, g, logps) = match attack_loss(model, &x, y_true, acfg.fixed_steps, gt.as_ref()) {
                Ok(v) => v,
                Err(e) => {
                    failure = Some(format!("gradient at step {steps}: {e}"));
                    break;
                }
            };
            trace.push(loss);
            let pred = argmax(&logps);
            let fooled = acfg
                .early_stop_margin
                .is_some_and(|m| pred != y_true && logps[pred] - logps[y_true] >= m);
            if fooled || steps == acfg.n_steps {
                break;
            }
            // `g` ascends the log posterior; the attack descends it
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            let cand = pgd_step(&x, &neg, acfg.norm, step);
            let next: Vec<f64> = project_ball(&cand, x0, acfg.norm, eps)
                .into_iter()
                .map(|v| v.clamp(domain.0, domain.1))
                .collect();
            let d = match acfg.norm {
                Norm::Linf => linf_dist(&next, x0),
                Norm::L2 => l2_dist(&next, x0),
            };
            if d > eps + tol || !in_domain(&next, domain) {
                return Err(Error::config(format!(
                    "PGD iterate left the feasible set at step {steps} (distance {d}, eps {eps})"
                )));
            }
            x = next;
            steps += 1;
        }
    }
    let r = classify(model, &x, cfg, tcfg);
    Ok(AttackOutcome {
        success: r.predicted != Some(y_true),
        y_pred_adv: r.predicted,
        x_adv: x,
        trace,
        steps,
        failure,
    })
}

fn random_start(x0: &[f64], acfg: &AttackCfg, domain: (f64, f64)) -> Vec<f64> {
    let mut r = rng::stream(acfg.seed, "pgd-start", &[]);
    let eps = acfg.eps;
    let x: Vec<f64> = match acfg.norm {
        Norm::Linf => x0
            .iter()
            .map(|c| c + eps * (2.0 * r.random::<f64>() - 1.0))
            .collect(),
        Norm::L2 => {
            let dir: Vec<f64> = (0..x0.len()).map(|_| r.sample(StandardNormal)).collect();
            let n = dir.iter().map(|v: &f64| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let rad = eps * r.random::<f64>().powf(1.0 / x0.len() as f64);
            x0.iter().zip(&dir).map(|(c, d)| c + rad * d / n).collect()
        }
    };
    x.into_iter().map(|v| v.clamp(domain.0, domain.1)).collect()
}

/// One NDJSON line of an attack run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub sample_id: usize,
    pub y_true: usize,
    pub y_pred_clean: Option<usize>,
    pub y_pred_adv: Option<usize>,
    pub norm: Norm,
    pub eps: f64,
    pub steps: usize,
    pub final_loss: f64,
    pub linf_dist: f64,
    pub l2_dist: f64,
    pub success: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub norm: Norm,
    pub eps: f64,
    pub n: usize,
    pub clean_accuracy: f64,
    pub adversarial_accuracy: f64,
    pub n_failed: usize,
    /// Every adversarial input lies in its budget ball and the domain.
    pub all_within_budget: bool,
}

/// Attacks every sample of `data` in parallel. Samples the clean classifier
/// already gets wrong are recorded without attacking. Each sample uses its
/// own derived probe seed for the final classification and any Hutchinson
/// gradients.
pub fn attack_dataset<M: ScoreModel + ?Sized>(
    model: &M,
    data: &Dataset,
    acfg: &AttackCfg,
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
) -> Result<Vec<AttackRecord>> {
    acfg.validate()?;
    check_dim(model.dim(), data.dim())?;
    let domain = data.model_domain();
    (0..data.len())
        .into_par_iter()
        .map(|i| {
            let x0 = data.model_input(i, tcfg.seed)?;
            let local = tcfg.with_seed(sample_probe_seed(tcfg.seed, i));
            let y = data.labels[i];
            let clean = classify(model, &x0, cfg, &local);
            let (x_adv, y_pred_adv, steps, trace, failure) = if clean.predicted == Some(y) {
                let a = AttackCfg {
                    seed: rng::derive_seed(acfg.seed, "pgd-sample", &[i as u64]),
                    ..acfg.clone()
                };
                let o = pgd_attack(model, &x0, y, domain, &a, cfg, &local)?;
                (o.x_adv, o.y_pred_adv, o.steps, o.trace, o.failure)
            } else {
                (x0.clone(), clean.predicted, 0, Vec::new(), clean.failure.clone())
            };
            Ok(AttackRecord {
                sample_id: i,
                y_true: y,
                y_pred_clean: clean.predicted,
                success: y_pred_adv != Some(y),
                y_pred_adv,
                norm: acfg.norm,
                eps: acfg.eps,
                steps,
                final_loss: trace.last().copied().unwrap_or(f64::NAN),
                linf_dist: linf_dist(&x_adv, &x0),
                l2_dist: l2_dist(&x_adv, &x0),
                failure,
            })
        })
        .collect()
}

pub fn summarize_attacks(records: &[AttackRecord], acfg: &AttackCfg) -> AttackSummary {
    let n = records.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let tol = 1e-12 * (1.0 + acfg.eps);
    AttackSummary {
        norm: acfg.norm,
        eps: acfg.eps,
        n,
        clean_accuracy: frac(records.iter().filter(|r| r.y_pred_clean == Some(r.y_true)).count()),
        adversarial_accuracy: frac(records.iter().filter(|r| !r.success).count()),
        n_failed: records.iter().filter(|r| r.failure.is_some()).count(),
        all_within_budget: records.iter().all(|r| match acfg.norm {
            Norm::Linf => r.linf_dist <= acfg.eps + tol,
            Norm::L2 => r.l2_dist <= acfg.eps + tol,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_examples() {
        assert_eq!(project_ball(&[0.5, -0.05], &[0.0, 0.0], Norm::Linf, 0.1), vec![0.1, -0.05]);
        let p = project_ball(&[3.0, 4.0], &[0.0, 0.0], Norm::L2, 1.0);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        let inside = [0.3, -0.2];
        assert_eq!(project_ball(&inside, &[0.0, 0.0], Norm::L2, 1.0), inside.to_vec());
        assert_eq!(project_ball(&inside, &[0.0, 0.0], Norm::Linf, 1.0), inside.to_vec());
    }

    #[test]
    fn l2_projection_lands_on_the_sphere_along_the_ray() {
        let x0 = [1.0, -2.0, 0.5];
        let eps = 0.7;
        let dir = [0.3, 0.4, -1.2];
        let n = l2_dist(&dir, &[0.0; 3]);
        let cand: Vec<f64> = x0.iter().zip(&dir).map(|(c, d)| c + 2.0 * eps * d / n).collect();
        let p = project_ball(&cand, &x0, Norm::L2, eps);
        assert!((l2_dist(&p, &x0) - eps).abs() < 1e-12);
        for j in 0..3 {
            assert!((p[j] - (x0[j] + eps * dir[j] / n)).abs() < 1e-12);
        }
    }

    #[test]
    fn sign_step_example() {
        let x = pgd_step(&[1.0, 1.0], &[0.3, -0.2], Norm::Linf, 0.1);
        assert!((x[0] - 1.1).abs() < 1e-15 && (x[1] - 0.9).abs() < 1e-15);
        let x = pgd_step(&[0.0, 0.0], &[3.0, 4.0], Norm::L2, 0.5);
        assert!((x[0] - 0.3).abs() < 1e-15 && (x[1] - 0.4).abs() < 1e-15);
        assert_eq!(pgd_step(&[1.0], &[0.0], Norm::L2, 0.5), vec![1.0]);
    }

    #[test]
    fn defaults_follow_the_budget_rules() {
        let a = AttackCfg::linf(255.0);
        assert!((a.eps - 8.0).abs() < 1e-12);
        assert!((a.step() - 2.0).abs() < 1e-12);
        assert_eq!(a.n_steps, 40);
        assert!(!a.random_start);
        assert_eq!(AttackCfg::l2().eps, 0.5);
        assert!(AttackCfg { n_steps: 0, ..a.clone() }.validate().is_err());
        assert!(AttackCfg { eps: -1.0, ..a.clone() }.validate().is_err());
        assert!(AttackCfg { step_size: Some(0.0), ..a }.validate().is_err());
    }
}
