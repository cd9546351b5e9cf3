//! Closed-form scores of Gaussian mixtures diffused by a VP/sub-VP SDE.
//!
//! A component `N(μ, s² I)` diffuses to `N(m(t) μ, (m² s² + σ²) I)`, so the
//! diffused mixture, its score, Jacobian and third derivatives are all
//! available in closed form. These models are the oracles for the
//! likelihood and classification machinery.

use std::f64::consts::PI;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{check_label, check_probes, ScoreModel};
use crate::error::{check_dim, Error, Result};
use crate::sde::SdeSpec;

/// Score of the diffused `N(μ, s² I)`: `−(x − m μ)/(m² s² + σ²)`.
pub fn analytic_gaussian_score(
    mu: &[f64],
    s2: f64,
    spec: &SdeSpec,
    x: &[f64],
    t: f64,
) -> Result<Vec<f64>> {
    check_dim(mu.len(), x.len())?;
    if !(s2 > 0.0) {
        return Err(Error::out_of_range("s2", s2, "(0, inf)"));
    }
    let p = spec.perturb_scale(t)?;
    let m = p.mean_coeff;
    let v = m * m * s2 + p.std * p.std;
    Ok(x.iter().zip(mu).map(|(xi, mi)| -(xi - m * mi) / v).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Isotropic variance `s²`.
    pub var: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMixture {
    pub components: Vec<Component>,
}

impl ClassMixture {
    /// Equal-weight mixture with a shared variance.
    pub fn equal_weights(means: &[Vec<f64>], var: f64) -> Self {
        let w = 1.0 / means.len() as f64;
        Self {
            components: means
                .iter()
                .map(|m| Component {
                    weight: w,
                    mean: m.clone(),
                    var,
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AnalyticGmmScore {
    sde: SdeSpec,
    dim: usize,
    classes: Vec<ClassMixture>,
}

/// A diffused component at a fixed time: log-weight, mean, variance.
struct Diffused {
    log_w: f64,
    mean: Vec<f64>,
    var: f64,
}

/// Responsibilities and per-component scores at one point.
struct Local {
    resp: Vec<f64>,
    comp_scores: Vec<Vec<f64>>,
    inv_var: Vec<f64>,
    score: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl AnalyticGmmScore {
    pub fn new(sde: SdeSpec, classes: Vec<ClassMixture>) -> Result<Self> {
        sde.validate()?;
        let dim = classes
            .first()
            .and_then(|c| c.components.first())
            .map(|c| c.mean.len())
            .ok_or_else(|| Error::config("mixture needs at least one class and component"))?;
        for (k, class) in classes.iter().enumerate() {
            if class.components.is_empty() {
                return Err(Error::config(format!("class {k} has no components")));
            }
            let total: f64 = class.components.iter().map(|c| c.weight).sum();
            if (total - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!(
                    "class {k} mixture weights sum to {total}, expected 1"
                )));
            }
            for c in &class.components {
                check_dim(dim, c.mean.len())?;
                if !(c.var > 0.0) || !(c.weight > 0.0) {
                    return Err(Error::config(format!(
                        "class {k}: component weights and variances must be positive"
                    )));
                }
            }
        }
        Ok(Self { sde, dim, classes })
    }

    /// Unconditional single Gaussian `N(μ, s² I)`.
    pub fn gaussian(sde: SdeSpec, mu: Vec<f64>, s2: f64) -> Result<Self> {
        Self::new(
            sde,
            vec![ClassMixture {
                components: vec![Component {
                    weight: 1.0,
                    mean: mu,
                    var: s2,
                }],
            }],
        )
    }

    pub fn classes(&self) -> &[ClassMixture] {
        &self.classes
    }

    /// Components of `p_t(· | y)`; `y = None` mixes classes uniformly.
    fn diffused(&self, t: f64, y: Option<usize>) -> Result<Vec<Diffused>> {
        check_label(y, self.classes.len())?;
        let p = self.sde.perturb_scale(t)?;
        let m = p.mean_coeff;
        let sig2 = p.std * p.std;
        let class_log_w = -(self.classes.len() as f64).ln();
        let selected: Vec<(f64, &ClassMixture)> = match y {
            Some(y) => vec![(0.0, &self.classes[y])],
            None => self.classes.iter().map(|c| (class_log_w, c)).collect(),
        };
        Ok(selected
            .into_iter()
            .flat_map(|(lw, class)| {
                class.components.iter().map(move |c| Diffused {
                    log_w: lw + c.weight.ln(),
                    mean: c.mean.iter().map(|v| m * v).collect(),
                    var: m * m * c.var + sig2,
                })
            })
            .collect())
    }

    fn component_log_terms(&self, comps: &[Diffused], x: &[f64]) -> Vec<f64> {
        let d = self.dim as f64;
        comps
            .iter()
            .map(|c| {
                let sq: f64 = x.iter().zip(&c.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                c.log_w - 0.5 * d * (2.0 * PI * c.var).ln() - 0.5 * sq / c.var
            })
            .collect()
    }

    /// `log p_t(x | y)`; `t = 0` gives the data density.
    pub fn log_density(&self, x: &[f64], t: f64, y: Option<usize>) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let comps = self.diffused(t, y)?;
        Ok(log_sum_exp(&self.component_log_terms(&comps, x)))
    }

    fn local(&self, x: &[f64], t: f64, y: Option<usize>) -> Result<Local> {
        check_dim(self.dim, x.len())?;
        let comps = self.diffused(t, y)?;
        let logs = self.component_log_terms(&comps, x);
        let lse = log_sum_exp(&logs);
        let resp: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
        let comp_scores: Vec<Vec<f64>> = comps
            .iter()
            .map(|c| x.iter().zip(&c.mean).map(|(a, b)| -(a - b) / c.var).collect())
            .collect();
        let inv_var: Vec<f64> = comps.iter().map(|c| 1.0 / c.var).collect();
        let mut score = vec![0.0; self.dim];
        for (r, g) in resp.iter().zip(&comp_scores) {
            for (s, gi) in score.iter_mut().zip(g) {
                *s += r * gi;
            }
        }
        Ok(Local {
            resp,
            comp_scores,
            inv_var,
            score,
        })
    }

    /// `J v` where `J = Σ r_j(−I/v_j + g_j g_jᵀ) − s sᵀ` (symmetric).
    fn jacobian_apply(&self, l: &Local, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for ((r, g), iv) in l.resp.iter().zip(&l.comp_scores).zip(&l.inv_var) {
            let gv = dot(g, v);
            for i in 0..self.dim {
                out[i] += r * (-iv * v[i] + g[i] * gv);
            }
        }
        let sv = dot(&l.score, v);
        for i in 0..self.dim {
            out[i] -= l.score[i] * sv;
        }
        out
    }

    /// `∇ₓ(εᵀ J ε)`.
    fn quad_form_grad(&self, l: &Local, eps: &[f64]) -> Vec<f64> {
        let e2 = dot(eps, eps);
        let se = dot(&l.score, eps);
        let je = self.jacobian_apply(l, eps);
        let mut out = vec![0.0; self.dim];
        for ((r, g), iv) in l.resp.iter().zip(&l.comp_scores).zip(&l.inv_var) {
            let ge = dot(g, eps);
            let a = -e2 * iv + ge * ge;
            for i in 0..self.dim {
                out[i] += r * (g[i] - l.score[i]) * a + r * 2.0 * ge * (-iv * eps[i]);
            }
        }
        for i in 0..self.dim {
            out[i] -= 2.0 * se * je[i];
        }
        out
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|a| (a - max).exp()).sum::<f64>().ln()
}

impl ScoreModel for AnalyticGmmScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn sde(&self) -> &SdeSpec {
        &self.sde
    }

    fn score(&self, x: &[f64], t: f64, y: Option<usize>) -> Result<Vec<f64>> {
        Ok(self.local(x, t, y)?.score)
    }

    fn score_jvp(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        probes: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        check_probes(self.dim, probes)?;
        let l = self.local(x, t, y)?;
        let mut out = Array2::zeros(probes.dim());
        for (k, eps) in probes.rows().into_iter().enumerate() {
            let eps = eps.to_vec();
            for (i, v) in self.jacobian_apply(&l, &eps).into_iter().enumerate() {
                out[[k, i]] = v;
            }
        }
        Ok((l.score, out))
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
        check_dim(self.dim, cotangent.len())?;
        check_probes(self.dim, probes)?;
        let l = self.local(x, t, y)?;
        let mut out = self.jacobian_apply(&l, cotangent);
        if probe_weight != 0.0 {
            for eps in probes.rows() {
                let g = self.quad_form_grad(&l, &eps.to_vec());
                for (o, gi) in out.iter_mut().zip(g) {
                    *o += probe_weight * gi;
                }
            }
        }
        Ok(out)
    }
}
