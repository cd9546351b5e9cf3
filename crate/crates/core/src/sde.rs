//! Forward diffusion processes: variance-preserving (VP) and sub-VP.
//!
//! Both use the linear noise rate `β(t) = β_min + t (β_max − β_min) / T`,
//! share the drift `−½ β(t) x`, and differ in the diffusion coefficient:
//! `g² = β` for VP and `g² = β (1 − e^{−2∫β})` for sub-VP.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SdeKind {
    Vp,
    SubVp,
}

impl std::str::FromStr for SdeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vp" => Ok(SdeKind::Vp),
            "subvp" | "sub-vp" | "sub_vp" => Ok(SdeKind::SubVp),
            other => Err(Error::config(format!("unknown SDE kind `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeSpec {
    pub kind: SdeKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub t_max: f64,
    pub t_eps: f64,
}

impl Default for SdeSpec {
    fn default() -> Self {
        Self {
            kind: SdeKind::Vp,
            beta_min: 0.1,
            beta_max: 20.0,
            t_max: 1.0,
            t_eps: 1e-5,
        }
    }
}

/// Mean coefficient and standard deviation of the transition kernel
/// `p_t(x_t | x_0) = N(m(t) x_0, σ(t)² I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerturbScale {
    pub mean_coeff: f64,
    pub std: f64,
}

impl SdeSpec {
    pub fn new(kind: SdeKind, beta_min: f64, beta_max: f64, t_max: f64, t_eps: f64) -> Result<Self> {
        let spec = Self {
            kind,
            beta_min,
            beta_max,
            t_max,
            t_eps,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_kind(kind: SdeKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_eps > 0.0 && self.t_eps < self.t_max) {
            return Err(Error::config(format!(
                "need 0 < t_eps < t_max, got t_eps={} t_max={}",
                self.t_eps, self.t_max
            )));
        }
        if !(self.beta_min > 0.0 && self.beta_max >= self.beta_min) {
            return Err(Error::config(format!(
                "need beta_max >= beta_min > 0, got beta_min={} beta_max={}",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }

    fn check_time(&self, t: f64, allow_zero: bool) -> Result<()> {
        let lower_ok = if allow_zero { t >= 0.0 } else { t > 0.0 };
        if lower_ok && t <= self.t_max {
            Ok(())
        } else {
            let open = if allow_zero { "[" } else { "(" };
            Err(Error::out_of_range("t", t, format!("{open}0, {}]", self.t_max)))
        }
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        self.check_time(t, true)?;
        Ok(self.beta_unchecked(t))
    }

    fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + t * (self.beta_max - self.beta_min) / self.t_max
    }

    /// `∫₀ᵗ β(s) ds`.
    pub fn beta_integral(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * t * t * (self.beta_max - self.beta_min) / self.t_max
    }

    pub fn drift(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        self.check_time(t, false)?;
        let c = -0.5 * self.beta_unchecked(t);
        Ok(x.iter().map(|v| c * v).collect())
    }

    /// Squared diffusion coefficient `g(t)²`.
    pub fn diffusion_sq(&self, t: f64) -> Result<f64> {
        self.check_time(t, false)?;
        let beta = self.beta_unchecked(t);
        Ok(match self.kind {
            SdeKind::Vp => beta,
            SdeKind::SubVp => beta * -(-2.0 * self.beta_integral(t)).exp_m1(),
        })
    }

    pub fn diffusion(&self, t: f64) -> Result<f64> {
        self.diffusion_sq(t).map(f64::sqrt)
    }

    /// Transition-kernel scales. `t = 0` is accepted and gives the identity.
    pub fn perturb_scale(&self, t: f64) -> Result<PerturbScale> {
        self.check_time(t, true)?;
        let b = self.beta_integral(t);
        let mean_coeff = (-0.5 * b).exp();
        let one_minus_m2 = -(-b).exp_m1();
        let std = match self.kind {
            SdeKind::Vp => one_minus_m2.sqrt(),
            SdeKind::SubVp => one_minus_m2,
        };
        Ok(PerturbScale { mean_coeff, std })
    }

    /// Log-density of the prior at `T`: a standard normal for both kinds.
    pub fn prior_logpdf(&self, x: &[f64]) -> f64 {
        let d = x.len() as f64;
        let sq: f64 = x.iter().map(|v| v * v).sum();
        -0.5 * d * (2.0 * PI).ln() - 0.5 * sq
    }

    /// `g(t)²/σ(t)²`, the unnormalised density used for
    /// importance sampling of training times.
    pub fn likelihood_weight_over_var(&self, t: f64) -> Result<f64> {
        let g2 = self.diffusion_sq(t)?;
        let sigma = self.perturb_scale(t)?.std;
        Ok(g2 / (sigma * sigma))
    }
}
