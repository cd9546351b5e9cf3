//! Divergence estimation: exact traces from basis probes, or Hutchinson
//! estimates from random probes drawn from a seeded stream.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceMode {
    Exact,
    Hutchinson,
}

impl std::str::FromStr for TraceMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Ok(TraceMode::Exact),
            "hutchinson" => Ok(TraceMode::Hutchinson),
            other => Err(Error::config(format!("unknown trace mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProbeLaw {
    #[default]
    Rademacher,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceCfg {
    pub mode: TraceMode,
    pub n_probes: usize,
    pub law: ProbeLaw,
    pub seed: u64,
}

impl Default for TraceCfg {
    fn default() -> Self {
        Self {
            mode: TraceMode::Hutchinson,
            n_probes: 30,
            law: ProbeLaw::Rademacher,
            seed: 0,
        }
    }
}

impl TraceCfg {
    pub fn exact() -> Self {
        Self {
            mode: TraceMode::Exact,
            ..Default::default()
        }
    }

    pub fn hutchinson(n_probes: usize, seed: u64) -> Self {
        Self {
            mode: TraceMode::Hutchinson,
            n_probes,
            law: ProbeLaw::Rademacher,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mode == TraceMode::Hutchinson && self.n_probes == 0 {
            return Err(Error::config("Hutchinson trace needs at least one probe"));
        }
        Ok(())
    }

    /// Probe count actually used for a `dim`-dimensional field.
    pub fn effective_probes(&self, dim: usize) -> usize {
        match self.mode {
            TraceMode::Exact => dim,
            TraceMode::Hutchinson => self.n_probes,
        }
    }
}

/// Probe `k` of the stream for `seed`; independent of how many probes are
/// requested, so smaller probe sets are prefixes of larger ones.
pub fn probe(dim: usize, law: ProbeLaw, seed: u64, k: usize) -> Vec<f64> {
    let mut r = rng::stream(seed, "probe", &[k as u64]);
    (0..dim)
        .map(|_| match law {
            ProbeLaw::Rademacher => {
                if r.random::<bool>() {
                    1.0
                } else {
                    -1.0
                }
            }
            ProbeLaw::Gaussian => r.sample(StandardNormal),
        })
        .collect()
}

/// The probe rows for one solve: identity rows in exact mode.
pub fn probe_matrix(dim: usize, cfg: &TraceCfg) -> Result<Array2<f64>> {
    cfg.validate()?;
    Ok(match cfg.mode {
        TraceMode::Exact => Array2::eye(dim),
        TraceMode::Hutchinson => {
            let mut m = Array2::zeros((cfg.n_probes, dim));
            for k in 0..cfg.n_probes {
                for (j, v) in probe(dim, cfg.law, cfg.seed, k).into_iter().enumerate() {
                    m[[k, j]] = v;
                }
            }
            m
        }
    })
}

/// Scaling applied to `Σ_k ε_kᵀ A ε_k`: 1 for basis probes, `1/n` for
/// Hutchinson.
pub fn probe_weight(mode: TraceMode, n_rows: usize) -> f64 {
    match mode {
        TraceMode::Exact => 1.0,
        TraceMode::Hutchinson => 1.0 / n_rows as f64,
    }
}

/// Trace estimate from probes and their images `A ε_k` (one per row).
pub fn trace_from_products(mode: TraceMode, probes: &Array2<f64>, images: &Array2<f64>) -> Result<f64> {
    if probes.dim() != images.dim() {
        return Err(Error::Shape(format!(
            "probe block {:?} vs image block {:?}",
            probes.dim(),
            images.dim()
        )));
    }
    let total: f64 = probes
        .rows()
        .into_iter()
        .zip(images.rows())
        .map(|(e, ae)| e.dot(&ae))
        .sum();
    if !total.is_finite() {
        return Err(Error::NonFinite("probe product".into()));
    }
    Ok(total * probe_weight(mode, probes.nrows()))
}

/// Trace of the linear map `apply` (acting on probe rows).
pub fn estimate_trace(
    dim: usize,
    cfg: &TraceCfg,
    apply: impl Fn(&Array2<f64>) -> Result<Array2<f64>>,
) -> Result<f64> {
    let probes = probe_matrix(dim, cfg)?;
    let images = apply(&probes)?;
    trace_from_products(cfg.mode, &probes, &images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn linear(a: Array2<f64>) -> impl Fn(&Array2<f64>) -> Result<Array2<f64>> {
        move |p: &Array2<f64>| Ok(p.dot(&a.t()))
    }

    #[test]
    fn diagonal_field_is_exact_for_every_rademacher_probe() {
        let a = array![[1.0, 0.0], [0.0, 3.0]];
        assert_eq!(estimate_trace(2, &TraceCfg::exact(), linear(a.clone())).unwrap(), 4.0);
        for seed in 0..20 {
            let cfg = TraceCfg::hutchinson(1, seed);
            assert!((estimate_trace(2, &cfg, linear(a.clone())).unwrap() - 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_field_has_trace_dim() {
        for d in [1, 3, 7] {
            let eye = Array2::eye(d);
            assert_eq!(estimate_trace(d, &TraceCfg::exact(), linear(eye.clone())).unwrap(), d as f64);
            let h = estimate_trace(d, &TraceCfg::hutchinson(5, 1), linear(eye)).unwrap();
            assert!((h - d as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn probe_streams_are_nested() {
        let small = probe_matrix(4, &TraceCfg::hutchinson(3, 9)).unwrap();
        let large = probe_matrix(4, &TraceCfg::hutchinson(30, 9)).unwrap();
        for k in 0..3 {
            assert_eq!(small.row(k), large.row(k));
        }
        assert!(small.iter().all(|v| v.abs() == 1.0));
    }

    #[test]
    fn gaussian_probes_have_unit_second_moment() {
        let cfg = TraceCfg { law: ProbeLaw::Gaussian, ..TraceCfg::hutchinson(20_000, 3) };
        let p = probe_matrix(2, &cfg).unwrap();
        let m2 = p.mapv(|v| v * v).mean().unwrap();
        assert!((m2 - 1.0).abs() < 0.03, "{m2}");
    }

    #[test]
    fn zero_probes_is_an_error() {
        assert!(probe_matrix(2, &TraceCfg::hutchinson(0, 0)).is_err());
        assert!("hutch".parse::<TraceMode>().is_err());
        assert_eq!("Exact".parse::<TraceMode>().unwrap(), TraceMode::Exact);
    }
}
