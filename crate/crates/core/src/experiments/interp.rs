//! Log-likelihood along straight lines between pairs of inputs, and a
//! convexity diagnostic for the resulting curves.

use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::marginal_loglik;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{SolverCfg, TraceCfg};
use crate::rng;
use crate::score::ScoreModel;

pub const DEFAULT_GRID_POINTS: usize = 24;

/// `n` evenly spaced points from 0 to 1 inclusive.
pub fn interp_grid(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::config("interpolation grid needs at least 2 points"));
    }
    Ok((0..n).map(|i| i as f64 / (n - 1) as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCurve {
    pub pair_id: usize,
    pub a: usize,
    pub b: usize,
    /// Marginal log-likelihood at each grid point; empty on failure.
    pub logp: Vec<f64>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpCurve {
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    /// Sample standard deviation across pairs (0 for a single pair).
    pub std: Vec<f64>,
    /// Pairs that contributed (failed pairs are excluded).
    pub n_pairs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpResult {
    pub curve: InterpCurve,
    pub pairs: Vec<PairCurve>,
}

/// `n` pairs of distinct sample indices, drawn without replacement within
/// each pair.
pub fn select_pairs(n_samples: usize, n_pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n_samples < 2 && n_pairs > 0 {
        return Err(Error::config("interpolation pairs need at least 2 samples"));
    }
    Ok((0..n_pairs)
        .map(|p| {
            let mut r = rng::stream(seed, "interp-pairs", &[p as u64]);
            let v = sample(&mut r, n_samples, 2);
            (v.index(0), v.index(1))
        })
        .collect())
}

/// Evaluates `log p₀(t·x_A + (1 − t)·x_B)` (uniform class prior) on `grid`
/// for every pair. Pair `p` uses probes derived from `(tcfg.seed, p)`.
pub fn interpolation_experiment<M: ScoreModel + ?Sized>(
    model: &M,
    pairs: &[(Vec<f64>, Vec<f64>)],
    grid: &[f64],
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
) -> Result<InterpResult> {
    if grid.first() != Some(&0.0) || grid.last() != Some(&1.0) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("interpolation grid must be increasing from 0 to 1"));
    }
    let d = model.dim();
    for (a, b) in pairs {
        if a.len() != d || b.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: a.len().max(b.len()) });
        }
    }
    let curves: Vec<PairCurve> = pairs
        .par_iter()
        .enumerate()
        .map(|(p, (xa, xb))| {
            let local = tcfg.with_seed(pair_probe_seed(tcfg.seed, p));
            let res: Result<Vec<f64>> = grid
                .iter()
                .map(|&t| {
                    let x: Vec<f64> = xa.iter().zip(xb).map(|(a, b)| t * a + (1.0 - t) * b).collect();
                    marginal_loglik(model, &x, cfg, &local, None)
                })
                .collect();
            let (logp, failure) = match res {
                Ok(v) => (v, None),
                Err(e) => (Vec::new(), Some(e.to_string())),
            };
            PairCurve { pair_id: p, a: p, b: p, logp, failure }
        })
        .collect();
    let curve = aggregate(grid, &curves);
    Ok(InterpResult { curve, pairs: curves })
}

/// Probe seed of interpolation pair `p`.
pub fn pair_probe_seed(root: u64, p: usize) -> u64 {
    rng::derive_seed(root, "interp-pair", &[p as u64])
}

/// Runs the experiment on `n_pairs` random pairs of dataset samples.
pub fn interpolate_dataset<M: ScoreModel + ?Sized>(
    model: &M,
    data: &Dataset,
    n_pairs: usize,
    grid: &[f64],
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
) -> Result<InterpResult> {
    let idx = select_pairs(data.len(), n_pairs, tcfg.seed)?;
    let pairs = idx
        .iter()
        .map(|&(a, b)| Ok((data.model_input(a, tcfg.seed)?, data.model_input(b, tcfg.seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut res = interpolation_experiment(model, &pairs, grid, cfg, tcfg)?;
    for (c, &(a, b)) in res.pairs.iter_mut().zip(&idx) {
        c.a = a;
        c.b = b;
    }
    Ok(res)
}

fn aggregate(grid: &[f64], curves: &[PairCurve]) -> InterpCurve {
    let ok: Vec<&PairCurve> = curves.iter().filter(|c| c.failure.is_none()).collect();
    let n = ok.len();
    let mut mean = vec![0.0; grid.len()];
    let mut std = vec![0.0; grid.len()];
    if n > 0 {
        for i in 0..grid.len() {
            let m = ok.iter().map(|c| c.logp[i]).sum::<f64>() / n as f64;
            mean[i] = m;
            if n > 1 {
                let v = ok.iter().map(|c| (c.logp[i] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
                std[i] = v.sqrt();
            }
        }
    }
    InterpCurve {
        t: grid.to_vec(),
        mean,
        std,
        n_pairs: n,
    }
}

impl InterpCurve {
    /// `t,mean,std` rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,mean_logp,std_logp\n");
        for i in 0..self.t.len() {
            s += &format!("{},{},{}\n", self.t[i], self.mean[i], self.std[i]);
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvexityScore {
    /// Fraction of second differences that are ≥ 0.
    pub fraction_nonnegative: f64,
    /// Mean second divided difference (an estimate of the mean `f''`).
    pub mean_second_difference: f64,
}

/// Second divided differences of `f` over `t`. Values within rounding
/// noise of zero count as zero, and zero counts as nonnegative.
pub fn convexity_score(t: &[f64], f: &[f64]) -> Result<ConvexityScore> {
    if t.len() != f.len() {
        return Err(Error::DimensionMismatch { expected: t.len(), got: f.len() });
    }
    if t.len() < 3 {
        return Err(Error::config("convexity needs at least 3 points"));
    }
    let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut nonneg = 0;
    let mut sum = 0.0;
    let n = t.len() - 2;
    for i in 1..=n {
        let h0 = t[i] - t[i - 1];
        let h1 = t[i + 1] - t[i];
        let raw = h0 * (f[i + 1] - f[i]) - h1 * (f[i] - f[i - 1]);
        let dd = 2.0 * raw / (h0 * h1 * (h0 + h1));
        if raw >= -1e-12 * (1.0 + scale) * (h0 + h1) {
            nonneg += 1;
        }
        sum += dd;
    }
    Ok(ConvexityScore {
        fraction_nonnegative: nonneg as f64 / n as f64,
        mean_second_difference: sum / n as f64,
    })
}

impl InterpCurve {
    pub fn convexity(&self) -> Result<ConvexityScore> {
        convexity_score(&self.t, &self.mean)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_includes_endpoints() {
        let g = interp_grid(24).unwrap();
        assert_eq!(g.len(), 24);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[23], 1.0);
        assert!(interp_grid(1).is_err());
    }

    #[test]
    fn convexity_of_reference_curves() {
        let t = interp_grid(24).unwrap();
        let sq: Vec<f64> = t.iter().map(|v| v * v).collect();
        let neg: Vec<f64> = sq.iter().map(|v| -v).collect();
        let lin: Vec<f64> = t.iter().map(|v| 3.0 - 7.3 * v).collect();
        let s = convexity_score(&t, &sq).unwrap();
        assert_eq!(s.fraction_nonnegative, 1.0);
        assert!((s.mean_second_difference - 2.0).abs() < 1e-9);
        assert_eq!(convexity_score(&t, &neg).unwrap().fraction_nonnegative, 0.0);
        let l = convexity_score(&t, &lin).unwrap();
        assert_eq!(l.fraction_nonnegative, 1.0);
        assert!(l.mean_second_difference.abs() < 1e-9);
        assert!(convexity_score(&t[..2], &sq[..2]).is_err());
    }

    #[test]
    fn pairs_are_distinct_and_reproducible() {
        let p = select_pairs(5, 200, 3).unwrap();
        assert!(p.iter().all(|(a, b)| a != b && *a < 5 && *b < 5));
        assert_eq!(p, select_pairs(5, 200, 3).unwrap());
        assert!(select_pairs(1, 1, 0).is_err());
        assert!(select_pairs(1, 0, 0).unwrap().is_empty());
    }

    #[test]
    fn aggregate_uses_sample_std_and_skips_failures() {
        let c = |logp: Vec<f64>, failure: Option<String>| PairCurve { pair_id: 0, a: 0, b: 1, logp, failure };
        let agg = aggregate(
            &[0.0, 1.0],
            &[c(vec![1.0, 2.0], None), c(vec![3.0, 2.0], None), c(vec![], Some("x".into()))],
        );
        assert_eq!(agg.n_pairs, 2);
        assert_eq!(agg.mean, vec![2.0, 2.0]);
        assert!((agg.std[0] - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(agg.std[1], 0.0);
    }
}
