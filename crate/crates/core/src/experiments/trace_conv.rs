//! Classification quality as a function of the Hutchinson probe count.

use serde::{Deserialize, Serialize};

use crate::classify::{evaluate_accuracy, AccuracyReport};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{SolverCfg, TraceCfg, TraceMode};
use crate::score::ScoreModel;

pub const DEFAULT_PROBE_GRID: [usize; 5] = [1, 2, 5, 10, 30];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// `None` for the exact-divergence reference row.
    pub n_probes: Option<usize>,
    pub accuracy: f64,
    pub accuracy_se: f64,
    pub mean_logp_true: f64,
    pub se_logp_true: f64,
    /// Mean over samples of the largest wrong-class log-likelihood.
    pub mean_logp_best_wrong: f64,
    pub se_logp_best_wrong: f64,
    pub mean_nfe: f64,
    pub n: usize,
    pub n_failed: usize,
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (m, 0.0);
    }
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64;
    (m, (var / n as f64).sqrt())
}

pub fn trace_row(n_probes: Option<usize>, rep: &AccuracyReport) -> TraceRow {
    let ok: Vec<_> = rep.records.iter().filter(|r| r.failure.is_none()).collect();
    let truth: Vec<f64> = ok.iter().map(|r| r.logp[r.label]).collect();
    let wrong: Vec<f64> = ok
        .iter()
        .map(|r| {
            r.logp
                .iter()
                .enumerate()
                .filter(|&(y, _)| y != r.label)
                .map(|(_, &l)| l)
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let (mt, st) = mean_se(&truth);
    let (mw, sw) = mean_se(&wrong);
    let a = rep.accuracy;
    TraceRow {
        n_probes,
        accuracy: a,
        accuracy_se: if rep.n == 0 { 0.0 } else { (a * (1.0 - a) / rep.n as f64).sqrt() },
        mean_logp_true: mt,
        se_logp_true: st,
        mean_logp_best_wrong: mw,
        se_logp_best_wrong: sw,
        mean_nfe: rep.mean_nfe,
        n: rep.n,
        n_failed: rep.n_failed,
    }
}

/// One row per probe count plus the exact row (last). Probe sets are
/// nested: with a shared seed, `n` probes are the first `n` of any larger
/// set, so rows are paired comparisons.
pub fn trace_convergence_experiment<M: ScoreModel + ?Sized>(
    model: &M,
    data: &Dataset,
    probe_grid: &[usize],
    cfg: &SolverCfg,
    seed: u64,
) -> Result<Vec<TraceRow>> {
    if probe_grid.contains(&0) {
        return Err(Error::config("probe counts must be positive"));
    }
    if model.num_classes() < 2 {
        return Err(Error::config("the probe-count study needs a conditional model with 2+ classes"));
    }
    let mut rows = Vec::with_capacity(probe_grid.len() + 1);
    for &n in probe_grid {
        let rep = evaluate_accuracy(model, data, cfg, &TraceCfg::hutchinson(n, seed))?;
        rows.push(trace_row(Some(n), &rep));
    }
    let exact = TraceCfg {
        mode: TraceMode::Exact,
        ..TraceCfg::hutchinson(1, seed)
    };
    let rep = evaluate_accuracy(model, data, cfg, &exact)?;
    rows.push(trace_row(None, &rep));
    Ok(rows)
}

pub fn trace_rows_csv(rows: &[TraceRow]) -> String {
    let mut s = String::from(
        "n_probes,accuracy,accuracy_se,mean_logp_true,se_logp_true,mean_logp_best_wrong,se_logp_best_wrong,mean_nfe,n,n_failed\n",
    );
    for r in rows {
        let n = r.n_probes.map_or("exact".to_string(), |n| n.to_string());
        s += &format!(
            "{n},{},{},{},{},{},{},{},{},{}\n",
            r.accuracy,
            r.accuracy_se,
            r.mean_logp_true,
            r.se_logp_true,
            r.mean_logp_best_wrong,
            r.se_logp_best_wrong,
            r.mean_nfe,
            r.n,
            r.n_failed
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::{summarize, SampleRecord};

    #[test]
    fn row_statistics() {
        let rec = |label, logp: Vec<f64>, correct| SampleRecord {
            sample_id: 0,
            label,
            predicted: Some(0),
            correct,
            logp,
            margin: 0.0,
            nfe: vec![10, 10],
            failure: None,
        };
        let rep = summarize(vec![rec(0, vec![-1.0, -3.0], true), rec(1, vec![-2.0, -4.0], false)]);
        let row = trace_row(Some(5), &rep);
        assert_eq!(row.accuracy, 0.5);
        assert!((row.accuracy_se - 0.125f64.sqrt()).abs() < 1e-15);
        assert_eq!(row.mean_logp_true, -2.5);
        assert_eq!(row.mean_logp_best_wrong, -2.5);
        assert!((row.se_logp_true - 1.5).abs() < 1e-15);
        assert!((row.se_logp_best_wrong - 0.5).abs() < 1e-15);
        let csv = trace_rows_csv(&[row, TraceRow { n_probes: None, ..trace_row(None, &rep) }]);
        assert!(csv.lines().nth(1).unwrap().starts_with("5,0.5,"));
        assert!(csv.lines().nth(2).unwrap().starts_with("exact,"));
    }
}
