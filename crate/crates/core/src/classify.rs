//! Generative classification: predict the class with the highest
//! conditional log-likelihood.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{log_likelihood, sample_probe_seed, SolverCfg, TraceCfg};
use crate::score::ScoreModel;

/// Index of the largest value, lowest index on ties. NaN never wins.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] || (v[best].is_nan() && !x.is_nan()) {
            best = i;
        }
    }
    best
}

/// `top1 − top2`; 0 for a single class.
pub fn margin(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let i = argmax(v);
    let second = v
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &x)| x)
        .fold(f64::NEG_INFINITY, f64::max);
    v[i] - second
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    crate::score::log_sum_exp(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationResult {
    pub per_class_logp: Vec<f64>,
    /// `None` when any class solve failed.
    pub predicted: Option<usize>,
    pub margin: f64,
    pub per_class_nfe: Vec<usize>,
    pub failure: Option<String>,
}

/// Runs one likelihood solve per class, all with the probes of
/// `tcfg.seed`, and predicts the argmax.
pub fn classify<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
) -> ClassificationResult {
    classify_classes(model, x, cfg, tcfg, 0..model.num_classes())
}

/// As [`classify`], evaluating classes in the given order.
pub fn classify_classes<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
    order: impl IntoIterator<Item = usize>,
) -> ClassificationResult {
    let k = model.num_classes();
    let mut logp = vec![f64::NAN; k];
    let mut nfe = vec![0; k];
    let mut failure = None;
    for y in order {
        match log_likelihood(model, x, cfg, tcfg, Some(y)) {
            Ok(out) => {
                logp[y] = out.logp;
                nfe[y] = out.nfe;
            }
            Err(e) => {
                failure.get_or_insert_with(|| format!("class {y}: {e}"));
            }
        }
    }
    from_logps(logp, nfe, failure)
}

fn from_logps(logp: Vec<f64>, nfe: Vec<usize>, failure: Option<String>) -> ClassificationResult {
    let ok = failure.is_none() && logp.iter().all(|v| v.is_finite());
    ClassificationResult {
        predicted: ok.then(|| argmax(&logp)),
        margin: if ok { margin(&logp) } else { 0.0 },
        failure: if ok {
            None
        } else {
            Some(failure.unwrap_or_else(|| "non-finite log-likelihood".into()))
        },
        per_class_logp: logp,
        per_class_nfe: nfe,
    }
}

/// Re-ranks with log prior weights added to the class log-likelihoods.
pub fn decide_with_log_prior(result: &ClassificationResult, log_prior: &[f64]) -> Result<usize> {
    if log_prior.len() != result.per_class_logp.len() {
        return Err(Error::DimensionMismatch {
            expected: result.per_class_logp.len(),
            got: log_prior.len(),
        });
    }
    let scores: Vec<f64> = result.per_class_logp.iter().zip(log_prior).map(|(a, b)| a + b).collect();
    Ok(argmax(&scores))
}

fn check_prior(prior: &[f64], k: usize) -> Result<()> {
    if prior.len() != k {
        return Err(Error::DimensionMismatch { expected: k, got: prior.len() });
    }
    let sum: f64 = prior.iter().sum();
    if prior.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config("class prior must be nonnegative and sum to 1"));
    }
    Ok(())
}

/// `log Σ_y π_y exp(logp_y)`; uniform `π` when `prior` is `None`.
pub fn marginal_from_logps(logps: &[f64], prior: Option<&[f64]>) -> Result<f64> {
    let k = logps.len();
    let terms: Vec<f64> = match prior {
        Some(p) => {
            check_prior(p, k)?;
            logps.iter().zip(p).map(|(l, p)| l + p.ln()).collect()
        }
        None => logps.iter().map(|l| l - (k as f64).ln()).collect(),
    };
    Ok(log_sum_exp(&terms))
}

/// Marginal log-likelihood over classes.
pub fn marginal_loglik<M: ScoreModel + ?Sized>(
    model: &M,
    x: &[f64],
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
    prior: Option<&[f64]>,
) -> Result<f64> {
    if let Some(p) = prior {
        check_prior(p, model.num_classes())?;
    }
    let logps = (0..model.num_classes())
        .map(|y| log_likelihood(model, x, cfg, tcfg, Some(y)).map(|o| o.logp))
        .collect::<Result<Vec<_>>>()?;
    marginal_from_logps(&logps, prior)
}

/// Per-sample classification record (one NDJSON line).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub sample_id: usize,
    pub label: usize,
    pub predicted: Option<usize>,
    pub correct: bool,
    pub logp: Vec<f64>,
    pub margin: f64,
    pub nfe: Vec<usize>,
    pub failure: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    /// Mean margin over samples that classified without failure.
    pub mean_margin: f64,
    /// Mean function evaluations per likelihood solve.
    pub mean_nfe: f64,
    pub n: usize,
    pub n_failed: usize,
    pub records: Vec<SampleRecord>,
}

/// Classifies a single dataset sample with its derived probe seed.
pub fn classify_sample<M: ScoreModel + ?Sized>(
    model: &M,
    data: &Dataset,
    i: usize,
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
) -> Result<ClassificationResult> {
    let x = data.model_input(i, tcfg.seed)?;
    let local = tcfg.with_seed(sample_probe_seed(tcfg.seed, i));
    Ok(classify(model, &x, cfg, &local))
}

/// Fraction of samples whose prediction equals the label. Failed samples
/// count as errors and are flagged in their records.
pub fn evaluate_accuracy<M: ScoreModel + ?Sized>(
    model: &M,
    data: &Dataset,
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
) -> Result<AccuracyReport> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate accuracy on an empty dataset"));
    }
    if data.dim() != model.dim() || data.num_classes > model.num_classes() {
        return Err(Error::config(format!(
            "dataset (D={}, K={}) does not match model (D={}, K={})",
            data.dim(),
            data.num_classes,
            model.dim(),
            model.num_classes()
        )));
    }
    let records = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let r = classify_sample(model, data, i, cfg, tcfg)?;
            Ok(SampleRecord {
                sample_id: i,
                label: data.labels[i],
                predicted: r.predicted,
                correct: r.predicted == Some(data.labels[i]),
                logp: r.per_class_logp,
                margin: r.margin,
                nfe: r.per_class_nfe,
                failure: r.failure,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(records))
}

pub fn summarize(records: Vec<SampleRecord>) -> AccuracyReport {
    let n = records.len();
    let correct = records.iter().filter(|r| r.correct).count();
    let ok: Vec<&SampleRecord> = records.iter().filter(|r| r.failure.is_none()).collect();
    let mean_margin = if ok.is_empty() {
        0.0
    } else {
        ok.iter().map(|r| r.margin).sum::<f64>() / ok.len() as f64
    };
    let solves: usize = records.iter().map(|r| r.nfe.len()).sum();
    let nfe: usize = records.iter().flat_map(|r| r.nfe.iter()).sum();
    AccuracyReport {
        accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        mean_margin,
        mean_nfe: if solves == 0 { 0.0 } else { nfe as f64 / solves as f64 },
        n,
        n_failed: n - ok.len(),
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
        assert_eq!(argmax(&[f64::NAN, 1.0]), 1);
        assert_eq!(argmax(&[5.0]), 0);
    }

    #[test]
    fn margin_is_gap_between_top_two() {
        assert_eq!(margin(&[1.0, 4.0, 2.5]), 1.5);
        assert_eq!(margin(&[7.0]), 0.0);
        assert_eq!(margin(&[2.0, 2.0]), 0.0);
    }

    #[test]
    fn marginal_of_equal_terms_is_that_term() {
        let l = -3.7;
        assert!((marginal_from_logps(&[l, l, l], None).unwrap() - l).abs() < 1e-12);
        assert_eq!(marginal_from_logps(&[l], None).unwrap(), l);
        assert!(marginal_from_logps(&[l, l], Some(&[0.3, 0.3])).is_err());
        let m = marginal_from_logps(&[0.0, (2.0f64).ln()], Some(&[0.5, 0.5])).unwrap();
        assert!((m - 1.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn shifting_all_classes_keeps_the_decision() {
        let r = from_logps(vec![-2.0, -1.0, -4.0], vec![1, 1, 1], None);
        assert_eq!(r.predicted, Some(1));
        assert_eq!(decide_with_log_prior(&r, &[5.0, 5.0, 5.0]).unwrap(), 1);
        assert_eq!(decide_with_log_prior(&r, &[2.0, 0.0, 0.0]).unwrap(), 0);
    }

    #[test]
    fn failures_withhold_the_prediction() {
        let r = from_logps(vec![-2.0, f64::NAN], vec![3, 0], Some("class 1: boom".into()));
        assert_eq!(r.predicted, None);
        assert!(r.failure.unwrap().contains("boom"));
    }
}
