//! Likelihood-weighted denoising score matching with Adam and an EMA copy.

use std::io::Write;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::diff::Tape;
use crate::error::{Error, Result};
use crate::rng;
use crate::score::{MlpScoreNet, ScoreModel};
use crate::sde::SdeSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainCfg {
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub importance_sampling: bool,
    pub seed: u64,
}

impl Default for TrainCfg {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 20_000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            importance_sampling: true,
            seed: 0,
        }
    }
}

impl TrainCfg {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1)"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("invalid Adam hyperparameters"));
        }
        Ok(())
    }
}

const IS_GRID: usize = 4096;
/// Gauss–Legendre nodes and weights on [-1, 1].
const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Inverse-CDF sampler for the density `∝ g(t)²/σ(t)²` on `[t_eps, T]`.
///
/// The CDF is tabulated on a log-spaced grid and inverted by linear
/// interpolation, so draws follow a piecewise-constant density `q̂`. The
/// returned weight is `1 / ((T − t_eps) q̂(t))`, which makes weighted
/// averages exactly unbiased for uniform-in-t averages.
#[derive(Clone, Debug)]
pub struct ImportanceSampler {
    grid: Vec<f64>,
    cdf: Vec<f64>,
    span: f64,
    /// `∫ g²/σ² dt` over `[t_eps, T]`.
    pub normalizer: f64,
}

impl ImportanceSampler {
    pub fn new(spec: &SdeSpec) -> Result<Self> {
        spec.validate()?;
        let (a, b) = (spec.t_eps, spec.t_max);
        let ratio = b / a;
        let mut grid: Vec<f64> = (0..IS_GRID)
            .map(|i| a * ratio.powf(i as f64 / (IS_GRID - 1) as f64))
            .collect();
        grid[0] = a;
        grid[IS_GRID - 1] = b;
        let mut cdf = vec![0.0; IS_GRID];
        for i in 1..IS_GRID {
            let (lo, hi) = (grid[i - 1], grid[i]);
            let (mid, half) = (0.5 * (lo + hi), 0.5 * (hi - lo));
            let mut cell = 0.0;
            for (x, w) in GL5 {
                cell += w * spec.likelihood_weight_over_var(mid + half * x)?;
            }
            cdf[i] = cdf[i - 1] + half * cell;
        }
        let normalizer = cdf[IS_GRID - 1];
        for c in &mut cdf {
            *c /= normalizer;
        }
        Ok(Self {
            grid,
            cdf,
            span: b - a,
            normalizer,
        })
    }

    /// Maps `u ∈ [0, 1)` to `(t, weight)`.
    pub fn sample(&self, u: f64) -> (f64, f64) {
        let u = u.clamp(0.0, 1.0);
        let i = self.cdf.partition_point(|&c| c <= u).clamp(1, IS_GRID - 1);
        let (c0, c1) = (self.cdf[i - 1], self.cdf[i]);
        let (t0, t1) = (self.grid[i - 1], self.grid[i]);
        let t = t0 + (u - c0) / (c1 - c0) * (t1 - t0);
        let density = (c1 - c0) / (t1 - t0);
        (t.clamp(t0, t1), 1.0 / (self.span * density))
    }

    /// Tabulated CDF at `t`.
    pub fn cdf(&self, t: f64) -> f64 {
        let t = t.clamp(self.grid[0], self.grid[IS_GRID - 1]);
        let i = self.grid.partition_point(|&g| g <= t).clamp(1, IS_GRID - 1);
        let (g0, g1) = (self.grid[i - 1], self.grid[i]);
        self.cdf[i - 1] + (t - g0) / (g1 - g0) * (self.cdf[i] - self.cdf[i - 1])
    }
}

/// Per-sample loss coefficient `½ · w · g²/σ²`.
fn loss_coefficients(spec: &SdeSpec, t: &[f64], weights: &[f64]) -> Result<Vec<f64>> {
    t.iter()
        .zip(weights)
        .map(|(&t, &w)| {
            if !(t >= spec.t_eps && t <= spec.t_max) {
                return Err(Error::out_of_range("t", t, format!("[{}, {}]", spec.t_eps, spec.t_max)));
            }
            Ok(0.5 * w * spec.likelihood_weight_over_var(t)?)
        })
        .collect()
}

fn check_batch(x0: &Array2<f64>, labels: &[Option<usize>], t: &[f64], z: &Array2<f64>, w: &[f64]) -> Result<()> {
    let b = x0.nrows();
    if labels.len() != b || t.len() != b || w.len() != b || z.dim() != x0.dim() {
        return Err(Error::Shape("DSM batch components disagree in size".into()));
    }
    if b == 0 {
        return Err(Error::config("empty DSM batch"));
    }
    Ok(())
}

/// Noised inputs `m(t) x₀ + σ(t) z` and the per-row `σ(t)`.
fn perturb(spec: &SdeSpec, x0: &Array2<f64>, t: &[f64], z: &Array2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let mut xt = Array2::zeros(x0.dim());
    let mut sig = Vec::with_capacity(t.len());
    for (i, &ti) in t.iter().enumerate() {
        let p = spec.perturb_scale(ti)?;
        for j in 0..x0.ncols() {
            xt[[i, j]] = p.mean_coeff * x0[[i, j]] + p.std * z[[i, j]];
        }
        sig.push(p.std);
    }
    Ok((xt, sig))
}

/// `mean_i ½ w_i g(t_i)²/σ(t_i)² ‖σ(t_i) s(x_t, t_i, y_i) + z_i‖²` for any
/// score model.
pub fn dsm_loss<M: ScoreModel + ?Sized>(
    model: &M,
    x0: &Array2<f64>,
    labels: &[Option<usize>],
    t: &[f64],
    z: &Array2<f64>,
    weights: &[f64],
) -> Result<f64> {
    check_batch(x0, labels, t, z, weights)?;
    let spec = model.sde();
    let coef = loss_coefficients(spec, t, weights)?;
    let (xt, sig) = perturb(spec, x0, t, z)?;
    let mut total = 0.0;
    for i in 0..x0.nrows() {
        let s = model.score(&xt.row(i).to_vec(), t[i], labels[i])?;
        let sq: f64 = s.iter().zip(z.row(i)).map(|(s, z)| (sig[i] * s + z).powi(2)).sum();
        total += coef[i] * sq;
    }
    Ok(total / x0.nrows() as f64)
}

/// [`dsm_loss`] for the MLP together with its parameter gradients. Uses
/// `σ(t) s = raw output`, so the 1/σ scaling never enters the graph.
pub fn dsm_loss_and_grad(
    net: &MlpScoreNet,
    x0: &Array2<f64>,
    labels: &[Option<usize>],
    t: &[f64],
    z: &Array2<f64>,
    weights: &[f64],
) -> Result<(f64, Vec<Array2<f64>>)> {
    check_batch(x0, labels, t, z, weights)?;
    let spec = net.sde_spec();
    let coef = loss_coefficients(spec, t, weights)?;
    let (xt, _) = perturb(spec, x0, t, z)?;
    let b = x0.nrows();
    let c = Array2::from_shape_fn(x0.dim(), |(i, _)| coef[i] / b as f64);

    let mut tape = Tape::new();
    let xv = tape.constant(xt);
    let temb = tape.constant(net.time_features(t));
    let onehot = if labels.iter().any(Option::is_some) {
        Some(tape.constant(net.onehot(labels)?))
    } else {
        None
    };
    let fwd = net.record(&mut tape, xv, temb, onehot, true);
    let zv = tape.constant(z.clone());
    let resid = tape.add(fwd.raw, zv);
    let sq = tape.mul(resid, resid);
    let cv = tape.constant(c);
    let weighted = tape.mul(sq, cv);
    let loss = tape.sum(weighted);
    let value = tape.value(loss)[[0, 0]];
    let grads = tape.backward(loss)?;
    let g = fwd
        .params
        .iter()
        .zip(net.params())
        .map(|(v, p)| grads.get_or_zeros(*v, p.dim()))
        .collect();
    Ok((value, g))
}

#[derive(Clone, Debug)]
struct Adam {
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    step: i32,
}

impl Adam {
    fn new(params: &[Array2<f64>]) -> Self {
        Self {
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            step: 0,
        }
    }

    fn update(&mut self, params: &mut [Array2<f64>], grads: &[Array2<f64>], cfg: &TrainCfg) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step);
        let bc2 = 1.0 - cfg.beta2.powi(self.step);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                *p -= cfg.lr * (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
            });
        }
    }
}

/// `ema ← decay · ema + (1 − decay) · params`.
pub fn ema_update(ema: &mut [Array2<f64>], params: &[Array2<f64>], decay: f64) {
    for (e, p) in ema.iter_mut().zip(params) {
        ndarray::Zip::from(e).and(p).for_each(|e, &p| *e = decay * *e + (1.0 - decay) * p);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub step: usize,
    pub loss: f64,
    /// Exponentially smoothed loss (factor [`LOSS_SMOOTHING`]).
    pub ema_loss: f64,
}

pub const LOSS_SMOOTHING: f64 = 0.99;

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub net: MlpScoreNet,
    pub ema: MlpScoreNet,
    pub trace: Vec<LossRow>,
}

/// Trains `net` on `data` with labels fed to the conditional input.
/// Quantized data are dequantized with fresh uniform noise every batch.
pub fn train(mut net: MlpScoreNet, data: &Dataset, cfg: &TrainCfg) -> Result<TrainOutput> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::config("cannot train on an empty dataset"));
    }
    if data.dim() != net.dim() || data.num_classes > net.num_classes() {
        return Err(Error::config("dataset shape or class count does not match the network"));
    }
    let spec = *net.sde_spec();
    let sampler = ImportanceSampler::new(&spec)?;
    let mut t_rng = rng::stream(cfg.seed, "train-t", &[]);
    let mut z_rng = rng::stream(cfg.seed, "train-noise", &[]);
    let mut idx_rng = rng::stream(cfg.seed, "train-shuffle", &[]);
    let mut dq_rng = rng::stream(cfg.seed, "train-dequantize", &[]);

    let mut ema = net.clone();
    let mut adam = Adam::new(net.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut idx_rng);
    let mut cursor = 0;
    let (b, d) = (cfg.batch_size, data.dim());
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut smoothed = None;

    for step in 0..cfg.steps {
        let mut x0 = Array2::zeros((b, d));
        let mut labels = Vec::with_capacity(b);
        for i in 0..b {
            if cursor == order.len() {
                order.shuffle(&mut idx_rng);
                cursor = 0;
            }
            let k = order[cursor];
            cursor += 1;
            for j in 0..d {
                x0[[i, j]] = match data.levels {
                    Some(levels) => (data.samples[[k, j]] + dq_rng.random::<f64>()) / levels as f64,
                    None => data.samples[[k, j]],
                };
            }
            labels.push(Some(data.labels[k]));
        }
        let mut ts = Vec::with_capacity(b);
        let mut ws = Vec::with_capacity(b);
        for _ in 0..b {
            let u: f64 = t_rng.random();
            let (t, w) = if cfg.importance_sampling {
                sampler.sample(u)
            } else {
                (spec.t_eps + u * (spec.t_max - spec.t_eps), 1.0)
            };
            ts.push(t);
            ws.push(w);
        }
        let z = Array2::from_shape_simple_fn((b, d), || z_rng.sample(StandardNormal));

        let (loss, grads) = dsm_loss_and_grad(&net, &x0, &labels, &ts, &z, &ws)?;
        if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteLoss { step });
        }
        adam.update(net.params_mut(), &grads, cfg);
        ema_update(ema.params_mut(), net.params(), cfg.ema_decay);
        let s = match smoothed {
            None => loss,
            Some(prev) => LOSS_SMOOTHING * prev + (1.0 - LOSS_SMOOTHING) * loss,
        };
        smoothed = Some(s);
        trace.push(LossRow { step, loss, ema_loss: s });
    }
    Ok(TrainOutput { net, ema, trace })
}

pub fn write_loss_csv(mut w: impl Write, trace: &[LossRow]) -> Result<()> {
    writeln!(w, "step,loss,ema_loss")?;
    for r in trace {
        writeln!(w, "{},{},{}", r.step, r.loss, r.ema_loss)?;
    }
    Ok(())
}
