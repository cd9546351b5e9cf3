//! Conditional MLP score network.
//!
//! The first pre-activation is `[x ‖ temb(t)] W₀ + b₀ + onehot(y) W_y`, so
//! the label enters additively at the first hidden layer alongside the
//! time features. The linear head output is divided by `σ(t)`.

use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{check_label, check_probes, ScoreModel};
use crate::diff::{Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::sde::SdeSpec;

pub const DEFAULT_TIME_EMBED_DIM: usize = 64;
const FREQ_MIN: f64 = 1.0;
const FREQ_MAX: f64 = 1000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Tanh,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Silu => a / (1.0 + (-a).exp()),
            Activation::Tanh => a.tanh(),
        }
    }

    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-a).exp());
                s * (1.0 + a * (1.0 - s))
            }
            Activation::Tanh => {
                let y = a.tanh();
                1.0 - y * y
            }
        }
    }

    fn on_tape(self, tape: &mut Tape, a: Var) -> Var {
        match self {
            Activation::Silu => tape.silu(a),
            Activation::Tanh => tape.tanh(a),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpArch {
    pub dim: usize,
    pub num_classes: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    /// Number of sinusoidal time features; must be even.
    pub time_embed_dim: usize,
}

impl MlpArch {
    pub fn new(dim: usize, num_classes: usize, hidden: Vec<usize>) -> Self {
        Self {
            dim,
            num_classes,
            hidden,
            activation: Activation::Silu,
            time_embed_dim: DEFAULT_TIME_EMBED_DIM,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_classes == 0 {
            return Err(Error::config("dim and num_classes must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("hidden widths must be nonempty and positive"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("time_embed_dim must be a positive even number"));
        }
        Ok(())
    }

    /// Parameter shapes in declaration order:
    /// `W₀, b₀, W_y, (W_i, b_i)…, W_out, b_out`.
    pub fn param_shapes(&self) -> Vec<(usize, usize)> {
        let h0 = self.hidden[0];
        let mut shapes = vec![
            (self.dim + self.time_embed_dim, h0),
            (1, h0),
            (self.num_classes, h0),
        ];
        for w in self.hidden.windows(2) {
            shapes.push((w[0], w[1]));
            shapes.push((1, w[1]));
        }
        let last = *self.hidden.last().expect("validated");
        shapes.push((last, self.dim));
        shapes.push((1, self.dim));
        shapes
    }
}

/// Sinusoidal features `[sin(ω_k t)…, cos(ω_k t)…]` with `ω_k` log-spaced
/// over `[1, 1000]`.
pub fn time_embedding(t: f64, n_features: usize) -> Vec<f64> {
    let half = n_features / 2;
    let mut out = vec![0.0; 2 * half];
    for k in 0..half {
        let frac = if half > 1 {
            k as f64 / (half - 1) as f64
        } else {
            0.0
        };
        let w = FREQ_MIN * (FREQ_MAX / FREQ_MIN).powf(frac);
        out[k] = (w * t).sin();
        out[half + k] = (w * t).cos();
    }
    out
}

#[derive(Clone, Debug)]
pub struct MlpScoreNet {
    arch: MlpArch,
    sde: SdeSpec,
    params: Vec<Array2<f64>>,
}

/// Tape handles for one recorded forward pass.
pub struct TapeForward {
    pub params: Vec<Var>,
    /// Network output before the `1/σ` scaling, one row per input row.
    pub raw: Var,
}

impl MlpScoreNet {
    /// Xavier-uniform weights, zero biases, zero output head.
    pub fn new(arch: MlpArch, sde: SdeSpec, seed: u64) -> Result<Self> {
        arch.validate()?;
        sde.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let shapes = arch.param_shapes();
        let n = shapes.len();
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, &(r, c))| {
                let is_bias = i == 1 || (i >= 4 && i % 2 == 0);
                if is_bias || i == n - 2 {
                    Array2::zeros((r, c))
                } else {
                    let bound = (6.0 / (r + c) as f64).sqrt();
                    Array2::from_shape_fn((r, c), |_| rng.random_range(-bound..bound))
                }
            })
            .collect();
        Ok(Self { arch, sde, params })
    }

    pub fn from_params(arch: MlpArch, sde: SdeSpec, params: Vec<Array2<f64>>) -> Result<Self> {
        arch.validate()?;
        sde.validate()?;
        let shapes = arch.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter arrays, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (shape, p)) in shapes.iter().zip(&params).enumerate() {
            if *shape != p.dim() {
                return Err(Error::Shape(format!(
                    "parameter {i}: expected {shape:?}, got {:?}",
                    p.dim()
                )));
            }
        }
        Ok(Self { arch, sde, params })
    }

    pub fn arch(&self) -> &MlpArch {
        &self.arch
    }

    pub fn sde_spec(&self) -> &SdeSpec {
        &self.sde
    }

    pub fn params(&self) -> &[Array2<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.len()).sum()
    }

    fn hidden_layers(&self) -> impl Iterator<Item = (&Array2<f64>, &Array2<f64>)> {
        let n = self.params.len();
        self.params[3..n - 2].chunks(2).map(|c| (&c[0], &c[1]))
    }

    fn head(&self) -> (&Array2<f64>, &Array2<f64>) {
        let n = self.params.len();
        (&self.params[n - 2], &self.params[n - 1])
    }

    /// Records the raw forward pass for a batch. `x` is `B×D`; `temb` is
    /// `B×E`; `onehot` is `B×K` (rows of zeros for unconditional rows).
    /// Parameters are recorded as leaves when `trainable`, else as constants.
    pub fn record(
        &self,
        tape: &mut Tape,
        x: Var,
        temb: Var,
        onehot: Option<Var>,
        trainable: bool,
    ) -> TapeForward {
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let act = self.arch.activation;
        let input = tape.concat_cols(x, temb);
        let mut a = tape.matmul(input, params[0]);
        a = tape.add_bias(a, params[1]);
        if let Some(oh) = onehot {
            let proj = tape.matmul(oh, params[2]);
            a = tape.add(a, proj);
        }
        let mut h = act.on_tape(tape, a);
        let n = params.len();
        for pair in params[3..n - 2].chunks(2) {
            let z = tape.matmul(h, pair[0]);
            let z = tape.add_bias(z, pair[1]);
            h = act.on_tape(tape, z);
        }
        let out = tape.matmul(h, params[n - 2]);
        let raw = tape.add_bias(out, params[n - 1]);
        TapeForward { params, raw }
    }

    /// Time-embedding rows for a batch of times.
    pub fn time_features(&self, ts: &[f64]) -> Array2<f64> {
        let e = self.arch.time_embed_dim;
        let mut out = Array2::zeros((ts.len(), e));
        for (i, &t) in ts.iter().enumerate() {
            for (j, v) in time_embedding(t, e).into_iter().enumerate() {
                out[[i, j]] = v;
            }
        }
        out
    }

    /// One-hot rows; `None` labels give zero rows.
    pub fn onehot(&self, ys: &[Option<usize>]) -> Result<Array2<f64>> {
        let k = self.arch.num_classes;
        let mut out = Array2::zeros((ys.len(), k));
        for (i, y) in ys.iter().enumerate() {
            check_label(*y, k)?;
            if let Some(y) = y {
                out[[i, *y]] = 1.0;
            }
        }
        Ok(out)
    }

    fn check_time(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= self.sde.t_max) {
            return Err(Error::out_of_range(
                "t",
                t,
                format!("(0, {}]", self.sde.t_max),
            ));
        }
        Ok(1.0 / self.sde.perturb_scale(t)?.std)
    }

    /// Direct forward pass of one input with forward-mode tangents for the
    /// probe rows. Returns `(score, J·probes)`.
    fn forward_dual(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        probes: Option<&Array2<f64>>,
    ) -> Result<(Vec<f64>, Option<Array2<f64>>)> {
        check_dim(self.arch.dim, x.len())?;
        check_label(y, self.arch.num_classes)?;
        let inv_sigma = self.check_time(t)?;
        let d = self.arch.dim;
        let act = self.arch.activation;
        let w0 = &self.params[0];

        let mut input = Array1::from(x.to_vec());
        input.append(Axis(0), Array1::from(time_embedding(t, self.arch.time_embed_dim)).view())
            .expect("1-d append");
        let mut a = input.dot(w0) + self.params[1].row(0);
        if let Some(y) = y {
            a += &self.params[2].row(y);
        }
        let mut a_dot = probes.map(|p| p.dot(&w0.slice(s![..d, ..])));

        let mut h = a.mapv(|v| act.apply(v));
        let mut h_dot = a_dot.take().map(|mut ad| {
            let d1 = a.mapv(|v| act.derivative(v));
            ad *= &d1;
            ad
        });
        for (w, b) in self.hidden_layers() {
            let z = h.dot(w) + b.row(0);
            if let Some(hd) = h_dot.as_mut() {
                let mut zd = hd.dot(w);
                zd *= &z.mapv(|v| act.derivative(v));
                *hd = zd;
            }
            h = z.mapv(|v| act.apply(v));
        }
        let (wo, bo) = self.head();
        let out = (h.dot(wo) + bo.row(0)) * inv_sigma;
        let out_dot = h_dot.map(|hd| hd.dot(wo) * inv_sigma);
        Ok((out.to_vec(), out_dot))
    }
}

impl ScoreModel for MlpScoreNet {
    fn dim(&self) -> usize {
        self.arch.dim
    }

    fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    fn sde(&self) -> &SdeSpec {
        &self.sde
    }

    fn score(&self, x: &[f64], t: f64, y: Option<usize>) -> Result<Vec<f64>> {
        self.forward_dual(x, t, y, None).map(|(s, _)| s)
    }

    fn score_jvp(
        &self,
        x: &[f64],
        t: f64,
        y: Option<usize>,
        probes: &Array2<f64>,
    ) -> Result<(Vec<f64>, Array2<f64>)> {
        check_probes(self.arch.dim, probes)?;
        let (s, jv) = self.forward_dual(x, t, y, Some(probes))?;
        Ok((s, jv.expect("tangents requested")))
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
        let d = self.arch.dim;
        check_dim(d, x.len())?;
        check_dim(d, cotangent.len())?;
        check_probes(d, probes)?;
        check_label(y, self.arch.num_classes)?;
        let inv_sigma = self.check_time(t)?;

        // Rows 0..P carry the probes, row P the cotangent. With
        // f = Σ_k c_k · s(x_k), the gradient of row k is Jᵀc_k, and its
        // directional derivative along ε_k is ∇(ε_kᵀ J ε_k).
        let p = if probe_weight != 0.0 { probes.nrows() } else { 0 };
        let rows = p + 1;
        let xs = Array2::from_shape_fn((rows, d), |(_, j)| x[j]);
        let mut weights = Array2::zeros((rows, d));
        let mut seeds = Array2::zeros((rows, d));
        if p > 0 {
            weights.slice_mut(s![..p, ..]).assign(probes);
            seeds.slice_mut(s![..p, ..]).assign(probes);
        }
        weights.row_mut(p).assign(&Array1::from(cotangent.to_vec()));

        let mut tape = Tape::new();
        let xv = tape.leaf(xs);
        let temb = tape.constant(self.time_features(&vec![t; rows]));
        let onehot = match y {
            Some(_) => Some(tape.constant(self.onehot(&vec![y; rows])?)),
            None => None,
        };
        let fwd = self.record(&mut tape, xv, temb, onehot, false);
        let score = tape.scale(fwd.raw, inv_sigma);
        let c = tape.constant(weights);
        let prod = tape.mul(score, c);
        let f = tape.sum(prod);
        let tangents = tape.tangents(&[(xv, seeds)]);
        let (adj, adj_dot) = tape.backward_with_tangents(f, &tangents)?;

        let g = adj.get_or_zeros(xv, (rows, d));
        let mut out = g.row(p).to_vec();
        if p > 0 {
            let gd = adj_dot.get_or_zeros(xv, (rows, d));
            let summed = gd.slice(s![..p, ..]).sum_axis(Axis(0));
            for (o, v) in out.iter_mut().zip(summed.iter()) {
                *o += probe_weight * v;
            }
        }
        Ok(out)
    }
}
