//! Severity-graded input corruptions and the accuracy grid over them.

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classify::evaluate_accuracy;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{SolverCfg, TraceCfg};
use crate::rng;
use crate::score::ScoreModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorruptionKind {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Contrast,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 4] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::GaussianBlur,
        CorruptionKind::Contrast,
    ];

    /// Excluded from the "without noise" aggregate.
    pub fn is_noise(self) -> bool {
        matches!(self, CorruptionKind::GaussianNoise | CorruptionKind::ImpulseNoise)
    }

    pub fn needs_image(self) -> bool {
        matches!(self, CorruptionKind::GaussianBlur | CorruptionKind::Contrast)
    }

    fn index(self) -> u64 {
        self as u64
    }
}

impl std::str::FromStr for CorruptionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionKind::ALL
            .into_iter()
            .find(|k| format!("{k:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown corruption {s:?}")))
    }
}

pub const NUM_SEVERITIES: usize = 5;

/// Per-severity parameters, index `severity − 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SeverityTables {
    /// Noise standard deviation as a fraction of the data range.
    pub gaussian_noise: [f64; NUM_SEVERITIES],
    /// Fraction of coordinates set to a domain extreme.
    pub impulse_noise: [f64; NUM_SEVERITIES],
    /// Blur kernel standard deviation in pixels.
    pub gaussian_blur: [f64; NUM_SEVERITIES],
    /// Contrast factor around the per-image mean.
    pub contrast: [f64; NUM_SEVERITIES],
}

impl Default for SeverityTables {
    fn default() -> Self {
        Self {
            gaussian_noise: [0.04, 0.06, 0.08, 0.09, 0.10],
            impulse_noise: [0.01, 0.02, 0.03, 0.05, 0.07],
            gaussian_blur: [0.4, 0.6, 0.7, 0.8, 1.0],
            contrast: [0.75, 0.5, 0.4, 0.3, 0.15],
        }
    }
}

impl SeverityTables {
    /// Tables under which every corruption leaves the data unchanged.
    pub fn identity() -> Self {
        Self {
            gaussian_noise: [0.0; NUM_SEVERITIES],
            impulse_noise: [0.0; NUM_SEVERITIES],
            gaussian_blur: [0.0; NUM_SEVERITIES],
            contrast: [1.0; NUM_SEVERITIES],
        }
    }

    pub fn param(&self, kind: CorruptionKind, severity: u8) -> Result<f64> {
        check_severity(severity)?;
        let i = usize::from(severity) - 1;
        Ok(match kind {
            CorruptionKind::GaussianNoise => self.gaussian_noise[i],
            CorruptionKind::ImpulseNoise => self.impulse_noise[i],
            CorruptionKind::GaussianBlur => self.gaussian_blur[i],
            CorruptionKind::Contrast => self.contrast[i],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: &[f64; NUM_SEVERITIES], hi: f64| v.iter().all(|x| *x >= 0.0 && *x <= hi);
        if !ok(&self.gaussian_noise, f64::MAX) || !ok(&self.gaussian_blur, f64::MAX) {
            return Err(Error::config("noise and blur parameters must be nonnegative and finite"));
        }
        if !ok(&self.impulse_noise, 1.0) {
            return Err(Error::config("impulse fractions must lie in [0, 1]"));
        }
        if !ok(&self.contrast, f64::MAX) {
            return Err(Error::config("contrast factors must be nonnegative"));
        }
        Ok(())
    }
}

fn check_severity(severity: u8) -> Result<()> {
    if (1..=NUM_SEVERITIES as u8).contains(&severity) {
        Ok(())
    } else {
        Err(Error::out_of_range("severity", f64::from(severity), "[1, 5]"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

/// Normalized truncated Gaussian kernel of radius `ceil(3σ)`; `[1]` for σ = 0.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable blur with clamp-to-edge borders.
fn blur(img: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = (kernel.len() / 2) as i64;
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let o = k as i64 - r;
                    let (ii, jj) = if horizontal {
                        (i, (j as i64 + o).clamp(0, w as i64 - 1) as usize)
                    } else {
                        ((i as i64 + o).clamp(0, h as i64 - 1) as usize, j)
                    };
                    acc += kv * src[ii * w + jj];
                }
                out[i * w + j] = acc;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Applies one corruption to every sample. Values are clipped to the data
/// domain, and quantized data are rounded back to integer levels.
pub fn corrupt(data: &Dataset, spec: CorruptionSpec, tables: &SeverityTables, seed: u64) -> Result<Dataset> {
    tables.validate()?;
    let p = tables.param(spec.kind, spec.severity)?;
    let (h, w) = match (spec.kind.needs_image(), data.sample_shape.as_slice()) {
        (true, [h, w]) => (*h, *w),
        (true, shape) => {
            return Err(Error::Shape(format!(
                "{:?} needs H×W samples, got shape {shape:?}",
                spec.kind
            )))
        }
        (false, _) => (0, 0),
    };
    let (lo, hi) = data.domain;
    let range = hi - lo;
    let d = data.dim();
    let mut out = Array2::zeros((data.len(), d));
    let kernel = gaussian_kernel(p);
    for i in 0..data.len() {
        let mut r = rng::stream(
            seed,
            "corrupt",
            &[spec.kind.index(), u64::from(spec.severity), i as u64],
        );
        let x = data.row(i);
        let y: Vec<f64> = match spec.kind {
            CorruptionKind::GaussianNoise => x
                .iter()
                .map(|v| {
                    let z: f64 = r.sample(StandardNormal);
                    v + p * range * z
                })
                .collect(),
            CorruptionKind::ImpulseNoise => x
                .iter()
                .map(|v| {
                    let hit = r.random::<f64>() < p;
                    let up = r.random::<bool>();
                    match (hit, up) {
                        (false, _) => *v,
                        (true, true) => hi,
                        (true, false) => lo,
                    }
                })
                .collect(),
            CorruptionKind::GaussianBlur => blur(&x, h, w, &kernel),
            CorruptionKind::Contrast => {
                let mean = x.iter().sum::<f64>() / d.max(1) as f64;
                x.iter().map(|v| p * v + (1.0 - p) * mean).collect()
            }
        };
        for (j, v) in y.into_iter().enumerate() {
            let v = v.clamp(lo, hi);
            out[[i, j]] = match data.levels {
                Some(levels) => v.round().clamp(0.0, f64::from(levels - 1)),
                None => v,
            };
        }
    }
    Dataset::new(
        out,
        data.labels.clone(),
        data.num_classes,
        data.sample_shape.clone(),
        data.levels,
        data.domain,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionGrid {
    pub kinds: Vec<CorruptionKind>,
    pub severities: Vec<u8>,
    pub tables: SeverityTables,
}

impl Default for CorruptionGrid {
    fn default() -> Self {
        Self {
            kinds: CorruptionKind::ALL.to_vec(),
            severities: (1..=NUM_SEVERITIES as u8).collect(),
            tables: SeverityTables::default(),
        }
    }
}

impl CorruptionGrid {
    pub fn identity() -> Self {
        Self {
            tables: SeverityTables::identity(),
            ..Self::default()
        }
    }

    /// The grid without the spatial kinds, for vector data.
    pub fn pointwise(mut self) -> Self {
        self.kinds.retain(|k| !k.needs_image());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionCell {
    pub kind: CorruptionKind,
    pub severity: u8,
    pub param: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionMatrix {
    pub cells: Vec<CorruptionCell>,
    pub mean_all: f64,
    /// Mean over cells whose kind is not a noise corruption; NaN when none.
    pub mean_without_noise: f64,
    pub tables: SeverityTables,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl CorruptionMatrix {
    pub fn from_cells(cells: Vec<CorruptionCell>, tables: SeverityTables) -> Self {
        Self {
            mean_all: mean(cells.iter().map(|c| c.accuracy)),
            mean_without_noise: mean(cells.iter().filter(|c| !c.kind.is_noise()).map(|c| c.accuracy)),
            cells,
            tables,
        }
    }

    /// `kind,severity,param,accuracy` rows followed by the two aggregates.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,severity,param,accuracy\n");
        for c in &self.cells {
            s += &format!("{:?},{},{},{}\n", c.kind, c.severity, c.param, c.accuracy);
        }
        s += &format!("mean_all,,,{}\n", self.mean_all);
        s += &format!("mean_without_noise,,,{}\n", self.mean_without_noise);
        s
    }
}

/// Accuracy for every (kind, severity) cell of the grid.
pub fn corruption_eval<M: ScoreModel + ?Sized>(
    model: &M,
    data: &Dataset,
    grid: &CorruptionGrid,
    seed: u64,
    cfg: &SolverCfg,
    tcfg: &TraceCfg,
) -> Result<CorruptionMatrix> {
    grid.tables.validate()?;
    let mut cells = Vec::new();
    for &kind in &grid.kinds {
        for &severity in &grid.severities {
            let spec = CorruptionSpec { kind, severity };
            let corrupted = corrupt(data, spec, &grid.tables, seed)?;
            let rep = evaluate_accuracy(model, &corrupted, cfg, tcfg)?;
            cells.push(CorruptionCell {
                kind,
                severity,
                param: grid.tables.param(kind, severity)?,
                accuracy: rep.accuracy,
            });
        }
    }
    Ok(CorruptionMatrix::from_cells(cells, grid.tables.clone()))
}
