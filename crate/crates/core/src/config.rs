//! Run configuration shared by every command, with a stable content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{GmmSpec, ToyImageSpec};
use crate::error::{Error, Result};
use crate::experiments::interp::DEFAULT_GRID_POINTS;
use crate::experiments::trace_conv::DEFAULT_PROBE_GRID;
use crate::flow::{SolverCfg, TraceCfg};
use crate::robust::attack::{L2_EPS, LINF_EPS_FRACTION};
use crate::robust::{AttackCfg, CorruptionGrid, Norm};
use crate::score::Activation;
use crate::sde::SdeSpec;
use crate::train::TrainCfg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    #[default]
    Gmm,
    ToyImage,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataCfg {
    pub kind: DataKind,
    pub gmm: GmmSpec,
    pub toy_image: ToyImageSpec,
    pub n_train_per_class: usize,
    pub n_test_per_class: usize,
}

impl Default for DataCfg {
    fn default() -> Self {
        Self {
            kind: DataKind::Gmm,
            gmm: GmmSpec::ring(3, 2, 0.5, 0.25, (-4.0, 4.0)),
            toy_image: ToyImageSpec::default(),
            n_train_per_class: 2000,
            n_test_per_class: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelCfg {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub time_embed_dim: usize,
}

impl Default for ModelCfg {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            activation: Activation::default(),
            time_embed_dim: crate::score::DEFAULT_TIME_EMBED_DIM,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackSection {
    pub norms: Vec<Norm>,
    /// ℓ∞ budget as a fraction of the model-input range.
    pub linf_eps_fraction: f64,
    pub l2_eps: f64,
    /// Step size as a fraction of the budget.
    pub step_fraction: f64,
    pub n_steps: usize,
    pub random_start: bool,
    pub fixed_steps: usize,
    pub early_stop_margin: Option<f64>,
    /// Hutchinson probe count for attack runs on Hutchinson traces.
    pub n_probes: usize,
    pub n_samples: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        let a = AttackCfg::default();
        Self {
            norms: vec![Norm::Linf, Norm::L2],
            linf_eps_fraction: LINF_EPS_FRACTION,
            l2_eps: L2_EPS,
            step_fraction: 0.25,
            n_steps: a.n_steps,
            random_start: a.random_start,
            fixed_steps: a.fixed_steps,
            early_stop_margin: a.early_stop_margin,
            n_probes: 10,
            n_samples: 200,
        }
    }
}

impl AttackSection {
    /// Attack settings for `norm` on inputs spanning `range`.
    pub fn attack_cfg(&self, norm: Norm, range: f64, seed: u64) -> AttackCfg {
        let eps = match norm {
            Norm::Linf => self.linf_eps_fraction * range,
            Norm::L2 => self.l2_eps,
        };
        AttackCfg {
            norm,
            eps,
            step_size: Some(self.step_fraction * eps).filter(|s| *s > 0.0),
            n_steps: self.n_steps,
            random_start: self.random_start,
            fixed_steps: self.fixed_steps,
            early_stop_margin: self.early_stop_margin,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionSection {
    pub grid: CorruptionGrid,
    pub n_samples: usize,
}

impl Default for CorruptionSection {
    fn default() -> Self {
        Self {
            grid: CorruptionGrid::default(),
            n_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentCfg {
    pub eval_samples: usize,
    pub interp_pairs: usize,
    pub interp_points: usize,
    pub probe_grid: Vec<usize>,
    pub trace_samples: usize,
}

impl Default for ExperimentCfg {
    fn default() -> Self {
        Self {
            eval_samples: 300,
            interp_pairs: 100,
            interp_points: DEFAULT_GRID_POINTS,
            probe_grid: DEFAULT_PROBE_GRID.to_vec(),
            trace_samples: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct Config {
    pub seed: u64,
    pub sde: SdeSpec,
    pub solver: SolverCfg,
    pub trace: TraceCfg,
    pub data: DataCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
    pub attack: AttackSection,
    pub corruption: CorruptionSection,
    pub experiments: ExperimentCfg,
}


impl Config {
    pub fn from_json(s: &str) -> Result<Self> {
        let c: Config = serde_json::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.sde.validate()?;
        self.solver.validate()?;
        self.trace.validate()?;
        self.data.gmm.validate()?;
        self.corruption.grid.tables.validate()?;
        if self.experiments.interp_points < 3 {
            return Err(Error::config("interp_points must be at least 3"));
        }
        Ok(())
    }

    /// Keys sorted, no whitespace.
    pub fn canonical_json(&self) -> String {
        // serde_json maps are ordered by key, so a round trip through Value sorts them
        let v = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string(&v).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON.
    pub fn hash(&self) -> String {
        let d = Sha256::digest(self.canonical_json().as_bytes());
        d.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
