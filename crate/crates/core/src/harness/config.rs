use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize};
use serde_json::Value;

use crate::cluster::{CheckpointModel, ComputeModel, NetworkModel};
use crate::error::{Error, Result};
use crate::models::{ClimateConfig, HepConfig};
use crate::solvers::SolverConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    HepMini,
    ClimateMini,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub n: usize,
    /// HEP only.
    pub signal_fraction: f64,
    /// Load this container instead of generating.
    pub path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 1,
            n: 20000,
            signal_fraction: 0.09,
            path: None,
        }
    }
}

/// Strong scaling fixes the batch per update; weak scaling fixes it per node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchMode {
    Strong { total_batch: usize },
    Weak { batch_per_node: usize },
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn default_sweep_nodes() -> Vec<usize> {
    (0..=10).map(|e| 1 << e).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterConfig {
    /// Nodes for `train` and `sweep-groups`, parameter servers included.
    pub total_nodes: usize,
    /// A number or a list; sweeps iterate over the list.
    #[serde(deserialize_with = "one_or_many")]
    pub groups: Vec<usize>,
    /// Compute-node counts for the scaling sweeps (parameter servers extra).
    #[serde(default = "default_sweep_nodes")]
    pub nodes: Vec<usize>,
    pub batch: BatchMode,
    #[serde(default)]
    pub overlap: bool,
    #[serde(default)]
    pub checkpoint: CheckpointModel,
}

fn default_momentum_grid() -> Vec<f64> {
    vec![0.0, 0.4, 0.7]
}

fn default_true() -> bool {
    true
}

fn default_repeats() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelKind,
    #[serde(default)]
    pub hep: HepConfig,
    #[serde(default)]
    pub climate: ClimateConfig,
    #[serde(default)]
    pub data: DataConfig,
    pub solver: SolverConfig,
    /// Momentum values tried by `sweep-groups` for hybrid runs (`beta1` for Adam).
    #[serde(default = "default_momentum_grid")]
    pub momentum_grid: Vec<f64>,
    /// Learning rates tried by `sweep-groups`; empty means `solver.lr` only.
    #[serde(default)]
    pub lr_grid: Vec<f64>,
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub network: NetworkModel,
    /// Defaults to the profile of the chosen model.
    #[serde(default)]
    pub compute: Option<ComputeModel>,
    pub iterations: u64,
    /// Sustained-rate window in iterations.
    pub window: usize,
    /// Run real gradient math; when false only the timing model runs.
    #[serde(default = "default_true")]
    pub math: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub target_loss: Option<f64>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: ExperimentConfig =
            serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("malformed config {}: {e}", path.display())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn compute_model(&self) -> ComputeModel {
        self.compute.clone().unwrap_or_else(|| match self.model {
            ModelKind::HepMini => ComputeModel::hep(),
            ModelKind::ClimateMini => ComputeModel::climate(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::Config(format!("{field}: {msg}")));
        if self.iterations == 0 {
            return bad("iterations", "must be positive".into());
        }
        if self.window == 0 {
            return bad("window", "must be positive".into());
        }
        if self.repeats == 0 {
            return bad("repeats", "must be positive".into());
        }
        if self.cluster.groups.is_empty() || self.cluster.groups.contains(&0) {
            return bad("cluster.groups", format!("must be positive, got {:?}", self.cluster.groups));
        }
        if self.cluster.nodes.is_empty() || self.cluster.nodes.contains(&0) {
            return bad("cluster.nodes", format!("must be positive, got {:?}", self.cluster.nodes));
        }
        match self.cluster.batch {
            BatchMode::Strong { total_batch } => {
                if total_batch == 0 {
                    return bad("cluster.batch.strong.total_batch", "must be positive".into());
                }
                if let Some(g) = self.cluster.groups.iter().find(|&&g| total_batch % g != 0) {
                    return bad(
                        "cluster.batch.strong.total_batch",
                        format!("{total_batch} is not divisible by {g} groups"),
                    );
                }
            }
            BatchMode::Weak { batch_per_node } => {
                if batch_per_node == 0 {
                    return bad("cluster.batch.weak.batch_per_node", "must be positive".into());
                }
            }
        }
        if let Some(m) = self.momentum_grid.iter().find(|m| !(0.0..1.0).contains(*m)) {
            return bad("momentum_grid", format!("values must lie in [0, 1), got {m}"));
        }
        if let Some(lr) = self.lr_grid.iter().find(|lr| !(**lr > 0.0 && lr.is_finite())) {
            return bad("lr_grid", format!("values must be positive, got {lr}"));
        }
        if self.model == ModelKind::HepMini && !(self.data.signal_fraction > 0.0 && self.data.signal_fraction < 1.0) {
            return bad("data.signal_fraction", format!("must lie in (0, 1), got {}", self.data.signal_fraction));
        }
        if self.data.n == 0 && self.data.path.is_none() {
            return bad("data.n", "must be positive".into());
        }
        if let Some(t) = self.target_loss {
            if !t.is_finite() {
                return bad("target_loss", "must be finite".into());
            }
        }
        self.solver
            .validate()
            .map_err(|e| Error::Config(format!("solver: {e}")))?;
        self.network
            .validate()
            .map_err(|e| Error::Config(format!("network: {e}")))?;
        self.compute_model()
            .validate()
            .map_err(|e| Error::Config(format!("compute: {e}")))
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible and
/// taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override '{assignment}' is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override key '{key}' is malformed")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = match node {
            Value::Object(map) => map,
            _ => {
                return Err(Error::Config(format!(
                    "override '{key}': '{}' is not an object",
                    parts[..i].join(".")
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("non-empty key")
}
