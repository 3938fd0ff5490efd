//! Run configuration: defaults, then the `--config` file, then shorthand
//! flags, then dotted `--section.key value` overrides.

use std::path::PathBuf;

use nsmpp_core::evaluator::{EvalGrid, FigureConfig};
use nsmpp_core::simulator::DEFAULT_MAX_EVENTS;
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const CONFIG_NAME: &str = "config.toml";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand that produced the run directory; filled in when the resolved config is written.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub command: Option<String>,
    /// Master seed. Every random stream in a run is derived from it by name.
    pub seed: u64,
    pub domain: DomainSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub sim: SimSection,
    pub eval: EvalSection,
    pub io: IoSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSection {
    #[serde(rename = "T")]
    pub horizon: f64,
    pub mark_lo: Vec<f64>,
    pub mark_hi: Vec<f64>,
}

impl Default for DomainSection {
    fn default() -> Self {
        Self { horizon: 100.0, mark_lo: Vec::new(), mark_hi: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    #[serde(alias = "exponential")]
    Exp,
    Spectral,
    Basis,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub family: Family,
    pub mu: f64,
    pub mu_trainable: bool,
    /// Exponential family: generator parameters for `simulate`, starting point for `train`.
    pub alpha: f64,
    pub beta: f64,
    pub rank: usize,
    pub trunk: Vec<usize>,
    pub branch_hidden: Vec<usize>,
    pub output_scale: f64,
    /// Scale of the initial weight bounds of a fresh spectral net.
    pub gain: f64,
    /// Initial `ν_r`. When unset, `simulate` scales the spectrum so an event has
    /// `branching` expected children; `train` uses a mid-range estimate of that.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_init: Option<f64>,
    pub branching: f64,
    /// Number of cosine basis functions `S` for the basis family.
    pub basis_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            family: Family::Exp,
            mu: 1.0,
            mu_trainable: false,
            alpha: 0.5,
            beta: 1.0,
            rank: 5,
            trunk: vec![128, 128, 10],
            branch_hidden: vec![32, 32],
            output_scale: 100.0,
            gain: 1.0,
            nu_init: None,
            branching: 0.5,
            basis_size: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    #[serde(alias = "lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub mc_samples: usize,
    pub resample_each_step: bool,
    pub eval_every: usize,
    pub checkpoint_every: usize,
    pub holdout_fraction: f64,
    pub grad_clip: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = nsmpp_core::trainer::TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            iterations: t.iterations,
            mc_samples: t.mc.n_samples,
            resample_each_step: t.mc.resample_each_step,
            eval_every: t.eval_every,
            checkpoint_every: t.checkpoint_every,
            holdout_fraction: t.eval_holdout_fraction,
            grad_clip: t.grad_clip,
            adam_beta1: t.adam_beta1,
            adam_beta2: t.adam_beta2,
            adam_eps: t.adam_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub n: usize,
    pub max_events: usize,
}

impl Default for SimSection {
    fn default() -> Self {
        Self { n: 200, max_events: DEFAULT_MAX_EVENTS }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    /// Every sequence in the data file.
    All,
    /// The holdout part of the split `train` uses for the same seed and fraction.
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: EvalSplit,
    pub mc_samples: usize,
    pub time_nodes: usize,
    pub mark_nodes: usize,
    pub export_figures: bool,
    pub figures: FigureConfig,
}

impl Default for EvalSection {
    fn default() -> Self {
        let g = EvalGrid::default();
        Self {
            split: EvalSplit::All,
            mc_samples: 1000,
            time_nodes: g.time_nodes,
            mark_nodes: g.mark_nodes,
            export_figures: false,
            figures: FigureConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    /// Fitted model for `eval`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_model: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

const ALIASES: &[(&str, &str)] = &[("train.lr", "train.learning_rate"), ("model.kind", "model.family")];

/// Layered config as a TOML table, so overrides can address any key.
pub struct Layers {
    table: toml::Table,
}

impl Layers {
    pub fn new() -> Self {
        Self { table: toml::Table::new() }
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table =
            text.parse().map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        Ok(Self { table })
    }

    /// Sets a dotted key to a value written as a TOML literal, or a bare string.
    pub fn set_literal(&mut self, key: &str, raw: &str) -> Result<(), CliError> {
        self.set(key, parse_literal(raw))
    }

    pub fn set(&mut self, key: &str, value: toml::Value) -> Result<(), CliError> {
        let key = ALIASES.iter().find(|(a, _)| *a == key).map_or(key, |(_, k)| *k);
        let parts: Vec<&str> = key.split('.').collect();
        if parts.iter().any(|p| p.is_empty()) {
            return Err(CliError::Usage(format!("bad config key `{key}`")));
        }
        let (last, path) = parts.split_last().expect("split yields at least one part");
        let mut t = &mut self.table;
        for p in path {
            let entry = t.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            t = entry.as_table_mut().ok_or_else(|| CliError::Usage(format!("`{p}` in `{key}` is not a section")))?;
        }
        // A file may use the alias spelling; drop it so the override wins.
        if *last == "learning_rate" {
            t.remove("lr");
        }
        t.insert(last.to_string(), value);
        Ok(())
    }

    pub fn resolve(self) -> Result<RunConfig, CliError> {
        toml::Value::Table(self.table).try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub type Override = (String, String);

/// Pulls `--section.key value` and `--section.key=value` pairs out of argv.
pub fn extract_dotted(args: Vec<String>) -> Result<(Vec<String>, Vec<Override>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let (name, inline) = match body.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (body.to_string(), None),
        };
        if !name.contains('.') {
            rest.push(a);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| CliError::Usage(format!("--{name} needs a value")))?,
        };
        overrides.push((name, value));
    }
    Ok((rest, overrides))
}
