//! Configuration-driven pipeline runner, sensitivity grid and report.
//!
//! Every stage writes into a content-addressed directory under
//! `<root>/cache/<stage>-<hash>`; a stage whose directory already holds a
//! `stage.json` marker is loaded instead of recomputed. Directories are
//! assembled under a temporary name and renamed into place, so concurrent
//! cells that need the same stage never observe partial output.

mod grid;
mod pipeline;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::TrainConfig;
use crate::cohort::SimParams;
use crate::discretize::Anchoring;
use crate::embed::EmbedConfig;
use crate::metrics::{BootstrapConfig, SofaBuckets};
use crate::nnkit::CellKind;
use crate::ope::BehaviorConfig;
use crate::reward::{MortConfig, RewardSpec};
use crate::seed;

pub use grid::{run_grid, GridAxes, GridConfig, GridOutcome};
pub use pipeline::{
    run_experiment, EvalReport, GroundTruth, STAGES, InitiationRow, MarginalRow, RestartEval, RrRow, RunRecord, RunStatus, StageLog,
    SubgroupRow,
};
pub use report::{read_results, write_report, write_results};

/// Environment variable naming the output root.
pub const OUTPUT_ROOT_ENV: &str = "HEMOSENS_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "hemosens-out";
pub const RESULTS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage}: {msg}")]
    Stage { stage: String, msg: String },
    #[error("io: {0}")]
    Io(String),
}

impl HarnessError {
    pub fn stage(stage: &str, e: impl std::fmt::Display) -> Self {
        HarnessError::Stage {
            stage: stage.to_string(),
            msg: e.to_string(),
        }
    }

    pub fn is_config(&self) -> bool {
        matches!(self, HarnessError::Config(_))
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Output root from the environment, else `hemosens-out` in the working
/// directory.
pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulate {
        #[serde(default)]
        sim: SimParams,
    },
    /// A directory holding `events.jsonl` and optionally `static.csv`.
    Ingest { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulate { sim: SimParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSource,
    /// Fraction of patients in the training split.
    pub train_fraction: f64,
    /// Fraction of training patients held out to validate the embedding
    /// and the mortality model.
    pub val_fraction: f64,
    pub split_seed: u64,
    pub bin_hours: f64,
    pub anchoring: Anchoring,
    pub include_history: bool,
    pub embedding: CellKind,
    pub reward: RewardSpec,
    /// Random restarts of the Q-network.
    pub seeds: Vec<u64>,
    pub embed: EmbedConfig,
    pub mortality: MortConfig,
    pub agent: TrainConfig,
    pub behavior: BehaviorConfig,
    pub bootstrap: BootstrapConfig,
    pub eval_eps: f64,
    /// Monte Carlo rollouts for ground-truth values (simulated data only;
    /// 0 disables).
    pub ground_truth_rollouts: usize,
    pub sofa_buckets: SofaBuckets,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataSource::default(),
            train_fraction: 0.8,
            val_fraction: 0.1,
            split_seed: 0,
            bin_hours: 1.0,
            anchoring: Anchoring::Reanchor,
            include_history: true,
            embedding: CellKind::Lstm,
            reward: RewardSpec::ShortTerm,
            seeds: vec![0, 1, 2, 3, 4],
            embed: EmbedConfig::default(),
            mortality: MortConfig::default(),
            agent: TrainConfig {
                steps: 20_000,
                ..TrainConfig::default()
            },
            behavior: BehaviorConfig::default(),
            bootstrap: BootstrapConfig::default(),
            eval_eps: crate::ope::EVAL_EPS,
            ground_truth_rollouts: 0,
            sofa_buckets: SofaBuckets::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.bin_hours != 1.0 && self.bin_hours != 4.0 {
            return bad(format!("bin_hours must be 1 or 4, got {}", self.bin_hours));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) || !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("train_fraction and val_fraction must lie in (0, 1)".into());
        }
        if self.seeds.is_empty() {
            return bad("at least one seed required".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return bad("seeds must be distinct".into());
        }
        if let RewardSpec::LongTerm { c } = self.reward {
            if !(c > 0.0) {
                return bad(format!("reward C must be positive, got {c}"));
            }
        }
        if !(self.eval_eps > 0.0 && self.eval_eps <= 1.0) {
            return bad("eval_eps must lie in (0, 1]".into());
        }
        if let DataSource::Simulate { sim } = &self.data {
            sim.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        }
        self.agent.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(())
    }

    /// Seeds in ascending order.
    pub fn sorted_seeds(&self) -> Vec<u64> {
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s
    }

    /// Short human-readable cell label.
    pub fn label(&self) -> String {
        format!(
            "{}h-{}-{}-{}",
            self.bin_hours,
            if self.include_history { "hist" } else { "nohist" },
            match self.embedding {
                CellKind::Lstm => "lstm",
                CellKind::Gru => "gru",
            },
            self.reward.label()
        )
    }

    /// Hash of the canonical form (sorted keys, seeds sorted).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seeds.sort_unstable();
        canonical_hash(&c)
    }
}

/// SHA-256 of the canonical JSON of `v`: object keys sorted, numbers in
/// shortest round-trip form.
pub fn canonical_hash<T: Serialize>(v: &T) -> String {
    seed::sha256_hex(canonical_json(v).as_bytes())
}

pub fn canonical_json<T: Serialize>(v: &T) -> String {
    fn sort(v: serde_json::Value) -> serde_json::Value {
        match v {
            serde_json::Value::Object(m) => {
                let sorted: BTreeMap<String, serde_json::Value> = m.into_iter().map(|(k, v)| (k, sort(v))).collect();
                serde_json::Value::Object(sorted.into_iter().collect())
            }
            serde_json::Value::Array(a) => serde_json::Value::Array(a.into_iter().map(sort).collect()),
            other => other,
        }
    }
    serde_json::to_string(&sort(serde_json::to_value(v).expect("serializable"))).expect("json")
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_seed_order() {
        let a = ExperimentConfig {
            seeds: vec![3, 1, 2],
            ..Default::default()
        };
        let b = ExperimentConfig {
            seeds: vec![1, 2, 3],
            ..Default::default()
        };
        assert_eq!(a.hash(), b.hash());
        let c = ExperimentConfig {
            seeds: vec![1, 2, 4],
            ..Default::default()
        };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn toml_roundtrip() {
        let cfg = ExperimentConfig {
            reward: RewardSpec::LongTerm { c: 10.0 },
            ..Default::default()
        };
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        assert!(ExperimentConfig::from_toml("bin_hours = 2.0").unwrap_err().is_config());
        assert!(ExperimentConfig::from_toml("nonsense = 1").is_err());
    }
}
