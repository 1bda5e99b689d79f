use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pipeline::{run_experiment, RunRecord, RunStatus};
use super::report::{write_report, write_results};
use super::{canonical_hash, write_atomic, ExperimentConfig, HarnessError, Result, RESULTS_SCHEMA_VERSION};
use crate::nnkit::CellKind;
use crate::par;
use crate::reward::RewardSpec;

/// Value lists per axis; an absent axis keeps the base value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridAxes {
    pub bin_hours: Option<Vec<f64>>,
    pub include_history: Option<Vec<bool>>,
    pub embedding: Option<Vec<CellKind>>,
    pub reward: Option<Vec<RewardSpec>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub base: ExperimentConfig,
    pub axes: GridAxes,
    pub max_cells: usize,
    /// Concurrent cells (0 = one per core).
    pub workers: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            base: ExperimentConfig::default(),
            axes: GridAxes::default(),
            max_cells: 64,
            workers: 0,
        }
    }
}

impl GridConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let g: Self = toml::from_str(s).map_err(|e| HarnessError::Config(e.to_string()))?;
        g.cells()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&s)
    }

    /// Cartesian product in axis order: bin width, history, embedding,
    /// reward.
    pub fn cells(&self) -> Result<Vec<ExperimentConfig>> {
        let b = &self.base;
        let bins = self.axes.bin_hours.clone().unwrap_or_else(|| vec![b.bin_hours]);
        let hist = self.axes.include_history.clone().unwrap_or_else(|| vec![b.include_history]);
        let emb = self.axes.embedding.clone().unwrap_or_else(|| vec![b.embedding]);
        let rew = self.axes.reward.clone().unwrap_or_else(|| vec![b.reward]);
        if [bins.len(), hist.len(), emb.len(), rew.len()].contains(&0) {
            return Err(HarnessError::Config("grid axes must not be empty".into()));
        }
        let n = bins.len() * hist.len() * emb.len() * rew.len();
        if n > self.max_cells {
            return Err(HarnessError::Config(format!("grid has {n} cells, limit {}", self.max_cells)));
        }
        let mut out = Vec::with_capacity(n);
        for &bin_hours in &bins {
            for &include_history in &hist {
                for &embedding in &emb {
                    for &reward in &rew {
                        let c = ExperimentConfig {
                            bin_hours,
                            include_history,
                            embedding,
                            reward,
                            ..b.clone()
                        };
                        c.validate()?;
                        out.push(c);
                    }
                }
            }
        }
        let mut labels: Vec<String> = out.iter().map(|c| c.label()).collect();
        labels.sort();
        labels.dedup();
        if labels.len() != out.len() {
            return Err(HarnessError::Config("grid axes contain duplicate values".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct GridOutcome {
    pub records: Vec<RunRecord>,
    pub report_dir: PathBuf,
}

/// Runs every cell under `root`, isolating failures, then writes
/// `results.jsonl`, `manifest.json` and the report.
pub fn run_grid(grid: &GridConfig, root: &Path) -> Result<GridOutcome> {
    let cells = grid.cells()?;
    let records: Vec<RunRecord> = par::bounded(grid.workers, || {
        par::map(&cells, |c| {
            run_experiment(c, root, None).unwrap_or_else(|e| RunRecord {
                schema_version: RESULTS_SCHEMA_VERSION,
                label: c.label(),
                config_hash: c.hash(),
                config: c.clone(),
                status: RunStatus::Failed {
                    stage: "setup".into(),
                    error: e.to_string(),
                },
                snapshots: Vec::new(),
                eval: None,
                stages: Vec::new(),
                wall_clock_secs: 0.0,
                version: env!("CARGO_PKG_VERSION").to_string(),
            })
        })
    });
    write_results(&root.join("results.jsonl"), &records)?;
    let manifest = serde_json::json!({
        "schema_version": RESULTS_SCHEMA_VERSION,
        "grid_hash": canonical_hash(&(&grid.base.hash(), &grid.axes)),
        "cells": records.iter().map(|r| serde_json::json!({
            "label": r.label,
            "config_hash": r.config_hash,
            "status": r.status,
        })).collect::<Vec<_>>(),
    });
    write_atomic(
        &root.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest").as_bytes(),
    )?;
    let report_dir = root.join("report");
    write_report(&records, &report_dir)?;
    Ok(GridOutcome { records, report_dir })
}
