use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::actions::{encode_action, episode_rates, fit_action_bins, ActionBinning};
use super::{Anchoring, BinnedTrajectory, DiscretizeError, Result, Treatment};
use crate::cohort::{Event, Outcome, CHANNELS, SOFA_CHANNEL};
use crate::numeric::KahanSum;
use crate::seed::sha256_hex;

pub const PREP_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureSpec {
    pub channels: Vec<String>,
    pub statics: Vec<String>,
    /// Append cumulative iv and vaso dose delivered before the bin.
    pub include_history: bool,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            channels: CHANNELS.iter().map(|s| s.to_string()).collect(),
            statics: vec!["age".into(), "elixhauser".into(), "weight".into()],
            include_history: true,
        }
    }
}

impl FeatureSpec {
    pub fn feature_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for c in &self.channels {
            for s in ["mean", "max", "min"] {
                out.push(format!("{c}_{s}"));
            }
        }
        out.extend(self.statics.iter().map(|s| format!("static_{s}")));
        if self.include_history {
            out.push("cum_iv_fluid".into());
            out.push("cum_vasopressor".into());
        }
        out
    }

    pub fn dim(&self) -> usize {
        3 * self.channels.len() + self.statics.len() + if self.include_history { 2 } else { 0 }
    }
}

/// Forward-filled but unstandardized rows; `None` marks a value never
/// observed so far.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub patient_id: String,
    pub rows: Vec<Vec<Option<f64>>>,
}

/// Builds one row per bin, carrying forward-fill and dose state.
struct RowBuilder<'a> {
    spec: &'a FeatureSpec,
    index: HashMap<&'a str, usize>,
    last: Vec<Option<f64>>,
    cum: (f64, f64),
}

impl<'a> RowBuilder<'a> {
    fn new(spec: &'a FeatureSpec) -> Self {
        Self {
            spec,
            index: spec.channels.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect(),
            last: vec![None; spec.channels.len()],
            cum: (0.0, 0.0),
        }
    }

    fn row(
        &mut self,
        patient: &str,
        statics: &BTreeMap<String, f64>,
        measurements: &[Event],
        doses: (f64, f64),
    ) -> Result<Vec<Option<f64>>> {
        let nc = self.spec.channels.len();
        let mut acc: Vec<(KahanSum, f64, f64, usize)> = vec![(KahanSum::new(), f64::NEG_INFINITY, f64::INFINITY, 0); nc];
        for m in measurements {
            let &c = self.index.get(m.name.as_str()).ok_or_else(|| DiscretizeError::UnknownChannel {
                patient: patient.to_string(),
                channel: m.name.clone(),
            })?;
            let a = &mut acc[c];
            a.0.add(m.value);
            a.1 = a.1.max(m.value);
            a.2 = a.2.min(m.value);
            a.3 += 1;
            self.last[c] = Some(m.value);
        }
        let mut row = Vec::with_capacity(self.spec.dim());
        for (c, a) in acc.iter().enumerate() {
            if a.3 > 0 {
                row.extend([Some(a.0.value() / a.3 as f64), Some(a.1), Some(a.2)]);
            } else {
                row.extend([self.last[c]; 3]);
            }
        }
        row.extend(self.spec.statics.iter().map(|s| statics.get(s).copied()));
        if self.spec.include_history {
            row.push(Some(self.cum.0));
            row.push(Some(self.cum.1));
        }
        self.cum.0 += doses.0;
        self.cum.1 += doses.1;
        Ok(row)
    }
}

pub fn raw_features(traj: &BinnedTrajectory, spec: &FeatureSpec) -> Result<RawFeatures> {
    let mut b = RowBuilder::new(spec);
    let rows = traj
        .bins
        .iter()
        .map(|bin| b.row(&traj.patient_id, &traj.statics, &bin.measurements, bin.doses()))
        .collect::<Result<_>>()?;
    Ok(RawFeatures {
        patient_id: traj.patient_id.clone(),
        rows,
    })
}

/// Per-column z-scoring. Missing values are filled with the column mean, so
/// they standardize to exactly 0; the sd is taken over the filled column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
}

impl Standardizer {
    pub fn fit(raw: &[RawFeatures], dim: usize) -> Self {
        let mut mean = vec![0.0; dim];
        let mut sd = vec![1.0; dim];
        let total: usize = raw.iter().map(|r| r.rows.len()).sum();
        for j in 0..dim {
            let vals = || raw.iter().flat_map(|r| r.rows.iter().filter_map(move |row| row[j]));
            let mut s = KahanSum::new();
            let mut n = 0usize;
            for v in vals() {
                s.add(v);
                n += 1;
            }
            if n == 0 {
                continue;
            }
            let mu = s.value() / n as f64;
            let mut ss = KahanSum::new();
            for v in vals() {
                ss.add((v - mu) * (v - mu));
            }
            let var = ss.value() / total as f64;
            mean[j] = mu;
            sd[j] = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
        Self { mean, sd }
    }

    pub fn apply(&self, row: &[Option<f64>]) -> Vec<f64> {
        row.iter()
            .zip(self.mean.iter().zip(&self.sd))
            .map(|(v, (m, s))| (v.unwrap_or(*m) - m) / s)
            .collect()
    }
}

/// Everything fitted on the training split that test-time encoding needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prep {
    pub schema_version: u32,
    pub bin_hours: f64,
    pub anchoring: Anchoring,
    pub spec: FeatureSpec,
    pub feature_names: Vec<String>,
    pub standardizer: Standardizer,
    pub binning: ActionBinning,
}

impl Prep {
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("prep serializes").as_bytes())
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }
}

/// Fits action bins and the standardizer on training trajectories.
pub fn prepare(train: &[BinnedTrajectory], spec: &FeatureSpec, anchoring: Anchoring) -> Result<Prep> {
    let first = train
        .first()
        .ok_or_else(|| DiscretizeError::Split("no training trajectories".into()))?;
    if let Some(t) = train.iter().find(|t| t.bin_hours != first.bin_hours) {
        return Err(DiscretizeError::PrepMismatch(format!(
            "mixed bin widths {} and {}",
            first.bin_hours, t.bin_hours
        )));
    }
    let binning = ActionBinning {
        iv: fit_action_bins(train, Treatment::IvFluid)?,
        vaso: fit_action_bins(train, Treatment::Vasopressor)?,
    };
    let raw = crate::par::map(train, |t| raw_features(t, spec)).into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Prep {
        schema_version: PREP_SCHEMA_VERSION,
        bin_hours: first.bin_hours,
        anchoring,
        spec: spec.clone(),
        feature_names: spec.feature_names(),
        standardizer: Standardizer::fit(&raw, spec.dim()),
        binning,
    })
}

/// One patient's discretized episode. `actions[t]` is the dose chosen at the
/// end of bin `t`; the last bin is terminal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEpisode {
    pub patient_id: String,
    pub bins: Vec<(f64, f64)>,
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    /// In-bin SOFA (mean of measurements, else carried forward).
    pub sofa: Vec<Option<f64>>,
    pub outcome: Outcome,
}

impl FeatureEpisode {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }
}

pub fn featurize(traj: &BinnedTrajectory, prep: &Prep) -> Result<FeatureEpisode> {
    if traj.bin_hours != prep.bin_hours {
        return Err(DiscretizeError::PrepMismatch(format!(
            "trajectory bin width {} vs prep {}",
            traj.bin_hours, prep.bin_hours
        )));
    }
    let raw = raw_features(traj, &prep.spec)?;
    let sofa_col = prep.spec.channels.iter().position(|c| c == SOFA_CHANNEL).map(|i| 3 * i);
    let actions = episode_rates(traj)
        .into_iter()
        .map(|(iv, vp)| encode_action(iv, vp, &prep.binning))
        .collect::<Result<_>>()?;
    Ok(FeatureEpisode {
        patient_id: traj.patient_id.clone(),
        bins: traj.bins.iter().map(|b| (b.start, b.end)).collect(),
        sofa: raw.rows.iter().map(|r| sofa_col.and_then(|c| r[c])).collect(),
        features: raw.rows.iter().map(|r| prep.standardizer.apply(r)).collect(),
        actions,
        outcome: traj.outcome,
    })
}

/// Bin-by-bin featurization for policy rollouts; produces the same rows as
/// [`featurize`] on the completed log.
pub struct OnlineFeaturizer<'a> {
    prep: &'a Prep,
    builder: RowBuilder<'a>,
}

impl<'a> OnlineFeaturizer<'a> {
    pub fn new(prep: &'a Prep) -> Self {
        Self {
            prep,
            builder: RowBuilder::new(&prep.spec),
        }
    }

    /// Standardized features of a closed bin; `doses` is what the bin delivered.
    pub fn push(
        &mut self,
        patient: &str,
        statics: &BTreeMap<String, f64>,
        measurements: &[Event],
        doses: (f64, f64),
    ) -> Result<Vec<f64>> {
        let row = self.builder.row(patient, statics, measurements, doses)?;
        Ok(self.prep.standardizer.apply(&row))
    }
}
