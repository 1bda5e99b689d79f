//! Descriptive statistics over per-patient action sequences: joint and
//! marginal action distributions, cluster-bootstrap CIs, relative risks,
//! initiation rates, cross-restart variation and SOFA subgroups.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::{decode_action, Treatment};
use crate::numeric::{mean, quantile_sorted, sample_sd};
use crate::{par, seed, DOSE_BINS, N_ACTIONS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("invalid action {0}")]
    Action(usize),
    #[error("episode {0}: SOFA never observed")]
    MissingSofa(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Row labels for marginal tables.
pub const CATEGORY_LABELS: [&str; DOSE_BINS] = ["No action", "1st", "2nd", "3rd", "4th"];

fn tr_index(t: Treatment) -> usize {
    match t {
        Treatment::IvFluid => 0,
        Treatment::Vasopressor => 1,
    }
}

fn dose_bin(action: usize, t: Treatment) -> usize {
    let (iv, vp) = decode_action(action).expect("validated action");
    [iv, vp][tr_index(t)]
}

fn validate(actions: &[Vec<usize>]) -> Result<()> {
    if actions.iter().all(|e| e.is_empty()) {
        return Err(MetricsError::Empty);
    }
    match actions.iter().flatten().find(|&&a| a >= N_ACTIONS) {
        Some(&a) => Err(MetricsError::Action(a)),
        None => Ok(()),
    }
}

/// Counts over the 5×5 (iv bin, vasopressor bin) grid.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub counts: [[u64; DOSE_BINS]; DOSE_BINS],
    pub total: u64,
}

impl ActionDistribution {
    pub fn from_actions<'a>(actions: impl IntoIterator<Item = &'a usize>) -> Result<Self> {
        let mut counts = [[0u64; DOSE_BINS]; DOSE_BINS];
        let mut total = 0;
        for &a in actions {
            let (iv, vp) = decode_action(a).map_err(|_| MetricsError::Action(a))?;
            counts[iv][vp] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(MetricsError::Empty);
        }
        Ok(Self { counts, total })
    }

    /// One recommended or logged action per person-time.
    pub fn from_episodes(actions: &[Vec<usize>]) -> Result<Self> {
        validate(actions)?;
        Self::from_actions(actions.iter().flatten())
    }

    pub fn frequency(&self, iv: usize, vp: usize) -> f64 {
        self.counts[iv][vp] as f64 / self.total as f64
    }

    /// Frequencies in action-index order (`iv·5 + vp`).
    pub fn frequencies(&self) -> [f64; N_ACTIONS] {
        let mut f = [0.0; N_ACTIONS];
        for (a, v) in f.iter_mut().enumerate() {
            *v = self.frequency(a / DOSE_BINS, a % DOSE_BINS);
        }
        f
    }

    pub fn marginal(&self, t: Treatment) -> [f64; DOSE_BINS] {
        let mut m = [0u64; DOSE_BINS];
        for (iv, row) in self.counts.iter().enumerate() {
            for (vp, &c) in row.iter().enumerate() {
                m[[iv, vp][tr_index(t)]] += c;
            }
        }
        m.map(|c| c as f64 / self.total as f64)
    }

    /// `iv_bin,vp_bin,frequency` rows.
    pub fn heatmap_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["iv_bin", "vp_bin", "frequency"]).expect("in-memory write");
        for iv in 0..DOSE_BINS {
            for vp in 0..DOSE_BINS {
                w.write_record([iv.to_string(), vp.to_string(), format!("{:.6}", self.frequency(iv, vp))])
                    .expect("in-memory write");
            }
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ci {
    pub point: f64,
    pub lo: f64,
    pub hi: f64,
    pub level: f64,
    pub n_boot: usize,
    /// Set when the percentile interval fails to bracket the point.
    pub flagged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BootstrapConfig {
    pub n_boot: usize,
    pub level: f64,
    pub seed: u64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            n_boot: 1000,
            level: 0.95,
            seed: 0,
        }
    }
}

/// Replicates of `stat` over patient resamples (indices drawn with
/// replacement from `0..n`). Replicate `b` uses its own derived stream.
pub fn bootstrap_replicates<F>(n: usize, cfg: &BootstrapConfig, stat: F) -> Vec<f64>
where
    F: Fn(&[usize]) -> f64 + Sync + Send,
{
    par::map_range(cfg.n_boot, |b| {
        let mut rng = seed::rng(seed::derive_idx(cfg.seed, "bootstrap", b as u64));
        let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
        stat(&idx)
    })
}

/// Percentile interval of the finite replicates around `point`.
pub fn percentile_ci(point: f64, replicates: &[f64], level: f64) -> Ci {
    let mut r: Vec<f64> = replicates.iter().cloned().filter(|v| v.is_finite()).collect();
    r.sort_by(f64::total_cmp);
    let (lo, hi) = if r.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let a = (1.0 - level) / 2.0;
        (quantile_sorted(&r, a), quantile_sorted(&r, 1.0 - a))
    };
    Ci {
        point,
        lo,
        hi,
        level,
        n_boot: replicates.len(),
        flagged: !(lo <= point && point <= hi),
    }
}

/// Cluster bootstrap percentile CI for a statistic of patients `0..n`.
pub fn bootstrap_ci<F>(n: usize, cfg: &BootstrapConfig, stat: F) -> Result<Ci>
where
    F: Fn(&[usize]) -> f64 + Sync + Send,
{
    if n < 2 {
        return Err(MetricsError::Invalid("bootstrap needs at least two clusters".into()));
    }
    if !(cfg.level > 0.0 && cfg.level < 1.0) || cfg.n_boot == 0 {
        return Err(MetricsError::Invalid("level must lie in (0, 1) and n_boot > 0".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let point = stat(&all);
    Ok(percentile_ci(point, &bootstrap_replicates(n, cfg, stat), cfg.level))
}

fn category_share(actions: &[Vec<usize>], idx: &[usize], t: Treatment, category: usize) -> f64 {
    let (mut hit, mut total) = (0u64, 0u64);
    for &i in idx {
        for &a in &actions[i] {
            hit += (dose_bin(a, t) == category) as u64;
            total += 1;
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        hit as f64 / total as f64
    }
}

/// Marginal share of `category` with a cluster-bootstrap CI.
pub fn marginal_ci(actions: &[Vec<usize>], t: Treatment, category: usize, cfg: &BootstrapConfig) -> Result<Ci> {
    validate(actions)?;
    bootstrap_ci(actions.len(), cfg, |idx| category_share(actions, idx, t, category))
}

/// Paired difference `share_new − share_base` of a marginal category in
/// percentage points, with a cluster bootstrap over the shared patients.
pub fn difference_ci(new: &[Vec<usize>], base: &[Vec<usize>], t: Treatment, category: usize, cfg: &BootstrapConfig) -> Result<Ci> {
    validate(new)?;
    validate(base)?;
    if new.len() != base.len() {
        return Err(MetricsError::Invalid("arms must cover the same patients".into()));
    }
    bootstrap_ci(new.len(), cfg, |idx| 100.0 * (category_share(new, idx, t, category) - category_share(base, idx, t, category)))
}

/// `freq_new / freq_base`; `None` when the base frequency is zero.
pub fn rr(freq_new: f64, freq_base: f64) -> Option<f64> {
    (freq_base > 0.0).then(|| freq_new / freq_base)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelativeRisk {
    /// `None` when the base arm never uses the category.
    pub ci: Option<Ci>,
    pub bootstrap_mean: Option<f64>,
}

/// Relative risk of a marginal category between two arms over the same
/// patients, with a paired cluster bootstrap.
pub fn relative_risk(
    new: &[Vec<usize>],
    base: &[Vec<usize>],
    t: Treatment,
    category: usize,
    cfg: &BootstrapConfig,
) -> Result<RelativeRisk> {
    validate(new)?;
    validate(base)?;
    if new.len() != base.len() {
        return Err(MetricsError::Invalid("arms must cover the same patients".into()));
    }
    let all: Vec<usize> = (0..new.len()).collect();
    let stat = |idx: &[usize]| {
        rr(category_share(new, idx, t, category), category_share(base, idx, t, category)).unwrap_or(f64::NAN)
    };
    let Some(point) = rr(category_share(new, &all, t, category), category_share(base, &all, t, category)) else {
        return Ok(RelativeRisk {
            ci: None,
            bootstrap_mean: None,
        });
    };
    let reps = bootstrap_replicates(new.len(), cfg, stat);
    let finite: Vec<f64> = reps.iter().cloned().filter(|v| v.is_finite()).collect();
    Ok(RelativeRisk {
        ci: Some(percentile_ci(point, &reps, cfg.level)),
        bootstrap_mean: (!finite.is_empty()).then(|| mean(&finite)),
    })
}

/// Signed percentage-point differences `a − b` per category.
pub fn distribution_diff(a: &[f64; DOSE_BINS], b: &[f64; DOSE_BINS]) -> [f64; DOSE_BINS] {
    std::array::from_fn(|k| 100.0 * (a[k] - b[k]))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitiationVariant {
    /// Every bin whose previous bin was untreated is at risk; the bin before
    /// the first counts as untreated.
    #[default]
    PerBin,
    /// One unit at risk per episode; success if the episode ever treats.
    PerEpisodeFirst,
}

fn initiation_counts(actions: &[Vec<usize>], idx: &[usize], t: Treatment, v: InitiationVariant) -> (u64, u64) {
    let (mut started, mut at_risk) = (0, 0);
    for &i in idx {
        let bins: Vec<usize> = actions[i].iter().map(|&a| dose_bin(a, t)).collect();
        match v {
            InitiationVariant::PerBin => {
                let mut prev = 0;
                for b in bins {
                    if prev == 0 {
                        at_risk += 1;
                        started += (b != 0) as u64;
                    }
                    prev = b;
                }
            }
            InitiationVariant::PerEpisodeFirst => {
                if !bins.is_empty() {
                    at_risk += 1;
                    started += bins.iter().any(|&b| b != 0) as u64;
                }
            }
        }
    }
    (started, at_risk)
}

/// Point rate, `None` without any bin at risk.
pub fn initiation_rate(actions: &[Vec<usize>], t: Treatment, v: InitiationVariant) -> Result<Option<f64>> {
    validate(actions)?;
    let all: Vec<usize> = (0..actions.len()).collect();
    let (s, r) = initiation_counts(actions, &all, t, v);
    Ok((r > 0).then(|| s as f64 / r as f64))
}

pub fn initiation_rate_ci(actions: &[Vec<usize>], t: Treatment, v: InitiationVariant, cfg: &BootstrapConfig) -> Result<Option<Ci>> {
    if initiation_rate(actions, t, v)?.is_none() {
        return Ok(None);
    }
    bootstrap_ci(actions.len(), cfg, |idx| {
        let (s, r) = initiation_counts(actions, idx, t, v);
        if r == 0 {
            f64::NAN
        } else {
            s as f64 / r as f64
        }
    })
    .map(Some)
}

/// Per-cell `sample sd / mean` of frequencies across restarts; `None`
/// where the mean is zero.
pub fn restart_cv(dists: &[ActionDistribution]) -> Result<[Option<f64>; N_ACTIONS]> {
    if dists.len() < 2 {
        return Err(MetricsError::Invalid("at least two restarts required".into()));
    }
    let freqs: Vec<[f64; N_ACTIONS]> = dists.iter().map(|d| d.frequencies()).collect();
    Ok(std::array::from_fn(|a| {
        let col: Vec<f64> = freqs.iter().map(|f| f[a]).collect();
        let m = mean(&col);
        (m > 0.0).then(|| sample_sd(&col) / m)
    }))
}

/// SOFA buckets given by ascending edges `e_0 < e_1 < …`: bucket 0 holds
/// `s < e_0`, bucket `k` holds `e_{k−1} ≤ s ≤ e_k` (lower bound exclusive
/// beyond the first), the last bucket holds everything above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SofaBuckets {
    pub edges: Vec<f64>,
    pub labels: Vec<String>,
}

impl Default for SofaBuckets {
    fn default() -> Self {
        Self {
            edges: vec![5.0, 15.0],
            labels: vec!["<5".into(), "5-15".into(), ">15".into()],
        }
    }
}

impl SofaBuckets {
    pub fn bucket(&self, sofa: f64) -> usize {
        match self.edges.first() {
            Some(&e0) if sofa < e0 => 0,
            _ => self.edges.iter().skip(1).position(|&e| sofa <= e).map_or(self.edges.len(), |k| k + 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subgroup {
    pub label: String,
    /// `None` when the bucket is empty.
    pub distribution: Option<ActionDistribution>,
}

/// Person-times bucketed by the bin's SOFA value.
pub fn subgroup_distributions(actions: &[Vec<usize>], sofa: &[Vec<Option<f64>>], buckets: &SofaBuckets) -> Result<Vec<Subgroup>> {
    validate(actions)?;
    if actions.len() != sofa.len() || buckets.labels.len() != buckets.edges.len() + 1 {
        return Err(MetricsError::Invalid("shape mismatch".into()));
    }
    let mut per: Vec<Vec<usize>> = vec![Vec::new(); buckets.labels.len()];
    for (e, (a, s)) in actions.iter().zip(sofa).enumerate() {
        if a.len() != s.len() {
            return Err(MetricsError::Invalid(format!("episode {e}: lengths differ")));
        }
        for (&act, v) in a.iter().zip(s) {
            let v = v.ok_or(MetricsError::MissingSofa(e))?;
            per[buckets.bucket(v)].push(act);
        }
    }
    Ok(buckets
        .labels
        .iter()
        .zip(per)
        .map(|(l, acts)| Subgroup {
            label: l.clone(),
            distribution: ActionDistribution::from_actions(&acts).ok(),
        })
        .collect())
}

/// Share of person-times with any vasopressor.
pub fn nonzero_share(d: &ActionDistribution, t: Treatment) -> f64 {
    1.0 - d.marginal(t)[0]
}

/// Marginal table with CIs: one row per category.
pub fn ci_table_csv(rows: &[(&str, Ci)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["category", "point", "lo", "hi"]).expect("in-memory write");
    for (label, ci) in rows {
        w.write_record([label.to_string(), format!("{:.6}", ci.point), format!("{:.6}", ci.lo), format!("{:.6}", ci.hi)])
            .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
