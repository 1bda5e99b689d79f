//! Short-term rewards from a mortality model (change in log-odds of
//! 30-day death between consecutive states) and the long-term utility of
//! survival and final SOFA.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cohort::{Outcome, HOURS_PER_YEAR, WORST_SOFA};
use crate::nnkit::{adam_step, l1_subgradient, AdamState, Checkpoint, Mode, Network, NnError, Parameterized, Tensor};
use crate::numeric::{logit, roc_auc, sigmoid, KahanSum};
use crate::seed;

/// Probabilities are clamped to `[P_CLAMP, 1 − P_CLAMP]` before the logit.
pub const P_CLAMP: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("training labels contain a single class")]
    SingleClass,
    #[error("no training states")]
    Empty,
    #[error("final SOFA {0} exceeds the worst score")]
    SofaRange(u32),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("episode {0}: embeddings missing")]
    MissingStates(usize),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, RewardError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RewardSpec {
    ShortTerm,
    LongTerm { c: f64 },
}

impl RewardSpec {
    pub fn label(&self) -> String {
        match self {
            RewardSpec::ShortTerm => "short_term".into(),
            RewardSpec::LongTerm { c } => format!("long_term_c{c}"),
        }
    }
}

/// `logit(f_o) − logit(f_next)`; the flag reports whether either input
/// had to be clamped.
pub fn short_term_reward(f_o: f64, f_next: f64) -> (f64, bool) {
    let clamp = |p: f64| p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    let (a, b) = (clamp(f_o), clamp(f_next));
    (logit(a) - logit(b), a != f_o || b != f_next)
}

/// `ln(1 + (M − Y)/C)` for one-year survivors, else `ln(1 + H / (24·365))`.
pub fn long_term_utility(m: u32, y: u32, h: f64, c: f64) -> Result<f64> {
    if y > m {
        return Err(RewardError::SofaRange(y));
    }
    if !(c > 0.0) || !(h >= 0.0) {
        return Err(RewardError::Invalid(format!("need C > 0 and H >= 0, got C={c}, H={h}")));
    }
    Ok(if h >= HOURS_PER_YEAR {
        (1.0 + (m - y) as f64 / c).ln()
    } else {
        (h / HOURS_PER_YEAR + 1.0).ln()
    })
}

pub fn outcome_utility(o: &Outcome, c: f64) -> Result<f64> {
    long_term_utility(WORST_SOFA, o.final_sofa, o.hours_survived, c)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MortConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for MortConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 30,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Dense 50 → 30 → 1 classifier of 30-day death from an embedded state.
#[derive(Debug, Clone)]
pub struct MortModel {
    pub lambda: f64,
    pub val_auc: Option<f64>,
    net: Network,
}

impl MortModel {
    pub fn new(input_dim: usize, lambda: f64, seed_: u64) -> Result<Self> {
        let net = Network::mlp(&[input_dim, 50, 30, 1], &mut seed::rng(seed::derive(seed_, "mortality-init")))?;
        Ok(Self {
            lambda,
            val_auc: None,
            net,
        })
    }

    pub fn logits(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        Ok(self.net.infer(&Tensor::from_rows(states)?)?.into_data())
    }

    pub fn probs(&self, states: &[Vec<f64>]) -> Result<Vec<f64>> {
        Ok(self.logits(states)?.into_iter().map(sigmoid).collect())
    }

    pub fn weight_l1(&self) -> f64 {
        self.net.weight_l1()
    }

    pub fn network(&self) -> &Network {
        &self.net
    }

    /// Mean BCE plus `λ·Σ|w|` over weight matrices.
    pub fn loss(&self, states: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
        let z = self.logits(states)?;
        let mut s = KahanSum::new();
        for (z, &y) in z.iter().zip(labels) {
            s.add(bce_logit(*z, y));
        }
        Ok(s.value() / z.len().max(1) as f64 + self.lambda * self.net.weight_l1())
    }

    pub fn checkpoint(&self, seed_: u64) -> Checkpoint {
        let mut ck = Checkpoint::new("mortality", self.net.specs().to_vec(), seed_, self.net.state());
        ck.header = BTreeMap::from([
            ("lambda".to_string(), serde_json::json!(self.lambda)),
            ("val_auc".to_string(), serde_json::json!(self.val_auc)),
        ]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "mortality" {
            return Err(RewardError::Invalid(format!("checkpoint kind {}", ck.kind)));
        }
        let lambda = ck.header.get("lambda").and_then(|v| v.as_f64()).unwrap_or(0.0);
        let val_auc = ck.header.get("val_auc").and_then(|v| v.as_f64());
        let mut net = Network::new(&ck.layers, &mut seed::rng(ck.seed))?;
        ck.load_into(net.state_mut())?;
        Ok(Self { lambda, val_auc, net })
    }
}

fn bce_logit(z: f64, y: bool) -> f64 {
    let t = if y { 1.0 } else { 0.0 };
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

/// Fits the mortality model with Adam on shuffled mini-batches; reports the
/// validation AUC when `val` has both classes.
pub fn train_mortality_model(
    states: &[Vec<f64>],
    labels: &[bool],
    val: (&[Vec<f64>], &[bool]),
    cfg: &MortConfig,
) -> Result<MortModel> {
    if states.is_empty() || states.len() != labels.len() {
        return Err(RewardError::Empty);
    }
    if labels.iter().all(|&l| l) || labels.iter().all(|&l| !l) {
        return Err(RewardError::SingleClass);
    }
    if !(cfg.lambda >= 0.0) {
        return Err(RewardError::Invalid(format!("lambda {} < 0", cfg.lambda)));
    }
    let mut m = MortModel::new(states[0].len(), cfg.lambda, cfg.seed)?;
    let mask = m.net.weight_mask();
    let mut adam = AdamState::new(m.net.params().into_iter().map(|(_, t)| t), cfg.lr);
    let mut idx: Vec<usize> = (0..states.len()).collect();
    for epoch in 0..cfg.epochs {
        idx.shuffle(&mut seed::rng(seed::derive_idx(cfg.seed, "mortality-epoch", epoch as u64)));
        for chunk in idx.chunks(cfg.batch.max(1)) {
            let x = Tensor::from_rows(&chunk.iter().map(|&i| states[i].clone()).collect::<Vec<_>>())?;
            let z = m.net.forward(&x, Mode::Train)?;
            let n = chunk.len() as f64;
            let dz: Vec<f64> = z
                .data()
                .iter()
                .zip(chunk)
                .map(|(&z, &i)| (sigmoid(z) - if labels[i] { 1.0 } else { 0.0 }) / n)
                .collect();
            let (mut grads, _) = m.net.backward(&Tensor::matrix(chunk.len(), 1, dz)?)?;
            for ((g, (_, p)), &is_w) in grads.iter_mut().zip(m.net.params()).zip(&mask) {
                if is_w {
                    for (gv, &w) in g.data_mut().iter_mut().zip(p.data()) {
                        *gv += l1_subgradient(w, cfg.lambda);
                    }
                }
            }
            adam_step(&mut m.net.params_mut(), &grads, &mut adam)?;
        }
    }
    let (vs, vl) = val;
    if !vs.is_empty() {
        m.val_auc = roc_auc(&m.probs(vs)?, vl);
    }
    Ok(m)
}

/// What rewards are computed from.
pub enum RewardInputs<'a> {
    /// Per-episode embedded states and the mortality model.
    ShortTerm { states: &'a [Vec<Vec<f64>>], model: &'a MortModel },
    /// Per-episode outcomes.
    LongTerm { outcomes: &'a [Outcome] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rewarded {
    pub rewards: Vec<Vec<f64>>,
    /// Number of probabilities clamped away from 0 or 1.
    pub clamped: usize,
}

/// Per-bin rewards for each episode, one entry per bin.
pub fn attach_rewards(lengths: &[usize], spec: &RewardSpec, inputs: RewardInputs<'_>) -> Result<Rewarded> {
    let mut clamped = 0;
    let rewards = match (spec, inputs) {
        (RewardSpec::ShortTerm, RewardInputs::ShortTerm { states, model }) => {
            let mut out = Vec::with_capacity(lengths.len());
            for (i, &len) in lengths.iter().enumerate() {
                let s = states.get(i).filter(|s| s.len() == len).ok_or(RewardError::MissingStates(i))?;
                let p = model.probs(s)?;
                let mut r = vec![0.0; len];
                for t in 0..len.saturating_sub(1) {
                    let (v, c) = short_term_reward(p[t], p[t + 1]);
                    r[t] = v;
                    clamped += c as usize;
                }
                out.push(r);
            }
            out
        }
        (RewardSpec::LongTerm { c }, RewardInputs::LongTerm { outcomes }) => {
            if outcomes.len() != lengths.len() {
                return Err(RewardError::Invalid("one outcome per episode required".into()));
            }
            lengths
                .iter()
                .zip(outcomes)
                .map(|(&len, o)| {
                    let mut r = vec![0.0; len];
                    if let Some(last) = r.last_mut() {
                        *last = outcome_utility(o, *c)?;
                    }
                    Ok(r)
                })
                .collect::<Result<_>>()?
        }
        _ => return Err(RewardError::Invalid("reward inputs do not match the reward kind".into())),
    };
    Ok(Rewarded { rewards, clamped })
}
