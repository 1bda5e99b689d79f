//! Off-policy evaluation.
//!
//! The behavior policy is a dense classifier over embedded states. Policies
//! are scored with the weighted doubly robust estimator: for `n`
//! trajectories padded to a common horizon `T` with an absorbing state
//! (reward 0, ratio 1, `Q̂ = V̂ = 0` after the last bin),
//!
//! ```text
//! ρ_t^i  = Π_{k≤t} π_e(a_k^i | s_k^i) / π_b(a_k^i | s_k^i)
//! w_t^i  = ρ_t^i / Σ_j ρ_t^j,            w_{−1}^i = 1/n
//! WDR    = Σ_i Σ_t γ^t [ w_t^i r_t^i − ( w_t^i Q̂(s_t^i, a_t^i) − w_{t−1}^i V̂(s_t^i) ) ]
//! V̂(s)   = Σ_a π_e(a | s) Q̂(s, a)
//! ```
//!
//! Cumulative ratios are carried in log space so long horizons neither
//! overflow nor underflow.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{eps_soft, PolicySnapshot, QFunction};
use crate::cohort::{self, BinObservation, CohortError, EpisodeAgent, EventLog};
use crate::discretize::{featurize, rebin, OnlineFeaturizer, Prep};
use crate::embed::{EmbedModel, OnlineEncoder};
use crate::nnkit::{adam_step, AdamState, Checkpoint, Mode, Network, NnError, Parameterized, Tensor};
use crate::numeric::{argmax, KahanSum};
use crate::reward::{attach_rewards, MortModel, RewardInputs, RewardSpec};
use crate::{par, seed, N_ACTIONS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpeError {
    #[error("behavior data contains a single action")]
    SingleAction,
    #[error("no data")]
    Empty,
    #[error("episode {episode}: {msg}")]
    Horizon { episode: usize, msg: String },
    #[error("WDR selection requires a behavior model")]
    NoBehavior,
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("{0}")]
    Stage(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, OpeError>;

pub const PROB_FLOOR: f64 = 1e-4;
pub const EVAL_EPS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BehaviorConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub floor: f64,
}

impl Default for BehaviorConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 256,
            lr: 1e-3,
            seed: 0,
            floor: PROB_FLOOR,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorDiagnostics {
    pub top1_accuracy: f64,
    pub reliability: Vec<ReliabilityBin>,
}

/// Softmax classifier (64 → 64) of the logged action given the state.
#[derive(Debug, Clone)]
pub struct BehaviorModel {
    net: Network,
    pub floor: f64,
    pub diagnostics: Option<BehaviorDiagnostics>,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mixes `p` with the uniform distribution so every entry is at least
/// `floor` and the total stays 1.
pub fn apply_floor(p: &[f64], floor: f64) -> Vec<f64> {
    let k = p.len() as f64;
    let keep = 1.0 - k * floor;
    p.iter().map(|&v| floor + keep * v).collect()
}

impl BehaviorModel {
    pub fn new(input_dim: usize, floor: f64, seed_: u64) -> Result<Self> {
        if !(floor >= 0.0 && floor * N_ACTIONS as f64 <= 1.0) {
            return Err(OpeError::Invalid(format!("floor {floor}")));
        }
        let net = Network::mlp(&[input_dim, 64, 64, N_ACTIONS], &mut seed::rng(seed::derive(seed_, "behavior-init")))?;
        Ok(Self {
            net,
            floor,
            diagnostics: None,
        })
    }

    /// Unfloored softmax probabilities.
    pub fn raw_probs(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let z = self.net.infer(&Tensor::from_rows(&states.iter().map(|s| s.to_vec()).collect::<Vec<_>>())?)?;
        Ok((0..z.rows()).map(|i| softmax(z.row(i))).collect())
    }

    /// Floored probabilities, each row summing to 1.
    pub fn probs(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(self.raw_probs(states)?.iter().map(|p| apply_floor(p, self.floor)).collect())
    }

    pub fn checkpoint(&self, seed_: u64) -> Checkpoint {
        let mut ck = Checkpoint::new("behavior", self.net.specs().to_vec(), seed_, self.net.state());
        ck.header.insert("floor".into(), serde_json::json!(self.floor));
        if let Some(d) = &self.diagnostics {
            ck.header.insert("diagnostics".into(), serde_json::to_value(d).expect("diagnostics"));
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != "behavior" {
            return Err(OpeError::Invalid(format!("checkpoint kind {}", ck.kind)));
        }
        let mut net = Network::new(&ck.layers, &mut seed::rng(ck.seed))?;
        ck.load_into(net.state_mut())?;
        Ok(Self {
            net,
            floor: ck.header.get("floor").and_then(|v| v.as_f64()).unwrap_or(PROB_FLOOR),
            diagnostics: ck.header.get("diagnostics").and_then(|v| serde_json::from_value(v.clone()).ok()),
        })
    }
}

/// Cross-entropy fit of the behavior policy on `(state, logged action)`
/// pairs; diagnostics are computed on the same pairs.
pub fn fit_behavior_policy(states: &[Vec<f64>], actions: &[usize], cfg: &BehaviorConfig) -> Result<BehaviorModel> {
    if states.is_empty() || states.len() != actions.len() {
        return Err(OpeError::Empty);
    }
    if let Some(&bad) = actions.iter().find(|&&a| a >= N_ACTIONS) {
        return Err(OpeError::Invalid(format!("action {bad}")));
    }
    if actions.iter().all(|&a| a == actions[0]) {
        return Err(OpeError::SingleAction);
    }
    let mut m = BehaviorModel::new(states[0].len(), cfg.floor, cfg.seed)?;
    let mut adam = AdamState::new(m.net.params().into_iter().map(|(_, t)| t), cfg.lr);
    let mut idx: Vec<usize> = (0..states.len()).collect();
    for epoch in 0..cfg.epochs {
        use rand::seq::SliceRandom;
        idx.shuffle(&mut seed::rng(seed::derive_idx(cfg.seed, "behavior-epoch", epoch as u64)));
        for chunk in idx.chunks(cfg.batch.max(1)) {
            let x = Tensor::from_rows(&chunk.iter().map(|&i| states[i].clone()).collect::<Vec<_>>())?;
            let z = m.net.forward(&x, Mode::Train)?;
            let n = chunk.len() as f64;
            let mut dz = Vec::with_capacity(z.len());
            for (r, &i) in chunk.iter().enumerate() {
                let p = softmax(z.row(r));
                dz.extend(p.iter().enumerate().map(|(a, &pa)| (pa - if a == actions[i] { 1.0 } else { 0.0 }) / n));
            }
            let (grads, _) = m.net.backward(&Tensor::matrix(chunk.len(), N_ACTIONS, dz)?)?;
            adam_step(&mut m.net.params_mut(), &grads, &mut adam)?;
        }
    }
    let refs: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
    let probs = m.probs(&refs)?;
    m.diagnostics = Some(behavior_diagnostics(&probs, actions));
    Ok(m)
}

/// Top-1 accuracy and ten equal-width reliability bins on the confidence of
/// the predicted class.
pub fn behavior_diagnostics(probs: &[Vec<f64>], actions: &[usize]) -> BehaviorDiagnostics {
    let mut bins = vec![(0usize, 0.0, 0usize); 10];
    let mut correct = 0;
    for (p, &a) in probs.iter().zip(actions) {
        let top = argmax(p);
        let hit = top == a;
        correct += hit as usize;
        let b = ((p[top] * 10.0) as usize).min(9);
        bins[b].0 += 1;
        bins[b].1 += p[top];
        bins[b].2 += hit as usize;
    }
    BehaviorDiagnostics {
        top1_accuracy: correct as f64 / probs.len().max(1) as f64,
        reliability: bins
            .into_iter()
            .enumerate()
            .map(|(b, (n, conf, hits))| ReliabilityBin {
                lo: b as f64 / 10.0,
                hi: (b + 1) as f64 / 10.0,
                count: n,
                mean_confidence: if n > 0 { conf / n as f64 } else { 0.0 },
                accuracy: if n > 0 { hits as f64 / n as f64 } else { 0.0 },
            })
            .collect(),
    }
}

/// A logged test episode: embedded states, logged actions, rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct OpeEpisode {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

/// Per-step policy inputs of one episode: `π_e(·|s_t)`, `π_b(·|s_t)`, `Q̂(s_t,·)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTables {
    pub pi_e: Vec<Vec<f64>>,
    pub pi_b: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WdrEstimate {
    pub value: f64,
    pub contributions: Vec<f64>,
    /// `1 / Σ_i (w_T^i)²` on the final normalized weights.
    pub ess: f64,
    pub max_log_weight: f64,
    /// Steps at which π_b sat at the probability floor.
    pub floored_steps: usize,
}

/// The estimator in the module docs on precomputed tables.
pub fn wdr(episodes: &[OpeEpisode], tables: &[StepTables], gamma: f64, floor: f64) -> Result<WdrEstimate> {
    if episodes.is_empty() {
        return Err(OpeError::Empty);
    }
    if episodes.len() != tables.len() {
        return Err(OpeError::Invalid("one table per episode required".into()));
    }
    for (i, (e, tb)) in episodes.iter().zip(tables).enumerate() {
        let len = e.states.len();
        if e.actions.len() != len || e.rewards.len() != len || tb.pi_e.len() != len || tb.pi_b.len() != len || tb.q.len() != len {
            return Err(OpeError::Horizon {
                episode: i,
                msg: "per-step arrays differ in length".into(),
            });
        }
        if len == 0 {
            return Err(OpeError::Horizon {
                episode: i,
                msg: "empty episode".into(),
            });
        }
    }
    let n = episodes.len();
    let horizon = episodes.iter().map(|e| e.states.len()).max().unwrap_or(0);
    let mut log_rho = vec![0.0; n];
    let mut w_prev = vec![1.0 / n as f64; n];
    let mut contrib: Vec<KahanSum> = vec![KahanSum::new(); n];
    let mut floored = 0;
    let mut disc = 1.0;
    for t in 0..horizon {
        for (i, (e, tb)) in episodes.iter().zip(tables).enumerate() {
            if t < e.states.len() {
                let a = e.actions[t];
                let pb = tb.pi_b[t][a];
                if pb <= floor * (1.0 + 1e-12) {
                    floored += 1;
                }
                log_rho[i] += tb.pi_e[t][a].ln() - pb.ln();
            }
        }
        let m = log_rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = log_rho.iter().map(|l| (l - m).exp()).sum();
        let w: Vec<f64> = log_rho.iter().map(|l| (l - m).exp() / z).collect();
        for (i, (e, tb)) in episodes.iter().zip(tables).enumerate() {
            if t < e.states.len() {
                let a = e.actions[t];
                let v: f64 = tb.pi_e[t].iter().zip(&tb.q[t]).map(|(p, q)| p * q).sum();
                contrib[i].add(disc * (w[i] * e.rewards[t] - (w[i] * tb.q[t][a] - w_prev[i] * v)));
            }
        }
        w_prev = w;
        disc *= gamma;
    }
    let contributions: Vec<f64> = contrib.iter().map(|c| c.value()).collect();
    let mut total = KahanSum::new();
    for c in &contributions {
        total.add(*c);
    }
    Ok(WdrEstimate {
        value: total.value(),
        contributions,
        ess: 1.0 / w_prev.iter().map(|w| w * w).sum::<f64>(),
        max_log_weight: log_rho.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        floored_steps: floored,
    })
}

/// Builds the tables for an ε-soft greedy policy over `policy`'s Q.
pub fn policy_tables<Q: QFunction + Sync>(episodes: &[OpeEpisode], policy: &Q, behavior: &BehaviorModel, eps: f64) -> Result<Vec<StepTables>> {
    par::map(episodes, |e| -> Result<StepTables> {
        let refs: Vec<&[f64]> = e.states.iter().map(|s| s.as_slice()).collect();
        let q = policy.q_values(&refs).map_err(|err| OpeError::Stage(err.to_string()))?;
        Ok(StepTables {
            pi_e: q.iter().map(|r| eps_soft(r, eps)).collect(),
            pi_b: behavior.probs(&refs)?,
            q,
        })
    })
    .into_iter()
    .collect()
}

pub fn wdr_value(episodes: &[OpeEpisode], snapshot: &PolicySnapshot, behavior: &BehaviorModel, eps: f64) -> Result<WdrEstimate> {
    if !(eps > 0.0) {
        return Err(OpeError::Invalid("ε must be positive".into()));
    }
    let tables = policy_tables(episodes, &snapshot.qnet, behavior, eps)?;
    wdr(episodes, &tables, snapshot.config.gamma, behavior.floor)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectMethod {
    Wdr,
    MeanQ,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
}

/// Index of the highest score; ties go to the lowest index.
pub fn select_by_score(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(OpeError::Empty);
    }
    Ok(argmax(scores))
}

/// Mean over states of `max_a Q(s, a)`.
pub fn mean_max_q<Q: QFunction + ?Sized>(q: &Q, states: &[&[f64]]) -> Result<f64> {
    let rows = q.q_values(states).map_err(|e| OpeError::Stage(e.to_string()))?;
    let mut s = KahanSum::new();
    for r in &rows {
        s.add(r.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(s.value() / rows.len().max(1) as f64)
}

/// Picks one restart; `snapshots` are ordered by seed.
pub fn select_restart(
    snapshots: &[PolicySnapshot],
    method: SelectMethod,
    episodes: &[OpeEpisode],
    behavior: Option<&BehaviorModel>,
    eps: f64,
) -> Result<Selection> {
    if snapshots.is_empty() {
        return Err(OpeError::Empty);
    }
    let scores = match method {
        SelectMethod::Wdr => {
            let b = behavior.ok_or(OpeError::NoBehavior)?;
            snapshots.iter().map(|s| wdr_value(episodes, s, b, eps).map(|w| w.value)).collect::<Result<Vec<_>>>()?
        }
        SelectMethod::MeanQ => {
            let states: Vec<&[f64]> = episodes.iter().flat_map(|e| e.states.iter().map(|s| s.as_slice())).collect();
            snapshots.iter().map(|s| mean_max_q(&s.qnet, &states)).collect::<Result<Vec<_>>>()?
        }
    };
    Ok(Selection {
        index: select_by_score(&scores)?,
        scores,
    })
}

/// Everything needed to turn a raw event log into per-bin rewards.
#[derive(Clone, Copy)]
pub struct RewardPipeline<'a> {
    pub prep: &'a Prep,
    pub embed: &'a EmbedModel,
    pub reward: RewardSpec,
    pub mortality: Option<&'a MortModel>,
}

impl RewardPipeline<'_> {
    pub fn rewards(&self, log: &EventLog) -> Result<Vec<f64>> {
        let stage = |e: &dyn std::fmt::Display| OpeError::Stage(e.to_string());
        let traj = rebin(log, self.prep.bin_hours, self.prep.anchoring).map_err(|e| stage(&e))?;
        let ep = featurize(&traj, self.prep).map_err(|e| stage(&e))?;
        let inputs_states;
        let outcomes;
        let inputs = match self.reward {
            RewardSpec::ShortTerm => {
                inputs_states = vec![self.embed.embed_episode(&ep).map_err(|e| stage(&e))?];
                RewardInputs::ShortTerm {
                    states: &inputs_states,
                    model: self.mortality.ok_or_else(|| OpeError::Invalid("short-term reward needs a mortality model".into()))?,
                }
            }
            RewardSpec::LongTerm { .. } => {
                outcomes = [ep.outcome.clone()];
                RewardInputs::LongTerm { outcomes: &outcomes }
            }
        };
        Ok(attach_rewards(&[ep.len()], &self.reward, inputs).map_err(|e| stage(&e))?.rewards.remove(0))
    }
}

/// Drives a rollout with an ε-soft greedy learned policy. The first bin's
/// dose is the physician's; every later bin's dose comes from the policy.
pub struct PolicyAgent<'a> {
    pipeline: RewardPipeline<'a>,
    policy: &'a PolicySnapshot,
    eps: f64,
    rng: seed::Rng,
    featurizer: OnlineFeaturizer<'a>,
    encoder: OnlineEncoder<'a>,
}

impl<'a> PolicyAgent<'a> {
    pub fn new(pipeline: RewardPipeline<'a>, policy: &'a PolicySnapshot, eps: f64, seed_: u64, rollout: usize) -> Self {
        Self {
            featurizer: OnlineFeaturizer::new(pipeline.prep),
            encoder: OnlineEncoder::new(pipeline.embed),
            pipeline,
            policy,
            eps,
            rng: seed::rng(seed::derive_idx(seed_, "policy-agent", rollout as u64)),
        }
    }
}

impl EpisodeAgent for PolicyAgent<'_> {
    fn bin_hours(&self) -> Option<f64> {
        Some(self.pipeline.prep.bin_hours)
    }

    fn act(&mut self, o: &BinObservation<'_>) -> cohort::Result<(f64, f64)> {
        let fail = |msg: String| CohortError::InvalidAction {
            patient: o.patient_id.to_string(),
            bin: o.bin,
            msg,
        };
        let d = o.end - o.start;
        let x = self
            .featurizer
            .push(o.patient_id, o.statics, o.measurements, (o.rates.0 * d, o.rates.1 * d))
            .map_err(|e| fail(e.to_string()))?;
        let s = self.encoder.push(&x).map_err(|e| fail(e.to_string()))?;
        let q = self.policy.q(&s).map_err(|e| fail(e.to_string()))?;
        let p = eps_soft(&q, self.eps);
        let u: f64 = self.rng.random();
        let mut acc = 0.0;
        let mut a = p.len() - 1;
        for (k, pk) in p.iter().enumerate() {
            acc += pk;
            if u < acc {
                a = k;
                break;
            }
        }
        self.pipeline.prep.binning.rates(a).map_err(|e| fail(e.to_string()))
    }

    fn rewards(&mut self, log: &EventLog) -> cohort::Result<Vec<f64>> {
        self.pipeline.rewards(log).map_err(|e| CohortError::InvalidOutcome {
            patient: log.patient_id.clone(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_keeps_simplex() {
        let mut p = vec![0.0; N_ACTIONS];
        p[3] = 1.0;
        let f = apply_floor(&p, PROB_FLOOR);
        assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(f.iter().all(|&v| v >= PROB_FLOOR));
    }

    #[test]
    fn equal_policies_give_average_return() {
        let ep = |r: Vec<f64>| OpeEpisode {
            states: vec![vec![0.0]; r.len()],
            actions: vec![0; r.len()],
            rewards: r,
        };
        let eps = vec![ep(vec![1.0, 2.0]), ep(vec![3.0])];
        let tab = |n: usize| StepTables {
            pi_e: vec![vec![0.5, 0.5]; n],
            pi_b: vec![vec![0.5, 0.5]; n],
            q: vec![vec![0.0, 0.0]; n],
        };
        let w = wdr(&eps, &[tab(2), tab(1)], 1.0, 0.0).unwrap();
        assert!((w.value - 3.0).abs() < 1e-12);
        assert!((w.ess - 2.0).abs() < 1e-12);
    }

    #[test]
    fn selection_ties_lowest() {
        assert_eq!(select_by_score(&[1.0, 2.0, 1.5, 0.5, 1.9]).unwrap(), 1);
        assert_eq!(select_by_score(&[2.0, 2.0]).unwrap(), 0);
        assert!(select_by_score(&[]).is_err());
    }
}
