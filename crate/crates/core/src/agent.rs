//! Dueling double DQN with proportional prioritized replay, trained purely
//! offline on logged transitions.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nnkit::{adam_step, AdamState, Checkpoint, LayerSpec, Mode, Network, NnError, Parameterized, Tensor};
use crate::numeric::{argmax, mean};
use crate::reward::RewardSpec;
use crate::{seed, N_ACTIONS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error("unknown transition id {0}")]
    UnknownId(usize),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f64,
        diagnostics: Box<TrainDiagnostics>,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, AgentError>;

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;
const PROBE_SIZE: usize = 256;
/// States used to recompute batch-norm population statistics.
const CALIBRATION_SIZE: usize = 2048;

/// `Q_a = V + A_a − mean(A)`.
pub fn dueling_combine(v: f64, a: &[f64]) -> Vec<f64> {
    let m = mean(a);
    a.iter().map(|&x| v + x - m).collect()
}

/// Anything that maps a batch of states to action values.
pub trait QFunction {
    fn q_values(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>>;
}

/// Dense trunk (128 → BN → leaky ×2) feeding a scalar value head and an
/// advantage head.
#[derive(Debug, Clone)]
pub struct QNet {
    trunk: Network,
    value: Network,
    adv: Network,
}

impl QNet {
    pub fn new(input_dim: usize, hidden: usize, n_actions: usize, seed_: u64) -> Result<Self> {
        if input_dim == 0 || hidden == 0 || n_actions == 0 {
            return Err(AgentError::Config("dimensions must be positive".into()));
        }
        let mut rng = seed::rng(seed::derive(seed_, "qnet-init"));
        let trunk = Network::new(&Self::trunk_specs(input_dim, hidden), &mut rng)?;
        let value = Network::new(&[LayerSpec::dense(hidden, 1)], &mut rng)?;
        let adv = Network::new(&[LayerSpec::dense(hidden, n_actions)], &mut rng)?;
        Ok(Self { trunk, value, adv })
    }

    fn trunk_specs(input_dim: usize, hidden: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::dense(input_dim, hidden),
            LayerSpec::batchnorm(hidden),
            LayerSpec::leaky_relu(hidden),
            LayerSpec::dense(hidden, hidden),
            LayerSpec::batchnorm(hidden),
            LayerSpec::leaky_relu(hidden),
        ]
    }

    pub fn input_dim(&self) -> usize {
        self.trunk.in_dim()
    }

    pub fn n_actions(&self) -> usize {
        self.adv.out_dim()
    }

    fn combine(v: &Tensor, a: &Tensor) -> Result<Tensor> {
        let n = a.cols();
        let mut out = Vec::with_capacity(a.len());
        for i in 0..a.rows() {
            out.extend(dueling_combine(v.row(i)[0], a.row(i)));
        }
        Ok(Tensor::matrix(a.rows(), n, out)?)
    }

    /// Training-mode forward that records caches for [`QNet::backward`].
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.trunk.forward(x, mode)?;
        let v = self.value.forward(&h, mode)?;
        let a = self.adv.forward(&h, mode)?;
        Self::combine(&v, &a)
    }

    /// Eval-mode Q values (batch-norm running statistics).
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.trunk.infer(x)?;
        Self::combine(&self.value.infer(&h)?, &self.adv.infer(&h)?)
    }

    /// Batch-norm population statistics from `states`.
    pub fn recalibrate(&mut self, states: &Tensor) -> Result<()> {
        Ok(self.trunk.recalibrate(states)?)
    }

    /// Gradients in `params()` order from dL/dQ.
    pub fn backward(&mut self, dq: &Tensor) -> Result<Vec<Tensor>> {
        let (rows, n) = (dq.rows(), dq.cols());
        let mut dv = Vec::with_capacity(rows);
        let mut da = Vec::with_capacity(rows * n);
        for i in 0..rows {
            let r = dq.row(i);
            let s: f64 = r.iter().sum();
            dv.push(s);
            da.extend(r.iter().map(|&g| g - s / n as f64));
        }
        let (gv, mut dh) = self.value.backward(&Tensor::matrix(rows, 1, dv)?)?;
        let (ga, dh2) = self.adv.backward(&Tensor::matrix(rows, n, da)?)?;
        dh.axpy(1.0, &dh2);
        let (mut grads, _) = self.trunk.backward(&dh)?;
        grads.extend(gv);
        grads.extend(ga);
        Ok(grads)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        let mut s = self.trunk.specs().to_vec();
        s.extend_from_slice(self.value.specs());
        s.extend_from_slice(self.adv.specs());
        s
    }

    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, net) in [("trunk", &self.trunk), ("value", &self.value), ("adv", &self.adv)] {
            out.extend(net.state().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.state_mut();
        out.extend(self.value.state_mut());
        out.extend(self.adv.state_mut());
        out
    }

    fn input(&self, states: &[&[f64]]) -> Result<Tensor> {
        let d = self.input_dim();
        let mut data = Vec::with_capacity(states.len() * d);
        for s in states {
            if s.len() != d {
                return Err(AgentError::Data(format!("state length {} != {d}", s.len())));
            }
            data.extend_from_slice(s);
        }
        Ok(Tensor::matrix(states.len(), d, data)?)
    }
}

impl Parameterized for QNet {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, net) in [("trunk", &self.trunk), ("value", &self.value), ("adv", &self.adv)] {
            out.extend(net.params().into_iter().map(|(n, t)| (format!("{prefix}.{n}"), t)));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.trunk.params_mut();
        out.extend(self.value.params_mut());
        out.extend(self.adv.params_mut());
        out
    }
}

impl QFunction for QNet {
    fn q_values(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        let q = self.infer(&self.input(states)?)?;
        Ok((0..q.rows()).map(|i| q.row(i).to_vec()).collect())
    }
}

/// One logged step. `next` is `None` on the terminal bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: usize,
    pub reward: f64,
    pub next: Option<Vec<f64>>,
}

/// Flattens per-episode states, actions and rewards into transitions; the
/// last bin of each episode is terminal.
pub fn build_transitions(states: &[Vec<Vec<f64>>], actions: &[Vec<usize>], rewards: &[Vec<f64>]) -> Result<Vec<Transition>> {
    if states.len() != actions.len() || states.len() != rewards.len() {
        return Err(AgentError::Data("episode counts differ".into()));
    }
    let mut out = Vec::new();
    for (e, ((s, a), r)) in states.iter().zip(actions).zip(rewards).enumerate() {
        if s.len() != a.len() || s.len() != r.len() {
            return Err(AgentError::Data(format!("episode {e}: lengths {} / {} / {}", s.len(), a.len(), r.len())));
        }
        for t in 0..s.len() {
            out.push(Transition {
                state: s[t].clone(),
                action: a[t],
                reward: r[t],
                next: s.get(t + 1).cloned(),
            });
        }
    }
    Ok(out)
}

/// Bootstrapped targets. With `double`, the next action is chosen by
/// `online` and valued by `target`; otherwise `target` does both.
pub fn ddqn_target<O: QFunction + ?Sized, T: QFunction + ?Sized>(
    batch: &[&Transition],
    online: &O,
    target: &T,
    gamma: f64,
    double: bool,
) -> Result<Vec<f64>> {
    let next: Vec<&[f64]> = batch.iter().filter_map(|t| t.next.as_deref()).collect();
    let q_t = target.q_values(&next)?;
    let q_o = if double { online.q_values(&next)? } else { Vec::new() };
    let mut k = 0;
    Ok(batch
        .iter()
        .map(|t| {
            if t.next.is_none() || gamma == 0.0 {
                if t.next.is_some() {
                    k += 1;
                }
                return t.reward;
            }
            let a_star = argmax(if double { &q_o[k] } else { &q_t[k] });
            let y = t.reward + gamma * q_t[k][a_star];
            k += 1;
            y
        })
        .collect())
}

/// Binary sum tree over non-negative leaf masses.
#[derive(Debug, Clone)]
pub struct SumTree {
    n: usize,
    cap: usize,
    nodes: Vec<f64>,
}

impl SumTree {
    pub fn new(n: usize) -> Self {
        let cap = n.next_power_of_two().max(1);
        Self {
            n,
            cap,
            nodes: vec![0.0; 2 * cap],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn total(&self) -> f64 {
        self.nodes[1]
    }

    pub fn get(&self, i: usize) -> f64 {
        self.nodes[self.cap + i]
    }

    pub fn set(&mut self, i: usize, mass: f64) {
        let mut k = self.cap + i;
        self.nodes[k] = mass;
        while k > 1 {
            k /= 2;
            self.nodes[k] = self.nodes[2 * k] + self.nodes[2 * k + 1];
        }
    }

    /// Leaf whose cumulative interval contains `u ∈ [0, total)`.
    pub fn find(&self, mut u: f64) -> usize {
        let mut k = 1;
        while k < self.cap {
            let left = self.nodes[2 * k];
            if u < left || self.nodes[2 * k + 1] <= 0.0 {
                k *= 2;
            } else {
                u -= left;
                k = 2 * k + 1;
            }
        }
        (k - self.cap).min(self.n - 1)
    }
}

#[derive(Debug, Clone)]
pub struct Sample {
    pub ids: Vec<usize>,
    pub weights: Vec<f64>,
}

/// Proportional prioritized replay over a fixed set of transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub transitions: Vec<Transition>,
    priorities: Vec<f64>,
    tree: SumTree,
    alpha: f64,
    eps: f64,
}

impl ReplayBuffer {
    /// All priorities start at 1 (the initial maximum).
    pub fn new(transitions: Vec<Transition>, alpha: f64, eps: f64) -> Self {
        let n = transitions.len();
        let mut tree = SumTree::new(n);
        for i in 0..n {
            tree.set(i, 1.0);
        }
        Self {
            transitions,
            priorities: vec![1.0; n],
            tree,
            alpha,
            eps,
        }
    }

    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn priority(&self, i: usize) -> f64 {
        self.priorities[i]
    }

    pub fn total_mass(&self) -> f64 {
        self.tree.total()
    }

    pub fn probability(&self, i: usize) -> f64 {
        self.tree.get(i) / self.tree.total()
    }

    /// Draws `batch` ids with `P(i) ∝ p_i^α`, with importance weights
    /// `(N·P(i))^−β` divided by the batch maximum.
    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, beta: f64, rng: &mut R) -> Result<Sample> {
        if self.is_empty() {
            return Err(AgentError::EmptyBuffer);
        }
        let total = self.tree.total();
        let n = self.len() as f64;
        let ids: Vec<usize> = (0..batch).map(|_| self.tree.find(rng.random::<f64>() * total)).collect();
        let raw: Vec<f64> = ids.iter().map(|&i| (n * self.probability(i)).powf(-beta)).collect();
        let max = raw.iter().cloned().fold(0.0, f64::max);
        Ok(Sample {
            weights: raw.iter().map(|w| w / max).collect(),
            ids,
        })
    }

    /// Sets `p_i = |δ_i| + ε_p`.
    pub fn update(&mut self, ids: &[usize], td: &[f64]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(AgentError::UnknownId(bad));
        }
        for (&i, &d) in ids.iter().zip(td) {
            let p = d.abs() + self.eps;
            self.priorities[i] = p;
            self.tree.set(i, p.powf(self.alpha));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub gamma: f64,
    pub lr: f64,
    pub target_sync: usize,
    pub seed: u64,
    pub alpha: f64,
    pub beta0: f64,
    pub eps_p: f64,
    pub double: bool,
    pub hidden: usize,
    pub n_actions: usize,
    /// Diagnostics are recorded every this many steps.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 100_000,
            batch: 30,
            gamma: 0.99,
            lr: 1e-4,
            target_sync: 1000,
            seed: 0,
            alpha: 0.6,
            beta0: 0.4,
            eps_p: 0.01,
            double: true,
            hidden: 128,
            n_actions: N_ACTIONS,
            log_every: 1000,
        }
    }
}

/// Step cap applied to long-term rewards.
pub const LONG_TERM_STEP_CAP: usize = 15_000;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AgentError::Config(m.into()));
        if self.steps == 0 {
            return bad("steps must be > 0");
        }
        if self.batch == 0 {
            return bad("batch must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.lr > 0.0) || self.target_sync == 0 || self.hidden == 0 || self.n_actions == 0 {
            return bad("lr, target_sync, hidden and n_actions must be positive");
        }
        if !(self.alpha >= 0.0) || !(0.0..=1.0).contains(&self.beta0) || !(self.eps_p > 0.0) {
            return bad("PER requires alpha >= 0, beta0 in [0, 1], eps_p > 0");
        }
        Ok(())
    }

    /// Applies the fixed early-stopping cap for long-term rewards.
    pub fn for_reward(mut self, reward: &RewardSpec) -> Self {
        if matches!(reward, RewardSpec::LongTerm { .. }) {
            self.steps = self.steps.min(LONG_TERM_STEP_CAP);
        }
        self
    }

    fn beta(&self, step: usize) -> f64 {
        let frac = if self.steps > 1 { step as f64 / (self.steps - 1) as f64 } else { 1.0 };
        self.beta0 + (1.0 - self.beta0) * frac
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub mean_abs_td: f64,
    pub mean_q_probe: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainDiagnostics {
    pub records: Vec<TrainRecord>,
}

impl TrainDiagnostics {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }
}

/// Trained Q-network plus everything needed to regenerate it.
#[derive(Debug, Clone)]
pub struct PolicySnapshot {
    pub qnet: QNet,
    pub config: TrainConfig,
    pub embed_hash: String,
    pub reward: RewardSpec,
    pub diagnostics: TrainDiagnostics,
}

impl PolicySnapshot {
    pub fn greedy_action(&self, state: &[f64]) -> Result<usize> {
        Ok(argmax(&self.q(state)?))
    }

    pub fn q(&self, state: &[f64]) -> Result<Vec<f64>> {
        Ok(self.qnet.q_values(&[state])?.remove(0))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("dueling_dqn", self.qnet.specs(), self.config.seed, self.qnet.state());
        ck.header = BTreeMap::from([
            ("config".to_string(), serde_json::to_value(&self.config).expect("config")),
            ("embed_hash".to_string(), serde_json::json!(self.embed_hash)),
            ("reward".to_string(), serde_json::to_value(self.reward).expect("reward")),
            ("input_dim".to_string(), serde_json::json!(self.qnet.input_dim())),
            ("diagnostics".to_string(), serde_json::to_value(&self.diagnostics).expect("diagnostics")),
        ]);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ck.header
                .get(k)
                .cloned()
                .ok_or_else(|| AgentError::Data(format!("checkpoint header lacks {k}")))
        };
        let de = |k: &str| -> Result<serde_json::Value> { field(k) };
        let config: TrainConfig = serde_json::from_value(de("config")?).map_err(|e| AgentError::Data(e.to_string()))?;
        let reward: RewardSpec = serde_json::from_value(de("reward")?).map_err(|e| AgentError::Data(e.to_string()))?;
        let diagnostics: TrainDiagnostics =
            serde_json::from_value(de("diagnostics")?).map_err(|e| AgentError::Data(e.to_string()))?;
        let input_dim = de("input_dim")?.as_u64().ok_or_else(|| AgentError::Data("input_dim".into()))? as usize;
        let embed_hash = de("embed_hash")?.as_str().unwrap_or_default().to_string();
        let mut qnet = QNet::new(input_dim, config.hidden, config.n_actions, config.seed)?;
        ck.load_into(qnet.state_mut())?;
        Ok(Self {
            qnet,
            config,
            embed_hash,
            reward,
            diagnostics,
        })
    }
}

/// Probabilities of the ε-soft greedy policy over `q`.
pub fn eps_soft(q: &[f64], eps: f64) -> Vec<f64> {
    let n = q.len() as f64;
    let mut p = vec![eps / n; q.len()];
    p[argmax(q)] += 1.0 - eps;
    p
}

/// Offline training on a fixed transition set. Deterministic given
/// `cfg.seed`; never touches the simulator.
pub fn train(
    transitions: Vec<Transition>,
    cfg: &TrainConfig,
    embed_hash: &str,
    reward: RewardSpec,
) -> Result<PolicySnapshot> {
    cfg.validate()?;
    if transitions.is_empty() {
        return Err(AgentError::EmptyBuffer);
    }
    let dim = transitions[0].state.len();
    for t in &transitions {
        if t.state.len() != dim || t.next.as_ref().is_some_and(|s| s.len() != dim) {
            return Err(AgentError::Data("inconsistent state dimension".into()));
        }
        if t.action >= cfg.n_actions {
            return Err(AgentError::Data(format!("action {} >= {}", t.action, cfg.n_actions)));
        }
        if !t.reward.is_finite() {
            return Err(AgentError::Data("non-finite reward".into()));
        }
    }
    let probe: Vec<Vec<f64>> = transitions.iter().take(PROBE_SIZE).map(|t| t.state.clone()).collect();
    let stride = transitions.len().div_ceil(CALIBRATION_SIZE);
    let calib = Tensor::from_rows(&transitions.iter().step_by(stride).map(|t| t.state.clone()).collect::<Vec<_>>())?;
    let mut buffer = ReplayBuffer::new(transitions, cfg.alpha, cfg.eps_p);
    let mut online = QNet::new(dim, cfg.hidden, cfg.n_actions, cfg.seed)?;
    let mut target = online.clone();
    let mut adam = AdamState::new(online.params().into_iter().map(|(_, t)| t), cfg.lr);
    let mut rng = seed::rng(seed::derive(cfg.seed, "replay"));
    let mut diag = TrainDiagnostics::default();
    let (mut loss_acc, mut td_acc, mut count) = (0.0, 0.0, 0usize);

    for step in 0..cfg.steps {
        let sample = buffer.sample(cfg.batch, cfg.beta(step), &mut rng)?;
        let batch: Vec<&Transition> = sample.ids.iter().map(|&i| &buffer.transitions[i]).collect();
        let y = ddqn_target(&batch, &online, &target, cfg.gamma, cfg.double)?;
        let x = online.input(&batch.iter().map(|t| t.state.as_slice()).collect::<Vec<_>>())?;
        let q = online.forward(&x, Mode::Train)?;
        let b = batch.len() as f64;
        let mut dq = Tensor::zeros(&[batch.len(), cfg.n_actions]);
        let mut td = Vec::with_capacity(batch.len());
        let mut loss = 0.0;
        for (i, t) in batch.iter().enumerate() {
            let d = q.row(i)[t.action] - y[i];
            loss += sample.weights[i] * d * d / b;
            dq.row_mut(i)[t.action] = 2.0 * sample.weights[i] * d / b;
            td.push(d);
        }
        if !loss.is_finite() || loss > DIVERGENCE_LOSS {
            return Err(AgentError::Diverged {
                step,
                loss,
                diagnostics: Box::new(diag),
            });
        }
        let grads = online.backward(&dq)?;
        adam_step(&mut online.params_mut(), &grads, &mut adam)?;
        buffer.update(&sample.ids, &td)?;
        loss_acc += loss;
        td_acc += td.iter().map(|d| d.abs()).sum::<f64>() / b;
        count += 1;
        if (step + 1) % cfg.target_sync == 0 {
            online.recalibrate(&calib)?;
            target = online.clone();
        }
        if (step + 1) % cfg.log_every.max(1) == 0 || step + 1 == cfg.steps {
            let refs: Vec<&[f64]> = probe.iter().map(|s| s.as_slice()).collect();
            let qp = online.q_values(&refs)?;
            let mean_q = mean(&qp.iter().map(|r| mean(r)).collect::<Vec<_>>());
            diag.records.push(TrainRecord {
                step: step + 1,
                loss: loss_acc / count as f64,
                mean_abs_td: td_acc / count as f64,
                mean_q_probe: mean_q,
            });
            (loss_acc, td_acc, count) = (0.0, 0.0, 0);
        }
    }
    online.recalibrate(&calib)?;
    Ok(PolicySnapshot {
        qnet: online,
        config: cfg.clone(),
        embed_hash: embed_hash.to_string(),
        reward,
        diagnostics: diag,
    })
}
