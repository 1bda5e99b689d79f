//! Sequence autoencoder over per-bin features. The top encoder layer's
//! hidden state after bin `t` is the patient state at `t`.
//!
//! The decoder sees `[context, x_{t-1}]` at step `t` (teacher forcing,
//! `x_{-1} = 0`) and reconstructs the sequence in forward order through a
//! linear readout. Batches are sorted by length so the sequences still
//! running at any step form a prefix of the batch.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::discretize::FeatureEpisode;
use crate::nnkit::{
    adam_step, AdamState, CellKind, CellState, Checkpoint, Mode, Network, NnError, Parameterized, RecurrentCell,
    StepCache, Tensor,
};
use crate::{numeric::KahanSum, par, seed};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EmbedError {
    #[error("no training episodes")]
    Empty,
    #[error("feature dimension {got}, model expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("bin {t} out of range for episode of length {len}")]
    OutOfRange { t: usize, len: usize },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

pub type Result<T> = std::result::Result<T, EmbedError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub arch: CellKind,
    pub hidden: usize,
    pub batch: usize,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            arch: CellKind::Lstm,
            hidden: 32,
            batch: 128,
            epochs: 200,
            patience: 10,
            lr: 1e-2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub values: Vec<f64>,
    pub t: usize,
    pub patient_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCurve {
    /// Validation MSE; entry 0 is the untrained model.
    pub val_mse: Vec<f64>,
    pub train_mse: Vec<f64>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone)]
pub struct EmbedModel {
    pub arch: CellKind,
    pub input_dim: usize,
    pub hidden: usize,
    pub feature_names: Vec<String>,
    pub prep_hash: String,
    pub seed: u64,
    enc: [RecurrentCell; 2],
    dec: [RecurrentCell; 2],
    readout: Network,
}

impl Parameterized for EmbedModel {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (tag, cells) in [("enc", &self.enc), ("dec", &self.dec)] {
            for (l, c) in cells.iter().enumerate() {
                out.extend(c.params().into_iter().map(|(n, t)| (format!("{tag}{l}.{n}"), t)));
            }
        }
        out.extend(self.readout.params().into_iter().map(|(n, t)| (format!("readout.{n}"), t)));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in self.enc.iter_mut().chain(self.dec.iter_mut()) {
            out.extend(c.params_mut());
        }
        out.extend(self.readout.params_mut());
        out
    }
}

fn prefix(t: &Tensor, n: usize) -> Tensor {
    let c = t.cols();
    Tensor::matrix(n, c, t.data()[..n * c].to_vec()).expect("prefix shape")
}

fn write_prefix(dst: &mut Tensor, src: &Tensor) {
    let n = src.len();
    dst.data_mut()[..n].copy_from_slice(src.data());
}

fn add_prefix(dst: &Tensor, n: usize, extra: &Tensor) -> Tensor {
    let mut out = prefix(dst, n);
    out.axpy(1.0, extra);
    out
}

fn state_prefix(s: &CellState, n: usize) -> CellState {
    CellState {
        h: prefix(&s.h, n),
        c: s.c.as_ref().map(|c| prefix(c, n)),
    }
}

fn write_state(dst: &mut CellState, src: &CellState) {
    write_prefix(&mut dst.h, &src.h);
    if let (Some(d), Some(s)) = (dst.c.as_mut(), src.c.as_ref()) {
        write_prefix(d, s);
    }
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, cb) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(n * (ca + cb));
    for i in 0..n {
        data.extend_from_slice(a.row(i));
        data.extend_from_slice(b.row(i));
    }
    Tensor::matrix(n, ca + cb, data).expect("concat shape")
}

/// Sequences of one batch, longest first.
struct SeqBatch {
    /// Rows still running at each step.
    active: Vec<usize>,
    /// Inputs per step, `active[t]` rows each.
    xs: Vec<Tensor>,
    rows: usize,
    /// Total number of (row, step) pairs.
    cells: usize,
}

impl SeqBatch {
    fn new(eps: &[&FeatureEpisode], dim: usize) -> Result<Self> {
        let mut order: Vec<&FeatureEpisode> = eps.to_vec();
        order.sort_by(|a, b| b.len().cmp(&a.len()));
        let steps = order.first().map_or(0, |e| e.len());
        let mut active = Vec::with_capacity(steps);
        let mut xs = Vec::with_capacity(steps);
        for t in 0..steps {
            let n = order.iter().take_while(|e| e.len() > t).count();
            let mut data = Vec::with_capacity(n * dim);
            for e in &order[..n] {
                if e.features[t].len() != dim {
                    return Err(EmbedError::Dimension {
                        expected: dim,
                        got: e.features[t].len(),
                    });
                }
                data.extend_from_slice(&e.features[t]);
            }
            active.push(n);
            xs.push(Tensor::matrix(n, dim, data)?);
        }
        Ok(Self {
            active,
            xs,
            rows: order.len(),
            cells: order.iter().map(|e| e.len()).sum(),
        })
    }
}

struct Pass {
    loss: f64,
    enc_caches: Vec<[StepCache; 2]>,
    dec_caches: Vec<[StepCache; 2]>,
    resid: Tensor,
}

impl EmbedModel {
    pub fn new(arch: CellKind, input_dim: usize, hidden: usize, seed_: u64) -> Result<Self> {
        let mut rng = seed::rng(seed::derive(seed_, "embed-init"));
        let enc = [
            RecurrentCell::new(arch, input_dim, hidden, &mut rng)?,
            RecurrentCell::new(arch, hidden, hidden, &mut rng)?,
        ];
        let dec = [
            RecurrentCell::new(arch, hidden + input_dim, hidden, &mut rng)?,
            RecurrentCell::new(arch, hidden, hidden, &mut rng)?,
        ];
        let readout = Network::mlp(&[hidden, input_dim], &mut rng)?;
        Ok(Self {
            arch,
            input_dim,
            hidden,
            feature_names: Vec::new(),
            prep_hash: String::new(),
            seed: seed_,
            enc,
            dec,
            readout,
        })
    }

    fn zero_states(&self, cells: &[RecurrentCell; 2], rows: usize) -> [CellState; 2] {
        [cells[0].zero_state(rows), cells[1].zero_state(rows)]
    }

    /// Full autoencoder pass over a batch; returns loss and caches.
    fn pass(&mut self, b: &SeqBatch, mode: Mode) -> Result<Pass> {
        let mut st = self.zero_states(&self.enc, b.rows);
        let mut enc_caches = Vec::with_capacity(b.xs.len());
        for (t, x) in b.xs.iter().enumerate() {
            let n = b.active[t];
            let (s0, c0) = self.enc[0].step(x, &state_prefix(&st[0], n))?;
            let (s1, c1) = self.enc[1].step(&s0.h, &state_prefix(&st[1], n))?;
            write_state(&mut st[0], &s0);
            write_state(&mut st[1], &s1);
            enc_caches.push([c0, c1]);
        }
        let ctx = st[1].h.clone();

        let mut ds = self.zero_states(&self.dec, b.rows);
        let mut dec_caches = Vec::with_capacity(b.xs.len());
        let mut tops = Vec::with_capacity(b.cells * self.hidden);
        let mut target = Vec::with_capacity(b.cells * self.input_dim);
        for t in 0..b.xs.len() {
            let n = b.active[t];
            let prev = if t == 0 { Tensor::zeros(&[n, self.input_dim]) } else { prefix(&b.xs[t - 1], n) };
            let inp = concat_cols(&prefix(&ctx, n), &prev);
            let (s0, c0) = self.dec[0].step(&inp, &state_prefix(&ds[0], n))?;
            let (s1, c1) = self.dec[1].step(&s0.h, &state_prefix(&ds[1], n))?;
            tops.extend_from_slice(s1.h.data());
            target.extend_from_slice(b.xs[t].data());
            write_state(&mut ds[0], &s0);
            write_state(&mut ds[1], &s1);
            dec_caches.push([c0, c1]);
        }
        let tops = Tensor::matrix(b.cells, self.hidden, tops)?;
        let y = self.readout.forward(&tops, mode)?;
        let mut resid = y;
        let mut loss = KahanSum::new();
        for (r, x) in resid.data_mut().iter_mut().zip(&target) {
            *r -= x;
            loss.add(*r * *r);
        }
        Ok(Pass {
            loss: loss.value() / (b.cells * self.input_dim) as f64,
            enc_caches,
            dec_caches,
            resid,
        })
    }

    /// Mean squared reconstruction error and its gradient (params order).
    fn loss_and_grads(&mut self, b: &SeqBatch) -> Result<(f64, Vec<Tensor>)> {
        let p = self.pass(b, Mode::Train)?;
        let scale = 2.0 / (b.cells * self.input_dim) as f64;
        let mut dy = p.resid;
        dy.data_mut().iter_mut().for_each(|v| *v *= scale);
        let (g_read, d_tops) = self.readout.backward(&dy)?;

        let mut g_dec = [self.dec[0].zero_grads(), self.dec[1].zero_grads()];
        let mut dh = self.zero_states(&self.dec, b.rows);
        let mut d_ctx = Tensor::zeros(&[b.rows, self.hidden]);
        let offsets: Vec<usize> = b
            .active
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect();
        for t in (0..b.xs.len()).rev() {
            let n = b.active[t];
            let h = self.hidden;
            let d_top = Tensor::matrix(n, h, d_tops.data()[offsets[t] * h..(offsets[t] + n) * h].to_vec())?;
            let cache = &p.dec_caches[t];
            let d1 = add_prefix(&dh[1].h, n, &d_top);
            let dc1 = dh[1].c.as_ref().map(|c| prefix(c, n));
            let (dx1, dhp1, dcp1) = self.dec[1].step_backward(&cache[1], &d1, dc1.as_ref(), &mut g_dec[1])?;
            write_state(&mut dh[1], &CellState { h: dhp1, c: dcp1 });
            let d0 = add_prefix(&dh[0].h, n, &dx1);
            let dc0 = dh[0].c.as_ref().map(|c| prefix(c, n));
            let (dx0, dhp0, dcp0) = self.dec[0].step_backward(&cache[0], &d0, dc0.as_ref(), &mut g_dec[0])?;
            write_state(&mut dh[0], &CellState { h: dhp0, c: dcp0 });
            for i in 0..n {
                let src = &dx0.row(i)[..h];
                d_ctx.row_mut(i).iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }

        let mut g_enc = [self.enc[0].zero_grads(), self.enc[1].zero_grads()];
        let mut dh = self.zero_states(&self.enc, b.rows);
        dh[1].h = d_ctx;
        for t in (0..b.xs.len()).rev() {
            let n = b.active[t];
            let cache = &p.enc_caches[t];
            let d1 = prefix(&dh[1].h, n);
            let dc1 = dh[1].c.as_ref().map(|c| prefix(c, n));
            let (dx1, dhp1, dcp1) = self.enc[1].step_backward(&cache[1], &d1, dc1.as_ref(), &mut g_enc[1])?;
            write_state(&mut dh[1], &CellState { h: dhp1, c: dcp1 });
            let d0 = add_prefix(&dh[0].h, n, &dx1);
            let dc0 = dh[0].c.as_ref().map(|c| prefix(c, n));
            let (_, dhp0, dcp0) = self.enc[0].step_backward(&cache[0], &d0, dc0.as_ref(), &mut g_enc[0])?;
            write_state(&mut dh[0], &CellState { h: dhp0, c: dcp0 });
        }
        let [ge0, ge1] = g_enc;
        let [gd0, gd1] = g_dec;
        let grads = ge0.into_iter().chain(ge1).chain(gd0).chain(gd1).chain(g_read).collect();
        Ok((p.loss, grads))
    }

    /// Reconstruction MSE over `episodes` (batched, no parameter change).
    pub fn mse(&self, episodes: &[FeatureEpisode], batch: usize) -> Result<f64> {
        let mut total = KahanSum::new();
        let mut cells = 0usize;
        let mut m = self.clone();
        for chunk in episodes.chunks(batch.max(1)) {
            let refs: Vec<&FeatureEpisode> = chunk.iter().collect();
            let b = SeqBatch::new(&refs, self.input_dim)?;
            let p = m.pass(&b, Mode::Eval)?;
            total.add(p.loss * b.cells as f64);
            cells += b.cells;
        }
        Ok(if cells == 0 { 0.0 } else { total.value() / cells as f64 })
    }

    /// One encoder step for a single patient.
    pub fn encoder_step(&self, state: &mut [CellState; 2], x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim {
            return Err(EmbedError::Dimension {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        let x = Tensor::matrix(1, self.input_dim, x.to_vec())?;
        let (s0, _) = self.enc[0].step(&x, &state[0])?;
        let (s1, _) = self.enc[1].step(&s0.h, &state[1])?;
        let out = s1.h.data().to_vec();
        *state = [s0, s1];
        Ok(out)
    }

    pub fn initial_state(&self) -> [CellState; 2] {
        self.zero_states(&self.enc, 1)
    }

    /// Embeddings after every bin of an episode.
    pub fn embed_episode(&self, ep: &FeatureEpisode) -> Result<Vec<Vec<f64>>> {
        let mut st = self.initial_state();
        ep.features.iter().map(|x| self.encoder_step(&mut st, x)).collect()
    }

    pub fn embed_all(&self, eps: &[FeatureEpisode]) -> Result<Vec<Vec<Vec<f64>>>> {
        par::map(eps, |e| self.embed_episode(e)).into_iter().collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut layers: Vec<_> = self.enc.iter().chain(&self.dec).map(|c| c.spec()).collect();
        layers.extend(self.readout.specs().iter().cloned());
        let mut ck = Checkpoint::new("embed", layers, self.seed, self.params());
        ck.header = BTreeMap::from([
            ("arch".to_string(), serde_json::json!(self.arch)),
            ("hidden".to_string(), serde_json::json!(self.hidden)),
            ("input_dim".to_string(), serde_json::json!(self.input_dim)),
            ("feature_names".to_string(), serde_json::json!(self.feature_names)),
            ("prep_hash".to_string(), serde_json::json!(self.prep_hash)),
        ]);
        ck
    }

    /// Restores a model, refusing one fitted on different preprocessing.
    pub fn from_checkpoint(ck: &Checkpoint, prep_hash: &str) -> Result<Self> {
        let field = |k: &str| {
            ck.header
                .get(k)
                .cloned()
                .ok_or_else(|| EmbedError::Mismatch(format!("header lacks {k}")))
        };
        let parse = |k: &str| -> Result<serde_json::Value> { field(k) };
        let arch: CellKind = serde_json::from_value(parse("arch")?).map_err(|e| EmbedError::Mismatch(e.to_string()))?;
        let hidden: usize = serde_json::from_value(parse("hidden")?).map_err(|e| EmbedError::Mismatch(e.to_string()))?;
        let input_dim: usize =
            serde_json::from_value(parse("input_dim")?).map_err(|e| EmbedError::Mismatch(e.to_string()))?;
        let names: Vec<String> =
            serde_json::from_value(parse("feature_names")?).map_err(|e| EmbedError::Mismatch(e.to_string()))?;
        let stored: String = serde_json::from_value(parse("prep_hash")?).map_err(|e| EmbedError::Mismatch(e.to_string()))?;
        if ck.kind != "embed" {
            return Err(EmbedError::Mismatch(format!("checkpoint kind {}", ck.kind)));
        }
        if stored != prep_hash {
            return Err(EmbedError::Mismatch(format!("prep hash {stored} vs {prep_hash}")));
        }
        let mut m = Self::new(arch, input_dim, hidden, ck.seed)?;
        ck.load_into(m.params_mut())?;
        m.feature_names = names;
        m.prep_hash = stored;
        Ok(m)
    }
}

/// Trains with Adam on shuffled mini-batches, keeping the weights with the
/// best validation MSE (training MSE when `val` is empty).
pub fn train_autoencoder(
    train: &[FeatureEpisode],
    val: &[FeatureEpisode],
    cfg: &EmbedConfig,
    feature_names: &[String],
    prep_hash: &str,
) -> Result<(EmbedModel, TrainCurve)> {
    let dim = train.first().ok_or(EmbedError::Empty)?.dim();
    let mut model = EmbedModel::new(cfg.arch, dim, cfg.hidden, cfg.seed)?;
    model.feature_names = feature_names.to_vec();
    model.prep_hash = prep_hash.to_string();
    let monitor = if val.is_empty() { train } else { val };
    let mut curve = TrainCurve {
        val_mse: vec![model.mse(monitor, cfg.batch)?],
        train_mse: vec![model.mse(train, cfg.batch)?],
        best_epoch: 0,
    };
    let mut best = (curve.val_mse[0], model.clone());
    let mut adam = AdamState::new(model.params().into_iter().map(|(_, t)| t), cfg.lr);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        idx.shuffle(&mut seed::rng(seed::derive_idx(cfg.seed, "embed-epoch", epoch as u64)));
        let mut sum = KahanSum::new();
        let mut cells = 0usize;
        for (bi, chunk) in idx.chunks(cfg.batch.max(1)).enumerate() {
            let refs: Vec<&FeatureEpisode> = chunk.iter().map(|&i| &train[i]).collect();
            let b = SeqBatch::new(&refs, dim)?;
            let (loss, grads) = model.loss_and_grads(&b)?;
            if !loss.is_finite() {
                return Err(EmbedError::NonFiniteLoss { epoch, batch: bi });
            }
            adam_step(&mut model.params_mut(), &grads, &mut adam).map_err(|e| match e {
                NnError::NonFiniteGradient(_) => EmbedError::NonFiniteLoss { epoch, batch: bi },
                other => other.into(),
            })?;
            sum.add(loss * b.cells as f64);
            cells += b.cells;
        }
        curve.train_mse.push(sum.value() / cells as f64);
        let v = model.mse(monitor, cfg.batch)?;
        curve.val_mse.push(v);
        if v < best.0 {
            best = (v, model.clone());
            curve.best_epoch = epoch;
        } else if epoch - curve.best_epoch >= cfg.patience {
            break;
        }
    }
    Ok((best.1, curve))
}

/// Embedding of bins `0..=t`.
pub fn embed_history(model: &EmbedModel, ep: &FeatureEpisode, t: usize) -> Result<StateVector> {
    if t >= ep.len() {
        return Err(EmbedError::OutOfRange { t, len: ep.len() });
    }
    let mut st = model.initial_state();
    let mut h = Vec::new();
    for x in &ep.features[..=t] {
        h = model.encoder_step(&mut st, x)?;
    }
    Ok(StateVector {
        values: h,
        t,
        patient_id: ep.patient_id.clone(),
    })
}

/// Incremental encoder for rollouts.
pub struct OnlineEncoder<'a> {
    model: &'a EmbedModel,
    state: [CellState; 2],
}

impl<'a> OnlineEncoder<'a> {
    pub fn new(model: &'a EmbedModel) -> Self {
        Self {
            model,
            state: model.initial_state(),
        }
    }

    pub fn push(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.encoder_step(&mut self.state, x)
    }
}
