//! LSTM and GRU cells, batched over rows.
//!
//! LSTM gate layout is `[i, f, g, o]`:
//! `c' = σ(f)·c + σ(i)·tanh(g)`, `h' = σ(o)·tanh(c')`.
//!
//! GRU gate layout is `[z, r, n]`:
//! `n = tanh(x·Wn + bn + σ(r)·(h·Un + bhn))`, `h' = (1 − σ(z))·n + σ(z)·h`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::glorot_fill;
use super::linalg::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::{LayerKind, LayerSpec, NnError, Parameterized, Result, Tensor};
use crate::numeric::sigmoid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Lstm,
    Gru,
}

impl CellKind {
    fn gates(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            CellKind::Gru => 3,
        }
    }
}

/// Hidden state of a batch; `c` is present for LSTM only.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

impl CellState {
    pub fn zeros(kind: CellKind, batch: usize, hidden: usize) -> Self {
        Self {
            h: Tensor::zeros(&[batch, hidden]),
            c: (kind == CellKind::Lstm).then(|| Tensor::zeros(&[batch, hidden])),
        }
    }
}

/// Everything `step_backward` needs from one forward step.
#[derive(Debug, Clone)]
pub struct StepCache {
    x: Tensor,
    h_prev: Tensor,
    c_prev: Option<Tensor>,
    /// Post-activation gates, (B, G·H).
    gates: Vec<f64>,
    /// tanh(c') for LSTM; `h·Un + bhn` for GRU.
    aux: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RecurrentCell {
    kind: CellKind,
    in_dim: usize,
    hidden: usize,
    wx: Tensor,
    wh: Tensor,
    b: Tensor,
    /// GRU only: bias inside the reset-gated hidden term.
    bhn: Tensor,
}

impl RecurrentCell {
    pub fn new<R: Rng + ?Sized>(kind: CellKind, in_dim: usize, hidden: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || hidden == 0 {
            return Err(NnError::InvalidSpec("recurrent dims must be positive".into()));
        }
        let g = kind.gates();
        let mut wx = Tensor::zeros(&[in_dim, g * hidden]);
        let mut wh = Tensor::zeros(&[hidden, g * hidden]);
        glorot_fill(&mut wx, in_dim, hidden, rng);
        glorot_fill(&mut wh, hidden, hidden, rng);
        let mut b = Tensor::zeros(&[g * hidden]);
        if kind == CellKind::Lstm {
            b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        }
        Ok(Self {
            kind,
            in_dim,
            hidden,
            wx,
            wh,
            b,
            bhn: Tensor::zeros(&[if kind == CellKind::Gru { hidden } else { 0 }]),
        })
    }

    pub fn from_spec<R: Rng + ?Sized>(spec: &LayerSpec, rng: &mut R) -> Result<Self> {
        let kind = match spec.kind {
            LayerKind::LstmCell => CellKind::Lstm,
            LayerKind::GruCell => CellKind::Gru,
            k => return Err(NnError::InvalidSpec(format!("{k:?} is not a recurrent cell"))),
        };
        Self::new(kind, spec.in_dim, spec.out_dim, rng)
    }

    pub fn spec(&self) -> LayerSpec {
        match self.kind {
            CellKind::Lstm => LayerSpec::lstm(self.in_dim, self.hidden),
            CellKind::Gru => LayerSpec::gru(self.in_dim, self.hidden),
        }
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zero_state(&self, batch: usize) -> CellState {
        CellState::zeros(self.kind, batch, self.hidden)
    }

    fn check(&self, x: &Tensor, state: &CellState) -> Result<()> {
        if x.cols() != self.in_dim {
            return Err(NnError::Dimension {
                layer: format!("{:?}.input", self.kind),
                expected: self.in_dim,
                got: x.cols(),
            });
        }
        if state.h.cols() != self.hidden || state.h.rows() != x.rows() {
            return Err(NnError::Dimension {
                layer: format!("{:?}.hidden", self.kind),
                expected: self.hidden,
                got: state.h.cols(),
            });
        }
        if (self.kind == CellKind::Lstm) != state.c.is_some() {
            return Err(NnError::Shape("cell state does not match cell kind".into()));
        }
        Ok(())
    }

    /// One recurrent step.
    pub fn step(&self, x: &Tensor, state: &CellState) -> Result<(CellState, StepCache)> {
        self.check(x, state)?;
        let (bsz, hd, g) = (x.rows(), self.hidden, self.kind.gates());
        let gh = g * hd;
        let mut ax = Vec::with_capacity(bsz * gh);
        for _ in 0..bsz {
            ax.extend_from_slice(self.b.data());
        }
        gemm_acc(bsz, self.in_dim, gh, x.data(), self.wx.data(), &mut ax);
        let mut ah = vec![0.0; bsz * gh];
        gemm_acc(bsz, hd, gh, state.h.data(), self.wh.data(), &mut ah);

        let mut h_new = vec![0.0; bsz * hd];
        match self.kind {
            CellKind::Lstm => {
                let c_prev = state.c.as_ref().expect("lstm state");
                let mut c_new = vec![0.0; bsz * hd];
                let mut gates = vec![0.0; bsz * gh];
                let mut tc = vec![0.0; bsz * hd];
                for r in 0..bsz {
                    let a = r * gh;
                    for j in 0..hd {
                        let i = sigmoid(ax[a + j] + ah[a + j]);
                        let f = sigmoid(ax[a + hd + j] + ah[a + hd + j]);
                        let gg = (ax[a + 2 * hd + j] + ah[a + 2 * hd + j]).tanh();
                        let o = sigmoid(ax[a + 3 * hd + j] + ah[a + 3 * hd + j]);
                        let c = f * c_prev.data()[r * hd + j] + i * gg;
                        let t = c.tanh();
                        gates[a + j] = i;
                        gates[a + hd + j] = f;
                        gates[a + 2 * hd + j] = gg;
                        gates[a + 3 * hd + j] = o;
                        c_new[r * hd + j] = c;
                        tc[r * hd + j] = t;
                        h_new[r * hd + j] = o * t;
                    }
                }
                let next = CellState {
                    h: Tensor::matrix(bsz, hd, h_new)?,
                    c: Some(Tensor::matrix(bsz, hd, c_new)?),
                };
                let cache = StepCache {
                    x: x.clone(),
                    h_prev: state.h.clone(),
                    c_prev: state.c.clone(),
                    gates,
                    aux: tc,
                };
                Ok((next, cache))
            }
            CellKind::Gru => {
                let mut gates = vec![0.0; bsz * gh];
                let mut hn = vec![0.0; bsz * hd];
                for r in 0..bsz {
                    let a = r * gh;
                    for j in 0..hd {
                        let z = sigmoid(ax[a + j] + ah[a + j]);
                        let rr = sigmoid(ax[a + hd + j] + ah[a + hd + j]);
                        let u = ah[a + 2 * hd + j] + self.bhn.data()[j];
                        let n = (ax[a + 2 * hd + j] + rr * u).tanh();
                        gates[a + j] = z;
                        gates[a + hd + j] = rr;
                        gates[a + 2 * hd + j] = n;
                        hn[r * hd + j] = u;
                        let hp = state.h.data()[r * hd + j];
                        h_new[r * hd + j] = (1.0 - z) * n + z * hp;
                    }
                }
                let next = CellState {
                    h: Tensor::matrix(bsz, hd, h_new)?,
                    c: None,
                };
                let cache = StepCache {
                    x: x.clone(),
                    h_prev: state.h.clone(),
                    c_prev: None,
                    gates,
                    aux: hn,
                };
                Ok((next, cache))
            }
        }
    }

    /// Zeroed gradient buffers in `params()` order.
    pub fn zero_grads(&self) -> Vec<Tensor> {
        self.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect()
    }

    /// Backward through one step. `d_h`/`d_c` are gradients w.r.t. the new
    /// state; parameter gradients accumulate into `grads`. Returns
    /// `(dx, d_h_prev, d_c_prev)`.
    pub fn step_backward(
        &self,
        cache: &StepCache,
        d_h: &Tensor,
        d_c: Option<&Tensor>,
        grads: &mut [Tensor],
    ) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        let (bsz, hd, g) = (cache.x.rows(), self.hidden, self.kind.gates());
        let gh = g * hd;
        if d_h.rows() != bsz || d_h.cols() != hd {
            return Err(NnError::Dimension {
                layer: format!("{:?}.d_h", self.kind),
                expected: hd,
                got: d_h.cols(),
            });
        }
        let mut dax = vec![0.0; bsz * gh];
        let mut dah = vec![0.0; bsz * gh];
        let mut dh_prev = vec![0.0; bsz * hd];
        let mut dc_prev = None;
        let mut dbhn = vec![0.0; hd];
        match self.kind {
            CellKind::Lstm => {
                let c_prev = cache.c_prev.as_ref().ok_or(NnError::NoForward)?;
                let mut dcp = vec![0.0; bsz * hd];
                for r in 0..bsz {
                    let a = r * gh;
                    for j in 0..hd {
                        let k = r * hd + j;
                        let (i, f, gg, o) = (
                            cache.gates[a + j],
                            cache.gates[a + hd + j],
                            cache.gates[a + 2 * hd + j],
                            cache.gates[a + 3 * hd + j],
                        );
                        let tc = cache.aux[k];
                        let dh = d_h.data()[k];
                        let dc = d_c.map_or(0.0, |t| t.data()[k]) + dh * o * (1.0 - tc * tc);
                        let d_o = dh * tc;
                        let d_i = dc * gg;
                        let d_g = dc * i;
                        let d_f = dc * c_prev.data()[k];
                        dcp[k] = dc * f;
                        dax[a + j] = d_i * i * (1.0 - i);
                        dax[a + hd + j] = d_f * f * (1.0 - f);
                        dax[a + 2 * hd + j] = d_g * (1.0 - gg * gg);
                        dax[a + 3 * hd + j] = d_o * o * (1.0 - o);
                    }
                }
                dah.copy_from_slice(&dax);
                dc_prev = Some(Tensor::matrix(bsz, hd, dcp)?);
            }
            CellKind::Gru => {
                for r in 0..bsz {
                    let a = r * gh;
                    for j in 0..hd {
                        let k = r * hd + j;
                        let (z, rr, n) = (cache.gates[a + j], cache.gates[a + hd + j], cache.gates[a + 2 * hd + j]);
                        let u = cache.aux[k];
                        let hp = cache.h_prev.data()[k];
                        let dh = d_h.data()[k];
                        let dz = dh * (hp - n);
                        let dn = dh * (1.0 - z);
                        dh_prev[k] = dh * z;
                        let dan = dn * (1.0 - n * n);
                        let du = dan * rr;
                        let dr = dan * u;
                        let daz = dz * z * (1.0 - z);
                        let dar = dr * rr * (1.0 - rr);
                        dax[a + j] = daz;
                        dax[a + hd + j] = dar;
                        dax[a + 2 * hd + j] = dan;
                        dah[a + j] = daz;
                        dah[a + hd + j] = dar;
                        dah[a + 2 * hd + j] = du;
                        dbhn[j] += du;
                    }
                }
            }
        }
        // grads order: wx, wh, b, (bhn)
        gemm_at_b_acc(bsz, self.in_dim, gh, cache.x.data(), &dax, grads[0].data_mut());
        gemm_at_b_acc(bsz, hd, gh, cache.h_prev.data(), &dah, grads[1].data_mut());
        for r in 0..bsz {
            for (gb, d) in grads[2].data_mut().iter_mut().zip(&dax[r * gh..(r + 1) * gh]) {
                *gb += d;
            }
        }
        if self.kind == CellKind::Gru {
            for (gb, d) in grads[3].data_mut().iter_mut().zip(&dbhn) {
                *gb += d;
            }
        }
        let mut dx = vec![0.0; bsz * self.in_dim];
        gemm_a_bt_acc(bsz, gh, self.in_dim, &dax, self.wx.data(), &mut dx);
        gemm_a_bt_acc(bsz, gh, hd, &dah, self.wh.data(), &mut dh_prev);
        Ok((Tensor::matrix(bsz, self.in_dim, dx)?, Tensor::matrix(bsz, hd, dh_prev)?, dc_prev))
    }
}

impl Parameterized for RecurrentCell {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = vec![
            ("wx".to_string(), &self.wx),
            ("wh".to_string(), &self.wh),
            ("b".to_string(), &self.b),
        ];
        if self.kind == CellKind::Gru {
            v.push(("bhn".to_string(), &self.bhn));
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.wx, &mut self.wh, &mut self.b];
        if self.kind == CellKind::Gru {
            v.push(&mut self.bhn);
        }
        v
    }
}
