use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::linalg::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc};
use super::{NnError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Batchnorm,
    LeakyRelu,
    LstmCell,
    GruCell,
}

pub const DEFAULT_SLOPE: f64 = 0.01;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.9;
pub const DEFAULT_BN_EPS: f64 = 1e-5;

/// Declarative description of one layer.
///
/// `hyper` carries the optional `slope` (leaky ReLU), `momentum` and `eps`
/// (batch norm); absent keys fall back to the crate defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_dim: usize,
    pub out_dim: usize,
    #[serde(default)]
    pub hyper: BTreeMap<String, f64>,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize) -> Self {
        Self::plain(LayerKind::Dense, in_dim, out_dim)
    }

    pub fn batchnorm(dim: usize) -> Self {
        Self::plain(LayerKind::Batchnorm, dim, dim)
    }

    pub fn leaky_relu(dim: usize) -> Self {
        Self::plain(LayerKind::LeakyRelu, dim, dim)
    }

    pub fn lstm(in_dim: usize, hidden: usize) -> Self {
        Self::plain(LayerKind::LstmCell, in_dim, hidden)
    }

    pub fn gru(in_dim: usize, hidden: usize) -> Self {
        Self::plain(LayerKind::GruCell, in_dim, hidden)
    }

    fn plain(kind: LayerKind, in_dim: usize, out_dim: usize) -> Self {
        Self {
            kind,
            in_dim,
            out_dim,
            hyper: BTreeMap::new(),
        }
    }

    pub fn with(mut self, key: &str, value: f64) -> Self {
        self.hyper.insert(key.to_string(), value);
        self
    }

    pub fn slope(&self) -> f64 {
        self.hyper.get("slope").copied().unwrap_or(DEFAULT_SLOPE)
    }

    pub fn momentum(&self) -> f64 {
        self.hyper
            .get("momentum")
            .copied()
            .unwrap_or(DEFAULT_BN_MOMENTUM)
    }

    pub fn eps(&self) -> f64 {
        self.hyper.get("eps").copied().unwrap_or(DEFAULT_BN_EPS)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 {
            return Err(NnError::InvalidSpec(format!(
                "{:?} dims must be positive",
                self.kind
            )));
        }
        match self.kind {
            LayerKind::LeakyRelu => {
                let s = self.slope();
                if !(s > 0.0 && s < 1.0) {
                    return Err(NnError::InvalidSpec(format!("slope {s} not in (0,1)")));
                }
            }
            LayerKind::Batchnorm => {
                let m = self.momentum();
                if !(0.0..1.0).contains(&m) || self.eps() < 0.0 {
                    return Err(NnError::InvalidSpec("batchnorm momentum/eps".into()));
                }
            }
            _ => {}
        }
        if matches!(self.kind, LayerKind::Batchnorm | LayerKind::LeakyRelu)
            && self.in_dim != self.out_dim
        {
            return Err(NnError::InvalidSpec(format!(
                "{:?} must preserve width",
                self.kind
            )));
        }
        Ok(())
    }
}

/// Glorot-uniform limit.
pub(crate) fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub(crate) fn glorot_fill<R: Rng + ?Sized>(t: &mut Tensor, fan_in: usize, fan_out: usize, rng: &mut R) {
    let lim = glorot_limit(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-lim, lim).expect("finite limit");
    for w in t.data_mut() {
        *w = dist.sample(rng);
    }
}

/// Subgradient of `lambda * |w|`; zero at exactly `w == 0`.
pub fn l1_subgradient(w: f64, lambda: f64) -> f64 {
    if w > 0.0 {
        lambda
    } else if w < 0.0 {
        -lambda
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Dense {
    /// (in, out) so the forward product is `x · w`.
    pub w: Tensor,
    pub b: Tensor,
    cache_x: Option<Tensor>,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let mut w = Tensor::zeros(&[in_dim, out_dim]);
        glorot_fill(&mut w, in_dim, out_dim, rng);
        Self {
            w,
            b: Tensor::zeros(&[out_dim]),
            cache_x: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (m, k, n) = (x.rows(), self.in_dim(), self.out_dim());
        let mut out = Vec::with_capacity(m * n);
        for _ in 0..m {
            out.extend_from_slice(self.b.data());
        }
        gemm_acc(m, k, n, x.data(), self.w.data(), &mut out);
        Tensor::matrix(m, n, out).expect("dense output shape")
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.apply(x);
        self.cache_x = Some(x.clone());
        y
    }

    /// Returns (dx, dw, db).
    pub fn backward(&self, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let x = self.cache_x.as_ref().ok_or(NnError::NoForward)?;
        let (m, k, n) = (x.rows(), self.in_dim(), self.out_dim());
        let mut dw = vec![0.0; k * n];
        gemm_at_b_acc(m, k, n, x.data(), dy.data(), &mut dw);
        let mut db = vec![0.0; n];
        for i in 0..m {
            for (d, g) in db.iter_mut().zip(dy.row(i)) {
                *d += g;
            }
        }
        let mut dx = vec![0.0; m * k];
        gemm_a_bt_acc(m, n, k, dy.data(), self.w.data(), &mut dx);
        Ok((
            Tensor::matrix(m, k, dx)?,
            Tensor::matrix(k, n, dw)?,
            Tensor::new(vec![n], db)?,
        ))
    }

    pub fn clear(&mut self) {
        self.cache_x = None;
    }
}

#[derive(Debug, Clone)]
struct BnCache {
    x_hat: Tensor,
    inv_std: Vec<f64>,
    train: bool,
}

#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<BnCache>,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Tensor::filled(&[dim], 1.0),
            beta: Tensor::zeros(&[dim]),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::filled(&[dim], 1.0),
            momentum,
            eps,
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn apply_eval(&self, x: &Tensor) -> Tensor {
        let d = self.dim();
        let mut out = x.clone();
        for i in 0..x.rows() {
            let row = out.row_mut(i);
            for j in 0..d {
                let inv = 1.0 / (self.running_var.data()[j] + self.eps).sqrt();
                row[j] = self.gamma.data()[j] * (row[j] - self.running_mean.data()[j]) * inv
                    + self.beta.data()[j];
            }
        }
        out
    }

    /// Sets the running statistics to the mean and unbiased variance of `x`.
    pub fn set_population(&mut self, x: &Tensor) {
        let n = x.rows();
        if n < 2 {
            return;
        }
        for j in 0..self.dim() {
            let m = (0..n).map(|i| x.row(i)[j]).sum::<f64>() / n as f64;
            let v = (0..n).map(|i| (x.row(i)[j] - m).powi(2)).sum::<f64>() / (n - 1) as f64;
            self.running_mean.data_mut()[j] = m;
            self.running_var.data_mut()[j] = v;
        }
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let d = self.dim();
        let n = x.rows();
        if !train {
            let inv_std: Vec<f64> = (0..d)
                .map(|j| 1.0 / (self.running_var.data()[j] + self.eps).sqrt())
                .collect();
            let mut x_hat = x.clone();
            for i in 0..n {
                let row = x_hat.row_mut(i);
                for j in 0..d {
                    row[j] = (row[j] - self.running_mean.data()[j]) * inv_std[j];
                }
            }
            let y = self.affine(&x_hat);
            self.cache = Some(BnCache {
                x_hat,
                inv_std,
                train: false,
            });
            return y;
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.eps).sqrt()).collect();
        let mut x_hat = x.clone();
        for i in 0..n {
            let row = x_hat.row_mut(i);
            for j in 0..d {
                row[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        // running statistics use the unbiased batch variance
        let unbias = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
        let mom = self.momentum;
        for j in 0..d {
            let rm = &mut self.running_mean.data_mut()[j];
            *rm = mom * *rm + (1.0 - mom) * mean[j];
            let rv = &mut self.running_var.data_mut()[j];
            *rv = mom * *rv + (1.0 - mom) * var[j] * unbias;
        }
        let y = self.affine(&x_hat);
        self.cache = Some(BnCache {
            x_hat,
            inv_std,
            train: true,
        });
        y
    }

    fn affine(&self, x_hat: &Tensor) -> Tensor {
        let mut y = x_hat.clone();
        for i in 0..y.rows() {
            for (j, v) in y.row_mut(i).iter_mut().enumerate() {
                *v = self.gamma.data()[j] * *v + self.beta.data()[j];
            }
        }
        y
    }

    /// Returns (dx, dgamma, dbeta).
    pub fn backward(&self, dy: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let c = self.cache.as_ref().ok_or(NnError::NoForward)?;
        let d = self.dim();
        let n = dy.rows();
        let mut dgamma = vec![0.0; d];
        let mut dbeta = vec![0.0; d];
        for i in 0..n {
            let g = dy.row(i);
            let xh = c.x_hat.row(i);
            for j in 0..d {
                dgamma[j] += g[j] * xh[j];
                dbeta[j] += g[j];
            }
        }
        let mut dx = dy.clone();
        for i in 0..n {
            let xh = c.x_hat.row(i);
            let row = dx.row_mut(i);
            for j in 0..d {
                let gam = self.gamma.data()[j];
                row[j] = if c.train {
                    // dx = γ/σ · (dy − mean(dy) − x̂ · mean(dy·x̂))
                    gam * c.inv_std[j] * (row[j] - dbeta[j] / n as f64 - xh[j] * dgamma[j] / n as f64)
                } else {
                    gam * c.inv_std[j] * row[j]
                };
            }
        }
        Ok((dx, Tensor::new(vec![d], dgamma)?, Tensor::new(vec![d], dbeta)?))
    }

    pub fn clear(&mut self) {
        self.cache = None;
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LeakyRelu {
    pub slope: f64,
    cache_x: Option<Tensor>,
}

impl LeakyRelu {
    pub fn new(slope: f64) -> Self {
        Self {
            slope,
            cache_x: None,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut y = x.clone();
        for v in y.data_mut() {
            if *v < 0.0 {
                *v *= self.slope;
            }
        }
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.cache_x = Some(x.clone());
        self.apply(x)
    }

    pub fn backward(&self, dy: &Tensor) -> Result<Tensor> {
        let x = self.cache_x.as_ref().ok_or(NnError::NoForward)?;
        let mut dx = dy.clone();
        for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
            if v < 0.0 {
                *g *= self.slope;
            }
        }
        Ok(dx)
    }

    pub fn clear(&mut self) {
        self.cache_x = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_sign_rule() {
        assert_eq!(l1_subgradient(-2.0, 0.1), -0.1);
        assert_eq!(l1_subgradient(3.0, 0.1), 0.1);
        assert_eq!(l1_subgradient(0.0, 0.1), 0.0);
    }

    #[test]
    fn spec_validation() {
        assert!(LayerSpec::leaky_relu(3).with("slope", 1.5).validate().is_err());
        assert!(LayerSpec::dense(0, 3).validate().is_err());
        assert!(LayerSpec::dense(2, 3).validate().is_ok());
    }
}
