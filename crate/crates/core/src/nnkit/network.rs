use rand::Rng;

use super::layers::{BatchNorm, Dense, LeakyRelu};
use super::{LayerKind, LayerSpec, NnError, Parameterized, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
enum Layer {
    Dense(Dense),
    BatchNorm(BatchNorm),
    LeakyRelu(LeakyRelu),
}

/// A feed-forward stack of dense, batch-norm and leaky-ReLU layers.
///
/// Single writer: `forward` records per-layer caches consumed by `backward`.
/// `infer` is the read-only eval-mode path and may be shared across threads.
#[derive(Debug, Clone)]
pub struct Network {
    specs: Vec<LayerSpec>,
    layers: Vec<Layer>,
    recorded: bool,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        if specs.is_empty() {
            return Err(NnError::InvalidSpec("empty network".into()));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, s) in specs.iter().enumerate() {
            s.validate()?;
            if i > 0 && specs[i - 1].out_dim != s.in_dim {
                return Err(NnError::Dimension {
                    layer: format!("layer{i}:{:?}", s.kind),
                    expected: specs[i - 1].out_dim,
                    got: s.in_dim,
                });
            }
            layers.push(match s.kind {
                LayerKind::Dense => Layer::Dense(Dense::new(s.in_dim, s.out_dim, rng)),
                LayerKind::Batchnorm => Layer::BatchNorm(BatchNorm::new(s.in_dim, s.momentum(), s.eps())),
                LayerKind::LeakyRelu => Layer::LeakyRelu(LeakyRelu::new(s.slope())),
                LayerKind::LstmCell | LayerKind::GruCell => {
                    return Err(NnError::InvalidSpec(format!(
                        "layer{i}: recurrent cells are stepped through RecurrentCell"
                    )))
                }
            });
        }
        Ok(Self {
            specs: specs.to_vec(),
            layers,
            recorded: false,
        })
    }

    /// Convenience constructor: dense layers of the given widths with
    /// leaky-ReLU between them (no activation after the last).
    pub fn mlp<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut specs = Vec::new();
        for w in widths.windows(2) {
            if !specs.is_empty() {
                specs.push(LayerSpec::leaky_relu(w[0]));
            }
            specs.push(LayerSpec::dense(w[0], w[1]));
        }
        Self::new(&specs, rng)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn in_dim(&self) -> usize {
        self.specs[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.specs[self.specs.len() - 1].out_dim
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.in_dim() {
            return Err(NnError::Dimension {
                layer: format!("layer0:{:?}", self.specs[0].kind),
                expected: self.in_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    /// Forward pass recording caches for `backward`. Train mode uses batch
    /// statistics in batch-norm layers and updates their running averages.
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense(d) => d.forward(&h),
                Layer::BatchNorm(b) => b.forward(&h, mode == Mode::Train),
                Layer::LeakyRelu(l) => l.forward(&h),
            };
        }
        self.recorded = true;
        Ok(h)
    }

    /// Eval-mode forward without touching any state.
    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = match layer {
                Layer::Dense(d) => d.apply(&h),
                Layer::BatchNorm(b) => b.apply_eval(&h),
                Layer::LeakyRelu(l) => l.apply(&h),
            };
        }
        Ok(h)
    }

    /// Replaces batch-norm running statistics with population statistics of
    /// each layer's input over `x`, layer by layer.
    pub fn recalibrate(&mut self, x: &Tensor) -> Result<()> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &mut self.layers {
            h = match layer {
                Layer::Dense(d) => d.apply(&h),
                Layer::BatchNorm(b) => {
                    b.set_population(&h);
                    b.apply_eval(&h)
                }
                Layer::LeakyRelu(l) => l.apply(&h),
            };
        }
        Ok(())
    }

    /// Backpropagates `grad_out` (dL/d output) through the recorded forward
    /// pass. Returns one gradient per parameter (declared order) and dL/dx.
    pub fn backward(&mut self, grad_out: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        if !self.recorded {
            return Err(NnError::NoForward);
        }
        if grad_out.cols() != self.out_dim() {
            return Err(NnError::Dimension {
                layer: "output".into(),
                expected: self.out_dim(),
                got: grad_out.cols(),
            });
        }
        let mut per_layer: Vec<Vec<Tensor>> = Vec::with_capacity(self.layers.len());
        let mut g = grad_out.clone();
        for layer in self.layers.iter().rev() {
            match layer {
                Layer::Dense(d) => {
                    let (dx, dw, db) = d.backward(&g)?;
                    per_layer.push(vec![dw, db]);
                    g = dx;
                }
                Layer::BatchNorm(b) => {
                    let (dx, dg, db) = b.backward(&g)?;
                    per_layer.push(vec![dg, db]);
                    g = dx;
                }
                Layer::LeakyRelu(l) => {
                    g = l.backward(&g)?;
                    per_layer.push(Vec::new());
                }
            }
        }
        let grads: Vec<Tensor> = per_layer.into_iter().rev().flatten().collect();
        for (t, (name, _)) in grads.iter().zip(self.params()) {
            if !t.is_finite() {
                return Err(NnError::NonFiniteGradient(name));
            }
        }
        Ok((grads, g))
    }

    /// Drops recorded caches.
    pub fn clear(&mut self) {
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => d.clear(),
                Layer::BatchNorm(b) => b.clear(),
                Layer::LeakyRelu(l) => l.clear(),
            }
        }
        self.recorded = false;
    }

    /// Non-trainable state (batch-norm running statistics), declared order.
    pub fn buffers(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::BatchNorm(b) = layer {
                out.push((format!("layer{i}.running_mean"), &b.running_mean));
                out.push((format!("layer{i}.running_var"), &b.running_var));
            }
        }
        out
    }

    pub fn buffers_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::BatchNorm(b) = layer {
                out.push(&mut b.running_mean);
                out.push(&mut b.running_var);
            }
        }
        out
    }

    /// Parameters and buffers, for checkpoints.
    pub fn state(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.params();
        v.extend(self.buffers());
        v
    }

    pub fn state_mut(&mut self) -> Vec<&mut Tensor> {
        let mut params = Vec::new();
        let mut buffers = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    params.push(&mut d.w);
                    params.push(&mut d.b);
                }
                Layer::BatchNorm(b) => {
                    params.push(&mut b.gamma);
                    params.push(&mut b.beta);
                    buffers.push(&mut b.running_mean);
                    buffers.push(&mut b.running_var);
                }
                Layer::LeakyRelu(_) => {}
            }
        }
        params.extend(buffers);
        params
    }

    /// L1 norm of all dense weight matrices (biases excluded).
    pub fn weight_l1(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(d.w.data().iter().map(|w| w.abs()).sum::<f64>()),
                _ => None,
            })
            .sum()
    }

    /// Mask over `params()`: true for dense weight matrices.
    pub fn weight_mask(&self) -> Vec<bool> {
        let mut mask = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Dense(_) => mask.extend([true, false]),
                Layer::BatchNorm(_) => mask.extend([false, false]),
                Layer::LeakyRelu(_) => {}
            }
        }
        mask
    }
}

impl Parameterized for Network {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Dense(d) => {
                    out.push((format!("layer{i}.weight"), &d.w));
                    out.push((format!("layer{i}.bias"), &d.b));
                }
                Layer::BatchNorm(b) => {
                    out.push((format!("layer{i}.gamma"), &b.gamma));
                    out.push((format!("layer{i}.beta"), &b.beta));
                }
                Layer::LeakyRelu(_) => {}
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Dense(d) => {
                    out.push(&mut d.w);
                    out.push(&mut d.b);
                }
                Layer::BatchNorm(b) => {
                    out.push(&mut b.gamma);
                    out.push(&mut b.beta);
                }
                Layer::LeakyRelu(_) => {}
            }
        }
        out
    }
}
