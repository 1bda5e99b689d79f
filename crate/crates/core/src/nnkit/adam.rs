use serde::{Deserialize, Serialize};

use super::{NnError, Result, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor>, lr: f64) -> Self {
        let m: Vec<Tensor> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            v: m.clone(),
            m,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Fails without touching anything if a
/// gradient is non-finite or shapes disagree.
pub fn adam_step(params: &mut [&mut Tensor], grads: &[Tensor], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(NnError::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if !(state.lr > 0.0) {
        return Err(NnError::InvalidSpec(format!("adam lr {} must be > 0", state.lr)));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if !p.same_shape(g) || !state.m[i].same_shape(g) {
            return Err(NnError::Shape(format!("adam: parameter {i} shape {:?} vs grad {:?}", p.shape(), g.shape())));
        }
        if !g.is_finite() {
            return Err(NnError::NonFiniteGradient(format!("adam parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.lr, state.eps);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
            let m_hat = *mv / bc1;
            let v_hat = *vv / bc2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    #[test]
    fn zero_gradient_no_change() {
        let mut p = scalar(1.5);
        let mut st = AdamState::new([&p], 0.1);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &[scalar(0.0)], &mut st).unwrap();
        }
        assert_eq!(p.data()[0], 1.5);
        assert_eq!(st.step, 5);
    }

    #[test]
    fn first_step_is_lr() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new([&p], 0.1);
        adam_step(&mut [&mut p], &[scalar(1.0)], &mut st).unwrap();
        // m̂ = v̂ = 1 → Δ = −0.1/(1 + 1e-8)
        let want = -0.1 / (1.0 + 1e-8);
        assert!((p.data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn repeated_steps_decrease_monotonically() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new([&p], 0.1);
        let mut prev = p.data()[0];
        // direct-formula oracle for constant g = 1: m̂_t = v̂_t = 1 every step
        for t in 1..=2 {
            adam_step(&mut [&mut p], &[scalar(1.0)], &mut st).unwrap();
            let want = -0.1 * t as f64 / (1.0 + 1e-8);
            assert!((p.data()[0] - want).abs() < 1e-12);
            assert!(p.data()[0] < prev);
            prev = p.data()[0];
        }
    }

    #[test]
    fn nan_gradient_aborts() {
        let mut p = scalar(0.0);
        let mut st = AdamState::new([&p], 0.1);
        let err = adam_step(&mut [&mut p], &[scalar(f64::NAN)], &mut st).unwrap_err();
        assert!(matches!(err, NnError::NonFiniteGradient(_)));
        assert_eq!(st.step, 0);
        assert_eq!(p.data()[0], 0.0);
    }
}
