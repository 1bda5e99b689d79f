//! Central finite-difference gradient checks.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{CellState, Mode, Network, Parameterized, RecurrentCell, Result, Tensor};
use crate::seed;

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter path (`name[index]`) with the largest error.
    pub worst: String,
    pub pass: bool,
    /// Set when an analytic or numeric gradient was non-finite.
    pub non_finite: Option<String>,
}

/// Compares `analytic` against central differences of `loss`.
///
/// Error per element is `|analytic − numeric| / max(1, |numeric|)`; passes
/// iff the maximum is below `tol` and nothing is non-finite.
pub fn grad_check<M, F>(model: &mut M, analytic: &[Tensor], mut loss: F, tol: f64) -> Result<GradCheckReport>
where
    M: Parameterized,
    F: FnMut(&mut M) -> Result<f64>,
{
    let names: Vec<String> = model.params().into_iter().map(|(n, _)| n).collect();
    let mut max_err = 0.0_f64;
    let mut worst = String::new();
    let mut non_finite = None;
    for (pi, name) in names.iter().enumerate() {
        let n = model.params()[pi].1.len();
        for k in 0..n {
            let path = format!("{name}[{k}]");
            let orig = model.params_mut()[pi].data()[k];
            model.params_mut()[pi].data_mut()[k] = orig + FD_STEP;
            let lp = loss(model)?;
            model.params_mut()[pi].data_mut()[k] = orig - FD_STEP;
            let lm = loss(model)?;
            model.params_mut()[pi].data_mut()[k] = orig;
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic[pi].data()[k];
            if !a.is_finite() || !numeric.is_finite() {
                non_finite.get_or_insert(path.clone());
                continue;
            }
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            if err > max_err {
                max_err = err;
                worst = path;
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        worst,
        pass: non_finite.is_none() && max_err < tol,
        non_finite,
    })
}

fn projection(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("projection shape")
}

/// Checks a network on input `x` with loss `Σ out ⊙ R` for a random `R`.
pub fn grad_check_network(net: &mut Network, x: &Tensor, mode: Mode, tol: f64, seed_: u64) -> Result<GradCheckReport> {
    let mut rng = seed::rng(seed_);
    let r = projection(x.rows(), net.out_dim(), &mut rng);
    net.forward(x, mode)?;
    let (analytic, _) = net.backward(&r)?;
    let loss = |n: &mut Network| -> Result<f64> {
        let y = n.forward(x, mode)?;
        Ok(y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    grad_check(net, &analytic, loss, tol)
}

/// Checks a single recurrent step with loss `Σ h'⊙R1 (+ Σ c'⊙R2)`.
pub fn grad_check_cell(cell: &mut RecurrentCell, x: &Tensor, state: &CellState, tol: f64, seed_: u64) -> Result<GradCheckReport> {
    let mut rng = seed::rng(seed_);
    let rh = projection(x.rows(), cell.hidden(), &mut rng);
    let rc = projection(x.rows(), cell.hidden(), &mut rng);
    let (_, cache) = cell.step(x, state)?;
    let mut grads = cell.zero_grads();
    let dc = state.c.as_ref().map(|_| &rc);
    cell.step_backward(&cache, &rh, dc, &mut grads)?;
    let loss = |c: &mut RecurrentCell| -> Result<f64> {
        let (s, _) = c.step(x, state)?;
        let mut l: f64 = s.h.data().iter().zip(rh.data()).map(|(a, b)| a * b).sum();
        if let Some(cn) = &s.c {
            l += cn.data().iter().zip(rc.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok(l)
    };
    grad_check(cell, &grads, loss, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnkit::{CellKind, LayerSpec};
    use rand_distr::Uniform;

    fn random_input(rows: usize, cols: usize, seed_: u64) -> Tensor {
        let mut rng = seed::rng(seed_);
        let u = Uniform::new(-1.0, 1.0).unwrap();
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(u)).collect()).unwrap()
    }

    #[test]
    fn dense_leaky_passes() {
        let mut net = Network::new(&[LayerSpec::dense(4, 3), LayerSpec::leaky_relu(3)], &mut seed::rng(1)).unwrap();
        let x = random_input(5, 4, 2);
        let rep = grad_check_network(&mut net, &x, Mode::Train, 1e-4, 3).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn lstm_single_step_passes() {
        let mut cell = RecurrentCell::new(CellKind::Lstm, 3, 4, &mut seed::rng(5)).unwrap();
        let x = random_input(2, 3, 6);
        let st = CellState {
            h: random_input(2, 4, 7),
            c: Some(random_input(2, 4, 8)),
        };
        let rep = grad_check_cell(&mut cell, &x, &st, 1e-4, 9).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn corrupted_gradient_fails() {
        let mut net = Network::new(&[LayerSpec::dense(3, 2)], &mut seed::rng(1)).unwrap();
        let x = random_input(4, 3, 2);
        let r = Tensor::filled(&[4, 2], 1.0);
        net.forward(&x, Mode::Train).unwrap();
        let (mut g, _) = net.backward(&r).unwrap();
        g[0].data_mut()[2] += 0.1;
        let rep = grad_check(
            &mut net,
            &g,
            |n| Ok(n.forward(&x, Mode::Train)?.data().iter().sum()),
            1e-4,
        )
        .unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.worst, "layer0.weight[2]");
    }

    #[test]
    fn non_finite_reports_path() {
        let mut net = Network::new(&[LayerSpec::dense(2, 1)], &mut seed::rng(1)).unwrap();
        let x = random_input(1, 2, 2);
        net.forward(&x, Mode::Train).unwrap();
        let (mut g, _) = net.backward(&Tensor::filled(&[1, 1], 1.0)).unwrap();
        g[1].data_mut()[0] = f64::INFINITY;
        let rep = grad_check(&mut net, &g, |n| Ok(n.forward(&x, Mode::Train)?.data()[0]), 1e-4).unwrap();
        assert!(!rep.pass);
        assert_eq!(rep.non_finite.as_deref(), Some("layer0.bias[0]"));
    }
}
