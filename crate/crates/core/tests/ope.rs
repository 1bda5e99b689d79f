mod common;

use hemosens::agent::{QFunction, Result as QResult};
use hemosens::ope::*;
use hemosens::N_ACTIONS;
use rand::Rng;

#[test]
fn exact_q_recovers_true_value() {
    let mut rng = common::rng(21);
    for trial in 0..20 {
        let mdp = common::Tabular::random(&mut rng, 4);
        let gamma = [0.0, 0.5, 0.9, 1.0][trial % 4];
        let mut eps = Vec::new();
        let mut tables = Vec::new();
        let mut truth = 0.0;
        let n = 30;
        for _ in 0..n {
            let len = rng.random_range(1..9);
            let (e, t, v) = mdp.episode(&mut rng, len, gamma);
            eps.push(e);
            tables.push(t);
            truth += v / n as f64;
        }
        let est = wdr(&eps, &tables, gamma, 0.0).unwrap();
        assert!((est.value - truth).abs() < 1e-6, "trial {trial}: {} vs {truth}", est.value);
        assert!(est.ess <= n as f64 + 1e-9 && est.ess >= 1.0 - 1e-9);
    }
}

#[test]
fn zero_q_reduces_to_per_decision_wis() {
    // Two 2-step episodes, two actions; per-decision weighted IS by hand.
    let eps = vec![
        OpeEpisode {
            states: vec![vec![0.0], vec![0.0]],
            actions: vec![0, 1],
            rewards: vec![1.0, 2.0],
        },
        OpeEpisode {
            states: vec![vec![0.0], vec![0.0]],
            actions: vec![1, 1],
            rewards: vec![3.0, 4.0],
        },
    ];
    let pi_e = vec![0.8, 0.2];
    let pi_b = vec![0.5, 0.5];
    let tables: Vec<StepTables> = (0..2)
        .map(|_| StepTables {
            pi_e: vec![pi_e.clone(); 2],
            pi_b: vec![pi_b.clone(); 2],
            q: vec![vec![0.0, 0.0]; 2],
        })
        .collect();
    let gamma = 0.9;
    let rho1 = [1.6, 0.4];
    let rho2 = [1.6 * 0.4, 0.4 * 0.4];
    let w1: Vec<f64> = rho1.iter().map(|r| r / (rho1[0] + rho1[1])).collect();
    let w2: Vec<f64> = rho2.iter().map(|r| r / (rho2[0] + rho2[1])).collect();
    let oracle = w1[0] * 1.0 + w1[1] * 3.0 + gamma * (w2[0] * 2.0 + w2[1] * 4.0);
    let est = wdr(&eps, &tables, gamma, 0.0).unwrap();
    assert!((est.value - oracle).abs() < 1e-12, "{} vs {oracle}", est.value);
}

#[test]
fn on_policy_zero_q_is_average_return() {
    let mut rng = common::rng(4);
    let mdp = common::Tabular::random(&mut rng, 3);
    let mut eps = Vec::new();
    let mut tables = Vec::new();
    let mut avg = 0.0;
    for _ in 0..10 {
        let (e, mut t, _) = mdp.episode(&mut rng, 5, 0.95);
        t.pi_e = t.pi_b.clone();
        t.q.iter_mut().for_each(|r| r.iter_mut().for_each(|x| *x = 0.0));
        avg += e.rewards.iter().enumerate().map(|(i, r)| 0.95f64.powi(i as i32) * r).sum::<f64>() / 10.0;
        eps.push(e);
        tables.push(t);
    }
    let est = wdr(&eps, &tables, 0.95, 0.0).unwrap();
    assert!((est.value - avg).abs() < 1e-12);
    assert!((est.ess - 10.0).abs() < 1e-9);
}

#[test]
fn contributions_sum_to_value_and_horizon_checked() {
    let mut rng = common::rng(9);
    let mdp = common::Tabular::random(&mut rng, 3);
    let (e, t, _) = mdp.episode(&mut rng, 4, 0.9);
    let est = wdr(std::slice::from_ref(&e), std::slice::from_ref(&t), 0.9, 0.0).unwrap();
    assert!((est.contributions.iter().sum::<f64>() - est.value).abs() < 1e-12);
    let mut bad = t.clone();
    bad.q.pop();
    assert!(matches!(wdr(&[e], &[bad], 0.9, 0.0), Err(OpeError::Horizon { .. })));
    assert!(matches!(wdr(&[], &[], 0.9, 0.0), Err(OpeError::Empty)));
}

fn fit_cfg() -> BehaviorConfig {
    BehaviorConfig {
        epochs: 30,
        batch: 128,
        lr: 3e-3,
        ..BehaviorConfig::default()
    }
}

#[test]
fn uniform_behavior_is_learned_as_uniform() {
    let mut rng = common::rng(30);
    let states: Vec<Vec<f64>> = (0..20_000).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let actions: Vec<usize> = (0..states.len()).map(|_| rng.random_range(0..N_ACTIONS)).collect();
    let m = fit_behavior_policy(&states, &actions, &BehaviorConfig::default()).unwrap();
    let probes: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let refs: Vec<&[f64]> = probes.iter().map(|s| s.as_slice()).collect();
    for p in m.probs(&refs).unwrap() {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for &v in &p {
            assert!((v - 1.0 / 25.0).abs() < 0.02, "{v}");
        }
    }
}

#[test]
fn known_behavior_recovered_within_total_variation() {
    let mut rng = common::rng(31);
    let w: Vec<[f64; 2]> = (0..N_ACTIONS).map(|_| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]).collect();
    let truth = |s: &[f64]| {
        let z: Vec<f64> = w.iter().map(|r| r[0] * s[0] + r[1] * s[1]).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let t: f64 = e.iter().sum();
        e.into_iter().map(|v| v / t).collect::<Vec<_>>()
    };
    let states: Vec<Vec<f64>> = (0..20_000).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let actions: Vec<usize> = states.iter().map(|s| common::draw(&mut rng, &truth(s))).collect();
    let m = fit_behavior_policy(&states, &actions, &fit_cfg()).unwrap();
    let probes: Vec<Vec<f64>> = (0..50).map(|_| vec![rng.random_range(-0.8..0.8), rng.random_range(-0.8..0.8)]).collect();
    let refs: Vec<&[f64]> = probes.iter().map(|s| s.as_slice()).collect();
    let est = m.probs(&refs).unwrap();
    for (s, p) in probes.iter().zip(&est) {
        let tv: f64 = 0.5 * p.iter().zip(truth(s)).map(|(a, b)| (a - b).abs()).sum::<f64>();
        assert!(tv < 0.1, "TV {tv} at {s:?}");
    }
    let again = fit_behavior_policy(&states, &actions, &fit_cfg()).unwrap();
    assert_eq!(again.probs(&refs).unwrap(), est);
    let back = BehaviorModel::from_checkpoint(&m.checkpoint(0)).unwrap();
    assert_eq!(back.probs(&refs).unwrap(), est);
}

#[test]
fn floor_bounds_probabilities() {
    let mut p = vec![0.0; N_ACTIONS];
    p[3] = 1.0;
    let q = apply_floor(&p, PROB_FLOOR);
    assert!(q.iter().all(|&v| v >= PROB_FLOOR));
    assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(matches!(fit_behavior_policy(&[vec![0.0], vec![1.0]], &[4, 4], &BehaviorConfig::default()), Err(OpeError::SingleAction)));
}

struct Shifted<'a>(&'a [Vec<f64>], f64);

impl QFunction for Shifted<'_> {
    fn q_values(&self, states: &[&[f64]]) -> QResult<Vec<Vec<f64>>> {
        Ok(states.iter().map(|s| self.0[s[0] as usize].iter().map(|q| q + self.1).collect()).collect())
    }
}

#[test]
fn selection_rules() {
    assert_eq!(select_by_score(&[1.0, 2.0, 1.5, 0.5, 1.9]).unwrap(), 1);
    assert_eq!(select_by_score(&[0.3]).unwrap(), 0);
    assert_eq!(select_by_score(&[1.0, 1.0]).unwrap(), 0);
    assert!(select_by_score(&[]).is_err());

    let mut rng = common::rng(40);
    let tables: Vec<Vec<Vec<f64>>> = (0..5).map(|_| (0..4).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()).collect();
    let states: Vec<Vec<f64>> = (0..4).map(|i| vec![i as f64]).collect();
    let refs: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
    let pick = |shift: f64| {
        let scores: Vec<f64> = tables.iter().map(|t| mean_max_q(&Shifted(t, shift), &refs).unwrap()).collect();
        select_by_score(&scores).unwrap()
    };
    assert_eq!(pick(0.0), pick(17.5));
    assert_eq!(pick(0.0), pick(-3.25));
}

#[test]
fn wdr_selection_requires_behavior() {
    let snap = hemosens::agent::train(
        common::toy_chain(2, 0.5).0,
        &hemosens::agent::TrainConfig {
            steps: 10,
            hidden: 8,
            n_actions: 2,
            ..Default::default()
        },
        "",
        hemosens::reward::RewardSpec::ShortTerm,
    )
    .unwrap();
    let ep = OpeEpisode {
        states: vec![vec![1.0, 0.0]],
        actions: vec![0],
        rewards: vec![0.0],
    };
    assert!(matches!(select_restart(&[snap.clone()], SelectMethod::Wdr, &[ep.clone()], None, EVAL_EPS), Err(OpeError::NoBehavior)));
    let sel = select_restart(&[snap], SelectMethod::MeanQ, &[ep], None, EVAL_EPS).unwrap();
    assert_eq!(sel.index, 0);
}
