mod common;

use hemosens::agent::*;
use hemosens::reward::RewardSpec;
use proptest::prelude::*;
use rand::Rng;

/// Q-values looked up by the first state coordinate.
struct Table(Vec<Vec<f64>>);

impl QFunction for Table {
    fn q_values(&self, states: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        Ok(states.iter().map(|s| self.0[s[0] as usize].clone()).collect())
    }
}

fn step(state: f64, action: usize, reward: f64, next: Option<f64>) -> Transition {
    Transition {
        state: vec![state],
        action,
        reward,
        next: next.map(|n| vec![n]),
    }
}

#[test]
fn combine_one_hot_advantage() {
    let mut a = vec![0.0; 25];
    a[0] = 1.0;
    let q = dueling_combine(1.0, &a);
    assert!((q[0] - (1.0 + 24.0 / 25.0)).abs() < 1e-12);
    assert!(q[1..].iter().all(|&v| (v - (1.0 - 1.0 / 25.0)).abs() < 1e-12));
}

proptest! {
    #[test]
    fn combine_shift_invariance(v in -5.0f64..5.0, a in proptest::collection::vec(-5.0f64..5.0, 25), c in -10.0f64..10.0) {
        let base = dueling_combine(v, &a);
        let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
        for (x, y) in base.iter().zip(dueling_combine(v, &shifted)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
        for (x, y) in base.iter().zip(dueling_combine(v + c, &a)) {
            prop_assert!((x + c - y).abs() < 1e-9);
        }
    }
}

#[test]
fn double_target_reads_target_at_online_argmax() {
    // Online prefers action 0 at s'=1, target prefers action 1.
    let online = Table(vec![vec![0.0, 0.0], vec![5.0, 1.0]]);
    let target = Table(vec![vec![0.0, 0.0], vec![2.0, 7.0]]);
    let batch = [step(0.0, 0, 1.0, Some(1.0)), step(0.0, 1, 2.0, None)];
    let refs: Vec<&Transition> = batch.iter().collect();
    let y = ddqn_target(&refs, &online, &target, 0.5, true).unwrap();
    assert_eq!(y, vec![1.0 + 0.5 * 2.0, 2.0]);
    let vanilla = ddqn_target(&refs, &online, &target, 0.5, false).unwrap();
    assert_eq!(vanilla, vec![1.0 + 0.5 * 7.0, 2.0]);
    let myopic = ddqn_target(&refs, &online, &target, 0.0, true).unwrap();
    assert_eq!(myopic, vec![1.0, 2.0]);
}

#[test]
fn target_network_is_deterministic_in_eval() {
    let net = QNet::new(3, 16, 4, 9).unwrap();
    let batch = [step(0.0, 0, 0.0, Some(0.0))];
    let mut tr = batch[0].clone();
    tr.state = vec![0.1, 0.2, 0.3];
    tr.next = Some(vec![-0.4, 0.5, 0.6]);
    let refs = [&tr];
    let a = ddqn_target(&refs, &net, &net, 0.9, true).unwrap();
    let b = ddqn_target(&refs, &net, &net, 0.9, true).unwrap();
    assert_eq!(a, b);
}

fn buffer(priorities: &[f64], alpha: f64) -> ReplayBuffer {
    let tr: Vec<Transition> = (0..priorities.len()).map(|i| step(i as f64, 0, 0.0, None)).collect();
    let mut b = ReplayBuffer::new(tr, alpha, 0.0);
    let ids: Vec<usize> = (0..priorities.len()).collect();
    b.update(&ids, priorities).unwrap();
    b
}

fn frequencies(b: &ReplayBuffer, draws: usize, seed: u64) -> Vec<u64> {
    let mut rng = common::rng(seed);
    let mut counts = vec![0u64; b.len()];
    let mut left = draws;
    while left > 0 {
        let k = left.min(1000);
        for i in b.sample(k, 0.4, &mut rng).unwrap().ids {
            counts[i] += 1;
        }
        left -= k;
    }
    counts
}

fn chi2_p(counts: &[u64], probs: &[f64]) -> f64 {
    let n: u64 = counts.iter().sum();
    let stat: f64 = counts
        .iter()
        .zip(probs)
        .map(|(&c, &p)| {
            let e = p * n as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    common::chi2_sf(stat, counts.len() - 1)
}

#[test]
fn chi2_tail_matches_tables() {
    // Critical values at the 5% and 1% levels.
    assert!((common::chi2_sf(3.841_458_820_694_124, 1) - 0.05).abs() < 1e-9);
    assert!((common::chi2_sf(30.577_914_166_892_5, 15) - 0.01).abs() < 1e-9);
    assert!((common::chi2_sf(2.0, 2) - (-1.0f64).exp()).abs() < 1e-12);
}

#[test]
fn equal_priorities_sample_uniformly() {
    let b = buffer(&[0.7; 10], 0.6);
    let counts = frequencies(&b, 100_000, 1);
    let expected = 100_000.0 / 10.0;
    let sigma = (100_000.0 * 0.1 * 0.9f64).sqrt();
    for &c in &counts {
        assert!((c as f64 - expected).abs() < 3.0 * sigma, "{counts:?}");
    }
    assert!(chi2_p(&counts, &[0.1; 10]) > 0.01);
}

#[test]
fn alpha_zero_ignores_priorities() {
    let b = buffer(&[0.01, 1.0, 100.0, 5.0], 0.0);
    for i in 0..4 {
        assert!((b.probability(i) - 0.25).abs() < 1e-12);
    }
    assert!(chi2_p(&frequencies(&b, 100_000, 2), &[0.25; 4]) > 0.01);
}

#[test]
fn sampling_follows_priority_law() {
    let p = [0.1, 0.5, 1.0, 2.0, 3.0, 0.05, 7.0, 0.8];
    let alpha = 0.6;
    let b = buffer(&p, alpha);
    let mass: f64 = p.iter().map(|x| x.powf(alpha)).sum();
    let probs: Vec<f64> = p.iter().map(|x| x.powf(alpha) / mass).collect();
    for (i, q) in probs.iter().enumerate() {
        assert!((b.probability(i) - q).abs() < 1e-12);
    }
    assert!(chi2_p(&frequencies(&b, 100_000, 3), &probs) > 0.01);
}

#[test]
fn dominant_priority_dominates() {
    let mut p = vec![1e-3; 50];
    p[17] = 1e3;
    let counts = frequencies(&buffer(&p, 1.0), 10_000, 4);
    assert!(counts[17] as f64 > 0.99 * 10_000.0, "{}", counts[17]);
}

#[test]
fn importance_weights_are_max_normalized() {
    let b = buffer(&[0.1, 1.0, 10.0], 1.0);
    let s = b.sample(200, 0.5, &mut common::rng(0)).unwrap();
    let max = s.weights.iter().cloned().fold(0.0, f64::max);
    assert_eq!(max, 1.0);
    for (&i, &w) in s.ids.iter().zip(&s.weights) {
        let raw = |j: usize| (3.0 * b.probability(j)).powf(-0.5);
        let batch_max = s.ids.iter().map(|&j| raw(j)).fold(0.0, f64::max);
        assert!((w - raw(i) / batch_max).abs() < 1e-12);
    }
}

#[test]
fn update_sets_priorities_and_keeps_total() {
    let mut rng = common::rng(8);
    let n = 300;
    let tr: Vec<Transition> = (0..n).map(|i| step(i as f64, 0, 0.0, None)).collect();
    let alpha = 0.6;
    let eps = 0.01;
    let mut b = ReplayBuffer::new(tr, alpha, eps);
    for _ in 0..50 {
        let ids: Vec<usize> = (0..30).map(|_| rng.random_range(0..n)).collect();
        let td: Vec<f64> = (0..30).map(|_| rng.random_range(-3.0..3.0)).collect();
        b.update(&ids, &td).unwrap();
        let exact: f64 = (0..n).map(|i| b.priority(i).powf(alpha)).sum();
        assert!((b.total_mass() - exact).abs() < 1e-9);
    }
    b.update(&[5], &[0.0]).unwrap();
    assert_eq!(b.priority(5), eps);
    b.update(&[6, 7], &[0.5, -2.0]).unwrap();
    assert!(b.priority(7) > b.priority(6));
    assert!(matches!(b.update(&[n], &[1.0]), Err(AgentError::UnknownId(_))));
    assert!(matches!(
        ReplayBuffer::new(Vec::new(), 0.6, 0.01).sample(1, 0.4, &mut rng),
        Err(AgentError::EmptyBuffer)
    ));
}

#[test]
fn greedy_tie_rule_and_eps_soft() {
    let p = eps_soft(&[0.0; 25], 0.01);
    assert!((p[0] - (0.99 + 0.01 / 25.0)).abs() < 1e-12);
    let mut q = vec![0.0; 25];
    q[17] = 1.0;
    let p = eps_soft(&q, 0.01);
    assert!((p[17] - (0.99 + 0.01 / 25.0)).abs() < 1e-12);
    assert!(p.iter().enumerate().filter(|(i, _)| *i != 17).all(|(_, &v)| (v - 0.01 / 25.0).abs() < 1e-15));
}

#[test]
fn myopic_training_learns_conditional_means() {
    let mut rng = common::rng(12);
    let means = [[0.2, -0.4], [0.7, 0.1]];
    let mut tr = Vec::new();
    let mut sums = [[0.0f64; 2]; 2];
    let mut counts = [[0usize; 2]; 2];
    for _ in 0..400 {
        let x = rng.random_range(0..2);
        let a = rng.random_range(0..2);
        let r = means[x][a] + rng.random_range(-0.3..0.3);
        sums[x][a] += r;
        counts[x][a] += 1;
        let s = if x == 0 { vec![1.0, 0.0] } else { vec![0.0, 1.0] };
        tr.push(Transition {
            state: s.clone(),
            action: a,
            reward: r,
            next: Some(s),
        });
    }
    let cfg = TrainConfig {
        steps: 6000,
        gamma: 0.0,
        lr: 1e-3,
        target_sync: 500,
        hidden: 32,
        n_actions: 2,
        ..TrainConfig::default()
    };
    let snap = train(tr, &cfg, "toy", RewardSpec::ShortTerm).unwrap();
    for (x, s) in [[1.0, 0.0], [0.0, 1.0]].iter().enumerate() {
        let q = snap.q(s).unwrap();
        for a in 0..2 {
            let oracle = sums[x][a] / counts[x][a] as f64;
            assert!((q[a] - oracle).abs() < 0.05, "Q({x},{a}) = {} vs {oracle}", q[a]);
        }
    }
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let (tr, _) = common::toy_chain(10, 0.5);
    let cfg = TrainConfig {
        steps: 300,
        gamma: 0.5,
        hidden: 16,
        n_actions: 2,
        target_sync: 100,
        log_every: 50,
        ..TrainConfig::default()
    };
    let a = train(tr.clone(), &cfg, "h", RewardSpec::ShortTerm).unwrap();
    let b = train(tr, &cfg, "h", RewardSpec::ShortTerm).unwrap();
    assert_eq!(a.checkpoint(), b.checkpoint());
    assert_eq!(a.diagnostics, b.diagnostics);
    assert_eq!(a.diagnostics.records.len(), 6);
    let back = PolicySnapshot::from_checkpoint(&a.checkpoint()).unwrap();
    for s in [[1.0, 0.0], [0.0, 1.0], [0.3, -2.0]] {
        assert_eq!(back.q(&s).unwrap(), a.q(&s).unwrap());
    }
    assert_eq!(back.config, a.config);
}

#[test]
fn invalid_config_rejected() {
    let (tr, _) = common::toy_chain(1, 0.5);
    for cfg in [
        TrainConfig { batch: 0, ..TrainConfig::default() },
        TrainConfig { gamma: 1.5, ..TrainConfig::default() },
        TrainConfig { steps: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(train(tr.clone(), &cfg, "", RewardSpec::ShortTerm), Err(AgentError::Config(_))));
    }
    assert!(matches!(train(Vec::new(), &TrainConfig::default(), "", RewardSpec::ShortTerm), Err(AgentError::EmptyBuffer)));
}

#[test]
fn long_term_runs_are_capped() {
    let cfg = TrainConfig::default().for_reward(&RewardSpec::LongTerm { c: 10.0 });
    assert_eq!(cfg.steps, LONG_TERM_STEP_CAP);
    assert_eq!(TrainConfig::default().for_reward(&RewardSpec::ShortTerm).steps, 100_000);
}

#[test]
fn transitions_mark_last_bin_terminal() {
    let states = vec![vec![vec![0.0], vec![1.0], vec![2.0]]];
    let tr = build_transitions(&states, &[vec![1, 2, 3]], &[vec![0.1, 0.2, 0.3]]).unwrap();
    assert_eq!(tr.len(), 3);
    assert_eq!(tr[0].next, Some(vec![1.0]));
    assert_eq!(tr[2].next, None);
    assert!(build_transitions(&states, &[vec![1, 2]], &[vec![0.1, 0.2, 0.3]]).is_err());
}
