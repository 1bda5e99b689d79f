//! Independent oracles shared by integration tests and the acceptance suite.
#![allow(dead_code)]

use std::collections::BTreeMap;

use hemosens::cohort::{Event, EventKind, EventLog, Outcome, IV_FLUID, VASOPRESSOR};
use hemosens::discretize::BinnedTrajectory;
use hemosens::ope::{OpeEpisode, StepTables};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;

pub type TestRng = rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

/// Random stay with measurements and treatment changes, some placed exactly
/// on grid points and on treatment times.
pub fn random_log(rng: &mut TestRng, id: usize) -> EventLog {
    let end: f64 = if rng.random_bool(0.3) { rng.random_range(0.5..72.0) } else { 72.0 };
    let hours = if end < 72.0 { end } else { rng.random_range(72.0..20000.0) };
    let mut events = Vec::new();
    let mut tx_times = Vec::new();
    for _ in 0..rng.random_range(0..25) {
        let t = match rng.random_range(0..4) {
            0 => (rng.random_range(0.0..end)).floor(),
            _ => rng.random_range(0.0..end),
        };
        let name = if rng.random_bool(0.5) { IV_FLUID } else { VASOPRESSOR };
        if events.iter().any(|e: &Event| e.time == t && e.name == name) {
            continue;
        }
        let v = if rng.random_bool(0.3) { 0.0 } else { rng.random_range(0.01..5.0) };
        events.push(Event::treatment(t, name, v));
        tx_times.push(t);
    }
    for _ in 0..rng.random_range(1..150) {
        let t = match rng.random_range(0..6) {
            0 if !tx_times.is_empty() => tx_times[rng.random_range(0..tx_times.len())],
            1 => rng.random_range(0.0..end).floor(),
            2 => 0.0,
            3 => end,
            _ => rng.random_range(0.0..=end),
        };
        let name = ["map", "lactate", "sofa"][rng.random_range(0..3)];
        events.push(Event::measurement(t, name, rng.random_range(0.0..100.0)));
    }
    events.sort_by(|a, b| a.time.total_cmp(&b.time));
    EventLog {
        patient_id: format!("r{id}"),
        statics: BTreeMap::new(),
        events,
        outcome: Outcome::new(hours, 3),
    }
}

/// Checks a rebinned trajectory against brute-force reassignment. Returns a
/// list of discrepancies (empty when the trajectory is correct).
pub fn rebin_discrepancies(log: &EventLog, width: f64, got: &BinnedTrajectory) -> Vec<String> {
    let mut bad = Vec::new();
    let end = log.end_time();
    let tx: Vec<&Event> = log.events.iter().filter(|e| e.kind == EventKind::Treatment).collect();

    // Expected boundaries: each bin stops at the earliest of a full width,
    // the next treatment change and the end of stay.
    let mut expect = vec![0.0];
    let mut cur = 0.0_f64;
    while cur < end {
        let mut nxt = (cur + width).min(end);
        for e in &tx {
            if e.time > cur && e.time < nxt {
                nxt = e.time;
            }
        }
        expect.push(nxt);
        cur = nxt;
    }
    let have: Vec<f64> = std::iter::once(got.bins.first().map_or(f64::NAN, |b| b.start))
        .chain(got.bins.iter().map(|b| b.end))
        .collect();
    if have != expect {
        bad.push(format!("{}: bounds {:?} vs {:?}", log.patient_id, have, expect));
        return bad;
    }
    for w in got.bins.windows(2) {
        if w[0].end != w[1].start {
            bad.push(format!("{}: gap at {}", log.patient_id, w[0].end));
        }
    }
    for e in &tx {
        if e.time <= end && !expect.contains(&e.time) {
            bad.push(format!("{}: treatment at {} not on a boundary", log.patient_id, e.time));
        }
    }

    // Every measurement in exactly one bin: (start, end], time 0 in bin 0.
    let mut want: Vec<Vec<(f64, u64)>> = vec![Vec::new(); got.bins.len()];
    for e in log.events.iter().filter(|e| e.kind == EventKind::Measurement) {
        let homes: Vec<usize> = (0..got.bins.len())
            .filter(|&k| {
                let b = &got.bins[k];
                (e.time > b.start && e.time <= b.end) || (k == 0 && e.time == 0.0)
            })
            .collect();
        if homes.len() != 1 {
            bad.push(format!("{}: measurement at {} has {} homes", log.patient_id, e.time, homes.len()));
            continue;
        }
        want[homes[0]].push((e.time, e.value.to_bits()));
    }
    for (k, b) in got.bins.iter().enumerate() {
        let mut h: Vec<(f64, u64)> = b.measurements.iter().map(|m| (m.time, m.value.to_bits())).collect();
        let mut w = want[k].clone();
        h.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        w.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        if h != w {
            bad.push(format!("{}: bin {k} holds {} measurements, oracle {}", log.patient_id, h.len(), w.len()));
        }
        // Rate in effect: the latest change at or before the bin start.
        let rate = |name: &str| {
            tx.iter()
                .filter(|e| e.name == name && e.time <= b.start)
                .max_by(|a, c| a.time.total_cmp(&c.time))
                .map_or(0.0, |e| e.value)
        };
        if b.rates != (rate(IV_FLUID), rate(VASOPRESSOR)) {
            bad.push(format!("{}: bin {k} rates {:?}", log.patient_id, b.rates));
        }
        if b.measurements.iter().any(|m| m.time > b.end) {
            bad.push(format!("{}: bin {k} holds a later measurement", log.patient_id));
        }
    }
    let total: usize = got.bins.iter().map(|b| b.measurements.len()).sum();
    let n_meas = log.events.iter().filter(|e| e.kind == EventKind::Measurement).count();
    if total != n_meas {
        bad.push(format!("{}: {total} measurements binned of {n_meas}", log.patient_id));
    }
    bad
}

/// Type-7 quantile by explicit rank arithmetic on a sorted copy.
pub fn percentile_oracle(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if lo + 1 < v.len() {
        v[lo] * (1.0 - frac) + v[lo + 1] * frac
    } else {
        v[lo]
    }
}

/// Dose bin by enumerating the intervals [0], (0, q25), [q25, q50), [q50, q75), [q75, ∞).
pub fn dose_bin_oracle(rate: f64, cuts: [f64; 3]) -> usize {
    if rate == 0.0 {
        return 0;
    }
    let edges = [0.0, cuts[0], cuts[1], cuts[2], f64::INFINITY];
    let mut bin = 0;
    for k in 1..=4 {
        let lo_ok = if k == 1 { rate > 0.0 } else { rate >= edges[k - 1] };
        if lo_ok && rate < edges[k] {
            bin = k;
        }
    }
    bin
}

/// Desk-scale experiment that runs every stage in seconds.
pub fn tiny_experiment() -> hemosens::harness::ExperimentConfig {
    use hemosens::cohort::SimParams;
    use hemosens::harness::{DataSource, ExperimentConfig};
    let mut cfg = ExperimentConfig {
        data: DataSource::Simulate {
            sim: SimParams {
                n_patients: 60,
                ..SimParams::default()
            },
        },
        seeds: vec![0, 1],
        ground_truth_rollouts: 10,
        ..ExperimentConfig::default()
    };
    cfg.embed.hidden = 8;
    cfg.embed.epochs = 3;
    cfg.mortality.epochs = 2;
    cfg.agent.steps = 200;
    cfg.agent.hidden = 16;
    cfg.agent.target_sync = 50;
    cfg.agent.log_every = 50;
    cfg.behavior.epochs = 2;
    cfg.bootstrap.n_boot = 50;
    cfg
}

/// Upper tail of the chi-square distribution with `k` degrees of freedom,
/// via the regularized incomplete gamma function.
pub fn chi2_sf(x: f64, k: usize) -> f64 {
    let a = k as f64 / 2.0;
    let x = x / 2.0;
    if x <= 0.0 {
        return 1.0;
    }
    let ln_pre = a * x.ln() - x - ln_gamma(a);
    if x < a + 1.0 {
        let (mut term, mut sum, mut n) = (1.0 / a, 1.0 / a, a);
        while term.abs() > sum.abs() * 1e-15 {
            n += 1.0;
            term *= x / n;
            sum += term;
        }
        1.0 - sum * ln_pre.exp()
    } else {
        // Lentz continued fraction.
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..10_000 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let del = d * c;
            h *= del;
            if (del - 1.0).abs() < 1e-15 {
                break;
            }
        }
        ln_pre.exp() * h
    }
}

/// Lanczos approximation.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 6] = [
        76.180_091_729_471_46,
        -86.505_320_329_416_77,
        24.014_098_240_830_91,
        -1.231_739_572_450_155,
        0.120_865_097_386_617_9e-2,
        -0.539_523_938_495_3e-5,
    ];
    let tmp = x + 5.5 - (x + 0.5) * (x + 5.5).ln();
    let mut ser = 1.000_000_000_190_015;
    for (j, g) in G.iter().enumerate() {
        ser += g / (x + 1.0 + j as f64);
    }
    -tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

/// Two-state, two-action deterministic chain and its optimal Q by value
/// iteration. Each transition is repeated `copies` times.
pub fn toy_chain(copies: usize, gamma: f64) -> (Vec<hemosens::agent::Transition>, [[f64; 2]; 2]) {
    let s = [vec![1.0, 0.0], vec![0.0, 1.0]];
    let dynamics = [[(0usize, 0.0), (1, 1.0)], [(0, 0.5), (1, 0.0)]];
    let mut q = [[0.0f64; 2]; 2];
    for _ in 0..5000 {
        let mut next = q;
        for x in 0..2 {
            for a in 0..2 {
                let (y, r) = dynamics[x][a];
                next[x][a] = r + gamma * q[y][0].max(q[y][1]);
            }
        }
        q = next;
    }
    let mut tr = Vec::new();
    for _ in 0..copies {
        for x in 0..2 {
            for a in 0..2 {
                let (y, r) = dynamics[x][a];
                tr.push(hemosens::agent::Transition {
                    state: s[x].clone(),
                    action: a,
                    reward: r,
                    next: Some(s[y].clone()),
                });
            }
        }
    }
    (tr, q)
}

pub fn random_simplex(rng: &mut TestRng, k: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = v.iter().sum();
    v.into_iter().map(|x| x / s).collect()
}

pub fn draw(rng: &mut TestRng, p: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &x) in p.iter().enumerate() {
        acc += x;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Three-state deterministic MDP over `k` actions: next state and reward
/// are fixed functions of (state, action).
pub struct Tabular {
    pub next: Vec<Vec<usize>>,
    pub reward: Vec<Vec<f64>>,
    pub pi_e: Vec<Vec<f64>>,
    pub pi_b: Vec<Vec<f64>>,
}

impl Tabular {
    pub fn random(rng: &mut TestRng, k: usize) -> Self {
        let ns = 3;
        Self {
            next: (0..ns).map(|_| (0..k).map(|_| rng.random_range(0..ns)).collect()).collect(),
            reward: (0..ns).map(|_| (0..k).map(|_| rng.random_range(-1.0..2.0)).collect()).collect(),
            pi_e: (0..ns).map(|_| random_simplex(rng, k)).collect(),
            pi_b: (0..ns).map(|_| random_simplex(rng, k)).collect(),
        }
    }

    /// `Q_h(s, a)` with `h` steps remaining, by backward recursion.
    pub fn q(&self, h: usize, gamma: f64) -> Vec<Vec<f64>> {
        let k = self.reward[0].len();
        let mut q = vec![vec![0.0; k]; 3];
        for _ in 0..h {
            let v: Vec<f64> = (0..3).map(|s| self.pi_e[s].iter().zip(&q[s]).map(|(p, x)| p * x).sum()).collect();
            q = (0..3).map(|s| (0..k).map(|a| self.reward[s][a] + gamma * v[self.next[s][a]]).collect()).collect();
        }
        q
    }

    pub fn episode(&self, rng: &mut TestRng, len: usize, gamma: f64) -> (OpeEpisode, StepTables, f64) {
        let mut s = rng.random_range(0..3);
        let q0 = self.q(len, gamma);
        let value: f64 = self.pi_e[s].iter().zip(&q0[s]).map(|(p, x)| p * x).sum();
        let mut ep = OpeEpisode {
            states: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
        };
        let mut tb = StepTables {
            pi_e: Vec::new(),
            pi_b: Vec::new(),
            q: Vec::new(),
        };
        for t in 0..len {
            let a = draw(rng, &self.pi_b[s]);
            ep.states.push(vec![s as f64]);
            ep.actions.push(a);
            ep.rewards.push(self.reward[s][a]);
            tb.pi_e.push(self.pi_e[s].clone());
            tb.pi_b.push(self.pi_b[s].clone());
            tb.q.push(self.q(len - t, gamma)[s].clone());
            s = self.next[s][a];
        }
        (ep, tb, value)
    }
}
