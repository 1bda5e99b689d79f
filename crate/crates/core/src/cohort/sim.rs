use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp, Exp1, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    count_simulator_call, CohortError, Event, EventLog, Outcome, Result, CHANNELS, HOURS_PER_YEAR, IV_FLUID,
    MAX_HOURS, VASOPRESSOR, WORST_SOFA,
};
use crate::{numeric, par, seed};

/// Euler step of the latent dynamics in hours.
const DT: f64 = 0.25;
const VASO_MAX: f64 = 1.0;
const FLUID_MAX: f64 = 500.0;
const FLUID_OVERLOAD_START: f64 = 5000.0;
const FLUID_OVERLOAD_SPAN: f64 = 10000.0;
const POST_ICU_HAZARD: f64 = 2e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimParams {
    pub n_patients: usize,
    pub seed: u64,
    /// Poisson rate per channel, events/hour.
    pub measurement_rate: f64,
    /// Number of channels from [`CHANNELS`] to emit (3..=10).
    pub n_channels: usize,
    /// Physician reassessment rate, events/hour.
    pub reassess_rate: f64,
    /// MAP gain per unit vasopressor rate.
    pub vaso_bp_gain: f64,
    /// MAP gain per unit fluid rate.
    pub fluid_bp_gain: f64,
    /// Log-hazard increase per unit of cumulative vasopressor dose.
    pub toxicity_gain: f64,
    pub fluid_overload_gain: f64,
    /// Per-hour death hazard at zero severity.
    pub base_hazard: f64,
    pub physician_noise: f64,
}

impl Default for SimParams {
    fn default() -> Self {
        Self {
            n_patients: 200,
            seed: 0,
            measurement_rate: 0.5,
            n_channels: 10,
            reassess_rate: 0.5,
            vaso_bp_gain: 25.0,
            fluid_bp_gain: 0.02,
            toxicity_gain: 0.04,
            fluid_overload_gain: 1.0,
            base_hazard: 8e-4,
            physician_noise: 1.0,
        }
    }
}

impl SimParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CohortError::InvalidParams(m));
        if self.n_patients == 0 {
            return bad("n_patients must be >= 1".into());
        }
        if !(3..=CHANNELS.len()).contains(&self.n_channels) {
            return bad(format!("n_channels {} outside 3..={}", self.n_channels, CHANNELS.len()));
        }
        for (name, v) in [
            ("measurement_rate", self.measurement_rate),
            ("reassess_rate", self.reassess_rate),
            ("vaso_bp_gain", self.vaso_bp_gain),
            ("fluid_bp_gain", self.fluid_bp_gain),
            ("toxicity_gain", self.toxicity_gain),
            ("fluid_overload_gain", self.fluid_overload_gain),
            ("base_hazard", self.base_hazard),
            ("physician_noise", self.physician_noise),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} = {v} must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn channels(&self) -> &'static [&'static str] {
        &CHANNELS[..self.n_channels]
    }
}

/// What a dosing agent sees when a bin closes.
#[derive(Debug, Clone)]
pub struct BinObservation<'a> {
    pub patient_id: &'a str,
    pub statics: &'a BTreeMap<String, f64>,
    pub bin: usize,
    pub start: f64,
    pub end: f64,
    /// Measurements with time in (start, end] (bin 0 includes time 0).
    pub measurements: &'a [Event],
    /// (iv, vaso) rates in effect over the bin.
    pub rates: (f64, f64),
}

/// Controls dosing during a rollout and scores the finished episode.
///
/// With `bin_hours() == None` the simulated physician doses throughout.
/// Otherwise the physician sets the admission dose and `act` is consulted
/// at every `k · bin_hours` boundary inside the ICU window.
pub trait EpisodeAgent {
    fn bin_hours(&self) -> Option<f64>;
    fn act(&mut self, obs: &BinObservation<'_>) -> Result<(f64, f64)>;
    /// Per-bin rewards for the completed episode.
    fn rewards(&mut self, log: &EventLog) -> Result<Vec<f64>>;
}

/// Logged physician behavior with a caller-supplied reward.
pub struct Physician<F>(pub F);

impl<F: FnMut(&EventLog) -> Result<Vec<f64>>> EpisodeAgent for Physician<F> {
    fn bin_hours(&self) -> Option<f64> {
        None
    }

    fn act(&mut self, obs: &BinObservation<'_>) -> Result<(f64, f64)> {
        Err(CohortError::InvalidAction {
            patient: obs.patient_id.to_string(),
            bin: obs.bin,
            msg: "physician agent is never consulted".into(),
        })
    }

    fn rewards(&mut self, log: &EventLog) -> Result<Vec<f64>> {
        (self.0)(log)
    }
}

/// Holds (iv, vaso) fixed from the first boundary on.
pub struct ConstantDose<F> {
    pub iv: f64,
    pub vaso: f64,
    pub bin_hours: f64,
    pub reward: F,
}

impl<F: FnMut(&EventLog) -> Result<Vec<f64>>> EpisodeAgent for ConstantDose<F> {
    fn bin_hours(&self) -> Option<f64> {
        Some(self.bin_hours)
    }

    fn act(&mut self, _obs: &BinObservation<'_>) -> Result<(f64, f64)> {
        Ok((self.iv, self.vaso))
    }

    fn rewards(&mut self, log: &EventLog) -> Result<Vec<f64>> {
        (self.reward)(log)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

struct Latent {
    severity: f64,
    bp: f64,
    lactate: f64,
    cum_vaso: f64,
    cum_fluid: f64,
    drift: f64,
}

impl Latent {
    fn overload(&self) -> f64 {
        ((self.cum_fluid - FLUID_OVERLOAD_START) / FLUID_OVERLOAD_SPAN).clamp(0.0, 1.0)
    }

    fn hypotension(&self) -> f64 {
        (65.0 - self.bp).max(0.0)
    }

    fn sofa(&self, p: &SimParams) -> u32 {
        let raw = 20.0 * self.severity + (self.lactate - 2.0).max(0.0) + 3.0 * p.fluid_overload_gain * self.overload();
        raw.round().clamp(0.0, WORST_SOFA as f64) as u32
    }

    fn hazard(&self, p: &SimParams) -> f64 {
        p.base_hazard
            * (3.0 * self.severity
                + 0.12 * self.hypotension()
                + p.toxicity_gain * self.cum_vaso
                + p.fluid_overload_gain * self.overload())
            .exp()
    }

    fn advance(&mut self, dt: f64, iv: f64, vaso: f64, p: &SimParams, rng: &mut seed::Rng) {
        let hypo = self.hypotension();
        let target = 88.0 - 40.0 * self.severity + p.vaso_bp_gain * vaso + p.fluid_bp_gain * iv;
        let sq = dt.sqrt();
        let z: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        self.bp += (target - self.bp) * dt.min(1.0) + 3.0 * sq * z[0];
        self.severity += (self.drift - 0.03 * self.severity
            + 0.003 * hypo
            + 0.01 * p.fluid_overload_gain * self.overload())
            * dt
            + 0.01 * sq * z[1];
        self.severity = self.severity.clamp(0.0, 1.0);
        self.lactate += 0.5 * (1.0 + 5.0 * self.severity + 0.08 * hypo - self.lactate) * dt + 0.1 * sq * z[2];
        self.lactate = self.lactate.max(0.3);
        self.cum_vaso += vaso * dt;
        self.cum_fluid += iv * dt;
    }

    fn observe(&self, channel: &str, iv: f64, p: &SimParams, rng: &mut seed::Rng) -> f64 {
        let mut n = |sd: f64| sd * rng.sample::<f64, _>(StandardNormal);
        let s = self.severity;
        match channel {
            "map" => self.bp + n(3.0),
            "lactate" => (self.lactate + n(0.2)).max(0.1),
            "sofa" => self.sofa(p) as f64,
            "heart_rate" => 80.0 + 40.0 * s + 0.3 * self.hypotension() + n(5.0),
            "creatinine" => (0.8 + 2.5 * s + 0.5 * self.overload() + n(0.15)).max(0.1),
            "spo2" => (98.0 - 8.0 * s + n(1.0)).min(100.0),
            "temperature" => 37.0 + 1.5 * s + n(0.3),
            "wbc" => (8.0 + 10.0 * s + n(1.5)).max(0.5),
            "urine_output" => (80.0 - 60.0 * s + 0.04 * iv + n(10.0)).max(0.0),
            "resp_rate" => 16.0 + 12.0 * s + n(2.0),
            other => unreachable!("unknown channel {other}"),
        }
    }
}

/// Physician dosing rule: clipped affine in observed hypotension and lactate
/// plus Gaussian noise, so every dose bin has support in most states.
fn physician_rates(latent: &Latent, p: &SimParams, rng: &mut seed::Rng) -> (f64, f64) {
    let map_obs = latent.bp + 3.0 * rng.sample::<f64, _>(StandardNormal);
    let lac_obs = latent.lactate + 0.2 * rng.sample::<f64, _>(StandardNormal);
    let zv: f64 = rng.sample(StandardNormal);
    let zf: f64 = rng.sample(StandardNormal);
    let vaso = 0.25 * (72.0 - map_obs) / 10.0 + 0.15 * p.physician_noise * zv;
    let fluid = 60.0 * (lac_obs - 1.5) + 40.0 * (70.0 - map_obs) / 10.0 + 80.0 * p.physician_noise * zf;
    let vaso = if vaso <= 0.03 { 0.0 } else { vaso.min(VASO_MAX) };
    let fluid = if fluid <= 10.0 { 0.0 } else { fluid.min(FLUID_MAX) };
    (fluid, vaso)
}

fn poisson_times(rate: f64, horizon: f64, rng: &mut seed::Rng) -> Vec<f64> {
    let mut out = Vec::new();
    if rate <= 0.0 {
        return out;
    }
    let exp = Exp::new(rate).expect("positive rate");
    let mut t = 0.0;
    loop {
        t += exp.sample(rng);
        if t > horizon {
            return out;
        }
        out.push(t);
    }
}

fn statics(rng: &mut seed::Rng) -> BTreeMap<String, f64> {
    let age: f64 = Normal::new(65.0, 12.0).unwrap().sample(rng);
    let weight: f64 = Normal::new(80.0, 15.0).unwrap().sample(rng);
    let elix = rng.random_range(0..=8) as f64;
    BTreeMap::from([
        ("age".to_string(), age.clamp(18.0, 95.0)),
        ("weight".to_string(), weight.clamp(40.0, 160.0)),
        ("elixhauser".to_string(), elix),
    ])
}

fn validate_rates(rates: (f64, f64), patient: &str, bin: usize) -> Result<(f64, f64)> {
    let ok = |r: f64| r.is_finite() && r >= 0.0;
    if ok(rates.0) && ok(rates.1) {
        Ok(rates)
    } else {
        Err(CohortError::InvalidAction {
            patient: patient.to_string(),
            bin,
            msg: format!("rates {:?} must be finite and non-negative", rates),
        })
    }
}

/// Simulates one patient. `stream` separates cohort patients from
/// evaluation rollouts; `agent == None` means physician control.
fn run_patient(p: &SimParams, stream: &str, index: usize, mut agent: Option<&mut dyn EpisodeAgent>) -> Result<EventLog> {
    count_simulator_call();
    let base = seed::derive_idx(p.seed, stream, index as u64);
    let sub = |label: &str| seed::rng(seed::derive(base, label));
    let (mut r_static, mut r_dyn, mut r_times, mut r_noise, mut r_phys, mut r_death) =
        (sub("static"), sub("dynamics"), sub("times"), sub("noise"), sub("physician"), sub("death"));
    let patient_id = format!("p{index:05}");
    let statics = statics(&mut r_static);
    let s0: f64 = Beta::new(2.0, 3.0).unwrap().sample(&mut r_static);
    let severity = (s0 + 0.02 * statics["elixhauser"]).clamp(0.05, 0.95);
    let mut latent = Latent {
        severity,
        bp: 88.0 - 40.0 * severity + 6.0 * r_static.sample::<f64, _>(StandardNormal),
        lactate: 1.0 + 5.0 * severity,
        cum_vaso: 0.0,
        cum_fluid: 0.0,
        drift: r_static.random_range(-0.005..0.01),
    };

    let channels = p.channels();
    let mut meas: Vec<(f64, usize)> = (0..channels.len()).map(|c| (0.0, c)).collect();
    for c in 0..channels.len() {
        meas.extend(poisson_times(p.measurement_rate, MAX_HOURS, &mut r_times).into_iter().map(|t| (t, c)));
    }
    meas.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let bin_hours = match agent.as_ref().map(|a| a.bin_hours()) {
        Some(Some(h)) if !(h > 0.0 && h.is_finite()) => {
            return Err(CohortError::InvalidParams(format!("agent bin_hours {h}")));
        }
        Some(h) => h,
        None => None,
    };
    let decisions: Vec<f64> = match bin_hours {
        None => std::iter::once(0.0).chain(poisson_times(p.reassess_rate, MAX_HOURS, &mut r_times)).collect(),
        Some(h) => {
            let mut d = vec![0.0];
            let mut k = 1;
            while (k as f64) * h < MAX_HOURS {
                d.push(k as f64 * h);
                k += 1;
            }
            d
        }
    };

    let death_threshold: f64 = r_death.sample(Exp1);
    let mut cum_hazard = 0.0;
    let mut events: Vec<Event> = Vec::new();
    let mut rates = (0.0, 0.0);
    let (mut mi, mut di) = (0, 0);
    let mut bin_first_event = 0;
    let mut bin_start = 0.0;
    let mut t = 0.0;
    let mut death: Option<f64> = None;

    loop {
        // Events at the current instant: measurements first, then dosing.
        while mi < meas.len() && meas[mi].0 <= t {
            let c = meas[mi].1;
            let v = latent.observe(channels[c], rates.0, p, &mut r_noise);
            events.push(Event::measurement(meas[mi].0, channels[c], v));
            mi += 1;
        }
        if di < decisions.len() && decisions[di] <= t {
            let new = if di == 0 || bin_hours.is_none() {
                physician_rates(&latent, p, &mut r_phys)
            } else {
                let ag = agent.as_deref_mut().expect("agent present when binned");
                let bin_events: Vec<Event> = events[bin_first_event..]
                    .iter()
                    .filter(|e| e.kind == super::EventKind::Measurement)
                    .cloned()
                    .collect();
                let obs = BinObservation {
                    patient_id: &patient_id,
                    statics: &statics,
                    bin: di - 1,
                    start: bin_start,
                    end: t,
                    measurements: &bin_events,
                    rates,
                };
                validate_rates(ag.act(&obs)?, &patient_id, di - 1)?
            };
            if di > 0 {
                bin_first_event = events.len();
                bin_start = t;
            }
            if new.0 != rates.0 {
                events.push(Event::treatment(t, IV_FLUID, new.0));
            }
            if new.1 != rates.1 {
                events.push(Event::treatment(t, VASOPRESSOR, new.1));
            }
            rates = new;
            di += 1;
        }
        if t >= MAX_HOURS {
            break;
        }
        let mut next = ((t / DT).floor() + 1.0) * DT;
        if mi < meas.len() {
            next = next.min(meas[mi].0);
        }
        if di < decisions.len() {
            next = next.min(decisions[di]);
        }
        let next = next.min(MAX_HOURS);
        let dt = next - t;
        let h = latent.hazard(p);
        if cum_hazard + h * dt >= death_threshold {
            let tau = t + (death_threshold - cum_hazard) / h;
            latent.advance(tau - t, rates.0, rates.1, p, &mut r_dyn);
            death = Some(tau);
            break;
        }
        cum_hazard += h * dt;
        latent.advance(dt, rates.0, rates.1, p, &mut r_dyn);
        t = next;
    }

    let final_sofa = latent.sofa(p);
    let hours_survived = match death {
        Some(tau) => tau,
        None => {
            let age = statics["age"];
            let rate = POST_ICU_HAZARD
                * (4.0 * latent.severity + 0.03 * (age - 65.0) + 0.5 * p.toxicity_gain * latent.cum_vaso).exp();
            MAX_HOURS + Exp::new(rate).expect("positive hazard").sample(&mut r_death)
        }
    };
    let log = EventLog {
        patient_id,
        statics,
        events,
        outcome: Outcome::new(hours_survived, final_sofa),
    };
    debug_assert!(log.outcome.hours_survived >= 0.0 && (log.outcome.hours_survived >= HOURS_PER_YEAR) == log.outcome.survived_1yr);
    Ok(log)
}

/// Simulates `n_patients` stays under the physician policy.
///
/// Each patient draws from its own stream derived from `(seed, index)`, so
/// results do not depend on scheduling.
pub fn simulate_cohort(p: &SimParams) -> Result<Vec<EventLog>> {
    p.validate()?;
    par::map_range(p.n_patients, |i| run_patient(p, "patient", i, None))
        .into_iter()
        .collect()
}

/// One evaluation rollout (a fresh patient drawn from the rollout stream).
pub fn rollout(p: &SimParams, index: usize, agent: &mut dyn EpisodeAgent) -> Result<EventLog> {
    p.validate()?;
    run_patient(p, "rollout", index, Some(agent))
}

/// Monte Carlo discounted return of an agent over fresh rollouts, with the
/// standard error of the mean.
pub fn ground_truth_value<A, F>(p: &SimParams, n_rollouts: usize, gamma: f64, factory: F) -> Result<ValueEstimate>
where
    A: EpisodeAgent,
    F: Fn(usize) -> A + Sync,
{
    p.validate()?;
    if n_rollouts == 0 {
        return Err(CohortError::InvalidParams("n_rollouts must be >= 1".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(CohortError::InvalidParams(format!("gamma {gamma} outside [0, 1]")));
    }
    let returns = par::map_range(n_rollouts, |i| -> Result<f64> {
        let mut agent = factory(i);
        let log = rollout(p, i, &mut agent)?;
        let r = agent.rewards(&log)?;
        let mut acc = numeric::KahanSum::new();
        let mut disc = 1.0;
        for v in r {
            acc.add(disc * v);
            disc *= gamma;
        }
        Ok(acc.value())
    })
    .into_iter()
    .collect::<Result<Vec<f64>>>()?;
    let n = returns.len();
    let se = if n > 1 { numeric::sample_sd(&returns) / (n as f64).sqrt() } else { 0.0 };
    Ok(ValueEstimate {
        mean: numeric::mean(&returns),
        se,
        n,
    })
}
