//! Event logs, the synthetic septic-patient simulator and ingestion of
//! user-supplied logs in the same schema.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod io;
mod sim;

pub use io::{ingest_events, read_logs, write_events, write_logs, write_statics, Ingested};
pub use sim::{
    ground_truth_value, rollout, simulate_cohort, BinObservation, ConstantDose, EpisodeAgent, Physician, SimParams,
    ValueEstimate,
};

/// Length of the observed ICU window in hours.
pub const MAX_HOURS: f64 = 72.0;
pub const HOURS_PER_YEAR: f64 = 24.0 * 365.0;
pub const WORST_SOFA: u32 = 24;

pub const IV_FLUID: &str = "iv_fluid_rate";
pub const VASOPRESSOR: &str = "vasopressor_rate";
pub const TREATMENTS: [&str; 2] = [IV_FLUID, VASOPRESSOR];

pub const HOURS_SURVIVED: &str = "hours_survived";
pub const SURVIVED_1YR: &str = "survived_1yr";
pub const FINAL_SOFA: &str = "final_sofa";

/// Measurement channels in emission order; the first three are always on.
pub const CHANNELS: [&str; 10] = [
    "map",
    "lactate",
    "sofa",
    "heart_rate",
    "creatinine",
    "spo2",
    "temperature",
    "wbc",
    "urine_output",
    "resp_rate",
];
pub const SOFA_CHANNEL: &str = "sofa";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CohortError {
    #[error("invalid simulator parameters: {0}")]
    InvalidParams(String),
    #[error("{file}:{line}: {msg}")]
    Parse { file: String, line: usize, msg: String },
    #[error("{file}:{line}: time {time} outside [0, {MAX_HOURS}]")]
    OutOfRange { file: String, line: usize, time: f64 },
    #[error("{file}:{line}: duplicate record ({patient}, {time}, {name})")]
    Duplicate {
        file: String,
        line: usize,
        patient: String,
        time: f64,
        name: String,
    },
    #[error("patient {0}: outcome record missing or incomplete")]
    MissingOutcome(String),
    #[error("patient {patient}: invalid outcome: {msg}")]
    InvalidOutcome { patient: String, msg: String },
    #[error("patient {patient}, bin {bin}: invalid action: {msg}")]
    InvalidAction { patient: String, bin: usize, msg: String },
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, CohortError>;

impl From<std::io::Error> for CohortError {
    fn from(e: std::io::Error) -> Self {
        CohortError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Measurement,
    Treatment,
    Outcome,
}

/// A timestamped record. Treatment values are the new infusion rate from
/// `time` onward (dose per hour).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    pub kind: EventKind,
    pub name: String,
    pub value: f64,
}

impl Event {
    pub fn measurement(time: f64, name: &str, value: f64) -> Self {
        Self {
            time,
            kind: EventKind::Measurement,
            name: name.to_string(),
            value,
        }
    }

    pub fn treatment(time: f64, name: &str, rate: f64) -> Self {
        Self {
            time,
            kind: EventKind::Treatment,
            name: name.to_string(),
            value: rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub hours_survived: f64,
    pub survived_1yr: bool,
    pub final_sofa: u32,
}

impl Outcome {
    pub fn new(hours_survived: f64, final_sofa: u32) -> Self {
        Self {
            hours_survived,
            survived_1yr: hours_survived >= HOURS_PER_YEAR,
            final_sofa,
        }
    }

    pub fn validate(&self, patient: &str) -> Result<()> {
        let bad = |msg: String| CohortError::InvalidOutcome {
            patient: patient.to_string(),
            msg,
        };
        if !(self.hours_survived >= 0.0) {
            return Err(bad(format!("hours_survived {} < 0", self.hours_survived)));
        }
        if self.survived_1yr != (self.hours_survived >= HOURS_PER_YEAR) {
            return Err(bad(format!(
                "survived_1yr={} inconsistent with hours_survived={}",
                self.survived_1yr, self.hours_survived
            )));
        }
        if self.final_sofa > WORST_SOFA {
            return Err(bad(format!("final_sofa {} > {WORST_SOFA}", self.final_sofa)));
        }
        Ok(())
    }

    /// Died within 30 days of admission.
    pub fn died_30d(&self) -> bool {
        self.hours_survived < 24.0 * 30.0
    }
}

/// One patient's stay: static covariates, time-ordered events and outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventLog {
    pub patient_id: String,
    pub statics: BTreeMap<String, f64>,
    pub events: Vec<Event>,
    pub outcome: Outcome,
}

impl EventLog {
    /// End of the observed stay: death or the end of the ICU window.
    pub fn end_time(&self) -> f64 {
        self.outcome.hours_survived.min(MAX_HOURS)
    }
}

static SIMULATOR_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of simulated patient trajectories produced by this process.
pub fn simulator_calls() -> u64 {
    SIMULATOR_CALLS.load(Ordering::SeqCst)
}

fn count_simulator_call() {
    SIMULATOR_CALLS.fetch_add(1, Ordering::SeqCst);
}
