use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DiscretizeError, Result};
use crate::cohort::{Event, EventKind, EventLog, Outcome, IV_FLUID, MAX_HOURS, VASOPRESSOR};

/// How the grid continues after a bin is truncated at a treatment time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Anchoring {
    /// The next bin starts at the truncation point and runs a full width.
    #[default]
    Reanchor,
    /// Bins are split at treatment times but the grid stays at k·width.
    FixedGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub start: f64,
    pub end: f64,
    /// Measurements with time in (start, end]; bin 0 also takes time 0.
    pub measurements: Vec<Event>,
    /// (iv, vaso) dose per hour in effect over the bin.
    pub rates: (f64, f64),
}

impl Bin {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }

    /// (iv, vaso) dose delivered over the bin.
    pub fn doses(&self) -> (f64, f64) {
        let d = self.duration();
        (self.rates.0 * d, self.rates.1 * d)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedTrajectory {
    pub patient_id: String,
    pub statics: BTreeMap<String, f64>,
    pub bin_hours: f64,
    pub bins: Vec<Bin>,
    pub outcome: Outcome,
}

fn next_boundary(cur: f64, width: f64, anchoring: Anchoring, treatments: &[f64], end: f64) -> f64 {
    let nominal = match anchoring {
        Anchoring::Reanchor => cur + width,
        Anchoring::FixedGrid => ((cur / width).floor() + 1.0) * width,
    };
    let mut b = nominal.min(end);
    if let Some(&t) = treatments.iter().find(|&&t| t > cur) {
        b = b.min(t);
    }
    b
}

/// Cuts a stay into bins of `bin_hours`, truncating a bin at any treatment
/// change strictly inside it. Later measurements of the truncated bin fall
/// into the following bin.
pub fn rebin(log: &EventLog, bin_hours: f64, anchoring: Anchoring) -> Result<BinnedTrajectory> {
    if bin_hours != 1.0 && bin_hours != 4.0 {
        return Err(DiscretizeError::BinHours(bin_hours));
    }
    let end = log.end_time();
    if !(end > 0.0) {
        return Err(DiscretizeError::EmptyStay(log.patient_id.clone()));
    }
    for e in &log.events {
        if !(0.0..=end).contains(&e.time) || e.time > MAX_HOURS {
            return Err(DiscretizeError::EventOutOfRange {
                patient: log.patient_id.clone(),
                time: e.time,
                end,
            });
        }
    }
    let mut treatments: Vec<f64> = log
        .events
        .iter()
        .filter(|e| e.kind == EventKind::Treatment && e.time > 0.0 && e.time < end)
        .map(|e| e.time)
        .collect();
    treatments.sort_by(f64::total_cmp);
    treatments.dedup();

    let mut bounds = vec![0.0];
    let mut cur = 0.0;
    while cur < end {
        cur = next_boundary(cur, bin_hours, anchoring, &treatments, end);
        bounds.push(cur);
    }

    let mut bins: Vec<Bin> = bounds
        .windows(2)
        .map(|w| Bin {
            start: w[0],
            end: w[1],
            measurements: Vec::new(),
            rates: (0.0, 0.0),
        })
        .collect();

    let mut tx: Vec<&Event> = log.events.iter().filter(|e| e.kind == EventKind::Treatment).collect();
    tx.sort_by(|a, b| a.time.total_cmp(&b.time));
    let mut rates = (0.0, 0.0);
    let mut ti = 0;
    for bin in bins.iter_mut() {
        while ti < tx.len() && tx[ti].time <= bin.start {
            match tx[ti].name.as_str() {
                IV_FLUID => rates.0 = tx[ti].value,
                VASOPRESSOR => rates.1 = tx[ti].value,
                _ => {}
            }
            ti += 1;
        }
        bin.rates = rates;
    }
    for e in log.events.iter().filter(|e| e.kind == EventKind::Measurement) {
        let bi = bins.partition_point(|b| b.end < e.time);
        bins[bi].measurements.push(e.clone());
    }
    Ok(BinnedTrajectory {
        patient_id: log.patient_id.clone(),
        statics: log.statics.clone(),
        bin_hours,
        bins,
        outcome: log.outcome,
    })
}
