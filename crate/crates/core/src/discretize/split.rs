use rand::seq::SliceRandom;

use super::{BinnedTrajectory, DiscretizeError, FeatureEpisode, Result};
use crate::cohort::EventLog;
use crate::seed;

pub trait HasPatient {
    fn patient_id(&self) -> &str;
}

impl HasPatient for EventLog {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
}

impl HasPatient for BinnedTrajectory {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
}

impl HasPatient for FeatureEpisode {
    fn patient_id(&self) -> &str {
        &self.patient_id
    }
}

/// Shuffles sorted ids with `seed` and puts `round(ratio · n)` of them in the
/// first part (clamped so both parts are non-empty).
pub fn split_ids(ids: &[String], ratio: f64, seed_: u64) -> Result<(Vec<String>, Vec<String>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DiscretizeError::Split(format!("ratio {ratio} outside (0, 1)")));
    }
    let mut ids: Vec<String> = ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(DiscretizeError::Split(format!("need at least 2 patients, got {}", ids.len())));
    }
    ids.shuffle(&mut seed::rng(seed::derive(seed_, "split")));
    let k = ((ratio * ids.len() as f64).round() as usize).clamp(1, ids.len() - 1);
    let right = ids.split_off(k);
    Ok((ids, right))
}

/// Patient-level split; item order within each side follows the input.
pub fn split_dataset<T: HasPatient>(items: Vec<T>, ratio: f64, seed_: u64) -> Result<(Vec<T>, Vec<T>)> {
    let ids: Vec<String> = items.iter().map(|x| x.patient_id().to_string()).collect();
    let (left, _) = split_ids(&ids, ratio, seed_)?;
    let left: std::collections::HashSet<String> = left.into_iter().collect();
    Ok(items.into_iter().partition(|x| left.contains(x.patient_id())))
}
