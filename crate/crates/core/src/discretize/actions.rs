use serde::{Deserialize, Serialize};

use super::{BinnedTrajectory, DiscretizeError, Result, Treatment};
use crate::numeric::quantile_sorted;
use crate::DOSE_BINS;

/// Quartile cut points of one treatment's nonzero rates, plus the median
/// training rate of each bin (index 0 is the zero dose).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentBins {
    pub cuts: [f64; 3],
    pub representatives: [f64; DOSE_BINS],
    /// True when the cut points are not strictly increasing.
    pub degenerate: bool,
}

impl TreatmentBins {
    /// 0 for a zero rate, else `1 + #{cuts ≤ rate}`: a rate equal to a cut
    /// goes to the higher bin.
    pub fn bin(&self, rate: f64) -> usize {
        if rate == 0.0 {
            0
        } else {
            1 + self.cuts.iter().filter(|&&c| c <= rate).count()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBinning {
    pub iv: TreatmentBins,
    pub vaso: TreatmentBins,
}

impl ActionBinning {
    pub fn get(&self, t: Treatment) -> &TreatmentBins {
        match t {
            Treatment::IvFluid => &self.iv,
            Treatment::Vasopressor => &self.vaso,
        }
    }

    /// Representative (iv, vaso) rates of an action index.
    pub fn rates(&self, action: usize) -> Result<(f64, f64)> {
        let (i, v) = decode_action(action)?;
        Ok((self.iv.representatives[i], self.vaso.representatives[v]))
    }
}

/// Per-bin physician action rates: the rate chosen at the end of bin `t` is
/// the one in effect over bin `t + 1`; the final bin keeps its own rate.
pub fn episode_rates(traj: &BinnedTrajectory) -> Vec<(f64, f64)> {
    let n = traj.bins.len();
    (0..n).map(|t| traj.bins[(t + 1).min(n - 1)].rates).collect()
}

pub fn fit_action_bins(trajs: &[BinnedTrajectory], treatment: Treatment) -> Result<TreatmentBins> {
    let mut rates: Vec<f64> = trajs
        .iter()
        .flat_map(episode_rates)
        .map(|r| treatment.pick(r))
        .filter(|&r| r > 0.0)
        .collect();
    if rates.is_empty() {
        return Err(DiscretizeError::AllZero(treatment.event_name().to_string()));
    }
    rates.sort_by(f64::total_cmp);
    let cuts = [
        quantile_sorted(&rates, 0.25),
        quantile_sorted(&rates, 0.5),
        quantile_sorted(&rates, 0.75),
    ];
    let degenerate = !(cuts[0] < cuts[1] && cuts[1] < cuts[2]);
    let mut bins = TreatmentBins {
        cuts,
        representatives: [0.0; DOSE_BINS],
        degenerate,
    };
    let mut members: [Vec<f64>; DOSE_BINS] = Default::default();
    for &r in &rates {
        members[bins.bin(r)].push(r);
    }
    for k in 1..DOSE_BINS {
        bins.representatives[k] = if members[k].is_empty() {
            // Empty only when cuts tie; the cut itself encodes to the top tied bin.
            cuts[(k - 1).min(2)]
        } else {
            quantile_sorted(&members[k], 0.5)
        };
    }
    Ok(bins)
}

pub fn encode_action(iv_rate: f64, vp_rate: f64, binning: &ActionBinning) -> Result<usize> {
    for (t, r) in [(Treatment::IvFluid, iv_rate), (Treatment::Vasopressor, vp_rate)] {
        if !(r >= 0.0) {
            return Err(DiscretizeError::NegativeRate {
                treatment: t.event_name().to_string(),
                rate: r,
            });
        }
    }
    Ok(binning.iv.bin(iv_rate) * DOSE_BINS + binning.vaso.bin(vp_rate))
}

/// (iv_bin, vp_bin) of a flat action index.
pub fn decode_action(action: usize) -> Result<(usize, usize)> {
    if action >= DOSE_BINS * DOSE_BINS {
        return Err(DiscretizeError::ActionIndex(action));
    }
    Ok((action / DOSE_BINS, action % DOSE_BINS))
}
