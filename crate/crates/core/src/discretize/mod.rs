//! Irregular event logs to per-bin state/action episodes: rebinning with
//! truncation at treatment times, quartile action bins, forward-filled and
//! standardized features, patient-level splits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod actions;
mod features;
mod io;
mod rebin;
mod split;

pub use actions::{decode_action, encode_action, episode_rates, fit_action_bins, ActionBinning, TreatmentBins};
pub use features::{
    featurize, prepare, raw_features, FeatureEpisode, FeatureSpec, OnlineFeaturizer, Prep, RawFeatures, Standardizer,
    PREP_SCHEMA_VERSION,
};
pub use io::{load_dataset, save_dataset, Dataset};
pub use rebin::{rebin, Anchoring, Bin, BinnedTrajectory};
pub use split::{split_dataset, split_ids, HasPatient};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscretizeError {
    #[error("patient {patient}: event at {time} outside [0, {end}]")]
    EventOutOfRange { patient: String, time: f64, end: f64 },
    #[error("patient {0}: empty stay")]
    EmptyStay(String),
    #[error("bin_hours must be 1 or 4, got {0}")]
    BinHours(f64),
    #[error("{0}: no nonzero rates to fit quartiles on")]
    AllZero(String),
    #[error("negative {treatment} rate {rate}")]
    NegativeRate { treatment: String, rate: f64 },
    #[error("action index {0} outside 0..25")]
    ActionIndex(usize),
    #[error("patient {patient}: unknown channel {channel:?}")]
    UnknownChannel { patient: String, channel: String },
    #[error("preprocessing mismatch: {0}")]
    PrepMismatch(String),
    #[error("split: {0}")]
    Split(String),
    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, DiscretizeError>;

impl From<std::io::Error> for DiscretizeError {
    fn from(e: std::io::Error) -> Self {
        DiscretizeError::Io(e.to_string())
    }
}

/// Either of the two treatments in the action space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Treatment {
    IvFluid,
    Vasopressor,
}

impl Treatment {
    pub const ALL: [Treatment; 2] = [Treatment::IvFluid, Treatment::Vasopressor];

    pub fn event_name(self) -> &'static str {
        match self {
            Treatment::IvFluid => crate::cohort::IV_FLUID,
            Treatment::Vasopressor => crate::cohort::VASOPRESSOR,
        }
    }

    /// Picks this treatment's component from an (iv, vaso) pair.
    pub fn pick<T: Copy>(self, pair: (T, T)) -> T {
        match self {
            Treatment::IvFluid => pair.0,
            Treatment::Vasopressor => pair.1,
        }
    }
}
