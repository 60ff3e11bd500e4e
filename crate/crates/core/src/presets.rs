//! Published hyper-parameter rows and the desk-scale synthetic preset.

use crate::data::SyntheticSpec;
use crate::pseudo::PriorSpec;
use crate::trainer::{Mode, TrainConfig};

/// One row of published training hyper-parameters with its threshold prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PublishedPreset {
    pub name: &'static str,
    pub labelled_bs: usize,
    pub lr: f64,
    pub steps: usize,
    pub alpha: f64,
    pub ratio: usize,
    pub prior: PriorSpec,
}

pub const BRATS: PublishedPreset = PublishedPreset {
    name: "brats",
    labelled_bs: 2,
    lr: 0.03,
    steps: 200,
    alpha: 0.05,
    ratio: 5,
    prior: PriorSpec { mean: 0.5, std: 0.1 },
};

pub const CARVE: PublishedPreset = PublishedPreset {
    name: "carve",
    labelled_bs: 2,
    lr: 0.01,
    steps: 800,
    alpha: 1.0,
    ratio: 4,
    prior: PriorSpec { mean: 0.4, std: 0.1 },
};

pub const TASK01: PublishedPreset = PublishedPreset {
    name: "task01",
    labelled_bs: 1,
    lr: 0.0004,
    steps: 25000,
    alpha: 0.1,
    ratio: 2,
    prior: PriorSpec { mean: 0.9, std: 0.1 },
};

pub const TASK05: PublishedPreset = PublishedPreset {
    name: "task05",
    labelled_bs: 1,
    lr: 0.001,
    steps: 2000,
    alpha: 0.002,
    ratio: 4,
    prior: PriorSpec { mean: 0.9, std: 0.1 },
};

pub const PUBLISHED_PRESETS: [PublishedPreset; 4] = [BRATS, CARVE, TASK01, TASK05];

pub fn published_preset(name: &str) -> Option<PublishedPreset> {
    PUBLISHED_PRESETS.into_iter().find(|p| p.name == name)
}

impl PublishedPreset {
    pub fn config(&self, mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            labelled_bs: self.labelled_bs,
            lr: self.lr,
            steps: self.steps,
            alpha: self.alpha,
            ratio: self.ratio,
            prior_mean: self.prior.mean,
            prior_std: self.prior.std,
            ..TrainConfig::default()
        }
    }
}

/// Pool sizes of the desk split: labelled, unlabelled, validation, test.
pub const DESK_SPLIT: (usize, usize, usize, usize) = (4, 64, 8, 32);

/// Synthetic data for the desk preset.
pub fn desk_synthetic(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    }
}

/// Desk-scale training preset on the synthetic task: the CARVE row with a
/// lower learning rate, a prior centred at 0.5 and denser validation.
pub fn desk_config(mode: Mode, seed: u64) -> TrainConfig {
    TrainConfig {
        mode,
        seed,
        lr: 0.003,
        prior_mean: 0.5,
        prior_std: 0.1,
        eval_every: 25,
        ..CARVE.config(mode)
    }
}
