use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::pseudo::{HeadInput, PriorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Segpl,
    SegplVi,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::Supervised, Mode::Segpl, Mode::SegplVi];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Segpl => "segpl",
            Mode::SegplVi => "segpl_vi",
        }
    }

    pub fn uses_unlabelled(self) -> bool {
        self != Mode::Supervised
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid("mode", format!("unknown mode {s:?} (supervised, segpl, segpl_vi)")))
    }
}

/// Flat training configuration; every field maps to one TOML key and one
/// CLI flag.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub labelled_bs: usize,
    pub lr: f64,
    pub steps: usize,
    pub alpha: f64,
    pub ratio: usize,
    pub warmup_fraction: f64,
    pub prior_mean: f64,
    pub prior_std: f64,
    pub kl_weight: f64,
    pub seed: u64,
    /// Validation interval in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    pub base_width: usize,
    pub depth: usize,
    pub head_input: HeadInput,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Segpl,
            labelled_bs: 2,
            lr: 0.01,
            steps: 800,
            alpha: 1.0,
            ratio: 4,
            warmup_fraction: 0.5,
            prior_mean: 0.9,
            prior_std: 0.1,
            kl_weight: 1.0,
            seed: 0,
            eval_every: 50,
            base_width: 8,
            depth: 3,
            head_input: HeadInput::Bottleneck,
        }
    }
}

impl TrainConfig {
    pub fn prior(&self) -> PriorSpec {
        PriorSpec {
            mean: self.prior_mean,
            std: self.prior_std,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("steps", "must be at least 1"));
        }
        if self.labelled_bs == 0 {
            return Err(Error::invalid("labelled_bs", "must be at least 1"));
        }
        if self.ratio == 0 {
            return Err(Error::invalid("ratio", "must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr", format!("{} must be positive", self.lr)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("alpha", format!("{} must be non-negative", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::invalid("warmup_fraction", format!("{} not in [0, 1]", self.warmup_fraction)));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(Error::invalid("kl_weight", format!("{} must be non-negative", self.kl_weight)));
        }
        self.prior().validate()?;
        self.backbone(1, 1, 2).validate()
    }

    pub fn backbone(&self, in_channels: usize, out_channels: usize, spatial_rank: usize) -> BackboneConfig {
        BackboneConfig {
            spatial_rank,
            in_channels,
            out_channels,
            base_width: self.base_width,
            depth: self.depth,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::invalid("config", e.to_string()))
    }

    pub fn from_toml_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config serialises")
    }
}

/// Linear ramp from 0 at step 0 to `alpha` at `warmup_fraction * total_steps`.
pub fn alpha_schedule(step: usize, total_steps: usize, alpha: f64, warmup_fraction: f64) -> f64 {
    let ramp = warmup_fraction * total_steps as f64;
    if ramp <= 0.0 {
        return alpha;
    }
    alpha * (step as f64 / ramp).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        assert_eq!(alpha_schedule(0, 800, 1.0, 0.5), 0.0);
        for s in [0, 1, 400, 800] {
            assert_eq!(alpha_schedule(s, 800, 0.3, 0.0), 0.3);
        }
        assert_eq!(alpha_schedule(200, 800, 1.0, 0.5), 0.5);
        assert_eq!(alpha_schedule(400, 800, 1.0, 0.5), 1.0);
        assert_eq!(alpha_schedule(800, 800, 1.0, 0.5), 1.0);
    }

    #[test]
    fn schedule_is_monotone() {
        let mut last = 0.0;
        for s in 0..=100 {
            let a = alpha_schedule(s, 100, 0.05, 0.37);
            assert!(a >= last);
            last = a;
        }
    }

    #[test]
    fn toml_roundtrip_and_unknown_keys() {
        let c = TrainConfig {
            mode: Mode::SegplVi,
            seed: 7,
            ..Default::default()
        };
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml_string()).unwrap(), c);
        let partial = TrainConfig::from_toml_str("mode = \"supervised\"\nsteps = 3\n").unwrap();
        assert_eq!((partial.mode, partial.steps, partial.lr), (Mode::Supervised, 3, 0.01));
        assert!(TrainConfig::from_toml_str("stepz = 3").is_err());
        assert!(TrainConfig::from_toml_str("mode = \"bogus\"").is_err());
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { steps: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { ratio: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { alpha: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { prior_std: 0.0, ..Default::default() }.validate().is_err());
        assert!("segpl_vi".parse::<Mode>().is_ok());
        assert!("vi".parse::<Mode>().is_err());
    }
}
