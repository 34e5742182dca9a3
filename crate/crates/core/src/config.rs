//! Decoding configuration shared by every strategy.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::controller::EFactorSpec;
use crate::error::{Error, Result};

pub const DEFAULT_L_INIT: usize = 64;
pub const DEFAULT_L_MAX: usize = 2048;
pub const DEFAULT_TAU_HIGH: f64 = 0.9;
pub const DEFAULT_MAX_ADJUST_STEPS: usize = 128;

/// Which scalar drives length control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SignalKind {
    /// Fraction of remaining masks whose implicit token is EOS.
    Density,
    /// Mean EOS probability over remaining masks.
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyKind {
    #[serde(rename = "fixed")]
    FixedLength,
    RhoEos,
    TwoStage,
}

impl StrategyKind {
    /// Label used in traces and summary tables.
    pub fn label(&self) -> &'static str {
        match self {
            StrategyKind::FixedLength => "fixed",
            StrategyKind::RhoEos => "rho-eos",
            StrategyKind::TwoStage => "two-stage-daedal-like",
        }
    }
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SignalKind::Density => "density",
            SignalKind::Confidence => "confidence",
        })
    }
}

impl FromStr for SignalKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "density" => Ok(SignalKind::Density),
            "confidence" => Ok(SignalKind::Confidence),
            other => Err(Error::Config(format!("unknown signal '{other}'"))),
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(StrategyKind::FixedLength),
            "rho-eos" => Ok(StrategyKind::RhoEos),
            "two-stage" | "two-stage-daedal-like" => Ok(StrategyKind::TwoStage),
            other => Err(Error::Config(format!("unknown strategy '{other}'"))),
        }
    }
}

/// Named equilibrium regions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdPreset {
    /// [0.4, 0.6]
    Sym,
    /// [0.4, 0.8]
    Asym,
}

impl ThresholdPreset {
    pub fn bounds(&self) -> (f64, f64) {
        match self {
            ThresholdPreset::Sym => (0.4, 0.6),
            ThresholdPreset::Asym => (0.4, 0.8),
        }
    }
}

impl FromStr for ThresholdPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" => Ok(ThresholdPreset::Sym),
            "asym" => Ok(ThresholdPreset::Asym),
            other => Err(Error::Config(format!("unknown preset '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub l_init: usize,
    pub l_max: usize,
    pub rho_low: f64,
    pub rho_high: f64,
    pub tau_high: f64,
    /// Adjustment budget `N`.
    pub n_max_adjust: usize,
    pub efactor: EFactorSpec,
    pub signal: SignalKind,
    pub strategy: StrategyKind,
    /// When set, the budget counter only advances on Expand/Contract
    /// instead of once per loop iteration.
    pub count_only_adjustments: bool,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        let (rho_low, rho_high) = ThresholdPreset::Asym.bounds();
        Self {
            l_init: DEFAULT_L_INIT,
            l_max: DEFAULT_L_MAX,
            rho_low,
            rho_high,
            tau_high: DEFAULT_TAU_HIGH,
            n_max_adjust: DEFAULT_MAX_ADJUST_STEPS,
            efactor: EFactorSpec::default(),
            signal: SignalKind::Density,
            strategy: StrategyKind::RhoEos,
            count_only_adjustments: false,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn with_preset(mut self, preset: ThresholdPreset) -> Self {
        (self.rho_low, self.rho_high) = preset.bounds();
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_init == 0 || self.l_init > self.l_max {
            return Err(Error::Config(format!(
                "require 0 < l_init <= l_max (got l_init={}, l_max={})",
                self.l_init, self.l_max
            )));
        }
        let finite = [self.rho_low, self.rho_high, self.tau_high]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(0.0 <= self.rho_low && self.rho_low < self.rho_high && self.rho_high <= 1.0)
        {
            return Err(Error::Config(format!(
                "require 0 <= rho_low < rho_high <= 1 (got rho_low={}, rho_high={})",
                self.rho_low, self.rho_high
            )));
        }
        if !(self.tau_high > 0.0 && self.tau_high <= 1.0) {
            return Err(Error::Config(format!(
                "require 0 < tau_high <= 1 (got {})",
                self.tau_high
            )));
        }
        self.efactor.validate()
    }
}
