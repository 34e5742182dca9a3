//! Maps a signal reading to a length action (hold, expand, contract) and
//! applies it to the sequence.
//!
//! Outside the equilibrium region `[rho_low, rho_high]` the signal's excess
//! distance is normalized onto `(0, 1]`:
//!
//! - below: `d = (rho_low - s) / rho_low`
//! - above: `d = (s - rho_high) / (1 - rho_high)`
//!
//! and the magnitude is `B` (constant), `ceil(B * (1 + λ d))` (linear) or
//! `ceil(B * γ^d)` (exponential). Both branches share the same family.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::DecodeConfig;
use crate::error::{Error, Result};
use crate::signal::SignalReading;
use crate::vocab::SequenceState;

pub const DEFAULT_BASE_INCREMENT: usize = 32;
pub const DEFAULT_LINEAR_GAIN: f64 = 3.0;
pub const DEFAULT_EXP_GAIN: f64 = 8.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EFactorFamily {
    #[serde(rename = "const")]
    Constant,
    Linear,
    #[serde(rename = "exp")]
    Exponential,
}

impl fmt::Display for EFactorFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EFactorFamily::Constant => "const",
            EFactorFamily::Linear => "linear",
            EFactorFamily::Exponential => "exp",
        })
    }
}

impl FromStr for EFactorFamily {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "const" | "constant" => Ok(EFactorFamily::Constant),
            "linear" => Ok(EFactorFamily::Linear),
            "exp" | "exponential" => Ok(EFactorFamily::Exponential),
            other => Err(Error::Config(format!("unknown efactor family '{other}'"))),
        }
    }
}

/// Expansion-factor function: family plus its constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EFactorSpec {
    pub family: EFactorFamily,
    /// `B`, tokens.
    pub base_increment: usize,
    /// `λ` (linear only).
    pub linear_gain: f64,
    /// `γ` (exponential only).
    pub exp_gain: f64,
}

impl Default for EFactorSpec {
    fn default() -> Self {
        Self::new(EFactorFamily::Exponential)
    }
}

impl EFactorSpec {
    pub fn new(family: EFactorFamily) -> Self {
        Self {
            family,
            base_increment: DEFAULT_BASE_INCREMENT,
            linear_gain: DEFAULT_LINEAR_GAIN,
            exp_gain: DEFAULT_EXP_GAIN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_increment < 1 {
            return Err(Error::Config("base_increment must be >= 1".into()));
        }
        if !(self.linear_gain.is_finite() && self.linear_gain >= 0.0) {
            return Err(Error::Config("linear_gain must be >= 0".into()));
        }
        if !(self.exp_gain.is_finite() && self.exp_gain >= 1.0) {
            return Err(Error::Config("exp_gain must be >= 1".into()));
        }
        Ok(())
    }

    /// Magnitude for a normalized excess distance `d` in `(0, 1]`.
    pub fn magnitude(&self, d: f64) -> usize {
        let b = self.base_increment as f64;
        let raw = match self.family {
            EFactorFamily::Constant => return self.base_increment,
            EFactorFamily::Linear => b * (1.0 + self.linear_gain * d),
            EFactorFamily::Exponential => b * self.exp_gain.powf(d),
        };
        ceil_tokens(raw).max(self.base_increment)
    }
}

/// `ceil`, except that values within 1e-9 of an integer snap to it, so that
/// e.g. `32 * 8^(1/3)` yields 64 rather than 65.
fn ceil_tokens(x: f64) -> usize {
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Normalized distance of `signal` outside `[rho_low, rho_high]`, or `None`
/// inside the region.
pub fn excess_distance(signal: f64, rho_low: f64, rho_high: f64) -> Option<f64> {
    if signal < rho_low {
        Some(((rho_low - signal) / rho_low).min(1.0))
    } else if signal > rho_high {
        Some(((signal - rho_high) / (1.0 - rho_high)).min(1.0))
    } else {
        None
    }
}

/// Adjustment magnitude for `signal`; zero inside the equilibrium region.
pub fn efactor(spec: &EFactorSpec, signal: f64, rho_low: f64, rho_high: f64) -> usize {
    excess_distance(signal, rho_low, rho_high).map_or(0, |d| spec.magnitude(d))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    Hold,
    Expand,
    Contract,
    /// Adjustment disabled: budget exhausted or length at a bound.
    Frozen,
}

impl ActionKind {
    pub fn is_adjustment(&self) -> bool {
        matches!(self, ActionKind::Expand | ActionKind::Contract)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthAction {
    pub kind: ActionKind,
    pub magnitude: usize,
}

impl LengthAction {
    pub const HOLD: Self = Self {
        kind: ActionKind::Hold,
        magnitude: 0,
    };
    pub const FROZEN: Self = Self {
        kind: ActionKind::Frozen,
        magnitude: 0,
    };
}

/// Decide the length action for the post-decode `state`.
///
/// Adjustment is only allowed while `0 < l_cur < l_max` and the budget is not
/// spent. Expansion is clamped to the room left below `l_max`; contraction
/// is clamped to the trailing masked run (and never empties the region).
pub fn decide_action(
    signal: &SignalReading,
    state: &SequenceState,
    cfg: &DecodeConfig,
    n_adjust_used: usize,
) -> LengthAction {
    let l_cur = state.l_cur();
    if n_adjust_used >= cfg.n_max_adjust || l_cur == 0 || l_cur >= cfg.l_max {
        return LengthAction::FROZEN;
    }
    let value = signal.value;
    if (cfg.rho_low..=cfg.rho_high).contains(&value) {
        return LengthAction::HOLD;
    }
    let want = efactor(&cfg.efactor, value, cfg.rho_low, cfg.rho_high);
    if value < cfg.rho_low {
        let magnitude = want.min(cfg.l_max - l_cur);
        if magnitude == 0 {
            LengthAction::FROZEN
        } else {
            LengthAction {
                kind: ActionKind::Expand,
                magnitude,
            }
        }
    } else {
        let magnitude = want
            .min(state.trailing_mask_count())
            .min(l_cur.saturating_sub(1));
        if magnitude == 0 {
            LengthAction::HOLD
        } else {
            LengthAction {
                kind: ActionKind::Contract,
                magnitude,
            }
        }
    }
}

/// Apply `action` to `state` in place.
pub fn apply_action(state: &mut SequenceState, action: LengthAction) -> Result<()> {
    match action.kind {
        ActionKind::Expand => state.append_masks(action.magnitude),
        ActionKind::Contract => state.remove_trailing_masks(action.magnitude)?,
        ActionKind::Hold | ActionKind::Frozen => {}
    }
    Ok(())
}
