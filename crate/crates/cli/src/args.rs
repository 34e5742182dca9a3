//! Shared flag groups and their resolution against a config file.
//!
//! Precedence is flags > config file > built-in defaults. A flag only wins
//! when it was given on the command line; its displayed default never
//! overrides a value from the config file.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::parser::ValueSource;
use clap::{ArgMatches, Args};
use serde::{Deserialize, Serialize};

use maskflow_core::config::{
    DecodeConfig, SignalKind, StrategyKind, ThresholdPreset, DEFAULT_L_INIT, DEFAULT_L_MAX,
    DEFAULT_MAX_ADJUST_STEPS, DEFAULT_TAU_HIGH,
};
use maskflow_core::controller::{
    EFactorFamily, DEFAULT_BASE_INCREMENT, DEFAULT_EXP_GAIN, DEFAULT_LINEAR_GAIN,
};
use maskflow_core::oracle::{NoiseProfile, DEFAULT_FLIP_GAIN};
use maskflow_core::strategy::TwoStageConfig;
use maskflow_core::vocab::{TokenId, Vocabulary};

/// Contents of a `--config` file. Every section and field is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub decode: DecodeConfig,
    pub two_stage: TwoStageConfig,
    pub noise: NoiseProfile,
    pub vocab: Vocabulary,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

#[derive(Debug, Clone, Args)]
pub struct DecodeArgs {
    /// JSON config file with optional sections decode, two_stage, noise, vocab
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[arg(long, default_value = "rho-eos", value_parser = ["fixed", "rho-eos", "two-stage"])]
    pub strategy: String,

    #[arg(long, default_value = "density", value_parser = ["density", "confidence"])]
    pub signal: String,

    #[arg(long, default_value_t = DEFAULT_L_INIT)]
    pub l_init: usize,

    #[arg(long, default_value_t = DEFAULT_L_MAX)]
    pub l_max: usize,

    /// Equilibrium region: sym = [0.4, 0.6], asym = [0.4, 0.8]
    #[arg(long, default_value = "asym", value_parser = ["sym", "asym"])]
    pub preset: String,

    /// Lower density bound; overrides the preset
    #[arg(long)]
    pub rho_low: Option<f64>,

    /// Upper density bound; overrides the preset
    #[arg(long)]
    pub rho_high: Option<f64>,

    /// Commit threshold on the argmax probability
    #[arg(long, default_value_t = DEFAULT_TAU_HIGH)]
    pub tau_high: f64,

    /// Adjustment budget
    #[arg(long, default_value_t = DEFAULT_MAX_ADJUST_STEPS)]
    pub max_adjust_steps: usize,

    #[arg(long, default_value = "exp", value_parser = ["const", "linear", "exp"])]
    pub efactor: String,

    #[arg(long, default_value_t = DEFAULT_BASE_INCREMENT)]
    pub base_increment: usize,

    #[arg(long, default_value_t = DEFAULT_LINEAR_GAIN)]
    pub linear_gain: f64,

    #[arg(long, default_value_t = DEFAULT_EXP_GAIN)]
    pub exp_gain: f64,

    /// Only Expand/Contract consume the adjustment budget
    #[arg(long)]
    pub count_only_adjustments: bool,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Two-stage: tokens appended per expansion
    #[arg(long, default_value_t = 64)]
    pub block_size: usize,

    /// Two-stage: stage 1 expands while trailing EOS confidence is below this
    #[arg(long, default_value_t = 0.5)]
    pub trailing_eos_threshold: f64,

    #[arg(long, default_value_t = 32)]
    pub stage1_max_rounds: usize,

    /// Two-stage: commit threshold for stage 2 (defaults to --tau-high)
    #[arg(long)]
    pub stage2_tau_high: Option<f64>,

    #[command(flatten)]
    pub vocab: VocabArgs,
}

#[derive(Debug, Clone, Args)]
pub struct VocabArgs {
    #[arg(long, default_value_t = Vocabulary::default().size)]
    pub vocab_size: u32,

    #[arg(long, default_value_t = Vocabulary::default().mask_id)]
    pub mask_id: TokenId,

    #[arg(long, default_value_t = Vocabulary::default().eos_id)]
    pub eos_id: TokenId,
}

#[derive(Debug, Clone, Args)]
pub struct NoiseArgs {
    /// Oracle confidence noise scale
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,

    /// Oracle EOS bias while the decoded fraction is below --eos-bias-cutoff
    #[arg(long, default_value_t = 0.0)]
    pub eos_bias_early: f64,

    #[arg(long, default_value_t = 0.0)]
    pub eos_bias_cutoff: f64,

    /// Probability per unit of bias that a content slot's argmax flips to EOS
    #[arg(long, default_value_t = DEFAULT_FLIP_GAIN)]
    pub flip_gain: f64,
}

/// Fully resolved settings for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Resolved {
    pub decode: DecodeConfig,
    pub two_stage: TwoStageConfig,
    pub noise: NoiseProfile,
    pub vocab: Vocabulary,
}

fn explicit(m: &ArgMatches, id: &str) -> bool {
    matches!(
        m.value_source(id),
        Some(ValueSource::CommandLine | ValueSource::EnvVariable)
    )
}

/// Merge flags over the config file (if any) over defaults, then validate.
pub fn resolve(m: &ArgMatches, d: &DecodeArgs, n: &NoiseArgs) -> Result<Resolved> {
    let file = match &d.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    let mut cfg = file.decode;
    let mut ts = file.two_stage;
    let mut noise = file.noise;
    let mut vocab = file.vocab;

    macro_rules! flag {
        ($id:literal, $dst:expr, $val:expr) => {
            if explicit(m, $id) {
                $dst = $val;
            }
        };
    }
    flag!(
        "strategy",
        cfg.strategy,
        d.strategy.parse::<StrategyKind>()?
    );
    flag!("signal", cfg.signal, d.signal.parse::<SignalKind>()?);
    flag!("l_init", cfg.l_init, d.l_init);
    flag!("l_max", cfg.l_max, d.l_max);
    if explicit(m, "preset") {
        (cfg.rho_low, cfg.rho_high) = d.preset.parse::<ThresholdPreset>()?.bounds();
    }
    if let Some(v) = d.rho_low {
        cfg.rho_low = v;
    }
    if let Some(v) = d.rho_high {
        cfg.rho_high = v;
    }
    flag!("tau_high", cfg.tau_high, d.tau_high);
    flag!("max_adjust_steps", cfg.n_max_adjust, d.max_adjust_steps);
    flag!(
        "efactor",
        cfg.efactor.family,
        d.efactor.parse::<EFactorFamily>()?
    );
    flag!(
        "base_increment",
        cfg.efactor.base_increment,
        d.base_increment
    );
    flag!("linear_gain", cfg.efactor.linear_gain, d.linear_gain);
    flag!("exp_gain", cfg.efactor.exp_gain, d.exp_gain);
    flag!("count_only_adjustments", cfg.count_only_adjustments, true);
    flag!("seed", cfg.seed, d.seed);

    flag!("block_size", ts.block_size, d.block_size);
    flag!(
        "trailing_eos_threshold",
        ts.trailing_eos_conf_threshold,
        d.trailing_eos_threshold
    );
    flag!(
        "stage1_max_rounds",
        ts.stage1_max_rounds,
        d.stage1_max_rounds
    );
    if let Some(t) = d.stage2_tau_high {
        ts.stage2_tau_high = Some(t);
    }

    flag!("vocab_size", vocab.size, d.vocab.vocab_size);
    flag!("mask_id", vocab.mask_id, d.vocab.mask_id);
    flag!("eos_id", vocab.eos_id, d.vocab.eos_id);

    noise = merge_noise(m, n, noise);

    cfg.validate()?;
    ts.validate()?;
    noise.validate()?;
    vocab.validate()?;
    Ok(Resolved {
        decode: cfg,
        two_stage: ts,
        noise,
        vocab,
    })
}

pub fn merge_noise(m: &ArgMatches, n: &NoiseArgs, mut noise: NoiseProfile) -> NoiseProfile {
    if explicit(m, "temperature") {
        noise.temperature = n.temperature;
    }
    if explicit(m, "eos_bias_early") {
        noise.eos_bias_early = n.eos_bias_early;
    }
    if explicit(m, "eos_bias_cutoff") {
        noise.eos_bias_cutoff = n.eos_bias_cutoff;
    }
    if explicit(m, "flip_gain") {
        noise.flip_gain = n.flip_gain;
    }
    noise
}
