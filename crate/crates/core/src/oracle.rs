//! Synthetic prediction providers with known ground truth.
//!
//! A [`ScriptedTask`] fixes the unique correct answer. The scripted oracle
//! predicts `target[i]` at generation index `i < target_len` and EOS past
//! it, so the implicit EOS density of any state is analytically known. The
//! noisy oracle perturbs confidences and can inject early EOS overconfidence.

use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, ProviderError, Result};
use crate::kernel::{PositionPrediction, PredictionProvider};
use crate::vocab::{SequenceState, TokenId, Vocabulary};

/// Argmax probability the scripted oracle assigns at every slot.
pub const SCRIPTED_TOP_PROB: f64 = 0.99;
/// EOS probability at content slots.
pub const SCRIPTED_CONTENT_EOS_PROB: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScriptedTask {
    pub prompt: Vec<TokenId>,
    pub target: Vec<TokenId>,
}

impl ScriptedTask {
    pub fn new(prompt: Vec<TokenId>, target: Vec<TokenId>) -> Self {
        Self { prompt, target }
    }

    pub fn target_len(&self) -> usize {
        self.target.len()
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        let special = |t: &TokenId| *t == vocab.mask_id || *t == vocab.eos_id;
        if self.target.iter().any(special) {
            return Err(Error::Config(
                "task target must not contain MASK or EOS".into(),
            ));
        }
        if self.prompt.contains(&vocab.mask_id) {
            return Err(Error::Config("task prompt must not contain MASK".into()));
        }
        if let Some(t) = self
            .prompt
            .iter()
            .chain(&self.target)
            .find(|t| !vocab.contains(**t))
        {
            return Err(Error::Config(format!("task token {t} outside vocabulary")));
        }
        Ok(())
    }
}

/// Deterministic position-only predictions for `task` on `state`.
pub fn scripted_predict(
    task: &ScriptedTask,
    state: &SequenceState,
    vocab: &Vocabulary,
) -> std::result::Result<Vec<PositionPrediction>, ProviderError> {
    if state.prompt() != task.prompt.as_slice() {
        return Err(ProviderError::Oracle(
            "state prompt does not match the task prompt".into(),
        ));
    }
    Ok(state
        .masked_positions()
        .map(|i| match task.target.get(i) {
            Some(&tok) => PositionPrediction {
                pos: i,
                top_token: tok,
                top_prob: SCRIPTED_TOP_PROB,
                eos_prob: SCRIPTED_CONTENT_EOS_PROB,
            },
            None => PositionPrediction {
                pos: i,
                top_token: vocab.eos_id,
                top_prob: SCRIPTED_TOP_PROB,
                eos_prob: SCRIPTED_TOP_PROB,
            },
        })
        .collect())
}

pub const DEFAULT_FLIP_GAIN: f64 = 0.05;

/// Perturbations applied on top of the scripted oracle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseProfile {
    /// Scale of the downward confidence noise: `top_prob -= temperature * u`, `u ~ U[0,1)`.
    pub temperature: f64,
    /// Extra EOS probability while the decoded fraction is below the cutoff.
    pub eos_bias_early: f64,
    pub eos_bias_cutoff: f64,
    pub rng_seed: u64,
    /// A content slot's argmax flips to EOS with probability
    /// `flip_gain * eos_bias_early` during the biased phase.
    pub flip_gain: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            eos_bias_early: 0.0,
            eos_bias_cutoff: 0.0,
            rng_seed: 0,
            flip_gain: DEFAULT_FLIP_GAIN,
        }
    }
}

impl NoiseProfile {
    pub fn is_degenerate(&self) -> bool {
        self.temperature == 0.0 && self.eos_bias_early == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.temperature.is_finite()
            && self.temperature >= 0.0
            && self.eos_bias_early.is_finite()
            && self.eos_bias_early >= 0.0
            && (0.0..=1.0).contains(&self.eos_bias_cutoff)
            && self.flip_gain.is_finite()
            && self.flip_gain >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid noise profile {self:?}")))
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stable fingerprint of a state (independent of std's hasher).
fn fingerprint(state: &SequenceState) -> u64 {
    let mut h = splitmix64(state.prompt().len() as u64 ^ (state.l_cur() as u64) << 32);
    for t in state.prompt() {
        h = splitmix64(h ^ *t as u64);
    }
    for s in state.gen() {
        let v = s.token().map_or(u64::MAX, u64::from);
        h = splitmix64(h ^ v);
    }
    h
}

/// Scripted predictions with seeded confidence noise and early EOS bias.
pub fn noisy_predict(
    task: &ScriptedTask,
    profile: &NoiseProfile,
    state: &SequenceState,
    vocab: &Vocabulary,
) -> std::result::Result<Vec<PositionPrediction>, ProviderError> {
    let mut preds = scripted_predict(task, state, vocab)?;
    if profile.is_degenerate() {
        return Ok(preds);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(profile.rng_seed) ^ fingerprint(state));
    let decoded_fraction = state.decoded_count() as f64 / state.l_cur() as f64;
    let biased = profile.eos_bias_early > 0.0 && decoded_fraction < profile.eos_bias_cutoff;
    let flip_p = (profile.flip_gain * profile.eos_bias_early).min(1.0);
    let eos = vocab.eos_id;
    for p in &mut preds {
        // Draw both numbers unconditionally so streams line up across profiles.
        let u: f64 = rng.gen();
        let flip_u: f64 = rng.gen();
        p.top_prob = (p.top_prob - profile.temperature * u).clamp(0.0, 1.0);
        if p.top_token == eos {
            p.eos_prob = p.top_prob;
        }
        if biased {
            p.eos_prob = (p.eos_prob + profile.eos_bias_early).min(1.0);
            if p.top_token == eos || flip_u < flip_p || p.eos_prob > p.top_prob {
                p.top_token = eos;
                p.top_prob = p.eos_prob;
            }
        }
    }
    Ok(preds)
}

/// Scripted oracle as a [`PredictionProvider`].
#[derive(Debug, Clone)]
pub struct ScriptedOracle {
    pub task: ScriptedTask,
}

impl ScriptedOracle {
    pub fn new(task: ScriptedTask) -> Self {
        Self { task }
    }
}

impl PredictionProvider for ScriptedOracle {
    fn predict(
        &mut self,
        state: &SequenceState,
        vocab: &Vocabulary,
    ) -> std::result::Result<Vec<PositionPrediction>, ProviderError> {
        scripted_predict(&self.task, state, vocab)
    }
}

#[derive(Debug, Clone)]
pub struct NoisyOracle {
    pub task: ScriptedTask,
    pub profile: NoiseProfile,
}

impl NoisyOracle {
    pub fn new(task: ScriptedTask, profile: NoiseProfile) -> Self {
        Self { task, profile }
    }
}

impl PredictionProvider for NoisyOracle {
    fn predict(
        &mut self,
        state: &SequenceState,
        vocab: &Vocabulary,
    ) -> std::result::Result<Vec<PositionPrediction>, ProviderError> {
        noisy_predict(&self.task, &self.profile, state, vocab)
    }
}

/// Per-task noise seed derived from a run seed, shared by every code path
/// that builds oracles for suite tasks.
pub fn task_seed(seed: u64, task_index: usize) -> u64 {
    splitmix64(seed ^ (task_index as u64).wrapping_mul(0xA24B_AED4_963E_E407))
}

/// Profile used for suite task `index` under run seed `seed`.
pub fn task_profile(noise: &NoiseProfile, seed: u64, index: usize) -> NoiseProfile {
    NoiseProfile {
        rng_seed: task_seed(seed ^ noise.rng_seed, index),
        ..*noise
    }
}

/// Lookup-table oracle over a whole suite: the task is selected by prompt.
#[derive(Debug, Clone)]
pub struct SuiteOracle {
    tasks: HashMap<Vec<TokenId>, (ScriptedTask, NoiseProfile)>,
}

impl SuiteOracle {
    /// Every task uses `profile` as is.
    pub fn new(tasks: &[ScriptedTask], profile: NoiseProfile) -> Result<Self> {
        Self::build(tasks, |_| profile)
    }

    /// Task `i` uses [`task_profile`]`(noise, seed, i)`, matching in-process
    /// suite runs with the same seed.
    pub fn seeded(tasks: &[ScriptedTask], noise: NoiseProfile, seed: u64) -> Result<Self> {
        Self::build(tasks, |i| task_profile(&noise, seed, i))
    }

    fn build(tasks: &[ScriptedTask], profile: impl Fn(usize) -> NoiseProfile) -> Result<Self> {
        let mut map = HashMap::with_capacity(tasks.len());
        for (i, t) in tasks.iter().enumerate() {
            if map
                .insert(t.prompt.clone(), (t.clone(), profile(i)))
                .is_some()
            {
                return Err(Error::Config(format!(
                    "duplicate prompt {:?} in suite; prompts must be unique for lookup",
                    t.prompt
                )));
            }
        }
        Ok(Self { tasks: map })
    }

    pub fn task_for(&self, prompt: &[TokenId]) -> Option<&ScriptedTask> {
        self.tasks.get(prompt).map(|(t, _)| t)
    }
}

impl PredictionProvider for SuiteOracle {
    fn predict(
        &mut self,
        state: &SequenceState,
        vocab: &Vocabulary,
    ) -> std::result::Result<Vec<PositionPrediction>, ProviderError> {
        let (task, profile) = self.tasks.get(state.prompt()).ok_or_else(|| {
            ProviderError::Oracle(format!("no task with prompt {:?}", state.prompt()))
        })?;
        noisy_predict(task, profile, state, vocab)
    }
}

// ---- task suites ----

pub fn read_suite<R: Read>(source: R) -> Result<Vec<ScriptedTask>> {
    Ok(serde_json::from_reader(source)?)
}

pub fn write_suite<W: Write>(tasks: &[ScriptedTask], mut sink: W) -> Result<()> {
    serde_json::to_writer(&mut sink, tasks)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn load_suite(path: &std::path::Path) -> Result<Vec<ScriptedTask>> {
    let file = std::fs::File::open(path)?;
    read_suite(std::io::BufReader::new(file))
}

/// Target-length distribution for generated suites.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LengthDist {
    Fixed {
        len: usize,
    },
    Uniform {
        min: usize,
        max: usize,
    },
    /// Normal, rounded and clamped to `[min, max]`.
    Normal {
        mean: f64,
        std: f64,
        min: usize,
        max: usize,
    },
}

impl LengthDist {
    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        match *self {
            LengthDist::Fixed { len } => len,
            LengthDist::Uniform { min, max } => rng.gen_range(min..=max),
            LengthDist::Normal {
                mean,
                std,
                min,
                max,
            } => {
                // Box-Muller; one normal per call keeps the stream simple.
                let u1: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.gen();
                let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                ((mean + std * z).round().max(0.0) as usize).clamp(min, max)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LengthDist::Fixed { len } => len >= 1,
            LengthDist::Uniform { min, max } => min >= 1 && min <= max,
            LengthDist::Normal { std, min, max, .. } => std >= 0.0 && min >= 1 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "invalid length distribution {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SuiteSpec {
    pub tasks: usize,
    pub lengths: LengthDist,
    pub prompt_min: usize,
    pub prompt_max: usize,
    /// Content tokens are drawn from `[0, token_range)`, skipping specials.
    pub token_range: u32,
    pub seed: u64,
}

impl SuiteSpec {
    /// 50 tasks with target lengths centered at 200.
    pub fn standard() -> Self {
        Self {
            tasks: 50,
            lengths: LengthDist::Normal {
                mean: 200.0,
                std: 60.0,
                min: 16,
                max: 400,
            },
            prompt_min: 4,
            prompt_max: 16,
            token_range: 32_000,
            seed: 0x5EED_2026,
        }
    }
}

pub fn standard_suite() -> Vec<ScriptedTask> {
    generate_suite(&SuiteSpec::standard(), &Vocabulary::default())
        .expect("standard suite spec is valid")
}

/// Generate a reproducible suite with unique prompts.
pub fn generate_suite(spec: &SuiteSpec, vocab: &Vocabulary) -> Result<Vec<ScriptedTask>> {
    spec.lengths.validate()?;
    if spec.tasks == 0 {
        return Err(Error::Config("suite must contain at least one task".into()));
    }
    if spec.prompt_min > spec.prompt_max || spec.prompt_max == 0 {
        return Err(Error::Config("invalid prompt length range".into()));
    }
    let range = spec.token_range.min(vocab.size);
    if range < 3 {
        return Err(Error::Config("token range too small".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let token = |rng: &mut ChaCha8Rng| loop {
        let t = rng.gen_range(0..range);
        if t != vocab.mask_id && t != vocab.eos_id {
            return t;
        }
    };
    let mut seen = HashSet::new();
    let mut tasks = Vec::with_capacity(spec.tasks);
    while tasks.len() < spec.tasks {
        let plen = rng.gen_range(spec.prompt_min..=spec.prompt_max);
        let prompt: Vec<TokenId> = (0..plen).map(|_| token(&mut rng)).collect();
        let tlen = spec.lengths.sample(&mut rng);
        let target: Vec<TokenId> = (0..tlen).map(|_| token(&mut rng)).collect();
        if seen.insert(prompt.clone()) {
            tasks.push(ScriptedTask::new(prompt, target));
        }
    }
    Ok(tasks)
}
