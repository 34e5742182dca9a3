//! Full decoding runs: fixed length, single-stage density control, and a
//! two-stage baseline in the style of DAEDAL.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::config::{DecodeConfig, SignalKind, StrategyKind};
use crate::controller::{apply_action, decide_action, ActionKind, LengthAction};
use crate::error::{Error, Result};
use crate::kernel::{
    decode_step, needs_forced_progress, predict, PositionPrediction, PredictionProvider,
};
use crate::metrics::{self, MetricsReport};
use crate::signal::read_signal;
use crate::trace::{RunTrace, StepRecord, Termination, TraceHeader};
use crate::vocab::{SequenceState, TokenId, Vocabulary};

#[derive(Debug, Clone)]
pub struct RunResult {
    pub final_state: SequenceState,
    pub trace: RunTrace,
    pub metrics: MetricsReport,
    pub terminated: Termination,
}

/// Knobs of the two-stage baseline.
///
/// This is a reconstruction: stage 1 grows the region by whole blocks while
/// the trailing block shows weak EOS evidence, stage 2 decodes and appends
/// a block whenever a step has nothing above the commit threshold. It never
/// contracts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TwoStageConfig {
    /// Stage 1 keeps expanding while the trailing-EOS confidence is below this.
    pub trailing_eos_conf_threshold: f64,
    pub block_size: usize,
    pub stage1_max_rounds: usize,
    /// Stage 2 commit threshold; falls back to the run's `tau_high`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stage2_tau_high: Option<f64>,
}

impl Default for TwoStageConfig {
    fn default() -> Self {
        Self {
            trailing_eos_conf_threshold: 0.5,
            block_size: 64,
            stage1_max_rounds: 32,
            stage2_tau_high: None,
        }
    }
}

impl TwoStageConfig {
    pub fn validate(&self) -> Result<()> {
        if self.block_size < 1 {
            return Err(Error::Config("two-stage block_size must be >= 1".into()));
        }
        let unit = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        if !unit(self.trailing_eos_conf_threshold) {
            return Err(Error::Config(
                "two-stage trailing EOS threshold must be in [0,1]".into(),
            ));
        }
        if let Some(t) = self.stage2_tau_high {
            if !(t > 0.0 && t <= 1.0) {
                return Err(Error::Config(
                    "two-stage stage-2 tau must be in (0,1]".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Upper bound on loop iterations for any run under `cfg`.
pub fn iteration_bound(cfg: &DecodeConfig) -> usize {
    cfg.l_max + cfg.n_max_adjust
}

/// Shared bookkeeping for one run.
struct Run<'a, P: ?Sized> {
    provider: &'a mut P,
    vocab: &'a Vocabulary,
    cfg: &'a DecodeConfig,
    state: SequenceState,
    steps: Vec<StepRecord>,
    started: Instant,
}

enum Predicted {
    Ok(Vec<PositionPrediction>),
    Aborted(String),
}

impl<'a, P: PredictionProvider + ?Sized> Run<'a, P> {
    fn start(
        provider: &'a mut P,
        prompt: &[TokenId],
        vocab: &'a Vocabulary,
        cfg: &'a DecodeConfig,
    ) -> Result<Self> {
        let state = SequenceState::new(prompt, cfg.l_init, vocab)?;
        Ok(Self {
            provider,
            vocab,
            cfg,
            state,
            steps: Vec::new(),
            started: Instant::now(),
        })
    }

    fn predict(&mut self) -> Result<Predicted> {
        if self.steps.len() >= iteration_bound(self.cfg) {
            return Err(Error::Invariant(format!(
                "run exceeded {} iterations",
                iteration_bound(self.cfg)
            )));
        }
        match predict(self.provider, &self.state, self.vocab) {
            Ok(p) => Ok(Predicted::Ok(p)),
            Err(Error::Provider(e)) => {
                warn!(error = %e, step = self.steps.len(), "provider failure, aborting run");
                Ok(Predicted::Aborted(e.to_string()))
            }
            Err(e) => Err(e),
        }
    }

    fn record(
        &mut self,
        remaining_pre: usize,
        value: f64,
        kind: SignalKind,
        action: LengthAction,
        decoded: usize,
    ) {
        let rec = StepRecord {
            step: self.steps.len(),
            remaining_masks_pre: remaining_pre,
            signal_value: value,
            signal_kind: kind,
            action: action.kind,
            magnitude: action.magnitude,
            decoded_count: decoded,
            l_cur_post: self.state.l_cur(),
        };
        debug!(?rec, "step");
        self.steps.push(rec);
    }

    fn finish(
        self,
        strategy: StrategyKind,
        two_stage: Option<TwoStageConfig>,
        terminated: Termination,
    ) -> RunResult {
        let wall: Duration = self.started.elapsed();
        let metrics = metrics::compute(
            &self.state,
            &self.steps,
            &terminated,
            wall,
            self.vocab.eos_id,
        );
        let trace = RunTrace {
            header: TraceHeader {
                strategy,
                config: self.cfg.clone(),
                two_stage,
                vocab: *self.vocab,
                prompt_len: self.state.prompt().len(),
            },
            steps: self.steps,
            footer: metrics.footer(terminated.clone()),
        };
        RunResult {
            final_state: self.state,
            trace,
            metrics,
            terminated,
        }
    }
}

fn require(cfg: &DecodeConfig, want: StrategyKind) -> Result<()> {
    cfg.validate()?;
    if cfg.strategy != want {
        return Err(Error::Config(format!(
            "strategy mismatch: config says {}, called {}",
            cfg.strategy, want
        )));
    }
    Ok(())
}

/// Plain fixed-length denoising: predict and commit until no mask remains.
pub fn run_fixed<P: PredictionProvider + ?Sized>(
    provider: &mut P,
    prompt: &[TokenId],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<RunResult> {
    require(cfg, StrategyKind::FixedLength)?;
    let mut run = Run::start(provider, prompt, vocab, cfg)?;
    while run.state.contains_mask() {
        let preds = match run.predict()? {
            Predicted::Ok(p) => p,
            Predicted::Aborted(reason) => {
                return Ok(run.finish(cfg.strategy, None, Termination::Aborted(reason)))
            }
        };
        let reading = read_signal(cfg.signal, &preds, vocab.eos_id)?;
        let outcome = decode_step(&mut run.state, preds, cfg.tau_high)?;
        run.record(
            reading.remaining_masks,
            reading.value,
            reading.kind,
            LengthAction::HOLD,
            outcome.decoded.len(),
        );
    }
    Ok(run.finish(cfg.strategy, None, Termination::Complete))
}

/// Single-stage bidirectional length control.
///
/// Each iteration: predict, read the signal from the pre-decode snapshot,
/// commit confident positions, then expand/contract/hold the post-decode
/// sequence.
pub fn run_rho_eos<P: PredictionProvider + ?Sized>(
    provider: &mut P,
    prompt: &[TokenId],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<RunResult> {
    require(cfg, StrategyKind::RhoEos)?;
    let mut run = Run::start(provider, prompt, vocab, cfg)?;
    let mut n = 0usize;
    while run.state.contains_mask() {
        let preds = match run.predict()? {
            Predicted::Ok(p) => p,
            Predicted::Aborted(reason) => {
                return Ok(run.finish(cfg.strategy, None, Termination::Aborted(reason)))
            }
        };
        let reading = read_signal(cfg.signal, &preds, vocab.eos_id)?;
        let outcome = decode_step(&mut run.state, preds, cfg.tau_high)?;
        let action = decide_action(&reading, &run.state, cfg, n);
        apply_action(&mut run.state, action)?;
        if !cfg.count_only_adjustments || action.kind.is_adjustment() {
            n += 1;
        }
        run.record(
            reading.remaining_masks,
            reading.value,
            reading.kind,
            action,
            outcome.decoded.len(),
        );
    }
    Ok(run.finish(cfg.strategy, None, Termination::Complete))
}

/// Trailing-block length check used by stage 1. Returns the signal value
/// and whether the block calls for expansion.
fn trailing_block_check(
    preds: &[PositionPrediction],
    signal: SignalKind,
    block: usize,
    eos_id: TokenId,
    conf_threshold: f64,
    rho_low: f64,
) -> (f64, bool) {
    let tail = &preds[preds.len().saturating_sub(block)..];
    match signal {
        SignalKind::Confidence => {
            let eos: Vec<f64> = tail
                .iter()
                .filter(|p| p.top_token == eos_id)
                .map(|p| p.top_prob)
                .collect();
            let conf = if eos.is_empty() {
                0.0
            } else {
                eos.iter().sum::<f64>() / eos.len() as f64
            };
            (conf, conf < conf_threshold)
        }
        SignalKind::Density => {
            let density =
                tail.iter().filter(|p| p.top_token == eos_id).count() as f64 / tail.len() as f64;
            (density, density < rho_low)
        }
    }
}

/// Two-stage baseline (DAEDAL-like, unidirectional).
///
/// The adjustment budget `n_max_adjust` is shared by both stages and counts
/// expansion events only.
pub fn run_two_stage<P: PredictionProvider + ?Sized>(
    provider: &mut P,
    prompt: &[TokenId],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
    ts: &TwoStageConfig,
) -> Result<RunResult> {
    require(cfg, StrategyKind::TwoStage)?;
    ts.validate()?;
    let mut run = Run::start(provider, prompt, vocab, cfg)?;
    let mut n = 0usize;
    let abort = |run: Run<'_, P>, reason| {
        Ok(run.finish(cfg.strategy, Some(ts.clone()), Termination::Aborted(reason)))
    };

    // Stage 1: coarse expansion from trailing-block evidence. The round that
    // decides to stop hands its predictions to stage 2.
    let mut pending: Option<Vec<PositionPrediction>> = None;
    for round in 0.. {
        let preds = match run.predict()? {
            Predicted::Ok(p) => p,
            Predicted::Aborted(reason) => return abort(run, reason),
        };
        let (value, expand) = trailing_block_check(
            &preds,
            cfg.signal,
            ts.block_size,
            vocab.eos_id,
            ts.trailing_eos_conf_threshold,
            cfg.rho_low,
        );
        let room = cfg.l_max - run.state.l_cur();
        if !expand || round >= ts.stage1_max_rounds || n >= cfg.n_max_adjust || room == 0 {
            pending = Some(preds);
            break;
        }
        let action = LengthAction {
            kind: ActionKind::Expand,
            magnitude: ts.block_size.min(room),
        };
        apply_action(&mut run.state, action)?;
        n += 1;
        run.record(preds.len(), value, cfg.signal, action, 0);
    }

    // Stage 2: threshold decoding with end-of-region mask insertion in place
    // of forced progress.
    let tau = ts.stage2_tau_high.unwrap_or(cfg.tau_high);
    while run.state.contains_mask() {
        let preds = match pending.take() {
            Some(p) => p,
            None => match run.predict()? {
                Predicted::Ok(p) => p,
                Predicted::Aborted(reason) => return abort(run, reason),
            },
        };
        let reading = read_signal(cfg.signal, &preds, vocab.eos_id)?;
        let room = cfg.l_max - run.state.l_cur();
        if needs_forced_progress(&preds, tau) && n < cfg.n_max_adjust && room > 0 {
            let action = LengthAction {
                kind: ActionKind::Expand,
                magnitude: ts.block_size.min(room),
            };
            apply_action(&mut run.state, action)?;
            n += 1;
            run.record(
                reading.remaining_masks,
                reading.value,
                reading.kind,
                action,
                0,
            );
            continue;
        }
        let outcome = decode_step(&mut run.state, preds, tau)?;
        run.record(
            reading.remaining_masks,
            reading.value,
            reading.kind,
            LengthAction::HOLD,
            outcome.decoded.len(),
        );
    }
    Ok(run.finish(cfg.strategy, Some(ts.clone()), Termination::Complete))
}

/// Dispatch on `cfg.strategy`. The config is validated before the provider
/// sees any request.
pub fn run<P: PredictionProvider + ?Sized>(
    provider: &mut P,
    prompt: &[TokenId],
    vocab: &Vocabulary,
    cfg: &DecodeConfig,
    ts: Option<&TwoStageConfig>,
) -> Result<RunResult> {
    vocab.validate()?;
    cfg.validate()?;
    match cfg.strategy {
        StrategyKind::FixedLength => run_fixed(provider, prompt, vocab, cfg),
        StrategyKind::RhoEos => run_rho_eos(provider, prompt, vocab, cfg),
        StrategyKind::TwoStage => {
            let default = TwoStageConfig::default();
            run_two_stage(provider, prompt, vocab, cfg, ts.unwrap_or(&default))
        }
    }
}
