//! One denoising step: predictions at masked slots, threshold commit, remask.

use serde::{Deserialize, Serialize};

use crate::error::{Error, ProviderError, Result};
use crate::vocab::{SequenceState, TokenId, Vocabulary};

/// Summary of the model output at one masked slot.
///
/// Full logits are never needed: the decoder uses the argmax identity, its
/// probability, and the EOS probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionPrediction {
    /// Index into the generation region.
    pub pos: usize,
    pub top_token: TokenId,
    pub top_prob: f64,
    pub eos_prob: f64,
}

impl PositionPrediction {
    pub fn is_eos(&self, eos_id: TokenId) -> bool {
        self.top_token == eos_id
    }

    pub fn check(&self, vocab: &Vocabulary) -> std::result::Result<(), String> {
        let in_unit = |p: f64| p.is_finite() && (0.0..=1.0).contains(&p);
        if !in_unit(self.top_prob) {
            return Err(format!(
                "top_prob {} at pos {} outside [0,1]",
                self.top_prob, self.pos
            ));
        }
        if !in_unit(self.eos_prob) {
            return Err(format!(
                "eos_prob {} at pos {} outside [0,1]",
                self.eos_prob, self.pos
            ));
        }
        if !vocab.contains(self.top_token) {
            return Err(format!(
                "top_token {} at pos {} outside vocabulary",
                self.top_token, self.pos
            ));
        }
        if self.top_token == vocab.mask_id {
            return Err(format!("top_token at pos {} is the mask token", self.pos));
        }
        if self.top_token == vocab.eos_id && self.eos_prob > self.top_prob {
            return Err(format!(
                "eos_prob {} exceeds top_prob {} for EOS argmax at pos {}",
                self.eos_prob, self.top_prob, self.pos
            ));
        }
        Ok(())
    }
}

/// Source of per-position predictions (the model `p_θ`).
///
/// Implementations must return exactly one prediction per masked slot and
/// be deterministic for a fixed seed and identical input state.
pub trait PredictionProvider {
    fn predict(
        &mut self,
        state: &SequenceState,
        vocab: &Vocabulary,
    ) -> std::result::Result<Vec<PositionPrediction>, ProviderError>;
}

impl<P: PredictionProvider + ?Sized> PredictionProvider for Box<P> {
    fn predict(
        &mut self,
        state: &SequenceState,
        vocab: &Vocabulary,
    ) -> std::result::Result<Vec<PositionPrediction>, ProviderError> {
        (**self).predict(state, vocab)
    }
}

/// Result of committing one step's confident predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub decoded: Vec<(usize, TokenId)>,
    /// Pre-decode snapshot the step was computed from.
    pub predictions: Vec<PositionPrediction>,
}

/// Check that `preds` covers exactly the masked slots of `state` and return
/// them sorted by position.
pub fn validate_predictions(
    state: &SequenceState,
    vocab: &Vocabulary,
    mut preds: Vec<PositionPrediction>,
) -> std::result::Result<Vec<PositionPrediction>, String> {
    preds.sort_by_key(|p| p.pos);
    let expected: Vec<usize> = state.masked_positions().collect();
    if preds.len() != expected.len() {
        return Err(format!(
            "expected {} predictions (one per masked slot), got {}",
            expected.len(),
            preds.len()
        ));
    }
    for (p, want) in preds.iter().zip(&expected) {
        if p.pos != *want {
            return Err(format!(
                "prediction at pos {} does not match masked slot {want}",
                p.pos
            ));
        }
        p.check(vocab)?;
    }
    Ok(preds)
}

/// Ask `provider` for predictions at every masked slot of `state`.
///
/// Returned predictions are validated and sorted by position.
pub fn predict<P: PredictionProvider + ?Sized>(
    provider: &mut P,
    state: &SequenceState,
    vocab: &Vocabulary,
) -> Result<Vec<PositionPrediction>> {
    if !state.contains_mask() {
        return Err(Error::Precondition(
            "predict called on a fully decoded sequence".into(),
        ));
    }
    let raw = provider.predict(state, vocab)?;
    validate_predictions(state, vocab, raw).map_err(|reason| {
        Error::Provider(ProviderError::Protocol {
            reason,
            payload: String::from("<in-process provider>"),
        })
    })
}

/// Positions chosen for commit: all with `top_prob > tau_high`, or the
/// single most confident one (ties go to the lowest position) if none clear
/// the threshold.
pub fn select_commits(predictions: &[PositionPrediction], tau_high: f64) -> Vec<usize> {
    let confident: Vec<usize> = predictions
        .iter()
        .enumerate()
        .filter(|(_, p)| p.top_prob > tau_high)
        .map(|(i, _)| i)
        .collect();
    if !confident.is_empty() {
        return confident;
    }
    most_confident(predictions).into_iter().collect()
}

/// Index of the prediction with the greatest `top_prob`, lowest position on ties.
pub fn most_confident(predictions: &[PositionPrediction]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, p) in predictions.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) => {
                let cur = &predictions[b];
                if p.top_prob > cur.top_prob || (p.top_prob == cur.top_prob && p.pos < cur.pos) {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// True when no prediction clears `tau_high`, i.e. a plain step would have
/// to fall back on forced progress.
pub fn needs_forced_progress(predictions: &[PositionPrediction], tau_high: f64) -> bool {
    !predictions.is_empty() && predictions.iter().all(|p| p.top_prob <= tau_high)
}

/// Commit the confident predictions into `state`.
pub fn decode_step(
    state: &mut SequenceState,
    predictions: Vec<PositionPrediction>,
    tau_high: f64,
) -> Result<StepOutcome> {
    let masked: Vec<usize> = state.masked_positions().collect();
    let covered = predictions.len() == masked.len()
        && predictions.iter().zip(&masked).all(|(p, m)| p.pos == *m);
    if !covered {
        return Err(Error::Precondition(
            "predictions must cover exactly the masked slots, sorted by position".into(),
        ));
    }
    let chosen = select_commits(&predictions, tau_high);
    let mut decoded = Vec::with_capacity(chosen.len());
    for i in chosen {
        let p = &predictions[i];
        state.commit(p.pos, p.top_token)?;
        decoded.push((p.pos, p.top_token));
    }
    Ok(StepOutcome {
        decoded,
        predictions,
    })
}
