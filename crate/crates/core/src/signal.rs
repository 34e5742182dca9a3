//! Length-sufficiency signals computed from a pre-decode prediction snapshot.

use serde::{Deserialize, Serialize};

use crate::config::SignalKind;
use crate::error::{Error, Result};
use crate::kernel::PositionPrediction;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalReading {
    pub value: f64,
    pub kind: SignalKind,
    pub remaining_masks: usize,
    /// Count of implicit EOS tokens; zero for confidence readings.
    pub implicit_eos_count: usize,
}

/// Fraction of remaining masked positions whose implicit (argmax) token is EOS.
pub fn implicit_eos_density(
    predictions: &[PositionPrediction],
    eos_id: TokenId,
) -> Result<SignalReading> {
    if predictions.is_empty() {
        return Err(Error::Precondition(
            "EOS density is undefined with zero remaining masks".into(),
        ));
    }
    let eos = predictions.iter().filter(|p| p.top_token == eos_id).count();
    Ok(SignalReading {
        value: eos as f64 / predictions.len() as f64,
        kind: SignalKind::Density,
        remaining_masks: predictions.len(),
        implicit_eos_count: eos,
    })
}

/// Arithmetic mean of `eos_prob` over remaining masked positions.
pub fn mean_eos_confidence(predictions: &[PositionPrediction]) -> Result<SignalReading> {
    if predictions.is_empty() {
        return Err(Error::Precondition(
            "EOS confidence is undefined with zero remaining masks".into(),
        ));
    }
    let sum: f64 = predictions.iter().map(|p| p.eos_prob).sum();
    let value = (sum / predictions.len() as f64).clamp(0.0, 1.0);
    Ok(SignalReading {
        value,
        kind: SignalKind::Confidence,
        remaining_masks: predictions.len(),
        implicit_eos_count: 0,
    })
}

pub fn read_signal(
    kind: SignalKind,
    predictions: &[PositionPrediction],
    eos_id: TokenId,
) -> Result<SignalReading> {
    match kind {
        SignalKind::Density => implicit_eos_density(predictions, eos_id),
        SignalKind::Confidence => mean_eos_confidence(predictions),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EOS: TokenId = 2;

    fn p(pos: usize, tok: TokenId, eos_prob: f64) -> PositionPrediction {
        PositionPrediction {
            pos,
            top_token: tok,
            top_prob: eos_prob.max(0.5),
            eos_prob,
        }
    }

    #[test]
    fn density_counts() {
        let preds: Vec<_> = (0..10)
            .map(|i| p(i, if i < 7 { EOS } else { 9 }, 0.0))
            .collect();
        let r = implicit_eos_density(&preds, EOS).unwrap();
        assert_eq!(r.value, 0.7);
        assert_eq!(r.implicit_eos_count, 7);
        assert_eq!(r.remaining_masks, 10);

        let none: Vec<_> = (0..64).map(|i| p(i, 9, 0.0)).collect();
        assert_eq!(implicit_eos_density(&none, EOS).unwrap().value, 0.0);
        let all: Vec<_> = (0..64).map(|i| p(i, EOS, 0.9)).collect();
        assert_eq!(implicit_eos_density(&all, EOS).unwrap().value, 1.0);
    }

    #[test]
    fn confidence_mean() {
        let r = mean_eos_confidence(&[p(0, 9, 1.0), p(1, 9, 0.0)]).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.kind, SignalKind::Confidence);
        assert_eq!(r.implicit_eos_count, 0);
        let r = mean_eos_confidence(&[p(0, 9, 0.25), p(1, 9, 0.25), p(2, 9, 0.25)]).unwrap();
        assert_eq!(r.value, 0.25);
        assert_eq!(mean_eos_confidence(&[p(0, 9, 0.9)]).unwrap().value, 0.9);
    }

    #[test]
    fn empty_is_error() {
        assert!(implicit_eos_density(&[], EOS).is_err());
        assert!(mean_eos_confidence(&[]).is_err());
    }

    fn arb_preds() -> impl Strategy<Value = Vec<PositionPrediction>> {
        prop::collection::vec((0u32..5, 0.0f64..=1.0), 1..200).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (t, e))| p(i, t, e))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn density_matches_naive_recount(preds in arb_preds()) {
            let r = implicit_eos_density(&preds, EOS).unwrap();
            let mut naive = 0usize;
            for q in &preds {
                if q.top_token == EOS {
                    naive += 1;
                }
            }
            prop_assert_eq!(r.implicit_eos_count, naive);
            prop_assert_eq!(r.value, naive as f64 / preds.len() as f64);
            prop_assert!((0.0..=1.0).contains(&r.value));
        }

        #[test]
        fn signals_are_permutation_invariant(preds in arb_preds(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut shuffled = preds.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let a = implicit_eos_density(&preds, EOS).unwrap();
            let b = implicit_eos_density(&shuffled, EOS).unwrap();
            prop_assert_eq!(a.value, b.value);
            let c = mean_eos_confidence(&preds).unwrap().value;
            let d = mean_eos_confidence(&shuffled).unwrap().value;
            prop_assert!((c - d).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&c));
        }
    }
}
