//! Efficiency metrics: effective tokens, total tokens, their ratio, step and
//! adjustment counts, wall time.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::strategy::RunResult;
use crate::trace::{RunTrace, Termination, TraceFooter};
use crate::vocab::{SequenceState, Slot, TokenId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub e_token: usize,
    pub n_token: usize,
    pub e_ratio: f64,
    pub steps_total: usize,
    pub adjust_events: usize,
    #[serde(with = "duration_ms")]
    pub wall_time: Duration,
    /// Set for aborted runs; masked slots then count as content.
    pub partial: bool,
}

impl MetricsReport {
    pub fn footer(&self, terminated: Termination) -> TraceFooter {
        TraceFooter {
            e_token: self.e_token,
            n_token: self.n_token,
            e_ratio: self.e_ratio,
            steps_total: self.steps_total,
            adjust_events: self.adjust_events,
            terminated,
        }
    }
}

/// Generated length excluding the trailing run of EOS padding.
///
/// Interior EOS tokens count as content.
pub fn effective_tokens(final_state: &SequenceState, eos_id: TokenId) -> Result<usize> {
    if final_state.contains_mask() {
        return Err(Error::Precondition(
            "effective tokens need a fully decoded sequence".into(),
        ));
    }
    Ok(effective_len(final_state.gen(), eos_id))
}

fn effective_len(gen: &[Slot], eos_id: TokenId) -> usize {
    gen.iter()
        .rposition(|s| *s != Slot::Decoded(eos_id))
        .map_or(0, |i| i + 1)
}

pub fn e_ratio(e_token: usize, n_token: usize) -> f64 {
    if n_token == 0 {
        0.0
    } else {
        e_token as f64 / n_token as f64
    }
}

pub(crate) fn compute(
    final_state: &SequenceState,
    trace_steps: &[crate::trace::StepRecord],
    terminated: &Termination,
    wall_time: Duration,
    eos_id: TokenId,
) -> MetricsReport {
    let e_token = effective_len(final_state.gen(), eos_id);
    let n_token = final_state.l_cur();
    MetricsReport {
        e_token,
        n_token,
        e_ratio: e_ratio(e_token, n_token),
        steps_total: trace_steps.len(),
        adjust_events: trace_steps
            .iter()
            .filter(|s| s.action.is_adjustment())
            .count(),
        wall_time,
        partial: !terminated.is_complete(),
    }
}

/// Recompute the metrics of a finished run from its final state and trace.
pub fn summarize(result: &RunResult) -> MetricsReport {
    compute(
        &result.final_state,
        &result.trace.steps,
        &result.terminated,
        result.metrics.wall_time,
        result.trace.header.vocab.eos_id,
    )
}

/// Exact-match accuracy proxy: the content region (everything before the
/// trailing EOS padding) equals `target`.
pub fn exact_match(final_state: &SequenceState, target: &[TokenId], eos_id: TokenId) -> bool {
    let Ok(e) = effective_tokens(final_state, eos_id) else {
        return false;
    };
    e == target.len()
        && final_state.gen()[..e]
            .iter()
            .zip(target)
            .all(|(s, t)| *s == Slot::Decoded(*t))
}

/// Mean of the trace's signal over its last quarter of steps (at least one).
pub fn last_quartile_mean(trace: &RunTrace) -> Option<f64> {
    let n = trace.steps.len();
    if n == 0 {
        return None;
    }
    let take = n.div_ceil(4).max(1);
    let tail = &trace.steps[n - take..];
    Some(tail.iter().map(|s| s.signal_value).sum::<f64>() / tail.len() as f64)
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64() * 1e3)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let ms = f64::deserialize(d)?;
        Ok(Duration::from_secs_f64(ms.max(0.0) / 1e3))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EOS: TokenId = 2;

    fn decoded(tokens: &[TokenId]) -> SequenceState {
        SequenceState::from_parts(vec![], tokens.iter().map(|t| Slot::Decoded(*t)).collect())
    }

    #[test]
    fn effective_token_examples() {
        assert_eq!(
            effective_tokens(&decoded(&[7, 8, EOS, EOS]), EOS).unwrap(),
            2
        );
        assert_eq!(
            effective_tokens(&decoded(&[EOS, EOS, EOS]), EOS).unwrap(),
            0
        );
        assert_eq!(
            effective_tokens(&decoded(&[7, EOS, 8, EOS, EOS]), EOS).unwrap(),
            3
        );
        let masked = SequenceState::from_parts(vec![], vec![Slot::Decoded(1), Slot::Masked]);
        assert!(effective_tokens(&masked, EOS).is_err());
    }

    #[test]
    fn ratio_arithmetic() {
        assert_eq!(e_ratio(9, 12), 0.75);
        let r = 198.4 / 231.8;
        assert_eq!(format!("{r:.3}"), "0.856");
    }

    #[test]
    fn exact_match_semantics() {
        assert!(exact_match(&decoded(&[7, 8, EOS]), &[7, 8], EOS));
        assert!(exact_match(&decoded(&[7, 8]), &[7, 8], EOS));
        assert!(!exact_match(&decoded(&[7, EOS, 8]), &[7, 8], EOS));
        assert!(!exact_match(&decoded(&[7]), &[7, 8], EOS));
    }

    fn naive_reverse_scan(tokens: &[TokenId]) -> usize {
        let mut n = tokens.len();
        while n > 0 && tokens[n - 1] == EOS {
            n -= 1;
        }
        n
    }

    proptest! {
        #[test]
        fn effective_tokens_match_reverse_scan(tokens in prop::collection::vec(prop_oneof![Just(EOS), 0u32..6], 1..2000)) {
            let s = decoded(&tokens);
            let e = effective_tokens(&s, EOS).unwrap();
            prop_assert_eq!(e, naive_reverse_scan(&tokens));
            prop_assert!(e <= s.l_cur());
            prop_assert_eq!(e_ratio(e, s.l_cur()), e as f64 / tokens.len() as f64);
        }
    }
}
