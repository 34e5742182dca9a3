//! Step-level run traces and their JSON-lines encoding.
//!
//! A trace file is one header object, one object per step, and one footer
//! object, each on its own line:
//!
//! ```text
//! {"type":"header","strategy":"rho-eos","config":{...},"vocab":{...},"prompt_len":3}
//! {"type":"step","step":0,"remaining_masks_pre":64,"signal_value":0.0,...}
//! {"type":"footer","e_token":200,"n_token":224,...}
//! ```
//!
//! Wall time is deliberately absent so identical runs give identical bytes.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::config::{DecodeConfig, SignalKind, StrategyKind};
use crate::controller::ActionKind;
use crate::error::{Error, Result};
use crate::strategy::TwoStageConfig;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub remaining_masks_pre: usize,
    pub signal_value: f64,
    pub signal_kind: SignalKind,
    pub action: ActionKind,
    pub magnitude: usize,
    pub decoded_count: usize,
    pub l_cur_post: usize,
}

/// Effective configuration echo written at the top of every trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub strategy: StrategyKind,
    pub config: DecodeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub two_stage: Option<TwoStageConfig>,
    pub vocab: Vocabulary,
    pub prompt_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Complete,
    Aborted(String),
}

impl Termination {
    pub fn is_complete(&self) -> bool {
        matches!(self, Termination::Complete)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFooter {
    pub e_token: usize,
    pub n_token: usize,
    pub e_ratio: f64,
    pub steps_total: usize,
    pub adjust_events: usize,
    pub terminated: Termination,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub header: TraceHeader,
    pub steps: Vec<StepRecord>,
    pub footer: TraceFooter,
}

impl RunTrace {
    pub fn adjust_events(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.action.is_adjustment())
            .count()
    }

    pub fn count(&self, kind: ActionKind) -> usize {
        self.steps.iter().filter(|s| s.action == kind).count()
    }

    /// Index of the last Expand/Contract step, if any.
    pub fn last_adjustment(&self) -> Option<usize> {
        self.steps.iter().rposition(|s| s.action.is_adjustment())
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
enum Line {
    Header(TraceHeader),
    Step(StepRecord),
    Footer(TraceFooter),
}

pub fn write_trace<W: Write>(trace: &RunTrace, mut sink: W) -> Result<()> {
    let mut emit = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut sink, line)?;
        sink.write_all(b"\n")?;
        Ok(())
    };
    emit(&Line::Header(trace.header.clone()))?;
    for s in &trace.steps {
        emit(&Line::Step(s.clone()))?;
    }
    emit(&Line::Footer(trace.footer.clone()))?;
    sink.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(source: R) -> Result<RunTrace> {
    let mut header = None;
    let mut steps = Vec::new();
    let mut footer = None;
    let mut last_line = 0;
    for (idx, line) in source.lines().enumerate() {
        let lineno = idx + 1;
        last_line = lineno;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| Error::TraceParse {
            line: lineno,
            message: e.to_string(),
        })?;
        let misplaced = |what: &str| Error::TraceParse {
            line: lineno,
            message: format!("unexpected {what}"),
        };
        match parsed {
            Line::Header(h) => {
                if header.is_some() || !steps.is_empty() || footer.is_some() {
                    return Err(misplaced("header"));
                }
                header = Some(h);
            }
            Line::Step(s) => {
                if header.is_none() || footer.is_some() {
                    return Err(misplaced("step record"));
                }
                steps.push(s);
            }
            Line::Footer(f) => {
                if header.is_none() || footer.is_some() {
                    return Err(misplaced("footer"));
                }
                footer = Some(f);
            }
        }
    }
    let header = header.ok_or(Error::TraceParse {
        line: 1,
        message: "missing header".into(),
    })?;
    let footer = footer.ok_or(Error::TraceParse {
        line: last_line + 1,
        message: "truncated trace: missing footer".into(),
    })?;
    Ok(RunTrace {
        header,
        steps,
        footer,
    })
}

pub fn trace_to_string(trace: &RunTrace) -> Result<String> {
    let mut buf = Vec::new();
    write_trace(trace, &mut buf)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}
