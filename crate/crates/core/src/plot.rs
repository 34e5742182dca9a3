//! Signal-trajectory plots: one SVG with a curve per trace and the
//! equilibrium band shaded, plus a CSV of the raw series.

use std::fmt::Write as _;
use std::io::Write;

use crate::error::{Error, Result};
use crate::trace::RunTrace;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 60.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Label used for a trace in the legend and the CSV.
pub fn trace_label(trace: &RunTrace) -> String {
    format!(
        "{} l_init={}",
        trace.header.strategy.label(),
        trace.header.config.l_init
    )
}

pub fn emit_trajectory_plot<S: Write, C: Write>(
    traces: &[RunTrace],
    mut svg: S,
    csv_sink: C,
) -> Result<()> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Precondition("no traces to plot".into()))?;
    let kind = first
        .steps
        .first()
        .map(|s| s.signal_kind)
        .unwrap_or(first.header.config.signal);
    for t in traces {
        if t.steps.iter().any(|s| s.signal_kind != kind) || t.header.config.signal != kind {
            return Err(Error::Precondition(format!(
                "traces mix signal kinds ({kind} and {})",
                t.header.config.signal
            )));
        }
    }

    let mut csv = csv::Writer::from_writer(csv_sink);
    csv.write_record([
        "trace",
        "label",
        "step",
        "signal_kind",
        "signal_value",
        "action",
        "l_cur_post",
    ])?;
    for (i, t) in traces.iter().enumerate() {
        let label = trace_label(t);
        for s in &t.steps {
            csv.write_record([
                i.to_string(),
                label.clone(),
                s.step.to_string(),
                s.signal_kind.to_string(),
                s.signal_value.to_string(),
                format!("{:?}", s.action),
                s.l_cur_post.to_string(),
            ])?;
        }
    }
    csv.flush()?;

    let max_step = traces
        .iter()
        .map(|t| t.steps.len())
        .max()
        .unwrap_or(0)
        .max(2)
        - 1;
    let plot_w = WIDTH - LEFT - RIGHT;
    let plot_h = HEIGHT - TOP - BOTTOM;
    let x = |step: usize| LEFT + plot_w * step as f64 / max_step as f64;
    let y = |v: f64| TOP + plot_h * (1.0 - v.clamp(0.0, 1.0));

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        out,
        r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#
    );
    let (lo, hi) = (first.header.config.rho_low, first.header.config.rho_high);
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT:.2}" y="{:.2}" width="{plot_w:.2}" height="{:.2}" fill="#bbbbbb" fill-opacity="0.35"/>"##,
        y(hi),
        y(lo) - y(hi)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT:.2}" y="{TOP:.2}" width="{plot_w:.2}" height="{plot_h:.2}" fill="none" stroke="#333333"/>"##
    );
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.1}</text>"#,
            LEFT - 6.0,
            y(v) + 4.0
        );
    }
    for i in 0..=4 {
        let step = max_step * i / 4;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{step}</text>"#,
            x(step),
            TOP + plot_h + 16.0
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">denoising step</text>"#,
        LEFT + plot_w / 2.0,
        HEIGHT - 12.0
    );
    let _ = writeln!(
        out,
        r#"<text x="14" y="{:.2}" text-anchor="middle" transform="rotate(-90 14 {:.2})">{kind}</text>"#,
        TOP + plot_h / 2.0,
        TOP + plot_h / 2.0
    );
    for (i, t) in traces.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let points: Vec<String> = t
            .steps
            .iter()
            .enumerate()
            .map(|(k, s)| format!("{:.2},{:.2}", x(k), y(s.signal_value)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            points.join(" ")
        );
        let ly = TOP + 14.0 * i as f64 + 8.0;
        let lx = WIDTH - RIGHT + 10.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/>"#,
            lx + 16.0
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            ly + 4.0,
            trace_label(t)
        );
    }
    out.push_str("</svg>\n");
    svg.write_all(out.as_bytes())?;
    svg.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{DecodeConfig, SignalKind, StrategyKind};
    use crate::oracle::{ScriptedOracle, ScriptedTask};
    use crate::strategy::run;
    use crate::vocab::Vocabulary;

    fn fixed_trace(l_init: usize, signal: SignalKind) -> RunTrace {
        let vocab = Vocabulary::default();
        let task = ScriptedTask::new(vec![1, 2], vec![7; 200]);
        let cfg = DecodeConfig {
            strategy: StrategyKind::FixedLength,
            l_init,
            tau_high: 0.99,
            signal,
            ..DecodeConfig::default()
        };
        run(
            &mut ScriptedOracle::new(task.clone()),
            &task.prompt,
            &vocab,
            &cfg,
            None,
        )
        .unwrap()
        .trace
    }

    #[test]
    fn short_budget_curve_ends_low_and_csv_matches() {
        let t = fixed_trace(64, SignalKind::Density);
        assert!(t.steps.last().unwrap().signal_value < 0.1);
        let (mut svg, mut csv) = (Vec::new(), Vec::new());
        emit_trajectory_plot(std::slice::from_ref(&t), &mut svg, &mut csv).unwrap();
        let rows = String::from_utf8(csv).unwrap().lines().count() - 1;
        assert_eq!(rows, t.steps.len());
        let svg = String::from_utf8(svg).unwrap();
        assert!(svg.starts_with("<svg") && svg.contains("<polyline"));
    }

    #[test]
    fn deterministic_bytes() {
        let traces = [
            fixed_trace(64, SignalKind::Density),
            fixed_trace(256, SignalKind::Density),
        ];
        let render = || {
            let (mut a, mut b) = (Vec::new(), Vec::new());
            emit_trajectory_plot(&traces, &mut a, &mut b).unwrap();
            (a, b)
        };
        assert_eq!(render(), render());
    }

    #[test]
    fn rejects_empty_and_mixed() {
        assert!(emit_trajectory_plot(&[], Vec::new(), Vec::new()).is_err());
        let mixed = [
            fixed_trace(64, SignalKind::Density),
            fixed_trace(64, SignalKind::Confidence),
        ];
        assert!(emit_trajectory_plot(&mixed, Vec::new(), Vec::new()).is_err());
    }
}
