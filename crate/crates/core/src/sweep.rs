//! Parameter sweeps over a task suite with a worker pool.
//!
//! Cells are the Cartesian product of the axis values, in the fixed order
//! strategy, signal, l_init, thresholds, efactor. Every (cell, task) pair is
//! an independent job with its own provider; results are merged in job
//! order after all workers finish, so output does not depend on scheduling.

use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::config::{DecodeConfig, SignalKind, StrategyKind};
use crate::controller::{EFactorFamily, EFactorSpec};
use crate::error::{Error, Result};
use crate::kernel::PredictionProvider;
use crate::metrics::{exact_match, MetricsReport};
use crate::oracle::{task_profile, NoiseProfile, NoisyOracle, ScriptedTask};
use crate::strategy::{run, TwoStageConfig};
use crate::trace::write_trace;
use crate::vocab::Vocabulary;

pub const SUMMARY_COLUMNS: [&str; 13] = [
    "strategy",
    "signal",
    "l_init",
    "rho_low",
    "rho_high",
    "efactor",
    "acc_proxy",
    "e_token",
    "n_token",
    "e_ratio",
    "steps",
    "adjust_events",
    "wall_ms",
];

/// Axis values. An empty axis means "use the base config's value".
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Axes {
    pub strategy: Vec<StrategyKind>,
    pub signal: Vec<SignalKind>,
    pub l_init: Vec<usize>,
    /// `[rho_low, rho_high]` pairs.
    pub thresholds: Vec<(f64, f64)>,
    pub efactor: Vec<EFactorFamily>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Task suite file, resolved relative to the spec file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub suite: Option<PathBuf>,
    pub base: DecodeConfig,
    pub two_stage: TwoStageConfig,
    pub noise: NoiseProfile,
    pub vocab: Vocabulary,
    pub axes: Axes,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut spec: SweepSpec = serde_json::from_reader(std::io::BufReader::new(file))?;
        if let (Some(suite), Some(dir)) = (&spec.suite, path.parent()) {
            if suite.is_relative() {
                spec.suite = Some(dir.join(suite));
            }
        }
        Ok(spec)
    }

    /// Expand the axes into concrete configs, validating each.
    pub fn cells(&self) -> Result<Vec<DecodeConfig>> {
        let or_base = |v: &[StrategyKind]| {
            if v.is_empty() {
                vec![self.base.strategy]
            } else {
                v.to_vec()
            }
        };
        let strategies = or_base(&self.axes.strategy);
        let signals = if self.axes.signal.is_empty() {
            vec![self.base.signal]
        } else {
            self.axes.signal.clone()
        };
        let l_inits = if self.axes.l_init.is_empty() {
            vec![self.base.l_init]
        } else {
            self.axes.l_init.clone()
        };
        let thresholds = if self.axes.thresholds.is_empty() {
            vec![(self.base.rho_low, self.base.rho_high)]
        } else {
            self.axes.thresholds.clone()
        };
        let families = if self.axes.efactor.is_empty() {
            vec![self.base.efactor.family]
        } else {
            self.axes.efactor.clone()
        };
        let mut cells = Vec::new();
        for &strategy in &strategies {
            for &signal in &signals {
                for &l_init in &l_inits {
                    for &(rho_low, rho_high) in &thresholds {
                        for &family in &families {
                            let cfg = DecodeConfig {
                                strategy,
                                signal,
                                l_init,
                                rho_low,
                                rho_high,
                                efactor: EFactorSpec {
                                    family,
                                    ..self.base.efactor
                                },
                                ..self.base.clone()
                            };
                            cfg.validate()?;
                            cells.push(cfg);
                        }
                    }
                }
            }
        }
        Ok(cells)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub cell: usize,
    pub task: usize,
    pub metrics: MetricsReport,
    pub exact: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub cell: usize,
    pub task: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub config: DecodeConfig,
    pub runs: usize,
    pub completed: usize,
    pub acc_proxy: f64,
    pub e_token: f64,
    pub n_token: f64,
    /// Ratio of the mean effective and mean total token counts.
    pub e_ratio: f64,
    pub steps: f64,
    pub adjust_events: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub cells: Vec<CellSummary>,
    pub runs: Vec<RunRecord>,
    pub failures: Vec<Failure>,
}

/// Execution knobs that do not change results.
#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Worker threads; 0 picks the number of CPUs.
    pub workers: usize,
    /// Write one trace per run into this directory.
    pub trace_dir: Option<PathBuf>,
}

/// Builds a fresh provider for one job.
pub type ProviderFactory<'a> =
    dyn Fn(&ScriptedTask, usize, &DecodeConfig) -> Result<Box<dyn PredictionProvider>> + Sync + 'a;

/// Oracle factory: a noisy scripted oracle seeded per task from `cfg.seed`.
pub fn oracle_factory(
    noise: NoiseProfile,
) -> impl Fn(&ScriptedTask, usize, &DecodeConfig) -> Result<Box<dyn PredictionProvider>> + Sync {
    move |task, index, cfg| {
        let profile = task_profile(&noise, cfg.seed, index);
        Ok(Box::new(NoisyOracle::new(task.clone(), profile)) as Box<dyn PredictionProvider>)
    }
}

pub fn trace_file_name(cell: usize, task: usize) -> String {
    format!("cell{cell:03}_task{task:03}.jsonl")
}

pub fn run_sweep(
    spec: &SweepSpec,
    tasks: &[ScriptedTask],
    factory: &ProviderFactory<'_>,
    opts: &SweepOptions,
) -> Result<SweepOutcome> {
    if tasks.is_empty() {
        return Err(Error::Config("sweep task suite is empty".into()));
    }
    spec.vocab.validate()?;
    spec.two_stage.validate()?;
    spec.noise.validate()?;
    for t in tasks {
        t.validate(&spec.vocab)?;
    }
    let cells = spec.cells()?;
    if let Some(dir) = &opts.trace_dir {
        std::fs::create_dir_all(dir)?;
    }
    let jobs: Vec<(usize, usize)> = (0..cells.len())
        .flat_map(|c| (0..tasks.len()).map(move |t| (c, t)))
        .collect();
    info!(cells = cells.len(), tasks = tasks.len(), "starting sweep");

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
    let outcomes: Vec<std::result::Result<RunRecord, Failure>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, t)| {
                run_job(spec, &cells[c], c, &tasks[t], t, factory, opts).map_err(|e| Failure {
                    cell: c,
                    task: t,
                    message: e.to_string(),
                })
            })
            .collect()
    });

    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => runs.push(r),
            Err(f) => {
                warn!(cell = f.cell, task = f.task, message = %f.message, "sweep job failed");
                failures.push(f);
            }
        }
    }
    let summaries = cells
        .iter()
        .enumerate()
        .map(|(c, cfg)| summarize_cell(cfg, tasks.len(), runs.iter().filter(|r| r.cell == c)))
        .collect();
    Ok(SweepOutcome {
        cells: summaries,
        runs,
        failures,
    })
}

fn run_job(
    spec: &SweepSpec,
    cfg: &DecodeConfig,
    cell: usize,
    task: &ScriptedTask,
    index: usize,
    factory: &ProviderFactory<'_>,
    opts: &SweepOptions,
) -> Result<RunRecord> {
    let mut provider = factory(task, index, cfg)?;
    let result = run(
        &mut provider,
        &task.prompt,
        &spec.vocab,
        cfg,
        Some(&spec.two_stage),
    )?;
    if let Some(dir) = &opts.trace_dir {
        let file = std::fs::File::create(dir.join(trace_file_name(cell, index)))?;
        write_trace(&result.trace, std::io::BufWriter::new(file))?;
    }
    if let crate::trace::Termination::Aborted(reason) = &result.terminated {
        return Err(Error::Precondition(format!("run aborted: {reason}")));
    }
    Ok(RunRecord {
        cell,
        task: index,
        exact: exact_match(&result.final_state, &task.target, spec.vocab.eos_id),
        metrics: result.metrics,
    })
}

fn summarize_cell<'a>(
    cfg: &DecodeConfig,
    total: usize,
    runs: impl Iterator<Item = &'a RunRecord>,
) -> CellSummary {
    let runs: Vec<&RunRecord> = runs.collect();
    let k = runs.len();
    let mean = |f: &dyn Fn(&RunRecord) -> f64| {
        if k == 0 {
            f64::NAN
        } else {
            runs.iter().map(|r| f(r)).sum::<f64>() / k as f64
        }
    };
    let e_token = mean(&|r| r.metrics.e_token as f64);
    let n_token = mean(&|r| r.metrics.n_token as f64);
    CellSummary {
        config: cfg.clone(),
        runs: total,
        completed: k,
        acc_proxy: runs.iter().filter(|r| r.exact).count() as f64 / total as f64,
        e_token,
        n_token,
        e_ratio: if n_token > 0.0 {
            e_token / n_token
        } else {
            f64::NAN
        },
        steps: mean(&|r| r.metrics.steps_total as f64),
        adjust_events: mean(&|r| r.metrics.adjust_events as f64),
        wall_ms: mean(&|r| r.metrics.wall_time.as_secs_f64() * 1e3),
    }
}

pub fn write_summary_csv<W: Write>(cells: &[CellSummary], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(SUMMARY_COLUMNS)?;
    for c in cells {
        w.write_record([
            c.config.strategy.to_string(),
            c.config.signal.to_string(),
            c.config.l_init.to_string(),
            c.config.rho_low.to_string(),
            c.config.rho_high.to_string(),
            c.config.efactor.family.to_string(),
            c.acc_proxy.to_string(),
            c.e_token.to_string(),
            c.n_token.to_string(),
            c.e_ratio.to_string(),
            c.steps.to_string(),
            c.adjust_events.to_string(),
            format!("{:.3}", c.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_failures_csv<W: Write>(failures: &[Failure], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["cell", "task", "message"])?;
    for f in failures {
        w.write_record([f.cell.to_string(), f.task.to_string(), f.message.clone()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::standard_suite;

    fn small_suite() -> Vec<ScriptedTask> {
        standard_suite().into_iter().take(6).collect()
    }

    #[test]
    fn cells_are_the_cartesian_product() {
        let spec = SweepSpec {
            suite: None,
            base: DecodeConfig::default(),
            two_stage: TwoStageConfig::default(),
            noise: NoiseProfile::default(),
            vocab: Vocabulary::default(),
            axes: Axes {
                strategy: vec![StrategyKind::FixedLength, StrategyKind::RhoEos],
                l_init: vec![128, 256, 512, 1024],
                ..Axes::default()
            },
        };
        let cells = spec.cells().unwrap();
        assert_eq!(cells.len(), 8);
        assert_eq!(cells[0].strategy, StrategyKind::FixedLength);
        assert_eq!(cells[7].l_init, 1024);
    }

    #[test]
    fn empty_suite_is_an_error() {
        let spec: SweepSpec = serde_json::from_str("{}").unwrap();
        let factory = oracle_factory(NoiseProfile::default());
        assert!(run_sweep(&spec, &[], &factory, &SweepOptions::default()).is_err());
    }

    #[test]
    fn invalid_threshold_cell_rejected() {
        let spec: SweepSpec =
            serde_json::from_str(r#"{"axes":{"thresholds":[[0.8,0.4]]}}"#).unwrap();
        assert!(spec.cells().is_err());
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let spec: SweepSpec = serde_json::from_str(
            r#"{"axes":{"strategy":["fixed","rho-eos","two-stage"],"l_init":[64,256]},
                "noise":{"temperature":0.05,"eos_bias_early":0.3,"eos_bias_cutoff":0.2,"rng_seed":3}}"#,
        )
        .unwrap();
        let tasks = small_suite();
        let factory = oracle_factory(spec.noise);
        let csv_without_wall = |workers| {
            let out = run_sweep(
                &spec,
                &tasks,
                &factory,
                &SweepOptions {
                    workers,
                    trace_dir: None,
                },
            )
            .unwrap();
            let mut buf = Vec::new();
            write_summary_csv(&out.cells, &mut buf).unwrap();
            String::from_utf8(buf)
                .unwrap()
                .lines()
                .map(|l| l.rsplit_once(',').unwrap().0.to_string())
                .collect::<Vec<_>>()
        };
        let one = csv_without_wall(1);
        assert_eq!(one.len(), 7);
        assert_eq!(one, csv_without_wall(4));
    }

    #[test]
    fn failing_jobs_are_recorded() {
        let spec: SweepSpec = serde_json::from_str("{}").unwrap();
        let tasks = small_suite();
        let factory =
            |_: &ScriptedTask, i: usize, _: &DecodeConfig| -> Result<Box<dyn PredictionProvider>> {
                if i == 2 {
                    Err(Error::Config("no provider".into()))
                } else {
                    Ok(Box::new(crate::oracle::ScriptedOracle::new(
                        small_suite()[i].clone(),
                    )))
                }
            };
        let out = run_sweep(&spec, &tasks, &factory, &SweepOptions::default()).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].task, 2);
        assert_eq!(out.cells[0].completed, 5);
        assert!((out.cells[0].acc_proxy - 5.0 / 6.0).abs() < 1e-12);
    }
}
