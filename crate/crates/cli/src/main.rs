mod args;
mod model;

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use tracing::info;
use tracing_subscriber::EnvFilter;

use maskflow_core::bridge::{
    provider_handler, serve_session, BridgeConfig, BridgeProvider, Launch,
};
use maskflow_core::metrics::exact_match;
use maskflow_core::oracle::{
    generate_suite, load_suite, write_suite, LengthDist, ScriptedTask, SuiteOracle, SuiteSpec,
};
use maskflow_core::plot::emit_trajectory_plot;
use maskflow_core::sweep::{
    oracle_factory, run_sweep, write_failures_csv, write_summary_csv, SweepOptions, SweepSpec,
};
use maskflow_core::trace::{read_trace, write_trace};
use maskflow_core::{run, Error, PredictionProvider, Termination, TokenId};

use crate::args::{merge_noise, resolve, DecodeArgs, NoiseArgs};
use crate::model::{pick_task, split_index, BridgeOpts, ModelSpec};

#[derive(Parser)]
#[command(
    name = "maskflow",
    version,
    about = "Variable-length decoding for masked diffusion language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Commands,
}

#[derive(Subcommand)]
enum Commands {
    /// Decode one prompt and write its trace
    Run(Box<RunArgs>),
    /// Run a parameter grid over a task suite
    Sweep(SweepArgs),
    /// Plot signal trajectories from trace files
    Plot(PlotArgs),
    /// Generate a scripted task suite
    GenSuite(GenSuiteArgs),
    /// Serve a suite oracle over the bridge protocol
    ServeOracle(ServeArgs),
}

#[derive(Args)]
struct BridgeArgs {
    /// Per-request timeout for bridged models
    #[arg(long, default_value_t = 30_000)]
    bridge_timeout_ms: u64,

    /// Retries after a timed-out request
    #[arg(long, default_value_t = 2)]
    bridge_retries: u32,
}

impl BridgeArgs {
    fn opts(&self) -> BridgeOpts {
        BridgeOpts {
            timeout: Duration::from_millis(self.bridge_timeout_ms),
            retries: self.bridge_retries,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    decode: DecodeArgs,

    #[command(flatten)]
    noise: NoiseArgs,

    /// oracle:PATH[#INDEX] | bridge:CMD | tcp:ADDR
    #[arg(long)]
    model: ModelSpec,

    /// Task giving prompt and target for bridged models
    #[arg(long, value_name = "PATH[#INDEX]")]
    task: Option<String>,

    /// Comma-separated prompt token ids for bridged models without --task
    #[arg(long, value_delimiter = ',')]
    prompt: Vec<TokenId>,

    /// Trace output (JSON lines)
    #[arg(long, value_name = "FILE")]
    trace: Option<PathBuf>,

    /// Directory for trace.jsonl and metrics.json
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    #[command(flatten)]
    bridge: BridgeArgs,
}

#[derive(Args)]
struct SweepArgs {
    /// Sweep spec (JSON): base, two_stage, noise, vocab, axes, suite
    spec: PathBuf,

    /// Task suite; overrides the spec's suite
    #[arg(long)]
    suite: Option<PathBuf>,

    /// Model for every run; defaults to the scripted oracle
    #[arg(long)]
    model: Option<ModelSpec>,

    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,

    /// Overrides the spec's base seed
    #[arg(long)]
    seed: Option<u64>,

    /// Worker threads (0 = one per CPU)
    #[arg(long, default_value_t = 0)]
    workers: usize,

    /// Also write one trace per run under DIR/traces
    #[arg(long)]
    traces: bool,

    #[command(flatten)]
    bridge: BridgeArgs,
}

#[derive(Args)]
struct PlotArgs {
    /// Trace files sharing one signal kind
    #[arg(required = true)]
    traces: Vec<PathBuf>,

    /// SVG output; the raw series goes next to it with a .csv extension
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct GenSuiteArgs {
    #[arg(long, value_name = "FILE")]
    out: PathBuf,

    #[arg(long, default_value_t = 50)]
    tasks: usize,

    /// Mean target length
    #[arg(long, default_value_t = 200.0)]
    mean: f64,

    #[arg(long, default_value_t = 60.0)]
    std: f64,

    #[arg(long, default_value_t = 16)]
    min_len: usize,

    #[arg(long, default_value_t = 400)]
    max_len: usize,

    #[arg(long, default_value_t = SuiteSpec::standard().seed)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    /// Task suite to answer from
    suite: PathBuf,

    /// Listen on this address instead of serving stdin/stdout
    #[arg(long, value_name = "ADDR")]
    listen: Option<String>,

    /// Run seed; must match the engine's --seed for noisy oracles
    #[arg(long, default_value_t = 0)]
    seed: u64,

    #[command(flatten)]
    noise: NoiseArgs,
}

fn main() -> ExitCode {
    let filter = EnvFilter::try_from_env("MASKFLOW_LOG").unwrap_or_else(|_| EnvFilter::new("warn"));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(io::stderr)
        .init();

    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let sub = matches
        .subcommand()
        .map(|(_, m)| m)
        .expect("subcommand required");
    let result = match cli.command {
        Commands::Run(a) => cmd_run(sub, *a),
        Commands::Sweep(a) => cmd_sweep(a),
        Commands::Plot(a) => cmd_plot(a),
        Commands::GenSuite(a) => cmd_gen_suite(a),
        Commands::ServeOracle(a) => cmd_serve(sub, a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let usage = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<Error>(), Some(Error::Config(_))));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

fn write_trace_file(path: &Path, trace: &maskflow_core::RunTrace) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_trace(trace, BufWriter::new(file))?;
    Ok(())
}

fn cmd_run(m: &ArgMatches, a: RunArgs) -> Result<ExitCode> {
    let r = resolve(m, &a.decode, &a.noise)?;

    let (task, index): (ScriptedTask, usize) = match (&a.model, &a.task) {
        (ModelSpec::Oracle { path, index }, _) => {
            let tasks = load_suite(path)?;
            let i = index.unwrap_or(0);
            (pick_task(&tasks, i)?.clone(), i)
        }
        (_, Some(spec)) => {
            let (path, index) = split_index(spec);
            let tasks = load_suite(&path)?;
            let i = index.unwrap_or(0);
            (pick_task(&tasks, i)?.clone(), i)
        }
        (_, None) if !a.prompt.is_empty() => (ScriptedTask::new(a.prompt.clone(), vec![]), 0),
        (_, None) => bail!("bridged runs need --task PATH[#INDEX] or --prompt"),
    };
    let has_target = a.model.is_oracle() || a.task.is_some();

    let mut provider = a
        .model
        .provider(&task, index, &r.decode, &r.noise, a.bridge.opts())?;
    let result = run(
        &mut provider,
        &task.prompt,
        &r.vocab,
        &r.decode,
        Some(&r.two_stage),
    )?;

    if let Some(path) = &a.trace {
        write_trace_file(path, &result.trace)?;
    }
    let exact = has_target.then(|| exact_match(&result.final_state, &task.target, r.vocab.eos_id));
    if let Some(dir) = &a.out_dir {
        std::fs::create_dir_all(dir)?;
        write_trace_file(&dir.join("trace.jsonl"), &result.trace)?;
        let report = serde_json::json!({
            "metrics": result.metrics,
            "exact_match": exact,
            "terminated": result.terminated,
        });
        std::fs::write(
            dir.join("metrics.json"),
            serde_json::to_string_pretty(&report)? + "\n",
        )?;
    }

    let mt = &result.metrics;
    let status = match &result.terminated {
        Termination::Complete => "complete".to_string(),
        Termination::Aborted(reason) => format!("aborted ({reason})"),
    };
    println!(
        "{} signal={} l_init={} e_token={} n_token={} e_ratio={:.4} steps={} adjust_events={} exact={} status={}",
        r.decode.strategy,
        r.decode.signal,
        r.decode.l_init,
        mt.e_token,
        mt.n_token,
        mt.e_ratio,
        mt.steps_total,
        mt.adjust_events,
        exact.map_or("n/a".to_string(), |e| e.to_string()),
        status
    );
    Ok(if result.terminated.is_complete() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn cmd_sweep(a: SweepArgs) -> Result<ExitCode> {
    let mut spec = SweepSpec::load(&a.spec)
        .with_context(|| format!("loading sweep spec {}", a.spec.display()))?;
    if let Some(seed) = a.seed {
        spec.base.seed = seed;
    }
    let suite_path = a
        .suite
        .clone()
        .or_else(|| spec.suite.clone())
        .or_else(|| match &a.model {
            Some(ModelSpec::Oracle { path, .. }) => Some(path.clone()),
            _ => None,
        })
        .context("no task suite: pass --suite or set \"suite\" in the sweep spec")?;
    let tasks = load_suite(&suite_path)?;

    let opts = SweepOptions {
        workers: a.workers,
        trace_dir: a.traces.then(|| a.out_dir.join("traces")),
    };
    let outcome = match &a.model {
        None | Some(ModelSpec::Oracle { .. }) => {
            run_sweep(&spec, &tasks, &oracle_factory(spec.noise), &opts)?
        }
        Some(remote) => {
            let launch = match remote {
                ModelSpec::Bridge(cmd) => Launch::Command(cmd.clone()),
                ModelSpec::Tcp(addr) => Launch::Tcp(addr.clone()),
                ModelSpec::Oracle { .. } => unreachable!(),
            };
            let bridge = a.bridge.opts();
            let factory = move |_: &ScriptedTask, _: usize, _: &maskflow_core::DecodeConfig| {
                let p = BridgeProvider::connect(BridgeConfig {
                    launch: launch.clone(),
                    request_timeout: bridge.timeout,
                    max_retries: bridge.retries,
                })?;
                Ok(Box::new(p) as Box<dyn PredictionProvider>)
            };
            run_sweep(&spec, &tasks, &factory, &opts)?
        }
    };

    std::fs::create_dir_all(&a.out_dir)?;
    let summary = a.out_dir.join("summary.csv");
    write_summary_csv(&outcome.cells, BufWriter::new(File::create(&summary)?))?;
    write_failures_csv(
        &outcome.failures,
        BufWriter::new(File::create(a.out_dir.join("failures.csv"))?),
    )?;
    info!(path = %summary.display(), "wrote summary");
    println!(
        "{} cells x {} tasks, {} failures; summary at {}",
        outcome.cells.len(),
        tasks.len(),
        outcome.failures.len(),
        summary.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_plot(a: PlotArgs) -> Result<ExitCode> {
    let traces = a
        .traces
        .iter()
        .map(|p| {
            let f = File::open(p).with_context(|| format!("opening {}", p.display()))?;
            read_trace(BufReader::new(f)).with_context(|| format!("reading {}", p.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let csv_path = a.out.with_extension("csv");
    let svg = BufWriter::new(File::create(&a.out)?);
    let csv = BufWriter::new(File::create(&csv_path)?);
    emit_trajectory_plot(&traces, svg, csv)?;
    println!("wrote {} and {}", a.out.display(), csv_path.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_gen_suite(a: GenSuiteArgs) -> Result<ExitCode> {
    let spec = SuiteSpec {
        tasks: a.tasks,
        lengths: LengthDist::Normal {
            mean: a.mean,
            std: a.std,
            min: a.min_len,
            max: a.max_len,
        },
        seed: a.seed,
        ..SuiteSpec::standard()
    };
    let tasks = generate_suite(&spec, &Default::default())?;
    let mut out = BufWriter::new(File::create(&a.out)?);
    write_suite(&tasks, &mut out)?;
    out.flush()?;
    println!("wrote {} tasks to {}", tasks.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(m: &ArgMatches, a: ServeArgs) -> Result<ExitCode> {
    let tasks = load_suite(&a.suite)?;
    let noise = merge_noise(m, &a.noise, Default::default());
    noise.validate()?;
    let oracle = SuiteOracle::seeded(&tasks, noise, a.seed)?;
    match &a.listen {
        None => {
            let stdin = io::stdin();
            let served =
                serve_session(stdin.lock(), io::stdout().lock(), provider_handler(oracle))?;
            info!(served, "stdin closed");
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            eprintln!("listening on {}", listener.local_addr()?);
            for stream in listener.incoming() {
                let stream = stream?;
                let oracle = oracle.clone();
                std::thread::spawn(move || {
                    let reader = match stream.try_clone() {
                        Ok(s) => BufReader::new(s),
                        Err(_) => return,
                    };
                    let _ = serve_session(reader, stream, provider_handler(oracle));
                });
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
