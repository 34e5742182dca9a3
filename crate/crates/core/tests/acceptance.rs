//! Acceptance gate: one line per criterion, nonzero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use maskflow_core::config::{DecodeConfig, SignalKind, StrategyKind, ThresholdPreset};
use maskflow_core::controller::{ActionKind, EFactorFamily, EFactorSpec};
use maskflow_core::kernel::{PositionPrediction, PredictionProvider};
use maskflow_core::metrics::{e_ratio, effective_tokens, exact_match, last_quartile_mean};
use maskflow_core::oracle::{
    standard_suite, NoiseProfile, NoisyOracle, ScriptedOracle, ScriptedTask,
};
use maskflow_core::signal::implicit_eos_density;
use maskflow_core::strategy::{iteration_bound, run, TwoStageConfig};
use maskflow_core::sweep::{
    oracle_factory, run_sweep, write_summary_csv, Axes, SweepOptions, SweepSpec,
};
use maskflow_core::{ProviderError, SequenceState, Slot, Termination, Vocabulary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::default()
}

fn task(len: usize) -> ScriptedTask {
    ScriptedTask::new(
        vec![9, 8, 7],
        (0..len as u32).map(|i| 1000 + (i * 31) % 4093).collect(),
    )
}

fn cfg(strategy: StrategyKind, l_init: usize) -> DecodeConfig {
    DecodeConfig {
        strategy,
        l_init,
        ..DecodeConfig::default()
    }
}

fn density_correctness() -> Outcome {
    let v = vocab();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..300);
        let p_eos: f64 = rng.gen();
        let preds: Vec<PositionPrediction> = (0..n)
            .map(|pos| {
                let eos = rng.gen_bool(p_eos);
                let top_prob = rng.gen::<f64>();
                PositionPrediction {
                    pos,
                    top_token: if eos {
                        v.eos_id
                    } else {
                        rng.gen_range(0..1000)
                    },
                    top_prob,
                    eos_prob: if eos {
                        top_prob
                    } else {
                        rng.gen::<f64>() * top_prob
                    },
                }
            })
            .collect();
        let mut naive = 0usize;
        for p in &preds {
            if p.top_token == v.eos_id {
                naive += 1;
            }
        }
        let r = implicit_eos_density(&preds, v.eos_id).map_err(|e| e.to_string())?;
        if r.implicit_eos_count != naive
            || r.value != naive as f64 / n as f64
            || !(0.0..=1.0).contains(&r.value)
        {
            return Err(format!("mismatch: {} vs naive {naive}/{n}", r.value));
        }
    }
    Ok("10000 random lists match a naive recount".into())
}

fn fig1_trend() -> Outcome {
    // One commit per step (every scripted confidence equals tau) so the
    // trajectory spans the whole budget.
    let t = task(200);
    let mut means = Vec::new();
    for l_init in [64, 128, 256, 512, 1024] {
        let c = DecodeConfig {
            tau_high: 0.99,
            ..cfg(StrategyKind::FixedLength, l_init)
        };
        let r = run(
            &mut ScriptedOracle::new(t.clone()),
            &t.prompt,
            &vocab(),
            &c,
            None,
        )
        .map_err(|e| e.to_string())?;
        means.push(last_quartile_mean(&r.trace).unwrap());
    }
    let monotone = means.windows(2).all(|w| w[0] <= w[1]);
    check(
        means[0] < 0.1 && means[4] > 0.9 && monotone,
        format!("last-quartile density by l_init 64..1024: {means:.3?}"),
    )
}

fn oracle_exactness() -> Outcome {
    let t = task(200);
    let c = cfg(StrategyKind::RhoEos, 64).with_preset(ThresholdPreset::Asym);
    let r = run(
        &mut ScriptedOracle::new(t.clone()),
        &t.prompt,
        &vocab(),
        &c,
        None,
    )
    .map_err(|e| e.to_string())?;
    let expands: Vec<usize> = r
        .trace
        .steps
        .iter()
        .filter(|s| s.action == ActionKind::Expand)
        .map(|s| s.magnitude)
        .collect();
    let max_expand = expands.iter().copied().max().unwrap_or(0);
    check(
        r.metrics.e_token == 200 && r.metrics.n_token < 200 + max_expand && !expands.is_empty(),
        format!(
            "e_token {} n_token {} expansions {expands:?}",
            r.metrics.e_token, r.metrics.n_token
        ),
    )
}

struct Recording<P> {
    inner: P,
    states: Vec<SequenceState>,
}

impl<P: PredictionProvider> PredictionProvider for Recording<P> {
    fn predict(
        &mut self,
        state: &SequenceState,
        vocab: &Vocabulary,
    ) -> Result<Vec<PositionPrediction>, ProviderError> {
        self.states.push(state.clone());
        self.inner.predict(state, vocab)
    }
}

fn decoded_preserved(states: &[SequenceState]) -> bool {
    states.windows(2).all(|w| {
        w[0].gen().iter().enumerate().all(|(i, s)| match s {
            Slot::Masked => true,
            Slot::Decoded(t) => w[1].gen().get(i) == Some(&Slot::Decoded(*t)),
        })
    })
}

fn bidirectionality() -> Outcome {
    // At tau 0.99 the scripted oracle commits one slot per step, leaving
    // trailing masks for the controller to remove.
    let t = task(50);
    let mut rho = cfg(StrategyKind::RhoEos, 1024);
    rho.tau_high = 0.99;
    let mut p = Recording {
        inner: ScriptedOracle::new(t.clone()),
        states: vec![],
    };
    let r = run(&mut p, &t.prompt, &vocab(), &rho, None).map_err(|e| e.to_string())?;
    let mut states = p.states;
    states.push(r.final_state.clone());
    let contracts = r.trace.count(ActionKind::Contract);

    let two = DecodeConfig {
        strategy: StrategyKind::TwoStage,
        ..rho.clone()
    };
    let b = run(
        &mut ScriptedOracle::new(t.clone()),
        &t.prompt,
        &vocab(),
        &two,
        Some(&TwoStageConfig::default()),
    )
    .map_err(|e| e.to_string())?;
    let b_contracts = b.trace.count(ActionKind::Contract);
    check(
        contracts >= 1
            && r.metrics.n_token < 1024
            && decoded_preserved(&states)
            && b_contracts == 0,
        format!(
            "rho-eos contracts {contracts} n_token {}; two-stage contracts {b_contracts}",
            r.metrics.n_token
        ),
    )
}

fn termination_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let strategies = [
        StrategyKind::FixedLength,
        StrategyKind::RhoEos,
        StrategyKind::TwoStage,
    ];
    let families = [
        EFactorFamily::Constant,
        EFactorFamily::Linear,
        EFactorFamily::Exponential,
    ];
    let mut worst = 0.0f64;
    for i in 0..500 {
        let l_init = rng.gen_range(1..=512);
        let lo = rng.gen_range(0.0..0.7);
        let c = DecodeConfig {
            strategy: strategies[i % 3],
            signal: if rng.gen_bool(0.5) {
                SignalKind::Density
            } else {
                SignalKind::Confidence
            },
            l_init,
            l_max: l_init + rng.gen_range(0..1024),
            rho_low: lo,
            rho_high: rng.gen_range(lo + 0.01..=1.0),
            tau_high: rng.gen_range(0.3..=1.0),
            n_max_adjust: rng.gen_range(0..=128),
            efactor: EFactorSpec::new(families[rng.gen_range(0..3)]),
            count_only_adjustments: rng.gen_bool(0.5),
            ..DecodeConfig::default()
        };
        let ts = TwoStageConfig {
            block_size: rng.gen_range(1..=128),
            stage1_max_rounds: rng.gen_range(0..=32),
            ..TwoStageConfig::default()
        };
        // Half the profiles are adversarial: heavy noise and a strong early EOS bias.
        let adversarial = i % 2 == 1;
        let noise = NoiseProfile {
            temperature: if adversarial {
                rng.gen_range(0.3..1.0)
            } else {
                rng.gen_range(0.0..0.1)
            },
            eos_bias_early: if adversarial {
                rng.gen_range(0.5..1.0)
            } else {
                0.0
            },
            eos_bias_cutoff: rng.gen_range(0.0..=1.0),
            rng_seed: rng.gen(),
            flip_gain: rng.gen_range(0.0..1.0),
        };
        let t = task(rng.gen_range(0..=600));
        let r = run(
            &mut NoisyOracle::new(t.clone(), noise),
            &t.prompt,
            &vocab(),
            &c,
            Some(&ts),
        )
        .map_err(|e| format!("run {i}: {e}"))?;
        let bound = iteration_bound(&c);
        if r.terminated != Termination::Complete || r.trace.steps.len() > bound {
            return Err(format!(
                "run {i}: {} steps, bound {bound}, {:?}",
                r.trace.steps.len(),
                r.terminated
            ));
        }
        worst = worst.max(r.trace.steps.len() as f64 / bound as f64);
    }
    Ok(format!("500 runs complete; max steps/bound {worst:.3}"))
}

fn mean_adjust(suite: &[ScriptedTask], family: EFactorFamily) -> f64 {
    let c = DecodeConfig {
        efactor: EFactorSpec::new(family),
        ..cfg(StrategyKind::RhoEos, 64)
    };
    let total: usize = suite
        .iter()
        .map(|t| {
            run(
                &mut ScriptedOracle::new(t.clone()),
                &t.prompt,
                &vocab(),
                &c,
                None,
            )
            .expect("suite run")
            .metrics
            .adjust_events
        })
        .sum();
    total as f64 / suite.len() as f64
}

fn efactor_ordering() -> Outcome {
    let suite = standard_suite();
    let e = mean_adjust(&suite, EFactorFamily::Exponential);
    let l = mean_adjust(&suite, EFactorFamily::Linear);
    let k = mean_adjust(&suite, EFactorFamily::Constant);
    check(
        e <= l && l <= k,
        format!("mean adjust events exp {e:.2} <= linear {l:.2} <= const {k:.2}"),
    )
}

fn eos_trap() -> Outcome {
    let suite = standard_suite();
    let mut acc = Vec::new();
    for signal in [SignalKind::Density, SignalKind::Confidence] {
        let c = DecodeConfig {
            signal,
            ..cfg(StrategyKind::RhoEos, 64)
        };
        let mut hits = 0;
        let mut total = 0;
        for seed in 0..2u64 {
            for (i, t) in suite.iter().enumerate() {
                let noise = NoiseProfile {
                    temperature: 0.02,
                    eos_bias_early: 0.5,
                    eos_bias_cutoff: 0.2,
                    rng_seed: seed * 1000 + i as u64,
                    ..NoiseProfile::default()
                };
                let r = run(
                    &mut NoisyOracle::new(t.clone(), noise),
                    &t.prompt,
                    &vocab(),
                    &c,
                    None,
                )
                .map_err(|e| e.to_string())?;
                hits += exact_match(&r.final_state, &t.target, vocab().eos_id) as usize;
                total += 1;
            }
        }
        acc.push(100.0 * hits as f64 / total as f64);
    }
    check(
        acc[0] - acc[1] >= 10.0,
        format!(
            "exact match over 100 runs: density {:.1}% vs confidence {:.1}%",
            acc[0], acc[1]
        ),
    )
}

fn l_init_robustness() -> Outcome {
    let spec = SweepSpec {
        suite: None,
        base: DecodeConfig::default(),
        two_stage: TwoStageConfig::default(),
        noise: NoiseProfile::default(),
        vocab: vocab(),
        axes: Axes {
            strategy: vec![StrategyKind::FixedLength, StrategyKind::RhoEos],
            l_init: vec![128, 256, 512, 1024],
            ..Axes::default()
        },
    };
    let out = run_sweep(
        &spec,
        &standard_suite(),
        &oracle_factory(spec.noise),
        &SweepOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let acc = |s: StrategyKind, l: usize| {
        out.cells
            .iter()
            .find(|c| c.config.strategy == s && c.config.l_init == l)
            .map(|c| 100.0 * c.acc_proxy)
            .unwrap()
    };
    let rho: Vec<f64> = [128, 256, 512, 1024]
        .iter()
        .map(|&l| acc(StrategyKind::RhoEos, l))
        .collect();
    let spread =
        rho.iter().cloned().fold(f64::MIN, f64::max) - rho.iter().cloned().fold(f64::MAX, f64::min);
    let fixed = acc(StrategyKind::FixedLength, 128);
    check(
        spread <= 2.0 && fixed < rho[0] && out.failures.is_empty(),
        format!("rho-eos accuracy {rho:?} (spread {spread:.1}pp); fixed@128 {fixed:.1}%"),
    )
}

type Criterion = (u32, &'static str, Duration, fn() -> Outcome);

type SweepBytes = (String, Vec<(String, Vec<u8>)>);

fn sweep_bytes(dir: &std::path::Path) -> Result<SweepBytes, String> {
    let spec: SweepSpec = serde_json::from_str(
        r#"{"base":{"seed":42},
            "noise":{"temperature":0.05,"eos_bias_early":0.3,"eos_bias_cutoff":0.2,"rng_seed":9},
            "axes":{"strategy":["fixed","rho-eos","two-stage"],"signal":["density","confidence"],"l_init":[64,256]}}"#,
    )
    .map_err(|e| e.to_string())?;
    let opts = SweepOptions {
        workers: 4,
        trace_dir: Some(dir.to_path_buf()),
    };
    let out = run_sweep(&spec, &standard_suite(), &oracle_factory(spec.noise), &opts)
        .map_err(|e| e.to_string())?;
    let mut buf = Vec::new();
    write_summary_csv(&out.cells, &mut buf).map_err(|e| e.to_string())?;
    let csv: String = String::from_utf8(buf)
        .unwrap()
        .lines()
        .map(|l| format!("{}\n", l.rsplit_once(',').unwrap().0))
        .collect();
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .map_err(|e| e.to_string())?
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect();
    files.sort();
    Ok((csv, files))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (csv_a, traces_a) = sweep_bytes(a.path())?;
    let (csv_b, traces_b) = sweep_bytes(b.path())?;
    check(
        csv_a == csv_b && traces_a == traces_b && traces_a.len() == 12 * 50,
        format!("summary CSVs and {} traces byte-identical", traces_a.len()),
    )
}

fn metrics_arithmetic() -> Outcome {
    let eos = vocab().eos_id;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..500);
        let p: f64 = rng.gen();
        let tokens: Vec<u32> = (0..n)
            .map(|_| {
                if rng.gen_bool(p) {
                    eos
                } else {
                    rng.gen_range(0..100)
                }
            })
            .collect();
        let state =
            SequenceState::from_parts(vec![], tokens.iter().map(|t| Slot::Decoded(*t)).collect());
        let e = effective_tokens(&state, eos).map_err(|e| e.to_string())?;
        let naive = tokens.iter().rposition(|t| *t != eos).map_or(0, |i| i + 1);
        if e != naive || e_ratio(e, n) != e as f64 / n as f64 {
            return Err(format!("mismatch on length {n}"));
        }
    }
    let spot = format!("{:.3}", e_ratio(1984, 2318));
    check(
        spot == "0.856",
        format!("10000 random states agree; 198.4/231.8 -> {spot}"),
    )
}

fn main() {
    let criteria: Vec<Criterion> = vec![
        (
            1,
            "density correctness",
            Duration::from_secs(5),
            density_correctness,
        ),
        (
            2,
            "density trend across budgets",
            Duration::from_secs(30),
            fig1_trend,
        ),
        (
            3,
            "oracle exactness",
            Duration::from_secs(5),
            oracle_exactness,
        ),
        (
            4,
            "bidirectionality",
            Duration::from_secs(10),
            bidirectionality,
        ),
        (
            5,
            "termination bound",
            Duration::from_secs(120),
            termination_bound,
        ),
        (
            6,
            "efactor adjustment ordering",
            Duration::from_secs(120),
            efactor_ordering,
        ),
        (7, "EOS-trap robustness", Duration::from_secs(180), eos_trap),
        (
            8,
            "robustness to l_init",
            Duration::from_secs(180),
            l_init_robustness,
        ),
        (9, "determinism", Duration::from_secs(180), determinism),
        (
            10,
            "metrics arithmetic",
            Duration::from_secs(60),
            metrics_arithmetic,
        ),
    ];
    let mut failed = 0;
    for (n, name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let outcome = match outcome {
            Ok(d) if elapsed > limit => Err(format!("{d}; took {elapsed:.2?}, limit {limit:?}")),
            o => o,
        };
        match outcome {
            Ok(detail) => println!("criterion {n:2} PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:2} FAIL  {name}: {detail} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
    println!("all criteria passed");
}
