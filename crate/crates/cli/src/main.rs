use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use klb_core::explore::ExploreConfig;
use klb_core::scenario::{
    accuracy_csv, bench_csv, compare_csv, compare_policies, drain_estimates, explore_report,
    explore_report_csv, ilp_bench, multistep_accuracy, par_map, replay_dir, run_scenario,
    single_dip_fidelity, verify_dir, RunOutput, Scenario, SyntheticDip, COMPARE_POLICIES, PRESETS,
};
use klb_core::sim::{LatencyModel, Policy, ProbeConfig};
use klb_core::types::Resolution;

#[derive(Parser)]
#[command(name = "klb", version, about = "Latency-aware L4 load balancing: simulator, controller and solver benchmarks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct RunFlags {
    #[arg(long)]
    seed: Option<u64>,
    /// Simulated seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Output directory; results go to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one or more scenarios (preset names or TOML files).
    Run {
        #[arg(required = true)]
        scenarios: Vec<String>,
        #[arg(long)]
        policy: Option<Policy>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// One run per baseline policy and the controller, same seed.
    ComparePolicies {
        #[arg(default_value = "pool30")]
        scenario: String,
        /// Comma-separated subset, e.g. rr,lc,klb.
        #[arg(long, value_delimiter = ',')]
        policy: Vec<Policy>,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Per-DIP exploration results and curve-fit fidelity.
    ExploreCurve {
        #[arg(default_value = "pool30")]
        scenario: String,
        #[command(flatten)]
        flags: RunFlags,
    },
    /// Exact-solver wall time by pool size.
    IlpBench {
        #[arg(long, value_delimiter = ',', default_value = "10,50,100,500")]
        dips: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-step against one-shot solve on the same instances.
    MultistepAccuracy {
        #[arg(long, default_value_t = 100)]
        dips: usize,
        #[arg(long, default_value_t = 10)]
        points: usize,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        resolution: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run the controller on a run directory's store log and check its decisions.
    Replay { dir: PathBuf },
    /// Recompute a run directory's summary from its CSVs and diff it.
    Verify { dir: PathBuf },
    /// List presets, or print one as TOML.
    Presets { name: Option<String> },
}

fn load(name: &str, flags: &RunFlags) -> Result<Scenario> {
    let mut sc = Scenario::resolve(name).with_context(|| format!("loading scenario {name}"))?;
    if let Some(s) = flags.seed {
        sc.seed = s;
    }
    if let Some(d) = flags.duration {
        sc.duration = d;
        sc.warmup = sc.warmup.min(d / 2.0);
        sc.events.retain(|e| e.at <= d);
    }
    sc.validate()?;
    Ok(sc)
}

fn emit(out: Option<&Path>, file: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(file), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

/// Writes a run and reports invariant breaches; returns whether it was clean.
fn finish(run: &RunOutput, dir: Option<&Path>) -> Result<bool> {
    if let Some(d) = dir {
        run.write(d)?;
    }
    let bad = run.violations();
    for v in &bad {
        log::error!("{}: {v}", run.summary.scenario);
    }
    Ok(bad.is_empty())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<bool> {
    match Cli::parse().cmd {
        Cmd::Run { scenarios, policy, flags } => {
            let mut scs = Vec::new();
            for name in &scenarios {
                let mut sc = load(name, &flags)?;
                if let Some(p) = policy {
                    sc.policy = p;
                }
                scs.push(sc);
            }
            let runs = par_map(&scs, flags.jobs, run_scenario);
            let mut ok = true;
            let many = scs.len() > 1;
            for (sc, run) in scs.iter().zip(runs) {
                let run = run.with_context(|| format!("running {}", sc.name))?;
                let dir = flags.out.as_ref().map(|o| if many { o.join(&sc.name) } else { o.clone() });
                ok &= finish(&run, dir.as_deref())?;
                print!("{}", run.summary_csv());
            }
            Ok(ok)
        }
        Cmd::ComparePolicies { scenario, policy, flags } => {
            let sc = load(&scenario, &flags)?;
            let policies = if policy.is_empty() { COMPARE_POLICIES.to_vec() } else { policy };
            let runs = compare_policies(&sc, &policies, flags.jobs)?;
            let mut ok = true;
            for r in &runs {
                let dir = flags.out.as_ref().map(|o| o.join(&r.summary.policy));
                ok &= finish(r, dir.as_deref())?;
            }
            emit(flags.out.as_deref(), "compare.csv", &compare_csv(&runs))?;
            Ok(ok)
        }
        Cmd::ExploreCurve { scenario, flags } => {
            let mut sc = load(&scenario, &flags)?;
            sc.policy = Policy::Klb;
            let run = run_scenario(&sc)?;
            let ok = finish(&run, flags.out.as_ref().map(|o| o.join("run")).as_deref())?;
            emit(flags.out.as_deref(), "explore_curve.csv", &explore_report_csv(&explore_report(&run)?))?;
            let mut s = String::from("model,k,iterations,w_max,samples,fit_samples,a0,a1,a2,coeff_rel_err,predict_rel_err\n");
            for model in [LatencyModel::Quadratic { q1: 1.0, q2: 4.0 }, LatencyModel::Mm1] {
                for k in [2.0, 5.0, 10.0, 20.0, 40.0] {
                    let quad = matches!(model, LatencyModel::Quadratic { .. });
                    let probe = ProbeConfig { noise_frac: if quad { 0.0 } else { sc.probe.noise_frac }, ..sc.probe };
                    let mut dip = SyntheticDip::new(model, k, probe, sc.seed);
                    let start = Resolution::DEFAULT.quantize(1.0 / sc.dip_count() as f64)?;
                    let max_fit = if quad { 5 } else { usize::MAX };
                    let r = single_dip_fidelity(&mut dip, start, &ExploreConfig::default(), max_fit)?;
                    s.push_str(&format!(
                        "{},{k},{},{},{},{},{},{},{},{},{}\n",
                        r.model, r.iterations, r.w_max, r.samples, r.fit_samples, r.coeffs[0], r.coeffs[1],
                        r.coeffs[2], r.coeff_rel_err.map(|e| e.to_string()).unwrap_or_default(), r.predict_rel_err
                    ));
                }
            }
            emit(flags.out.as_deref(), "fit_fidelity.csv", &s)?;
            for d in drain_estimates(&run) {
                log::info!("drain estimate {d} s");
            }
            Ok(ok)
        }
        Cmd::IlpBench { dips, points, repeats, seed, out } => {
            emit(out.as_deref(), "ilp_bench.csv", &bench_csv(&ilp_bench(&dips, points, repeats, seed)?))?;
            Ok(true)
        }
        Cmd::MultistepAccuracy { dips, points, seeds, resolution, out } => {
            let res = Resolution::new(resolution)?;
            let seeds: Vec<u64> = (1..=seeds).collect();
            emit(out.as_deref(), "multistep_accuracy.csv", &accuracy_csv(&multistep_accuracy(dips, points, &seeds, res)?))?;
            Ok(true)
        }
        Cmd::Replay { dir } => match replay_dir(&dir) {
            Ok(r) => {
                println!(
                    "replayed {} ticks, {} decisions{}",
                    r.ticks,
                    r.decisions,
                    if r.truncated { " (log truncated)" } else { "" }
                );
                Ok(true)
            }
            Err(e @ klb_core::error::Error::ReplayDivergence { .. }) => {
                println!("{e}");
                Ok(false)
            }
            Err(e) => Err(e.into()),
        },
        Cmd::Verify { dir } => {
            let diffs = verify_dir(&dir)?;
            for m in &diffs {
                println!("{}: reported {} recomputed {}", m.field, m.reported, m.recomputed);
            }
            if diffs.is_empty() {
                println!("summary matches");
            }
            Ok(diffs.is_empty())
        }
        Cmd::Presets { name } => {
            match name {
                Some(n) => {
                    let Some(sc) = klb_core::scenario::preset(&n) else {
                        bail!("unknown preset {n}; known: {}", PRESETS.join(", "));
                    };
                    print!("{}", sc.to_toml()?);
                }
                None => PRESETS.iter().for_each(|p| println!("{p}")),
            }
            Ok(true)
        }
    }
}
