use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use meanflow::flow::diagnostics::{estimate_lipschitz, fit_decay, DecayOptions, LipschitzOptions};
use meanflow::flow::GradientFault;
use meanflow::harness::acceptance::{run_acceptance, AcceptanceOptions};
use meanflow::harness::checks::grad_check_prepared;
use meanflow::harness::config::content_hash;
use meanflow::harness::experiment::{read_trace, trace_verdicts, Prepared};
use meanflow::harness::{load_config, run_experiment, ExperimentConfig};
use meanflow::policy::EnsembleFile;
use meanflow::safety_mdp::MdpFile;
use meanflow::value::dp_optimal;

const POLICY_TABLE_SCHEMA: &str = "meanflow.policy_table.v1";

// stdout may be a closed pipe (`meanflow run | head`); losing output is fine there
macro_rules! out {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "meanflow", version, about = "Particle gradient flows for safety-constrained mean-field policies")]
struct Cli {
    /// experiment config (a directory for `acceptance`)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// validate inputs and stop
    #[arg(long, global = true)]
    dry_run: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the flow and write trace, summary and plot data
    Run,
    /// Compare analytic gradients with finite differences
    CheckGrad {
        #[arg(long, default_value_t = 50)]
        probes: usize,
        /// flip the sign of the value gradient (exercises the check)
        #[arg(long)]
        flip_sign: bool,
    },
    /// Estimate Lipschitz and growth constants of the value gradient
    ProbeLipschitz {
        #[arg(long, default_value_t = 64)]
        probes: usize,
        /// ensemble file to probe at; defaults to a prior draw
        #[arg(long)]
        ensemble: Option<PathBuf>,
    },
    /// Fit exponential decay rates to a trace
    FitRates {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, default_value_t = 0)]
        burn_in: usize,
        #[arg(long, default_value_t = 1e-9)]
        slack: f64,
        #[arg(long, default_value_t = 1e-7)]
        gap_floor: f64,
    },
    /// Solve the barrier-augmented model exactly and export the policy table
    SolveDp {
        /// model file; otherwise the config's environment is used
        #[arg(long)]
        mdp: Option<PathBuf>,
        /// truncation level (omit for none)
        #[arg(long)]
        m: Option<f64>,
    },
    /// Run every acceptance criterion
    Acceptance,
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli.config.as_ref().context("--config PATH is required")?;
    let mut cfg = load_config(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: Option<&ExperimentConfig>) -> Option<PathBuf> {
    cli.out.clone().or_else(|| cfg.and_then(|c| c.out.as_ref().map(PathBuf::from)))
}

fn write_json(dir: Option<&Path>, name: &str, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            std::fs::write(d.join(name), text + "\n")?;
            out!("wrote {}", d.join(name).display());
        }
        None => out!("{text}"),
    }
    Ok(())
}

/// Adds `config_hash` and `seed` to a JSON object.
fn stamped(value: &impl serde::Serialize, hash: &str, seed: Option<u64>) -> Result<serde_json::Value> {
    let mut v = serde_json::to_value(value)?;
    let obj = v.as_object_mut().context("artifact is not a JSON object")?;
    obj.insert("config_hash".into(), hash.into());
    obj.insert("seed".into(), seed.into());
    Ok(v)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(v) = std::env::var("MEANFLOW_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring MEANFLOW_THREADS={v}: expected a positive integer"),
        }
    }
    match dispatch(&cli) {
        Ok(ok) => {
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<bool> {
    match &cli.cmd {
        Cmd::Run => {
            let cfg = config(cli)?;
            if cli.dry_run {
                out!("config ok (hash {})", cfg.hash());
                out!("{}", serde_json::to_string_pretty(&cfg)?);
                return Ok(true);
            }
            let out = out_dir(cli, Some(&cfg));
            let res = run_experiment(&cfg, out.as_deref(), GradientFault::None)?;
            let s = &res.summary;
            for v in &s.verdicts {
                out!(
                    "{} {}: {:e} (threshold {:e})",
                    if v.passed { "PASS" } else { "FAIL" },
                    v.name,
                    v.measured,
                    v.threshold
                );
            }
            if let Some(f) = s.final_objective {
                out!("final objective {f:.10e} after {:.1}s", s.wall_time_s);
            }
            if let Some(d) = &out {
                out!("artifacts in {}", d.display());
            }
            Ok(true)
        }
        Cmd::CheckGrad { probes, flip_sign } => {
            let cfg = config(cli)?;
            if cli.dry_run {
                out!("config ok");
                return Ok(true);
            }
            let prep = Prepared::new(&cfg)?;
            let fault = if *flip_sign { GradientFault::FlipValueSign } else { GradientFault::None };
            let check = grad_check_prepared(&prep, *probes, cfg.seed, fault)?;
            let ok = check.max_relative_error <= 1e-3;
            out!(
                "{} max relative error {:.3e} over {} probes (tolerance 1e-3)",
                if ok { "PASS" } else { "FAIL" },
                check.max_relative_error,
                check.probes.len()
            );
            write_json(
                out_dir(cli, None).as_deref(),
                "grad_check.json",
                &stamped(&check, &prep.hash, Some(cfg.seed))?,
            )?;
            Ok(ok)
        }
        Cmd::ProbeLipschitz { probes, ensemble } => {
            let cfg = config(cli)?;
            if cli.dry_run {
                out!("config ok");
                return Ok(true);
            }
            let prep = Prepared::new(&cfg)?;
            let obj = prep.objective(GradientFault::None)?;
            let ens = match ensemble {
                Some(p) => {
                    let file: EnsembleFile = serde_json::from_str(&std::fs::read_to_string(p)?)?;
                    file.into_ensemble()?
                }
                None => prep.initial_ensemble(&obj, cfg.seed),
            };
            let stage = *prep.flow.stages.last().context("empty schedule")?;
            let opts =
                LipschitzOptions { probes: *probes, box_half_width: cfg.diagnostics.box_half_width, seed: cfg.seed };
            let est = estimate_lipschitz(&obj, &ens, &stage, &opts)?;
            write_json(out_dir(cli, None).as_deref(), "lipschitz.json", &stamped(&est, &prep.hash, Some(cfg.seed))?)?;
            Ok(true)
        }
        Cmd::FitRates { trace, burn_in, slack, gap_floor } => {
            let records = read_trace(trace)?;
            if records.len() < 2 {
                bail!("trace {} has fewer than two records", trace.display());
            }
            let h = records.iter().find(|r| r.step > 0).map(|r| r.t / r.step as f64).unwrap_or(0.0);
            let last = records.last().expect("non-empty").stage;
            let stage: Vec<_> = records.iter().filter(|r| r.stage == last).collect();
            let times: Vec<f64> = stage.iter().map(|r| r.t).collect();
            let js: Vec<f64> = stage.iter().map(|r| r.objective).collect();
            let opts = DecayOptions { burn_in: *burn_in, slack: *slack, gap_floor: *gap_floor };
            let fit = fit_decay(&times, &js, &[], &opts)?;
            let verdicts = trace_verdicts(&records, h);
            let head: serde_json::Value =
                serde_json::from_str(std::fs::read_to_string(trace)?.lines().next().context("empty trace")?)?;
            let report = serde_json::json!({
                "config_hash": head["config_hash"],
                "seed": head["seed"],
                "decay": fit,
                "verdicts": verdicts,
            });
            write_json(out_dir(cli, None).as_deref(), "fit_rates.json", &report)?;
            Ok(true)
        }
        Cmd::SolveDp { mdp, m } => {
            let (base, hash, seed) = match mdp {
                Some(p) => {
                    let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    let file: MdpFile =
                        serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
                    (file.into_mdp()?, content_hash(&text), None)
                }
                None => {
                    let cfg = config(cli)?;
                    (meanflow::harness::envs::build_env(&cfg.env)?, cfg.hash(), Some(cfg.seed))
                }
            };
            let aug = base.augment()?;
            if cli.dry_run {
                out!("model ok: {} augmented states, {} actions", aug.n_states(), aug.n_actions());
                return Ok(true);
            }
            let m = m.unwrap_or(f64::INFINITY);
            let sol = dp_optimal(&aug, m)?;
            out!("optimal value {:.10e} after {} sweeps", sol.value, sol.iterations);
            let table = serde_json::json!({
                "schema": POLICY_TABLE_SCHEMA,
                "config_hash": hash,
                "seed": seed,
                "m": if m.is_finite() { Some(m) } else { None },
                "optimum": sol.value,
                "sweeps": sol.iterations,
                "rows": sol.table(&aug),
            });
            write_json(out_dir(cli, None).as_deref(), "policy_table.json", &table)?;
            Ok(true)
        }
        Cmd::Acceptance => {
            let dir = cli.config.as_ref().context("--config DIR with the acceptance configs is required")?;
            let opts = AcceptanceOptions { config_dir: dir.clone(), out: cli.out.clone(), fault: GradientFault::None };
            let report = run_acceptance(&opts)?;
            for line in report.lines() {
                out!("{line}");
            }
            Ok(report.all_passed())
        }
    }
}
