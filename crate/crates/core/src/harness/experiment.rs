//! One experiment per call: flow, diagnostics and artifacts on disk.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::envs::build_env;
use crate::error::{MeanflowError, Result};
use crate::features::FeatureMap;
use crate::flow::diagnostics::{
    estimate_lipschitz, fit_decay, DecayFit, DecayOptions, LambdaReport, LipschitzEstimate, LipschitzOptions,
};
use crate::flow::{energy_residual, run_from, FlowConfig, FlowTrace, GradientFault, Objective, StepRecord};
use crate::metrics::{violation_probability, violation_rate, w2, ViolationRate};
use crate::policy::{EnsembleFile, ParticleEnsemble, PolicyEval};
use crate::regularizers::ParamGradMode;
use crate::safety_mdp::{AugmentedMdp, BaseMdp, MdpFile};
use crate::value::{dp_optimal, evaluate_policy, ScheduleStage};

pub const TRACE_SCHEMA: &str = "meanflow.trace.v1";
pub const SUMMARY_SCHEMA: &str = "meanflow.summary.v1";
/// per-step slack allowed by the descent check
pub const DESCENT_TOLERANCE: f64 = 1e-10;
/// the descent check requires `h <= STEP_FACTOR / L`
pub const STEP_FACTOR: f64 = 0.5;

/// A validated config with its model and feature map built.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub hash: String,
    pub base: BaseMdp,
    pub mdp: AugmentedMdp,
    pub flow: FlowConfig,
    pub features: Box<dyn FeatureMap>,
}

impl Prepared {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let base = build_env(&config.env)?;
        let mdp = base.augment()?;
        let flow = config.flow_config(mdp.n_states(), mdp.n_actions());
        let features = flow.features.build(mdp.n_states(), mdp.n_actions(), flow.dim)?;
        Ok(Self { hash: config.hash(), config: config.clone(), base, mdp, flow, features })
    }

    pub fn objective(&self, fault: GradientFault) -> Result<Objective<'_>> {
        let obj = Objective::new(&self.mdp, self.features.as_ref(), self.flow.reward_regularizer, &self.flow.param)?
            .with_fast_path(self.flow.entropy_fast_path)?
            .with_fault(fault);
        Ok(if self.flow.include_value { obj } else { obj.without_value() })
    }

    pub fn initial_ensemble(&self, obj: &Objective<'_>, seed: u64) -> ParticleEnsemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        obj.prior().sample(self.flow.n_particles, &mut rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub measured: f64,
    pub threshold: f64,
    pub detail: String,
}

impl Verdict {
    pub fn new(name: &str, passed: bool, measured: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, measured, threshold, detail: detail.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub n: usize,
    pub records: usize,
    pub first_objective: f64,
    pub last_objective: f64,
    pub best_objective: f64,
    /// largest per-step increase of the objective
    pub worst_increase: f64,
    pub energy_residual: Option<f64>,
    /// `-V` of the stage's final policy, untruncated and unregularized
    pub final_neg_value_plain: Option<f64>,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpComparison {
    pub optimum: f64,
    pub policy_value: f64,
    /// `(optimum - policy_value) / |optimum|`
    pub relative_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestartComparison {
    pub seed: u64,
    pub w2_between_finals: f64,
    pub objective_difference: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub n_base_states: usize,
    pub n_states: usize,
    pub n_actions: usize,
    pub dim: usize,
    pub h: f64,
    pub l_path: Option<f64>,
    pub stages: Vec<StageSummary>,
    pub final_objective: Option<f64>,
    pub lipschitz: Option<LipschitzEstimate>,
    pub lambda_report: Option<LambdaReport>,
    pub decay: Option<DecayFit>,
    pub violation_rate: Option<ViolationRate>,
    pub violation_prob_grid: Option<f64>,
    pub dp: Option<DpComparison>,
    pub restart: Option<RestartComparison>,
    pub coverage_warnings: usize,
    pub verdicts: Vec<Verdict>,
    pub aborted: Option<String>,
    pub wall_time_s: f64,
}

pub struct RunOutcome {
    pub summary: Summary,
    pub trace: FlowTrace,
    pub final_policy: PolicyEval,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    schema: &'static str,
    config_hash: &'a str,
    seed: u64,
    #[serde(flatten)]
    record: &'a StepRecord,
}

#[derive(Deserialize)]
struct TraceLineOwned {
    schema: String,
    #[serde(flatten)]
    record: StepRecord,
}

/// Parse a trace file back into records.
pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let parsed: TraceLineOwned = serde_json::from_str(line)?;
        if parsed.schema != TRACE_SCHEMA {
            return Err(MeanflowError::InvalidModel(format!("line {}: unknown trace schema {}", k + 1, parsed.schema)));
        }
        out.push(parsed.record);
    }
    Ok(out)
}

/// Split records at stage changes.
pub fn split_stages(records: &[StepRecord]) -> Vec<&[StepRecord]> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=records.len() {
        if i == records.len() || records[i].stage != records[start].stage {
            out.push(&records[start..i]);
            start = i;
        }
    }
    out
}

/// Largest per-step objective increase within any stage.
pub fn worst_increase(records: &[StepRecord]) -> f64 {
    split_stages(records)
        .iter()
        .flat_map(|st| st.windows(2).map(|w| w[1].objective - w[0].objective))
        .fold(f64::NEG_INFINITY, f64::max)
        .max(-f64::MAX)
}

/// Verdicts that depend on the trace alone.
pub fn trace_verdicts(records: &[StepRecord], h: f64) -> Vec<Verdict> {
    let mut v = Vec::new();
    let worst = worst_increase(records);
    v.push(Verdict::new(
        "monotone_descent",
        worst <= DESCENT_TOLERANCE,
        worst,
        DESCENT_TOLERANCE,
        "largest per-step increase of J within a stage",
    ));
    let stages = split_stages(records);
    if let [st] = stages.as_slice() {
        if let Ok(r) = energy_residual(st, h) {
            v.push(Verdict::new("energy_residual", r <= 0.1, r, 0.1, "|dJ + h sum |grad J|^2| / |dJ|"));
        }
    }
    v
}

struct Artifacts {
    dir: PathBuf,
    trace: BufWriter<File>,
}

fn header(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

fn write_plots(dir: &Path, hash: &str, seed: u64, records: &[StepRecord], j_star: f64, w2_final: &[f64]) -> Result<()> {
    let head = header(hash, seed);
    let mut obj = format!("{head}step\tt\tstage\tobjective\tneg_value\tdivergence\tgrad_norm2\n");
    let mut gap = format!("{head}step\tt\tstage\tlog10_gap\n");
    let mut dist = format!("{head}step\tt\tstage\tw2_init\tw2_final\n");
    for (i, r) in records.iter().enumerate() {
        obj += &format!(
            "{}\t{}\t{}\t{:e}\t{:e}\t{:e}\t{:e}\n",
            r.step, r.t, r.stage, r.objective, r.neg_value, r.divergence, r.grad_norm2
        );
        let g = r.objective - j_star;
        gap += &format!(
            "{}\t{}\t{}\t{}\n",
            r.step,
            r.t,
            r.stage,
            if g > 0.0 { format!("{:.6}", g.log10()) } else { "nan".into() }
        );
        let opt = |x: Option<f64>| x.map_or("nan".to_string(), |v| format!("{v:e}"));
        dist += &format!("{}\t{}\t{}\t{}\t{}\n", r.step, r.t, r.stage, opt(r.w2_init), opt(w2_final.get(i).copied()));
    }
    let mut stages = format!("{head}stage\tfirst_index\tfirst_step\tt\tm\teps\tkappa\tsigma\n");
    for st in split_stages(records) {
        let r = &st[0];
        stages +=
            &format!("{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n", r.stage, r.index, r.step, r.t, r.m, r.eps, r.kappa, r.sigma);
    }
    write_text(&dir.join("plot_objective.tsv"), &obj)?;
    write_text(&dir.join("plot_log_gap.tsv"), &gap)?;
    write_text(&dir.join("plot_w2.tsv"), &dist)?;
    write_text(&dir.join("plot_stages.tsv"), &stages)
}

fn write_summary(dir: &Path, summary: &Summary) -> Result<()> {
    write_text(&dir.join("summary.json"), &(serde_json::to_string_pretty(summary)? + "\n"))
}

fn write_ensemble(dir: &Path, name: &str, ens: &ParticleEnsemble, key: &str, seed: u64, hash: &str) -> Result<()> {
    let file = EnsembleFile::new(ens, key, seed, hash);
    write_text(&dir.join(name), &(serde_json::to_string(&file)? + "\n"))
}

/// The base model as a loadable model file, stamped with hash and seed.
fn write_model(dir: &Path, base: &BaseMdp, hash: &str, seed: u64) -> Result<()> {
    let mut v = serde_json::to_value(MdpFile::from_mdp(base))?;
    if let Some(obj) = v.as_object_mut() {
        obj.insert("config_hash".into(), hash.into());
        obj.insert("seed".into(), seed.into());
    }
    write_text(&dir.join("model.json"), &(serde_json::to_string_pretty(&v)? + "\n"))
}

/// Run a validated experiment. With `out` set, the trace is streamed to
/// `trace.jsonl` and the summary, plot data and final ensemble are written
/// next to it; an aborted run still leaves its partial trace and a summary.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>, fault: GradientFault) -> Result<RunOutcome> {
    let started = Instant::now();
    let prep = Prepared::new(config)?;
    let obj = prep.objective(fault)?;
    let seed = config.seed;
    let hash = prep.hash.clone();

    let mut artifacts = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_model(dir, &prep.base, &hash, seed)?;
            Some(Artifacts { dir: dir.to_path_buf(), trace: BufWriter::new(File::create(dir.join("trace.jsonl"))?) })
        }
        None => None,
    };
    let initial = prep.initial_ensemble(&obj, seed);
    let mut stage_clock = Instant::now();
    let mut stage_times: Vec<f64> = Vec::new();
    let mut current_stage = None;
    let result = {
        let mut sink = |rec: &StepRecord| -> Result<()> {
            if current_stage != Some(rec.stage) {
                if current_stage.is_some() {
                    stage_times.push(stage_clock.elapsed().as_secs_f64());
                    stage_clock = Instant::now();
                }
                current_stage = Some(rec.stage);
            }
            if let Some(a) = artifacts.as_mut() {
                let line = TraceLine { schema: TRACE_SCHEMA, config_hash: &hash, seed, record: rec };
                serde_json::to_writer(&mut a.trace, &line)?;
                a.trace.write_all(b"\n")?;
            }
            Ok(())
        };
        run_from(&prep.flow, &obj, initial, &mut sink)
    };
    stage_times.push(stage_clock.elapsed().as_secs_f64());
    if let Some(a) = artifacts.as_mut() {
        a.trace.flush()?;
    }
    let trace = match result {
        Ok(t) => t,
        Err(e) => {
            if let Some(a) = &artifacts {
                let summary = Summary {
                    schema: SUMMARY_SCHEMA.into(),
                    config_hash: hash.clone(),
                    seed,
                    config: config.clone(),
                    n_base_states: prep.base.n_states,
                    n_states: prep.mdp.n_states(),
                    n_actions: prep.mdp.n_actions(),
                    dim: prep.flow.dim,
                    h: prep.flow.h,
                    l_path: None,
                    stages: vec![],
                    final_objective: None,
                    lipschitz: None,
                    lambda_report: None,
                    decay: None,
                    violation_rate: None,
                    violation_prob_grid: None,
                    dp: None,
                    restart: None,
                    coverage_warnings: 0,
                    verdicts: vec![],
                    aborted: Some(e.to_string()),
                    wall_time_s: started.elapsed().as_secs_f64(),
                };
                write_summary(&a.dir, &summary)?;
            }
            return Err(e);
        }
    };

    let stages = prep.flow.stages.clone();
    let last_stage = *stages.last().expect("validated schedule has a stage");
    let plain = ScheduleStage::plain();
    let reward = prep.flow.reward_regularizer;

    let mut stage_summaries = Vec::new();
    for (k, st) in stages.iter().enumerate() {
        let recs = trace.stage_records(k);
        let final_neg_value_plain = if prep.flow.include_value {
            let pol = PolicyEval::compute(&trace.stage_finals[k], prep.features.as_ref(), &prep.mdp)?;
            Some(-evaluate_policy(&pol, &prep.mdp, &plain, reward)?.value)
        } else {
            None
        };
        stage_summaries.push(StageSummary {
            n: st.n,
            records: recs.len(),
            first_objective: recs[0].objective,
            last_objective: recs[recs.len() - 1].objective,
            best_objective: recs.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min),
            worst_increase: worst_increase(recs),
            energy_residual: energy_residual(recs, prep.flow.h).ok(),
            final_neg_value_plain,
            wall_time_s: stage_times.get(k).copied().unwrap_or(0.0),
        });
    }

    let final_snap = obj.snapshot(&trace.final_ensemble, &last_stage)?;
    let final_policy = final_snap.policy().clone();
    let diag = &config.diagnostics;

    let lipschitz = if prep.flow.include_value && diag.lipschitz_probes > 0 {
        let opts = LipschitzOptions { probes: diag.lipschitz_probes, box_half_width: diag.box_half_width, seed };
        Some(estimate_lipschitz(&obj, &trace.final_ensemble, &last_stage, &opts)?)
    } else {
        None
    };

    // distance of every recorded ensemble of the last stage to the final one
    let last_k = stages.len() - 1;
    let last_recs = trace.stage_records(last_k);
    let mut w2_final = vec![f64::NAN; trace.records.len()];
    if !trace.snapshots.is_empty() {
        for i in trace.stage_starts[last_k]..trace.records.len() {
            w2_final[i] = w2(&trace.snapshots[i], &trace.final_ensemble)?;
        }
    }
    let decay = if diag.decay_fit {
        let times: Vec<f64> = last_recs.iter().map(|r| r.t).collect();
        let js: Vec<f64> = last_recs.iter().map(|r| r.objective).collect();
        let ws: Vec<f64> = w2_final[trace.stage_starts[last_k]..].to_vec();
        let opts =
            DecayOptions { burn_in: diag.decay_burn_in, slack: diag.decay_slack, gap_floor: diag.decay_gap_floor };
        fit_decay(&times, &js, if trace.snapshots.is_empty() { &[] } else { &ws }, &opts).ok()
    } else {
        None
    };
    let min_l_h_prime = match obj.mode() {
        ParamGradMode::Quadrature => final_snap.min_l_h_prime().unwrap_or(1.0),
        ParamGradMode::Blob => 1.0,
    };
    let lambda_report = lipschitz.map(|l| {
        LambdaReport::new(last_stage.kappa, obj.prior().lambda_u(), min_l_h_prime, l.c_v, l.k_v, decay.as_ref())
    });

    let (violation, violation_grid) = if prep.flow.include_value {
        let rate = if diag.violation_rollouts > 0 {
            Some(violation_rate(
                &final_policy,
                &prep.mdp,
                diag.violation_rollouts,
                diag.violation_rollout_horizon,
                seed,
            )?)
        } else {
            None
        };
        (rate, Some(violation_probability(&final_policy, &prep.mdp, diag.violation_rollout_horizon)))
    } else {
        (None, None)
    };

    let dp = if diag.compare_dp && prep.flow.include_value {
        let opt = dp_optimal(&prep.mdp, f64::INFINITY)?.value;
        let val = evaluate_policy(&final_policy, &prep.mdp, &plain, reward)?.value;
        Some(DpComparison { optimum: opt, policy_value: val, relative_gap: (opt - val) / opt.abs() })
    } else {
        None
    };

    let restart = match diag.restart_seed {
        Some(rs) => {
            let init = prep.initial_ensemble(&obj, rs);
            let cfg = FlowConfig { keep_snapshots: false, w2_every: 0, violation_horizon: 0, ..prep.flow.clone() };
            let other = run_from(&cfg, &obj, init, &mut |_| Ok(()))?;
            let j_other = obj.snapshot(&other.final_ensemble, &last_stage)?.objective();
            Some(RestartComparison {
                seed: rs,
                w2_between_finals: w2(&trace.final_ensemble, &other.final_ensemble)?,
                objective_difference: (j_other - final_snap.objective()).abs(),
            })
        }
        None => None,
    };

    let mut verdicts = trace_verdicts(&trace.records, prep.flow.h);
    verdicts.push(Verdict::new(
        "step_bound",
        prep.flow.h * trace.l_path <= STEP_FACTOR,
        prep.flow.h * trace.l_path,
        STEP_FACTOR,
        "h times the largest observed gradient Lipschitz ratio along the path",
    ));
    if let Some(d) = &decay {
        verdicts.push(Verdict::new("decay_fit_r2_objective", d.r2_j >= 0.95, d.r2_j, 0.95, "r^2 of log(J - J*)"));
        if let (Some(r2), Some(rw)) = (d.r2_w2, d.rate_w2) {
            verdicts.push(Verdict::new("decay_fit_r2_w2", r2 >= 0.95, r2, 0.95, "r^2 of log W2(mu_t, mu_final)"));
            let ratio = d.rate_j / (2.0 * rw);
            verdicts.push(Verdict::new(
                "rate_consistency",
                (ratio - 1.0).abs() <= 0.3,
                ratio,
                0.3,
                "rate_J / (2 rate_W2), should be within 30% of 1",
            ));
        }
    }
    if let Some(v) = &violation {
        verdicts.push(Verdict::new("violation_rate", v.rate <= 1e-3, v.rate, 1e-3, "exact-budget rollouts"));
    }
    if let Some(d) = &dp {
        verdicts.push(Verdict::new(
            "dp_gap",
            d.relative_gap <= 0.05,
            d.relative_gap,
            0.05,
            "relative gap of -V to the optimum",
        ));
    }
    if let Some(r) = &restart {
        verdicts.push(Verdict::new(
            "restart_w2",
            r.w2_between_finals <= 0.05,
            r.w2_between_finals,
            0.05,
            "W2 between finals of two inits",
        ));
    }

    let summary = Summary {
        schema: SUMMARY_SCHEMA.into(),
        config_hash: hash.clone(),
        seed,
        config: config.clone(),
        n_base_states: prep.base.n_states,
        n_states: prep.mdp.n_states(),
        n_actions: prep.mdp.n_actions(),
        dim: prep.flow.dim,
        h: prep.flow.h,
        l_path: Some(trace.l_path),
        stages: stage_summaries,
        final_objective: Some(final_snap.objective()),
        lipschitz,
        lambda_report,
        decay,
        violation_rate: violation,
        violation_prob_grid: violation_grid,
        dp,
        restart,
        coverage_warnings: trace.coverage_warnings,
        verdicts,
        aborted: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    if let Some(a) = &artifacts {
        let j_star = decay.map_or_else(
            || trace.records.iter().map(|r| r.objective).fold(f64::INFINITY, f64::min) - config.diagnostics.decay_slack,
            |d| d.j_star,
        );
        write_plots(&a.dir, &hash, seed, &trace.records, j_star, &w2_final)?;
        write_ensemble(&a.dir, "ensemble_final.json", &trace.final_ensemble, prep.features.key(), seed, &hash)?;
        write_ensemble(&a.dir, "ensemble_init.json", &trace.initial, prep.features.key(), seed, &hash)?;
        write_summary(&a.dir, &summary)?;
    }
    Ok(RunOutcome { summary, trace, final_policy })
}
