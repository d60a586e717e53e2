//! The acceptance suite: ten numbered criteria, each reported as one
//! pass/fail line with its measured values.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::checks::grad_check_prepared;
use super::config::{load_config, ExperimentConfig};
use super::experiment::{run_experiment, worst_increase, Prepared, RunOutcome, STEP_FACTOR};
use crate::error::{MeanflowError, Result};
use crate::features::{FeatureMap, RandomFourier};
use crate::flow::{energy_residual, GradientFault};
use crate::metrics::{w1, w_p_1d, w_p_assignment};
use crate::policy::{func_deriv_kernel, grad_x_func_deriv, ParticleEnsemble, PolicyEval};
use crate::regularizers::{
    divergence_h_sigma, mollified_density, Mollifier, ParamRegularizer, QuadGrid, ReferencePrior, SmoothedDivergence,
};
use crate::safety_mdp::{constraint_satisfied_by_budget, constraint_satisfied_direct, SafetySpec};

pub const GRAD_CONFIGS: [&str; 2] = ["grad_safe_resource.json", "grad_safe_chain.json"];
pub const ENERGY_CONFIG: &str = "energy_safe_chain.json";
pub const STRONG_CONFIG: &str = "safe_resource_strong.json";
pub const EPI_CHAIN_CONFIG: &str = "epi_safe_chain.json";
pub const EPI_RESOURCE_CONFIG: &str = "epi_safe_resource.json";

#[derive(Debug, Clone)]
pub struct AcceptanceOptions {
    pub config_dir: PathBuf,
    /// run artifacts go to `<out>/<run name>` when set
    pub out: Option<PathBuf>,
    pub fault: GradientFault,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub passed: bool,
    pub measured: String,
    pub runtime_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub results: Vec<CriterionResult>,
}

impl AcceptanceReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn get(&self, id: u8) -> Option<&CriterionResult> {
        self.results.iter().find(|r| r.id == id)
    }

    pub fn lines(&self) -> Vec<String> {
        self.results
            .iter()
            .map(|r| {
                format!(
                    "[{}] {:>2} {}: {} ({:.1}s)",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.id,
                    r.name,
                    r.measured,
                    r.runtime_s
                )
            })
            .collect()
    }
}

/// A finished run kept for the descent criterion.
struct RunRecord {
    label: String,
    outcome: RunOutcome,
    h: f64,
}

struct Suite<'o> {
    opts: &'o AcceptanceOptions,
    runs: Vec<RunRecord>,
    report: AcceptanceReport,
}

impl Suite<'_> {
    fn config(&self, name: &str) -> Result<ExperimentConfig> {
        let path = self.opts.config_dir.join(name);
        if !path.exists() {
            return Err(MeanflowError::InvalidModel(format!("missing acceptance config {}", path.display())));
        }
        load_config(path)
    }

    fn run(&mut self, label: &str, cfg: &ExperimentConfig) -> Result<usize> {
        let out = self.opts.out.as_ref().map(|d| d.join(label));
        let outcome = run_experiment(cfg, out.as_deref(), self.opts.fault)?;
        self.runs.push(RunRecord { label: label.into(), outcome, h: cfg.flow.h });
        Ok(self.runs.len() - 1)
    }

    fn record(&mut self, id: u8, name: &str, started: Instant, result: Result<(bool, String)>) {
        let (passed, measured) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
        self.report.results.push(CriterionResult {
            id,
            name: name.into(),
            passed,
            measured,
            runtime_s: started.elapsed().as_secs_f64(),
        });
    }
}

/// Run all criteria. Fails only when the config directory is unusable; a
/// criterion that cannot run is reported as failed.
pub fn run_acceptance(opts: &AcceptanceOptions) -> Result<AcceptanceReport> {
    let dir = &opts.config_dir;
    let has_json = std::fs::read_dir(dir)
        .map_err(|e| MeanflowError::InvalidModel(format!("cannot read config dir {}: {e}", dir.display())))?
        .filter_map(|e| e.ok())
        .any(|e| e.path().extension().is_some_and(|x| x == "json"));
    if !has_json {
        return Err(MeanflowError::InvalidModel(format!(
            "usage: acceptance needs a directory with the acceptance configs, {} has none",
            dir.display()
        )));
    }
    let mut suite = Suite { opts, runs: Vec::new(), report: AcceptanceReport::default() };

    let t = Instant::now();
    let r = criterion_gradients(&suite);
    suite.record(1, "gradient correctness", t, r);

    let t = Instant::now();
    let r = criterion_energy(&mut suite);
    suite.record(2, "energy identity", t, r);

    let t = Instant::now();
    let r = criterion_convergence(&mut suite);
    suite.record(4, "exponential convergence", t, r);

    let t = Instant::now();
    let r = criterion_epi(&mut suite);
    suite.record(5, "epi-convergence", t, r);

    let t = Instant::now();
    let r = criterion_safety(&mut suite);
    suite.record(6, "safety", t, r);

    let t = Instant::now();
    let r = criterion_descent(&suite);
    suite.record(3, "monotone descent", t, r);

    let t = Instant::now();
    suite.record(7, "policy identities", t, Ok(policy_identities(1000, 7)));
    let t = Instant::now();
    suite.record(8, "divergence oracle", t, divergence_oracle());
    let t = Instant::now();
    suite.record(9, "transport metrics", t, transport_identities(100, 9));
    let t = Instant::now();
    suite.record(10, "budget equivalence", t, Ok(budget_equivalence(1000, 10)));

    suite.report.results.sort_by_key(|r| r.id);
    Ok(suite.report)
}

fn criterion_gradients(suite: &Suite) -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for name in GRAD_CONFIGS {
        let cfg = suite.config(name)?;
        let prep = Prepared::new(&cfg)?;
        let check = grad_check_prepared(&prep, 50, cfg.seed, suite.opts.fault)?;
        worst = worst.max(check.max_relative_error);
        parts.push(format!(
            "{}: max rel err {:.2e} on {} probes",
            cfg.env.key,
            check.max_relative_error,
            check.probes.len()
        ));
    }
    Ok((worst <= 1e-3, format!("{} (tol 1e-3)", parts.join("; "))))
}

fn criterion_energy(suite: &mut Suite) -> Result<(bool, String)> {
    let base = suite.config(ENERGY_CONFIG)?;
    if base.schedule.stages().len() != 1 {
        return Err(MeanflowError::InvalidModel("energy config must have a single stage".into()));
    }
    let mut residuals = Vec::new();
    for k in 0..3u32 {
        let mut cfg = base.clone();
        cfg.flow.h = base.flow.h / 2f64.powi(k as i32);
        cfg.flow.steps_per_stage = base.flow.steps_per_stage * 2usize.pow(k);
        let idx = suite.run(&format!("energy_h{k}"), &cfg)?;
        residuals.push(energy_residual(&suite.runs[idx].outcome.trace.records, cfg.flow.h)?);
    }
    let orders: Vec<f64> = residuals.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let passed = residuals[0] <= 0.1 && orders.iter().all(|&o| o >= 0.8);
    Ok((
        passed,
        format!(
            "residuals {:.3e}, {:.3e}, {:.3e} at h = {}, h/2, h/4; observed orders {:.2}, {:.2} (need <= 0.1 and >= 0.8)",
            residuals[0], residuals[1], residuals[2], base.flow.h, orders[0], orders[1]
        ),
    ))
}

fn criterion_descent(suite: &Suite) -> Result<(bool, String)> {
    if suite.runs.is_empty() {
        return Err(MeanflowError::Indeterminate("no experiment ran".into()));
    }
    let mut passed = true;
    let mut parts = Vec::new();
    for run in &suite.runs {
        let worst = worst_increase(&run.outcome.trace.records);
        let hl = run.h * run.outcome.trace.l_path;
        let ok = worst <= 1e-10 && hl <= STEP_FACTOR;
        passed &= ok;
        parts.push(format!("{} {:+.1e}/hL={:.2}{}", run.label, worst, hl, if ok { "" } else { "!" }));
    }
    Ok((passed, format!("max step increase / h*L per run: {} (need <= 1e-10 and hL <= 0.5)", parts.join(", "))))
}

fn criterion_convergence(suite: &mut Suite) -> Result<(bool, String)> {
    let cfg = suite.config(STRONG_CONFIG)?;
    let idx = suite.run("strong", &cfg)?;
    let s = &suite.runs[idx].outcome.summary;
    let lambda_j = s.lambda_report.map(|l| l.lambda_j).unwrap_or(f64::NAN);
    let d = s.decay.ok_or_else(|| MeanflowError::Indeterminate("decay fit unavailable".into()))?;
    let (r2w, rw) = (d.r2_w2.unwrap_or(f64::NAN), d.rate_w2.unwrap_or(f64::NAN));
    let ratio = d.rate_j / (2.0 * rw);
    let restart = s.restart.as_ref().map(|r| r.w2_between_finals).unwrap_or(f64::NAN);
    let passed = lambda_j > 0.0 && d.r2_j >= 0.95 && r2w >= 0.95 && (ratio - 1.0).abs() <= 0.3 && restart <= 0.05;
    Ok((
        passed,
        format!(
            "lambda_J {lambda_j:.3}; r2 J {:.4}, r2 W2 {r2w:.4}; rate_J {:.3}, rate_W2 {rw:.3}, rate_J/(2 rate_W2) {ratio:.3}; W2 between inits {restart:.2e}",
            d.r2_j, d.rate_j
        ),
    ))
}

fn criterion_epi(suite: &mut Suite) -> Result<(bool, String)> {
    let mut cfg = suite.config(EPI_CHAIN_CONFIG)?;
    cfg.diagnostics.compare_dp = true;
    let idx = suite.run("epi_safe_chain", &cfg)?;
    let s = &suite.runs[idx].outcome.summary;
    let dp = s.dp.as_ref().ok_or_else(|| MeanflowError::Indeterminate("no dp comparison".into()))?;
    let plain: Vec<f64> = s.stages.iter().filter_map(|st| st.final_neg_value_plain).collect();
    let improving = plain.windows(2).all(|w| w[1] <= w[0] + 1e-9 * (1.0 + w[0].abs()));
    let passed = dp.relative_gap <= 0.05 && improving && plain.len() == s.stages.len();
    Ok((
        passed,
        format!(
            "gap to optimum {:.3}% (optimum {:.4}, policy {:.4}); -V0 at stage ends [{}]",
            100.0 * dp.relative_gap,
            dp.optimum,
            dp.policy_value,
            plain.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn criterion_safety(suite: &mut Suite) -> Result<(bool, String)> {
    let chain_idx = match suite.runs.iter().position(|r| r.label == "epi_safe_chain") {
        Some(i) => i,
        None => {
            let cfg = suite.config(EPI_CHAIN_CONFIG)?;
            suite.run("epi_safe_chain", &cfg)?
        }
    };
    let res_cfg = suite.config(EPI_RESOURCE_CONFIG)?;
    let res_idx = suite.run("epi_safe_resource", &res_cfg)?;
    let mut off = suite.config(EPI_CHAIN_CONFIG)?;
    off.env.overrides.barrier_c = Some(0.0);
    let off_idx = suite.run("epi_safe_chain_no_barrier", &off)?;
    let rate = |i: usize| suite.runs[i].outcome.summary.violation_rate.map(|v| v.rate).unwrap_or(f64::NAN);
    let (chain, res, no_barrier) = (rate(chain_idx), rate(res_idx), rate(off_idx));
    let n = suite.runs[chain_idx].outcome.summary.violation_rate.map_or(0, |v| v.n_rollouts);
    let passed = chain <= 1e-3 && res <= 1e-3 && no_barrier > chain;
    Ok((
        passed,
        format!("violation rate over {n} rollouts: chain {chain:.2e}, resource {res:.2e} (need <= 1e-3); chain without barrier {no_barrier:.2e}"),
    ))
}

/// Normalization, density bounds, zero-mass functional derivative, the
/// gradient-kernel bound and the Lipschitz-in-measure ratio on random draws.
pub fn policy_identities(draws: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut norm_err, mut bound_viol, mut zero_mass, mut grad_ratio, mut lip_ratio) =
        (0.0f64, 0usize, 0.0f64, 0.0f64, 0.0f64);
    for k in 0..draws {
        let ns = rng.random_range(1..4);
        let na = rng.random_range(1..5);
        let d = rng.random_range(1..4);
        let n = rng.random_range(1..9);
        let bound = rng.random_range(0.1..3.0);
        let f = RandomFourier::new(ns, na, d, bound, rng.random_range(0.2..2.0), k as u64);
        let rho: Vec<f64> = (0..na).map(|_| rng.random_range(0.2..2.0)).collect();
        let scale = rng.random_range(0.1..3.0);
        let ens =
            ParticleEnsemble::new(n, d, (0..n * d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
                .expect("finite coordinates");
        let pol = PolicyEval::from_parts(&ens, &f, &rho).expect("bounded features");
        let rho_a: f64 = rho.iter().sum();
        let (lo, hi) = ((-2.0 * bound).exp() / rho_a, (2.0 * bound).exp() / rho_a);
        let x: Vec<f64> = (0..d).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        for s in 0..ns {
            norm_err = norm_err.max((pol.masses(s).iter().sum::<f64>() - 1.0).abs());
            for a in 0..na {
                let z = pol.dens(s, a);
                if z < lo * (1.0 - 1e-12) || z > hi * (1.0 + 1e-12) {
                    bound_viol += 1;
                }
            }
            let kern = func_deriv_kernel(&pol, &f, s, &x);
            zero_mass = zero_mass.max(kern.iter().zip(&rho).map(|(v, r)| v * r).sum::<f64>().abs());
            let g = grad_x_func_deriv(&pol, &f, s, &x);
            for a in 0..na {
                let gn = g[a * d..(a + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt();
                grad_ratio = grad_ratio.max(gn / (2.0 * f.grad_sup_norm() * pol.dens(s, a)));
            }
        }
        let moved = ParticleEnsemble::new(
            n,
            d,
            ens.coords().iter().map(|c| c + 0.05 * rng.sample::<f64, _>(StandardNormal)).collect(),
        )
        .expect("finite coordinates");
        let pol2 = PolicyEval::from_parts(&moved, &f, &rho).expect("bounded features");
        let dist = w1(&ens, &moved).expect("same shapes");
        if dist > 0.0 {
            lip_ratio = lip_ratio.max(pol.tv_distance(&pol2) / (dist * 2.0 * f.norm(1)));
        }
    }
    let passed =
        norm_err <= 1e-10 && bound_viol == 0 && zero_mass <= 1e-12 && grad_ratio <= 1.0 + 1e-12 && lip_ratio <= 1.0;
    (
        passed,
        format!(
            "{draws} draws: normalization err {norm_err:.1e}, density bound violations {bound_viol}, zero-mass err {zero_mass:.1e}, \
             |grad kernel|/(2|grad psi| dens) max {grad_ratio:.3}, TV/(2|psi|_1 W1) max {lip_ratio:.3}"
        ),
    )
}

/// Shifted-Gaussian KL, the m = 2 L^2 identity and quadrature gradients.
pub fn divergence_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shifted = Normal::new(1.0, 1.0).expect("valid normal");
    let ens = ParticleEnsemble::new(8192, 1, (0..8192).map(|_| shifted.sample(&mut rng)).collect())?;
    let prior1 = ReferencePrior::gaussian(1);
    let moll = Mollifier::new(0.02)?;
    let grid = QuadGrid::covering(&ens, &moll, 8.0, 2.0)?;
    let kl = divergence_h_sigma(&ens, ParamRegularizer::Kl, &prior1, moll, &grid)?.value();

    // m = 2: value equals (int nu^2 / gamma - 1) / 2
    let small =
        ParticleEnsemble::new(64, 1, (0..64).map(|_| 0.3 + 0.8 * rng.sample::<f64, _>(StandardNormal)).collect())?;
    let moll2 = Mollifier::new(0.1)?;
    let grid2 = QuadGrid::covering(&small, &moll2, 8.0, 2.0)?;
    let m2 = divergence_h_sigma(&small, ParamRegularizer::MEntropy { m: 2.0 }, &prior1, moll2, &grid2)?.value();
    let l2: f64 = grid2
        .points()
        .iter()
        .map(|p| {
            let nu = mollified_density(&small, &moll2, p).0;
            nu * nu / (-prior1.u(p)).exp()
        })
        .sum::<f64>()
        * grid2.cell_volume();
    let l2_err = (m2 - 0.5 * (l2 - 1.0)).abs();

    let prior2 = ReferencePrior::gaussian(2);
    let mut grad_err: f64 = 0.0;
    for (reg, s) in [(ParamRegularizer::Kl, 1u64), (ParamRegularizer::MEntropy { m: 2.0 }, 2)] {
        let mut r = ChaCha8Rng::seed_from_u64(s);
        let e =
            ParticleEnsemble::new(12, 2, (0..24).map(|_| 0.3 + 0.8 * r.sample::<f64, _>(StandardNormal)).collect())?;
        let mo = Mollifier::new(0.2)?;
        let gr = QuadGrid::covering(&e, &mo, 8.0, 2.0)?;
        let div = SmoothedDivergence::new(&e, reg, &prior2, mo, &gr)?;
        for k in [0, 5, 11] {
            let g = div.grad(e.particle(k));
            for j in 0..2 {
                let t = 1e-4;
                let val = |sgn: f64| -> Result<f64> {
                    let mut moved = e.clone();
                    moved.particle_mut(k)[j] += sgn * t;
                    Ok(SmoothedDivergence::new(&moved, reg, &prior2, mo, &gr)?.value())
                };
                let fd = (val(1.0)? - val(-1.0)?) / (2.0 * t);
                let an = g[j] / e.len() as f64;
                grad_err = grad_err.max((fd - an).abs() / an.abs().max(1e-8));
            }
        }
    }
    let passed = (kl - 0.5).abs() <= 0.1 && l2_err <= 1e-10 && grad_err <= 1e-3;
    Ok((
        passed,
        format!("KL(N(1,1) | N(0,1)) = {kl:.4} (0.5 +- 0.1); m=2 vs L2 identity err {l2_err:.1e}; gradient rel err {grad_err:.1e}"),
    ))
}

fn brute_force_wp(xs: &ParticleEnsemble, ys: &ParticleEnsemble, p: f64) -> f64 {
    let n = xs.len();
    let cost = |i: usize, j: usize| -> f64 {
        xs.particle(i).iter().zip(ys.particle(j)).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt().powf(p)
    };
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    // Heap's algorithm
    let mut c = vec![0usize; n];
    best = best.min(perm.iter().enumerate().map(|(i, &j)| cost(i, j)).sum());
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            best = best.min(perm.iter().enumerate().map(|(i, &j)| cost(i, j)).sum());
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    (best / n as f64).powf(1.0 / p)
}

/// Assignment solver against brute force, the 1-D closed form and the
/// translation / scaling identities.
pub fn transport_identities(trials: usize, seed: u64) -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut brute, mut one_d, mut affine): (f64, f64, f64) = (0.0, 0.0, 0.0);
    let cloud = |n: usize, d: usize, rng: &mut ChaCha8Rng| {
        ParticleEnsemble::new(n, d, (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
    };
    for t in 0..trials {
        let n = 1 + t % 6;
        let d = rng.random_range(1..4);
        let p = [1.0, 2.0, 3.0][t % 3];
        let (xs, ys) = (cloud(n, d, &mut rng)?, cloud(n, d, &mut rng)?);
        let w = w_p_assignment(&xs, &ys, p)?.cost;
        brute = brute.max((w - brute_force_wp(&xs, &ys, p)).abs() / (1.0 + w));

        let m = rng.random_range(1..40);
        let (a, b) = (cloud(m, 1, &mut rng)?, cloud(m, 1, &mut rng)?);
        one_d = one_d.max((w_p_assignment(&a, &b, p)?.cost - w_p_1d(a.coords(), b.coords(), p)?).abs());

        let shift: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lam = rng.random_range(0.1..4.0);
        let tr = |e: &ParticleEnsemble, s: f64, off: bool| {
            let coords =
                e.coords().iter().enumerate().map(|(k, c)| s * c + if off { shift[k % d] } else { 0.0 }).collect();
            ParticleEnsemble::new(e.len(), d, coords)
        };
        let moved = w_p_assignment(&tr(&xs, 1.0, true)?, &tr(&ys, 1.0, true)?, p)?.cost;
        let scaled = w_p_assignment(&tr(&xs, lam, false)?, &tr(&ys, lam, false)?, p)?.cost;
        affine = affine.max((moved - w).abs()).max((scaled - lam * w).abs());
    }
    let passed = brute <= 1e-10 && one_d <= 1e-12 && affine <= 1e-10;
    Ok((
        passed,
        format!(
            "{trials} trials: vs brute force {brute:.1e}, vs 1-D sorting {one_d:.1e}, translation/scaling {affine:.1e}"
        ),
    ))
}

/// Budget bookkeeping against the direct discounted sums on random
/// constraints and trajectories.
pub fn budget_equivalence(trajectories: usize, seed: u64) -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut disagreements = 0;
    let mut violated = 0;
    for _ in 0..trajectories {
        let (ns, na) = (rng.random_range(1..6), rng.random_range(1..4));
        let k = rng.random_range(1..4);
        let cost: Vec<Vec<f64>> = (0..k).map(|_| (0..ns * na).map(|_| rng.random_range(0.0..1.0)).collect()).collect();
        let budget: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..3.0)).collect();
        let disc: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..0.99)).collect();
        let safety = SafetySpec::new(na, cost, budget, disc).expect("valid random constraints");
        let len = rng.random_range(0..=20);
        let pairs: Vec<(usize, usize)> = (0..len).map(|_| (rng.random_range(0..ns), rng.random_range(0..na))).collect();
        let direct = constraint_satisfied_direct(&safety, &pairs);
        violated += usize::from(!direct);
        if direct != constraint_satisfied_by_budget(&safety, &pairs) {
            disagreements += 1;
        }
    }
    (disagreements == 0, format!("{trajectories} trajectories ({violated} violating): {disagreements} disagreements"))
}

/// Directory holding the shipped acceptance configs, relative to a checkout.
pub fn default_config_dir(root: &Path) -> PathBuf {
    root.join("configs").join("acceptance")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_is_a_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let opts = AcceptanceOptions { config_dir: dir.path().into(), out: None, fault: GradientFault::None };
        assert!(run_acceptance(&opts).is_err());
    }

    #[test]
    fn property_criteria_pass_on_small_samples() {
        assert!(policy_identities(50, 1).0);
        assert!(transport_identities(12, 2).unwrap().0);
        assert!(budget_equivalence(50, 3).0);
    }
}
