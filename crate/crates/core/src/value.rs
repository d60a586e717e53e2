//! Truncated regularized values, action values and discounted visitation on
//! the augmented model, plus the dynamic-programming optimum.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeanflowError, Result};
use crate::policy::PolicyEval;
use crate::regularizers::RewardRegularizer;
use crate::safety_mdp::{rollout, truncate_reward, AugmentedMdp, BudgetMode};

/// Augmented-state count above which only the Monte Carlo backend runs.
pub const EXACT_STATE_LIMIT: usize = 5000;

/// One stage of the approximation schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStage {
    pub n: usize,
    /// Truncation level; `null` in JSON means no truncation.
    #[serde(with = "inf_as_null")]
    pub m: f64,
    pub eps: f64,
    pub kappa: f64,
    pub sigma: f64,
}

impl ScheduleStage {
    /// Unregularized, untruncated stage.
    pub fn plain() -> Self {
        Self { n: 0, m: f64::INFINITY, eps: 0.0, kappa: 0.0, sigma: 1.0 }
    }
}

pub(crate) mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Discounted state visitation `d = (1 - beta) sum_t beta^t P_pi^t p0`.
#[derive(Debug, Clone, PartialEq)]
pub struct Visitation {
    pub d: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueBackend {
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueReport {
    /// `sum_s p0(s) V(s)`
    pub value: f64,
    pub per_state: Vec<f64>,
    /// `q[s * A + a]`
    pub q: Vec<f64>,
    pub backend: ValueBackend,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stderr: Option<f64>,
}

/// Everything the exact backend produces for one policy snapshot.
#[derive(Debug, Clone)]
pub struct PolicyValue {
    pub value: f64,
    pub v: Vec<f64>,
    /// `q[s * A + a]`
    pub q: Vec<f64>,
    pub visitation: Visitation,
    /// `sup_{s,a} |F(dens(a|s))|` over the table
    pub f_sup: f64,
}

fn check_exact(mdp: &AugmentedMdp, policy: &PolicyEval) -> Result<()> {
    if !(mdp.beta() > 0.0 && mdp.beta() < 1.0) {
        return Err(MeanflowError::Singular(format!("discount beta={} must lie in (0,1)", mdp.beta())));
    }
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(MeanflowError::SizeMismatch("policy table does not match the model".into()));
    }
    if mdp.n_states() > EXACT_STATE_LIMIT {
        return Err(MeanflowError::Unsupported(format!(
            "{} augmented states exceed the exact backend limit {EXACT_STATE_LIMIT}; use the Monte Carlo backend",
            mdp.n_states()
        )));
    }
    Ok(())
}

/// `P_pi[i, j] = sum_a pi(a|i) p(j | i, a)`
fn policy_transition(mdp: &AugmentedMdp, mass: impl Fn(usize, usize) -> f64) -> DMatrix<f64> {
    let n = mdp.n_states();
    let mut p = DMatrix::zeros(n, n);
    for i in 0..n {
        for a in 0..mdp.n_actions() {
            let w = mass(i, a);
            if w == 0.0 {
                continue;
            }
            for &(j, q) in mdp.successors(i, a) {
                p[(i, j)] += w * q;
            }
        }
    }
    p
}

fn solve(mut m: DMatrix<f64>, rhs: DVector<f64>, what: &str) -> Result<Vec<f64>> {
    m.iter_mut().for_each(|v| *v = -*v);
    // m now holds -beta P (or its transpose); add the identity
    for i in 0..m.nrows() {
        m[(i, i)] += 1.0;
    }
    let x = m.lu().solve(&rhs).ok_or_else(|| MeanflowError::Singular(format!("{what} system is singular")))?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(MeanflowError::Singular(format!("{what} solve produced non-finite values")));
    }
    Ok(x.iter().copied().collect())
}

/// Per-state reward `sum_a pi(a|s) [u_{B^m}(s,a) - eps F(dens(a|s))]` and `sup |F|`.
fn policy_reward(
    mdp: &AugmentedMdp,
    policy: &PolicyEval,
    stage: &ScheduleStage,
    f: RewardRegularizer,
) -> Result<(Vec<f64>, f64)> {
    let mut f_sup: f64 = 0.0;
    let mut r = vec![0.0; mdp.n_states()];
    for (i, ri) in r.iter_mut().enumerate() {
        for a in 0..mdp.n_actions() {
            let fv = f.f_from_log(policy.log_dens(i, a));
            if !fv.is_finite() {
                return Err(MeanflowError::Domain { name: f.name(), z: policy.dens(i, a) });
            }
            f_sup = f_sup.max(fv.abs());
            *ri += policy.mass(i, a) * (truncate_reward(mdp.reward_b(i, a), stage.m) - stage.eps * fv);
        }
    }
    Ok((r, f_sup))
}

/// Solves `(I - beta P_pi^T) d = (1 - beta) p0`.
pub fn stationary_visitation(policy: &PolicyEval, mdp: &AugmentedMdp) -> Result<Visitation> {
    check_exact(mdp, policy)?;
    let beta = mdp.beta();
    let p = policy_transition(mdp, |i, a| policy.mass(i, a)).transpose() * beta;
    let rhs = DVector::from_iterator(mdp.n_states(), mdp.p0().iter().map(|q| (1.0 - beta) * q));
    let mut d = solve(p, rhs, "visitation")?;
    // clip round-off negatives and renormalize
    d.iter_mut().for_each(|v| *v = v.max(0.0));
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|v| *v /= total);
    Ok(Visitation { d })
}

/// Exact policy evaluation: `V`, `Q`, visitation and the scalar value.
pub fn evaluate_policy(
    policy: &PolicyEval,
    mdp: &AugmentedMdp,
    stage: &ScheduleStage,
    f: RewardRegularizer,
) -> Result<PolicyValue> {
    check_exact(mdp, policy)?;
    let beta = mdp.beta();
    let (r, f_sup) = policy_reward(mdp, policy, stage, f)?;
    let p = policy_transition(mdp, |i, a| policy.mass(i, a));
    let v = solve(&p * beta, DVector::from_vec(r), "policy evaluation")?;
    let q = q_from_v(mdp, &v, stage.m);
    let value = mdp.p0().iter().zip(&v).map(|(a, b)| a * b).sum();
    let pt = p.transpose() * beta;
    let rhs = DVector::from_iterator(mdp.n_states(), mdp.p0().iter().map(|q| (1.0 - beta) * q));
    let mut d = solve(pt, rhs, "visitation")?;
    d.iter_mut().for_each(|x| *x = x.max(0.0));
    let total: f64 = d.iter().sum();
    d.iter_mut().for_each(|x| *x /= total);
    Ok(PolicyValue { value, v, q, visitation: Visitation { d }, f_sup })
}

fn q_from_v(mdp: &AugmentedMdp, v: &[f64], m: f64) -> Vec<f64> {
    let na = mdp.n_actions();
    let mut q = vec![0.0; mdp.n_states() * na];
    for i in 0..mdp.n_states() {
        for a in 0..na {
            let cont: f64 = mdp.successors(i, a).iter().map(|&(j, p)| p * v[j]).sum();
            q[i * na + a] = truncate_reward(mdp.reward_b(i, a), m) + mdp.beta() * cont;
        }
    }
    q
}

/// Exact backend for `V^n(pi_mu)`.
pub fn value_n(
    policy: &PolicyEval,
    mdp: &AugmentedMdp,
    stage: &ScheduleStage,
    f: RewardRegularizer,
) -> Result<ValueReport> {
    let pv = evaluate_policy(policy, mdp, stage, f)?;
    Ok(ValueReport { value: pv.value, per_state: pv.v, q: pv.q, backend: ValueBackend::Exact, stderr: None })
}

/// `Q^n(s,a) = u_{B^m}(s,a) + beta sum_{s'} p(s'|s,a) V^n(s')`, row-major `S x A`.
pub fn q_n(policy: &PolicyEval, mdp: &AugmentedMdp, stage: &ScheduleStage, f: RewardRegularizer) -> Result<Vec<f64>> {
    Ok(evaluate_policy(policy, mdp, stage, f)?.q)
}

/// Monte Carlo settings. Without an explicit horizon the smallest `T` whose
/// discounted tail bound is below `tail_tol` is used.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McOptions {
    pub n_rollouts: usize,
    pub horizon: Option<usize>,
    pub tail_tol: f64,
    pub seed: u64,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { n_rollouts: 1000, horizon: None, tail_tol: 1e-6, seed: 0 }
    }
}

/// Horizon `T` with `beta^T * bound / (1 - beta) <= tol`.
pub fn tail_horizon(beta: f64, bound: f64, tol: f64) -> usize {
    if bound <= 0.0 {
        return 1;
    }
    let t = ((tol * (1.0 - beta) / bound).ln() / beta.ln()).ceil();
    (t.max(1.0)) as usize
}

/// Monte Carlo estimate on the grid model. Rollout `r` draws from stream `r`
/// of a seeded generator, so results do not depend on the thread count.
pub fn mc_value(
    policy: &PolicyEval,
    mdp: &AugmentedMdp,
    stage: &ScheduleStage,
    f: RewardRegularizer,
    opts: &McOptions,
) -> Result<ValueReport> {
    if opts.n_rollouts < 2 {
        return Err(MeanflowError::InvalidModel("Monte Carlo needs at least two rollouts".into()));
    }
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(MeanflowError::SizeMismatch("policy table does not match the model".into()));
    }
    let beta = mdp.beta();
    let mut f_sup: f64 = 0.0;
    for i in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            f_sup = f_sup.max(f.f_from_log(policy.log_dens(i, a)).abs());
        }
    }
    let horizon = opts
        .horizon
        .unwrap_or_else(|| tail_horizon(beta, mdp.truncated_sup(stage.m) + stage.eps * f_sup, opts.tail_tol));
    let returns: Vec<f64> = (0..opts.n_rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(r as u64);
            let traj = rollout(mdp, policy, horizon, BudgetMode::Grid, &mut rng)?;
            let mut g = 0.0;
            let mut disc = 1.0;
            for st in &traj.steps {
                let fv = f.f_from_log(policy.log_dens(st.aug_index, st.action));
                g += disc * (truncate_reward(st.reward_b, stage.m) - stage.eps * fv);
                disc *= beta;
            }
            Ok(g)
        })
        .collect::<Result<_>>()?;
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = returns.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok(ValueReport {
        value: mean,
        per_state: Vec::new(),
        q: Vec::new(),
        backend: ValueBackend::MonteCarlo,
        stderr: Some((var / n).sqrt()),
    })
}

/// Optimal value and greedy deterministic policy of the barrier-augmented model.
#[derive(Debug, Clone, PartialEq)]
pub struct DpSolution {
    pub v: Vec<f64>,
    pub policy: Vec<usize>,
    /// `sum_s p0(s) V*(s)`
    pub value: f64,
    pub iterations: usize,
    /// sup-norm change per sweep
    pub residuals: Vec<f64>,
    /// largest ratio of consecutive residuals
    pub worst_ratio: f64,
}

/// One row of an exported state-to-action table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyTableRow {
    pub state: usize,
    pub budget: Vec<f64>,
    pub violated: bool,
    pub action: usize,
    pub value: f64,
}

impl DpSolution {
    pub fn table(&self, mdp: &AugmentedMdp) -> Vec<PolicyTableRow> {
        (0..mdp.n_states())
            .map(|i| {
                let st = mdp.state(i);
                PolicyTableRow {
                    state: st.s,
                    budget: st.z,
                    violated: mdp.is_violated(i),
                    action: self.policy[i],
                    value: self.v[i],
                }
            })
            .collect()
    }
}

pub const DP_TOLERANCE: f64 = 1e-10;

/// Value iteration on `u_{B^m}` until the sup-norm change drops below
/// [`DP_TOLERANCE`]. Greedy ties go to the lowest action index.
pub fn dp_optimal(mdp: &AugmentedMdp, m: f64) -> Result<DpSolution> {
    let beta = mdp.beta();
    if !(beta > 0.0 && beta < 1.0) {
        return Err(MeanflowError::Singular(format!("discount beta={beta} must lie in (0,1)")));
    }
    let n = mdp.n_states();
    let na = mdp.n_actions();
    let r = mdp.truncated_rewards(m);
    let r_sup = r.iter().fold(0.0f64, |a, b| a.max(b.abs())).max(1e-300);
    let max_iter = tail_horizon(beta, r_sup, DP_TOLERANCE * 1e-3) + 1000;
    let mut v = vec![0.0; n];
    let mut residuals = Vec::new();
    let mut worst_ratio: f64 = 0.0;
    let bellman = |v: &[f64], i: usize, a: usize| -> f64 {
        r[i * na + a] + beta * mdp.successors(i, a).iter().map(|&(j, p)| p * v[j]).sum::<f64>()
    };
    let mut converged = false;
    for _ in 0..max_iter {
        let next: Vec<f64> =
            (0..n).map(|i| (0..na).map(|a| bellman(&v, i, a)).fold(f64::NEG_INFINITY, f64::max)).collect();
        let res = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if let Some(&prev) = residuals.last() {
            // ratios of residuals near round-off carry no information
            if prev > 1e-9 * (1.0 + r_sup / (1.0 - beta)) {
                worst_ratio = worst_ratio.max(res / prev);
            }
        }
        residuals.push(res);
        v = next;
        if res <= DP_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(MeanflowError::NoConvergence {
            iterations: residuals.len(),
            residual: *residuals.last().unwrap_or(&f64::NAN),
            worst_ratio,
        });
    }
    let policy: Vec<usize> = (0..n)
        .map(|i| {
            let qs: Vec<f64> = (0..na).map(|a| bellman(&v, i, a)).collect();
            let best = qs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let tol = 1e-9 * (1.0 + best.abs());
            qs.iter().position(|&q| q >= best - tol).unwrap_or(0)
        })
        .collect();
    let value = mdp.p0().iter().zip(&v).map(|(a, b)| a * b).sum();
    Ok(DpSolution { v, policy, value, iterations: residuals.len(), residuals, worst_ratio })
}

/// Exact value of a deterministic stationary policy on `u_{B^m}`.
pub fn deterministic_value(mdp: &AugmentedMdp, actions: &[usize], m: f64) -> Result<Vec<f64>> {
    if actions.len() != mdp.n_states() {
        return Err(MeanflowError::SizeMismatch("one action per augmented state required".into()));
    }
    let p = policy_transition(mdp, |i, a| if actions[i] == a { 1.0 } else { 0.0 });
    let r = (0..mdp.n_states()).map(|i| truncate_reward(mdp.reward_b(i, actions[i]), m));
    solve(p * mdp.beta(), DVector::from_iterator(mdp.n_states(), r), "policy evaluation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RandomFourier;
    use crate::policy::ParticleEnsemble;
    use crate::safety_mdp::{BarrierSpec, BaseMdp, BudgetGrid, SafetySpec};

    fn aug(base: BaseMdp) -> AugmentedMdp {
        base.augment().unwrap()
    }

    fn random_policy(mdp: &AugmentedMdp, seed: u64) -> PolicyEval {
        let f = RandomFourier::new(mdp.n_states(), mdp.n_actions(), 2, 1.5, 1.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ens = ParticleEnsemble::standard_normal(6, 2, &mut rng);
        PolicyEval::compute(&ens, &f, mdp).unwrap()
    }

    fn uniform(mdp: &AugmentedMdp) -> PolicyEval {
        let na = mdp.n_actions();
        PolicyEval::from_logits(mdp.n_states(), na, mdp.rho().to_vec(), vec![0.0; mdp.n_states() * na])
    }

    fn stage(m: f64, eps: f64) -> ScheduleStage {
        ScheduleStage { n: 1, m, eps, kappa: 0.0, sigma: 1.0 }
    }

    #[test]
    fn single_state_geometric_value() {
        let mdp = aug(BaseMdp::unconstrained(1, 1, vec![1.0], vec![1.0], vec![1.0], 0.9, vec![1.0]).unwrap());
        let pe = uniform(&mdp);
        let rep = value_n(&pe, &mdp, &stage(f64::INFINITY, 0.3), RewardRegularizer::Entropy).unwrap();
        assert!((rep.value - 10.0).abs() < 1e-12);
        assert!((rep.q[0] - 10.0).abs() < 1e-12);
        let vis = stationary_visitation(&pe, &mdp).unwrap();
        assert!((vis.d[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn two_cycle_visitation() {
        let p = vec![0.0, 1.0, 1.0, 0.0];
        let mdp = aug(BaseMdp::unconstrained(2, 1, vec![1.0], p, vec![0.0, 0.0], 0.5, vec![1.0, 0.0]).unwrap());
        let vis = stationary_visitation(&uniform(&mdp), &mdp).unwrap();
        let s0 = (0..mdp.n_states()).find(|&i| mdp.base_state(i) == 0).unwrap();
        assert!((vis.d[s0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((vis.d[1 - s0] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn visitation_matches_power_series() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mdp = aug(BaseMdp::random(5, 3, 0.9, &mut rng).unwrap());
        let pe = random_policy(&mdp, 2);
        let vis = stationary_visitation(&pe, &mdp).unwrap();
        let n = mdp.n_states();
        // truncated sum_{t<=T} (1-beta) beta^t (P^T)^t p0
        let mut cur = mdp.p0().to_vec();
        let mut acc = vec![0.0; n];
        let mut disc = 1.0 - mdp.beta();
        for _ in 0..=400 {
            acc.iter_mut().zip(&cur).for_each(|(a, c)| *a += disc * c);
            let mut next = vec![0.0; n];
            for i in 0..n {
                for a in 0..3 {
                    for &(j, q) in mdp.successors(i, a) {
                        next[j] += cur[i] * pe.mass(i, a) * q;
                    }
                }
            }
            cur = next;
            disc *= mdp.beta();
        }
        for i in 0..n {
            assert!((acc[i] - vis.d[i]).abs() < 1e-8);
        }
        // fixed point residual
        let mut res: f64 = 0.0;
        for j in 0..n {
            let mut rhs = (1.0 - mdp.beta()) * mdp.p0()[j];
            for i in 0..n {
                for a in 0..3 {
                    for &(k, q) in mdp.successors(i, a) {
                        if k == j {
                            rhs += mdp.beta() * vis.d[i] * pe.mass(i, a) * q;
                        }
                    }
                }
            }
            res = res.max((rhs - vis.d[j]).abs());
        }
        assert!(res < 1e-10);
    }

    #[test]
    fn bellman_consistency_and_visitation_form() {
        for seed in 0..5 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mdp = aug(BaseMdp::random(5, 3, 0.85, &mut rng).unwrap());
            let pe = random_policy(&mdp, seed + 10);
            for f in [RewardRegularizer::Entropy, RewardRegularizer::Power { p: 2.0 }] {
                let st = stage(0.5, 0.2);
                let pv = evaluate_policy(&pe, &mdp, &st, f).unwrap();
                let mut visit_form = 0.0;
                for i in 0..mdp.n_states() {
                    let mut lhs = 0.0;
                    let mut inst = 0.0;
                    for a in 0..3 {
                        let fv = f.f(pe.dens(i, a)).unwrap();
                        lhs += pe.mass(i, a) * (pv.q[i * 3 + a] - st.eps * fv);
                        inst += pe.mass(i, a) * (truncate_reward(mdp.reward_b(i, a), st.m) - st.eps * fv);
                    }
                    assert!((lhs - pv.v[i]).abs() < 1e-9);
                    visit_form += pv.visitation.d[i] * inst;
                }
                visit_form /= 1.0 - mdp.beta();
                assert!((visit_form - pv.value).abs() < 1e-8);
                // |Q| and |V| bounds
                let (u, b) = (mdp.truncated_sup(st.m), mdp.beta());
                let q_bound = u / (1.0 - b) + b * st.eps * pv.f_sup / (1.0 - b);
                assert!(pv.q.iter().all(|q| q.abs() <= q_bound + 1e-12));
                assert!(pv.value.abs() <= (u + st.eps * pv.f_sup) / (1.0 - b) + 1e-12);
            }
        }
    }

    #[test]
    fn uniform_density_has_no_entropy_penalty() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = BaseMdp::random(3, 2, 0.9, &mut rng).unwrap();
        let base = BaseMdp { rho: vec![0.5, 0.5], ..base };
        let mdp = aug(base);
        let pe = uniform(&mdp);
        let a = value_n(&pe, &mdp, &stage(f64::INFINITY, 0.0), RewardRegularizer::Entropy).unwrap().value;
        let b = value_n(&pe, &mdp, &stage(f64::INFINITY, 0.7), RewardRegularizer::Entropy).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn eps_zero_matches_value_iteration_of_fixed_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mdp = aug(BaseMdp::random(5, 3, 0.9, &mut rng).unwrap());
        let pe = random_policy(&mdp, 3);
        let rep = value_n(&pe, &mdp, &stage(0.4, 0.0), RewardRegularizer::Entropy).unwrap();
        let mut v = vec![0.0; mdp.n_states()];
        for _ in 0..2000 {
            v = (0..mdp.n_states())
                .map(|i| {
                    (0..3)
                        .map(|a| {
                            pe.mass(i, a)
                                * (truncate_reward(mdp.reward_b(i, a), 0.4)
                                    + mdp.beta() * mdp.successors(i, a).iter().map(|&(j, q)| q * v[j]).sum::<f64>())
                        })
                        .sum()
                })
                .collect();
        }
        for i in 0..mdp.n_states() {
            assert!((v[i] - rep.per_state[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn terminal_q_is_reward() {
        // state 1 absorbing with zero reward; beta tiny continuation from state 0 lands there
        let p = vec![0.0, 1.0, 0.0, 1.0];
        let mdp = aug(BaseMdp::unconstrained(2, 1, vec![1.0], p, vec![0.7, 0.0], 0.9, vec![1.0, 0.0]).unwrap());
        let rep = value_n(&uniform(&mdp), &mdp, &stage(f64::INFINITY, 0.0), RewardRegularizer::Entropy).unwrap();
        let s0 = (0..mdp.n_states()).find(|&i| mdp.base_state(i) == 0).unwrap();
        assert!((rep.q[s0] - 0.7).abs() < 1e-14);
    }

    #[test]
    fn value_is_non_increasing_in_truncation() {
        let base = crate::safety_mdp::BaseMdp {
            n_states: 3,
            n_actions: 2,
            rho: vec![1.0, 1.0],
            p: vec![0.5, 0.5, 0.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.3, 0.3, 0.4],
            u: vec![1.0, 2.0, 0.5, -3.0, 0.0, 1.0],
            beta: 0.9,
            safety: SafetySpec::new(2, vec![vec![0.0, 0.6, 0.2, 0.0, 0.9, 0.1]], vec![1.0], vec![0.8]).unwrap(),
            barrier: BarrierSpec::new(2.0, 100.0).unwrap(),
            p0: vec![1.0, 0.0, 0.0],
            grid: BudgetGrid { points: 9, z_max: 4.0 },
        }
        .validate()
        .unwrap();
        let mdp = aug(base);
        let pe = random_policy(&mdp, 9);
        // max(-m, u) only lifts rewards, and lifts them less as m grows
        let mut prev = f64::INFINITY;
        let mut values = Vec::new();
        for m in [1.0, 2.0, 5.0, 10.0, f64::INFINITY] {
            let v = value_n(&pe, &mdp, &stage(m, 0.1), RewardRegularizer::Entropy).unwrap().value;
            assert!(v <= prev + 1e-12);
            prev = v;
            values.push(v);
        }
        assert!(values[0] > values[4]);
    }

    #[test]
    fn mc_agrees_with_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mdp = aug(BaseMdp::random(5, 3, 0.8, &mut rng).unwrap());
        let pe = random_policy(&mdp, 5);
        let st = stage(f64::INFINITY, 0.1);
        let exact = value_n(&pe, &mdp, &st, RewardRegularizer::Entropy).unwrap().value;
        let opts = McOptions { n_rollouts: 4000, horizon: None, tail_tol: 1e-6, seed: 3 };
        let mc = mc_value(&pe, &mdp, &st, RewardRegularizer::Entropy, &opts).unwrap();
        let se = mc.stderr.unwrap();
        assert!((mc.value - exact).abs() <= 3.0 * se + 1e-6, "mc {} exact {exact} se {se}", mc.value);
        let mc2 =
            mc_value(&pe, &mdp, &st, RewardRegularizer::Entropy, &McOptions { n_rollouts: 8000, ..opts }).unwrap();
        let ratio = mc2.stderr.unwrap() / se;
        assert!((ratio - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.2 * std::f64::consts::FRAC_1_SQRT_2);
        // same seed, same answer
        let again = mc_value(&pe, &mdp, &st, RewardRegularizer::Entropy, &opts).unwrap();
        assert_eq!(again, mc);
    }

    #[test]
    fn mc_deterministic_model_has_zero_stderr() {
        let p = vec![0.0, 1.0, 1.0, 0.0];
        let mdp = aug(BaseMdp::unconstrained(2, 1, vec![1.0], p, vec![1.0, -0.5], 0.9, vec![1.0, 0.0]).unwrap());
        let pe = uniform(&mdp);
        let st = stage(f64::INFINITY, 0.0);
        let exact = value_n(&pe, &mdp, &st, RewardRegularizer::Entropy).unwrap().value;
        let mc =
            mc_value(&pe, &mdp, &st, RewardRegularizer::Entropy, &McOptions { n_rollouts: 10, ..Default::default() })
                .unwrap();
        assert!(mc.stderr.unwrap() < 1e-12);
        assert!((mc.value - exact).abs() <= 1e-6);
    }

    #[test]
    fn dp_matches_policy_enumeration() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mdp = aug(BaseMdp::random(2, 2, 0.9, &mut rng).unwrap());
            let dp = dp_optimal(&mdp, f64::INFINITY).unwrap();
            let n = mdp.n_states();
            let mut best = vec![f64::NEG_INFINITY; n];
            for code in 0..(1usize << n) {
                let acts: Vec<usize> = (0..n).map(|i| (code >> i) & 1).collect();
                let v = deterministic_value(&mdp, &acts, f64::INFINITY).unwrap();
                best.iter_mut().zip(&v).for_each(|(b, x)| *b = b.max(*x));
            }
            for i in 0..n {
                assert!((dp.v[i] - best[i]).abs() < 1e-8);
            }
            let own = deterministic_value(&mdp, &dp.policy, f64::INFINITY).unwrap();
            for i in 0..n {
                assert!((own[i] - best[i]).abs() < 1e-8);
            }
            assert!(
                dp.worst_ratio <= mdp.beta() + 1e-6,
                "ratio {} residuals {:?}",
                dp.worst_ratio,
                &dp.residuals[dp.residuals.len() - 5..]
            );
        }
    }

    #[test]
    fn dp_prefers_safe_action_and_breaks_ties_low() {
        // action 1 pays more but spends the whole budget every step
        let base = BaseMdp {
            n_states: 1,
            n_actions: 3,
            rho: vec![1.0; 3],
            p: vec![1.0; 3],
            u: vec![1.0, 1.5, 1.0],
            beta: 0.9,
            safety: SafetySpec::new(3, vec![vec![0.0, 2.0, 0.0]], vec![1.0], vec![0.9]).unwrap(),
            barrier: BarrierSpec::new(1.0, 100.0).unwrap(),
            p0: vec![1.0],
            grid: BudgetGrid { points: 9, z_max: 4.0 },
        }
        .validate()
        .unwrap();
        let mdp = aug(base);
        let dp = dp_optimal(&mdp, f64::INFINITY).unwrap();
        let start = mdp.p0().iter().position(|&q| q > 0.0).unwrap();
        assert_eq!(dp.policy[start], 0);
        let table = dp.table(&mdp);
        assert_eq!(table.len(), mdp.n_states());
    }

    #[test]
    fn schedule_stage_serializes_infinite_truncation_as_null() {
        let st = ScheduleStage::plain();
        let text = serde_json::to_string(&st).unwrap();
        assert!(text.contains("\"m\":null"));
        let back: ScheduleStage = serde_json::from_str(&text).unwrap();
        assert!(back.m.is_infinite());
    }
}
