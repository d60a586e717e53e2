//! Optimal-transport distances between equal-size uniform ensembles and
//! safety statistics of a policy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeanflowError, Result};
use crate::policy::{ParticleEnsemble, PolicyEval};
use crate::safety_mdp::{rollout, ActionSampler, AugmentedMdp, BudgetMode};

/// Largest ensemble accepted by [`w_p_assignment`].
pub const ASSIGNMENT_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportResult {
    pub cost: f64,
    /// `plan[i]` is the index in `ys` matched to `xs[i]`
    pub plan: Vec<usize>,
    pub p: f64,
}

fn check_order(p: f64) -> Result<()> {
    if p >= 1.0 && p.is_finite() {
        Ok(())
    } else {
        Err(MeanflowError::InvalidModel(format!("transport order must be >= 1, got {p}")))
    }
}

/// Exact `W_p` between two equal-size point sets on the line.
pub fn w_p_1d(xs: &[f64], ys: &[f64], p: f64) -> Result<f64> {
    check_order(p)?;
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(MeanflowError::SizeMismatch(format!(
            "1D transport needs equal non-zero counts, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let mean = a.iter().zip(&b).map(|(x, y)| (x - y).abs().powf(p)).sum::<f64>() / a.len() as f64;
    Ok(mean.powf(1.0 / p))
}

/// Exact `W_p` by optimal assignment (shortest augmenting paths with potentials).
pub fn w_p_assignment(xs: &ParticleEnsemble, ys: &ParticleEnsemble, p: f64) -> Result<TransportResult> {
    check_order(p)?;
    let n = xs.len();
    if n != ys.len() || xs.dim() != ys.dim() {
        return Err(MeanflowError::SizeMismatch("assignment needs ensembles of equal size and dimension".into()));
    }
    if n > ASSIGNMENT_LIMIT {
        return Err(MeanflowError::Unsupported(format!("assignment limited to N <= {ASSIGNMENT_LIMIT}, got {n}")));
    }
    let cost: Vec<f64> = (0..n * n)
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let d2: f64 = xs.particle(i).iter().zip(ys.particle(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            if p == 2.0 {
                d2
            } else {
                d2.sqrt().powf(p)
            }
        })
        .collect();
    let plan = hungarian(n, &cost);
    let total: f64 = plan.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(TransportResult { cost: (total / n as f64).powf(1.0 / p), plan, p })
}

/// `W_2`, using the sorting formula on the line.
pub fn w2(xs: &ParticleEnsemble, ys: &ParticleEnsemble) -> Result<f64> {
    if xs.dim() == 1 && ys.dim() == 1 {
        w_p_1d(xs.coords(), ys.coords(), 2.0)
    } else {
        Ok(w_p_assignment(xs, ys, 2.0)?.cost)
    }
}

/// `W_1`, using the sorting formula on the line.
pub fn w1(xs: &ParticleEnsemble, ys: &ParticleEnsemble) -> Result<f64> {
    if xs.dim() == 1 && ys.dim() == 1 {
        w_p_1d(xs.coords(), ys.coords(), 1.0)
    } else {
        Ok(w_p_assignment(xs, ys, 1.0)?.cost)
    }
}

/// Square min-cost assignment; returns the column assigned to each row.
fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    // 1-based potentials and matching, column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut plan = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            plan[row_of[j] - 1] = j - 1;
        }
    }
    plan
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViolationRate {
    pub rate: f64,
    /// 95% normal-approximation half-width, with the rule-of-three bound when
    /// no violation is observed
    pub half_width: f64,
    pub n_rollouts: usize,
    pub horizon: usize,
}

/// Fraction of exact-budget rollouts in which some safety index goes negative.
/// Rollout `r` uses stream `r` of a generator seeded with `seed`.
pub fn violation_rate(
    sampler: &(dyn ActionSampler + Sync),
    mdp: &AugmentedMdp,
    n_rollouts: usize,
    horizon: usize,
    seed: u64,
) -> Result<ViolationRate> {
    if n_rollouts == 0 {
        return Err(MeanflowError::InvalidModel("violation_rate needs at least one rollout".into()));
    }
    let hits: Vec<bool> = (0..n_rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            Ok(rollout(mdp, sampler, horizon, BudgetMode::Exact, &mut rng)?.violated)
        })
        .collect::<Result<_>>()?;
    let k = hits.iter().filter(|&&v| v).count();
    let n = n_rollouts as f64;
    let rate = k as f64 / n;
    let half_width = if k == 0 { 3.0 / n } else { 1.96 * (rate * (1.0 - rate) / n).sqrt() };
    Ok(ViolationRate { rate, half_width, n_rollouts, horizon })
}

/// Probability that the grid model reaches a violated node within `horizon`
/// steps. The grid budget never exceeds the exact one, so this bounds the
/// exact violation probability from above.
pub fn violation_probability(policy: &PolicyEval, mdp: &AugmentedMdp, horizon: usize) -> f64 {
    let n = mdp.n_states();
    let mut dist: Vec<f64> = (0..n).map(|i| if mdp.is_violated(i) { 0.0 } else { mdp.p0()[i] }).collect();
    let mut absorbed: f64 = (0..n).filter(|&i| mdp.is_violated(i)).map(|i| mdp.p0()[i]).sum();
    for _ in 0..horizon {
        let mut next = vec![0.0; n];
        for i in 0..n {
            if dist[i] == 0.0 {
                continue;
            }
            for a in 0..mdp.n_actions() {
                let w = dist[i] * policy.mass(i, a);
                if w == 0.0 {
                    continue;
                }
                for &(j, q) in mdp.successors(i, a) {
                    if mdp.is_violated(j) {
                        absorbed += w * q;
                    } else {
                        next[j] += w * q;
                    }
                }
            }
        }
        dist = next;
    }
    absorbed.min(1.0)
}
