//! Post-hoc checks on a flow: Lipschitz probes, the convexity margin and
//! exponential decay fits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Objective;
use crate::error::{MeanflowError, Result};
use crate::metrics::w1;
use crate::policy::ParticleEnsemble;
use crate::value::ScheduleStage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzOptions {
    pub probes: usize,
    /// probe points are drawn from `[-w, w]^d`
    pub box_half_width: f64,
    pub seed: u64,
}

impl Default for LipschitzOptions {
    fn default() -> Self {
        Self { probes: 64, box_half_width: 3.0, seed: 0 }
    }
}

/// Empirical constants of the value gradient around one ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    /// sup `|grad V(mu,y) - grad V(mu,x)| / |y - x|`
    pub c_v: f64,
    /// sup `|grad V(nu,x) - grad V(mu,x)| / W_1(mu,nu)`
    pub k_v: f64,
    /// sup `|grad J(mu,x)| / (1 + |x|)`
    pub m_growth: f64,
    /// closed-form upper bound for `c_v`
    pub analytic_c_v: f64,
    pub probes: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Closed-form bound on the spatial Lipschitz constant of the value gradient.
pub fn analytic_value_lipschitz(obj: &Objective<'_>, stage: &ScheduleStage) -> f64 {
    let mdp = obj.mdp();
    let f = obj.features();
    let b = f.sup_norm();
    let rho_sum: f64 = mdp.rho().iter().sum();
    let (lo, hi) = ((-2.0 * b).exp() / rho_sum, (2.0 * b).exp() / rho_sum);
    let (c0, c1) = obj.reward_regularizer().bounds_on(lo, hi);
    let beta = mdp.beta();
    4.0 / (1.0 - beta).powi(2) * (mdp.truncated_sup(stage.m) + stage.eps * (c0 + c1)) * f.norm(2)
}

/// Probe the value-gradient constants. Probes are generated one after the
/// other from `opts.seed`, so a larger probe count always covers a smaller one.
pub fn estimate_lipschitz(
    obj: &Objective<'_>,
    ensemble: &ParticleEnsemble,
    stage: &ScheduleStage,
    opts: &LipschitzOptions,
) -> Result<LipschitzEstimate> {
    let d = ensemble.dim();
    let w = opts.box_half_width;
    let base = obj.snapshot(ensemble, stage)?;
    // evaluation points for the measure-direction probes: the particles
    // plus a fixed set of box points independent of the probe count
    let mut fixed_rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut eval_points: Vec<Vec<f64>> = ensemble.iter().map(|x| x.to_vec()).collect();
    for _ in 0..16 {
        eval_points.push((0..d).map(|_| fixed_rng.random_range(-w..=w)).collect());
    }
    let base_grads: Vec<Vec<f64>> = eval_points.iter().map(|x| base.grad_v(x)).collect();
    let mut m_growth: f64 = eval_points.iter().map(|x| norm(&base.grad_j(x)) / (1.0 + norm(x))).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut c_v, mut k_v): (f64, f64) = (0.0, 0.0);
    for _ in 0..opts.probes {
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-w..=w)).collect();
        let r = rng.random_range(1e-3..0.3);
        let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let dn = norm(&dir).max(1e-300);
        let y: Vec<f64> = x.iter().zip(&dir).map(|(a, u)| a + r * u / dn).collect();
        let (gx, gy) = (base.grad_v(&x), base.grad_v(&y));
        c_v = c_v.max(diff_norm(&gx, &gy) / diff_norm(&x, &y));
        m_growth = m_growth.max(norm(&base.grad_j(&x)) / (1.0 + norm(&x)));

        let scale = rng.random_range(0.01..0.1);
        let moved: Vec<f64> =
            ensemble.coords().iter().map(|c| c + scale * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let nu = ParticleEnsemble::new(ensemble.len(), d, moved)?;
        let dist = w1(ensemble, &nu)?;
        if dist > 0.0 {
            let snap = obj.snapshot(&nu, stage)?;
            for (p, g0) in eval_points.iter().zip(&base_grads) {
                k_v = k_v.max(diff_norm(&snap.grad_v(p), g0) / dist);
            }
        }
    }
    Ok(LipschitzEstimate {
        c_v,
        k_v,
        m_growth,
        analytic_c_v: analytic_value_lipschitz(obj, stage),
        probes: opts.probes,
    })
}

/// Convexity margin `kappa lambda_H - C_V - K_V`.
pub fn lambda_j(kappa: f64, lambda_h: f64, c_v: f64, k_v: f64) -> f64 {
    kappa * lambda_h - c_v - k_v
}

/// Least-squares line through `(x, y)`: slope, intercept and `r^2`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, my - slope * mx, r2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayOptions {
    /// leading points skipped before fitting
    pub burn_in: usize,
    /// `J*` is the observed minimum minus this
    pub slack: f64,
    /// points whose gap `J - J*` is below this are excluded
    pub gap_floor: f64,
}

impl Default for DecayOptions {
    fn default() -> Self {
        Self { burn_in: 0, slack: 1e-9, gap_floor: 1e-7 }
    }
}

/// Exponential fits `J_t - J* ~ e^{-rate_j t}` and `W_2(mu_t, mu_T) ~ e^{-rate_w2 t}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub j_star: f64,
    pub rate_j: f64,
    pub r2_j: f64,
    pub rate_w2: Option<f64>,
    pub r2_w2: Option<f64>,
    /// fitted index range, end exclusive
    pub window: (usize, usize),
    /// `J` rose by more than round-off somewhere after burn-in
    pub non_monotone_tail: bool,
}

pub const MIN_FIT_POINTS: usize = 50;

/// Fit decay rates on a trace. `w2_to_final` may be empty to skip the
/// distance fit. The window runs from `burn_in` to the first point whose gap
/// drops under the floor.
pub fn fit_decay(times: &[f64], js: &[f64], w2_to_final: &[f64], opts: &DecayOptions) -> Result<DecayFit> {
    if times.len() != js.len() || (!w2_to_final.is_empty() && w2_to_final.len() != js.len()) {
        return Err(MeanflowError::SizeMismatch("decay fit series have different lengths".into()));
    }
    if js.len() < opts.burn_in + MIN_FIT_POINTS {
        return Err(MeanflowError::Indeterminate(format!(
            "need at least {MIN_FIT_POINTS} points after burn-in, have {}",
            js.len().saturating_sub(opts.burn_in)
        )));
    }
    let j_star = js.iter().copied().fold(f64::INFINITY, f64::min) - opts.slack;
    let start = opts.burn_in;
    let end = (start..js.len()).find(|&i| js[i] - j_star < opts.gap_floor).unwrap_or(js.len());
    if end - start < MIN_FIT_POINTS {
        return Err(MeanflowError::Indeterminate(format!(
            "only {} points above the gap floor after burn-in",
            end - start
        )));
    }
    let non_monotone_tail = js[start..].windows(2).any(|w| w[1] > w[0] + 1e-12 * (1.0 + w[0].abs()));
    let t = &times[start..end];
    let lg: Vec<f64> = js[start..end].iter().map(|j| (j - j_star).ln()).collect();
    let (slope, _, r2_j) = linear_fit(t, &lg);
    let (rate_w2, r2_w2) = if w2_to_final.is_empty() {
        (None, None)
    } else {
        let pts: Vec<(f64, f64)> =
            (start..end).filter(|&i| w2_to_final[i] > 0.0).map(|i| (times[i], w2_to_final[i].ln())).collect();
        if pts.len() < 2 {
            (None, None)
        } else {
            let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
            let (s, _, r2) = linear_fit(&x, &y);
            (Some(-s), Some(r2))
        }
    };
    Ok(DecayFit { j_star, rate_j: -slope, r2_j, rate_w2, r2_w2, window: (start, end), non_monotone_tail })
}

/// Convexity and decay summary of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LambdaReport {
    pub kappa: f64,
    pub lambda_u: f64,
    pub min_l_h_prime: f64,
    pub lambda_h: f64,
    pub c_v: f64,
    pub k_v: f64,
    pub lambda_j: f64,
    pub rate_j: Option<f64>,
    pub rate_w2: Option<f64>,
    pub r2_j: Option<f64>,
    pub r2_w2: Option<f64>,
    pub non_monotone_tail: Option<bool>,
}

impl LambdaReport {
    pub fn new(kappa: f64, lambda_u: f64, min_l_h_prime: f64, c_v: f64, k_v: f64, fit: Option<&DecayFit>) -> Self {
        let lambda_h = lambda_u * min_l_h_prime;
        Self {
            kappa,
            lambda_u,
            min_l_h_prime,
            lambda_h,
            c_v,
            k_v,
            lambda_j: lambda_j(kappa, lambda_h, c_v, k_v),
            rate_j: fit.map(|f| f.rate_j),
            rate_w2: fit.and_then(|f| f.rate_w2),
            r2_j: fit.map(|f| f.r2_j),
            r2_w2: fit.and_then(|f| f.r2_w2),
            non_monotone_tail: fit.map(|f| f.non_monotone_tail),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::RandomFourier;
    use crate::flow::ParamConfig;
    use crate::regularizers::RewardRegularizer;
    use crate::safety_mdp::BaseMdp;

    #[test]
    fn lambda_arithmetic() {
        assert_eq!(lambda_j(10.0, 1.0, 3.0, 4.0), 3.0);
        let r = LambdaReport::new(10.0, 1.0, 1.0, 3.0, 4.0, None);
        assert_eq!(r.lambda_j, 3.0);
        assert_eq!(r.rate_j, None);
    }

    #[test]
    fn recovers_exponential_rates() {
        let times: Vec<f64> = (0..3000).map(|i| i as f64 * 0.01).collect();
        let js: Vec<f64> = times.iter().map(|t| 2.0 + (-1.5 * t).exp()).collect();
        let w: Vec<f64> = times.iter().map(|t| 0.3 * (-0.75 * t).exp()).collect();
        let fit = fit_decay(&times, &js, &w, &DecayOptions { burn_in: 10, slack: 1e-12, gap_floor: 1e-9 }).unwrap();
        assert!((fit.rate_j - 1.5).abs() < 1e-3, "{fit:?}");
        assert!((fit.rate_w2.unwrap() - 0.75).abs() < 1e-6);
        assert!(fit.r2_j > 0.999);
        assert!(!fit.non_monotone_tail);
    }

    #[test]
    fn short_traces_are_indeterminate() {
        let t: Vec<f64> = (0..30).map(f64::from).collect();
        assert!(matches!(fit_decay(&t, &t, &[], &DecayOptions::default()), Err(MeanflowError::Indeterminate(_))));
    }

    #[test]
    fn probes_respect_the_closed_form_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mdp = BaseMdp::random(4, 3, 0.8, &mut rng).unwrap().augment().unwrap();
        let f = RandomFourier::new(mdp.n_states(), 3, 2, 1.0, 1.0, 2);
        let obj = Objective::new(&mdp, &f, RewardRegularizer::Entropy, &ParamConfig::default()).unwrap();
        let ens = ParticleEnsemble::standard_normal(8, 2, &mut rng);
        let stage = ScheduleStage { n: 1, m: 10.0, eps: 0.1, kappa: 1.0, sigma: 0.5 };
        let small =
            estimate_lipschitz(&obj, &ens, &stage, &LipschitzOptions { probes: 16, ..Default::default() }).unwrap();
        let big =
            estimate_lipschitz(&obj, &ens, &stage, &LipschitzOptions { probes: 32, ..Default::default() }).unwrap();
        assert!(big.c_v >= small.c_v && big.k_v >= small.k_v);
        assert!(big.c_v > 0.0 && big.c_v <= big.analytic_c_v, "{big:?}");
        assert!(big.k_v.is_finite() && big.m_growth.is_finite());
    }
}
