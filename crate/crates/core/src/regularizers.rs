//! Reward regularizers `F`, parameter regularizers `H` relative to a prior
//! `gamma = e^{-U} dx`, Gaussian mollification and the smoothed divergence
//! `H_sigma(mu) = ∫ H(rho_sigma e^U) e^{-U} dx` with its Wasserstein gradient.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeanflowError, Result};
use crate::policy::ParticleEnsemble;

/// Regularizer applied to the policy density `dens = d pi / d rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "key", rename_all = "kebab-case")]
pub enum RewardRegularizer {
    /// `F(z) = log z`
    Entropy,
    /// `F(z) = (z^{p-1} - 1) / (p - 1)`, `p > 1`
    Power { p: f64 },
}

impl RewardRegularizer {
    pub fn name(&self) -> &'static str {
        match self {
            RewardRegularizer::Entropy => "entropy",
            RewardRegularizer::Power { .. } => "power",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            RewardRegularizer::Power { p } if !(p > 1.0 && p.is_finite()) => {
                Err(MeanflowError::InvalidModel(format!("power regularizer needs p > 1, got {p}")))
            }
            _ => Ok(()),
        }
    }

    fn check(&self, z: f64) -> Result<()> {
        if z > 0.0 && z.is_finite() {
            Ok(())
        } else {
            Err(MeanflowError::Domain { name: self.name(), z })
        }
    }

    pub fn f(&self, z: f64) -> Result<f64> {
        self.check(z)?;
        Ok(self.f_unchecked(z))
    }

    pub fn f_prime(&self, z: f64) -> Result<f64> {
        self.check(z)?;
        Ok(self.f_prime_unchecked(z))
    }

    pub fn f_second(&self, z: f64) -> Result<f64> {
        self.check(z)?;
        Ok(match *self {
            RewardRegularizer::Entropy => -1.0 / (z * z),
            RewardRegularizer::Power { p } => (p - 2.0) * z.powf(p - 3.0),
        })
    }

    pub(crate) fn f_unchecked(&self, z: f64) -> f64 {
        match *self {
            RewardRegularizer::Entropy => z.ln(),
            RewardRegularizer::Power { p } => (z.powf(p - 1.0) - 1.0) / (p - 1.0),
        }
    }

    pub(crate) fn f_prime_unchecked(&self, z: f64) -> f64 {
        match *self {
            RewardRegularizer::Entropy => 1.0 / z,
            RewardRegularizer::Power { p } => z.powf(p - 2.0),
        }
    }

    /// `F` evaluated from `log z`; exact for the entropy variant even when `z` underflows.
    pub(crate) fn f_from_log(&self, log_z: f64) -> f64 {
        match *self {
            RewardRegularizer::Entropy => log_z,
            RewardRegularizer::Power { .. } => self.f_unchecked(log_z.exp()),
        }
    }

    /// `z F'(z)` from `log z`.
    pub(crate) fn z_f_prime_from_log(&self, log_z: f64) -> f64 {
        match *self {
            RewardRegularizer::Entropy => 1.0,
            RewardRegularizer::Power { p } => ((p - 1.0) * log_z).exp(),
        }
    }

    /// `(sup |F|, max(sup |F'|, sup |z F'|))` on `[lo, hi]`. Every shipped
    /// variant is monotone there, so the endpoints suffice.
    pub fn bounds_on(&self, lo: f64, hi: f64) -> (f64, f64) {
        let c0 = self.f_unchecked(lo).abs().max(self.f_unchecked(hi).abs());
        let c1 = [lo, hi]
            .iter()
            .flat_map(|&z| [self.f_prime_unchecked(z).abs(), (z * self.f_prime_unchecked(z)).abs()])
            .fold(0.0, f64::max);
        (c0, c1)
    }
}

/// Convex cost `H` of the likelihood ratio to the prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "key", rename_all = "kebab-case")]
pub enum ParamRegularizer {
    /// `H(s) = s log s - s + 1`
    Kl,
    /// `H(s) = (s^m - m s + m - 1) / (m (m - 1))`
    MEntropy { m: f64 },
}

impl ParamRegularizer {
    pub fn name(&self) -> &'static str {
        match self {
            ParamRegularizer::Kl => "kl",
            ParamRegularizer::MEntropy { .. } => "m-entropy",
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let ParamRegularizer::MEntropy { m } = *self {
            let lo = (d as f64 - 1.0) / d as f64;
            if !(m.is_finite() && m >= lo) || m == 1.0 {
                return Err(MeanflowError::InvalidModel(format!(
                    "m-entropy needs m in [{lo}, 1) or (1, inf), got {m}; use kl for m = 1"
                )));
            }
        }
        Ok(())
    }

    pub fn h(&self, s: f64) -> f64 {
        match *self {
            ParamRegularizer::Kl => {
                if s == 0.0 {
                    1.0
                } else {
                    s * s.ln() - s + 1.0
                }
            }
            ParamRegularizer::MEntropy { m } => (s.powf(m) - m * s + m - 1.0) / (m * (m - 1.0)),
        }
    }

    pub fn h_prime(&self, s: f64) -> f64 {
        match *self {
            ParamRegularizer::Kl => s.ln(),
            ParamRegularizer::MEntropy { m } => (s.powf(m - 1.0) - 1.0) / (m - 1.0),
        }
    }

    pub fn h_second(&self, s: f64) -> f64 {
        match *self {
            ParamRegularizer::Kl => 1.0 / s,
            ParamRegularizer::MEntropy { m } => s.powf(m - 2.0),
        }
    }

    /// `L_H(u) = u H'(u) - H(u)`
    pub fn l_h(&self, u: f64) -> f64 {
        match *self {
            ParamRegularizer::Kl => u - 1.0,
            ParamRegularizer::MEntropy { m } => (u.powf(m) - 1.0) / m,
        }
    }

    pub fn l_h_prime(&self, u: f64) -> f64 {
        match *self {
            ParamRegularizer::Kl => 1.0,
            ParamRegularizer::MEntropy { m } => u.powf(m - 1.0),
        }
    }

    /// `H'` from `log s`, finite for KL even where `s` underflows.
    fn h_prime_from_log(&self, log_s: f64) -> f64 {
        match *self {
            ParamRegularizer::Kl => log_s,
            ParamRegularizer::MEntropy { .. } => self.h_prime(log_s.exp()),
        }
    }

    /// `H(s) - H(0)` from `log s`.
    fn h_excess_from_log(&self, log_s: f64) -> f64 {
        let s = log_s.exp();
        match *self {
            ParamRegularizer::Kl => s * log_s - s,
            ParamRegularizer::MEntropy { .. } => self.h(s) - self.h(0.0),
        }
    }
}

/// `gamma = e^{-U} dx` with `U` convex and normalized.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "key", rename_all = "kebab-case")]
pub enum PriorSpec {
    /// `U(x) = |x|^2 / 2 + (d/2) log 2 pi`
    Gaussian,
    /// `U(x) = |x|^2 / 2 + a |x|^4 / 4 + log Z`; the gradient grows cubically.
    Quartic { a: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePrior {
    spec: PriorSpec,
    dim: usize,
    log_normalizer: f64,
}

impl ReferencePrior {
    pub fn new(spec: PriorSpec, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(MeanflowError::InvalidModel("prior dimension must be >= 1".into()));
        }
        let log_normalizer = match spec {
            PriorSpec::Gaussian => 0.5 * dim as f64 * (2.0 * PI).ln(),
            PriorSpec::Quartic { a } => {
                if !(a >= 0.0 && a.is_finite()) {
                    return Err(MeanflowError::InvalidModel(format!("quartic prior needs a >= 0, got {a}")));
                }
                radial_log_normalizer(dim, |r| 0.5 * r * r + 0.25 * a * r.powi(4))
            }
        };
        Ok(Self { spec, dim, log_normalizer })
    }

    pub fn gaussian(dim: usize) -> Self {
        Self::new(PriorSpec::Gaussian, dim).expect("valid dimension")
    }

    pub fn spec(&self) -> PriorSpec {
        self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn u(&self, x: &[f64]) -> f64 {
        let r2: f64 = x.iter().map(|v| v * v).sum();
        let quartic = match self.spec {
            PriorSpec::Gaussian => 0.0,
            PriorSpec::Quartic { a } => 0.25 * a * r2 * r2,
        };
        0.5 * r2 + quartic + self.log_normalizer
    }

    pub fn grad_u(&self, x: &[f64]) -> Vec<f64> {
        let scale = match self.spec {
            PriorSpec::Gaussian => 1.0,
            PriorSpec::Quartic { a } => 1.0 + a * x.iter().map(|v| v * v).sum::<f64>(),
        };
        x.iter().map(|v| scale * v).collect()
    }

    /// Draws from `gamma`: Gaussian directly, quartic by rejection from the
    /// standard Gaussian with acceptance `exp(-a |x|^4 / 4)`.
    pub fn sample<R: rand::Rng + ?Sized>(&self, n: usize, rng: &mut R) -> ParticleEnsemble {
        use rand_distr::{Distribution, StandardNormal};
        let d = self.dim;
        let mut coords = Vec::with_capacity(n * d);
        while coords.len() < n * d {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            let accept = match self.spec {
                PriorSpec::Gaussian => true,
                PriorSpec::Quartic { a } => {
                    let r2: f64 = x.iter().map(|v| v * v).sum();
                    rng.random::<f64>() < (-0.25 * a * r2 * r2).exp()
                }
            };
            if accept {
                coords.extend(x);
            }
        }
        ParticleEnsemble::new(n, d, coords).expect("finite samples")
    }

    /// Convexity modulus of `U`.
    pub fn lambda_u(&self) -> f64 {
        1.0
    }
}

/// `log ∫_{R^d} e^{-V(|x|)} dx` by radial Simpson quadrature.
fn radial_log_normalizer(dim: usize, v: impl Fn(f64) -> f64) -> f64 {
    let d = dim as f64;
    // surface area of the unit sphere in R^d
    let log_area = (2.0f64).ln() + 0.5 * d * PI.ln() - ln_gamma(0.5 * d);
    let (r_max, n) = (40.0, 200_000usize);
    let h = r_max / n as f64;
    let f = |r: f64| {
        if r == 0.0 {
            if dim == 1 {
                1.0
            } else {
                0.0
            }
        } else {
            r.powf(d - 1.0) * (-v(r)).exp()
        }
    };
    let mut acc = f(0.0) + f(r_max);
    for i in 1..n {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i as f64 * h);
    }
    log_area + (acc * h / 3.0).ln()
}

/// Lanczos approximation, accurate to ~1e-15 for positive arguments.
fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (PI / (PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Gaussian kernel `eta(x) = (2 pi sigma)^{-d/2} exp(-|x|^2 / (2 sigma))`; `sigma` is the variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mollifier {
    sigma: f64,
}

impl Mollifier {
    pub fn new(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(MeanflowError::InvalidModel(format!("mollifier width must be > 0, got {sigma}")));
        }
        Ok(Self { sigma })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn log_eta(&self, z: &[f64]) -> f64 {
        let r2: f64 = z.iter().map(|v| v * v).sum();
        -0.5 * z.len() as f64 * (2.0 * PI * self.sigma).ln() - r2 / (2.0 * self.sigma)
    }

    pub fn eta(&self, z: &[f64]) -> f64 {
        self.log_eta(z).exp()
    }

    pub fn grad_eta(&self, z: &[f64]) -> Vec<f64> {
        let e = self.eta(z);
        z.iter().map(|v| -e * v / self.sigma).collect()
    }

    /// `sup |d^2 eta / dx_j^2| = eta(0) / sigma`
    pub fn hessian_diag_bound(&self, d: usize) -> f64 {
        self.eta(&vec![0.0; d]) / self.sigma
    }
}

/// `(rho_sigma(x), grad rho_sigma(x))` for the empirical measure.
pub fn mollified_density(ensemble: &ParticleEnsemble, moll: &Mollifier, x: &[f64]) -> (f64, Vec<f64>) {
    let (log_rho, score) = log_mollified_density(ensemble, moll, x);
    let rho = log_rho.exp();
    (rho, score.iter().map(|s| s * rho).collect())
}

/// `(log rho_sigma(x), grad log rho_sigma(x))`, evaluated by log-sum-exp so it
/// stays finite far from the particles.
pub fn log_mollified_density(ensemble: &ParticleEnsemble, moll: &Mollifier, x: &[f64]) -> (f64, Vec<f64>) {
    let d = x.len();
    let mut z = vec![0.0; d];
    let logs: Vec<f64> = ensemble
        .iter()
        .map(|xi| {
            z.iter_mut().zip(x.iter().zip(xi)).for_each(|(zj, (a, b))| *zj = a - b);
            moll.log_eta(&z)
        })
        .collect();
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    let mut grad = vec![0.0; d];
    for (xi, &l) in ensemble.iter().zip(&logs) {
        let w = (l - mx).exp();
        sum += w;
        for j in 0..d {
            grad[j] -= w * (x[j] - xi[j]) / moll.sigma;
        }
    }
    grad.iter_mut().for_each(|g| *g /= sum);
    (mx + sum.ln() - (ensemble.len() as f64).ln(), grad)
}

/// Tensor quadrature grid on a box in `R^d`, `d <= 2`, with equal cell weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadGrid {
    lo: Vec<f64>,
    spacing: f64,
    counts: Vec<usize>,
}

impl QuadGrid {
    pub const MAX_DIM: usize = 2;

    pub fn new(lo: Vec<f64>, spacing: f64, counts: Vec<usize>) -> Result<Self> {
        if lo.is_empty() || lo.len() > Self::MAX_DIM || lo.len() != counts.len() {
            return Err(MeanflowError::Unsupported(format!("quadrature grids cover d in 1..=2, got d = {}", lo.len())));
        }
        if !(spacing > 0.0) || counts.contains(&0) {
            return Err(MeanflowError::InvalidModel("quadrature grid needs positive spacing and counts".into()));
        }
        Ok(Self { lo, spacing, counts })
    }

    /// Box around the particles padded by `extent * sqrt(sigma)`, spacing
    /// `min(sigma, sqrt sigma) / spacing_div`, with corners snapped to
    /// multiples of the spacing.
    pub fn covering(ensemble: &ParticleEnsemble, moll: &Mollifier, extent: f64, spacing_div: f64) -> Result<Self> {
        let d = ensemble.dim();
        if d > Self::MAX_DIM {
            return Err(MeanflowError::Unsupported(format!("quadrature grids cover d in 1..=2, got d = {d}")));
        }
        let s = moll.sigma();
        let h = s.min(s.sqrt()) / spacing_div;
        let pad = extent * s.sqrt();
        let mut lo = Vec::with_capacity(d);
        let mut counts = Vec::with_capacity(d);
        for j in 0..d {
            let (mn, mx) =
                ensemble.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x[j]), b.max(x[j])));
            let a = ((mn - pad) / h).floor();
            let b = ((mx + pad) / h).ceil();
            lo.push(a * h);
            counts.push((b - a) as usize + 1);
        }
        Self::new(lo, h, counts)
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing.powi(self.dim() as i32)
    }

    pub fn len(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        let mut rem = idx;
        let mut p = Vec::with_capacity(self.dim());
        for j in 0..self.dim() {
            p.push(self.lo[j] + (rem % self.counts[j]) as f64 * self.spacing);
            rem /= self.counts[j];
        }
        p
    }

    pub fn points(&self) -> Vec<Vec<f64>> {
        (0..self.len()).map(|i| self.point(i)).collect()
    }

    /// Whether the index lies on the outer layer of the box.
    pub fn on_boundary(&self, idx: usize) -> bool {
        let mut rem = idx;
        for &c in &self.counts {
            let k = rem % c;
            if k == 0 || k + 1 == c {
                return true;
            }
            rem /= c;
        }
        false
    }
}

/// How the parameter regularizer's gradient is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGradMode {
    /// Exact gradient of the quadrature value (d <= 2).
    Quadrature,
    /// Particle energy `(1/N) sum_i [log rho_sigma(x_i) + U(x_i)]` and its exact
    /// gradient; grid-free, KL only.
    Blob,
}

/// `H_sigma(mu)` evaluated on a grid together with the field needed for its
/// gradient, `w H'(nu_g)` at each node.
#[derive(Debug, Clone)]
pub struct SmoothedDivergence {
    value: f64,
    uncovered_mass: f64,
    boundary_mass: f64,
    nodes: Vec<Vec<f64>>,
    field: Vec<f64>,
    min_l_h_prime: f64,
    moll: Mollifier,
}

impl SmoothedDivergence {
    pub fn new(
        ensemble: &ParticleEnsemble,
        reg: ParamRegularizer,
        prior: &ReferencePrior,
        moll: Mollifier,
        grid: &QuadGrid,
    ) -> Result<Self> {
        if grid.dim() != ensemble.dim() || prior.dim() != ensemble.dim() {
            return Err(MeanflowError::SizeMismatch("grid, prior and ensemble dimensions differ".into()));
        }
        reg.validate(ensemble.dim())?;
        let w = grid.cell_volume();
        let per_node: Vec<(f64, f64, f64, f64, f64)> = (0..grid.len())
            .into_par_iter()
            .map(|g| {
                let y = grid.point(g);
                let (log_rho, _) = log_mollified_density(ensemble, &moll, &y);
                let u = prior.u(&y);
                let log_nu = log_rho + u;
                let gamma = (-u).exp();
                let rho = log_rho.exp();
                let boundary = if grid.on_boundary(g) { rho } else { 0.0 };
                (
                    w * reg.h_excess_from_log(log_nu) * gamma,
                    w * rho,
                    w * boundary,
                    w * reg.h_prime_from_log(log_nu),
                    if rho > 1e-12 { reg.l_h_prime(log_nu.exp()) } else { f64::INFINITY },
                )
            })
            .collect();
        let mut value = 0.0;
        let mut rho_mass = 0.0;
        let mut boundary_mass = 0.0;
        let mut min_l_h_prime = f64::INFINITY;
        let mut field = Vec::with_capacity(per_node.len());
        for &(v, rm, bm, f, lp) in &per_node {
            value += v;
            rho_mass += rm;
            boundary_mass += bm;
            min_l_h_prime = min_l_h_prime.min(lp);
            field.push(f);
        }
        // H(0) integrates against the prior exactly; only the excess needs the grid.
        value += reg.h(0.0);
        Ok(Self {
            value,
            uncovered_mass: (1.0 - rho_mass).abs(),
            boundary_mass,
            nodes: grid.points(),
            field,
            min_l_h_prime,
            moll,
        })
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `|1 - ∫ rho_sigma|` on the grid.
    pub fn uncovered_mass(&self) -> f64 {
        self.uncovered_mass
    }

    /// Density mass carried by the outermost grid layer.
    pub fn boundary_mass(&self) -> f64 {
        self.boundary_mass
    }

    /// True when the grid misses more than `1e-8` of the mollified density.
    pub fn coverage_warning(&self) -> bool {
        self.boundary_mass > 1e-8
    }

    /// Smallest `L_H'(nu_sigma)` over nodes carrying density.
    pub fn min_l_h_prime(&self) -> f64 {
        self.min_l_h_prime
    }

    /// `sum_g w H'(nu_g) eta(y_g - x) (y_g - x) / sigma`: `N` times the
    /// derivative of the quadrature value in the position of a particle at `x`.
    pub fn grad(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d];
        let mut z = vec![0.0; d];
        let s = self.moll.sigma();
        for (y, &f) in self.nodes.iter().zip(&self.field) {
            z.iter_mut().zip(y.iter().zip(x)).for_each(|(zj, (a, b))| *zj = a - b);
            let e = self.moll.eta(&z);
            if e == 0.0 {
                continue;
            }
            let c = f * e / s;
            out.iter_mut().zip(&z).for_each(|(o, zj)| *o += c * zj);
        }
        out
    }
}

/// Quadrature value of `H_sigma(mu)`, plus the boundary mass for coverage checks.
pub fn divergence_h_sigma(
    ensemble: &ParticleEnsemble,
    reg: ParamRegularizer,
    prior: &ReferencePrior,
    moll: Mollifier,
    grid: &QuadGrid,
) -> Result<SmoothedDivergence> {
    SmoothedDivergence::new(ensemble, reg, prior, moll, grid)
}

/// Wasserstein gradient of the quadrature value at `x`.
pub fn grad_h_sigma(
    ensemble: &ParticleEnsemble,
    reg: ParamRegularizer,
    prior: &ReferencePrior,
    moll: Mollifier,
    grid: &QuadGrid,
    x: &[f64],
) -> Result<Vec<f64>> {
    Ok(SmoothedDivergence::new(ensemble, reg, prior, moll, grid)?.grad(x))
}

/// Grid-free score `H''(nu_sigma) grad nu_sigma` with the mollified density in
/// place of the true one; for KL this is `grad log rho_sigma + grad U`.
/// Returns `None` when `rho_sigma(x) < 1e-300`.
pub fn score_blob(
    ensemble: &ParticleEnsemble,
    reg: ParamRegularizer,
    prior: &ReferencePrior,
    moll: &Mollifier,
    x: &[f64],
) -> Option<Vec<f64>> {
    let (log_rho, score) = log_mollified_density(ensemble, moll, x);
    if log_rho < (1e-300f64).ln() {
        return None;
    }
    let grad_u = prior.grad_u(x);
    let log_nu = log_rho + prior.u(x);
    // grad nu = nu (grad log rho + grad U)
    let scale = match reg {
        ParamRegularizer::Kl => 1.0,
        ParamRegularizer::MEntropy { .. } => {
            let nu = log_nu.exp();
            reg.h_second(nu) * nu
        }
    };
    Some(score.iter().zip(&grad_u).map(|(s, g)| scale * (s + g)).collect())
}

/// Particle KL energy `E(mu) = (1/N) sum_i [log rho_sigma(x_i) + U(x_i)]`
/// with its first-variation gradient
/// `grad log rho_sigma(x) + grad U(x) + (1/N) sum_i eta(x_i - x) (x_i - x) / (sigma rho_sigma(x_i))`.
#[derive(Debug, Clone)]
pub struct BlobEnergy {
    value: f64,
    log_rho: Vec<f64>,
    moll: Mollifier,
}

impl BlobEnergy {
    pub fn new(ensemble: &ParticleEnsemble, prior: &ReferencePrior, moll: Mollifier) -> Self {
        let parts: Vec<&[f64]> = ensemble.iter().collect();
        let log_rho: Vec<f64> = parts.par_iter().map(|x| log_mollified_density(ensemble, &moll, x).0).collect();
        let value = parts.iter().zip(&log_rho).map(|(x, l)| l + prior.u(x)).sum::<f64>() / ensemble.len() as f64;
        Self { value, log_rho, moll }
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// `N` times the derivative of the energy in a particle located at `x`
    /// (at particle positions), or the first-variation gradient elsewhere.
    pub fn grad(&self, ensemble: &ParticleEnsemble, prior: &ReferencePrior, x: &[f64]) -> Vec<f64> {
        let n = ensemble.len() as f64;
        let (_, score) = log_mollified_density(ensemble, &self.moll, x);
        let mut g: Vec<f64> = score.iter().zip(prior.grad_u(x)).map(|(s, u)| s + u).collect();
        let mut z = vec![0.0; x.len()];
        for (xi, &lr) in ensemble.iter().zip(&self.log_rho) {
            z.iter_mut().zip(xi.iter().zip(x)).for_each(|(zj, (a, b))| *zj = a - b);
            let c = (self.moll.log_eta(&z) - lr).exp() / (n * self.moll.sigma());
            g.iter_mut().zip(&z).for_each(|(gj, zj)| *gj += c * zj);
        }
        g
    }
}

pub fn blob_energy(ensemble: &ParticleEnsemble, prior: &ReferencePrior, moll: &Mollifier) -> f64 {
    BlobEnergy::new(ensemble, prior, *moll).value()
}

/// `N` times the derivative of [`blob_energy`] in each particle, row-major `N x d`.
pub fn blob_energy_gradient(ensemble: &ParticleEnsemble, prior: &ReferencePrior, moll: &Mollifier) -> Vec<f64> {
    let e = BlobEnergy::new(ensemble, prior, *moll);
    let parts: Vec<&[f64]> = ensemble.iter().collect();
    parts.par_iter().map(|x| e.grad(ensemble, prior, x)).collect::<Vec<_>>().concat()
}

/// Bregman `m`-relative entropy of two densities tabulated on a shared grid
/// with cell volume `cell`.
pub fn m_entropy_eval(rho: &[f64], sigma: &[f64], cell: f64, m: f64) -> Result<f64> {
    if m == 1.0 {
        return Err(MeanflowError::Unsupported("m = 1 is the KL case".into()));
    }
    if !(m > 0.0 && m.is_finite()) {
        return Err(MeanflowError::InvalidModel(format!("m-entropy needs m > 0, got {m}")));
    }
    if rho.len() != sigma.len() {
        return Err(MeanflowError::SizeMismatch("density tables differ in length".into()));
    }
    let sum: f64 = rho
        .iter()
        .zip(sigma)
        .map(|(&r, &s)| {
            let cross = if s == 0.0 { 0.0 } else { m * r * s.powf(m - 1.0) };
            r.powf(m) - cross + (m - 1.0) * s.powf(m)
        })
        .sum();
    Ok(sum * cell / (m * (m - 1.0)))
}
