//! Mean-field softmax policy `pi_mu(da|s) ∝ exp(∫ psi(s,a,x) dmu(x)) drho(a)`
//! over a finite action grid, and its first variation in `mu`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MeanflowError, Result};
use crate::features::FeatureMap;
use crate::safety_mdp::{sample_categorical, AugmentedMdp};

/// Uniform-weight empirical measure `(1/N) sum_i delta_{x_i}` on `R^d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleEnsemble {
    n: usize,
    d: usize,
    /// row-major `N x d`
    coords: Vec<f64>,
}

impl ParticleEnsemble {
    pub fn new(n: usize, d: usize, coords: Vec<f64>) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(MeanflowError::SizeMismatch("ensemble needs N >= 1 and d >= 1".into()));
        }
        if coords.len() != n * d {
            return Err(MeanflowError::SizeMismatch(format!("expected {} coordinates, got {}", n * d, coords.len())));
        }
        if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
            return Err(MeanflowError::NonFiniteUpdate { particle: i / d, step: 0 });
        }
        Ok(Self { n, d, coords })
    }

    /// `N` i.i.d. standard Gaussian particles.
    pub fn standard_normal<R: Rng + ?Sized>(n: usize, d: usize, rng: &mut R) -> Self {
        let coords = (0..n * d).map(|_| StandardNormal.sample(rng)).collect();
        Self { n, d, coords }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn particle_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.d)
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.d];
        for x in self.iter() {
            m.iter_mut().zip(x).for_each(|(mi, xi)| *mi += xi);
        }
        m.iter_mut().for_each(|mi| *mi /= self.n as f64);
        m
    }
}

/// On-disk form of an ensemble: flat `N x d` coordinates plus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleFile {
    pub n: usize,
    pub d: usize,
    pub feature_key: String,
    pub seed: u64,
    pub config_hash: String,
    pub coords: Vec<f64>,
}

impl EnsembleFile {
    pub fn new(ensemble: &ParticleEnsemble, feature_key: &str, seed: u64, config_hash: &str) -> Self {
        Self {
            n: ensemble.n,
            d: ensemble.d,
            feature_key: feature_key.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            coords: ensemble.coords.clone(),
        }
    }

    pub fn into_ensemble(self) -> Result<ParticleEnsemble> {
        ParticleEnsemble::new(self.n, self.d, self.coords)
    }
}

/// Snapshot of `pi_mu` on a finite (state, action) table. Densities are with
/// respect to `rho`; `mass = rho * dens` sums to one per state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEval {
    n_states: usize,
    n_actions: usize,
    rho: Vec<f64>,
    logits: Vec<f64>,
    log_z: Vec<f64>,
    dens: Vec<f64>,
    log_dens: Vec<f64>,
    mass: Vec<f64>,
}

impl PolicyEval {
    pub fn compute(ensemble: &ParticleEnsemble, features: &dyn FeatureMap, mdp: &AugmentedMdp) -> Result<Self> {
        if features.n_states() != mdp.n_states() || features.n_actions() != mdp.n_actions() {
            return Err(MeanflowError::SizeMismatch(format!(
                "feature map covers {}x{} but the model has {}x{}",
                features.n_states(),
                features.n_actions(),
                mdp.n_states(),
                mdp.n_actions()
            )));
        }
        Self::from_parts(ensemble, features, mdp.rho())
    }

    pub fn from_parts(ensemble: &ParticleEnsemble, features: &dyn FeatureMap, rho: &[f64]) -> Result<Self> {
        let (ns, na) = (features.n_states(), features.n_actions());
        if na == 0 || rho.len() != na {
            return Err(MeanflowError::SizeMismatch("action grid empty or rho length mismatch".into()));
        }
        if ensemble.dim() != features.dim() {
            return Err(MeanflowError::SizeMismatch(format!(
                "ensemble dimension {} does not match feature dimension {}",
                ensemble.dim(),
                features.dim()
            )));
        }
        let inv_n = 1.0 / ensemble.len() as f64;
        let mut logits = vec![0.0; ns * na];
        for s in 0..ns {
            for a in 0..na {
                let mut acc = 0.0;
                for (i, x) in ensemble.iter().enumerate() {
                    let v = features.eval(s, a, x);
                    if !v.is_finite() {
                        return Err(MeanflowError::NonFiniteFeature { state: s, action: a, particle: i });
                    }
                    acc += v;
                }
                logits[s * na + a] = acc * inv_n;
            }
        }
        Ok(Self::from_logits(ns, na, rho.to_vec(), logits))
    }

    /// Log-sum-exp normalization of a logit table.
    pub fn from_logits(n_states: usize, n_actions: usize, rho: Vec<f64>, logits: Vec<f64>) -> Self {
        let na = n_actions;
        let mut log_z = vec![0.0; n_states];
        let mut dens = vec![0.0; n_states * na];
        let mut log_dens = vec![0.0; n_states * na];
        let mut mass = vec![0.0; n_states * na];
        for s in 0..n_states {
            let row = &logits[s * na..(s + 1) * na];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().zip(&rho).map(|(l, r)| r * (l - mx).exp()).sum();
            let lz = mx + sum.ln();
            log_z[s] = lz;
            for a in 0..na {
                let ld = row[a] - lz;
                log_dens[s * na + a] = ld;
                dens[s * na + a] = ld.exp();
                mass[s * na + a] = rho[a] * ld.exp();
            }
        }
        Self { n_states, n_actions, rho, logits, log_z, dens, log_dens, mass }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn rho(&self) -> &[f64] {
        &self.rho
    }

    pub fn logit(&self, s: usize, a: usize) -> f64 {
        self.logits[s * self.n_actions + a]
    }

    pub fn log_normalizer(&self, s: usize) -> f64 {
        self.log_z[s]
    }

    /// `d pi / d rho (a|s)`.
    pub fn dens(&self, s: usize, a: usize) -> f64 {
        self.dens[s * self.n_actions + a]
    }

    pub fn log_dens(&self, s: usize, a: usize) -> f64 {
        self.log_dens[s * self.n_actions + a]
    }

    /// `pi(a|s) = rho(a) * dens(a|s)`.
    pub fn mass(&self, s: usize, a: usize) -> f64 {
        self.mass[s * self.n_actions + a]
    }

    pub fn masses(&self, s: usize) -> &[f64] {
        &self.mass[s * self.n_actions..(s + 1) * self.n_actions]
    }

    pub fn sample_action<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> usize {
        sample_categorical(self.masses(s), rng)
    }

    /// Total variation style distance `sup_s sum_a |pi'(a|s) - pi(a|s)|`.
    pub fn tv_distance(&self, other: &PolicyEval) -> f64 {
        (0..self.n_states)
            .map(|s| self.masses(s).iter().zip(other.masses(s)).map(|(p, q)| (p - q).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

impl crate::safety_mdp::ActionSampler for PolicyEval {
    fn sample_action(&self, aug_state: usize, rng: &mut dyn rand::RngCore) -> usize {
        sample_categorical(self.masses(aug_state), rng)
    }
}

/// Density (w.r.t. `rho`) of `(δπ_μ/δμ)(μ, x)(·|s)`:
/// `v(a) = [psi(s,a,x) - sum_a' pi(a'|s) psi(s,a',x)] dens(a|s)`.
pub fn func_deriv_kernel(policy: &PolicyEval, features: &dyn FeatureMap, s: usize, x: &[f64]) -> Vec<f64> {
    let na = policy.n_actions();
    let psi: Vec<f64> = (0..na).map(|a| features.eval(s, a, x)).collect();
    let centre: f64 = (0..na).map(|a| policy.mass(s, a) * psi[a]).sum();
    (0..na).map(|a| (psi[a] - centre) * policy.dens(s, a)).collect()
}

/// `g(a) = [grad psi(s,a,x) - sum_a' pi(a'|s) grad psi(s,a',x)] dens(a|s)`,
/// returned row-major as `A x d`.
pub fn grad_x_func_deriv(policy: &PolicyEval, features: &dyn FeatureMap, s: usize, x: &[f64]) -> Vec<f64> {
    let na = policy.n_actions();
    let d = features.dim();
    let mut grads = vec![0.0; na * d];
    for a in 0..na {
        features.grad_x(s, a, x, &mut grads[a * d..(a + 1) * d]);
    }
    let mut centre = vec![0.0; d];
    for a in 0..na {
        let m = policy.mass(s, a);
        centre.iter_mut().zip(&grads[a * d..(a + 1) * d]).for_each(|(c, g)| *c += m * g);
    }
    for a in 0..na {
        let dens = policy.dens(s, a);
        grads[a * d..(a + 1) * d].iter_mut().zip(&centre).for_each(|(g, c)| *g = (*g - c) * dens);
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{RandomFourier, TabularIndicator};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// psi(s,a,x) = x_0 * 1{a = 0}
    #[derive(Debug)]
    struct FirstActionLinear;

    impl FeatureMap for FirstActionLinear {
        fn key(&self) -> &'static str {
            "test-linear"
        }
        fn dim(&self) -> usize {
            1
        }
        fn n_states(&self) -> usize {
            1
        }
        fn n_actions(&self) -> usize {
            2
        }
        fn eval(&self, _s: usize, a: usize, x: &[f64]) -> f64 {
            if a == 0 {
                x[0]
            } else {
                0.0
            }
        }
        fn grad_x(&self, _s: usize, a: usize, _x: &[f64], out: &mut [f64]) {
            out[0] = if a == 0 { 1.0 } else { 0.0 };
        }
        fn sup_norm(&self) -> f64 {
            f64::INFINITY
        }
        fn grad_sup_norm(&self) -> f64 {
            1.0
        }
        fn hess_sup_norm(&self) -> f64 {
            0.0
        }
    }

    /// psi(s,a,x) = c * sin(x_0 + s), the same for every action.
    #[derive(Debug)]
    struct ActionFree(usize, usize);

    impl FeatureMap for ActionFree {
        fn key(&self) -> &'static str {
            "test-action-free"
        }
        fn dim(&self) -> usize {
            1
        }
        fn n_states(&self) -> usize {
            self.0
        }
        fn n_actions(&self) -> usize {
            self.1
        }
        fn eval(&self, s: usize, _a: usize, x: &[f64]) -> f64 {
            (x[0] + s as f64).sin()
        }
        fn grad_x(&self, s: usize, _a: usize, x: &[f64], out: &mut [f64]) {
            out[0] = (x[0] + s as f64).cos();
        }
        fn sup_norm(&self) -> f64 {
            1.0
        }
        fn grad_sup_norm(&self) -> f64 {
            1.0
        }
        fn hess_sup_norm(&self) -> f64 {
            1.0
        }
    }

    #[test]
    fn zero_logits_give_uniform_density() {
        let f = TabularIndicator::new(2, 3, 1.0);
        let ens = ParticleEnsemble::new(2, 6, vec![0.0; 12]).unwrap();
        let rho = vec![0.5, 1.0, 0.5];
        let pe = PolicyEval::from_parts(&ens, &f, &rho).unwrap();
        for s in 0..2 {
            for a in 0..3 {
                assert!((pe.dens(s, a) - 0.5).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn action_free_features_give_uniform_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = ActionFree(3, 4);
        let ens = ParticleEnsemble::standard_normal(5, 1, &mut rng);
        let pe = PolicyEval::from_parts(&ens, &f, &[1.0; 4]).unwrap();
        for s in 0..3 {
            for a in 0..4 {
                assert!((pe.mass(s, a) - 0.25).abs() < 1e-14);
            }
            let v = func_deriv_kernel(&pe, &f, s, &[0.3]);
            assert!(v.iter().all(|vi| vi.abs() < 1e-14));
            let g = grad_x_func_deriv(&pe, &f, s, &[0.3]);
            assert!(g.iter().all(|gi| gi.abs() < 1e-14));
        }
    }

    #[test]
    fn two_action_softmax_closed_form() {
        // logit difference 10, rho = (1/2, 1/2): pi(a_1) = e^10 / (e^10 + 1)
        let ens = ParticleEnsemble::new(3, 1, vec![10.0; 3]).unwrap();
        let pe = PolicyEval::from_parts(&ens, &FirstActionLinear, &[0.5, 0.5]).unwrap();
        let expected = 10f64.exp() / (10f64.exp() + 1.0);
        assert!((pe.mass(0, 0) - expected).abs() < 1e-14);
        assert!((pe.mass(0, 0) - 0.999_954_6).abs() < 1e-7);
        assert!((pe.dens(0, 0) - 2.0 * expected).abs() < 1e-13);
    }

    #[test]
    fn sampling_frequencies() {
        let pe = PolicyEval::from_logits(1, 4, vec![1.0; 4], vec![0.0; 4]);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; 4];
        let draws = 1_000_000;
        for _ in 0..draws {
            counts[pe.sample_action(0, &mut rng)] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.002);
        }

        let ens = ParticleEnsemble::new(1, 1, vec![10.0]).unwrap();
        let sharp = PolicyEval::from_parts(&ens, &FirstActionLinear, &[0.5, 0.5]).unwrap();
        let hits = (0..100_000).filter(|_| sharp.sample_action(0, &mut rng) == 0).count();
        assert!(hits as f64 / 1e5 >= 0.9999);

        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a: Vec<usize> = (0..100).map(|_| pe.sample_action(0, &mut r1)).collect();
        let b: Vec<usize> = (0..100).map(|_| pe.sample_action(0, &mut r2)).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn functional_derivative_first_order_convergence() {
        // mu_t = (1-t) mu + t delta_{x'}: the density derivative at t=0 is
        // ∫ δπ/δμ d[δ_{x'} - μ] = v(x') - mean_i v(x_i).
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = RandomFourier::new(1, 2, 1, 1.5, 1.0, 4);
        let ens = ParticleEnsemble::standard_normal(8, 1, &mut rng);
        let rho = [0.5, 0.5];
        let pe = PolicyEval::from_parts(&ens, &f, &rho).unwrap();
        let xp = [0.7];
        let vp = func_deriv_kernel(&pe, &f, 0, &xp);
        let mut predicted = vp.clone();
        for x in ens.iter() {
            let v = func_deriv_kernel(&pe, &f, 0, x);
            predicted.iter_mut().zip(&v).for_each(|(p, vi)| *p -= vi / 8.0);
        }
        // mixture logits are linear in t
        let mut errs = Vec::new();
        for &t in &[1e-2, 5e-3, 2.5e-3] {
            let logits: Vec<f64> = (0..2).map(|a| (1.0 - t) * pe.logit(0, a) + t * f.eval(0, a, &xp)).collect();
            let pt = PolicyEval::from_logits(1, 2, rho.to_vec(), logits);
            let err: f64 = (0..2).map(|a| ((pt.dens(0, a) - pe.dens(0, a)) / t - predicted[a]).abs()).sum();
            errs.push(err);
        }
        assert!(errs[0] < 1e-2);
        let order = (errs[0] / errs[2]).log2() / 2.0;
        assert!(order > 0.9, "observed order {order}");
    }

    #[test]
    fn grad_kernel_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = RandomFourier::new(2, 3, 2, 1.2, 1.0, 17);
        let ens = ParticleEnsemble::standard_normal(6, 2, &mut rng);
        let pe = PolicyEval::from_parts(&ens, &f, &[1.0, 0.5, 0.25]).unwrap();
        let x = [0.2, -0.4];
        for s in 0..2 {
            let g = grad_x_func_deriv(&pe, &f, s, &x);
            for j in 0..2 {
                let h = 1e-6;
                let mut xp = x;
                let mut xm = x;
                xp[j] += h;
                xm[j] -= h;
                let vp = func_deriv_kernel(&pe, &f, s, &xp);
                let vm = func_deriv_kernel(&pe, &f, s, &xm);
                for a in 0..3 {
                    let fd = (vp[a] - vm[a]) / (2.0 * h);
                    assert!((fd - g[a * 2 + j]).abs() <= 1e-5 * (1.0 + fd.abs()));
                }
            }
        }
    }

    #[test]
    fn ensemble_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ens = ParticleEnsemble::standard_normal(4, 3, &mut rng);
        let file = EnsembleFile::new(&ens, "random-fourier", 2, "abc");
        let text = serde_json::to_string(&file).unwrap();
        let back: EnsembleFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.into_ensemble().unwrap(), ens);
        let bad = EnsembleFile { n: 5, ..file };
        assert!(bad.into_ensemble().is_err());
    }

    #[test]
    fn non_finite_features_are_reported() {
        let ens = ParticleEnsemble::new(2, 1, vec![1.0, 0.0]).unwrap();
        #[derive(Debug)]
        struct Bad;
        impl FeatureMap for Bad {
            fn key(&self) -> &'static str {
                "bad"
            }
            fn dim(&self) -> usize {
                1
            }
            fn n_states(&self) -> usize {
                1
            }
            fn n_actions(&self) -> usize {
                1
            }
            fn eval(&self, _: usize, _: usize, x: &[f64]) -> f64 {
                1.0 / x[0]
            }
            fn grad_x(&self, _: usize, _: usize, _: &[f64], _: &mut [f64]) {}
            fn sup_norm(&self) -> f64 {
                1.0
            }
            fn grad_sup_norm(&self) -> f64 {
                1.0
            }
            fn hess_sup_norm(&self) -> f64 {
                1.0
            }
        }
        let err = PolicyEval::from_parts(&ens, &Bad, &[1.0]).unwrap_err();
        assert!(matches!(err, MeanflowError::NonFiniteFeature { particle: 1, .. }));
    }
}
