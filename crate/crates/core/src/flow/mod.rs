//! Particle discretization of the Wasserstein gradient flow of
//! `J(mu) = -V(pi_mu) + kappa H_sigma(mu)` with explicit Euler steps.

pub mod diagnostics;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MeanflowError, Result};
use crate::features::{FeatureMap, FeatureSpec};
use crate::metrics::{violation_probability, w2};
use crate::policy::{grad_x_func_deriv, ParticleEnsemble, PolicyEval};
use crate::regularizers::{
    BlobEnergy, Mollifier, ParamGradMode, ParamRegularizer, PriorSpec, QuadGrid, ReferencePrior, RewardRegularizer,
    SmoothedDivergence,
};
use crate::safety_mdp::AugmentedMdp;
use crate::value::{evaluate_policy, inf_as_null, PolicyValue, ScheduleStage};

/// Parameter-regularizer setup. Without an explicit mode, quadrature is used
/// for `d <= 2` and the blob energy above.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamConfig {
    #[serde(default = "default_param_reg")]
    pub regularizer: ParamRegularizer,
    #[serde(default = "default_prior")]
    pub prior: PriorSpec,
    #[serde(default)]
    pub mode: Option<ParamGradMode>,
    /// quadrature padding in units of `sqrt(sigma)`
    #[serde(default = "default_extent")]
    pub extent: f64,
    /// quadrature spacing is `min(sigma, sqrt sigma) / spacing_div`
    #[serde(default = "default_spacing_div")]
    pub spacing_div: f64,
}

fn default_param_reg() -> ParamRegularizer {
    ParamRegularizer::Kl
}

fn default_prior() -> PriorSpec {
    PriorSpec::Gaussian
}

fn default_extent() -> f64 {
    8.0
}

fn default_spacing_div() -> f64 {
    2.0
}

impl Default for ParamConfig {
    fn default() -> Self {
        Self {
            regularizer: default_param_reg(),
            prior: default_prior(),
            mode: None,
            extent: default_extent(),
            spacing_div: default_spacing_div(),
        }
    }
}

impl ParamConfig {
    pub fn resolved_mode(&self, d: usize) -> ParamGradMode {
        self.mode.unwrap_or(if d <= QuadGrid::MAX_DIM { ParamGradMode::Quadrature } else { ParamGradMode::Blob })
    }
}

/// Deliberate gradient corruption for exercising the checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientFault {
    #[default]
    None,
    /// report `+grad V` in place of `-grad V`
    FlipValueSign,
}

/// `J = -V + kappa H_sigma` on a fixed model and feature map.
pub struct Objective<'a> {
    mdp: &'a AugmentedMdp,
    features: &'a dyn FeatureMap,
    reward: RewardRegularizer,
    param_reg: ParamRegularizer,
    prior: ReferencePrior,
    mode: ParamGradMode,
    extent: f64,
    spacing_div: f64,
    include_value: bool,
    fast_path: bool,
    fault: GradientFault,
}

impl<'a> Objective<'a> {
    pub fn new(
        mdp: &'a AugmentedMdp,
        features: &'a dyn FeatureMap,
        reward: RewardRegularizer,
        param: &ParamConfig,
    ) -> Result<Self> {
        let d = features.dim();
        if features.n_states() != mdp.n_states() || features.n_actions() != mdp.n_actions() {
            return Err(MeanflowError::SizeMismatch("feature table does not cover the augmented model".into()));
        }
        reward.validate()?;
        param.regularizer.validate(d)?;
        let mode = param.resolved_mode(d);
        if mode == ParamGradMode::Quadrature && d > QuadGrid::MAX_DIM {
            return Err(MeanflowError::Unsupported(format!("quadrature regularizer needs d <= 2, got d = {d}")));
        }
        if mode == ParamGradMode::Blob && param.regularizer != ParamRegularizer::Kl {
            return Err(MeanflowError::Unsupported("the blob energy is available for kl only".into()));
        }
        Ok(Self {
            mdp,
            features,
            reward,
            param_reg: param.regularizer,
            prior: ReferencePrior::new(param.prior, d)?,
            mode,
            extent: param.extent,
            spacing_div: param.spacing_div,
            include_value: true,
            fast_path: false,
            fault: GradientFault::None,
        })
    }

    /// Drop the value term, leaving `J = kappa H_sigma`.
    pub fn without_value(mut self) -> Self {
        self.include_value = false;
        self
    }

    /// Use the entropy simplification of the value gradient.
    pub fn with_fast_path(mut self, on: bool) -> Result<Self> {
        if on && self.reward != RewardRegularizer::Entropy {
            return Err(MeanflowError::ModeMismatch(format!(
                "the fast path assumes entropy regularization, got {}",
                self.reward.name()
            )));
        }
        self.fast_path = on;
        Ok(self)
    }

    pub fn with_fault(mut self, fault: GradientFault) -> Self {
        self.fault = fault;
        self
    }

    pub fn mdp(&self) -> &AugmentedMdp {
        self.mdp
    }

    pub fn features(&self) -> &dyn FeatureMap {
        self.features
    }

    pub fn prior(&self) -> &ReferencePrior {
        &self.prior
    }

    pub fn mode(&self) -> ParamGradMode {
        self.mode
    }

    pub fn param_regularizer(&self) -> ParamRegularizer {
        self.param_reg
    }

    pub fn reward_regularizer(&self) -> RewardRegularizer {
        self.reward
    }

    pub fn includes_value(&self) -> bool {
        self.include_value
    }

    /// Quadrature grid covering `ensemble` at the stage's mollifier width.
    pub fn grid_for(&self, ensemble: &ParticleEnsemble, stage: &ScheduleStage) -> Result<Option<QuadGrid>> {
        match self.mode {
            ParamGradMode::Quadrature => {
                Ok(Some(QuadGrid::covering(ensemble, &Mollifier::new(stage.sigma)?, self.extent, self.spacing_div)?))
            }
            ParamGradMode::Blob => Ok(None),
        }
    }

    pub fn snapshot<'o>(&'o self, ensemble: &ParticleEnsemble, stage: &ScheduleStage) -> Result<Snapshot<'o, 'a>> {
        let grid = self.grid_for(ensemble, stage)?;
        self.snapshot_on(ensemble, stage, grid.as_ref())
    }

    /// Snapshot with a caller-fixed quadrature grid (finite-difference checks).
    pub fn snapshot_on<'o>(
        &'o self,
        ensemble: &ParticleEnsemble,
        stage: &ScheduleStage,
        grid: Option<&QuadGrid>,
    ) -> Result<Snapshot<'o, 'a>> {
        if ensemble.dim() != self.features.dim() {
            return Err(MeanflowError::SizeMismatch(format!(
                "ensemble dimension {} does not match feature dimension {}",
                ensemble.dim(),
                self.features.dim()
            )));
        }
        let moll = Mollifier::new(stage.sigma)?;
        let policy = PolicyEval::compute(ensemble, self.features, self.mdp)?;
        let value = if self.include_value {
            let pv = evaluate_policy(&policy, self.mdp, stage, self.reward)?;
            let weights = self.value_weights(&policy, &pv, stage);
            Some(ValuePart { pv, weights })
        } else {
            None
        };
        let param = match self.mode {
            ParamGradMode::Quadrature => {
                let owned;
                let grid = match grid {
                    Some(g) => g,
                    None => {
                        owned = QuadGrid::covering(ensemble, &moll, self.extent, self.spacing_div)?;
                        &owned
                    }
                };
                ParamPart::Quadrature(SmoothedDivergence::new(ensemble, self.param_reg, &self.prior, moll, grid)?)
            }
            ParamGradMode::Blob => ParamPart::Blob(BlobEnergy::new(ensemble, &self.prior, moll)),
        };
        let neg_value = value.as_ref().map_or(0.0, |v| -v.pv.value);
        let divergence = match &param {
            ParamPart::Quadrature(s) => s.value(),
            ParamPart::Blob(b) => b.value(),
        };
        Ok(Snapshot {
            obj: self,
            ensemble: ensemble.clone(),
            stage: *stage,
            policy,
            value,
            param,
            neg_value,
            divergence,
            objective: neg_value + stage.kappa * divergence,
        })
    }

    /// `J(mu)` at a stage, optionally on a fixed grid.
    pub fn evaluate(&self, ensemble: &ParticleEnsemble, stage: &ScheduleStage, grid: Option<&QuadGrid>) -> Result<f64> {
        Ok(self.snapshot_on(ensemble, stage, grid)?.objective())
    }

    /// `w(s,a) = d(s) pi(a|s) (Qbar(s,a) - sum_a' pi(a'|s) Qbar(s,a')) / (1 - beta)`, so
    /// that `grad_x dV/dmu (x) = sum_{s,a} w(s,a) grad psi(s,a,x)`.
    fn value_weights(&self, policy: &PolicyEval, pv: &PolicyValue, stage: &ScheduleStage) -> Vec<f64> {
        let na = self.mdp.n_actions();
        let scale = 1.0 / (1.0 - self.mdp.beta());
        let mut w = vec![0.0; self.mdp.n_states() * na];
        let mut qbar = vec![0.0; na];
        for s in 0..self.mdp.n_states() {
            let ds = pv.visitation.d[s];
            if ds == 0.0 {
                continue;
            }
            for (a, qb) in qbar.iter_mut().enumerate() {
                let ld = policy.log_dens(s, a);
                let mut v = pv.q[s * na + a] - stage.eps * self.reward.f_from_log(ld);
                if !self.fast_path {
                    v -= stage.eps * self.reward.z_f_prime_from_log(ld);
                }
                *qb = v;
            }
            let avg: f64 = (0..na).map(|a| policy.mass(s, a) * qbar[a]).sum();
            for a in 0..na {
                w[s * na + a] = scale * ds * policy.mass(s, a) * (qbar[a] - avg);
            }
        }
        w
    }
}

struct ValuePart {
    pv: PolicyValue,
    weights: Vec<f64>,
}

enum ParamPart {
    Quadrature(SmoothedDivergence),
    Blob(BlobEnergy),
}

/// Objective, policy tables and gradient fields frozen at one ensemble.
pub struct Snapshot<'o, 'a> {
    obj: &'o Objective<'a>,
    ensemble: ParticleEnsemble,
    stage: ScheduleStage,
    policy: PolicyEval,
    value: Option<ValuePart>,
    param: ParamPart,
    neg_value: f64,
    divergence: f64,
    objective: f64,
}

impl Snapshot<'_, '_> {
    pub fn objective(&self) -> f64 {
        self.objective
    }

    /// `-V^n(pi_mu)`, zero when the value term is disabled.
    pub fn neg_value(&self) -> f64 {
        self.neg_value
    }

    /// `H_sigma(mu)` (quadrature) or the blob energy.
    pub fn divergence(&self) -> f64 {
        self.divergence
    }

    pub fn stage(&self) -> &ScheduleStage {
        &self.stage
    }

    pub fn policy(&self) -> &PolicyEval {
        &self.policy
    }

    pub fn ensemble(&self) -> &ParticleEnsemble {
        &self.ensemble
    }

    pub fn policy_value(&self) -> Option<&PolicyValue> {
        self.value.as_ref().map(|v| &v.pv)
    }

    /// Smallest `L_H'(nu_sigma)` seen on the grid, if quadrature is in use.
    pub fn min_l_h_prime(&self) -> Option<f64> {
        match &self.param {
            ParamPart::Quadrature(s) => Some(s.min_l_h_prime()),
            ParamPart::Blob(_) => None,
        }
    }

    pub fn coverage_warning(&self) -> bool {
        matches!(&self.param, ParamPart::Quadrature(s) if s.coverage_warning())
    }

    /// `grad_x dV/dmu (mu, x)`.
    pub fn grad_v(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        if let Some(vp) = &self.value {
            let na = self.obj.mdp.n_actions();
            for (k, &w) in vp.weights.iter().enumerate() {
                if w != 0.0 {
                    self.obj.features.add_grad_x(k / na, k % na, x, w, &mut out);
                }
            }
            if self.obj.fault == GradientFault::FlipValueSign {
                out.iter_mut().for_each(|v| *v = -*v);
            }
        }
        out
    }

    /// Same quantity assembled term by term from the policy-kernel gradient:
    /// `(1/(1-beta)) sum_s d(s) sum_a rho(a) Qbar(s,a) g_x(a|s)`.
    pub fn grad_v_direct(&self, x: &[f64]) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d];
        let Some(vp) = &self.value else {
            return out;
        };
        let mdp = self.obj.mdp;
        let na = mdp.n_actions();
        let reward = self.obj.reward;
        for s in 0..mdp.n_states() {
            let ds = vp.pv.visitation.d[s];
            if ds == 0.0 {
                continue;
            }
            let g = grad_x_func_deriv(&self.policy, self.obj.features, s, x);
            for a in 0..na {
                let ld = self.policy.log_dens(s, a);
                let mut qbar = vp.pv.q[s * na + a] - self.stage.eps * reward.f_from_log(ld);
                if !self.obj.fast_path {
                    qbar -= self.stage.eps * reward.z_f_prime_from_log(ld);
                }
                let c = ds * mdp.rho()[a] * qbar / (1.0 - mdp.beta());
                out.iter_mut().zip(&g[a * d..(a + 1) * d]).for_each(|(o, gi)| *o += c * gi);
            }
        }
        out
    }

    /// Gradient of the parameter regularizer's first variation at `x`.
    pub fn grad_h(&self, x: &[f64]) -> Vec<f64> {
        match &self.param {
            ParamPart::Quadrature(s) => s.grad(x),
            ParamPart::Blob(b) => b.grad(&self.ensemble, &self.obj.prior, x),
        }
    }

    /// `grad_mu J(mu, x) = -grad_v(x) + kappa grad_h(x)`; at a particle this
    /// is `N` times the derivative of `J` in that particle's position.
    pub fn grad_j(&self, x: &[f64]) -> Vec<f64> {
        let mut g = self.grad_v(x);
        g.iter_mut().for_each(|v| *v = -*v);
        if self.stage.kappa != 0.0 {
            let gh = self.grad_h(x);
            g.iter_mut().zip(&gh).for_each(|(a, b)| *a += self.stage.kappa * b);
        }
        g
    }

    /// `grad_j` at every particle, row-major `N x d`.
    pub fn particle_gradients(&self) -> Vec<f64> {
        let parts: Vec<&[f64]> = self.ensemble.iter().collect();
        parts.par_iter().map(|x| self.grad_j(x)).collect::<Vec<_>>().concat()
    }
}

/// `(1/N) sum_i |g_i|^2`
pub fn mean_sq_norm(grads: &[f64], n: usize) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>() / n as f64
}

/// `x_i <- x_i - h g_i` for all particles at once.
pub fn euler_step(ensemble: &ParticleEnsemble, grads: &[f64], h: f64, step: usize) -> Result<ParticleEnsemble> {
    let d = ensemble.dim();
    if grads.len() != ensemble.coords().len() {
        return Err(MeanflowError::SizeMismatch("gradient field does not match the ensemble".into()));
    }
    let coords: Vec<f64> = ensemble.coords().iter().zip(grads).map(|(x, g)| x - h * g).collect();
    if let Some(i) = coords.iter().position(|c| !c.is_finite()) {
        return Err(MeanflowError::NonFiniteUpdate { particle: i / d, step });
    }
    ParticleEnsemble::new(ensemble.len(), d, coords)
}

/// Everything a flow run needs besides the model itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowConfig {
    pub stages: Vec<ScheduleStage>,
    pub h: f64,
    pub steps_per_stage: usize,
    pub n_particles: usize,
    pub dim: usize,
    pub features: FeatureSpec,
    #[serde(default = "default_reward_reg")]
    pub reward_regularizer: RewardRegularizer,
    #[serde(default)]
    pub param: ParamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub entropy_fast_path: bool,
    #[serde(default = "default_true")]
    pub include_value: bool,
    #[serde(default = "default_violation_horizon")]
    pub violation_horizon: usize,
    /// record `W_2` to the initial ensemble every this many records (0 = never)
    #[serde(default = "default_one")]
    pub w2_every: usize,
    /// keep every intermediate ensemble in memory for post-hoc distances
    #[serde(default)]
    pub keep_snapshots: bool,
}

fn default_reward_reg() -> RewardRegularizer {
    RewardRegularizer::Entropy
}

fn default_true() -> bool {
    true
}

fn default_violation_horizon() -> usize {
    100
}

fn default_one() -> usize {
    1
}

impl FlowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(MeanflowError::InvalidModel(format!("step size must be > 0, got {}", self.h)));
        }
        if self.stages.is_empty() {
            return Err(MeanflowError::InvalidModel("at least one stage is required".into()));
        }
        if self.stages.windows(2).any(|w| w[1].n <= w[0].n) {
            return Err(MeanflowError::InvalidModel("stages must be ordered by strictly increasing n".into()));
        }
        if self.n_particles == 0 || self.dim == 0 {
            return Err(MeanflowError::InvalidModel("need N >= 1 and d >= 1".into()));
        }
        Ok(())
    }
}

/// One trace line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// position in the trace, strictly increasing
    pub index: usize,
    pub stage: usize,
    pub stage_step: usize,
    /// Euler updates performed so far
    pub step: usize,
    pub t: f64,
    #[serde(with = "inf_as_null")]
    pub m: f64,
    pub eps: f64,
    pub kappa: f64,
    pub sigma: f64,
    pub objective: f64,
    pub neg_value: f64,
    pub divergence: f64,
    pub grad_norm2: f64,
    pub w2_init: Option<f64>,
    pub violation_prob: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub records: Vec<StepRecord>,
    pub initial: ParticleEnsemble,
    pub final_ensemble: ParticleEnsemble,
    /// ensemble at each record, when requested
    pub snapshots: Vec<ParticleEnsemble>,
    /// largest `|g_{k+1} - g_k| / |x_{k+1} - x_k|` seen within a stage
    pub l_path: f64,
    /// index of the first record of each stage
    pub stage_starts: Vec<usize>,
    /// ensemble at the end of each stage
    pub stage_finals: Vec<ParticleEnsemble>,
    pub coverage_warnings: usize,
}

impl FlowTrace {
    /// Records belonging to the `k`-th stage of the run.
    pub fn stage_records(&self, k: usize) -> &[StepRecord] {
        let start = self.stage_starts[k];
        let end = self.stage_starts.get(k + 1).copied().unwrap_or(self.records.len());
        &self.records[start..end]
    }
}

/// Run a flow and collect its trace.
pub fn run_flow(config: &FlowConfig, mdp: &AugmentedMdp) -> Result<FlowTrace> {
    run_flow_with(config, mdp, GradientFault::None, &mut |_| Ok(()))
}

/// Run a flow, handing every record to `sink` as soon as it exists so a
/// partial trace survives an abort.
pub fn run_flow_with(
    config: &FlowConfig,
    mdp: &AugmentedMdp,
    fault: GradientFault,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<FlowTrace> {
    config.validate()?;
    let features = config.features.build(mdp.n_states(), mdp.n_actions(), config.dim)?;
    let mut objective = Objective::new(mdp, features.as_ref(), config.reward_regularizer, &config.param)?
        .with_fast_path(config.entropy_fast_path)?
        .with_fault(fault);
    if !config.include_value {
        objective = objective.without_value();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let initial = objective.prior().sample(config.n_particles, &mut rng);
    run_from(config, &objective, initial, sink)
}

/// Run the configured schedule from a given initial ensemble.
pub fn run_from(
    config: &FlowConfig,
    objective: &Objective<'_>,
    initial: ParticleEnsemble,
    sink: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<FlowTrace> {
    config.validate()?;
    let n = initial.len();
    let mut ens = initial.clone();
    let mut records = Vec::new();
    let mut snapshots = Vec::new();
    let mut stage_starts = Vec::new();
    let mut stage_finals = Vec::new();
    let mut step = 0usize;
    let mut l_path: f64 = 0.0;
    let mut coverage_warnings = 0;
    for stage in &config.stages {
        stage_starts.push(records.len());
        let mut prev: Option<(ParticleEnsemble, Vec<f64>)> = None;
        for k in 0..=config.steps_per_stage {
            let snap = objective.snapshot(&ens, stage)?;
            coverage_warnings += snap.coverage_warning() as usize;
            let grads = snap.particle_gradients();
            if let Some((px, pg)) = &prev {
                let dx: f64 = ens.coords().iter().zip(px.coords()).map(|(a, b)| (a - b).powi(2)).sum();
                let dg: f64 = grads.iter().zip(pg).map(|(a, b)| (a - b).powi(2)).sum();
                if dx > 0.0 {
                    l_path = l_path.max((dg / dx).sqrt());
                }
            }
            let index = records.len();
            let w2_init =
                if config.w2_every > 0 && index % config.w2_every == 0 { Some(w2(&ens, &initial)?) } else { None };
            let violation_prob = (objective.includes_value() && config.violation_horizon > 0)
                .then(|| violation_probability(snap.policy(), objective.mdp(), config.violation_horizon));
            let rec = StepRecord {
                index,
                stage: stage.n,
                stage_step: k,
                step,
                t: step as f64 * config.h,
                m: stage.m,
                eps: stage.eps,
                kappa: stage.kappa,
                sigma: stage.sigma,
                objective: snap.objective(),
                neg_value: snap.neg_value(),
                divergence: snap.divergence(),
                grad_norm2: mean_sq_norm(&grads, n),
                w2_init,
                violation_prob,
            };
            sink(&rec)?;
            records.push(rec);
            if config.keep_snapshots {
                snapshots.push(ens.clone());
            }
            if k == config.steps_per_stage {
                stage_finals.push(ens.clone());
                break;
            }
            let next = euler_step(&ens, &grads, config.h, step)?;
            prev = Some((std::mem::replace(&mut ens, next), grads));
            step += 1;
        }
    }
    Ok(FlowTrace {
        records,
        initial,
        final_ensemble: ens,
        snapshots,
        l_path,
        stage_starts,
        stage_finals,
        coverage_warnings,
    })
}

/// `|Delta J + h sum_t |grad J|^2_{L^2(mu_t)}| / |Delta J|` over one stage's records.
pub fn energy_residual(records: &[StepRecord], h: f64) -> Result<f64> {
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) if records.len() >= 2 => (f, l),
        _ => return Err(MeanflowError::Indeterminate("energy residual needs at least two records".into())),
    };
    if records.iter().any(|r| r.stage != first.stage) {
        return Err(MeanflowError::InvalidModel("energy residual is defined on a single stage".into()));
    }
    let dj = last.objective - first.objective;
    if dj.abs() < 1e-14 {
        return Err(MeanflowError::Indeterminate(format!("objective change {dj:e} is below 1e-14")));
    }
    let dissipation: f64 = h * records[..records.len() - 1].iter().map(|r| r.grad_norm2).sum::<f64>();
    Ok((dj + dissipation).abs() / dj.abs())
}
