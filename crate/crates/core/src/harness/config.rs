//! Experiment configuration files.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::envs::{build_env, EnvConfig};
use crate::error::{ConfigViolation, MeanflowError, Result};
use crate::features::FeatureSpec;
use crate::flow::{FlowConfig, ParamConfig};
use crate::regularizers::{ParamGradMode, ParamRegularizer, QuadGrid, RewardRegularizer};
use crate::value::{inf_as_null, ScheduleStage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub n_particles: usize,
    /// parameter dimension; derived from the model for tabular features
    #[serde(default)]
    pub dim: Option<usize>,
    pub features: FeatureSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularizerConfig {
    #[serde(default = "default_reward")]
    pub reward: RewardRegularizer,
    #[serde(default)]
    pub param: ParamConfig,
}

fn default_reward() -> RewardRegularizer {
    RewardRegularizer::Entropy
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        Self { reward: default_reward(), param: ParamConfig::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulePreset {
    /// constant `(m, eps, kappa, sigma)` over `n_stages` stages
    StrongRegularization,
    /// `m = 1, 2, 5, 10`, `eps = 0.1, 0.05, 0.02, 0.01`, `kappa` and `sigma` halving
    EpiConvergence,
    /// explicit `stages`
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub preset: SchedulePreset,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_m", with = "inf_as_null")]
    pub m: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_one")]
    pub n_stages: usize,
    #[serde(default)]
    pub stages: Vec<ScheduleStage>,
}

fn default_kappa() -> f64 {
    1.0
}

fn default_eps() -> f64 {
    0.1
}

fn default_m() -> f64 {
    10.0
}

fn default_sigma() -> f64 {
    0.1
}

fn default_one() -> usize {
    1
}

impl ScheduleConfig {
    pub fn stages(&self) -> Vec<ScheduleStage> {
        match self.preset {
            SchedulePreset::StrongRegularization => (1..=self.n_stages)
                .map(|n| ScheduleStage { n, m: self.m, eps: self.eps, kappa: self.kappa, sigma: self.sigma })
                .collect(),
            SchedulePreset::EpiConvergence => [1.0, 2.0, 5.0, 10.0]
                .iter()
                .zip([0.1, 0.05, 0.02, 0.01])
                .enumerate()
                .map(|(k, (&m, eps))| {
                    let halving = 0.5f64.powi(k as i32);
                    ScheduleStage { n: k + 1, m, eps, kappa: self.kappa * halving, sigma: self.sigma * halving }
                })
                .collect(),
            SchedulePreset::Custom => self.stages.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowParams {
    pub h: f64,
    pub steps_per_stage: usize,
    #[serde(default)]
    pub entropy_fast_path: bool,
    #[serde(default = "default_true")]
    pub include_value: bool,
    #[serde(default = "default_violation_horizon")]
    pub violation_horizon: usize,
    #[serde(default = "default_one")]
    pub w2_every: usize,
}

fn default_true() -> bool {
    true
}

fn default_violation_horizon() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsConfig {
    #[serde(default = "default_probes")]
    pub lipschitz_probes: usize,
    #[serde(default = "default_box")]
    pub box_half_width: f64,
    /// fit decay rates on the last stage
    #[serde(default)]
    pub decay_fit: bool,
    #[serde(default)]
    pub decay_burn_in: usize,
    #[serde(default = "default_slack")]
    pub decay_slack: f64,
    #[serde(default = "default_gap_floor")]
    pub decay_gap_floor: f64,
    /// Monte Carlo violation rollouts on the final policy (0 = skip)
    #[serde(default = "default_rollouts")]
    pub violation_rollouts: usize,
    #[serde(default = "default_violation_horizon")]
    pub violation_rollout_horizon: usize,
    /// compare against the exact optimum of the untruncated, unregularized problem
    #[serde(default)]
    pub compare_dp: bool,
    /// rerun from a second initialization drawn with this seed
    #[serde(default)]
    pub restart_seed: Option<u64>,
}

fn default_probes() -> usize {
    32
}

fn default_box() -> f64 {
    3.0
}

fn default_slack() -> f64 {
    1e-9
}

fn default_gap_floor() -> f64 {
    1e-7
}

fn default_rollouts() -> usize {
    10_000
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all diagnostics fields have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    #[serde(default)]
    pub regularizers: RegularizerConfig,
    pub schedule: ScheduleConfig,
    pub flow: FlowParams,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub out: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            MeanflowError::Config(vec![ConfigViolation { path, message: e.into_inner().to_string() }])
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        content_hash(&serde_json::to_string(&c).expect("config serializes"))
    }

    /// Every problem found, each addressed by field path.
    pub fn violations(&self) -> Vec<ConfigViolation> {
        let mut v = Vec::new();
        let mut push = |path: &str, message: String| v.push(ConfigViolation { path: path.into(), message });
        let f = &self.flow;
        if !(f.h > 0.0 && f.h.is_finite()) {
            push("flow.h", format!("step size must be > 0, got {}", f.h));
        }
        if self.policy.n_particles == 0 {
            push("policy.n_particles", "need at least one particle".into());
        }
        let stages = self.schedule.stages();
        if stages.is_empty() {
            push("schedule.stages", "schedule has no stages".into());
        }
        if self.schedule.preset == SchedulePreset::StrongRegularization && self.schedule.n_stages == 0 {
            push("schedule.n_stages", "must be >= 1".into());
        }
        for (k, s) in stages.iter().enumerate() {
            let p = |field: &str| format!("schedule.stages[{k}].{field}");
            if k > 0 && s.n <= stages[k - 1].n {
                push(&p("n"), "stages must be ordered by strictly increasing n".into());
            }
            if !(s.m > 0.0) {
                push(&p("m"), format!("truncation level must be > 0, got {}", s.m));
            }
            if !(s.eps >= 0.0 && s.eps.is_finite()) {
                push(&p("eps"), format!("must be finite and >= 0, got {}", s.eps));
            }
            if !(s.kappa >= 0.0 && s.kappa.is_finite()) {
                push(&p("kappa"), format!("must be finite and >= 0, got {}", s.kappa));
            }
            if !(s.sigma > 0.0 && s.sigma.is_finite()) {
                push(&p("sigma"), format!("mollifier variance must be > 0, got {}", s.sigma));
            }
        }
        let reward = self.regularizers.reward;
        if let Err(e) = reward.validate() {
            push("regularizers.reward", e.to_string());
        }
        if f.entropy_fast_path && reward != RewardRegularizer::Entropy {
            push("flow.entropy_fast_path", format!("fast path needs the entropy regularizer, got {}", reward.name()));
        }
        match build_env(&self.env) {
            Err(e) => push("env", e.to_string()),
            Ok(base) => {
                if !base.barrier.is_off() {
                    if let Some(last) = stages.last() {
                        let need = last.m + base.u_sup_plus();
                        if !(base.barrier.clamp >= need) {
                            push(
                                "env.overrides.M_bar",
                                format!(
                                    "clamp visibility: M_bar = {} must be >= m_N + sup(u)_+ = {need} so the clamped barrier is not hidden by truncation",
                                    base.barrier.clamp
                                ),
                            );
                        }
                    }
                }
                match base.augment() {
                    Err(e) => push("env", e.to_string()),
                    Ok(aug) => {
                        let (ns, na) = (aug.n_states(), aug.n_actions());
                        let req = self.policy.features.required_dim(ns, na);
                        let dim = match (req, self.policy.dim) {
                            (Some(r), Some(d)) if r != d => {
                                push(
                                    "policy.dim",
                                    format!("{} features need d = {r}, got {d}", self.policy.features.key()),
                                );
                                None
                            }
                            (Some(r), _) => Some(r),
                            (None, Some(0)) | (None, None) => {
                                push("policy.dim", "must be >= 1 for this feature map".into());
                                None
                            }
                            (None, Some(d)) => Some(d),
                        };
                        if let Some(d) = dim {
                            let param = &self.regularizers.param;
                            if let Err(e) = param.regularizer.validate(d) {
                                push("regularizers.param.regularizer", e.to_string());
                            }
                            let mode = param.resolved_mode(d);
                            if mode == ParamGradMode::Quadrature && d > QuadGrid::MAX_DIM {
                                push("regularizers.param.mode", format!("quadrature needs d <= 2, got d = {d}"));
                            }
                            if mode == ParamGradMode::Blob && param.regularizer != ParamRegularizer::Kl {
                                push("regularizers.param.mode", "the blob energy is available for kl only".into());
                            }
                        }
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(MeanflowError::Config(v))
        }
    }

    /// Flow settings for a model with `n_aug` augmented states.
    pub fn flow_config(&self, n_aug: usize, n_actions: usize) -> FlowConfig {
        let dim = self.policy.features.required_dim(n_aug, n_actions).or(self.policy.dim).unwrap_or(1);
        FlowConfig {
            stages: self.schedule.stages(),
            h: self.flow.h,
            steps_per_stage: self.flow.steps_per_stage,
            n_particles: self.policy.n_particles,
            dim,
            features: self.policy.features.clone(),
            reward_regularizer: self.regularizers.reward,
            param: self.regularizers.param.clone(),
            seed: self.seed,
            entropy_fast_path: self.flow.entropy_fast_path,
            include_value: self.flow.include_value,
            violation_horizon: self.flow.violation_horizon,
            w2_every: self.flow.w2_every,
            keep_snapshots: self.diagnostics.decay_fit,
        }
    }
}

/// Hex SHA-256 of a text artifact.
pub fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Read and fully validate an experiment file.
pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "env": {"key": "safe_chain"},
        "policy": {"n_particles": 4, "dim": 2, "features": {"key": "random-fourier"}},
        "schedule": {"preset": "strong_regularization"},
        "flow": {"h": 0.01, "steps_per_stage": 10}
    }"#;

    #[test]
    fn minimal_file_fills_defaults_and_round_trips() {
        let cfg = ExperimentConfig::from_json(MINIMAL).unwrap();
        assert_eq!(cfg.diagnostics.violation_rollouts, 10_000);
        assert_eq!(cfg.regularizers.reward, RewardRegularizer::Entropy);
        let echoed = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&echoed).unwrap(), cfg);
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn reports_every_violation_with_paths() {
        let text = MINIMAL
            .replace("\"h\": 0.01", "\"h\": 0")
            .replace("{\"key\": \"safe_chain\"}", "{\"key\": \"safe_chain\", \"overrides\": {\"M_bar\": 5}}");
        let Err(MeanflowError::Config(v)) = ExperimentConfig::from_json(&text) else { panic!("expected config error") };
        let paths: Vec<&str> = v.iter().map(|x| x.path.as_str()).collect();
        assert!(paths.contains(&"flow.h"), "{paths:?}");
        assert!(paths.contains(&"env.overrides.M_bar"), "{paths:?}");
        assert!(v.iter().any(|x| x.message.contains("clamp visibility")));
    }

    #[test]
    fn schema_errors_carry_the_field_path() {
        let text = MINIMAL.replace("\"n_particles\": 4", "\"n_particles\": \"four\"");
        let Err(MeanflowError::Config(v)) = ExperimentConfig::from_json(&text) else { panic!() };
        assert_eq!(v[0].path, "policy.n_particles");
    }

    #[test]
    fn epi_preset_schedule() {
        let cfg = ScheduleConfig {
            preset: SchedulePreset::EpiConvergence,
            kappa: 0.4,
            eps: 0.0,
            m: 0.0,
            sigma: 0.2,
            n_stages: 1,
            stages: vec![],
        };
        let st = cfg.stages();
        assert_eq!(st.iter().map(|s| s.m).collect::<Vec<_>>(), vec![1.0, 2.0, 5.0, 10.0]);
        assert_eq!(st.iter().map(|s| s.eps).collect::<Vec<_>>(), vec![0.1, 0.05, 0.02, 0.01]);
        assert_eq!(st[3].kappa, 0.05);
        assert_eq!(st[2].sigma, 0.05);
    }
}
