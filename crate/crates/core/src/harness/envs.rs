//! Shipped environments.

use serde::{Deserialize, Serialize};

use crate::error::{MeanflowError, Result};
use crate::safety_mdp::{default_grid, BarrierSpec, BaseMdp, BudgetGrid, MdpFile, SafetySpec};

/// Knobs an experiment may change on a shipped environment.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvOverrides {
    pub beta: Option<f64>,
    /// barrier scale `c`; zero switches the barrier off
    pub barrier_c: Option<f64>,
    #[serde(rename = "M_bar")]
    pub m_bar: Option<f64>,
    pub budget: Option<f64>,
    pub budget_grid: Option<BudgetGrid>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    /// registry key, or `file` together with `path`
    pub key: String,
    #[serde(default)]
    pub path: Option<String>,
    #[serde(default)]
    pub overrides: EnvOverrides,
}

pub struct EnvEntry {
    pub key: &'static str,
    pub build: fn(&EnvOverrides) -> Result<BaseMdp>,
    pub notes: &'static str,
}

pub const REGISTRY: &[EnvEntry] = &[
    EnvEntry {
        key: "safe_chain",
        build: safe_chain,
        notes: "5-state chain, absorbing goal, shortcut action spends twice the budget; \
                always-advance is a feasible safe policy; finite rewards, bounded features apply",
    },
    EnvEntry {
        key: "safe_resource",
        build: safe_resource,
        notes: "resource stock 0..8 x extraction 0..4, over-extraction costs 0.5 against budget 1; \
                extracting nothing is a feasible safe policy; stochastic regrowth keeps every stock reachable",
    },
];

pub fn lookup(key: &str) -> Option<&'static EnvEntry> {
    REGISTRY.iter().find(|e| e.key == key)
}

pub fn keys() -> Vec<&'static str> {
    REGISTRY.iter().map(|e| e.key).collect()
}

/// Build the base model for an environment config.
pub fn build_env(cfg: &EnvConfig) -> Result<BaseMdp> {
    if cfg.key == "file" {
        let path =
            cfg.path.as_ref().ok_or_else(|| MeanflowError::InvalidModel("env.key = file needs env.path".into()))?;
        let base = MdpFile::from_path(path)?.into_mdp()?;
        return apply_overrides(base, &cfg.overrides);
    }
    let entry = lookup(&cfg.key).ok_or_else(|| {
        MeanflowError::InvalidModel(format!("unknown environment '{}', known: {}", cfg.key, keys().join(", ")))
    })?;
    (entry.build)(&cfg.overrides)
}

fn apply_overrides(mut base: BaseMdp, o: &EnvOverrides) -> Result<BaseMdp> {
    if let Some(beta) = o.beta {
        base.beta = beta;
    }
    if o.barrier_c.is_some() || o.m_bar.is_some() {
        base.barrier =
            BarrierSpec::new(o.barrier_c.unwrap_or(base.barrier.scale), o.m_bar.unwrap_or(base.barrier.clamp))?;
    }
    if let Some(b) = o.budget {
        let k = base.safety.n_constraints();
        base.safety =
            SafetySpec::new(base.n_actions, base.safety.costs().to_vec(), vec![b; k], base.safety.discount().to_vec())?;
        base.grid = default_grid(&base.safety);
    }
    if let Some(g) = o.budget_grid {
        base.grid = g;
    }
    base.validate()
}

/// Chain `0 -> 1 -> 2 -> 3 -> 4 (goal)`. Actions: advance (succeeds w.p. 0.9,
/// cost -0.1), stay (cost -0.2) and shortcut (straight to the goal, safety
/// cost 2 against budget 1). The goal pays 1 per step under every action.
pub fn safe_chain(o: &EnvOverrides) -> Result<BaseMdp> {
    const S: usize = 5;
    const A: usize = 3;
    const GOAL: usize = S - 1;
    let mut p = vec![0.0; S * A * S];
    let mut u = vec![0.0; S * A];
    let mut g = vec![0.0; S * A];
    for s in 0..S {
        let row = |a: usize, s2: usize| (s * A + a) * S + s2;
        if s == GOAL {
            for a in 0..A {
                p[row(a, GOAL)] = 1.0;
                u[s * A + a] = 1.0;
            }
            continue;
        }
        p[row(0, s + 1)] = 0.9;
        p[row(0, s)] = 0.1;
        u[s * A] = -0.1;
        p[row(1, s)] = 1.0;
        u[s * A + 1] = -0.2;
        p[row(2, GOAL)] = 1.0;
        u[s * A + 2] = -0.1;
        g[s * A + 2] = 2.0;
    }
    let safety = SafetySpec::new(A, vec![g], vec![1.0], vec![0.5])?;
    let mut p0 = vec![0.0; S];
    p0[0] = 1.0;
    let base = BaseMdp {
        n_states: S,
        n_actions: A,
        rho: vec![1.0; A],
        p,
        u,
        beta: 0.9,
        grid: default_grid(&safety),
        safety,
        barrier: BarrierSpec::new(1.0, 100.0)?,
        p0,
    };
    apply_overrides(base.validate()?, o)
}

/// Stock `s in 0..=8`, extraction `a in 0..=4`. Extracting `e = min(a, s)`
/// pays `0.2 e`; regrowth adds 0, 1 or 2 units (prob. 1/4, 1/2, 1/4), capped
/// at 8. Taking more than half the stock is over-extraction with safety
/// cost 0.5 against budget 1 and constraint discount 0.9.
pub fn safe_resource(o: &EnvOverrides) -> Result<BaseMdp> {
    const S: usize = 9;
    const A: usize = 5;
    const REGROWTH: [f64; 3] = [0.25, 0.5, 0.25];
    let mut p = vec![0.0; S * A * S];
    let mut u = vec![0.0; S * A];
    let mut g = vec![0.0; S * A];
    for s in 0..S {
        for a in 0..A {
            let e = a.min(s);
            u[s * A + a] = 0.2 * e as f64;
            if 2 * e > s {
                g[s * A + a] = 0.5;
            }
            for (r, &q) in REGROWTH.iter().enumerate() {
                let s2 = (s - e + r).min(S - 1);
                p[(s * A + a) * S + s2] += q;
            }
        }
    }
    let safety = SafetySpec::new(A, vec![g], vec![1.0], vec![0.9])?;
    let mut p0 = vec![0.0; S];
    p0[4] = 1.0;
    let base = BaseMdp {
        n_states: S,
        n_actions: A,
        rho: vec![1.0; A],
        p,
        u,
        beta: 0.9,
        grid: default_grid(&safety),
        safety,
        barrier: BarrierSpec::new(1.0, 100.0)?,
        p0,
    };
    apply_overrides(base.validate()?, o)
}
