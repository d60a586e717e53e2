//! Discretized safety-constrained MDPs.
//!
//! A [`BaseMdp`] carries the raw model (transitions, utility, per-constraint
//! safety costs). [`AugmentedMdp`] lifts it onto (state, budget) pairs: every
//! budget axis is discretized on a uniform grid plus one absorbing
//! "violated" node, the barrier is folded into the reward and only states
//! reachable from the initial distribution are kept.

use std::collections::{HashMap, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MeanflowError, Result};

/// Row-sum tolerance accepted when reading model files.
pub const ROW_TOLERANCE: f64 = 1e-9;

/// Per-constraint safety costs, budgets and discounts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    n_actions: usize,
    /// `cost[k][s * n_actions + a]`
    cost: Vec<Vec<f64>>,
    budget: Vec<f64>,
    discount: Vec<f64>,
}

impl SafetySpec {
    pub fn new(n_actions: usize, cost: Vec<Vec<f64>>, budget: Vec<f64>, discount: Vec<f64>) -> Result<Self> {
        if cost.len() != budget.len() || cost.len() != discount.len() {
            return Err(MeanflowError::InvalidModel(format!(
                "safety arrays disagree on K: g={}, b={}, beta_g={}",
                cost.len(),
                budget.len(),
                discount.len()
            )));
        }
        for (k, row) in cost.iter().enumerate() {
            if row.iter().any(|&g| !(g >= 0.0) || !g.is_finite()) {
                return Err(MeanflowError::InvalidModel(format!("g[{k}] must be finite and non-negative")));
            }
        }
        if budget.iter().any(|&b| !(b >= 0.0) || !b.is_finite()) {
            return Err(MeanflowError::InvalidModel("budgets must be finite and non-negative".into()));
        }
        if discount.iter().any(|&d| !(d > 0.0 && d < 1.0)) {
            return Err(MeanflowError::InvalidModel("constraint discounts must lie in (0,1)".into()));
        }
        Ok(Self { n_actions, cost, budget, discount })
    }

    /// No constraints at all.
    pub fn none(n_actions: usize) -> Self {
        Self { n_actions, cost: vec![], budget: vec![], discount: vec![] }
    }

    pub fn n_constraints(&self) -> usize {
        self.budget.len()
    }

    pub fn cost(&self, k: usize, s: usize, a: usize) -> f64 {
        self.cost[k][s * self.n_actions + a]
    }

    pub fn costs(&self) -> &[Vec<f64>] {
        &self.cost
    }

    pub fn budget(&self) -> &[f64] {
        &self.budget
    }

    pub fn discount(&self) -> &[f64] {
        &self.discount
    }
}

/// One budget update `z'_k = (z_k - g_k(s,a)) / beta_k`. Negative entries
/// signal a violation and are returned as-is.
pub fn budget_step(z: &[f64], s: usize, a: usize, safety: &SafetySpec) -> Vec<f64> {
    z.iter().enumerate().map(|(k, &zk)| (zk - safety.cost(k, s, a)) / safety.discount[k]).collect()
}

/// Direct check of `sum_t beta_k^t g_k(s_t, a_t) <= b_k` for every constraint.
pub fn constraint_satisfied_direct(safety: &SafetySpec, pairs: &[(usize, usize)]) -> bool {
    (0..safety.n_constraints()).all(|k| {
        let mut total = 0.0;
        let mut disc = 1.0;
        for &(s, a) in pairs {
            total += disc * safety.cost(k, s, a);
            disc *= safety.discount[k];
        }
        total <= safety.budget[k]
    })
}

/// Same check through budget bookkeeping: every `z_t` produced from `z_0 = b`
/// stays non-negative.
pub fn constraint_satisfied_by_budget(safety: &SafetySpec, pairs: &[(usize, usize)]) -> bool {
    let mut z = safety.budget.clone();
    for &(s, a) in pairs {
        z = budget_step(&z, s, a, safety);
        if z.iter().any(|&zk| zk < 0.0) {
            return false;
        }
    }
    true
}

/// Log-barrier `c * (-ln phi + phi - 1)` on `(0,1]`, zero beyond 1, clamped at
/// `clamp` per component. A zero scale switches the barrier off entirely.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierSpec {
    #[serde(rename = "c")]
    pub scale: f64,
    #[serde(rename = "M_bar")]
    pub clamp: f64,
}

impl BarrierSpec {
    pub fn new(scale: f64, clamp: f64) -> Result<Self> {
        if !(scale >= 0.0) || !(clamp > 0.0) {
            return Err(MeanflowError::InvalidModel(format!(
                "barrier needs c >= 0 and M_bar > 0 (got c={scale}, M_bar={clamp})"
            )));
        }
        Ok(Self { scale, clamp })
    }

    pub fn off() -> Self {
        Self { scale: 0.0, clamp: 1.0 }
    }

    pub fn is_off(&self) -> bool {
        self.scale == 0.0
    }

    pub fn component(&self, phi: f64) -> f64 {
        if self.is_off() {
            0.0
        } else if phi <= 0.0 {
            self.clamp
        } else if phi >= 1.0 {
            0.0
        } else {
            (self.scale * (-phi.ln() + phi - 1.0)).min(self.clamp)
        }
    }

    pub fn component_derivative(&self, phi: f64) -> f64 {
        if self.is_off() || phi <= 0.0 || phi >= 1.0 {
            return 0.0;
        }
        if self.scale * (-phi.ln() + phi - 1.0) >= self.clamp {
            return 0.0;
        }
        self.scale * (1.0 - 1.0 / phi)
    }

    pub fn eval(&self, phi: &[f64]) -> f64 {
        phi.iter().map(|&p| self.component(p)).sum()
    }

    pub fn gradient(&self, phi: &[f64]) -> Vec<f64> {
        phi.iter().map(|&p| self.component_derivative(p)).collect()
    }
}

/// `max(-m, u_b)`.
pub fn truncate_reward(u_b: f64, m: f64) -> f64 {
    u_b.max(-m)
}

/// Discretization of each budget axis: `points` uniform nodes on `[0, z_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetGrid {
    pub points: usize,
    pub z_max: f64,
}

impl BudgetGrid {
    pub fn spacing(&self) -> f64 {
        if self.points <= 1 {
            self.z_max.max(1.0)
        } else {
            self.z_max / (self.points - 1) as f64
        }
    }

    pub fn value(&self, node: usize) -> f64 {
        node as f64 * self.spacing()
    }

    /// Floor projection; negative budgets map to `None` (violated). Budgets
    /// above `z_max` saturate at the top node.
    pub fn project(&self, z: f64) -> Option<usize> {
        if z < 0.0 {
            return None;
        }
        let j = (z / self.spacing() + 1e-9).floor();
        Some((j as usize).min(self.points.saturating_sub(1)))
    }
}

/// The raw (un-augmented) model.
#[derive(Debug, Clone)]
pub struct BaseMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub rho: Vec<f64>,
    /// `p[(s * n_actions + a) * n_states + s']`
    pub p: Vec<f64>,
    /// `u[s * n_actions + a]`
    pub u: Vec<f64>,
    pub beta: f64,
    pub safety: SafetySpec,
    pub barrier: BarrierSpec,
    pub p0: Vec<f64>,
    pub grid: BudgetGrid,
}

impl BaseMdp {
    /// Validates shapes, probabilities and discounts. Rows within
    /// [`ROW_TOLERANCE`] of one are renormalized.
    pub fn validate(mut self) -> Result<Self> {
        let (ns, na) = (self.n_states, self.n_actions);
        if ns == 0 || na == 0 {
            return Err(MeanflowError::InvalidModel("need at least one state and one action".into()));
        }
        if self.rho.len() != na || self.rho.iter().any(|&r| !(r > 0.0) || !r.is_finite()) {
            return Err(MeanflowError::InvalidModel("rho must have one positive weight per action".into()));
        }
        if self.p.len() != ns * na * ns {
            return Err(MeanflowError::InvalidModel(format!(
                "P has {} entries, expected {}",
                self.p.len(),
                ns * na * ns
            )));
        }
        if self.u.len() != ns * na || self.u.iter().any(|v| !v.is_finite()) {
            return Err(MeanflowError::InvalidModel("u must be a finite S x A table".into()));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(MeanflowError::Singular(format!("discount beta={} must lie in (0,1)", self.beta)));
        }
        if self.p0.len() != ns || self.p0.iter().any(|&q| q < 0.0) {
            return Err(MeanflowError::InvalidModel("p0 must be a distribution over base states".into()));
        }
        let p0_sum: f64 = self.p0.iter().sum();
        if (p0_sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(MeanflowError::InvalidModel(format!("p0 sums to {p0_sum}")));
        }
        self.p0.iter_mut().for_each(|q| *q /= p0_sum);
        for k in 0..self.safety.n_constraints() {
            if self.safety.cost[k].len() != ns * na {
                return Err(MeanflowError::InvalidModel(format!("g[{k}] must be an S x A table")));
            }
        }
        if self.safety.n_actions != na {
            return Err(MeanflowError::InvalidModel("safety spec built for a different action count".into()));
        }
        if self.grid.points == 0 || !(self.grid.z_max > 0.0) {
            return Err(MeanflowError::InvalidModel("budget grid needs points >= 1 and z_max > 0".into()));
        }
        for s in 0..ns {
            for a in 0..na {
                let row = &mut self.p[(s * na + a) * ns..(s * na + a + 1) * ns];
                if row.iter().any(|&q| q < 0.0 || !q.is_finite()) {
                    return Err(MeanflowError::MalformedTransition { state: s, action: a, sum: f64::NAN });
                }
                let sum: f64 = row.iter().sum();
                if (sum - 1.0).abs() > ROW_TOLERANCE {
                    return Err(MeanflowError::MalformedTransition { state: s, action: a, sum });
                }
                row.iter_mut().for_each(|q| *q /= sum);
            }
        }
        Ok(self)
    }

    /// Model without safety constraints or barrier.
    pub fn unconstrained(
        n_states: usize,
        n_actions: usize,
        rho: Vec<f64>,
        p: Vec<f64>,
        u: Vec<f64>,
        beta: f64,
        p0: Vec<f64>,
    ) -> Result<Self> {
        Self {
            n_states,
            n_actions,
            rho,
            p,
            u,
            beta,
            safety: SafetySpec::none(n_actions),
            barrier: BarrierSpec::off(),
            p0,
            grid: BudgetGrid { points: 1, z_max: 1.0 },
        }
        .validate()
    }

    /// Unconstrained instance with Dirichlet(1) rows, uniform rewards in
    /// `[-1, 1]`, unit action weights and a random initial law.
    pub fn random<R: Rng + ?Sized>(n_states: usize, n_actions: usize, beta: f64, rng: &mut R) -> Result<Self> {
        let simplex = |n: usize, rng: &mut R| -> Vec<f64> {
            let e: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
            let t: f64 = e.iter().sum();
            e.into_iter().map(|v| v / t).collect()
        };
        let mut p = Vec::with_capacity(n_states * n_actions * n_states);
        for _ in 0..n_states * n_actions {
            p.extend(simplex(n_states, rng));
        }
        let u = (0..n_states * n_actions).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p0 = simplex(n_states, rng);
        Self::unconstrained(n_states, n_actions, vec![1.0; n_actions], p, u, beta, p0)
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.n_states;
        &self.p[(s * self.n_actions + a) * ns..(s * self.n_actions + a + 1) * ns]
    }

    pub fn utility(&self, s: usize, a: usize) -> f64 {
        self.u[s * self.n_actions + a]
    }

    /// `max(0, sup u)`.
    pub fn u_sup_plus(&self) -> f64 {
        self.u.iter().cloned().fold(0.0, f64::max)
    }

    pub fn augment(&self) -> Result<AugmentedMdp> {
        AugmentedMdp::build(self.clone())
    }
}

/// JSON model file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MdpFile {
    pub states: StateList,
    pub actions: StateList,
    pub rho: Vec<f64>,
    #[serde(rename = "P")]
    pub p: Vec<f64>,
    pub u: Vec<f64>,
    pub safety: SafetyFile,
    pub barrier: BarrierSpec,
    pub beta: f64,
    pub p0: Vec<f64>,
    #[serde(default)]
    pub budget_grid: Option<BudgetGrid>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StateList {
    Count(usize),
    Labels(Vec<String>),
}

impl StateList {
    pub fn len(&self) -> usize {
        match self {
            StateList::Count(n) => *n,
            StateList::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SafetyFile {
    pub g: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub beta_g: Vec<f64>,
}

impl MdpFile {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn into_mdp(self) -> Result<BaseMdp> {
        let na = self.actions.len();
        let safety = SafetySpec::new(na, self.safety.g, self.safety.b, self.safety.beta_g)?;
        let grid = self.budget_grid.unwrap_or_else(|| default_grid(&safety));
        BaseMdp {
            n_states: self.states.len(),
            n_actions: na,
            rho: self.rho,
            p: self.p,
            u: self.u,
            beta: self.beta,
            safety,
            barrier: BarrierSpec::new(self.barrier.scale, self.barrier.clamp)?,
            p0: self.p0,
            grid,
        }
        .validate()
    }

    pub fn from_mdp(mdp: &BaseMdp) -> Self {
        Self {
            states: StateList::Count(mdp.n_states),
            actions: StateList::Count(mdp.n_actions),
            rho: mdp.rho.clone(),
            p: mdp.p.clone(),
            u: mdp.u.clone(),
            safety: SafetyFile {
                g: mdp.safety.cost.clone(),
                b: mdp.safety.budget.clone(),
                beta_g: mdp.safety.discount.clone(),
            },
            barrier: mdp.barrier,
            beta: mdp.beta,
            p0: mdp.p0.clone(),
            budget_grid: Some(mdp.grid),
        }
    }
}

/// `z_max = max_k b_k / prod_k beta_k^H` with a three-step horizon, 9 nodes.
pub fn default_grid(safety: &SafetySpec) -> BudgetGrid {
    const HORIZON: i32 = 3;
    let bmax = safety.budget.iter().cloned().fold(0.0, f64::max).max(1.0);
    let prod: f64 = safety.discount.iter().map(|d| d.powi(HORIZON)).product();
    BudgetGrid { points: 9, z_max: bmax / prod }
}

/// Augmented (state, budget) pair. `z` holds budget values; in grid mode the
/// violated node is reported as a negative budget.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub s: usize,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct AugKey {
    base: usize,
    nodes: Vec<Option<usize>>,
}

/// Reachable (state, budget-node) lift of a [`BaseMdp`] with barrier rewards.
#[derive(Debug, Clone)]
pub struct AugmentedMdp {
    base: BaseMdp,
    keys: Vec<AugKey>,
    n_actions: usize,
    /// `u_B[i * A + a]`
    reward_b: Vec<f64>,
    /// `phi[(i * A + a) * K + k]` evaluated at the node budget
    phi: Vec<f64>,
    /// sparse successor lists per `(i, a)`
    trans: Vec<Vec<(usize, f64)>>,
    p0: Vec<f64>,
    index: HashMap<AugKey, usize>,
}

impl AugmentedMdp {
    pub fn build(base: BaseMdp) -> Result<Self> {
        let k = base.safety.n_constraints();
        let na = base.n_actions;
        let grid = base.grid;
        let init_nodes: Vec<Option<usize>> = base.safety.budget.iter().map(|&b| grid.project(b)).collect();

        let mut index: HashMap<AugKey, usize> = HashMap::new();
        let mut keys: Vec<AugKey> = Vec::new();
        let mut queue = VecDeque::new();
        let mut intern = |key: AugKey, keys: &mut Vec<AugKey>, queue: &mut VecDeque<usize>| -> usize {
            if let Some(&i) = index.get(&key) {
                return i;
            }
            let i = keys.len();
            index.insert(key.clone(), i);
            keys.push(key);
            queue.push_back(i);
            i
        };

        let mut p0_pairs = Vec::new();
        for s in 0..base.n_states {
            if base.p0[s] > 0.0 {
                let i = intern(AugKey { base: s, nodes: init_nodes.clone() }, &mut keys, &mut queue);
                p0_pairs.push((i, base.p0[s]));
            }
        }

        let mut trans_map: Vec<Vec<Vec<(usize, f64)>>> = Vec::new();
        let mut phi_map: Vec<Vec<f64>> = Vec::new();
        while let Some(i) = queue.pop_front() {
            let key = keys[i].clone();
            let z = node_values(&key.nodes, &grid);
            let mut per_action = Vec::with_capacity(na);
            let mut phis = Vec::with_capacity(na * k);
            for a in 0..na {
                let phi = budget_step(&z, key.base, a, &base.safety);
                let next_nodes: Vec<Option<usize>> = key
                    .nodes
                    .iter()
                    .zip(&phi)
                    .map(|(node, &p)| match node {
                        None => None,
                        Some(_) => grid.project(p),
                    })
                    .collect();
                let mut succ = Vec::new();
                for (s2, &q) in base.transition_row(key.base, a).iter().enumerate() {
                    if q > 0.0 {
                        let j = intern(AugKey { base: s2, nodes: next_nodes.clone() }, &mut keys, &mut queue);
                        succ.push((j, q));
                    }
                }
                per_action.push(succ);
                phis.extend(phi);
            }
            if trans_map.len() <= i {
                trans_map.resize(i + 1, Vec::new());
                phi_map.resize(i + 1, Vec::new());
            }
            trans_map[i] = per_action;
            phi_map[i] = phis;
        }

        let n = keys.len();
        let mut reward_b = vec![0.0; n * na];
        let mut phi = vec![0.0; n * na * k];
        let mut trans = vec![Vec::new(); n * na];
        for i in 0..n {
            for a in 0..na {
                let ph = &phi_map[i][a * k..(a + 1) * k];
                reward_b[i * na + a] = base.utility(keys[i].base, a) - base.barrier.eval(ph);
                phi[(i * na + a) * k..(i * na + a + 1) * k].copy_from_slice(ph);
                trans[i * na + a] = std::mem::take(&mut trans_map[i][a]);
            }
        }
        let mut p0 = vec![0.0; n];
        for (i, q) in p0_pairs {
            p0[i] += q;
        }
        Ok(Self { base, keys, n_actions: na, reward_b, phi, trans, p0, index })
    }

    pub fn base(&self) -> &BaseMdp {
        &self.base
    }

    pub fn n_states(&self) -> usize {
        self.keys.len()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_constraints(&self) -> usize {
        self.base.safety.n_constraints()
    }

    pub fn beta(&self) -> f64 {
        self.base.beta
    }

    pub fn rho(&self) -> &[f64] {
        &self.base.rho
    }

    pub fn rho_total(&self) -> f64 {
        self.base.rho.iter().sum()
    }

    pub fn p0(&self) -> &[f64] {
        &self.p0
    }

    pub fn base_state(&self, i: usize) -> usize {
        self.keys[i].base
    }

    pub fn is_violated(&self, i: usize) -> bool {
        self.keys[i].nodes.iter().any(|n| n.is_none())
    }

    pub fn state(&self, i: usize) -> AugmentedState {
        AugmentedState { s: self.keys[i].base, z: node_values(&self.keys[i].nodes, &self.base.grid) }
    }

    /// Index of the augmented state at base `s` whose budget nodes are the
    /// projections of `z`, if it is reachable.
    pub fn lookup(&self, s: usize, z: &[f64]) -> Option<usize> {
        let nodes = z.iter().map(|&zk| self.base.grid.project(zk)).collect();
        self.index.get(&AugKey { base: s, nodes }).copied()
    }

    pub fn reward_b(&self, i: usize, a: usize) -> f64 {
        self.reward_b[i * self.n_actions + a]
    }

    pub fn rewards_b(&self) -> &[f64] {
        &self.reward_b
    }

    pub fn phi(&self, i: usize, a: usize) -> &[f64] {
        let k = self.n_constraints();
        &self.phi[(i * self.n_actions + a) * k..(i * self.n_actions + a + 1) * k]
    }

    pub fn successors(&self, i: usize, a: usize) -> &[(usize, f64)] {
        &self.trans[i * self.n_actions + a]
    }

    /// `u_{B ^ m}` table for truncation level `m` (`f64::INFINITY` disables).
    pub fn truncated_rewards(&self, m: f64) -> Vec<f64> {
        self.reward_b.iter().map(|&r| truncate_reward(r, m)).collect()
    }

    /// `||u_{B ^ m}||_inf` over the reachable table.
    pub fn truncated_sup(&self, m: f64) -> f64 {
        self.reward_b.iter().map(|&r| truncate_reward(r, m).abs()).fold(0.0, f64::max)
    }

    pub fn u_sup_plus(&self) -> f64 {
        self.base.u_sup_plus()
    }

    /// Sample an initial augmented state.
    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        sample_categorical(&self.p0, rng)
    }
}

fn node_values(nodes: &[Option<usize>], grid: &BudgetGrid) -> Vec<f64> {
    nodes
        .iter()
        .map(|n| match n {
            Some(j) => grid.value(*j),
            None => -grid.spacing(),
        })
        .collect()
}

pub(crate) fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Anything that draws an action for an augmented state.
pub trait ActionSampler {
    fn sample_action(&self, aug_state: usize, rng: &mut dyn rand::RngCore) -> usize;
}

impl<F> ActionSampler for F
where
    F: Fn(usize, &mut dyn rand::RngCore) -> usize,
{
    fn sample_action(&self, aug_state: usize, rng: &mut dyn rand::RngCore) -> usize {
        self(aug_state, rng)
    }
}

/// How budgets evolve during a rollout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetMode {
    /// Budgets follow the exact recursion; the policy is queried at the grid
    /// node tracked alongside and rewards use the exact safety index.
    Exact,
    /// Budgets follow the projected grid model (same chain the exact value
    /// backend solves).
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryStep {
    pub state: AugmentedState,
    pub aug_index: usize,
    pub action: usize,
    pub reward_b: f64,
    pub phi: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    pub violated: bool,
}

/// Simulate `horizon` steps from `s_0 ~ p_0`, `z_0 = b`.
pub fn rollout<R: Rng>(
    mdp: &AugmentedMdp,
    policy: &dyn ActionSampler,
    horizon: usize,
    mode: BudgetMode,
    rng: &mut R,
) -> Result<Trajectory> {
    if horizon == 0 {
        return Err(MeanflowError::InvalidModel("rollout horizon must be >= 1".into()));
    }
    let base = mdp.base();
    let mut aug = mdp.sample_initial(rng);
    let mut z_exact = base.safety.budget.clone();
    let mut steps = Vec::with_capacity(horizon);
    let mut violated = false;
    for _ in 0..horizon {
        let s = mdp.base_state(aug);
        let a = policy.sample_action(aug, rng);
        let (z, phi, reward) = match mode {
            BudgetMode::Grid => {
                let phi = mdp.phi(aug, a).to_vec();
                (mdp.state(aug).z, phi, mdp.reward_b(aug, a))
            }
            BudgetMode::Exact => {
                let phi = budget_step(&z_exact, s, a, &base.safety);
                let reward = base.utility(s, a) - base.barrier.eval(&phi);
                (z_exact.clone(), phi, reward)
            }
        };
        violated |= phi.iter().any(|&p| p < 0.0);
        let succ = mdp.successors(aug, a);
        let sum: f64 = succ.iter().map(|&(_, q)| q).sum();
        if (sum - 1.0).abs() > ROW_TOLERANCE {
            return Err(MeanflowError::MalformedTransition { state: s, action: a, sum });
        }
        let probs: Vec<f64> = succ.iter().map(|&(_, q)| q).collect();
        let next = succ[sample_categorical(&probs, rng)].0;
        steps.push(TrajectoryStep {
            state: AugmentedState { s, z },
            aug_index: aug,
            action: a,
            reward_b: reward,
            phi: phi.clone(),
        });
        if mode == BudgetMode::Exact {
            z_exact = phi;
        }
        aug = next;
    }
    Ok(Trajectory { steps, violated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_constraint(n_states: usize, n_actions: usize, g: f64, b: f64, beta_g: f64) -> SafetySpec {
        SafetySpec::new(n_actions, vec![vec![g; n_states * n_actions]], vec![b], vec![beta_g]).unwrap()
    }

    #[test]
    fn budget_step_examples() {
        let sp = one_constraint(1, 1, 0.3, 1.0, 0.9);
        let z = budget_step(&[1.0], 0, 0, &sp);
        assert!((z[0] - 0.7 / 0.9).abs() < 1e-15);

        let sp = one_constraint(1, 1, 0.5, 0.5, 0.8);
        assert_eq!(budget_step(&[0.5], 0, 0, &sp), vec![0.0]);

        let sp = SafetySpec::new(1, vec![vec![0.0], vec![1.0]], vec![1.0, 2.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(budget_step(&[1.0, 2.0], 0, 0, &sp), vec![2.0, 2.0]);
    }

    #[test]
    fn barrier_examples() {
        let b = BarrierSpec::new(1.0, 100.0).unwrap();
        assert_eq!(b.eval(&[1.0]), 0.0);
        let b5 = BarrierSpec::new(5.0, 100.0).unwrap();
        assert_eq!(b5.eval(&[2.0, 3.0]), 0.0);
        let e = (-1.0f64).exp();
        assert!((b.eval(&[e]) - e).abs() < 1e-15);
        assert_eq!(b.eval(&[0.0]), 100.0);
        assert_eq!(b.eval(&[-3.0]), 100.0);
        assert_eq!(BarrierSpec::off().eval(&[-3.0, 0.5]), 0.0);
    }

    #[test]
    fn barrier_derivative_matches_finite_differences() {
        let b = BarrierSpec::new(1.0, 1e6).unwrap();
        let mut phi: f64 = 0.01;
        while phi < 10.0 {
            if (phi - 1.0).abs() > 1e-4 {
                let h = 1e-7 * phi.max(1e-3);
                let fd = (b.component(phi + h) - b.component(phi - h)) / (2.0 * h);
                let an = b.component_derivative(phi);
                assert!((fd - an).abs() <= 1e-6 * (1.0 + an.abs()), "phi={phi} fd={fd} an={an}");
            }
            phi *= 1.07;
        }
        // C1 gluing at 1
        assert_eq!(b.component(1.0), 0.0);
        assert!(b.component_derivative(1.0 - 1e-12).abs() < 1e-9);
    }

    #[test]
    fn barrier_is_non_increasing() {
        let b = BarrierSpec::new(2.0, 50.0).unwrap();
        let mut prev = f64::INFINITY;
        let mut phi = -1.0;
        while phi < 3.0 {
            let v = b.component(phi);
            assert!(v <= prev + 1e-12, "phi={phi}");
            prev = v;
            phi += 1e-3;
        }
    }

    #[test]
    fn truncation_examples() {
        assert_eq!(truncate_reward(-50.0, 10.0), -10.0);
        assert_eq!(truncate_reward(3.0, 10.0), 3.0);
        assert_eq!(truncate_reward(-10.0, 10.0), -10.0);
    }

    fn single_state(u: f64, g: f64, b: f64, beta_g: f64, barrier: BarrierSpec) -> BaseMdp {
        BaseMdp {
            n_states: 1,
            n_actions: 1,
            rho: vec![1.0],
            p: vec![1.0],
            u: vec![u],
            beta: 0.9,
            safety: one_constraint(1, 1, g, b, beta_g),
            barrier,
            p0: vec![1.0],
            grid: BudgetGrid { points: 5, z_max: 4.0 },
        }
        .validate()
        .unwrap()
    }

    #[test]
    fn augmented_reward_examples() {
        // phi = 2 at z=1 with g=0, beta_g=0.5
        let mdp = single_state(1.0, 0.0, 1.0, 0.5, BarrierSpec::new(1.0, 100.0).unwrap()).augment().unwrap();
        assert_eq!(mdp.phi(0, 0), &[2.0]);
        assert_eq!(mdp.reward_b(0, 0), 1.0);

        // exhausted budget: phi = 0 -> clamp
        let mdp = single_state(1.0, 1.0, 1.0, 0.5, BarrierSpec::new(1.0, 100.0).unwrap()).augment().unwrap();
        assert_eq!(mdp.phi(0, 0), &[0.0]);
        assert_eq!(mdp.reward_b(0, 0), -99.0);

        let e = (-1.0f64).exp();
        let base = single_state(0.5, 0.0, 1.0, 0.5, BarrierSpec::new(1.0, 100.0).unwrap());
        let u_b = base.utility(0, 0) - base.barrier.eval(&[e]);
        assert!((u_b - 0.132_120_558_8).abs() < 1e-9);
    }

    #[test]
    fn malformed_rows_are_rejected() {
        let mut m = single_state(1.0, 0.0, 1.0, 0.5, BarrierSpec::off());
        m.p = vec![1.0 + 1e-6];
        assert!(matches!(m.validate(), Err(MeanflowError::MalformedTransition { .. })));
        let mut m = single_state(1.0, 0.0, 1.0, 0.5, BarrierSpec::off());
        m.p = vec![1.0 + 1e-11];
        assert!(m.validate().is_ok());
    }

    #[test]
    fn violated_node_is_absorbing_and_penalized() {
        // cost 1 per step against budget 1 and beta_g = 0.5: z: 1 -> 0 -> violated
        let mdp = single_state(1.0, 1.0, 1.0, 0.5, BarrierSpec::new(1.0, 100.0).unwrap()).augment().unwrap();
        assert_eq!(mdp.n_states(), 3);
        let mut i = 0;
        for _ in 0..5 {
            i = mdp.successors(i, 0)[0].0;
        }
        assert!(mdp.is_violated(i));
        assert_eq!(mdp.reward_b(i, 0), -99.0);
    }

    #[test]
    fn rollout_without_costs_never_violates() {
        let mdp = single_state(1.0, 0.0, 1.0, 0.5, BarrierSpec::new(1.0, 100.0).unwrap()).augment().unwrap();
        let pol = |_: usize, _: &mut dyn rand::RngCore| 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tr = rollout(&mdp, &pol, 5, BudgetMode::Exact, &mut rng).unwrap();
        assert_eq!(tr.steps.len(), 5);
        assert!(!tr.violated);
    }

    #[test]
    fn rollout_budget_exhaustion_then_violation() {
        // g = b at t=0 with beta_g = 0.5 gives z_1 = 0; the next positive cost violates.
        let mdp = single_state(1.0, 1.0, 1.0, 0.5, BarrierSpec::new(1.0, 100.0).unwrap()).augment().unwrap();
        let pol = |_: usize, _: &mut dyn rand::RngCore| 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = rollout(&mdp, &pol, 1, BudgetMode::Exact, &mut rng).unwrap();
        assert_eq!(one.steps[0].phi, vec![0.0]);
        assert!(!one.violated);
        let two = rollout(&mdp, &pol, 2, BudgetMode::Exact, &mut rng).unwrap();
        assert!(two.steps[1].phi[0] < 0.0);
        assert!(two.violated);
    }

    #[test]
    fn zero_horizon_is_an_error() {
        let mdp = single_state(1.0, 0.0, 1.0, 0.5, BarrierSpec::off()).augment().unwrap();
        let pol = |_: usize, _: &mut dyn rand::RngCore| 0usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(rollout(&mdp, &pol, 0, BudgetMode::Grid, &mut rng).is_err());
    }

    #[test]
    fn grid_projection_is_conservative() {
        let g = BudgetGrid { points: 5, z_max: 2.0 };
        assert_eq!(g.project(-1e-12), None);
        assert_eq!(g.project(0.49), Some(0));
        assert_eq!(g.project(0.5), Some(1));
        assert_eq!(g.project(9.0), Some(4));
        for z in [0.0, 0.3, 0.77, 1.2, 1.99] {
            assert!(g.value(g.project(z).unwrap()) <= z + 1e-9);
        }
    }

    #[test]
    fn mdp_file_round_trip() {
        let base = single_state(1.0, 0.2, 1.0, 0.9, BarrierSpec::new(1.0, 100.0).unwrap());
        let text = serde_json::to_string(&MdpFile::from_mdp(&base)).unwrap();
        assert!(text.contains("\"M_bar\""));
        let back: MdpFile = serde_json::from_str(&text).unwrap();
        let m2 = back.into_mdp().unwrap();
        assert_eq!(m2.u, base.u);
        assert_eq!(m2.safety, base.safety);
    }
}
