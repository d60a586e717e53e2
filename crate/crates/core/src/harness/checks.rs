//! Stand-alone numerical checks shared by the CLI and the acceptance suite.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::experiment::Prepared;
use crate::error::Result;
use crate::flow::{GradientFault, Objective};
use crate::value::ScheduleStage;

/// Finite-difference step used by the gradient check.
pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradProbe {
    pub particle: usize,
    pub analytic: f64,
    pub finite_difference: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub probes: Vec<GradProbe>,
    pub max_relative_error: f64,
}

/// Compare `<grad J(x_k), e> / N` with central differences of `J` under
/// `x_k <- x_k +- t e`, on fresh prior ensembles, one random particle and
/// direction per probe. The quadrature grid is frozen per probe.
pub fn grad_check(obj: &Objective<'_>, n: usize, stage: &ScheduleStage, probes: usize, seed: u64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(probes);
    for _ in 0..probes {
        let ens = obj.prior().sample(n, &mut rng);
        let d = ens.dim();
        let k = rng.random_range(0..n);
        let mut e: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let en = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        e.iter_mut().for_each(|v| *v /= en);
        let grid = obj.grid_for(&ens, stage)?;
        let snap = obj.snapshot_on(&ens, stage, grid.as_ref())?;
        let g = snap.grad_j(ens.particle(k));
        let analytic = g.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        let shifted = |sign: f64| -> Result<f64> {
            let mut moved = ens.clone();
            moved.particle_mut(k).iter_mut().zip(&e).for_each(|(x, v)| *x += sign * FD_STEP * v);
            obj.evaluate(&moved, stage, grid.as_ref())
        };
        let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * FD_STEP);
        let relative_error = (fd - analytic).abs() / analytic.abs().max(1e-8);
        out.push(GradProbe { particle: k, analytic, finite_difference: fd, relative_error });
    }
    let max_relative_error = out.iter().map(|p| p.relative_error).fold(0.0, f64::max);
    Ok(GradCheck { probes: out, max_relative_error })
}

/// Gradient check on a prepared experiment at its first stage.
pub fn grad_check_prepared(prep: &Prepared, probes: usize, seed: u64, fault: GradientFault) -> Result<GradCheck> {
    let obj = prep.objective(fault)?;
    grad_check(&obj, prep.flow.n_particles, &prep.flow.stages[0], probes, seed)
}
