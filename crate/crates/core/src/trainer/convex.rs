use super::optim::{optimizer_step, OptimizerSpec, SliceState};
use crate::error::{Error, Result};
use crate::numeric::PreferenceVector;
use crate::problems::ConvexRegression;

/// Full-batch descent on `Σᵢ αᵢ fᵢ` from `θ = 0` until the gradient norm drops
/// below `tol`. Returns the parameters and the number of steps taken.
pub fn minimize_scalarized(
    problem: &ConvexRegression,
    alpha: &PreferenceVector,
    optimizer: &OptimizerSpec,
    max_steps: usize,
    tol: f64,
) -> Result<(Vec<f64>, usize)> {
    if alpha.len() != problem.num_tasks() {
        return Err(Error::contract("preference length differs from task count"));
    }
    optimizer.validate()?;
    let mut theta = vec![0.0; problem.dim()];
    let mut state = SliceState::default();
    for step in 0..max_steps {
        let grads = problem.gradients(&theta)?;
        let g: Vec<f64> = (0..theta.len())
            .map(|j| grads.iter().zip(alpha.as_slice()).map(|(gi, a)| a * gi[j]).sum())
            .collect();
        if g.iter().map(|x| x * x).sum::<f64>().sqrt() < tol {
            return Ok((theta, step));
        }
        optimizer_step(&mut theta, &g, &mut state, optimizer)?;
    }
    Err(Error::Degenerate(format!("no convergence to gradient norm {tol} within {max_steps} steps")))
}
