use serde::{Deserialize, Serialize};

use super::optim::{Optimizer, OptimizerSpec};
use crate::error::{Error, Result};
use crate::numeric::{sample_dirichlet, PreferenceVector, SeededRng};
use crate::problems::{toy_gradients, toy_objectives, ToyState};
use crate::regularization::{multi_forward_loss, HingeOrientation, MultiForwardConfig};

/// The toy problem has no data; an epoch is this many iterations.
pub const TOY_EPOCH_ITERATIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyConfig {
    pub steps: usize,
    pub optimizer: OptimizerSpec,
    pub window_b: usize,
    pub dirichlet_p: Vec<f64>,
    pub lambda_p: f64,
    pub hinge: HingeOrientation,
    pub seed: u64,
    /// Trajectory sampling interval; the first and last steps are always kept.
    pub record_every: usize,
    pub eval_preferences: Vec<Vec<f64>>,
    pub initial: ToyState,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            steps: 50_000,
            optimizer: OptimizerSpec::adam(1e-3),
            window_b: 1,
            dirichlet_p: vec![1.0, 1.0],
            lambda_p: 0.0,
            hinge: HingeOrientation::default(),
            seed: 0,
            record_every: 250,
            eval_preferences: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]],
            initial: ToyState::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyTrajectoryPoint {
    pub step: usize,
    /// Index into the configured evaluation preferences.
    pub label: usize,
    pub theta: [f64; 2],
    pub f: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyRun {
    pub trajectory: Vec<ToyTrajectoryPoint>,
    pub final_state: ToyState,
    pub epoch_loss: Vec<f64>,
}

impl ToyRun {
    /// The last recorded point for each evaluation preference.
    pub fn final_points(&self) -> Vec<ToyTrajectoryPoint> {
        let last = self.trajectory.last().map_or(0, |p| p.step);
        self.trajectory.iter().filter(|p| p.step == last).copied().collect()
    }
}

fn snapshot(state: &ToyState, prefs: &[PreferenceVector], step: usize, out: &mut Vec<ToyTrajectoryPoint>) -> Result<()> {
    for (label, a) in prefs.iter().enumerate() {
        let theta = state.at(a)?;
        let (f1, f2) = toy_objectives(theta);
        out.push(ToyTrajectoryPoint { step, label, theta, f: [f1, f2] });
    }
    Ok(())
}

/// Trains `θ₀` and the first components of both offsets with the same loss as the
/// network trainer, using exact toy gradients.
pub fn train_toy(config: &ToyConfig) -> Result<ToyRun> {
    if config.window_b == 0 || config.record_every == 0 {
        return Err(Error::param("window size and record interval must be at least 1"));
    }
    if config.dirichlet_p.len() != 2 || config.dirichlet_p.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
        return Err(Error::param("toy Dirichlet parameters must be two positive numbers"));
    }
    if !(config.lambda_p >= 0.0) {
        return Err(Error::param("lambda_p must be nonnegative"));
    }
    let prefs = config
        .eval_preferences
        .iter()
        .map(|a| PreferenceVector::new(a.clone()))
        .collect::<Result<Vec<_>>>()?;
    if prefs.iter().any(|a| a.len() != 2) {
        return Err(Error::param("toy evaluation preferences need two entries"));
    }
    let mut state = ToyState::new(config.initial.theta, config.initial.deltas.clone())?;
    let frozen_second = [state.deltas[0][1], state.deltas[1][1]];
    let mf = MultiForwardConfig { lambda_p: config.lambda_p, orientation: config.hinge };

    let mut rng = SeededRng::stream(config.seed, "toy/preferences");
    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut trajectory = Vec::new();
    snapshot(&state, &prefs, 0, &mut trajectory)?;
    let mut epoch_loss = Vec::new();
    let mut acc = 0.0;

    for step in 1..=config.steps {
        let alphas = (0..config.window_b)
            .map(|_| sample_dirichlet(&config.dirichlet_p, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let thetas = alphas.iter().map(|a| state.at(a)).collect::<Result<Vec<_>>>()?;
        let losses: Vec<Vec<f64>> = thetas
            .iter()
            .map(|&t| {
                let (f1, f2) = toy_objectives(t);
                vec![f1, f2]
            })
            .collect();
        let mut total: f64 = losses.iter().zip(&alphas).map(|(l, a)| l[0] * a.get(0) + l[1] * a.get(1)).sum();
        let mut weights: Vec<Vec<f64>> = alphas.iter().map(|a| a.as_slice().to_vec()).collect();
        if config.lambda_p > 0.0 && config.window_b >= 2 {
            let out = multi_forward_loss(&losses, &alphas, &mf)?;
            total += config.lambda_p * out.value;
            for (w, g) in weights.iter_mut().zip(&out.grad) {
                w.iter_mut().zip(g).for_each(|(wi, gi)| *wi += config.lambda_p * gi);
            }
        }
        if !total.is_finite() {
            let a: Vec<&[f64]> = alphas.iter().map(PreferenceVector::as_slice).collect();
            return Err(Error::NumericOverflow { location: format!("toy step {step} with preferences {a:?}") });
        }

        let mut g_theta = [0.0; 2];
        let mut g_delta = [0.0; 2];
        for ((t, w), a) in thetas.iter().zip(&weights).zip(&alphas) {
            let (g1, g2) = toy_gradients(*t);
            let g = [w[0] * g1[0] + w[1] * g2[0], w[0] * g1[1] + w[1] * g2[1]];
            g_theta[0] += g[0];
            g_theta[1] += g[1];
            g_delta[0] += a.get(0) * g[0];
            g_delta[1] += a.get(1) * g[0];
        }
        let [d0, d1] = &mut state.deltas[..] else { unreachable!("two tasks") };
        optimizer.step(
            vec![&mut state.theta[..], &mut d0[..1], &mut d1[..1]],
            vec![&g_theta[..], &g_delta[..1], &g_delta[1..]],
            &[true, true, true],
        )?;
        debug_assert_eq!([state.deltas[0][1], state.deltas[1][1]], frozen_second);

        acc += total;
        if step % TOY_EPOCH_ITERATIONS == 0 {
            epoch_loss.push(acc / TOY_EPOCH_ITERATIONS as f64);
            acc = 0.0;
        }
        if step % config.record_every == 0 || step == config.steps {
            snapshot(&state, &prefs, step, &mut trajectory)?;
        }
    }
    Ok(ToyRun { trajectory, final_state: state, epoch_loss })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_records_only_the_start() {
        let run = train_toy(&ToyConfig { steps: 0, ..ToyConfig::default() }).unwrap();
        assert_eq!(run.trajectory.len(), 3);
        assert!(run.trajectory.iter().all(|p| p.step == 0));
        assert_eq!(run.final_state, ToyState::default());
        assert_eq!(run.trajectory[2].theta, [4.5, 4.5]);
    }

    #[test]
    fn second_offset_components_stay_fixed() {
        let run = train_toy(&ToyConfig { steps: 300, window_b: 3, lambda_p: 0.5, ..ToyConfig::default() }).unwrap();
        assert_eq!(run.final_state.deltas[0][1], 0.0);
        assert_eq!(run.final_state.deltas[1][1], 0.0);
        assert_ne!(run.final_state.theta, [4.5, 4.5]);
        assert_eq!(run.epoch_loss.len(), 30);
        assert_eq!(run.final_points().len(), 3);
        assert_eq!(run.final_points()[0].step, 300);
    }

    #[test]
    fn seeded_runs_repeat() {
        let c = ToyConfig { steps: 500, ..ToyConfig::default() };
        assert_eq!(train_toy(&c).unwrap(), train_toy(&c).unwrap());
    }
}
