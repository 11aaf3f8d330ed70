use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{hypervolume_auto, loss_to_score, mean_pairwise_correlation, FrontSample, HvEstimate, Orientation, ReferencePoint, DEFAULT_MC_SAMPLES};
use crate::network::{forward, Batch, Bottom, ManifoldModel, TaskKind};
use crate::numeric::{sample_dirichlet, simplex_grid, simplex_grid_len, PreferenceVector, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrefScheme {
    UniformGrid,
    Dirichlet { seed: u64 },
}

impl PrefScheme {
    /// Grid for up to three tasks, flat Dirichlet draws beyond.
    pub fn default_for(m: usize, seed: u64) -> Self {
        if m <= 3 {
            PrefScheme::UniformGrid
        } else {
            PrefScheme::Dirichlet { seed }
        }
    }
}

/// Evaluation settings: how objectives become scores and how many preferences to sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Regression scores are `loss_offset − MSE`; classification scores are accuracies.
    pub loss_offset: f64,
    /// Front size; `None` uses 11, 66 or 100 for 2, 3 or more tasks.
    pub n_prefs: Option<usize>,
    pub mc_samples: usize,
    /// Compute validation hypervolume after every epoch.
    pub per_epoch_hv: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { loss_offset: 1.0, n_prefs: None, mc_samples: DEFAULT_MC_SAMPLES, per_epoch_hv: true }
    }
}

pub fn default_front_size(m: usize) -> usize {
    match m {
        2 => 11,
        3 => 66,
        _ => 100,
    }
}

/// Preference vectors for front evaluation. A grid request rounds `n` up to the
/// next complete grid.
pub fn front_preferences(m: usize, n: usize, scheme: PrefScheme) -> Result<Vec<PreferenceVector>> {
    if m < 2 || n == 0 {
        return Err(Error::param("front sampling needs at least two tasks and one preference"));
    }
    match scheme {
        PrefScheme::UniformGrid => {
            let mut h = 0;
            while simplex_grid_len(m, h) < n {
                h += 1;
            }
            simplex_grid(m, h)
        }
        PrefScheme::Dirichlet { seed } => {
            let mut rng = SeededRng::stream(seed, "front");
            (0..n).map(|_| sample_dirichlet(&vec![1.0; m], &mut rng)).collect()
        }
    }
}

/// Per-task scores on `batch` at `θ(α)`; larger is better.
pub fn task_scores(model: &ManifoldModel, alpha: &PreferenceVector, batch: &Batch, loss_offset: f64) -> Result<Vec<f64>> {
    let (losses, cache) = forward(model, alpha, batch)?;
    Ok(model
        .tasks
        .iter()
        .enumerate()
        .map(|(i, kind)| match kind {
            TaskKind::Regression => loss_to_score(losses[i], loss_offset),
            TaskKind::Classification { .. } => accuracy(&cache.outputs()[i], &batch.targets[i]),
        })
        .collect())
}

fn accuracy(out: &crate::numeric::Matrix, targets: &crate::network::TaskTargets) -> f64 {
    let labels = match targets {
        crate::network::TaskTargets::Classification(v) => v,
        crate::network::TaskTargets::Regression(_) => unreachable!("checked by forward"),
    };
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(r, &y)| {
            let row = out.row(r);
            let best = (0..row.len()).fold(0, |b, c| if row[c] > row[b] { c } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluatedFront {
    pub preferences: Vec<PreferenceVector>,
    /// Scores, maximized against the origin.
    pub front: FrontSample,
}

pub fn sample_front(model: &ManifoldModel, batch: &Batch, n_prefs: usize, scheme: PrefScheme, eval: &EvalConfig) -> Result<EvaluatedFront> {
    let preferences = front_preferences(model.num_tasks(), n_prefs, scheme)?;
    let points = preferences
        .iter()
        .map(|a| task_scores(model, a, batch, eval.loss_offset))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvaluatedFront { preferences, front: FrontSample::new(points, Orientation::Maximize)? })
}

/// Hypervolume of an evaluated front against the origin.
pub fn front_hypervolume(front: &FrontSample, mc_samples: usize, seed: u64) -> Result<HvEstimate> {
    let m = front.dim().unwrap_or(0);
    if m == 0 {
        return Ok(HvEstimate { value: 0.0, stderr: None });
    }
    hypervolume_auto(front, &ReferencePoint::origin(m, Orientation::Maximize), mc_samples, seed)
}

/// Validation front with the default size and scheme, and its hypervolume.
pub fn validation_hypervolume(model: &ManifoldModel, batch: &Batch, eval: &EvalConfig, seed: u64) -> Result<(EvaluatedFront, HvEstimate)> {
    let m = model.num_tasks();
    let n = eval.n_prefs.unwrap_or_else(|| default_front_size(m));
    let front = sample_front(model, batch, n, PrefScheme::default_for(m, seed), eval)?;
    let hv = front_hypervolume(&front.front, eval.mc_samples, seed)?;
    Ok((front, hv))
}

/// Mean over bottom layers of the mean absolute pairwise adapter correlation.
/// `None` in pamal mode or while some adapter product is still zero.
pub fn mean_adapter_correlation(model: &ManifoldModel) -> Result<Option<f64>> {
    match &model.bottom {
        Bottom::LowRank(ls) => {
            let mut s = 0.0;
            for l in ls {
                match mean_pairwise_correlation(&l.adapters, true) {
                    Ok(c) => s += c,
                    Err(Error::Degenerate(_)) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            Ok(Some(s / ls.len() as f64))
        }
        Bottom::Pamal(_) => Ok(None),
    }
}
