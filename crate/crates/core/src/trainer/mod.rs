//! The training loop: preference sampling, multi-forward evaluation,
//! regularized scalarized loss, optimizer steps and the freeze schedule.

mod convex;
mod eval;
mod optim;
mod toy;

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::pairwise_cosine_similarity;
use crate::network::{backward, forward, scalarize, Architecture, Bottom, ManifoldModel, Mode, PamalInit, ParamRole};
use crate::numeric::{sample_dirichlet, PreferenceVector, SeededRng};
use crate::problems::Dataset;
use crate::regularization::{multi_forward_loss, orth_loss_backward, orth_loss_network, HingeOrientation, MultiForwardConfig, OrthConfig};

pub use convex::minimize_scalarized;
pub use eval::{
    default_front_size, front_hypervolume, front_preferences, mean_adapter_correlation, sample_front, task_scores,
    validation_hypervolume, EvalConfig, EvaluatedFront, PrefScheme,
};
pub use optim::{optimizer_step, Optimizer, OptimizerSpec, SliceState};
pub use toy::{train_toy, ToyConfig, ToyRun, ToyTrajectoryPoint, TOY_EPOCH_ITERATIONS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    /// First epoch at which the main weights stop updating; `epochs` never freezes.
    pub freeze_epoch: usize,
    pub window_b: usize,
    pub batch_q: usize,
    /// Dirichlet concentration; a single entry is broadcast to every task.
    pub dirichlet_p: Vec<f64>,
    pub lambda_p: f64,
    pub lambda_o: f64,
    pub scale_s: f64,
    pub rank_r: usize,
    pub optimizer: OptimizerSpec,
    pub seed: u64,
    pub mode: Mode,
    pub hidden: Vec<usize>,
    /// Also freeze the task heads from `freeze_epoch` on.
    pub freeze_heads: bool,
    pub hinge: HingeOrientation,
    pub orth_stochastic_threshold: usize,
    pub orth_subset_size: usize,
    pub pamal_init: PamalInit,
    pub eval: EvalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let orth = OrthConfig::default();
        Self {
            epochs: 20,
            freeze_epoch: 20,
            window_b: 3,
            batch_q: 32,
            dirichlet_p: vec![1.0],
            lambda_p: 0.0,
            lambda_o: 1.0,
            scale_s: 1.0,
            rank_r: 4,
            optimizer: OptimizerSpec::adam(1e-3),
            seed: 0,
            mode: Mode::Lorpman,
            hidden: vec![32, 32],
            freeze_heads: false,
            hinge: HingeOrientation::default(),
            orth_stochastic_threshold: orth.stochastic_threshold,
            orth_subset_size: orth.subset_size,
            pamal_init: PamalInit::Independent,
            eval: EvalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, m: usize) -> Result<()> {
        if self.freeze_epoch > self.epochs {
            return Err(Error::param(format!("freeze epoch {} exceeds epoch count {}", self.freeze_epoch, self.epochs)));
        }
        if self.window_b == 0 || self.batch_q == 0 {
            return Err(Error::param("window size and batch size must be at least 1"));
        }
        if !(self.dirichlet_p.len() == 1 || self.dirichlet_p.len() == m) {
            return Err(Error::param(format!("dirichlet_p needs 1 or {m} entries, got {}", self.dirichlet_p.len())));
        }
        if self.dirichlet_p.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::param("Dirichlet parameters must be positive and finite"));
        }
        if !(self.lambda_p >= 0.0 && self.lambda_p.is_finite() && self.lambda_o >= 0.0 && self.lambda_o.is_finite()) {
            return Err(Error::param("regularization coefficients must be nonnegative"));
        }
        if !(self.scale_s > 0.0 && self.scale_s.is_finite()) {
            return Err(Error::param("scale must be positive"));
        }
        if self.rank_r == 0 {
            return Err(Error::param("rank must be at least 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param("at least one hidden layer of positive width is required"));
        }
        self.optimizer.validate()
    }

    pub fn dirichlet_params(&self, m: usize) -> Vec<f64> {
        if self.dirichlet_p.len() == 1 {
            vec![self.dirichlet_p[0]; m]
        } else {
            self.dirichlet_p.clone()
        }
    }

    pub fn orth_config(&self) -> OrthConfig {
        OrthConfig {
            lambda_o: self.lambda_o,
            stochastic_threshold: self.orth_stochastic_threshold,
            subset_size: self.orth_subset_size,
        }
    }

    pub fn architecture(&self, data: &Dataset) -> Architecture {
        Architecture {
            input_dim: data.input_dim(),
            hidden: self.hidden.clone(),
            tasks: data.tasks.clone(),
            rank: self.rank_r,
            scale: self.scale_s,
        }
    }
}

/// Freshly initialized model for `data` in the configured mode.
pub fn build_model(data: &Dataset, config: &TrainConfig) -> Result<ManifoldModel> {
    config.validate(data.num_tasks())?;
    let arch = config.architecture(data);
    let mut rng = SeededRng::stream(config.seed, "init");
    match config.mode {
        Mode::Lorpman => ManifoldModel::new_lorpman(&arch, &mut rng),
        Mode::Pamal => ManifoldModel::new_pamal(&arch, config.pamal_init, &mut rng),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub iterations: usize,
    pub epoch_train_loss: Vec<f64>,
    /// Empty when per-epoch evaluation is disabled.
    pub epoch_val_hv: Vec<f64>,
    /// Path of the saved final model, filled in by whoever writes it.
    pub snapshot: Option<String>,
    /// Wall time; left out of serialized records so they stay reproducible.
    #[serde(skip)]
    pub elapsed_secs: f64,
}

/// Progress notifications from [`train_with_observer`].
pub enum TrainEvent<'a> {
    Iteration { epoch: usize, iteration: usize, loss: f64, model: &'a ManifoldModel },
    Epoch { epoch: usize, train_loss: f64, val_hv: Option<f64>, model: &'a ManifoldModel },
}

pub fn train(model: &mut ManifoldModel, data: &Dataset, config: &TrainConfig) -> Result<RunRecord> {
    train_with_observer(model, data, config, |_| {})
}

pub fn train_with_observer(
    model: &mut ManifoldModel,
    data: &Dataset,
    config: &TrainConfig,
    mut observer: impl FnMut(TrainEvent<'_>),
) -> Result<RunRecord> {
    let start = Instant::now();
    let m = model.num_tasks();
    config.validate(m)?;
    if data.num_tasks() != m || data.tasks != model.tasks || data.input_dim() != model.input_dim() {
        return Err(Error::contract("model and dataset disagree on tasks or input width"));
    }
    if model.mode() != config.mode {
        return Err(Error::contract(format!("config mode {} but model mode {}", config.mode, model.mode())));
    }

    let p = config.dirichlet_params(m);
    let orth = config.orth_config();
    let mf = MultiForwardConfig { lambda_p: config.lambda_p, orientation: config.hinge };
    let use_orth = config.mode == Mode::Lorpman && config.lambda_o > 0.0;
    let use_mf = config.lambda_p > 0.0 && config.window_b >= 2;

    let mut shuffle_rng = SeededRng::stream(config.seed, "train/shuffle");
    let mut pref_rng = SeededRng::stream(config.seed, "train/preferences");
    let mut orth_rng = SeededRng::stream(config.seed, "train/orth");
    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut grads = model.zero_gradients();
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut record = RunRecord {
        config: config.clone(),
        iterations: 0,
        epoch_train_loss: Vec::with_capacity(config.epochs),
        epoch_val_hv: Vec::new(),
        snapshot: None,
        elapsed_secs: 0.0,
    };

    for epoch in 0..config.epochs {
        let freeze = epoch >= config.freeze_epoch;
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut epoch_iters = 0usize;
        for rows in order.chunks(config.batch_q) {
            let iteration = record.iterations;
            let batch = data.train.select(rows);
            let alphas = (0..config.window_b)
                .map(|_| sample_dirichlet(&p, &mut pref_rng))
                .collect::<Result<Vec<PreferenceVector>>>()?;
            let diag = |what: &str| {
                let a: Vec<&[f64]> = alphas.iter().map(PreferenceVector::as_slice).collect();
                format!("{what} at iteration {iteration} (epoch {epoch}) with preferences {a:?}")
            };

            let mut losses = Vec::with_capacity(alphas.len());
            let mut caches = Vec::with_capacity(alphas.len());
            for a in &alphas {
                let (l, c) = forward(model, a, &batch).map_err(|e| match e {
                    Error::NumericOverflow { location } => Error::NumericOverflow { location: diag(&location) },
                    other => other,
                })?;
                losses.push(l);
                caches.push(c);
            }
            let mut total = 0.0;
            for (l, a) in losses.iter().zip(&alphas) {
                total += scalarize(l, a)?;
            }
            let mut weights: Vec<Vec<f64>> = alphas.iter().map(|a| a.as_slice().to_vec()).collect();
            if use_mf {
                let out = multi_forward_loss(&losses, &alphas, &mf)?;
                total += config.lambda_p * out.value;
                for (w, g) in weights.iter_mut().zip(&out.grad) {
                    w.iter_mut().zip(g).for_each(|(wi, gi)| *wi += config.lambda_p * gi);
                }
            }
            let orth_cache = if use_orth {
                let (v, c) = orth_loss_network(model, &mut orth_rng, &orth)?;
                total += config.lambda_o * v;
                Some(c)
            } else {
                None
            };
            if !total.is_finite() {
                return Err(Error::NumericOverflow { location: diag("non-finite training loss") });
            }

            grads.zero();
            for (c, w) in caches.iter().zip(&weights) {
                backward(model, c, w, freeze, &mut grads)?;
            }
            if let (Some(c), Some(g)) = (&orth_cache, grads.adapter_gradients_mut()) {
                orth_loss_backward(c, g, config.lambda_o)?;
            }
            let grad_slices = grads.slices();
            let (active, params): (Vec<bool>, Vec<&mut [f64]>) = model
                .param_slices_mut()
                .into_iter()
                .map(|(role, s)| {
                    let on = match role {
                        ParamRole::Main => !freeze,
                        ParamRole::Head => !(freeze && config.freeze_heads),
                        ParamRole::Adapter | ParamRole::Base => true,
                    };
                    (on, s)
                })
                .unzip();
            optimizer.step(params, grad_slices, &active)?;
            model.mark_updated();

            record.iterations += 1;
            epoch_loss += total;
            epoch_iters += 1;
            observer(TrainEvent::Iteration { epoch, iteration, loss: total, model });
        }
        let train_loss = epoch_loss / epoch_iters as f64;
        record.epoch_train_loss.push(train_loss);
        let val_hv = if config.eval.per_epoch_hv {
            let (_, hv) = validation_hypervolume(model, &data.validation, &config.eval, config.seed)?;
            record.epoch_val_hv.push(hv.value);
            Some(hv.value)
        } else {
            None
        };
        observer(TrainEvent::Epoch { epoch, train_loss, val_hv, model });
    }
    record.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(record)
}

/// Cosine similarity of the two base networks per bottom layer, before
/// training (index 0) and after every epoch.
pub fn pamal_similarity_trace(model: &mut ManifoldModel, data: &Dataset, config: &TrainConfig) -> Result<Vec<Vec<f64>>> {
    if model.mode() != Mode::Pamal || model.num_tasks() != 2 {
        return Err(Error::Unsupported("similarity traces need a two-task pamal model".into()));
    }
    let similarities = |model: &ManifoldModel| -> Result<Vec<f64>> {
        match &model.bottom {
            Bottom::Pamal(ls) => ls.iter().map(|l| pairwise_cosine_similarity(&l.thetas[0], &l.thetas[1])).collect(),
            Bottom::LowRank(_) => unreachable!("mode checked above"),
        }
    };
    let mut trace = vec![similarities(model)?];
    let mut failure = None;
    train_with_observer(model, data, config, |ev| {
        if let TrainEvent::Epoch { model, .. } = ev {
            match similarities(model) {
                Ok(s) => trace.push(s),
                Err(e) => failure = failure.take().or(Some(e)),
            }
        }
    })?;
    match failure {
        Some(e) => Err(e),
        None => Ok(trace),
    }
}
