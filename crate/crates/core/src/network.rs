//! Shared-bottom ReLU MLP with preference-combined bottom layers and plain
//! per-task heads.
//!
//! Row convention: a batch is `q×u`, a bottom layer with weight `d×k` maps
//! `X (q×k)` to `relu(X Wᵀ + b) (q×d)`. Every bottom layer, including the
//! last, is followed by ReLU; heads are affine and never preference-combined.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{
    backprop_combined, backprop_pamal, combine, combine_pamal, combine_pamal_bias, LayerGradients,
    LowRankLayer, PamalGradients, PamalLayer,
};
use crate::numeric::{uniform_matrix, Matrix, PreferenceVector, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// One output, mean squared error.
    Regression,
    /// `classes` logits, softmax cross-entropy.
    Classification { classes: usize },
}

impl TaskKind {
    pub fn outputs(&self) -> usize {
        match self {
            TaskKind::Regression => 1,
            TaskKind::Classification { classes } => *classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TaskTargets {
    Regression(Vec<f64>),
    Classification(Vec<usize>),
}

impl TaskTargets {
    pub fn len(&self) -> usize {
        match self {
            TaskTargets::Regression(v) => v.len(),
            TaskTargets::Classification(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Targets for the given row subset, in the given order.
    pub fn select(&self, rows: &[usize]) -> TaskTargets {
        match self {
            TaskTargets::Regression(v) => TaskTargets::Regression(rows.iter().map(|&r| v[r]).collect()),
            TaskTargets::Classification(v) => {
                TaskTargets::Classification(rows.iter().map(|&r| v[r]).collect())
            }
        }
    }
}

/// Multi-task minibatch: shared inputs, one target array per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Vec<TaskTargets>,
}

impl Batch {
    pub fn new(inputs: Matrix, targets: Vec<TaskTargets>) -> Result<Self> {
        if inputs.rows() == 0 {
            return Err(Error::contract("batch needs at least one row"));
        }
        if let Some(t) = targets.iter().find(|t| t.len() != inputs.rows()) {
            return Err(Error::contract(format!(
                "task targets have {} rows, inputs have {}",
                t.len(),
                inputs.rows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Batch {
        let u = self.inputs.cols();
        let inputs = Matrix::from_fn(rows.len(), u, |i, j| self.inputs.get(rows[i], j));
        Batch {
            inputs,
            targets: self.targets.iter().map(|t| t.select(rows)).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Lorpman,
    Pamal,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Lorpman => "lorpman",
            Mode::Pamal => "pamal",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lorpman" => Ok(Mode::Lorpman),
            "pamal" => Ok(Mode::Pamal),
            other => Err(Error::param(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bottom {
    LowRank(Vec<LowRankLayer>),
    Pamal(Vec<PamalLayer>),
}

impl Bottom {
    pub fn len(&self) -> usize {
        match self {
            Bottom::LowRank(l) => l.len(),
            Bottom::Pamal(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn layer_shape(&self, l: usize) -> (usize, usize) {
        match self {
            Bottom::LowRank(layers) => layers[l].shape(),
            Bottom::Pamal(layers) => layers[l].shape(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Head {
    /// `outputs × hidden`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Layer widths and task layout shared by both model modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Output width of each bottom layer; at least one entry.
    pub hidden: Vec<usize>,
    pub tasks: Vec<TaskKind>,
    pub rank: usize,
    pub scale: f64,
}

impl Architecture {
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut k = self.input_dim;
        self.hidden
            .iter()
            .map(|&d| {
                let shape = (d, k);
                k = d;
                shape
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::param("architecture needs a positive input width and at least one hidden layer"));
        }
        if self.tasks.len() < 2 {
            return Err(Error::param("at least two tasks are required"));
        }
        if self.tasks.iter().any(|t| t.outputs() == 0) {
            return Err(Error::param("classification tasks need at least one class"));
        }
        Ok(())
    }

    /// Weight-matrix parameter counts of the bottom in both modes.
    pub fn parameter_count(&self) -> Result<crate::lowrank::ParamCount> {
        let m = self.tasks.len();
        self.layer_dims()
            .into_iter()
            .map(|(d, k)| crate::lowrank::parameter_count(d, k, m, self.rank))
            .try_fold(crate::lowrank::ParamCount { lorpman: 0, pamal: 0 }, |acc, c| Ok(acc + c?))
    }
}

/// How PaMaL base networks are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PamalInit {
    Independent,
    Identical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldModel {
    pub bottom: Bottom,
    pub heads: Vec<Head>,
    pub tasks: Vec<TaskKind>,
    #[serde(skip)]
    version: u64,
}

fn init_heads(arch: &Architecture, rng: &mut SeededRng) -> Vec<Head> {
    let hidden = *arch.hidden.last().expect("validated");
    let bound = (3.0 / hidden as f64).sqrt();
    arch.tasks
        .iter()
        .map(|t| Head {
            weight: uniform_matrix(t.outputs(), hidden, bound, rng),
            bias: vec![0.0; t.outputs()],
        })
        .collect()
}

impl ManifoldModel {
    pub fn new_lorpman(arch: &Architecture, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let m = arch.tasks.len();
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(d, k)| LowRankLayer::init(d, k, m, arch.rank, arch.scale, rng))
            .collect::<Result<Vec<_>>>()?;
        let heads = init_heads(arch, rng);
        Self::from_parts(Bottom::LowRank(layers), heads, arch.tasks.clone())
    }

    pub fn new_pamal(arch: &Architecture, init: PamalInit, rng: &mut SeededRng) -> Result<Self> {
        arch.validate()?;
        let m = arch.tasks.len();
        let layers = arch
            .layer_dims()
            .into_iter()
            .map(|(d, k)| match init {
                PamalInit::Independent => PamalLayer::init(d, k, m, rng),
                PamalInit::Identical => PamalLayer::init_identical(d, k, m, rng),
            })
            .collect::<Result<Vec<_>>>()?;
        let heads = init_heads(arch, rng);
        Self::from_parts(Bottom::Pamal(layers), heads, arch.tasks.clone())
    }

    pub fn from_parts(bottom: Bottom, heads: Vec<Head>, tasks: Vec<TaskKind>) -> Result<Self> {
        if bottom.is_empty() {
            return Err(Error::contract("model needs at least one bottom layer"));
        }
        let m = tasks.len();
        if heads.len() != m {
            return Err(Error::contract(format!("{} heads for {m} tasks", heads.len())));
        }
        let tasks_ok = match &bottom {
            Bottom::LowRank(ls) => ls.iter().all(|l| l.num_tasks() == m),
            Bottom::Pamal(ls) => ls.iter().all(|l| l.num_tasks() == m),
        };
        if !tasks_ok {
            return Err(Error::contract("bottom layers disagree with the task count"));
        }
        for l in 1..bottom.len() {
            let (prev_d, _) = bottom.layer_shape(l - 1);
            let (_, k) = bottom.layer_shape(l);
            if prev_d != k {
                return Err(Error::ShapeMismatch {
                    op: "bottom layers",
                    left: bottom.layer_shape(l - 1),
                    right: bottom.layer_shape(l),
                });
            }
        }
        let hidden = bottom.layer_shape(bottom.len() - 1).0;
        for (h, t) in heads.iter().zip(&tasks) {
            if h.weight.shape() != (t.outputs(), hidden) || h.bias.len() != t.outputs() {
                return Err(Error::contract("head shape does not match its task"));
            }
        }
        Ok(Self {
            bottom,
            heads,
            tasks,
            version: 0,
        })
    }

    pub fn mode(&self) -> Mode {
        match self.bottom {
            Bottom::LowRank(_) => Mode::Lorpman,
            Bottom::Pamal(_) => Mode::Pamal,
        }
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.bottom.layer_shape(0).1
    }

    /// Parameter version; bumped by every optimizer step so that stale
    /// forward caches are rejected.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn mark_updated(&mut self) {
        self.version += 1;
    }

    pub fn zero_gradients(&self) -> ModelGradients {
        let bottom = match &self.bottom {
            Bottom::LowRank(ls) => BottomGradients::LowRank(ls.iter().map(LowRankLayer::zero_gradients).collect()),
            Bottom::Pamal(ls) => BottomGradients::Pamal(ls.iter().map(PamalLayer::zero_gradients).collect()),
        };
        let heads = self
            .heads
            .iter()
            .map(|h| HeadGradients {
                g_weight: Matrix::zeros(h.weight.rows(), h.weight.cols()),
                g_bias: vec![0.0; h.bias.len()],
            })
            .collect();
        ModelGradients { bottom, heads }
    }

    /// Mutable parameter slices with their roles, in a fixed order matching
    /// [`ModelGradients::slices`].
    pub fn param_slices_mut(&mut self) -> Vec<(ParamRole, &mut [f64])> {
        let mut out: Vec<(ParamRole, &mut [f64])> = Vec::new();
        match &mut self.bottom {
            Bottom::LowRank(ls) => {
                for l in ls {
                    out.push((ParamRole::Main, l.theta0.as_mut_slice()));
                    out.push((ParamRole::Main, &mut l.bias0));
                    for ad in &mut l.adapters {
                        out.push((ParamRole::Adapter, ad.b.as_mut_slice()));
                        out.push((ParamRole::Adapter, ad.a.as_mut_slice()));
                    }
                }
            }
            Bottom::Pamal(ls) => {
                for l in ls {
                    for t in &mut l.thetas {
                        out.push((ParamRole::Base, t.as_mut_slice()));
                    }
                    for b in &mut l.biases {
                        out.push((ParamRole::Base, b));
                    }
                }
            }
        }
        for h in &mut self.heads {
            out.push((ParamRole::Head, h.weight.as_mut_slice()));
            out.push((ParamRole::Head, &mut h.bias));
        }
        out
    }

    /// Checksum over the main weights and biases of every bottom layer.
    pub fn main_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |xs: &[f64]| {
            for x in xs {
                for b in x.to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        };
        match &self.bottom {
            Bottom::LowRank(ls) => {
                for l in ls {
                    feed(l.theta0.as_slice());
                    feed(&l.bias0);
                }
            }
            Bottom::Pamal(ls) => {
                for l in ls {
                    l.thetas.iter().for_each(|t| feed(t.as_slice()));
                    l.biases.iter().for_each(|b| feed(b));
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamRole {
    /// `θ₀` and its bias.
    Main,
    Adapter,
    /// PaMaL base-network weights.
    Base,
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BottomGradients {
    LowRank(Vec<LayerGradients>),
    Pamal(Vec<PamalGradients>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadGradients {
    pub g_weight: Matrix,
    pub g_bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelGradients {
    pub bottom: BottomGradients,
    pub heads: Vec<HeadGradients>,
}

impl ModelGradients {
    pub fn zero(&mut self) {
        match &mut self.bottom {
            BottomGradients::LowRank(gs) => gs.iter_mut().for_each(LayerGradients::zero),
            BottomGradients::Pamal(gs) => gs.iter_mut().for_each(PamalGradients::zero),
        }
        for h in &mut self.heads {
            h.g_weight.fill(0.0);
            h.g_bias.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Gradient slices in the order of [`ManifoldModel::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        match &self.bottom {
            BottomGradients::LowRank(gs) => {
                for g in gs {
                    out.push(g.g_theta0.as_slice());
                    out.push(&g.g_bias0);
                    for ag in &g.g_adapters {
                        out.push(ag.g_b.as_slice());
                        out.push(ag.g_a.as_slice());
                    }
                }
            }
            BottomGradients::Pamal(gs) => {
                for g in gs {
                    for t in &g.g_thetas {
                        out.push(t.as_slice());
                    }
                    for b in &g.g_biases {
                        out.push(b);
                    }
                }
            }
        }
        for h in &self.heads {
            out.push(h.g_weight.as_slice());
            out.push(&h.g_bias);
        }
        out
    }

    pub fn adapter_gradients_mut(&mut self) -> Option<&mut [LayerGradients]> {
        match &mut self.bottom {
            BottomGradients::LowRank(gs) => Some(gs),
            BottomGradients::Pamal(_) => None,
        }
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    weight: Matrix,
    /// Pre-activation, `q×d`.
    pre: Matrix,
}

/// Everything [`backward`] needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    version: u64,
    alpha: PreferenceVector,
    inputs: Matrix,
    layers: Vec<LayerCache>,
    /// Post-activation of the last bottom layer, `q×hidden`.
    features: Matrix,
    outputs: Vec<Matrix>,
    /// `∂fᵢ/∂outputᵢ` for each task.
    output_grads: Vec<Matrix>,
}

impl ForwardCache {
    pub fn alpha(&self) -> &PreferenceVector {
        &self.alpha
    }

    /// Head outputs per task, each `q × outputs`.
    pub fn outputs(&self) -> &[Matrix] {
        &self.outputs
    }
}

fn relu_in_place(m: &mut Matrix) {
    m.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
}

fn affine(x: &Matrix, w: &Matrix, b: &[f64]) -> Result<Matrix> {
    let mut z = x.matmul_transpose_b(w)?;
    for i in 0..z.rows() {
        for (v, &bb) in z.row_mut(i).iter_mut().zip(b) {
            *v += bb;
        }
    }
    Ok(z)
}

/// Mean loss over the batch and its gradient with respect to the outputs.
fn task_loss(kind: TaskKind, out: &Matrix, targets: &TaskTargets) -> Result<(f64, Matrix)> {
    let q = out.rows() as f64;
    match (kind, targets) {
        (TaskKind::Regression, TaskTargets::Regression(t)) => {
            let mut grad = Matrix::zeros(out.rows(), 1);
            let mut loss = 0.0;
            for (i, &y) in t.iter().enumerate() {
                let r = out.get(i, 0) - y;
                loss += r * r;
                grad.set(i, 0, 2.0 * r / q);
            }
            Ok((loss / q, grad))
        }
        (TaskKind::Classification { classes }, TaskTargets::Classification(t)) => {
            let mut grad = Matrix::zeros(out.rows(), classes);
            let mut loss = 0.0;
            for (i, &y) in t.iter().enumerate() {
                if y >= classes {
                    return Err(Error::contract(format!("class label {y} out of range for {classes} classes")));
                }
                let row = out.row(i);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                loss += mx + z.ln() - row[y];
                let g = grad.row_mut(i);
                for (c, gv) in g.iter_mut().enumerate() {
                    let p = (row[c] - mx).exp() / z;
                    *gv = (p - if c == y { 1.0 } else { 0.0 }) / q;
                }
            }
            Ok((loss / q, grad))
        }
        _ => Err(Error::contract("task targets do not match the task kind")),
    }
}

fn check_finite(m: &Matrix, location: impl FnOnce() -> String) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow { location: location() })
    }
}

/// Per-task mean losses at `θ(α)` and the cache for [`backward`].
pub fn forward(model: &ManifoldModel, alpha: &PreferenceVector, batch: &Batch) -> Result<(Vec<f64>, ForwardCache)> {
    let m = model.num_tasks();
    if alpha.len() != m {
        return Err(Error::contract(format!("preference has {} entries, model has {m} tasks", alpha.len())));
    }
    if batch.inputs.cols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "forward",
            left: (batch.inputs.rows(), model.input_dim()),
            right: batch.inputs.shape(),
        });
    }
    if batch.targets.len() != m {
        return Err(Error::contract(format!("batch has {} target arrays, model has {m} tasks", batch.targets.len())));
    }

    let mut layers = Vec::with_capacity(model.bottom.len());
    let mut x = batch.inputs.clone();
    for l in 0..model.bottom.len() {
        let (weight, bias) = match &model.bottom {
            Bottom::LowRank(ls) => (combine(&ls[l], alpha)?, ls[l].bias0.clone()),
            Bottom::Pamal(ls) => (combine_pamal(&ls[l], alpha)?, combine_pamal_bias(&ls[l], alpha)?),
        };
        let pre = affine(&x, &weight, &bias)?;
        check_finite(&pre, || format!("bottom layer {l}"))?;
        x = pre.clone();
        relu_in_place(&mut x);
        layers.push(LayerCache { weight, pre });
    }

    let mut losses = Vec::with_capacity(m);
    let mut outputs = Vec::with_capacity(m);
    let mut output_grads = Vec::with_capacity(m);
    for (t, (head, kind)) in model.heads.iter().zip(&model.tasks).enumerate() {
        let out = affine(&x, &head.weight, &head.bias)?;
        check_finite(&out, || format!("head {t}"))?;
        let (loss, grad) = task_loss(*kind, &out, &batch.targets[t])?;
        if !loss.is_finite() {
            return Err(Error::NumericOverflow { location: format!("loss of task {t}") });
        }
        losses.push(loss);
        outputs.push(out);
        output_grads.push(grad);
    }

    let cache = ForwardCache {
        version: model.version,
        alpha: alpha.clone(),
        inputs: batch.inputs.clone(),
        layers,
        features: x,
        outputs,
        output_grads,
    };
    Ok((losses, cache))
}

fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for i in 0..m.rows() {
        for (a, &v) in s.iter_mut().zip(m.row(i)) {
            *a += v;
        }
    }
    s
}

/// Accumulates the gradient of `Σᵢ wᵢ fᵢ` into `grads`.
pub fn backward(
    model: &ManifoldModel,
    cache: &ForwardCache,
    loss_weights: &[f64],
    freeze_main: bool,
    grads: &mut ModelGradients,
) -> Result<()> {
    if cache.version != model.version {
        return Err(Error::contract(format!(
            "stale forward cache (model version {}, cache version {})",
            model.version, cache.version
        )));
    }
    if loss_weights.len() != model.num_tasks() {
        return Err(Error::contract("loss weight count differs from task count"));
    }
    if loss_weights.iter().all(|&w| w == 0.0) {
        return Ok(());
    }

    let mut d_features = Matrix::zeros(cache.features.rows(), cache.features.cols());
    for (t, &w) in loss_weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut d_out = cache.output_grads[t].clone();
        d_out.scale(w);
        let hg = &mut grads.heads[t];
        hg.g_weight.axpy(1.0, &d_out.transpose_matmul(&cache.features)?)?;
        for (g, s) in hg.g_bias.iter_mut().zip(column_sums(&d_out)) {
            *g += s;
        }
        d_features.axpy(1.0, &d_out.matmul(&model.heads[t].weight)?)?;
    }

    let mut d_act = d_features;
    for l in (0..cache.layers.len()).rev() {
        let lc = &cache.layers[l];
        let mut d_pre = d_act;
        for (g, &z) in d_pre.as_mut_slice().iter_mut().zip(lc.pre.as_slice()) {
            if z <= 0.0 {
                *g = 0.0;
            }
        }
        let layer_input = if l == 0 {
            cache.inputs.clone()
        } else {
            let mut a = cache.layers[l - 1].pre.clone();
            relu_in_place(&mut a);
            a
        };
        let g_weight = d_pre.transpose_matmul(&layer_input)?;
        let g_bias = column_sums(&d_pre);
        match (&model.bottom, &mut grads.bottom) {
            (Bottom::LowRank(ls), BottomGradients::LowRank(gs)) => {
                backprop_combined(&ls[l], &cache.alpha, &g_weight, &g_bias, &mut gs[l], freeze_main)?
            }
            (Bottom::Pamal(ls), BottomGradients::Pamal(gs)) => {
                backprop_pamal(&ls[l], &cache.alpha, &g_weight, &g_bias, &mut gs[l])?
            }
            _ => return Err(Error::contract("gradient buffers do not match the model mode")),
        }
        d_act = if l > 0 { d_pre.matmul(&lc.weight)? } else { Matrix::zeros(0, 0) };
    }
    Ok(())
}

/// `Σᵢ αᵢ fᵢ`.
pub fn scalarize(task_losses: &[f64], alpha: &PreferenceVector) -> Result<f64> {
    if task_losses.len() != alpha.len() {
        return Err(Error::contract("loss and preference lengths differ"));
    }
    Ok(task_losses.iter().zip(alpha.as_slice()).map(|(f, a)| f * a).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{gaussian_matrix, sample_dirichlet};
    use rand::Rng;

    pub(crate) fn mixed_arch() -> Architecture {
        Architecture {
            input_dim: 4,
            hidden: vec![5, 3],
            tasks: vec![TaskKind::Regression, TaskKind::Classification { classes: 3 }, TaskKind::Regression],
            rank: 2,
            scale: 0.9,
        }
    }

    /// Randomizes every parameter so that no gradient is trivially zero.
    pub(crate) fn randomize(model: &mut ManifoldModel, rng: &mut SeededRng) {
        for (_, p) in model.param_slices_mut() {
            for v in p.iter_mut() {
                *v = rng.random_range(-0.8..0.8);
            }
        }
    }

    fn random_batch(q: usize, u: usize, tasks: &[TaskKind], rng: &mut SeededRng) -> Batch {
        let inputs = gaussian_matrix(q, u, 1.0, rng);
        let targets = tasks
            .iter()
            .map(|t| match t {
                TaskKind::Regression => TaskTargets::Regression((0..q).map(|_| rng.random_range(-1.0..1.0)).collect()),
                TaskKind::Classification { classes } => {
                    TaskTargets::Classification((0..q).map(|_| rng.random_range(0..*classes)).collect())
                }
            })
            .collect();
        Batch::new(inputs, targets).unwrap()
    }

    // Independent row-by-row evaluation of the same network.
    fn naive_losses(model: &ManifoldModel, alpha: &PreferenceVector, batch: &Batch) -> Vec<f64> {
        let m = model.num_tasks();
        let weights: Vec<(Vec<Vec<f64>>, Vec<f64>)> = match &model.bottom {
            Bottom::LowRank(ls) => ls
                .iter()
                .map(|l| {
                    let (d, k) = l.shape();
                    let w = (0..d)
                        .map(|i| {
                            (0..k)
                                .map(|j| {
                                    let mut v = l.theta0.get(i, j);
                                    for (t, ad) in l.adapters.iter().enumerate() {
                                        for q in 0..l.rank {
                                            v += l.scale * alpha.get(t) * ad.b.get(i, q) * ad.a.get(q, j);
                                        }
                                    }
                                    v
                                })
                                .collect()
                        })
                        .collect();
                    (w, l.bias0.clone())
                })
                .collect(),
            Bottom::Pamal(ls) => ls
                .iter()
                .map(|l| {
                    let (d, k) = l.shape();
                    let w = (0..d)
                        .map(|i| (0..k).map(|j| (0..m).map(|t| alpha.get(t) * l.thetas[t].get(i, j)).sum()).collect())
                        .collect();
                    let b = (0..d).map(|i| (0..m).map(|t| alpha.get(t) * l.biases[t][i]).sum()).collect();
                    (w, b)
                })
                .collect(),
        };
        let mut losses = vec![0.0; m];
        let q = batch.len();
        for r in 0..q {
            let mut h: Vec<f64> = batch.inputs.row(r).to_vec();
            for (w, b) in &weights {
                h = w
                    .iter()
                    .zip(b)
                    .map(|(row, bb)| (row.iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + bb).max(0.0))
                    .collect();
            }
            for t in 0..m {
                let head = &model.heads[t];
                let out: Vec<f64> = (0..head.weight.rows())
                    .map(|o| head.weight.row(o).iter().zip(&h).map(|(a, x)| a * x).sum::<f64>() + head.bias[o])
                    .collect();
                losses[t] += match &batch.targets[t] {
                    TaskTargets::Regression(y) => (out[0] - y[r]).powi(2),
                    TaskTargets::Classification(y) => {
                        let z: f64 = out.iter().map(|v| v.exp()).sum();
                        -(out[y[r]].exp() / z).ln()
                    }
                } / q as f64;
            }
        }
        losses
    }

    #[test]
    fn zero_network_zero_regression_loss() {
        let arch = Architecture {
            tasks: vec![TaskKind::Regression; 3],
            ..mixed_arch()
        };
        let mut model = ManifoldModel::new_lorpman(&arch, &mut SeededRng::new(1)).unwrap();
        for (_, p) in model.param_slices_mut() {
            p.iter_mut().for_each(|v| *v = 0.0);
        }
        let batch = Batch::new(
            gaussian_matrix(6, 4, 1.0, &mut SeededRng::new(2)),
            vec![TaskTargets::Regression(vec![0.0; 6]); 3],
        )
        .unwrap();
        let (losses, _) = forward(&model, &PreferenceVector::uniform(3).unwrap(), &batch).unwrap();
        assert_eq!(losses, vec![0.0; 3]);
    }

    #[test]
    fn zero_logits_give_log_classes() {
        let arch = Architecture {
            tasks: vec![TaskKind::Classification { classes: 4 }, TaskKind::Classification { classes: 7 }],
            ..mixed_arch()
        };
        let mut model = ManifoldModel::new_lorpman(&arch, &mut SeededRng::new(3)).unwrap();
        for h in &mut model.heads {
            h.weight.fill(0.0);
        }
        let batch = random_batch(5, 4, &arch.tasks, &mut SeededRng::new(4));
        let (losses, _) = forward(&model, &PreferenceVector::uniform(2).unwrap(), &batch).unwrap();
        assert!((losses[0] - 4f64.ln()).abs() < 1e-14);
        assert!((losses[1] - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn forward_matches_naive_evaluation() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(5);
        for mode in [Mode::Lorpman, Mode::Pamal] {
            let mut model = match mode {
                Mode::Lorpman => ManifoldModel::new_lorpman(&arch, &mut rng).unwrap(),
                Mode::Pamal => ManifoldModel::new_pamal(&arch, PamalInit::Independent, &mut rng).unwrap(),
            };
            randomize(&mut model, &mut rng);
            let batch = random_batch(7, 4, &arch.tasks, &mut rng);
            let alpha = sample_dirichlet(&[1.0; 3], &mut rng).unwrap();
            let (losses, _) = forward(&model, &alpha, &batch).unwrap();
            for (a, b) in losses.iter().zip(naive_losses(&model, &alpha, &batch)) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn non_finite_activation_is_reported() {
        let arch = mixed_arch();
        let mut model = ManifoldModel::new_lorpman(&arch, &mut SeededRng::new(6)).unwrap();
        if let Bottom::LowRank(ls) = &mut model.bottom {
            ls[1].bias0[0] = f64::INFINITY;
        }
        let batch = random_batch(3, 4, &arch.tasks, &mut SeededRng::new(7));
        let err = forward(&model, &PreferenceVector::uniform(3).unwrap(), &batch).unwrap_err();
        assert_eq!(err, Error::NumericOverflow { location: "bottom layer 1".into() });
    }

    fn scalarized(model: &ManifoldModel, alpha: &PreferenceVector, batch: &Batch, w: &[f64]) -> f64 {
        let (l, _) = forward(model, alpha, batch).unwrap();
        l.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(8);
        for (mode, freeze) in [(Mode::Lorpman, false), (Mode::Lorpman, true), (Mode::Pamal, false)] {
            let mut model = match mode {
                Mode::Lorpman => ManifoldModel::new_lorpman(&arch, &mut rng).unwrap(),
                Mode::Pamal => ManifoldModel::new_pamal(&arch, PamalInit::Independent, &mut rng).unwrap(),
            };
            randomize(&mut model, &mut rng);
            let batch = random_batch(6, 4, &arch.tasks, &mut rng);
            let alpha = sample_dirichlet(&[1.0; 3], &mut rng).unwrap();
            let w = [0.3, 1.1, 0.6];
            let (_, cache) = forward(&model, &alpha, &batch).unwrap();
            let mut grads = model.zero_gradients();
            backward(&model, &cache, &w, freeze, &mut grads).unwrap();
            let analytic: Vec<Vec<f64>> = grads.slices().iter().map(|s| s.to_vec()).collect();
            let roles: Vec<ParamRole> = model.param_slices_mut().iter().map(|(r, _)| *r).collect();

            let h = 1e-6;
            for (g, ana) in analytic.iter().enumerate() {
                for idx in 0..ana.len() {
                    let orig = model.param_slices_mut()[g].1[idx];
                    model.param_slices_mut()[g].1[idx] = orig + h;
                    let up = scalarized(&model, &alpha, &batch, &w);
                    model.param_slices_mut()[g].1[idx] = orig - h;
                    let down = scalarized(&model, &alpha, &batch, &w);
                    model.param_slices_mut()[g].1[idx] = orig;
                    let num = (up - down) / (2.0 * h);
                    if freeze && roles[g] == ParamRole::Main {
                        assert_eq!(ana[idx], 0.0);
                        continue;
                    }
                    let err = (num - ana[idx]).abs() / num.abs().max(ana[idx].abs()).max(1e-3);
                    assert!(err < 1e-4, "{mode} group {g} idx {idx}: {num} vs {}", ana[idx]);
                }
            }
        }
    }

    #[test]
    fn zero_weights_leave_gradients_alone() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(9);
        let model = ManifoldModel::new_lorpman(&arch, &mut rng).unwrap();
        let batch = random_batch(4, 4, &arch.tasks, &mut rng);
        let (_, cache) = forward(&model, &PreferenceVector::uniform(3).unwrap(), &batch).unwrap();
        let mut grads = model.zero_gradients();
        backward(&model, &cache, &[0.0; 3], false, &mut grads).unwrap();
        assert_eq!(grads, model.zero_gradients());
    }

    #[test]
    fn single_task_weight_touches_one_head() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(10);
        let mut model = ManifoldModel::new_lorpman(&arch, &mut rng).unwrap();
        randomize(&mut model, &mut rng);
        let batch = random_batch(4, 4, &arch.tasks, &mut rng);
        let (_, cache) = forward(&model, &PreferenceVector::uniform(3).unwrap(), &batch).unwrap();
        let mut grads = model.zero_gradients();
        backward(&model, &cache, &[1.0, 0.0, 0.0], false, &mut grads).unwrap();
        assert!(grads.heads[0].g_weight.frobenius_norm() > 0.0);
        for h in &grads.heads[1..] {
            assert_eq!(h.g_weight.frobenius_norm(), 0.0);
            assert!(h.g_bias.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn frozen_backward_only_moves_adapters_and_heads() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(11);
        let mut model = ManifoldModel::new_lorpman(&arch, &mut rng).unwrap();
        randomize(&mut model, &mut rng);
        let batch = random_batch(8, 4, &arch.tasks, &mut rng);
        let alpha = sample_dirichlet(&[1.0; 3], &mut rng).unwrap();
        let (_, cache) = forward(&model, &alpha, &batch).unwrap();
        let mut grads = model.zero_gradients();
        backward(&model, &cache, alpha.as_slice(), true, &mut grads).unwrap();
        let roles: Vec<ParamRole> = model.param_slices_mut().iter().map(|(r, _)| *r).collect();
        for (role, g) in roles.iter().zip(grads.slices()) {
            let norm: f64 = g.iter().map(|v| v * v).sum();
            match role {
                ParamRole::Main => assert_eq!(norm, 0.0),
                ParamRole::Adapter | ParamRole::Head => assert!(norm > 0.0),
                ParamRole::Base => unreachable!(),
            }
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(12);
        let mut model = ManifoldModel::new_lorpman(&arch, &mut rng).unwrap();
        let batch = random_batch(4, 4, &arch.tasks, &mut rng);
        let (_, cache) = forward(&model, &PreferenceVector::uniform(3).unwrap(), &batch).unwrap();
        model.mark_updated();
        let mut grads = model.zero_gradients();
        assert!(matches!(
            backward(&model, &cache, &[1.0; 3], false, &mut grads),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn losses_are_continuous_in_alpha() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(13);
        let mut model = ManifoldModel::new_lorpman(&arch, &mut rng).unwrap();
        randomize(&mut model, &mut rng);
        let batch = random_batch(10, 4, &arch.tasks, &mut rng);
        let eps = 1e-6;
        for _ in 0..20 {
            let a = sample_dirichlet(&[2.0; 3], &mut rng).unwrap();
            let mut shifted = a.as_slice().to_vec();
            shifted[0] += eps;
            shifted[1] -= eps;
            let b = PreferenceVector::new(shifted).unwrap();
            let (la, _) = forward(&model, &a, &batch).unwrap();
            let (lb, _) = forward(&model, &b, &batch).unwrap();
            for (x, y) in la.iter().zip(&lb) {
                assert!((x - y).abs() / eps < 1e3);
            }
        }
    }

    #[test]
    fn identical_pamal_bases_ignore_alpha() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(14);
        let model = ManifoldModel::new_pamal(&arch, PamalInit::Identical, &mut rng).unwrap();
        let batch = random_batch(6, 4, &arch.tasks, &mut rng);
        let (base, _) = forward(&model, &PreferenceVector::vertex(3, 0).unwrap(), &batch).unwrap();
        for _ in 0..5 {
            let a = sample_dirichlet(&[1.0; 3], &mut rng).unwrap();
            let (l, _) = forward(&model, &a, &batch).unwrap();
            for (x, y) in l.iter().zip(&base) {
                assert!((x - y).abs() <= 1e-15 * y.abs().max(1.0), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn scalarize_cases() {
        let a = PreferenceVector::new(vec![0.2, 0.3, 0.5]).unwrap();
        assert!((scalarize(&[1.0, 2.0, 3.0], &a).unwrap() - 2.3).abs() < 1e-15);
        assert_eq!(scalarize(&[4.0, 5.0], &PreferenceVector::vertex(2, 1).unwrap()).unwrap(), 5.0);
        assert!((scalarize(&[1.5; 3], &a).unwrap() - 1.5).abs() < 1e-15);
        assert!(scalarize(&[1.0], &a).is_err());
    }

    #[test]
    fn model_rejects_bad_layout() {
        let arch = mixed_arch();
        let mut rng = SeededRng::new(15);
        let model = ManifoldModel::new_lorpman(&arch, &mut rng).unwrap();
        let mut heads = model.heads.clone();
        heads.pop();
        assert!(ManifoldModel::from_parts(model.bottom.clone(), heads, arch.tasks.clone()).is_err());
        if let Bottom::LowRank(mut ls) = model.bottom.clone() {
            ls[1].adapters.pop();
            assert!(ManifoldModel::from_parts(Bottom::LowRank(ls), model.heads.clone(), arch.tasks.clone()).is_err());
        }
    }
}
