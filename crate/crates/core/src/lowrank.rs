//! Low-rank preference manifold for a single layer.
//!
//! A layer holds a main weight `θ₀ (d×k)`, a main bias, and one adapter pair
//! `(Bᵢ: d×r, Aᵢ: r×k)` per task. Under preference `α` the effective weight is
//!
//! ```text
//! θ(α) = θ₀ + s · Σᵢ αᵢ · Bᵢ Aᵢ
//! ```
//!
//! Biases are not adapted per task. The PaMaL baseline layer keeps `m` full
//! weight matrices and mixes them as `Σᵢ αᵢ θᵢ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{gaussian_matrix, uniform_matrix, Matrix, PreferenceVector, SeededRng};

/// Standard deviation of the initial `A` factors. `B` starts at zero so that
/// `θ(α) = θ₀` for every `α` at step 0.
pub const ADAPTER_INIT_STD: f64 = 0.01;

/// Kaiming-uniform bound for a ReLU layer with the given fan-in.
pub fn kaiming_uniform_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adapter {
    pub b: Matrix,
    pub a: Matrix,
}

impl Adapter {
    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors conform")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankLayer {
    pub theta0: Matrix,
    pub bias0: Vec<f64>,
    pub adapters: Vec<Adapter>,
    pub scale: f64,
    pub rank: usize,
}

impl LowRankLayer {
    /// `d` outputs, `k` inputs, `m` tasks, rank `r`, scale `s`.
    pub fn init(d: usize, k: usize, m: usize, r: usize, s: f64, rng: &mut SeededRng) -> Result<Self> {
        let theta0 = uniform_matrix(d, k, kaiming_uniform_bound(k), rng);
        let adapters = (0..m)
            .map(|_| Adapter {
                b: Matrix::zeros(d, r),
                a: gaussian_matrix(r, k, ADAPTER_INIT_STD, rng),
            })
            .collect();
        Self::from_parts(theta0, vec![0.0; d], adapters, s)
    }

    pub fn from_parts(theta0: Matrix, bias0: Vec<f64>, adapters: Vec<Adapter>, scale: f64) -> Result<Self> {
        let (d, k) = theta0.shape();
        if bias0.len() != d {
            return Err(Error::contract(format!("bias has {} entries, layer has {d} outputs", bias0.len())));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::param(format!("scale must be positive, got {scale}")));
        }
        let rank = adapters.first().map_or(1, |ad| ad.b.cols());
        if rank == 0 || rank > d.min(k) {
            return Err(Error::param(format!("rank {rank} must lie in 1..={}", d.min(k))));
        }
        for ad in &adapters {
            if ad.b.shape() != (d, rank) || ad.a.shape() != (rank, k) {
                return Err(Error::ShapeMismatch {
                    op: "adapter",
                    left: ad.b.shape(),
                    right: ad.a.shape(),
                });
            }
        }
        Ok(Self {
            theta0,
            bias0,
            adapters,
            scale,
            rank,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.adapters.len()
    }

    /// `(d, k)`: outputs and inputs.
    pub fn shape(&self) -> (usize, usize) {
        self.theta0.shape()
    }

    pub fn zero_gradients(&self) -> LayerGradients {
        let (d, k) = self.shape();
        LayerGradients {
            g_theta0: Matrix::zeros(d, k),
            g_bias0: vec![0.0; d],
            g_adapters: self
                .adapters
                .iter()
                .map(|_| AdapterGradient {
                    g_b: Matrix::zeros(d, self.rank),
                    g_a: Matrix::zeros(self.rank, k),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterGradient {
    pub g_b: Matrix,
    pub g_a: Matrix,
}

/// Gradient buffers mirroring a [`LowRankLayer`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerGradients {
    pub g_theta0: Matrix,
    pub g_bias0: Vec<f64>,
    pub g_adapters: Vec<AdapterGradient>,
}

impl LayerGradients {
    pub fn zero(&mut self) {
        self.g_theta0.fill(0.0);
        self.g_bias0.iter_mut().for_each(|g| *g = 0.0);
        for g in &mut self.g_adapters {
            g.g_b.fill(0.0);
            g.g_a.fill(0.0);
        }
    }
}

fn check_alpha(m: usize, alpha: &PreferenceVector) -> Result<()> {
    if alpha.len() != m {
        return Err(Error::contract(format!(
            "preference has {} entries, layer has {m} tasks",
            alpha.len()
        )));
    }
    Ok(())
}

/// `θ₀ + s Σᵢ αᵢ BᵢAᵢ` as a fresh matrix.
pub fn combine(layer: &LowRankLayer, alpha: &PreferenceVector) -> Result<Matrix> {
    check_alpha(layer.num_tasks(), alpha)?;
    let (d, k) = layer.shape();
    // Sum the low-rank deltas before touching θ₀ so that cancelling
    // adapters leave θ₀ bit-exact.
    let mut delta = Matrix::zeros(d, k);
    for (ad, &w) in layer.adapters.iter().zip(alpha.as_slice()) {
        if w != 0.0 {
            delta.axpy(w, &ad.product())?;
        }
    }
    let mut out = layer.theta0.clone();
    out.axpy(layer.scale, &delta)?;
    Ok(out)
}

/// Chain rule through [`combine`]. `g_combined` is `∂loss/∂θ(α)` and
/// `g_bias` is `∂loss/∂bias`. Accumulates into `grads`; the main weight and
/// bias are skipped when `freeze_main` is set.
pub fn backprop_combined(
    layer: &LowRankLayer,
    alpha: &PreferenceVector,
    g_combined: &Matrix,
    g_bias: &[f64],
    grads: &mut LayerGradients,
    freeze_main: bool,
) -> Result<()> {
    check_alpha(layer.num_tasks(), alpha)?;
    if g_combined.shape() != layer.shape() {
        return Err(Error::ShapeMismatch {
            op: "backprop_combined",
            left: layer.shape(),
            right: g_combined.shape(),
        });
    }
    if g_bias.len() != layer.bias0.len() {
        return Err(Error::contract("bias gradient length differs from layer outputs"));
    }
    if !freeze_main {
        grads.g_theta0.axpy(1.0, g_combined)?;
        for (g, &d) in grads.g_bias0.iter_mut().zip(g_bias) {
            *g += d;
        }
    }
    for ((ad, g), &w) in layer
        .adapters
        .iter()
        .zip(grads.g_adapters.iter_mut())
        .zip(alpha.as_slice())
    {
        if w == 0.0 {
            continue;
        }
        let c = layer.scale * w;
        g.g_b.axpy(c, &g_combined.matmul_transpose_b(&ad.a)?)?;
        g.g_a.axpy(c, &ad.b.transpose_matmul(g_combined)?)?;
    }
    Ok(())
}

/// PaMaL baseline layer: `m` full base weights and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamalLayer {
    pub thetas: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl PamalLayer {
    /// Independently initialized base networks.
    pub fn init(d: usize, k: usize, m: usize, rng: &mut SeededRng) -> Result<Self> {
        let bound = kaiming_uniform_bound(k);
        let thetas = (0..m).map(|_| uniform_matrix(d, k, bound, rng)).collect();
        Self::from_parts(thetas, vec![vec![0.0; d]; m])
    }

    /// All base networks start from the same draw.
    pub fn init_identical(d: usize, k: usize, m: usize, rng: &mut SeededRng) -> Result<Self> {
        let theta = uniform_matrix(d, k, kaiming_uniform_bound(k), rng);
        Self::from_parts(vec![theta; m], vec![vec![0.0; d]; m])
    }

    pub fn from_parts(thetas: Vec<Matrix>, biases: Vec<Vec<f64>>) -> Result<Self> {
        let first = thetas
            .first()
            .ok_or_else(|| Error::contract("PaMaL layer needs at least one base weight"))?;
        let shape = first.shape();
        if thetas.iter().any(|t| t.shape() != shape) {
            return Err(Error::contract("PaMaL base weights differ in shape"));
        }
        if biases.len() != thetas.len() || biases.iter().any(|b| b.len() != shape.0) {
            return Err(Error::contract("PaMaL biases do not match base weights"));
        }
        Ok(Self { thetas, biases })
    }

    pub fn num_tasks(&self) -> usize {
        self.thetas.len()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.thetas[0].shape()
    }

    pub fn zero_gradients(&self) -> PamalGradients {
        let (d, k) = self.shape();
        PamalGradients {
            g_thetas: vec![Matrix::zeros(d, k); self.num_tasks()],
            g_biases: vec![vec![0.0; d]; self.num_tasks()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PamalGradients {
    pub g_thetas: Vec<Matrix>,
    pub g_biases: Vec<Vec<f64>>,
}

impl PamalGradients {
    pub fn zero(&mut self) {
        self.g_thetas.iter_mut().for_each(|g| g.fill(0.0));
        self.g_biases.iter_mut().flatten().for_each(|g| *g = 0.0);
    }
}

/// `Σᵢ αᵢ θᵢ`.
pub fn combine_pamal(layer: &PamalLayer, alpha: &PreferenceVector) -> Result<Matrix> {
    check_alpha(layer.num_tasks(), alpha)?;
    let (d, k) = layer.shape();
    let mut out = Matrix::zeros(d, k);
    for (t, &w) in layer.thetas.iter().zip(alpha.as_slice()) {
        if w != 0.0 {
            out.axpy(w, t)?;
        }
    }
    Ok(out)
}

/// `Σᵢ αᵢ bᵢ`.
pub fn combine_pamal_bias(layer: &PamalLayer, alpha: &PreferenceVector) -> Result<Vec<f64>> {
    check_alpha(layer.num_tasks(), alpha)?;
    let mut out = vec![0.0; layer.shape().0];
    for (b, &w) in layer.biases.iter().zip(alpha.as_slice()) {
        for (o, &x) in out.iter_mut().zip(b) {
            *o += w * x;
        }
    }
    Ok(out)
}

pub fn backprop_pamal(
    layer: &PamalLayer,
    alpha: &PreferenceVector,
    g_combined: &Matrix,
    g_bias: &[f64],
    grads: &mut PamalGradients,
) -> Result<()> {
    check_alpha(layer.num_tasks(), alpha)?;
    if g_combined.shape() != layer.shape() {
        return Err(Error::ShapeMismatch {
            op: "backprop_pamal",
            left: layer.shape(),
            right: g_combined.shape(),
        });
    }
    for i in 0..layer.num_tasks() {
        let w = alpha.get(i);
        if w == 0.0 {
            continue;
        }
        grads.g_thetas[i].axpy(w, g_combined)?;
        for (g, &d) in grads.g_biases[i].iter_mut().zip(g_bias) {
            *g += w * d;
        }
    }
    Ok(())
}

/// Weight-matrix parameter counts for one `d×k` layer shared by `m` tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub lorpman: usize,
    pub pamal: usize,
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, rhs: Self) -> Self {
        ParamCount {
            lorpman: self.lorpman + rhs.lorpman,
            pamal: self.pamal + rhs.pamal,
        }
    }
}

/// `(dk + m(dr + rk), m·dk)`. Biases are not counted.
pub fn parameter_count(d: usize, k: usize, m: usize, r: usize) -> Result<ParamCount> {
    if d == 0 || k == 0 || m == 0 {
        return Err(Error::param("d, k and m must be at least 1"));
    }
    if r == 0 {
        return Err(Error::param("rank must be at least 1"));
    }
    Ok(ParamCount {
        lorpman: d * k + m * (d * r + r * k),
        pamal: m * d * k,
    })
}

/// Cosine of the angle between the flattened matrices.
pub fn pairwise_cosine_similarity(a: &Matrix, b: &Matrix) -> Result<f64> {
    let dot = a.flat_dot(b)?;
    let (na, nb) = (a.frobenius_norm(), b.frobenius_norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero matrix".into()));
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}
