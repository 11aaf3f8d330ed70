//! Explicit first layer that feeds `[x, α]` to an arbitrary ReLU network while
//! α only enters through rank-1 additive weight offsets.
//!
//! `S σ(R x + Σᵢ αᵢ Uᵢ) = [x, α]` with `σ = ReLU`:
//! - `R` is `(2u+m) × u`: rows `2j` and `2j+1` hold `+e_j` and `−e_j`, the last `m` rows are zero.
//! - `S` is `(u+m) × (2u+m)`: row `j` pairs `+1, −1` at columns `2j, 2j+1` using
//!   `σ(t) − σ(−t) = t`; row `u+i` picks column `2u+i`.
//! - `(Uᵢ)_j = 1` iff `j = 2u+i`, and `αᵢ ≥ 0` passes σ unchanged.
//!
//! A literal reading with `R` as `u × (2u+m)`, `S` as `(2u+m) × u` and the
//! indicator at `2m+i` does not type-check against the identity; the shapes
//! above are the ones that make it hold.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{Matrix, PreferenceVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructionWitness {
    pub u: usize,
    pub m: usize,
    pub r: Matrix,
    pub s: Matrix,
    pub indicators: Vec<Vec<f64>>,
}

pub fn build_witness(u: usize, m: usize) -> Result<ConstructionWitness> {
    if u < 1 || m < 2 {
        return Err(Error::param("the construction needs u ≥ 1 and m ≥ 2"));
    }
    let v = 2 * u + m;
    let r = Matrix::from_fn(v, u, |i, j| match i {
        _ if i == 2 * j => 1.0,
        _ if i == 2 * j + 1 => -1.0,
        _ => 0.0,
    });
    let s = Matrix::from_fn(u + m, v, |i, j| {
        if i < u {
            match j {
                _ if j == 2 * i => 1.0,
                _ if j == 2 * i + 1 => -1.0,
                _ => 0.0,
            }
        } else if j == u + i {
            // Row u+i' selects column 2u+i', i.e. j = u + (u + i').
            1.0
        } else {
            0.0
        }
    });
    let indicators = (0..m)
        .map(|i| (0..v).map(|j| if j == 2 * u + i { 1.0 } else { 0.0 }).collect())
        .collect();
    Ok(ConstructionWitness { u, m, r, s, indicators })
}

impl ConstructionWitness {
    /// `σ(R x + Σᵢ αᵢ Uᵢ)`.
    pub fn hidden(&self, x: &[f64], alpha: &PreferenceVector) -> Result<Vec<f64>> {
        if x.len() != self.u || alpha.len() != self.m {
            return Err(Error::contract(format!(
                "expected x of length {} and α of length {}, got {} and {}",
                self.u,
                self.m,
                x.len(),
                alpha.len()
            )));
        }
        let v = self.r.rows();
        Ok((0..v)
            .map(|i| {
                let rx: f64 = self.r.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
                let pu: f64 = self.indicators.iter().zip(alpha.as_slice()).map(|(ui, a)| a * ui[i]).sum();
                (rx + pu).max(0.0)
            })
            .collect())
    }
}

/// `S σ(R x + Σᵢ αᵢ Uᵢ)`, which equals `[x, α]`.
pub fn reconstruct(witness: &ConstructionWitness, x: &[f64], alpha: &PreferenceVector) -> Result<Vec<f64>> {
    let h = witness.hidden(x, alpha)?;
    Ok((0..witness.s.rows())
        .map(|i| witness.s.row(i).iter().zip(&h).map(|(a, b)| a * b).sum())
        .collect())
}

/// Numerical rank by Gaussian elimination with partial pivoting.
pub fn matrix_rank(a: &Matrix, tol: f64) -> usize {
    let mut m = a.clone();
    let (rows, cols) = m.shape();
    let mut rank = 0;
    for c in 0..cols {
        if rank == rows {
            break;
        }
        let pivot = (rank..rows).max_by(|&i, &j| m.get(i, c).abs().total_cmp(&m.get(j, c).abs())).expect("nonempty");
        if m.get(pivot, c).abs() <= tol {
            continue;
        }
        for j in 0..cols {
            let t = m.get(rank, j);
            m.set(rank, j, m.get(pivot, j));
            m.set(pivot, j, t);
        }
        for i in rank + 1..rows {
            let f = m.get(i, c) / m.get(rank, c);
            for j in c..cols {
                m.set(i, j, m.get(i, j) - f * m.get(rank, j));
            }
        }
        rank += 1;
    }
    rank
}

/// Ranks of every `d × k` reshaping (`dk = len`) of each indicator.
pub fn indicator_reshape_ranks(witness: &ConstructionWitness) -> Vec<Vec<((usize, usize), usize)>> {
    witness
        .indicators
        .iter()
        .map(|ui| {
            let n = ui.len();
            (1..=n)
                .filter(|d| n % d == 0)
                .map(|d| {
                    let k = n / d;
                    let mat = Matrix::new(d, k, ui.clone()).expect("sizes match");
                    ((d, k), matrix_rank(&mat, 0.0))
                })
                .collect()
        })
        .collect()
}

/// A plain ReLU network: ReLU after every layer except the last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluMlp {
    pub layers: Vec<(Matrix, Vec<f64>)>,
}

impl ReluMlp {
    pub fn new(layers: Vec<(Matrix, Vec<f64>)>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::param("a network needs at least one layer"));
        }
        for w in layers.windows(2) {
            if w[1].0.cols() != w[0].0.rows() {
                return Err(Error::ShapeMismatch { op: "mlp layers", left: w[0].0.shape(), right: w[1].0.shape() });
            }
        }
        if layers.iter().any(|(w, b)| w.rows() != b.len()) {
            return Err(Error::contract("bias length differs from layer width"));
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].0.cols()
    }

    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::contract("input width differs from the first layer"));
        }
        let mut h = x.to_vec();
        for (l, (w, b)) in self.layers.iter().enumerate() {
            let mut next: Vec<f64> = (0..w.rows())
                .map(|i| w.row(i).iter().zip(&h).map(|(a, c)| a * c).sum::<f64>() + b[i])
                .collect();
            if l + 1 < self.layers.len() {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = next;
        }
        Ok(h)
    }
}

/// `g` prepended with the witness layer: the input layer is `σ(R x + Σ αᵢ Uᵢ)`
/// and `S` is folded into `g`'s first weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceConditioned {
    witness: ConstructionWitness,
    body: ReluMlp,
}

impl PreferenceConditioned {
    pub fn new(witness: ConstructionWitness, g: &ReluMlp) -> Result<Self> {
        if g.input_dim() != witness.u + witness.m {
            return Err(Error::contract("network input width must equal u + m"));
        }
        let mut layers = g.layers.clone();
        layers[0].0 = layers[0].0.matmul(&witness.s)?;
        Ok(Self { witness, body: ReluMlp::new(layers)? })
    }

    pub fn eval(&self, x: &[f64], alpha: &PreferenceVector) -> Result<Vec<f64>> {
        self.body.eval(&self.witness.hidden(x, alpha)?)
    }
}

/// Outcome of one executable check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Randomized sweep of the reconstruction identity, the rank-1 property and the
/// composition property over `u ≤ 8`, `m ≤ 6`.
pub fn run_checks(trials: usize, seed: u64) -> Result<Vec<CheckResult>> {
    use crate::numeric::{gaussian_matrix, sample_dirichlet, SeededRng};
    use rand::Rng;

    let mut rng = SeededRng::stream(seed, "theory/checks");
    let mut recon_err = 0.0f64;
    let mut compose_err = 0.0f64;
    let mut rank_ok = true;
    let mut shapes = 0usize;
    for _ in 0..trials {
        let u = rng.random_range(1..=8);
        let m = rng.random_range(2..=6);
        let w = build_witness(u, m)?;
        let x: Vec<f64> = (0..u).map(|_| rng.random_range(-10.0..10.0)).collect();
        let alpha = sample_dirichlet(&vec![1.0; m], &mut rng)?;
        let out = reconstruct(&w, &x, &alpha)?;
        for (o, e) in out.iter().zip(x.iter().chain(alpha.as_slice())) {
            recon_err = recon_err.max((o - e).abs());
        }
        for per in indicator_reshape_ranks(&w) {
            shapes += per.len();
            rank_ok &= per.iter().all(|&(_, r)| r == 1);
        }
        let width = rng.random_range(1..=6);
        let g = ReluMlp::new(vec![
            (gaussian_matrix(width, u + m, 1.0, &mut rng), (0..width).map(|_| rng.random_range(-1.0..1.0)).collect()),
            (gaussian_matrix(2, width, 1.0, &mut rng), vec![0.0; 2]),
        ])?;
        let mut xa = x.clone();
        xa.extend_from_slice(alpha.as_slice());
        let direct = g.eval(&xa)?;
        let composed = PreferenceConditioned::new(w, &g)?.eval(&x, &alpha)?;
        for (p, q) in direct.iter().zip(&composed) {
            compose_err = compose_err.max((p - q).abs() / p.abs().max(1.0));
        }
    }
    Ok(vec![
        CheckResult {
            name: "reconstruction identity".into(),
            passed: recon_err <= 1e-12,
            detail: format!("{trials} random (x, α), max abs error {recon_err:.3e} (tolerance 1e-12)"),
        },
        CheckResult {
            name: "rank-1 indicators".into(),
            passed: rank_ok,
            detail: format!("{shapes} reshapings checked"),
        },
        CheckResult {
            name: "composition".into(),
            passed: compose_err <= 1e-10,
            detail: format!("{trials} random networks, max relative error {compose_err:.3e} (tolerance 1e-10)"),
        },
    ])
}
