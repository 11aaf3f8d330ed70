//! Shared linear regression: `fᵢ(θ) = mean_r (x_r·θ − y_{r,i})²`.
//!
//! Every objective is a convex quadratic with the same positive definite Hessian
//! `2 XᵀX / N`, so strictly positive scalarizations have unique minimizers.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{dot, gaussian_matrix, Matrix, PreferenceVector, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexRegression {
    /// `N × u`.
    pub inputs: Matrix,
    /// One target column per task.
    pub targets: Vec<Vec<f64>>,
}

impl ConvexRegression {
    /// Task `i` reads `vᵢ = w_c + γ (wᵢ − w_c)` with Gaussian label noise.
    pub fn generate(m: usize, u: usize, conflict: f64, rows: usize, noise: f64, seed: u64) -> Result<Self> {
        if m < 2 || u < 1 || rows < u.max(10 * m) {
            return Err(Error::param("convex problem needs m ≥ 2, u ≥ 1 and enough rows for a full-rank design"));
        }
        if !(0.0..=1.0).contains(&conflict) || !(noise >= 0.0) {
            return Err(Error::param("conflict must lie in [0, 1] and noise must be nonnegative"));
        }
        let mut rng = SeededRng::stream(seed, "convex");
        let inputs = gaussian_matrix(rows, u, 1.0, &mut rng);
        let common: Vec<f64> = (0..u).map(|_| rng.sample(StandardNormal)).collect();
        let targets = (0..m)
            .map(|_| {
                let own: Vec<f64> = (0..u).map(|_| rng.sample(StandardNormal)).collect();
                let v: Vec<f64> = common.iter().zip(&own).map(|(&c, &w)| c + conflict * (w - c)).collect();
                (0..rows)
                    .map(|r| dot(inputs.row(r), &v) + noise * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        Ok(Self { inputs, targets })
    }

    pub fn num_tasks(&self) -> usize {
        self.targets.len()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    fn residuals(&self, theta: &[f64], i: usize) -> Vec<f64> {
        (0..self.inputs.rows())
            .map(|r| dot(self.inputs.row(r), theta) - self.targets[i][r])
            .collect()
    }

    pub fn objectives(&self, theta: &[f64]) -> Result<Vec<f64>> {
        self.check(theta)?;
        let n = self.inputs.rows() as f64;
        Ok((0..self.num_tasks())
            .map(|i| self.residuals(theta, i).iter().map(|e| e * e).sum::<f64>() / n)
            .collect())
    }

    pub fn gradients(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check(theta)?;
        let n = self.inputs.rows() as f64;
        Ok((0..self.num_tasks())
            .map(|i| {
                let e = self.residuals(theta, i);
                let mut g = vec![0.0; self.dim()];
                for (r, &er) in e.iter().enumerate() {
                    for (gj, &x) in g.iter_mut().zip(self.inputs.row(r)) {
                        *gj += 2.0 * er * x / n;
                    }
                }
                g
            })
            .collect())
    }

    /// Closed-form minimizer of `Σᵢ αᵢ fᵢ` via the normal equations.
    pub fn scalarized_minimizer(&self, alpha: &PreferenceVector) -> Result<Vec<f64>> {
        if alpha.len() != self.num_tasks() {
            return Err(Error::contract("preference length differs from task count"));
        }
        let gram = self.inputs.transpose_matmul(&self.inputs)?;
        let rows = self.inputs.rows();
        let y: Vec<f64> = (0..rows)
            .map(|r| (0..self.num_tasks()).map(|i| alpha.get(i) * self.targets[i][r]).sum())
            .collect();
        let rhs: Vec<f64> = (0..self.dim())
            .map(|j| (0..rows).map(|r| self.inputs.get(r, j) * y[r]).sum())
            .collect();
        cholesky_solve(&gram, &rhs)
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "convex objective",
                left: (theta.len(), 1),
                right: (self.dim(), 1),
            });
        }
        Ok(())
    }
}

fn cholesky_solve(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l.get(i, k) * l.get(j, k)).sum();
            if i == j {
                let d = a.get(i, i) - s;
                if d <= 0.0 {
                    return Err(Error::Degenerate("design matrix is not full rank".into()));
                }
                l.set(i, i, d.sqrt());
            } else {
                l.set(i, j, (a.get(i, j) - s) / l.get(j, j));
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (b[i] - (0..i).map(|k| l.get(i, k) * z[k]).sum::<f64>()) / l.get(i, i);
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        x[i] = (z[i] - (i + 1..n).map(|k| l.get(k, i) * x[k]).sum::<f64>()) / l.get(i, i);
    }
    Ok(x)
}
