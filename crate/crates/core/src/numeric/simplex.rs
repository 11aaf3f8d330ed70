use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::SeededRng;
use crate::error::{Error, Result};

const SUM_TOLERANCE: f64 = 1e-9;

/// A point on the probability simplex: one nonnegative weight per task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct PreferenceVector(Vec<f64>);

impl PreferenceVector {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::param(format!(
                "preference vector needs at least 2 entries, got {}",
                alpha.len()
            )));
        }
        if alpha.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::param(format!("negative or non-finite preference {alpha:?}")));
        }
        let sum: f64 = alpha.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::param(format!("preference sums to {sum}, not 1")));
        }
        Ok(Self(alpha))
    }

    /// One-hot preference for task `i`.
    pub fn vertex(m: usize, i: usize) -> Result<Self> {
        if i >= m {
            return Err(Error::param(format!("vertex {i} out of range for m={m}")));
        }
        let mut a = vec![0.0; m];
        a[i] = 1.0;
        Self::new(a)
    }

    pub fn uniform(m: usize) -> Result<Self> {
        Self::new(vec![1.0 / m as f64; m])
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize) -> f64 {
        self.0[i]
    }
}

impl TryFrom<Vec<f64>> for PreferenceVector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PreferenceVector> for Vec<f64> {
    fn from(p: PreferenceVector) -> Self {
        p.0
    }
}

/// Draws from `Dir(p)` by normalizing independent `Gamma(p_i, 1)` variates.
pub fn sample_dirichlet(p: &[f64], rng: &mut SeededRng) -> Result<PreferenceVector> {
    if p.len() < 2 {
        return Err(Error::param("Dirichlet needs at least 2 concentration parameters"));
    }
    let gammas = p
        .iter()
        .map(|&pi| {
            if !(pi > 0.0 && pi.is_finite()) {
                return Err(Error::param(format!("Dirichlet parameter {pi} must be > 0")));
            }
            Gamma::new(pi, 1.0).map_err(|e| Error::param(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    // Very small shapes can underflow every draw to zero; redraw in that case.
    for _ in 0..64 {
        let draws: Vec<f64> = gammas.iter().map(|g| g.sample(rng)).collect();
        let sum: f64 = draws.iter().sum();
        if sum > 0.0 && sum.is_finite() {
            let mut alpha: Vec<f64> = draws.iter().map(|d| d / sum).collect();
            // Push the rounding residue into the largest entry.
            let residue = 1.0 - alpha.iter().sum::<f64>();
            let imax = argmax(&alpha);
            alpha[imax] = (alpha[imax] + residue).max(0.0);
            return PreferenceVector::new(alpha);
        }
    }
    Err(Error::Degenerate(format!(
        "Dirichlet draws with p={p:?} kept underflowing"
    )))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// All points `k / h` on the `m`-simplex with integer coordinates summing to `h`,
/// in lexicographic order of the leading coordinates (descending first weight).
pub fn simplex_grid(m: usize, h: usize) -> Result<Vec<PreferenceVector>> {
    if m < 2 {
        return Err(Error::param("simplex grid needs m >= 2"));
    }
    if h == 0 {
        return Err(Error::param("simplex grid needs h >= 1"));
    }
    let mut out = Vec::new();
    let mut counts = vec![0usize; m];
    fill_grid(&mut counts, 0, h, h, &mut out);
    out.into_iter().map(PreferenceVector::new).collect()
}

fn fill_grid(counts: &mut [usize], pos: usize, remaining: usize, h: usize, out: &mut Vec<Vec<f64>>) {
    if pos == counts.len() - 1 {
        counts[pos] = remaining;
        out.push(counts.iter().map(|&c| c as f64 / h as f64).collect());
        return;
    }
    for c in (0..=remaining).rev() {
        counts[pos] = c;
        fill_grid(counts, pos + 1, remaining - c, h, out);
    }
}

/// Number of grid points `C(h + m - 1, m - 1)`.
pub fn simplex_grid_len(m: usize, h: usize) -> usize {
    let (n, k) = (h + m - 1, m - 1);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}
