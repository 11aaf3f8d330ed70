//! Two-objective, two-parameter toy problem.
//!
//! ```text
//! f₁(θ) = c₁(θ) h₁(θ) + c₂(θ) g₁(θ)
//! f₂(θ) = c₁(θ) h₂(θ) + c₂(θ) g₂(θ)
//! h₁ = log(max(|0.5(−θ¹ − 7) − tanh(−θ²)|, 5e-6)) + 6
//! h₂ = log(max(|0.5(−θ¹ + 3) − tanh(−θ²) + 2|, 5e-6)) + 6
//! g₁ = ((−θ¹ + 7)² + 0.1 (−θ² − 8)²) / 10 − 20
//! g₂ = ((−θ¹ − 7)² + 0.1 (−θ² − 8)²) / 10 − 20
//! c₁ = max(tanh(0.5 θ²), 0),  c₂ = max(tanh(−0.5 θ²), 0)
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{nondominated_filter, FrontSample, Orientation};
use crate::numeric::PreferenceVector;

const LOG_CLAMP: f64 = 0.000005;

/// Initial main parameter of the toy manifold.
pub const TOY_THETA0: [f64; 2] = [4.5, 4.5];
/// Initial per-task offsets; the second components stay fixed.
pub const TOY_DELTAS: [[f64; 2]; 2] = [[-4.5, 0.0], [4.5, 0.0]];

fn u1(t: [f64; 2]) -> f64 {
    0.5 * (-t[0] - 7.0) - (-t[1]).tanh()
}

fn u2(t: [f64; 2]) -> f64 {
    0.5 * (-t[0] + 3.0) - (-t[1]).tanh() + 2.0
}

fn log_term(u: f64) -> f64 {
    u.abs().max(LOG_CLAMP).ln() + 6.0
}

/// `(f₁, f₂)` at `theta`.
pub fn toy_objectives(theta: [f64; 2]) -> (f64, f64) {
    let [t1, t2] = theta;
    let h1 = log_term(u1(theta));
    let h2 = log_term(u2(theta));
    let g1 = ((-t1 + 7.0).powi(2) + 0.1 * (-t2 - 8.0).powi(2)) / 10.0 - 20.0;
    let g2 = ((-t1 - 7.0).powi(2) + 0.1 * (-t2 - 8.0).powi(2)) / 10.0 - 20.0;
    let c1 = (0.5 * t2).tanh().max(0.0);
    let c2 = (-0.5 * t2).tanh().max(0.0);
    (c1 * h1 + c2 * g1, c1 * h2 + c2 * g2)
}

/// `(∇f₁, ∇f₂)`. At clamp boundaries and the gate kink the zero subgradient is used.
pub fn toy_gradients(theta: [f64; 2]) -> ([f64; 2], [f64; 2]) {
    let [t1, t2] = theta;
    let sech2 = |x: f64| 1.0 - x.tanh().powi(2);
    // Both log arguments have ∂u/∂θ¹ = −0.5 and ∂u/∂θ² = sech²(θ²).
    let du = [-0.5, sech2(t2)];
    let dlog = |u: f64| if u.abs() > LOG_CLAMP { [du[0] / u, du[1] / u] } else { [0.0, 0.0] };
    let (a1, a2) = (u1(theta), u2(theta));
    let h = [log_term(a1), log_term(a2)];
    let dh = [dlog(a1), dlog(a2)];
    let g = [
        ((-t1 + 7.0).powi(2) + 0.1 * (-t2 - 8.0).powi(2)) / 10.0 - 20.0,
        ((-t1 - 7.0).powi(2) + 0.1 * (-t2 - 8.0).powi(2)) / 10.0 - 20.0,
    ];
    let dg = [[(t1 - 7.0) / 5.0, (t2 + 8.0) / 50.0], [(t1 + 7.0) / 5.0, (t2 + 8.0) / 50.0]];
    let (c1, dc1) = if t2 > 0.0 { ((0.5 * t2).tanh(), 0.5 * sech2(0.5 * t2)) } else { (0.0, 0.0) };
    let (c2, dc2) = if t2 < 0.0 { ((-0.5 * t2).tanh(), -0.5 * sech2(0.5 * t2)) } else { (0.0, 0.0) };
    let grad = |i: usize| {
        [
            c1 * dh[i][0] + c2 * dg[i][0],
            dc1 * h[i] + c1 * dh[i][1] + dc2 * g[i] + c2 * dg[i][1],
        ]
    };
    (grad(0), grad(1))
}

/// Toy manifold: `θ(α) = θ₀ + Σᵢ αᵢ Δθᵢ`. Only the first component of each
/// `Δθᵢ` is trainable, mimicking a low-rank constraint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyState {
    pub theta: [f64; 2],
    pub deltas: Vec<[f64; 2]>,
}

impl Default for ToyState {
    fn default() -> Self {
        Self {
            theta: TOY_THETA0,
            deltas: TOY_DELTAS.to_vec(),
        }
    }
}

impl ToyState {
    pub fn new(theta: [f64; 2], deltas: Vec<[f64; 2]>) -> Result<Self> {
        if deltas.len() != 2 {
            return Err(Error::param("the toy problem has exactly two tasks"));
        }
        Ok(Self { theta, deltas })
    }

    pub fn at(&self, alpha: &PreferenceVector) -> Result<[f64; 2]> {
        if alpha.len() != self.deltas.len() {
            return Err(Error::contract("toy preference must have two entries"));
        }
        let mut t = self.theta;
        for (d, &a) in self.deltas.iter().zip(alpha.as_slice()) {
            t[0] += a * d[0];
            t[1] += a * d[1];
        }
        Ok(t)
    }
}

/// A point of the grid reference front.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyFrontPoint {
    pub theta: [f64; 2],
    pub f: [f64; 2],
}

/// Nondominated points of a dense grid over `[-half_width, half_width]²`,
/// sorted by increasing `f₁`.
pub fn toy_grid_front(resolution: f64, half_width: f64) -> Result<Vec<ToyFrontPoint>> {
    if !(resolution > 0.0) || !(half_width > 0.0) {
        return Err(Error::param("grid resolution and width must be positive"));
    }
    let n = (2.0 * half_width / resolution).round() as usize + 1;
    let coord = |i: usize| -half_width + i as f64 * resolution;
    let mut pts: Vec<ToyFrontPoint> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let theta = [coord(i), coord(j)];
            let (f1, f2) = toy_objectives(theta);
            pts.push(ToyFrontPoint { theta, f: [f1, f2] });
        }
    }
    // Sort by f₁ then f₂; a point survives if its f₂ beats every earlier one.
    pts.sort_by(|a, b| a.f[0].total_cmp(&b.f[0]).then(a.f[1].total_cmp(&b.f[1])));
    let mut front: Vec<ToyFrontPoint> = Vec::new();
    let mut best_f2 = f64::INFINITY;
    for p in pts {
        if p.f[1] < best_f2 {
            best_f2 = p.f[1];
            front.push(p);
        }
    }
    Ok(front)
}

/// Front points as a minimization [`FrontSample`] (already nondominated).
pub fn toy_front_sample(front: &[ToyFrontPoint]) -> FrontSample {
    let s = FrontSample {
        points: front.iter().map(|p| p.f.to_vec()).collect(),
        orientation: Orientation::Minimize,
    };
    debug_assert_eq!(nondominated_filter(&s).len(), s.len());
    s
}

/// Euclidean distance in objective space to the nearest front point, and that point's index.
pub fn distance_to_front(f: [f64; 2], front: &[ToyFrontPoint]) -> (f64, usize) {
    front
        .iter()
        .enumerate()
        .map(|(i, p)| (((p.f[0] - f[0]).powi(2) + (p.f[1] - f[1]).powi(2)).sqrt(), i))
        .fold((f64::INFINITY, 0), |best, cur| if cur.0 < best.0 { cur } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::SeededRng;
    use rand::Rng;

    // Second transcription, written from the formula without sharing helpers.
    fn oracle(t1: f64, t2: f64) -> (f64, f64) {
        let h1 = ((0.5 * (-t1 - 7.0) - (-t2).tanh()).abs().max(0.000005)).ln() + 6.0;
        let h2 = ((0.5 * (-t1 + 3.0) - (-t2).tanh() + 2.0).abs().max(0.000005)).ln() + 6.0;
        let g1 = ((-t1 + 7.0) * (-t1 + 7.0) + 0.1 * (-t2 - 8.0) * (-t2 - 8.0)) / 10.0 - 20.0;
        let g2 = ((-t1 - 7.0) * (-t1 - 7.0) + 0.1 * (-t2 - 8.0) * (-t2 - 8.0)) / 10.0 - 20.0;
        let c1 = f64::max((0.5 * t2).tanh(), 0.0);
        let c2 = f64::max((-0.5 * t2).tanh(), 0.0);
        (c1 * h1 + c2 * g1, c1 * h2 + c2 * g2)
    }

    #[test]
    fn gates_vanish_on_axis() {
        for t1 in [-9.0, -1.0, 0.0, 3.5, 8.0] {
            assert_eq!(toy_objectives([t1, 0.0]), (0.0, 0.0));
            let (g1, g2) = toy_gradients([t1, 0.0]);
            assert_eq!(g1[0], 0.0);
            assert_eq!(g2[0], 0.0);
        }
    }

    #[test]
    fn matches_second_transcription() {
        let mut rng = SeededRng::new(1);
        for _ in 0..1000 {
            let t: [f64; 2] = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            let (a1, a2) = toy_objectives(t);
            let (b1, b2) = oracle(t[0], t[1]);
            assert!((a1 - b1).abs() < 1e-12 && (a2 - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn default_state_is_the_initial_point() {
        let s = ToyState::default();
        assert_eq!(s.theta, [4.5, 4.5]);
        assert_eq!(s.deltas, vec![[-4.5, 0.0], [4.5, 0.0]]);
        assert_eq!(s.at(&PreferenceVector::uniform(2).unwrap()).unwrap(), [4.5, 4.5]);
        assert_eq!(s.at(&PreferenceVector::vertex(2, 0).unwrap()).unwrap(), [0.0, 4.5]);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(2);
        let h = 1e-6;
        let mut checked = 0;
        while checked < 200 {
            let t: [f64; 2] = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            // Skip the clamp region and the gate kink.
            if t[1].abs() < 1e-3 || u1(t).abs() < 1e-3 || u2(t).abs() < 1e-3 {
                continue;
            }
            let (g1, g2) = toy_gradients(t);
            for d in 0..2 {
                let mut up = t;
                up[d] += h;
                let mut dn = t;
                dn[d] -= h;
                let (u1v, u2v) = toy_objectives(up);
                let (d1v, d2v) = toy_objectives(dn);
                for (num, ana) in [((u1v - d1v) / (2.0 * h), g1[d]), ((u2v - d2v) / (2.0 * h), g2[d])] {
                    let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-3);
                    assert!(err < 1e-5, "θ={t:?} d={d}: {num} vs {ana}");
                }
            }
            checked += 1;
        }
    }

    // f₁(θ¹, θ²) = f₂(−θ¹, θ²) holds exactly on θ² ≤ 0, where only the g
    // terms are active. On θ² > 0 the h terms break it.
    #[test]
    fn mirror_relation() {
        let mut rng = SeededRng::new(3);
        let mut broken = 0;
        for _ in 0..100 {
            let t: [f64; 2] = [rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)];
            let (f1, _) = toy_objectives(t);
            let (_, f2m) = toy_objectives([-t[0], t[1]]);
            if t[1] <= 0.0 {
                assert!((f1 - f2m).abs() < 1e-12);
            } else if (f1 - f2m).abs() > 1e-6 {
                broken += 1;
            }
        }
        assert!(broken > 0);
    }

    #[test]
    fn objectives_are_locally_lipschitz() {
        let mut rng = SeededRng::new(4);
        for _ in 0..500 {
            let t: [f64; 2] = [rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0)];
            if u1(t).abs() < 0.05 || u2(t).abs() < 0.05 {
                continue;
            }
            let e: [f64; 2] = [rng.random_range(-1e-4..1e-4), rng.random_range(-1e-4..1e-4)];
            let (a1, a2) = toy_objectives(t);
            let (b1, b2) = toy_objectives([t[0] + e[0], t[1] + e[1]]);
            let norm = (e[0] * e[0] + e[1] * e[1]).sqrt();
            assert!((a1 - b1).abs() <= 100.0 * norm && (a2 - b2).abs() <= 100.0 * norm);
        }
    }

    #[test]
    fn coarse_front_is_nondominated_and_sorted() {
        let front = toy_grid_front(0.1, 10.0).unwrap();
        assert!(front.len() > 50);
        assert!(front.windows(2).all(|w| w[0].f[0] <= w[1].f[0] && w[0].f[1] > w[1].f[1]));
        let sample = toy_front_sample(&front);
        assert_eq!(nondominated_filter(&sample).len(), front.len());
        let (d, i) = distance_to_front(front[5].f, &front);
        assert_eq!((d, i), (0.0, 5));
    }
}
