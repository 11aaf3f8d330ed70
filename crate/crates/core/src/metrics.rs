//! Pareto dominance, nondominated filtering, hypervolume and adapter correlation.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lowrank::{pairwise_cosine_similarity, Adapter};
use crate::numeric::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    Maximize,
    Minimize,
}

impl std::str::FromStr for Orientation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "max" | "maximize" => Ok(Orientation::Maximize),
            "min" | "minimize" => Ok(Orientation::Minimize),
            other => Err(Error::param(format!("unknown orientation `{other}`"))),
        }
    }
}

/// A set of objective vectors sharing an orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrontSample {
    pub points: Vec<Vec<f64>>,
    pub orientation: Orientation,
}

impl FrontSample {
    pub fn new(points: Vec<Vec<f64>>, orientation: Orientation) -> Result<Self> {
        if let Some(first) = points.first() {
            let m = first.len();
            if m < 2 {
                return Err(Error::contract("objective vectors need at least 2 entries"));
            }
            if points.iter().any(|p| p.len() != m) {
                return Err(Error::contract("objective vectors differ in length"));
            }
            if points.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::param("objective values must be finite"));
            }
        }
        Ok(Self { points, orientation })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.points.first().map(Vec::len)
    }
}

/// `a` is at least as good as `b` everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64], orientation: Orientation) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cannot compare a {}-objective vector with a {}-objective vector",
            a.len(),
            b.len()
        )));
    }
    Ok(dominates_unchecked(a, b, orientation))
}

fn dominates_unchecked(a: &[f64], b: &[f64], orientation: Orientation) -> bool {
    let mut strict = false;
    for (&x, &y) in a.iter().zip(b) {
        let (better, worse) = match orientation {
            Orientation::Maximize => (x > y, x < y),
            Orientation::Minimize => (x < y, x > y),
        };
        if worse {
            return false;
        }
        strict |= better;
    }
    strict
}

/// Points not dominated by any other point, duplicates kept once, in input order.
pub fn nondominated_filter(front: &FrontSample) -> FrontSample {
    let pts = &front.points;
    let mut kept: Vec<Vec<f64>> = Vec::new();
    for (i, p) in pts.iter().enumerate() {
        let dominated = pts
            .iter()
            .enumerate()
            .any(|(j, q)| j != i && dominates_unchecked(q, p, front.orientation));
        if !dominated && !kept.contains(p) {
            kept.push(p.clone());
        }
    }
    FrontSample {
        points: kept,
        orientation: front.orientation,
    }
}

/// Reference point for hypervolume; shares the front's orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferencePoint {
    pub r: Vec<f64>,
    pub orientation: Orientation,
}

impl ReferencePoint {
    pub fn new(r: Vec<f64>, orientation: Orientation) -> Self {
        Self { r, orientation }
    }

    pub fn origin(m: usize, orientation: Orientation) -> Self {
        Self::new(vec![0.0; m], orientation)
    }
}

pub const DEFAULT_MC_SAMPLES: usize = 1_000_000;
const MC_CHUNK: usize = 1 << 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HvMethod {
    /// Sweep (2 objectives) or slicing (3 objectives).
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HvEstimate {
    pub value: f64,
    /// Standard error, Monte Carlo only.
    pub stderr: Option<f64>,
}

/// Lebesgue measure of the region dominated by the front and bounded by `reference`.
///
/// Points that do not weakly dominate the reference point contribute nothing.
pub fn hypervolume(front: &FrontSample, reference: &ReferencePoint, method: HvMethod) -> Result<HvEstimate> {
    let m = reference.r.len();
    if m <= 1 {
        return Err(Error::contract("hypervolume needs at least 2 objectives"));
    }
    if front.orientation != reference.orientation {
        return Err(Error::contract("front and reference point orientations differ"));
    }
    if front.points.iter().any(|p| p.len() != m) {
        return Err(Error::contract("front and reference point differ in dimension"));
    }
    if method == HvMethod::Exact && m > 3 {
        return Err(Error::contract(format!("exact hypervolume supports at most 3 objectives, got {m}")));
    }

    // Work in maximization: negate everything for minimization.
    let sign = match front.orientation {
        Orientation::Maximize => 1.0,
        Orientation::Minimize => -1.0,
    };
    let r: Vec<f64> = reference.r.iter().map(|v| sign * v).collect();
    let usable: Vec<Vec<f64>> = front
        .points
        .iter()
        .map(|p| p.iter().map(|v| sign * v).collect::<Vec<f64>>())
        .filter(|p| p.iter().zip(&r).all(|(x, y)| x >= y))
        .collect();
    let usable = nondominated_filter(&FrontSample {
        points: usable,
        orientation: Orientation::Maximize,
    })
    .points;

    let empty = match method {
        HvMethod::Exact => HvEstimate { value: 0.0, stderr: None },
        HvMethod::MonteCarlo { .. } => HvEstimate { value: 0.0, stderr: Some(0.0) },
    };
    if usable.is_empty() {
        return Ok(empty);
    }

    match method {
        HvMethod::Exact if m == 2 => Ok(HvEstimate {
            value: hv2d(usable.iter().map(|p| (p[0], p[1])).collect(), r[0], r[1]),
            stderr: None,
        }),
        HvMethod::Exact => Ok(HvEstimate {
            value: hv3d(&usable, &r),
            stderr: None,
        }),
        HvMethod::MonteCarlo { samples, seed } => Ok(hv_monte_carlo(&usable, &r, samples, seed)),
    }
}

/// Exact for up to three objectives, Monte Carlo beyond.
pub fn hypervolume_auto(front: &FrontSample, reference: &ReferencePoint, samples: usize, seed: u64) -> Result<HvEstimate> {
    let method = if reference.r.len() <= 3 {
        HvMethod::Exact
    } else {
        HvMethod::MonteCarlo { samples, seed }
    };
    hypervolume(front, reference, method)
}

/// Union area of boxes `[rx, x] × [ry, y]`.
fn hv2d(mut pts: Vec<(f64, f64)>, rx: f64, ry: f64) -> f64 {
    pts.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    let mut best_y = ry;
    let mut area = 0.0;
    for (x, y) in pts {
        if y > best_y {
            area += (x - rx) * (y - best_y);
            best_y = y;
        }
    }
    area
}

/// Slices along the third objective; each slab is a 2-D union.
fn hv3d(pts: &[Vec<f64>], r: &[f64]) -> f64 {
    let mut sorted: Vec<&Vec<f64>> = pts.iter().collect();
    sorted.sort_by(|a, b| b[2].total_cmp(&a[2]));
    let mut volume = 0.0;
    for k in 0..sorted.len() {
        let next_z = sorted.get(k + 1).map_or(r[2], |p| p[2]);
        let height = sorted[k][2] - next_z;
        if height <= 0.0 {
            continue;
        }
        let slab: Vec<(f64, f64)> = sorted[..=k].iter().map(|p| (p[0], p[1])).collect();
        volume += height * hv2d(slab, r[0], r[1]);
    }
    volume
}

fn hv_monte_carlo(pts: &[Vec<f64>], r: &[f64], samples: usize, seed: u64) -> HvEstimate {
    let m = r.len();
    let upper: Vec<f64> = (0..m)
        .map(|i| pts.iter().map(|p| p[i]).fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let box_volume: f64 = upper.iter().zip(r).map(|(u, l)| u - l).product();
    if box_volume == 0.0 || samples == 0 {
        return HvEstimate { value: 0.0, stderr: Some(0.0) };
    }

    // Fixed-size chunks with their own streams: the count does not depend on
    // how rayon schedules them.
    let chunks = samples.div_ceil(MC_CHUNK);
    let root = SeededRng::stream(seed, "hypervolume-mc");
    let hits: usize = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let n = MC_CHUNK.min(samples - c * MC_CHUNK);
            let mut rng = root.derive_indexed("chunk", c as u64);
            let mut x = vec![0.0; m];
            let mut hits = 0usize;
            for _ in 0..n {
                for i in 0..m {
                    x[i] = r[i] + (upper[i] - r[i]) * rng.random::<f64>();
                }
                if pts.iter().any(|p| p.iter().zip(&x).all(|(a, b)| a >= b)) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let p = hits as f64 / samples as f64;
    HvEstimate {
        value: box_volume * p,
        stderr: Some(box_volume * (p * (1.0 - p) / samples as f64).sqrt()),
    }
}

/// `v ↦ offset − v`: turns a loss into a maximization score.
pub fn loss_to_score(loss: f64, offset: f64) -> f64 {
    offset - loss
}

/// Mean over unordered pairs of the cosine between flattened adapter products.
/// `absolute` averages `|cos|` instead of the signed value.
pub fn mean_pairwise_correlation(adapters: &[Adapter], absolute: bool) -> Result<f64> {
    if adapters.len() < 2 {
        return Err(Error::contract("correlation needs at least two adapters"));
    }
    let products: Vec<_> = adapters.iter().map(Adapter::product).collect();
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..products.len() {
        for j in i + 1..products.len() {
            let c = pairwise_cosine_similarity(&products[i], &products[j])?;
            sum += if absolute { c.abs() } else { c };
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}
