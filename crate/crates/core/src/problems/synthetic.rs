//! Seeded multi-task supervised problems with a tunable amount of task conflict.
//!
//! Inputs `x ~ N(0, I_u)` go through a shared tanh teacher `z = tanh(W x)`.
//! Task `i` reads `z` along `vᵢ = w_c + γ (wᵢ − w_c)`: at `γ = 0` every task sees
//! the common direction, at `γ = 1` each task has its own.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Batch, TaskKind, TaskTargets};
use crate::numeric::{dot, gaussian_matrix, Matrix, SeededRng};

/// Fraction of rows used for training; the rest is validation.
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub tasks: Vec<TaskKind>,
    pub input_dim: usize,
    /// Width of the teacher's hidden representation.
    pub teacher_dim: usize,
    pub conflict: f64,
    pub rows: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn regression(m: usize, input_dim: usize, conflict: f64, rows: usize, seed: u64) -> Self {
        Self {
            tasks: vec![TaskKind::Regression; m],
            input_dim,
            teacher_dim: input_dim.max(m + 1),
            conflict,
            rows,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        let m = self.tasks.len();
        if m < 2 {
            return Err(Error::param("synthetic problems need at least two tasks"));
        }
        if self.input_dim < 2 || self.teacher_dim < 1 {
            return Err(Error::param("input and teacher widths must be at least 2 and 1"));
        }
        if self.rows < 10 * m {
            return Err(Error::param(format!("need at least {} rows for {m} tasks", 10 * m)));
        }
        if !(0.0..=1.0).contains(&self.conflict) {
            return Err(Error::param("conflict must lie in [0, 1]"));
        }
        if let Some(TaskKind::Classification { classes }) =
            self.tasks.iter().find(|t| matches!(t, TaskKind::Classification { classes } if *classes < 2))
        {
            return Err(Error::param(format!("classification needs at least 2 classes, got {classes}")));
        }
        Ok(())
    }
}

/// A train/validation pair sharing one task layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub train: Batch,
    pub validation: Batch,
    pub tasks: Vec<TaskKind>,
}

impl Dataset {
    pub fn new(train: Batch, validation: Batch, tasks: Vec<TaskKind>) -> Result<Self> {
        let check = |b: &Batch, what: &str| -> Result<()> {
            if b.targets.len() != tasks.len() {
                return Err(Error::contract(format!("{what} split has {} target columns for {} tasks", b.targets.len(), tasks.len())));
            }
            for (t, kind) in b.targets.iter().zip(&tasks) {
                match (t, kind) {
                    (TaskTargets::Regression(_), TaskKind::Regression) => {}
                    (TaskTargets::Classification(v), TaskKind::Classification { classes }) => {
                        if v.iter().any(|&c| c >= *classes) {
                            return Err(Error::contract(format!("{what} split has a label outside 0..{classes}")));
                        }
                    }
                    _ => return Err(Error::contract(format!("{what} split target type differs from the task kind"))),
                }
            }
            Ok(())
        };
        check(&train, "train")?;
        check(&validation, "validation")?;
        if train.inputs.cols() != validation.inputs.cols() {
            return Err(Error::contract("train and validation input widths differ"));
        }
        Ok(Self { train, validation, tasks })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn input_dim(&self) -> usize {
        self.train.inputs.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    /// `teacher_dim × input_dim`.
    pub shared: Matrix,
    pub common: Vec<f64>,
    pub directions: Vec<Vec<f64>>,
    /// Whether `common` and all `directions` are mutually orthogonal.
    pub orthogonal: bool,
}

impl Teacher {
    /// The effective read-out direction of task `i`.
    pub fn task_direction(&self, i: usize, conflict: f64) -> Vec<f64> {
        self.common
            .iter()
            .zip(&self.directions[i])
            .map(|(&c, &w)| c + conflict * (w - c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProblem {
    pub spec: SyntheticSpec,
    pub teacher: Teacher,
    pub data: Dataset,
}

fn unit(v: &mut [f64]) -> Result<()> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        return Err(Error::Degenerate("zero direction vector".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// `count` unit vectors in `R^dim`, Gram–Schmidt orthogonalized when `count ≤ dim`.
fn random_directions(count: usize, dim: usize, rng: &mut SeededRng) -> Result<(Vec<Vec<f64>>, bool)> {
    let orthogonal = count <= dim;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if orthogonal {
            for u in &out {
                let p = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, &b)| *x -= p * b);
            }
        }
        // A near-degenerate draw is simply redrawn.
        if dot(&v, &v).sqrt() < 1e-8 {
            continue;
        }
        unit(&mut v)?;
        out.push(v);
    }
    Ok((out, orthogonal))
}

fn standardize(v: &mut [f64]) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    v.iter_mut().for_each(|x| *x = (*x - mean) / sd);
}

/// Equal-frequency bins: thresholds at the `k/C` empirical quantiles.
fn quantile_bins(v: &[f64], classes: usize) -> Vec<usize> {
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let thresholds: Vec<f64> = (1..classes).map(|k| sorted[k * sorted.len() / classes]).collect();
    v.iter().map(|&y| thresholds.iter().filter(|&&t| y >= t).count()).collect()
}

pub fn make_synthetic(spec: &SyntheticSpec) -> Result<SyntheticProblem> {
    spec.validate()?;
    let m = spec.tasks.len();
    let (u, h, n) = (spec.input_dim, spec.teacher_dim, spec.rows);

    let mut teacher_rng = SeededRng::stream(spec.seed, "synthetic/teacher");
    let shared = gaussian_matrix(h, u, 1.0 / (u as f64).sqrt(), &mut teacher_rng);
    let (mut dirs, orthogonal) = random_directions(m + 1, h, &mut teacher_rng)?;
    let common = dirs.remove(0);
    let teacher = Teacher { shared, common, directions: dirs, orthogonal };

    let mut input_rng = SeededRng::stream(spec.seed, "synthetic/inputs");
    let inputs = gaussian_matrix(n, u, 1.0, &mut input_rng);
    let mut z = inputs.matmul_transpose_b(&teacher.shared)?;
    z.as_mut_slice().iter_mut().for_each(|x| *x = x.tanh());

    let targets: Vec<TaskTargets> = spec
        .tasks
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let v = teacher.task_direction(i, spec.conflict);
            let mut y: Vec<f64> = (0..n).map(|r| dot(z.row(r), &v)).collect();
            standardize(&mut y);
            match kind {
                TaskKind::Regression => TaskTargets::Regression(y),
                TaskKind::Classification { classes } => TaskTargets::Classification(quantile_bins(&y, *classes)),
            }
        })
        .collect();

    let all = Batch::new(inputs, targets)?;
    let n_train = ((n as f64) * TRAIN_FRACTION).round() as usize;
    let train_rows: Vec<usize> = (0..n_train).collect();
    let val_rows: Vec<usize> = (n_train..n).collect();
    let data = Dataset::new(all.select(&train_rows), all.select(&val_rows), spec.tasks.clone())?;
    Ok(SyntheticProblem { spec: spec.clone(), teacher, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regression_targets(b: &Batch, i: usize) -> &[f64] {
        match &b.targets[i] {
            TaskTargets::Regression(v) => v,
            _ => panic!("expected regression"),
        }
    }

    #[test]
    fn no_conflict_means_identical_targets() {
        let mut spec = SyntheticSpec::regression(4, 6, 0.0, 200, 9);
        spec.tasks[3] = TaskKind::Classification { classes: 3 };
        let p = make_synthetic(&spec).unwrap();
        for b in [&p.data.train, &p.data.validation] {
            for i in 1..3 {
                assert_eq!(regression_targets(b, 0), regression_targets(b, i));
            }
        }
    }

    #[test]
    fn seeded_generation_is_reproducible() {
        let spec = SyntheticSpec::regression(3, 5, 0.7, 300, 42);
        let a = make_synthetic(&spec).unwrap();
        let b = make_synthetic(&spec).unwrap();
        assert_eq!(a, b);
        let c = make_synthetic(&SyntheticSpec { seed: 43, ..spec }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn split_and_shapes() {
        let p = make_synthetic(&SyntheticSpec::regression(2, 4, 0.5, 101, 1)).unwrap();
        assert_eq!(p.data.train.len(), 81);
        assert_eq!(p.data.validation.len(), 20);
        assert_eq!(p.data.input_dim(), 4);
        assert!(p.teacher.orthogonal);
        for (i, a) in std::iter::once(&p.teacher.common).chain(&p.teacher.directions).enumerate() {
            for (j, b) in std::iter::once(&p.teacher.common).chain(&p.teacher.directions).enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((dot(a, b) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn classification_bins_are_balanced() {
        let spec = SyntheticSpec {
            tasks: vec![TaskKind::Classification { classes: 4 }, TaskKind::Regression],
            input_dim: 3,
            teacher_dim: 5,
            conflict: 0.3,
            rows: 400,
            seed: 5,
        };
        let p = make_synthetic(&spec).unwrap();
        let mut counts = [0usize; 4];
        for b in [&p.data.train, &p.data.validation] {
            if let TaskTargets::Classification(v) = &b.targets[0] {
                v.iter().for_each(|&c| counts[c] += 1);
            }
        }
        assert_eq!(counts, [100, 100, 100, 100]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let ok = SyntheticSpec::regression(3, 4, 0.5, 100, 0);
        assert!(make_synthetic(&SyntheticSpec { rows: 29, ..ok.clone() }).is_err());
        assert!(make_synthetic(&SyntheticSpec { conflict: 1.5, ..ok.clone() }).is_err());
        assert!(make_synthetic(&SyntheticSpec { input_dim: 1, ..ok.clone() }).is_err());
        assert!(make_synthetic(&SyntheticSpec { tasks: vec![TaskKind::Regression], ..ok }).is_err());
    }
}
