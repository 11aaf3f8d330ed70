//! Run settings: JSON config files merged with command-line flags (flags win).

use std::path::Path;

use serde::{Deserialize, Serialize};

use lorpman::network::{Mode, TaskKind};
use lorpman::problems::SyntheticSpec;
use lorpman::trainer::{OptimizerSpec, ToyConfig, TrainConfig};

use crate::args::{ModeArg, OptimizerKind, ProblemFlags, ToyArgs, TrainFlags};
use crate::error::CliError;
use crate::io::parse_list;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemSettings {
    pub m: usize,
    pub input_dim: usize,
    pub conflict: f64,
    pub rows: usize,
    /// Defaults to `max(input_dim, m + 1)`.
    pub teacher_dim: Option<usize>,
    /// Defaults to `m` regression tasks.
    pub tasks: Option<Vec<TaskKind>>,
    /// Defaults to the training seed.
    pub seed: Option<u64>,
}

impl Default for ProblemSettings {
    fn default() -> Self {
        Self { m: 3, input_dim: 8, conflict: 0.7, rows: 1000, teacher_dim: None, tasks: None, seed: None }
    }
}

impl ProblemSettings {
    pub fn spec(&self, train_seed: u64) -> Result<SyntheticSpec, CliError> {
        let tasks = self.tasks.clone().unwrap_or_else(|| vec![TaskKind::Regression; self.m]);
        if tasks.len() != self.m {
            return Err(CliError::Usage(format!("{} task kinds given for m = {}", tasks.len(), self.m)));
        }
        Ok(SyntheticSpec {
            tasks,
            input_dim: self.input_dim,
            teacher_dim: self.teacher_dim.unwrap_or(self.input_dim.max(self.m + 1)),
            conflict: self.conflict,
            rows: self.rows,
            seed: self.seed.unwrap_or(train_seed),
        })
    }
}

/// Everything needed to reproduce a `synth` run; also the `--config` file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SynthSettings {
    pub problem: ProblemSettings,
    pub train: TrainConfig,
}

/// Everything needed to reproduce a `toy` run; also the `--config` file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToySettings {
    pub train: ToyConfig,
    pub grid_resolution: f64,
    pub grid_half_width: f64,
}

impl Default for ToySettings {
    fn default() -> Self {
        Self { train: ToyConfig::default(), grid_resolution: 0.02, grid_half_width: 10.0 }
    }
}

fn load_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: invalid JSON: {e}", path.display())))
}

fn from_value<T: for<'de> Deserialize<'de>>(v: serde_json::Value, path: &Path) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn parse_tasks(s: &str) -> Result<Vec<TaskKind>, CliError> {
    s.split(',')
        .map(str::trim)
        .map(|t| match t {
            "reg" | "regression" => Ok(TaskKind::Regression),
            _ => t
                .strip_prefix("cls:")
                .and_then(|c| c.parse::<usize>().ok())
                .map(|classes| TaskKind::Classification { classes })
                .ok_or_else(|| CliError::Usage(format!("invalid task kind {t:?}; use reg or cls:<classes>"))),
        })
        .collect()
}

fn optimizer(kind: Option<OptimizerKind>, lr: Option<f64>, current: OptimizerSpec) -> OptimizerSpec {
    let base = match kind {
        Some(OptimizerKind::Adam) if !matches!(current, OptimizerSpec::Adam { .. }) => OptimizerSpec::adam(current.lr()),
        Some(OptimizerKind::Sgd) => OptimizerSpec::Sgd { lr: current.lr() },
        _ => current,
    };
    match lr {
        Some(lr) => base.with_lr(lr),
        None => base,
    }
}

impl SynthSettings {
    pub fn resolve(config: Option<&Path>, problem: &ProblemFlags, train: &TrainFlags) -> Result<Self, CliError> {
        let (mut s, freeze_in_file) = match config {
            Some(p) => {
                let v = load_json(p)?;
                let freeze = v.pointer("/train/freeze_epoch").is_some();
                (from_value::<SynthSettings>(v, p)?, freeze)
            }
            None => (SynthSettings::default(), false),
        };
        s.apply_problem(problem)?;
        s.apply_train(train)?;
        // Unless set explicitly, the main weights are never frozen.
        if train.freeze_epoch.is_none() && !freeze_in_file {
            s.train.freeze_epoch = s.train.epochs;
        }
        Ok(s)
    }

    fn apply_problem(&mut self, f: &ProblemFlags) -> Result<(), CliError> {
        let p = &mut self.problem;
        if let Some(t) = &f.tasks {
            let tasks = parse_tasks(t)?;
            if f.m.is_some_and(|m| m != tasks.len()) {
                return Err(CliError::Usage("--m disagrees with the number of --tasks entries".into()));
            }
            p.m = tasks.len();
            p.tasks = Some(tasks);
        } else if let Some(m) = f.m {
            p.m = m;
            if p.tasks.as_ref().is_some_and(|t| t.len() != m) {
                p.tasks = None;
            }
        }
        if let Some(u) = f.u {
            p.input_dim = u;
        }
        if let Some(g) = f.gamma {
            p.conflict = g;
        }
        if let Some(r) = f.rows {
            p.rows = r;
        }
        if let Some(s) = f.data_seed {
            p.seed = Some(s);
        }
        Ok(())
    }

    fn apply_train(&mut self, f: &TrainFlags) -> Result<(), CliError> {
        let t = &mut self.train;
        macro_rules! set {
            ($flag:ident => $field:ident) => {
                if let Some(v) = f.$flag {
                    t.$field = v;
                }
            };
        }
        set!(seed => seed);
        set!(epochs => epochs);
        set!(freeze_epoch => freeze_epoch);
        set!(window_b => window_b);
        set!(batch_q => batch_q);
        set!(lambda_p => lambda_p);
        set!(lambda_o => lambda_o);
        set!(scale_s => scale_s);
        set!(rank => rank_r);
        if let Some(p) = &f.dirichlet_p {
            t.dirichlet_p = parse_list(p, "--dirichlet-p")?;
        }
        if let Some(h) = &f.hidden {
            t.hidden = parse_list(h, "--hidden")?;
        }
        if let Some(m) = f.mode {
            t.mode = match m {
                ModeArg::Lorpman => Mode::Lorpman,
                ModeArg::Pamal => Mode::Pamal,
            };
        }
        t.optimizer = optimizer(f.optimizer, f.lr, t.optimizer);
        if let Some(n) = f.mc_samples {
            t.eval.mc_samples = n;
        }
        if f.no_epoch_hv {
            t.eval.per_epoch_hv = false;
        }
        Ok(())
    }
}

impl ToySettings {
    pub fn resolve(args: &ToyArgs) -> Result<Self, CliError> {
        let mut s = match &args.config {
            Some(p) => from_value::<ToySettings>(load_json(p)?, p)?,
            None => ToySettings::default(),
        };
        let t = &mut s.train;
        if let Some(v) = args.seed {
            t.seed = v;
        }
        if let Some(v) = args.steps {
            t.steps = v;
        }
        if let Some(v) = args.window_b {
            t.window_b = v;
        }
        if let Some(v) = args.lambda_p {
            t.lambda_p = v;
        }
        if let Some(v) = args.record_every {
            t.record_every = v;
        }
        if let Some(p) = &args.dirichlet_p {
            t.dirichlet_p = parse_list(p, "--dirichlet-p")?;
            if t.dirichlet_p.len() == 1 {
                t.dirichlet_p = vec![t.dirichlet_p[0]; 2];
            }
        }
        t.optimizer = optimizer(args.optimizer, args.lr, t.optimizer);
        if let Some(r) = args.resolution {
            s.grid_resolution = r;
        }
        Ok(s)
    }
}
