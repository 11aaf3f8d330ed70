use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use lorpman::lowrank::ParamCount;
use lorpman::metrics::{hypervolume, FrontSample, HvMethod, Orientation, ReferencePoint};
use lorpman::network::{ManifoldModel, TaskTargets};
use lorpman::problems::{distance_to_front, make_synthetic, toy_grid_front, Dataset};
use lorpman::theory::run_checks;
use lorpman::trainer::{build_model, mean_adapter_correlation, train, train_toy, validation_hypervolume, EvaluatedFront, RunRecord, TrainConfig};

use crate::args::{AblateArgs, ChecksArgs, HvArgs, HvMethodArg, OrientationArg, SynthArgs, ToyArgs};
use crate::error::CliError;
use crate::io::{fmt_f64, fmt_sig, parse_list, read_numeric_csv, write_table};
use crate::settings::{SynthSettings, ToySettings};
use crate::svg::{scatter, Series, SeriesStyle};

pub const CODE_HASH: &str = env!("LORPMAN_CODE_HASH");

fn out(w: &mut dyn Write, line: impl std::fmt::Display) -> Result<(), CliError> {
    writeln!(w, "{line}").map_err(|e| CliError::Failed(format!("stdout: {e}")))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Failed(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_file(path, &text)
}

/// Artifact file names, relative to the output directory.
type Artifacts = BTreeMap<&'static str, String>;

#[derive(Debug, Serialize)]
pub struct RunManifest<C: Serialize, M: Serialize> {
    pub command: &'static str,
    pub tool_version: &'static str,
    pub code_hash: &'static str,
    pub seed: u64,
    /// Pass back with `--config` to repeat the run.
    pub config: C,
    pub metrics: M,
    pub artifacts: Artifacts,
}

fn manifest<C: Serialize, M: Serialize>(command: &'static str, seed: u64, config: C, metrics: M, artifacts: Artifacts) -> RunManifest<C, M> {
    RunManifest { command, tool_version: env!("CARGO_PKG_VERSION"), code_hash: CODE_HASH, seed, config, metrics, artifacts }
}

// ---------------------------------------------------------------------------
// toy

#[derive(Debug, Serialize)]
struct ToyFinal {
    alpha: Vec<f64>,
    theta: [f64; 2],
    f: [f64; 2],
    distance_to_front: f64,
    /// Position of the nearest front point in increasing-f₁ order, in [0, 1].
    front_rank: f64,
}

#[derive(Debug, Serialize)]
struct ToyMetrics {
    steps: usize,
    front_points: usize,
    finals: Vec<ToyFinal>,
}

fn alpha_label(a: &[f64]) -> String {
    a.iter().map(|v| fmt_sig(*v, 6)).collect::<Vec<_>>().join(":")
}

pub fn cmd_toy(args: &ToyArgs, w: &mut dyn Write) -> Result<(), CliError> {
    let settings = ToySettings::resolve(args)?;
    let front = toy_grid_front(settings.grid_resolution, settings.grid_half_width)?;
    let run = train_toy(&settings.train)?;
    let dir = &args.out_dir;
    create_dir(dir)?;

    let labels: Vec<String> = settings.train.eval_preferences.iter().map(|a| alpha_label(a)).collect();
    let traj_rows: Vec<Vec<String>> = run
        .trajectory
        .iter()
        .map(|p| {
            vec![p.step.to_string(), labels[p.label].clone(), fmt_f64(p.theta[0]), fmt_f64(p.theta[1]), fmt_f64(p.f[0]), fmt_f64(p.f[1])]
        })
        .collect();
    let header = |cols: &[&str]| cols.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    write_table(&dir.join("trajectory.csv"), &header(&["step", "alpha", "theta1", "theta2", "f1", "f2"]), &traj_rows)?;
    let front_rows: Vec<Vec<String>> =
        front.iter().map(|p| vec![fmt_f64(p.theta[0]), fmt_f64(p.theta[1]), fmt_f64(p.f[0]), fmt_f64(p.f[1])]).collect();
    write_table(&dir.join("front.csv"), &header(&["theta1", "theta2", "f1", "f2"]), &front_rows)?;

    let palette = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e"];
    let mut series = vec![Series {
        class: "front-point".into(),
        color: "#b0b0b0".into(),
        style: SeriesStyle::Markers { radius: 1.2 },
        points: front.iter().map(|p| (p.f[0], p.f[1])).collect(),
    }];
    for (i, label) in labels.iter().enumerate() {
        series.push(Series {
            class: format!("trajectory alpha-{}", label.replace([':', '.'], "_")),
            color: palette[i % palette.len()].into(),
            style: SeriesStyle::Path,
            points: run.trajectory.iter().filter(|p| p.label == i).map(|p| (p.f[0], p.f[1])).collect(),
        });
    }
    write_file(&dir.join("toy.svg"), &scatter("Toy problem: trajectories over the grid front", "f1", "f2", &series))?;

    let n = front.len() as f64;
    let finals: Vec<ToyFinal> = run
        .final_points()
        .iter()
        .map(|p| {
            let (d, idx) = distance_to_front(p.f, &front);
            ToyFinal {
                alpha: settings.train.eval_preferences[p.label].clone(),
                theta: p.theta,
                f: p.f,
                distance_to_front: d,
                front_rank: if n > 1.0 { idx as f64 / (n - 1.0) } else { 0.0 },
            }
        })
        .collect();
    for f in &finals {
        out(
            w,
            format_args!(
                "alpha {} theta ({}, {}) f ({}, {}) distance {}",
                alpha_label(&f.alpha),
                fmt_sig(f.theta[0], 8),
                fmt_sig(f.theta[1], 8),
                fmt_sig(f.f[0], 8),
                fmt_sig(f.f[1], 8),
                fmt_sig(f.distance_to_front, 4)
            ),
        )?;
    }
    let artifacts: Artifacts = [
        ("trajectory_csv", "trajectory.csv".to_string()),
        ("front_csv", "front.csv".to_string()),
        ("svg", "toy.svg".to_string()),
        ("manifest", "manifest.json".to_string()),
    ]
    .into();
    let metrics = ToyMetrics { steps: settings.train.steps, front_points: front.len(), finals };
    write_json(&dir.join("manifest.json"), &manifest("toy", settings.train.seed, &settings, metrics, artifacts))
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone, Serialize)]
pub struct SynthMetrics {
    pub final_hv: f64,
    pub final_hv_stderr: Option<f64>,
    pub mean_adapter_correlation: Option<f64>,
    pub parameter_counts: ParamCount,
    pub iterations: usize,
    pub epoch_train_loss: Vec<f64>,
    pub epoch_val_hv: Vec<f64>,
}

pub struct SynthOutcome {
    pub data: Dataset,
    pub model: ManifoldModel,
    pub record: RunRecord,
    pub front: EvaluatedFront,
    pub metrics: SynthMetrics,
}

/// Generates the problem, trains, and evaluates the validation front.
pub fn run_synth(settings: &SynthSettings) -> Result<SynthOutcome, CliError> {
    let spec = settings.problem.spec(settings.train.seed)?;
    let problem = make_synthetic(&spec)?;
    let data = problem.data;
    let config = &settings.train;
    config.validate(data.num_tasks())?;
    let mut model = build_model(&data, config)?;
    let record = train(&mut model, &data, config).map_err(|e| CliError::Failed(format!("training failed: {e}")))?;
    let (front, hv) = validation_hypervolume(&model, &data.validation, &config.eval, config.seed)?;
    let metrics = SynthMetrics {
        final_hv: hv.value,
        final_hv_stderr: hv.stderr,
        mean_adapter_correlation: mean_adapter_correlation(&model)?,
        parameter_counts: config.architecture(&data).parameter_count()?,
        iterations: record.iterations,
        epoch_train_loss: record.epoch_train_loss.clone(),
        epoch_val_hv: record.epoch_val_hv.clone(),
    };
    Ok(SynthOutcome { data, model, record, front, metrics })
}

fn write_data_csv(path: &Path, batch: &lorpman::network::Batch) -> Result<(), CliError> {
    let u = batch.inputs.cols();
    let mut header: Vec<String> = (0..u).map(|j| format!("x_{j}")).collect();
    header.extend((0..batch.targets.len()).map(|i| format!("y_{i}")));
    let rows: Vec<Vec<String>> = (0..batch.len())
        .map(|r| {
            let mut row: Vec<String> = batch.inputs.row(r).iter().map(|&v| fmt_f64(v)).collect();
            for t in &batch.targets {
                row.push(match t {
                    TaskTargets::Regression(v) => fmt_f64(v[r]),
                    TaskTargets::Classification(v) => v[r].to_string(),
                });
            }
            row
        })
        .collect();
    write_table(path, &header, &rows)
}

pub fn cmd_synth(args: &SynthArgs, w: &mut dyn Write) -> Result<(), CliError> {
    let settings = SynthSettings::resolve(args.config.as_deref(), &args.problem, &args.train)?;
    let outcome = run_synth(&settings)?;
    let dir = &args.out_dir;
    create_dir(dir)?;
    let m = outcome.data.num_tasks();

    let mut header: Vec<String> = (0..m).map(|i| format!("pref_{i}")).collect();
    header.extend((0..m).map(|i| format!("obj_{i}")));
    let rows: Vec<Vec<String>> = outcome
        .front
        .preferences
        .iter()
        .zip(&outcome.front.front.points)
        .map(|(a, p)| a.as_slice().iter().chain(p).map(|&v| fmt_f64(v)).collect())
        .collect();
    write_table(&dir.join("front.csv"), &header, &rows)?;
    let svg = scatter(
        &format!("Validation front ({} mode, {m} tasks)", settings.train.mode),
        "obj_0",
        "obj_1",
        &[Series {
            class: "front-point".into(),
            color: "#1f77b4".into(),
            style: SeriesStyle::Markers { radius: 3.0 },
            points: outcome.front.front.points.iter().map(|p| (p[0], p[1])).collect(),
        }],
    );
    write_file(&dir.join("front.svg"), &svg)?;
    write_json(&dir.join("model.json"), &outcome.model)?;

    let mut artifacts: Artifacts = [
        ("front_csv", "front.csv".to_string()),
        ("front_svg", "front.svg".to_string()),
        ("model", "model.json".to_string()),
        ("manifest", "manifest.json".to_string()),
    ]
    .into();
    if args.export_data {
        write_data_csv(&dir.join("data_train.csv"), &outcome.data.train)?;
        write_data_csv(&dir.join("data_validation.csv"), &outcome.data.validation)?;
        artifacts.insert("data_train_csv", "data_train.csv".into());
        artifacts.insert("data_validation_csv", "data_validation.csv".into());
    }
    write_json(&dir.join("manifest.json"), &manifest("synth", settings.train.seed, &settings, &outcome.metrics, artifacts))?;

    let mt = &outcome.metrics;
    let stderr = mt.final_hv_stderr.map(|s| format!(" stderr {}", fmt_sig(s, 12))).unwrap_or_default();
    let corr = mt.mean_adapter_correlation.map(|c| format!(" correlation {}", fmt_sig(c, 6))).unwrap_or_default();
    out(w, format_args!("hv {}{stderr} mode {} epochs {}{corr}", fmt_sig(mt.final_hv, 12), settings.train.mode, settings.train.epochs))?;
    eprintln!("elapsed {:.2}s", outcome.record.elapsed_secs);
    Ok(())
}

// ---------------------------------------------------------------------------
// hv

pub fn cmd_hv(args: &HvArgs, w: &mut dyn Write) -> Result<(), CliError> {
    let r: Vec<f64> = parse_list(&args.reference, "--ref")?;
    if r.len() < 2 {
        return Err(CliError::Usage("--ref needs at least two coordinates".into()));
    }
    let table = read_numeric_csv(&args.input)?;
    let cols = table.columns_with_prefix("obj_");
    if !table.rows.is_empty() && cols.len() != r.len() {
        return Err(CliError::Usage(format!("{} objective columns but a {}-dimensional reference point", cols.len(), r.len())));
    }
    let orientation = match args.orientation {
        OrientationArg::Max => Orientation::Maximize,
        OrientationArg::Min => Orientation::Minimize,
    };
    let points: Vec<Vec<f64>> = table.rows.iter().map(|row| cols.iter().map(|&c| row[c]).collect()).collect();
    let front = FrontSample::new(points, orientation)?;
    let method = match args.method {
        HvMethodArg::Exact => HvMethod::Exact,
        HvMethodArg::Mc => HvMethod::MonteCarlo { samples: args.samples, seed: args.seed },
        HvMethodArg::Auto if r.len() <= 3 => HvMethod::Exact,
        HvMethodArg::Auto => HvMethod::MonteCarlo { samples: args.samples, seed: args.seed },
    };
    if method == HvMethod::Exact && r.len() > 3 {
        return Err(CliError::Usage("exact hypervolume supports at most 3 objectives; use --method mc".into()));
    }
    let hv = hypervolume(&front, &ReferencePoint::new(r, orientation), method)?;
    match hv.stderr {
        Some(se) => out(w, format_args!("{} {}", fmt_sig(hv.value, 12), fmt_sig(se, 12))),
        None => out(w, fmt_sig(hv.value, 12)),
    }
}

// ---------------------------------------------------------------------------
// ablate

const ABLATE_PARAMS: &[&str] = &["rank", "freeze-epoch", "scale-s", "lambda-o", "lambda-p", "window-b", "epochs"];

fn set_param(config: &mut TrainConfig, param: &str, value: &str) -> Result<(), CliError> {
    let bad = || CliError::Usage(format!("invalid value {value:?} for {param}"));
    let int = || value.parse::<usize>().map_err(|_| bad());
    let real = || value.parse::<f64>().map_err(|_| bad());
    match param {
        "rank" => config.rank_r = int()?,
        "freeze-epoch" => config.freeze_epoch = int()?,
        "scale-s" => config.scale_s = real()?,
        "lambda-o" => config.lambda_o = real()?,
        "lambda-p" => config.lambda_p = real()?,
        "window-b" => config.window_b = int()?,
        "epochs" => config.epochs = int()?,
        _ => return Err(CliError::Usage(format!("unknown parameter {param:?}; expected one of {}", ABLATE_PARAMS.join(", ")))),
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub value: String,
    pub seed: u64,
    pub hv: f64,
    pub mean_adapter_correlation: Option<f64>,
    pub parameter_counts: ParamCount,
    pub final_train_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub value: String,
    pub mean_hv: f64,
    pub std_hv: f64,
    pub mean_correlation: Option<f64>,
    pub parameters: usize,
}

#[derive(Debug, Serialize)]
struct AblationMetrics {
    param: String,
    repeats: usize,
    rows: Vec<AblationRow>,
    cells: Vec<AblationCell>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Runs every (value, seed) cell in parallel; results come back in sweep order.
pub fn run_ablation(base: &SynthSettings, param: &str, values: &[String], repeats: usize) -> Result<(Vec<AblationRow>, Vec<AblationCell>), CliError> {
    if repeats == 0 || values.is_empty() {
        return Err(CliError::Usage("an ablation needs at least one value and one repeat".into()));
    }
    let mut jobs = Vec::new();
    for v in values {
        for r in 0..repeats {
            let mut s = base.clone();
            set_param(&mut s.train, param, v)?;
            s.train.seed = base.train.seed + r as u64;
            s.problem.seed = base.problem.seed.map(|d| d + r as u64);
            s.train.validate(s.problem.m)?;
            jobs.push((v.clone(), s));
        }
    }
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|(v, s)| {
            let o = run_synth(s)?;
            Ok(AblationCell {
                value: v.clone(),
                seed: s.train.seed,
                hv: o.metrics.final_hv,
                mean_adapter_correlation: o.metrics.mean_adapter_correlation,
                parameter_counts: o.metrics.parameter_counts,
                final_train_loss: o.record.epoch_train_loss.last().copied(),
            })
        })
        .collect::<Result<_, CliError>>()?;
    let rows = values
        .iter()
        .map(|v| {
            let group: Vec<&AblationCell> = cells.iter().filter(|c| &c.value == v).collect();
            let (mean_hv, std_hv) = mean_std(&group.iter().map(|c| c.hv).collect::<Vec<_>>());
            let corrs: Option<Vec<f64>> = group.iter().map(|c| c.mean_adapter_correlation).collect();
            let counts = group[0].parameter_counts;
            AblationRow {
                value: v.clone(),
                mean_hv,
                std_hv,
                mean_correlation: corrs.map(|c| mean_std(&c).0),
                parameters: match base.train.mode {
                    lorpman::network::Mode::Lorpman => counts.lorpman,
                    lorpman::network::Mode::Pamal => counts.pamal,
                },
            }
        })
        .collect();
    Ok((rows, cells))
}

pub fn cmd_ablate(args: &AblateArgs, w: &mut dyn Write) -> Result<(), CliError> {
    let param = args.param.replace('_', "-");
    if !ABLATE_PARAMS.contains(&param.as_str()) {
        return Err(CliError::Usage(format!("unknown parameter {:?}; expected one of {}", args.param, ABLATE_PARAMS.join(", "))));
    }
    let base = SynthSettings::resolve(args.config.as_deref(), &args.problem, &args.train)?;
    let values: Vec<String> = args.values.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
    let (rows, cells) = run_ablation(&base, &param, &values, args.repeats)?;

    let dir = &args.out_dir;
    create_dir(dir)?;
    let header: Vec<String> = ["value", "mean_hv", "std_hv", "mean_correlation", "parameters"].iter().map(|s| s.to_string()).collect();
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![r.value.clone(), fmt_f64(r.mean_hv), fmt_f64(r.std_hv), r.mean_correlation.map(fmt_f64).unwrap_or_default(), r.parameters.to_string()]
        })
        .collect();
    write_table(&dir.join("ablation.csv"), &header, &table)?;
    let artifacts: Artifacts = [("table_csv", "ablation.csv".to_string()), ("manifest", "manifest.json".to_string())].into();
    for r in &rows {
        let corr = r.mean_correlation.map(|c| fmt_sig(c, 6)).unwrap_or_else(|| "-".into());
        out(w, format_args!("{param}={} hv {} ± {} correlation {corr} parameters {}", r.value, fmt_sig(r.mean_hv, 8), fmt_sig(r.std_hv, 4), r.parameters))?;
    }
    let metrics = AblationMetrics { param, repeats: args.repeats, rows, cells };
    write_json(&dir.join("manifest.json"), &manifest("ablate", base.train.seed, &base, metrics, artifacts))
}

// ---------------------------------------------------------------------------
// checks

pub fn cmd_checks(args: &ChecksArgs, w: &mut dyn Write) -> Result<(), CliError> {
    let results = run_checks(args.trials, args.seed)?;
    for r in &results {
        out(w, format_args!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail))?;
    }
    if results.iter().all(|r| r.passed) {
        Ok(())
    } else {
        Err(CliError::Failed("construction checks failed".into()))
    }
}
