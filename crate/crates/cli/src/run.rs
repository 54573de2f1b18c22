//! Runs an experiment and writes its artifacts.
//!
//! Layout of the output directory:
//! `train.csv`, `test.csv`, `w_true.csv` (generated data only), `curve.csv`
//! (when the grid is computed), `trajectory.csv` (single-run modes) or
//! `<run>/trajectory.csv` (sweeps), `summary.json` and `timing.json`.
//! Everything except `timing.json` depends only on the config.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use hypergrad_core::hypergrad::{hsgd_run_problem, ohsgd_run_problem};
use hypergrad_core::solver::pgd_solve;
use hypergrad_core::validation::{grid_search_problem, log_grid, test_error, ErrorCurve};
use hypergrad_core::{
    generate_synthetic, load_csv, Dataset, Error as CoreError, HyperConfig, HyperTrajectory,
    Problem,
};
use serde::Serialize;
use thiserror::Error;

use crate::config::{ConfigError, ExperimentConfig, Mode};

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Write { path: PathBuf, message: String },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl RunError {
    /// 2 for configuration problems, 3 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GridSummary {
    pub points: usize,
    pub argmin_lambda: f64,
    pub argmin_loo_error: f64,
    pub argmin_test_error: Option<f64>,
    pub any_unconverged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub name: String,
    pub method: &'static str,
    pub beta: f64,
    pub inner_tol: f64,
    pub lambda_init: f64,
    pub lambda_star: f64,
    pub test_error_at_lambda_star: Option<f64>,
    pub converged: bool,
    pub steps: usize,
    pub total_inner_iters: u64,
    pub lstsq_fallbacks: usize,
    pub unconverged_solves: usize,
    /// Relative to the output directory.
    pub trajectory: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub mode: Mode,
    /// Seed of the generated data; absent when data came from files.
    pub seed: Option<u64>,
    pub n_train: usize,
    pub dim: usize,
    pub lambda_max: f64,
    pub alpha: f64,
    pub grid: Option<GridSummary>,
    pub runs: Vec<RunRecord>,
    pub total_inner_iters: u64,
    pub config: ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
struct RunTiming {
    name: String,
    seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Timing {
    total_seconds: f64,
    grid_seconds: Option<f64>,
    runs: Vec<RunTiming>,
}

#[derive(Serialize)]
struct TrajectoryRow {
    k: usize,
    /// -1 for batch steps, which use every validation sample.
    fold_j: i64,
    lambda: f64,
    lambda_trailing_avg: f64,
    hypergrad: f64,
    cum_inner_iters: u64,
    unconverged_folds: usize,
    lstsq_fallbacks: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Write {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn write_trajectory(path: &Path, traj: &HyperTrajectory) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    for r in &traj.records {
        w.serialize(TrajectoryRow {
            k: r.k,
            fold_j: r.fold_j.map_or(-1, |j| j as i64),
            lambda: r.lambda,
            lambda_trailing_avg: r.lambda_trailing_avg,
            hypergrad: r.hypergrad,
            cum_inner_iters: r.cum_inner_iters,
            unconverged_folds: r.unconverged_folds,
            lstsq_fallbacks: r.lstsq_fallbacks,
        })
        .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_vector(path: &Path, header: &str, values: &[f64]) -> Result<(), RunError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| write_err(path, e))?;
    w.write_record([header]).map_err(|e| write_err(path, e))?;
    for v in values {
        w.write_record([v.to_string()])
            .map_err(|e| write_err(path, e))?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| write_err(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

struct Loaded {
    train: Dataset,
    test: Option<Dataset>,
    seed: Option<u64>,
}

fn load_data(cfg: &ExperimentConfig, out: &Path) -> Result<Loaded, RunError> {
    if let Some(files) = &cfg.data {
        let train = load_csv(&files.train, files.has_header)?;
        let test = match &files.test {
            Some(p) => Some(load_csv(p, files.has_header)?),
            None => None,
        };
        return Ok(Loaded {
            train,
            test,
            seed: None,
        });
    }
    let data = generate_synthetic(&cfg.synthetic)?;
    data.train.save_csv(out.join("train.csv"))?;
    data.test.save_csv(out.join("test.csv"))?;
    write_vector(&out.join("w_true.csv"), "w_true", data.w_true.as_slice())?;
    Ok(Loaded {
        train: data.train,
        test: Some(data.test),
        seed: Some(cfg.synthetic.seed),
    })
}

struct Planned {
    name: String,
    online: bool,
    hyper: HyperConfig,
}

fn plan(cfg: &ExperimentConfig) -> Vec<Planned> {
    let batch = |name: String, beta: f64| Planned {
        name,
        online: false,
        hyper: HyperConfig { beta, ..cfg.hyper },
    };
    let online = |name: String, beta: f64, tol: f64| {
        let mut hyper = HyperConfig {
            beta,
            ..cfg.online_hyper()
        };
        hyper.inner.tol = tol;
        Planned {
            name,
            online: true,
            hyper,
        }
    };
    let tol = cfg.hyper.inner.tol;
    match cfg.mode {
        Mode::Hsgd => vec![batch(String::new(), cfg.hyper.beta)],
        Mode::Ohsgd => vec![online(String::new(), cfg.hyper.beta, tol)],
        Mode::Grid => Vec::new(),
        Mode::Exp1 => cfg
            .betas
            .iter()
            .flat_map(|&b| {
                [
                    batch(format!("hsgd_beta_{b:e}"), b),
                    online(format!("ohsgd_beta_{b:e}"), b, tol),
                ]
            })
            .collect(),
        Mode::Exp2 => cfg
            .betas
            .iter()
            .flat_map(|&b| cfg.tols.iter().map(move |&t| (b, t)).collect::<Vec<_>>())
            .map(|(b, t)| online(format!("ohsgd_beta_{b:e}_tol_{t:e}"), b, t))
            .collect(),
    }
}

/// Runs `cfg` with rayon's current pool and writes artifacts to
/// `cfg.output_dir`. The config is validated first.
pub fn run(cfg: &ExperimentConfig) -> Result<Summary, RunError> {
    cfg.validate()?;
    let started = Instant::now();
    let out = cfg.output_dir.as_path();
    fs::create_dir_all(out).map_err(io_err(out))?;

    let data = load_data(cfg, out)?;
    let reg = cfg.regularizer.build(data.train.dim())?;
    if data
        .test
        .as_ref()
        .is_some_and(|t| t.dim() != data.train.dim())
    {
        return Err(ConfigError::Field {
            field: "data.test".into(),
            message: "test and train data differ in dimension".into(),
        }
        .into());
    }
    let problem = Problem::new(&data.train, &reg, &cfg.scheme)?;
    let lambda_max = problem.lambda_max();

    let mut grid = None;
    let mut grid_seconds = None;
    if cfg.mode == Mode::Grid || cfg.mode == Mode::Exp2 || cfg.grid.enabled {
        let t = Instant::now();
        let lambdas = log_grid(cfg.grid.min_ratio * lambda_max, lambda_max, cfg.grid.points);
        let curve: ErrorCurve =
            grid_search_problem(&problem, &lambdas, &cfg.hyper.inner, data.test.as_ref())?;
        let path = out.join("curve.csv");
        curve.write_csv(&path)?;
        let best = curve.argmin();
        grid = Some(GridSummary {
            points: curve.points.len(),
            argmin_lambda: best.lambda,
            argmin_loo_error: best.validation_error,
            argmin_test_error: best.test_error,
            any_unconverged: curve.any_unconverged,
        });
        grid_seconds = Some(t.elapsed().as_secs_f64());
    }

    let pgd_cfg = problem.pgd_config(&cfg.hyper.inner);
    let mut runs = Vec::new();
    let mut run_seconds = Vec::new();
    for p in plan(cfg) {
        let t = Instant::now();
        let traj = if p.online {
            ohsgd_run_problem(&problem, &p.hyper)?
        } else {
            hsgd_run_problem(&problem, &p.hyper)?
        };
        let rel = if p.name.is_empty() {
            PathBuf::from("trajectory.csv")
        } else {
            let dir = out.join(&p.name);
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
            Path::new(&p.name).join("trajectory.csv")
        };
        write_trajectory(&out.join(&rel), &traj)?;
        let test_error_at_lambda_star = match &data.test {
            Some(test) => {
                let fit = pgd_solve(&problem.stats, &reg, traj.lambda_star, &pgd_cfg, None)?;
                Some(test_error(test, &fit.w)?)
            }
            None => None,
        };
        let method = if p.online { "ohsgd" } else { "hsgd" };
        let name = if p.name.is_empty() {
            method.to_owned()
        } else {
            p.name
        };
        run_seconds.push(RunTiming {
            name: name.clone(),
            seconds: t.elapsed().as_secs_f64(),
        });
        runs.push(RunRecord {
            name,
            method,
            beta: p.hyper.beta,
            inner_tol: p.hyper.inner.tol,
            lambda_init: traj.lambda_init,
            lambda_star: traj.lambda_star,
            test_error_at_lambda_star,
            converged: traj.converged,
            steps: traj.records.len(),
            total_inner_iters: traj.total_inner_iters(),
            lstsq_fallbacks: traj.records.iter().map(|r| r.lstsq_fallbacks).sum(),
            unconverged_solves: traj.records.iter().map(|r| r.unconverged_folds).sum(),
            trajectory: rel.to_string_lossy().replace('\\', "/"),
        });
    }

    let summary = Summary {
        mode: cfg.mode,
        seed: data.seed,
        n_train: data.train.n_samples(),
        dim: data.train.dim(),
        lambda_max,
        alpha: problem.alpha,
        grid,
        total_inner_iters: runs.iter().map(|r| r.total_inner_iters).sum(),
        runs,
        config: cfg.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    write_json(
        &out.join("timing.json"),
        &Timing {
            total_seconds: started.elapsed().as_secs_f64(),
            grid_seconds,
            runs: run_seconds,
        },
    )?;
    Ok(summary)
}

/// [`run`] inside a dedicated pool of `threads` workers; `None` uses the
/// global pool. Results do not depend on the thread count.
pub fn run_with_threads(
    cfg: &ExperimentConfig,
    threads: Option<usize>,
) -> Result<Summary, RunError> {
    match threads {
        None => run(cfg),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| RunError::ThreadPool(e.to_string()))?
            .install(|| run(cfg)),
    }
}
