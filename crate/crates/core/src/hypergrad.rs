//! Hyper-subgradients of the validation error with respect to the penalty
//! weight, and the batch (HSGD) and online (OHSGD) descent methods built on
//! them.
//!
//! At a fixed point `w* = prox(F(w*), αλ)` the sensitivity `z = dw*/dλ`
//! solves `(I − Ã(I − αΦ_j)) z = B̃`, where `Ã`, `B̃` are sub-Jacobians of the
//! prox at `w_f* = F(w*)`. The hyper-subgradient contribution of validation
//! sample `j` is `zᵀ x_j(x_jᵀw* − y_j)`.
//!
//! Scaling convention: [`BatchHypergradient::value`] is the *mean* of the
//! per-sample contributions. Because `x_j(x_jᵀw − y_j)` is half the gradient
//! of the squared error, this mean equals one half of the derivative of the
//! mean squared validation error, i.e. `value ≈ fd_hypergradient / 2`.

use nalgebra::{DMatrix, DVector, FullPivLU, SVD};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_dim, Dataset, SufficientStats};
use crate::error::{Error, Result};
use crate::prox::{subderivatives, Regularizer, SubJacobian};
use crate::solver::{InnerConfig, PgdResult};
use crate::validation::{Problem, ValidationScheme};

/// How the sensitivity system is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZMode {
    /// Dense LU; a singular system falls back to `LeastSquares`.
    #[default]
    LinearSolve,
    /// Minimum-norm least-squares solution.
    LeastSquares,
    /// The forward-mode recursion `z ← Ã(I − αΦ_j)z + B̃`.
    Iterative,
}

const ITERATIVE_TOL: f64 = 1e-10;
const SINGULAR_RCOND: f64 = 1e-12;

/// Sensitivity `z` together with whether the least-squares fallback was used.
#[derive(Debug, Clone, PartialEq)]
pub struct ZSolution {
    pub z: DVector<f64>,
    pub fell_back: bool,
}

fn sensitivity_matrix(stats_j: &SufficientStats, sub: &SubJacobian, alpha: f64) -> DMatrix<f64> {
    let p = stats_j.dim();
    // I − diag(a)(I − αΦ) = I − diag(a) + α·diag(a)·Φ
    DMatrix::from_fn(p, p, |i, k| {
        let a = sub.a_diag[i];
        let id = if i == k { 1.0 - a } else { 0.0 };
        id + alpha * a * stats_j.phi[(i, k)]
    })
}

/// Solves `(I − Ã(I − αΦ_j)) z = B̃` in the requested mode.
///
/// `LinearSolve` returns [`Error::SingularSystem`] when the system is
/// numerically singular; see [`z_tilde_with_fallback`].
pub fn z_tilde(
    stats_j: &SufficientStats,
    sub: &SubJacobian,
    alpha: f64,
    mode: ZMode,
) -> Result<DVector<f64>> {
    let p = stats_j.dim();
    check_dim(p, sub.a_diag.len())?;
    check_dim(p, sub.b.len())?;
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument {
            name: "alpha",
            reason: format!("must be positive, got {alpha}"),
        });
    }
    match mode {
        ZMode::LinearSolve => {
            // Rows with a = 0 are identity rows, so z_I = b_I; the active rows
            // reduce to αΦ_AA z_A = b_A − αΦ_AI b_I.
            let active: Vec<usize> = (0..p).filter(|&i| sub.a_diag[i] != 0.0).collect();
            let inactive: Vec<usize> = (0..p).filter(|&i| sub.a_diag[i] == 0.0).collect();
            let mut z = sub.b.clone();
            if active.is_empty() {
                return Ok(z);
            }
            let m = stats_j
                .phi
                .select_rows(active.iter())
                .select_columns(active.iter())
                * alpha;
            let mut rhs = DVector::from_iterator(active.len(), active.iter().map(|&i| sub.b[i]));
            for (row, &i) in active.iter().enumerate() {
                rhs[row] -= alpha
                    * inactive
                        .iter()
                        .map(|&k| stats_j.phi[(i, k)] * sub.b[k])
                        .sum::<f64>();
            }
            let lu = FullPivLU::new(m);
            let diag = lu.u().diagonal();
            let big = diag.amax();
            if big == 0.0 || diag.amin() <= SINGULAR_RCOND * big {
                return Err(Error::SingularSystem);
            }
            let z_a = lu.solve(&rhs).ok_or(Error::SingularSystem)?;
            for (row, &i) in active.iter().enumerate() {
                z[i] = z_a[row];
            }
            Ok(z)
        }
        ZMode::LeastSquares => {
            let svd = SVD::new(sensitivity_matrix(stats_j, sub, alpha), true, true);
            let eps = svd.singular_values.max() * p as f64 * f64::EPSILON;
            svd.solve(&sub.b, eps).map_err(|_| Error::SingularSystem)
        }
        ZMode::Iterative => {
            let mut z = DVector::zeros(p);
            let mut next = DVector::zeros(p);
            for _ in 0..10 * p {
                // (I − αΦ)z
                next.copy_from(&z);
                next.gemv(-alpha, &stats_j.phi, &z, 1.0);
                next.component_mul_assign(&sub.a_diag);
                next += &sub.b;
                let change = (&next - &z).amax();
                std::mem::swap(&mut z, &mut next);
                if change <= ITERATIVE_TOL {
                    break;
                }
            }
            Ok(z)
        }
    }
}

/// [`z_tilde`] that retries a singular `LinearSolve` in least-squares mode.
pub fn z_tilde_with_fallback(
    stats_j: &SufficientStats,
    sub: &SubJacobian,
    alpha: f64,
    mode: ZMode,
) -> Result<ZSolution> {
    match z_tilde(stats_j, sub, alpha, mode) {
        Ok(z) => Ok(ZSolution {
            z,
            fell_back: false,
        }),
        Err(Error::SingularSystem) if mode == ZMode::LinearSolve => Ok(ZSolution {
            z: z_tilde(stats_j, sub, alpha, ZMode::LeastSquares)?,
            fell_back: true,
        }),
        Err(e) => Err(e),
    }
}

/// `x_j(x_jᵀw − y_j)`.
pub fn val_gradient(x_j: &DVector<f64>, y_j: f64, w: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim(x_j.len(), w.len())?;
    Ok(x_j * (x_j.dot(w) - y_j))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperConfig {
    /// Constant outer step size.
    pub beta: f64,
    /// Starting penalty weight; `None` means `0.1·λ_max`.
    pub lambda_init: Option<f64>,
    /// Cap on outer iterations (single-sample steps for the online method).
    pub max_outer: usize,
    /// Batch: stop once the projected step `|λ⁺ − λ|/β` is at most this.
    /// Online: stop once the trailing average moves at most this over a sweep.
    pub outer_tol: f64,
    pub inner: InnerConfig,
    pub z_mode: ZMode,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            beta: 6e-5,
            lambda_init: None,
            max_outer: 1000,
            outer_tol: 1e-6,
            inner: InnerConfig::default(),
            z_mode: ZMode::LinearSolve,
        }
    }
}

impl HyperConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument {
                name: "beta",
                reason: format!("must be positive, got {}", self.beta),
            });
        }
        if let Some(l) = self.lambda_init {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::InvalidArgument {
                    name: "lambda_init",
                    reason: format!("must be nonnegative, got {l}"),
                });
            }
        }
        if self.max_outer == 0 {
            return Err(Error::InvalidArgument {
                name: "max_outer",
                reason: "must be at least 1".into(),
            });
        }
        if !(self.outer_tol >= 0.0) {
            return Err(Error::InvalidArgument {
                name: "outer_tol",
                reason: format!("must be nonnegative, got {}", self.outer_tol),
            });
        }
        self.inner.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperRecord {
    /// 1-based outer iteration.
    pub k: usize,
    /// Validation sample used (online method only).
    pub fold_j: Option<usize>,
    /// λ produced by this step.
    pub lambda: f64,
    /// Mean of λ over the trailing window (one sweep for the online method,
    /// the current value for the batch method).
    pub lambda_trailing_avg: f64,
    /// Hyper-subgradient at the λ this step started from.
    pub hypergrad: f64,
    pub cum_inner_iters: u64,
    /// Validation error at the λ this step started from (batch method only).
    pub loo_error: Option<f64>,
    pub unconverged_folds: usize,
    pub lstsq_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HyperTrajectory {
    pub records: Vec<HyperRecord>,
    pub lambda_init: f64,
    /// Final λ (batch) or trailing average of the last sweep (online).
    pub lambda_star: f64,
    pub converged: bool,
}

impl HyperTrajectory {
    pub fn total_inner_iters(&self) -> u64 {
        self.records.last().map_or(0, |r| r.cum_inner_iters)
    }
}

/// Solution of one fold plus the hyper-subgradient contributions of its
/// validation samples.
#[derive(Debug, Clone)]
pub struct FoldEval {
    pub pgd: PgdResult,
    pub z: DVector<f64>,
    pub fell_back: bool,
    /// `zᵀ x_j(x_jᵀw − y_j)` per validation sample, in fold order.
    pub contributions: Vec<f64>,
    pub squared_errors: Vec<f64>,
}

impl Problem<'_> {
    /// Solves fold `fold` at `lambda` and differentiates the solution.
    pub fn eval_fold(
        &self,
        fold: usize,
        lambda: f64,
        inner: &InnerConfig,
        mode: ZMode,
        warm: Option<&DVector<f64>>,
    ) -> Result<FoldEval> {
        let pgd = self.solve_fold(fold, lambda, inner, warm)?;
        let train = &self.folds.folds[fold].train;
        let sub = subderivatives(self.reg, &pgd.w_f, self.alpha, lambda)?;
        let ZSolution { z, fell_back } = z_tilde_with_fallback(train, &sub, self.alpha, mode)?;
        let mut contributions = Vec::new();
        let mut squared_errors = Vec::new();
        for &j in &self.folds.folds[fold].validation {
            let x = self.data.input(j);
            let resid = x.dot(&pgd.w) - self.data.label(j);
            contributions.push(z.dot(&x) * resid);
            squared_errors.push(resid * resid);
        }
        Ok(FoldEval {
            pgd,
            z,
            fell_back,
            contributions,
            squared_errors,
        })
    }

    /// Mean hyper-subgradient over all validation samples at `lambda`.
    ///
    /// Folds are evaluated in parallel on the current rayon pool; the sum is
    /// reduced in fold order so the result does not depend on thread count.
    pub fn batch_hypergradient(
        &self,
        lambda: f64,
        inner: &InnerConfig,
        mode: ZMode,
        warm: &mut [Option<DVector<f64>>],
    ) -> Result<BatchHypergradient> {
        let evals: Vec<FoldEval> = (0..self.folds.folds.len())
            .into_par_iter()
            .zip(warm.par_iter())
            .map(|(f, w0)| self.eval_fold(f, lambda, inner, mode, w0.as_ref()))
            .collect::<Result<_>>()?;
        let n_val = self.folds.n_validation() as f64;
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut out = BatchHypergradient::default();
        for (f, e) in evals.into_iter().enumerate() {
            for (c, s) in e.contributions.iter().zip(&e.squared_errors) {
                sum += c;
                sq += s;
            }
            out.inner_iters += e.pgd.iters as u64;
            out.unconverged_folds += usize::from(!e.pgd.converged);
            out.lstsq_fallbacks += usize::from(e.fell_back);
            warm[f] = Some(e.pgd.w);
        }
        out.value = sum / n_val;
        out.validation_error = sq / n_val;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchHypergradient {
    pub value: f64,
    pub validation_error: f64,
    pub inner_iters: u64,
    pub unconverged_folds: usize,
    pub lstsq_fallbacks: usize,
}

/// `[λ − β·g]₊`.
fn project_step(lambda: f64, beta: f64, g: f64) -> f64 {
    (lambda - beta * g).max(0.0)
}

/// One batch step from `lambda`: solves every fold (warm-started from and
/// refreshing `warm`), and returns the projected update, the hypergradient
/// and a trajectory record with `k` and `cum_inner_iters` left for the caller.
pub fn hsgd_step(
    problem: &Problem<'_>,
    lambda: f64,
    cfg: &HyperConfig,
    warm: &mut [Option<DVector<f64>>],
) -> Result<(f64, BatchHypergradient, HyperRecord)> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "lambda",
            reason: format!("must be nonnegative, got {lambda}"),
        });
    }
    let g = problem.batch_hypergradient(lambda, &cfg.inner, cfg.z_mode, warm)?;
    let next = project_step(lambda, cfg.beta, g.value);
    let record = HyperRecord {
        k: 0,
        fold_j: None,
        lambda: next,
        lambda_trailing_avg: next,
        hypergrad: g.value,
        cum_inner_iters: g.inner_iters,
        loo_error: Some(g.validation_error),
        unconverged_folds: g.unconverged_folds,
        lstsq_fallbacks: g.lstsq_fallbacks,
    };
    Ok((next, g, record))
}

fn initial_lambda(problem: &Problem<'_>, cfg: &HyperConfig) -> f64 {
    cfg.lambda_init
        .unwrap_or_else(|| 0.1 * problem.lambda_max())
}

/// Batch hyper-subgradient descent.
pub fn hsgd_run(
    dataset: &Dataset,
    reg: &Regularizer,
    scheme: &ValidationScheme,
    cfg: &HyperConfig,
) -> Result<HyperTrajectory> {
    let problem = Problem::new(dataset, reg, scheme)?;
    hsgd_run_problem(&problem, cfg)
}

pub fn hsgd_run_problem(problem: &Problem<'_>, cfg: &HyperConfig) -> Result<HyperTrajectory> {
    cfg.validate()?;
    let lambda_init = initial_lambda(problem, cfg);
    let mut lambda = lambda_init;
    let mut warm = vec![None; problem.folds.folds.len()];
    let mut records = Vec::new();
    let mut cum = 0u64;
    let mut converged = false;
    for k in 1..=cfg.max_outer {
        let (next, _, mut rec) = hsgd_step(problem, lambda, cfg, &mut warm)?;
        cum += rec.cum_inner_iters;
        rec.k = k;
        rec.cum_inner_iters = cum;
        records.push(rec);
        let step = (next - lambda).abs();
        lambda = next;
        if step <= cfg.beta * cfg.outer_tol {
            converged = true;
            break;
        }
    }
    Ok(HyperTrajectory {
        records,
        lambda_init,
        lambda_star: lambda,
        converged,
    })
}

/// Online hyper-subgradient descent: step `k` visits validation sample
/// `(k − 1) mod |V|`, re-solves only its fold (warm-started from that fold's
/// previous solution) and takes a single-sample step on λ.
pub fn ohsgd_run(
    dataset: &Dataset,
    reg: &Regularizer,
    scheme: &ValidationScheme,
    cfg: &HyperConfig,
) -> Result<HyperTrajectory> {
    let problem = Problem::new(dataset, reg, scheme)?;
    ohsgd_run_problem(&problem, cfg)
}

pub fn ohsgd_run_problem(problem: &Problem<'_>, cfg: &HyperConfig) -> Result<HyperTrajectory> {
    cfg.validate()?;
    let order = problem.folds.sample_order();
    let n_val = order.len();
    let lambda_init = initial_lambda(problem, cfg);
    let mut lambda = lambda_init;
    let mut warm: Vec<Option<DVector<f64>>> = vec![None; problem.folds.folds.len()];
    let mut cache: Vec<Option<(f64, FoldEval)>> = vec![None; problem.folds.folds.len()];
    let mut window = std::collections::VecDeque::with_capacity(n_val);
    let mut window_sum = 0.0;
    let mut prev_sweep_avg: Option<f64> = None;
    let mut records = Vec::new();
    let mut cum = 0u64;
    let mut converged = false;

    for k in 1..=cfg.max_outer {
        let pos = (k - 1) % n_val;
        let (fold, sample) = order[pos];
        // A fold already evaluated at this exact λ (several validation
        // samples per fold, or a step that left λ unchanged) is reused.
        let reuse = matches!(&cache[fold], Some((l, _)) if *l == lambda);
        if !reuse {
            let eval =
                problem.eval_fold(fold, lambda, &cfg.inner, cfg.z_mode, warm[fold].as_ref())?;
            cum += eval.pgd.iters as u64;
            warm[fold] = Some(eval.pgd.w.clone());
            cache[fold] = Some((lambda, eval));
        }
        let eval = &cache[fold].as_ref().expect("fold was just evaluated").1;
        let slot = problem.folds.folds[fold]
            .validation
            .iter()
            .position(|&j| j == sample)
            .expect("sample belongs to its fold");
        let g = eval.contributions[slot];
        let next = project_step(lambda, cfg.beta, g);

        if window.len() == n_val {
            window_sum -= window.pop_front().unwrap_or(0.0);
        }
        window.push_back(next);
        window_sum += next;
        // Recompute exactly at sweep boundaries so the reported average does
        // not carry rounding drift from the running sum.
        let avg = if window.len() == n_val && k % n_val == 0 {
            window_sum = window.iter().sum();
            window_sum / n_val as f64
        } else {
            window_sum / window.len() as f64
        };

        records.push(HyperRecord {
            k,
            fold_j: Some(sample),
            lambda: next,
            lambda_trailing_avg: avg,
            hypergrad: g,
            cum_inner_iters: cum,
            loo_error: None,
            unconverged_folds: usize::from(!reuse && !eval.pgd.converged),
            lstsq_fallbacks: usize::from(!reuse && eval.fell_back),
        });
        lambda = next;

        if k % n_val == 0 {
            if let Some(prev) = prev_sweep_avg {
                if (avg - prev).abs() <= cfg.outer_tol {
                    converged = true;
                    break;
                }
            }
            prev_sweep_avg = Some(avg);
        }
    }
    let lambda_star = records
        .last()
        .map_or(lambda_init, |r| r.lambda_trailing_avg);
    Ok(HyperTrajectory {
        records,
        lambda_init,
        lambda_star,
        converged,
    })
}

/// Central difference `(E(λ+δ) − E(λ−δ))/(2δ)` of the mean squared
/// validation error, with cold-started inner solves at tolerance `tol`.
pub fn fd_hypergradient(
    dataset: &Dataset,
    reg: &Regularizer,
    scheme: &ValidationScheme,
    lambda: f64,
    delta: f64,
    tol: f64,
) -> Result<f64> {
    let problem = Problem::new(dataset, reg, scheme)?;
    fd_hypergradient_problem(&problem, lambda, delta, tol)
}

pub fn fd_hypergradient_problem(
    problem: &Problem<'_>,
    lambda: f64,
    delta: f64,
    tol: f64,
) -> Result<f64> {
    if !(delta > 0.0 && lambda - delta >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "delta",
            reason: format!("need 0 < delta <= lambda, got delta = {delta}, lambda = {lambda}"),
        });
    }
    let inner = InnerConfig {
        tol,
        max_iters: 10_000_000,
    };
    let up = problem.validation_error(lambda + delta, &inner)?.error;
    let down = problem.validation_error(lambda - delta, &inner)?.error;
    Ok((up - down) / (2.0 * delta))
}
