//! Proximal gradient descent (forward–backward splitting) for penalized least
//! squares on averaged second moments.
//!
//! The forward operator is `F(w) = w − α(Φw − r)`, the gradient step of
//! `½wᵀΦw − rᵀw`. The iteration `w ← prox(F(w), αλ)` therefore minimizes
//! `½·mse(w) + λΩ(w)`; see [`pgd_objective`].

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{check_dim, SufficientStats};
use crate::error::{Error, Result};
use crate::prox::{penalty, prox_in_place, Regularizer};

pub const DEFAULT_TOL: f64 = 1e-3;
pub const DEFAULT_MAX_ITERS: usize = 50_000;

/// Stopping rule for an inner solve, independent of the step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerConfig {
    /// Threshold on the distance from 0 to the subdifferential.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for InnerConfig {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iters: DEFAULT_MAX_ITERS,
        }
    }
}

impl InnerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument {
                name: "tol",
                reason: format!("must be positive, got {}", self.tol),
            });
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidArgument {
                name: "max_iters",
                reason: "must be at least 1".into(),
            });
        }
        Ok(())
    }

    pub fn with_alpha(self, alpha: f64) -> PgdConfig {
        PgdConfig {
            alpha,
            tol: self.tol,
            max_iters: self.max_iters,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig {
    pub alpha: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidArgument {
                name: "alpha",
                reason: format!("must be positive, got {}", self.alpha),
            });
        }
        InnerConfig {
            tol: self.tol,
            max_iters: self.max_iters,
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PgdResult {
    /// Final iterate; equals `prox(w_f, αλ)` exactly.
    pub w: DVector<f64>,
    /// The forward point the final iterate was obtained from.
    pub w_f: DVector<f64>,
    pub iters: usize,
    pub residual: f64,
    pub converged: bool,
}

/// `w − α(Φw − r)`.
pub fn forward_step(stats: &SufficientStats, w: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    check_dim(stats.dim(), w.len())?;
    let mut out = w.clone();
    out.gemv(-alpha, &stats.phi, w, 1.0);
    out.axpy(alpha, &stats.r, 1.0);
    Ok(out)
}

fn quadratic(stats: &SufficientStats, w: &DVector<f64>) -> f64 {
    w.dot(&(&stats.phi * w)) - 2.0 * stats.r.dot(w)
}

/// Penalized mean squared error `(1/|B|)Σ(yᵢ − xᵢᵀw)² + λΩ(w)`, evaluated from
/// the batch moments as `wᵀΦw − 2rᵀw + label_energy + λΩ(w)`.
///
/// `label_energy` is `(1/|B|)Σyᵢ²` of the same batch.
pub fn objective(
    stats: &SufficientStats,
    reg: &Regularizer,
    lambda: f64,
    w: &DVector<f64>,
    label_energy: f64,
) -> Result<f64> {
    check_dim(stats.dim(), w.len())?;
    Ok(quadratic(stats, w) + label_energy + lambda * penalty(reg, w)?)
}

/// `½·mse(w) + λΩ(w)`: the function whose minimizer is the fixed point of
/// [`pgd_solve`] and whose subdifferential [`subgradient_residual`] measures.
pub fn pgd_objective(
    stats: &SufficientStats,
    reg: &Regularizer,
    lambda: f64,
    w: &DVector<f64>,
    label_energy: f64,
) -> Result<f64> {
    check_dim(stats.dim(), w.len())?;
    Ok(0.5 * (quadratic(stats, w) + label_energy) + lambda * penalty(reg, w)?)
}

/// Distance from 0 to the subdifferential of `½wᵀΦw − rᵀw + λΩ(w)` at `w`.
pub fn subgradient_residual(
    stats: &SufficientStats,
    reg: &Regularizer,
    lambda: f64,
    w: &DVector<f64>,
) -> Result<f64> {
    check_dim(stats.dim(), w.len())?;
    if let Regularizer::GroupLasso(groups) = reg {
        check_dim(groups.dim(), w.len())?;
    }
    let mut g = stats.r.clone();
    g.gemv(1.0, &stats.phi, w, -1.0);
    Ok(residual_from_gradient(reg, lambda, w, &g))
}

fn residual_from_gradient(
    reg: &Regularizer,
    lambda: f64,
    w: &DVector<f64>,
    g: &DVector<f64>,
) -> f64 {
    let mut sq = 0.0;
    match reg {
        Regularizer::Lasso => {
            for (&wn, &gn) in w.iter().zip(g.iter()) {
                let c = if wn != 0.0 {
                    gn + lambda * wn.signum()
                } else {
                    (gn.abs() - lambda).max(0.0)
                };
                sq += c * c;
            }
        }
        Regularizer::GroupLasso(groups) => {
            for grp in groups.groups() {
                let wnorm = grp.iter().map(|&n| w[n] * w[n]).sum::<f64>().sqrt();
                if wnorm != 0.0 {
                    sq += grp
                        .iter()
                        .map(|&n| {
                            let c = g[n] + lambda * w[n] / wnorm;
                            c * c
                        })
                        .sum::<f64>();
                } else {
                    let gnorm = grp.iter().map(|&n| g[n] * g[n]).sum::<f64>().sqrt();
                    let c = (gnorm - lambda).max(0.0);
                    sq += c * c;
                }
            }
        }
    }
    sq.sqrt()
}

/// Runs `w ← prox(F(w), αλ)` from `warm_start` (or zero) until the
/// subgradient residual drops to `cfg.tol` or `cfg.max_iters` is reached.
///
/// At least one iteration is always taken, so the returned `(w, w_f)` pair is
/// consistent. Running out of iterations is not an error; check `converged`.
pub fn pgd_solve(
    stats: &SufficientStats,
    reg: &Regularizer,
    lambda: f64,
    cfg: &PgdConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<PgdResult> {
    cfg.validate()?;
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "lambda",
            reason: format!("must be nonnegative, got {lambda}"),
        });
    }
    let p = stats.dim();
    if let Regularizer::GroupLasso(groups) = reg {
        check_dim(p, groups.dim())?;
    }
    let mut w = match warm_start {
        Some(w0) => {
            check_dim(p, w0.len())?;
            w0.clone()
        }
        None => DVector::zeros(p),
    };
    let kappa = cfg.alpha * lambda;

    // g = Φw − r, shared by the residual check and the next forward step.
    let mut g = stats.r.clone();
    g.gemv(1.0, &stats.phi, &w, -1.0);
    let mut w_f = DVector::zeros(p);
    let mut iters = 0;
    loop {
        w_f.copy_from(&w);
        w_f.axpy(-cfg.alpha, &g, 1.0);
        w.copy_from(&w_f);
        prox_in_place(reg, &mut w, kappa);
        iters += 1;

        g.copy_from(&stats.r);
        g.gemv(1.0, &stats.phi, &w, -1.0);
        let residual = residual_from_gradient(reg, lambda, &w, &g);
        let converged = residual <= cfg.tol;
        if converged || iters >= cfg.max_iters {
            return Ok(PgdResult {
                w,
                w_f,
                iters,
                residual,
                converged,
            });
        }
    }
}
