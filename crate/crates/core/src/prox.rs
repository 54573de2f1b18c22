//! Penalties, their proximity operators and the sub-Jacobians of those
//! operators with respect to the input point and to the penalty weight.

use nalgebra::DVector;

use crate::data::check_dim;
use crate::error::{Error, Result};

/// A partition of `0..dim` into nonempty, disjoint groups.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupStructure {
    groups: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl GroupStructure {
    /// Explicit 0-based index lists. They must partition `0..dim`.
    pub fn from_indices(dim: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut group_of = vec![usize::MAX; dim];
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidGroups(format!("group {g} is empty")));
            }
            for &n in members {
                if n >= dim {
                    return Err(Error::InvalidGroups(format!(
                        "index {n} in group {g} is out of range for dimension {dim}"
                    )));
                }
                if group_of[n] != usize::MAX {
                    return Err(Error::InvalidGroups(format!(
                        "index {n} appears in groups {} and {g}",
                        group_of[n]
                    )));
                }
                group_of[n] = g;
            }
        }
        if let Some(n) = group_of.iter().position(|&g| g == usize::MAX) {
            return Err(Error::InvalidGroups(format!(
                "index {n} is not covered by any group"
            )));
        }
        Ok(Self { groups, group_of })
    }

    /// Contiguous groups with the given sizes, in order.
    pub fn from_sizes(sizes: &[usize]) -> Result<Self> {
        let dim = sizes.iter().sum();
        let mut start = 0;
        let groups = sizes
            .iter()
            .map(|&s| {
                let g: Vec<usize> = (start..start + s).collect();
                start += s;
                g
            })
            .collect();
        Self::from_indices(dim, groups)
    }

    /// Contiguous groups of equal size.
    pub fn uniform(dim: usize, size: usize) -> Result<Self> {
        if size == 0 || !dim.is_multiple_of(size) {
            return Err(Error::InvalidGroups(format!(
                "group size {size} does not divide dimension {dim}"
            )));
        }
        Self::from_sizes(&vec![size; dim / size])
    }

    pub fn dim(&self) -> usize {
        self.group_of.len()
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    pub fn group_of(&self, n: usize) -> usize {
        self.group_of[n]
    }

    /// `‖w_K‖₂` for every group, in group order.
    pub fn norms(&self, w: &DVector<f64>) -> Vec<f64> {
        self.groups
            .iter()
            .map(|g| g.iter().map(|&n| w[n] * w[n]).sum::<f64>().sqrt())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Regularizer {
    /// `Ω(w) = ‖w‖₁`.
    Lasso,
    /// `Ω(w) = Σ_g ‖w_{K_g}‖₂`.
    GroupLasso(GroupStructure),
}

impl Regularizer {
    fn check(&self, len: usize) -> Result<()> {
        match self {
            Regularizer::Lasso => Ok(()),
            Regularizer::GroupLasso(groups) => check_dim(groups.dim(), len),
        }
    }

    /// The smallest penalty weight for which the zero vector minimizes
    /// `½wᵀΦw − rᵀw + λΩ(w)`: the dual norm of `r`.
    pub fn lambda_max(&self, r: &DVector<f64>) -> f64 {
        match self {
            Regularizer::Lasso => r.amax(),
            Regularizer::GroupLasso(groups) => groups.norms(r).into_iter().fold(0.0, f64::max),
        }
    }
}

/// Diagonal sub-Jacobians of the prox output: `a_diag` with respect to the
/// input point, `b` with respect to the penalty weight.
#[derive(Debug, Clone, PartialEq)]
pub struct SubJacobian {
    pub a_diag: DVector<f64>,
    pub b: DVector<f64>,
}

/// `Ω(w)`.
pub fn penalty(reg: &Regularizer, w: &DVector<f64>) -> Result<f64> {
    reg.check(w.len())?;
    Ok(match reg {
        Regularizer::Lasso => w.lp_norm(1),
        Regularizer::GroupLasso(groups) => groups.norms(w).into_iter().sum(),
    })
}

/// Soft-thresholding at level `kappa = αλ`, entrywise for Lasso and groupwise
/// for Group Lasso: `v·[1 − κ/‖v‖]₊`, with a zero block mapping to zero.
pub fn prox(reg: &Regularizer, w_f: &DVector<f64>, kappa: f64) -> Result<DVector<f64>> {
    if !(kappa >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "kappa",
            reason: format!("must be nonnegative, got {kappa}"),
        });
    }
    reg.check(w_f.len())?;
    let mut out = w_f.clone();
    prox_in_place(reg, &mut out, kappa);
    Ok(out)
}

#[inline]
fn shrink_factor(norm: f64, kappa: f64) -> f64 {
    if norm == 0.0 {
        0.0
    } else {
        (1.0 - kappa / norm).max(0.0)
    }
}

/// Unchecked variant used in the solver's inner loop.
pub(crate) fn prox_in_place(reg: &Regularizer, w: &mut DVector<f64>, kappa: f64) {
    match reg {
        Regularizer::Lasso => {
            for v in w.iter_mut() {
                *v *= shrink_factor(v.abs(), kappa);
            }
        }
        Regularizer::GroupLasso(groups) => {
            for g in groups.groups() {
                let norm = g.iter().map(|&n| w[n] * w[n]).sum::<f64>().sqrt();
                let factor = shrink_factor(norm, kappa);
                for &n in g {
                    w[n] *= factor;
                }
            }
        }
    }
}

/// Sub-Jacobians of the prox at `w_f` with step `alpha` and weight `lambda`.
///
/// Lasso: `a = 1{|w_f| ≥ αλ}`, `b = α(1{w_f ≤ −αλ} − 1{w_f ≥ αλ})`.
/// Group Lasso: `a = 1{‖w_f,K‖ ≥ αλ}` and `b = −α·w_f/‖w_f,K‖` on those
/// groups, zero elsewhere. The indicators are non-strict, so a point exactly
/// on the threshold counts as active. A zero group has `b = 0`.
pub fn subderivatives(
    reg: &Regularizer,
    w_f: &DVector<f64>,
    alpha: f64,
    lambda: f64,
) -> Result<SubJacobian> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument {
            name: "alpha",
            reason: format!("must be positive, got {alpha}"),
        });
    }
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "lambda",
            reason: format!("must be nonnegative, got {lambda}"),
        });
    }
    reg.check(w_f.len())?;
    let p = w_f.len();
    let kappa = alpha * lambda;
    let mut a_diag = DVector::zeros(p);
    let mut b = DVector::zeros(p);
    match reg {
        Regularizer::Lasso => {
            for n in 0..p {
                let v = w_f[n];
                let pos = v >= kappa;
                let neg = v <= -kappa;
                a_diag[n] = if v.abs() >= kappa { 1.0 } else { 0.0 };
                b[n] = alpha * (f64::from(u8::from(neg)) - f64::from(u8::from(pos)));
            }
        }
        Regularizer::GroupLasso(groups) => {
            for (g, norm) in groups.groups().iter().zip(groups.norms(w_f)) {
                if norm >= kappa {
                    for &n in g {
                        a_diag[n] = 1.0;
                        if norm > 0.0 {
                            b[n] = -alpha * w_f[n] / norm;
                        }
                    }
                }
            }
        }
    }
    Ok(SubJacobian { a_diag, b })
}
