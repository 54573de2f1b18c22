//! Validation schemes, validation/test error and the grid-search baseline.

use std::io::Write;
use std::path::Path;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    check_dim, compute_stats, loo_downdate, spectral_radius, Dataset, SufficientStats, SPECTRAL_TOL,
};
use crate::error::{Error, Result};
use crate::prox::Regularizer;
use crate::solver::{pgd_solve, InnerConfig, PgdConfig, PgdResult};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ValidationScheme {
    /// The last `round(fraction·N)` samples validate, the rest train.
    HeldOut { fraction: f64 },
    /// Seeded random partition into `n_folds` near-equal folds.
    KFold { n_folds: usize, seed: u64 },
    #[default]
    Loo,
}

impl ValidationScheme {
    pub fn validate(&self, n_samples: usize) -> Result<()> {
        match *self {
            ValidationScheme::HeldOut { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                Err(Error::InvalidArgument {
                    name: "fraction",
                    reason: format!("must lie in (0, 1), got {fraction}"),
                })
            }
            ValidationScheme::KFold { n_folds, .. } if n_folds < 2 || n_folds > n_samples => {
                Err(Error::InvalidArgument {
                    name: "n_folds",
                    reason: format!("need 2 <= n_folds <= N = {n_samples}, got {n_folds}"),
                })
            }
            _ if n_samples < 2 => Err(Error::TooFewSamples {
                needed: 2,
                have: n_samples,
            }),
            _ => Ok(()),
        }
    }
}

/// One training batch together with the samples it is validated on.
#[derive(Debug, Clone, PartialEq)]
pub struct Fold {
    pub validation: Vec<usize>,
    pub train: SufficientStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSet {
    pub folds: Vec<Fold>,
}

impl FoldSet {
    /// `(fold, sample)` for every validation sample, fold by fold. This is
    /// the visiting order of the online method.
    pub fn sample_order(&self) -> Vec<(usize, usize)> {
        self.folds
            .iter()
            .enumerate()
            .flat_map(|(f, fold)| fold.validation.iter().map(move |&j| (f, j)))
            .collect()
    }

    pub fn n_validation(&self) -> usize {
        self.folds.iter().map(|f| f.validation.len()).sum()
    }
}

/// Splits `dataset` according to `scheme`. Leave-one-out batches are rank-one
/// downdates of `global_stats`; other schemes aggregate their training rows
/// directly.
pub fn make_folds(
    scheme: &ValidationScheme,
    dataset: &Dataset,
    global_stats: &SufficientStats,
) -> Result<FoldSet> {
    let n = dataset.n_samples();
    scheme.validate(n)?;
    check_dim(dataset.dim(), global_stats.dim())?;
    let complement = |validation: &[usize]| -> Vec<usize> {
        let mut keep = vec![true; n];
        for &j in validation {
            keep[j] = false;
        }
        (0..n).filter(|&i| keep[i]).collect()
    };
    let folds = match *scheme {
        ValidationScheme::Loo => (0..n)
            .map(|j| {
                Ok(Fold {
                    validation: vec![j],
                    train: loo_downdate(global_stats, &dataset.input(j), dataset.label(j))?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
        ValidationScheme::HeldOut { fraction } => {
            let n_val = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            let validation: Vec<usize> = ((n - n_val)..n).collect();
            let train = compute_stats(&dataset.subset(&complement(&validation))?);
            vec![Fold { validation, train }]
        }
        ValidationScheme::KFold { n_folds, seed } => {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let base = n / n_folds;
            let extra = n % n_folds;
            let mut start = 0;
            (0..n_folds)
                .map(|f| {
                    let len = base + usize::from(f < extra);
                    let mut validation = perm[start..start + len].to_vec();
                    start += len;
                    validation.sort_unstable();
                    let train = compute_stats(&dataset.subset(&complement(&validation))?);
                    Ok(Fold { validation, train })
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    Ok(FoldSet { folds })
}

/// A dataset, penalty and validation split with the shared PGD step size
/// `α = 1/ρ(Φ)` of the full train-and-validate set.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub data: &'a Dataset,
    pub reg: &'a Regularizer,
    pub stats: SufficientStats,
    pub folds: FoldSet,
    pub alpha: f64,
}

impl<'a> Problem<'a> {
    pub fn new(data: &'a Dataset, reg: &'a Regularizer, scheme: &ValidationScheme) -> Result<Self> {
        if let Regularizer::GroupLasso(groups) = reg {
            check_dim(data.dim(), groups.dim())?;
        }
        let stats = compute_stats(data);
        let folds = make_folds(scheme, data, &stats)?;
        let alpha = 1.0 / spectral_radius(&stats.phi, SPECTRAL_TOL)?;
        Ok(Self {
            data,
            reg,
            stats,
            folds,
            alpha,
        })
    }

    /// Penalty weight above which the full-batch solution is zero.
    pub fn lambda_max(&self) -> f64 {
        self.reg.lambda_max(&self.stats.r)
    }

    pub fn pgd_config(&self, inner: &InnerConfig) -> PgdConfig {
        inner.with_alpha(self.alpha)
    }

    pub fn solve_fold(
        &self,
        fold: usize,
        lambda: f64,
        inner: &InnerConfig,
        warm: Option<&DVector<f64>>,
    ) -> Result<PgdResult> {
        pgd_solve(
            &self.folds.folds[fold].train,
            self.reg,
            lambda,
            &self.pgd_config(inner),
            warm,
        )
    }

    /// Squared validation errors of one fold's solution, in the fold's sample order.
    pub fn fold_squared_errors(&self, fold: usize, w: &DVector<f64>) -> Vec<f64> {
        self.folds.folds[fold]
            .validation
            .iter()
            .map(|&j| (self.data.label(j) - self.data.input(j).dot(w)).powi(2))
            .collect()
    }

    /// Validation error at `lambda`, optionally warm-starting and refreshing
    /// one solution per fold.
    pub fn validation_error_warm(
        &self,
        lambda: f64,
        inner: &InnerConfig,
        warm: &mut [Option<DVector<f64>>],
    ) -> Result<ValidationEval> {
        let results: Vec<PgdResult> = (0..self.folds.folds.len())
            .into_par_iter()
            .zip(warm.par_iter())
            .map(|(f, w0)| self.solve_fold(f, lambda, inner, w0.as_ref()))
            .collect::<Result<_>>()?;
        let mut total = 0.0;
        let mut unconverged = 0;
        let mut iters = 0;
        for (f, res) in results.into_iter().enumerate() {
            total += self.fold_squared_errors(f, &res.w).iter().sum::<f64>();
            unconverged += usize::from(!res.converged);
            iters += res.iters as u64;
            warm[f] = Some(res.w);
        }
        Ok(ValidationEval {
            error: total / self.folds.n_validation() as f64,
            unconverged,
            inner_iters: iters,
        })
    }

    pub fn validation_error(&self, lambda: f64, inner: &InnerConfig) -> Result<ValidationEval> {
        let mut warm = vec![None; self.folds.folds.len()];
        self.validation_error_warm(lambda, inner, &mut warm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationEval {
    /// `(1/|V|) Σ_j (y_j − x_jᵀ w*(λ, B_j))²`.
    pub error: f64,
    /// Folds whose inner solve hit `max_iters`; their last iterate is used.
    pub unconverged: usize,
    pub inner_iters: u64,
}

/// Mean squared validation error of the penalized solutions at `lambda`.
pub fn validation_error(
    dataset: &Dataset,
    reg: &Regularizer,
    scheme: &ValidationScheme,
    lambda: f64,
    inner: &InnerConfig,
) -> Result<ValidationEval> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument {
            name: "lambda",
            reason: format!("must be nonnegative, got {lambda}"),
        });
    }
    Problem::new(dataset, reg, scheme)?.validation_error(lambda, inner)
}

/// `(1/N) Σ (y − xᵀw)²`.
pub fn test_error(test: &Dataset, w: &DVector<f64>) -> Result<f64> {
    check_dim(test.dim(), w.len())?;
    let resid = test.labels() - test.inputs() * w;
    Ok(resid.norm_squared() / test.n_samples() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurvePoint {
    pub lambda: f64,
    pub validation_error: f64,
    pub test_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorCurve {
    /// Sorted by strictly increasing `lambda`.
    pub points: Vec<CurvePoint>,
    /// True if any inner solve on the curve stopped at `max_iters`.
    pub any_unconverged: bool,
}

impl ErrorCurve {
    /// The grid point with the smallest validation error (first on ties).
    pub fn argmin(&self) -> &CurvePoint {
        self.points.iter().fold(&self.points[0], |best, p| {
            if p.validation_error < best.validation_error {
                p
            } else {
                best
            }
        })
    }

    /// Writes `lambda,loo_error,test_error` rows; `test_error` is left empty
    /// when no test set was given.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let io_err = |source| Error::Io {
            path: path.to_path_buf(),
            source,
        };
        let mut out = String::from("lambda,loo_error,test_error\n");
        for p in &self.points {
            let test = p.test_error.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", p.lambda, p.validation_error, test));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(io_err)
    }
}

/// `n` log-spaced values from `1e-3·lambda_max` to `lambda_max`, increasing.
pub fn default_grid(lambda_max: f64, n: usize) -> Vec<f64> {
    log_grid(1e-3 * lambda_max, lambda_max, n)
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| {
            if i == n - 1 {
                hi
            } else {
                (a + (b - a) * i as f64 / (n - 1) as f64).exp()
            }
        })
        .collect()
}

/// Validation error (and optionally test error of the full-batch solution)
/// along `grid`. Solutions are carried from larger to smaller λ as warm starts.
pub fn grid_search(
    dataset: &Dataset,
    reg: &Regularizer,
    scheme: &ValidationScheme,
    grid: &[f64],
    inner: &InnerConfig,
    test_set: Option<&Dataset>,
) -> Result<ErrorCurve> {
    let problem = Problem::new(dataset, reg, scheme)?;
    grid_search_problem(&problem, grid, inner, test_set)
}

pub fn grid_search_problem(
    problem: &Problem<'_>,
    grid: &[f64],
    inner: &InnerConfig,
    test_set: Option<&Dataset>,
) -> Result<ErrorCurve> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument {
            name: "grid",
            reason: "must be nonempty".into(),
        });
    }
    if grid.iter().any(|l| !(*l >= 0.0)) || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument {
            name: "grid",
            reason: "must be nonnegative and strictly increasing".into(),
        });
    }
    if let Some(t) = test_set {
        check_dim(problem.data.dim(), t.dim())?;
    }
    let cfg = problem.pgd_config(inner);
    let mut warm = vec![None; problem.folds.folds.len()];
    let mut full_warm: Option<DVector<f64>> = None;
    let mut any_unconverged = false;
    let mut points = Vec::with_capacity(grid.len());
    for &lambda in grid.iter().rev() {
        let eval = problem.validation_error_warm(lambda, inner, &mut warm)?;
        any_unconverged |= eval.unconverged > 0;
        let test_error = match test_set {
            Some(t) => {
                let res = pgd_solve(
                    &problem.stats,
                    problem.reg,
                    lambda,
                    &cfg,
                    full_warm.as_ref(),
                )?;
                any_unconverged |= !res.converged;
                let err = test_error(t, &res.w)?;
                full_warm = Some(res.w);
                Some(err)
            }
            None => None,
        };
        points.push(CurvePoint {
            lambda,
            validation_error: eval.error,
            test_error,
        });
    }
    points.reverse();
    Ok(ErrorCurve {
        points,
        any_unconverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn random_dataset(n: usize, p: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
        let w = DVector::from_fn(p, |i, _| if i < 2 { 1.5 } else { 0.0 });
        let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        Dataset::new(x.clone(), &x * w + noise).unwrap()
    }

    fn tight() -> InnerConfig {
        InnerConfig {
            tol: 1e-12,
            max_iters: 1_000_000,
        }
    }

    #[test]
    fn loo_folds() {
        let d = random_dataset(3, 2, 1);
        let s = compute_stats(&d);
        let folds = make_folds(&ValidationScheme::Loo, &d, &s).unwrap();
        assert_eq!(folds.folds.len(), 3);
        for (j, f) in folds.folds.iter().enumerate() {
            assert_eq!(f.validation, vec![j]);
            assert_eq!(f.train.count, 2);
            let rest: Vec<usize> = (0..3).filter(|&i| i != j).collect();
            let direct = compute_stats(&d.subset(&rest).unwrap());
            assert!((&f.train.phi - &direct.phi).amax() <= 1e-12 * direct.phi.amax());
            assert!((&f.train.r - &direct.r).amax() <= 1e-12 * direct.r.amax());
        }
        assert_eq!(folds.sample_order(), vec![(0, 0), (1, 1), (2, 2)]);
    }

    #[test]
    fn kfold_partition() {
        let d = random_dataset(6, 2, 2);
        let s = compute_stats(&d);
        let folds = make_folds(
            &ValidationScheme::KFold {
                n_folds: 3,
                seed: 9,
            },
            &d,
            &s,
        )
        .unwrap();
        assert_eq!(folds.folds.len(), 3);
        let mut seen: Vec<usize> = folds
            .folds
            .iter()
            .flat_map(|f| f.validation.clone())
            .collect();
        assert!(folds
            .folds
            .iter()
            .all(|f| f.validation.len() == 2 && f.train.count == 4));
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<_>>());
        let again = make_folds(
            &ValidationScheme::KFold {
                n_folds: 3,
                seed: 9,
            },
            &d,
            &s,
        )
        .unwrap();
        assert_eq!(folds, again);
        assert!(make_folds(
            &ValidationScheme::KFold {
                n_folds: 7,
                seed: 9
            },
            &d,
            &s
        )
        .is_err());
        assert!(make_folds(
            &ValidationScheme::KFold {
                n_folds: 1,
                seed: 9
            },
            &d,
            &s
        )
        .is_err());
    }

    #[test]
    fn kfold_with_n_folds_is_loo() {
        let d = random_dataset(7, 3, 3);
        let s = compute_stats(&d);
        let loo = make_folds(&ValidationScheme::Loo, &d, &s).unwrap();
        let kf = make_folds(
            &ValidationScheme::KFold {
                n_folds: 7,
                seed: 1,
            },
            &d,
            &s,
        )
        .unwrap();
        let mut kfolds = kf.folds.clone();
        kfolds.sort_by_key(|f| f.validation[0]);
        for (a, b) in loo.folds.iter().zip(&kfolds) {
            assert_eq!(a.validation, b.validation);
            assert_eq!(a.train.count, b.train.count);
            assert!((&a.train.phi - &b.train.phi).amax() <= 1e-12 * b.train.phi.amax());
        }
    }

    #[test]
    fn held_out_split() {
        let d = random_dataset(10, 2, 4);
        let s = compute_stats(&d);
        let folds = make_folds(&ValidationScheme::HeldOut { fraction: 0.3 }, &d, &s).unwrap();
        assert_eq!(folds.folds.len(), 1);
        assert_eq!(folds.folds[0].validation, vec![7, 8, 9]);
        assert_eq!(
            folds.folds[0].train,
            compute_stats(&d.subset(&(0..7).collect::<Vec<_>>()).unwrap())
        );
        assert!(make_folds(&ValidationScheme::HeldOut { fraction: 1.0 }, &d, &s).is_err());
    }

    #[test]
    fn full_shrinkage_error() {
        let d = random_dataset(15, 4, 5);
        let reg = Regularizer::Lasso;
        let problem = Problem::new(&d, &reg, &ValidationScheme::Loo).unwrap();
        let lmax = problem
            .folds
            .folds
            .iter()
            .map(|f| f.train.lambda_max())
            .fold(0.0, f64::max);
        let eval = problem
            .validation_error(lmax, &InnerConfig::default())
            .unwrap();
        assert!((eval.error - d.label_energy()).abs() <= 1e-12 * d.label_energy());
    }

    #[test]
    fn two_point_scalar_loo_closed_form() {
        // N = 2, P = 1: each fold trains on a single sample (x_i, y_i), whose
        // Lasso solution is S(x_i y_i, λ)/x_i² and predicts the other label.
        let x = [1.5, -0.8];
        let y = [2.0, 0.7];
        let d = Dataset::new(
            DMatrix::from_column_slice(2, 1, &x),
            DVector::from_column_slice(&y),
        )
        .unwrap();
        let reg = Regularizer::Lasso;
        for lambda in [0.0, 0.1, 0.3, 0.55, 2.0, 5.0] {
            let soft = |v: f64| v.signum() * (v.abs() - lambda).max(0.0);
            let w0 = soft(x[1] * y[1]) / (x[1] * x[1]);
            let w1 = soft(x[0] * y[0]) / (x[0] * x[0]);
            let expected = 0.5 * ((y[0] - x[0] * w0).powi(2) + (y[1] - x[1] * w1).powi(2));
            let got = validation_error(&d, &reg, &ValidationScheme::Loo, lambda, &tight()).unwrap();
            assert!(
                (got.error - expected).abs() <= 1e-8,
                "λ={lambda}: {} vs {expected}",
                got.error
            );
        }
    }

    #[test]
    fn loo_downdates_match_explicit_refits() {
        let d = random_dataset(25, 6, 6);
        let reg = Regularizer::Lasso;
        let lambda = 0.1;
        let via_downdate =
            validation_error(&d, &reg, &ValidationScheme::Loo, lambda, &tight()).unwrap();
        let problem = Problem::new(&d, &reg, &ValidationScheme::Loo).unwrap();
        let cfg = problem.pgd_config(&tight());
        let mut total = 0.0;
        for j in 0..25 {
            let rest: Vec<usize> = (0..25).filter(|&i| i != j).collect();
            let s = compute_stats(&d.subset(&rest).unwrap());
            let w = pgd_solve(&s, &reg, lambda, &cfg, None).unwrap().w;
            total += (d.label(j) - d.input(j).dot(&w)).powi(2);
        }
        let explicit = total / 25.0;
        assert!((via_downdate.error - explicit).abs() <= 1e-10 * explicit);
    }

    #[test]
    fn test_error_cases() {
        let d = random_dataset(20, 3, 7);
        let zero = test_error(&d, &DVector::zeros(3)).unwrap();
        assert!((zero - d.label_energy()).abs() <= 1e-14 * zero);
        let w = DVector::from_column_slice(&[0.3, -0.2, 1.0]);
        let naive = (0..20)
            .map(|i| (d.label(i) - d.input(i).dot(&w)).powi(2))
            .sum::<f64>()
            / 20.0;
        assert!((test_error(&d, &w).unwrap() - naive).abs() <= 1e-12 * naive);
        let exact = Dataset::new(d.inputs().clone(), d.inputs() * &w).unwrap();
        assert!(test_error(&exact, &w).unwrap() <= 1e-28);
        assert!(test_error(&d, &DVector::zeros(2)).is_err());
    }

    #[test]
    fn grid_endpoints_and_singleton() {
        let d = random_dataset(20, 5, 8);
        let reg = Regularizer::Lasso;
        let curve = grid_search(
            &d,
            &reg,
            &ValidationScheme::Loo,
            &[0.2],
            &InnerConfig::default(),
            None,
        )
        .unwrap();
        assert_eq!(curve.points.len(), 1);
        assert_eq!(curve.argmin().lambda, 0.2);

        let big = 100.0;
        let curve = grid_search(
            &d,
            &reg,
            &ValidationScheme::Loo,
            &[0.0, big],
            &tight(),
            Some(&d),
        )
        .unwrap();
        let unreg = validation_error(&d, &reg, &ValidationScheme::Loo, 0.0, &tight()).unwrap();
        assert!((curve.points[0].validation_error - unreg.error).abs() <= 1e-9 * unreg.error);
        assert!(
            (curve.points[1].validation_error - d.label_energy()).abs() <= 1e-12 * d.label_energy()
        );
        assert!(
            (curve.points[1].test_error.unwrap() - d.label_energy()).abs()
                <= 1e-12 * d.label_energy()
        );

        assert!(grid_search(&d, &reg, &ValidationScheme::Loo, &[], &tight(), None).is_err());
        assert!(grid_search(
            &d,
            &reg,
            &ValidationScheme::Loo,
            &[0.2, 0.1],
            &tight(),
            None
        )
        .is_err());
    }

    #[test]
    fn grid_shape() {
        let g = default_grid(2.0, 50);
        assert_eq!(g.len(), 50);
        assert!((g[0] - 2e-3).abs() <= 1e-15);
        assert_eq!(g[49], 2.0);
        assert!(g.windows(2).all(|w| w[0] < w[1]));
    }
}
