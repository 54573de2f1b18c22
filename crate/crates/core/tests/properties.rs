use hypergrad_core::hypergrad::{hsgd_run_problem, ohsgd_run_problem, z_tilde};
use hypergrad_core::prox::subderivatives;
use hypergrad_core::validation::{default_grid, grid_search_problem};
use hypergrad_core::{
    compute_stats, loo_downdate, Dataset, GroupStructure, HyperConfig, InnerConfig, Problem,
    Regularizer, ValidationScheme, ZMode,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn dataset(n: usize, p: usize, values: &[f64]) -> Dataset {
    let x = DMatrix::from_fn(n, p, |i, k| {
        values[(i * p + k) % values.len()] + 0.01 * (i as f64 - k as f64)
    });
    let y = DVector::from_fn(n, |i, _| values[(7 * i + 3) % values.len()]);
    Dataset::new(x, y).unwrap()
}

fn instance() -> impl Strategy<Value = (Dataset, f64)> {
    (
        2usize..6,
        prop::collection::vec(-2.0f64..2.0, 64),
        0.05f64..0.9,
    )
        .prop_map(|(p, values, frac)| {
            let d = dataset(p + 6, p, &values);
            (d, frac)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn downdate_then_update_restores_the_moments((d, _) in instance()) {
        let s = compute_stats(&d);
        for j in 0..d.n_samples() {
            let down = loo_downdate(&s, &d.input(j), d.label(j)).unwrap();
            let back = down.rank_one_update(&d.input(j), d.label(j)).unwrap();
            let scale = s.phi.norm().max(1.0);
            prop_assert!((&back.phi - &s.phi).norm() <= 1e-12 * scale);
            prop_assert!((&back.r - &s.r).norm() <= 1e-12 * s.r.norm().max(1.0));
            prop_assert_eq!(back.count, s.count);
        }
    }

    #[test]
    fn z_modes_agree_when_the_system_is_regular((d, frac) in instance()) {
        let reg = Regularizer::Lasso;
        let problem = Problem::new(&d, &reg, &ValidationScheme::Loo).unwrap();
        let lambda = frac * problem.lambda_max();
        let inner = InnerConfig { tol: 1e-12, max_iters: 1_000_000 };
        for f in 0..problem.folds.folds.len() {
            let res = problem.solve_fold(f, lambda, &inner, None).unwrap();
            let sub = subderivatives(&reg, &res.w_f, problem.alpha, lambda).unwrap();
            let train = &problem.folds.folds[f].train;
            let lu = match z_tilde(train, &sub, problem.alpha, ZMode::LinearSolve) {
                Ok(z) => z,
                Err(_) => continue,
            };
            let ls = z_tilde(train, &sub, problem.alpha, ZMode::LeastSquares).unwrap();
            prop_assert!((&lu - &ls).amax() <= 1e-8 * lu.amax().max(1.0));
        }
    }

    #[test]
    fn descent_iterates_stay_nonnegative((d, _) in instance(), beta in 1e-3f64..1.0) {
        let p = d.dim();
        for reg in [Regularizer::Lasso, Regularizer::GroupLasso(GroupStructure::uniform(p, 1).unwrap())] {
            let problem = Problem::new(&d, &reg, &ValidationScheme::Loo).unwrap();
            let cfg = HyperConfig { beta, max_outer: 20, outer_tol: 0.0, ..Default::default() };
            for t in [hsgd_run_problem(&problem, &cfg).unwrap(), ohsgd_run_problem(&problem, &cfg).unwrap()] {
                prop_assert!(t.lambda_init >= 0.0);
                prop_assert!(t.records.iter().all(|r| r.lambda >= 0.0 && r.hypergrad.is_finite()));
            }
        }
    }

    #[test]
    fn grid_argmin_is_the_smallest_point((d, _) in instance()) {
        let reg = Regularizer::Lasso;
        let problem = Problem::new(&d, &reg, &ValidationScheme::KFold { n_folds: 3, seed: 1 }).unwrap();
        let curve = grid_search_problem(&problem, &default_grid(problem.lambda_max(), 12), &InnerConfig::default(), None).unwrap();
        let best = curve.argmin().validation_error;
        prop_assert!(curve.points.iter().all(|p| p.validation_error >= best));
    }
}
