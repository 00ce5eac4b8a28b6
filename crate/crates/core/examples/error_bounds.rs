//! Capacity deficits against realized errors over several fits.

use capalloc::archzoo::{DilationPattern, ModelManifold};
use capalloc::capacity::{constraint_basis, error_bound_analysis, lag_subspaces};
use capalloc::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};
use capalloc::optim::{fit_restarts, FitConfig, QuadraticTask};

fn main() {
    let n = 16;
    let m = ModelManifold::hierarchical(4, 2, 2, 1, DilationPattern::Exponential).expect("valid architecture");
    let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, n)).expect("valid process");
    let task = QuadraticTask::from_predictor(&cov, &exact_predictor(&cov).expect("positive definite"));
    let fits: Vec<_> = fit_restarts(&m, &task, &FitConfig::default().with_restarts(8))
        .expect("fit")
        .into_iter()
        .filter(|f| f.converged)
        .collect();
    let best = fits.iter().min_by(|a, b| a.loss.total_cmp(&b.loss)).expect("a converged fit");
    let basis = constraint_basis(&m, &task, &best.w_hat, best.tolerance).expect("stationary");
    let table = error_bound_analysis(&basis, &fits, &task.target, &lag_subspaces(n, 1)).expect("bounds");
    println!("{} fits, normalized {}", table.fits, table.normalized);
    for r in &table.rows {
        println!("{:<7} bound {:.3}  error {:.3} ± {:.3}", r.label, r.bound, r.error_mean, r.error_std);
    }
}
