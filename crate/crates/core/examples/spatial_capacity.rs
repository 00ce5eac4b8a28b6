//! Total capacity, capacity per lag and along covariance eigenvectors for a
//! channel sweep.

use capalloc::archzoo::{DilationPattern, ModelManifold};
use capalloc::capacity::{constraint_basis, covariance_eigen_capacity, spatial_cpi};
use capalloc::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};
use capalloc::optim::{fit, FitConfig, QuadraticTask};

fn main() {
    let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, 16)).expect("valid process");
    let task = QuadraticTask::from_predictor(&cov, &exact_predictor(&cov).expect("positive definite"));
    for c in [1, 2, 4] {
        let m = ModelManifold::hierarchical(4, 2, c, 1, DilationPattern::Exponential).expect("valid architecture");
        let f = fit(&m, &task, &FitConfig::default().with_restarts(4)).expect("fit");
        let basis = constraint_basis(&m, &task, &f.w_hat, f.tolerance).expect("stationary");
        let cpi = spatial_cpi(&basis, 1).expect("shape");
        let eig = covariance_eigen_capacity(&basis, &task.sigma).expect("shape");
        let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ");
        println!("c={c} kappa={} loss={:.2e}", basis.kappa, f.loss);
        println!("  per lag:   {}", fmt(&cpi));
        println!("  per eigen: {}", fmt(&eig));
    }
}
