//! Freeze-and-refit check of parameters whose marginal contribution vanishes.

use capalloc::archzoo::{DilationPattern, Manifold, ModelManifold};
use capalloc::capacity::{redundancy_check, RedundancyConfig};
use capalloc::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};
use capalloc::optim::{fit, QuadraticTask};

fn main() {
    let m = ModelManifold::hierarchical(3, 2, 1, 1, DilationPattern::Exponential).expect("valid architecture");
    let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, 8)).expect("valid process");
    let task = QuadraticTask::from_predictor(&cov, &exact_predictor(&cov).expect("positive definite"));
    let cfg = RedundancyConfig {
        freezes: 5,
        ..RedundancyConfig::default()
    };
    let f = fit(&m, &task, &cfg.fit).expect("fit");
    for j in 0..m.param_count() {
        let r = redundancy_check(&m, &task, &f.w_hat, f.tolerance, &[j], &cfg).expect("check");
        let worst = r.trials.iter().map(|t| t.relative_excess).fold(f64::NEG_INFINITY, f64::max);
        println!(
            "param {j}: marginal {:.1} redundant {} recovered {:?} worst excess {worst:.1e}",
            r.marginal, r.redundant, r.recovered
        );
    }
}
