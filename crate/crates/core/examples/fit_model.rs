//! Fit a dilated convolution stack to the optimal predictor of a power-law
//! process and report the loss of each restart.

use capalloc::archzoo::{DilationPattern, ModelManifold};
use capalloc::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};
use capalloc::optim::{fit, FitConfig, QuadraticTask};

fn main() {
    let m = ModelManifold::hierarchical(5, 2, 2, 1, DilationPattern::Exponential).expect("valid architecture");
    let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, 32)).expect("valid process");
    let task = QuadraticTask::from_predictor(&cov, &exact_predictor(&cov).expect("positive definite"));
    let f = fit(&m, &task, &FitConfig::default().with_restarts(4)).expect("fit");
    println!("best restart {} loss {:.3e} converged {}", f.best_restart, f.loss, f.converged);
    println!("residual variance {:.6} (v* = {:.6})", f.residual_variance, task.v_star);
    for (i, l) in f.restart_losses.iter().enumerate() {
        println!("  restart {i}: {l:.3e}");
    }
}
