//! Conditional capacity chains in both layer orders and the marginal
//! contribution of each layer.

use capalloc::archzoo::{DilationPattern, Manifold, ModelManifold};
use capalloc::capacity::{backward, conditional_chain, marginal_contributions, ConstraintMatrix};
use capalloc::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};
use capalloc::optim::{fit, FitConfig, QuadraticTask};

fn main() {
    let m = ModelManifold::hierarchical(4, 2, 2, 1, DilationPattern::Exponential).expect("valid architecture");
    let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, 16)).expect("valid process");
    let task = QuadraticTask::from_predictor(&cov, &exact_predictor(&cov).expect("positive definite"));
    let f = fit(&m, &task, &FitConfig::default().with_restarts(4)).expect("fit");
    let cm = ConstraintMatrix::at_optimum(&m, &task, &f.w_hat, f.tolerance).expect("stationary");
    let layers = m.layer_blocks();
    for (name, grouping) in [("forward", layers.clone()), ("backward", backward(&layers))] {
        let chain = conditional_chain(&cm, &grouping).expect("partition");
        let totals: Vec<String> = chain.iter().map(|c| format!("{:.2}", c.iter().sum::<f64>())).collect();
        println!("{name:<8} chain totals per block: {}", totals.join(" "));
    }
    for b in marginal_contributions(&cm, &layers).expect("partition") {
        println!(
            "layer {}: {} params, independent {:.2}, marginal {:.2}",
            b.block, b.params, b.independent_total, b.marginal_total
        );
    }
}
