//! Parameter counts and effective parameter counts of the architecture zoo.

use capalloc::archzoo::{DilationPattern, Manifold, ModelManifold};
use capalloc::capacity::effective_parameter_count;
use capalloc::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};
use capalloc::optim::QuadraticTask;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let models = [
        ("hierarchical c=1", ModelManifold::hierarchical(4, 2, 1, 1, DilationPattern::Exponential)),
        ("hierarchical c=2", ModelManifold::hierarchical(4, 2, 2, 1, DilationPattern::Exponential)),
        ("tiled x2 c=2", ModelManifold::hierarchical(2, 2, 2, 1, DilationPattern::Tiled { blocks: 2 })),
        ("repeated x2 c=2", ModelManifold::hierarchical(2, 2, 2, 1, DilationPattern::Repeated { blocks: 2 })),
        ("recurrent c=3", ModelManifold::recurrent(3, 16, 1)),
        ("fully connected", ModelManifold::fully_connected(16, 1)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (name, m) in models {
        let m = m.expect("valid architecture");
        let n = m.receptive_field();
        let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, n)).expect("valid process");
        let task = QuadraticTask::from_predictor(&cov, &exact_predictor(&cov).expect("positive definite"));
        let w = m.init_params(&mut rng);
        let eff = effective_parameter_count(&m, &task, &w).expect("shapes match");
        println!("{name:<18} n = {n:>2}  p = {:>3}  effective = {eff}", m.param_count());
    }
}
