//! Capacity of a model applied to Hermite features of the inputs, folded back
//! onto the input lags.

use capalloc::archzoo::{DilationPattern, ModelManifold};
use capalloc::covkit::AutocovarianceSpec;
use capalloc::featurespace::{estimate_feature_moments, feature_capacity, feature_task, input_space_capacity, FeatureMap};
use capalloc::optim::{fit, FitConfig};

fn main() {
    let n = 8;
    let spec = AutocovarianceSpec::power_law(1.0, n);
    let fmap = FeatureMap::hermite(2);
    let d = fmap.dim();
    let moments = estimate_feature_moments(&spec, &fmap, 200 * n * d, 7).expect("moments");
    let task = feature_task(&moments).expect("feature task");
    let m = ModelManifold::hierarchical(3, 2, 2, d, DilationPattern::Exponential).expect("valid architecture");
    let f = fit(&m, &task, &FitConfig::default().with_restarts(4)).expect("fit");
    let basis = feature_capacity(&m, &moments, &f.w_hat, f.tolerance).expect("stationary");
    let cpi = input_space_capacity(&basis, n, d).expect("shape");
    println!("features per lag {d}, kappa {}, loss {:.3e}", basis.kappa, f.loss);
    for (lag, v) in cpi.iter().enumerate() {
        println!("lag {:>2}: {v:.3}", lag + 1);
    }
}
