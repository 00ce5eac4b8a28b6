//! Autocovariance, Toeplitz covariance and the exact linear predictor for a
//! few stationary processes.

use capalloc::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};

fn main() {
    let n = 8;
    let specs = [
        ("ar(1) 0.6", AutocovarianceSpec::ar(vec![0.6], 1.0, n)),
        ("exponential 0.8", AutocovarianceSpec::exponential(0.8, n)),
        ("power law 1.0", AutocovarianceSpec::power_law(1.0, n)),
    ];
    for (name, spec) in specs {
        let cov = build_covariance(&spec).expect("valid process");
        let pred = exact_predictor(&cov).expect("positive definite");
        let a: Vec<String> = pred.a_star.iter().map(|v| format!("{v:+.4}")).collect();
        println!("{name:<16} v* = {:.5}  a* = [{}]", pred.v_star, a.join(", "));
    }
}
