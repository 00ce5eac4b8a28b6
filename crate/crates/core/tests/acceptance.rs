//! Acceptance gate: one line per criterion, nonzero exit if any fails.

use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use capalloc::archzoo::{DilationPattern, LayerSpec, LinearManifold, Manifold, ModelManifold, ScaledDirection};
use capalloc::capacity::{
    backward, capacity_of, conditional_chain, covariance_eigen_subspaces, error_bound_analysis, redundancy_check,
    spatial_cpi, ConstraintBasis, ConstraintMatrix, RedundancyConfig, Subspace,
};
use capalloc::covkit::{build_covariance, exact_predictor, AutocovarianceSpec};
use capalloc::featurespace::{estimate_feature_moments, feature_capacity, feature_task, input_space_capacity, FeatureMap};
use capalloc::optim::{fit, fit_from, fit_restarts, FitConfig, FitResult, QuadraticTask};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

/// Orthonormal columns by modified Gram-Schmidt.
fn gram_schmidt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut q = m.clone();
    for j in 0..q.ncols() {
        for i in 0..j {
            let r = q.column(i).dot(&q.column(j));
            let qi = q.column(i).into_owned();
            q.column_mut(j).axpy(-r, &qi, 1.0);
        }
        let norm = q.column(j).norm();
        q.column_mut(j).unscale_mut(norm);
    }
    q
}

/// `Tr(Sᵀ P S)` with `P = K (KᵀK)⁻¹ Kᵀ` built from the raw constraint columns.
fn projector_capacity(k_raw: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let gram_inv = (k_raw.transpose() * k_raw).try_inverse().expect("independent columns");
    let p = k_raw * gram_inv * k_raw.transpose();
    (s.transpose() * p * s).trace()
}

fn lib_capacity(k_raw: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
    let basis = ConstraintBasis::spanning(k_raw);
    capacity_of(
        &basis,
        &Subspace {
            s: s.clone(),
            label: String::new(),
        },
    )
    .expect("matching dimensions")
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}

fn power_law_task(n: usize) -> QuadraticTask {
    let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, n)).expect("valid process");
    let pred = exact_predictor(&cov).expect("positive definite");
    QuadraticTask::from_predictor(&cov, &pred)
}

fn lifted_task(n: usize, d: usize) -> QuadraticTask {
    let cov = build_covariance(&AutocovarianceSpec::power_law(1.0, n)).expect("valid process");
    let pred = exact_predictor(&cov).expect("positive definite");
    QuadraticTask::lifted(&cov, &pred, d)
}

fn hierarchical(channels: usize, d: usize) -> ModelManifold {
    ModelManifold::hierarchical(6, 2, channels, d, DilationPattern::Exponential).expect("valid architecture")
}

fn fit_cfg(restarts: usize) -> FitConfig {
    FitConfig::default().with_restarts(restarts)
}

fn fitted_basis(m: &dyn Manifold, task: &QuadraticTask, f: &FitResult) -> (ConstraintMatrix, ConstraintBasis) {
    let cm = ConstraintMatrix::at_optimum(m, task, &f.w_hat, f.tolerance).expect("stationary");
    let basis = cm.basis().expect("non-degenerate");
    (cm, basis)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for i in 0..1000 {
        let n = [4, 8, 16][i % 3];
        let kd = rng.random_range(1..n);
        let sd = rng.random_range(1..=n);
        let k = gaussian(&mut rng, n, kd);
        let s = gram_schmidt(&gaussian(&mut rng, n, sd));

        let kappa = lib_capacity(&k, &s);
        worst = worst.max((kappa - projector_capacity(&k, &s)).abs());

        let mixing = gaussian(&mut rng, kd, kd);
        let rot = gram_schmidt(&gaussian(&mut rng, sd, sd));
        worst = worst.max((lib_capacity(&(&k * mixing), &(&s * rot)) - kappa).abs());

        worst = worst.max((lib_capacity(&k, &DMatrix::identity(n, n)) - kd as f64).abs());

        if sd >= 2 {
            let split = rng.random_range(1..sd);
            let (a, b) = (s.columns(0, split).into_owned(), s.columns(split, sd - split).into_owned());
            worst = worst.max((lib_capacity(&k, &a) + lib_capacity(&k, &b) - kappa).abs());
        }

        let inside = &k * gaussian(&mut rng, kd, 1);
        let inside = &inside / inside.norm();
        let v = gaussian(&mut rng, n, 1);
        let q = gram_schmidt(&k);
        let outside = &v - &q * q.tr_mul(&v);
        let outside = &outside / outside.norm();
        worst = worst.max((lib_capacity(&k, &inside) - 1.0).abs());
        worst = worst.max(lib_capacity(&k, &outside).abs());
    }
    outcome(worst <= 1e-8, format!("1000 instances, worst deviation {worst:.2e} (tol 1e-8)"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let n = [4, 8, 16][i % 3];
        let k1d = rng.random_range(1..n);
        let k2d = rng.random_range(1..=n - k1d);
        let q = gram_schmidt(&gaussian(&mut rng, n, k1d + k2d));
        let (k1, k2) = (q.columns(0, k1d).into_owned(), q.columns(k1d, k2d).into_owned());
        let sd = rng.random_range(1..=n);
        let s = gram_schmidt(&gaussian(&mut rng, n, sd));
        worst = worst.max((lib_capacity(&k1, &s) + lib_capacity(&k2, &s) - lib_capacity(&q, &s)).abs());
    }
    let mut violated = 0;
    for i in 0..50 {
        let n = [4, 8, 16][i % 3];
        let k1d = rng.random_range(1..n);
        let k2d = rng.random_range(1..=n - k1d);
        let k1 = gaussian(&mut rng, n, k1d);
        let k2 = gaussian(&mut rng, n, k2d);
        let joint = DMatrix::from_columns(&k1.column_iter().chain(k2.column_iter()).collect::<Vec<_>>());
        let mut candidates = vec![k2.columns(0, 1) / k2.column(0).norm()];
        candidates.extend((0..20).map(|_| gram_schmidt(&gaussian(&mut rng, n, 1))));
        if candidates
            .iter()
            .any(|s| (lib_capacity(&k1, s) + lib_capacity(&k2, s) - lib_capacity(&joint, s)).abs() > 1e-6)
        {
            violated += 1;
        }
    }
    outcome(
        worst <= 1e-10 && violated == 50,
        format!("orthogonal worst {worst:.2e} (tol 1e-10), oblique pairs violated {violated}/50"),
    )
}

fn criterion_3() -> Outcome {
    let task = power_law_task(64);
    let m = hierarchical(4, 1);
    let f = fit(&m, &task, &fit_cfg(4)).expect("fit");
    if !f.converged {
        return outcome(false, "c=4 fit did not converge");
    }
    let (cm, basis) = fitted_basis(&m, &task, &f);
    let joint = spatial_cpi(&basis, 1).expect("shape");
    let blocks = m.layer_blocks();
    let mut worst: f64 = 0.0;
    for grouping in [blocks.clone(), backward(&blocks)] {
        let chain = conditional_chain(&cm, &grouping).expect("partition");
        for (lag, j) in joint.iter().enumerate() {
            let s: f64 = chain.iter().map(|c| c[lag]).sum();
            worst = worst.max((s - j).abs());
        }
    }
    outcome(worst <= 1e-8, format!("forward and backward, worst lag deviation {worst:.2e} (tol 1e-8)"))
}

fn criterion_4() -> Outcome {
    let task = power_law_task(64);
    let m = hierarchical(1, 1);
    let f = fit(&m, &task, &fit_cfg(8)).expect("fit");
    let (_, basis) = fitted_basis(&m, &task, &f);
    // Each layer contributes kernel - 1 free directions plus one global scale.
    let expected = 6 * (2 - 1) + 1;
    let fc = ModelManifold::fully_connected(64, 1).expect("valid architecture");
    let ffc = fit(&fc, &task, &fit_cfg(1)).expect("fit");
    let (_, fc_basis) = fitted_basis(&fc, &task, &ffc);
    outcome(
        basis.kappa == expected && m.param_count() == 12 && fc_basis.kappa == 64,
        format!(
            "c=1 kappa {} with p {} (expected {expected}, 12); fully connected kappa {} (expected 64)",
            basis.kappa,
            m.param_count(),
            fc_basis.kappa
        ),
    )
}

struct SweepEntry {
    channels: usize,
    loss: f64,
    kappa: usize,
    coef_error: f64,
}

fn channel_sweep(task: &QuadraticTask) -> Vec<SweepEntry> {
    [1, 2, 4, 8, 16]
        .into_iter()
        .map(|c| {
            let m = hierarchical(c, 1);
            let f = fit(&m, task, &fit_cfg(8)).expect("fit");
            let (_, basis) = fitted_basis(&m, task, &f);
            SweepEntry {
                channels: c,
                loss: f.loss,
                kappa: basis.kappa,
                coef_error: (&f.a_hat - &task.target).amax(),
            }
        })
        .collect()
}

fn criterion_5(sweep: &[SweepEntry]) -> Outcome {
    let full: Vec<&SweepEntry> = sweep.iter().filter(|e| e.kappa == 64).collect();
    let ok = !full.is_empty() && full.iter().all(|e| e.loss <= 1e-8 && e.coef_error <= 1e-4);
    let detail: Vec<String> = full
        .iter()
        .map(|e| format!("c={} loss {:.2e} coef err {:.2e}", e.channels, e.loss, e.coef_error))
        .collect();
    outcome(ok, format!("full-capacity points: [{}]", detail.join("; ")))
}

fn criterion_6() -> Outcome {
    let n = 16;
    let task = power_law_task(n);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let q = gram_schmidt(&gaussian(&mut rng, n, n));
    let m = LinearManifold::new(q.columns(0, n - 1).into_owned());
    let cfg = FitConfig {
        gradient_tolerance: 1e-13,
        ..fit_cfg(1)
    };
    let f = fit(&m, &task, &cfg).expect("fit");
    let (_, basis) = fitted_basis(&m, &task, &f);
    if basis.kappa != n - 1 {
        return outcome(false, format!("kappa {} != {}", basis.kappa, n - 1));
    }
    let x = &f.a_hat - &task.target;
    let total = x.norm_squared();
    let cpi = spatial_cpi(&basis, 1).expect("shape");
    let worst = (0..n).map(|i| (x[i] * x[i] / total - (1.0 - cpi[i])).abs()).fold(0.0, f64::max);
    outcome(worst <= 1e-6, format!("n={n}, worst |e_S^2/e^2 - (1 - kappa_S)| {worst:.2e} (tol 1e-6)"))
}

fn central_difference_error(m: &dyn Manifold, w: &DVector<f64>) -> f64 {
    let jac = m.jacobian(w).expect("valid parameters");
    let scale = jac.amax().max(1e-12);
    let mut worst: f64 = 0.0;
    for j in 0..w.len() {
        let h = 1e-6;
        let mut wp = w.clone();
        let mut wm = w.clone();
        wp[j] += h;
        wm[j] -= h;
        let col = (m.coefficients(&wp).expect("valid") - m.coefficients(&wm).expect("valid")) / (2.0 * h);
        worst = worst.max((col - jac.column(j)).amax() / scale);
    }
    worst
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for d in [1, 4] {
        let models = vec![
            ModelManifold::hierarchical(4, 2, 3, d, DilationPattern::Exponential),
            ModelManifold::hierarchical(2, 2, 2, d, DilationPattern::Tiled { blocks: 2 }),
            ModelManifold::hierarchical(2, 2, 2, d, DilationPattern::Repeated { blocks: 2 }),
            ModelManifold::recurrent(3, 10, d),
            ModelManifold::fully_connected(8, d),
            ModelManifold::new(
                vec![
                    LayerSpec::DilatedConv {
                        kernel_size: 3,
                        dilation: 1,
                        in_channels: d,
                        out_channels: 2,
                    },
                    LayerSpec::DilatedConv {
                        kernel_size: 2,
                        dilation: 3,
                        in_channels: 2,
                        out_channels: 1,
                    },
                ],
                d,
                6,
            ),
        ];
        for m in models {
            let m = m.expect("valid architecture");
            let w = m.init_params(&mut rng);
            worst = worst.max(central_difference_error(&m, &w));
            count += 1;
        }
    }
    let scaled = ScaledDirection::new(DVector::from_fn(5, |i, _| i as f64 - 2.0), 3);
    worst = worst.max(central_difference_error(&scaled, &DVector::from_vec(vec![0.7, -1.3, 0.4])));
    count += 1;
    outcome(worst < 1e-5, format!("{count} manifolds, max relative error {worst:.2e} (tol 1e-5)"))
}

fn criterion_8() -> Outcome {
    let task = power_law_task(64);
    let m = hierarchical(4, 1);
    let fits: Vec<FitResult> = fit_restarts(&m, &task, &fit_cfg(32))
        .expect("fit")
        .into_iter()
        .filter(|f| f.converged)
        .collect();
    if fits.len() < 2 {
        return outcome(false, format!("only {} converged restarts", fits.len()));
    }
    let best = fits
        .iter()
        .min_by(|a, b| a.loss.partial_cmp(&b.loss).expect("finite"))
        .expect("non-empty");
    let (_, basis) = fitted_basis(&m, &task, best);
    let table = error_bound_analysis(&basis, &fits, &task.target, &covariance_eigen_subspaces(&task.sigma))
        .expect("error bounds");
    let rho = spearman(&table.bounds(), &table.error_means());
    outcome(rho > 0.8, format!("{} converged fits, Spearman {rho:.3} (need > 0.8)", fits.len()))
}

fn criterion_9(sweep: &[SweepEntry], fc_loss: f64) -> Outcome {
    let mut ok = true;
    for pair in sweep.windows(2) {
        let saturated = (pair[1].loss - fc_loss).abs() <= 1e-6;
        if !(pair[1].loss <= 1.05 * pair[0].loss || saturated) {
            ok = false;
        }
    }
    let last = sweep.last().expect("non-empty");
    ok &= (last.loss - fc_loss).abs() <= 1e-6;
    let losses: Vec<String> = sweep.iter().map(|e| format!("c{}={:.2e}", e.channels, e.loss)).collect();
    outcome(ok, format!("losses [{}], fully connected {fc_loss:.2e}", losses.join(", ")))
}

fn normalized_cpi(d: usize, channels: usize) -> Vec<f64> {
    let task = lifted_task(64, d);
    let m = hierarchical(channels, d);
    let f = fit(&m, &task, &fit_cfg(4)).expect("fit");
    let (_, basis) = fitted_basis(&m, &task, &f);
    spatial_cpi(&basis, d).expect("shape").into_iter().map(|v| v / d as f64).collect()
}

fn criterion_10() -> Outcome {
    let a = normalized_cpi(1, 2);
    let b = normalized_cpi(4, 4);
    let rho = spearman(&a, &b);
    outcome(rho > 0.9, format!("(d=1, c=2) vs (d=4, c=4) Spearman {rho:.3} (need > 0.9)"))
}

fn criterion_11() -> Outcome {
    let n = 64;
    let spec = AutocovarianceSpec::power_law(1.0, n);
    let task = power_law_task(n);
    let fmap = FeatureMap::identity();
    let replicates = 8;
    let mut details = Vec::new();
    let mut ok = true;
    for c in [1, 2] {
        let m = hierarchical(c, 1);
        let f = fit(&m, &task, &fit_cfg(8)).expect("fit");
        let (_, basis) = fitted_basis(&m, &task, &f);
        let plain = spatial_cpi(&basis, 1).expect("shape");
        let mut estimates = Vec::new();
        for r in 0..replicates {
            let moments = estimate_feature_moments(&spec, &fmap, 200 * n, 1000 + r as u64).expect("moments");
            let ftask = feature_task(&moments).expect("task");
            let mut ff = fit(&m, &ftask, &fit_cfg(8)).expect("fit");
            let warm = fit_from(&m, &ftask, f.w_hat.clone(), &fit_cfg(1)).expect("fit");
            if warm.converged && (!ff.converged || warm.loss < ff.loss) {
                ff = warm;
            }
            if !ff.converged {
                return outcome(false, format!("c={c} replicate {r} did not converge"));
            }
            let fb = feature_capacity(&m, &moments, &ff.w_hat, ff.tolerance).expect("capacity");
            estimates.push(input_space_capacity(&fb, n, 1).expect("shape"));
        }
        let k = replicates as f64;
        let mut dev_sq = 0.0;
        let mut se_sq = 0.0;
        for lag in 0..n {
            let vals: Vec<f64> = estimates.iter().map(|e| e[lag]).collect();
            let mean = vals.iter().sum::<f64>() / k;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
            se_sq += var;
            dev_sq += vals.iter().map(|v| (v - plain[lag]).powi(2)).sum::<f64>() / k;
        }
        let (dev, se) = ((dev_sq / n as f64).sqrt(), (se_sq / n as f64).sqrt());
        ok &= dev <= 2.0 * se + 1e-12;
        details.push(format!("c={c} rms deviation {dev:.2e} vs 2*se {:.2e}", 2.0 * se));
    }
    outcome(ok, details.join("; "))
}

fn redundancy_outcome(name: &str, m: &dyn Manifold, task: &QuadraticTask, cfg: &RedundancyConfig) -> (bool, String) {
    let f = fit(m, task, &cfg.fit).expect("fit");
    if !f.converged {
        return (false, format!("{name}: reference fit did not converge"));
    }
    let mut flagged = 0;
    let mut failed = Vec::new();
    for j in 0..m.param_count() {
        let rec = redundancy_check(m, task, &f.w_hat, f.tolerance, &[j], cfg).expect("redundancy");
        if rec.redundant {
            flagged += 1;
            if rec.recovered != Some(true) || rec.trials.len() != 20 {
                failed.push(j);
            }
        }
    }
    (
        flagged > 0 && failed.is_empty(),
        format!("{name}: {flagged} flagged, unrecovered {failed:?}"),
    )
}

fn criterion_12() -> Outcome {
    let cfg = RedundancyConfig {
        freezes: 20,
        ..RedundancyConfig::default()
    };
    let small = power_law_task(8);
    let direction = DVector::from_fn(8, |i, _| 1.0 / (1.0 + i as f64));
    let (a, da) = redundancy_outcome("w1*w2*A0", &ScaledDirection::new(direction, 2), &small, &cfg);
    let deep = ModelManifold::hierarchical(4, 2, 1, 1, DilationPattern::Exponential).expect("valid architecture");
    let (b, db) = redundancy_outcome("depth-4 c=1 stack", &deep, &power_law_task(16), &cfg);
    outcome(a && b, format!("{da}; {db}"))
}

fn main() -> ExitCode {
    // `ACCEPTANCE_ONLY=3,8` restricts the run to the listed criteria.
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let selected = |id: usize| only.as_ref().is_none_or(|o| o.contains(&id));
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if !selected(id) {
            return;
        }
        let t = Instant::now();
        let o = f();
        let secs = t.elapsed().as_secs_f64();
        println!(
            "[{}] {id:>2} {name}: {} ({secs:.1}s)",
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        results.push((id, name, o, secs));
    };

    run(1, "capacity axioms", &mut || {
        let t = Instant::now();
        let mut o = criterion_1();
        if t.elapsed().as_secs_f64() >= 10.0 {
            o.passed = false;
            o.detail.push_str(", over the 10 s budget");
        }
        o
    });
    run(2, "sum equivalence for constraint pairs", &mut || {
        let t = Instant::now();
        let mut o = criterion_2();
        if t.elapsed().as_secs_f64() >= 30.0 {
            o.passed = false;
            o.detail.push_str(", over the 30 s budget");
        }
        o
    });
    run(3, "chain rule", &mut criterion_3);
    run(4, "effective parameter count", &mut criterion_4);

    let (sweep, fc_loss) = if selected(5) || selected(9) {
        let task = power_law_task(64);
        let fc = ModelManifold::fully_connected(64, 1).expect("valid architecture");
        (channel_sweep(&task), fit(&fc, &task, &fit_cfg(1)).expect("fit").loss)
    } else {
        (Vec::new(), 0.0)
    };
    run(5, "full-capacity exactness", &mut || criterion_5(&sweep));
    run(6, "exact error relation at kappa = n - 1", &mut criterion_6);
    run(7, "jacobian correctness", &mut criterion_7);
    run(8, "error-bound agreement", &mut criterion_8);
    run(9, "loss monotonicity", &mut || criterion_9(&sweep, fc_loss));
    run(10, "multi-dim scaling consistency", &mut criterion_10);
    run(11, "feature-space identity consistency", &mut criterion_11);
    run(12, "redundancy freeze-and-refit", &mut criterion_12);

    let failed: Vec<usize> = results.iter().filter(|r| !r.2.passed).map(|r| r.0).collect();
    let total: f64 = results.iter().map(|r| r.3).sum();
    println!(
        "acceptance: {}/{} passed in {total:.1}s{}",
        results.len() - failed.len(),
        results.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failing {failed:?}")
        }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
