use geninv::asymptotics::{aggregate_predictions, det_prefilter, AggregateOptions, OmegaForm};
use geninv::data::summarize;
use geninv::estimator::{fit, DEFAULT_RANK_TOL};
use geninv::evaluation::mse;
use geninv::generator::{generate_responses, GeneratorSpec};
use geninv::simulation::{
    coverage_study, draw_laws, energy_benchmark, sample_environment, simulate_multienv, BenchmarkOptions,
    EnvironmentLaw, SimulationConfig, UnivariateShift,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Asymptotic Kolmogorov survival function.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

fn std_normal_cdf(x: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    Normal::standard().cdf(x)
}

fn ks_p_value(mut z: Vec<f64>) -> f64 {
    z.sort_by(f64::total_cmp);
    let n = z.len() as f64;
    let d = z
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = std_normal_cdf(v);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max);
    let sn = n.sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

#[test]
fn kolmogorov_series_reference_values() {
    // classical critical values
    assert!((kolmogorov_sf(1.358) - 0.05).abs() < 1e-3);
    assert!((kolmogorov_sf(1.628) - 0.01).abs() < 1e-3);
}

#[test]
fn simulated_noise_has_target_covariance() {
    let k = DVector::from_vec(vec![0.6, -0.4, 0.2]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let law = draw_laws(3, 1, 1.0, 1.0, &k, &mut rng).unwrap().remove(0);
    let beta = DVector::from_vec(vec![1.0, 2.0, 3.0]);
    let n = 1_000_000;
    let (x, y) = sample_environment(&law, &beta, &k, false, n, &mut rng);
    let eps = &y - &x * &beta;
    let nf = n as f64;
    for j in 0..3 {
        let prods: Vec<f64> = (0..n).map(|i| (x[(i, j)] - law.mu[j]) * eps[i]).collect();
        let c = prods.iter().sum::<f64>() / nf;
        let se = (prods.iter().map(|v| (v - c).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt() / nf.sqrt();
        assert!((c - k[j]).abs() < 4.0 * se, "coordinate {j}: {c} vs {}", k[j]);
    }
    let sq: Vec<f64> = eps.iter().map(|e| e * e).collect();
    let v = sq.iter().sum::<f64>() / nf;
    let se = (sq.iter().map(|s| (s - v).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt() / nf.sqrt();
    assert!((v - law.noise_var).abs() < 4.0 * se);
}

#[test]
fn generated_responses_are_gaussian_at_fixed_x() {
    let sigma0 = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
    let mu0 = DVector::from_vec(vec![0.5, -0.5]);
    let beta = DVector::from_vec(vec![1.0, -2.0]);
    let k = DVector::from_vec(vec![0.4, 0.2]);
    let spec = GeneratorSpec::from_moments(beta.clone(), k, 1.5, mu0.clone(), sigma0, false, true).unwrap();
    let x = DVector::from_vec(vec![1.2, 0.7]);
    let n = 100_000;
    let x_test = DMatrix::from_fn(n, 2, |_, j| x[j]);
    let y = generate_responses(&spec, &x_test, 77);
    let mean = beta.dot(&x) + spec.loading.dot(&(&x - &mu0));
    let sd = spec.radicand.sqrt();
    let z: Vec<f64> = y.iter().map(|v| (v - mean) / sd).collect();
    let p = ks_p_value(z);
    assert!(p > 0.01, "KS p-value {p}");
}

#[test]
fn multienv_preset_recovers_beta() {
    let mut beta_ok = 0;
    let mut noise_ok = 0;
    for seed in 0..100 {
        let cfg = SimulationConfig::multienv_preset(seed);
        let sim = simulate_multienv(&cfg).unwrap();
        let f = fit(&sim.dataset, DEFAULT_RANK_TOL).unwrap();
        if (&f.beta_hat - &cfg.beta_star).amax() < 0.5 {
            beta_ok += 1;
        }
        let n: usize = cfg.n_per_env.iter().sum();
        let target: f64 = sim.truth.laws.iter().zip(&cfg.n_per_env).map(|(l, &m)| l.noise_var * m as f64).sum::<f64>() / n as f64;
        if ((f.sigma_y_sq_hat - target) / target).abs() < 0.1 {
            noise_ok += 1;
        }
    }
    assert!(beta_ok >= 95, "beta recovered in {beta_ok}/100");
    assert!(noise_ok >= 90, "noise variance within 10% in {noise_ok}/100");
}

#[test]
fn averaging_beats_median_single_combo() {
    let mut wins = 0;
    for seed in 0..100u64 {
        let cfg = SimulationConfig::multienv_preset(1000 + seed);
        let sim = simulate_multienv(&cfg).unwrap();
        let d = &sim.dataset;
        let combos: Vec<Vec<usize>> = det_prefilter(&summarize(d), 5, 100)
            .unwrap()
            .into_iter()
            .map(|c| c.combo)
            .filter(|c| fit(&d.select_envs(c).unwrap(), DEFAULT_RANK_TOL).is_ok())
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k_act = cfg.k_star.rows(1, 4).into_owned();
        let big_s: f64 = 10.0;
        let s1 = rng.random_range(0.0..big_s);
        let law = draw_laws(4, 1, s1, big_s - s1, &k_act, &mut rng).unwrap().remove(0);
        let (x, y) = sample_environment(&law, &cfg.beta_star, &cfg.k_star, true, 200, &mut rng);
        let opts = AggregateOptions::default();
        let avg = aggregate_predictions(d, &combos, &x, seed, &opts).unwrap();
        let mut singles: Vec<f64> = combos
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let p = aggregate_predictions(d, std::slice::from_ref(c), &x, seed + 10_000 * (i as u64 + 1), &opts).unwrap();
                mse(&p, &y).unwrap()
            })
            .collect();
        singles.sort_by(f64::total_cmp);
        let med = singles[singles.len() / 2];
        if mse(&avg, &y).unwrap() < med {
            wins += 1;
        }
    }
    assert!(wins >= 80, "averaging won {wins}/100");
}

#[test]
fn half_level_coverage() {
    let r = coverage_study(&SimulationConfig::coverage_preset(5), 500, 0.5, OmegaForm::Linearized).unwrap();
    for c in &r.coverage {
        assert!((0.42..=0.58).contains(c), "coverage {c}");
    }
}

#[test]
fn ols_degrades_under_strong_shift() {
    let cfg = UnivariateShift::default();
    let mut gi_better = 0;
    let mut ols_better_at_training_strength = 0;
    for seed in 0..100 {
        let r = energy_benchmark(&cfg, &[2.0, 100.0], 1, seed, &BenchmarkOptions::default()).unwrap();
        if r.ols[1] > r.gi[1] {
            gi_better += 1;
        }
        if r.causal[0] > r.ols[0] {
            ols_better_at_training_strength += 1;
        }
    }
    assert!(gi_better >= 95, "GI beat OLS at s=100 in {gi_better}/100");
    assert!(ols_better_at_training_strength > 50, "causal-only worse than OLS at s=2 in {ols_better_at_training_strength}/100");
}

#[test]
fn population_law_slack_is_exact() {
    let law = EnvironmentLaw::new(DVector::zeros(2), DMatrix::identity(2, 2) * 2.0, &DVector::from_vec(vec![1.0, 1.0]), 1.0).unwrap();
    assert!((law.noise_var - 2.0).abs() < 1e-14);
}
