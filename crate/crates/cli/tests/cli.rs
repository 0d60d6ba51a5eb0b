use std::path::Path;
use std::process::{Command, Output};

use geninv::data::read_covariates_csv;
use geninv::estimator::GIFit;
use geninv::generator::{build_generator, generate_responses};
use geninv::simulation::{energy_benchmark, BenchmarkOptions, UnivariateShift};

fn geninv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geninv")).args(args).env_remove("GI_SEED").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

/// y = 2x exactly, two environments with distinct means.
fn toy_csv() -> String {
    let mut s = String::from("env,y,x\n");
    for (e, xs) in [("a", [1.0, 2.0, 3.0]), ("b", [-1.0, 0.5, 4.0])] {
        for x in xs {
            s += &format!("{e},{},{x}\n", 2.0 * x);
        }
    }
    s
}

#[test]
fn fit_exact_linear_toy() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "toy.csv", &toy_csv());
    let o = geninv(&["fit", "--input", &input, "--covariates", "x", "--format", "json"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let f = GIFit::from_json(&stdout(&o)).unwrap();
    assert!((f.beta_hat[0] - 2.0).abs() < 1e-12);
    assert!(f.k_hat[0].abs() < 1e-12);
}

#[test]
fn collinear_means_exit_2_with_eigenvalues() {
    let dir = tempfile::tempdir().unwrap();
    // both environments have mean (1, 1)
    let body = "env,y,x1,x2\na,1,0,1\na,2,2,1\nb,0,1,0\nb,3,1,2\n";
    let input = write(dir.path(), "col.csv", body);
    let o = geninv(&["fit", "--input", &input, "--covariates", "x1,x2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("eigenvalues"));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(geninv(&["fit"]).status.code(), Some(64));
    assert_eq!(geninv(&["--help"]).status.code(), Some(0));
}

#[test]
fn predict_matches_library_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    let data = data.to_str().unwrap();
    assert!(geninv(&["simulate", "--seed", "3", "--output", data]).status.success());
    let fit_path = dir.path().join("f.json");
    let fit_path = fit_path.to_str().unwrap();
    let o = geninv(&["fit", "--input", data, "--covariates", "x1,x2,x3,x4", "--intercept", "--format", "json", "--output", fit_path]);
    assert!(o.status.success());
    assert!(Path::new(&format!("{fit_path}.config.json")).exists());

    let mut rows = String::from("x1,x2,x3,x4\n");
    for i in 0..12 {
        let t = i as f64;
        rows += &format!("{},{},{},{}\n", t.sin() * 8.0, (1.3 * t).cos() * 15.0, t - 4.0, (t * t) % 7.0 - 3.0);
    }
    let test = write(dir.path(), "t.csv", &rows);
    let run = || stdout(&geninv(&["predict", "--fit", fit_path, "--test", &test, "--seed", "11"]));
    let out = run();
    assert_eq!(out, run());

    let f = GIFit::from_json(&std::fs::read_to_string(fit_path).unwrap()).unwrap();
    let names: Vec<String> = ["x1", "x2", "x3", "x4"].map(String::from).to_vec();
    let x = read_covariates_csv(std::fs::File::open(&test).unwrap(), &names).unwrap().insert_column(0, 1.0);
    let spec = build_generator(&f, &x, false).unwrap();
    let y = generate_responses(&spec, &x, 11);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("# seed=11"));
    assert_eq!(lines.next(), Some("y_hat"));
    let got: Vec<f64> = lines.map(|l| l.parse().unwrap()).collect();
    assert_eq!(got, y.as_slice());
}

#[test]
fn select_sources_needs_enough_environments() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "toy.csv", &toy_csv());
    // two environments, p = 2
    let o = geninv(&["select-sources", "--input", &input, "--covariates", "x", "--intercept"]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn energy_of_identical_files_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "toy.csv", &toy_csv());
    let o = geninv(&["energy", "--input", &input, "--test", &input, "--covariates", "y,x", "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["energy"].as_f64(), Some(0.0));
}

#[test]
fn simulate_is_reproducible() {
    let a = stdout(&geninv(&["simulate", "--seed", "9", "--n", "20"]));
    let b = stdout(&geninv(&["simulate", "--seed", "9", "--n", "20"]));
    let c = stdout(&geninv(&["simulate", "--seed", "10", "--n", "20"]));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 1 + 6 * 20);
}

#[test]
fn sweep_matches_library() {
    let o = geninv(&["simulate", "--scenario", "sweep", "--grid", "1,10", "--replicates", "2", "--n", "50", "--seed", "4"]);
    assert!(o.status.success());
    let cfg = UnivariateShift {
        n_train: 50,
        n_test: 50,
        ..Default::default()
    };
    let r = energy_benchmark(&cfg, &[1.0, 10.0], 2, 4, &BenchmarkOptions::default()).unwrap();
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    assert_eq!(stdout(&o), String::from_utf8(buf).unwrap());
}
