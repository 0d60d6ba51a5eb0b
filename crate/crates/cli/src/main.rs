use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use geninv::asymptotics::{asymptotic_covariance_with, select_sources, OmegaForm, SelectionOptions};
use geninv::data::{load_csv, read_covariates_csv, CsvSchema, INTERCEPT_NAME};
use geninv::estimator::{fit, GIFit, DEFAULT_RANK_TOL};
use geninv::evaluation::{energy_distance, energy_matrix, energy_permutation_test, peculiarity_ranking};
use geninv::generator::{build_generator, do_interventional_generator, generate_responses};
use geninv::simulation::{
    coverage_study, energy_benchmark, mse_benchmark, simulate_multienv, BenchmarkOptions, SimulationConfig,
    UnivariateShift,
};
use geninv::GiError;
use nalgebra::DMatrix;
use serde::Serialize;
use serde_json::json;

const DEFAULT_SEED: u64 = 42;

#[derive(Parser, Debug, Serialize)]
#[command(name = "geninv", version, about = "Generative invariance estimation, prediction and evaluation")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
enum Command {
    /// Fit β̂, K̂ and σ̂² on multi-environment training data.
    Fit(FitArgs),
    /// Generate test responses from a saved fit.
    Predict(PredictArgs),
    /// Rank source combinations by the efficiency key.
    SelectSources(SelectArgs),
    /// Energy distance between two samples, or between every pair of environments.
    Energy(EnergyArgs),
    /// Run a simulation scenario.
    Simulate(SimulateArgs),
    /// Empirical coverage of the normal confidence intervals.
    Coverage(CoverageArgs),
}

#[derive(Args, Debug, Serialize, Clone)]
struct DataArgs {
    /// Training CSV.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    response: String,
    #[arg(long, default_value = "env")]
    env: String,
    /// Comma-separated covariate columns.
    #[arg(long, value_delimiter = ',', required = true)]
    covariates: Vec<String>,
    /// Prepend a column of ones.
    #[arg(long)]
    intercept: bool,
    #[arg(long, default_value_t = DEFAULT_RANK_TOL)]
    rank_tol: f64,
}

impl DataArgs {
    fn load(&self) -> geninv::Result<geninv::Dataset> {
        load_csv(
            &self.input,
            &CsvSchema {
                response: self.response.clone(),
                env: self.env.clone(),
                covariates: self.covariates.clone(),
                add_intercept: self.intercept,
            },
        )
    }
}

#[derive(Args, Debug, Serialize, Clone)]
struct OutArgs {
    /// Output file (stdout when omitted). Written atomically.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(ValueEnum, Debug, Serialize, Clone, Copy, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
enum Format {
    Csv,
    Json,
}

#[derive(ValueEnum, Debug, Serialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum Form {
    Linearized,
    Displayed,
}

impl From<Form> for OmegaForm {
    fn from(f: Form) -> Self {
        match f {
            Form::Linearized => OmegaForm::Linearized,
            Form::Displayed => OmegaForm::Displayed,
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value_t = Form::Linearized)]
    omega_form: Form,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(ValueEnum, Debug, Serialize, Clone, Copy)]
#[serde(rename_all = "lowercase")]
enum Method {
    Gi,
    Causal,
}

#[derive(Args, Debug, Serialize)]
struct PredictArgs {
    /// Fit JSON written by `geninv fit --format json`.
    #[arg(long)]
    fit: PathBuf,
    /// Test covariates CSV.
    #[arg(long)]
    test: PathBuf,
    /// Covariate columns of the test file (default: the fit's covariate names).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long, env = "GI_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Fail instead of truncating a negative radicand.
    #[arg(long)]
    strict: bool,
    #[arg(long, value_enum, default_value_t = Method::Gi)]
    method: Method,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 100)]
    top_b: usize,
    #[arg(long, env = "GI_SEED", default_value_t = DEFAULT_SEED)]
    split_seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
struct EnergyArgs {
    /// First sample, or the multi-environment data when --test is absent.
    #[arg(long)]
    input: PathBuf,
    /// Second sample.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Columns to compare (default: all columns in two-sample mode).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    #[arg(long, default_value = "y")]
    response: String,
    #[arg(long, default_value = "env")]
    env: String,
    /// Compare covariates only instead of (x, y) in environment mode.
    #[arg(long)]
    covariates_only: bool,
    /// Permutations for a p-value in two-sample mode.
    #[arg(long, default_value_t = 0)]
    permutations: usize,
    #[arg(long, env = "GI_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(ValueEnum, Debug, Serialize, Clone, Copy)]
#[serde(rename_all = "kebab-case")]
enum Scenario {
    /// Multi-environment dataset (intercept plus four covariates, six environments).
    Multienv,
    /// Univariate intervention-strength sweep scored by energy distance.
    Sweep,
    /// Multi-environment test-MSE sweep.
    MseSweep,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[arg(long, value_enum, default_value_t = Scenario::Multienv)]
    scenario: Scenario,
    #[arg(long, env = "GI_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Rows per environment (multienv) or per sample (sweep).
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    s1: Option<f64>,
    #[arg(long)]
    s2: Option<f64>,
    /// Intervention strengths.
    #[arg(long, value_delimiter = ',', default_value = "0.5,2,10,100,1000")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    replicates: usize,
    /// Redraw the training sample in every sweep replicate.
    #[arg(long)]
    refit_per_replicate: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args, Debug, Serialize)]
struct CoverageArgs {
    #[arg(long, default_value_t = 500)]
    replicates: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, env = "GI_SEED", default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long, value_enum, default_value_t = Form::Linearized)]
    omega_form: Form,
    #[command(flatten)]
    out: OutArgs,
}

/// Error carrying its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<GiError> for Failure {
    fn from(e: GiError) -> Self {
        let code = match &e {
            GiError::Identifiability(_) => 2,
            GiError::DegenerateCovariates { .. } | GiError::SingularCovariance(_) => 3,
            GiError::EllipsoidViolation { .. } => 4,
            GiError::SelectionInfeasible(_) | GiError::NotEnoughSources { .. } => 5,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        GiError::from(e).into()
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        GiError::from(e).into()
    }
}

type CmdResult<T = ()> = Result<T, Failure>;

fn num(v: f64) -> String {
    format!("{v:.16e}")
}

/// Write `body` to `out.output` via a temp file and rename, plus a config
/// sidecar; print to stdout when no path is given.
fn emit(out: &OutArgs, body: &str, config: &serde_json::Value) -> CmdResult {
    let Some(path) = &out.output else {
        std::io::stdout().write_all(body.as_bytes())?;
        return Ok(());
    };
    write_atomic(path, body.as_bytes())?;
    let sidecar = json!({
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
    });
    let mut side = path.as_os_str().to_owned();
    side.push(".config.json");
    write_atomic(Path::new(&side), serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> CmdResult {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Failure::from(e.error))?;
    Ok(())
}

fn csv_table(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    s
}

fn cmd_fit(a: &FitArgs, config: &serde_json::Value) -> CmdResult {
    let d = a.data.load()?;
    let f = fit(&d, a.data.rank_tol)?;
    let rep = asymptotic_covariance_with(&f, a.level, a.omega_form.into())?;
    eprintln!(
        "fit: N = {}, Z = {}, p = {}, sigma_y_sq_hat = {}, gram eigenvalues {:?}",
        f.n_total,
        f.summaries.len(),
        f.p(),
        num(f.sigma_y_sq_hat),
        f.rank_report.eigenvalues
    );
    let body = match a.out.format {
        Format::Json => {
            let mut s = f.to_json()?;
            s.push('\n');
            s
        }
        Format::Csv => csv_table(
            &["coefficient", "beta_hat", "k_opt_hat", "k_hat", "std_error", "ci_lower", "ci_upper"],
            (0..f.p()).map(|j| {
                vec![
                    f.covariate_names[j].clone(),
                    num(f.beta_hat[j]),
                    num(f.k_opt_hat[j]),
                    num(f.k_hat[j]),
                    num(rep.std_errors[j]),
                    num(rep.ci_lower[j]),
                    num(rep.ci_upper[j]),
                ]
            }),
        ),
    };
    emit(&a.out, &body, config)
}

fn test_design(f: &GIFit, path: &Path, covariates: &[String]) -> CmdResult<DMatrix<f64>> {
    let names: Vec<String> = if covariates.is_empty() {
        f.covariate_names.iter().filter(|n| !(f.intercept && n.as_str() == INTERCEPT_NAME)).cloned().collect()
    } else {
        covariates.to_vec()
    };
    let x = read_covariates_csv(std::fs::File::open(path)?, &names)?;
    Ok(if f.intercept { x.insert_column(0, 1.0) } else { x })
}

fn cmd_predict(a: &PredictArgs, config: &serde_json::Value) -> CmdResult {
    let f = GIFit::from_json(&std::fs::read_to_string(&a.fit)?)?;
    let x = test_design(&f, &a.test, &a.covariates)?;
    let y = match a.method {
        Method::Gi => {
            let spec = build_generator(&f, &x, a.strict)?;
            if spec.truncated {
                eprintln!("warning: ellipsoid condition fails on the test covariates (slack {}); noise term set to 0", num(spec.raw_radicand));
            }
            generate_responses(&spec, &x, a.seed)
        }
        Method::Causal => do_interventional_generator(&f, &x, a.seed)?,
    };
    let body = match a.out.format {
        Format::Json => {
            let mut s = serde_json::to_string_pretty(&json!({ "seed": a.seed, "y_hat": y.as_slice() }))?;
            s.push('\n');
            s
        }
        Format::Csv => {
            let mut s = format!("# seed={}\ny_hat\n", a.seed);
            for v in y.iter() {
                let _ = writeln!(s, "{}", num(*v));
            }
            s
        }
    };
    emit(&a.out, &body, config)
}

fn cmd_select(a: &SelectArgs, config: &serde_json::Value) -> CmdResult {
    let d = a.data.load()?;
    let r = select_sources(
        &d,
        &SelectionOptions {
            split_seed: a.split_seed,
            top_b: a.top_b,
            rank_tol: a.data.rank_tol,
        },
    )?;
    for n in &r.notes {
        eprintln!("note: {n}");
    }
    let body = match a.out.format {
        Format::Json => serde_json::to_string_pretty(&r)? + "\n",
        Format::Csv => csv_table(
            &["rank", "combo", "det", "q_tilde"],
            r.ranked.iter().enumerate().map(|(i, c)| {
                vec![
                    (i + 1).to_string(),
                    c.labels.join(";"),
                    num(c.det_score),
                    c.key.map_or_else(|| "NA".to_string(), num),
                ]
            }),
        ),
    };
    emit(&a.out, &body, config)
}

fn cmd_energy(a: &EnergyArgs, config: &serde_json::Value) -> CmdResult {
    let body = if let Some(test) = &a.test {
        let x1 = read_covariates_csv(std::fs::File::open(&a.input)?, &a.covariates)?;
        let x2 = read_covariates_csv(std::fs::File::open(test)?, &a.covariates)?;
        let e = energy_distance(&x1, &x2)?;
        let p = if a.permutations > 0 {
            Some(energy_permutation_test(&x1, &x2, a.permutations, a.seed)?.p_value())
        } else {
            None
        };
        match a.out.format {
            Format::Json => serde_json::to_string_pretty(&json!({"energy": e.value, "n1": e.n1, "n2": e.n2, "p_value": p}))? + "\n",
            Format::Csv => csv_table(
                &["energy", "n1", "n2", "p_value"],
                [vec![num(e.value), e.n1.to_string(), e.n2.to_string(), p.map_or_else(|| "NA".into(), num)]],
            ),
        }
    } else {
        if a.covariates.is_empty() {
            return Err(Failure {
                code: 64,
                message: "environment mode needs --covariates".into(),
            });
        }
        let d = load_csv(
            &a.input,
            &CsvSchema {
                response: a.response.clone(),
                env: a.env.clone(),
                covariates: a.covariates.clone(),
                add_intercept: false,
            },
        )?;
        let m = energy_matrix(&d, a.covariates_only)?;
        let ranking = peculiarity_ranking(&m);
        let labels = d.labels();
        match a.out.format {
            Format::Json => {
                let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
                let ranked: Vec<&str> = ranking.iter().map(|&i| labels[i].as_str()).collect();
                serde_json::to_string_pretty(&json!({"labels": labels, "matrix": rows, "peculiarity_ranking": ranked}))? + "\n"
            }
            Format::Csv => {
                let mut header = vec!["env"];
                header.extend(labels.iter().map(String::as_str));
                header.push("peculiarity_rank");
                let rank_of = |i: usize| ranking.iter().position(|&r| r == i).unwrap() + 1;
                csv_table(
                    &header,
                    (0..m.nrows()).map(|i| {
                        let mut r = vec![labels[i].clone()];
                        r.extend(m.row(i).iter().map(|&v| num(v)));
                        r.push(rank_of(i).to_string());
                        r
                    }),
                )
            }
        }
    };
    emit(&a.out, &body, config)
}

fn cmd_simulate(a: &SimulateArgs, config: &serde_json::Value) -> CmdResult {
    let mut cfg = SimulationConfig::multienv_preset(a.seed);
    if let Some(n) = a.n {
        cfg.n_per_env = vec![n; cfg.z_envs];
    }
    if let Some(s1) = a.s1 {
        cfg.s1 = s1;
    }
    if let Some(s2) = a.s2 {
        cfg.s2 = s2;
    }
    let (body, extra) = match a.scenario {
        Scenario::Multienv => {
            let sim = simulate_multienv(&cfg)?;
            if a.out.format == Format::Json {
                return Err(Failure {
                    code: 64,
                    message: "multienv writes CSV only".into(),
                });
            }
            let mut buf = Vec::new();
            sim.dataset.write_csv(&mut buf, "env", "y")?;
            (String::from_utf8(buf).expect("csv output is utf-8"), json!({"simulation": cfg, "truth": sim.truth}))
        }
        Scenario::Sweep => {
            let shift = UnivariateShift {
                n_train: a.n.unwrap_or(300),
                n_test: a.n.unwrap_or(300),
                ..Default::default()
            };
            let opts = BenchmarkOptions {
                refit_per_replicate: a.refit_per_replicate,
                ..Default::default()
            };
            let r = energy_benchmark(&shift, &a.grid, a.replicates, a.seed, &opts)?;
            (sweep_body(&r, a.out.format)?, json!({"shift": shift, "options": opts}))
        }
        Scenario::MseSweep => {
            let r = mse_benchmark(&cfg, &a.grid, a.replicates, 200)?;
            (sweep_body(&r, a.out.format)?, json!({"simulation": cfg}))
        }
    };
    let mut full = config.clone();
    full["resolved"] = extra;
    emit(&a.out, &body, &full)
}

fn sweep_body(r: &geninv::simulation::SweepResult, format: Format) -> CmdResult<String> {
    Ok(match format {
        Format::Json => serde_json::to_string_pretty(r)? + "\n",
        Format::Csv => {
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            String::from_utf8(buf).expect("csv output is utf-8")
        }
    })
}

fn cmd_coverage(a: &CoverageArgs, config: &serde_json::Value) -> CmdResult {
    let mut cfg = SimulationConfig::coverage_preset(a.seed);
    if let Some(n) = a.n {
        cfg.n_per_env = vec![n; cfg.z_envs];
    }
    let r = coverage_study(&cfg, a.replicates, a.level, a.omega_form.into())?;
    eprintln!("coverage {:?}, relative Frobenius gap {}", r.coverage, num(r.rel_frobenius));
    let body = match a.out.format {
        Format::Json => serde_json::to_string_pretty(&r)? + "\n",
        Format::Csv => {
            let mut buf = Vec::new();
            r.write_csv(&mut buf)?;
            String::from_utf8(buf).expect("csv output is utf-8")
        }
    };
    let mut full = config.clone();
    full["resolved"] = json!({ "simulation": cfg });
    emit(&a.out, &body, &full)
}

fn run(cli: &Cli) -> CmdResult {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| Failure {
            code: 1,
            message: e.to_string(),
        })?;
    }
    let config = serde_json::to_value(cli)?;
    match &cli.command {
        Command::Fit(a) => cmd_fit(a, &config),
        Command::Predict(a) => cmd_predict(a, &config),
        Command::SelectSources(a) => cmd_select(a, &config),
        Command::Energy(a) => cmd_energy(a, &config),
        Command::Simulate(a) => cmd_simulate(a, &config),
        Command::Coverage(a) => cmd_coverage(a, &config),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 64 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
