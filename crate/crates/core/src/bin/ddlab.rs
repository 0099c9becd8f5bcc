use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ddlab::descent::DdParams;
use ddlab::experiment::{
    compare_se, run_experiment, run_se_only, write_atomic, ExperimentConfig, ExperimentSummary,
};
use ddlab::gradcheck::finite_diff_check;
use ddlab::model::{make_model_kind, ModelKind};
use ddlab::quadrature::ExpectationEngine;
use ddlab::seeds;
use ddlab::state_evolution::{
    pure_dd_se_step, read_se_csv, se_init, se_step, signalless_closed_form, write_se_csv, SeInit,
};
use ddlab::Error;

#[derive(Parser)]
#[command(
    name = "ddlab",
    version,
    about = "DD gradient descent experiments and state evolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write trajectories, SE and summary.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set n=500` or `--set engine.n_samples=1000`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Run only the state evolution of an experiment.
    Se {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Output directory; the first SE table goes to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare an empirical summary against an SE trajectory.
    Compare {
        #[arg(long)]
        emp: PathBuf,
        #[arg(long)]
        se: PathBuf,
        /// Variant in the summary; the first one by default.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Gradient checks and SE oracle self-tests.
    Check,
}

enum Failure {
    Config(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Config(e.to_string())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            set,
            out,
            workers,
        } => cmd_run(config, set, out, workers),
        Command::Se { config, set, out } => cmd_se(config, set, out),
        Command::Compare { emp, se, variant } => cmd_compare(emp, se, variant),
        Command::Check => cmd_check(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(2)
        }
    }
}

fn cmd_run(
    config: PathBuf,
    set: Vec<String>,
    out: PathBuf,
    workers: Option<usize>,
) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_file(&config, &set)?;
    let outcome = run_experiment(&cfg, &out, workers)?;
    println!("{}", outcome.dir.display());
    for v in &outcome.summary.variants {
        log::info!(
            "{}: {}/{} replications completed",
            v.name,
            v.completed,
            cfg.replications
        );
    }
    if outcome.numerical_failure() {
        return Err(Failure::Numerical(format!(
            "see {}",
            outcome.dir.join("summary.json").display()
        )));
    }
    Ok(())
}

fn cmd_se(config: PathBuf, set: Vec<String>, out: Option<PathBuf>) -> Result<(), Failure> {
    let cfg = ExperimentConfig::from_file(&config, &set)?;
    let tables = run_se_only(&cfg)?;
    if tables.is_empty() {
        return Err(Failure::Config("experiment has no DD variant".into()));
    }
    match out {
        Some(out) => {
            let dir = ddlab::experiment::output_dir(&cfg, &out)?;
            write_atomic(&dir.join("manifest.toml"), cfg.to_toml()?.as_bytes())?;
            for (name, records) in &tables {
                let mut buf = Vec::new();
                write_se_csv(records, &mut buf)?;
                write_atomic(&dir.join(name).join("se.csv"), &buf)?;
            }
            println!("{}", dir.display());
        }
        None => {
            let mut buf = Vec::new();
            write_se_csv(&tables[0].1, &mut buf)?;
            std::io::stdout()
                .write_all(&buf)
                .map_err(|e| Failure::Config(e.to_string()))?;
        }
    }
    Ok(())
}

fn cmd_compare(emp: PathBuf, se: PathBuf, variant: Option<String>) -> Result<(), Failure> {
    let text = fs::read_to_string(&emp).map_err(Error::from)?;
    let summary: ExperimentSummary = serde_json::from_str(&text).map_err(Error::from)?;
    let v = match &variant {
        Some(name) => summary
            .variant(name)
            .ok_or_else(|| Failure::Config(format!("no variant `{name}` in summary")))?,
        None => summary
            .variants
            .first()
            .ok_or_else(|| Failure::Config("summary has no variants".into()))?,
    };
    let table = read_se_csv(fs::File::open(&se).map_err(Error::from)?)?;
    let report = compare_se(v, &table)?;
    println!(
        "{}",
        serde_json::to_string_pretty(&report).map_err(Error::from)?
    );
    Ok(())
}

fn cmd_check() -> Result<(), Failure> {
    let mut ok = true;
    let mut rng = seeds::rng(0, &[]);
    use rand::Rng;
    for kind in ModelKind::ALL {
        let width = if kind == ModelKind::XorBilinear {
            2
        } else if kind == ModelKind::Mlp2Tanh {
            3
        } else {
            1
        };
        let model = make_model_kind(kind, width)?;
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let h: Vec<f64> = (0..width).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a: Vec<f64> = (0..model.head_width())
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            let y = if rng.random::<bool>() { 1.0 } else { 0.0 };
            worst = worst.max(finite_diff_check(model.as_ref(), &h, y, &a, 1e-5)?.max());
        }
        let pass = worst < 1e-5;
        ok &= pass;
        println!(
            "gradcheck {kind:<13} max error {worst:.2e} {}",
            if pass { "ok" } else { "FAIL" }
        );
    }

    let spec = ddlab::mixture::build_signalless_spec(10)?;
    let engine = ExpectationEngine::gauss_hermite(32)?;
    for &(eta, alpha) in &[(0.01, 0.25), (0.05, 1.0)] {
        let oracle = signalless_closed_form(1.0, eta, alpha, 1.0, 20)?;
        let mut generic = se_init(SeInit::standard(&spec, 1, &[]))?;
        let mut pure = generic.clone();
        let mut worst: f64 = 0.0;
        for (t, point) in oracle.iter().enumerate() {
            let t = t + 1;
            worst = worst
                .max((generic.omega(t, t)[(0, 0)] - point.omega).abs())
                .max((pure.omega(t, t)[(0, 0)] - point.omega).abs());
            if t < oracle.len() {
                generic = se_step(
                    &generic,
                    &ddlab::model::LossGradient(&ddlab::model::LinearMse),
                    DdParams::pure(eta),
                    alpha,
                    &engine,
                )?;
                pure = pure_dd_se_step(&pure, &ddlab::model::LinearMse, eta, alpha, &engine)?;
            }
        }
        let pass = worst < 1e-10;
        ok &= pass;
        println!(
            "se oracle eta={eta} alpha={alpha} max error {worst:.2e} {}",
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Numerical("self-test failed".into()))
    }
}
