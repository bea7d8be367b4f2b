//! Command-line front end: `run`, `verify` and `bench`.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmv_core::harness::{run_experiment, ExperimentConfig, Method, ResultTable};
use mmv_core::verify::{run_suite, standard_suite, VerifyOptions};

#[derive(Parser)]
#[command(name = "mmv", version, about = "Joint-sparse MMV recovery experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo NMSE sweep; writes trial rows and aggregates as CSV.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Trial CSV path; aggregates go to the matching `.agg.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Cross-checks the two ℓ2,1 solution routes on the randomized suite.
    Verify {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Mean wall time and sweeps per method, dictionary and SNR.
    Bench {
        #[command(flatten)]
        exp: ExperimentArgs,
    },
}

#[derive(Args)]
struct ExperimentArgs {
    /// Start from the full-scale simulation setup instead of the small default.
    #[arg(long)]
    full: bool,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    m_fraction: Option<f64>,
    /// Samples per trial.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// `start:step:stop` or a comma-separated list, in dB.
    #[arg(long)]
    snr: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    xi_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    xi_max: Option<f64>,
    /// Comma-separated dictionary sizes.
    #[arg(long)]
    grid_sizes: Option<String>,
    /// Comma-separated subset of oracle-mmse, l21-cd, l21-direct, ml.
    #[arg(long)]
    methods: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// `distinct` or `independent` row selection.
    #[arg(long)]
    selection: Option<String>,
    /// SNR per `complex` sample or per `real` part.
    #[arg(long)]
    noise: Option<String>,
    /// Record wall-clock times in the CSV.
    #[arg(long)]
    timings: bool,
    /// `key=value` file applied after the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ExperimentArgs {
    fn settings(&self) -> Vec<(&'static str, String)> {
        let mut out = Vec::new();
        let mut put = |key: &'static str, value: Option<String>| {
            if let Some(v) = value {
                out.push((key, v));
            }
        };
        put("n", self.n.map(|v| v.to_string()));
        put("m-fraction", self.m_fraction.map(|v| v.to_string()));
        put("t", self.t.map(|v| v.to_string()));
        put("trials", self.trials.map(|v| v.to_string()));
        put("snr", self.snr.clone());
        put("xi-min", self.xi_min.map(|v| v.to_string()));
        put("xi-max", self.xi_max.map(|v| v.to_string()));
        put("grid-sizes", self.grid_sizes.clone());
        put("methods", self.methods.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("selection", self.selection.clone());
        put("noise", self.noise.clone());
        put("timings", self.timings.then(|| "true".to_string()));
        out
    }

    fn config(&self) -> Result<ExperimentConfig, String> {
        let mut cfg = if self.full { ExperimentConfig::full() } else { ExperimentConfig::default() };
        for (key, value) in self.settings() {
            cfg.set(key, &value).map_err(|e| format!("--{key}: {e}"))?;
        }
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| format!("--config {}: {e}", path.display()))?;
            cfg.apply_settings(&text).map_err(|e| format!("--config {}: {e}", path.display()))?;
        }
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }
}

fn usage_error(msg: &str) -> ExitCode {
    eprintln!("error: {msg}\n\nFor more information, try '--help'.");
    ExitCode::from(2)
}

fn experiment(exp: &ExperimentArgs, timings: bool) -> Result<ResultTable, ExitCode> {
    let mut cfg = exp.config().map_err(|e| usage_error(&e))?;
    cfg.timings |= timings;
    run_experiment(&cfg).map_err(|e| {
        eprintln!("error: {e}");
        ExitCode::from(1)
    })
}

fn report_failures(table: &ResultTable) -> ExitCode {
    if table.failures.is_empty() {
        return ExitCode::SUCCESS;
    }
    eprintln!("{} failed cell(s):", table.failures.len());
    for f in &table.failures {
        eprintln!("  {f}");
    }
    ExitCode::from(1)
}

fn run(exp: &ExperimentArgs, out: Option<&PathBuf>) -> ExitCode {
    let table = match experiment(exp, false) {
        Ok(t) => t,
        Err(code) => return code,
    };
    if let Some(path) = out {
        if let Err(e) = table.write_csv(path) {
            eprintln!("error: writing {}: {e}", path.display());
            return ExitCode::from(1);
        }
    }
    print!("{}", table.to_csv().1);
    report_failures(&table)
}

fn bench(exp: &ExperimentArgs) -> ExitCode {
    let table = match experiment(exp, true) {
        Ok(t) => t,
        Err(code) => return code,
    };
    let mut cells: BTreeMap<(Method, usize, String), (f64, f64, usize)> = BTreeMap::new();
    for r in &table.records {
        let e = cells.entry((r.method, r.grid_size, format!("{}", r.snr_db))).or_default();
        e.0 += r.wall_ms;
        e.1 += r.sweeps as f64;
        e.2 += 1;
    }
    println!("method,grid_size,snr_db,mean_wall_ms,mean_sweeps,trials");
    for ((method, g, snr), (ms, sweeps, k)) in cells {
        println!("{method},{g},{snr},{:.3},{:.1},{k}", ms / k as f64, sweeps / k as f64);
    }
    report_failures(&table)
}

fn verify(seed: u64) -> ExitCode {
    match run_suite(&standard_suite(seed), &VerifyOptions::default()) {
        Ok(report) => {
            println!("{report}");
            if report.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.command {
        Command::Run { exp, out } => run(exp, out.as_ref()),
        Command::Verify { seed } => verify(*seed),
        Command::Bench { exp } => bench(exp),
    }
}
