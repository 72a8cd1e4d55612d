use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use feedint::experiment::{
    replicate_figure, run_experiment, run_validators, ConfigError, ExperimentConfig, FigureId, Method, RunError,
    RunSummary, SystemKind,
};

const EXIT_CONFIG: u8 = 2;
const EXIT_DOMAIN: u8 = 3;
const EXIT_VALIDATOR: u8 = 4;

#[derive(Parser)]
#[command(name = "feedint", version, about = "Run feedback-integrator experiments and write CSV drift traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file, optionally overriding its fields.
    Run(RunArgs),
    /// Write one CSV per method curve of a figure.
    Figure {
        #[arg(long)]
        id: String,
        /// Fraction of the published horizon, in (0, 1].
        #[arg(long)]
        scale: f64,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
    /// Run the hypothesis validators for a system's standard setup.
    Check {
        #[arg(long)]
        system: String,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    h: Option<f64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    /// Comma-separated gains, e.g. `k0=50,k1=100,k2=50`.
    #[arg(long)]
    gains: Option<String>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    system: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stride: Option<usize>,
}

fn parse_gains(text: &str) -> Result<Vec<(String, f64)>, ConfigError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|pair| {
            let invalid = || ConfigError::InvalidValue {
                key: "gains".into(),
                value: pair.into(),
            };
            let (k, v) = pair.split_once('=').ok_or_else(invalid)?;
            let v: f64 = v.trim().parse().map_err(|_| invalid())?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

fn build_config(args: RunArgs) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = match &args.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => {
            let system: SystemKind = args.system.as_deref().ok_or(ConfigError::Missing("system"))?.parse()?;
            let method: Method = args.method.as_deref().ok_or(ConfigError::Missing("method"))?.parse()?;
            let t_end = args.t_end.ok_or(ConfigError::Missing("t_end"))?;
            let out = args.out.clone().ok_or(ConfigError::Missing("output"))?;
            ExperimentConfig::new(system, method, t_end, out)
        }
    };
    if let Some(s) = &args.system {
        cfg.system = s.parse()?;
    }
    if let Some(m) = &args.method {
        cfg.method = m.parse()?;
    }
    if let Some(h) = args.h {
        cfg.h = h;
    }
    if let Some(t) = args.t_end {
        cfg.t_end = t;
    }
    if let Some(out) = args.out {
        cfg.output_path = out;
    }
    if let Some(stride) = args.stride {
        cfg.sample_stride = stride;
    }
    if let Some(g) = &args.gains {
        cfg.gains.extend(parse_gains(g)?);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_summary(label: &str, s: &RunSummary) {
    let drifts: Vec<String> = s
        .metric_names
        .iter()
        .zip(&s.max_drift)
        .map(|(n, v)| format!("max {n} = {v:.6e}"))
        .collect();
    println!(
        "{label}: {} steps in {:.3} s, final V = {:.6e}, {}",
        s.steps_taken,
        s.wall_time.as_secs_f64(),
        s.final_v,
        drifts.join(", ")
    );
}

fn report(err: RunError) -> ExitCode {
    match err {
        RunError::Config(e) => {
            eprintln!("config error: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
        RunError::Domain { ref partial, .. } => {
            eprintln!("error: {err}");
            print_summary("partial run", partial);
            ExitCode::from(EXIT_DOMAIN)
        }
        RunError::Csv(e) => {
            eprintln!("cannot write trace: {e}");
            ExitCode::from(EXIT_CONFIG)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            let cfg = match build_config(args) {
                Ok(c) => c,
                Err(e) => return report(e.into()),
            };
            match run_experiment(&cfg) {
                Ok(summary) => {
                    print_summary(&format!("{} / {}", cfg.system, cfg.method), &summary);
                    println!("trace written to {}", cfg.output_path.display());
                    ExitCode::SUCCESS
                }
                Err(e) => report(e),
            }
        }
        Command::Figure { id, scale, out_dir } => {
            let id: FigureId = match id.parse() {
                Ok(id) => id,
                Err(e) => return report(RunError::Config(e)),
            };
            match replicate_figure(id, scale, &out_dir) {
                Ok(curves) => {
                    for c in &curves {
                        print_summary(&format!("{id} {} (h = {})", c.method, c.h), &c.summary);
                        println!("  -> {}", c.path.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => report(e),
            }
        }
        Command::Check { system } => {
            let system: SystemKind = match system.parse() {
                Ok(s) => s,
                Err(e) => return report(RunError::Config(e)),
            };
            match run_validators(system) {
                Ok(results) => {
                    let mut ok = true;
                    for r in &results {
                        println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                        ok &= r.passed;
                    }
                    if ok {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_VALIDATOR)
                    }
                }
                Err(e) => {
                    eprintln!("validator run failed: {e}");
                    ExitCode::from(EXIT_DOMAIN)
                }
            }
        }
    }
}
