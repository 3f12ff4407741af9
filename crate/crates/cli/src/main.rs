use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use torus_schrodinger_cli::commands::{cmd_couple, cmd_hjb_check, cmd_rates, cmd_solve, Outcome};
use torus_schrodinger_cli::config::{parse_config, ExperimentConfig};
use torus_schrodinger_cli::report::{write_text, Json};
use torus_schrodinger_cli::verify::{run_suite, SuiteOptions};
use torus_schrodinger_cli::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Solve,
    Rates,
    HjbCheck,
    Couple,
    Verify,
}

/// Entropic optimal transport on the flat torus: Sinkhorn solves, explicit
/// rates, HJB and coupling checks.
#[derive(Debug, Parser)]
#[command(name = "torus-schrodinger", version)]
struct Args {
    command: Command,
    /// Configuration file (`section.key = value` lines); optional for verify.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides `mc.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reduced path counts.
    #[arg(long)]
    quick: bool,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
}

fn load(args: &Args) -> Result<ExperimentConfig, CliError> {
    let mut config = match &args.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None if args.command == Command::Verify => ExperimentConfig::benchmark(),
        None => {
            return Err(CliError::Input(
                "--config is required for this command".into(),
            ))
        }
    };
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(o) = &args.out {
        config.out_dir = o.clone();
    }
    if args.quick {
        config.n_paths = config.n_paths.min(2000);
    }
    Ok(config)
}

fn verify(config: &ExperimentConfig, quick: bool) -> Result<Outcome, CliError> {
    let opts = SuiteOptions {
        seed: config.seed,
        quick,
    };
    let (criteria, json) = run_suite(opts)?;
    for c in &criteria {
        println!("{}", c.line());
    }
    json.write(&config.out_dir.join("verify.json"))?;
    let failed: Vec<String> = criteria
        .iter()
        .filter(|c| !c.passes())
        .map(|c| c.id.to_string())
        .collect();
    Ok(Outcome {
        pass: failed.is_empty(),
        summary: if failed.is_empty() {
            "verify: all 13 criteria pass".into()
        } else {
            format!("verify: failing criteria {}", failed.join(", "))
        },
    })
}

fn run(args: &Args) -> Result<Outcome, CliError> {
    let config = load(args)?;
    let out = config.out_dir.clone();
    match args.command {
        Command::Solve => cmd_solve(&config, &out),
        Command::Rates => cmd_rates(&config, &out),
        Command::HjbCheck => cmd_hjb_check(&config, &out),
        Command::Couple => cmd_couple(&config, &out),
        Command::Verify => verify(&config, args.quick),
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    if let Some(jobs) = args.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
        {
            eprintln!("error: cannot size the thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&args) {
        Ok(outcome) => {
            println!("{}", outcome.summary);
            if outcome.pass {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let out = args.out.clone().unwrap_or_else(|| PathBuf::from("out"));
            let mut j = Json::new("failure", None, args.seed.unwrap_or(0));
            j.text("error", &e.to_string());
            let _ = write_text(&out.join("failure.json"), &(j.to_string_pretty() + "\n"));
            ExitCode::from(2)
        }
    }
}
