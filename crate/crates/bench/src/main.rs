use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use moment_filter::quadrature::Repair;
use moment_filter_bench::config::{ConfigError, ExperimentConfig};
use moment_filter_bench::{estimate, experiment, io, rule_from_json};

#[derive(Parser)]
#[command(name = "mfbench", version, about = "Moment-filter experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Quadrature rule of a moment-set JSON file, as CSV.
    Quad {
        /// Moment-set JSON.
        input: PathBuf,
        /// Clip Gram pivots at this epsilon instead of failing.
        #[arg(long)]
        ldl_clip: Option<f64>,
    },
    /// Simulate the configured model and write one dataset CSV per run.
    Simulate,
    /// Run the configured estimators on one run.
    Filter {
        #[arg(long, default_value_t = 0)]
        run: usize,
        /// Also dump the filtering moment sets as JSON.
        #[arg(long)]
        moments_json: bool,
    },
    /// Run the full Monte Carlo experiment.
    Bench,
    /// Estimate parameters by maximum likelihood on every run.
    Estimate,
}

enum Failure {
    Config(ConfigError),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast::<ConfigError>() {
            Ok(c) => Failure::Config(c),
            Err(e) => Failure::Other(e),
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config(ConfigError::Invalid("--config is required for this command".into())))?;
    let mut cfg = ExperimentConfig::load(path).map_err(Failure::Config)?;
    if let Some(seed) = cli.seed {
        cfg.mc.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Quad { input, ldl_clip } => {
            let text = std::fs::read_to_string(input).map_err(anyhow::Error::from)?;
            let repair = ldl_clip.map_or(Repair::FailFast, |epsilon| Repair::LdlClip { epsilon });
            let rule = rule_from_json(&text, repair)?;
            match &cli.out {
                Some(dir) => {
                    std::fs::create_dir_all(dir).map_err(anyhow::Error::from)?;
                    let f = std::fs::File::create(dir.join("rule.csv")).map_err(anyhow::Error::from)?;
                    io::write_rule(f, &rule).map_err(anyhow::Error::from)?;
                }
                None => io::write_rule(std::io::stdout().lock(), &rule).map_err(anyhow::Error::from)?,
            }
        }
        Command::Simulate => {
            let cfg = load_config(cli)?;
            let model = cfg.build_model().map_err(Failure::Config)?;
            std::fs::create_dir_all(&cfg.output.dir).map_err(anyhow::Error::from)?;
            for run in 0..cfg.mc.runs {
                let data = experiment::simulate_run(&cfg, &model, run).map_err(anyhow::Error::from)?;
                experiment::write_dataset(&cfg, &cfg.output.dir, &model, run, &data)?;
            }
        }
        Command::Filter { run, moments_json } => {
            let mut cfg = load_config(cli)?;
            cfg.output.moments_json |= moments_json;
            if *run >= cfg.mc.runs {
                return Err(Failure::Config(ConfigError::Invalid(format!(
                    "run {run} is outside mc.runs = {}",
                    cfg.mc.runs
                ))));
            }
            std::fs::create_dir_all(&cfg.output.dir).map_err(anyhow::Error::from)?;
            let (data, result) = experiment::run_single(&cfg, *run)?;
            let model = cfg.build_model().map_err(Failure::Config)?;
            experiment::write_dataset(&cfg, &cfg.output.dir, &model, *run, &data)?;
            experiment::write_run(&cfg, &cfg.output.dir, &data, &result)?;
            for e in &result.estimators {
                println!("{}\tnll {}\tdiverged {}", e.label(), e.nll, e.diverged());
            }
        }
        Command::Bench => {
            let cfg = load_config(cli)?;
            let out = experiment::run_experiment(&cfg, cli.threads)?;
            for e in &out.summary.estimators {
                let err = e.error.as_ref().map_or(f64::NAN, |s| s.median);
                println!(
                    "{}\tmedian error {err:e}\tdivergences {}/{}",
                    e.label, e.divergences, e.runs
                );
            }
        }
        Command::Estimate => {
            let cfg = load_config(cli)?;
            let out = estimate::estimate_parameters(&cfg, cli.threads)?;
            let s = &out.summary;
            for (name, st) in s.params.iter().zip(&s.estimates) {
                let med = st.as_ref().map_or(f64::NAN, |s| s.median);
                println!("{name}\tmedian estimate {med}");
            }
            println!("divergences {}/{}", s.divergences, s.runs);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
