use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use dpgeo::{presets, run_config, ExperimentConfig, LabError, LabResult};

#[derive(Parser)]
#[command(name = "dpgeo", version, about = "Preset experiments on d_p distances, warped metrics, entropy and Ricci flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a preset and write summary.json plus CSV tables.
    Run {
        #[command(flatten)]
        target: Target,
        /// Exit with status 1 if any check fails.
        #[arg(long)]
        check: bool,
    },
    /// Same as `run --check`.
    Check {
        #[command(flatten)]
        target: Target,
    },
    /// List the presets.
    List,
    /// Print a preset's description and its default config file.
    Describe { preset: String },
}

#[derive(Args)]
struct Target {
    /// Preset name; optional when --config names the experiment.
    preset: Option<String>,
    /// TOML experiment file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override a parameter, e.g. `--set cells=[64,128]` or `--set dp.max_iter=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (the DPGEO_OUTPUT_DIR environment variable takes precedence).
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Shorthand for the `p` parameter.
    #[arg(long)]
    p: Option<f64>,
    /// Shorthand for the `n` parameter.
    #[arg(long)]
    n: Option<i64>,
    /// Shorthand for `delta` (or a one-point `deltas` sweep).
    #[arg(long)]
    delta: Option<f64>,
    /// Shorthand for `epsilon` (or a one-point `epsilons` sweep).
    #[arg(long)]
    eps: Option<f64>,
    /// Shorthand for `alpha` (or a one-point `alphas` sweep).
    #[arg(long)]
    alpha: Option<f64>,
}

impl Target {
    fn resolve(&self) -> LabResult<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), preset) => {
                let cfg = ExperimentConfig::load(path)?;
                if let Some(name) = preset.as_ref().filter(|n| **n != cfg.experiment) {
                    return Err(LabError::Schema(format!("{} is a '{}' config, not '{name}'", path.display(), cfg.experiment)));
                }
                cfg
            }
            (None, Some(name)) => ExperimentConfig::for_preset(name)?,
            (None, None) => return Err(LabError::Schema("give a preset name or --config".into())),
        };
        let float = toml::Value::Float;
        if let Some(p) = self.p {
            cfg.set_shorthand("p", "ps", float(p))?;
        }
        if let Some(n) = self.n {
            cfg.set_shorthand("n", "ns", toml::Value::Integer(n))?;
        }
        if let Some(d) = self.delta {
            cfg.set_shorthand("delta", "deltas", float(d))?;
        }
        if let Some(e) = self.eps {
            cfg.set_shorthand("epsilon", "epsilons", float(e))?;
        }
        if let Some(a) = self.alpha {
            cfg.set_shorthand("alpha", "alphas", float(a))?;
        }
        for s in &self.sets {
            cfg.set(s)?;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.output_dir {
            cfg.output_dir = Some(dir.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(target: &Target, check: bool) -> LabResult<i32> {
    let cfg = target.resolve()?;
    let t0 = Instant::now();
    let report = run_config(&cfg)?;
    for c in &report.outcome.checks {
        println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    for u in &report.outcome.unconverged {
        println!("NOT CONVERGED {u}");
    }
    eprintln!("{}: artifacts in {} ({:.1?})", cfg.experiment, report.dir.display(), t0.elapsed());
    Ok(report.exit_code(check))
}

fn dispatch(cli: Cli) -> LabResult<i32> {
    match cli.command {
        Command::Run { target, check } => run(&target, check),
        Command::Check { target } => run(&target, true),
        Command::List => {
            for p in presets::PRESETS {
                println!("{:<26} {}", p.name, p.about);
            }
            Ok(0)
        }
        Command::Describe { preset } => {
            let info = presets::info(&preset)?;
            let mut cfg = ExperimentConfig::for_preset(&preset)?;
            cfg.params = presets::default_params(&preset)?;
            println!("# {}: {}\n{}", info.name, info.about, cfg.to_toml_string());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = dispatch(cli).unwrap_or_else(|e| {
        eprintln!("dpgeo: {e}");
        e.exit_code()
    });
    ExitCode::from(code as u8)
}
