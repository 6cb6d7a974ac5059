use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use malaria_cli::config::{Origin, RunConfig};
use malaria_cli::{commands, CliError, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use malaria_core::metrics::{render_report, ReportFormat};

#[derive(Parser)]
#[command(
    name = "malaria",
    version,
    about = "Train, evaluate and compare blood-cell classifiers"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one architecture and evaluate it on the test split.
    Train {
        #[command(flatten)]
        run: RunFlags,
        /// Continue from a checkpoint until train.epochs epochs are done.
        #[arg(long, value_name = "PATH")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split of the configured data.
    Evaluate {
        #[command(flatten)]
        run: RunFlags,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: Format,
    },
    /// Train every architecture in compare.architectures on one shared split.
    Compare {
        #[command(flatten)]
        run: RunFlags,
        /// Comma-separated architecture names (overrides compare.architectures).
        #[arg(long, value_name = "NAMES")]
        archs: Option<String>,
        /// Train architectures on separate threads.
        #[arg(long)]
        parallel: bool,
    },
    /// Finite-difference check of every layer kind's gradients.
    Gradcheck,
    /// Check parameter counts of the architectures against known anchors.
    Paramcheck {
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args)]
struct RunFlags {
    /// Config file of `key = value` lines.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "NAME")]
    arch: Option<String>,
    /// Corpus root holding Parasitized/ and Uninfected/.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Use N synthetic images instead of the corpus.
    #[arg(long, value_name = "N")]
    synthetic: Option<usize>,
    #[arg(long, value_name = "K")]
    epochs: Option<usize>,
    #[arg(long, value_name = "S")]
    seed: Option<u64>,
    #[arg(long, value_name = "R")]
    scale: Option<f64>,
    #[arg(long, value_name = "PX")]
    input_size: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Deterministic kernels (true or false).
    #[arg(long, value_name = "BOOL", num_args = 0..=1, default_missing_value = "true")]
    deterministic: Option<bool>,
    /// Any config key, as KEY=VALUE. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl RunFlags {
    /// Defaults, then the config file, then flags.
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        let mut pairs: Vec<(String, String)> = Vec::new();
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| {
                CliError::config(None, format!("--set expects KEY=VALUE, got {s:?}"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut flag = |key: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((key.to_string(), v));
            }
        };
        flag("model.arch", self.arch.clone());
        flag(
            "data.root",
            self.data.as_ref().map(|p| p.display().to_string()),
        );
        flag("data.synthetic", self.synthetic.map(|n| n.to_string()));
        flag("train.epochs", self.epochs.map(|n| n.to_string()));
        flag("train.seed", self.seed.map(|n| n.to_string()));
        flag("model.scale", self.scale.map(|n| n.to_string()));
        flag("model.input_size", self.input_size.map(|n| n.to_string()));
        flag(
            "output.dir",
            self.out.as_ref().map(|p| p.display().to_string()),
        );
        flag(
            "train.deterministic",
            self.deterministic.map(|b| b.to_string()),
        );
        for (k, v) in pairs {
            cfg.set(&k, &v, Origin::Flag)
                .map_err(|m| CliError::config(None, m))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { run, resume } => {
            let cfg = run.resolve()?;
            let data = commands::load_data(&cfg)?;
            let out = commands::train(&cfg, &data, resume.as_deref())?;
            let rows = [(out.arch.display_name().to_string(), out.report)];
            print!("{}", render_report(&rows, ReportFormat::Table)?);
            println!("outputs written to {}", out.out_dir.display());
        }
        Command::Evaluate {
            run,
            checkpoint,
            format,
        } => {
            let cfg = run.resolve()?;
            let (arch, report) = commands::evaluate(&cfg, &checkpoint)?;
            let format = match format {
                Format::Table => ReportFormat::Table,
                Format::Csv => ReportFormat::Csv,
            };
            print!(
                "{}",
                render_report(&[(arch.display_name().to_string(), report)], format)?
            );
        }
        Command::Compare {
            run,
            archs,
            parallel,
        } => {
            let mut cfg = run.resolve()?;
            if let Some(a) = archs {
                cfg.set("compare.architectures", &a, Origin::Flag)
                    .map_err(|m| CliError::config(None, m))?;
            }
            if parallel {
                cfg.set("compare.parallel", "true", Origin::Flag)
                    .map_err(|m| CliError::config(None, m))?;
            }
            let data = commands::load_data(&cfg)?;
            let out = commands::compare(&cfg, &data)?;
            print!("{}", render_report(&out.rows(), ReportFormat::Table)?);
            println!("outputs written to {}", cfg.output_dir.display());
        }
        Command::Gradcheck => {
            let (text, ok) = commands::gradcheck_report(None)?;
            print!("{text}");
            if !ok {
                return Err(CliError::Check("gradient check failures".to_string()));
            }
        }
        Command::Paramcheck { scale } => {
            if !(scale > 0.0 && scale.is_finite()) {
                return Err(CliError::config(
                    None,
                    format!("scale must be positive, got {scale}"),
                ));
            }
            let (text, ok) = commands::paramcheck_report(scale)?;
            print!("{text}");
            if !ok {
                return Err(CliError::Check("parameter anchor mismatch".to_string()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            let code = e.exit_code();
            debug_assert!(code == EXIT_CONFIG || code == EXIT_RUNTIME);
            ExitCode::from(code as u8)
        }
    }
}
