use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gop_core::data::{gaussian_blobs, pure_noise, two_moons, write_csv, xor_blobs, CsvOptions, LabelColumn};
use gop_core::harness::{
    cmd_eval, cmd_flops, cmd_params, cmd_report, cmd_train, cmd_train_seeds, CliError, EvalSource, Method, RunConfig,
    TableFormat,
};
use gop_core::GopError;

#[derive(Parser)]
#[command(name = "gop", version, about = "Grow, evaluate and inspect GOP networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Grow and train a network from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// hemlgop, homlgop, hemlrn, homlrn, pop or pmlp.
        #[arg(long)]
        variant: Option<String>,
        /// Comma-separated seeds; one run per seed plus a median summary.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Layer widths for pop/pmlp, e.g. 200,200.
        #[arg(long, value_delimiter = ',')]
        template: Vec<usize>,
        #[arg(long)]
        target_mse: Option<String>,
        /// Dotted config override, e.g. progression.eps_n=1e-3.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Print accuracy, loss, params and flops of a model as JSON.
    Eval {
        #[arg(long)]
        model: PathBuf,
        /// Rebuild the test split of this run configuration.
        #[arg(long, conflicts_with = "data")]
        config: Option<PathBuf>,
        /// Evaluate on every row of a CSV file.
        #[arg(long, required_unless_present = "config")]
        data: Option<PathBuf>,
        #[arg(long)]
        label_column: Option<String>,
        #[arg(long)]
        no_header: bool,
    },
    /// Operator distribution and per-step improvement tables.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value = "markdown")]
        format: Format,
    },
    /// Per-sample inference FLOPs of a model.
    Flops {
        #[arg(long)]
        model: PathBuf,
    },
    /// Parameter count of a model.
    Params {
        #[arg(long)]
        model: PathBuf,
    },
    /// Write a synthetic dataset as CSV.
    Synth {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0.2)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Markdown,
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    TwoMoons,
    Xor,
    Blobs,
    Noise,
}

fn config_error(msg: String) -> CliError {
    CliError::Config(GopError::Config(msg))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            variant,
            seeds,
            out,
            template,
            target_mse,
            mut overrides,
        } => {
            let base = RunConfig::load(&config).map_err(CliError::Config)?;
            if let Some(v) = variant {
                let m = Method::parse(&v).map_err(CliError::Config)?;
                overrides.insert(0, format!("variant={}", serde_json_string(&m)));
            }
            if !template.is_empty() {
                let list: Vec<String> = template.iter().map(usize::to_string).collect();
                overrides.push(format!("pop.template=[{}]", list.join(",")));
            }
            if let Some(t) = target_mse {
                let value = if t.parse::<f64>().is_ok() { t } else { format!("\"{t}\"") };
                overrides.push(format!("pop.target_mse={value}"));
            }
            let mut cfg = base.with_overrides(&overrides).map_err(CliError::Config)?;
            if let Some(o) = out {
                cfg.out = o;
            }
            if seeds.is_empty() {
                let outcome = cmd_train(&cfg)?;
                eprintln!(
                    "wrote {} (params {}, flops {})",
                    outcome.out_dir.display(),
                    outcome.report.params(),
                    outcome.report.flops()
                );
            } else {
                let summary = cmd_train_seeds(&cfg, &seeds)?;
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            }
        }
        Command::Eval {
            model,
            config,
            data,
            label_column,
            no_header,
        } => {
            let out = match (config, data) {
                (Some(c), _) => {
                    let cfg = RunConfig::load(&c).map_err(CliError::Config)?;
                    cmd_eval(&model, EvalSource::Run(&cfg))?
                }
                (None, Some(d)) => {
                    let label_column = match label_column {
                        None => LabelColumn::default(),
                        Some(s) => s.parse().map(LabelColumn::Index).unwrap_or(LabelColumn::Name(s)),
                    };
                    let opts = CsvOptions {
                        label_column,
                        header: !no_header,
                        standardize_features: false,
                    };
                    cmd_eval(&model, EvalSource::Csv(&d, &opts))?
                }
                (None, None) => return Err(config_error("eval needs --config or --data".into())),
            };
            println!("{}", serde_json::to_string_pretty(&out).expect("eval output serializes"));
        }
        Command::Report { report, format } => {
            let format = match format {
                Format::Csv => TableFormat::Csv,
                Format::Markdown => TableFormat::Markdown,
            };
            let tables = cmd_report(&report, format)?;
            println!("{}", tables.operators);
            println!("{}", tables.steps);
        }
        Command::Flops { model } => println!("{}", cmd_flops(&model)?),
        Command::Params { model } => println!("{}", cmd_params(&model)?),
        Command::Synth {
            kind,
            n,
            noise,
            seed,
            out,
        } => {
            let ds = match kind {
                SynthKind::TwoMoons => two_moons(n, noise, seed),
                SynthKind::Xor => xor_blobs(n, noise, seed),
                SynthKind::Blobs => gaussian_blobs(n, 2, 2, 4.0, noise.max(1e-3), seed),
                SynthKind::Noise => pure_noise(n, 2, 2, seed),
            };
            write_csv(&ds, &out).map_err(CliError::Runtime)?;
        }
    }
    Ok(())
}

fn serde_json_string(m: &Method) -> String {
    serde_json::to_string(m).expect("method serializes")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
