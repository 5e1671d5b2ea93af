use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fasvit_cli::commands::{self, BenchMode, EvalInput, TauSource, TrainArgs};
use fasvit_cli::config::{Overrides, RunConfig, OUT_ENV};

#[derive(Parser)]
#[command(
    name = "fasvit",
    version,
    about = "Face anti-spoofing with a register ViT: data, training, cross-domain benchmarks"
)]
struct Cli {
    /// TOML file layered over the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Leave wall-clock timings out of outputs.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output root [default: $FASVIT_OUT or ./runs].
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// -v info, -vv debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain dataset.
    Synth {
        /// Target directory [default: <out>/synth-<fingerprint>].
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Train on source domains and keep the best checkpoint.
    Train {
        /// Dataset directory holding manifest.csv.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        test_domain: Option<String>,
        /// Comma-separated; defaults to every domain except the test domain.
        #[arg(long, value_delimiter = ',')]
        train_domains: Vec<String>,
        /// Validate the configuration and print the parameter count.
        #[arg(long)]
        dry_run: bool,
        /// Continue from last.ckpt in the run directory.
        #[arg(long)]
        resume: bool,
    },
    /// Metrics from a score file, or from a checkpoint on one domain.
    Eval {
        #[arg(long, conflicts_with = "checkpoint")]
        scores: Option<PathBuf>,
        #[arg(long, requires_all = ["data", "domain"])]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        domain: Option<String>,
        /// Fixed decision threshold on p_live.
        #[arg(long, conflicts_with = "calibration")]
        tau: Option<f64>,
        /// Score file whose EER point sets the threshold [default: calibration.csv beside the input].
        #[arg(long)]
        calibration: Option<PathBuf>,
        /// Write the ROC series (far,tpr) here.
        #[arg(long)]
        roc: Option<PathBuf>,
        /// Directory for scores.csv and report.json.
        #[arg(long)]
        save: Option<PathBuf>,
    },
    /// Run every protocol of a benchmark and print the summary table.
    Benchmark {
        /// Dataset directory; a synthetic one is generated when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "mico")]
        mode: BenchMode,
    },
    /// Summary table and plot series for a finished benchmark directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn run(cli: Cli) -> fasvit::Result<()> {
    let flags = Overrides {
        seed: cli.seed,
        deterministic: cli.deterministic,
        out: cli.out.clone(),
    };
    if let Command::Report { run } = &cli.command {
        return commands::report(run).map(|_| ());
    }
    let cfg = RunConfig::load(cli.config.as_deref(), &flags)?;
    log::debug!(
        "config {} (output root {}, ${OUT_ENV})",
        cfg.fingerprint(),
        cfg.out.display()
    );
    match &cli.command {
        Command::Synth { dir } => commands::synth(&cfg, dir.as_deref()).map(|_| ()),
        Command::Train {
            data,
            test_domain,
            train_domains,
            dry_run,
            resume,
        } => commands::train(
            &cfg,
            &TrainArgs {
                data: data.as_deref(),
                test_domain: test_domain.as_deref(),
                train_domains,
                dry_run: *dry_run,
                resume: *resume,
            },
        )
        .map(|_| ()),
        Command::Eval {
            scores,
            checkpoint,
            data,
            domain,
            tau,
            calibration,
            roc,
            save,
        } => {
            let input = match (scores, checkpoint, data, domain) {
                (Some(s), None, _, _) => EvalInput::Scores(s),
                (None, Some(c), Some(d), Some(dom)) => EvalInput::Checkpoint {
                    checkpoint: c,
                    data: d,
                    domain: dom,
                },
                _ => {
                    return Err(fasvit::Error::Config(
                        "eval needs --scores or --checkpoint with --data and --domain".into(),
                    ))
                }
            };
            let tau = match (tau, calibration) {
                (Some(t), _) => Some(TauSource::Fixed(*t)),
                (None, Some(c)) => Some(TauSource::Calibration(c.clone())),
                _ => None,
            };
            let report = commands::eval(&cfg, input, tau, roc.as_deref(), save.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            Ok(())
        }
        Command::Benchmark { data, mode } => commands::benchmark(&cfg, data.as_deref(), *mode).map(|_| ()),
        Command::Report { .. } => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 1 })
        }
    }
}
