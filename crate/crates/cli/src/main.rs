use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use odefuse_cli::{commands, CliError, Context, PipelineConfig};

#[derive(Parser, Debug)]
#[command(name = "odefuse", version, about = "Graph-attention neural ODE forecasting pipeline")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Overrides the config's run folder.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Clean, engineer, split and standardize the input series.
    Prepare,
    /// Rank and recursively eliminate features on the training split.
    Select,
    /// Train the network on the selected features.
    Train,
    /// Score the trained network on the test split.
    Evaluate,
    /// Train and score every path configuration.
    Ablate,
    /// Shapley attributions for one test instance plus global summaries.
    Explain {
        #[arg(long, default_value_t = 0)]
        instance: usize,
    },
    /// Seeded random search over model and training hyperparameters.
    Hyperopt {
        #[arg(long)]
        trials: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let path = cli
        .config
        .ok_or_else(|| CliError::validation("--config PATH is required"))?;
    let config = PipelineConfig::load(&path)?;
    let ctx = Context::new(config, cli.out, cli.seed);
    match cli.command {
        Command::Prepare => {
            let s = commands::prepare(&ctx)?;
            println!(
                "prepared {} features ({} train rows, {} test rows) in {}",
                s.feature_count,
                s.train_rows,
                s.test_rows,
                ctx.layout.root.display()
            );
        }
        Command::Select => {
            let r = commands::select(&ctx)?;
            println!("selected: {}", r.selected.join(", "));
        }
        Command::Train => {
            let m = commands::train(&ctx)?;
            println!(
                "trained {} epochs; best validation mse {}",
                m.epochs_run,
                m.best_val_loss.map_or("n/a".into(), |v| format!("{v:.6e}"))
            );
        }
        Command::Evaluate => {
            let e = commands::evaluate(&ctx)?;
            print!("{}", e.report.to_text("test"));
        }
        Command::Ablate => {
            let rows = commands::ablate(&ctx)?;
            print!("{}", commands::ablation_text(&rows));
        }
        Command::Explain { instance } => {
            let out = commands::explain(&ctx, instance)?;
            for (name, v) in out.summary.bar() {
                println!("{name:<28}{v:>12.6}");
            }
        }
        Command::Hyperopt { trials } => {
            let (r, _) = commands::hyperopt_cmd(&ctx, trials)?;
            println!(
                "best trial {} of {}: {:?}",
                r.best.trial,
                r.trials.len(),
                r.best.point
            );
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
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
