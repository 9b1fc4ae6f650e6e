mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Train, sample and evaluate a desk-scale mixed text/image transformer.
#[derive(Parser, Debug)]
#[command(name = "transfusion", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// JSON run configuration; omitted keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.lambda=2.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic corpus as JSON lines.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train the mixed-modal model.
    Train {
        #[arg(long)]
        out: PathBuf,
        /// Corpus file from `gen-data`; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Steps to run (defaults to the configured total).
        #[arg(long)]
        steps: Option<usize>,
        /// Continue from this checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Fit a patch codebook and train the discrete-token baseline.
    TrainBaseline {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Generate from a text prompt; `<image>` marks where an image is generated.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Compare analytic gradients with finite differences in 64-bit mode.
    Gradcheck {
        /// Check every n-th element of each parameter.
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Print the attention mask for a prompt layout.
    InspectMask {
        /// Text with `<image>` placeholders.
        #[arg(long)]
        prompt: String,
        /// Patches per image (defaults to the configured image geometry).
        #[arg(long)]
        patches: Option<usize>,
        #[arg(long)]
        causal_only: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn init_logging() {
    let level = std::env::var("TRANSFUSION_LOG_LEVEL").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new().parse_filters(&level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code == 1 {
                eprintln!("\n{}", commands::CONFIG_HELP);
            }
            return ExitCode::from(code);
        }
    };
    init_logging();
    let result = match cli.command {
        Command::GenData { out, config } => commands::gen_data(&config, &out),
        Command::Train { out, data, steps, resume, config } => {
            commands::train(&config, &out, data.as_deref(), steps, resume.as_deref())
        }
        Command::TrainBaseline { out, data, steps, config } => {
            commands::train_baseline(&config, &out, data.as_deref(), steps)
        }
        Command::Sample { checkpoint, prompt, out, config } => commands::sample(&config, &checkpoint, &prompt, &out),
        Command::Eval { checkpoint, out, config } => commands::eval(&config, &checkpoint, &out),
        Command::Gradcheck { stride, step, config } => commands::gradcheck(&config, stride, step),
        Command::InspectMask { prompt, patches, causal_only, config } => {
            commands::inspect_mask(&config, &prompt, patches, causal_only)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) if e.is::<commands::UsageError>() => {
            eprintln!("error: {e:#}\n\n{}", commands::CONFIG_HELP);
            ExitCode::from(1)
        }
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(2)
        }
    }
}
