use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use softsean::cli::{self, Overrides, RunConfig};
use softsean::Result;

#[derive(Parser)]
#[command(
    name = "softsean",
    version,
    about = "Differentiable region-adaptive normalization toolkit and room-emptying generator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file with key=value lines (defaults < file < flags)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Working resolution as HxW, e.g. 32x64
    #[arg(long)]
    res: Option<String>,
    /// Style code dimensionality
    #[arg(long)]
    style_dim: Option<usize>,
    /// Sharpening constant K
    #[arg(long)]
    k_sharpen: Option<f64>,
    /// Seed for all randomness
    #[arg(long)]
    seed: Option<u64>,
    /// Training epochs
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate
    #[arg(long)]
    lr: Option<f64>,
    /// Loss weights as l1,feat,adv,layout
    #[arg(long)]
    weights: Option<String>,
    /// Batch size
    #[arg(long)]
    batch_size: Option<usize>,
    /// Epochs before the adversarial loss joins
    #[arg(long)]
    warmup: Option<usize>,
    /// Worker threads (1 = single-threaded mode, 0 = auto)
    #[arg(long)]
    threads: Option<usize>,
    /// Run the pipeline in f64 instead of f32
    #[arg(long = "f64")]
    use_f64: bool,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let overrides = Overrides {
            res: self.res.as_deref().map(cli::parse_res).transpose()?,
            style_dim: self.style_dim,
            k_sharpen: self.k_sharpen,
            seed: self.seed,
            epochs: self.epochs,
            lr: self.lr,
            weights: self.weights.as_deref().map(cli::parse_weights).transpose()?,
            batch_size: self.batch_size,
            adv_warmup_epochs: self.warmup,
            threads: self.threads,
            use_f64: self.use_f64,
        };
        cli::resolve_config(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Verify every registered op against central finite differences (f64)
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Maximum relative error
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Finite-difference step
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Check a single op by name
        #[arg(long)]
        op: Option<String>,
    },
    /// Generate a synthetic paired dataset
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of samples
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Output directory
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the generator and discriminator
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (generated on the fly when omitted)
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Samples to generate when no dataset is given
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Output directory for model.ckpt and train_log.csv
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint archive
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory
        #[arg(long)]
        dataset: PathBuf,
        /// Optional CSV output path for the metrics
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run inference on one furnished image plus mask
    Infer {
        #[command(flatten)]
        common: Common,
        /// Checkpoint archive
        #[arg(long)]
        ckpt: PathBuf,
        /// Furnished input image (binary PPM)
        image: PathBuf,
        /// Foreground mask (binary PGM, 0/255)
        mask: PathBuf,
        /// Output directory for the dumped images
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(command: Command) -> Result<i32> {
    match command {
        Command::Gradcheck {
            common,
            tol,
            eps,
            op,
        } => {
            let cfg = common.resolve()?;
            println!("{cfg}");
            let all_pass = cli::cmd_gradcheck(tol, eps, op.as_deref())?;
            Ok(if all_pass { 0 } else { 1 })
        }
        Command::GenData { common, n, out } => {
            let cfg = common.resolve()?;
            println!("{cfg}");
            if cfg.use_f64 {
                cli::cmd_gen_data::<f64>(&cfg, n, &out)?;
            } else {
                cli::cmd_gen_data::<f32>(&cfg, n, &out)?;
            }
            Ok(0)
        }
        Command::Train {
            common,
            dataset,
            n,
            out,
        } => {
            let cfg = common.resolve()?;
            println!("{cfg}");
            if cfg.use_f64 {
                cli::cmd_train::<f64>(&cfg, dataset.as_deref(), n, &out)?;
            } else {
                cli::cmd_train::<f32>(&cfg, dataset.as_deref(), n, &out)?;
            }
            Ok(0)
        }
        Command::Eval {
            common,
            ckpt,
            dataset,
            out,
        } => {
            let cfg = common.resolve()?;
            println!("{cfg}");
            if cfg.use_f64 {
                cli::cmd_eval::<f64>(&ckpt, &dataset, out.as_deref())?;
            } else {
                cli::cmd_eval::<f32>(&ckpt, &dataset, out.as_deref())?;
            }
            Ok(0)
        }
        Command::Infer {
            common,
            ckpt,
            image,
            mask,
            out,
        } => {
            let cfg = common.resolve()?;
            println!("{cfg}");
            if cfg.use_f64 {
                cli::cmd_infer::<f64>(&ckpt, &image, &mask, &out)?;
            } else {
                cli::cmd_infer::<f32>(&ckpt, &image, &mask, &out)?;
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e) as u8)
        }
    }
}
