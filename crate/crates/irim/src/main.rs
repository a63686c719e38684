use clap::{Parser, Subcommand};
use irim::commands::{self, mean_nmse, INVCHECK_DEPTHS};
use irim::config::{resolve, Precision};
use irim::IrimError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "irim",
    about = "Invertible recurrent inference machines for subsampled Fourier reconstruction",
    version
)]
struct Cli {
    /// JSON run configuration; defaults to the built-in desk profile
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Base seed overriding the configuration
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Floating-point precision for precision-sensitive commands
    #[arg(long, global = true)]
    precision: Option<Precision>,

    /// Directory for all artifacts
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training and evaluation datasets
    Synth,
    /// Train a model and write the checkpoint, its hash, and the loss log
    Train,
    /// Evaluate the trained checkpoint against the zero-filled baseline
    Eval,
    /// Cross-check gradients: stored vs invertible vs finite differences
    Gradcheck,
    /// Round-trip inversion error of deep coupling stacks
    Invcheck {
        /// Number of random seeds per depth
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Peak retained memory and layer evaluations across depth/step grids
    BenchMemory,
}

fn run(cli: &Cli) -> Result<(), IrimError> {
    let cfg = resolve(cli.config.as_deref(), cli.seed, cli.precision)?;
    match &cli.command {
        Command::Synth => {
            commands::cmd_synth(&cfg, &cli.out_dir)?;
            println!(
                "wrote {} training and {} evaluation items under {}",
                cfg.dataset_size,
                cfg.eval_size,
                cli.out_dir.display()
            );
        }
        Command::Train => {
            let summary = commands::cmd_train(&cfg, &cli.out_dir)?;
            println!(
                "final loss {:.6e}; checkpoint {} (sha256 {})",
                summary.final_loss,
                summary.checkpoint.display(),
                summary.checkpoint_sha256
            );
        }
        Command::Eval => {
            let rows = commands::cmd_eval(&cfg, &cli.out_dir)?;
            for &accel in &cfg.eval_accelerations {
                println!(
                    "{accel}x: irim NMSE {:.4e}, zero-filled NMSE {:.4e}",
                    mean_nmse(&rows, "irim", accel),
                    mean_nmse(&rows, "zero_filled", accel)
                );
            }
        }
        Command::Gradcheck => {
            let s = commands::cmd_gradcheck(&cfg, &cli.out_dir)?;
            println!(
                "gradcheck ok: mode agreement {:.3e}, finite-difference agreement {:.3e}",
                s.max_rel_modes, s.max_rel_fd
            );
        }
        Command::Invcheck { seeds } => {
            let seed_list: Vec<u64> = (0..*seeds).collect();
            let rows = commands::cmd_invcheck(&INVCHECK_DEPTHS, &seed_list, &cli.out_dir)?;
            for &depth in &INVCHECK_DEPTHS {
                for (family, precision) in
                    [("additive", "f64"), ("additive", "f32"), ("affine", "f32")]
                {
                    let worst = rows
                        .iter()
                        .filter(|r| {
                            r.layers == depth && r.family == family && r.precision == precision
                        })
                        .map(|r| r.roundtrip_error)
                        .fold(0.0f64, f64::max);
                    println!("L={depth} {family}/{precision}: worst round trip {worst:.3e}");
                }
            }
        }
        Command::BenchMemory => {
            let rows = commands::cmd_bench_memory(&cli.out_dir, cfg.model.seed)?;
            println!("wrote {} rows to {}", rows.len(), cli.out_dir.join("memory.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                IrimError::Config(_) | IrimError::ShapeMismatch { .. } => ExitCode::from(2),
                IrimError::NonFinite(_)
                | IrimError::DegenerateHouseholder { .. }
                | IrimError::ReconstructionDrift { .. } => ExitCode::from(3),
                IrimError::Tolerance { .. } => ExitCode::from(4),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
