//! Command-line front end: `run`, `sweep`, `landscape`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim::config::{parse_config, parse_sweep};
use fedsim::driver::{
    exit_code_for, landscape_to_dir, resolve_out_dir, run_to_dir, status_exit_code, sweep_to_dir,
};
use fedsim::error::Result;
use fedsim::federation::RunStatus;
use fedsim::report;

const OUTPUT_HELP: &str = "\
OUTPUT FILES

  rounds.csv     schema `fedsim-rounds-v1`, one line per round:
    round                 0-based round index
    global_loss           client-weighted training objective after the round
    test_accuracy         top-1 accuracy on the test set
    avg_sq_grad_norm      squared l2 norm of the full training gradient
    sharpness_gap         max loss rise within the probe radius (if probed)
    sigma_g_sq_hat        max_i ||grad_i - grad||^2 heterogeneity estimate
    sigma_l_sq_hat        stochastic-gradient direction variance estimate
    downlink_norm_mean    mean ||received - sent|| over clients, downlink
    downlink_snr_db_mean  mean 20*log10(||w||/||eps||), `inf` when clean
    uplink_norm_mean      as above for the uplink
    uplink_snr_db_mean    as above for the uplink
    (metric cells are empty on rounds skipped by metrics.eval_stride)

  summary.csv    schema `fedsim-summary-v1`, one data line:
    rounds_completed, final_global_loss, final_test_accuracy,
    best_test_accuracy, final_avg_sq_grad_norm, final_sharpness_gap,
    status (completed|diverged), diverged_round

  sweep.csv      schema `fedsim-sweep-v1`: `label` plus the summary
                 columns, one line per cell; failed cells carry status
                 `error`.

  landscape.csv  schema `fedsim-landscape-v1`: `# extent`/`# resolution`
                 headers, then offset1[,offset2],loss per grid point in
                 row-major order.

  model.bin      little-endian u64 parameter count, then that many
                 little-endian f64 values.

Outputs are byte-identical across reruns of the same config.

EXIT CODES

  0  success
  2  config file problem (parse, type, unknown key, range)
  3  training diverged (partial CSVs are kept)
  1  any other failure";

#[derive(Parser)]
#[command(
    name = "fedsim",
    version,
    about = "Deterministic federated learning simulator with perturbed model exchange",
    after_long_help = OUTPUT_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Write artifacts here instead of $FEDSIM_OUT/<config output_dir>.
    #[arg(long, global = true, value_name = "DIR")]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a TOML config.
    Run { config: PathBuf },
    /// Run every cell of a sweep spec (base config + axis overrides).
    Sweep { spec: PathBuf },
    /// Evaluate a loss-landscape slice around a model.
    Landscape {
        config: PathBuf,
        /// Model dump to slice around; defaults to the initial model.
        #[arg(long, value_name = "MODEL_BIN")]
        center: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    let out_dir = cli.out_dir.as_deref();
    match &cli.command {
        Command::Run { config } => {
            let cfg = parse_config(config)?;
            let dir = resolve_out_dir(&cfg.output_dir, out_dir);
            let artifacts = run_to_dir(&cfg, &dir)?;
            let summary =
                report::summarize(&artifacts.outcome.records, &artifacts.outcome.status);
            print!("{}", report::summary_csv(&summary));
            if let RunStatus::Diverged { round, reason } = &artifacts.outcome.status {
                eprintln!("diverged at round {round}: {reason}");
            }
            Ok(ExitCode::from(
                status_exit_code(&artifacts.outcome.status) as u8
            ))
        }
        Command::Sweep { spec } => {
            let spec = parse_sweep(spec)?;
            let dir = resolve_out_dir(&spec.base.output_dir, out_dir);
            let artifacts = sweep_to_dir(&spec, &dir)?;
            print!("{}", report::sweep_csv(&artifacts.cells));
            Ok(ExitCode::SUCCESS)
        }
        Command::Landscape { config, center } => {
            let cfg = parse_config(config)?;
            let dir = resolve_out_dir(&cfg.output_dir, out_dir);
            let path = landscape_to_dir(&cfg, center.as_deref(), &dir)?;
            println!("{}", path.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}
