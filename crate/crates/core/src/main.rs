use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use bigbatch::harness::config::DEFAULT_INTERCONNECT;
use bigbatch::harness::run::{self, OUTPUT_ROOT_VAR};
use bigbatch::harness::{tables, HarnessError, EXIT_DIVERGED, EXIT_OK};
use bigbatch::parallel::RunStatus;
use bigbatch::perfmodel::{cluster_preset, model_preset, total_time_with, CostOptions, StagePayload, DRAM_ACCESS};

#[derive(Parser)]
#[command(
    name = "bigbatch",
    version,
    about = "Large-batch synchronous SGD simulator and cost model"
)]
struct Cli {
    /// Directory that relative output paths resolve against.
    #[arg(long, global = true, env = OUTPUT_ROOT_VAR, default_value = ".")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Payload {
    Full,
    Sharded,
}

#[derive(Args)]
struct CostArgs {
    /// Model preset (see `presets`).
    #[arg(long)]
    model: String,
    /// Cluster preset.
    #[arg(long)]
    cluster: String,
    /// Global batch size.
    #[arg(long)]
    batch: u64,
    #[arg(long)]
    epochs: u64,
    /// Training set size.
    #[arg(long)]
    n: u64,
    #[arg(long, default_value_t = 1)]
    workers: u64,
    /// Words sent per tree stage: the whole model, or a 1/P shard of it.
    #[arg(long, value_enum, default_value = "full")]
    payload: Payload,
    /// Energy table row that prices each communicated word.
    #[arg(long, default_value = DRAM_ACCESS)]
    comm_class: String,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its log, schedule and cost files.
    Train { config: PathBuf },
    /// Run every `.cfg` file in a directory and write a comparison table.
    Sweep {
        dir: PathBuf,
        /// Test accuracy counted as reaching the target.
        #[arg(long, default_value_t = 0.95)]
        target: f64,
    },
    /// Price a training run with the analytical model.
    Cost(CostArgs),
    /// Write the iteration, scaling, network and energy tables as CSV.
    Tables {
        /// Output directory, relative to the output root.
        #[arg(long, default_value = "tables")]
        dir: PathBuf,
        #[arg(long, default_value = "resnet50")]
        model: String,
        #[arg(long, default_value = DEFAULT_INTERCONNECT)]
        cluster: String,
    },
    /// Print the built-in presets as a config fragment.
    Presets,
}

fn cost(a: CostArgs) -> Result<(), HarnessError> {
    let m = model_preset(&a.model)?;
    let c = cluster_preset(&a.cluster)?.with_workers(a.workers);
    let opts = CostOptions {
        payload: match a.payload {
            Payload::Full => StagePayload::Full,
            Payload::Sharded => StagePayload::Sharded,
        },
        comm_class: a.comm_class,
        ..CostOptions::default()
    };
    let r = total_time_with(&m, &c, a.epochs, a.n, a.batch, &opts)?;
    if r.iterations_warning {
        eprintln!(
            "warning: batch {} exceeds the {}x{} example budget; no iterations",
            a.batch, a.epochs, a.n
        );
    }
    println!("iterations,messages,comm_volume_words,t_comp_per_iter,t_comm_per_iter,total_time,total_flops,energy_j");
    println!(
        "{},{},{},{},{},{},{},{}",
        r.iterations,
        r.messages,
        r.comm_volume_words,
        r.t_comp_per_iter,
        r.t_comm_per_iter,
        r.total_time,
        r.total_flops,
        r.energy_estimate
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<i32, HarnessError> {
    let root = cli.out_root;
    match cli.command {
        Command::Train { config } => {
            let cfg = run::load_config(&config)?;
            let r = run::run_experiment(&cfg, &root)?;
            println!("wrote {}", r.out_dir.display());
            match r.log.status {
                RunStatus::Completed => {
                    println!("completed: final test accuracy {}", r.log.final_test_acc());
                    Ok(EXIT_OK)
                }
                RunStatus::Diverged { iteration, reason } => {
                    eprintln!("diverged at iteration {iteration}: {reason}");
                    Ok(EXIT_DIVERGED)
                }
            }
        }
        Command::Sweep { dir, target } => {
            let configs = run::load_config_dir(&dir)?;
            let rows = run::sweep(&configs, &root, target)?;
            for r in &rows {
                println!("{}: {} final test accuracy {}", r.name, r.status, r.final_test_acc);
            }
            println!("wrote {}", root.join(run::SWEEP_FILE).display());
            Ok(EXIT_OK)
        }
        Command::Cost(args) => {
            cost(args)?;
            Ok(EXIT_OK)
        }
        Command::Tables { dir, model, cluster } => {
            for p in tables::write_tables(&root.join(dir), &model, &cluster)? {
                println!("wrote {}", p.display());
            }
            Ok(EXIT_OK)
        }
        Command::Presets => {
            print!("{}", tables::presets_text());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    let code = match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
