use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedfreeze::client::{enumerate_contiguous, stream_rng};
use fedfreeze::cost::build_cost_table;
use fedfreeze::data::{generate_synthetic_dataset, write_idx_in_range, SyntheticParams};
use fedfreeze::harness::{effective_profile, run_scenario, Scenario};

#[derive(Parser)]
#[command(name = "fedfreeze", version, about = "Federated learning with frozen and quantized blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write metrics.csv, contributions.csv and the resolved scenario.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write the cost table of one device class as CSV.
    Profile {
        #[arg(long)]
        scenario: PathBuf,
        /// Device class name.
        #[arg(long)]
        device: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the contiguous trained ranges of an n-block network.
    EnumerateConfigs {
        #[arg(long)]
        blocks: usize,
    },
    /// Generate a synthetic dataset as IDX files.
    GenData {
        /// TOML file with the generator parameters.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Extra samples from the same classes written as a test split.
        #[arg(long, default_value_t = 0)]
        test_samples: usize,
    },
}

fn profile(scenario: &Path, device: &str, out: &Path) -> Result<()> {
    let scenario = Scenario::load(scenario)?;
    let Some(class) = scenario.device_classes.iter().position(|c| c.name == device) else {
        let names: Vec<&str> = scenario.device_classes.iter().map(|c| c.name.as_str()).collect();
        bail!("no device class named {device:?}; the scenario has {}", names.join(", "));
    };
    let table = build_cost_table(
        &effective_profile(&scenario, class),
        &scenario.model,
        &scenario.train_hyper().cost_hyper(),
    )?;
    std::fs::write(out, table.to_csv()).with_context(|| format!("writing {}", out.display()))
}

fn gen_data(params: &Path, out: &Path, test_samples: usize) -> Result<()> {
    let text = std::fs::read_to_string(params).with_context(|| format!("reading {}", params.display()))?;
    let mut params: SyntheticParams =
        toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {}", params.display(), e.to_string().trim_end()))?;
    let train_samples = params.samples;
    params.samples += test_samples;
    let all = generate_synthetic_dataset(&params, &mut stream_rng(params.seed, 0, 0))?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    // One pixel scale for both splits.
    let range = all.images.min_max();
    write_idx_in_range(&all.slice(0, train_samples)?, range, &out.join("train-images.idx"), &out.join("train-labels.idx"))?;
    if test_samples > 0 {
        write_idx_in_range(
            &all.slice(train_samples, test_samples)?,
            range,
            &out.join("test-images.idx"),
            &out.join("test-labels.idx"),
        )?;
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { scenario, out, seed } => {
            let summary = run_scenario(&scenario, &out, seed)?;
            println!(
                "{} rounds, final accuracy {:.4}, deadline {:.6} s, outputs in {}",
                summary.rounds,
                summary.final_accuracy,
                summary.deadline_seconds,
                summary.out_dir.display()
            );
        }
        Command::Profile { scenario, device, out } => profile(&scenario, &device, &out)?,
        Command::EnumerateConfigs { blocks } => {
            println!("l,u");
            for c in enumerate_contiguous(blocks)? {
                if let Some((l, u)) = c.bounds() {
                    println!("{l},{u}");
                }
            }
        }
        Command::GenData { params, out, test_samples } => gen_data(&params, &out, test_samples)?,
    }
    Ok(())
}
