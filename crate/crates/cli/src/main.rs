use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cgreid::eval::Setting;
use cgreid::{Error, Result};
use cgreid_cli::commands::{self, CHECKPOINT_FILE, LOG_FILE};
use cgreid_cli::RunConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cgreid", version, about = "Channel-group re-identification experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Dataset directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model and write its checkpoint and loss log.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print one JSON report per setting for a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// standard, fast:i, concat:k, voting or voting:plurality; repeatable.
        #[arg(long)]
        setting: Vec<Setting>,
    },
    /// Train and evaluate a grid of head variants over several seeds.
    CompareVariants {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Grid JSON file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write query and gallery descriptors as a binary matrix plus a JSON sidecar.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "standard")]
        setting: Setting,
    },
}

fn pick(flag: Option<PathBuf>, configured: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| Error::InvalidSpec(format!("no {what} given; pass it as a flag or set it in the config")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let dir = pick(out, &cfg.output.data_dir, "--out directory")?;
            let ds = commands::gen_data(&cfg, &dir)?;
            eprintln!("wrote {} images to {}", ds.samples.len(), dir.display());
        }
        Command::Train { common, data, out } => {
            let cfg = common.load()?;
            let data = pick(data, &cfg.output.data_dir, "--data directory")?;
            let out = pick(out, &cfg.output.out, "--out directory")?;
            let (_, log) = commands::train_cmd(&cfg, &data, &out)?;
            eprintln!(
                "trained {} steps in {:.1}s, final loss {:.4}; wrote {} and {}",
                log.steps.len(),
                log.wall_time_secs,
                log.final_loss().unwrap_or(f64::NAN),
                out.join(CHECKPOINT_FILE).display(),
                out.join(LOG_FILE).display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            setting,
        } => {
            let cfg = common.load()?;
            let data = pick(data, &cfg.output.data_dir, "--data directory")?;
            let settings = if setting.is_empty() { cfg.eval.settings.clone() } else { setting };
            for report in commands::eval_cmd(&checkpoint, &data, &settings, cfg.eval.k_max)? {
                println!("{}", serde_json::to_string(&report)?);
            }
        }
        Command::CompareVariants { common, data, out, jobs } => {
            let cfg = common.load()?;
            let data = pick(data, &cfg.output.data_dir, "--data directory")?;
            let out = pick(out, &cfg.output.out, "--out file")?;
            let grid = commands::compare_cmd(&cfg, &data, &out, jobs)?;
            for c in &grid.cells {
                let s = &c.summary[0];
                eprintln!(
                    "{:?} n_c={} shared={} {:?} noise={}: rank-1 {:.4} ± {:.4}, mAP {:.4} ± {:.4}",
                    c.cell.variant, c.cell.n_c, c.cell.shared, c.cell.loss_mode, c.cell.label_noise,
                    s.rank1_mean, s.rank1_sd, s.map_mean, s.map_sd
                );
            }
        }
        Command::ExportFeatures {
            common,
            checkpoint,
            data,
            out,
            setting,
        } => {
            let cfg = common.load()?;
            let data = pick(data, &cfg.output.data_dir, "--data directory")?;
            let out = pick(out, &cfg.output.out, "--out file")?;
            let side = commands::export_features(&checkpoint, &data, setting, &out)?;
            eprintln!(
                "wrote {}×{} descriptors to {} and {}",
                side.rows.len(),
                side.descriptor_dim,
                out.display(),
                commands::sidecar_path(Path::new(&out)).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
