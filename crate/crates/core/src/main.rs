use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use cotmix::harness::{self, config, ExperimentConfig, Risk, Study, SweepSpec, TrainArgs, Variant};

#[derive(Parser)]
#[command(
    name = "cotmix",
    version,
    about = "Temporal-mixup domain adaptation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Cotmix,
    CotmixStar,
}

#[derive(Clone, Copy, ValueEnum)]
enum RiskArg {
    SourceVal,
    TargetOracle,
}

#[derive(clap::Args)]
struct Common {
    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated training seeds, overriding the config
    #[arg(long, value_delimiter = ',')]
    seed_list: Option<Vec<u64>>,
    #[arg(long)]
    out: PathBuf,
    /// Allow writing into a non-empty output directory
    #[arg(long)]
    force: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

impl Common {
    fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::from_kv(&config::read_kv(p)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = &self.seed_list {
            c.train.seeds = s.clone();
            c.train.validate()?;
        }
        Ok(c)
    }
}

#[derive(clap::Args)]
struct Domains {
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source/target pair
    Generate {
        /// Generator key=value file
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train on labeled source and unlabeled target
    Train {
        #[command(flatten)]
        domains: Domains,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        source_only: bool,
        #[arg(long, value_enum, default_value = "cotmix")]
        variant: VariantArg,
    },
    /// Score a checkpoint on the held-out split of a labeled dataset
    Eval {
        /// Checkpoint path without extension, e.g. runs/a/model_seed1
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        split_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Random hyperparameter search with risk-based selection
    Sweep {
        #[command(flatten)]
        domains: Domains,
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "source-val")]
        risk: RiskArg,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        sweep_seed: u64,
    },
    /// Ablation and sensitivity grids
    Study {
        /// ablate | aug | mixstrategy | tsweep
        name: String,
        #[command(flatten)]
        domains: Domains,
        #[command(flatten)]
        common: Common,
        /// Comma-separated grid points replacing the default grid
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<String>>,
    },
    /// Finite-difference check of the composite objective on a tiny model
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Generate {
            config: cfg,
            seed,
            out,
            force,
        } => {
            let kv = match &cfg {
                Some(p) => config::read_kv(p)?,
                None => Default::default(),
            };
            let mut spec = config::generator_spec(&kv)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            harness::cmd_generate(&spec, &out, force)?;
            info!("wrote pair to {}", out.display());
            Ok(true)
        }
        Command::Train {
            domains,
            common,
            source_only,
            variant,
        } => {
            let exp = common.experiment()?;
            let variant = match variant {
                VariantArg::Cotmix => Variant::CoTMix,
                VariantArg::CotmixStar => Variant::CoTMixStar,
            };
            let report = harness::cmd_train(&TrainArgs {
                source: &domains.source,
                target: &domains.target,
                config: &exp,
                variant,
                source_only,
                out: &common.out,
                force: common.force,
                workers: common.workers,
            })?;
            if let Some(m) = &report.target_mf1 {
                println!("{} target MF1 {:.4} ± {:.4}", report.label, m.mean, m.std);
            }
            if let Some(f) = &report.failure {
                eprintln!("training failed: {f}");
            }
            Ok(report.failure.is_none())
        }
        Command::Eval {
            model,
            data,
            split_seed,
            out,
            force,
        } => {
            let r = harness::cmd_eval(&model, &data, split_seed, &out, force)?;
            println!(
                "MF1 {:.4} accuracy {:.4}",
                r.metrics.macro_f1, r.metrics.accuracy
            );
            Ok(true)
        }
        Command::Sweep {
            domains,
            common,
            risk,
            trials,
            sweep_seed,
        } => {
            let exp = common.experiment()?;
            let spec = SweepSpec {
                n_trials: trials,
                selection: match risk {
                    RiskArg::SourceVal => Risk::SourceVal,
                    RiskArg::TargetOracle => Risk::TargetOracle,
                },
                sweep_seed,
                ..SweepSpec::default()
            };
            let o = harness::cmd_sweep(
                &domains.source,
                &domains.target,
                &exp,
                &spec,
                &common.out,
                common.force,
                common.workers,
            )?;
            println!("best trial {}", o.rows[o.best].trial);
            Ok(o.report.failure.is_none())
        }
        Command::Study {
            name,
            domains,
            common,
            grid,
        } => {
            let exp = common.experiment()?;
            let rows = harness::cmd_study(
                &domains.source,
                &domains.target,
                &exp,
                Study::parse(&name)?,
                grid,
                &common.out,
                common.force,
                common.workers,
            )?;
            for r in &rows {
                println!("{:<16} {:.4} ± {:.4}", r.point, r.mf1_mean, r.mf1_std);
            }
            Ok(rows.iter().all(|r| r.failure.is_none()))
        }
        Command::Gradcheck {
            config: cfg,
            tolerance,
            out,
            corrupt,
        } => {
            let mut exp = harness::tiny_config();
            if let Some(p) = &cfg {
                exp.apply(&config::read_kv(p)?)?;
            }
            let report = harness::gradcheck(&exp, tolerance, corrupt)?;
            println!(
                "max relative error {:.3e} at {} ({} scalars, {} excluded): {}",
                report.max_rel_error,
                report.worst_parameter,
                report.checked_scalars,
                report.excluded_scalars,
                if report.passed { "ok" } else { "FAILED" }
            );
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                write_json(&dir.join("gradcheck.json"), &report)?;
            }
            Ok(report.passed)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
