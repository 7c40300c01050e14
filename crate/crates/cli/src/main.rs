use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use phnn::data::{build_dataset, load_dataset, save_dataset, DataConfig};
use phnn::experiments::{inference_error, preset, run_study, ExperimentConfig, Study};
use phnn::integrators::{Scheme, StepperConfig};
use phnn::models::{load_checkpoint, ModelKind};
use phnn::par::Exec;
use phnn::physics::{OscillatorKind, OscillatorSpec};

const DATASET_FILE: &str = "dataset.csv";

#[derive(Parser)]
#[command(name = "phnn", version, about = "Port-Hamiltonian neural networks for controlled oscillators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset bundle into DIR/dataset.csv.
    GenData {
        #[arg(long)]
        system: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of training points.
        #[arg(long, default_value_t = 25)]
        n_train: usize,
        /// JSON data config overriding the defaults.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and evaluate every cell of a JSON experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Inference error of a checkpoint on the inference split of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory holding dataset.csv, or the file itself.
        #[arg(long)]
        data: PathBuf,
        /// Integrator; defaults to RK2 for NODE and DG otherwise.
        #[arg(long)]
        scheme: Option<String>,
    },
    /// Run a predefined study.
    Study {
        #[arg(long)]
        preset: String,
        /// Complete sweep (all systems and models, 10 seeds).
        #[arg(long)]
        full: bool,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
        /// Override the number of optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn report(cfg: &ExperimentConfig, out: &std::path::Path) -> Result<()> {
    let res = run_study(cfg, out).with_context(|| format!("study for {}", cfg.system.name()))?;
    for s in &res.summary {
        println!(
            "{:<14} {:<8} {:<3} {:<6} N={:<4} {:<2} median {:.3e} IQR {:.3e} ({} runs)",
            s.key.system.name(),
            s.key.model.name(),
            s.key.scheme.name(),
            s.key.size.name(),
            s.key.n_train,
            s.key.regularizer.name(),
            s.median,
            s.iqr,
            s.n_runs
        );
    }
    for (run, e) in &res.errors {
        eprintln!("{run}: {e}");
    }
    println!("results written to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::GenData {
            system,
            seed,
            out,
            n_train,
            config,
        } => {
            let kind = OscillatorKind::parse(&system)?;
            let mut cfg: DataConfig = match config {
                Some(p) => serde_json::from_str(&std::fs::read_to_string(&p)?).with_context(|| format!("reading {}", p.display()))?,
                None => DataConfig::default(),
            };
            cfg.n_train = n_train;
            let bundle = build_dataset(&OscillatorSpec::from_kind(kind), &cfg, seed, Exec::Parallel)?;
            std::fs::create_dir_all(&out)?;
            let path = out.join(DATASET_FILE);
            save_dataset(&bundle, &path)?;
            println!(
                "{}: {} train, {} eval, {} inference trajectories -> {}",
                kind.name(),
                bundle.train.len(),
                bundle.eval.len(),
                bundle.infer.len(),
                path.display()
            );
        }
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::from_json_file(&config).with_context(|| format!("reading {}", config.display()))?;
            report(&cfg, &out)?;
        }
        Command::Eval { checkpoint, data, scheme } => {
            let (model, _) = load_checkpoint(&checkpoint).with_context(|| format!("reading {}", checkpoint.display()))?;
            let path = if data.is_dir() { data.join(DATASET_FILE) } else { data };
            let bundle = load_dataset(&path).with_context(|| format!("reading {}", path.display()))?;
            if bundle.header.system != model.system {
                bail!("checkpoint was trained on {}, dataset is {}", model.system.name(), bundle.header.system.name());
            }
            let scheme = match scheme.as_deref() {
                Some("RK2") | Some("rk2") => Scheme::Rk2,
                Some("DG") | Some("dg") => Scheme::Dg,
                Some(other) => bail!("unknown scheme '{other}'"),
                None if model.kind == ModelKind::Node => Scheme::Rk2,
                None => Scheme::Dg,
            };
            let stepper = StepperConfig::new(scheme, bundle.header.config.h_train());
            let e = inference_error(&model, &bundle.infer, &stepper, Exec::Parallel)?;
            println!("L_traj {:.16e}", e.l_traj);
            if e.failures > 0 {
                println!("{} of {} rollouts failed and were excluded", e.failures, bundle.infer.len());
            }
        }
        Command::Study { preset: name, full, out, steps } => {
            let study = Study::parse(&name)?;
            let configs = preset(study, full);
            let multi = configs.len() > 1;
            for mut cfg in configs {
                if let Some(s) = steps {
                    cfg.train.steps = s;
                }
                let dir = if multi { out.join(cfg.system.name()) } else { out.clone() };
                report(&cfg, &dir)?;
            }
        }
    }
    Ok(())
}
