use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use pita::mcmc::SampleBuffer;
use pita::orchestrator::{self, LadderConfig, RunOptions};
use pita::training::{estimate_sigma_data, train_at_temperature, Models, TrainIo, TrainingConfig};
use pita::{mix_seed, write_atomic, PitaError, Result};

/// Progressive inference-time annealing of diffusion samplers.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configuration's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Collect a MALA buffer at the first rung's temperature.
    Mcmc {
        #[command(flatten)]
        common: Common,
        /// Inverse temperature; defaults to the first rung.
        #[arg(long)]
        beta: Option<f64>,
    },
    /// Train a denoiser and energy head on a buffer.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        buffer: PathBuf,
        /// Checkpoint directory to warm-start from.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Rung whose training overrides apply.
        #[arg(long, default_value_t = 0)]
        rung: usize,
    },
    /// Anneal from trained models to a colder temperature.
    Anneal {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        beta_next: f64,
        /// Rung whose annealing overrides apply.
        #[arg(long, default_value_t = 1)]
        rung: usize,
    },
    /// Evaluate a buffer and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        buffer: PathBuf,
        /// Hotter buffer for the direct importance-sampling comparison.
        #[arg(long)]
        source: Option<PathBuf>,
    },
    /// Run the whole ladder in a run directory.
    Ladder {
        #[command(flatten)]
        common: Common,
    },
    /// Continue an interrupted ladder run.
    Resume {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> Result<LadderConfig> {
    let mut cfg = LadderConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn save_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    write_atomic(path, &serde_json::to_vec_pretty(v)?)
}

fn run(cmd: Command) -> Result<serde_json::Value> {
    match cmd {
        Command::Mcmc { common, beta } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let beta = beta.unwrap_or(cfg.betas()?[0]);
            let (buf, report) = orchestrator::sample_mcmc(&cfg.target, &cfg.target, beta, &cfg.mcmc, cfg.seed)?;
            buf.save(&common.out.join("buffer.bin"))?;
            save_json(&common.out.join("chain_report.json"), &report)?;
            Ok(json!({"buffer": common.out.join("buffer.bin"), "n": buf.len(), "acceptance": report.acceptance_rate}))
        }
        Command::Train {
            common,
            buffer,
            checkpoint,
            rung,
        } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let mut buf = SampleBuffer::load(&buffer)?;
            let tcfg = TrainingConfig {
                seed: cfg.seed,
                ..cfg.training_for(rung)
            };
            let init = match checkpoint {
                Some(dir) => Models::load(&dir)?.0,
                None => {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, u64::MAX));
                    let sd = estimate_sigma_data(buf.samples.view());
                    Models::new(&cfg.model, buf.dim(), cfg.schedule.clone(), sd, &mut rng)
                }
            };
            let log = common.out.join("train.jsonl");
            if log.exists() {
                std::fs::remove_file(&log)?;
            }
            let io = TrainIo {
                log: Some(log),
                checkpoint_dir: None,
            };
            let out = train_at_temperature(&init, &mut buf, &cfg.target, &tcfg, &io)?;
            let ck = common.out.join("checkpoints");
            out.models.save(&ck, buf.beta, tcfg.n_steps as u64)?;
            buf.save(&common.out.join("buffer.bin"))?;
            let last = out.reports.last().cloned().unwrap_or_default();
            Ok(json!({"checkpoint": ck, "energy_evals": out.energy_evals, "final": last}))
        }
        Command::Anneal {
            common,
            checkpoint,
            beta_next,
            rung,
        } => {
            let cfg = load_config(&common)?;
            std::fs::create_dir_all(&common.out)?;
            let (models, beta_prev, _) = Models::load(&checkpoint)?;
            if !(beta_next > beta_prev) {
                return Err(PitaError::Config(format!(
                    "--beta-next {beta_next} must exceed the checkpoint's β {beta_prev}"
                )));
            }
            let (buf, diag, summary) = orchestrator::anneal_rung(
                &models,
                &cfg.schedule,
                &cfg.target,
                beta_prev,
                beta_next,
                &cfg.anneal_for(rung.min(cfg.betas()?.len() - 1)),
                cfg.low_ess,
                cfg.seed,
            )?;
            buf.save(&common.out.join("buffer.bin"))?;
            let mut lines = Vec::new();
            for s in &diag.steps {
                serde_json::to_writer(&mut lines, s)?;
                lines.push(b'\n');
            }
            write_atomic(&common.out.join("diagnostics.jsonl"), &lines)?;
            save_json(&common.out.join("sample_summary.json"), &summary)?;
            Ok(serde_json::to_value(&summary)?)
        }
        Command::Eval { common, buffer, source } => {
            let cfg = load_config(&common)?;
            let buf = SampleBuffer::load(&buffer)?;
            let src = source.map(|p| SampleBuffer::load(&p)).transpose()?;
            let rep = orchestrator::evaluate_buffer(
                &cfg,
                &cfg.target,
                &buf,
                "eval",
                src.as_ref(),
                None,
                cfg.seed,
                &common.out,
            )?;
            rep.save(&common.out.join("metrics.json"))?;
            Ok(serde_json::to_value(&rep)?)
        }
        Command::Ladder { common } => {
            let cfg = load_config(&common)?;
            let out = orchestrator::run_ladder(&cfg, &common.out)?;
            Ok(json!({"finished": out.finished, "meter": out.meter, "reports": out.reports}))
        }
        Command::Resume { config, seed, out } => {
            let m = orchestrator::Manifest::load(&out)?;
            if let Some(path) = config {
                let mut cfg = LadderConfig::load(&path)?;
                if let Some(s) = seed {
                    cfg.seed = s;
                }
                if cfg != m.config {
                    return Err(PitaError::Config("configuration differs from the run's manifest".into()));
                }
            }
            let res = orchestrator::resume_with(&out, &RunOptions::default())?;
            Ok(json!({"finished": res.finished, "meter": res.meter, "reports": res.reports}))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = std::env::var("PITA_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size thread pool: {e}");
        }
    }
    match run(cli.cmd) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", json!({"error": e.kind(), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
