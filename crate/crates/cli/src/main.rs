use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sprint_core::cost::{flops_model, preset, render_csv, render_table, CostMode};
use sprint_core::harness::config::ENV_SEED;
use sprint_core::harness::io::{read_samples, write_samples};
use sprint_core::harness::{quadrant_accuracy, run_with, RunConfig, RunSummary};
use sprint_core::sample::{GuidanceMode, SamplerSpec};
use sprint_core::train::{StepMetrics, TrainState};

/// The network allocates and frees large activations every step; the system
/// allocator returns them to the OS each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "sprint", version, about = "Sparse-then-dense diffusion transformer training at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured phases, sampling and evaluation.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a saved training state.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print a progress line every this many steps; 0 silences.
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Fine-tune a pre-trained state, skipping pre-training.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        from: PathBuf,
        #[arg(long, default_value_t = 100)]
        log_every: u64,
    },
    /// Generate samples from a saved state.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "pdg")]
        mode: GuidanceMode,
        #[arg(long, default_value_t = 2.0)]
        w: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Generate only this class; otherwise labels cycle through all.
        #[arg(long)]
        class: Option<usize>,
        /// Defaults to SPRINT_SEED, then 0.
        #[arg(long)]
        seed: Option<u64>,
        /// Use the raw weights instead of the EMA.
        #[arg(long)]
        raw: bool,
        #[arg(long, default_value = "samples")]
        out: PathBuf,
    },
    /// Quadrant accuracy of a directory of samples.
    Eval {
        #[arg(long)]
        samples: PathBuf,
    },
    /// Forward FLOPs per image.
    Flops {
        #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
        config: Option<PathBuf>,
        /// `B/2` or `XL/2`.
        #[arg(long)]
        preset: Option<String>,
        /// Token drop ratio; defaults to the configured mask, or 0.75 for presets.
        #[arg(long)]
        ratio: Option<f64>,
        #[arg(long, default_value = "sparse")]
        mode: CostMode,
        #[arg(long, value_enum, default_value_t = Format::Table)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Table,
    Csv,
}

fn load_config(path: &PathBuf) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn progress(every: u64) -> impl FnMut(&StepMetrics) {
    move |m| {
        if every > 0 && (m.iter + 1) % every == 0 {
            eprintln!(
                "{} {:>6}  loss {:.4}  |g_f| {:.3}  |g| {:.3}  lr {:.2e}",
                m.phase,
                m.iter + 1,
                m.loss,
                m.grad_norm_f,
                m.grad_norm,
                m.lr
            );
        }
    }
}

fn report(summary: &RunSummary, cfg: &RunConfig) {
    for (name, phase) in [("pretrain", &summary.pretrain), ("finetune", &summary.finetune)] {
        if let Some(p) = phase {
            println!(
                "{name}: {} steps, first-50 loss {:.4}, last-100 loss {:.4}",
                p.iterations, p.first50_loss, p.last100_loss
            );
        }
    }
    if let Some(r) = summary.loss_ratio {
        println!("loss ratio {r:.3}");
    }
    for m in &summary.sampling {
        println!(
            "{} w={} accuracy {:.3} ({} full, {} shallow passes)",
            m.mode, m.w, m.accuracy, m.full_passes, m.shallow_passes
        );
    }
    println!("outputs in {}", cfg.io.out_dir.display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, log_every } => {
            let cfg = load_config(&config)?;
            let state = resume
                .map(|p| TrainState::load(&p).with_context(|| format!("loading {}", p.display())))
                .transpose()?;
            let summary = run_with(&cfg, state, progress(log_every))?;
            report(&summary, &cfg);
        }
        Command::Finetune { config, from, log_every } => {
            let mut cfg = load_config(&config)?;
            if cfg.finetune.is_none() {
                bail!("{} has no [finetune] section", config.display());
            }
            cfg.pretrain = None;
            let state = TrainState::load(&from).with_context(|| format!("loading {}", from.display()))?;
            let summary = run_with(&cfg, Some(state), progress(log_every))?;
            report(&summary, &cfg);
        }
        Command::Sample { ckpt, mode, w, steps, n, class, seed, raw, out } => {
            let state = TrainState::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let classes = state.params.config.num_classes;
            let seed = match seed {
                Some(s) => s,
                None => match std::env::var(ENV_SEED) {
                    Ok(s) => s.trim().parse().with_context(|| format!("{ENV_SEED}={s} is not a u64"))?,
                    Err(_) => 0,
                },
            };
            let labels = (0..n).map(|i| class.unwrap_or(i % classes)).collect();
            let spec = SamplerSpec { steps, mode, w, labels, seed };
            let (images, counter) =
                sprint_core::harness::pipeline::sample_checkpoint(&state, &spec, !raw)?;
            write_samples(&out, &images, &spec.labels, true)?;
            println!(
                "{n} samples in {} ({} full, {} shallow passes)",
                out.display(),
                counter.full,
                counter.shallow
            );
            if images.height() % 2 == 0 && images.height() == images.width() {
                println!("quadrant accuracy {:.3}", quadrant_accuracy(&images, &spec.labels)?);
            }
        }
        Command::Eval { samples } => {
            let (images, labels) =
                read_samples(&samples).with_context(|| format!("reading {}", samples.display()))?;
            let acc = quadrant_accuracy(&images, &labels)?;
            println!("{} samples, quadrant accuracy {acc:.4}", labels.len());
        }
        Command::Flops { config, preset: name, ratio, mode, format } => {
            let (model, default_ratio) = match (config, name) {
                (Some(path), _) => {
                    let cfg = load_config(&path)?;
                    (cfg.model, cfg.drop.mask.nominal_ratio())
                }
                (None, Some(name)) => match preset(&name) {
                    Some(m) => (m, 0.75),
                    None => bail!("unknown preset `{name}` (expected B/2 or XL/2)"),
                },
                (None, None) => bail!("pass --config or --preset"),
            };
            let r = ratio.unwrap_or(default_ratio);
            if !(0.0..1.0).contains(&r) {
                bail!("drop ratio must lie in [0, 1), got {r}");
            }
            let report = flops_model(&model, r, mode);
            match format {
                Format::Table => print!("{}", render_table(&report)),
                Format::Csv => print!("{}", render_csv(&report)),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
