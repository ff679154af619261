//! End-to-end run: data, pre-training, fine-tuning, sampling, evaluation.
//!
//! Everything written under `io.out_dir`:
//!
//! | file | contents |
//! |---|---|
//! | `config.toml` | the resolved configuration |
//! | `metrics.ndjson` | one record per step: iter, phase, loss, grad norms, lr |
//! | `timings.ndjson` | wall-clock milliseconds per step and per sampling mode |
//! | `ckpt/{phase}_{iter}.ckpt` | periodic training state |
//! | `pretrain.ckpt`, `final.ckpt` | state after each phase |
//! | `dump.ckpt` | state at a non-finite loss |
//! | `samples/{mode}/` | generated samples |
//! | `summary.json` | loss curves, accuracy, evaluation counts, FLOPs |
//!
//! Everything except `timings.ndjson` is a pure function of the
//! configuration.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::data::BlobDataset;
use super::io::write_samples;
use super::metrics::quadrant_accuracy;
use crate::cost::{flops_model, CostMode, FlopsReport};
use crate::error::{Result, SprintError};
use crate::grid::patchify;
use crate::net::ModelParams;
use crate::rng::{seeded, stream, Purpose};
use crate::sample::{generate_counted, EvalCounter, GuidanceMode, SamplerSpec};
use crate::train::{Phase, StepMetrics, TrainState};

/// Points kept in each summary curve.
const CURVE_POINTS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSummary {
    pub iterations: u64,
    /// Mean loss over the first 50 steps.
    pub first50_loss: f64,
    /// Mean loss over the last 100 steps.
    pub last100_loss: f64,
    /// `(iteration, mean loss)` over consecutive windows.
    pub loss_curve: Vec<(u64, f64)>,
    /// `(iteration, mean encoder gradient norm)` over the same windows.
    pub grad_norm_f_curve: Vec<(u64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: GuidanceMode,
    pub w: f64,
    pub steps: usize,
    pub count: usize,
    pub accuracy: f64,
    pub full_passes: usize,
    pub shallow_passes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub num_params: usize,
    pub pretrain: Option<PhaseSummary>,
    pub finetune: Option<PhaseSummary>,
    /// Last-100 mean of the final phase over the first-50 mean of the first.
    pub loss_ratio: Option<f64>,
    pub sampling: Vec<ModeSummary>,
    /// Costs at the configured drop ratio.
    pub flops: FlopsReport,
}

impl RunSummary {
    pub fn mode(&self, mode: GuidanceMode) -> Option<&ModeSummary> {
        self.sampling.iter().find(|m| m.mode == mode)
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    sum / n.max(1) as f64
}

pub fn summarize_phase(history: &[StepMetrics]) -> Option<PhaseSummary> {
    if history.is_empty() {
        return None;
    }
    let n = history.len();
    let window = n.div_ceil(CURVE_POINTS).max(1);
    let curve = |f: fn(&StepMetrics) -> f64| {
        history
            .chunks(window)
            .map(|c| (c[0].iter, mean(c.iter().map(f))))
            .collect()
    };
    Some(PhaseSummary {
        iterations: n as u64,
        first50_loss: mean(history.iter().take(50).map(|m| m.loss)),
        last100_loss: mean(history[n.saturating_sub(100)..].iter().map(|m| m.loss)),
        loss_curve: curve(|m| m.loss),
        grad_norm_f_curve: curve(|m| m.grad_norm_f),
    })
}

fn order(phase: Phase) -> u8 {
    match phase {
        Phase::Pretrain => 0,
        Phase::Finetune => 1,
    }
}

/// Reads the step records written before `(phase, iteration)`, with their
/// original text.
fn metrics_before(path: &Path, phase: Phase, iteration: u64) -> Result<Vec<(StepMetrics, String)>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut kept = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line)?;
        if (order(m.phase), m.iter) < (order(phase), iteration) {
            kept.push((m, line));
        }
    }
    Ok(kept)
}

struct Sinks {
    metrics: BufWriter<File>,
    timings: BufWriter<File>,
}

impl Sinks {
    fn record(&mut self, m: &StepMetrics, ms: f64) -> Result<()> {
        serde_json::to_writer(&mut self.metrics, m)?;
        self.metrics.write_all(b"\n")?;
        let t = serde_json::json!({ "phase": m.phase, "iter": m.iter, "ms": ms });
        serde_json::to_writer(&mut self.timings, &t)?;
        self.timings.write_all(b"\n")?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.timings.flush()?;
        Ok(())
    }
}

/// Runs every configured stage from scratch.
pub fn run_pipeline(cfg: &RunConfig) -> Result<RunSummary> {
    run_with(cfg, None, |_| {})
}

/// Runs the configured stages, optionally continuing from a saved state.
///
/// A pre-training state whose phase is finished or not configured moves on to
/// fine-tuning; a fine-tuning state skips pre-training. `on_step` sees every
/// step record as it is produced.
pub fn run_with(
    cfg: &RunConfig,
    resume: Option<TrainState<f32>>,
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.io.out_dir;
    fs::create_dir_all(out.join("ckpt"))?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;

    let fresh = resume.is_none();
    let mut state = match resume {
        Some(s) => {
            if s.params.config != cfg.model {
                return Err(SprintError::Config(
                    "checkpoint model does not match the configured model".into(),
                ));
            }
            if s.seed != cfg.seed {
                return Err(SprintError::Config(format!(
                    "checkpoint was trained with seed {}, config says {}",
                    s.seed, cfg.seed
                )));
            }
            s
        }
        None => {
            let params = ModelParams::<f32>::init(&cfg.model, &mut seeded(cfg.seed, Purpose::Init))?;
            TrainState::new(params, cfg.seed)
        }
    };

    let metrics_path = out.join("metrics.ndjson");
    let earlier = if fresh {
        Vec::new()
    } else {
        metrics_before(&metrics_path, state.phase, state.iteration)?
    };
    {
        let mut w = BufWriter::new(File::create(&metrics_path)?);
        for (_, line) in &earlier {
            writeln!(w, "{line}")?;
        }
        w.flush()?;
    }
    let mut history: Vec<StepMetrics> = earlier.into_iter().map(|(m, _)| m).collect();
    let timings = OpenOptions::new()
        .create(true)
        .append(!fresh)
        .write(true)
        .truncate(fresh)
        .open(out.join("timings.ndjson"))?;
    let mut sinks = Sinks {
        metrics: BufWriter::new(OpenOptions::new().append(true).open(&metrics_path)?),
        timings: BufWriter::new(timings),
    };

    let needs_data = cfg.pretrain.is_some() || cfg.finetune.is_some();
    let dataset = if needs_data {
        Some(BlobDataset::generate(&cfg.data, cfg.seed)?)
    } else {
        None
    };

    for phase in [Phase::Pretrain, Phase::Finetune] {
        let Some(tc) = cfg.train_config(phase) else {
            continue;
        };
        if order(state.phase) > order(phase) {
            continue;
        }
        if state.phase != phase {
            state.begin_finetune();
        }
        let data = dataset.as_ref().expect("dataset exists when a phase is configured");
        let bs = tc.schedule.batch_size;
        while state.iteration < tc.schedule.iterations {
            let mut rng = stream(cfg.seed, phase.id(), state.iteration, Purpose::Batch);
            let (images, labels) = data.sample(&mut rng, bs);
            let x0 = patchify(&images, cfg.model.patch)?;
            let start = Instant::now();
            let step = match phase {
                Phase::Pretrain => state.pretrain_step(&x0, &labels, &tc),
                Phase::Finetune => state.finetune_step(&x0, &labels, &tc),
            };
            let m = match step {
                Ok(m) => m,
                Err(e) => {
                    sinks.flush()?;
                    if matches!(e, SprintError::NonFiniteLoss { .. }) {
                        state.save(&out.join("dump.ckpt"))?;
                    }
                    return Err(e);
                }
            };
            sinks.record(&m, start.elapsed().as_secs_f64() * 1e3)?;
            on_step(&m);
            history.push(m);
            if cfg.ckpt.every > 0 && state.iteration % cfg.ckpt.every == 0 {
                sinks.flush()?;
                state.save(&out.join("ckpt").join(format!("{phase}_{:06}.ckpt", state.iteration)))?;
            }
        }
        sinks.flush()?;
        let name = match phase {
            Phase::Pretrain => "pretrain.ckpt",
            Phase::Finetune => "final.ckpt",
        };
        state.save(&out.join(name))?;
    }
    if cfg.finetune.is_none() && cfg.pretrain.is_some() {
        state.save(&out.join("final.ckpt"))?;
    }

    let mut sampling = Vec::new();
    if let Some(sc) = &cfg.sample {
        let weights = if sc.use_ema { &state.ema } else { &state.params };
        let labels: Vec<usize> = (0..sc.count).map(|i| i % cfg.model.num_classes).collect();
        for &mode in &sc.modes {
            let spec = SamplerSpec {
                steps: sc.steps,
                mode,
                w: sc.w,
                labels: labels.clone(),
                seed: cfg.seed,
            };
            let mut counter = EvalCounter::default();
            let start = Instant::now();
            let images = generate_counted(weights, &spec, &mut counter)?;
            let t = serde_json::json!({ "sample": mode, "ms": start.elapsed().as_secs_f64() * 1e3 });
            serde_json::to_writer(&mut sinks.timings, &t)?;
            sinks.timings.write_all(b"\n")?;
            if sc.save {
                write_samples(&out.join("samples").join(mode.to_string()), &images, &labels, true)?;
            }
            sampling.push(ModeSummary {
                mode,
                w: sc.w,
                steps: sc.steps,
                count: sc.count,
                accuracy: quadrant_accuracy(&images, &labels)?,
                full_passes: counter.full,
                shallow_passes: counter.shallow,
            });
        }
        sinks.flush()?;
    }

    let split = |p: Phase| history.iter().filter(|m| m.phase == p).cloned().collect::<Vec<_>>();
    let pretrain = summarize_phase(&split(Phase::Pretrain));
    let finetune = summarize_phase(&split(Phase::Finetune));
    let first = pretrain.as_ref().or(finetune.as_ref());
    let last = finetune.as_ref().or(pretrain.as_ref());
    let loss_ratio = first.zip(last).map(|(f, l)| l.last100_loss / f.first50_loss);
    let summary = RunSummary {
        seed: cfg.seed,
        num_params: state.params.num_params(),
        pretrain,
        finetune,
        loss_ratio,
        sampling,
        flops: flops_model(&cfg.model, cfg.drop.mask.nominal_ratio(), CostMode::Sparse),
    };
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Samples from a saved state, from its EMA weights when `use_ema` is set.
pub fn sample_checkpoint(
    state: &TrainState<f32>,
    spec: &SamplerSpec,
    use_ema: bool,
) -> Result<(crate::grid::ImageBatch<f32>, EvalCounter)> {
    let weights = if use_ema { &state.ema } else { &state.params };
    let mut counter = EvalCounter::default();
    let images = generate_counted(weights, spec, &mut counter)?;
    Ok((images, counter))
}

