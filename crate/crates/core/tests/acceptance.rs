//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,5,10` restricts the run to the listed criteria.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use sprint_core::cost::{flops_model, preset, CostMode};
use sprint_core::flow::{velocity_loss, velocity_loss_grad};
use sprint_core::grid::{unpatchify, GridShape, TokenBatch};
use sprint_core::harness::config::RunConfig;
use sprint_core::harness::{run_with, RunSummary};
use sprint_core::net::{stage_of, ModelConfig, ModelParams, Stage};
use sprint_core::rng::{seeded, Purpose};
use sprint_core::sample::{generate, pdg_uncond, GuidanceMode, SamplerSpec};
use sprint_core::subsample::{
    apply_drop, pad_with_mask, random_mask, structured_mask, structured_mask_from_choices, DropMask, DropStrategy,
};
use sprint_core::Scalar;
use statrs::distribution::{ChiSquared, ContinuousCDF};

type Outcome = Result<String, String>;

/// Same allocator as the `sprint` binary, so timings match it.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- 1

fn gradcheck_config() -> ModelConfig {
    ModelConfig {
        enc_depth: 1,
        mid_depth: 1,
        dec_depth: 1,
        hidden: 8,
        heads: 2,
        patch: 2,
        channels: 1,
        num_classes: 3,
        grid_rows: 4,
        grid_cols: 4,
        mlp_ratio: 4,
        freq_dim: 16,
        abs_pos: true,
    }
}

struct Probe {
    x: TokenBatch<f64>,
    target: TokenBatch<f64>,
    t: Vec<f64>,
    labels: Vec<Option<usize>>,
    path_drop: Vec<bool>,
    mask: DropMask,
}

impl Probe {
    fn loss(&self, p: &ModelParams<f64>) -> f64 {
        let out = p
            .forward_pretrain(&self.x, &self.t, &self.labels, &self.mask, &self.path_drop)
            .unwrap();
        velocity_loss(&out, &self.target).unwrap()
    }

    fn grads<T: Scalar>(&self, p: &ModelParams<T>) -> Vec<Vec<f64>> {
        let cast = |b: &TokenBatch<f64>| TokenBatch::dense(b.tokens.mapv(T::of), b.grid).unwrap();
        let (x, target) = (cast(&self.x), cast(&self.target));
        let t: Vec<T> = self.t.iter().map(|&v| T::of(v)).collect();
        let (out, tape) = p
            .forward_train(&x, &t, &self.labels, &self.mask, &self.path_drop)
            .unwrap();
        let d = velocity_loss_grad(&out, &target).unwrap();
        let g = p.backward(&tape, d.view()).unwrap();
        g.named().iter().map(|n| n.data.iter().map(|v| v.f64()).collect()).collect()
    }
}

/// Analytic gradients at 32 and 64 bits against central differences of the
/// 64-bit loss over 200 random coordinates.
fn criterion_1() -> Outcome {
    let cfg = gradcheck_config();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut p = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
    let d = Normal::new(0.0, 0.3).unwrap();
    for np in p.named_mut() {
        np.data.iter_mut().for_each(|v| *v = d.sample(&mut rng));
    }
    let (b, n, pd) = (3, cfg.tokens(), cfg.patch_dim());
    let mut batch = || TokenBatch::dense(Array3::from_shape_simple_fn((b, n, pd), || StandardNormal.sample(&mut rng)), cfg.grid()).unwrap();
    let (x, target) = (batch(), batch());
    let probe = Probe {
        x,
        target,
        t: vec![0.2, 0.7, 0.5],
        labels: vec![Some(1), None, Some(2)],
        path_drop: vec![false, false, true],
        mask: structured_mask(cfg.grid(), 2, 1, &mut rng).unwrap(),
    };

    // Float32 gradients are checked on the float32-rounded weights.
    let p32 = p.cast::<f32>();
    let p32_as_64 = p32.cast::<f64>();
    let g64 = probe.grads(&p);
    let g32 = probe.grads(&p32);
    let h = 1e-3;
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    // Coordinates with vanishing gradients are compared on an absolute scale.
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-4);
    for _ in 0..200 {
        let pi = rng.random_range(0..g64.len());
        let ci = rng.random_range(0..g64[pi].len());
        // Fourth-order central difference.
        let central = |base: &ModelParams<f64>| {
            let at = |dx: f64| {
                let mut q = base.clone();
                q.named_mut()[pi].data[ci] += dx;
                probe.loss(&q)
            };
            (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
        };
        worst64 = worst64.max(rel(g64[pi][ci], central(&p)));
        worst32 = worst32.max(rel(g32[pi][ci], central(&p32_as_64)));
    }
    check(
        worst32 < 1e-3 && worst64 < 1e-5,
        format!("worst relative error f32 {worst32:.2e} (< 1e-3), f64 {worst64:.2e} (< 1e-5)"),
    )
}

// ---------------------------------------------------------------- 2, 3

fn criterion_2() -> Outcome {
    let b2 = preset("B/2").unwrap();
    let cost = |e, m, d| {
        let cfg = ModelConfig { enc_depth: e, mid_depth: m, dec_depth: d, ..b2.clone() };
        flops_model(&cfg, 0.75, CostMode::Sparse).sparse_forward as f64
    };
    let base = cost(2, 8, 2);
    let (a, b) = (cost(3, 6, 3) / base, cost(5, 2, 5) / base);
    check(
        (1.12..=1.37).contains(&a) && (1.58..=1.93).contains(&b),
        format!("3-6-3 / 2-8-2 = {a:.3} in [1.12, 1.37]; 5-2-5 / 2-8-2 = {b:.3} in [1.58, 1.93]"),
    )
}

fn criterion_3() -> Outcome {
    let r = flops_model(&preset("XL/2").unwrap(), 0.75, CostMode::Dense);
    let ratio = r.pdg_step as f64 / r.cfg_step as f64;
    check((0.53..=0.63).contains(&ratio), format!("XL/2 pdg-step / cfg-step = {ratio:.4} in [0.53, 0.63]"))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    // Every assignment of one kept cell to each of the four 2x2 groups.
    let grid = GridShape::new(4, 4);
    let mut counts = [0usize; 16];
    let mut total = 0usize;
    for code in 0..256usize {
        let choices: Vec<Vec<usize>> = (0..4).map(|g| vec![(code >> (2 * g)) & 3]).collect();
        let m = structured_mask_from_choices(grid, 2, 1, &choices).map_err(|e| e.to_string())?;
        for &i in m.kept_indices() {
            counts[i] += 1;
        }
        total += 1;
    }
    let exact = counts.iter().all(|&c| c * 4 == total);

    let grid = GridShape::new(16, 16);
    let draws = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut keeps = vec![0usize; grid.len()];
    let mut per_group_ok = true;
    for _ in 0..draws {
        let m = structured_mask(grid, 2, 1, &mut rng).map_err(|e| e.to_string())?;
        let mut in_group = [0usize; 64];
        for &i in m.kept_indices() {
            keeps[i] += 1;
            in_group[(i / 16 / 2) * 8 + (i % 16) / 2] += 1;
        }
        per_group_ok &= in_group.iter().all(|&k| k == 1);
    }
    // Each group's four counts are a multinomial with total `draws`.
    let expected = draws as f64 / 4.0;
    let stat: f64 = keeps.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let dof = 64.0 * 3.0;
    let p = 1.0 - ChiSquared::new(dof).unwrap().cdf(stat);
    check(
        exact && per_group_ok && p > 0.01,
        format!("4x4 enumeration exact: {exact}; k per group always: {per_group_ok}; 16x16 chi-square {stat:.1} on {dof} dof, p = {p:.3}"),
    )
}

// ---------------------------------------------------------------- 5

fn tiny() -> ModelConfig {
    ModelConfig {
        enc_depth: 1,
        mid_depth: 2,
        dec_depth: 1,
        hidden: 16,
        heads: 2,
        grid_rows: 4,
        grid_cols: 4,
        freq_dim: 16,
        ..ModelConfig::default()
    }
}

fn randomize(p: &mut ModelParams<f32>, filter: impl Fn(&str) -> bool, rng: &mut ChaCha8Rng, std: f32) {
    let d = Normal::new(0.0f32, std).unwrap();
    for np in p.named_mut().into_iter().filter(|n| filter(&n.name)) {
        np.data.iter_mut().for_each(|v| *v = d.sample(rng));
    }
}

fn criterion_5() -> Outcome {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    randomize(&mut p, |_| true, &mut rng, 0.2);
    let x = TokenBatch::dense(
        Array3::from_shape_simple_fn((4, 16, cfg.patch_dim()), || StandardNormal.sample(&mut rng)),
        cfg.grid(),
    )
    .unwrap();
    let t = [0.1f32, 0.4, 0.6, 0.95];
    let labels = [Some(0), None, Some(2), Some(3)];
    let pd = [false, true, false, false];
    let mut failures = Vec::new();

    let sparse = p.forward_pretrain(&x, &t, &labels, &DropMask::keep_all(16), &pd).unwrap();
    let full = p.forward_full(&x, &t, &labels, &pd).unwrap();
    if sparse.tokens != full.tokens {
        failures.push("keep-all pretrain differs from full");
    }

    let spec = |mode| SamplerSpec { steps: 8, mode, w: 1.0, labels: vec![0, 1, 2, 3, 1], seed: 5 };
    let plain = generate(&p, &spec(GuidanceMode::None)).unwrap();
    if generate(&p, &spec(GuidanceMode::Cfg)).unwrap() != plain {
        failures.push("cfg at w=1 differs from the conditional trajectory");
    }

    let uncond = pdg_uncond(&p, &x, &t).unwrap();
    for _ in 0..5 {
        let mut q = p.clone();
        randomize(&mut q, |n| stage_of(n) == Stage::Middle, &mut rng, 1.0);
        if pdg_uncond(&q, &x, &t).unwrap().tokens != uncond.tokens {
            failures.push("pdg unconditional branch depends on middle blocks");
            break;
        }
    }

    // Zero-gated blocks: the rest of each block's weights cannot matter.
    let fresh = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let mut scrambled = fresh.clone();
    let is_gated_body = |n: &str| {
        matches!(stage_of(n), Stage::Encoder | Stage::Middle | Stage::Decoder) && !n.contains(".ada.")
    };
    randomize(&mut scrambled, is_gated_body, &mut rng, 1.0);
    let mask = structured_mask(cfg.grid(), 2, 1, &mut rng).unwrap();
    let a = fresh.forward_pretrain(&x, &t, &labels, &mask, &pd).unwrap();
    let b = scrambled.forward_pretrain(&x, &t, &labels, &mask, &pd).unwrap();
    if a.tokens != b.tokens {
        failures.push("fresh blocks are not identities");
    }

    check(
        failures.is_empty(),
        if failures.is_empty() {
            "keep-all = full, cfg(w=1) = conditional, pdg uncond invariant, fresh blocks identity (all bitwise)".into()
        } else {
            failures.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.random_range(1..=3);
        let grid = GridShape::new(n * rng.random_range(1..=4), n * rng.random_range(1..=4));
        let mask = if rng.random_bool(0.5) {
            structured_mask(grid, n, rng.random_range(1..=n * n), &mut rng).unwrap()
        } else {
            random_mask(grid.len(), rng.random_range(0.0..0.95), &mut rng).unwrap()
        };
        let ch = rng.random_range(1..=5);
        let b = rng.random_range(1..=3);
        let x = Array3::from_shape_simple_fn((b, grid.len(), ch), || StandardNormal.sample(&mut rng));
        let x: TokenBatch<f32> = TokenBatch::dense(x, grid).unwrap();
        let m = Array1::from_shape_simple_fn(ch, || StandardNormal.sample(&mut rng));
        let out = pad_with_mask(&apply_drop(&x, &mask).unwrap(), &mask, m.view()).unwrap();
        for ((bi, i, c), v) in out.tokens.indexed_iter() {
            let want: f32 = if mask.keep()[i] { x.tokens[[bi, i, c]] } else { m[c] };
            if v.to_bits() != want.to_bits() {
                mismatches += 1;
            }
        }
    }
    check(mismatches == 0, format!("1000 random (x, m) pairs, {mismatches} mismatched values"))
}

// ---------------------------------------------------------------- 7, 8, 9

fn runs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn desk_run(name: &str, mask: DropStrategy, sample: bool) -> Result<(RunSummary, f64), String> {
    let mut cfg = RunConfig::default();
    cfg.drop.mask = mask;
    cfg.io.out_dir = runs_dir().join(name);
    match cfg.sample.as_mut() {
        Some(spec) if sample => spec.modes = vec![GuidanceMode::Pdg],
        _ => cfg.sample = None,
    }
    let _ = std::fs::remove_dir_all(&cfg.io.out_dir);
    let start = Instant::now();
    let summary = run_with(&cfg, None, |m| {
        if (m.iter + 1) % 1000 == 0 {
            eprintln!("  [{name}] {} {} loss {:.4}", m.phase, m.iter + 1, m.loss);
        }
    })
    .map_err(|e| e.to_string())?;
    Ok((summary, start.elapsed().as_secs_f64()))
}

fn final_loss(s: &RunSummary) -> f64 {
    s.finetune.as_ref().or(s.pretrain.as_ref()).map_or(f64::NAN, |p| p.last100_loss)
}

fn criterion_7(main: &RunSummary, secs: f64) -> Outcome {
    let first = main.pretrain.as_ref().map_or(f64::NAN, |p| p.first50_loss);
    let last = final_loss(main);
    let ratio = main.loss_ratio.unwrap_or(f64::NAN);
    let pdg = main.mode(GuidanceMode::Pdg).map_or(f64::NAN, |s| s.accuracy);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    check(
        ratio <= 0.5 && pdg >= 0.8 && secs <= 900.0,
        format!(
            "loss first-50 {first:.4} -> last-100 {last:.4} (ratio {ratio:.3} <= 0.5); PDG w=2 accuracy {pdg:.3} (>= 0.8); {secs:.0} s (<= 900) on {cores} core(s)"
        ),
    )
}

fn criterion_8(structured: &RunSummary, random: &RunSummary) -> Outcome {
    let (s, r) = (final_loss(structured), final_loss(random));
    let pre = |x: &RunSummary| x.pretrain.as_ref().map_or(f64::NAN, |p| p.last100_loss);
    check(
        s <= r,
        format!(
            "final last-100 loss structured {s:.5} vs random {r:.5}; end-of-pretraining {:.5} vs {:.5}",
            pre(structured),
            pre(random)
        ),
    )
}

fn criterion_9() -> Outcome {
    let a = runs_dir().join("structured");
    let b = runs_dir().join("repeat");
    let same = |f: &str| -> Result<bool, String> {
        let x = std::fs::read(a.join(f)).map_err(|e| e.to_string())?;
        let y = std::fs::read(b.join(f)).map_err(|e| e.to_string())?;
        Ok(x == y)
    };
    let metrics = same("metrics.ndjson")?;
    let ckpt = same("final.ckpt")?;
    check(metrics && ckpt, format!("metrics.ndjson identical: {metrics}; final.ckpt identical: {ckpt}"))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let cfg = tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let c: Vec<f32> = (0..cfg.patch_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
    let mut p = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    randomize(&mut p, |_| true, &mut rng, 0.3);
    p.final_layer.out.weight.fill(0.0);
    p.final_layer.out.bias.assign(&Array1::from(c.clone()));
    let mut bad = Vec::new();
    let steps: Vec<usize> = (1..=64).chain([100, 250, 1000]).collect();
    for &n in &steps {
        let spec = SamplerSpec { steps: n, mode: GuidanceMode::None, w: 1.0, labels: vec![0, 3], seed: 10 };
        let got = generate(&p, &spec).unwrap();
        let mut r = seeded(spec.seed, Purpose::Sampler);
        let x1 = Array3::<f32>::from_shape_simple_fn((2, cfg.tokens(), cfg.patch_dim()), || StandardNormal.sample(&mut r));
        let want = Array3::from_shape_fn(x1.raw_dim(), |(b, i, k)| x1[[b, i, k]] - c[k]);
        let want = unpatchify(&TokenBatch::dense(want, cfg.grid()).unwrap(), cfg.patch, cfg.channels).unwrap();
        if got != want {
            bad.push(n);
        }
    }
    check(
        bad.is_empty(),
        format!("x1 - c reproduced bitwise for {} step counts (1..=64, 100, 250, 1000); failures at {bad:?}", steps.len()),
    )
}

// ----------------------------------------------------------------

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: u32| only.as_ref().is_none_or(|o| o.contains(&i));
    let mut results: Vec<(u32, &str, Outcome, f64)> = Vec::new();
    let mut run = |i: u32, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        if wanted(i) {
            let start = Instant::now();
            let out = f();
            let secs = start.elapsed().as_secs_f64();
            let tag = if out.is_ok() { "PASS" } else { "FAIL" };
            let detail = match &out {
                Ok(d) | Err(d) => d,
            };
            println!("criterion {i:>2} {tag}  {name}: {detail} [{secs:.1} s]");
            results.push((i, name, out, secs));
        }
    };

    run(1, "gradient check", &mut criterion_1);
    run(2, "split FLOPs ratios", &mut criterion_2);
    run(3, "guidance FLOPs ratio", &mut criterion_3);
    run(4, "structured subsampling", &mut criterion_4);
    run(5, "degeneracy and guidance identities", &mut criterion_5);
    run(6, "mask round trip", &mut criterion_6);

    let need_main = [7, 8, 9].into_iter().any(wanted);
    let main_run = need_main.then(|| desk_run("structured", DropStrategy::Structured { n: 2, k: 1 }, true));
    if let Some(main_run) = &main_run {
        let random = wanted(8).then(|| desk_run("random", DropStrategy::Random { ratio: 0.75 }, false));
        let repeat = wanted(9).then(|| desk_run("repeat", DropStrategy::Structured { n: 2, k: 1 }, false));
        run(7, "desk-scale generation", &mut || {
            let (s, secs) = main_run.as_ref().map_err(Clone::clone)?;
            criterion_7(s, *secs)
        });
        run(8, "structured vs random drop", &mut || {
            let (s, _) = main_run.as_ref().map_err(Clone::clone)?;
            let (r, _) = random.as_ref().expect("random run requested").as_ref().map_err(Clone::clone)?;
            criterion_8(s, r)
        });
        run(9, "determinism", &mut || {
            main_run.as_ref().map_err(Clone::clone)?;
            repeat.as_ref().expect("repeat run requested").as_ref().map_err(Clone::clone)?;
            criterion_9()
        });
    }
    run(10, "sampler exactness", &mut criterion_10);

    let failed: Vec<u32> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0).collect();
    println!(
        "acceptance: {} passed, {} failed{}",
        results.len() - failed.len(),
        failed.len(),
        if failed.is_empty() { String::new() } else { format!(" ({failed:?})") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
