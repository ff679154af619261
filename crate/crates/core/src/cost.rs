//! Analytical forward-pass FLOPs.
//!
//! A multiply-accumulate counts as two FLOPs. Per transformer block over `T`
//! tokens of width `C`:
//!
//! | term                          | FLOPs        |
//! |-------------------------------|--------------|
//! | QKV and output projections    | `8 T C²`     |
//! | score and value matmuls       | `4 T² C`     |
//! | feed-forward, ratio 4         | `16 T C²`    |
//! | AdaLN modulation linear       | `12 T C²`    |
//! | norms and elementwise         | `5 T C`      |

use std::fmt::Write as _;

use serde::Serialize;

use crate::net::ModelConfig;

pub fn flops_block(tokens: u64, c: u64, heads: u64) -> u64 {
    debug_assert!(heads > 0 && c % heads == 0);
    let attn_proj = 4 * 2 * tokens * c * c;
    let attn_mix = 2 * 2 * tokens * tokens * c;
    let mlp = 2 * 2 * tokens * c * 4 * c;
    let ada = 2 * tokens * c * 6 * c;
    let elementwise = 5 * tokens * c;
    attn_proj + attn_mix + mlp + ada + elementwise
}

/// Which forward pass the per-stage figures of a report describe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostMode {
    /// Every stage on all tokens.
    Dense,
    /// Middle blocks on `N - floor(r N)` tokens.
    Sparse,
    /// Middle blocks skipped.
    PdgUncond,
}

impl std::str::FromStr for CostMode {
    type Err = crate::SprintError;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "dense" => Ok(CostMode::Dense),
            "sparse" => Ok(CostMode::Sparse),
            "pdg-uncond" => Ok(CostMode::PdgUncond),
            other => Err(crate::SprintError::InvalidArgument(format!(
                "unknown cost mode `{other}` (expected dense, sparse or pdg-uncond)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StageFlops {
    /// Patch and timestep embedders; reported, not included in totals.
    pub embedder: u64,
    pub encoder: u64,
    pub middle: u64,
    pub decoder: u64,
    pub fusion: u64,
    pub head: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.encoder + self.middle + self.decoder + self.fusion + self.head
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FlopsReport {
    pub mode: CostMode,
    pub drop_ratio: f64,
    /// Tokens seen by the middle blocks in `mode`.
    pub middle_tokens: u64,
    pub stages: StageFlops,
    pub dense_forward: u64,
    pub sparse_forward: u64,
    pub pdg_uncond_forward: u64,
    pub cfg_step: u64,
    pub pdg_step: u64,
}

impl FlopsReport {
    /// Forward plus a backward priced at twice the forward.
    pub fn train_iter(&self) -> u64 {
        3 * self.sparse_forward
    }
}

fn stages(cfg: &ModelConfig, middle_tokens: Option<u64>) -> StageFlops {
    let n = cfg.tokens() as u64;
    let c = cfg.hidden as u64;
    let h = cfg.heads as u64;
    let pd = cfg.patch_dim() as u64;
    let freq = cfg.freq_dim as u64;
    StageFlops {
        embedder: 2 * n * pd * c + 2 * freq * c + 2 * c * c,
        encoder: cfg.enc_depth as u64 * flops_block(n, c, h),
        middle: middle_tokens.map_or(0, |m| cfg.mid_depth as u64 * flops_block(m, c, h)),
        decoder: cfg.dec_depth as u64 * flops_block(n, c, h),
        fusion: 2 * n * 2 * c * c,
        head: 2 * n * c * 2 * c + 2 * n * c * pd + 5 * n * c,
    }
}

pub fn kept_tokens(n: u64, r: f64) -> u64 {
    n - (r * n as f64).floor() as u64
}

pub fn flops_model(cfg: &ModelConfig, r: f64, mode: CostMode) -> FlopsReport {
    let n = cfg.tokens() as u64;
    let kept = kept_tokens(n, r);
    let dense = stages(cfg, Some(n)).total();
    let sparse = stages(cfg, Some(kept)).total();
    let uncond = stages(cfg, None).total();
    let middle_tokens = match mode {
        CostMode::Dense => n,
        CostMode::Sparse => kept,
        CostMode::PdgUncond => 0,
    };
    let stage = stages(cfg, (mode != CostMode::PdgUncond).then_some(middle_tokens));
    FlopsReport {
        mode,
        drop_ratio: r,
        middle_tokens,
        stages: stage,
        dense_forward: dense,
        sparse_forward: sparse,
        pdg_uncond_forward: uncond,
        cfg_step: 2 * dense,
        pdg_step: dense + uncond,
    }
}

fn giga(x: u64) -> String {
    format!("{:.4}", x as f64 / 1e9)
}

pub fn render_table(report: &FlopsReport) -> String {
    let s = &report.stages;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "mode {:?}, drop ratio {}, middle tokens {}",
        report.mode, report.drop_ratio, report.middle_tokens
    );
    let _ = writeln!(out, "{:<22} {:>14}", "stage", "GFLOPs");
    for (name, v) in [
        ("embedder (excluded)", s.embedder),
        ("encoder", s.encoder),
        ("middle", s.middle),
        ("decoder", s.decoder),
        ("fusion", s.fusion),
        ("head", s.head),
        ("total", s.total()),
    ] {
        let _ = writeln!(out, "{name:<22} {:>14}", giga(v));
    }
    let _ = writeln!(out);
    let _ = writeln!(out, "{:<22} {:>14}", "mode total", "GFLOPs");
    for (name, v) in totals(report) {
        let _ = writeln!(out, "{name:<22} {:>14}", giga(v));
    }
    let _ = writeln!(
        out,
        "{:<22} {:>14.4}",
        "pdg-step / cfg-step",
        report.pdg_step as f64 / report.cfg_step as f64
    );
    out
}

fn totals(report: &FlopsReport) -> [(&'static str, u64); 6] {
    [
        ("dense-forward", report.dense_forward),
        ("sparse-forward", report.sparse_forward),
        ("pdg-uncond-forward", report.pdg_uncond_forward),
        ("cfg-step", report.cfg_step),
        ("pdg-step", report.pdg_step),
        ("train-iter", report.train_iter()),
    ]
}

/// `kind,name,flops` rows.
pub fn render_csv(report: &FlopsReport) -> String {
    let s = &report.stages;
    let mut out = String::from("kind,name,flops\n");
    for (name, v) in [
        ("embedder", s.embedder),
        ("encoder", s.encoder),
        ("middle", s.middle),
        ("decoder", s.decoder),
        ("fusion", s.fusion),
        ("head", s.head),
    ] {
        let _ = writeln!(out, "stage,{name},{v}");
    }
    for (name, v) in totals(report) {
        let _ = writeln!(out, "total,{name},{v}");
    }
    out
}

/// Architecture presets at 256x256 with an 8x-downsampling latent.
pub fn preset(name: &str) -> Option<ModelConfig> {
    let (depths, hidden, heads) = match name {
        "B/2" => ((2, 8, 2), 384, 6),
        "XL/2" => ((2, 24, 2), 1152, 16),
        _ => return None,
    };
    Some(ModelConfig {
        enc_depth: depths.0,
        mid_depth: depths.1,
        dec_depth: depths.2,
        hidden,
        heads,
        patch: 2,
        channels: 4,
        num_classes: 1000,
        grid_rows: 16,
        grid_cols: 16,
        mlp_ratio: 4,
        freq_dim: 256,
        abs_pos: false,
    })
}
