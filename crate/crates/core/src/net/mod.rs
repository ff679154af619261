//! The three-stage network.
//!
//! ```text
//! x_t ──embed──> f_θ (dense) ──┬──────────────────────────────┐
//!                              └─drop─> g_θ (sparse) ─pad(M)─┐ │
//!                                                            concat ─> fusion ─> h_θ (dense) ─> head ─> v̂
//! ```
//!
//! Every block is conditioned on `silu(t_embed(t) + y_embed(c))` through
//! AdaLN-zero modulation. Samples flagged for path drop have their whole
//! padded sparse path replaced by the mask token, and `g_θ` is not evaluated
//! for them at all.

mod block;
pub mod checkpoint;
pub mod layers;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array, Array1, Array2, Array3, ArrayView2, ArrayView3, Dimension, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use block::{Block, BlockCache, StageCtx};
pub use layers::Linear;

use crate::error::{Result, SprintError};
use crate::grid::{GridPos, GridShape, RopeTable, TokenBatch};
use crate::subsample::DropMask;
use crate::Scalar;
use layers::{
    gather_rows, layer_norm, layer_norm_backward, modulate, modulate_backward, scatter_add_rows,
    silu, silu_grad, LayerNormCache,
};

/// Timesteps in `[0, 1]` are scaled by this before the sinusoidal features.
pub const TIME_SCALE: f64 = 1000.0;
pub const MASK_TOKEN_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub enc_depth: usize,
    pub mid_depth: usize,
    pub dec_depth: usize,
    pub hidden: usize,
    pub heads: usize,
    pub patch: usize,
    /// Image channels.
    pub channels: usize,
    /// Number of real classes; the null class gets one extra embedding row.
    pub num_classes: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub mlp_ratio: usize,
    pub freq_dim: usize,
    /// Add the fixed 2D sin-cos table to the token embedding.
    pub abs_pos: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            enc_depth: 2,
            mid_depth: 8,
            dec_depth: 2,
            hidden: 64,
            heads: 4,
            patch: 2,
            channels: 1,
            num_classes: 4,
            grid_rows: 8,
            grid_cols: 8,
            mlp_ratio: 4,
            freq_dim: 256,
            abs_pos: true,
        }
    }
}

impl ModelConfig {
    pub fn grid(&self) -> GridShape {
        GridShape::new(self.grid_rows, self.grid_cols)
    }

    pub fn tokens(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Width of a patchified token, `patch² · channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_size(&self) -> (usize, usize) {
        (self.grid_rows * self.patch, self.grid_cols * self.patch)
    }

    pub fn depth(&self) -> usize {
        self.enc_depth + self.mid_depth + self.dec_depth
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SprintError::Config(m));
        if self.enc_depth == 0 || self.mid_depth == 0 || self.dec_depth == 0 {
            return bad(format!(
                "every stage needs at least one block, got {}-{}-{}",
                self.enc_depth, self.mid_depth, self.dec_depth
            ));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return bad(format!(
                "hidden {} is not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.head_dim() % 4 != 0 {
            return bad(format!(
                "head_dim {} must be divisible by 4 for 2D RoPE",
                self.head_dim()
            ));
        }
        if self.patch == 0 || self.channels == 0 || self.num_classes == 0 {
            return bad("patch, channels and num_classes must be positive".into());
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return bad("grid must be non-empty".into());
        }
        if self.mlp_ratio == 0 || self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return bad("mlp_ratio must be positive and freq_dim even".into());
        }
        Ok(())
    }
}

/// A named, read-only view of one parameter tensor.
#[derive(Debug)]
pub struct NamedRef<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [T],
}

impl<'a, T> NamedRef<'a, T> {
    pub(crate) fn new<D: Dimension>(name: String, array: &'a Array<T, D>) -> Self {
        Self {
            name,
            shape: array.shape().to_vec(),
            data: array.as_slice().expect("parameters are contiguous"),
        }
    }
}

#[derive(Debug)]
pub struct NamedMut<'a, T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a mut [T],
}

impl<'a, T> NamedMut<'a, T> {
    pub(crate) fn new<D: Dimension>(name: String, array: &'a mut Array<T, D>) -> Self {
        Self {
            name,
            shape: array.shape().to_vec(),
            data: array.as_slice_mut().expect("parameters are contiguous"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimestepEmbedder<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinalLayer<T> {
    /// `C -> 2C`: shift then scale.
    pub ada: Linear<T>,
    pub out: Linear<T>,
}

/// All learnable state. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T = f32> {
    pub config: ModelConfig,
    pub x_embed: Linear<T>,
    pub t_embed: TimestepEmbedder<T>,
    /// `(num_classes + 1, C)`; the last row is the null class.
    pub y_embed: Array2<T>,
    pub enc: Vec<Block<T>>,
    pub mid: Vec<Block<T>>,
    pub dec: Vec<Block<T>>,
    /// `2C -> C` over `[f ; g_pad]`.
    pub fusion: Linear<T>,
    pub mask_token: Array1<T>,
    pub final_layer: FinalLayer<T>,
}

/// Which blocks a named parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Embed,
    Encoder,
    Middle,
    Decoder,
    Fusion,
    MaskToken,
    Head,
}

pub fn stage_of(name: &str) -> Stage {
    match name.split('.').next().unwrap_or_default() {
        "enc" => Stage::Encoder,
        "mid" => Stage::Middle,
        "dec" => Stage::Decoder,
        "fusion" => Stage::Fusion,
        "mask_token" => Stage::MaskToken,
        "final" => Stage::Head,
        _ => Stage::Embed,
    }
}

fn normal_array<T: Scalar, R: Rng + ?Sized>(shape: (usize, usize), std: f64, rng: &mut R) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Array2::from_shape_fn(shape, |_| T::of(dist.sample(rng)))
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.hidden;
        let blocks = |n: usize, rng: &mut R| -> Vec<Block<T>> {
            (0..n)
                .map(|_| Block::init(c, config.heads, config.mlp_ratio, rng))
                .collect()
        };
        let x_embed = Linear::xavier(config.patch_dim(), c, rng);
        let t_embed = TimestepEmbedder {
            fc1: Linear::normal(config.freq_dim, c, 0.02, rng),
            fc2: Linear::normal(c, c, 0.02, rng),
        };
        let y_embed = normal_array((config.num_classes + 1, c), 0.02, rng);
        let enc = blocks(config.enc_depth, rng);
        let mid = blocks(config.mid_depth, rng);
        let dec = blocks(config.dec_depth, rng);
        let fusion = Linear::xavier(2 * c, c, rng);
        let mask_token = normal_array::<T, R>((1, c), MASK_TOKEN_STD, rng)
            .into_shape_with_order(c)
            .expect("1 x C reshapes to C");
        let final_layer = FinalLayer {
            ada: Linear::zeros(c, 2 * c),
            out: Linear::zeros(c, config.patch_dim()),
        };
        Ok(Self {
            config: config.clone(),
            x_embed,
            t_embed,
            y_embed,
            enc,
            mid,
            dec,
            fusion,
            mask_token,
            final_layer,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let zl = |l: &Linear<T>| Linear::zeros(l.input_dim(), l.output_dim());
        Self {
            config: self.config.clone(),
            x_embed: zl(&self.x_embed),
            t_embed: TimestepEmbedder {
                fc1: zl(&self.t_embed.fc1),
                fc2: zl(&self.t_embed.fc2),
            },
            y_embed: Array2::zeros(self.y_embed.raw_dim()),
            enc: self.enc.iter().map(Block::zeros_like).collect(),
            mid: self.mid.iter().map(Block::zeros_like).collect(),
            dec: self.dec.iter().map(Block::zeros_like).collect(),
            fusion: zl(&self.fusion),
            mask_token: Array1::zeros(self.mask_token.len()),
            final_layer: FinalLayer {
                ada: zl(&self.final_layer.ada),
                out: zl(&self.final_layer.out),
            },
        }
    }

    /// Every parameter tensor in a fixed order.
    pub fn named(&self) -> Vec<NamedRef<'_, T>> {
        let mut out = Vec::new();
        self.x_embed.collect("x_embed", &mut out);
        self.t_embed.fc1.collect("t_embed.fc1", &mut out);
        self.t_embed.fc2.collect("t_embed.fc2", &mut out);
        out.push(NamedRef::new("y_embed".into(), &self.y_embed));
        for (stage, blocks) in [("enc", &self.enc), ("mid", &self.mid), ("dec", &self.dec)] {
            for (i, b) in blocks.iter().enumerate() {
                b.collect(&format!("{stage}.{i}"), &mut out);
            }
        }
        self.fusion.collect("fusion", &mut out);
        out.push(NamedRef::new("mask_token".into(), &self.mask_token));
        self.final_layer.ada.collect("final.ada", &mut out);
        self.final_layer.out.collect("final.out", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<NamedMut<'_, T>> {
        let mut out = Vec::new();
        self.x_embed.collect_mut("x_embed", &mut out);
        self.t_embed.fc1.collect_mut("t_embed.fc1", &mut out);
        self.t_embed.fc2.collect_mut("t_embed.fc2", &mut out);
        out.push(NamedMut::new("y_embed".into(), &mut self.y_embed));
        for (stage, blocks) in [
            ("enc", &mut self.enc),
            ("mid", &mut self.mid),
            ("dec", &mut self.dec),
        ] {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.collect_mut(&format!("{stage}.{i}"), &mut out);
            }
        }
        self.fusion.collect_mut("fusion", &mut out);
        out.push(NamedMut::new("mask_token".into(), &mut self.mask_token));
        self.final_layer.ada.collect_mut("final.ada", &mut out);
        self.final_layer.out.collect_mut("final.out", &mut out);
        out
    }

    pub fn num_params(&self) -> usize {
        self.named().iter().map(|p| p.data.len()).sum()
    }

    /// Elementwise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut out = ModelParams::<U>::init(&self.config, &mut rng)
            .expect("config already validated");
        for (dst, src) in out.named_mut().into_iter().zip(self.named()) {
            for (d, &s) in dst.data.iter_mut().zip(src.data) {
                *d = U::of(s.f64());
            }
        }
        out
    }

    pub fn forward_pretrain(
        &self,
        x_t: &TokenBatch<T>,
        t: &[T],
        labels: &[Option<usize>],
        mask: &DropMask,
        path_drop: &[bool],
    ) -> Result<TokenBatch<T>> {
        let (out, _) = self.run(x_t, t, labels, mask, path_drop, false)?;
        Ok(out)
    }

    /// Full-token forward: the pre-training forward with the keep-all mask.
    pub fn forward_full(
        &self,
        x_t: &TokenBatch<T>,
        t: &[T],
        labels: &[Option<usize>],
        path_drop: &[bool],
    ) -> Result<TokenBatch<T>> {
        let mask = DropMask::keep_all(x_t.len());
        self.forward_pretrain(x_t, t, labels, &mask, path_drop)
    }

    /// Forward pass that records what [`ModelParams::backward`] needs.
    pub fn forward_train(
        &self,
        x_t: &TokenBatch<T>,
        t: &[T],
        labels: &[Option<usize>],
        mask: &DropMask,
        path_drop: &[bool],
    ) -> Result<(TokenBatch<T>, Tape<T>)> {
        let (out, tape) = self.run(x_t, t, labels, mask, path_drop, true)?;
        Ok((out, tape.expect("tape requested")))
    }

    fn validate_inputs(
        &self,
        x_t: &TokenBatch<T>,
        t: &[T],
        labels: &[Option<usize>],
        mask: &DropMask,
        path_drop: &[bool],
    ) -> Result<()> {
        let cfg = &self.config;
        let (b, n, c) = x_t.tokens.dim();
        if n != cfg.tokens() || c != cfg.patch_dim() || x_t.grid != cfg.grid() {
            return Err(SprintError::Shape {
                expected: vec![b, cfg.tokens(), cfg.patch_dim()],
                got: vec![b, n, c],
            });
        }
        if x_t.positions != cfg.grid().positions() {
            return Err(SprintError::Dimension(
                "network input must be a dense row-major token grid".into(),
            ));
        }
        if mask.len() != n {
            return Err(SprintError::Dimension(format!(
                "mask covers {} tokens, grid has {n}",
                mask.len()
            )));
        }
        if mask.kept_len() == 0 {
            return Err(SprintError::InvalidArgument("mask keeps no tokens".into()));
        }
        if t.len() != b || labels.len() != b || path_drop.len() != b {
            return Err(SprintError::Dimension(format!(
                "batch {b} but {} timesteps, {} labels, {} path-drop flags",
                t.len(),
                labels.len(),
                path_drop.len()
            )));
        }
        if let Some(bad) = labels.iter().flatten().find(|&&l| l >= cfg.num_classes) {
            return Err(SprintError::InvalidArgument(format!(
                "class label {bad} outside 0..{}",
                cfg.num_classes
            )));
        }
        Ok(())
    }

    fn run(
        &self,
        x_t: &TokenBatch<T>,
        t: &[T],
        labels: &[Option<usize>],
        mask: &DropMask,
        path_drop: &[bool],
        record: bool,
    ) -> Result<(TokenBatch<T>, Option<Tape<T>>)> {
        self.validate_inputs(x_t, t, labels, mask, path_drop)?;
        let cfg = &self.config;
        let (b, n, _) = x_t.tokens.dim();
        let c = cfg.hidden;
        let grid = cfg.grid();
        let rope = RopeTable::<T>::for_grid(cfg.head_dim(), grid)?;
        let all_pos = grid.positions();

        // Conditioning.
        let t_feat = timestep_features::<T>(t, cfg.freq_dim);
        let t_pre = self.t_embed.fc1.forward(t_feat.view());
        let t_act = t_pre.mapv(silu);
        let mut cond = self.t_embed.fc2.forward(t_act.view());
        let label_rows: Vec<usize> = labels.iter().map(|l| l.unwrap_or(cfg.num_classes)).collect();
        for (mut row, &l) in cond.outer_iter_mut().zip(&label_rows) {
            row += &self.y_embed.row(l);
        }
        let cond_act = cond.mapv(silu);

        // Dense encoder.
        let x_in = x_t
            .tokens
            .view()
            .into_shape_with_order((b * n, cfg.patch_dim()))
            .expect("contiguous tokens")
            .to_owned();
        let mut h = self.x_embed.forward(x_in.view());
        if cfg.abs_pos {
            let pe = sincos_pos_embed::<T>(c, grid);
            for mut chunk in h.axis_chunks_iter_mut(ndarray::Axis(0), n) {
                chunk += &pe;
            }
        }
        let dense_ctx = StageCtx {
            heads: cfg.heads,
            tokens: n,
            positions: &all_pos,
            rope: &rope,
        };
        let mut enc_caches = Vec::with_capacity(self.enc.len());
        for blk in &self.enc {
            let (out, cache) = blk.forward(h, cond_act.view(), &dense_ctx)?;
            h = out;
            if record {
                enc_caches.push(cache);
            }
        }
        let f = h;

        // Sparse middle path, only for samples that keep it.
        let active: Vec<usize> = (0..b).filter(|&i| !path_drop[i]).collect();
        let kept = mask.kept_indices().to_vec();
        let kept_pos: Vec<GridPos> = kept.iter().map(|&i| all_pos[i]).collect();
        let cond_act_mid = gather_rows(cond_act.view(), 1, &active, &[0]);
        let mut mid_caches = Vec::with_capacity(self.mid.len());
        let mut g_pad = Array2::<T>::zeros((b * n, c));
        let mut is_mask_row = vec![true; b * n];
        for mut row in g_pad.outer_iter_mut() {
            row.assign(&self.mask_token);
        }
        if !active.is_empty() {
            let mid_ctx = StageCtx {
                heads: cfg.heads,
                tokens: kept.len(),
                positions: &kept_pos,
                rope: &rope,
            };
            let mut g = gather_rows(f.view(), n, &active, &kept);
            for blk in &self.mid {
                let (out, cache) = blk.forward(g, cond_act_mid.view(), &mid_ctx)?;
                g = out;
                if record {
                    mid_caches.push(cache);
                }
            }
            let mut r = 0;
            for &bi in &active {
                for &i in &kept {
                    g_pad.row_mut(bi * n + i).assign(&g.row(r));
                    is_mask_row[bi * n + i] = false;
                    r += 1;
                }
            }
        }

        // Fusion of [f ; g_pad].
        let mut h = Array2::<T>::zeros((b * n, c));
        let w = &self.fusion.weight;
        general_mat_mul(T::one(), &f, &w.slice(s![0..c, ..]), T::zero(), &mut h);
        general_mat_mul(T::one(), &g_pad, &w.slice(s![c..2 * c, ..]), T::one(), &mut h);
        h += &self.fusion.bias;

        // Dense decoder and head.
        let mut dec_caches = Vec::with_capacity(self.dec.len());
        for blk in &self.dec {
            let (out, cache) = blk.forward(h, cond_act.view(), &dense_ctx)?;
            h = out;
            if record {
                dec_caches.push(cache);
            }
        }
        let head_mods = self.final_layer.ada.forward(cond_act.view());
        let head_ln = layer_norm(h.view());
        let head_in = modulate(
            head_ln.xhat.view(),
            head_mods.slice(s![.., 0..c]),
            head_mods.slice(s![.., c..2 * c]),
            n,
        );
        let out = self.final_layer.out.forward(head_in.view());
        let out = out
            .into_shape_with_order((b, n, cfg.patch_dim()))
            .expect("row-major output");
        let out = TokenBatch::dense(out, grid)?;

        let tape = record.then(|| Tape {
            batch: b,
            x_in,
            t_feat,
            t_pre,
            t_act,
            cond,
            cond_act,
            label_rows,
            enc: enc_caches,
            f,
            active,
            kept,
            kept_pos,
            cond_act_mid,
            mid: mid_caches,
            g_pad,
            is_mask_row,
            dec: dec_caches,
            head_mods,
            head_ln,
            head_in,
        });
        Ok((out, tape))
    }

    /// Reverse pass. `d_out` is the gradient of the loss with respect to the
    /// forward output `(batch, N, patch_dim)`.
    pub fn backward(&self, tape: &Tape<T>, d_out: ArrayView3<'_, T>) -> Result<ModelParams<T>> {
        let cfg = &self.config;
        let b = tape.batch;
        let n = cfg.tokens();
        let c = cfg.hidden;
        crate::error::shape_check(&[b, n, cfg.patch_dim()], d_out.shape())?;
        let grid = cfg.grid();
        let rope = RopeTable::<T>::for_grid(cfg.head_dim(), grid)?;
        let all_pos = grid.positions();
        let mut grad = self.zeros_like();
        let d_out = d_out
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((b * n, cfg.patch_dim()))
            .expect("row-major gradient");

        let mut d_cond_act = Array2::<T>::zeros((b, c));

        // Head.
        let d_head_in =
            self.final_layer
                .out
                .backward(tape.head_in.view(), d_out.view(), &mut grad.final_layer.out);
        let mut d_head_mods = Array2::<T>::zeros((b, 2 * c));
        let d_ln = {
            let (dshift, dscale) = d_head_mods.multi_slice_mut((s![.., 0..c], s![.., c..2 * c]));
            modulate_backward(
                tape.head_ln.xhat.view(),
                d_head_in.view(),
                tape.head_mods.slice(s![.., c..2 * c]),
                n,
                dshift,
                dscale,
            )
        };
        d_cond_act += &self.final_layer.ada.backward(
            tape.cond_act.view(),
            d_head_mods.view(),
            &mut grad.final_layer.ada,
        );
        let mut dh = layer_norm_backward(&tape.head_ln, d_ln.view());

        // Decoder.
        let dense_ctx = StageCtx {
            heads: cfg.heads,
            tokens: n,
            positions: &all_pos,
            rope: &rope,
        };
        for (i, blk) in self.dec.iter().enumerate().rev() {
            let (dx, dc) = blk.backward(
                &tape.dec[i],
                tape.cond_act.view(),
                dh,
                &dense_ctx,
                &mut grad.dec[i],
            )?;
            dh = dx;
            d_cond_act += &dc;
        }

        // Fusion.
        {
            let gw = &mut grad.fusion.weight;
            let mut top = gw.slice_mut(s![0..c, ..]);
            general_mat_mul(T::one(), &tape.f.t(), &dh, T::one(), &mut top);
            let mut bottom = gw.slice_mut(s![c..2 * c, ..]);
            general_mat_mul(T::one(), &tape.g_pad.t(), &dh, T::one(), &mut bottom);
            grad.fusion.bias += &dh.sum_axis(ndarray::Axis(0));
        }
        let w = &self.fusion.weight;
        let mut df = Array2::<T>::zeros((b * n, c));
        general_mat_mul(T::one(), &dh, &w.slice(s![0..c, ..]).t(), T::zero(), &mut df);
        let mut dg_pad = Array2::<T>::zeros((b * n, c));
        general_mat_mul(T::one(), &dh, &w.slice(s![c..2 * c, ..]).t(), T::zero(), &mut dg_pad);
        for (row, &is_mask) in dg_pad.outer_iter().zip(&tape.is_mask_row) {
            if is_mask {
                grad.mask_token += &row;
            }
        }

        // Middle.
        if !tape.active.is_empty() {
            let mid_ctx = StageCtx {
                heads: cfg.heads,
                tokens: tape.kept.len(),
                positions: &tape.kept_pos,
                rope: &rope,
            };
            let mut dg = gather_rows(dg_pad.view(), n, &tape.active, &tape.kept);
            let mut d_cond_mid = Array2::<T>::zeros((tape.active.len(), c));
            for (i, blk) in self.mid.iter().enumerate().rev() {
                let (dx, dc) = blk.backward(
                    &tape.mid[i],
                    tape.cond_act_mid.view(),
                    dg,
                    &mid_ctx,
                    &mut grad.mid[i],
                )?;
                dg = dx;
                d_cond_mid += &dc;
            }
            scatter_add_rows(&mut df, dg.view(), n, &tape.active, &tape.kept);
            scatter_add_rows(&mut d_cond_act, d_cond_mid.view(), 1, &tape.active, &[0]);
        }

        // Encoder.
        let mut dh = df;
        for (i, blk) in self.enc.iter().enumerate().rev() {
            let (dx, dc) = blk.backward(
                &tape.enc[i],
                tape.cond_act.view(),
                dh,
                &dense_ctx,
                &mut grad.enc[i],
            )?;
            dh = dx;
            d_cond_act += &dc;
        }
        self.x_embed
            .accumulate(tape.x_in.view(), dh.view(), &mut grad.x_embed);

        // Conditioning.
        let mut d_cond = d_cond_act;
        Zip::from(&mut d_cond)
            .and(&tape.cond)
            .for_each(|d, &x| *d *= silu_grad(x));
        for (row, &l) in d_cond.outer_iter().zip(&tape.label_rows) {
            let mut g = grad.y_embed.row_mut(l);
            g += &row;
        }
        let mut d_t_act =
            self.t_embed
                .fc2
                .backward(tape.t_act.view(), d_cond.view(), &mut grad.t_embed.fc2);
        Zip::from(&mut d_t_act)
            .and(&tape.t_pre)
            .for_each(|d, &x| *d *= silu_grad(x));
        self.t_embed
            .fc1
            .accumulate(tape.t_feat.view(), d_t_act.view(), &mut grad.t_embed.fc1);
        Ok(grad)
    }
}

/// Activations recorded by [`ModelParams::forward_train`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    batch: usize,
    x_in: Array2<T>,
    t_feat: Array2<T>,
    t_pre: Array2<T>,
    t_act: Array2<T>,
    cond: Array2<T>,
    cond_act: Array2<T>,
    label_rows: Vec<usize>,
    enc: Vec<BlockCache<T>>,
    f: Array2<T>,
    active: Vec<usize>,
    kept: Vec<usize>,
    kept_pos: Vec<GridPos>,
    cond_act_mid: Array2<T>,
    mid: Vec<BlockCache<T>>,
    g_pad: Array2<T>,
    is_mask_row: Vec<bool>,
    dec: Vec<BlockCache<T>>,
    head_mods: Array2<T>,
    head_ln: LayerNormCache<T>,
    head_in: Array2<T>,
}

/// Sinusoidal timestep features `[cos(s t ω_i), sin(s t ω_i)]` with
/// `ω_i = 10000^(-i / (dim/2))` and `s` = [`TIME_SCALE`].
pub fn timestep_features<T: Scalar>(t: &[T], dim: usize) -> Array2<T> {
    let half = dim / 2;
    let mut out = Array2::zeros((t.len(), dim));
    for (mut row, &tv) in out.outer_iter_mut().zip(t) {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = tv.f64() * TIME_SCALE * freq;
            row[i] = T::of(arg.cos());
            row[half + i] = T::of(arg.sin());
        }
    }
    out
}

/// Fixed 2D sin-cos table `(N, C)`: the first half of the channels encodes
/// the row, the second half the column.
pub fn sincos_pos_embed<T: Scalar>(dim: usize, grid: GridShape) -> Array2<T> {
    let quarter = dim / 4;
    let mut out = Array2::zeros((grid.len(), dim));
    for (idx, mut row) in out.outer_iter_mut().enumerate() {
        let p = grid.pos(idx);
        for (offset, coord) in [(0, p.row), (dim / 2, p.col)] {
            for i in 0..quarter {
                let omega = 1.0 / 10_000f64.powf(i as f64 / quarter as f64);
                let arg = coord as f64 * omega;
                row[offset + i] = T::of(arg.sin());
                row[offset + quarter + i] = T::of(arg.cos());
            }
        }
    }
    out
}

/// `Fusion(f, g_pad) = [f ; g_pad] W + b` on standalone batches.
pub fn fuse<T: Scalar>(
    f: &TokenBatch<T>,
    g_pad: &TokenBatch<T>,
    fusion: &Linear<T>,
) -> Result<TokenBatch<T>> {
    let (b, n, c) = f.tokens.dim();
    if g_pad.tokens.dim() != (b, n, c) {
        return Err(SprintError::Shape {
            expected: vec![b, n, c],
            got: g_pad.tokens.shape().to_vec(),
        });
    }
    if fusion.input_dim() != 2 * c || fusion.output_dim() != c {
        return Err(SprintError::Shape {
            expected: vec![2 * c, c],
            got: fusion.weight.shape().to_vec(),
        });
    }
    let fv: ArrayView2<'_, T> = f
        .tokens
        .view()
        .into_shape_with_order((b * n, c))
        .map_err(|e| SprintError::Dimension(e.to_string()))?;
    let gv: ArrayView2<'_, T> = g_pad
        .tokens
        .view()
        .into_shape_with_order((b * n, c))
        .map_err(|e| SprintError::Dimension(e.to_string()))?;
    let mut h = Array2::<T>::zeros((b * n, c));
    general_mat_mul(T::one(), &fv, &fusion.weight.slice(s![0..c, ..]), T::zero(), &mut h);
    general_mat_mul(T::one(), &gv, &fusion.weight.slice(s![c..2 * c, ..]), T::one(), &mut h);
    h += &fusion.bias;
    let h: Array3<T> = h.into_shape_with_order((b, n, c)).expect("row-major");
    TokenBatch::new(h, f.positions.clone(), f.grid)
}

/// Runs one block on a standalone token batch with per-sample conditioning
/// `cond` (before the SiLU).
pub fn block_forward<T: Scalar>(
    block: &Block<T>,
    tokens: &TokenBatch<T>,
    cond: ArrayView2<'_, T>,
    rope: &RopeTable<T>,
    heads: usize,
) -> Result<TokenBatch<T>> {
    let (b, n, c) = tokens.tokens.dim();
    if c != block.hidden() || cond.dim() != (b, c) {
        return Err(SprintError::Shape {
            expected: vec![b, n, block.hidden()],
            got: tokens.tokens.shape().to_vec(),
        });
    }
    let x = tokens
        .tokens
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((b * n, c))
        .expect("row-major");
    let cond_act = cond.mapv(silu);
    let ctx = StageCtx {
        heads,
        tokens: n,
        positions: &tokens.positions,
        rope,
    };
    let (y, _) = block.forward(x, cond_act.view(), &ctx)?;
    TokenBatch::new(
        y.into_shape_with_order((b, n, c)).expect("row-major"),
        tokens.positions.clone(),
        tokens.grid,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> ModelConfig {
        ModelConfig {
            enc_depth: 1,
            mid_depth: 2,
            dec_depth: 1,
            hidden: 16,
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

    #[test]
    fn config_validation() {
        assert!(tiny().validate().is_ok());
        let mut c = tiny();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.hidden = 8;
        c.heads = 4; // head_dim 2
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.mid_depth = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn names_are_unique_and_aligned() {
        let p = ModelParams::<f32>::init(&tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let names: Vec<String> = p.named().into_iter().map(|n| n.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let g = p.zeros_like();
        let gnames: Vec<String> = g.named().into_iter().map(|n| n.name).collect();
        assert_eq!(names, gnames);
        assert_eq!(stage_of("enc.0.ada.weight"), Stage::Encoder);
        assert_eq!(stage_of("mid.1.mlp.fc1.bias"), Stage::Middle);
        assert_eq!(stage_of("y_embed"), Stage::Embed);
    }

    #[test]
    fn fusion_width_is_two_c() {
        let p = ModelParams::<f32>::init(&tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.fusion.weight.dim(), (32, 16));
        assert_eq!(p.mask_token.len(), 16);
    }

    #[test]
    fn rejects_bad_labels_and_shapes() {
        let cfg = tiny();
        let p = ModelParams::<f32>::init(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let x = TokenBatch::dense(Array3::zeros((1, 16, 4)), cfg.grid()).unwrap();
        assert!(p.forward_full(&x, &[0.5], &[Some(3)], &[false]).is_err());
        assert!(p.forward_full(&x, &[0.5, 0.1], &[Some(0)], &[false]).is_err());
        let bad = TokenBatch::dense(Array3::zeros((1, 16, 3)), cfg.grid()).unwrap();
        assert!(p.forward_full(&bad, &[0.5], &[Some(0)], &[false]).is_err());
        let mask = DropMask::keep_all(15);
        assert!(p.forward_pretrain(&x, &[0.5], &[None], &mask, &[false]).is_err());
    }
}
