//! Transformer block with AdaLN-zero conditioning, QK RMS normalization and
//! 2D rotary attention.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Zip};
use rand::Rng;

use super::layers::{
    gated_residual, gated_residual_backward, gelu, gelu_grad, layer_norm, layer_norm_backward,
    modulate, modulate_backward, rms_norm_heads, rms_norm_heads_backward, softmax_rows,
    LayerNormCache, Linear,
};
use super::{NamedMut, NamedRef};
use crate::error::{Result, SprintError};
use crate::grid::{GridPos, RopeTable};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    /// `C -> 6C`: shift/scale/gate for attention, then for the MLP.
    pub ada: Linear<T>,
    pub qkv: Linear<T>,
    pub q_norm: Array1<T>,
    pub k_norm: Array1<T>,
    pub proj: Linear<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

/// Shape information shared by every block of one stage.
#[derive(Debug, Clone, Copy)]
pub struct StageCtx<'a, T> {
    pub heads: usize,
    pub tokens: usize,
    pub positions: &'a [GridPos],
    pub rope: &'a RopeTable<T>,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    mods: Array2<T>,
    ln1: LayerNormCache<T>,
    a_in: Array2<T>,
    q_raw: Array2<T>,
    k_raw: Array2<T>,
    q_rinv: Array2<T>,
    k_rinv: Array2<T>,
    q_rot: Array2<T>,
    k_rot: Array2<T>,
    v: Array2<T>,
    probs: Array2<T>,
    attn: Array2<T>,
    o: Array2<T>,
    ln2: LayerNormCache<T>,
    m_in: Array2<T>,
    h1: Array2<T>,
    g: Array2<T>,
    f: Array2<T>,
}

impl<T: Scalar> Block<T> {
    /// AdaLN-zero initialization: modulation is zero, so a fresh block is the
    /// identity map.
    pub fn init<R: Rng + ?Sized>(hidden: usize, heads: usize, mlp_ratio: usize, rng: &mut R) -> Self {
        let head_dim = hidden / heads;
        Self {
            ada: Linear::zeros(hidden, 6 * hidden),
            qkv: Linear::xavier(hidden, 3 * hidden, rng),
            q_norm: Array1::ones(head_dim),
            k_norm: Array1::ones(head_dim),
            proj: Linear::xavier(hidden, hidden, rng),
            fc1: Linear::xavier(hidden, mlp_ratio * hidden, rng),
            fc2: Linear::xavier(mlp_ratio * hidden, hidden, rng),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            ada: Linear::zeros(self.ada.input_dim(), self.ada.output_dim()),
            qkv: Linear::zeros(self.qkv.input_dim(), self.qkv.output_dim()),
            q_norm: Array1::zeros(self.q_norm.len()),
            k_norm: Array1::zeros(self.k_norm.len()),
            proj: Linear::zeros(self.proj.input_dim(), self.proj.output_dim()),
            fc1: Linear::zeros(self.fc1.input_dim(), self.fc1.output_dim()),
            fc2: Linear::zeros(self.fc2.input_dim(), self.fc2.output_dim()),
        }
    }

    pub fn hidden(&self) -> usize {
        self.proj.output_dim()
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedRef<'a, T>>) {
        self.ada.collect(&format!("{prefix}.ada"), out);
        self.qkv.collect(&format!("{prefix}.attn.qkv"), out);
        out.push(NamedRef::new(format!("{prefix}.attn.q_norm"), &self.q_norm));
        out.push(NamedRef::new(format!("{prefix}.attn.k_norm"), &self.k_norm));
        self.proj.collect(&format!("{prefix}.attn.proj"), out);
        self.fc1.collect(&format!("{prefix}.mlp.fc1"), out);
        self.fc2.collect(&format!("{prefix}.mlp.fc2"), out);
    }

    pub(crate) fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<NamedMut<'a, T>>) {
        self.ada.collect_mut(&format!("{prefix}.ada"), out);
        self.qkv.collect_mut(&format!("{prefix}.attn.qkv"), out);
        out.push(NamedMut::new(format!("{prefix}.attn.q_norm"), &mut self.q_norm));
        out.push(NamedMut::new(format!("{prefix}.attn.k_norm"), &mut self.k_norm));
        self.proj.collect_mut(&format!("{prefix}.attn.proj"), out);
        self.fc1.collect_mut(&format!("{prefix}.mlp.fc1"), out);
        self.fc2.collect_mut(&format!("{prefix}.mlp.fc2"), out);
    }

    fn check(&self, x: ArrayView2<'_, T>, cond_act: ArrayView2<'_, T>, ctx: &StageCtx<'_, T>) -> Result<()> {
        let c = self.hidden();
        if x.ncols() != c || cond_act.ncols() != c {
            return Err(SprintError::Dimension(format!(
                "block width {c}, got tokens of width {} and conditioning of width {}",
                x.ncols(),
                cond_act.ncols()
            )));
        }
        if ctx.tokens == 0 || x.nrows() != cond_act.nrows() * ctx.tokens {
            return Err(SprintError::Dimension(format!(
                "{} token rows do not match {} samples of {} tokens",
                x.nrows(),
                cond_act.nrows(),
                ctx.tokens
            )));
        }
        if ctx.positions.len() != ctx.tokens {
            return Err(SprintError::Dimension(format!(
                "{} positions for {} tokens",
                ctx.positions.len(),
                ctx.tokens
            )));
        }
        if c % ctx.heads != 0 || c / ctx.heads != ctx.rope.head_dim() {
            return Err(SprintError::Dimension(format!(
                "{c} channels over {} heads does not match RoPE head_dim {}",
                ctx.heads,
                ctx.rope.head_dim()
            )));
        }
        Ok(())
    }

    /// `x` holds `batch * ctx.tokens` rows; `cond_act` is `silu(cond)`, one row
    /// per sample.
    pub fn forward(
        &self,
        x: Array2<T>,
        cond_act: ArrayView2<'_, T>,
        ctx: &StageCtx<'_, T>,
    ) -> Result<(Array2<T>, BlockCache<T>)> {
        self.check(x.view(), cond_act, ctx)?;
        let c = self.hidden();
        let t = ctx.tokens;
        let mods = self.ada.forward(cond_act);
        let chunk = |i: usize| mods.slice(s![.., i * c..(i + 1) * c]);

        let ln1 = layer_norm(x.view());
        let a_in = modulate(ln1.xhat.view(), chunk(0), chunk(1), t);
        let qkv = self.qkv.forward(a_in.view());
        let q_raw = qkv.slice(s![.., 0..c]).to_owned();
        let k_raw = qkv.slice(s![.., c..2 * c]).to_owned();
        let v = qkv.slice(s![.., 2 * c..3 * c]).to_owned();
        drop(qkv);

        let mut q_rot = q_raw.clone();
        let q_rinv = rms_norm_heads(&mut q_rot, &self.q_norm);
        ctx.rope.rotate_rows(&mut q_rot.view_mut(), ctx.positions, false)?;
        let mut k_rot = k_raw.clone();
        let k_rinv = rms_norm_heads(&mut k_rot, &self.k_norm);
        ctx.rope.rotate_rows(&mut k_rot.view_mut(), ctx.positions, false)?;

        let (attn, probs) = attention(q_rot.view(), k_rot.view(), v.view(), t, ctx.heads);
        let o = self.proj.forward(attn.view());
        let mut x1 = x;
        gated_residual(&mut x1, o.view(), chunk(2), t);

        let ln2 = layer_norm(x1.view());
        let m_in = modulate(ln2.xhat.view(), chunk(3), chunk(4), t);
        let h1 = self.fc1.forward(m_in.view());
        let g = h1.mapv(gelu);
        let f = self.fc2.forward(g.view());
        let mut x2 = x1;
        gated_residual(&mut x2, f.view(), chunk(5), t);

        let cache = BlockCache {
            mods,
            ln1,
            a_in,
            q_raw,
            k_raw,
            q_rinv,
            k_rinv,
            q_rot,
            k_rot,
            v,
            probs,
            attn,
            o,
            ln2,
            m_in,
            h1,
            g,
            f,
        };
        Ok((x2, cache))
    }

    /// Returns `(dx, d cond_act)` and accumulates parameter gradients.
    pub fn backward(
        &self,
        cache: &BlockCache<T>,
        cond_act: ArrayView2<'_, T>,
        dy: Array2<T>,
        ctx: &StageCtx<'_, T>,
        grad: &mut Block<T>,
    ) -> Result<(Array2<T>, Array2<T>)> {
        let c = self.hidden();
        let t = ctx.tokens;
        let mods = &cache.mods;
        let chunk = |i: usize| mods.slice(s![.., i * c..(i + 1) * c]);
        let mut dmods = Array2::<T>::zeros(mods.raw_dim());

        // MLP branch.
        let df = gated_residual_backward(
            dy.view(),
            cache.f.view(),
            chunk(5),
            t,
            dmods.slice_mut(s![.., 5 * c..6 * c]),
        );
        let mut dh = self.fc2.backward(cache.g.view(), df.view(), &mut grad.fc2);
        Zip::from(&mut dh)
            .and(&cache.h1)
            .for_each(|d, &h| *d *= gelu_grad(h));
        let dm_in = self.fc1.backward(cache.m_in.view(), dh.view(), &mut grad.fc1);
        let dn2 = {
            let (dshift, dscale) =
                dmods.multi_slice_mut((s![.., 3 * c..4 * c], s![.., 4 * c..5 * c]));
            modulate_backward(cache.ln2.xhat.view(), dm_in.view(), chunk(4), t, dshift, dscale)
        };
        let mut dx1 = dy;
        dx1 += &layer_norm_backward(&cache.ln2, dn2.view());

        // Attention branch.
        let d_o = gated_residual_backward(
            dx1.view(),
            cache.o.view(),
            chunk(2),
            t,
            dmods.slice_mut(s![.., 2 * c..3 * c]),
        );
        let d_attn = self.proj.backward(cache.attn.view(), d_o.view(), &mut grad.proj);
        let (mut dq, mut dk, dv) = attention_backward(
            cache.q_rot.view(),
            cache.k_rot.view(),
            cache.v.view(),
            cache.probs.view(),
            d_attn.view(),
            t,
            ctx.heads,
        );
        ctx.rope.rotate_rows(&mut dq.view_mut(), ctx.positions, true)?;
        ctx.rope.rotate_rows(&mut dk.view_mut(), ctx.positions, true)?;
        let dq_raw = rms_norm_heads_backward(
            cache.q_raw.view(),
            &cache.q_rinv,
            &self.q_norm,
            dq.view(),
            &mut grad.q_norm,
        );
        let dk_raw = rms_norm_heads_backward(
            cache.k_raw.view(),
            &cache.k_rinv,
            &self.k_norm,
            dk.view(),
            &mut grad.k_norm,
        );
        let mut dqkv = Array2::<T>::zeros((dq_raw.nrows(), 3 * c));
        dqkv.slice_mut(s![.., 0..c]).assign(&dq_raw);
        dqkv.slice_mut(s![.., c..2 * c]).assign(&dk_raw);
        dqkv.slice_mut(s![.., 2 * c..3 * c]).assign(&dv);
        let da_in = self.qkv.backward(cache.a_in.view(), dqkv.view(), &mut grad.qkv);
        let dn1 = {
            let (dshift, dscale) = dmods.multi_slice_mut((s![.., 0..c], s![.., c..2 * c]));
            modulate_backward(cache.ln1.xhat.view(), da_in.view(), chunk(1), t, dshift, dscale)
        };
        let mut dx = dx1;
        dx += &layer_norm_backward(&cache.ln1, dn1.view());

        let dcond = self.ada.backward(cond_act, dmods.view(), &mut grad.ada);
        Ok((dx, dcond))
    }
}

/// Multi-head softmax attention per sample. Returns the concatenated head
/// outputs and the attention probabilities stacked as `(batch*heads*T, T)`.
fn attention<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    tokens: usize,
    heads: usize,
) -> (Array2<T>, Array2<T>) {
    let (rows, c) = q.dim();
    let batch = rows / tokens;
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut out = Array2::<T>::zeros((rows, c));
    let mut probs = Array2::<T>::zeros((batch * heads * tokens, tokens));
    for b in 0..batch {
        let r = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let qh = q.slice(s![r.clone(), cols.clone()]);
            let kh = k.slice(s![r.clone(), cols.clone()]);
            let vh = v.slice(s![r.clone(), cols.clone()]);
            let p0 = (b * heads + h) * tokens;
            let mut p = probs.slice_mut(s![p0..p0 + tokens, ..]);
            general_mat_mul(scale, &qh, &kh.t(), T::zero(), &mut p);
            softmax_rows(&mut p);
            let mut oh = out.slice_mut(s![r.clone(), cols]);
            general_mat_mul(T::one(), &p, &vh, T::zero(), &mut oh);
        }
    }
    (out, probs)
}

fn attention_backward<T: Scalar>(
    q: ArrayView2<'_, T>,
    k: ArrayView2<'_, T>,
    v: ArrayView2<'_, T>,
    probs: ArrayView2<'_, T>,
    d_out: ArrayView2<'_, T>,
    tokens: usize,
    heads: usize,
) -> (Array2<T>, Array2<T>, Array2<T>) {
    let (rows, c) = q.dim();
    let batch = rows / tokens;
    let d = c / heads;
    let scale = T::one() / T::of(d as f64).sqrt();
    let mut dq = Array2::<T>::zeros((rows, c));
    let mut dk = Array2::<T>::zeros((rows, c));
    let mut dv = Array2::<T>::zeros((rows, c));
    let mut ds = Array2::<T>::zeros((tokens, tokens));
    for b in 0..batch {
        let r = b * tokens..(b + 1) * tokens;
        for h in 0..heads {
            let cols = h * d..(h + 1) * d;
            let qh = q.slice(s![r.clone(), cols.clone()]);
            let kh = k.slice(s![r.clone(), cols.clone()]);
            let vh = v.slice(s![r.clone(), cols.clone()]);
            let doh = d_out.slice(s![r.clone(), cols.clone()]);
            let p0 = (b * heads + h) * tokens;
            let p = probs.slice(s![p0..p0 + tokens, ..]);

            general_mat_mul(T::one(), &doh, &vh.t(), T::zero(), &mut ds);
            {
                let mut dvh = dv.slice_mut(s![r.clone(), cols.clone()]);
                general_mat_mul(T::one(), &p.t(), &doh, T::zero(), &mut dvh);
            }
            for (mut dsr, pr) in ds.outer_iter_mut().zip(p.outer_iter()) {
                let dot = dsr.iter().zip(pr.iter()).map(|(&a, &b)| a * b).sum::<T>();
                Zip::from(&mut dsr).and(&pr).for_each(|g, &pv| *g = pv * (*g - dot));
            }
            {
                let mut dqh = dq.slice_mut(s![r.clone(), cols.clone()]);
                general_mat_mul(scale, &ds, &kh, T::zero(), &mut dqh);
            }
            let mut dkh = dk.slice_mut(s![r.clone(), cols]);
            general_mat_mul(scale, &ds.t(), &qh, T::zero(), &mut dkh);
        }
    }
    (dq, dk, dv)
}
