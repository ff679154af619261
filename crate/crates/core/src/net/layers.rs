//! Dense primitives with explicit backward passes.
//!
//! Activations are row-major matrices of shape `(rows, channels)` where rows
//! are `batch * tokens`, sample-major. Backward functions accumulate parameter
//! gradients into a caller-supplied gradient struct of the same shape.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::Scalar;

pub(crate) const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `(in, out)`; `y = x W + b`.
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    pub fn xavier<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        Self {
            weight: Array2::from_shape_fn((input, output), |_| T::of(dist.sample(rng))),
            bias: Array1::zeros(output),
        }
    }

    pub fn normal<R: Rng + ?Sized>(input: usize, output: usize, std: f64, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("positive std");
        Self {
            weight: Array2::from_shape_fn((input, output), |_| T::of(dist.sample(rng))),
            bias: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = Array2::zeros((x.nrows(), self.output_dim()));
        general_mat_mul(T::one(), &x, &self.weight, T::zero(), &mut y);
        y += &self.bias;
        y
    }

    /// Accumulates `dW`, `db` into `grad` and returns `dx`.
    pub fn backward(
        &self,
        x: ArrayView2<'_, T>,
        dy: ArrayView2<'_, T>,
        grad: &mut Linear<T>,
    ) -> Array2<T> {
        self.accumulate(x, dy, grad);
        self.input_grad(dy)
    }

    pub fn accumulate(&self, x: ArrayView2<'_, T>, dy: ArrayView2<'_, T>, grad: &mut Linear<T>) {
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(0));
    }

    pub fn input_grad(&self, dy: ArrayView2<'_, T>) -> Array2<T> {
        let mut dx = Array2::zeros((dy.nrows(), self.input_dim()));
        general_mat_mul(T::one(), &dy, &self.weight.t(), T::zero(), &mut dx);
        dx
    }

    pub(crate) fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<super::NamedRef<'a, T>>) {
        out.push(super::NamedRef::new(format!("{prefix}.weight"), &self.weight));
        out.push(super::NamedRef::new(format!("{prefix}.bias"), &self.bias));
    }

    pub(crate) fn collect_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<super::NamedMut<'a, T>>,
    ) {
        out.push(super::NamedMut::new(
            format!("{prefix}.weight"),
            &mut self.weight,
        ));
        out.push(super::NamedMut::new(format!("{prefix}.bias"), &mut self.bias));
    }
}

/// Per-row statistics of a parameter-free layer norm.
#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    pub xhat: Array2<T>,
    pub rstd: Array1<T>,
}

pub fn layer_norm<T: Scalar>(x: ArrayView2<'_, T>) -> LayerNormCache<T> {
    let (rows, c) = x.dim();
    let mut xhat = Array2::zeros((rows, c));
    let mut rstd = Array1::zeros(rows);
    let inv_c = T::one() / T::of(c as f64);
    let eps = T::of(NORM_EPS);
    for ((xr, mut yr), rs) in x
        .outer_iter()
        .zip(xhat.outer_iter_mut())
        .zip(rstd.iter_mut())
    {
        let mean = xr.sum() * inv_c;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
        let r = T::one() / (var + eps).sqrt();
        *rs = r;
        Zip::from(&mut yr).and(&xr).for_each(|y, &v| *y = (v - mean) * r);
    }
    LayerNormCache { xhat, rstd }
}

pub fn layer_norm_backward<T: Scalar>(cache: &LayerNormCache<T>, dy: ArrayView2<'_, T>) -> Array2<T> {
    let (rows, c) = dy.dim();
    let inv_c = T::one() / T::of(c as f64);
    let mut dx = Array2::zeros((rows, c));
    for (((dyr, xr), mut dxr), &r) in dy
        .outer_iter()
        .zip(cache.xhat.outer_iter())
        .zip(dx.outer_iter_mut())
        .zip(cache.rstd.iter())
    {
        let mean_dy = dyr.sum() * inv_c;
        let mean_dyx = dyr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>() * inv_c;
        Zip::from(&mut dxr)
            .and(&dyr)
            .and(&xr)
            .for_each(|d, &g, &xh| *d = r * (g - mean_dy - xh * mean_dyx));
    }
    dx
}

/// `y = x * (1 + scale[b]) + shift[b]` for rows of sample `b`.
pub fn modulate<T: Scalar>(
    x: ArrayView2<'_, T>,
    shift: ArrayView2<'_, T>,
    scale: ArrayView2<'_, T>,
    tokens: usize,
) -> Array2<T> {
    let mut y = x.as_standard_layout().into_owned();
    let c = y.ncols();
    let data = y.as_slice_mut().expect("standard layout");
    for (b, chunk) in data.chunks_mut(tokens * c).enumerate() {
        let sh = shift.row(b).to_vec();
        let sc: Vec<T> = scale.row(b).iter().map(|&m| T::one() + m).collect();
        for row in chunk.chunks_exact_mut(c) {
            for ((v, &a), &m) in row.iter_mut().zip(&sh).zip(&sc) {
                *v = *v * m + a;
            }
        }
    }
    y
}

/// Backward of [`modulate`]: returns `dx` and accumulates into `dshift` and
/// `dscale` (both `(batch, C)`).
pub fn modulate_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    dy: ArrayView2<'_, T>,
    scale: ArrayView2<'_, T>,
    tokens: usize,
    mut dshift: ArrayViewMut2<'_, T>,
    mut dscale: ArrayViewMut2<'_, T>,
) -> Array2<T> {
    let mut dx = dy.as_standard_layout().into_owned();
    let x = x.as_standard_layout();
    let c = dx.ncols();
    let xs = x.as_slice().expect("standard layout");
    let data = dx.as_slice_mut().expect("standard layout");
    let mut gs = vec![T::zero(); c];
    let mut gm = vec![T::zero(); c];
    for (b, (dchunk, xchunk)) in data
        .chunks_mut(tokens * c)
        .zip(xs.chunks(tokens * c))
        .enumerate()
    {
        let sc: Vec<T> = scale.row(b).iter().map(|&m| T::one() + m).collect();
        gs.fill(T::zero());
        gm.fill(T::zero());
        for (drow, xrow) in dchunk.chunks_exact_mut(c).zip(xchunk.chunks_exact(c)) {
            for i in 0..c {
                let d = drow[i];
                gs[i] += d;
                gm[i] += d * xrow[i];
                drow[i] = d * sc[i];
            }
        }
        for ((a, b), (&s, &m)) in dshift.row_mut(b).iter_mut().zip(dscale.row_mut(b).iter_mut()).zip(gs.iter().zip(&gm)) {
            *a += s;
            *b += m;
        }
    }
    dx
}

/// `x + gate[b] * branch` in place on `x`.
pub fn gated_residual<T: Scalar>(
    x: &mut Array2<T>,
    branch: ArrayView2<'_, T>,
    gate: ArrayView2<'_, T>,
    tokens: usize,
) {
    let c = x.ncols();
    let branch = branch.as_standard_layout();
    let bs = branch.as_slice().expect("standard layout");
    let data = x.as_slice_mut().expect("standard layout");
    for (b, (xc, bc)) in data.chunks_mut(tokens * c).zip(bs.chunks(tokens * c)).enumerate() {
        let g = gate.row(b).to_vec();
        for (xr, br) in xc.chunks_exact_mut(c).zip(bc.chunks_exact(c)) {
            for ((v, &o), &gv) in xr.iter_mut().zip(br).zip(&g) {
                *v += gv * o;
            }
        }
    }
}

/// Backward of the gated branch: returns `d branch` and accumulates `dgate`.
pub fn gated_residual_backward<T: Scalar>(
    dy: ArrayView2<'_, T>,
    branch: ArrayView2<'_, T>,
    gate: ArrayView2<'_, T>,
    tokens: usize,
    mut dgate: ArrayViewMut2<'_, T>,
) -> Array2<T> {
    let mut dbranch = dy.as_standard_layout().into_owned();
    let c = dbranch.ncols();
    let branch = branch.as_standard_layout();
    let bs = branch.as_slice().expect("standard layout");
    let data = dbranch.as_slice_mut().expect("standard layout");
    let mut acc = vec![T::zero(); c];
    for (b, (dc, bc)) in data.chunks_mut(tokens * c).zip(bs.chunks(tokens * c)).enumerate() {
        let g = gate.row(b).to_vec();
        acc.fill(T::zero());
        for (dr, br) in dc.chunks_exact_mut(c).zip(bc.chunks_exact(c)) {
            for i in 0..c {
                acc[i] += dr[i] * br[i];
                dr[i] *= g[i];
            }
        }
        for (a, &v) in dgate.row_mut(b).iter_mut().zip(&acc) {
            *a += v;
        }
    }
    dbranch
}

pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::one() + (-x).exp())
}

pub fn silu_grad<T: Scalar>(x: T) -> T {
    let s = T::one() / (T::one() + (-x).exp());
    s * (T::one() + x * (T::one() - s))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    half * x * (T::one() + tanh(c * (x + k * x * x * x)))
}

/// `tanh` through one `exp`; libm's `tanhf` is several times slower.
fn tanh<T: Scalar>(u: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * u).vexp() + T::one())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(GELU_K);
    let half = T::of(0.5);
    let u = c * (x + k * x * x * x);
    let th = tanh(u);
    let du = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + th) + half * x * (T::one() - th * th) * du
}

/// RMS-normalizes each `head_dim` chunk of every row in place, scaling by
/// `weight`. Returns the per-(row, head) reciprocal RMS.
pub fn rms_norm_heads<T: Scalar>(x: &mut Array2<T>, weight: &Array1<T>) -> Array2<T> {
    let d = weight.len();
    let heads = x.ncols() / d;
    let mut rinv = Array2::zeros((x.nrows(), heads));
    let eps = T::of(NORM_EPS);
    let inv_d = T::one() / T::of(d as f64);
    for (mut row, mut rr) in x.outer_iter_mut().zip(rinv.outer_iter_mut()) {
        let slice = row.as_slice_mut().expect("contiguous rows");
        for (h, chunk) in slice.chunks_exact_mut(d).enumerate() {
            let ms = chunk.iter().map(|&v| v * v).sum::<T>() * inv_d;
            let r = T::one() / (ms + eps).sqrt();
            rr[h] = r;
            for (v, &w) in chunk.iter_mut().zip(weight.iter()) {
                *v = *v * r * w;
            }
        }
    }
    rinv
}

/// Backward of [`rms_norm_heads`] given the pre-norm input `x`.
pub fn rms_norm_heads_backward<T: Scalar>(
    x: ArrayView2<'_, T>,
    rinv: &Array2<T>,
    weight: &Array1<T>,
    dy: ArrayView2<'_, T>,
    dweight: &mut Array1<T>,
) -> Array2<T> {
    let d = weight.len();
    let inv_d = T::one() / T::of(d as f64);
    let mut dx = Array2::zeros(x.raw_dim());
    let w = weight.as_slice().expect("contiguous weight");
    let dw = dweight.as_slice_mut().expect("contiguous weight grad");
    for (((xr, dyr), mut dxr), rr) in x
        .outer_iter()
        .zip(dy.outer_iter())
        .zip(dx.outer_iter_mut())
        .zip(rinv.outer_iter())
    {
        let xs = xr.to_slice().expect("contiguous rows");
        let dys = dyr.to_slice().expect("contiguous rows");
        let dxs = dxr.as_slice_mut().expect("contiguous rows");
        for (h, ((xc, dyc), dxc)) in xs
            .chunks_exact(d)
            .zip(dys.chunks_exact(d))
            .zip(dxs.chunks_exact_mut(d))
            .enumerate()
        {
            let r = rr[h];
            let mut dot = T::zero();
            for i in 0..d {
                let u = dyc[i] * w[i];
                dot += u * xc[i];
                dw[i] += dyc[i] * xc[i] * r;
            }
            let coef = r * r * r * dot * inv_d;
            for i in 0..d {
                dxc[i] = r * dyc[i] * w[i] - xc[i] * coef;
            }
        }
    }
    dx
}

/// Softmax over each row, in place.
pub fn softmax_rows<T: Scalar>(x: &mut ArrayViewMut2<'_, T>) {
    for mut row in x.outer_iter_mut() {
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).vexp());
        let inv = T::one() / row.sum();
        row.mapv_inplace(|v| v * inv);
    }
}

/// Gathers rows `(sample, token)` for the given samples and token indices out
/// of a `(batch * tokens, C)` matrix.
pub fn gather_rows<T: Scalar>(
    x: ArrayView2<'_, T>,
    tokens: usize,
    samples: &[usize],
    kept: &[usize],
) -> Array2<T> {
    let c = x.ncols();
    let mut out = Array2::zeros((samples.len() * kept.len(), c));
    let mut r = 0;
    for &b in samples {
        for &i in kept {
            out.row_mut(r).assign(&x.row(b * tokens + i));
            r += 1;
        }
    }
    out
}

/// Adds the rows of `src` back into the positions [`gather_rows`] took them from.
pub fn scatter_add_rows<T: Scalar>(
    dst: &mut Array2<T>,
    src: ArrayView2<'_, T>,
    tokens: usize,
    samples: &[usize],
    kept: &[usize],
) {
    let mut r = 0;
    for &b in samples {
        for &i in kept {
            let mut row = dst.row_mut(b * tokens + i);
            row += &src.row(r);
            r += 1;
        }
    }
}
