//! Token grids: patchify/unpatchify and 2D rotary position embedding.
//!
//! Tokens are enumerated row-major over the `(H/p) x (W/p)` patch grid. The
//! channel layout of a patchified token is `(pixel-row, pixel-col, channel)`
//! flattened in that order.

use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Result, SprintError};
use crate::Scalar;

/// Images laid out as `(batch, height, width, channels)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T = f32> {
    pub data: Array4<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(data: Array4<T>) -> Self {
        Self { data }
    }

    pub fn batch(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn channels(&self) -> usize {
        self.data.dim().3
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridPos {
    pub row: usize,
    pub col: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GridShape {
    pub rows: usize,
    pub cols: usize,
}

impl GridShape {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self { rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pos(&self, index: usize) -> GridPos {
        GridPos {
            row: index / self.cols,
            col: index % self.cols,
        }
    }

    /// Row-major positions of every grid cell.
    pub fn positions(&self) -> Vec<GridPos> {
        (0..self.len()).map(|i| self.pos(i)).collect()
    }
}

/// A batch of token sequences `(batch, tokens, channels)` and the grid
/// position of each token index. Positions are shared across the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch<T = f32> {
    pub tokens: Array3<T>,
    pub positions: Vec<GridPos>,
    pub grid: GridShape,
}

impl<T: Scalar> TokenBatch<T> {
    pub fn new(tokens: Array3<T>, positions: Vec<GridPos>, grid: GridShape) -> Result<Self> {
        if tokens.dim().1 != positions.len() {
            return Err(SprintError::Dimension(format!(
                "{} tokens but {} positions",
                tokens.dim().1,
                positions.len()
            )));
        }
        Ok(Self {
            tokens,
            positions,
            grid,
        })
    }

    /// A dense batch covering the full grid in row-major order.
    pub fn dense(tokens: Array3<T>, grid: GridShape) -> Result<Self> {
        Self::new(tokens, grid.positions(), grid)
    }

    pub fn batch(&self) -> usize {
        self.tokens.dim().0
    }

    pub fn len(&self) -> usize {
        self.tokens.dim().1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.tokens.dim().2
    }
}

pub fn patchify<T: Scalar>(images: &ImageBatch<T>, patch: usize) -> Result<TokenBatch<T>> {
    let (b, h, w, ch) = images.data.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(SprintError::Dimension(format!(
            "image {h}x{w} is not divisible by patch size {patch}"
        )));
    }
    let grid = GridShape::new(h / patch, w / patch);
    let c = patch * patch * ch;
    let mut tokens = Array3::<T>::zeros((b, grid.len(), c));
    for bi in 0..b {
        for (n, pos) in grid.positions().into_iter().enumerate() {
            for i in 0..patch {
                for j in 0..patch {
                    for k in 0..ch {
                        tokens[[bi, n, (i * patch + j) * ch + k]] =
                            images.data[[bi, pos.row * patch + i, pos.col * patch + j, k]];
                    }
                }
            }
        }
    }
    TokenBatch::dense(tokens, grid)
}

pub fn unpatchify<T: Scalar>(
    tokens: &TokenBatch<T>,
    patch: usize,
    ch: usize,
) -> Result<ImageBatch<T>> {
    let (b, n, c) = tokens.tokens.dim();
    if patch == 0 || ch == 0 || c != patch * patch * ch {
        return Err(SprintError::Dimension(format!(
            "token width {c} does not match patch {patch} x {patch} x {ch} channels"
        )));
    }
    let grid = tokens.grid;
    if n != grid.len() || tokens.positions != grid.positions() {
        return Err(SprintError::Dimension(
            "unpatchify needs a dense row-major token grid".into(),
        ));
    }
    let mut data = Array4::<T>::zeros((b, grid.rows * patch, grid.cols * patch, ch));
    for bi in 0..b {
        for (idx, pos) in tokens.positions.iter().enumerate() {
            for i in 0..patch {
                for j in 0..patch {
                    for k in 0..ch {
                        data[[bi, pos.row * patch + i, pos.col * patch + j, k]] =
                            tokens.tokens[[bi, idx, (i * patch + j) * ch + k]];
                    }
                }
            }
        }
    }
    Ok(ImageBatch { data })
}

pub const ROPE_BASE: f64 = 10_000.0;

/// Cosine/sine tables for 2D rotary embedding.
///
/// The first half of each head's channels rotates with the row index, the
/// second half with the column index. Inside each half, channels `(2j, 2j+1)`
/// form a pair rotated by `pos * base^(-j / pairs)`.
#[derive(Debug, Clone)]
pub struct RopeTable<T = f32> {
    head_dim: usize,
    base: f64,
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Scalar> RopeTable<T> {
    pub fn new(head_dim: usize, max_pos: usize, base: f64) -> Result<Self> {
        if head_dim == 0 || head_dim % 4 != 0 {
            return Err(SprintError::Dimension(format!(
                "2D RoPE needs head_dim divisible by 4, got {head_dim}"
            )));
        }
        if base <= 0.0 {
            return Err(SprintError::InvalidArgument(format!(
                "RoPE base must be positive, got {base}"
            )));
        }
        let pairs = head_dim / 4;
        let mut cos = Array2::<T>::zeros((max_pos, pairs));
        let mut sin = Array2::<T>::zeros((max_pos, pairs));
        for p in 0..max_pos {
            for j in 0..pairs {
                let angle = p as f64 * base.powf(-(j as f64) / pairs as f64);
                cos[[p, j]] = T::of(angle.cos());
                sin[[p, j]] = T::of(angle.sin());
            }
        }
        Ok(Self {
            head_dim,
            base,
            cos,
            sin,
        })
    }

    pub fn for_grid(head_dim: usize, grid: GridShape) -> Result<Self> {
        Self::new(head_dim, grid.rows.max(grid.cols), ROPE_BASE)
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    pub fn max_pos(&self) -> usize {
        self.cos.nrows()
    }

    /// Rotation angle of pair `pair` at coordinate `pos`.
    pub fn angle(&self, pos: usize, pair: usize) -> f64 {
        pos as f64 * self.base.powf(-(pair as f64) / (self.head_dim / 4) as f64)
    }

    #[inline]
    fn rotate(&self, v: &mut [T], pos: GridPos, inverse: bool) {
        let pairs = self.head_dim / 4;
        let half = self.head_dim / 2;
        for (offset, coord) in [(0, pos.row), (half, pos.col)] {
            let cos = self.cos.row(coord);
            let sin = self.sin.row(coord);
            for j in 0..pairs {
                let (c, mut s) = (cos[j], sin[j]);
                if inverse {
                    s = -s;
                }
                let a = v[offset + 2 * j];
                let b = v[offset + 2 * j + 1];
                v[offset + 2 * j] = a * c - b * s;
                v[offset + 2 * j + 1] = a * s + b * c;
            }
        }
    }

    fn check(&self, positions: &[GridPos]) -> Result<()> {
        let max = self.max_pos();
        if let Some(p) = positions.iter().find(|p| p.row >= max || p.col >= max) {
            return Err(SprintError::Dimension(format!(
                "position ({}, {}) outside RoPE table of size {max}",
                p.row, p.col
            )));
        }
        Ok(())
    }

    /// Rotates every head of every row in place. `x` has rows
    /// `batch * positions.len()` and `heads * head_dim` columns; row `r` uses
    /// `positions[r % positions.len()]`. With `inverse`, applies the transpose
    /// rotation, which is the backward pass of the forward rotation.
    pub(crate) fn rotate_rows(
        &self,
        x: &mut ArrayViewMut2<'_, T>,
        positions: &[GridPos],
        inverse: bool,
    ) -> Result<()> {
        self.check(positions)?;
        let width = x.ncols();
        if width % self.head_dim != 0 {
            return Err(SprintError::Dimension(format!(
                "row width {width} is not a multiple of head_dim {}",
                self.head_dim
            )));
        }
        let n = positions.len();
        for (r, mut row) in x.axis_iter_mut(Axis(0)).enumerate() {
            let pos = positions[r % n];
            let slice = row
                .as_slice_mut()
                .expect("rotary rows must be contiguous");
            for head in slice.chunks_exact_mut(self.head_dim) {
                self.rotate(head, pos, inverse);
            }
        }
        Ok(())
    }
}

/// Applies 2D RoPE to `vectors` of shape `(tokens, head_dim)`.
pub fn rope_apply<T: Scalar>(
    vectors: ArrayView2<'_, T>,
    positions: &[GridPos],
    table: &RopeTable<T>,
) -> Result<Array2<T>> {
    let (n, d) = vectors.dim();
    if d % 4 != 0 || d != table.head_dim() {
        return Err(SprintError::Dimension(format!(
            "vectors have {d} channels; table expects head_dim {} (divisible by 4)",
            table.head_dim()
        )));
    }
    if n != positions.len() {
        return Err(SprintError::Dimension(format!(
            "{n} vectors but {} positions",
            positions.len()
        )));
    }
    let mut out = vectors.as_standard_layout().into_owned();
    table.rotate_rows(&mut out.view_mut(), positions, false)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_images(b: usize, h: usize, w: usize, ch: usize, seed: u64) -> ImageBatch<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageBatch::new(Array4::from_shape_fn((b, h, w, ch), |_| {
            rng.random_range(-1.0..1.0)
        }))
    }

    #[test]
    fn patchify_counts() {
        let t = patchify(&random_images(2, 32, 32, 1, 0), 2).unwrap();
        assert_eq!(t.len(), 256);
        assert_eq!(t.channels(), 4);
        assert_eq!(t.positions[17], GridPos { row: 1, col: 1 });
    }

    #[test]
    fn single_patch_layout() {
        let img = ImageBatch::new(
            Array4::from_shape_vec((1, 2, 2, 1), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap(),
        );
        let t = patchify(&img, 2).unwrap();
        assert_eq!(t.tokens.as_slice().unwrap(), &[1.0, 2.0, 3.0, 4.0]);
        let back = unpatchify(&t, 2, 1).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn round_trips() {
        for (h, ch, p) in [(8, 3, 2), (16, 1, 2), (16, 1, 4), (6, 2, 3)] {
            let img = random_images(3, h, h, ch, h as u64);
            let back = unpatchify(&patchify(&img, p).unwrap(), p, ch).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn rejects_bad_dims() {
        assert!(matches!(
            patchify(&random_images(1, 6, 8, 1, 1), 4),
            Err(SprintError::Dimension(_))
        ));
        let t = patchify(&random_images(1, 4, 4, 1, 1), 2).unwrap();
        assert!(unpatchify(&t, 2, 2).is_err());
        assert!(RopeTable::<f32>::new(6, 4, ROPE_BASE).is_err());
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let table = RopeTable::<f64>::new(8, 4, ROPE_BASE).unwrap();
        let v = array![[0.3, -1.0, 2.0, 0.5, 0.1, 0.2, -0.7, 1.1]];
        let out = rope_apply(v.view(), &[GridPos { row: 0, col: 0 }], &table).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn rope_rejects_wrong_width() {
        let table = RopeTable::<f64>::new(8, 4, ROPE_BASE).unwrap();
        let v = Array2::<f64>::zeros((1, 6));
        assert!(rope_apply(v.view(), &[GridPos { row: 0, col: 0 }], &table).is_err());
    }

    #[test]
    fn rope_inverse_undoes_forward() {
        let table = RopeTable::<f64>::new(8, 5, ROPE_BASE).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Array2::from_shape_fn((3, 16), |_| rng.random_range(-1.0..1.0));
        let pos = [
            GridPos { row: 1, col: 4 },
            GridPos { row: 3, col: 0 },
            GridPos { row: 2, col: 2 },
        ];
        let mut x = v.clone();
        table.rotate_rows(&mut x.view_mut(), &pos, false).unwrap();
        table.rotate_rows(&mut x.view_mut(), &pos, true).unwrap();
        for (a, b) in x.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
