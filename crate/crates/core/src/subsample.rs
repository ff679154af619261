//! Token-drop masks and the drop / pad-with-mask pair.
//!
//! One mask is drawn per training iteration and shared across the batch.
//! Kept tokens always appear in ascending original-index order.

use ndarray::{ArrayView1, Axis};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SprintError};
use crate::grid::{GridShape, TokenBatch};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    keep: Vec<bool>,
    kept_indices: Vec<usize>,
    drop_ratio: f64,
    group_edge: Option<usize>,
    per_group_keep: Option<usize>,
}

impl DropMask {
    pub fn keep_all(len: usize) -> Self {
        Self {
            keep: vec![true; len],
            kept_indices: (0..len).collect(),
            drop_ratio: 0.0,
            group_edge: None,
            per_group_keep: None,
        }
    }

    /// Builds a mask from an explicit kept set. Indices are sorted and must
    /// be distinct and `< len`.
    pub fn from_kept(len: usize, kept: &[usize]) -> Result<Self> {
        let mut keep = vec![false; len];
        for &i in kept {
            if i >= len || keep[i] {
                return Err(SprintError::InvalidArgument(format!(
                    "kept index {i} is out of range or repeated (len {len})"
                )));
            }
            keep[i] = true;
        }
        let kept_indices: Vec<usize> = (0..len).filter(|&i| keep[i]).collect();
        let drop_ratio = if len == 0 {
            0.0
        } else {
            1.0 - kept_indices.len() as f64 / len as f64
        };
        Ok(Self {
            keep,
            kept_indices,
            drop_ratio,
            group_edge: None,
            per_group_keep: None,
        })
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn keep(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept_indices(&self) -> &[usize] {
        &self.kept_indices
    }

    pub fn kept_len(&self) -> usize {
        self.kept_indices.len()
    }

    pub fn drop_ratio(&self) -> f64 {
        self.drop_ratio
    }

    pub fn group_edge(&self) -> Option<usize> {
        self.group_edge
    }

    pub fn per_group_keep(&self) -> Option<usize> {
        self.per_group_keep
    }

    pub fn is_keep_all(&self) -> bool {
        self.kept_indices.len() == self.keep.len()
    }
}

/// Token-drop strategy used during pre-training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "lowercase")]
pub enum DropStrategy {
    /// Keep `k` tokens in every `n x n` group.
    Structured { n: usize, k: usize },
    /// Drop `floor(ratio * N)` tokens uniformly at random.
    Random { ratio: f64 },
    /// No dropping.
    None,
}

impl DropStrategy {
    pub fn nominal_ratio(&self) -> f64 {
        match *self {
            DropStrategy::Structured { n, k } => 1.0 - k as f64 / (n * n) as f64,
            DropStrategy::Random { ratio } => ratio,
            DropStrategy::None => 0.0,
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, grid: GridShape, rng: &mut R) -> Result<DropMask> {
        match *self {
            DropStrategy::Structured { n, k } => structured_mask(grid, n, k, rng),
            DropStrategy::Random { ratio } => random_mask(grid.len(), ratio, rng),
            DropStrategy::None => Ok(DropMask::keep_all(grid.len())),
        }
    }
}

fn check_structured(grid: GridShape, n: usize, k: usize) -> Result<()> {
    if n == 0 || grid.rows % n != 0 || grid.cols % n != 0 {
        return Err(SprintError::Dimension(format!(
            "grid {}x{} is not divisible into {n}x{n} groups",
            grid.rows, grid.cols
        )));
    }
    if k == 0 || k > n * n {
        return Err(SprintError::InvalidArgument(format!(
            "per-group keep count {k} must lie in 1..={}",
            n * n
        )));
    }
    Ok(())
}

/// Builds a structured mask from explicit per-group choices. Groups are
/// enumerated row-major over the group grid; each entry of `choices` lists
/// the kept cells of one group as local row-major indices in `0..n*n`.
pub fn structured_mask_from_choices(
    grid: GridShape,
    n: usize,
    k: usize,
    choices: &[Vec<usize>],
) -> Result<DropMask> {
    check_structured(grid, n, k)?;
    let groups_per_row = grid.cols / n;
    let groups = (grid.rows / n) * groups_per_row;
    if choices.len() != groups {
        return Err(SprintError::InvalidArgument(format!(
            "expected {groups} group choices, got {}",
            choices.len()
        )));
    }
    let mut keep = vec![false; grid.len()];
    for (g, local) in choices.iter().enumerate() {
        if local.len() != k {
            return Err(SprintError::InvalidArgument(format!(
                "group {g} keeps {} cells, expected {k}",
                local.len()
            )));
        }
        let (gr, gc) = (g / groups_per_row, g % groups_per_row);
        for &cell in local {
            if cell >= n * n {
                return Err(SprintError::InvalidArgument(format!(
                    "cell {cell} outside a {n}x{n} group"
                )));
            }
            let row = gr * n + cell / n;
            let col = gc * n + cell % n;
            let idx = row * grid.cols + col;
            if keep[idx] {
                return Err(SprintError::InvalidArgument(format!(
                    "cell {cell} chosen twice in group {g}"
                )));
            }
            keep[idx] = true;
        }
    }
    let kept_indices: Vec<usize> = (0..keep.len()).filter(|&i| keep[i]).collect();
    Ok(DropMask {
        keep,
        kept_indices,
        drop_ratio: 1.0 - k as f64 / (n * n) as f64,
        group_edge: Some(n),
        per_group_keep: Some(k),
    })
}

/// Keeps exactly `k` uniformly chosen tokens inside every `n x n` group of the
/// grid, independently across groups.
pub fn structured_mask<R: Rng + ?Sized>(
    grid: GridShape,
    n: usize,
    k: usize,
    rng: &mut R,
) -> Result<DropMask> {
    check_structured(grid, n, k)?;
    let groups = (grid.rows / n) * (grid.cols / n);
    let choices: Vec<Vec<usize>> = (0..groups)
        .map(|_| index::sample(rng, n * n, k).into_vec())
        .collect();
    structured_mask_from_choices(grid, n, k, &choices)
}

/// Drops `floor(ratio * len)` distinct indices uniformly at random.
pub fn random_mask<R: Rng + ?Sized>(len: usize, ratio: f64, rng: &mut R) -> Result<DropMask> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(SprintError::InvalidArgument(format!(
            "drop ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let dropped = (ratio * len as f64).floor() as usize;
    let mut keep = vec![true; len];
    for i in index::sample(rng, len, dropped) {
        keep[i] = false;
    }
    let kept_indices: Vec<usize> = (0..len).filter(|&i| keep[i]).collect();
    Ok(DropMask {
        keep,
        kept_indices,
        drop_ratio: ratio,
        group_edge: None,
        per_group_keep: None,
    })
}

/// Gathers the kept tokens in ascending index order, carrying positions.
pub fn apply_drop<T: Scalar>(tokens: &TokenBatch<T>, mask: &DropMask) -> Result<TokenBatch<T>> {
    if mask.len() != tokens.len() {
        return Err(SprintError::Dimension(format!(
            "mask covers {} tokens, batch has {}",
            mask.len(),
            tokens.len()
        )));
    }
    let kept = mask.kept_indices();
    let sparse = tokens.tokens.select(Axis(1), kept);
    let positions = kept.iter().map(|&i| tokens.positions[i]).collect();
    TokenBatch::new(sparse, positions, tokens.grid)
}

/// Restores a sparse batch to the full grid, writing `mask_token` at every
/// dropped position.
pub fn pad_with_mask<T: Scalar>(
    sparse: &TokenBatch<T>,
    mask: &DropMask,
    mask_token: ArrayView1<'_, T>,
) -> Result<TokenBatch<T>> {
    if sparse.len() != mask.kept_len() {
        return Err(SprintError::Dimension(format!(
            "sparse batch has {} tokens, mask keeps {}",
            sparse.len(),
            mask.kept_len()
        )));
    }
    if mask.len() != sparse.grid.len() {
        return Err(SprintError::Dimension(format!(
            "mask covers {} tokens, grid has {}",
            mask.len(),
            sparse.grid.len()
        )));
    }
    let c = sparse.channels();
    if mask_token.len() != c {
        return Err(SprintError::Dimension(format!(
            "mask token has {} channels, tokens have {c}",
            mask_token.len()
        )));
    }
    let b = sparse.batch();
    let mut dense = ndarray::Array3::<T>::zeros((b, mask.len(), c));
    for bi in 0..b {
        for (i, &keep) in mask.keep().iter().enumerate() {
            if !keep {
                dense.slice_mut(ndarray::s![bi, i, ..]).assign(&mask_token);
            }
        }
        for (j, &i) in mask.kept_indices().iter().enumerate() {
            dense
                .slice_mut(ndarray::s![bi, i, ..])
                .assign(&sparse.tokens.slice(ndarray::s![bi, j, ..]));
        }
    }
    TokenBatch::dense(dense, sparse.grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn structured_default_setting() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = structured_mask(GridShape::new(16, 16), 2, 1, &mut rng).unwrap();
        assert_eq!(m.kept_len(), 64);
        assert_eq!(m.drop_ratio(), 0.75);
        assert!(m.kept_indices().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn structured_keep_all() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = structured_mask(GridShape::new(2, 2), 2, 4, &mut rng).unwrap();
        assert_eq!(m.kept_indices(), &[0, 1, 2, 3]);
        assert_eq!(m.drop_ratio(), 0.0);
    }

    #[test]
    fn structured_rejects() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            structured_mask(GridShape::new(6, 4), 4, 2, &mut rng),
            Err(SprintError::Dimension(_))
        ));
        assert!(structured_mask(GridShape::new(4, 4), 2, 5, &mut rng).is_err());
        assert!(structured_mask(GridShape::new(4, 4), 2, 0, &mut rng).is_err());
    }

    #[test]
    fn eighty_seven_and_a_half_percent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = structured_mask(GridShape::new(8, 8), 4, 2, &mut rng).unwrap();
        assert_eq!(m.drop_ratio(), 0.875);
        assert_eq!(m.kept_len(), 8);
    }

    #[test]
    fn random_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_mask(256, 0.75, &mut rng).unwrap().kept_len(), 64);
        assert_eq!(random_mask(10, 0.0, &mut rng).unwrap().kept_len(), 10);
        assert!(random_mask(10, 1.0, &mut rng).is_err());
        assert!(random_mask(10, -0.1, &mut rng).is_err());
    }

    #[test]
    fn seeded_masks_reproduce() {
        let g = GridShape::new(8, 8);
        let a = structured_mask(g, 2, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = structured_mask(g, 2, 1, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        let a = random_mask(64, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_mask(64, 0.5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    fn four_tokens() -> TokenBatch<f64> {
        // tokens a=1, b=2, c=3, d=4 with 2 channels each
        let t = Array3::from_shape_vec(
            (1, 4, 2),
            vec![1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 4.5],
        )
        .unwrap();
        TokenBatch::dense(t, GridShape::new(2, 2)).unwrap()
    }

    #[test]
    fn drop_and_pad_small_case() {
        let x = four_tokens();
        let m = DropMask::from_kept(4, &[0, 2]).unwrap();
        let sparse = apply_drop(&x, &m).unwrap();
        assert_eq!(
            sparse.tokens,
            Array3::from_shape_vec((1, 2, 2), vec![1.0, 1.5, 3.0, 3.5]).unwrap()
        );
        assert_eq!(sparse.positions, vec![x.positions[0], x.positions[2]]);
        let m_tok = array![-9.0, -8.0];
        let dense = pad_with_mask(&sparse, &m, m_tok.view()).unwrap();
        assert_eq!(
            dense.tokens,
            Array3::from_shape_vec(
                (1, 4, 2),
                vec![1.0, 1.5, -9.0, -8.0, 3.0, 3.5, -9.0, -8.0]
            )
            .unwrap()
        );
    }

    #[test]
    fn keep_all_is_identity() {
        let x = four_tokens();
        let m = DropMask::keep_all(4);
        let sparse = apply_drop(&x, &m).unwrap();
        assert_eq!(sparse, x);
        let dense = pad_with_mask(&sparse, &m, array![0.0, 0.0].view()).unwrap();
        assert_eq!(dense, x);
    }

    #[test]
    fn length_mismatches_rejected() {
        let x = four_tokens();
        let m = DropMask::keep_all(5);
        assert!(apply_drop(&x, &m).is_err());
        let m = DropMask::from_kept(4, &[1]).unwrap();
        assert!(pad_with_mask(&x, &m, array![0.0, 0.0].view()).is_err());
    }
}
