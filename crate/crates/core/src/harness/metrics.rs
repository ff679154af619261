//! Desk-scale evaluation: where does the brightest (smoothed) pixel land?

use ndarray::{Array2, Axis};

use super::data::quadrant_of;
use crate::error::{Result, SprintError};
use crate::grid::ImageBatch;
use crate::Scalar;

/// 3x3 box filter averaging over the in-bounds neighbours.
pub fn box_smooth(img: &Array2<f64>) -> Array2<f64> {
    let (h, w) = img.dim();
    Array2::from_shape_fn((h, w), |(r, c)| {
        let mut sum = 0.0;
        let mut n = 0;
        for rr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
            for cc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                sum += img[[rr, cc]];
                n += 1;
            }
        }
        sum / n as f64
    })
}

/// Quadrant of the maximum of the smoothed channel mean. Ties go to the
/// lowest row-major index.
pub fn predicted_quadrant<T: Scalar>(image: ndarray::ArrayView3<'_, T>) -> usize {
    let (h, w, _) = image.dim();
    let mean = image.map(|v| v.f64()).mean_axis(Axis(2)).expect("channels > 0");
    let smooth = box_smooth(&mean);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in smooth.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    quadrant_of(best.0 / w, best.0 % w, h, w)
}

/// Fraction of samples whose predicted quadrant equals the label.
pub fn quadrant_accuracy<T: Scalar>(samples: &ImageBatch<T>, labels: &[usize]) -> Result<f64> {
    let (b, h, w, ch) = samples.data.dim();
    if h != w || h % 2 != 0 || ch == 0 {
        return Err(SprintError::Dimension(format!(
            "quadrant accuracy needs square images with an even side, got {h}x{w}x{ch}"
        )));
    }
    if labels.len() != b || b == 0 {
        return Err(SprintError::Dimension(format!(
            "{} labels for {b} samples",
            labels.len()
        )));
    }
    let hits = samples
        .data
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(img, &l)| predicted_quadrant(img.view()) == l)
        .count();
    Ok(hits as f64 / b as f64)
}
