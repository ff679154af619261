//! Synthetic class-conditional blobs: one isotropic Gaussian bump per image,
//! centred uniformly inside the quadrant named by the class label.

use ndarray::{Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SprintError};
use crate::grid::ImageBatch;
use crate::rng::{seeded, Purpose};

/// Images drawn to estimate the standardization statistics.
const CALIBRATION_DRAWS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlobDatasetSpec {
    /// Image side in pixels; images are square.
    pub size: usize,
    pub channels: usize,
    /// Always 4, one per quadrant.
    pub classes: usize,
    pub sigma: f64,
    pub amp_min: f64,
    pub amp_max: f64,
    /// Images in the finite training set.
    pub dataset_size: usize,
    /// Defaults to the run seed.
    pub seed: Option<u64>,
}

impl Default for BlobDatasetSpec {
    fn default() -> Self {
        Self {
            size: 16,
            channels: 1,
            classes: 4,
            sigma: 1.5,
            amp_min: 0.7,
            amp_max: 1.3,
            dataset_size: 4096,
            seed: None,
        }
    }
}

impl BlobDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SprintError::Config(m));
        if self.size < 2 || self.size % 2 != 0 {
            return bad(format!("blob image size must be even and >= 2, got {}", self.size));
        }
        if self.classes != 4 {
            return bad(format!("blob data has 4 quadrant classes, got {}", self.classes));
        }
        if self.channels == 0 || self.dataset_size == 0 {
            return bad("channels and dataset_size must be positive".into());
        }
        if !(self.sigma > 0.0) || !(self.amp_min > 0.0 && self.amp_max >= self.amp_min) {
            return bad("sigma must be positive and 0 < amp_min <= amp_max".into());
        }
        Ok(())
    }
}

/// Quadrant index of a pixel: `(row >= H/2) * 2 + (col >= W/2)`.
pub fn quadrant_of(row: usize, col: usize, height: usize, width: usize) -> usize {
    (row >= height / 2) as usize * 2 + (col >= width / 2) as usize
}

fn draw_raw<R: Rng + ?Sized>(spec: &BlobDatasetSpec, rng: &mut R, batch: usize) -> (Array4<f32>, Vec<usize>) {
    let s = spec.size;
    let half = (s / 2) as f64;
    let mut images = Array4::<f32>::zeros((batch, s, s, spec.channels));
    let mut labels = Vec::with_capacity(batch);
    let inv = 1.0 / (2.0 * spec.sigma * spec.sigma);
    for mut img in images.axis_iter_mut(Axis(0)) {
        let label = rng.random_range(0..spec.classes);
        let r0 = (label / 2) as f64 * half;
        let c0 = (label % 2) as f64 * half;
        let cy = r0 + rng.random::<f64>() * (half - 1.0);
        let cx = c0 + rng.random::<f64>() * (half - 1.0);
        let amp = rng.random_range(spec.amp_min..=spec.amp_max);
        for ((r, c, _), v) in img.indexed_iter_mut() {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            *v = (amp * (-d2 * inv).exp()) as f32;
        }
        labels.push(label);
    }
    (images, labels)
}

/// Draws blob batches standardized with statistics from a fixed
/// calibration draw.
#[derive(Debug, Clone)]
pub struct BlobGenerator {
    pub spec: BlobDatasetSpec,
    pub mean: f64,
    pub std: f64,
}

impl BlobGenerator {
    pub fn new(spec: &BlobDatasetSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded(0, Purpose::Calibration);
        let (raw, _) = draw_raw(spec, &mut rng, CALIBRATION_DRAWS);
        let n = raw.len() as f64;
        let mean = raw.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = raw.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        Ok(Self {
            spec: spec.clone(),
            mean,
            std: var.sqrt(),
        })
    }

    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> (ImageBatch<f32>, Vec<usize>) {
        let (mut raw, labels) = draw_raw(&self.spec, rng, batch);
        let (m, s) = (self.mean as f32, self.std as f32);
        raw.mapv_inplace(|v| (v - m) / s);
        (ImageBatch::new(raw), labels)
    }
}

pub fn make_blob_batch<R: Rng + ?Sized>(
    spec: &BlobDatasetSpec,
    rng: &mut R,
    batch: usize,
) -> Result<(ImageBatch<f32>, Vec<usize>)> {
    Ok(BlobGenerator::new(spec)?.batch(rng, batch))
}

/// A finite training set.
#[derive(Debug, Clone)]
pub struct BlobDataset {
    pub images: Array4<f32>,
    pub labels: Vec<usize>,
}

impl BlobDataset {
    pub fn generate(spec: &BlobDatasetSpec, run_seed: u64) -> Result<Self> {
        let generator = BlobGenerator::new(spec)?;
        let mut rng = seeded(spec.seed.unwrap_or(run_seed), Purpose::Dataset);
        let (images, labels) = generator.batch(&mut rng, spec.dataset_size);
        Ok(Self {
            images: images.data,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, batch: usize) -> (ImageBatch<f32>, Vec<usize>) {
        let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..self.len())).collect();
        let images = self.images.select(Axis(0), &idx);
        let labels = idx.iter().map(|&i| self.labels[i]).collect();
        (ImageBatch::new(images), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadrant_indexing() {
        assert_eq!(quadrant_of(0, 0, 16, 16), 0);
        assert_eq!(quadrant_of(0, 8, 16, 16), 1);
        assert_eq!(quadrant_of(8, 0, 16, 16), 2);
        assert_eq!(quadrant_of(15, 15, 16, 16), 3);
    }

    #[test]
    fn seeded_batches_repeat() {
        let spec = BlobDatasetSpec::default();
        let a = make_blob_batch(&spec, &mut ChaCha8Rng::seed_from_u64(4), 8).unwrap();
        let b = make_blob_batch(&spec, &mut ChaCha8Rng::seed_from_u64(4), 8).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn rejects_bad_spec() {
        let spec = BlobDatasetSpec {
            size: 15,
            ..BlobDatasetSpec::default()
        };
        assert!(BlobGenerator::new(&spec).is_err());
    }
}
