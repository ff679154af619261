//! Linear-interpolant flow matching: `x_t = (1 - t) x0 + t eps` with the
//! constant velocity target `eps - x0`.

use ndarray::{Array3, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_check, Result, SprintError};
use crate::grid::TokenBatch;
use crate::Scalar;

/// One training example set for a step.
#[derive(Debug, Clone)]
pub struct FlowSample<T = f32> {
    pub x0: TokenBatch<T>,
    pub eps: TokenBatch<T>,
    pub t: Vec<T>,
    pub x_t: TokenBatch<T>,
    pub v_target: TokenBatch<T>,
    pub labels: Vec<Option<usize>>,
}

impl<T: Scalar> FlowSample<T> {
    pub fn new(
        x0: TokenBatch<T>,
        eps: TokenBatch<T>,
        t: Vec<T>,
        labels: Vec<Option<usize>>,
    ) -> Result<Self> {
        if labels.len() != x0.batch() {
            return Err(SprintError::Dimension(format!(
                "{} labels for batch {}",
                labels.len(),
                x0.batch()
            )));
        }
        let (x_t, v_target) = interpolate(&x0, &eps, &t)?;
        Ok(Self {
            x0,
            eps,
            t,
            x_t,
            v_target,
            labels,
        })
    }
}

/// Logit-normal timestep law, `t = logistic(loc + scale * z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimeDist {
    pub loc: f64,
    pub scale: f64,
}

impl Default for TimeDist {
    fn default() -> Self {
        Self { loc: 0.0, scale: 1.0 }
    }
}

impl TimeDist {
    pub fn validate(&self) -> Result<()> {
        if !(self.loc.is_finite() && self.scale.is_finite() && self.scale > 0.0) {
            return Err(SprintError::Config(format!(
                "time.loc must be finite and time.scale positive, got ({}, {})",
                self.loc, self.scale
            )));
        }
        Ok(())
    }

    pub fn sample<T: Scalar, R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<T> {
        let normal = Normal::new(self.loc, self.scale).expect("validated scale");
        (0..batch)
            .map(|_| {
                let t = logistic(normal.sample(rng));
                // Keep the open interval even where f32 rounds to an endpoint.
                let t = T::of(t);
                let lo = T::epsilon();
                let hi = T::one() - T::epsilon();
                t.max(lo).min(hi)
            })
            .collect()
    }

    /// Density of `t` at `x ∈ (0, 1)`.
    pub fn density(&self, x: f64) -> f64 {
        let logit = (x / (1.0 - x)).ln();
        let z = (logit - self.loc) / self.scale;
        (-0.5 * z * z).exp() / (self.scale * (2.0 * std::f64::consts::PI).sqrt() * x * (1.0 - x))
    }
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Standard logit-normal draws.
pub fn sample_timestep<T: Scalar, R: Rng + ?Sized>(batch: usize, rng: &mut R) -> Vec<T> {
    TimeDist::default().sample(batch, rng)
}

/// Returns `(x_t, v_target)`.
pub fn interpolate<T: Scalar>(
    x0: &TokenBatch<T>,
    eps: &TokenBatch<T>,
    t: &[T],
) -> Result<(TokenBatch<T>, TokenBatch<T>)> {
    shape_check(x0.tokens.shape(), eps.tokens.shape())?;
    if t.len() != x0.batch() {
        return Err(SprintError::Dimension(format!(
            "{} timesteps for batch {}",
            t.len(),
            x0.batch()
        )));
    }
    if let Some(bad) = t.iter().find(|&&v| !(v >= T::zero() && v <= T::one())) {
        return Err(SprintError::InvalidArgument(format!(
            "timestep {bad} outside [0, 1]"
        )));
    }
    let mut x_t = Array3::<T>::zeros(x0.tokens.raw_dim());
    let mut v = Array3::<T>::zeros(x0.tokens.raw_dim());
    for (b, &tb) in t.iter().enumerate() {
        let a = T::one() - tb;
        Zip::from(x_t.index_axis_mut(Axis(0), b))
            .and(v.index_axis_mut(Axis(0), b))
            .and(x0.tokens.index_axis(Axis(0), b))
            .and(eps.tokens.index_axis(Axis(0), b))
            .for_each(|xt, vt, &x, &e| {
                *xt = a * x + tb * e;
                *vt = e - x;
            });
    }
    Ok((
        TokenBatch::new(x_t, x0.positions.clone(), x0.grid)?,
        TokenBatch::new(v, x0.positions.clone(), x0.grid)?,
    ))
}

/// Mean over every element of `(pred - target)²`.
pub fn velocity_loss<T: Scalar>(pred: &TokenBatch<T>, target: &TokenBatch<T>) -> Result<T> {
    shape_check(target.tokens.shape(), pred.tokens.shape())?;
    let n = pred.tokens.len();
    if n == 0 {
        return Err(SprintError::InvalidArgument("empty batch".into()));
    }
    let mut sum = T::zero();
    Zip::from(&pred.tokens)
        .and(&target.tokens)
        .for_each(|&p, &q| sum += (p - q) * (p - q));
    Ok(sum / T::of(n as f64))
}

/// Gradient of [`velocity_loss`] with respect to `pred`.
pub fn velocity_loss_grad<T: Scalar>(
    pred: &TokenBatch<T>,
    target: &TokenBatch<T>,
) -> Result<Array3<T>> {
    shape_check(target.tokens.shape(), pred.tokens.shape())?;
    let scale = T::of(2.0 / pred.tokens.len() as f64);
    Ok(Zip::from(&pred.tokens)
        .and(&target.tokens)
        .map_collect(|&p, &q| scale * (p - q)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridShape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(values: &[f64]) -> TokenBatch<f64> {
        let a = Array3::from_shape_vec((1, 1, values.len()), values.to_vec()).unwrap();
        TokenBatch::dense(a, GridShape::new(1, 1)).unwrap()
    }

    #[test]
    fn scalar_interpolant() {
        let (xt, v) = interpolate(&batch(&[2.0]), &batch(&[-1.0]), &[0.3]).unwrap();
        assert!((xt.tokens[[0, 0, 0]] - 1.1).abs() < 1e-12);
        assert_eq!(v.tokens[[0, 0, 0]], -3.0);
    }

    #[test]
    fn endpoints_are_exact() {
        let x0 = batch(&[0.7, -1.3, 2.9]);
        let e = batch(&[0.1, 0.2, -5.5]);
        assert_eq!(interpolate(&x0, &e, &[0.0]).unwrap().0.tokens, x0.tokens);
        assert_eq!(interpolate(&x0, &e, &[1.0]).unwrap().0.tokens, e.tokens);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(interpolate(&batch(&[1.0]), &batch(&[1.0, 2.0]), &[0.5]).is_err());
        assert!(interpolate(&batch(&[1.0]), &batch(&[1.0]), &[1.5]).is_err());
        assert!(velocity_loss(&batch(&[1.0]), &batch(&[1.0, 2.0])).is_err());
    }

    #[test]
    fn loss_values() {
        let a = batch(&[1.0, 2.0, 3.0]);
        assert_eq!(velocity_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(velocity_loss(&batch(&[2.0, 3.0, 4.0]), &a).unwrap(), 1.0);
    }

    #[test]
    fn timesteps_open_interval_and_median() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t: Vec<f32> = sample_timestep(100_000, &mut rng);
        assert!(t.iter().all(|&v| v > 0.0 && v < 1.0));
        t.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((t[50_000] - 0.5).abs() < 0.01);
    }
}
