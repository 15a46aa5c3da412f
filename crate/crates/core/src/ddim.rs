//! Deterministic (sigma = 0) DDIM stepping in both directions.

use candle_core::Tensor;

use crate::error::{DvaError, Result};
use crate::schedule::NoiseSchedule;

/// Noise prediction `eps(x_t, t, z_face)`.
///
/// `steps[b]` is the diffusion step of row `b` of `x_t`; `z_face` is `(B, D)`.
/// Implementations must be deterministic and must not mix rows.
pub trait NoiseEstimator {
    fn estimate(&self, x_t: &Tensor, steps: &[usize], z_face: &Tensor) -> Result<Tensor>;
}

impl<E: NoiseEstimator + ?Sized> NoiseEstimator for &E {
    fn estimate(&self, x_t: &Tensor, steps: &[usize], z_face: &Tensor) -> Result<Tensor> {
        (**self).estimate(x_t, steps, z_face)
    }
}

/// The exact noise for a known clean image:
/// `eps*(x_t, t) = (x_t - sqrt(ab_t) x0) / sqrt(1 - ab_t)`.
///
/// With it `f(x_t, t)` is always `x0`, so DDIM in either direction stays on
/// the trajectory of `x0`. The conditioning vector is ignored.
#[derive(Debug, Clone)]
pub struct OracleEstimator {
    schedule: NoiseSchedule,
    x0: Tensor,
}

impl OracleEstimator {
    pub fn new(schedule: NoiseSchedule, x0: Tensor) -> Self {
        Self { schedule, x0 }
    }
}

impl NoiseEstimator for OracleEstimator {
    fn estimate(&self, x_t: &Tensor, steps: &[usize], _z_face: &Tensor) -> Result<Tensor> {
        // Stacked batches (x0 repeated block-wise) reuse the same targets.
        let n = self.x0.dim(0)?;
        let x0 = if steps.len() != n && n > 0 && steps.len() % n == 0 {
            Tensor::cat(&vec![&self.x0; steps.len() / n], 0)?
        } else {
            self.x0.clone()
        };
        let signal = self.schedule.q_sample_at(&x0, steps, &x0.zeros_like()?)?;
        let scale: Vec<f64> = steps
            .iter()
            .map(|&t| 1.0 / (1.0 - self.schedule.alpha_bar(t)).sqrt())
            .collect();
        let mut shape = vec![1usize; x_t.rank()];
        shape[0] = steps.len();
        let scale = Tensor::from_vec(scale, shape, x_t.device())?.to_dtype(x_t.dtype())?;
        Ok((x_t - signal)?.broadcast_mul(&scale)?)
    }
}

/// Always predicts zero noise.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroEstimator;

impl NoiseEstimator for ZeroEstimator {
    fn estimate(&self, x_t: &Tensor, _steps: &[usize], _z_face: &Tensor) -> Result<Tensor> {
        Ok(x_t.zeros_like()?)
    }
}

/// Strictly increasing steps `t_1 < .. < t_S <= T`; `t_0 = 0` is implicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepSchedule {
    steps: Vec<usize>,
}

impl StepSchedule {
    /// `t_s = round(s T / S)` for `s = 1..=S`.
    pub fn evenly_spaced(total: usize, count: usize) -> Result<Self> {
        if count == 0 || count > total {
            return Err(DvaError::Config(format!(
                "step count {count} must be within 1..={total}"
            )));
        }
        let mut steps: Vec<usize> = (1..=count)
            .map(|s| (2 * s * total + count) / (2 * count))
            .collect();
        steps.dedup();
        Ok(Self { steps })
    }

    pub fn from_steps(steps: Vec<usize>, total: usize) -> Result<Self> {
        if steps.is_empty() {
            return Err(DvaError::Config("empty step schedule".into()));
        }
        let mut prev = 0;
        for &t in &steps {
            if t <= prev || t > total {
                return Err(DvaError::Config(format!(
                    "steps must be strictly increasing within 1..={total}: {steps:?}"
                )));
            }
            prev = t;
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// `(t_{s-1}, t_s)` pairs in ascending order, starting at `(0, t_1)`.
    pub fn pairs(&self) -> impl DoubleEndedIterator<Item = (usize, usize)> + '_ {
        self.steps
            .iter()
            .enumerate()
            .map(|(i, &t)| (if i == 0 { 0 } else { self.steps[i - 1] }, t))
    }
}

fn check_pair(schedule: &NoiseSchedule, t_prev: usize, t: usize) -> Result<()> {
    if t_prev >= t {
        return Err(DvaError::Step(format!(
            "need t_prev < t, got t_prev={t_prev} t={t}"
        )));
    }
    schedule.check_step(t)
}

fn batch_steps(x: &Tensor, t: usize) -> Result<Vec<usize>> {
    Ok(vec![t; x.dim(0)?])
}

/// `x_{t_prev} = sqrt(ab_prev) f(x_t, t) + sqrt(1 - ab_prev) eps(x_t, t)`.
pub fn reverse_step<E: NoiseEstimator + ?Sized>(
    schedule: &NoiseSchedule,
    estimator: &E,
    x_t: &Tensor,
    t: usize,
    t_prev: usize,
    z_face: &Tensor,
) -> Result<Tensor> {
    check_pair(schedule, t_prev, t)?;
    let eps = estimator.estimate(x_t, &batch_steps(x_t, t)?, z_face)?;
    let x0 = schedule.predict_x0(x_t, t, &eps)?;
    if t_prev == 0 {
        return Ok(x0);
    }
    let ab = schedule.alpha_bar(t_prev);
    Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Inversion step: the generative update with the roles of `t_prev` and `t`
/// swapped. The noise is evaluated at the source step; from `t_prev = 0` the
/// source is the clean image itself and the noise is evaluated at `t`.
pub fn forward_step<E: NoiseEstimator + ?Sized>(
    schedule: &NoiseSchedule,
    estimator: &E,
    x_prev: &Tensor,
    t_prev: usize,
    t: usize,
    z_face: &Tensor,
) -> Result<Tensor> {
    check_pair(schedule, t_prev, t)?;
    let (eps, x0) = if t_prev == 0 {
        let eps = estimator.estimate(x_prev, &batch_steps(x_prev, t)?, z_face)?;
        (eps, x_prev.clone())
    } else {
        let eps = estimator.estimate(x_prev, &batch_steps(x_prev, t_prev)?, z_face)?;
        let x0 = schedule.predict_x0(x_prev, t_prev, &eps)?;
        (eps, x0)
    };
    let ab = schedule.alpha_bar(t);
    Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
}

/// Generative fold from `x_{t_S}` down to a clean image. No gradient flows
/// through the fold; use [`reverse_step`] for differentiable steps.
pub fn sample<E: NoiseEstimator + ?Sized>(
    schedule: &NoiseSchedule,
    estimator: &E,
    x_last: &Tensor,
    z_face: &Tensor,
    steps: &StepSchedule,
) -> Result<Tensor> {
    let mut x = x_last.clone();
    for (t_prev, t) in steps.pairs().rev() {
        x = reverse_step(schedule, estimator, &x, t, t_prev, z_face)?.detach();
    }
    Ok(x)
}

/// Deterministic encoding of a clean image to `x_{t_S}` (not differentiable).
pub fn invert<E: NoiseEstimator + ?Sized>(
    schedule: &NoiseSchedule,
    estimator: &E,
    x0: &Tensor,
    z_face: &Tensor,
    steps: &StepSchedule,
) -> Result<Tensor> {
    let mut x = x0.clone();
    for (t_prev, t) in steps.pairs() {
        x = forward_step(schedule, estimator, &x, t_prev, t, z_face)?.detach();
    }
    Ok(x)
}
