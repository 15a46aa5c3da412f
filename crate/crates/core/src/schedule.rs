//! Closed-form diffusion math: the linear beta schedule, forward noising and
//! the one-shot clean-image estimate.
//!
//! Steps are 1-based (`t = 1..=T`) at every public entry point. `betas` is
//! stored 0-based, so `beta(t) == betas[t - 1]`, while `alpha_bar` carries the
//! extra `alpha_bar[0] = 1` entry and is indexed by `t` directly.

use candle_core::{DType, Tensor};

use crate::error::{DvaError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// Clamp the clean-image estimate to `[-1, 1]`. Off unless asked for.
    pub clamp_x0: bool,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_start` to `beta_end`, both inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DvaError::Config("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(DvaError::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got start={beta_start} end={beta_end}"
            )));
        }
        if steps > 1 && beta_start == beta_end {
            return Err(DvaError::Config(
                "betas must be strictly increasing when T > 1".into(),
            ));
        }
        let betas: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            let span = (beta_end - beta_start) / (steps - 1) as f64;
            (0..steps)
                .map(|i| {
                    if i == steps - 1 {
                        beta_end
                    } else {
                        beta_start + span * i as f64
                    }
                })
                .collect()
        };
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        for b in &betas {
            let prev = *alpha_bar.last().unwrap();
            alpha_bar.push(prev * (1.0 - b));
        }
        Ok(Self {
            betas,
            alpha_bar,
            clamp_x0: false,
        })
    }

    pub fn with_clamp(mut self, clamp: bool) -> Self {
        self.clamp_x0 = clamp;
        self
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// `alpha_bar_t` for `t` in `0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(DvaError::Step(format!(
                "step {t} outside 1..={}",
                self.num_steps()
            )));
        }
        Ok(())
    }

    /// `x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps` with one shared step.
    pub fn q_sample(&self, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        same_shape(x0, eps, "q_sample")?;
        let ab = self.alpha_bar(t);
        Ok((x0.affine(ab.sqrt(), 0.0)? + eps.affine((1.0 - ab).sqrt(), 0.0)?)?)
    }

    /// Per-sample variant of [`q_sample`](Self::q_sample): `ts[b]` applies to row `b`.
    pub fn q_sample_at(&self, x0: &Tensor, ts: &[usize], eps: &Tensor) -> Result<Tensor> {
        same_shape(x0, eps, "q_sample")?;
        let signal = self.per_sample(x0, ts, |ab| ab.sqrt())?;
        let noise = self.per_sample(x0, ts, |ab| (1.0 - ab).sqrt())?;
        Ok((x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?)
    }

    /// `f(x_t, t) = (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t)`.
    pub fn predict_x0(&self, x_t: &Tensor, t: usize, eps_pred: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        same_shape(x_t, eps_pred, "predict_x0")?;
        let ab = self.alpha_bar(t);
        let inv = 1.0 / ab.sqrt();
        let x0 = (x_t.affine(inv, 0.0)? - eps_pred.affine((1.0 - ab).sqrt() * inv, 0.0)?)?;
        self.maybe_clamp(x0)
    }

    pub fn predict_x0_at(&self, x_t: &Tensor, ts: &[usize], eps_pred: &Tensor) -> Result<Tensor> {
        same_shape(x_t, eps_pred, "predict_x0")?;
        let inv = self.per_sample(x_t, ts, |ab| 1.0 / ab.sqrt())?;
        let noise = self.per_sample(x_t, ts, |ab| (1.0 - ab).sqrt() / ab.sqrt())?;
        let x0 = (x_t.broadcast_mul(&inv)? - eps_pred.broadcast_mul(&noise)?)?;
        self.maybe_clamp(x0)
    }

    fn maybe_clamp(&self, x0: Tensor) -> Result<Tensor> {
        if self.clamp_x0 {
            Ok(x0.clamp(-1.0, 1.0)?)
        } else {
            Ok(x0)
        }
    }

    /// Builds a `(B, 1, 1, ..)` coefficient tensor broadcastable against `like`.
    fn per_sample(&self, like: &Tensor, ts: &[usize], f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let dims = like.dims();
        if dims.is_empty() || dims[0] != ts.len() {
            return Err(DvaError::Shape(format!(
                "{} steps for a batch of shape {:?}",
                ts.len(),
                dims
            )));
        }
        let mut coeffs = Vec::with_capacity(ts.len());
        for &t in ts {
            self.check_step(t)?;
            coeffs.push(f(self.alpha_bar(t)));
        }
        let mut shape = vec![1usize; dims.len()];
        shape[0] = ts.len();
        let c = Tensor::from_vec(coeffs, shape, like.device())?;
        Ok(match like.dtype() {
            DType::F64 => c,
            other => c.to_dtype(other)?,
        })
    }
}

pub(crate) fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(DvaError::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}
