//! Noise-prediction and masked-agreement losses, and the training loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::FlatConfig;
use crate::ddim::NoiseEstimator;
use crate::error::{DvaError, Result};
use crate::nets::{ops, Model};
use crate::schedule::NoiseSchedule;
use crate::synthdata::{Dataset, Split};

/// One optimization batch. `eps_reg` is the second noise draw used only by
/// the masked-agreement loss; the first draw `eps` feeds both losses.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// `(B, C, H, W)` clean frames.
    pub x0: Tensor,
    /// `(B, 1, H, W)` binary foreground masks.
    pub masks: Option<Tensor>,
    /// One diffusion step per sample.
    pub steps: Vec<usize>,
    pub eps: Tensor,
    pub eps_reg: Tensor,
    /// `(B, z_face_dim)`, possibly attached to the fusion graph.
    pub z_face: Tensor,
}

impl TrainBatch {
    fn validate(&self) -> Result<()> {
        let b = self.x0.dim(0)?;
        if self.steps.len() != b || self.z_face.dim(0)? != b {
            return Err(DvaError::Shape(format!(
                "batch of {b} frames with {} steps and {} conditions",
                self.steps.len(),
                self.z_face.dim(0)?
            )));
        }
        crate::schedule::same_shape(&self.x0, &self.eps, "noise")?;
        crate::schedule::same_shape(&self.x0, &self.eps_reg, "second noise")?;
        Ok(())
    }
}

/// Loss terms of one batch; `total = simple + reg`, with `reg` zero when disabled.
#[derive(Debug, Clone)]
pub struct Losses {
    pub simple: Tensor,
    pub reg: Tensor,
    pub total: Tensor,
}

fn non_finite_report(t: &Tensor, steps: &[usize], what: &str) -> Result<DvaError> {
    let rows = t.flatten_from(1)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let bad = rows.iter().position(|r| r.iter().any(|v| !v.is_finite()));
    Ok(DvaError::NonFinite(match bad {
        Some(i) => format!("{what}: batch index {i}, step t={}", steps[i]),
        None => format!("{what}: non-finite reduction"),
    }))
}

fn checked_estimate<E: NoiseEstimator + ?Sized>(
    est: &E,
    x_t: &Tensor,
    steps: &[usize],
    z: &Tensor,
) -> Result<Tensor> {
    let out = est.estimate(x_t, steps, z)?;
    let s = ops::scalar_f64(&out.abs()?.sum_all()?)?;
    if !s.is_finite() {
        return Err(non_finite_report(&out, steps, "estimator output")?);
    }
    Ok(out)
}

/// Mean absolute error between predicted and true noise.
pub fn loss_simple<E: NoiseEstimator + ?Sized>(
    schedule: &NoiseSchedule,
    est: &E,
    batch: &TrainBatch,
) -> Result<Tensor> {
    batch.validate()?;
    let x_t = schedule.q_sample_at(&batch.x0, &batch.steps, &batch.eps)?;
    let pred = checked_estimate(est, &x_t, &batch.steps, &batch.z_face)?;
    Ok((pred - &batch.eps)?.abs()?.mean_all()?)
}

/// Mean absolute difference of the masked clean-image estimates from the
/// two noise draws at the same step.
pub fn loss_reg<E: NoiseEstimator + ?Sized>(
    schedule: &NoiseSchedule,
    est: &E,
    batch: &TrainBatch,
) -> Result<Tensor> {
    Ok(loss_dva(schedule, est, batch, true)?.reg)
}

/// Both losses from a single estimator call on the doubled batch.
pub fn loss_dva<E: NoiseEstimator + ?Sized>(
    schedule: &NoiseSchedule,
    est: &E,
    batch: &TrainBatch,
    with_reg: bool,
) -> Result<Losses> {
    batch.validate()?;
    let b = batch.x0.dim(0)?;
    if !with_reg {
        let simple = loss_simple(schedule, est, batch)?;
        let reg = simple.zeros_like()?;
        let total = (&simple + &reg)?;
        return Ok(Losses { simple, reg, total });
    }
    let masks = batch
        .masks
        .as_ref()
        .ok_or_else(|| DvaError::Config("masked-agreement loss needs masks".into()))?;
    let x_t1 = schedule.q_sample_at(&batch.x0, &batch.steps, &batch.eps)?;
    let x_t2 = schedule.q_sample_at(&batch.x0, &batch.steps, &batch.eps_reg)?;
    let steps2: Vec<usize> = batch.steps.iter().chain(&batch.steps).copied().collect();
    let x_t = Tensor::cat(&[&x_t1, &x_t2], 0)?;
    let z = Tensor::cat(&[&batch.z_face, &batch.z_face], 0)?;
    let pred = checked_estimate(est, &x_t, &steps2, &z)?;
    let (p1, p2) = (pred.narrow(0, 0, b)?, pred.narrow(0, b, b)?);
    let simple = (&p1 - &batch.eps)?.abs()?.mean_all()?;
    let f1 = schedule.predict_x0_at(&x_t1, &batch.steps, &p1)?;
    let f2 = schedule.predict_x0_at(&x_t2, &batch.steps, &p2)?;
    let m = masks.to_dtype(f1.dtype())?;
    let reg = (f1 - f2)?.broadcast_mul(&m)?.abs()?.mean_all()?;
    let total = (&simple + &reg)?;
    Ok(Losses { simple, reg, total })
}

/// Mean over in-mask positions of the across-draw (plug-in, `1/K`) variance
/// of the clean-image estimate at step `t`, over `k` noise draws.
#[allow(clippy::too_many_arguments)]
pub fn masked_x0_variance<E: NoiseEstimator + ?Sized>(
    schedule: &NoiseSchedule,
    est: &E,
    frames: &Tensor,
    masks: &Tensor,
    z_face: &Tensor,
    t: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if k < 2 {
        return Err(DvaError::Config(format!(
            "masked_x0_variance needs K >= 2, got {k}"
        )));
    }
    schedule.check_step(t)?;
    let b = frames.dim(0)?;
    let steps = vec![t; b];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draws = Vec::with_capacity(k);
    for _ in 0..k {
        let eps = gaussian_like(&mut rng, frames)?;
        let x_t = schedule.q_sample(frames, t, &eps)?;
        let pred = est.estimate(&x_t, &steps, z_face)?;
        draws.push(schedule.predict_x0(&x_t, t, &pred)?.to_dtype(DType::F64)?);
    }
    let stacked = Tensor::stack(&draws, 0)?;
    let mean = stacked.mean_keepdim(0)?;
    let var = stacked.broadcast_sub(&mean)?.sqr()?.mean(0)?;
    let m = masks.to_dtype(DType::F64)?.broadcast_as(var.shape())?;
    let count = ops::scalar_f64(&m.sum_all()?)?;
    if count == 0.0 {
        return Ok(0.0);
    }
    Ok(ops::scalar_f64(&(var * m)?.sum_all()?)? / count)
}

/// Standard normal tensor shaped like `like`, drawn from `rng`.
pub fn gaussian_like(rng: &mut impl Rng, like: &Tensor) -> Result<Tensor> {
    let data: Vec<f64> = (0..like.elem_count())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(data, like.dims(), like.device())?.to_dtype(like.dtype())?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub videos_per_batch: usize,
    pub frames_per_video: usize,
    pub lr: f64,
    /// Linear ramp from 0 over this many steps.
    pub warmup_steps: usize,
    /// Cosine decay towards 0 over the run, after warmup.
    pub cosine_decay: bool,
    pub use_reg: bool,
    pub seed: u64,
    /// Checkpoint period in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            videos_per_batch: 4,
            frames_per_video: 4,
            lr: 1e-4,
            warmup_steps: 0,
            cosine_decay: false,
            use_reg: true,
            seed: 0,
            checkpoint_every: 1000,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn batch_size(&self) -> usize {
        self.videos_per_batch * self.frames_per_video
    }

    /// Learning rate for zero-based step `i`.
    pub fn lr_at(&self, i: usize) -> f64 {
        let mut lr = self.lr;
        if i < self.warmup_steps {
            lr *= (i + 1) as f64 / self.warmup_steps as f64;
        } else if self.cosine_decay {
            let span = self.steps.saturating_sub(self.warmup_steps).max(1) as f64;
            let p = (i - self.warmup_steps) as f64 / span;
            lr *= 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
        }
        lr
    }

    pub fn validate(&self) -> Result<()> {
        if self.videos_per_batch == 0 || self.frames_per_video == 0 {
            return Err(DvaError::Config("batch dimensions must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DvaError::Config(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.log_every == 0 {
            return Err(DvaError::Config("log_every must be positive".into()));
        }
        Ok(())
    }

    pub fn write_to(&self, cfg: &mut FlatConfig, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        cfg.set(&k("steps"), self.steps);
        cfg.set(&k("videos_per_batch"), self.videos_per_batch);
        cfg.set(&k("frames_per_video"), self.frames_per_video);
        cfg.set(&k("lr"), self.lr);
        cfg.set(&k("warmup_steps"), self.warmup_steps);
        cfg.set(&k("cosine_decay"), self.cosine_decay);
        cfg.set(&k("use_reg"), self.use_reg);
        cfg.set(&k("seed"), self.seed);
        cfg.set(&k("checkpoint_every"), self.checkpoint_every);
        cfg.set(&k("log_every"), self.log_every);
    }

    pub fn read_from(&self, cfg: &FlatConfig, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let out = Self {
            steps: cfg.get_or(&k("steps"), self.steps)?,
            videos_per_batch: cfg.get_or(&k("videos_per_batch"), self.videos_per_batch)?,
            frames_per_video: cfg.get_or(&k("frames_per_video"), self.frames_per_video)?,
            lr: cfg.get_or(&k("lr"), self.lr)?,
            warmup_steps: cfg.get_or(&k("warmup_steps"), self.warmup_steps)?,
            cosine_decay: cfg.get_or(&k("cosine_decay"), self.cosine_decay)?,
            use_reg: cfg.get_or(&k("use_reg"), self.use_reg)?,
            seed: cfg.get_or(&k("seed"), self.seed)?,
            checkpoint_every: cfg.get_or(&k("checkpoint_every"), self.checkpoint_every)?,
            log_every: cfg.get_or(&k("log_every"), self.log_every)?,
        };
        out.validate()?;
        Ok(out)
    }
}

/// Training frames with their frozen features, cached once per run.
pub struct TrainingSet {
    /// Per video `(N, 3, H, W)`.
    frames: Vec<Tensor>,
    masks: Vec<Tensor>,
    z_id: Vec<Tensor>,
    z_lnd: Vec<Tensor>,
}

impl TrainingSet {
    pub fn new(model: &Model, dataset: &Dataset) -> Result<Self> {
        let dev = Device::Cpu;
        let dt = model.dtype();
        let mut set = TrainingSet {
            frames: Vec::new(),
            masks: Vec::new(),
            z_id: Vec::new(),
            z_lnd: Vec::new(),
        };
        for v in dataset.split(Split::Train) {
            let size = model.config().image_size;
            if v.video.spec.resolution != size {
                return Err(DvaError::Config(format!(
                    "video {} has resolution {}, model expects {size}",
                    v.id, v.video.spec.resolution
                )));
            }
            let frames = v.video.frames_tensor(&dev)?.to_dtype(dt)?;
            let sem = model.encode_semantics(&frames)?;
            set.masks.push(v.video.masks_tensor(&dev)?.to_dtype(dt)?);
            set.frames.push(frames);
            set.z_id.push(sem.z_id);
            set.z_lnd.push(sem.z_lnd);
        }
        if set.frames.is_empty() {
            return Err(DvaError::Config("dataset has no training videos".into()));
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Picks videos without replacement (while possible) and frames within each.
    fn sample(
        &self,
        rng: &mut impl Rng,
        cfg: &TrainConfig,
    ) -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let nv = self.frames.len();
        let videos: Vec<usize> = if cfg.videos_per_batch <= nv {
            sample_indices(rng, nv, cfg.videos_per_batch).into_vec()
        } else {
            (0..cfg.videos_per_batch)
                .map(|_| rng.gen_range(0..nv))
                .collect()
        };
        let mut idx_v = Vec::new();
        for &v in &videos {
            let nf = self.frames[v].dim(0)?;
            let frames: Vec<usize> = if cfg.frames_per_video <= nf {
                sample_indices(rng, nf, cfg.frames_per_video).into_vec()
            } else {
                (0..cfg.frames_per_video)
                    .map(|_| rng.gen_range(0..nf))
                    .collect()
            };
            idx_v.extend(frames.into_iter().map(|f| (v, f)));
        }
        let pick = |src: &[Tensor]| -> Result<Tensor> {
            let rows = idx_v
                .iter()
                .map(|&(v, f)| src[v].narrow(0, f, 1))
                .collect::<candle_core::Result<Vec<_>>>()?;
            Ok(Tensor::cat(&rows, 0)?)
        };
        Ok((
            pick(&self.frames)?,
            pick(&self.masks)?,
            pick(&self.z_id)?,
            pick(&self.z_lnd)?,
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: usize,
    pub loss_simple: f64,
    pub loss_reg: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub history: Vec<StepMetrics>,
    pub seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// Mean simple loss over the last `n` steps.
    pub fn recent_loss_simple(&self, n: usize) -> f64 {
        let tail = &self.history[self.history.len().saturating_sub(n)..];
        tail.iter().map(|m| m.loss_simple).sum::<f64>() / tail.len().max(1) as f64
    }
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

/// Optimizes the estimator and fusion map of `model` on the training split.
///
/// With `out_dir` set, writes `metrics.csv` (every `log_every` steps) and
/// `model.ckpt` (periodically and at the end). A non-finite loss aborts the
/// run; the last periodic checkpoint stays in place.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&StepMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    let set = TrainingSet::new(model, dataset)?;
    let mut opt = AdamW::new(
        model.trainable_vars(),
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut extra = FlatConfig::default();
    cfg.write_to(&mut extra, "train.");
    let mut csv = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| DvaError::io(dir, e))?;
            let p = dir.join(METRICS_FILE);
            let mut f = fs::File::create(&p).map_err(|e| DvaError::io(&p, e))?;
            writeln!(f, "step,loss_simple,loss_reg").map_err(|e| DvaError::io(&p, e))?;
            Some((f, p))
        }
        None => None,
    };
    let started = Instant::now();
    let total_steps = model.schedule().num_steps();
    let mut report = TrainReport::default();
    if model.config().dropout > 0.0 {
        model.estimator.set_training(Some(cfg.seed ^ 0xd0));
    }
    for i in 0..cfg.steps {
        let (x0, masks, z_id, z_lnd) = set.sample(&mut rng, cfg)?;
        let b = x0.dim(0)?;
        let steps: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=total_steps)).collect();
        let eps = gaussian_like(&mut rng, &x0)?;
        let eps_reg = gaussian_like(&mut rng, &x0)?;
        let z_face = model.fuse(&z_id, &z_lnd)?;
        let batch = TrainBatch {
            x0,
            masks: Some(masks),
            steps,
            eps,
            eps_reg,
            z_face,
        };
        opt.set_learning_rate(cfg.lr_at(i));
        let losses = loss_dva(model.schedule(), &model.estimator, &batch, cfg.use_reg)?;
        let total = ops::scalar_f64(&losses.total)?;
        if !total.is_finite() {
            return Err(DvaError::NonFinite(format!(
                "loss at training step {} (t = {:?})",
                model.step + 1,
                batch.steps
            )));
        }
        opt.backward_step(&losses.total)?;
        model.step += 1;
        let m = StepMetrics {
            step: model.step as usize,
            loss_simple: ops::scalar_f64(&losses.simple)?,
            loss_reg: ops::scalar_f64(&losses.reg)?,
        };
        report.history.push(m);
        if (i + 1) % cfg.log_every == 0 || i + 1 == cfg.steps {
            if let Some((f, p)) = csv.as_mut() {
                writeln!(f, "{},{},{}", m.step, m.loss_simple, m.loss_reg)
                    .map_err(|e| DvaError::io(&*p, e))?;
            }
            progress(&m);
        }
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && (i + 1) % cfg.checkpoint_every == 0 && i + 1 < cfg.steps
            {
                model.save(&dir.join(CHECKPOINT_FILE), &extra)?;
            }
        }
    }
    model.estimator.set_training(None);
    if let Some(dir) = out_dir {
        let p = dir.join(CHECKPOINT_FILE);
        model.save(&p, &extra)?;
        report.checkpoint = Some(p);
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Mean over all elements, used for the zero-predictor baseline check.
pub fn mean_abs(t: &Tensor) -> Result<f64> {
    ops::scalar_f64(&t.abs()?.flatten_all()?.mean(D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddim::{OracleEstimator, ZeroEstimator};

    fn toy_batch(seed: u64, b: usize) -> TrainBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dev = Device::Cpu;
        let x0 = Tensor::rand(-1f64, 1.0, (b, 3, 8, 8), &dev).unwrap();
        let masks = (Tensor::rand(0f64, 1.0, (b, 1, 8, 8), &dev)
            .unwrap()
            .ge(0.5)
            .unwrap())
        .to_dtype(DType::F64)
        .unwrap();
        TrainBatch {
            eps: gaussian_like(&mut rng, &x0).unwrap(),
            eps_reg: gaussian_like(&mut rng, &x0).unwrap(),
            steps: (0..b).map(|_| rng.gen_range(1..=1000)).collect(),
            z_face: Tensor::zeros((b, 4), DType::F64, &dev).unwrap(),
            masks: Some(masks),
            x0,
        }
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).unwrap()
    }

    #[test]
    fn oracle_estimator_has_zero_losses() {
        let s = schedule();
        let batch = toy_batch(1, 4);
        let oracle = OracleEstimator::new(s.clone(), batch.x0.clone());
        let l = loss_dva(&s, &oracle, &batch, true).unwrap();
        assert!(ops::scalar_f64(&l.simple).unwrap() < 1e-9);
        assert!(ops::scalar_f64(&l.reg).unwrap() < 1e-9);
    }

    #[test]
    fn zero_predictor_matches_folded_normal_mean() {
        let s = schedule();
        let batch = toy_batch(2, 64);
        let l = loss_simple(&s, &ZeroEstimator, &batch).unwrap();
        // Monte-Carlo oracle: the mean absolute value of the drawn noise itself.
        let mc = mean_abs(&batch.eps).unwrap();
        assert!((ops::scalar_f64(&l).unwrap() - mc).abs() < 1e-12);
        assert!(
            (mc - (2.0 / std::f64::consts::PI).sqrt()).abs() < 0.01,
            "{mc}"
        );
    }

    #[test]
    fn reg_vanishes_for_equal_noise_and_empty_masks() {
        let s = schedule();
        let mut batch = toy_batch(3, 4);
        batch.eps_reg = batch.eps.clone();
        let l = loss_reg(&s, &ZeroEstimator, &batch).unwrap();
        assert_eq!(ops::scalar_f64(&l).unwrap(), 0.0);
        let mut batch = toy_batch(3, 4);
        batch.masks = Some(batch.masks.unwrap().zeros_like().unwrap());
        assert_eq!(
            ops::scalar_f64(&loss_reg(&s, &ZeroEstimator, &batch).unwrap()).unwrap(),
            0.0
        );
        batch.masks = None;
        assert!(matches!(
            loss_reg(&s, &ZeroEstimator, &batch),
            Err(DvaError::Config(_))
        ));
    }

    #[test]
    fn total_is_sum_of_terms() {
        let s = schedule();
        let batch = toy_batch(4, 4);
        let l = loss_dva(&s, &ZeroEstimator, &batch, true).unwrap();
        let (a, b, c) = (
            ops::scalar_f64(&l.simple).unwrap(),
            ops::scalar_f64(&l.reg).unwrap(),
            ops::scalar_f64(&l.total).unwrap(),
        );
        assert!(b > 0.0);
        assert_eq!(a + b, c);
    }

    #[test]
    fn variance_checks() {
        let s = schedule();
        let batch = toy_batch(5, 2);
        let masks = batch.masks.clone().unwrap();
        let oracle = OracleEstimator::new(s.clone(), batch.x0.clone());
        let v =
            masked_x0_variance(&s, &oracle, &batch.x0, &masks, &batch.z_face, 500, 3, 0).unwrap();
        assert!(v < 1e-18);
        assert!(
            masked_x0_variance(&s, &oracle, &batch.x0, &masks, &batch.z_face, 500, 1, 0).is_err()
        );

        // K = 2 against the plug-in formula (a - b)^2 / 4, with the zero
        // predictor whose estimate is x_t / sqrt(ab).
        let t = 300;
        let v = masked_x0_variance(
            &s,
            &ZeroEstimator,
            &batch.x0,
            &masks,
            &batch.z_face,
            t,
            2,
            9,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e1 = gaussian_like(&mut rng, &batch.x0).unwrap();
        let e2 = gaussian_like(&mut rng, &batch.x0).unwrap();
        let ab = s.alpha_bar(t);
        let scale = (1.0 - ab).sqrt() / ab.sqrt();
        let diff = ((e1 - e2).unwrap() * scale).unwrap();
        let plug = (diff.sqr().unwrap() / 4.0).unwrap();
        let m = masks.broadcast_as(plug.shape()).unwrap();
        let want = ops::scalar_f64(&(plug * &m).unwrap().sum_all().unwrap()).unwrap()
            / ops::scalar_f64(&m.sum_all().unwrap()).unwrap();
        assert!((v - want).abs() < 1e-9 * want.max(1.0), "{v} vs {want}");
    }
}
