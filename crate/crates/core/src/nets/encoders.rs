//! Frozen identity and motion encoders.
//!
//! Both are small CNNs pretrained on rendered frames before the main run and
//! never updated afterwards. The identity encoder classifies the glyph's
//! factors; its per-group class probabilities are mapped into the identity
//! space by a fixed matrix with orthonormal columns, so identities that share
//! more factors lie closer together. Its pooled trunk features double as the
//! image embedder for embedding-guided editing. The landmark encoder regresses
//! the normalized pose.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ops::{self, Conv2d, Linear};
use super::params::{Init, ParamStore};
use crate::error::{DvaError, Result};
use crate::synthdata::{
    hue_index, render_layers, stack_images, BackgroundFactors, GlyphShape, IdentityFactors, Pose,
    HUES,
};

/// Class counts of the identity heads: shape, hue, ring, stripe.
pub const ID_GROUPS: [usize; 4] = [GlyphShape::ALL.len(), HUES.len(), 2, 2];
pub const ID_CLASSES: usize = ID_GROUPS[0] + ID_GROUPS[1] + ID_GROUPS[2] + ID_GROUPS[3];
pub const POSE_DIM: usize = 3;
pub const EMBED_DIM: usize = 64;

/// Motion distance below which two motion features count as the same pose.
pub const MOTION_TOLERANCE: f64 = 0.15;

/// Differentiable image embedding, the stand-in for a text-image model.
pub trait Embedder {
    /// `(B, 3, H, W)` in `[-1, 1]` to `(B, E)`.
    fn embed(&self, images: &Tensor) -> Result<Tensor>;
}

impl<E: Embedder + ?Sized> Embedder for &E {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        (**self).embed(images)
    }
}

/// Predicted identity factors, one index per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdentityPrediction {
    pub shape: usize,
    pub hue: usize,
    pub ring: bool,
    pub stripe: bool,
}

impl IdentityPrediction {
    pub fn of(factors: &IdentityFactors) -> Self {
        Self {
            shape: factors.shape.index(),
            hue: hue_index(factors.hue),
            ring: factors.ring,
            stripe: factors.stripe,
        }
    }
}

/// `k` orthonormal columns of length `dim` (as a `(dim, k)` matrix), by
/// Gram-Schmidt on seeded Gaussian vectors.
fn orthonormal_columns(dim: usize, k: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
    while cols.len() < k {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for c in &cols {
            let d: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            cols.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    let mut out = vec![0f32; dim * k];
    for (j, c) in cols.iter().enumerate() {
        for (i, v) in c.iter().enumerate() {
            out[i * k + j] = *v as f32;
        }
    }
    out
}

fn check_frames(x: &Tensor, size: usize, what: &str) -> Result<()> {
    match x.dims() {
        [_, 3, h, w] if *h == size && *w == size => Ok(()),
        d => Err(DvaError::Shape(format!(
            "{what} expects (B, 3, {size}, {size}) frames, got {d:?}"
        ))),
    }
}

pub struct IdentityEncoder {
    convs: Vec<Conv2d>,
    heads: Linear,
    projection: Tensor,
    image_size: usize,
}

impl IdentityEncoder {
    fn new(store: &mut ParamStore, image_size: usize, id_dim: usize, seed: u64) -> Result<Self> {
        if id_dim < ID_CLASSES {
            return Err(DvaError::Config(format!(
                "id_dim {id_dim} must be at least {ID_CLASSES}"
            )));
        }
        let widths = [(3, 24), (24, 24), (24, 48), (48, 64), (64, EMBED_DIM)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Conv2d::new(store, &format!("id.conv{i}"), a, b, 3))
            .collect::<Result<Vec<_>>>()?;
        let heads = Linear::new(store, "id.heads", EMBED_DIM, ID_CLASSES)?;
        let projection = store.get("id.projection", &[id_dim, ID_CLASSES], Init::Zeros)?;
        let q = Tensor::from_vec(
            orthonormal_columns(id_dim, ID_CLASSES, seed ^ 0x1d),
            (id_dim, ID_CLASSES),
            store.device(),
        )?;
        store.assign("id.projection", &q)?;
        Ok(Self {
            convs,
            heads,
            projection,
            image_size,
        })
    }

    /// Pooled trunk features, `(B, EMBED_DIM)`.
    pub fn features(&self, x: &Tensor) -> Result<Tensor> {
        check_frames(x, self.image_size, "identity encoder")?;
        let x = x.to_dtype(self.projection.dtype())?;
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = ops::silu(&conv.forward(&h)?)?;
            if (2..=4).contains(&(i + 1)) {
                h = ops::downsample(&h)?;
            }
        }
        Ok(h.mean(D::Minus1)?.mean(D::Minus1)?)
    }

    /// Raw head logits `(B, ID_CLASSES)`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.heads.forward(&self.features(x)?)
    }

    fn group_probs(&self, logits: &Tensor) -> Result<Tensor> {
        let mut parts = Vec::with_capacity(ID_GROUPS.len());
        let mut start = 0;
        for &n in &ID_GROUPS {
            parts.push(candle_nn::ops::softmax(
                &logits.narrow(1, start, n)?,
                D::Minus1,
            )?);
            start += n;
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// Unit-norm identity features `(B, id_dim)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let probs = self.group_probs(&self.logits(x)?)?;
        ops::l2_normalize(&probs.matmul(&self.projection.t()?)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<IdentityPrediction>> {
        let logits = self.logits(x)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        Ok(logits
            .iter()
            .map(|row| {
                let mut idx = [0usize; 4];
                let mut start = 0;
                for (g, &n) in ID_GROUPS.iter().enumerate() {
                    idx[g] = argmax(&row[start..start + n]);
                    start += n;
                }
                IdentityPrediction {
                    shape: idx[0],
                    hue: idx[1],
                    ring: idx[2] == 1,
                    stripe: idx[3] == 1,
                }
            })
            .collect())
    }

    /// Per-sample probability that the attribute head at `group` (2 = ring,
    /// 3 = stripe) is on.
    pub fn attribute_probability(&self, x: &Tensor, group: usize) -> Result<Vec<f64>> {
        let probs = self.group_probs(&self.logits(x)?)?;
        let start: usize = ID_GROUPS[..group].iter().sum();
        Ok(probs
            .narrow(1, start + 1, 1)?
            .squeeze(1)?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?)
    }
}

impl Embedder for IdentityEncoder {
    fn embed(&self, images: &Tensor) -> Result<Tensor> {
        self.features(images)
    }
}

fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| {
            if x > best.1 {
                (i, x)
            } else {
                best
            }
        })
        .0
}

pub struct LandmarkEncoder {
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
    projection: Tensor,
    image_size: usize,
}

impl LandmarkEncoder {
    fn new(store: &mut ParamStore, image_size: usize, lnd_dim: usize, seed: u64) -> Result<Self> {
        if lnd_dim < POSE_DIM {
            return Err(DvaError::Config(format!(
                "lnd_dim {lnd_dim} must be at least {POSE_DIM}"
            )));
        }
        let widths = [(3, 16), (16, 32), (32, 32)];
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &(a, b))| Conv2d::new(store, &format!("lnd.conv{i}"), a, b, 3))
            .collect::<Result<Vec<_>>>()?;
        let flat = 32 * (image_size / 8) * (image_size / 8);
        let fc1 = Linear::new(store, "lnd.fc1", flat, 64)?;
        let fc2 = Linear::new(store, "lnd.fc2", 64, POSE_DIM)?;
        let projection = store.get("lnd.projection", &[lnd_dim, POSE_DIM], Init::Zeros)?;
        let q = Tensor::from_vec(
            orthonormal_columns(lnd_dim, POSE_DIM, seed ^ 0x2e),
            (lnd_dim, POSE_DIM),
            store.device(),
        )?;
        store.assign("lnd.projection", &q)?;
        Ok(Self {
            convs,
            fc1,
            fc2,
            projection,
            image_size,
        })
    }

    /// Normalized pose `(cx, cy, angle / MAX_ANGLE)` per frame, `(B, 3)`.
    pub fn pose(&self, x: &Tensor) -> Result<Tensor> {
        check_frames(x, self.image_size, "landmark encoder")?;
        let mut h = x.to_dtype(self.projection.dtype())?;
        for conv in &self.convs {
            h = ops::downsample(&ops::silu(&conv.forward(&h)?)?)?;
        }
        let h = h.flatten_from(1)?;
        self.fc2.forward(&ops::silu(&self.fc1.forward(&h)?)?)
    }

    /// Motion features `(B, lnd_dim)`; distances equal pose distances.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.pose(x)?.matmul(&self.projection.t()?)?)
    }
}

/// Both frozen encoders and their parameters.
pub struct FrozenEncoders {
    pub identity: IdentityEncoder,
    pub landmark: LandmarkEncoder,
    store: ParamStore,
}

impl FrozenEncoders {
    pub fn new(
        image_size: usize,
        id_dim: usize,
        lnd_dim: usize,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        if image_size % 8 != 0 {
            return Err(DvaError::Config(format!(
                "encoders need image_size divisible by 8, got {image_size}"
            )));
        }
        let mut store = ParamStore::with_dtype(seed, dtype);
        let identity = IdentityEncoder::new(&mut store, image_size, id_dim, seed)?;
        let landmark = LandmarkEncoder::new(&mut store, image_size, lnd_dim, seed)?;
        Ok(Self {
            identity,
            landmark,
            store,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn image_size(&self) -> usize {
        self.identity.image_size
    }

    /// `(z_id, z_lnd)` for a batch of frames, detached from any graph.
    pub fn encode(&self, frames: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((
            self.identity.encode(frames)?.detach(),
            self.landmark.encode(frames)?.detach(),
        ))
    }

    /// Supervised pretraining on freshly rendered frames with a cosine
    /// learning-rate decay. The projection matrices are left untouched.
    pub fn pretrain(&mut self, cfg: &PretrainConfig) -> Result<PretrainReport> {
        let trainable: Vec<_> = self
            .store
            .named()
            .filter(|(n, _)| !n.ends_with(".projection"))
            .map(|(_, v)| v.clone())
            .collect();
        let mut opt = AdamW::new(
            trainable,
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut report = PretrainReport::default();
        for step in 0..cfg.steps {
            let progress = step as f64 / cfg.steps as f64;
            opt.set_learning_rate(cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
            let batch = sample_batch(
                &mut rng,
                cfg.batch,
                self.image_size(),
                cfg.noise,
                self.device(),
            )?;
            let logits = self.identity.logits(&batch.frames)?;
            let mut id_loss = Tensor::zeros((), logits.dtype(), logits.device())?;
            let mut start = 0;
            for (g, &n) in ID_GROUPS.iter().enumerate() {
                let target = batch.targets.narrow(1, g, 1)?.squeeze(1)?.contiguous()?;
                let l = candle_nn::loss::cross_entropy(&logits.narrow(1, start, n)?, &target)?;
                id_loss = (id_loss + l)?;
                start += n;
            }
            let pose = self.landmark.pose(&batch.frames)?;
            let pose_loss = (pose - batch.poses.to_dtype(logits.dtype())?)?
                .sqr()?
                .mean_all()?;
            let loss = (&id_loss + &pose_loss)?;
            let value = ops::scalar_f64(&loss)?;
            if !value.is_finite() {
                return Err(DvaError::NonFinite(format!(
                    "encoder pretraining loss at step {step}"
                )));
            }
            opt.backward_step(&loss)?;
            report.final_id_loss = ops::scalar_f64(&id_loss)?;
            report.final_pose_loss = ops::scalar_f64(&pose_loss)?;
        }
        report.steps = cfg.steps;
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Upper bound of the per-image Gaussian noise level used as augmentation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 3000,
            batch: 32,
            lr: 2e-3,
            noise: 0.08,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    pub final_id_loss: f64,
    pub final_pose_loss: f64,
}

pub struct LabeledBatch {
    pub frames: Tensor,
    /// `(B, 4)` u32 class indices per identity head.
    pub targets: Tensor,
    /// `(B, 3)` normalized poses.
    pub poses: Tensor,
    pub identities: Vec<IdentityFactors>,
}

/// Random single frames with independent factors; `noise` bounds the
/// per-image augmentation noise (0 disables it).
pub fn sample_batch(
    rng: &mut impl Rng,
    batch: usize,
    image_size: usize,
    noise: f64,
    device: &Device,
) -> Result<LabeledBatch> {
    let mut images = Vec::with_capacity(batch);
    let mut targets = Vec::with_capacity(batch * 4);
    let mut poses = Vec::with_capacity(batch * POSE_DIM);
    let mut identities = Vec::with_capacity(batch);
    for _ in 0..batch {
        let id = IdentityFactors::sample(rng);
        let pose = Pose::sample(rng);
        let bg = BackgroundFactors::sample(rng);
        let mut img = render_layers(&id, &pose, &bg, rng.gen(), image_size).compose();
        if noise > 0.0 {
            let sigma = rng.gen_range(0.0..noise);
            for v in img.data.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += (sigma * z) as f32;
            }
        }
        images.push(img);
        let p = IdentityPrediction::of(&id);
        targets.extend([p.shape as u32, p.hue as u32, p.ring as u32, p.stripe as u32]);
        poses.extend(pose.normalized().map(|v| v as f32));
        identities.push(id);
    }
    Ok(LabeledBatch {
        frames: stack_images(&images, device)?,
        targets: Tensor::from_vec(targets, (batch, 4), device)?,
        poses: Tensor::from_vec(poses, (batch, POSE_DIM), device)?,
        identities,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_columns_are_orthonormal() {
        let q = orthonormal_columns(16, ID_CLASSES, 3);
        for a in 0..ID_CLASSES {
            for b in 0..ID_CLASSES {
                let d: f64 = (0..16)
                    .map(|i| q[i * ID_CLASSES + a] as f64 * q[i * ID_CLASSES + b] as f64)
                    .sum();
                let want = if a == b { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn outputs_are_unit_norm_and_deterministic() {
        let enc = FrozenEncoders::new(32, 32, 8, 1, DType::F32).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = sample_batch(&mut rng, 3, 32, 0.0, enc.device()).unwrap();
        let (z, m) = enc.encode(&b.frames).unwrap();
        let (z2, m2) = enc.encode(&b.frames).unwrap();
        assert_eq!(z.to_vec2::<f32>().unwrap(), z2.to_vec2::<f32>().unwrap());
        assert_eq!(m.to_vec2::<f32>().unwrap(), m2.to_vec2::<f32>().unwrap());
        for row in z.to_vec2::<f32>().unwrap() {
            let n: f64 = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        assert_eq!(m.dims(), &[3, 8]);
    }

    #[test]
    fn wrong_size_is_rejected() {
        let enc = FrozenEncoders::new(32, 32, 8, 1, DType::F32).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(enc.identity.encode(&x), Err(DvaError::Shape(_))));
        assert!(matches!(enc.landmark.encode(&x), Err(DvaError::Shape(_))));
    }
}
