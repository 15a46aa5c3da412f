//! Networks: the conditional noise estimator, the frozen encoders and the
//! trainable fusion map, plus the aggregate [`Model`] and its checkpoints.

pub mod checkpoint;
pub mod config;
pub mod encoders;
mod kernels;
pub mod ops;
pub mod params;
pub mod unet;

use std::path::Path;

use candle_core::{DType, Tensor, Var};

pub use checkpoint::{Checkpoint, TensorData};
pub use config::ModelConfig;
pub use encoders::{Embedder, FrozenEncoders, IdentityEncoder, LandmarkEncoder};
use ops::Linear;
pub use params::{Init, ParamStore};
pub use unet::UNet;

use crate::config::FlatConfig;
use crate::ddim::NoiseEstimator;
use crate::error::{DvaError, Result};
use crate::schedule::NoiseSchedule;

/// Two-hidden-layer MLP mapping `(z_id, z_lnd)` to `z_face`.
pub struct Fusion {
    fc1: Linear,
    fc2: Linear,
    fc3: Linear,
    id_dim: usize,
    lnd_dim: usize,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, final_init: Init) -> Result<Self> {
        let d = cfg.z_face_dim;
        Ok(Self {
            fc1: Linear::new(store, "fc1", cfg.id_dim + cfg.lnd_dim, d)?,
            fc2: Linear::new(store, "fc2", d, d)?,
            fc3: Linear::with_init(store, "fc3", d, d, final_init)?,
            id_dim: cfg.id_dim,
            lnd_dim: cfg.lnd_dim,
        })
    }

    /// `(B, id_dim)`, `(B, lnd_dim)` to `(B, z_face_dim)`.
    pub fn forward(&self, z_id: &Tensor, z_lnd: &Tensor) -> Result<Tensor> {
        let (b, di) = z_id.dims2()?;
        let (bl, dl) = z_lnd.dims2()?;
        if b != bl || di != self.id_dim || dl != self.lnd_dim {
            return Err(DvaError::Shape(format!(
                "fuse expects (B, {}) and (B, {}), got {:?} and {:?}",
                self.id_dim,
                self.lnd_dim,
                z_id.dims(),
                z_lnd.dims()
            )));
        }
        // unit-norm codes rescaled to unit RMS per component
        let x = Tensor::cat(
            &[
                (z_id * (self.id_dim as f64).sqrt())?,
                (z_lnd * (self.lnd_dim as f64).sqrt())?,
            ],
            1,
        )?;
        let h = ops::silu(&self.fc1.forward(&x)?)?;
        let h = ops::silu(&self.fc2.forward(&h)?)?;
        self.fc3.forward(&h)
    }
}

/// Identity and motion features of a batch of frames.
#[derive(Debug, Clone)]
pub struct SemanticLatents {
    /// `(B, id_dim)`, unit rows.
    pub z_id: Tensor,
    /// `(B, lnd_dim)`.
    pub z_lnd: Tensor,
}

const ESTIMATOR: &str = "estimator/";
const FUSION: &str = "fusion/";
const ENCODERS: &str = "encoders/";

/// Estimator, fusion MLP and frozen encoders with a shared configuration.
pub struct Model {
    cfg: ModelConfig,
    schedule: NoiseSchedule,
    pub estimator: UNet,
    pub fusion: Fusion,
    pub encoders: FrozenEncoders,
    estimator_store: ParamStore,
    fusion_store: ParamStore,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(cfg, seed, DType::F32)
    }

    pub fn with_dtype(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(cfg, seed, dtype, Init::KaimingUniform)
    }

    /// Builds the model with the fusion map's last layer initialized by `final_init`.
    pub fn build(cfg: &ModelConfig, seed: u64, dtype: DType, final_init: Init) -> Result<Self> {
        cfg.validate()?;
        let mut estimator_store = ParamStore::with_dtype(seed, dtype);
        let estimator = UNet::new(&mut estimator_store, cfg)?;
        let mut fusion_store = ParamStore::with_dtype(seed.wrapping_add(1), dtype);
        let fusion = Fusion::new(&mut fusion_store, cfg, final_init)?;
        let encoders = FrozenEncoders::new(
            cfg.image_size,
            cfg.id_dim,
            cfg.lnd_dim,
            seed.wrapping_add(2),
            dtype,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            schedule: cfg.schedule()?,
            estimator,
            fusion,
            encoders,
            estimator_store,
            fusion_store,
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn dtype(&self) -> DType {
        self.estimator_store.dtype()
    }

    /// Parameters updated by training: the estimator and the fusion map.
    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut v = self.estimator_store.vars();
        v.extend(self.fusion_store.vars());
        v
    }

    pub fn estimator_store(&self) -> &ParamStore {
        &self.estimator_store
    }

    pub fn fusion_store(&self) -> &ParamStore {
        &self.fusion_store
    }

    pub fn frozen_checksum(&self) -> Result<u64> {
        self.encoders.store().checksum()
    }

    pub fn trainable_checksum(&self) -> Result<u64> {
        Ok(self.estimator_store.checksum()? ^ self.fusion_store.checksum()?.rotate_left(1))
    }

    /// Replaces the frozen encoders (for instance with pretrained ones).
    pub fn set_encoders(&mut self, encoders: FrozenEncoders) -> Result<()> {
        if encoders.image_size() != self.cfg.image_size {
            return Err(DvaError::Config(
                "encoder image size differs from model".into(),
            ));
        }
        self.encoders = encoders;
        Ok(())
    }

    /// Frames `(B, 3, H, W)` to identity and motion features (no gradient).
    pub fn encode_semantics(&self, frames: &Tensor) -> Result<SemanticLatents> {
        let (z_id, z_lnd) = self.encoders.encode(frames)?;
        Ok(SemanticLatents { z_id, z_lnd })
    }

    pub fn fuse(&self, z_id: &Tensor, z_lnd: &Tensor) -> Result<Tensor> {
        let dt = self.dtype();
        self.fusion
            .forward(&z_id.to_dtype(dt)?, &z_lnd.to_dtype(dt)?)
    }

    pub fn to_checkpoint(&self, extra: &FlatConfig) -> Result<Checkpoint> {
        let mut config = extra.clone();
        self.cfg.write_to(&mut config, "model.");
        let mut ckpt = Checkpoint {
            step: self.step,
            config,
            ..Default::default()
        };
        let stores = [
            (ESTIMATOR, &self.estimator_store),
            (FUSION, &self.fusion_store),
            (ENCODERS, self.encoders.store()),
        ];
        for (prefix, store) in stores {
            for (name, var) in store.named() {
                ckpt.tensors.insert(
                    format!("{prefix}{name}"),
                    TensorData {
                        shape: var.dims().to_vec(),
                        data: var.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
                    },
                );
            }
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path, extra: &FlatConfig) -> Result<()> {
        self.to_checkpoint(extra)?.write(path)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let cfg = ModelConfig::desk().read_from(&ckpt.config, "model.")?;
        let mut model = Self::new(&cfg, 0)?;
        let mut expected = 0;
        let stores = [
            (ESTIMATOR, &model.estimator_store),
            (FUSION, &model.fusion_store),
            (ENCODERS, model.encoders.store()),
        ];
        for (prefix, store) in stores {
            for (name, _) in store.named() {
                let key = format!("{prefix}{name}");
                let t = ckpt
                    .tensors
                    .get(&key)
                    .ok_or_else(|| DvaError::Config(format!("checkpoint lacks tensor {key}")))?;
                let value = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), store.device())?;
                store.assign(name, &value)?;
                expected += 1;
            }
        }
        if expected != ckpt.tensors.len() {
            return Err(DvaError::Config(format!(
                "checkpoint has {} tensors, model expects {expected}",
                ckpt.tensors.len()
            )));
        }
        model.step = ckpt.step;
        Ok(model)
    }

    /// Loads a checkpoint, returning the model and the stored configuration.
    pub fn load(path: &Path) -> Result<(Self, FlatConfig)> {
        let ckpt = Checkpoint::read(path)?;
        let model = Self::from_checkpoint(&ckpt).map_err(|e| match e {
            DvaError::Config(m) => DvaError::parse(path, "tensors", m),
            other => other,
        })?;
        Ok((model, ckpt.config))
    }
}

impl NoiseEstimator for Model {
    fn estimate(&self, x_t: &Tensor, steps: &[usize], z_face: &Tensor) -> Result<Tensor> {
        self.estimator.forward(x_t, steps, z_face)
    }
}
