//! Reproducible desk-scale runs shared by the CLI and the acceptance suite:
//! dataset and encoder preparation, training, and the probe-based
//! evaluations of swaps, random-noise decoding and edits.

use std::hash::{Hash, Hasher};
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::FlatConfig;
use crate::error::{DvaError, Result};
use crate::latent_edit::{fit_attribute_classifier, ClassifierFit, EditDirection};
use crate::nets::encoders::{FrozenEncoders, IdentityPrediction, PretrainConfig};
use crate::nets::{Model, ModelConfig};
use crate::synthdata::{generate_videos, Attribute, Dataset, Split};
use crate::training::{masked_x0_variance, train, TrainConfig, TrainReport};

/// Everything that determines a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub videos: usize,
    pub frames: usize,
    pub test_videos: usize,
    pub data_seed: u64,
    pub encoder: PretrainConfig,
    pub model: ModelConfig,
    pub model_seed: u64,
    pub train: TrainConfig,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            videos: 128,
            frames: 8,
            test_videos: 16,
            data_seed: 1,
            encoder: PretrainConfig::default(),
            model: ModelConfig::desk(),
            model_seed: 0,
            train: TrainConfig::default(),
        }
    }

    pub fn write_to(&self, cfg: &mut FlatConfig) {
        cfg.set("data.videos", self.videos);
        cfg.set("data.frames", self.frames);
        cfg.set("data.test_videos", self.test_videos);
        cfg.set("data.seed", self.data_seed);
        cfg.set("encoder.steps", self.encoder.steps);
        cfg.set("encoder.batch", self.encoder.batch);
        cfg.set("encoder.lr", self.encoder.lr);
        cfg.set("encoder.noise", self.encoder.noise);
        cfg.set("encoder.seed", self.encoder.seed);
        cfg.set("model.seed", self.model_seed);
        self.model.write_to(cfg, "model.");
        self.train.write_to(cfg, "train.");
    }

    /// Reads keys present in `cfg`, keeping `self` for the rest.
    pub fn read_from(&self, cfg: &FlatConfig) -> Result<Self> {
        let out = Self {
            videos: cfg.get_or("data.videos", self.videos)?,
            frames: cfg.get_or("data.frames", self.frames)?,
            test_videos: cfg.get_or("data.test_videos", self.test_videos)?,
            data_seed: cfg.get_or("data.seed", self.data_seed)?,
            encoder: PretrainConfig {
                steps: cfg.get_or("encoder.steps", self.encoder.steps)?,
                batch: cfg.get_or("encoder.batch", self.encoder.batch)?,
                lr: cfg.get_or("encoder.lr", self.encoder.lr)?,
                noise: cfg.get_or("encoder.noise", self.encoder.noise)?,
                seed: cfg.get_or("encoder.seed", self.encoder.seed)?,
            },
            model: self.model.read_from(cfg, "model.")?,
            model_seed: cfg.get_or("model.seed", self.model_seed)?,
            train: self.train.read_from(cfg, "train.")?,
        };
        if out.test_videos >= out.videos {
            return Err(DvaError::Config(format!(
                "test_videos {} must be below videos {}",
                out.test_videos, out.videos
            )));
        }
        Ok(out)
    }

    pub fn to_flat(&self) -> FlatConfig {
        let mut c = FlatConfig::default();
        self.write_to(&mut c);
        c
    }

    /// Stable within one build; used as a cache key.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.to_flat().to_text().hash(&mut h);
        h.finish()
    }

    /// Fingerprint of the settings that determine the pretrained encoders.
    pub fn encoder_fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let c = self.to_flat();
        for k in [
            "encoder.",
            "model.image_size",
            "model.id_dim",
            "model.lnd_dim",
            "model.seed",
        ] {
            c.section(k).to_text().hash(&mut h);
        }
        h.finish()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let videos = generate_videos(
            self.videos,
            self.frames,
            self.model.image_size,
            self.data_seed,
        )?;
        Ok(Dataset::from_videos(videos, self.test_videos))
    }

    /// Freshly pretrained frozen encoders.
    pub fn pretrain_encoders(&self) -> Result<FrozenEncoders> {
        let mut enc = FrozenEncoders::new(
            self.model.image_size,
            self.model.id_dim,
            self.model.lnd_dim,
            self.model_seed.wrapping_add(2),
            DType::F32,
        )?;
        enc.pretrain(&self.encoder)?;
        Ok(enc)
    }

    /// Untrained model with the given encoders installed.
    pub fn fresh_model(&self, encoders: FrozenEncoders) -> Result<Model> {
        let mut model = Model::new(&self.model, self.model_seed)?;
        model.set_encoders(encoders)?;
        Ok(model)
    }

    /// Trains a model with `use_reg` overriding the configured flag.
    pub fn train_model(
        &self,
        encoders: FrozenEncoders,
        dataset: &Dataset,
        use_reg: bool,
        out_dir: Option<&Path>,
        progress: impl FnMut(&crate::training::StepMetrics),
    ) -> Result<(Model, TrainReport)> {
        let mut model = self.fresh_model(encoders)?;
        let cfg = TrainConfig {
            use_reg,
            ..self.train.clone()
        };
        let report = train(&mut model, dataset, &cfg, out_dir, progress)?;
        Ok((model, report))
    }
}

/// Number of frames whose predicted identity equals `target`.
pub fn identity_matches(
    model: &Model,
    frames: &Tensor,
    target: IdentityPrediction,
) -> Result<usize> {
    Ok(model
        .encoders
        .identity
        .predict(frames)?
        .into_iter()
        .filter(|p| *p == target)
        .count())
}

/// Per-frame distance between the pose regressed from `a` and from `b`.
pub fn motion_errors(model: &Model, a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    let pa = model.encoders.landmark.pose(a)?;
    let pb = model.encoders.landmark.pose(b)?;
    Ok((pa - pb)?
        .sqr()?
        .sum(1)?
        .sqrt()?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?)
}

/// Fits the attribute hyperplane on the identity features of every training frame.
pub fn fit_direction(model: &Model, dataset: &Dataset, attr: Attribute) -> Result<EditDirection> {
    let dev = Device::Cpu;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for v in dataset.split(Split::Train) {
        let z = model.encode_semantics(&v.video.frames_tensor(&dev)?)?.z_id;
        for row in z.to_dtype(DType::F64)?.to_vec2::<f64>()? {
            features.push(row);
            labels.push(v.video.spec.identity.has(attr));
        }
    }
    let fit = ClassifierFit {
        provenance: format!("training split, {} frames", features.len()),
        ..Default::default()
    };
    fit_attribute_classifier(attr.name(), &features, &labels, &fit)
}

/// Mean masked x0 variance over the test videos at one diffusion step.
pub fn test_masked_variance(
    model: &Model,
    dataset: &Dataset,
    t: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let dev = Device::Cpu;
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, v) in dataset.split(Split::Test).enumerate() {
        let frames = v.video.frames_tensor(&dev)?;
        let sem = model.encode_semantics(&frames)?;
        let z_face = model.fuse(&sem.z_id, &sem.z_lnd)?.detach();
        let masks = v.video.masks_tensor(&dev)?;
        total += masked_x0_variance(
            model.schedule(),
            &model.estimator,
            &frames,
            &masks,
            &z_face,
            t,
            draws,
            seed.wrapping_add(i as u64),
        )?;
        n += 1;
    }
    if n == 0 {
        return Err(DvaError::Config("dataset has no test videos".into()));
    }
    Ok(total / n as f64)
}
