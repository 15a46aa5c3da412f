use crate::config::FlatConfig;
use crate::error::{DvaError, Result};
use crate::schedule::NoiseSchedule;

/// Architecture and diffusion constants of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Pixel-block folding before the first convolution; 1 disables it.
    pub patch_size: usize,
    pub base_channels: usize,
    pub channel_mult: Vec<usize>,
    pub num_res_blocks: usize,
    /// Internal feature-map sizes (after patch folding) that get self-attention.
    pub attention_resolutions: Vec<usize>,
    pub time_base_dim: usize,
    pub time_embed_dim: usize,
    pub z_face_dim: usize,
    pub dropout: f64,
    pub groups: usize,
    pub id_dim: usize,
    pub lnd_dim: usize,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub clamp_x0: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 32x32 frames, CPU-trainable.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            patch_size: 2,
            base_channels: 32,
            channel_mult: vec![1, 2, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![8],
            time_base_dim: 32,
            time_embed_dim: 128,
            z_face_dim: 64,
            dropout: 0.0,
            groups: 8,
            id_dim: 32,
            lnd_dim: 8,
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            clamp_x0: false,
        }
    }

    /// The 256x256 face-video configuration.
    pub fn full_scale() -> Self {
        Self {
            image_size: 256,
            patch_size: 1,
            base_channels: 128,
            channel_mult: vec![1, 1, 2, 2, 4, 4],
            num_res_blocks: 2,
            attention_resolutions: vec![16],
            time_base_dim: 128,
            time_embed_dim: 512,
            z_face_dim: 512,
            groups: 32,
            id_dim: 512,
            ..Self::desk()
        }
    }

    /// Tiny configuration for gradient checks.
    pub fn tiny(image_size: usize) -> Self {
        Self {
            image_size,
            patch_size: 1,
            base_channels: 8,
            channel_mult: vec![1, 2],
            num_res_blocks: 1,
            attention_resolutions: vec![image_size / 2],
            time_base_dim: 8,
            time_embed_dim: 16,
            z_face_dim: 8,
            groups: 4,
            id_dim: 16,
            lnd_dim: 8,
            ..Self::desk()
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(
            NoiseSchedule::linear(self.diffusion_steps, self.beta_start, self.beta_end)?
                .with_clamp(self.clamp_x0),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DvaError::Config(m));
        if self.channel_mult.is_empty() {
            return bad("channel_mult must not be empty".into());
        }
        if self.base_channels == 0
            || self.time_base_dim == 0
            || self.time_embed_dim == 0
            || self.z_face_dim == 0
            || self.id_dim == 0
            || self.lnd_dim == 0
            || self.num_res_blocks == 0
        {
            return bad("dimensions must be positive".into());
        }
        if self.time_base_dim % 2 != 0 {
            return bad("time_base_dim must be even".into());
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        let internal = self.image_size / self.patch_size;
        let levels = self.channel_mult.len() as u32 - 1;
        if internal % 2usize.pow(levels) != 0 {
            return bad(format!(
                "feature size {internal} cannot be halved {levels} times"
            ));
        }
        for m in &self.channel_mult {
            if *m == 0 || (self.base_channels * m) % self.groups != 0 {
                return bad(format!(
                    "channels {} not divisible into {} groups",
                    self.base_channels * m,
                    self.groups
                ));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.image_size < 8 {
            return bad("image_size must be at least 8".into());
        }
        Ok(())
    }

    pub fn write_to(&self, cfg: &mut FlatConfig, prefix: &str) {
        let k = |s: &str| format!("{prefix}{s}");
        cfg.set(&k("image_size"), self.image_size);
        cfg.set(&k("in_channels"), self.in_channels);
        cfg.set(&k("patch_size"), self.patch_size);
        cfg.set(&k("base_channels"), self.base_channels);
        cfg.set(&k("channel_mult"), join(&self.channel_mult));
        cfg.set(&k("num_res_blocks"), self.num_res_blocks);
        cfg.set(
            &k("attention_resolutions"),
            join(&self.attention_resolutions),
        );
        cfg.set(&k("time_base_dim"), self.time_base_dim);
        cfg.set(&k("time_embed_dim"), self.time_embed_dim);
        cfg.set(&k("z_face_dim"), self.z_face_dim);
        cfg.set(&k("dropout"), self.dropout);
        cfg.set(&k("groups"), self.groups);
        cfg.set(&k("id_dim"), self.id_dim);
        cfg.set(&k("lnd_dim"), self.lnd_dim);
        cfg.set(&k("diffusion_steps"), self.diffusion_steps);
        cfg.set(&k("beta_start"), self.beta_start);
        cfg.set(&k("beta_end"), self.beta_end);
        cfg.set(&k("clamp_x0"), self.clamp_x0);
    }

    /// Reads keys under `prefix`, falling back to `self` for absent ones.
    pub fn read_from(&self, cfg: &FlatConfig, prefix: &str) -> Result<Self> {
        let k = |s: &str| format!("{prefix}{s}");
        let out = Self {
            image_size: cfg.get_or(&k("image_size"), self.image_size)?,
            in_channels: cfg.get_or(&k("in_channels"), self.in_channels)?,
            patch_size: cfg.get_or(&k("patch_size"), self.patch_size)?,
            base_channels: cfg.get_or(&k("base_channels"), self.base_channels)?,
            channel_mult: cfg.get_list_or(&k("channel_mult"), &self.channel_mult)?,
            num_res_blocks: cfg.get_or(&k("num_res_blocks"), self.num_res_blocks)?,
            attention_resolutions: cfg
                .get_list_or(&k("attention_resolutions"), &self.attention_resolutions)?,
            time_base_dim: cfg.get_or(&k("time_base_dim"), self.time_base_dim)?,
            time_embed_dim: cfg.get_or(&k("time_embed_dim"), self.time_embed_dim)?,
            z_face_dim: cfg.get_or(&k("z_face_dim"), self.z_face_dim)?,
            dropout: cfg.get_or(&k("dropout"), self.dropout)?,
            groups: cfg.get_or(&k("groups"), self.groups)?,
            id_dim: cfg.get_or(&k("id_dim"), self.id_dim)?,
            lnd_dim: cfg.get_or(&k("lnd_dim"), self.lnd_dim)?,
            diffusion_steps: cfg.get_or(&k("diffusion_steps"), self.diffusion_steps)?,
            beta_start: cfg.get_or(&k("beta_start"), self.beta_start)?,
            beta_end: cfg.get_or(&k("beta_end"), self.beta_end)?,
            clamp_x0: cfg.get_or(&k("clamp_x0"), self.clamp_x0)?,
        };
        out.validate()?;
        Ok(out)
    }
}

fn join(v: &[usize]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}
