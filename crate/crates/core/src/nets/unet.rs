//! Conditional UNet noise estimator.
//!
//! Each residual block is `GN-SiLU-Conv-GN`, scale/shift by the time
//! embedding, `SiLU-Conv-GN`, scale/shift by the projected `z_face`, then
//! `SiLU-Dropout-Conv` plus the skip path. Frames may be folded into `p x p`
//! pixel blocks before the first convolution (`patch_size`), which keeps the
//! desk-scale model trainable on a CPU.

use std::sync::Mutex;

use candle_core::{DType, Tensor, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::ops::{self, Conv2d, GroupNorm, Linear};
use super::params::{Init, ParamStore};
use crate::ddim::NoiseEstimator;
use crate::error::{DvaError, Result};

fn timestep_embedding(steps: &[usize], dim: usize, device: &candle_core::Device) -> Result<Tensor> {
    // f32 values; callers cast to the parameter dtype.
    let half = dim / 2;
    let mut data = Vec::with_capacity(steps.len() * dim);
    for &t in steps {
        let t = t as f64;
        let mut row = vec![0f32; dim];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            row[i] = (t * freq).cos() as f32;
            row[half + i] = (t * freq).sin() as f32;
        }
        data.extend(row);
    }
    Ok(Tensor::from_vec(data, (steps.len(), dim), device)?)
}

struct Modulation {
    proj: Linear,
}

impl Modulation {
    fn new(store: &mut ParamStore, name: &str, cond_dim: usize, channels: usize) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(store, name, cond_dim, 2 * channels)?,
        })
    }

    /// `h * (1 + scale) + shift`, both taken from `SiLU-Linear(cond)`.
    fn apply(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let c = h.dim(1)?;
        let ss = self.proj.forward(&ops::silu(cond)?)?;
        ops::modulate(h, &ss.narrow(1, 0, c)?, &ss.narrow(1, c, c)?)
    }
}

struct ResBlock {
    norm_in: GroupNorm,
    conv1: Conv2d,
    norm1: GroupNorm,
    time_mod: Modulation,
    conv2: Conv2d,
    norm2: GroupNorm,
    face_mod: Modulation,
    conv3: Conv2d,
    skip: Option<Conv2d>,
    dropout: f64,
}

impl ResBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &ModelConfig,
        in_ch: usize,
        out_ch: usize,
    ) -> Result<Self> {
        let g = cfg.groups;
        Ok(Self {
            norm_in: GroupNorm::new(store, &format!("{name}.norm_in"), g, in_ch)?,
            conv1: Conv2d::new(store, &format!("{name}.conv1"), in_ch, out_ch, 3)?,
            norm1: GroupNorm::new(store, &format!("{name}.norm1"), g, out_ch)?,
            time_mod: Modulation::new(store, &format!("{name}.time"), cfg.time_embed_dim, out_ch)?,
            conv2: Conv2d::new(store, &format!("{name}.conv2"), out_ch, out_ch, 3)?,
            norm2: GroupNorm::new(store, &format!("{name}.norm2"), g, out_ch)?,
            face_mod: Modulation::new(store, &format!("{name}.face"), cfg.z_face_dim, out_ch)?,
            conv3: Conv2d::with_init(
                store,
                &format!("{name}.conv3"),
                out_ch,
                out_ch,
                3,
                Init::Zeros,
            )?,
            skip: if in_ch != out_ch {
                Some(Conv2d::new(
                    store,
                    &format!("{name}.skip"),
                    in_ch,
                    out_ch,
                    1,
                )?)
            } else {
                None
            },
            dropout: cfg.dropout,
        })
    }

    fn forward(
        &self,
        x: &Tensor,
        temb: &Tensor,
        zface: &Tensor,
        rng: Option<&Mutex<ChaCha8Rng>>,
    ) -> Result<Tensor> {
        let h = self.conv1.forward(&ops::silu(&self.norm_in.forward(x)?)?)?;
        let h = self.time_mod.apply(&self.norm1.forward(&h)?, temb)?;
        let h = self.conv2.forward(&ops::silu(&h)?)?;
        let h = self.face_mod.apply(&self.norm2.forward(&h)?, zface)?;
        let mut h = ops::silu(&h)?;
        if let (Some(rng), true) = (rng, self.dropout > 0.0) {
            h = dropout(&h, self.dropout, rng)?;
        }
        let h = self.conv3.forward(&h)?;
        let skip = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

fn dropout(h: &Tensor, p: f64, rng: &Mutex<ChaCha8Rng>) -> Result<Tensor> {
    let mut rng = rng.lock().expect("dropout rng poisoned");
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f32> = (0..h.elem_count())
        .map(|_| {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                keep as f32
            }
        })
        .collect();
    let mask = Tensor::from_vec(mask, h.dims(), h.device())?.to_dtype(h.dtype())?;
    Ok((h * mask)?)
}

struct Attention {
    norm: GroupNorm,
    qkv: Conv2d,
    proj: Conv2d,
    heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, ch: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), cfg.groups, ch)?,
            qkv: Conv2d::new(store, &format!("{name}.qkv"), ch, 3 * ch, 1)?,
            proj: Conv2d::with_init(store, &format!("{name}.proj"), ch, ch, 1, Init::Zeros)?,
            heads: (ch / 32).max(1),
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = h * w;
        let hd = c / self.heads;
        let qkv = self.qkv.forward(&self.norm.forward(x)?)?;
        let qkv = qkv.reshape((b, 3, self.heads, hd, n))?;
        let q = qkv.narrow(1, 0, 1)?.squeeze(1)?.contiguous()?;
        let k = qkv.narrow(1, 1, 1)?.squeeze(1)?.contiguous()?;
        let v = qkv.narrow(1, 2, 1)?.squeeze(1)?.contiguous()?;
        // (b, heads, n, n): token i attends to token j
        let logits = q.transpose(2, 3)?.contiguous()?.matmul(&k)?;
        let attn = candle_nn::ops::softmax(&(logits * (1.0 / (hd as f64).sqrt()))?, D::Minus1)?;
        let out = v.matmul(&attn.transpose(2, 3)?.contiguous()?)?;
        let out = out.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

enum Layer {
    Res(ResBlock),
    Attn(Attention),
    Down,
    Up,
}

/// The trainable conditional noise estimator.
pub struct UNet {
    cfg: ModelConfig,
    time_in: Linear,
    time_out: Linear,
    conv_in: Conv2d,
    down: Vec<Layer>,
    /// After each entry of `down` except attention, a skip is recorded.
    mid: Vec<Layer>,
    up: Vec<Layer>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    dropout_rng: Option<Mutex<ChaCha8Rng>>,
    dtype: DType,
}

impl UNet {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size;
        let io = cfg.in_channels * p * p;
        let base = cfg.base_channels;
        let time_in = Linear::new(store, "time.fc1", cfg.time_base_dim, cfg.time_embed_dim)?;
        let time_out = Linear::new(store, "time.fc2", cfg.time_embed_dim, cfg.time_embed_dim)?;
        let conv_in = Conv2d::new(store, "conv_in", io, base, 3)?;

        let mut skip_channels = vec![base];
        let mut down = Vec::new();
        let mut ch = base;
        let mut res = cfg.image_size / p;
        for (level, &mult) in cfg.channel_mult.iter().enumerate() {
            let out = base * mult;
            for i in 0..cfg.num_res_blocks {
                down.push(Layer::Res(ResBlock::new(
                    store,
                    &format!("down.{level}.{i}"),
                    cfg,
                    ch,
                    out,
                )?));
                ch = out;
                if cfg.attention_resolutions.contains(&res) {
                    down.push(Layer::Attn(Attention::new(
                        store,
                        &format!("down.{level}.{i}.attn"),
                        cfg,
                        ch,
                    )?));
                }
                skip_channels.push(ch);
            }
            if level + 1 < cfg.channel_mult.len() {
                down.push(Layer::Down);
                res /= 2;
                skip_channels.push(ch);
            }
        }

        let mid = vec![
            Layer::Res(ResBlock::new(store, "mid.0", cfg, ch, ch)?),
            Layer::Attn(Attention::new(store, "mid.attn", cfg, ch)?),
            Layer::Res(ResBlock::new(store, "mid.1", cfg, ch, ch)?),
        ];

        let mut up = Vec::new();
        for (level, &mult) in cfg.channel_mult.iter().enumerate().rev() {
            let out = base * mult;
            for i in 0..=cfg.num_res_blocks {
                let skip = skip_channels.pop().expect("skip bookkeeping");
                up.push(Layer::Res(ResBlock::new(
                    store,
                    &format!("up.{level}.{i}"),
                    cfg,
                    ch + skip,
                    out,
                )?));
                ch = out;
                if cfg.attention_resolutions.contains(&res) {
                    up.push(Layer::Attn(Attention::new(
                        store,
                        &format!("up.{level}.{i}.attn"),
                        cfg,
                        ch,
                    )?));
                }
            }
            if level > 0 {
                up.push(Layer::Up);
                res *= 2;
            }
        }
        debug_assert!(skip_channels.is_empty());

        let norm_out = GroupNorm::new(store, "norm_out", cfg.groups, ch)?;
        let conv_out = Conv2d::with_init(store, "conv_out", ch, io, 3, Init::Zeros)?;
        Ok(Self {
            cfg: cfg.clone(),
            time_in,
            time_out,
            conv_in,
            down,
            mid,
            up,
            norm_out,
            conv_out,
            dropout_rng: None,
            dtype: store.dtype(),
        })
    }

    /// Enables dropout (when configured) for subsequent forward passes.
    pub fn set_training(&mut self, seed: Option<u64>) {
        self.dropout_rng = seed.map(|s| Mutex::new(ChaCha8Rng::seed_from_u64(s)));
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor, steps: &[usize], z_face: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let size = self.cfg.image_size;
        if c != self.cfg.in_channels || h != size || w != size {
            return Err(DvaError::Shape(format!(
                "estimator expects (B, {}, {size}, {size}), got {:?}",
                self.cfg.in_channels,
                x.dims()
            )));
        }
        if steps.len() != b || z_face.dims() != [b, self.cfg.z_face_dim] {
            return Err(DvaError::Shape(format!(
                "batch {b}: {} steps, z_face {:?}",
                steps.len(),
                z_face.dims()
            )));
        }
        if let Some(&t) = steps
            .iter()
            .find(|&&t| t == 0 || t > self.cfg.diffusion_steps)
        {
            return Err(DvaError::Step(format!(
                "estimator step {t} outside 1..={}",
                self.cfg.diffusion_steps
            )));
        }
        let dtype = x.dtype();
        let x = x.to_dtype(self.dtype)?;
        let z_face = z_face.to_dtype(self.dtype)?;
        let temb =
            timestep_embedding(steps, self.cfg.time_base_dim, x.device())?.to_dtype(self.dtype)?;
        let temb = self
            .time_out
            .forward(&ops::silu(&self.time_in.forward(&temb)?)?)?;
        let rng = self.dropout_rng.as_ref();

        let mut h = self
            .conv_in
            .forward(&ops::space_to_depth(&x, self.cfg.patch_size)?)?;
        let mut skips = vec![h.clone()];
        for layer in &self.down {
            h = match layer {
                Layer::Res(r) => r.forward(&h, &temb, &z_face, rng)?,
                Layer::Attn(a) => {
                    let out = a.forward(&h)?;
                    skips.pop();
                    out
                }
                Layer::Down => ops::downsample(&h)?,
                Layer::Up => unreachable!(),
            };
            skips.push(h.clone());
        }
        for layer in &self.mid {
            h = match layer {
                Layer::Res(r) => r.forward(&h, &temb, &z_face, rng)?,
                Layer::Attn(a) => a.forward(&h)?,
                _ => unreachable!(),
            };
        }
        for layer in &self.up {
            h = match layer {
                Layer::Res(r) => {
                    let skip = skips.pop().expect("skip bookkeeping");
                    r.forward(&Tensor::cat(&[&h, &skip], 1)?, &temb, &z_face, rng)?
                }
                Layer::Attn(a) => a.forward(&h)?,
                Layer::Up => ops::upsample(&h)?,
                Layer::Down => unreachable!(),
            };
        }
        let out = self
            .conv_out
            .forward(&ops::silu(&self.norm_out.forward(&h)?)?)?;
        let out = ops::depth_to_space(&out, self.cfg.patch_size)?;
        Ok(out.to_dtype(dtype)?)
    }
}

impl NoiseEstimator for UNet {
    fn estimate(&self, x_t: &Tensor, steps: &[usize], z_face: &Tensor) -> Result<Tensor> {
        self.forward(x_t, steps, z_face)
    }
}
