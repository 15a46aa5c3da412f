//! Differentiable building blocks on top of candle tensors.

use candle_core::{DType, Tensor, D};

use super::kernels::{Conv, GroupNormOp, Modulate, Silu};
use super::params::{Init, ParamStore};
use crate::error::Result;

/// 3x3 (padding 1) or 1x1 convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        Self::with_init(
            store,
            name,
            in_channels,
            out_channels,
            kernel,
            Init::KaimingUniform,
        )
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        init: Init,
    ) -> Result<Self> {
        assert!(kernel == 1 || kernel == 3, "only 1x1 and 3x3 kernels");
        // Weight rows are laid out to match the im2col row order (ky, kx, c).
        let weight = store.get(
            &format!("{name}.weight"),
            &[out_channels, kernel * kernel * in_channels],
            init,
        )?;
        let bias = store.get(&format!("{name}.bias"), &[out_channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            kernel,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.contiguous()?
            .apply_op3(&self.weight, &self.bias, Conv::new(self.kernel))?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize) -> Result<Self> {
        Self::with_init(store, name, input, output, Init::KaimingUniform)
    }

    pub fn with_init(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[output, input], init)?;
        let bias = store.get(&format!("{name}.bias"), &[output], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// `(B, in) -> (B, out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Group normalization with a per-channel affine transform.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, groups: usize, channels: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(crate::error::DvaError::Config(format!(
                "{name}: {channels} channels not divisible into {groups} groups"
            )));
        }
        Ok(Self {
            groups,
            gamma: store.get(&format!("{name}.gamma"), &[channels], Init::Ones)?,
            beta: store.get(&format!("{name}.beta"), &[channels], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let op = GroupNormOp {
            groups: self.groups,
            eps: self.eps,
        };
        Ok(x.contiguous()?.apply_op3(&self.gamma, &self.beta, op)?)
    }
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Silu)?)
}

/// `h * (1 + scale) + shift` with `h (B, C, H, W)` and per-channel `(B, C)` factors.
pub fn modulate(h: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    Ok(h.contiguous()?
        .apply_op3(&scale.contiguous()?, &shift.contiguous()?, Modulate)?)
}

/// Folds `p x p` pixel blocks into channels: `(B, C, H, W) -> (B, C p^2, H/p, W/p)`.
pub fn space_to_depth(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h / p, p, w / p, p))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?;
    Ok(y.reshape((b, c * p * p, h / p, w / p))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, p: usize) -> Result<Tensor> {
    if p == 1 {
        return Ok(x.clone());
    }
    let (b, cp, h, w) = x.dims4()?;
    let c = cp / (p * p);
    let y = x
        .reshape((b, c, p, p, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?;
    Ok(y.reshape((b, c, h * p, w * p))?)
}

/// 2x2 average pooling.
pub fn downsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x.reshape((b, c, h / 2, 2, w / 2, 2))?;
    Ok(y.sum(5)?.sum(3)?.affine(0.25, 0.0)?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?;
    Ok(y.reshape((b, c, h * 2, w * 2))?)
}

/// Unit-norm rows of a `(B, D)` tensor.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    Ok(x.broadcast_div(&(norm + 1e-12)?)?)
}

/// Row-wise cosine similarity of two `(B, D)` tensors, shape `(B,)`.
pub fn cosine_similarity(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let dot = (a * b)?.sum(D::Minus1)?;
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    Ok((dot / ((na * nb)? + 1e-12)?)?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn depth_space_round_trip() {
        let dev = Device::Cpu;
        let x = Tensor::randn(0f32, 1.0, (2, 3, 8, 8), &dev).unwrap();
        let y = depth_to_space(&space_to_depth(&x, 2).unwrap(), 2).unwrap();
        let d = (x - y)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap();
        assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
    }

    #[test]
    fn pooling_shapes_and_values() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 16.0, &dev)
            .unwrap()
            .reshape((1, 1, 4, 4))
            .unwrap();
        let d = downsample(&x).unwrap();
        assert_eq!(
            d.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![2.5, 4.5, 10.5, 12.5]
        );
        let u = upsample(&d).unwrap();
        assert_eq!(u.dims(), &[1, 1, 4, 4]);
        assert_eq!(
            u.flatten_all().unwrap().to_vec1::<f32>().unwrap()[..4],
            [2.5, 2.5, 4.5, 4.5]
        );
    }
}
