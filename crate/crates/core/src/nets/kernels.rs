//! Fused CPU kernels with hand-written backward passes.
//!
//! candle's generic backward for broadcasting ops reduces gradients through
//! several strided passes, which makes training several times slower than
//! the forward pass alone. The layers that dominate the estimator (3x3 and
//! 1x1 convolutions, group normalization, SiLU and feature-wise modulation)
//! are therefore implemented here as custom ops over contiguous buffers, with
//! matrix products delegated to `gemm`.

use std::ops::AddAssign;
use std::sync::Mutex;

use candle_core::backend::BackendStorage;
use candle_core::{
    CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Storage, Tensor, WithDType,
};
use num_traits::Float;

type CResult<T> = candle_core::Result<T>;

pub(crate) trait Elem: WithDType + Float + AddAssign + Default {}
impl Elem for f32 {}
impl Elem for f64 {}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> CResult<&'a [T]> {
    let v = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("kernel expects a contiguous input"),
    }
}

fn host<T: WithDType>(t: &Tensor) -> CResult<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn tensor<T: WithDType>(data: Vec<T>, shape: &[usize], like: &Tensor) -> CResult<Tensor> {
    Tensor::from_vec(data, shape, like.device())
}

macro_rules! dispatch {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            d => candle_core::bail!("kernels support f32 and f64, got {d:?}"),
        }
    };
}

/// Row-major `a (m x k) . b (k x n)` with explicit strides, into a fresh
/// buffer that is never zero-filled.
#[allow(clippy::too_many_arguments)]
fn matmul_new<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    a_rs: usize,
    a_cs: usize,
    b: &[T],
    b_rs: usize,
    b_cs: usize,
) -> Vec<T> {
    if m == 0 || n == 0 || k == 0 {
        return vec![T::zero(); m * n];
    }
    assert!((m - 1) * a_rs + (k - 1) * a_cs < a.len());
    assert!((k - 1) * b_rs + (n - 1) * b_cs < b.len());
    let mut dst = Vec::with_capacity(m * n);
    // SAFETY: bounds as above; with `accumulate = false` gemm writes every
    // element of the `m x n` destination without reading it.
    unsafe {
        gemm_raw(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            false,
            a,
            a_rs,
            a_cs,
            b,
            b_rs,
            b_cs,
        );
        dst.set_len(m * n);
    }
    dst
}

#[allow(clippy::too_many_arguments)]
unsafe fn gemm_raw<T: Elem>(
    m: usize,
    n: usize,
    k: usize,
    dst: *mut T,
    accumulate: bool,
    a: &[T],
    a_rs: usize,
    a_cs: usize,
    b: &[T],
    b_rs: usize,
    b_cs: usize,
) {
    gemm::gemm(
        m,
        n,
        k,
        dst,
        1,
        n as isize,
        accumulate,
        a.as_ptr(),
        a_cs as isize,
        a_rs as isize,
        b.as_ptr(),
        b_cs as isize,
        b_rs as isize,
        T::one(),
        T::one(),
        false,
        false,
        false,
        gemm::Parallelism::None,
    );
}

/// Runs `f` on the contiguous host data of `t`.
fn with_data<T: WithDType, R>(t: &Tensor, f: impl FnOnce(&[T]) -> R) -> CResult<R> {
    let t = t.contiguous()?;
    let (storage, layout) = t.storage_and_layout();
    match &*storage {
        Storage::Cpu(s) => Ok(f(slice::<T>(s, layout)?)),
        _ => candle_core::bail!("kernels run on the CPU only"),
    }
}

// ---------------------------------------------------------------------------
// Convolution

/// 3x3 (zero padding 1) or 1x1 convolution with bias:
/// `x (B, C, H, W)`, `weight (O, k*k*C)` with columns ordered `(ky, kx, c)`,
/// `bias (O)`.
///
/// The forward pass keeps its column matrix for the backward pass.
pub(crate) struct Conv {
    kernel: usize,
    cols: Mutex<Option<CpuStorage>>,
}

impl Conv {
    pub fn new(kernel: usize) -> Self {
        Self {
            kernel,
            cols: Mutex::new(None),
        }
    }
}

#[inline]
fn valid_cols(dx: usize, width: usize) -> (usize, usize) {
    match dx {
        0 => (1, width),
        2 => (0, width - 1),
        _ => (0, width),
    }
}

/// Columns `(k*k*C, B*H*W)`.
fn im2col<T: Elem>(x: &[T], kernel: usize, b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let n = b * hw;
    let mut out = Vec::with_capacity(kernel * kernel * c * n);
    if kernel == 1 {
        for ci in 0..c {
            for bi in 0..b {
                out.extend_from_slice(&x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw]);
            }
        }
        return out;
    }
    // Rows are emitted in storage order, so the buffer never needs zeroing.
    let zero = T::zero();
    for kk in 0..9 {
        let (dy, dx) = (kk / 3, kk % 3);
        let (x0, x1) = valid_cols(dx, w);
        for ci in 0..c {
            for bi in 0..b {
                let src = (bi * c + ci) * hw;
                for y in 0..h {
                    let sy = y + dy;
                    if sy == 0 || sy > h {
                        out.resize(out.len() + w, zero);
                        continue;
                    }
                    let s = src + (sy - 1) * w + dx;
                    out.resize(out.len() + x0, zero);
                    out.extend_from_slice(&x[s + x0 - 1..s + x1 - 1]);
                    out.resize(out.len() + w - x1, zero);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`].
fn col2im<T: Elem>(cols: &[T], kernel: usize, b: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let hw = h * w;
    let n = b * hw;
    if kernel == 1 {
        let mut out = Vec::with_capacity(b * c * hw);
        for bi in 0..b {
            for ci in 0..c {
                out.extend_from_slice(&cols[ci * n + bi * hw..ci * n + (bi + 1) * hw]);
            }
        }
        return out;
    }
    let mut out = vec![T::zero(); b * c * hw];
    for kk in 0..9 {
        let (dy, dx) = (kk / 3, kk % 3);
        let (x0, x1) = valid_cols(dx, w);
        for ci in 0..c {
            let row = (kk * c + ci) * n;
            for bi in 0..b {
                let dst = (bi * c + ci) * hw;
                let src = row + bi * hw;
                for y in 0..h {
                    let sy = y + dy;
                    if sy == 0 || sy > h {
                        continue;
                    }
                    let d = dst + (sy - 1) * w + dx;
                    let s = src + y * w;
                    for (o, i) in out[d + x0 - 1..d + x1 - 1]
                        .iter_mut()
                        .zip(&cols[s + x0..s + x1])
                    {
                        *o += *i;
                    }
                }
            }
        }
    }
    out
}

/// Returns the output and the column matrix.
fn conv_fwd<T: Elem>(
    kernel: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    o: usize,
) -> (Vec<T>, Vec<T>) {
    let hw = h * w;
    let n = b * hw;
    let k = kernel * kernel * c;
    let cols = im2col(x, kernel, b, c, h, w);
    let y = matmul_new(o, n, k, weight, k, 1, &cols, n, 1);
    let mut out = Vec::with_capacity(b * o * hw);
    for bi in 0..b {
        for oi in 0..o {
            let bv = bias[oi];
            out.extend(
                y[oi * n + bi * hw..oi * n + (bi + 1) * hw]
                    .iter()
                    .map(|s| *s + bv),
            );
        }
    }
    (out, cols)
}

struct ConvGrads<T> {
    x: Vec<T>,
    weight: Vec<T>,
    bias: Vec<T>,
}

fn conv_bwd<T: Elem>(
    kernel: usize,
    cols: &[T],
    weight: &[T],
    grad: &[T],
    (b, c, h, w): (usize, usize, usize, usize),
    o: usize,
) -> ConvGrads<T> {
    let hw = h * w;
    let n = b * hw;
    let k = kernel * kernel * c;
    // (O, B*HW) view of the output gradient.
    let mut g = Vec::with_capacity(o * n);
    let mut gb = Vec::with_capacity(o);
    for oi in 0..o {
        let mut s = T::zero();
        for bi in 0..b {
            let src = &grad[(bi * o + oi) * hw..(bi * o + oi + 1) * hw];
            g.extend_from_slice(src);
            for v in src {
                s += *v;
            }
        }
        gb.push(s);
    }
    // dW = G . cols^T
    let gw = matmul_new(o, k, n, &g, n, 1, cols, 1, n);
    // dcols = W^T . G
    let gcols = matmul_new(k, n, o, weight, 1, k, &g, n, 1);
    ConvGrads {
        x: col2im(&gcols, kernel, b, c, h, w),
        weight: gw,
        bias: gb,
    }
}

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "conv"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let (o, k) = l2.shape().dims2()?;
        if k != self.kernel * self.kernel * dims.1 || l3.shape().dims1()? != o {
            candle_core::bail!(
                "conv weight {:?} does not fit input {:?}",
                l2.shape(),
                l1.shape()
            );
        }
        #[allow(clippy::too_many_arguments)]
        fn run<T: Elem>(
            kernel: usize,
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
            dims: (usize, usize, usize, usize),
            o: usize,
        ) -> CResult<(CpuStorage, CpuStorage)> {
            let (out, cols) = conv_fwd(
                kernel,
                slice::<T>(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
                dims,
                o,
            );
            Ok((T::to_cpu_storage_owned(out), T::to_cpu_storage_owned(cols)))
        }
        let (out, cols) = dispatch!(
            s1.dtype(),
            run(self.kernel, s1, l1, s2, l2, s3, l3, dims, o)
        )?;
        *self.cols.lock().unwrap_or_else(|e| e.into_inner()) = Some(cols);
        Ok((out, Shape::from((dims.0, o, dims.2, dims.3))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims4()?;
        let o = bias.dim(0)?;
        let cached = self.cols.lock().unwrap_or_else(|e| e.into_inner()).take();
        #[allow(clippy::too_many_arguments)]
        fn run<T: Elem>(
            kernel: usize,
            cached: Option<CpuStorage>,
            x: &Tensor,
            weight: &Tensor,
            bias: &Tensor,
            grad: &Tensor,
            dims: (usize, usize, usize, usize),
            o: usize,
        ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
            let (b, c, h, w) = dims;
            let cols = match cached {
                Some(s) if T::cpu_storage_as_slice(&s).is_ok() => s,
                _ => T::to_cpu_storage_owned(with_data::<T, _>(x, |xs| {
                    im2col(xs, kernel, b, c, h, w)
                })?),
            };
            let cols = T::cpu_storage_as_slice(&cols)?;
            let g = with_data::<T, _>(weight, |wv| {
                with_data::<T, _>(grad, |gv| conv_bwd(kernel, cols, wv, gv, dims, o))
            })??;
            Ok((
                Some(tensor(g.x, x.dims(), x)?),
                Some(tensor(g.weight, weight.dims(), weight)?),
                Some(tensor(g.bias, bias.dims(), bias)?),
            ))
        }
        dispatch!(
            x.dtype(),
            run(self.kernel, cached, x, weight, bias, grad, dims, o)
        )
    }
}

// ---------------------------------------------------------------------------
// Group normalization

/// `x (B, C, H, W)`, `gamma (C)`, `beta (C)`.
pub(crate) struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

/// Per (batch, group): mean and inverse standard deviation.
fn group_stats<T: Elem>(x: &[T], b: usize, groups: usize, len: usize, eps: f64) -> Vec<(T, T)> {
    let mut stats = Vec::with_capacity(b * groups);
    for bg in 0..b * groups {
        let s = &x[bg * len..(bg + 1) * len];
        let mut mean = 0f64;
        for v in s {
            mean += WithDType::to_f64(*v);
        }
        mean /= len as f64;
        let mut var = 0f64;
        for v in s {
            let d = WithDType::to_f64(*v) - mean;
            var += d * d;
        }
        var /= len as f64;
        stats.push((
            <T as WithDType>::from_f64(mean),
            <T as WithDType>::from_f64(1.0 / (var + eps).sqrt()),
        ));
    }
    stats
}

fn gn_fwd<T: Elem>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    dims: (usize, usize, usize, usize),
    groups: usize,
    eps: f64,
) -> Vec<T> {
    let (b, c, h, w) = dims;
    let hw = h * w;
    let cpg = c / groups;
    let stats = group_stats(x, b, groups, cpg * hw, eps);
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        for ci in 0..c {
            let (mean, inv) = stats[bi * groups + ci / cpg];
            let (g, be) = (gamma[ci] * inv, beta[ci]);
            let base = (bi * c + ci) * hw;
            for (d, s) in out[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                *d = (*s - mean) * g + be;
            }
        }
    }
    out
}

fn gn_bwd<T: Elem>(
    x: &[T],
    gamma: &[T],
    grad: &[T],
    dims: (usize, usize, usize, usize),
    groups: usize,
    eps: f64,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (b, c, h, w) = dims;
    let hw = h * w;
    let cpg = c / groups;
    let len = cpg * hw;
    let stats = group_stats(x, b, groups, len, eps);
    let mut dx = vec![T::zero(); x.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for bi in 0..b {
        for g in 0..groups {
            let (mean, inv) = stats[bi * groups + g];
            // Sums of dxhat and dxhat * xhat over the group.
            let (mut s1, mut s2) = (T::zero(), T::zero());
            for ci in g * cpg..(g + 1) * cpg {
                let base = (bi * c + ci) * hw;
                let (mut gsum, mut gxsum) = (T::zero(), T::zero());
                for p in base..base + hw {
                    let xhat = (x[p] - mean) * inv;
                    gsum += grad[p];
                    gxsum += grad[p] * xhat;
                }
                dbeta[ci] += gsum;
                dgamma[ci] += gxsum;
                s1 += gsum * gamma[ci];
                s2 += gxsum * gamma[ci];
            }
            let n = <T as WithDType>::from_f64(len as f64);
            let (m1, m2) = (s1 / n, s2 / n);
            for ci in g * cpg..(g + 1) * cpg {
                let base = (bi * c + ci) * hw;
                for p in base..base + hw {
                    let xhat = (x[p] - mean) * inv;
                    dx[p] = (grad[p] * gamma[ci] - m1 - xhat * m2) * inv;
                }
            }
        }
    }
    (dx, dgamma, dbeta)
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        if dims.1 % self.groups != 0
            || l2.shape().dims1()? != dims.1
            || l3.shape().dims1()? != dims.1
        {
            candle_core::bail!("group norm parameters do not fit input {:?}", l1.shape());
        }
        #[allow(clippy::too_many_arguments)]
        fn run<T: Elem>(
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
            dims: (usize, usize, usize, usize),
            groups: usize,
            eps: f64,
        ) -> CResult<CpuStorage> {
            let out = gn_fwd(
                slice::<T>(s1, l1)?,
                slice(s2, l2)?,
                slice(s3, l3)?,
                dims,
                groups,
                eps,
            );
            Ok(T::to_cpu_storage_owned(out))
        }
        let out = dispatch!(
            s1.dtype(),
            run(s1, l1, s2, l2, s3, l3, dims, self.groups, self.eps)
        )?;
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims4()?;
        fn run<T: Elem>(
            x: &Tensor,
            gamma: &Tensor,
            beta: &Tensor,
            grad: &Tensor,
            dims: (usize, usize, usize, usize),
            groups: usize,
            eps: f64,
        ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
            let (dx, dg, db) = gn_bwd(
                &host::<T>(x)?,
                &host::<T>(gamma)?,
                &host::<T>(grad)?,
                dims,
                groups,
                eps,
            );
            Ok((
                Some(tensor(dx, x.dims(), x)?),
                Some(tensor(dg, gamma.dims(), gamma)?),
                Some(tensor(db, beta.dims(), beta)?),
            ))
        }
        dispatch!(
            x.dtype(),
            run(x, gamma, beta, grad, dims, self.groups, self.eps)
        )
    }
}

// ---------------------------------------------------------------------------
// SiLU

pub(crate) struct Silu;

#[inline]
fn sigmoid<T: Elem>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl CustomOp1 for Silu {
    fn name(&self) -> &'static str {
        "silu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        fn run<T: Elem>(s: &CpuStorage, l: &Layout) -> CResult<CpuStorage> {
            let out: Vec<T> = slice::<T>(s, l)?.iter().map(|&v| v * sigmoid(v)).collect();
            Ok(T::to_cpu_storage_owned(out))
        }
        Ok((dispatch!(s.dtype(), run(s, l))?, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        fn run<T: Elem>(arg: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
            let x = host::<T>(arg)?;
            let g = host::<T>(grad)?;
            let out: Vec<T> = x
                .iter()
                .zip(&g)
                .map(|(&v, &gv)| {
                    let s = sigmoid(v);
                    gv * (s + v * s * (T::one() - s))
                })
                .collect();
            Ok(Some(tensor(out, arg.dims(), arg)?))
        }
        dispatch!(arg.dtype(), run(arg, grad))
    }
}

// ---------------------------------------------------------------------------
// Feature-wise modulation

/// `h (B, C, H, W) * (1 + scale (B, C)) + shift (B, C)`.
pub(crate) struct Modulate;

impl CustomOp3 for Modulate {
    fn name(&self) -> &'static str {
        "modulate"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> CResult<(CpuStorage, Shape)> {
        let (b, c, h, w) = l1.shape().dims4()?;
        if l2.shape().dims2()? != (b, c) || l3.shape().dims2()? != (b, c) {
            candle_core::bail!("modulation of {:?} by {:?}", l1.shape(), l2.shape());
        }
        fn run<T: Elem>(
            s1: &CpuStorage,
            l1: &Layout,
            s2: &CpuStorage,
            l2: &Layout,
            s3: &CpuStorage,
            l3: &Layout,
            hw: usize,
        ) -> CResult<CpuStorage> {
            let (x, scale, shift) = (
                slice::<T>(s1, l1)?,
                slice::<T>(s2, l2)?,
                slice::<T>(s3, l3)?,
            );
            let mut out = vec![T::zero(); x.len()];
            for (bc, (sc, sh)) in scale.iter().zip(shift).enumerate() {
                let f = T::one() + *sc;
                for (d, v) in out[bc * hw..(bc + 1) * hw]
                    .iter_mut()
                    .zip(&x[bc * hw..(bc + 1) * hw])
                {
                    *d = *v * f + *sh;
                }
            }
            Ok(T::to_cpu_storage_owned(out))
        }
        let out = dispatch!(s1.dtype(), run(s1, l1, s2, l2, s3, l3, h * w))?;
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        scale: &Tensor,
        shift: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (_, _, h, w) = x.dims4()?;
        fn run<T: Elem>(
            x: &Tensor,
            scale: &Tensor,
            shift: &Tensor,
            grad: &Tensor,
            hw: usize,
        ) -> CResult<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
            let xv = host::<T>(x)?;
            let sv = host::<T>(scale)?;
            let g = host::<T>(grad)?;
            let mut dx = vec![T::zero(); xv.len()];
            let mut dscale = vec![T::zero(); sv.len()];
            let mut dshift = vec![T::zero(); sv.len()];
            for bc in 0..sv.len() {
                let f = T::one() + sv[bc];
                let (mut gs, mut gx) = (T::zero(), T::zero());
                for p in bc * hw..(bc + 1) * hw {
                    dx[p] = g[p] * f;
                    gs += g[p];
                    gx += g[p] * xv[p];
                }
                dscale[bc] = gx;
                dshift[bc] = gs;
            }
            Ok((
                Some(tensor(dx, x.dims(), x)?),
                Some(tensor(dscale, scale.dims(), scale)?),
                Some(tensor(dshift, shift.dims(), shift)?),
            ))
        }
        dispatch!(x.dtype(), run(x, scale, shift, grad, h * w))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var, D};

    fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
        (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .flatten_all()
            .unwrap()
            .max(0)
            .unwrap()
            .to_dtype(DType::F64)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap()
    }

    /// Gradients of `sum(f(inputs) * probe)` for each input.
    fn grads(vars: &[&Var], out: &Tensor, probe: &Tensor) -> Vec<Tensor> {
        let g = (out * probe)
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        vars.iter().map(|v| g.get(v).unwrap().clone()).collect()
    }

    #[test]
    fn conv_matches_candle_in_value_and_gradient() {
        let dev = Device::Cpu;
        for kernel in [1usize, 3] {
            let x = Var::randn(0f64, 1.0, (2, 3, 5, 4), &dev).unwrap();
            let w4 = Var::randn(0f64, 1.0, (4, 3, kernel, kernel), &dev).unwrap();
            let bias = Var::randn(0f64, 1.0, 4, &dev).unwrap();
            let wm = w4
                .permute((0, 2, 3, 1))
                .unwrap()
                .reshape((4, kernel * kernel * 3))
                .unwrap();
            let ours = x
                .apply_op3(&wm, bias.as_tensor(), Conv::new(kernel))
                .unwrap();
            let pad = kernel / 2;
            let reference = x
                .conv2d(&w4, pad, 1, 1, 1)
                .unwrap()
                .broadcast_add(&bias.reshape((1, 4, 1, 1)).unwrap())
                .unwrap();
            assert!(max_diff(&ours, &reference) < 1e-12);
            let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
            let a = grads(&[&x, &w4, &bias], &ours, &probe);
            let b = grads(&[&x, &w4, &bias], &reference, &probe);
            for (ga, gb) in a.iter().zip(&b) {
                assert!(max_diff(ga, gb) < 1e-10);
            }
        }
    }

    #[test]
    fn group_norm_matches_composed_reference() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (2, 6, 3, 3), &dev).unwrap();
        let gamma = Var::randn(1f64, 0.5, 6, &dev).unwrap();
        let beta = Var::randn(0f64, 0.5, 6, &dev).unwrap();
        let ours = x
            .apply_op3(
                gamma.as_tensor(),
                beta.as_tensor(),
                GroupNormOp {
                    groups: 3,
                    eps: 1e-5,
                },
            )
            .unwrap();
        let g = x.reshape((2, 3, 18)).unwrap();
        let mean = g.mean_keepdim(D::Minus1).unwrap();
        let c = g.broadcast_sub(&mean).unwrap();
        let var = c.sqr().unwrap().mean_keepdim(D::Minus1).unwrap();
        let n = c
            .broadcast_div(&(var + 1e-5).unwrap().sqrt().unwrap())
            .unwrap()
            .reshape((2, 6, 3, 3))
            .unwrap();
        let reference = n
            .broadcast_mul(&gamma.reshape((1, 6, 1, 1)).unwrap())
            .unwrap()
            .broadcast_add(&beta.reshape((1, 6, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
        let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
        let a = grads(&[&x, &gamma, &beta], &ours, &probe);
        let b = grads(&[&x, &gamma, &beta], &reference, &probe);
        for (ga, gb) in a.iter().zip(&b) {
            assert!(max_diff(ga, gb) < 1e-10);
        }
    }

    #[test]
    fn silu_and_modulate_match_composed_reference() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 2.0, (2, 3, 2, 2), &dev).unwrap();
        let ours = x.apply_op1(Silu).unwrap();
        let reference = (x.as_tensor() * candle_nn::ops::sigmoid(&x).unwrap()).unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
        let probe = Tensor::randn(0f64, 1.0, ours.dims(), &dev).unwrap();
        assert!(
            max_diff(
                &grads(&[&x], &ours, &probe)[0],
                &grads(&[&x], &reference, &probe)[0]
            ) < 1e-12
        );

        let scale = Var::randn(0f64, 1.0, (2, 3), &dev).unwrap();
        let shift = Var::randn(0f64, 1.0, (2, 3), &dev).unwrap();
        let ours = x
            .apply_op3(scale.as_tensor(), shift.as_tensor(), Modulate)
            .unwrap();
        let reference = x
            .broadcast_mul(&(scale.reshape((2, 3, 1, 1)).unwrap() + 1.0).unwrap())
            .unwrap()
            .broadcast_add(&shift.reshape((2, 3, 1, 1)).unwrap())
            .unwrap();
        assert!(max_diff(&ours, &reference) < 1e-12);
        let a = grads(&[&x, &scale, &shift], &ours, &probe);
        let b = grads(&[&x, &scale, &shift], &reference, &probe);
        for (ga, gb) in a.iter().zip(&b) {
            assert!(max_diff(ga, gb) < 1e-12);
        }
    }
}
