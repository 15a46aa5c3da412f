//! Reconstruction quality (MSE, SSIM, MS-SSIM) and temporal identity
//! consistency (TL-ID, TG-ID).
//!
//! Images arrive in `[-1, 1]` and are mapped to `[0, 1]` before scoring.

use std::fmt::Write as _;

use candle_core::{DType, Tensor};

use crate::error::{DvaError, Result};
use crate::nets::IdentityEncoder;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;
/// Standard five-scale weights; shorter pyramids use a renormalized prefix.
const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MS_SCALES: usize = 3;

/// Planes of an image batch in `[0, 1]`: `(count, H, W)` as flat rows.
struct Planes {
    data: Vec<Vec<f64>>,
    h: usize,
    w: usize,
}

fn planes(t: &Tensor) -> Result<Planes> {
    let dims = t.dims();
    if dims.len() < 2 {
        return Err(DvaError::Shape(format!(
            "image tensor needs H and W, got {dims:?}"
        )));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let flat = t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let data = flat
        .chunks(h * w)
        .map(|c| c.iter().map(|v| (v + 1.0) / 2.0).collect())
        .collect();
    Ok(Planes { data, h, w })
}

fn pair(a: &Tensor, b: &Tensor) -> Result<(Planes, Planes)> {
    if a.dims() != b.dims() {
        return Err(DvaError::Shape(format!(
            "compared images differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((planes(a)?, planes(b)?))
}

/// Mean squared error on the `[0, 1]` scale.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (pa, pb) = pair(a, b)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (x, y) in pa.data.iter().zip(&pb.data) {
        sum += x.iter().zip(y).map(|(u, v)| (u - v).powi(2)).sum::<f64>();
        n += x.len();
    }
    Ok(sum / n.max(1) as f64)
}

/// MSE of each leading-axis item of `(N, ...)` tensors.
pub fn per_frame_mse(a: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if a.dims() != b.dims() {
        return Err(DvaError::Shape(format!(
            "compared images differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    (0..a.dim(0)?)
        .map(|i| mse(&a.narrow(0, i, 1)?, &b.narrow(0, i, 1)?))
        .collect()
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` plane.
fn filter(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * x[y * w + xo + i])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = taps
                .iter()
                .enumerate()
                .map(|(i, t)| t * rows[(yo + i) * ow + xo])
                .sum();
        }
    }
    out
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, window: usize) -> (f64, f64) {
    let taps = gaussian_taps(window, SSIM_SIGMA);
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let prod = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mx = filter(x, h, w, &taps);
    let my = filter(y, h, w, &taps);
    let sxx = filter(&prod(x, x), h, w, &taps);
    let syy = filter(&prod(y, y), h, w, &taps);
    let sxy = filter(&prod(x, y), h, w, &taps);
    let n = mx.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mx.len() {
        let vx = sxx[i] - mx[i] * mx[i];
        let vy = syy[i] - my[i] * my[i];
        let cov = sxy[i] - mx[i] * my[i];
        let c = (2.0 * cov + c2) / (vx + vy + c2);
        let l = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        ssim += l * c;
        cs += c;
    }
    (ssim / n, cs / n)
}

fn check_window(h: usize, w: usize, window: usize) -> Result<()> {
    if h < window || w < window {
        return Err(DvaError::Shape(format!(
            "{h}x{w} image is smaller than the {window}x{window} SSIM window"
        )));
    }
    Ok(())
}

/// SSIM with an 11x11 Gaussian window, averaged over channels and images.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (pa, pb) = pair(a, b)?;
    check_window(pa.h, pa.w, SSIM_WINDOW)?;
    let total: f64 = pa
        .data
        .iter()
        .zip(&pb.data)
        .map(|(x, y)| ssim_plane(x, y, pa.h, pa.w, SSIM_WINDOW).0)
        .sum();
    Ok(total / pa.data.len() as f64)
}

fn avg_pool(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for xo in 0..ow {
            let i = 2 * y * w + 2 * xo;
            out[y * ow + xo] = 0.25 * (x[i] + x[i + 1] + x[i + w] + x[i + w + 1]);
        }
    }
    out
}

/// Largest odd window not exceeding `min(SSIM_WINDOW, side)`.
fn scale_window(side: usize) -> usize {
    let s = side.min(SSIM_WINDOW);
    if s % 2 == 0 {
        s - 1
    } else {
        s
    }
}

/// Three-scale MS-SSIM. The window is 11x11 at the finest scale and is
/// truncated (Gaussian renormalized, same sigma) where a coarser scale is
/// smaller than that. Negative contrast terms are clipped at zero.
pub fn ms_ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    let (pa, pb) = pair(a, b)?;
    check_window(pa.h, pa.w, SSIM_WINDOW)?;
    let min_side = pa.h.min(pa.w) >> (MS_SCALES - 1);
    if min_side < 3 {
        return Err(DvaError::Shape(format!(
            "{}x{} image is too small for {MS_SCALES} scales",
            pa.h, pa.w
        )));
    }
    let wsum: f64 = MS_WEIGHTS[..MS_SCALES].iter().sum();
    let weights: Vec<f64> = MS_WEIGHTS[..MS_SCALES].iter().map(|w| w / wsum).collect();
    let mut total = 0.0;
    for (x0, y0) in pa.data.iter().zip(&pb.data) {
        let (mut x, mut y) = (x0.clone(), y0.clone());
        let (mut h, mut w) = (pa.h, pa.w);
        let mut value = 1.0;
        for (j, wt) in weights.iter().enumerate() {
            let (s, cs) = ssim_plane(&x, &y, h, w, scale_window(h.min(w)));
            if j + 1 == MS_SCALES {
                value *= s.max(0.0).powf(*wt);
            } else {
                value *= cs.max(0.0).powf(*wt);
                x = avg_pool(&x, h, w);
                y = avg_pool(&y, h, w);
                h /= 2;
                w /= 2;
            }
        }
        total += value;
    }
    Ok(total / pa.data.len() as f64)
}

/// Perceptual distance needs a pretrained network that is not available here.
pub fn lpips(_a: &Tensor, _b: &Tensor) -> Result<f64> {
    Err(DvaError::Unavailable(
        "LPIPS requires a pretrained perceptual network",
    ))
}

/// Cosine similarities of one frame pair, before and after editing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairSimilarity {
    pub i: usize,
    pub j: usize,
    pub original: f64,
    pub edited: f64,
}

impl PairSimilarity {
    pub fn ratio(&self) -> f64 {
        self.edited / self.original
    }
}

/// Local (adjacent pairs) and global (all pairs) identity consistency of an
/// edited video relative to its original. Both are means of
/// `cos(edited_i, edited_j) / cos(original_i, original_j)`; these formulas
/// are stand-ins for the definitions of the cited prior work.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyReport {
    pub tl_id: f64,
    pub tg_id: f64,
    pub adjacent: Vec<PairSimilarity>,
    pub all_pairs: Vec<PairSimilarity>,
}

impl ConsistencyReport {
    /// `kind,i,j,cos_original,cos_edited,ratio` rows plus summary rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,i,j,cos_original,cos_edited,ratio\n");
        for (kind, pairs) in [("local", &self.adjacent), ("global", &self.all_pairs)] {
            for p in pairs {
                let _ = writeln!(
                    s,
                    "{kind},{},{},{},{},{}",
                    p.i,
                    p.j,
                    p.original,
                    p.edited,
                    p.ratio()
                );
            }
        }
        let _ = writeln!(s, "tl_id,,,,,{}", self.tl_id);
        let _ = writeln!(s, "tg_id,,,,,{}", self.tg_id);
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "TL-ID {:.4} over {} adjacent pairs\nTG-ID {:.4} over {} pairs\n(ratios of edited to original identity cosine; stand-in definitions)\n",
            self.tl_id,
            self.adjacent.len(),
            self.tg_id,
            self.all_pairs.len()
        )
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    d / (na * nb)
}

fn similarities(
    orig: &[Vec<f64>],
    edit: &[Vec<f64>],
    pairs: impl Iterator<Item = (usize, usize)>,
) -> Result<Vec<PairSimilarity>> {
    pairs
        .map(|(i, j)| {
            let original = cos(&orig[i], &orig[j]);
            if !(original > 0.0) {
                return Err(DvaError::Config(format!(
                    "original identity cosine of pair ({i}, {j}) is {original}, not positive"
                )));
            }
            Ok(PairSimilarity {
                i,
                j,
                original,
                edited: cos(&edit[i], &edit[j]),
            })
        })
        .collect()
}

fn mean_ratio(p: &[PairSimilarity]) -> f64 {
    p.iter().map(PairSimilarity::ratio).sum::<f64>() / p.len() as f64
}

/// Consistency from per-frame identity features of both videos.
pub fn consistency_from_features(
    original: &[Vec<f64>],
    edited: &[Vec<f64>],
) -> Result<ConsistencyReport> {
    let n = original.len();
    if n < 2 || edited.len() != n {
        return Err(DvaError::Shape(format!(
            "consistency needs two equal-length videos of at least 2 frames, got {n} and {}",
            edited.len()
        )));
    }
    let adjacent = similarities(original, edited, (0..n - 1).map(|i| (i, i + 1)))?;
    let all_pairs = similarities(
        original,
        edited,
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))),
    )?;
    Ok(ConsistencyReport {
        tl_id: mean_ratio(&adjacent),
        tg_id: mean_ratio(&all_pairs),
        adjacent,
        all_pairs,
    })
}

fn identity_rows(frames: &Tensor, encoder: &IdentityEncoder) -> Result<Vec<Vec<f64>>> {
    Ok(encoder
        .encode(frames)?
        .to_dtype(DType::F64)?
        .to_vec2::<f64>()?)
}

pub fn consistency_report(
    original: &Tensor,
    edited: &Tensor,
    encoder: &IdentityEncoder,
) -> Result<ConsistencyReport> {
    if original.dims() != edited.dims() {
        return Err(DvaError::Shape(format!(
            "videos differ: {:?} vs {:?}",
            original.dims(),
            edited.dims()
        )));
    }
    consistency_from_features(
        &identity_rows(original, encoder)?,
        &identity_rows(edited, encoder)?,
    )
}

pub fn tl_id(original: &Tensor, edited: &Tensor, encoder: &IdentityEncoder) -> Result<f64> {
    Ok(consistency_report(original, edited, encoder)?.tl_id)
}

pub fn tg_id(original: &Tensor, edited: &Tensor, encoder: &IdentityEncoder) -> Result<f64> {
    Ok(consistency_report(original, edited, encoder)?.tg_id)
}
