//! Procedural videos with known identity, motion and background factors.
//!
//! A video shows one glyph (the "face") over a textured background. The
//! glyph's shape, hue and two optional sub-features (a dark ring and a light
//! stripe) make up its identity; its position and rotation change per frame;
//! the background is a tinted periodic texture plus seeded low-frequency
//! grain. Frames are quantized to 8 bits at generation time so that the PNG
//! dataset round-trips bit-exactly.
//!
//! The glyph's interior edges are anti-aliased against its own dark outline,
//! never against the background, so every on-mask pixel depends only on the
//! identity and pose, and `mask * foreground + (1 - mask) * background`
//! reproduces the frame exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DvaError, Result};

pub const MIN_RESOLUTION: usize = 16;
pub const DEFAULT_RESOLUTION: usize = 32;
pub const NUM_TEXTURES: u32 = 4;
/// Rotation range of the glyph, degrees either side of upright.
pub const MAX_ANGLE: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlyphShape {
    Ellipse,
    Triangle,
    Square,
}

impl GlyphShape {
    pub const ALL: [GlyphShape; 3] = [
        GlyphShape::Ellipse,
        GlyphShape::Triangle,
        GlyphShape::Square,
    ];

    pub fn index(self) -> usize {
        match self {
            GlyphShape::Ellipse => 0,
            GlyphShape::Triangle => 1,
            GlyphShape::Square => 2,
        }
    }
}

/// Palette the default sampler draws hues from.
pub const HUES: [f64; 6] = [0.0, 1.0 / 6.0, 2.0 / 6.0, 0.5, 4.0 / 6.0, 5.0 / 6.0];

/// Index of the palette hue closest (on the circle) to `hue`.
pub fn hue_index(hue: f64) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, h) in HUES.iter().enumerate() {
        let d = (hue - h).rem_euclid(1.0);
        let d = d.min(1.0 - d);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// The two binary identity attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Ring,
    Stripe,
}

impl Attribute {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ring" => Ok(Attribute::Ring),
            "stripe" => Ok(Attribute::Stripe),
            other => Err(DvaError::Config(format!(
                "unknown attribute `{other}` (expected ring or stripe)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Ring => "ring",
            Attribute::Stripe => "stripe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityFactors {
    pub shape: GlyphShape,
    /// Hue in `[0, 1)`.
    pub hue: f64,
    pub ring: bool,
    pub stripe: bool,
}

impl IdentityFactors {
    pub fn has(&self, attr: Attribute) -> bool {
        match attr {
            Attribute::Ring => self.ring,
            Attribute::Stripe => self.stripe,
        }
    }

    pub fn with(mut self, attr: Attribute, on: bool) -> Self {
        match attr {
            Attribute::Ring => self.ring = on,
            Attribute::Stripe => self.stripe = on,
        }
        self
    }

    /// Discrete identity class: (shape, palette hue, ring, stripe).
    pub fn class(&self) -> IdentityClass {
        IdentityClass {
            shape: self.shape.index(),
            hue: hue_index(self.hue),
            ring: self.ring,
            stripe: self.stripe,
        }
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            shape: GlyphShape::ALL[rng.gen_range(0..GlyphShape::ALL.len())],
            hue: HUES[rng.gen_range(0..HUES.len())],
            ring: rng.gen_bool(0.5),
            stripe: rng.gen_bool(0.5),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct IdentityClass {
    pub shape: usize,
    pub hue: usize,
    pub ring: bool,
    pub stripe: bool,
}

/// Glyph pose. `cx`, `cy` in `[-1, 1]` span the allowed displacement;
/// `angle` is in degrees within `[-MAX_ANGLE, MAX_ANGLE]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub cx: f64,
    pub cy: f64,
    pub angle: f64,
}

impl Pose {
    pub const CENTER: Pose = Pose {
        cx: 0.0,
        cy: 0.0,
        angle: 0.0,
    };

    /// Pose as a vector with each component in `[-1, 1]`.
    pub fn normalized(&self) -> [f64; 3] {
        [self.cx, self.cy, self.angle / MAX_ANGLE]
    }

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            cx: rng.gen_range(-1.0..1.0),
            cy: rng.gen_range(-1.0..1.0),
            angle: rng.gen_range(-MAX_ANGLE..MAX_ANGLE),
        }
    }

    /// A smooth per-frame trajectory.
    pub fn sample_trajectory(rng: &mut impl Rng, frames: usize) -> Vec<Pose> {
        let mut axis = |center: f64, amp: (f64, f64), limit: f64| {
            let c = rng.gen_range(-center..center);
            let a = rng.gen_range(amp.0..amp.1);
            let f = rng.gen_range(0.5..1.5);
            let phi = rng.gen_range(0.0..2.0 * PI);
            move |n: usize| {
                let s = (2.0 * PI * f * n as f64 / frames.max(1) as f64 + phi).sin();
                (c + a * s).clamp(-limit, limit)
            }
        };
        let x = axis(0.5, (0.1, 0.5), 1.0);
        let y = axis(0.5, (0.1, 0.5), 1.0);
        let r = axis(12.0, (3.0, 12.0), MAX_ANGLE);
        (0..frames)
            .map(|n| Pose {
                cx: x(n),
                cy: y(n),
                angle: r(n),
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackgroundFactors {
    pub texture: u32,
    /// Phase of the periodic pattern in `[0, 1)`.
    pub phase: f64,
}

impl BackgroundFactors {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            texture: rng.gen_range(0..NUM_TEXTURES),
            phase: rng.gen_range(0.0..1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSpec {
    pub identity: IdentityFactors,
    pub background: BackgroundFactors,
    pub motion: Vec<Pose>,
    pub resolution: usize,
}

impl VideoSpec {
    pub fn num_frames(&self) -> usize {
        self.motion.len()
    }

    /// Independent draws of identity, background and trajectory.
    pub fn sample(rng: &mut impl Rng, frames: usize, resolution: usize) -> Self {
        let identity = IdentityFactors::sample(rng);
        let background = BackgroundFactors::sample(rng);
        let motion = Pose::sample_trajectory(rng, frames);
        Self {
            identity,
            background,
            motion,
            resolution,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < MIN_RESOLUTION {
            return Err(DvaError::Config(format!(
                "resolution {} below minimum {MIN_RESOLUTION}",
                self.resolution
            )));
        }
        if self.motion.is_empty() {
            return Err(DvaError::Config("a video needs at least one frame".into()));
        }
        if self.background.texture >= NUM_TEXTURES {
            return Err(DvaError::Config(format!(
                "texture {} out of range",
                self.background.texture
            )));
        }
        Ok(())
    }
}

/// Channel-major (`C, H, W`) image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.data.clone(),
            (self.channels, self.height, self.width),
            device,
        )?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            data: t
                .to_dtype(candle_core::DType::F32)?
                .flatten_all()?
                .to_vec1::<f32>()?,
        })
    }
}

/// Stacks images into `(N, C, H, W)`.
pub fn stack_images(images: &[Image], device: &Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|i| i.to_tensor(device))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

pub fn unstack_images(t: &Tensor) -> Result<Vec<Image>> {
    (0..t.dim(0)?)
        .map(|i| Image::from_tensor(&t.get(i)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    pub spec: VideoSpec,
    pub seed: u64,
    /// RGB frames in `[-1, 1]`, 8-bit quantized.
    pub frames: Vec<Image>,
    /// Single-channel `{0, 1}` foreground masks.
    pub masks: Vec<Image>,
}

impl SyntheticVideo {
    pub fn frames_tensor(&self, device: &Device) -> Result<Tensor> {
        stack_images(&self.frames, device)
    }

    pub fn masks_tensor(&self, device: &Device) -> Result<Tensor> {
        stack_images(&self.masks, device)
    }
}

/// Foreground, background and mask of one frame, each already quantized.
#[derive(Debug, Clone)]
pub struct FrameLayers {
    pub foreground: Image,
    pub background: Image,
    pub mask: Image,
}

impl FrameLayers {
    pub fn compose(&self) -> Image {
        let mut out = self.background.clone();
        let hw = self.mask.height * self.mask.width;
        for c in 0..out.channels {
            for i in 0..hw {
                let m = self.mask.data[i];
                let idx = c * hw + i;
                out.data[idx] =
                    m * self.foreground.data[idx] + (1.0 - m) * self.background.data[idx];
            }
        }
        out
    }
}

#[inline]
fn quantize(v: f64) -> f32 {
    let q = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    u8_to_signed(q)
}

#[inline]
pub fn u8_to_signed(q: u8) -> f32 {
    q as f32 / 255.0 * 2.0 - 1.0
}

#[inline]
pub fn signed_to_u8(v: f32) -> u8 {
    (((v as f64 + 1.0) * 0.5).clamp(0.0, 1.0) * 255.0).round() as u8
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Signed distance to the glyph outline, in units of the glyph radius.
fn shape_sdf(shape: GlyphShape, u: f64, v: f64) -> f64 {
    match shape {
        GlyphShape::Ellipse => {
            let (a, b) = (1.0, 0.72);
            (((u / a).powi(2) + (v / b).powi(2)).sqrt() - 1.0) * b
        }
        GlyphShape::Square => {
            let h = 0.8;
            let (qx, qy) = (u.abs() - h, v.abs() - h);
            let outside = (qx.max(0.0).powi(2) + qy.max(0.0).powi(2)).sqrt();
            outside + qx.max(qy).min(0.0)
        }
        GlyphShape::Triangle => {
            let r = 0.95;
            let k = 3f64.sqrt();
            let mut px = u.abs() - r;
            let mut py = v + r / k;
            if px + k * py > 0.0 {
                let (nx, ny) = ((px - k * py) / 2.0, (-k * px - py) / 2.0);
                px = nx;
                py = ny;
            }
            px -= px.clamp(-2.0 * r, 0.0);
            -(px * px + py * py).sqrt() * py.signum()
        }
    }
}

const OUTLINE: [f64; 3] = [0.08, 0.08, 0.08];
const RING: [f64; 3] = [0.12, 0.12, 0.12];
const STRIPE: [f64; 3] = [0.97, 0.97, 0.97];
const SUPERSAMPLE: usize = 4;

fn glyph_radius(res: usize) -> f64 {
    0.22 * res as f64
}

fn glyph_center(res: usize, pose: &Pose) -> (f64, f64) {
    let half = res as f64 / 2.0;
    let span = 0.18 * res as f64;
    (half + pose.cx * span, half + pose.cy * span)
}

fn render_foreground(identity: &IdentityFactors, pose: &Pose, res: usize) -> (Image, Image) {
    let mut fg = Image::new(3, res, res);
    let mut mask = Image::new(1, res, res);
    let radius = glyph_radius(res);
    let outline = 1.0 / radius;
    let (px, py) = glyph_center(res, pose);
    let (sin, cos) = pose.angle.to_radians().sin_cos();
    let fill = hsv_to_rgb(identity.hue, 0.85, 0.95);
    for y in 0..res {
        for x in 0..res {
            let mut acc = [0.0f64; 3];
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let fx = x as f64 + (sx as f64 + 0.5) / SUPERSAMPLE as f64 - px;
                    let fy = y as f64 + (sy as f64 + 0.5) / SUPERSAMPLE as f64 - py;
                    // Undo the rotation; local v points up.
                    let lx = cos * fx + sin * fy;
                    let ly = -sin * fx + cos * fy;
                    let (u, v) = (lx / radius, -ly / radius);
                    let d = shape_sdf(identity.shape, u, v);
                    if d >= 0.0 {
                        continue;
                    }
                    hits += 1;
                    let color = if d > -outline {
                        OUTLINE
                    } else if identity.ring
                        && ((u * u + (v - 0.12).powi(2)).sqrt() - 0.36).abs() < 0.09
                    {
                        RING
                    } else if identity.stripe && (v + 0.42).abs() < 0.14 {
                        STRIPE
                    } else {
                        fill
                    };
                    for c in 0..3 {
                        acc[c] += color[c];
                    }
                }
            }
            if hits > 0 {
                mask.set(0, y, x, 1.0);
                for c in 0..3 {
                    fg.set(c, y, x, quantize(acc[c] / hits as f64));
                }
            }
        }
    }
    (fg, mask)
}

const TINTS: [[f64; 3]; NUM_TEXTURES as usize] = [
    [1.0, 0.96, 0.9],
    [0.92, 0.97, 1.0],
    [0.95, 1.0, 0.93],
    [1.0, 0.93, 0.98],
];
const GRAIN_CELLS: usize = 5;

fn render_background(bg: &BackgroundFactors, grain_seed: u64, res: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(grain_seed ^ 0x9e37_79b9_7f4a_7c15);
    let grid: Vec<f64> = (0..(GRAIN_CELLS + 1) * (GRAIN_CELLS + 1))
        .map(|_| rng.gen_range(-0.07..0.07))
        .collect();
    let grain = |x: f64, y: f64| {
        let gx = x / res as f64 * GRAIN_CELLS as f64;
        let gy = y / res as f64 * GRAIN_CELLS as f64;
        let (ix, iy) = (gx.floor() as usize, gy.floor() as usize);
        let (fx, fy) = (gx - ix as f64, gy - iy as f64);
        let at =
            |i: usize, j: usize| grid[j.min(GRAIN_CELLS) * (GRAIN_CELLS + 1) + i.min(GRAIN_CELLS)];
        let top = at(ix, iy) * (1.0 - fx) + at(ix + 1, iy) * fx;
        let bot = at(ix, iy + 1) * (1.0 - fx) + at(ix + 1, iy + 1) * fx;
        top * (1.0 - fy) + bot * fy
    };
    let mut img = Image::new(3, res, res);
    let tint = TINTS[bg.texture as usize % TINTS.len()];
    let two_pi = 2.0 * PI;
    let r = res as f64;
    for y in 0..res {
        for x in 0..res {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let p = bg.phase;
            let pattern = match bg.texture {
                0 => (two_pi * (3.0 * fy / r + p)).sin(),
                1 => (two_pi * (3.0 * fx / r + p)).sin(),
                2 => (two_pi * (2.0 * fx / r + p)).sin() * (two_pi * (2.0 * fy / r + p)).sin(),
                _ => (two_pi * (2.5 * (fx + fy) / r + p)).sin(),
            };
            let value = 0.5 + 0.18 * pattern + grain(fx, fy);
            for c in 0..3 {
                img.set(c, y, x, quantize(value * tint[c]));
            }
        }
    }
    img
}

/// Renders the layers of a single frame.
pub fn render_layers(
    identity: &IdentityFactors,
    pose: &Pose,
    background: &BackgroundFactors,
    grain_seed: u64,
    res: usize,
) -> FrameLayers {
    let (foreground, mask) = render_foreground(identity, pose, res);
    let background = render_background(background, grain_seed, res);
    FrameLayers {
        foreground,
        background,
        mask,
    }
}

/// Deterministic in `(spec, seed)`; the seed drives the background grain.
pub fn generate_video(spec: &VideoSpec, seed: u64) -> Result<SyntheticVideo> {
    spec.validate()?;
    let res = spec.resolution;
    let bg = render_background(&spec.background, seed, res);
    let mut frames = Vec::with_capacity(spec.num_frames());
    let mut masks = Vec::with_capacity(spec.num_frames());
    for pose in &spec.motion {
        let (foreground, mask) = render_foreground(&spec.identity, pose, res);
        let layers = FrameLayers {
            foreground,
            background: bg.clone(),
            mask,
        };
        frames.push(layers.compose());
        masks.push(layers.mask);
    }
    Ok(SyntheticVideo {
        spec: spec.clone(),
        seed,
        frames,
        masks,
    })
}

/// Samples `count` independent specs and renders them; video `i` uses seed `seed * 1_000_003 + i`.
pub fn generate_videos(
    count: usize,
    frames: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<SyntheticVideo>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let spec = VideoSpec::sample(&mut rng, frames, resolution);
            generate_video(&spec, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// On-disk dataset

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetVideo {
    pub id: String,
    pub split: Split,
    pub video: SyntheticVideo,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub videos: Vec<DatasetVideo>,
}

impl Dataset {
    /// The last `test_count` videos form the test split.
    pub fn from_videos(videos: Vec<SyntheticVideo>, test_count: usize) -> Self {
        let n = videos.len();
        Self {
            videos: videos
                .into_iter()
                .enumerate()
                .map(|(i, video)| DatasetVideo {
                    id: format!("v{i:04}"),
                    split: if i + test_count >= n {
                        Split::Test
                    } else {
                        Split::Train
                    },
                    video,
                })
                .collect(),
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetVideo> {
        self.videos.iter().filter(move |v| v.split == split)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema: u32,
    videos: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: String,
    split: Split,
    frames: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Labels {
    seed: u64,
    #[serde(flatten)]
    spec: VideoSpec,
}

const MANIFEST: &str = "manifest.json";

pub fn frame_file(n: usize) -> String {
    format!("frame_{n:04}.png")
}

pub fn mask_file(n: usize) -> String {
    format!("mask_{n:04}.png")
}

pub fn write_png_rgb(path: &Path, img: &Image) -> Result<()> {
    let hw = img.height * img.width;
    let mut buf = Vec::with_capacity(hw * 3);
    for i in 0..hw {
        for c in 0..3 {
            buf.push(signed_to_u8(img.data[c * hw + i]));
        }
    }
    let out = image::RgbImage::from_raw(img.width as u32, img.height as u32, buf)
        .ok_or_else(|| DvaError::Shape(format!("{}: bad RGB buffer", path.display())))?;
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DvaError::parse(path, "png", e))
}

pub fn read_png_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| DvaError::parse(path, "png", e))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(3, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out.set(c, y as usize, x as usize, u8_to_signed(p[c]));
        }
    }
    Ok(out)
}

fn write_png_mask(path: &Path, img: &Image) -> Result<()> {
    let buf: Vec<u8> = img
        .data
        .iter()
        .map(|&m| if m > 0.5 { 255 } else { 0 })
        .collect();
    let out = image::GrayImage::from_raw(img.width as u32, img.height as u32, buf)
        .ok_or_else(|| DvaError::Shape(format!("{}: bad mask buffer", path.display())))?;
    out.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| DvaError::parse(path, "png", e))
}

fn read_png_mask(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|e| DvaError::parse(path, "png", e))?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Image::new(1, h, w);
    for (x, y, p) in img.enumerate_pixels() {
        out.set(
            0,
            y as usize,
            x as usize,
            if p[0] > 127 { 1.0 } else { 0.0 },
        );
    }
    Ok(out)
}

/// Writes frames (and masks, if any) as a PNG frame directory, atomically.
pub fn write_frame_dir(dir: &Path, frames: &[Image], masks: Option<&[Image]>) -> Result<()> {
    let tmp = temp_sibling(dir);
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| DvaError::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| DvaError::io(&tmp, e))?;
    for (n, f) in frames.iter().enumerate() {
        write_png_rgb(&tmp.join(frame_file(n)), f)?;
    }
    if let Some(masks) = masks {
        for (n, m) in masks.iter().enumerate() {
            write_png_mask(&tmp.join(mask_file(n)), m)?;
        }
    }
    replace_dir(&tmp, dir)
}

/// Reads `frame_NNNN.png` files in order until the first gap.
pub fn read_frame_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(frame_file(frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_png_rgb(&p)?);
    }
    if frames.is_empty() {
        return Err(DvaError::parse(dir, "frames", "no frame_0000.png found"));
    }
    Ok(frames)
}

pub fn read_mask_dir(dir: &Path, count: usize) -> Result<Vec<Image>> {
    (0..count)
        .map(|n| read_png_mask(&dir.join(mask_file(n))))
        .collect()
}

fn temp_sibling(dir: &Path) -> PathBuf {
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    dir.with_file_name(format!(".{name}.tmp"))
}

fn replace_dir(tmp: &Path, dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| DvaError::io(dir, e))?;
    }
    fs::rename(tmp, dir).map_err(|e| DvaError::io(dir, e))
}

pub fn write_video(dir: &Path, video: &SyntheticVideo) -> Result<()> {
    let tmp = temp_sibling(dir);
    write_frame_dir(&tmp, &video.frames, Some(&video.masks))?;
    let labels = Labels {
        seed: video.seed,
        spec: video.spec.clone(),
    };
    let text = serde_json::to_string_pretty(&labels)
        .map_err(|e| DvaError::parse(dir.join("labels.json"), "labels", e))?;
    let p = tmp.join("labels.json");
    fs::write(&p, text).map_err(|e| DvaError::io(&p, e))?;
    replace_dir(&tmp, dir)
}

pub fn read_video(dir: &Path) -> Result<SyntheticVideo> {
    let lp = dir.join("labels.json");
    let text = fs::read_to_string(&lp).map_err(|e| DvaError::io(&lp, e))?;
    let labels: Labels = serde_json::from_str(&text).map_err(|e| {
        let field = e.to_string();
        DvaError::parse(&lp, field.split('`').nth(1).unwrap_or("labels"), e)
    })?;
    let n = labels.spec.num_frames();
    let mut frames = Vec::with_capacity(n);
    let mut masks = Vec::with_capacity(n);
    for i in 0..n {
        let f = read_png_rgb(&dir.join(frame_file(i)))?;
        let m = read_png_mask(&dir.join(mask_file(i)))?;
        let res = labels.spec.resolution;
        if f.height != res || f.width != res || m.height != res || m.width != res {
            return Err(DvaError::parse(
                dir.join(frame_file(i)),
                "resolution",
                format!("expected {res}x{res}, found {}x{}", f.width, f.height),
            ));
        }
        frames.push(f);
        masks.push(m);
    }
    Ok(SyntheticVideo {
        spec: labels.spec,
        seed: labels.seed,
        frames,
        masks,
    })
}

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root).map_err(|e| DvaError::io(root, e))?;
    let mut entries = Vec::with_capacity(dataset.len());
    for v in &dataset.videos {
        write_video(&root.join(&v.id), &v.video)?;
        entries.push(ManifestEntry {
            id: v.id.clone(),
            split: v.split,
            frames: v.video.frames.len(),
        });
    }
    let manifest = Manifest {
        schema: 1,
        videos: entries,
    };
    let p = root.join(MANIFEST);
    let tmp = root.join(".manifest.json.tmp");
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| DvaError::parse(&p, "manifest", e))?;
    fs::write(&tmp, text).map_err(|e| DvaError::io(&tmp, e))?;
    fs::rename(&tmp, &p).map_err(|e| DvaError::io(&p, e))
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let p = root.join(MANIFEST);
    let text = fs::read_to_string(&p).map_err(|e| DvaError::io(&p, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| DvaError::parse(&p, "manifest", e))?;
    if manifest.schema != 1 {
        return Err(DvaError::parse(
            &p,
            "schema",
            format!("unsupported schema {}", manifest.schema),
        ));
    }
    let mut videos = Vec::with_capacity(manifest.videos.len());
    for e in manifest.videos {
        let video = read_video(&root.join(&e.id))?;
        if video.frames.len() != e.frames {
            return Err(DvaError::parse(
                root.join(&e.id).join("labels.json"),
                "motion",
                format!(
                    "manifest lists {} frames, labels {}",
                    e.frames,
                    video.frames.len()
                ),
            ));
        }
        videos.push(DatasetVideo {
            id: e.id,
            split: e.split,
            video,
        });
    }
    Ok(Dataset { videos })
}
