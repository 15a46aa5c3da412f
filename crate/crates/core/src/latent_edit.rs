//! Identity editing: moving `z_id` across a linear attribute classifier, and
//! optimizing `z_id` against a directional embedding loss on level-matched
//! intermediate images.

use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ddim::{self, NoiseEstimator, StepSchedule};
use crate::error::{DvaError, Result};
use crate::nets::encoders::Embedder;
use crate::nets::{ops, Model};
use crate::synthdata::{
    render_layers, stack_images, Attribute, BackgroundFactors, IdentityFactors, Pose,
};

const STD_FLOOR: f64 = 1e-6;
const DIRECTION_MAGIC: &str = "DVA-DIRECTION";
const DIRECTION_SCHEMA: u32 = 1;

/// A logistic-regression hyperplane in normalized identity space.
///
/// `probability(z) = sigmoid(weights . norm(z) + bias)` with
/// `norm(z) = (z - mean) / std`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditDirection {
    pub attribute: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Default editing step size.
    pub step: f64,
    /// Where the normalization statistics came from.
    pub provenance: String,
    pub fitted_at: String,
}

impl EditDirection {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.mean.len() != d || self.std.len() != d {
            return Err(DvaError::Shape(format!(
                "direction of dim {d} with stats of dims {} and {}",
                self.mean.len(),
                self.std.len()
            )));
        }
        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !finite(&self.weights)
            || !finite(&self.mean)
            || !finite(&self.std)
            || !self.bias.is_finite()
        {
            return Err(DvaError::NonFinite("edit direction parameters".into()));
        }
        if self.std.iter().any(|&s| s <= 0.0) {
            return Err(DvaError::Config("direction std must be positive".into()));
        }
        Ok(())
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(DvaError::Shape(format!(
                "identity of dim {} for a direction of dim {}",
                z.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        Ok(z.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect())
    }

    pub fn denormalize(&self, n: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(n)?;
        Ok(n.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| v * s + m)
            .collect())
    }

    pub fn logit(&self, z: &[f64]) -> Result<f64> {
        Ok(dot(&self.weights, &self.normalize(z)?) + self.bias)
    }

    pub fn probability(&self, z: &[f64]) -> Result<f64> {
        Ok(sigmoid(self.logit(z)?))
    }

    /// Fraction of `features` whose thresholded probability matches `labels`.
    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[bool]) -> Result<f64> {
        let mut hits = 0usize;
        for (z, &y) in features.iter().zip(labels) {
            if (self.logit(z)? > 0.0) == y {
                hits += 1;
            }
        }
        Ok(hits as f64 / features.len().max(1) as f64)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        for (k, v) in [
            ("attribute", &self.attribute),
            ("provenance", &self.provenance),
            ("fitted_at", &self.fitted_at),
        ] {
            if v.contains('\n') {
                return Err(DvaError::Config(format!("{k} must be a single line")));
            }
        }
        let header = format!(
            "{DIRECTION_MAGIC}\nschema_version={DIRECTION_SCHEMA}\nattribute={}\ndim={}\nstep={}\nbias={}\nprovenance={}\nfitted_at={}\nend\n",
            self.attribute,
            self.dim(),
            self.step,
            self.bias,
            self.provenance,
            self.fitted_at
        );
        let mut out = header.into_bytes();
        for v in self.weights.iter().chain(&self.mean).chain(&self.std) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        Ok(out)
    }

    /// Header, then `weights`, `mean` and `std` as little-endian `f64`.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |field: &str, msg: String| DvaError::parse(origin, field, msg);
        let mut fields = std::collections::HashMap::new();
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("header", "unterminated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|e| bad("header", e.to_string()))
        };
        if next_line()? != DIRECTION_MAGIC {
            return Err(bad("magic", "not an edit direction file".into()));
        }
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad("header", format!("malformed `{line}`")))?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .cloned()
                .ok_or_else(|| bad(k, "missing".into()))
        };
        let num =
            |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| bad(k, "not a number".into())) };
        if get("schema_version")? != DIRECTION_SCHEMA.to_string() {
            return Err(bad("schema_version", "unsupported".into()));
        }
        let dim: usize = get("dim")?
            .parse()
            .map_err(|_| bad("dim", "not an integer".into()))?;
        let data = &bytes[pos..];
        if data.len() != dim * 3 * 8 {
            return Err(bad(
                "data",
                format!("expected {} bytes, found {}", dim * 24, data.len()),
            ));
        }
        let values: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let d = Self {
            attribute: get("attribute")?,
            weights: values[..dim].to_vec(),
            bias: num("bias")?,
            mean: values[dim..2 * dim].to_vec(),
            std: values[2 * dim..].to_vec(),
            step: num("step")?,
            provenance: get("provenance")?,
            fitted_at: get("fitted_at")?,
        };
        d.validate().map_err(|e| bad("data", e.to_string()))?;
        Ok(d)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| DvaError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::File::create(&tmp)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| DvaError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| DvaError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DvaError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradient-descent settings for [`fit_attribute_classifier`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierFit {
    /// Ridge penalty on the weights, keeping separable fits bounded.
    pub l2: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub step: f64,
    pub provenance: String,
}

impl Default for ClassifierFit {
    fn default() -> Self {
        Self {
            l2: 1e-3,
            iterations: 2000,
            learning_rate: 0.5,
            step: 1.0,
            provenance: "unspecified".into(),
        }
    }
}

/// Logistic regression on features normalized by their own mean and std.
pub fn fit_attribute_classifier(
    attribute: &str,
    features: &[Vec<f64>],
    labels: &[bool],
    fit: &ClassifierFit,
) -> Result<EditDirection> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(DvaError::Shape(format!(
            "{} features with {} labels",
            features.len(),
            labels.len()
        )));
    }
    let positives = labels.iter().filter(|&&y| y).count();
    if positives < 2 || labels.len() - positives < 2 {
        return Err(DvaError::Config(format!(
            "classifier needs at least two samples per class, got {positives} positive of {}",
            labels.len()
        )));
    }
    let d = features[0].len();
    if features.iter().any(|f| f.len() != d) {
        return Err(DvaError::Shape("features of unequal length".into()));
    }
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for f in features {
        mean.iter_mut().zip(f).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; d];
    for f in features {
        std.iter_mut()
            .zip(f)
            .zip(&mean)
            .for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(STD_FLOOR));
    let normed: Vec<Vec<f64>> = features
        .iter()
        .map(|f| {
            f.iter()
                .zip(&mean)
                .zip(&std)
                .map(|((v, m), s)| (v - m) / s)
                .collect()
        })
        .collect();
    let mut w = vec![0.0; d];
    let mut b = 0.0;
    for _ in 0..fit.iterations {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in normed.iter().zip(labels) {
            let r = sigmoid(dot(&w, x) + b) - if y { 1.0 } else { 0.0 };
            gw.iter_mut().zip(x).for_each(|(g, v)| *g += r * v / n);
            gb += r / n;
        }
        w.iter_mut()
            .zip(&gw)
            .for_each(|(wi, g)| *wi -= fit.learning_rate * (g + fit.l2 * *wi));
        b -= fit.learning_rate * gb;
    }
    let dir = EditDirection {
        attribute: attribute.to_string(),
        weights: w,
        bias: b,
        mean,
        std,
        step: fit.step,
        provenance: fit.provenance.clone(),
        fitted_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
    };
    dir.validate()?;
    Ok(dir)
}

/// `l2norm(denorm(norm(z) + s w))` for one unit-norm identity vector.
pub fn edit_identity_vec(z_id: &[f64], dir: &EditDirection, s: f64) -> Result<Vec<f64>> {
    let norm = z_id.iter().map(|v| v * v).sum::<f64>().sqrt();
    if (norm - 1.0).abs() > 1e-4 {
        return Err(DvaError::Config(format!(
            "identity must be unit-norm, has norm {norm}"
        )));
    }
    let mut n = dir.normalize(z_id)?;
    n.iter_mut()
        .zip(&dir.weights)
        .for_each(|(v, w)| *v += s * w);
    let out = dir.denormalize(&n)?;
    let len = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if len == 0.0 || !len.is_finite() {
        return Err(DvaError::NonFinite(
            "edited identity has no direction".into(),
        ));
    }
    Ok(out.into_iter().map(|v| v / len).collect())
}

/// Row-wise [`edit_identity_vec`] on a `(B, D)` tensor, keeping its dtype.
pub fn edit_identity(z_id: &Tensor, dir: &EditDirection, s: f64) -> Result<Tensor> {
    let rows = z_id.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let edited = rows
        .iter()
        .map(|r| edit_identity_vec(r, dir, s))
        .collect::<Result<Vec<_>>>()?;
    let flat: Vec<f64> = edited.into_iter().flatten().collect();
    Ok(Tensor::from_vec(flat, z_id.dims(), z_id.device())?.to_dtype(z_id.dtype())?)
}

fn cosine_distance_rows(a: &Tensor, b: &Tensor, floor: f64) -> Result<Tensor> {
    let na = a
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .maximum(floor * floor)?
        .sqrt()?;
    let nb = b
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .maximum(floor * floor)?
        .sqrt()?;
    let cos = ((a * b)?.sum_keepdim(D::Minus1)? / (na * nb)?)?;
    Ok(cos.affine(-1.0, 1.0)?.squeeze(D::Minus1)?)
}

fn prototype_direction(proto_neutral: &Tensor, proto_target: &Tensor) -> Result<Tensor> {
    let d = (proto_target - proto_neutral)?.flatten_all()?;
    if ops::scalar_f64(&d.sqr()?.sum_all()?)? == 0.0 {
        return Err(DvaError::Config("prototypes are identical".into()));
    }
    Ok(d.unsqueeze(0)?)
}

/// Mean over the batch of `1 - cos(embed(target) - embed(neutral), proto_target - proto_neutral)`.
///
/// Images are `(B, 3, H, W)`, prototypes `(E)`. A zero image direction is an
/// error rather than a NaN.
pub fn directional_embed_loss<M: Embedder + ?Sized>(
    img_neutral: &Tensor,
    img_target: &Tensor,
    proto_neutral: &Tensor,
    proto_target: &Tensor,
    embedder: &M,
) -> Result<Tensor> {
    let proto = prototype_direction(proto_neutral, proto_target)?;
    let d_img = (embedder.embed(img_target)? - embedder.embed(img_neutral)?)?;
    let norms = d_img
        .sqr()?
        .sum(D::Minus1)?
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?;
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(DvaError::Config(format!(
            "image direction {i} has zero norm"
        )));
    }
    let proto = proto.to_dtype(d_img.dtype())?.broadcast_as(d_img.shape())?;
    Ok(cosine_distance_rows(&d_img, &proto, 0.0)?.mean_all()?)
}

/// Same loss with the image-direction norm floored at `1e-8`, the usual
/// guard in cosine similarity. At a zero image direction the gradient then
/// points along the prototype direction instead of being undefined.
fn guarded_directional_loss<M: Embedder + ?Sized>(
    img_neutral: &Tensor,
    img_target: &Tensor,
    proto: &Tensor,
    embedder: &M,
) -> Result<Tensor> {
    let d_img = (embedder.embed(img_target)? - embedder.embed(img_neutral)?)?;
    let proto = proto.to_dtype(d_img.dtype())?.broadcast_as(d_img.shape())?;
    cosine_distance_rows(&d_img, &proto, 1e-8)
}

/// Mean embeddings of `count` random frames without and with `attribute`.
pub fn attribute_prototypes<M: Embedder + ?Sized>(
    embedder: &M,
    attribute: Attribute,
    count: usize,
    image_size: usize,
    seed: u64,
    device: &Device,
) -> Result<(Tensor, Tensor)> {
    if count == 0 {
        return Err(DvaError::Config("prototype count must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut make = |on: bool| -> Result<Tensor> {
        let mut images = Vec::with_capacity(count);
        for _ in 0..count {
            let id = IdentityFactors::sample(&mut rng).with(attribute, on);
            let pose = Pose::sample(&mut rng);
            let bg = BackgroundFactors::sample(&mut rng);
            images.push(
                render_layers(&id, &pose, &bg, rand::Rng::gen(&mut rng), image_size).compose(),
            );
        }
        Ok(embedder
            .embed(&stack_images(&images, device)?)?
            .mean(0)?
            .detach())
    };
    let neutral = make(false)?;
    let target = make(true)?;
    Ok((neutral, target))
}

/// Which images the directional loss compares during identity optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditMode {
    /// Level-matched intermediate images `x_{t_s}`.
    IntermediateNoisy,
    /// One-shot clean estimates against the original frame.
    EstimatedX0,
}

impl EditMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "intermediate-noisy" => Ok(Self::IntermediateNoisy),
            "estimated-x0" => Ok(Self::EstimatedX0),
            _ => Err(DvaError::Config(format!(
                "unknown edit mode `{s}` (intermediate-noisy, estimated-x0)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::IntermediateNoisy => "intermediate-noisy",
            Self::EstimatedX0 => "estimated-x0",
        }
    }
}

#[derive(Debug, Clone)]
pub struct EmbedEditConfig {
    /// Number of coarse diffusion steps `S`.
    pub inner_steps: usize,
    pub w_embed: f64,
    pub w_id: f64,
    pub w_l1: f64,
    pub lr: f64,
    pub steps: usize,
    pub mode: EditMode,
    /// `(E)` mean embedding without the target attribute.
    pub proto_neutral: Tensor,
    /// `(E)` mean embedding with it.
    pub proto_target: Tensor,
}

impl EmbedEditConfig {
    pub fn new(proto_neutral: Tensor, proto_target: Tensor) -> Self {
        Self {
            inner_steps: 5,
            w_embed: 3.0,
            w_id: 1.0,
            w_l1: 1.0,
            lr: 2e-3,
            steps: 200,
            mode: EditMode::IntermediateNoisy,
            proto_neutral,
            proto_target,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inner_steps == 0 {
            return Err(DvaError::Config("inner_steps must be at least 1".into()));
        }
        for (k, v) in [
            ("w_embed", self.w_embed),
            ("w_id", self.w_id),
            ("w_l1", self.w_l1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(DvaError::Config(format!(
                    "{k} must be non-negative, got {v}"
                )));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(DvaError::Config(format!(
                "lr must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Result of [`optimize_identity`].
#[derive(Debug, Clone)]
pub struct EditTrace {
    /// `z_id_opt - z_id`, shaped like `z_id`.
    pub delta: Tensor,
    /// Loss per optimization step.
    pub losses: Vec<f64>,
}

/// Column `(S, 1, 1, 1)` of per-row scalars.
fn per_row(values: Vec<f64>, like: &Tensor) -> Result<Tensor> {
    let n = values.len();
    Ok(Tensor::from_vec(values, (n, 1, 1, 1), like.device())?.to_dtype(like.dtype())?)
}

/// Optimizes the identity vector of one frame against the directional
/// embedding loss, an identity-preservation cosine term and a masked L1 term,
/// summed over the `S` coarse levels.
///
/// `frame` is `(1, 3, H, W)`, `mask` `(1, 1, H, W)`, `z_id` `(1, id_dim)`
/// unit-norm, `z_lnd` `(1, lnd_dim)`.
pub fn optimize_identity(
    model: &Model,
    frame: &Tensor,
    mask: &Tensor,
    z_id: &Tensor,
    z_lnd: &Tensor,
    cfg: &EmbedEditConfig,
) -> Result<EditTrace> {
    cfg.validate()?;
    if frame.dim(0)? != 1 || z_id.dim(0)? != 1 || z_lnd.dim(0)? != 1 {
        return Err(DvaError::Shape(
            "optimize_identity works on a single frame".into(),
        ));
    }
    let dtype = model.dtype();
    let frame = frame.to_dtype(dtype)?;
    let mask = mask.to_dtype(dtype)?;
    let z_id = z_id.to_dtype(dtype)?.detach();
    let z_lnd = z_lnd.to_dtype(dtype)?.detach();
    let mut trace = EditTrace {
        delta: z_id.zeros_like()?,
        losses: Vec::new(),
    };
    if cfg.steps == 0 {
        return Ok(trace);
    }
    let schedule = model.schedule();
    let steps = StepSchedule::evenly_spaced(schedule.num_steps(), cfg.inner_steps)?;
    let s_count = steps.len();
    let z_face = model.fuse(&z_id, &z_lnd)?.detach();

    // Reference trajectory under the original identity: x_hat[s] at level t_s,
    // with x_hat[0] the reconstruction.
    let x_last = ddim::invert(schedule, &model.estimator, &frame, &z_face, &steps)?;
    let mut x_hat = vec![x_last];
    for (t_prev, t) in steps.pairs().rev() {
        let next = ddim::reverse_step(
            schedule,
            &model.estimator,
            x_hat.last().expect("non-empty"),
            t,
            t_prev,
            &z_face,
        )?;
        x_hat.push(next.detach());
    }
    x_hat.reverse();
    // Sources x_hat[t_1..t_S] and the level-matched references x_hat[t_0..t_{S-1}].
    let sources = Tensor::cat(&x_hat[1..], 0)?;
    let references = Tensor::cat(&x_hat[..s_count], 0)?;
    let levels: Vec<usize> = steps.steps().to_vec();
    let prev_levels: Vec<usize> = steps.pairs().map(|(p, _)| p).collect();
    let ab_prev: Vec<f64> = prev_levels
        .iter()
        .map(|&p| if p == 0 { 1.0 } else { schedule.alpha_bar(p) })
        .collect();
    let signal = per_row(ab_prev.iter().map(|a| a.sqrt()).collect(), &sources)?;
    let noise = per_row(ab_prev.iter().map(|a| (1.0 - a).sqrt()).collect(), &sources)?;
    let frames_s = frame.broadcast_as(sources.shape())?.contiguous()?;
    let masks_s = mask
        .broadcast_as((s_count, 1, frame.dim(2)?, frame.dim(3)?))?
        .contiguous()?;

    let proto = prototype_direction(&cfg.proto_neutral, &cfg.proto_target)?.to_dtype(dtype)?;
    let embedder = &model.encoders.identity;
    let z_opt = Var::from_tensor(&z_id)?;
    let mut opt = AdamW::new(
        vec![z_opt.clone()],
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let lnd_s = z_lnd.broadcast_as((s_count, z_lnd.dim(1)?))?.contiguous()?;
    for _ in 0..cfg.steps {
        let z_unit = ops::l2_normalize(z_opt.as_tensor())?;
        let face = model.fuse(
            &z_unit
                .broadcast_as((s_count, z_unit.dim(1)?))?
                .contiguous()?,
            &lnd_s,
        )?;
        let eps = model.estimator.estimate(&sources, &levels, &face)?;
        let x0 = schedule.predict_x0_at(&sources, &levels, &eps)?;
        let (neutral, edited) = match cfg.mode {
            EditMode::IntermediateNoisy => {
                let edited = (x0.broadcast_mul(&signal)? + eps.broadcast_mul(&noise)?)?;
                (references.clone(), edited)
            }
            EditMode::EstimatedX0 => (frames_s.clone(), x0),
        };
        let embed = guarded_directional_loss(&neutral, &edited, &proto, embedder)?;
        let l1 = (&neutral - &edited)?
            .abs()?
            .broadcast_mul(&masks_s)?
            .flatten_from(1)?
            .mean(D::Minus1)?;
        let id = ops::cosine_similarity(&z_id, &z_unit)?
            .affine(-1.0, 1.0)?
            .sum_all()?;
        let per_level = (embed.affine(cfg.w_embed, 0.0)? + l1.affine(cfg.w_l1, 0.0)?)?;
        let values = per_level.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(s) = values.iter().position(|v| !v.is_finite()) {
            return Err(DvaError::NonFinite(format!(
                "identity optimization loss at level s={} (t={})",
                s + 1,
                levels[s]
            )));
        }
        let loss = (per_level.sum_all()? + id.affine(cfg.w_id * s_count as f64, 0.0)?)?;
        trace.losses.push(ops::scalar_f64(&loss)?);
        opt.backward_step(&loss)?;
    }
    trace.delta = (z_opt.as_tensor() - &z_id)?.detach();
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clusters(flip: bool) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut f = Vec::new();
        let mut l = Vec::new();
        for i in 0..40 {
            let y = i % 2 == 0;
            let c = if y { 1.0 } else { -1.0 };
            let j = (i as f64 * 0.37).sin() * 0.3;
            f.push(vec![c + j, 0.5 * j, -0.2 * c + 0.1 * j]);
            l.push(y ^ flip);
        }
        (f, l)
    }

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn separable_clusters_are_fit_exactly() {
        let (f, l) = clusters(false);
        let d = fit_attribute_classifier("ring", &f, &l, &ClassifierFit::default()).unwrap();
        assert_eq!(d.accuracy(&f, &l).unwrap(), 1.0);
    }

    #[test]
    fn flipped_labels_negate_the_direction() {
        let (f, l) = clusters(false);
        let (_, lf) = clusters(true);
        let a = fit_attribute_classifier("ring", &f, &l, &ClassifierFit::default()).unwrap();
        let b = fit_attribute_classifier("ring", &f, &lf, &ClassifierFit::default()).unwrap();
        let cos = dot(&a.weights, &b.weights)
            / (dot(&a.weights, &a.weights).sqrt() * dot(&b.weights, &b.weights).sqrt());
        assert!(cos < -0.99, "cos {cos}");
    }

    #[test]
    fn single_class_is_rejected() {
        let (f, _) = clusters(false);
        let l = vec![true; f.len()];
        assert!(fit_attribute_classifier("ring", &f, &l, &ClassifierFit::default()).is_err());
    }

    #[test]
    fn edit_shifts_the_normalized_logit_by_s_w_squared() {
        let (f, l) = clusters(false);
        let d = fit_attribute_classifier("ring", &f, &l, &ClassifierFit::default()).unwrap();
        let z = unit(&[0.3, -0.2, 0.9]);
        let s = 0.7;
        let mut n = d.normalize(&z).unwrap();
        let before = dot(&d.weights, &n);
        n.iter_mut().zip(&d.weights).for_each(|(v, w)| *v += s * w);
        let after = dot(&d.weights, &n);
        assert!((after - before - s * dot(&d.weights, &d.weights)).abs() < 1e-12);
        let e = edit_identity_vec(&z, &d, s).unwrap();
        assert!((e.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let same = edit_identity_vec(&z, &d, 0.0).unwrap();
        for (a, b) in same.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(edit_identity_vec(&[1.0, 1.0, 0.0], &d, 0.5).is_err());
        assert!(edit_identity_vec(&[1.0, 0.0], &d, 0.5).is_err());
    }

    #[test]
    fn direction_file_round_trip() {
        let (f, l) = clusters(false);
        let d = fit_attribute_classifier("stripe", &f, &l, &ClassifierFit::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("stripe.dir");
        d.write(&p).unwrap();
        assert_eq!(EditDirection::read(&p).unwrap(), d);
        let bytes = fs::read(&p).unwrap();
        let err = EditDirection::from_bytes(&bytes[..bytes.len() - 3], &p).unwrap_err();
        assert_eq!(err.kind(), "parse");
    }

    struct Flatten;
    impl Embedder for Flatten {
        fn embed(&self, images: &Tensor) -> Result<Tensor> {
            Ok(images.flatten_from(1)?)
        }
    }

    #[test]
    fn directional_loss_limits() {
        let dev = Device::Cpu;
        let a = Tensor::new(&[[[[0.0f64, 0.0]]]], &dev).unwrap();
        let b = Tensor::new(&[[[[1.0f64, 2.0]]]], &dev).unwrap();
        let pn = Tensor::new(&[0.0f64, 0.0], &dev).unwrap();
        let pt = Tensor::new(&[2.0f64, 4.0], &dev).unwrap();
        let v = |x: &Tensor, y: &Tensor, p: &Tensor, q: &Tensor| {
            ops::scalar_f64(&directional_embed_loss(x, y, p, q, &Flatten).unwrap()).unwrap()
        };
        assert!(v(&a, &b, &pn, &pt).abs() < 1e-12);
        assert!((v(&b, &a, &pn, &pt) - 2.0).abs() < 1e-12);
        assert!(directional_embed_loss(&a, &a, &pn, &pt, &Flatten).is_err());
        assert!(directional_embed_loss(&a, &b, &pn, &pn, &Flatten).is_err());
    }

    #[test]
    fn edit_mode_names_round_trip() {
        for m in [EditMode::IntermediateNoisy, EditMode::EstimatedX0] {
            assert_eq!(EditMode::parse(m.name()).unwrap(), m);
        }
        assert!(EditMode::parse("x0").is_err());
    }
}
