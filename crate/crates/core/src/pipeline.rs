//! Video encode, edit and decode: identity averaging, per-frame inversion,
//! conditional decoding, mask paste-back and feature swaps.

use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::ddim::{self, StepSchedule};
use crate::error::{DvaError, Result};
use crate::nets::{ops, Model};
use crate::training::gaussian_like;

const BUNDLE_MAGIC: &str = "DVA-BUNDLE";
const BUNDLE_SCHEMA: u32 = 1;
pub const BUNDLE_HEADER: &str = "bundle.txt";
const UNIT_TOLERANCE: f64 = 1e-4;

/// Everything needed to decode a video: shared identity, per-frame motion,
/// conditions and noise maps.
#[derive(Debug, Clone)]
pub struct VideoLatentBundle {
    /// `(1, id_dim)`, unit-norm.
    pub z_id_rep: Tensor,
    /// `(N, lnd_dim)`.
    pub z_lnd: Tensor,
    /// `(N, z_face_dim)`, `fuse(z_id_rep, z_lnd[n])`.
    pub z_face: Tensor,
    /// `(N, 3, H, W)` inverted noise maps.
    pub x_last: Tensor,
    pub steps: StepSchedule,
    pub checkpoint_id: String,
}

impl VideoLatentBundle {
    pub fn num_frames(&self) -> Result<usize> {
        Ok(self.x_last.dim(0)?)
    }

    fn check(&self, model: &Model) -> Result<()> {
        let id = checkpoint_id(model)?;
        if self.checkpoint_id != id {
            return Err(DvaError::Config(format!(
                "bundle was encoded with checkpoint {}, model is {id}",
                self.checkpoint_id
            )));
        }
        Ok(())
    }

    /// Writes `bundle.txt` plus one little-endian `f32` file per latent.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| DvaError::io(dir, e))?;
        let steps = self
            .steps
            .steps()
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut header = format!(
            "{BUNDLE_MAGIC}\nschema_version={BUNDLE_SCHEMA}\nframes={}\ncheckpoint={}\nsteps={steps}\n",
            self.num_frames()?,
            self.checkpoint_id
        );
        for (name, t) in self.tensors() {
            let file = format!("{name}.f32");
            let dims = t
                .dims()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",");
            header.push_str(&format!("tensor {name} {dims} {file}\n"));
            let bytes: Vec<u8> = t
                .flatten_all()?
                .to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect();
            write_atomic(&dir.join(file), &bytes)?;
        }
        header.push_str("end\n");
        write_atomic(&dir.join(BUNDLE_HEADER), header.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let hp = dir.join(BUNDLE_HEADER);
        let text = fs::read_to_string(&hp).map_err(|e| DvaError::io(&hp, e))?;
        let bad = |field: &str, msg: String| DvaError::parse(&hp, field, msg);
        let mut lines = text.lines();
        if lines.next() != Some(BUNDLE_MAGIC) {
            return Err(bad("magic", "not a bundle header".into()));
        }
        let mut fields = std::collections::HashMap::new();
        let mut tensors = std::collections::HashMap::new();
        let mut ended = false;
        for line in lines {
            if line == "end" {
                ended = true;
                break;
            }
            if let Some(t) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = t.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad("tensor", format!("malformed `{line}`")));
                }
                let dims = parts[1]
                    .split(',')
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|e| bad(parts[0], e.to_string()))?;
                let fp = dir.join(parts[2]);
                let bytes = fs::read(&fp).map_err(|e| DvaError::io(&fp, e))?;
                let n: usize = dims.iter().product();
                if bytes.len() != n * 4 {
                    return Err(DvaError::parse(
                        &fp,
                        parts[0],
                        format!("expected {} bytes, found {}", n * 4, bytes.len()),
                    ));
                }
                let data: Vec<f32> = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                tensors.insert(
                    parts[0].to_string(),
                    Tensor::from_vec(data, dims, &Device::Cpu)?,
                );
            } else {
                let (k, v) = line
                    .split_once('=')
                    .ok_or_else(|| bad("header", format!("malformed `{line}`")))?;
                fields.insert(k.to_string(), v.to_string());
            }
        }
        if !ended {
            return Err(bad("header", "missing `end`".into()));
        }
        if fields.get("schema_version").map(String::as_str) != Some("1") {
            return Err(bad("schema_version", "unsupported".into()));
        }
        let steps: Vec<usize> = fields
            .get("steps")
            .ok_or_else(|| bad("steps", "missing".into()))?
            .split(',')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad("steps", format!("{e}")))?;
        let total = *steps.last().unwrap_or(&0);
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| bad(name, "missing tensor".into()))
        };
        let bundle = Self {
            z_id_rep: take("z_id_rep")?,
            z_lnd: take("z_lnd")?,
            z_face: take("z_face")?,
            x_last: take("x_last")?,
            steps: StepSchedule::from_steps(steps, total)
                .map_err(|e| bad("steps", e.to_string()))?,
            checkpoint_id: fields
                .get("checkpoint")
                .cloned()
                .ok_or_else(|| bad("checkpoint", "missing".into()))?,
        };
        let n = bundle.num_frames()?;
        if bundle.z_lnd.dim(0)? != n || bundle.z_face.dim(0)? != n || bundle.z_id_rep.dim(0)? != 1 {
            return Err(bad("tensor", "inconsistent frame counts".into()));
        }
        Ok(bundle)
    }

    fn tensors(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("z_id_rep", &self.z_id_rep),
            ("z_lnd", &self.z_lnd),
            ("z_face", &self.z_face),
            ("x_last", &self.x_last),
        ]
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| DvaError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| DvaError::io(path, e))
}

/// Training step and parameter checksum of `model`.
pub fn checkpoint_id(model: &Model) -> Result<String> {
    Ok(format!(
        "step{}-{:016x}",
        model.step,
        model.trainable_checksum()?
    ))
}

/// Face alignment and cropping slot. Synthetic frames are already aligned.
pub fn align_frames(frames: &Tensor) -> Result<Tensor> {
    Ok(frames.clone())
}

/// `l2norm(mean_n z_id[n])` as a `(1, D)` tensor.
pub fn representative_identity(z_id: &Tensor) -> Result<Tensor> {
    ops::l2_normalize(&z_id.mean_keepdim(0)?)
}

fn check_unit_rows(z: &Tensor, what: &str) -> Result<()> {
    let norms = z
        .to_dtype(DType::F64)?
        .sqr()?
        .sum(1)?
        .sqrt()?
        .to_vec1::<f64>()?;
    if let Some(n) = norms.iter().find(|n| (**n - 1.0).abs() > UNIT_TOLERANCE) {
        return Err(DvaError::Config(format!(
            "{what} must be unit-norm, has norm {n}"
        )));
    }
    Ok(())
}

fn repeat_rows(z: &Tensor, n: usize) -> Result<Tensor> {
    Ok(z.broadcast_as((n, z.dim(1)?))?.contiguous()?)
}

/// Encodes `(N, 3, H, W)` frames with an `steps`-step inversion.
pub fn encode_video(model: &Model, frames: &Tensor, steps: usize) -> Result<VideoLatentBundle> {
    let size = model.config().image_size;
    match frames.dims() {
        [n, 3, h, w] if *n >= 1 && *h == size && *w == size => {}
        d => {
            return Err(DvaError::Shape(format!(
                "encode_video expects (N, 3, {size}, {size}) frames, got {d:?}"
            )))
        }
    }
    let frames = align_frames(&frames.to_dtype(model.dtype())?)?;
    let n = frames.dim(0)?;
    let sem = model.encode_semantics(&frames)?;
    let z_id_rep = representative_identity(&sem.z_id)?;
    let z_face = model
        .fuse(&repeat_rows(&z_id_rep, n)?, &sem.z_lnd)?
        .detach();
    let schedule = StepSchedule::evenly_spaced(model.schedule().num_steps(), steps)?;
    let x_last = ddim::invert(
        model.schedule(),
        &model.estimator,
        &frames,
        &z_face,
        &schedule,
    )?;
    Ok(VideoLatentBundle {
        z_id_rep,
        z_lnd: sem.z_lnd,
        z_face,
        x_last,
        steps: schedule,
        checkpoint_id: checkpoint_id(model)?,
    })
}

/// Deterministic decode of the noise maps under the given conditions.
pub fn decode_with(
    model: &Model,
    x_last: &Tensor,
    z_face: &Tensor,
    steps: &StepSchedule,
) -> Result<Tensor> {
    let dt = model.dtype();
    ddim::sample(
        model.schedule(),
        &model.estimator,
        &x_last.to_dtype(dt)?,
        &z_face.to_dtype(dt)?,
        steps,
    )
}

/// Decodes every frame; with `z_id_override` the conditions are rebuilt from
/// it and the stored motion features.
pub fn decode_video(
    model: &Model,
    bundle: &VideoLatentBundle,
    z_id_override: Option<&Tensor>,
) -> Result<Tensor> {
    bundle.check(model)?;
    let z_face = match z_id_override {
        None => bundle.z_face.clone(),
        Some(z) => {
            check_unit_rows(z, "identity override")?;
            faces_for(model, z, &bundle.z_lnd)?
        }
    };
    decode_with(model, &bundle.x_last, &z_face, &bundle.steps)
}

fn faces_for(model: &Model, z_id: &Tensor, z_lnd: &Tensor) -> Result<Tensor> {
    let n = z_lnd.dim(0)?;
    let z = match z_id.dim(0)? {
        1 => repeat_rows(z_id, n)?,
        m if m == n => z_id.clone(),
        m => {
            return Err(DvaError::Shape(format!(
                "{m} identity rows for {n} motion rows"
            )))
        }
    };
    Ok(model.fuse(&z, z_lnd)?.detach())
}

/// `mask * edited + (1 - mask) * original`, masks `(N, 1, H, W)`.
pub fn paste_back(original: &Tensor, edited: &Tensor, masks: &Tensor) -> Result<Tensor> {
    crate::schedule::same_shape(original, edited, "edited frames")?;
    let (n, _, h, w) = original.dims4()?;
    if masks.dims() != [n, 1, h, w] {
        return Err(DvaError::Shape(format!(
            "masks {:?} do not match frames {:?}",
            masks.dims(),
            original.dims()
        )));
    }
    let m = masks.to_dtype(original.dtype())?;
    let edited = edited.to_dtype(original.dtype())?;
    Ok((edited.broadcast_mul(&m)? + original.broadcast_mul(&m.affine(-1.0, 1.0)?)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SwapKind {
    Identity,
    Motion,
    Background,
}

impl SwapKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "motion" => Ok(Self::Motion),
            "background" => Ok(Self::Background),
            _ => Err(DvaError::Config(format!(
                "unknown swap `{s}` (identity, motion, background)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Identity => "identity",
            Self::Motion => "motion",
            Self::Background => "background",
        }
    }
}

/// Decodes `a` with one component taken from `b`.
pub fn swap_features(
    model: &Model,
    a: &VideoLatentBundle,
    b: &VideoLatentBundle,
    which: SwapKind,
) -> Result<Tensor> {
    a.check(model)?;
    b.check(model)?;
    if a.steps != b.steps {
        return Err(DvaError::Config(
            "bundles use different step schedules".into(),
        ));
    }
    let (na, nb) = (a.num_frames()?, b.num_frames()?);
    if which != SwapKind::Identity && na != nb {
        return Err(DvaError::Shape(format!(
            "{} swap needs equal lengths, got {na} and {nb}",
            which.name()
        )));
    }
    let (x_last, z_face) = match which {
        SwapKind::Identity => (a.x_last.clone(), faces_for(model, &b.z_id_rep, &a.z_lnd)?),
        SwapKind::Motion => (a.x_last.clone(), faces_for(model, &a.z_id_rep, &b.z_lnd)?),
        SwapKind::Background => (b.x_last.clone(), a.z_face.clone()),
    };
    decode_with(model, &x_last, &z_face, &a.steps)
}

/// Decodes the bundle with its noise maps replaced by seeded standard normal noise.
pub fn decode_with_random_noise(
    model: &Model,
    bundle: &VideoLatentBundle,
    seed: u64,
) -> Result<Tensor> {
    bundle.check(model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = gaussian_like(&mut rng, &bundle.x_last)?;
    decode_with(model, &noise, &bundle.z_face, &bundle.steps)
}
