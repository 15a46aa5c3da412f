//! The `dva` command line: dataset generation, training, encoding, editing,
//! swaps, metric reports and the regularization ablation.
//!
//! Every command resolves a flat configuration from its defaults, an
//! optional `--config` file and `--key value` flags (flags win), writes that
//! configuration next to its outputs and reports failures as one
//! machine-parsable line on stderr.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Parser, Subcommand};

use crate::config::FlatConfig;
use crate::error::{DvaError, Result};
use crate::experiment::{
    fit_direction, identity_matches, motion_errors, test_masked_variance, ExperimentConfig,
};
use crate::latent_edit::{
    attribute_prototypes, edit_identity, optimize_identity, EditDirection, EditMode,
    EmbedEditConfig,
};
use crate::metrics;
use crate::nets::encoders::IdentityPrediction;
use crate::nets::{ops, Model};
use crate::pipeline::{self, SwapKind, VideoLatentBundle};
use crate::synthdata::{
    self, mask_file, read_dataset, read_frame_dir, read_mask_dir, stack_images, unstack_images,
    write_dataset, write_frame_dir, Attribute, Dataset, VideoSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

/// Name of the resolved-configuration snapshot written with every output.
pub const SNAPSHOT_FILE: &str = "run_config.txt";
pub const DATA_ROOT_ENV: &str = "DVA_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(
    name = "dva",
    version,
    about = "Diffusion video autoencoder at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct Flags {
    /// `--config <file>` and `--key value` pairs mirroring config keys.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "FLAGS"
    )]
    rest: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic video dataset.
    GenData(Flags),
    /// Pretrain the frozen encoders and train estimator plus fusion map.
    Train(Flags),
    /// Encode a video into a latent bundle.
    Encode(Flags),
    /// Decode a bundle and score it against the original video.
    Reconstruct(Flags),
    /// Edit identity along an attribute classifier direction.
    EditAttr(Flags),
    /// Edit identity by optimizing against the directional embedding loss.
    EditEmbed(Flags),
    /// Decode one video with identity, motion or background from another.
    Swap(Flags),
    /// Decode a video from fresh noise maps.
    RandomNoise(Flags),
    /// Compare two frame directories.
    Metrics(Flags),
    /// Train with and without the regularization loss and compare.
    AblateReg(Flags),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Encode(_) => "encode",
            Command::Reconstruct(_) => "reconstruct",
            Command::EditAttr(_) => "edit-attr",
            Command::EditEmbed(_) => "edit-embed",
            Command::Swap(_) => "swap",
            Command::RandomNoise(_) => "random-noise",
            Command::Metrics(_) => "metrics",
            Command::AblateReg(_) => "ablate-reg",
        }
    }

    fn flags(&self) -> &Flags {
        match self {
            Command::GenData(f)
            | Command::Train(f)
            | Command::Encode(f)
            | Command::Reconstruct(f)
            | Command::EditAttr(f)
            | Command::EditEmbed(f)
            | Command::Swap(f)
            | Command::RandomNoise(f)
            | Command::Metrics(f)
            | Command::AblateReg(f) => f,
        }
    }
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    let result =
        resolve(name, &cli.command.flags().rest).and_then(|cfg| execute(&cli.command, &cfg));
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{}", error_line(name, &e));
            if is_config_error(&e) {
                EXIT_CONFIG
            } else {
                EXIT_FAILURE
            }
        }
    }
}

/// `error command=<name> kind=<kind> message=<json string>`.
pub fn error_line(command: &str, e: &DvaError) -> String {
    let msg = serde_json::to_string(&e.to_string()).unwrap_or_else(|_| "\"\"".into());
    format!("error command={command} kind={} message={msg}", e.kind())
}

fn is_config_error(e: &DvaError) -> bool {
    matches!(e, DvaError::Config(_))
}

fn default_data_root() -> String {
    std::env::var(DATA_ROOT_ENV).unwrap_or_else(|_| "data".into())
}

/// Every key a command accepts, with its default. Empty means "required" or
/// "unset", depending on the command.
fn defaults(command: &str) -> FlatConfig {
    let mut c = FlatConfig::default();
    let exp = || ExperimentConfig::desk().to_flat();
    match command {
        "gen-data" => {
            c.set("data", default_data_root());
            c.set("videos", 64);
            c.set("frames", 8);
            c.set("resolution", synthdata::DEFAULT_RESOLUTION);
            c.set("test_videos", 8);
            c.set("seed", 1);
        }
        "train" | "ablate-reg" => {
            c = exp();
            for k in [
                "data.videos",
                "data.frames",
                "data.test_videos",
                "data.seed",
            ] {
                c.remove(k);
            }
            c.set("data", default_data_root());
            c.set(
                "out",
                if command == "train" {
                    "runs/train"
                } else {
                    "runs/ablate-reg"
                },
            );
            c.set("encoders", "");
            if command == "ablate-reg" {
                c.set("t", "250,500,750");
                c.set("draws", 8);
                c.set("seed", 0);
            }
        }
        "encode" => {
            c.set("checkpoint", "");
            c.set("video", "");
            c.set("S", 100);
            c.set("out", "runs/bundle");
        }
        "reconstruct" => {
            c.set("checkpoint", "");
            c.set("bundle", "");
            c.set("video", "");
            c.set("out", "runs/reconstruct");
        }
        "edit-attr" => {
            c.set("checkpoint", "");
            c.set("video", "");
            c.set("data", default_data_root());
            c.set("direction", "");
            c.set("attr", "ring");
            c.set("s", 1.0);
            c.set("S", 100);
            c.set("out", "runs/edit-attr");
        }
        "edit-embed" => {
            c.set("checkpoint", "");
            c.set("video", "");
            c.set("attr", "ring");
            c.set("mode", EditMode::IntermediateNoisy.name());
            c.set("inner_steps", 5);
            c.set("opt_steps", 200);
            c.set("lr", 2e-3);
            c.set("w_embed", 3.0);
            c.set("w_id", 1.0);
            c.set("w_l1", 1.0);
            c.set("step", 1.0);
            c.set("frame", 0);
            c.set("prototypes", 64);
            c.set("seed", 0);
            c.set("S", 100);
            c.set("out", "runs/edit-embed");
        }
        "swap" => {
            c.set("checkpoint", "");
            c.set("video_a", "");
            c.set("video_b", "");
            c.set("which", "identity");
            c.set("S", 100);
            c.set("out", "runs/swap");
        }
        "random-noise" => {
            c.set("checkpoint", "");
            c.set("video", "");
            c.set("seed", 0);
            c.set("S", 100);
            c.set("out", "runs/random-noise");
        }
        "metrics" => {
            c.set("a", "");
            c.set("b", "");
            c.set("checkpoint", "");
            c.set("out", "runs/metrics");
        }
        _ => {}
    }
    c
}

/// Defaults, then the `--config` file, then `--key value` flags.
fn resolve(command: &str, rest: &[String]) -> Result<FlatConfig> {
    let mut flags = FlatConfig::default();
    let mut config_file: Option<PathBuf> = None;
    let mut i = 0;
    while i < rest.len() {
        let arg = &rest[i];
        let key = arg
            .strip_prefix("--")
            .ok_or_else(|| DvaError::Config(format!("expected --key, found `{arg}`")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                i += 1;
                let v = rest
                    .get(i)
                    .ok_or_else(|| DvaError::Config(format!("flag --{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        if key == "config" {
            config_file = Some(PathBuf::from(value));
        } else {
            flags.set(&key, value);
        }
        i += 1;
    }
    let mut cfg = defaults(command);
    if let Some(p) = config_file {
        let file = FlatConfig::load(&p).map_err(|e| DvaError::Config(e.to_string()))?;
        merge_known(&mut cfg, &file, command)?;
    }
    merge_known(&mut cfg, &flags, command)?;
    cfg.set("command", command);
    Ok(cfg)
}

fn merge_known(cfg: &mut FlatConfig, extra: &FlatConfig, command: &str) -> Result<()> {
    for k in extra.keys() {
        if !cfg.contains(k) {
            return Err(DvaError::Config(format!("unknown key `{k}` for {command}")));
        }
    }
    cfg.merge(extra);
    Ok(())
}

fn path_of(cfg: &FlatConfig, key: &str) -> Result<PathBuf> {
    match cfg.get_str(key) {
        Some(v) if !v.is_empty() => Ok(PathBuf::from(v)),
        _ => Err(DvaError::Config(format!("`{key}` is required"))),
    }
}

fn optional_path(cfg: &FlatConfig, key: &str) -> Option<PathBuf> {
    cfg.get_str(key)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(d) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(d).map_err(|e| DvaError::io(d, e))?;
    }
    fs::write(path, text).map_err(|e| DvaError::io(path, e))
}

fn snapshot(dir: &Path, cfg: &FlatConfig) -> Result<()> {
    write_text(&dir.join(SNAPSHOT_FILE), &cfg.to_text())
}

/// Frames, optional masks and optional generating spec of a frame directory.
struct LoadedVideo {
    frames: Tensor,
    masks: Option<Tensor>,
    spec: Option<VideoSpec>,
}

fn load_video(dir: &Path) -> Result<LoadedVideo> {
    let dev = Device::Cpu;
    if dir.join("labels.json").exists() {
        let v = synthdata::read_video(dir)?;
        return Ok(LoadedVideo {
            frames: v.frames_tensor(&dev)?,
            masks: Some(v.masks_tensor(&dev)?),
            spec: Some(v.spec),
        });
    }
    let frames = read_frame_dir(dir)?;
    let masks = if dir.join(mask_file(0)).exists() {
        Some(stack_images(&read_mask_dir(dir, frames.len())?, &dev)?)
    } else {
        None
    };
    Ok(LoadedVideo {
        frames: stack_images(&frames, &dev)?,
        masks,
        spec: None,
    })
}

fn write_frames(dir: &Path, frames: &Tensor) -> Result<()> {
    let images = unstack_images(&frames.to_dtype(DType::F32)?.clamp(-1f32, 1f32)?)?;
    write_frame_dir(dir, &images, None)
}

fn load_model(cfg: &FlatConfig) -> Result<Model> {
    Ok(Model::load(&path_of(cfg, "checkpoint")?)?.0)
}

fn execute(command: &Command, cfg: &FlatConfig) -> Result<()> {
    match command {
        Command::GenData(_) => gen_data(cfg),
        Command::Train(_) => train_cmd(cfg),
        Command::Encode(_) => encode_cmd(cfg),
        Command::Reconstruct(_) => reconstruct_cmd(cfg),
        Command::EditAttr(_) => edit_attr_cmd(cfg),
        Command::EditEmbed(_) => edit_embed_cmd(cfg),
        Command::Swap(_) => swap_cmd(cfg),
        Command::RandomNoise(_) => random_noise_cmd(cfg),
        Command::Metrics(_) => metrics_cmd(cfg),
        Command::AblateReg(_) => ablate_cmd(cfg),
    }
}

fn gen_data(cfg: &FlatConfig) -> Result<()> {
    let root = path_of(cfg, "data")?;
    let videos: usize = cfg.require("videos")?;
    let test: usize = cfg.require("test_videos")?;
    if test >= videos {
        return Err(DvaError::Config(format!(
            "test_videos {test} must be below videos {videos}"
        )));
    }
    let list = synthdata::generate_videos(
        videos,
        cfg.require("frames")?,
        cfg.require("resolution")?,
        cfg.require("seed")?,
    )?;
    write_dataset(&Dataset::from_videos(list, test), &root)?;
    snapshot(&root, cfg)?;
    println!("wrote {videos} videos to {}", root.display());
    Ok(())
}

fn experiment_from(cfg: &FlatConfig, dataset: &Dataset) -> Result<ExperimentConfig> {
    let mut exp = ExperimentConfig::desk().read_from(cfg)?;
    exp.videos = dataset.len();
    exp.test_videos = dataset.split(synthdata::Split::Test).count();
    Ok(exp)
}

fn encoders_for(cfg: &FlatConfig, exp: &ExperimentConfig) -> Result<crate::nets::FrozenEncoders> {
    match optional_path(cfg, "encoders") {
        Some(p) => {
            let (m, _) = Model::load(&p)?;
            if m.config().image_size != exp.model.image_size
                || m.config().id_dim != exp.model.id_dim
                || m.config().lnd_dim != exp.model.lnd_dim
            {
                return Err(DvaError::Config(format!(
                    "encoders in {} do not fit the model config",
                    p.display()
                )));
            }
            Ok(m.encoders)
        }
        None => {
            println!("pretraining encoders for {} steps", exp.encoder.steps);
            exp.pretrain_encoders()
        }
    }
}

fn log_progress(m: &crate::training::StepMetrics) {
    println!(
        "step {} loss_simple {:.5} loss_reg {:.5}",
        m.step, m.loss_simple, m.loss_reg
    );
}

fn train_cmd(cfg: &FlatConfig) -> Result<()> {
    let dataset = read_dataset(&path_of(cfg, "data")?)?;
    let exp = experiment_from(cfg, &dataset)?;
    let out = path_of(cfg, "out")?;
    snapshot(&out, cfg)?;
    let encoders = encoders_for(cfg, &exp)?;
    let (_, report) = exp.train_model(
        encoders,
        &dataset,
        exp.train.use_reg,
        Some(&out),
        log_progress,
    )?;
    println!(
        "trained {} steps in {:.0}s; checkpoint {}",
        exp.train.steps,
        report.seconds,
        report
            .checkpoint
            .as_deref()
            .unwrap_or(Path::new("-"))
            .display()
    );
    Ok(())
}

fn encode_cmd(cfg: &FlatConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let video = load_video(&path_of(cfg, "video")?)?;
    let out = path_of(cfg, "out")?;
    let bundle = pipeline::encode_video(&model, &video.frames, cfg.require("S")?)?;
    bundle.write(&out)?;
    snapshot(&out, cfg)?;
    println!(
        "encoded {} frames into {}",
        bundle.num_frames()?,
        out.display()
    );
    Ok(())
}

fn quality_table(original: &Tensor, decoded: &Tensor) -> Result<(String, f64)> {
    let mut csv = String::from("frame,mse,ssim,ms_ssim\n");
    let mut total = 0.0;
    let n = original.dim(0)?;
    for i in 0..n {
        let a = original.narrow(0, i, 1)?;
        let b = decoded.narrow(0, i, 1)?;
        let mse = metrics::mse(&a, &b)?;
        total += mse;
        let _ = writeln!(
            csv,
            "{i},{mse},{},{}",
            metrics::ssim(&a, &b)?,
            metrics::ms_ssim(&a, &b)?
        );
    }
    Ok((csv, total / n as f64))
}

fn reconstruct_cmd(cfg: &FlatConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let bundle = VideoLatentBundle::read(&path_of(cfg, "bundle")?)?;
    let out = path_of(cfg, "out")?;
    let decoded = pipeline::decode_video(&model, &bundle, None)?;
    write_frames(&out.join("frames"), &decoded)?;
    if let Some(v) = optional_path(cfg, "video") {
        let video = load_video(&v)?;
        let (csv, mean) = quality_table(&video.frames, &decoded)?;
        write_text(&out.join("metrics.csv"), &csv)?;
        println!("mean per-frame MSE {mean:.6}");
    }
    snapshot(&out, cfg)
}

fn attribute_probabilities(model: &Model, frames: &Tensor, attr: Attribute) -> Result<Vec<f64>> {
    let group = match attr {
        Attribute::Ring => 2,
        Attribute::Stripe => 3,
    };
    model.encoders.identity.attribute_probability(frames, group)
}

fn edit_report(
    model: &Model,
    attr: Attribute,
    original: &Tensor,
    edited: &Tensor,
) -> Result<(String, String)> {
    let report = metrics::consistency_report(original, edited, &model.encoders.identity)?;
    let before = attribute_probabilities(model, original, attr)?;
    let after = attribute_probabilities(model, edited, attr)?;
    let mut summary = report.summary();
    for (i, (b, a)) in before.iter().zip(&after).enumerate() {
        let _ = writeln!(summary, "frame {i}: P({}) {b:.4} -> {a:.4}", attr.name());
    }
    Ok((report.to_csv(), summary))
}

fn finish_edit(
    model: &Model,
    cfg: &FlatConfig,
    attr: Attribute,
    video: &LoadedVideo,
    decoded: &Tensor,
) -> Result<()> {
    let out = path_of(cfg, "out")?;
    let edited = match &video.masks {
        Some(m) => pipeline::paste_back(&video.frames, decoded, m)?,
        None => decoded.clone(),
    };
    write_frames(&out.join("frames"), &edited)?;
    let (csv, summary) = edit_report(model, attr, &video.frames, &edited)?;
    write_text(&out.join("consistency.csv"), &csv)?;
    write_text(&out.join("summary.txt"), &summary)?;
    snapshot(&out, cfg)?;
    print!("{summary}");
    Ok(())
}

fn edit_attr_cmd(cfg: &FlatConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let attr = Attribute::parse(cfg.get_str("attr").unwrap_or_default())?;
    let video = load_video(&path_of(cfg, "video")?)?;
    let out = path_of(cfg, "out")?;
    let direction = match optional_path(cfg, "direction") {
        Some(p) => EditDirection::read(&p)?,
        None => {
            let d = fit_direction(&model, &read_dataset(&path_of(cfg, "data")?)?, attr)?;
            d.write(&out.join(format!("direction_{}.bin", attr.name())))?;
            d
        }
    };
    let bundle = pipeline::encode_video(&model, &video.frames, cfg.require("S")?)?;
    let z_edit = edit_identity(&bundle.z_id_rep, &direction, cfg.require("s")?)?;
    let decoded = pipeline::decode_video(&model, &bundle, Some(&z_edit))?;
    finish_edit(&model, cfg, attr, &video, &decoded)
}

fn edit_embed_cmd(cfg: &FlatConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let attr = Attribute::parse(cfg.get_str("attr").unwrap_or_default())?;
    let video = load_video(&path_of(cfg, "video")?)?;
    let frame_idx: usize = cfg.require("frame")?;
    let n = video.frames.dim(0)?;
    if frame_idx >= n {
        return Err(DvaError::Config(format!(
            "frame {frame_idx} out of range for {n} frames"
        )));
    }
    let size = model.config().image_size;
    let (neutral, target) = attribute_prototypes(
        &model.encoders.identity,
        attr,
        cfg.require("prototypes")?,
        size,
        cfg.require("seed")?,
        &Device::Cpu,
    )?;
    let mut ec = EmbedEditConfig::new(neutral, target);
    ec.inner_steps = cfg.require("inner_steps")?;
    ec.steps = cfg.require("opt_steps")?;
    ec.lr = cfg.require("lr")?;
    ec.w_embed = cfg.require("w_embed")?;
    ec.w_id = cfg.require("w_id")?;
    ec.w_l1 = cfg.require("w_l1")?;
    ec.mode = EditMode::parse(cfg.get_str("mode").unwrap_or_default())?;
    let bundle = pipeline::encode_video(&model, &video.frames, cfg.require("S")?)?;
    let frame = video.frames.narrow(0, frame_idx, 1)?;
    let mask = match &video.masks {
        Some(m) => m.narrow(0, frame_idx, 1)?,
        None => Tensor::ones((1, 1, size, size), DType::F32, &Device::Cpu)?,
    };
    let sem = model.encode_semantics(&frame)?;
    let trace = optimize_identity(&model, &frame, &mask, &bundle.z_id_rep, &sem.z_lnd, &ec)?;
    let step: f64 = cfg.require("step")?;
    let z_edit = ops::l2_normalize(&(&bundle.z_id_rep + trace.delta.affine(step, 0.0)?)?)?;
    let decoded = pipeline::decode_video(&model, &bundle, Some(&z_edit))?;
    let out = path_of(cfg, "out")?;
    let losses: String = trace
        .losses
        .iter()
        .enumerate()
        .map(|(i, l)| format!("{i},{l}\n"))
        .collect();
    write_text(
        &out.join("optimization.csv"),
        &format!("step,loss\n{losses}"),
    )?;
    finish_edit(&model, cfg, attr, &video, &decoded)
}

fn swap_cmd(cfg: &FlatConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let which = SwapKind::parse(cfg.get_str("which").unwrap_or_default())?;
    let s: usize = cfg.require("S")?;
    let a = load_video(&path_of(cfg, "video_a")?)?;
    let b = load_video(&path_of(cfg, "video_b")?)?;
    let ba = pipeline::encode_video(&model, &a.frames, s)?;
    let bb = pipeline::encode_video(&model, &b.frames, s)?;
    let frames = pipeline::swap_features(&model, &ba, &bb, which)?;
    let out = path_of(cfg, "out")?;
    write_frames(&out.join("frames"), &frames)?;
    let mut summary = format!("{} swap of {} frames\n", which.name(), frames.dim(0)?);
    if let (SwapKind::Identity, Some(spec)) = (which, &b.spec) {
        let hits = identity_matches(&model, &frames, IdentityPrediction::of(&spec.identity))?;
        let motion = motion_errors(&model, &a.frames, &frames)?;
        let worst = motion.iter().cloned().fold(0.0, f64::max);
        let _ = writeln!(
            summary,
            "donor identity predicted on {hits}/{} frames",
            frames.dim(0)?
        );
        let _ = writeln!(summary, "max motion-probe distance to host {worst:.4}");
    }
    write_text(&out.join("summary.txt"), &summary)?;
    snapshot(&out, cfg)?;
    print!("{summary}");
    Ok(())
}

fn random_noise_cmd(cfg: &FlatConfig) -> Result<()> {
    let model = load_model(cfg)?;
    let video = load_video(&path_of(cfg, "video")?)?;
    let bundle = pipeline::encode_video(&model, &video.frames, cfg.require("S")?)?;
    let frames = pipeline::decode_with_random_noise(&model, &bundle, cfg.require("seed")?)?;
    let out = path_of(cfg, "out")?;
    write_frames(&out.join("frames"), &frames)?;
    let mut summary = String::from("random-noise decode\n");
    if let Some(spec) = &video.spec {
        let hits = identity_matches(&model, &frames, IdentityPrediction::of(&spec.identity))?;
        let _ = writeln!(
            summary,
            "identity preserved on {hits}/{} frames",
            frames.dim(0)?
        );
    }
    write_text(&out.join("summary.txt"), &summary)?;
    snapshot(&out, cfg)?;
    print!("{summary}");
    Ok(())
}

fn metrics_cmd(cfg: &FlatConfig) -> Result<()> {
    let a = load_video(&path_of(cfg, "a")?)?;
    let b = load_video(&path_of(cfg, "b")?)?;
    let out = path_of(cfg, "out")?;
    let (csv, mean) = quality_table(&a.frames, &b.frames)?;
    write_text(&out.join("quality.csv"), &csv)?;
    let mut summary = format!(
        "MSE {mean:.6}\nSSIM {:.4}\nMS-SSIM {:.4}\n",
        metrics::ssim(&a.frames, &b.frames)?,
        metrics::ms_ssim(&a.frames, &b.frames)?
    );
    if optional_path(cfg, "checkpoint").is_some() {
        let model = load_model(cfg)?;
        let report = metrics::consistency_report(&a.frames, &b.frames, &model.encoders.identity)?;
        write_text(&out.join("consistency.csv"), &report.to_csv())?;
        summary.push_str(&report.summary());
    }
    write_text(&out.join("summary.txt"), &summary)?;
    snapshot(&out, cfg)?;
    print!("{summary}");
    Ok(())
}

fn ablate_cmd(cfg: &FlatConfig) -> Result<()> {
    let dataset = read_dataset(&path_of(cfg, "data")?)?;
    let exp = experiment_from(cfg, &dataset)?;
    let out = path_of(cfg, "out")?;
    snapshot(&out, cfg)?;
    let ts: Vec<usize> = cfg.get_list_or("t", &[])?;
    let draws: usize = cfg.require("draws")?;
    let seed: u64 = cfg.require("seed")?;
    let encoders = encoders_for(cfg, &exp)?;
    let enc_copy = exp.fresh_model(encoders)?;
    let (with_reg, _) = exp.train_model(
        clone_encoders(&enc_copy)?,
        &dataset,
        true,
        Some(&out.join("with_reg")),
        log_progress,
    )?;
    let (without_reg, _) = exp.train_model(
        clone_encoders(&enc_copy)?,
        &dataset,
        false,
        Some(&out.join("without_reg")),
        log_progress,
    )?;
    let mut csv = String::from("t,with_reg,without_reg,ratio\n");
    for &t in &ts {
        let a = test_masked_variance(&with_reg, &dataset, t, draws, seed)?;
        let b = test_masked_variance(&without_reg, &dataset, t, draws, seed)?;
        let _ = writeln!(csv, "{t},{a},{b},{}", a / b);
    }
    write_text(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// A copy of the frozen encoders held by `model`, via a checkpoint round trip.
fn clone_encoders(model: &Model) -> Result<crate::nets::FrozenEncoders> {
    let ckpt = model.to_checkpoint(&FlatConfig::default())?;
    Ok(Model::from_checkpoint(&ckpt)?.encoders)
}
