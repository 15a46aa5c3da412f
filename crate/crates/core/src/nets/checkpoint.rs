//! Single-file parameter archive.
//!
//! Layout: a UTF-8 header of newline-terminated lines
//!
//! ```text
//! DVA-CHECKPOINT
//! schema_version=1
//! step=<u64>
//! config <key>=<value>        (any number)
//! tensor <name> <d0,d1,...> <offset>
//! end
//! ```
//!
//! followed by the tensor data as little-endian `f32`, each tensor starting at
//! `offset` elements from the end of the header.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::FlatConfig;
use crate::error::{DvaError, Result};

const MAGIC: &str = "DVA-CHECKPOINT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub step: u64,
    pub config: FlatConfig,
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = format!(
            "{MAGIC}\nschema_version={SCHEMA_VERSION}\nstep={}\n",
            self.step
        );
        for line in self.config.to_text().lines() {
            header.push_str("config ");
            header.push_str(line);
            header.push('\n');
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) {
                return Err(DvaError::Config(format!(
                    "tensor name `{name}` contains whitespace"
                )));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(DvaError::Shape(format!(
                    "tensor {name}: shape {:?} does not match {} values",
                    t.shape,
                    t.data.len()
                )));
            }
            let dims = t
                .shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(",");
            header.push_str(&format!("tensor {name} {dims} {offset}\n"));
            offset += t.data.len();
        }
        header.push_str("end\n");
        let mut out = header.into_bytes();
        out.reserve(offset * 4);
        for t in self.tensors.values() {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |field: &str, msg: String| DvaError::parse(origin, field, msg);
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
        if next_line()? != MAGIC {
            return Err(bad("magic", "not a checkpoint file".into()));
        }
        let schema = next_line()?;
        match schema
            .strip_prefix("schema_version=")
            .map(str::parse::<u32>)
        {
            Some(Ok(SCHEMA_VERSION)) => {}
            _ => return Err(bad("schema_version", format!("unsupported `{schema}`"))),
        }
        let step_line = next_line()?;
        let step = step_line
            .strip_prefix("step=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("step", format!("malformed `{step_line}`")))?;
        let mut config_text = String::new();
        let mut layout = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(c) = line.strip_prefix("config ") {
                config_text.push_str(c);
                config_text.push('\n');
            } else if let Some(t) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = t.split(' ').collect();
                if parts.len() != 3 {
                    return Err(bad("tensor", format!("malformed `{line}`")));
                }
                let shape = if parts[1].is_empty() {
                    Vec::new()
                } else {
                    parts[1]
                        .split(',')
                        .map(str::parse)
                        .collect::<std::result::Result<Vec<usize>, _>>()
                        .map_err(|e| bad(parts[0], e.to_string()))?
                };
                let offset: usize = parts[2]
                    .parse()
                    .map_err(|_| bad(parts[0], "bad offset".into()))?;
                layout.push((parts[0].to_string(), shape, offset));
            } else {
                return Err(bad("header", format!("unexpected line `{line}`")));
            }
        }
        let data_start = pos;
        let config = FlatConfig::parse(&config_text).map_err(|e| bad("config", e.to_string()))?;
        let mut tensors = BTreeMap::new();
        for (name, shape, offset) in layout {
            let n: usize = shape.iter().product();
            let begin = data_start + offset * 4;
            let end = begin + n * 4;
            if end > bytes.len() {
                return Err(bad(
                    &name,
                    format!("data truncated ({} bytes, need {end})", bytes.len()),
                ));
            }
            let data = bytes[begin..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(name, TensorData { shape, data });
        }
        Ok(Self {
            step,
            config,
            tensors,
        })
    }

    /// Atomic: writes a sibling temporary file, then renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| DvaError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut f = fs::File::create(&tmp).map_err(|e| DvaError::io(&tmp, e))?;
            f.write_all(&bytes).map_err(|e| DvaError::io(&tmp, e))?;
            f.sync_all().map_err(|e| DvaError::io(&tmp, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| DvaError::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| DvaError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
