//! Artifact directories, manifests, exit codes and list parsing.

use std::path::{Path, PathBuf};

use latent_cot::interp::export::{ColorScale, Grid, HIGH_COLOR, LOW_COLOR, MID_COLOR};
use latent_cot::{Error, Result};
use serde::Serialize;

/// Process exit statuses. Stable; documented in `--help` and the README.
#[allow(dead_code)]
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const MISSING_INPUT: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
    pub const NUMERICAL: i32 = 6;
    pub const NO_CORRECT_RUNS: i32 = 7;
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Index { .. }
        | Error::UnknownToken { .. }
        | Error::ContextOverflow { .. }
        | Error::Layout(_)
        | Error::Json(_) => exit::CONFIG,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => exit::MISSING_INPUT,
        Error::Io { .. } => exit::FAILURE,
        Error::Checkpoint(_) => exit::CHECKPOINT,
        Error::Numerical(_) => exit::NUMERICAL,
        Error::NoCorrectRuns(_) => exit::NO_CORRECT_RUNS,
    }
}

#[derive(Serialize)]
struct Palette {
    low: String,
    mid: String,
    high: String,
    interpolation: &'static str,
    probability_domain: [f64; 2],
    percent_domain: [f64; 2],
}

fn hex(c: [u8; 3]) -> String {
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

#[derive(Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    color_scale: Palette,
    pub artifacts: Vec<String>,
}

/// Collects artifacts written to one output directory.
pub struct ArtifactDir {
    pub root: PathBuf,
    written: Vec<String>,
}

impl ArtifactDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(ArtifactDir {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    /// Writes `<stem>.csv` and `<stem>.svg`.
    pub fn write_grid(&mut self, stem: &str, grid: &Grid, scale: ColorScale) -> Result<()> {
        self.write(&format!("{stem}.csv"), grid.to_csv())?;
        self.write(&format!("{stem}.svg"), grid.to_svg(scale))
    }

    /// Notes a file produced by something other than [`ArtifactDir::write`].
    pub fn record(&mut self, name: &str) {
        if !self.written.iter().any(|w| w == name) {
            self.written.push(name.to_string());
        }
    }

    pub fn finish(mut self, command: &str, config_hash: String, seed: u64) -> Result<()> {
        self.written.sort();
        let manifest = Manifest {
            tool: "latent-cot",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            config_hash,
            seed,
            color_scale: Palette {
                low: hex(LOW_COLOR),
                mid: hex(MID_COLOR),
                high: hex(HIGH_COLOR),
                interpolation: "piecewise linear in RGB, clamped",
                probability_domain: [ColorScale::UNIT.low, ColorScale::UNIT.high],
                percent_domain: [ColorScale::PERCENT.low, ColorScale::PERCENT.high],
            },
            artifacts: self.written.clone(),
        };
        let path = self.root.join("manifest.json");
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

/// FNV-1a over arbitrary bytes, hex encoded.
pub fn fnv_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}

/// A list of integers written as `41..50` (inclusive), `5,31`, or a mix
/// such as `2,4..6`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NumList(pub Vec<u64>);

impl std::str::FromStr for NumList {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            if let Some((a, b)) = part.split_once("..") {
                let lo: u64 = a.trim().parse().map_err(|_| format!("bad range start in {part:?}"))?;
                let hi: u64 = b
                    .trim()
                    .trim_start_matches('=')
                    .parse()
                    .map_err(|_| format!("bad range end in {part:?}"))?;
                if lo > hi {
                    return Err(format!("empty range {part:?}"));
                }
                out.extend(lo..=hi);
            } else {
                out.push(part.parse().map_err(|_| format!("bad number {part:?}"))?);
            }
        }
        if out.is_empty() {
            return Err("empty list".into());
        }
        Ok(NumList(out))
    }
}

impl NumList {
    pub fn usizes(&self) -> Vec<usize> {
        self.0.iter().map(|&v| v as usize).collect()
    }
}
