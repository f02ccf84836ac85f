//! Run configuration: flags, optional TOML file, and resolved defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;
use fcppn_core::coordnet::{Head, InitRule, NetworkConfig};
use fcppn_core::perceptual::{ExtractorSpec, PoolMode};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Result, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Reconstruct,
    Texture,
    Interpolate,
    Render,
    Gradcheck,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Reconstruct => "reconstruct",
            Task::Texture => "texture",
            Task::Interpolate => "interpolate",
            Task::Render => "render",
            Task::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Content,
    Style,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Frequency grid extent written `WxH`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Freqs(pub usize, pub usize);

impl FromStr for Freqs {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (w, h) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected WxH, got '{s}'"))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| format!("bad frequency extent '{v}' in '{s}'"))
        };
        Ok(Freqs(parse(w)?, parse(h)?))
    }
}

impl fmt::Display for Freqs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.0, self.1)
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> Result<T, String> {
    T::deserialize(serde::de::value::StrDeserializer::<serde::de::value::Error>::new(s))
        .map_err(|e| e.to_string())
}

fn from_str_de<'de, D, T>(d: D) -> Result<Option<T>, D::Error>
where
    D: Deserializer<'de>,
    T: FromStr,
    T::Err: fmt::Display,
{
    Option::<String>::deserialize(d)?
        .map(|s| s.parse().map_err(serde::de::Error::custom))
        .transpose()
}

fn one_or_many<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<PathBuf>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(PathBuf),
        Many(Vec<PathBuf>),
    }
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(p) => vec![p],
        OneOrMany::Many(v) => v,
    })
}

/// Options shared by every subcommand. Each is optional so that a config
/// file can supply it; flags take precedence over the file.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// TOML file with any of these options (keys as flag names)
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Target PNG; give twice for interpolate
    #[arg(long = "target")]
    #[serde(default, deserialize_with = "one_or_many")]
    pub target: Vec<PathBuf>,

    /// Output head: cppn or fcppn
    #[arg(long, value_parser = parse_enum::<Head>)]
    pub param: Option<Head>,

    /// Fourier grid extent, e.g. 10x10
    #[arg(long)]
    #[serde(default, deserialize_with = "from_str_de")]
    pub freqs: Option<Freqs>,

    /// Hidden layers
    #[arg(long)]
    pub depth: Option<usize>,

    /// Filters per hidden layer
    #[arg(long)]
    pub filters: Option<usize>,

    /// Weight init: fan-in or literal-variance
    #[arg(long, value_parser = parse_enum::<InitRule>)]
    pub init: Option<InitRule>,

    /// L-BFGS iterations
    #[arg(long)]
    pub iters: Option<usize>,

    /// pixel, pyramid:SEED or container:PATH
    #[arg(long)]
    pub extractor: Option<ExtractorSpec>,

    /// Pooling override for loaded extractors: max or avg
    #[arg(long, value_parser = parse_enum::<PoolMode>)]
    pub pool: Option<PoolMode>,

    /// content or style
    #[arg(long, value_parser = parse_enum::<LossKind>)]
    pub loss: Option<LossKind>,

    /// Network initialization seed
    #[arg(long)]
    pub seed: Option<u64>,

    /// Output directory
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Training precision: f32 or f64
    #[arg(long, value_parser = parse_enum::<Precision>)]
    pub precision: Option<Precision>,

    /// Render / frame width
    #[arg(long)]
    pub width: Option<usize>,

    /// Render / frame height
    #[arg(long)]
    pub height: Option<usize>,

    /// Interpolation frame count
    #[arg(long)]
    pub frames: Option<usize>,

    /// Checkpoint to render from
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Conditioning vector for render, comma separated
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    #[serde(default)]
    pub z: Vec<f64>,
}

macro_rules! overlay {
    ($hi:expr, $lo:expr, [$($opt:ident),*], [$($vec:ident),*]) => {{
        let (hi, lo) = ($hi, $lo);
        Settings {
            config: hi.config,
            $($opt: hi.$opt.or(lo.$opt),)*
            $($vec: if hi.$vec.is_empty() { lo.$vec } else { hi.$vec },)*
        }
    }};
}

impl Settings {
    /// Values from `self`, falling back to `lower` where unset.
    pub fn overlay(self, lower: Settings) -> Settings {
        overlay!(
            self,
            lower,
            [param, freqs, depth, filters, init, iters, extractor, pool, loss, seed, out,
             precision, width, height, frames, checkpoint],
            [target, z]
        )
    }

    pub fn from_toml(path: &Path) -> Result<Settings> {
        let text = std::fs::read_to_string(path).map_err(RunError::io(path))?;
        toml::from_str(&text).map_err(|e| RunError::parse(path, e))
    }

    /// Merges the config file named by `--config`, if any.
    pub fn with_file(self) -> Result<Settings> {
        match &self.config {
            Some(path) => {
                let file = Settings::from_toml(path)?;
                Ok(self.overlay(file))
            }
            None => Ok(self),
        }
    }
}

/// Fully resolved run description; stored in checkpoint headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub targets: Vec<PathBuf>,
    pub network: NetworkConfig,
    pub extractor: ExtractorSpec,
    pub pooling: Option<PoolMode>,
    pub loss: LossKind,
    pub iters: usize,
    pub out: PathBuf,
    pub precision: Precision,
    pub frames: usize,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub z: Vec<f64>,
}

pub const DEFAULT_ITERS: usize = 500;
pub const DEFAULT_FRAMES: usize = 16;

impl RunConfig {
    pub fn resolve(task: Task, s: &Settings) -> Result<RunConfig> {
        let freqs = s.freqs.unwrap_or(Freqs(10, 10));
        let network = NetworkConfig {
            depth: s.depth.unwrap_or(8),
            filters: s.filters.unwrap_or(24),
            head: s.param.unwrap_or(Head::Fcppn),
            freq_w: freqs.0,
            freq_h: freqs.1,
            z_dim: if task == Task::Interpolate { 2 } else { 0 },
            init: s.init.unwrap_or_default(),
            seed: s.seed.unwrap_or(0),
        };
        network.validate().map_err(|e| RunError::Usage(e.to_string()))?;
        let config = RunConfig {
            task,
            targets: s.target.clone(),
            network,
            extractor: s.extractor.clone().unwrap_or(ExtractorSpec::Pyramid(0)),
            pooling: s.pool,
            loss: s.loss.unwrap_or(match task {
                Task::Reconstruct => LossKind::Content,
                _ => LossKind::Style,
            }),
            iters: s.iters.unwrap_or(DEFAULT_ITERS),
            out: s.out.clone().unwrap_or_else(|| PathBuf::from("out")),
            precision: s.precision.unwrap_or_default(),
            frames: s.frames.unwrap_or(DEFAULT_FRAMES),
            width: s.width,
            height: s.height,
            checkpoint: s.checkpoint.clone(),
            z: s.z.clone(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| Err(RunError::Usage(m));
        let n = self.targets.len();
        match self.task {
            Task::Reconstruct | Task::Texture if n != 1 => {
                return usage(format!("{} needs exactly one --target, got {n}", self.task.name()));
            }
            Task::Interpolate if self.checkpoint.is_none() && n != 2 => {
                return usage(format!("interpolate needs exactly two --target, got {n}"));
            }
            Task::Interpolate if self.checkpoint.is_some() && n != 0 => {
                return usage("interpolate from a checkpoint takes no --target".into());
            }
            Task::Render if n != 0 => return usage("render takes no --target".into()),
            Task::Render if self.checkpoint.is_none() => {
                return usage("render needs --checkpoint".into());
            }
            Task::Gradcheck if n > 1 => return usage("gradcheck takes at most one --target".into()),
            _ => {}
        }
        if self.task == Task::Interpolate && self.frames == 0 {
            return usage("--frames must be at least 1".into());
        }
        if self.width == Some(0) || self.height == Some(0) {
            return usage("--width and --height must be at least 1".into());
        }
        Ok(())
    }
}
