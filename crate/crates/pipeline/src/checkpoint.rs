//! Network parameters plus the run that produced them, in an FCWT container.

use std::path::Path;

use fcppn_core::container::{Container, NamedTensor};
use fcppn_core::coordnet::{Layer, NetworkConfig, Params};
use fcppn_core::{DType, Real};
use serde::{Deserialize, Serialize};

use crate::config::{Freqs, Precision, RunConfig, Settings};
use crate::error::{Result, RunError};

pub const FORMAT: &str = "fcppn-checkpoint";
pub const HEADER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub run: RunConfig,
    pub base_width: usize,
    pub base_height: usize,
}

impl CheckpointHeader {
    pub fn new(run: RunConfig, base_width: usize, base_height: usize) -> Self {
        CheckpointHeader {
            format: FORMAT.into(),
            version: HEADER_VERSION,
            run,
            base_width,
            base_height,
        }
    }

    pub fn network(&self) -> &NetworkConfig {
        &self.run.network
    }
}

/// Parameters at the precision they were trained in.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyParams {
    F32(Params<f32>),
    F64(Params<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: AnyParams,
}

fn tensor_names(layer: usize) -> (String, String) {
    (format!("layer{layer}.weight"), format!("layer{layer}.bias"))
}

pub fn to_container<T: Real>(params: &Params<T>, header: &CheckpointHeader) -> Result<Container> {
    let mut tensors = Vec::with_capacity(2 * params.layers.len());
    for (i, l) in params.layers.iter().enumerate() {
        let (w, b) = tensor_names(i);
        tensors.push(NamedTensor::from_tensor(w, &l.weights));
        tensors.push(NamedTensor::from_tensor(b, &l.bias));
    }
    let header = serde_json::to_string_pretty(header).expect("header serializes");
    Ok(Container { tensors, header })
}

pub fn save_checkpoint<T: Real>(path: &Path, params: &Params<T>, header: &CheckpointHeader) -> Result<()> {
    let bytes = to_container(params, header)?.to_bytes()?;
    std::fs::write(path, bytes).map_err(RunError::io(path))
}

fn params_from<T: Real>(c: &Container, network: &NetworkConfig) -> fcppn_core::Result<Params<T>> {
    let layers = (0..network.layer_shapes().len())
        .map(|i| {
            let (w, b) = tensor_names(i);
            Ok(Layer {
                weights: c.require(&w)?.to_tensor()?,
                bias: c.require(&b)?.to_tensor()?,
            })
        })
        .collect::<fcppn_core::Result<_>>()?;
    let params = Params { layers };
    params.check(network)?;
    Ok(params)
}

pub fn from_container(c: &Container, path: &Path) -> Result<Checkpoint> {
    let header: CheckpointHeader =
        serde_json::from_str(&c.header).map_err(|e| RunError::parse(path, format!("header: {e}")))?;
    if header.format != FORMAT {
        return Err(RunError::parse(path, format!("not a checkpoint (format '{}')", header.format)));
    }
    if header.version != HEADER_VERSION {
        return Err(RunError::parse(
            path,
            format!("unsupported checkpoint version {} (expected {HEADER_VERSION})", header.version),
        ));
    }
    let want = match header.run.precision {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    };
    if let Some(t) = c.tensors.iter().find(|t| t.dtype != want) {
        return Err(RunError::parse(
            path,
            format!("tensor '{}' is {:?}, checkpoint precision is {:?}", t.name, t.dtype, want),
        ));
    }
    let network = header.network();
    let params = match header.run.precision {
        Precision::F32 => params_from(c, network).map(AnyParams::F32),
        Precision::F64 => params_from(c, network).map(AnyParams::F64),
    }
    .map_err(|e| RunError::parse(path, e))?;
    Ok(Checkpoint { header, params })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(RunError::io(path))?;
    let c = Container::from_bytes(&bytes).map_err(|e| RunError::parse(path, e))?;
    from_container(&c, path)
}

/// Rejects explicitly requested network options that disagree with a checkpoint.
pub fn check_conflicts(settings: &Settings, network: &NetworkConfig) -> Result<()> {
    let mut conflicts = Vec::new();
    let mut check = |name: &str, requested: Option<String>, stored: String| {
        if let Some(r) = requested {
            if r != stored {
                conflicts.push(format!("--{name} {r} but checkpoint has {stored}"));
            }
        }
    };
    let head = |h: fcppn_core::coordnet::Head| format!("{h:?}").to_lowercase();
    check("param", settings.param.map(head), head(network.head));
    check(
        "freqs",
        settings.freqs.map(|f| f.to_string()),
        Freqs(network.freq_w, network.freq_h).to_string(),
    );
    check("depth", settings.depth.map(|d| d.to_string()), network.depth.to_string());
    check("filters", settings.filters.map(|d| d.to_string()), network.filters.to_string());
    check("seed", settings.seed.map(|d| d.to_string()), network.seed.to_string());
    check("init", settings.init.map(|i| format!("{i:?}")), format!("{:?}", network.init));
    if conflicts.is_empty() {
        Ok(())
    } else {
        Err(RunError::Conflict(conflicts.join("; ")))
    }
}
