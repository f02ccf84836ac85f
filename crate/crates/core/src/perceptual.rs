//! Feature extractors and the content / style objectives.
//!
//! Content loss is the per-layer mean squared difference of activations,
//! averaged over layers. Style loss is the squared Frobenius distance of
//! Gram matrices `G = AᵀA / (N·M)` (`N` channels, `M` sites), averaged over
//! layers.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{shape_err, Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Name of the pseudo-layer holding the (preprocessed) input image.
pub const INPUT_TAP: &str = "input";

/// Channel plan of the random-filter pyramid.
pub const PYRAMID_CHANNELS: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExtractorKind {
    Pixel,
    Pyramid,
    Loaded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    #[default]
    Max,
    Avg,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerOp {
    Conv3x3 {
        /// `[3, 3, Cin, Cout]`, cross-correlation orientation.
        weight: Tensor<f64>,
        bias: Tensor<f64>,
    },
    Relu,
    Pool(PoolMode),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorLayer {
    pub name: String,
    pub op: LayerOp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelOrder {
    Rgb,
    Bgr,
}

/// Input transform `x ↦ scale·x[order] − mean` applied before the first layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocess {
    pub scale: f64,
    pub mean: [f64; 3],
    pub channel_order: ChannelOrder,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Extractor {
    pub kind: ExtractorKind,
    pub layers: Vec<ExtractorLayer>,
    pub taps: Vec<String>,
    pub preprocess: Option<Preprocess>,
}

/// Per-tap activations `[H_l, W_l, N_l]`, in tap order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack<T> {
    pub maps: Vec<Tensor<T>>,
}

/// Per-tap Gram matrices `[N_l, N_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSet<T> {
    pub grams: Vec<Tensor<T>>,
}

fn validate_taps(layers: &[ExtractorLayer], taps: &[String]) -> Result<()> {
    if taps.is_empty() {
        return Err(Error::InvalidArgument("extractor needs at least one tap".into()));
    }
    for tap in taps {
        if tap != INPUT_TAP && !layers.iter().any(|l| &l.name == tap) {
            return Err(Error::InvalidArgument(format!("tap '{tap}' is not a layer")));
        }
    }
    Ok(())
}

impl Extractor {
    /// The image itself is the only feature.
    pub fn pixel() -> Self {
        Extractor {
            kind: ExtractorKind::Pixel,
            layers: Vec::new(),
            taps: vec![INPUT_TAP.into()],
            preprocess: None,
        }
    }

    /// Three levels of seeded random 3×3 filters (3→16→32→64), each followed
    /// by relu (tapped) and, between levels, 2×2 average pooling. Weights are
    /// He-normal from xoshiro256**, one jump per level; biases are zero.
    pub fn pyramid(seed: u64) -> Self {
        let mut stream = Xoshiro256StarStar::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut taps = Vec::new();
        let mut cin = 3;
        for (level, &cout) in PYRAMID_CHANNELS.iter().enumerate() {
            let mut rng = stream.clone();
            stream.jump();
            let std = (2.0 / (9 * cin) as f64).sqrt();
            let weight = Tensor::from_fn(&[3, 3, cin, cout], |_| {
                let d: f64 = StandardNormal.sample(&mut rng);
                d * std
            });
            let n = level + 1;
            layers.push(ExtractorLayer {
                name: format!("conv{n}"),
                op: LayerOp::Conv3x3 {
                    weight,
                    bias: Tensor::zeros(&[cout]),
                },
            });
            layers.push(ExtractorLayer {
                name: format!("relu{n}"),
                op: LayerOp::Relu,
            });
            taps.push(format!("relu{n}"));
            if n < PYRAMID_CHANNELS.len() {
                layers.push(ExtractorLayer {
                    name: format!("pool{n}"),
                    op: LayerOp::Pool(PoolMode::Avg),
                });
            }
            cin = cout;
        }
        Extractor {
            kind: ExtractorKind::Pyramid,
            layers,
            taps,
            preprocess: None,
        }
    }

    /// Builds an extractor from a layer program, checking kernel shapes chain
    /// from 3 input channels.
    pub fn from_program(
        kind: ExtractorKind,
        layers: Vec<ExtractorLayer>,
        taps: Vec<String>,
        preprocess: Option<Preprocess>,
    ) -> Result<Self> {
        let mut channels = 3;
        for layer in &layers {
            if let LayerOp::Conv3x3 { weight, bias } = &layer.op {
                let s = weight.shape();
                if s.len() != 4 || s[0] != 3 || s[1] != 3 || s[2] != channels {
                    return Err(shape_err(
                        "extractor",
                        format!(
                            "layer '{}' kernel {:?}, expected [3, 3, {channels}, Cout]",
                            layer.name, s
                        ),
                    ));
                }
                if bias.shape() != [s[3]] {
                    return Err(shape_err(
                        "extractor",
                        format!("layer '{}' bias {:?}, expected [{}]", layer.name, bias.shape(), s[3]),
                    ));
                }
                channels = s[3];
            }
        }
        validate_taps(&layers, &taps)?;
        Ok(Extractor {
            kind,
            layers,
            taps,
            preprocess,
        })
    }

    /// Replaces the pooling kind of every pool layer.
    pub fn with_pooling(mut self, mode: PoolMode) -> Self {
        for l in &mut self.layers {
            if let LayerOp::Pool(m) = &mut l.op {
                *m = mode;
            }
        }
        self
    }

    /// Smallest image side for which every tap lies behind non-degenerate pooling.
    pub fn min_extent(&self) -> usize {
        let last_tap = self
            .taps
            .iter()
            .filter_map(|t| self.layers.iter().position(|l| &l.name == t))
            .max();
        let pools = match last_tap {
            Some(end) => self.layers[..=end]
                .iter()
                .filter(|l| matches!(l.op, LayerOp::Pool(_)))
                .count(),
            None => 0,
        };
        1 << pools
    }

    /// Activation count of tap `index` for an `h × w` input.
    pub fn tap_shape(&self, index: usize, h: usize, w: usize) -> Option<[usize; 3]> {
        let tap = self.taps.get(index)?;
        let (mut h, mut w, mut c) = (h, w, 3);
        if tap == INPUT_TAP {
            return Some([h, w, c]);
        }
        for l in &self.layers {
            match &l.op {
                LayerOp::Conv3x3 { weight, .. } => c = weight.shape()[3],
                LayerOp::Relu => {}
                LayerOp::Pool(_) => {
                    h = h.div_ceil(2);
                    w = w.div_ceil(2);
                }
            }
            if &l.name == tap {
                return Some([h, w, c]);
            }
        }
        None
    }

    /// Records the extractor on `image` (`[H, W, 3]`), returning tap nodes.
    pub fn extract_nodes<T: Real>(&self, graph: &mut Graph<T>, image: NodeId) -> Result<Vec<NodeId>> {
        let (h, w, c) = graph.value(image)?.dims3()?;
        if c != 3 {
            return Err(shape_err("extract", format!("image has {c} channels, expected 3")));
        }
        let min = self.min_extent();
        if h < min || w < min {
            return Err(shape_err(
                "extract",
                format!("{w}x{h} image is smaller than the extractor minimum {min}x{min}"),
            ));
        }
        let mut x = image;
        if let Some(pre) = &self.preprocess {
            let mut m = Tensor::<T>::zeros(&[3, 3]);
            for out in 0..3 {
                let src = match pre.channel_order {
                    ChannelOrder::Rgb => out,
                    ChannelOrder::Bgr => 2 - out,
                };
                m.data_mut()[src * 3 + out] = T::of(pre.scale);
            }
            let wn = graph.constant(m);
            let bn = graph.constant(Tensor::from_f64(&[3], &pre.mean.map(|v| -v))?);
            x = graph.conv1x1(x, wn, bn)?;
        }
        let mut taps = vec![None; self.taps.len()];
        let mark = |name: &str, node: NodeId, taps: &mut Vec<Option<NodeId>>| {
            for (slot, tap) in taps.iter_mut().zip(&self.taps) {
                if tap == name {
                    *slot = Some(node);
                }
            }
        };
        mark(INPUT_TAP, x, &mut taps);
        let last = self
            .taps
            .iter()
            .filter_map(|t| self.layers.iter().position(|l| &l.name == t))
            .max();
        if let Some(last) = last {
            for layer in &self.layers[..=last] {
                x = match &layer.op {
                    LayerOp::Conv3x3 { weight, bias } => {
                        let wn = graph.constant(weight.cast());
                        let bn = graph.constant(bias.cast());
                        graph.conv3x3_same(x, wn, bn)?
                    }
                    LayerOp::Relu => graph.relu(x)?,
                    LayerOp::Pool(PoolMode::Max) => graph.max_pool2x2(x)?,
                    LayerOp::Pool(PoolMode::Avg) => graph.avg_pool2x2(x)?,
                };
                mark(&layer.name, x, &mut taps);
            }
        }
        Ok(taps.into_iter().map(|t| t.expect("validated taps")).collect())
    }

    pub fn extract<T: Real>(&self, image: &Tensor<T>) -> Result<FeatureStack<T>> {
        let mut graph = Graph::new();
        let input = graph.constant(image.clone());
        let taps = self.extract_nodes(&mut graph, input)?;
        let maps = taps
            .into_iter()
            .map(|t| graph.value(t).cloned())
            .collect::<Result<_>>()?;
        Ok(FeatureStack { maps })
    }
}

/// `AᵀA / (N·M)` for a `[H, W, N]` activation node.
pub fn gram_node<T: Real>(graph: &mut Graph<T>, activations: NodeId) -> Result<NodeId> {
    let (rows, n) = graph.value(activations)?.as_matrix()?;
    let g = graph.matmul(activations, activations, true, false)?;
    graph.scale(g, 1.0 / (n * rows) as f64)
}

fn check_layers<T: Real>(
    op: &'static str,
    graph: &Graph<T>,
    a: &[NodeId],
    b: &[NodeId],
) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err(op, format!("{} vs {} layers", a.len(), b.len())));
    }
    for (&x, &y) in a.iter().zip(b) {
        let (sx, sy) = (graph.value(x)?.shape(), graph.value(y)?.shape());
        if sx != sy {
            return Err(shape_err(op, format!("layer shapes {sx:?} vs {sy:?}")));
        }
    }
    Ok(())
}

/// `1/L Σ_l mean((a_l − b_l)²)`.
pub fn content_loss_node<T: Real>(graph: &mut Graph<T>, a: &[NodeId], b: &[NodeId]) -> Result<NodeId> {
    check_layers("content_loss", graph, a, b)?;
    let mut total = None;
    for (&x, &y) in a.iter().zip(b) {
        let d = graph.sub(x, y)?;
        let sq = graph.square(d)?;
        let m = graph.reduce_mean(sq)?;
        total = Some(match total {
            Some(t) => graph.add(t, m)?,
            None => m,
        });
    }
    graph.scale(total.expect("non-empty"), 1.0 / a.len() as f64)
}

/// `1/L Σ_l ‖G_l − Ĝ_l‖²_F`.
pub fn style_loss_node<T: Real>(graph: &mut Graph<T>, a: &[NodeId], b: &[NodeId]) -> Result<NodeId> {
    check_layers("style_loss", graph, a, b)?;
    let mut total = None;
    for (&x, &y) in a.iter().zip(b) {
        let d = graph.sub(x, y)?;
        let sq = graph.square(d)?;
        let s = graph.reduce_sum(sq)?;
        total = Some(match total {
            Some(t) => graph.add(t, s)?,
            None => s,
        });
    }
    graph.scale(total.expect("non-empty"), 1.0 / a.len() as f64)
}

fn with_constants<T: Real, R>(
    a: &[Tensor<T>],
    b: &[Tensor<T>],
    f: impl FnOnce(&mut Graph<T>, &[NodeId], &[NodeId]) -> Result<R>,
) -> Result<R> {
    let mut graph = Graph::new();
    let an: Vec<NodeId> = a.iter().map(|t| graph.constant(t.clone())).collect();
    let bn: Vec<NodeId> = b.iter().map(|t| graph.constant(t.clone())).collect();
    f(&mut graph, &an, &bn)
}

pub fn gram<T: Real>(stack: &FeatureStack<T>) -> Result<GramSet<T>> {
    let mut graph = Graph::new();
    let grams = stack
        .maps
        .iter()
        .map(|m| {
            let n = graph.constant(m.clone());
            let g = gram_node(&mut graph, n)?;
            graph.value(g).cloned()
        })
        .collect::<Result<_>>()?;
    Ok(GramSet { grams })
}

pub fn content_loss<T: Real>(a: &FeatureStack<T>, b: &FeatureStack<T>) -> Result<f64> {
    with_constants(&a.maps, &b.maps, |g, x, y| {
        let l = content_loss_node(g, x, y)?;
        Ok(g.value(l)?.data()[0].as_f64())
    })
}

pub fn style_loss<T: Real>(a: &GramSet<T>, b: &GramSet<T>) -> Result<f64> {
    with_constants(&a.grams, &b.grams, |g, x, y| {
        let l = style_loss_node(g, x, y)?;
        Ok(g.value(l)?.data()[0].as_f64())
    })
}

/// Layer program stored in a container header.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgramHeader {
    #[serde(default = "default_format")]
    pub format: String,
    pub preprocess: Option<Preprocess>,
    #[serde(default)]
    pub pooling: PoolMode,
    pub layers: Vec<ProgramLayer>,
    pub taps: Vec<String>,
}

fn default_format() -> String {
    "fcppn-extractor".into()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgramLayer {
    pub name: String,
    /// `conv3x3`, `relu` or `pool`.
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<String>,
}

/// Parses and validates an extractor container.
pub fn load_container(path: &Path) -> Result<Extractor> {
    extractor_from_container(&Container::load(path)?)
}

pub fn extractor_from_container(container: &Container) -> Result<Extractor> {
    let header: ProgramHeader = serde_json::from_str(&container.header)
        .map_err(|e| Error::Container(format!("header: {e}")))?;
    let mut layers = Vec::with_capacity(header.layers.len());
    for pl in &header.layers {
        let op = match pl.op.as_str() {
            "conv3x3" => {
                let tensor = |name: &Option<String>, what: &str| -> Result<Tensor<f64>> {
                    let name = name.as_deref().ok_or_else(|| {
                        Error::Container(format!("layer '{}' has no {what} tensor", pl.name))
                    })?;
                    container.require(name)?.to_tensor()
                };
                LayerOp::Conv3x3 {
                    weight: tensor(&pl.weight, "weight")?,
                    bias: tensor(&pl.bias, "bias")?,
                }
            }
            "relu" => LayerOp::Relu,
            "pool" => LayerOp::Pool(header.pooling),
            other => {
                return Err(Error::Container(format!(
                    "layer '{}' has unknown op '{other}'",
                    pl.name
                )))
            }
        };
        layers.push(ExtractorLayer {
            name: pl.name.clone(),
            op,
        });
    }
    Extractor::from_program(
        ExtractorKind::Loaded,
        layers,
        header.taps.clone(),
        header.preprocess.clone(),
    )
    .map_err(|e| Error::Container(e.to_string()))
}

/// `pixel`, `pyramid:SEED` or `container:PATH`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ExtractorSpec {
    Pixel,
    Pyramid(u64),
    Container(PathBuf),
}

impl ExtractorSpec {
    pub fn build(&self, pooling: Option<PoolMode>) -> Result<Extractor> {
        let e = match self {
            ExtractorSpec::Pixel => Extractor::pixel(),
            ExtractorSpec::Pyramid(seed) => Extractor::pyramid(*seed),
            ExtractorSpec::Container(path) => load_container(path)?,
        };
        Ok(match pooling {
            Some(mode) => e.with_pooling(mode),
            None => e,
        })
    }
}

impl FromStr for ExtractorSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "pixel" {
            return Ok(ExtractorSpec::Pixel);
        }
        if let Some(seed) = s.strip_prefix("pyramid:") {
            return seed
                .parse()
                .map(ExtractorSpec::Pyramid)
                .map_err(|_| Error::InvalidArgument(format!("bad pyramid seed '{seed}'")));
        }
        if s == "pyramid" {
            return Ok(ExtractorSpec::Pyramid(0));
        }
        if let Some(path) = s.strip_prefix("container:") {
            return Ok(ExtractorSpec::Container(PathBuf::from(path)));
        }
        Err(Error::InvalidArgument(format!(
            "unknown extractor '{s}' (expected pixel, pyramid:SEED or container:PATH)"
        )))
    }
}

impl TryFrom<String> for ExtractorSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ExtractorSpec> for String {
    fn from(s: ExtractorSpec) -> String {
        s.to_string()
    }
}

impl fmt::Display for ExtractorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExtractorSpec::Pixel => write!(f, "pixel"),
            ExtractorSpec::Pyramid(seed) => write!(f, "pyramid:{seed}"),
            ExtractorSpec::Container(p) => write!(f, "container:{}", p.display()),
        }
    }
}
