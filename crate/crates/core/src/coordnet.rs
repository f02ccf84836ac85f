//! Coordinate grids, CPPN parameters and the per-pixel network.
//!
//! The network is a stack of 1×1 convolutions, each followed by
//! `φ(a) = (atan(a)/0.67, atan(a)²/0.67)` concatenated along channels, then a
//! head 1×1 convolution without activation. Because every layer is 1×1, each
//! pixel's output depends only on its own input samples.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use rand_xoshiro::Xoshiro256StarStar;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::fourier::{coefficient_channels, PhaseCoords};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Normalized coordinates span `[-COORD_EXTENT, COORD_EXTENT]`.
pub const COORD_EXTENT: f64 = 1.732_050_807_568_877_2;

const PHI_SCALE: f64 = 1.0 / 0.67;

/// Per-pixel network inputs.
#[derive(Debug, Clone)]
pub struct InputField<T> {
    pub width: usize,
    pub height: usize,
    /// `[H, W, 2 + |z|]`: `(x_net, y_net, z…)`.
    pub samples: Tensor<T>,
    pub phase: PhaseCoords,
    pub z: Vec<f64>,
}

/// `linspace(-√3, √3, n)`; a single sample sits at 0.
fn normalized_axis(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.0];
    }
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| ((2 * i) as f64 / denom - 1.0) * COORD_EXTENT)
        .collect()
}

/// Grid at the optimization resolution.
pub fn make_grid<T: Real>(width: usize, height: usize, z: &[f64]) -> Result<InputField<T>> {
    make_render_grid(width, height, width, height, z)
}

/// `width × height` samples spanning the same normalized square as a
/// `base_w × base_h` grid; phase coordinates are in base pixel units.
pub fn make_render_grid<T: Real>(
    width: usize,
    height: usize,
    base_w: usize,
    base_h: usize,
    z: &[f64],
) -> Result<InputField<T>> {
    if width == 0 || height == 0 || base_w == 0 || base_h == 0 {
        return Err(Error::InvalidArgument(format!(
            "grid extents must be ≥ 1, got {width}x{height} (base {base_w}x{base_h})"
        )));
    }
    let xs = normalized_axis(width);
    let ys = normalized_axis(height);
    let channels = 2 + z.len();
    let mut data = Vec::with_capacity(width * height * channels);
    for &y in &ys {
        for &x in &xs {
            data.push(T::of(x));
            data.push(T::of(y));
            data.extend(z.iter().map(|&v| T::of(v)));
        }
    }
    Ok(InputField {
        width,
        height,
        samples: Tensor::new(vec![height, width, channels], data)?,
        phase: PhaseCoords::resampled(width, height, base_w, base_h),
        z: z.to_vec(),
    })
}

impl<T: Real> InputField<T> {
    /// Rows `y0..y1` of the field.
    pub fn rows(&self, y0: usize, y1: usize) -> Self {
        let row = self.width * self.samples.shape()[2];
        let data = self.samples.data()[y0 * row..y1 * row].to_vec();
        InputField {
            width: self.width,
            height: y1 - y0,
            samples: Tensor::new(vec![y1 - y0, self.width, self.samples.shape()[2]], data)
                .expect("row slice"),
            phase: self.phase.rows(y0, y1),
            z: self.z.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    /// RGB straight from the head.
    Cppn,
    /// Localized Fourier coefficients, synthesized to RGB.
    Fcppn,
}

/// Weight initialization rule; `C` is the layer's input width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum InitRule {
    /// std = √(1/C).
    #[default]
    FanIn,
    /// variance = √(1/C), i.e. std = (1/C)^¼.
    LiteralVariance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub depth: usize,
    pub filters: usize,
    pub head: Head,
    pub freq_w: usize,
    pub freq_h: usize,
    /// Length of the conditioning vector appended to the coordinates.
    pub z_dim: usize,
    #[serde(default)]
    pub init: InitRule,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            depth: 8,
            filters: 24,
            head: Head::Fcppn,
            freq_w: 10,
            freq_h: 10,
            z_dim: 0,
            init: InitRule::FanIn,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.filters == 0 || self.freq_w * self.freq_h == 0 {
            return Err(Error::InvalidArgument(format!(
                "depth, filters and freq_w·freq_h must be ≥ 1 (got {}, {}, {}x{})",
                self.depth, self.filters, self.freq_w, self.freq_h
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        2 + self.z_dim
    }

    pub fn output_width(&self) -> usize {
        match self.head {
            Head::Cppn => 3,
            Head::Fcppn => coefficient_channels(self.freq_w, self.freq_h),
        }
    }

    /// `(Cin, Cout)` of every layer, head last.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.depth + 1);
        let mut cin = self.input_width();
        for _ in 0..self.depth {
            shapes.push((cin, self.filters));
            cin = 2 * self.filters;
        }
        shapes.push((cin, self.output_width()));
        shapes
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<T> {
    /// `[Cin, Cout]`.
    pub weights: Tensor<T>,
    /// `[Cout]`.
    pub bias: Tensor<T>,
}

/// Network parameters; the head layer is last.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub layers: Vec<Layer<T>>,
}

/// Graph handles of inserted parameters.
#[derive(Debug, Clone)]
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

impl ParamNodes {
    /// Leaves in flattening order.
    pub fn leaves(&self) -> Vec<NodeId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Draws parameters from a xoshiro256** stream seeded with `config.seed`
/// (SplitMix64 expansion). Layer `l` uses the stream advanced by `l` jumps
/// of 2¹²⁸, so adding layers never perturbs earlier ones. Weights are
/// standard normal draws (f64) scaled by the init rule; biases are zero.
pub fn init_params<T: Real>(config: &NetworkConfig) -> Result<Params<T>> {
    config.validate()?;
    let mut stream = Xoshiro256StarStar::seed_from_u64(config.seed);
    let layers = config
        .layer_shapes()
        .into_iter()
        .map(|(cin, cout)| {
            let mut rng = stream.clone();
            stream.jump();
            let std = match config.init {
                InitRule::FanIn => (1.0 / cin as f64).sqrt(),
                InitRule::LiteralVariance => (1.0 / cin as f64).sqrt().sqrt(),
            };
            let weights = Tensor::from_fn(&[cin, cout], |_| {
                let draw: f64 = StandardNormal.sample(&mut rng);
                T::of(draw * std)
            });
            Layer {
                weights,
                bias: Tensor::zeros(&[cout]),
            }
        })
        .collect();
    Ok(Params { layers })
}

impl<T: Real> Params<T> {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weights: l.weights.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
        }
    }

    /// Flattened as `w0, b0, w1, b1, …`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend(l.weights.data().iter().map(|v| v.as_f64()));
            out.extend(l.bias.data().iter().map(|v| v.as_f64()));
        }
        out
    }

    pub fn from_flat(config: &NetworkConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.num_params() {
            return Err(shape_err(
                "params",
                format!("{} values for {} parameters", flat.len(), config.num_params()),
            ));
        }
        let mut rest = flat;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(cin, cout)| {
                let (w, tail) = rest.split_at(cin * cout);
                let (b, tail) = tail.split_at(cout);
                rest = tail;
                Ok(Layer {
                    weights: Tensor::from_f64(&[cin, cout], w)?,
                    bias: Tensor::from_f64(&[cout], b)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Params { layers })
    }

    /// Checks the tensors against the config's layer plan.
    pub fn check(&self, config: &NetworkConfig) -> Result<()> {
        let shapes = config.layer_shapes();
        if shapes.len() != self.layers.len() {
            return Err(shape_err(
                "params",
                format!("{} layers, config needs {}", self.layers.len(), shapes.len()),
            ));
        }
        for (i, ((cin, cout), l)) in shapes.iter().zip(&self.layers).enumerate() {
            if l.weights.shape() != [*cin, *cout] || l.bias.shape() != [*cout] {
                return Err(shape_err(
                    "params",
                    format!(
                        "layer {i}: weights {:?} bias {:?}, expected [{cin}, {cout}] / [{cout}]",
                        l.weights.shape(),
                        l.bias.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn insert(&self, graph: &mut Graph<T>, trainable: bool) -> ParamNodes {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                if trainable {
                    (graph.param(l.weights.clone()), graph.param(l.bias.clone()))
                } else {
                    (graph.constant(l.weights.clone()), graph.constant(l.bias.clone()))
                }
            })
            .collect();
        ParamNodes { layers }
    }

    /// Writes new values into previously inserted leaves.
    pub fn assign(&self, graph: &mut Graph<T>, nodes: &ParamNodes) -> Result<()> {
        for (l, &(w, b)) in self.layers.iter().zip(&nodes.layers) {
            graph.set_leaf(w, l.weights.clone())?;
            graph.set_leaf(b, l.bias.clone())?;
        }
        Ok(())
    }
}

/// `φ(a)`: channel-wise concat of `atan(a)/0.67` and `atan(a)²/0.67`.
pub fn activation_phi<T: Real>(graph: &mut Graph<T>, a: NodeId) -> Result<NodeId> {
    let t = graph.arctan(a)?;
    let first = graph.scale(t, PHI_SCALE)?;
    let sq = graph.square(t)?;
    let second = graph.scale(sq, PHI_SCALE)?;
    graph.concat_channels(&[first, second])
}

/// Hidden stack and head, no output nonlinearity.
pub fn build_head<T: Real>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    input: NodeId,
) -> Result<NodeId> {
    let (head, hidden) = params
        .layers
        .split_last()
        .ok_or_else(|| Error::InvalidArgument("network has no layers".into()))?;
    let mut x = input;
    for &(w, b) in hidden {
        let a = graph.conv1x1(x, w, b)?;
        x = activation_phi(graph, a)?;
    }
    graph.conv1x1(x, head.0, head.1)
}

/// CPPN: sigmoid RGB. F-CPPN: raw coefficients (synthesis and sigmoid follow).
pub fn forward_network_node<T: Real>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    head: Head,
    input: NodeId,
) -> Result<NodeId> {
    let out = build_head(graph, params, input)?;
    match head {
        Head::Cppn => graph.sigmoid(out),
        Head::Fcppn => Ok(out),
    }
}

/// Evaluates the network on a field without recording gradients.
pub fn forward_network<T: Real>(
    params: &Params<T>,
    config: &NetworkConfig,
    field: &InputField<T>,
) -> Result<Tensor<T>> {
    params.check(config)?;
    let mut graph = Graph::new();
    let nodes = params.insert(&mut graph, false);
    let input = graph.constant(field.samples.clone());
    let out = forward_network_node(&mut graph, &nodes, config.head, input)?;
    Ok(graph.value(out)?.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_endpoints_and_center() {
        let f: InputField<f64> = make_grid(3, 1, &[]).unwrap();
        let xs: Vec<f64> = (0..3).map(|i| f.samples.at3(0, i, 0)).collect();
        assert_eq!(xs, vec![-COORD_EXTENT, 0.0, COORD_EXTENT]);
        assert_eq!(f.samples.at3(0, 1, 1), 0.0);

        let f: InputField<f64> = make_grid(1, 1, &[]).unwrap();
        assert_eq!(f.samples.data(), &[0.0, 0.0]);
    }

    #[test]
    fn grid_linspace_value() {
        let f: InputField<f64> = make_grid(5, 2, &[]).unwrap();
        assert!((f.samples.at3(0, 1, 0) + 0.866_025_403_784_438_6).abs() < 1e-15);
    }

    #[test]
    fn z_is_broadcast() {
        let f: InputField<f32> = make_grid(4, 3, &[0.25, -1.0]).unwrap();
        assert_eq!(f.samples.shape(), &[3, 4, 4]);
        for y in 0..3 {
            for x in 0..4 {
                assert_eq!(f.samples.at3(y, x, 2), 0.25);
                assert_eq!(f.samples.at3(y, x, 3), -1.0);
            }
        }
        assert!(make_grid::<f32>(0, 3, &[]).is_err());
    }

    #[test]
    fn biases_start_at_zero_and_init_is_reproducible() {
        let cfg = NetworkConfig::default();
        let a: Params<f32> = init_params(&cfg).unwrap();
        let b: Params<f32> = init_params(&cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.layers.iter().all(|l| l.bias.data().iter().all(|&v| v == 0.0)));
        let c: Params<f32> = init_params(&NetworkConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn layer_plan_matches_channel_bookkeeping() {
        let cfg = NetworkConfig {
            z_dim: 2,
            ..NetworkConfig::default()
        };
        let shapes = cfg.layer_shapes();
        assert_eq!(shapes[0], (4, 24));
        assert!(shapes[1..8].iter().all(|&s| s == (48, 24)));
        assert_eq!(shapes[8], (48, 600));
        let cppn = NetworkConfig {
            head: Head::Cppn,
            ..cfg
        };
        assert_eq!(cppn.layer_shapes()[8], (48, 3));
    }

    #[test]
    fn flat_round_trip() {
        let cfg = NetworkConfig {
            depth: 2,
            filters: 3,
            freq_w: 2,
            freq_h: 1,
            ..NetworkConfig::default()
        };
        let p: Params<f64> = init_params(&cfg).unwrap();
        let flat = p.to_flat();
        assert_eq!(flat.len(), cfg.num_params());
        assert_eq!(Params::from_flat(&cfg, &flat).unwrap(), p);
        assert!(Params::<f64>::from_flat(&cfg, &flat[1..]).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = NetworkConfig {
            depth: 0,
            ..NetworkConfig::default()
        };
        assert!(init_params::<f32>(&cfg).is_err());
    }

    #[test]
    fn phi_components() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::new(vec![1, 3, 1], vec![0.0, 1.0, -1.0]).unwrap());
        let p = activation_phi(&mut g, a).unwrap();
        let phi = g.value(p).unwrap().clone();
        assert_eq!(phi.shape(), &[1, 3, 2]);
        assert_eq!((phi.at3(0, 0, 0), phi.at3(0, 0, 1)), (0.0, 0.0));
        let (first, second) = (1.172_236_064_772_310_9, 0.920_672_052_340_425_2);
        assert!((phi.at3(0, 1, 0) - first).abs() < 1e-12);
        assert!((phi.at3(0, 1, 1) - second).abs() < 1e-12);
        assert!((phi.at3(0, 2, 0) + first).abs() < 1e-12);
        assert!((phi.at3(0, 2, 1) - second).abs() < 1e-12);
    }

    #[test]
    fn zero_network_is_half_grey() {
        let cfg = NetworkConfig {
            head: Head::Cppn,
            depth: 3,
            filters: 4,
            ..NetworkConfig::default()
        };
        let mut p: Params<f64> = init_params(&cfg).unwrap();
        for l in &mut p.layers {
            l.weights.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = forward_network(&p, &cfg, &make_grid(4, 4, &[]).unwrap()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.5));
    }
}
