//! Coordinates to image: network, optional localized IDFT, final sigmoid.

use crate::coordnet::{build_head, make_render_grid, Head, InputField, NetworkConfig, ParamNodes, Params};
use crate::error::Result;
use crate::fourier::LocalizedIdft;
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Pixels per render tile.
const TILE_PIXELS: usize = 1 << 14;

#[derive(Debug, Clone, Copy)]
pub struct ImageNodes {
    /// Raw head output (coefficients for F-CPPN, RGB logits for CPPN).
    pub head: NodeId,
    /// `[H, W, 3]` before the sigmoid.
    pub pre_sigmoid: NodeId,
    /// `[H, W, 3]` in (0, 1).
    pub rgb: NodeId,
}

/// Synthesis operator for a field, `None` for a plain CPPN.
pub fn synthesis_for<T: Real>(
    config: &NetworkConfig,
    field: &InputField<T>,
) -> Result<Option<LocalizedIdft<T>>> {
    match config.head {
        Head::Cppn => Ok(None),
        Head::Fcppn => LocalizedIdft::new(&field.phase, config.freq_w, config.freq_h).map(Some),
    }
}

/// Records the full image pipeline for `input` (a node holding `field.samples`).
pub fn build_image<T: Real>(
    graph: &mut Graph<T>,
    params: &ParamNodes,
    synthesis: Option<&LocalizedIdft<T>>,
    input: NodeId,
) -> Result<ImageNodes> {
    let head = build_head(graph, params, input)?;
    let pre_sigmoid = match synthesis {
        Some(idft) => idft.node(graph, head)?,
        None => head,
    };
    let rgb = graph.sigmoid(pre_sigmoid)?;
    Ok(ImageNodes {
        head,
        pre_sigmoid,
        rgb,
    })
}

/// Renders a field in row tiles. Pixels are independent, so tiling does not
/// change the arithmetic performed for any pixel.
pub fn render_field<T: Real>(
    params: &Params<T>,
    config: &NetworkConfig,
    field: &InputField<T>,
) -> Result<Tensor<T>> {
    params.check(config)?;
    let rows_per_tile = (TILE_PIXELS / field.width).max(1);
    let mut data = Vec::with_capacity(field.width * field.height * 3);
    let mut y0 = 0;
    while y0 < field.height {
        let y1 = (y0 + rows_per_tile).min(field.height);
        let tile = field.rows(y0, y1);
        let synthesis = synthesis_for(config, &tile)?;
        let mut graph = Graph::new();
        let nodes = params.insert(&mut graph, false);
        let input = graph.constant(tile.samples);
        let img = build_image(&mut graph, &nodes, synthesis.as_ref(), input)?;
        data.extend_from_slice(graph.value(img.rgb)?.data());
        y0 = y1;
    }
    Tensor::new(vec![field.height, field.width, 3], data)
}

/// Renders `width × height` samples of an image optimized at `base_w × base_h`.
pub fn render<T: Real>(
    params: &Params<T>,
    config: &NetworkConfig,
    (width, height): (usize, usize),
    (base_w, base_h): (usize, usize),
    z: &[f64],
) -> Result<Tensor<T>> {
    let field = make_render_grid(width, height, base_w, base_h, z)?;
    render_field(params, config, &field)
}
