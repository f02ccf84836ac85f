//! Reconstruction, texture synthesis, interpolation, rendering and gradient checks.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fcppn_core::coordnet::{init_params, make_grid, NetworkConfig, ParamNodes, Params};
use fcppn_core::generator::{build_image, render, synthesis_for};
use fcppn_core::gradcheck::{gradient_check_all, GradCheckOptions, GradCheckReport};
use fcppn_core::optim::{minimize_with, LbfgsOptions, Minimum, Termination, TraceEntry};
use fcppn_core::perceptual::{
    content_loss_node, gram_node, style_loss_node, Extractor, FeatureStack,
};
use fcppn_core::{Graph, NodeId, Real, Tensor};
use log::{info, warn};

use crate::checkpoint::{check_conflicts, load_checkpoint, save_checkpoint, AnyParams, CheckpointHeader};
use crate::config::{LossKind, Precision, RunConfig, Settings, Task};
use crate::error::{Result, RunError};
use crate::image_io::{read_png, write_png};

/// Smallest accepted target side.
pub const MIN_TARGET_SIDE: usize = 16;

pub const LOSS_CSV_HEADER: &str = "iter,loss,grad_norm,step";

/// One optimization target and the conditioning vector it is paired with.
#[derive(Debug, Clone)]
pub struct Target<T> {
    pub z: Vec<f64>,
    pub image: Tensor<T>,
}

/// Differentiable objective over flattened parameters. The graph is built
/// once; each evaluation replaces the parameter leaves and replays it.
pub struct Objective<T> {
    graph: Graph<T>,
    network: NetworkConfig,
    nodes: ParamNodes,
    loss: NodeId,
    rgb: Vec<NodeId>,
}

impl<T: Real> Objective<T> {
    pub fn new(
        network: &NetworkConfig,
        params: &Params<T>,
        targets: &[Target<T>],
        extractor: &Extractor,
        loss: LossKind,
    ) -> Result<Self> {
        params.check(network)?;
        let mut graph = Graph::new();
        let nodes = params.insert(&mut graph, true);
        let mut total = None;
        let mut rgb = Vec::with_capacity(targets.len());
        for t in targets {
            let (h, w, _) = t.image.dims3()?;
            let field = make_grid::<T>(w, h, &t.z)?;
            let synthesis = synthesis_for(network, &field)?;
            let input = graph.constant(field.samples);
            let img = build_image(&mut graph, &nodes, synthesis.as_ref(), input)?;
            rgb.push(img.rgb);
            let features = extractor.extract_nodes(&mut graph, img.rgb)?;
            let reference = extractor.extract(&t.image)?;
            let term = match loss {
                LossKind::Content => {
                    let consts = constants(&mut graph, reference);
                    content_loss_node(&mut graph, &features, &consts)?
                }
                LossKind::Style => {
                    let grams = features
                        .iter()
                        .map(|&f| gram_node(&mut graph, f))
                        .collect::<fcppn_core::Result<Vec<_>>>()?;
                    let target_grams = fcppn_core::perceptual::gram(&reference)?;
                    let consts: Vec<NodeId> = target_grams
                        .grams
                        .into_iter()
                        .map(|g| graph.constant(g))
                        .collect();
                    style_loss_node(&mut graph, &grams, &consts)?
                }
            };
            total = Some(match total {
                Some(acc) => graph.add(acc, term)?,
                None => term,
            });
        }
        let loss = total.ok_or_else(|| RunError::Usage("no targets".into()))?;
        Ok(Objective {
            graph,
            network: network.clone(),
            nodes,
            loss,
            rgb,
        })
    }

    /// Loss and gradient at `flat`, both widened to f64.
    pub fn evaluate(&mut self, flat: &[f64]) -> fcppn_core::Result<(f64, Vec<f64>)> {
        let params = Params::<T>::from_flat(&self.network, flat)?;
        params.assign(&mut self.graph, &self.nodes)?;
        self.graph.recompute()?;
        let loss = self.graph.value(self.loss)?.data()[0].as_f64();
        let grads = self.graph.backward(self.loss)?;
        let mut flat_grad = Vec::with_capacity(flat.len());
        for leaf in self.nodes.leaves() {
            let g = grads.get(leaf).expect("parameter leaf has a gradient");
            flat_grad.extend(g.data().iter().map(|v| v.as_f64()));
        }
        Ok((loss, flat_grad))
    }

    /// Rendered images (one per target) at the last evaluated parameters.
    pub fn images(&self) -> Result<Vec<Tensor<T>>> {
        self.rgb
            .iter()
            .map(|&n| Ok(self.graph.value(n)?.clone()))
            .collect()
    }

    pub fn graph_mut(&mut self) -> (&mut Graph<T>, NodeId) {
        (&mut self.graph, self.loss)
    }
}

fn constants<T: Real>(graph: &mut Graph<T>, stack: FeatureStack<T>) -> Vec<NodeId> {
    stack.maps.into_iter().map(|m| graph.constant(m)).collect()
}

/// Optimizer settings used by every training task.
pub fn lbfgs_options(iters: usize) -> LbfgsOptions {
    LbfgsOptions {
        max_iters: iters,
        grad_tolerance: 0.0,
        ..Default::default()
    }
}

#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub params: Params<T>,
    pub minimum: Minimum,
    /// Final renders, one per target.
    pub images: Vec<Tensor<T>>,
}

/// Optimizes freshly initialized parameters against `targets`.
pub fn train<T: Real>(
    network: &NetworkConfig,
    targets: &[Target<T>],
    extractor: &Extractor,
    loss: LossKind,
    iters: usize,
) -> Result<Trained<T>> {
    let init = init_params::<T>(network)?;
    let mut objective = Objective::new(network, &init, targets, extractor, loss)?;
    let observe = |e: &TraceEntry| {
        if e.iter.is_multiple_of(25) {
            info!("iter {:>5}  loss {:.6e}  |g| {:.3e}  step {:.3e}", e.iter, e.loss, e.grad_norm, e.step);
        }
    };
    let minimum = minimize_with(
        |x: &[f64]| objective.evaluate(x),
        init.to_flat(),
        &lbfgs_options(iters),
        observe,
    )?;
    if minimum.termination == Termination::LineSearchFailed {
        warn!("line search made no further progress; keeping the best iterate");
    }
    let params = Params::<T>::from_flat(network, &minimum.x)?;
    let images = targets
        .iter()
        .map(|t| {
            let (h, w, _) = t.image.dims3()?;
            Ok(render(&params, network, (w, h), (w, h), &t.z)?)
        })
        .collect::<Result<_>>()?;
    Ok(Trained {
        params,
        minimum,
        images,
    })
}

/// Mean squared difference of two equally shaped images.
pub fn pixel_mse<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let n = a.len().max(1) as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum::<f64>()
        / n
}

/// Mean over pixels of the colour variance inside each clipped 3×3 window.
pub fn mean_local_variance<T: Real>(image: &Tensor<T>) -> Result<f64> {
    let (h, w, c) = image.dims3()?;
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let (mut s, mut s2, mut n) = (0.0, 0.0, 0.0);
                for yy in y.saturating_sub(1)..(y + 2).min(h) {
                    for xx in x.saturating_sub(1)..(x + 2).min(w) {
                        let v = image.at3(yy, xx, ch).as_f64();
                        s += v;
                        s2 += v * v;
                        n += 1.0;
                    }
                }
                total += s2 / n - (s / n) * (s / n);
            }
        }
    }
    Ok(total / (h * w * c) as f64)
}

/// `z_k = (cos θ_k, sin θ_k)` with `θ_k = (π/2)·k/(K−1)`, written with sines
/// so both endpoints are exactly `(1, 0)` and `(0, 1)`.
pub fn frame_z(k: usize, frames: usize) -> [f64; 2] {
    if frames <= 1 {
        return [1.0, 0.0];
    }
    let t = k as f64 / (frames - 1) as f64;
    [(FRAC_PI_2 * (1.0 - t)).sin(), (FRAC_PI_2 * t).sin()]
}

pub fn loss_csv(trace: &[TraceEntry]) -> String {
    let mut s = String::from(LOSS_CSV_HEADER);
    s.push('\n');
    for e in trace {
        writeln!(s, "{},{},{},{}", e.iter, e.loss, e.grad_norm, e.step).expect("string write");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub task: Task,
    pub out: PathBuf,
    pub final_loss: Option<f64>,
    pub iterations: usize,
    pub termination: Option<Termination>,
    /// Against the target (mean over targets for interpolate).
    pub pixel_mse: Option<f64>,
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    std::fs::write(path, contents).map_err(RunError::io(path))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(RunError::io(path))
}

fn load_targets<T: Real>(config: &RunConfig, extractor: &Extractor) -> Result<Vec<Target<T>>> {
    let images = config
        .targets
        .iter()
        .map(|p| read_png::<T>(p))
        .collect::<Result<Vec<_>>>()?;
    let min = MIN_TARGET_SIDE.max(extractor.min_extent());
    for (img, path) in images.iter().zip(&config.targets) {
        let (h, w, _) = img.dims3()?;
        if h < min || w < min {
            return Err(RunError::Usage(format!(
                "{}: {w}x{h} target is below the {min}x{min} minimum for this extractor",
                path.display()
            )));
        }
    }
    if let [a, b] = images.as_slice() {
        if a.shape() != b.shape() {
            return Err(RunError::Usage(format!(
                "interpolation targets differ in size: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    let zs: Vec<Vec<f64>> = match config.task {
        Task::Interpolate => vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        _ => vec![Vec::new(); images.len()],
    };
    Ok(zs
        .into_iter()
        .zip(images)
        .map(|(z, image)| Target { z, image })
        .collect())
}

fn write_frames<T: Real>(
    params: &Params<T>,
    network: &NetworkConfig,
    size: (usize, usize),
    base: (usize, usize),
    frames: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let dir = out.join("frames");
    create_dir(&dir)?;
    (0..frames)
        .map(|k| {
            let img = render(params, network, size, base, &frame_z(k, frames))?;
            let path = dir.join(format!("{k:04}.png"));
            write_png(&path, &img)?;
            Ok(path)
        })
        .collect()
}

fn train_task<T: Real>(config: &RunConfig) -> Result<RunSummary> {
    let extractor = config.extractor.build(config.pooling)?;
    let targets = load_targets::<T>(config, &extractor)?;
    let (h, w, _) = targets[0].image.dims3()?;
    create_dir(&config.out)?;
    info!(
        "{}: {}x{} target(s), {:?} head, {} parameters, extractor {}",
        config.task.name(),
        w,
        h,
        config.network.head,
        config.network.num_params(),
        config.extractor
    );
    let trained = train(&config.network, &targets, &extractor, config.loss, config.iters)?;
    let mut files = Vec::new();

    let csv = config.out.join("loss.csv");
    write_file(&csv, loss_csv(&trained.minimum.trace).as_bytes())?;
    files.push(csv);
    let png = config.out.join("final.png");
    write_png(&png, &trained.images[0])?;
    files.push(png);
    let ckpt = config.out.join("checkpoint.fcwt");
    save_checkpoint(&ckpt, &trained.params, &CheckpointHeader::new(config.clone(), w, h))?;
    files.push(ckpt);
    if config.task == Task::Interpolate {
        let size = (config.width.unwrap_or(w), config.height.unwrap_or(h));
        files.extend(write_frames(&trained.params, &config.network, size, (w, h), config.frames, &config.out)?);
    }

    let mse = targets
        .iter()
        .zip(&trained.images)
        .map(|(t, img)| pixel_mse(img, &t.image))
        .sum::<f64>()
        / targets.len() as f64;
    info!(
        "done: loss {:.6e} after {} iterations ({:?}); pixel MSE {:.6e}; local variance {:.4e}",
        trained.minimum.loss,
        trained.minimum.trace.len() - 1,
        trained.minimum.termination,
        mse,
        mean_local_variance(&trained.images[0])?
    );
    Ok(RunSummary {
        task: config.task,
        out: config.out.clone(),
        final_loss: Some(trained.minimum.loss),
        iterations: trained.minimum.trace.len() - 1,
        termination: Some(trained.minimum.termination),
        pixel_mse: Some(mse),
        files,
    })
}

macro_rules! with_params {
    ($params:expr, |$p:ident| $body:expr) => {
        match $params {
            AnyParams::F32($p) => $body,
            AnyParams::F64($p) => $body,
        }
    };
}

fn render_task(config: &RunConfig, settings: &Settings) -> Result<RunSummary> {
    let path = config.checkpoint.as_ref().expect("validated");
    let ckpt = load_checkpoint(path)?;
    let network = ckpt.header.network().clone();
    check_conflicts(settings, &network)?;
    let base = (ckpt.header.base_width, ckpt.header.base_height);
    let size = (config.width.unwrap_or(base.0), config.height.unwrap_or(base.1));
    let z = if config.z.is_empty() {
        let mut z = vec![0.0; network.z_dim];
        if let Some(first) = z.first_mut() {
            *first = 1.0;
        }
        z
    } else {
        config.z.clone()
    };
    if z.len() != network.z_dim {
        return Err(RunError::Usage(format!(
            "--z has {} entries, checkpoint expects {}",
            z.len(),
            network.z_dim
        )));
    }
    create_dir(&config.out)?;
    let png = config.out.join("render.png");
    with_params!(&ckpt.params, |p| write_png(&png, &render(p, &network, size, base, &z)?))?;
    info!("rendered {}x{} from {} (base {}x{})", size.0, size.1, path.display(), base.0, base.1);
    Ok(RunSummary {
        task: Task::Render,
        out: config.out.clone(),
        final_loss: None,
        iterations: 0,
        termination: None,
        pixel_mse: None,
        files: vec![png],
    })
}

fn frames_from_checkpoint(config: &RunConfig, settings: &Settings) -> Result<RunSummary> {
    let path = config.checkpoint.as_ref().expect("validated");
    let ckpt = load_checkpoint(path)?;
    let network = ckpt.header.network().clone();
    check_conflicts(settings, &network)?;
    if network.z_dim != 2 {
        return Err(RunError::Usage(format!(
            "checkpoint has a {}-dimensional z, interpolation needs 2",
            network.z_dim
        )));
    }
    let base = (ckpt.header.base_width, ckpt.header.base_height);
    let size = (config.width.unwrap_or(base.0), config.height.unwrap_or(base.1));
    create_dir(&config.out)?;
    let files = with_params!(&ckpt.params, |p| write_frames(p, &network, size, base, config.frames, &config.out))?;
    Ok(RunSummary {
        task: Task::Interpolate,
        out: config.out.clone(),
        final_loss: None,
        iterations: 0,
        termination: None,
        pixel_mse: None,
        files,
    })
}

/// A deterministic 16×16-ish test pattern for gradient checks without a target.
pub fn synthetic_target(width: usize, height: usize) -> Tensor<f64> {
    Tensor::from_fn(&[height, width, 3], |i| {
        let (y, x, c) = (i / (3 * width), (i / 3) % width, i % 3);
        let v = ((x as f64 * 0.9 + c as f64).sin() * (y as f64 * 0.6).cos() + 1.0) / 2.0;
        0.05 + 0.9 * v
    })
}

/// Finite-difference check of the full training objective at initialization (64-bit).
pub fn gradcheck_objective(
    network: &NetworkConfig,
    target: Tensor<f64>,
    extractor: &Extractor,
    loss: LossKind,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheckReport>> {
    let z = vec![1.0; network.z_dim];
    let params = init_params::<f64>(network)?;
    let mut objective = Objective::new(network, &params, &[Target { z, image: target }], extractor, loss)?;
    let (graph, loss_node) = objective.graph_mut();
    Ok(gradient_check_all(graph, loss_node, opts)?)
}

fn gradcheck_task(config: &RunConfig) -> Result<RunSummary> {
    let extractor = config.extractor.build(config.pooling)?;
    let target = match config.targets.first() {
        Some(p) => read_png::<f64>(p)?,
        None => synthetic_target(config.width.unwrap_or(16), config.height.unwrap_or(16)),
    };
    let reports = gradcheck_objective(&config.network, target, &extractor, config.loss, &GradCheckOptions::default())?;
    let mut failed = Vec::new();
    for r in &reports {
        println!(
            "leaf {:>3}  checked {:>3}  excluded {:>2}  max rel error {:.3e}  {}",
            r.leaf,
            r.checked,
            r.excluded,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            failed.push(r.leaf.to_string());
        }
    }
    if !failed.is_empty() {
        return Err(RunError::CheckFailed(format!("leaves {}", failed.join(", "))));
    }
    Ok(RunSummary {
        task: Task::Gradcheck,
        out: config.out.clone(),
        final_loss: None,
        iterations: 0,
        termination: None,
        pixel_mse: None,
        files: Vec::new(),
    })
}

/// Runs a resolved configuration. `settings` carries the explicitly requested
/// options, used to detect conflicts with a loaded checkpoint.
pub fn run(config: &RunConfig, settings: &Settings) -> Result<RunSummary> {
    match config.task {
        Task::Render => render_task(config, settings),
        Task::Gradcheck => gradcheck_task(config),
        Task::Interpolate if config.checkpoint.is_some() => frames_from_checkpoint(config, settings),
        _ => match config.precision {
            Precision::F32 => train_task::<f32>(config),
            Precision::F64 => train_task::<f64>(config),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_endpoints_are_exact() {
        assert_eq!(frame_z(0, 5), [1.0, 0.0]);
        assert_eq!(frame_z(4, 5), [0.0, 1.0]);
        let [a, b] = frame_z(2, 5);
        assert!((a - b).abs() < 1e-15);
        assert!((a * a + b * b - 1.0).abs() < 1e-15);
        assert_eq!(frame_z(0, 1), [1.0, 0.0]);
    }

    #[test]
    fn loss_csv_layout() {
        let t = [
            TraceEntry {
                iter: 0,
                loss: 2.0,
                grad_norm: 1.5,
                step: 0.0,
            },
            TraceEntry {
                iter: 1,
                loss: 0.25,
                grad_norm: 0.5,
                step: 1.0,
            },
        ];
        assert_eq!(loss_csv(&t), "iter,loss,grad_norm,step\n0,2,1.5,0\n1,0.25,0.5,1\n");
    }

    #[test]
    fn local_variance_of_flat_image_is_zero() {
        let flat = Tensor::<f64>::full(&[4, 4, 3], 0.3);
        assert!(mean_local_variance(&flat).unwrap().abs() < 1e-15);
        let noisy = synthetic_target(8, 8);
        assert!(mean_local_variance(&noisy).unwrap() > 0.0);
    }

    #[test]
    fn pixel_mse_of_constant_offset() {
        let a = Tensor::<f64>::full(&[2, 2, 3], 0.5);
        let b = Tensor::<f64>::full(&[2, 2, 3], 0.25);
        assert_eq!(pixel_mse(&a, &b), 0.0625);
    }
}
