//! Central finite-difference verification of analytic gradients (64-bit only).

use rand::seq::index;
use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    /// Pass iff the maximum relative error is below this.
    pub tolerance: f64,
    /// Step is `rel_step · max(1, |x|)`.
    pub rel_step: f64,
    /// Coordinates probed per leaf; larger leaves are subsampled.
    pub max_samples: usize,
    /// Denominator floor for relative errors and the kink test.
    pub abs_floor: f64,
    /// A coordinate whose one-sided slopes differ by more than this fraction
    /// of their magnitude sits on a kink (relu at 0, max-pool tie) and is
    /// excluded from the error statistic.
    pub kink_tolerance: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            tolerance: 1e-4,
            rel_step: 1e-5,
            max_samples: 32,
            abs_floor: 1e-6,
            kink_tolerance: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub leaf: NodeId,
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates flagged as non-differentiable and skipped.
    pub excluded: usize,
    pub passed: bool,
}

fn loss_value(graph: &mut Graph<f64>, loss: NodeId) -> Result<f64> {
    let v = graph.forward_eval(loss)?;
    v.item().ok_or_else(|| Error::NotScalar(v.shape().to_vec()))
}

/// Compares the analytic gradient of `loss` w.r.t. `leaf` against central
/// differences. The graph is restored to its original leaf value on return.
pub fn gradient_check(
    graph: &mut Graph<f64>,
    loss: NodeId,
    leaf: NodeId,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if !graph.is_trainable(leaf) {
        return Err(Error::InvalidArgument(format!("node {leaf} is not a trainable leaf")));
    }
    let analytic = graph
        .backward(loss)?
        .get(leaf)
        .cloned()
        .expect("trainable leaf has a gradient");
    let original = graph.value(leaf)?.clone();
    let f0 = loss_value(graph, loss)?;

    let n = original.len();
    let picks: Vec<usize> = if n <= opts.max_samples {
        (0..n).collect()
    } else {
        let mut rng = Xoshiro256StarStar::seed_from_u64(opts.seed ^ leaf as u64);
        let mut v = index::sample(&mut rng, n, opts.max_samples).into_vec();
        v.sort_unstable();
        v
    };

    let mut report = GradCheckReport {
        leaf,
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        excluded: 0,
        passed: true,
    };
    let probe = |i: usize, delta: f64, graph: &mut Graph<f64>| -> Result<f64> {
        let mut t = original.clone();
        t.data_mut()[i] += delta;
        graph.set_leaf(leaf, t)?;
        loss_value(graph, loss)
    };
    let mut outcome = Ok(());
    for &i in &picks {
        let x = original.data()[i];
        let h = opts.rel_step * x.abs().max(1.0);
        let (fp, fm) = match (probe(i, h, graph), probe(i, -h, graph)) {
            (Ok(a), Ok(b)) => (a, b),
            (Err(e), _) | (_, Err(e)) => {
                outcome = Err(e);
                break;
            }
        };
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        if (forward - backward).abs()
            > opts.kink_tolerance * (forward.abs() + backward.abs()) + opts.abs_floor
        {
            report.excluded += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.abs_floor);
        report.checked += 1;
        if report.worst_index.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = Some(i);
        }
    }
    graph.set_leaf(leaf, original)?;
    graph.recompute()?;
    outcome?;
    report.passed = report.max_rel_error < opts.tolerance;
    Ok(report)
}

/// Runs [`gradient_check`] for every trainable leaf.
pub fn gradient_check_all(
    graph: &mut Graph<f64>,
    loss: NodeId,
    opts: &GradCheckOptions,
) -> Result<Vec<GradCheckReport>> {
    graph
        .trainable_leaves()
        .into_iter()
        .map(|leaf| gradient_check(graph, loss, leaf, opts))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_op_is_exact() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
        let s = g.scale(x, 3.25).unwrap();
        let loss = g.reduce_sum(s).unwrap();
        let r = gradient_check(&mut g, loss, x, &GradCheckOptions::default()).unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 4);
    }

    #[test]
    fn maxpool_tie_is_excluded() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![2, 2, 1], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let p = g.max_pool2x2(x).unwrap();
        let loss = g.reduce_sum(p).unwrap();
        let r = gradient_check(&mut g, loss, x, &GradCheckOptions::default()).unwrap();
        assert_eq!(r.excluded, 2);
        assert_eq!(r.checked, 2);
        assert!(r.passed);
    }

    #[test]
    fn restores_leaf_after_check() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_fn(&[3], |i| i as f64));
        let sq = g.square(x).unwrap();
        let loss = g.reduce_sum(sq).unwrap();
        let r = gradient_check(&mut g, loss, x, &GradCheckOptions::default()).unwrap();
        assert!(r.passed);
        // the leaf value is restored
        assert_eq!(g.value(x).unwrap().data(), &[0.0, 1.0, 2.0]);
        assert_eq!(g.value(loss).unwrap().data(), &[5.0]);
    }

    #[test]
    fn rejects_constant_leaf() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::<f64>::zeros(&[1]));
        let p = g.param(Tensor::<f64>::zeros(&[1]));
        let s = g.add(c, p).unwrap();
        let loss = g.reduce_sum(s).unwrap();
        assert!(gradient_check(&mut g, loss, c, &GradCheckOptions::default()).is_err());
    }
}
