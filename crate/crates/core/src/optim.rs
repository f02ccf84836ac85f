//! Limited-memory BFGS with a strong Wolfe line search.

use std::collections::VecDeque;

use thiserror::Error;

use crate::error::{Error as CoreError, Result};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    #[error("objective is not finite at the starting point")]
    NonFiniteStart,
    #[error("search direction is not a descent direction (slope {0})")]
    NotDescent(f64),
    #[error("line search found no decrease after {0} evaluations")]
    NoDecrease(usize),
    #[error("gradient has {got} entries, expected {expected}")]
    GradientLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOptions {
    /// Number of stored `(s, y)` pairs.
    pub history: usize,
    pub max_iters: usize,
    /// Stop once the gradient max-norm is at or below this.
    pub grad_tolerance: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search_steps: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            history: 20,
            max_iters: 100,
            grad_tolerance: 1e-10,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search_steps: 25,
        }
    }
}

impl LbfgsOptions {
    pub fn validate(&self) -> Result<(), OptimError> {
        let bad = |m: &str| Err(OptimError::InvalidOptions(m.into()));
        if self.history == 0 {
            return bad("history must be at least 1");
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return bad("need 0 < c1 < c2 < 1");
        }
        if self.max_line_search_steps == 0 {
            return bad("max_line_search_steps must be at least 1");
        }
        if !(self.grad_tolerance >= 0.0) {
            return bad("grad_tolerance must be non-negative");
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn max_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Ring buffer of curvature pairs.
#[derive(Debug, Clone)]
pub struct LbfgsState {
    capacity: usize,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
    pub iteration: usize,
    pub last_loss: f64,
}

impl LbfgsState {
    pub fn new(capacity: usize) -> Self {
        LbfgsState {
            capacity,
            s: VecDeque::with_capacity(capacity),
            y: VecDeque::with_capacity(capacity),
            rho: VecDeque::with_capacity(capacity),
            iteration: 0,
            last_loss: f64::NAN,
        }
    }

    pub fn len(&self) -> usize {
        self.s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.s.is_empty()
    }

    /// Stores a pair unless it violates the curvature condition `s·y > 0`.
    /// Returns whether the pair was kept.
    pub fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        let sy = dot(&s, &y);
        let scale = dot(&s, &s).sqrt() * dot(&y, &y).sqrt();
        if !sy.is_finite() || sy <= f64::EPSILON * scale {
            return false;
        }
        if self.s.len() == self.capacity {
            self.s.pop_front();
            self.y.pop_front();
            self.rho.pop_front();
        }
        self.s.push_back(s);
        self.y.push_back(y);
        self.rho.push_back(1.0 / sy);
        true
    }
}

/// Two-loop recursion: `−H·g` with `H₀ = γI`, `γ = s·y / y·y` of the newest
/// pair. Falls back to `−g` if the result is not a descent direction.
pub fn two_loop_direction(state: &LbfgsState, gradient: &[f64]) -> Vec<f64> {
    let k = state.len();
    let mut q = gradient.to_vec();
    let mut alpha = vec![0.0; k];
    for i in (0..k).rev() {
        alpha[i] = state.rho[i] * dot(&state.s[i], &q);
        axpy(-alpha[i], &state.y[i], &mut q);
    }
    if let (Some(s), Some(y)) = (state.s.back(), state.y.back()) {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for i in 0..k {
        let beta = state.rho[i] * dot(&state.y[i], &q);
        axpy(alpha[i] - beta, &state.s[i], &mut q);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    let slope = dot(&q, gradient);
    if !(slope < 0.0) || q.iter().any(|v| !v.is_finite()) {
        return gradient.iter().map(|g| -g).collect();
    }
    q
}

#[derive(Debug, Clone)]
pub struct LineSearchResult {
    pub step: f64,
    pub x: Vec<f64>,
    pub loss: f64,
    pub gradient: Vec<f64>,
    pub evaluations: usize,
    /// False when only sufficient decrease could be established.
    pub strong_wolfe: bool,
}

#[derive(Clone)]
struct Trial {
    step: f64,
    x: Vec<f64>,
    loss: f64,
    gradient: Vec<f64>,
    slope: f64,
}

/// Minimizer of the cubic through `(a, fa, da)` and `(b, fb, db)`.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !disc.is_finite() || disc < 0.0 {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = db - da + 2.0 * d2;
    if denom == 0.0 {
        return None;
    }
    let t = b - (b - a) * (db + d2 - d1) / denom;
    t.is_finite().then_some(t)
}

/// Minimizer of the line model when the data at `0` and `t.step` is
/// consistent with a quadratic and the minimizer is not `t.step` already.
fn quadratic_step(loss0: f64, slope0: f64, t: &Trial) -> Option<f64> {
    let a = t.step;
    let trapezoid = loss0 + 0.5 * a * (slope0 + t.slope);
    let scale = loss0.abs() + t.loss.abs() + a * (slope0.abs() + t.slope.abs());
    if (t.loss - trapezoid).abs() > 1e-9 * scale || t.slope <= slope0 {
        return None;
    }
    let step = a * slope0 / (slope0 - t.slope);
    ((step - a).abs() > 1e-6 * a && step.is_finite() && step > 0.0).then_some(step)
}

/// Strong Wolfe line search along `direction` starting at `initial_step`.
///
/// `loss0`/`grad0` are the objective at `x`. Non-finite objective values are
/// treated as an overshoot and shrink the bracket.
#[allow(clippy::too_many_arguments)]
pub fn line_search<F>(
    objective: &mut F,
    x: &[f64],
    loss0: f64,
    grad0: &[f64],
    direction: &[f64],
    initial_step: f64,
    opts: &LbfgsOptions,
) -> Result<LineSearchResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let slope0 = dot(grad0, direction);
    if !(slope0 < 0.0) {
        return Err(OptimError::NotDescent(slope0).into());
    }
    let (c1, c2) = (opts.wolfe_c1, opts.wolfe_c2);
    let mut evaluations = 0;
    let mut best: Option<Trial> = None;

    let mut eval = |step: f64, evaluations: &mut usize| -> Result<Trial> {
        *evaluations += 1;
        let mut xt = x.to_vec();
        axpy(step, direction, &mut xt);
        let (loss, gradient) = match objective(&xt) {
            Ok(v) => v,
            Err(CoreError::NonFinite { .. }) => (f64::INFINITY, vec![f64::NAN; x.len()]),
            Err(e) => return Err(e),
        };
        if gradient.len() != x.len() {
            return Err(OptimError::GradientLength {
                got: gradient.len(),
                expected: x.len(),
            }
            .into());
        }
        let slope = dot(&gradient, direction);
        Ok(Trial {
            step,
            x: xt,
            loss,
            gradient,
            slope,
        })
    };
    let sufficient =
        |t: &Trial| t.loss.is_finite() && t.loss < loss0 && t.loss <= loss0 + c1 * t.step * slope0;
    let curvature = |t: &Trial| t.slope.is_finite() && t.slope.abs() <= -c2 * slope0;
    let finish = |t: Trial, evaluations: usize, strong_wolfe: bool| LineSearchResult {
        step: t.step,
        x: t.x,
        loss: t.loss,
        gradient: t.gradient,
        evaluations,
        strong_wolfe,
    };
    let keep_best = |best: &mut Option<Trial>, t: &Trial| {
        if sufficient(t) && best.as_ref().is_none_or(|b| t.loss < b.loss) {
            *best = Some(t.clone());
        }
    };

    let origin = Trial {
        step: 0.0,
        x: x.to_vec(),
        loss: loss0,
        gradient: grad0.to_vec(),
        slope: slope0,
    };
    let mut prev = origin;
    let mut step = initial_step;
    // bracketing phase
    let (mut lo, mut hi) = loop {
        let t = eval(step, &mut evaluations)?;
        keep_best(&mut best, &t);
        if !sufficient(&t) || (prev.step > 0.0 && t.loss >= prev.loss) {
            break (prev, t);
        }
        if curvature(&t) {
            if evaluations < opts.max_line_search_steps {
                if let Some(step) = quadratic_step(loss0, slope0, &t) {
                    let r = eval(step, &mut evaluations)?;
                    if sufficient(&r) && curvature(&r) && r.loss < t.loss {
                        return Ok(finish(r, evaluations, true));
                    }
                }
            }
            return Ok(finish(t, evaluations, true));
        }
        if t.slope >= 0.0 {
            break (t, prev);
        }
        if evaluations >= opts.max_line_search_steps {
            return best
                .map(|b| finish(b, evaluations, false))
                .ok_or_else(|| OptimError::NoDecrease(evaluations).into());
        }
        let guess = cubic_min(prev.step, prev.loss, prev.slope, t.step, t.loss, t.slope);
        let next = guess
            .filter(|g| *g > t.step)
            .unwrap_or(4.0 * t.step)
            .clamp(1.1 * t.step, 10.0 * t.step);
        prev = t;
        step = next;
    };
    // zoom phase: lo satisfies sufficient decrease and has the lowest loss so far
    while evaluations < opts.max_line_search_steps {
        let (a, b) = (lo.step.min(hi.step), lo.step.max(hi.step));
        let width = b - a;
        let guess = if hi.loss.is_finite() && hi.slope.is_finite() {
            cubic_min(lo.step, lo.loss, lo.slope, hi.step, hi.loss, hi.slope)
        } else {
            None
        };
        let margin = 0.01 * width;
        let step = match guess {
            Some(g) if g > a && g < b => g.clamp(a + margin, b - margin),
            _ => 0.5 * (a + b),
        };
        if step == a || step == b {
            break;
        }
        let t = eval(step, &mut evaluations)?;
        keep_best(&mut best, &t);
        if !sufficient(&t) || t.loss >= lo.loss {
            hi = t;
        } else {
            if curvature(&t) {
                return Ok(finish(t, evaluations, true));
            }
            if t.slope * (hi.step - lo.step) >= 0.0 {
                hi = lo;
            }
            lo = t;
        }
    }
    best.map(|b| finish(b, evaluations, false))
        .ok_or_else(|| OptimError::NoDecrease(evaluations).into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub loss: f64,
    /// Gradient max-norm.
    pub grad_norm: f64,
    /// Accepted step length (0 for the starting point).
    pub step: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradTolerance,
    MaxIters,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Starting point followed by every accepted iterate.
    pub trace: Vec<TraceEntry>,
    pub termination: Termination,
    pub evaluations: usize,
}

/// Minimizes `objective` from `x0`.
pub fn minimize<F>(objective: F, x0: Vec<f64>, opts: &LbfgsOptions) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    minimize_with(objective, x0, opts, |_| {})
}

/// As [`minimize`], calling `observe` with each trace entry as it is recorded.
pub fn minimize_with<F, O>(
    mut objective: F,
    x0: Vec<f64>,
    opts: &LbfgsOptions,
    mut observe: O,
) -> Result<Minimum>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    O: FnMut(&TraceEntry),
{
    opts.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteStart.into());
    }
    let (mut loss, mut grad) = match objective(&x0) {
        Ok(v) => v,
        Err(CoreError::NonFinite { .. }) => return Err(OptimError::NonFiniteStart.into()),
        Err(e) => return Err(e),
    };
    if grad.len() != x0.len() {
        return Err(OptimError::GradientLength {
            got: grad.len(),
            expected: x0.len(),
        }
        .into());
    }
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteStart.into());
    }
    let mut x = x0;
    let mut state = LbfgsState::new(opts.history);
    state.last_loss = loss;
    let mut evaluations = 1;
    let start = TraceEntry {
        iter: 0,
        loss,
        grad_norm: max_norm(&grad),
        step: 0.0,
    };
    observe(&start);
    let mut trace = vec![start];
    let mut termination = Termination::MaxIters;
    if start.grad_norm <= opts.grad_tolerance {
        termination = Termination::GradTolerance;
    } else {
        for iter in 1..=opts.max_iters {
            let direction = two_loop_direction(&state, &grad);
            let initial = if state.is_empty() {
                (1.0 / dot(&grad, &grad).sqrt()).min(1.0)
            } else {
                1.0
            };
            let ls = match line_search(&mut objective, &x, loss, &grad, &direction, initial, opts) {
                Ok(ls) => ls,
                Err(CoreError::Optim(OptimError::NoDecrease(n))) => {
                    evaluations += n;
                    termination = Termination::LineSearchFailed;
                    break;
                }
                Err(CoreError::Optim(OptimError::NotDescent(_))) => {
                    termination = Termination::LineSearchFailed;
                    break;
                }
                Err(e) => return Err(e),
            };
            evaluations += ls.evaluations;
            let s: Vec<f64> = ls.x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = ls.gradient.iter().zip(&grad).map(|(a, b)| a - b).collect();
            state.push_pair(s, y);
            x = ls.x;
            loss = ls.loss;
            grad = ls.gradient;
            state.iteration = iter;
            state.last_loss = loss;
            let entry = TraceEntry {
                iter,
                loss,
                grad_norm: max_norm(&grad),
                step: ls.step,
            };
            observe(&entry);
            trace.push(entry);
            if entry.grad_norm <= opts.grad_tolerance {
                termination = Termination::GradTolerance;
                break;
            }
        }
    }
    Ok(Minimum {
        x,
        loss,
        gradient: grad,
        trace,
        termination,
        evaluations,
    })
}
