//! Localized inverse DFT synthesis.
//!
//! Every pixel carries its own `W_F × H_F` grid of complex coefficients per
//! colour channel. The pixel value is the real part of the inverse DFT of
//! that grid evaluated at the pixel's own position:
//!
//! ```text
//! I_c(x, y) = 1/√(W_F·H_F) · Σ_{ωx,ωy} Re·cos(θ) − Im·sin(θ),
//! θ = 2π(ωx·p_x/W_F + ωy·p_y/H_F)
//! ```
//!
//! where `(p_x, p_y)` are continuous pixel coordinates at the optimization
//! resolution. Frequencies run over `0..W_F` and `0..H_F` only; no conjugate
//! symmetry is imposed, so the imaginary part of the full complex sum is
//! simply never formed.

use std::f64::consts::TAU;

use num_complex::Complex64;

use crate::error::{shape_err, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Real, Tensor};

/// Continuous pixel coordinates feeding the synthesis phase.
///
/// The grid is separable, so one coordinate per column and one per row is
/// stored. At the base resolution `xs[i] == i`; a grid of `n` samples spans
/// the same extent, `xs[j] = j·(base_w − 1)/(n − 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCoords {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub base_w: usize,
    pub base_h: usize,
}

fn axis(samples: usize, base: usize) -> Vec<f64> {
    if samples <= 1 {
        return vec![0.0; samples];
    }
    let denom = (samples - 1) as f64;
    (0..samples)
        .map(|j| (j * (base.max(1) - 1)) as f64 / denom)
        .collect()
}

impl PhaseCoords {
    /// Integer pixel positions at the optimization resolution.
    pub fn base(width: usize, height: usize) -> Self {
        Self::resampled(width, height, width, height)
    }

    /// `width × height` samples spanning a `base_w × base_h` image.
    pub fn resampled(width: usize, height: usize, base_w: usize, base_h: usize) -> Self {
        PhaseCoords {
            xs: axis(width, base_w),
            ys: axis(height, base_h),
            base_w,
            base_h,
        }
    }

    pub fn width(&self) -> usize {
        self.xs.len()
    }

    pub fn height(&self) -> usize {
        self.ys.len()
    }

    /// Rows `y0..y1` only.
    pub fn rows(&self, y0: usize, y1: usize) -> Self {
        PhaseCoords {
            xs: self.xs.clone(),
            ys: self.ys[y0..y1].to_vec(),
            base_w: self.base_w,
            base_h: self.base_h,
        }
    }
}

/// Per-pixel coefficient tensor `[H, W, 2·3·W_F·H_F]`.
///
/// Channel order is colour-major, then `ωy`, then `ωx`, then `{re, im}`; see
/// [`CoefficientField::channel`].
#[derive(Debug, Clone, PartialEq)]
pub struct CoefficientField<T> {
    pub tensor: Tensor<T>,
    pub freq_w: usize,
    pub freq_h: usize,
}

/// Channel count of a coefficient field.
pub fn coefficient_channels(freq_w: usize, freq_h: usize) -> usize {
    2 * 3 * freq_w * freq_h
}

impl<T: Real> CoefficientField<T> {
    /// Channel index of `(colour, ωx, ωy, part)` with `part` 0 = real, 1 = imaginary.
    pub fn channel(&self, colour: usize, wx: usize, wy: usize, part: usize) -> usize {
        channel_index(self.freq_w, self.freq_h, colour, wx, wy, part)
    }

    /// `(re, im)` at pixel `(x, y)`.
    pub fn coefficient(&self, y: usize, x: usize, colour: usize, wx: usize, wy: usize) -> (T, T) {
        (
            self.tensor.at3(y, x, self.channel(colour, wx, wy, 0)),
            self.tensor.at3(y, x, self.channel(colour, wx, wy, 1)),
        )
    }
}

pub fn channel_index(
    freq_w: usize,
    freq_h: usize,
    colour: usize,
    wx: usize,
    wy: usize,
    part: usize,
) -> usize {
    ((colour * freq_h + wy) * freq_w + wx) * 2 + part
}

/// Relabels a raw network head output as a coefficient field. No arithmetic.
pub fn reshape_head<T: Real>(
    raw: Tensor<T>,
    freq_w: usize,
    freq_h: usize,
) -> Result<CoefficientField<T>> {
    let (_, _, c) = raw.dims3()?;
    let expected = coefficient_channels(freq_w, freq_h);
    if c != expected || freq_w == 0 || freq_h == 0 {
        return Err(shape_err(
            "reshape_head",
            format!("{c} channels, expected 2·3·{freq_w}·{freq_h} = {expected}"),
        ));
    }
    Ok(CoefficientField {
        tensor: raw,
        freq_w,
        freq_h,
    })
}

/// Phase in turns for frequency `(wx, wy)` at `(px, py)`.
///
/// Integer coordinates are reduced exactly modulo the period so that
/// samples one period apart share bit-identical basis values.
fn phase_turns(wx: usize, wy: usize, px: f64, py: f64, freq_w: usize, freq_h: usize) -> f64 {
    let integral = px.fract() == 0.0 && py.fract() == 0.0 && px >= 0.0 && py >= 0.0;
    if integral {
        let period = (freq_w * freq_h) as u128;
        let n = (wx as u128 * px as u128 * freq_h as u128
            + wy as u128 * py as u128 * freq_w as u128)
            % period;
        n as f64 / period as f64
    } else {
        (wx as f64 * px / freq_w as f64).fract() + (wy as f64 * py / freq_h as f64).fract()
    }
}

/// Precomputed synthesis operator for one coordinate grid.
///
/// Synthesis is linear in the coefficients: an elementwise product with a
/// fixed cos/−sin basis followed by a per-colour channel sum, the latter done
/// as a 1×1 convolution with a constant 0/1 matrix.
#[derive(Debug, Clone)]
pub struct LocalizedIdft<T> {
    freq_w: usize,
    freq_h: usize,
    basis: Tensor<T>,
    group_sum: Tensor<T>,
}

impl<T: Real> LocalizedIdft<T> {
    pub fn new(phase: &PhaseCoords, freq_w: usize, freq_h: usize) -> Result<Self> {
        if freq_w == 0 || freq_h == 0 {
            return Err(shape_err("localized_idft", "empty frequency grid"));
        }
        let (w, h) = (phase.width(), phase.height());
        let channels = coefficient_channels(freq_w, freq_h);
        let per_colour = 2 * freq_w * freq_h;
        let norm = 1.0 / ((freq_w * freq_h) as f64).sqrt();

        let mut cos_sin = vec![0.0f64; per_colour];
        let mut basis = Vec::with_capacity(w * h * channels);
        for &py in &phase.ys {
            for &px in &phase.xs {
                for wy in 0..freq_h {
                    for wx in 0..freq_w {
                        let theta = TAU * phase_turns(wx, wy, px, py, freq_w, freq_h);
                        let k = (wy * freq_w + wx) * 2;
                        cos_sin[k] = theta.cos() * norm;
                        cos_sin[k + 1] = -theta.sin() * norm;
                    }
                }
                for _ in 0..3 {
                    basis.extend(cos_sin.iter().map(|&v| T::of(v)));
                }
            }
        }
        let mut group_sum = Tensor::zeros(&[channels, 3]);
        for ch in 0..channels {
            group_sum.data_mut()[ch * 3 + ch / per_colour] = T::one();
        }
        Ok(LocalizedIdft {
            freq_w,
            freq_h,
            basis: Tensor::new(vec![h, w, channels], basis)?,
            group_sum,
        })
    }

    pub fn freq_w(&self) -> usize {
        self.freq_w
    }

    pub fn freq_h(&self) -> usize {
        self.freq_h
    }

    /// Adds the synthesis of a coefficient node `[H, W, 6·W_F·H_F]` to the graph.
    pub fn node(&self, graph: &mut Graph<T>, coefficients: NodeId) -> Result<NodeId> {
        let basis = graph.constant(self.basis.clone());
        let summed = graph.constant(self.group_sum.clone());
        let zero = graph.constant(Tensor::zeros(&[3]));
        let weighted = graph.mul(coefficients, basis)?;
        graph.conv1x1(weighted, summed, zero)
    }

    pub fn apply(&self, coefficients: &CoefficientField<T>) -> Result<Tensor<T>> {
        if coefficients.freq_w != self.freq_w || coefficients.freq_h != self.freq_h {
            return Err(shape_err(
                "synthesize_localized",
                format!(
                    "field is {}x{}, operator {}x{}",
                    coefficients.freq_w, coefficients.freq_h, self.freq_w, self.freq_h
                ),
            ));
        }
        let mut graph = Graph::new();
        let c = graph.constant(coefficients.tensor.clone());
        let out = self.node(&mut graph, c)?;
        Ok(graph.value(out)?.clone())
    }
}

/// Pre-sigmoid RGB `[H, W, 3]` from a coefficient field.
pub fn synthesize_localized<T: Real>(
    coefficients: &CoefficientField<T>,
    phase: &PhaseCoords,
) -> Result<Tensor<T>> {
    let (h, w, _) = coefficients.tensor.dims3()?;
    if h != phase.height() || w != phase.width() {
        return Err(shape_err(
            "synthesize_localized",
            format!("field {}x{}, phase {}x{}", w, h, phase.width(), phase.height()),
        ));
    }
    LocalizedIdft::new(phase, coefficients.freq_w, coefficients.freq_h)?.apply(coefficients)
}

/// Direct O(N²) inverse 2D DFT with `1/√(WH)` normalization.
///
/// `coeffs[ωy·width + ωx]`; returns `image[y·width + x]`. Reference only.
pub fn brute_force_idft(coeffs: &[Complex64], width: usize, height: usize) -> Vec<Complex64> {
    dft2(coeffs, width, height, 1.0)
}

/// Forward counterpart of [`brute_force_idft`] (unitary, so the pair round-trips).
pub fn brute_force_dft(image: &[Complex64], width: usize, height: usize) -> Vec<Complex64> {
    dft2(image, width, height, -1.0)
}

fn dft2(input: &[Complex64], width: usize, height: usize, sign: f64) -> Vec<Complex64> {
    assert_eq!(input.len(), width * height);
    let norm = 1.0 / ((width * height) as f64).sqrt();
    let mut out = vec![Complex64::new(0.0, 0.0); width * height];
    for y in 0..height {
        for x in 0..width {
            let mut acc = Complex64::new(0.0, 0.0);
            for wy in 0..height {
                for wx in 0..width {
                    let turns = ((wx * x) % width) as f64 / width as f64
                        + ((wy * y) % height) as f64 / height as f64;
                    acc += input[wy * width + wx] * Complex64::from_polar(1.0, sign * TAU * turns);
                }
            }
            out[y * width + x] = acc * norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn field(h: usize, w: usize, fw: usize, fh: usize, f: impl Fn(usize, usize, usize) -> f64) -> CoefficientField<f64> {
        let c = coefficient_channels(fw, fh);
        let t = Tensor::from_fn(&[h, w, c], |i| f(i / (w * c), (i / c) % w, i % c));
        reshape_head(t, fw, fh).unwrap()
    }

    #[test]
    fn dc_term_is_scaled_by_normalization() {
        let f = field(3, 5, 4, 4, |_, _, ch| if ch == 0 { 2.0 } else { 0.0 });
        let img = synthesize_localized(&f, &PhaseCoords::base(5, 3)).unwrap();
        for y in 0..3 {
            for x in 0..5 {
                assert!((img.at3(y, x, 0) - 0.5).abs() < 1e-15);
                assert_eq!(img.at3(y, x, 1), 0.0);
            }
        }
    }

    #[test]
    fn quarter_period_cosine() {
        // (ωx, ωy) = (1, 0), Re = 1, W_F = H_F = 4
        let f = field(1, 3, 4, 4, |_, _, ch| if ch == channel_index(4, 4, 0, 1, 0, 0) { 1.0 } else { 0.0 });
        let img = synthesize_localized(&f, &PhaseCoords::base(3, 1)).unwrap();
        assert!((img.at3(0, 0, 0) - 0.25).abs() < 1e-15);
        assert!(img.at3(0, 1, 0).abs() < 1e-15);
        assert!((img.at3(0, 2, 0) + 0.25).abs() < 1e-15);
    }

    #[test]
    fn reshape_rejects_wrong_extent() {
        assert!(reshape_head(Tensor::<f64>::zeros(&[2, 2, 5]), 1, 1).is_err());
        let f = reshape_head(Tensor::<f64>::zeros(&[2, 2, 6]), 1, 1).unwrap();
        assert_eq!(f.tensor.shape(), &[2, 2, 6]);
    }

    #[test]
    fn channel_order_matches_enumeration() {
        // Enumerate colour-major, then ωy, ωx, {re, im} and compare positions.
        let (fw, fh) = (3, 2);
        let f = field(1, 1, fw, fh, |_, _, _| 0.0);
        let mut expected = 0;
        for colour in 0..3 {
            for wy in 0..fh {
                for wx in 0..fw {
                    for part in 0..2 {
                        assert_eq!(f.channel(colour, wx, wy, part), expected);
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(expected, coefficient_channels(fw, fh));
    }

    #[test]
    fn idft_of_zero_and_dc() {
        let zero = vec![Complex64::new(0.0, 0.0); 6];
        assert!(brute_force_idft(&zero, 3, 2).iter().all(|v| v.norm() == 0.0));

        let mut dc = vec![Complex64::new(0.0, 0.0); 4];
        dc[0] = Complex64::new(3.0, 0.0);
        for v in brute_force_idft(&dc, 2, 2) {
            assert!((v - Complex64::new(1.5, 0.0)).norm() < 1e-15);
        }
    }

    #[test]
    fn resampled_axis_hits_base_pixels() {
        let p = PhaseCoords::resampled(9, 1, 5, 1);
        assert_eq!(p.xs, vec![0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]);
        assert_eq!(PhaseCoords::base(4, 1).xs, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(PhaseCoords::base(1, 1).xs, vec![0.0]);
    }
}
