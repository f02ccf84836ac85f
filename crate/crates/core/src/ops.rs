//! Forward kernels and vector-Jacobian products for every graph op.
//!
//! Convolutions use cross-correlation orientation (no kernel flip) with
//! weights laid out `[Cin, Cout]` (1×1) and `[3, 3, Cin, Cout]` (3×3).

use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

fn same_shape<T: Real>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

pub(crate) fn zip<T: Real>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    same_shape(op, a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn check_conv_params<T: Real>(
    op: &'static str,
    cin: usize,
    w: &Tensor<T>,
    w_shape: &[usize],
    b: &Tensor<T>,
) -> Result<usize> {
    let cout = *w.shape().last().unwrap_or(&0);
    let mut expected = w_shape.to_vec();
    expected.push(cout);
    if w.shape() != expected.as_slice() {
        return Err(shape_err(
            op,
            format!("weights {:?}, expected {:?} for Cin={}", w.shape(), expected, cin),
        ));
    }
    if b.shape() != [cout] {
        return Err(shape_err(
            op,
            format!("bias {:?}, expected [{}]", b.shape(), cout),
        ));
    }
    Ok(cout)
}

/// Rows of a `[.., C]` tensor filled with the bias.
fn bias_rows<T: Real>(rows: usize, b: &Tensor<T>) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * b.len());
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    out
}

fn column_sums<T: Real>(rows: usize, cols: usize, data: &[T]) -> Vec<T> {
    let mut sums = vec![T::zero(); cols];
    for row in data.chunks_exact(cols).take(rows) {
        for (s, &v) in sums.iter_mut().zip(row) {
            *s = *s + v;
        }
    }
    sums
}

pub(crate) fn conv1x1<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, wd, cin) = x.dims3()?;
    let cout = check_conv_params("conv1x1", cin, w, &[cin], b)?;
    let pixels = h * wd;
    let mut out = bias_rows(pixels, b);
    T::gemm(pixels, cin, cout, x.data(), false, w.data(), false, &mut out, true);
    Tensor::new(vec![h, wd, cout], out)
}

pub(crate) fn conv1x1_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[1];
    let pixels = h * wd;
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); pixels * cin];
        T::gemm(pixels, cout, cin, dy.data(), false, w.data(), true, &mut dx, false);
        Tensor::new(x.shape().to_vec(), dx).expect("shape")
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); cin * cout];
        T::gemm(cin, pixels, cout, x.data(), true, dy.data(), false, &mut dw, false);
        Tensor::new(w.shape().to_vec(), dw).expect("shape")
    });
    let db = need[2].then(|| {
        Tensor::new(vec![cout], column_sums(pixels, cout, dy.data())).expect("shape")
    });
    [dx, dw, db]
}

/// `[H·W, 9·C]` patch matrix with zero padding; column order is (ky, kx, c).
fn im2col<T: Real>(x: &Tensor<T>) -> Vec<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let k = 9 * c;
    let mut cols = vec![T::zero(); h * w * k];
    let src = x.data();
    for y in 0..h {
        for xx in 0..w {
            let row = &mut cols[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let from = (sy as usize * w + sx as usize) * c;
                    let to = (ky * 3 + kx) * c;
                    row[to..to + c].copy_from_slice(&src[from..from + c]);
                }
            }
        }
    }
    cols
}

fn col2im<T: Real>(cols: &[T], h: usize, w: usize, c: usize) -> Vec<T> {
    let k = 9 * c;
    let mut dx = vec![T::zero(); h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let row = &cols[(y * w + xx) * k..(y * w + xx + 1) * k];
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = xx as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let to = (sy as usize * w + sx as usize) * c;
                    let from = (ky * 3 + kx) * c;
                    for ch in 0..c {
                        dx[to + ch] = dx[to + ch] + row[from + ch];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn conv3x3<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, wd, cin) = x.dims3()?;
    if h == 0 || wd == 0 {
        return Err(shape_err("conv3x3_same", "empty image"));
    }
    let cout = check_conv_params("conv3x3_same", cin, w, &[3, 3, cin], b)?;
    let cols = im2col(x);
    let pixels = h * wd;
    let mut out = bias_rows(pixels, b);
    T::gemm(pixels, 9 * cin, cout, &cols, false, w.data(), false, &mut out, true);
    Tensor::new(vec![h, wd, cout], out)
}

pub(crate) fn conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> [Option<Tensor<T>>; 3] {
    let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let cout = w.shape()[3];
    let pixels = h * wd;
    let k = 9 * cin;
    let dx = need[0].then(|| {
        let mut dcols = vec![T::zero(); pixels * k];
        T::gemm(pixels, cout, k, dy.data(), false, w.data(), true, &mut dcols, false);
        Tensor::new(x.shape().to_vec(), col2im(&dcols, h, wd, cin)).expect("shape")
    });
    let dw = need[1].then(|| {
        let cols = im2col(x);
        let mut dw = vec![T::zero(); k * cout];
        T::gemm(k, pixels, cout, &cols, true, dy.data(), false, &mut dw, false);
        Tensor::new(w.shape().to_vec(), dw).expect("shape")
    });
    let db = need[2].then(|| {
        Tensor::new(vec![cout], column_sums(pixels, cout, dy.data())).expect("shape")
    });
    [dx, dw, db]
}

/// 2×2 stride-2 pooling with shrinking windows on ragged edges.
///
/// For max pooling the returned indices hold, per output element, the flat
/// input index of the first maximal element in row-major window order.
pub(crate) fn pool2x2<T: Real>(x: &Tensor<T>, max: bool) -> Result<(Tensor<T>, Vec<u32>)> {
    let (h, w, c) = x.dims3()?;
    if h == 0 || w == 0 {
        return Err(shape_err("pool2x2", "empty image"));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    let src = x.data();
    let mut out = Vec::with_capacity(oh * ow * c);
    let mut argmax = Vec::with_capacity(if max { oh * ow * c } else { 0 });
    for oy in 0..oh {
        let ys = 2 * oy..(2 * oy + 2).min(h);
        for ox in 0..ow {
            let xs = 2 * ox..(2 * ox + 2).min(w);
            for ch in 0..c {
                if max {
                    let mut best = usize::MAX;
                    for y in ys.clone() {
                        for xx in xs.clone() {
                            let i = (y * w + xx) * c + ch;
                            if best == usize::MAX || src[i] > src[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best as u32);
                } else {
                    let mut sum = T::zero();
                    for y in ys.clone() {
                        for xx in xs.clone() {
                            sum = sum + src[(y * w + xx) * c + ch];
                        }
                    }
                    let n = (ys.len() * xs.len()) as f64;
                    out.push(sum / T::of(n));
                }
            }
        }
    }
    Ok((Tensor::new(vec![oh, ow, c], out)?, argmax))
}

pub(crate) fn pool2x2_backward<T: Real>(
    x: &Tensor<T>,
    dy: &Tensor<T>,
    argmax: Option<&[u32]>,
) -> Tensor<T> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut dx = vec![T::zero(); x.len()];
    if let Some(argmax) = argmax {
        for (&i, &g) in argmax.iter().zip(dy.data()) {
            dx[i as usize] = dx[i as usize] + g;
        }
    } else {
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let g = dy.data();
        for oy in 0..oh {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..ow {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let n = T::of((ys.len() * xs.len()) as f64);
                for ch in 0..c {
                    let share = g[(oy * ow + ox) * c + ch] / n;
                    for y in ys.clone() {
                        for xx in xs.clone() {
                            let i = (y * w + xx) * c + ch;
                            dx[i] = dx[i] + share;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), dx).expect("shape")
}

/// Concatenation along the last axis; all leading axes must agree.
pub(crate) fn concat_last<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| shape_err("concat_channels", "no inputs"))?;
    let lead = &first.shape()[..first.rank().saturating_sub(1)];
    if first.rank() == 0 {
        return Err(shape_err("concat_channels", "rank-0 input"));
    }
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(shape_err(
                "concat_channels",
                format!("{:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        widths.push(*p.shape().last().unwrap());
    }
    let rows: usize = lead.iter().product();
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &cw) in parts.iter().zip(&widths) {
            out.extend_from_slice(&p.data()[r * cw..(r + 1) * cw]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::new(shape, out)
}

pub(crate) fn concat_last_backward<T: Real>(
    parts: &[&Tensor<T>],
    dy: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows = dy.len() / total.max(1);
    let mut grads: Vec<Vec<T>> = parts.iter().map(|p| Vec::with_capacity(p.len())).collect();
    for r in 0..rows {
        let row = &dy.data()[r * total..(r + 1) * total];
        let mut off = 0;
        for (g, &cw) in grads.iter_mut().zip(&widths) {
            g.extend_from_slice(&row[off..off + cw]);
            off += cw;
        }
    }
    grads
        .into_iter()
        .zip(parts)
        .map(|(g, p)| Tensor::new(p.shape().to_vec(), g).expect("shape"))
        .collect()
}

/// Matrix dimensions `(rows, cols)` of `op(x)` where rank ≥ 2 inputs have
/// their leading axes flattened into rows.
fn op_dims<T: Real>(x: &Tensor<T>, trans: bool) -> Result<(usize, usize)> {
    let (r, c) = x.as_matrix()?;
    Ok(if trans { (c, r) } else { (r, c) })
}

pub(crate) fn matmul<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
) -> Result<Tensor<T>> {
    let (m, k) = op_dims(a, trans_a)?;
    let (k2, n) = op_dims(b, trans_b)?;
    if k != k2 {
        return Err(shape_err(
            "matmul",
            format!("inner extents {} vs {} ({:?} x {:?})", k, k2, a.shape(), b.shape()),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, k, n, a.data(), trans_a, b.data(), trans_b, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub(crate) fn matmul_backward<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    trans_a: bool,
    trans_b: bool,
    dc: &Tensor<T>,
    need: [bool; 2],
) -> [Option<Tensor<T>>; 2] {
    let (m, k) = op_dims(a, trans_a).expect("checked in forward");
    let n = dc.shape()[1];
    let da = need[0].then(|| {
        let mut da = vec![T::zero(); m * k];
        if trans_a {
            // stored [k, m] = op(B) · dCᵀ
            T::gemm(k, n, m, b.data(), trans_b, dc.data(), true, &mut da, false);
        } else {
            // [m, k] = dC · op(B)ᵀ
            T::gemm(m, n, k, dc.data(), false, b.data(), !trans_b, &mut da, false);
        }
        Tensor::new(a.shape().to_vec(), da).expect("shape")
    });
    let db = need[1].then(|| {
        let mut db = vec![T::zero(); k * n];
        if trans_b {
            // stored [n, k] = dCᵀ · op(A)
            T::gemm(n, m, k, dc.data(), true, a.data(), trans_a, &mut db, false);
        } else {
            // [k, n] = op(A)ᵀ · dC
            T::gemm(k, m, n, a.data(), !trans_a, dc.data(), false, &mut db, false);
        }
        Tensor::new(b.shape().to_vec(), db).expect("shape")
    });
    [da, db]
}
