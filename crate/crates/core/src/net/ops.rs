//! Layer kernels and their adjoints.
//!
//! Each forward kernel has a matching backward that consumes the saved
//! activation it needs. Parallelism is over independent output planes;
//! every accumulation into a single cell runs in a fixed sequential order,
//! so results are bitwise reproducible regardless of thread count.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Scalar, Tensor};

/// 3x3 convolution, padding 1, stride 1 or 2, with bias.
/// `input` is `[B, Ci, H, W]`, `weight` `[Co, Ci, 3, 3]`, `bias` `[Co]`.
pub fn conv3x3_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let [b, ci, h, w] = dims4(input, "conv input")?;
    let [co, wci, kh, kw] = dims4(weight, "conv weight")?;
    if wci != ci || kh != 3 || kw != 3 {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input channels {ci}",
            weight.shape()
        )));
    }
    if bias.shape() != [co] {
        return Err(Error::Shape(format!("conv bias {:?}, want [{co}]", bias.shape())));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!("conv stride must be 1 or 2, got {stride}")));
    }
    let oh = (h + 2 - 3) / stride + 1;
    let ow = (w + 2 - 3) / stride + 1;

    let mut out = Tensor::zeros(&[b, co, oh, ow]);
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();
    par::for_each_chunk_mut(out.data_mut(), oh * ow, |plane, chunk| {
        let bi = plane / co;
        let coi = plane % co;
        let in_base = bi * ci * h * w;
        let w_base = coi * ci * 9;
        chunk.fill(b_data[coi]);
        for cii in 0..ci {
            let in_ch = in_base + cii * h * w;
            let w_ch = w_base + cii * 9;
            for ky in 0..3usize {
                let (oy0, oy1) = conv_span(h, oh, stride, ky);
                for kx in 0..3usize {
                    let (ox0, ox1) = conv_span(w, ow, stride, kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wv = w_data[w_ch + ky * 3 + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - 1;
                        let dst = &mut chunk[oy * ow + ox0..oy * ow + ox1];
                        let row = &in_data[in_ch + iy * w..in_ch + (iy + 1) * w];
                        if stride == 1 {
                            let src = &row[ox0 + kx - 1..ox1 + kx - 1];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = *d + wv * s;
                            }
                        } else {
                            let mut ix = ox0 * 2 + kx - 1;
                            for d in dst.iter_mut() {
                                *d = *d + wv * row[ix];
                                ix += 2;
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Output index range `[start, end)` along one axis such that every `o`
/// in it reads a valid input index `o * stride + k - 1` under padding 1.
/// Hoisting the bounds out of the pixel loops keeps them branch-free;
/// the per-cell tap accumulation order is unchanged.
fn conv_span(n: usize, n_out: usize, stride: usize, k: usize) -> (usize, usize) {
    if k > n {
        return (0, 0);
    }
    let start = if k == 0 { 1 } else { 0 };
    let end = ((n - k) / stride + 1).min(n_out);
    (start.min(end), end)
}

/// Gradients of [`conv3x3_forward`] with respect to weight, bias and input.
pub fn conv3x3_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [b, ci, h, w] = dims4(input, "conv input")?;
    let [co, _, _, _] = dims4(weight, "conv weight")?;
    let [db_, dco, oh, ow] = dims4(d_out, "conv output gradient")?;
    if db_ != b || dco != co {
        return Err(Error::Shape(format!(
            "conv output gradient {:?} incompatible with batch {b} channels {co}",
            d_out.shape()
        )));
    }
    let do_data = d_out.data();
    let in_data = input.data();
    let w_data = weight.data();

    // Bias: plain sums per output channel.
    let mut d_bias = Tensor::zeros(&[co]);
    for coi in 0..co {
        let mut acc = T::zero();
        for bi in 0..b {
            let plane = (bi * co + coi) * oh * ow;
            for i in 0..oh * ow {
                acc = acc + do_data[plane + i];
            }
        }
        d_bias.data_mut()[coi] = acc;
    }

    // Weights: parallel over output channels, batch accumulated in order.
    let mut d_weight = Tensor::zeros(&[co, ci, 3, 3]);
    par::for_each_chunk_mut(d_weight.data_mut(), ci * 9, |coi, wchunk| {
        for bi in 0..b {
            let do_plane = (bi * co + coi) * oh * ow;
            let in_base = bi * ci * h * w;
            for cii in 0..ci {
                let in_ch = in_base + cii * h * w;
                for ky in 0..3usize {
                    let (oy0, oy1) = conv_span(h, oh, stride, ky);
                    for kx in 0..3usize {
                        let (ox0, ox1) = conv_span(w, ow, stride, kx);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wi = cii * 9 + ky * 3 + kx;
                        let mut acc = wchunk[wi];
                        for oy in oy0..oy1 {
                            let iy = oy * stride + ky - 1;
                            let g_row =
                                &do_data[do_plane + oy * ow + ox0..do_plane + oy * ow + ox1];
                            let row = &in_data[in_ch + iy * w..in_ch + (iy + 1) * w];
                            if stride == 1 {
                                let src = &row[ox0 + kx - 1..ox1 + kx - 1];
                                for (&g, &s) in g_row.iter().zip(src) {
                                    acc = acc + g * s;
                                }
                            } else {
                                let mut ix = ox0 * 2 + kx - 1;
                                for &g in g_row {
                                    acc = acc + g * row[ix];
                                    ix += 2;
                                }
                            }
                        }
                        wchunk[wi] = acc;
                    }
                }
            }
        }
    });

    // Input: scatter formulation, parallel over (batch, in-channel)
    // planes. Per input cell the contributions still arrive in
    // (out-channel, ky, kx) order, so results match the gather form.
    let mut d_in = Tensor::zeros(&[b, ci, h, w]);
    par::for_each_chunk_mut(d_in.data_mut(), h * w, |plane, chunk| {
        let bi = plane / ci;
        let cii = plane % ci;
        for coi in 0..co {
            let do_plane = (bi * co + coi) * oh * ow;
            let w_ch = (coi * ci + cii) * 9;
            for ky in 0..3usize {
                let (oy0, oy1) = conv_span(h, oh, stride, ky);
                for kx in 0..3usize {
                    let (ox0, ox1) = conv_span(w, ow, stride, kx);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let wv = w_data[w_ch + ky * 3 + kx];
                    for oy in oy0..oy1 {
                        let iy = oy * stride + ky - 1;
                        let g_row = &do_data[do_plane + oy * ow + ox0..do_plane + oy * ow + ox1];
                        let row = &mut chunk[iy * w..(iy + 1) * w];
                        if stride == 1 {
                            let dst = &mut row[ox0 + kx - 1..ox1 + kx - 1];
                            for (d, &g) in dst.iter_mut().zip(g_row) {
                                *d = *d + wv * g;
                            }
                        } else {
                            let mut ix = ox0 * 2 + kx - 1;
                            for &g in g_row {
                                row[ix] = row[ix] + wv * g;
                                ix += 2;
                            }
                        }
                    }
                }
            }
        }
    });

    Ok((d_weight, d_bias, d_in))
}

/// ELU with alpha = 1: `x` for `x > 0`, `exp(x) - 1` otherwise. Continuous
/// first derivative at zero.
pub fn elu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { x.exp() - T::one() })
}

/// ELU derivative expressed through the saved output `y`: 1 for `y > 0`,
/// `y + 1` otherwise (since `y = exp(x) - 1` there).
pub fn elu_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != d_out.shape() {
        return Err(Error::Shape("elu backward shape mismatch".into()));
    }
    let mut d_in = d_out.clone();
    for (d, &y) in d_in.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *d = *d * (y + T::one());
        }
    }
    Ok(d_in)
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| {
        if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        }
    })
}

/// Sigmoid derivative through the saved output: `y * (1 - y)`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
    if output.shape() != d_out.shape() {
        return Err(Error::Shape("sigmoid backward shape mismatch".into()));
    }
    let mut d_in = d_out.clone();
    for (d, &y) in d_in.data_mut().iter_mut().zip(output.data()) {
        *d = *d * y * (T::one() - y);
    }
    Ok(d_in)
}

/// Source row/column interpolation table for 2x bilinear upsampling with
/// half-pixel alignment: src = (dst + 0.5) / 2 - 0.5, edge clamped.
fn upsample_table(n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n_in)
        .map(|o| {
            let s = ((o as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// Bilinear 2x upsampling. Constant inputs stay constant.
pub fn upsample2x_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [b, c, h, w] = dims4(input, "upsample input")?;
    let rows = upsample_table(h);
    let cols = upsample_table(w);
    let in_data = input.data();
    let mut out = Tensor::zeros(&[b, c, 2 * h, 2 * w]);
    par::for_each_chunk_mut(out.data_mut(), 4 * h * w, |plane, chunk| {
        let in_plane = plane * h * w;
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            let wy = T::from_f64(wy);
            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                let wx = T::from_f64(wx);
                let v00 = in_data[in_plane + y0 * w + x0];
                let v01 = in_data[in_plane + y0 * w + x1];
                let v10 = in_data[in_plane + y1 * w + x0];
                let v11 = in_data[in_plane + y1 * w + x1];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                chunk[oy * 2 * w + ox] = top + (bot - top) * wy;
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`upsample2x_forward`]: scatters each output gradient onto
/// its (up to) four source cells with the interpolation weights.
pub fn upsample2x_backward<T: Scalar>(
    in_shape: &[usize],
    d_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [b, c, h, w] = match in_shape {
        [b, c, h, w] => [*b, *c, *h, *w],
        s => return Err(Error::Shape(format!("upsample input shape {s:?} not rank 4"))),
    };
    let [ob, oc, oh, ow] = dims4(d_out, "upsample output gradient")?;
    if ob != b || oc != c || oh != 2 * h || ow != 2 * w {
        return Err(Error::Shape(format!(
            "upsample gradient {:?} does not match input {:?}",
            d_out.shape(),
            in_shape
        )));
    }
    let rows = upsample_table(h);
    let cols = upsample_table(w);
    let do_data = d_out.data();
    let mut d_in = Tensor::zeros(&[b, c, h, w]);
    par::for_each_chunk_mut(d_in.data_mut(), h * w, |plane, chunk| {
        let do_plane = plane * 4 * h * w;
        for (oy, &(y0, y1, wy)) in rows.iter().enumerate() {
            let wy = T::from_f64(wy);
            for (ox, &(x0, x1, wx)) in cols.iter().enumerate() {
                let wx = T::from_f64(wx);
                let g = do_data[do_plane + oy * 2 * w + ox];
                let one = T::one();
                chunk[y0 * w + x0] = chunk[y0 * w + x0] + g * (one - wy) * (one - wx);
                chunk[y0 * w + x1] = chunk[y0 * w + x1] + g * (one - wy) * wx;
                chunk[y1 * w + x0] = chunk[y1 * w + x0] + g * wy * (one - wx);
                chunk[y1 * w + x1] = chunk[y1 * w + x1] + g * wy * wx;
            }
        }
    });
    Ok(d_in)
}

/// Channel concatenation of two `[B, C, H, W]` tensors: `a` first, `b`
/// second.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [ba, ca, ha, wa] = dims4(a, "concat lhs")?;
    let [bb, cb, hb, wb] = dims4(b, "concat rhs")?;
    if ba != bb || ha != hb || wa != wb {
        return Err(Error::Shape(format!(
            "concat operands {:?} vs {:?} differ outside channel axis",
            a.shape(),
            b.shape()
        )));
    }
    let plane = ha * wa;
    let mut out = Tensor::zeros(&[ba, ca + cb, ha, wa]);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    for bi in 0..ba {
        let o_base = bi * (ca + cb) * plane;
        od[o_base..o_base + ca * plane]
            .copy_from_slice(&ad[bi * ca * plane..(bi + 1) * ca * plane]);
        od[o_base + ca * plane..o_base + (ca + cb) * plane]
            .copy_from_slice(&bd[bi * cb * plane..(bi + 1) * cb * plane]);
    }
    Ok(out)
}

/// Splits a concatenated gradient back into the two operands' gradients.
pub fn split_channels<T: Scalar>(
    d_out: &Tensor<T>,
    ca: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let [b, c, h, w] = dims4(d_out, "split input")?;
    if ca > c {
        return Err(Error::Shape(format!("cannot split {ca} channels out of {c}")));
    }
    let cb = c - ca;
    let plane = h * w;
    let mut da = Tensor::zeros(&[b, ca, h, w]);
    let mut db = Tensor::zeros(&[b, cb, h, w]);
    let dd = d_out.data();
    for bi in 0..b {
        let base = bi * c * plane;
        da.data_mut()[bi * ca * plane..(bi + 1) * ca * plane]
            .copy_from_slice(&dd[base..base + ca * plane]);
        db.data_mut()[bi * cb * plane..(bi + 1) * cb * plane]
            .copy_from_slice(&dd[base + ca * plane..base + c * plane]);
    }
    Ok((da, db))
}

pub fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        s => Err(Error::Shape(format!("{what} has shape {s:?}, want rank 4"))),
    }
}
