//! Forward and backward kernels for the operator set of the LED UNet.
//!
//! These are plain functions over [`Tensor`]s; [`crate::autograd::Tape`]
//! records them and calls the matching backward kernels. Convolutions are
//! lowered to gemm in a pixel-major layout (`[N*H*W, C]`) so work splits into
//! contiguous row blocks.

use crate::error::{LedError, Result};
use crate::par::{self, gemm, MatRef};
use crate::tensor::{Scalar, Tensor};

/// Pixels per task for the layout conversions.
const PIXEL_CHUNK: usize = 256;

/// NCHW -> `[N*H*W, C]`.
pub fn to_pixel_major<T: Scalar>(x: &Tensor<T>) -> Vec<T> {
    let (n, c, h, w) = x.nchw().expect("NCHW tensor");
    let hw = h * w;
    let src = x.data();
    let mut out = vec![T::zero(); n * hw * c];
    par::for_each_chunk_mut(&mut out, PIXEL_CHUNK * c, |ci, chunk| {
        let p0 = ci * PIXEL_CHUNK;
        for (r, row) in chunk.chunks_mut(c).enumerate() {
            let p = p0 + r;
            let (b, s) = (p / hw, p % hw);
            for (ch, v) in row.iter_mut().enumerate() {
                *v = src[(b * c + ch) * hw + s];
            }
        }
    });
    out
}

/// `[N*H*W, C]` -> NCHW.
pub fn from_pixel_major<T: Scalar>(v: &[T], n: usize, c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = vec![T::zero(); n * c * hw];
    par::for_each_chunk_mut(&mut out, hw, |plane, dst| {
        let (b, ch) = (plane / c, plane % c);
        for (s, d) in dst.iter_mut().enumerate() {
            *d = v[(b * hw + s) * c + ch];
        }
    });
    Tensor::new(vec![n, c, h, w], out).expect("consistent dims")
}

fn expect_len<T: Scalar>(t: &Tensor<T>, len: usize, what: &str) -> Result<()> {
    if t.ndim() != 1 || t.len() != len {
        return Err(LedError::shape(format!(
            "{what}: expected length {len}, got dims {:?}",
            t.dims()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// 3x3 convolution, stride 1, one-pixel padding
// ---------------------------------------------------------------------------

/// Result of a 3x3 convolution together with the pixel-major patch matrix
/// needed by its backward pass.
pub struct Conv3x3Out<T> {
    pub output: Tensor<T>,
    pub cols: Vec<T>,
}

fn im2col3x3<T: Scalar>(x: &Tensor<T>, pad: Option<&[T]>) -> Vec<T> {
    let (n, c, h, w) = x.nchw().expect("NCHW tensor");
    let k = c * 9;
    let hw = h * w;
    let src = x.data();
    let mut cols = vec![T::zero(); n * hw * k];
    par::for_each_chunk_mut(&mut cols, PIXEL_CHUNK * k, |ci, chunk| {
        let p0 = ci * PIXEL_CHUNK;
        for (r, row) in chunk.chunks_mut(k).enumerate() {
            let p = p0 + r;
            let (b, s) = (p / hw, p % hw);
            let (y, xx) = ((s / w) as isize, (s % w) as isize);
            for ch in 0..c {
                let fill = pad.map_or(T::zero(), |p| p[ch]);
                let plane = &src[(b * c + ch) * hw..(b * c + ch + 1) * hw];
                for u in 0..3isize {
                    let sy = y + u - 1;
                    for v in 0..3isize {
                        let sx = xx + v - 1;
                        let val = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            fill
                        } else {
                            plane[sy as usize * w + sx as usize]
                        };
                        row[ch * 9 + (u * 3 + v) as usize] = val;
                    }
                }
            }
        }
    });
    cols
}

/// Same-size 3x3 convolution. `pad` optionally sets the per-input-channel
/// value of the one-pixel padding ring (zero otherwise).
pub fn conv3x3<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    pad: Option<&Tensor<T>>,
) -> Result<Conv3x3Out<T>> {
    let (n, cin, h, w) = x.nchw()?;
    let wd = weight.dims();
    if wd.len() != 4 || wd[1] != cin || wd[2] != 3 || wd[3] != 3 {
        return Err(LedError::shape(format!(
            "conv3x3 weight {wd:?} incompatible with input channels {cin}"
        )));
    }
    let cout = wd[0];
    expect_len(bias, cout, "conv3x3 bias")?;
    if let Some(p) = pad {
        expect_len(p, cin, "conv3x3 pad values")?;
    }
    let k = cin * 9;
    let cols = im2col3x3(x, pad.map(|p| p.data()));
    let rows = n * h * w;
    let mut out_pm = vec![T::zero(); rows * cout];
    gemm(
        MatRef::row_major(&cols, rows, k),
        MatRef::row_major(weight.data(), cout, k).t(),
        T::zero(),
        &mut out_pm,
    );
    add_bias_pm(&mut out_pm, bias.data());
    Ok(Conv3x3Out {
        output: from_pixel_major(&out_pm, n, cout, h, w),
        cols,
    })
}

fn add_bias_pm<T: Scalar>(pm: &mut [T], bias: &[T]) {
    let c = bias.len();
    par::for_each_chunk_mut(pm, PIXEL_CHUNK * c, |_, chunk| {
        for row in chunk.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(bias) {
                *v += *b;
            }
        }
    });
}

/// Per-channel sums of a pixel-major matrix, in a fixed order.
fn column_sums<T: Scalar>(pm: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for row in pm.chunks(c) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += *v;
        }
    }
    out
}

/// Which gradients a backward call should produce.
#[derive(Debug, Clone, Copy, Default)]
pub struct Needs {
    pub input: bool,
    pub weight: bool,
    pub bias: bool,
    pub pad: bool,
}

#[derive(Debug, Default)]
pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
    pub pad: Option<Tensor<T>>,
}

pub fn conv3x3_backward<T: Scalar>(
    input_dims: &[usize],
    weight: &Tensor<T>,
    cols: &[T],
    grad_out: &Tensor<T>,
    needs: Needs,
) -> ConvGrads<T> {
    let (n, cin, h, w) = (input_dims[0], input_dims[1], input_dims[2], input_dims[3]);
    let cout = weight.dims()[0];
    let k = cin * 9;
    let rows = n * h * w;
    let hw = h * w;
    let g_pm = to_pixel_major(grad_out);
    let mut grads = ConvGrads::default();

    if needs.bias {
        grads.bias = Some(Tensor::new(vec![cout], column_sums(&g_pm, cout)).unwrap());
    }
    if needs.weight {
        let mut gw = vec![T::zero(); cout * k];
        gemm(
            MatRef::row_major(&g_pm, rows, cout).t(),
            MatRef::row_major(cols, rows, k),
            T::zero(),
            &mut gw,
        );
        grads.weight = Some(Tensor::new(weight.dims().to_vec(), gw).unwrap());
    }
    if needs.input || needs.pad {
        let mut gcol = vec![T::zero(); rows * k];
        gemm(
            MatRef::row_major(&g_pm, rows, cout),
            MatRef::row_major(weight.data(), cout, k),
            T::zero(),
            &mut gcol,
        );
        if needs.input {
            let mut gi = vec![T::zero(); n * cin * hw];
            par::for_each_chunk_mut(&mut gi, hw, |plane, dst| {
                let (b, ch) = (plane / cin, plane % cin);
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = T::zero();
                        for u in 0..3 {
                            // output row oy reads input row y via tap u when oy + u - 1 == y
                            let oy = y as isize - u as isize + 1;
                            if oy < 0 || oy >= h as isize {
                                continue;
                            }
                            for v in 0..3 {
                                let ox = x as isize - v as isize + 1;
                                if ox < 0 || ox >= w as isize {
                                    continue;
                                }
                                let p = b * hw + oy as usize * w + ox as usize;
                                acc += gcol[p * k + ch * 9 + u * 3 + v];
                            }
                        }
                        dst[y * w + x] = acc;
                    }
                }
            });
            grads.input = Some(Tensor::new(input_dims.to_vec(), gi).unwrap());
        }
        if needs.pad {
            let per_plane = par::map_indices(n * cin, |plane| {
                let (b, ch) = (plane / cin, plane % cin);
                let mut acc = T::zero();
                for y in 0..h {
                    for x in 0..w {
                        if y != 0 && y != h - 1 && x != 0 && x != w - 1 {
                            continue;
                        }
                        let p = b * hw + y * w + x;
                        for u in 0..3isize {
                            let sy = y as isize + u - 1;
                            for v in 0..3isize {
                                let sx = x as isize + v - 1;
                                if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                                    acc += gcol[p * k + ch * 9 + (u * 3 + v) as usize];
                                }
                            }
                        }
                    }
                }
                acc
            });
            let mut gp = vec![T::zero(); cin];
            for (plane, v) in per_plane.into_iter().enumerate() {
                gp[plane % cin] += v;
            }
            grads.pad = Some(Tensor::new(vec![cin], gp).unwrap());
        }
    }
    grads
}

// ---------------------------------------------------------------------------
// 1x1 convolution (output head)
// ---------------------------------------------------------------------------

pub fn conv1x1<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.nchw()?;
    let wd = weight.dims();
    if wd.len() != 4 || wd[1] != cin || wd[2] != 1 || wd[3] != 1 {
        return Err(LedError::shape(format!(
            "conv1x1 weight {wd:?} incompatible with input channels {cin}"
        )));
    }
    let cout = wd[0];
    expect_len(bias, cout, "conv1x1 bias")?;
    let rows = n * h * w;
    let x_pm = to_pixel_major(x);
    let mut out = vec![T::zero(); rows * cout];
    gemm(
        MatRef::row_major(&x_pm, rows, cin),
        MatRef::row_major(weight.data(), cout, cin).t(),
        T::zero(),
        &mut out,
    );
    add_bias_pm(&mut out, bias.data());
    Ok(from_pixel_major(&out, n, cout, h, w))
}

pub fn conv1x1_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    needs: Needs,
) -> ConvGrads<T> {
    let (n, cin, h, w) = x.nchw().unwrap();
    let cout = weight.dims()[0];
    let rows = n * h * w;
    let g_pm = to_pixel_major(grad_out);
    let mut grads = ConvGrads::default();
    if needs.bias {
        grads.bias = Some(Tensor::new(vec![cout], column_sums(&g_pm, cout)).unwrap());
    }
    if needs.weight {
        let x_pm = to_pixel_major(x);
        let mut gw = vec![T::zero(); cout * cin];
        gemm(
            MatRef::row_major(&g_pm, rows, cout).t(),
            MatRef::row_major(&x_pm, rows, cin),
            T::zero(),
            &mut gw,
        );
        grads.weight = Some(Tensor::new(weight.dims().to_vec(), gw).unwrap());
    }
    if needs.input {
        let mut gi = vec![T::zero(); rows * cin];
        gemm(
            MatRef::row_major(&g_pm, rows, cout),
            MatRef::row_major(weight.data(), cout, cin),
            T::zero(),
            &mut gi,
        );
        grads.input = Some(from_pixel_major(&gi, n, cin, h, w));
    }
    grads
}

// ---------------------------------------------------------------------------
// 2x2 stride-2 transposed convolution
// ---------------------------------------------------------------------------

pub fn transposed_conv2<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, cin, h, w) = x.nchw()?;
    let wd = weight.dims();
    if wd.len() != 4 || wd[0] != cin || wd[2] != 2 || wd[3] != 2 {
        return Err(LedError::shape(format!(
            "transposed_conv2 weight {wd:?} incompatible with input channels {cin}"
        )));
    }
    let cout = wd[1];
    expect_len(bias, cout, "transposed_conv2 bias")?;
    let rows = n * h * w;
    let x_pm = to_pixel_major(x);
    let mut o_pm = vec![T::zero(); rows * cout * 4];
    gemm(
        MatRef::row_major(&x_pm, rows, cin),
        MatRef::row_major(weight.data(), cin, cout * 4),
        T::zero(),
        &mut o_pm,
    );
    let (oh, ow) = (2 * h, 2 * w);
    let ohw = oh * ow;
    let bias = bias.data();
    let mut out = vec![T::zero(); n * cout * ohw];
    par::for_each_chunk_mut(&mut out, ohw, |plane, dst| {
        let (b, co) = (plane / cout, plane % cout);
        for oy in 0..oh {
            for ox in 0..ow {
                let p = b * h * w + (oy / 2) * w + ox / 2;
                let tap = (oy % 2) * 2 + ox % 2;
                dst[oy * ow + ox] = o_pm[p * cout * 4 + co * 4 + tap] + bias[co];
            }
        }
    });
    Tensor::new(vec![n, cout, oh, ow], out)
}

pub fn transposed_conv2_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    needs: Needs,
) -> ConvGrads<T> {
    let (n, cin, h, w) = x.nchw().unwrap();
    let cout = weight.dims()[1];
    let rows = n * h * w;
    let (oh, ow) = (2 * h, 2 * w);
    let g = grad_out.data();
    let mut grads = ConvGrads::default();
    if needs.bias {
        let mut gb = vec![T::zero(); cout];
        for b in 0..n {
            for (co, acc) in gb.iter_mut().enumerate() {
                let plane = &g[(b * cout + co) * oh * ow..(b * cout + co + 1) * oh * ow];
                *acc += plane.iter().copied().sum::<T>();
            }
        }
        grads.bias = Some(Tensor::new(vec![cout], gb).unwrap());
    }
    if !(needs.weight || needs.input) {
        return grads;
    }
    // gather output gradients into [N*H*W, Cout*4]
    let k4 = cout * 4;
    let mut g_pm = vec![T::zero(); rows * k4];
    par::for_each_chunk_mut(&mut g_pm, PIXEL_CHUNK * k4, |ci, chunk| {
        let p0 = ci * PIXEL_CHUNK;
        for (r, row) in chunk.chunks_mut(k4).enumerate() {
            let p = p0 + r;
            let (b, s) = (p / (h * w), p % (h * w));
            let (y, x) = (s / w, s % w);
            for co in 0..cout {
                let plane = (b * cout + co) * oh * ow;
                for a in 0..2 {
                    for c in 0..2 {
                        row[co * 4 + a * 2 + c] = g[plane + (2 * y + a) * ow + 2 * x + c];
                    }
                }
            }
        }
    });
    if needs.weight {
        let x_pm = to_pixel_major(x);
        let mut gw = vec![T::zero(); cin * k4];
        gemm(
            MatRef::row_major(&x_pm, rows, cin).t(),
            MatRef::row_major(&g_pm, rows, k4),
            T::zero(),
            &mut gw,
        );
        grads.weight = Some(Tensor::new(weight.dims().to_vec(), gw).unwrap());
    }
    if needs.input {
        let mut gi = vec![T::zero(); rows * cin];
        gemm(
            MatRef::row_major(&g_pm, rows, k4),
            MatRef::row_major(weight.data(), cin, k4).t(),
            T::zero(),
            &mut gi,
        );
        grads.input = Some(from_pixel_major(&gi, n, cin, h, w));
    }
    grads
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

/// `out[n,c,h,w] = scale[c] * x[n,c,h,w] + shift[c]`.
pub fn channel_affine<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (_, c, h, w) = x.nchw()?;
    expect_len(scale, c, "channel_affine scale")?;
    expect_len(shift, c, "channel_affine shift")?;
    let hw = h * w;
    let (s, t) = (scale.data(), shift.data());
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    par::for_each_chunk_mut(&mut out, hw, |plane, dst| {
        let ch = plane % c;
        let base = plane * hw;
        for (i, d) in dst.iter_mut().enumerate() {
            *d = s[ch] * src[base + i] + t[ch];
        }
    });
    Tensor::new(x.dims().to_vec(), out)
}

/// Optional gradients w.r.t. (input, scale, shift).
pub type AffineGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>);

/// Gradients of [`channel_affine`] w.r.t. (input, scale, shift).
pub fn channel_affine_backward<T: Scalar>(
    x: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
    needs: Needs,
) -> AffineGrads<T> {
    let (n, c, h, w) = x.nchw().unwrap();
    let hw = h * w;
    let g = grad_out.data();
    let xs = x.data();
    let gi = needs.input.then(|| {
        let s = scale.data();
        let mut out = vec![T::zero(); x.len()];
        par::for_each_chunk_mut(&mut out, hw, |plane, dst| {
            let ch = plane % c;
            for (i, d) in dst.iter_mut().enumerate() {
                *d = g[plane * hw + i] * s[ch];
            }
        });
        Tensor::new(x.dims().to_vec(), out).unwrap()
    });
    let (mut gs, mut gt) = (vec![T::zero(); c], vec![T::zero(); c]);
    if needs.weight || needs.bias {
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                for i in 0..hw {
                    gs[ch] += g[base + i] * xs[base + i];
                    gt[ch] += g[base + i];
                }
            }
        }
    }
    let gs = needs.weight.then(|| Tensor::new(vec![c], gs).unwrap());
    let gt = needs.bias.then(|| Tensor::new(vec![c], gt).unwrap());
    (gi, gs, gt)
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { slope * v })
}

/// Derivative uses `slope` at exactly zero.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, slope: T, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { slope * g })
        .collect();
    Tensor::new(x.dims().to_vec(), data).unwrap()
}

/// 2x2 max pooling. Returns the output and, per output element, the flat
/// input index of the maximum (first in row-major order on ties).
pub fn maxpool2<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.nchw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(LedError::shape(format!(
            "maxpool2 needs even spatial extent, got {h}x{w}"
        )));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = x.data();
    let mut argmax = vec![0usize; n * c * oh * ow];
    par::for_each_chunk_mut(&mut argmax, oh * ow, |plane, dst| {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[oy * ow + ox] = best;
            }
        }
    });
    let data = argmax.iter().map(|&i| src[i]).collect();
    Ok((Tensor::new(vec![n, c, oh, ow], data)?, argmax))
}

pub fn maxpool2_backward<T: Scalar>(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut gi = Tensor::zeros(input_dims);
    let d = gi.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    gi
}

pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (na, ca, ha, wa) = a.nchw()?;
    let (nb, cb, hb, wb) = b.nchw()?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(LedError::shape(format!(
            "concat_channels mismatch {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let hw = ha * wa;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..na {
        data.extend_from_slice(&a.data()[i * ca * hw..(i + 1) * ca * hw]);
        data.extend_from_slice(&b.data()[i * cb * hw..(i + 1) * cb * hw]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], data)
}

/// Splits a channel-concatenated tensor back into its `ca` and remaining channels.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, c, h, w) = x.nchw()?;
    if ca == 0 || ca >= c {
        return Err(LedError::shape(format!("cannot split {c} channels at {ca}")));
    }
    let cb = c - ca;
    let hw = h * w;
    let (mut da, mut db) = (Vec::with_capacity(n * ca * hw), Vec::with_capacity(n * cb * hw));
    for i in 0..n {
        let base = i * c * hw;
        da.extend_from_slice(&x.data()[base..base + ca * hw]);
        db.extend_from_slice(&x.data()[base + ca * hw..base + c * hw]);
    }
    Ok((
        Tensor::new(vec![n, ca, h, w], da)?,
        Tensor::new(vec![n, cb, h, w], db)?,
    ))
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<T> {
    if pred.dims() != target.dims() {
        return Err(LedError::shape(format!(
            "l1_loss dims mismatch {:?} vs {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let sum: T = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t).abs())
        .sum();
    Ok(sum / T::from_f64(pred.len() as f64))
}

/// `sign(pred - target) / count`, zero at exact equality.
pub fn l1_loss_grad<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let inv = T::one() / T::from_f64(pred.len() as f64);
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            if p > t {
                inv
            } else if p < t {
                -inv
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::new(pred.dims().to_vec(), data).unwrap()
}

// ---------------------------------------------------------------------------
// RepNR fusion arithmetic
// ---------------------------------------------------------------------------

fn check_fuse_shapes<T: Scalar>(w0: &Tensor<T>, vec_len: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    let d = w0.dims();
    if d.len() != 4 || d[2] != 3 || d[3] != 3 {
        return Err(LedError::shape(format!("{what}: weight must be [Cout,Cin,3,3], got {d:?}")));
    }
    expect_len(vec_len, d[1], what)?;
    Ok((d[0], d[1]))
}

/// `w0[o,i,u,v] * scale[i] + w1[o,i,u,v]`.
pub fn fuse_weight<T: Scalar>(w0: &Tensor<T>, scale: &Tensor<T>, w1: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (_, cin) = check_fuse_shapes(w0, scale, "fuse_weight")?;
    if let Some(w1) = w1 {
        if w1.dims() != w0.dims() {
            return Err(LedError::shape("fuse_weight: W1 shape differs from W0"));
        }
    }
    let s = scale.data();
    let data = w0
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| {
            let i = (idx / 9) % cin;
            let extra = w1.map_or(T::zero(), |w1| w1.data()[idx]);
            v * s[i] + extra
        })
        .collect();
    Tensor::new(w0.dims().to_vec(), data)
}

/// `b0[o] + b1[o] + sum_{i,u,v} w0[o,i,u,v] * shift[i]`.
pub fn fuse_bias<T: Scalar>(
    w0: &Tensor<T>,
    shift: &Tensor<T>,
    b0: &Tensor<T>,
    b1: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    let (cout, cin) = check_fuse_shapes(w0, shift, "fuse_bias")?;
    expect_len(b0, cout, "fuse_bias b0")?;
    if let Some(b1) = b1 {
        expect_len(b1, cout, "fuse_bias b1")?;
    }
    let t = shift.data();
    let wd = w0.data();
    let data = (0..cout)
        .map(|o| {
            let mut acc = b0.data()[o] + b1.map_or(T::zero(), |b| b.data()[o]);
            for i in 0..cin {
                let taps: T = wd[(o * cin + i) * 9..(o * cin + i + 1) * 9].iter().copied().sum();
                acc += taps * t[i];
            }
            acc
        })
        .collect();
    Tensor::new(vec![cout], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_major_roundtrip() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let pm = to_pixel_major(&x);
        assert_eq!(pm[1], x.data()[20]); // pixel 0, channel 1
        assert_eq!(from_pixel_major(&pm, 2, 3, 4, 5), x);
    }

    #[test]
    fn conv3x3_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[3, 1, 3, 3]);
        let b = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(conv3x3(&x, &w, &b, None), Err(LedError::Shape(_))));
    }

    #[test]
    fn conv3x3_pad_ring_values() {
        // 1x1 image: every tap except the centre reads the padding value.
        let x = Tensor::<f64>::full(&[1, 1, 1, 1], 2.0);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let b = Tensor::<f64>::zeros(&[1]);
        let pad = Tensor::<f64>::full(&[1], 0.5);
        let out = conv3x3(&x, &w, &b, Some(&pad)).unwrap().output;
        assert_eq!(out.data(), &[2.0 + 8.0 * 0.5]);
    }

    #[test]
    fn maxpool_rejects_odd() {
        let x = Tensor::<f32>::zeros(&[1, 1, 3, 4]);
        assert!(maxpool2(&x).is_err());
    }

    #[test]
    fn maxpool_tie_takes_first() {
        let x = Tensor::<f64>::full(&[1, 1, 2, 2], 1.0);
        let (_, arg) = maxpool2(&x).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros(&[1, 1, 2, 4]);
        assert!(concat_channels(&a, &b).is_err());
    }

    #[test]
    fn l1_rejects_dims_mismatch() {
        let a = Tensor::<f32>::zeros(&[2]);
        let b = Tensor::<f32>::zeros(&[3]);
        assert!(l1_loss(&a, &b).is_err());
    }

    #[test]
    fn affine_rejects_length_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 2]);
        let s = Tensor::<f32>::ones(&[3]);
        let t = Tensor::<f32>::zeros(&[2]);
        assert!(channel_affine(&x, &s, &t).is_err());
    }
}
