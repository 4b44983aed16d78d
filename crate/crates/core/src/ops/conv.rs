//! Convolution and transposed convolution through im2col + GEMM.
//!
//! Both operations share one patch geometry: a "large" map (conv input /
//! transposed-conv output) and a "small" map (conv output / transposed-conv
//! input), related by `large = small * stride - pad + k`. Columns of the patch
//! matrix run over every small-map position of every batch item and are
//! processed in chunks so the patch buffer stays bounded.

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{matmul, Scalar, Tensor};

/// Target patch-matrix elements per chunk, sized to stay cache resident.
/// Unit tests use a tiny budget so chunk boundaries (including ones inside a
/// batch item) get hit.
const PATCH_BUDGET: usize = if cfg!(test) { 1 << 9 } else { 1 << 18 };
/// Fewest columns per chunk, so deep layers still get a reasonably wide GEMM.
const MIN_CHUNK_COLUMNS: usize = if cfg!(test) { 1 } else { 256 };

pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad)
        .checked_sub(kernel)
        .map(|span| span / stride + 1)
}

pub fn conv_transpose_output_size(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Option<usize> {
    ((input.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    large_h: usize,
    large_w: usize,
    small_h: usize,
    small_w: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn columns(&self) -> usize {
        self.batch * self.small_h * self.small_w
    }

    fn chunk(&self, rows: usize) -> usize {
        (PATCH_BUDGET / rows.max(1))
            .max(MIN_CHUNK_COLUMNS)
            .clamp(1, self.columns().max(1))
    }

    /// Calls `f(batch, small_pos, column_offset, run_len)` for every run of
    /// consecutive columns in `[j0, j1)` that belong to one batch item.
    fn for_each_run(&self, j0: usize, j1: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let hw = self.small_h * self.small_w;
        let mut j = j0;
        while j < j1 {
            let b = j / hw;
            let pos = j % hw;
            let len = (hw - pos).min(j1 - j);
            f(b, pos, j - j0, len);
            j += len;
        }
    }
}

/// Small-map columns `[lo, hi)` whose tap `kx` lands inside the large map.
fn valid_span(g: &Geometry, kx: usize) -> (usize, usize) {
    let (s, pad) = (g.stride, g.pad);
    let lo = if pad > kx { (pad - kx).div_ceil(s) } else { 0 };
    let hi = if g.large_w + pad > kx { (g.large_w - 1 + pad - kx) / s + 1 } else { 0 };
    (lo.min(g.small_w), hi.min(g.small_w).max(lo.min(g.small_w)))
}

/// Visits every patch-matrix row segment that lies on one small-map row:
/// `f(plane_index, dst_offset, ox0, len, iy)` where `iy` is the large-map row
/// (or `None` when it falls in the padding).
fn for_each_segment(
    g: &Geometry,
    channels: usize,
    c: usize,
    ky: usize,
    j0: usize,
    j1: usize,
    mut f: impl FnMut(usize, usize, usize, usize, Option<usize>),
) {
    g.for_each_run(j0, j1, |b, pos, off, len| {
        let plane = b * channels + c;
        let mut p = pos;
        let mut done = 0;
        while done < len {
            let (oy, ox0) = (p / g.small_w, p % g.small_w);
            let seg = (g.small_w - ox0).min(len - done);
            let iy = (oy * g.stride + ky)
                .checked_sub(g.pad)
                .filter(|&iy| iy < g.large_h);
            f(plane, off + done, ox0, seg, iy);
            p += seg;
            done += seg;
        }
    });
}

/// Fills `cols` (rows = channels·k·k, `j1 - j0` columns) with patches of `large`.
fn im2col<T: Scalar>(large: &[T], channels: usize, g: &Geometry, j0: usize, j1: usize, cols: &mut [T]) {
    let cnt = j1 - j0;
    let k = g.kernel;
    let lhw = g.large_h * g.large_w;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * cnt..(row + 1) * cnt];
                let (vlo, vhi) = valid_span(g, kx);
                for_each_segment(g, channels, c, ky, j0, j1, |plane, off, ox0, len, iy| {
                    let out = &mut dst[off..off + len];
                    let Some(iy) = iy else {
                        out.fill(T::zero());
                        return;
                    };
                    let lo = vlo.clamp(ox0, ox0 + len);
                    let hi = vhi.clamp(lo, ox0 + len);
                    out[..lo - ox0].fill(T::zero());
                    out[hi - ox0..].fill(T::zero());
                    if hi > lo {
                        let src_row = &large[plane * lhw + iy * g.large_w..][..g.large_w];
                        let ix0 = lo * g.stride + kx - g.pad;
                        let dst = &mut out[lo - ox0..hi - ox0];
                        if g.stride == 1 {
                            dst.copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (i, d) in dst.iter_mut().enumerate() {
                                *d = src_row[ix0 + i * g.stride];
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds patch columns back into `large`.
fn col2im_add<T: Scalar>(cols: &[T], channels: usize, g: &Geometry, j0: usize, j1: usize, large: &mut [T]) {
    let cnt = j1 - j0;
    let k = g.kernel;
    let lhw = g.large_h * g.large_w;
    for c in 0..channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * cnt..(row + 1) * cnt];
                let (vlo, vhi) = valid_span(g, kx);
                for_each_segment(g, channels, c, ky, j0, j1, |plane, off, ox0, len, iy| {
                    let Some(iy) = iy else { return };
                    let lo = vlo.clamp(ox0, ox0 + len);
                    let hi = vhi.clamp(lo, ox0 + len);
                    if hi > lo {
                        let dst_row = &mut large[plane * lhw + iy * g.large_w..][..g.large_w];
                        let ix0 = lo * g.stride + kx - g.pad;
                        let vals = &src[off + lo - ox0..off + hi - ox0];
                        if g.stride == 1 {
                            for (d, &v) in dst_row[ix0..ix0 + vals.len()].iter_mut().zip(vals) {
                                *d = *d + v;
                            }
                        } else {
                            for (i, &v) in vals.iter().enumerate() {
                                let d = &mut dst_row[ix0 + i * g.stride];
                                *d = *d + v;
                            }
                        }
                    }
                });
            }
        }
    }
}

/// Copies a small-map tensor (N,C,h,w) into a `C × (j1-j0)` column block.
fn gather_cols<T: Scalar>(small: &[T], channels: usize, g: &Geometry, j0: usize, j1: usize, out: &mut [T]) {
    let cnt = j1 - j0;
    let hw = g.small_h * g.small_w;
    for c in 0..channels {
        g.for_each_run(j0, j1, |b, pos, off, len| {
            let src = (b * channels + c) * hw + pos;
            out[c * cnt + off..c * cnt + off + len].copy_from_slice(&small[src..src + len]);
        });
    }
}

/// Inverse of [`gather_cols`]; adds when `accumulate` is set.
fn scatter_cols<T: Scalar>(
    cols: &[T],
    channels: usize,
    g: &Geometry,
    j0: usize,
    j1: usize,
    small: &mut [T],
    accumulate: bool,
) {
    let cnt = j1 - j0;
    let hw = g.small_h * g.small_w;
    for c in 0..channels {
        g.for_each_run(j0, j1, |b, pos, off, len| {
            let dst = &mut small[(b * channels + c) * hw + pos..][..len];
            let src = &cols[c * cnt + off..c * cnt + off + len];
            if accumulate {
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = *d + v;
                }
            } else {
                dst.copy_from_slice(src);
            }
        });
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], hw: usize) {
    let c = bias.len();
    for (i, plane) in out.chunks_mut(hw).enumerate() {
        let b = bias[i % c];
        for v in plane {
            *v = *v + b;
        }
    }
}

fn bias_grad<T: Scalar>(grad: &[T], channels: usize, hw: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for (i, plane) in grad.chunks(hw).enumerate() {
        db[i % channels] = db[i % channels] + plane.iter().copied().sum::<T>();
    }
    db
}

fn check_bias<T: Scalar>(bias: Option<&Var<T>>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape() != [channels] {
            return Err(Error::Structural(format!(
                "bias shape {:?} does not match {channels} output channels",
                b.shape()
            )));
        }
    }
    Ok(())
}

struct Conv2dOp {
    geometry: Geometry,
    in_channels: usize,
    out_channels: usize,
}

impl<T: Scalar> Backward<T> for Conv2dOp {
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let g = &self.geometry;
        let x = &inputs[0];
        let w = &inputs[1];
        let rows = self.in_channels * g.kernel * g.kernel;
        let cout = self.out_channels;
        let want_dx = x.requires_grad();
        let want_dw = w.requires_grad();

        let mut dx = want_dx.then(|| vec![T::zero(); x.value().len()]);
        let mut dw = want_dw.then(|| vec![T::zero(); w.value().len()]);
        let chunk = g.chunk(rows);
        let mut cols = vec![T::zero(); rows * chunk];
        let mut dy = vec![T::zero(); cout * chunk];
        let total = g.columns();
        let mut j0 = 0;
        while j0 < total {
            let j1 = (j0 + chunk).min(total);
            let cnt = j1 - j0;
            gather_cols(grad.data(), cout, g, j0, j1, &mut dy[..cout * cnt]);
            if let Some(dw) = dw.as_mut() {
                im2col(x.value().data(), self.in_channels, g, j0, j1, &mut cols[..rows * cnt]);
                matmul(cout, cnt, rows, &dy[..cout * cnt], false, &cols[..rows * cnt], true, T::one(), dw);
            }
            if let Some(dx) = dx.as_mut() {
                matmul(rows, cout, cnt, w.value().data(), true, &dy[..cout * cnt], false, T::zero(), &mut cols[..rows * cnt]);
                col2im_add(&cols[..rows * cnt], self.in_channels, g, j0, j1, dx);
            }
            j0 = j1;
        }

        let mut grads = vec![
            dx.map(|d| Tensor::from_vec(x.shape(), d).expect("input shape")),
            dw.map(|d| Tensor::from_vec(w.shape(), d).expect("weight shape")),
        ];
        if let Some(b) = inputs.get(2) {
            grads.push(b.requires_grad().then(|| {
                Tensor::from_vec(
                    b.shape(),
                    bias_grad(grad.data(), cout, g.small_h * g.small_w),
                )
                .expect("bias shape")
            }));
        }
        grads
    }
}

/// 2-D convolution. `weight` is `(C_out, C_in, k, k)`; square kernels only.
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    pad: usize,
) -> Result<Var<T>> {
    let (n, cin, h, w) = x.value().dims4()?;
    let (cout, wcin, kh, kw) = weight.value().dims4()?;
    if wcin != cin || kh != kw {
        return Err(Error::Structural(format!(
            "conv weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    check_bias(bias, cout)?;
    if stride == 0 {
        return Err(Error::Structural("conv stride must be positive".into()));
    }
    let (ho, wo) = match (conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
        _ => {
            return Err(Error::Structural(format!(
                "kernel {kh} with pad {pad} does not fit input {:?}",
                x.shape()
            )))
        }
    };
    let g = Geometry {
        batch: n,
        large_h: h,
        large_w: w,
        small_h: ho,
        small_w: wo,
        kernel: kh,
        stride,
        pad,
    };
    let rows = cin * kh * kw;
    let chunk = g.chunk(rows);
    let mut out = vec![T::zero(); n * cout * ho * wo];
    let mut cols = vec![T::zero(); rows * chunk];
    let mut tmp = vec![T::zero(); cout * chunk];
    let total = g.columns();
    let mut j0 = 0;
    while j0 < total {
        let j1 = (j0 + chunk).min(total);
        let cnt = j1 - j0;
        im2col(x.value().data(), cin, &g, j0, j1, &mut cols[..rows * cnt]);
        matmul(cout, rows, cnt, weight.value().data(), false, &cols[..rows * cnt], false, T::zero(), &mut tmp[..cout * cnt]);
        scatter_cols(&tmp[..cout * cnt], cout, &g, j0, j1, &mut out, false);
        j0 = j1;
    }
    if let Some(b) = bias {
        add_bias(&mut out, b.value().data(), ho * wo);
    }
    let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Var::from_op(
        value,
        inputs,
        Conv2dOp {
            geometry: g,
            in_channels: cin,
            out_channels: cout,
        },
    ))
}

struct ConvTranspose2dOp {
    geometry: Geometry,
    in_channels: usize,
    out_channels: usize,
}

impl<T: Scalar> Backward<T> for ConvTranspose2dOp {
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let g = &self.geometry;
        let x = &inputs[0];
        let w = &inputs[1];
        let cin = self.in_channels;
        let rows = self.out_channels * g.kernel * g.kernel;
        let mut dx = x.requires_grad().then(|| vec![T::zero(); x.value().len()]);
        let mut dw = w.requires_grad().then(|| vec![T::zero(); w.value().len()]);
        let chunk = g.chunk(rows);
        let mut dcols = vec![T::zero(); rows * chunk];
        let mut xc = vec![T::zero(); cin * chunk];
        let total = g.columns();
        let mut j0 = 0;
        while j0 < total {
            let j1 = (j0 + chunk).min(total);
            let cnt = j1 - j0;
            im2col(grad.data(), self.out_channels, g, j0, j1, &mut dcols[..rows * cnt]);
            if let Some(dx) = dx.as_mut() {
                matmul(cin, rows, cnt, w.value().data(), false, &dcols[..rows * cnt], false, T::zero(), &mut xc[..cin * cnt]);
                scatter_cols(&xc[..cin * cnt], cin, g, j0, j1, dx, false);
            }
            if let Some(dw) = dw.as_mut() {
                gather_cols(x.value().data(), cin, g, j0, j1, &mut xc[..cin * cnt]);
                matmul(cin, cnt, rows, &xc[..cin * cnt], false, &dcols[..rows * cnt], true, T::one(), dw);
            }
            j0 = j1;
        }
        let mut grads = vec![
            dx.map(|d| Tensor::from_vec(x.shape(), d).expect("input shape")),
            dw.map(|d| Tensor::from_vec(w.shape(), d).expect("weight shape")),
        ];
        if let Some(b) = inputs.get(2) {
            grads.push(b.requires_grad().then(|| {
                Tensor::from_vec(
                    b.shape(),
                    bias_grad(grad.data(), self.out_channels, g.large_h * g.large_w),
                )
                .expect("bias shape")
            }));
        }
        grads
    }
}

/// Transposed 2-D convolution. `weight` is `(C_in, C_out, k, k)`.
pub fn conv_transpose2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    pad: usize,
) -> Result<Var<T>> {
    let (n, cin, h, w) = x.value().dims4()?;
    let (wcin, cout, kh, kw) = weight.value().dims4()?;
    if wcin != cin || kh != kw {
        return Err(Error::Structural(format!(
            "transposed-conv weight {:?} does not fit input {:?}",
            weight.shape(),
            x.shape()
        )));
    }
    check_bias(bias, cout)?;
    if stride == 0 {
        return Err(Error::Structural("conv stride must be positive".into()));
    }
    let (ho, wo) = match (
        conv_transpose_output_size(h, kh, stride, pad),
        conv_transpose_output_size(w, kw, stride, pad),
    ) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
        _ => {
            return Err(Error::Structural(format!(
                "transposed conv k={kh} s={stride} p={pad} has no output for {:?}",
                x.shape()
            )))
        }
    };
    let g = Geometry {
        batch: n,
        large_h: ho,
        large_w: wo,
        small_h: h,
        small_w: w,
        kernel: kh,
        stride,
        pad,
    };
    let rows = cout * kh * kw;
    let chunk = g.chunk(rows);
    let mut out = vec![T::zero(); n * cout * ho * wo];
    let mut xc = vec![T::zero(); cin * chunk];
    let mut cols = vec![T::zero(); rows * chunk];
    let total = g.columns();
    let mut j0 = 0;
    while j0 < total {
        let j1 = (j0 + chunk).min(total);
        let cnt = j1 - j0;
        gather_cols(x.value().data(), cin, &g, j0, j1, &mut xc[..cin * cnt]);
        matmul(rows, cin, cnt, weight.value().data(), true, &xc[..cin * cnt], false, T::zero(), &mut cols[..rows * cnt]);
        col2im_add(&cols[..rows * cnt], cout, &g, j0, j1, &mut out);
        j0 = j1;
    }
    if let Some(b) = bias {
        add_bias(&mut out, b.value().data(), ho * wo);
    }
    let value = Tensor::from_vec(&[n, cout, ho, wo], out)?;
    let mut inputs = vec![x.clone(), weight.clone()];
    inputs.extend(bias.cloned());
    Ok(Var::from_op(
        value,
        inputs,
        ConvTranspose2dOp {
            geometry: g,
            in_channels: cin,
            out_channels: cout,
        },
    ))
}
