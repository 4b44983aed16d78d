//! Bilinear (half-pixel centers, edge clamped) and nearest-neighbour resizing.

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Source taps along one axis: `(i0, i1, w0, w1)` per destination index.
fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let frac = pos - i0 as f64;
            (i0, i1, 1.0 - frac, frac)
        })
        .collect()
}

/// Resizes one `h × w` plane bilinearly.
pub fn resize_plane_bilinear(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, wy0, wy1) in &ty {
        for &(x0, x1, wx0, wx1) in &tx {
            let v = wy0 * (wx0 * src[y0 * w + x0] as f64 + wx1 * src[y0 * w + x1] as f64)
                + wy1 * (wx0 * src[y1 * w + x0] as f64 + wx1 * src[y1 * w + x1] as f64);
            out.push(v as f32);
        }
    }
    out
}

/// Resizes one plane with nearest-neighbour sampling at pixel centres.
pub fn resize_plane_nearest(src: &[f32], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    let pick = |d: usize, src_len: usize, dst_len: usize| {
        (((d as f64 + 0.5) * src_len as f64 / dst_len as f64).floor() as usize).min(src_len - 1)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = pick(y, h, out_h);
        for x in 0..out_w {
            out.push(src[sy * w + pick(x, w, out_w)]);
        }
    }
    out
}

struct ResizeOp {
    taps_y: Vec<(usize, usize, f64, f64)>,
    taps_x: Vec<(usize, usize, f64, f64)>,
}

impl<T: Scalar> Backward<T> for ResizeOp {
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = inputs[0].value().dims4().expect("rank 4");
        let (oh, ow) = (self.taps_y.len(), self.taps_x.len());
        let g = grad.data();
        let mut dx = vec![T::zero(); n * c * h * w];
        for plane in 0..n * c {
            let src = &g[plane * oh * ow..(plane + 1) * oh * ow];
            let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
            for (oy, &(y0, y1, wy0, wy1)) in self.taps_y.iter().enumerate() {
                for (ox, &(x0, x1, wx0, wx1)) in self.taps_x.iter().enumerate() {
                    let v = src[oy * ow + ox];
                    let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
                    let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                    dst[y0 * w + x0] = dst[y0 * w + x0] + v * wy0 * wx0;
                    dst[y0 * w + x1] = dst[y0 * w + x1] + v * wy0 * wx1;
                    dst[y1 * w + x0] = dst[y1 * w + x0] + v * wy1 * wx0;
                    dst[y1 * w + x1] = dst[y1 * w + x1] + v * wy1 * wx1;
                }
            }
        }
        vec![Some(Tensor::from_vec(inputs[0].shape(), dx).expect("input shape"))]
    }
}

/// Bilinear resize of an NCHW tensor to `(out_h, out_w)`.
pub fn resize_bilinear<T: Scalar>(x: &Var<T>, out_h: usize, out_w: usize) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::Structural(format!(
            "cannot resize {:?} to {out_h}x{out_w}",
            x.shape()
        )));
    }
    let taps_y = bilinear_taps(h, out_h);
    let taps_x = bilinear_taps(w, out_w);
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, wy0, wy1) in &taps_y {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for &(x0, x1, wx0, wx1) in &taps_x {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                out.push(
                    wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                        + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]),
                );
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, out_h, out_w], out)?;
    Ok(Var::from_op(value, vec![x.clone()], ResizeOp { taps_y, taps_x }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check, project, seeded};

    #[test]
    fn upsample_by_two_matches_half_pixel_convention() {
        // 1-D row [0, 1] upsampled to 4 samples: 0, 0.25, 0.75, 1.
        let x = Var::constant(Tensor::from_vec(&[1, 1, 1, 2], vec![0.0f64, 1.0]).unwrap());
        let y = resize_bilinear(&x, 1, 4).unwrap();
        assert_eq!(y.value().data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn same_size_is_identity() {
        let t = seeded(&[1, 2, 3, 5], 1);
        let y = resize_bilinear(&Var::constant(t.clone()), 3, 5).unwrap();
        assert_eq!(y.value(), &t);
        let plane: Vec<f32> = (0..15).map(|v| v as f32).collect();
        assert_eq!(resize_plane_bilinear(&plane, 3, 5, 3, 5), plane);
        assert_eq!(resize_plane_nearest(&plane, 3, 5, 3, 5), plane);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = seeded(&[1, 2, 3, 4], 2);
        assert!(check(&x, 1e-5, |v| project(&resize_bilinear(v, 6, 8).unwrap(), 3)) < 1e-6);
        assert!(check(&x, 1e-5, |v| project(&resize_bilinear(v, 2, 3).unwrap(), 3)) < 1e-6);
    }

    #[test]
    fn nearest_keeps_binary_values() {
        let plane: Vec<f32> = (0..100 * 80).map(|i| ((i / 80 + i % 80) % 2) as f32).collect();
        let out = resize_plane_nearest(&plane, 100, 80, 37, 53);
        assert_eq!(out.len(), 37 * 53);
        assert!(out.iter().all(|&v| v == 0.0 || v == 1.0));
    }
}
