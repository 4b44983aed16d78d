//! Differentiable tensor operations on NCHW feature maps.

mod conv;
mod norm;
mod pool;
mod resize;

pub use conv::{conv2d, conv_transpose2d, conv_output_size, conv_transpose_output_size};
pub use norm::{batch_norm, BatchStats, NormMode, BN_EPS};
pub use pool::max_pool2d;
pub use resize::{resize_bilinear, resize_plane_bilinear, resize_plane_nearest};

use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

struct AddOp;

impl<T: Scalar> Backward<T> for AddOp {
    fn backward(&self, grad: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        vec![Some(grad.clone()), Some(grad.clone())]
    }
}

/// Element-wise sum of two equally shaped tensors.
pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(b.value(), |x, y| x + y)?;
    Ok(Var::from_op(out, vec![a.clone(), b.clone()], AddOp))
}

struct ReluOp<T> {
    out: Tensor<T>,
}

impl<T: Scalar> Backward<T> for ReluOp<T> {
    fn backward(&self, grad: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let g = grad
            .zip_map(&self.out, |g, y| if y > T::zero() { g } else { T::zero() })
            .expect("same shape");
        vec![Some(g)]
    }
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(|v| if v > T::zero() { v } else { T::zero() });
    Var::from_op(out.clone(), vec![x.clone()], ReluOp { out })
}

struct SigmoidOp<T> {
    out: Tensor<T>,
}

impl<T: Scalar> Backward<T> for SigmoidOp<T> {
    fn backward(&self, grad: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let g = grad
            .zip_map(&self.out, |g, s| g * s * (T::one() - s))
            .expect("same shape");
        vec![Some(g)]
    }
}

pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(sigmoid_scalar);
    Var::from_op(out.clone(), vec![x.clone()], SigmoidOp { out })
}

struct ChannelSoftmaxOp<T> {
    out: Tensor<T>,
}

impl<T: Scalar> Backward<T> for ChannelSoftmaxOp<T> {
    fn backward(&self, grad: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = self.out.dims4().expect("rank 4");
        let hw = h * w;
        let s = self.out.data();
        let g = grad.data();
        let mut dx = vec![T::zero(); s.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let dot: T = (0..c).map(|k| s[base + k * hw + p] * g[base + k * hw + p]).sum();
                for k in 0..c {
                    let i = base + k * hw + p;
                    dx[i] = s[i] * (g[i] - dot);
                }
            }
        }
        vec![Some(Tensor::from_vec(self.out.shape(), dx).expect("same shape"))]
    }
}

/// Softmax across the channel axis at every pixel.
pub fn softmax_channels<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let hw = h * w;
    let v = x.value().data();
    let mut out = vec![T::zero(); v.len()];
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let max = (0..c)
                .map(|k| v[base + k * hw + p])
                .fold(T::neg_infinity(), T::max);
            let mut denom = T::zero();
            for k in 0..c {
                let e = (v[base + k * hw + p] - max).exp();
                out[base + k * hw + p] = e;
                denom = denom + e;
            }
            for k in 0..c {
                out[base + k * hw + p] = out[base + k * hw + p] / denom;
            }
        }
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    Ok(Var::from_op(out.clone(), vec![x.clone()], ChannelSoftmaxOp { out }))
}

struct ScaleByMapOp;

impl<T: Scalar> Backward<T> for ScaleByMapOp {
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].value();
        let a = inputs[1].value();
        let (n, c, h, w) = x.dims4().expect("rank 4");
        let hw = h * w;
        let (xd, ad, g) = (x.data(), a.data(), grad.data());
        let mut dx = vec![T::zero(); xd.len()];
        let mut da = vec![T::zero(); ad.len()];
        for b in 0..n {
            for k in 0..c {
                let off = (b * c + k) * hw;
                for p in 0..hw {
                    dx[off + p] = g[off + p] * ad[b * hw + p];
                    da[b * hw + p] = da[b * hw + p] + g[off + p] * xd[off + p];
                }
            }
        }
        vec![
            Some(Tensor::from_vec(x.shape(), dx).expect("same shape")),
            Some(Tensor::from_vec(a.shape(), da).expect("same shape")),
        ]
    }
}

/// Multiplies every channel of `x` (N,C,H,W) by a single-channel map (N,1,H,W).
pub fn scale_by_map<T: Scalar>(x: &Var<T>, map: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let (mn, mc, mh, mw) = map.value().dims4()?;
    if (mn, mc, mh, mw) != (n, 1, h, w) {
        return Err(Error::Structural(format!(
            "cannot scale {:?} by map {:?}",
            x.shape(),
            map.shape()
        )));
    }
    let hw = h * w;
    let (xd, ad) = (x.value().data(), map.value().data());
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for k in 0..c {
            let off = (b * c + k) * hw;
            for p in 0..hw {
                out[off + p] = xd[off + p] * ad[b * hw + p];
            }
        }
    }
    let out = Tensor::from_vec(x.shape(), out)?;
    Ok(Var::from_op(out, vec![x.clone(), map.clone()], ScaleByMapOp))
}

struct ConcatOp {
    channels: Vec<usize>,
}

impl<T: Scalar> Backward<T> for ConcatOp {
    fn backward(&self, grad: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (n, total, h, w) = grad.dims4().expect("rank 4");
        let hw = h * w;
        let g = grad.data();
        let mut start = 0;
        let mut out = Vec::with_capacity(self.channels.len());
        for &c in &self.channels {
            let mut part = Vec::with_capacity(n * c * hw);
            for b in 0..n {
                let off = (b * total + start) * hw;
                part.extend_from_slice(&g[off..off + c * hw]);
            }
            out.push(Some(Tensor::from_vec(&[n, c, h, w], part).expect("sizes add up")));
            start += c;
        }
        out
    }
}

/// Concatenates feature maps along the channel axis.
pub fn concat_channels<T: Scalar>(parts: &[Var<T>]) -> Result<Var<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Structural("concat of zero inputs".into()))?;
    let (n, _, h, w) = first.value().dims4()?;
    let mut channels = Vec::with_capacity(parts.len());
    for p in parts {
        let (pn, pc, ph, pw) = p.value().dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Structural(format!(
                "concat inputs disagree: {:?} vs {:?}",
                first.shape(),
                p.shape()
            )));
        }
        channels.push(pc);
    }
    let total: usize = channels.iter().sum();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * total * hw);
    for b in 0..n {
        for (p, &c) in parts.iter().zip(&channels) {
            let off = b * c * hw;
            data.extend_from_slice(&p.value().data()[off..off + c * hw]);
        }
    }
    let out = Tensor::from_vec(&[n, total, h, w], data)?;
    Ok(Var::from_op(out, parts.to_vec(), ConcatOp { channels }))
}

struct SumOp;

impl<T: Scalar> Backward<T> for SumOp {
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))]
    }
}

/// Sum of all elements, as a scalar node.
pub fn sum<T: Scalar>(x: &Var<T>) -> Var<T> {
    Var::from_op(Tensor::scalar(x.value().sum()), vec![x.clone()], SumOp)
}

struct WeightedSumOp<T> {
    weights: Vec<T>,
}

impl<T: Scalar> Backward<T> for WeightedSumOp<T> {
    fn backward(&self, grad: &Tensor<T>, _: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let g = grad.data()[0];
        self.weights
            .iter()
            .map(|&w| Some(Tensor::scalar(w * g)))
            .collect()
    }
}

/// `Σ w_i · x_i` over scalar nodes.
pub fn weighted_sum<T: Scalar>(terms: &[(T, Var<T>)]) -> Result<Var<T>> {
    let mut total = T::zero();
    for (w, v) in terms {
        if v.value().len() != 1 {
            return Err(Error::Structural(format!(
                "weighted_sum expects scalars, got shape {:?}",
                v.shape()
            )));
        }
        total = total + *w * v.value().data()[0];
    }
    let weights = terms.iter().map(|(w, _)| *w).collect();
    let inputs = terms.iter().map(|(_, v)| v.clone()).collect();
    Ok(Var::from_op(
        Tensor::scalar(total),
        inputs,
        WeightedSumOp { weights },
    ))
}

#[cfg(test)]
pub(crate) mod gradcheck {
    use super::*;

    /// Max relative error between the analytic gradient of `f` at `x` and
    /// central differences with step `h`.
    pub fn check(
        x: &Tensor<f64>,
        h: f64,
        f: impl Fn(&Var<f64>) -> Var<f64>,
    ) -> f64 {
        let xv = Var::param(x.clone());
        f(&xv).backward().unwrap();
        let analytic = xv.grad().unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            let fp = f(&Var::constant(plus)).value().data()[0];
            let fm = f(&Var::constant(minus)).value().data()[0];
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
            worst = worst.max(err);
        }
        worst
    }

    pub fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Tensor::from_fn(shape, |_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    /// Random linear functional so vector outputs reduce to a scalar.
    pub fn project(y: &Var<f64>, seed: u64) -> Var<f64> {
        let w = Var::constant(seeded(y.shape(), seed));
        sum(&mul(y, &w))
    }

    struct MulOp;
    impl Backward<f64> for MulOp {
        fn backward(&self, grad: &Tensor<f64>, inputs: &[Var<f64>]) -> Vec<Option<Tensor<f64>>> {
            let a = inputs[0].value();
            let b = inputs[1].value();
            vec![
                Some(grad.zip_map(b, |g, v| g * v).unwrap()),
                Some(grad.zip_map(a, |g, v| g * v).unwrap()),
            ]
        }
    }

    pub fn mul(a: &Var<f64>, b: &Var<f64>) -> Var<f64> {
        let out = a.value().zip_map(b.value(), |x, y| x * y).unwrap();
        Var::from_op(out, vec![a.clone(), b.clone()], MulOp)
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, project, seeded};
    use super::*;

    #[test]
    fn elementwise_gradients() {
        let x = seeded(&[2, 3, 2, 2], 1);
        assert!(check(&x, 1e-5, |v| project(&sigmoid(v), 2)) < 1e-6);
        assert!(check(&x, 1e-5, |v| project(&relu(v), 3)) < 1e-6);
        assert!(check(&x, 1e-5, |v| project(&softmax_channels(v).unwrap(), 4)) < 1e-6);
    }

    #[test]
    fn scale_by_map_gradients_both_inputs() {
        let x = seeded(&[2, 3, 2, 2], 5);
        let a = seeded(&[2, 1, 2, 2], 6);
        let av = Var::constant(a.clone());
        assert!(check(&x, 1e-5, |v| project(&scale_by_map(v, &av).unwrap(), 7)) < 1e-6);
        let xv = Var::constant(x.clone());
        assert!(check(&a, 1e-5, |v| project(&scale_by_map(&xv, v).unwrap(), 7)) < 1e-6);
    }

    #[test]
    fn concat_splits_gradient() {
        let x = seeded(&[2, 3, 2, 2], 8);
        let other = Var::constant(seeded(&[2, 2, 2, 2], 9));
        assert!(
            check(&x, 1e-5, |v| project(
                &concat_channels(&[other.clone(), v.clone(), other.clone()]).unwrap(),
                10
            )) < 1e-6
        );
    }

    #[test]
    fn softmax_sums_to_one() {
        let x = Var::constant(seeded(&[1, 4, 3, 3], 11).map(|v| v * 10.0));
        let s = softmax_channels(&x).unwrap();
        for p in 0..9 {
            let total: f64 = (0..4).map(|k| s.value().data()[k * 9 + p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid_scalar(-1000.0f64), 0.0);
        assert_eq!(sigmoid_scalar(1000.0f64), 1.0);
        assert!((sigmoid_scalar(4.0f64) - 0.982_013_790_037_908_4).abs() < 1e-15);
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Var::constant(Tensor::<f32>::zeros(&[1, 1, 2, 2]));
        let b = Var::constant(Tensor::<f32>::zeros(&[1, 1, 4, 4]));
        assert!(concat_channels(&[a, b]).is_err());
    }
}
