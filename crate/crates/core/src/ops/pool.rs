use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::conv_output_size;

struct MaxPoolOp {
    /// Flat input index chosen for every output element.
    argmax: Vec<u32>,
}

impl<T: Scalar> Backward<T> for MaxPoolOp {
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let mut dx = vec![T::zero(); inputs[0].value().len()];
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            dx[src as usize] = dx[src as usize] + g;
        }
        vec![Some(Tensor::from_vec(inputs[0].shape(), dx).expect("input shape"))]
    }
}

/// Max pooling with implicit `-inf` padding.
pub fn max_pool2d<T: Scalar>(x: &Var<T>, kernel: usize, stride: usize, pad: usize) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if pad * 2 > kernel || stride == 0 {
        return Err(Error::Structural(format!(
            "invalid pooling k={kernel} s={stride} p={pad}"
        )));
    }
    let (ho, wo) = match (conv_output_size(h, kernel, stride, pad), conv_output_size(w, kernel, stride, pad)) {
        (Some(ho), Some(wo)) if ho > 0 && wo > 0 => (ho, wo),
        _ => {
            return Err(Error::Structural(format!(
                "pooling window {kernel} does not fit {:?}",
                x.shape()
            )))
        }
    };
    if x.value().len() > u32::MAX as usize {
        return Err(Error::Structural("tensor too large for pooling indices".into()));
    }
    let xd = x.value().data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut best_idx = base;
                let mut found = false;
                for ky in 0..kernel {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kernel {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = base + iy as usize * w + ix as usize;
                        if !found || xd[idx] > best {
                            best = xd[idx];
                            best_idx = idx;
                            found = true;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx as u32);
            }
        }
    }
    let value = Tensor::from_vec(&[n, c, ho, wo], out)?;
    Ok(Var::from_op(value, vec![x.clone()], MaxPoolOp { argmax }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check, project, seeded};

    #[test]
    fn pools_two_by_two() {
        let x = Var::constant(
            Tensor::from_vec(&[1, 1, 2, 4], vec![1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 6.0]).unwrap(),
        );
        let y = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.value().data(), &[5.0, 7.0]);
    }

    #[test]
    fn resnet_stem_pool_halves() {
        let x = Var::constant(Tensor::<f32>::zeros(&[1, 2, 256, 256]));
        assert_eq!(max_pool2d(&x, 3, 2, 1).unwrap().shape(), &[1, 2, 128, 128]);
    }

    #[test]
    fn gradient_routes_to_maxima() {
        // Distinct values keep the argmax stable under the finite-difference step.
        let x = seeded(&[2, 2, 5, 5], 3);
        assert!(check(&x, 1e-7, |v| project(&max_pool2d(v, 3, 2, 1).unwrap(), 4)) < 1e-6);
        assert!(check(&x, 1e-7, |v| project(&max_pool2d(v, 2, 2, 0).unwrap(), 4)) < 1e-6);
    }
}
