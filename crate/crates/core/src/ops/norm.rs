use crate::autograd::{Backward, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and report them for running updates.
    Train,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Per-channel statistics of one training batch.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity blended into running estimates.
    pub var_unbiased: Vec<T>,
}

struct BatchNormOp<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

impl<T: Scalar> Backward<T> for BatchNormOp<T> {
    fn backward(&self, grad: &Tensor<T>, inputs: &[Var<T>]) -> Vec<Option<Tensor<T>>> {
        let (n, c, h, w) = grad.dims4().expect("rank 4");
        let hw = h * w;
        let m = T::from_usize(n * hw).expect("count fits");
        let gamma = inputs[1].value().data();
        let (g, xh) = (grad.data(), self.xhat.data());
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..n {
            for k in 0..c {
                let off = (b * c + k) * hw;
                for p in off..off + hw {
                    dbeta[k] = dbeta[k] + g[p];
                    dgamma[k] = dgamma[k] + g[p] * xh[p];
                }
            }
        }
        let dx = inputs[0].requires_grad().then(|| {
            let mut dx = vec![T::zero(); g.len()];
            for b in 0..n {
                for k in 0..c {
                    let off = (b * c + k) * hw;
                    let scale = gamma[k] * self.inv_std[k];
                    for p in off..off + hw {
                        dx[p] = if self.batch_stats {
                            scale * (g[p] - (dbeta[k] + xh[p] * dgamma[k]) / m)
                        } else {
                            scale * g[p]
                        };
                    }
                }
            }
            Tensor::from_vec(grad.shape(), dx).expect("same shape")
        });
        vec![
            dx,
            Some(Tensor::from_vec(&[c], dgamma).expect("c")),
            Some(Tensor::from_vec(&[c], dbeta).expect("c")),
        ]
    }
}

/// 2-D batch normalization over (N, H, W) per channel.
///
/// In [`NormMode::Train`] the batch statistics are returned so the caller can
/// update its running estimates.
pub fn batch_norm<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running_mean: &[T],
    running_var: &[T],
    mode: NormMode,
) -> Result<(Var<T>, Option<BatchStats<T>>)> {
    let (n, c, h, w) = x.value().dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || running_mean.len() != c || running_var.len() != c {
        return Err(Error::Structural(format!(
            "batch-norm parameters do not match {c} channels of {:?}",
            x.shape()
        )));
    }
    let hw = h * w;
    let count = n * hw;
    let eps = T::from_f64_lossy(BN_EPS);
    let xd = x.value().data();

    let (mean, var, stats) = match mode {
        NormMode::Train => {
            if count < 2 {
                return Err(Error::Structural(format!(
                    "batch-norm training needs more than one value per channel, got {:?}",
                    x.shape()
                )));
            }
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let cnt = T::from_usize(count).expect("count fits");
            for b in 0..n {
                for k in 0..c {
                    let off = (b * c + k) * hw;
                    mean[k] = mean[k] + xd[off..off + hw].iter().copied().sum::<T>();
                }
            }
            for m in &mut mean {
                *m = *m / cnt;
            }
            for b in 0..n {
                for k in 0..c {
                    let off = (b * c + k) * hw;
                    let mk = mean[k];
                    var[k] = var[k]
                        + xd[off..off + hw]
                            .iter()
                            .map(|&v| (v - mk) * (v - mk))
                            .sum::<T>();
                }
            }
            let unbiased = var
                .iter()
                .map(|&v| v / T::from_usize(count - 1).expect("count fits"))
                .collect();
            for v in &mut var {
                *v = *v / cnt;
            }
            let stats = BatchStats {
                mean: mean.clone(),
                var_unbiased: unbiased,
            };
            (mean, var, Some(stats))
        }
        NormMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
    };

    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let (gd, bd) = (gamma.value().data(), beta.value().data());
    let mut xhat = vec![T::zero(); xd.len()];
    let mut out = vec![T::zero(); xd.len()];
    for b in 0..n {
        for k in 0..c {
            let off = (b * c + k) * hw;
            for p in off..off + hw {
                let v = (xd[p] - mean[k]) * inv_std[k];
                xhat[p] = v;
                out[p] = gd[k] * v + bd[k];
            }
        }
    }
    let value = Tensor::from_vec(x.shape(), out)?;
    let op = BatchNormOp {
        xhat: Tensor::from_vec(x.shape(), xhat)?,
        inv_std,
        batch_stats: mode == NormMode::Train,
    };
    Ok((
        Var::from_op(value, vec![x.clone(), gamma.clone(), beta.clone()], op),
        stats,
    ))
}
