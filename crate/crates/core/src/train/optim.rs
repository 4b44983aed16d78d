//! Adam with coupled L2 weight decay.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const ADAM_BETAS: (f64, f64) = (0.9, 0.999);
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    decay_mask: Vec<bool>,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u64,
}

impl Adam {
    /// `decay_mask[i]` selects the tensors that receive `weight_decay · θ`
    /// in their gradient.
    pub fn new(params: &[Tensor<f32>], decay_mask: &[bool], lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            weight_decay,
            decay_mask: decay_mask.to_vec(),
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Option<Tensor<f32>>]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Structural(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let (b1, b2) = ADAM_BETAS;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = (self.lr * bc2.sqrt() / bc1) as f32;
        let eps = (ADAM_EPS * bc2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            p.expect_same_shape(g)?;
            let wd = if self.decay_mask[i] { self.weight_decay as f32 } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + wd * *w;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *w -= step * *mi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap()];
        let g = vec![Some(Tensor::from_vec(&[3], vec![0.3, -4.0, 0.0]).unwrap())];
        let mut adam = Adam::new(&p, &[false], 0.01, 0.0);
        adam.step(&mut p, &g).unwrap();
        let d = p[0].data();
        assert!((d[0] - 0.99).abs() < 1e-6);
        assert!((d[1] + 1.99).abs() < 1e-6);
        assert_eq!(d[2], 0.5);
    }

    #[test]
    fn decay_only_on_masked_tensors() {
        let mut p = vec![Tensor::full(&[2], 1.0f32), Tensor::full(&[2], 1.0f32)];
        let zero = Some(Tensor::zeros(&[2]));
        let mut adam = Adam::new(&p, &[true, false], 0.1, 5e-4);
        adam.step(&mut p, &[zero.clone(), zero]).unwrap();
        assert!(p[0].data()[0] < 1.0);
        assert_eq!(p[1].data()[0], 1.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![Tensor::from_vec(&[2], vec![3.0f32, -1.0]).unwrap()];
        let mut adam = Adam::new(&p, &[false], 0.05, 0.0);
        for _ in 0..500 {
            let g = p[0].map(|x| 2.0 * (x - 0.5));
            adam.step(&mut p, &[Some(g)]).unwrap();
        }
        assert!(p[0].data().iter().all(|x| (x - 0.5).abs() < 1e-2));
    }
}
