//! Attention gate on a skip connection.
//!
//! The gating signal `g` and skip features `x` are projected to a shared
//! intermediate width by 1×1 convolutions, summed and rectified into the
//! context map `d`. A soft attention rule turns `d` into coefficients `ρ`,
//! which rescale `x` pixel-wise.

use crate::arch::gate_resample_factor;
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{add, conv2d, relu, resize_bilinear, scale_by_map, sigmoid, softmax_channels};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionGateSpec {
    pub skip_channels: usize,
    pub gate_channels: usize,
    pub inter_channels: usize,
}

impl AttentionGateSpec {
    /// Intermediate width defaults to half the skip width.
    pub fn halving(skip_channels: usize, gate_channels: usize) -> Self {
        AttentionGateSpec {
            skip_channels,
            gate_channels,
            inter_channels: (skip_channels / 2).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.skip_channels == 0 || self.gate_channels == 0 || self.inter_channels == 0 {
            return Err(Error::Structural(format!("attention gate widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    SigmoidBinary,
    SoftmaxMulticlass,
}

/// Maps the context map `d` to attention coefficients through per-channel
/// weights `V` (a 1×1 convolution).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SoftAttentionRule {
    pub mode: AttentionMode,
}

impl SoftAttentionRule {
    /// `v_weight` is `(classes, C_d, 1, 1)`. Sigmoid mode requires one class.
    pub fn apply<T: Scalar>(&self, d: &Var<T>, v_weight: &Var<T>, v_bias: Option<&Var<T>>) -> Result<Var<T>> {
        let logits = conv2d(d, v_weight, v_bias, 1, 0)?;
        match self.mode {
            AttentionMode::SigmoidBinary => {
                if logits.shape()[1] != 1 {
                    return Err(Error::Structural(format!(
                        "sigmoid attention needs one coefficient channel, got {}",
                        logits.shape()[1]
                    )));
                }
                Ok(sigmoid(&logits))
            }
            AttentionMode::SoftmaxMulticlass => softmax_channels(&logits),
        }
    }
}

/// Learnable tensors of one gate.
#[derive(Clone, Debug)]
pub struct GateWeights<T: Scalar> {
    /// `(inter, gate, 1, 1)` and `(inter)`.
    pub wg: Var<T>,
    pub wg_bias: Var<T>,
    /// `(inter, skip, 1, 1)`.
    pub wx: Var<T>,
    /// `(1, inter, 1, 1)` and `(1)`.
    pub psi: Var<T>,
    pub psi_bias: Var<T>,
}

fn check_finite<T: Scalar>(v: &Var<T>, what: &str) -> Result<()> {
    if v.value().all_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite values in attention-gate {what}")))
    }
}

/// Gate `x_l` by coefficients computed from `g` and `x_l`.
///
/// When `g` is coarser than `x_l` by an integer factor, its projection is
/// bilinearly upsampled before the sum.
pub fn attention_gate_forward<T: Scalar>(
    g: &Var<T>,
    x_l: &Var<T>,
    spec: &AttentionGateSpec,
    weights: &GateWeights<T>,
) -> Result<Var<T>> {
    spec.validate()?;
    let (gn, gc, gh, gw) = g.value().dims4()?;
    let (xn, xc, xh, xw) = x_l.value().dims4()?;
    if gn != xn || gc != spec.gate_channels || xc != spec.skip_channels {
        return Err(Error::Structural(format!(
            "attention gate {spec:?} cannot take gating signal {:?} and skip features {:?}",
            g.shape(),
            x_l.shape()
        )));
    }
    gate_resample_factor((xh, xw), (gh, gw)).map_err(|_| {
        Error::Structural(format!(
            "attention gate: gating signal {:?} does not resample onto skip features {:?}",
            g.shape(),
            x_l.shape()
        ))
    })?;
    check_finite(g, "gating signal")?;
    check_finite(x_l, "skip features")?;

    let mut pg = conv2d(g, &weights.wg, Some(&weights.wg_bias), 1, 0)?;
    if (gh, gw) != (xh, xw) {
        pg = resize_bilinear(&pg, xh, xw)?;
    }
    let px = conv2d(x_l, &weights.wx, None, 1, 0)?;
    let d = relu(&add(&pg, &px)?);
    let rule = SoftAttentionRule { mode: AttentionMode::SigmoidBinary };
    let rho = rule.apply(&d, &weights.psi, Some(&weights.psi_bias))?;
    scale_by_map(x_l, &rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::gradcheck::{check, project, seeded};
    use crate::tensor::Tensor;

    fn constant<T: Scalar>(shape: &[usize], v: f64) -> Var<T> {
        Var::constant(Tensor::full(shape, T::from_f64_lossy(v)))
    }

    fn identity_weights() -> GateWeights<f64> {
        GateWeights {
            wg: constant(&[1, 1, 1, 1], 1.0),
            wg_bias: constant(&[1], 0.0),
            wx: constant(&[1, 1, 1, 1], 1.0),
            psi: constant(&[1, 1, 1, 1], 1.0),
            psi_bias: constant(&[1], 0.0),
        }
    }

    fn unit_spec() -> AttentionGateSpec {
        AttentionGateSpec { skip_channels: 1, gate_channels: 1, inter_channels: 1 }
    }

    #[test]
    fn scalar_identity_example() {
        let g = constant::<f64>(&[1, 1, 1, 1], 2.0);
        let x = constant::<f64>(&[1, 1, 1, 1], 2.0);
        let out = attention_gate_forward(&g, &x, &unit_spec(), &identity_weights()).unwrap();
        let expect = 2.0 / (1.0 + (-4.0f64).exp());
        assert!((out.value().data()[0] - expect).abs() < 1e-12);
        assert!((out.value().data()[0] - 1.96403).abs() < 1e-5);
    }

    #[test]
    fn saturation_limits() {
        let g = constant::<f64>(&[1, 1, 2, 2], 1.0);
        let x = constant::<f64>(&[1, 1, 2, 2], 1.0);
        let mut w = identity_weights();
        w.psi = constant(&[1, 1, 1, 1], 1e3);
        let out = attention_gate_forward(&g, &x, &unit_spec(), &w).unwrap();
        assert!(out.value().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        w.psi = constant(&[1, 1, 1, 1], -1e3);
        let out = attention_gate_forward(&g, &x, &unit_spec(), &w).unwrap();
        assert!(out.value().data().iter().all(|&v| v.abs() < 1e-12));
    }

    fn random_weights(spec: &AttentionGateSpec, seed: u64) -> GateWeights<f64> {
        let i = spec.inter_channels;
        GateWeights {
            wg: Var::constant(seeded(&[i, spec.gate_channels, 1, 1], seed)),
            wg_bias: Var::constant(seeded(&[i], seed + 1)),
            wx: Var::constant(seeded(&[i, spec.skip_channels, 1, 1], seed + 2)),
            psi: Var::constant(seeded(&[1, i, 1, 1], seed + 3)),
            psi_bias: Var::constant(seeded(&[1], seed + 4)),
        }
    }

    #[test]
    fn coefficients_shrink_magnitudes() {
        let spec = AttentionGateSpec::halving(4, 6);
        let w = random_weights(&spec, 10);
        let x = Var::constant(seeded(&[2, 4, 4, 4], 1).map(|v| 3.0 * v));
        let g = Var::constant(seeded(&[2, 6, 2, 2], 2));
        let out = attention_gate_forward(&g, &x, &spec, &w).unwrap();
        assert_eq!(out.shape(), x.shape());
        for (o, i) in out.value().data().iter().zip(x.value().data()) {
            assert!(o.abs() <= i.abs());
            if *i != 0.0 {
                let rho = o / i;
                assert!(rho > 0.0 && rho < 1.0);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // 2 skip channels, 2 gate channels, 1 intermediate: 12 weight scalars.
        let spec = AttentionGateSpec::halving(2, 2);
        let w = random_weights(&spec, 20);
        let x = seeded(&[1, 2, 2, 2], 5);
        let g = seeded(&[1, 2, 1, 1], 6);
        let (xv, gv) = (Var::constant(x.clone()), Var::constant(g.clone()));
        let run = |g: &Var<f64>, x: &Var<f64>, w: &GateWeights<f64>| {
            project(&attention_gate_forward(g, x, &spec, w).unwrap(), 9)
        };
        assert!(check(&x, 1e-6, |v| run(&gv, v, &w)) < 1e-3);
        assert!(check(&g, 1e-6, |v| run(v, &xv, &w)) < 1e-3);
        let fields: [fn(&mut GateWeights<f64>) -> &mut Var<f64>; 5] = [
            |w| &mut w.wg,
            |w| &mut w.wg_bias,
            |w| &mut w.wx,
            |w| &mut w.psi,
            |w| &mut w.psi_bias,
        ];
        for field in fields {
            let base = field(&mut w.clone()).value().clone();
            let err = check(&base, 1e-6, |v| {
                let mut ww = w.clone();
                *field(&mut ww) = v.clone();
                run(&gv, &xv, &ww)
            });
            assert!(err < 1e-3, "{err}");
        }
    }

    #[test]
    fn mismatched_sizes_name_both_shapes() {
        let spec = unit_spec();
        let g = constant::<f64>(&[1, 1, 3, 3], 1.0);
        let x = constant::<f64>(&[1, 1, 8, 8], 1.0);
        let err = attention_gate_forward(&g, &x, &spec, &identity_weights()).unwrap_err().to_string();
        assert!(err.contains("[1, 1, 3, 3]") && err.contains("[1, 1, 8, 8]"), "{err}");
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let g = constant::<f64>(&[1, 1, 1, 1], f64::NAN);
        let x = constant::<f64>(&[1, 1, 1, 1], 1.0);
        let err = attention_gate_forward(&g, &x, &unit_spec(), &identity_weights()).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn softmax_rule_sums_to_one() {
        let d = Var::constant(seeded(&[2, 3, 4, 4], 1));
        let v = Var::constant(seeded(&[4, 3, 1, 1], 2));
        let rule = SoftAttentionRule { mode: AttentionMode::SoftmaxMulticlass };
        let rho = rule.apply(&d, &v, None).unwrap();
        let data = rho.value().data();
        for b in 0..2 {
            for p in 0..16 {
                let s: f64 = (0..4).map(|c| data[(b * 4 + c) * 16 + p]).sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
        let sig = SoftAttentionRule { mode: AttentionMode::SigmoidBinary };
        assert!(sig.apply(&d, &v, None).is_err());
    }
}
