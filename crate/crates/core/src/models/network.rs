//! Executable networks compiled from an [`ArchSpec`].

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerKind};
use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::ops::{
    add, batch_norm, concat_channels, conv2d, conv_transpose2d, max_pool2d, relu, resize_bilinear, sigmoid,
    BatchStats, NormMode,
};
use crate::tensor::{Scalar, Tensor};

use super::gate::{attention_gate_forward, AttentionGateSpec, GateWeights};

/// Running-statistics momentum of batch normalization.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    BenignTeacher,
    MalignantTeacher,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::BenignTeacher => "benign_teacher",
            Role::MalignantTeacher => "malignant_teacher",
            Role::Student => "student",
        })
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
    buffer: usize,
}

#[derive(Clone, Debug)]
enum Step {
    Conv(Conv),
    TransposeConv(Conv),
    Norm(Norm),
    Relu,
    Sigmoid,
    MaxPool { kernel: usize, stride: usize, pad: usize },
    Bottleneck { convs: [(Conv, Norm); 3], projection: Option<(Conv, Norm)> },
    Gate { spec: AttentionGateSpec, params: [usize; 5] },
    Concat,
    Resize(usize),
}

/// Running mean and variance of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NormBuffer<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Batch statistics gathered by a training-mode forward pass.
pub type CollectedStats<T> = Vec<(usize, BatchStats<T>)>;

/// A network instance: spec, named parameters, normalization buffers and
/// the compiled execution plan.
#[derive(Clone, Debug)]
pub struct Network<T: Scalar> {
    spec: ArchSpec,
    role: Role,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    decay: Vec<bool>,
    buffers: Vec<NormBuffer<T>>,
    steps: Vec<Step>,
    slots: Vec<Vec<usize>>,
    /// Last layer index reading each value slot.
    last_use: Vec<usize>,
}

/// The f32 network used for training and inference.
pub type NetworkHandle = Network<f32>;

struct Builder<T: Scalar> {
    rng: ChaCha8Rng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    decay: Vec<bool>,
    buffers: Vec<NormBuffer<T>>,
}

impl<T: Scalar> Builder<T> {
    fn add(&mut self, name: String, value: Tensor<T>, decay: bool) -> usize {
        self.names.push(name);
        self.params.push(value);
        self.decay.push(decay);
        self.params.len() - 1
    }

    /// Kaiming-normal weight with the given fan-in.
    fn kaiming(&mut self, name: String, shape: &[usize], fan_in: usize) -> usize {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let rng = &mut self.rng;
        let t = Tensor::from_fn(shape, |_| T::from_f64_lossy(normal.sample(rng)));
        self.add(name, t, true)
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool) -> Conv {
        let weight = self.kaiming(format!("{prefix}.weight"), &[cout, cin, k, k], cin * k * k);
        let bias = bias.then(|| self.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]), true));
        Conv { weight, bias, stride, pad }
    }

    fn transpose_conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> Conv {
        let weight = self.kaiming(format!("{prefix}.weight"), &[cin, cout, k, k], cout * k * k);
        let bias = bias.then(|| self.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]), true));
        Conv { weight, bias, stride, pad: 0 }
    }

    fn norm(&mut self, prefix: &str, c: usize) -> Norm {
        let gamma = self.add(format!("{prefix}.gamma"), Tensor::full(&[c], T::one()), false);
        let beta = self.add(format!("{prefix}.beta"), Tensor::zeros(&[c]), false);
        self.buffers.push(NormBuffer {
            name: prefix.to_string(),
            mean: vec![T::zero(); c],
            var: vec![T::one(); c],
        });
        Norm { gamma, beta, buffer: self.buffers.len() - 1 }
    }
}

impl<T: Scalar> Network<T> {
    /// Instantiates `spec` with seeded fan-in-scaled weights, zero biases and
    /// unit/zero normalization parameters.
    pub fn new(spec: ArchSpec, role: Role, seed: u64) -> Result<Self> {
        spec.validate()?;
        let slots = spec.resolve_inputs()?;
        let mut b = Builder::<T> {
            rng: ChaCha8Rng::seed_from_u64(seed),
            names: Vec::new(),
            params: Vec::new(),
            decay: Vec::new(),
            buffers: Vec::new(),
        };
        let mut steps = Vec::with_capacity(spec.layers.len());
        for l in &spec.layers {
            let n = l.name.as_str();
            let (cin, cout) = (l.in_channels, l.out_channels);
            let step = match l.kind {
                LayerKind::Conv => Step::Conv(b.conv(n, cin, cout, l.kernel, l.stride, l.padding, l.has_bias)),
                LayerKind::TransposeConv => {
                    if l.padding != 0 {
                        return Err(Error::Structural(format!("layer {n:?}: padded transposed conv is not supported")));
                    }
                    Step::TransposeConv(b.transpose_conv(n, cin, cout, l.kernel, l.stride, l.has_bias))
                }
                LayerKind::BatchNorm => Step::Norm(b.norm(n, cin)),
                LayerKind::Relu => Step::Relu,
                LayerKind::Sigmoid => Step::Sigmoid,
                LayerKind::MaxPool => Step::MaxPool { kernel: l.kernel, stride: l.stride, pad: l.padding },
                LayerKind::BottleneckBlock => {
                    let mid = l.mid_channels.unwrap_or(0);
                    let c1 = b.conv(&format!("{n}.conv1"), cin, mid, 1, 1, 0, false);
                    let n1 = b.norm(&format!("{n}.bn1"), mid);
                    let c2 = b.conv(&format!("{n}.conv2"), mid, mid, 3, l.stride, 1, false);
                    let n2 = b.norm(&format!("{n}.bn2"), mid);
                    let c3 = b.conv(&format!("{n}.conv3"), mid, cout, 1, 1, 0, false);
                    let n3 = b.norm(&format!("{n}.bn3"), cout);
                    let projection = l.has_projection().then(|| {
                        let c = b.conv(&format!("{n}.proj"), cin, cout, 1, l.stride, 0, false);
                        (c, b.norm(&format!("{n}.proj_bn"), cout))
                    });
                    Step::Bottleneck { convs: [(c1, n1), (c2, n2), (c3, n3)], projection }
                }
                LayerKind::AttentionGate => {
                    let spec = AttentionGateSpec {
                        skip_channels: cin,
                        gate_channels: l.gate_channels.unwrap_or(0),
                        inter_channels: l.mid_channels.unwrap_or(0),
                    };
                    let wg = b.conv(&format!("{n}.wg"), spec.gate_channels, spec.inter_channels, 1, 1, 0, true);
                    let wx = b.conv(&format!("{n}.wx"), cin, spec.inter_channels, 1, 1, 0, false);
                    let psi = b.conv(&format!("{n}.psi"), spec.inter_channels, 1, 1, 1, 0, true);
                    Step::Gate {
                        spec,
                        params: [wg.weight, wg.bias.expect("bias"), wx.weight, psi.weight, psi.bias.expect("bias")],
                    }
                }
                LayerKind::Concat => Step::Concat,
                LayerKind::BilinearResize => Step::Resize(l.scale.unwrap_or(1)),
            };
            steps.push(step);
        }
        let mut last_use = vec![0; spec.layers.len() + 1];
        for (i, ins) in slots.iter().enumerate() {
            for &s in ins {
                last_use[s] = i;
            }
        }
        let Builder { names, params, decay, buffers, .. } = b;
        Ok(Network { spec, role, names, params, decay, buffers, steps, slots, last_use })
    }

    pub fn spec(&self) -> &ArchSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn set_role(&mut self, role: Role) {
        self.role = role;
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    /// Whether each parameter is subject to weight decay (conv weights and
    /// biases) or not (normalization scale and shift).
    pub fn decay_mask(&self) -> &[bool] {
        &self.decay
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn buffers(&self) -> &[NormBuffer<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NormBuffer<T>] {
        &mut self.buffers
    }

    /// Number of instantiated learnable scalars.
    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|t| t.len() as u64).sum()
    }

    /// Wraps every parameter in a leaf variable.
    pub fn bind(&self, requires_grad: bool) -> Vec<Var<T>> {
        self.params.iter().map(|p| Var::leaf(p.clone(), requires_grad)).collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = match shape {
            [_, c, h, w] => (*c, *h, *w),
            _ => return Err(Error::Structural(format!("network input must have 4 axes, got {shape:?}"))),
        };
        if c != self.spec.in_channels {
            return Err(Error::Structural(format!(
                "{} expects {} input channels, got {c}",
                self.spec.name, self.spec.in_channels
            )));
        }
        let d = self.spec.input_divisor.max(1);
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::Structural(format!(
                "{} input {h}x{w} is not a positive multiple of {d}",
                self.spec.name
            )));
        }
        Ok(())
    }

    /// Runs the graph with explicit parameter variables. Training mode also
    /// returns the batch statistics of every normalization layer.
    pub fn forward_with(&self, params: &[Var<T>], x: &Var<T>, mode: NormMode) -> Result<(Var<T>, CollectedStats<T>)> {
        if params.len() != self.params.len() {
            return Err(Error::Structural(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.check_input(x.shape())?;
        let mut stats = Vec::new();
        let mut values: Vec<Option<Var<T>>> = vec![None; self.steps.len() + 1];
        values[0] = Some(x.clone());
        let p = |i: usize| &params[i];
        let conv = |v: &Var<T>, c: &Conv| conv2d(v, p(c.weight), c.bias.map(p), c.stride, c.pad);
        let norm = |v: &Var<T>, n: &Norm, stats: &mut CollectedStats<T>| -> Result<Var<T>> {
            let buf = &self.buffers[n.buffer];
            let (y, s) = batch_norm(v, p(n.gamma), p(n.beta), &buf.mean, &buf.var, mode)?;
            if let Some(s) = s {
                stats.push((n.buffer, s));
            }
            Ok(y)
        };
        for (i, step) in self.steps.iter().enumerate() {
            let ins: Vec<&Var<T>> = self.slots[i]
                .iter()
                .map(|&s| values[s].as_ref().expect("slot computed before use"))
                .collect();
            let a = ins[0];
            let out = match step {
                Step::Conv(c) => conv(a, c)?,
                Step::TransposeConv(c) => conv_transpose2d(a, p(c.weight), c.bias.map(p), c.stride, 0)?,
                Step::Norm(n) => norm(a, n, &mut stats)?,
                Step::Relu => relu(a),
                Step::Sigmoid => sigmoid(a),
                Step::MaxPool { kernel, stride, pad } => max_pool2d(a, *kernel, *stride, *pad)?,
                Step::Bottleneck { convs, projection } => {
                    let mut h = a.clone();
                    for (k, (c, n)) in convs.iter().enumerate() {
                        h = norm(&conv(&h, c)?, n, &mut stats)?;
                        if k < 2 {
                            h = relu(&h);
                        }
                    }
                    let shortcut = match projection {
                        Some((c, n)) => norm(&conv(a, c)?, n, &mut stats)?,
                        None => a.clone(),
                    };
                    relu(&add(&h, &shortcut)?)
                }
                Step::Gate { spec, params: [wg, wgb, wx, psi, psib] } => {
                    let weights = GateWeights {
                        wg: p(*wg).clone(),
                        wg_bias: p(*wgb).clone(),
                        wx: p(*wx).clone(),
                        psi: p(*psi).clone(),
                        psi_bias: p(*psib).clone(),
                    };
                    attention_gate_forward(ins[1], a, spec, &weights)?
                }
                Step::Concat => {
                    let parts: Vec<Var<T>> = ins.iter().map(|v| (*v).clone()).collect();
                    concat_channels(&parts)?
                }
                Step::Resize(scale) => {
                    let (_, _, h, w) = a.value().dims4()?;
                    resize_bilinear(a, h * scale, w * scale)?
                }
            };
            if !out.value().all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite activations after layer {:?}",
                    self.spec.layers[i].name
                )));
            }
            values[i + 1] = Some(out);
            for &s in &self.slots[i] {
                if self.last_use[s] == i && s != 0 {
                    values[s] = None;
                }
            }
        }
        let out = values.pop().flatten().unwrap_or_else(|| x.clone());
        Ok((out, stats))
    }

    /// Folds collected batch statistics into the running estimates.
    pub fn apply_stats(&mut self, stats: CollectedStats<T>) {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        for (i, s) in stats {
            let buf = &mut self.buffers[i];
            for (r, v) in buf.mean.iter_mut().zip(&s.mean) {
                *r = (T::one() - m) * *r + m * *v;
            }
            for (r, v) in buf.var.iter_mut().zip(&s.var_unbiased) {
                *r = (T::one() - m) * *r + m * *v;
            }
        }
    }

    /// Training-mode forward pass that also updates running statistics.
    pub fn forward_train(&mut self, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
        let (y, stats) = self.forward_with(params, x, NormMode::Train)?;
        self.apply_stats(stats);
        Ok(y)
    }

    /// Inference-mode logits.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let params = self.bind(false);
        let (y, _) = self.forward_with(&params, &Var::constant(x.clone()), NormMode::Eval)?;
        Ok(y.value().clone())
    }

    /// Inference-mode foreground probabilities.
    pub fn predict_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(x)?.map(crate::ops::sigmoid_scalar))
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let cast_vec = |v: &[T]| v.iter().map(|x| U::from_f64_lossy(x.to_f64_lossy())).collect();
        Network {
            spec: self.spec.clone(),
            role: self.role,
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            decay: self.decay.clone(),
            buffers: self
                .buffers
                .iter()
                .map(|b| NormBuffer { name: b.name.clone(), mean: cast_vec(&b.mean), var: cast_vec(&b.var) })
                .collect(),
            steps: self.steps.clone(),
            slots: self.slots.clone(),
            last_use: self.last_use.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complexity::count_params;
    use crate::models::{student_spec, teacher_spec, StudentConfig, TeacherConfig};

    fn tiny_student() -> StudentConfig {
        StudentConfig { in_channels: 3, widths: vec![4, 8, 16], resolution: 16 }
    }

    #[test]
    fn instantiated_count_matches_analyzer() {
        for spec in [
            student_spec(&StudentConfig::default()).unwrap(),
            teacher_spec(&TeacherConfig::compact()).unwrap(),
            student_spec(&tiny_student()).unwrap(),
        ] {
            let expect = count_params(&spec).unwrap();
            let net = Network::<f32>::new(spec, Role::Student, 0).unwrap();
            assert_eq!(net.param_count(), expect);
        }
    }

    #[test]
    fn student_shape_contract() {
        let net = Network::<f32>::new(student_spec(&tiny_student()).unwrap(), Role::Student, 1).unwrap();
        let x = Tensor::from_fn(&[3, 3, 16, 24], |i| (i % 7) as f32 / 7.0);
        assert_eq!(net.infer(&x).unwrap().shape(), &[3, 1, 16, 24]);
    }

    #[test]
    fn compact_teacher_shape_contract() {
        let net = Network::<f32>::new(teacher_spec(&TeacherConfig::compact()).unwrap(), Role::BenignTeacher, 2).unwrap();
        let x = Tensor::from_fn(&[2, 3, 64, 32], |i| ((i * 31) % 11) as f32 / 11.0);
        let y = net.infer(&x).unwrap();
        assert_eq!(y.shape(), &[2, 1, 64, 32]);
        assert!(y.all_finite());
    }

    #[test]
    fn zero_head_gives_half_probabilities() {
        let mut net = Network::<f32>::new(student_spec(&tiny_student()).unwrap(), Role::Student, 3).unwrap();
        net.param_mut("head.weight").unwrap().data_mut().fill(0.0);
        net.param_mut("head.bias").unwrap().data_mut().fill(0.0);
        let x = Tensor::from_fn(&[1, 3, 16, 16], |i| (i % 5) as f32);
        let p = net.predict_probs(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn inference_is_bit_identical() {
        let net = Network::<f32>::new(student_spec(&tiny_student()).unwrap(), Role::Student, 4).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 13) % 17) as f32 / 17.0);
        assert_eq!(net.infer(&x).unwrap(), net.infer(&x).unwrap());
    }

    #[test]
    fn input_errors_are_structural() {
        let net = Network::<f32>::new(student_spec(&tiny_student()).unwrap(), Role::Student, 5).unwrap();
        assert!(matches!(net.infer(&Tensor::zeros(&[1, 1, 16, 16])), Err(Error::Structural(_))));
        assert!(matches!(net.infer(&Tensor::zeros(&[1, 3, 18, 16])), Err(Error::Structural(_))));
    }

    #[test]
    fn running_stats_move_toward_batch_stats() {
        let mut net = Network::<f32>::new(student_spec(&tiny_student()).unwrap(), Role::Student, 6).unwrap();
        let params = net.bind(false);
        let x = Var::constant(Tensor::from_fn(&[2, 3, 16, 16], |i| 2.0 + (i % 3) as f32));
        let (_, stats) = net.forward_with(&params, &x, NormMode::Train).unwrap();
        let first = stats.iter().find(|(i, _)| *i == 0).unwrap().1.clone();
        net.apply_stats(stats);
        let b = &net.buffers()[0];
        for k in 0..b.mean.len() {
            assert!((b.mean[k] - 0.1 * first.mean[k]).abs() < 1e-6);
            assert!((b.var[k] - (0.9 + 0.1 * first.var_unbiased[k])).abs() < 1e-5);
        }
    }

    #[test]
    fn seeds_control_initialization() {
        let spec = student_spec(&tiny_student()).unwrap();
        let a = Network::<f32>::new(spec.clone(), Role::Student, 7).unwrap();
        let b = Network::<f32>::new(spec.clone(), Role::Student, 7).unwrap();
        let c = Network::<f32>::new(spec, Role::Student, 8).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn handle_is_send() {
        fn assert_send<S: Send>() {}
        assert_send::<NetworkHandle>();
    }
}
