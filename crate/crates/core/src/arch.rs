//! Declarative layer graphs.
//!
//! An [`ArchSpec`] is the single description from which a network is
//! instantiated and from which parameter counts and FLOPs are derived. Layers
//! are named; each layer reads the outputs of earlier layers (or the network
//! input, named [`INPUT`]) listed in `inputs`, defaulting to the previous layer.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops::{conv_output_size, conv_transpose_output_size};

/// Reserved name of the network input.
pub const INPUT: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    BatchNorm,
    Relu,
    Sigmoid,
    MaxPool,
    TransposeConv,
    /// Residual unit: 1×1 reduce → 3×3 (strided) → 1×1 expand, projection
    /// shortcut when the stride or width changes.
    BottleneckBlock,
    /// Inputs `[skip, gate]`; output has the skip's shape.
    AttentionGate,
    Concat,
    BilinearResize,
}

fn is_one(v: &usize) -> bool {
    *v == 1
}

fn one() -> usize {
    1
}

fn is_zero(v: &usize) -> bool {
    *v == 0
}

fn is_false(v: &bool) -> bool {
    !*v
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<String>,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub kernel: usize,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub stride: usize,
    #[serde(default, skip_serializing_if = "is_zero")]
    pub padding: usize,
    #[serde(default, skip_serializing_if = "is_false")]
    pub has_bias: bool,
    /// Bottleneck inner width, or attention-gate intermediate width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mid_channels: Option<usize>,
    /// Channel count of an attention gate's gating input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_channels: Option<usize>,
    /// Integer upsampling factor of a bilinear resize.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<usize>,
}

impl LayerSpec {
    fn base(name: &str, kind: LayerKind, in_channels: usize, out_channels: usize) -> Self {
        LayerSpec {
            name: name.to_string(),
            kind,
            inputs: Vec::new(),
            in_channels,
            out_channels,
            kernel: 0,
            stride: 1,
            padding: 0,
            has_bias: false,
            mid_channels: None,
            gate_channels: None,
            scale: None,
        }
    }

    pub fn conv(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, padding: usize, bias: bool) -> Self {
        LayerSpec {
            kernel,
            stride,
            padding,
            has_bias: bias,
            ..Self::base(name, LayerKind::Conv, cin, cout)
        }
    }

    pub fn transpose_conv(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, bias: bool) -> Self {
        LayerSpec {
            kernel,
            stride,
            has_bias: bias,
            ..Self::base(name, LayerKind::TransposeConv, cin, cout)
        }
    }

    pub fn batch_norm(name: &str, channels: usize) -> Self {
        Self::base(name, LayerKind::BatchNorm, channels, channels)
    }

    pub fn relu(name: &str, channels: usize) -> Self {
        Self::base(name, LayerKind::Relu, channels, channels)
    }

    pub fn sigmoid(name: &str, channels: usize) -> Self {
        Self::base(name, LayerKind::Sigmoid, channels, channels)
    }

    pub fn max_pool(name: &str, channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            kernel,
            stride,
            padding,
            ..Self::base(name, LayerKind::MaxPool, channels, channels)
        }
    }

    pub fn bottleneck(name: &str, cin: usize, mid: usize, cout: usize, stride: usize) -> Self {
        LayerSpec {
            kernel: 3,
            stride,
            padding: 1,
            mid_channels: Some(mid),
            ..Self::base(name, LayerKind::BottleneckBlock, cin, cout)
        }
    }

    pub fn attention_gate(name: &str, skip: &str, gate: &str, skip_channels: usize, gate_channels: usize, inter: usize) -> Self {
        LayerSpec {
            inputs: vec![skip.to_string(), gate.to_string()],
            kernel: 1,
            has_bias: true,
            mid_channels: Some(inter),
            gate_channels: Some(gate_channels),
            ..Self::base(name, LayerKind::AttentionGate, skip_channels, skip_channels)
        }
    }

    pub fn concat(name: &str, inputs: &[&str], total_channels: usize) -> Self {
        LayerSpec {
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            ..Self::base(name, LayerKind::Concat, total_channels, total_channels)
        }
    }

    pub fn bilinear_resize(name: &str, channels: usize, scale: usize) -> Self {
        LayerSpec {
            scale: Some(scale),
            ..Self::base(name, LayerKind::BilinearResize, channels, channels)
        }
    }

    /// Sets explicit input names.
    pub fn from(mut self, inputs: &[&str]) -> Self {
        self.inputs = inputs.iter().map(|s| s.to_string()).collect();
        self
    }

    /// Bottleneck projection shortcut present?
    pub fn has_projection(&self) -> bool {
        self.kind == LayerKind::BottleneckBlock && (self.stride != 1 || self.in_channels != self.out_channels)
    }

    fn required_mid(&self) -> Result<usize> {
        match self.mid_channels {
            Some(m) if m > 0 => Ok(m),
            _ => Err(Error::Structural(format!(
                "layer {:?} needs a positive mid_channels",
                self.name
            ))),
        }
    }
}

/// Per-layer activation shape `(channels, height, width)`.
pub type MapShape = (usize, usize, usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSpec {
    pub name: String,
    pub in_channels: usize,
    /// Input height and width must be multiples of this.
    #[serde(default = "one")]
    pub input_divisor: usize,
    pub layers: Vec<LayerSpec>,
}

impl ArchSpec {
    pub fn new(name: &str, in_channels: usize, input_divisor: usize) -> Self {
        ArchSpec {
            name: name.to_string(),
            in_channels,
            input_divisor,
            layers: Vec::new(),
        }
    }

    pub fn push(&mut self, layer: LayerSpec) -> &mut Self {
        self.layers.push(layer);
        self
    }

    pub fn last_name(&self) -> &str {
        self.layers.last().map_or(INPUT, |l| l.name.as_str())
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map_or(self.in_channels, |l| l.out_channels)
    }

    /// Input slots of every layer, as indices into the value list where slot
    /// 0 is the network input and slot `i + 1` is the output of layer `i`.
    pub fn resolve_inputs(&self) -> Result<Vec<Vec<usize>>> {
        let mut index: HashMap<&str, usize> = HashMap::new();
        index.insert(INPUT, 0);
        let mut resolved = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let slots = if layer.inputs.is_empty() {
                vec![i]
            } else {
                layer
                    .inputs
                    .iter()
                    .map(|n| {
                        index.get(n.as_str()).copied().ok_or_else(|| {
                            Error::Structural(format!(
                                "layer {:?} reads unknown or later layer {n:?}",
                                layer.name
                            ))
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            if layer.name == INPUT || index.insert(&layer.name, i + 1).is_some() {
                return Err(Error::Structural(format!(
                    "duplicate layer name {:?}",
                    layer.name
                )));
            }
            resolved.push(slots);
        }
        Ok(resolved)
    }

    /// Checks that channel counts chain along every edge.
    pub fn validate(&self) -> Result<()> {
        let slots = self.resolve_inputs()?;
        let channels_of = |slot: usize| {
            if slot == 0 {
                self.in_channels
            } else {
                self.layers[slot - 1].out_channels
            }
        };
        for (layer, inputs) in self.layers.iter().zip(&slots) {
            let err = |msg: String| Err(Error::Structural(format!("layer {:?}: {msg}", layer.name)));
            if layer.in_channels == 0 || layer.out_channels == 0 {
                return err("channel counts must be positive".into());
            }
            let arity_ok = match layer.kind {
                LayerKind::AttentionGate => inputs.len() == 2,
                LayerKind::Concat => !inputs.is_empty(),
                _ => inputs.len() == 1,
            };
            if !arity_ok {
                return err(format!("wrong number of inputs ({})", inputs.len()));
            }
            let fed: usize = match layer.kind {
                LayerKind::Concat => inputs.iter().map(|&s| channels_of(s)).sum(),
                _ => channels_of(inputs[0]),
            };
            if fed != layer.in_channels {
                return err(format!(
                    "declares {} input channels but is fed {fed}",
                    layer.in_channels
                ));
            }
            match layer.kind {
                LayerKind::Conv | LayerKind::TransposeConv => {
                    if layer.kernel == 0 || layer.stride == 0 {
                        return err("kernel and stride must be positive".into());
                    }
                }
                LayerKind::MaxPool => {
                    if layer.kernel == 0 || layer.stride == 0 || 2 * layer.padding > layer.kernel {
                        return err("invalid pooling window".into());
                    }
                }
                LayerKind::BottleneckBlock => {
                    layer.required_mid()?;
                    if layer.stride == 0 {
                        return err("stride must be positive".into());
                    }
                }
                LayerKind::AttentionGate => {
                    layer.required_mid()?;
                    if layer.out_channels != layer.in_channels {
                        return err("gate output must keep the skip channel count".into());
                    }
                    let gate = channels_of(inputs[1]);
                    if layer.gate_channels != Some(gate) {
                        return err(format!(
                            "gate_channels {:?} but gating input has {gate}",
                            layer.gate_channels
                        ));
                    }
                }
                LayerKind::BilinearResize => {
                    if !matches!(layer.scale, Some(s) if s > 0) {
                        return err("bilinear resize needs a positive scale".into());
                    }
                }
                LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Sigmoid | LayerKind::Concat => {}
            }
            if !matches!(
                layer.kind,
                LayerKind::Conv | LayerKind::TransposeConv | LayerKind::BottleneckBlock
            ) && layer.out_channels != layer.in_channels
            {
                return err("this layer kind cannot change the channel count".into());
            }
        }
        Ok(())
    }

    /// Activation shape after every layer for a `height × width` input.
    pub fn infer_shapes(&self, height: usize, width: usize) -> Result<Vec<MapShape>> {
        self.validate()?;
        let d = self.input_divisor.max(1);
        if height == 0 || width == 0 || !height.is_multiple_of(d) || !width.is_multiple_of(d) {
            return Err(Error::Structural(format!(
                "{}: input {height}x{width} is not a positive multiple of {d}",
                self.name
            )));
        }
        let slots = self.resolve_inputs()?;
        let mut shapes: Vec<MapShape> = vec![(self.in_channels, height, width)];
        for (layer, inputs) in self.layers.iter().zip(&slots) {
            let first = shapes[inputs[0]];
            let (_, h, w) = first;
            let bad = |what: &str| Error::Structural(format!("layer {:?}: {what} for input {h}x{w}", layer.name));
            let spatial = match layer.kind {
                LayerKind::Conv | LayerKind::MaxPool => (
                    conv_output_size(h, layer.kernel, layer.stride, layer.padding).ok_or_else(|| bad("kernel does not fit"))?,
                    conv_output_size(w, layer.kernel, layer.stride, layer.padding).ok_or_else(|| bad("kernel does not fit"))?,
                ),
                LayerKind::TransposeConv => (
                    conv_transpose_output_size(h, layer.kernel, layer.stride, layer.padding).ok_or_else(|| bad("no output"))?,
                    conv_transpose_output_size(w, layer.kernel, layer.stride, layer.padding).ok_or_else(|| bad("no output"))?,
                ),
                LayerKind::BottleneckBlock => (
                    conv_output_size(h, 3, layer.stride, 1).ok_or_else(|| bad("kernel does not fit"))?,
                    conv_output_size(w, 3, layer.stride, 1).ok_or_else(|| bad("kernel does not fit"))?,
                ),
                LayerKind::BilinearResize => {
                    let s = layer.scale.unwrap_or(1);
                    (h * s, w * s)
                }
                LayerKind::AttentionGate => {
                    let (_, gh, gw) = shapes[inputs[1]];
                    gate_resample_factor((h, w), (gh, gw)).map_err(|e| {
                        Error::Structural(format!("layer {:?}: {e}", layer.name))
                    })?;
                    (h, w)
                }
                LayerKind::Concat => {
                    for &s in &inputs[1..] {
                        let (_, oh, ow) = shapes[s];
                        if (oh, ow) != (h, w) {
                            return Err(Error::Structural(format!(
                                "layer {:?}: cannot concatenate {h}x{w} with {oh}x{ow}",
                                layer.name
                            )));
                        }
                    }
                    (h, w)
                }
                LayerKind::BatchNorm | LayerKind::Relu | LayerKind::Sigmoid => (h, w),
            };
            if spatial.0 == 0 || spatial.1 == 0 {
                return Err(bad("empty output"));
            }
            shapes.push((layer.out_channels, spatial.0, spatial.1));
        }
        shapes.remove(0);
        Ok(shapes)
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("ArchSpec always serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ArchSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Integer factor by which a gate's projected gating signal is upsampled to
/// the skip resolution. Errors name both shapes when no such factor exists.
pub fn gate_resample_factor(skip: (usize, usize), gate: (usize, usize)) -> Result<usize> {
    let (sh, sw) = skip;
    let (gh, gw) = gate;
    if gh > 0 && gw > 0 && sh % gh == 0 && sw % gw == 0 && sh / gh == sw / gw {
        Ok(sh / gh)
    } else {
        Err(Error::Structural(format!(
            "gating signal {gh}x{gw} cannot be resampled onto skip features {sh}x{sw}"
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ArchSpec {
        let mut s = ArchSpec::new("tiny", 1, 2);
        s.push(LayerSpec::conv("c1", 1, 4, 3, 1, 1, true))
            .push(LayerSpec::batch_norm("n1", 4))
            .push(LayerSpec::relu("r1", 4))
            .push(LayerSpec::max_pool("p1", 4, 2, 2, 0))
            .push(LayerSpec::transpose_conv("up", 4, 4, 2, 2, true))
            .push(LayerSpec::attention_gate("ag", "r1", "up", 4, 4, 2))
            .push(LayerSpec::concat("cat", &["ag", "up"], 8))
            .push(LayerSpec::conv("head", 8, 1, 1, 1, 0, true));
        s
    }

    #[test]
    fn tiny_graph_validates_and_infers_shapes() {
        let s = tiny();
        s.validate().unwrap();
        let shapes = s.infer_shapes(8, 6).unwrap();
        assert_eq!(shapes[3], (4, 4, 3));
        assert_eq!(shapes[4], (4, 8, 6));
        assert_eq!(shapes.last(), Some(&(1, 8, 6)));
    }

    #[test]
    fn channel_mismatch_is_structural_error() {
        let mut s = tiny();
        s.layers[7].in_channels = 7;
        let err = s.validate().unwrap_err().to_string();
        assert!(err.contains("head"), "{err}");
    }

    #[test]
    fn unknown_input_is_rejected() {
        let mut s = tiny();
        s.layers[6].inputs[0] = "nope".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut s = tiny();
        s.layers[1].name = "c1".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn divisor_is_enforced() {
        assert!(tiny().infer_shapes(7, 8).is_err());
    }

    #[test]
    fn json_round_trip_preserves_hash() {
        let s = tiny();
        let back = ArchSpec::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.hash(), s.hash());
        let mut other = s.clone();
        other.layers[0].out_channels = 5;
        assert_ne!(other.hash(), s.hash());
    }

    #[test]
    fn unknown_json_fields_are_rejected() {
        let text = r#"{"name":"x","in_channels":1,"layers":[{"name":"a","kind":"relu","in_channels":1,"out_channels":1,"colour":"red"}]}"#;
        assert!(ArchSpec::from_json(text).is_err());
    }

    #[test]
    fn gate_factor() {
        assert_eq!(gate_resample_factor((8, 8), (8, 8)).unwrap(), 1);
        assert_eq!(gate_resample_factor((8, 8), (4, 4)).unwrap(), 2);
        let err = gate_resample_factor((8, 8), (3, 3)).unwrap_err().to_string();
        assert!(err.contains("3x3") && err.contains("8x8"), "{err}");
    }
}
