//! Analytic parameter, size and FLOP accounting over an [`ArchSpec`].
//!
//! One multiply-accumulate counts as one FLOP; normalization, activations,
//! pooling, concatenation and resizing are free.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerKind, LayerSpec, MapShape};
use crate::error::Result;

/// Bytes per stored parameter.
pub const BYTES_PER_PARAM: u64 = 4;
/// Bytes per MiB.
pub const MIB: f64 = 1_048_576.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub name: String,
    pub params: u64,
    pub size_mib: f64,
    pub gflops: f64,
    pub resolution: (usize, usize),
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub const CSV_HEADER: &'static str = "model,params_e6,size_mib,gflops";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.1},{:.1},{:.2}",
            self.name,
            self.params_millions(),
            self.size_mib,
            self.gflops
        )
    }
}

impl fmt::Display for ComplexityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<16} {:>10.1} {:>10.1} {:>10.2}",
            self.name,
            self.params_millions(),
            self.size_mib,
            self.gflops
        )
    }
}

pub fn size_mib(params: u64) -> f64 {
    (params * BYTES_PER_PARAM) as f64 / MIB
}

fn conv_params(k: usize, cin: usize, cout: usize, bias: bool) -> u64 {
    (k * k * cin * cout + if bias { cout } else { 0 }) as u64
}

/// Learnable scalars owned by one layer.
pub fn layer_params(layer: &LayerSpec) -> u64 {
    let (cin, cout) = (layer.in_channels, layer.out_channels);
    match layer.kind {
        LayerKind::Conv | LayerKind::TransposeConv => conv_params(layer.kernel, cin, cout, layer.has_bias),
        LayerKind::BatchNorm => 2 * cin as u64,
        LayerKind::BottleneckBlock => {
            let mid = layer.mid_channels.unwrap_or(0);
            let mut p = conv_params(1, cin, mid, false)
                + 2 * mid as u64
                + conv_params(3, mid, mid, false)
                + 2 * mid as u64
                + conv_params(1, mid, cout, false)
                + 2 * cout as u64;
            if layer.has_projection() {
                p += conv_params(1, cin, cout, false) + 2 * cout as u64;
            }
            p
        }
        LayerKind::AttentionGate => {
            let inter = layer.mid_channels.unwrap_or(0);
            let gate = layer.gate_channels.unwrap_or(0);
            conv_params(1, gate, inter, true) + conv_params(1, cin, inter, false) + conv_params(1, inter, 1, true)
        }
        LayerKind::Relu | LayerKind::Sigmoid | LayerKind::MaxPool | LayerKind::Concat | LayerKind::BilinearResize => 0,
    }
}

/// Multiply-accumulates of one layer given its input shapes and output shape.
pub fn layer_macs(layer: &LayerSpec, inputs: &[MapShape], out: MapShape) -> u64 {
    let (cin, cout) = (layer.in_channels as u64, layer.out_channels as u64);
    let (_, ho, wo) = out;
    let out_px = (ho * wo) as u64;
    let (_, hi, wi) = inputs[0];
    let in_px = (hi * wi) as u64;
    let k2 = (layer.kernel * layer.kernel) as u64;
    match layer.kind {
        LayerKind::Conv => k2 * cin * cout * out_px,
        LayerKind::TransposeConv => k2 * cin * cout * in_px,
        LayerKind::BottleneckBlock => {
            let mid = layer.mid_channels.unwrap_or(0) as u64;
            let mut m = cin * mid * in_px + 9 * mid * mid * out_px + mid * cout * out_px;
            if layer.has_projection() {
                m += cin * cout * out_px;
            }
            m
        }
        LayerKind::AttentionGate => {
            let inter = layer.mid_channels.unwrap_or(0) as u64;
            let gate = layer.gate_channels.unwrap_or(0) as u64;
            let (_, gh, gw) = inputs[1];
            gate * inter * (gh * gw) as u64 + cin * inter * out_px + inter * out_px
        }
        _ => 0,
    }
}

pub fn count_params(spec: &ArchSpec) -> Result<u64> {
    spec.validate()?;
    Ok(spec.layers.iter().map(layer_params).sum())
}

/// Per-layer MACs at an `height × width` input, in layer order.
pub fn layer_mac_breakdown(spec: &ArchSpec, height: usize, width: usize) -> Result<Vec<u64>> {
    let shapes = spec.infer_shapes(height, width)?;
    let slots = spec.resolve_inputs()?;
    let input_shape = (spec.in_channels, height, width);
    let shape_of = |slot: usize| if slot == 0 { input_shape } else { shapes[slot - 1] };
    Ok(spec
        .layers
        .iter()
        .zip(&slots)
        .zip(&shapes)
        .map(|((layer, ins), &out)| {
            let in_shapes: Vec<MapShape> = ins.iter().map(|&s| shape_of(s)).collect();
            layer_macs(layer, &in_shapes, out)
        })
        .collect())
}

pub fn count_macs(spec: &ArchSpec, height: usize, width: usize) -> Result<u64> {
    Ok(layer_mac_breakdown(spec, height, width)?.iter().sum())
}

/// GFLOPs (10⁹ MACs) of one forward pass at `height × width`.
pub fn count_flops(spec: &ArchSpec, height: usize, width: usize) -> Result<f64> {
    Ok(count_macs(spec, height, width)? as f64 / 1e9)
}

pub fn analyze(spec: &ArchSpec, height: usize, width: usize) -> Result<ComplexityReport> {
    let params = count_params(spec)?;
    Ok(ComplexityReport {
        name: spec.name.clone(),
        params,
        size_mib: size_mib(params),
        gflops: count_flops(spec, height, width)?,
        resolution: (height, width),
    })
}
