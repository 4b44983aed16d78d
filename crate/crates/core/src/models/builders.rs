//! Reference layer graphs: the attention-gated teacher, the simplified U-Net
//! student and a vanilla U-Net used for complexity calibration.

use serde::{Deserialize, Serialize};

use crate::arch::{ArchSpec, LayerSpec};
use crate::error::{Error, Result};

/// conv3×3 → BN → ReLU, twice. Returns the name of the final activation.
fn double_conv(spec: &mut ArchSpec, prefix: &str, cin: usize, cout: usize) -> String {
    spec.push(LayerSpec::conv(&format!("{prefix}.conv1"), cin, cout, 3, 1, 1, true))
        .push(LayerSpec::batch_norm(&format!("{prefix}.bn1"), cout))
        .push(LayerSpec::relu(&format!("{prefix}.relu1"), cout))
        .push(LayerSpec::conv(&format!("{prefix}.conv2"), cout, cout, 3, 1, 1, true))
        .push(LayerSpec::batch_norm(&format!("{prefix}.bn2"), cout))
        .push(LayerSpec::relu(&format!("{prefix}.relu2"), cout));
    format!("{prefix}.relu2")
}

fn check_resolution(resolution: usize, divisor: usize, what: &str) -> Result<()> {
    if resolution == 0 || !resolution.is_multiple_of(divisor) {
        return Err(Error::Config(format!(
            "{what} input resolution {resolution} must be a positive multiple of {divisor}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudentConfig {
    pub in_channels: usize,
    /// Encoder widths from shallow to deep; the depth is their count.
    pub widths: Vec<usize>,
    pub resolution: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            in_channels: 3,
            widths: vec![16, 32, 64, 128, 256],
            resolution: 512,
        }
    }
}

impl StudentConfig {
    pub fn divisor(&self) -> usize {
        1 << self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::Config(format!("invalid student widths {:?}", self.widths)));
        }
        check_resolution(self.resolution, self.divisor(), "student")
    }
}

/// Symmetric U-Net: double conv per level, 2×2 max-pool down, 2×2 stride-2
/// transposed conv up, plain skip concatenation, 1×1 head.
pub fn student_spec(cfg: &StudentConfig) -> Result<ArchSpec> {
    cfg.validate()?;
    let depth = cfg.widths.len();
    let mut s = ArchSpec::new("student", cfg.in_channels, cfg.divisor());
    let mut skips = Vec::new();
    let mut prev = cfg.in_channels;
    for (level, &w) in cfg.widths.iter().enumerate() {
        if level > 0 {
            s.push(LayerSpec::max_pool(&format!("pool{level}"), prev, 2, 2, 0));
        }
        skips.push(double_conv(&mut s, &format!("enc{}", level + 1), prev, w));
        prev = w;
    }
    for level in (0..depth - 1).rev() {
        let w = cfg.widths[level];
        let up = format!("up{}", level + 1);
        s.push(LayerSpec::transpose_conv(&up, prev, prev, 2, 2, true));
        let cat = format!("cat{}", level + 1);
        s.push(LayerSpec::concat(&cat, &[&skips[level], &up], w + prev));
        double_conv(&mut s, &format!("dec{}", level + 1), w + prev, w);
        prev = w;
    }
    s.push(LayerSpec::conv("head", prev, 1, 1, 1, 0, true));
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub in_channels: usize,
    pub stem_width: usize,
    /// Bottleneck blocks per encoder stage.
    pub blocks: [usize; 4],
    /// Output width per encoder stage; inner width is a quarter of it.
    pub widths: [usize; 4],
    /// Output width per decoder up-block, deepest first.
    pub decoder: [usize; 4],
    pub resolution: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            in_channels: 3,
            stem_width: 64,
            blocks: [3, 4, 23, 3],
            widths: [256, 512, 1024, 2048],
            decoder: [1024, 512, 256, 64],
            resolution: 512,
        }
    }
}

impl TeacherConfig {
    /// A narrow, shallow variant with the same topology, for desk-scale runs.
    pub fn compact() -> Self {
        TeacherConfig {
            in_channels: 3,
            stem_width: 8,
            blocks: [1, 1, 1, 1],
            widths: [32, 64, 128, 256],
            decoder: [128, 64, 32, 8],
            resolution: 128,
        }
    }

    pub const DIVISOR: usize = 32;

    pub fn validate(&self) -> Result<()> {
        let bad = self.in_channels == 0
            || self.stem_width == 0
            || self.blocks.contains(&0)
            || self.widths.iter().any(|&w| w < 4)
            || self.decoder.contains(&0);
        if bad {
            return Err(Error::Config(format!("invalid teacher configuration {self:?}")));
        }
        check_resolution(self.resolution, Self::DIVISOR, "teacher")
    }
}

/// Residual encoder (7×7 stem, pool, four bottleneck stages) with an
/// attention-gated decoder.
///
/// Each up-block doubles the resolution with a channel-preserving transposed
/// conv, gates the matching encoder skip using the pre-upsampling decoder
/// features as the gating signal, concatenates and applies a double conv.
/// The head runs at half resolution and is resized back to the input size.
pub fn teacher_spec(cfg: &TeacherConfig) -> Result<ArchSpec> {
    cfg.validate()?;
    let mut s = ArchSpec::new("teacher", cfg.in_channels, TeacherConfig::DIVISOR);
    s.push(LayerSpec::conv("stem.conv", cfg.in_channels, cfg.stem_width, 7, 2, 3, false))
        .push(LayerSpec::batch_norm("stem.bn", cfg.stem_width))
        .push(LayerSpec::relu("stem.relu", cfg.stem_width))
        .push(LayerSpec::max_pool("stem.pool", cfg.stem_width, 3, 2, 1));

    let mut skips = vec![("stem.relu".to_string(), cfg.stem_width)];
    let mut prev = cfg.stem_width;
    for stage in 0..4 {
        let out = cfg.widths[stage];
        for b in 0..cfg.blocks[stage] {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let name = format!("layer{}.{b}", stage + 1);
            s.push(LayerSpec::bottleneck(&name, prev, out / 4, out, stride));
            prev = out;
        }
        skips.push((s.last_name().to_string(), out));
    }

    // The deepest stage is the bottleneck; the other four outputs are skips.
    let mut current = s.last_name().to_string();
    for (i, &width) in cfg.decoder.iter().enumerate() {
        let (skip, skip_c) = skips[3 - i].clone();
        let level = 4 - i;
        let up = format!("up{level}.tconv");
        s.push(LayerSpec::transpose_conv(&up, prev, prev, 2, 2, true).from(&[&current]));
        let gate = format!("up{level}.gate");
        s.push(LayerSpec::attention_gate(&gate, &skip, &current, skip_c, prev, (skip_c / 2).max(1)));
        let cat = format!("up{level}.cat");
        s.push(LayerSpec::concat(&cat, &[&gate, &up], skip_c + prev));
        current = double_conv(&mut s, &format!("up{level}"), skip_c + prev, width);
        prev = width;
    }
    s.push(LayerSpec::conv("head", prev, 1, 1, 1, 0, true))
        .push(LayerSpec::bilinear_resize("head.resize", 1, 2));
    Ok(s)
}

/// Vanilla U-Net (widths 64…1024, bilinear upsampling followed by a 3×3
/// conv + BN + ReLU, double conv per level) as a complexity reference.
pub fn unet_reference_spec() -> ArchSpec {
    let widths = [64, 128, 256, 512, 1024];
    let mut s = ArchSpec::new("unet_reference", 3, 16);
    let mut skips = Vec::new();
    let mut prev = 3;
    for (level, &w) in widths.iter().enumerate() {
        if level > 0 {
            s.push(LayerSpec::max_pool(&format!("pool{level}"), prev, 2, 2, 0));
        }
        skips.push(double_conv(&mut s, &format!("enc{}", level + 1), prev, w));
        prev = w;
    }
    for level in (0..widths.len() - 1).rev() {
        let w = widths[level];
        let p = format!("up{}", level + 1);
        s.push(LayerSpec::bilinear_resize(&format!("{p}.resize"), prev, 2))
            .push(LayerSpec::conv(&format!("{p}.conv"), prev, w, 3, 1, 1, true))
            .push(LayerSpec::batch_norm(&format!("{p}.bn"), w))
            .push(LayerSpec::relu(&format!("{p}.relu"), w));
        let cat = format!("cat{}", level + 1);
        s.push(LayerSpec::concat(&cat, &[&skips[level], &format!("{p}.relu")], 2 * w));
        double_conv(&mut s, &format!("dec{}", level + 1), 2 * w, w);
        prev = w;
    }
    s.push(LayerSpec::conv("head", prev, 1, 1, 1, 0, true));
    s
}

/// Built-in specs addressable by name.
pub fn builtin_spec(name: &str) -> Result<ArchSpec> {
    match name {
        "unet_reference" => Ok(unet_reference_spec()),
        "teacher" => teacher_spec(&TeacherConfig::default()),
        "student" => student_spec(&StudentConfig::default()),
        "teacher_compact" => teacher_spec(&TeacherConfig::compact()),
        other => Err(Error::Config(format!(
            "unknown built-in model {other:?} (expected unet_reference, teacher, student or teacher_compact)"
        ))),
    }
}
