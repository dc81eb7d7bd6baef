//! Analytic parameter and multiply-accumulate counts for segment-based
//! backbones with temporal modules inserted at residual block starts.
//!
//! Per-frame layers are counted once per segment, so every MAC total is
//! linear in `T`. Excitation arithmetic (means, mask application, path sums)
//! is always counted; whether batch norm, activations and pooling are counted
//! depends on the [`Counting`] convention.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{shape_err, Error, Result};
use crate::excitation::reduced_channels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Resnet50,
    MobilenetV2,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Resnet50 => "resnet50",
            Backbone::MobilenetV2 => "mobilenet_v2",
        }
    }

    /// Stages that may receive a temporal module, in network order.
    pub fn stages(self) -> &'static [&'static str] {
        match self {
            Backbone::Resnet50 => &["res2", "res3", "res4", "res5"],
            Backbone::MobilenetV2 => &["stage2", "stage3", "stage4", "stage5"],
        }
    }
}

impl FromStr for Backbone {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "resnet50" | "resnet_50" => Ok(Backbone::Resnet50),
            "mobilenet_v2" | "mobilenetv2" => Ok(Backbone::MobilenetV2),
            other => Err(Error::Config(format!("unknown backbone {other:?}"))),
        }
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Tsn,
    Tsm,
    Ste,
    Ce,
    Me,
    Action,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Tsn, Variant::Tsm, Variant::Ste, Variant::Ce, Variant::Me, Variant::Action];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Tsn => "tsn",
            Variant::Tsm => "tsm",
            Variant::Ste => "ste",
            Variant::Ce => "ce",
            Variant::Me => "me",
            Variant::Action => "action",
        }
    }

    fn paths(self) -> &'static [ExcitationPath] {
        match self {
            Variant::Tsn | Variant::Tsm => &[],
            Variant::Ste => &[ExcitationPath::Ste],
            Variant::Ce => &[ExcitationPath::Ce],
            Variant::Me => &[ExcitationPath::Me],
            Variant::Action => &[ExcitationPath::Ste, ExcitationPath::Ce, ExcitationPath::Me],
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tsn" | "none" => Ok(Variant::Tsn),
            "tsm" | "shift" => Ok(Variant::Tsm),
            "ste" => Ok(Variant::Ste),
            "ce" => Ok(Variant::Ce),
            "me" => Ok(Variant::Me),
            "action" | "action-net" => Ok(Variant::Action),
            other => Err(Error::Config(format!("unknown variant {other:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcitationPath {
    Ste,
    Ce,
    Me,
}

/// Which non-convolutional arithmetic is included in MAC totals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Counting {
    /// Conv/linear MACs plus bias adds, batch norm (2 per element),
    /// activations (1 per element) and pooling (1 per input element), the
    /// way hook-based profilers count.
    #[default]
    Framework,
    /// Conv/linear multiply-accumulates only.
    MacsOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    Max { kernel: usize, stride: usize, pad: usize },
    GlobalAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Elementwise {
    Relu,
    ResidualAdd,
    /// Sum of the three excitation path outputs.
    PathSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// `rank` 1 convolves along T, 2 per frame, 3 over (T, H, W). Kernel,
    /// stride and pad are right-aligned (T, H, W) triples.
    Conv {
        rank: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        groups: usize,
        bias: bool,
    },
    Fc {
        bias: bool,
    },
    BatchNorm,
    Pool(Pool),
    Elementwise(Elementwise),
    Shift,
    Excitation {
        path: ExcitationPath,
        reduced: usize,
    },
    Consensus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerSpec {
    pub name: String,
    pub stage: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub in_hw: [usize; 2],
    pub out_hw: [usize; 2],
    pub segments: usize,
    /// Insertion site index for temporal-module layers.
    pub site: Option<usize>,
}

fn rule(input: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    (input + 2 * p).checked_sub(k).map(|v| v / s.max(1) + 1)
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |what: &str| Err(shape_err!("layer {} ({}): {}", self.name, self.stage, what));
        if self.cin == 0 || self.cout == 0 || self.segments == 0 {
            return err("channel counts and segments must be positive");
        }
        if self.in_hw.contains(&0) || self.out_hw.contains(&0) {
            return err("spatial extents must be positive");
        }
        let same = self.cin == self.cout && self.in_hw == self.out_hw;
        match self.kind {
            LayerKind::Conv { rank, kernel, stride, pad, groups, .. } => {
                if !(1..=3).contains(&rank) {
                    return err("conv rank must be 1, 2 or 3");
                }
                if groups == 0 || !self.cin.is_multiple_of(groups) || !self.cout.is_multiple_of(groups) {
                    return err("groups must divide both channel counts");
                }
                if rank == 1 {
                    if self.in_hw != self.out_hw || rule(self.segments, kernel[2], stride[2], pad[2]) != Some(self.segments) {
                        return err("temporal conv must preserve T and spatial extents");
                    }
                } else {
                    for d in 0..2 {
                        if rule(self.in_hw[d], kernel[d + 1], stride[d + 1], pad[d + 1]) != Some(self.out_hw[d]) {
                            return err("output extent inconsistent with kernel/stride/pad");
                        }
                    }
                    if rank == 3 && rule(self.segments, kernel[0], stride[0], pad[0]) != Some(self.segments) {
                        return err("3D conv must preserve T");
                    }
                }
            }
            LayerKind::Fc { .. } => {
                if self.in_hw != [1, 1] || self.out_hw != [1, 1] {
                    return err("fc operates on pooled features");
                }
            }
            LayerKind::Pool(Pool::Max { kernel, stride, pad }) => {
                if self.cin != self.cout {
                    return err("pooling preserves channels");
                }
                for d in 0..2 {
                    if rule(self.in_hw[d], kernel, stride, pad) != Some(self.out_hw[d]) {
                        return err("pool output extent inconsistent");
                    }
                }
            }
            LayerKind::Pool(Pool::GlobalAvg) => {
                if self.cin != self.cout || self.out_hw != [1, 1] {
                    return err("global pooling yields 1x1 maps");
                }
            }
            LayerKind::Excitation { reduced, .. } => {
                if !same || reduced == 0 || reduced > self.cin {
                    return err("excitation preserves shape and needs 1 <= C/r <= C");
                }
            }
            LayerKind::BatchNorm | LayerKind::Elementwise(_) | LayerKind::Shift | LayerKind::Consensus => {
                if !same {
                    return err("layer must preserve its input shape");
                }
            }
        }
        Ok(())
    }

    /// Learnable scalars of this layer.
    pub fn params(&self) -> u64 {
        let (ci, co) = (self.cin as u64, self.cout as u64);
        match self.kind {
            LayerKind::Conv { kernel, groups, bias, rank, .. } => {
                let k: u64 = kernel[3 - rank..].iter().map(|&v| v as u64).product();
                co * (ci / groups as u64) * k + if bias { co } else { 0 }
            }
            LayerKind::Fc { bias } => ci * co + if bias { co } else { 0 },
            LayerKind::BatchNorm => 2 * co,
            LayerKind::Excitation { path, reduced } => {
                let (c, r) = (ci, reduced as u64);
                match path {
                    ExcitationPath::Ste => 27 + 1,
                    ExcitationPath::Ce => (r * c + r) + (3 * r * r + r) + (c * r + c),
                    ExcitationPath::Me => (r * c + r) + (9 * r + r) + (c * r + c),
                }
            }
            LayerKind::Pool(_) | LayerKind::Elementwise(_) | LayerKind::Shift | LayerKind::Consensus => 0,
        }
    }

    /// Multiply-accumulates for all `segments` frames.
    pub fn macs(&self, counting: Counting) -> u64 {
        let fw = counting == Counting::Framework;
        let t = self.segments as u64;
        let (ci, co) = (self.cin as u64, self.cout as u64);
        let p_in = (self.in_hw[0] * self.in_hw[1]) as u64;
        let p_out = (self.out_hw[0] * self.out_hw[1]) as u64;
        let per_frame = match self.kind {
            LayerKind::Conv { kernel, groups, bias, rank, .. } => {
                let k: u64 = kernel[3 - rank..].iter().map(|&v| v as u64).product();
                co * (ci / groups as u64) * k * p_out + if bias && fw { co * p_out } else { 0 }
            }
            LayerKind::Fc { bias } => ci * co + if bias && fw { co } else { 0 },
            LayerKind::BatchNorm => {
                if fw {
                    2 * co * p_out
                } else {
                    0
                }
            }
            LayerKind::Pool(_) => {
                if fw {
                    ci * p_in
                } else {
                    0
                }
            }
            LayerKind::Elementwise(Elementwise::Relu) => {
                if fw {
                    co * p_out
                } else {
                    0
                }
            }
            LayerKind::Elementwise(Elementwise::ResidualAdd) => 0,
            LayerKind::Elementwise(Elementwise::PathSum) => 2 * co * p_out,
            LayerKind::Shift | LayerKind::Consensus => 0,
            LayerKind::Excitation { path, reduced } => excitation_macs(path, ci, reduced as u64, p_in, fw),
        };
        per_frame * t
    }
}

/// Per-frame cost of one excitation path on a C x P feature map. Means count
/// one unit per input element, mask application one per output element.
fn excitation_macs(path: ExcitationPath, c: u64, r: u64, p: u64, bias: bool) -> u64 {
    let b = |n: u64| if bias { n } else { 0 };
    let mask = c * p;
    match path {
        ExcitationPath::Ste => {
            let mean = c * p;
            let conv = 27 * p + b(p);
            mean + conv + mask
        }
        ExcitationPath::Ce => {
            let mean = c * p;
            let squeeze = c * r + b(r);
            let temporal = 3 * r * r + b(r);
            let unsqueeze = r * c + b(c);
            mean + squeeze + temporal + unsqueeze + mask
        }
        ExcitationPath::Me => {
            let squeeze = c * r * p + b(r * p);
            let depthwise = 9 * r * p + b(r * p);
            let diff = r * p;
            let mean = r * p;
            let unsqueeze = r * c + b(c);
            squeeze + depthwise + diff + mean + unsqueeze + mask
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArchGraph {
    pub backbone: String,
    pub variant: Variant,
    pub stages: Vec<String>,
    pub cls: usize,
    pub segments: usize,
    /// (T, C, H, W) of one clip.
    pub input: [usize; 4],
    pub layers: Vec<LayerSpec>,
}

impl ArchGraph {
    /// Number of distinct temporal-module insertion sites.
    pub fn sites(&self) -> usize {
        let mut ids: Vec<usize> = self.layers.iter().filter_map(|l| l.site).collect();
        ids.sort_unstable();
        ids.dedup();
        ids.len()
    }

    pub fn layers_of(&self, pred: impl Fn(&LayerKind) -> bool) -> usize {
        self.layers.iter().filter(|l| pred(&l.kind)).count()
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            l.validate()?;
            if l.segments != self.segments {
                return Err(shape_err!("layer {} has T={} in a T={} graph", l.name, l.segments, self.segments));
            }
        }
        if self.layers_of(|k| matches!(k, LayerKind::Fc { .. })) != 1 {
            return Err(shape_err!("graph must have exactly one classifier head"));
        }
        if !matches!(self.layers.last().map(|l| l.kind), Some(LayerKind::Consensus)) {
            return Err(shape_err!("consensus must be the last layer"));
        }
        Ok(())
    }
}

/// Incrementally appends layers while tracking the running feature shape.
#[derive(Debug, Clone)]
pub struct GraphBuilder {
    layers: Vec<LayerSpec>,
    stage: String,
    segments: usize,
    channels: usize,
    hw: [usize; 2],
    next_site: usize,
}

impl GraphBuilder {
    pub fn new(segments: usize, channels: usize, hw: [usize; 2]) -> Self {
        Self { layers: Vec::new(), stage: String::new(), segments, channels, hw, next_site: 0 }
    }

    pub fn stage(&mut self, name: &str) -> &mut Self {
        self.stage = name.to_string();
        self
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hw(&self) -> [usize; 2] {
        self.hw
    }

    fn push(&mut self, name: String, kind: LayerKind, cout: usize, out_hw: [usize; 2], site: Option<usize>) {
        self.layers.push(LayerSpec {
            name,
            stage: self.stage.clone(),
            kind,
            cin: self.channels,
            cout,
            in_hw: self.hw,
            out_hw,
            segments: self.segments,
            site,
        });
        self.channels = cout;
        self.hw = out_hw;
    }

    /// Square per-frame convolution.
    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(&mut self, name: &str, cout: usize, k: usize, stride: usize, pad: usize, groups: usize, bias: bool) -> &mut Self {
        let out = self.hw.map(|e| rule(e, k, stride, pad).unwrap_or(0));
        let kind = LayerKind::Conv { rank: 2, kernel: [1, k, k], stride: [1, stride, stride], pad: [0, pad, pad], groups, bias };
        self.push(name.into(), kind, cout, out, None);
        self
    }

    pub fn bn(&mut self, name: &str) -> &mut Self {
        let c = self.channels;
        self.push(name.into(), LayerKind::BatchNorm, c, self.hw, None);
        self
    }

    pub fn relu(&mut self, name: &str) -> &mut Self {
        self.elementwise(name, Elementwise::Relu)
    }

    pub fn elementwise(&mut self, name: &str, op: Elementwise) -> &mut Self {
        let c = self.channels;
        self.push(name.into(), LayerKind::Elementwise(op), c, self.hw, None);
        self
    }

    pub fn max_pool(&mut self, name: &str, kernel: usize, stride: usize, pad: usize) -> &mut Self {
        let out = self.hw.map(|e| rule(e, kernel, stride, pad).unwrap_or(0));
        let c = self.channels;
        self.push(name.into(), LayerKind::Pool(Pool::Max { kernel, stride, pad }), c, out, None);
        self
    }

    pub fn global_pool(&mut self, name: &str) -> &mut Self {
        let c = self.channels;
        self.push(name.into(), LayerKind::Pool(Pool::GlobalAvg), c, [1, 1], None);
        self
    }

    pub fn fc(&mut self, name: &str, cout: usize) -> &mut Self {
        self.push(name.into(), LayerKind::Fc { bias: true }, cout, [1, 1], None);
        self
    }

    pub fn consensus(&mut self) -> &mut Self {
        let c = self.channels;
        self.push("consensus".into(), LayerKind::Consensus, c, self.hw, None);
        self
    }

    /// Temporal module of `variant` at the current position; no-op for TSN.
    pub fn temporal_module(&mut self, name: &str, variant: Variant, ratio: usize) -> &mut Self {
        if variant == Variant::Tsn {
            return self;
        }
        let site = Some(self.next_site);
        self.next_site += 1;
        let (c, hw) = (self.channels, self.hw);
        if variant == Variant::Tsm {
            self.push(format!("{name}.shift"), LayerKind::Shift, c, hw, site);
            return self;
        }
        let reduced = reduced_channels(c, ratio);
        for &path in variant.paths() {
            let tag = match path {
                ExcitationPath::Ste => "ste",
                ExcitationPath::Ce => "ce",
                ExcitationPath::Me => "me",
            };
            self.push(format!("{name}.{tag}"), LayerKind::Excitation { path, reduced }, c, hw, site);
        }
        if variant == Variant::Action {
            self.push(format!("{name}.sum"), LayerKind::Elementwise(Elementwise::PathSum), c, hw, site);
        }
        self
    }

    /// Rewinds the running shape, e.g. to build a residual shortcut branch.
    pub fn set_shape(&mut self, channels: usize, hw: [usize; 2]) -> &mut Self {
        self.channels = channels;
        self.hw = hw;
        self
    }

    pub fn finish(self, backbone: &str, variant: Variant, stages: Vec<String>, cls: usize, input: [usize; 4]) -> Result<ArchGraph> {
        let g = ArchGraph { backbone: backbone.into(), variant, stages, cls, segments: self.segments, input, layers: self.layers };
        g.validate()?;
        Ok(g)
    }
}

fn check_stages(backbone: Backbone, stages: &[String]) -> Result<()> {
    for s in stages {
        if !backbone.stages().contains(&s.as_str()) {
            return Err(Error::Config(format!(
                "stage {s:?} is not an insertion stage of {backbone}; expected a subset of {:?}",
                backbone.stages()
            )));
        }
    }
    Ok(())
}

/// Builds the full backbone graph for `T` segments of 224x224 RGB frames with
/// `variant` inserted at the start of every residual block in `stages`.
pub fn build_backbone(backbone: Backbone, variant: Variant, segments: usize, cls: usize, stages: &[String]) -> Result<ArchGraph> {
    build_backbone_with_ratio(backbone, variant, segments, cls, stages, crate::excitation::REDUCTION)
}

pub fn build_backbone_with_ratio(
    backbone: Backbone,
    variant: Variant,
    segments: usize,
    cls: usize,
    stages: &[String],
    ratio: usize,
) -> Result<ArchGraph> {
    check_stages(backbone, stages)?;
    if segments == 0 || cls == 0 {
        return Err(Error::Config("segments and classes must be positive".into()));
    }
    let mut b = GraphBuilder::new(segments, 3, [224, 224]);
    match backbone {
        Backbone::Resnet50 => resnet50(&mut b, variant, stages, ratio),
        Backbone::MobilenetV2 => mobilenet_v2(&mut b, variant, stages, ratio),
    }
    b.stage("head").global_pool("avgpool").fc("fc", cls).consensus();
    let mut ordered: Vec<String> = backbone.stages().iter().filter(|s| stages.iter().any(|x| x == *s)).map(|s| s.to_string()).collect();
    ordered.dedup();
    b.finish(backbone.name(), variant, ordered, cls, [segments, 3, 224, 224])
}

fn resnet50(b: &mut GraphBuilder, variant: Variant, stages: &[String], ratio: usize) {
    b.stage("conv1").conv2d("conv1", 64, 7, 2, 3, 1, false).bn("bn1").relu("relu").max_pool("maxpool", 3, 2, 1);
    let layout = [("res2", 3, 64, 1), ("res3", 4, 128, 2), ("res4", 6, 256, 2), ("res5", 3, 512, 2)];
    for (stage, blocks, planes, stride) in layout {
        b.stage(stage);
        let insert = stages.iter().any(|s| s == stage);
        for i in 0..blocks {
            let s = if i == 0 { stride } else { 1 };
            let p = format!("{stage}.{i}");
            let (cin, hw_in) = (b.channels(), b.hw());
            if insert {
                b.temporal_module(&format!("{p}.temporal"), variant, ratio);
            }
            b.conv2d(&format!("{p}.conv1"), planes, 1, 1, 0, 1, false).bn(&format!("{p}.bn1")).relu(&format!("{p}.relu1"));
            b.conv2d(&format!("{p}.conv2"), planes, 3, s, 1, 1, false).bn(&format!("{p}.bn2")).relu(&format!("{p}.relu2"));
            b.conv2d(&format!("{p}.conv3"), planes * 4, 1, 1, 0, 1, false).bn(&format!("{p}.bn3"));
            let (cout, hw_out) = (b.channels(), b.hw());
            if i == 0 {
                b.set_shape(cin, hw_in);
                b.conv2d(&format!("{p}.downsample"), cout, 1, s, 0, 1, false).bn(&format!("{p}.downsample_bn"));
            }
            b.set_shape(cout, hw_out);
            b.elementwise(&format!("{p}.add"), Elementwise::ResidualAdd).relu(&format!("{p}.relu3"));
        }
    }
}

/// (expansion, output channels, repeats, first stride, stage)
const MOBILENET_V2: [(usize, usize, usize, usize, &str); 7] = [
    (1, 16, 1, 1, "stage2"),
    (6, 24, 2, 2, "stage2"),
    (6, 32, 3, 2, "stage3"),
    (6, 64, 4, 2, "stage4"),
    (6, 96, 3, 1, "stage4"),
    (6, 160, 3, 2, "stage5"),
    (6, 320, 1, 1, "stage5"),
];

fn mobilenet_v2(b: &mut GraphBuilder, variant: Variant, stages: &[String], ratio: usize) {
    b.stage("conv1").conv2d("features.0", 32, 3, 2, 1, 1, false).bn("features.0.bn").relu("features.0.relu6");
    let mut idx = 1;
    for (t, c, n, s, stage) in MOBILENET_V2 {
        b.stage(stage);
        for i in 0..n {
            let stride = if i == 0 { s } else { 1 };
            let p = format!("features.{idx}");
            let cin = b.channels();
            let residual = stride == 1 && cin == c;
            if residual && stages.iter().any(|x| x == stage) {
                b.temporal_module(&format!("{p}.temporal"), variant, ratio);
            }
            let hidden = cin * t;
            if t != 1 {
                b.conv2d(&format!("{p}.expand"), hidden, 1, 1, 0, 1, false)
                    .bn(&format!("{p}.expand_bn"))
                    .relu(&format!("{p}.expand_relu6"));
            }
            b.conv2d(&format!("{p}.depthwise"), hidden, 3, stride, 1, hidden, false)
                .bn(&format!("{p}.depthwise_bn"))
                .relu(&format!("{p}.depthwise_relu6"));
            b.conv2d(&format!("{p}.project"), c, 1, 1, 0, 1, false).bn(&format!("{p}.project_bn"));
            if residual {
                b.elementwise(&format!("{p}.add"), Elementwise::ResidualAdd);
            }
            idx += 1;
        }
    }
    b.conv2d(&format!("features.{idx}"), 1280, 1, 1, 0, 1, false).bn(&format!("features.{idx}.bn")).relu(&format!("features.{idx}.relu6"));
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageCost {
    pub stage: String,
    pub macs: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub macs: u64,
    pub params: u64,
    pub per_stage: Vec<StageCost>,
}

impl CostReport {
    /// A report holding only totals, e.g. to compare against published figures.
    pub fn from_totals(macs_g: f64, params_m: f64) -> Self {
        Self { macs: (macs_g * 1e9).round() as u64, params: (params_m * 1e6).round() as u64, per_stage: Vec::new() }
    }

    pub fn macs_g(&self) -> f64 {
        self.macs as f64 / 1e9
    }

    pub fn params_m(&self) -> f64 {
        self.params as f64 / 1e6
    }
}

pub fn count_cost(g: &ArchGraph) -> Result<CostReport> {
    count_cost_with(g, Counting::default())
}

pub fn count_cost_with(g: &ArchGraph, counting: Counting) -> Result<CostReport> {
    g.validate()?;
    let mut per_stage: Vec<StageCost> = Vec::new();
    for l in &g.layers {
        let (m, p) = (l.macs(counting), l.params());
        match per_stage.iter_mut().find(|s| s.stage == l.stage) {
            Some(s) => {
                s.macs += m;
                s.params += p;
            }
            None => per_stage.push(StageCost { stage: l.stage.clone(), macs: m, params: p }),
        }
    }
    Ok(CostReport { macs: per_stage.iter().map(|s| s.macs).sum(), params: per_stage.iter().map(|s| s.params).sum(), per_stage })
}

/// Cost of one temporal module on a C x H x W map over `segments` frames,
/// counted in isolation.
pub fn module_cost(variant: Variant, channels: usize, hw: [usize; 2], segments: usize, ratio: usize, counting: Counting) -> (u64, u64) {
    let mut b = GraphBuilder::new(segments, channels, hw);
    b.temporal_module("site", variant, ratio);
    b.layers.iter().fold((0, 0), |(m, p), l| (m + l.macs(counting), p + l.params()))
}

/// Channels and spatial extent at every insertion site of `g`.
pub fn site_shapes(g: &ArchGraph) -> Vec<(usize, [usize; 2])> {
    let mut out: Vec<(usize, usize, [usize; 2])> = Vec::new();
    for l in &g.layers {
        if let Some(s) = l.site {
            if !out.iter().any(|&(id, ..)| id == s) {
                out.push((s, l.cin, l.in_hw));
            }
        }
    }
    out.into_iter().map(|(_, c, hw)| (c, hw)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Deltas {
    pub macs_g: f64,
    pub macs_pct: f64,
    pub params_m: f64,
    pub top1: f64,
}

pub fn delta_report(base: &CostReport, variant: &CostReport, base_top1: f64, variant_top1: f64) -> Deltas {
    let dm = variant.macs as f64 - base.macs as f64;
    let pct = if base.macs == 0 { 0.0 } else { 100.0 * dm / base.macs as f64 };
    Deltas { macs_g: dm / 1e9, macs_pct: pct, params_m: (variant.params as f64 - base.params as f64) / 1e6, top1: variant_top1 - base_top1 }
}

/// Extra FLOPs percent per point of top-1 gained.
pub fn efficiency(delta_flops_pct: f64, delta_top1_pct: f64) -> Result<f64> {
    if delta_top1_pct == 0.0 {
        return Err(Error::Domain("efficiency undefined for zero top-1 change".into()));
    }
    Ok(delta_flops_pct / delta_top1_pct)
}

/// Published ResNet-50 top-1 on the 83-class gesture benchmark, per variant.
pub fn reference_top1(variant: Variant) -> f64 {
    match variant {
        Variant::Tsn => 83.1,
        Variant::Tsm => 92.1,
        Variant::Ste | Variant::Ce => 93.8,
        Variant::Me => 93.9,
        Variant::Action => 94.2,
    }
}

/// Published top-1 change over TSM where one exists for the backbone.
pub fn published_delta_top1(backbone: Backbone, variant: Variant) -> Option<f64> {
    match (backbone, variant) {
        (Backbone::Resnet50, v) => Some(((reference_top1(v) - reference_top1(Variant::Tsm)) * 10.0).round() / 10.0),
        (Backbone::MobilenetV2, Variant::Tsm) => Some(0.0),
        (Backbone::MobilenetV2, Variant::Action) => Some(1.1),
        (Backbone::MobilenetV2, _) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all(b: Backbone) -> Vec<String> {
        b.stages().iter().map(|s| s.to_string()).collect()
    }

    fn cost(b: Backbone, v: Variant, t: usize, stages: &[String]) -> CostReport {
        count_cost(&build_backbone(b, v, t, 83, stages).unwrap()).unwrap()
    }

    #[test]
    fn imagenet_reference_counts() {
        // Standard single-image figures: ResNet-50 25.557M params, MobileNet V2 3.505M.
        let r = cost(Backbone::Resnet50, Variant::Tsn, 1, &[]);
        let g = build_backbone(Backbone::Resnet50, Variant::Tsn, 1, 1000, &[]).unwrap();
        assert_eq!(count_cost(&g).unwrap().params, 25_557_032);
        assert!(r.macs > 4_000_000_000);
        let m = build_backbone(Backbone::MobilenetV2, Variant::Tsn, 1, 1000, &[]).unwrap();
        assert_eq!(count_cost(&m).unwrap().params, 3_504_872);
        let macs_only = count_cost_with(&g, Counting::MacsOnly).unwrap().macs;
        assert!((macs_only as f64 / 1e9 - 4.09).abs() < 0.02, "{macs_only}");
    }

    #[test]
    fn site_counts() {
        let g = build_backbone(Backbone::Resnet50, Variant::Action, 8, 83, &all(Backbone::Resnet50)).unwrap();
        assert_eq!(g.sites(), 16);
        let g = build_backbone(Backbone::Resnet50, Variant::Action, 8, 83, &["res2".into()]).unwrap();
        assert_eq!(g.sites(), 3);
        let g = build_backbone(Backbone::MobilenetV2, Variant::Tsm, 8, 83, &all(Backbone::MobilenetV2)).unwrap();
        assert_eq!(g.sites(), 10);
        assert_eq!(g.layers_of(|k| matches!(k, LayerKind::Shift)), 10);
    }

    #[test]
    fn unknown_stage_rejected() {
        let e = build_backbone(Backbone::Resnet50, Variant::Action, 8, 83, &["res6".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        let e = build_backbone(Backbone::MobilenetV2, Variant::Action, 8, 83, &["res2".into()]).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn tsm_is_free() {
        let s = all(Backbone::Resnet50);
        assert_eq!(cost(Backbone::Resnet50, Variant::Tsn, 8, &s), cost(Backbone::Resnet50, Variant::Tsm, 8, &s));
    }

    #[test]
    fn linear_in_segments() {
        let s = all(Backbone::Resnet50);
        for v in Variant::ALL {
            let one = cost(Backbone::Resnet50, v, 1, &s);
            let eight = cost(Backbone::Resnet50, v, 8, &s);
            let sixteen = cost(Backbone::Resnet50, v, 16, &s);
            assert_eq!(one.macs * 8, eight.macs, "{v}");
            assert_eq!(eight.macs * 2, sixteen.macs, "{v}");
            assert_eq!(one.params, sixteen.params);
        }
    }

    #[test]
    fn breakdown_sums_to_total() {
        let r = cost(Backbone::MobilenetV2, Variant::Action, 8, &all(Backbone::MobilenetV2));
        assert_eq!(r.per_stage.iter().map(|s| s.macs).sum::<u64>(), r.macs);
        assert_eq!(r.per_stage.iter().map(|s| s.params).sum::<u64>(), r.params);
        let names: Vec<&str> = r.per_stage.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, ["conv1", "stage2", "stage3", "stage4", "stage5", "head"]);
    }

    #[test]
    fn additivity_over_sites() {
        for bb in [Backbone::Resnet50, Backbone::MobilenetV2] {
            let s = all(bb);
            let base = cost(bb, Variant::Tsn, 8, &s);
            for v in Variant::ALL {
                let g = build_backbone(bb, v, 8, 83, &s).unwrap();
                let r = count_cost(&g).unwrap();
                let (mut dm, mut dp) = (0, 0);
                for (c, hw) in site_shapes(&g) {
                    let (m, p) = module_cost(v, c, hw, 8, 16, Counting::Framework);
                    dm += m;
                    dp += p;
                }
                assert_eq!(r.macs - base.macs, dm, "{bb} {v}");
                assert_eq!(r.params - base.params, dp, "{bb} {v}");
            }
        }
    }

    #[test]
    fn monotone_in_stages() {
        let s = all(Backbone::Resnet50);
        for v in Variant::ALL {
            let mut prev = cost(Backbone::Resnet50, v, 8, &[]);
            for k in 1..=4 {
                let r = cost(Backbone::Resnet50, v, 8, &s[..k]);
                assert!(r.macs >= prev.macs && r.params >= prev.params);
                prev = r;
            }
        }
    }

    #[test]
    fn inconsistent_layer_rejected() {
        let mut g = build_backbone(Backbone::Resnet50, Variant::Tsn, 8, 83, &[]).unwrap();
        g.layers[0].out_hw = [111, 112];
        assert!(matches!(count_cost(&g), Err(Error::Shape(_))));
        let mut g = build_backbone(Backbone::Resnet50, Variant::Tsn, 8, 83, &[]).unwrap();
        g.layers.pop();
        assert!(matches!(count_cost(&g), Err(Error::Shape(_))));
    }

    #[test]
    fn deltas_and_efficiency() {
        let d = delta_report(&CostReport::from_totals(33.0, 23.68), &CostReport::from_totals(34.75, 28.08), 92.1, 94.2);
        assert!((d.macs_g - 1.75).abs() < 1e-9);
        assert!((d.macs_pct - 5.303).abs() < 1e-3);
        let same = CostReport::from_totals(2.55, 2.33);
        let z = delta_report(&same, &same, 90.0, 90.0);
        assert_eq!((z.macs_g, z.macs_pct, z.params_m, z.top1), (0.0, 0.0, 0.0, 0.0));
        assert!((efficiency(5.3, 2.1).unwrap() - 2.5238).abs() < 1e-4);
        assert_eq!(efficiency(0.0, 1.3).unwrap(), 0.0);
        assert!(matches!(efficiency(1.0, 0.0), Err(Error::Domain(_))));
    }
}
