//! A small segment-based classifier with a pluggable temporal module at the
//! start of each conv stage.
//!
//! Input is (N, T, C, H, W). Every conv/BN/ReLU layer runs per frame with
//! batch-norm statistics over N*T; the head is global pooling, a linear
//! classifier per frame and an average over T.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Graph, NormMode, Var};
use crate::conv::ConvSpec;
use crate::cost::{ArchGraph, GraphBuilder, Variant};
use crate::error::{shape_err, Error, Result};
use crate::excitation::{
    action_graph, action_sum, ce_graph, me_graph, shift_fold, ste_graph, ActionWeights, CeWeights, MeWeights, SteWeights, REDUCTION,
    SHIFT_FRACTION,
};
use crate::optim::Parameter;
use crate::snapshot::{self, NamedTensor};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalModule {
    None,
    Shift,
    Ste,
    Ce,
    Me,
    Action,
}

impl TemporalModule {
    pub fn name(self) -> &'static str {
        match self {
            TemporalModule::None => "none",
            TemporalModule::Shift => "shift",
            TemporalModule::Ste => "ste",
            TemporalModule::Ce => "ce",
            TemporalModule::Me => "me",
            TemporalModule::Action => "action",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            TemporalModule::None => Variant::Tsn,
            TemporalModule::Shift => Variant::Tsm,
            TemporalModule::Ste => Variant::Ste,
            TemporalModule::Ce => Variant::Ce,
            TemporalModule::Me => Variant::Me,
            TemporalModule::Action => Variant::Action,
        }
    }
}

impl FromStr for TemporalModule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "tsn" => Ok(TemporalModule::None),
            "shift" | "tsm" => Ok(TemporalModule::Shift),
            "ste" => Ok(TemporalModule::Ste),
            "ce" => Ok(TemporalModule::Ce),
            "me" => Ok(TemporalModule::Me),
            "action" => Ok(TemporalModule::Action),
            other => Err(Error::Config(format!("unknown temporal module {other:?}"))),
        }
    }
}

impl fmt::Display for TemporalModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub module: TemporalModule,
    /// 1-based indices of the stages that get the temporal module.
    pub stages: Vec<usize>,
    pub cls: usize,
    pub ratio: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            height: 32,
            width: 32,
            stem_width: 16,
            stem_stride: 4,
            widths: vec![32, 64, 128],
            strides: vec![1, 2, 1],
            module: TemporalModule::Action,
            stages: vec![1, 2, 3],
            cls: 4,
            ratio: REDUCTION,
        }
    }
}

impl ToyConfig {
    pub fn with_module(mut self, module: TemporalModule) -> Self {
        self.module = module;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return bad(format!("{} widths but {} strides", self.widths.len(), self.strides.len()));
        }
        if self.widths.iter().chain([&self.stem_width, &self.in_channels, &self.cls, &self.ratio]).any(|&w| w == 0) {
            return bad("widths, channels, classes and ratio must be >= 1".into());
        }
        if self.strides.iter().chain([&self.stem_stride]).any(|&s| s == 0) {
            return bad("strides must be >= 1".into());
        }
        if let Some(&s) = self.stages.iter().find(|&&s| s == 0 || s > self.widths.len()) {
            return bad(format!("stage {s} outside 1..={}", self.widths.len()));
        }
        if self.height == 0 || self.width == 0 {
            return bad("input extents must be >= 1".into());
        }
        Ok(())
    }

    /// Channels entering stage `i` (0-based).
    fn stage_input(&self, i: usize) -> usize {
        if i == 0 {
            self.stem_width
        } else {
            self.widths[i - 1]
        }
    }

    fn has_module(&self, i: usize) -> bool {
        self.module != TemporalModule::None && self.stages.contains(&(i + 1))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<S> {
    pub gamma: Parameter<S>,
    pub beta: Parameter<S>,
    pub running: BatchStats,
}

impl<S: Scalar> BatchNorm<S> {
    fn new(c: usize) -> Self {
        Self {
            gamma: Parameter::new(Tensor::ones(&[c])),
            beta: Parameter::new(Tensor::zeros(&[c])),
            running: BatchStats { mean: vec![0.0; c], var: vec![1.0; c] },
        }
    }

    fn apply(&self, g: &Graph<S>, x: Var, mode: NormMode, stats: &mut Vec<BatchStats>) -> Result<Var> {
        let (y, st) = g.batch_norm(x, g.param(&self.gamma), g.param(&self.beta), mode, Some(&self.running), BN_EPS)?;
        stats.extend(st);
        Ok(y)
    }

    fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for (r, b) in self.running.mean.iter_mut().zip(&batch.mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.running.var.iter_mut().zip(&batch.var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone)]
pub enum StageModule<S> {
    None,
    Shift { fold: usize },
    Ste(SteWeights<S>),
    Ce(CeWeights<S>),
    Me(MeWeights<S>),
    Action(ActionWeights<S>),
}

impl<S: Scalar> StageModule<S> {
    fn params(&self) -> Vec<(String, &Parameter<S>)> {
        match self {
            StageModule::None | StageModule::Shift { .. } => Vec::new(),
            StageModule::Ste(w) => w.params().into_iter().map(|(k, p)| (format!("ste.{k}"), p)).collect(),
            StageModule::Ce(w) => w.params().into_iter().map(|(k, p)| (format!("ce.{k}"), p)).collect(),
            StageModule::Me(w) => w.params().into_iter().map(|(k, p)| (format!("me.{k}"), p)).collect(),
            StageModule::Action(w) => w.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        match self {
            StageModule::None | StageModule::Shift { .. } => Vec::new(),
            StageModule::Ste(w) => w.params_mut(),
            StageModule::Ce(w) => w.params_mut(),
            StageModule::Me(w) => w.params_mut(),
            StageModule::Action(w) => w.params_mut(),
        }
    }

    fn apply(&self, g: &Graph<S>, x: Var) -> Result<Var> {
        Ok(match self {
            StageModule::None => x,
            StageModule::Shift { fold } => g.temporal_shift(x, *fold)?,
            StageModule::Ste(w) => ste_graph(g, x, &w.bind(g))?.y,
            StageModule::Ce(w) => ce_graph(g, x, &w.bind(g))?.y,
            StageModule::Me(w) => me_graph(g, x, &w.bind(g))?.y,
            StageModule::Action(w) => {
                let paths = action_graph(g, x, &w.bind(g))?;
                action_sum(g, &paths)?
            }
        })
    }
}

#[derive(Debug, Clone)]
pub struct Stage<S> {
    pub module: StageModule<S>,
    /// (width, in, 3, 3)
    pub conv: Parameter<S>,
    pub bn: BatchNorm<S>,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct ToyNet<S> {
    pub config: ToyConfig,
    /// (stem_width, in_channels, 3, 3)
    pub stem: Parameter<S>,
    pub stem_bn: BatchNorm<S>,
    pub stages: Vec<Stage<S>>,
    /// (cls, last width)
    pub fc_weight: Parameter<S>,
    pub fc_bias: Parameter<S>,
}

/// Graph outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// (N, CLS) consensus logits.
    pub logits: Var,
    /// (N, T, CLS) per-segment logits.
    pub segment_logits: Var,
    /// (N*T, C, h, w) final-stage feature maps.
    pub features: Var,
    /// Batch statistics of every BN layer in order (training mode only).
    pub stats: Vec<BatchStats>,
}

fn he_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Builds a ToyNet with the default layout and the given module and widths.
pub fn build_toynet(module: TemporalModule, widths: &[usize], cls: usize, seed: u64) -> Result<ToyNet<f32>> {
    let config = ToyConfig {
        widths: widths.to_vec(),
        strides: ToyConfig::default().strides.into_iter().chain(std::iter::repeat(2)).take(widths.len()).collect(),
        stages: (1..=widths.len()).collect(),
        module,
        cls,
        ..ToyConfig::default()
    };
    ToyNet::new(config, seed)
}

impl<S: Scalar> ToyNet<S> {
    pub fn new(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Parameter::new(he_uniform(&[config.stem_width, config.in_channels, 3, 3], 9 * config.in_channels, &mut rng));
        let mut stages = Vec::with_capacity(config.widths.len());
        for (i, (&w, &stride)) in config.widths.iter().zip(&config.strides).enumerate() {
            let cin = config.stage_input(i);
            let module = if !config.has_module(i) {
                StageModule::None
            } else {
                match config.module {
                    TemporalModule::None => StageModule::None,
                    TemporalModule::Shift => StageModule::Shift { fold: shift_fold(cin, SHIFT_FRACTION) },
                    TemporalModule::Ste => StageModule::Ste(SteWeights::new()),
                    TemporalModule::Ce => StageModule::Ce(CeWeights::new(cin, config.ratio, &mut rng)),
                    TemporalModule::Me => StageModule::Me(MeWeights::new(cin, config.ratio, &mut rng)),
                    TemporalModule::Action => StageModule::Action(ActionWeights::new(cin, config.ratio, &mut rng)),
                }
            };
            let conv = Parameter::new(he_uniform(&[w, cin, 3, 3], 9 * cin, &mut rng));
            stages.push(Stage { module, conv, bn: BatchNorm::new(w), stride });
        }
        let last = *config.widths.last().expect("validated");
        let bound = 1.0 / (last as f64).sqrt();
        let fc_weight = Parameter::new(Tensor::uniform(&[config.cls, last], -bound, bound, &mut rng));
        let fc_bias = Parameter::new(Tensor::zeros(&[config.cls]));
        Ok(Self { stem_bn: BatchNorm::new(config.stem_width), config, stem, stages, fc_weight, fc_bias })
    }

    /// Replaces every excitation tensor, including zero-initialized ones,
    /// with random values.
    pub fn randomize_modules(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ratio = self.config.ratio;
        for st in &mut self.stages {
            st.module = match &st.module {
                StageModule::Ste(_) => StageModule::Ste(SteWeights::random(&mut rng)),
                StageModule::Ce(w) => StageModule::Ce(CeWeights::random(w.channels, ratio, &mut rng)),
                StageModule::Me(w) => StageModule::Me(MeWeights::random(w.channels, ratio, &mut rng)),
                StageModule::Action(w) => StageModule::Action(ActionWeights::random(w.channels(), ratio, &mut rng)),
                other => other.clone(),
            };
        }
    }

    pub fn params(&self) -> Vec<(String, &Parameter<S>)> {
        let mut v: Vec<(String, &Parameter<S>)> = vec![
            ("stem.weight".into(), &self.stem),
            ("stem_bn.gamma".into(), &self.stem_bn.gamma),
            ("stem_bn.beta".into(), &self.stem_bn.beta),
        ];
        for (i, st) in self.stages.iter().enumerate() {
            let p = format!("stage{}", i + 1);
            v.extend(st.module.params().into_iter().map(|(k, t)| (format!("{p}.module.{k}"), t)));
            v.push((format!("{p}.conv.weight"), &st.conv));
            v.push((format!("{p}.bn.gamma"), &st.bn.gamma));
            v.push((format!("{p}.bn.beta"), &st.bn.beta));
        }
        v.push(("fc.weight".into(), &self.fc_weight));
        v.push(("fc.bias".into(), &self.fc_bias));
        v
    }

    /// Same order as [`params`](Self::params).
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v: Vec<&mut Parameter<S>> = vec![&mut self.stem, &mut self.stem_bn.gamma, &mut self.stem_bn.beta];
        for st in &mut self.stages {
            v.extend(st.module.params_mut());
            v.push(&mut st.conv);
            v.push(&mut st.bn.gamma);
            v.push(&mut st.bn.beta);
        }
        v.push(&mut self.fc_weight);
        v.push(&mut self.fc_bias);
        v
    }

    /// Mutable parameters split into (backbone, temporal modules).
    pub fn param_groups_mut(&mut self) -> (Vec<&mut Parameter<S>>, Vec<&mut Parameter<S>>) {
        let mut backbone: Vec<&mut Parameter<S>> = vec![&mut self.stem, &mut self.stem_bn.gamma, &mut self.stem_bn.beta];
        let mut modules = Vec::new();
        for st in &mut self.stages {
            modules.extend(st.module.params_mut());
            backbone.push(&mut st.conv);
            backbone.push(&mut st.bn.gamma);
            backbone.push(&mut st.bn.beta);
        }
        backbone.push(&mut self.fc_weight);
        backbone.push(&mut self.fc_bias);
        (backbone, modules)
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm<S>> {
        let mut v = vec![&mut self.stem_bn];
        v.extend(self.stages.iter_mut().map(|s| &mut s.bn));
        v
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[BatchStats], momentum: f64) -> Result<()> {
        let bns = self.batch_norms_mut();
        if bns.len() != stats.len() {
            return Err(Error::Data(format!("{} batch-norm layers but {} statistics", bns.len(), stats.len())));
        }
        for (bn, st) in bns.into_iter().zip(stats) {
            bn.update(st, momentum);
        }
        Ok(())
    }

    pub fn forward_graph(&self, g: &Graph<S>, x: Var, mode: NormMode) -> Result<Forward> {
        let s = g.shape(x);
        let cfg = &self.config;
        if s.len() != 5 || s[2] != cfg.in_channels {
            return Err(shape_err!("toy net expects (N, T, {}, H, W), got {:?}", cfg.in_channels, s));
        }
        let (n, t) = (s[0], s[1]);
        let mut stats = Vec::new();
        let h = g.reshape(x, &[n * t, s[2], s[3], s[4]])?;
        let h = g.conv(h, g.param(&self.stem), None, &ConvSpec::same(2, 1).with_stride(cfg.stem_stride))?;
        let h = self.stem_bn.apply(g, h, mode, &mut stats)?;
        let mut h = g.relu(h);
        for st in &self.stages {
            let hs = g.shape(h);
            let y = g.reshape(h, &[n, t, hs[1], hs[2], hs[3]])?;
            let y = st.module.apply(g, y)?;
            let y = g.reshape(y, &hs)?;
            let y = g.conv(y, g.param(&st.conv), None, &ConvSpec::same(2, 1).with_stride(st.stride))?;
            let y = st.bn.apply(g, y, mode, &mut stats)?;
            h = g.relu(y);
        }
        let features = h;
        let fs = g.shape(features);
        let pooled = g.reshape(features, &[fs[0], fs[1], fs[2] * fs[3]])?;
        let pooled = g.mean_axis(pooled, 2, false)?;
        let scores = g.linear(pooled, g.param(&self.fc_weight), Some(g.param(&self.fc_bias)))?;
        let segment_logits = g.reshape(scores, &[n, t, cfg.cls])?;
        let logits = g.mean_axis_sorted(segment_logits, 1)?;
        Ok(Forward { logits, segment_logits, features, stats })
    }

    /// Eval-mode consensus logits (N, CLS) for a (N, T, C, H, W) batch.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&g, xv, NormMode::Eval)?;
        Ok((*g.value(out.logits)).clone())
    }

    /// Eval-mode logits and final feature maps (N*T, C, h, w).
    pub fn forward_with_features(&self, x: &Tensor<S>) -> Result<(Tensor<S>, Tensor<S>)> {
        let g = Graph::new();
        let xv = g.constant(x.clone());
        let out = self.forward_graph(&g, xv, NormMode::Eval)?;
        Ok(((*g.value(out.logits)).clone(), (*g.value(out.features)).clone()))
    }

    /// The same network described for the analytic cost model.
    pub fn arch_graph(&self, segments: usize) -> Result<ArchGraph> {
        let cfg = &self.config;
        let mut b = GraphBuilder::new(segments, cfg.in_channels, [cfg.height, cfg.width]);
        b.stage("stem").conv2d("stem", cfg.stem_width, 3, cfg.stem_stride, 1, 1, false).bn("stem_bn").relu("stem_relu");
        for (i, (&w, &s)) in cfg.widths.iter().zip(&cfg.strides).enumerate() {
            let name = format!("stage{}", i + 1);
            b.stage(&name);
            if cfg.has_module(i) {
                b.temporal_module(&format!("{name}.module"), cfg.module.variant(), cfg.ratio);
            }
            b.conv2d(&format!("{name}.conv"), w, 3, s, 1, 1, false).bn(&format!("{name}.bn")).relu(&format!("{name}.relu"));
        }
        b.stage("head").global_pool("pool").fc("fc", cfg.cls).consensus();
        let stages = cfg.stages.iter().filter(|_| cfg.module != TemporalModule::None).map(|s| format!("stage{s}")).collect();
        b.finish("toynet", cfg.module.variant(), stages, cfg.cls, [segments, cfg.in_channels, cfg.height, cfg.width])
    }

    /// Writes parameters, BN running statistics and `config.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut running: Vec<(String, Tensor<S>)> = Vec::new();
        let bns = std::iter::once(("stem_bn".to_string(), &self.stem_bn))
            .chain(self.stages.iter().enumerate().map(|(i, s)| (format!("stage{}.bn", i + 1), &s.bn)));
        for (name, bn) in bns {
            let c = bn.running.mean.len();
            running.push((format!("{name}.running_mean"), Tensor::from_f64(&[c], &bn.running.mean)?));
            running.push((format!("{name}.running_var"), Tensor::from_f64(&[c], &bn.running.var)?));
        }
        let mut entries: Vec<NamedTensor<'_, S>> =
            self.params().into_iter().map(|(k, p)| NamedTensor { role: k, tensor: &p.value }).collect();
        entries.extend(running.iter().map(|(k, t)| NamedTensor { role: k.clone(), tensor: t }));
        snapshot::save(dir, &entries)?;
        fs::write(dir.join("config.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let config: ToyConfig = serde_json::from_str(&fs::read_to_string(dir.join("config.json"))?)?;
        let mut net = Self::new(config, 0)?;
        let loaded = snapshot::load::<S>(dir)?;
        let find = |name: &str| -> Result<&Tensor<S>> {
            loaded.iter().find(|(r, _)| r == name).map(|(_, t)| t).ok_or_else(|| Error::Data(format!("snapshot lacks tensor {name}")))
        };
        let names: Vec<String> = net.params().into_iter().map(|(k, _)| k).collect();
        for (name, p) in names.iter().zip(net.params_mut()) {
            let t = find(name)?;
            if t.shape() != p.shape() {
                return Err(shape_err!("tensor {} has shape {:?}, expected {:?}", name, t.shape(), p.shape()));
            }
            p.value = t.clone();
        }
        let bn_names: Vec<String> =
            std::iter::once("stem_bn".to_string()).chain((1..=net.stages.len()).map(|i| format!("stage{i}.bn"))).collect();
        for (name, bn) in bn_names.iter().zip(net.batch_norms_mut()) {
            let m = find(&format!("{name}.running_mean"))?;
            let v = find(&format!("{name}.running_var"))?;
            if m.len() != bn.running.mean.len() || v.len() != bn.running.var.len() {
                return Err(shape_err!("running statistics of {} have the wrong length", name));
            }
            bn.running.mean = m.data().iter().map(|x| x.as_f64()).collect();
            bn.running.var = v.data().iter().map(|x| x.as_f64()).collect();
        }
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cost::count_cost;

    fn clip(n: usize, t: usize, seed: u64) -> Tensor<f32> {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::uniform(&[n, t, 1, 32, 32], 0.0, 1.0, &mut r)
    }

    #[test]
    fn output_shape() {
        let net = build_toynet(TemporalModule::Action, &[16, 32, 64], 4, 0).unwrap();
        assert_eq!(net.forward(&clip(8, 8, 1)).unwrap().shape(), &[8, 4]);
    }

    #[test]
    fn params_match_cost_model() {
        for m in ["none", "shift", "ste", "ce", "me", "action"] {
            let net = build_toynet(m.parse().unwrap(), &[16, 32, 64], 4, 0).unwrap();
            let r = count_cost(&net.arch_graph(8).unwrap()).unwrap();
            assert_eq!(r.params as usize, net.num_params(), "{m}");
        }
    }

    #[test]
    fn stage_subset() {
        let cfg = ToyConfig { stages: vec![2], ..ToyConfig::default() };
        let net = ToyNet::<f32>::new(cfg, 0).unwrap();
        assert!(matches!(net.stages[0].module, StageModule::None));
        assert!(matches!(net.stages[1].module, StageModule::Action(_)));
        assert_eq!(net.arch_graph(8).unwrap().sites(), 1);
        let bad = ToyConfig { stages: vec![4], ..ToyConfig::default() };
        assert!(matches!(ToyNet::<f32>::new(bad, 0), Err(Error::Config(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let mut net = build_toynet(TemporalModule::Action, &[16, 32, 64], 4, 5).unwrap();
        net.randomize_modules(6);
        net.stem_bn.running.mean[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        net.save(dir.path()).unwrap();
        let back = ToyNet::<f32>::load(dir.path()).unwrap();
        let x = clip(2, 4, 3);
        assert_eq!(net.forward(&x).unwrap(), back.forward(&x).unwrap());
        assert_eq!(back.stem_bn.running.mean[0], 0.25);
    }
}
