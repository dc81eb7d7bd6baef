//! Spatio-temporal, channel and motion excitation paths and their sum.
//!
//! All paths consume and produce (N, T, C, H, W) feature tensors. Each one
//! derives a gate `M` in (0, 1) and returns `X + X * M`, with `M` broadcast
//! along the axes it pooled away.

use std::path::Path;

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::conv::ConvSpec;
use crate::error::{shape_err, Error, Result};
use crate::optim::Parameter;
use crate::snapshot::{self, NamedTensor};
use crate::tensor::{Scalar, Tensor};

/// Channel reduction ratio of the squeeze convolutions.
pub const REDUCTION: usize = 16;

/// Fraction of channels shifted in each temporal direction by TSM.
pub const SHIFT_FRACTION: f64 = 1.0 / 8.0;

pub fn reduced_channels(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

/// A rank-5 (N, T, C, H, W) feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentBatch<S> {
    data: Tensor<S>,
}

impl<S: Scalar> SegmentBatch<S> {
    pub fn new(data: Tensor<S>) -> Result<Self> {
        if data.rank() != 5 {
            return Err(shape_err!("segment batch must be (N, T, C, H, W), got {:?}", data.shape()));
        }
        Ok(Self { data })
    }

    pub fn dims(&self) -> [usize; 5] {
        dims5(self.data.shape())
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.data
    }
}

fn dims5(s: &[usize]) -> [usize; 5] {
    [s[0], s[1], s[2], s[3], s[4]]
}

fn rank5(g: &Graph<impl Scalar>, x: Var) -> Result<[usize; 5]> {
    let s = g.shape(x);
    if s.len() != 5 {
        return Err(shape_err!("excitation input must be (N, T, C, H, W), got {:?}", s));
    }
    Ok(dims5(&s))
}

fn fan_in_uniform<S: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<S> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

fn param<S: Scalar>(t: Tensor<S>) -> Parameter<S> {
    Parameter::new(t)
}

/// Output of one excitation path on a graph.
#[derive(Debug, Clone, Copy)]
pub struct PathOut {
    pub y: Var,
    pub mask: Var,
    /// Zero-padded motion features (N, T, C/r, H, W); motion path only.
    pub motion: Option<Var>,
}

// ---- spatio-temporal ------------------------------------------------

#[derive(Debug, Clone)]
pub struct SteWeights<S> {
    /// (1, 1, 3, 3, 3)
    pub k3d: Parameter<S>,
    /// (1)
    pub bias: Parameter<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct SteVars {
    pub k3d: Var,
    pub bias: Var,
}

impl<S: Scalar> SteWeights<S> {
    /// Zero kernel and bias: the gate starts at exactly 0.5.
    pub fn new() -> Self {
        Self { k3d: param(Tensor::zeros(&[1, 1, 3, 3, 3])), bias: param(Tensor::zeros(&[1])) }
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self { k3d: param(fan_in_uniform(&[1, 1, 3, 3, 3], 27, rng)), bias: param(fan_in_uniform(&[1], 27, rng)) }
    }

    pub fn bind(&self, g: &Graph<S>) -> SteVars {
        SteVars { k3d: g.param(&self.k3d), bias: g.param(&self.bias) }
    }

    pub fn params(&self) -> Vec<(&'static str, &Parameter<S>)> {
        vec![("k3d", &self.k3d), ("bias", &self.bias)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.k3d, &mut self.bias]
    }
}

impl<S: Scalar> Default for SteWeights<S> {
    fn default() -> Self {
        Self::new()
    }
}

pub fn ste_graph<S: Scalar>(g: &Graph<S>, x: Var, w: &SteVars) -> Result<PathOut> {
    let [n, t, _c, h, wd] = rank5(g, x)?;
    let f = g.mean_axis(x, 2, true)?;
    let f = g.reshape(f, &[n, 1, t, h, wd])?;
    let fo = g.conv(f, w.k3d, Some(w.bias), &ConvSpec::same(3, 1))?;
    let fo = g.reshape(fo, &[n, t, 1, h, wd])?;
    let mask = g.sigmoid(fo);
    Ok(PathOut { y: g.mask_residual(x, mask)?, mask, motion: None })
}

// ---- channel --------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CeWeights<S> {
    pub channels: usize,
    pub reduced: usize,
    /// (C/r, C, 1, 1)
    pub k1_squeeze: Parameter<S>,
    pub b1: Parameter<S>,
    /// (C/r, C/r, 3)
    pub k2_temporal: Parameter<S>,
    pub b2: Parameter<S>,
    /// (C, C/r, 1, 1)
    pub k3_unsqueeze: Parameter<S>,
    pub b3: Parameter<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct CeVars {
    pub k1: Var,
    pub b1: Var,
    pub k2: Var,
    pub b2: Var,
    pub k3: Var,
    pub b3: Var,
}

impl<S: Scalar> CeWeights<S> {
    /// Fan-in init for squeeze and temporal convs, zero unsqueeze.
    pub fn new<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Self {
        let cr = reduced_channels(channels, ratio);
        Self {
            channels,
            reduced: cr,
            k1_squeeze: param(fan_in_uniform(&[cr, channels, 1, 1], channels, rng)),
            b1: param(fan_in_uniform(&[cr], channels, rng)),
            k2_temporal: param(fan_in_uniform(&[cr, cr, 3], 3 * cr, rng)),
            b2: param(fan_in_uniform(&[cr], 3 * cr, rng)),
            k3_unsqueeze: param(Tensor::zeros(&[channels, cr, 1, 1])),
            b3: param(Tensor::zeros(&[channels])),
        }
    }

    /// Every tensor random, including the unsqueeze conv.
    pub fn random<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Self {
        let mut w = Self::new(channels, ratio, rng);
        let cr = w.reduced;
        w.k3_unsqueeze = param(fan_in_uniform(&[channels, cr, 1, 1], cr, rng));
        w.b3 = param(fan_in_uniform(&[channels], cr, rng));
        w
    }

    pub fn bind(&self, g: &Graph<S>) -> CeVars {
        CeVars {
            k1: g.param(&self.k1_squeeze),
            b1: g.param(&self.b1),
            k2: g.param(&self.k2_temporal),
            b2: g.param(&self.b2),
            k3: g.param(&self.k3_unsqueeze),
            b3: g.param(&self.b3),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Parameter<S>)> {
        vec![
            ("k1_squeeze", &self.k1_squeeze),
            ("b1", &self.b1),
            ("k2_temporal", &self.k2_temporal),
            ("b2", &self.b2),
            ("k3_unsqueeze", &self.k3_unsqueeze),
            ("b3", &self.b3),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.k1_squeeze, &mut self.b1, &mut self.k2_temporal, &mut self.b2, &mut self.k3_unsqueeze, &mut self.b3]
    }
}

pub fn ce_graph<S: Scalar>(g: &Graph<S>, x: Var, w: &CeVars) -> Result<PathOut> {
    let [n, t, c, h, wd] = rank5(g, x)?;
    let cr = g.shape(w.k1)[0];
    let f = g.reshape(x, &[n * t, c, h * wd])?;
    let f = g.mean_axis(f, 2, false)?;
    let f = g.reshape(f, &[n * t, c, 1, 1])?;
    let fr = g.conv(f, w.k1, Some(w.b1), &ConvSpec::same(2, 0))?;
    let fr = g.reshape(fr, &[n, t, cr])?;
    let fr = g.permute(fr, &[0, 2, 1])?;
    let ft = g.conv(fr, w.k2, Some(w.b2), &ConvSpec::same(1, 1))?;
    let ft = g.permute(ft, &[0, 2, 1])?;
    let ft = g.reshape(ft, &[n * t, cr, 1, 1])?;
    let fo = g.conv(ft, w.k3, Some(w.b3), &ConvSpec::same(2, 0))?;
    let fo = g.reshape(fo, &[n, t, c, 1, 1])?;
    let mask = g.sigmoid(fo);
    Ok(PathOut { y: g.mask_residual(x, mask)?, mask, motion: None })
}

// ---- motion ---------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MeWeights<S> {
    pub channels: usize,
    pub reduced: usize,
    /// (C/r, C, 1, 1)
    pub k1_squeeze: Parameter<S>,
    pub b1: Parameter<S>,
    /// (C/r, 1, 3, 3), depthwise
    pub k_diff: Parameter<S>,
    pub b_diff: Parameter<S>,
    /// (C, C/r, 1, 1)
    pub k3_unsqueeze: Parameter<S>,
    pub b3: Parameter<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct MeVars {
    pub k1: Var,
    pub b1: Var,
    pub kd: Var,
    pub bd: Var,
    pub k3: Var,
    pub b3: Var,
}

impl<S: Scalar> MeWeights<S> {
    pub fn new<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Self {
        let cr = reduced_channels(channels, ratio);
        Self {
            channels,
            reduced: cr,
            k1_squeeze: param(fan_in_uniform(&[cr, channels, 1, 1], channels, rng)),
            b1: param(fan_in_uniform(&[cr], channels, rng)),
            k_diff: param(fan_in_uniform(&[cr, 1, 3, 3], 9, rng)),
            b_diff: param(fan_in_uniform(&[cr], 9, rng)),
            k3_unsqueeze: param(Tensor::zeros(&[channels, cr, 1, 1])),
            b3: param(Tensor::zeros(&[channels])),
        }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Self {
        let mut w = Self::new(channels, ratio, rng);
        let cr = w.reduced;
        w.k3_unsqueeze = param(fan_in_uniform(&[channels, cr, 1, 1], cr, rng));
        w.b3 = param(fan_in_uniform(&[channels], cr, rng));
        w
    }

    pub fn bind(&self, g: &Graph<S>) -> MeVars {
        MeVars {
            k1: g.param(&self.k1_squeeze),
            b1: g.param(&self.b1),
            kd: g.param(&self.k_diff),
            bd: g.param(&self.b_diff),
            k3: g.param(&self.k3_unsqueeze),
            b3: g.param(&self.b3),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Parameter<S>)> {
        vec![
            ("k1_squeeze", &self.k1_squeeze),
            ("b1", &self.b1),
            ("k_diff", &self.k_diff),
            ("b_diff", &self.b_diff),
            ("k3_unsqueeze", &self.k3_unsqueeze),
            ("b3", &self.b3),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        vec![&mut self.k1_squeeze, &mut self.b1, &mut self.k_diff, &mut self.b_diff, &mut self.k3_unsqueeze, &mut self.b3]
    }
}

pub fn me_graph<S: Scalar>(g: &Graph<S>, x: Var, w: &MeVars) -> Result<PathOut> {
    let [n, t, c, h, wd] = rank5(g, x)?;
    let cr = g.shape(w.k1)[0];
    let xr = g.reshape(x, &[n * t, c, h, wd])?;
    let fr = g.conv(xr, w.k1, Some(w.b1), &ConvSpec::same(2, 0))?;
    let fr = g.reshape(fr, &[n, t, cr, h, wd])?;
    let motion = if t >= 2 {
        let next = g.narrow(fr, 1, 1, t - 1)?;
        let next = g.reshape(next, &[n * (t - 1), cr, h, wd])?;
        let next = g.conv(next, w.kd, Some(w.bd), &ConvSpec::same(2, 1).with_groups(cr))?;
        let next = g.reshape(next, &[n, t - 1, cr, h, wd])?;
        let cur = g.narrow(fr, 1, 0, t - 1)?;
        let diff = g.sub(next, cur)?;
        g.pad_axis(diff, 1, 0, 1)?
    } else {
        g.constant(Tensor::zeros(&[n, 1, cr, h, wd]))
    };
    let pooled = g.reshape(motion, &[n * t, cr, h * wd])?;
    let pooled = g.mean_axis(pooled, 2, false)?;
    let pooled = g.reshape(pooled, &[n * t, cr, 1, 1])?;
    let fo = g.conv(pooled, w.k3, Some(w.b3), &ConvSpec::same(2, 0))?;
    let fo = g.reshape(fo, &[n, t, c, 1, 1])?;
    let mask = g.sigmoid(fo);
    Ok(PathOut { y: g.mask_residual(x, mask)?, mask, motion: Some(motion) })
}

// ---- combined -------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ActionWeights<S> {
    pub ste: SteWeights<S>,
    pub ce: CeWeights<S>,
    pub me: MeWeights<S>,
}

#[derive(Debug, Clone, Copy)]
pub struct ActionVars {
    pub ste: SteVars,
    pub ce: CeVars,
    pub me: MeVars,
}

impl<S: Scalar> ActionWeights<S> {
    /// Training initialization: every gate starts at 0.5.
    pub fn new<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Self {
        Self { ste: SteWeights::new(), ce: CeWeights::new(channels, ratio, rng), me: MeWeights::new(channels, ratio, rng) }
    }

    pub fn random<R: Rng + ?Sized>(channels: usize, ratio: usize, rng: &mut R) -> Self {
        Self { ste: SteWeights::random(rng), ce: CeWeights::random(channels, ratio, rng), me: MeWeights::random(channels, ratio, rng) }
    }

    pub fn channels(&self) -> usize {
        self.ce.channels
    }

    pub fn bind(&self, g: &Graph<S>) -> ActionVars {
        ActionVars { ste: self.ste.bind(g), ce: self.ce.bind(g), me: self.me.bind(g) }
    }

    pub fn params(&self) -> Vec<(String, &Parameter<S>)> {
        let mut v = Vec::new();
        v.extend(self.ste.params().into_iter().map(|(k, p)| (format!("ste.{k}"), p)));
        v.extend(self.ce.params().into_iter().map(|(k, p)| (format!("ce.{k}"), p)));
        v.extend(self.me.params().into_iter().map(|(k, p)| (format!("me.{k}"), p)));
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<S>> {
        let mut v = self.ste.params_mut();
        v.extend(self.ce.params_mut());
        v.extend(self.me.params_mut());
        v
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|(_, p)| p.numel()).sum()
    }

    /// Writes every tensor as an ATNZ file plus a manifest.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let entries: Vec<NamedTensor<'_, S>> = self.params().into_iter().map(|(k, p)| NamedTensor { role: k, tensor: &p.value }).collect();
        snapshot::save(dir, &entries)
    }

    /// Loads tensors saved by [`save`](Self::save) into weights of matching
    /// shape.
    pub fn load(dir: impl AsRef<Path>, channels: usize, ratio: usize) -> Result<Self> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut w = Self::new(channels, ratio, &mut rng);
        let loaded = snapshot::load::<S>(dir)?;
        let names: Vec<String> = w.params().into_iter().map(|(k, _)| k).collect();
        for (name, p) in names.iter().zip(w.params_mut()) {
            let t = loaded
                .iter()
                .find(|(r, _)| r == name)
                .map(|(_, t)| t)
                .ok_or_else(|| Error::Data(format!("snapshot lacks tensor {name}")))?;
            if t.shape() != p.shape() {
                return Err(shape_err!("snapshot tensor {} has shape {:?}, expected {:?}", name, t.shape(), p.shape()));
            }
            p.value = t.clone();
        }
        Ok(w)
    }
}

/// Sum of the three path outputs.
pub fn action_graph<S: Scalar>(g: &Graph<S>, x: Var, w: &ActionVars) -> Result<[PathOut; 3]> {
    let ste = ste_graph(g, x, &w.ste)?;
    let ce = ce_graph(g, x, &w.ce)?;
    let me = me_graph(g, x, &w.me)?;
    Ok([ste, ce, me])
}

pub fn action_sum<S: Scalar>(g: &Graph<S>, paths: &[PathOut; 3]) -> Result<Var> {
    let s = g.add(paths[0].y, paths[1].y)?;
    g.add(s, paths[2].y)
}

// ---- tensor-level entry points ---------------------------------------

fn run<S: Scalar>(x: &SegmentBatch<S>, f: impl FnOnce(&Graph<S>, Var) -> Result<Var>) -> Result<SegmentBatch<S>> {
    let g = Graph::new();
    let xv = g.constant(x.tensor().clone());
    let y = f(&g, xv)?;
    SegmentBatch::new((*g.value(y)).clone())
}

pub fn ste_forward<S: Scalar>(x: &SegmentBatch<S>, w: &SteWeights<S>) -> Result<SegmentBatch<S>> {
    run(x, |g, xv| Ok(ste_graph(g, xv, &w.bind(g))?.y))
}

pub fn ce_forward<S: Scalar>(x: &SegmentBatch<S>, w: &CeWeights<S>) -> Result<SegmentBatch<S>> {
    run(x, |g, xv| Ok(ce_graph(g, xv, &w.bind(g))?.y))
}

pub fn me_forward<S: Scalar>(x: &SegmentBatch<S>, w: &MeWeights<S>) -> Result<SegmentBatch<S>> {
    run(x, |g, xv| Ok(me_graph(g, xv, &w.bind(g))?.y))
}

pub fn action_forward<S: Scalar>(x: &SegmentBatch<S>, w: &ActionWeights<S>) -> Result<SegmentBatch<S>> {
    run(x, |g, xv| {
        let paths = action_graph(g, xv, &w.bind(g))?;
        action_sum(g, &paths)
    })
}

/// Number of channels moved per direction for a given shift fraction.
pub fn shift_fold(channels: usize, fraction: f64) -> usize {
    (channels as f64 * fraction).floor() as usize
}

pub fn temporal_shift<S: Scalar>(x: &SegmentBatch<S>, fraction: f64) -> Result<SegmentBatch<S>> {
    let fold = shift_fold(x.dims()[2], fraction);
    run(x, |g, xv| g.temporal_shift(xv, fold))
}

/// Averages (N, T, K) per-segment scores over T, exactly invariant to the
/// segment order.
pub fn segment_consensus<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.rank() != 3 {
        return Err(shape_err!("consensus expects (N, T, classes), got {:?}", logits.shape()));
    }
    logits.mean_axis_sorted(1)
}
