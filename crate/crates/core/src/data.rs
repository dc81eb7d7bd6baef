//! Synthetic temporal-direction clips, segment sampling and dataset storage.
//!
//! Classes come in reversal pairs: a clip of class `2k + 1` is the exact
//! frame reversal of a clip of class `2k` (before noise), so only temporal
//! order separates them.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::atnz;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CLASS_NAMES: [&str; 4] = ["translate_left_to_right", "translate_right_to_left", "orbit_cw", "orbit_ccw"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub motion: String,
    pub direction: String,
    /// Blob displacement per raw frame, in pixels.
    pub speed: f64,
    pub seed: u64,
    /// Noise-free blob center `[x, y]` per raw frame.
    pub centers: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticVideo {
    /// (F_raw, 1, H, W), values in [0, 1].
    pub frames: Tensor<f32>,
    pub label: usize,
    pub meta: VideoMeta,
}

impl SyntheticVideo {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipDataset {
    pub videos: Vec<SyntheticVideo>,
    pub classes: Vec<String>,
    pub split: String,
}

impl ClipDataset {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    /// Partner class with reversed frame order.
    pub fn reversal_partner(class: usize) -> usize {
        class ^ 1
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes.len()];
        for v in &self.videos {
            c[v.label] += 1;
        }
        c
    }
}

/// Gaussian spot with per-axis widths `sigma = [sx, sy]` at every center.
fn render(centers: &[[f64; 2]], h: usize, w: usize, sigma: [f64; 2], amp: f64) -> Vec<f32> {
    let mut out = vec![0f32; centers.len() * h * w];
    let inv = sigma.map(|s| 1.0 / (2.0 * s * s));
    for (f, &[cx, cy]) in centers.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) * inv[0] + (y as f64 - cy).powi(2) * inv[1];
                out[(f * h + y) * w + x] = (amp * (-d2).exp()) as f32;
            }
        }
    }
    out
}

fn reversed(frames: &[f32], frame_len: usize) -> Vec<f32> {
    frames.chunks_exact(frame_len).rev().flatten().copied().collect()
}

fn add_noise(frames: &mut [f32], sigma: f64, rng: &mut ChaCha8Rng) {
    if sigma > 0.0 {
        let n = Normal::new(0.0, sigma).expect("finite sigma");
        for v in frames.iter_mut() {
            *v = (*v as f64 + n.sample(rng)).clamp(0.0, 1.0) as f32;
        }
    }
}

/// Generates `n_per_class` clips for each of the four direction classes.
pub fn gen_direction_dataset(n_per_class: usize, f_raw: usize, h: usize, w: usize, noise: f64, seed: u64) -> Result<ClipDataset> {
    if f_raw < 8 || h < 16 || w < 16 {
        return Err(Error::Config(format!("need F_raw >= 8 and H, W >= 16, got {f_raw}x{h}x{w}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Config(format!("noise sigma must be finite and non-negative, got {noise}")));
    }
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let (hf, wf) = (h as f64, w as f64);
    let frame_len = h * w;
    let mut videos = Vec::with_capacity(4 * n_per_class);
    for _ in 0..n_per_class {
        for kind in 0..2 {
            let pair_seed: u64 = master.random();
            let mut rng = ChaCha8Rng::seed_from_u64(pair_seed);
            let sigma = rng.random_range(1.5..2.5);
            let amp = rng.random_range(0.7..1.0);
            let last = (f_raw - 1) as f64;
            let (centers, speed): (Vec<[f64; 2]>, f64) = if kind == 0 {
                let x0 = rng.random_range(0.2 * wf..0.4 * wf);
                let x1 = x0 + rng.random_range(0.3 * wf..0.45 * wf);
                let y0 = rng.random_range(0.25 * hf..0.75 * hf);
                let dy = rng.random_range(-0.1 * hf..0.1 * hf);
                let c = (0..f_raw).map(|f| [x0 + (x1 - x0) * f as f64 / last, y0 + dy * f as f64 / last]).collect();
                (c, (x1 - x0) / last)
            } else {
                let cx = wf / 2.0 + rng.random_range(-2.0..2.0);
                let cy = hf / 2.0 + rng.random_range(-2.0..2.0);
                let rho = rng.random_range(hf.min(wf) / 5.0..hf.min(wf) / 3.5);
                let th0 = rng.random_range(0.0..2.0 * PI);
                let sweep = rng.random_range(1.2 * PI..1.6 * PI);
                let c = (0..f_raw)
                    .map(|f| {
                        let th = th0 + sweep * f as f64 / last;
                        [cx + rho * th.cos(), cy + rho * th.sin()]
                    })
                    .collect();
                (c, rho * sweep / last)
            };
            // Translating objects are upright bars, orbiting ones round blobs.
            let widths = if kind == 0 { [sigma, 2.0 * sigma] } else { [sigma, sigma] };
            let base = render(&centers, h, w, widths, amp);
            let (motion, dirs) = if kind == 0 { ("translate", ["left_to_right", "right_to_left"]) } else { ("orbit", ["cw", "ccw"]) };
            for (j, dir) in dirs.iter().enumerate() {
                let (mut frames, cs) = if j == 0 {
                    (base.clone(), centers.clone())
                } else {
                    (reversed(&base, frame_len), centers.iter().rev().copied().collect())
                };
                add_noise(&mut frames, noise, &mut rng);
                videos.push(SyntheticVideo {
                    frames: Tensor::new(&[f_raw, 1, h, w], frames)?,
                    label: 2 * kind + j,
                    meta: VideoMeta { motion: motion.into(), direction: dir.to_string(), speed, seed: pair_seed, centers: cs },
                });
            }
        }
    }
    Ok(ClipDataset { videos, classes: CLASS_NAMES.iter().map(|s| s.to_string()).collect(), split: String::new() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleMode {
    Random,
    Center,
}

/// One frame index per segment; segments differ in length by at most one,
/// with the longer ones first.
pub fn segment_indices<R: Rng + ?Sized>(f_raw: usize, segments: usize, mode: SampleMode, rng: &mut R) -> Result<Vec<usize>> {
    if segments == 0 || f_raw < segments {
        return Err(Error::Data(format!("cannot sample {segments} segments from {f_raw} frames")));
    }
    let (base, rem) = (f_raw / segments, f_raw % segments);
    let mut start = 0;
    let mut out = Vec::with_capacity(segments);
    for k in 0..segments {
        let len = base + usize::from(k < rem);
        out.push(match mode {
            SampleMode::Center => start + len / 2,
            SampleMode::Random => start + rng.random_range(0..len),
        });
        start += len;
    }
    Ok(out)
}

/// Samples a (T, C, H, W) clip from `v`.
pub fn tsn_sample(v: &SyntheticVideo, segments: usize, mode: SampleMode, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx = segment_indices(v.num_frames(), segments, mode, &mut rng)?;
    v.frames.select(0, &idx)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    file: String,
    label: usize,
    meta: VideoMeta,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    classes: Vec<String>,
    split: String,
    videos: Vec<ManifestEntry>,
}

pub const MANIFEST: &str = "manifest.json";

/// Writes `manifest.json` plus one ATNZ file per video into `dir`.
pub fn save_dataset(ds: &ClipDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(ds.len());
    for (i, v) in ds.videos.iter().enumerate() {
        let file = format!("video_{i:05}.atnz");
        atnz::write(dir.join(&file), &v.frames)?;
        entries.push(ManifestEntry { file, label: v.label, meta: v.meta.clone() });
    }
    let m = Manifest { classes: ds.classes.clone(), split: ds.split.clone(), videos: entries };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)?)?;
    Ok(())
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<ClipDataset> {
    let dir = dir.as_ref();
    let m: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    let mut videos = Vec::with_capacity(m.videos.len());
    for e in m.videos {
        if e.label >= m.classes.len() {
            return Err(Error::Data(format!("{}: label {} out of range", e.file, e.label)));
        }
        let frames: Tensor<f32> = atnz::read(dir.join(&e.file))?;
        if frames.rank() != 4 {
            return Err(Error::Data(format!("{}: expected (F, C, H, W), got {:?}", e.file, frames.shape())));
        }
        videos.push(SyntheticVideo { frames, label: e.label, meta: e.meta });
    }
    Ok(ClipDataset { videos, classes: m.classes, split: m.split })
}
