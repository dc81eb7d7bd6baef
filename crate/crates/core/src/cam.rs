//! Class activation maps over the final feature maps of a [`ToyNet`].

use std::io::Write;
use std::path::Path;

use crate::atnz;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::toynet::ToyNet;

#[derive(Debug, Clone)]
pub struct Cam {
    pub class: usize,
    /// Class-weighted feature sums (T, h, w).
    pub raw: Tensor<f32>,
    /// `raw` min-max scaled to [0, 1] per frame.
    pub normalized: Tensor<f32>,
}

impl Cam {
    pub fn frames(&self) -> usize {
        self.raw.shape()[0]
    }

    /// (row, col) of the strongest activation in frame `t`, first on ties.
    pub fn peak(&self, t: usize) -> (usize, usize) {
        let [_, h, w] = dims(&self.raw);
        let frame = &self.raw.data()[t * h * w..(t + 1) * h * w];
        let i = frame.iter().enumerate().fold(0, |best, (i, &v)| if v > frame[best] { i } else { best });
        (i / w, i % w)
    }
}

fn dims(t: &Tensor<f32>) -> [usize; 3] {
    let s = t.shape();
    [s[0], s[1], s[2]]
}

/// Σ_c weights[c] · features[t, c] for features (T, C, h, w).
pub fn weighted_maps(features: &Tensor<f32>, weights: &[f32]) -> Result<Tensor<f32>> {
    let s = features.shape();
    if s.len() != 4 || s[1] != weights.len() {
        return Err(Error::Shape(format!("features {s:?} do not match {} class weights", weights.len())));
    }
    let (t, c, hw) = (s[0], s[1], s[2] * s[3]);
    let f = features.data();
    let mut out = vec![0f32; t * hw];
    for (ti, dst) in out.chunks_mut(hw).enumerate() {
        for (ci, &wc) in weights.iter().enumerate() {
            let src = &f[(ti * c + ci) * hw..(ti * c + ci + 1) * hw];
            dst.iter_mut().zip(src).for_each(|(d, &v)| *d += wc * v);
        }
    }
    Tensor::new(&[t, s[2], s[3]], out)
}

/// Per-frame min-max scaling; constant frames map to zero.
pub fn normalize_frames(raw: &Tensor<f32>) -> Tensor<f32> {
    let [_, h, w] = dims(raw);
    let mut out = raw.clone();
    for frame in out.data_mut().chunks_mut(h * w) {
        let lo = frame.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = frame.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let span = hi - lo;
        frame.iter_mut().for_each(|v| *v = if span > 0.0 { (*v - lo) / span } else { 0.0 });
    }
    out
}

/// CAM of `class` for one clip (T, C, H, W) using eval-mode features.
pub fn class_activation(net: &ToyNet<f32>, clip: &Tensor<f32>, class: usize) -> Result<Cam> {
    let cls = net.config.cls;
    if class >= cls {
        return Err(Error::Data(format!("class {class} out of range for {cls} classes")));
    }
    let s = clip.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("clip must be (T, C, H, W), got {s:?}")));
    }
    let x = clip.reshape(&[1, s[0], s[1], s[2], s[3]])?;
    let (_, features) = net.forward_with_features(&x)?;
    let fc = &net.fc_weight.value;
    let c = fc.shape()[1];
    let raw = weighted_maps(&features, &fc.data()[class * c..(class + 1) * c])?;
    let normalized = normalize_frames(&raw);
    Ok(Cam { class, raw, normalized })
}

/// Binary 8-bit PGM of a [0, 1] map.
pub fn write_pgm(path: impl AsRef<Path>, map: &[f32], h: usize, w: usize) -> Result<()> {
    if map.len() != h * w {
        return Err(Error::Shape(format!("{} values for a {h}x{w} image", map.len())));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = map.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}

/// Writes `cam_raw.atnz`, `cam.atnz` and `frame_{t}.pgm` into `dir`.
pub fn cam_export(net: &ToyNet<f32>, clip: &Tensor<f32>, class: usize, dir: impl AsRef<Path>) -> Result<Cam> {
    let cam = class_activation(net, clip, class)?;
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    atnz::write(dir.join("cam_raw.atnz"), &cam.raw)?;
    atnz::write(dir.join("cam.atnz"), &cam.normalized)?;
    let [t, h, w] = dims(&cam.normalized);
    for (i, frame) in cam.normalized.data().chunks(h * w).take(t).enumerate() {
        write_pgm(dir.join(format!("frame_{i:02}.pgm")), frame, h, w)?;
    }
    Ok(cam)
}

/// Maps an input-pixel point [x, y] onto a feature grid of `feat` = [h, w].
pub fn to_feature_coords(p: [f64; 2], input: [usize; 2], feat: [usize; 2]) -> [f64; 2] {
    let sx = feat[1] as f64 / input[1] as f64;
    let sy = feat[0] as f64 / input[0] as f64;
    [(p[0] + 0.5) * sx - 0.5, (p[1] + 0.5) * sy - 0.5]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_features_give_uniform_maps() {
        let f = Tensor::<f32>::full(&[2, 3, 4, 4], 0.5);
        let m = weighted_maps(&f, &[1.0, -2.0, 0.25]).unwrap();
        assert_eq!(m.shape(), &[2, 4, 4]);
        assert!(m.data().iter().all(|&v| v == m.data()[0]));
        assert!(normalize_frames(&m).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_range() {
        let raw = Tensor::new(&[1, 2, 2], vec![-1.0f32, 0.0, 1.0, 3.0]).unwrap();
        assert_eq!(normalize_frames(&raw).data(), &[0.0, 0.25, 0.5, 1.0]);
    }

    #[test]
    fn feature_coords() {
        assert_eq!(to_feature_coords([0.0, 0.0], [32, 32], [32, 32]), [0.0, 0.0]);
        assert_eq!(to_feature_coords([15.5, 3.5], [32, 32], [4, 4]), [1.5, 0.0]);
    }
}
