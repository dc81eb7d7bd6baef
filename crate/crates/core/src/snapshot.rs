//! Weight snapshots: a directory holding one ATNZ file per tensor and a
//! `manifest.txt` with one `path<TAB>role<TAB>shape` line per tensor.

use std::fs;
use std::path::Path;

use crate::atnz;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST: &str = "manifest.txt";

pub struct NamedTensor<'a, S> {
    pub role: String,
    pub tensor: &'a Tensor<S>,
}

fn shape_text(shape: &[usize]) -> String {
    shape.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save<S: Scalar>(dir: impl AsRef<Path>, entries: &[NamedTensor<'_, S>]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    for e in entries {
        if e.role.contains(['\t', '\n', '/']) {
            return Err(Error::Data(format!("invalid tensor role {:?}", e.role)));
        }
        let file = format!("{}.atnz", e.role);
        atnz::write(dir.join(&file), e.tensor)?;
        manifest.push_str(&format!("{}\t{}\t{}\n", file, e.role, shape_text(e.tensor.shape())));
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

pub fn load<S: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<(String, Tensor<S>)>> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::Format(format!("manifest line {} malformed: {:?}", n + 1, line)));
        }
        let t = atnz::read::<S>(dir.join(cols[0]))?;
        if shape_text(t.shape()) != cols[2] {
            return Err(Error::Format(format!("tensor {} has shape {:?}, manifest says {}", cols[1], t.shape(), cols[2])));
        }
        out.push((cols[1].to_string(), t));
    }
    Ok(out)
}
