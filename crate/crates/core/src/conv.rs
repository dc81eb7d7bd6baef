//! Cross-correlation over 1, 2 or 3 spatial axes.
//!
//! Every rank is lowered to a 3D problem by prefixing unit extents, so one
//! set of kernels serves Conv1d/2d/3d. Convolutions that mix channels go
//! through im2col and a matrix product; depthwise and single-channel ones use
//! direct loops split over output planes. Both paths accumulate in a fixed
//! order, so results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub rank: usize,
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub groups: usize,
}

impl ConvSpec {
    /// `stride` and `pad` list one entry per spatial axis.
    pub fn new(rank: usize, stride: &[usize], pad: &[usize], groups: usize) -> Result<Self> {
        if !(1..=3).contains(&rank) {
            return Err(shape_err!("spatial rank must be 1, 2 or 3, got {}", rank));
        }
        if stride.len() != rank || pad.len() != rank {
            return Err(shape_err!("stride/pad must have {} entries", rank));
        }
        if stride.contains(&0) || groups == 0 {
            return Err(shape_err!("stride and groups must be positive"));
        }
        let mut s = [1; 3];
        let mut p = [0; 3];
        s[3 - rank..].copy_from_slice(stride);
        p[3 - rank..].copy_from_slice(pad);
        Ok(Self { rank, stride: s, pad: p, groups })
    }

    /// Stride 1, `pad` on every axis, no grouping.
    pub fn same(rank: usize, pad: usize) -> Self {
        Self::new(rank, &vec![1; rank], &vec![pad; rank], 1).expect("valid rank")
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        for s in &mut self.stride[3 - self.rank..] {
            *s = stride;
        }
        self
    }
}

pub fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad).checked_sub(kernel).map(|d| d / stride + 1)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    batch: usize,
    cin: usize,
    cout: usize,
    cin_g: usize,
    cout_g: usize,
    inp: [usize; 3],
    k: [usize; 3],
    out: [usize; 3],
    s: [usize; 3],
    p: [usize; 3],
}

impl Geometry {
    pub(crate) fn new(x: &[usize], w: &[usize], spec: &ConvSpec) -> Result<Self> {
        let r = spec.rank;
        if x.len() != r + 2 || w.len() != r + 2 {
            return Err(shape_err!("conv{}d expects input/kernel of rank {}, got {:?} and {:?}", r, r + 2, x, w));
        }
        let (batch, cin, cout) = (x[0], x[1], w[0]);
        if cin % spec.groups != 0 || cout % spec.groups != 0 {
            return Err(shape_err!("channels in {} / out {} not divisible by groups {}", cin, cout, spec.groups));
        }
        let cin_g = cin / spec.groups;
        if w[1] != cin_g {
            return Err(shape_err!("kernel expects {} input channels per group, input gives {}", w[1], cin_g));
        }
        let mut inp = [1; 3];
        let mut k = [1; 3];
        inp[3 - r..].copy_from_slice(&x[2..]);
        k[3 - r..].copy_from_slice(&w[2..]);
        let mut out = [1; 3];
        for a in 0..3 {
            out[a] = out_extent(inp[a], k[a], spec.stride[a], spec.pad[a])
                .ok_or_else(|| shape_err!("kernel {:?} larger than padded input {:?}", &w[2..], &x[2..]))?;
        }
        Ok(Self { batch, cin, cout, cin_g, cout_g: cout / spec.groups, inp, k, out, s: spec.stride, p: spec.pad })
    }

    pub(crate) fn out_shape(&self, rank: usize) -> Vec<usize> {
        let mut s = vec![self.batch, self.cout];
        s.extend_from_slice(&self.out[3 - rank..]);
        s
    }

    fn in_plane(&self) -> usize {
        self.inp.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.out.iter().product()
    }

    fn kvol(&self) -> usize {
        self.k.iter().product()
    }

    fn groups(&self) -> usize {
        self.cin / self.cin_g
    }
}

/// Output positions `o` with `0 <= o*s + k - p < len`.
#[inline]
fn valid(out_len: usize, in_len: usize, k: usize, s: usize, p: usize) -> (usize, usize) {
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if in_len + p > k { ((in_len + p - k - 1) / s + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

#[inline]
fn chunked_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().copied().sum::<S>() + tail
}

fn direct_forward<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, g: &Geometry) -> Vec<S> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let mut out = vec![S::zero(); g.batch * g.cout * op];
    out.par_chunks_mut(op).enumerate().for_each(|(plane, dst)| {
        let (b, oc) = (plane / g.cout, plane % g.cout);
        if let Some(bias) = bias {
            dst.fill(bias[oc]);
        }
        let grp = oc / g.cout_g;
        for icg in 0..g.cin_g {
            let ic = grp * g.cin_g + icg;
            let src = &x[(b * g.cin + ic) * ip..(b * g.cin + ic + 1) * ip];
            let wk = &w[(oc * g.cin_g + icg) * kv..(oc * g.cin_g + icg + 1) * kv];
            for k0 in 0..g.k[0] {
                let (lo0, hi0) = valid(g.out[0], g.inp[0], k0, g.s[0], g.p[0]);
                for k1 in 0..g.k[1] {
                    let (lo1, hi1) = valid(g.out[1], g.inp[1], k1, g.s[1], g.p[1]);
                    for k2 in 0..g.k[2] {
                        let (lo2, hi2) = valid(g.out[2], g.inp[2], k2, g.s[2], g.p[2]);
                        if lo2 >= hi2 {
                            continue;
                        }
                        let wv = wk[(k0 * g.k[1] + k1) * g.k[2] + k2];
                        for o0 in lo0..hi0 {
                            let i0 = o0 * g.s[0] + k0 - g.p[0];
                            for o1 in lo1..hi1 {
                                let i1 = o1 * g.s[1] + k1 - g.p[1];
                                let orow = &mut dst[(o0 * g.out[1] + o1) * g.out[2]..][..g.out[2]];
                                let irow = &src[(i0 * g.inp[1] + i1) * g.inp[2]..][..g.inp[2]];
                                if g.s[2] == 1 {
                                    let first = lo2 + k2 - g.p[2];
                                    for (o, &i) in orow[lo2..hi2].iter_mut().zip(&irow[first..]) {
                                        *o += wv * i;
                                    }
                                } else {
                                    for o2 in lo2..hi2 {
                                        orow[o2] += wv * irow[o2 * g.s[2] + k2 - g.p[2]];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

fn direct_backward_input<S: Scalar>(dy: &[S], w: &[S], g: &Geometry) -> Vec<S> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let mut dx = vec![S::zero(); g.batch * g.cin * ip];
    dx.par_chunks_mut(ip).enumerate().for_each(|(plane, dst)| {
        let (b, ic) = (plane / g.cin, plane % g.cin);
        let (grp, icg) = (ic / g.cin_g, ic % g.cin_g);
        for oc in grp * g.cout_g..(grp + 1) * g.cout_g {
            let src = &dy[(b * g.cout + oc) * op..(b * g.cout + oc + 1) * op];
            let wk = &w[(oc * g.cin_g + icg) * kv..(oc * g.cin_g + icg + 1) * kv];
            for k0 in 0..g.k[0] {
                let (lo0, hi0) = valid(g.out[0], g.inp[0], k0, g.s[0], g.p[0]);
                for k1 in 0..g.k[1] {
                    let (lo1, hi1) = valid(g.out[1], g.inp[1], k1, g.s[1], g.p[1]);
                    for k2 in 0..g.k[2] {
                        let (lo2, hi2) = valid(g.out[2], g.inp[2], k2, g.s[2], g.p[2]);
                        if lo2 >= hi2 {
                            continue;
                        }
                        let wv = wk[(k0 * g.k[1] + k1) * g.k[2] + k2];
                        for o0 in lo0..hi0 {
                            let i0 = o0 * g.s[0] + k0 - g.p[0];
                            for o1 in lo1..hi1 {
                                let i1 = o1 * g.s[1] + k1 - g.p[1];
                                let grow = &src[(o0 * g.out[1] + o1) * g.out[2]..][..g.out[2]];
                                let xrow = &mut dst[(i0 * g.inp[1] + i1) * g.inp[2]..][..g.inp[2]];
                                if g.s[2] == 1 {
                                    let first = lo2 + k2 - g.p[2];
                                    for (xi, &gy) in xrow[first..].iter_mut().zip(&grow[lo2..hi2]) {
                                        *xi += wv * gy;
                                    }
                                } else {
                                    for o2 in lo2..hi2 {
                                        xrow[o2 * g.s[2] + k2 - g.p[2]] += wv * grow[o2];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    dx
}

fn direct_backward_kernel<S: Scalar>(dy: &[S], x: &[S], g: &Geometry) -> Vec<S> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let mut dw = vec![S::zero(); g.cout * g.cin_g * kv];
    let mut scratch_len = 0;
    if g.s[2] != 1 {
        scratch_len = g.out[2];
    }
    dw.par_chunks_mut(g.cin_g * kv).enumerate().for_each(|(oc, dst)| {
        let grp = oc / g.cout_g;
        let mut gathered = vec![S::zero(); scratch_len];
        for b in 0..g.batch {
            let gy = &dy[(b * g.cout + oc) * op..(b * g.cout + oc + 1) * op];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let src = &x[(b * g.cin + ic) * ip..(b * g.cin + ic + 1) * ip];
                for k0 in 0..g.k[0] {
                    let (lo0, hi0) = valid(g.out[0], g.inp[0], k0, g.s[0], g.p[0]);
                    for k1 in 0..g.k[1] {
                        let (lo1, hi1) = valid(g.out[1], g.inp[1], k1, g.s[1], g.p[1]);
                        for k2 in 0..g.k[2] {
                            let (lo2, hi2) = valid(g.out[2], g.inp[2], k2, g.s[2], g.p[2]);
                            if lo2 >= hi2 {
                                continue;
                            }
                            let mut acc = S::zero();
                            for o0 in lo0..hi0 {
                                let i0 = o0 * g.s[0] + k0 - g.p[0];
                                for o1 in lo1..hi1 {
                                    let i1 = o1 * g.s[1] + k1 - g.p[1];
                                    let grow = &gy[(o0 * g.out[1] + o1) * g.out[2]..][..g.out[2]];
                                    let xrow = &src[(i0 * g.inp[1] + i1) * g.inp[2]..][..g.inp[2]];
                                    if g.s[2] == 1 {
                                        let first = lo2 + k2 - g.p[2];
                                        acc += chunked_dot(&grow[lo2..hi2], &xrow[first..first + hi2 - lo2]);
                                    } else {
                                        for o2 in lo2..hi2 {
                                            gathered[o2 - lo2] = xrow[o2 * g.s[2] + k2 - g.p[2]];
                                        }
                                        acc += chunked_dot(&grow[lo2..hi2], &gathered[..hi2 - lo2]);
                                    }
                                }
                            }
                            dst[icg * kv + (k0 * g.k[1] + k1) * g.k[2] + k2] += acc;
                        }
                    }
                }
            }
        }
    });
    dw
}

pub(crate) fn backward_bias<S: Scalar>(dy: &[S], g: &Geometry) -> Vec<S> {
    let op = g.out_plane();
    let mut db = vec![S::zero(); g.cout];
    for b in 0..g.batch {
        for (oc, d) in db.iter_mut().enumerate() {
            let plane = &dy[(b * g.cout + oc) * op..(b * g.cout + oc + 1) * op];
            *d += plane.iter().copied().sum::<S>();
        }
    }
    db
}

fn use_gemm(g: &Geometry) -> bool {
    g.cin_g * g.cout_g > 1
}

/// Patch matrix of group `grp`: row `(icg, k0, k1, k2)`, column `(b, o)`.
fn im2col<S: Scalar>(x: &[S], g: &Geometry, grp: usize) -> Vec<S> {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let n = g.batch * op;
    let mut cols = vec![S::zero(); g.cin_g * kv * n];
    cols.par_chunks_mut(n).enumerate().for_each(|(row, dst)| {
        let (icg, kk) = (row / kv, row % kv);
        let (k0, k1, k2) = (kk / (g.k[1] * g.k[2]), (kk / g.k[2]) % g.k[1], kk % g.k[2]);
        let (lo0, hi0) = valid(g.out[0], g.inp[0], k0, g.s[0], g.p[0]);
        let (lo1, hi1) = valid(g.out[1], g.inp[1], k1, g.s[1], g.p[1]);
        let (lo2, hi2) = valid(g.out[2], g.inp[2], k2, g.s[2], g.p[2]);
        if lo2 >= hi2 {
            return;
        }
        let ic = grp * g.cin_g + icg;
        for b in 0..g.batch {
            let src = &x[(b * g.cin + ic) * ip..][..ip];
            let out = &mut dst[b * op..][..op];
            for o0 in lo0..hi0 {
                let i0 = o0 * g.s[0] + k0 - g.p[0];
                for o1 in lo1..hi1 {
                    let i1 = o1 * g.s[1] + k1 - g.p[1];
                    let orow = &mut out[(o0 * g.out[1] + o1) * g.out[2]..][..g.out[2]];
                    let irow = &src[(i0 * g.inp[1] + i1) * g.inp[2]..][..g.inp[2]];
                    if g.s[2] == 1 {
                        let first = lo2 + k2 - g.p[2];
                        orow[lo2..hi2].copy_from_slice(&irow[first..first + hi2 - lo2]);
                    } else {
                        for o2 in lo2..hi2 {
                            orow[o2] = irow[o2 * g.s[2] + k2 - g.p[2]];
                        }
                    }
                }
            }
        }
    });
    cols
}

/// Adds a patch-matrix gradient back onto the input planes of group `grp`.
fn col2im<S: Scalar>(cols: &[S], g: &Geometry, grp: usize, dx: &mut [S]) {
    let (ip, op, kv) = (g.in_plane(), g.out_plane(), g.kvol());
    let n = g.batch * op;
    let planes: Vec<(usize, &mut [S])> = dx.chunks_mut(ip).enumerate().collect();
    planes.into_par_iter().for_each(|(plane, dst)| {
        let (b, ic) = (plane / g.cin, plane % g.cin);
        if ic / g.cin_g != grp {
            return;
        }
        let icg = ic % g.cin_g;
        for kk in 0..kv {
            let (k0, k1, k2) = (kk / (g.k[1] * g.k[2]), (kk / g.k[2]) % g.k[1], kk % g.k[2]);
            let (lo0, hi0) = valid(g.out[0], g.inp[0], k0, g.s[0], g.p[0]);
            let (lo1, hi1) = valid(g.out[1], g.inp[1], k1, g.s[1], g.p[1]);
            let (lo2, hi2) = valid(g.out[2], g.inp[2], k2, g.s[2], g.p[2]);
            if lo2 >= hi2 {
                continue;
            }
            let src = &cols[(icg * kv + kk) * n + b * op..][..op];
            for o0 in lo0..hi0 {
                let i0 = o0 * g.s[0] + k0 - g.p[0];
                for o1 in lo1..hi1 {
                    let i1 = o1 * g.s[1] + k1 - g.p[1];
                    let crow = &src[(o0 * g.out[1] + o1) * g.out[2]..][..g.out[2]];
                    let xrow = &mut dst[(i0 * g.inp[1] + i1) * g.inp[2]..][..g.inp[2]];
                    if g.s[2] == 1 {
                        let first = lo2 + k2 - g.p[2];
                        for (xi, &c) in xrow[first..].iter_mut().zip(&crow[lo2..hi2]) {
                            *xi += c;
                        }
                    } else {
                        for o2 in lo2..hi2 {
                            xrow[o2 * g.s[2] + k2 - g.p[2]] += crow[o2];
                        }
                    }
                }
            }
        }
    });
}

/// Output-gradient planes of group `grp` as a `cout_g x (batch*op)` matrix.
fn gather_out<S: Scalar>(dy: &[S], g: &Geometry, grp: usize) -> Vec<S> {
    let op = g.out_plane();
    let n = g.batch * op;
    let mut m = vec![S::zero(); g.cout_g * n];
    for ocg in 0..g.cout_g {
        for b in 0..g.batch {
            let oc = grp * g.cout_g + ocg;
            m[ocg * n + b * op..][..op].copy_from_slice(&dy[(b * g.cout + oc) * op..][..op]);
        }
    }
    m
}

fn gemm_forward<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, g: &Geometry) -> Vec<S> {
    let (op, kv) = (g.out_plane(), g.kvol());
    let (k, n) = (g.cin_g * kv, g.batch * op);
    let mut out = vec![S::zero(); g.batch * g.cout * op];
    let mut prod = vec![S::zero(); g.cout_g * n];
    for grp in 0..g.groups() {
        let cols = im2col(x, g, grp);
        let a = &w[grp * g.cout_g * k..][..g.cout_g * k];
        S::gemm(g.cout_g, k, n, a, [k, 1], &cols, [n, 1], S::zero(), &mut prod, [n, 1]);
        for ocg in 0..g.cout_g {
            let oc = grp * g.cout_g + ocg;
            let bv = bias.map_or(S::zero(), |b| b[oc]);
            for b in 0..g.batch {
                let dst = &mut out[(b * g.cout + oc) * op..][..op];
                for (d, &p) in dst.iter_mut().zip(&prod[ocg * n + b * op..][..op]) {
                    *d = p + bv;
                }
            }
        }
    }
    out
}

fn gemm_backward_input<S: Scalar>(dy: &[S], w: &[S], g: &Geometry) -> Vec<S> {
    let (op, kv) = (g.out_plane(), g.kvol());
    let (k, n) = (g.cin_g * kv, g.batch * op);
    let mut dx = vec![S::zero(); g.batch * g.cin * g.in_plane()];
    let mut dcols = vec![S::zero(); k * n];
    for grp in 0..g.groups() {
        let gy = gather_out(dy, g, grp);
        let a = &w[grp * g.cout_g * k..][..g.cout_g * k];
        S::gemm(k, g.cout_g, n, a, [1, k], &gy, [n, 1], S::zero(), &mut dcols, [n, 1]);
        col2im(&dcols, g, grp, &mut dx);
    }
    dx
}

fn gemm_backward_kernel<S: Scalar>(dy: &[S], x: &[S], g: &Geometry) -> Vec<S> {
    let (op, kv) = (g.out_plane(), g.kvol());
    let (k, n) = (g.cin_g * kv, g.batch * op);
    let mut dw = vec![S::zero(); g.cout * k];
    for grp in 0..g.groups() {
        let gy = gather_out(dy, g, grp);
        let cols = im2col(x, g, grp);
        let c = &mut dw[grp * g.cout_g * k..][..g.cout_g * k];
        S::gemm(g.cout_g, n, k, &gy, [n, 1], &cols, [1, n], S::zero(), c, [k, 1]);
    }
    dw
}

pub(crate) fn forward<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, g: &Geometry) -> Vec<S> {
    if use_gemm(g) {
        gemm_forward(x, w, bias, g)
    } else {
        direct_forward(x, w, bias, g)
    }
}

pub(crate) fn backward_input<S: Scalar>(dy: &[S], w: &[S], g: &Geometry) -> Vec<S> {
    if use_gemm(g) {
        gemm_backward_input(dy, w, g)
    } else {
        direct_backward_input(dy, w, g)
    }
}

pub(crate) fn backward_kernel<S: Scalar>(dy: &[S], x: &[S], g: &Geometry) -> Vec<S> {
    if use_gemm(g) {
        gemm_backward_kernel(dy, x, g)
    } else {
        direct_backward_kernel(dy, x, g)
    }
}

/// Non-differentiable convolution on plain tensors.
pub fn convolve<S: Scalar>(x: &Tensor<S>, kernel: &Tensor<S>, bias: Option<&Tensor<S>>, spec: &ConvSpec) -> Result<Tensor<S>> {
    let g = Geometry::new(x.shape(), kernel.shape(), spec)?;
    if let Some(b) = bias {
        if b.len() != g.cout {
            return Err(shape_err!("bias has {} entries for {} output channels", b.len(), g.cout));
        }
    }
    let out = forward(x.data(), kernel.data(), bias.map(|b| b.data()), &g);
    Tensor::new(&g.out_shape(spec.rank), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_dimensional_edge_filter() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 3], &[1., 2., 3.]).unwrap();
        let k = Tensor::<f64>::from_f64(&[1, 1, 3], &[1., 0., -1.]).unwrap();
        let y = convolve(&x, &k, None, &ConvSpec::same(1, 1)).unwrap();
        assert_eq!(y.data(), &[-2., -2., 2.]);
    }

    #[test]
    fn identity_and_zero_kernels() {
        let x = Tensor::<f64>::from_fn(&[2, 1, 4, 5], |i| (i[0] * 100 + i[2] * 10 + i[3]) as f64);
        let k = Tensor::<f64>::ones(&[1, 1, 1, 1]);
        let b = Tensor::<f64>::zeros(&[1]);
        let y = convolve(&x, &k, Some(&b), &ConvSpec::same(2, 0)).unwrap();
        assert_eq!(y, x);

        let v = Tensor::<f64>::ones(&[1, 1, 3, 4, 4]);
        let z = Tensor::<f64>::zeros(&[1, 1, 3, 3, 3]);
        let y = convolve(&v, &z, Some(&Tensor::zeros(&[1])), &ConvSpec::same(3, 1)).unwrap();
        assert_eq!(y.shape(), v.shape());
        assert!(y.data().iter().all(|&e| e == 0.0));
    }

    #[test]
    fn stride_and_extent_rule() {
        let x = Tensor::<f64>::zeros(&[1, 1, 7, 7]);
        let k = Tensor::<f64>::zeros(&[2, 1, 3, 3]);
        let spec = ConvSpec::new(2, &[2, 2], &[1, 1], 1).unwrap();
        let y = convolve(&x, &k, None, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 2, 4, 4]);
    }

    #[test]
    fn matrix_path_matches_direct_loops() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let cases: [(&[usize], &[usize], ConvSpec); 5] = [
            (&[2, 3, 7], &[4, 3, 3], ConvSpec::same(1, 1)),
            (&[2, 4, 6, 5], &[6, 2, 3, 3], ConvSpec::new(2, &[2, 1], &[1, 0], 2).unwrap()),
            (&[1, 2, 4, 5, 5], &[3, 2, 3, 3, 3], ConvSpec::same(3, 1)),
            (&[3, 5, 4, 4], &[2, 5, 1, 1], ConvSpec::same(2, 0)),
            (&[1, 3, 9, 9], &[4, 3, 3, 3], ConvSpec::same(2, 1).with_stride(2)),
        ];
        for (xs, ws, spec) in cases {
            let x = Tensor::<f64>::randn(xs, 1.0, &mut rng);
            let w = Tensor::<f64>::randn(ws, 1.0, &mut rng);
            let b = Tensor::<f64>::randn(&[ws[0]], 1.0, &mut rng);
            let g = Geometry::new(xs, ws, &spec).unwrap();
            assert!(use_gemm(&g));
            let close = |a: &[f64], b: &[f64]| a.iter().zip(b).all(|(p, q)| (p - q).abs() < 1e-12);
            let y = gemm_forward(x.data(), w.data(), Some(b.data()), &g);
            assert!(close(&y, &direct_forward(x.data(), w.data(), Some(b.data()), &g)));
            let dy = Tensor::<f64>::randn(&g.out_shape(spec.rank), 1.0, &mut rng);
            assert!(close(&gemm_backward_input(dy.data(), w.data(), &g), &direct_backward_input(dy.data(), w.data(), &g)));
            assert!(close(&gemm_backward_kernel(dy.data(), x.data(), &g), &direct_backward_kernel(dy.data(), x.data(), &g)));
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let k = Tensor::<f64>::zeros(&[2, 3, 3, 3]);
        assert!(convolve(&x, &k, None, &ConvSpec::same(2, 1).with_groups(2)).is_err());
        let big = Tensor::<f64>::zeros(&[1, 3, 7, 7]);
        assert!(convolve(&x, &big, None, &ConvSpec::same(2, 1)).is_err());
        let wrong_cin = Tensor::<f64>::zeros(&[1, 2, 3, 3]);
        assert!(convolve(&x, &wrong_cin, None, &ConvSpec::same(2, 1)).is_err());
    }
}
