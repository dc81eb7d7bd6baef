//! Dense row-major tensors.
//!
//! A [`Tensor`] owns a flat buffer plus its extents. Shapes may be empty
//! (a scalar); every listed extent must be at least one.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Element type of a tensor: `f32` for training, `f64` for verification.
pub trait Scalar: Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + DivAssign + 'static {
    const PRECISION: Precision;

    fn of(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `C = A B + beta C` for row/column-strided `m x k` and `k x n` views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: [usize; 2],
        b: &[Self],
        sb: [usize; 2],
        beta: Self,
        c: &mut [Self],
        sc: [usize; 2],
    );
}

fn check_view(len: usize, rows: usize, cols: usize, s: [usize; 2]) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * s[0] + (cols - 1) * s[1] < len, "strided view exceeds buffer");
    }
}

impl Scalar for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: [usize; 2],
        b: &[Self],
        sb: [usize; 2],
        beta: Self,
        c: &mut [Self],
        sc: [usize; 2],
    ) {
        check_view(a.len(), m, k, sa);
        check_view(b.len(), k, n, sb);
        check_view(c.len(), m, n, sc);
        // SAFETY: every view was checked to lie inside its slice.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa[0] as isize,
                sa[1] as isize,
                b.as_ptr(),
                sb[0] as isize,
                sb[1] as isize,
                beta,
                c.as_mut_ptr(),
                sc[0] as isize,
                sc[1] as isize,
            );
        }
    }

    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: [usize; 2],
        b: &[Self],
        sb: [usize; 2],
        beta: Self,
        c: &mut [Self],
        sc: [usize; 2],
    ) {
        check_view(a.len(), m, k, sa);
        check_view(b.len(), k, n, sb);
        check_view(c.len(), m, n, sc);
        // SAFETY: every view was checked to lie inside its slice.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa[0] as isize,
                sa[1] as isize,
                b.as_ptr(),
                sb[0] as isize,
                sb[1] as isize,
                beta,
                c.as_mut_ptr(),
                sc[0] as isize,
                sc[1] as isize,
            );
        }
    }

    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(shape_err!("zero extent in shape {:?}", shape));
    }
    Ok(())
}

#[derive(Clone, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Debug> Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} elements]", self.shape, self.data.len())
        }
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: &[usize], data: Vec<S>) -> Result<Self> {
        check_extents(shape)?;
        if numel(shape) != data.len() {
            return Err(shape_err!("shape {:?} needs {} elements, got {}", shape, numel(shape), data.len()));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    /// Builds from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::of(v)).collect())
    }

    pub fn scalar(v: S) -> Self {
        Self { shape: Vec::new(), data: vec![v] }
    }

    pub fn full(shape: &[usize], v: S) -> Self {
        assert!(shape.iter().all(|&e| e > 0), "zero extent in {shape:?}");
        Self { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, S::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, S::one())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> S) -> Self {
        let mut t = Self::zeros(shape);
        let mut idx = vec![0; shape.len()];
        for v in t.data.iter_mut() {
            *v = f(&idx);
            for ax in (0..shape.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < shape[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        t
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            *v = S::of(rng.random_range(lo..hi));
        }
        t
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in t.data.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v = S::of(z * std);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn offset(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.rank() {
            return Err(shape_err!("index rank {} for tensor rank {}", idx.len(), self.rank()));
        }
        let mut off = 0;
        for (ax, (&i, &e)) in idx.iter().zip(&self.shape).enumerate() {
            if i >= e {
                return Err(shape_err!("index {} out of range on axis {} (extent {})", i, ax, e));
            }
            off = off * e + i;
        }
        Ok(off)
    }

    pub fn get(&self, idx: &[usize]) -> Result<S> {
        Ok(self.data[self.offset(idx)?])
    }

    pub fn set(&mut self, idx: &[usize], v: S) -> Result<()> {
        let off = self.offset(idx)?;
        self.data[off] = v;
        Ok(())
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Self> {
        check_extents(new_shape)?;
        if numel(new_shape) != self.len() {
            return Err(shape_err!("cannot reshape {:?} into {:?}", self.shape, new_shape));
        }
        Ok(Self { shape: new_shape.to_vec(), data: self.data.clone() })
    }

    pub(crate) fn into_reshaped(mut self, new_shape: &[usize]) -> Self {
        debug_assert_eq!(numel(new_shape), self.len());
        self.shape = new_shape.to_vec();
        self
    }

    /// Reorders axes; output axis `i` is input axis `order[i]`.
    pub fn permute(&self, order: &[usize]) -> Result<Self> {
        check_permutation(order, self.rank())?;
        let out_shape: Vec<usize> = order.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides_of(&self.shape);
        let src_strides: Vec<usize> = order.iter().map(|&a| in_strides[a]).collect();
        let mut data = Vec::with_capacity(self.len());
        let mut idx = vec![0usize; out_shape.len()];
        let mut src = 0usize;
        for _ in 0..self.len() {
            data.push(self.data[src]);
            for ax in (0..out_shape.len()).rev() {
                idx[ax] += 1;
                src += src_strides[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                src -= src_strides[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self { shape: out_shape, data })
    }

    /// Arithmetic mean along `axis`; the axis is kept with extent 1 when `keep`.
    pub fn mean_axis(&self, axis: usize, keep: bool) -> Result<Self> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {} out of range for rank {}", axis, self.rank()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for k in 0..n {
                let base = (o * n + k) * inner;
                for (d, &s) in dst.iter_mut().zip(&self.data[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let scale = S::one() / S::of(n as f64);
        out.iter_mut().for_each(|v| *v *= scale);
        let mut shape = self.shape.clone();
        if keep {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Self { shape, data: out })
    }

    /// Mean along `axis` (removed) that sums each lane in ascending order, so
    /// the result is bitwise invariant to any permutation along the axis.
    pub fn mean_axis_sorted(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {} out of range for rank {}", axis, self.rank()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let scale = S::one() / S::of(n as f64);
        let mut out = Vec::with_capacity(outer * inner);
        let mut lane = Vec::with_capacity(n);
        for o in 0..outer {
            for i in 0..inner {
                lane.clear();
                lane.extend((0..n).map(|k| self.data[(o * n + k) * inner + i]));
                lane.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
                out.push(lane.iter().fold(S::zero(), |acc, &v| acc + v) * scale);
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data: out })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("shape mismatch {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self { shape: self.shape.clone(), data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect() })
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, k: S) -> Self {
        self.map(|v| v * k)
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn norm_l2(&self) -> S {
        self.data.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> S {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(&a, &b)| (a - b).abs()).fold(S::zero(), S::max)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| T::of(v.as_f64())).collect() }
    }

    /// Reverses the order of slices along `axis`.
    pub fn flip_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {} out of range for rank {}", axis, self.rank()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(self.len());
        for o in 0..outer {
            for k in (0..n).rev() {
                let base = (o * n + k) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        Ok(Self { shape: self.shape.clone(), data })
    }

    /// Picks slices `indices` along `axis` in the given order.
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return Err(shape_err!("axis {} out of range for rank {}", axis, self.rank()));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let n = self.shape[axis];
        let inner: usize = self.shape[axis + 1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(shape_err!("index {} out of range on axis {} (extent {})", bad, axis, n));
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        check_extents(&shape)?;
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &k in indices {
                let base = (o * n + k) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        Ok(Self { shape, data })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err!("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(shape_err!("stack shape mismatch {:?} vs {:?}", p.shape, first.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }
}

pub fn check_permutation(order: &[usize], rank: usize) -> Result<()> {
    if order.len() != rank {
        return Err(shape_err!("permutation {:?} has wrong length for rank {}", order, rank));
    }
    let mut seen = vec![false; rank];
    for &a in order {
        if a >= rank || seen[a] {
            return Err(shape_err!("{:?} is not a permutation of 0..{}", order, rank));
        }
        seen[a] = true;
    }
    Ok(())
}

pub fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &a) in order.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reshape_keeps_row_major_order() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let r = t.reshape(&[3, 2]).unwrap();
        assert_eq!(r.get(&[0, 1]).unwrap(), 2.0);
        assert_eq!(r.get(&[2, 0]).unwrap(), 5.0);
        assert!(t.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn permute_021_matches_index_loop() {
        let t = Tensor::<f64>::from_fn(&[1, 2, 3], |i| (i[1] * 3 + i[2]) as f64);
        let p = t.permute(&[0, 2, 1]).unwrap();
        assert_eq!(p.shape(), &[1, 3, 2]);
        for i in 0..2 {
            for j in 0..3 {
                assert_eq!(p.get(&[0, j, i]).unwrap(), t.get(&[0, i, j]).unwrap());
            }
        }
    }

    #[test]
    fn bad_permutations_rejected() {
        let t = Tensor::<f64>::zeros(&[2, 2, 2]);
        assert!(t.permute(&[0, 0, 1]).is_err());
        assert!(t.permute(&[0, 1]).is_err());
        assert!(t.permute(&[0, 1, 3]).is_err());
    }

    #[test]
    fn mean_axis_cases() {
        let t = Tensor::<f64>::from_f64(&[2], &[1., 3.]).unwrap();
        assert_eq!(t.mean_axis(0, false).unwrap().item(), 2.0);
        let ones = Tensor::<f64>::ones(&[2, 3, 4]);
        let m = ones.mean_axis(1, true).unwrap();
        assert_eq!(m.shape(), &[2, 1, 4]);
        assert!(m.data().iter().all(|&v| v == 1.0));
        assert!(ones.mean_axis(3, false).is_err());
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(Tensor::<f32>::new(&[2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn flip_and_select() {
        let t = Tensor::<f64>::from_fn(&[2, 3], |i| (i[0] * 10 + i[1]) as f64);
        let f = t.flip_axis(1).unwrap();
        assert_eq!(f.data(), &[2., 1., 0., 12., 11., 10.]);
        let s = t.select(1, &[2, 0]).unwrap();
        assert_eq!(s.data(), &[2., 0., 12., 10.]);
    }
}
