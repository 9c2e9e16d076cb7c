//! Split-plane complex N-D tensors.
//!
//! A [`CTensor`] holds `z = x + jy` as two contiguous row-major planes, one
//! for the real parts and one for the imaginary parts. Keeping the planes
//! apart lets the kernels in [`crate::cvops`] run real operators over whole
//! planes. Both planes are reference counted, so clones are cheap and a
//! tensor can be shared read-only across threads.
//!
//! Values are stored as `f64`. A tensor tagged [`DType::F32`] has every
//! element rounded to the nearest `f32` whenever it is produced, so kernels
//! accumulate in `f64` and round once on output.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CVT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    #[default]
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            DType::F32 => v as f32 as f64,
            DType::F64 => v,
        }
    }

    /// Result dtype of combining two tensors: f32 wins so that mixed
    /// arithmetic never silently claims more precision than it has.
    pub fn promote(self, other: DType) -> DType {
        if self == DType::F32 || other == DType::F32 {
            DType::F32
        } else {
            DType::F64
        }
    }
}

/// Row-major strides for `shape`.
pub fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for (s, &d) in strides.iter_mut().zip(shape).rev() {
        *s = acc;
        acc *= d;
    }
    strides
}

pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Flat offsets into a tensor of shape `src` for every position of the
/// broadcast shape `dst`, in row-major order of `dst`.
pub(crate) fn broadcast_offsets(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let rank = dst.len();
    let src_strides = contiguous_strides(src);
    let mut strides = vec![0usize; rank];
    for i in 0..src.len() {
        let j = rank - src.len() + i;
        if src[i] != 1 {
            strides[j] = src_strides[i];
        }
    }
    let n: usize = dst.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += strides[ax];
            if idx[ax] < dst[ax] {
                break;
            }
            off -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Conj,
    Abs,
    Angle,
    Exp,
    ScaleByReal,
}

/// Second operand of [`CTensor::elementwise`].
#[derive(Clone, Debug)]
pub enum Operand<'a> {
    Tensor(&'a CTensor),
    Scalar(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    MaxMagnitude,
    MinMagnitude,
}

#[derive(Clone, Debug)]
pub struct CTensor {
    shape: Vec<usize>,
    strides: Vec<usize>,
    re: Arc<Vec<f64>>,
    im: Arc<Vec<f64>>,
    dtype: DType,
}

impl PartialEq for CTensor {
    /// Bitwise equality of shape, dtype and both planes.
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.dtype == other.dtype
            && self.re.iter().zip(other.re.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.im.iter().zip(other.im.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl CTensor {
    pub fn new(shape: &[usize], re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        Self::with_dtype(shape, re, im, DType::F64)
    }

    pub fn with_dtype(shape: &[usize], re: Vec<f64>, im: Vec<f64>, dtype: DType) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} elements, got re {} / im {}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self::from_planes(shape.to_vec(), re, im, dtype))
    }

    /// Builds a tensor from planes already known to match `shape`.
    pub(crate) fn from_planes(shape: Vec<usize>, mut re: Vec<f64>, mut im: Vec<f64>, dtype: DType) -> Self {
        debug_assert_eq!(re.len(), shape.iter().product::<usize>());
        debug_assert_eq!(im.len(), re.len());
        if dtype == DType::F32 {
            re.iter_mut().for_each(|v| *v = dtype.round(*v));
            im.iter_mut().for_each(|v| *v = dtype.round(*v));
        }
        let strides = contiguous_strides(&shape);
        CTensor { shape, strides, re: Arc::new(re), im: Arc::new(im), dtype }
    }

    pub fn from_real(shape: &[usize], re: Vec<f64>) -> Result<Self> {
        let im = vec![0.0; re.len()];
        Self::new(shape, re, im)
    }

    pub fn from_pairs(shape: &[usize], values: &[(f64, f64)]) -> Result<Self> {
        let (re, im) = values.iter().copied().unzip();
        Self::new(shape, re, im)
    }

    pub fn scalar(re: f64, im: f64) -> Self {
        Self::from_planes(vec![], vec![re], vec![im], DType::F64)
    }

    pub fn full(shape: &[usize], re: f64, im: f64) -> Self {
        let n = shape.iter().product();
        Self::from_planes(shape.to_vec(), vec![re; n], vec![im; n], DType::F64)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0, 0.0)
    }

    /// Independent real and imaginary parts, each drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = rng.sample(StandardNormal);
            let b: f64 = rng.sample(StandardNormal);
            re.push(std * a);
            im.push(std * b);
        }
        Self::from_planes(shape.to_vec(), re, im, DType::F64)
    }

    /// Real tensor (zero imaginary plane) with entries uniform in `[lo, hi)`.
    pub fn rand_uniform_real<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let re = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Self::from_planes(shape.to_vec(), re, vec![0.0; n], DType::F64)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.re.len()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn re(&self) -> &[f64] {
        &self.re
    }

    pub fn im(&self) -> &[f64] {
        &self.im
    }

    pub fn into_planes(self) -> (Vec<f64>, Vec<f64>) {
        let re = Arc::try_unwrap(self.re).unwrap_or_else(|a| (*a).clone());
        let im = Arc::try_unwrap(self.im).unwrap_or_else(|a| (*a).clone());
        (re, im)
    }

    pub fn to_dtype(&self, dtype: DType) -> CTensor {
        if dtype == self.dtype {
            return self.clone();
        }
        Self::from_planes(self.shape.clone(), self.re.to_vec(), self.im.to_vec(), dtype)
    }

    /// Element at a multi-index.
    pub fn get(&self, index: &[usize]) -> Result<(f64, f64)> {
        if index.len() != self.rank() || index.iter().zip(&self.shape).any(|(i, d)| i >= d) {
            return Err(Error::shape(format!("index {index:?} out of bounds for {:?}", self.shape)));
        }
        let off: usize = index.iter().zip(&self.strides).map(|(i, s)| i * s).sum();
        Ok((self.re[off], self.im[off]))
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<(f64, f64)> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok((self.re[0], self.im[0]))
    }

    pub fn is_real(&self) -> bool {
        self.im.iter().all(|&v| v == 0.0)
    }

    pub(crate) fn check_dtype(&self, other: &CTensor) -> Result<()> {
        if self.dtype != other.dtype {
            return Err(Error::DType(self.dtype, other.dtype));
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn map(&self, f: impl Fn(f64, f64) -> (f64, f64)) -> CTensor {
        let (re, im) = self.re.iter().zip(self.im.iter()).map(|(&x, &y)| f(x, y)).unzip();
        Self::from_planes(self.shape.clone(), re, im, self.dtype)
    }

    pub fn zip_with(&self, other: &CTensor, f: impl Fn((f64, f64), (f64, f64)) -> (f64, f64)) -> Result<CTensor> {
        self.check_dtype(other)?;
        let n = self.numel();
        if self.shape == other.shape {
            let mut re = Vec::with_capacity(n);
            let mut im = Vec::with_capacity(n);
            for i in 0..n {
                let (u, v) = f((self.re[i], self.im[i]), (other.re[i], other.im[i]));
                re.push(u);
                im.push(v);
            }
            return Ok(Self::from_planes(self.shape.clone(), re, im, self.dtype));
        }
        let shape = broadcast_shapes(&self.shape, &other.shape)?;
        let oa = broadcast_offsets(&self.shape, &shape);
        let ob = broadcast_offsets(&other.shape, &shape);
        let (re, im) = oa
            .iter()
            .zip(&ob)
            .map(|(&i, &j)| f((self.re[i], self.im[i]), (other.re[j], other.im[j])))
            .unzip();
        Ok(Self::from_planes(shape, re, im, self.dtype))
    }

    /// Single entry point over the primitive algebra of `z = x + jy`.
    pub fn elementwise(&self, op: ElementwiseOp, other: Option<Operand<'_>>) -> Result<CTensor> {
        use ElementwiseOp::*;
        let need_other = matches!(op, Add | Sub | Mul | ScaleByReal);
        let rhs = match (need_other, other) {
            (true, Some(Operand::Tensor(t))) => Some(t.clone()),
            (true, Some(Operand::Scalar(r, i))) => {
                Some(CTensor::from_planes(vec![], vec![r], vec![i], self.dtype))
            }
            (true, None) => return Err(Error::invalid(format!("{op:?} needs a second operand"))),
            (false, Some(_)) => return Err(Error::invalid(format!("{op:?} is unary"))),
            (false, None) => None,
        };
        Ok(match op {
            Add => self.add(rhs.as_ref().unwrap())?,
            Sub => self.sub(rhs.as_ref().unwrap())?,
            Mul => self.mul(rhs.as_ref().unwrap())?,
            ScaleByReal => {
                let r = rhs.unwrap();
                if !r.is_real() {
                    return Err(Error::invalid("scale_by_real needs a real operand"));
                }
                self.zip_with(&r, |(x, y), (k, _)| (x * k, y * k))?
            }
            Conj => self.conj(),
            Abs => self.abs(),
            Angle => self.angle(),
            Exp => self.exp(),
        })
    }

    pub fn add(&self, other: &CTensor) -> Result<CTensor> {
        self.zip_with(other, |(a, b), (c, d)| (a + c, b + d))
    }

    pub fn sub(&self, other: &CTensor) -> Result<CTensor> {
        self.zip_with(other, |(a, b), (c, d)| (a - c, b - d))
    }

    pub fn mul(&self, other: &CTensor) -> Result<CTensor> {
        self.zip_with(other, |(a, b), (c, d)| (a * c - b * d, a * d + b * c))
    }

    pub fn div(&self, other: &CTensor) -> Result<CTensor> {
        self.zip_with(other, |(a, b), (c, d)| {
            let den = c * c + d * d;
            ((a * c + b * d) / den, (b * c - a * d) / den)
        })
    }

    pub fn conj(&self) -> CTensor {
        self.map(|x, y| (x, -y))
    }

    pub fn neg(&self) -> CTensor {
        self.map(|x, y| (-x, -y))
    }

    pub fn abs(&self) -> CTensor {
        self.map(|x, y| (x.hypot(y), 0.0))
    }

    pub fn angle(&self) -> CTensor {
        self.map(|x, y| (angle(x, y), 0.0))
    }

    pub fn exp(&self) -> CTensor {
        self.map(|x, y| {
            let e = x.exp();
            (e * y.cos(), e * y.sin())
        })
    }

    pub fn scale(&self, k: f64) -> CTensor {
        self.map(|x, y| (k * x, k * y))
    }

    /// Real part as a real tensor.
    pub fn real_part(&self) -> CTensor {
        Self::from_planes(self.shape.clone(), self.re.to_vec(), vec![0.0; self.numel()], self.dtype)
    }

    /// Imaginary part as a real tensor.
    pub fn imag_part(&self) -> CTensor {
        Self::from_planes(self.shape.clone(), self.im.to_vec(), vec![0.0; self.numel()], self.dtype)
    }

    // ---- reductions ----

    pub(crate) fn check_axes(&self, axes: &[usize]) -> Result<()> {
        for (i, &a) in axes.iter().enumerate() {
            if a >= self.rank() {
                return Err(Error::Axis { axis: a, rank: self.rank() });
            }
            if axes[..i].contains(&a) {
                return Err(Error::invalid(format!("duplicate axis {a}")));
            }
        }
        Ok(())
    }

    /// Output index of every input element when `axes` are collapsed.
    pub(crate) fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let kept: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
            .collect();
        let offsets = broadcast_offsets(&kept, shape);
        (kept, offsets)
    }

    /// Reduces over `axes`. With `keepdim` the reduced axes stay as extent 1.
    pub fn reduce(&self, op: ReduceOp, axes: &[usize], keepdim: bool) -> Result<CTensor> {
        self.check_axes(axes)?;
        let count: usize = axes.iter().map(|&a| self.shape[a]).product();
        if count == 0 {
            return Err(Error::EmptyReduction);
        }
        let (kept, map) = Self::reduction_map(&self.shape, axes);
        let m: usize = kept.iter().product();
        let (mut re, mut im) = (vec![0.0; m], vec![0.0; m]);
        match op {
            ReduceOp::Sum | ReduceOp::Mean => {
                for (i, &o) in map.iter().enumerate() {
                    re[o] += self.re[i];
                    im[o] += self.im[i];
                }
                if op == ReduceOp::Mean {
                    let inv = 1.0 / count as f64;
                    re.iter_mut().for_each(|v| *v *= inv);
                    im.iter_mut().for_each(|v| *v *= inv);
                }
            }
            ReduceOp::MaxMagnitude | ReduceOp::MinMagnitude => {
                let init = if op == ReduceOp::MaxMagnitude { f64::NEG_INFINITY } else { f64::INFINITY };
                re.iter_mut().for_each(|v| *v = init);
                for (i, &o) in map.iter().enumerate() {
                    let mag = self.re[i].hypot(self.im[i]);
                    let better = if op == ReduceOp::MaxMagnitude { mag > re[o] } else { mag < re[o] };
                    if better {
                        re[o] = mag;
                    }
                }
            }
        }
        let shape = if keepdim {
            kept
        } else {
            self.shape.iter().enumerate().filter(|(i, _)| !axes.contains(i)).map(|(_, &d)| d).collect()
        };
        Ok(Self::from_planes(shape, re, im, self.dtype))
    }

    pub fn sum(&self, axes: &[usize]) -> Result<CTensor> {
        self.reduce(ReduceOp::Sum, axes, false)
    }

    pub fn mean(&self, axes: &[usize]) -> Result<CTensor> {
        self.reduce(ReduceOp::Mean, axes, false)
    }

    pub fn sum_all(&self) -> (f64, f64) {
        (self.re.iter().sum(), self.im.iter().sum())
    }

    /// Sums a broadcast result back down to `shape`.
    pub(crate) fn sum_to_shape(&self, shape: &[usize]) -> Result<CTensor> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let lead = self.rank() - shape.len();
        let mut axes: Vec<usize> = (0..lead).collect();
        for (i, &d) in shape.iter().enumerate() {
            if d == 1 && self.shape[lead + i] != 1 {
                axes.push(lead + i);
            }
        }
        let r = self.reduce(ReduceOp::Sum, &axes, true)?;
        r.reshape(shape)
    }

    // ---- shape manipulation ----

    pub fn reshape(&self, shape: &[usize]) -> Result<CTensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        Ok(CTensor {
            shape: shape.to_vec(),
            strides: contiguous_strides(shape),
            re: self.re.clone(),
            im: self.im.clone(),
            dtype: self.dtype,
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<CTensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!("bad permutation {perm:?} for rank {rank}")));
        }
        let shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        // source strides reordered to the destination axis order
        let strides: Vec<usize> = perm.iter().map(|&p| self.strides[p]).collect();
        let n = self.numel();
        let (mut re, mut im) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut idx = vec![0usize; rank];
        let mut off = 0usize;
        for _ in 0..n {
            re.push(self.re[off]);
            im.push(self.im[off]);
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < shape[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self::from_planes(shape, re, im, self.dtype))
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<CTensor> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<CTensor> {
        let target = broadcast_shapes(&self.shape, shape)?;
        if target != shape {
            return Err(Error::shape(format!("cannot broadcast {:?} to {shape:?}", self.shape)));
        }
        let offs = broadcast_offsets(&self.shape, shape);
        let re = offs.iter().map(|&o| self.re[o]).collect();
        let im = offs.iter().map(|&o| self.im[o]).collect();
        Ok(Self::from_planes(shape.to_vec(), re, im, self.dtype))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<CTensor> {
        if axis >= self.rank() {
            return Err(Error::Axis { axis, rank: self.rank() });
        }
        if start + len > self.shape[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) exceeds extent {}",
                start + len,
                self.shape[axis]
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        let mut re = Vec::with_capacity(outer * len * inner);
        let mut im = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * d + start) * inner;
            re.extend_from_slice(&self.re[base..base + len * inner]);
            im.extend_from_slice(&self.im[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self::from_planes(shape, re, im, self.dtype))
    }

    pub fn concat(parts: &[&CTensor], axis: usize) -> Result<CTensor> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        if axis >= first.rank() {
            return Err(Error::Axis { axis, rank: first.rank() });
        }
        for p in parts {
            first.check_dtype(p)?;
            let ok = p.rank() == first.rank()
                && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(format!("concat {:?} with {:?}", first.shape, p.shape)));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut re = Vec::with_capacity(outer * total * inner);
        let mut im = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                re.extend_from_slice(&p.re[o * chunk..(o + 1) * chunk]);
                im.extend_from_slice(&p.im[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self::from_planes(shape, re, im, first.dtype))
    }

    /// Gathers rows along axis 0.
    pub fn index_select(&self, indices: &[usize]) -> Result<CTensor> {
        if self.rank() == 0 {
            return Err(Error::shape("index_select on a scalar"));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut re = Vec::with_capacity(indices.len() * inner);
        let mut im = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            if i >= self.shape[0] {
                return Err(Error::shape(format!("row {i} out of {}", self.shape[0])));
            }
            re.extend_from_slice(&self.re[i * inner..(i + 1) * inner]);
            im.extend_from_slice(&self.im[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Self::from_planes(shape, re, im, self.dtype))
    }

    // ---- comparison helpers ----

    /// Largest `|a - b|` over elements, using the complex modulus.
    pub fn max_abs_diff(&self, other: &CTensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(self
            .re
            .iter()
            .zip(self.im.iter())
            .zip(other.re.iter().zip(other.im.iter()))
            .map(|((a, b), (c, d))| (a - c).hypot(b - d))
            .fold(0.0, f64::max))
    }

    /// `max|a - b| / max(1e-300, max|b|)`.
    pub fn max_rel_diff(&self, reference: &CTensor) -> Result<f64> {
        let scale = reference
            .re
            .iter()
            .zip(reference.im.iter())
            .map(|(x, y)| x.hypot(*y))
            .fold(0.0, f64::max)
            .max(1e-300);
        Ok(self.max_abs_diff(reference)? / scale)
    }

    // ---- serialization ----

    pub fn to_bytes(&self) -> Vec<u8> {
        let width = if self.dtype == DType::F32 { 4 } else { 8 };
        let mut out = Vec::with_capacity(6 + 8 * self.rank() + 2 * width * self.numel());
        out.extend_from_slice(MAGIC);
        out.push(self.dtype.code());
        out.push(self.rank() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for (x, y) in self.re.iter().zip(self.im.iter()) {
            match self.dtype {
                DType::F32 => {
                    out.extend_from_slice(&(*x as f32).to_le_bytes());
                    out.extend_from_slice(&(*y as f32).to_le_bytes());
                }
                DType::F64 => {
                    out.extend_from_slice(&x.to_le_bytes());
                    out.extend_from_slice(&y.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<CTensor> {
        let mut cur = bytes;
        let mut take = |n: usize| -> Result<&[u8]> {
            if cur.len() < n {
                return Err(Error::Format("truncated stream".into()));
            }
            let (head, tail) = cur.split_at(n);
            cur = tail;
            Ok(head)
        };
        if take(4)? != MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let dtype = DType::from_code(take(1)?[0])?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(take(8)?.try_into().unwrap());
            shape.push(usize::try_from(d).map_err(|_| Error::Format("extent overflow".into()))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("extent overflow".into()))?;
        let width = if dtype == DType::F32 { 4 } else { 8 };
        let payload = take(
            n.checked_mul(2 * width).ok_or_else(|| Error::Format("extent overflow".into()))?,
        )?;
        if !cur.is_empty() {
            return Err(Error::Format("trailing bytes".into()));
        }
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for pair in payload.chunks_exact(2 * width) {
            let (a, b) = pair.split_at(width);
            match dtype {
                DType::F32 => {
                    re.push(f32::from_le_bytes(a.try_into().unwrap()) as f64);
                    im.push(f32::from_le_bytes(b.try_into().unwrap()) as f64);
                }
                DType::F64 => {
                    re.push(f64::from_le_bytes(a.try_into().unwrap()));
                    im.push(f64::from_le_bytes(b.try_into().unwrap()));
                }
            }
        }
        Ok(Self::from_planes(shape, re, im, dtype))
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<CTensor> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CTensor> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Principal argument in `(-π, π]`, with `angle(0) = 0`.
#[inline]
pub fn angle(x: f64, y: f64) -> f64 {
    if x == 0.0 && y == 0.0 {
        return 0.0;
    }
    let a = y.atan2(x);
    if a <= -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        a
    }
}

/// `z / |z|`, with the zero element mapped to zero.
#[inline]
pub fn unit_phase(x: f64, y: f64) -> (f64, f64) {
    let r = x.hypot(y);
    if r == 0.0 {
        (0.0, 0.0)
    } else {
        (x / r, y / r)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    #[test]
    fn complex_product() {
        let a = CTensor::scalar(1.0, 2.0);
        let b = CTensor::scalar(3.0, 4.0);
        assert_eq!(a.mul(&b).unwrap().item().unwrap(), (-5.0, 10.0));
        let via_entry = a.elementwise(ElementwiseOp::Mul, Some(Operand::Tensor(&b))).unwrap();
        assert_eq!(via_entry.item().unwrap(), (-5.0, 10.0));
    }

    #[test]
    fn conj_abs_angle() {
        let z = CTensor::scalar(3.0, 4.0);
        assert_eq!(z.conj().item().unwrap(), (3.0, -4.0));
        assert_eq!(z.abs().item().unwrap(), (5.0, 0.0));
        assert_eq!(CTensor::scalar(0.0, 1.0).angle().item().unwrap(), (PI / 2.0, 0.0));
        assert_eq!(CTensor::scalar(0.0, 0.0).angle().item().unwrap(), (0.0, 0.0));
        assert_eq!(angle(-1.0, -0.0), PI);
        assert_eq!(angle(-0.0, 0.0), 0.0);
        assert_eq!(unit_phase(0.0, 0.0), (0.0, 0.0));
    }

    #[test]
    fn elementwise_rejects_missing_operand() {
        let z = CTensor::scalar(1.0, 0.0);
        assert!(z.elementwise(ElementwiseOp::Add, None).is_err());
        assert!(z.elementwise(ElementwiseOp::Conj, Some(Operand::Scalar(1.0, 0.0))).is_err());
        let s = z.elementwise(ElementwiseOp::ScaleByReal, Some(Operand::Scalar(2.0, 0.0))).unwrap();
        assert_eq!(s.item().unwrap(), (2.0, 0.0));
    }

    #[test]
    fn broadcast_shape_errors() {
        let a = CTensor::zeros(&[2, 3]);
        let b = CTensor::zeros(&[4]);
        assert!(matches!(a.add(&b), Err(Error::Shape(_))));
        let c = CTensor::zeros(&[3]).to_dtype(DType::F32);
        assert!(matches!(a.add(&c), Err(Error::DType(..))));
    }

    #[test]
    fn broadcast_mul_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = CTensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let b = CTensor::randn(&[3, 1], 1.0, &mut rng);
        let c = a.mul(&b).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    let (x, y) = a.get(&[i, j, k]).unwrap();
                    let (u, v) = b.get(&[j, 0]).unwrap();
                    let (p, q) = c.get(&[i, j, k]).unwrap();
                    let (ep, eq) = (x * u - y * v, x * v + y * u);
                    assert!((p - ep).abs() <= 1e-14 * ep.abs().max(1.0));
                    assert!((q - eq).abs() <= 1e-14 * eq.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn reductions() {
        let z = CTensor::from_pairs(&[2], &[(1.0, 1.0), (3.0, 3.0)]).unwrap();
        assert_eq!(z.mean(&[0]).unwrap().item().unwrap(), (2.0, 2.0));
        let w = CTensor::from_pairs(&[2], &[(3.0, 4.0), (1.0, 0.0)]).unwrap();
        assert_eq!(w.reduce(ReduceOp::MaxMagnitude, &[0], false).unwrap().item().unwrap(), (5.0, 0.0));
        assert_eq!(w.reduce(ReduceOp::MinMagnitude, &[0], false).unwrap().item().unwrap(), (1.0, 0.0));
        let empty = CTensor::zeros(&[2, 0]);
        assert!(matches!(empty.sum(&[1]), Err(Error::EmptyReduction)));
        assert!(matches!(z.sum(&[1]), Err(Error::Axis { .. })));
        assert!(z.sum(&[0, 0]).is_err());
    }

    #[test]
    fn reduce_keepdim_and_sum_to_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = CTensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let s = a.reduce(ReduceOp::Sum, &[0, 2], true).unwrap();
        assert_eq!(s.shape(), &[1, 3, 1]);
        let t = a.sum_to_shape(&[3, 1]).unwrap();
        assert!(t.reshape(&[1, 3, 1]).unwrap().max_abs_diff(&s).unwrap() < 1e-14);
    }

    #[test]
    fn permute_narrow_concat() {
        let z = CTensor::from_real(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        let t = z.permute(&[1, 0]).unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.re(), &[0., 3., 1., 4., 2., 5.]);
        let n = z.narrow(1, 1, 2).unwrap();
        assert_eq!(n.re(), &[1., 2., 4., 5.]);
        let head = z.narrow(1, 0, 1).unwrap();
        let back = CTensor::concat(&[&head, &n], 1).unwrap();
        assert_eq!(back, z);
        assert!(z.permute(&[0, 0]).is_err());
    }

    #[test]
    fn round_trip_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = CTensor::randn(&[3, 4], 1.0, &mut rng);
        let b = CTensor::from_bytes(&a.to_bytes()).unwrap();
        assert_eq!(a, b);
        let f = a.to_dtype(DType::F32);
        assert_eq!(CTensor::from_bytes(&f.to_bytes()).unwrap(), f);
    }

    #[test]
    fn scalar_round_trip() {
        let s = CTensor::scalar(1.5, -2.0);
        let bytes = s.to_bytes();
        assert_eq!(bytes.len(), 4 + 1 + 1 + 16);
        assert_eq!(CTensor::from_bytes(&bytes).unwrap(), s);
    }

    #[test]
    fn bad_streams() {
        let s = CTensor::scalar(1.0, 0.0);
        let mut bytes = s.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(CTensor::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("magic")));
        let mut bytes = s.to_bytes();
        bytes[4] = 7;
        assert!(matches!(CTensor::from_bytes(&bytes), Err(Error::Format(m)) if m.contains("dtype")));
        let bytes = s.to_bytes();
        assert!(matches!(CTensor::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(m)) if m.contains("truncated")));
    }

    #[test]
    fn f32_rounds_on_construction() {
        let t = CTensor::with_dtype(&[1], vec![0.1], vec![0.2], DType::F32).unwrap();
        assert_eq!(t.re()[0], 0.1f32 as f64);
        assert_eq!(t.add(&t).unwrap().dtype(), DType::F32);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn z_times_conj_is_squared_modulus(x in -1e3f64..1e3, y in -1e3f64..1e3) {
                let z = CTensor::scalar(x, y);
                let (re, im) = z.mul(&z.conj()).unwrap().item().unwrap();
                let m2 = x * x + y * y;
                prop_assert!(im.abs() <= 1e-12 * m2.max(1e-300));
                prop_assert!((re - m2).abs() <= 1e-12 * m2.max(1e-300));
            }

            #[test]
            fn angle_in_principal_range(x in -10f64..10.0, y in -10f64..10.0) {
                let a = angle(x, y);
                prop_assert!(a > -PI && a <= PI);
            }

            #[test]
            fn serialization_is_bit_exact(
                dims in proptest::collection::vec(0usize..4, 0..4),
                seed in any::<u64>(),
                f32_dtype in any::<bool>(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut t = CTensor::randn(&dims, 3.0, &mut rng);
                if f32_dtype {
                    t = t.to_dtype(DType::F32);
                }
                prop_assert_eq!(CTensor::from_bytes(&t.to_bytes()).unwrap(), t);
            }
        }
    }
}
