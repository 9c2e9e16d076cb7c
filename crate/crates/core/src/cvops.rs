//! Complex matmul and N-D convolution kernels.
//!
//! Every complex linear operator here is a pair of real operators
//! `L = L_R + j L_I` acting on `z = x + jy`. The kernels are written once as
//! real bilinear maps ([`RealBilinear`]) and composed into complex ones in
//! two ways:
//!
//! * [`naive_apply`]: `L_R(x) - L_I(y) + j (L_R(y) + L_I(x))`, four real
//!   operator applications.
//! * [`gauss_apply`]: `t1 = L_R(x)`, `t2 = L_I(y)`, `t3 = (L_R + L_I)(x + y)`,
//!   result `t1 - t2 + j (t3 - t2 - t1)`, three real operator applications.
//!
//! A [`MulCounter`] records both the operator applications and the real
//! scalar multiplications each path performs.

use serde::{Deserialize, Serialize};

use crate::ctensor::CTensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Path {
    #[default]
    Gauss,
    Naive,
}

/// Per-call multiplication bookkeeping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MulCounter {
    /// Real operator applications.
    pub applications: u64,
    /// Real scalar multiplications performed inside those applications.
    pub real_mults: u64,
}

impl MulCounter {
    fn record(&mut self, mults: u64) {
        self.applications += 1;
        self.real_mults += mults;
    }
}

/// A real bilinear map `out = f(op, input)`; `op` holds the operator weights.
pub trait RealBilinear {
    fn op_len(&self) -> usize;
    fn input_len(&self) -> usize;
    fn out_len(&self) -> usize;
    /// Writes `f(op, input)` into `out` (overwriting) and returns the number
    /// of real multiplications performed.
    fn apply(&self, op: &[f64], input: &[f64], out: &mut [f64]) -> u64;
}

/// Borrowed real/imaginary plane pair.
#[derive(Clone, Copy, Debug)]
pub struct Planes<'a> {
    pub re: &'a [f64],
    pub im: &'a [f64],
}

impl<'a> Planes<'a> {
    pub fn of(t: &'a CTensor) -> Self {
        Planes { re: t.re(), im: t.im() }
    }
}

fn check_lens<K: RealBilinear>(k: &K, op: Planes<'_>, z: Planes<'_>) -> Result<()> {
    if op.re.len() != k.op_len() || op.im.len() != k.op_len() {
        return Err(Error::shape(format!("operator has {} elements, kernel expects {}", op.re.len(), k.op_len())));
    }
    if z.re.len() != k.input_len() || z.im.len() != k.input_len() {
        return Err(Error::shape(format!("input has {} elements, kernel expects {}", z.re.len(), k.input_len())));
    }
    Ok(())
}

/// Four-application composition.
pub fn naive_apply<K: RealBilinear>(
    k: &K,
    op: Planes<'_>,
    z: Planes<'_>,
    counter: &mut MulCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lens(k, op, z)?;
    let n = k.out_len();
    let mut rr = vec![0.0; n];
    let mut ii = vec![0.0; n];
    let mut ri = vec![0.0; n];
    let mut ir = vec![0.0; n];
    counter.record(k.apply(op.re, z.re, &mut rr));
    counter.record(k.apply(op.im, z.im, &mut ii));
    counter.record(k.apply(op.re, z.im, &mut ri));
    counter.record(k.apply(op.im, z.re, &mut ir));
    for i in 0..n {
        rr[i] -= ii[i];
        ri[i] += ir[i];
    }
    Ok((rr, ri))
}

/// Three-application composition with summed operator weights.
pub fn gauss_apply<K: RealBilinear>(
    k: &K,
    op: Planes<'_>,
    z: Planes<'_>,
    counter: &mut MulCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_lens(k, op, z)?;
    let n = k.out_len();
    let op_sum: Vec<f64> = op.re.iter().zip(op.im).map(|(a, b)| a + b).collect();
    let z_sum: Vec<f64> = z.re.iter().zip(z.im).map(|(a, b)| a + b).collect();
    let mut t1 = vec![0.0; n];
    let mut t2 = vec![0.0; n];
    let mut t3 = vec![0.0; n];
    counter.record(k.apply(op.re, z.re, &mut t1));
    counter.record(k.apply(op.im, z.im, &mut t2));
    counter.record(k.apply(&op_sum, &z_sum, &mut t3));
    for i in 0..n {
        t3[i] -= t2[i] + t1[i];
        t1[i] -= t2[i];
    }
    Ok((t1, t3))
}

pub fn complex_apply<K: RealBilinear>(
    k: &K,
    op: Planes<'_>,
    z: Planes<'_>,
    path: Path,
    counter: &mut MulCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match path {
        Path::Naive => naive_apply(k, op, z, counter),
        Path::Gauss => gauss_apply(k, op, z, counter),
    }
}

/// Real operator applied to both planes of `z`: two applications.
pub fn real_operator_apply<K: RealBilinear>(
    k: &K,
    op: &[f64],
    z: Planes<'_>,
    counter: &mut MulCounter,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let zeros = vec![0.0; op.len()];
    check_lens(k, Planes { re: op, im: &zeros }, z)?;
    let mut re = vec![0.0; k.out_len()];
    let mut im = vec![0.0; k.out_len()];
    counter.record(k.apply(op, z.re, &mut re));
    counter.record(k.apply(op, z.im, &mut im));
    Ok((re, im))
}

// ---------------------------------------------------------------------------
// matmul

/// Batched `[batch, m, k] x [batch, k, n] -> [batch, m, n]`. A batch stride
/// of zero broadcasts that operand across the batch.
#[derive(Clone, Copy, Debug)]
pub struct MatMul {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub lhs_batched: bool,
    pub rhs_batched: bool,
}

impl MatMul {
    fn lhs_len(&self) -> usize {
        self.m * self.k * if self.lhs_batched { self.batch } else { 1 }
    }

    fn rhs_len(&self) -> usize {
        self.k * self.n * if self.rhs_batched { self.batch } else { 1 }
    }
}

/// The left factor plays the operator role.
impl RealBilinear for MatMul {
    fn op_len(&self) -> usize {
        self.lhs_len()
    }

    fn input_len(&self) -> usize {
        self.rhs_len()
    }

    fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    fn apply(&self, a: &[f64], b: &[f64], out: &mut [f64]) -> u64 {
        let (m, k, n) = (self.m, self.k, self.n);
        out.fill(0.0);
        for bt in 0..self.batch {
            let a = if self.lhs_batched { &a[bt * m * k..(bt + 1) * m * k] } else { &a[..m * k] };
            let b = if self.rhs_batched { &b[bt * k * n..(bt + 1) * k * n] } else { &b[..k * n] };
            let out = &mut out[bt * m * n..(bt + 1) * m * n];
            // four output rows share each streamed row of b
            let mut i = 0;
            while i + 4 <= m {
                let (r0, rest) = out[i * n..(i + 4) * n].split_at_mut(n);
                let (r1, rest) = rest.split_at_mut(n);
                let (r2, r3) = rest.split_at_mut(n);
                for p in 0..k {
                    let a0 = a[i * k + p];
                    let a1 = a[(i + 1) * k + p];
                    let a2 = a[(i + 2) * k + p];
                    let a3 = a[(i + 3) * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for j in 0..n {
                        let bv = brow[j];
                        r0[j] += a0 * bv;
                        r1[j] += a1 * bv;
                        r2[j] += a2 * bv;
                        r3[j] += a3 * bv;
                    }
                }
                i += 4;
            }
            for i in i..m {
                let row = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (self.batch * m * k * n) as u64
    }
}

/// Complex batched matmul over the last two axes.
///
/// Accepts `[.., m, k] x [.., k, n]` with equal leading axes, or either side
/// of rank 2 broadcast across the other's batch.
pub fn matmul(a: &CTensor, b: &CTensor, path: Path) -> Result<CTensor> {
    matmul_counted(a, b, path, &mut MulCounter::default())
}

pub fn matmul_counted(a: &CTensor, b: &CTensor, path: Path, counter: &mut MulCounter) -> Result<CTensor> {
    a.check_dtype(b)?;
    let (kernel, out_shape) = matmul_geometry(a.shape(), b.shape())?;
    let (re, im) = complex_apply(&kernel, Planes::of(a), Planes::of(b), path, counter)?;
    Ok(CTensor::from_planes(out_shape, re, im, a.dtype()))
}

pub(crate) fn matmul_geometry(a: &[usize], b: &[usize]) -> Result<(MatMul, Vec<usize>)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape(format!("matmul needs rank >= 2, got {a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::shape(format!("matmul inner dims {a:?} x {b:?}")));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let lead: Vec<usize> = if ba == bb || bb.is_empty() {
        ba.to_vec()
    } else if ba.is_empty() {
        bb.to_vec()
    } else {
        return Err(Error::shape(format!("matmul batch dims {a:?} x {b:?}")));
    };
    let batch = lead.iter().product();
    let kernel = MatMul { batch, m, k, n, lhs_batched: !ba.is_empty(), rhs_batched: !bb.is_empty() };
    let mut shape = lead;
    shape.extend([m, n]);
    Ok((kernel, shape))
}

// ---------------------------------------------------------------------------
// convolution

/// Convolution hyper-parameters, one entry per spatial axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub dilation: Vec<usize>,
    #[serde(default)]
    pub transposed: bool,
    #[serde(default)]
    pub output_padding: Vec<usize>,
}

impl ConvSpec {
    /// Same stride, padding and dilation on all `n` axes.
    pub fn uniform(n: usize, stride: usize, padding: usize, dilation: usize) -> Self {
        ConvSpec {
            stride: vec![stride; n],
            padding: vec![padding; n],
            dilation: vec![dilation; n],
            transposed: false,
            output_padding: vec![0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::uniform(n, 1, 0, 1)
    }

    pub fn transposed(mut self, output_padding: usize) -> Self {
        self.transposed = true;
        self.output_padding = vec![output_padding; self.stride.len()];
        self
    }

    pub fn rank(&self) -> usize {
        self.stride.len()
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let op_len = if self.output_padding.is_empty() { n } else { self.output_padding.len() };
        if self.stride.len() != n || self.padding.len() != n || self.dilation.len() != n || op_len != n {
            return Err(Error::invalid(format!("conv spec has wrong rank for {n}-d convolution")));
        }
        if self.stride.iter().chain(&self.dilation).any(|&v| v == 0) {
            return Err(Error::invalid("stride and dilation must be positive"));
        }
        if !self.transposed && self.output_padding.iter().any(|&v| v != 0) {
            return Err(Error::invalid("output_padding only applies to transposed convolution"));
        }
        for (i, &op) in self.output_padding.iter().enumerate() {
            if op >= self.stride[i].max(self.dilation[i]) {
                return Err(Error::invalid("output_padding must be smaller than stride or dilation"));
            }
        }
        Ok(())
    }

    fn output_padding(&self, axis: usize) -> usize {
        self.output_padding.get(axis).copied().unwrap_or(0)
    }

    /// Output extent along `axis` for input extent `input` and kernel `k`.
    pub fn output_extent(&self, axis: usize, input: usize, k: usize) -> Result<usize> {
        let (s, p, d) = (self.stride[axis], self.padding[axis], self.dilation[axis]);
        let span = d * (k - 1) + 1;
        if self.transposed {
            let full = (input - 1) * s + span + self.output_padding(axis);
            full.checked_sub(2 * p)
                .filter(|&v| v >= 1)
                .ok_or_else(|| Error::invalid("transposed convolution output would be empty"))
        } else {
            let padded = input + 2 * p;
            if padded < span {
                return Err(Error::invalid(format!(
                    "kernel span {span} exceeds padded input {padded} on axis {axis}"
                )));
            }
            Ok((padded - span) / s + 1)
        }
    }
}

/// Cross-correlation geometry with spatial axes padded out to three.
///
/// `src` is the operand of the forward correlation and `dst` its result;
/// the weight layout is `[dst_ch, src_ch, k..]`.
#[derive(Clone, Debug)]
pub struct ConvGeometry {
    pub batch: usize,
    pub src_ch: usize,
    pub dst_ch: usize,
    pub src: [usize; 3],
    pub dst: [usize; 3],
    pub k: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub dil: [usize; 3],
}

impl ConvGeometry {
    fn pad3(v: &[usize], fill: usize) -> [usize; 3] {
        let mut out = [fill; 3];
        out[3 - v.len()..].copy_from_slice(v);
        out
    }

    fn src_len(&self) -> usize {
        self.batch * self.src_ch * self.src.iter().product::<usize>()
    }

    fn dst_len(&self) -> usize {
        self.batch * self.dst_ch * self.dst.iter().product::<usize>()
    }

    fn weight_len(&self) -> usize {
        self.dst_ch * self.src_ch * self.k.iter().product::<usize>()
    }

    /// Valid destination index range along an axis for kernel tap `kk`.
    #[inline]
    fn range(&self, ax: usize, kk: usize) -> (usize, usize, isize) {
        let off = (kk * self.dil[ax]) as isize - self.pad[ax] as isize;
        let s = self.stride[ax] as isize;
        // smallest o with o*s + off >= 0
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        // largest o with o*s + off <= src - 1
        let last = self.src[ax] as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(self.dst[ax] as isize) };
        (lo as usize, hi.max(lo) as usize, off)
    }

    /// Visits every (weight tap, src offset, dst offset, run length) with a
    /// contiguous inner run along the last axis, weight index `w`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
        let [sd, sh, sw] = self.src;
        let [dd, dh, dw] = self.dst;
        let src_plane = sd * sh * sw;
        let dst_plane = dd * dh * dw;
        let ktaps: usize = self.k.iter().product();
        for b in 0..self.batch {
            for o in 0..self.dst_ch {
                for i in 0..self.src_ch {
                    let src_base = (b * self.src_ch + i) * src_plane;
                    let dst_base = (b * self.dst_ch + o) * dst_plane;
                    let w_base = (o * self.src_ch + i) * ktaps;
                    for kz in 0..self.k[0] {
                        let (z0, z1, zoff) = self.range(0, kz);
                        for ky in 0..self.k[1] {
                            let (y0, y1, yoff) = self.range(1, ky);
                            for kx in 0..self.k[2] {
                                let (x0, x1, xoff) = self.range(2, kx);
                                if x1 <= x0 {
                                    continue;
                                }
                                let w = w_base + (kz * self.k[1] + ky) * self.k[2] + kx;
                                for oz in z0..z1 {
                                    let iz = (oz as isize * self.stride[0] as isize + zoff) as usize;
                                    for oy in y0..y1 {
                                        let iy = (oy as isize * self.stride[1] as isize + yoff) as usize;
                                        let ix = (x0 as isize * self.stride[2] as isize + xoff) as usize;
                                        let s_off = src_base + (iz * sh + iy) * sw + ix;
                                        let d_off = dst_base + (oz * dh + oy) * dw + x0;
                                        f(w, s_off, d_off, x1 - x0, self.stride[2]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward correlation: op = weight, input = src, out = dst.
#[derive(Clone, Debug)]
pub struct ConvForward(pub ConvGeometry);

/// Adjoint of [`ConvForward`]: op = weight, input = dst-shaped, out = src-shaped.
/// This is also the transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvAdjoint(pub ConvGeometry);

/// Weight gradient: op = src-shaped data, input = dst-shaped data, out = weight-shaped.
#[derive(Clone, Debug)]
pub struct ConvWeightGrad(pub ConvGeometry);

impl RealBilinear for ConvForward {
    fn op_len(&self) -> usize {
        self.0.weight_len()
    }
    fn input_len(&self) -> usize {
        self.0.src_len()
    }
    fn out_len(&self) -> usize {
        self.0.dst_len()
    }
    fn apply(&self, w: &[f64], src: &[f64], dst: &mut [f64]) -> u64 {
        dst.fill(0.0);
        let mut mults = 0u64;
        self.0.for_each_run(|wi, s, d, len, stride| {
            let wv = w[wi];
            let out = &mut dst[d..d + len];
            if stride == 1 {
                for (o, &x) in out.iter_mut().zip(&src[s..s + len]) {
                    *o += wv * x;
                }
            } else {
                for (j, o) in out.iter_mut().enumerate() {
                    *o += wv * src[s + j * stride];
                }
            }
            mults += len as u64;
        });
        mults
    }
}

impl RealBilinear for ConvAdjoint {
    fn op_len(&self) -> usize {
        self.0.weight_len()
    }
    fn input_len(&self) -> usize {
        self.0.dst_len()
    }
    fn out_len(&self) -> usize {
        self.0.src_len()
    }
    fn apply(&self, w: &[f64], dst: &[f64], src: &mut [f64]) -> u64 {
        src.fill(0.0);
        let mut mults = 0u64;
        self.0.for_each_run(|wi, s, d, len, stride| {
            let wv = w[wi];
            let g = &dst[d..d + len];
            if stride == 1 {
                for (o, &x) in src[s..s + len].iter_mut().zip(g) {
                    *o += wv * x;
                }
            } else {
                for (j, &x) in g.iter().enumerate() {
                    src[s + j * stride] += wv * x;
                }
            }
            mults += len as u64;
        });
        mults
    }
}

impl RealBilinear for ConvWeightGrad {
    fn op_len(&self) -> usize {
        self.0.src_len()
    }
    fn input_len(&self) -> usize {
        self.0.dst_len()
    }
    fn out_len(&self) -> usize {
        self.0.weight_len()
    }
    fn apply(&self, src: &[f64], dst: &[f64], grad: &mut [f64]) -> u64 {
        grad.fill(0.0);
        let mut mults = 0u64;
        self.0.for_each_run(|wi, s, d, len, stride| {
            let g = &dst[d..d + len];
            let acc: f64 = if stride == 1 {
                src[s..s + len].iter().zip(g).map(|(a, b)| a * b).sum()
            } else {
                g.iter().enumerate().map(|(j, b)| src[s + j * stride] * b).sum()
            };
            grad[wi] += acc;
            mults += len as u64;
        });
        mults
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Forward,
    Transposed,
}

/// Resolves the correlation geometry of an `n`-d (transposed) convolution.
///
/// `input` is `[batch, ch, spatial..]`. For forward convolution the weight
/// is `[out_ch, in_ch, k..]`; for transposed convolution it is
/// `[in_ch, out_ch, k..]`, i.e. the weight of the forward convolution whose
/// adjoint is being taken. Returns the geometry and the output shape.
pub fn conv_geometry(n: usize, weight: &[usize], input: &[usize], spec: &ConvSpec) -> Result<(ConvGeometry, Vec<usize>)> {
    if !(1..=3).contains(&n) {
        return Err(Error::invalid(format!("{n}-d convolution is not supported")));
    }
    spec.validate(n)?;
    if input.len() != n + 2 || weight.len() != n + 2 {
        return Err(Error::shape(format!(
            "{n}-d convolution needs rank-{} input and weight, got {input:?} and {weight:?}",
            n + 2
        )));
    }
    if weight[2..].contains(&0) {
        return Err(Error::invalid("kernel extents must be positive"));
    }
    if input[2..].contains(&0) {
        return Err(Error::invalid("spatial extents must be positive"));
    }
    let kernel = &weight[2..];
    let spatial_in = &input[2..];
    let mut spatial_out = Vec::with_capacity(n);
    for ax in 0..n {
        spatial_out.push(spec.output_extent(ax, spatial_in[ax], kernel[ax])?);
    }
    let (src_ch, dst_ch, src, dst) = if spec.transposed {
        if weight[0] != input[1] {
            return Err(Error::shape(format!(
                "transposed conv weight expects {} input channels, got {}",
                weight[0], input[1]
            )));
        }
        (weight[1], weight[0], spatial_out.clone(), spatial_in.to_vec())
    } else {
        if weight[1] != input[1] {
            return Err(Error::shape(format!(
                "conv weight expects {} input channels, got {}",
                weight[1], input[1]
            )));
        }
        (weight[1], weight[0], spatial_in.to_vec(), spatial_out.clone())
    };
    let geom = ConvGeometry {
        batch: input[0],
        src_ch,
        dst_ch,
        src: ConvGeometry::pad3(&src, 1),
        dst: ConvGeometry::pad3(&dst, 1),
        k: ConvGeometry::pad3(kernel, 1),
        stride: ConvGeometry::pad3(&spec.stride, 1),
        pad: ConvGeometry::pad3(&spec.padding, 0),
        dil: ConvGeometry::pad3(&spec.dilation, 1),
    };
    let out_ch = if spec.transposed { weight[1] } else { weight[0] };
    let mut shape = vec![input[0], out_ch];
    shape.extend(spatial_out);
    Ok((geom, shape))
}

/// Complex N-D convolution (cross-correlation) with optional complex bias.
#[allow(clippy::too_many_arguments)]
pub fn convnd(
    kind: ConvKind,
    n: usize,
    weight: &CTensor,
    bias: Option<&CTensor>,
    z: &CTensor,
    spec: &ConvSpec,
    path: Path,
) -> Result<CTensor> {
    convnd_counted(kind, n, weight, bias, z, spec, path, &mut MulCounter::default())
}

#[allow(clippy::too_many_arguments)]
pub fn convnd_counted(
    kind: ConvKind,
    n: usize,
    weight: &CTensor,
    bias: Option<&CTensor>,
    z: &CTensor,
    spec: &ConvSpec,
    path: Path,
    counter: &mut MulCounter,
) -> Result<CTensor> {
    let mut spec = spec.clone();
    spec.transposed = kind == ConvKind::Transposed;
    if spec.output_padding.is_empty() {
        spec.output_padding = vec![0; n];
    }
    weight.check_dtype(z)?;
    let (geom, shape) = conv_geometry(n, weight.shape(), z.shape(), &spec)?;
    let (mut re, mut im) = if spec.transposed {
        complex_apply(&ConvAdjoint(geom), Planes::of(weight), Planes::of(z), path, counter)?
    } else {
        complex_apply(&ConvForward(geom), Planes::of(weight), Planes::of(z), path, counter)?
    };
    if let Some(b) = bias {
        add_channel_bias(&mut re, &mut im, &shape, b)?;
    }
    Ok(CTensor::from_planes(shape, re, im, z.dtype()))
}

pub(crate) fn add_channel_bias(re: &mut [f64], im: &mut [f64], shape: &[usize], bias: &CTensor) -> Result<()> {
    let ch = shape[1];
    if bias.numel() != ch {
        return Err(Error::shape(format!("bias has {} entries for {ch} channels", bias.numel())));
    }
    let plane: usize = shape[2..].iter().product();
    for (idx, (r, i)) in re.chunks_mut(plane).zip(im.chunks_mut(plane)).enumerate() {
        let c = idx % ch;
        let (br, bi) = (bias.re()[c], bias.im()[c]);
        r.iter_mut().for_each(|v| *v += br);
        i.iter_mut().for_each(|v| *v += bi);
    }
    Ok(())
}

/// Convolution by a real kernel: two real applications, one per plane.
pub fn convnd_real_weight(
    n: usize,
    weight: &[f64],
    weight_shape: &[usize],
    z: &CTensor,
    spec: &ConvSpec,
    counter: &mut MulCounter,
) -> Result<CTensor> {
    let (geom, shape) = conv_geometry(n, weight_shape, z.shape(), spec)?;
    let (re, im) = if spec.transposed {
        real_operator_apply(&ConvAdjoint(geom), weight, Planes::of(z), counter)?
    } else {
        real_operator_apply(&ConvForward(geom), weight, Planes::of(z), counter)?
    };
    Ok(CTensor::from_planes(shape, re, im, z.dtype()))
}
