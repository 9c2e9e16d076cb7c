//! Differentiable primitives on [`Var`].
//!
//! Each VJP maps the output gradient `g = ∂L/∂u + j ∂L/∂v` to input
//! gradients in the same convention. For an input-holomorphic product
//! `c = a·b` that is `g·conj(b)`; for everything else the 2×2 real Jacobian
//! is used directly.

use std::sync::Arc;

use super::{Var, Variable};
use crate::ctensor::{CTensor, ReduceOp};
use crate::cvops::{
    self, complex_apply, conv_geometry, real_operator_apply, ConvAdjoint, ConvForward, ConvKind, ConvSpec,
    ConvWeightGrad, MulCounter, Path, Planes,
};
use crate::error::{Error, Result};

/// Value and real Jacobian of an elementwise map `(x, y) -> (u, v)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pointwise {
    pub u: f64,
    pub v: f64,
    pub du_dx: f64,
    pub du_dy: f64,
    pub dv_dx: f64,
    pub dv_dy: f64,
}

impl Pointwise {
    /// A map that ignores `y` and writes a real result.
    pub fn real(u: f64, du_dx: f64) -> Self {
        Pointwise { u, du_dx, ..Default::default() }
    }
}

fn some2(a: CTensor, b: CTensor) -> Result<Vec<Option<CTensor>>> {
    Ok(vec![Some(a), Some(b)])
}

impl Variable {
    // ---- arithmetic ----

    pub fn add(&self, other: &Var) -> Result<Var> {
        let value = self.value.add(&other.value)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Var::record("add", &[self, other], value, move |g, _| {
            some2(g.sum_to_shape(&sa)?, g.sum_to_shape(&sb)?)
        }))
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        let value = self.value.sub(&other.value)?;
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Ok(Var::record("sub", &[self, other], value, move |g, _| {
            some2(g.sum_to_shape(&sa)?, g.neg().sum_to_shape(&sb)?)
        }))
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        let value = self.value.mul(&other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(Var::record("mul", &[self, other], value, move |g, needs| {
            let ga = if needs[0] { Some(g.mul(&b.conj())?.sum_to_shape(a.shape())?) } else { None };
            let gb = if needs[1] { Some(g.mul(&a.conj())?.sum_to_shape(b.shape())?) } else { None };
            Ok(vec![ga, gb])
        }))
    }

    pub fn div(&self, other: &Var) -> Result<Var> {
        let value = self.value.div(&other.value)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        let q = value.clone();
        Ok(Var::record("div", &[self, other], value, move |g, needs| {
            let ga = if needs[0] { Some(g.div(&b.conj())?.sum_to_shape(a.shape())?) } else { None };
            // d(a/b)/db = -(a/b)/b
            let gb = if needs[1] {
                let d = q.div(&b)?.neg();
                Some(g.mul(&d.conj())?.sum_to_shape(b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn neg(&self) -> Result<Var> {
        Ok(Var::record("neg", &[self], self.value.neg(), |g, _| Ok(vec![Some(g.neg())])))
    }

    pub fn conj(&self) -> Result<Var> {
        Ok(Var::record("conj", &[self], self.value.conj(), |g, _| Ok(vec![Some(g.conj())])))
    }

    pub fn scale(&self, k: f64) -> Result<Var> {
        Ok(Var::record("scale", &[self], self.value.scale(k), move |g, _| Ok(vec![Some(g.scale(k))])))
    }

    /// Multiplies by a constant complex scalar.
    pub fn mul_scalar(&self, re: f64, im: f64) -> Result<Var> {
        self.mul(&Var::constant(CTensor::scalar(re, im).to_dtype(self.value.dtype())))
    }

    pub fn add_scalar(&self, re: f64, im: f64) -> Result<Var> {
        self.add(&Var::constant(CTensor::scalar(re, im).to_dtype(self.value.dtype())))
    }

    /// Multiplies the real plane by `mask.re` and the imaginary plane by
    /// `mask.im`, element by element (no cross terms).
    pub fn mul_planes(&self, mask: &CTensor) -> Result<Var> {
        if mask.shape() != self.shape() {
            return Err(Error::shape(format!("plane mask {:?} vs {:?}", mask.shape(), self.shape())));
        }
        let value = self.value.zip_with(mask, |(x, y), (a, b)| (a * x, b * y))?;
        let m = mask.clone();
        Ok(Var::record("mul_planes", &[self], value, move |g, _| {
            Ok(vec![Some(g.zip_with(&m, |(gx, gy), (a, b)| (a * gx, b * gy))?)])
        }))
    }

    // ---- elementwise maps ----

    /// Applies an elementwise map given with its real Jacobian.
    pub fn map(&self, op: &'static str, f: impl Fn(f64, f64) -> Pointwise) -> Result<Var> {
        let n = self.value.numel();
        let (xs, ys) = (self.value.re(), self.value.im());
        let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut jac = Vec::with_capacity(if self.requires_grad() { n } else { 0 });
        for i in 0..n {
            let p = f(xs[i], ys[i]);
            u.push(p.u);
            v.push(p.v);
            if self.requires_grad() {
                jac.push([p.du_dx, p.du_dy, p.dv_dx, p.dv_dy]);
            }
        }
        let value = CTensor::from_planes(self.shape().to_vec(), u, v, self.value.dtype());
        let shape = self.shape().to_vec();
        let dtype = self.value.dtype();
        Ok(Var::record(op, &[self], value, move |g, _| {
            let (gu, gv) = (g.re(), g.im());
            let (gx, gy) = jac
                .iter()
                .enumerate()
                .map(|(i, j)| (gu[i] * j[0] + gv[i] * j[2], gu[i] * j[1] + gv[i] * j[3]))
                .unzip();
            Ok(vec![Some(CTensor::from_planes(shape.clone(), gx, gy, dtype))])
        }))
    }

    /// Elementwise map with a learnable real scalar `param` (its imaginary
    /// part is ignored). `f` returns the pointwise value and Jacobian plus
    /// `(∂u/∂p, ∂v/∂p)`.
    pub fn map_with_param(
        &self,
        op: &'static str,
        param: &Var,
        f: impl Fn(f64, f64, f64) -> (Pointwise, f64, f64),
    ) -> Result<Var> {
        if param.value.numel() != 1 {
            return Err(Error::shape(format!("scalar parameter expected, got {:?}", param.shape())));
        }
        let p = param.value.re()[0];
        let n = self.value.numel();
        let (xs, ys) = (self.value.re(), self.value.im());
        let (mut u, mut v) = (Vec::with_capacity(n), Vec::with_capacity(n));
        let mut jac = Vec::with_capacity(n);
        for i in 0..n {
            let (pt, up, vp) = f(xs[i], ys[i], p);
            u.push(pt.u);
            v.push(pt.v);
            jac.push([pt.du_dx, pt.du_dy, pt.dv_dx, pt.dv_dy, up, vp]);
        }
        let value = CTensor::from_planes(self.shape().to_vec(), u, v, self.value.dtype());
        let shape = self.shape().to_vec();
        let pshape = param.shape().to_vec();
        let dtype = self.value.dtype();
        Ok(Var::record(op, &[self, param], value, move |g, needs| {
            let (gu, gv) = (g.re(), g.im());
            let gz = if needs[0] {
                let (gx, gy) = jac
                    .iter()
                    .enumerate()
                    .map(|(i, j)| (gu[i] * j[0] + gv[i] * j[2], gu[i] * j[1] + gv[i] * j[3]))
                    .unzip();
                Some(CTensor::from_planes(shape.clone(), gx, gy, dtype))
            } else {
                None
            };
            let gp = if needs[1] {
                let s: f64 = jac.iter().enumerate().map(|(i, j)| gu[i] * j[4] + gv[i] * j[5]).sum();
                Some(CTensor::from_planes(pshape.clone(), vec![s], vec![0.0], dtype))
            } else {
                None
            };
            Ok(vec![gz, gp])
        }))
    }

    /// `Re(z)` as a real tensor.
    pub fn real(&self) -> Result<Var> {
        self.map("real", |x, _| Pointwise::real(x, 1.0))
    }

    /// `Im(z)` as a real tensor.
    pub fn imag(&self) -> Result<Var> {
        self.map("imag", |_, y| Pointwise { u: y, du_dy: 1.0, ..Default::default() })
    }

    /// `|z|²` as a real tensor.
    pub fn abs2(&self) -> Result<Var> {
        self.map("abs2", |x, y| Pointwise { u: x * x + y * y, du_dx: 2.0 * x, du_dy: 2.0 * y, ..Default::default() })
    }

    /// `|z|` as a real tensor; the subgradient at 0 is 0.
    pub fn abs(&self) -> Result<Var> {
        self.map("abs", |x, y| {
            let r = x.hypot(y);
            let (cx, sy) = if r > 0.0 { (x / r, y / r) } else { (0.0, 0.0) };
            Pointwise { u: r, du_dx: cx, du_dy: sy, ..Default::default() }
        })
    }

    /// Principal `∠z` as a real tensor, `∠0 = 0`.
    pub fn angle(&self) -> Result<Var> {
        self.map("angle", |x, y| {
            let r2 = x * x + y * y;
            let (dx, dy) = if r2 > 0.0 { (-y / r2, x / r2) } else { (0.0, 0.0) };
            Pointwise { u: crate::ctensor::angle(x, y), du_dx: dx, du_dy: dy, ..Default::default() }
        })
    }

    pub fn exp(&self) -> Result<Var> {
        // holomorphic: J = [[Re e, -Im e], [Im e, Re e]]
        self.map("exp", |x, y| {
            let e = x.exp();
            let (c, s) = (e * y.cos(), e * y.sin());
            Pointwise { u: c, v: s, du_dx: c, du_dy: -s, dv_dx: s, dv_dy: c }
        })
    }

    /// Real map on the real part, e.g. `sqrt` of a real tensor.
    pub fn map_real(&self, op: &'static str, f: impl Fn(f64) -> (f64, f64)) -> Result<Var> {
        self.map(op, |x, _| {
            let (u, d) = f(x);
            Pointwise::real(u, d)
        })
    }

    /// Builds `Re(re) + j Re(im)` from two real tensors of equal shape.
    pub fn complex(re: &Var, im: &Var) -> Result<Var> {
        if re.shape() != im.shape() {
            return Err(Error::shape(format!("complex() parts {:?} vs {:?}", re.shape(), im.shape())));
        }
        let value = CTensor::from_planes(
            re.shape().to_vec(),
            re.value.re().to_vec(),
            im.value.re().to_vec(),
            re.value.dtype().promote(im.value.dtype()),
        );
        Ok(Var::record("complex", &[re, im], value, |g, _| some2(g.real_part(), g.imag_part())))
    }

    // ---- reductions ----

    fn expand_grad(g: &CTensor, kept: &[usize], full: &[usize], scale: f64) -> Result<CTensor> {
        let g = g.reshape(kept)?.broadcast_to(full)?;
        Ok(if scale == 1.0 { g } else { g.scale(scale) })
    }

    pub fn sum(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let value = self.value.reduce(ReduceOp::Sum, axes, keepdim)?;
        let full = self.shape().to_vec();
        let kept = CTensor::reduction_map(&full, axes).0;
        Ok(Var::record("sum", &[self], value, move |g, _| Ok(vec![Some(Self::expand_grad(g, &kept, &full, 1.0)?)])))
    }

    pub fn mean(&self, axes: &[usize], keepdim: bool) -> Result<Var> {
        let value = self.value.reduce(ReduceOp::Mean, axes, keepdim)?;
        let full = self.shape().to_vec();
        let count: usize = axes.iter().map(|&a| full[a]).product();
        let kept = CTensor::reduction_map(&full, axes).0;
        Ok(Var::record("mean", &[self], value, move |g, _| {
            Ok(vec![Some(Self::expand_grad(g, &kept, &full, 1.0 / count as f64)?)])
        }))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&self) -> Result<Var> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        self.sum(&axes, false)
    }

    pub fn mean_all(&self) -> Result<Var> {
        let axes: Vec<usize> = (0..self.rank()).collect();
        if self.rank() == 0 {
            return Ok(self.clone());
        }
        self.mean(&axes, false)
    }

    /// Extremum of `|z|` over `axes` (real result); the gradient flows to the
    /// first element attaining it.
    pub fn magnitude_extremum(&self, axes: &[usize], keepdim: bool, max: bool) -> Result<Var> {
        let op = if max { ReduceOp::MaxMagnitude } else { ReduceOp::MinMagnitude };
        let value = self.value.reduce(op, axes, keepdim)?;
        let (kept, map) = CTensor::reduction_map(self.shape(), axes);
        let m: usize = kept.iter().product();
        let mut arg = vec![usize::MAX; m];
        let mut best = vec![if max { f64::NEG_INFINITY } else { f64::INFINITY }; m];
        let (xs, ys) = (self.value.re(), self.value.im());
        for (i, &o) in map.iter().enumerate() {
            let r = xs[i].hypot(ys[i]);
            if (max && r > best[o]) || (!max && r < best[o]) {
                best[o] = r;
                arg[o] = i;
            }
        }
        let z = self.value.clone();
        Ok(Var::record("magnitude_extremum", &[self], value, move |g, _| {
            let n = z.numel();
            let (mut gx, mut gy) = (vec![0.0; n], vec![0.0; n]);
            for (o, &i) in arg.iter().enumerate() {
                let (x, y) = (z.re()[i], z.im()[i]);
                let r = x.hypot(y);
                if r > 0.0 {
                    gx[i] += g.re()[o] * x / r;
                    gy[i] += g.re()[o] * y / r;
                }
            }
            Ok(vec![Some(CTensor::from_planes(z.shape().to_vec(), gx, gy, z.dtype()))])
        }))
    }

    /// Largest (or smallest) real part over all elements, as a real scalar;
    /// the gradient flows to the first element attaining it.
    pub fn extremum_re_all(&self, max: bool) -> Result<Var> {
        let xs = self.value.re();
        if xs.is_empty() {
            return Err(Error::EmptyReduction);
        }
        let mut arg = 0;
        for (i, &v) in xs.iter().enumerate() {
            if (max && v > xs[arg]) || (!max && v < xs[arg]) {
                arg = i;
            }
        }
        let value = CTensor::from_planes(vec![], vec![xs[arg]], vec![0.0], self.value.dtype());
        let (shape, n, dtype) = (self.shape().to_vec(), xs.len(), self.value.dtype());
        Ok(Var::record("extremum_re_all", &[self], value, move |g, _| {
            let mut gx = vec![0.0; n];
            gx[arg] = g.re()[0];
            Ok(vec![Some(CTensor::from_planes(shape.clone(), gx, vec![0.0; n], dtype))])
        }))
    }

    /// Softmax of the real parts along `axis`; the result is real and the
    /// imaginary input plane receives no gradient.
    pub fn softmax_re(&self, axis: usize) -> Result<Var> {
        if axis >= self.rank() {
            return Err(Error::Axis { axis, rank: self.rank() });
        }
        let shape = self.shape().to_vec();
        let d = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let xs = self.value.re();
        let mut s = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * d + k) * inner + i;
                let mx = (0..d).map(|k| xs[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut tot = 0.0;
                for k in 0..d {
                    let e = (xs[idx(k)] - mx).exp();
                    s[idx(k)] = e;
                    tot += e;
                }
                for k in 0..d {
                    s[idx(k)] /= tot;
                }
            }
        }
        let n = s.len();
        let value = CTensor::from_planes(shape.clone(), s.clone(), vec![0.0; n], self.value.dtype());
        let dtype = self.value.dtype();
        Ok(Var::record("softmax_re", &[self], value, move |g, _| {
            let gu = g.re();
            let mut gx = vec![0.0; n];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |k: usize| (o * d + k) * inner + i;
                    let dot: f64 = (0..d).map(|k| gu[idx(k)] * s[idx(k)]).sum();
                    for k in 0..d {
                        gx[idx(k)] = s[idx(k)] * (gu[idx(k)] - dot);
                    }
                }
            }
            Ok(vec![Some(CTensor::from_planes(shape.clone(), gx, vec![0.0; n], dtype))])
        }))
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(Var::record("reshape", &[self], value, move |g, _| Ok(vec![Some(g.reshape(&orig)?)])))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var> {
        let value = self.value.permute(perm)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(Var::record("permute", &[self], value, move |g, _| Ok(vec![Some(g.permute(&inv)?)])))
    }

    pub fn transpose_last2(&self) -> Result<Var> {
        let r = self.rank();
        if r < 2 {
            return Err(Error::shape("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 1, r - 2);
        self.permute(&perm)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value.broadcast_to(shape)?;
        let orig = self.shape().to_vec();
        Ok(Var::record("broadcast_to", &[self], value, move |g, _| Ok(vec![Some(g.sum_to_shape(&orig)?)])))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value.narrow(axis, start, len)?;
        let full = self.shape().to_vec();
        Ok(Var::record("narrow", &[self], value, move |g, _| {
            let mut parts = Vec::new();
            let mut before = full.clone();
            before[axis] = start;
            let mut after = full.clone();
            after[axis] = full[axis] - start - len;
            let zb = CTensor::zeros(&before).to_dtype(g.dtype());
            let za = CTensor::zeros(&after).to_dtype(g.dtype());
            if start > 0 {
                parts.push(&zb);
            }
            parts.push(g);
            if after[axis] > 0 {
                parts.push(&za);
            }
            Ok(vec![Some(CTensor::concat(&parts, axis)?)])
        }))
    }

    pub fn concat(parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&CTensor> = parts.iter().map(|p| &p.value).collect();
        let value = CTensor::concat(&values, axis)?;
        let extents: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let refs: Vec<&Var> = parts.iter().collect();
        Ok(Var::record("concat", &refs, value, move |g, needs| {
            let mut start = 0;
            let mut out = Vec::with_capacity(extents.len());
            for (i, &len) in extents.iter().enumerate() {
                out.push(if needs[i] { Some(g.narrow(axis, start, len)?) } else { None });
                start += len;
            }
            Ok(out)
        }))
    }

    // ---- linear algebra ----

    /// Complex batched matmul over the last two axes (see [`cvops::matmul`]).
    pub fn matmul(&self, other: &Var, path: Path) -> Result<Var> {
        let value = cvops::matmul(&self.value, &other.value, path)?;
        let (a, b) = (self.value.clone(), other.value.clone());
        Ok(Var::record("matmul", &[self, other], value, move |g, needs| {
            let ga = if needs[0] {
                let bh = b.conj().transpose_last2()?;
                Some(cvops::matmul(g, &bh, path)?.sum_to_shape(a.shape())?)
            } else {
                None
            };
            let gb = if needs[1] {
                let ah = a.conj().transpose_last2()?;
                Some(cvops::matmul(&ah, g, path)?.sum_to_shape(b.shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    /// `n`-d complex convolution of `self` (`[batch, ch, spatial..]`).
    ///
    /// With `real_weight` the imaginary plane of `weight` is ignored and the
    /// real kernel is applied to each plane (two real applications); the
    /// weight gradient is then real as well.
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &self,
        weight: &Var,
        bias: Option<&Var>,
        n: usize,
        kind: ConvKind,
        spec: &ConvSpec,
        path: Path,
        real_weight: bool,
    ) -> Result<Var> {
        let mut spec = spec.clone();
        spec.transposed = kind == ConvKind::Transposed;
        if spec.output_padding.is_empty() {
            spec.output_padding = vec![0; n];
        }
        self.value.check_dtype(&weight.value)?;
        let (geom, out_shape) = conv_geometry(n, weight.shape(), self.shape(), &spec)?;
        let mut counter = MulCounter::default();
        let x = self.value.clone();
        let w = weight.value.clone();
        let dtype = x.dtype();
        let zeros_w = Arc::new(vec![0.0; w.numel()]);
        let (mut re, mut im) = match (real_weight, spec.transposed) {
            (true, false) => real_operator_apply(&ConvForward(geom.clone()), w.re(), Planes::of(&x), &mut counter)?,
            (true, true) => real_operator_apply(&ConvAdjoint(geom.clone()), w.re(), Planes::of(&x), &mut counter)?,
            (false, false) => complex_apply(&ConvForward(geom.clone()), Planes::of(&w), Planes::of(&x), path, &mut counter)?,
            (false, true) => complex_apply(&ConvAdjoint(geom.clone()), Planes::of(&w), Planes::of(&x), path, &mut counter)?,
        };
        if let Some(b) = bias {
            cvops::add_channel_bias(&mut re, &mut im, &out_shape, &b.value)?;
        }
        let value = CTensor::from_planes(out_shape, re, im, dtype);
        let bias_shape = bias.map(|b| b.shape().to_vec());
        let transposed = spec.transposed;
        let mut inputs: Vec<&Var> = vec![self, weight];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(Var::record("conv", &inputs, value, move |g, needs| {
            let mut c = MulCounter::default();
            let neg_w_im: Vec<f64> = w.im().iter().map(|v| -v).collect();
            let w_conj = Planes { re: w.re(), im: if real_weight { &zeros_w[..] } else { &neg_w_im } };
            // input gradient: adjoint operator with conjugated weights
            let gx = if needs[0] {
                let (r, i) = match (real_weight, transposed) {
                    (true, false) => real_operator_apply(&ConvAdjoint(geom.clone()), w.re(), Planes::of(g), &mut c)?,
                    (true, true) => real_operator_apply(&ConvForward(geom.clone()), w.re(), Planes::of(g), &mut c)?,
                    (false, false) => complex_apply(&ConvAdjoint(geom.clone()), w_conj, Planes::of(g), path, &mut c)?,
                    (false, true) => complex_apply(&ConvForward(geom.clone()), w_conj, Planes::of(g), path, &mut c)?,
                };
                Some(CTensor::from_planes(x.shape().to_vec(), r, i, dtype))
            } else {
                None
            };
            let gw = if needs[1] {
                let kernel = ConvWeightGrad(geom.clone());
                // forward: Σ conj(x)[src]·g[dst]; transposed: Σ g[src]·conj(x)[dst]
                let xc = x.conj();
                let (src, dst) = if transposed { (g.clone(), xc) } else { (xc, g.clone()) };
                let (r, i) = if real_weight {
                    let mut rr = vec![0.0; w.numel()];
                    let mut ii = vec![0.0; w.numel()];
                    use crate::cvops::RealBilinear;
                    kernel.apply(src.re(), dst.re(), &mut rr);
                    kernel.apply(src.im(), dst.im(), &mut ii);
                    // Re(Σ conj-pair product) = Σ re·re − im·im with the conjugate folded into `xc`
                    rr.iter_mut().zip(&ii).for_each(|(a, b)| *a -= b);
                    (rr, vec![0.0; w.numel()])
                } else {
                    complex_apply(&kernel, Planes::of(&src), Planes::of(&dst), path, &mut c)?
                };
                Some(CTensor::from_planes(w.shape().to_vec(), r, i, dtype))
            } else {
                None
            };
            let mut out = vec![gx, gw];
            if let Some(bs) = &bias_shape {
                out.push(if needs[2] {
                    let axes: Vec<usize> = (0..g.rank()).filter(|&a| a != 1).collect();
                    Some(g.sum(&axes)?.reshape(bs)?)
                } else {
                    None
                });
            }
            Ok(out)
        }))
    }

    /// Adaptive average pooling over the trailing `out_size.len()` axes,
    /// each bin `i` spanning `[floor(i·in/out), ceil((i+1)·in/out))`.
    pub fn adaptive_avg_pool(&self, out_size: &[usize]) -> Result<Var> {
        let n = out_size.len();
        if !(1..=3).contains(&n) || self.rank() < n {
            return Err(Error::invalid(format!("cannot pool {:?} to {out_size:?}", self.shape())));
        }
        let lead: usize = self.shape()[..self.rank() - n].iter().product();
        let in_sp = self.shape()[self.rank() - n..].to_vec();
        for (i, (&o, &d)) in out_size.iter().zip(&in_sp).enumerate() {
            if o == 0 || o > d {
                return Err(Error::invalid(format!("output size {o} invalid for extent {d} on axis {i}")));
            }
        }
        let pad = |v: &[usize]| {
            let mut a = [1usize; 3];
            a[3 - v.len()..].copy_from_slice(v);
            a
        };
        let (ins, outs) = (pad(&in_sp), pad(out_size));
        let bins = |ax: usize, i: usize| (i * ins[ax] / outs[ax], ((i + 1) * ins[ax]).div_ceil(outs[ax]));
        let in_plane: usize = ins.iter().product();
        let out_plane: usize = outs.iter().product();
        // every output cell as (list of input offsets within the plane)
        let mut cells: Vec<Vec<usize>> = Vec::with_capacity(out_plane);
        for a in 0..outs[0] {
            let (a0, a1) = bins(0, a);
            for b in 0..outs[1] {
                let (b0, b1) = bins(1, b);
                for c in 0..outs[2] {
                    let (c0, c1) = bins(2, c);
                    let mut cell = Vec::new();
                    for i in a0..a1 {
                        for j in b0..b1 {
                            for k in c0..c1 {
                                cell.push((i * ins[1] + j) * ins[2] + k);
                            }
                        }
                    }
                    cells.push(cell);
                }
            }
        }
        let (xs, ys) = (self.value.re(), self.value.im());
        let mut re = Vec::with_capacity(lead * out_plane);
        let mut im = Vec::with_capacity(lead * out_plane);
        for l in 0..lead {
            let base = l * in_plane;
            for cell in &cells {
                let inv = 1.0 / cell.len() as f64;
                re.push(cell.iter().map(|&o| xs[base + o]).sum::<f64>() * inv);
                im.push(cell.iter().map(|&o| ys[base + o]).sum::<f64>() * inv);
            }
        }
        let mut shape = self.shape()[..self.rank() - n].to_vec();
        shape.extend_from_slice(out_size);
        let value = CTensor::from_planes(shape, re, im, self.value.dtype());
        let in_shape = self.shape().to_vec();
        let dtype = self.value.dtype();
        Ok(Var::record("adaptive_avg_pool", &[self], value, move |g, _| {
            let total = lead * in_plane;
            let (mut gx, mut gy) = (vec![0.0; total], vec![0.0; total]);
            for l in 0..lead {
                for (ci, cell) in cells.iter().enumerate() {
                    let inv = 1.0 / cell.len() as f64;
                    let (gr, gi) = (g.re()[l * out_plane + ci] * inv, g.im()[l * out_plane + ci] * inv);
                    for &o in cell {
                        gx[l * in_plane + o] += gr;
                        gy[l * in_plane + o] += gi;
                    }
                }
            }
            Ok(vec![Some(CTensor::from_planes(in_shape.clone(), gx, gy, dtype))])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::super::{finite_diff_check, Tape};
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    /// Real scalar projection `Re Σ conj(r) ⊙ out` with fixed random `r`.
    fn project(out: &Var, r: &CTensor) -> Result<Var> {
        out.mul(&Var::constant(r.conj()))?.real()?.sum_all()
    }

    fn check_unary(z0: CTensor, f: impl Fn(&Var) -> Result<Var>) -> f64 {
        let mut r = rng();
        let probe = f(&Var::constant(z0.clone())).unwrap();
        let w = CTensor::randn(probe.shape(), 1.0, &mut r);
        finite_diff_check(|z| project(&f(z)?, &w), &z0, 1e-6).unwrap()
    }

    #[test]
    fn arithmetic_gradients() {
        let mut r = rng();
        let b = CTensor::randn(&[3, 1], 1.0, &mut r).add(&CTensor::full(&[3, 1], 3.0, 0.0)).unwrap();
        let z0 = CTensor::randn(&[2, 3, 4], 1.0, &mut r);
        for (name, err) in [
            ("mul", check_unary(z0.clone(), |z| z.mul(&Var::constant(b.clone())))),
            ("div", check_unary(z0.clone(), |z| z.div(&Var::constant(b.clone())))),
            ("div-den", check_unary(b.clone(), |d| Var::constant(z0.clone()).div(d))),
            ("mul-bcast", check_unary(b.clone(), |d| Var::constant(z0.clone()).mul(d))),
            ("exp", check_unary(z0.clone(), |z| z.exp())),
            ("conj", check_unary(z0.clone(), |z| z.conj())),
            ("abs", check_unary(z0.clone(), |z| z.abs())),
            ("angle", check_unary(z0.clone(), |z| z.angle())),
            ("mean", check_unary(z0.clone(), |z| z.mean(&[0, 2], true))),
            ("permute", check_unary(z0.clone(), |z| z.permute(&[2, 0, 1]))),
            ("narrow", check_unary(z0.clone(), |z| z.narrow(2, 1, 2))),
            ("softmax", check_unary(z0.clone(), |z| z.softmax_re(1))),
            ("maxmag", check_unary(z0.clone(), |z| z.magnitude_extremum(&[2], true, true))),
            ("pool", check_unary(CTensor::randn(&[2, 2, 5, 3], 1.0, &mut r), |z| z.adaptive_avg_pool(&[2, 2]))),
        ] {
            assert!(err <= 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn matmul_gradients() {
        let mut r = rng();
        let a = CTensor::randn(&[2, 3, 4], 1.0, &mut r);
        let b = CTensor::randn(&[4, 5], 1.0, &mut r);
        for path in [Path::Gauss, Path::Naive] {
            let ea = check_unary(a.clone(), |x| x.matmul(&Var::constant(b.clone()), path));
            let eb = check_unary(b.clone(), |x| Var::constant(a.clone()).matmul(x, path));
            assert!(ea <= 1e-6 && eb <= 1e-6, "{ea} {eb}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut r = rng();
        let spec = ConvSpec::uniform(2, 2, 1, 1);
        let x = CTensor::randn(&[2, 3, 5, 4], 1.0, &mut r);
        let w = CTensor::randn(&[4, 3, 3, 2], 1.0, &mut r);
        let b = CTensor::randn(&[4], 1.0, &mut r);
        for kind in [ConvKind::Forward, ConvKind::Transposed] {
            let (w, x) = if kind == ConvKind::Transposed {
                (CTensor::randn(&[3, 4, 3, 2], 1.0, &mut r), x.clone())
            } else {
                (w.clone(), x.clone())
            };
            let bb = if kind == ConvKind::Transposed { CTensor::randn(&[4], 1.0, &mut r) } else { b.clone() };
            for real_weight in [false, true] {
                let wv = if real_weight { w.real_part() } else { w.clone() };
                let ex = check_unary(x.clone(), |z| {
                    z.conv(&Var::constant(wv.clone()), Some(&Var::constant(bb.clone())), 2, kind, &spec, Path::Gauss, real_weight)
                });
                let ew = check_unary(wv.clone(), |q| {
                    Var::constant(x.clone()).conv(q, None, 2, kind, &spec, Path::Naive, real_weight)
                });
                let eb = check_unary(bb.clone(), |q| {
                    Var::constant(x.clone()).conv(&Var::constant(wv.clone()), Some(q), 2, kind, &spec, Path::Gauss, real_weight)
                });
                assert!(ex <= 1e-6 && ew <= 1e-6 && eb <= 1e-6, "{kind:?} real={real_weight}: {ex} {ew} {eb}");
            }
        }
    }

    #[test]
    fn map_with_param_gradient() {
        let mut r = rng();
        let z0 = CTensor::randn(&[6], 1.0, &mut r);
        let p0 = CTensor::scalar(0.7, 0.0);
        let f = |z: &Var, p: &Var| {
            z.map_with_param("scaled", p, |x, y, p| {
                (Pointwise { u: p * x, v: p * y, du_dx: p, dv_dy: p, ..Default::default() }, x, y)
            })
        };
        let ez = check_unary(z0.clone(), |z| f(z, &Var::constant(p0.clone())));
        let ep = check_unary(p0.clone(), |p| f(&Var::constant(z0.clone()), p));
        assert!(ez <= 1e-6 && ep <= 1e-6);
    }

    #[test]
    fn complex_from_parts_and_concat() {
        let tape = Tape::new();
        let a = tape.leaf(CTensor::from_real(&[2], vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(CTensor::from_real(&[2], vec![3.0, 4.0]).unwrap());
        let z = Var::complex(&a, &b).unwrap();
        assert_eq!(z.value().im(), &[3.0, 4.0]);
        let c = Var::concat(&[z.clone(), z], 0).unwrap();
        c.imag().unwrap().sum_all().unwrap().backward().unwrap();
        assert_eq!(b.grad().unwrap().re(), &[2.0, 2.0]);
        assert_eq!(a.grad().unwrap().re(), &[0.0, 0.0]);
    }
}
