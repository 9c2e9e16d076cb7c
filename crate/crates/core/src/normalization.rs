//! Complex batch and layer normalization by 2×2 covariance whitening.
//!
//! Each feature's `(Re, Im)` pair is centred and multiplied by the inverse
//! square root of its covariance matrix `V = [[Vrr, Vri], [Vri, Vii]]`, then
//! mapped through a symmetric 2×2 scale `Γ` and complex shift `β`. The
//! statistics use the biased `1/N` estimator.

use crate::autodiff::{Parameter, Var};
use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::module::{Ctx, Module};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Inverse square root of `[[vrr + eps, vri], [vri, vii + eps]]`, returned as
/// `(Wrr, Wii, Wri)` of the symmetric result.
pub fn inv_sqrt_2x2(vrr: f64, vii: f64, vri: f64, eps: f64) -> Result<(f64, f64, f64)> {
    let (a, b, c) = (vrr + eps, vii + eps, vri);
    let det = a * b - c * c;
    if !(a > 0.0 && b > 0.0 && det > 0.0) {
        return Err(Error::NotPositiveDefinite);
    }
    let s = det.sqrt();
    let t = (a + b + 2.0 * s).sqrt();
    let k = 1.0 / (s * t);
    Ok(((b + s) * k, (a + s) * k, -c * k))
}

/// Per-feature statistics of one batch (or the running estimate).
#[derive(Clone, Debug, PartialEq)]
pub struct WhitenStats {
    pub mu: CTensor,
    pub vrr: CTensor,
    pub vii: CTensor,
    pub vri: CTensor,
}

/// `Γ = [[γrr, γri], [γri, γii]]` and `β`, per feature.
pub struct Affine {
    pub gamma_rr: Parameter,
    pub gamma_ii: Parameter,
    pub gamma_ri: Parameter,
    pub beta: Parameter,
}

impl Affine {
    /// `γrr = γii = 1/√2`, `γri = 0`, `β = 0`.
    pub fn new(shape: &[usize]) -> Self {
        let d = std::f64::consts::FRAC_1_SQRT_2;
        Affine {
            gamma_rr: Parameter::new(CTensor::full(shape, d, 0.0)),
            gamma_ii: Parameter::new(CTensor::full(shape, d, 0.0)),
            gamma_ri: Parameter::new(CTensor::zeros(shape)),
            beta: Parameter::new(CTensor::zeros(shape)),
        }
    }

    /// `Γ = I`, `β = 0`.
    pub fn identity(shape: &[usize]) -> Self {
        let mut a = Self::new(shape);
        a.gamma_rr.value = CTensor::ones(shape);
        a.gamma_ii.value = CTensor::ones(shape);
        a
    }

    fn visit(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("gamma_rr", &mut self.gamma_rr);
        f("gamma_ii", &mut self.gamma_ii);
        f("gamma_ri", &mut self.gamma_ri);
        f("beta", &mut self.beta);
    }

    fn vars(&self, ctx: &Ctx, shape: &[usize]) -> Result<AffineVars> {
        // Γ is real: dropping the imaginary part also drops its gradient
        let g = |p: &Parameter| ctx.param(p).real()?.reshape(shape);
        Ok(AffineVars {
            gamma_rr: g(&self.gamma_rr)?,
            gamma_ii: g(&self.gamma_ii)?,
            gamma_ri: g(&self.gamma_ri)?,
            beta: ctx.param(&self.beta).reshape(shape)?,
        })
    }
}

/// Affine parameters already on the tape, shaped to broadcast against data.
pub struct AffineVars {
    pub gamma_rr: Var,
    pub gamma_ii: Var,
    pub gamma_ri: Var,
    pub beta: Var,
}

impl AffineVars {
    pub fn apply(&self, xw: &Var, yw: &Var) -> Result<Var> {
        let u = self.gamma_rr.mul(xw)?.add(&self.gamma_ri.mul(yw)?)?;
        let v = self.gamma_ri.mul(xw)?.add(&self.gamma_ii.mul(yw)?)?;
        Var::complex(&u, &v)?.add(&self.beta)
    }
}

fn sqrt_var(v: &Var) -> Result<Var> {
    v.map_real("sqrt", |x| {
        let s = x.sqrt();
        (s, 0.5 / s)
    })
}

/// Applies `W = (V + eps·I)^{-1/2}` to the centred planes; every argument is
/// real and broadcast-compatible.
fn whiten_planes(xc: &Var, yc: &Var, vrr: &Var, vii: &Var, vri: &Var, eps: f64) -> Result<(Var, Var)> {
    let a = vrr.add_scalar(eps, 0.0)?;
    let b = vii.add_scalar(eps, 0.0)?;
    let det = a.mul(&b)?.sub(&vri.mul(vri)?)?;
    let ok = |t: &CTensor| t.re().iter().all(|&v| v > 0.0);
    if !(ok(a.value()) && ok(b.value()) && ok(det.value())) {
        return Err(Error::NotPositiveDefinite);
    }
    let s = sqrt_var(&det)?;
    let t = sqrt_var(&a.add(&b)?.add(&s.scale(2.0)?)?)?;
    let denom = s.mul(&t)?;
    let wrr = b.add(&s)?.div(&denom)?;
    let wii = a.add(&s)?.div(&denom)?;
    let wri = vri.neg()?.div(&denom)?;
    let xw = wrr.mul(xc)?.add(&wri.mul(yc)?)?;
    let yw = wri.mul(xc)?.add(&wii.mul(yc)?)?;
    Ok((xw, yw))
}

/// Whitens `z` with statistics taken over `axes`. Returns the whitened real
/// and imaginary planes and the (detached) statistics, kept-dims shaped.
pub fn whiten(z: &Var, axes: &[usize], eps: f64) -> Result<(Var, Var, WhitenStats)> {
    let mu = z.mean(axes, true)?;
    let zc = z.sub(&mu)?;
    let (xc, yc) = (zc.real()?, zc.imag()?);
    let vrr = xc.mul(&xc)?.mean(axes, true)?;
    let vii = yc.mul(&yc)?.mean(axes, true)?;
    let vri = xc.mul(&yc)?.mean(axes, true)?;
    let (xw, yw) = whiten_planes(&xc, &yc, &vrr, &vii, &vri, eps)?;
    let stats = WhitenStats {
        mu: mu.value().clone(),
        vrr: vrr.value().clone(),
        vii: vii.value().clone(),
        vri: vri.value().clone(),
    };
    Ok((xw, yw, stats))
}

/// Running batch statistics, one entry per feature.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub stats: WhitenStats,
    pub momentum: f64,
    pub num_batches_tracked: u64,
}

impl RunningStats {
    /// `μ = 0`, `Vrr = Vii = 1/2`, `Vri = 0`.
    pub fn new(features: usize, momentum: f64) -> Self {
        RunningStats {
            stats: WhitenStats {
                mu: CTensor::zeros(&[features]),
                vrr: CTensor::full(&[features], 0.5, 0.0),
                vii: CTensor::full(&[features], 0.5, 0.0),
                vri: CTensor::zeros(&[features]),
            },
            momentum,
            num_batches_tracked: 0,
        }
    }

    fn update(&mut self, batch: &WhitenStats) -> Result<()> {
        let m = self.momentum;
        let c = self.stats.mu.numel();
        let blend = |old: &CTensor, new: &CTensor| -> Result<CTensor> {
            old.scale(1.0 - m).add(&new.reshape(&[c])?.scale(m))
        };
        self.stats = WhitenStats {
            mu: blend(&self.stats.mu, &batch.mu)?,
            vrr: blend(&self.stats.vrr, &batch.vrr)?,
            vii: blend(&self.stats.vii, &batch.vii)?,
            vri: blend(&self.stats.vri, &batch.vri)?,
        };
        self.num_batches_tracked += 1;
        Ok(())
    }
}

fn feature_shape(rank: usize, c: usize) -> Vec<usize> {
    let mut s = vec![1; rank];
    s[1] = c;
    s
}

/// Batch normalization over every axis except axis 1 (features).
///
/// In training mode the batch statistics are used and folded into
/// `running`; otherwise `running` is used as-is.
pub fn cv_batchnorm(
    z: &Var,
    running: &mut RunningStats,
    affine: Option<&AffineVars>,
    training: bool,
    eps: f64,
) -> Result<Var> {
    if z.rank() < 2 {
        return Err(Error::shape(format!("batch norm needs [batch, features, ..], got {:?}", z.shape())));
    }
    let c = running.stats.mu.numel();
    if z.shape()[1] != c {
        return Err(Error::shape(format!("batch norm over {c} features, input {:?}", z.shape())));
    }
    let fshape = feature_shape(z.rank(), c);
    let (xw, yw) = if training {
        let axes: Vec<usize> = (0..z.rank()).filter(|&a| a != 1).collect();
        let count: usize = axes.iter().map(|&a| z.shape()[a]).product();
        if count < 2 {
            return Err(Error::invalid("batch norm in training mode needs at least two values per feature"));
        }
        let (xw, yw, stats) = whiten(z, &axes, eps)?;
        running.update(&stats)?;
        (xw, yw)
    } else {
        let st = &running.stats;
        let k = |t: &CTensor| -> Result<Var> { Ok(Var::constant(t.reshape(&fshape)?.to_dtype(z.value().dtype()))) };
        let zc = z.sub(&k(&st.mu)?)?;
        whiten_planes(&zc.real()?, &zc.imag()?, &k(&st.vrr)?, &k(&st.vii)?, &k(&st.vri)?, eps)?
    };
    match affine {
        Some(a) => a.apply(&xw, &yw),
        None => Var::complex(&xw, &yw),
    }
}

/// Layer normalization over the trailing `normalized_ndim` axes, per sample.
pub fn cv_layernorm(z: &Var, normalized_ndim: usize, affine: Option<&AffineVars>, eps: f64) -> Result<Var> {
    if normalized_ndim == 0 || normalized_ndim > z.rank() {
        return Err(Error::invalid(format!("cannot normalize {normalized_ndim} trailing axes of {:?}", z.shape())));
    }
    let axes: Vec<usize> = (z.rank() - normalized_ndim..z.rank()).collect();
    let extent: usize = axes.iter().map(|&a| z.shape()[a]).product();
    if extent < 2 {
        return Err(Error::invalid("layer norm needs a normalized extent of at least 2"));
    }
    let (xw, yw, _) = whiten(z, &axes, eps)?;
    match affine {
        Some(a) => a.apply(&xw, &yw),
        None => Var::complex(&xw, &yw),
    }
}

pub struct CVBatchNorm {
    pub eps: f64,
    pub affine: Option<Affine>,
    pub running: RunningStats,
}

impl CVBatchNorm {
    pub fn new(features: usize) -> Self {
        CVBatchNorm {
            eps: DEFAULT_EPS,
            affine: Some(Affine::new(&[features])),
            running: RunningStats::new(features, DEFAULT_MOMENTUM),
        }
    }

    pub fn features(&self) -> usize {
        self.running.stats.mu.numel()
    }
}

impl Module for CVBatchNorm {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let fshape = feature_shape(x.rank().max(2), self.features());
        let aff = self.affine.as_ref().map(|a| a.vars(ctx, &fshape)).transpose()?;
        cv_batchnorm(x, &mut self.running, aff.as_ref(), ctx.training, self.eps)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        if let Some(a) = &mut self.affine {
            a.visit(f);
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut CTensor)) {
        let st = &mut self.running.stats;
        f("running_mean", &mut st.mu);
        f("running_vrr", &mut st.vrr);
        f("running_vii", &mut st.vii);
        f("running_vri", &mut st.vri);
        let mut n = CTensor::scalar(self.running.num_batches_tracked as f64, 0.0);
        f("num_batches_tracked", &mut n);
        self.running.num_batches_tracked = n.re()[0] as u64;
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        if input.len() < 2 || input[1] != self.features() {
            return Err(Error::shape(format!("batch norm over {} features, input {input:?}", self.features())));
        }
        Ok(input.to_vec())
    }
}

pub struct CVLayerNorm {
    pub normalized_shape: Vec<usize>,
    pub eps: f64,
    pub affine: Option<Affine>,
}

impl CVLayerNorm {
    pub fn new(normalized_shape: &[usize]) -> Self {
        CVLayerNorm {
            normalized_shape: normalized_shape.to_vec(),
            eps: DEFAULT_EPS,
            affine: Some(Affine::new(normalized_shape)),
        }
    }
}

impl Module for CVLayerNorm {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        self.output_shape(x.shape())?;
        let aff = self.affine.as_ref().map(|a| a.vars(ctx, &self.normalized_shape)).transpose()?;
        cv_layernorm(x, self.normalized_shape.len(), aff.as_ref(), self.eps)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        if let Some(a) = &mut self.affine {
            a.visit(f);
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n = self.normalized_shape.len();
        if input.len() < n || input[input.len() - n..] != self.normalized_shape[..] {
            return Err(Error::shape(format!("layer norm over {:?}, input {input:?}", self.normalized_shape)));
        }
        Ok(input.to_vec())
    }
}
