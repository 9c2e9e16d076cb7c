//! Real-valued losses of complex estimates: split losses over the two planes,
//! polar losses over magnitude and phase, and pointwise complex errors.
//!
//! L1, MSE and SSIM terms are mean-reduced; the pointwise errors are sums.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Pointwise, Var};
use crate::ctensor::CTensor;
use crate::cvops::{ConvKind, ConvSpec, Path};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_shape(x: &Var, y: &Var) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::shape(format!("loss operands {:?} vs {:?}", x.shape(), y.shape())));
    }
    Ok(())
}

/// A loss between two real tensors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RealLoss {
    L1,
    MSE,
    SSIM,
}

/// `mean |a − b|`, `mean (a − b)²`, or `1 − SSIM(a, b)` of real tensors.
pub fn real_loss(base: RealLoss, a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b)?;
    match base {
        RealLoss::L1 => a.sub(b)?.abs()?.mean_all(),
        RealLoss::MSE => {
            let d = a.sub(b)?;
            d.mul(&d)?.real()?.mean_all()
        }
        RealLoss::SSIM => ssim_2d(a, b)?.neg()?.add_scalar(1.0, 0.0),
    }
}

/// `L_R(x_re, y_re) + L_I(x_im, y_im)`.
pub fn split_loss_with(base_re: RealLoss, base_im: RealLoss, x: &Var, y: &Var) -> Result<Var> {
    same_shape(x, y)?;
    real_loss(base_re, &x.real()?, &y.real()?)?.add(&real_loss(base_im, &x.imag()?, &y.imag()?)?)
}

pub fn split_loss(base: RealLoss, x: &Var, y: &Var) -> Result<Var> {
    split_loss_with(base, base, x, y)
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let s: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / s).collect();
    let mut w = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);
    for a in &g {
        for b in &g {
            w.push(a * b);
        }
    }
    w
}

/// Mean structural similarity of two real images (`[.., H, W]`), computed
/// with an 11×11 Gaussian window (σ = 1.5) over valid positions only. The
/// dynamic range is `max − min` of `b`, or 1 if that is zero.
pub fn ssim_2d(a: &Var, b: &Var) -> Result<Var> {
    same_shape(a, b)?;
    let r = a.rank();
    if r < 2 || a.shape()[r - 2] < SSIM_WINDOW || a.shape()[r - 1] < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {:?}", a.shape())));
    }
    let (h, w) = (a.shape()[r - 2], a.shape()[r - 1]);
    let lead: usize = a.shape()[..r - 2].iter().product();
    let img = |v: &Var| v.real()?.reshape(&[lead, 1, h, w]);
    let (a, b) = (img(a)?, img(b)?);
    let range = b.extremum_re_all(true)?.sub(&b.extremum_re_all(false)?)?;
    let range = if range.value().re()[0] > 0.0 { range } else { Var::constant(CTensor::scalar(1.0, 0.0)) };
    let c1 = range.scale(SSIM_K1)?;
    let c1 = c1.mul(&c1)?;
    let c2 = range.scale(SSIM_K2)?;
    let c2 = c2.mul(&c2)?;

    let window = Var::constant(CTensor::from_real(&[1, 1, SSIM_WINDOW, SSIM_WINDOW], gaussian_window())?);
    let spec = ConvSpec::identity(2);
    let blur = |v: &Var| v.conv(&window, None, 2, ConvKind::Forward, &spec, Path::Naive, true);
    let (mu_a, mu_b) = (blur(&a)?, blur(&b)?);
    let (mu_aa, mu_bb, mu_ab) = (mu_a.mul(&mu_a)?, mu_b.mul(&mu_b)?, mu_a.mul(&mu_b)?);
    let s_aa = blur(&a.mul(&a)?)?.sub(&mu_aa)?;
    let s_bb = blur(&b.mul(&b)?)?.sub(&mu_bb)?;
    let s_ab = blur(&a.mul(&b)?)?.sub(&mu_ab)?;
    let num = mu_ab.scale(2.0)?.add(&c1)?.mul(&s_ab.scale(2.0)?.add(&c2)?)?;
    let den = mu_aa.add(&mu_bb)?.add(&c1)?.mul(&s_aa.add(&s_bb)?.add(&c2)?)?;
    num.div(&den)?.real()?.mean_all()
}

/// Residual wrapped to `(−π, π]`.
fn wrap_phase(d: &Var) -> Result<Var> {
    use std::f64::consts::PI;
    d.map_real("wrap_phase", |v| (v - 2.0 * PI * ((v - PI) / (2.0 * PI)).ceil(), 1.0))
}

/// `w_mag·G(|x|, |y|) + w_phase·G(wrap(∠x − ∠y), 0)`.
pub fn polar_loss(base_mag: RealLoss, base_phase: RealLoss, w_mag: f64, w_phase: f64, x: &Var, y: &Var) -> Result<Var> {
    same_shape(x, y)?;
    if w_mag < 0.0 || w_phase < 0.0 || (w_mag == 0.0 && w_phase == 0.0) {
        return Err(Error::invalid(format!("polar loss weights ({w_mag}, {w_phase}) must be non-negative and not both zero")));
    }
    let mag = real_loss(base_mag, &x.abs()?, &y.abs()?)?;
    let residual = wrap_phase(&x.angle()?.sub(&y.angle()?)?)?;
    let zero = Var::constant(CTensor::zeros(residual.shape()).to_dtype(residual.value().dtype()));
    let phase = real_loss(base_phase, &residual, &zero)?;
    mag.scale(w_mag)?.add(&phase.scale(w_phase)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PointwiseLoss {
    #[serde(rename = "CVQuadError")]
    Quad,
    #[serde(rename = "CVFourthPowError")]
    FourthPow,
    #[serde(rename = "CVCauchyError")]
    Cauchy,
    #[serde(rename = "CVLogCoshError")]
    LogCosh,
    #[serde(rename = "CVLogError")]
    Log,
}

/// Principal complex logarithm.
fn clog(z: &Var) -> Result<Var> {
    if z.value().re().iter().zip(z.value().im()).any(|(&x, &y)| x == 0.0 && y == 0.0) {
        return Err(Error::invalid("complex log of a zero element"));
    }
    z.map("clog", |x, y| {
        let r2 = x * x + y * y;
        let (dre, dim) = (x / r2, -y / r2);
        Pointwise { u: 0.5 * r2.ln(), v: crate::ctensor::angle(x, y), du_dx: dre, du_dy: -dim, dv_dx: dim, dv_dy: dre }
    })
}

/// `ln cosh(t)`, computed without overflow.
fn log_cosh(t: f64) -> (f64, f64) {
    let a = t.abs();
    (a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2, t.tanh())
}

/// Pointwise complex errors, sum-reduced. `c` is the Cauchy scale.
pub fn pointwise_loss(kind: PointwiseLoss, c: f64, x: &Var, y: &Var) -> Result<Var> {
    same_shape(x, y)?;
    if kind == PointwiseLoss::Log {
        let d = clog(x)?.sub(&clog(y)?)?;
        return d.abs2()?.sum_all();
    }
    let e = x.sub(y)?.abs2()?;
    match kind {
        PointwiseLoss::Quad => e.sum_all()?.scale(0.5),
        PointwiseLoss::FourthPow => e.mul(&e)?.sum_all()?.scale(0.5),
        PointwiseLoss::Cauchy => {
            if c <= 0.0 {
                return Err(Error::invalid(format!("Cauchy scale must be positive, got {c}")));
            }
            let c2 = c * c;
            e.map_real("cauchy", move |v| ((v / c2).ln_1p(), 1.0 / (c2 + v)))?.sum_all()?.scale(0.5 * c2 / 2.0)
        }
        PointwiseLoss::LogCosh => e.map_real("log_cosh", log_cosh)?.sum_all(),
        PointwiseLoss::Log => unreachable!(),
    }
}

/// A configured loss, as named in training configs.
#[derive(Clone, Debug, PartialEq)]
pub enum Loss {
    Split(RealLoss),
    Polar { base: RealLoss, w_mag: f64, w_phase: f64 },
    Pointwise { kind: PointwiseLoss, c: f64 },
    PerpSSIM,
}

impl Loss {
    pub const NAMES: &'static [&'static str] = &[
        "SplitL1",
        "SplitMSE",
        "SplitSSIM",
        "PolarL1",
        "PolarMSE",
        "CVQuadError",
        "CVFourthPowError",
        "CVCauchyError",
        "CVLogCoshError",
        "CVLogError",
        "PerpLossSSIM",
    ];

    pub fn from_name(name: &str) -> Option<Self> {
        let pw = |kind| Some(Loss::Pointwise { kind, c: 1.0 });
        match name {
            "SplitL1" => Some(Loss::Split(RealLoss::L1)),
            "SplitMSE" => Some(Loss::Split(RealLoss::MSE)),
            "SplitSSIM" => Some(Loss::Split(RealLoss::SSIM)),
            "PolarL1" => Some(Loss::Polar { base: RealLoss::L1, w_mag: 1.0, w_phase: 1.0 }),
            "PolarMSE" => Some(Loss::Polar { base: RealLoss::MSE, w_mag: 1.0, w_phase: 1.0 }),
            "CVQuadError" => pw(PointwiseLoss::Quad),
            "CVFourthPowError" => pw(PointwiseLoss::FourthPow),
            "CVCauchyError" => pw(PointwiseLoss::Cauchy),
            "CVLogCoshError" => pw(PointwiseLoss::LogCosh),
            "CVLogError" => pw(PointwiseLoss::Log),
            "PerpLossSSIM" => Some(Loss::PerpSSIM),
            _ => None,
        }
    }

    pub fn compute(&self, x: &Var, y: &Var) -> Result<Var> {
        match *self {
            Loss::Split(base) => split_loss(base, x, y),
            Loss::Polar { base, w_mag, w_phase } => polar_loss(base, base, w_mag, w_phase, x, y),
            Loss::Pointwise { kind, c } => pointwise_loss(kind, c, x, y),
            Loss::PerpSSIM => Err(Error::NotImplemented(
                "PerpLossSSIM: its formulation is external to this library".into(),
            )),
        }
    }
}
