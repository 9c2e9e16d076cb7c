//! Complex activations: split (Type-A), polar (Type-B), fully complex, and
//! the ReLU family.
//!
//! Every function here is elementwise and carries its real 2×2 Jacobian, so
//! non-holomorphic maps differentiate correctly through the tape.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Pointwise, Var};
use crate::ctensor::{angle, CTensor};
use crate::error::{Error, Result};
use crate::module::{Ctx, Module};

/// A real function with its derivative: `x -> (g(x), g'(x))`.
pub type RealFn = fn(f64) -> (f64, f64);

pub fn tanh_fn(x: f64) -> (f64, f64) {
    let t = x.tanh();
    (t, 1.0 - t * t)
}

pub fn sigmoid_fn(x: f64) -> (f64, f64) {
    let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    (s, s * (1.0 - s))
}

pub fn abs_fn(x: f64) -> (f64, f64) {
    (x.abs(), if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
}

pub fn relu_fn(x: f64) -> (f64, f64) {
    if x > 0.0 {
        (x, 1.0)
    } else {
        (0.0, 0.0)
    }
}

pub fn squash_fn(r: f64) -> (f64, f64) {
    let d = 1.0 + r * r;
    (r * r / d, 2.0 * r / (d * d))
}

pub fn log1p_fn(r: f64) -> (f64, f64) {
    (r.ln_1p(), 1.0 / (1.0 + r))
}

fn holomorphic(u: f64, v: f64, dre: f64, dim: f64) -> Pointwise {
    Pointwise { u, v, du_dx: dre, du_dy: -dim, dv_dx: dim, dv_dy: dre }
}

fn cmul(a: (f64, f64), b: (f64, f64)) -> (f64, f64) {
    (a.0 * b.0 - a.1 * b.1, a.0 * b.1 + a.1 * b.0)
}

fn cinv(a: (f64, f64)) -> (f64, f64) {
    let d = a.0 * a.0 + a.1 * a.1;
    (a.0 / d, -a.1 / d)
}

/// `G_re(x) + j G_im(y)`.
pub fn apply_type_a(z: &Var, g_re: impl Fn(f64) -> (f64, f64), g_im: impl Fn(f64) -> (f64, f64)) -> Result<Var> {
    z.map("type_a", |x, y| {
        let (u, du) = g_re(x);
        let (v, dv) = g_im(y);
        Pointwise { u, v, du_dx: du, dv_dy: dv, ..Default::default() }
    })
}

/// Value and Jacobian of `G(r)·exp(j·P(θ))` at `(x, y)`, plus `∂(u, v)/∂G`
/// for callers whose `G` depends on a parameter.
fn polar_point(x: f64, y: f64, g: (f64, f64), phase: Option<(f64, f64)>) -> (Pointwise, (f64, f64)) {
    let r = x.hypot(y);
    let theta = angle(x, y);
    let (p, dp) = phase.unwrap_or((theta, 1.0));
    let (c, s) = (p.cos(), p.sin());
    let (gv, dg) = g;
    if r == 0.0 {
        // ∠0 = 0; the Jacobian takes the limit along the positive real axis
        return (
            Pointwise { u: gv * c, v: gv * s, du_dx: dg * c, du_dy: -dg * s, dv_dx: dg * s, dv_dy: dg * c },
            (c, s),
        );
    }
    let (rx, ry) = (x / r, y / r);
    let (tx, ty) = (-y / (r * r), x / (r * r));
    (
        Pointwise {
            u: gv * c,
            v: gv * s,
            du_dx: dg * rx * c - gv * s * dp * tx,
            du_dy: dg * ry * c - gv * s * dp * ty,
            dv_dx: dg * rx * s + gv * c * dp * tx,
            dv_dy: dg * ry * s + gv * c * dp * ty,
        },
        (c, s),
    )
}

/// `G_mag(|z|)·exp(j·G_phase(∠z))`; the phase is kept when `g_phase` is `None`.
pub fn apply_type_b(
    z: &Var,
    g_mag: impl Fn(f64) -> (f64, f64),
    g_phase: Option<&dyn Fn(f64) -> (f64, f64)>,
) -> Result<Var> {
    z.map("type_b", |x, y| polar_point(x, y, g_mag(x.hypot(y)), g_phase.map(|f| f(angle(x, y)))).0)
}

/// `ReLU(|z| + b)·exp(j∠z)` with learnable real `b`.
pub fn mod_relu(z: &Var, b: &Var) -> Result<Var> {
    z.map_with_param("modReLU", b, |x, y, b| {
        let r = x.hypot(y);
        let active = r + b > 0.0;
        let g = if active { (r + b, 1.0) } else { (0.0, 0.0) };
        let (pt, (c, s)) = polar_point(x, y, g, None);
        let k = if active { 1.0 } else { 0.0 };
        (pt, k * c, k * s)
    })
}

/// Sign convention for the fully complex sigmoid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmoidConvention {
    /// `1/(1 + exp(z))`, as tabulated.
    #[default]
    Literal,
    /// `1/(1 + exp(−z))`, the usual real-valued orientation.
    Standard,
}

pub fn cv_sigmoid(z: &Var, convention: SigmoidConvention) -> Result<Var> {
    let sign = match convention {
        SigmoidConvention::Literal => 1.0,
        SigmoidConvention::Standard => -1.0,
    };
    z.map("CVSigmoid", move |x, y| {
        let (ex, ey) = (sign * x, sign * y);
        let e = (ex.exp() * ey.cos(), ex.exp() * ey.sin());
        let f = cinv((1.0 + e.0, e.1));
        // f' = −sign·f·(1 − f)
        let d = cmul(f, (1.0 - f.0, -f.1));
        holomorphic(f.0, f.1, -sign * d.0, -sign * d.1)
    })
}

/// Passes `z` when `∠z ∈ [0, π/2]`, i.e. the closed first quadrant.
pub fn zrelu(z: &Var) -> Result<Var> {
    z.map("zReLU", |x, y| {
        if x >= 0.0 && y >= 0.0 {
            Pointwise { u: x, v: y, du_dx: 1.0, dv_dy: 1.0, ..Default::default() }
        } else {
            Pointwise::default()
        }
    })
}

/// `(1 + cos∠z)·z/2`.
pub fn cardioid(z: &Var) -> Result<Var> {
    z.map("CVCardioid", |x, y| {
        let r = x.hypot(y);
        if r == 0.0 {
            return Pointwise { du_dx: 1.0, dv_dy: 1.0, ..Default::default() };
        }
        let c = x / r;
        let r3 = r * r * r;
        // u = x/2 + x²/(2r), v = y/2 + xy/(2r)
        Pointwise {
            u: 0.5 * (1.0 + c) * x,
            v: 0.5 * (1.0 + c) * y,
            du_dx: 0.5 + 0.5 * (2.0 * x / r - x * x * x / r3),
            du_dy: -0.5 * x * x * y / r3,
            dv_dx: 0.5 * (y / r - x * x * y / r3),
            dv_dy: 0.5 + 0.5 * (x / r - x * y * y / r3),
        }
    })
}

/// `z/(c + |z|/r)`.
pub fn siglog(z: &Var, c: f64, r: f64) -> Result<Var> {
    if c <= 0.0 || r <= 0.0 {
        return Err(Error::invalid(format!("CVSigLog needs c, r > 0 (got c={c}, r={r})")));
    }
    z.map("CVSigLog", move |x, y| {
        let m = x.hypot(y);
        let d = c + m / r;
        if m == 0.0 {
            return Pointwise { du_dx: 1.0 / c, dv_dy: 1.0 / c, ..Default::default() };
        }
        let (mx, my) = (x / (m * r), y / (m * r));
        Pointwise {
            u: x / d,
            v: y / d,
            du_dx: 1.0 / d - x * mx / (d * d),
            du_dy: -x * my / (d * d),
            dv_dx: -y * mx / (d * d),
            dv_dy: 1.0 / d - y * my / (d * d),
        }
    })
}

pub fn crelu(z: &Var) -> Result<Var> {
    apply_type_a(z, relu_fn, relu_fn)
}

/// `PReLU(x) + j PReLU(y)` with one learnable negative slope.
pub fn cprelu(z: &Var, slope: &Var) -> Result<Var> {
    z.map_with_param("CPReLU", slope, |x, y, a| {
        let part = |t: f64| if t > 0.0 { (t, 1.0, 0.0) } else { (a * t, a, t) };
        let (u, du, ua) = part(x);
        let (v, dv, va) = part(y);
        (Pointwise { u, v, du_dx: du, dv_dy: dv, ..Default::default() }, ua, va)
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActivationKind {
    SplitTanh,
    SplitSigmoid,
    SplitAbs,
    PolarTanh,
    PolarSquash,
    PolarLog,
    ModReLU,
    Sigmoid,
    ZReLU,
    Cardioid,
    SigLog,
    CReLU,
    CPReLU,
}

const NAMES: &[(&str, ActivationKind)] = &[
    ("CVSplitTanh", ActivationKind::SplitTanh),
    ("CTanh", ActivationKind::SplitTanh),
    ("CVSplitSigmoid", ActivationKind::SplitSigmoid),
    ("CSigmoid", ActivationKind::SplitSigmoid),
    ("CVSplitAbs", ActivationKind::SplitAbs),
    ("CVPolarTanh", ActivationKind::PolarTanh),
    ("CVPolarSquash", ActivationKind::PolarSquash),
    ("CVPolarLog", ActivationKind::PolarLog),
    ("modReLU", ActivationKind::ModReLU),
    ("CVSigmoid", ActivationKind::Sigmoid),
    ("zReLU", ActivationKind::ZReLU),
    ("CVCardioid", ActivationKind::Cardioid),
    ("CVCardiod", ActivationKind::Cardioid),
    ("CVSigLog", ActivationKind::SigLog),
    ("CReLU", ActivationKind::CReLU),
    ("CVSplitReLU", ActivationKind::CReLU),
    ("CPReLU", ActivationKind::CPReLU),
];

impl ActivationKind {
    pub fn from_name(name: &str) -> Option<Self> {
        NAMES.iter().find(|(n, _)| *n == name).map(|&(_, k)| k)
    }

    /// Every registered name, aliases included.
    pub fn names() -> impl Iterator<Item = &'static str> {
        NAMES.iter().map(|(n, _)| *n)
    }

    pub fn name(self) -> &'static str {
        NAMES.iter().find(|(_, k)| *k == self).map(|(n, _)| *n).unwrap()
    }
}

/// An activation layer, holding its learnable scalar if it has one.
pub struct CVActivation {
    pub kind: ActivationKind,
    /// modReLU bias `b` or CPReLU slope.
    pub param: Option<Parameter>,
    pub c: f64,
    pub r: f64,
    pub convention: SigmoidConvention,
}

impl CVActivation {
    pub const MOD_RELU_BIAS: f64 = -0.1;
    pub const CPRELU_SLOPE: f64 = 0.25;

    pub fn new(kind: ActivationKind) -> Self {
        let param = match kind {
            ActivationKind::ModReLU => Some(Self::MOD_RELU_BIAS),
            ActivationKind::CPReLU => Some(Self::CPRELU_SLOPE),
            _ => None,
        };
        CVActivation {
            kind,
            param: param.map(|v| Parameter::new(CTensor::scalar(v, 0.0))),
            c: 1.0,
            r: 1.0,
            convention: SigmoidConvention::Literal,
        }
    }

    pub fn with_param(mut self, value: f64) -> Result<Self> {
        match &mut self.param {
            Some(p) => p.value = CTensor::scalar(value, 0.0),
            None => return Err(Error::Config(format!("{} has no learnable parameter", self.kind.name()))),
        }
        Ok(self)
    }

    pub fn apply(&self, z: &Var, param: Option<&Var>) -> Result<Var> {
        let need = || param.ok_or_else(|| Error::invalid(format!("{} needs its parameter", self.kind.name())));
        match self.kind {
            ActivationKind::SplitTanh => apply_type_a(z, tanh_fn, tanh_fn),
            ActivationKind::SplitSigmoid => apply_type_a(z, sigmoid_fn, sigmoid_fn),
            ActivationKind::SplitAbs => apply_type_a(z, abs_fn, abs_fn),
            ActivationKind::PolarTanh => apply_type_b(z, tanh_fn, None),
            ActivationKind::PolarSquash => apply_type_b(z, squash_fn, None),
            ActivationKind::PolarLog => apply_type_b(z, log1p_fn, None),
            ActivationKind::ModReLU => mod_relu(z, need()?),
            ActivationKind::Sigmoid => cv_sigmoid(z, self.convention),
            ActivationKind::ZReLU => zrelu(z),
            ActivationKind::Cardioid => cardioid(z),
            ActivationKind::SigLog => siglog(z, self.c, self.r),
            ActivationKind::CReLU => crelu(z),
            ActivationKind::CPReLU => cprelu(z, need()?),
        }
    }
}

impl Module for CVActivation {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let p = self.param.as_ref().map(|p| ctx.param(p));
        self.apply(x, p.as_ref())
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        if let Some(p) = &mut self.param {
            f(if self.kind == ActivationKind::ModReLU { "b" } else { "slope" }, p);
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_3, FRAC_PI_4, PI};

    fn at(kind: ActivationKind, x: f64, y: f64) -> (f64, f64) {
        let z = Var::constant(CTensor::scalar(x, y));
        let act = CVActivation::new(kind);
        let p = act.param.as_ref().map(|p| Var::constant(p.value.clone()));
        act.apply(&z, p.as_ref()).unwrap().value().item().unwrap()
    }

    fn close(a: (f64, f64), b: (f64, f64), tol: f64) -> bool {
        (a.0 - b.0).abs() <= tol && (a.1 - b.1).abs() <= tol
    }

    fn polar(r: f64, t: f64) -> (f64, f64) {
        (r * t.cos(), r * t.sin())
    }

    #[test]
    fn type_a_examples() {
        use ActivationKind::*;
        assert_eq!(at(SplitTanh, 0.0, 0.0), (0.0, 0.0));
        assert_eq!(at(SplitAbs, -3.0, 4.0), (3.0, 4.0));
        assert!(close(at(SplitTanh, 50.0, 50.0), (1.0, 1.0), 1e-12));
        assert_eq!(ActivationKind::from_name("CTanh"), ActivationKind::from_name("CVSplitTanh"));
        assert_eq!(ActivationKind::from_name("CSigmoid"), Some(SplitSigmoid));
    }

    #[test]
    fn type_b_examples() {
        use ActivationKind::*;
        let (x, y) = polar(2.0, FRAC_PI_3);
        let out = at(PolarTanh, x, y);
        assert!(close(out, polar(2f64.tanh(), FRAC_PI_3), 1e-15));
        assert_eq!(at(PolarSquash, 1.0, 0.0), (0.5, 0.0));

        let b = Var::constant(CTensor::scalar(-1.0, 0.0));
        let (x, y) = polar(2.0, FRAC_PI_4);
        let out = mod_relu(&Var::constant(CTensor::scalar(x, y)), &b).unwrap().value().item().unwrap();
        assert!(close(out, polar(1.0, FRAC_PI_4), 1e-15));
        for t in [0.0, 1.0, -2.5, PI] {
            let (x, y) = polar(0.5, t);
            let out = mod_relu(&Var::constant(CTensor::scalar(x, y)), &b).unwrap().value().item().unwrap();
            assert_eq!(out, (0.0, 0.0));
        }
    }

    #[test]
    fn fully_complex_examples() {
        use ActivationKind::*;
        assert_eq!(at(ZReLU, 1.0, 1.0), (1.0, 1.0));
        assert_eq!(at(ZReLU, -1.0, 1.0), (0.0, 0.0));
        assert_eq!(at(ZReLU, 1.0, -1.0), (0.0, 0.0));
        assert_eq!(at(ZReLU, 2.0, 0.0), (2.0, 0.0));
        assert_eq!(at(ZReLU, 0.0, 2.0), (0.0, 2.0));
        assert!(close(at(Cardioid, -3.0, 0.0), (0.0, 0.0), 0.0));
        assert_eq!(at(Cardioid, 5.0, 0.0), (5.0, 0.0));
        assert!(close(at(Cardioid, 0.0, 2.0), (0.0, 1.0), 1e-15));
        assert_eq!(at(SigLog, 1.0, 0.0), (0.5, 0.0));
        assert_eq!(at(Sigmoid, 0.0, 0.0), (0.5, 0.0));
        assert_eq!(ActivationKind::from_name("CVCardiod"), Some(Cardioid));
    }

    #[test]
    fn sigmoid_conventions() {
        let z = Var::constant(CTensor::scalar(2.0, 0.0));
        let lit = cv_sigmoid(&z, SigmoidConvention::Literal).unwrap().value().item().unwrap();
        let std = cv_sigmoid(&z, SigmoidConvention::Standard).unwrap().value().item().unwrap();
        assert!((lit.0 - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-15);
        assert!((std.0 - 1.0 / (1.0 + (-2f64).exp())).abs() < 1e-15);
    }

    #[test]
    fn relu_family_examples() {
        use ActivationKind::*;
        assert_eq!(at(CReLU, -1.0, 2.0), (0.0, 2.0));
        assert_eq!(at(CReLU, 3.0, 4.0), (3.0, 4.0));
        let act = CVActivation::new(CPReLU).with_param(0.1).unwrap();
        let p = Var::constant(act.param.as_ref().unwrap().value.clone());
        let out = act.apply(&Var::constant(CTensor::scalar(-10.0, -10.0)), Some(&p)).unwrap();
        assert!(close(out.value().item().unwrap(), (-1.0, -1.0), 1e-15));
    }

    #[test]
    fn siglog_rejects_nonpositive_constants() {
        assert!(siglog(&Var::constant(CTensor::scalar(1.0, 0.0)), 0.0, 1.0).is_err());
    }

    #[test]
    fn cardioid_real_axis() {
        for x in [0.1, 1.0, 7.5, 1e3] {
            assert_eq!(at(ActivationKind::Cardioid, x, 0.0), (x, 0.0));
            assert_eq!(at(ActivationKind::Cardioid, -x, 0.0).0, 0.0);
        }
    }

    #[test]
    fn gradients_at_interior_points() {
        let mut r = ChaCha8Rng::seed_from_u64(21);
        let z0 = CTensor::randn(&[12], 1.0, &mut r);
        let probe = CTensor::randn(&[12], 1.0, &mut r);
        let loss = |out: Var| out.mul(&Var::constant(probe.conj()))?.real()?.sum_all();
        for (name, _) in NAMES {
            let kind = ActivationKind::from_name(name).unwrap();
            let mut act = CVActivation::new(kind);
            if kind == ActivationKind::ModReLU {
                act = act.with_param(-0.3).unwrap();
            }
            let pv = act.param.as_ref().map(|p| p.value.clone());
            let ez = finite_diff_check(|z| loss(act.apply(z, pv.clone().map(Var::constant).as_ref())?), &z0, 1e-6).unwrap();
            assert!(ez <= 1e-6, "{name}: {ez}");
            if let Some(p0) = pv {
                let ep = finite_diff_check(|p| loss(act.apply(&Var::constant(z0.clone()), Some(p))?), &p0, 1e-6).unwrap();
                assert!(ep <= 1e-6, "{name} param: {ep}");
            }
        }
        let es = finite_diff_check(|z| loss(cv_sigmoid(z, SigmoidConvention::Standard)?), &z0, 1e-6).unwrap();
        assert!(es <= 1e-6);
    }

    #[test]
    fn learnable_scalars_receive_gradients() {
        let tape = crate::autodiff::Tape::new();
        let mut act = CVActivation::new(ActivationKind::ModReLU);
        let mut ctx = Ctx::train(tape.clone(), ChaCha8Rng::seed_from_u64(0));
        let z = Var::constant(CTensor::from_pairs(&[2], &[(1.0, 1.0), (0.0, -2.0)]).unwrap());
        act.forward(&mut ctx, &z).unwrap().abs2().unwrap().sum_all().unwrap().backward().unwrap();
        let g = tape.param_grad(act.param.as_ref().unwrap()).unwrap();
        assert!(g.re()[0] != 0.0 && g.im()[0] == 0.0);
    }

    proptest! {
        #[test]
        fn polar_maps_keep_phase(r in 1e-3f64..50.0, t in -3.1f64..3.1) {
            let (x, y) = polar(r, t);
            for kind in [ActivationKind::PolarTanh, ActivationKind::PolarSquash, ActivationKind::PolarLog, ActivationKind::ModReLU] {
                let out = at(kind, x, y);
                if out.0.hypot(out.1) > 0.0 {
                    prop_assert!((angle(out.0, out.1) - angle(x, y)).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn zrelu_idempotent(x in -5.0f64..5.0, y in -5.0f64..5.0) {
            let once = at(ActivationKind::ZReLU, x, y);
            prop_assert_eq!(at(ActivationKind::ZReLU, once.0, once.1), once);
        }
    }
}
