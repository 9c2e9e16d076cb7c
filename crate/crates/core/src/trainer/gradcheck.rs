//! Finite-difference check of every differentiable catalogue operation.
//!
//! Each operation is checked at several independent random instances. An
//! instance draws its inputs away from the operation's non-differentiable
//! set (coordinate axes, `|z| = 0`, ReLU thresholds, L1 kinks, phase wrap)
//! by at least [`MARGIN`], reduces the output to a real scalar with a random
//! probe `Re Σ conj(p)·f(z)`, and compares the tape gradient of every input
//! with central differences.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activations::{cprelu, mod_relu, ActivationKind, CVActivation};
use crate::attention::{cv_eca, cv_mca, cv_multihead, cv_sdpa, AttentionConfig, PointConv, Projections, TransposeMode};
use crate::autodiff::{finite_diff_check_many, Var};
use crate::ctensor::{angle, CTensor};
use crate::cvops::{ConvKind, ConvSpec, Path};
use crate::error::{Error, Result};
use crate::layers::{cv_dropout, cv_linear, MaskMode};
use crate::losses::{polar_loss, pointwise_loss, split_loss, PointwiseLoss, RealLoss};
use crate::manifold::{wfm_conv, ConvexScope};
use crate::masks::{complex_ratio_mask, cv_softmax_split, mag_minmax_norm, mag_softmax, phase_softmax, MaskFn, MinMaxMode};
use crate::normalization::{cv_batchnorm, cv_layernorm, AffineVars, RunningStats};

pub const TOLERANCE: f64 = 1e-6;
pub const STEP: f64 = 1e-6;
pub const MARGIN: f64 = 1e-3;
pub const DEFAULT_POINTS: usize = 10;

pub const MODULES: &[&str] = &["layers", "activations", "masks", "normalization", "attention", "manifold", "losses"];

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub module: &'static str,
    pub op: String,
    pub points: usize,
    /// Largest relative error over all points and inputs.
    pub worst: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.worst <= TOLERANCE
    }
}

type Instance = Box<dyn Fn(&mut ChaCha8Rng) -> Result<f64>>;
type UnaryOp = fn(&Var) -> Result<Var>;

struct Case {
    module: &'static str,
    op: String,
    run: Instance,
}

fn case(module: &'static str, op: impl Into<String>, run: impl Fn(&mut ChaCha8Rng) -> Result<f64> + 'static) -> Case {
    Case { module, op: op.into(), run: Box::new(run) }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// Standard complex normal entries with both parts at least `MARGIN` from 0.
fn interior(shape: &[usize], rng: &mut ChaCha8Rng) -> CTensor {
    let n: usize = shape.iter().product();
    let mut draw = || loop {
        let v = normal(rng);
        if v.abs() >= MARGIN {
            return v;
        }
    };
    let re = (0..n).map(|_| draw()).collect();
    let im = (0..n).map(|_| draw()).collect();
    CTensor::new(shape, re, im).expect("consistent shape")
}

fn real_interior(shape: &[usize], rng: &mut ChaCha8Rng) -> CTensor {
    interior(shape, rng).real_part()
}

/// Checks `Re Σ conj(p)·f(inputs)` for a fresh random probe `p`.
fn probed(inputs: Vec<CTensor>, rng: &mut ChaCha8Rng, f: impl Fn(&[Var]) -> Result<Var>) -> Result<f64> {
    let consts: Vec<Var> = inputs.iter().map(|t| Var::constant(t.clone())).collect();
    let probe = Var::constant(interior(f(&consts)?.shape(), rng).conj());
    scalar(inputs, |v| f(v)?.mul(&probe)?.real()?.sum_all())
}

/// Checks an already scalar real function.
fn scalar(inputs: Vec<CTensor>, f: impl Fn(&[Var]) -> Result<Var>) -> Result<f64> {
    Ok(finite_diff_check_many(f, &inputs, STEP)?.into_iter().fold(0.0, f64::max))
}

fn layer_cases() -> Vec<Case> {
    let mut v = vec![];
    for path in [Path::Gauss, Path::Naive] {
        v.push(case("layers", format!("linear/{path:?}").to_lowercase(), move |r| {
            let ins = vec![interior(&[3, 4], r), interior(&[5, 4], r), interior(&[5], r)];
            probed(ins, r, |x| cv_linear(&x[0], &x[1], Some(&x[2]), path))
        }));
    }
    struct ConvCase {
        name: &'static str,
        n: usize,
        kind: ConvKind,
        x: &'static [usize],
        w: &'static [usize],
        spec: fn() -> ConvSpec,
    }
    let convs = [
        ConvCase { name: "conv1d", n: 1, kind: ConvKind::Forward, x: &[2, 2, 7], w: &[3, 2, 3], spec: || ConvSpec::uniform(1, 2, 1, 1) },
        ConvCase {
            name: "conv2d",
            n: 2,
            kind: ConvKind::Forward,
            x: &[1, 2, 5, 6],
            w: &[2, 2, 2, 3],
            spec: || ConvSpec { stride: vec![1, 2], padding: vec![1, 0], dilation: vec![2, 1], transposed: false, output_padding: vec![0, 0] },
        },
        ConvCase { name: "conv3d", n: 3, kind: ConvKind::Forward, x: &[1, 1, 4, 4, 3], w: &[2, 1, 2, 2, 2], spec: || ConvSpec::identity(3) },
        ConvCase {
            name: "conv_transpose1d",
            n: 1,
            kind: ConvKind::Transposed,
            x: &[1, 2, 4],
            w: &[2, 3, 3],
            spec: || ConvSpec::uniform(1, 2, 1, 1).transposed(1),
        },
        ConvCase {
            name: "conv_transpose2d",
            n: 2,
            kind: ConvKind::Transposed,
            x: &[1, 2, 3, 3],
            w: &[2, 1, 2, 3],
            spec: || ConvSpec::uniform(2, 2, 0, 1).transposed(0),
        },
    ];
    for c in convs {
        for path in [Path::Gauss, Path::Naive] {
            let ConvCase { name, n, kind, x, w, spec } = c;
            let out_ch = if kind == ConvKind::Forward { w[0] } else { w[1] };
            v.push(case("layers", format!("{name}/{path:?}").to_lowercase(), move |r| {
                let ins = vec![interior(x, r), interior(w, r), interior(&[out_ch], r)];
                let spec = spec();
                probed(ins, r, |z| z[0].conv(&z[1], Some(&z[2]), n, kind, &spec, path, false))
            }));
        }
    }
    v.push(case("layers", "adaptive_avg_pool1d", |r| probed(vec![interior(&[2, 2, 7], r)], r, |z| z[0].adaptive_avg_pool(&[3]))));
    v.push(case("layers", "adaptive_avg_pool2d", |r| probed(vec![interior(&[1, 2, 5, 4], r)], r, |z| z[0].adaptive_avg_pool(&[2, 3]))));
    for mode in [MaskMode::Independent, MaskMode::Shared] {
        v.push(case("layers", format!("dropout/{mode:?}").to_lowercase(), move |r| {
            let seed: u64 = r.random();
            // the same mask on every evaluation
            probed(vec![interior(&[3, 5], r)], r, move |z| cv_dropout(&z[0], 0.4, true, mode, &mut ChaCha8Rng::seed_from_u64(seed)))
        }));
    }
    v.push(case("layers", "flatten", |r| probed(vec![interior(&[2, 3, 2], r)], r, |z| z[0].reshape(&[2, 6]))));
    v
}

fn activation_cases() -> Vec<Case> {
    let mut kinds: Vec<ActivationKind> = Vec::new();
    for name in ActivationKind::names() {
        let k = ActivationKind::from_name(name).expect("registered");
        if !kinds.contains(&k) {
            kinds.push(k);
        }
    }
    let mut v = vec![];
    for kind in kinds {
        v.push(case("activations", kind.name(), move |r| {
            let mut act = CVActivation::new(kind);
            act.c = 1.5;
            act.r = 0.7;
            let z = interior(&[4, 3], r);
            match kind {
                ActivationKind::ModReLU => {
                    let b = -r.random_range(0.1..0.8);
                    // keep |z| + b away from the threshold
                    let z = z.map(|x, y| if (x.hypot(y) + b).abs() < MARGIN { (x * 2.0, y * 2.0) } else { (x, y) });
                    probed(vec![z, CTensor::scalar(b, 0.0)], r, |x| mod_relu(&x[0], &x[1]))
                }
                ActivationKind::CPReLU => {
                    let a = r.random_range(0.05..0.5);
                    probed(vec![z, CTensor::scalar(a, 0.0)], r, |x| cprelu(&x[0], &x[1]))
                }
                _ => probed(vec![z], r, |x| act.apply(&x[0], None)),
            }
        }));
    }
    v
}

fn mask_cases() -> Vec<Case> {
    let ops: [(&str, UnaryOp); 6] = [
        ("cv_softmax_split", |z| cv_softmax_split(z, 1)),
        ("phase_softmax", |z| phase_softmax(z, 1)),
        ("mag_softmax", |z| mag_softmax(z, 1)),
        ("complex_ratio_mask", complex_ratio_mask),
        ("mag_minmax_norm/literal", |z| mag_minmax_norm(z, &[1], MinMaxMode::Literal)),
        ("mag_minmax_norm/magnitude", |z| mag_minmax_norm(z, &[1], MinMaxMode::Magnitude)),
    ];
    ops.into_iter().map(|(name, f)| case("masks", name, move |r| probed(vec![interior(&[3, 5], r)], r, |z| f(&z[0])))).collect()
}

fn affine_inputs(c: usize, r: &mut ChaCha8Rng) -> Vec<CTensor> {
    // positive-definite Γ is not required for differentiability
    vec![real_interior(&[c], r), real_interior(&[c], r), real_interior(&[c], r), interior(&[c], r)]
}

fn affine_vars(v: &[Var], fshape: &[usize]) -> Result<AffineVars> {
    let g = |x: &Var| x.real()?.reshape(fshape);
    Ok(AffineVars { gamma_rr: g(&v[0])?, gamma_ii: g(&v[1])?, gamma_ri: g(&v[2])?, beta: v[3].reshape(fshape)? })
}

fn normalization_cases() -> Vec<Case> {
    let mut v = vec![];
    for training in [true, false] {
        let name = if training { "batchnorm/train" } else { "batchnorm/eval" };
        v.push(case("normalization", name, move |r| {
            let mut ins = vec![interior(&[6, 3, 2], r)];
            ins.extend(affine_inputs(3, r));
            let mut running = RunningStats::new(3, 0.1);
            running.stats.mu = interior(&[3], r).scale(0.3);
            let probe_run = running.clone();
            probed(ins, r, move |x| {
                let mut st = probe_run.clone();
                cv_batchnorm(&x[0], &mut st, Some(&affine_vars(&x[1..], &[1, 3, 1])?), training, 1e-5)
            })
        }));
    }
    v.push(case("normalization", "batchnorm/no_affine", |r| {
        probed(vec![interior(&[8, 2], r)], r, |x| cv_batchnorm(&x[0], &mut RunningStats::new(2, 0.1), None, true, 1e-5))
    }));
    v.push(case("normalization", "layernorm", |r| {
        let mut ins = vec![interior(&[2, 3, 4], r)];
        let a = affine_inputs(4, r);
        ins.extend(a.into_iter().map(|t| t.reshape(&[4]).unwrap()));
        probed(ins, r, |x| cv_layernorm(&x[0], 1, Some(&affine_vars(&x[1..], &[4])?), 1e-5))
    }));
    v
}

fn attention_cases() -> Vec<Case> {
    let mut v = vec![];
    let masks = [MaskFn::CVSoftMax, MaskFn::PhaseSoftMax, MaskFn::MagSoftMax, MaskFn::ComplexRatioMask, MaskFn::MagMinMaxNorm];
    for mask_fn in masks {
        for transpose in [TransposeMode::Plain, TransposeMode::Hermitian] {
            let cfg = AttentionConfig { mask_fn, transpose, ..Default::default() };
            v.push(case("attention", format!("sdpa/{mask_fn:?}/{transpose:?}").to_lowercase(), move |r| {
                let ins = vec![interior(&[2, 3, 4], r), interior(&[2, 5, 4], r), interior(&[2, 5, 3], r)];
                probed(ins, r, |x| cv_sdpa(&x[0], &x[1], &x[2], &cfg))
            }));
        }
    }
    v.push(case("attention", "multihead", |r| {
        let mut ins = vec![interior(&[2, 3, 4], r), interior(&[2, 3, 4], r), interior(&[2, 3, 4], r)];
        for _ in 0..4 {
            ins.push(interior(&[4, 4], r).scale(0.5));
            ins.push(interior(&[4], r));
        }
        let cfg = AttentionConfig::default();
        probed(ins, r, |x| {
            let proj = Projections { q: (&x[3], Some(&x[4])), k: (&x[5], Some(&x[6])), v: (&x[7], Some(&x[8])), out: (&x[9], Some(&x[10])) };
            cv_multihead(&x[0], &x[1], &x[2], 2, &cfg, &proj)
        })
    }));
    for mask_fn in [MaskFn::MagSoftMax, MaskFn::ComplexRatioMask] {
        v.push(case("attention", format!("eca/{mask_fn:?}").to_lowercase(), move |r| {
            probed(vec![interior(&[2, 4, 3], r), interior(&[1, 1, 3], r)], r, |x| cv_eca(&x[0], &x[1], mask_fn, Path::Gauss))
        }));
    }
    v.push(case("attention", "mca", |r| {
        let ins = vec![interior(&[2, 4, 3, 2], r), interior(&[2, 4, 1, 1], r), interior(&[2], r), interior(&[4, 2, 1, 1], r), interior(&[4], r)];
        probed(ins, r, |x| {
            let down = PointConv { weight: &x[1], bias: Some(&x[2]) };
            let up = PointConv { weight: &x[3], bias: Some(&x[4]) };
            cv_mca(&x[0], 2, down, up, crate::activations::cardioid, MaskFn::ComplexRatioMask, Path::Gauss)
        })
    }));
    v
}

fn manifold_cases() -> Vec<Case> {
    let mut v = vec![];
    for scope in [ConvexScope::OutputChannel, ConvexScope::Kernel] {
        v.push(case("manifold", format!("wfm_conv1d/{scope:?}").to_lowercase(), move |r| {
            let ins = vec![real_interior(&[2, 2, 3], r), interior(&[1, 2, 6], r)];
            probed(ins, r, |x| wfm_conv(1, &x[0], None, &x[1], &ConvSpec::uniform(1, 1, 1, 1), scope))
        }));
    }
    v.push(case("manifold", "wfm_conv2d", |r| {
        let ins = vec![real_interior(&[2, 1, 2, 2], r), interior(&[1, 1, 4, 3], r)];
        probed(ins, r, |x| wfm_conv(2, &x[0], None, &x[1], &ConvSpec::uniform(2, 2, 0, 1), ConvexScope::OutputChannel))
    }));
    v
}

/// Redraws `y` where `|x − y|` would sit on an L1 or polar kink.
fn away_from_kinks(x: &CTensor, r: &mut ChaCha8Rng) -> CTensor {
    let n = x.numel();
    let (mut re, mut im) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let (a, b) = (x.re()[i], x.im()[i]);
        loop {
            let (c, d) = (normal(r), normal(r));
            let dphi = (angle(a, b) - angle(c, d)).rem_euclid(2.0 * PI);
            let ok = (a - c).abs() >= MARGIN
                && (b - d).abs() >= MARGIN
                && (a.hypot(b) - c.hypot(d)).abs() >= MARGIN
                && c.abs() >= MARGIN
                && d.abs() >= MARGIN
                && dphi.min(2.0 * PI - dphi) >= MARGIN
                && (dphi - PI).abs() >= MARGIN;
            if ok {
                re.push(c);
                im.push(d);
                break;
            }
        }
    }
    CTensor::new(x.shape(), re, im).expect("consistent shape")
}

fn loss_cases() -> Vec<Case> {
    let mut v = vec![];
    for base in [RealLoss::L1, RealLoss::MSE] {
        v.push(case("losses", format!("split/{base:?}"), move |r| {
            let x = interior(&[3, 4], r);
            let y = away_from_kinks(&x, r);
            scalar(vec![x, y], |z| split_loss(base, &z[0], &z[1]))
        }));
        v.push(case("losses", format!("polar/{base:?}"), move |r| {
            let x = interior(&[3, 4], r);
            let y = away_from_kinks(&x, r);
            scalar(vec![x, y], |z| polar_loss(base, base, 1.0, 0.5, &z[0], &z[1]))
        }));
    }
    v.push(case("losses", "split/SSIM", |r| {
        let x = interior(&[1, 11, 12], r);
        let y = interior(&[1, 11, 12], r);
        scalar(vec![x, y], |z| split_loss(RealLoss::SSIM, &z[0], &z[1]))
    }));
    for kind in [PointwiseLoss::Quad, PointwiseLoss::FourthPow, PointwiseLoss::Cauchy, PointwiseLoss::LogCosh, PointwiseLoss::Log] {
        v.push(case("losses", format!("pointwise/{kind:?}"), move |r| {
            let x = interior(&[3, 4], r);
            let y = away_from_kinks(&x, r);
            scalar(vec![x, y], |z| pointwise_loss(kind, 0.8, &z[0], &z[1]))
        }));
    }
    v
}

fn all_cases() -> Vec<Case> {
    let mut v = layer_cases();
    v.extend(activation_cases());
    v.extend(mask_cases());
    v.extend(normalization_cases());
    v.extend(attention_cases());
    v.extend(manifold_cases());
    v.extend(loss_cases());
    v
}

/// Canonical module name, accepting `masks_softmax` for `masks`.
pub fn resolve_module(name: &str) -> Result<&'static str> {
    let name = if name == "masks_softmax" { "masks" } else { name };
    MODULES
        .iter()
        .find(|m| **m == name)
        .copied()
        .ok_or_else(|| Error::Config(format!("unknown module `{name}`, expected one of {MODULES:?}")))
}

/// Runs every case (or those of one module) at `points` instances each.
/// `on_result` sees each result as it completes.
pub fn run_suite(module: Option<&str>, points: usize, seed: u64, mut on_result: impl FnMut(&CheckResult)) -> Result<Vec<CheckResult>> {
    let only = module.map(resolve_module).transpose()?;
    let mut out = vec![];
    for (i, c) in all_cases().into_iter().enumerate() {
        if only.is_some_and(|m| m != c.module) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut worst: f64 = 0.0;
        for _ in 0..points {
            let e = (c.run)(&mut rng).map_err(|e| Error::invalid(format!("{}/{}: {e}", c.module, c.op)))?;
            // NaN must fail the check, not vanish in a max
            worst = if e.is_nan() { f64::INFINITY } else { worst.max(e) };
        }
        let res = CheckResult { module: c.module, op: c.op, points, worst };
        on_result(&res);
        out.push(res);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn module_names_resolve() {
        assert_eq!(resolve_module("masks_softmax").unwrap(), "masks");
        assert!(resolve_module("ctensor").is_err());
    }

    #[test]
    fn every_module_has_cases() {
        let cases = all_cases();
        for m in MODULES {
            assert!(cases.iter().any(|c| c.module == *m), "{m}");
        }
    }

    #[test]
    fn suite_within_tolerance() {
        let res = run_suite(None, 3, 1, |_| {}).unwrap();
        assert_eq!(res.len(), all_cases().len());
        for r in &res {
            assert!(r.passed(), "{}/{}: {}", r.module, r.op, r.worst);
        }
        assert!(run_suite(Some("manifold"), 1, 1, |_| {}).unwrap().iter().all(|r| r.module == "manifold"));
    }

    #[test]
    fn interior_points_avoid_the_axes() {
        let t = interior(&[1000], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(t.re().iter().chain(t.im()).all(|v| v.abs() >= MARGIN));
    }
}
