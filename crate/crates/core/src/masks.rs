//! Complex softmax variants and masking functions, used standalone and as
//! the mask inside attention.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Pointwise, Var};
use crate::error::{Error, Result};
use crate::module::{Ctx, Module};

/// `z/|z|` elementwise, with `0 ↦ 0`.
pub fn unit_phase(z: &Var) -> Result<Var> {
    z.map("unit_phase", |x, y| {
        let r = x.hypot(y);
        if r == 0.0 {
            return Pointwise::default();
        }
        let r3 = r * r * r;
        Pointwise {
            u: x / r,
            v: y / r,
            du_dx: y * y / r3,
            du_dy: -x * y / r3,
            dv_dx: -x * y / r3,
            dv_dy: x * x / r3,
        }
    })
}

fn check_axis(z: &Var, axis: usize) -> Result<()> {
    if axis >= z.rank() {
        return Err(Error::Axis { axis, rank: z.rank() });
    }
    Ok(())
}

/// `SoftMax(x) + j·SoftMax(y)` along `axis`.
pub fn cv_softmax_split(z: &Var, axis: usize) -> Result<Var> {
    check_axis(z, axis)?;
    let re = z.real()?.softmax_re(axis)?;
    let im = z.imag()?.softmax_re(axis)?;
    Var::complex(&re, &im)
}

/// `SoftMax(|z|) ⊙ z/|z|`.
pub fn phase_softmax(z: &Var, axis: usize) -> Result<Var> {
    check_axis(z, axis)?;
    z.abs()?.softmax_re(axis)?.mul(&unit_phase(z)?)
}

/// `SoftMax(|z|)`, a real result.
pub fn mag_softmax(z: &Var, axis: usize) -> Result<Var> {
    check_axis(z, axis)?;
    z.abs()?.softmax_re(axis)
}

/// `σ(|z|) ⊙ z/|z|`.
pub fn complex_ratio_mask(z: &Var) -> Result<Var> {
    let s = z.abs()?.map_real("sigmoid", crate::activations::sigmoid_fn)?;
    s.mul(&unit_phase(z)?)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MinMaxMode {
    /// `(z − min|z|)/(max|z| − min|z|)`: a real shift of complex data.
    #[default]
    Literal,
    /// `(|z| − min)/(max − min) · z/|z|`: rescales magnitudes, keeps phases.
    Magnitude,
}

/// Min-max normalization by the extrema of `|z|` over `axes`.
pub fn mag_minmax_norm(z: &Var, axes: &[usize], mode: MinMaxMode) -> Result<Var> {
    z.value().check_axes(axes)?;
    let lo = z.magnitude_extremum(axes, true, false)?;
    let hi = z.magnitude_extremum(axes, true, true)?;
    if lo.value().re().iter().zip(hi.value().re()).any(|(a, b)| a == b) {
        return Err(Error::ConstantMagnitude);
    }
    let range = hi.sub(&lo)?;
    match mode {
        MinMaxMode::Literal => z.sub(&lo)?.div(&range),
        MinMaxMode::Magnitude => z.abs()?.sub(&lo)?.div(&range)?.mul(&unit_phase(z)?),
    }
}

/// A masking function `M(·)`, applied along one axis.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskFn {
    #[serde(rename = "CVSoftMax")]
    CVSoftMax,
    #[serde(rename = "PhaseSoftMax")]
    PhaseSoftMax,
    #[default]
    #[serde(rename = "MagSoftMax")]
    MagSoftMax,
    #[serde(rename = "ComplexRatioMask")]
    ComplexRatioMask,
    #[serde(rename = "MagMinMaxNorm")]
    MagMinMaxNorm,
    #[serde(rename = "Identity")]
    Identity,
}

impl MaskFn {
    pub fn from_name(name: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string())).ok()
    }

    pub fn apply(self, z: &Var, axis: usize) -> Result<Var> {
        match self {
            MaskFn::CVSoftMax => cv_softmax_split(z, axis),
            MaskFn::PhaseSoftMax => phase_softmax(z, axis),
            MaskFn::MagSoftMax => mag_softmax(z, axis),
            MaskFn::ComplexRatioMask => complex_ratio_mask(z),
            MaskFn::MagMinMaxNorm => mag_minmax_norm(z, &[axis], MinMaxMode::Literal),
            MaskFn::Identity => Ok(z.clone()),
        }
    }
}

/// A mask as a network layer. `axis` may be negative (counted from the end).
pub struct MaskLayer {
    pub mask: MaskFn,
    pub axis: isize,
    pub minmax_mode: MinMaxMode,
}

impl MaskLayer {
    pub fn resolve_axis(&self, rank: usize) -> Result<usize> {
        let a = if self.axis < 0 { rank as isize + self.axis } else { self.axis };
        if a < 0 || a as usize >= rank {
            return Err(Error::Axis { axis: self.axis.unsigned_abs(), rank });
        }
        Ok(a as usize)
    }
}

impl Module for MaskLayer {
    fn forward(&mut self, _ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let axis = self.resolve_axis(x.rank())?;
        match self.mask {
            MaskFn::MagMinMaxNorm => mag_minmax_norm(x, &[axis], self.minmax_mode),
            m => m.apply(x, axis),
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
    use crate::ctensor::{angle, CTensor};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn v(values: &[(f64, f64)]) -> Var {
        Var::constant(CTensor::from_pairs(&[values.len()], values).unwrap())
    }

    fn pairs(z: &Var) -> Vec<(f64, f64)> {
        z.value().re().iter().copied().zip(z.value().im().iter().copied()).collect()
    }

    fn close(a: &[(f64, f64)], b: &[(f64, f64)], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(p, q)| (p.0 - q.0).abs() <= tol && (p.1 - q.1).abs() <= tol)
    }

    #[test]
    fn split_softmax_examples() {
        assert_eq!(pairs(&cv_softmax_split(&v(&[(0.0, 0.0), (0.0, 0.0)]), 0).unwrap()), vec![(0.5, 0.5); 2]);
        let ln2 = 2f64.ln();
        let out = cv_softmax_split(&v(&[(ln2, 0.0), (0.0, ln2)]), 0).unwrap();
        assert!(close(&pairs(&out), &[(2.0 / 3.0, 1.0 / 3.0), (1.0 / 3.0, 2.0 / 3.0)], 1e-15));
        assert!(matches!(cv_softmax_split(&v(&[(0.0, 0.0)]), 1), Err(Error::Axis { .. })));
    }

    #[test]
    fn phase_softmax_examples() {
        let out = phase_softmax(&v(&[(0.0, 2.0), (0.0, 2.0)]), 0).unwrap();
        assert!(close(&pairs(&out), &[(0.0, 0.5), (0.0, 0.5)], 1e-15));
        let out = phase_softmax(&v(&[(3.0, -4.0)]), 0).unwrap();
        assert!(close(&pairs(&out), &[(0.6, -0.8)], 1e-15));
        let out = phase_softmax(&v(&[(0.0, 0.0), (1.0, 0.0)]), 0).unwrap();
        assert_eq!(pairs(&out)[0], (0.0, 0.0));
    }

    #[test]
    fn mag_softmax_examples() {
        assert_eq!(pairs(&mag_softmax(&v(&[(1.0, 0.0), (0.0, 1.0)]), 0).unwrap()), vec![(0.5, 0.0); 2]);
        assert_eq!(pairs(&mag_softmax(&v(&[(3.0, 4.0)]), 0).unwrap()), vec![(1.0, 0.0)]);
    }

    #[test]
    fn ratio_mask_examples() {
        assert_eq!(pairs(&complex_ratio_mask(&v(&[(0.0, 0.0)])).unwrap()), vec![(0.0, 0.0)]);
        let s1 = 1.0 / (1.0 + (-1f64).exp());
        assert!(close(&pairs(&complex_ratio_mask(&v(&[(1.0, 0.0)])).unwrap()), &[(s1, 0.0)], 1e-15));
        let t = 0.7f64;
        let out = pairs(&complex_ratio_mask(&v(&[(50.0 * t.cos(), 50.0 * t.sin())])).unwrap())[0];
        assert!((out.0.hypot(out.1) - 1.0).abs() <= 1e-12);
        assert!((angle(out.0, out.1) - t).abs() <= 1e-12);
    }

    #[test]
    fn minmax_examples() {
        let out = mag_minmax_norm(&v(&[(0.0, 0.0), (2.0, 0.0)]), &[0], MinMaxMode::Literal).unwrap();
        assert_eq!(pairs(&out), vec![(0.0, 0.0), (1.0, 0.0)]);
        let err = mag_minmax_norm(&v(&[(1.0, 0.0), (0.0, 1.0)]), &[0], MinMaxMode::Literal).unwrap_err();
        assert!(matches!(err, Error::ConstantMagnitude));
        assert_eq!(err.to_string(), "constant magnitude input");
        let out = mag_minmax_norm(&v(&[(0.0, 1.0), (0.0, 2.0)]), &[0], MinMaxMode::Literal).unwrap();
        assert_eq!(pairs(&out), vec![(-1.0, 1.0), (-1.0, 2.0)]);
        let out = mag_minmax_norm(&v(&[(0.0, 1.0), (0.0, 2.0)]), &[0], MinMaxMode::Magnitude).unwrap();
        assert_eq!(pairs(&out), vec![(0.0, 0.0), (0.0, 1.0)]);
    }

    #[test]
    fn normalization_on_random_rows() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let z = Var::constant(CTensor::randn(&[3, 17], 1.5, &mut r));
        let split = cv_softmax_split(&z, 1).unwrap();
        let sr = split.value().sum(&[1]).unwrap();
        for i in 0..3 {
            let (a, b) = sr.get(&[i]).unwrap();
            assert!((a - 1.0).abs() <= 1e-12 && (b - 1.0).abs() <= 1e-12);
        }
        let ps = phase_softmax(&z, 1).unwrap();
        let ms = mag_softmax(&z, 1).unwrap();
        assert!(ms.value().im().iter().all(|&v| v == 0.0));
        assert!(ms.value().re().iter().all(|&v| v >= 0.0));
        for i in 0..3 {
            let mut tot = 0.0;
            let mut mtot = 0.0;
            for j in 0..17 {
                let (a, b) = ps.value().get(&[i, j]).unwrap();
                let (x, y) = z.value().get(&[i, j]).unwrap();
                tot += a.hypot(b);
                mtot += ms.value().get(&[i, j]).unwrap().0;
                assert!((angle(a, b) - angle(x, y)).abs() <= 1e-12);
            }
            assert!((tot - 1.0).abs() <= 1e-12 && (mtot - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn mask_gradients() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let z0 = CTensor::randn(&[2, 5], 1.0, &mut r);
        let probe = CTensor::randn(&[2, 5], 1.0, &mut r);
        let loss = |out: Var| out.mul(&Var::constant(probe.conj()))?.real()?.sum_all();
        for m in [MaskFn::CVSoftMax, MaskFn::PhaseSoftMax, MaskFn::MagSoftMax, MaskFn::ComplexRatioMask, MaskFn::MagMinMaxNorm] {
            let e = finite_diff_check(|z| loss(m.apply(z, 1)?), &z0, 1e-6).unwrap();
            assert!(e <= 1e-6, "{m:?}: {e}");
        }
        let e = finite_diff_check(|z| loss(mag_minmax_norm(z, &[1], MinMaxMode::Magnitude)?), &z0, 1e-6).unwrap();
        assert!(e <= 1e-6);
    }

    #[test]
    fn names_round_trip() {
        for name in ["CVSoftMax", "PhaseSoftMax", "MagSoftMax", "ComplexRatioMask", "MagMinMaxNorm"] {
            assert!(MaskFn::from_name(name).is_some(), "{name}");
        }
        assert!(MaskFn::from_name("MagSoftmax").is_none());
    }

    proptest! {
        #[test]
        fn softmaxes_commute_with_permutation(
            vals in prop::collection::vec((-4.0f64..4.0, -4.0f64..4.0), 2..8),
            rot in 0usize..8,
        ) {
            let n = vals.len();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let permuted: Vec<(f64, f64)> = perm.iter().map(|&i| vals[i]).collect();
            for m in [MaskFn::CVSoftMax, MaskFn::PhaseSoftMax, MaskFn::MagSoftMax] {
                let a = pairs(&m.apply(&v(&vals), 0).unwrap());
                let b = pairs(&m.apply(&v(&permuted), 0).unwrap());
                let a_perm: Vec<(f64, f64)> = perm.iter().map(|&i| a[i]).collect();
                prop_assert!(close(&a_perm, &b, 1e-14));
            }
        }

        #[test]
        fn ratio_mask_keeps_phase(r in 1e-3f64..20.0, t in -3.1f64..3.1) {
            let out = pairs(&complex_ratio_mask(&v(&[(r * t.cos(), r * t.sin())])).unwrap())[0];
            prop_assert!((angle(out.0, out.1) - t).abs() <= 1e-12);
            let m = out.0.hypot(out.1);
            prop_assert!(m > 0.5 && m < 1.0 + 1e-15);
        }
    }
}
