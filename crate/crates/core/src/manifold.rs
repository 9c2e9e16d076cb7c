//! Weighted Fréchet mean (wFM) convolution on the Euclidean manifold: a
//! convolution whose real weights form convex combinations, so the layer
//! commutes with complex scaling `z ↦ s·e^{jφ}·z`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Var};
use crate::ctensor::CTensor;
use crate::cvops::{ConvKind, ConvSpec, Path};
use crate::error::{Error, Result};
use crate::module::{Ctx, Module};

/// Which group of weights is normalized to sum to one.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvexScope {
    /// Each output channel, over all input channels and kernel taps.
    #[default]
    OutputChannel,
    /// Each `(output, input)` kernel separately.
    Kernel,
}

/// Softmax reparameterization of unconstrained real weights
/// `[out, in, k..]`. Only the real part of `raw` is used.
pub fn convex_reparam(raw: &Var, scope: ConvexScope) -> Result<Var> {
    if raw.rank() < 3 {
        return Err(Error::shape(format!("wFM weights must be [out, in, k..], got {:?}", raw.shape())));
    }
    let shape = raw.shape().to_vec();
    let groups = match scope {
        ConvexScope::OutputChannel => shape[0],
        ConvexScope::Kernel => shape[0] * shape[1],
    };
    let per = raw.value().numel() / groups;
    raw.reshape(&[groups, per])?.softmax_re(1)?.reshape(&shape)
}

/// `n`-d (n ∈ {1, 2}) convolution with convex weights and no bias.
pub fn wfm_conv(n: usize, raw: &Var, bias: Option<&Var>, z: &Var, spec: &ConvSpec, scope: ConvexScope) -> Result<Var> {
    if bias.is_some() {
        return Err(Error::invalid("wFM convolution does not take a bias"));
    }
    if !(1..=2).contains(&n) {
        return Err(Error::invalid(format!("wFM convolution is 1-d or 2-d, not {n}-d")));
    }
    let w = convex_reparam(raw, scope)?;
    z.conv(&w, None, n, ConvKind::Forward, spec, Path::Naive, true)
}

pub struct WFMConv {
    pub n: usize,
    pub raw: Parameter,
    pub spec: ConvSpec,
    pub scope: ConvexScope,
}

impl WFMConv {
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: &[usize],
        spec: ConvSpec,
        rng: &mut R,
    ) -> Result<Self> {
        if !(1..=2).contains(&n) || kernel.len() != n || kernel.contains(&0) {
            return Err(Error::invalid(format!("wFM convolution with kernel {kernel:?} in {n}-d")));
        }
        spec.validate(n)?;
        let mut shape = vec![out_ch, in_ch];
        shape.extend_from_slice(kernel);
        // small random logits break the symmetry between output channels
        let raw = CTensor::randn(&shape, 0.5, rng).real_part();
        Ok(WFMConv { n, raw: Parameter::new(raw), spec, scope: ConvexScope::OutputChannel })
    }

    /// The convex weights currently in effect.
    pub fn weights(&self) -> Result<CTensor> {
        Ok(convex_reparam(&Var::constant(self.raw.value.clone()), self.scope)?.into_value())
    }
}

impl Module for WFMConv {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let raw = ctx.param(&self.raw);
        wfm_conv(self.n, &raw, None, x, &self.spec, self.scope)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("raw", &mut self.raw);
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(crate::cvops::conv_geometry(self.n, self.raw.value.shape(), input, &self.spec)?.1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use std::f64::consts::PI;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn k(t: &CTensor) -> Var {
        Var::constant(t.clone())
    }

    #[test]
    fn reparam_examples() {
        let w = convex_reparam(&k(&CTensor::zeros(&[1, 2, 3])), ConvexScope::OutputChannel).unwrap();
        assert!(w.value().re().iter().all(|&v| (v - 1.0 / 6.0).abs() < 1e-16));
        let raw = CTensor::from_real(&[1, 1, 2], vec![2f64.ln(), 0.0]).unwrap();
        let w = convex_reparam(&k(&raw), ConvexScope::OutputChannel).unwrap();
        assert!((w.value().re()[0] - 2.0 / 3.0).abs() < 1e-15 && (w.value().re()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn reparam_sums_to_one() {
        let mut r = rng(1);
        let raw = CTensor::randn(&[3, 4, 5], 3.0, &mut r);
        let w = convex_reparam(&k(&raw), ConvexScope::OutputChannel).unwrap();
        for o in 0..3 {
            let s: f64 = w.value().narrow(0, o, 1).unwrap().re().iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
        }
        assert!(w.value().re().iter().all(|&v| v > 0.0));
        let w = convex_reparam(&k(&raw), ConvexScope::Kernel).unwrap();
        let sums = w.value().sum(&[2]).unwrap();
        assert!(sums.re().iter().all(|&s| (s - 1.0).abs() <= 1e-12));
    }

    #[test]
    fn constant_input_is_a_fixed_point() {
        let mut r = rng(2);
        let layer = WFMConv::new(2, 3, 2, &[3, 3], ConvSpec::uniform(2, 2, 0, 1), &mut r).unwrap();
        let z = CTensor::full(&[2, 3, 7, 7], -1.5, 0.75);
        let out = wfm_conv(2, &k(&layer.raw.value), None, &k(&z), &layer.spec, layer.scope).unwrap();
        assert!(out.value().re().iter().all(|&v| (v + 1.5).abs() <= 1e-14));
        assert!(out.value().im().iter().all(|&v| (v - 0.75).abs() <= 1e-14));
    }

    #[test]
    fn bias_is_rejected() {
        let raw = k(&CTensor::zeros(&[1, 1, 3]));
        let z = k(&CTensor::zeros(&[1, 1, 5]));
        let b = k(&CTensor::zeros(&[1]));
        assert!(wfm_conv(1, &raw, Some(&b), &z, &ConvSpec::identity(1), ConvexScope::OutputChannel).is_err());
        assert!(wfm_conv(3, &k(&CTensor::zeros(&[1, 1, 1, 1, 1])), None, &k(&CTensor::zeros(&[1, 1, 2, 2, 2])), &ConvSpec::identity(3), ConvexScope::OutputChannel).is_err());
    }

    #[test]
    fn matches_weighted_mean_loop() {
        let mut r = rng(3);
        let raw = CTensor::randn(&[2, 3, 4], 1.0, &mut r).real_part();
        let z = CTensor::randn(&[1, 3, 9], 1.0, &mut r);
        let spec = ConvSpec::uniform(1, 2, 1, 1);
        let out = wfm_conv(1, &k(&raw), None, &k(&z), &spec, ConvexScope::OutputChannel).unwrap();
        // oracle: explicit softmax, explicit padded sliding window
        for o in 0..2 {
            let logits: Vec<f64> = raw.narrow(0, o, 1).unwrap().re().to_vec();
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let tot: f64 = e.iter().sum();
            for t in 0..out.shape()[2] {
                let (mut sr, mut si) = (0.0, 0.0);
                for i in 0..3 {
                    for kk in 0..4 {
                        let pos = (2 * t + kk) as isize - 1;
                        if (0..9).contains(&pos) {
                            let w = e[i * 4 + kk] / tot;
                            let (x, y) = z.get(&[0, i, pos as usize]).unwrap();
                            sr += w * x;
                            si += w * y;
                        }
                    }
                }
                let (gr, gi) = out.value().get(&[0, o, t]).unwrap();
                assert!((gr - sr).abs() <= 1e-13 && (gi - si).abs() <= 1e-13);
            }
        }
    }

    #[test]
    fn raw_weights_receive_gradients() {
        let mut r = rng(4);
        let raw = CTensor::randn(&[2, 2, 3, 2], 1.0, &mut r).real_part();
        let z = CTensor::randn(&[2, 2, 5, 4], 1.0, &mut r);
        let probe = CTensor::randn(&[2, 2, 3, 3], 1.0, &mut r);
        let spec = ConvSpec::identity(2);
        let e = finite_diff_check(
            |w| wfm_conv(2, w, None, &k(&z), &spec, ConvexScope::OutputChannel)?.mul(&k(&probe.conj()))?.real()?.sum_all(),
            &raw,
            1e-6,
        )
        .unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    proptest! {
        #[test]
        fn commutes_with_complex_scaling(s in 0.01f64..100.0, phi in -PI..PI, seed in 0u64..1000) {
            let mut r = rng(seed);
            let raw = CTensor::randn(&[2, 2, 3], 1.0, &mut r).real_part();
            let z = CTensor::randn(&[1, 2, 8], 1.0, &mut r);
            let alpha = CTensor::scalar(s * phi.cos(), s * phi.sin());
            let spec = ConvSpec::identity(1);
            let a = wfm_conv(1, &k(&raw), None, &k(&z.mul(&alpha).unwrap()), &spec, ConvexScope::OutputChannel).unwrap();
            let b = wfm_conv(1, &k(&raw), None, &k(&z), &spec, ConvexScope::OutputChannel).unwrap().value().mul(&alpha).unwrap();
            prop_assert!(a.value().max_abs_diff(&b).unwrap() <= 1e-12 * s.max(1.0));
        }

        #[test]
        fn output_bounded_by_receptive_field(seed in 0u64..1000) {
            let mut r = rng(seed);
            let raw = CTensor::randn(&[1, 2, 3], 2.0, &mut r).real_part();
            let z = CTensor::randn(&[1, 2, 6], 1.0, &mut r);
            let out = wfm_conv(1, &k(&raw), None, &k(&z), &ConvSpec::identity(1), ConvexScope::OutputChannel).unwrap();
            for t in 0..4 {
                let mut bound: f64 = 0.0;
                for i in 0..2 {
                    for kk in 0..3 {
                        let (x, y) = z.get(&[0, i, t + kk]).unwrap();
                        bound = bound.max(x.hypot(y));
                    }
                }
                let (a, b) = out.value().get(&[0, 0, t]).unwrap();
                prop_assert!(a.hypot(b) <= bound + 1e-12);
            }
        }
    }
}
