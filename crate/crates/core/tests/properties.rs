use std::f64::consts::PI;

use cvnn::cvops::{convnd, ConvKind};
use cvnn::normalization::{cv_batchnorm, RunningStats};
use cvnn::{CTensor, ConvSpec, Path, Var};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_case(seed: u64, n: usize, stride: usize, padding: usize, dilation: usize) -> (CTensor, CTensor, CTensor, ConvSpec) {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut w = vec![3, 2];
    w.extend(std::iter::repeat_n(3, n));
    let mut x = vec![2, 2];
    x.extend(std::iter::repeat_n(7, n));
    let spec = ConvSpec::uniform(n, stride, padding, dilation);
    (CTensor::randn(&w, 1.0, &mut r), CTensor::randn(&x, 1.0, &mut r), CTensor::randn(&x, 1.0, &mut r), spec)
}

/// Sample covariance entries (Vrr, Vii, Vri) of feature `f` in `[n, c]` data.
fn covariance(t: &CTensor, f: usize) -> (f64, f64, f64) {
    let c = t.shape()[1];
    let n = t.shape()[0];
    let xs: Vec<f64> = (0..n).map(|i| t.re()[i * c + f]).collect();
    let ys: Vec<f64> = (0..n).map(|i| t.im()[i * c + f]).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n as f64, ys.iter().sum::<f64>() / n as f64);
    let m = |a: &[f64], ma: f64, b: &[f64], mb: f64| a.iter().zip(b).map(|(u, v)| (u - ma) * (v - mb)).sum::<f64>() / n as f64;
    (m(&xs, mx, &xs, mx), m(&ys, my, &ys, my), m(&xs, mx, &ys, my))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_is_linear_in_the_input(seed in 0u64..10_000, n in 1usize..=3, stride in 1usize..=2, padding in 0usize..=2, dilation in 1usize..=2) {
        let (w, a, b, spec) = conv_case(seed, n, stride, padding, dilation);
        let f = |x: &CTensor| convnd(ConvKind::Forward, n, &w, None, x, &spec, Path::Gauss).unwrap();
        let lhs = f(&a.add(&b).unwrap());
        let rhs = f(&a).add(&f(&b)).unwrap();
        prop_assert!(lhs.max_rel_diff(&rhs).unwrap() <= 1e-11);
    }

    #[test]
    fn gauss_conv_matches_naive(seed in 0u64..10_000, n in 1usize..=3, stride in 1usize..=2, padding in 0usize..=2, dilation in 1usize..=2) {
        let (w, x, _, spec) = conv_case(seed, n, stride, padding, dilation);
        let g = convnd(ConvKind::Forward, n, &w, None, &x, &spec, Path::Gauss).unwrap();
        let nv = convnd(ConvKind::Forward, n, &w, None, &x, &spec, Path::Naive).unwrap();
        prop_assert!(g.max_rel_diff(&nv).unwrap() <= 1e-10);
    }

    #[test]
    fn transposed_conv_is_the_adjoint(seed in 0u64..10_000, n in 1usize..=3, padding in 0usize..=1, dilation in 1usize..=2) {
        let (w, x, _, spec) = conv_case(seed, n, 1, padding, dilation);
        let ax = convnd(ConvKind::Forward, n, &w, None, &x, &spec, Path::Gauss).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let y = CTensor::randn(ax.shape(), 1.0, &mut r);
        let aty = convnd(ConvKind::Transposed, n, &w, None, &y, &spec, Path::Gauss).unwrap();
        prop_assert_eq!(aty.shape(), x.shape());
        let (lr, li) = y.mul(&ax).unwrap().sum_all();
        let (rr, ri) = x.mul(&aty).unwrap().sum_all();
        prop_assert!((lr - rr).hypot(li - ri) <= 1e-10 * lr.hypot(li).max(1.0));
    }

    #[test]
    fn whitening_ignores_input_rotation(seed in 0u64..10_000, phi in -PI..PI) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let base = CTensor::randn(&[256, 2], 1.0, &mut r);
        // correlate the planes before rotating the whole batch
        let skew = base.zip_with(&base, |(x, y), _| (2.0 * x + 0.5, 0.7 * x + 0.3 * y - 1.0)).unwrap();
        let z = skew.mul(&CTensor::scalar(phi.cos(), phi.sin())).unwrap();
        let out = cv_batchnorm(&Var::constant(z), &mut RunningStats::new(2, 0.1), None, true, 1e-12).unwrap().into_value();
        for f in 0..2 {
            let (vrr, vii, vri) = covariance(&out, f);
            prop_assert!((vrr - 1.0).abs() <= 1e-6 && (vii - 1.0).abs() <= 1e-6 && vri.abs() <= 1e-6, "{vrr} {vii} {vri}");
        }
    }
}
