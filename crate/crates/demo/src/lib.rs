//! WebAssembly bindings for the demo page in `www/`.
//!
//! Each exported function has a plain Rust counterpart (`*_values`) so the
//! numerics can be tested natively; the wrappers only translate errors.

use cvnn::activations::{ActivationKind, CVActivation};
use cvnn::cvops::matmul_counted;
use cvnn::normalization::{cv_batchnorm, RunningStats};
use cvnn::{CTensor, MulCounter, Path, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

/// Comma-separated activation names, aliases included.
#[wasm_bindgen]
pub fn activation_names() -> String {
    ActivationKind::names().collect::<Vec<_>>().join(",")
}

/// Applies activation `name` on a `grid × grid` lattice spanning
/// `[-extent, extent]²`, row-major from the top-left corner (largest
/// imaginary part first). Returns interleaved `re, im` output pairs.
///
/// `param` sets the modReLU bias or CPReLU slope and is ignored otherwise.
pub fn activation_field_values(name: &str, param: f64, extent: f64, grid: usize) -> Result<Vec<f64>, String> {
    let kind = ActivationKind::from_name(name).ok_or_else(|| format!("unknown activation `{name}`"))?;
    if grid < 2 || extent.is_nan() || extent <= 0.0 {
        return Err(format!("need grid ≥ 2 and a positive extent, got {grid} and {extent}"));
    }
    let mut act = CVActivation::new(kind);
    if act.param.is_some() {
        act = act.with_param(param).map_err(|e| e.to_string())?;
    }
    let step = 2.0 * extent / (grid - 1) as f64;
    let (mut re, mut im) = (Vec::with_capacity(grid * grid), Vec::with_capacity(grid * grid));
    for row in 0..grid {
        for col in 0..grid {
            re.push(-extent + col as f64 * step);
            im.push(extent - row as f64 * step);
        }
    }
    let z = CTensor::new(&[grid * grid], re, im).map_err(|e| e.to_string())?;
    let p = act.param.as_ref().map(|p| Var::constant(p.value.clone()));
    let out = act.apply(&Var::constant(z), p.as_ref()).map_err(|e| e.to_string())?.into_value();
    Ok(out.re().iter().zip(out.im()).flat_map(|(&x, &y)| [x, y]).collect())
}

#[wasm_bindgen]
pub fn activation_field(name: &str, param: f64, extent: f64, grid: usize) -> Result<Vec<f64>, JsError> {
    activation_field_values(name, param, extent, grid).map_err(|e| JsError::new(&e))
}

/// Draws `n` correlated complex samples, rotated by `angle`, and whitens them
/// with batch normalization. `correlation` in `(-1, 1)` couples the real and
/// imaginary parts; `ratio` is the standard deviation of the imaginary part
/// relative to the real part.
///
/// Returns `4n` values: interleaved `re, im` inputs followed by interleaved
/// outputs.
pub fn whitening_cloud_values(n: usize, correlation: f64, ratio: f64, angle: f64, seed: u64) -> Result<Vec<f64>, String> {
    if n < 2 || correlation.abs() >= 1.0 || ratio.is_nan() || ratio <= 0.0 {
        return Err(format!("need n ≥ 2, |correlation| < 1 and ratio > 0, got {n}, {correlation}, {ratio}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = CTensor::randn(&[n, 1], std::f64::consts::SQRT_2, &mut rng);
    let c = (1.0 - correlation * correlation).sqrt();
    let shaped = g.map(|a, b| (a + 1.0, ratio * (correlation * a + c * b) - 0.5));
    let z = shaped.mul(&CTensor::scalar(angle.cos(), angle.sin())).map_err(|e| e.to_string())?;
    let out = cv_batchnorm(&Var::constant(z.clone()), &mut RunningStats::new(1, 0.1), None, true, 1e-5)
        .map_err(|e| e.to_string())?
        .into_value();
    let pairs = |t: &CTensor| t.re().iter().zip(t.im()).flat_map(|(&x, &y)| [x, y]).collect::<Vec<_>>();
    let mut v = pairs(&z);
    v.extend(pairs(&out));
    Ok(v)
}

#[wasm_bindgen]
pub fn whitening_cloud(n: usize, correlation: f64, ratio: f64, angle: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    whitening_cloud_values(n, correlation, ratio, angle, seed).map_err(|e| JsError::new(&e))
}

/// Multiplies two random `size × size` complex matrices both ways.
///
/// Returns `[naive applications, naive real multiplications, gauss
/// applications, gauss real multiplications, max relative difference]`.
pub fn gauss_counts_values(size: usize, seed: u64) -> Result<Vec<f64>, String> {
    if size == 0 {
        return Err("size must be positive".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = CTensor::randn(&[size, size], 1.0, &mut rng);
    let b = CTensor::randn(&[size, size], 1.0, &mut rng);
    let (mut naive, mut gauss) = (MulCounter::default(), MulCounter::default());
    let n = matmul_counted(&a, &b, Path::Naive, &mut naive).map_err(|e| e.to_string())?;
    let g = matmul_counted(&a, &b, Path::Gauss, &mut gauss).map_err(|e| e.to_string())?;
    let diff = g.max_rel_diff(&n).map_err(|e| e.to_string())?;
    Ok(vec![naive.applications as f64, naive.real_mults as f64, gauss.applications as f64, gauss.real_mults as f64, diff])
}

#[wasm_bindgen]
pub fn gauss_counts(size: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    gauss_counts_values(size, seed).map_err(|e| JsError::new(&e))
}
