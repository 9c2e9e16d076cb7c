//! Synthetic complex-signal datasets.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::{DataConfig, Task};
use crate::ctensor::CTensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    /// Class `k` is the tone `exp(j·2π·f_k·n/N)` plus circular Gaussian
    /// noise; `snr_db = None` means no noise.
    ClassifyTones { n_classes: usize, length: usize, snr_db: Option<f64> },
    /// Clean target: a normalized sum of `n_tones` random tones. Input:
    /// target plus circular Gaussian noise with `E|n|² = noise_sigma²`.
    Denoise { length: usize, noise_sigma: f64, n_tones: usize },
}

impl DatasetSpec {
    pub fn from_config(task: Task, d: &DataConfig) -> Self {
        match task {
            Task::ClassifyTones => DatasetSpec::ClassifyTones { n_classes: d.n_classes, length: d.length, snr_db: d.snr_db },
            Task::Denoise => DatasetSpec::Denoise { length: d.length, noise_sigma: d.noise_sigma, n_tones: d.n_tones },
        }
    }

    pub fn length(&self) -> usize {
        match *self {
            DatasetSpec::ClassifyTones { length, .. } | DatasetSpec::Denoise { length, .. } => length,
        }
    }
}

/// Inputs are `[samples, 1, length]`. Targets are one-hot `[samples,
/// n_classes]` for classification and clean signals shaped like the inputs
/// for denoising; `labels` is empty for denoising.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: CTensor,
    pub targets: CTensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The samples at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            inputs: self.inputs.index_select(idx)?,
            targets: self.targets.index_select(idx)?,
            labels: if self.labels.is_empty() { Vec::new() } else { idx.iter().map(|&i| self.labels[i]).collect() },
        })
    }
}

/// Cycles per window of the class-`k` tone: odd multiples of `N/(4C)`,
/// evenly spread over the lower half of the band.
pub fn tone_frequency(k: usize, n_classes: usize, length: usize) -> f64 {
    (2 * k + 1) as f64 * length as f64 / (4 * n_classes) as f64
}

/// Noise variance `E|n|²` for unit-power signals at the given SNR.
pub fn noise_variance(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

fn circular_noise<R: Rng>(rng: &mut R, variance: f64) -> (f64, f64) {
    let s = (variance / 2.0).sqrt();
    let x: f64 = rng.sample(StandardNormal);
    let y: f64 = rng.sample(StandardNormal);
    (s * x, s * y)
}

/// Draws `samples` examples; the same `(spec, samples, seed)` always gives
/// the same tensors. Classes cycle `0, 1, .., C−1, 0, ..`.
pub fn gen_synthetic(spec: &DatasetSpec, samples: usize, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.length();
    if n == 0 || samples == 0 {
        return Err(Error::Config("dataset length and sample count must be positive".into()));
    }
    let mut re = Vec::with_capacity(samples * n);
    let mut im = Vec::with_capacity(samples * n);
    match *spec {
        DatasetSpec::ClassifyTones { n_classes, snr_db, .. } => {
            let var = snr_db.map(noise_variance);
            let mut t = vec![0.0; samples * n_classes];
            let mut labels = Vec::with_capacity(samples);
            for s in 0..samples {
                let k = s % n_classes;
                labels.push(k);
                t[s * n_classes + k] = 1.0;
                let f = tone_frequency(k, n_classes, n);
                for i in 0..n {
                    let ph = 2.0 * PI * f * i as f64 / n as f64;
                    let (nx, ny) = var.map_or((0.0, 0.0), |v| circular_noise(&mut rng, v));
                    re.push(ph.cos() + nx);
                    im.push(ph.sin() + ny);
                }
            }
            Ok(Dataset {
                inputs: CTensor::new(&[samples, 1, n], re, im)?,
                targets: CTensor::from_real(&[samples, n_classes], t)?,
                labels,
            })
        }
        DatasetSpec::Denoise { noise_sigma, n_tones, .. } => {
            let (mut tre, mut tim) = (Vec::with_capacity(samples * n), Vec::with_capacity(samples * n));
            let max_f = (n / 8).max(1);
            for _ in 0..samples {
                let tones: Vec<(f64, f64, f64)> = (0..n_tones)
                    .map(|_| (rng.random_range(1..=max_f) as f64, rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI)))
                    .collect();
                let norm = tones.iter().map(|t| t.1 * t.1).sum::<f64>().sqrt();
                for i in 0..n {
                    let (mut x, mut y) = (0.0, 0.0);
                    for &(f, a, p) in &tones {
                        let ph = 2.0 * PI * f * i as f64 / n as f64 + p;
                        x += a * ph.cos() / norm;
                        y += a * ph.sin() / norm;
                    }
                    let (nx, ny) = circular_noise(&mut rng, noise_sigma * noise_sigma);
                    tre.push(x);
                    tim.push(y);
                    re.push(x + nx);
                    im.push(y + ny);
                }
            }
            Ok(Dataset {
                inputs: CTensor::new(&[samples, 1, n], re, im)?,
                targets: CTensor::new(&[samples, 1, n], tre, tim)?,
                labels: Vec::new(),
            })
        }
    }
}
