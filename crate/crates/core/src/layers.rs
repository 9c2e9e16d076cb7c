//! Parametric layers: affine maps, (transposed) convolutions, adaptive
//! average pooling and dropout.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Parameter, Var};
use crate::ctensor::CTensor;
use crate::cvops::{ConvKind, ConvSpec, Path};
use crate::error::{Error, Result};
use crate::module::{Ctx, Module};

/// Weight with independent Gaussian parts of std `1/sqrt(2·fan_in)`, so that
/// `E|w|² = 1/fan_in`.
pub fn complex_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> CTensor {
    CTensor::randn(shape, (2.0 * fan_in.max(1) as f64).sqrt().recip(), rng)
}

/// `z·Wᵀ + b` over the last axis of `z`; `weight` is `[out, in]`.
pub fn cv_linear(z: &Var, weight: &Var, bias: Option<&Var>, path: Path) -> Result<Var> {
    if weight.rank() != 2 {
        return Err(Error::shape(format!("linear weight must be rank 2, got {:?}", weight.shape())));
    }
    let (out_f, in_f) = (weight.shape()[0], weight.shape()[1]);
    if z.rank() == 0 || z.shape()[z.rank() - 1] != in_f {
        return Err(Error::shape(format!("feature mismatch: input {:?}, weight expects {in_f}", z.shape())));
    }
    let lead = z.shape()[..z.rank() - 1].to_vec();
    let rows: usize = lead.iter().product();
    let flat = z.reshape(&[rows, in_f])?;
    let mut y = flat.matmul(&weight.transpose_last2()?, path)?;
    if let Some(b) = bias {
        if b.shape() != [out_f] {
            return Err(Error::shape(format!("bias {:?} for {out_f} outputs", b.shape())));
        }
        y = y.add(b)?;
    }
    let mut shape = lead;
    shape.push(out_f);
    y.reshape(&shape)
}

pub struct CVLinear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub path: Path,
}

impl CVLinear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, bias: bool, rng: &mut R) -> Self {
        CVLinear {
            weight: Parameter::new(complex_init(&[out_features, in_features], in_features, rng)),
            bias: bias.then(|| Parameter::new(CTensor::zeros(&[out_features]))),
            path: Path::Gauss,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }
}

impl Module for CVLinear {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        cv_linear(x, &w, b.as_ref(), self.path)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            f("bias", b);
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input.last() {
            Some(&d) if d == self.in_features() => {
                let mut s = input.to_vec();
                *s.last_mut().unwrap() = self.out_features();
                Ok(s)
            }
            _ => Err(Error::shape(format!("feature mismatch: input {input:?}, layer expects {}", self.in_features()))),
        }
    }
}

/// Complex `n`-d convolution or transposed convolution.
///
/// Forward weights are `[out_ch, in_ch, k..]`; transposed weights are
/// `[in_ch, out_ch, k..]`, matching the forward layer they are the adjoint of.
pub struct CVConv {
    pub n: usize,
    pub kind: ConvKind,
    pub weight: Parameter,
    pub bias: Option<Parameter>,
    pub spec: ConvSpec,
    pub path: Path,
}

impl CVConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        n: usize,
        kind: ConvKind,
        in_ch: usize,
        out_ch: usize,
        kernel: &[usize],
        mut spec: ConvSpec,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if kernel.len() != n || kernel.contains(&0) {
            return Err(Error::invalid(format!("kernel {kernel:?} for {n}-d convolution")));
        }
        spec.transposed = kind == ConvKind::Transposed;
        if spec.output_padding.is_empty() {
            spec.output_padding = vec![0; n];
        }
        spec.validate(n)?;
        let mut shape = match kind {
            ConvKind::Forward => vec![out_ch, in_ch],
            ConvKind::Transposed => vec![in_ch, out_ch],
        };
        shape.extend_from_slice(kernel);
        let fan_in = in_ch * kernel.iter().product::<usize>();
        Ok(CVConv {
            n,
            kind,
            weight: Parameter::new(complex_init(&shape, fan_in, rng)),
            bias: bias.then(|| Parameter::new(CTensor::zeros(&[out_ch]))),
            spec,
            path: Path::Gauss,
        })
    }
}

impl Module for CVConv {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let w = ctx.param(&self.weight);
        let b = self.bias.as_ref().map(|b| ctx.param(b));
        x.conv(&w, b.as_ref(), self.n, self.kind, &self.spec, self.path, false)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            f("bias", b);
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(crate::cvops::conv_geometry(self.n, self.weight.value.shape(), input, &self.spec)?.1)
    }
}

/// Adaptive average pooling of both planes over the trailing `n` axes.
pub fn cv_adaptive_avg_pool(n: usize, z: &Var, out_size: &[usize]) -> Result<Var> {
    if out_size.len() != n {
        return Err(Error::invalid(format!("{n}-d pooling given output size {out_size:?}")));
    }
    z.adaptive_avg_pool(out_size)
}

pub struct CVAdaptiveAvgPool {
    pub out_size: Vec<usize>,
}

impl Module for CVAdaptiveAvgPool {
    fn forward(&mut self, _ctx: &mut Ctx, x: &Var) -> Result<Var> {
        cv_adaptive_avg_pool(self.out_size.len(), x, &self.out_size)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let n = self.out_size.len();
        if input.len() < n {
            return Err(Error::shape(format!("cannot pool {input:?} to {:?}", self.out_size)));
        }
        let mut s = input[..input.len() - n].to_vec();
        s.extend_from_slice(&self.out_size);
        Ok(s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Separate Bernoulli masks for the real and imaginary planes.
    #[default]
    Independent,
    /// One mask applied to both planes, which keeps phases intact.
    Shared,
}

/// Inverted dropout. Identity unless `training`.
pub fn cv_dropout<R: Rng + ?Sized>(z: &Var, p: f64, training: bool, mode: MaskMode, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout probability {p} outside [0, 1)")));
    }
    if !training || p == 0.0 {
        return Ok(z.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let n = z.value().numel();
    let mut draw = || if rng.random::<f64>() < p { 0.0 } else { keep };
    let re: Vec<f64> = (0..n).map(|_| draw()).collect();
    let im = match mode {
        MaskMode::Independent => (0..n).map(|_| draw()).collect(),
        MaskMode::Shared => re.clone(),
    };
    z.mul_planes(&CTensor::new(z.shape(), re, im)?)
}

pub struct CVDropout {
    pub p: f64,
    pub mode: MaskMode,
}

impl Module for CVDropout {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        cv_dropout(x, self.p, ctx.training, self.mode, &mut ctx.rng)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        Ok(input.to_vec())
    }
}

/// Collapses every axis after the first.
pub struct Flatten;

impl Module for Flatten {
    fn forward(&mut self, _ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let s = self.output_shape(x.shape())?;
        x.reshape(&s)
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match input.split_first() {
            Some((&b, rest)) => Ok(vec![b, rest.iter().product()]),
            None => Err(Error::shape("cannot flatten a scalar")),
        }
    }
}
