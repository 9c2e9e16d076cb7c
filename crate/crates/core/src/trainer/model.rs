//! Layer stacks assembled from config entries.

use rand::Rng;

use super::config::{ActivationConfig, ConvConfig, Dims, LayerConfig, WFMConfig};
use crate::activations::{ActivationKind, CVActivation};
use crate::attention::{AttentionConfig, CVMultiHead, CVECA, CVMCA, CVSDPA};
use crate::autodiff::{Parameter, Var};
use crate::ctensor::{CTensor, DType};
use crate::cvops::{ConvKind, ConvSpec};
use crate::error::{Error, Result};
use crate::layers::{CVAdaptiveAvgPool, CVConv, CVDropout, CVLinear, Flatten};
use crate::manifold::WFMConv;
use crate::masks::{MaskFn, MaskLayer};
use crate::module::{Ctx, Module};
use crate::normalization::{CVBatchNorm, CVLayerNorm};

/// Layers applied in order. Parameter and buffer names are prefixed with
/// the layer index: `"0.weight"`, `"2.running_mean"`.
#[derive(Default)]
pub struct Sequential {
    pub layers: Vec<(String, Box<dyn Module>)>,
}

impl Sequential {
    pub fn push(&mut self, name: impl Into<String>, layer: Box<dyn Module>) {
        self.layers.push((name.into(), layer));
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Converts every parameter and buffer to `dtype`.
    pub fn cast(&mut self, dtype: DType) {
        self.visit_params(&mut |_, p| p.value = p.value.to_dtype(dtype));
        self.visit_buffers(&mut |_, b| *b = b.to_dtype(dtype));
    }
}

impl Module for Sequential {
    fn forward(&mut self, ctx: &mut Ctx, x: &Var) -> Result<Var> {
        let mut h = x.clone();
        for (_, l) in &mut self.layers {
            h = l.forward(ctx, &h)?;
        }
        Ok(h)
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        for (i, (_, l)) in self.layers.iter_mut().enumerate() {
            l.visit_params(&mut |n, p| f(&format!("{i}.{n}"), p));
        }
    }

    fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut CTensor)) {
        for (i, (_, l)) in self.layers.iter_mut().enumerate() {
            l.visit_buffers(&mut |n, b| f(&format!("{i}.{n}"), b));
        }
    }

    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |s, (_, l)| l.output_shape(&s))
    }
}

fn conv_spec(n: usize, c: &ConvConfig, transposed: bool) -> Result<ConvSpec> {
    let op = c.output_padding.expand(n, "output_padding")?;
    if !transposed && op.iter().any(|&v| v != 0) {
        return Err(Error::Config("output_padding only applies to transposed convolutions".into()));
    }
    Ok(ConvSpec {
        stride: c.stride.expand(n, "stride")?,
        padding: c.padding.expand(n, "padding")?,
        dilation: c.dilation.expand(n, "dilation")?,
        transposed,
        output_padding: op,
    })
}

fn conv<R: Rng + ?Sized>(n: usize, c: &ConvConfig, kind: ConvKind, rng: &mut R) -> Result<Box<dyn Module>> {
    let spec = conv_spec(n, c, kind == ConvKind::Transposed)?;
    let k = c.kernel_size.expand(n, "kernel_size")?;
    let mut layer = CVConv::new(n, kind, c.in_channels, c.out_channels, &k, spec, c.bias, rng)?;
    layer.path = c.path;
    Ok(Box::new(layer))
}

fn wfm<R: Rng + ?Sized>(n: usize, c: &WFMConfig, rng: &mut R) -> Result<Box<dyn Module>> {
    let spec = ConvSpec {
        stride: c.stride.expand(n, "stride")?,
        padding: c.padding.expand(n, "padding")?,
        dilation: c.dilation.expand(n, "dilation")?,
        transposed: false,
        output_padding: vec![0; n],
    };
    let mut layer = WFMConv::new(n, c.in_channels, c.out_channels, &c.kernel_size.expand(n, "kernel_size")?, spec, rng)?;
    layer.scope = c.scope;
    Ok(Box::new(layer))
}

fn pool(n: usize, size: &Dims) -> Result<Box<dyn Module>> {
    Ok(Box::new(CVAdaptiveAvgPool { out_size: size.expand(n, "output_size")? }))
}

fn activation(name: &str, a: &ActivationConfig) -> Result<Box<dyn Module>> {
    let kind = ActivationKind::from_name(name).ok_or_else(|| Error::Config(format!("unknown activation `{name}`")))?;
    let allowed: &[&str] = match kind {
        ActivationKind::ModReLU => &["b"],
        ActivationKind::CPReLU => &["slope"],
        ActivationKind::SigLog => &["c", "r"],
        ActivationKind::Sigmoid => &["convention"],
        _ => &[],
    };
    let given = [
        ("b", a.b.is_some()),
        ("slope", a.slope.is_some()),
        ("c", a.c.is_some()),
        ("r", a.r.is_some()),
        ("convention", a.convention.is_some()),
    ];
    if let Some((key, _)) = given.iter().find(|(k, set)| *set && !allowed.contains(k)) {
        return Err(Error::Config(format!("unknown field `{key}` for {name}")));
    }
    let mut act = CVActivation::new(kind);
    if let Some(v) = a.b.or(a.slope) {
        act = act.with_param(v)?;
    }
    act.c = a.c.unwrap_or(act.c);
    act.r = a.r.unwrap_or(act.r);
    act.convention = a.convention.unwrap_or(act.convention);
    if act.c <= 0.0 || act.r <= 0.0 {
        return Err(Error::Config(format!("{name} needs c > 0 and r > 0")));
    }
    Ok(Box::new(act))
}

/// Instantiates one layer. Parameters are drawn from `rng` in layer order.
pub fn build_layer<R: Rng + ?Sized>(cfg: &LayerConfig, rng: &mut R) -> Result<Box<dyn Module>> {
    use LayerConfig as L;
    let name = cfg.type_name();
    let att = |temperature: Option<f64>, mask_fn: MaskFn, transpose| -> Result<AttentionConfig> {
        if temperature.is_some_and(|t| t <= 0.0 || !t.is_finite()) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        Ok(AttentionConfig { temperature, mask_fn, transpose, ..Default::default() })
    };
    Ok(match cfg {
        L::CVLinear { in_features, out_features, bias, path } => {
            let mut l = CVLinear::new(*in_features, *out_features, *bias, rng);
            l.path = *path;
            Box::new(l)
        }
        L::CVConv1d(c) => conv(1, c, ConvKind::Forward, rng)?,
        L::CVConv2d(c) => conv(2, c, ConvKind::Forward, rng)?,
        L::CVConv3d(c) => conv(3, c, ConvKind::Forward, rng)?,
        L::CVConvTranspose1d(c) => conv(1, c, ConvKind::Transposed, rng)?,
        L::CVConvTranspose2d(c) => conv(2, c, ConvKind::Transposed, rng)?,
        L::CVConvTranspose3d(c) => conv(3, c, ConvKind::Transposed, rng)?,
        L::CVAdaptiveAvgPool1d(p) => pool(1, &p.output_size)?,
        L::CVAdaptiveAvgPool2d(p) => pool(2, &p.output_size)?,
        L::CVAdaptiveAvgPool3d(p) => pool(3, &p.output_size)?,
        L::CVDropout { p, mask_mode } => {
            if !(0.0..1.0).contains(p) {
                return Err(Error::Config(format!("dropout p must be in [0, 1), got {p}")));
            }
            Box::new(CVDropout { p: *p, mode: *mask_mode })
        }
        L::Flatten {} => Box::new(Flatten),
        L::CVBatchNorm { num_features, eps, momentum, affine } => {
            if *eps <= 0.0 || !(0.0..=1.0).contains(momentum) {
                return Err(Error::Config("batch norm needs eps > 0 and momentum in [0, 1]".into()));
            }
            let mut bn = CVBatchNorm::new(*num_features);
            bn.eps = *eps;
            bn.running.momentum = *momentum;
            if !affine {
                bn.affine = None;
            }
            Box::new(bn)
        }
        L::CVLayerNorm { normalized_shape, eps, affine } => {
            if normalized_shape.is_empty() || *eps <= 0.0 {
                return Err(Error::Config("layer norm needs a non-empty normalized_shape and eps > 0".into()));
            }
            let mut ln = CVLayerNorm::new(normalized_shape);
            ln.eps = *eps;
            if !affine {
                ln.affine = None;
            }
            Box::new(ln)
        }
        L::CVSplitTanh(a)
        | L::CVSplitSigmoid(a)
        | L::CVSplitAbs(a)
        | L::CVPolarTanh(a)
        | L::CVPolarSquash(a)
        | L::CVPolarLog(a)
        | L::ModReLU(a)
        | L::CVSigmoid(a)
        | L::ZReLU(a)
        | L::CVCardioid(a)
        | L::CVSigLog(a)
        | L::CReLU(a)
        | L::CPReLU(a) => activation(&name, a)?,
        L::CVSoftMax(m) | L::PhaseSoftMax(m) | L::MagSoftMax(m) | L::ComplexRatioMask(m) | L::MagMinMaxNorm(m) => {
            let mask = MaskFn::from_name(&name).ok_or_else(|| Error::Config(format!("unknown mask `{name}`")))?;
            Box::new(MaskLayer { mask, axis: m.dim, minmax_mode: m.mode })
        }
        L::CVSDPA { temperature, mask_fn, transpose } => Box::new(CVSDPA { cfg: att(*temperature, *mask_fn, *transpose)? }),
        L::CVMultiHead { d_model, heads, temperature, mask_fn, transpose } => {
            Box::new(CVMultiHead::new(*d_model, *heads, att(*temperature, *mask_fn, *transpose)?, rng)?)
        }
        L::CVECA { k, mask_fn } => Box::new(CVECA::new(*k, *mask_fn, rng)?),
        L::CVMCA { channels, reduction, spatial_dims } => Box::new(CVMCA::new(*spatial_dims, *channels, *reduction, rng)?),
        L::WFMConv1d(c) => wfm(1, c, rng)?,
        L::WFMConv2d(c) => wfm(2, c, rng)?,
    })
}

/// Builds the stack and checks that shapes chain from `input_shape`.
///
/// Errors name the layer index and type; when the config `source` text is
/// given they also carry the line the layer starts on.
pub fn build_model<R: Rng + ?Sized>(
    layers: &[LayerConfig],
    input_shape: &[usize],
    source: Option<&str>,
    rng: &mut R,
) -> Result<Sequential> {
    let mut model = Sequential::default();
    let mut shape = input_shape.to_vec();
    for (i, cfg) in layers.iter().enumerate() {
        let name = cfg.type_name();
        let fail = |e: Error| {
            let msg = match e {
                Error::Config(m) => m,
                e => e.to_string(),
            };
            let at = source.and_then(|s| super::config::layer_line(s, i)).map(|l| format!("line {l}: ")).unwrap_or_default();
            Error::Config(format!("{at}layer {i} ({name}): {msg}"))
        };
        let layer = build_layer(cfg, rng).map_err(fail)?;
        shape = layer.output_shape(&shape).map_err(fail)?;
        model.push(name.clone(), layer);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::module::num_parameters;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layers(json: &str) -> Vec<LayerConfig> {
        serde_json::from_str(json).unwrap()
    }

    #[test]
    fn builds_and_chains() {
        let cfg = layers(
            r#"[{"type": "CVConv1d", "in_channels": 1, "out_channels": 4, "kernel_size": 5, "stride": 2},
                {"type": "CReLU"},
                {"type": "CVBatchNorm", "num_features": 4},
                {"type": "Flatten"},
                {"type": "CVLinear", "in_features": 248, "out_features": 4},
                {"type": "MagSoftMax"}]"#,
        );
        let mut m = build_model(&cfg, &[8, 1, 128], None, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.output_shape(&[8, 1, 128]).unwrap(), vec![8, 4]);
        assert_eq!(num_parameters(&mut m), 4 * 5 + 4 + 4 * 4 + 248 * 4 + 4);
        let names: Vec<String> = crate::module::named_parameters(&mut m).into_iter().map(|(n, _)| n).collect();
        assert!(names.contains(&"0.weight".to_string()) && names.contains(&"4.bias".to_string()));
    }

    #[test]
    fn shape_mismatch_names_layer_and_line() {
        let text = "{\"model\": [\n  {\"type\": \"Flatten\"},\n  {\"type\": \"CVLinear\", \"in_features\": 3, \"out_features\": 2}\n]}";
        let cfg: serde_json::Value = serde_json::from_str(text).unwrap();
        let cfg: Vec<LayerConfig> = serde_json::from_value(cfg["model"].clone()).unwrap();
        let e = build_model(&cfg, &[2, 1, 8], Some(text), &mut ChaCha8Rng::seed_from_u64(0)).err().unwrap().to_string();
        assert!(e.contains("line 3") && e.contains("layer 1 (CVLinear)"), "{e}");
    }

    #[test]
    fn activation_keys_are_checked() {
        assert!(build_layer(&layers(r#"[{"type": "CTanh", "b": 1.0}]"#)[0], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let ok = build_layer(&layers(r#"[{"type": "modReLU", "b": -0.5}]"#)[0], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(ok.is_ok());
        assert!(build_layer(&layers(r#"[{"type": "CVSigLog", "c": 0.0}]"#)[0], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn every_vocabulary_entry_builds() {
        let cfg = layers(
            r#"[{"type": "CVConv2d", "in_channels": 2, "out_channels": 2, "kernel_size": [3, 1], "padding": [1, 0]},
                {"type": "CVConvTranspose2d", "in_channels": 2, "out_channels": 2, "kernel_size": 2, "stride": 2},
                {"type": "wFMConv2d", "in_channels": 2, "out_channels": 2, "kernel_size": 3, "padding": 1},
                {"type": "CVMCA", "channels": 2, "spatial_dims": 2},
                {"type": "CVAdaptiveAvgPool2d", "output_size": [4, 4]},
                {"type": "CVDropout", "p": 0.2, "mask_mode": "shared"},
                {"type": "CVSplitTanh"}, {"type": "CSigmoid"}, {"type": "CVSplitAbs"}, {"type": "CVPolarTanh"},
                {"type": "CVPolarSquash"}, {"type": "CVPolarLog"}, {"type": "CVSigmoid", "convention": "standard"},
                {"type": "zReLU"}, {"type": "CVCardiod"}, {"type": "CVSigLog", "c": 2.0, "r": 1.0}, {"type": "CPReLU"},
                {"type": "CVLayerNorm", "normalized_shape": [4, 4]},
                {"type": "PhaseSoftMax", "dim": 2}, {"type": "CVSoftMax"}, {"type": "ComplexRatioMask"},
                {"type": "MagMinMaxNorm", "mode": "magnitude"},
                {"type": "Flatten"}, {"type": "CVLinear", "in_features": 32, "out_features": 6}]"#,
        );
        let mut m = build_model(&cfg, &[3, 2, 4, 4], None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut ctx = Ctx::eval();
        let x = Var::constant(CTensor::randn(&[3, 2, 4, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        assert_eq!(m.forward(&mut ctx, &x).unwrap().shape(), &[3, 6]);

        let seq = layers(
            r#"[{"type": "CVMultiHead", "d_model": 4, "heads": 2, "mask_fn": "PhaseSoftMax"},
                {"type": "CVSDPA", "transpose": "hermitian", "temperature": 2.0},
                {"type": "CVECA", "k": 3}, {"type": "CVConv1d", "in_channels": 3, "out_channels": 1, "kernel_size": 1}]"#,
        );
        let mut m = build_model(&seq, &[2, 3, 4], None, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let x = Var::constant(CTensor::randn(&[2, 3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        assert_eq!(m.forward(&mut ctx, &x).unwrap().shape(), &[2, 1, 4]);
    }
}
