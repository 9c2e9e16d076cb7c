//! JSON training configuration.
//!
//! Unknown keys and layer names are rejected by the parser itself, so
//! errors carry the line and column of the offending token.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::activations::SigmoidConvention;
use crate::attention::TransposeMode;
use crate::ctensor::DType;
use crate::cvops::Path;
use crate::error::{Error, Result};
use crate::layers::MaskMode;
use crate::manifold::ConvexScope;
use crate::masks::{MaskFn, MinMaxMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    ClassifyTones,
    Denoise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: d_beta1(), beta2: d_beta2(), eps: d_adam_eps() }
    }
}

/// Synthetic dataset parameters. Keys irrelevant to the task are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_classes")]
    pub n_classes: usize,
    #[serde(default = "d_length")]
    pub length: usize,
    /// Signal-to-noise ratio in dB; `null` turns the noise off.
    #[serde(default = "d_snr")]
    pub snr_db: Option<f64>,
    /// Standard deviation of the complex denoising noise, `E|n|² = σ²`.
    #[serde(default = "d_sigma")]
    pub noise_sigma: f64,
    /// Tones summed into each clean denoising target.
    #[serde(default = "d_tones")]
    pub n_tones: usize,
    #[serde(default = "d_train")]
    pub train_samples: usize,
    #[serde(default = "d_test")]
    pub test_samples: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        serde_json::from_str("{}").unwrap()
    }
}

/// A spatial size given either as one number for every axis or per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Dims {
    One(usize),
    Many(Vec<usize>),
}

impl Dims {
    pub fn expand(&self, n: usize, what: &str) -> Result<Vec<usize>> {
        match self {
            Dims::One(v) => Ok(vec![*v; n]),
            Dims::Many(v) if v.len() == n => Ok(v.clone()),
            Dims::Many(v) => Err(Error::Config(format!("{what} needs {n} entries, got {}", v.len()))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: Dims,
    #[serde(default = "d_one")]
    pub stride: Dims,
    #[serde(default = "d_zero")]
    pub padding: Dims,
    #[serde(default = "d_one")]
    pub dilation: Dims,
    #[serde(default = "d_zero")]
    pub output_padding: Dims,
    #[serde(default = "d_true")]
    pub bias: bool,
    #[serde(default)]
    pub path: Path,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WFMConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: Dims,
    #[serde(default = "d_one")]
    pub stride: Dims,
    #[serde(default = "d_zero")]
    pub padding: Dims,
    #[serde(default = "d_one")]
    pub dilation: Dims,
    #[serde(default)]
    pub scope: ConvexScope,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolConfig {
    pub output_size: Dims,
}

/// Keys shared by every activation; each is only legal where it applies.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActivationConfig {
    /// modReLU bias.
    pub b: Option<f64>,
    /// CPReLU slope.
    pub slope: Option<f64>,
    /// CVSigLog constants.
    pub c: Option<f64>,
    pub r: Option<f64>,
    /// CVSigmoid sign convention.
    pub convention: Option<SigmoidConvention>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    #[serde(default = "d_last")]
    pub dim: isize,
    #[serde(default)]
    pub mode: MinMaxMode,
}

/// One entry of the `model` list, tagged by `"type"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", deny_unknown_fields)]
pub enum LayerConfig {
    CVLinear {
        in_features: usize,
        out_features: usize,
        #[serde(default = "d_true")]
        bias: bool,
        #[serde(default)]
        path: Path,
    },
    CVConv1d(ConvConfig),
    CVConv2d(ConvConfig),
    CVConv3d(ConvConfig),
    CVConvTranspose1d(ConvConfig),
    CVConvTranspose2d(ConvConfig),
    CVConvTranspose3d(ConvConfig),
    CVAdaptiveAvgPool1d(PoolConfig),
    CVAdaptiveAvgPool2d(PoolConfig),
    CVAdaptiveAvgPool3d(PoolConfig),
    CVDropout {
        p: f64,
        #[serde(default)]
        mask_mode: MaskMode,
    },
    Flatten {},
    CVBatchNorm {
        num_features: usize,
        #[serde(default = "d_norm_eps")]
        eps: f64,
        #[serde(default = "d_momentum")]
        momentum: f64,
        #[serde(default = "d_true")]
        affine: bool,
    },
    CVLayerNorm {
        normalized_shape: Vec<usize>,
        #[serde(default = "d_norm_eps")]
        eps: f64,
        #[serde(default = "d_true")]
        affine: bool,
    },
    #[serde(alias = "CTanh")]
    CVSplitTanh(ActivationConfig),
    #[serde(alias = "CSigmoid")]
    CVSplitSigmoid(ActivationConfig),
    CVSplitAbs(ActivationConfig),
    CVPolarTanh(ActivationConfig),
    CVPolarSquash(ActivationConfig),
    CVPolarLog(ActivationConfig),
    #[serde(rename = "modReLU")]
    ModReLU(ActivationConfig),
    CVSigmoid(ActivationConfig),
    #[serde(rename = "zReLU")]
    ZReLU(ActivationConfig),
    #[serde(alias = "CVCardiod")]
    CVCardioid(ActivationConfig),
    CVSigLog(ActivationConfig),
    #[serde(alias = "CVSplitReLU")]
    CReLU(ActivationConfig),
    CPReLU(ActivationConfig),
    CVSoftMax(MaskConfig),
    PhaseSoftMax(MaskConfig),
    MagSoftMax(MaskConfig),
    ComplexRatioMask(MaskConfig),
    MagMinMaxNorm(MaskConfig),
    CVSDPA {
        #[serde(default)]
        temperature: Option<f64>,
        #[serde(default)]
        mask_fn: MaskFn,
        #[serde(default)]
        transpose: TransposeMode,
    },
    CVMultiHead {
        d_model: usize,
        heads: usize,
        #[serde(default)]
        temperature: Option<f64>,
        #[serde(default)]
        mask_fn: MaskFn,
        #[serde(default)]
        transpose: TransposeMode,
    },
    CVECA {
        #[serde(default = "d_eca_k")]
        k: usize,
        #[serde(default)]
        mask_fn: MaskFn,
    },
    CVMCA {
        channels: usize,
        #[serde(default = "d_reduction")]
        reduction: usize,
        #[serde(default = "d_spatial")]
        spatial_dims: usize,
    },
    #[serde(rename = "wFMConv1d")]
    WFMConv1d(WFMConfig),
    #[serde(rename = "wFMConv2d")]
    WFMConv2d(WFMConfig),
}

impl LayerConfig {
    /// The `"type"` string this entry was written with (canonical spelling).
    pub fn type_name(&self) -> String {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(m)) => m.get("type").and_then(|t| t.as_str()).unwrap_or("?").to_string(),
            _ => "?".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: Task,
    #[serde(default)]
    pub data: DataConfig,
    pub model: Vec<LayerConfig>,
    /// Loss name; `SplitMSE` when absent.
    #[serde(default = "d_loss")]
    pub loss: String,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub dtype: DType,
}

impl TrainConfig {
    /// Parses and checks every value that can be checked without building
    /// the model.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be a positive number, got {}", self.lr));
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad(format!("adam needs betas in [0, 1) and eps > 0, got {a:?}"));
        }
        if self.model.is_empty() {
            return bad("model has no layers".into());
        }
        if crate::losses::Loss::from_name(&self.loss).is_none() {
            return bad(format!("unknown loss `{}`, expected one of {:?}", self.loss, crate::losses::Loss::NAMES));
        }
        let d = &self.data;
        if d.length == 0 || d.train_samples == 0 || d.test_samples == 0 {
            return bad("data.length, data.train_samples and data.test_samples must be positive".into());
        }
        match self.task {
            Task::ClassifyTones => {
                if d.n_classes < 2 {
                    return bad(format!("data.n_classes must be at least 2, got {}", d.n_classes));
                }
                if let Some(s) = d.snr_db {
                    if !s.is_finite() {
                        return bad("data.snr_db must be finite (use null for a noiseless set)".into());
                    }
                }
            }
            Task::Denoise => {
                if !(d.noise_sigma >= 0.0 && d.noise_sigma.is_finite()) || d.n_tones == 0 {
                    return bad("data.noise_sigma must be finite and non-negative, data.n_tones positive".into());
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(canon.as_bytes()))
    }
}

/// 1-based line on which the `index`-th layer object of a config text
/// starts, found by its `"type"` key. Used to place build-time errors.
pub fn layer_line(text: &str, index: usize) -> Option<usize> {
    let model = text.find("\"model\"")?;
    let mut from = model;
    for _ in 0..=index {
        from += text[from..].find("\"type\"")? + 1;
    }
    Some(text[..from].matches('\n').count() + 1)
}

fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_classes() -> usize {
    4
}
fn d_length() -> usize {
    128
}
fn d_snr() -> Option<f64> {
    Some(10.0)
}
fn d_sigma() -> f64 {
    0.3
}
fn d_tones() -> usize {
    3
}
fn d_train() -> usize {
    512
}
fn d_test() -> usize {
    256
}
fn d_one() -> Dims {
    Dims::One(1)
}
fn d_zero() -> Dims {
    Dims::One(0)
}
fn d_true() -> bool {
    true
}
fn d_last() -> isize {
    -1
}
fn d_norm_eps() -> f64 {
    crate::normalization::DEFAULT_EPS
}
fn d_momentum() -> f64 {
    crate::normalization::DEFAULT_MOMENTUM
}
fn d_eca_k() -> usize {
    3
}
fn d_reduction() -> usize {
    2
}
fn d_spatial() -> usize {
    1
}
fn d_loss() -> String {
    "SplitMSE".into()
}
