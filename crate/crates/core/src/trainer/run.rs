//! The training and evaluation loop.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint;
use super::config::{Task, TrainConfig};
use super::data::{gen_synthetic, Dataset, DatasetSpec};
use super::model::{build_model, Sequential};
use super::optim::Optimizer;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::losses::Loss;
use crate::module::{Ctx, Module};

pub const CSV_HEADER: &str = "epoch,train_loss,eval_loss,accuracy";

/// RNG streams derived from the config seed.
const STREAM_INIT: u64 = 0;
const STREAM_LOOP: u64 = 1;
/// Offset separating the test set seed from the training set seed.
const TEST_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_loss: f64,
    /// Test accuracy; classification only.
    pub accuracy: Option<f64>,
}

impl MetricsRow {
    pub fn csv_line(&self) -> String {
        let acc = self.accuracy.map(|a| a.to_string()).unwrap_or_default();
        format!("{},{:e},{:e},{}", self.epoch, self.train_loss, self.eval_loss, acc)
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv_line());
        s.push('\n');
    }
    s
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Sequential,
    pub optimizer: Optimizer,
    pub loss: Loss,
    pub train_set: Dataset,
    pub test_set: Dataset,
    /// Drives shuffling and dropout.
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
}

impl Trainer {
    /// Builds model and data. `source` is the config text, used to put line
    /// numbers on layer errors.
    pub fn new(cfg: TrainConfig, source: Option<&str>) -> Result<Self> {
        cfg.validate()?;
        let spec = DatasetSpec::from_config(cfg.task, &cfg.data);
        let cast = |mut d: Dataset| {
            d.inputs = d.inputs.to_dtype(cfg.dtype);
            d.targets = d.targets.to_dtype(cfg.dtype);
            d
        };
        let train_set = cast(gen_synthetic(&spec, cfg.data.train_samples, cfg.seed)?);
        let test_set = cast(gen_synthetic(&spec, cfg.data.test_samples, cfg.seed ^ TEST_SEED_MIX)?);

        let in_shape = [cfg.batch_size, 1, cfg.data.length];
        let mut model = build_model(&cfg.model, &in_shape, source, &mut stream_rng(cfg.seed, STREAM_INIT))?;
        model.cast(cfg.dtype);
        let out = model.output_shape(&in_shape)?;
        let want = match cfg.task {
            Task::ClassifyTones => vec![cfg.batch_size, cfg.data.n_classes],
            Task::Denoise => in_shape.to_vec(),
        };
        if out != want {
            return Err(Error::Config(format!("model output {out:?} does not match the {:?} targets {want:?}", cfg.task)));
        }
        let loss = Loss::from_name(&cfg.loss).ok_or_else(|| Error::Config(format!("unknown loss `{}`", cfg.loss)))?;
        Ok(Trainer {
            optimizer: Optimizer::new(cfg.optimizer, cfg.lr, cfg.adam),
            rng: stream_rng(cfg.seed, STREAM_LOOP),
            cfg,
            model,
            loss,
            train_set,
            test_set,
            epoch: 0,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(TrainConfig::from_json(text)?, Some(text))
    }

    /// Contiguous index chunks of at most `batch_size`; a trailing single
    /// sample joins the previous chunk so batch statistics stay defined.
    fn chunks(&self, order: &[usize]) -> Vec<Vec<usize>> {
        let mut out: Vec<Vec<usize>> = order.chunks(self.cfg.batch_size).map(|c| c.to_vec()).collect();
        if out.len() > 1 && out.last().is_some_and(|c| c.len() == 1) {
            let last = out.pop().unwrap();
            out.last_mut().unwrap().extend(last);
        }
        out
    }

    /// Mean loss and, for classification, accuracy of the model in eval mode.
    pub fn evaluate(&mut self, data: &Dataset) -> Result<(f64, Option<f64>)> {
        let order: Vec<usize> = (0..data.len()).collect();
        let (mut total, mut correct) = (0.0, 0usize);
        for idx in self.chunks(&order) {
            let b = data.batch(&idx)?;
            let mut ctx = Ctx::eval();
            let out = self.model.forward(&mut ctx, &Var::constant(b.inputs.clone()))?;
            let l = self.loss.compute(&out, &Var::constant(b.targets.clone()))?;
            total += l.value().item()?.0 * idx.len() as f64;
            correct += count_correct(out.value(), &b.labels)?;
        }
        let acc = (!data.labels.is_empty()).then(|| correct as f64 / data.len() as f64);
        Ok((total / data.len() as f64, acc))
    }

    /// One pass over the shuffled training set; returns the mean batch loss.
    pub fn train_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.train_set.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for idx in self.chunks(&order) {
            let b = self.train_set.batch(&idx)?;
            let tape = Tape::new();
            let mut ctx = Ctx::train(tape.clone(), self.rng.clone());
            let out = self.model.forward(&mut ctx, &tape.leaf(b.inputs))?;
            self.rng = ctx.rng;
            let l = self.loss.compute(&out, &Var::constant(b.targets))?;
            let v = l.value().item()?.0;
            if !v.is_finite() {
                return Err(Error::Numeric(format!("loss became {v} in epoch {}", self.epoch + 1)));
            }
            l.backward()?;
            self.optimizer.step(&mut self.model, &tape)?;
            total += v * idx.len() as f64;
        }
        self.epoch += 1;
        Ok(total / self.train_set.len() as f64)
    }

    /// Initial evaluation (epoch 0) followed by `cfg.epochs` epochs. Each row
    /// is handed to `on_row` as soon as it exists.
    pub fn run(&mut self, mut on_row: impl FnMut(&MetricsRow)) -> Result<Vec<MetricsRow>> {
        let mut rows = Vec::with_capacity(self.cfg.epochs + 1);
        let train = self.train_set.clone();
        let test = self.test_set.clone();
        let (train_loss, _) = self.evaluate(&train)?;
        let (eval_loss, accuracy) = self.evaluate(&test)?;
        let row = MetricsRow { epoch: self.epoch, train_loss, eval_loss, accuracy };
        on_row(&row);
        rows.push(row);
        for _ in 0..self.cfg.epochs {
            let train_loss = self.train_epoch()?;
            let (eval_loss, accuracy) = self.evaluate(&test)?;
            let row = MetricsRow { epoch: self.epoch, train_loss, eval_loss, accuracy };
            on_row(&row);
            rows.push(row);
        }
        Ok(rows)
    }

    pub fn save_checkpoint(&mut self, dir: impl AsRef<Path>) -> Result<checkpoint::Meta> {
        checkpoint::save(dir, &mut self.model, &self.cfg.hash(), self.epoch, &self.rng)
    }

    /// Restores weights, buffers, epoch and RNG position. A checkpoint written
    /// under a different config is rejected when `strict`.
    pub fn load_checkpoint(&mut self, dir: impl AsRef<Path>, strict: bool) -> Result<checkpoint::Meta> {
        let dir = dir.as_ref();
        let meta = checkpoint::read_meta(dir)?;
        if strict && meta.config_hash != self.cfg.hash() {
            return Err(Error::Config(format!("checkpoint {} was written for a different config", dir.display())));
        }
        let meta = checkpoint::load(dir, &mut self.model)?;
        self.epoch = meta.epoch;
        self.rng = meta.rng.restore()?;
        Ok(meta)
    }
}

/// Predictions are the index of the largest output magnitude.
pub fn count_correct(out: &crate::ctensor::CTensor, labels: &[usize]) -> Result<usize> {
    if labels.is_empty() {
        return Ok(0);
    }
    let c = *out.shape().last().unwrap_or(&0);
    if out.rank() != 2 || out.shape()[0] != labels.len() || c == 0 {
        return Err(Error::shape(format!("predictions {:?} for {} labels", out.shape(), labels.len())));
    }
    let (re, im) = (out.re(), out.im());
    Ok(labels
        .iter()
        .enumerate()
        .filter(|&(s, &y)| {
            let mag = |k: usize| re[s * c + k].powi(2) + im[s * c + k].powi(2);
            (0..c).fold(0, |best, k| if mag(k) > mag(best) { k } else { best }) == y
        })
        .count())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const TONES: &str = r#"{
        "task": "classify_tones",
        "data": {"train_samples": 64, "test_samples": 32, "length": 32},
        "model": [
            {"type": "CVConv1d", "in_channels": 1, "out_channels": 2, "kernel_size": 5, "stride": 2},
            {"type": "CReLU"},
            {"type": "CVBatchNorm", "num_features": 2},
            {"type": "Flatten"},
            {"type": "CVLinear", "in_features": 28, "out_features": 4},
            {"type": "MagSoftMax"}
        ],
        "epochs": 2, "batch_size": 16, "lr": 0.01, "seed": 5
    }"#;

    #[test]
    fn zero_epochs_gives_initial_row_only() {
        let text = TONES.replace("\"epochs\": 2", "\"epochs\": 0");
        let mut t = Trainer::from_json(&text).unwrap();
        let rows = t.run(|_| {}).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].epoch, 0);
        assert!(rows[0].accuracy.is_some());
    }

    #[test]
    fn rerun_gives_identical_csv() {
        let a = metrics_csv(&Trainer::from_json(TONES).unwrap().run(|_| {}).unwrap());
        let b = metrics_csv(&Trainer::from_json(TONES).unwrap().run(|_| {}).unwrap());
        assert_eq!(a, b);
        assert!(a.starts_with("epoch,train_loss,eval_loss,accuracy\n0,"));
        assert_eq!(a.lines().count(), 4);
        let other = metrics_csv(&Trainer::from_json(&TONES.replace("\"seed\": 5", "\"seed\": 6")).unwrap().run(|_| {}).unwrap());
        assert_ne!(a, other);
    }

    #[test]
    fn misspelled_layer_is_a_located_config_error() {
        let text = TONES.replace("\"CReLU\"", "\"CReLu\"");
        let e = Trainer::from_json(&text).err().unwrap().to_string();
        assert!(e.contains("CReLu") && e.contains("line 6"), "{e}");
        let text = TONES.replace("\"lr\"", "\"learning_rate\"");
        let e = Trainer::from_json(&text).err().unwrap().to_string();
        assert!(e.contains("learning_rate"), "{e}");
    }

    #[test]
    fn output_must_match_targets() {
        let text = TONES.replace("\"out_features\": 4", "\"out_features\": 3");
        let e = Trainer::from_json(&text).err().unwrap().to_string();
        assert!(e.contains("does not match"), "{e}");
    }

    #[test]
    fn accuracy_counts_magnitude_argmax() {
        let out = crate::ctensor::CTensor::from_pairs(&[2, 3], &[(0.1, 0.0), (0.0, -2.0), (1.0, 1.0), (3.0, 0.0), (0.0, 0.0), (0.0, 2.9)]).unwrap();
        assert_eq!(count_correct(&out, &[1, 0]).unwrap(), 2);
        assert_eq!(count_correct(&out, &[2, 2]).unwrap(), 0);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut t = Trainer::from_json(TONES).unwrap();
        t.run(|_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        t.save_checkpoint(dir.path()).unwrap();
        let x = Var::constant(t.test_set.inputs.clone());
        let before = t.model.forward(&mut Ctx::eval(), &x).unwrap().into_value();

        let mut fresh = Trainer::from_json(TONES).unwrap();
        let meta = fresh.load_checkpoint(dir.path(), true).unwrap();
        assert_eq!(meta.epoch, 2);
        assert_eq!(fresh.rng, t.rng);
        let after = fresh.model.forward(&mut Ctx::eval(), &x).unwrap().into_value();
        assert_eq!(before.to_bytes(), after.to_bytes());

        let mut other = Trainer::from_json(&TONES.replace("\"seed\": 5", "\"seed\": 9")).unwrap();
        assert!(other.load_checkpoint(dir.path(), true).is_err());
        assert!(other.load_checkpoint(dir.path(), false).is_ok());
    }
}
