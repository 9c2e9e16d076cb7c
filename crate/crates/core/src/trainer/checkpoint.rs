//! Checkpoints: a directory holding one `.cvt` file per named tensor and a
//! `meta.json` describing them.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctensor::CTensor;
use crate::error::{Error, Result};
use crate::module::Module;

pub const FORMAT: &str = "cvnn-checkpoint/1";
pub const META_FILE: &str = "meta.json";

/// Exact ChaCha8 position, so a resumed run draws the same numbers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the word position is a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: hex::encode(rng.get_seed()), stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Format(format!("bad rng state {self:?}"));
        let seed: [u8; 32] = hex::decode(&self.seed).map_err(|_| bad())?.try_into().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub format: String,
    pub config_hash: String,
    pub epoch: usize,
    pub rng: RngState,
    /// Parameter name → file name.
    pub params: BTreeMap<String, String>,
    /// Buffer name → file name.
    pub buffers: BTreeMap<String, String>,
}

fn file_name(kind: &str, name: &str) -> String {
    format!("{kind}.{name}.cvt")
}

/// Writes every parameter and buffer of `model`.
pub fn save(dir: impl AsRef<Path>, model: &mut dyn Module, config_hash: &str, epoch: usize, rng: &ChaCha8Rng) -> Result<Meta> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut meta = Meta {
        format: FORMAT.into(),
        config_hash: config_hash.into(),
        epoch,
        rng: RngState::capture(rng),
        params: BTreeMap::new(),
        buffers: BTreeMap::new(),
    };
    let mut err = None;
    model.visit_params(&mut |name, p| {
        let f = file_name("param", name);
        if err.is_none() {
            err = p.value.save(dir.join(&f)).err();
        }
        meta.params.insert(name.to_string(), f);
    });
    model.visit_buffers(&mut |name, b| {
        let f = file_name("buffer", name);
        if err.is_none() {
            err = b.save(dir.join(&f)).err();
        }
        meta.buffers.insert(name.to_string(), f);
    });
    if let Some(e) = err {
        return Err(e);
    }
    std::fs::write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

pub fn read_meta(dir: impl AsRef<Path>) -> Result<Meta> {
    let meta: Meta = serde_json::from_str(&std::fs::read_to_string(dir.as_ref().join(META_FILE))?)?;
    if meta.format != FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format `{}`", meta.format)));
    }
    Ok(meta)
}

/// Loads tensors into an already built `model`. Names and shapes must match
/// exactly; values are restored bit for bit.
pub fn load(dir: impl AsRef<Path>, model: &mut dyn Module) -> Result<Meta> {
    let dir = dir.as_ref();
    let meta = read_meta(dir)?;
    let read = |table: &BTreeMap<String, String>, name: &str, current: &CTensor| -> Result<CTensor> {
        let f = table.get(name).ok_or_else(|| Error::Format(format!("checkpoint has no tensor `{name}`")))?;
        let t = CTensor::load(dir.join(f))?;
        if t.shape() != current.shape() {
            return Err(Error::Format(format!("tensor `{name}` has shape {:?}, model expects {:?}", t.shape(), current.shape())));
        }
        Ok(t)
    };
    let (mut seen_p, mut seen_b) = (0, 0);
    let mut err = None;
    model.visit_params(&mut |name, p| {
        seen_p += 1;
        match read(&meta.params, name, &p.value) {
            Ok(t) => p.value = t,
            Err(e) => err = err.take().or(Some(e)),
        }
    });
    model.visit_buffers(&mut |name, b| {
        seen_b += 1;
        match read(&meta.buffers, name, b) {
            Ok(t) => *b = t,
            Err(e) => err = err.take().or(Some(e)),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if seen_p != meta.params.len() || seen_b != meta.buffers.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters and {} buffers, model has {seen_p} and {seen_b}",
            meta.params.len(),
            meta.buffers.len()
        )));
    }
    Ok(meta)
}
