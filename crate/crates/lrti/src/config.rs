//! Flat `key = value` configuration files.
//!
//! One assignment per line, `#` starts a comment, nesting is spelled with
//! dotted keys (`model.dim`, `train.clip_len`). Schemas consume the keys
//! they know and reject everything left over, naming the offending key and
//! line, so typos fail loudly instead of silently using a default.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::Background;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::ritb::Activation;
use crate::training::{Strategy, TrainConfig};

/// A parsed file: keys mapped to (value, line number), consumed one schema
/// field at a time.
#[derive(Debug)]
pub struct ConfigDoc {
    origin: String,
    pairs: BTreeMap<String, (String, usize)>,
}

impl ConfigDoc {
    pub fn load(path: &Path) -> Result<ConfigDoc> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parse from text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<ConfigDoc> {
        let mut pairs = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Config(format!(
                    "{origin}:{line_no}: expected `key = value`, got {line:?}"
                )));
            };
            let key = line[..eq].trim();
            let value = line[eq + 1..].trim();
            if key.is_empty() {
                return Err(Error::Config(format!(
                    "{origin}:{line_no}: assignment with an empty key"
                )));
            }
            if let Some((_, first)) = pairs.get(key) {
                return Err(Error::Config(format!(
                    "{origin}:{line_no}: key {key:?} already set on line {first}"
                )));
            }
            pairs.insert(key.to_string(), (value.to_string(), line_no));
        }
        Ok(ConfigDoc {
            origin: origin.to_string(),
            pairs,
        })
    }

    fn take_parsed<T, F>(&mut self, key: &str, default: T, parse: F) -> Result<T>
    where
        F: FnOnce(&str) -> Option<T>,
    {
        match self.pairs.remove(key) {
            None => Ok(default),
            Some((value, line)) => parse(&value).ok_or_else(|| {
                Error::Config(format!(
                    "{}:{line}: key {key:?} has unusable value {value:?}",
                    self.origin
                ))
            }),
        }
    }

    pub fn take_usize(&mut self, key: &str, default: usize) -> Result<usize> {
        self.take_parsed(key, default, |v| v.parse().ok())
    }

    pub fn take_f64(&mut self, key: &str, default: f64) -> Result<f64> {
        self.take_parsed(key, default, |v| v.parse().ok())
    }

    pub fn take_string(&mut self, key: &str, default: &str) -> Result<String> {
        self.take_parsed(key, default.to_string(), |v| Some(v.to_string()))
    }

    /// Every key a schema did not consume is an error naming key and line.
    pub fn finish(self) -> Result<()> {
        if let Some((key, (_, line))) = self.pairs.into_iter().next() {
            return Err(Error::Config(format!(
                "{}:{line}: unknown key {key:?}",
                self.origin
            )));
        }
        Ok(())
    }
}

/// Dataset-generation recipe: how many sequences and what each looks like.
/// The seed is deliberately absent — randomness enters through the command
/// line only.
#[derive(Clone, Debug)]
pub struct GenSpec {
    pub count: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprites: usize,
    pub background: Background,
    pub scale: usize,
}

/// Schema: `count, frames, height, width, sprites, background, scale`.
pub fn gen_spec(doc: &mut ConfigDoc) -> Result<GenSpec> {
    let background = match doc.take_string("background", "smooth")?.as_str() {
        "smooth" => Background::Smooth,
        "flat" => Background::Flat,
        other => {
            return Err(Error::Config(format!(
                "background must be \"smooth\" or \"flat\", got {other:?}"
            )))
        }
    };
    Ok(GenSpec {
        count: doc.take_usize("count", 1)?,
        frames: doc.take_usize("frames", 16)?,
        height: doc.take_usize("height", 64)?,
        width: doc.take_usize("width", 64)?,
        sprites: doc.take_usize("sprites", 2)?,
        background,
        scale: doc.take_usize("scale", 4)?,
    })
}

/// Schema: `model.modules, model.blocks, model.dim, model.heads,
/// model.window, model.scale, model.activation`; defaults are the toy
/// reference configuration.
pub fn model_config(doc: &mut ConfigDoc) -> Result<ModelConfig> {
    let toy = ModelConfig::toy();
    let activation: Activation = doc
        .take_string("model.activation", &toy.activation.to_string())?
        .parse()?;
    let cfg = ModelConfig {
        modules: doc.take_usize("model.modules", toy.modules)?,
        blocks_per_module: doc.take_usize("model.blocks", toy.blocks_per_module)?,
        dim: doc.take_usize("model.dim", toy.dim)?,
        heads: doc.take_usize("model.heads", toy.heads)?,
        window: doc.take_usize("model.window", toy.window)?,
        scale: doc.take_usize("model.scale", toy.scale)?,
        activation,
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Schema: `train.clip_len, train.samples_per_video, train.iters,
/// train.base_lr, train.strategy, train.save_every`. The seed comes from
/// the command line; batch size is fixed at 1.
pub fn train_config(doc: &mut ConfigDoc, seed: u64) -> Result<TrainConfig> {
    let strategy: Strategy = doc.take_string("train.strategy", "truncated")?.parse()?;
    let cfg = TrainConfig {
        clip_len: doc.take_usize("train.clip_len", 8)?,
        samples_per_video: doc.take_usize("train.samples_per_video", 4)?,
        iters: doc.take_usize("train.iters", 200)?,
        base_lr: doc.take_f64("train.base_lr", 1e-3)?,
        seed,
        strategy,
        batch: 1,
        save_every: doc.take_usize("train.save_every", 0)?,
    };
    cfg.validate()?;
    Ok(cfg)
}
