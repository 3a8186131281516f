//! Run configuration: `section.key = value` lines, `#` starts a comment.
//!
//! ```text
//! model.layers = 3
//! train.initial_lr = 1e-4   # Adam step size
//! eval.transforms = identity, resize:0.5
//! ```

use std::fmt::Display;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::Transform;
use crate::network::ModelConfig;
use crate::training::TrainConfig;

/// Synthetic data settings.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub image_size: usize,
    pub train_seed: u64,
    pub val_seed: u64,
    pub val_count: usize,
    pub eval_seed: u64,
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { image_size: 32, train_seed: 1, val_seed: 2, val_count: 24, eval_seed: 3, eval_count: 60 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub threshold: f64,
    pub transforms: Vec<Transform>,
    /// Thresholds tried by the F1 sweep.
    pub sweep_grid: Vec<f64>,
    /// Seeds the additive-noise transform.
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            transforms: vec![Transform::Identity],
            sweep_grid: crate::metrics::default_threshold_grid(),
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| Error::Config { line, reason: format!("bad value `{value}` for `{key}`: {e}") })
}

fn parse_list(line: usize, key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(line, key, v.trim())).collect()
}

fn join<T: Display>(items: &[T]) -> String {
    items.iter().map(ToString::to_string).collect::<Vec<_>>().join(", ")
}

/// Splits config text into `(line number, key, value)` triples.
fn entries(text: &str) -> Result<Vec<(usize, String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config { line: i + 1, reason: format!("expected `key = value`, found `{line}`") })?;
        out.push((i + 1, key.trim().to_string(), value.trim().to_string()));
    }
    Ok(out)
}

fn set_model(m: &mut ModelConfig, line: usize, key: &str, name: &str, value: &str) -> Result<()> {
    match name {
        "feature_depth" => m.feature_depth = parse(line, key, value)?,
        "attention_depth" => m.attention_depth = parse(line, key, value)?,
        "layers" => m.layers = parse(line, key, value)?,
        "radius" => m.radius = parse(line, key, value)?,
        "dilations" => {
            m.dilations = match value {
                "default" => None,
                v => Some(parse_list(line, key, v)?),
            }
        }
        "fusion" => m.fusion = parse(line, key, value)?,
        "position_mode" => m.position_mode = parse(line, key, value)?,
        "feature_resize" => {
            m.feature_resize = match value {
                "off" => None,
                v => Some(parse(line, key, v)?),
            }
        }
        "seed" => m.seed = parse(line, key, value)?,
        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    Ok(())
}

fn set_train(t: &mut TrainConfig, line: usize, key: &str, name: &str, value: &str) -> Result<()> {
    match name {
        "batch_size" => t.batch_size = parse(line, key, value)?,
        "steps_per_epoch" => t.steps_per_epoch = parse(line, key, value)?,
        "initial_lr" => t.initial_lr = parse(line, key, value)?,
        "lr_floor" => t.lr_floor = parse(line, key, value)?,
        "lr_patience" => t.lr_patience = parse(line, key, value)?,
        "stop_patience" => t.stop_patience = parse(line, key, value)?,
        "max_epochs" => t.max_epochs = parse(line, key, value)?,
        "seed" => t.seed = parse(line, key, value)?,
        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    Ok(())
}

fn set_data(d: &mut DataConfig, line: usize, key: &str, name: &str, value: &str) -> Result<()> {
    match name {
        "image_size" => d.image_size = parse(line, key, value)?,
        "train_seed" => d.train_seed = parse(line, key, value)?,
        "val_seed" => d.val_seed = parse(line, key, value)?,
        "val_count" => d.val_count = parse(line, key, value)?,
        "eval_seed" => d.eval_seed = parse(line, key, value)?,
        "eval_count" => d.eval_count = parse(line, key, value)?,
        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    Ok(())
}

fn set_eval(e: &mut EvalConfig, line: usize, key: &str, name: &str, value: &str) -> Result<()> {
    match name {
        "threshold" => e.threshold = parse(line, key, value)?,
        "transforms" => {
            e.transforms = crate::metrics::parse_transforms(value)
                .map_err(|err| Error::Config { line, reason: err.to_string() })?
        }
        "sweep_grid" => e.sweep_grid = value.split(',').map(|v| parse(line, key, v.trim())).collect::<Result<_>>()?,
        "seed" => e.seed = parse(line, key, value)?,
        _ => return Err(Error::UnknownKey(key.to_string())),
    }
    Ok(())
}

impl RunConfig {
    /// Parses config text on top of the defaults, then validates the result.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (line, key, value) in entries(text)? {
            let (section, name) = key.split_once('.').ok_or_else(|| Error::UnknownKey(key.clone()))?;
            match section {
                "model" => set_model(&mut cfg.model, line, &key, name, &value)?,
                "train" => set_train(&mut cfg.train, line, &key, name, &value)?,
                "data" => set_data(&mut cfg.data, line, &key, name, &value)?,
                "eval" => set_eval(&mut cfg.eval, line, &key, name, &value)?,
                _ => return Err(Error::UnknownKey(key)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.data.image_size < crate::datagen::MIN_SIDE {
            return Err(Error::TooSmall {
                height: self.data.image_size,
                width: self.data.image_size,
                min: crate::datagen::MIN_SIDE,
            });
        }
        if self.data.val_count == 0 || self.data.eval_count == 0 {
            return Err(Error::InvalidArgument("val_count and eval_count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::InvalidArgument(format!("threshold must lie in [0, 1], got {}", self.eval.threshold)));
        }
        if self.eval.sweep_grid.is_empty() || self.eval.sweep_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return Err(Error::InvalidArgument(format!(
                "sweep_grid must be a nonempty list inside (0, 1), got {:?}",
                self.eval.sweep_grid
            )));
        }
        Ok(())
    }

    /// Every key with its current value; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let d = &self.data;
        let e = &self.eval;
        let mut s = model_text(&self.model);
        s.push_str(&format!(
            "train.batch_size = {}\ntrain.steps_per_epoch = {}\ntrain.initial_lr = {:e}\ntrain.lr_floor = {:e}\n\
             train.lr_patience = {}\ntrain.stop_patience = {}\ntrain.max_epochs = {}\ntrain.seed = {}\n",
            t.batch_size,
            t.steps_per_epoch,
            t.initial_lr,
            t.lr_floor,
            t.lr_patience,
            t.stop_patience,
            t.max_epochs,
            t.seed
        ));
        s.push_str(&format!(
            "data.image_size = {}\ndata.train_seed = {}\ndata.val_seed = {}\ndata.val_count = {}\n\
             data.eval_seed = {}\ndata.eval_count = {}\n",
            d.image_size, d.train_seed, d.val_seed, d.val_count, d.eval_seed, d.eval_count
        ));
        s.push_str(&format!(
            "eval.threshold = {}\neval.transforms = {}\neval.sweep_grid = {}\neval.seed = {}\n",
            e.threshold,
            join(&e.transforms),
            join(&e.sweep_grid),
            e.seed
        ));
        s
    }
}

/// The `model` section alone.
pub fn model_text(m: &ModelConfig) -> String {
    format!(
        "model.feature_depth = {}\nmodel.attention_depth = {}\nmodel.layers = {}\nmodel.radius = {}\n\
         model.dilations = {}\nmodel.fusion = {}\nmodel.position_mode = {}\nmodel.feature_resize = {}\nmodel.seed = {}\n",
        m.feature_depth,
        m.attention_depth,
        m.layers,
        m.radius,
        m.dilations.as_deref().map_or("default".to_string(), join),
        m.fusion,
        m.position_mode,
        m.feature_resize.map_or("off".to_string(), |s| s.to_string()),
        m.seed
    )
}

/// Parses text holding only `model.*` keys.
pub fn parse_model_text(text: &str) -> Result<ModelConfig> {
    let mut m = ModelConfig::default();
    for (line, key, value) in entries(text)? {
        match key.split_once('.') {
            Some(("model", name)) => set_model(&mut m, line, &key, name, &value)?,
            _ => return Err(Error::UnknownKey(key)),
        }
    }
    m.validate()?;
    Ok(m)
}
