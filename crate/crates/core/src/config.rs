//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::decoder::SkipMode;
use crate::encoder::{TokenLayout, DEFAULT_CHANNELS};
use crate::error::{Error, Result};
use crate::objective::LossWeights;
use crate::tokenizer::Strategy;
use crate::volume::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Normalization {
    MinMax,
    ZScore,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopMetric {
    Dice,
    Loss,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub channels: Vec<usize>,
    pub token_dim: usize,
    pub layout: TokenLayout,
    pub k: usize,
    pub codebook_size: usize,
    pub strategy: Strategy,
    pub skip_mode: SkipMode,
    pub normalization: Normalization,
    pub weights: LossWeights,
    pub theta: f64,
    pub base_lr: f64,
    pub min_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub stop_metric: StopMetric,
    pub seed: u64,
    pub log_wall_time: bool,
    /// Volume shape the parameters were trained on, once known.
    pub input_dims: Option<Dims>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            channels: DEFAULT_CHANNELS.to_vec(),
            token_dim: 64,
            layout: TokenLayout::default(),
            k: 100,
            codebook_size: 512,
            strategy: Strategy::Combined,
            skip_mode: SkipMode::TokenGated,
            normalization: Normalization::MinMax,
            weights: LossWeights::default(),
            theta: 0.5,
            base_lr: 1e-4,
            min_lr: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-5,
            batch_size: 2,
            max_epochs: 300,
            patience: 30,
            stop_metric: StopMetric::Dice,
            seed: 0,
            log_wall_time: false,
            input_dims: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

/// `DxHxW`.
pub fn parse_dims(v: &str) -> Result<Dims> {
    let parts: Vec<usize> = v.split('x').map(|p| parse("dims", p.trim())).collect::<Result<_>>()?;
    match parts[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok(Dims::new(d, h, w)),
        _ => Err(Error::Config(format!("dims: expected DxHxW, got {v:?}"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

impl Config {
    pub fn n(&self) -> usize {
        self.layout.total()
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "channels" => self.channels = parse_list(key, v)?,
            "token_dim" => self.token_dim = parse(key, v)?,
            "layout" => self.layout = TokenLayout(parse_list(key, v)?),
            "n" => {
                let n: usize = parse(key, v)?;
                if n != self.n() {
                    return Err(Error::Config(format!(
                        "n = {n} disagrees with layout {} (sum {})",
                        self.layout,
                        self.n()
                    )));
                }
            }
            "levels" => {
                let l: usize = parse(key, v)?;
                if l != self.levels() {
                    return Err(Error::Config(format!(
                        "levels = {l} disagrees with {} channel entries",
                        self.levels()
                    )));
                }
            }
            "k" => self.k = parse(key, v)?,
            "codebook_size" => self.codebook_size = parse(key, v)?,
            "strategy" => self.strategy = v.parse()?,
            "skip_mode" => self.skip_mode = v.parse()?,
            "normalization" => {
                self.normalization = match v {
                    "minmax" => Normalization::MinMax,
                    "zscore" => Normalization::ZScore,
                    _ => return Err(Error::Config(format!("normalization: unknown scheme {v:?}"))),
                }
            }
            "lambda_dice" => self.weights.dice = parse(key, v)?,
            "lambda_bce" => self.weights.bce = parse(key, v)?,
            "lambda_vq" => self.weights.vq = parse(key, v)?,
            "beta" => self.weights.beta = parse(key, v)?,
            "eps" => self.weights.eps = parse(key, v)?,
            "theta" => self.theta = parse(key, v)?,
            "base_lr" => self.base_lr = parse(key, v)?,
            "min_lr" => self.min_lr = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "beta2" => self.beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "max_epochs" => self.max_epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "stop_metric" => {
                self.stop_metric = match v {
                    "dice" => StopMetric::Dice,
                    "loss" => StopMetric::Loss,
                    _ => return Err(Error::Config(format!("stop_metric: expected dice or loss, got {v:?}"))),
                }
            }
            "seed" => self.seed = parse(key, v)?,
            "log_wall_time" => self.log_wall_time = parse(key, v)?,
            "input_dims" => self.input_dims = Some(parse_dims(v)?),
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every line of a config text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", no + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Config> {
        let mut c = Config::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return fail(format!("channels {:?} must be non-empty and positive", self.channels));
        }
        if self.layout.levels() != self.levels() {
            return fail(format!(
                "layout {} has {} levels but channels define {}",
                self.layout,
                self.layout.levels(),
                self.levels()
            ));
        }
        if self.layout.0.contains(&0) {
            return fail(format!("layout {} has an empty level", self.layout));
        }
        if self.k == 0 || self.k > self.n() {
            return fail(format!("k = {} outside 1..={}", self.k, self.n()));
        }
        if self.codebook_size < 2 || self.token_dim == 0 {
            return fail(format!(
                "codebook_size {} (needs >= 2) or token_dim {} invalid",
                self.codebook_size, self.token_dim
            ));
        }
        self.weights.validate()?;
        if !(0.0..=1.0).contains(&self.theta) {
            return fail(format!("theta {} outside [0, 1]", self.theta));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr && self.base_lr.is_finite()) {
            return fail(format!("need 0 <= min_lr ({}) <= base_lr ({})", self.min_lr, self.base_lr));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) || self.adam_eps <= 0.0 {
            return fail("adam betas must lie in [0, 1) and adam_eps be positive".into());
        }
        if self.weight_decay < 0.0 {
            return fail(format!("weight_decay {} is negative", self.weight_decay));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return fail("batch_size and max_epochs must be >= 1".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        Ok(())
    }

    /// Canonical text form; parsing it back yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &self.weights;
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").unwrap();
        kv("channels", join(&self.channels));
        kv("token_dim", self.token_dim.to_string());
        kv("layout", self.layout.to_string());
        kv("n", self.n().to_string());
        kv("k", self.k.to_string());
        kv("codebook_size", self.codebook_size.to_string());
        kv("levels", self.levels().to_string());
        kv("strategy", self.strategy.to_string());
        kv("skip_mode", self.skip_mode.to_string());
        kv(
            "normalization",
            match self.normalization {
                Normalization::MinMax => "minmax",
                Normalization::ZScore => "zscore",
            }
            .into(),
        );
        kv("lambda_dice", format!("{:?}", w.dice));
        kv("lambda_bce", format!("{:?}", w.bce));
        kv("lambda_vq", format!("{:?}", w.vq));
        kv("beta", format!("{:?}", w.beta));
        kv("eps", format!("{:?}", w.eps));
        kv("theta", format!("{:?}", self.theta));
        kv("base_lr", format!("{:?}", self.base_lr));
        kv("min_lr", format!("{:?}", self.min_lr));
        kv("beta1", format!("{:?}", self.beta1));
        kv("beta2", format!("{:?}", self.beta2));
        kv("adam_eps", format!("{:?}", self.adam_eps));
        kv("weight_decay", format!("{:?}", self.weight_decay));
        kv("batch_size", self.batch_size.to_string());
        kv("max_epochs", self.max_epochs.to_string());
        kv("patience", self.patience.to_string());
        kv(
            "stop_metric",
            match self.stop_metric {
                StopMetric::Dice => "dice",
                StopMetric::Loss => "loss",
            }
            .into(),
        );
        kv("seed", self.seed.to_string());
        kv("log_wall_time", self.log_wall_time.to_string());
        if let Some(d) = self.input_dims {
            kv("input_dims", d.to_string());
        }
        s
    }
}
