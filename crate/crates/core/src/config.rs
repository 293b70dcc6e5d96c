//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored, keys may appear at most once and
//! unknown keys are rejected. Missing keys keep their defaults. [`RunConfig::emit`]
//! writes every key in a fixed order, so parse-then-emit is byte-stable.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cotuplet::{LossConfig, LossKind};
use crate::error::{Error, Result};
use crate::imageprep::PrepConfig;
use crate::mgrnet::{FusionMode, NetConfig};
use crate::ndgrad::AdamConfig;
use crate::sigsynth::SynthConfig;

pub const MAX_EPOCHS: usize = 80;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub loss_kind: LossKind,
    pub epochs: usize,
    /// Epochs without a validation EER improvement before stopping.
    pub patience: usize,
    /// Batches drawn per epoch; 0 means one pass over every training anchor.
    pub batches_per_epoch: usize,
    /// Images per eval-mode forward pass.
    pub eval_chunk: usize,
    /// Fractions of identities for train, val and test.
    pub split: [f64; 3],
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub net: NetConfig,
    /// Only the crop margin is read from here; the target size is the network input.
    pub crop_margin: usize,
    pub loss: LossConfig,
    pub synth: SynthConfig,
    pub adam: AdamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            loss_kind: LossKind::CoTuplet,
            epochs: MAX_EPOCHS,
            patience: 10,
            batches_per_epoch: 0,
            eval_chunk: 32,
            split: [0.75, 0.125, 0.125],
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("runs"),
            net: NetConfig::desk(),
            crop_margin: PrepConfig::default().crop_margin,
            loss: LossConfig::default(),
            synth: SynthConfig::default(),
            adam: AdamConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list<T: FromStr, const N: usize>(key: &str, value: &str) -> Result<[T; N]> {
    let items: Vec<T> = value.split(',').map(|v| parse(key, v.trim())).collect::<Result<_>>()?;
    let n = items.len();
    items.try_into().map_err(|_| Error::Config(format!("`{key}`: expected {N} comma-separated values, got {n}")))
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Preprocessing settings implied by the network input size.
    pub fn prep(&self) -> PrepConfig {
        PrepConfig { target_height: self.net.input_height, target_width: self.net.input_width, crop_margin: self.crop_margin }
    }

    /// Synthesis settings with the seed taken from the run seed.
    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig { seed: self.seed, ..self.synth.clone() }
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, v)?,
            "loss" => self.loss_kind = v.parse()?,
            "epochs" => self.epochs = parse(key, v)?,
            "patience" => self.patience = parse(key, v)?,
            "batches_per_epoch" => self.batches_per_epoch = parse(key, v)?,
            "eval_chunk" => self.eval_chunk = parse(key, v)?,
            "split" => self.split = parse_list(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "net.input_height" => self.net.input_height = parse(key, v)?,
            "net.input_width" => self.net.input_width = parse(key, v)?,
            "net.conv_channels" => self.net.conv_channels = parse_list(key, v)?,
            "net.attention_dim" => self.net.attention_dim = parse(key, v)?,
            "net.embedding_dim" => self.net.embedding_dim = parse(key, v)?,
            "net.region_width" => self.net.region_width = parse(key, v)?,
            "net.region_width_overlap" => self.net.region_width_overlap = parse(key, v)?,
            "net.region_height" => self.net.region_height = parse(key, v)?,
            "net.region_height_overlap" => self.net.region_height_overlap = parse(key, v)?,
            "net.fusion" => self.net.fusion = v.parse::<FusionMode>()?,
            "prep.crop_margin" => self.crop_margin = parse(key, v)?,
            "loss.k" => self.loss.k = parse(key, v)?,
            "loss.w" => self.loss.w = parse(key, v)?,
            "loss.delta" => self.loss.delta = parse(key, v)?,
            "loss.lambda" => self.loss.lambda = parse(key, v)?,
            "loss.triplet_margin" => self.loss.triplet_margin = parse(key, v)?,
            "synth.identities" => self.synth.identities = parse(key, v)?,
            "synth.genuine" => self.synth.genuine_per_identity = parse(key, v)?,
            "synth.forged" => self.synth.forged_per_identity = parse(key, v)?,
            "synth.height" => self.synth.height = parse(key, v)?,
            "synth.width" => self.synth.width = parse(key, v)?,
            "synth.style_jitter" => self.synth.style_jitter = parse(key, v)?,
            "synth.forgery_distortion" => self.synth.forgery_distortion = parse(key, v)?,
            "adam.learning_rate" => self.adam.learning_rate = parse(key, v)?,
            "adam.decay_factor" => self.adam.decay_factor = parse(key, v)?,
            "adam.decay_every" => self.adam.decay_every = parse(key, v)?,
            "adam.beta1" => self.adam.beta1 = parse(key, v)?,
            "adam.beta2" => self.adam.beta2 = parse(key, v)?,
            "adam.epsilon" => self.adam.epsilon = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in emission order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let n = &self.net;
        let l = &self.loss;
        let s = &self.synth;
        let a = &self.adam;
        vec![
            ("seed", self.seed.to_string()),
            ("loss", self.loss_kind.name().to_string()),
            ("epochs", self.epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batches_per_epoch", self.batches_per_epoch.to_string()),
            ("eval_chunk", self.eval_chunk.to_string()),
            ("split", join(&self.split)),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("net.input_height", n.input_height.to_string()),
            ("net.input_width", n.input_width.to_string()),
            ("net.conv_channels", join(&n.conv_channels)),
            ("net.attention_dim", n.attention_dim.to_string()),
            ("net.embedding_dim", n.embedding_dim.to_string()),
            ("net.region_width", n.region_width.to_string()),
            ("net.region_width_overlap", n.region_width_overlap.to_string()),
            ("net.region_height", n.region_height.to_string()),
            ("net.region_height_overlap", n.region_height_overlap.to_string()),
            ("net.fusion", n.fusion.name().to_string()),
            ("prep.crop_margin", self.crop_margin.to_string()),
            ("loss.k", l.k.to_string()),
            ("loss.w", l.w.to_string()),
            ("loss.delta", l.delta.to_string()),
            ("loss.lambda", l.lambda.to_string()),
            ("loss.triplet_margin", l.triplet_margin.to_string()),
            ("synth.identities", s.identities.to_string()),
            ("synth.genuine", s.genuine_per_identity.to_string()),
            ("synth.forged", s.forged_per_identity.to_string()),
            ("synth.height", s.height.to_string()),
            ("synth.width", s.width.to_string()),
            ("synth.style_jitter", s.style_jitter.to_string()),
            ("synth.forgery_distortion", s.forgery_distortion.to_string()),
            ("adam.learning_rate", a.learning_rate.to_string()),
            ("adam.decay_factor", a.decay_factor.to_string()),
            ("adam.decay_every", a.decay_every.to_string()),
            ("adam.beta1", a.beta1.to_string()),
            ("adam.beta2", a.beta2.to_string()),
            ("adam.epsilon", a.epsilon.to_string()),
        ]
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {}: {m}", lineno + 1)),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn emit(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            writeln!(out, "{k} = {v}").unwrap();
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.emit()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.epochs > MAX_EPOCHS {
            return Err(Error::Config(format!("epochs must lie in 1..={MAX_EPOCHS}, got {}", self.epochs)));
        }
        if self.patience == 0 || self.eval_chunk == 0 {
            return Err(Error::Config("patience and eval_chunk must be >= 1".into()));
        }
        self.net.validate()?;
        self.prep().validate()?;
        self.loss.validate()?;
        self.synth_config().validate()?;
        self.adam.validate()?;
        crate::sigsynth::split_sizes(self.synth.identities, self.split)?;
        let (k, g, f) = (self.loss.k, self.synth.genuine_per_identity, self.synth.forged_per_identity);
        if g < k + 1 || f < k {
            return Err(Error::Config(format!(
                "k = {k} needs at least {} genuine and {k} forged samples per identity (have {g} and {f})",
                k + 1
            )));
        }
        Ok(())
    }
}
