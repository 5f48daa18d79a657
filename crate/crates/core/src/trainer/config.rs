//! Training configuration and its flat `key = value` text format.
//!
//! Blank lines and text after `#` are ignored. Every key below may appear at
//! most once per source; later sources (command-line overrides) replace
//! earlier ones (config file), which replace the built-in defaults.
//!
//! | key                    | default      | meaning                                        |
//! |------------------------|--------------|------------------------------------------------|
//! | `seed`                 | 13           | root of every random stream                    |
//! | `deterministic`        | true         | only `true` is supported                       |
//! | `device`               | cpu          | only `cpu` is supported                        |
//! | `precision`            | f64          | only `f64` is supported                        |
//! | `data.train`           | (none)       | training file; synthetic corpus when unset     |
//! | `data.test`            | (none)       | test file; required when `data.train` is set   |
//! | `data.format`          | auto         | `tsv`, `jsonl` or `auto` (by extension)        |
//! | `data.grammar`         | (built-in)   | synthetic grammar file                         |
//! | `data.synthetic_count` | 20000        | synthetic training + held-out sentences        |
//! | `data.test_count`      | 1000         | synthetic test sentences                       |
//! | `data.heldout`         | 0.1          | fraction of training data held out             |
//! | `data.min_count`       | 1 / 2        | vocabulary threshold (synthetic / real)        |
//! | `epochs.mask_pretrain` | 5            | attention classifier pretraining               |
//! | `epochs.warm_start`    | 2            | mask head fit to attention                     |
//! | `epochs.clf_s`         | 5            | frozen sentiment classifier pretraining        |
//! | `epochs.adversarial`   | 10           | adversarial masking                            |
//! | `epochs.stage1`        | 10           | reconstruction only                            |
//! | `epochs.stage2`        | 6            | reconstruction + word polarity                 |
//! | `epochs.stage3`        | 10           | reconstruction + transfer accuracy             |
//! | `epochs.disc`          | 1            | discriminator epochs per stage-3 epoch         |
//! | `epochs.judge`         | 3            | CNN judge used to score real-data transfers    |
//! | `batch_size`           | 32           |                                                |
//! | `lr.mask`              | 1e-3         | masker, clf(C), discriminators, clf(S)         |
//! | `lr.mlm`               | 3e-4         | language model                                 |
//! | `lr.disc`              | 1e-3         | CNN discriminator                              |
//! | `lambda1`..`lambda4`   | 0.2 0.1 0.4 0.3 | masking objective weights                   |
//! | `theta1`..`theta4`     | 0.4 0.2 0.1 0.3 | language-model stage weights                |
//! | `tau`                  | 0.5          | mask threshold                                 |
//! | `mask.embed_dim`       | 64           |                                                |
//! | `mask.hidden`          | 128          | per direction                                  |
//! | `mask.attn_dim`        | 64           |                                                |
//! | `aux.dim`              | 64           | embedding width of the four softmax classifiers|
//! | `aux.salience`         | 5            | label frequency ratio that drops a word from content BoW targets; 0 keeps all |
//! | `aux.pooling`          | normalized   | `normalized` (gate-weighted average) or `mean` (gates over sentence length) |
//! | `mlm.layers`           | 2            |                                                |
//! | `mlm.dim`              | 128          |                                                |
//! | `mlm.heads`            | 4            |                                                |
//! | `mlm.ffn_dim`          | 256          |                                                |
//! | `mlm.max_len`          | 64           |                                                |
//! | `cnn.embed_dim`        | 64           |                                                |
//! | `cnn.widths`           | 2,3,4        |                                                |
//! | `cnn.channels`         | 32           |                                                |

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::cnn::CnnConfig;
use crate::corpus::DatasetFormat;
use crate::disentangle::{LossWeights, Pooling};
use crate::error::{Error, Result};
use crate::mask_model::MaskConfig;
use crate::senti_mlm::MlmConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Epochs {
    pub mask_pretrain: usize,
    pub warm_start: usize,
    pub clf_s: usize,
    pub adversarial: usize,
    pub stage1: usize,
    pub stage2: usize,
    pub stage3: usize,
    pub disc: usize,
    pub judge: usize,
}

impl Default for Epochs {
    fn default() -> Self {
        Epochs {
            mask_pretrain: 5,
            warm_start: 2,
            clf_s: 5,
            adversarial: 10,
            stage1: 10,
            stage2: 6,
            stage3: 10,
            disc: 1,
            judge: 3,
        }
    }
}

impl Epochs {
    pub fn zero() -> Self {
        Epochs {
            mask_pretrain: 0,
            warm_start: 0,
            clf_s: 0,
            adversarial: 0,
            stage1: 0,
            stage2: 0,
            stage3: 0,
            disc: 0,
            judge: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub format: Option<DatasetFormat>,
    pub grammar: Option<PathBuf>,
    pub synthetic_count: usize,
    pub test_count: usize,
    pub heldout: f64,
    pub min_count: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            test: None,
            format: None,
            grammar: None,
            synthetic_count: 20000,
            test_count: 1000,
            heldout: 0.1,
            min_count: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub epochs: Epochs,
    pub batch_size: usize,
    pub lr_mask: f64,
    pub lr_mlm: f64,
    pub lr_disc: f64,
    pub weights: LossWeights,
    pub mask: MaskConfig,
    pub aux_dim: usize,
    pub aux_salience: f64,
    pub aux_pooling: Pooling,
    pub mlm: MlmConfig,
    pub cnn: CnnConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 13,
            data: DataConfig::default(),
            epochs: Epochs::default(),
            batch_size: 32,
            lr_mask: 1e-3,
            lr_mlm: 3e-4,
            lr_disc: 1e-3,
            weights: LossWeights::default(),
            mask: MaskConfig::default(),
            aux_dim: 64,
            aux_salience: 5.0,
            aux_pooling: Pooling::default(),
            mlm: MlmConfig::default(),
            cnn: CnnConfig::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value.parse::<T>().map_err(|e| Error::Config {
        key: key.to_string(),
        message: format!("cannot parse `{value}`: {e}"),
    })
}

fn only(key: &str, value: &str, allowed: &str) -> Result<()> {
    if value == allowed {
        Ok(())
    } else {
        Err(Error::Config {
            key: key.to_string(),
            message: format!("only `{allowed}` is supported, got `{value}`"),
        })
    }
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".to_string(), |p| p.display().to_string())
}

impl TrainConfig {
    /// Sets one key from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "deterministic" => only(key, v, "true")?,
            "device" => only(key, v, "cpu")?,
            "precision" => only(key, v, "f64")?,
            "data.train" => self.data.train = path_or_none(v),
            "data.test" => self.data.test = path_or_none(v),
            "data.format" => {
                self.data.format = match v {
                    "auto" => None,
                    other => Some(DatasetFormat::parse(other).map_err(|_| Error::Config {
                        key: key.to_string(),
                        message: format!("unknown format `{other}`"),
                    })?),
                }
            }
            "data.grammar" => self.data.grammar = path_or_none(v),
            "data.synthetic_count" => self.data.synthetic_count = parse(key, v)?,
            "data.test_count" => self.data.test_count = parse(key, v)?,
            "data.heldout" => self.data.heldout = parse(key, v)?,
            "data.min_count" => {
                self.data.min_count = match v {
                    "auto" => None,
                    other => Some(parse(key, other)?),
                }
            }
            "epochs.mask_pretrain" => self.epochs.mask_pretrain = parse(key, v)?,
            "epochs.warm_start" => self.epochs.warm_start = parse(key, v)?,
            "epochs.clf_s" => self.epochs.clf_s = parse(key, v)?,
            "epochs.adversarial" => self.epochs.adversarial = parse(key, v)?,
            "epochs.stage1" => self.epochs.stage1 = parse(key, v)?,
            "epochs.stage2" => self.epochs.stage2 = parse(key, v)?,
            "epochs.stage3" => self.epochs.stage3 = parse(key, v)?,
            "epochs.disc" => self.epochs.disc = parse(key, v)?,
            "epochs.judge" => self.epochs.judge = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr.mask" => self.lr_mask = parse(key, v)?,
            "lr.mlm" => self.lr_mlm = parse(key, v)?,
            "lr.disc" => self.lr_disc = parse(key, v)?,
            "lambda1" => self.weights.lambda[0] = parse(key, v)?,
            "lambda2" => self.weights.lambda[1] = parse(key, v)?,
            "lambda3" => self.weights.lambda[2] = parse(key, v)?,
            "lambda4" => self.weights.lambda[3] = parse(key, v)?,
            "theta1" => self.weights.theta[0] = parse(key, v)?,
            "theta2" => self.weights.theta[1] = parse(key, v)?,
            "theta3" => self.weights.theta[2] = parse(key, v)?,
            "theta4" => self.weights.theta[3] = parse(key, v)?,
            "tau" => self.mask.tau = parse(key, v)?,
            "mask.embed_dim" => self.mask.embed_dim = parse(key, v)?,
            "mask.hidden" => self.mask.hidden = parse(key, v)?,
            "mask.attn_dim" => self.mask.attn_dim = parse(key, v)?,
            "aux.dim" => self.aux_dim = parse(key, v)?,
            "aux.salience" => self.aux_salience = parse(key, v)?,
            "aux.pooling" => {
                self.aux_pooling = Pooling::parse(v).ok_or_else(|| Error::Config {
                    key: key.to_string(),
                    message: format!("expected `normalized` or `mean`, got `{v}`"),
                })?
            }
            "mlm.layers" => self.mlm.layers = parse(key, v)?,
            "mlm.dim" => self.mlm.dim = parse(key, v)?,
            "mlm.heads" => self.mlm.heads = parse(key, v)?,
            "mlm.ffn_dim" => self.mlm.ffn_dim = parse(key, v)?,
            "mlm.max_len" => self.mlm.max_len = parse(key, v)?,
            "cnn.embed_dim" => self.cnn.embed_dim = parse(key, v)?,
            "cnn.channels" => self.cnn.channels = parse(key, v)?,
            "cnn.widths" => {
                self.cnn.widths = v
                    .split(',')
                    .map(|w| parse::<usize>(key, w.trim()))
                    .collect::<Result<_>>()?
            }
            _ => {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: "unknown configuration key".into(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its current value, in documentation order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let e = &self.epochs;
        let w = &self.weights;
        vec![
            ("seed", self.seed.to_string()),
            ("deterministic", "true".into()),
            ("device", "cpu".into()),
            ("precision", "f64".into()),
            ("data.train", show_path(&self.data.train)),
            ("data.test", show_path(&self.data.test)),
            (
                "data.format",
                self.data.format.map_or("auto".into(), |f| f.as_str().to_string()),
            ),
            ("data.grammar", show_path(&self.data.grammar)),
            ("data.synthetic_count", self.data.synthetic_count.to_string()),
            ("data.test_count", self.data.test_count.to_string()),
            ("data.heldout", self.data.heldout.to_string()),
            (
                "data.min_count",
                self.data.min_count.map_or("auto".into(), |m| m.to_string()),
            ),
            ("epochs.mask_pretrain", e.mask_pretrain.to_string()),
            ("epochs.warm_start", e.warm_start.to_string()),
            ("epochs.clf_s", e.clf_s.to_string()),
            ("epochs.adversarial", e.adversarial.to_string()),
            ("epochs.stage1", e.stage1.to_string()),
            ("epochs.stage2", e.stage2.to_string()),
            ("epochs.stage3", e.stage3.to_string()),
            ("epochs.disc", e.disc.to_string()),
            ("epochs.judge", e.judge.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr.mask", self.lr_mask.to_string()),
            ("lr.mlm", self.lr_mlm.to_string()),
            ("lr.disc", self.lr_disc.to_string()),
            ("lambda1", w.lambda[0].to_string()),
            ("lambda2", w.lambda[1].to_string()),
            ("lambda3", w.lambda[2].to_string()),
            ("lambda4", w.lambda[3].to_string()),
            ("theta1", w.theta[0].to_string()),
            ("theta2", w.theta[1].to_string()),
            ("theta3", w.theta[2].to_string()),
            ("theta4", w.theta[3].to_string()),
            ("tau", self.mask.tau.to_string()),
            ("mask.embed_dim", self.mask.embed_dim.to_string()),
            ("mask.hidden", self.mask.hidden.to_string()),
            ("mask.attn_dim", self.mask.attn_dim.to_string()),
            ("aux.dim", self.aux_dim.to_string()),
            ("aux.salience", self.aux_salience.to_string()),
            ("aux.pooling", self.aux_pooling.name().to_string()),
            ("mlm.layers", self.mlm.layers.to_string()),
            ("mlm.dim", self.mlm.dim.to_string()),
            ("mlm.heads", self.mlm.heads.to_string()),
            ("mlm.ffn_dim", self.mlm.ffn_dim.to_string()),
            ("mlm.max_len", self.mlm.max_len.to_string()),
            ("cnn.embed_dim", self.cnn.embed_dim.to_string()),
            (
                "cnn.widths",
                self.cnn
                    .widths
                    .iter()
                    .map(|w| w.to_string())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("cnn.channels", self.cnn.channels.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                key: format!("line {}", i + 1),
                message: "expected `key = value`".into(),
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config {
                    key: key.to_string(),
                    message: format!("repeated on line {}", i + 1),
                });
            }
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        TrainConfig::from_text(&fs::read_to_string(path)?)
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config {
                key: o.to_string(),
                message: "override must look like key=value".into(),
            })?;
            self.set(k.trim(), v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: key.to_string(),
                message: message.to_string(),
            })
        };
        self.weights.validate()?;
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1");
        }
        for (key, lr) in [("lr.mask", self.lr_mask), ("lr.mlm", self.lr_mlm), ("lr.disc", self.lr_disc)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(key, "must be a positive number");
            }
        }
        if !(self.mask.tau > 0.0 && self.mask.tau < 1.0) {
            return bad("tau", "must lie strictly between 0 and 1");
        }
        if !(0.0..1.0).contains(&self.data.heldout) {
            return bad("data.heldout", "must lie in [0, 1)");
        }
        if self.mlm.heads == 0 || self.mlm.dim % self.mlm.heads != 0 {
            return bad("mlm.heads", "must divide mlm.dim");
        }
        if self.cnn.widths.is_empty() || self.cnn.widths.contains(&0) {
            return bad("cnn.widths", "must be a non-empty list of positive widths");
        }
        if self.data.train.is_some() != self.data.test.is_some() {
            return bad("data.test", "data.train and data.test must be given together");
        }
        if self.data.synthetic_count < 2 || self.data.test_count == 0 {
            return bad("data.synthetic_count", "synthetic corpora need at least 2 training and 1 test sentence");
        }
        if !(self.aux_salience == 0.0 || self.aux_salience >= 1.0) {
            return bad("aux.salience", "must be 0 (disabled) or at least 1");
        }
        if self.epochs.stage3 > 0 && self.epochs.disc == 0 {
            return bad("epochs.disc", "stage 3 needs a trained discriminator");
        }
        if self.data.min_count == Some(0) {
            return bad("data.min_count", "must be at least 1");
        }
        Ok(())
    }

    /// SHA-256 of the canonical text form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Deterministic seed for a named random stream.
    pub fn stream_seed(&self, stream: &str) -> u64 {
        let h = Sha256::digest(format!("{}/{stream}", self.seed).as_bytes());
        u64::from_le_bytes(h[..8].try_into().expect("digest has 32 bytes"))
    }
}
