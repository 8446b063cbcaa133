//! Flat `key = value` configuration with `#` comments.
//!
//! Every key is declared in [`KEYS`]; unknown keys are rejected both in files
//! and in overrides. Keys without a default must be set by whoever needs them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::dau::{Mode, MuGradient};
use crate::data::{load_cifar10, load_idx, make_synthetic_displacement, DataSplit};
use crate::error::{Error, Result};
use crate::network::{parse_input, DauLayerSpec, NetworkSpec};
use crate::optim::{Schedule, TrainConfig};
use crate::train::{TrainOptions, RNG_ID};

/// `(key, default, description)`.
pub const KEYS: &[(&str, Option<&str>, &str)] = &[
    ("net.input", None, "input shape CxHxW"),
    ("net.classes", None, "number of classes"),
    ("net.layers", None, "comma-separated layer list, e.g. `dau:8, relu, maxpool:2, dense:10, softmax_xent`"),
    ("net.seed", Some("1"), "parameter initialisation seed"),
    ("net.mu_gradient", Some("surrogate"), "displacement gradient of the efficient path: surrogate or exact"),
    ("dau.units", Some("2"), "default units per (output, input) channel pair"),
    ("dau.sigma", Some("0.5"), "default Gaussian standard deviation"),
    ("dau.dmax", Some("4"), "default displacement clamp"),
    ("dau.mode", Some("efficient"), "default DAU mode: efficient or general"),
    ("dau.learn_sigma", Some("false"), "default for per-unit learnable sigma"),
    ("dau.mu_init", Some("1.5"), "displacements start uniform on [-mu_init, mu_init]"),
    ("train.lr", Some("0.01"), "base learning rate"),
    ("train.momentum", Some("0.9"), "momentum"),
    ("train.weight_decay", Some("0.0005"), "L2 weight decay"),
    ("train.batch_size", Some("32"), "items per step"),
    ("train.iterations", Some("1000"), "total optimiser steps"),
    ("train.schedule", Some("step"), "learning-rate schedule: step or poly"),
    ("train.lr_drops", Some(""), "comma-separated steps where the step schedule multiplies by lr_factor"),
    ("train.lr_factor", Some("0.1"), "step schedule factor"),
    ("train.poly_power", Some("0.9"), "poly schedule exponent"),
    ("train.mu_lr_mult", Some("500"), "learning-rate multiplier of displacements"),
    ("train.seed", Some("1"), "shuffle and augmentation seed"),
    ("train.rng", Some(RNG_ID), "sampling algorithm identifier"),
    ("train.mirror", Some("false"), "random horizontal mirroring"),
    ("train.log_every", Some("100"), "steps between history rows and checkpoints"),
    ("train.eval_batch", Some("256"), "items per evaluation batch"),
    ("data.kind", Some("synthetic"), "cifar10, idx or synthetic"),
    ("data.dir", None, "CIFAR-10 binary directory"),
    ("data.train_images", None, "IDX training images"),
    ("data.train_labels", None, "IDX training labels"),
    ("data.test_images", None, "IDX test images"),
    ("data.test_labels", None, "IDX test labels"),
    ("data.n_train", Some("2000"), "synthetic training items"),
    ("data.n_test", Some("1000"), "synthetic test items"),
    ("data.seed", Some("1"), "synthetic data seed"),
    ("data.limit", Some("0"), "use only the first N training items (0 = all)"),
    ("prune.threshold", Some("0"), "relative pruning threshold in [0, 1]"),
    ("prune.scope", Some("layer"), "threshold reference: layer or global"),
    ("analyze.erf_layer", Some("0"), "layer whose output the receptive field is computed for"),
    ("analyze.erf_probe", Some("ones"), "ones or data"),
    ("analyze.erf_samples", Some("16"), "test items averaged by the data probe"),
    ("bench.warmup", Some("3"), "untimed iterations"),
    ("bench.iters", Some("20"), "timed iterations"),
    ("bench.channels", Some("64"), "input and output channels"),
    ("bench.size", Some("32"), "input side"),
    ("bench.batch", Some("1"), "items per pass"),
    ("bench.units", Some("2"), "units per channel pair"),
    ("bench.sigma", Some("0.5"), "Gaussian standard deviation"),
    ("bench.dmax", Some("4"), "displacement clamp"),
    ("gradcheck.seed", Some("1"), "seed of the random problems"),
];

fn declared(key: &str) -> Option<&'static (&'static str, Option<&'static str>, &'static str)> {
    KEYS.iter().find(|(k, _, _)| *k == key)
}

/// Parsed configuration; only explicitly set keys are stored.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Config::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            c.set_line(line)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
        Self::parse(&text)
    }

    /// Applies one `key=value` override.
    pub fn set_line(&mut self, line: &str) -> Result<()> {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("`{line}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if declared(key).is_none() {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        match self.values.get(key) {
            Some(v) => Some(v),
            None => declared(key).and_then(|d| d.1),
        }
    }

    /// Fails with every missing key listed.
    pub fn require(&self, keys: &[&str]) -> Result<()> {
        let missing: Vec<&str> = keys.iter().copied().filter(|k| self.get(k).is_none()).collect();
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!("missing required keys: {}", missing.join(", "))))
        }
    }

    fn value<V: std::str::FromStr>(&self, key: &str) -> Result<V> {
        let raw = self
            .get(key)
            .ok_or_else(|| Error::Config(format!("missing required keys: {key}")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("bad value `{raw}` for `{key}`")))
    }

    fn path(&self, key: &str) -> Result<PathBuf> {
        self.value::<String>(key).map(PathBuf::from)
    }

    /// Every key with its effective value, one `key = value` line each.
    pub fn canonical(&self) -> String {
        KEYS.iter()
            .filter_map(|(k, _, _)| self.get(k).map(|v| format!("{k} = {v}\n")))
            .collect()
    }

    /// SHA-256 of [`Self::canonical`], hex encoded.
    pub fn hash(&self) -> String {
        sha256_hex(self.canonical().as_bytes())
    }

    pub fn dau_defaults(&self) -> Result<DauLayerSpec> {
        let mut d = DauLayerSpec::new(1);
        d.units = self.value("dau.units")?;
        d.sigma = self.value("dau.sigma")?;
        d.dmax = self.value("dau.dmax")?;
        d.mode = self.value::<String>("dau.mode")?.parse::<Mode>()?;
        d.learn_sigma = self.value("dau.learn_sigma")?;
        d.mu_init = self.value("dau.mu_init")?;
        Ok(d)
    }

    pub fn network_spec(&self) -> Result<NetworkSpec> {
        self.require(&["net.input", "net.classes", "net.layers"])?;
        Ok(NetworkSpec {
            input: parse_input(&self.value::<String>("net.input")?)?,
            classes: self.value("net.classes")?,
            layers: NetworkSpec::parse_layers(&self.value::<String>("net.layers")?, &self.dau_defaults()?)?,
            seed: self.value("net.seed")?,
        })
    }

    pub fn mu_gradient(&self) -> Result<MuGradient> {
        match self.value::<String>("net.mu_gradient")?.as_str() {
            "surrogate" => Ok(MuGradient::Surrogate),
            "exact" => Ok(MuGradient::Exact),
            other => Err(Error::Config(format!("unknown mu gradient `{other}` (surrogate, exact)"))),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let schedule = match self.value::<String>("train.schedule")?.as_str() {
            "step" => {
                let drops = self.value::<String>("train.lr_drops")?;
                let drops = drops
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|_| Error::Config(format!("bad lr drop `{s}`"))))
                    .collect::<Result<Vec<usize>>>()?;
                Schedule::Step {
                    drops,
                    factor: self.value("train.lr_factor")?,
                }
            }
            "poly" => Schedule::Poly {
                power: self.value("train.poly_power")?,
            },
            other => return Err(Error::Config(format!("unknown schedule `{other}` (step, poly)"))),
        };
        let cfg = TrainConfig {
            base_lr: self.value("train.lr")?,
            momentum: self.value("train.momentum")?,
            weight_decay: self.value("train.weight_decay")?,
            batch_size: self.value("train.batch_size")?,
            total_iterations: self.value("train.iterations")?,
            schedule,
            mu_lr_multiplier: self.value("train.mu_lr_mult")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_options(&self) -> Result<TrainOptions> {
        let rng: String = self.value("train.rng")?;
        if rng != RNG_ID {
            return Err(Error::Config(format!("unsupported train.rng `{rng}` (only `{RNG_ID}`)")));
        }
        Ok(TrainOptions {
            seed: self.value("train.seed")?,
            mirror: self.value("train.mirror")?,
            log_every: self.value("train.log_every")?,
            eval_batch: self.value("train.eval_batch")?,
        })
    }

    /// Loads the configured dataset. `data.limit` truncates the training split.
    pub fn data(&self) -> Result<DataSplit> {
        let mut split = match self.value::<String>("data.kind")?.as_str() {
            "synthetic" => make_synthetic_displacement(
                self.value("data.n_train")?,
                self.value("data.n_test")?,
                self.value("data.seed")?,
            )?,
            "cifar10" => {
                self.require(&["data.dir"])?;
                load_cifar10(&self.path("data.dir")?)?
            }
            "idx" => {
                self.require(&["data.train_images", "data.train_labels", "data.test_images", "data.test_labels"])?;
                let train = load_idx(&self.path("data.train_images")?, &self.path("data.train_labels")?)?;
                let test = load_idx(&self.path("data.test_images")?, &self.path("data.test_labels")?)?;
                if train.item_shape() != test.item_shape() {
                    return Err(Error::Data("IDX train and test images differ in shape".into()));
                }
                DataSplit { train, test }.normalized()
            }
            other => return Err(Error::Config(format!("unknown data.kind `{other}` (cifar10, idx, synthetic)"))),
        };
        let limit: usize = self.value("data.limit")?;
        if limit > 0 {
            split.train = split.train.truncated(limit);
        }
        Ok(split)
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        self.value(key)
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        self.value(key)
    }

    pub fn string(&self, key: &str) -> Result<String> {
        self.value(key)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
