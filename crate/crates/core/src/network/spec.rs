use std::fmt;

use crate::dau::Mode;
use crate::error::{Error, Result};

/// Options of a DAU layer that the layer string may override.
#[derive(Debug, Clone, PartialEq)]
pub struct DauLayerSpec {
    pub out: usize,
    pub units: usize,
    pub sigma: f64,
    pub dmax: f64,
    pub mode: Mode,
    pub learn_sigma: bool,
    /// Displacements start uniform on `[-mu_init, mu_init]`.
    pub mu_init: f64,
}

impl DauLayerSpec {
    pub fn new(out: usize) -> Self {
        DauLayerSpec {
            out,
            units: 2,
            sigma: 0.5,
            dmax: 4.0,
            mode: Mode::Efficient,
            learn_sigma: false,
            mu_init: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Dau(DauLayerSpec),
    /// Plain stride-1 "same" convolution with a `size x size` kernel.
    Conv { out: usize, size: usize },
    MaxPool { size: usize, stride: usize },
    BatchNorm,
    Relu,
    /// `inputs`, when given, must match the flattened input size.
    Dense { out: usize, inputs: Option<usize> },
    SoftmaxXent,
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dau(_) => "dau",
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::BatchNorm => "bn",
            LayerSpec::Relu => "relu",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::SoftmaxXent => "softmax_xent",
        }
    }

    /// Parses one layer, e.g. `dau:32:units=2:sigma=0.4`, `maxpool:2`,
    /// `dense:10`, `bn`. DAU options missing from the string come from `base`.
    pub fn parse(text: &str, base: &DauLayerSpec) -> Result<Self> {
        let mut parts = text.trim().split(':');
        let kind = parts.next().unwrap_or_default().trim();
        let mut positional = None;
        let mut opts = Vec::new();
        for p in parts {
            let p = p.trim();
            match p.split_once('=') {
                Some((k, v)) => opts.push((k.trim(), v.trim())),
                None if positional.is_none() && opts.is_empty() => positional = Some(p),
                None => return Err(Error::Config(format!("unexpected `{p}` in layer `{text}`"))),
            }
        }
        let count = |what: &str| -> Result<usize> {
            let v = positional.ok_or_else(|| Error::Config(format!("layer `{text}` needs {what}")))?;
            parse_num(v, text)
        };
        let spec = match kind {
            "dau" => {
                let mut d = base.clone();
                d.out = count("an output channel count")?;
                for &(k, v) in &opts {
                    match k {
                        "units" => d.units = parse_num(v, text)?,
                        "sigma" => d.sigma = parse_num(v, text)?,
                        "dmax" => d.dmax = parse_num(v, text)?,
                        "mode" => d.mode = v.parse()?,
                        "learn_sigma" => d.learn_sigma = parse_num(v, text)?,
                        "mu_init" => d.mu_init = parse_num(v, text)?,
                        _ => return Err(unknown_option(k, text)),
                    }
                }
                return Ok(LayerSpec::Dau(d));
            }
            "conv" => {
                let mut size = 3;
                for &(k, v) in &opts {
                    match k {
                        "size" => size = parse_num(v, text)?,
                        _ => return Err(unknown_option(k, text)),
                    }
                }
                LayerSpec::Conv {
                    out: count("an output channel count")?,
                    size,
                }
            }
            "maxpool" => {
                let size = match positional {
                    Some(v) => parse_num(v, text)?,
                    None => 2,
                };
                let mut stride = size;
                for &(k, v) in &opts {
                    match k {
                        "stride" => stride = parse_num(v, text)?,
                        _ => return Err(unknown_option(k, text)),
                    }
                }
                return Ok(LayerSpec::MaxPool { size, stride });
            }
            "bn" => LayerSpec::BatchNorm,
            "relu" => LayerSpec::Relu,
            "dense" => {
                let mut inputs = None;
                for &(k, v) in &opts {
                    match k {
                        "in" => inputs = Some(parse_num(v, text)?),
                        _ => return Err(unknown_option(k, text)),
                    }
                }
                return Ok(LayerSpec::Dense {
                    out: count("an output count")?,
                    inputs,
                });
            }
            "softmax_xent" => LayerSpec::SoftmaxXent,
            other => return Err(Error::Config(format!("unknown layer kind `{other}`"))),
        };
        if matches!(spec, LayerSpec::BatchNorm | LayerSpec::Relu | LayerSpec::SoftmaxXent)
            && (positional.is_some() || !opts.is_empty())
        {
            return Err(Error::Config(format!("layer `{kind}` takes no options")));
        }
        Ok(spec)
    }
}

fn parse_num<V: std::str::FromStr>(v: &str, text: &str) -> Result<V> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value `{v}` in layer `{text}`")))
}

fn unknown_option(k: &str, text: &str) -> Error {
    Error::Config(format!("unknown option `{k}` in layer `{text}`"))
}

impl fmt::Display for LayerSpec {
    /// Canonical form with every option spelled out; parses back to `self`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Dau(d) => write!(
                f,
                "dau:{}:units={}:sigma={}:dmax={}:mode={}:learn_sigma={}:mu_init={}",
                d.out,
                d.units,
                d.sigma,
                d.dmax,
                d.mode.name(),
                d.learn_sigma,
                d.mu_init
            ),
            LayerSpec::Conv { out, size } => write!(f, "conv:{out}:size={size}"),
            LayerSpec::MaxPool { size, stride } => write!(f, "maxpool:{size}:stride={stride}"),
            LayerSpec::Dense { out, inputs: Some(i) } => write!(f, "dense:{out}:in={i}"),
            LayerSpec::Dense { out, inputs: None } => write!(f, "dense:{out}"),
            other => f.write_str(other.kind()),
        }
    }
}

/// Declarative description of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    /// `(channels, height, width)` of one input item.
    pub input: (usize, usize, usize),
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    pub seed: u64,
}

impl NetworkSpec {
    /// Parses a comma-separated layer list.
    pub fn parse_layers(text: &str, base: &DauLayerSpec) -> Result<Vec<LayerSpec>> {
        text.split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| LayerSpec::parse(s, base))
            .collect()
    }

    pub fn layers_string(&self) -> String {
        self.layers.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", ")
    }

    /// `key = value` lines understood by the config parser.
    pub fn to_text(&self) -> String {
        format!(
            "net.input = {}x{}x{}\nnet.classes = {}\nnet.seed = {}\nnet.layers = {}\n",
            self.input.0,
            self.input.1,
            self.input.2,
            self.classes,
            self.seed,
            self.layers_string()
        )
    }

    /// Inverse of [`Self::to_text`].
    pub fn from_text(text: &str) -> Result<Self> {
        let mut input = None;
        let mut classes = None;
        let mut seed = None;
        let mut layers = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("bad network line `{line}`")))?;
            let v = v.trim();
            match k.trim() {
                "net.input" => input = Some(parse_input(v)?),
                "net.classes" => classes = Some(parse_num(v, line)?),
                "net.seed" => seed = Some(parse_num(v, line)?),
                "net.layers" => layers = Some(Self::parse_layers(v, &DauLayerSpec::new(1))?),
                other => return Err(Error::Config(format!("unknown network key `{other}`"))),
            }
        }
        let missing = |k: &str| Error::Config(format!("network description lacks `{k}`"));
        Ok(NetworkSpec {
            input: input.ok_or_else(|| missing("net.input"))?,
            classes: classes.ok_or_else(|| missing("net.classes"))?,
            seed: seed.ok_or_else(|| missing("net.seed"))?,
            layers: layers.ok_or_else(|| missing("net.layers"))?,
        })
    }
}

/// Parses `CxHxW`.
pub fn parse_input(v: &str) -> Result<(usize, usize, usize)> {
    let dims: Vec<usize> = v
        .split('x')
        .map(|d| d.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("input shape `{v}` is not CxHxW")))?;
    match dims[..] {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Config(format!("input shape `{v}` is not CxHxW"))),
    }
}
