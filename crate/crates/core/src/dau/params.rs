use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Smallest standard deviation accepted for a learnable sigma.
pub const MIN_LEARNED_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    /// Dense rasterisation plus convolution; allows per-unit sigma.
    General,
    /// Shared-sigma blur followed by bilinear gathers.
    Efficient,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::General => "general",
            Mode::Efficient => "efficient",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(Mode::General),
            "efficient" => Ok(Mode::Efficient),
            other => Err(Error::Config(format!("unknown DAU mode `{other}`"))),
        }
    }
}

/// Static configuration of one DAU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DauConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub units: usize,
    /// Shared standard deviation in pixels (initial value when learnable).
    pub sigma: f64,
    /// Largest allowed displacement component in pixels.
    pub max_displacement: f64,
    pub mode: Mode,
    pub sigma_learnable: bool,
}

impl DauConfig {
    pub fn new(in_channels: usize, out_channels: usize, units: usize) -> Self {
        DauConfig {
            in_channels,
            out_channels,
            units,
            sigma: 0.5,
            max_displacement: 4.0,
            mode: Mode::Efficient,
            sigma_learnable: false,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = sigma;
        self
    }

    pub fn with_max_displacement(mut self, dmax: f64) -> Self {
        self.max_displacement = dmax;
        self
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    pub fn with_sigma_learnable(mut self, learnable: bool) -> Self {
        self.sigma_learnable = learnable;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.units == 0 {
            return Err(Error::Parameter("a DAU filter needs at least one unit".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Parameter("DAU channel counts must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Parameter(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.max_displacement > 0.0 && self.max_displacement.is_finite()) {
            return Err(Error::Parameter(format!(
                "max displacement must be > 0, got {}",
                self.max_displacement
            )));
        }
        if self.mode == Mode::Efficient && self.sigma_learnable {
            return Err(Error::Parameter(
                "the efficient path requires a shared, fixed sigma".into(),
            ));
        }
        if self.sigma_learnable && self.sigma < MIN_LEARNED_SIGMA {
            return Err(Error::Parameter(format!(
                "learnable sigma must start at >= {MIN_LEARNED_SIGMA}, got {}",
                self.sigma
            )));
        }
        Ok(())
    }

    pub fn unit_count(&self) -> usize {
        self.out_channels * self.in_channels * self.units
    }

    #[inline]
    pub fn unit_index(&self, f: usize, s: usize, k: usize) -> usize {
        (f * self.in_channels + s) * self.units + k
    }
}

/// Standard deviation storage: one value per layer or one per unit.
#[derive(Debug, Clone, PartialEq)]
pub enum Sigma<T> {
    Shared(T),
    PerUnit(Vec<T>),
}

impl<T: Scalar> Sigma<T> {
    #[inline]
    pub fn get(&self, unit: usize) -> T {
        match self {
            Sigma::Shared(s) => *s,
            Sigma::PerUnit(v) => v[unit],
        }
    }

    pub fn max(&self) -> T {
        match self {
            Sigma::Shared(s) => *s,
            Sigma::PerUnit(v) => v.iter().copied().fold(T::zero(), T::max),
        }
    }

    pub fn values(&self) -> &[T] {
        match self {
            Sigma::Shared(s) => std::slice::from_ref(s),
            Sigma::PerUnit(v) => v,
        }
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        match self {
            Sigma::Shared(s) => std::slice::from_mut(s),
            Sigma::PerUnit(v) => v,
        }
    }
}

/// Learnable state of a DAU layer. Unit arrays are laid out `[f][s][k]`;
/// displacements store `(mu_y, mu_x)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct DauParams<T> {
    pub weight: Vec<T>,
    pub mu: Vec<T>,
    pub sigma: Sigma<T>,
    pub bias: Vec<T>,
    /// Pruned units are inactive: they contribute nothing and receive no gradient.
    pub active: Vec<bool>,
}

impl<T: Scalar> DauParams<T> {
    /// All weights zero, displacements zero, sigma from the config.
    pub fn zeros(cfg: &DauConfig) -> Self {
        let units = cfg.unit_count();
        let sigma = if cfg.sigma_learnable {
            Sigma::PerUnit(vec![T::of(cfg.sigma); units])
        } else {
            Sigma::Shared(T::of(cfg.sigma))
        };
        DauParams {
            weight: vec![T::zero(); units],
            mu: vec![T::zero(); 2 * units],
            sigma,
            bias: vec![T::zero(); cfg.out_channels],
            active: vec![true; units],
        }
    }

    /// Glorot-uniform weights with fan-in `S*K` and fan-out `F*K`,
    /// displacements uniform on `[-mu_range, mu_range]`, zero bias.
    pub fn init<R: Rng>(cfg: &DauConfig, mu_range: f64, rng: &mut R) -> Self {
        let mut p = Self::zeros(cfg);
        let fan_in = (cfg.in_channels * cfg.units) as f64;
        let fan_out = (cfg.out_channels * cfg.units) as f64;
        let limit = (6.0 / (fan_in + fan_out)).sqrt();
        for w in &mut p.weight {
            *w = T::of(rng.gen_range(-limit..limit));
        }
        if mu_range > 0.0 {
            for m in &mut p.mu {
                *m = T::of(rng.gen_range(-mu_range..=mu_range));
            }
        }
        p
    }

    #[inline]
    pub fn mu_at(&self, unit: usize) -> (T, T) {
        (self.mu[2 * unit], self.mu[2 * unit + 1])
    }

    pub fn units(&self) -> usize {
        self.weight.len()
    }

    /// Checks array sizes, the displacement clamp and sigma positivity.
    pub fn validate(&self, cfg: &DauConfig) -> Result<()> {
        let units = cfg.unit_count();
        if self.weight.len() != units || self.mu.len() != 2 * units || self.active.len() != units {
            return Err(Error::dim("DauParams units", units, self.weight.len()));
        }
        if self.bias.len() != cfg.out_channels {
            return Err(Error::dim("DauParams bias", cfg.out_channels, self.bias.len()));
        }
        match (&self.sigma, cfg.sigma_learnable) {
            (Sigma::PerUnit(v), true) if v.len() == units => {}
            (Sigma::Shared(_), false) => {}
            _ => {
                return Err(Error::Parameter(
                    "sigma storage does not match the layer configuration".into(),
                ))
            }
        }
        if let Some(bad) = self.sigma.values().iter().find(|s| !(s.f64() > 0.0)) {
            return Err(Error::Parameter(format!("sigma must be > 0, got {bad}")));
        }
        let dmax = cfg.max_displacement;
        if let Some(i) = self.mu.iter().position(|m| !(m.f64().abs() <= dmax)) {
            return Err(Error::Parameter(format!(
                "displacement component {} of unit {} is outside [-{dmax}, {dmax}]",
                self.mu[i],
                i / 2
            )));
        }
        Ok(())
    }
}

/// Clips every displacement component to `[-dmax, dmax]`. Values already in
/// range are left bit-identical.
pub fn clamp_displacements<T: Scalar>(params: &mut DauParams<T>, dmax: f64) {
    clamp_slice(&mut params.mu, dmax);
}

pub(crate) fn clamp_slice<T: Scalar>(mu: &mut [T], dmax: f64) {
    let hi = T::of(dmax);
    let lo = -hi;
    for m in mu {
        if *m > hi {
            *m = hi;
        } else if *m < lo {
            *m = lo;
        }
    }
}

/// Gradients of a DAU layer's parameters, laid out like [`DauParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct DauGrads<T> {
    pub weight: Vec<T>,
    pub mu: Vec<T>,
    /// Empty when sigma is not learnable.
    pub sigma: Vec<T>,
    pub bias: Vec<T>,
}
