//! SGD with momentum, per-group learning-rate multipliers and selective
//! weight decay.

use std::fmt;
use std::str::FromStr;

use crate::dau::MIN_LEARNED_SIGMA;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// What a parameter array is; decides its decay and learning-rate defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    DauWeight,
    DauMu,
    DauSigma,
    Bias,
    BnAffine,
    /// Dense and plain-convolution weights.
    DenseWeight,
}

impl ParamRole {
    pub const ALL: [ParamRole; 6] = [
        ParamRole::DauWeight,
        ParamRole::DauMu,
        ParamRole::DauSigma,
        ParamRole::Bias,
        ParamRole::BnAffine,
        ParamRole::DenseWeight,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamRole::DauWeight => "dau_weight",
            ParamRole::DauMu => "dau_mu",
            ParamRole::DauSigma => "dau_sigma",
            ParamRole::Bias => "bias",
            ParamRole::BnAffine => "bn_affine",
            ParamRole::DenseWeight => "dense_weight",
        }
    }

    /// Only filter weights are decayed.
    pub fn decays(self) -> bool {
        matches!(self, ParamRole::DauWeight | ParamRole::DenseWeight)
    }
}

impl fmt::Display for ParamRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Optimiser state for one parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub role: ParamRole,
    pub lr_multiplier: f64,
    pub weight_decay_enabled: bool,
    pub velocity: Vec<f64>,
    /// Displacement clamp applied after each update of a `dau_mu` group.
    pub clamp: Option<f64>,
}

impl ParamGroup {
    /// Group with the role's default multiplier (`mu_lr_multiplier` for
    /// displacements, 1 otherwise) and decay setting.
    pub fn new(role: ParamRole, len: usize, mu_lr_multiplier: f64) -> Self {
        ParamGroup {
            role,
            lr_multiplier: if role == ParamRole::DauMu { mu_lr_multiplier } else { 1.0 },
            weight_decay_enabled: role.decays(),
            velocity: vec![0.0; len],
            clamp: None,
        }
    }

    pub fn with_clamp(mut self, dmax: f64) -> Self {
        self.clamp = Some(dmax);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Schedule {
    /// Multiply by `factor` at each listed step.
    Step { drops: Vec<usize>, factor: f64 },
    /// `(1 - step / total) ^ power`.
    Poly { power: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub total_iterations: usize,
    pub schedule: Schedule,
    pub mu_lr_multiplier: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            batch_size: 32,
            total_iterations: 1000,
            schedule: Schedule::Step {
                drops: Vec::new(),
                factor: 0.1,
            },
            mu_lr_multiplier: 500.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) {
            return Err(Error::Config(format!("base_lr must be >= 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.mu_lr_multiplier >= 0.0) {
            return Err(Error::Config("mu_lr_multiplier must be >= 0".into()));
        }
        match &self.schedule {
            Schedule::Step { factor, .. } if !(*factor > 0.0 && *factor <= 1.0) => {
                Err(Error::Config(format!("step factor must be in (0, 1], got {factor}")))
            }
            Schedule::Poly { power } if !(*power >= 0.0) => {
                Err(Error::Config(format!("poly power must be >= 0, got {power}")))
            }
            _ => Ok(()),
        }
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// `step`, or `poly`; parameters are set separately.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "step" => Ok(Schedule::Step {
                drops: Vec::new(),
                factor: 0.1,
            }),
            "poly" => Ok(Schedule::Poly { power: 0.9 }),
            other => Err(Error::Config(format!("unknown schedule `{other}` (step, poly)"))),
        }
    }
}

/// Learning-rate multiplier at `step`.
pub fn lr_schedule(cfg: &TrainConfig, step: usize) -> f64 {
    match &cfg.schedule {
        Schedule::Step { drops, factor } => {
            let passed = drops.iter().filter(|&&d| step >= d).count();
            factor.powi(passed as i32)
        }
        Schedule::Poly { power } => {
            if cfg.total_iterations == 0 {
                return 1.0;
            }
            let t = (step as f64 / cfg.total_iterations as f64).min(1.0);
            (1.0 - t).powf(*power)
        }
    }
}

/// Side effects of an optimiser step worth reporting.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepReport {
    /// Learned sigmas raised to the minimum in this step.
    pub sigma_floored: usize,
}

/// One heavy-ball step on every group:
/// `v <- momentum * v + grad + decay * p`, `p <- p - lr * mult * v`.
///
/// Gradients are checked before anything is touched, so a non-finite value
/// aborts the step with every parameter and velocity unchanged.
pub fn sgd_step<T: Scalar>(
    groups: &mut [ParamGroup],
    params: &mut [&mut [T]],
    grads: &[&[T]],
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepReport> {
    if groups.len() != params.len() || groups.len() != grads.len() {
        return Err(Error::dim("sgd_step groups", groups.len(), params.len().min(grads.len())));
    }
    for (i, ((g, p), gr)) in groups.iter().zip(params.iter()).zip(grads).enumerate() {
        if g.velocity.len() != p.len() || gr.len() != p.len() {
            return Err(Error::Contract(format!(
                "group {i} ({}): {} values, {} gradients, {} velocities",
                g.role,
                p.len(),
                gr.len(),
                g.velocity.len()
            )));
        }
        if let Some(j) = gr.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient {} in group {i} ({}) at index {j}; step {step} skipped",
                gr[j], g.role
            )));
        }
    }
    let lr = cfg.base_lr * lr_schedule(cfg, step);
    let mut report = StepReport::default();
    for ((g, p), gr) in groups.iter_mut().zip(params.iter_mut()).zip(grads) {
        let elr = lr * g.lr_multiplier;
        let decay = if g.weight_decay_enabled { cfg.weight_decay } else { 0.0 };
        for ((v, x), d) in g.velocity.iter_mut().zip(p.iter_mut()).zip(gr.iter()) {
            let xf = x.f64();
            *v = cfg.momentum * *v + d.f64() + decay * xf;
            *x = T::of(xf - elr * *v);
        }
        if let (ParamRole::DauMu, Some(dmax)) = (g.role, g.clamp) {
            crate::dau::clamp_slice(p, dmax);
        }
        if g.role == ParamRole::DauSigma {
            let floor = T::of(MIN_LEARNED_SIGMA);
            for s in p.iter_mut().filter(|s| **s < floor) {
                *s = floor;
                report.sigma_floored += 1;
            }
        }
    }
    Ok(report)
}
