//! Finite-difference suites over every gradient the library computes, in
//! double precision.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dau::{
    backward_efficient, backward_naive, forward_efficient, forward_naive, rasterize_frozen_stencil, DauConfig,
    DauParams, Mode, MuGradient, Rasterizer, Sigma,
};
use crate::error::{Error, Result};
use crate::fd::{finite_diff, max_rel_error, REL_FLOOR};
use crate::nn::{dense_backward, dense_forward, maxpool_backward, maxpool_forward, softmax_xent, BatchNorm};
use crate::tensor::{conv2d, Shape, Tensor};

/// A family of gradients checked together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    DauWeight,
    DauMu,
    DauSigma,
    Bias,
    Input,
    BatchNorm,
    Dense,
    MaxPool,
    SoftmaxXent,
}

impl Group {
    pub const ALL: [Group; 9] = [
        Group::DauWeight,
        Group::DauMu,
        Group::DauSigma,
        Group::Bias,
        Group::Input,
        Group::BatchNorm,
        Group::Dense,
        Group::MaxPool,
        Group::SoftmaxXent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::DauWeight => "dau_weight",
            Group::DauMu => "dau_mu",
            Group::DauSigma => "dau_sigma",
            Group::Bias => "bias",
            Group::Input => "input",
            Group::BatchNorm => "bn",
            Group::Dense => "dense",
            Group::MaxPool => "maxpool",
            Group::SoftmaxXent => "softmax_xent",
        }
    }

    pub fn tolerance(self) -> f64 {
        match self {
            Group::DauMu => 1e-3,
            Group::DauSigma => 1e-5,
            _ => 1e-6,
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradient group `{s}`")))
    }
}

/// Worst comparison of one array within a group.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub group: Group,
    /// Which array, e.g. `gamma` or `input`.
    pub array: &'static str,
    pub rel_error: f64,
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.rel_error < self.group.tolerance()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    /// The worst check of every group, in [`Group::ALL`] order.
    pub fn worst_per_group(&self) -> Vec<&Check> {
        Group::ALL
            .iter()
            .filter_map(|&g| {
                self.checks
                    .iter()
                    .filter(|c| c.group == g)
                    .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
            })
            .collect()
    }

    pub fn failures(&self) -> Vec<&Check> {
        self.checks.iter().filter(|c| !c.passed()).collect()
    }
}

struct Suite {
    fault: Option<Group>,
    checks: Vec<Check>,
}

impl Suite {
    fn compare(&mut self, group: Group, array: &'static str, analytic: &[f64], numeric: &[f64]) {
        let scaled: Vec<f64>;
        let analytic = if self.fault == Some(group) {
            scaled = analytic.iter().map(|a| a * 1.01).collect();
            &scaled
        } else {
            analytic
        };
        let (rel_error, j) = max_rel_error(analytic, numeric, REL_FLOOR);
        self.checks.push(Check {
            group,
            array,
            rel_error,
            coordinate: j,
            analytic: analytic[j],
            numeric: numeric[j],
        });
    }
}

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// Displacements keep at least 0.1 px from integer values so the bilinear
/// stencil does not switch cells under the finite-difference step.
fn random_dau(cfg: &DauConfig, rng: &mut ChaCha8Rng) -> DauParams<f64> {
    let mut p = DauParams::init(cfg, 0.0, rng);
    let lim = cfg.max_displacement - 1.0;
    for m in p.mu.iter_mut() {
        *m = loop {
            let v: f64 = rng.gen_range(-lim..lim);
            let frac = v - v.floor();
            if frac > 0.1 && frac < 0.9 {
                break v;
            }
        };
    }
    for b in p.bias.iter_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    p
}

const H: f64 = 1e-5;

/// Runs every suite. `fault` scales the analytic gradient of one group by
/// 1.01 to prove the suite can fail.
pub fn run(seed: u64, fault: Option<Group>) -> Result<Report> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = Suite {
        fault,
        checks: Vec::new(),
    };

    // efficient path: weights, bias, input and the displacement surrogate
    let cfg = DauConfig::new(2, 3, 2);
    let p = random_dau(&cfg, &mut rng);
    let x = random_tensor(Shape::new(2, 2, 7, 8), &mut rng);
    let delta = random_tensor(Shape::new(2, 3, 7, 8), &mut rng);
    let (_, cache) = forward_efficient(&x, &p, &cfg)?;
    let (gx, g) = backward_efficient(&cache, &delta, &p, &cfg, MuGradient::Surrogate)?;
    let loss = |p: &DauParams<f64>, x: &Tensor<f64>| -> f64 {
        forward_efficient(x, p, &cfg).map_or(f64::NAN, |(z, _)| dot(&z, &delta))
    };
    let with = |f: &dyn Fn(&mut DauParams<f64>)| {
        let mut q = p.clone();
        f(&mut q);
        q
    };
    let num = finite_diff(|v| loss(&with(&|q| q.weight.copy_from_slice(v)), &x), &p.weight, H)?;
    s.compare(Group::DauWeight, "weight", &g.weight, &num);
    let num = finite_diff(|v| loss(&with(&|q| q.bias.copy_from_slice(v)), &x), &p.bias, H)?;
    s.compare(Group::Bias, "dau bias", &g.bias, &num);
    let num = finite_diff(|v| loss(&p, &Tensor::from_vec(x.shape(), v.to_vec()).expect("same shape")), x.data(), H)?;
    s.compare(Group::Input, "dau input", gx.data(), &num);
    let anchors: Vec<(f64, f64)> = (0..p.units()).map(|u| p.mu_at(u)).collect();
    let num = finite_diff(
        |v| {
            let q = with(&|q| q.mu.copy_from_slice(v));
            rasterize_frozen_stencil(&q, &cfg, &anchors)
                .and_then(|bank| conv2d(&x, &bank.rotated(), &q.bias))
                .map_or(f64::NAN, |z| dot(&z, &delta))
        },
        &p.mu,
        H,
    )?;
    s.compare(Group::DauMu, "mu (surrogate)", &g.mu, &num);

    // general path with per-unit sigma
    let cfg = DauConfig::new(2, 2, 2).with_mode(Mode::General).with_sigma_learnable(true);
    let mut p = random_dau(&cfg, &mut rng);
    p.sigma = Sigma::PerUnit((0..p.units()).map(|_| rng.gen_range(0.4..0.9)).collect());
    let delta = random_tensor(Shape::new(2, 2, 7, 8), &mut rng);
    let (_, g) = backward_naive(&x, &delta, &p, &cfg)?;
    let sig = p.sigma.values().to_vec();
    let num = finite_diff(
        |v| {
            let mut q = p.clone();
            q.sigma.values_mut().copy_from_slice(v);
            forward_naive(&x, &q, &cfg, Rasterizer::Analytic).map_or(f64::NAN, |z| dot(&z, &delta))
        },
        &sig,
        H,
    )?;
    s.compare(Group::DauSigma, "sigma", &g.sigma, &num);

    // batch norm in training mode
    let xb = random_tensor(Shape::new(3, 2, 3, 3), &mut rng);
    let db = random_tensor(xb.shape(), &mut rng);
    let mut bn = BatchNorm::<f64>::new(2);
    bn.gamma = vec![rng.gen_range(0.5..1.5), rng.gen_range(-1.5..-0.5)];
    bn.beta = vec![rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let (_, bc) = bn.clone().forward_train(&xb)?;
    let (gxb, bg) = bn.backward(&bc, &db)?;
    let bn_loss = |b: &BatchNorm<f64>, x: &Tensor<f64>| b.clone().forward_train(x).map_or(f64::NAN, |(y, _)| dot(&y, &db));
    let num = finite_diff(|v| bn_loss(&bn, &Tensor::from_vec(xb.shape(), v.to_vec()).expect("same shape")), xb.data(), 1e-4)?;
    s.compare(Group::BatchNorm, "bn input", gxb.data(), &num);
    let num = finite_diff(
        |v| {
            let mut b = bn.clone();
            b.gamma.copy_from_slice(v);
            bn_loss(&b, &xb)
        },
        &bn.gamma,
        H,
    )?;
    s.compare(Group::BatchNorm, "gamma", &bg.gamma, &num);
    let num = finite_diff(
        |v| {
            let mut b = bn.clone();
            b.beta.copy_from_slice(v);
            bn_loss(&b, &xb)
        },
        &bn.beta,
        H,
    )?;
    s.compare(Group::BatchNorm, "beta", &bg.beta, &num);

    // dense
    let xd = random_tensor(Shape::new(3, 2, 2, 2), &mut rng);
    let w: Vec<f64> = (0..4 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let bd: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let dd = random_tensor(Shape::new(3, 4, 1, 1), &mut rng);
    let (gxd, gw, gb) = dense_backward(&xd, &w, &dd)?;
    let dense_loss = |x: &Tensor<f64>, w: &[f64], b: &[f64]| dense_forward(x, w, b).map_or(f64::NAN, |y| dot(&y, &dd));
    let num = finite_diff(|v| dense_loss(&xd, v, &bd), &w, H)?;
    s.compare(Group::Dense, "weight", &gw, &num);
    let num = finite_diff(|v| dense_loss(&xd, &w, v), &bd, H)?;
    s.compare(Group::Dense, "bias", &gb, &num);
    let num = finite_diff(|v| dense_loss(&Tensor::from_vec(xd.shape(), v.to_vec()).expect("same shape"), &w, &bd), xd.data(), H)?;
    s.compare(Group::Dense, "input", gxd.data(), &num);

    // max pooling on well-separated values
    let offset: f64 = rng.gen_range(0.0..1.0);
    let xp = Tensor::from_fn(Shape::new(2, 2, 6, 6), |n, c, y, x| {
        let k = ((n * 2 + c) * 36 + y * 6 + x) as f64;
        (k * 0.7548776662 + offset).fract()
    });
    let dp = random_tensor(Shape::new(2, 2, 3, 3), &mut rng);
    let (_, idx) = maxpool_forward(&xp, 2, 2)?;
    let gp = maxpool_backward(&dp, &idx)?;
    let num = finite_diff(
        |v| {
            let x = Tensor::from_vec(xp.shape(), v.to_vec()).expect("same shape");
            maxpool_forward(&x, 2, 2).map_or(f64::NAN, |(y, _)| dot(&y, &dp))
        },
        xp.data(),
        1e-4,
    )?;
    s.compare(Group::MaxPool, "input", gp.data(), &num);

    // softmax cross-entropy
    let logits = random_tensor(Shape::new(4, 5, 1, 1), &mut rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let (_, gl) = softmax_xent(&logits, &labels)?;
    let num = finite_diff(
        |v| {
            let l = Tensor::from_vec(logits.shape(), v.to_vec()).expect("same shape");
            softmax_xent(&l, &labels).map_or(f64::NAN, |(v, _)| v)
        },
        logits.data(),
        H,
    )?;
    s.compare(Group::SoftmaxXent, "logits", gl.data(), &num);

    Ok(Report { checks: s.checks })
}
