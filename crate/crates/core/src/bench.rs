//! Wall-clock comparison of the efficient DAU path, the rasterise-and-convolve
//! path and a plain convolution of the same kernel size.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analysis::speedup_estimate;
use crate::dau::{
    backward_efficient, backward_naive, canvas_radius, forward_efficient, forward_naive, DauConfig, DauParams,
    MuGradient, Rasterizer,
};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, KernelBank, Scalar, Shape, Tensor};
use crate::train::fmt_sig;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub warmup: usize,
    pub iters: usize,
    pub channels: usize,
    pub size: usize,
    pub batch: usize,
    pub units: usize,
    pub sigma: f64,
    pub dmax: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            warmup: 3,
            iters: 20,
            channels: 64,
            size: 32,
            batch: 1,
            units: 2,
            sigma: 0.5,
            dmax: 4.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    /// `efficient`, `naive` or `conv2d`.
    pub path: &'static str,
    /// `forward` or `forward_backward`.
    pub pass: &'static str,
    pub median_s: f64,
    pub mad_s: f64,
    /// Naive-path median over this row's median, for the same pass.
    pub measured_speedup: f64,
    /// Theoretical speed-up of the efficient path for this configuration.
    pub gamma: f64,
}

pub const BENCH_HEADER: &str = "path,pass,median_ms,mad_ms,measured_speedup,gamma";

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut s = format!("{BENCH_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.path,
            r.pass,
            fmt_sig(r.median_s * 1e3),
            fmt_sig(r.mad_s * 1e3),
            fmt_sig(r.measured_speedup),
            fmt_sig(r.gamma)
        );
    }
    s
}

/// Median and median absolute deviation.
pub fn median_mad(samples: &[f64]) -> (f64, f64) {
    fn median(v: &mut [f64]) -> f64 {
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
    let mut v = samples.to_vec();
    let m = median(&mut v);
    let mut dev: Vec<f64> = samples.iter().map(|s| (s - m).abs()).collect();
    (m, median(&mut dev))
}

fn time(cfg: &BenchConfig, mut f: impl FnMut() -> Result<()>) -> Result<(f64, f64)> {
    for _ in 0..cfg.warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(cfg.iters);
    for _ in 0..cfg.iters {
        let t = Instant::now();
        f()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    Ok(median_mad(&samples))
}

/// Side of the dense kernel the naive path rasterises.
pub fn canvas_side(dmax: f64, sigma: f64) -> usize {
    2 * canvas_radius(dmax, sigma) + 1
}

pub fn run_bench<T: Scalar>(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.warmup < 3 || cfg.iters < 20 {
        return Err(Error::Config(format!(
            "bench needs warmup >= 3 and iters >= 20, got {} and {}",
            cfg.warmup, cfg.iters
        )));
    }
    let dau = DauConfig::new(cfg.channels, cfg.channels, cfg.units)
        .with_sigma(cfg.sigma)
        .with_max_displacement(cfg.dmax);
    dau.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = DauParams::<T>::init(&dau, cfg.dmax.min(1.5), &mut rng);
    let shape = Shape::new(cfg.batch, cfg.channels, cfg.size, cfg.size);
    let x = Tensor::<T>::from_fn(shape, |_, _, _, _| T::of(rng.gen_range(-1.0..1.0)));
    let delta = Tensor::<T>::from_fn(shape, |_, _, _, _| T::of(rng.gen_range(-1.0..1.0)));
    let side = canvas_side(cfg.dmax, cfg.sigma);
    let kernels = KernelBank::<T>::from_vec(
        cfg.channels,
        cfg.channels,
        side,
        side,
        (0..cfg.channels * cfg.channels * side * side)
            .map(|_| T::of(rng.gen_range(-0.01..0.01)))
            .collect(),
    )?;
    let bias = vec![T::zero(); cfg.channels];
    let gamma = speedup_estimate(side as f64, side as f64, cfg.units as f64);

    let mut timings = Vec::new();
    timings.push(("efficient", "forward", time(cfg, || forward_efficient(&x, &params, &dau).map(drop))?));
    timings.push((
        "naive",
        "forward",
        time(cfg, || forward_naive(&x, &params, &dau, Rasterizer::Analytic).map(drop))?,
    ));
    timings.push(("conv2d", "forward", time(cfg, || conv2d(&x, &kernels, &bias).map(drop))?));
    timings.push((
        "efficient",
        "forward_backward",
        time(cfg, || {
            let (_, cache) = forward_efficient(&x, &params, &dau)?;
            backward_efficient(&cache, &delta, &params, &dau, MuGradient::Surrogate).map(drop)
        })?,
    ));
    timings.push((
        "naive",
        "forward_backward",
        time(cfg, || {
            forward_naive(&x, &params, &dau, Rasterizer::Analytic)?;
            backward_naive(&x, &delta, &params, &dau).map(drop)
        })?,
    ));
    timings.push((
        "conv2d",
        "forward_backward",
        time(cfg, || {
            conv2d(&x, &kernels, &bias)?;
            conv2d_backward(&x, &kernels, &delta).map(drop)
        })?,
    ));
    let naive = |pass: &str| {
        timings
            .iter()
            .find(|t| t.0 == "naive" && t.1 == pass)
            .map(|t| t.2 .0)
            .expect("naive row is always timed")
    };
    Ok(timings
        .iter()
        .map(|&(path, pass, (median_s, mad_s))| BenchRow {
            path,
            pass,
            median_s,
            mad_s,
            measured_speedup: naive(pass) / median_s,
            gamma,
        })
        .collect())
}
