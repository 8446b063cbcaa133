use super::gaussian::unit_kernels;
use super::params::{DauConfig, DauGrads, DauParams};
use super::raster::{canvas_radius, rasterize_analytic, rasterize_reference};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, kernel_grad, KernelBank, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rasterizer {
    Analytic,
    Reference,
}

fn rasterize<T: Scalar>(params: &DauParams<T>, cfg: &DauConfig, r: Rasterizer) -> Result<KernelBank<T>> {
    match r {
        Rasterizer::Analytic => rasterize_analytic(params, cfg),
        Rasterizer::Reference => rasterize_reference(params, cfg),
    }
}

/// Pre-activation of a DAU layer computed by rasterising the filters and
/// convolving: `z = sum_s W_s * X_s + b`.
pub fn forward_naive<T: Scalar>(
    input: &Tensor<T>,
    params: &DauParams<T>,
    cfg: &DauConfig,
    rasterizer: Rasterizer,
) -> Result<Tensor<T>> {
    if input.shape().c != cfg.in_channels {
        return Err(Error::dim("DAU input channels", cfg.in_channels, input.shape().c));
    }
    let bank = rasterize(params, cfg, rasterizer)?;
    // conv2d correlates; the rotated bank turns that into a true convolution
    conv2d(input, &bank.rotated(), &params.bias)
}

/// Backward pass of the general path (analytic rasterisation).
///
/// The kernel-space gradient `dW[f][s][u] = sum delta[f](y) X[s](y - u)` is
/// projected onto each unit's Gaussian and its mean / sigma derivatives; the
/// input gradient correlates `delta` with the unrotated filters, i.e. convolves
/// it with the 180 degree rotated filter.
pub fn backward_naive<T: Scalar>(
    input: &Tensor<T>,
    grad_output: &Tensor<T>,
    params: &DauParams<T>,
    cfg: &DauConfig,
) -> Result<(Tensor<T>, DauGrads<T>)> {
    let sh = input.shape();
    let gs = grad_output.shape();
    if sh.c != cfg.in_channels {
        return Err(Error::dim("DAU input channels", cfg.in_channels, sh.c));
    }
    if gs.n != sh.n || gs.c != cfg.out_channels || gs.h != sh.h || gs.w != sh.w {
        return Err(Error::Contract(format!(
            "grad_output {gs} does not match input {sh} with {} output channels",
            cfg.out_channels
        )));
    }
    let bank = rasterize_analytic(params, cfg)?;
    let side = bank.kh();
    let grad_input = conv2d(grad_output, &bank.transposed(), &vec![T::zero(); sh.c])?;
    let kgrad = kernel_grad(input, grad_output, side, side, true)?;

    let radius = canvas_radius(cfg.max_displacement, params.sigma.max().f64());
    let units = cfg.unit_count();
    let mut gw = vec![T::zero(); units];
    let mut gmu = vec![T::zero(); 2 * units];
    let mut gsig = if cfg.sigma_learnable { vec![T::zero(); units] } else { Vec::new() };
    for f in 0..cfg.out_channels {
        for s in 0..cfg.in_channels {
            let dw: Vec<f64> = kgrad.kernel(f, s).iter().map(|v| v.f64()).collect();
            for k in 0..cfg.units {
                let u = cfg.unit_index(f, s, k);
                if !params.active[u] {
                    continue;
                }
                let (my, mx) = params.mu_at(u);
                let g = unit_kernels(my.f64(), mx.f64(), params.sigma.get(u).f64(), radius);
                let w = params.weight[u].f64();
                let proj = |kern: &[f64]| -> f64 { dw.iter().zip(kern).map(|(a, b)| a * b).sum() };
                gw[u] = T::of(proj(&g.value));
                gmu[2 * u] = T::of(w * proj(&g.d_mu_y));
                gmu[2 * u + 1] = T::of(w * proj(&g.d_mu_x));
                if cfg.sigma_learnable {
                    gsig[u] = T::of(w * proj(&g.d_sigma));
                }
            }
        }
    }
    let gb = (0..cfg.out_channels)
        .map(|f| (0..sh.n).map(|n| grad_output.plane(n, f).iter().copied().sum::<T>()).sum())
        .collect();
    Ok((
        grad_input,
        DauGrads {
            weight: gw,
            mu: gmu,
            sigma: gsig,
            bias: gb,
        },
    ))
}
