//! Rasterisation of DAU filters onto dense kernels.
//!
//! Kernels are in convolution orientation: a unit displaced by `mu` puts its
//! mass at canvas offset `+mu`. Apply them with [`crate::tensor::conv2d`] on the
//! 180 degree rotated bank (see [`super::forward_naive`]).

use super::gaussian::{blur_radius, gaussian_kernel, unit_gaussian, unit_kernels};
use super::params::{DauConfig, DauParams, Sigma};
use super::stencil::BilinearStencil;
use crate::error::{Error, Result};
use crate::tensor::{KernelBank, Scalar};

/// Casts to `T`, dropping subnormal Gaussian tails that would otherwise slow
/// the convolution down by an order of magnitude.
fn flush<T: Scalar>(a: f64) -> T {
    let v = T::of(a);
    if v.abs() < T::min_positive_value() {
        T::zero()
    } else {
        v
    }
}

/// Half-width of the rasterisation canvas: `ceil(Dmax) + ceil(3 max sigma)`.
pub fn canvas_radius(dmax: f64, max_sigma: f64) -> usize {
    dmax.ceil() as usize + blur_radius(max_sigma)
}

/// `W[f][s] = sum_k w_k G(mu_k, sigma_k)` with every Gaussian normalised over
/// the full canvas.
pub fn rasterize_analytic<T: Scalar>(params: &DauParams<T>, cfg: &DauConfig) -> Result<KernelBank<T>> {
    params.validate(cfg)?;
    let radius = canvas_radius(cfg.max_displacement, params.sigma.max().f64());
    let side = 2 * radius + 1;
    let mut bank = KernelBank::zeros(cfg.out_channels, cfg.in_channels, side, side);
    let mut acc = vec![0.0f64; side * side];
    for f in 0..cfg.out_channels {
        for s in 0..cfg.in_channels {
            acc.fill(0.0);
            for k in 0..cfg.units {
                let u = cfg.unit_index(f, s, k);
                if !params.active[u] {
                    continue;
                }
                let (my, mx) = params.mu_at(u);
                let g = unit_gaussian(my.f64(), mx.f64(), params.sigma.get(u).f64(), radius);
                let w = params.weight[u].f64();
                for (a, v) in acc.iter_mut().zip(&g) {
                    *a += w * v;
                }
            }
            for (d, &a) in bank.kernel_mut(f, s).iter_mut().zip(&acc) {
                *d = flush(a);
            }
        }
    }
    Ok(bank)
}

/// The dense kernel that the efficient path applies implicitly: for each unit,
/// the zero-mean blur kernel shifted to the four bilinear taps around `mu` and
/// weighted by `w * a[i][j]`. Convolving with it equals the blur-and-gather
/// computation up to summation order.
pub fn rasterize_reference<T: Scalar>(params: &DauParams<T>, cfg: &DauConfig) -> Result<KernelBank<T>> {
    let sigma = match params.sigma {
        Sigma::Shared(s) => s.f64(),
        Sigma::PerUnit(_) => {
            return Err(Error::Parameter(
                "reference rasterisation needs a shared sigma".into(),
            ))
        }
    };
    let blur = gaussian_kernel::<f64>(sigma)?;
    let r = blur_radius(sigma) as isize;
    let radius = canvas_radius(cfg.max_displacement, sigma) as isize;
    let side = (2 * radius + 1) as usize;
    let mut bank = KernelBank::zeros(cfg.out_channels, cfg.in_channels, side, side);
    let mut acc = vec![0.0f64; side * side];
    for f in 0..cfg.out_channels {
        for s in 0..cfg.in_channels {
            acc.fill(0.0);
            for k in 0..cfg.units {
                let u = cfg.unit_index(f, s, k);
                if !params.active[u] {
                    continue;
                }
                let (my, mx) = params.mu_at(u);
                let st = BilinearStencil::new(my.f64(), mx.f64());
                let w = params.weight[u].f64();
                for (i, j, a) in st.taps() {
                    if a == 0.0 {
                        continue;
                    }
                    let cy = st.base.0 + i as isize;
                    let cx = st.base.1 + j as isize;
                    if cy.abs() + r > radius || cx.abs() + r > radius {
                        return Err(Error::Parameter(format!(
                            "unit {u} at ({my}, {mx}) does not fit the {side}x{side} canvas; \
                             displacement clamp violated"
                        )));
                    }
                    let c = w * a;
                    for ty in -r..=r {
                        let row = ((cy + ty + radius) as usize) * side;
                        for tx in -r..=r {
                            let col = (cx + tx + radius) as usize;
                            acc[row + col] += c * blur.at_offset(ty, tx);
                        }
                    }
                }
            }
            for (d, &a) in bank.kernel_mut(f, s).iter_mut().zip(&acc) {
                *d = flush(a);
            }
        }
    }
    Ok(bank)
}

/// Oracle for the surrogate displacement gradient of the efficient path.
///
/// Each unit keeps the bilinear stencil of its `anchor` displacement, while the
/// Gaussian at every tap is moved continuously by `mu - anchor`. At
/// `mu == anchor` this equals [`rasterize_reference`], and its derivative with
/// respect to `mu` is the gather of the derivative-of-Gaussian blur that the
/// efficient backward pass returns.
pub fn rasterize_frozen_stencil<T: Scalar>(
    params: &DauParams<T>,
    cfg: &DauConfig,
    anchors: &[(f64, f64)],
) -> Result<KernelBank<T>> {
    let sigma = match params.sigma {
        Sigma::Shared(s) => s.f64(),
        Sigma::PerUnit(_) => {
            return Err(Error::Parameter(
                "frozen-stencil rasterisation needs a shared sigma".into(),
            ))
        }
    };
    if anchors.len() != cfg.unit_count() {
        return Err(Error::dim("stencil anchors", cfg.unit_count(), anchors.len()));
    }
    let r = blur_radius(sigma) as isize;
    let radius = canvas_radius(cfg.max_displacement, sigma) as isize + 1;
    let side = (2 * radius + 1) as usize;
    let blur_side = (2 * r + 1) as usize;
    let mut bank = KernelBank::zeros(cfg.out_channels, cfg.in_channels, side, side);
    let mut acc = vec![0.0f64; side * side];
    for f in 0..cfg.out_channels {
        for s in 0..cfg.in_channels {
            acc.fill(0.0);
            for k in 0..cfg.units {
                let u = cfg.unit_index(f, s, k);
                if !params.active[u] {
                    continue;
                }
                let (my, mx) = params.mu_at(u);
                let (ay, ax) = anchors[u];
                let st = BilinearStencil::new(ay, ax);
                let g = unit_kernels(my.f64() - ay, mx.f64() - ax, sigma, r as usize);
                let w = params.weight[u].f64();
                for (i, j, a) in st.taps() {
                    if a == 0.0 {
                        continue;
                    }
                    let cy = st.base.0 + i as isize;
                    let cx = st.base.1 + j as isize;
                    if cy.abs() + r > radius || cx.abs() + r > radius {
                        return Err(Error::Parameter(format!(
                            "anchor ({ay}, {ax}) of unit {u} does not fit the canvas"
                        )));
                    }
                    for ty in 0..blur_side {
                        let row = ((cy + ty as isize - r + radius) as usize) * side;
                        for tx in 0..blur_side {
                            let col = (cx + tx as isize - r + radius) as usize;
                            acc[row + col] += w * a * g.value[ty * blur_side + tx];
                        }
                    }
                }
            }
            for (d, &a) in bank.kernel_mut(f, s).iter_mut().zip(&acc) {
                *d = flush(a);
            }
        }
    }
    Ok(bank)
}
