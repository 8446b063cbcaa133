//! Discretely normalised Gaussians and their parameter derivatives.
//!
//! The normaliser is the sum of the unnormalised samples over the window the
//! kernel is evaluated on, so every kernel sums to one on its own grid.

use crate::error::{Error, Result};
use crate::tensor::{Kernel2D, Scalar};

/// Blur window half-width `ceil(3 sigma)`.
pub fn blur_radius(sigma: f64) -> usize {
    (3.0 * sigma).ceil() as usize
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")))
    }
}

/// Values of [`unit_kernels`] alone, from the separable factors.
pub fn unit_gaussian(mu_y: f64, mu_x: f64, sigma: f64, radius: usize) -> Vec<f64> {
    let side = 2 * radius + 1;
    let axis = |mu: f64| -> Vec<f64> {
        (0..side)
            .map(|i| {
                let d = i as f64 - radius as f64 - mu;
                (-0.5 * d * d / (sigma * sigma)).exp()
            })
            .collect()
    };
    let (gy, gx) = (axis(mu_y), axis(mu_x));
    let inv_n = 1.0 / (gy.iter().sum::<f64>() * gx.iter().sum::<f64>());
    gy.iter().flat_map(|&a| gx.iter().map(move |&b| a * b * inv_n)).collect()
}

/// A displaced Gaussian and its derivatives on a `(2r+1)^2` window, row-major.
#[derive(Debug, Clone)]
pub struct UnitKernels {
    pub radius: usize,
    pub value: Vec<f64>,
    pub d_mu_y: Vec<f64>,
    pub d_mu_x: Vec<f64>,
    pub d_sigma: Vec<f64>,
}

/// `G(x; mu, sigma) = exp(-|x - mu|^2 / 2 sigma^2) / N(mu, sigma)` over the
/// centred window of half-width `radius`, plus quotient-rule derivatives
/// (which include the dependence of `N` on `mu` and `sigma`).
pub fn unit_kernels(mu_y: f64, mu_x: f64, sigma: f64, radius: usize) -> UnitKernels {
    let side = 2 * radius + 1;
    let r = radius as f64;
    let inv_s2 = 1.0 / (sigma * sigma);
    let mut g = Vec::with_capacity(side * side);
    let mut gy = Vec::with_capacity(side * side);
    let mut gx = Vec::with_capacity(side * side);
    let mut gs = Vec::with_capacity(side * side);
    let (mut n, mut ny, mut nx, mut ns) = (0.0, 0.0, 0.0, 0.0);
    for iy in 0..side {
        let dy = iy as f64 - r - mu_y;
        for ix in 0..side {
            let dx = ix as f64 - r - mu_x;
            let d2 = dy * dy + dx * dx;
            let v = (-0.5 * d2 * inv_s2).exp();
            let vy = v * dy * inv_s2;
            let vx = v * dx * inv_s2;
            let vs = v * d2 * inv_s2 / sigma;
            n += v;
            ny += vy;
            nx += vx;
            ns += vs;
            g.push(v);
            gy.push(vy);
            gx.push(vx);
            gs.push(vs);
        }
    }
    let inv_n = 1.0 / n;
    let inv_n2 = inv_n * inv_n;
    let mut value = Vec::with_capacity(g.len());
    let mut d_mu_y = Vec::with_capacity(g.len());
    let mut d_mu_x = Vec::with_capacity(g.len());
    let mut d_sigma = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        value.push(g[i] * inv_n);
        d_mu_y.push((gy[i] * n - g[i] * ny) * inv_n2);
        d_mu_x.push((gx[i] * n - g[i] * nx) * inv_n2);
        d_sigma.push((gs[i] * n - g[i] * ns) * inv_n2);
    }
    UnitKernels {
        radius,
        value,
        d_mu_y,
        d_mu_x,
        d_sigma,
    }
}

fn to_kernel<T: Scalar>(side: usize, values: &[f64]) -> Kernel2D<T> {
    Kernel2D::new(side, side, values.iter().map(|&v| T::of(v)).collect())
        .expect("window sides are odd by construction")
}

/// Zero-mean Gaussian blur kernel of side `2 ceil(3 sigma) + 1`, summing to one.
pub fn gaussian_kernel<T: Scalar>(sigma: f64) -> Result<Kernel2D<T>> {
    check_sigma(sigma)?;
    let r = blur_radius(sigma);
    Ok(to_kernel(2 * r + 1, &unit_kernels(0.0, 0.0, sigma, r).value))
}

/// Derivatives of [`gaussian_kernel`] with respect to `mu_y`, `mu_x` and
/// `sigma`, evaluated at `mu = 0` on the same window.
pub fn gaussian_deriv_kernels<T: Scalar>(
    sigma: f64,
) -> Result<(Kernel2D<T>, Kernel2D<T>, Kernel2D<T>)> {
    check_sigma(sigma)?;
    let r = blur_radius(sigma);
    let k = unit_kernels(0.0, 0.0, sigma, r);
    let side = 2 * r + 1;
    Ok((
        to_kernel(side, &k.d_mu_y),
        to_kernel(side, &k.d_mu_x),
        to_kernel(side, &k.d_sigma),
    ))
}

/// Separable factors of the blur: the normalised 1-D Gaussian on
/// `[-r, r]` and its derivative with respect to the mean at zero. The 2-D
/// kernel is the outer product of two copies of the first, and the 2-D
/// `d/dmu_y` kernel is `outer(derivative, gaussian)`.
pub fn gaussian_1d(sigma: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_sigma(sigma)?;
    let r = blur_radius(sigma);
    let inv_s2 = 1.0 / (sigma * sigma);
    let raw: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let u = i as f64 - r as f64;
            (-0.5 * u * u * inv_s2).exp()
        })
        .collect();
    let draw: Vec<f64> = raw
        .iter()
        .enumerate()
        .map(|(i, &v)| v * (i as f64 - r as f64) * inv_s2)
        .collect();
    let n: f64 = raw.iter().sum();
    let dn: f64 = draw.iter().sum();
    let g = raw.iter().map(|v| v / n).collect();
    let d = raw
        .iter()
        .zip(&draw)
        .map(|(&v, &dv)| (dv * n - v * dn) / (n * n))
        .collect();
    Ok((g, d))
}
