//! Blur-and-gather execution of DAU layers with a shared sigma.
//!
//! Every input channel is blurred once on an extended canvas that reaches
//! `ceil(Dmax) + 1` pixels past each border, so the gathers never leave the
//! buffer and samples outside the image see the blur of the zero-padded
//! input. That keeps the result identical to convolving with the
//! [`rasterize_reference`](super::rasterize_reference) kernels, borders included.

use rayon::prelude::*;

use super::gaussian::gaussian_1d;
use super::params::{DauConfig, DauGrads, DauParams, Sigma};
use super::stencil::BilinearStencil;
use crate::error::{Error, Result};
use crate::tensor::{axpy, dot, Scalar, Shape, Tensor};

/// Which displacement gradient [`backward_efficient`] returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MuGradient {
    /// Gather of the input convolved with the Gaussian's mean derivative.
    #[default]
    Surrogate,
    /// Exact derivative of the bilinear gather (piecewise constant per cell).
    Exact,
}

/// State saved by [`forward_efficient`] for [`backward_efficient`].
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    blurred: Vec<T>,
    pad: usize,
    sigma: f64,
    stencils: Vec<BilinearStencil>,
    out_channels: usize,
}

impl<T: Scalar> ForwardCache<T> {
    pub fn input_shape(&self) -> Shape {
        self.input.shape()
    }

    pub fn stencils(&self) -> &[BilinearStencil] {
        &self.stencils
    }

    /// Border added on each side of the blurred planes.
    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Blurred plane `(n, s)` on the extended canvas.
    pub fn blurred_plane(&self, n: usize, s: usize) -> &[T] {
        let sh = self.input.shape();
        let ext = (sh.h + 2 * self.pad) * (sh.w + 2 * self.pad);
        let start = (n * sh.c + s) * ext;
        &self.blurred[start..start + ext]
    }
}

fn shared_sigma<T: Scalar>(params: &DauParams<T>) -> Result<f64> {
    match params.sigma {
        Sigma::Shared(s) => Ok(s.f64()),
        Sigma::PerUnit(_) => Err(Error::Parameter(
            "the efficient path requires a shared sigma".into(),
        )),
    }
}

fn pad_for(cfg: &DauConfig) -> usize {
    cfg.max_displacement.ceil() as usize + 1
}

/// Separable true convolution of an `h x w` plane onto the extended
/// `(h+2p) x (w+2p)` canvas: `out[q] = sum_u ky[u] kx[v] x[q - p - (u, v)]`,
/// with `u, v` centred on the kernels and zeros outside the source.
fn blur_extended<T: Scalar>(src: &[T], h: usize, w: usize, pad: usize, ky: &[T], kx: &[T], out: &mut [T]) {
    let (he, we) = (h + 2 * pad, w + 2 * pad);
    let r = (kx.len() / 2) as isize;
    let mut tmp = vec![T::zero(); h * we];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let dst = &mut tmp[y * we..(y + 1) * we];
        for (t, &k) in kx.iter().enumerate() {
            // dst[qx] += k * row[qx - pad - (t - r)]
            let off = pad as isize + t as isize - r;
            let lo = off.max(0) as usize;
            let hi = ((w as isize + off).min(we as isize)).max(0) as usize;
            if lo < hi {
                let s0 = (lo as isize - off) as usize;
                axpy(&mut dst[lo..hi], k, &row[s0..s0 + (hi - lo)]);
            }
        }
    }
    out.fill(T::zero());
    let r = (ky.len() / 2) as isize;
    for qy in 0..he {
        let dst = &mut out[qy * we..(qy + 1) * we];
        for (t, &k) in ky.iter().enumerate() {
            let sy = qy as isize - pad as isize - (t as isize - r);
            if sy >= 0 && (sy as usize) < h {
                let sy = sy as usize;
                axpy(dst, k, &tmp[sy * we..(sy + 1) * we]);
            }
        }
    }
}

/// Adjoint of [`blur_extended`]: maps a gradient on the extended canvas back
/// to the `h x w` source plane, `out[p] = sum_u ky[u] kx[v] g[p + pad + (u, v)]`.
fn blur_extended_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, pad: usize, ky: &[T], kx: &[T], out: &mut [T]) {
    let (he, we) = (h + 2 * pad, w + 2 * pad);
    let rx = (kx.len() / 2) as isize;
    let mut tmp = vec![T::zero(); he * w];
    for qy in 0..he {
        let row = &g[qy * we..(qy + 1) * we];
        let dst = &mut tmp[qy * w..(qy + 1) * w];
        for (t, &k) in kx.iter().enumerate() {
            // dst[x] += k * row[x + pad + (t - r)]
            let off = pad as isize + t as isize - rx;
            let lo = (-off).max(0) as usize;
            let hi = ((we as isize - off).min(w as isize)).max(0) as usize;
            if lo < hi {
                let s0 = (lo as isize + off) as usize;
                axpy(&mut dst[lo..hi], k, &row[s0..s0 + (hi - lo)]);
            }
        }
    }
    out.fill(T::zero());
    let ry = (ky.len() / 2) as isize;
    for y in 0..h {
        let dst = &mut out[y * w..(y + 1) * w];
        for (t, &k) in ky.iter().enumerate() {
            let sy = y as isize + pad as isize + t as isize - ry;
            if sy >= 0 && (sy as usize) < he {
                let sy = sy as usize;
                axpy(dst, k, &tmp[sy * w..(sy + 1) * w]);
            }
        }
    }
}

fn cast_vec<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::of(x)).collect()
}

/// Blurs every `(n, c)` plane onto the extended canvas with the separable
/// kernel `outer(ky, kx)`.
pub fn blur_planes<T: Scalar>(input: &Tensor<T>, pad: usize, ky: &[T], kx: &[T]) -> Vec<T> {
    let sh = input.shape();
    let ext = (sh.h + 2 * pad) * (sh.w + 2 * pad);
    let mut out = vec![T::zero(); sh.n * sh.c * ext];
    if ext == 0 {
        return out;
    }
    out.par_chunks_mut(ext).enumerate().for_each(|(idx, dst)| {
        let (n, c) = (idx / sh.c, idx % sh.c);
        blur_extended(input.plane(n, c), sh.h, sh.w, pad, ky, kx, dst);
    });
    out
}

/// Row offset into the extended canvas for output row 0 of tap `(i, j)`.
#[inline]
fn tap_origin(st: &BilinearStencil, i: usize, j: usize, pad: usize) -> (usize, usize) {
    let oy = pad as isize - st.base.0 - i as isize;
    let ox = pad as isize - st.base.1 - j as isize;
    debug_assert!(oy >= 0 && ox >= 0);
    (oy as usize, ox as usize)
}

/// `sum_{y,x} a[y, x] * ext[y + oy, x + ox]` for an `h x w` plane `a`.
#[inline]
fn window_dot<T: Scalar>(a: &[T], ext: &[T], h: usize, w: usize, we: usize, oy: usize, ox: usize) -> T {
    let mut acc = T::zero();
    for y in 0..h {
        let e0 = (y + oy) * we + ox;
        acc += dot(&a[y * w..(y + 1) * w], &ext[e0..e0 + w]);
    }
    acc
}

fn check_clamp<T: Scalar>(params: &DauParams<T>, cfg: &DauConfig) -> Result<()> {
    let dmax = cfg.max_displacement;
    if let Some(i) = params.mu.iter().position(|m| !(m.f64().abs() <= dmax)) {
        return Err(Error::Parameter(format!(
            "displacement {} of unit {} exceeds the clamp {dmax}",
            params.mu[i],
            i / 2
        )));
    }
    Ok(())
}

/// Efficient forward pass. Returns the pre-activation
/// `z[n,f] = b[f] + sum_{s,k} w * sum_{i,j} a_ij * blur(X_s)[y - floor(mu) - (i, j)]`
/// and the cache needed by [`backward_efficient`].
pub fn forward_efficient<T: Scalar>(
    input: &Tensor<T>,
    params: &DauParams<T>,
    cfg: &DauConfig,
) -> Result<(Tensor<T>, ForwardCache<T>)> {
    let sh = input.shape();
    if sh.c != cfg.in_channels {
        return Err(Error::dim("DAU input channels", cfg.in_channels, sh.c));
    }
    let sigma = shared_sigma(params)?;
    if params.weight.len() != cfg.unit_count() || params.bias.len() != cfg.out_channels {
        return Err(Error::dim("DauParams units", cfg.unit_count(), params.weight.len()));
    }
    check_clamp(params, cfg)?;
    let pad = pad_for(cfg);
    let (g, _) = gaussian_1d(sigma)?;
    let g: Vec<T> = cast_vec(&g);
    let blurred = blur_planes(input, pad, &g, &g);
    let stencils: Vec<BilinearStencil> = (0..cfg.unit_count())
        .map(|u| {
            let (my, mx) = params.mu_at(u);
            BilinearStencil::new(my.f64(), mx.f64())
        })
        .collect();

    let out_shape = Shape::new(sh.n, cfg.out_channels, sh.h, sh.w);
    let mut out = Tensor::zeros(out_shape);
    let plane = sh.plane();
    let (h, w) = (sh.h, sh.w);
    let (he, we) = (h + 2 * pad, w + 2 * pad);
    let ext = he * we;
    if plane > 0 {
        out.data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, dst)| {
                let (n, f) = (idx / cfg.out_channels, idx % cfg.out_channels);
                dst.fill(params.bias[f]);
                for s in 0..cfg.in_channels {
                    let src = &blurred[(n * sh.c + s) * ext..(n * sh.c + s + 1) * ext];
                    for k in 0..cfg.units {
                        let u = cfg.unit_index(f, s, k);
                        if !params.active[u] {
                            continue;
                        }
                        let st = &stencils[u];
                        for (i, j, a) in st.taps() {
                            if a == 0.0 {
                                continue;
                            }
                            let c = params.weight[u] * T::of(a);
                            let (oy, ox) = tap_origin(st, i, j, pad);
                            for y in 0..h {
                                let e0 = (y + oy) * we + ox;
                                axpy(&mut dst[y * w..(y + 1) * w], c, &src[e0..e0 + w]);
                            }
                        }
                    }
                }
            });
    }
    Ok((
        out,
        ForwardCache {
            input: input.clone(),
            blurred,
            pad,
            sigma,
            stencils,
            out_channels: cfg.out_channels,
        },
    ))
}

/// Backward pass of the efficient path.
///
/// * `grad_w` correlates `delta` with the gathered blurred input;
/// * `grad_mu` is `w * sum delta * gather(X conv dG/dmu)` for
///   [`MuGradient::Surrogate`], or the exact derivative of the bilinear gather
///   for [`MuGradient::Exact`];
/// * `grad_input` scatters `w * delta` at the negated displacements and blurs
///   the result (the adjoint of the forward gather and blur).
pub fn backward_efficient<T: Scalar>(
    cache: &ForwardCache<T>,
    grad_output: &Tensor<T>,
    params: &DauParams<T>,
    cfg: &DauConfig,
    mu_grad: MuGradient,
) -> Result<(Tensor<T>, DauGrads<T>)> {
    let sh = cache.input.shape();
    let gs = grad_output.shape();
    if gs != Shape::new(sh.n, cfg.out_channels, sh.h, sh.w)
        || cache.out_channels != cfg.out_channels
        || cache.stencils.len() != cfg.unit_count()
        || sh.c != cfg.in_channels
        || shared_sigma(params)? != cache.sigma
    {
        return Err(Error::Contract(format!(
            "forward cache (input {sh}, {} outputs) does not match grad_output {gs}",
            cache.out_channels
        )));
    }
    let pad = cache.pad;
    let (h, w) = (sh.h, sh.w);
    let (he, we) = (h + 2 * pad, w + 2 * pad);
    let ext = he * we;
    let (g1, d1) = gaussian_1d(cache.sigma)?;
    let (g1, d1): (Vec<T>, Vec<T>) = (cast_vec(&g1), cast_vec(&d1));

    // lazily computed derivative blurs for the surrogate displacement gradient
    let (deriv_y, deriv_x) = match mu_grad {
        MuGradient::Surrogate => (
            blur_planes(&cache.input, pad, &d1, &g1),
            blur_planes(&cache.input, pad, &g1, &d1),
        ),
        MuGradient::Exact => (Vec::new(), Vec::new()),
    };

    let units_per_f = cfg.in_channels * cfg.units;
    let mut per_filter: Vec<(Vec<T>, Vec<T>)> = vec![(Vec::new(), Vec::new()); cfg.out_channels];
    per_filter.par_iter_mut().enumerate().for_each(|(f, (gw, gmu))| {
        *gw = vec![T::zero(); units_per_f];
        *gmu = vec![T::zero(); 2 * units_per_f];
        for s in 0..cfg.in_channels {
            for k in 0..cfg.units {
                let u = cfg.unit_index(f, s, k);
                if !params.active[u] {
                    continue;
                }
                let local = u - f * units_per_f;
                let st = &cache.stencils[u];
                let (day, dax) = (st.d_weights_dy(), st.d_weights_dx());
                let (mut acc_w, mut acc_y, mut acc_x) = (0.0f64, 0.0f64, 0.0f64);
                for n in 0..sh.n {
                    let delta = grad_output.plane(n, f);
                    let base = (n * sh.c + s) * ext;
                    let xb = &cache.blurred[base..base + ext];
                    for (i, j, a) in st.taps() {
                        let (oy, ox) = tap_origin(st, i, j, pad);
                        let dx_blur = window_dot(delta, xb, h, w, we, oy, ox).f64();
                        acc_w += a * dx_blur;
                        match mu_grad {
                            MuGradient::Exact => {
                                acc_y += day[i][j] * dx_blur;
                                acc_x += dax[i][j] * dx_blur;
                            }
                            MuGradient::Surrogate => {
                                if a != 0.0 {
                                    let py = &deriv_y[base..base + ext];
                                    let px = &deriv_x[base..base + ext];
                                    acc_y += a * window_dot(delta, py, h, w, we, oy, ox).f64();
                                    acc_x += a * window_dot(delta, px, h, w, we, oy, ox).f64();
                                }
                            }
                        }
                    }
                }
                let wk = params.weight[u].f64();
                gw[local] = T::of(acc_w);
                gmu[2 * local] = T::of(wk * acc_y);
                gmu[2 * local + 1] = T::of(wk * acc_x);
            }
        }
    });
    let mut grad_w = Vec::with_capacity(cfg.unit_count());
    let mut grad_mu = Vec::with_capacity(2 * cfg.unit_count());
    for (gw, gmu) in per_filter {
        grad_w.extend(gw);
        grad_mu.extend(gmu);
    }

    let grad_bias = (0..cfg.out_channels)
        .map(|f| (0..sh.n).map(|n| grad_output.plane(n, f).iter().copied().sum::<T>()).sum())
        .collect();

    let mut grad_input = Tensor::zeros(sh);
    let plane = sh.plane();
    if plane > 0 {
        grad_input
            .data_mut()
            .par_chunks_mut(plane)
            .enumerate()
            .for_each(|(idx, dst)| {
                let (n, s) = (idx / sh.c, idx % sh.c);
                let mut gext = vec![T::zero(); ext];
                for f in 0..cfg.out_channels {
                    let delta = grad_output.plane(n, f);
                    for k in 0..cfg.units {
                        let u = cfg.unit_index(f, s, k);
                        if !params.active[u] {
                            continue;
                        }
                        let st = &cache.stencils[u];
                        for (i, j, a) in st.taps() {
                            if a == 0.0 {
                                continue;
                            }
                            let c = params.weight[u] * T::of(a);
                            let (oy, ox) = tap_origin(st, i, j, pad);
                            for y in 0..h {
                                let e0 = (y + oy) * we + ox;
                                axpy(&mut gext[e0..e0 + w], c, &delta[y * w..(y + 1) * w]);
                            }
                        }
                    }
                }
                blur_extended_adjoint(&gext, h, w, pad, &g1, &g1, dst);
            });
    }

    Ok((
        grad_input,
        DauGrads {
            weight: grad_w,
            mu: grad_mu,
            sigma: Vec::new(),
            bias: grad_bias,
        },
    ))
}
