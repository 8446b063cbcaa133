use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the old running statistics in each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Spatial batch normalisation over `(N, H, W)` per channel.
///
/// Running statistics use the biased batch variance, the same estimate the
/// training-mode normalisation divides by.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

/// Saved state of a training-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BnGrads<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn check(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().c != self.channels() {
            return Err(Error::dim("batchnorm channels", self.channels(), x.shape().c));
        }
        Ok(())
    }

    /// Normalises with batch statistics and folds them into the running ones.
    pub fn forward_train(&mut self, x: &Tensor<T>) -> Result<(Tensor<T>, BnCache<T>)> {
        self.check(x)?;
        let sh = x.shape();
        if sh.n < 2 {
            return Err(Error::Contract(format!(
                "training-mode batch norm needs at least 2 items, got {}",
                sh.n
            )));
        }
        let count = (sh.n * sh.plane()) as f64;
        let mut xhat = Tensor::zeros(sh);
        let mut y = Tensor::zeros(sh);
        let mut inv_std = Vec::with_capacity(sh.c);
        for c in 0..sh.c {
            let mean = (0..sh.n).map(|n| x.plane(n, c).iter().map(|v| v.f64()).sum::<f64>()).sum::<f64>() / count;
            let var = (0..sh.n)
                .map(|n| x.plane(n, c).iter().map(|v| (v.f64() - mean).powi(2)).sum::<f64>())
                .sum::<f64>()
                / count;
            let is = 1.0 / (var + BN_EPS).sqrt();
            inv_std.push(is);
            let (g, b) = (self.gamma[c].f64(), self.beta[c].f64());
            for n in 0..sh.n {
                let src = x.plane(n, c);
                let xh: Vec<f64> = src.iter().map(|v| (v.f64() - mean) * is).collect();
                for (d, &v) in xhat.plane_mut(n, c).iter_mut().zip(&xh) {
                    *d = T::of(v);
                }
                for (d, &v) in y.plane_mut(n, c).iter_mut().zip(&xh) {
                    *d = T::of(g * v + b);
                }
            }
            let m = BN_MOMENTUM;
            self.running_mean[c] = T::of(m * self.running_mean[c].f64() + (1.0 - m) * mean);
            self.running_var[c] = T::of(m * self.running_var[c].f64() + (1.0 - m) * var);
        }
        Ok((y, BnCache { xhat, inv_std }))
    }

    /// Normalises with the running statistics.
    pub fn forward_eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(x)?;
        let sh = x.shape();
        let mut y = x.clone();
        for c in 0..sh.c {
            let is = 1.0 / (self.running_var[c].f64() + BN_EPS).sqrt();
            let (g, b, m) = (self.gamma[c].f64(), self.beta[c].f64(), self.running_mean[c].f64());
            for n in 0..sh.n {
                for v in y.plane_mut(n, c) {
                    *v = T::of(g * (v.f64() - m) * is + b);
                }
            }
        }
        Ok(y)
    }

    /// Backward of [`Self::forward_train`]; returns `(grad_input, grads)`.
    pub fn backward(&self, cache: &BnCache<T>, grad_output: &Tensor<T>) -> Result<(Tensor<T>, BnGrads<T>)> {
        let sh = grad_output.shape();
        if sh != cache.xhat.shape() {
            return Err(Error::Contract(format!(
                "batchnorm cache {} does not match grad_output {sh}",
                cache.xhat.shape()
            )));
        }
        let count = (sh.n * sh.plane()) as f64;
        let mut gx = Tensor::zeros(sh);
        let mut gg = Vec::with_capacity(sh.c);
        let mut gb = Vec::with_capacity(sh.c);
        for c in 0..sh.c {
            let (mut sum_d, mut sum_dx) = (0.0, 0.0);
            for n in 0..sh.n {
                for (d, xh) in grad_output.plane(n, c).iter().zip(cache.xhat.plane(n, c)) {
                    sum_d += d.f64();
                    sum_dx += d.f64() * xh.f64();
                }
            }
            gg.push(T::of(sum_dx));
            gb.push(T::of(sum_d));
            let k = self.gamma[c].f64() * cache.inv_std[c] / count;
            for n in 0..sh.n {
                let xh = cache.xhat.plane(n, c);
                let d = grad_output.plane(n, c);
                for (i, out) in gx.plane_mut(n, c).iter_mut().enumerate() {
                    *out = T::of(k * (count * d[i].f64() - sum_d - xh[i].f64() * sum_dx));
                }
            }
        }
        Ok((gx, BnGrads { gamma: gg, beta: gb }))
    }
}
