//! Layer stacks assembled from a [`NetworkSpec`], with manual forward and
//! backward passes.

mod spec;

pub use spec::{parse_input, DauLayerSpec, LayerSpec, NetworkSpec};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dau::{
    backward_efficient, backward_naive, forward_efficient, forward_naive, DauConfig, DauGrads, DauParams,
    ForwardCache, Mode, MuGradient, Rasterizer, Sigma,
};
use crate::error::{Error, Result};
use crate::nn::{dense_backward, dense_forward, glorot_limit, maxpool_backward, maxpool_forward, BatchNorm, BnCache, PoolIndices};
use crate::optim::{ParamGroup, ParamRole};
use crate::tensor::{conv2d, conv2d_backward, relu, relu_backward, KernelBank, Scalar, Shape, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dau { cfg: DauConfig, params: DauParams<T> },
    Conv { weight: KernelBank<T>, bias: Vec<T> },
    MaxPool { size: usize, stride: usize },
    BatchNorm(BatchNorm<T>),
    Relu,
    Dense { weight: Vec<T>, bias: Vec<T> },
}

impl<T> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dau { .. } => "dau",
            Layer::Conv { .. } => "conv",
            Layer::MaxPool { .. } => "maxpool",
            Layer::BatchNorm(_) => "bn",
            Layer::Relu => "relu",
            Layer::Dense { .. } => "dense",
        }
    }
}

/// State a layer keeps between its forward and backward pass.
#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    DauEfficient(ForwardCache<T>),
    DauGeneral(Tensor<T>),
    Conv(Tensor<T>),
    Pool(PoolIndices),
    BnTrain(BnCache<T>),
    BnEval,
    Relu(Tensor<T>),
    Dense(Tensor<T>),
}

/// Whether batch norm uses batch statistics (and updates its running ones).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// One entry of [`Network::param_layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamInfo {
    pub name: String,
    pub layer: usize,
    pub role: ParamRole,
    pub len: usize,
    /// Displacement clamp for `dau_mu` arrays.
    pub clamp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
    shapes: Vec<(usize, usize, usize)>,
    pub mu_gradient: MuGradient,
}

fn build_err(layer: usize, kind: &str, message: impl Into<String>) -> Error {
    Error::Build {
        layer,
        kind: kind.to_string(),
        message: message.into(),
    }
}

impl<T: Scalar> Network<T> {
    /// Validates shape composition and initialises parameters from the
    /// spec's seed.
    pub fn build(spec: &NetworkSpec) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let (mut c, mut h, mut w) = spec.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Config(format!("input shape {c}x{h}x{w} is empty")));
        }
        let mut shapes = vec![(c, h, w)];
        let mut layers = Vec::new();
        let last = spec.layers.len().saturating_sub(1);
        if !matches!(spec.layers.last(), Some(LayerSpec::SoftmaxXent)) {
            return Err(build_err(last, spec.layers.last().map_or("none", |l| l.kind()), "the last layer must be softmax_xent"));
        }
        for (i, ls) in spec.layers.iter().enumerate() {
            let kind = ls.kind();
            let layer = match ls {
                LayerSpec::Dau(d) => {
                    let cfg = DauConfig::new(c, d.out, d.units)
                        .with_sigma(d.sigma)
                        .with_max_displacement(d.dmax)
                        .with_mode(d.mode)
                        .with_sigma_learnable(d.learn_sigma);
                    cfg.validate().map_err(|e| build_err(i, kind, e.to_string()))?;
                    if d.mu_init < 0.0 || d.mu_init > d.dmax {
                        return Err(build_err(i, kind, format!("mu_init {} is outside [0, dmax]", d.mu_init)));
                    }
                    let params = DauParams::init(&cfg, d.mu_init, &mut rng);
                    c = d.out;
                    Layer::Dau { cfg, params }
                }
                LayerSpec::Conv { out, size } => {
                    if size % 2 == 0 || *out == 0 {
                        return Err(build_err(i, kind, "kernel size must be odd and outputs positive"));
                    }
                    let limit = glorot_limit(c * size * size, out * size * size);
                    let data = (0..out * c * size * size).map(|_| T::of(rng.gen_range(-limit..limit))).collect();
                    let weight = KernelBank::from_vec(*out, c, *size, *size, data)?;
                    c = *out;
                    Layer::Conv {
                        weight,
                        bias: vec![T::zero(); *out],
                    }
                }
                LayerSpec::MaxPool { size, stride } => {
                    if *size == 0 || *stride == 0 || h < *size || w < *size {
                        return Err(build_err(i, kind, format!("cannot pool {h}x{w} with size {size}, stride {stride}")));
                    }
                    h = (h - size) / stride + 1;
                    w = (w - size) / stride + 1;
                    Layer::MaxPool {
                        size: *size,
                        stride: *stride,
                    }
                }
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(c)),
                LayerSpec::Relu => Layer::Relu,
                LayerSpec::Dense { out, inputs } => {
                    let fan_in = c * h * w;
                    if let Some(expected) = inputs {
                        if *expected != fan_in {
                            return Err(build_err(
                                i,
                                kind,
                                format!("expects {expected} inputs but receives {c}x{h}x{w} = {fan_in}"),
                            ));
                        }
                    }
                    if *out == 0 {
                        return Err(build_err(i, kind, "needs at least one output"));
                    }
                    let limit = glorot_limit(fan_in, *out);
                    let weight = (0..out * fan_in).map(|_| T::of(rng.gen_range(-limit..limit))).collect();
                    c = *out;
                    h = 1;
                    w = 1;
                    Layer::Dense {
                        weight,
                        bias: vec![T::zero(); *out],
                    }
                }
                LayerSpec::SoftmaxXent => {
                    if i != last {
                        return Err(build_err(i, kind, "softmax_xent must be the last layer"));
                    }
                    if (c, h, w) != (spec.classes, 1, 1) {
                        return Err(build_err(
                            i,
                            kind,
                            format!("logits are {c}x{h}x{w}, expected {} classes", spec.classes),
                        ));
                    }
                    break;
                }
            };
            layers.push(layer);
            shapes.push((c, h, w));
        }
        Ok(Network {
            spec: spec.clone(),
            layers,
            shapes,
            mu_gradient: MuGradient::Surrogate,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    /// Output shape `(C, H, W)` of layer `i` (`i = 0` is the input).
    pub fn shape_after(&self, i: usize) -> (usize, usize, usize) {
        self.shapes[i]
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let sh = x.shape();
        if (sh.c, sh.h, sh.w) != self.spec.input {
            let (c, h, w) = self.spec.input;
            return Err(Error::dim("network input", format!("Nx{c}x{h}x{w}"), sh));
        }
        Ok(())
    }

    /// Runs layers `0..end` and returns the output plus per-layer caches.
    pub fn forward_to(&mut self, x: &Tensor<T>, end: usize, phase: Phase) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        self.check_input(x)?;
        let mut caches = Vec::with_capacity(end);
        let mut cur = x.clone();
        for layer in self.layers[..end].iter_mut() {
            let (next, cache) = match layer {
                Layer::Dau { cfg, params } => match cfg.mode {
                    Mode::Efficient => {
                        let (z, c) = forward_efficient(&cur, params, cfg)?;
                        (z, LayerCache::DauEfficient(c))
                    }
                    Mode::General => {
                        let z = forward_naive(&cur, params, cfg, Rasterizer::Analytic)?;
                        (z, LayerCache::DauGeneral(cur))
                    }
                },
                Layer::Conv { weight, bias } => (conv2d(&cur, weight, bias)?, LayerCache::Conv(cur)),
                Layer::MaxPool { size, stride } => {
                    let (y, idx) = maxpool_forward(&cur, *size, *stride)?;
                    (y, LayerCache::Pool(idx))
                }
                Layer::BatchNorm(bn) => match phase {
                    Phase::Train => {
                        let (y, c) = bn.forward_train(&cur)?;
                        (y, LayerCache::BnTrain(c))
                    }
                    Phase::Eval => (bn.forward_eval(&cur)?, LayerCache::BnEval),
                },
                Layer::Relu => (relu(&cur), LayerCache::Relu(cur)),
                Layer::Dense { weight, bias } => (dense_forward(&cur, weight, bias)?, LayerCache::Dense(cur)),
            };
            caches.push(cache);
            cur = next;
        }
        Ok((cur, caches))
    }

    /// Logits for a batch.
    pub fn forward(&mut self, x: &Tensor<T>, phase: Phase) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
        self.forward_to(x, self.layers.len(), phase)
    }

    /// Logits without caches or running-statistic updates.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut probe = self.clone();
        Ok(probe.forward(x, Phase::Eval)?.0)
    }

    /// Backpropagates `grad` through the layers that produced `caches`.
    /// Returns the input gradient and one gradient array per entry of
    /// [`Self::param_layout`] belonging to those layers (other entries are
    /// zero-filled).
    pub fn backward(&self, caches: &[LayerCache<T>], grad: Tensor<T>) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
        let layout = self.param_layout();
        let mut grads: Vec<Vec<T>> = layout.iter().map(|p| vec![T::zero(); p.len]).collect();
        let mut slot = layout.iter().filter(|p| p.layer < caches.len()).count();
        let mut g = grad;
        for i in (0..caches.len()).rev() {
            let layer = &self.layers[i];
            let n_params = layout.iter().filter(|p| p.layer == i).count();
            slot -= n_params;
            debug_assert!(layout[slot..].iter().take(n_params).all(|p| p.layer == i));
            let mut put = |k: usize, v: Vec<T>| grads[slot + k] = v;
            g = match (layer, &caches[i]) {
                (Layer::Dau { cfg, params }, LayerCache::DauEfficient(c)) => {
                    let (gx, dg) = backward_efficient(c, &g, params, cfg, self.mu_gradient)?;
                    put_dau(&mut put, dg);
                    gx
                }
                (Layer::Dau { cfg, params }, LayerCache::DauGeneral(x)) => {
                    let (gx, dg) = backward_naive(x, &g, params, cfg)?;
                    put_dau(&mut put, dg);
                    gx
                }
                (Layer::Conv { weight, .. }, LayerCache::Conv(x)) => {
                    let (gx, gw, gb) = conv2d_backward(x, weight, &g)?;
                    put(0, gw.data().to_vec());
                    put(1, gb);
                    gx
                }
                (Layer::MaxPool { .. }, LayerCache::Pool(idx)) => maxpool_backward(&g, idx)?,
                (Layer::BatchNorm(bn), LayerCache::BnTrain(c)) => {
                    let (gx, bg) = bn.backward(c, &g)?;
                    put(0, bg.gamma);
                    put(1, bg.beta);
                    gx
                }
                (Layer::BatchNorm(bn), LayerCache::BnEval) => bn_eval_backward(bn, &g),
                (Layer::Relu, LayerCache::Relu(pre)) => relu_backward(&g, pre)?,
                (Layer::Dense { weight, .. }, LayerCache::Dense(x)) => {
                    let (gx, gw, gb) = dense_backward(x, weight, &g)?;
                    put(0, gw);
                    put(1, gb);
                    gx
                }
                (l, _) => {
                    return Err(Error::Contract(format!("cache of layer {i} does not belong to a {} layer", l.kind())))
                }
            };
        }
        Ok((g, grads))
    }

    /// Names, roles and sizes of every learnable array, in a fixed order.
    pub fn param_layout(&self) -> Vec<ParamInfo> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut add = |name: &str, role: ParamRole, len: usize, clamp: Option<f64>| {
                out.push(ParamInfo {
                    name: format!("layer{i}.{name}"),
                    layer: i,
                    role,
                    len,
                    clamp,
                })
            };
            match layer {
                Layer::Dau { cfg, params } => {
                    add("weight", ParamRole::DauWeight, params.weight.len(), None);
                    add("mu", ParamRole::DauMu, params.mu.len(), Some(cfg.max_displacement));
                    if let Sigma::PerUnit(s) = &params.sigma {
                        add("sigma", ParamRole::DauSigma, s.len(), None);
                    }
                    add("bias", ParamRole::Bias, params.bias.len(), None);
                }
                Layer::Conv { weight, bias } => {
                    add("weight", ParamRole::DenseWeight, weight.data().len(), None);
                    add("bias", ParamRole::Bias, bias.len(), None);
                }
                Layer::BatchNorm(bn) => {
                    add("gamma", ParamRole::BnAffine, bn.gamma.len(), None);
                    add("beta", ParamRole::BnAffine, bn.beta.len(), None);
                }
                Layer::Dense { weight, bias } => {
                    add("weight", ParamRole::DenseWeight, weight.len(), None);
                    add("bias", ParamRole::Bias, bias.len(), None);
                }
                Layer::MaxPool { .. } | Layer::Relu => {}
            }
        }
        out
    }

    /// Mutable views of the arrays listed by [`Self::param_layout`].
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Dau { params, .. } => {
                    let DauParams { weight, mu, sigma, bias, .. } = params;
                    out.push(weight);
                    out.push(mu);
                    if let Sigma::PerUnit(s) = sigma {
                        out.push(s);
                    }
                    out.push(bias);
                }
                Layer::Conv { weight, bias } => {
                    out.push(weight.data_mut());
                    out.push(bias);
                }
                Layer::BatchNorm(bn) => {
                    out.push(&mut bn.gamma);
                    out.push(&mut bn.beta);
                }
                Layer::Dense { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                Layer::MaxPool { .. } | Layer::Relu => {}
            }
        }
        out
    }

    /// Copies of the arrays listed by [`Self::param_layout`].
    pub fn params(&self) -> Vec<Vec<T>> {
        self.clone().params_mut().into_iter().map(|p| p.to_vec()).collect()
    }

    /// Non-learnable state: batch-norm running statistics and DAU unit
    /// activity masks (1 active, 0 pruned).
    pub fn buffers(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::BatchNorm(bn) => {
                    out.push((format!("layer{i}.running_mean"), bn.running_mean.iter().map(|v| v.f64()).collect()));
                    out.push((format!("layer{i}.running_var"), bn.running_var.iter().map(|v| v.f64()).collect()));
                }
                Layer::Dau { params, .. } => {
                    let a = params.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect();
                    out.push((format!("layer{i}.active"), a));
                }
                _ => {}
            }
        }
        out
    }

    /// Restores values produced by [`Self::buffers`].
    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let (layer, field) = name
            .strip_prefix("layer")
            .and_then(|r| r.split_once('.'))
            .and_then(|(i, f)| i.parse::<usize>().ok().map(|i| (i, f)))
            .ok_or_else(|| Error::Data(format!("unknown buffer `{name}`")))?;
        let target: &mut dyn FnMut(&[f64]) -> Result<()> = match (self.layers.get_mut(layer), field) {
            (Some(Layer::BatchNorm(bn)), "running_mean") => &mut |v| copy_into(&mut bn.running_mean, v, name),
            (Some(Layer::BatchNorm(bn)), "running_var") => &mut |v| copy_into(&mut bn.running_var, v, name),
            (Some(Layer::Dau { params, .. }), "active") => &mut |v| {
                if v.len() != params.active.len() {
                    return Err(Error::dim("buffer length", params.active.len(), v.len()));
                }
                for (a, &x) in params.active.iter_mut().zip(v) {
                    *a = x != 0.0;
                }
                Ok(())
            },
            _ => return Err(Error::Data(format!("unknown buffer `{name}`"))),
        };
        target(values)
    }

    /// Optimiser groups matching [`Self::param_layout`].
    pub fn param_groups(&self, mu_lr_multiplier: f64) -> Vec<ParamGroup> {
        self.param_layout()
            .into_iter()
            .map(|p| {
                let g = ParamGroup::new(p.role, p.len, mu_lr_multiplier);
                match p.clamp {
                    Some(d) => g.with_clamp(d),
                    None => g,
                }
            })
            .collect()
    }

    /// Checks every DAU layer's parameter invariants.
    pub fn validate(&self) -> Result<()> {
        for (i, layer) in self.layers.iter().enumerate() {
            if let Layer::Dau { cfg, params } = layer {
                params.validate(cfg).map_err(|e| build_err(i, "dau", e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Indices of the DAU layers.
    pub fn dau_layers(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| matches!(self.layers[i], Layer::Dau { .. }))
            .collect()
    }

    /// Converts every parameter and buffer to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let v = |a: &[T]| a.iter().map(|x| U::of(x.f64())).collect::<Vec<U>>();
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dau { cfg, params } => Layer::Dau {
                    cfg: cfg.clone(),
                    params: DauParams {
                        weight: v(&params.weight),
                        mu: v(&params.mu),
                        sigma: match &params.sigma {
                            Sigma::Shared(s) => Sigma::Shared(U::of(s.f64())),
                            Sigma::PerUnit(s) => Sigma::PerUnit(v(s)),
                        },
                        bias: v(&params.bias),
                        active: params.active.clone(),
                    },
                },
                Layer::Conv { weight, bias } => Layer::Conv {
                    weight: KernelBank::from_vec(weight.out_channels(), weight.in_channels(), weight.kh(), weight.kw(), v(weight.data()))
                        .expect("same shape"),
                    bias: v(bias),
                },
                Layer::MaxPool { size, stride } => Layer::MaxPool {
                    size: *size,
                    stride: *stride,
                },
                Layer::BatchNorm(bn) => Layer::BatchNorm(BatchNorm {
                    gamma: v(&bn.gamma),
                    beta: v(&bn.beta),
                    running_mean: v(&bn.running_mean),
                    running_var: v(&bn.running_var),
                }),
                Layer::Relu => Layer::Relu,
                Layer::Dense { weight, bias } => Layer::Dense {
                    weight: v(weight),
                    bias: v(bias),
                },
            })
            .collect();
        Network {
            spec: self.spec.clone(),
            layers,
            shapes: self.shapes.clone(),
            mu_gradient: self.mu_gradient,
        }
    }
}

fn put_dau<T: Scalar>(put: &mut impl FnMut(usize, Vec<T>), g: DauGrads<T>) {
    put(0, g.weight);
    put(1, g.mu);
    let mut k = 2;
    if !g.sigma.is_empty() {
        put(2, g.sigma);
        k = 3;
    }
    put(k, g.bias);
}

fn copy_into<T: Scalar>(dst: &mut [T], src: &[f64], name: &str) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Data(format!("buffer `{name}` has {} values, expected {}", src.len(), dst.len())));
    }
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = T::of(s);
    }
    Ok(())
}

/// Gradient through eval-mode batch norm, a per-channel affine map.
fn bn_eval_backward<T: Scalar>(bn: &BatchNorm<T>, g: &Tensor<T>) -> Tensor<T> {
    let sh = g.shape();
    let mut out = g.clone();
    for c in 0..sh.c {
        let k = T::of(bn.gamma[c].f64() / (bn.running_var[c].f64() + crate::nn::BN_EPS).sqrt());
        for n in 0..sh.n {
            out.plane_mut(n, c).iter_mut().for_each(|v| *v *= k);
        }
    }
    out
}

/// Shape of a batch of `n` network inputs.
pub fn input_shape(spec: &NetworkSpec, n: usize) -> Shape {
    Shape::new(n, spec.input.0, spec.input.1, spec.input.2)
}
