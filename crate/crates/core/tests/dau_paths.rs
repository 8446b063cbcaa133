use dau_core::dau::{
    backward_efficient, backward_naive, forward_efficient, forward_naive, rasterize_frozen_stencil,
    rasterize_reference, DauConfig, DauParams, Mode, MuGradient, Rasterizer, Sigma,
};
use dau_core::fd::{finite_diff, max_rel_error, REL_FLOOR};
use dau_core::tensor::{conv2d, Scalar, Shape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_tensor(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
}

/// Random params with every displacement component at least `margin` from an
/// integer (when `margin > 0`).
fn random_params(cfg: &DauConfig, margin: f64, rng: &mut ChaCha8Rng) -> DauParams<f64> {
    let mut p = DauParams::<f64>::init(cfg, 1.5, rng);
    let lim = cfg.max_displacement - 1.0;
    for m in p.mu.iter_mut() {
        loop {
            let v: f64 = rng.gen_range(-lim..lim);
            let frac = v - v.floor();
            if margin == 0.0 || (frac > margin && frac < 1.0 - margin) {
                *m = v;
                break;
            }
        }
    }
    for b in p.bias.iter_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    p
}

fn weighted_sum(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn reference_forward<T: Scalar>(x: &Tensor<T>, p: &DauParams<T>, cfg: &DauConfig) -> Tensor<T> {
    let bank = rasterize_reference(p, cfg).unwrap();
    conv2d(x, &bank.rotated(), &p.bias).unwrap()
}

#[test]
fn efficient_matches_reference_convolution_f64() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let cfg = DauConfig::new(rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4))
            .with_sigma(rng.gen_range(0.3..0.9));
        let mut p = random_params(&cfg, 0.0, &mut rng);
        for m in p.mu.iter_mut() {
            *m = rng.gen_range(-4.0..=4.0);
        }
        let x = random_tensor(Shape::new(2, cfg.in_channels, 16, 16), &mut rng);
        let (z, _) = forward_efficient(&x, &p, &cfg).unwrap();
        let r = reference_forward(&x, &p, &cfg);
        assert!(z.max_abs_diff(&r) < 1e-10, "diff {}", z.max_abs_diff(&r));
    }
}

#[test]
fn efficient_matches_reference_convolution_f32() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = DauConfig::new(4, 3, 2);
    let p = random_params(&cfg, 0.0, &mut rng);
    let x = random_tensor(Shape::new(2, 4, 16, 16), &mut rng);
    let p32 = DauParams::<f32> {
        weight: p.weight.iter().map(|&v| v as f32).collect(),
        mu: p.mu.iter().map(|&v| v as f32).collect(),
        sigma: Sigma::Shared(0.5),
        bias: p.bias.iter().map(|&v| v as f32).collect(),
        active: p.active.clone(),
    };
    let (z, _) = forward_efficient(&x.cast::<f32>(), &p32, &cfg).unwrap();
    let r = reference_forward(&x, &p, &cfg);
    assert!(z.cast::<f64>().max_abs_diff(&r) < 1e-4);
}

#[test]
fn naive_reference_equals_efficient() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = DauConfig::new(3, 2, 3);
    let p = random_params(&cfg, 0.0, &mut rng);
    let x = random_tensor(Shape::new(2, 3, 12, 12), &mut rng);
    let (z, _) = forward_efficient(&x, &p, &cfg).unwrap();
    let n = forward_naive(&x, &p, &cfg, Rasterizer::Reference).unwrap();
    assert!(z.max_abs_diff(&n) < 1e-10);
}

#[test]
fn integer_displacement_translates_the_blurred_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for _ in 0..10 {
        let cfg = DauConfig::new(1, 1, 1);
        let mut p = DauParams::<f64>::zeros(&cfg);
        p.weight[0] = 1.0;
        let (my, mx) = (rng.gen_range(-4i32..=4), rng.gen_range(-4i32..=4));
        p.mu = vec![my as f64, mx as f64];
        let x = random_tensor(Shape::new(1, 1, 10, 11), &mut rng);
        let (z, _) = forward_efficient(&x, &p, &cfg).unwrap();
        let mut centred = p.clone();
        centred.mu = vec![0.0, 0.0];
        let (blurred, _) = forward_efficient(&x, &centred, &cfg).unwrap();
        for y in 0..10i32 {
            for xx in 0..11i32 {
                let (sy, sx) = (y - my, xx - mx);
                if (0..10).contains(&sy) && (0..11).contains(&sx) {
                    let want = blurred.get(0, 0, sy as usize, sx as usize);
                    assert_eq!(z.get(0, 0, y as usize, xx as usize), want);
                }
            }
        }
    }
}

#[test]
fn naive_zero_input_gives_bias() {
    let cfg = DauConfig::new(2, 3, 2).with_mode(Mode::General);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let p = random_params(&cfg, 0.0, &mut rng);
    let x = Tensor::zeros(Shape::new(1, 2, 6, 6));
    let z = forward_naive(&x, &p, &cfg, Rasterizer::Analytic).unwrap();
    for f in 0..3 {
        assert!(z.plane(0, f).iter().all(|&v| v == p.bias[f]));
    }
}

#[test]
fn narrow_unit_shifts_rows_down() {
    let cfg = DauConfig::new(1, 1, 1).with_sigma(0.2).with_mode(Mode::General);
    let mut p = DauParams::<f64>::zeros(&cfg);
    p.weight[0] = 1.0;
    p.mu = vec![2.0, 0.0];
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let x = random_tensor(Shape::new(1, 1, 8, 8), &mut rng);
    let z = forward_naive(&x, &p, &cfg, Rasterizer::Analytic).unwrap();
    for y in 2..8 {
        for xx in 0..8 {
            assert!((z.get(0, 0, y, xx) - x.get(0, 0, y - 2, xx)).abs() < 1e-4);
        }
    }
}

#[test]
fn analytic_and_reference_rasterisers_agree_at_integer_mu() {
    let cfg = DauConfig::new(2, 2, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut p = random_params(&cfg, 0.0, &mut rng);
    for m in p.mu.iter_mut() {
        *m = m.round();
    }
    let x = random_tensor(Shape::new(1, 2, 10, 10), &mut rng);
    let a = forward_naive(&x, &p, &cfg, Rasterizer::Analytic).unwrap();
    let r = forward_naive(&x, &p, &cfg, Rasterizer::Reference).unwrap();
    let scale = r.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(a.max_abs_diff(&r) < 1e-4 * scale);
}

struct Case {
    cfg: DauConfig,
    params: DauParams<f64>,
    input: Tensor<f64>,
    delta: Tensor<f64>,
}

fn case(cfg: DauConfig, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = random_params(&cfg, 0.1, &mut rng);
    let input = random_tensor(Shape::new(2, cfg.in_channels, 7, 8), &mut rng);
    let delta = random_tensor(Shape::new(2, cfg.out_channels, 7, 8), &mut rng);
    Case { cfg, params, input, delta }
}

fn efficient_loss(c: &Case, p: &DauParams<f64>, x: &Tensor<f64>) -> f64 {
    weighted_sum(&forward_efficient(x, p, &c.cfg).unwrap().0, &c.delta)
}

fn naive_loss(c: &Case, p: &DauParams<f64>, x: &Tensor<f64>) -> f64 {
    weighted_sum(&forward_naive(x, p, &c.cfg, Rasterizer::Analytic).unwrap(), &c.delta)
}

fn check(name: &str, analytic: &[f64], numeric: &[f64], tol: f64) {
    let (err, j) = max_rel_error(analytic, numeric, REL_FLOOR);
    assert!(err < tol, "{name}: rel err {err:.3e} at {j} ({} vs {})", analytic[j], numeric[j]);
}

#[test]
fn efficient_gradients_match_finite_differences() {
    let c = case(DauConfig::new(2, 3, 2), 21);
    let (z, cache) = forward_efficient(&c.input, &c.params, &c.cfg).unwrap();
    assert_eq!(z.shape(), c.delta.shape());
    let (gx, g) = backward_efficient(&cache, &c.delta, &c.params, &c.cfg, MuGradient::Surrogate).unwrap();
    let h = 1e-5;

    let num_w = finite_diff(
        |w| {
            let mut p = c.params.clone();
            p.weight.copy_from_slice(w);
            efficient_loss(&c, &p, &c.input)
        },
        &c.params.weight,
        h,
    )
    .unwrap();
    check("w", &g.weight, &num_w, 1e-6);

    let num_b = finite_diff(
        |b| {
            let mut p = c.params.clone();
            p.bias.copy_from_slice(b);
            efficient_loss(&c, &p, &c.input)
        },
        &c.params.bias,
        h,
    )
    .unwrap();
    check("bias", &g.bias, &num_b, 1e-6);

    let num_x = finite_diff(
        |v| {
            let x = Tensor::from_vec(c.input.shape(), v.to_vec()).unwrap();
            efficient_loss(&c, &c.params, &x)
        },
        c.input.data(),
        h,
    )
    .unwrap();
    check("input", gx.data(), &num_x, 1e-6);

    // surrogate: derivative of the loss with stencils frozen at the current mu
    let anchors: Vec<(f64, f64)> = (0..c.params.units()).map(|u| c.params.mu_at(u)).collect();
    let num_mu = finite_diff(
        |m| {
            let mut p = c.params.clone();
            p.mu.copy_from_slice(m);
            let bank = rasterize_frozen_stencil(&p, &c.cfg, &anchors).unwrap();
            weighted_sum(&conv2d(&c.input, &bank.rotated(), &p.bias).unwrap(), &c.delta)
        },
        &c.params.mu,
        h,
    )
    .unwrap();
    check("mu surrogate", &g.mu, &num_mu, 1e-3);
}

#[test]
fn exact_mu_gradient_matches_bilinear_finite_differences() {
    let c = case(DauConfig::new(2, 2, 3), 22);
    let (_, cache) = forward_efficient(&c.input, &c.params, &c.cfg).unwrap();
    let (_, g) = backward_efficient(&cache, &c.delta, &c.params, &c.cfg, MuGradient::Exact).unwrap();
    let num = finite_diff(
        |m| {
            let mut p = c.params.clone();
            p.mu.copy_from_slice(m);
            efficient_loss(&c, &p, &c.input)
        },
        &c.params.mu,
        1e-5,
    )
    .unwrap();
    check("mu exact", &g.mu, &num, 1e-6);
}

#[test]
fn naive_gradients_match_finite_differences() {
    let cfg = DauConfig::new(2, 2, 2).with_mode(Mode::General).with_sigma_learnable(true);
    let mut c = case(cfg, 23);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    c.params.sigma = Sigma::PerUnit((0..c.params.units()).map(|_| rng.gen_range(0.4..0.9)).collect());
    let (gx, g) = backward_naive(&c.input, &c.delta, &c.params, &c.cfg).unwrap();
    let h = 1e-5;
    let with = |f: &dyn Fn(&mut DauParams<f64>)| {
        let mut p = c.params.clone();
        f(&mut p);
        naive_loss(&c, &p, &c.input)
    };
    let num_w = finite_diff(|w| with(&|p| p.weight.copy_from_slice(w)), &c.params.weight, h).unwrap();
    check("w", &g.weight, &num_w, 1e-5);
    let num_mu = finite_diff(|m| with(&|p| p.mu.copy_from_slice(m)), &c.params.mu, h).unwrap();
    check("mu", &g.mu, &num_mu, 1e-5);
    let sig = c.params.sigma.values().to_vec();
    let num_s = finite_diff(|s| with(&|p| p.sigma.values_mut().copy_from_slice(s)), &sig, h).unwrap();
    check("sigma", &g.sigma, &num_s, 1e-5);
    let num_b = finite_diff(|b| with(&|p| p.bias.copy_from_slice(b)), &c.params.bias, h).unwrap();
    check("bias", &g.bias, &num_b, 1e-6);
    let num_x = finite_diff(
        |v| naive_loss(&c, &c.params, &Tensor::from_vec(c.input.shape(), v.to_vec()).unwrap()),
        c.input.data(),
        h,
    )
    .unwrap();
    check("input", gx.data(), &num_x, 1e-5);
}

#[test]
fn sigma_gradient_vanishes_on_constant_input() {
    let cfg = DauConfig::new(1, 1, 1).with_mode(Mode::General).with_sigma_learnable(true);
    let mut p = DauParams::<f64>::zeros(&cfg);
    p.weight[0] = 1.3;
    p.mu = vec![0.7, -1.2];
    p.sigma = Sigma::PerUnit(vec![0.6]);
    let x = Tensor::full(Shape::new(1, 1, 20, 20), 2.0);
    // only pixels whose whole canvas lies inside the image see a constant input
    let mut delta = Tensor::zeros(Shape::new(1, 1, 20, 20));
    for y in 7..13 {
        for xx in 7..13 {
            delta.set(0, 0, y, xx, 1.0 + (y * xx) as f64 * 0.01);
        }
    }
    let (_, g) = backward_naive(&x, &delta, &p, &cfg).unwrap();
    assert!(g.sigma[0].abs() < 1e-10, "{}", g.sigma[0]);
}

#[test]
fn one_hot_delta_samples_the_blurred_input() {
    let cfg = DauConfig::new(1, 1, 1).with_mode(Mode::General);
    let mut p = DauParams::<f64>::zeros(&cfg);
    p.weight[0] = 0.8;
    p.mu = vec![1.0, -2.0];
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = random_tensor(Shape::new(1, 1, 12, 12), &mut rng);
    let mut delta = Tensor::zeros(Shape::new(1, 1, 12, 12));
    delta.set(0, 0, 6, 5, 1.0);
    let (_, g) = backward_naive(&x, &delta, &p, &cfg).unwrap();
    // unit response at (6, 5) is the blurred input sampled at (6, 5) - mu
    let mut unit = p.clone();
    unit.weight[0] = 1.0;
    let z = forward_naive(&x, &unit, &cfg, Rasterizer::Analytic).unwrap();
    assert!((g.weight[0] - z.get(0, 0, 6, 5)).abs() < 1e-12);
    let mut centred = unit.clone();
    centred.mu = vec![0.0, 0.0];
    let blurred = forward_naive(&x, &centred, &cfg, Rasterizer::Analytic).unwrap();
    assert!((g.weight[0] - blurred.get(0, 0, 5, 7)).abs() < 1e-4);
}

#[test]
fn zero_grad_output_gives_zero_gradients() {
    let c = case(DauConfig::new(2, 2, 2), 41);
    let (_, cache) = forward_efficient(&c.input, &c.params, &c.cfg).unwrap();
    let zero = Tensor::zeros(c.delta.shape());
    let (gx, g) = backward_efficient(&cache, &zero, &c.params, &c.cfg, MuGradient::Surrogate).unwrap();
    assert!(gx.data().iter().all(|&v| v == 0.0));
    assert!(g.weight.iter().chain(&g.mu).chain(&g.bias).all(|&v| v == 0.0));
}

#[test]
fn results_do_not_depend_on_thread_count() {
    let c = case(DauConfig::new(3, 4, 2), 42);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let (z, cache) = forward_efficient(&c.input, &c.params, &c.cfg).unwrap();
            let (gx, g) = backward_efficient(&cache, &c.delta, &c.params, &c.cfg, MuGradient::Surrogate).unwrap();
            let (gxn, gn) = backward_naive(&c.input, &c.delta, &c.params, &c.cfg).unwrap();
            (z, gx, g, gxn, gn)
        })
    };
    let (a, b) = (run(1), run(4));
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2, b.2);
    assert_eq!(a.3.data(), b.3.data());
    assert_eq!(a.4, b.4);
}

#[test]
fn pruned_units_are_skipped() {
    let c = case(DauConfig::new(2, 2, 3), 43);
    let mut pruned = c.params.clone();
    pruned.active[1] = false;
    pruned.active[7] = false;
    let mut zeroed = c.params.clone();
    zeroed.weight[1] = 0.0;
    zeroed.weight[7] = 0.0;
    let a = forward_efficient(&c.input, &pruned, &c.cfg).unwrap().0;
    let b = forward_efficient(&c.input, &zeroed, &c.cfg).unwrap().0;
    assert!(a.max_abs_diff(&b) < 1e-14);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn linear_in_weights_and_input(seed in 0u64..1000, alpha in -2.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DauConfig::new(2, 2, 2);
        let mut p = random_params(&cfg, 0.0, &mut rng);
        p.bias.iter_mut().for_each(|b| *b = 0.0);
        let x = random_tensor(Shape::new(1, 2, 6, 6), &mut rng);
        let z = forward_efficient(&x, &p, &cfg).unwrap().0;
        let mut ps = p.clone();
        ps.weight.iter_mut().for_each(|w| *w *= alpha);
        let zw = forward_efficient(&x, &ps, &cfg).unwrap().0;
        let xs = Tensor::from_vec(x.shape(), x.data().iter().map(|v| v * alpha).collect()).unwrap();
        let zx = forward_efficient(&xs, &p, &cfg).unwrap().0;
        for ((a, b), c) in z.data().iter().zip(zw.data()).zip(zx.data()) {
            prop_assert!((a * alpha - b).abs() < 1e-12);
            prop_assert!((a * alpha - c).abs() < 1e-12);
        }
    }

    #[test]
    fn equivalence_on_random_shapes(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = DauConfig::new(rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5))
            .with_sigma(rng.gen_range(0.3..1.0))
            .with_max_displacement(rng.gen_range(1.0..4.5));
        let mut p = DauParams::<f64>::init(&cfg, 1.0, &mut rng);
        let d = cfg.max_displacement;
        p.mu.iter_mut().for_each(|m| *m = rng.gen_range(-d..=d));
        let x = random_tensor(Shape::new(rng.gen_range(1..3), cfg.in_channels, rng.gen_range(1..17), rng.gen_range(1..17)), &mut rng);
        let z = forward_efficient(&x, &p, &cfg).unwrap().0;
        prop_assert!(z.max_abs_diff(&reference_forward(&x, &p, &cfg)) < 1e-10);
    }
}
