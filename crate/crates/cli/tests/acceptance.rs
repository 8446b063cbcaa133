//! Acceptance suite. Runs every criterion in sequence (the benchmark must not
//! share the machine with training runs) and prints one PASS/FAIL line each.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::Instant;

use dau_core::analysis::{
    compute_erf, displacement_histogram, ones_probe, prune, speedup_estimate, HistogramKind, PruneScope,
};
use dau_core::bench::{run_bench, BenchConfig};
use dau_core::config::Config;
use dau_core::dau::{
    forward_efficient, rasterize_analytic, rasterize_reference, DauConfig, DauParams, Mode, Sigma,
};
use dau_core::fd::{finite_diff, max_rel_error, REL_FLOOR};
use dau_core::gradcheck::{self, Group};
use dau_core::network::{input_shape, DauLayerSpec, Layer, Network, NetworkSpec, Phase};
use dau_core::nn::softmax_xent;
use dau_core::tensor::{conv2d, KernelBank, Scalar, Shape, Tensor};
use dau_core::train::{evaluate, Trainer};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn synthetic_config() -> Config {
    Config::load(&workspace().join("configs/synthetic.conf")).expect("synthetic config")
}

fn spec(input: (usize, usize, usize), classes: usize, layers: &str, seed: u64) -> NetworkSpec {
    NetworkSpec {
        input,
        classes,
        layers: NetworkSpec::parse_layers(layers, &DauLayerSpec::new(1)).unwrap(),
        seed,
    }
}

fn cast_params(p: &DauParams<f64>) -> DauParams<f32> {
    DauParams {
        weight: p.weight.iter().map(|&v| v as f32).collect(),
        mu: p.mu.iter().map(|&v| v as f32).collect(),
        sigma: match &p.sigma {
            Sigma::Shared(s) => Sigma::Shared(*s as f32),
            Sigma::PerUnit(v) => Sigma::PerUnit(v.iter().map(|&s| s as f32).collect()),
        },
        bias: p.bias.iter().map(|&v| v as f32).collect(),
        active: p.active.clone(),
    }
}

fn reference_forward<T: Scalar>(x: &Tensor<T>, p: &DauParams<T>, cfg: &DauConfig) -> Tensor<T> {
    let bank = rasterize_reference(p, cfg).unwrap();
    conv2d(x, &bank.rotated(), &p.bias).unwrap()
}

fn equivalence_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut worst64, mut worst32) = (0.0f64, 0.0f64);
    for _ in 0..200 {
        let cfg = DauConfig::new(rng.gen_range(1..=8), rng.gen_range(1..=8), rng.gen_range(1..=4))
            .with_sigma(rng.gen_range(0.3..1.0));
        let dmax = cfg.max_displacement;
        let mut p = DauParams::<f64>::init(&cfg, 1.5, &mut rng);
        for m in p.mu.iter_mut() {
            *m = rng.gen_range(-dmax..=dmax);
        }
        for b in p.bias.iter_mut() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let x = Tensor::from_fn(Shape::new(1, cfg.in_channels, 16, 16), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let (z, _) = forward_efficient(&x, &p, &cfg).unwrap();
        let r = reference_forward(&x, &p, &cfg);
        worst64 = worst64.max(z.max_abs_diff(&r));
        let (z32, _) = forward_efficient(&x.cast::<f32>(), &cast_params(&p), &cfg).unwrap();
        worst32 = worst32.max(z32.cast::<f64>().max_abs_diff(&r));
    }
    ensure(worst64 < 1e-10 && worst32 < 1e-4, || {
        format!("max abs diff f64 {worst64:.3e} (< 1e-10), f32 {worst32:.3e} (< 1e-4)")
    })?;
    Ok(format!("200 configs, max abs diff f64 {worst64:.2e}, f32 {worst32:.2e}"))
}

/// Finite differences over every parameter and the input of a network built
/// from baseline layers only.
fn baseline_network_check() -> Result<f64, String> {
    let s = spec((2, 6, 6), 3, "conv:3:size=3, bn, relu, maxpool:2, conv:2:size=1, relu, dense:3, softmax_xent", 5);
    let net = Network::<f64>::build(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let x = Tensor::from_fn(input_shape(&s, 3), |_, _, _, _| rng.gen_range(-1.0..1.0));
    let labels = vec![2, 0, 1];
    let loss = |n: &Network<f64>, x: &Tensor<f64>| {
        let (logits, _) = n.clone().forward(x, Phase::Train).unwrap();
        softmax_xent(&logits, &labels).unwrap().0
    };
    let (logits, caches) = net.clone().forward(&x, Phase::Train).unwrap();
    let (_, g) = softmax_xent(&logits, &labels).unwrap();
    let (gx, grads) = net.backward(&caches, g).unwrap();
    let values = net.params();
    let mut worst = 0.0f64;
    for (k, info) in net.param_layout().iter().enumerate() {
        let num = finite_diff(
            |v| {
                let mut n = net.clone();
                n.params_mut()[k].copy_from_slice(v);
                loss(&n, &x)
            },
            &values[k],
            1e-5,
        )
        .unwrap();
        if num.iter().all(|v| v.abs() < 1e-8) {
            // a bias feeding batch norm cannot change the loss
            ensure(grads[k].iter().all(|v| v.abs() < 1e-12), || format!("{} should be zero", info.name))?;
            continue;
        }
        let (err, j) = max_rel_error(&grads[k], &num, REL_FLOOR);
        ensure(err < 1e-6, || format!("{}: rel error {err:.3e} at {j}", info.name))?;
        worst = worst.max(err);
    }
    let num = finite_diff(|v| loss(&net, &Tensor::from_vec(x.shape(), v.to_vec()).unwrap()), x.data(), 1e-5).unwrap();
    let (err, j) = max_rel_error(gx.data(), &num, REL_FLOOR);
    ensure(err < 1e-6, || format!("network input: rel error {err:.3e} at {j}"))?;
    Ok(worst.max(err))
}

fn gradient_suite() -> Outcome {
    let mut worst = std::collections::BTreeMap::<&str, f64>::new();
    for seed in 1..=5 {
        let report = gradcheck::run(seed, None).map_err(|e| e.to_string())?;
        if let Some(c) = report.failures().first() {
            return Err(format!(
                "seed {seed}: {} {}[{}] rel error {:.3e} >= {:.0e}",
                c.group,
                c.array,
                c.coordinate,
                c.rel_error,
                c.group.tolerance()
            ));
        }
        for c in report.worst_per_group() {
            let w = worst.entry(c.group.name()).or_default();
            *w = w.max(c.rel_error);
        }
    }
    ensure(worst.len() == Group::ALL.len(), || format!("only {} groups checked", worst.len()))?;
    let net = baseline_network_check()?;
    let groups: Vec<String> = worst.iter().map(|(g, e)| format!("{g} {e:.1e}")).collect();
    Ok(format!("5 seeds, worst {}; baseline network {net:.1e}", groups.join(", ")))
}

fn translation_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut pixels = 0usize;
    for case in 0..50 {
        let f = rng.gen_range(1..=4);
        let cfg = DauConfig::new(1, f, 1).with_sigma(rng.gen_range(0.3..1.0));
        let d = cfg.max_displacement as i32;
        let (h, w) = (rng.gen_range(8..=16), rng.gen_range(8..=16));
        let mut p = DauParams::<f64>::zeros(&cfg);
        let mut shifts = Vec::new();
        for u in 0..f {
            p.weight[u] = 1.0;
            let (my, mx) = (rng.gen_range(-d..=d), rng.gen_range(-d..=d));
            p.mu[2 * u] = my as f64;
            p.mu[2 * u + 1] = mx as f64;
            shifts.push((my, mx));
        }
        let x = Tensor::from_fn(Shape::new(2, 1, h, w), |_, _, _, _| rng.gen_range(-1.0..1.0));
        let (z, _) = forward_efficient(&x, &p, &cfg).unwrap();
        let single = DauConfig::new(1, 1, 1).with_sigma(cfg.sigma);
        let mut centred = DauParams::<f64>::zeros(&single);
        centred.weight[0] = 1.0;
        let (blurred, _) = forward_efficient(&x, &centred, &single).unwrap();
        for n in 0..2 {
            for (c, &(my, mx)) in shifts.iter().enumerate() {
                for y in 0..h as i32 {
                    for xx in 0..w as i32 {
                        let (sy, sx) = (y - my, xx - mx);
                        if !(0..h as i32).contains(&sy) || !(0..w as i32).contains(&sx) {
                            continue;
                        }
                        let got = z.get(n, c, y as usize, xx as usize);
                        let want = blurred.get(n, 0, sy as usize, sx as usize);
                        ensure(got == want, || format!("case {case}: ({y},{xx}) {got} != {want}"))?;
                        pixels += 1;
                    }
                }
            }
        }
    }
    Ok(format!("50 cases, {pixels} in-range pixels bit-identical"))
}

fn cost_model() -> Outcome {
    let gamma = speedup_estimate(9.0, 9.0, 2.0);
    ensure(gamma == 10.125, || format!("speedup_estimate(9,9,2) = {gamma}"))?;
    let cfg = BenchConfig::default();
    ensure(
        cfg.channels == 64 && cfg.size == 32 && cfg.units == 2 && cfg.sigma == 0.5,
        || "bench defaults changed".into(),
    )?;
    let rows = run_bench::<f32>(&cfg).map_err(|e| e.to_string())?;
    let row = rows
        .iter()
        .find(|r| r.path == "efficient" && r.pass == "forward")
        .ok_or("no efficient forward row")?;
    ensure(row.gamma == 21.125, || format!("row gamma {}", row.gamma))?;
    ensure(row.measured_speedup >= 3.0, || {
        format!("efficient forward only {:.2}x faster than naive", row.measured_speedup)
    })?;
    Ok(format!(
        "estimate(9,9,2) = {gamma}; 64ch 32x32 K=2: measured {:.1}x, gamma {}",
        row.measured_speedup, row.gamma
    ))
}

fn train_synthetic(cfg: &Config) -> (Network<f32>, f64) {
    let mut net = Network::<f32>::build(&cfg.network_spec().unwrap()).unwrap();
    net.mu_gradient = cfg.mu_gradient().unwrap();
    let data = cfg.data().unwrap();
    let mut t = Trainer::new(net, cfg.train_config().unwrap(), cfg.train_options().unwrap()).unwrap();
    let total = t.cfg.total_iterations;
    t.run(&data, total, &mut Vec::new(), |_, _| Ok(())).unwrap();
    let acc = evaluate(&t.net, &data.train, 256).unwrap().accuracy;
    (t.net, acc)
}

fn displacement_learning() -> Outcome {
    let cfg = synthetic_config();
    ensure(cfg.usize("train.iterations").unwrap() == 2000, || "expected 2000 steps".into())?;
    let (net, free) = train_synthetic(&cfg);
    let mut control = cfg.clone();
    control.set("dau.mu_init", "0").unwrap();
    control.set("train.mu_lr_mult", "0").unwrap();
    let (_, frozen) = train_synthetic(&control);
    let Layer::Dau { cfg: dau, params } = &net.layers()[0] else {
        return Err("first layer is not a DAU layer".into());
    };
    let hist = displacement_histogram(params, dau, 0.0, HistogramKind::Radial).map_err(|e| e.to_string())?;
    let beyond = hist.mass_beyond(1.0);
    ensure(free > 0.95 && frozen <= 0.75 && beyond > 0.5, || {
        format!("free {free:.4} (> 0.95), frozen {frozen:.4} (<= 0.75), mass beyond 1px {beyond:.3} (> 0.5)")
    })?;
    Ok(format!("free-mu train acc {free:.4}, frozen control {frozen:.4}, mass beyond 1px {beyond:.3}"))
}

fn sigma_insensitivity() -> Outcome {
    let mut accs = Vec::new();
    for sigma in ["0.4", "0.5", "0.6"] {
        for seed in ["1", "2", "3"] {
            let mut cfg = synthetic_config();
            cfg.set("dau.sigma", sigma).unwrap();
            cfg.set("net.seed", seed).unwrap();
            cfg.set("train.seed", seed).unwrap();
            accs.push(train_synthetic(&cfg).1);
        }
    }
    let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = accs.iter().cloned().fold(0.0, f64::max);
    ensure(hi - lo <= 0.03, || format!("accuracies span {lo:.4}..{hi:.4}"))?;
    Ok(format!("9 runs, train accuracy {lo:.4}..{hi:.4} (band {:.2} points)", 100.0 * (hi - lo)))
}

fn pruning() -> Outcome {
    let s = spec((2, 10, 10), 3, "dau:6:units=3, relu, maxpool:2, dau:4:units=2:mode=general, relu, maxpool:5, dense:3, softmax_xent", 8);
    let net = Network::<f64>::build(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    let x = Tensor::from_fn(input_shape(&s, 4), |_, _, _, _| rng.gen_range(-1.0..1.0));
    let logits = |n: &Network<f64>| n.clone().forward(&x, Phase::Eval).unwrap().0;
    let reference = logits(&net);
    let mut removed = Vec::new();
    for scope in [PruneScope::Layer, PruneScope::Global] {
        let mut last = -1.0;
        for t in [0.0, 0.01, 0.02, 0.05, 0.1, 0.25] {
            let mut pruned = net.clone();
            let r = prune(&mut pruned, t, scope).map_err(|e| e.to_string())?;
            let f = r.removed_fraction();
            ensure(f >= last, || format!("{scope:?}: removed fraction falls to {f} at {t}"))?;
            last = f;
            if scope == PruneScope::Layer {
                removed.push(format!("{:.1}", 100.0 * f));
            }
            if t == 0.0 {
                ensure(f == 0.0 && logits(&pruned).data() == reference.data(), || {
                    "threshold 0 changed the network".into()
                })?;
            }
            let mut zeroed = net.clone();
            for (z, p) in zeroed.layers_mut().iter_mut().zip(pruned.layers()) {
                if let (Layer::Dau { params: zp, .. }, Layer::Dau { params: pp, .. }) = (z, p) {
                    for (u, &a) in pp.active.iter().enumerate() {
                        if !a {
                            zp.weight[u] = 0.0;
                        }
                    }
                }
            }
            ensure(logits(&pruned).data() == logits(&zeroed).data(), || {
                format!("{scope:?} {t}: pruned and zeroed outputs differ")
            })?;
        }
    }
    Ok(format!("removed % over the grid: {}; 0 and zeroed forwards bit-exact", removed.join(", ")))
}

/// Effective convolution-orientation kernels of `w2` applied after `w1`.
fn compose(w2: &KernelBank<f64>, w1: &KernelBank<f64>) -> (usize, Vec<Vec<f64>>) {
    let r = w1.kh() / 2 + w2.kh() / 2;
    let side = 2 * r + 1;
    let mut out = vec![vec![0.0; side * side]; w2.out_channels() * w1.in_channels()];
    for f in 0..w2.out_channels() {
        for s in 0..w1.in_channels() {
            let e = &mut out[f * w1.in_channels() + s];
            for g in 0..w1.out_channels() {
                let (k2, k1) = (w2.kernel(f, g), w1.kernel(g, s));
                for (i2, a) in k2.iter().enumerate() {
                    for (i1, b) in k1.iter().enumerate() {
                        let y = i2 / w2.kw() + i1 / w1.kw();
                        let x = i2 % w2.kw() + i1 % w1.kw();
                        e[y * side + x] += a * b;
                    }
                }
            }
        }
    }
    (r, out)
}

/// Normalised `sum |E(c - p)|` over all effective kernels, at input pixel `p`.
fn kernel_erf(r: usize, kernels: &[Vec<f64>], side_in: usize, c: usize) -> Vec<f64> {
    let side = 2 * r + 1;
    let mut grid = vec![0.0; side_in * side_in];
    for e in kernels {
        for (i, v) in e.iter().enumerate() {
            let y = c + r - i / side;
            let x = c + r - i % side;
            grid[y * side_in + x] += v.abs();
        }
    }
    let total: f64 = grid.iter().sum();
    grid.iter().map(|v| v / total).collect()
}

fn erf_oracle() -> Outcome {
    let mut worst = 0.0f64;
    let side = 29;
    for (mode, seed) in [(Mode::General, 21), (Mode::Efficient, 22)] {
        let layers = format!(
            "dau:3:units=2:mode={0}:mu_init=3, dau:2:units=3:mode={0}:mu_init=3, maxpool:{side}, dense:2, softmax_xent",
            mode.name()
        );
        let net = Network::<f64>::build(&spec((2, side, side), 2, &layers, seed)).unwrap();
        let banks: Vec<KernelBank<f64>> = net
            .layers()
            .iter()
            .filter_map(|l| match l {
                Layer::Dau { cfg, params } => Some(match cfg.mode {
                    Mode::General => rasterize_analytic(params, cfg).unwrap(),
                    Mode::Efficient => rasterize_reference(params, cfg).unwrap(),
                }),
                _ => None,
            })
            .collect();
        let mut identity = KernelBank::zeros(2, 2, 1, 1);
        for i in 0..2 {
            identity.kernel_mut(i, i)[0] = 1.0;
        }
        for (layer, (w2, w1)) in [(0, (&banks[0], &identity)), (1, (&banks[1], &banks[0]))] {
            let erf = compute_erf(&net, layer, &ones_probe(&net)).map_err(|e| e.to_string())?;
            let (r, e) = compose(w2, w1);
            let oracle = kernel_erf(r, &e, side, side / 2);
            for (a, o) in erf.grid.iter().zip(&oracle) {
                worst = worst.max((a - o).abs());
            }
        }
    }
    ensure(worst < 1e-8, || format!("max cell error {worst:.3e}"))?;
    Ok(format!("1 and 2 layers, general and efficient, max cell error {worst:.2e}"))
}

fn dau(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dau")).args(args).output().expect("dau binary runs")
}

fn train_cli(out: &Path, extra: &[&str]) -> Result<(), String> {
    let config = workspace().join("configs/synthetic.conf");
    let mut args = vec![
        "train",
        "--config",
        config.to_str().unwrap(),
        "--threads",
        "1",
        "--out",
        out.to_str().unwrap(),
        "--set",
        "train.mirror=true",
        "--set",
        "train.log_every=10",
    ];
    args.extend_from_slice(extra);
    let o = dau(&args);
    ensure(o.status.success(), || format!("train failed: {}", String::from_utf8_lossy(&o.stderr)))
}

fn read(path: PathBuf) -> Vec<u8> {
    std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn determinism_and_persistence() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| dir.path().join(name);
    train_cli(&run("a"), &["--set", "train.iterations=40"])?;
    train_cli(&run("b"), &["--set", "train.iterations=40"])?;
    for file in ["history.csv", "checkpoint.ckpt"] {
        ensure(read(run("a").join(file)) == read(run("b").join(file)), || format!("{file} differs between runs"))?;
    }
    train_cli(&run("half"), &["--set", "train.iterations=20"])?;
    let ckpt = run("half").join("checkpoint.ckpt");
    train_cli(&run("resumed"), &["--set", "train.iterations=40", "--resume", ckpt.to_str().unwrap()])?;
    ensure(read(run("a").join("checkpoint.ckpt")) == read(run("resumed").join("checkpoint.ckpt")), || {
        "resumed checkpoint differs from the uninterrupted one".into()
    })?;
    let tail = |p: PathBuf| String::from_utf8(read(p)).unwrap().lines().last().unwrap().to_string();
    ensure(tail(run("a").join("history.csv")) == tail(run("resumed").join("history.csv")), || {
        "resumed history differs".into()
    })?;
    Ok("two --threads 1 runs byte-identical; 20 + resume 20 equals 40 steps byte for byte".into())
}

fn gradcheck_cli() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let out = dir.path().to_str().unwrap();
    let clean = dau(&["gradcheck", "--out", out]);
    ensure(clean.status.success(), || format!("clean run exited {:?}", clean.status.code()))?;
    for g in Group::ALL {
        let o = dau(&["gradcheck", "--out", out, "--fault", g.name()]);
        let text = format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr));
        ensure(!o.status.success(), || format!("--fault {g} exited 0"))?;
        let named = text.lines().any(|l| l.starts_with("error:") && l.contains(g.name()));
        ensure(named, || format!("--fault {g} did not name the group"))?;
    }
    Ok(format!("clean exit 0; all {} faults exit nonzero naming their group", Group::ALL.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("equivalence oracle", equivalence_oracle),
        ("gradient suite", gradient_suite),
        ("translation invariance", translation_invariance),
        ("cost model", cost_model),
        ("displacement learning", displacement_learning),
        ("sigma insensitivity", sigma_insensitivity),
        ("pruning", pruning),
        ("receptive field oracle", erf_oracle),
        ("determinism and persistence", determinism_and_persistence),
        ("gradcheck cli", gradcheck_cli),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
