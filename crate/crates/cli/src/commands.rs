use std::fs;
use std::path::{Path, PathBuf};

use dau_core::analysis::{compute_erf, displacement_histogram, ones_probe, prune, HistogramKind, PruneReport, PruneScope};
use dau_core::bench::{bench_csv, run_bench, BenchConfig};
use dau_core::checkpoint::{load_checkpoint, Checkpoint};
use dau_core::config::Config;
use dau_core::data::{DataSplit, Dataset};
use dau_core::gradcheck::{self, Group};
use dau_core::network::{Layer, Network};
use dau_core::optim::ParamGroup;
use dau_core::train::{evaluate, fmt_sig, history_csv, Trainer, HISTORY_HEADER};
use dau_core::{Error, Scalar};

use crate::manifest::Manifest;
use crate::{Command, Failure, Global, Precision, EXIT_NUMERICAL};

/// Thresholds reported by `prune --sweep`.
pub const SWEEP: [f64; 6] = [0.0, 0.01, 0.02, 0.05, 0.1, 0.25];

/// Histogram filters written by `analyze --histograms`: every unit, then
/// units with at least 90% and 75% of the largest absolute weight.
pub const HISTOGRAM_FILTERS: [(f64, &str); 3] = [(0.0, "all"), (0.9, "top90"), (0.75, "top75")];

type Outcome = Result<(), Failure>;

pub fn run(g: &Global, command: &Command) -> Outcome {
    let mut cfg = match &g.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for s in &g.set {
        cfg.set_line(s)?;
    }
    fs::create_dir_all(&g.out)?;
    let ctx = Ctx { g, cfg };
    match (command, g.precision) {
        (Command::Gradcheck { fault }, _) => ctx.gradcheck(fault.as_deref()),
        (c, Precision::F32) => ctx.dispatch::<f32>(c),
        (c, Precision::F64) => ctx.dispatch::<f64>(c),
    }
}

struct Ctx<'a> {
    g: &'a Global,
    cfg: Config,
}

fn write(path: &Path, text: &str, manifest: &mut Manifest) -> Outcome {
    fs::write(path, text)?;
    manifest.artifact(path);
    Ok(())
}

/// Writes through a temporary file so an interrupted save keeps the old one.
fn save_atomic(path: &Path, ck: &Checkpoint) -> dau_core::Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, ck.to_bytes())?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn check_data<T: Scalar>(net: &Network<T>, data: &Dataset) -> dau_core::Result<()> {
    let spec = net.spec();
    if data.item_shape() != spec.input {
        return Err(Error::Data(format!(
            "data items are {:?} but the network expects {:?}",
            data.item_shape(),
            spec.input
        )));
    }
    if data.classes > spec.classes {
        return Err(Error::Data(format!(
            "data has {} classes but the network predicts {}",
            data.classes, spec.classes
        )));
    }
    Ok(())
}

impl Ctx<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.g.out.join(name)
    }

    fn manifest(&self, command: &'static str) -> Manifest {
        let mut m = Manifest::new(command, &self.cfg, self.g.config.as_deref());
        m.push("precision", format!("{:?}", self.g.precision).to_lowercase());
        m.push("data", self.cfg.get("data.kind").unwrap_or_default());
        m
    }

    fn restore<T: Scalar>(&self, path: &Path) -> Result<(Network<T>, Vec<ParamGroup>, u64), Failure> {
        let ck = load_checkpoint(path)?;
        let (mut net, groups) = ck.restore::<T>()?;
        net.mu_gradient = self.cfg.mu_gradient()?;
        Ok((net, groups, ck.step))
    }

    fn dispatch<T: Scalar>(&self, command: &Command) -> Outcome {
        match command {
            Command::Train { resume } => self.train::<T>(resume.as_deref()),
            Command::Eval { checkpoint, train_split } => self.eval::<T>(checkpoint, *train_split),
            Command::Prune {
                checkpoint,
                threshold,
                scope,
                sweep,
            } => self.prune::<T>(checkpoint, *threshold, scope.as_deref(), *sweep),
            Command::Analyze {
                checkpoint,
                histograms,
                erf,
                layer,
            } => {
                let both = !histograms && !erf;
                self.analyze::<T>(checkpoint.as_deref(), *histograms || both, *erf || both, *layer)
            }
            Command::Bench => self.bench::<T>(),
            Command::Gradcheck { .. } => unreachable!("gradcheck always runs in double precision"),
        }
    }

    fn train<T: Scalar>(&self, resume: Option<&Path>) -> Outcome {
        let tcfg = self.cfg.train_config()?;
        let opts = self.cfg.train_options()?;
        let mut manifest = self.manifest("train");
        let mut trainer = match resume {
            Some(p) => {
                let (net, groups, step) = self.restore::<T>(p)?;
                manifest.checkpoint("resume", p)?;
                Trainer::resume(net, groups, step as usize, tcfg, opts)?
            }
            None => {
                let mut net = Network::<T>::build(&self.cfg.network_spec()?)?;
                net.mu_gradient = self.cfg.mu_gradient()?;
                Trainer::new(net, tcfg, opts)?
            }
        };
        let data = self.cfg.data()?;
        check_data(&trainer.net, &data.train)?;
        write(&self.out("config.txt"), &self.cfg.canonical(), &mut manifest)?;
        let ckpt = self.out("checkpoint.ckpt");
        let total = trainer.cfg.total_iterations;
        println!("{HISTORY_HEADER}");
        let mut history = Vec::new();
        let result = trainer.run(&data, total, &mut history, |t, row| {
            save_atomic(&ckpt, &Checkpoint::capture(&t.net, &t.groups, t.step))?;
            println!("{}", row.csv());
            Ok(())
        });
        if history.is_empty() && result.is_ok() {
            save_atomic(&ckpt, &Checkpoint::capture(&trainer.net, &trainer.groups, trainer.step))?;
        }
        write(&self.out("history.csv"), &history_csv(&history), &mut manifest)?;
        if ckpt.exists() {
            manifest.checkpoint("checkpoint", &ckpt)?;
        }
        manifest.push("steps", trainer.step);
        manifest.push("sigma_floored", trainer.sigma_floored);
        manifest.write(&self.g.out)?;
        if let Err(e) = result {
            let mut f = Failure::from(e);
            if f.code == EXIT_NUMERICAL && ckpt.exists() {
                f.message.push_str(&format!("; last good checkpoint kept at {}", ckpt.display()));
            }
            return Err(f);
        }
        Ok(())
    }

    fn eval<T: Scalar>(&self, checkpoint: &Path, train_split: bool) -> Outcome {
        let (net, _, _) = self.restore::<T>(checkpoint)?;
        let data = self.cfg.data()?;
        let (name, set) = if train_split { ("train", &data.train) } else { ("test", &data.test) };
        check_data(&net, set)?;
        let r = evaluate(&net, set, self.cfg.usize("train.eval_batch")?)?;
        println!("accuracy {} loss {}", fmt_sig(r.accuracy), fmt_sig(r.loss));
        let mut manifest = self.manifest("eval");
        manifest.checkpoint("checkpoint", checkpoint)?;
        let csv = format!(
            "split,items,accuracy,loss\n{name},{},{},{}\n",
            set.len(),
            fmt_sig(r.accuracy),
            fmt_sig(r.loss)
        );
        write(&self.out("eval.csv"), &csv, &mut manifest)?;
        manifest.write(&self.g.out)?;
        Ok(())
    }

    fn prune<T: Scalar>(&self, checkpoint: &Path, threshold: Option<f64>, scope: Option<&str>, sweep: bool) -> Outcome {
        let (net, groups, step) = self.restore::<T>(checkpoint)?;
        let scope: PruneScope = match scope {
            Some(s) => s.parse()?,
            None => self.cfg.string("prune.scope")?.parse()?,
        };
        let data = self.cfg.data()?;
        check_data(&net, &data.test)?;
        let batch = self.cfg.usize("train.eval_batch")?;
        let before = evaluate(&net, &data.test, batch)?.accuracy;
        let mut manifest = self.manifest("prune");
        manifest.checkpoint("checkpoint", checkpoint)?;
        let thresholds = if sweep {
            SWEEP.to_vec()
        } else {
            vec![match threshold {
                Some(t) => t,
                None => self.cfg.f64("prune.threshold")?,
            }]
        };
        let mut csv = String::new();
        let mut last: Option<(Network<T>, PruneReport)> = None;
        for &t in &thresholds {
            let mut pruned = net.clone();
            let mut report = prune(&mut pruned, t, scope)?;
            report.accuracy_before = Some(before);
            report.accuracy_after = Some(evaluate(&pruned, &data.test, batch)?.accuracy);
            let table = report.csv();
            if csv.is_empty() {
                csv.push_str(&table);
            } else {
                csv.extend(table.lines().skip(1).map(|l| format!("{l}\n")));
            }
            println!(
                "threshold {} removed {}% accuracy {} -> {}",
                fmt_sig(t),
                fmt_sig(100.0 * report.removed_fraction()),
                fmt_sig(before),
                fmt_sig(report.accuracy_after.unwrap_or(f64::NAN))
            );
            last = Some((pruned, report));
        }
        write(&self.out("prune.csv"), &csv, &mut manifest)?;
        if !sweep {
            let (pruned, _) = last.expect("one threshold");
            let path = self.out("pruned.ckpt");
            save_atomic(&path, &Checkpoint::capture(&pruned, &groups, step as usize))?;
            manifest.checkpoint("pruned", &path)?;
        }
        manifest.write(&self.g.out)?;
        Ok(())
    }

    fn analyze<T: Scalar>(&self, checkpoint: Option<&Path>, histograms: bool, erf: bool, layer: Option<usize>) -> Outcome {
        let mut manifest = self.manifest("analyze");
        let net = match checkpoint {
            Some(p) => {
                manifest.checkpoint("checkpoint", p)?;
                self.restore::<T>(p)?.0
            }
            None => Network::<T>::build(&self.cfg.network_spec()?)?,
        };
        if histograms {
            for i in net.dau_layers() {
                let Layer::Dau { cfg, params } = &net.layers()[i] else { unreachable!() };
                for (min_rel, tag) in HISTOGRAM_FILTERS {
                    for (kind, stem) in [(HistogramKind::Radial, "hist"), (HistogramKind::Planar, "hist2d")] {
                        let h = displacement_histogram(params, cfg, min_rel, kind)?;
                        write(&self.out(&format!("{stem}_layer{i}_{tag}.csv")), &h.csv(), &mut manifest)?;
                        if kind == HistogramKind::Radial {
                            println!(
                                "layer {i} {tag}: mass beyond 1px {}",
                                fmt_sig(h.mass_beyond(1.0))
                            );
                        }
                    }
                }
            }
        }
        if erf {
            let layer = match layer {
                Some(l) => l,
                None => self.cfg.usize("analyze.erf_layer")?,
            };
            let probe = match self.cfg.string("analyze.erf_probe")?.as_str() {
                "ones" => ones_probe(&net),
                "data" => {
                    let data: DataSplit = self.cfg.data()?;
                    check_data(&net, &data.test)?;
                    let n = self.cfg.usize("analyze.erf_samples")?.clamp(1, data.test.len());
                    data.test.batch::<T>(&(0..n).collect::<Vec<_>>())
                }
                other => return Err(Error::Config(format!("unknown analyze.erf_probe `{other}` (ones, data)")).into()),
            };
            manifest.push("erf_probe", self.cfg.string("analyze.erf_probe")?);
            let map = compute_erf(&net, layer, &probe)?;
            write(&self.out(&format!("erf_layer{layer}.csv")), &map.grid_csv(), &mut manifest)?;
            write(&self.out(&format!("erf_layer{layer}_contours.csv")), &map.contours_csv(), &mut manifest)?;
            write(&self.out(&format!("erf_layer{layer}.svg")), &map.svg(), &mut manifest)?;
            for c in &map.contours {
                println!("erf layer {layer}: {}% of mass in {} cells", fmt_sig(100.0 * c.fraction), c.area());
            }
        }
        manifest.write(&self.g.out)?;
        Ok(())
    }

    fn bench<T: Scalar>(&self) -> Outcome {
        let c = &self.cfg;
        let bc = BenchConfig {
            warmup: c.usize("bench.warmup")?,
            iters: c.usize("bench.iters")?,
            channels: c.usize("bench.channels")?,
            size: c.usize("bench.size")?,
            batch: c.usize("bench.batch")?,
            units: c.usize("bench.units")?,
            sigma: c.f64("bench.sigma")?,
            dmax: c.f64("bench.dmax")?,
            seed: 1,
        };
        let rows = run_bench::<T>(&bc)?;
        let csv = bench_csv(&rows);
        print!("{csv}");
        let mut manifest = self.manifest("bench");
        write(&self.out("bench.csv"), &csv, &mut manifest)?;
        manifest.write(&self.g.out)?;
        Ok(())
    }

    fn gradcheck(&self, fault: Option<&str>) -> Outcome {
        let fault = fault.map(str::parse::<Group>).transpose()?;
        let report = gradcheck::run(self.cfg.usize("gradcheck.seed")? as u64, fault)?;
        let mut csv = String::from("group,array,rel_error,tolerance,coordinate,analytic,numeric,passed\n");
        for c in &report.checks {
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.group,
                c.array,
                fmt_sig(c.rel_error),
                fmt_sig(c.group.tolerance()),
                c.coordinate,
                fmt_sig(c.analytic),
                fmt_sig(c.numeric),
                c.passed()
            ));
        }
        for c in report.worst_per_group() {
            println!(
                "{:<13} worst rel error {:.3e} (tol {:.0e}, {} coordinate {}) {}",
                c.group.name(),
                c.rel_error,
                c.group.tolerance(),
                c.array,
                c.coordinate,
                if c.passed() { "PASS" } else { "FAIL" }
            );
        }
        let mut manifest = self.manifest("gradcheck");
        manifest.push("fault", fault.map_or("none", Group::name));
        write(&self.out("gradcheck.csv"), &csv, &mut manifest)?;
        manifest.write(&self.g.out)?;
        let failures = report.failures();
        if failures.is_empty() {
            return Ok(());
        }
        let names: Vec<String> = failures
            .iter()
            .map(|c| format!("{} ({} coordinate {}: analytic {:e}, numeric {:e})", c.group, c.array, c.coordinate, c.analytic, c.numeric))
            .collect();
        Err(Failure {
            code: EXIT_NUMERICAL,
            message: format!("gradient check failed for {}", names.join("; ")),
        })
    }
}
