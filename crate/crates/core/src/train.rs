//! Iteration-based training loop and evaluation.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::network::{Network, Phase};
use crate::nn::{accuracy, softmax_xent};
use crate::optim::{lr_schedule, sgd_step, ParamGroup, TrainConfig};
use crate::tensor::{Scalar, Tensor};

/// Identifier of the sampling scheme stored in checkpoints. Shuffles and
/// mirror flips are pure functions of `(seed, epoch)` and `(seed, step)`
/// drawn from ChaCha8 streams.
pub const RNG_ID: &str = "chacha8-stream-v1";

const SHUFFLE_STREAM: u64 = 1 << 40;
const MIRROR_STREAM: u64 = 2 << 40;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub seed: u64,
    /// Flip each training image horizontally with probability 0.5.
    pub mirror: bool,
    /// Emit a history row every this many steps (and after the last one).
    pub log_every: usize,
    /// Items per evaluation batch.
    pub eval_batch: usize,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            seed: 1,
            mirror: false,
            log_every: 100,
            eval_batch: 256,
        }
    }
}

/// One line of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    /// Mean batch loss since the previous row.
    pub loss: f64,
    /// Mean batch accuracy since the previous row.
    pub train_acc: f64,
    pub test_acc: f64,
}

pub const HISTORY_HEADER: &str = "step,epoch,lr,loss,train_acc,test_acc";

/// Formats a float with 9 significant digits.
pub fn fmt_sig(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return format!("{v}");
    }
    let exp = v.abs().log10().floor() as i32;
    if (-5..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        let s = format!("{v:.decimals$}");
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s
        }
    } else {
        format!("{v:.8e}")
    }
}

impl HistoryRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step,
            fmt_sig(self.epoch),
            fmt_sig(self.lr),
            fmt_sig(self.loss),
            fmt_sig(self.train_acc),
            fmt_sig(self.test_acc)
        )
    }
}

pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv());
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub loss: f64,
}

/// Eval-mode accuracy and mean loss; the network is not modified.
pub fn evaluate<T: Scalar>(net: &Network<T>, data: &Dataset, batch: usize) -> Result<EvalResult> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut probe = net.clone();
    let (mut hits, mut loss) = (0usize, 0.0);
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let x = data.batch::<T>(chunk);
        let labels = data.batch_labels(chunk);
        let (logits, _) = probe.forward(&x, Phase::Eval)?;
        let (l, _) = softmax_xent(&logits, &labels)?;
        hits += (accuracy(&logits, &labels) * chunk.len() as f64).round() as usize;
        loss += l * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok(EvalResult {
        accuracy: hits as f64 / n,
        loss: loss / n,
    })
}

/// Permutation of `0..n` used in `epoch`.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(SHUFFLE_STREAM + epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

fn mirror_in_place<T: Scalar>(x: &mut Tensor<T>, item: usize) {
    let s = x.shape();
    for c in 0..s.c {
        let plane = x.plane_mut(item, c);
        for row in plane.chunks_mut(s.w) {
            row.reverse();
        }
    }
}

/// Result of one optimiser step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f64,
}

/// Network plus optimiser state.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer<T> {
    pub net: Network<T>,
    pub groups: Vec<ParamGroup>,
    pub cfg: TrainConfig,
    pub opts: TrainOptions,
    /// Number of completed steps.
    pub step: usize,
    /// Learned sigmas raised to the floor so far.
    pub sigma_floored: usize,
    perm_cache: Option<(u64, Vec<usize>)>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, cfg: TrainConfig, opts: TrainOptions) -> Result<Self> {
        cfg.validate()?;
        let groups = net.param_groups(cfg.mu_lr_multiplier);
        Ok(Trainer {
            net,
            groups,
            cfg,
            opts,
            step: 0,
            sigma_floored: 0,
            perm_cache: None,
        })
    }

    /// Resumes from saved optimiser state.
    pub fn resume(net: Network<T>, groups: Vec<ParamGroup>, step: usize, cfg: TrainConfig, opts: TrainOptions) -> Result<Self> {
        cfg.validate()?;
        if groups.len() != net.param_layout().len() {
            return Err(Error::dim("optimiser groups", net.param_layout().len(), groups.len()));
        }
        Ok(Trainer {
            net,
            groups,
            cfg,
            opts,
            step,
            sigma_floored: 0,
            perm_cache: None,
        })
    }

    /// Training items of step `step` (epochs are consecutive permutations).
    pub fn batch_indices(&mut self, n: usize, step: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        (0..b)
            .map(|j| {
                let pos = (step * b + j) as u64;
                let epoch = pos / n as u64;
                if self.perm_cache.as_ref().map(|c| c.0) != Some(epoch) {
                    self.perm_cache = Some((epoch, epoch_permutation(n, self.opts.seed, epoch)));
                }
                self.perm_cache.as_ref().expect("just filled").1[(pos % n as u64) as usize]
            })
            .collect()
    }

    /// Runs one step on the next batch. A non-finite loss aborts before any
    /// parameter changes.
    pub fn train_step(&mut self, data: &Dataset) -> Result<StepStats> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let idx = self.batch_indices(data.len(), self.step);
        let mut x = data.batch::<T>(&idx);
        if self.opts.mirror {
            let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
            rng.set_stream(MIRROR_STREAM + self.step as u64);
            for i in 0..idx.len() {
                if rng.gen_bool(0.5) {
                    mirror_in_place(&mut x, i);
                }
            }
        }
        let labels = data.batch_labels(&idx);
        let before = self.net.clone();
        let (logits, caches) = self.net.forward(&x, Phase::Train)?;
        let (loss, grad) = softmax_xent(&logits, &labels)?;
        if !loss.is_finite() {
            self.net = before;
            return Err(Error::Numerical(format!("loss became {loss} at step {}", self.step)));
        }
        let acc = accuracy(&logits, &labels);
        let (_, grads) = self.net.backward(&caches, grad)?;
        let grad_refs: Vec<&[T]> = grads.iter().map(|g| g.as_slice()).collect();
        let mut params = self.net.params_mut();
        let report = match sgd_step(&mut self.groups, &mut params, &grad_refs, &self.cfg, self.step) {
            Ok(r) => r,
            Err(e) => {
                drop(params);
                self.net = before;
                return Err(e);
            }
        };
        self.sigma_floored += report.sigma_floored;
        let lr = self.cfg.base_lr * lr_schedule(&self.cfg, self.step);
        self.step += 1;
        Ok(StepStats { loss, accuracy: acc, lr })
    }

    /// Trains until `self.step == until`, appending history rows. `on_log`
    /// runs after every row (e.g. to write a checkpoint).
    pub fn run(
        &mut self,
        data: &DataSplit,
        until: usize,
        history: &mut Vec<HistoryRow>,
        mut on_log: impl FnMut(&Trainer<T>, &HistoryRow) -> Result<()>,
    ) -> Result<()> {
        let (mut loss_sum, mut acc_sum, mut count) = (0.0, 0.0, 0usize);
        while self.step < until {
            let s = self.train_step(&data.train)?;
            loss_sum += s.loss;
            acc_sum += s.accuracy;
            count += 1;
            if self.step % self.opts.log_every.max(1) == 0 || self.step == until {
                let test_acc = if data.test.is_empty() {
                    f64::NAN
                } else {
                    evaluate(&self.net, &data.test, self.opts.eval_batch)?.accuracy
                };
                let row = HistoryRow {
                    step: self.step,
                    epoch: (self.step * self.cfg.batch_size) as f64 / data.train.len() as f64,
                    lr: s.lr,
                    loss: loss_sum / count as f64,
                    train_acc: acc_sum / count as f64,
                    test_acc,
                };
                on_log(self, &row)?;
                history.push(row);
                (loss_sum, acc_sum, count) = (0.0, 0.0, 0);
            }
        }
        Ok(())
    }
}
