//! Training loop, evaluation and checkpoint cadence.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::dataset::PairedSample;
use crate::error::{config_err, Error, Result};
use crate::graph::{Graph, Mode};
use crate::losses::Objective;
use crate::metrics::{self, ImageMetrics, MetricReport};
use crate::model::{ModelConfig, Network};
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParameterSet;
use crate::schedule::{lr_at, ScheduleConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Save a checkpoint (and evaluate for best-PSNR) every this many epochs.
    pub checkpoint_every: usize,
    pub weight_decay: f64,
    pub bn_momentum: f64,
    /// Random horizontal flips.
    pub flip: bool,
    /// Stop after this many optimizer steps, regardless of the schedule.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    /// Set from the run-level seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            checkpoint_every: 50,
            weight_decay: AdamWConfig::default().weight_decay,
            bn_momentum: 0.1,
            flip: false,
            max_steps: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be positive"));
        }
        if self.checkpoint_every == 0 {
            return Err(config_err!("train.checkpoint_every must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err!("train.weight_decay must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(config_err!("train.bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { weight_decay: self.weight_decay, ..AdamWConfig::default() }
    }
}

/// One optimizer step, formatted as a loss-log line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

impl fmt::Display for StepRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step={} epoch={} lr={:e} loss={}", self.step, self.epoch, self.lr, self.loss)
    }
}

/// Model, parameters and optimizer state being trained.
#[derive(Debug, Clone)]
pub struct Session {
    pub net: Network,
    pub params: ParameterSet<f32>,
    pub optimizer: AdamW<f32>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub seed: u64,
}

impl Session {
    pub fn new(model: ModelConfig, tc: &TrainConfig) -> Result<Self> {
        tc.validate()?;
        let (net, params) = Network::init::<f32>(model, tc.seed)?;
        let optimizer = AdamW::new(tc.adamw(), &params);
        Ok(Session { net, params, optimizer, epoch: 0, step: 0, seed: tc.seed })
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let (net, _) = Network::build::<f32>(ck.model)?;
        Ok(Session {
            net,
            params: ck.params,
            step: ck.optimizer.t as usize,
            optimizer: ck.optimizer,
            epoch: ck.epoch as usize,
            seed: ck.seed,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.net.cfg,
            params: self.params.clone(),
            optimizer: self.optimizer.clone(),
            epoch: self.epoch as u64,
            seed: self.seed,
        }
    }

    /// Loss of one batch under the current parameters, in training mode,
    /// without updating anything.
    pub fn loss(&self, low: &Tensor<f32>, high: &Tensor<f32>, objective: &Objective<f32>) -> Result<f64> {
        let mut tape = Tape::new(&self.params, Mode::Train);
        let x = tape.constant(low.clone());
        let gt = tape.constant(high.clone());
        let out = self.net.forward(&mut tape, &x)?;
        let l = objective.graph(&mut tape, &out, &gt, &x)?;
        Ok(tape.value(&l).data()[0] as f64)
    }

    /// Forward, backward, running-statistics update and one AdamW step.
    /// Returns the loss before the update. A non-finite loss leaves the
    /// session untouched.
    pub fn train_step(
        &mut self,
        low: &Tensor<f32>,
        high: &Tensor<f32>,
        objective: &Objective<f32>,
        lr: f64,
        bn_momentum: f64,
    ) -> Result<f64> {
        let (loss, grads, stats) = {
            let mut tape = Tape::new(&self.params, Mode::Train);
            let x = tape.constant(low.clone());
            let gt = tape.constant(high.clone());
            let out = self.net.forward(&mut tape, &x)?;
            let l = objective.graph(&mut tape, &out, &gt, &x)?;
            let loss = tape.value(&l).data()[0] as f64;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.step + 1, last_good: None });
            }
            let grads = tape.backward(l)?.params(self.params.len());
            (loss, grads, tape.observed_stats().to_vec())
        };
        for s in &stats {
            self.params.update_running(s.id, &s.mean, &s.var, bn_momentum);
        }
        self.optimizer.step(&mut self.params, &grads, lr)?;
        self.step += 1;
        Ok(loss)
    }

    /// Inference on one padded sample, cropped back to its valid region.
    pub fn enhance_sample(&self, s: &PairedSample) -> Result<Tensor<f32>> {
        s.crop_valid(&self.net.enhance(&self.params, s.low.tensor())?)
    }

    pub fn evaluate(&self, samples: &[PairedSample]) -> Result<MetricReport> {
        evaluate_with(samples, |s| self.enhance_sample(s))
    }
}

/// Scores `f(sample)` against each sample's ground truth over the unpadded
/// region. Work is spread over the available cores; the report keeps the
/// sample order.
pub fn evaluate_with<F>(samples: &[PairedSample], f: F) -> Result<MetricReport>
where
    F: Fn(&PairedSample) -> Result<Tensor<f32>> + Sync,
{
    if samples.is_empty() {
        return Err(Error::Dataset("the test split is empty".into()));
    }
    let score = |s: &PairedSample| -> Result<ImageMetrics> {
        let out = f(s)?;
        let gt = s.crop_valid(s.high.tensor())?;
        Ok(ImageMetrics { id: s.id.clone(), psnr_db: metrics::psnr(&out, &gt)?, ssim: metrics::ssim(&out, &gt)? })
    };
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len());
    let per = if workers <= 1 {
        samples.iter().map(score).collect::<Result<Vec<_>>>()?
    } else {
        let chunk = samples.len().div_ceil(workers);
        std::thread::scope(|sc| {
            let handles: Vec<_> = samples
                .chunks(chunk)
                .map(|c| sc.spawn(|| c.iter().map(score).collect::<Result<Vec<_>>>()))
                .collect();
            let mut all = Vec::with_capacity(samples.len());
            for h in handles {
                all.extend(h.join().expect("evaluation worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    MetricReport::from_images(per)
}

/// Horizontal mirror of every sample in a batch.
pub fn flip_horizontal(t: &Tensor<f32>) -> Tensor<f32> {
    let w = t.shape().w;
    Tensor::from_fn(t.shape(), |n, c, y, x| t.at(n, c, y, w - 1 - x))
}

/// Sample order for one epoch, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = epoch_rng(seed, epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    rng
}

/// Where checkpoints go and what has been written so far.
#[derive(Debug, Clone, Default)]
pub struct CheckpointLog {
    pub last_good: Option<PathBuf>,
    pub best: Option<(PathBuf, f64)>,
    pub written: Vec<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub session: Session,
    pub losses: Vec<f64>,
    pub checkpoints: CheckpointLog,
    /// Test-split report at the end of training, if there is a test split.
    pub report: Option<MetricReport>,
}

/// Runs the schedule from `session.epoch` to its end (or `max_steps`),
/// calling `on_step` after every optimizer step. With an output directory,
/// checkpoints `epoch-NNNN.ckpt` every `checkpoint_every` epochs, keeps
/// `best.ckpt` for the best test PSNR seen at those points, and writes
/// `last.ckpt` at the end.
pub fn train(
    mut session: Session,
    train_set: &[PairedSample],
    test_set: &[PairedSample],
    schedule: &ScheduleConfig,
    objective: &Objective<f32>,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    tc.validate()?;
    schedule.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("the training split is empty".into()));
    }
    let mut ck = CheckpointLog::default();
    let mut losses = Vec::new();
    let save = |session: &Session, name: &str, ck: &mut CheckpointLog| -> Result<PathBuf> {
        let dir = out_dir.expect("only called with an output directory");
        let path = dir.join(name);
        session.checkpoint().save(&path)?;
        ck.written.push(path.clone());
        Ok(path)
    };
    'outer: while session.epoch < schedule.total_epochs {
        let epoch = session.epoch;
        let lr = lr_at(epoch, schedule)?;
        let mut rng = epoch_rng(session.seed, epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        for batch in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|m| session.step >= m) {
                break 'outer;
            }
            let lows: Vec<&Tensor<f32>> = batch.iter().map(|&i| train_set[i].low.tensor()).collect();
            let highs: Vec<&Tensor<f32>> = batch.iter().map(|&i| train_set[i].high.tensor()).collect();
            let (mut low, mut high) = (Tensor::stack(&lows)?, Tensor::stack(&highs)?);
            if tc.flip && rng.random_bool(0.5) {
                low = flip_horizontal(&low);
                high = flip_horizontal(&high);
            }
            let loss = match session.train_step(&low, &high, objective, lr, tc.bn_momentum) {
                Err(Error::NonFiniteLoss { step, .. }) => {
                    return Err(Error::NonFiniteLoss { step, last_good: ck.last_good });
                }
                r => r?,
            };
            losses.push(loss);
            on_step(&StepRecord { step: session.step, epoch, lr, loss });
        }
        session.epoch += 1;
        if out_dir.is_some() && session.epoch % tc.checkpoint_every == 0 {
            let path = save(&session, &format!("epoch-{:04}.ckpt", session.epoch), &mut ck)?;
            ck.last_good = Some(path);
            if !test_set.is_empty() {
                let psnr = session.evaluate(test_set)?.psnr_db;
                if ck.best.as_ref().is_none_or(|(_, b)| psnr > *b) {
                    ck.best = Some((save(&session, "best.ckpt", &mut ck)?, psnr));
                }
            }
        }
    }
    if out_dir.is_some() {
        ck.last_good = Some(save(&session, "last.ckpt", &mut ck)?);
    }
    let report = match test_set.is_empty() {
        true => None,
        false => Some(session.evaluate(test_set)?),
    };
    Ok(TrainOutcome { session, losses, checkpoints: ck, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::LossMode;
    use crate::tensor::Shape;

    fn tiny() -> ModelConfig {
        ModelConfig { base_width: 4, bottleneck_width: 8, se_reduction: 2, denoiser_depth: 1, ..Default::default() }
    }

    fn pair(id: &str, v: f32) -> PairedSample {
        let s = Shape::new(1, 3, 16, 16);
        let low = Tensor::from_fn(s, |_, c, y, x| v * (1 + c + (x + y) % 5) as f32 / 8.0);
        let high = low.map(|a| (a * 3.0).min(1.0));
        PairedSample::new(id, low, high).unwrap()
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(7, 3, 20);
        assert_eq!(a, epoch_order(7, 3, 20));
        assert_ne!(a, epoch_order(7, 4, 20));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn step_log_format() {
        let r = StepRecord { step: 3, epoch: 1, lr: 2e-5, loss: 0.25 };
        assert_eq!(r.to_string(), "step=3 epoch=1 lr=2e-5 loss=0.25");
    }

    #[test]
    fn non_finite_loss_aborts_with_checkpoint_reference() {
        let dir = tempfile::tempdir().unwrap();
        let tc = TrainConfig { batch_size: 1, checkpoint_every: 1, ..Default::default() };
        let session = Session::new(tiny(), &tc).unwrap();
        let train_set = [pair("a", 0.2)];
        let sched = ScheduleConfig { warmup_epochs: 1, hold_until: 1, total_epochs: 4, ..Default::default() };
        let obj = Objective::with_surrogate(LossMode::CharbonnierOnly, 0);
        let out = train(session.clone(), &train_set, &[], &sched, &obj, &tc, Some(dir.path()), |_| {}).unwrap();
        assert_eq!(out.losses.len(), 4);
        assert!(dir.path().join("epoch-0002.ckpt").exists());

        // An absurd learning rate blows the weights up after one step.
        let wild = ScheduleConfig { lr_min: 1e29, lr_max: 1e30, ..sched };
        let dir2 = tempfile::tempdir().unwrap();
        let err = train(session, &train_set, &[], &wild, &obj, &tc, Some(dir2.path()), |_| {}).unwrap_err();
        match err {
            Error::NonFiniteLoss { step, last_good: Some(p) } => {
                assert!(step >= 2);
                assert!(p.exists() && p.starts_with(dir2.path()));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn max_steps_and_resume() {
        let tc = TrainConfig { batch_size: 2, max_steps: Some(3), ..Default::default() };
        let sched = ScheduleConfig { warmup_epochs: 1, hold_until: 2, total_epochs: 10, ..Default::default() };
        let obj = Objective::with_surrogate(LossMode::CharbonnierOnly, 0);
        let data = [pair("a", 0.2), pair("b", 0.3), pair("c", 0.1)];
        let s = Session::new(tiny(), &tc).unwrap();
        let out = train(s, &data, &data[..1], &sched, &obj, &tc, None, |_| {}).unwrap();
        assert_eq!(out.losses.len(), 3);
        assert_eq!(out.session.step, 3);
        assert_eq!(out.report.unwrap().per_image.len(), 1);
        let resumed = Session::from_checkpoint(out.session.checkpoint()).unwrap();
        assert_eq!(resumed.step, 3);
        assert_eq!(resumed.params.values(), out.session.params.values());
    }
}
