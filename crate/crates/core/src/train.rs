//! Mini-batch training with deep supervision, and evaluation.

use std::f64::consts::PI;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{ClassWeights, Objective};
use crate::mask::Mask;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::net::{Network, SegOutput};
use crate::optim::AdamW;
use crate::parallel;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Downsampling factors of the auxiliary outputs, in output order.
pub const AUX_SCALES: [usize; 3] = [4, 8, 16];
pub const OIL_CLASS: usize = 1;
pub const LOG_HEADER: &str = "epoch,loss,miou,oa,oil_iou,oil_fp";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    /// Inverse class frequency of the training masks, mean 1 over present classes.
    InverseFrequency,
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Hybrid,
    CrossEntropy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub gamma: f64,
    pub alpha: AlphaMode,
    pub loss: LossKind,
    /// Cosine decay of the learning rate to zero over the run.
    pub cosine: bool,
    /// Linear ramp from zero over this many initial steps.
    pub warmup: usize,
    /// Share of samples held out for evaluation.
    pub holdout: f64,
    /// Evaluate every this many epochs (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            weight_decay: 1e-4,
            batch_size: 4,
            epochs: 100,
            gamma: 2.0,
            alpha: AlphaMode::InverseFrequency,
            loss: LossKind::Hybrid,
            cosine: false,
            warmup: 0,
            holdout: 0.2,
            eval_every: 1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::contract(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::contract(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::contract("batch_size and eval_every must be >= 1"));
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) || !(0.0..1.0).contains(&self.holdout) {
            return Err(Error::contract(format!(
                "need gamma >= 0 and holdout in [0, 1), got {} and {}",
                self.gamma, self.holdout
            )));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("gamma", self.gamma.to_string()),
            (
                "alpha",
                match self.alpha {
                    AlphaMode::InverseFrequency => "inverse",
                    AlphaMode::Uniform => "uniform",
                }
                .into(),
            ),
            (
                "loss",
                match self.loss {
                    LossKind::Hybrid => "hybrid",
                    LossKind::CrossEntropy => "ce",
                }
                .into(),
            ),
            ("cosine", self.cosine.to_string()),
            ("warmup", self.warmup.to_string()),
            ("holdout", self.holdout.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("train_seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from text; `Ok(false)` for keys it does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        use crate::kv::{parse, parse_bool};
        match key {
            "lr" => self.lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "alpha" => {
                self.alpha = match value {
                    "inverse" => AlphaMode::InverseFrequency,
                    "uniform" => AlphaMode::Uniform,
                    _ => {
                        return Err(Error::Format(format!(
                            "alpha must be inverse or uniform, got `{value}`"
                        )))
                    }
                }
            }
            "loss" => {
                self.loss = match value {
                    "hybrid" => LossKind::Hybrid,
                    "ce" => LossKind::CrossEntropy,
                    _ => {
                        return Err(Error::Format(format!(
                            "loss must be hybrid or ce, got `{value}`"
                        )))
                    }
                }
            }
            "cosine" => self.cosine = parse_bool(key, value)?,
            "warmup" => self.warmup = parse(key, value)?,
            "holdout" => self.holdout = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "train_seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn objective(&self, train: &[Sample], classes: usize) -> Result<Objective> {
        Ok(match self.loss {
            LossKind::CrossEntropy => Objective::CrossEntropy,
            LossKind::Hybrid => Objective::Hybrid {
                alpha: match self.alpha {
                    AlphaMode::Uniform => ClassWeights::uniform(classes),
                    AlphaMode::InverseFrequency => {
                        ClassWeights::inverse_frequency(train.iter().map(|s| &s.mask), classes)?
                    }
                },
                gamma: self.gamma,
            },
        })
    }
}

/// Main loss plus one unit-weight term per auxiliary output, each against
/// the nearest-neighbour downsampled target.
pub fn supervised_loss<'t>(
    out: &crate::net::SegVars<'t>,
    mask: &Mask,
    objective: &Objective,
) -> Result<Var<'t>> {
    let mut total = objective.apply(out.logits.softmax(0)?, mask)?;
    for (aux, &scale) in out.aux.iter().zip(&AUX_SCALES) {
        let target = mask.downsample_nearest(scale)?;
        total = total.add(objective.apply(aux.softmax(0)?, &target)?)?;
    }
    Ok(total)
}

/// Loss and parameter gradients of one sample.
pub fn sample_gradients(
    net: &Network,
    sample: &Sample,
    objective: &Objective,
) -> Result<(f64, Vec<Tensor>)> {
    let tape = Tape::new();
    let p = net.params().bind(&tape);
    let out = net.forward(&p, tape.constant(sample.image.clone()))?;
    let loss = supervised_loss(&out, &sample.mask, objective)?;
    let value = loss.value().item();
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    loss.backward()?;
    Ok((value, p.grads(net.params())))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub metrics: Option<MetricsReport>,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        match &self.metrics {
            Some(m) => format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
                self.epoch,
                self.loss,
                m.miou,
                m.oa,
                m.iou(OIL_CLASS),
                m.per_class.get(OIL_CLASS).map_or(0.0, |c| c.fp_rate)
            ),
            None => format!("{},{:.6},,,,", self.epoch, self.loss),
        }
    }
}

/// Optimizer state and schedule around a network.
pub struct Trainer {
    pub net: Network,
    pub opt: AdamW,
    pub config: TrainConfig,
    pub objective: Objective,
    /// Optimizer steps taken.
    pub step: u64,
    /// Total steps of the run, for the cosine schedule.
    pub total_steps: u64,
}

impl Trainer {
    pub fn new(net: Network, config: TrainConfig, train: &[Sample]) -> Result<Self> {
        config.validate()?;
        let objective = config.objective(train, net.config().classes)?;
        let opt = AdamW::for_store(net.params());
        let per_epoch = train.len().div_ceil(config.batch_size) as u64;
        Ok(Trainer {
            total_steps: per_epoch * config.epochs as u64,
            net,
            opt,
            config,
            objective,
            step: 0,
        })
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        let (step, warm) = (self.step as f64, self.config.warmup as f64);
        if step < warm {
            return self.config.lr * (step + 1.0) / (warm + 1.0);
        }
        if self.config.cosine && self.total_steps as f64 > warm {
            let t = ((step - warm) / (self.total_steps as f64 - warm)).min(1.0);
            0.5 * self.config.lr * (1.0 + (PI * t).cos())
        } else {
            self.config.lr
        }
    }

    /// One AdamW step on the batch-mean gradient. On a non-finite loss the
    /// parameters are left untouched and an error is returned.
    pub fn train_step(&mut self, batch: &[&Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let results =
            parallel::map_collect(batch, |s| sample_gradients(&self.net, s, &self.objective));
        let mut loss = 0.0;
        let mut sum: Option<Vec<Tensor>> = None;
        for r in results {
            let (l, g) = r?;
            if !l.is_finite() {
                return Err(Error::Diverged {
                    step: self.step + 1,
                });
            }
            loss += l;
            match &mut sum {
                None => sum = Some(g),
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| a.add_assign(b)),
            }
        }
        let n = batch.len() as f64;
        let grads: Vec<Tensor> = sum
            .expect("non-empty batch")
            .iter()
            .map(|g| g.scale(1.0 / n))
            .collect();
        let lr = self.lr();
        let wd = self.config.weight_decay;
        self.opt.step_store(self.net.params_mut(), &grads, lr, wd)?;
        self.step += 1;
        Ok(loss / n)
    }

    /// One pass over `train` in a seeded shuffled order; returns the mean
    /// batch loss.
    pub fn train_epoch(&mut self, train: &[Sample], epoch: usize) -> Result<f64> {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let seed = self.config.seed ^ (epoch as u64).wrapping_mul(0x2545_f491_4f6c_dd1d);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            total += self.train_step(&batch)?;
            batches += 1;
        }
        Ok(if batches == 0 {
            0.0
        } else {
            total / batches as f64
        })
    }

    /// Runs all epochs. Metrics come from `eval` (the training set when
    /// `eval` is empty); `on_epoch` sees the trainer after every epoch.
    pub fn fit(
        &mut self,
        train: &[Sample],
        eval: &[Sample],
        mut on_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<Vec<EpochLog>> {
        if train.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let eval = if eval.is_empty() { train } else { eval };
        let mut logs = Vec::with_capacity(self.config.epochs);
        for epoch in 1..=self.config.epochs {
            let loss = self.train_epoch(train, epoch)?;
            let metrics = if epoch % self.config.eval_every == 0 || epoch == self.config.epochs {
                Some(evaluate(&self.net, eval)?.0)
            } else {
                None
            };
            let log = EpochLog {
                epoch,
                loss,
                metrics,
            };
            log::debug!("{}", log.csv_row());
            on_epoch(self, &log)?;
            logs.push(log);
        }
        Ok(logs)
    }
}

pub fn write_log(out: &mut impl Write, logs: &[EpochLog]) -> std::io::Result<()> {
    writeln!(out, "{LOG_HEADER}")?;
    for l in logs {
        writeln!(out, "{}", l.csv_row())?;
    }
    Ok(())
}

/// Argmax predictions for every sample and the pooled metrics.
pub fn evaluate(net: &Network, samples: &[Sample]) -> Result<(MetricsReport, Vec<Mask>)> {
    let k = net.config().classes;
    let preds: Vec<Mask> = parallel::map_collect(samples, |s| {
        net.predict(&s.image).map(|o: SegOutput| o.argmax())
    })
    .into_iter()
    .collect::<Result<_>>()?;
    let mut cm = ConfusionMatrix::new(k);
    for (p, s) in preds.iter().zip(samples) {
        cm.add(p, &s.mask)?;
    }
    Ok((cm.report(), preds))
}
