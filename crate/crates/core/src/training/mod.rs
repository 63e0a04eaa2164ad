//! Loss, optimiser, augmentation and the staged training schedules.

mod augment;
mod layerwise;
mod loss;
mod optim;

pub use augment::{augment, crop_sample};
pub use layerwise::{layerwise_pretrain, stage_specs};
pub use loss::{cross_entropy_loss, pool_labels, EPS};
pub use optim::{sgd_step, sgd_step_slots, ParamSlot, SgdState};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::Network;
use crate::tensor::{ConvGrads, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Iterations per pre-training or fusion stage.
    pub iterations: usize,
    /// Iterations of the final all-layers pass.
    pub finetune_iterations: usize,
    pub seed: u64,
    pub crop_size: usize,
    pub crops_per_frame: usize,
    pub flip_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 2,
            iterations: 200,
            finetune_iterations: 200,
            seed: 0,
            crop_size: 64,
            crops_per_frame: 4,
            flip_probability: 0.5,
        }
    }
}

impl TrainConfig {
    /// Full-scale augmentation: ten 256×256 crops per frame.
    pub fn full_scale() -> Self {
        TrainConfig { crop_size: 256, crops_per_frame: 10, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            return Err(Error::invalid(format!("crop size {} must be a positive multiple of 4", self.crop_size)));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::invalid("flip probability must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// One training example: input channels and the mask pooled onto the output grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub label: Tensor,
}

impl Sample {
    /// Keep only input channels `start..end`.
    pub fn select_channels(&self, start: usize, end: usize) -> Result<Sample> {
        Ok(Sample { input: self.input.slice_channels(start, end)?, label: self.label.clone() })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iter: usize,
    pub stage: String,
    pub loss: f64,
}

/// Per-iteration training losses, written as `iter,stage,loss` CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
}

impl TrainLog {
    pub fn push(&mut self, stage: &str, loss: f64) {
        let iter = self.entries.len();
        self.entries.push(LogEntry { iter, stage: stage.to_string(), loss });
    }

    pub fn extend(&mut self, other: TrainLog) {
        for e in other.entries {
            self.push(&e.stage, e.loss);
        }
    }

    pub fn losses(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.loss).collect()
    }

    pub fn stage_losses(&self, stage: &str) -> Vec<f64> {
        self.entries.iter().filter(|e| e.stage == stage).map(|e| e.loss).collect()
    }

    /// Distinct stage labels in first-seen order.
    pub fn stages(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.stage) {
                out.push(e.stage.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,stage,loss\n");
        for e in &self.entries {
            s.push_str(&format!("{},{},{:.9}\n", e.iter, e.stage, e.loss));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Anything trainable by the shared SGD loop.
pub trait Model: Sync {
    /// Loss on one sample and per-slot parameter gradients (`None` for frozen slots).
    fn sample_loss_grads(&self, sample: &Sample) -> Result<(f64, Vec<Option<ConvGrads>>)>;

    fn param_slots(&mut self) -> Vec<ParamSlot<'_>>;
}

impl Model for Network {
    fn sample_loss_grads(&self, sample: &Sample) -> Result<(f64, Vec<Option<ConvGrads>>)> {
        let (out, acts) = self.forward(&sample.input, true)?;
        let (loss, grad) = cross_entropy_loss(&out, &sample.label)?;
        let grads = self.backward(acts.as_ref(), &grad)?;
        Ok((loss, self.slot_grads(&grads)))
    }

    fn param_slots(&mut self) -> Vec<ParamSlot<'_>> {
        Network::param_slots(self)
    }
}

/// Cycles through shuffled epochs of sample indices.
pub(crate) struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub(crate) fn new(len: usize, seed: u64) -> Self {
        let mut s = BatchSampler { order: (0..len).collect(), pos: len, rng: ChaCha8Rng::seed_from_u64(seed) };
        s.reshuffle();
        s
    }

    fn reshuffle(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub(crate) fn next_batch(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Mean loss and gradient over a batch. Per-sample work may run in parallel;
/// the reduction is sequential in batch order, so results are schedule-independent.
pub fn batch_loss_grads<M: Model>(model: &M, batch: &[&Sample]) -> Result<(f64, Vec<Option<ConvGrads>>)> {
    let per_sample: Vec<_> = batch.par_iter().map(|s| model.sample_loss_grads(s)).collect();
    let mut total = 0.0;
    let mut acc: Vec<Option<ConvGrads>> = Vec::new();
    for r in per_sample {
        let (loss, grads) = r?;
        total += loss;
        if acc.is_empty() {
            acc = grads;
            continue;
        }
        for (a, g) in acc.iter_mut().zip(grads) {
            match (a.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(&g),
                (None, Some(g)) => *a = Some(g),
                _ => {}
            }
        }
    }
    let scale = 1.0 / batch.len() as f64;
    acc.iter_mut().flatten().for_each(|g| g.scale(scale));
    Ok((total * scale, acc))
}

/// Run `iterations` SGD steps, appending one log line per step under `stage`.
pub fn train_model<M: Model>(
    model: &mut M,
    data: &[Sample],
    config: &TrainConfig,
    iterations: usize,
    stage: &str,
    seed: u64,
    log: &mut TrainLog,
) -> Result<()> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let mut sampler = BatchSampler::new(data.len(), seed);
    let mut state = SgdState::new();
    for _ in 0..iterations {
        let batch: Vec<&Sample> = sampler.next_batch(config.batch_size).into_iter().map(|i| &data[i]).collect();
        let (loss, grads) = batch_loss_grads(model, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Training(format!("loss diverged at stage {stage}")));
        }
        log.push(stage, loss);
        sgd_step_slots(model.param_slots(), &grads, &mut state, config);
    }
    Ok(())
}

/// Train `net` with the layers in `frozen_layers` held fixed.
pub fn train_branch(net: &mut Network, data: &[Sample], config: &TrainConfig, frozen_layers: &[usize]) -> Result<TrainLog> {
    for &i in frozen_layers {
        if i >= net.layers().len() {
            return Err(Error::invalid(format!("frozen layer {i} out of range")));
        }
        net.set_frozen(i, true);
    }
    let mut log = TrainLog::default();
    train_model(net, data, config, config.iterations, "branch", config.seed, &mut log)?;
    Ok(log)
}

/// Mean loss over a dataset without updating anything.
pub fn mean_loss(net: &Network, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Training("no samples".into()));
    }
    let losses: Vec<Result<f64>> = data
        .par_iter()
        .map(|s| {
            let out = net.predict(&s.input)?;
            Ok(cross_entropy_loss(&out, &s.label)?.0)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / data.len() as f64)
}
