use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{cmml_loss_and_grads, LossMode, ModelBundle};
use crate::data::{sample_episode, Episode, EpisodeParams, Task};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::params::ParamGrads;
use crate::rng::{mix64, rng_stream, Rng};

const ORDER_STREAM: u64 = 0x0de7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub loss: LossMode,
    pub seed: u64,
    /// Reshuffle each task's support order every time it is drawn.
    pub shuffle_support: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            lr: crate::optim::DEFAULT_LR,
            loss: LossMode::Hinge,
            seed: 0,
            shuffle_support: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "batch_size and epochs must be positive".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(alloc::format!(
                "learning rate must be nonnegative, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// How episodes are drawn from tasks.
#[derive(Debug, Clone, Copy)]
pub enum EpisodeSource<'a> {
    /// The task's own support and query.
    Task,
    /// Positives resampled with matched negatives from `negative_pool`.
    Sampled {
        params: EpisodeParams,
        negative_pool: &'a [usize],
    },
}

/// Stream for anything drawn for `task_id` in `epoch`.
pub fn episode_rng(seed: u64, epoch: u64, task_id: u64) -> Rng {
    rng_stream(mix64(seed ^ mix64(epoch.wrapping_add(1))), task_id)
}

pub fn draw_episode(
    task: &Task,
    source: EpisodeSource<'_>,
    shuffle: bool,
    rng: &mut Rng,
) -> Result<Episode> {
    match source {
        EpisodeSource::Task if shuffle => Ok(Episode::from_task(task, rng)),
        EpisodeSource::Task => Ok(Episode::fixed(task)),
        EpisodeSource::Sampled {
            params,
            negative_pool,
        } => sample_episode(task, &params, negative_pool, rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    pub tasks: usize,
    pub batches: usize,
    /// Episodes whose positives had to be drawn with replacement.
    pub flagged: usize,
}

/// Batch objective `sum_T l_T / |batch|` and its gradient. Per-task
/// gradients are reduced in ascending task-id order.
pub fn meta_batch(
    bundle: &ModelBundle,
    episodes: &[Episode],
    mode: LossMode,
) -> Result<(f64, ParamGrads)> {
    if episodes.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.sort_by_key(|&k| episodes[k].task_id);
    let mut total = ParamGrads::zeros_like(&bundle.params);
    let mut loss = 0.0;
    for k in order {
        let (l, g) = cmml_loss_and_grads(bundle, &episodes[k], mode)?;
        loss += l;
        total.accumulate(&g);
    }
    let scale = 1.0 / episodes.len() as f64;
    total.scale(scale);
    Ok((loss * scale, total))
}

/// One pass over `tasks` in a seeded order, one Adam step on Φ and Θ_M per
/// batch.
pub fn train_epoch(
    bundle: &mut ModelBundle,
    adam: &mut AdamState,
    tasks: &[Task],
    cfg: &TrainConfig,
    source: EpisodeSource<'_>,
    epoch: usize,
) -> Result<EpochStats> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("tasks"));
    }
    adam.config.lr = cfg.lr;
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut rng_stream(
        mix64(cfg.seed ^ mix64(epoch as u64 + 1)),
        ORDER_STREAM,
    ));
    let mut loss_sum = 0.0;
    let mut batches = 0;
    let mut flagged = 0;
    for chunk in order.chunks(cfg.batch_size) {
        let episodes = chunk
            .iter()
            .map(|&k| {
                let task = &tasks[k];
                draw_episode(
                    task,
                    source,
                    cfg.shuffle_support,
                    &mut episode_rng(cfg.seed, epoch as u64, task.task_id),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        flagged += episodes.iter().filter(|e| e.flagged).count();
        let (loss, grads) = meta_batch(bundle, &episodes, cfg.loss)?;
        if !grads.is_finite() {
            return Err(Error::NonFinite(alloc::format!("epoch {epoch}: gradient")));
        }
        adam_step(&mut bundle.params, &grads, adam)?;
        loss_sum += loss * episodes.len() as f64;
        batches += 1;
    }
    Ok(EpochStats {
        epoch,
        mean_loss: loss_sum / tasks.len() as f64,
        tasks: tasks.len(),
        batches,
        flagged,
    })
}
