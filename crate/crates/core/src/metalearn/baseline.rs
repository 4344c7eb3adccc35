//! Gradient-based adaptation baseline: a plain backbone whose fully
//! connected layers take `k` full-batch gradient steps on the support set.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::train::{draw_episode, episode_rng, EpisodeSource, EpochStats, TrainConfig};
use super::{adopt, loss_from_scores, set_tables, LossMode};
use crate::backbone::{Backbone, BackboneConfig};
use crate::data::{Example, Task};
use crate::error::{Error, Result};
use crate::optim::{adam_step, AdamState};
use crate::params::{Graph, ParamGrads, ParamId, ParamSet};
use crate::rng::{mix64, rng_stream};
use crate::tensor::Tensor;

const INIT_STREAM: u64 = 0xba5e;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptScope {
    HeadOnly,
    HiddenAndHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub inner_steps: usize,
    pub inner_lr: f64,
    pub scope: AdaptScope,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            inner_steps: 5,
            inner_lr: 0.01,
            scope: AdaptScope::HiddenAndHead,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BaselineBundle {
    pub config: BackboneConfig,
    pub params: ParamSet,
    pub backbone: Backbone,
}

impl BaselineBundle {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let backbone = Backbone::new(
            &mut params,
            &config,
            true,
            true,
            &mut rng_stream(seed, INIT_STREAM),
        )?;
        Ok(Self {
            config,
            params,
            backbone,
        })
    }

    pub fn with_params(config: BackboneConfig, params: ParamSet) -> Result<Self> {
        let mut bundle = Self::new(config, 0)?;
        adopt(&mut bundle.params, params)?;
        Ok(bundle)
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    pub fn set_embeddings(&mut self, user: Option<&Tensor>, item: &Tensor) -> Result<()> {
        set_tables(&mut self.params, &self.backbone, user, item)
    }

    fn scope_ids(&self, scope: AdaptScope) -> Vec<ParamId> {
        let head = self
            .backbone
            .head
            .as_ref()
            .expect("baseline backbone has a head");
        let mut ids = vec![head.weight, head.bias];
        if scope == AdaptScope::HiddenAndHead {
            ids.extend(self.backbone.hidden.iter().flat_map(|l| [l.weight, l.bias]));
        }
        ids
    }
}

fn support_loss(
    bundle: &BaselineBundle,
    params: &ParamSet,
    mask: Option<&[bool]>,
    examples: &[Example],
    mode: LossMode,
) -> Result<(f64, Option<ParamGrads>)> {
    let mut g = match mask {
        Some(m) => Graph::with_mask(params, m.to_vec()),
        None => Graph::inference(params),
    };
    let scores = bundle.backbone.score(&mut g, examples)?;
    let loss = loss_from_scores(&mut g, scores, examples, mode)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite(alloc::format!("inner loss {value}")));
    }
    let grads = match mask {
        Some(_) => Some(g.backward(loss)?),
        None => None,
    };
    Ok((value, grads))
}

/// Result of adapting a copy of the baseline's parameters to one task.
#[derive(Debug, Clone)]
pub struct Adaptation {
    pub params: ParamSet,
    /// L2 norm of the change to the adapted scope.
    pub delta_norm: f64,
    /// Support loss before each step, then after the last.
    pub support_losses: Vec<f64>,
}

/// Runs `inner_steps` full-batch gradient steps on a copy of the scoped
/// parameters; `bundle` is not modified.
pub fn baseline_adapt(
    bundle: &BaselineBundle,
    support: &[Example],
    cfg: &BaselineConfig,
    mode: LossMode,
) -> Result<Adaptation> {
    if cfg.inner_steps == 0 {
        return Err(Error::Config(
            "baseline needs at least one inner step".into(),
        ));
    }
    if support.is_empty() {
        return Err(Error::Empty("support"));
    }
    let scope = bundle.scope_ids(cfg.scope);
    let mut mask = vec![false; bundle.params.len()];
    for id in &scope {
        mask[id.index()] = true;
    }
    let mut adapted = bundle.params.clone();
    let mut losses = Vec::with_capacity(cfg.inner_steps + 1);
    for _ in 0..cfg.inner_steps {
        let (loss, grads) = support_loss(bundle, &adapted, Some(&mask), support, mode)?;
        losses.push(loss);
        let grads = grads.expect("masked graph yields gradients");
        for &id in &scope {
            if let Some(g) = grads.get(id) {
                let p = adapted.get_mut(id);
                p.values_mut()
                    .iter_mut()
                    .zip(g.values())
                    .for_each(|(w, d)| *w -= cfg.inner_lr * d);
            }
        }
    }
    losses.push(support_loss(bundle, &adapted, None, support, mode)?.0);
    let delta_norm = libm::sqrt(
        scope
            .iter()
            .map(|&id| {
                adapted
                    .get(id)
                    .values()
                    .iter()
                    .zip(bundle.params.get(id).values())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum(),
    );
    Ok(Adaptation {
        params: adapted,
        delta_norm,
        support_losses: losses,
    })
}

/// Adapts to `support`, then scores `query` with the adapted parameters.
/// Returns the scores and the norm of the parameter change.
pub fn baseline_adapt_and_score(
    bundle: &BaselineBundle,
    support: &[Example],
    query: &[Example],
    cfg: &BaselineConfig,
    mode: LossMode,
) -> Result<(Vec<f64>, f64)> {
    let adaptation = baseline_adapt(bundle, support, cfg, mode)?;
    let mut g = Graph::inference(&adaptation.params);
    let s = bundle.backbone.score(&mut g, query)?;
    Ok((g.value(s).values().to_vec(), adaptation.delta_norm))
}

/// First-order meta-training: each task's query-loss gradient is taken at
/// its adapted parameters and applied to the shared initialization.
pub fn train_baseline_epoch(
    bundle: &mut BaselineBundle,
    adam: &mut AdamState,
    tasks: &[Task],
    cfg: &TrainConfig,
    inner: &BaselineConfig,
    source: EpisodeSource<'_>,
    epoch: usize,
) -> Result<EpochStats> {
    use rand::seq::SliceRandom;
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::Empty("tasks"));
    }
    adam.config.lr = cfg.lr;
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.shuffle(&mut rng_stream(
        mix64(cfg.seed ^ mix64(epoch as u64 + 1)),
        0xba5e_0de7,
    ));
    let (mut loss_sum, mut batches, mut flagged) = (0.0, 0, 0);
    for chunk in order.chunks(cfg.batch_size) {
        let mut batch: Vec<&Task> = chunk.iter().map(|&k| &tasks[k]).collect();
        batch.sort_by_key(|t| t.task_id);
        let mut total = ParamGrads::zeros_like(&bundle.params);
        for task in &batch {
            let ep = draw_episode(
                task,
                source,
                cfg.shuffle_support,
                &mut episode_rng(cfg.seed, epoch as u64, task.task_id),
            )?;
            flagged += usize::from(ep.flagged);
            let adapted = baseline_adapt(bundle, &ep.support, inner, cfg.loss)?;
            let mut g = Graph::new(&adapted.params);
            let scores = bundle.backbone.score(&mut g, &ep.query)?;
            let loss = loss_from_scores(&mut g, scores, &ep.query, cfg.loss)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite(alloc::format!(
                    "task {}: loss {value}",
                    task.task_id
                )));
            }
            loss_sum += value;
            total.accumulate(&g.backward(loss)?);
        }
        total.scale(1.0 / batch.len() as f64);
        adam_step(&mut bundle.params, &total, adam)?;
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
