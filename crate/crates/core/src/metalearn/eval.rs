use alloc::collections::BTreeSet;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Episode, EpisodeParams, Example, Task};
use crate::error::{Error, Result};
use crate::metrics::{mae, mse, ndcg_at_k, recall_at_n, EvalReport};
use crate::rng::{mix64, rng_stream};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub recall_n: Vec<usize>,
    /// Sampled negatives ranked against each held-out positive.
    pub eval_negatives: usize,
    pub ndcg_k: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            recall_n: vec![10, 20, 50],
            eval_negatives: 100,
            ndcg_k: 3,
            seed: 0,
        }
    }
}

/// How a task's predictions are judged.
#[derive(Debug, Clone, Copy)]
pub enum EvalProtocol<'a> {
    /// Each query positive is ranked against `eval_negatives` items the
    /// scenario never interacted with; Recall@N is the hit rate over
    /// positives.
    Scenario {
        params: EpisodeParams,
        negative_pool: &'a [usize],
    },
    /// Rating regression: MAE and NDCG@K over the query.
    Rating,
    /// Real-valued regression: MSE and MAE over the query.
    Regression,
}

/// Evaluates `scorer(task, support, query)` on every task. The scorer sees
/// the same support and query whatever model it wraps.
pub fn evaluate_tasks(
    tasks: &[Task],
    cfg: &EvalConfig,
    protocol: EvalProtocol<'_>,
    mut scorer: impl FnMut(&Task, &[Example], &[Example]) -> Result<Vec<f64>>,
) -> Result<EvalReport> {
    let mut report = EvalReport::default();
    let mut score = |task: &Task, support: &[Example], query: &[Example]| -> Result<Vec<f64>> {
        let s = scorer(task, support, query)?;
        if s.len() != query.len() {
            return Err(Error::shape("scorer", &[s.len()], &[query.len()]));
        }
        Ok(s)
    };
    for task in tasks {
        match protocol {
            EvalProtocol::Scenario {
                params,
                negative_pool,
            } => {
                let mut rng = rng_stream(mix64(cfg.seed ^ 0xe7a1), task.task_id);
                let ep = sample_episode(task, &params, negative_pool, &mut rng)?;
                let taken: BTreeSet<usize> = task
                    .support
                    .iter()
                    .chain(&task.query)
                    .map(|i| i.item_id)
                    .collect();
                let candidates: Vec<usize> = negative_pool
                    .iter()
                    .copied()
                    .filter(|i| !taken.contains(i))
                    .collect();
                if candidates.len() < cfg.eval_negatives {
                    return Err(Error::Data(format!(
                        "task {}: only {} negative candidates for {} per positive",
                        task.task_id,
                        candidates.len(),
                        cfg.eval_negatives
                    )));
                }
                let positives: Vec<Example> =
                    ep.query.iter().copied().filter(|e| e.label > 0.0).collect();
                let group = 1 + cfg.eval_negatives;
                let mut query = Vec::with_capacity(positives.len() * group);
                for p in &positives {
                    query.push(*p);
                    for &item in candidates.choose_multiple(&mut rng, cfg.eval_negatives) {
                        query.push(Example {
                            user: p.user,
                            item,
                            label: -1.0,
                        });
                    }
                }
                let scores = score(task, &ep.support, &query)?;
                for &n in &cfg.recall_n {
                    if n > group {
                        continue;
                    }
                    let mut total = 0.0;
                    for (k, p) in positives.iter().enumerate() {
                        let ranked: Vec<(usize, f64)> = (k * group..(k + 1) * group)
                            .map(|j| (query[j].item, scores[j]))
                            .collect();
                        total += recall_at_n(&ranked, &[p.item], n)?;
                    }
                    report.push(
                        task.task_id,
                        &format!("recall@{n}"),
                        total / positives.len() as f64,
                    )?;
                }
            }
            EvalProtocol::Rating | EvalProtocol::Regression => {
                let ep = Episode::fixed(task);
                let scores = score(task, &ep.support, &ep.query)?;
                let labels: Vec<f64> = ep.query.iter().map(|e| e.label).collect();
                if matches!(protocol, EvalProtocol::Regression) {
                    report.push(task.task_id, "mse", mse(&scores, &labels)?)?;
                    report.push(task.task_id, "mae", mae(&scores, &labels)?)?;
                } else {
                    report.push(task.task_id, "mae", mae(&scores, &labels)?)?;
                    if labels.iter().any(|&y| y > 0.0) {
                        let items: Vec<(usize, f64, f64)> = ep
                            .query
                            .iter()
                            .zip(&scores)
                            .map(|(e, &s)| (e.item, s, e.label))
                            .collect();
                        report.push(
                            task.task_id,
                            &format!("ndcg@{}", cfg.ndcg_k),
                            ndcg_at_k(&items, cfg.ndcg_k)?,
                        )?;
                    }
                }
            }
        }
    }
    Ok(report)
}
