use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Interaction, Setting, Task};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// A labeled user–item pair fed to the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Example {
    pub user: usize,
    pub item: usize,
    pub label: f64,
}

impl From<&Interaction> for Example {
    fn from(i: &Interaction) -> Self {
        Self {
            user: i.user_id,
            item: i.item_id,
            label: i.label,
        }
    }
}

/// One sampled (support, query) realization of a task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub task_id: u64,
    pub support: Vec<Example>,
    pub query: Vec<Example>,
    /// Order in which the task's support examples were presented.
    pub support_permutation: Vec<usize>,
    /// Set when a pool was too small and positives were drawn with
    /// replacement.
    pub flagged: bool,
}

impl Episode {
    /// Uses the task's own support and query, with the support order
    /// shuffled.
    pub fn from_task(task: &Task, rng: &mut Rng) -> Self {
        let mut perm: Vec<usize> = (0..task.support.len()).collect();
        perm.shuffle(rng);
        Self {
            task_id: task.task_id,
            support: perm
                .iter()
                .map(|&k| Example::from(&task.support[k]))
                .collect(),
            query: task.query.iter().map(Example::from).collect(),
            support_permutation: perm,
            flagged: false,
        }
    }

    /// Same as [`Episode::from_task`] without shuffling.
    pub fn fixed(task: &Task) -> Self {
        Self {
            task_id: task.task_id,
            support: task.support.iter().map(Example::from).collect(),
            query: task.query.iter().map(Example::from).collect(),
            support_permutation: (0..task.support.len()).collect(),
            flagged: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeParams {
    pub n_pos_support: usize,
    pub n_query: usize,
}

impl Default for EpisodeParams {
    fn default() -> Self {
        Self {
            n_pos_support: 64,
            n_query: 128,
        }
    }
}

fn draw_positives(pool: &[Interaction], n: usize, rng: &mut Rng) -> (Vec<Interaction>, bool) {
    if pool.len() >= n {
        let mut picked: Vec<Interaction> = pool.choose_multiple(rng, n).copied().collect();
        picked.shuffle(rng);
        (picked, false)
    } else {
        (
            (0..n)
                .map(|_| pool[rng.random_range(0..pool.len())])
                .collect(),
            true,
        )
    }
}

/// Scenario episode: `n_pos_support` positives from the support pool and
/// `n_query` from the query pool, each matched by an equal number of
/// negatives. A negative keeps its positive's user and takes an item drawn
/// uniformly from `negative_pool` minus the task's positive items.
///
/// Query order is all positives then all negatives, so position `k` pairs
/// positive `k` with negative `k`.
pub fn sample_episode(
    task: &Task,
    params: &EpisodeParams,
    negative_pool: &[usize],
    rng: &mut Rng,
) -> Result<Episode> {
    if task.setting != Setting::Scenario {
        return Err(Error::Data(alloc::format!(
            "task {} is not a scenario task",
            task.task_id
        )));
    }
    let positives: BTreeSet<usize> = task
        .support
        .iter()
        .chain(&task.query)
        .map(|i| i.item_id)
        .collect();
    let candidates: Vec<usize> = negative_pool
        .iter()
        .copied()
        .filter(|i| !positives.contains(i))
        .collect();
    if candidates.is_empty() {
        return Err(Error::Data(alloc::format!(
            "task {}: negative pool has no item outside the task's positives",
            task.task_id
        )));
    }
    let negatives_for = |pos: &[Interaction], rng: &mut Rng| -> Vec<Example> {
        pos.iter()
            .map(|p| Example {
                user: p.user_id,
                item: candidates[rng.random_range(0..candidates.len())],
                label: -1.0,
            })
            .collect()
    };
    let positive = |i: &Interaction| Example {
        user: i.user_id,
        item: i.item_id,
        label: 1.0,
    };

    let (sup_pos, flag_s) = draw_positives(&task.support, params.n_pos_support, rng);
    let (qry_pos, flag_q) = draw_positives(&task.query, params.n_query, rng);
    let sup_neg = negatives_for(&sup_pos, rng);
    let qry_neg = negatives_for(&qry_pos, rng);

    let mut support: Vec<Example> = sup_pos.iter().map(positive).collect();
    support.extend(sup_neg);
    let mut perm: Vec<usize> = (0..support.len()).collect();
    perm.shuffle(rng);
    let support = perm.iter().map(|&k| support[k]).collect();

    let mut query: Vec<Example> = qry_pos.iter().map(positive).collect();
    query.extend(qry_neg);

    Ok(Episode {
        task_id: task.task_id,
        support,
        query,
        support_permutation: perm,
        flagged: flag_s || flag_q,
    })
}
