use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Interaction, Setting, Split, Task};
use crate::error::{Error, Result};
use crate::rng::{mix64, rng_stream};

const SCENARIO_STREAM: u64 = 0x5ce0_0000;
const USER_STREAM: u64 = 0x05e4_0000;

/// Deterministic meta-train/meta-test assignment from a hash of the id.
pub fn split_for(task_id: u64, seed: u64, train_ratio: f64) -> Split {
    let h = mix64(mix64(seed) ^ task_id);
    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
    if u < train_ratio {
        Split::Train
    } else {
        Split::Test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioTaskParams {
    pub min_items: usize,
    pub max_items: usize,
    pub train_ratio: f64,
    /// Share of a scenario's positives held as the support pool.
    pub support_fraction: f64,
    pub seed: u64,
}

impl Default for ScenarioTaskParams {
    fn default() -> Self {
        Self {
            min_items: 100,
            max_items: 1000,
            train_ratio: 0.75,
            support_fraction: 1.0 / 3.0,
            seed: 0,
        }
    }
}

/// One task per scenario whose distinct item count lies in
/// `[min_items, max_items]`. Only positive interactions form tasks; the
/// scenario's positives are shuffled and split into support and query pools.
pub fn build_scenario_tasks(
    interactions: &[Interaction],
    params: &ScenarioTaskParams,
) -> Result<Vec<Task>> {
    let mut by_scenario: BTreeMap<u64, Vec<Interaction>> = BTreeMap::new();
    for i in interactions {
        if let (Some(s), true) = (i.scenario_id, i.label > 0.0) {
            by_scenario.entry(s).or_default().push(*i);
        }
    }
    let mut tasks = Vec::new();
    for (scenario, mut rows) in by_scenario {
        let items: BTreeSet<usize> = rows.iter().map(|i| i.item_id).collect();
        if items.len() < params.min_items || items.len() > params.max_items {
            continue;
        }
        let mut seen = BTreeSet::new();
        rows.retain(|i| seen.insert(i.pair()));
        rows.sort_by_key(Interaction::pair);
        rows.shuffle(&mut rng_stream(params.seed, SCENARIO_STREAM ^ scenario));
        let n_support = ((rows.len() as f64 * params.support_fraction).round() as usize)
            .clamp(1, rows.len() - 1);
        let query = rows.split_off(n_support);
        let split = split_for(scenario, params.seed, params.train_ratio);
        tasks.push(Task::new(scenario, Setting::Scenario, split, rows, query)?);
    }
    if tasks.is_empty() {
        return Err(Error::Data(
            "no scenario has an item count within the configured range".into(),
        ));
    }
    Ok(tasks)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UserTaskParams {
    pub per_user_cap: usize,
    pub query_size: usize,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for UserTaskParams {
    fn default() -> Self {
        Self {
            per_user_cap: 50,
            query_size: 10,
            train_ratio: 0.75,
            seed: 0,
        }
    }
}

/// One task per user: at most `per_user_cap` random records, `query_size`
/// of them as query and the remainder as support. Users with fewer than
/// `query_size + 1` distinct items are dropped.
pub fn build_user_tasks(
    interactions: &[Interaction],
    params: &UserTaskParams,
) -> Result<Vec<Task>> {
    let mut by_user: BTreeMap<usize, Vec<Interaction>> = BTreeMap::new();
    for i in interactions {
        by_user.entry(i.user_id).or_default().push(*i);
    }
    let mut tasks = Vec::new();
    for (user, mut rows) in by_user {
        let mut seen = BTreeSet::new();
        rows.retain(|i| seen.insert(i.item_id));
        if rows.len() < params.query_size + 1 {
            continue;
        }
        rows.sort_by_key(|i| i.item_id);
        rows.shuffle(&mut rng_stream(params.seed, USER_STREAM ^ user as u64));
        rows.truncate(params.per_user_cap.max(params.query_size + 1));
        let support = rows.split_off(params.query_size);
        let split = split_for(user as u64, params.seed, params.train_ratio);
        tasks.push(Task::new(user as u64, Setting::User, split, support, rows)?);
    }
    if tasks.is_empty() {
        return Err(Error::Data(alloc::format!(
            "no user has at least {} rated items",
            params.query_size + 1
        )));
    }
    Ok(tasks)
}
