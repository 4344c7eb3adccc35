//! Interactions, meta-learning tasks and their construction.

mod episode;
mod mf;
mod synthetic;
mod tasks;

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use episode::{sample_episode, Episode, EpisodeParams, Example};
pub use mf::{mf_pretrain, MfConfig, MfTables};
pub use synthetic::{generate_synthetic_tasks, LabelMode, SyntheticData, SyntheticTaskSpec};
pub use tasks::{
    build_scenario_tasks, build_user_tasks, split_for, ScenarioTaskParams, UserTaskParams,
};

/// One logged user–item interaction. `label` is +1/-1 for implicit feedback
/// or the raw rating in rating mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: usize,
    pub item_id: usize,
    pub label: f64,
    pub scenario_id: Option<u64>,
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(user_id: usize, item_id: usize, label: f64) -> Self {
        Self {
            user_id,
            item_id,
            label,
            scenario_id: None,
            timestamp: None,
        }
    }

    pub fn pair(&self) -> (usize, usize) {
        (self.user_id, self.item_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Scenario-specific CTR: tasks are scenarios, labels are implicit.
    Scenario,
    /// User-specific regression: tasks are users, labels are ratings.
    User,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// One cold-start unit: a user or scenario with disjoint support and query
/// sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: u64,
    pub setting: Setting,
    pub split: Split,
    pub support: Vec<Interaction>,
    pub query: Vec<Interaction>,
}

impl Task {
    pub fn new(
        task_id: u64,
        setting: Setting,
        split: Split,
        support: Vec<Interaction>,
        query: Vec<Interaction>,
    ) -> Result<Self> {
        let task = Self {
            task_id,
            setting,
            split,
            support,
            query,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.support.is_empty() || self.query.is_empty() {
            return Err(Error::Data(alloc::format!(
                "task {}: empty support or query",
                self.task_id
            )));
        }
        let support: BTreeSet<_> = self.support.iter().map(Interaction::pair).collect();
        if let Some(i) = self.query.iter().find(|i| support.contains(&i.pair())) {
            return Err(Error::Data(alloc::format!(
                "task {}: pair {:?} in both support and query",
                self.task_id,
                i.pair()
            )));
        }
        Ok(())
    }
}

/// A categorical feature field and its embedding width.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSpec {
    pub name: String,
    pub vocab: usize,
    pub dim: usize,
}

impl FieldSpec {
    pub fn new(name: &str, vocab: usize, dim: usize) -> Self {
        Self {
            name: name.into(),
            vocab,
            dim,
        }
    }
}

/// Categorical fields describing users and items.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSchema {
    pub user_fields: Vec<FieldSpec>,
    pub item_fields: Vec<FieldSpec>,
}

impl FeatureSchema {
    /// Single id field per side.
    pub fn ids(n_users: usize, n_items: usize, user_dim: usize, item_dim: usize) -> Self {
        let mut schema = Self::default();
        if user_dim > 0 {
            schema
                .user_fields
                .push(FieldSpec::new("user_id", n_users, user_dim));
        }
        schema
            .item_fields
            .push(FieldSpec::new("item_id", n_items, item_dim));
        schema
    }

    pub fn user_dim(&self) -> usize {
        self.user_fields.iter().map(|f| f.dim).sum()
    }

    pub fn item_dim(&self) -> usize {
        self.item_fields.iter().map(|f| f.dim).sum()
    }

    /// Width of `concat(e_u, e_i)`.
    pub fn input_dim(&self) -> usize {
        self.user_dim() + self.item_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.item_fields.is_empty() {
            return Err(Error::Config("at least one item field is required".into()));
        }
        for f in self.user_fields.iter().chain(&self.item_fields) {
            if f.vocab == 0 || f.dim == 0 {
                return Err(Error::Config(alloc::format!(
                    "field `{}` needs positive vocab and dim",
                    f.name
                )));
            }
        }
        Ok(())
    }

    /// Checks that every id in `interactions` fits the single-id fields.
    pub fn check_ids(&self, interactions: &[Interaction]) -> Result<()> {
        for i in interactions {
            if let Some(f) = self.user_fields.first() {
                if i.user_id >= f.vocab {
                    return Err(Error::OutOfVocabulary {
                        field: f.name.clone(),
                        id: i.user_id,
                        vocab: f.vocab,
                    });
                }
            }
            if let Some(f) = self.item_fields.first() {
                if i.item_id >= f.vocab {
                    return Err(Error::OutOfVocabulary {
                        field: f.name.clone(),
                        id: i.item_id,
                        vocab: f.vocab,
                    });
                }
            }
        }
        Ok(())
    }
}
