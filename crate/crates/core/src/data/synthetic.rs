//! Synthetic cold-start tasks with a known per-task linear oracle.
//!
//! Task `t` draws a hidden vector `w_t ~ N(0, task_vector_sd^2 I)`. Every
//! example is a fresh item whose features `x` have independent ±1 entries;
//! its label is `w_t · x[..latent_dim] + N(0, noise_sd^2)` (or the sign of
//! that value in CTR mode). Items are numbered globally, so the feature table
//! doubles as a frozen item embedding table.

use alloc::vec::Vec;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{split_for, Interaction, Setting, Split, Task};
use crate::error::{Error, Result};
use crate::rng::rng_stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    Regression,
    Ctr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticTaskSpec {
    pub latent_dim: usize,
    pub feature_dim: usize,
    pub noise_sd: f64,
    pub support_size: usize,
    pub query_size: usize,
    pub task_count: usize,
    pub task_vector_sd: f64,
    pub label_mode: LabelMode,
    pub train_ratio: f64,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            latent_dim: 8,
            feature_dim: 8,
            noise_sd: 0.1,
            support_size: 64,
            query_size: 32,
            task_count: 500,
            task_vector_sd: 0.1,
            label_mode: LabelMode::Regression,
            train_ratio: 0.75,
            seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.latent_dim,
            self.feature_dim,
            self.support_size,
            self.query_size,
            self.task_count,
        ];
        if sizes.contains(&0) {
            return Err(Error::Config(
                "synthetic task sizes must be positive".into(),
            ));
        }
        if self.latent_dim > self.feature_dim {
            return Err(Error::Config("latent_dim cannot exceed feature_dim".into()));
        }
        if !(self.noise_sd >= 0.0 && self.task_vector_sd >= 0.0) {
            return Err(Error::Config(
                "standard deviations must be nonnegative".into(),
            ));
        }
        Ok(())
    }

    pub fn examples_per_task(&self) -> usize {
        self.support_size + self.query_size
    }

    /// Lowest achievable query MSE in regression mode: the label noise
    /// variance, attained by predicting `w_t · x`.
    pub fn bayes_mse(&self) -> f64 {
        self.noise_sd * self.noise_sd
    }

    /// MSE of the best context-free predictor (always 0, by symmetry of
    /// `w_t`): `Var(w · x) + noise`.
    pub fn context_free_mse(&self) -> f64 {
        self.latent_dim as f64 * self.task_vector_sd * self.task_vector_sd + self.bayes_mse()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub tasks: Vec<Task>,
    /// Hidden vector of each task, indexed like `tasks`.
    pub hidden: Vec<Vec<f64>>,
    /// `[task_count * examples_per_task, feature_dim]` item features.
    pub item_features: Tensor,
}

impl SyntheticData {
    /// Noiseless oracle label for an item under a task's hidden vector.
    pub fn oracle(&self, task_index: usize, item: usize) -> f64 {
        let w = &self.hidden[task_index];
        w.iter()
            .zip(self.item_features.row(item))
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn n_items(&self) -> usize {
        self.item_features.rows()
    }
}

pub fn generate_synthetic_tasks(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let per_task = spec.examples_per_task();
    let mut features = Vec::with_capacity(spec.task_count * per_task * spec.feature_dim);
    let mut tasks = Vec::with_capacity(spec.task_count);
    let mut hidden = Vec::with_capacity(spec.task_count);
    let w_dist =
        Normal::new(0.0, spec.task_vector_sd).map_err(|e| Error::Config(alloc::format!("{e}")))?;
    let noise =
        Normal::new(0.0, spec.noise_sd).map_err(|e| Error::Config(alloc::format!("{e}")))?;

    for t in 0..spec.task_count {
        let mut rng = rng_stream(spec.seed, t as u64);
        let w: Vec<f64> = (0..spec.latent_dim)
            .map(|_| w_dist.sample(&mut rng))
            .collect();
        let mut rows = Vec::with_capacity(per_task);
        for k in 0..per_task {
            let x: Vec<f64> = (0..spec.feature_dim)
                .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                .collect();
            let clean: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
            let eps = if spec.noise_sd > 0.0 {
                noise.sample(&mut rng)
            } else {
                0.0
            };
            let y = clean + eps;
            let label = match spec.label_mode {
                LabelMode::Regression => y,
                LabelMode::Ctr => {
                    if y >= 0.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            features.extend_from_slice(&x);
            rows.push(Interaction::new(t, t * per_task + k, label));
        }
        let query = rows.split_off(spec.support_size);
        let split = if spec.train_ratio >= 1.0 {
            Split::Train
        } else {
            split_for(t as u64, spec.seed, spec.train_ratio)
        };
        tasks.push(Task::new(t as u64, Setting::User, split, rows, query)?);
        hidden.push(w);
    }
    let item_features = Tensor::matrix(spec.task_count * per_task, spec.feature_dim, features)?;
    Ok(SyntheticData {
        tasks,
        hidden,
        item_features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(noise_sd: f64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task_count: 6,
            support_size: 10,
            query_size: 5,
            noise_sd,
            seed: 42,
            ..SyntheticTaskSpec::default()
        }
    }

    #[test]
    fn noiseless_labels_match_oracle() {
        let data = generate_synthetic_tasks(&small(0.0)).unwrap();
        for (t, task) in data.tasks.iter().enumerate() {
            for i in task.support.iter().chain(&task.query) {
                assert_eq!(i.label, data.oracle(t, i.item_id));
            }
        }
    }

    #[test]
    fn task_generation_is_seeded_per_task() {
        let a = generate_synthetic_tasks(&small(0.1)).unwrap();
        let b = generate_synthetic_tasks(&SyntheticTaskSpec {
            task_count: 3,
            ..small(0.1)
        })
        .unwrap();
        assert_eq!(a.tasks[..3], b.tasks[..]);
        assert_eq!(a.hidden[..3], b.hidden[..]);
    }

    #[test]
    fn oracle_mse_equals_noise_variance() {
        // Empirical MSE of the Bayes predictor over many draws vs sigma^2.
        let spec = SyntheticTaskSpec {
            task_count: 200,
            support_size: 50,
            query_size: 50,
            noise_sd: 0.1,
            ..SyntheticTaskSpec::default()
        };
        let data = generate_synthetic_tasks(&spec).unwrap();
        let mut total = 0.0;
        let mut n = 0;
        for (t, task) in data.tasks.iter().enumerate() {
            for i in &task.query {
                let r = i.label - data.oracle(t, i.item_id);
                total += r * r;
                n += 1;
            }
        }
        let mse = total / n as f64;
        assert!((mse - spec.bayes_mse()).abs() < 0.0006, "{mse}");
    }

    #[test]
    fn ctr_labels_are_signs() {
        let spec = SyntheticTaskSpec {
            label_mode: LabelMode::Ctr,
            ..small(0.1)
        };
        let data = generate_synthetic_tasks(&spec).unwrap();
        assert!(data
            .tasks
            .iter()
            .flat_map(|t| &t.query)
            .all(|i| i.label == 1.0 || i.label == -1.0));
    }

    #[test]
    fn invalid_spec_rejected() {
        assert!(generate_synthetic_tasks(&SyntheticTaskSpec {
            latent_dim: 0,
            ..small(0.1)
        })
        .is_err());
        assert!(generate_synthetic_tasks(&SyntheticTaskSpec {
            noise_sd: -1.0,
            ..small(0.1)
        })
        .is_err());
    }
}
