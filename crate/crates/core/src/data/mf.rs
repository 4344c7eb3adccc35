//! Matrix factorization for pretrained embedding tables.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Interaction;
use crate::error::{Error, Result};
use crate::rng::rng_stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MfConfig {
    pub dim: usize,
    pub epochs: usize,
    pub lr: f64,
    pub reg: f64,
    pub init_sd: f64,
    pub seed: u64,
}

impl Default for MfConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            epochs: 20,
            lr: 0.01,
            reg: 0.01,
            init_sd: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfTables {
    pub user: Tensor,
    pub item: Tensor,
}

impl MfTables {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.user
            .row(user)
            .iter()
            .zip(self.item.row(item))
            .map(|(a, b)| a * b)
            .sum()
    }
}

/// SGD on `sum (label - p_u · q_i)^2 + reg (|p_u|^2 + |q_i|^2)`, visiting
/// interactions in a fresh seeded order each epoch. Table sizes cover the
/// largest ids seen, or the given minimums.
pub fn mf_pretrain(
    interactions: &[Interaction],
    n_users: usize,
    n_items: usize,
    cfg: &MfConfig,
) -> Result<MfTables> {
    if cfg.dim == 0 {
        return Err(Error::Config("embedding dim must be positive".into()));
    }
    if interactions.is_empty() {
        return Err(Error::Data("no interactions to factorize".into()));
    }
    let n_users = n_users.max(
        interactions
            .iter()
            .map(|i| i.user_id + 1)
            .max()
            .unwrap_or(0),
    );
    let n_items = n_items.max(
        interactions
            .iter()
            .map(|i| i.item_id + 1)
            .max()
            .unwrap_or(0),
    );
    let d = cfg.dim;
    let mut init = rng_stream(cfg.seed, 0);
    let normal = Normal::new(0.0, cfg.init_sd).map_err(|e| Error::Config(alloc::format!("{e}")))?;
    let mut users: Vec<f64> = (0..n_users * d).map(|_| normal.sample(&mut init)).collect();
    let mut items: Vec<f64> = (0..n_items * d).map(|_| normal.sample(&mut init)).collect();

    let mut order: Vec<usize> = (0..interactions.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng_stream(cfg.seed, 1 + epoch as u64));
        for &k in &order {
            let i = &interactions[k];
            let (pu, qi) = (i.user_id * d, i.item_id * d);
            let pred: f64 = (0..d).map(|f| users[pu + f] * items[qi + f]).sum();
            let err = i.label - pred;
            for f in 0..d {
                let (p, q) = (users[pu + f], items[qi + f]);
                users[pu + f] += cfg.lr * (err * q - cfg.reg * p);
                items[qi + f] += cfg.lr * (err * p - cfg.reg * q);
            }
        }
    }
    Ok(MfTables {
        user: Tensor::matrix(n_users, d, users)?,
        item: Tensor::matrix(n_items, d, items)?,
    })
}
