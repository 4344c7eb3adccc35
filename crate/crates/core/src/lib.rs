//! Contextual modulation meta-learning for cold-start recommendation.
//!
//! A backbone recommender is adapted to a new user or scenario by feeding a
//! context vector, aggregated from the task's support set, through a
//! hypernetwork that modulates the backbone. Adaptation is a single forward
//! pass: no parameter is written at inference time.
//!
//! The crate is `no_std` and needs only `alloc`.

#![no_std]

extern crate alloc;

pub mod backbone;
pub mod context;
pub mod data;
pub mod error;
pub mod metalearn;
pub mod metrics;
pub mod modulation;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Graph, Group, ParamGrads, ParamId, ParamSet};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
