//! Model bundles, the feed-forward adaptation pipeline, losses, episodic
//! meta-training, the gradient-based baseline and task evaluation.

mod baseline;
mod eval;
mod train;

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::context::{
    encoder_input, ContextEncoder, EncoderConfig, GeneratorConfig, HybridGenerator,
};
use crate::data::Example;
use crate::error::{Error, Result};
use crate::modulation::{ModulationConfig, Modulator, RouteTensor};
use crate::params::{Graph, Group, ParamSet};
use crate::rng::rng_stream;
use crate::tape::Var;
use crate::tensor::Tensor;

pub use baseline::{
    baseline_adapt, baseline_adapt_and_score, train_baseline_epoch, AdaptScope, Adaptation,
    BaselineBundle, BaselineConfig,
};
pub use eval::{evaluate_tasks, EvalConfig, EvalProtocol};
pub use train::{
    draw_episode, episode_rng, meta_batch, train_epoch, EpisodeSource, EpochStats, TrainConfig,
};

/// Stream used to initialize bundle parameters.
const INIT_STREAM: u64 = 0x1417;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossMode {
    /// Pairwise hinge over positive/negative query pairs.
    Hinge,
    /// Squared error against the labels.
    Mse,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Hinge => "hinge",
            LossMode::Mse => "mse",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub generator: GeneratorConfig,
    pub modulation: ModulationConfig,
}

/// Backbone parameters Φ and meta parameters Θ_M with the modules that use
/// them. The modules only hold parameter handles, so a bundle can be
/// rebuilt from its config and a parameter set.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub backbone: Backbone,
    pub encoder: ContextEncoder,
    pub generator: HybridGenerator,
    pub modulator: Modulator,
}

impl ModelBundle {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = ParamSet::new();
        let mut rng = rng_stream(seed, INIT_STREAM);
        let (stack, head) = config.modulation.variant.backbone_stack();
        let backbone = Backbone::new(&mut params, &config.backbone, stack, head, &mut rng)?;
        let pair_dim = backbone.input_dim();
        let input_dim = pair_dim + usize::from(config.encoder.use_labels);
        let context_dim = config.encoder.context_dim.unwrap_or(pair_dim);
        let encoder = ContextEncoder::new(
            &mut params,
            &config.encoder,
            input_dim,
            context_dim,
            &mut rng,
        )?;
        let generator = HybridGenerator::new(
            &mut params,
            &config.generator,
            context_dim,
            pair_dim,
            &mut rng,
        )?;
        let conditioning = generator.output_dim(pair_dim);
        let modulator = Modulator::new(
            &mut params,
            &config.modulation,
            &backbone,
            conditioning,
            &mut rng,
        )?;
        Ok(Self {
            config,
            params,
            backbone,
            encoder,
            generator,
            modulator,
        })
    }

    /// Rebuilds the module structure for `config` and adopts `params`, which
    /// must carry exactly the expected names, groups and shapes.
    pub fn with_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut bundle = Self::new(config, 0)?;
        adopt(&mut bundle.params, params)?;
        Ok(bundle)
    }

    pub fn pair_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }

    /// Replaces embedding tables, e.g. with pretrained ones.
    pub fn set_embeddings(&mut self, user: Option<&Tensor>, item: &Tensor) -> Result<()> {
        set_tables(&mut self.params, &self.backbone, user, item)
    }
}

pub(crate) fn adopt(target: &mut ParamSet, source: ParamSet) -> Result<()> {
    let expected: Vec<_> = target
        .iter()
        .map(|(_, e)| {
            (
                e.name.clone(),
                e.group,
                e.trainable,
                e.value.shape().to_vec(),
            )
        })
        .collect();
    let found: Vec<_> = source
        .iter()
        .map(|(_, e)| {
            (
                e.name.clone(),
                e.group,
                e.trainable,
                e.value.shape().to_vec(),
            )
        })
        .collect();
    if expected != found {
        let missing = expected
            .iter()
            .find(|e| !found.contains(e))
            .or_else(|| found.iter().find(|f| !expected.contains(f)));
        return Err(Error::Config(format!(
            "parameter set does not match the model: first difference at {:?}",
            missing.map(|m| &m.0)
        )));
    }
    *target = source;
    Ok(())
}

pub(crate) fn set_tables(
    params: &mut ParamSet,
    backbone: &Backbone,
    user: Option<&Tensor>,
    item: &Tensor,
) -> Result<()> {
    let mut set = |id, t: &Tensor| -> Result<()> {
        let name = params.entry(id).name.clone();
        params.set(&name, t.clone())
    };
    match (backbone.embeddings.user.first(), user) {
        (Some((_, id)), Some(t)) => set(*id, t)?,
        (None, None) => {}
        (Some(_), None) => {
            return Err(Error::Config(
                "model has a user table but none was given".into(),
            ))
        }
        (None, Some(_)) => return Err(Error::Config("model has no user table".into())),
    }
    let (_, id) = backbone
        .embeddings
        .item
        .first()
        .ok_or_else(|| Error::Config("model has no item table".into()))?;
    set(*id, item)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace the task context with zeros (the zero-context ablation).
    pub zero_context: bool,
}

/// Tape handles from one pass of the adaptation pipeline.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// `[n_query, 1]`.
    pub scores: Var,
    /// Task context, one row.
    pub context: Var,
    /// Per-layer routes for soft modularization.
    pub routes: Option<Vec<Var>>,
}

/// Support → context `C` → per-query `C_h` → modulated scores.
pub fn forward_pipeline(
    bundle: &ModelBundle,
    g: &mut Graph<'_>,
    support: &[Example],
    query: &[Example],
    opts: ForwardOptions,
) -> Result<PipelineOutput> {
    if support.is_empty() {
        return Err(Error::Empty("support"));
    }
    if query.is_empty() {
        return Err(Error::Empty("query"));
    }
    let (_, _, sx) = bundle.backbone.embed_examples(g, support)?;
    let labels: Vec<f64> = support.iter().map(|e| e.label).collect();
    let rows = encoder_input(g, sx, &labels, bundle.config.encoder.use_labels)?;
    let mut context = bundle.encoder.encode(g, rows)?;
    if opts.zero_context {
        let shape = g.value(context).shape().to_vec();
        context = g.constant(Tensor::zeros(&shape));
    }
    let (e_u, e_i, qx) = bundle.backbone.embed_examples(g, query)?;
    let c_h = bundle.generator.generate(g, context, qx)?;
    let (scores, routes) = bundle.modulator.score(g, &bundle.backbone, c_h, e_u, e_i)?;
    Ok(PipelineOutput {
        scores,
        context,
        routes,
    })
}

/// Indices of positives and negatives in order of appearance; the `k`-th
/// positive is paired with the `k`-th negative.
pub fn hinge_pairs(examples: &[Example]) -> Result<(Vec<usize>, Vec<usize>)> {
    let pos: Vec<usize> = (0..examples.len())
        .filter(|&k| examples[k].label > 0.0)
        .collect();
    let neg: Vec<usize> = (0..examples.len())
        .filter(|&k| examples[k].label <= 0.0)
        .collect();
    if pos.is_empty() || pos.len() != neg.len() {
        return Err(Error::Data(format!(
            "hinge loss needs equal nonzero positive and negative counts, got {} and {}",
            pos.len(),
            neg.len()
        )));
    }
    Ok((pos, neg))
}

/// Mean per-example loss of `scores` (`[n, 1]`) against `examples`.
pub fn loss_from_scores(
    g: &mut Graph<'_>,
    scores: Var,
    examples: &[Example],
    mode: LossMode,
) -> Result<Var> {
    if g.value(scores).len() != examples.len() {
        return Err(Error::shape(
            "loss",
            g.value(scores).shape(),
            &[examples.len(), 1],
        ));
    }
    match mode {
        LossMode::Hinge => {
            let (pos, neg) = hinge_pairs(examples)?;
            let sp = g.tape.gather(scores, &pos)?;
            let sn = g.tape.gather(scores, &neg)?;
            let gap = g.tape.sub(sn, sp)?;
            let margin = g.tape.affine(gap, 1.0, 1.0);
            let hinge = g.tape.relu(margin);
            Ok(g.tape.mean(hinge))
        }
        LossMode::Mse => {
            let y = g.constant(Tensor::matrix(
                examples.len(),
                1,
                examples.iter().map(|e| e.label).collect(),
            )?);
            let r = g.tape.sub(scores, y)?;
            let sq = g.tape.mul(r, r)?;
            Ok(g.tape.mean(sq))
        }
    }
}

fn checked(task_id: u64, loss: f64) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite(format!("task {task_id}: loss {loss}")))
    }
}

/// Query loss of one episode.
pub fn cmml_loss_on_task(
    bundle: &ModelBundle,
    episode: &crate::data::Episode,
    mode: LossMode,
) -> Result<f64> {
    let mut g = Graph::inference(&bundle.params);
    let out = forward_pipeline(
        bundle,
        &mut g,
        &episode.support,
        &episode.query,
        ForwardOptions::default(),
    )?;
    let loss = loss_from_scores(&mut g, out.scores, &episode.query, mode)?;
    checked(episode.task_id, g.value(loss).item())
}

/// Query loss of one episode and its gradient with respect to every
/// trainable parameter (Φ and Θ_M).
pub fn cmml_loss_and_grads(
    bundle: &ModelBundle,
    episode: &crate::data::Episode,
    mode: LossMode,
) -> Result<(f64, crate::params::ParamGrads)> {
    let mut g = Graph::new(&bundle.params);
    let out = forward_pipeline(
        bundle,
        &mut g,
        &episode.support,
        &episode.query,
        ForwardOptions::default(),
    )?;
    let loss = loss_from_scores(&mut g, out.scores, &episode.query, mode)?;
    let value = checked(episode.task_id, g.value(loss).item())?;
    let grads = g.backward(loss)?;
    Ok((value, grads))
}

/// Everything a feed-forward adaptation produces for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub scores: Vec<f64>,
    pub context: Vec<f64>,
    /// One route tensor per query example, soft modularization only.
    pub routes: Option<Vec<RouteTensor>>,
}

pub fn cmml_infer_with(
    bundle: &ModelBundle,
    support: &[Example],
    query: &[Example],
    opts: ForwardOptions,
) -> Result<Inference> {
    let mut g = Graph::inference(&bundle.params);
    let out = forward_pipeline(bundle, &mut g, support, query, opts)?;
    let routes = out.routes.as_ref().map(|r| {
        let m = bundle.config.modulation.soft.modules;
        (0..query.len())
            .map(|row| RouteTensor::from_layers(&g, r, m, row))
            .collect()
    });
    Ok(Inference {
        scores: g.value(out.scores).values().to_vec(),
        context: g.value(out.context).values().to_vec(),
        routes,
    })
}

/// Scores for `query` after adapting to `support` by a forward pass only.
pub fn cmml_infer(
    bundle: &ModelBundle,
    support: &[Example],
    query: &[Example],
) -> Result<Vec<f64>> {
    Ok(cmml_infer_with(bundle, support, query, ForwardOptions::default())?.scores)
}

/// Task context `C` for a support set.
pub fn encode_context(bundle: &ModelBundle, support: &[Example]) -> Result<Vec<f64>> {
    if support.is_empty() {
        return Err(Error::Empty("support"));
    }
    let mut g = Graph::inference(&bundle.params);
    let (_, _, sx) = bundle.backbone.embed_examples(&mut g, support)?;
    let labels: Vec<f64> = support.iter().map(|e| e.label).collect();
    let rows = encoder_input(&mut g, sx, &labels, bundle.config.encoder.use_labels)?;
    let c = bundle.encoder.encode(&mut g, rows)?;
    Ok(g.value(c).values().to_vec())
}

/// Parameter count per group.
pub fn parameter_counts(params: &ParamSet) -> (usize, usize) {
    (
        params.count(Some(Group::Backbone)),
        params.count(Some(Group::Meta)),
    )
}
