//! The backbone recommender: embedding tables, a ReLU hidden stack and a
//! linear scoring head, `o_ui = w^T h_ui + b`.

use alloc::format;
use alloc::vec::Vec;

use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::data::{Example, FeatureSchema, FieldSpec};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Graph, Group, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// Half-width of the uniform initializer for learned embedding tables.
const EMBEDDING_INIT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Tables trained end to end with the rest of the backbone.
    Learned,
    /// Pretrained tables held constant.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub schema: FeatureSchema,
    pub hidden: Vec<usize>,
    pub embedding_mode: EmbeddingMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            schema: FeatureSchema::default(),
            hidden: alloc::vec![64, 64, 64],
            embedding_mode: EmbeddingMode::Learned,
        }
    }
}

/// One embedding table per categorical field.
#[derive(Debug, Clone)]
pub struct Embeddings {
    pub user: Vec<(FieldSpec, ParamId)>,
    pub item: Vec<(FieldSpec, ParamId)>,
}

impl Embeddings {
    pub fn new(
        params: &mut ParamSet,
        schema: &FeatureSchema,
        mode: EmbeddingMode,
        rng: &mut Rng,
    ) -> Result<Self> {
        schema.validate()?;
        let trainable = mode == EmbeddingMode::Learned;
        let dist = Uniform::new_inclusive(-EMBEDDING_INIT, EMBEDDING_INIT)
            .map_err(|e| Error::Config(format!("{e}")))?;
        let mut table = |side: &str, f: &FieldSpec| -> Result<(FieldSpec, ParamId)> {
            let values = (0..f.vocab * f.dim).map(|_| dist.sample(rng)).collect();
            let t = Tensor::matrix(f.vocab, f.dim, values)?;
            let id = params.add(
                &format!("embedding.{side}.{}", f.name),
                Group::Backbone,
                t,
                trainable,
            )?;
            Ok((f.clone(), id))
        };
        let user = schema
            .user_fields
            .iter()
            .map(|f| table("user", f))
            .collect::<Result<_>>()?;
        let item = schema
            .item_fields
            .iter()
            .map(|f| table("item", f))
            .collect::<Result<_>>()?;
        Ok(Self { user, item })
    }

    pub fn user_dim(&self) -> usize {
        self.user.iter().map(|(f, _)| f.dim).sum()
    }

    pub fn item_dim(&self) -> usize {
        self.item.iter().map(|(f, _)| f.dim).sum()
    }
}

fn embed_side(
    g: &mut Graph<'_>,
    fields: &[(FieldSpec, ParamId)],
    ids: &[Vec<usize>],
) -> Result<Option<Var>> {
    if fields.is_empty() {
        return Ok(None);
    }
    if ids.len() != fields.len() {
        return Err(Error::Data(format!(
            "expected {} feature fields, got {}",
            fields.len(),
            ids.len()
        )));
    }
    let mut parts = Vec::with_capacity(fields.len());
    for ((spec, table), field_ids) in fields.iter().zip(ids) {
        if let Some(&bad) = field_ids.iter().find(|&&id| id >= spec.vocab) {
            return Err(Error::OutOfVocabulary {
                field: spec.name.clone(),
                id: bad,
                vocab: spec.vocab,
            });
        }
        let t = g.param(*table);
        parts.push(g.tape.gather(t, field_ids)?);
    }
    if parts.len() == 1 {
        Ok(Some(parts[0]))
    } else {
        Ok(Some(g.tape.concat(&parts, 1)?))
    }
}

/// `e_u = M_u x_u`, `e_i = M_i x_i` with multi-field embeddings
/// concatenated per entity. Ids are field-major: `ids[field][row]`.
/// A side without fields yields no user embedding.
pub fn embed(
    g: &mut Graph<'_>,
    user_ids: &[Vec<usize>],
    item_ids: &[Vec<usize>],
    tables: &Embeddings,
) -> Result<(Option<Var>, Var)> {
    let e_u = embed_side(g, &tables.user, user_ids)?;
    let e_i = embed_side(g, &tables.item, item_ids)?
        .ok_or_else(|| Error::Config("no item fields".into()))?;
    Ok((e_u, e_i))
}

/// Intermediate values of one backbone pass.
#[derive(Debug, Clone)]
pub struct BackboneActivations {
    pub e_u: Option<Var>,
    pub e_i: Var,
    /// Hidden layer outputs after any modulation.
    pub layers: Vec<Var>,
    pub h: Var,
    pub score: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub embeddings: Embeddings,
    pub hidden: Vec<Linear>,
    pub head: Option<Linear>,
}

impl Backbone {
    /// `with_stack` controls the hidden stack and head; soft modularization
    /// replaces both with its own base network and only needs embeddings.
    pub fn new(
        params: &mut ParamSet,
        cfg: &BackboneConfig,
        with_stack: bool,
        with_head: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let embeddings = Embeddings::new(params, &cfg.schema, cfg.embedding_mode, rng)?;
        let mut hidden = Vec::new();
        let mut head = None;
        if with_stack {
            if cfg.hidden.is_empty() || cfg.hidden.contains(&0) {
                return Err(Error::Config(format!(
                    "backbone hidden sizes must be positive, got {:?}",
                    cfg.hidden
                )));
            }
            let mut width = cfg.schema.input_dim();
            for (i, &w) in cfg.hidden.iter().enumerate() {
                hidden.push(Linear::new(
                    params,
                    &format!("backbone.hidden.{i}"),
                    Group::Backbone,
                    width,
                    w,
                    rng,
                )?);
                width = w;
            }
            if with_head {
                head = Some(Linear::new(
                    params,
                    "backbone.head",
                    Group::Backbone,
                    width,
                    1,
                    rng,
                )?);
            }
        }
        Ok(Self {
            embeddings,
            hidden,
            head,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.embeddings.user_dim() + self.embeddings.item_dim()
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.hidden.iter().map(|l| l.output).collect()
    }

    /// Identity feature lookup: each side has at most one id field, indexed
    /// by the raw user or item id.
    pub fn ids_for(&self, examples: &[Example]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let users = self
            .embeddings
            .user
            .iter()
            .map(|_| examples.iter().map(|e| e.user).collect())
            .collect();
        let items = self
            .embeddings
            .item
            .iter()
            .map(|_| examples.iter().map(|e| e.item).collect())
            .collect();
        (users, items)
    }

    /// Embeds examples and returns `(e_u, e_i, concat(e_u, e_i))`.
    pub fn embed_examples(
        &self,
        g: &mut Graph<'_>,
        examples: &[Example],
    ) -> Result<(Option<Var>, Var, Var)> {
        if examples.is_empty() {
            return Err(Error::Empty("embed"));
        }
        let (u, i) = self.ids_for(examples);
        let (e_u, e_i) = embed(g, &u, &i, &self.embeddings)?;
        let x = match e_u {
            Some(e_u) => g.tape.concat(&[e_u, e_i], 1)?,
            None => e_i,
        };
        Ok((e_u, e_i, x))
    }

    /// `l_j = ReLU(l_{j-1} W_j + b_j)`, with `modulate(j, l_j)` applied to
    /// each layer output before it feeds the next layer, then the head.
    pub fn forward_with(
        &self,
        g: &mut Graph<'_>,
        e_u: Option<Var>,
        e_i: Var,
        mut modulate: impl FnMut(usize, &mut Graph<'_>, Var) -> Result<Var>,
    ) -> Result<BackboneActivations> {
        let input = match e_u {
            Some(u) => g.tape.concat(&[u, e_i], 1)?,
            None => e_i,
        };
        let mut x = input;
        let mut layers = Vec::with_capacity(self.hidden.len());
        for (j, layer) in self.hidden.iter().enumerate() {
            let pre = layer.forward(g, x)?;
            let l = g.tape.relu(pre);
            x = modulate(j, g, l)?;
            layers.push(x);
        }
        let score = match &self.head {
            Some(head) => Some(head.forward(g, x)?),
            None => None,
        };
        Ok(BackboneActivations {
            e_u,
            e_i,
            layers,
            h: x,
            score,
        })
    }

    /// Unmodulated forward pass.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        e_u: Option<Var>,
        e_i: Var,
    ) -> Result<BackboneActivations> {
        self.forward_with(g, e_u, e_i, |_, _, l| Ok(l))
    }

    /// Scores of the unmodulated backbone for a batch of examples.
    pub fn score(&self, g: &mut Graph<'_>, examples: &[Example]) -> Result<Var> {
        let (e_u, e_i, _) = self.embed_examples(g, examples)?;
        self.forward(g, e_u, e_i)?
            .score
            .ok_or_else(|| Error::Config("backbone has no scoring head".into()))
    }
}
