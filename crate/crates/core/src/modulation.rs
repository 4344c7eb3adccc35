//! Context-conditioned modulation of the backbone: a generated scoring
//! head, sigmoid gates or FiLM per hidden layer, and soft modularization.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Graph, Group, ParamSet};
use crate::rng::Rng;
use crate::tape::Var;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModulationVariant {
    Weight,
    #[serde(rename = "sigmoid")]
    SigmoidLayer,
    Film,
    #[serde(rename = "soft")]
    SoftModular,
}

impl ModulationVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            ModulationVariant::Weight => "weight",
            ModulationVariant::SigmoidLayer => "sigmoid",
            ModulationVariant::Film => "film",
            ModulationVariant::SoftModular => "soft",
        }
    }

    /// Whether the backbone keeps its own hidden stack and head.
    pub fn backbone_stack(self) -> (bool, bool) {
        match self {
            ModulationVariant::Weight => (true, false),
            ModulationVariant::SigmoidLayer | ModulationVariant::Film => (true, true),
            ModulationVariant::SoftModular => (false, false),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftModularConfig {
    pub layers: usize,
    pub modules: usize,
    pub width: usize,
    pub route_hidden: usize,
}

impl Default for SoftModularConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            modules: 4,
            width: 32,
            route_hidden: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModulationConfig {
    pub variant: ModulationVariant,
    pub hyper_hidden: Vec<usize>,
    pub soft: SoftModularConfig,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            variant: ModulationVariant::Film,
            hyper_hidden: vec![64, 64, 64],
            soft: SoftModularConfig::default(),
        }
    }
}

/// Route probabilities of one example: `layers` matrices of `m x m`,
/// row-major with entry `[to, from]`; every column sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteTensor {
    pub layers: usize,
    pub modules: usize,
    pub values: Vec<f64>,
}

impl RouteTensor {
    pub fn get(&self, layer: usize, from: usize, to: usize) -> f64 {
        let m = self.modules;
        self.values[layer * m * m + to * m + from]
    }

    /// Largest deviation of any column sum from 1.
    pub fn column_error(&self) -> f64 {
        let m = self.modules;
        let mut worst: f64 = 0.0;
        for l in 0..self.layers {
            for from in 0..m {
                let s: f64 = (0..m).map(|to| self.get(l, from, to)).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }

    /// Reads example `row` out of per-layer route values `[n, m*m]`.
    pub fn from_layers(g: &Graph<'_>, routes: &[Var], modules: usize, row: usize) -> Self {
        let values = routes
            .iter()
            .flat_map(|&r| g.value(r).row(row).to_vec())
            .collect();
        Self {
            layers: routes.len(),
            modules,
            values,
        }
    }

    /// Elementwise mean over examples; columns still sum to 1.
    pub fn mean(routes: &[RouteTensor]) -> Result<Self> {
        let first = routes.first().ok_or(Error::Empty("routes"))?;
        let mut values = vec![0.0; first.values.len()];
        for r in routes {
            if r.values.len() != values.len() {
                return Err(Error::shape(
                    "route_mean",
                    &[r.values.len()],
                    &[values.len()],
                ));
            }
            for (acc, v) in values.iter_mut().zip(&r.values) {
                *acc += v;
            }
        }
        let n = routes.len() as f64;
        values.iter_mut().for_each(|v| *v /= n);
        Ok(Self {
            layers: first.layers,
            modules: first.modules,
            values,
        })
    }
}

/// Soft modularization: a base network of `layers x modules` blocks whose
/// outputs are mixed by per-example routes from a route network.
///
/// The base network projects `concat(e_u, e_i)` to width `d` and feeds the
/// same vector to every first-layer module. At layer `l` module `j`
/// transforms the previous output `ob^{l-1}_j` to `ReLU(ob W_lj + b_lj)`, and
/// `ob^l_to = sum_from p^l[to, from] * out_from`. The last layer's module
/// outputs are averaged and mapped to a score.
#[derive(Debug, Clone)]
pub struct SoftModular {
    pub config: SoftModularConfig,
    pub input: Linear,
    pub modules: Vec<Vec<Linear>>,
    pub head: Linear,
    pub route_trunk: Vec<Linear>,
    pub route_heads: Vec<Linear>,
}

impl SoftModular {
    pub fn new(
        params: &mut ParamSet,
        cfg: SoftModularConfig,
        input_dim: usize,
        context_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let SoftModularConfig {
            layers: k,
            modules: m,
            width: d,
            route_hidden,
        } = cfg;
        if k == 0 || m == 0 || d == 0 || route_hidden == 0 {
            return Err(Error::Config(format!(
                "soft modularization sizes must be positive, got {cfg:?}"
            )));
        }
        let input = Linear::new(params, "base.input", Group::Backbone, input_dim, d, rng)?;
        let mut modules = Vec::with_capacity(k);
        for l in 0..k {
            let layer = (0..m)
                .map(|j| {
                    Linear::new(
                        params,
                        &format!("base.layer{l}.module{j}"),
                        Group::Backbone,
                        d,
                        d,
                        rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            modules.push(layer);
        }
        let head = Linear::new(params, "base.head", Group::Backbone, d, 1, rng)?;
        let mut route_trunk = Vec::with_capacity(k.saturating_sub(1));
        let mut route_heads = Vec::with_capacity(k);
        let mut width = context_dim;
        for l in 0..k {
            route_heads.push(Linear::new(
                params,
                &format!("route.head{l}"),
                Group::Meta,
                width,
                m * m,
                rng,
            )?);
            if l + 1 < k {
                route_trunk.push(Linear::new(
                    params,
                    &format!("route.hidden{l}"),
                    Group::Meta,
                    width,
                    route_hidden,
                    rng,
                )?);
                width = route_hidden;
            }
        }
        let sm = Self {
            config: cfg,
            input,
            modules,
            head,
            route_trunk,
            route_heads,
        };
        sm.check_parity()?;
        Ok(sm)
    }

    /// Module weights in each base layer, counted from the built shapes.
    pub fn layer_weight_counts(&self) -> Vec<usize> {
        self.modules
            .iter()
            .map(|layer| layer.iter().map(Linear::weight_count).sum())
            .collect()
    }

    /// Each layer holds exactly the diagonal blocks of a dense
    /// `(m*d) x (m*d)` layer: `m` blocks of `d x d`.
    fn check_parity(&self) -> Result<()> {
        let (m, d) = (self.config.modules, self.config.width);
        let dense_blocks = (m * d) * (m * d) / m;
        for (l, count) in self.layer_weight_counts().into_iter().enumerate() {
            if count != dense_blocks {
                return Err(Error::Config(format!(
                    "base layer {l} has {count} weights, expected {dense_blocks}"
                )));
            }
        }
        Ok(())
    }

    /// Route probabilities per layer, each `[n, m*m]`.
    pub fn routes(&self, g: &mut Graph<'_>, c_h: Var) -> Result<Vec<Var>> {
        let m = self.config.modules;
        let mut h = c_h;
        let mut out = Vec::with_capacity(self.route_heads.len());
        for (l, head) in self.route_heads.iter().enumerate() {
            let logits = head.forward(g, h)?;
            out.push(g.tape.softmax_blocks(logits, m)?);
            if let Some(layer) = self.route_trunk.get(l) {
                let pre = layer.forward(g, h)?;
                h = g.tape.relu(pre);
            }
        }
        Ok(out)
    }

    /// Returns scores `[n, 1]` and the per-layer routes.
    pub fn forward(&self, g: &mut Graph<'_>, c_h: Var, x: Var) -> Result<(Var, Vec<Var>)> {
        let (n, nc) = (g.value(x).rows(), g.value(c_h).rows());
        if n != nc {
            return Err(Error::shape(
                "soft_modular",
                g.value(x).shape(),
                g.value(c_h).shape(),
            ));
        }
        let m = self.config.modules;
        let routes = self.routes(g, c_h)?;
        let x0 = self.input.forward(g, x)?;
        let mut ob = vec![x0; m];
        for (l, layer) in self.modules.iter().enumerate() {
            let mut outs = Vec::with_capacity(m);
            for (j, module) in layer.iter().enumerate() {
                let pre = module.forward(g, ob[j])?;
                outs.push(g.tape.relu(pre));
            }
            let mut next = Vec::with_capacity(m);
            for to in 0..m {
                let mut acc = None;
                for (from, &out) in outs.iter().enumerate() {
                    let p = g.tape.slice_cols(routes[l], to * m + from, 1)?;
                    let term = g.tape.scale_rows(out, p)?;
                    acc = Some(match acc {
                        None => term,
                        Some(a) => g.tape.add(a, term)?,
                    });
                }
                next.push(acc.expect("at least one module"));
            }
            ob = next;
        }
        let mut sum = ob[0];
        for &o in &ob[1..] {
            sum = g.tape.add(sum, o)?;
        }
        let mean = g.tape.affine(sum, 1.0 / m as f64, 0.0);
        let score = self.head.forward(g, mean)?;
        Ok((score, routes))
    }
}

/// The meta-network that turns `C_h` into modulation signals.
#[derive(Debug, Clone)]
pub enum Modulator {
    /// Generates `(w_h, b_h)` for the scoring head.
    Weight(Mlp),
    /// Generates one gate pre-activation per hidden unit.
    Sigmoid(Mlp),
    /// Generates `(gamma, beta)` per hidden unit: all gammas first, then all
    /// betas.
    Film(Mlp),
    Soft(SoftModular),
}

impl Modulator {
    /// `backbone` must have been built with the stack flags of
    /// [`ModulationVariant::backbone_stack`].
    pub fn new(
        params: &mut ParamSet,
        cfg: &ModulationConfig,
        backbone: &Backbone,
        context_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let widths = backbone.layer_widths();
        let total: usize = widths.iter().sum();
        let hyper = |params: &mut ParamSet, out: usize, rng: &mut Rng| {
            Mlp::new(
                params,
                "hyper.mlp",
                Group::Meta,
                context_dim,
                &cfg.hyper_hidden,
                out,
                rng,
            )
        };
        Ok(match cfg.variant {
            ModulationVariant::Weight => {
                let h = *widths.last().ok_or_else(|| {
                    Error::Config("weight modulation needs a hidden stack".into())
                })?;
                Modulator::Weight(hyper(params, h + 1, rng)?)
            }
            ModulationVariant::SigmoidLayer => Modulator::Sigmoid(hyper(params, total, rng)?),
            ModulationVariant::Film => {
                let mlp = hyper(params, 2 * total, rng)?;
                // Start from the identity modulation: gamma = 1, beta = 0.
                let bias = params.get_mut(mlp.layers.last().expect("nonempty mlp").bias);
                bias.values_mut()[..total].iter_mut().for_each(|v| *v = 1.0);
                Modulator::Film(mlp)
            }
            ModulationVariant::SoftModular => Modulator::Soft(SoftModular::new(
                params,
                cfg.soft,
                backbone.input_dim(),
                context_dim,
                rng,
            )?),
        })
    }

    /// Scores `[n, 1]` for `n` pairs with conditioning rows `c_h: [n, d_h]`.
    /// Soft modularization also returns its routes.
    pub fn score(
        &self,
        g: &mut Graph<'_>,
        backbone: &Backbone,
        c_h: Var,
        e_u: Option<Var>,
        e_i: Var,
    ) -> Result<(Var, Option<Vec<Var>>)> {
        match self {
            Modulator::Weight(mlp) => {
                let acts = backbone.forward(g, e_u, e_i)?;
                let wb = mlp.forward(g, c_h)?;
                Ok((weight_modulation(g, wb, acts.h)?, None))
            }
            Modulator::Sigmoid(mlp) => {
                let pre = mlp.forward(g, c_h)?;
                let gates = g.tape.sigmoid(pre);
                Ok((layer_mod_sigmoid(g, backbone, gates, e_u, e_i)?, None))
            }
            Modulator::Film(mlp) => {
                let gb = mlp.forward(g, c_h)?;
                Ok((layer_mod_film(g, backbone, gb, e_u, e_i)?, None))
            }
            Modulator::Soft(sm) => {
                let x = match e_u {
                    Some(u) => g.tape.concat(&[u, e_i], 1)?,
                    None => e_i,
                };
                let (score, routes) = sm.forward(g, c_h, x)?;
                Ok((score, Some(routes)))
            }
        }
    }
}

/// `score = w_h · h + b_h` with `wb = [w_h | b_h]` per row.
pub fn weight_modulation(g: &mut Graph<'_>, wb: Var, h: Var) -> Result<Var> {
    let hd = g.value(h).cols();
    if g.value(wb).cols() != hd + 1 || g.value(wb).rows() != g.value(h).rows() {
        return Err(Error::shape(
            "weight_modulation",
            g.value(wb).shape(),
            g.value(h).shape(),
        ));
    }
    let w = g.tape.slice_cols(wb, 0, hd)?;
    let b = g.tape.slice_cols(wb, hd, 1)?;
    let wh = g.tape.mul(w, h)?;
    let dot = g.tape.sum_cols(wh);
    g.tape.add(dot, b)
}

fn check_width(
    g: &Graph<'_>,
    op: &'static str,
    signal: Var,
    backbone: &Backbone,
    per_unit: usize,
) -> Result<usize> {
    let total: usize = backbone.layer_widths().iter().sum();
    if g.value(signal).cols() != per_unit * total {
        return Err(Error::shape(
            op,
            g.value(signal).shape(),
            &[g.value(signal).rows(), per_unit * total],
        ));
    }
    Ok(total)
}

/// `o_i = gates_i ⊙ l_i` per hidden layer, where `gates` holds every layer's
/// gates side by side.
pub fn layer_mod_sigmoid(
    g: &mut Graph<'_>,
    backbone: &Backbone,
    gates: Var,
    e_u: Option<Var>,
    e_i: Var,
) -> Result<Var> {
    check_width(g, "layer_mod_sigmoid", gates, backbone, 1)?;
    let offsets = offsets(&backbone.layer_widths());
    let acts = backbone.forward_with(g, e_u, e_i, |j, g, l| {
        let width = g.value(l).cols();
        let gate = g.tape.slice_cols(gates, offsets[j], width)?;
        g.tape.mul(gate, l)
    })?;
    acts.score
        .ok_or_else(|| Error::Config("backbone has no scoring head".into()))
}

/// `o_i = gamma_i ⊙ l_i + beta_i` per hidden layer; `gb` holds all gammas
/// then all betas.
pub fn layer_mod_film(
    g: &mut Graph<'_>,
    backbone: &Backbone,
    gb: Var,
    e_u: Option<Var>,
    e_i: Var,
) -> Result<Var> {
    let total = check_width(g, "layer_mod_film", gb, backbone, 2)?;
    let offsets = offsets(&backbone.layer_widths());
    let acts = backbone.forward_with(g, e_u, e_i, |j, g, l| {
        let width = g.value(l).cols();
        let gamma = g.tape.slice_cols(gb, offsets[j], width)?;
        let beta = g.tape.slice_cols(gb, total + offsets[j], width)?;
        let scaled = g.tape.mul(gamma, l)?;
        g.tape.add(scaled, beta)
    })?;
    acts.score
        .ok_or_else(|| Error::Config("backbone has no scoring head".into()))
}

fn offsets(widths: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    widths
        .iter()
        .map(|w| {
            let o = acc;
            acc += w;
            o
        })
        .collect()
}
