//! Context encoders that summarize a support set into a task vector `C`,
//! and hybrid generators that refine `C` per query pair into `C_h`.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{Graph, Group, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderVariant {
    PoolingMean,
    PoolingMax,
    Sequential,
}

impl EncoderVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderVariant::PoolingMean => "pooling-mean",
            EncoderVariant::PoolingMax => "pooling-max",
            EncoderVariant::Sequential => "sequential",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub variant: EncoderVariant,
    pub mlp_hidden: Vec<usize>,
    pub gru_hidden: usize,
    /// Width of `C`; `None` means the width of `concat(e_u, e_i)`.
    pub context_dim: Option<usize>,
    /// Append each support label to its pair's encoder input.
    pub use_labels: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            variant: EncoderVariant::Sequential,
            mlp_hidden: vec![128, 128],
            gru_hidden: 128,
            context_dim: None,
            use_labels: true,
        }
    }
}

/// Rows `concat(e_u, e_i[, label])` for every support pair.
pub fn encoder_input(g: &mut Graph<'_>, x: Var, labels: &[f64], use_labels: bool) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::Empty("support"));
    }
    if g.value(x).rows() != labels.len() {
        return Err(Error::shape(
            "encoder_input",
            g.value(x).shape(),
            &[labels.len(), 1],
        ));
    }
    if !use_labels {
        return Ok(x);
    }
    let y = g.constant(Tensor::matrix(labels.len(), 1, labels.to_vec())?);
    g.tape.concat(&[x, y], 1)
}

/// Gated recurrent cell. Fused gate weights are laid out `[r | z | n]`:
///
/// ```text
/// r  = σ(x W_ir + b_ir + h W_hr + b_hr)
/// z  = σ(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl GruCell {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        group: Group,
        input: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::Config(format!("{name}: GRU sizes must be positive")));
        }
        let w_input =
            params.add_glorot(&format!("{name}.w_input"), group, input, 3 * hidden, rng)?;
        let w_hidden =
            params.add_glorot(&format!("{name}.w_hidden"), group, hidden, 3 * hidden, rng)?;
        let b_input = params.add(
            &format!("{name}.b_input"),
            group,
            Tensor::zeros(&[3 * hidden]),
            true,
        )?;
        let b_hidden = params.add(
            &format!("{name}.b_hidden"),
            group,
            Tensor::zeros(&[3 * hidden]),
            true,
        )?;
        Ok(Self {
            w_input,
            w_hidden,
            b_input,
            b_hidden,
            input,
            hidden,
        })
    }

    /// One step from the input projection `x W_i + b_i` of a single row.
    fn step(&self, g: &mut Graph<'_>, xp: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let (wh, bh) = (g.param(self.w_hidden), g.param(self.b_hidden));
        let hw = g.tape.matmul(h, wh)?;
        let hp = g.tape.add(hw, bh)?;
        let gate = |g: &mut Graph<'_>, k: usize| -> Result<Var> {
            let a = g.tape.slice_cols(xp, k * hd, hd)?;
            let b = g.tape.slice_cols(hp, k * hd, hd)?;
            let s = g.tape.add(a, b)?;
            Ok(g.tape.sigmoid(s))
        };
        let r = gate(g, 0)?;
        let z = gate(g, 1)?;
        let xn = g.tape.slice_cols(xp, 2 * hd, hd)?;
        let hn = g.tape.slice_cols(hp, 2 * hd, hd)?;
        let rh = g.tape.mul(r, hn)?;
        let pre = g.tape.add(xn, rh)?;
        let n = g.tape.tanh(pre);
        let diff = g.tape.sub(h, n)?;
        let zd = g.tape.mul(z, diff)?;
        g.tape.add(n, zd)
    }

    /// Runs the cell over the rows of `xs` from a zero state and returns the
    /// final hidden state `[1, hidden]`.
    pub fn run(&self, g: &mut Graph<'_>, xs: Var) -> Result<Var> {
        let n = g.value(xs).rows();
        if g.value(xs).cols() != self.input {
            return Err(Error::shape("gru", g.value(xs).shape(), &[n, self.input]));
        }
        let (wi, bi) = (g.param(self.w_input), g.param(self.b_input));
        let xw = g.tape.matmul(xs, wi)?;
        let proj = g.tape.add(xw, bi)?;
        let mut h = g.constant(Tensor::zeros(&[1, self.hidden]));
        for t in 0..n {
            let xp = g.tape.gather(proj, &[t])?;
            h = self.step(g, xp, h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub enum ContextEncoder {
    Pooling { mlp: Mlp, max: bool },
    Sequential { gru: GruCell, mlp: Mlp },
}

impl ContextEncoder {
    /// `input_dim` is the width of one encoder input row.
    pub fn new(
        params: &mut ParamSet,
        cfg: &EncoderConfig,
        input_dim: usize,
        context_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match cfg.variant {
            EncoderVariant::PoolingMean | EncoderVariant::PoolingMax => ContextEncoder::Pooling {
                mlp: Mlp::new(
                    params,
                    "encoder.mlp",
                    Group::Meta,
                    input_dim,
                    &cfg.mlp_hidden,
                    context_dim,
                    rng,
                )?,
                max: cfg.variant == EncoderVariant::PoolingMax,
            },
            EncoderVariant::Sequential => {
                let gru = GruCell::new(
                    params,
                    "encoder.gru",
                    Group::Meta,
                    input_dim,
                    cfg.gru_hidden,
                    rng,
                )?;
                let mlp = Mlp::new(
                    params,
                    "encoder.mlp",
                    Group::Meta,
                    cfg.gru_hidden,
                    &cfg.mlp_hidden,
                    context_dim,
                    rng,
                )?;
                ContextEncoder::Sequential { gru, mlp }
            }
        })
    }

    pub fn context_dim(&self) -> usize {
        match self {
            ContextEncoder::Pooling { mlp, .. } | ContextEncoder::Sequential { mlp, .. } => {
                mlp.output()
            }
        }
    }

    /// Encodes support rows `[n, input_dim]` into a single-row `C` of width `d_c`.
    pub fn encode(&self, g: &mut Graph<'_>, rows: Var) -> Result<Var> {
        match self {
            ContextEncoder::Pooling { mlp, max } => encode_pooling(g, mlp, *max, rows),
            ContextEncoder::Sequential { gru, mlp } => encode_sequential(g, gru, mlp, rows),
        }
    }
}

/// `C_k = MLP(row_k)`, then the mean or max over `k`.
pub fn encode_pooling(g: &mut Graph<'_>, mlp: &Mlp, max: bool, rows: Var) -> Result<Var> {
    let ck = mlp.forward(g, rows)?;
    Ok(if max {
        g.tape.max_pool_rows(ck)
    } else {
        g.tape.mean_pool_rows(ck)
    })
}

/// `C = MLP(h_n)` with `h_n` the GRU's final state over the support rows.
pub fn encode_sequential(g: &mut Graph<'_>, gru: &GruCell, mlp: &Mlp, rows: Var) -> Result<Var> {
    let h = gru.run(g, rows)?;
    mlp.forward(g, h)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorVariant {
    Dot,
    Mlp,
    /// No per-pair refinement: every query row is conditioned on `C` itself.
    None,
}

impl GeneratorVariant {
    pub fn as_str(self) -> &'static str {
        match self {
            GeneratorVariant::Dot => "dot",
            GeneratorVariant::Mlp => "mlp",
            GeneratorVariant::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub variant: GeneratorVariant,
    pub mlp_hidden: Vec<usize>,
    /// Width of `C_h` for the MLP generator; `None` means the width of
    /// `concat(e_u, e_i)`.
    pub output_dim: Option<usize>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            variant: GeneratorVariant::Dot,
            mlp_hidden: vec![128],
            output_dim: None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum HybridGenerator {
    Dot,
    Mlp(Mlp),
    /// `C_h = C` for every row; needs the context width.
    Identity(usize),
}

impl HybridGenerator {
    pub fn new(
        params: &mut ParamSet,
        cfg: &GeneratorConfig,
        context_dim: usize,
        pair_dim: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(match cfg.variant {
            GeneratorVariant::Dot => {
                if context_dim != pair_dim {
                    return Err(Error::Config(format!(
                        "dot generator needs context dim {context_dim} to equal embedding dim {pair_dim}"
                    )));
                }
                HybridGenerator::Dot
            }
            GeneratorVariant::Mlp => {
                let out = cfg.output_dim.unwrap_or(pair_dim);
                HybridGenerator::Mlp(Mlp::new(
                    params,
                    "generator.mlp",
                    Group::Meta,
                    context_dim + pair_dim,
                    &cfg.mlp_hidden,
                    out,
                    rng,
                )?)
            }
            GeneratorVariant::None => HybridGenerator::Identity(context_dim),
        })
    }

    /// `C_h` per query row, `[n, d_h]`.
    pub fn generate(&self, g: &mut Graph<'_>, c: Var, pairs: Var) -> Result<Var> {
        match self {
            HybridGenerator::Dot => hybrid_dot(g, c, pairs),
            HybridGenerator::Mlp(mlp) => hybrid_mlp(g, mlp, c, pairs),
            HybridGenerator::Identity(_) => {
                let n = g.value(pairs).rows();
                g.tape.gather(c, &vec![0; n])
            }
        }
    }

    pub fn output_dim(&self, pair_dim: usize) -> usize {
        match self {
            HybridGenerator::Dot => pair_dim,
            HybridGenerator::Mlp(mlp) => mlp.output(),
            HybridGenerator::Identity(d) => *d,
        }
    }
}

/// `C_h = C ⊙ concat(e_u, e_i)` for each row of `pairs`.
pub fn hybrid_dot(g: &mut Graph<'_>, c: Var, pairs: Var) -> Result<Var> {
    let (dc, dp) = (g.value(c).cols(), g.value(pairs).cols());
    if g.value(c).rows() != 1 || dc != dp {
        return Err(Error::shape(
            "hybrid_dot",
            g.value(c).shape(),
            g.value(pairs).shape(),
        ));
    }
    g.tape.mul(pairs, c)
}

/// `C_h = MLP(concat(C, e_u, e_i))` for each row of `pairs`.
pub fn hybrid_mlp(g: &mut Graph<'_>, mlp: &Mlp, c: Var, pairs: Var) -> Result<Var> {
    if g.value(c).rows() != 1 {
        return Err(Error::shape(
            "hybrid_mlp",
            g.value(c).shape(),
            g.value(pairs).shape(),
        ));
    }
    let n = g.value(pairs).rows();
    let tiled = g.tape.gather(c, &vec![0; n])?;
    let x = g.tape.concat(&[tiled, pairs], 1)?;
    mlp.forward(g, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{rng_stream, uniform};
    use proptest::prelude::*;

    fn random_rows(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = rng_stream(seed, 77);
        Tensor::matrix(
            n,
            d,
            (0..n * d).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
        )
        .unwrap()
    }

    fn encoder(variant: EncoderVariant, input: usize) -> (ParamSet, ContextEncoder) {
        let mut p = ParamSet::new();
        let cfg = EncoderConfig {
            variant,
            mlp_hidden: vec![8, 8],
            gru_hidden: 5,
            ..EncoderConfig::default()
        };
        let e = ContextEncoder::new(&mut p, &cfg, input, 4, &mut rng_stream(1, 2)).unwrap();
        (p, e)
    }

    fn encode(p: &ParamSet, e: &ContextEncoder, rows: Tensor) -> Vec<f64> {
        let mut g = Graph::inference(p);
        let x = g.constant(rows);
        let c = e.encode(&mut g, x).unwrap();
        g.value(c).values().to_vec()
    }

    fn permute(rows: &Tensor, perm: &[usize]) -> Tensor {
        let data: Vec<Vec<f64>> = perm.iter().map(|&k| rows.row(k).to_vec()).collect();
        Tensor::from_rows(&data).unwrap()
    }

    #[test]
    fn single_pair_mean_pool_is_mlp_output() {
        let (p, e) = encoder(EncoderVariant::PoolingMean, 3);
        let rows = random_rows(1, 3, 0);
        let ContextEncoder::Pooling { mlp, .. } = &e else {
            unreachable!()
        };
        let mut g = Graph::inference(&p);
        let x = g.constant(rows.clone());
        let direct = mlp.forward(&mut g, x).unwrap();
        assert_eq!(g.value(direct).values(), &encode(&p, &e, rows)[..]);
    }

    #[test]
    fn duplicated_support_keeps_mean() {
        let (p, e) = encoder(EncoderVariant::PoolingMean, 3);
        let rows = random_rows(6, 3, 1);
        let doubled = permute(&rows, &[0, 1, 2, 3, 4, 5, 0, 1, 2, 3, 4, 5]);
        for (a, b) in encode(&p, &e, rows).iter().zip(encode(&p, &e, doubled)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_support_rejected() {
        let p = ParamSet::new();
        let mut g = Graph::inference(&p);
        let x = g.constant(Tensor::zeros(&[1, 2]));
        assert!(encoder_input(&mut g, x, &[], true).is_err());
    }

    #[test]
    fn labels_appended() {
        let p = ParamSet::new();
        let mut g = Graph::inference(&p);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let rows = encoder_input(&mut g, x, &[5.0, -1.0], true).unwrap();
        assert_eq!(g.value(rows).values(), &[1.0, 2.0, 5.0, 3.0, 4.0, -1.0]);
        let rows = encoder_input(&mut g, x, &[5.0, -1.0], false).unwrap();
        assert_eq!(g.value(rows).cols(), 2);
    }

    /// Scalar-loop GRU written independently of the tape.
    fn gru_oracle(p: &ParamSet, cell: &GruCell, xs: &Tensor) -> Vec<f64> {
        let (wi, wh) = (p.get(cell.w_input), p.get(cell.w_hidden));
        let (bi, bh) = (p.get(cell.b_input).values(), p.get(cell.b_hidden).values());
        let hd = cell.hidden;
        let sig = |v: f64| 1.0 / (1.0 + libm::exp(-v));
        let mut h = vec![0.0; hd];
        for t in 0..xs.rows() {
            let x = xs.row(t);
            let lin = |w: &Tensor, v: &[f64], b: &[f64], col: usize| -> f64 {
                v.iter()
                    .enumerate()
                    .map(|(i, vi)| vi * w.get(i, col))
                    .sum::<f64>()
                    + b[col]
            };
            let mut next = vec![0.0; hd];
            for j in 0..hd {
                let r = sig(lin(wi, x, bi, j) + lin(wh, &h, bh, j));
                let z = sig(lin(wi, x, bi, hd + j) + lin(wh, &h, bh, hd + j));
                let n = libm::tanh(lin(wi, x, bi, 2 * hd + j) + r * lin(wh, &h, bh, 2 * hd + j));
                next[j] = (1.0 - z) * n + z * h[j];
            }
            h = next;
        }
        h
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        let mut p = ParamSet::new();
        let cell = GruCell::new(&mut p, "gru", Group::Meta, 3, 4, &mut rng_stream(5, 0)).unwrap();
        let mut rng = rng_stream(6, 0);
        for id in [cell.b_input, cell.b_hidden] {
            for v in p.get_mut(id).values_mut() {
                *v = uniform(&mut rng, -0.5, 0.5);
            }
        }
        let xs = random_rows(3, 3, 9);
        let mut g = Graph::inference(&p);
        let x = g.constant(xs.clone());
        let h = cell.run(&mut g, x).unwrap();
        for (a, b) in g.value(h).values().iter().zip(gru_oracle(&p, &cell, &xs)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gru_keeps_zero_state() {
        let (mut p, e) = encoder(EncoderVariant::Sequential, 3);
        let ContextEncoder::Sequential { gru, mlp } = e.clone() else {
            unreachable!()
        };
        for id in [gru.w_input, gru.w_hidden, gru.b_input, gru.b_hidden] {
            let shape = p.get(id).shape().to_vec();
            *p.get_mut(id) = Tensor::zeros(&shape);
        }
        let mut g = Graph::inference(&p);
        let zero = g.constant(Tensor::zeros(&[1, 5]));
        let expected = mlp.forward(&mut g, zero).unwrap();
        let expected = g.value(expected).values().to_vec();
        assert_eq!(encode(&p, &e, random_rows(4, 3, 3)), expected);
    }

    #[test]
    fn length_one_sequence_is_one_step() {
        let (p, e) = encoder(EncoderVariant::Sequential, 3);
        let ContextEncoder::Sequential { gru, mlp } = &e else {
            unreachable!()
        };
        let xs = random_rows(1, 3, 4);
        let h = gru_oracle(&p, gru, &xs);
        let mut g = Graph::inference(&p);
        let hv = g.constant(Tensor::matrix(1, 5, h).unwrap());
        let expected = mlp.forward(&mut g, hv).unwrap();
        let expected = g.value(expected).values().to_vec();
        for (a, b) in encode(&p, &e, xs).iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn sequential_depends_on_order() {
        let (p, e) = encoder(EncoderVariant::Sequential, 3);
        let rows = random_rows(5, 3, 8);
        assert_ne!(
            encode(&p, &e, rows.clone()),
            encode(&p, &e, permute(&rows, &[4, 3, 2, 1, 0]))
        );
    }

    #[test]
    fn hybrid_dot_cases() {
        let p = ParamSet::new();
        let mut g = Graph::inference(&p);
        let pairs =
            g.constant(Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.25, -4.0]]).unwrap());
        let ones = g.constant(Tensor::vector(vec![1.0; 3]).unwrap());
        let id = hybrid_dot(&mut g, ones, pairs).unwrap();
        assert_eq!(g.value(id).values(), g.value(pairs).values());
        let zero = g.constant(Tensor::vector(vec![0.0; 3]).unwrap());
        let z = hybrid_dot(&mut g, zero, pairs).unwrap();
        assert!(g.value(z).values().iter().all(|&v| v == 0.0));
        let c = g.constant(Tensor::vector(vec![2.0, 0.5, -1.0]).unwrap());
        let h = hybrid_dot(&mut g, c, pairs).unwrap();
        assert_eq!(g.value(h).values(), &[2.0, -1.0, -3.0, 1.0, 0.125, 4.0]);
        let bad = g.constant(Tensor::vector(vec![1.0; 2]).unwrap());
        assert!(hybrid_dot(&mut g, bad, pairs).is_err());
    }

    #[test]
    fn hybrid_mlp_zero_weights_give_bias() {
        let mut p = ParamSet::new();
        let cfg = GeneratorConfig {
            variant: GeneratorVariant::Mlp,
            mlp_hidden: vec![],
            output_dim: Some(5),
        };
        let gen = HybridGenerator::new(&mut p, &cfg, 2, 3, &mut rng_stream(0, 0)).unwrap();
        let HybridGenerator::Mlp(mlp) = &gen else {
            unreachable!()
        };
        let w = mlp.layers[0].weight;
        *p.get_mut(w) = Tensor::zeros(&[5, 5]);
        *p.get_mut(mlp.layers[0].bias) = Tensor::vector(vec![1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        let mut g = Graph::inference(&p);
        let c = g.constant(Tensor::vector(vec![0.3, -0.7]).unwrap());
        let pairs = g.constant(random_rows(3, 3, 2));
        let h = gen.generate(&mut g, c, pairs).unwrap();
        assert_eq!(g.value(h).shape(), &[3, 5]);
        assert_eq!(g.value(h).row(2), &[1.0, 2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn hybrid_mlp_output_dim_and_gradient_wrt_context() {
        let mut p = ParamSet::new();
        let cfg = GeneratorConfig {
            variant: GeneratorVariant::Mlp,
            mlp_hidden: vec![6],
            output_dim: Some(4),
        };
        let gen = HybridGenerator::new(&mut p, &cfg, 3, 2, &mut rng_stream(2, 0)).unwrap();
        assert_eq!(gen.output_dim(2), 4);
        let pairs = random_rows(3, 2, 5);
        let c0 = vec![0.2, -0.4, 0.9];
        let eval = |c: &[f64], grad: bool| -> (f64, Option<Vec<f64>>) {
            let mut g = Graph::inference(&p);
            let cv = g.tape.leaf(Tensor::vector(c.to_vec()).unwrap(), grad);
            let pv = g.constant(pairs.clone());
            let h = gen.generate(&mut g, cv, pv).unwrap();
            let sq = g.tape.mul(h, h).unwrap();
            let s = g.tape.sum(sq);
            let loss = g.value(s).item();
            let d = grad.then(|| {
                g.tape
                    .backward(s)
                    .unwrap()
                    .get(cv)
                    .unwrap()
                    .values()
                    .to_vec()
            });
            (loss, d)
        };
        let (_, Some(analytic)) = eval(&c0, true) else {
            unreachable!()
        };
        for k in 0..3 {
            let mut plus = c0.clone();
            let mut minus = c0.clone();
            plus[k] += 1e-6;
            minus[k] -= 1e-6;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / 2e-6;
            assert!(
                (fd - analytic[k]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{fd} vs {}",
                analytic[k]
            );
        }
    }

    #[test]
    fn identity_generator_tiles_context() {
        let mut p = ParamSet::new();
        let cfg = GeneratorConfig {
            variant: GeneratorVariant::None,
            ..GeneratorConfig::default()
        };
        let gen = HybridGenerator::new(&mut p, &cfg, 2, 3, &mut rng_stream(0, 0)).unwrap();
        assert_eq!((gen.output_dim(3), p.len()), (2, 0));
        let mut g = Graph::inference(&p);
        let c = g.constant(Tensor::vector(vec![0.5, -1.0]).unwrap());
        let pairs = g.constant(random_rows(3, 3, 0));
        let h = gen.generate(&mut g, c, pairs).unwrap();
        assert_eq!(g.value(h).values(), &[0.5, -1.0, 0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn dot_generator_requires_matching_dims() {
        let mut p = ParamSet::new();
        assert!(HybridGenerator::new(
            &mut p,
            &GeneratorConfig::default(),
            4,
            5,
            &mut rng_stream(0, 0)
        )
        .is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn pooling_is_permutation_invariant(seed in 0u64..1000, n in 1usize..12, max in any::<bool>()) {
            let variant = if max { EncoderVariant::PoolingMax } else { EncoderVariant::PoolingMean };
            let (p, e) = encoder(variant, 3);
            let rows = random_rows(n, 3, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            rand::seq::SliceRandom::shuffle(&mut perm[..], &mut rng_stream(seed, 1));
            let a = encode(&p, &e, rows.clone());
            let b = encode(&p, &e, permute(&rows, &perm));
            for (x, y) in a.iter().zip(&b) {
                if max {
                    prop_assert_eq!(x, y);
                } else {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
