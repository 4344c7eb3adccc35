//! Dense layers built from tape primitives.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{Graph, Group, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

/// `y = x W + b` with `W: [input, output]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        group: Group,
        input: usize,
        output: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = params.add_glorot(&format!("{name}.weight"), group, input, output, rng)?;
        let bias = params.add(
            &format!("{name}.bias"),
            group,
            Tensor::zeros(&[output]),
            true,
        )?;
        Ok(Self {
            weight,
            bias,
            input,
            output,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let cols = g.value(x).cols();
        if cols != self.input {
            return Err(Error::shape(
                "linear",
                g.value(x).shape(),
                &[self.input, self.output],
            ));
        }
        let (w, b) = (g.param(self.weight), g.param(self.bias));
        let xw = g.tape.matmul(x, w)?;
        g.tape.add(xw, b)
    }

    pub fn weight_count(&self) -> usize {
        self.input * self.output
    }
}

/// ReLU-activated stack; the last layer stays linear unless
/// `activate_last` is set.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activate_last: bool,
}

impl Mlp {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        group: Group,
        input: usize,
        hidden: &[usize],
        output: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        if widths.contains(&0) {
            return Err(Error::Config(format!(
                "{name}: layer widths must be positive, got {widths:?}"
            )));
        }
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{name}.{i}"), group, w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            activate_last: false,
        })
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i < last || self.activate_last {
                x = g.tape.relu(x);
            }
        }
        Ok(x)
    }

    pub fn output(&self) -> usize {
        self.layers.last().map_or(0, |l| l.output)
    }

    pub fn input(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input)
    }
}
