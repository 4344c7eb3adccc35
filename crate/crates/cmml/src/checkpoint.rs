//! Plain-text checkpoint archive.
//!
//! ```text
//! cmml-checkpoint 1
//! epoch <n>
//! adam <lr> <beta1> <beta2> <epsilon> <step>
//! config <line count>
//! <run config as TOML>
//! params <count>
//! param <name> <group> <trainable|frozen> <d0>x<d1>...
//! value <row-major values>
//! m <first moments>
//! v <second moments>
//! end
//! ```
//!
//! Numbers use the shortest decimal form that parses back to the same bits,
//! so load followed by save reproduces the file byte for byte.

use std::fmt::Write as _;
use std::path::Path;

use cmml_core::optim::{AdamConfig, AdamState};
use cmml_core::{Group, ParamSet, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "cmml-checkpoint";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamSet,
    pub adam: AdamState,
}

fn join(values: &[f64]) -> String {
    let mut s = String::with_capacity(values.len() * 20);
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        write!(s, "{v}").expect("writing to a String");
    }
    s
}

fn bad(line: usize, what: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("line {}: {what}", line + 1))
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        let (n, l) = self
            .inner
            .next()
            .ok_or_else(|| bad(self.last + 1, "unexpected end of file"))?;
        self.last = n;
        Ok((n, l))
    }

    /// Next line, which must start with `key `; returns the remainder.
    fn keyed(&mut self, key: &str) -> Result<(usize, &'a str)> {
        let (n, l) = self.next()?;
        match l.strip_prefix(key) {
            Some("") => Ok((n, "")),
            Some(rest) if rest.starts_with(' ') => Ok((n, &rest[1..])),
            _ => Err(bad(n, format!("expected `{key}`"))),
        }
    }
}

fn number<T: std::str::FromStr>(line: usize, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| bad(line, format!("bad number {raw:?}")))
}

fn numbers(line: usize, raw: &str, expected: usize) -> Result<Vec<f64>> {
    let v = raw
        .split_ascii_whitespace()
        .map(|t| number(line, t))
        .collect::<Result<Vec<f64>>>()?;
    if v.len() != expected {
        return Err(bad(
            line,
            format!("expected {expected} values, found {}", v.len()),
        ));
    }
    Ok(v)
}

impl Checkpoint {
    pub fn new(config: RunConfig, epoch: usize, params: ParamSet, adam: AdamState) -> Result<Self> {
        if adam.m.len() != params.len() || adam.v.len() != params.len() {
            return Err(Error::Checkpoint(
                "optimizer state does not match the parameters".into(),
            ));
        }
        Ok(Self {
            config,
            epoch,
            params,
            adam,
        })
    }

    pub fn to_text(&self) -> Result<String> {
        let config = self.config.to_toml()?;
        let a = &self.adam;
        let c = a.config;
        let mut s = String::new();
        writeln!(s, "{MAGIC} {FORMAT_VERSION}").ok();
        writeln!(s, "epoch {}", self.epoch).ok();
        writeln!(
            s,
            "adam {} {} {} {} {}",
            c.lr, c.beta1, c.beta2, c.epsilon, a.step
        )
        .ok();
        writeln!(s, "config {}", config.lines().count()).ok();
        for line in config.lines() {
            writeln!(s, "{line}").ok();
        }
        writeln!(s, "params {}", self.params.len()).ok();
        for (id, e) in self.params.iter() {
            let shape: Vec<String> = e.value.shape().iter().map(usize::to_string).collect();
            let trainable = if e.trainable { "trainable" } else { "frozen" };
            writeln!(
                s,
                "param {} {} {trainable} {}",
                e.name,
                e.group.as_str(),
                shape.join("x")
            )
            .ok();
            writeln!(s, "value {}", join(e.value.values())).ok();
            writeln!(s, "m {}", join(a.m[id.index()].values())).ok();
            writeln!(s, "v {}", join(a.v[id.index()].values())).ok();
        }
        writeln!(s, "end").ok();
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = Lines {
            inner: text.lines().enumerate(),
            last: 0,
        };
        let (n, version) = lines.keyed(MAGIC)?;
        if number::<u32>(n, version)? != FORMAT_VERSION {
            return Err(bad(n, format!("unsupported format version {version}")));
        }
        let (n, epoch) = lines.keyed("epoch")?;
        let epoch = number(n, epoch)?;
        let (n, adam) = lines.keyed("adam")?;
        let fields: Vec<&str> = adam.split(' ').collect();
        if fields.len() != 5 {
            return Err(bad(n, "adam line needs lr, beta1, beta2, epsilon and step"));
        }
        let adam_config = AdamConfig {
            lr: number(n, fields[0])?,
            beta1: number(n, fields[1])?,
            beta2: number(n, fields[2])?,
            epsilon: number(n, fields[3])?,
        };
        let step = number(n, fields[4])?;
        let (n, count) = lines.keyed("config")?;
        let count: usize = number(n, count)?;
        let mut toml = String::new();
        for _ in 0..count {
            toml.push_str(lines.next()?.1);
            toml.push('\n');
        }
        let config = RunConfig::from_toml(&toml)?;
        let (n, count) = lines.keyed("params")?;
        let count: usize = number(n, count)?;
        let mut params = ParamSet::new();
        let (mut m, mut v) = (Vec::with_capacity(count), Vec::with_capacity(count));
        for _ in 0..count {
            let (n, header) = lines.keyed("param")?;
            let f: Vec<&str> = header.split(' ').collect();
            if f.len() != 4 {
                return Err(bad(
                    n,
                    "param line needs name, group, trainability and shape",
                ));
            }
            let group = match f[1] {
                "backbone" => Group::Backbone,
                "meta" => Group::Meta,
                g => return Err(bad(n, format!("unknown group {g:?}"))),
            };
            let trainable = match f[2] {
                "trainable" => true,
                "frozen" => false,
                t => return Err(bad(n, format!("unknown trainability {t:?}"))),
            };
            let shape = f[3]
                .split('x')
                .map(|d| number(n, d))
                .collect::<Result<Vec<usize>>>()?;
            let len: usize = shape.iter().product();
            let mut read = |key: &str| -> Result<Tensor> {
                let (n, raw) = lines.keyed(key)?;
                Ok(Tensor::new(shape.clone(), numbers(n, raw, len)?)?)
            };
            let value = read("value")?;
            m.push(read("m")?);
            v.push(read("v")?);
            params
                .add(f[0], group, value, trainable)
                .map_err(|e| bad(n, e))?;
        }
        let (n, end) = lines.next()?;
        if end != "end" {
            return Err(bad(n, "expected `end`"));
        }
        let adam = AdamState {
            config: adam_config,
            step,
            m,
            v,
        };
        Self::new(config, epoch, params, adam)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_text(path, &self.to_text()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cmml_core::rng::rng_stream;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        let mut rng = rng_stream(5, 1);
        params
            .add_glorot("a.weight", Group::Backbone, 3, 2, &mut rng)
            .unwrap();
        params
            .add(
                "a.bias",
                Group::Meta,
                Tensor::vector(vec![-0.0, 1e-300, 0.1 + 0.2]).unwrap(),
                true,
            )
            .unwrap();
        params
            .add(
                "table",
                Group::Backbone,
                Tensor::filled(&[2, 2], 1.0 / 3.0),
                false,
            )
            .unwrap();
        let mut adam = AdamState::new(&params, AdamConfig::default());
        adam.step = 7;
        adam.m[0].values_mut()[1] = 2.5e-9;
        Checkpoint::new(RunConfig::default(), 3, params, adam).unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let ck = sample();
        let first = ck.to_text().unwrap();
        let back = Checkpoint::from_text(&first).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_text().unwrap(), first);
        for (a, b) in ck.params.iter().zip(back.params.iter()) {
            let bits = |t: &Tensor| t.values().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.1.value), bits(&b.1.value));
        }
    }

    #[test]
    fn truncated_or_corrupt_files_fail() {
        let text = sample().to_text().unwrap();
        assert!(Checkpoint::from_text(&text[..text.len() / 2]).is_err());
        assert!(
            Checkpoint::from_text(&text.replace("cmml-checkpoint 1", "cmml-checkpoint 9")).is_err()
        );
        assert!(Checkpoint::from_text(&text.replace(
            "param table backbone frozen 2x2",
            "param table backbone frozen 2x3"
        ))
        .is_err());
    }
}
