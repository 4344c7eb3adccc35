//! Argument handling for the `cmml` binary.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::Result;
use crate::run;

#[derive(Debug, Parser)]
#[command(
    name = "cmml",
    version,
    about = "Contextual modulation meta-learning for cold-start recommendation"
)]
#[command(
    after_help = "Any other `--section.key=value` argument overrides that config entry.\nPrecedence: overrides > config file > defaults."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub encoder: Option<Encoder>,
    #[arg(long, global = true)]
    pub generator: Option<Generator>,
    #[arg(long, global = true)]
    pub modulation: Option<Modulation>,
    #[arg(long, global = true)]
    pub loss: Option<Loss>,
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Checkpoint to read (eval and exports); defaults to the best one.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write synthetic tasks, ratings and item features.
    GenSynthetic,
    /// Build tasks (and optionally pretrained tables) from a ratings CSV.
    Prepare,
    Train,
    /// Score the meta-test tasks.
    Eval,
    /// Time feed-forward against gradient adaptation.
    Bench,
    ExportContext,
    ExportRoutes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Encoder {
    PoolingMean,
    PoolingMax,
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Generator {
    Dot,
    Mlp,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Modulation {
    Weight,
    Sigmoid,
    Film,
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Loss {
    Hinge,
    Mse,
}

const FLAGS: [&str; 10] = [
    "config",
    "seed",
    "encoder",
    "generator",
    "modulation",
    "loss",
    "out",
    "checkpoint",
    "help",
    "version",
];

/// Splits `--key=value` config overrides from the arguments clap handles.
pub fn split_overrides(
    args: impl IntoIterator<Item = OsString>,
) -> (Vec<OsString>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some((key, value)) = a
            .to_str()
            .and_then(|s| s.strip_prefix("--"))
            .and_then(|s| s.split_once('='))
        {
            if !FLAGS.contains(&key) {
                overrides.push((key.to_string(), value.to_string()));
                continue;
            }
        }
        rest.push(a);
    }
    (rest, overrides)
}

fn name<T: ValueEnum>(v: T) -> String {
    v.to_possible_value()
        .expect("no skipped variants")
        .get_name()
        .to_string()
}

impl Cli {
    /// Named flags as overrides, ahead of the free-form ones.
    pub fn config(&self, extra: &[(String, String)]) -> Result<RunConfig> {
        let mut overrides = Vec::new();
        let mut push = |k: &str, v: String| overrides.push((k.to_string(), v));
        if let Some(s) = self.seed {
            push("seed", s.to_string());
        }
        if let Some(v) = self.encoder {
            push("model.encoder.variant", name(v));
        }
        if let Some(v) = self.generator {
            push("model.generator.variant", name(v));
        }
        if let Some(v) = self.modulation {
            push("model.modulation.variant", name(v));
        }
        if let Some(v) = self.loss {
            push("train.loss", name(v));
        }
        if let Some(o) = &self.out {
            push(
                "out",
                toml::Value::String(o.display().to_string()).to_string(),
            );
        }
        overrides.extend_from_slice(extra);
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

/// Runs one command and returns a one-line summary.
pub fn execute(
    command: Command,
    cfg: &RunConfig,
    checkpoint: Option<&std::path::Path>,
) -> Result<String> {
    let out = cfg.out.display();
    Ok(match command {
        Command::GenSynthetic => format!(
            "wrote {} synthetic tasks to {out}",
            run::gen_synthetic(cfg)?
        ),
        Command::Prepare => {
            let s = run::prepare(cfg)?;
            format!(
                "{} interactions ({} rows skipped), {} tasks ({} meta-train) in {out}",
                s.interactions, s.skipped, s.tasks, s.train_tasks
            )
        }
        Command::Train => {
            let s = run::train(cfg)?;
            let last = s.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
            format!(
                "trained {} epochs, final loss {last:.6}, best checkpoint after epoch {}",
                s.epochs.len(),
                s.best_epoch
            )
        }
        Command::Eval => {
            let r = run::eval(cfg, checkpoint)?;
            let parts: Vec<String> = r
                .aggregates()
                .iter()
                .map(|(m, v, _)| format!("{m}={v:.6}"))
                .collect();
            format!(
                "{} over {} tasks",
                parts.join(" "),
                r.aggregates().first().map_or(0, |a| a.2)
            )
        }
        Command::Bench => {
            let r = run::bench(cfg)?;
            let fits: Vec<String> = r
                .fits
                .iter()
                .map(|f| {
                    format!(
                        "m={} slope={:.3e}s/step r2={:.3}",
                        f.m, f.slope, f.r_squared
                    )
                })
                .collect();
            format!(
                "{} rows to {}; {}",
                r.results.len(),
                cfg.path(run::BENCH).display(),
                fits.join(", ")
            )
        }
        Command::ExportContext => format!(
            "{} task contexts to {}",
            run::export_context(cfg, checkpoint)?.len(),
            cfg.path(run::CONTEXT).display()
        ),
        Command::ExportRoutes => format!(
            "{} task routes to {}",
            run::export_routes(cfg, checkpoint)?.len(),
            cfg.path(run::ROUTES).display()
        ),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(args: &[&str]) -> Vec<OsString> {
        args.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (rest, over) = split_overrides(os(&[
            "cmml",
            "train",
            "--seed=3",
            "--train.epochs=2",
            "--out",
            "x",
            "--model.backbone.hidden=[8]",
        ]));
        assert_eq!(rest, os(&["cmml", "train", "--seed=3", "--out", "x"]));
        assert_eq!(
            over,
            vec![
                ("train.epochs".into(), "2".into()),
                ("model.backbone.hidden".into(), "[8]".into())
            ]
        );
    }

    #[test]
    fn flags_map_onto_the_config() {
        let cli = Cli::try_parse_from(os(&[
            "cmml",
            "eval",
            "--seed",
            "9",
            "--encoder",
            "pooling-max",
            "--modulation",
            "soft",
            "--loss",
            "mse",
            "--out",
            "/tmp/a b",
        ]))
        .unwrap();
        let cfg = cli.config(&[("seed".into(), "11".into())]).unwrap();
        assert_eq!(cfg.seed, 11);
        assert_eq!(
            cfg.model.encoder.variant,
            cmml_core::context::EncoderVariant::PoolingMax
        );
        assert_eq!(
            cfg.model.modulation.variant,
            cmml_core::modulation::ModulationVariant::SoftModular
        );
        assert_eq!(cfg.out, PathBuf::from("/tmp/a b"));
        assert_eq!(cli.command, Command::Eval);
    }

    #[test]
    fn unknown_choices_are_usage_errors() {
        assert!(Cli::try_parse_from(os(&["cmml", "train", "--encoder", "attention"])).is_err());
        assert!(Cli::try_parse_from(os(&["cmml", "fly"])).is_err());
    }
}
