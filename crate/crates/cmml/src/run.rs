//! The commands behind the CLI. Every artifact lives under `config.out`.

use std::path::{Path, PathBuf};
use std::time::Instant;

use cmml_core::backbone::EmbeddingMode;
use cmml_core::data::{
    build_scenario_tasks, build_user_tasks, generate_synthetic_tasks, mf_pretrain, sample_episode,
    split_for, Episode, Example, FeatureSchema, Interaction, Setting, Split, Task,
};
use cmml_core::metalearn::{
    baseline_adapt_and_score, cmml_infer, cmml_infer_with, encode_context, evaluate_tasks,
    hinge_pairs, train_baseline_epoch, train_epoch, BaselineBundle, EpisodeSource, EvalProtocol,
    ForwardOptions, LossMode, ModelBundle, ModelConfig,
};
use cmml_core::metrics::EvalReport;
use cmml_core::modulation::{ModulationVariant, RouteTensor};
use cmml_core::optim::{AdamConfig, AdamState};
use cmml_core::rng::{mix64, rng_stream};
use cmml_core::{ParamSet, Tensor};

use crate::bench::{comparable_baseline, run_inference_bench, BenchReport};
use crate::checkpoint::Checkpoint;
use crate::config::{DataSource, Method, ProtocolKind, RunConfig};
use crate::error::{Error, Result};
use crate::io;

pub const RATINGS: &str = "ratings.csv";
pub const TASKS: &str = "tasks.csv";
pub const USER_TABLE: &str = "user_embeddings.csv";
pub const ITEM_TABLE: &str = "item_embeddings.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const BEST: &str = "checkpoint.best.txt";
pub const LAST: &str = "checkpoint.last.txt";
pub const EVAL: &str = "eval.csv";
pub const BENCH: &str = "bench.csv";
pub const CONTEXT: &str = "context.csv";
pub const ROUTES: &str = "routes.csv";

const VALIDATION_SPLIT: u64 = 0x7a11d;
const VALIDATION_STREAM: u64 = 0x7a1;

/// Writes synthetic ratings, the frozen item feature table and the tasks.
pub fn gen_synthetic(cfg: &RunConfig) -> Result<usize> {
    let data = generate_synthetic_tasks(&cfg.synthetic)?;
    let mut ratings = Vec::new();
    for t in &data.tasks {
        for (k, i) in t.support.iter().chain(&t.query).enumerate() {
            ratings.push(Interaction {
                timestamp: Some(k as i64),
                ..*i
            });
        }
    }
    io::write_interactions_csv(&cfg.path(RATINGS), &ratings)?;
    io::write_embeddings_csv(&cfg.path(ITEM_TABLE), &data.item_features)?;
    io::write_tasks_csv(&cfg.path(TASKS), &data.tasks)?;
    Ok(data.tasks.len())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrepareSummary {
    pub interactions: usize,
    pub skipped: usize,
    pub tasks: usize,
    pub train_tasks: usize,
}

/// Builds tasks from the ratings CSV and, if configured, pretrained tables.
pub fn prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    if cfg.data.source != DataSource::Ratings {
        return Err(Error::Config("prepare reads a ratings CSV; set data.source = \"ratings\" (synthetic tasks come from gen-synthetic)".into()));
    }
    let (interactions, report) = io::load_interactions_csv(&cfg.data.ratings, cfg.data.label_mode)?;
    let tasks = match cfg.data.setting {
        Setting::Scenario => build_scenario_tasks(&interactions, &cfg.scenario)?,
        Setting::User => build_user_tasks(&interactions, &cfg.user)?,
    };
    io::write_tasks_csv(&cfg.path(TASKS), &tasks)?;
    if cfg.data.pretrain {
        // Test tasks contribute their support only, so no query label leaks
        // into the tables.
        let seen: Vec<Interaction> = tasks
            .iter()
            .flat_map(|t| {
                t.support.iter().chain(if t.split == Split::Train {
                    &t.query[..]
                } else {
                    &[]
                })
            })
            .copied()
            .collect();
        let n_users = interactions
            .iter()
            .map(|i| i.user_id + 1)
            .max()
            .unwrap_or(0);
        let n_items = interactions
            .iter()
            .map(|i| i.item_id + 1)
            .max()
            .unwrap_or(0);
        let tables = mf_pretrain(&seen, n_users, n_items, &cfg.mf)?;
        io::write_embeddings_csv(&cfg.path(USER_TABLE), &tables.user)?;
        io::write_embeddings_csv(&cfg.path(ITEM_TABLE), &tables.item)?;
    }
    Ok(PrepareSummary {
        interactions: interactions.len(),
        skipped: report.skipped,
        tasks: tasks.len(),
        train_tasks: tasks.iter().filter(|t| t.split == Split::Train).count(),
    })
}

/// Prepared tasks with the tables and vocabularies a model needs.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub tasks: Vec<Task>,
    pub user_table: Option<Tensor>,
    pub item_table: Option<Tensor>,
    pub n_users: usize,
    pub n_items: usize,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<Task> {
        self.tasks
            .iter()
            .filter(|t| t.split == split)
            .cloned()
            .collect()
    }

    pub fn negative_pool(&self) -> Vec<usize> {
        (0..self.n_items).collect()
    }
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::Format(format!(
            "{} not found; {hint}",
            path.display()
        )))
    }
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let hint = match cfg.data.source {
        DataSource::Synthetic => "run gen-synthetic first",
        DataSource::Ratings => "run prepare first",
    };
    let tasks = io::load_tasks_csv(&require(cfg.path(TASKS), hint)?)?;
    if tasks.is_empty() {
        return Err(Error::Format("no tasks".into()));
    }
    let pretrained = cfg.data.source == DataSource::Synthetic || cfg.data.pretrain;
    let item_table = if pretrained {
        Some(io::load_embeddings_csv(&require(
            cfg.path(ITEM_TABLE),
            hint,
        )?)?)
    } else {
        None
    };
    let user_table = if pretrained && cfg.data.uses_user_field() {
        Some(io::load_embeddings_csv(&require(
            cfg.path(USER_TABLE),
            hint,
        )?)?)
    } else {
        None
    };
    let examples = || tasks.iter().flat_map(|t| t.support.iter().chain(&t.query));
    let n_users = user_table.as_ref().map_or_else(
        || examples().map(|i| i.user_id + 1).max().unwrap_or(1),
        Tensor::rows,
    );
    let n_items = item_table.as_ref().map_or_else(
        || examples().map(|i| i.item_id + 1).max().unwrap_or(1),
        Tensor::rows,
    );
    Ok(Dataset {
        tasks,
        user_table,
        item_table,
        n_users,
        n_items,
    })
}

/// The configured model with its feature schema filled in from the data.
pub fn resolve_model(cfg: &RunConfig, data: &Dataset) -> ModelConfig {
    let mut model = cfg.model.clone();
    let user_dim = match (&data.user_table, cfg.data.uses_user_field()) {
        (Some(t), _) => t.cols(),
        (None, true) => cfg.data.user_dim,
        (None, false) => 0,
    };
    let item_dim = data
        .item_table
        .as_ref()
        .map_or(cfg.data.item_dim, Tensor::cols);
    model.backbone.schema = FeatureSchema::ids(data.n_users, data.n_items, user_dim, item_dim);
    model.backbone.embedding_mode = if data.item_table.is_some() {
        EmbeddingMode::Frozen
    } else {
        EmbeddingMode::Learned
    };
    model
}

/// A trainable model of either method.
#[derive(Debug, Clone)]
pub enum Model {
    Cmml(Box<ModelBundle>),
    Baseline(Box<BaselineBundle>),
}

impl Model {
    pub fn build(cfg: &RunConfig, data: &Dataset) -> Result<(Model, RunConfig)> {
        let mut resolved = cfg.clone();
        resolved.model = resolve_model(cfg, data);
        let model = match cfg.method {
            Method::Cmml => {
                let mut b = ModelBundle::new(resolved.model.clone(), cfg.seed)?;
                if let Some(item) = &data.item_table {
                    b.set_embeddings(data.user_table.as_ref(), item)?;
                }
                Model::Cmml(Box::new(b))
            }
            Method::Baseline => {
                let mut b = BaselineBundle::new(resolved.model.backbone.clone(), cfg.seed)?;
                if let Some(item) = &data.item_table {
                    b.set_embeddings(data.user_table.as_ref(), item)?;
                }
                Model::Baseline(Box::new(b))
            }
        };
        Ok((model, resolved))
    }

    /// Rebuilds the model a checkpoint was saved from.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        Ok(match ck.config.method {
            Method::Cmml => Model::Cmml(Box::new(ModelBundle::with_params(
                ck.config.model.clone(),
                ck.params.clone(),
            )?)),
            Method::Baseline => Model::Baseline(Box::new(BaselineBundle::with_params(
                ck.config.model.backbone.clone(),
                ck.params.clone(),
            )?)),
        })
    }

    pub fn params(&self) -> &ParamSet {
        match self {
            Model::Cmml(b) => &b.params,
            Model::Baseline(b) => &b.params,
        }
    }

    /// Query scores after adapting to `support`.
    pub fn score(
        &self,
        cfg: &RunConfig,
        support: &[Example],
        query: &[Example],
    ) -> Result<Vec<f64>> {
        match self {
            Model::Cmml(b) => Ok(cmml_infer(b, support, query)?),
            Model::Baseline(b) => {
                Ok(baseline_adapt_and_score(b, support, query, &cfg.baseline, cfg.train.loss)?.0)
            }
        }
    }
}

/// Query loss of precomputed scores, matching the training objective.
pub fn score_loss(scores: &[f64], query: &[Example], mode: LossMode) -> Result<f64> {
    Ok(match mode {
        LossMode::Mse => {
            scores
                .iter()
                .zip(query)
                .map(|(s, e)| (s - e.label) * (s - e.label))
                .sum::<f64>()
                / query.len() as f64
        }
        LossMode::Hinge => {
            let (pos, neg) = hinge_pairs(query)?;
            pos.iter()
                .zip(&neg)
                .map(|(&p, &n)| (1.0 - scores[p] + scores[n]).max(0.0))
                .sum::<f64>()
                / pos.len() as f64
        }
    })
}

/// The fixed episode a task is judged on outside training.
pub fn held_out_episode(cfg: &RunConfig, task: &Task, negative_pool: &[usize]) -> Result<Episode> {
    match task.setting {
        Setting::Scenario => Ok(sample_episode(
            task,
            &cfg.episode,
            negative_pool,
            &mut rng_stream(mix64(cfg.seed ^ VALIDATION_STREAM), task.task_id),
        )?),
        Setting::User => Ok(Episode::fixed(task)),
    }
}

fn validation_loss(cfg: &RunConfig, model: &Model, tasks: &[Task], pool: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for t in tasks {
        let ep = held_out_episode(cfg, t, pool)?;
        total += score_loss(
            &model.score(cfg, &ep.support, &ep.query)?,
            &ep.query,
            cfg.train.loss,
        )?;
    }
    Ok(total / tasks.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_loss: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochRecord>,
    /// Completed epochs of the kept checkpoint; 0 is the initialization.
    pub best_epoch: usize,
    pub train_tasks: usize,
    pub validation_tasks: usize,
}

/// Meta-trains on the meta-train split. The bundle with the lowest
/// validation loss (initialization included) is kept as the best
/// checkpoint; the final one is saved too.
pub fn train(cfg: &RunConfig) -> Result<TrainSummary> {
    let data = load_dataset(cfg)?;
    let (mut model, resolved) = Model::build(cfg, &data)?;
    let pool = data.negative_pool();
    let (mut train_tasks, mut valid_tasks) = (Vec::new(), Vec::new());
    for t in data.split(Split::Train) {
        match split_for(
            t.task_id,
            cfg.seed ^ VALIDATION_SPLIT,
            1.0 - cfg.data.validation_fraction,
        ) {
            Split::Train => train_tasks.push(t),
            Split::Test => valid_tasks.push(t),
        }
    }
    if train_tasks.is_empty() {
        return Err(Error::Format(
            "no meta-train tasks after the validation split".into(),
        ));
    }
    let source = match data.tasks[0].setting {
        Setting::Scenario => EpisodeSource::Sampled {
            params: cfg.episode,
            negative_pool: &pool,
        },
        Setting::User => EpisodeSource::Task,
    };
    let mut adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: cfg.train.lr,
            ..AdamConfig::default()
        },
    );
    let mut log = io::TrainLog::create(&resolved.path(TRAIN_LOG))?;
    let checkpoint = |model: &Model, adam: &AdamState, epoch| {
        Checkpoint::new(
            resolved.clone(),
            epoch,
            model.params().clone(),
            adam.clone(),
        )
    };
    let mut best = if valid_tasks.is_empty() {
        None
    } else {
        Some(validation_loss(cfg, &model, &valid_tasks, &pool)?)
    };
    let mut best_epoch = 0;
    checkpoint(&model, &adam, 0)?.save(&resolved.path(BEST))?;
    let mut records = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let t0 = Instant::now();
        let stats = match &mut model {
            Model::Cmml(b) => train_epoch(b, &mut adam, &train_tasks, &cfg.train, source, epoch)?,
            Model::Baseline(b) => train_baseline_epoch(
                b,
                &mut adam,
                &train_tasks,
                &cfg.train,
                &cfg.baseline,
                source,
                epoch,
            )?,
        };
        let seconds = t0.elapsed().as_secs_f64();
        log.append(epoch + 1, stats.mean_loss, stats.tasks, seconds)?;
        let validation = if valid_tasks.is_empty() {
            None
        } else {
            Some(validation_loss(cfg, &model, &valid_tasks, &pool)?)
        };
        let improved = match (validation, best) {
            (Some(v), Some(b)) => v < b,
            _ => true,
        };
        if improved {
            best = validation;
            best_epoch = epoch + 1;
            checkpoint(&model, &adam, epoch + 1)?.save(&resolved.path(BEST))?;
        }
        records.push(EpochRecord {
            epoch: epoch + 1,
            mean_loss: stats.mean_loss,
            validation_loss: validation,
            seconds,
        });
        if cfg.data.patience > 0 && epoch + 1 - best_epoch >= cfg.data.patience {
            break;
        }
    }
    let done = records.last().map_or(0, |r| r.epoch);
    checkpoint(&model, &adam, done)?.save(&resolved.path(LAST))?;
    Ok(TrainSummary {
        epochs: records,
        best_epoch,
        train_tasks: train_tasks.len(),
        validation_tasks: valid_tasks.len(),
    })
}

/// Checkpoint of the freshly initialized model, as `train` would start.
pub fn initial_checkpoint(cfg: &RunConfig) -> Result<Checkpoint> {
    let data = load_dataset(cfg)?;
    let (model, resolved) = Model::build(cfg, &data)?;
    let adam = AdamState::new(
        model.params(),
        AdamConfig {
            lr: cfg.train.lr,
            ..AdamConfig::default()
        },
    );
    Checkpoint::new(resolved, 0, model.params().clone(), adam)
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    explicit.map_or_else(|| cfg.path(BEST), Path::to_path_buf)
}

/// Loads a checkpoint and the meta-test tasks it is judged on.
fn restore(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<(Checkpoint, Model, Dataset)> {
    let path = checkpoint_path(cfg, checkpoint);
    if !path.exists() {
        return Err(Error::Checkpoint(format!(
            "{} not found; run train first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    let model = Model::from_checkpoint(&ck)?;
    let data = load_dataset(cfg)?;
    Ok((ck, model, data))
}

/// Scores every meta-test task and writes the eval CSV.
pub fn eval(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<EvalReport> {
    let (ck, model, data) = restore(cfg, checkpoint)?;
    let tasks = data.split(Split::Test);
    if tasks.is_empty() {
        return Err(Error::Format("no meta-test tasks".into()));
    }
    let pool = data.negative_pool();
    let protocol = match cfg.data.protocol() {
        ProtocolKind::Scenario => EvalProtocol::Scenario {
            params: cfg.episode,
            negative_pool: &pool,
        },
        ProtocolKind::Rating => EvalProtocol::Rating,
        _ => EvalProtocol::Regression,
    };
    // Adaptation settings (loss for the baseline's inner loop) come from the
    // checkpoint, evaluation settings from the current run.
    let scoring = RunConfig {
        baseline: cfg.baseline,
        ..ck.config.clone()
    };
    let report = evaluate_tasks(&tasks, &cfg.eval, protocol, |_, s, q| {
        model.score(&scoring, s, q).map_err(|e| match e {
            Error::Core(c) => c,
            other => cmml_core::Error::Data(other.to_string()),
        })
    })?;
    io::write_eval_csv(&cfg.path(EVAL), &report)?;
    Ok(report)
}

/// Times both adaptation styles on a fresh default-sized model.
pub fn bench(cfg: &RunConfig) -> Result<BenchReport> {
    let mut model = cfg.model.clone();
    let users = cfg.data.uses_user_field();
    model.backbone.schema = FeatureSchema::ids(
        cfg.bench.vocab,
        cfg.bench.vocab,
        if users { cfg.data.user_dim } else { 0 },
        cfg.data.item_dim,
    );
    let bundle = ModelBundle::new(model, cfg.seed)?;
    let baseline = comparable_baseline(&bundle, cfg.seed)?;
    let report = run_inference_bench(&bundle, &baseline, &cfg.baseline, &cfg.bench, cfg.seed)?;
    io::write_bench_csv(&cfg.path(BENCH), &report.results)?;
    Ok(report)
}

fn cmml_of(model: &Model) -> Result<&ModelBundle> {
    match model {
        Model::Cmml(b) => Ok(b),
        Model::Baseline(_) => Err(Error::Config("exports need a cmml checkpoint".into())),
    }
}

/// Task contexts `C` for every task, from its held-out episode's support.
pub fn export_context(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<Vec<(u64, Vec<f64>)>> {
    let (_, model, data) = restore(cfg, checkpoint)?;
    let bundle = cmml_of(&model)?;
    let pool = data.negative_pool();
    let mut rows = Vec::with_capacity(data.tasks.len());
    for t in &data.tasks {
        let ep = held_out_episode(cfg, t, &pool)?;
        rows.push((t.task_id, encode_context(bundle, &ep.support)?));
    }
    io::write_context_csv(&cfg.path(CONTEXT), &rows)?;
    Ok(rows)
}

/// Route probabilities per task, averaged over its query examples.
pub fn export_routes(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
) -> Result<Vec<(u64, RouteTensor)>> {
    let (_, model, data) = restore(cfg, checkpoint)?;
    let bundle = cmml_of(&model)?;
    if bundle.config.modulation.variant != ModulationVariant::SoftModular {
        return Err(Error::Config(
            "route export needs model.modulation.variant = \"soft\"".into(),
        ));
    }
    let pool = data.negative_pool();
    let mut rows = Vec::with_capacity(data.tasks.len());
    for t in &data.tasks {
        let ep = held_out_episode(cfg, t, &pool)?;
        let out = cmml_infer_with(bundle, &ep.support, &ep.query, ForwardOptions::default())?;
        let routes = out.routes.expect("soft modulation yields routes");
        rows.push((t.task_id, RouteTensor::mean(&routes)?));
    }
    io::write_routes_csv(&cfg.path(ROUTES), &rows)?;
    Ok(rows)
}
