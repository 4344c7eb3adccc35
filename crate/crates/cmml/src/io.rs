//! CSV readers and writers for interactions, tasks, embedding tables and
//! run artifacts.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use cmml_core::data::{Interaction, Setting, Split, Task};
use cmml_core::metrics::EvalReport;
use cmml_core::modulation::RouteTensor;
use cmml_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How the `rating` column becomes a label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelMode {
    /// Every logged row is a positive (+1).
    Implicit,
    /// The rating itself.
    Rating,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    pub skipped: usize,
    /// Line number and reason of the first skipped row.
    pub first_skip: Option<(u64, String)>,
}

const REQUIRED: [&str; 4] = ["user_id", "item_id", "rating", "timestamp"];

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(path)?))
}

fn field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> std::result::Result<T, String> {
    let raw = record.get(idx).ok_or_else(|| format!("missing `{name}`"))?;
    raw.trim()
        .parse()
        .map_err(|_| format!("bad `{name}` value {raw:?}"))
}

/// Reads a ratings CSV `user_id,item_id,rating,timestamp[,scenario_id]`.
/// Unparsable rows are skipped and tallied; more than 10% skipped is an
/// error.
pub fn read_interactions(
    reader: impl Read,
    mode: LabelMode,
) -> Result<(Vec<Interaction>, LoadReport)> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let mut idx = [0; 4];
    for (slot, name) in idx.iter_mut().zip(REQUIRED) {
        *slot = col(name)
            .ok_or_else(|| Error::Format(format!("ratings CSV has no `{name}` column")))?;
    }
    let scenario = col("scenario_id");
    let mut out = Vec::new();
    let mut report = LoadReport::default();
    for record in rdr.records() {
        report.rows += 1;
        let parsed = record.map_err(|e| e.to_string()).and_then(|r| {
            let rating: f64 = field(&r, idx[2], "rating")?;
            if !rating.is_finite() {
                return Err(format!("non-finite rating {rating}"));
            }
            let mut i = Interaction::new(
                field(&r, idx[0], "user_id")?,
                field(&r, idx[1], "item_id")?,
                match mode {
                    LabelMode::Implicit => 1.0,
                    LabelMode::Rating => rating,
                },
            );
            i.timestamp = Some(field(&r, idx[3], "timestamp")?);
            if let Some(s) = scenario {
                i.scenario_id = Some(field(&r, s, "scenario_id")?);
            }
            Ok(i)
        });
        match parsed {
            Ok(i) => out.push(i),
            Err(reason) => {
                report.skipped += 1;
                if report.first_skip.is_none() {
                    report.first_skip = Some((report.rows as u64 + 1, reason));
                }
            }
        }
    }
    if report.skipped * 10 > report.rows {
        let (line, reason) = report.first_skip.clone().unwrap_or_default();
        return Err(Error::Format(format!(
            "{} of {} rows unparsable (first at line {line}: {reason})",
            report.skipped, report.rows
        )));
    }
    Ok((out, report))
}

pub fn load_interactions_csv(
    path: &Path,
    mode: LabelMode,
) -> Result<(Vec<Interaction>, LoadReport)> {
    read_interactions(open(path)?, mode)
}

pub fn write_interactions_csv(path: &Path, interactions: &[Interaction]) -> Result<()> {
    let with_scenario = interactions.iter().any(|i| i.scenario_id.is_some());
    let mut w = csv_writer(path)?;
    let mut header = REQUIRED.to_vec();
    if with_scenario {
        header.push("scenario_id");
    }
    w.write_record(&header)?;
    for i in interactions {
        let mut row = vec![
            i.user_id.to_string(),
            i.item_id.to_string(),
            i.label.to_string(),
            i.timestamp.unwrap_or(0).to_string(),
        ];
        if with_scenario {
            row.push(i.scenario_id.map(|s| s.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `entity_id,v0,...` with one row per table row.
pub fn write_embeddings_csv(path: &Path, table: &Tensor) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["entity_id".to_string()];
    header.extend((0..table.cols()).map(|k| format!("v{k}")));
    w.write_record(&header)?;
    for r in 0..table.rows() {
        let mut row = vec![r.to_string()];
        row.extend(table.row(r).iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an embedding table; ids must cover `0..n` exactly once.
pub fn read_embeddings(reader: impl Read) -> Result<Tensor> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    let dim = headers.len().saturating_sub(1);
    if headers.get(0).map(str::trim) != Some("entity_id") || dim == 0 {
        return Err(Error::Format(
            "embedding CSV must start with `entity_id` and have value columns".into(),
        ));
    }
    let mut rows: Vec<Option<Vec<f64>>> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let r = record?;
        let bad = |what: String| Error::Format(format!("embedding CSV line {}: {what}", line + 2));
        let id: usize = field(&r, 0, "entity_id").map_err(bad)?;
        let values = (1..=dim)
            .map(|k| field::<f64>(&r, k, "value"))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        if id >= rows.len() {
            rows.resize(id + 1, None);
        }
        if rows[id].replace(values).is_some() {
            return Err(bad(format!("duplicate entity {id}")));
        }
    }
    let rows = rows
        .into_iter()
        .enumerate()
        .map(|(id, r)| {
            r.ok_or_else(|| Error::Format(format!("embedding CSV has no row for entity {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(Error::Format("embedding CSV has no rows".into()));
    }
    Ok(Tensor::from_rows(&rows)?)
}

pub fn load_embeddings_csv(path: &Path) -> Result<Tensor> {
    read_embeddings(open(path)?)
}

/// Writes `task_id,c0,...`.
pub fn write_context_csv(path: &Path, contexts: &[(u64, Vec<f64>)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let dim = contexts.first().map_or(0, |c| c.1.len());
    let mut header = vec!["task_id".to_string()];
    header.extend((0..dim).map(|k| format!("c{k}")));
    w.write_record(&header)?;
    for (task, c) in contexts {
        if c.len() != dim {
            return Err(Error::Format(format!(
                "task {task}: context width {} differs from {dim}",
                c.len()
            )));
        }
        let mut row = vec![task.to_string()];
        row.extend(c.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `task_id,layer,from_module,to_module,probability`.
pub fn write_routes_csv(path: &Path, routes: &[(u64, RouteTensor)]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "task_id",
        "layer",
        "from_module",
        "to_module",
        "probability",
    ])?;
    for (task, r) in routes {
        for l in 0..r.layers {
            for from in 0..r.modules {
                for to in 0..r.modules {
                    w.write_record([
                        task.to_string(),
                        l.to_string(),
                        from.to_string(),
                        to.to_string(),
                        r.get(l, from, to).to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `task_id,metric,value`, then one `AGGREGATE` row per metric.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["task_id", "metric", "value"])?;
    for r in &report.rows {
        w.write_record([r.task_id.to_string(), r.metric.clone(), r.value.to_string()])?;
    }
    for (metric, value, _) in report.aggregates() {
        w.write_record(["AGGREGATE".to_string(), metric, value.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an eval CSV back as `(task_id or "AGGREGATE", metric, value)`.
pub fn read_eval_csv(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut out = Vec::new();
    for record in rdr.records() {
        let r = record?;
        let value = field(&r, 2, "value").map_err(Error::Format)?;
        out.push((r[0].to_string(), r[1].to_string(), value));
    }
    Ok(out)
}

/// Per-epoch training log `epoch,mean_loss,tasks,seconds`.
pub struct TrainLog {
    writer: csv::Writer<BufWriter<File>>,
    path: std::path::PathBuf,
}

impl TrainLog {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv_writer(path)?;
        writer.write_record(["epoch", "mean_loss", "tasks", "seconds"])?;
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    pub fn append(
        &mut self,
        epoch: usize,
        mean_loss: f64,
        tasks: usize,
        seconds: f64,
    ) -> Result<()> {
        self.writer.write_record([
            epoch.to_string(),
            mean_loss.to_string(),
            tasks.to_string(),
            seconds.to_string(),
        ])?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn setting_str(s: Setting) -> &'static str {
    match s {
        Setting::Scenario => "scenario",
        Setting::User => "user",
    }
}

/// Writes prepared tasks, one row per example:
/// `task_id,setting,split,role,user_id,item_id,label`.
pub fn write_tasks_csv(path: &Path, tasks: &[Task]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "task_id", "setting", "split", "role", "user_id", "item_id", "label",
    ])?;
    for t in tasks {
        for (role, rows) in [("support", &t.support), ("query", &t.query)] {
            for i in rows.iter() {
                w.write_record([
                    t.task_id.to_string(),
                    setting_str(t.setting).to_string(),
                    t.split.as_str().to_string(),
                    role.to_string(),
                    i.user_id.to_string(),
                    i.item_id.to_string(),
                    i.label.to_string(),
                ])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tasks_csv(path: &Path) -> Result<Vec<Task>> {
    let mut rdr = csv::Reader::from_reader(open(path)?);
    let mut tasks: Vec<(u64, Setting, Split, Vec<Interaction>, Vec<Interaction>)> = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let r = record?;
        let bad =
            |what: String| Error::Format(format!("{} line {}: {what}", path.display(), line + 2));
        let task_id: u64 = field(&r, 0, "task_id").map_err(bad)?;
        let setting = match &r[1] {
            "scenario" => Setting::Scenario,
            "user" => Setting::User,
            other => return Err(bad(format!("unknown setting {other:?}"))),
        };
        let split = match &r[2] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(bad(format!("unknown split {other:?}"))),
        };
        let i = Interaction::new(
            field(&r, 4, "user_id").map_err(bad)?,
            field(&r, 5, "item_id").map_err(bad)?,
            field(&r, 6, "label").map_err(bad)?,
        );
        if tasks.last().is_none_or(|t| t.0 != task_id) {
            tasks.push((task_id, setting, split, Vec::new(), Vec::new()));
        }
        let t = tasks.last_mut().expect("pushed above");
        match &r[3] {
            "support" => t.3.push(i),
            "query" => t.4.push(i),
            other => return Err(bad(format!("unknown role {other:?}"))),
        }
    }
    tasks
        .into_iter()
        .map(|(id, s, sp, su, q)| Task::new(id, s, sp, su, q).map_err(Error::from))
        .collect()
}

/// Writes `method,m,k,median_seconds,alloc_bytes,repeats`; `k` is empty when
/// the method has no inner steps.
pub fn write_bench_csv(path: &Path, results: &[crate::bench::BenchResult]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record([
        "method",
        "m",
        "k",
        "median_seconds",
        "alloc_bytes",
        "repeats",
    ])?;
    for r in results {
        w.write_record([
            r.method.as_str().to_string(),
            r.m.to_string(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.median_seconds.to_string(),
            r.alloc_bytes.to_string(),
            r.repeats.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_rows_give_three_interactions() {
        let csv = "user_id,item_id,rating,timestamp\n1,2,4,100\n1,3,5,101\n2,2,1,102\n";
        let (rows, report) = read_interactions(csv.as_bytes(), LabelMode::Rating).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(report.skipped, 0);
        assert_eq!(rows[1].label, 5.0);
        assert_eq!(rows[2].timestamp, Some(102));
    }

    #[test]
    fn one_corrupt_row_in_a_hundred_is_skipped() {
        let mut csv = String::from("user_id,item_id,rating,timestamp\n");
        for k in 0..100 {
            if k == 37 {
                csv.push_str("7,x,3,1\n");
            } else {
                csv.push_str(&format!("{k},{},3,{k}\n", k + 1));
            }
        }
        let (rows, report) = read_interactions(csv.as_bytes(), LabelMode::Rating).unwrap();
        assert_eq!(rows.len(), 99);
        assert_eq!(report.skipped, 1);
        assert_eq!(report.first_skip.unwrap().0, 39);
    }

    #[test]
    fn too_many_bad_rows_is_an_error() {
        let csv = "user_id,item_id,rating,timestamp\n1,2,4,1\n1,2\n1,a,1,1\n";
        assert!(read_interactions(csv.as_bytes(), LabelMode::Rating).is_err());
    }

    #[test]
    fn implicit_mode_labels_positive() {
        let csv = "user_id,item_id,rating,timestamp,scenario_id\n1,2,2.5,9,4\n3,4,5,9,4\n";
        let (rows, _) = read_interactions(csv.as_bytes(), LabelMode::Implicit).unwrap();
        assert!(rows
            .iter()
            .all(|i| i.label == 1.0 && i.scenario_id == Some(4)));
    }

    #[test]
    fn missing_column_is_an_error() {
        let csv = "user_id,item_id,timestamp\n1,2,3\n";
        let err = read_interactions(csv.as_bytes(), LabelMode::Rating).unwrap_err();
        assert!(err.to_string().contains("rating"));
    }

    #[test]
    fn columns_are_found_by_name() {
        let csv = "timestamp,rating,item_id,user_id\n5,3,2,1\n";
        let (rows, _) = read_interactions(csv.as_bytes(), LabelMode::Rating).unwrap();
        assert_eq!(
            (rows[0].user_id, rows[0].item_id, rows[0].label),
            (1, 2, 3.0)
        );
    }

    #[test]
    fn embeddings_need_every_id() {
        let csv = "entity_id,v0,v1\n0,1,2\n2,3,4\n";
        assert!(read_embeddings(csv.as_bytes()).is_err());
        let csv = "entity_id,v0,v1\n1,3,4\n0,1,2\n";
        let t = read_embeddings(csv.as_bytes()).unwrap();
        assert_eq!(t.values(), &[1.0, 2.0, 3.0, 4.0]);
    }
}
