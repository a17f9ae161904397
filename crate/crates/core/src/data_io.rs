//! Dataset CSVs, z-score normalization, train/test splitting, checkpoints and
//! graph export.
//!
//! One CSV per task with header `unit,period,z_1..z_L,y[,x_true][,w_true_1..w_true_M]`.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::Matrix;
use crate::error::{Error, Result};
use crate::graph::{name_cycle, topological_order, GraphSpec};
use crate::oracle::SyntheticDataset;
use crate::sem::{build_model, ModelConfig, ParamGroup, SemModel};
use crate::training::TaskData;

pub const CHECKPOINT_VERSION: u32 = 1;
/// Columns whose training std falls below this are treated as constant.
pub const MIN_STD: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Records of one task as read from disk.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskTable {
    pub source: String,
    pub units: Vec<String>,
    pub periods: Vec<String>,
    /// n×L
    pub z: Matrix,
    pub y: Vec<f64>,
    pub x_true: Option<Vec<f64>>,
    /// n×M
    pub w_true: Option<Matrix>,
    /// Empty until [`split_dataset`] runs.
    pub split: Vec<Split>,
}

impl TaskTable {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Row indices tagged `split`; every row when no split was assigned.
    pub fn rows(&self, split: Option<Split>) -> Vec<usize> {
        match split {
            Some(s) if !self.split.is_empty() => (0..self.len()).filter(|&r| self.split[r] == s).collect(),
            _ => (0..self.len()).collect(),
        }
    }

    /// Training tensors for the selected rows; `x` kept when present.
    pub fn task_data(&self, split: Option<Split>) -> Result<TaskData> {
        let idx = self.rows(split);
        let mut z = Matrix::zeros(idx.len(), self.z.cols());
        for (r, &i) in idx.iter().enumerate() {
            z.row_mut(r).copy_from_slice(self.z.row(i));
        }
        let y = idx.iter().map(|&i| self.y[i]).collect();
        let x = self.x_true.as_ref().map(|x| idx.iter().map(|&i| x[i]).collect());
        TaskData::new(z, y, x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskDataset {
    pub confounders: usize,
    pub tasks: Vec<TaskTable>,
}

impl MultiTaskDataset {
    /// Per-task record counts.
    pub fn counts(&self) -> Vec<usize> {
        self.tasks.iter().map(TaskTable::len).collect()
    }

    /// Wraps generator output; units are `u{row}` in period `0`.
    pub fn from_synthetic(data: &SyntheticDataset) -> Result<Self> {
        let confounders = data.tasks.first().map_or(0, |t| t.z.cols());
        let tasks = data
            .tasks
            .iter()
            .enumerate()
            .map(|(k, t)| TaskTable {
                source: format!("task{}", k + 1),
                units: (0..t.y.len()).map(|r| format!("u{r}")).collect(),
                periods: vec!["0".to_string(); t.y.len()],
                z: t.z.clone(),
                y: t.y.clone(),
                x_true: Some(t.x.clone()),
                w_true: Some(t.w.clone()),
                split: Vec::new(),
            })
            .collect();
        Ok(Self { confounders, tasks })
    }

    pub fn task_data(&self, split: Option<Split>) -> Result<Vec<TaskData>> {
        self.tasks.iter().map(|t| t.task_data(split)).collect()
    }
}

fn ingestion(file: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Ingestion {
        file: file.display().to_string(),
        line,
        message: message.into(),
    }
}

struct Columns {
    z: Vec<usize>,
    y: usize,
    x_true: Option<usize>,
    w_true: Vec<usize>,
}

fn parse_header(path: &Path, header: &csv::StringRecord) -> Result<Columns> {
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    let find = |name: &str| names.iter().position(|&n| n == name);
    for required in ["unit", "period", "y"] {
        if find(required).is_none() {
            return Err(ingestion(path, 1, format!("missing column `{required}`")));
        }
    }
    let mut z = Vec::new();
    while let Some(c) = find(&format!("z_{}", z.len() + 1)) {
        z.push(c);
    }
    if z.is_empty() {
        return Err(ingestion(path, 1, "missing column `z_1`"));
    }
    let mut w_true = Vec::new();
    while let Some(c) = find(&format!("w_true_{}", w_true.len() + 1)) {
        w_true.push(c);
    }
    let known = 3 + z.len() + w_true.len() + usize::from(find("x_true").is_some());
    if known != names.len() {
        let extra = names
            .iter()
            .find(|n| {
                !matches!(**n, "unit" | "period" | "y" | "x_true")
                    && !n.strip_prefix("z_").is_some_and(|i| i.parse::<usize>().is_ok_and(|i| i >= 1 && i <= z.len()))
                    && !n
                        .strip_prefix("w_true_")
                        .is_some_and(|i| i.parse::<usize>().is_ok_and(|i| i >= 1 && i <= w_true.len()))
            })
            .copied()
            .unwrap_or("?");
        return Err(ingestion(path, 1, format!("unexpected or duplicate column `{extra}`")));
    }
    Ok(Columns {
        z,
        y: find("y").expect("checked"),
        x_true: find("x_true"),
        w_true,
    })
}

/// Reads one task file.
pub fn load_task(path: &Path) -> Result<TaskTable> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut records = reader.records();
    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(ingestion(path, 1, e.to_string())),
        None => return Err(ingestion(path, 1, "empty file, expected a header")),
    };
    let cols = parse_header(path, &header)?;
    let width = header.len();
    let mut units = Vec::new();
    let mut periods = Vec::new();
    let mut z = Vec::new();
    let mut y = Vec::new();
    let mut x_true = Vec::new();
    let mut w_true = Vec::new();
    let mut keys = HashSet::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            ingestion(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != width {
            return Err(ingestion(path, line, format!("expected {width} fields, found {}", rec.len())));
        }
        let num = |c: usize| -> Result<f64> {
            let cell = rec[c].trim();
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(ingestion(
                    path,
                    line,
                    format!("non-numeric value `{cell}` in column `{}`", header[c].trim()),
                )),
            }
        };
        let unit = rec[0].trim().to_string();
        let period = rec[1].trim().to_string();
        if !keys.insert((unit.clone(), period.clone())) {
            return Err(ingestion(path, line, format!("duplicate unit-period key ({unit}, {period})")));
        }
        for &c in &cols.z {
            z.push(num(c)?);
        }
        y.push(num(cols.y)?);
        if let Some(c) = cols.x_true {
            x_true.push(num(c)?);
        }
        for &c in &cols.w_true {
            w_true.push(num(c)?);
        }
        units.push(unit);
        periods.push(period);
    }
    let n = y.len();
    if n == 0 {
        return Err(ingestion(path, 2, "no records, at least one is required"));
    }
    let m = cols.w_true.len();
    Ok(TaskTable {
        source: path.display().to_string(),
        units,
        periods,
        z: Matrix::from_vec(n, cols.z.len(), z)?,
        y,
        x_true: cols.x_true.map(|_| x_true),
        w_true: if m > 0 { Some(Matrix::from_vec(n, m, w_true)?) } else { None },
        split: Vec::new(),
    })
}

/// Reads one file per task, in order; all tasks must share the confounder columns.
pub fn load_dataset<P: AsRef<Path>>(paths: &[P]) -> Result<MultiTaskDataset> {
    if paths.is_empty() {
        return Err(Error::Contract("at least one task file is required".into()));
    }
    let tasks = paths.iter().map(|p| load_task(p.as_ref())).collect::<Result<Vec<_>>>()?;
    let confounders = tasks[0].z.cols();
    for (t, p) in tasks.iter().zip(paths) {
        if t.z.cols() != confounders {
            return Err(ingestion(
                p.as_ref(),
                1,
                format!("{} confounder columns, other tasks have {confounders}", t.z.cols()),
            ));
        }
    }
    Ok(MultiTaskDataset { confounders, tasks })
}

/// Task files `task1.csv, task2.csv, ...` found in `dir`, in task order.
pub fn task_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    loop {
        let p = dir.join(format!("task{}.csv", out.len() + 1));
        if !p.exists() {
            break;
        }
        out.push(p);
    }
    if out.is_empty() {
        return Err(Error::Contract(format!("no task1.csv in {}", dir.display())));
    }
    Ok(out)
}

pub fn write_task(path: &Path, table: &TaskTable) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["unit".to_string(), "period".to_string()];
    header.extend((1..=table.z.cols()).map(|l| format!("z_{l}")));
    header.push("y".into());
    if table.x_true.is_some() {
        header.push("x_true".into());
    }
    if let Some(wt) = &table.w_true {
        header.extend((1..=wt.cols()).map(|i| format!("w_true_{i}")));
    }
    let csv_err = |e: csv::Error| Error::Contract(format!("csv encoding failed: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in 0..table.len() {
        let mut row = vec![table.units[r].clone(), table.periods[r].clone()];
        row.extend(table.z.row(r).iter().map(f64::to_string));
        row.push(table.y[r].to_string());
        if let Some(x) = &table.x_true {
            row.push(x[r].to_string());
        }
        if let Some(wt) = &table.w_true {
            row.extend(wt.row(r).iter().map(f64::to_string));
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes `task{k}.csv` for every task into `dir`.
pub fn write_dataset(dir: &Path, data: &MultiTaskDataset) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    data.tasks
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let p = dir.join(format!("task{}.csv", k + 1));
            write_task(&p, t).map(|_| p)
        })
        .collect()
}

/// Tags `round(fraction·n)` records of each task as training, the rest as
/// test. Task `k` shuffles with its own stream so tasks are independent.
pub fn split_dataset(data: &MultiTaskDataset, fraction: f64, seed: u64) -> Result<MultiTaskDataset> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Contract(format!("split fraction must lie in (0,1), got {fraction}")));
    }
    let mut out = data.clone();
    for (k, t) in out.tasks.iter_mut().enumerate() {
        let n = t.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        let n_train = (fraction * n as f64).round() as usize;
        t.split = vec![Split::Test; n];
        for &i in &idx[..n_train] {
            t.split[i] = Split::Train;
        }
    }
    Ok(out)
}

/// Column-wise z-score with population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    /// At least [`MIN_STD`].
    pub std: Vec<f64>,
    pub constant: Vec<bool>,
}

impl Normalizer {
    /// Statistics of `columns` (each a full column) over the rows `rows`.
    pub fn fit(columns: &[Vec<f64>], rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Contract("cannot fit a normalizer on zero rows".into()));
        }
        let n = rows.len() as f64;
        let mut out = Self {
            mean: Vec::with_capacity(columns.len()),
            std: Vec::with_capacity(columns.len()),
            constant: Vec::with_capacity(columns.len()),
        };
        for col in columns {
            let mean = rows.iter().map(|&r| col[r]).sum::<f64>() / n;
            let var = rows.iter().map(|&r| (col[r] - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            out.mean.push(mean);
            out.constant.push(std < MIN_STD);
            out.std.push(std.max(MIN_STD));
        }
        Ok(out)
    }

    pub fn apply(&self, column: usize, v: f64) -> f64 {
        if self.constant[column] {
            0.0
        } else {
            (v - self.mean[column]) / self.std[column]
        }
    }

    pub fn inverse(&self, column: usize, v: f64) -> f64 {
        if self.constant[column] {
            self.mean[column]
        } else {
            v * self.std[column] + self.mean[column]
        }
    }

    pub fn apply_slice(&self, column: usize, v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| self.apply(column, x)).collect()
    }
}

/// Statistics of one task: its confounders, its outcome and (if present) its cause.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskNormalizer {
    pub z: Normalizer,
    pub y: Normalizer,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Normalizer>,
}

impl TaskNormalizer {
    pub fn apply(&self, table: &TaskTable) -> TaskTable {
        let mut out = table.clone();
        for r in 0..out.len() {
            for (c, v) in out.z.row_mut(r).iter_mut().enumerate() {
                *v = self.z.apply(c, *v);
            }
        }
        out.y = self.y.apply_slice(0, &table.y);
        if let (Some(n), Some(x)) = (&self.x, &table.x_true) {
            out.x_true = Some(n.apply_slice(0, x));
        }
        out
    }

    /// Cause estimates back to data units; identity when no cause statistics exist.
    pub fn denormalize_x(&self, v: f64) -> f64 {
        self.x.as_ref().map_or(v, |n| n.inverse(0, v))
    }
}

fn columns(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.cols()).map(|c| (0..m.rows()).map(|r| m.get(r, c)).collect()).collect()
}

/// Fits one [`TaskNormalizer`] per task on its training rows (all rows if no
/// split was assigned) and applies it to every row. `w_true` stays in data
/// units; it is only used for scoring.
pub fn fit_apply_normalizer(data: &MultiTaskDataset) -> Result<(MultiTaskDataset, Vec<TaskNormalizer>)> {
    let mut out = data.clone();
    let mut stats = Vec::with_capacity(data.tasks.len());
    for (k, t) in data.tasks.iter().enumerate() {
        let rows = t.rows(Some(Split::Train));
        let n = TaskNormalizer {
            z: Normalizer::fit(&columns(&t.z), &rows)?,
            y: Normalizer::fit(std::slice::from_ref(&t.y), &rows)?,
            x: t
                .x_true
                .as_ref()
                .map(|x| Normalizer::fit(std::slice::from_ref(x), &rows))
                .transpose()?,
        };
        out.tasks[k] = n.apply(t);
        stats.push(n);
    }
    Ok((out, stats))
}

/// Seed and config fingerprint of the run that produced a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    /// Hex SHA-256 of the resolved configuration JSON.
    pub config_digest: String,
}

/// Hex SHA-256 of the compact JSON encoding of `config`.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ArrayRecord {
    name: String,
    group: ParamGroup,
    shape: [usize; 2],
    values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AdjacencyRecord {
    mask: ArrayRecord,
    fixed: ArrayRecord,
    threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    spec: GraphSpec,
    model_config: ModelConfig,
    adjacency: AdjacencyRecord,
    parameters: Vec<ArrayRecord>,
    normalizers: Vec<TaskNormalizer>,
    provenance: Provenance,
}

/// A model with everything needed to apply it to raw data.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SemModel,
    /// One per task; empty when the model was trained on pre-normalized data.
    pub normalizers: Vec<TaskNormalizer>,
    pub provenance: Provenance,
}

fn record(name: &str, group: ParamGroup, m: &Matrix) -> ArrayRecord {
    ArrayRecord {
        name: name.to_string(),
        group,
        shape: [m.rows(), m.cols()],
        values: m.as_slice().to_vec(),
    }
}

fn checkpoint_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn restore(rec: &ArrayRecord, expected: (usize, usize)) -> Result<Matrix> {
    if (rec.shape[0], rec.shape[1]) != expected {
        return Err(checkpoint_err(format!(
            "array {} has shape {:?}, the architecture needs {:?}",
            rec.name, rec.shape, expected
        )));
    }
    Matrix::from_vec(rec.shape[0], rec.shape[1], rec.values.clone())
        .map_err(|_| checkpoint_err(format!("array {} has {} values for shape {:?}", rec.name, rec.values.len(), rec.shape)))
}

impl Checkpoint {
    pub fn new(model: SemModel) -> Self {
        Self {
            model,
            normalizers: Vec::new(),
            provenance: Provenance::default(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let m = &self.model;
        let file = CheckpointFile {
            format_version: CHECKPOINT_VERSION,
            spec: m.spec().clone(),
            model_config: m.config().clone(),
            adjacency: AdjacencyRecord {
                mask: record("graph.mask", ParamGroup::Graph, &m.adjacency.mask),
                fixed: record("graph.fixed", ParamGroup::Graph, &m.adjacency.fixed),
                threshold: m.adjacency.threshold,
            },
            parameters: m.parameters().into_iter().map(|(info, a)| record(&info.name, info.group, a)).collect(),
            normalizers: self.normalizers.clone(),
            provenance: self.provenance.clone(),
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        Ok(text)
    }

    /// Parses and validates; never returns a partially restored model.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| checkpoint_err(format!("unreadable checkpoint: {e}")))?;
        match value.get("format_version").and_then(serde_json::Value::as_u64) {
            Some(v) if v == u64::from(CHECKPOINT_VERSION) => {}
            Some(v) => {
                return Err(checkpoint_err(format!(
                    "format version {v} is not supported (expected {CHECKPOINT_VERSION})"
                )))
            }
            None => return Err(checkpoint_err("missing format_version")),
        }
        let file: CheckpointFile =
            serde_json::from_value(value).map_err(|e| checkpoint_err(format!("malformed checkpoint: {e}")))?;
        let mut model = build_model(&file.spec, &file.model_config)?;
        let n = file.spec.len();
        model.adjacency.mask = restore(&file.adjacency.mask, (n, n))?;
        model.adjacency.fixed = restore(&file.adjacency.fixed, (n, n))?;
        model.adjacency.threshold = file.adjacency.threshold;
        let expected: Vec<(String, ParamGroup, (usize, usize))> = model
            .parameters()
            .into_iter()
            .map(|(info, a)| (info.name, info.group, a.shape()))
            .collect();
        if expected.len() != file.parameters.len() {
            return Err(checkpoint_err(format!(
                "{} parameter arrays stored, the architecture has {}",
                file.parameters.len(),
                expected.len()
            )));
        }
        let mut restored = Vec::with_capacity(expected.len());
        for ((name, group, shape), rec) in expected.iter().zip(&file.parameters) {
            if &rec.name != name || rec.group != *group {
                return Err(checkpoint_err(format!(
                    "expected array {name} ({group:?}), found {} ({:?})",
                    rec.name, rec.group
                )));
            }
            restored.push(restore(rec, *shape)?);
        }
        for (slot, value) in model.parameters_mut().into_iter().zip(restored) {
            *slot = value;
        }
        model.adjacency.validate()?;
        if !file.normalizers.is_empty() && file.normalizers.len() != file.spec.tasks() {
            return Err(checkpoint_err(format!(
                "{} normalizers for {} tasks",
                file.normalizers.len(),
                file.spec.tasks()
            )));
        }
        Ok(Self {
            model,
            normalizers: file.normalizers,
            provenance: file.provenance,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: &Path) -> Result<()> {
    let text = checkpoint.to_json()?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Learned,
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphEdge {
    pub child: String,
    pub parent: String,
    pub weight: f64,
    pub kind: EdgeKind,
}

/// Fixed edges at weight 1, and learnable edges whose weight exceeds the threshold.
pub fn graph_edges(model: &SemModel) -> Vec<GraphEdge> {
    let adj = &model.adjacency;
    let spec = model.spec();
    let mut out = Vec::new();
    for c in 0..spec.len() {
        for p in 0..spec.len() {
            let (weight, kind) = if adj.is_fixed(c, p) {
                (1.0, EdgeKind::Fixed)
            } else if adj.is_learnable(c, p) && adj.weight(c, p) > adj.threshold {
                (adj.weight(c, p), EdgeKind::Learned)
            } else {
                continue;
            };
            out.push(GraphEdge {
                child: spec.name(c).to_string(),
                parent: spec.name(p).to_string(),
                weight,
                kind,
            });
        }
    }
    out
}

/// Variable names of the hardened graph in a topological order.
pub fn hardened_order(model: &SemModel) -> Result<Vec<String>> {
    let spec = model.spec();
    let order = topological_order(&model.adjacency.harden()?).map_err(|e| name_cycle(e, spec))?;
    Ok(order.into_iter().map(|i| spec.name(i).to_string()).collect())
}

/// CSV `child,parent,weight,kind` with weights to four decimals.
pub fn export_graph(model: &SemModel, path: &Path) -> Result<()> {
    let mut text = String::from("child,parent,weight,kind\n");
    for e in graph_edges(model) {
        let kind = match e.kind {
            EdgeKind::Learned => "learned",
            EdgeKind::Fixed => "fixed",
        };
        text.push_str(&format!("{},{},{:.4},{kind}\n", e.child, e.parent, e.weight));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
