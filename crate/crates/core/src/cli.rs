//! Command-line entry point.
//!
//! Configuration is a JSON object of dotted keys (`"train.epochs": 50`; nested
//! objects are accepted and flattened) merged over the defaults, then
//! overridden by `--seed` and by any `--section.key value` flag. The resolved
//! configuration is written next to every output.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data_io::{
    config_digest, export_graph, fit_apply_normalizer, load_checkpoint, load_dataset, load_task, save_checkpoint,
    split_dataset, task_files, write_dataset, Checkpoint, MultiTaskDataset, Provenance, Split, TaskNormalizer,
};
use crate::error::{Error, Result};
use crate::evalsuite::{edge_scores, learned_edges, reconstruction_error, run_experiment, ExperimentPlan, TransferMode};
use crate::graph::GraphSpec;
use crate::map_infer::{map_estimate_batch, MapConfig};
use crate::oracle::{make_ground_truth, sample_dataset, GeneratorConfig, Manifest};
use crate::sem::{build_model, ModelConfig, ParamGroup};
use crate::training::{train, train_with, TrainConfig};

/// Everything a run can be configured with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Mechanism variables of trained models.
    pub mechanisms: usize,
    pub records_per_task: Vec<usize>,
    pub split_fraction: f64,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub map: MapConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mechanisms: 5,
            records_per_task: vec![2000; 3],
            split_fraction: 0.8,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            map: MapConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

/// Dotted keys of a configuration value, in key order.
pub fn flat_keys(v: &Value) -> Vec<(String, Value)> {
    let mut out = Vec::new();
    flatten("", v, &mut out);
    out
}

fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(part))
            .ok_or_else(|| Error::Usage(format!("unknown configuration key `{key}`")))?;
    }
    *node = value;
    Ok(())
}

/// Flag text to JSON: numbers, booleans, arrays and objects parse as JSON,
/// anything else is a string.
fn flag_value(text: &str) -> Value {
    serde_json::from_str(text).unwrap_or_else(|_| Value::String(text.to_string()))
}

impl RunConfig {
    /// Defaults, then `file` entries, then `overrides`, then `seed`.
    pub fn resolve(file: Option<&Value>, overrides: &[(String, String)], seed: Option<u64>) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if let Some(file) = file {
            if !file.is_object() {
                return Err(Error::Usage("configuration file must hold a JSON object".into()));
            }
            for (k, v) in flat_keys(file) {
                set_dotted(&mut root, &k, v)?;
            }
        }
        for (k, v) in overrides {
            set_dotted(&mut root, k, flag_value(v))?;
        }
        let mut cfg: Self =
            serde_json::from_value(root).map_err(|e| Error::Usage(format!("invalid configuration: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.model.seed = cfg.seed;
        Ok(cfg)
    }

    /// Flat dotted-key JSON object.
    pub fn to_flat_json(&self) -> Result<String> {
        let mut map = Map::new();
        for (k, v) in flat_keys(&serde_json::to_value(self)?) {
            map.insert(k, v);
        }
        let mut s = serde_json::to_string_pretty(&Value::Object(map))?;
        s.push('\n');
        Ok(s)
    }
}

#[derive(Parser, Debug)]
#[command(name = "anticausal", version, about = "Multi-task anti-causal estimation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file (dotted keys).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output file or directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    ZeroShot,
    HeadOnly,
    Full,
}

impl From<ModeArg> for TransferMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::ZeroShot => TransferMode::ZeroShot,
            ModeArg::HeadOnly => TransferMode::HeadOnly,
            ModeArg::Full => TransferMode::Full,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample a synthetic dataset: one CSV per task plus manifest.json.
    Generate,
    /// Fit a model and write its checkpoint and training report.
    Train {
        /// Directory holding task1.csv, task2.csv, ...
        #[arg(long)]
        data: PathBuf,
        /// Acyclicity weight (same as --train.w).
        #[arg(long)]
        w: Option<f64>,
    },
    /// MAP estimates of the cause for every record of one task.
    Infer {
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory or a single task file.
        #[arg(long)]
        data: PathBuf,
        /// One-based task.
        #[arg(long)]
        task: usize,
    },
    /// Reconstruction error of estimates, and edge scores given a model and manifest.
    Eval {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Move a trained model's shared part to a new single-task student.
    Transfer {
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        teacher: PathBuf,
        /// Dataset directory or a single task file.
        #[arg(long)]
        data: PathBuf,
        /// One-based task within `--data` when it is a directory.
        #[arg(long, default_value_t = 1)]
        task: usize,
        /// Trained single-task model whose backbones zero-shot replaces.
        #[arg(long)]
        student: Option<PathBuf>,
    },
    /// Run an experiment plan over its seeds.
    Experiment {
        #[arg(long)]
        plan: PathBuf,
    },
    /// Write the learned graph as `child,parent,weight,kind`.
    ExportGraph {
        #[arg(long)]
        model: PathBuf,
    },
}

/// Pulls `--a.b value` and `--a.b=value` out of `args`.
fn split_dotted(args: &[String]) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::with_capacity(args.len());
    let mut dotted = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(flag) if flag.split('=').next().is_some_and(|n| n.contains('.')) => {
                if let Some((k, v)) = flag.split_once('=') {
                    dotted.push((k.to_string(), v.to_string()));
                } else {
                    let v = it
                        .next()
                        .ok_or_else(|| Error::Usage(format!("flag --{flag} needs a value")))?;
                    dotted.push((flag.to_string(), v.clone()));
                }
            }
            _ => rest.push(a.clone()),
        }
    }
    Ok((rest, dotted))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_out(common: &Common) -> Result<&Path> {
    common
        .out
        .as_deref()
        .ok_or_else(|| Error::Usage("--out is required".into()))
}

/// `dir/resolved_config.json`, or `<file stem>.config.json` beside a file output.
fn echo_config(cfg: &RunConfig, out: &Path, is_dir: bool) -> Result<PathBuf> {
    let path = if is_dir {
        out.join("resolved_config.json")
    } else {
        let stem = out.file_stem().map_or("output".into(), |s| s.to_string_lossy().into_owned());
        out.with_file_name(format!("{stem}.config.json"))
    };
    write_text(&path, &cfg.to_flat_json()?)?;
    Ok(path)
}

fn provenance(cfg: &RunConfig) -> Result<Provenance> {
    Ok(Provenance {
        seed: cfg.seed,
        config_digest: config_digest(cfg)?,
    })
}

/// Splits and normalizes; the normalizers are fitted on training rows only.
fn prepared(data: &MultiTaskDataset, cfg: &RunConfig) -> Result<(MultiTaskDataset, Vec<TaskNormalizer>)> {
    fit_apply_normalizer(&split_dataset(data, cfg.split_fraction, cfg.seed)?)
}

/// One task of `data`: the k-th file of a directory, or the file itself.
fn one_task(data: &Path, task: usize) -> Result<MultiTaskDataset> {
    if task == 0 {
        return Err(Error::Usage("--task is one-based".into()));
    }
    let file = if data.is_dir() {
        let files = task_files(data)?;
        files
            .get(task - 1)
            .cloned()
            .ok_or_else(|| Error::Usage(format!("task {task} not found in {}", data.display())))?
    } else {
        data.to_path_buf()
    };
    load_dataset(&[file])
}

fn generate(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let gt = make_ground_truth(&cfg.generator, cfg.seed)?;
    let ds = sample_dataset(&gt, &cfg.records_per_task, cfg.seed)?;
    let files = write_dataset(out, &MultiTaskDataset::from_synthetic(&ds)?)?;
    let manifest = Manifest::new(&gt, &cfg.generator, cfg.seed, &cfg.records_per_task);
    write_text(&out.join("manifest.json"), &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    echo_config(cfg, out, true)?;
    Ok(json!({ "files": files, "records_per_task": cfg.records_per_task }))
}

fn train_cmd(cfg: &RunConfig, data: &Path, out: &Path) -> Result<Value> {
    let raw = load_dataset(&task_files(data)?)?;
    let (norm, normalizers) = prepared(&raw, cfg)?;
    let spec = GraphSpec::standard(raw.tasks.len(), raw.confounders, cfg.mechanisms)?;
    let model = build_model(&spec, &cfg.model)?;
    let (model, report) = train(&model, &norm.task_data(Some(Split::Train))?, &cfg.train)?;
    let ck = Checkpoint {
        model,
        normalizers,
        provenance: provenance(cfg)?,
    };
    save_checkpoint(&ck, out)?;
    let report_path = out.with_extension("report.json");
    write_text(&report_path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    echo_config(cfg, out, false)?;
    Ok(json!({
        "checkpoint": out,
        "report": report_path,
        "best_epoch": report.best_epoch,
        "epochs_run": report.epochs.len(),
        "best_monitored_nll": report.best_monitored_nll(),
    }))
}

fn infer(cfg: &RunConfig, model: &Path, data: &Path, task: usize, out: &Path) -> Result<Value> {
    let ck = load_checkpoint(model)?;
    let k = task - 1;
    ck.model.spec().check_task(k)?;
    let raw = if data.is_dir() { one_task(data, task)? } else { load_dataset(&[data])? };
    let table = &raw.tasks[0];
    let normalized = match ck.normalizers.get(k) {
        Some(n) => n.apply(table),
        None => table.clone(),
    };
    let results = map_estimate_batch(&ck.model, &normalized.y, &normalized.z, k, &cfg.map)?;
    let forward = ck.model.evaluate_task(k, &normalized.z, None, None, None)?;
    let denorm = |v: f64| ck.normalizers.get(k).map_or(v, |n| n.denormalize_x(v));
    let m = ck.model.spec().mechanism_count();
    let mut text = String::from("unit,period,x_hat,x_forward");
    for i in 1..=m {
        text.push_str(&format!(",w_hat_{i}"));
    }
    text.push('\n');
    for (r, res) in results.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{}",
            table.units[r],
            table.periods[r],
            denorm(res.x),
            denorm(forward.x.get(r, 0))
        ));
        for w in &res.w {
            text.push_str(&format!(",{w}"));
        }
        text.push('\n');
    }
    write_text(out, &text)?;
    echo_config(cfg, out, false)?;
    let converged = results.iter().filter(|r| r.converged).count();
    Ok(json!({ "estimates": out, "records": results.len(), "converged": converged }))
}

fn read_estimates(path: &Path) -> Result<Vec<(String, String, f64)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?
        .clone();
    let col = headers
        .iter()
        .position(|h| h == "x_hat")
        .ok_or_else(|| Error::Ingestion {
            file: path.display().to_string(),
            line: 1,
            message: "missing column `x_hat`".into(),
        })?;
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Contract(format!("{}: {e}", path.display())))?;
        let v = rec[col].trim().parse::<f64>().map_err(|_| Error::Ingestion {
            file: path.display().to_string(),
            line: i + 2,
            message: format!("non-numeric x_hat `{}`", &rec[col]),
        })?;
        out.push((rec[0].to_string(), rec[1].to_string(), v));
    }
    Ok(out)
}

fn eval_cmd(estimates: &Path, truth: &Path, model: Option<&Path>, manifest: Option<&Path>, out: Option<&Path>) -> Result<Value> {
    let est = read_estimates(estimates)?;
    let table = load_task(truth)?;
    let x_true = table.x_true.as_ref().ok_or_else(|| Error::Ingestion {
        file: truth.display().to_string(),
        line: 1,
        message: "missing column `x_true`".into(),
    })?;
    let index: std::collections::HashMap<(&str, &str), usize> = table
        .units
        .iter()
        .zip(&table.periods)
        .enumerate()
        .map(|(r, (u, p))| ((u.as_str(), p.as_str()), r))
        .collect();
    let mut e = Vec::with_capacity(est.len());
    let mut t = Vec::with_capacity(est.len());
    for (u, p, v) in &est {
        let r = index
            .get(&(u.as_str(), p.as_str()))
            .ok_or_else(|| Error::Contract(format!("estimate for unknown unit-period ({u}, {p})")))?;
        e.push(*v);
        t.push(x_true[*r]);
    }
    let (mae, mse) = reconstruction_error(&e, &t)?;
    let mut rows = vec![("mae", mae), ("mse", mse)];
    if let (Some(model), Some(manifest)) = (model, manifest) {
        let ck = load_checkpoint(model)?;
        let m: Manifest = serde_json::from_value(read_json(manifest)?)?;
        let s = edge_scores(&learned_edges(&ck.model)?, &m.edges);
        rows.extend([("edge_precision", s.precision), ("edge_recall", s.recall), ("edge_f1", s.f1)]);
    }
    let mut text = String::from("metric,value\n");
    for (k, v) in &rows {
        text.push_str(&format!("{k},{v}\n"));
    }
    if let Some(out) = out {
        write_text(out, &text)?;
    }
    Ok(Value::Object(rows.into_iter().map(|(k, v)| (k.to_string(), json!(v))).collect()))
}

fn transfer_cmd(cfg: &RunConfig, mode: TransferMode, teacher: &Path, data: &Path, task: usize, student: Option<&Path>, out: &Path) -> Result<Value> {
    let teacher = load_checkpoint(teacher)?.model;
    let raw = one_task(data, task)?;
    let (norm, normalizers) = prepared(&raw, cfg)?;
    let student = match mode {
        TransferMode::ZeroShot => {
            let path = student.ok_or_else(|| Error::Usage("zero-shot needs --student".into()))?;
            let mut s = load_checkpoint(path)?.model;
            crate::evalsuite::copy_shared(&teacher, &mut s)?;
            s
        }
        TransferMode::HeadOnly | TransferMode::Full => {
            let spec = GraphSpec::standard(1, raw.confounders, teacher.spec().mechanism_count())?;
            let mut s = build_model(
                &spec,
                &ModelConfig {
                    seed: cfg.seed,
                    ..teacher.config().clone()
                },
            )?;
            crate::evalsuite::copy_shared(&teacher, &mut s)?;
            let head_only = mode == TransferMode::HeadOnly;
            let data = norm.task_data(Some(Split::Train))?;
            train_with(&s, &data, &cfg.train, move |g| !head_only || matches!(g, ParamGroup::Task(_)))?.0
        }
    };
    let ck = Checkpoint {
        model: student,
        normalizers,
        provenance: provenance(cfg)?,
    };
    save_checkpoint(&ck, out)?;
    echo_config(cfg, out, false)?;
    Ok(json!({ "checkpoint": out, "mode": mode.label() }))
}

fn experiment(plan_path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Value> {
    let mut plan: ExperimentPlan = serde_json::from_value(read_json(plan_path)?)
        .map_err(|e| Error::Usage(format!("invalid plan: {e}")))?;
    if let Some(s) = seed {
        plan.seeds = vec![s];
    }
    let report = run_experiment(&plan)?;
    let summary = report.summary_text();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_text(&dir.join("report.csv"), &report.to_csv())?;
        write_text(&dir.join("edges.csv"), &report.edges_csv())?;
        write_text(&dir.join("summary.txt"), &summary)?;
        write_text(&dir.join("plan.json"), &(serde_json::to_string_pretty(&plan)? + "\n"))?;
    }
    Ok(json!({ "summary": summary, "failures": report.failures.len() }))
}

fn dispatch(cli: Cli, dotted: &[(String, String)]) -> Result<Value> {
    let common = &cli.common;
    let file = common.config.as_deref().map(read_json).transpose()?;
    let mut cfg = RunConfig::resolve(file.as_ref(), dotted, common.seed)?;
    match cli.command {
        Command::Generate => generate(&cfg, require_out(common)?),
        Command::Train { data, w } => {
            if let Some(w) = w {
                cfg.train.w = w;
            }
            train_cmd(&cfg, &data, require_out(common)?)
        }
        Command::Infer { model, data, task } => infer(&cfg, &model, &data, task, require_out(common)?),
        Command::Eval {
            estimates,
            truth,
            model,
            manifest,
        } => eval_cmd(&estimates, &truth, model.as_deref(), manifest.as_deref(), common.out.as_deref()),
        Command::Transfer {
            mode,
            teacher,
            data,
            task,
            student,
        } => transfer_cmd(&cfg, mode.into(), &teacher, &data, task, student.as_deref(), require_out(common)?),
        Command::Experiment { plan } => experiment(&plan, common.seed, common.out.as_deref()),
        Command::ExportGraph { model } => {
            let out = require_out(common)?;
            let ck = load_checkpoint(&model)?;
            export_graph(&ck.model, out)?;
            Ok(json!({ "graph": out }))
        }
    }
}

fn error_line(kind: &str, message: &str) -> String {
    json!({ "error": kind, "message": message }).to_string()
}

/// Runs the command line `args` (program name first) and returns the exit
/// status: 0 on success, 2 on usage errors, 1 on runtime failures. Results
/// go to stdout as one JSON object, failures to stderr as one JSON line.
pub fn run(args: &[String]) -> i32 {
    let mut stdout = std::io::stdout();
    let mut stderr = std::io::stderr();
    let (rest, dotted) = match split_dotted(args) {
        Ok(v) => v,
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(e.kind(), &e.to_string()));
            return 2;
        }
    };
    let cli = match Cli::try_parse_from(&rest) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            let _ = writeln!(stderr, "{}", error_line("usage", first));
            return 2;
        }
    };
    match dispatch(cli, &dotted) {
        Ok(v) => {
            let _ = writeln!(stdout, "{v}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", error_line(e.kind(), &e.to_string()));
            if matches!(e, Error::Usage(_)) {
                2
            } else {
                1
            }
        }
    }
}
