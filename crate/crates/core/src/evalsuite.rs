//! Reconstruction and structure metrics, and the experiment protocols run on
//! synthetic data: joint vs single-task training, transfer modes, and the
//! mechanism-count and no-MAP ablations.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{fit_apply_normalizer, split_dataset, MultiTaskDataset, Split};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::map_infer::{map_estimate_batch, MapConfig};
use crate::oracle::{make_ground_truth, sample_dataset, Edge, GeneratorConfig, GroundTruthSem};
use crate::sem::{build_model, ModelConfig, ParamGroup, SemModel};
use crate::training::{train, train_with, TaskData, TrainConfig};

/// Mean absolute and mean squared difference.
pub fn reconstruction_error(estimates: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if estimates.len() != truth.len() || estimates.is_empty() {
        return Err(Error::Contract(format!(
            "need equal non-empty lengths, got {} estimates and {} truths",
            estimates.len(),
            truth.len()
        )));
    }
    let n = estimates.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (e, t) in estimates.iter().zip(truth) {
        let d = e - t;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, sq / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Set-overlap scores; empty sets score 0 rather than NaN.
pub fn edge_scores(learned: &[Edge], truth: &[Edge]) -> EdgeScores {
    let learned: HashSet<&Edge> = learned.iter().collect();
    let truth: HashSet<&Edge> = truth.iter().collect();
    let tp = learned.intersection(&truth).count() as f64;
    let precision = if learned.is_empty() { 0.0 } else { tp / learned.len() as f64 };
    let recall = if truth.is_empty() { 0.0 } else { tp / truth.len() as f64 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    EdgeScores { precision, recall, f1 }
}

/// Learnable positions whose hardened weight is 1.
pub fn learned_edges(model: &SemModel) -> Result<Vec<Edge>> {
    let hard = model.adjacency.harden()?;
    let spec = model.spec();
    let mut out = Vec::new();
    for c in 0..spec.len() {
        for p in 0..spec.len() {
            if model.adjacency.is_learnable(c, p) && hard.get(c, p) == 1.0 {
                out.push(Edge {
                    child: spec.name(c).to_string(),
                    parent: spec.name(p).to_string(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

/// Median (mean of the middle pair for even counts), min and max.
pub fn summarize(values: &[f64]) -> Option<Summary> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
    Some(Summary {
        median,
        min: v[0],
        max: v[n - 1],
    })
}

/// Swaps the task-invariant part of `from` into `to`: every mechanism
/// backbone and the adjacency logits of the mechanism rows, matched by name.
pub fn copy_shared(from: &SemModel, to: &mut SemModel) -> Result<()> {
    let (fs, ts) = (from.spec().clone(), to.spec().clone());
    if fs.confounder_count() != ts.confounder_count() || fs.mechanism_count() != ts.mechanism_count() {
        return Err(Error::Contract("shared parts need equal confounder and mechanism counts".into()));
    }
    for (src, dst) in from.mechanisms().iter().zip(to.mechanisms_mut()) {
        if src.backbone.layer_sizes() != dst.backbone.layer_sizes() {
            return Err(Error::Contract("backbone architectures differ".into()));
        }
        dst.backbone = src.backbone.clone();
    }
    for (&w_from, &w_to) in fs.mechanisms().iter().zip(ts.mechanisms()) {
        for (&z_from, &z_to) in fs.confounders().iter().zip(ts.confounders()) {
            let v = from.adjacency.logits.get(w_from, z_from);
            to.adjacency.logits.set(w_to, z_to, v);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    JointVsSingle,
    Transfer,
    #[serde(rename = "ablation_W")]
    AblationW,
    AblationNoMap,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    ZeroShot,
    HeadOnly,
    Full,
}

impl TransferMode {
    pub fn label(self) -> &'static str {
        match self {
            TransferMode::ZeroShot => "zero_shot",
            TransferMode::HeadOnly => "head_only",
            TransferMode::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub kind: ExperimentKind,
    pub seeds: Vec<u64>,
    pub generator: GeneratorConfig,
    pub records_per_task: Vec<usize>,
    pub split_fraction: f64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub map: MapConfig,
    /// Held-out task of the transfer protocol (zero-based).
    pub target_task: usize,
    /// Model mechanism counts of the `ablation_W` sweep.
    pub mechanism_sweep: Vec<usize>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::AblationNoMap,
            seeds: (0..5).collect(),
            generator: GeneratorConfig::default(),
            records_per_task: vec![2000; 3],
            split_fraction: 0.8,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            map: MapConfig::default(),
            target_task: 0,
            mechanism_sweep: vec![1, 3, 5],
        }
    }
}

impl ExperimentPlan {
    pub fn new(kind: ExperimentKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Contract(m));
        if self.seeds.is_empty() {
            return bad("plan needs at least one seed".into());
        }
        if self.records_per_task.len() != self.generator.tasks {
            return bad(format!(
                "records_per_task has {} entries for {} tasks",
                self.records_per_task.len(),
                self.generator.tasks
            ));
        }
        if self.records_per_task.iter().any(|&n| n < 5) {
            return bad("every task needs at least 5 records".into());
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return bad(format!("split fraction must lie in (0,1), got {}", self.split_fraction));
        }
        self.train.validate()?;
        self.map.validate()?;
        match self.kind {
            ExperimentKind::Transfer => {
                if self.generator.tasks < 2 {
                    return bad("transfer needs at least two tasks".into());
                }
                if self.target_task >= self.generator.tasks {
                    return bad(format!("target task {} out of range", self.target_task));
                }
            }
            ExperimentKind::AblationW => {
                if self.mechanism_sweep.is_empty() || self.mechanism_sweep.contains(&0) {
                    return bad("mechanism sweep needs positive counts".into());
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// One scored arm on one task of one seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub seed: u64,
    pub arm: String,
    /// Zero-based task of the generated data.
    pub task: usize,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeRow {
    pub seed: u64,
    pub arm: String,
    pub scores: EdgeScores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub seed: u64,
    pub arm: String,
    pub message: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub kind: ExperimentKind,
    pub rows: Vec<MetricRow>,
    pub edges: Vec<EdgeRow>,
    pub failures: Vec<Failure>,
}

impl MetricReport {
    pub fn maes(&self, arm: &str, task: usize) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.arm == arm && r.task == task)
            .map(|r| r.mae)
            .collect()
    }

    pub fn mae_summary(&self, arm: &str, task: usize) -> Option<Summary> {
        summarize(&self.maes(arm, task))
    }

    pub fn f1_summary(&self, arm: &str) -> Option<Summary> {
        let v: Vec<f64> = self.edges.iter().filter(|e| e.arm == arm).map(|e| e.scores.f1).collect();
        summarize(&v)
    }

    /// Arms in first-seen order.
    pub fn arms(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.arm) {
                out.push(r.arm.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,arm,task,mae,mse\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.seed, r.arm, r.task + 1, r.mae, r.mse);
        }
        s
    }

    pub fn edges_csv(&self) -> String {
        let mut s = String::from("seed,arm,precision,recall,f1\n");
        for e in &self.edges {
            let _ = writeln!(
                s,
                "{},{},{},{},{}",
                e.seed, e.arm, e.scores.precision, e.scores.recall, e.scores.f1
            );
        }
        s
    }

    /// Median [min, max] MAE per arm and task, edge F1, and any failed runs.
    pub fn summary_text(&self) -> String {
        let mut s = format!("experiment {:?}\n", self.kind);
        let tasks: BTreeMap<usize, ()> = self.rows.iter().map(|r| (r.task, ())).collect();
        for arm in self.arms() {
            for &task in tasks.keys() {
                if let Some(m) = self.mae_summary(&arm, task) {
                    let _ = writeln!(
                        s,
                        "  {arm:<12} task {}  MAE median {:.4} [{:.4}, {:.4}]",
                        task + 1,
                        m.median,
                        m.min,
                        m.max
                    );
                }
            }
        }
        let mut edge_arms: Vec<&str> = Vec::new();
        for e in &self.edges {
            if !edge_arms.contains(&e.arm.as_str()) {
                edge_arms.push(&e.arm);
            }
        }
        for arm in edge_arms {
            if let Some(f) = self.f1_summary(arm) {
                let _ = writeln!(s, "  {arm:<12} edge F1 median {:.3} [{:.3}, {:.3}]", f.median, f.min, f.max);
            }
        }
        for f in &self.failures {
            let _ = writeln!(s, "  FAILED seed {} arm {}: {}", f.seed, f.arm, f.message);
        }
        s
    }
}

/// Normalized train and test tensors of one seed, plus its ground truth.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub ground_truth: GroundTruthSem,
    pub train: Vec<TaskData>,
    pub test: Vec<TaskData>,
}

/// Generates, splits and z-scores the data of one seed.
pub fn prepare(plan: &ExperimentPlan, seed: u64) -> Result<PreparedData> {
    let gt = make_ground_truth(&plan.generator, seed)?;
    let raw = sample_dataset(&gt, &plan.records_per_task, seed)?;
    let data = split_dataset(&MultiTaskDataset::from_synthetic(&raw)?, plan.split_fraction, seed)?;
    let (data, _) = fit_apply_normalizer(&data)?;
    Ok(PreparedData {
        ground_truth: gt,
        train: data.task_data(Some(Split::Train))?,
        test: data.task_data(Some(Split::Test))?,
    })
}

/// Test MAE/MSE of MAP, forward-mode and reports-as-events estimates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TaskScores {
    pub map: (f64, f64),
    pub forward: (f64, f64),
    pub baseline: (f64, f64),
}

/// Scores task `task` of `model` on `test`, whose `x` must be present.
pub fn score_task(model: &SemModel, task: usize, test: &TaskData, map: &MapConfig) -> Result<TaskScores> {
    let truth = test
        .x
        .as_ref()
        .ok_or_else(|| Error::Contract("scoring needs the true cause".into()))?
        .as_slice();
    let y = test.y.as_slice();
    let estimates: Vec<f64> = map_estimate_batch(model, y, &test.z, task, map)?
        .iter()
        .map(|r| r.x)
        .collect();
    let forward = model.evaluate_task(task, &test.z, None, None, None)?.x.into_vec();
    Ok(TaskScores {
        map: reconstruction_error(&estimates, truth)?,
        forward: reconstruction_error(&forward, truth)?,
        baseline: reconstruction_error(y, truth)?,
    })
}

fn fit(plan: &ExperimentPlan, seed: u64, spec: &GraphSpec, train_sets: &[TaskData]) -> Result<SemModel> {
    let model = build_model(
        spec,
        &ModelConfig {
            seed,
            ..plan.model.clone()
        },
    )?;
    let cfg = TrainConfig {
        seed,
        ..plan.train.clone()
    };
    Ok(train(&model, train_sets, &cfg)?.0)
}

fn joint_spec(plan: &ExperimentPlan, tasks: usize, mechanisms: usize) -> Result<GraphSpec> {
    GraphSpec::standard(tasks, plan.generator.confounders, mechanisms)
}

/// The transfer students of `target` given a trained teacher. The single-task
/// model is trained from the student's own initialization.
pub fn transfer_students(
    plan: &ExperimentPlan,
    seed: u64,
    teacher: &SemModel,
    single: &SemModel,
    target_train: &TaskData,
    mode: TransferMode,
) -> Result<SemModel> {
    let cfg = TrainConfig {
        seed,
        ..plan.train.clone()
    };
    let data = std::slice::from_ref(target_train);
    match mode {
        TransferMode::ZeroShot => {
            let mut student = single.clone();
            copy_shared(teacher, &mut student)?;
            Ok(student)
        }
        TransferMode::HeadOnly | TransferMode::Full => {
            let mut student = build_model(
                single.spec(),
                &ModelConfig {
                    seed,
                    ..plan.model.clone()
                },
            )?;
            copy_shared(teacher, &mut student)?;
            let head_only = mode == TransferMode::HeadOnly;
            let trainable = move |g: ParamGroup| !head_only || matches!(g, ParamGroup::Task(_));
            Ok(train_with(&student, data, &cfg, trainable)?.0)
        }
    }
}

struct SeedOutcome {
    rows: Vec<MetricRow>,
    edges: Vec<EdgeRow>,
    failures: Vec<Failure>,
}

impl SeedOutcome {
    fn new() -> Self {
        Self {
            rows: Vec::new(),
            edges: Vec::new(),
            failures: Vec::new(),
        }
    }

    fn push(&mut self, seed: u64, arm: &str, task: usize, (mae, mse): (f64, f64)) {
        self.rows.push(MetricRow {
            seed,
            arm: arm.to_string(),
            task,
            mae,
            mse,
        });
    }

    /// Records an arm failure instead of aborting the seed.
    fn attempt<T>(&mut self, seed: u64, arm: &str, r: Result<T>) -> Option<T> {
        match r {
            Ok(v) => Some(v),
            Err(e) => {
                self.failures.push(Failure {
                    seed,
                    arm: arm.to_string(),
                    message: e.to_string(),
                });
                None
            }
        }
    }

    fn edges_of(&mut self, seed: u64, arm: &str, model: &SemModel, gt: &GroundTruthSem) {
        if let Some(learned) = self.attempt(seed, arm, learned_edges(model)) {
            self.edges.push(EdgeRow {
                seed,
                arm: arm.to_string(),
                scores: edge_scores(&learned, &gt.edges()),
            });
        }
    }
}

fn run_seed(plan: &ExperimentPlan, seed: u64) -> SeedOutcome {
    let mut out = SeedOutcome::new();
    let Some(data) = out.attempt(seed, "data", prepare(plan, seed)) else {
        return out;
    };
    let k_all = plan.generator.tasks;
    let m = plan.generator.mechanisms;
    let map = &plan.map;
    match plan.kind {
        ExperimentKind::AblationNoMap => {
            let joint = joint_spec(plan, k_all, m).and_then(|s| fit(plan, seed, &s, &data.train));
            if let Some(model) = out.attempt(seed, "joint", joint) {
                for k in 0..k_all {
                    if let Some(s) = out.attempt(seed, "map", score_task(&model, k, &data.test[k], map)) {
                        out.push(seed, "map", k, s.map);
                        out.push(seed, "forward", k, s.forward);
                        out.push(seed, "baseline", k, s.baseline);
                    }
                }
                out.edges_of(seed, "joint", &model, &data.ground_truth);
            }
        }
        ExperimentKind::JointVsSingle => {
            let joint = joint_spec(plan, k_all, m).and_then(|s| fit(plan, seed, &s, &data.train));
            if let Some(model) = out.attempt(seed, "joint", joint) {
                for k in 0..k_all {
                    if let Some(s) = out.attempt(seed, "joint", score_task(&model, k, &data.test[k], map)) {
                        out.push(seed, "joint", k, s.map);
                    }
                }
                out.edges_of(seed, "joint", &model, &data.ground_truth);
            }
            for k in 0..k_all {
                let single = joint_spec(plan, 1, m)
                    .and_then(|s| fit(plan, seed, &s, std::slice::from_ref(&data.train[k])))
                    .and_then(|model| score_task(&model, 0, &data.test[k], map));
                if let Some(s) = out.attempt(seed, "single", single) {
                    out.push(seed, "single", k, s.map);
                }
            }
        }
        ExperimentKind::Transfer => {
            let target = plan.target_task;
            let sources: Vec<TaskData> = (0..k_all).filter(|&k| k != target).map(|k| data.train[k].clone()).collect();
            let teacher = joint_spec(plan, k_all - 1, m).and_then(|s| fit(plan, seed, &s, &sources));
            let single = joint_spec(plan, 1, m).and_then(|s| fit(plan, seed, &s, std::slice::from_ref(&data.train[target])));
            let (Some(teacher), Some(single)) = (out.attempt(seed, "teacher", teacher), out.attempt(seed, "single", single))
            else {
                return out;
            };
            if let Some(s) = out.attempt(seed, "single", score_task(&single, 0, &data.test[target], map)) {
                out.push(seed, "single", target, s.map);
            }
            for mode in [TransferMode::ZeroShot, TransferMode::HeadOnly, TransferMode::Full] {
                let r = transfer_students(plan, seed, &teacher, &single, &data.train[target], mode)
                    .and_then(|student| score_task(&student, 0, &data.test[target], map));
                if let Some(s) = out.attempt(seed, mode.label(), r) {
                    out.push(seed, mode.label(), target, s.map);
                }
            }
        }
        ExperimentKind::AblationW => {
            for &mm in &plan.mechanism_sweep {
                let arm = format!("M={mm}");
                let r = joint_spec(plan, k_all, mm).and_then(|s| fit(plan, seed, &s, &data.train));
                if let Some(model) = out.attempt(seed, &arm, r) {
                    for k in 0..k_all {
                        if let Some(s) = out.attempt(seed, &arm, score_task(&model, k, &data.test[k], map)) {
                            out.push(seed, &arm, k, s.map);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Runs the plan's protocol for every seed (in parallel, collected in seed
/// order). Failed arms are listed in the report, not raised.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<MetricReport> {
    plan.validate()?;
    let outcomes: Vec<SeedOutcome> = plan.seeds.par_iter().map(|&s| run_seed(plan, s)).collect();
    let mut report = MetricReport {
        kind: plan.kind,
        rows: Vec::new(),
        edges: Vec::new(),
        failures: Vec::new(),
    };
    for o in outcomes {
        report.rows.extend(o.rows);
        report.edges.extend(o.edges);
        report.failures.extend(o.failures);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(c: &str, p: &str) -> Edge {
        Edge {
            child: c.into(),
            parent: p.into(),
        }
    }

    #[test]
    fn reconstruction_hand_values() {
        assert_eq!(reconstruction_error(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(reconstruction_error(&[1.0, 3.0], &[2.0, 5.0]).unwrap(), (1.5, 2.5));
        assert_eq!(reconstruction_error(&[0.0], &[2.0]).unwrap(), (2.0, 4.0));
        assert!(reconstruction_error(&[1.0], &[1.0, 2.0]).is_err());
        assert!(reconstruction_error(&[], &[]).is_err());
    }

    #[test]
    fn edge_score_hand_values() {
        let truth = [e("X", "Z1"), e("X", "Z2")];
        let s = edge_scores(&[e("X", "Z1")], &truth);
        assert_eq!((s.precision, s.recall), (1.0, 0.5));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        let s = edge_scores(&truth, &truth);
        assert_eq!((s.precision, s.recall, s.f1), (1.0, 1.0, 1.0));
        let s = edge_scores(&[e("X", "Z3")], &truth);
        assert_eq!((s.precision, s.recall, s.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn summaries() {
        let s = summarize(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.median, s.min, s.max), (2.0, 1.0, 3.0));
        assert_eq!(summarize(&[4.0, 1.0, 2.0, 3.0]).unwrap().median, 2.5);
        assert!(summarize(&[]).is_none());
    }

    #[test]
    fn plan_validation() {
        let mut p = ExperimentPlan::new(ExperimentKind::Transfer);
        assert!(p.validate().is_ok());
        p.target_task = 3;
        assert!(p.validate().is_err());
        let mut p = ExperimentPlan::new(ExperimentKind::JointVsSingle);
        p.records_per_task = vec![10, 10];
        assert!(p.validate().is_err());
        let text = r#"{"kind":"ablation_W","seeds":[1]}"#;
        let p: ExperimentPlan = serde_json::from_str(text).unwrap();
        assert_eq!(p.kind, ExperimentKind::AblationW);
        assert_eq!(p.mechanism_sweep, vec![1, 3, 5]);
    }

    #[test]
    fn copy_shared_matches_rows_by_name() {
        let teacher_spec = GraphSpec::standard(2, 3, 2).unwrap();
        let mut teacher = build_model(&teacher_spec, &ModelConfig::with_seed(1)).unwrap();
        let w2 = teacher_spec.index_of("W2").unwrap();
        let z3 = teacher_spec.index_of("Z3").unwrap();
        teacher.adjacency.logits.set(w2, z3, 2.5);
        let student_spec = GraphSpec::standard(1, 3, 2).unwrap();
        let mut student = build_model(&student_spec, &ModelConfig::with_seed(2)).unwrap();
        copy_shared(&teacher, &mut student).unwrap();
        let z = [0.3, -1.0, 0.7];
        for i in 0..2 {
            assert_eq!(
                student.backbone_embedding(i, &z).unwrap(),
                teacher.backbone_embedding(i, &z).unwrap()
            );
        }
        let (sw2, sz3) = (student_spec.index_of("W2").unwrap(), student_spec.index_of("Z3").unwrap());
        assert_eq!(student.adjacency.logits.get(sw2, sz3), 2.5);
    }

    #[test]
    fn tiny_plan_runs_every_kind_reproducibly() {
        for kind in [
            ExperimentKind::AblationNoMap,
            ExperimentKind::JointVsSingle,
            ExperimentKind::Transfer,
            ExperimentKind::AblationW,
        ] {
            let mut plan = ExperimentPlan::new(kind);
            plan.seeds = vec![0, 1];
            plan.generator.confounders = 3;
            plan.generator.mechanisms = 2;
            plan.generator.parents_per_node = 2;
            plan.records_per_task = vec![40, 40, 40];
            plan.model.hidden_layers = vec![4];
            plan.model.embed = 2;
            plan.train.epochs = 2;
            plan.train.batch_size = 16;
            plan.map.max_iterations = 50;
            plan.mechanism_sweep = vec![1, 2];
            let a = run_experiment(&plan).unwrap();
            let b = run_experiment(&plan).unwrap();
            assert_eq!(a, b);
            assert!(a.failures.is_empty(), "{:?}", a.failures);
            assert!(a.rows.iter().all(|r| r.mae >= 0.0 && r.mse >= 0.0));
            assert!(a.edges.iter().all(|e| (0.0..=1.0).contains(&e.scores.f1)));
            assert!(a.summary_text().contains("MAE median"));
            assert!(a.to_csv().lines().count() > 1);
        }
    }
}
