//! Joint multi-task fitting: mean node NLL per task, summed over tasks, plus
//! `w` times the acyclicity penalty of the soft adjacency. Each optimizer step
//! draws one minibatch from every task, cycling smaller tasks, and the
//! parameters of the best validation epoch are restored at the end.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, Matrix, OptimizerState, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::acyclicity_on;
use crate::sem::{BoundModel, CauseInput, MechanismInput, ParamGroup, SemModel};

/// Which latent values the loss sees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// `X` replaced by the mode of `p(X | Z)`.
    Latent,
    /// `X` read from the data (synthetic benchmarking).
    CauseObserved,
}

/// How tasks with fewer minibatches are scheduled within an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interleave {
    /// Every step takes one batch of every task; smaller tasks wrap around
    /// until the largest task has been seen once.
    Cycle,
    /// Every step takes the next batch of each task that still has one, so
    /// each task is seen exactly once per epoch.
    Exhaust,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Acyclicity weight.
    pub w: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub step_size: f64,
    pub seed: u64,
    pub patience: usize,
    pub validation_fraction: f64,
    pub supervision: Supervision,
    pub interleave: Interleave,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w: 10.0,
            epochs: 300,
            batch_size: 64,
            step_size: 1e-3,
            seed: 0,
            patience: 30,
            validation_fraction: 0.2,
            supervision: Supervision::CauseObserved,
            interleave: Interleave::Cycle,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return Err(Error::InvalidSpec(format!("w must be finite and >= 0, got {}", self.w)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be positive".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidSpec(format!("step size must be positive, got {}", self.step_size)));
        }
        if self.patience == 0 {
            return Err(Error::InvalidSpec("patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::InvalidSpec(format!(
                "validation fraction must lie in [0,1), got {}",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// Normalized records of one task: `z` is n×L, `y` and `x` are n×1.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub z: Matrix,
    pub y: Matrix,
    pub x: Option<Matrix>,
}

impl TaskData {
    pub fn new(z: Matrix, y: Vec<f64>, x: Option<Vec<f64>>) -> Result<Self> {
        let n = z.rows();
        if y.len() != n || x.as_ref().is_some_and(|x| x.len() != n) {
            return Err(Error::Shape(format!("{n} confounder rows but mismatched y/x lengths")));
        }
        Ok(Self {
            z,
            y: Matrix::column_vector(&y),
            x: x.map(|x| Matrix::column_vector(&x)),
        })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }

    /// Rows `idx`, in that order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let pick = |m: &Matrix| {
            let mut out = Matrix::zeros(idx.len(), m.cols());
            for (r, &i) in idx.iter().enumerate() {
                out.row_mut(r).copy_from_slice(m.row(i));
            }
            out
        };
        Self {
            z: pick(&self.z),
            y: pick(&self.y),
            x: self.x.as_ref().map(pick),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// One-based epoch number.
    pub epoch: usize,
    /// Mean minibatch NLL per task over the epoch.
    pub train_nll: Vec<f64>,
    /// Validation NLL per task over all in-scope nodes.
    pub validation_nll: Vec<f64>,
    /// Validation NLL per task over observed nodes only; drives early stopping.
    pub monitored_nll: Vec<f64>,
    pub acyclicity: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_validation_nll: Vec<f64>,
    pub initial_monitored_nll: Vec<f64>,
    pub epochs: Vec<EpochStats>,
    /// Epoch whose parameters were kept; 0 means the initial parameters.
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub seconds: f64,
}

impl PartialEq for TrainReport {
    /// Wall-clock time is ignored.
    fn eq(&self, other: &Self) -> bool {
        self.initial_validation_nll == other.initial_validation_nll
            && self.initial_monitored_nll == other.initial_monitored_nll
            && self.epochs == other.epochs
            && self.best_epoch == other.best_epoch
            && self.stopped_early == other.stopped_early
    }
}

impl TrainReport {
    /// Monitored validation NLL summed over tasks at the kept epoch.
    pub fn best_monitored_nll(&self) -> f64 {
        if self.best_epoch == 0 {
            self.initial_monitored_nll.iter().sum()
        } else {
            self.epochs[self.best_epoch - 1].monitored_nll.iter().sum()
        }
    }
}

/// `X` and `W` values the loss uses for one record.
pub fn training_surrogate_for_latents(
    model: &SemModel,
    task: usize,
    z: &[f64],
    x: Option<f64>,
    supervision: Supervision,
) -> Result<(f64, Vec<f64>)> {
    let x = match supervision {
        Supervision::Latent => None,
        Supervision::CauseObserved => Some(x.ok_or_else(|| {
            Error::Contract("cause-observed supervision needs a recorded cause".into())
        })?),
    };
    let a = model.forward_modes(z, task, x)?;
    Ok((a.x, a.w))
}

pub(crate) struct LossVars {
    pub total: Var,
    pub nll: Vec<Var>,
    pub monitored: Vec<Var>,
    pub acyclicity: Var,
}

/// Records the loss of `batches` (task index, data) on `tape`.
pub(crate) fn loss_on_tape<'a>(
    model: &'a SemModel,
    tape: &mut Tape<'a>,
    bound: &BoundModel,
    batches: &'a [(usize, TaskData)],
    w: f64,
    supervision: Supervision,
) -> Result<LossVars> {
    if batches.is_empty() {
        return Err(Error::Contract("loss needs at least one batch".into()));
    }
    let m = model.spec().mechanism_count();
    let mut nll = Vec::with_capacity(batches.len());
    let mut monitored = Vec::with_capacity(batches.len());
    for (task, data) in batches {
        if data.is_empty() {
            return Err(Error::Contract(format!("empty batch for task {}", task + 1)));
        }
        let z = tape.constant_ref(&data.z);
        let y = tape.constant_ref(&data.y);
        let (cause, observed_nodes) = match supervision {
            Supervision::Latent => (CauseInput::Mode, 1.0),
            Supervision::CauseObserved => {
                let x = data.x.as_ref().ok_or_else(|| {
                    Error::Contract(format!(
                        "cause-observed supervision but task {} has no recorded cause",
                        task + 1
                    ))
                })?;
                (CauseInput::Observed(tape.constant_ref(x)), 2.0)
            }
        };
        let terms = bound.task_terms(model, tape, *task, z, cause, MechanismInput::Mean, Some(y))?;
        let joint = terms.joint(tape)?;
        let mean = tape.mean(joint);
        nll.push(tape.scale(mean, -1.0 / (m + 2) as f64));

        let y_ll = terms.y_log_density.expect("outcome supplied");
        let observed = match supervision {
            Supervision::Latent => y_ll,
            Supervision::CauseObserved => tape.add(terms.x_log_density, y_ll)?,
        };
        let mean = tape.mean(observed);
        monitored.push(tape.scale(mean, -1.0 / observed_nodes));
    }
    let acyclicity = acyclicity_on(tape, bound.adjacency)?;
    let mut total = nll[0];
    for &v in &nll[1..] {
        total = tape.add(total, v)?;
    }
    let weighted = tape.scale(acyclicity, w);
    let total = tape.add(total, weighted)?;
    Ok(LossVars {
        total,
        nll,
        monitored,
        acyclicity,
    })
}

/// `Σ_k NLL_k + w·L_acyc` on fixed parameters.
pub fn compute_total_loss(
    model: &SemModel,
    batches: &[(usize, TaskData)],
    w: f64,
    supervision: Supervision,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| false)?;
    let vars = loss_on_tape(model, &mut tape, &bound, batches, w, supervision)?;
    tape.scalar_value(vars.total)
}

/// Loss value and gradients for every registry array, in
/// [`SemModel::parameters`] order.
pub fn loss_and_gradients(
    model: &SemModel,
    batches: &[(usize, TaskData)],
    w: f64,
    supervision: Supervision,
) -> Result<(f64, Vec<Matrix>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| true)?;
    let vars = loss_on_tape(model, &mut tape, &bound, batches, w, supervision)?;
    let value = tape.scalar_value(vars.total)?;
    let grads = tape.backward(vars.total)?;
    Ok((value, bound.vars().iter().map(|&v| grads.wrt(v)).collect()))
}

struct Evaluation {
    nll: Vec<f64>,
    monitored: Vec<f64>,
}

fn evaluate(model: &SemModel, sets: &[(usize, TaskData)], supervision: Supervision) -> Result<Evaluation> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| false)?;
    let vars = loss_on_tape(model, &mut tape, &bound, sets, 0.0, supervision)?;
    let read = |vs: &[Var]| vs.iter().map(|&v| tape.scalar_value(v)).collect::<Result<Vec<_>>>();
    Ok(Evaluation {
        nll: read(&vars.nll)?,
        monitored: read(&vars.monitored)?,
    })
}

/// Splits each task into (training, validation) with a seeded permutation.
pub fn holdout(data: &[TaskData], fraction: f64, seed: u64) -> (Vec<TaskData>, Vec<TaskData>) {
    let mut train = Vec::with_capacity(data.len());
    let mut valid = Vec::with_capacity(data.len());
    for (k, d) in data.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64 + 1);
        let mut idx: Vec<usize> = (0..d.len()).collect();
        idx.shuffle(&mut rng);
        let n_val = ((fraction * d.len() as f64).round() as usize).min(d.len().saturating_sub(1));
        valid.push(d.select(&idx[..n_val]));
        train.push(d.select(&idx[n_val..]));
    }
    (train, valid)
}

/// Trains every parameter group.
pub fn train(model: &SemModel, data: &[TaskData], config: &TrainConfig) -> Result<(SemModel, TrainReport)> {
    train_with(model, data, config, |_| true)
}

/// Trains the groups selected by `trainable`; the others stay bitwise fixed.
pub fn train_with(
    model: &SemModel,
    data: &[TaskData],
    config: &TrainConfig,
    trainable: impl Fn(ParamGroup) -> bool,
) -> Result<(SemModel, TrainReport)> {
    config.validate()?;
    let started = Instant::now();
    let tasks = model.tasks();
    if data.len() != tasks {
        return Err(Error::Contract(format!(
            "model has {tasks} tasks but {} datasets were given",
            data.len()
        )));
    }
    for (k, d) in data.iter().enumerate() {
        if d.is_empty() {
            return Err(Error::Contract(format!("task {} has no records", k + 1)));
        }
    }
    let (train_sets, valid_sets) = holdout(data, config.validation_fraction, config.seed);
    let has_validation = valid_sets.iter().all(|v| !v.is_empty());
    let monitor_sets: Vec<(usize, TaskData)> = if has_validation {
        valid_sets.into_iter().enumerate().collect()
    } else {
        train_sets.iter().cloned().enumerate().collect()
    };

    let mut model = model.clone();
    let initial = evaluate(&model, &monitor_sets, config.supervision)?;
    let mut report = TrainReport {
        initial_validation_nll: initial.nll,
        initial_monitored_nll: initial.monitored.clone(),
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
        seconds: 0.0,
    };
    let mut best_score: f64 = initial.monitored.iter().sum();
    let mut best_model = model.clone();

    let selected: Vec<usize> = model
        .parameters()
        .iter()
        .enumerate()
        .filter(|(_, (info, _))| trainable(info.group))
        .map(|(i, _)| i)
        .collect();
    let shapes: Vec<(usize, usize)> = {
        let params = model.parameters();
        selected.iter().map(|&i| params[i].1.shape()).collect()
    };
    let mut optimizer = OptimizerState::new(AdamConfig::with_step_size(config.step_size), &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(0);
    let batches_per_task: Vec<usize> = train_sets
        .iter()
        .map(|d| d.len().div_ceil(config.batch_size))
        .collect();
    let steps = batches_per_task.iter().copied().max().unwrap_or(0);

    for epoch in 1..=config.epochs {
        let orders: Vec<Vec<usize>> = train_sets
            .iter()
            .map(|d| {
                let mut idx: Vec<usize> = (0..d.len()).collect();
                idx.shuffle(&mut rng);
                idx
            })
            .collect();
        let mut sums = vec![0.0; tasks];
        let mut counts = vec![0usize; tasks];
        let mut acyclicity = 0.0;
        for s in 0..steps {
            let batches: Vec<(usize, TaskData)> = (0..tasks)
                .filter(|&k| config.interleave == Interleave::Cycle || s < batches_per_task[k])
                .map(|k| {
                    let b = s % batches_per_task[k];
                    let lo = b * config.batch_size;
                    let hi = (lo + config.batch_size).min(orders[k].len());
                    (k, train_sets[k].select(&orders[k][lo..hi]))
                })
                .collect();
            let grads = {
                let mut tape = Tape::new();
                let bound = model.bind(&mut tape, &trainable)?;
                let vars = loss_on_tape(&model, &mut tape, &bound, &batches, config.w, config.supervision)?;
                let total = tape.scalar_value(vars.total)?;
                if !total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        message: format!("training loss became {total}"),
                    });
                }
                for ((k, _), &v) in batches.iter().zip(&vars.nll) {
                    sums[*k] += tape.scalar_value(v)?;
                    counts[*k] += 1;
                }
                acyclicity = tape.scalar_value(vars.acyclicity)?;
                let mut g = tape.backward(vars.total)?;
                selected.iter().map(|&i| g.take(bound.vars()[i])).collect::<Vec<_>>()
            };
            let mut params = model.parameters_mut();
            let mut chosen: Vec<&mut Matrix> = Vec::with_capacity(selected.len());
            let mut next = selected.iter().peekable();
            for (i, p) in params.drain(..).enumerate() {
                if next.peek() == Some(&&i) {
                    chosen.push(p);
                    next.next();
                }
            }
            optimizer.step(&mut chosen, &grads)?;
        }
        let eval = evaluate(&model, &monitor_sets, config.supervision)?;
        let score: f64 = eval.monitored.iter().sum();
        if !score.is_finite() {
            return Err(Error::Diverged {
                epoch,
                message: format!("validation NLL became {score}"),
            });
        }
        report.epochs.push(EpochStats {
            epoch,
            train_nll: sums.iter().zip(&counts).map(|(s, &c)| s / c.max(1) as f64).collect(),
            validation_nll: eval.nll,
            monitored_nll: eval.monitored,
            acyclicity,
        });
        if score < best_score {
            best_score = score;
            best_model = model.clone();
            report.best_epoch = epoch;
        } else if epoch - report.best_epoch >= config.patience {
            report.stopped_early = true;
            break;
        }
    }
    report.seconds = started.elapsed().as_secs_f64();
    Ok((best_model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphSpec;
    use crate::sem::{build_model, ModelConfig};
    use rand_distr::{Distribution, StandardNormal};

    fn toy(tasks: usize, n: usize, seed: u64) -> (SemModel, Vec<TaskData>) {
        let spec = GraphSpec::standard(tasks, 2, 2).unwrap();
        let config = ModelConfig {
            hidden_layers: vec![6],
            embed: 3,
            ..ModelConfig::with_seed(seed)
        };
        let model = build_model(&spec, &config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..tasks)
            .map(|_| {
                let mut z = Matrix::zeros(n, 2);
                let mut x = Vec::new();
                let mut y = Vec::new();
                for r in 0..n {
                    let a: f64 = StandardNormal.sample(&mut rng);
                    let b: f64 = StandardNormal.sample(&mut rng);
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let f: f64 = StandardNormal.sample(&mut rng);
                    z.set(r, 0, a);
                    z.set(r, 1, b);
                    let xv = 0.8 * a + 0.3 * e;
                    x.push(xv);
                    y.push(xv - 0.5 * b + 0.3 * f);
                }
                TaskData::new(z, y, Some(x)).unwrap()
            })
            .collect();
        (model, data)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 16,
            step_size: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_returns_input() {
        let (model, data) = toy(2, 30, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..quick()
        };
        let (out, report) = train(&model, &data, &cfg).unwrap();
        assert_eq!(out, model);
        assert!(report.epochs.is_empty());
        assert_eq!(report.best_epoch, 0);
    }

    #[test]
    fn runs_are_deterministic() {
        let (model, data) = toy(2, 40, 2);
        let (a, ra) = train(&model, &data, &quick()).unwrap();
        let (b, rb) = train(&model, &data, &quick()).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
    }

    #[test]
    fn training_improves_validation_nll() {
        let (model, data) = toy(2, 200, 3);
        let cfg = TrainConfig {
            epochs: 20,
            ..quick()
        };
        let (_, report) = train(&model, &data, &cfg).unwrap();
        assert!(report.best_monitored_nll() < report.initial_monitored_nll.iter().sum::<f64>());
    }

    #[test]
    fn frozen_groups_stay_bitwise_fixed() {
        let (model, data) = toy(2, 40, 4);
        let (out, _) = train_with(&model, &data, &quick(), |g| g == ParamGroup::Task(1)).unwrap();
        for ((info, before), (_, after)) in model.parameters().iter().zip(out.parameters()) {
            if info.group != ParamGroup::Task(1) {
                assert_eq!(*before, after, "{}", info.name);
            }
        }
        assert_ne!(out, model);
    }

    #[test]
    fn w_enters_linearly() {
        let (mut model, data) = toy(1, 10, 5);
        // a cyclic logit pattern is impossible under the mask, so add a fixed
        // back edge to give the penalty something to measure
        let n = model.spec().len();
        model.adjacency.fixed.set(0, n - 1, 1.0);
        let batches: Vec<(usize, TaskData)> = vec![(0, data[0].clone())];
        let l0 = compute_total_loss(&model, &batches, 0.0, Supervision::CauseObserved).unwrap();
        let l1 = compute_total_loss(&model, &batches, 1.0, Supervision::CauseObserved).unwrap();
        let l2 = compute_total_loss(&model, &batches, 2.0, Supervision::CauseObserved).unwrap();
        assert!(l1 > l0);
        assert!(((l2 - l1) - (l1 - l0)).abs() < 1e-12);
    }

    #[test]
    fn acyclic_structure_adds_nothing() {
        let (model, data) = toy(1, 10, 6);
        let batches = vec![(0, data[0].clone())];
        let a = compute_total_loss(&model, &batches, 0.0, Supervision::Latent).unwrap();
        let b = compute_total_loss(&model, &batches, 10.0, Supervision::Latent).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let (model, data) = toy(1, 10, 7);
        assert!(matches!(
            compute_total_loss(&model, &[], 1.0, Supervision::Latent),
            Err(Error::Contract(_))
        ));
        let empty = vec![(0, data[0].select(&[]))];
        assert!(matches!(
            compute_total_loss(&model, &empty, 1.0, Supervision::Latent),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn surrogates() {
        let (model, _) = toy(1, 1, 8);
        let z = [0.2, -0.4];
        let (x, w) = training_surrogate_for_latents(&model, 0, &z, Some(1.5), Supervision::CauseObserved).unwrap();
        assert_eq!(x, 1.5);
        assert_eq!(w[0], model.mechanism_conditional(0, &z, 1.5, 0).unwrap().0);
        let (x, w) = training_surrogate_for_latents(&model, 0, &z, None, Supervision::Latent).unwrap();
        let modes = model.forward_modes(&z, 0, None).unwrap();
        assert_eq!((x, w), (modes.x, modes.w));
    }

    #[test]
    fn holdout_sizes() {
        let (_, data) = toy(2, 100, 9);
        let (t, v) = holdout(&data, 0.2, 3);
        assert_eq!((t[0].len(), v[0].len()), (80, 20));
        let (t2, _) = holdout(&data, 0.2, 3);
        assert_eq!(t, t2);
    }
}
