//! MAP estimation of a task's cause and mechanism values from its outcome and
//! confounders, with every model parameter frozen.
//!
//! The ascent runs in standardized mechanism coordinates `W = μ(Z, X) +
//! σ(Z, X)·ε`, a bijection of `(X, W)` that leaves the maximizer and every
//! objective value unchanged but stays well conditioned when fitted mechanism
//! noise is small. Steps that would lower the objective are halved until
//! accepted, so the recorded trajectory never decreases.
//!
//! Records are independent: every tape kernel used here is row-local, so a
//! record's result does not depend on which other records share its batch.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{AdamConfig, Matrix, Tape};
use crate::error::{Error, Result};
use crate::sem::{CauseInput, MechanismInput, SemModel};

const CHUNK: usize = 32;
const MIN_SCALE: f64 = 1e-12;
const MAX_SCALE: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ascent {
    Gradient,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapConfig {
    pub step_size: f64,
    pub max_iterations: usize,
    /// Stop once an accepted step changes the objective by less than this
    /// fraction of its magnitude.
    pub tolerance: f64,
    pub optimizer: Ascent,
}

impl Default for MapConfig {
    fn default() -> Self {
        Self {
            step_size: 1e-2,
            max_iterations: 2000,
            tolerance: 1e-12,
            optimizer: Ascent::Gradient,
        }
    }
}

impl MapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidSpec(format!("MAP step size must be positive, got {}", self.step_size)));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidSpec(format!("MAP tolerance must be positive, got {}", self.tolerance)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub x: f64,
    pub w: Vec<f64>,
    /// Joint log density at the start and after every accepted step.
    pub trajectory: Vec<f64>,
    pub converged: bool,
    /// Objective evaluations after the initial one.
    pub iterations: usize,
}

impl MapResult {
    pub fn objective(&self) -> f64 {
        *self.trajectory.last().expect("trajectory starts with the initial value")
    }
}

/// Starting point: the mode of `p(X | Z)` and the conditional means of `W`.
pub fn initialize_latents(model: &SemModel, z: &[f64], task: usize) -> Result<(f64, Vec<f64>)> {
    let a = model.forward_modes(z, task, None)?;
    Ok((a.x, a.w))
}

/// Joint log density at `(X, W)`; the function MAP maximizes.
pub fn map_objective(model: &SemModel, task: usize, z: &[f64], x: f64, w: &[f64], y: f64) -> Result<f64> {
    model.joint_log_density(&crate::sem::Assignment {
        task,
        z: z.to_vec(),
        x,
        w: w.to_vec(),
        y,
    })
}

/// MAP estimate for one record.
pub fn map_estimate(model: &SemModel, y: f64, z: &[f64], task: usize, config: &MapConfig) -> Result<MapResult> {
    let mut out = map_estimate_batch(model, &[y], &Matrix::row_vector(z), task, config)?;
    Ok(out.remove(0))
}

/// The objective in the coordinates the ascent moves, `(X, ε)` with
/// `W = μ(Z, X) + σ(Z, X)·ε`, and its gradient `[∂X, ∂ε_1..∂ε_M]`.
pub fn standardized_objective(
    model: &SemModel,
    task: usize,
    z: &[f64],
    y: f64,
    x: f64,
    eps: &[f64],
) -> Result<(f64, Vec<f64>)> {
    model.spec().check_task(task)?;
    if eps.len() != model.spec().mechanism_count() {
        return Err(Error::Shape(format!(
            "expected {} offsets, got {}",
            model.spec().mechanism_count(),
            eps.len()
        )));
    }
    let mut p = vec![x];
    p.extend_from_slice(eps);
    let point = evaluate(
        model,
        task,
        &Matrix::row_vector(z),
        &Matrix::scalar(y),
        &Matrix::row_vector(&p),
    )?;
    Ok((point.objective[0], point.gradient.row(0).to_vec()))
}

/// MAP estimates for every row of `z` with outcomes `y`, computed in parallel
/// chunks; identical to estimating each record alone.
pub fn map_estimate_batch(
    model: &SemModel,
    y: &[f64],
    z: &Matrix,
    task: usize,
    config: &MapConfig,
) -> Result<Vec<MapResult>> {
    config.validate()?;
    model.spec().check_task(task)?;
    if y.len() != z.rows() {
        return Err(Error::Shape(format!("{} outcomes for {} confounder rows", y.len(), z.rows())));
    }
    if z.cols() != model.spec().confounder_count() {
        return Err(Error::Shape(format!(
            "expected {} confounder columns, got {}",
            model.spec().confounder_count(),
            z.cols()
        )));
    }
    let starts: Vec<usize> = (0..y.len()).step_by(CHUNK).collect();
    let chunks: Vec<Result<Vec<MapResult>>> = starts
        .par_iter()
        .map(|&lo| {
            let hi = (lo + CHUNK).min(y.len());
            let idx: Vec<usize> = (lo..hi).collect();
            let mut zc = Matrix::zeros(idx.len(), z.cols());
            for (r, &i) in idx.iter().enumerate() {
                zc.row_mut(r).copy_from_slice(z.row(i));
            }
            ascend(model, &y[lo..hi], &zc, task, config)
        })
        .collect();
    let mut out = Vec::with_capacity(y.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

struct Point {
    objective: Vec<f64>,
    gradient: Matrix,
    w: Matrix,
}

/// Objective, gradient in `(X, ε)` and mechanism values for each row of `p`
/// (columns `X, ε_1..ε_M`).
fn evaluate(model: &SemModel, task: usize, z: &Matrix, y: &Matrix, p: &Matrix) -> Result<Point> {
    let m = model.spec().mechanism_count();
    let rows = p.rows();
    let mut xs = Matrix::zeros(rows, 1);
    let mut es = Matrix::zeros(rows, m);
    for r in 0..rows {
        xs.set(r, 0, p.get(r, 0));
        es.row_mut(r).copy_from_slice(&p.row(r)[1..]);
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, |_| false)?;
    let zv = tape.constant_ref(z);
    let yv = tape.constant_ref(y);
    let xv = tape.param(xs);
    let ev = tape.param(es);
    let terms = bound.task_terms(
        model,
        &mut tape,
        task,
        zv,
        CauseInput::Observed(xv),
        MechanismInput::Standardized(ev),
        Some(yv),
    )?;
    let joint = terms.joint(&mut tape)?;
    let total = tape.sum(joint);
    let grads = tape.backward(total)?;
    let (gx, ge) = (grads.wrt(xv), grads.wrt(ev));
    let mut gradient = Matrix::zeros(rows, m + 1);
    let mut w = Matrix::zeros(rows, m);
    for r in 0..rows {
        gradient.set(r, 0, gx.get(r, 0));
        gradient.row_mut(r)[1..].copy_from_slice(ge.row(r));
        for (i, &wi) in terms.w.iter().enumerate() {
            w.set(r, i, tape.value(wi).get(r, 0));
        }
    }
    Ok(Point {
        objective: tape.value(joint).as_slice().to_vec(),
        gradient,
        w,
    })
}

struct Record {
    p: Vec<f64>,
    f: f64,
    w: Vec<f64>,
    direction: Vec<f64>,
    scale: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
    trajectory: Vec<f64>,
    iterations: usize,
    converged: bool,
    done: bool,
}

impl Record {
    fn set_direction(&mut self, g: &[f64], config: &MapConfig) {
        match config.optimizer {
            Ascent::Gradient => {
                self.direction = g.iter().map(|v| config.step_size * v).collect();
                self.scale = (self.scale * 2.0).min(MAX_SCALE);
            }
            Ascent::Adam => {
                let AdamConfig { beta1, beta2, epsilon, .. } = AdamConfig::default();
                self.steps += 1;
                let c1 = 1.0 - beta1.powi(self.steps);
                let c2 = 1.0 - beta2.powi(self.steps);
                for (j, &gj) in g.iter().enumerate() {
                    self.first[j] = beta1 * self.first[j] + (1.0 - beta1) * gj;
                    self.second[j] = beta2 * self.second[j] + (1.0 - beta2) * gj * gj;
                    let m_hat = self.first[j] / c1;
                    let v_hat = self.second[j] / c2;
                    self.direction[j] = config.step_size * m_hat / (v_hat.sqrt() + epsilon);
                }
                self.scale = (self.scale * 2.0).min(MAX_SCALE);
            }
        }
    }
}

fn ascend(model: &SemModel, y: &[f64], z: &Matrix, task: usize, config: &MapConfig) -> Result<Vec<MapResult>> {
    let n = y.len();
    let m = model.spec().mechanism_count();
    let modes = model.evaluate_task(task, z, None, None, None)?;
    let mut p0 = Matrix::zeros(n, m + 1);
    for r in 0..n {
        p0.set(r, 0, modes.x.get(r, 0));
    }
    let ym = Matrix::column_vector(y);
    let start = evaluate(model, task, z, &ym, &p0)?;
    let mut records = Vec::with_capacity(n);
    for r in 0..n {
        let f = start.objective[r];
        if !f.is_finite() {
            return Err(Error::Diverged {
                epoch: 0,
                message: format!("MAP objective is {f} at initialization"),
            });
        }
        let mut rec = Record {
            p: p0.row(r).to_vec(),
            f,
            w: start.w.row(r).to_vec(),
            direction: vec![0.0; m + 1],
            scale: 1.0,
            first: vec![0.0; m + 1],
            second: vec![0.0; m + 1],
            steps: 0,
            trajectory: vec![f],
            iterations: 0,
            converged: false,
            done: config.max_iterations == 0,
        };
        rec.set_direction(start.gradient.row(r), config);
        records.push(rec);
    }

    loop {
        let active: Vec<usize> = (0..n).filter(|&r| !records[r].done).collect();
        if active.is_empty() {
            break;
        }
        let mut zc = Matrix::zeros(active.len(), z.cols());
        let mut yc = Matrix::zeros(active.len(), 1);
        let mut pc = Matrix::zeros(active.len(), m + 1);
        for (j, &r) in active.iter().enumerate() {
            zc.row_mut(j).copy_from_slice(z.row(r));
            yc.set(j, 0, y[r]);
            let rec = &records[r];
            for (c, v) in pc.row_mut(j).iter_mut().enumerate() {
                *v = rec.p[c] + rec.scale * rec.direction[c];
            }
        }
        let trial = evaluate(model, task, &zc, &yc, &pc)?;
        for (j, &r) in active.iter().enumerate() {
            let rec = &mut records[r];
            rec.iterations += 1;
            let f = trial.objective[j];
            if f.is_finite() && f >= rec.f {
                let change = f - rec.f;
                let full_step = rec.scale >= MAX_SCALE;
                let reference = rec.f.abs().max(f64::MIN_POSITIVE);
                rec.p = pc.row(j).to_vec();
                rec.f = f;
                rec.w = trial.w.row(j).to_vec();
                rec.trajectory.push(f);
                if full_step && change <= config.tolerance * reference {
                    rec.converged = true;
                    rec.done = true;
                } else {
                    rec.set_direction(trial.gradient.row(j), config);
                }
            } else {
                rec.scale *= 0.5;
                if rec.scale < MIN_SCALE {
                    // no ascent direction left at working precision
                    rec.converged = true;
                    rec.done = true;
                }
            }
            if rec.iterations >= config.max_iterations {
                rec.done = true;
            }
        }
    }
    Ok(records
        .into_iter()
        .map(|rec| MapResult {
            x: rec.p[0],
            w: rec.w,
            trajectory: rec.trajectory,
            converged: rec.converged,
            iterations: rec.iterations,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{closed_form_map, make_ground_truth, to_model, GeneratorConfig, GroundTruthSem};

    fn unit_chain() -> GroundTruthSem {
        GroundTruthSem {
            tasks: 1,
            confounders: 1,
            mechanisms: 1,
            cause_parents: vec![vec![]],
            mechanism_parents: vec![vec![]],
            a: Matrix::zeros(1, 1),
            b: Matrix::zeros(1, 1),
            c: Matrix::scalar(1.0),
            d: Matrix::scalar(1.0),
            bias_x: vec![0.0],
            bias_w: vec![0.0],
            bias_y: vec![0.0],
            sigma_x: vec![1.0],
            sigma_w: vec![1.0],
            sigma_y: vec![1.0],
            nonlinear: false,
        }
    }

    #[test]
    fn unit_chain_reaches_hand_solution() {
        let model = to_model(&unit_chain()).unwrap();
        let r = map_estimate(&model, 3.0, &[0.0], 0, &MapConfig::default()).unwrap();
        assert!((r.x - 1.0).abs() < 1e-3, "{r:?}");
        assert!((r.w[0] - 2.0).abs() < 1e-3, "{r:?}");
        let r = map_estimate(&model, 0.0, &[0.0], 0, &MapConfig::default()).unwrap();
        assert!(r.x.abs() < 1e-9 && r.w[0].abs() < 1e-9);
    }

    #[test]
    fn trajectory_never_decreases() {
        let gt = make_ground_truth(&GeneratorConfig::default(), 2).unwrap();
        let model = to_model(&gt).unwrap();
        let z = [0.5, -0.2, 1.0, 0.0, 0.3, -1.5, 0.8, 0.1];
        for optimizer in [Ascent::Adam, Ascent::Gradient] {
            let cfg = MapConfig {
                optimizer,
                ..MapConfig::default()
            };
            let r = map_estimate(&model, 2.0, &z, 1, &cfg).unwrap();
            assert!(r.trajectory.windows(2).all(|w| w[1] >= w[0]));
            let (x, _) = closed_form_map(&gt, 2.0, &z, 1).unwrap();
            assert!((r.x - x).abs() < 1e-2, "{optimizer:?}: {} vs {x}", r.x);
        }
    }

    #[test]
    fn batch_equals_single_records() {
        let gt = make_ground_truth(&GeneratorConfig::default(), 4).unwrap();
        let model = to_model(&gt).unwrap();
        let mut z = Matrix::zeros(40, 8);
        for (i, v) in z.as_mut_slice().iter_mut().enumerate() {
            *v = ((i * 37 % 23) as f64 - 11.0) / 7.0;
        }
        let y: Vec<f64> = (0..40).map(|i| (i as f64 - 20.0) / 9.0).collect();
        let cfg = MapConfig::default();
        let batch = map_estimate_batch(&model, &y, &z, 2, &cfg).unwrap();
        for r in [0, 17, 39] {
            let single = map_estimate(&model, y[r], z.row(r), 2, &cfg).unwrap();
            assert_eq!(single, batch[r]);
        }
    }

    #[test]
    fn parameters_are_untouched() {
        let gt = make_ground_truth(&GeneratorConfig::default(), 5).unwrap();
        let model = to_model(&gt).unwrap();
        let before = model.clone();
        map_estimate(&model, 1.0, &[0.0; 8], 0, &MapConfig::default()).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn initialization_is_the_forward_mode() {
        let gt = make_ground_truth(&GeneratorConfig::default(), 6).unwrap();
        let model = to_model(&gt).unwrap();
        let z = [0.1; 8];
        let (x0, w0) = initialize_latents(&model, &z, 0).unwrap();
        let modes = model.forward_modes(&z, 0, None).unwrap();
        assert_eq!((x0, w0), (modes.x, modes.w.clone()));
        let cfg = MapConfig {
            max_iterations: 0,
            ..MapConfig::default()
        };
        let r = map_estimate(&model, 5.0, &z, 0, &cfg).unwrap();
        assert_eq!(r.x, modes.x);
        assert_eq!(r.w, modes.w);
    }
}
