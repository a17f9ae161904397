//! Synthetic ground truth: linear-Gaussian multi-task SEMs, datasets sampled
//! from them, their exact posterior mode, and their exact representation as
//! an affine [`SemModel`].

use nalgebra::{DMatrix, DVector};
use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{softplus, Matrix};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::sem::{build_model, ModelConfig, SemModel, SIGMA_FLOOR};

/// Logit magnitude used to switch gates fully on or off; `sigmoid(40)`
/// rounds to exactly 1.
const GATE_LOGIT: f64 = 40.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub tasks: usize,
    pub confounders: usize,
    pub mechanisms: usize,
    /// True confounder parents of every cause and mechanism row.
    pub parents_per_node: usize,
    /// Magnitude range of nonzero coefficients.
    pub coefficient_range: (f64, f64),
    /// Noise standard deviation of every generated node.
    pub noise: f64,
    /// Positive cause→mechanism and mechanism→outcome coefficients, so the
    /// outcome moves monotonically with the cause.
    pub monotone_mechanism: bool,
    /// `tanh` on the confounder→mechanism term.
    pub nonlinear: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            tasks: 3,
            confounders: 8,
            mechanisms: 5,
            parents_per_node: 3,
            coefficient_range: (0.5, 1.5),
            noise: 0.5,
            monotone_mechanism: true,
            nonlinear: false,
        }
    }
}

/// Linear-Gaussian generator over `Z → X_k`, `Z → W_i`, `X_k → W_i`,
/// `W → Y_k`. Indices are zero-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSem {
    pub tasks: usize,
    pub confounders: usize,
    pub mechanisms: usize,
    pub cause_parents: Vec<Vec<usize>>,
    pub mechanism_parents: Vec<Vec<usize>>,
    /// K×L, zero outside `cause_parents`.
    pub a: Matrix,
    /// M×L shared by every task, zero outside `mechanism_parents`.
    pub b: Matrix,
    /// M×K task-specific cause effects.
    pub c: Matrix,
    /// K×M outcome loadings.
    pub d: Matrix,
    pub bias_x: Vec<f64>,
    pub bias_w: Vec<f64>,
    pub bias_y: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_w: Vec<f64>,
    pub sigma_y: Vec<f64>,
    pub nonlinear: bool,
}

/// Records of one task; `z` n×L, `w` n×M.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub z: Matrix,
    pub x: Vec<f64>,
    pub w: Matrix,
    pub y: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticDataset {
    pub seed: u64,
    pub tasks: Vec<SyntheticTask>,
}

/// Edge `parent → child` by variable name.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub child: String,
    pub parent: String,
}

/// Ground-truth file written next to generated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub records_per_task: Vec<usize>,
    pub generator: GeneratorConfig,
    pub edges: Vec<Edge>,
    pub ground_truth: GroundTruthSem,
}

fn signed(rng: &mut ChaCha8Rng, range: (f64, f64), positive: bool) -> f64 {
    let mag = Uniform::new_inclusive(range.0, range.1).sample(rng);
    if positive || rng.gen_bool(0.5) {
        mag
    } else {
        -mag
    }
}

/// Draws a ground truth deterministically from `seed`.
pub fn make_ground_truth(config: &GeneratorConfig, seed: u64) -> Result<GroundTruthSem> {
    let GeneratorConfig {
        tasks: k,
        confounders: l,
        mechanisms: m,
        parents_per_node: p,
        coefficient_range: range,
        noise,
        monotone_mechanism,
        nonlinear,
    } = *config;
    if k == 0 || l == 0 || m == 0 {
        return Err(Error::InvalidSpec("tasks, confounders and mechanisms must be positive".into()));
    }
    if p > l {
        return Err(Error::InvalidSpec(format!(
            "{p} parents per node exceed {l} confounders"
        )));
    }
    if !(range.0 > 0.0 && range.0 <= range.1 && range.1.is_finite()) {
        return Err(Error::InvalidSpec(format!("bad coefficient range {range:?}")));
    }
    if !(noise > 0.0 && noise.is_finite()) {
        return Err(Error::InvalidSpec(format!("noise must be positive, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pick = |rng: &mut ChaCha8Rng| {
        let mut v = sample(rng, l, p).into_vec();
        v.sort_unstable();
        v
    };
    let cause_parents: Vec<Vec<usize>> = (0..k).map(|_| pick(&mut rng)).collect();
    let mechanism_parents: Vec<Vec<usize>> = (0..m).map(|_| pick(&mut rng)).collect();
    let mut a = Matrix::zeros(k, l);
    for (t, ps) in cause_parents.iter().enumerate() {
        for &j in ps {
            a.set(t, j, signed(&mut rng, range, false));
        }
    }
    let mut b = Matrix::zeros(m, l);
    for (i, ps) in mechanism_parents.iter().enumerate() {
        for &j in ps {
            b.set(i, j, signed(&mut rng, range, false));
        }
    }
    let mut c = Matrix::zeros(m, k);
    for i in 0..m {
        for t in 0..k {
            c.set(i, t, signed(&mut rng, range, monotone_mechanism));
        }
    }
    let mut d = Matrix::zeros(k, m);
    for t in 0..k {
        for i in 0..m {
            d.set(t, i, signed(&mut rng, range, monotone_mechanism));
        }
    }
    Ok(GroundTruthSem {
        tasks: k,
        confounders: l,
        mechanisms: m,
        cause_parents,
        mechanism_parents,
        a,
        b,
        c,
        d,
        bias_x: vec![0.0; k],
        bias_w: vec![0.0; m],
        bias_y: vec![0.0; k],
        sigma_x: vec![noise; k],
        sigma_w: vec![noise; m],
        sigma_y: vec![noise; k],
        nonlinear,
    })
}

impl GroundTruthSem {
    /// Roster matching this generator.
    pub fn spec(&self) -> Result<GraphSpec> {
        GraphSpec::standard(self.tasks, self.confounders, self.mechanisms)
    }

    /// True learnable-position edges.
    pub fn edges(&self) -> Vec<Edge> {
        let mut out = Vec::new();
        for (k, ps) in self.cause_parents.iter().enumerate() {
            for &j in ps {
                out.push(Edge {
                    child: format!("X{}", k + 1),
                    parent: format!("Z{}", j + 1),
                });
            }
        }
        for (i, ps) in self.mechanism_parents.iter().enumerate() {
            for &j in ps {
                out.push(Edge {
                    child: format!("W{}", i + 1),
                    parent: format!("Z{}", j + 1),
                });
            }
        }
        out
    }

    fn cause_mean(&self, k: usize, z: &[f64]) -> f64 {
        self.bias_x[k] + dot(self.a.row(k), z)
    }

    /// Confounder part of the mean of `W_i`.
    fn mechanism_base(&self, i: usize, z: &[f64]) -> f64 {
        let lin = dot(self.b.row(i), z);
        self.bias_w[i] + if self.nonlinear { lin.tanh() } else { lin }
    }

    /// Forward means `(X, W, Y)` for confounders `z`, optionally at a given cause.
    pub fn forward(&self, k: usize, z: &[f64], x: Option<f64>) -> (f64, Vec<f64>, f64) {
        let x = x.unwrap_or_else(|| self.cause_mean(k, z));
        let w: Vec<f64> = (0..self.mechanisms)
            .map(|i| self.mechanism_base(i, z) + self.c.get(i, k) * x)
            .collect();
        let y = self.bias_y[k] + dot(self.d.row(k), &w);
        (x, w, y)
    }

    /// Joint log density of `(X, W, Y)` given `Z` in task `k`.
    pub fn log_density(&self, k: usize, z: &[f64], x: f64, w: &[f64], y: f64) -> f64 {
        let mut t = log_normal(x, self.cause_mean(k, z), self.sigma_x[k]);
        for i in 0..self.mechanisms {
            let mu = self.mechanism_base(i, z) + self.c.get(i, k) * x;
            t += log_normal(w[i], mu, self.sigma_w[i]);
        }
        t + log_normal(y, self.bias_y[k] + dot(self.d.row(k), w), self.sigma_y[k])
    }

    /// Gradient of [`Self::log_density`] in `(X, W)`.
    pub fn log_density_gradient(&self, k: usize, z: &[f64], x: f64, w: &[f64], y: f64) -> Vec<f64> {
        let m = self.mechanisms;
        let mut g = vec![0.0; m + 1];
        g[0] = -(x - self.cause_mean(k, z)) / self.sigma_x[k].powi(2);
        let ry = (y - self.bias_y[k] - dot(self.d.row(k), w)) / self.sigma_y[k].powi(2);
        for i in 0..m {
            let r = (w[i] - self.mechanism_base(i, z) - self.c.get(i, k) * x) / self.sigma_w[i].powi(2);
            g[0] += r * self.c.get(i, k);
            g[i + 1] = -r + ry * self.d.get(k, i);
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn log_normal(v: f64, mu: f64, sd: f64) -> f64 {
    let z = (v - mu) / sd;
    -0.5 * (2.0 * std::f64::consts::PI).ln() - sd.ln() - 0.5 * z * z
}

/// Samples `n_per_task[k]` records for each task in causal order. Each task
/// draws from its own stream, so adding records to one task leaves the others
/// unchanged.
pub fn sample_dataset(gt: &GroundTruthSem, n_per_task: &[usize], seed: u64) -> Result<SyntheticDataset> {
    if n_per_task.len() != gt.tasks {
        return Err(Error::Contract(format!(
            "{} record counts for {} tasks",
            n_per_task.len(),
            gt.tasks
        )));
    }
    let (l, m) = (gt.confounders, gt.mechanisms);
    let tasks = n_per_task
        .iter()
        .enumerate()
        .map(|(k, &n)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let mut z = Matrix::zeros(n, l);
            let mut w = Matrix::zeros(n, m);
            let mut x = Vec::with_capacity(n);
            let mut y = Vec::with_capacity(n);
            for r in 0..n {
                for v in z.row_mut(r) {
                    *v = rng.sample(StandardNormal);
                }
                let zr = z.row(r).to_vec();
                let xr = gt.cause_mean(k, &zr) + gt.sigma_x[k] * rng.sample::<f64, _>(StandardNormal);
                for i in 0..m {
                    let e: f64 = rng.sample(StandardNormal);
                    w.set(r, i, gt.mechanism_base(i, &zr) + gt.c.get(i, k) * xr + gt.sigma_w[i] * e);
                }
                let e: f64 = rng.sample(StandardNormal);
                let yr = gt.bias_y[k] + dot(gt.d.row(k), w.row(r)) + gt.sigma_y[k] * e;
                x.push(xr);
                y.push(yr);
            }
            SyntheticTask { z, x, w, y }
        })
        .collect();
    Ok(SyntheticDataset { seed, tasks })
}

/// Exact maximizer of the joint log density over `(X, W)` given `(Y, Z)`: the
/// solution of the normal equations of a positive-definite quadratic.
pub fn closed_form_map(gt: &GroundTruthSem, y: f64, z: &[f64], k: usize) -> Result<(f64, Vec<f64>)> {
    if k >= gt.tasks {
        return Err(Error::TaskIndex {
            index: k,
            tasks: gt.tasks,
        });
    }
    if z.len() != gt.confounders {
        return Err(Error::Shape(format!(
            "expected {} confounders, got {}",
            gt.confounders,
            z.len()
        )));
    }
    let m = gt.mechanisms;
    let n = m + 1;
    let mut h = DMatrix::<f64>::zeros(n, n);
    let mut g = DVector::<f64>::zeros(n);
    let mut add = |row: DVector<f64>, target: f64, weight: f64| {
        h += &row * row.transpose() * weight;
        g += &row * (target * weight);
    };
    let mut r = DVector::zeros(n);
    r[0] = 1.0;
    add(r, gt.cause_mean(k, z), gt.sigma_x[k].powi(-2));
    for i in 0..m {
        let mut r = DVector::zeros(n);
        r[0] = -gt.c.get(i, k);
        r[i + 1] = 1.0;
        add(r, gt.mechanism_base(i, z), gt.sigma_w[i].powi(-2));
    }
    let mut r = DVector::zeros(n);
    for i in 0..m {
        r[i + 1] = gt.d.get(k, i);
    }
    add(r, y - gt.bias_y[k], gt.sigma_y[k].powi(-2));
    let sol = h
        .cholesky()
        .ok_or_else(|| Error::Contract("posterior precision is not positive definite".into()))?
        .solve(&g);
    Ok((sol[0], sol.iter().skip(1).copied().collect()))
}

/// `softplus⁻¹(σ − floor)`, the pre-activation giving standard deviation `σ`.
fn scale_bias(sigma: f64) -> Result<f64> {
    let t = sigma - SIGMA_FLOOR;
    if !(t > 0.0) {
        return Err(Error::InvalidSpec(format!(
            "noise {sigma} is below the representable floor {SIGMA_FLOOR}"
        )));
    }
    // ln(eᵗ − 1) = t + ln(1 − e⁻ᵗ)
    let b = t + (-(-t).exp()).ln_1p();
    debug_assert!((softplus(b) - t).abs() <= 1e-12 * t.max(1.0));
    Ok(b)
}

/// The exact affine [`SemModel`] of a linear ground truth: gates fully on at
/// true parents and off elsewhere, means and noise levels copied.
pub fn to_model(gt: &GroundTruthSem) -> Result<SemModel> {
    if gt.nonlinear {
        return Err(Error::InvalidSpec(
            "a nonlinear ground truth has no affine representation".into(),
        ));
    }
    let spec = gt.spec()?;
    let config = ModelConfig {
        hidden_layers: Vec::new(),
        embed: 1,
        ..ModelConfig::default()
    };
    let mut model = build_model(&spec, &config)?;
    let z_nodes = spec.confounders().to_vec();
    let logits = &mut model.adjacency.logits;
    for v in logits.as_mut_slice() {
        *v = -GATE_LOGIT;
    }
    for k in 0..gt.tasks {
        for &j in &gt.cause_parents[k] {
            logits.set(spec.cause(k), z_nodes[j], GATE_LOGIT);
        }
    }
    for i in 0..gt.mechanisms {
        for &j in &gt.mechanism_parents[i] {
            logits.set(spec.mechanisms()[i], z_nodes[j], GATE_LOGIT);
        }
    }
    let (l, m) = (gt.confounders, gt.mechanisms);
    for k in 0..gt.tasks {
        let cause = &mut model.causes_mut()[k];
        let layer = &mut cause.mean.layers_mut()[0];
        layer.weight = Matrix::row_vector(gt.a.row(k));
        layer.bias = Matrix::scalar(gt.bias_x[k]);
        let layer = &mut cause.scale.layers_mut()[0];
        layer.weight = Matrix::zeros(1, l);
        layer.bias = Matrix::scalar(scale_bias(gt.sigma_x[k])?);

        let outcome = &mut model.outcomes_mut()[k];
        let layer = &mut outcome.mean.layers_mut()[0];
        layer.weight = Matrix::row_vector(gt.d.row(k));
        layer.bias = Matrix::scalar(gt.bias_y[k]);
        let layer = &mut outcome.scale.layers_mut()[0];
        layer.weight = Matrix::zeros(1, m);
        layer.bias = Matrix::scalar(scale_bias(gt.sigma_y[k])?);
    }
    for i in 0..m {
        let sigma = scale_bias(gt.sigma_w[i])?;
        let module = &mut model.mechanisms_mut()[i];
        let layer = &mut module.backbone.layers_mut()[0];
        layer.weight = Matrix::row_vector(gt.b.row(i));
        layer.bias = Matrix::scalar(gt.bias_w[i]);
        for k in 0..gt.tasks {
            let layer = &mut module.heads[k].layers_mut()[0];
            layer.weight = Matrix::from_rows(&[vec![1.0, gt.c.get(i, k)], vec![0.0, 0.0]])?;
            layer.bias = Matrix::row_vector(&[0.0, sigma]);
        }
    }
    Ok(model)
}

impl Manifest {
    pub fn new(gt: &GroundTruthSem, generator: &GeneratorConfig, seed: u64, records_per_task: &[usize]) -> Self {
        Self {
            seed,
            records_per_task: records_per_task.to_vec(),
            generator: generator.clone(),
            edges: gt.edges(),
            ground_truth: gt.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One confounder with no effect, one mechanism: X ~ N(0,1), W|X ~ N(X,1),
    /// Y|W ~ N(W,1).
    pub(crate) fn unit_chain() -> GroundTruthSem {
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
    fn unit_chain_closed_form() {
        let gt = unit_chain();
        let (x, w) = closed_form_map(&gt, 3.0, &[0.0], 0).unwrap();
        assert!((x - 1.0).abs() < 1e-12 && (w[0] - 2.0).abs() < 1e-12);
        let (x, w) = closed_form_map(&gt, 0.0, &[0.0], 0).unwrap();
        assert_eq!((x, w[0]), (0.0, 0.0));
    }

    #[test]
    fn closed_form_is_stationary_and_scale_invariant() {
        let gt = make_ground_truth(&GeneratorConfig::default(), 11).unwrap();
        let z = [0.3, -1.0, 0.5, 2.0, 0.0, -0.7, 1.1, 0.4];
        let (x, w) = closed_form_map(&gt, 1.7, &z, 2).unwrap();
        let g = gt.log_density_gradient(2, &z, x, &w, 1.7);
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-10);
        let mut scaled = gt.clone();
        for s in scaled.sigma_x.iter_mut().chain(&mut scaled.sigma_w).chain(&mut scaled.sigma_y) {
            *s *= 3.0;
        }
        let (x2, w2) = closed_form_map(&scaled, 1.7, &z, 2).unwrap();
        assert!((x - x2).abs() < 1e-10);
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn generator_contracts() {
        let cfg = GeneratorConfig::default();
        let a = make_ground_truth(&cfg, 5).unwrap();
        assert_eq!(a, make_ground_truth(&cfg, 5).unwrap());
        for v in a.a.as_slice().iter().chain(a.b.as_slice()).chain(a.c.as_slice()).chain(a.d.as_slice()) {
            assert!(*v == 0.0 || (0.5..=1.5).contains(&v.abs()));
        }
        assert!(a.c.as_slice().iter().all(|&v| v > 0.0));
        assert_eq!(a.edges().len(), 3 * 3 + 5 * 3);
        let bad = GeneratorConfig {
            parents_per_node: 9,
            ..cfg
        };
        assert!(matches!(make_ground_truth(&bad, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn sampling_honours_counts_and_streams() {
        let gt = make_ground_truth(&GeneratorConfig::default(), 1).unwrap();
        let ds = sample_dataset(&gt, &[200, 2000, 2000], 4).unwrap();
        let sizes: Vec<usize> = ds.tasks.iter().map(|t| t.x.len()).collect();
        assert_eq!(sizes, vec![200, 2000, 2000]);
        let other = sample_dataset(&gt, &[10, 2000, 5], 4).unwrap();
        assert_eq!(other.tasks[1], ds.tasks[1]);
        assert_eq!(ds, sample_dataset(&gt, &[200, 2000, 2000], 4).unwrap());
    }

    #[test]
    fn noiseless_unit_chain_at_zero_is_zero() {
        let mut gt = unit_chain();
        gt.sigma_x = vec![0.0];
        gt.sigma_w = vec![0.0];
        gt.sigma_y = vec![0.0];
        gt.a = Matrix::zeros(1, 1);
        let (x, w, y) = gt.forward(0, &[0.0], None);
        assert_eq!((x, w[0], y), (0.0, 0.0, 0.0));
    }

    #[test]
    fn affine_model_reproduces_log_density() {
        let gt = make_ground_truth(&GeneratorConfig::default(), 3).unwrap();
        let model = to_model(&gt).unwrap();
        let z = [0.1, 0.2, -0.3, 0.4, -0.5, 0.6, -0.7, 0.8];
        let w = [0.5, -0.1, 0.3, 0.0, 1.0];
        let a = crate::sem::Assignment {
            task: 1,
            z: z.to_vec(),
            x: 0.7,
            w: w.to_vec(),
            y: -0.2,
        };
        let expected = gt.log_density(1, &z, 0.7, &w, -0.2);
        assert!((model.joint_log_density(&a).unwrap() - expected).abs() < 1e-9);
        let (x, wf, y) = gt.forward(1, &z, None);
        let modes = model.forward_modes(&z, 1, None).unwrap();
        assert!((modes.x - x).abs() < 1e-12 && (modes.y - y).abs() < 1e-12);
        for (p, q) in modes.w.iter().zip(&wf) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn scale_bias_inverts_softplus() {
        for s in [0.5, 1.0, 1e-3, 3.0] {
            let b = scale_bias(s).unwrap();
            assert!((softplus(b) + SIGMA_FLOOR - s).abs() < 1e-14);
        }
    }
}
