//! The multi-task structural equation model.
//!
//! Every non-confounder node has a Gaussian conditional whose mean and
//! standard deviation are neural functions of its parents. Causes `X_k` read
//! the confounders through their soft adjacency row; each mechanism variable
//! `W_i` owns one backbone over its gated confounders, shared by all tasks,
//! and one head per task reading the embedding next to `X_k`; outcomes `Y_k`
//! read the task's mechanism vector.
//!
//! All evaluation goes through [`BoundModel::task_terms`] on a tape, so the
//! batched, single-record and differentiable paths share one implementation.

use serde::{Deserialize, Serialize};

use crate::diffcore::{BoundMlp, Matrix, Mlp, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{AdjacencyModel, GraphSpec, DEFAULT_THRESHOLD};

pub const SIGMA_FLOOR: f64 = 1e-4;
pub const DEFAULT_HIDDEN: usize = 64;
pub const DEFAULT_EMBED: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Hidden widths shared by every network; empty means affine networks.
    pub hidden_layers: Vec<usize>,
    /// Backbone embedding width.
    pub embed: usize,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_layers: vec![DEFAULT_HIDDEN],
            embed: DEFAULT_EMBED,
            threshold: DEFAULT_THRESHOLD,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }
}

/// Which partition of the parameter registry an array belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Adjacency logits.
    Graph,
    /// Mechanism backbones.
    Shared,
    /// Cause net, mechanism heads and outcome net of one task (zero-based).
    Task(usize),
}

/// Gaussian conditional of a cause or outcome node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeConditional {
    pub node: usize,
    pub task: usize,
    /// Roster indices feeding the networks, in column order.
    pub parents: Vec<usize>,
    pub mean: Mlp,
    /// Pre-softplus standard deviation.
    pub scale: Mlp,
}

/// Shared backbone and per-task heads of one mechanism variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MechanismModule {
    pub node: usize,
    pub parents: Vec<usize>,
    /// Gated confounders to an embedding.
    pub backbone: Mlp,
    /// Per task: embedding ⊕ `X_k` to (mean, pre-softplus std).
    pub heads: Vec<Mlp>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemModel {
    spec: GraphSpec,
    pub adjacency: AdjacencyModel,
    config: ModelConfig,
    causes: Vec<NodeConditional>,
    mechanisms: Vec<MechanismModule>,
    outcomes: Vec<NodeConditional>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub group: ParamGroup,
}

/// Parameter names per group.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterGroups {
    pub graph: Vec<String>,
    pub shared: Vec<String>,
    pub tasks: Vec<Vec<String>>,
}

/// One record of one task, in normalized units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub task: usize,
    pub z: Vec<f64>,
    pub x: f64,
    pub w: Vec<f64>,
    pub y: f64,
}

/// Per-node log densities of one record.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityTerms {
    /// `log p(X | Z)`
    pub cause: f64,
    /// `log p(W_i | Z, X)` per mechanism variable.
    pub mechanisms: Vec<f64>,
    /// `log p(Y | W)`
    pub outcome: f64,
}

impl DensityTerms {
    /// Sum in causal order: cause, mechanisms, outcome.
    pub fn total(&self) -> f64 {
        let mut t = self.cause;
        for m in &self.mechanisms {
            t += m;
        }
        t + self.outcome
    }
}

/// FNV-1a of the network name mixed into the model seed, so each network
/// draws its own stream and renaming nothing keeps seeds stable across builds.
fn mlp_seed(base: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    base ^ h
}

fn sizes(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    let mut s = Vec::with_capacity(hidden.len() + 2);
    s.push(input);
    s.extend_from_slice(hidden);
    s.push(output);
    s
}

/// Instantiates every conditional for `spec`, deterministically in the seed.
pub fn build_model(spec: &GraphSpec, config: &ModelConfig) -> Result<SemModel> {
    if config.embed == 0 {
        return Err(Error::InvalidSpec("embedding width must be positive".into()));
    }
    let adjacency = AdjacencyModel::new(spec, config.threshold)?;
    let l = spec.confounder_count();
    let m = spec.mechanism_count();
    let hidden = &config.hidden_layers;
    let net = |name: String, input: usize, output: usize| {
        Mlp::init(&sizes(input, hidden, output), mlp_seed(config.seed, &name))
    };
    let mut causes = Vec::with_capacity(spec.tasks());
    let mut outcomes = Vec::with_capacity(spec.tasks());
    for k in 0..spec.tasks() {
        let x = spec.cause(k);
        let y = spec.outcome(k);
        causes.push(NodeConditional {
            node: x,
            task: k,
            parents: spec.confounders().to_vec(),
            mean: net(format!("{}.mean", spec.name(x)), l, 1)?,
            scale: net(format!("{}.scale", spec.name(x)), l, 1)?,
        });
        outcomes.push(NodeConditional {
            node: y,
            task: k,
            parents: spec.mechanisms().to_vec(),
            mean: net(format!("{}.mean", spec.name(y)), m, 1)?,
            scale: net(format!("{}.scale", spec.name(y)), m, 1)?,
        });
    }
    let mut mechanisms = Vec::with_capacity(m);
    for &w in spec.mechanisms() {
        let name = spec.name(w);
        let heads = (0..spec.tasks())
            .map(|k| net(format!("{name}.head{}", k + 1), config.embed + 1, 2))
            .collect::<Result<Vec<_>>>()?;
        mechanisms.push(MechanismModule {
            node: w,
            parents: spec.confounders().to_vec(),
            backbone: net(format!("{name}.backbone"), l, config.embed)?,
            heads,
        });
    }
    Ok(SemModel {
        spec: spec.clone(),
        adjacency,
        config: config.clone(),
        causes,
        mechanisms,
        outcomes,
    })
}

/// Handles to a model's parameters on a tape, plus its soft adjacency.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub logits: Var,
    pub adjacency: Var,
    causes: Vec<(BoundMlp, BoundMlp)>,
    backbones: Vec<BoundMlp>,
    /// `[task][mechanism]`
    heads: Vec<Vec<BoundMlp>>,
    outcomes: Vec<(BoundMlp, BoundMlp)>,
    vars: Vec<Var>,
}

/// How the cause enters a task evaluation.
#[derive(Clone, Copy, Debug)]
pub enum CauseInput {
    /// B×1 values.
    Observed(Var),
    /// The conditional mode of `p(X | Z)`.
    Mode,
}

/// How the mechanism vector enters a task evaluation.
#[derive(Clone, Copy, Debug)]
pub enum MechanismInput {
    /// B×M values.
    Observed(Var),
    /// Conditional means.
    Mean,
    /// B×M standardized offsets `ε`, giving `W = μ + σ·ε`.
    Standardized(Var),
}

/// Tape handles for one task evaluated on a batch. Every per-node quantity is
/// B×1.
#[derive(Clone, Debug)]
pub struct TaskTerms {
    pub x: Var,
    pub x_mean: Var,
    pub x_std: Var,
    pub x_log_density: Var,
    pub w: Vec<Var>,
    pub w_mean: Vec<Var>,
    pub w_std: Vec<Var>,
    pub w_log_density: Vec<Var>,
    pub y_mean: Var,
    pub y_std: Var,
    pub y_log_density: Option<Var>,
}

impl TaskTerms {
    /// Per-row joint log density, summed in causal order. Requires an outcome.
    pub fn joint(&self, tape: &mut Tape<'_>) -> Result<Var> {
        let y = self
            .y_log_density
            .ok_or_else(|| Error::Contract("joint density needs an observed outcome".into()))?;
        let mut total = self.x_log_density;
        for &w in &self.w_log_density {
            total = tape.add(total, w)?;
        }
        tape.add(total, y)
    }
}

/// Concrete values of one task evaluation; per-node columns are B×1, mechanism
/// blocks B×M.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskValues {
    pub x: Matrix,
    pub x_mean: Matrix,
    pub x_std: Matrix,
    pub x_log_density: Matrix,
    pub w: Matrix,
    pub w_mean: Matrix,
    pub w_std: Matrix,
    pub w_log_density: Matrix,
    pub y_mean: Matrix,
    pub y_std: Matrix,
    pub y_log_density: Option<Matrix>,
}

fn gaussian_head(tape: &mut Tape<'_>, mean: Var, pre: Var) -> (Var, Var) {
    let sp = tape.softplus(pre);
    (mean, tape.add_const(sp, SIGMA_FLOOR))
}

impl BoundModel {
    /// Handles in [`SemModel::parameters`] order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn gate_row(&self, tape: &mut Tape<'_>, node: usize, parents: &[usize]) -> Result<Var> {
        let at: Vec<(usize, usize)> = parents.iter().map(|&p| (node, p)).collect();
        tape.gather(self.adjacency, &at)
    }

    /// Builds the node densities of task `task` for a batch with confounders
    /// `z` (B×L).
    #[allow(clippy::too_many_arguments)]
    pub fn task_terms(
        &self,
        model: &SemModel,
        tape: &mut Tape<'_>,
        task: usize,
        z: Var,
        cause: CauseInput,
        mechanism: MechanismInput,
        y: Option<Var>,
    ) -> Result<TaskTerms> {
        model.spec.check_task(task)?;
        let (batch, l) = tape.value(z).shape();
        if l != model.spec.confounder_count() {
            return Err(Error::Shape(format!(
                "expected {} confounder columns, got {l}",
                model.spec.confounder_count()
            )));
        }
        let m = model.spec.mechanism_count();
        let check = |tape: &Tape<'_>, v: Var, cols: usize, what: &str| -> Result<()> {
            if tape.value(v).shape() != (batch, cols) {
                return Err(Error::Shape(format!(
                    "{what} must be {batch}x{cols}, got {:?}",
                    tape.value(v).shape()
                )));
            }
            Ok(())
        };

        let cond = &model.causes[task];
        let gate = self.gate_row(tape, cond.node, &cond.parents)?;
        let zin = tape.mul_row(z, gate)?;
        let (mean_net, scale_net) = &self.causes[task];
        let mu = mean_net.apply(tape, zin)?;
        let pre = scale_net.apply(tape, zin)?;
        let (x_mean, x_std) = gaussian_head(tape, mu, pre);
        let x = match cause {
            CauseInput::Observed(v) => {
                check(tape, v, 1, "cause")?;
                v
            }
            CauseInput::Mode => x_mean,
        };
        let x_log_density = tape.gaussian_log_pdf(x, x_mean, x_std)?;

        let (mut w, mut w_mean, mut w_std, mut w_log_density) = (
            Vec::with_capacity(m),
            Vec::with_capacity(m),
            Vec::with_capacity(m),
            Vec::with_capacity(m),
        );
        if let MechanismInput::Observed(v) | MechanismInput::Standardized(v) = mechanism {
            check(tape, v, m, "mechanism block")?;
        }
        for (i, module) in model.mechanisms.iter().enumerate() {
            let gate = self.gate_row(tape, module.node, &module.parents)?;
            let zin = tape.mul_row(z, gate)?;
            let emb = self.backbones[i].apply(tape, zin)?;
            let hin = tape.concat(&[emb, x])?;
            let out = self.heads[task][i].apply(tape, hin)?;
            let mu = tape.slice_cols(out, 0, 1)?;
            let pre = tape.slice_cols(out, 1, 1)?;
            let (mu, sd) = gaussian_head(tape, mu, pre);
            let wi = match mechanism {
                MechanismInput::Observed(v) => tape.slice_cols(v, i, 1)?,
                MechanismInput::Mean => mu,
                MechanismInput::Standardized(e) => {
                    let ei = tape.slice_cols(e, i, 1)?;
                    let shift = tape.mul(sd, ei)?;
                    tape.add(mu, shift)?
                }
            };
            w_log_density.push(tape.gaussian_log_pdf(wi, mu, sd)?);
            w.push(wi);
            w_mean.push(mu);
            w_std.push(sd);
        }

        let win = tape.concat(&w)?;
        let (mean_net, scale_net) = &self.outcomes[task];
        let mu = mean_net.apply(tape, win)?;
        let pre = scale_net.apply(tape, win)?;
        let (y_mean, y_std) = gaussian_head(tape, mu, pre);
        let y_log_density = match y {
            Some(v) => {
                check(tape, v, 1, "outcome")?;
                Some(tape.gaussian_log_pdf(v, y_mean, y_std)?)
            }
            None => None,
        };
        Ok(TaskTerms {
            x,
            x_mean,
            x_std,
            x_log_density,
            w,
            w_mean,
            w_std,
            w_log_density,
            y_mean,
            y_std,
            y_log_density,
        })
    }
}

fn join_columns(tape: &Tape<'_>, parts: &[Var]) -> Matrix {
    let rows = tape.value(parts[0]).rows();
    let mut out = Matrix::zeros(rows, parts.len());
    for (c, &p) in parts.iter().enumerate() {
        let v = tape.value(p);
        for r in 0..rows {
            out.set(r, c, v.get(r, 0));
        }
    }
    out
}

impl SemModel {
    pub fn spec(&self) -> &GraphSpec {
        &self.spec
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tasks(&self) -> usize {
        self.spec.tasks()
    }

    pub fn causes(&self) -> &[NodeConditional] {
        &self.causes
    }

    pub fn causes_mut(&mut self) -> &mut [NodeConditional] {
        &mut self.causes
    }

    pub fn mechanisms(&self) -> &[MechanismModule] {
        &self.mechanisms
    }

    pub fn mechanisms_mut(&mut self) -> &mut [MechanismModule] {
        &mut self.mechanisms
    }

    pub fn outcomes(&self) -> &[NodeConditional] {
        &self.outcomes
    }

    pub fn outcomes_mut(&mut self) -> &mut [NodeConditional] {
        &mut self.outcomes
    }

    /// The full registry in a fixed order: logits, backbones, then for each
    /// task its cause nets, heads and outcome nets.
    pub fn parameters(&self) -> Vec<(ParamInfo, &Matrix)> {
        let mut out = Vec::new();
        out.push((
            ParamInfo {
                name: "graph.logits".into(),
                group: ParamGroup::Graph,
            },
            &self.adjacency.logits,
        ));
        for module in &self.mechanisms {
            let prefix = format!("{}.backbone", self.spec.name(module.node));
            extend_mlp(&mut out, &prefix, ParamGroup::Shared, &module.backbone);
        }
        for k in 0..self.tasks() {
            let g = ParamGroup::Task(k);
            let c = &self.causes[k];
            let x = self.spec.name(c.node);
            extend_mlp(&mut out, &format!("{x}.mean"), g, &c.mean);
            extend_mlp(&mut out, &format!("{x}.scale"), g, &c.scale);
            for module in &self.mechanisms {
                let prefix = format!("{}.head{}", self.spec.name(module.node), k + 1);
                extend_mlp(&mut out, &prefix, g, &module.heads[k]);
            }
            let o = &self.outcomes[k];
            let y = self.spec.name(o.node);
            extend_mlp(&mut out, &format!("{y}.mean"), g, &o.mean);
            extend_mlp(&mut out, &format!("{y}.scale"), g, &o.scale);
        }
        out
    }

    /// Mutable arrays in [`Self::parameters`] order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.adjacency.logits];
        let tasks = self.spec.tasks();
        let mut backbones = Vec::new();
        let mut heads: Vec<Vec<&mut Mlp>> = (0..tasks).map(|_| Vec::new()).collect();
        for module in &mut self.mechanisms {
            backbones.push(&mut module.backbone);
            for (k, h) in module.heads.iter_mut().enumerate() {
                heads[k].push(h);
            }
        }
        for b in backbones {
            out.extend(b.arrays_mut());
        }
        for ((c, o), hs) in self.causes.iter_mut().zip(&mut self.outcomes).zip(heads) {
            out.extend(c.mean.arrays_mut());
            out.extend(c.scale.arrays_mut());
            for h in hs {
                out.extend(h.arrays_mut());
            }
            out.extend(o.mean.arrays_mut());
            out.extend(o.scale.arrays_mut());
        }
        out
    }

    pub fn parameter_groups(&self) -> ParameterGroups {
        let mut groups = ParameterGroups {
            graph: Vec::new(),
            shared: Vec::new(),
            tasks: vec![Vec::new(); self.tasks()],
        };
        for (info, _) in self.parameters() {
            match info.group {
                ParamGroup::Graph => groups.graph.push(info.name),
                ParamGroup::Shared => groups.shared.push(info.name),
                ParamGroup::Task(k) => groups.tasks[k].push(info.name),
            }
        }
        groups
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, m)| m.len()).sum()
    }

    /// Places the registry on `tape`; arrays whose group satisfies `trainable`
    /// become differentiable leaves, the rest constants.
    pub fn bind<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<BoundModel> {
        let vars: Vec<Var> = self
            .parameters()
            .into_iter()
            .map(|(info, m)| {
                if trainable(info.group) {
                    tape.param_ref(m)
                } else {
                    tape.constant_ref(m)
                }
            })
            .collect();
        let mut cursor = 1;
        let mut take = |mlp: &Mlp| {
            let n = 2 * mlp.layers().len();
            let b = BoundMlp::from_vars(&vars[cursor..cursor + n]);
            cursor += n;
            b
        };
        let backbones: Vec<BoundMlp> = self.mechanisms.iter().map(|m| take(&m.backbone)).collect();
        let mut causes = Vec::new();
        let mut heads = Vec::new();
        let mut outcomes = Vec::new();
        for k in 0..self.tasks() {
            causes.push((take(&self.causes[k].mean), take(&self.causes[k].scale)));
            heads.push(self.mechanisms.iter().map(|m| take(&m.heads[k])).collect());
            outcomes.push((take(&self.outcomes[k].mean), take(&self.outcomes[k].scale)));
        }
        let logits = vars[0];
        let adjacency = self.adjacency.soft_adjacency_on(tape, logits)?;
        Ok(BoundModel {
            logits,
            adjacency,
            causes,
            backbones,
            heads,
            outcomes,
            vars,
        })
    }

    /// Evaluates task `task` on a batch without recording gradients. `x` and
    /// `w` default to conditional means when absent.
    pub fn evaluate_task(
        &self,
        task: usize,
        z: &Matrix,
        x: Option<&Matrix>,
        w: Option<&Matrix>,
        y: Option<&Matrix>,
    ) -> Result<TaskValues> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false)?;
        let zv = tape.constant_ref(z);
        let cause = match x {
            Some(x) => CauseInput::Observed(tape.constant_ref(x)),
            None => CauseInput::Mode,
        };
        let mechanism = match w {
            Some(w) => MechanismInput::Observed(tape.constant_ref(w)),
            None => MechanismInput::Mean,
        };
        let yv = y.map(|y| tape.constant_ref(y));
        let t = bound.task_terms(self, &mut tape, task, zv, cause, mechanism, yv)?;
        Ok(TaskValues {
            x: tape.value(t.x).clone(),
            x_mean: tape.value(t.x_mean).clone(),
            x_std: tape.value(t.x_std).clone(),
            x_log_density: tape.value(t.x_log_density).clone(),
            w: join_columns(&tape, &t.w),
            w_mean: join_columns(&tape, &t.w_mean),
            w_std: join_columns(&tape, &t.w_std),
            w_log_density: join_columns(&tape, &t.w_log_density),
            y_mean: tape.value(t.y_mean).clone(),
            y_std: tape.value(t.y_std).clone(),
            y_log_density: t.y_log_density.map(|v| tape.value(v).clone()),
        })
    }

    fn check_assignment(&self, a: &Assignment) -> Result<()> {
        self.spec.check_task(a.task)?;
        if a.z.len() != self.spec.confounder_count() {
            return Err(Error::Contract(format!(
                "assignment has {} confounders, model expects {}",
                a.z.len(),
                self.spec.confounder_count()
            )));
        }
        if a.w.len() != self.spec.mechanism_count() {
            return Err(Error::Contract(format!(
                "assignment has {} mechanism values, model expects {}",
                a.w.len(),
                self.spec.mechanism_count()
            )));
        }
        let finite = a.z.iter().chain(&a.w).all(|v| v.is_finite()) && a.x.is_finite() && a.y.is_finite();
        if !finite {
            return Err(Error::Contract("assignment contains non-finite values".into()));
        }
        Ok(())
    }

    /// Node-by-node log densities of a complete assignment.
    pub fn log_density_terms(&self, a: &Assignment) -> Result<DensityTerms> {
        self.check_assignment(a)?;
        let v = self.evaluate_task(
            a.task,
            &Matrix::row_vector(&a.z),
            Some(&Matrix::scalar(a.x)),
            Some(&Matrix::row_vector(&a.w)),
            Some(&Matrix::scalar(a.y)),
        )?;
        Ok(DensityTerms {
            cause: v.x_log_density.get(0, 0),
            mechanisms: v.w_log_density.row(0).to_vec(),
            outcome: v.y_log_density.expect("outcome supplied").get(0, 0),
        })
    }

    /// `log p(n_i | pa_i)` for a cause, mechanism or outcome node of the
    /// assignment's task.
    pub fn node_log_density(&self, node: usize, a: &Assignment) -> Result<f64> {
        let terms = self.log_density_terms(a)?;
        if node == self.spec.cause(a.task) {
            return Ok(terms.cause);
        }
        if node == self.spec.outcome(a.task) {
            return Ok(terms.outcome);
        }
        if let Some(i) = self.spec.mechanisms().iter().position(|&w| w == node) {
            return Ok(terms.mechanisms[i]);
        }
        Err(Error::Contract(format!(
            "node {node} has no conditional in task {}",
            a.task + 1
        )))
    }

    /// Sum of the node log densities in causal order. Confounders carry no
    /// modelled density.
    pub fn joint_log_density(&self, a: &Assignment) -> Result<f64> {
        Ok(self.log_density_terms(a)?.total())
    }

    /// Mean and standard deviation of `W_i` (zero-based mechanism index) in
    /// task `task` given confounders and cause.
    pub fn mechanism_conditional(&self, i: usize, z: &[f64], x: f64, task: usize) -> Result<(f64, f64)> {
        self.spec.check_task(task)?;
        if i >= self.spec.mechanism_count() {
            return Err(Error::Contract(format!("no mechanism variable {i}")));
        }
        let v = self.evaluate_task(task, &Matrix::row_vector(z), Some(&Matrix::scalar(x)), None, None)?;
        Ok((v.w_mean.get(0, i), v.w_std.get(0, i)))
    }

    /// Backbone output of mechanism `i` for confounders `z`. Tasks never enter.
    pub fn backbone_embedding(&self, i: usize, z: &[f64]) -> Result<Vec<f64>> {
        let module = self
            .mechanisms
            .get(i)
            .ok_or_else(|| Error::Contract(format!("no mechanism variable {i}")))?;
        if z.len() != self.spec.confounder_count() {
            return Err(Error::Shape(format!(
                "expected {} confounders, got {}",
                self.spec.confounder_count(),
                z.len()
            )));
        }
        let gated: Vec<f64> = module
            .parents
            .iter()
            .zip(z)
            .map(|(&p, &v)| v * self.adjacency.weight(module.node, p))
            .collect();
        module.backbone.forward(&gated)
    }

    /// Modes propagated forward: `X` from `p(X | Z)` unless overridden, each
    /// `W_i` at its conditional mean, `Y` at its conditional mean.
    pub fn forward_modes(&self, z: &[f64], task: usize, x_override: Option<f64>) -> Result<Assignment> {
        if z.len() != self.spec.confounder_count() {
            return Err(Error::Shape(format!(
                "expected {} confounders, got {}",
                self.spec.confounder_count(),
                z.len()
            )));
        }
        let x = x_override.map(Matrix::scalar);
        let v = self.evaluate_task(task, &Matrix::row_vector(z), x.as_ref(), None, None)?;
        Ok(Assignment {
            task,
            z: z.to_vec(),
            x: v.x.get(0, 0),
            w: v.w.row(0).to_vec(),
            y: v.y_mean.get(0, 0),
        })
    }
}

fn extend_mlp<'a>(out: &mut Vec<(ParamInfo, &'a Matrix)>, prefix: &str, group: ParamGroup, mlp: &'a Mlp) {
    for (j, layer) in mlp.layers().iter().enumerate() {
        out.push((
            ParamInfo {
                name: format!("{prefix}.{j}.weight"),
                group,
            },
            &layer.weight,
        ));
        out.push((
            ParamInfo {
                name: format!("{prefix}.{j}.bias"),
                group,
            },
            &layer.bias,
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::finite_difference_check;

    fn small() -> SemModel {
        let spec = GraphSpec::standard(2, 3, 2).unwrap();
        let config = ModelConfig {
            hidden_layers: vec![5],
            embed: 3,
            ..ModelConfig::with_seed(4)
        };
        build_model(&spec, &config).unwrap()
    }

    fn record(task: usize) -> Assignment {
        Assignment {
            task,
            z: vec![0.3, -1.1, 0.8],
            x: 0.4,
            w: vec![-0.2, 0.9],
            y: 1.3,
        }
    }

    #[test]
    fn build_is_deterministic_and_counts_modules() {
        let spec = GraphSpec::standard(3, 8, 5).unwrap();
        let a = build_model(&spec, &ModelConfig::with_seed(1)).unwrap();
        let b = build_model(&spec, &ModelConfig::with_seed(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.mechanisms().len(), 5);
        let heads: usize = a.mechanisms().iter().map(|m| m.heads.len()).sum();
        assert_eq!(heads, 15);
    }

    #[test]
    fn groups_partition_the_registry() {
        let model = small();
        let params = model.parameters();
        let groups = model.parameter_groups();
        assert_eq!(groups.tasks.len(), 2);
        let mut all: Vec<String> = groups.graph.clone();
        all.extend(groups.shared.clone());
        for t in &groups.tasks {
            all.extend(t.clone());
        }
        assert_eq!(all.len(), params.len());
        let mut names: Vec<String> = params.iter().map(|(i, _)| i.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), params.len());
    }

    #[test]
    fn mutable_registry_matches_shapes() {
        let mut model = small();
        let shapes: Vec<_> = model.parameters().iter().map(|(_, m)| m.shape()).collect();
        let mut_shapes: Vec<_> = model.parameters_mut().iter().map(|m| m.shape()).collect();
        assert_eq!(shapes, mut_shapes);
    }

    #[test]
    fn decomposition_is_exact() {
        let model = small();
        let a = record(1);
        let t = model.log_density_terms(&a).unwrap();
        let joint = model.joint_log_density(&a).unwrap();
        let by_nodes = model.node_log_density(model.spec().cause(1), &a).unwrap()
            + model.node_log_density(model.spec().mechanisms()[0], &a).unwrap()
            + model.node_log_density(model.spec().mechanisms()[1], &a).unwrap()
            + model.node_log_density(model.spec().outcome(1), &a).unwrap();
        assert!((joint - by_nodes).abs() < 1e-12);
        let reversed = t.outcome + t.mechanisms.iter().rev().sum::<f64>() + t.cause;
        assert!((joint - reversed).abs() < 1e-12);
    }

    #[test]
    fn confounder_has_no_density() {
        let model = small();
        assert!(matches!(
            model.node_log_density(0, &record(0)),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn incomplete_assignment_is_rejected() {
        let model = small();
        let mut a = record(0);
        a.w.pop();
        assert!(matches!(model.joint_log_density(&a), Err(Error::Contract(_))));
        let mut a = record(0);
        a.task = 5;
        assert!(matches!(model.joint_log_density(&a), Err(Error::TaskIndex { .. })));
    }

    #[test]
    fn sigma_respects_floor() {
        let mut model = small();
        for c in model.causes_mut() {
            let last = c.scale.layers_mut().last_mut().unwrap();
            last.bias = Matrix::scalar(-1e3);
        }
        let v = model
            .evaluate_task(0, &Matrix::row_vector(&[1.0, 2.0, 3.0]), None, None, None)
            .unwrap();
        assert!(v.x_std.get(0, 0) >= SIGMA_FLOOR);
    }

    #[test]
    fn zero_head_returns_bias() {
        let mut model = small();
        for l in model.mechanisms_mut()[0].heads[1].layers_mut() {
            l.weight = Matrix::zeros(l.weight.rows(), l.weight.cols());
        }
        model.mechanisms_mut()[0].heads[1].layers_mut().last_mut().unwrap().bias =
            Matrix::row_vector(&[0.25, 0.0]);
        let (mu, _) = model.mechanism_conditional(0, &[1.0, 2.0, 3.0], 0.7, 1).unwrap();
        let (mu2, _) = model.mechanism_conditional(0, &[-4.0, 0.0, 9.0], -3.0, 1).unwrap();
        assert_eq!((mu, mu2), (0.25, 0.25));
    }

    #[test]
    fn masked_confounder_is_ignored() {
        let mut model = small();
        let w0 = model.spec().mechanisms()[0];
        let x0 = model.spec().cause(0);
        model.adjacency.logits.set(w0, 1, -1e4);
        model.adjacency.logits.set(x0, 1, -1e4);
        let a = model.mechanism_conditional(0, &[0.3, 5.0, 0.8], 0.2, 0).unwrap();
        let b = model.mechanism_conditional(0, &[0.3, -7.0, 0.8], 0.2, 0).unwrap();
        assert_eq!(a, b);
        let mut r = record(0);
        let before = model.node_log_density(x0, &r).unwrap();
        r.z[1] = 42.0;
        assert_eq!(model.node_log_density(x0, &r).unwrap(), before);
    }

    #[test]
    fn forward_modes_respect_override_and_means() {
        let model = small();
        let z = [0.1, 0.2, -0.3];
        let a = model.forward_modes(&z, 1, Some(2.5)).unwrap();
        assert_eq!(a.x, 2.5);
        for i in 0..2 {
            assert_eq!(a.w[i], model.mechanism_conditional(i, &z, 2.5, 1).unwrap().0);
        }
        let m = model.forward_modes(&z, 1, None).unwrap();
        let v = model.evaluate_task(1, &Matrix::row_vector(&z), None, None, None).unwrap();
        assert_eq!(m.x, v.x_mean.get(0, 0));
    }

    #[test]
    fn backbone_is_shared_across_tasks() {
        let model = small();
        let z = [0.5, -0.5, 1.5];
        let direct = model.backbone_embedding(1, &z).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, |_| false).unwrap();
        let zv = tape.constant(Matrix::row_vector(&z));
        let gate = bound
            .gate_row(&mut tape, model.mechanisms()[1].node, &model.mechanisms()[1].parents)
            .unwrap();
        let zin = tape.mul_row(zv, gate).unwrap();
        let emb = bound.backbones[1].apply(&mut tape, zin).unwrap();
        assert_eq!(tape.value(emb).as_slice(), direct.as_slice());
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let model = small();
        let a = record(0);
        let err = finite_difference_check(
            |t, v| {
                let bound = model.bind(t, |_| false)?;
                let z = t.constant(Matrix::row_vector(&a.z));
                let y = t.constant(Matrix::scalar(a.y));
                let terms = bound.task_terms(
                    &model,
                    t,
                    0,
                    z,
                    CauseInput::Observed(v[0]),
                    MechanismInput::Observed(v[1]),
                    Some(y),
                )?;
                let j = terms.joint(t)?;
                Ok(t.sum(j))
            },
            &[Matrix::scalar(a.x), Matrix::row_vector(&a.w)],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
