//! Variable roster, the constrained adjacency `A = sigmoid(Λ)⊙M + A_fix`, the
//! trace-exponential acyclicity penalty, hardening and topological ordering.
//!
//! Row-parent convention throughout: `A[i, j] = 1` means variable `j` is a
//! direct cause of variable `i`, so row `i` selects the parents of `i`.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashSet};

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Matrix, Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Confounder,
    Cause,
    Mechanism,
    Outcome,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub role: Role,
    /// Zero-based task for causes and outcomes; `None` for shared variables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<usize>,
}

impl Variable {
    pub fn new(name: impl Into<String>, role: Role, task: Option<usize>) -> Self {
        Self {
            name: name.into(),
            role,
            task,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct GraphSpecRepr {
    variables: Vec<Variable>,
}

/// Ordered roster of confounders `Z`, mechanism variables `W`, and one cause
/// `X_k` plus one outcome `Y_k` per task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "GraphSpecRepr", into = "GraphSpecRepr")]
pub struct GraphSpec {
    variables: Vec<Variable>,
    confounders: Vec<usize>,
    mechanisms: Vec<usize>,
    causes: Vec<usize>,
    outcomes: Vec<usize>,
}

impl TryFrom<GraphSpecRepr> for GraphSpec {
    type Error = Error;
    fn try_from(r: GraphSpecRepr) -> Result<Self> {
        GraphSpec::new(r.variables)
    }
}

impl From<GraphSpec> for GraphSpecRepr {
    fn from(s: GraphSpec) -> Self {
        GraphSpecRepr {
            variables: s.variables,
        }
    }
}

impl GraphSpec {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        let mut names = HashSet::new();
        for v in &variables {
            if !names.insert(v.name.as_str()) {
                return Err(Error::InvalidSpec(format!("duplicate variable name {}", v.name)));
            }
        }
        let tasks = variables
            .iter()
            .filter_map(|v| v.task)
            .max()
            .map_or(0, |t| t + 1);
        let mut causes = vec![None; tasks];
        let mut outcomes = vec![None; tasks];
        let mut confounders = Vec::new();
        let mut mechanisms = Vec::new();
        for (i, v) in variables.iter().enumerate() {
            match (v.role, v.task) {
                (Role::Confounder, None) => confounders.push(i),
                (Role::Mechanism, None) => mechanisms.push(i),
                (Role::Cause, Some(k)) => {
                    if causes[k].replace(i).is_some() {
                        return Err(Error::InvalidSpec(format!("task {} has two causes", k + 1)));
                    }
                }
                (Role::Outcome, Some(k)) => {
                    if outcomes[k].replace(i).is_some() {
                        return Err(Error::InvalidSpec(format!(
                            "task {} has two outcomes",
                            k + 1
                        )));
                    }
                }
                (role, task) => {
                    return Err(Error::InvalidSpec(format!(
                        "variable {} has role {role:?} with task {task:?}",
                        v.name
                    )))
                }
            }
        }
        if tasks == 0 {
            return Err(Error::InvalidSpec("at least one task is required".into()));
        }
        if confounders.is_empty() {
            return Err(Error::InvalidSpec("at least one confounder is required".into()));
        }
        if mechanisms.is_empty() {
            return Err(Error::InvalidSpec(
                "at least one mechanism variable is required".into(),
            ));
        }
        let unwrap_all = |v: Vec<Option<usize>>, what: &str| -> Result<Vec<usize>> {
            v.into_iter()
                .enumerate()
                .map(|(k, i)| {
                    i.ok_or_else(|| Error::InvalidSpec(format!("task {} has no {what}", k + 1)))
                })
                .collect()
        };
        let causes = unwrap_all(causes, "cause")?;
        let outcomes = unwrap_all(outcomes, "outcome")?;
        Ok(Self {
            variables,
            confounders,
            mechanisms,
            causes,
            outcomes,
        })
    }

    /// Roster `Z1..ZL, W1..WM, X1..XK, Y1..YK`.
    pub fn standard(tasks: usize, confounders: usize, mechanisms: usize) -> Result<Self> {
        let mut vars = Vec::new();
        vars.extend((1..=confounders).map(|l| Variable::new(format!("Z{l}"), Role::Confounder, None)));
        vars.extend((1..=mechanisms).map(|i| Variable::new(format!("W{i}"), Role::Mechanism, None)));
        vars.extend((0..tasks).map(|k| Variable::new(format!("X{}", k + 1), Role::Cause, Some(k))));
        vars.extend((0..tasks).map(|k| Variable::new(format!("Y{}", k + 1), Role::Outcome, Some(k))));
        Self::new(vars)
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn len(&self) -> usize {
        self.variables.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variables.is_empty()
    }

    pub fn tasks(&self) -> usize {
        self.causes.len()
    }

    pub fn confounder_count(&self) -> usize {
        self.confounders.len()
    }

    pub fn mechanism_count(&self) -> usize {
        self.mechanisms.len()
    }

    pub fn confounders(&self) -> &[usize] {
        &self.confounders
    }

    pub fn mechanisms(&self) -> &[usize] {
        &self.mechanisms
    }

    pub fn cause(&self, task: usize) -> usize {
        self.causes[task]
    }

    pub fn outcome(&self, task: usize) -> usize {
        self.outcomes[task]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.variables[index].name
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.tasks() {
            return Err(Error::TaskIndex {
                index: task,
                tasks: self.tasks(),
            });
        }
        Ok(())
    }
}

/// Learnable-position mask and fixed prior edges for `spec`.
///
/// Fixed: `X_k → W_i` and `W_i → Y_k` for every task and mechanism variable.
/// Learnable: `Z_l → X_k` and `Z_l → W_i`. Everything else is forbidden.
pub fn build_structure(spec: &GraphSpec) -> (Matrix, Matrix) {
    let n = spec.len();
    let mut mask = Matrix::zeros(n, n);
    let mut fixed = Matrix::zeros(n, n);
    for k in 0..spec.tasks() {
        let (x, y) = (spec.cause(k), spec.outcome(k));
        for &w in spec.mechanisms() {
            fixed.set(w, x, 1.0);
            fixed.set(y, w, 1.0);
        }
        for &z in spec.confounders() {
            mask.set(x, z, 1.0);
        }
    }
    for &w in spec.mechanisms() {
        for &z in spec.confounders() {
            mask.set(w, z, 1.0);
        }
    }
    (mask, fixed)
}

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Relaxed adjacency: logits over the learnable positions plus fixed edges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdjacencyModel {
    pub logits: Matrix,
    pub mask: Matrix,
    pub fixed: Matrix,
    pub threshold: f64,
}

impl AdjacencyModel {
    /// Structure from [`build_structure`] with all logits at zero.
    pub fn new(spec: &GraphSpec, threshold: f64) -> Result<Self> {
        let (mask, fixed) = build_structure(spec);
        let n = spec.len();
        let model = Self {
            logits: Matrix::zeros(n, n),
            mask,
            fixed,
            threshold,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.logits.rows();
        for m in [&self.logits, &self.mask, &self.fixed] {
            if m.shape() != (n, n) {
                return Err(Error::Shape(format!(
                    "adjacency parts must be {n}x{n}, found {:?}",
                    m.shape()
                )));
            }
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::InvalidSpec(format!(
                "threshold must lie in (0,1), got {}",
                self.threshold
            )));
        }
        for i in 0..n {
            for j in 0..n {
                let (m, f) = (self.mask.get(i, j), self.fixed.get(i, j));
                if (m != 0.0 && m != 1.0) || (f != 0.0 && f != 1.0) {
                    return Err(Error::InvalidSpec("mask and fixed parts must be binary".into()));
                }
                if m == 1.0 && f == 1.0 {
                    return Err(Error::InvalidSpec(format!(
                        "entry ({i},{j}) is both learnable and fixed"
                    )));
                }
                if i == j && (m == 1.0 || f == 1.0) {
                    return Err(Error::InvalidSpec(format!("self-loop on variable {i}")));
                }
            }
        }
        Ok(())
    }

    pub fn size(&self) -> usize {
        self.logits.rows()
    }

    pub fn is_learnable(&self, child: usize, parent: usize) -> bool {
        self.mask.get(child, parent) == 1.0
    }

    pub fn is_fixed(&self, child: usize, parent: usize) -> bool {
        self.fixed.get(child, parent) == 1.0
    }

    /// Edge weight in `[0,1]`: 1 on fixed edges, `sigmoid(logit)` on learnable
    /// ones, 0 elsewhere.
    pub fn weight(&self, child: usize, parent: usize) -> f64 {
        sigmoid(self.logits.get(child, parent)) * self.mask.get(child, parent)
            + self.fixed.get(child, parent)
    }

    pub fn soft_adjacency(&self) -> Matrix {
        let n = self.size();
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, self.weight(i, j));
            }
        }
        a
    }

    /// [`Self::soft_adjacency`] on a tape, differentiable in `logits`.
    pub fn soft_adjacency_on<'a>(&'a self, tape: &mut Tape<'a>, logits: Var) -> Result<Var> {
        let mask = tape.constant_ref(&self.mask);
        let fixed = tape.constant_ref(&self.fixed);
        let s = tape.sigmoid(logits);
        let masked = tape.mul(s, mask)?;
        tape.add(masked, fixed)
    }

    /// Binary adjacency: learnable entries kept when `sigmoid(logit) > threshold`.
    pub fn harden(&self) -> Result<Matrix> {
        let n = self.size();
        let mut a = self.fixed.clone();
        for i in 0..n {
            for j in 0..n {
                if self.is_learnable(i, j) && sigmoid(self.logits.get(i, j)) > self.threshold {
                    a.set(i, j, 1.0);
                }
            }
        }
        topological_order(&a)?;
        Ok(a)
    }
}

/// `tr(exp(A⊙A)) − n` through its power series; see [`acyclicity_on`].
pub fn acyclicity_penalty(a: &Matrix) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.constant_ref(a);
    let p = acyclicity_on(&mut tape, v)?;
    tape.scalar_value(p)
}

/// Differentiable [`acyclicity_penalty`]. The order-zero term `tr(I) = n`
/// cancels, so the series starts at `B = A⊙A`. Summation stops once a term is
/// exactly zero (nilpotent `B`), or after at least `n` terms once further
/// terms fall below rounding.
pub fn acyclicity_on(tape: &mut Tape<'_>, a: Var) -> Result<Var> {
    let (rows, cols) = tape.value(a).shape();
    if rows != cols {
        return Err(Error::Shape(format!(
            "acyclicity penalty needs a square matrix, got {rows}x{cols}"
        )));
    }
    if rows == 0 {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let b = tape.mul(a, a)?;
    let mut term = b;
    let mut total = tape.trace(term)?;
    let mut p = 1usize;
    loop {
        let size = tape.value(term).max_abs();
        if size == 0.0 {
            break;
        }
        if p >= rows && (size * rows as f64 <= f64::EPSILON * 1e-3 || p >= rows + MAX_EXTRA_TERMS) {
            break;
        }
        p += 1;
        let next = tape.matmul(term, b)?;
        term = tape.scale(next, 1.0 / p as f64);
        let tr = tape.trace(term)?;
        total = tape.add(total, tr)?;
    }
    Ok(total)
}

const MAX_EXTRA_TERMS: usize = 60;

/// Order in which every variable follows all of its parents; ties go to the
/// lower roster index.
pub fn topological_order(a: &Matrix) -> Result<Vec<usize>> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape(format!("adjacency must be square, got {:?}", a.shape())));
    }
    let mut indegree: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| a.get(i, j) != 0.0).count())
        .collect();
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(j)) = ready.pop() {
        order.push(j);
        for i in 0..n {
            if a.get(i, j) != 0.0 {
                indegree[i] -= 1;
                if indegree[i] == 0 {
                    ready.push(Reverse(i));
                }
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    let placed: HashSet<usize> = order.into_iter().collect();
    Err(Error::CyclicGraph {
        cycle: find_cycle(a, &placed).iter().map(|i| i.to_string()).collect(),
    })
}

/// Walks parent links among unplaced nodes until one repeats. Every unplaced
/// node has an unplaced parent, so the walk cannot stall.
fn find_cycle(a: &Matrix, placed: &HashSet<usize>) -> Vec<usize> {
    let n = a.rows();
    let start = (0..n).find(|i| !placed.contains(i)).expect("a node is unplaced");
    let mut path = vec![start];
    let mut current = start;
    loop {
        let parent = (0..n)
            .find(|&j| a.get(current, j) != 0.0 && !placed.contains(&j))
            .expect("unplaced node has an unplaced parent");
        if let Some(pos) = path.iter().position(|&p| p == parent) {
            // path runs child -> parent; report it in causal direction
            let mut cycle = vec![parent];
            cycle.extend(path[pos + 1..].iter().rev());
            cycle.push(parent);
            return cycle;
        }
        path.push(parent);
        current = parent;
    }
}

/// Names a cycle error produced by [`topological_order`].
pub(crate) fn name_cycle(err: Error, spec: &GraphSpec) -> Error {
    match err {
        Error::CyclicGraph { cycle } => Error::CyclicGraph {
            cycle: cycle
                .into_iter()
                .map(|c| match c.parse::<usize>() {
                    Ok(i) if i < spec.len() => spec.name(i).to_string(),
                    _ => c,
                })
                .collect(),
        },
        other => other,
    }
}
