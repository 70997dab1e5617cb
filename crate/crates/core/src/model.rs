//! Two-slice temporal Bayes nets (2TBNs).
//!
//! A [`Tbn`] declares variables with roles and one CPD node per group of
//! slice-(t+1) variables. Persistent variables (roles `State` and `Bias`) exist
//! in both slices; everything else lives only in slice t+1. CPD inputs name a
//! variable and the slice it is read from ([`Input::Prev`] or [`Input::Curr`]).
//! Discrete mode signals are known inputs that switch parameter sets; they are
//! never inferred.
//!
//! In joint Gaussians the slice-t copy of `x` is labeled `x` and the slice-(t+1)
//! copy `x'`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::Gaussian;
use crate::quadrature::Precision;

/// Default residual tolerance (max-norm) for fixed-point CPDs.
pub const FIXED_POINT_TOL: f64 = 1e-8;
pub const FIXED_POINT_MAX_ITER: usize = 500;
/// Default bias contraction factor.
pub const DEFAULT_GAMMA: f64 = 0.97;

/// Label of the slice-(t+1) copy of `name`.
pub fn next_label(name: &str) -> String {
    format!("{name}'")
}

/// Known discrete inputs for one transition. Unset signals read as 0.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct Modes(BTreeMap<String, i64>);

impl Modes {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, signal: &str, value: i64) -> Self {
        self.0.insert(signal.to_string(), value);
        self
    }

    pub fn set(&mut self, signal: &str, value: i64) {
        self.0.insert(signal.to_string(), value);
    }

    pub fn get(&self, signal: &str) -> i64 {
        self.0.get(signal).copied().unwrap_or(0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, i64)> {
        self.0.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

/// Deterministic CPD body: `f(inputs, modes, out)`.
pub type NodeFn = Arc<dyn Fn(&[f64], &Modes, &mut [f64]) + Send + Sync>;
/// Fixed-point update map: `Φ(z, inputs, modes, out)`.
pub type UpdateFn = Arc<dyn Fn(&[f64], &[f64], &Modes, &mut [f64]) + Send + Sync>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    /// Persistent belief-state variable.
    State,
    /// Persistent sensor-bias variable.
    Bias,
    Sensor,
    /// Slice-(t+1) only; marginalized out at the end of each step.
    Transient,
    /// Local to one CPD's staged decomposition.
    Encapsulated,
}

impl Role {
    pub fn is_persistent(self) -> bool {
        matches!(self, Role::State | Role::Bias)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variable {
    pub name: String,
    pub role: Role,
    pub units: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Input {
    /// Slice-t value of a persistent variable.
    Prev(String),
    /// Slice-(t+1) value.
    Curr(String),
    /// Output of an earlier stage of the same staged CPD.
    Local(String),
}

impl Input {
    pub fn name(&self) -> &str {
        match self {
            Input::Prev(n) | Input::Curr(n) | Input::Local(n) => n,
        }
    }

    /// Label in the joint Gaussian over both slices.
    pub fn label(&self) -> String {
        match self {
            Input::Prev(n) | Input::Local(n) => n.clone(),
            Input::Curr(n) => next_label(n),
        }
    }
}

pub fn prev(name: &str) -> Input {
    Input::Prev(name.to_string())
}

pub fn curr(name: &str) -> Input {
    Input::Curr(name.to_string())
}

pub fn local(name: &str) -> Input {
    Input::Local(name.to_string())
}

/// A parameter set selected by a mode signal.
#[derive(Clone, Debug, PartialEq)]
pub struct Switched<T> {
    pub default: T,
    pub signal: Option<String>,
    pub cases: Vec<(i64, T)>,
}

impl<T> Switched<T> {
    pub fn fixed(value: T) -> Self {
        Self {
            default: value,
            signal: None,
            cases: Vec::new(),
        }
    }

    pub fn by_mode(signal: &str, default: T, cases: Vec<(i64, T)>) -> Self {
        Self {
            default,
            signal: Some(signal.to_string()),
            cases,
        }
    }

    pub fn resolve(&self, modes: &Modes) -> &T {
        match &self.signal {
            None => &self.default,
            Some(s) => {
                let v = modes.get(s);
                self.cases
                    .iter()
                    .find(|(k, _)| *k == v)
                    .map(|(_, t)| t)
                    .unwrap_or(&self.default)
            }
        }
    }

    pub fn all(&self) -> impl Iterator<Item = &T> {
        std::iter::once(&self.default).chain(self.cases.iter().map(|(_, t)| t))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub noise_var: f64,
}

#[derive(Clone, Debug)]
pub struct LinearCpd {
    pub inputs: Vec<Input>,
    pub params: Switched<LinearParams>,
}

/// `Bias' = γ·Bias + V`.
#[derive(Clone, Debug, PartialEq)]
pub struct BiasCpd {
    pub gamma: f64,
    pub drift_var: f64,
}

#[derive(Clone)]
pub struct Stage {
    pub output: String,
    pub inputs: Vec<Input>,
    pub func: NodeFn,
}

impl fmt::Debug for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Stage")
            .field("output", &self.output)
            .field("inputs", &self.inputs)
            .finish_non_exhaustive()
    }
}

#[derive(Clone)]
pub enum NonlinearBody {
    Direct {
        inputs: Vec<Input>,
        func: NodeFn,
    },
    /// Encapsulated decomposition; the last stage produces the child.
    Staged(Vec<Stage>),
}

#[derive(Clone)]
pub struct NonlinearCpd {
    pub body: NonlinearBody,
    /// Additive Gaussian noise on the children.
    pub noise_cov: DMatrix<f64>,
    /// Extra independent standard-normal arguments appended after the inputs
    /// (noise that enters the function nonlinearly). Direct bodies only.
    pub input_noise: usize,
    pub precision: Option<Precision>,
}

impl fmt::Debug for NonlinearCpd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut d = f.debug_struct("NonlinearCpd");
        match &self.body {
            NonlinearBody::Direct { inputs, .. } => d.field("inputs", inputs),
            NonlinearBody::Staged(stages) => d.field("stages", stages),
        };
        d.field("noise_cov", &self.noise_cov)
            .field("input_noise", &self.input_noise)
            .field("precision", &self.precision)
            .finish_non_exhaustive()
    }
}

/// Procedural vector CPD: iterates `z ← Φ(z, inputs)` to convergence.
#[derive(Clone)]
pub struct FixedPointCpd {
    pub inputs: Vec<Input>,
    pub update: UpdateFn,
    /// Initial guess for the first step (and whenever no warm start exists).
    pub nominal: Vec<f64>,
    /// Start from the previous slice's values of the outputs when they are persistent.
    pub warm_start: bool,
    pub tolerance: f64,
    pub max_iter: usize,
    pub noise_cov: DMatrix<f64>,
    pub precision: Option<Precision>,
}

impl fmt::Debug for FixedPointCpd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FixedPointCpd")
            .field("inputs", &self.inputs)
            .field("nominal", &self.nominal)
            .field("warm_start", &self.warm_start)
            .field("tolerance", &self.tolerance)
            .field("max_iter", &self.max_iter)
            .field("noise_cov", &self.noise_cov)
            .finish_non_exhaustive()
    }
}

/// Result of a converged fixed-point solve.
#[derive(Clone, Debug)]
pub struct FixedPointSolution {
    pub iterations: usize,
    pub residual: f64,
}

impl FixedPointCpd {
    /// Solves in place: `z` holds the initial guess on entry and the fixed
    /// point on success.
    pub fn solve(&self, inputs: &[f64], modes: &Modes, z: &mut [f64]) -> Result<FixedPointSolution> {
        let mut next = vec![0.0; z.len()];
        let mut residual = f64::INFINITY;
        for it in 1..=self.max_iter {
            (self.update)(z, inputs, modes, &mut next);
            residual = z.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            z.copy_from_slice(&next);
            if !residual.is_finite() {
                break;
            }
            if residual < self.tolerance {
                return Ok(FixedPointSolution {
                    iterations: it,
                    residual,
                });
            }
        }
        Err(Error::FixedPointDiverged {
            iterations: self.max_iter,
            residual,
        })
    }
}

#[derive(Clone, Debug)]
pub enum Cpd {
    Linear(LinearCpd),
    Bias(BiasCpd),
    Nonlinear(NonlinearCpd),
    FixedPoint(FixedPointCpd),
}

impl Cpd {
    pub fn linear(weights: &[(Input, f64)], intercept: f64, noise_var: f64) -> Self {
        Cpd::Linear(LinearCpd {
            inputs: weights.iter().map(|(i, _)| i.clone()).collect(),
            params: Switched::fixed(LinearParams {
                weights: weights.iter().map(|(_, w)| *w).collect(),
                intercept,
                noise_var,
            }),
        })
    }

    pub fn bias(gamma: f64, drift_var: f64) -> Self {
        Cpd::Bias(BiasCpd { gamma, drift_var })
    }

    pub fn nonlinear(inputs: Vec<Input>, func: NodeFn, noise_cov: DMatrix<f64>) -> Self {
        Cpd::Nonlinear(NonlinearCpd {
            body: NonlinearBody::Direct { inputs, func },
            noise_cov,
            input_noise: 0,
            precision: None,
        })
    }

    pub fn staged(stages: Vec<Stage>, noise_var: f64) -> Self {
        Cpd::Nonlinear(NonlinearCpd {
            body: NonlinearBody::Staged(stages),
            noise_cov: DMatrix::from_element(1, 1, noise_var),
            input_noise: 0,
            precision: None,
        })
    }

    pub fn is_nonlinear(&self) -> bool {
        matches!(self, Cpd::Nonlinear(_) | Cpd::FixedPoint(_))
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub children: Vec<String>,
    pub cpd: Cpd,
}

impl Node {
    /// Inputs read from the network (stage-local inputs excluded), in first
    /// appearance order without duplicates.
    pub fn inputs(&self) -> Vec<Input> {
        let mut out: Vec<Input> = Vec::new();
        let mut push = |i: &Input| {
            if !matches!(i, Input::Local(_)) && !out.contains(i) {
                out.push(i.clone());
            }
        };
        match &self.cpd {
            Cpd::Linear(l) => l.inputs.iter().for_each(&mut push),
            Cpd::Bias(_) => {
                if let Some(c) = self.children.first() {
                    push(&Input::Prev(c.clone()))
                }
            }
            Cpd::Nonlinear(n) => match &n.body {
                NonlinearBody::Direct { inputs, .. } => inputs.iter().for_each(&mut push),
                NonlinearBody::Staged(stages) => stages.iter().flat_map(|s| s.inputs.iter()).for_each(&mut push),
            },
            Cpd::FixedPoint(fp) => fp.inputs.iter().for_each(&mut push),
        }
        out
    }

    /// Names of encapsulated temporaries (all stage outputs but the last).
    pub fn temps(&self) -> Vec<String> {
        match &self.cpd {
            Cpd::Nonlinear(NonlinearCpd {
                body: NonlinearBody::Staged(stages),
                ..
            }) if !stages.is_empty() => stages[..stages.len() - 1].iter().map(|s| s.output.clone()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn precision(&self) -> Option<Precision> {
        match &self.cpd {
            Cpd::Nonlinear(n) => n.precision,
            Cpd::FixedPoint(fp) => fp.precision,
            _ => None,
        }
    }
}

/// One model invariant violation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub message: String,
    pub variables: Vec<String>,
}

impl Diagnostic {
    fn new(message: String, variables: &[&str]) -> Self {
        Self {
            message,
            variables: variables.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tbn {
    pub variables: Vec<Variable>,
    pub nodes: Vec<Node>,
    pub mode_signals: Vec<String>,
}

impl Tbn {
    pub fn variable(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn role(&self, name: &str) -> Option<Role> {
        self.variable(name).map(|v| v.role)
    }

    /// Persistent variables in declaration order: the belief-state layout.
    pub fn persistent(&self) -> Vec<String> {
        self.names_with(|r| r.is_persistent())
    }

    pub fn sensors(&self) -> Vec<String> {
        self.names_with(|r| r == Role::Sensor)
    }

    fn names_with(&self, pred: impl Fn(Role) -> bool) -> Vec<String> {
        self.variables
            .iter()
            .filter(|v| pred(v.role))
            .map(|v| v.name.clone())
            .collect()
    }

    /// Index of the node producing `var` in slice t+1.
    pub fn node_of(&self, var: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.children.iter().any(|c| c == var))
    }

    /// Bias variable feeding a sensor's CPD, if any.
    pub fn sensor_bias(&self, sensor: &str) -> Option<String> {
        let node = &self.nodes[self.node_of(sensor)?];
        node.inputs()
            .into_iter()
            .find(|i| self.role(i.name()) == Some(Role::Bias))
            .map(|i| i.name().to_string())
    }

    /// Noise variance of a scalar sensor's additive noise.
    pub fn sensor_noise_var(&self, sensor: &str, modes: &Modes) -> Option<f64> {
        let node = &self.nodes[self.node_of(sensor)?];
        let k = node.children.iter().position(|c| c == sensor)?;
        match &node.cpd {
            Cpd::Linear(l) => Some(l.params.resolve(modes).noise_var),
            Cpd::Nonlinear(n) => Some(n.noise_cov[(k, k)]),
            Cpd::FixedPoint(fp) => Some(fp.noise_cov[(k, k)]),
            Cpd::Bias(b) => Some(b.drift_var),
        }
    }

    /// Node indices in topological order of slice t+1, ties broken by
    /// declaration order.
    pub fn topological_order(&self) -> Result<Vec<usize>> {
        let n = self.nodes.len();
        let mut preds: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        for (b, node) in self.nodes.iter().enumerate() {
            for input in node.inputs() {
                if let Input::Curr(name) = &input {
                    if let Some(a) = self.node_of(name) {
                        preds[b].insert(a);
                    }
                }
            }
        }
        let mut done = vec![false; n];
        let mut order = Vec::with_capacity(n);
        while order.len() < n {
            let next = (0..n).find(|&i| !done[i] && preds[i].iter().all(|&p| done[p]));
            match next {
                Some(i) => {
                    done[i] = true;
                    order.push(i);
                }
                None => return Err(Error::Cycle(self.find_cycle(&preds, &done))),
            }
        }
        Ok(order)
    }

    fn find_cycle(&self, preds: &[BTreeSet<usize>], done: &[bool]) -> Vec<String> {
        let start = (0..preds.len()).find(|&i| !done[i]).unwrap_or(0);
        let mut path = vec![start];
        let mut cur = start;
        while let Some(&p) = preds[cur].iter().find(|&&p| !done[p]) {
            if let Some(pos) = path.iter().position(|&x| x == p) {
                let mut cycle: Vec<usize> = path[pos..].to_vec();
                cycle.reverse();
                cycle.push(cycle[0]);
                return cycle.iter().map(|&i| self.nodes[i].children.join(",")).collect();
            }
            path.push(p);
            cur = p;
        }
        vec![self.nodes[start].children.join(",")]
    }

    /// Slice-(t+1) variables in topological order.
    pub fn variable_order(&self) -> Result<Vec<String>> {
        Ok(self
            .topological_order()?
            .into_iter()
            .flat_map(|i| self.nodes[i].children.clone())
            .collect())
    }

    /// All invariant violations; empty iff the model is well formed.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let mut seen = BTreeSet::new();
        for v in &self.variables {
            if !seen.insert(v.name.as_str()) {
                diags.push(Diagnostic::new(
                    format!("variable '{}' declared twice", v.name),
                    &[&v.name],
                ));
            }
        }

        let mut produced: BTreeMap<&str, usize> = BTreeMap::new();
        let mut temps: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.children.is_empty() {
                diags.push(Diagnostic::new(format!("CPD #{i} has no children"), &[]));
            }
            for c in &node.children {
                if produced.insert(c.as_str(), i).is_some() {
                    diags.push(Diagnostic::new(format!("'{c}' has more than one CPD"), &[c]));
                }
                match self.role(c) {
                    None => diags.push(Diagnostic::new(
                        format!("CPD child '{c}' is not a declared variable"),
                        &[c],
                    )),
                    Some(Role::Encapsulated) => diags.push(Diagnostic::new(
                        format!("encapsulated variable '{c}' cannot be a CPD child"),
                        &[c],
                    )),
                    _ => {}
                }
            }
            if let Cpd::Nonlinear(NonlinearCpd {
                body: NonlinearBody::Staged(stages),
                ..
            }) = &node.cpd
            {
                for s in &stages[..stages.len().saturating_sub(1)] {
                    temps.insert(s.output.as_str(), i);
                }
            }
        }

        for v in &self.variables {
            let needs_cpd = v.role != Role::Encapsulated && !temps.contains_key(v.name.as_str());
            if needs_cpd && !produced.contains_key(v.name.as_str()) {
                diags.push(Diagnostic::new(format!("variable '{}' has no CPD", v.name), &[&v.name]));
            }
        }

        for (i, node) in self.nodes.iter().enumerate() {
            let owner = node.children.first().map(String::as_str).unwrap_or("?");
            self.validate_node(i, node, owner, &temps, &mut diags);
        }

        if diags.is_empty() {
            if let Err(Error::Cycle(cycle)) = self.topological_order() {
                diags.push(Diagnostic::new(
                    format!("cycle among slice-(t+1) variables: {}", cycle.join(" -> ")),
                    &cycle.iter().map(String::as_str).collect::<Vec<_>>(),
                ));
            }
        }
        diags
    }

    fn validate_node(
        &self,
        index: usize,
        node: &Node,
        owner: &str,
        temps: &BTreeMap<&str, usize>,
        diags: &mut Vec<Diagnostic>,
    ) {
        let check_input = |input: &Input, locals: &[&str], diags: &mut Vec<Diagnostic>| {
            let name = input.name();
            match input {
                Input::Local(_) => {
                    if !locals.contains(&name) {
                        diags.push(Diagnostic::new(
                            format!("CPD of '{owner}' reads local '{name}' before any stage produces it"),
                            &[owner, name],
                        ));
                    }
                }
                Input::Prev(_) | Input::Curr(_) => match self.role(name) {
                    None if temps.contains_key(name) => diags.push(Diagnostic::new(
                        format!("CPD of '{owner}' references encapsulated variable '{name}' outside its CPD"),
                        &[owner, name],
                    )),
                    None => diags.push(Diagnostic::new(
                        format!("CPD of '{owner}' references unknown parent '{name}'"),
                        &[owner, name],
                    )),
                    Some(Role::Encapsulated) => diags.push(Diagnostic::new(
                        format!("CPD of '{owner}' references encapsulated variable '{name}' outside its CPD"),
                        &[owner, name],
                    )),
                    Some(role) => {
                        if matches!(input, Input::Prev(_)) && !role.is_persistent() {
                            diags.push(Diagnostic::new(
                                format!("CPD of '{owner}' reads slice-t value of non-persistent '{name}'"),
                                &[owner, name],
                            ));
                        }
                    }
                },
            }
        };

        let check_noise = |q: &DMatrix<f64>, k: usize, diags: &mut Vec<Diagnostic>| {
            if q.nrows() != k || q.ncols() != k {
                diags.push(Diagnostic::new(
                    format!(
                        "noise covariance of '{owner}' is {}x{}, expected {k}x{k}",
                        q.nrows(),
                        q.ncols()
                    ),
                    &[owner],
                ));
            } else if q.iter().any(|v| !v.is_finite())
                || (q - q.transpose()).amax() > 1e-12 * q.amax().max(1e-300)
                || (k > 0 && SymmetricEigen::new(q.clone()).eigenvalues.min() < -1e-12 * q.trace().abs())
            {
                diags.push(Diagnostic::new(
                    format!("noise covariance of '{owner}' is not PSD"),
                    &[owner],
                ));
            }
        };

        let k = node.children.len();
        match &node.cpd {
            Cpd::Linear(l) => {
                l.inputs.iter().for_each(|i| check_input(i, &[], diags));
                for p in l.params.all() {
                    if p.weights.len() != l.inputs.len() {
                        diags.push(Diagnostic::new(
                            format!(
                                "linear CPD of '{owner}' has {} weights for {} inputs",
                                p.weights.len(),
                                l.inputs.len()
                            ),
                            &[owner],
                        ));
                    }
                    if !(p.noise_var >= 0.0) {
                        diags.push(Diagnostic::new(
                            format!("linear CPD of '{owner}' has negative noise variance"),
                            &[owner],
                        ));
                    }
                }
                self.check_signal(l.params.signal.as_deref(), owner, diags);
                if k != 1 {
                    diags.push(Diagnostic::new(
                        format!("linear CPD #{index} must have one child"),
                        &[owner],
                    ));
                }
            }
            Cpd::Bias(b) => {
                if !(b.gamma > 0.0 && b.gamma <= 1.0) {
                    diags.push(Diagnostic::new(
                        format!("bias '{owner}' has gamma {} outside (0, 1]", b.gamma),
                        &[owner],
                    ));
                }
                if !(b.drift_var >= 0.0) {
                    diags.push(Diagnostic::new(
                        format!("bias '{owner}' has negative drift variance"),
                        &[owner],
                    ));
                }
                if k != 1 || self.role(owner) != Some(Role::Bias) {
                    diags.push(Diagnostic::new(
                        format!("bias CPD must have exactly one child with role Bias ('{owner}')"),
                        &[owner],
                    ));
                }
            }
            Cpd::Nonlinear(n) => {
                match &n.body {
                    NonlinearBody::Direct { inputs, .. } => {
                        inputs.iter().for_each(|i| check_input(i, &[], diags));
                    }
                    NonlinearBody::Staged(stages) => {
                        if stages.is_empty() {
                            diags.push(Diagnostic::new(
                                format!("staged CPD of '{owner}' has no stages"),
                                &[owner],
                            ));
                        }
                        if n.input_noise > 0 {
                            diags.push(Diagnostic::new(
                                format!("staged CPD of '{owner}' cannot take input noise"),
                                &[owner],
                            ));
                        }
                        let mut locals: Vec<&str> = Vec::new();
                        for (si, s) in stages.iter().enumerate() {
                            s.inputs.iter().for_each(|i| check_input(i, &locals, diags));
                            let last = si + 1 == stages.len();
                            if last {
                                if k != 1 || s.output != node.children[0] {
                                    diags.push(Diagnostic::new(
                                        format!("last stage of '{owner}' must produce the CPD's single child"),
                                        &[owner],
                                    ));
                                }
                            } else {
                                match self.role(&s.output) {
                                    Some(Role::Encapsulated) => {}
                                    Some(role) if role.is_persistent() => diags.push(Diagnostic::new(
                                        format!("encapsulated variable '{}' listed as persistent", s.output),
                                        &[&s.output],
                                    )),
                                    Some(_) => diags.push(Diagnostic::new(
                                        format!("stage output '{}' must have role Encapsulated", s.output),
                                        &[&s.output],
                                    )),
                                    None => diags.push(Diagnostic::new(
                                        format!("stage output '{}' is not a declared variable", s.output),
                                        &[&s.output],
                                    )),
                                }
                                if locals.contains(&s.output.as_str()) {
                                    diags.push(Diagnostic::new(
                                        format!("stage output '{}' produced twice", s.output),
                                        &[&s.output],
                                    ));
                                }
                                locals.push(&s.output);
                            }
                        }
                    }
                }
                check_noise(&n.noise_cov, k, diags);
            }
            Cpd::FixedPoint(fp) => {
                fp.inputs.iter().for_each(|i| check_input(i, &[], diags));
                if fp.nominal.len() != k {
                    diags.push(Diagnostic::new(
                        format!(
                            "fixed-point CPD of '{owner}' has {} nominal values for {k} outputs",
                            fp.nominal.len()
                        ),
                        &[owner],
                    ));
                }
                if !(fp.tolerance > 0.0) || fp.max_iter == 0 {
                    diags.push(Diagnostic::new(
                        format!("fixed-point CPD of '{owner}' has invalid stopping rule"),
                        &[owner],
                    ));
                }
                check_noise(&fp.noise_cov, k, diags);
            }
        }
    }

    fn check_signal(&self, signal: Option<&str>, owner: &str, diags: &mut Vec<Diagnostic>) {
        if let Some(s) = signal {
            if !self.mode_signals.iter().any(|m| m == s) {
                diags.push(Diagnostic::new(
                    format!("CPD of '{owner}' switches on undeclared mode signal '{s}'"),
                    &[owner],
                ));
            }
        }
    }

    pub fn compile(&self) -> Result<CompiledTbn> {
        CompiledTbn::new(self)
    }
}

/// Programmatic model construction.
#[derive(Default)]
pub struct TbnBuilder {
    tbn: Tbn,
}

impl TbnBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn variable(mut self, name: &str, role: Role, units: &str) -> Self {
        self.tbn.variables.push(Variable {
            name: name.to_string(),
            role,
            units: units.to_string(),
        });
        self
    }

    pub fn state(self, name: &str, units: &str) -> Self {
        self.variable(name, Role::State, units)
    }

    pub fn bias_var(self, name: &str, units: &str) -> Self {
        self.variable(name, Role::Bias, units)
    }

    pub fn sensor(self, name: &str, units: &str) -> Self {
        self.variable(name, Role::Sensor, units)
    }

    pub fn transient(self, name: &str, units: &str) -> Self {
        self.variable(name, Role::Transient, units)
    }

    pub fn encapsulated(self, name: &str, units: &str) -> Self {
        self.variable(name, Role::Encapsulated, units)
    }

    pub fn mode_signal(mut self, name: &str) -> Self {
        self.tbn.mode_signals.push(name.to_string());
        self
    }

    pub fn cpd(mut self, children: &[&str], cpd: Cpd) -> Self {
        self.tbn.nodes.push(Node {
            children: children.iter().map(|s| s.to_string()).collect(),
            cpd,
        });
        self
    }

    pub fn build(self) -> Result<Tbn> {
        let diags = self.tbn.validate();
        if diags.is_empty() {
            Ok(self.tbn)
        } else {
            Err(Error::InvalidModel(diags))
        }
    }

    /// The model as declared, without validation.
    pub fn build_unchecked(self) -> Tbn {
        self.tbn
    }
}

// ---------------------------------------------------------------------------
// Compiled form: slot-indexed evaluation for sampling and baselines.

#[derive(Clone)]
enum Kernel {
    Linear(Switched<LinearParams>),
    Bias {
        gamma: f64,
        drift_sd: f64,
    },
    Direct {
        func: NodeFn,
        input_noise: usize,
    },
    Staged {
        stages: Vec<CompiledStage>,
    },
    FixedPoint {
        cpd: FixedPointCpd,
        guess_slots: Option<Vec<usize>>,
    },
}

#[derive(Clone)]
struct CompiledStage {
    inputs: Vec<usize>,
    output: usize,
    func: NodeFn,
}

/// One CPD with slot indices resolved.
#[derive(Clone)]
pub struct CompiledNode {
    /// Index into `Tbn::nodes`.
    pub node: usize,
    pub inputs: Vec<usize>,
    pub children: Vec<usize>,
    kernel: Kernel,
    /// Square root of the additive noise covariance on the children.
    noise_sqrt: DMatrix<f64>,
    /// This node's segment of the transition noise vector: input noise first,
    /// then additive noise (absent when the covariance is zero).
    pub noise_offset: usize,
    pub noise_len: usize,
}

impl CompiledNode {
    pub fn noise_sqrt(&self) -> &DMatrix<f64> {
        &self.noise_sqrt
    }

    pub fn input_noise(&self) -> usize {
        match &self.kernel {
            Kernel::Direct { input_noise, .. } => *input_noise,
            _ => 0,
        }
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.kernel, Kernel::Linear(_) | Kernel::Bias { .. })
    }
}

/// Slot layout: `[persistent (slice t) | slice t+1 in topological order | temps]`.
#[derive(Clone)]
pub struct CompiledTbn {
    pub persistent: Vec<String>,
    pub next: Vec<String>,
    pub nodes: Vec<CompiledNode>,
    slot_count: usize,
    /// Slot of the slice-(t+1) copy of each persistent variable.
    pub persistent_next: Vec<usize>,
    /// Length of the standard-normal noise vector taken by [`CompiledTbn::transition`].
    pub noise_dims: usize,
}

impl CompiledTbn {
    fn new(m: &Tbn) -> Result<Self> {
        let diags = m.validate();
        if !diags.is_empty() {
            return Err(Error::InvalidModel(diags));
        }
        let persistent = m.persistent();
        let order = m.topological_order()?;
        let next: Vec<String> = order.iter().flat_map(|&i| m.nodes[i].children.clone()).collect();
        let np = persistent.len();
        let mut slot_count = np + next.len();
        let prev_slot = |name: &str| persistent.iter().position(|p| p == name).unwrap();
        let next_slot = |name: &str| np + next.iter().position(|p| p == name).unwrap();

        let mut nodes = Vec::with_capacity(order.len());
        let mut noise_dims = 0;
        for &ni in &order {
            let node = &m.nodes[ni];
            let resolve = |i: &Input| match i {
                Input::Prev(n) => prev_slot(n),
                Input::Curr(n) => next_slot(n),
                Input::Local(_) => unreachable!("local inputs are resolved per stage"),
            };
            let children: Vec<usize> = node.children.iter().map(|c| next_slot(c)).collect();
            let (inputs, kernel, noise) = match &node.cpd {
                Cpd::Linear(l) => (
                    l.inputs.iter().map(resolve).collect(),
                    Kernel::Linear(l.params.clone()),
                    DMatrix::zeros(1, 1),
                ),
                Cpd::Bias(b) => (
                    vec![prev_slot(&node.children[0])],
                    Kernel::Bias {
                        gamma: b.gamma,
                        drift_sd: b.drift_var.sqrt(),
                    },
                    DMatrix::from_element(1, 1, b.drift_var),
                ),
                Cpd::Nonlinear(n) => match &n.body {
                    NonlinearBody::Direct { inputs, func } => (
                        inputs.iter().map(resolve).collect(),
                        Kernel::Direct {
                            func: func.clone(),
                            input_noise: n.input_noise,
                        },
                        n.noise_cov.clone(),
                    ),
                    NonlinearBody::Staged(stages) => {
                        let mut locals: Vec<(String, usize)> = Vec::new();
                        let mut cstages = Vec::with_capacity(stages.len());
                        for (si, s) in stages.iter().enumerate() {
                            let ins = s
                                .inputs
                                .iter()
                                .map(|i| match i {
                                    Input::Local(n) => locals.iter().find(|(l, _)| l == n).unwrap().1,
                                    other => resolve(other),
                                })
                                .collect();
                            let output = if si + 1 == stages.len() {
                                children[0]
                            } else {
                                slot_count += 1;
                                locals.push((s.output.clone(), slot_count - 1));
                                slot_count - 1
                            };
                            cstages.push(CompiledStage {
                                inputs: ins,
                                output,
                                func: s.func.clone(),
                            });
                        }
                        (
                            node.inputs().iter().map(resolve).collect(),
                            Kernel::Staged { stages: cstages },
                            n.noise_cov.clone(),
                        )
                    }
                },
                Cpd::FixedPoint(fp) => {
                    let guess_slots = if fp.warm_start && node.children.iter().all(|c| persistent.contains(c)) {
                        Some(node.children.iter().map(|c| prev_slot(c)).collect())
                    } else {
                        None
                    };
                    (
                        fp.inputs.iter().map(resolve).collect(),
                        Kernel::FixedPoint {
                            cpd: fp.clone(),
                            guess_slots,
                        },
                        fp.noise_cov.clone(),
                    )
                }
            };
            nodes.push(CompiledNode {
                node: ni,
                inputs,
                children,
                kernel,
                noise_offset: noise_dims,
                noise_len: 0,
                noise_sqrt: psd_sqrt(&noise),
            });
            let last = nodes.last_mut().unwrap();
            let linear_noise = match &last.kernel {
                Kernel::Linear(params) => params.all().any(|p| p.noise_var > 0.0),
                _ => false,
            };
            let additive = if linear_noise || last.noise_sqrt.iter().any(|v| *v != 0.0) {
                last.children.len()
            } else {
                0
            };
            last.noise_len = last.input_noise() + additive;
            noise_dims += last.noise_len;
        }
        let persistent_next = persistent.iter().map(|p| next_slot(p)).collect();
        Ok(Self {
            persistent,
            next,
            nodes,
            slot_count,
            persistent_next,
            noise_dims,
        })
    }

    pub fn slot_count(&self) -> usize {
        self.slot_count
    }

    pub fn next_slot(&self, name: &str) -> Option<usize> {
        self.next
            .iter()
            .position(|n| n == name)
            .map(|i| i + self.persistent.len())
    }

    /// Writes the noise-free outputs of `node` into `slots`.
    ///
    /// `extra` supplies input-noise arguments for direct nonlinear CPDs (zeros
    /// when `None`).
    pub fn eval_node(
        &self,
        node: &CompiledNode,
        slots: &mut [f64],
        modes: &Modes,
        extra: Option<&[f64]>,
    ) -> Result<()> {
        let mut args: Vec<f64> = node.inputs.iter().map(|&s| slots[s]).collect();
        match &node.kernel {
            Kernel::Linear(params) => {
                let p = params.resolve(modes);
                slots[node.children[0]] = p.intercept + p.weights.iter().zip(&args).map(|(w, x)| w * x).sum::<f64>();
            }
            Kernel::Bias { gamma, .. } => slots[node.children[0]] = gamma * args[0],
            Kernel::Direct { func, input_noise } => {
                match extra {
                    Some(e) => args.extend_from_slice(e),
                    None => args.extend(std::iter::repeat_n(0.0, *input_noise)),
                }
                let mut out = vec![0.0; node.children.len()];
                func(&args, modes, &mut out);
                for (c, v) in node.children.iter().zip(out) {
                    slots[*c] = v;
                }
            }
            Kernel::Staged { stages } => {
                let mut out = [0.0];
                for s in stages {
                    let a: Vec<f64> = s.inputs.iter().map(|&i| slots[i]).collect();
                    (s.func)(&a, modes, &mut out);
                    slots[s.output] = out[0];
                }
            }
            Kernel::FixedPoint { cpd, guess_slots } => {
                let mut z: Vec<f64> = match guess_slots {
                    Some(g) => g.iter().map(|&s| slots[s]).collect(),
                    None => cpd.nominal.clone(),
                };
                cpd.solve(&args, modes, &mut z)?;
                for (c, v) in node.children.iter().zip(z) {
                    slots[*c] = v;
                }
            }
        }
        Ok(())
    }

    /// Deterministic transition given slice t in `slots[..persistent.len()]`
    /// and standard-normal noise `w` (length `noise_dims`).
    pub fn transition(&self, slots: &mut [f64], modes: &Modes, w: &[f64]) -> Result<()> {
        for node in &self.nodes {
            let w = &w[node.noise_offset..node.noise_offset + node.noise_len];
            let n_in = node.input_noise();
            let extra = (n_in > 0).then(|| &w[..n_in]);
            self.eval_node(node, slots, modes, extra)
                .map_err(|e| e.at_node(self.next[node.children[0] - self.persistent.len()].clone()))?;
            let w = &w[n_in..];
            if let Kernel::Linear(params) = &node.kernel {
                if !w.is_empty() {
                    slots[node.children[0]] += params.resolve(modes).noise_var.sqrt() * w[0];
                }
            } else if !w.is_empty() {
                for (r, &c) in node.children.iter().enumerate() {
                    slots[c] += (0..w.len()).map(|j| node.noise_sqrt[(r, j)] * w[j]).sum::<f64>();
                }
            }
        }
        Ok(())
    }

    /// Samples `node`'s children given the inputs already present in `slots`.
    pub fn sample_node<R: Rng + ?Sized>(
        &self,
        node: &CompiledNode,
        slots: &mut [f64],
        modes: &Modes,
        rng: &mut R,
    ) -> Result<()> {
        match &node.kernel {
            Kernel::Linear(params) => {
                self.eval_node(node, slots, modes, None)?;
                let sd = params.resolve(modes).noise_var.sqrt();
                if sd > 0.0 {
                    slots[node.children[0]] += sd * rng.sample::<f64, _>(StandardNormal);
                }
                return Ok(());
            }
            Kernel::Bias { drift_sd, .. } => {
                self.eval_node(node, slots, modes, None)?;
                if *drift_sd > 0.0 {
                    slots[node.children[0]] += drift_sd * rng.sample::<f64, _>(StandardNormal);
                }
                return Ok(());
            }
            Kernel::Direct { input_noise, .. } if *input_noise > 0 => {
                let e: Vec<f64> = (0..*input_noise).map(|_| rng.sample(StandardNormal)).collect();
                self.eval_node(node, slots, modes, Some(&e))?;
            }
            _ => self.eval_node(node, slots, modes, None)?,
        }
        let k = node.children.len();
        if node.noise_sqrt.iter().any(|v| *v != 0.0) {
            let z: Vec<f64> = (0..k).map(|_| rng.sample(StandardNormal)).collect();
            for (r, &c) in node.children.iter().enumerate() {
                slots[c] += (0..k).map(|j| node.noise_sqrt[(r, j)] * z[j]).sum::<f64>();
            }
        }
        Ok(())
    }

    /// Samples slice t+1 given slice t in `slots[..persistent.len()]`.
    /// Nodes for which `skip` returns true are left untouched.
    pub fn sample_transition<R: Rng + ?Sized>(
        &self,
        slots: &mut [f64],
        modes: &Modes,
        rng: &mut R,
        skip: impl Fn(&CompiledNode) -> bool,
    ) -> Result<()> {
        for node in &self.nodes {
            if skip(node) {
                continue;
            }
            let tbn_child = node.children[0];
            self.sample_node(node, slots, modes, rng)
                .map_err(|e| e.at_node(self.next[tbn_child - self.persistent.len()].clone()))?;
        }
        Ok(())
    }
}

/// Symmetric PSD square root via eigendecomposition (negative eigenvalues
/// clipped to zero).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.iter().all(|v| *v == 0.0) {
        return DMatrix::zeros(m.nrows(), m.ncols());
    }
    if m.nrows() == 1 {
        return DMatrix::from_element(1, 1, m[(0, 0)].max(0.0).sqrt());
    }
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Ground-truth trajectory from [`forward_sample`].
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub persistent: Vec<String>,
    /// Slice-(t+1) variables (persistent, sensors, transients), topological order.
    pub next: Vec<String>,
    /// Persistent values at step 0.
    pub initial: Vec<f64>,
    /// `steps[k]` holds the values of `next` at step `k + 1`.
    pub steps: Vec<Vec<f64>>,
    pub modes: Vec<Modes>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Value of `name` at step `step` (1-based for slice-(t+1) variables;
    /// step 0 reads the initial persistent state).
    pub fn value(&self, step: usize, name: &str) -> Option<f64> {
        if step == 0 {
            return self.persistent.iter().position(|p| p == name).map(|i| self.initial[i]);
        }
        let i = self.next.iter().position(|p| p == name)?;
        self.steps.get(step - 1).map(|s| s[i])
    }

    /// Persistent state at `step`.
    pub fn state(&self, step: usize) -> Vec<f64> {
        self.persistent.iter().map(|p| self.value(step, p).unwrap()).collect()
    }

    /// Readings of `sensors` at `step` (1-based).
    pub fn evidence(&self, step: usize, sensors: &[String]) -> Vec<(String, f64)> {
        sensors
            .iter()
            .filter_map(|s| self.value(step, s).map(|v| (s.clone(), v)))
            .collect()
    }
}

/// Draws `x ~ g` with the given generator.
pub fn sample_gaussian<R: Rng + ?Sized>(g: &Gaussian, rng: &mut R) -> DVector<f64> {
    let l = psd_sqrt(g.cov());
    let z = DVector::from_iterator(g.dim(), (0..g.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)));
    g.mean() + l * z
}

/// Exact ancestral sampling through the 2TBN.
///
/// `modes[k]` applies to the transition into step `k + 1`; missing entries
/// read as all-zero modes.
pub fn forward_sample(m: &Tbn, initial: &Gaussian, modes: &[Modes], steps: usize, seed: u64) -> Result<Trajectory> {
    let c = m.compile()?;
    let init = initial.select(&c.persistent)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = sample_gaussian(&init, &mut rng);
    let np = c.persistent.len();
    let mut slots = vec![0.0; c.slot_count()];
    slots[..np].copy_from_slice(x0.as_slice());
    let default_modes = Modes::new();
    let mut out = Vec::with_capacity(steps);
    let mut used_modes = Vec::with_capacity(steps);
    for k in 0..steps {
        let md = modes.get(k).unwrap_or(&default_modes);
        c.sample_transition(&mut slots, md, &mut rng, |_| false)
            .map_err(|e| e.at_step(k + 1))?;
        out.push(slots[np..np + c.next.len()].to_vec());
        for (i, &s) in c.persistent_next.iter().enumerate() {
            slots[i] = slots[s];
        }
        used_modes.push(md.clone());
    }
    Ok(Trajectory {
        persistent: c.persistent.clone(),
        next: c.next.clone(),
        initial: x0.as_slice().to_vec(),
        steps: out,
        modes: used_modes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_declared_backwards() -> Tbn {
        TbnBuilder::new()
            .transient("C", "")
            .transient("B", "")
            .state("A", "")
            .cpd(&["C"], Cpd::linear(&[(curr("B"), 1.0)], 0.0, 1.0))
            .cpd(&["B"], Cpd::linear(&[(curr("A"), 1.0)], 0.0, 1.0))
            .cpd(&["A"], Cpd::linear(&[(prev("A"), 0.5)], 0.0, 1.0))
            .build()
            .unwrap()
    }

    #[test]
    fn topological_order_respects_edges() {
        let m = chain_declared_backwards();
        assert_eq!(m.variable_order().unwrap(), vec!["A", "B", "C"]);
    }

    #[test]
    fn no_intra_slice_edges_keeps_declaration_order() {
        let m = TbnBuilder::new()
            .state("Y", "")
            .state("X", "")
            .cpd(&["Y"], Cpd::linear(&[(prev("X"), 1.0)], 0.0, 1.0))
            .cpd(&["X"], Cpd::linear(&[(prev("Y"), 1.0)], 0.0, 1.0))
            .build()
            .unwrap();
        assert_eq!(m.variable_order().unwrap(), vec!["Y", "X"]);
    }

    #[test]
    fn cycle_is_reported() {
        let m = TbnBuilder::new()
            .transient("A", "")
            .transient("B", "")
            .cpd(&["A"], Cpd::linear(&[(curr("B"), 1.0)], 0.0, 1.0))
            .cpd(&["B"], Cpd::linear(&[(curr("A"), 1.0)], 0.0, 1.0))
            .build_unchecked();
        match m.topological_order() {
            Err(Error::Cycle(c)) => {
                assert!(c.len() >= 3);
                assert_eq!(c.first(), c.last());
            }
            other => panic!("expected cycle, got {other:?}"),
        }
        assert_eq!(m.validate().len(), 1);
    }

    #[test]
    fn unknown_parent_is_one_diagnostic() {
        let m = TbnBuilder::new()
            .state("A", "")
            .cpd(&["A"], Cpd::linear(&[(prev("A"), 1.0), (curr("Z"), 1.0)], 0.0, 1.0))
            .build_unchecked();
        let d = m.validate();
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("unknown parent 'Z'"));
    }

    #[test]
    fn persistent_temp_is_one_diagnostic() {
        let f: NodeFn = Arc::new(|x: &[f64], _: &Modes, o: &mut [f64]| o[0] = x[0]);
        let m = TbnBuilder::new()
            .state("A", "")
            .state("T", "")
            .sensor("S", "")
            .cpd(&["A"], Cpd::linear(&[(prev("A"), 1.0)], 0.0, 1.0))
            .cpd(
                &["S"],
                Cpd::staged(
                    vec![
                        Stage {
                            output: "T".into(),
                            inputs: vec![curr("A")],
                            func: f.clone(),
                        },
                        Stage {
                            output: "S".into(),
                            inputs: vec![local("T")],
                            func: f,
                        },
                    ],
                    1.0,
                ),
            )
            .build_unchecked();
        let d = m.validate();
        assert_eq!(d.len(), 1, "{d:?}");
        assert!(d[0].message.contains("listed as persistent"));
    }

    #[test]
    fn modes_switch_linear_parameters() {
        let p0 = LinearParams {
            weights: vec![1.0],
            intercept: 0.0,
            noise_var: 0.0,
        };
        let p1 = LinearParams {
            intercept: -5.0,
            ..p0.clone()
        };
        let s = Switched::by_mode("dump", p0.clone(), vec![(1, p1.clone())]);
        assert_eq!(s.resolve(&Modes::new()), &p0);
        assert_eq!(s.resolve(&Modes::new().with("dump", 1)), &p1);
    }

    #[test]
    fn noiseless_linear_model_follows_recurrence() {
        let m = TbnBuilder::new()
            .state("x", "")
            .state("v", "")
            .sensor("y", "")
            .cpd(&["x"], Cpd::linear(&[(prev("x"), 1.0), (prev("v"), 0.1)], 0.0, 0.0))
            .cpd(&["v"], Cpd::linear(&[(prev("v"), 0.9)], 0.2, 0.0))
            .cpd(&["y"], Cpd::linear(&[(curr("x"), 2.0)], 1.0, 0.0))
            .build()
            .unwrap();
        let init = Gaussian::from_diagonal(&["x", "v"], &[1.0, 2.0], &[0.0, 0.0]).unwrap();
        let t = forward_sample(&m, &init, &[], 20, 7).unwrap();
        let (mut x, mut v) = (1.0, 2.0);
        for k in 1..=20 {
            let nx = x + 0.1 * v;
            let nv = 0.9 * v + 0.2;
            x = nx;
            v = nv;
            assert!((t.value(k, "x").unwrap() - x).abs() < 1e-12);
            assert!((t.value(k, "v").unwrap() - v).abs() < 1e-12);
            assert!((t.value(k, "y").unwrap() - (2.0 * x + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_trajectory() {
        let m = chain_declared_backwards();
        let init = Gaussian::standard(&["A"]);
        let a = forward_sample(&m, &init, &[], 50, 3).unwrap();
        let b = forward_sample(&m, &init, &[], 50, 3).unwrap();
        assert_eq!(a.steps, b.steps);
        let c = forward_sample(&m, &init, &[], 50, 4).unwrap();
        assert_ne!(a.steps, c.steps);
    }

    #[test]
    fn constant_bias_persists_exactly() {
        let m = TbnBuilder::new()
            .bias_var("b", "")
            .cpd(&["b"], Cpd::bias(1.0, 0.0))
            .build()
            .unwrap();
        let init = Gaussian::from_diagonal(&["b"], &[0.0], &[4.0]).unwrap();
        let t = forward_sample(&m, &init, &[], 100, 11).unwrap();
        let b0 = t.initial[0];
        assert!(t.steps.iter().all(|s| s[0] == b0));
    }

    #[test]
    fn fixed_point_divergence_reports_step() {
        let upd: UpdateFn = Arc::new(|z: &[f64], _: &[f64], _: &Modes, o: &mut [f64]| o[0] = 2.0 * z[0] + 1.0);
        let m = TbnBuilder::new()
            .state("z", "")
            .cpd(
                &["z"],
                Cpd::FixedPoint(FixedPointCpd {
                    inputs: vec![prev("z")],
                    update: upd,
                    nominal: vec![0.0],
                    warm_start: true,
                    tolerance: FIXED_POINT_TOL,
                    max_iter: 50,
                    noise_cov: DMatrix::zeros(1, 1),
                    precision: None,
                }),
            )
            .build()
            .unwrap();
        let init = Gaussian::from_diagonal(&["z"], &[0.0], &[0.0]).unwrap();
        let err = forward_sample(&m, &init, &[], 3, 1).unwrap_err();
        assert_eq!(err.step(), Some(1));
    }
}
