//! Structured Gaussian filter.
//!
//! Each step builds the joint over both slices by folding the CPDs in
//! topological order into the belief: linear CPDs exactly, nonlinear ones by
//! cubature over their own parents only, repairing the extension whenever the
//! estimated moments imply an indefinite joint. Slice t, transients and
//! encapsulated temporaries are then marginalized out and the evidence is
//! conditioned on.

use std::collections::HashMap;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gaussian::{min_eigenvalue, submatrix, Gaussian};
use crate::model::{next_label, Cpd, Input, Modes, Node, NonlinearBody, Role, Tbn};
use crate::psd_repair::{repair, schur_complement, RepairProblem};
use crate::quadrature::{build, default_kappa, estimate_local_moments, CubatureRule, Precision};

/// Schur complements below `-REPAIR_TRIGGER · scale` count as indefinite.
pub const REPAIR_TRIGGER: f64 = 1e-10;
/// Posterior covariances with an eigenvalue below `-CLIP_SCALE · trace` are
/// clipped to `CLIP_SCALE · trace`.
pub const CLIP_SCALE: f64 = 1e-10;

/// Cubature rules keyed by (precision, dimension), built on first use.
#[derive(Clone, Debug)]
pub struct RuleCache {
    pub precision: Precision,
    /// `None` uses [`default_kappa`] for each dimension.
    pub kappa: Option<f64>,
    rules: HashMap<(Precision, usize), CubatureRule>,
}

impl RuleCache {
    pub fn new(precision: Precision, kappa: Option<f64>) -> Self {
        Self {
            precision,
            kappa,
            rules: HashMap::new(),
        }
    }

    pub fn get(&mut self, precision: Option<Precision>, dim: usize) -> Result<&CubatureRule> {
        let p = precision.unwrap_or(self.precision);
        if !self.rules.contains_key(&(p, dim)) {
            let kappa = self.kappa.unwrap_or_else(|| default_kappa(dim));
            self.rules.insert((p, dim), build(p, dim, kappa)?);
        }
        Ok(&self.rules[&(p, dim)])
    }
}

/// Result of folding one CPD into the joint.
#[derive(Clone, Debug)]
pub struct Propagation {
    pub joint: Gaussian,
    pub evaluations: usize,
    pub repairs: usize,
}

/// Folds `node` into `joint`.
///
/// `guess` seeds fixed-point CPDs (one value per output); `None` uses the
/// CPD's nominal point.
pub fn propagate_node(
    joint: &Gaussian,
    node: &Node,
    modes: &Modes,
    rules: &mut RuleCache,
    guess: Option<&[f64]>,
) -> Result<Propagation> {
    let children: Vec<String> = node.children.iter().map(|c| next_label(c)).collect();
    let owner = node.children.join(",");
    let result = match &node.cpd {
        Cpd::Linear(l) => {
            let p = l.params.resolve(modes);
            let weights: Vec<(String, f64)> = l
                .inputs
                .iter()
                .map(Input::label)
                .zip(p.weights.iter().copied())
                .collect();
            joint
                .extend_linear(&children[0], &weights, p.intercept, p.noise_var)
                .map(|joint| Propagation {
                    joint,
                    evaluations: 0,
                    repairs: 0,
                })
        }
        Cpd::Bias(b) => joint
            .extend_linear(&children[0], &[(node.children[0].as_str(), b.gamma)], 0.0, b.drift_var)
            .map(|joint| Propagation {
                joint,
                evaluations: 0,
                repairs: 0,
            }),
        Cpd::Nonlinear(n) => match &n.body {
            NonlinearBody::Direct { inputs, func } => {
                let labels: Vec<String> = inputs.iter().map(Input::label).collect();
                let noise_labels: Vec<String> = (0..n.input_noise)
                    .map(|i| format!("{}::noise{i}", node.children[0]))
                    .collect();
                extend_nonlinear(
                    joint,
                    &labels,
                    &noise_labels,
                    &children,
                    |x, out| {
                        func(x, modes, out);
                        Ok(())
                    },
                    &n.noise_cov,
                    n.precision,
                    rules,
                )
            }
            NonlinearBody::Staged(stages) => {
                let child = &node.children[0];
                let temp_label = |t: &str| format!("{child}::{t}");
                let mut acc = Propagation {
                    joint: joint.clone(),
                    evaluations: 0,
                    repairs: 0,
                };
                let mut temps = Vec::new();
                for (si, s) in stages.iter().enumerate() {
                    let last = si + 1 == stages.len();
                    let labels: Vec<String> = s
                        .inputs
                        .iter()
                        .map(|i| match i {
                            Input::Local(t) => temp_label(t),
                            other => other.label(),
                        })
                        .collect();
                    let (out_label, noise) = if last {
                        (children[0].clone(), n.noise_cov.clone())
                    } else {
                        (temp_label(&s.output), DMatrix::zeros(1, 1))
                    };
                    let step = extend_nonlinear(
                        &acc.joint,
                        &labels,
                        &[],
                        std::slice::from_ref(&out_label),
                        |x, out| {
                            (s.func)(x, modes, out);
                            Ok(())
                        },
                        &noise,
                        n.precision,
                        rules,
                    )?;
                    acc = Propagation {
                        joint: step.joint,
                        evaluations: acc.evaluations + step.evaluations,
                        repairs: acc.repairs + step.repairs,
                    };
                    if !last {
                        temps.push(out_label);
                    }
                }
                acc.joint = acc.joint.drop_labels(&temps)?;
                Ok(acc)
            }
        },
        Cpd::FixedPoint(fp) => {
            let labels: Vec<String> = fp.inputs.iter().map(Input::label).collect();
            let start: Vec<f64> = match guess {
                Some(g) if g.len() == fp.nominal.len() => g.to_vec(),
                _ => fp.nominal.clone(),
            };
            extend_nonlinear(
                joint,
                &labels,
                &[],
                &children,
                |x, out| {
                    out.copy_from_slice(&start);
                    fp.solve(x, modes, out).map(|_| ())
                },
                &fp.noise_cov,
                fp.precision,
                rules,
            )
        }
    };
    result.map_err(|e| e.at_node(owner))
}

/// Moment-matches `children = f(parents, noise) + V` and appends the result.
#[allow(clippy::too_many_arguments)]
fn extend_nonlinear<F>(
    joint: &Gaussian,
    parents: &[String],
    noise_labels: &[String],
    children: &[String],
    f: F,
    noise_cov: &DMatrix<f64>,
    precision: Option<Precision>,
    rules: &mut RuleCache,
) -> Result<Propagation>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<()>,
{
    let mut local_parents = joint.select(parents)?;
    if !noise_labels.is_empty() {
        local_parents = block_diag(&local_parents, &Gaussian::standard(noise_labels))?;
    }
    let rule = rules.get(precision, local_parents.dim())?;
    let moments = estimate_local_moments(&local_parents, children, f, Some(noise_cov), rule)?;
    let mut local = moments.joint(&local_parents)?;
    if !noise_labels.is_empty() {
        let keep: Vec<&str> = parents.iter().chain(children).map(String::as_str).collect();
        local = local.select(&keep)?;
    }
    let (local, repairs) = repair_extension(local, parents.len())?;
    Ok(Propagation {
        joint: joint.append_conditional(&local)?,
        evaluations: moments.evaluations,
        repairs,
    })
}

/// Sequentially repairs each child of `local` (labels: `p` parents then the
/// children) against the parents and the children before it.
fn repair_extension(local: Gaussian, p: usize) -> Result<(Gaussian, usize)> {
    let n = local.dim();
    let mut cov = local.cov().clone();
    let mut repairs = 0;
    for c in p..n {
        let y: Vec<usize> = (0..c).collect();
        let sigma_yy = submatrix(&cov, &y, &y);
        let u_bar = DVector::from_iterator(c, (0..c).map(|i| cov[(i, c)]));
        let v_bar = cov[(c, c)];
        let scale = v_bar.abs().max(sigma_yy.trace() / c.max(1) as f64);
        if schur_complement(&sigma_yy, &u_bar, v_bar)? >= -REPAIR_TRIGGER * scale {
            continue;
        }
        let r = repair(&RepairProblem::new(sigma_yy, u_bar, v_bar))?;
        for i in 0..c {
            cov[(i, c)] = r.u[i];
            cov[(c, i)] = r.u[i];
        }
        cov[(c, c)] = r.v;
        repairs += 1;
    }
    if repairs == 0 {
        return Ok((local, 0));
    }
    Ok((
        Gaussian::new(local.labels().to_vec(), local.mean().clone(), cov)?,
        repairs,
    ))
}

fn block_diag(a: &Gaussian, b: &Gaussian) -> Result<Gaussian> {
    let (n, m) = (a.dim(), b.dim());
    let mut mean = DVector::zeros(n + m);
    mean.rows_mut(0, n).copy_from(a.mean());
    mean.rows_mut(n, m).copy_from(b.mean());
    let mut cov = DMatrix::zeros(n + m, n + m);
    cov.view_mut((0, 0), (n, n)).copy_from(a.cov());
    cov.view_mut((n, n), (m, m)).copy_from(b.cov());
    let mut labels = a.labels().to_vec();
    labels.extend(b.labels().iter().cloned());
    Gaussian::new(labels, mean, cov)
}

/// Pre-evidence prediction of one sensor.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SensorPrediction {
    pub sensor: String,
    pub mean: f64,
    pub var: f64,
    /// Predicted reading minus the predicted bias of the sensor's bias variable
    /// (equal to `mean` for unbiased sensors).
    pub unbiased_mean: f64,
}

#[derive(Clone, Debug)]
pub struct StepRecord {
    /// Filtered belief over the persistent variables.
    pub belief: Gaussian,
    pub predictions: Vec<SensorPrediction>,
    pub log_likelihood: f64,
    /// Function evaluations this step.
    pub evaluations: usize,
    pub repairs: usize,
    /// Whether the posterior covariance needed eigenvalue clipping.
    pub clipped: bool,
    pub node_evaluations: NodeAudit,
}

/// Evaluations per nonlinear CPD, keyed by its first child.
pub type NodeAudit = Vec<(String, usize)>;

/// Filtered beliefs for a whole sequence.
#[derive(Clone, Debug)]
pub struct BeliefTrace {
    pub initial: Gaussian,
    pub steps: Vec<StepRecord>,
}

impl BeliefTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Belief after `step` steps (0 is the initial belief).
    pub fn belief(&self, step: usize) -> &Gaussian {
        if step == 0 {
            &self.initial
        } else {
            &self.steps[step - 1].belief
        }
    }

    pub fn last(&self) -> &Gaussian {
        self.belief(self.steps.len())
    }
}

/// A Gaussian-belief filter over a 2TBN.
pub trait GaussianFilter {
    fn name(&self) -> String;

    fn step(&mut self, belief: &Gaussian, modes: &Modes, evidence: &[(String, f64)]) -> Result<StepRecord>;
}

/// A failed run: the trace up to the failing step and the error (which
/// carries the 1-based step index).
#[derive(Debug)]
pub struct TrackFailure {
    pub trace: BeliefTrace,
    pub error: Error,
}

impl fmt::Display for TrackFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for TrackFailure {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Runs `filter` over `evidence`; `modes[k]` drives the transition into step
/// `k + 1` (missing entries read as all-zero modes).
pub fn track_sequence<F: GaussianFilter + ?Sized>(
    filter: &mut F,
    initial: &Gaussian,
    modes: &[Modes],
    evidence: &[Vec<(String, f64)>],
) -> std::result::Result<BeliefTrace, Box<TrackFailure>> {
    let mut trace = BeliefTrace {
        initial: initial.clone(),
        steps: Vec::with_capacity(evidence.len()),
    };
    let default_modes = Modes::new();
    for (k, ev) in evidence.iter().enumerate() {
        let md = modes.get(k).unwrap_or(&default_modes);
        match filter.step(trace.last(), md, ev) {
            Ok(rec) => trace.steps.push(rec),
            Err(e) => {
                return Err(Box::new(TrackFailure {
                    trace,
                    error: e.at_step(k + 1),
                }))
            }
        }
    }
    Ok(trace)
}

/// The structured filter.
#[derive(Clone, Debug)]
pub struct StructuredFilter {
    model: Tbn,
    order: Vec<usize>,
    persistent: Vec<String>,
    sensors: Vec<String>,
    rules: RuleCache,
}

impl StructuredFilter {
    pub fn new(model: &Tbn, precision: Precision, kappa: Option<f64>) -> Result<Self> {
        let diags = model.validate();
        if !diags.is_empty() {
            return Err(Error::InvalidModel(diags));
        }
        Ok(Self {
            order: model.topological_order()?,
            persistent: model.persistent(),
            sensors: model.sensors(),
            model: model.clone(),
            rules: RuleCache::new(precision, kappa),
        })
    }

    pub fn model(&self) -> &Tbn {
        &self.model
    }

    pub fn precision(&self) -> Precision {
        self.rules.precision
    }

    /// Joint over slice t and slice t+1 before any evidence, with the
    /// per-node evaluation audit and the number of repairs.
    pub fn predict_joint(&mut self, belief: &Gaussian, modes: &Modes) -> Result<(Gaussian, NodeAudit, usize)> {
        let mut joint = belief.select(&self.persistent)?;
        let mut audit = Vec::new();
        let mut repairs = 0;
        for &ni in &self.order {
            let node = &self.model.nodes[ni];
            let guess = match &node.cpd {
                Cpd::FixedPoint(fp) if fp.warm_start => node
                    .children
                    .iter()
                    .map(|c| belief.mean_of(c).ok())
                    .collect::<Option<Vec<f64>>>(),
                _ => None,
            };
            let step = propagate_node(&joint, node, modes, &mut self.rules, guess.as_deref())?;
            if node.cpd.is_nonlinear() {
                audit.push((node.children[0].clone(), step.evaluations));
            }
            repairs += step.repairs;
            joint = step.joint;
        }
        Ok((joint, audit, repairs))
    }

    fn predictions(&self, joint: &Gaussian) -> Result<Vec<SensorPrediction>> {
        self.sensors
            .iter()
            .map(|s| {
                let label = next_label(s);
                let mean = joint.mean_of(&label)?;
                let bias = match self.model.sensor_bias(s) {
                    Some(b) => joint.mean_of(&next_label(&b))?,
                    None => 0.0,
                };
                Ok(SensorPrediction {
                    sensor: s.clone(),
                    mean,
                    var: joint.var_of(&label)?,
                    unbiased_mean: mean - bias,
                })
            })
            .collect()
    }
}

/// Conditions the slice-(t+1) joint on `evidence` and returns the belief over
/// the persistent variables, the log-likelihood and whether clipping was needed.
pub(crate) fn posterior(
    model: &Tbn,
    persistent: &[String],
    joint: &Gaussian,
    evidence: &[(String, f64)],
) -> Result<(Gaussian, f64, bool)> {
    let mut keep: Vec<String> = persistent.iter().map(|p| next_label(p)).collect();
    let mut obs = Vec::with_capacity(evidence.len());
    for (name, value) in evidence {
        if model.role(name) != Some(Role::Sensor) {
            return Err(Error::UnknownLabel(format!("{name} (not a sensor)")));
        }
        if !value.is_finite() {
            return Err(Error::Dimension(format!(
                "evidence for '{name}' is not finite ({value})"
            )));
        }
        let label = next_label(name);
        keep.push(label.clone());
        obs.push((label, *value));
    }
    let cond = joint.select(&keep)?.condition(&obs)?;
    let belief = cond
        .posterior
        .relabel(|l| l.strip_suffix('\'').unwrap_or(l).to_string())?;
    let trace = belief.cov().trace();
    let (belief, clipped) = if belief.dim() > 0 && min_eigenvalue(belief.cov()) < -CLIP_SCALE * trace {
        belief.clip_eigenvalues(CLIP_SCALE * trace)
    } else {
        (belief, false)
    };
    Ok((belief, cond.log_likelihood, clipped))
}

impl GaussianFilter for StructuredFilter {
    fn name(&self) -> String {
        format!("structured-p{}", self.rules.precision)
    }

    fn step(&mut self, belief: &Gaussian, modes: &Modes, evidence: &[(String, f64)]) -> Result<StepRecord> {
        let (joint, node_evaluations, repairs) = self.predict_joint(belief, modes)?;
        let predictions = self.predictions(&joint)?;
        let (belief, log_likelihood, clipped) = posterior(&self.model, &self.persistent, &joint, evidence)?;
        Ok(StepRecord {
            belief,
            predictions,
            log_likelihood,
            evaluations: node_evaluations.iter().map(|(_, n)| n).sum(),
            repairs,
            clipped,
            node_evaluations,
        })
    }
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::model::{curr, local, prev, NodeFn, Stage, TbnBuilder};

    fn scalar_model(cpd: Cpd) -> Tbn {
        TbnBuilder::new()
            .state("a", "")
            .state("b", "")
            .transient("x", "")
            .cpd(&["a"], Cpd::linear(&[(prev("a"), 0.9), (prev("b"), 0.2)], 0.1, 0.5))
            .cpd(&["b"], Cpd::linear(&[(prev("b"), 0.8)], 0.0, 0.3))
            .cpd(&["x"], cpd)
            .build()
            .unwrap()
    }

    fn belief() -> Gaussian {
        Gaussian::new(
            vec!["a".into(), "b".into()],
            DVector::from_column_slice(&[1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.4, 0.4, 1.0]),
        )
        .unwrap()
    }

    fn propagate_all(m: &Tbn, precision: Precision) -> Gaussian {
        let mut f = StructuredFilter::new(m, precision, None).unwrap();
        f.predict_joint(&belief(), &Modes::new()).unwrap().0
    }

    #[test]
    fn linear_function_through_cubature_matches_extend_linear() {
        let lin = scalar_model(Cpd::linear(&[(curr("a"), 2.0), (curr("b"), -1.0)], 0.5, 0.1));
        let func: NodeFn = Arc::new(|x: &[f64], _: &Modes, o: &mut [f64]| o[0] = 2.0 * x[0] - x[1] + 0.5);
        let nl = scalar_model(Cpd::nonlinear(
            vec![curr("a"), curr("b")],
            func,
            DMatrix::from_element(1, 1, 0.1),
        ));
        let exact = propagate_all(&lin, Precision::Three);
        for p in [Precision::Three, Precision::Five, Precision::Seven] {
            let approx = propagate_all(&nl, p);
            assert_eq!(approx.labels(), exact.labels());
            assert!((approx.mean() - exact.mean()).amax() < 1e-10);
            assert!((approx.cov() - exact.cov()).amax() < 1e-10);
        }
    }

    #[test]
    fn two_stage_linear_matches_direct() {
        let direct: NodeFn =
            Arc::new(|x: &[f64], _: &Modes, o: &mut [f64]| o[0] = 3.0 * (x[0] + 0.5 * x[1]) - 2.0 * x[1]);
        let inner: NodeFn = Arc::new(|x: &[f64], _: &Modes, o: &mut [f64]| o[0] = x[0] + 0.5 * x[1]);
        let outer: NodeFn = Arc::new(|x: &[f64], _: &Modes, o: &mut [f64]| o[0] = 3.0 * x[0] - 2.0 * x[1]);
        let noise = DMatrix::from_element(1, 1, 0.2);
        let one = scalar_model(Cpd::nonlinear(vec![curr("a"), curr("b")], direct, noise.clone()));
        let two = TbnBuilder::new()
            .state("a", "")
            .state("b", "")
            .transient("x", "")
            .encapsulated("g", "")
            .cpd(&["a"], Cpd::linear(&[(prev("a"), 0.9), (prev("b"), 0.2)], 0.1, 0.5))
            .cpd(&["b"], Cpd::linear(&[(prev("b"), 0.8)], 0.0, 0.3))
            .cpd(
                &["x"],
                Cpd::staged(
                    vec![
                        Stage {
                            output: "g".into(),
                            inputs: vec![curr("a"), curr("b")],
                            func: inner,
                        },
                        Stage {
                            output: "x".into(),
                            inputs: vec![local("g"), curr("b")],
                            func: outer,
                        },
                    ],
                    0.2,
                ),
            )
            .build()
            .unwrap();
        let a = propagate_all(&one, Precision::Three);
        let b = propagate_all(&two, Precision::Three);
        assert_eq!(a.labels(), b.labels());
        assert!((a.mean() - b.mean()).amax() < 1e-10);
        assert!((a.cov() - b.cov()).amax() < 1e-10);
    }

    #[test]
    fn no_evidence_is_pure_prediction() {
        let m = scalar_model(Cpd::linear(&[(curr("a"), 1.0)], 0.0, 1.0));
        let mut f = StructuredFilter::new(&m, Precision::Three, None).unwrap();
        let rec = f.step(&belief(), &Modes::new(), &[]).unwrap();
        let (joint, _, _) = f.predict_joint(&belief(), &Modes::new()).unwrap();
        let pred = joint.select(&["a'", "b'"]).unwrap();
        assert_eq!(rec.belief.mean(), pred.mean());
        assert_eq!(rec.belief.cov(), pred.cov());
        assert_eq!(rec.log_likelihood, 0.0);
    }

    #[test]
    fn repair_fixes_an_indefinite_extension() {
        // |y| under a 3-point rule with a large negative centre weight
        let func: NodeFn = Arc::new(|x: &[f64], _: &Modes, o: &mut [f64]| o[0] = x[0].abs() + x[1].abs());
        let m = scalar_model(Cpd::nonlinear(vec![curr("a"), curr("b")], func, DMatrix::zeros(1, 1)));
        let mut f = StructuredFilter::new(&m, Precision::Three, Some(-1.5)).unwrap();
        let (joint, _, repairs) = f.predict_joint(&belief(), &Modes::new()).unwrap();
        assert!(repairs > 0);
        assert!(min_eigenvalue(joint.cov()) > -1e-9);
    }

    #[test]
    fn rejects_evidence_on_non_sensor() {
        let m = scalar_model(Cpd::linear(&[(curr("a"), 1.0)], 0.0, 1.0));
        let mut f = StructuredFilter::new(&m, Precision::Three, None).unwrap();
        assert!(f.step(&belief(), &Modes::new(), &[("a".into(), 1.0)]).is_err());
    }
}
