//! Reference filters: extended Kalman filter, monolithic unscented filter and
//! a bootstrap particle filter.
//!
//! The Gaussian baselines treat the whole transition as one map from the slice-t
//! belief to every slice-(t+1) variable. Process noise is added as `G Gᵀ`, where
//! `G` is the derivative of that map with respect to the standard-normal noise
//! vector, taken by central differences of one noise standard deviation at the
//! belief mean (exact whenever noise propagates linearly).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{min_eigenvalue, symmetrize, Gaussian};
use crate::model::{next_label, sample_gaussian, CompiledTbn, Cpd, Modes, Role, Tbn};
use crate::quadrature::{build, default_kappa, CubatureRule, Precision};
use crate::tracker::{posterior, GaussianFilter, SensorPrediction, StepRecord, CLIP_SCALE};

/// Finite-difference step for coordinate value `mu`.
pub fn fd_step(mu: f64) -> f64 {
    1e-5f64.max(1e-5 * mu.abs())
}

/// The transition as a plain vector function.
#[derive(Clone)]
struct Transition {
    model: Tbn,
    compiled: CompiledTbn,
    labels: Vec<String>,
}

impl Transition {
    fn new(model: &Tbn) -> Result<Self> {
        let compiled = model.compile()?;
        let labels = compiled.next.iter().map(|n| next_label(n)).collect();
        Ok(Self {
            model: model.clone(),
            compiled,
            labels,
        })
    }

    fn np(&self) -> usize {
        self.compiled.persistent.len()
    }

    /// Values of every slice-(t+1) variable.
    fn eval(&self, x: &[f64], w: &[f64], modes: &Modes, slots: &mut [f64]) -> Result<DVector<f64>> {
        let np = self.np();
        slots[..np].copy_from_slice(x);
        self.compiled.transition(slots, modes, w)?;
        Ok(DVector::from_column_slice(&slots[np..np + self.labels.len()]))
    }

    /// `∂F/∂w` at `(x, 0)` by unit central differences, plus the number of
    /// transition evaluations spent.
    fn noise_gain(&self, x: &[f64], modes: &Modes, slots: &mut [f64]) -> Result<(DMatrix<f64>, usize)> {
        let nw = self.compiled.noise_dims;
        let mut g = DMatrix::zeros(self.labels.len(), nw);
        let mut w = vec![0.0; nw];
        for j in 0..nw {
            w[j] = 1.0;
            let plus = self.eval(x, &w, modes, slots)?;
            w[j] = -1.0;
            let minus = self.eval(x, &w, modes, slots)?;
            w[j] = 0.0;
            let col = (plus - minus) * 0.5;
            if let Some(i) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFiniteJacobian {
                    output: self.labels[i].clone(),
                    input: format!("noise[{j}]"),
                });
            }
            g.set_column(j, &col);
        }
        Ok((g, 2 * nw))
    }

    /// Conditions the predicted slice-(t+1) moments on `evidence`.
    fn finish(
        &self,
        mean: DVector<f64>,
        cov: DMatrix<f64>,
        evidence: &[(String, f64)],
        evaluations: usize,
    ) -> Result<StepRecord> {
        let mut joint = Gaussian::new(self.labels.clone(), mean, symmetrize(cov))?;
        let mut clipped = false;
        let trace = joint.cov().trace();
        if min_eigenvalue(joint.cov()) < -CLIP_SCALE * trace {
            joint = joint.clip_eigenvalues(CLIP_SCALE * trace).0;
            clipped = true;
        }
        let predictions = self
            .model
            .sensors()
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
            .collect::<Result<Vec<_>>>()?;
        let (belief, log_likelihood, post_clipped) =
            posterior(&self.model, &self.compiled.persistent, &joint, evidence)?;
        Ok(StepRecord {
            belief,
            predictions,
            log_likelihood,
            evaluations,
            repairs: 0,
            clipped: clipped || post_clipped,
            node_evaluations: Vec::new(),
        })
    }
}

/// Extended Kalman filter with central finite-difference Jacobians.
#[derive(Clone)]
pub struct Ekf {
    transition: Transition,
}

impl Ekf {
    pub fn new(model: &Tbn) -> Result<Self> {
        Ok(Self {
            transition: Transition::new(model)?,
        })
    }
}

impl GaussianFilter for Ekf {
    fn name(&self) -> String {
        "ekf".into()
    }

    fn step(&mut self, belief: &Gaussian, modes: &Modes, evidence: &[(String, f64)]) -> Result<StepRecord> {
        ekf_step(&self.transition, belief, modes, evidence)
    }
}

fn ekf_step(t: &Transition, belief: &Gaussian, modes: &Modes, evidence: &[(String, f64)]) -> Result<StepRecord> {
    let bel = belief.select(&t.compiled.persistent)?;
    let np = t.np();
    let mut slots = vec![0.0; t.compiled.slot_count()];
    let w0 = vec![0.0; t.compiled.noise_dims];
    let mu: Vec<f64> = bel.mean().iter().copied().collect();
    let mean = t.eval(&mu, &w0, modes, &mut slots)?;
    let mut jac = DMatrix::zeros(t.labels.len(), np);
    let mut x = mu.clone();
    for i in 0..np {
        let h = fd_step(mu[i]);
        x[i] = mu[i] + h;
        let plus = t.eval(&x, &w0, modes, &mut slots)?;
        x[i] = mu[i] - h;
        let minus = t.eval(&x, &w0, modes, &mut slots)?;
        x[i] = mu[i];
        let col = (plus - minus) / (2.0 * h);
        if let Some(r) = col.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteJacobian {
                output: t.labels[r].clone(),
                input: t.compiled.persistent[i].clone(),
            });
        }
        jac.set_column(i, &col);
    }
    let (g, noise_evals) = t.noise_gain(&mu, modes, &mut slots)?;
    let cov = &jac * bel.cov() * jac.transpose() + &g * g.transpose();
    t.finish(mean, cov, evidence, 1 + 2 * np + noise_evals)
}

/// Unscented filter: one precision-3 rule over the full belief dimension.
#[derive(Clone)]
pub struct MonolithicUf {
    transition: Transition,
    rule: CubatureRule,
}

impl MonolithicUf {
    /// `kappa = None` uses `3 - d`.
    pub fn new(model: &Tbn, kappa: Option<f64>) -> Result<Self> {
        let transition = Transition::new(model)?;
        let d = transition.np();
        let rule = build(Precision::Three, d, kappa.unwrap_or_else(|| default_kappa(d)))?;
        Ok(Self { transition, rule })
    }

    pub fn rule(&self) -> &CubatureRule {
        &self.rule
    }
}

impl GaussianFilter for MonolithicUf {
    fn name(&self) -> String {
        "uf".into()
    }

    /// `evaluations` counts the sigma-point evaluations only (`2d + 1`); the
    /// noise gain is a separate linearization.
    fn step(&mut self, belief: &Gaussian, modes: &Modes, evidence: &[(String, f64)]) -> Result<StepRecord> {
        let t = &self.transition;
        let bel = belief.select(&t.compiled.persistent)?;
        let pts = self.rule.transform(&bel)?;
        let mut slots = vec![0.0; t.compiled.slot_count()];
        let w0 = vec![0.0; t.compiled.noise_dims];
        let weights = self.rule.weights();
        let m = t.labels.len();
        let mut outputs = DMatrix::zeros(m, pts.ncols());
        let mut x = vec![0.0; t.np()];
        for (j, col) in pts.column_iter().enumerate() {
            x.iter_mut().zip(col.iter()).for_each(|(a, v)| *a = *v);
            let y = t.eval(&x, &w0, modes, &mut slots)?;
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    point: j,
                    values: x.clone(),
                });
            }
            outputs.set_column(j, &y);
        }
        let mut mean = DVector::zeros(m);
        for (j, col) in outputs.column_iter().enumerate() {
            mean.axpy(weights[j], &col, 1.0);
        }
        let mut cov = DMatrix::zeros(m, m);
        for (j, col) in outputs.column_iter().enumerate() {
            let d = col - &mean;
            cov.ger(weights[j], &d, &d, 1.0);
        }
        let mu: Vec<f64> = bel.mean().iter().copied().collect();
        let (g, _) = t.noise_gain(&mu, modes, &mut slots)?;
        cov += &g * g.transpose();
        t.finish(mean, cov, evidence, self.rule.len())
    }
}

/// Weighted particles over the persistent variables.
#[derive(Clone, Debug)]
pub struct ParticleSet {
    pub dim: usize,
    /// Row-major: particle `i` is `states[i*dim..(i+1)*dim]`.
    pub states: Vec<f64>,
    pub weights: Vec<f64>,
}

impl ParticleSet {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.states[i * self.dim..(i + 1) * self.dim]
    }

    /// Weighted mean and covariance (normalized by Σw = 1, no bias correction).
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let d = self.dim;
        let mut mean = DVector::zeros(d);
        for (i, w) in self.weights.iter().enumerate() {
            for (k, v) in self.particle(i).iter().enumerate() {
                mean[k] += w * v;
            }
        }
        let mut cov = DMatrix::zeros(d, d);
        let mut dx = DVector::zeros(d);
        for (i, w) in self.weights.iter().enumerate() {
            if *w == 0.0 {
                continue;
            }
            for (k, v) in self.particle(i).iter().enumerate() {
                dx[k] = v - mean[k];
            }
            cov.ger(*w, &dx, &dx, 1.0);
        }
        (mean, symmetrize(cov))
    }

    pub fn max_weight(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// `1 / Σ wᵢ²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

/// Per-step particle filter output.
#[derive(Clone, Debug)]
pub struct PfStepRecord {
    /// Weighted moments before resampling.
    pub belief: Gaussian,
    pub max_weight: f64,
    pub ess: f64,
    /// `log p(evidence | past evidence)` estimated as the log mean weight.
    pub log_likelihood: f64,
}

/// Bootstrap filter with systematic resampling every step.
#[derive(Clone)]
pub struct ParticleFilter {
    model: Tbn,
    compiled: CompiledTbn,
    rng: ChaCha8Rng,
}

impl ParticleFilter {
    pub fn new(model: &Tbn, seed: u64) -> Result<Self> {
        let compiled = model.compile()?;
        for node in &model.nodes {
            let senses = node.children.iter().any(|c| model.role(c) == Some(Role::Sensor));
            let input_noise = matches!(&node.cpd, Cpd::Nonlinear(n) if n.input_noise > 0);
            if senses && input_noise {
                return Err(Error::Dimension(format!(
                    "sensor CPD of '{}' has non-additive noise; no closed-form likelihood",
                    node.children[0]
                )));
            }
        }
        Ok(Self {
            model: model.clone(),
            compiled,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn persistent(&self) -> &[String] {
        &self.compiled.persistent
    }

    /// `n` equally weighted draws from `initial`.
    pub fn initialize(&mut self, initial: &Gaussian, n: usize) -> Result<ParticleSet> {
        let g = initial.select(&self.compiled.persistent)?;
        let mut states = Vec::with_capacity(n * g.dim());
        for _ in 0..n {
            states.extend(sample_gaussian(&g, &mut self.rng).iter());
        }
        Ok(ParticleSet {
            dim: g.dim(),
            states,
            weights: vec![1.0 / n as f64; n],
        })
    }

    /// Propagates, weights and resamples. Returns the resampled set and the
    /// diagnostics of the weighted set before resampling.
    pub fn step(
        &mut self,
        ps: &ParticleSet,
        modes: &Modes,
        evidence: &[(String, f64)],
    ) -> Result<(ParticleSet, PfStepRecord)> {
        let c = &self.compiled;
        let np = ps.dim;
        let n = ps.len();
        let mut observed: Vec<Option<f64>> = vec![None; c.next.len()];
        for (name, v) in evidence {
            if self.model.role(name) != Some(Role::Sensor) {
                return Err(Error::UnknownLabel(format!("{name} (not a sensor)")));
            }
            observed[c.next_slot(name).unwrap() - np] = Some(*v);
        }
        let observed_node: Vec<bool> = c
            .nodes
            .iter()
            .map(|node| node.children.iter().any(|&s| observed[s - np].is_some()))
            .collect();

        let mut slots = vec![0.0; c.slot_count()];
        let mut next = Vec::with_capacity(n * np);
        let mut log_w = Vec::with_capacity(n);
        for i in 0..n {
            slots[..np].copy_from_slice(ps.particle(i));
            let mut lw = ps.weights[i].ln();
            for (node, &obs) in c.nodes.iter().zip(&observed_node) {
                if !obs {
                    c.sample_node(node, &mut slots, modes, &mut self.rng)
                        .map_err(|e| e.at_node(c.next[node.children[0] - np].clone()))?;
                    continue;
                }
                c.eval_node(node, &mut slots, modes, None)?;
                let sd = node.noise_sqrt();
                for (r, &s) in node.children.iter().enumerate() {
                    if let Some(y) = observed[s - np] {
                        let var = self
                            .model
                            .sensor_noise_var(&c.next[s - np], modes)
                            .unwrap_or_else(|| sd[(r, r)] * sd[(r, r)]);
                        let d = y - slots[s];
                        lw += -0.5 * (d * d / var + (2.0 * std::f64::consts::PI * var).ln());
                        slots[s] = y;
                    }
                }
            }
            next.extend(c.persistent_next.iter().map(|&s| slots[s]));
            log_w.push(lw);
        }

        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::WeightsUnderflow);
        }
        let unnorm: Vec<f64> = log_w.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        let weighted = ParticleSet {
            dim: np,
            states: next,
            weights: unnorm.iter().map(|u| u / total).collect(),
        };
        let (mean, cov) = weighted.moments();
        let record = PfStepRecord {
            belief: Gaussian::new(c.persistent.clone(), mean, cov)?,
            max_weight: weighted.max_weight(),
            ess: weighted.ess(),
            log_likelihood: max + total.ln(),
        };
        let resampled = systematic_resample(&weighted, &mut self.rng);
        Ok((resampled, record))
    }
}

/// Systematic resampling; the result has uniform weights.
pub fn systematic_resample<R: Rng + ?Sized>(ps: &ParticleSet, rng: &mut R) -> ParticleSet {
    let n = ps.len();
    let u0: f64 = rng.random::<f64>() / n as f64;
    let mut states = Vec::with_capacity(ps.states.len());
    let mut cum = ps.weights[0];
    let mut j = 0;
    for i in 0..n {
        let u = u0 + i as f64 / n as f64;
        while u > cum && j + 1 < n {
            j += 1;
            cum += ps.weights[j];
        }
        states.extend_from_slice(ps.particle(j));
    }
    ParticleSet {
        dim: ps.dim,
        states,
        weights: vec![1.0 / n as f64; n],
    }
}

/// Particle-filter run over a sequence.
#[derive(Clone, Debug)]
pub struct PfTrace {
    pub initial: Gaussian,
    pub steps: Vec<PfStepRecord>,
}

/// Runs the particle filter; on failure returns the records so far and the
/// error (tagged with the 1-based step).
#[allow(clippy::result_large_err)]
pub fn run_particle_filter(
    model: &Tbn,
    initial: &Gaussian,
    modes: &[Modes],
    evidence: &[Vec<(String, f64)>],
    particles: usize,
    seed: u64,
) -> std::result::Result<PfTrace, (PfTrace, Error)> {
    let mut trace = PfTrace {
        initial: initial.clone(),
        steps: Vec::with_capacity(evidence.len()),
    };
    let mut pf = match ParticleFilter::new(model, seed) {
        Ok(pf) => pf,
        Err(e) => return Err((trace, e)),
    };
    let mut ps = match pf.initialize(initial, particles.max(1)) {
        Ok(ps) => ps,
        Err(e) => return Err((trace, e)),
    };
    let default_modes = Modes::new();
    for (k, ev) in evidence.iter().enumerate() {
        let md = modes.get(k).unwrap_or(&default_modes);
        match pf.step(&ps, md, ev) {
            Ok((next, rec)) => {
                ps = next;
                trace.steps.push(rec);
            }
            Err(e) => return Err((trace, e.at_step(k + 1))),
        }
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{curr, prev, TbnBuilder};
    use crate::tracker::StructuredFilter;

    fn toy() -> Tbn {
        TbnBuilder::new()
            .state("x", "")
            .sensor("y", "")
            .cpd(&["x"], Cpd::linear(&[(prev("x"), 0.9)], 0.1, 0.4))
            .cpd(&["y"], Cpd::linear(&[(curr("x"), 2.0)], 0.0, 0.5))
            .build()
            .unwrap()
    }

    fn init() -> Gaussian {
        Gaussian::from_diagonal(&["x"], &[1.0], &[2.0]).unwrap()
    }

    #[test]
    fn gaussian_baselines_agree_with_structured_on_linear_model() {
        let m = toy();
        let ev = vec![("y".to_string(), 1.3)];
        let s = StructuredFilter::new(&m, Precision::Three, None)
            .unwrap()
            .step(&init(), &Modes::new(), &ev)
            .unwrap();
        let e = Ekf::new(&m).unwrap().step(&init(), &Modes::new(), &ev).unwrap();
        let u = MonolithicUf::new(&m, None)
            .unwrap()
            .step(&init(), &Modes::new(), &ev)
            .unwrap();
        for r in [&e, &u] {
            assert!((r.belief.mean() - s.belief.mean()).amax() < 1e-9);
            assert!((r.belief.cov() - s.belief.cov()).amax() < 1e-9);
            assert!((r.log_likelihood - s.log_likelihood).abs() < 1e-9);
        }
        assert_eq!(u.evaluations, 3);
    }

    #[test]
    fn systematic_resampling_keeps_heavy_particle() {
        let ps = ParticleSet {
            dim: 1,
            states: vec![0.0, 1.0, 2.0, 3.0],
            weights: vec![0.0, 0.0, 1.0, 0.0],
        };
        let r = systematic_resample(&ps, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(r.states, vec![2.0; 4]);
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_particle_has_trivial_weight() {
        let m = toy();
        let mut pf = ParticleFilter::new(&m, 5).unwrap();
        let ps = pf.initialize(&init(), 1).unwrap();
        let (next, rec) = pf.step(&ps, &Modes::new(), &[("y".into(), 0.4)]).unwrap();
        assert_eq!(rec.max_weight, 1.0);
        assert_eq!(rec.ess, 1.0);
        assert_eq!(next.len(), 1);
    }

    #[test]
    fn weights_are_normalized_and_ess_bounded() {
        let m = toy();
        let mut pf = ParticleFilter::new(&m, 9).unwrap();
        let mut ps = pf.initialize(&init(), 500).unwrap();
        for _ in 0..5 {
            let (next, rec) = pf.step(&ps, &Modes::new(), &[("y".into(), 0.7)]).unwrap();
            assert!(rec.ess >= 1.0 && rec.ess <= 500.0 + 1e-9);
            assert!((next.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            ps = next;
        }
    }

    #[test]
    fn impossible_evidence_underflows() {
        let m = toy();
        let mut pf = ParticleFilter::new(&m, 1).unwrap();
        let ps = pf.initialize(&init(), 10).unwrap();
        let err = pf.step(&ps, &Modes::new(), &[("y".into(), f64::INFINITY)]).unwrap_err();
        assert!(matches!(err, Error::WeightsUnderflow));
    }
}
