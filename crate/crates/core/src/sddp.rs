//! Cutting-plane solver for the discretized stopping problems
//! `sup_tau rho_{0,T}(payoff_tau)` with additive random-walk dynamics.
//!
//! Stage values are convex in the state (affine transition, convex payoff,
//! convex monotone one-step measure), so each continuation function
//! `C_t(x) = rho(V_{t+1}(x + drift + eps))` is bounded below by the affine
//! cuts collected here. The lower model is `max(payoff_t, max cuts_t)`.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::amput::interpolate;
use crate::error::{Error, Result};
use crate::lattice::{
    reachable_hull, sample_paths, sub_seed, ModelSpec, PathSource, ScenarioPath, StageDiscretization,
};
use crate::risk::{self, DiscreteDistribution, RiskSpec};

/// Trial states closer than this (max norm) are merged within an iteration.
pub const TRIAL_DEDUP_TOL: f64 = 1e-9;
/// Slack allowed when auditing a cut against the exact continuation.
pub const AUDIT_TOL: f64 = 1e-8;
/// Audit states per stage.
pub const AUDIT_STATES: usize = 50;
/// Largest number of tree leaves (summed over a stage's audit states) the
/// exact audit recursion may visit before falling back to the chord model.
pub const AUDIT_EXACT_LIMIT: u128 = 5_000_000;

const FORWARD_STREAM: u64 = 0x464f_5257;
const AUDIT_STREAM: u64 = 0x4155_4449;

/// Sign of the payoff `[+-(w.x - K)]_+ - r t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PayoffKind {
    Put,
    Call,
}

/// Stopping problem on an additive walk: payoff `[+-(w.x - K)]_+ - r t`.
#[derive(Debug, Clone, PartialEq)]
pub struct StoppingProblem {
    model: ModelSpec,
    weights: Vec<f64>,
    kind: PayoffKind,
    drift: Vec<f64>,
}

impl StoppingProblem {
    /// Arithmetic walks default to the put, baskets to the call.
    pub fn new(model: &ModelSpec, kind: Option<PayoffKind>) -> Result<Self> {
        model.validate()?;
        let (weights, default_kind) = match model {
            ModelSpec::ArithmeticWalk { .. } => (vec![1.0], PayoffKind::Put),
            ModelSpec::BasketWalk { weights, .. } => (weights.clone(), PayoffKind::Call),
            ModelSpec::GeometricWalk { .. } => {
                return Err(Error::InvalidModel(
                    "cutting planes need an additive walk (arithmetic or basket)".into(),
                ))
            }
        };
        Ok(Self {
            model: model.clone(),
            weights,
            kind: kind.unwrap_or(default_kind),
            drift: model.drift(),
        })
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn kind(&self) -> PayoffKind {
        self.kind
    }

    pub fn horizon(&self) -> usize {
        self.model.stages()
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    /// `w . x`.
    pub fn basket(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, s)| w * s).sum()
    }

    fn sign(&self) -> f64 {
        match self.kind {
            PayoffKind::Put => -1.0,
            PayoffKind::Call => 1.0,
        }
    }

    pub fn payoff(&self, t: usize, x: &[f64]) -> f64 {
        let inner = self.sign() * (self.basket(x) - self.model.strike());
        inner.max(0.0) - self.model.rate() * t as f64
    }

    fn payoff_with_grad(&self, t: usize, x: &[f64], grad: &mut [f64]) -> f64 {
        let s = self.sign();
        let inner = s * (self.basket(x) - self.model.strike());
        if inner > 0.0 {
            for (g, w) in grad.iter_mut().zip(&self.weights) {
                *g = s * w;
            }
        } else {
            grad.fill(0.0);
        }
        inner.max(0.0) - self.model.rate() * t as f64
    }

    fn child(&self, x: &[f64], atom: &[f64], out: &mut [f64]) {
        for j in 0..x.len() {
            out[j] = x[j] + self.drift[j] + atom[j];
        }
    }

    fn check_disc(&self, disc: &StageDiscretization) -> Result<()> {
        if disc.stages() != self.horizon() || disc.dim != self.dim() {
            return Err(Error::InvalidArgument(
                "discretization does not match the model".into(),
            ));
        }
        Ok(())
    }
}

/// Affine minorant `intercept + slope . x` of the stage-`t` continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cut {
    pub stage: usize,
    pub slope: Vec<f64>,
    pub intercept: f64,
    pub iteration: usize,
}

impl Cut {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.intercept + self.slope.iter().zip(x).map(|(g, s)| g * s).sum::<f64>()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
struct StageCuts {
    slopes: Vec<f64>,
    intercepts: Vec<f64>,
    iterations: Vec<usize>,
    /// One-dimensional cuts only: indices sorted by (slope, intercept), the
    /// upper envelope as a subsequence of them, and the envelope breakpoints.
    order: Vec<usize>,
    envelope: Vec<usize>,
    breaks: Vec<f64>,
}

impl StageCuts {
    fn len(&self) -> usize {
        self.intercepts.len()
    }

    fn push(&mut self, cut: &Cut) {
        let k = self.len();
        self.slopes.extend(&cut.slope);
        self.intercepts.push(cut.intercept);
        self.iterations.push(cut.iteration);
        if cut.slope.len() == 1 {
            let key = (cut.slope[0], cut.intercept);
            let pos = self
                .order
                .partition_point(|&i| (self.slopes[i], self.intercepts[i]) < key);
            self.order.insert(pos, k);
            self.envelope.clear();
        }
    }

    /// Rebuilds the envelope of one-dimensional cuts (monotone stack).
    fn rebuild_envelope(&mut self) {
        let (g, b) = (&self.slopes, &self.intercepts);
        let meet = |p: usize, q: usize| (b[p] - b[q]) / (g[q] - g[p]);
        let mut env: Vec<usize> = Vec::with_capacity(self.order.len());
        for &c in &self.order {
            // Equal slopes are sorted by intercept, so the later one dominates.
            if let Some(&last) = env.last() {
                if g[last] == g[c] {
                    env.pop();
                }
            }
            while env.len() >= 2 {
                let (a, m) = (env[env.len() - 2], env[env.len() - 1]);
                if meet(a, c) <= meet(a, m) {
                    env.pop();
                } else {
                    break;
                }
            }
            env.push(c);
        }
        self.breaks = env.windows(2).map(|w| meet(w[0], w[1])).collect();
        self.envelope = env;
    }

    /// Largest cut value at `x` and its index.
    fn best(&self, x: &[f64]) -> Option<(f64, usize)> {
        if x.len() == 1 && !self.envelope.is_empty() {
            let k = self.envelope[self.breaks.partition_point(|&p| p <= x[0])];
            return Some((self.intercepts[k] + self.slopes[k] * x[0], k));
        }
        let d = x.len();
        let mut best: Option<(f64, usize)> = None;
        for (k, b) in self.intercepts.iter().enumerate() {
            let g = &self.slopes[k * d..(k + 1) * d];
            let v = b + g.iter().zip(x).map(|(g, s)| g * s).sum::<f64>();
            if best.is_none_or(|(m, _)| v > m) {
                best = Some((v, k));
            }
        }
        best
    }
}

/// Chord (piecewise-linear interpolation) model of the stage values on
/// per-stage grids; an upper model for convex stage values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChordModel {
    pub grids: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl ChordModel {
    pub fn value(&self, t: usize, x: f64) -> f64 {
        interpolate(&self.grids[t], &self.values[t], x)
    }
}

/// Lower (cuts) and optional upper (chords) value models.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueApprox {
    dim: usize,
    stages: Vec<StageCuts>,
    pub upper: Option<ChordModel>,
}

impl ValueApprox {
    /// No cuts: the lower model is the payoff.
    pub fn new(problem: &StoppingProblem) -> Self {
        Self {
            dim: problem.dim(),
            stages: vec![StageCuts::default(); problem.horizon()],
            upper: None,
        }
    }

    pub fn horizon(&self) -> usize {
        self.stages.len()
    }

    pub fn cut_count(&self, t: usize) -> usize {
        self.stages.get(t).map_or(0, StageCuts::len)
    }

    pub fn cuts(&self, t: usize) -> Vec<Cut> {
        let s = &self.stages[t];
        let d = self.dim;
        (0..s.len())
            .map(|k| Cut {
                stage: t,
                slope: s.slopes[k * d..(k + 1) * d].to_vec(),
                intercept: s.intercepts[k],
                iteration: s.iterations[k],
            })
            .collect()
    }

    /// Cut lists for stages `0..T`.
    pub fn all_cuts(&self) -> Vec<Vec<Cut>> {
        (0..self.horizon()).map(|t| self.cuts(t)).collect()
    }

    fn push_stage(&mut self, t: usize, cuts: &[Cut]) {
        let s = &mut self.stages[t];
        for c in cuts {
            s.push(c);
        }
        if self.dim == 1 {
            s.rebuild_envelope();
        }
    }

    /// Lower model of the continuation at stage `t < T`; `-inf` without cuts.
    pub fn continuation_lower(&self, t: usize, x: &[f64]) -> f64 {
        self.stages[t].best(x).map_or(f64::NEG_INFINITY, |(v, _)| v)
    }

    /// `max(payoff_t, continuation_lower)`; the payoff at `t = T`.
    pub fn value_lower(&self, problem: &StoppingProblem, t: usize, x: &[f64]) -> f64 {
        let p = problem.payoff(t, x);
        if t >= self.horizon() {
            return p;
        }
        p.max(self.continuation_lower(t, x))
    }

    fn value_and_grad(&self, problem: &StoppingProblem, t: usize, x: &[f64], grad: &mut [f64]) -> f64 {
        let p = problem.payoff_with_grad(t, x, grad);
        if t >= self.horizon() {
            return p;
        }
        match self.stages[t].best(x) {
            Some((c, k)) if c > p => {
                grad.copy_from_slice(&self.stages[t].slopes[k * self.dim..(k + 1) * self.dim]);
                c
            }
            _ => p,
        }
    }

    /// Greedy rule on the lower model: stop iff the payoff is at least the
    /// continuation estimate.
    pub fn should_stop(&self, problem: &StoppingProblem, t: usize, x: &[f64]) -> bool {
        t >= self.horizon() || problem.payoff(t, x) >= self.continuation_lower(t, x)
    }
}

/// Builds the cut at trial state `x` for stage `t < T`.
fn make_cut(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    approx: &ValueApprox,
    t: usize,
    x: &[f64],
    iteration: usize,
) -> Result<Cut> {
    let law = disc.law(t + 1);
    let d = problem.dim();
    let n = law.len();
    let mut values = vec![0.0; n];
    let mut grads = vec![0.0; n * d];
    let mut y = vec![0.0; d];
    for i in 0..n {
        problem.child(x, law.atom(i), &mut y);
        values[i] = approx.value_and_grad(problem, t + 1, &y, &mut grads[i * d..(i + 1) * d]);
    }
    let dist = DiscreteDistribution::new(values, law.probs.clone())?;
    let q = risk::dual_weights(spec, &dist)?;
    let value: f64 = q.iter().zip(dist.atoms()).map(|(q, v)| q * v).sum();
    let mut slope = vec![0.0; d];
    for (i, qi) in q.iter().enumerate() {
        for j in 0..d {
            slope[j] += qi * grads[i * d + j];
        }
    }
    let intercept = value - slope.iter().zip(x).map(|(g, s)| g * s).sum::<f64>();
    Ok(Cut {
        stage: t,
        slope,
        intercept,
        iteration,
    })
}

fn check_spec(spec: &RiskSpec) -> Result<()> {
    spec.validate()?;
    if !spec.is_cut_compatible() {
        return Err(Error::NotCutCompatible(format!("{spec:?}")));
    }
    Ok(())
}

fn dedup_states(states: Vec<Vec<f64>>) -> Vec<Vec<f64>> {
    let mut kept: Vec<Vec<f64>> = Vec::with_capacity(states.len());
    for s in states {
        let dup = kept.iter().any(|k| {
            k.iter()
                .zip(&s)
                .all(|(a, b)| (a - b).abs() <= TRIAL_DEDUP_TOL)
        });
        if !dup {
            kept.push(s);
        }
    }
    kept
}

/// Appends one cut per (deduplicated) trial state, for `t = T-1` down to 0.
/// `trial_states[t]` lists the stage-`t` states.
pub fn backward_pass(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    approx: &mut ValueApprox,
    trial_states: &[Vec<Vec<f64>>],
    iteration: usize,
) -> Result<Vec<Cut>> {
    check_spec(spec)?;
    problem.check_disc(disc)?;
    let horizon = problem.horizon();
    let mut added = Vec::new();
    for t in (0..horizon).rev() {
        let Some(states) = trial_states.get(t) else {
            continue;
        };
        let states = dedup_states(states.clone());
        let cuts = states
            .par_iter()
            .map(|x| make_cut(problem, disc, spec, approx, t, x, iteration))
            .collect::<Result<Vec<_>>>()?;
        approx.push_stage(t, &cuts);
        added.extend(cuts);
    }
    Ok(added)
}

/// Trial states per stage: `states[t][k]` is the `k`-th stage-`t` state.
pub type TrialStates = Vec<Vec<Vec<f64>>>;

/// Outcome of following the greedy policy along one path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyOutcome {
    pub stop_stage: usize,
    pub profit: f64,
}

/// Applies the greedy lower-model policy to each path.
pub fn simulate_policy(
    problem: &StoppingProblem,
    approx: &ValueApprox,
    paths: &[ScenarioPath],
) -> Vec<PolicyOutcome> {
    paths
        .par_iter()
        .map(|p| {
            let t = (0..p.states.len())
                .find(|&t| approx.should_stop(problem, t, &p.states[t]))
                .unwrap_or(p.states.len() - 1);
            PolicyOutcome {
                stop_stage: t,
                profit: problem.payoff(t, &p.states[t]),
            }
        })
        .collect()
}

/// Samples `count` paths from the discretized law, returns the stage-wise
/// trial states (`t = 0..T-1`) and the policy outcomes on them.
pub fn forward_pass(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    approx: &ValueApprox,
    count: usize,
    seed: u64,
) -> Result<(TrialStates, Vec<PolicyOutcome>)> {
    let paths = sample_paths(problem.model(), PathSource::Discretization(disc), count, seed)?;
    let horizon = problem.horizon();
    let mut trial = vec![Vec::with_capacity(count); horizon];
    for p in &paths {
        for (t, states) in trial.iter_mut().enumerate() {
            states.push(p.states[t].clone());
        }
    }
    let outcomes = simulate_policy(problem, approx, &paths);
    Ok((trial, outcomes))
}

/// Chord recursion on `points` equally spaced states over each stage's
/// reachable interval; `values[0][0]` bounds the root value from above.
pub fn upper_bound_model(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    points: usize,
) -> Result<ChordModel> {
    if problem.dim() != 1 {
        return Err(Error::MultivariateUpperBound);
    }
    spec.validate()?;
    problem.check_disc(disc)?;
    if points < 2 {
        return Err(Error::InvalidArgument("upper-bound grid needs at least 2 points".into()));
    }
    let hull = reachable_hull(problem.model(), disc)?;
    let horizon = problem.horizon();
    let grids: Vec<Vec<f64>> = hull
        .iter()
        .map(|&(lo, hi)| {
            if hi - lo <= 1e-12 * lo.abs().max(1.0) {
                vec![lo]
            } else {
                let h = (hi - lo) / (points - 1) as f64;
                let mut g: Vec<f64> = (0..points).map(|k| lo + h * k as f64).collect();
                g[points - 1] = hi;
                g
            }
        })
        .collect();
    let mut values = vec![Vec::new(); horizon + 1];
    values[horizon] = grids[horizon].iter().map(|&x| problem.payoff(horizon, &[x])).collect();
    for t in (0..horizon).rev() {
        let law = disc.law(t + 1);
        let atoms = law.scalar_atoms();
        let next_grid = &grids[t + 1];
        let next_values = &values[t + 1];
        values[t] = grids[t]
            .par_iter()
            .map(|&x| {
                let children: Vec<f64> = atoms
                    .iter()
                    .map(|e| interpolate(next_grid, next_values, x + problem.drift[0] + e))
                    .collect();
                let dist = DiscreteDistribution::new(children, law.probs.clone())?;
                Ok(problem.payoff(t, &[x]).max(risk::evaluate(spec, &dist)?))
            })
            .collect::<Result<Vec<_>>>()?;
    }
    Ok(ChordModel { grids, values })
}

/// Root value of [`upper_bound_model`].
pub fn upper_bound(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    points: usize,
) -> Result<f64> {
    Ok(upper_bound_model(problem, disc, spec, points)?.values[0][0])
}

/// Exact discretized stage value by full recursion over the scenario tree.
pub fn exact_value(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    t: usize,
    x: &[f64],
) -> Result<f64> {
    let p = problem.payoff(t, x);
    if t >= problem.horizon() {
        return Ok(p);
    }
    Ok(p.max(exact_continuation(problem, disc, spec, t, x)?))
}

/// Exact `C_t(x) = rho(V_{t+1}(children))`.
pub fn exact_continuation(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    t: usize,
    x: &[f64],
) -> Result<f64> {
    let law = disc.law(t + 1);
    let mut y = vec![0.0; x.len()];
    let mut values = Vec::with_capacity(law.len());
    for i in 0..law.len() {
        problem.child(x, law.atom(i), &mut y);
        values.push(exact_value(problem, disc, spec, t + 1, &y)?);
    }
    risk::evaluate(spec, &DiscreteDistribution::new(values, law.probs.clone())?)
}

fn leaves_below(disc: &StageDiscretization, t: usize) -> u128 {
    (t + 1..=disc.stages()).fold(1u128, |acc, s| acc.saturating_mul(disc.law(s).len() as u128))
}

/// How the continuation at a stage's audit states was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AuditOracle {
    Exact,
    Chord,
    Skipped,
}

/// Reference continuation values at fixed audit states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditSample {
    pub oracle: Vec<AuditOracle>,
    pub states: Vec<Vec<Vec<f64>>>,
    pub continuation: Vec<Vec<f64>>,
}

/// Tally of cut checks against an [`AuditSample`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub checked: usize,
    pub violations: usize,
    /// Largest `cut(x) - C_t(x)` seen.
    pub max_excess: f64,
    pub exact_stages: usize,
    pub chord_stages: usize,
    pub skipped_stages: usize,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Audit states: equally spaced over the reachable interval for
/// one-dimensional problems, sampled path states otherwise.
pub fn audit_sample(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    chord: Option<&ChordModel>,
    seed: u64,
) -> Result<AuditSample> {
    let horizon = problem.horizon();
    let states: Vec<Vec<Vec<f64>>> = if problem.dim() == 1 {
        reachable_hull(problem.model(), disc)?
            .iter()
            .take(horizon)
            .map(|&(lo, hi)| {
                if hi - lo <= 1e-12 * lo.abs().max(1.0) {
                    vec![vec![lo]]
                } else {
                    let h = (hi - lo) / (AUDIT_STATES - 1) as f64;
                    (0..AUDIT_STATES).map(|k| vec![lo + h * k as f64]).collect()
                }
            })
            .collect()
    } else {
        let paths = sample_paths(
            problem.model(),
            PathSource::Discretization(disc),
            AUDIT_STATES,
            sub_seed(seed, AUDIT_STREAM),
        )?;
        (0..horizon)
            .map(|t| dedup_states(paths.iter().map(|p| p.states[t].clone()).collect()))
            .collect()
    };
    let mut oracle = Vec::with_capacity(horizon);
    let mut continuation = Vec::with_capacity(horizon);
    for (t, xs) in states.iter().enumerate() {
        let exact = leaves_below(disc, t).saturating_mul(xs.len() as u128) <= AUDIT_EXACT_LIMIT;
        let (kind, vals) = if exact {
            let v = xs
                .par_iter()
                .map(|x| exact_continuation(problem, disc, spec, t, x))
                .collect::<Result<Vec<_>>>()?;
            (AuditOracle::Exact, v)
        } else if let Some(chord) = chord {
            let law = disc.law(t + 1);
            let v = xs
                .iter()
                .map(|x| {
                    let children = law
                        .scalar_atoms()
                        .iter()
                        .map(|e| chord.value(t + 1, x[0] + problem.drift[0] + e))
                        .collect();
                    risk::evaluate(spec, &DiscreteDistribution::new(children, law.probs.clone())?)
                })
                .collect::<Result<Vec<_>>>()?;
            (AuditOracle::Chord, v)
        } else {
            (AuditOracle::Skipped, Vec::new())
        };
        oracle.push(kind);
        continuation.push(vals);
    }
    Ok(AuditSample {
        oracle,
        states,
        continuation,
    })
}

impl AuditSample {
    pub fn report(&self) -> AuditReport {
        AuditReport {
            exact_stages: self.oracle.iter().filter(|o| **o == AuditOracle::Exact).count(),
            chord_stages: self.oracle.iter().filter(|o| **o == AuditOracle::Chord).count(),
            skipped_stages: self.oracle.iter().filter(|o| **o == AuditOracle::Skipped).count(),
            max_excess: f64::NEG_INFINITY,
            ..AuditReport::default()
        }
    }

    /// Checks `cut` at every audit state of its stage.
    pub fn check(&self, cut: &Cut, report: &mut AuditReport) {
        let t = cut.stage;
        if self.oracle[t] == AuditOracle::Skipped {
            return;
        }
        for (x, c) in self.states[t].iter().zip(&self.continuation[t]) {
            let excess = cut.eval(x) - c;
            report.checked += 1;
            report.max_excess = report.max_excess.max(excess);
            if excess > AUDIT_TOL {
                report.violations += 1;
            }
        }
    }
}

/// One row of the convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub lower: f64,
    pub upper: Option<f64>,
    pub elapsed_ms: Option<f64>,
}

fn default_forward_paths() -> usize {
    10
}

fn default_upper_cadence() -> usize {
    25
}

fn default_upper_points() -> usize {
    2001
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SddpConfig {
    pub iterations: usize,
    #[serde(default = "default_forward_paths")]
    pub forward_paths: usize,
    #[serde(default)]
    pub seed: u64,
    /// Report the upper bound every this many iterations (and at the last one);
    /// 0 reports it only at the end.
    #[serde(default = "default_upper_cadence")]
    pub upper_cadence: usize,
    #[serde(default = "default_upper_points")]
    pub upper_points: usize,
    #[serde(default = "default_true")]
    pub audit: bool,
    /// Wall-clock times in the trace make it non-reproducible, so they are opt-in.
    #[serde(default)]
    pub record_timing: bool,
}

impl SddpConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            forward_paths: default_forward_paths(),
            seed,
            upper_cadence: default_upper_cadence(),
            upper_points: default_upper_points(),
            audit: true,
            record_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SddpSolution {
    pub approx: ValueApprox,
    pub trace: Vec<IterationTrace>,
    pub audit: Option<AuditReport>,
    /// Chord upper bound at the root (one-dimensional problems only).
    pub upper_bound: Option<f64>,
}

impl SddpSolution {
    /// Lower-model value at the root after the last iteration.
    pub fn lower_bound(&self) -> f64 {
        self.trace.last().map_or(f64::NEG_INFINITY, |r| r.lower)
    }

    /// `(upper - lower) / |upper|`.
    pub fn gap(&self) -> Option<f64> {
        self.upper_bound.map(|u| (u - self.lower_bound()) / u.abs())
    }
}

/// Alternates forward and backward passes for `config.iterations` rounds.
pub fn solve(
    problem: &StoppingProblem,
    spec: &RiskSpec,
    disc: &StageDiscretization,
    config: &SddpConfig,
) -> Result<SddpSolution> {
    check_spec(spec)?;
    problem.check_disc(disc)?;
    if config.iterations == 0 {
        return Err(Error::ZeroIterations);
    }
    if config.forward_paths == 0 {
        return Err(Error::InvalidArgument("forward_paths must be at least 1".into()));
    }
    let start = Instant::now();
    let mut approx = ValueApprox::new(problem);
    if problem.dim() == 1 {
        approx.upper = Some(upper_bound_model(problem, disc, spec, config.upper_points)?);
    }
    let upper = approx.upper.as_ref().map(|m| m.values[0][0]);
    let audit = if config.audit {
        Some(audit_sample(problem, disc, spec, approx.upper.as_ref(), config.seed)?)
    } else {
        None
    };
    let mut report = audit.as_ref().map(AuditSample::report);
    let root = problem.model().initial_state();
    let forward_seed = sub_seed(config.seed, FORWARD_STREAM);
    let mut trace = Vec::with_capacity(config.iterations);
    for it in 1..=config.iterations {
        let (mut trial, _) = forward_pass(
            problem,
            disc,
            &approx,
            config.forward_paths,
            sub_seed(forward_seed, it as u64),
        )?;
        trial[0].insert(0, root.clone());
        let cuts = backward_pass(problem, disc, spec, &mut approx, &trial, it)?;
        if let (Some(sample), Some(rep)) = (&audit, report.as_mut()) {
            for c in &cuts {
                sample.check(c, rep);
            }
        }
        let show_upper = it == config.iterations
            || (config.upper_cadence > 0 && it % config.upper_cadence == 0);
        trace.push(IterationTrace {
            iteration: it,
            lower: approx.value_lower(problem, 0, &root),
            upper: if show_upper { upper } else { None },
            elapsed_ms: config
                .record_timing
                .then(|| start.elapsed().as_secs_f64() * 1e3),
        });
    }
    Ok(SddpSolution {
        approx,
        trace,
        audit: report,
        upper_bound: upper,
    })
}

/// Trace CSV with columns `iteration,lower,upper,elapsed_ms`; missing values are empty.
pub fn write_trace_csv<W: std::io::Write>(trace: &[IterationTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["iteration", "lower", "upper", "elapsed_ms"])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in trace {
        w.write_record([
            r.iteration.to_string(),
            r.lower.to_string(),
            opt(r.upper),
            opt(r.elapsed_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Count of outcomes stopping at each stage `0..=horizon`.
pub fn stopping_histogram(outcomes: &[PolicyOutcome], horizon: usize) -> Vec<usize> {
    let mut h = vec![0; horizon + 1];
    for o in outcomes {
        h[o.stop_stage.min(horizon)] += 1;
    }
    h
}

/// Equal-width histogram of the profits: `(bin_lo, bin_hi, count)`.
pub fn profit_histogram(outcomes: &[PolicyOutcome], bins: usize) -> Vec<(f64, f64, usize)> {
    if outcomes.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = outcomes.iter().map(|o| o.profit).fold(f64::INFINITY, f64::min);
    let hi = outcomes.iter().map(|o| o.profit).fold(f64::NEG_INFINITY, f64::max);
    if hi - lo <= 0.0 {
        return vec![(lo, hi, outcomes.len())];
    }
    let w = (hi - lo) / bins as f64;
    let mut counts = vec![0; bins];
    for o in outcomes {
        let k = (((o.profit - lo) / w) as usize).min(bins - 1);
        counts[k] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(k, c)| (lo + w * k as f64, lo + w * (k + 1) as f64, c))
        .collect()
}

/// Max minus min profit.
pub fn profit_range(outcomes: &[PolicyOutcome]) -> f64 {
    let lo = outcomes.iter().map(|o| o.profit).fold(f64::INFINITY, f64::min);
    let hi = outcomes.iter().map(|o| o.profit).fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}

fn default_max_outer() -> usize {
    20
}

fn default_sample_paths() -> usize {
    2000
}

fn default_tolerance() -> f64 {
    1e-6
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterLoopConfig {
    #[serde(default = "default_max_outer")]
    pub max_outer: usize,
    #[serde(default = "default_sample_paths")]
    pub sample_paths: usize,
    /// Stop once every stage law moves by less than this in total variation.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for OuterLoopConfig {
    fn default() -> Self {
        Self {
            max_outer: default_max_outer(),
            sample_paths: default_sample_paths(),
            tolerance: default_tolerance(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LoopStatus {
    Converged,
    CapReached,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterIterate {
    pub iteration: usize,
    /// Risk-neutral lower bound under the stage laws of this iteration.
    pub lower: f64,
    /// Largest stage-wise total-variation change of the reweighting step.
    pub tv_change: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConcaveLoopResult {
    pub status: LoopStatus,
    pub history: Vec<OuterIterate>,
    /// Stage laws of the last risk-neutral solve.
    pub disc: StageDiscretization,
    pub solution: SddpSolution,
}

/// Frequencies with which each stage-`t` atom lands among the
/// `ceil(alpha N)` lowest next-stage lower-model values, counted over all
/// sampled scenarios.
fn tail_frequencies(
    problem: &StoppingProblem,
    approx: &ValueApprox,
    disc: &StageDiscretization,
    paths: &[ScenarioPath],
    alpha: f64,
) -> Vec<Vec<f64>> {
    let horizon = problem.horizon();
    (1..=horizon)
        .map(|t| {
            let law = disc.law(t);
            let n = law.len();
            let k = ((alpha * n as f64) - 1e-9).ceil().max(1.0) as usize;
            let counts = paths
                .par_iter()
                .map(|p| {
                    let mut y = vec![0.0; problem.dim()];
                    let vals: Vec<f64> = (0..n)
                        .map(|i| {
                            problem.child(&p.states[t - 1], law.atom(i), &mut y);
                            approx.value_lower(problem, t, &y)
                        })
                        .collect();
                    let mut idx: Vec<usize> = (0..n).collect();
                    idx.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
                    let mut c = vec![0.0; n];
                    for &i in idx.iter().take(k) {
                        c[i] = 1.0;
                    }
                    c
                })
                .reduce(
                    || vec![0.0; n],
                    |mut a, b| {
                        a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
                        a
                    },
                );
            counts
        })
        .collect()
}

/// Approximates the concave objective `(1 - lambda) E(Z) - lambda AVaR_alpha(-Z)`
/// by risk-neutral solves under iteratively reweighted stage laws.
///
/// `disc` is the equally weighted starting discretization; scenarios for
/// the frequency counts are always drawn from it with `outer.seed`.
pub fn concave_outer_loop(
    problem: &StoppingProblem,
    lambda: f64,
    alpha: f64,
    disc: &StageDiscretization,
    inner: &SddpConfig,
    outer: &OuterLoopConfig,
) -> Result<ConcaveLoopResult> {
    if !(0.0..=1.0).contains(&lambda) || !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need lambda in [0, 1] and alpha in (0, 1), got {lambda} and {alpha}"
        )));
    }
    if outer.max_outer == 0 {
        return Err(Error::ZeroIterations);
    }
    problem.check_disc(disc)?;
    let paths = sample_paths(
        problem.model(),
        PathSource::Discretization(disc),
        outer.sample_paths,
        outer.seed,
    )?;
    let mut current = disc.clone();
    let mut history = Vec::new();
    for k in 1..=outer.max_outer {
        let solution = solve(problem, &RiskSpec::Expectation, &current, inner)?;
        let freq = tail_frequencies(problem, &solution.approx, disc, &paths, alpha);
        let mut next = current.clone();
        let mut tv: f64 = 0.0;
        for (t, f) in freq.iter().enumerate() {
            let n = f.len();
            let probs = if f.iter().sum::<f64>() > 0.0 {
                risk::reweight_concave(lambda, alpha, &risk::tail_ranks(f, alpha)?)?
            } else {
                vec![1.0 / n as f64; n]
            };
            let old = &current.law(t + 1).probs;
            let change = 0.5 * old.iter().zip(&probs).map(|(a, b)| (a - b).abs()).sum::<f64>();
            tv = tv.max(change);
            next.set_probs(t + 1, probs)?;
        }
        history.push(OuterIterate {
            iteration: k,
            lower: solution.lower_bound(),
            tv_change: tv,
        });
        if tv < outer.tolerance {
            return Ok(ConcaveLoopResult {
                status: LoopStatus::Converged,
                history,
                disc: current,
                solution,
            });
        }
        if k == outer.max_outer {
            return Ok(ConcaveLoopResult {
                status: LoopStatus::CapReached,
                history,
                disc: current,
                solution,
            });
        }
        current = next;
    }
    unreachable!("loop returns at the cap")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{discretize, DiscretizationMode};

    fn desk(stages: usize, sigma: f64) -> ModelSpec {
        ModelSpec::ArithmeticWalk {
            s0: 1.0,
            r: 0.01,
            sigma,
            strike: 1.0,
            stages,
        }
    }

    #[test]
    fn one_stage_cut_is_exact_at_trial_state() {
        let m = desk(1, 0.2);
        let p = StoppingProblem::new(&m, None).unwrap();
        let d = discretize(&m, 8, 3, DiscretizationMode::MonteCarlo).unwrap();
        let spec = RiskSpec::mean_avar(0.2, 0.05);
        let mut approx = ValueApprox::new(&p);
        backward_pass(&p, &d, &spec, &mut approx, &[vec![vec![1.0]]], 1).unwrap();
        let exact = exact_continuation(&p, &d, &spec, 0, &[1.0]).unwrap();
        assert!((approx.continuation_lower(0, &[1.0]) - exact).abs() < 1e-12);
    }

    #[test]
    fn rejects_evar_and_zero_iterations() {
        let m = desk(2, 0.2);
        let p = StoppingProblem::new(&m, None).unwrap();
        let d = discretize(&m, 4, 0, DiscretizationMode::MonteCarlo).unwrap();
        assert!(matches!(
            solve(&p, &RiskSpec::evar(0.5), &d, &SddpConfig::new(3, 0)),
            Err(Error::NotCutCompatible(_))
        ));
        assert!(matches!(
            solve(&p, &RiskSpec::Expectation, &d, &SddpConfig::new(0, 0)),
            Err(Error::ZeroIterations)
        ));
    }

    #[test]
    fn geometric_walk_is_rejected() {
        let g = ModelSpec::GeometricWalk {
            s0: 1.0,
            r: 0.01,
            sigma: 0.2,
            strike: 1.0,
            stages: 2,
        };
        assert!(matches!(StoppingProblem::new(&g, None), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn envelope_matches_linear_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut cuts = StageCuts::default();
        for k in 0..300 {
            let slope = (rng.random_range(-20..=20) as f64) * 0.05;
            cuts.push(&Cut {
                stage: 0,
                slope: vec![slope],
                intercept: rng.random_range(-1.0..1.0),
                iteration: k,
            });
            cuts.rebuild_envelope();
            let mut scan = cuts.clone();
            scan.envelope.clear();
            for _ in 0..20 {
                let x = [rng.random_range(-5.0..5.0)];
                let (a, b) = (cuts.best(&x).unwrap().0, scan.best(&x).unwrap().0);
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn histograms() {
        let o = [
            PolicyOutcome { stop_stage: 0, profit: 0.0 },
            PolicyOutcome { stop_stage: 2, profit: 1.0 },
            PolicyOutcome { stop_stage: 2, profit: 0.5 },
        ];
        assert_eq!(stopping_histogram(&o, 3), vec![1, 0, 2, 0]);
        let h = profit_histogram(&o, 2);
        assert_eq!(h.iter().map(|b| b.2).collect::<Vec<_>>(), vec![1, 2]);
        assert_eq!(profit_range(&o), 1.0);
    }

    #[test]
    fn payoff_kinds() {
        let m = desk(3, 0.2);
        let put = StoppingProblem::new(&m, None).unwrap();
        assert!((put.payoff(2, &[0.7]) - (0.3 - 0.02)).abs() < 1e-15);
        let call = StoppingProblem::new(&m, Some(PayoffKind::Call)).unwrap();
        assert!((call.payoff(1, &[1.5]) - 0.49).abs() < 1e-15);
    }
}
