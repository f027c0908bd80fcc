//! American put pricing by backward induction on per-stage state grids,
//! stopping/continuation regions, and American basket options.
//!
//! Geometric walks discount the continuation by `e^{-r}` per stage;
//! arithmetic walks charge `r t` in the payoff instead.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{reachable_hull, sample_paths, ModelSpec, PathSource, StageDiscretization};
use crate::risk::{self, DiscreteDistribution, RiskSpec};
use crate::sddp::{self, PayoffKind, PolicyOutcome, SddpConfig, SddpSolution, StoppingProblem};
use crate::snell::{self, StopMode};
use crate::tree::{uniform_specs, FiltrationTree};

/// A grid point stops iff `V <= payoff + STOP_TOL`.
pub const STOP_TOL: f64 = 1e-10;

const DEDUP_REL: f64 = 1e-12;

fn default_points() -> usize {
    400
}

fn default_max_nodes() -> usize {
    100_000
}

/// State grid, serialized as `{"kind": ...}`.
///
/// Every stage uses the base points inside its reachable interval plus the
/// interval endpoints (and the strike when inside), so children of grid
/// points never leave the next stage's grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum GridSpec {
    /// Log-uniform (geometric) or uniform (arithmetic) band of `points`
    /// around `S_0` covering five standard deviations of the horizon,
    /// with geometrically widening tail points out to the reachable range.
    Auto {
        #[serde(default = "default_points")]
        points: usize,
    },
    Uniform { points: usize, lo: f64, hi: f64 },
    LogUniform { points: usize, lo: f64, hi: f64 },
    Explicit { points: Vec<f64> },
    /// Every reachable state (recombining lattices such as the binomial one).
    Reachable {
        #[serde(default = "default_max_nodes")]
        max_nodes: usize,
    },
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Auto {
            points: default_points(),
        }
    }
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= DEDUP_REL * a.abs().max(b.abs()).max(1.0)
}

fn sort_dedup(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v.dedup_by(|a, b| close(*a, *b));
    v
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 {
        return vec![lo];
    }
    let h = (hi - lo) / (points - 1) as f64;
    (0..points).map(|k| lo + h * k as f64).collect()
}

fn auto_base(model: &ModelSpec, points: usize, global: (f64, f64)) -> Result<Vec<f64>> {
    if points < 2 {
        return Err(Error::InvalidArgument("grid needs at least 2 points".into()));
    }
    let horizon = (model.stages() as f64).sqrt();
    let (log, c, w) = match model {
        ModelSpec::GeometricWalk { s0, sigma, .. } => (true, s0.ln(), 5.0 * sigma * horizon),
        ModelSpec::ArithmeticWalk { s0, r, sigma, .. } => (
            false,
            *s0,
            5.0 * sigma * s0.abs() * horizon + (r * s0).abs() * model.stages() as f64,
        ),
        ModelSpec::BasketWalk { .. } => return Err(Error::InvalidModel("put grids are univariate".into())),
    };
    let to = |x: f64| if log { x.ln() } else { x };
    let from = |x: f64| if log { x.exp() } else { x };
    if w <= 0.0 {
        return Ok(vec![from(c)]);
    }
    let h = 2.0 * w / (points - 1) as f64;
    let mut xs = linspace(c - w, c + w, points);
    let (glo, ghi) = (to(global.0), to(global.1));
    let (mut x, mut step) = (c + w, h);
    while x < ghi {
        step *= 2.0;
        x += step;
        xs.push(x);
    }
    let (mut x, mut step) = (c - w, h);
    while x > glo {
        step *= 2.0;
        x -= step;
        xs.push(x);
    }
    Ok(sort_dedup(xs.into_iter().map(from).collect()))
}

fn reachable_nodes(model: &ModelSpec, disc: &StageDiscretization, max_nodes: usize) -> Result<Vec<Vec<f64>>> {
    let mut grids = vec![model.initial_state()];
    for t in 1..=model.stages() {
        let atoms = disc.law(t).scalar_atoms();
        let next: Vec<f64> = grids[t - 1]
            .iter()
            .flat_map(|&s| atoms.iter().map(move |&e| (s, e)))
            .map(|(s, e)| model.step_scalar(s, e))
            .collect();
        let next = sort_dedup(next);
        if next.len() > max_nodes {
            return Err(Error::TreeTooLarge {
                nodes: next.len() as u128,
                limit: max_nodes as u128,
            });
        }
        grids.push(next);
    }
    Ok(grids)
}

/// Per-stage grids for `t = 0..=T`.
pub fn stage_grids(model: &ModelSpec, disc: &StageDiscretization, spec: &GridSpec) -> Result<Vec<Vec<f64>>> {
    if !model.is_univariate() {
        return Err(Error::InvalidModel("put grids are univariate".into()));
    }
    let hull = reachable_hull(model, disc)?;
    if let GridSpec::Reachable { max_nodes } = spec {
        return reachable_nodes(model, disc, *max_nodes);
    }
    let global = hull
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(lo, hi)| (a.min(lo), b.max(hi)));
    let base = match spec {
        GridSpec::Auto { points } => auto_base(model, *points, global)?,
        GridSpec::Uniform { points, lo, hi } => {
            if *points < 2 || lo.partial_cmp(hi) != Some(std::cmp::Ordering::Less) {
                return Err(Error::InvalidArgument("uniform grid needs points >= 2 and lo < hi".into()));
            }
            linspace(*lo, *hi, *points)
        }
        GridSpec::LogUniform { points, lo, hi } => {
            if *points < 2 || !(*lo > 0.0 && lo < hi) {
                return Err(Error::InvalidArgument(
                    "log-uniform grid needs points >= 2 and 0 < lo < hi".into(),
                ));
            }
            linspace(lo.ln(), hi.ln(), *points).into_iter().map(f64::exp).collect()
        }
        GridSpec::Explicit { points } => {
            if points.is_empty() || points.iter().any(|p| !p.is_finite()) {
                return Err(Error::InvalidArgument("explicit grid needs finite points".into()));
            }
            sort_dedup(points.clone())
        }
        GridSpec::Reachable { .. } => unreachable!(),
    };
    let (grid_lo, grid_hi) = (base[0], base[base.len() - 1]);
    if !matches!(spec, GridSpec::Auto { .. }) {
        for (stage, &(lo, hi)) in hull.iter().enumerate() {
            if (grid_lo > lo && !close(grid_lo, lo)) || (grid_hi < hi && !close(grid_hi, hi)) {
                return Err(Error::GridCoverage {
                    stage,
                    lo,
                    hi,
                    grid_lo,
                    grid_hi,
                });
            }
        }
    }
    let strike = model.strike();
    Ok(hull
        .iter()
        .map(|&(lo, hi)| {
            let mut g: Vec<f64> = base.iter().copied().filter(|&p| p > lo && p < hi).collect();
            g.push(lo);
            g.push(hi);
            if strike > lo && strike < hi {
                g.push(strike);
            }
            sort_dedup(g)
        })
        .collect())
}

/// Piecewise-linear interpolation on a sorted grid, constant beyond the ends.
pub fn interpolate(grid: &[f64], values: &[f64], x: f64) -> f64 {
    let n = grid.len();
    if n == 1 || x <= grid[0] {
        return values[0];
    }
    if x >= grid[n - 1] {
        return values[n - 1];
    }
    let k = grid.partition_point(|&g| g <= x);
    let (x0, x1) = (grid[k - 1], grid[k]);
    let w = (x - x0) / (x1 - x0);
    values[k - 1] + w * (values[k] - values[k - 1])
}

/// Exercise value at stage `t`.
pub fn put_payoff(model: &ModelSpec, t: usize, s: f64) -> f64 {
    let intrinsic = (model.strike() - s).max(0.0);
    match model {
        ModelSpec::ArithmeticWalk { r, .. } => intrinsic - r * t as f64,
        _ => intrinsic,
    }
}

fn continuation_factor(model: &ModelSpec) -> f64 {
    match model {
        ModelSpec::GeometricWalk { r, .. } => (-r).exp(),
        _ => 1.0,
    }
}

/// Stage value function on its grid, interpolated piecewise linearly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridValueFunction {
    pub stage: usize,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub payoff: Vec<f64>,
    /// `None` at the terminal stage.
    pub continuation: Option<Vec<f64>>,
}

impl GridValueFunction {
    pub fn value_at(&self, s: f64) -> f64 {
        interpolate(&self.grid, &self.values, s)
    }

    /// Stop decision per grid point.
    pub fn stops(&self) -> Vec<bool> {
        self.values
            .iter()
            .zip(&self.payoff)
            .map(|(v, p)| *v <= p + STOP_TOL)
            .collect()
    }
}

/// Backward recursion `V_t = payoff_t v (discount * rho(V_{t+1}(children)))`
/// for `t = T-1, ..., 0`; element `t` of the result is stage `t`.
pub fn price_put(
    model: &ModelSpec,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    grid: &GridSpec,
) -> Result<Vec<GridValueFunction>> {
    spec.validate()?;
    let grids = stage_grids(model, disc, grid)?;
    let horizon = model.stages();
    let factor = continuation_factor(model);
    let terminal_grid = grids[horizon].clone();
    let terminal: Vec<f64> = terminal_grid.iter().map(|&s| put_payoff(model, horizon, s)).collect();
    let mut out = vec![GridValueFunction {
        stage: horizon,
        grid: terminal_grid,
        values: terminal.clone(),
        payoff: terminal,
        continuation: None,
    }];
    for t in (0..horizon).rev() {
        let next = out.last().expect("terminal stage present");
        let law = disc.law(t + 1);
        let atoms = law.scalar_atoms();
        let grid = grids[t].clone();
        let cont = grid
            .par_iter()
            .map(|&s| {
                let children = atoms
                    .iter()
                    .map(|&e| next.value_at(model.step_scalar(s, e)))
                    .collect();
                let dist = DiscreteDistribution::new(children, law.probs.clone())?;
                Ok(factor * risk::evaluate(spec, &dist)?)
            })
            .collect::<Result<Vec<f64>>>()?;
        let payoff: Vec<f64> = grid.iter().map(|&s| put_payoff(model, t, s)).collect();
        let values = payoff.iter().zip(&cont).map(|(p, c)| p.max(*c)).collect();
        out.push(GridValueFunction {
            stage: t,
            grid,
            values,
            payoff,
            continuation: Some(cont),
        });
    }
    out.reverse();
    Ok(out)
}

/// Value at `(0, S_0)`.
pub fn root_value(values: &[GridValueFunction]) -> f64 {
    values[0].values[0]
}

/// Grid run `[lo, hi)`: the decision is constant on the grid points from
/// `lo` up to (excluding) `hi`; the last run of a stage includes `hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRegions {
    pub stage: usize,
    pub stopping: Vec<Interval>,
    pub continuation: Vec<Interval>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionReport {
    pub stages: Vec<StageRegions>,
}

/// Scans each stage grid for runs of equal decisions.
pub fn extract_regions(values: &[GridValueFunction]) -> RegionReport {
    let stages = values
        .iter()
        .map(|v| {
            let stops = v.stops();
            let mut regions = StageRegions {
                stage: v.stage,
                stopping: Vec::new(),
                continuation: Vec::new(),
            };
            let n = stops.len();
            let mut start = 0;
            for i in 1..=n {
                if i == n || stops[i] != stops[start] {
                    let hi = if i == n { v.grid[n - 1] } else { v.grid[i] };
                    let iv = Interval { lo: v.grid[start], hi };
                    if stops[start] {
                        regions.stopping.push(iv);
                    } else {
                        regions.continuation.push(iv);
                    }
                    start = i;
                }
            }
            regions
        })
        .collect();
    RegionReport { stages }
}

/// Grid points `(stage, S)` where the stopping decision disagrees with the
/// rule `S + V_t(S) <= K`. Checked for the geometric walk at stages `t < T`
/// where the payoff or the continuation is positive (elsewhere `V = 0` and
/// both actions are equivalent).
pub fn fugit_mismatches(model: &ModelSpec, values: &[GridValueFunction]) -> Result<Vec<(usize, f64)>> {
    if !matches!(model, ModelSpec::GeometricWalk { .. }) {
        return Err(Error::InvalidModel("the fugit rule applies to the geometric walk".into()));
    }
    let k = model.strike();
    let mut bad = Vec::new();
    for v in values {
        let Some(cont) = &v.continuation else {
            continue;
        };
        for (i, stop) in v.stops().into_iter().enumerate() {
            if v.payoff[i] <= 0.0 && cont[i] <= STOP_TOL {
                continue;
            }
            let fugit = v.grid[i] + v.values[i] <= k + STOP_TOL;
            if fugit != stop {
                bad.push((v.stage, v.grid[i]));
            }
        }
    }
    Ok(bad)
}

/// Value table CSV: `stage,S,value,decision`.
pub fn write_values_csv<W: Write>(values: &[GridValueFunction], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "S", "value", "decision"])?;
    for v in values {
        for ((s, val), stop) in v.grid.iter().zip(&v.values).zip(v.stops()) {
            w.write_record([
                v.stage.to_string(),
                s.to_string(),
                val.to_string(),
                if stop { "stop" } else { "continue" }.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Region CSV: `stage,region,lo,hi`.
pub fn write_regions_csv<W: Write>(report: &RegionReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "region", "lo", "hi"])?;
    for s in &report.stages {
        let mut rows: Vec<(&str, &Interval)> = s
            .stopping
            .iter()
            .map(|i| ("stop", i))
            .chain(s.continuation.iter().map(|i| ("continue", i)))
            .collect();
        rows.sort_by(|a, b| a.1.lo.total_cmp(&b.1.lo));
        for (name, iv) in rows {
            w.write_record([s.stage.to_string(), name.to_string(), iv.lo.to_string(), iv.hi.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// How a basket option is valued.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum BasketEvaluation {
    /// Snell envelope on the full (non-recombining) scenario tree.
    ExactTree {
        #[serde(default = "default_max_nodes")]
        max_nodes: usize,
    },
    /// Cutting-plane lower model, then the greedy policy on `paths` true-law paths.
    PolicySimulation { sddp: SddpConfig, paths: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq)]
pub enum BasketPolicy {
    /// Stop flag and basket value `w . S` at every tree node.
    Tree {
        tree: FiltrationTree,
        basket: Vec<f64>,
        stop: Vec<bool>,
    },
    Cuts {
        solution: SddpSolution,
        outcomes: Vec<PolicyOutcome>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasketPricing {
    /// Exact root value, or the lower bound for [`BasketEvaluation::PolicySimulation`].
    pub root_value: f64,
    pub policy: BasketPolicy,
}

/// Scenario tree of the discretized walk with payoff values attached,
/// plus the state of each node.
pub fn scenario_tree(
    problem: &StoppingProblem,
    disc: &StageDiscretization,
    max_nodes: usize,
) -> Result<(FiltrationTree, Vec<Vec<f64>>)> {
    let model = problem.model();
    let mut count: u128 = 1;
    let mut level: u128 = 1;
    for t in 1..=model.stages() {
        level = level.saturating_mul(disc.law(t).len() as u128);
        count = count.saturating_add(level);
    }
    if count > max_nodes as u128 {
        return Err(Error::TreeTooLarge {
            nodes: count,
            limit: max_nodes as u128,
        });
    }
    let mut parents = vec![None];
    let mut probs = vec![1.0];
    let mut states = vec![model.initial_state()];
    let mut z = vec![problem.payoff(0, &states[0])];
    let mut frontier = vec![0usize];
    for t in 1..=model.stages() {
        let law = disc.law(t);
        let mut next = Vec::with_capacity(frontier.len() * law.len());
        for &v in &frontier {
            for i in 0..law.len() {
                let s = crate::lattice::step(model, &states[v], law.atom(i))?;
                z.push(problem.payoff(t, &s));
                parents.push(Some(v));
                probs.push(law.probs[i]);
                states.push(s);
                next.push(states.len() - 1);
            }
        }
        frontier = next;
    }
    Ok((FiltrationTree::from_parents(parents, probs, z)?, states))
}

/// American basket option `sup_tau rho([w.S_tau - K]_+ - r tau)` (or the
/// put-type payoff when `kind` asks for it).
pub fn price_basket(
    model: &ModelSpec,
    disc: &StageDiscretization,
    spec: &RiskSpec,
    evaluation: &BasketEvaluation,
    kind: Option<PayoffKind>,
) -> Result<BasketPricing> {
    if !matches!(model, ModelSpec::BasketWalk { .. }) {
        return Err(Error::InvalidModel("price_basket needs a basket walk".into()));
    }
    let problem = StoppingProblem::new(model, kind)?;
    match evaluation {
        BasketEvaluation::ExactTree { max_nodes } => {
            spec.validate()?;
            let (tree, states) = scenario_tree(&problem, disc, *max_nodes)?;
            let specs = uniform_specs(spec, tree.horizon());
            let result = snell::snell_envelope(&tree, &specs, StopMode::MaxStop)?;
            Ok(BasketPricing {
                root_value: result.root_value,
                policy: BasketPolicy::Tree {
                    basket: states.iter().map(|s| problem.basket(s)).collect(),
                    stop: result.stop,
                    tree,
                },
            })
        }
        BasketEvaluation::PolicySimulation { sddp: config, paths, seed } => {
            let solution = sddp::solve(&problem, spec, disc, config)?;
            let sampled = sample_paths(model, PathSource::TrueLaw, *paths, *seed)?;
            let outcomes = sddp::simulate_policy(&problem, &solution.approx, &sampled);
            Ok(BasketPricing {
                root_value: solution.lower_bound(),
                policy: BasketPolicy::Cuts { solution, outcomes },
            })
        }
    }
}
