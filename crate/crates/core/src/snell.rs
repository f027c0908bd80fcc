//! Risk-averse Snell envelopes and stopping risk measures on finite trees.
//!
//! For one-step mappings `rho_t` (one [`RiskSpec`] per transition stage):
//!
//! ```text
//! E_T = Z_T,   E_t = Z_t v rho_t(E_{t+1})   (MaxStop; MinStop uses ^)
//! tau*_m = min { t >= m : E_t = Z_t }
//! rho_{m,T}(Z_tau) = 1{tau=m} Z_m + rho_m(1{tau=m+1} Z_{m+1} + ... + rho_{T-1}(1{tau=T} Z_T))
//! ```

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::RiskSpec;
use crate::tree::{FiltrationTree, MarkovLattice};

/// Tolerance for `E_t = Z_t` and other envelope comparisons.
pub const TOUCH_TOL: f64 = 1e-10;
/// Largest number of stopping times the oracle will enumerate.
pub const ENUMERATION_LIMIT: u128 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopMode {
    MaxStop,
    MinStop,
}

impl StopMode {
    fn combine(self, z: f64, c: f64) -> f64 {
        match self {
            StopMode::MaxStop => z.max(c),
            StopMode::MinStop => z.min(c),
        }
    }

    fn better(self, a: f64, b: f64) -> bool {
        match self {
            StopMode::MaxStop => a > b,
            StopMode::MinStop => a < b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnellResult {
    pub mode: StopMode,
    /// `E_t` per node.
    pub envelope: Vec<f64>,
    /// `rho_t(E_{t+1})` per node; `None` at leaves.
    pub continuation: Vec<Option<f64>>,
    /// `E_t = Z_t` within [`TOUCH_TOL`].
    pub stop: Vec<bool>,
    pub root_value: f64,
}

/// Backward recursion of the envelope.
pub fn snell_envelope(tree: &FiltrationTree, specs: &[RiskSpec], mode: StopMode) -> Result<SnellResult> {
    tree.check_specs(specs)?;
    let z = tree.z();
    let n = tree.len();
    let mut envelope = vec![0.0; n];
    let mut continuation = vec![None; n];
    for &leaf in tree.leaves() {
        envelope[leaf] = z[leaf];
    }
    for t in (0..tree.horizon()).rev() {
        let nodes = tree.nodes_at(t);
        let cont = nodes
            .par_iter()
            .map(|&v| tree.conditional(&specs[t], v, &envelope))
            .collect::<Result<Vec<f64>>>()?;
        for (&v, c) in nodes.iter().zip(cont) {
            continuation[v] = Some(c);
            envelope[v] = mode.combine(z[v], c);
        }
    }
    let stop = (0..n).map(|v| (envelope[v] - z[v]).abs() <= TOUCH_TOL).collect();
    Ok(SnellResult {
        mode,
        root_value: envelope[0],
        envelope,
        continuation,
        stop,
    })
}

/// Stopping time given by per-node flags; on each path it stops at the
/// first flagged node. Leaves are always flagged.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoppingTime {
    pub flags: Vec<bool>,
}

impl StoppingTime {
    pub fn new(tree: &FiltrationTree, mut flags: Vec<bool>) -> Result<Self> {
        if flags.len() != tree.len() {
            return Err(Error::InvalidArgument(format!(
                "{} flags for {} nodes",
                flags.len(),
                tree.len()
            )));
        }
        for &leaf in tree.leaves() {
            flags[leaf] = true;
        }
        Ok(Self { flags })
    }

    /// `tau = t` on every path (`t` is capped at the horizon).
    pub fn constant(tree: &FiltrationTree, t: usize) -> Self {
        let flags = (0..tree.len()).map(|v| tree.stage(v) >= t.min(tree.horizon())).collect();
        Self { flags }
    }

    /// Node where the path ending in `leaf` stops.
    pub fn stop_node(&self, tree: &FiltrationTree, leaf: usize) -> usize {
        *tree
            .path_to(leaf)
            .iter()
            .find(|&&v| self.flags[v])
            .unwrap_or(&leaf)
    }

    /// Stopping stage on each path, in the order of `tree.leaves()`.
    pub fn stages(&self, tree: &FiltrationTree) -> Vec<usize> {
        tree.leaves()
            .iter()
            .map(|&leaf| tree.stage(self.stop_node(tree, leaf)))
            .collect()
    }

    /// `E[tau]` under the tree's path probabilities.
    pub fn expected_stage(&self, tree: &FiltrationTree) -> f64 {
        tree.leaves()
            .iter()
            .map(|&leaf| tree.path_prob(leaf) * tree.stage(self.stop_node(tree, leaf)) as f64)
            .sum()
    }

    /// `self >= other` on every path.
    pub fn dominates(&self, other: &StoppingTime, tree: &FiltrationTree) -> bool {
        self.stages(tree)
            .iter()
            .zip(other.stages(tree))
            .all(|(a, b)| *a >= b)
    }
}

/// `tau*_m`: first node at stage `>= m` where the envelope touches `Z`.
pub fn optimal_stopping_time(result: &SnellResult, tree: &FiltrationTree, m: usize) -> Result<StoppingTime> {
    if m > tree.horizon() || result.stop.len() != tree.len() {
        return Err(Error::StageBounds {
            t: m,
            u: tree.horizon(),
            horizon: tree.horizon(),
        });
    }
    let flags = (0..tree.len())
        .map(|v| tree.stage(v) >= m && result.stop[v])
        .collect();
    StoppingTime::new(tree, flags)
}

/// Nodewise values of `rho_{m,T}(Z_tau)` for nodes at stage `>= m`
/// (`NaN` before `m`); flags before stage `m` are ignored.
pub fn nested_values_from(
    tree: &FiltrationTree,
    specs: &[RiskSpec],
    tau: &StoppingTime,
    m: usize,
) -> Result<Vec<f64>> {
    tree.check_specs(specs)?;
    if m > tree.horizon() {
        return Err(Error::StageBounds {
            t: m,
            u: tree.horizon(),
            horizon: tree.horizon(),
        });
    }
    let n = tree.len();
    // active[v]: tau has not happened strictly before v (counting from stage m).
    let mut active = vec![true; n];
    for v in 1..n {
        let p = tree.parent(v).unwrap();
        active[v] = active[p] && !(tau.flags[p] && tree.stage(p) >= m);
    }
    let z = tree.z();
    let indicator = |v: usize| -> f64 {
        if active[v] && tau.flags[v] && tree.stage(v) >= m {
            1.0
        } else {
            0.0
        }
    };
    let mut x = vec![f64::NAN; n];
    for &leaf in tree.leaves() {
        x[leaf] = indicator(leaf) * z[leaf];
    }
    for t in (m..tree.horizon()).rev() {
        for &v in tree.nodes_at(t) {
            x[v] = indicator(v) * z[v] + tree.conditional(&specs[t], v, &x)?;
        }
    }
    Ok(x)
}

/// `rho_{0,T}(Z_tau)`.
pub fn nested_value(tree: &FiltrationTree, specs: &[RiskSpec], tau: &StoppingTime) -> Result<f64> {
    Ok(nested_values_from(tree, specs, tau, 0)?[0])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sense {
    Max,
    Min,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub value: f64,
    /// Among stopping times within [`ORACLE_TIE_TOL`] of the optimum, the one
    /// with the largest expected stopping stage.
    pub tau: StoppingTime,
    /// Number of stopping times enumerated.
    pub enumerated: u128,
    /// Number of them within [`ORACLE_TIE_TOL`] of the optimum.
    pub optimal_count: usize,
}

pub const ORACLE_TIE_TOL: f64 = 1e-9;

/// Number of adapted stopping times `tau >= m` that differ on reachable nodes.
pub fn count_stopping_times(tree: &FiltrationTree, m: usize) -> u128 {
    counts(tree, m)[0]
}

fn counts(tree: &FiltrationTree, m: usize) -> Vec<u128> {
    let mut c = vec![1u128; tree.len()];
    for t in (0..tree.horizon()).rev() {
        for &v in tree.nodes_at(t) {
            let cont = tree
                .children(v)
                .iter()
                .fold(1u128, |acc, &k| acc.saturating_mul(c[k]));
            c[v] = if t >= m { cont.saturating_add(1) } else { cont };
        }
    }
    c
}

fn decode(tree: &FiltrationTree, c: &[u128], m: usize, v: usize, mut idx: u128, flags: &mut [bool]) {
    let kids = tree.children(v);
    if kids.is_empty() {
        flags[v] = true;
        return;
    }
    if tree.stage(v) >= m && idx == c[v] - 1 {
        flags[v] = true;
        return;
    }
    for &k in kids {
        decode(tree, c, m, k, idx % c[k], flags);
        idx /= c[k];
    }
}

/// Exhaustive search over all adapted stopping times `tau >= m`, scored by
/// the root value `rho_{0,T}(Z_tau)`.
pub fn enumerate_stopping_oracle(
    tree: &FiltrationTree,
    specs: &[RiskSpec],
    m: usize,
    sense: Sense,
) -> Result<OracleResult> {
    tree.check_specs(specs)?;
    if m > tree.horizon() {
        return Err(Error::StageBounds {
            t: m,
            u: tree.horizon(),
            horizon: tree.horizon(),
        });
    }
    let c = counts(tree, m);
    let total = c[0];
    if total > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            count: total,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mode = match sense {
        Sense::Max => StopMode::MaxStop,
        Sense::Min => StopMode::MinStop,
    };
    let scored = (0..total as u64)
        .into_par_iter()
        .map(|idx| {
            let mut flags = vec![false; tree.len()];
            decode(tree, &c, m, 0, idx as u128, &mut flags);
            let tau = StoppingTime { flags };
            let value = nested_value(tree, specs, &tau)?;
            let late = tau.expected_stage(tree);
            Ok((value, late, idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let best = scored
        .iter()
        .map(|s| s.0)
        .reduce(|a, b| if mode.better(b, a) { b } else { a })
        .expect("at least one stopping time");
    let near: Vec<&(f64, f64, u64)> = scored
        .iter()
        .filter(|s| (s.0 - best).abs() <= ORACLE_TIE_TOL)
        .collect();
    let chosen = near
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.2.cmp(&a.2)))
        .expect("optimum is near itself");
    let mut flags = vec![false; tree.len()];
    decode(tree, &c, m, 0, chosen.2 as u128, &mut flags);
    Ok(OracleResult {
        value: chosen.0,
        tau: StoppingTime { flags },
        enumerated: total,
        optimal_count: near.len(),
    })
}

/// Outcome of a property check that stops at the first offending node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCheck {
    pub holds: bool,
    pub first_violation: Option<usize>,
}

/// `X_t >= rho_t(X_{t+1})` at every non-leaf node, within [`TOUCH_TOL`].
pub fn check_supermartingale(values: &[f64], tree: &FiltrationTree, specs: &[RiskSpec]) -> Result<NodeCheck> {
    tree.check_specs(specs)?;
    if values.len() != tree.len() {
        return Err(Error::InvalidArgument("one value per node required".into()));
    }
    for v in 0..tree.len() {
        if tree.children(v).is_empty() {
            continue;
        }
        let c = tree.conditional(&specs[tree.stage(v)], v, values)?;
        if values[v] < c - TOUCH_TOL {
            return Ok(NodeCheck {
                holds: false,
                first_violation: Some(v),
            });
        }
    }
    Ok(NodeCheck {
        holds: true,
        first_violation: None,
    })
}

/// Lowers each envelope value by `delta` in turn and checks that the result
/// is no longer a supermartingale dominating `Z`. Reports the first node
/// where lowering goes unnoticed.
pub fn check_minimality(
    result: &SnellResult,
    tree: &FiltrationTree,
    specs: &[RiskSpec],
    delta: f64,
) -> Result<NodeCheck> {
    let z = tree.z();
    for v in 0..tree.len() {
        let mut lowered = result.envelope.clone();
        lowered[v] -= delta;
        let dominates = lowered.iter().zip(z).all(|(e, z)| *e >= z - TOUCH_TOL);
        if dominates && check_supermartingale(&lowered, tree, specs)?.holds {
            return Ok(NodeCheck {
                holds: false,
                first_violation: Some(v),
            });
        }
    }
    Ok(NodeCheck {
        holds: true,
        first_violation: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelayReport {
    pub holds: bool,
    /// First node with `E_low > E_high`.
    pub envelope_violation: Option<usize>,
    /// First leaf whose path has `tau*_low > tau*_high`.
    pub stopping_violation: Option<usize>,
}

/// Ordering of envelopes and of `tau*_0` (MaxStop) when the one-step
/// mappings are ordered. The precondition `rho_low <= rho_high` is checked
/// on every child distribution met during the run and reported as an error.
pub fn check_delay_ordering(
    tree: &FiltrationTree,
    specs_low: &[RiskSpec],
    specs_high: &[RiskSpec],
) -> Result<DelayReport> {
    let low = snell_envelope(tree, specs_low, StopMode::MaxStop)?;
    let high = snell_envelope(tree, specs_high, StopMode::MaxStop)?;
    for v in 0..tree.len() {
        if tree.children(v).is_empty() {
            continue;
        }
        let t = tree.stage(v);
        for values in [&low.envelope, &high.envelope] {
            let l = tree.conditional(&specs_low[t], v, values)?;
            let h = tree.conditional(&specs_high[t], v, values)?;
            if l > h + 1e-12 {
                return Err(Error::OrderingPrecondition { node: v, low: l, high: h });
            }
        }
    }
    let envelope_violation =
        (0..tree.len()).find(|&v| low.envelope[v] > high.envelope[v] + TOUCH_TOL);
    let tau_low = optimal_stopping_time(&low, tree, 0)?;
    let tau_high = optimal_stopping_time(&high, tree, 0)?;
    let stopping_violation = tree
        .leaves()
        .iter()
        .zip(tau_low.stages(tree).into_iter().zip(tau_high.stages(tree)))
        .find(|(_, (a, b))| a > b)
        .map(|(&leaf, _)| leaf);
    Ok(DelayReport {
        holds: envelope_violation.is_none() && stopping_violation.is_none(),
        envelope_violation,
        stopping_violation,
    })
}

/// Envelope computed directly on a Markov lattice: `values[t][i]`.
pub fn snell_envelope_lattice(
    lattice: &MarkovLattice,
    specs: &[RiskSpec],
    mode: StopMode,
) -> Result<Vec<Vec<f64>>> {
    lattice.validate()?;
    let horizon = lattice.horizon();
    if specs.len() != horizon {
        return Err(Error::InvalidArgument(format!(
            "expected {horizon} stage specs, got {}",
            specs.len()
        )));
    }
    let mut env = vec![Vec::new(); horizon + 1];
    env[horizon] = lattice.values[horizon].clone();
    for t in (0..horizon).rev() {
        env[t] = lattice.values[t]
            .iter()
            .zip(&lattice.transitions[t])
            .map(|(&z, row)| {
                let d = crate::risk::DiscreteDistribution::new(env[t + 1].clone(), row.clone())?;
                Ok(mode.combine(z, crate::risk::evaluate(&specs[t], &d)?))
            })
            .collect::<Result<Vec<f64>>>()?;
    }
    Ok(env)
}

/// CSV `node,id,stage,z,envelope,continuation,decision`.
pub fn write_snell_csv<W: Write>(tree: &FiltrationTree, result: &SnellResult, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["node", "id", "stage", "z", "envelope", "continuation", "decision"])?;
    for v in 0..tree.len() {
        w.write_record([
            v.to_string(),
            tree.id(v).to_string(),
            tree.stage(v).to_string(),
            tree.z()[v].to_string(),
            result.envelope[v].to_string(),
            result.continuation[v].map(|c| c.to_string()).unwrap_or_default(),
            if result.stop[v] { "stop" } else { "continue" }.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::uniform_specs;

    /// Root with Z_0 = 1 and two equally likely children Z_1 in {0, 3}.
    fn two_stage() -> FiltrationTree {
        FiltrationTree::from_parents(vec![None, Some(0), Some(0)], vec![1.0, 0.5, 0.5], vec![1.0, 0.0, 3.0])
            .unwrap()
    }

    #[test]
    fn two_stage_expectation() {
        let tree = two_stage();
        let specs = uniform_specs(&RiskSpec::Expectation, 1);
        let r = snell_envelope(&tree, &specs, StopMode::MaxStop).unwrap();
        assert_eq!(r.root_value, 1.5);
        assert!(!r.stop[0]);
        let tau = optimal_stopping_time(&r, &tree, 0).unwrap();
        assert_eq!(tau.stages(&tree), vec![1, 1]);
        assert_eq!(nested_value(&tree, &specs, &tau).unwrap(), 1.5);
    }

    #[test]
    fn two_stage_avar() {
        let tree = two_stage();
        let specs = uniform_specs(&RiskSpec::avar(0.5), 1);
        let r = snell_envelope(&tree, &specs, StopMode::MaxStop).unwrap();
        assert_eq!(r.root_value, 3.0);
        let tau = optimal_stopping_time(&r, &tree, 0).unwrap();
        assert_eq!(nested_value(&tree, &specs, &tau).unwrap(), 3.0);
        let oracle = enumerate_stopping_oracle(&tree, &specs, 0, Sense::Max).unwrap();
        assert_eq!(oracle.value, 3.0);
        assert_eq!(oracle.enumerated, 2);
    }

    #[test]
    fn root_stops_when_payoff_dominates() {
        let tree = FiltrationTree::from_parents(vec![None, Some(0), Some(0)], vec![1.0, 0.5, 0.5], vec![5.0, 0.0, 3.0])
            .unwrap();
        let specs = uniform_specs(&RiskSpec::Expectation, 1);
        let r = snell_envelope(&tree, &specs, StopMode::MaxStop).unwrap();
        let tau = optimal_stopping_time(&r, &tree, 0).unwrap();
        assert_eq!(tau.stages(&tree), vec![0, 0]);
        let last = optimal_stopping_time(&r, &tree, 1).unwrap();
        assert_eq!(last.stages(&tree), vec![1, 1]);
    }

    #[test]
    fn constant_stop_at_zero_gives_z0() {
        let tree = two_stage();
        for spec in [RiskSpec::Expectation, RiskSpec::avar(0.9), RiskSpec::evar(2.0)] {
            let tau = StoppingTime::constant(&tree, 0);
            assert_eq!(nested_value(&tree, &[spec], &tau).unwrap(), 1.0);
        }
    }

    #[test]
    fn increasing_process_is_not_supermartingale() {
        let tree = FiltrationTree::complete(&[2, 2], |_, _| 0.5).unwrap();
        let x: Vec<f64> = (0..tree.len()).map(|v| tree.stage(v) as f64).collect();
        let specs = uniform_specs(&RiskSpec::Expectation, 2);
        let check = check_supermartingale(&x, &tree, &specs).unwrap();
        assert_eq!(check.first_violation, Some(0));
    }

    #[test]
    fn root_optimal_time_may_stop_before_tau_star() {
        // Under AVaR(0.5) only the better child of the root matters, so stopping
        // early below the other child leaves the root value unchanged.
        let tree = FiltrationTree::from_parents(
            vec![None, Some(0), Some(0), Some(1), Some(1), Some(2), Some(2)],
            vec![1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5],
            vec![0.0, 0.0, 0.0, 0.0, 1.0, 4.0, 4.0],
        )
        .unwrap();
        let specs = uniform_specs(&RiskSpec::avar(0.5), 2);
        let r = snell_envelope(&tree, &specs, StopMode::MaxStop).unwrap();
        let tau_star = optimal_stopping_time(&r, &tree, 0).unwrap();
        let mut early = tau_star.flags.clone();
        early[1] = true;
        let early = StoppingTime::new(&tree, early).unwrap();
        assert_eq!(nested_value(&tree, &specs, &early).unwrap(), r.root_value);
        assert!(!early.dominates(&tau_star, &tree));
        let oracle = enumerate_stopping_oracle(&tree, &specs, 0, Sense::Max).unwrap();
        assert!(oracle.optimal_count > 1);
        assert!(oracle.tau.dominates(&tau_star, &tree));
    }

    #[test]
    fn oracle_refuses_huge_trees() {
        let tree = FiltrationTree::complete(&[3, 3, 3, 3], |_, _| 1.0 / 3.0).unwrap();
        let specs = uniform_specs(&RiskSpec::Expectation, 4);
        assert!(matches!(
            enumerate_stopping_oracle(&tree, &specs, 0, Sense::Max),
            Err(Error::EnumerationTooLarge { .. })
        ));
    }
}
