//! Finite filtration trees and stage-indexed Markov lattices.
//!
//! A tree node carries the value of the adapted process `Z_t` and the
//! conditional probability of reaching it from its parent. Nodes are stored
//! stage by stage, so node indices increase with the stage.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::{self, DiscreteDistribution, RiskSpec, RENORMALIZE_TOL};

/// JSON form of a node: `{"id": 3, "parent": 1, "prob": 0.5, "z": 0.2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: u64,
    pub parent: Option<u64>,
    /// Conditional probability given the parent; ignored for the root.
    #[serde(default = "one")]
    pub prob: f64,
    #[serde(default)]
    pub z: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeSpec {
    pub nodes: Vec<NodeSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiltrationTree {
    ids: Vec<u64>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    prob: Vec<f64>,
    z: Vec<f64>,
    stage: Vec<usize>,
    by_stage: Vec<Vec<usize>>,
}

impl FiltrationTree {
    /// Builds and validates a tree from node records in any order.
    pub fn from_spec(spec: &TreeSpec) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidTree(m));
        let n = spec.nodes.len();
        if n == 0 {
            return bad("no nodes".into());
        }
        let mut index = std::collections::HashMap::with_capacity(n);
        for (i, node) in spec.nodes.iter().enumerate() {
            if index.insert(node.id, i).is_some() {
                return bad(format!("duplicate node id {}", node.id));
            }
        }
        let roots: Vec<usize> = (0..n).filter(|&i| spec.nodes[i].parent.is_none()).collect();
        if roots.len() != 1 {
            return bad(format!("expected one root, found {}", roots.len()));
        }
        let mut kids = vec![Vec::new(); n];
        for (i, node) in spec.nodes.iter().enumerate() {
            if let Some(p) = node.parent {
                match index.get(&p) {
                    Some(&pi) => kids[pi].push(i),
                    None => return bad(format!("node {} has unknown parent {p}", node.id)),
                }
            }
        }
        // Breadth-first relabeling puts nodes in stage order.
        let mut order = vec![roots[0]];
        let mut head = 0;
        while head < order.len() {
            let v = order[head];
            order.extend(kids[v].iter().copied());
            head += 1;
        }
        if order.len() != n {
            return bad("nodes not connected to the root (cycle or forest)".into());
        }
        let mut new_of = vec![0; n];
        for (new, &old) in order.iter().enumerate() {
            new_of[old] = new;
        }
        let parents = order
            .iter()
            .map(|&old| spec.nodes[old].parent.map(|p| new_of[index[&p]]))
            .collect();
        let probs = order.iter().map(|&old| spec.nodes[old].prob).collect();
        let z = order.iter().map(|&old| spec.nodes[old].z).collect();
        let ids = order.iter().map(|&old| spec.nodes[old].id).collect();
        Self::from_parts(ids, parents, probs, z)
    }

    /// Nodes must be listed so that every parent precedes its children.
    pub fn from_parents(parents: Vec<Option<usize>>, probs: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let ids = (0..parents.len() as u64).collect();
        Self::from_parts(ids, parents, probs, z)
    }

    fn from_parts(
        ids: Vec<u64>,
        parent: Vec<Option<usize>>,
        mut prob: Vec<f64>,
        z: Vec<f64>,
    ) -> Result<Self> {
        let bad = |m: String| Err(Error::InvalidTree(m));
        let n = parent.len();
        if n == 0 || prob.len() != n || z.len() != n {
            return bad("parents, probabilities and values must have equal nonzero length".into());
        }
        if parent[0].is_some() || parent[1..].iter().any(|p| p.is_none()) {
            return bad("node 0 must be the only root".into());
        }
        let mut stage = vec![0; n];
        let mut children = vec![Vec::new(); n];
        for i in 1..n {
            let p = parent[i].unwrap();
            if p >= i {
                return bad(format!("parent {p} of node {i} is not listed before it"));
            }
            stage[i] = stage[p] + 1;
            children[p].push(i);
        }
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return bad(format!("non-finite value at node {}", ids[i]));
        }
        let horizon = stage.iter().copied().max().unwrap();
        for i in 0..n {
            if children[i].is_empty() {
                if stage[i] != horizon {
                    return bad(format!(
                        "leaf {} at stage {} but horizon is {horizon}",
                        ids[i], stage[i]
                    ));
                }
                continue;
            }
            let kids = &children[i];
            if kids.iter().any(|&c| !prob[c].is_finite() || prob[c] < 0.0) {
                return bad(format!("negative probability below node {}", ids[i]));
            }
            let total: f64 = kids.iter().map(|&c| prob[c]).sum();
            if (total - 1.0).abs() >= RENORMALIZE_TOL {
                return bad(format!(
                    "child probabilities of node {} sum to {total}",
                    ids[i]
                ));
            }
            for &c in kids {
                prob[c] /= total;
            }
        }
        prob[0] = 1.0;
        let mut by_stage = vec![Vec::new(); horizon + 1];
        for i in 0..n {
            by_stage[stage[i]].push(i);
        }
        Ok(Self {
            ids,
            parent,
            children,
            prob,
            z,
            stage,
            by_stage,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_spec(&serde_json::from_str(text)?)
    }

    pub fn to_spec(&self) -> TreeSpec {
        TreeSpec {
            nodes: (0..self.len())
                .map(|i| NodeSpec {
                    id: self.ids[i],
                    parent: self.parent[i].map(|p| self.ids[p]),
                    prob: self.prob[i],
                    z: self.z[i],
                })
                .collect(),
        }
    }

    /// Complete tree with `branching[t]` children per stage-`t` node.
    pub fn complete(branching: &[usize], probs: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut parents = vec![None];
        let mut p = vec![1.0];
        let mut frontier = vec![0];
        for &b in branching {
            if b == 0 {
                return Err(Error::InvalidTree("zero branching".into()));
            }
            let mut next = Vec::with_capacity(frontier.len() * b);
            for &node in &frontier {
                for k in 0..b {
                    next.push(parents.len());
                    parents.push(Some(node));
                    p.push(probs(node, k));
                }
            }
            frontier = next;
        }
        let n = parents.len();
        Self::from_parents(parents, p, vec![0.0; n])
    }

    /// Complete tree of the given horizon and branching, random child
    /// probabilities (bounded away from zero) and values uniform in `[lo, hi]`.
    pub fn random<R: Rng>(rng: &mut R, horizon: usize, branching: usize, lo: f64, hi: f64) -> Self {
        let mut tree =
            Self::complete(&vec![branching; horizon], |_, _| 1.0 / branching as f64).expect("valid shape");
        for i in 0..tree.len() {
            tree.z[i] = rng.random_range(lo..=hi);
        }
        for i in 0..tree.len() {
            let kids = tree.children[i].clone();
            if kids.is_empty() {
                continue;
            }
            let w: Vec<f64> = kids.iter().map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = w.iter().sum();
            for (c, wi) in kids.iter().zip(w) {
                tree.prob[*c] = wi / s;
            }
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.by_stage.len() - 1
    }

    pub fn stage(&self, node: usize) -> usize {
        self.stage[node]
    }

    pub fn nodes_at(&self, t: usize) -> &[usize] {
        &self.by_stage[t]
    }

    pub fn children(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn parent(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    /// Conditional probability of `node` given its parent.
    pub fn prob(&self, node: usize) -> f64 {
        self.prob[node]
    }

    pub fn id(&self, node: usize) -> u64 {
        self.ids[node]
    }

    /// The process `Z` (one value per node).
    pub fn z(&self) -> &[f64] {
        &self.z
    }

    /// Same tree carrying another process.
    pub fn with_z(&self, z: Vec<f64>) -> Result<Self> {
        if z.len() != self.len() {
            return Err(Error::InvalidTree(format!(
                "{} values for {} nodes",
                z.len(),
                self.len()
            )));
        }
        Ok(Self { z, ..self.clone() })
    }

    pub fn leaves(&self) -> &[usize] {
        self.nodes_at(self.horizon())
    }

    /// Nodes from the root to `node`, inclusive.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut v = node;
        while let Some(p) = self.parent[v] {
            path.push(p);
            v = p;
        }
        path.reverse();
        path
    }

    /// Unconditional probability of reaching `node`.
    pub fn path_prob(&self, node: usize) -> f64 {
        self.path_to(node).iter().map(|&v| self.prob[v]).product()
    }

    /// Ancestor of `node` at stage `t <= stage(node)`.
    pub fn ancestor_at(&self, node: usize, t: usize) -> usize {
        let mut v = node;
        while self.stage[v] > t {
            v = self.parent[v].unwrap();
        }
        v
    }

    /// Distribution of `values` over the children of `node`.
    pub fn child_distribution(&self, node: usize, values: &[f64]) -> Result<DiscreteDistribution> {
        let kids = &self.children[node];
        DiscreteDistribution::new(
            kids.iter().map(|&c| values[c]).collect(),
            kids.iter().map(|&c| self.prob[c]).collect(),
        )
    }

    /// `rho_{t|F_t}(values)` at a non-leaf node.
    pub fn conditional(&self, spec: &RiskSpec, node: usize, values: &[f64]) -> Result<f64> {
        risk::evaluate(spec, &self.child_distribution(node, values)?)
    }

    /// Checks that `specs` holds one spec per transition stage.
    pub fn check_specs(&self, specs: &[RiskSpec]) -> Result<()> {
        if specs.len() != self.horizon() {
            return Err(Error::InvalidArgument(format!(
                "expected {} stage specs, got {}",
                self.horizon(),
                specs.len()
            )));
        }
        specs.iter().try_for_each(RiskSpec::validate)
    }
}

/// Expands a single spec to one per stage.
pub fn uniform_specs(spec: &RiskSpec, horizon: usize) -> Vec<RiskSpec> {
    vec![spec.clone(); horizon]
}

/// Stage-indexed Markov chain with a payoff per state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarkovLattice {
    /// `values[t][i]` is the process value in state `i` at stage `t`; stage 0 has one state.
    pub values: Vec<Vec<f64>>,
    /// `transitions[t][i][j]` is the probability of moving from state `i` at `t` to `j` at `t+1`.
    pub transitions: Vec<Vec<Vec<f64>>>,
}

impl MarkovLattice {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidTree(m));
        let horizon = self.horizon();
        if self.values.is_empty() || self.values[0].len() != 1 {
            return bad("stage 0 must have exactly one state".into());
        }
        if self.transitions.len() != horizon {
            return bad("need one transition matrix per stage".into());
        }
        for (t, m) in self.transitions.iter().enumerate() {
            if m.len() != self.values[t].len() {
                return bad(format!("transition matrix {t} has wrong row count"));
            }
            for row in m {
                if row.len() != self.values[t + 1].len() {
                    return bad(format!("transition matrix {t} has wrong column count"));
                }
                if row.iter().any(|p| !(p.is_finite() && *p >= 0.0))
                    || (row.iter().sum::<f64>() - 1.0).abs() >= RENORMALIZE_TOL
                {
                    return bad(format!("row of transition matrix {t} is not a distribution"));
                }
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.values.len().saturating_sub(1)
    }

    /// Random lattice with `states` states per stage after the root, dense
    /// random transitions and values uniform in `[lo, hi]`.
    pub fn random<R: Rng>(rng: &mut R, horizon: usize, states: usize, lo: f64, hi: f64) -> Self {
        let mut values = vec![vec![rng.random_range(lo..=hi)]];
        let mut transitions = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            values.push((0..states).map(|_| rng.random_range(lo..=hi)).collect());
        }
        for level in values.iter().take(horizon) {
            let rows = (0..level.len())
                .map(|_| {
                    let w: Vec<f64> = (0..states).map(|_| rng.random_range(0.05..1.0)).collect();
                    let s: f64 = w.iter().sum();
                    w.into_iter().map(|x| x / s).collect()
                })
                .collect();
            transitions.push(rows);
        }
        Self {
            values,
            transitions,
        }
    }

    /// Unrolls the lattice into a tree (zero-probability edges are kept).
    /// Returns the tree and the lattice state of each tree node.
    pub fn to_tree(&self) -> Result<(FiltrationTree, Vec<usize>)> {
        self.validate()?;
        let mut parents = vec![None];
        let mut probs = vec![1.0];
        let mut z = vec![self.values[0][0]];
        let mut state = vec![0];
        let mut frontier = vec![0usize];
        for t in 0..self.horizon() {
            let mut next = Vec::new();
            for &node in &frontier {
                for (j, &p) in self.transitions[t][state[node]].iter().enumerate() {
                    next.push(parents.len());
                    parents.push(Some(node));
                    probs.push(p);
                    z.push(self.values[t + 1][j]);
                    state.push(j);
                }
            }
            frontier = next;
        }
        Ok((FiltrationTree::from_parents(parents, probs, z)?, state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_roundtrip_and_relabeling() {
        let text = r#"{"nodes":[
            {"id":7,"parent":3,"prob":0.25,"z":4},
            {"id":3,"parent":null,"z":1},
            {"id":9,"parent":3,"prob":0.75,"z":-2}]}"#;
        let tree = FiltrationTree::from_json(text).unwrap();
        assert_eq!(tree.horizon(), 1);
        assert_eq!(tree.id(0), 3);
        assert_eq!(tree.z()[0], 1.0);
        let d = tree.child_distribution(0, tree.z()).unwrap();
        assert_eq!(d.atoms(), &[4.0, -2.0]);
        let again = FiltrationTree::from_spec(&tree.to_spec()).unwrap();
        assert_eq!(again, tree);
    }

    #[test]
    fn rejects_malformed_trees() {
        let two_roots = r#"{"nodes":[{"id":0,"parent":null},{"id":1,"parent":null}]}"#;
        assert!(FiltrationTree::from_json(two_roots).is_err());
        let ragged = r#"{"nodes":[{"id":0,"parent":null},{"id":1,"parent":0},
            {"id":2,"parent":0},{"id":3,"parent":1}]}"#;
        assert!(matches!(FiltrationTree::from_json(ragged), Err(Error::InvalidTree(_))));
        let bad_probs = r#"{"nodes":[{"id":0,"parent":null},{"id":1,"parent":0,"prob":0.4},
            {"id":2,"parent":0,"prob":0.4}]}"#;
        assert!(FiltrationTree::from_json(bad_probs).is_err());
        let cycle = r#"{"nodes":[{"id":0,"parent":null},{"id":1,"parent":2},{"id":2,"parent":1}]}"#;
        assert!(FiltrationTree::from_json(cycle).is_err());
    }

    #[test]
    fn lattice_expansion_shape() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let lat = MarkovLattice::random(&mut rng, 3, 2, -1.0, 1.0);
        let (tree, state) = lat.to_tree().unwrap();
        assert_eq!(tree.len(), 1 + 2 + 4 + 8);
        for &leaf in tree.leaves() {
            assert_eq!(tree.z()[leaf], lat.values[3][state[leaf]]);
        }
        let total: f64 = tree.leaves().iter().map(|&l| tree.path_prob(l)).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }
}
