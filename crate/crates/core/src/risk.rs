//! Law-invariant coherent risk measures on finite discrete distributions.
//!
//! Every conditional mapping used elsewhere in the crate is one of these
//! measures evaluated on a node's child distribution. Convention: larger
//! atoms are worse (or better, for a maximizing stopper); `AVaR(alpha)`
//! averages the upper `1 - alpha` probability tail, so `AVaR(0)` is the mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for probability comparisons.
pub const PROB_TOL: f64 = 1e-12;
/// Probability vectors whose sum is off by less than this are renormalized.
pub const RENORMALIZE_TOL: f64 = 1e-9;

const GOLDEN: f64 = 0.618_033_988_749_894_9;

/// Finite list of atoms with their probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteDistribution {
    atoms: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscreteDistribution {
    pub fn new(atoms: Vec<f64>, probs: Vec<f64>) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::InvalidDistribution("no atoms".into()));
        }
        if atoms.len() != probs.len() {
            return Err(Error::InvalidDistribution(format!(
                "{} atoms but {} probabilities",
                atoms.len(),
                probs.len()
            )));
        }
        if let Some(z) = atoms.iter().find(|z| !z.is_finite()) {
            return Err(Error::InvalidDistribution(format!("non-finite atom {z}")));
        }
        let mut probs = probs;
        for p in probs.iter_mut() {
            if !p.is_finite() || *p < -PROB_TOL {
                return Err(Error::InvalidDistribution(format!("invalid probability {p}")));
            }
            if *p < 0.0 {
                *p = 0.0;
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() >= RENORMALIZE_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {total}"
            )));
        }
        if total != 1.0 {
            for p in probs.iter_mut() {
                *p /= total;
            }
        }
        Ok(Self { atoms, probs })
    }

    /// Equally weighted atoms.
    pub fn uniform(atoms: Vec<f64>) -> Result<Self> {
        let n = atoms.len();
        if n == 0 {
            return Err(Error::InvalidDistribution("no atoms".into()));
        }
        let probs = vec![1.0 / n as f64; n];
        Self::new(atoms, probs)
    }

    /// Point mass.
    pub fn degenerate(value: f64) -> Result<Self> {
        Self::new(vec![value], vec![1.0])
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().zip(&self.probs).map(|(z, p)| z * p).sum()
    }

    /// Largest atom carrying positive probability.
    pub fn max(&self) -> f64 {
        self.support().fold(f64::NEG_INFINITY, |m, (z, _)| m.max(z))
    }

    /// Smallest atom carrying positive probability.
    pub fn min(&self) -> f64 {
        self.support().fold(f64::INFINITY, |m, (z, _)| m.min(z))
    }

    fn support(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.atoms
            .iter()
            .zip(&self.probs)
            .filter(|(_, &p)| p > 0.0)
            .map(|(&z, &p)| (z, p))
    }

    /// Same probabilities, atoms transformed by `f`.
    pub fn map_atoms(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            atoms: self.atoms.iter().map(|&z| f(z)).collect(),
            probs: self.probs.clone(),
        }
    }

    pub fn negated(&self) -> Self {
        self.map_atoms(|z| -z)
    }

    /// Same probabilities with new atoms.
    pub fn with_atoms(&self, atoms: Vec<f64>) -> Result<Self> {
        Self::new(atoms, self.probs.clone())
    }
}

/// One-step risk mapping, serialized as `{"kind": ..., parameters...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum RiskSpec {
    Expectation,
    #[serde(rename = "AVaR")]
    AVaR { alpha: f64 },
    #[serde(rename = "EVaR")]
    EVaR { beta: f64 },
    MeanAVaR { lambda: f64, alpha: f64 },
    Concave { inner: Box<RiskSpec> },
}

impl RiskSpec {
    pub fn avar(alpha: f64) -> Self {
        RiskSpec::AVaR { alpha }
    }

    pub fn evar(beta: f64) -> Self {
        RiskSpec::EVaR { beta }
    }

    pub fn mean_avar(lambda: f64, alpha: f64) -> Self {
        RiskSpec::MeanAVaR { lambda, alpha }
    }

    /// Concave counterpart `Z -> -inner(-Z)`.
    pub fn concave(inner: RiskSpec) -> Self {
        RiskSpec::Concave {
            inner: Box::new(inner),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            RiskSpec::Expectation => Ok(()),
            RiskSpec::AVaR { alpha } => check_alpha(*alpha),
            RiskSpec::EVaR { beta } => {
                if beta.is_finite() && *beta >= 0.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidRiskSpec(format!("beta must be >= 0, got {beta}")))
                }
            }
            RiskSpec::MeanAVaR { lambda, alpha } => {
                if !(0.0..=1.0).contains(lambda) {
                    return Err(Error::InvalidRiskSpec(format!(
                        "lambda must lie in [0, 1], got {lambda}"
                    )));
                }
                check_alpha(*alpha)
            }
            RiskSpec::Concave { inner } => {
                if matches!(**inner, RiskSpec::Concave { .. }) {
                    return Err(Error::InvalidRiskSpec(
                        "concave counterpart cannot be nested".into(),
                    ));
                }
                inner.validate()
            }
        }
    }

    /// Polyhedral (finite dual set) and convex, so supporting cuts exist.
    pub fn is_cut_compatible(&self) -> bool {
        matches!(
            self,
            RiskSpec::Expectation | RiskSpec::AVaR { .. } | RiskSpec::MeanAVaR { .. }
        )
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidRiskSpec(format!(
            "alpha must lie in [0, 1), got {alpha}"
        )))
    }
}

/// Evaluates `spec` on `dist`.
pub fn evaluate(spec: &RiskSpec, dist: &DiscreteDistribution) -> Result<f64> {
    spec.validate()?;
    eval_unchecked(spec, dist)
}

fn eval_unchecked(spec: &RiskSpec, dist: &DiscreteDistribution) -> Result<f64> {
    match spec {
        RiskSpec::Expectation => Ok(dist.mean()),
        RiskSpec::AVaR { alpha } => Ok(avar(*alpha, dist)),
        RiskSpec::EVaR { beta } => evar(*beta, dist),
        RiskSpec::MeanAVaR { lambda, alpha } => {
            Ok((1.0 - lambda) * dist.mean() + lambda * avar(*alpha, dist))
        }
        RiskSpec::Concave { inner } => Ok(-eval_unchecked(inner, &dist.negated())?),
    }
}

/// Atom indices sorted from the largest atom down; ties keep input order.
fn descending_order(atoms: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..atoms.len()).collect();
    idx.sort_by(|&a, &b| atoms[b].total_cmp(&atoms[a]));
    idx
}

/// Probability mass each atom contributes to the upper `tail` of the law.
fn tail_allocation(tail: f64, dist: &DiscreteDistribution) -> Vec<f64> {
    let mut take = vec![0.0; dist.len()];
    let mut remaining = tail;
    for i in descending_order(dist.atoms()) {
        if remaining <= 0.0 {
            break;
        }
        let t = dist.probs()[i].min(remaining);
        take[i] = t;
        remaining -= t;
    }
    take
}

fn avar(alpha: f64, dist: &DiscreteDistribution) -> f64 {
    if alpha == 0.0 {
        return dist.mean();
    }
    let tail = 1.0 - alpha;
    let take = tail_allocation(tail, dist);
    let s: f64 = take.iter().zip(dist.atoms()).map(|(t, z)| t * z).sum();
    s / tail
}

/// Maximizing probability weights of the AVaR dual set at `dist`.
///
/// The upper tail gets weight `p_i / (1 - alpha)`; the atom straddling the
/// `alpha`-quantile receives the fractional remainder.
pub fn avar_dual_weights(alpha: f64, dist: &DiscreteDistribution) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if alpha == 0.0 {
        return Ok(dist.probs().to_vec());
    }
    let tail = 1.0 - alpha;
    Ok(tail_allocation(tail, dist)
        .into_iter()
        .map(|t| t / tail)
        .collect())
}

/// Probability weights `q` with `evaluate(spec, dist) == sum q_i z_i`, for
/// the polyhedral specs that admit supporting cuts.
pub fn dual_weights(spec: &RiskSpec, dist: &DiscreteDistribution) -> Result<Vec<f64>> {
    spec.validate()?;
    match spec {
        RiskSpec::Expectation => Ok(dist.probs().to_vec()),
        RiskSpec::AVaR { alpha } => avar_dual_weights(*alpha, dist),
        RiskSpec::MeanAVaR { lambda, alpha } => {
            let w = avar_dual_weights(*alpha, dist)?;
            Ok(dist
                .probs()
                .iter()
                .zip(w)
                .map(|(p, q)| (1.0 - lambda) * p + lambda * q)
                .collect())
        }
        other => Err(Error::NotCutCompatible(format!("{other:?}"))),
    }
}

/// `inf_{u>0} (beta + log E[exp(uZ)]) / u`, minimized in `t = 1/u` where the
/// objective `beta t + t log E exp(Z/t)` is convex.
fn evar(beta: f64, dist: &DiscreteDistribution) -> Result<f64> {
    if beta == 0.0 {
        return Ok(dist.mean());
    }
    let zmax = dist.max();
    let zmin = dist.min();
    if zmax == zmin {
        return Ok(zmax);
    }
    let mean = dist.mean();
    // Shifted atoms are <= 0, so the exponentials cannot overflow.
    let shifted: Vec<(f64, f64)> = dist
        .support()
        .map(|(z, p)| (z - zmax, p))
        .collect();
    let objective = |t: f64| -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        let s: f64 = shifted.iter().map(|(d, p)| p * (d / t).exp()).sum();
        beta * t + t * s.ln()
    };
    // Jensen: objective >= beta t + (mean - zmax), so beyond this bound it
    // exceeds its value 0 at t = 0.
    let t_hi = (zmax - mean).max(0.0) / beta;
    let (mut a, mut b) = (0.0_f64, t_hi);
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (objective(c), objective(d));
    let tol = 1e-13 * t_hi.max(f64::MIN_POSITIVE);
    for _ in 0..200 {
        if b - a <= tol {
            break;
        }
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = objective(d);
        }
    }
    let best = fc.min(fd).min(objective(0.5 * (a + b))).min(0.0);
    let value = zmax + best;
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::EvarScaling)
    }
}

/// Position of an atom in the frequency ranking used by the concave
/// reweighting rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailRank {
    /// Among the `floor(alpha N)` most frequent atoms.
    Top,
    /// The `(floor(alpha N) + 1)`-st most frequent atom.
    Boundary,
    Rest,
}

fn scaled_count(alpha: f64, n: usize) -> f64 {
    let an = alpha * n as f64;
    let rounded = an.round();
    if (an - rounded).abs() < 1e-9 {
        rounded
    } else {
        an
    }
}

/// Ranks atoms by descending frequency (ties go to the lower index).
pub fn tail_ranks(frequencies: &[f64], alpha: f64) -> Result<Vec<TailRank>> {
    let n = frequencies.len();
    if n == 0 {
        return Err(Error::InvalidArgument("no atoms to rank".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!("alpha must lie in (0, 1], got {alpha}")));
    }
    let k = scaled_count(alpha, n).floor() as usize;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| frequencies[b].total_cmp(&frequencies[a]));
    let mut ranks = vec![TailRank::Rest; n];
    for (pos, &i) in idx.iter().enumerate() {
        ranks[i] = match pos.cmp(&k) {
            std::cmp::Ordering::Less => TailRank::Top,
            std::cmp::Ordering::Equal => TailRank::Boundary,
            std::cmp::Ordering::Greater => TailRank::Rest,
        };
    }
    Ok(ranks)
}

/// Probabilities that shift mass `lambda` onto the `alpha`-fraction of
/// ranked atoms, starting from equal weights `1/N`.
pub fn reweight_concave(lambda: f64, alpha: f64, ranks: &[TailRank]) -> Result<Vec<f64>> {
    let n = ranks.len();
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidArgument(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if !(alpha > 0.0 && alpha <= 1.0) || n == 0 {
        return Err(Error::InvalidArgument(format!(
            "alpha * N must be positive (alpha={alpha}, N={n})"
        )));
    }
    let an = scaled_count(alpha, n);
    let k = an.floor();
    let tops = ranks.iter().filter(|r| **r == TailRank::Top).count();
    let boundaries = ranks.iter().filter(|r| **r == TailRank::Boundary).count();
    if tops as f64 != k || boundaries > 1 || (an > k && boundaries != 1) {
        return Err(Error::InvalidArgument(format!(
            "expected {k} top atoms and one boundary atom, got {tops} and {boundaries}"
        )));
    }
    let base = (1.0 - lambda) / n as f64;
    let top = base + lambda / an;
    let boundary = base + lambda * (an - k) / an;
    Ok(ranks
        .iter()
        .map(|r| match r {
            TailRank::Top => top,
            TailRank::Boundary => boundary,
            TailRank::Rest => base,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn quarter(atoms: &[f64]) -> DiscreteDistribution {
        DiscreteDistribution::uniform(atoms.to_vec()).unwrap()
    }

    /// Rockafellar-Uryasev variational form; the minimizing u is an atom.
    fn avar_variational(alpha: f64, d: &DiscreteDistribution) -> f64 {
        d.atoms()
            .iter()
            .map(|&u| {
                let excess: f64 = d
                    .atoms()
                    .iter()
                    .zip(d.probs())
                    .map(|(z, p)| p * (z - u).max(0.0))
                    .sum();
                u + excess / (1.0 - alpha)
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Vertex enumeration of max sum q z s.t. 0 <= q <= p/(1-alpha), sum q = 1.
    fn avar_lp_oracle(alpha: f64, d: &DiscreteDistribution) -> (f64, Vec<f64>) {
        let n = d.len();
        let ub: Vec<f64> = d.probs().iter().map(|p| p / (1.0 - alpha)).collect();
        let mut best = (f64::NEG_INFINITY, vec![]);
        let mut code = vec![0u8; n];
        loop {
            // 0 = at zero, 1 = at upper bound, 2 = free (at most one)
            if code.iter().filter(|&&c| c == 2).count() <= 1 {
                let mut q: Vec<f64> = code
                    .iter()
                    .zip(&ub)
                    .map(|(&c, &u)| if c == 1 { u } else { 0.0 })
                    .collect();
                let fixed: f64 = q.iter().sum();
                let feasible = match code.iter().position(|&c| c == 2) {
                    Some(j) => {
                        q[j] = 1.0 - fixed;
                        q[j] >= -1e-12 && q[j] <= ub[j] + 1e-12
                    }
                    None => (fixed - 1.0).abs() < 1e-12,
                };
                if feasible {
                    let v: f64 = q.iter().zip(d.atoms()).map(|(q, z)| q * z).sum();
                    if v > best.0 + 1e-14 {
                        best = (v, q);
                    }
                }
            }
            let mut i = 0;
            loop {
                if i == n {
                    return best;
                }
                code[i] += 1;
                if code[i] < 3 {
                    break;
                }
                code[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn avar_zero_is_mean() {
        let d = quarter(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(evaluate(&RiskSpec::avar(0.0), &d).unwrap(), 2.5);
    }

    #[test]
    fn avar_half_averages_upper_half() {
        let d = quarter(&[1.0, 2.0, 3.0, 4.0]);
        assert!((evaluate(&RiskSpec::avar(0.5), &d).unwrap() - 3.5).abs() < 1e-15);
        assert!((avar_variational(0.5, &d) - 3.5).abs() < 1e-15);
    }

    #[test]
    fn evar_of_constant() {
        let d = DiscreteDistribution::new(vec![2.5, 2.5, 2.5], vec![0.2, 0.3, 0.5]).unwrap();
        for beta in [0.0, 0.1, 1.0, 10.0] {
            assert_eq!(evaluate(&RiskSpec::evar(beta), &d).unwrap(), 2.5);
        }
    }

    #[test]
    fn evar_matches_gaussian_closed_form() {
        use statrs::distribution::{ContinuousCDF, Normal};
        let (mu, sigma, n) = (0.3, 0.7, 20_001);
        let normal = Normal::new(mu, sigma).unwrap();
        let atoms: Vec<f64> = (0..n)
            .map(|i| normal.inverse_cdf((i as f64 + 0.5) / n as f64))
            .collect();
        let d = DiscreteDistribution::uniform(atoms).unwrap();
        for beta in [0.05_f64, 0.5, 1.0] {
            let exact = mu + sigma * (2.0 * beta).sqrt();
            let v = evaluate(&RiskSpec::evar(beta), &d).unwrap();
            assert!((v - exact).abs() < 5e-3, "beta={beta}: {v} vs {exact}");
        }
    }

    #[test]
    fn evar_two_point_against_grid_scan() {
        let d = DiscreteDistribution::new(vec![-1.0, 1.0], vec![0.5, 0.5]).unwrap();
        let beta = 0.4;
        // Brute-force scan of the u-form of the definition.
        let scan = (1..200_000)
            .map(|k| k as f64 * 1e-4)
            .map(|u| (beta + (0.5 * (-u).exp() + 0.5 * u.exp()).ln()) / u)
            .fold(f64::INFINITY, f64::min);
        let v = evaluate(&RiskSpec::evar(beta), &d).unwrap();
        assert!(v <= scan + 1e-12);
        assert!((v - scan).abs() < 1e-7);
    }

    #[test]
    fn dual_weights_examples() {
        let d = quarter(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(avar_dual_weights(0.5, &d).unwrap(), vec![0.0, 0.0, 0.5, 0.5]);
        assert_eq!(avar_dual_weights(0.0, &d).unwrap(), d.probs().to_vec());
        assert_eq!(avar_dual_weights(0.75, &d).unwrap(), vec![0.0, 0.0, 0.0, 1.0]);
        let (v, q) = avar_lp_oracle(0.5, &d);
        assert!((v - 3.5).abs() < 1e-14);
        assert_eq!(q, vec![0.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn fractional_quantile_atom() {
        let d = DiscreteDistribution::new(vec![0.0, 5.0, 1.0], vec![0.5, 0.2, 0.3]).unwrap();
        let w = avar_dual_weights(0.6, &d).unwrap();
        // tail 0.4 = all of atom 5 (0.2) + 0.2 of atom 1
        assert!((w[1] - 0.5).abs() < 1e-15 && (w[2] - 0.5).abs() < 1e-15 && w[0] == 0.0);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(DiscreteDistribution::new(vec![], vec![]).is_err());
        assert!(DiscreteDistribution::new(vec![1.0], vec![0.5]).is_err());
        assert!(DiscreteDistribution::new(vec![1.0, 2.0], vec![1.5, -0.5]).is_err());
        let d = DiscreteDistribution::new(vec![1.0, 2.0], vec![0.5, 0.5 + 1e-10]).unwrap();
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let one = quarter(&[1.0]);
        assert!(evaluate(&RiskSpec::avar(1.0), &one).is_err());
        assert!(evaluate(&RiskSpec::evar(-1.0), &one).is_err());
        assert!(evaluate(&RiskSpec::mean_avar(1.5, 0.1), &one).is_err());
        let nested = RiskSpec::concave(RiskSpec::concave(RiskSpec::Expectation));
        assert!(evaluate(&nested, &one).is_err());
        assert!(dual_weights(&RiskSpec::evar(1.0), &one).is_err());
    }

    #[test]
    fn spec_json_shape() {
        let spec = RiskSpec::concave(RiskSpec::mean_avar(0.2, 0.05));
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"{"kind":"Concave","inner":{"kind":"MeanAVaR","lambda":0.2,"alpha":0.05}}"#
        );
        let back: RiskSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, spec);
        assert!(serde_json::from_str::<RiskSpec>(r#"{"kind":"AVaR","alpha":0.1,"beta":1}"#).is_err());
    }

    #[test]
    fn reweight_examples() {
        let freq: Vec<f64> = (0..100).map(|i| if i % 20 == 3 { 50.0 } else { 1.0 }).collect();
        let ranks = tail_ranks(&freq, 0.05).unwrap();
        let w = reweight_concave(0.2, 0.05, &ranks).unwrap();
        for (i, wi) in w.iter().enumerate() {
            let expect = if i % 20 == 3 { 0.048 } else { 0.008 };
            assert!((wi - expect).abs() < 1e-15);
        }
        let w0 = reweight_concave(0.0, 0.05, &ranks).unwrap();
        assert!(w0.iter().all(|w| (w - 0.01).abs() < 1e-16));
        let r = tail_ranks(&[4.0, 3.0, 2.0, 1.0], 0.5).unwrap();
        assert_eq!(reweight_concave(1.0, 0.5, &r).unwrap(), vec![0.5, 0.5, 0.0, 0.0]);
        assert!(reweight_concave(0.2, 0.0, &r).is_err());
    }

    #[test]
    fn fractional_boundary_weight() {
        // alpha N = 2.5: two top atoms, one boundary atom with half the tail weight.
        let ranks = tail_ranks(&[9.0, 1.0, 8.0, 7.0, 0.0], 0.5).unwrap();
        assert_eq!(
            ranks,
            vec![TailRank::Top, TailRank::Rest, TailRank::Top, TailRank::Boundary, TailRank::Rest]
        );
        let w = reweight_concave(1.0, 0.5, &ranks).unwrap();
        assert!((w[0] - 0.4).abs() < 1e-15 && (w[3] - 0.2).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn arb_dist() -> impl Strategy<Value = DiscreteDistribution> {
        (1usize..7).prop_flat_map(|n| {
            (
                prop::collection::vec(-5.0f64..5.0, n),
                prop::collection::vec(0.01f64..1.0, n),
            )
                .prop_map(|(a, w)| {
                    let s: f64 = w.iter().sum();
                    DiscreteDistribution::new(a, w.iter().map(|x| x / s).collect()).unwrap()
                })
        })
    }

    fn arb_spec() -> impl Strategy<Value = RiskSpec> {
        let base = prop_oneof![
            Just(RiskSpec::Expectation),
            (0.0f64..0.95).prop_map(RiskSpec::avar),
            (0.0f64..3.0).prop_map(RiskSpec::evar),
            (0.0f64..=1.0, 0.0f64..0.95).prop_map(|(l, a)| RiskSpec::mean_avar(l, a)),
        ];
        (base, any::<bool>()).prop_map(|(s, c)| if c { RiskSpec::concave(s) } else { s })
    }

    proptest! {
        #[test]
        fn monotone(spec in arb_spec(), d in arb_dist(), bumps in prop::collection::vec(0.0f64..1.0, 7)) {
            let up = d.with_atoms(d.atoms().iter().zip(&bumps).map(|(z, b)| z + b).collect()).unwrap();
            prop_assert!(evaluate(&spec, &up).unwrap() >= evaluate(&spec, &d).unwrap() - 1e-10);
        }

        #[test]
        fn translation_equivariant(spec in arb_spec(), d in arb_dist(), c in -10.0f64..10.0) {
            let shifted = d.map_atoms(|z| z + c);
            let lhs = evaluate(&spec, &shifted).unwrap();
            let rhs = evaluate(&spec, &d).unwrap() + c;
            prop_assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }

        #[test]
        fn positively_homogeneous(spec in arb_spec(), d in arb_dist(), t in 0.0f64..5.0) {
            let scaled = d.map_atoms(|z| t * z);
            let lhs = evaluate(&spec, &scaled).unwrap();
            let rhs = t * evaluate(&spec, &d).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }

        #[test]
        fn sandwich_and_ordering(d in arb_dist(), a1 in 0.0f64..0.95, a2 in 0.0f64..0.95, b1 in 0.0f64..3.0, b2 in 0.0f64..3.0) {
            let (lo_a, hi_a) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let (lo_b, hi_b) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let mean = d.mean();
            let av_lo = evaluate(&RiskSpec::avar(lo_a), &d).unwrap();
            let av_hi = evaluate(&RiskSpec::avar(hi_a), &d).unwrap();
            prop_assert!(mean <= av_lo + 1e-12 && av_lo <= av_hi + 1e-12 && av_hi <= d.max() + 1e-12);
            prop_assert!((evaluate(&RiskSpec::evar(0.0), &d).unwrap() - mean).abs() < 1e-15);
            let ev_lo = evaluate(&RiskSpec::evar(lo_b), &d).unwrap();
            let ev_hi = evaluate(&RiskSpec::evar(hi_b), &d).unwrap();
            prop_assert!(mean <= ev_lo + 1e-12 && ev_lo <= ev_hi + 1e-10 && ev_hi <= d.max() + 1e-12);
        }

        #[test]
        fn concave_below_convex(spec in arb_spec(), d in arb_dist()) {
            let inner = match spec { RiskSpec::Concave { inner } => *inner, s => s };
            let convex = evaluate(&inner, &d).unwrap();
            let concave = evaluate(&RiskSpec::concave(inner.clone()), &d).unwrap();
            let direct = -evaluate(&inner, &d.negated()).unwrap();
            prop_assert_eq!(concave, direct);
            prop_assert!(concave <= convex + 1e-10);
        }

        #[test]
        fn dual_weights_consistent(d in arb_dist(), alpha in 0.0f64..0.99) {
            let w = avar_dual_weights(alpha, &d).unwrap();
            let via_weights: f64 = w.iter().zip(d.atoms()).map(|(q, z)| q * z).sum();
            let direct = evaluate(&RiskSpec::avar(alpha), &d).unwrap();
            prop_assert!((via_weights - direct).abs() < 1e-10);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-10);
            for (q, p) in w.iter().zip(d.probs()) {
                prop_assert!(*q >= 0.0 && *q <= p / (1.0 - alpha) + 1e-12);
            }
            prop_assert!((avar_variational(alpha, &d) - direct).abs() < 1e-10);
            prop_assert!((avar_lp_oracle(alpha, &d).0 - direct).abs() < 1e-10);
        }
    }
}
