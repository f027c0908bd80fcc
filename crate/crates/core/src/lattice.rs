//! Random-walk state models, stage-wise increment discretization and
//! scenario path sampling.
//!
//! Three models share a stage index `t = 1..=T`:
//!
//! - geometric walk: `S_t = S_{t-1} exp(r - sigma^2/2 + eps_t)`, `eps_t ~ N(0, sigma^2)`
//! - arithmetic walk: `S_t = S_{t-1} + r S_0 + eps_t`, `eps_t ~ N(0, sigma^2 S_0^2)`
//! - basket walk: `S^j_t = S^j_{t-1} + r S^j_0 + eps^j_t`, `eps_t ~ N(0, Sigma)`
//!
//! Randomness is counter-based: stage `t` of a discretization uses the
//! stream `sub_seed(seed, t)` and path `i` uses `sub_seed(seed ^ PATH_DOMAIN, i)`,
//! so results never depend on thread scheduling.

use std::io::Write;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::risk::DiscreteDistribution;

const PATH_DOMAIN: u64 = 0x5041_5448_5345_4544;

/// State model, serialized as `{"kind": "GeometricWalk", ...}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", deny_unknown_fields)]
pub enum ModelSpec {
    GeometricWalk {
        s0: f64,
        r: f64,
        sigma: f64,
        strike: f64,
        stages: usize,
    },
    ArithmeticWalk {
        s0: f64,
        r: f64,
        sigma: f64,
        strike: f64,
        stages: usize,
    },
    BasketWalk {
        s0: Vec<f64>,
        r: f64,
        /// Full symmetric covariance matrix of the per-stage increments.
        cov: Vec<Vec<f64>>,
        weights: Vec<f64>,
        strike: f64,
        stages: usize,
    },
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidModel(m));
        if self.stages() == 0 {
            return bad("stages must be at least 1".into());
        }
        if !self.rate().is_finite() || !self.strike().is_finite() {
            return bad("rate and strike must be finite".into());
        }
        match self {
            ModelSpec::GeometricWalk { s0, sigma, .. } => {
                if !(s0.is_finite() && *s0 > 0.0) {
                    return bad(format!("geometric walk needs s0 > 0, got {s0}"));
                }
                check_sigma(*sigma)
            }
            ModelSpec::ArithmeticWalk { s0, sigma, .. } => {
                if !s0.is_finite() {
                    return bad(format!("non-finite s0 {s0}"));
                }
                check_sigma(*sigma)
            }
            ModelSpec::BasketWalk {
                s0, cov, weights, ..
            } => {
                let j = s0.len();
                if j == 0 {
                    return bad("basket needs at least one asset".into());
                }
                if weights.len() != j {
                    return bad(format!("{} weights for {j} assets", weights.len()));
                }
                if cov.len() != j || cov.iter().any(|row| row.len() != j) {
                    return bad(format!("covariance must be {j}x{j}"));
                }
                if s0.iter().chain(weights).chain(cov.iter().flatten()).any(|x| !x.is_finite()) {
                    return bad("non-finite basket parameter".into());
                }
                cholesky_psd(cov).map(|_| ())
            }
        }
    }

    pub fn stages(&self) -> usize {
        match self {
            ModelSpec::GeometricWalk { stages, .. }
            | ModelSpec::ArithmeticWalk { stages, .. }
            | ModelSpec::BasketWalk { stages, .. } => *stages,
        }
    }

    pub fn rate(&self) -> f64 {
        match self {
            ModelSpec::GeometricWalk { r, .. }
            | ModelSpec::ArithmeticWalk { r, .. }
            | ModelSpec::BasketWalk { r, .. } => *r,
        }
    }

    pub fn strike(&self) -> f64 {
        match self {
            ModelSpec::GeometricWalk { strike, .. }
            | ModelSpec::ArithmeticWalk { strike, .. }
            | ModelSpec::BasketWalk { strike, .. } => *strike,
        }
    }

    /// Number of assets.
    pub fn dim(&self) -> usize {
        match self {
            ModelSpec::BasketWalk { s0, .. } => s0.len(),
            _ => 1,
        }
    }

    pub fn initial_state(&self) -> Vec<f64> {
        match self {
            ModelSpec::GeometricWalk { s0, .. } | ModelSpec::ArithmeticWalk { s0, .. } => vec![*s0],
            ModelSpec::BasketWalk { s0, .. } => s0.clone(),
        }
    }

    pub fn is_univariate(&self) -> bool {
        !matches!(self, ModelSpec::BasketWalk { .. })
    }

    /// Lower-triangular factor `L` with `L L^T` equal to the increment covariance.
    pub fn increment_factor(&self) -> Result<Vec<Vec<f64>>> {
        match self {
            ModelSpec::GeometricWalk { sigma, .. } => Ok(vec![vec![*sigma]]),
            ModelSpec::ArithmeticWalk { s0, sigma, .. } => Ok(vec![vec![sigma * s0.abs()]]),
            ModelSpec::BasketWalk { cov, .. } => cholesky_psd(cov),
        }
    }

    /// Per-stage drift added by [`step`] (before the increment).
    pub fn drift(&self) -> Vec<f64> {
        match self {
            ModelSpec::GeometricWalk { r, sigma, .. } => vec![r - 0.5 * sigma * sigma],
            ModelSpec::ArithmeticWalk { s0, r, .. } => vec![r * s0],
            ModelSpec::BasketWalk { s0, r, .. } => s0.iter().map(|s| r * s).collect(),
        }
    }

    /// Univariate transition `S_{t-1} -> S_t` for increment `eps`.
    pub fn step_scalar(&self, s: f64, eps: f64) -> f64 {
        match self {
            ModelSpec::GeometricWalk { r, sigma, .. } => s * (r - 0.5 * sigma * sigma + eps).exp(),
            ModelSpec::ArithmeticWalk { s0, r, .. } => s + r * s0 + eps,
            ModelSpec::BasketWalk { s0, r, .. } => s + r * s0[0] + eps,
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!("sigma must be >= 0, got {sigma}")))
    }
}

/// Model recursion for one stage.
pub fn step(model: &ModelSpec, state: &[f64], increment: &[f64]) -> Result<Vec<f64>> {
    let d = model.dim();
    if state.len() != d || increment.len() != d {
        return Err(Error::InvalidArgument(format!(
            "expected {d}-dimensional state and increment, got {} and {}",
            state.len(),
            increment.len()
        )));
    }
    Ok(match model {
        ModelSpec::BasketWalk { s0, r, .. } => state
            .iter()
            .zip(increment)
            .zip(s0)
            .map(|((s, e), s0)| s + r * s0 + e)
            .collect(),
        _ => vec![model.step_scalar(state[0], increment[0])],
    })
}

/// Cholesky factor of a symmetric positive semidefinite matrix; zero pivots
/// are allowed when the rest of the column vanishes too.
#[allow(clippy::needless_range_loop)]
pub fn cholesky_psd(a: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = a.len();
    if a.iter().any(|row| row.len() != n) {
        return Err(Error::InvalidModel("covariance matrix is not square".into()));
    }
    let scale = a
        .iter()
        .enumerate()
        .map(|(i, row)| row[i].abs())
        .fold(1.0_f64, f64::max);
    for i in 0..n {
        for j in 0..i {
            if (a[i][j] - a[j][i]).abs() > 1e-12 * scale {
                return Err(Error::InvalidModel(format!(
                    "covariance matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    let tol = 1e-12 * scale;
    let mut l = vec![vec![0.0; n]; n];
    for j in 0..n {
        let d = a[j][j] - (0..j).map(|k| l[j][k] * l[j][k]).sum::<f64>();
        if d < -tol {
            return Err(Error::NotPositiveSemidefinite { row: j, pivot: d });
        }
        if d <= tol {
            for i in j + 1..n {
                let v = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
                if v.abs() > 1e-9 * scale {
                    return Err(Error::NotPositiveSemidefinite { row: j, pivot: d });
                }
            }
            continue;
        }
        let pivot = d.sqrt();
        l[j][j] = pivot;
        for i in j + 1..n {
            let v = a[i][j] - (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = v / pivot;
        }
    }
    Ok(l)
}

/// Deterministic 64-bit stream derivation (splitmix64 finalizer).
pub fn sub_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniform in (0, 1) from the top 53 bits, never hitting either endpoint.
fn open_uniform(rng: &mut ChaCha8Rng) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

fn std_normal(rng: &mut ChaCha8Rng, normal: &Normal) -> f64 {
    normal.inverse_cdf(open_uniform(rng))
}

fn correlated_draw(rng: &mut ChaCha8Rng, normal: &Normal, factor: &[Vec<f64>]) -> Vec<f64> {
    let z: Vec<f64> = (0..factor.len()).map(|_| std_normal(rng, normal)).collect();
    factor
        .iter()
        .map(|row| row.iter().zip(&z).map(|(l, z)| l * z).sum())
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DiscretizationMode {
    /// `N` i.i.d. draws from the increment law, weights `1/N`.
    MonteCarlo,
    /// Two atoms at plus/minus one increment standard deviation, weights 1/2.
    Binomial,
}

/// Increment law of one stage: `n` atoms of dimension `dim`, stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageLaw {
    pub dim: usize,
    pub atoms: Vec<f64>,
    pub probs: Vec<f64>,
}

impl StageLaw {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    /// First coordinate of each atom (the increment itself for univariate models).
    pub fn scalar_atoms(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.atoms[i * self.dim]).collect()
    }

    /// Univariate increments as a distribution.
    pub fn distribution(&self) -> Result<DiscreteDistribution> {
        DiscreteDistribution::new(self.scalar_atoms(), self.probs.clone())
    }

    /// Index drawn by inverting the cumulative probabilities at `u`.
    pub fn pick(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Per-stage increment laws; `laws[t - 1]` drives the transition into stage `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageDiscretization {
    pub dim: usize,
    pub laws: Vec<StageLaw>,
}

impl StageDiscretization {
    pub fn stages(&self) -> usize {
        self.laws.len()
    }

    /// Law of the increment entering stage `t` (`1 <= t <= T`).
    pub fn law(&self, t: usize) -> &StageLaw {
        &self.laws[t - 1]
    }

    /// Same atoms with new probabilities for stage `t`.
    pub fn set_probs(&mut self, t: usize, probs: Vec<f64>) -> Result<()> {
        let law = &mut self.laws[t - 1];
        if probs.len() != law.len() {
            return Err(Error::InvalidArgument(format!(
                "{} probabilities for {} atoms",
                probs.len(),
                law.len()
            )));
        }
        let checked = DiscreteDistribution::new(law.scalar_atoms(), probs)?;
        law.probs = checked.probs().to_vec();
        Ok(())
    }
}

/// Builds the stage-wise increment laws of `model`.
pub fn discretize(
    model: &ModelSpec,
    n: usize,
    seed: u64,
    mode: DiscretizationMode,
) -> Result<StageDiscretization> {
    model.validate()?;
    let laws = (1..=model.stages())
        .map(|t| discretize_stage(model, n, seed, mode, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(StageDiscretization {
        dim: model.dim(),
        laws,
    })
}

/// Stage `t` of [`discretize`] on its own.
pub fn discretize_stage(
    model: &ModelSpec,
    n: usize,
    seed: u64,
    mode: DiscretizationMode,
    t: usize,
) -> Result<StageLaw> {
    let factor = model.increment_factor()?;
    let dim = model.dim();
    match mode {
        DiscretizationMode::Binomial => {
            if !model.is_univariate() {
                return Err(Error::BinomialOnBasket);
            }
            let sd = factor[0][0];
            Ok(StageLaw {
                dim,
                atoms: vec![sd, -sd],
                probs: vec![0.5, 0.5],
            })
        }
        DiscretizationMode::MonteCarlo => {
            if n == 0 {
                return Err(Error::InvalidArgument("N must be at least 1".into()));
            }
            let normal = Normal::standard();
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, t as u64));
            let mut atoms = Vec::with_capacity(n * dim);
            for _ in 0..n {
                atoms.extend(correlated_draw(&mut rng, &normal, &factor));
            }
            Ok(StageLaw {
                dim,
                atoms,
                probs: vec![1.0 / n as f64; n],
            })
        }
    }
}

/// One simulated trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioPath {
    /// `states[t]` is the state vector at stage `t`, `t = 0..=T`.
    pub states: Vec<Vec<f64>>,
    /// Atom chosen at each transition; empty for true-law paths.
    pub atom_indices: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
pub enum PathSource<'a> {
    Discretization(&'a StageDiscretization),
    TrueLaw,
}

/// Samples `count` paths; path `i` depends only on `(seed, i)`.
pub fn sample_paths(
    model: &ModelSpec,
    source: PathSource<'_>,
    count: usize,
    seed: u64,
) -> Result<Vec<ScenarioPath>> {
    model.validate()?;
    if count == 0 {
        return Err(Error::InvalidArgument("path count must be at least 1".into()));
    }
    if let PathSource::Discretization(disc) = source {
        if disc.stages() != model.stages() || disc.dim != model.dim() {
            return Err(Error::InvalidArgument(
                "discretization does not match the model".into(),
            ));
        }
    }
    let factor = model.increment_factor()?;
    let normal = Normal::standard();
    let path_seed = seed ^ PATH_DOMAIN;
    Ok((0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(path_seed, i as u64));
            let mut states = Vec::with_capacity(model.stages() + 1);
            let mut atom_indices = Vec::new();
            let mut s = model.initial_state();
            states.push(s.clone());
            for t in 1..=model.stages() {
                let eps = match source {
                    PathSource::Discretization(disc) => {
                        let law = disc.law(t);
                        let k = law.pick(open_uniform(&mut rng));
                        atom_indices.push(k);
                        law.atom(k).to_vec()
                    }
                    PathSource::TrueLaw => correlated_draw(&mut rng, &normal, &factor),
                };
                s = step(model, &s, &eps).expect("dimensions checked");
                states.push(s.clone());
            }
            ScenarioPath {
                states,
                atom_indices,
            }
        })
        .collect())
}

/// Smallest interval `[lo_t, hi_t]` holding every state reachable under
/// `disc`, for `t = 0..=T`. One-dimensional models only; the univariate
/// transitions are increasing in both the state and the increment.
pub fn reachable_hull(model: &ModelSpec, disc: &StageDiscretization) -> Result<Vec<(f64, f64)>> {
    model.validate()?;
    if model.dim() != 1 {
        return Err(Error::InvalidArgument(
            "reachable hull needs a one-dimensional model".into(),
        ));
    }
    if disc.stages() != model.stages() || disc.dim != 1 {
        return Err(Error::InvalidArgument(
            "discretization does not match the model".into(),
        ));
    }
    let s0 = model.initial_state()[0];
    let mut hull = vec![(s0, s0)];
    for t in 1..=model.stages() {
        let atoms = disc.law(t).scalar_atoms();
        let lo_eps = atoms.iter().copied().fold(f64::INFINITY, f64::min);
        let hi_eps = atoms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = hull[t - 1];
        hull.push((model.step_scalar(lo, lo_eps), model.step_scalar(hi, hi_eps)));
    }
    Ok(hull)
}

/// CSV with one row per path; columns `s{t}` (univariate) or `s{t}_{j}`.
pub fn write_paths_csv<W: Write>(paths: &[ScenarioPath], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let Some(first) = paths.first() else {
        w.flush()?;
        return Ok(());
    };
    let dim = first.states[0].len();
    let mut header = vec!["path".to_string()];
    for t in 0..first.states.len() {
        if dim == 1 {
            header.push(format!("s{t}"));
        } else {
            header.extend((0..dim).map(|j| format!("s{t}_{j}")));
        }
    }
    w.write_record(&header)?;
    for (i, p) in paths.iter().enumerate() {
        let mut row = vec![i.to_string()];
        row.extend(p.states.iter().flatten().map(|x| x.to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
