//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; exits nonzero if any fails.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use riskstop::amput::{price_put, root_value, GridSpec, GridValueFunction};
use riskstop::lab::{check_recursivity, FlatAdditive};
use riskstop::lattice::{discretize, reachable_hull, sample_paths, DiscretizationMode, ModelSpec, PathSource};
use riskstop::risk::{reweight_concave, tail_ranks, RiskSpec};
use riskstop::sddp::{
    concave_outer_loop, profit_range, simulate_policy, solve, stopping_histogram, OuterLoopConfig, SddpConfig,
    SddpSolution, StoppingProblem,
};
use riskstop::snell::{
    check_delay_ordering, check_minimality, check_supermartingale, enumerate_stopping_oracle, optimal_stopping_time,
    snell_envelope, Sense, StopMode,
};
use riskstop::tree::{FiltrationTree, MarkovLattice};

type Outcome = (bool, String);

fn tree_specs(rng: &mut ChaCha8Rng, horizon: usize) -> Vec<RiskSpec> {
    let pool = [
        RiskSpec::Expectation,
        RiskSpec::avar(0.3),
        RiskSpec::avar(0.7),
        RiskSpec::evar(0.5),
    ];
    (0..horizon).map(|_| pool[rng.random_range(0..pool.len())].clone()).collect()
}

fn random_binary_tree(rng: &mut ChaCha8Rng) -> FiltrationTree {
    let horizon = rng.random_range(1..=4);
    FiltrationTree::random(rng, horizon, 2, -1.0, 1.0)
}

fn oracle_equality() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut dominated = true;
    for _ in 0..200 {
        let tree = random_binary_tree(&mut rng);
        let specs = tree_specs(&mut rng, tree.horizon());
        let r = snell_envelope(&tree, &specs, StopMode::MaxStop).unwrap();
        let oracle = enumerate_stopping_oracle(&tree, &specs, 0, Sense::Max).unwrap();
        let tau_star = optimal_stopping_time(&r, &tree, 0).unwrap();
        worst = worst.max((r.root_value - oracle.value).abs());
        dominated &= oracle.tau.dominates(&tau_star, &tree);
    }
    let elapsed = start.elapsed();
    (
        worst <= 1e-9 && dominated && elapsed < Duration::from_secs(10),
        format!("200 trees, max |root - oracle| = {worst:.2e}, tau_hat >= tau* on all paths: {dominated}, {elapsed:.2?}"),
    )
}

/// Recombining tree with `u, d = exp(r - sigma^2/2 +- sigma)`, equal weights.
fn textbook_binomial_put(s0: f64, k: f64, sigma: f64, r: f64, steps: usize) -> f64 {
    let u = (r - 0.5 * sigma * sigma + sigma).exp();
    let d = (r - 0.5 * sigma * sigma - sigma).exp();
    let price = |t: usize, j: usize| s0 * u.powi(j as i32) * d.powi((t - j) as i32);
    let mut v: Vec<f64> = (0..=steps).map(|j| (k - price(steps, j)).max(0.0)).collect();
    for t in (0..steps).rev() {
        v = (0..=t)
            .map(|j| (k - price(t, j)).max(0.0).max((-r).exp() * 0.5 * (v[j] + v[j + 1])))
            .collect();
    }
    v[0]
}

fn binomial_match() -> Outcome {
    let start = Instant::now();
    let m = ModelSpec::GeometricWalk {
        s0: 1.0,
        r: 0.01,
        sigma: 0.2,
        strike: 1.0,
        stages: 25,
    };
    let d = discretize(&m, 2, 0, DiscretizationMode::Binomial).unwrap();
    let v = price_put(&m, &d, &RiskSpec::Expectation, &GridSpec::Reachable { max_nodes: 100_000 }).unwrap();
    let elapsed = start.elapsed();
    let got = root_value(&v);
    let want = textbook_binomial_put(1.0, 1.0, 0.2, 0.01, 25);
    (
        (got - want).abs() <= 1e-9 && elapsed < Duration::from_secs(1),
        format!("T=25 grid DP {got:.12} vs textbook tree {want:.12}, {elapsed:.2?}"),
    )
}

fn arithmetic(stages: usize) -> ModelSpec {
    ModelSpec::ArithmeticWalk {
        s0: 1.0,
        r: 0.01,
        sigma: 0.2,
        strike: 1.0,
        stages,
    }
}

fn lower_nondecreasing(sol: &SddpSolution) -> bool {
    sol.trace.windows(2).all(|w| w[1].lower >= w[0].lower - 1e-12)
}

/// Largest `cut(x) - C_t(x)` over the grid states, where `C_t` is the
/// fine-grid DP continuation (itself an upper bound on the exact one).
fn grid_oracle_excess(sol: &SddpSolution, values: &[GridValueFunction]) -> (usize, f64) {
    let mut checked = 0;
    let mut worst = f64::NEG_INFINITY;
    for f in values {
        let Some(cont) = &f.continuation else { continue };
        for cut in sol.approx.cuts(f.stage) {
            for (x, c) in f.grid.iter().zip(cont) {
                worst = worst.max(cut.eval(&[*x]) - c);
                checked += 1;
            }
        }
    }
    (checked, worst)
}

fn gap_closure() -> (Outcome, SddpSolution, StoppingProblem, riskstop::lattice::StageDiscretization) {
    let spec = RiskSpec::mean_avar(0.2, 0.05);
    let start = Instant::now();
    let m = arithmetic(5);
    let p = StoppingProblem::new(&m, None).unwrap();
    let d = discretize(&m, 10, 3, DiscretizationMode::MonteCarlo).unwrap();
    let desk = solve(&p, &spec, &d, &SddpConfig::new(300, 3)).unwrap();
    let desk_elapsed = start.elapsed();
    let desk_gap = desk.gap().unwrap();
    let audit = desk.audit.clone().unwrap();
    let hull = reachable_hull(&m, &d).unwrap();
    let lo = hull.iter().map(|h| h.0).fold(f64::INFINITY, f64::min);
    let hi = hull.iter().map(|h| h.1).fold(f64::NEG_INFINITY, f64::max);
    let fine = price_put(&m, &d, &spec, &GridSpec::Uniform { points: 4001, lo, hi }).unwrap();
    let (grid_checks, grid_excess) = grid_oracle_excess(&desk, &fine);

    let big_start = Instant::now();
    let m25 = arithmetic(25);
    let p25 = StoppingProblem::new(&m25, None).unwrap();
    let d25 = discretize(&m25, 100, 11, DiscretizationMode::MonteCarlo).unwrap();
    let big = solve(&p25, &spec, &d25, &SddpConfig::new(1000, 11)).unwrap();
    let big_elapsed = big_start.elapsed();
    let upper = big.upper_bound.unwrap();
    let gap_at = |it: usize| (upper - big.trace[it - 1].lower) / upper.abs();
    let (g500, g1000) = (gap_at(500), gap_at(1000));
    let big_audit = big.audit.clone().unwrap();

    let ok = desk_gap < 0.01
        && lower_nondecreasing(&desk)
        && audit.passed()
        && grid_excess <= 1e-8
        && desk_elapsed < Duration::from_secs(60)
        && lower_nondecreasing(&big)
        && big_audit.passed()
        && g500 <= 2.0 * g1000;
    let detail = format!(
        "desk T=5 N=10: gap {desk_gap:.2e}, audit {} checks/{} violations ({} exact stages), \
         grid-DP audit {grid_checks} checks max excess {grid_excess:.1e}, {desk_elapsed:.2?}; \
         T=25 N=100: lower {:.6} upper {upper:.6}, gap@500 {g500:.3e} gap@1000 {g1000:.3e}, \
         audit {} violations, {big_elapsed:.2?}",
        audit.checked,
        audit.violations,
        audit.exact_stages,
        big.lower_bound(),
        big_audit.violations,
    );
    ((ok, detail), big, p25, d25)
}

fn delay_ordering() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let betas = [0.0, 0.5, 1.0];
    let mut failures = 0;
    for _ in 0..100 {
        let horizon = rng.random_range(1..=4);
        let states = rng.random_range(2..=3);
        let lattice = MarkovLattice::random(&mut rng, horizon, states, -1.0, 1.0);
        let (tree, _) = lattice.to_tree().unwrap();
        for w in betas.windows(2) {
            let low = vec![RiskSpec::evar(w[0]); horizon];
            let high = vec![RiskSpec::evar(w[1]); horizon];
            if !check_delay_ordering(&tree, &low, &high).unwrap().holds {
                failures += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    (
        failures == 0 && elapsed < Duration::from_secs(10),
        format!("100 lattices, beta in {{0, 0.5, 1}}: {failures} ordering violations, {elapsed:.2?}"),
    )
}

fn supermartingale_minimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut failures = 0;
    for _ in 0..100 {
        let tree = random_binary_tree(&mut rng);
        let specs = tree_specs(&mut rng, tree.horizon());
        let r = snell_envelope(&tree, &specs, StopMode::MaxStop).unwrap();
        let sm = check_supermartingale(&r.envelope, &tree, &specs).unwrap();
        let min = check_minimality(&r, &tree, &specs, 1e-6).unwrap();
        if !(sm.holds && min.holds) {
            failures += 1;
        }
    }
    (failures == 0, format!("100 instances, {failures} failures"))
}

fn non_recursivity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    // Stages 0, 1, 2.
    let tree = FiltrationTree::random(&mut rng, 2, 2, -1.0, 1.0);
    let stages = (0, 1, 2);
    let flat_avar = check_recursivity(&FlatAdditive { risk: RiskSpec::avar(0.5) }, &tree, stages, 1000, 6).unwrap();
    let flat_e = check_recursivity(&FlatAdditive { risk: RiskSpec::Expectation }, &tree, stages, 1000, 6).unwrap();
    let found = flat_avar.counterexample.as_ref().map(|c| c.trial);
    (
        found.is_some() && flat_e.holds,
        format!(
            "flat AVaR(0.5) counterexample at trial {found:?}; flat expectation holds on {} trials: {}",
            flat_e.trials, flat_e.holds
        ),
    )
}

fn reweighting() -> Outcome {
    let freq: Vec<f64> = (0..100).map(|i| ((i * 37) % 100) as f64).collect();
    let w = reweight_concave(0.2, 0.05, &tail_ranks(&freq, 0.05).unwrap()).unwrap();
    let high = w.iter().filter(|x| (**x - 0.048).abs() <= 1e-15).count();
    let low = w.iter().filter(|x| (**x - 0.008).abs() <= 1e-15).count();
    let sum: f64 = w.iter().sum();
    (
        high == 5 && low == 95 && (sum - 1.0).abs() <= 1e-15,
        format!("{high} x 0.048, {low} x 0.008, sum - 1 = {:.1e}", sum - 1.0),
    )
}

fn late_stopping(big: &SddpSolution, p: &StoppingProblem, d: &riskstop::lattice::StageDiscretization) -> Outcome {
    let m = p.model();
    let neutral = solve(p, &RiskSpec::Expectation, d, &SddpConfig::new(1000, 11)).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for (label, source) in [("empirical", PathSource::Discretization(d)), ("true", PathSource::TrueLaw)] {
        let paths = sample_paths(m, source, 2000, 99).unwrap();
        let late = |sol: &SddpSolution| stopping_histogram(&simulate_policy(p, &sol.approx, &paths), 25)[20..]
            .iter()
            .sum::<usize>();
        let (averse, base) = (late(big), late(&neutral));
        ok &= averse > base;
        parts.push(format!("{label} paths: {averse} vs {base}"));
    }
    (ok, format!("stops at stages >= 20, MeanAVaR vs expectation: {}", parts.join(", ")))
}

fn shorter_range() -> Outcome {
    let start = Instant::now();
    let cov: Vec<Vec<f64>> = (0..5)
        .map(|i| (0..5).map(|j| if i == j { 0.04 } else { 0.012 }).collect())
        .collect();
    let b = ModelSpec::BasketWalk {
        s0: vec![1.0; 5],
        r: 0.01,
        cov,
        weights: vec![0.2; 5],
        strike: 1.0,
        stages: 25,
    };
    let p = StoppingProblem::new(&b, None).unwrap();
    let d = discretize(&b, 100, 5, DiscretizationMode::MonteCarlo).unwrap();
    let mut inner = SddpConfig::new(300, 5);
    inner.audit = false;
    inner.forward_paths = 1;
    let outer = OuterLoopConfig {
        max_outer: 10,
        ..OuterLoopConfig::default()
    };
    let looped = concave_outer_loop(&p, 0.2, 0.05, &d, &inner, &outer).unwrap();
    let neutral = solve(&p, &RiskSpec::Expectation, &d, &inner).unwrap();
    let paths = sample_paths(&b, PathSource::Discretization(&d), 2000, 3).unwrap();
    let a = profit_range(&simulate_policy(&p, &looped.solution.approx, &paths));
    let z = profit_range(&simulate_policy(&p, &neutral.approx, &paths));
    (
        a < z,
        format!(
            "basket J=5 T=25 N=100: loop {:?} after {} rounds, range {a:.4} vs risk-neutral {z:.4}, {:.2?}",
            looped.status,
            looped.history.len(),
            start.elapsed()
        ),
    )
}

fn continuation_sets(m: &ModelSpec, d: &riskstop::lattice::StageDiscretization, spec: &RiskSpec) -> Vec<Vec<bool>> {
    price_put(m, d, spec, &GridSpec::Auto { points: 400 })
        .unwrap()
        .iter()
        .map(|f| f.stops().iter().map(|s| !s).collect())
        .collect()
}

fn nested(inner: &[Vec<bool>], outer: &[Vec<bool>]) -> bool {
    inner
        .iter()
        .zip(outer)
        .all(|(a, b)| a.iter().zip(b).all(|(x, y)| !*x || *y))
}

fn count(sets: &[Vec<bool>]) -> usize {
    sets.iter().flatten().filter(|x| **x).count()
}

fn region_ordering() -> Outcome {
    let m = ModelSpec::GeometricWalk {
        s0: 1.0,
        r: 0.01,
        sigma: 0.2,
        strike: 1.0,
        stages: 25,
    };
    let d = discretize(&m, 100, 8, DiscretizationMode::MonteCarlo).unwrap();
    let betas = [0.0, 0.1, 0.5, 1.0];
    let buyer: Vec<_> = betas
        .iter()
        .map(|&b| continuation_sets(&m, &d, &RiskSpec::concave(RiskSpec::evar(b))))
        .collect();
    let holder: Vec<_> = betas
        .iter()
        .map(|&b| continuation_sets(&m, &d, &RiskSpec::evar(b)))
        .collect();
    let shrink = buyer.windows(2).all(|w| nested(&w[1], &w[0])) && count(&buyer[3]) < count(&buyer[0]);
    let grow = holder.windows(2).all(|w| nested(&w[0], &w[1])) && count(&holder[3]) > count(&holder[0]);
    (
        shrink && grow,
        format!(
            "continuation grid points for beta {betas:?}: buyer {:?}, holder {:?}",
            buyer.iter().map(|s| count(s)).collect::<Vec<_>>(),
            holder.iter().map(|s| count(s)).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, (ok, detail): Outcome| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        failed += usize::from(!ok);
    };
    report("1 oracle equality", oracle_equality());
    report("2 binomial match", binomial_match());
    let (gap, big, p25, d25) = gap_closure();
    report("3 SDDP gap closure", gap);
    report("4 delay ordering", delay_ordering());
    report("5 supermartingale and minimality", supermartingale_minimality());
    report("6 non-recursivity", non_recursivity());
    report("7 reweighting arithmetic", reweighting());
    report("8a late stopping", late_stopping(&big, &p25, &d25));
    report("8b shorter profit range", shorter_range());
    report("8c continuation regions", region_ordering());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
