//! Brute-force verification suites over corpora of random games. Each suite
//! enumerates every case it covers and counts violations; a report passes
//! iff no suite has any.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::ob_surrogate_discrete;
use crate::error::{Error, Result};
use crate::estimators::{exact_policy_gradient, expected_contribution, expected_return_of, EstimatorKind};
use crate::game::{random_game, MarkovGame};
use crate::policy::{grad_log_softmax, softmax_probs, JointPolicy};
use crate::values::{solve_values, ValueTables};
use crate::variance::{
    excess_bounds, excess_by_difference, excess_surrogate_variance, lemma1, lemma2, lemma3, local_variance, theorem1_check,
    theorem2_check, IDENTITY_TOL,
};

/// Random permutations tried per state once `n!` gets large.
pub const RANDOM_PERMUTATIONS: usize = 20;
/// Largest agent count for which every label permutation is tested.
pub const EXHAUSTIVE_PERMUTATION_AGENTS: usize = 4;
/// Alternative baselines scanned per optimality instance.
pub const BASELINE_SCAN: usize = 100;
/// Scalar instances per corpus game in the baseline suites.
pub const INSTANCES_PER_GAME: usize = 20;
/// Central-difference step for the gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Relative tolerance for the gradient check.
pub const FD_TOL: f64 = 1e-5;

/// Shape of a corpus: fixed agent count or drawn from `1..=max_agents`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CorpusSpec {
    pub games: usize,
    pub agents: Option<usize>,
    pub max_agents: usize,
    pub max_states: usize,
    pub max_actions: usize,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn new(games: usize, agents: Option<usize>, seed: u64) -> Self {
        Self { games, agents, max_agents: 4, max_states: 3, max_actions: 3, seed }
    }

    /// Game `index` and a random softmax policy for it; independent of every other index.
    pub fn instance(&self, index: usize) -> Result<(MarkovGame, JointPolicy)> {
        let mut rng = self.rng(index, 0);
        let n = self.agents.unwrap_or_else(|| rng.random_range(1..=self.max_agents));
        let states = rng.random_range(1..=self.max_states);
        let actions = rng.random_range(2..=self.max_actions.max(2));
        let game = random_game(n, states, actions, rng.random())?;
        let scale = rng.random_range(0.5..2.0);
        let policy = JointPolicy::random_softmax(&game, scale, &mut rng);
        Ok((game, policy))
    }

    fn rng(&self, index: usize, purpose: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(index as u64);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteResult {
    pub name: String,
    pub cases: usize,
    pub violations: usize,
    /// Largest identity error, or the most negative bound slack.
    pub worst: f64,
    pub first_violation: Option<String>,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.cases > 0
    }
}

/// Accumulates one suite's cases.
struct Tally {
    cases: usize,
    violations: usize,
    worst: f64,
    first: Option<String>,
    bound: bool,
    /// Largest truncation error seen, for suites that truncate a horizon.
    truncation: f64,
}

impl Tally {
    fn identity() -> Self {
        Self { cases: 0, violations: 0, worst: 0.0, first: None, bound: false, truncation: 0.0 }
    }

    fn bound() -> Self {
        Self { cases: 0, violations: 0, worst: f64::INFINITY, first: None, bound: true, truncation: 0.0 }
    }

    /// Records `|lhs - rhs| <= tol`.
    fn equal(&mut self, lhs: f64, rhs: f64, tol: f64, what: impl FnOnce() -> String) {
        let err = (lhs - rhs).abs();
        self.record(err, !(err <= tol), what);
    }

    /// Records a slack that must not fall below `-tol`.
    fn slack(&mut self, slack: f64, tol: f64, what: impl FnOnce() -> String) {
        self.record(slack, !(slack >= -tol), what);
    }

    fn record(&mut self, value: f64, violated: bool, what: impl FnOnce() -> String) {
        self.cases += 1;
        self.worst = if self.bound { self.worst.min(value) } else { self.worst.max(value) };
        if violated {
            self.violations += 1;
            if self.first.is_none() {
                self.first = Some(what());
            }
        }
    }

    fn merge(mut self, other: Tally) -> Tally {
        self.cases += other.cases;
        self.violations += other.violations;
        self.worst = if self.bound { self.worst.min(other.worst) } else { self.worst.max(other.worst) };
        self.first = self.first.or(other.first);
        self.truncation = self.truncation.max(other.truncation);
        self
    }

    fn finish(self, name: &str) -> SuiteResult {
        let worst = if self.cases == 0 { 0.0 } else { self.worst };
        SuiteResult { name: name.to_string(), cases: self.cases, violations: self.violations, worst, first_violation: self.first }
    }
}

/// Every permutation of `0..n` for small `n`, otherwise the identity plus random ones.
pub fn permutations(n: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    if n <= EXHAUSTIVE_PERMUTATION_AGENTS {
        let mut out = Vec::new();
        heap_permutations(&mut (0..n).collect(), n, &mut out);
        out.sort();
        return out;
    }
    let mut out = vec![(0..n).collect::<Vec<_>>()];
    while out.len() < RANDOM_PERMUTATIONS {
        let mut p: Vec<usize> = (0..n).collect();
        p.shuffle(rng);
        out.push(p);
    }
    out
}

fn heap_permutations(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
    if k <= 1 {
        out.push(items.clone());
        return;
    }
    for i in 0..k {
        heap_permutations(items, k - 1, out);
        let j = if k % 2 == 0 { i } else { 0 };
        items.swap(j, k - 1);
    }
}

fn random_actions(game: &MarkovGame, rng: &mut impl Rng) -> Vec<usize> {
    game.action_sizes().iter().map(|&k| rng.random_range(0..k)).collect()
}

/// Runs `f` on every corpus game in parallel and merges the tallies in index order.
fn over_corpus(
    corpus: &CorpusSpec,
    purpose: u64,
    empty: fn() -> Tally,
    f: impl Fn(usize, &MarkovGame, &JointPolicy, &ValueTables, &mut ChaCha8Rng, &mut Tally) -> Result<()> + Sync,
) -> Result<Tally> {
    let tallies: Vec<Tally> = (0..corpus.games)
        .into_par_iter()
        .map(|g| {
            let (game, policy) = corpus.instance(g)?;
            let tables = solve_values(&game, &policy)?;
            let mut rng = corpus.rng(g, purpose);
            let mut tally = empty();
            f(g, &game, &policy, &tables, &mut rng, &mut tally)?;
            Ok(tally)
        })
        .collect::<Result<_>>()?;
    Ok(tallies.into_iter().fold(empty(), Tally::merge))
}

/// Advantage decomposition for every `k <= m <= n`; `k > 0` is the strong
/// (fixed-prefix) form.
pub fn lemma1_suite(corpus: &CorpusSpec) -> Result<SuiteResult> {
    let t = over_corpus(corpus, 1, Tally::identity, |g, game, policy, tables, rng, tally| {
        let n = game.n_agents();
        for s in 0..game.n_states() {
            for order in permutations(n, rng) {
                let actions = random_actions(game, rng);
                for m in 0..=n {
                    for k in 0..=m {
                        let (lhs, rhs) = lemma1(tables, policy, s, &order, k, m, &actions)?;
                        tally.equal(lhs, rhs, IDENTITY_TOL, || format!("game {g} state {s} order {order:?} k {k} m {m}: {lhs} vs {rhs}"));
                    }
                }
            }
        }
        Ok(())
    })?;
    Ok(t.finish("lemma1"))
}

/// Variance decomposition for every label order with prefixes of every length.
pub fn lemma2_suite(corpus: &CorpusSpec, sabotage: bool) -> Result<SuiteResult> {
    let t = over_corpus(corpus, 2, Tally::identity, |g, game, policy, tables, rng, tally| {
        let n = game.n_agents();
        for s in 0..game.n_states() {
            for order in permutations(n, rng) {
                let actions = random_actions(game, rng);
                for k in 0..=n {
                    let prefix: Vec<usize> = order[..k].iter().map(|&i| actions[i]).collect();
                    let (lhs, rhs) = lemma2(tables, policy, s, &order, &prefix, sabotage)?;
                    tally.equal(lhs, rhs, IDENTITY_TOL, || format!("game {g} state {s} order {order:?} prefix {prefix:?}: {lhs} vs {rhs}"));
                }
            }
        }
        Ok(())
    })?;
    Ok(t.finish("lemma2"))
}

/// Joint advantage variance bounded by the local advantage variances.
pub fn lemma3_suite(corpus: &CorpusSpec) -> Result<SuiteResult> {
    let t = over_corpus(corpus, 3, Tally::bound, |g, game, policy, tables, rng, tally| {
        let n = game.n_agents();
        for s in 0..game.n_states() {
            for order in permutations(n, rng) {
                let actions = random_actions(game, rng);
                for k in 0..=n {
                    let prefix: Vec<usize> = order[..k].iter().map(|&i| actions[i]).collect();
                    let (lhs, rhs) = lemma3(tables, policy, s, &order, &prefix)?;
                    tally.slack(rhs - lhs, IDENTITY_TOL, || format!("game {g} state {s} order {order:?} prefix {prefix:?}: {lhs} > {rhs}"));
                }
            }
        }
        Ok(())
    })?;
    Ok(t.finish("lemma3"))
}

fn theorem_suite(corpus: &CorpusSpec, which: u8) -> Result<(SuiteResult, f64)> {
    let t = over_corpus(corpus, 4, Tally::bound, |g, game, policy, tables, _, tally| {
        for i in 0..game.n_agents() {
            let r = if which == 1 { theorem1_check(game, policy, tables, i)? } else { theorem2_check(game, policy, tables, i)? };
            tally.truncation = tally.truncation.max(r.truncation_error);
            tally.slack(r.slack(), IDENTITY_TOL, || format!("game {g} agent {i}: lhs {} bounds {:?}", r.lhs, r.bounds));
        }
        Ok(())
    })?;
    let truncation = t.truncation;
    Ok((t.finish(if which == 1 { "theorem1" } else { "theorem2" }), truncation))
}

/// Centralized-minus-decentralized variance bound chain, per agent; also
/// returns the largest truncation error used.
pub fn theorem1_suite(corpus: &CorpusSpec) -> Result<(SuiteResult, f64)> {
    theorem_suite(corpus, 1)
}

/// COMA-minus-decentralized variance bound, per agent.
pub fn theorem2_suite(corpus: &CorpusSpec) -> Result<(SuiteResult, f64)> {
    theorem_suite(corpus, 2)
}

/// All estimator kinds share one expected per-step contribution in every state.
pub fn unbiasedness_suite(corpus: &CorpusSpec) -> Result<SuiteResult> {
    let t = over_corpus(corpus, 5, Tally::identity, |g, game, policy, tables, _, tally| {
        for i in 0..game.n_agents() {
            for s in 0..game.n_states() {
                let reference = expected_contribution(EstimatorKind::CentralizedVanilla, i, tables, policy, game, s)?;
                for kind in EstimatorKind::ALL {
                    let other = expected_contribution(kind, i, tables, policy, game, s)?;
                    let err = reference.iter().zip(&other).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    tally.equal(err, 0.0, IDENTITY_TOL, || format!("game {g} agent {i} state {s} kind {}: {err}", kind.name()));
                }
            }
        }
        Ok(())
    })?;
    Ok(t.finish("unbiasedness"))
}

/// Exact policy gradient against central differences of `J`.
pub fn gradient_fd_suite(corpus: &CorpusSpec) -> Result<SuiteResult> {
    let t = over_corpus(corpus, 6, Tally::identity, |g, game, policy, tables, _, tally| {
        for i in 0..game.n_agents() {
            let exact = exact_policy_gradient(game, policy, tables, i, None)?;
            let dim = exact.len();
            let mut fd = vec![0.0; dim];
            for (k, out) in fd.iter_mut().enumerate() {
                let mut step = vec![0.0; dim];
                step[k] = FD_STEP;
                let mut plus = policy.clone();
                plus.softmax_mut(i)?.add_flat(&step)?;
                step[k] = -FD_STEP;
                let mut minus = policy.clone();
                minus.softmax_mut(i)?.add_flat(&step)?;
                *out = (expected_return_of(game, &plus)? - expected_return_of(game, &minus)?) / (2.0 * FD_STEP);
            }
            let err = exact.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = exact.iter().map(|a| a * a).sum::<f64>().sqrt();
            tally.equal(err / norm.max(1e-3), 0.0, FD_TOL, || format!("game {g} agent {i}: error {err} against norm {norm}"));
        }
        Ok(())
    })?;
    Ok(t.finish("gradient-fd"))
}

/// A random `(q_row, pi)` pair with 2 to 5 actions.
pub fn random_row(rng: &mut impl Rng) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = rng.random_range(2..=5);
    let q: Vec<f64> = (0..k).map(|_| rng.random_range(-10.0..10.0)).collect();
    let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
    Ok((q, softmax_probs(&logits)?))
}

fn scalar_suite(n: usize, seed: u64, purpose: u64, empty: fn() -> Tally, f: impl Fn(usize, &mut ChaCha8Rng, &mut Tally) -> Result<()> + Sync) -> Result<Tally> {
    let tallies: Vec<Tally> = (0..n)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            rng.set_stream(k as u64);
            let mut tally = empty();
            f(k, &mut rng, &mut tally)?;
            Ok(tally)
        })
        .collect::<Result<_>>()?;
    Ok(tallies.into_iter().fold(empty(), Tally::merge))
}

/// The OB against `BASELINE_SCAN` alternative scalars per instance: never
/// beaten, and strictly better wherever the closed-form gap is resolvable.
pub fn ob_optimality_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let t = scalar_suite(instances, seed, 7, Tally::bound, |n, rng, tally| {
        let (q, pi) = random_row(rng)?;
        let grads: Vec<Vec<f64>> = (0..pi.len()).map(|a| grad_log_softmax(&pi, a)).collect::<Result<_>>()?;
        let b_star = ob_surrogate_discrete(&q, &pi)?;
        let best = local_variance(&pi, &shift(&q, b_star), &grads)?;
        for _ in 0..BASELINE_SCAN {
            let b = b_star + rng.random_range(-20.0..20.0);
            let v = local_variance(&pi, &shift(&q, b), &grads)?;
            let gap = excess_surrogate_variance(b, &q, &pi)?;
            let slack = v - best;
            let strict = gap <= IDENTITY_TOL || slack > 0.0;
            tally.slack(if strict { slack } else { -f64::INFINITY }, IDENTITY_TOL, || {
                format!("instance {n}: b {b} gives {v}, b* {b_star} gives {best}")
            });
        }
        Ok(())
    })?;
    Ok(t.finish("ob-optimality"))
}

fn shift(q: &[f64], b: f64) -> Vec<f64> {
    q.iter().map(|v| v - b).collect()
}

/// Closed-form excess variance against the direct variance difference.
pub fn excess_identity_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let t = scalar_suite(instances, seed, 8, Tally::identity, |n, rng, tally| {
        let (q, pi) = random_row(rng)?;
        let b = rng.random_range(-20.0..20.0);
        let closed = excess_surrogate_variance(b, &q, &pi)?;
        let direct = excess_by_difference(b, &q, &pi)?;
        tally.equal(closed, direct, IDENTITY_TOL, || format!("instance {n}: b {b} closed {closed} direct {direct}"));
        Ok(())
    })?;
    Ok(t.finish("excess-identity"))
}

/// Upper bounds on the vanilla and COMA excess variances.
pub fn excess_bounds_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let t = scalar_suite(instances, seed, 9, Tally::bound, |n, rng, tally| {
        let (q, pi) = random_row(rng)?;
        let e = excess_bounds(&q, &pi)?;
        let slack = (e.vanilla_bound - e.excess_vanilla)
            .min(e.coma_bound - e.excess_coma)
            .min(e.coma_advantage_bound - e.coma_bound);
        tally.slack(slack, IDENTITY_TOL, || format!("instance {n}: {e:?}"));
        Ok(())
    })?;
    Ok(t.finish("excess-bounds"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub games: usize,
    pub agents: usize,
    pub sabotage: bool,
    pub theorem_truncation_error: f64,
    pub suites: Vec<SuiteResult>,
    pub passed: bool,
}

impl VerifyReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,suite,cases,violations,worst,passed\n");
        for s in &self.suites {
            out.push_str(&format!("{},{},{},{},{},{}\n", self.schema_version, s.name, s.cases, s.violations, s.worst, s.passed()));
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{} {:<16} cases={} violations={} worst={:e}\n",
                if s.passed() { "PASS" } else { "FAIL" },
                s.name,
                s.cases,
                s.violations,
                s.worst
            ));
            if let Some(v) = &s.first_violation {
                out.push_str(&format!("     first violation: {v}\n"));
            }
        }
        out
    }
}

/// Every suite over `games` random games with `agents` agents each. The
/// scalar suites run `INSTANCES_PER_GAME` instances per game.
pub fn run_all(games: usize, agents: usize, seed: u64, sabotage: bool) -> Result<VerifyReport> {
    if games == 0 || agents == 0 {
        return Err(Error::InvalidConfig("verify needs at least one game and one agent".into()));
    }
    let corpus = CorpusSpec::new(games, Some(agents), seed);
    let scalars = games * INSTANCES_PER_GAME;
    let (t1, trunc1) = theorem1_suite(&corpus)?;
    let (t2, trunc2) = theorem2_suite(&corpus)?;
    let suites = vec![
        lemma1_suite(&corpus)?,
        lemma2_suite(&corpus, sabotage)?,
        lemma3_suite(&corpus)?,
        t1,
        t2,
        unbiasedness_suite(&corpus)?,
        ob_optimality_suite(scalars, seed)?,
        excess_identity_suite(scalars, seed)?,
        excess_bounds_suite(scalars, seed)?,
    ];
    let passed = suites.iter().all(SuiteResult::passed);
    Ok(VerifyReport {
        schema_version: crate::SCHEMA_VERSION,
        seed,
        games,
        agents,
        sabotage,
        theorem_truncation_error: trunc1.max(trunc2),
        suites,
        passed,
    })
}
