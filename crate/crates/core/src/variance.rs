//! Exact and Monte-Carlo variances of MAPG estimators, the three-term
//! (state / other agents / own action) decomposition, the advantage
//! decomposition identities and the variance bound checks.
//!
//! "Variance" of a vector estimator is always the sum of its component
//! variances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::{ob_surrogate_discrete, x_value};
use crate::error::{Error, Result};
use crate::estimators::{add_score, default_horizon, sample_trajectory, trajectory_gradient, EstimatorKind, SignalTable};
use crate::game::{JointActionSpace, MarkovGame};
use crate::policy::{grad_log_norm_sq, norm_sq, JointPolicy};
use crate::values::{
    local_advantage, marginal_q, marginal_table, multi_agent_advantage, solve_values, state_distributions, AgentSubset,
    ValueTables,
};

/// Slack allowed on identities between exactly computed quantities.
pub const IDENTITY_TOL: f64 = 1e-9;
const TRUNCATION_TOL: f64 = 1e-10;
const MC_CHUNK: usize = 4096;

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, got })
    }
}

/// Variance of `x` under weights `w` (which sum to one), by two passes.
fn weighted_variance(items: &[(f64, f64)]) -> f64 {
    let mean: f64 = items.iter().map(|(w, x)| w * x).sum();
    items.iter().map(|(w, x)| w * (x - mean) * (x - mean)).sum()
}

/// `sum_c Var_{a ~ pi}[signal(a) * g_a[c]]` by enumeration over the agent's actions.
pub fn local_variance(pi: &[f64], signal_row: &[f64], grad_vectors: &[Vec<f64>]) -> Result<f64> {
    check_len(pi.len(), signal_row.len())?;
    check_len(pi.len(), grad_vectors.len())?;
    let dim = grad_vectors.first().map_or(0, Vec::len);
    let mut total = 0.0;
    for c in 0..dim {
        let mut first = 0.0;
        let mut second = 0.0;
        for ((&p, &x), g) in pi.iter().zip(signal_row).zip(grad_vectors) {
            check_len(dim, g.len())?;
            let v = x * g[c];
            first += p * v;
            second += p * v * v;
        }
        total += second - first * first;
    }
    Ok(total)
}

/// Per-state ingredients of the per-step variance.
#[derive(Clone, Debug)]
struct StateMoments {
    /// `E[||g||^2 | s]`
    second: f64,
    /// `E[g | s]` on the state's own block
    mean: Vec<f64>,
    /// `E_{a^-i}[||E[g | s, a^-i]||^2]`
    others_inner: f64,
    /// `E_{a^-i}[Var_{a^i}[g | s, a^-i]]`
    own: f64,
}

fn per_agent_probs<'a>(policy: &'a JointPolicy, n: usize, s: usize) -> Result<Vec<&'a [f64]>> {
    (0..n).map(|i| policy.softmax(i).map(|p| p.probs(s))).collect()
}

fn state_moments(signal: &[f64], probs: &[&[f64]], space: &JointActionSpace, agent: usize) -> StateMoments {
    let pi = probs[agent];
    let k = pi.len();
    let mut out = StateMoments { second: 0.0, mean: vec![0.0; k], others_inner: 0.0, own: 0.0 };
    let mut m = vec![0.0; k];
    for j in (0..space.len()).filter(|&j| space.action_of(j, agent) == 0) {
        let w: f64 = (0..space.n_agents())
            .filter(|&i| i != agent)
            .map(|i| probs[i][space.action_of(j, i)])
            .product();
        m.iter_mut().for_each(|x| *x = 0.0);
        let mut second = 0.0;
        for (b, &pb) in pi.iter().enumerate() {
            let sig = signal[space.with_action(j, agent, b)];
            add_score(&mut m, pi, 0, b, pb * sig);
            second += pb * sig * sig * (1.0 + norm_sq(pi) - 2.0 * pi[b]);
        }
        let m_sq = norm_sq(&m);
        out.second += w * second;
        out.own += w * (second - m_sq);
        out.others_inner += w * m_sq;
        out.mean.iter_mut().zip(&m).for_each(|(a, b)| *a += w * b);
    }
    out
}

fn all_state_moments(
    kind: EstimatorKind,
    agent: usize,
    game: &MarkovGame,
    policy: &JointPolicy,
    tables: &ValueTables,
) -> Result<Vec<StateMoments>> {
    let signals = SignalTable::build(kind, agent, tables, policy)?;
    (0..game.n_states())
        .map(|s| {
            let probs = per_agent_probs(policy, game.n_agents(), s)?;
            Ok(state_moments(signals.state(s), &probs, game.space(), agent))
        })
        .collect()
}

/// The three variance sources of one per-step estimator plus the directly
/// enumerated total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct VarianceTerms {
    pub state: f64,
    pub others: f64,
    pub own: f64,
    pub total: f64,
}

impl VarianceTerms {
    pub fn sum(&self) -> f64 {
        self.state + self.others + self.own
    }
}

/// Decomposes `Var_{s ~ dist, a ~ pi}[g]` into state, other-agent and own-action terms.
pub fn decomposition_at(
    kind: EstimatorKind,
    agent: usize,
    game: &MarkovGame,
    policy: &JointPolicy,
    tables: &ValueTables,
    dist: &[f64],
) -> Result<VarianceTerms> {
    check_len(game.n_states(), dist.len())?;
    let signals = SignalTable::build(kind, agent, tables, policy)?;
    let space = game.space();
    let mut terms = VarianceTerms::default();
    let mut direct_second = 0.0;
    let mut direct_mean_sq = 0.0;
    for (s, &d) in dist.iter().enumerate() {
        let probs = per_agent_probs(policy, game.n_agents(), s)?;
        let m = state_moments(signals.state(s), &probs, space, agent);
        let mu_sq = norm_sq(&m.mean);
        terms.state += d * mu_sq - d * d * mu_sq;
        terms.others += d * (m.others_inner - mu_sq);
        terms.own += d * m.own;

        let pi = probs[agent];
        let joint = policy.joint_probs(game, s)?;
        let mut mean = vec![0.0; pi.len()];
        let mut second = 0.0;
        for (j, &pj) in joint.iter().enumerate() {
            let a = space.action_of(j, agent);
            let sig = signals.get(s, j);
            add_score(&mut mean, pi, 0, a, pj * sig);
            second += pj * sig * sig * grad_log_norm_sq(pi, a)?;
        }
        direct_second += d * second;
        direct_mean_sq += d * d * norm_sq(&mean);
    }
    terms.total = direct_second - direct_mean_sq;
    Ok(terms)
}

/// Decomposition at timestep `t`, with `s ~ d^t`.
pub fn variance_decomposition(
    kind: EstimatorKind,
    agent: usize,
    game: &MarkovGame,
    policy: &JointPolicy,
    tables: &ValueTables,
    t: usize,
) -> Result<VarianceTerms> {
    let dists = state_distributions(game, policy, t + 1)?;
    decomposition_at(kind, agent, game, policy, tables, &dists[t])
}

/// Per-timestep variances and their discounted sum `sum_t gamma^{2t} Var_t`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiscountedVariance {
    pub per_step: Vec<f64>,
    pub aggregate: f64,
}

fn discounted_from_moments(moments: &[StateMoments], dists: &[Vec<f64>], gamma: f64) -> DiscountedVariance {
    let mut per_step = Vec::with_capacity(dists.len());
    let mut aggregate = 0.0;
    let mut discount = 1.0;
    for d in dists {
        let var: f64 = moments
            .iter()
            .zip(d)
            .map(|(m, &p)| p * m.second - p * p * norm_sq(&m.mean))
            .sum();
        aggregate += discount * var;
        discount *= gamma * gamma;
        per_step.push(var);
    }
    DiscountedVariance { per_step, aggregate }
}

pub fn discounted_variance(
    kind: EstimatorKind,
    agent: usize,
    game: &MarkovGame,
    policy: &JointPolicy,
    tables: &ValueTables,
    horizon: usize,
) -> Result<DiscountedVariance> {
    let moments = all_state_moments(kind, agent, game, policy, tables)?;
    let dists = state_distributions(game, policy, horizon)?;
    Ok(discounted_from_moments(&moments, &dists, game.gamma()))
}

/// Smallest `H` with `gamma^{2H} * scale / (1 - gamma^2) < tol`.
pub fn variance_horizon(gamma: f64, scale: f64, tol: f64) -> usize {
    if gamma <= 0.0 || scale <= 0.0 {
        return 1;
    }
    let h = ((tol * (1.0 - gamma * gamma) / scale).ln() / (2.0 * gamma.ln())).ceil();
    if h.is_finite() && h >= 1.0 { h as usize } else { 1 }
}

/// `A^{order[k..m]}(s, a^{order[..k]}, a^{order[k..m]})` against
/// `sum_{l=k}^{m-1} A^{order[l]}(s, a^{order[..l]}, a^{order[l]})`.
///
/// `actions` holds one action per agent, indexed by agent.
pub fn lemma1(
    tables: &ValueTables,
    policy: &JointPolicy,
    s: usize,
    order: &[usize],
    k: usize,
    m: usize,
    actions: &[usize],
) -> Result<(f64, f64)> {
    let n = tables.space().n_agents();
    check_len(n, order.len())?;
    check_len(n, actions.len())?;
    if k > m || m > n {
        return Err(Error::InvalidSubset(format!("need k <= m <= n, got k={k} m={m} n={n}")));
    }
    let pick = |agents: &[usize]| -> Vec<usize> { agents.iter().map(|&i| actions[i]).collect() };
    let given = AgentSubset::new(order[..k].to_vec(), n)?;
    let of = AgentSubset::new(order[k..m].to_vec(), n)?;
    let lhs = multi_agent_advantage(tables, policy, (&given, &pick(&order[..k])), (&of, &pick(&order[k..m])), s)?;
    let mut rhs = 0.0;
    for l in k..m {
        let before = AgentSubset::new(order[..l].to_vec(), n)?;
        let me = AgentSubset::new(vec![order[l]], n)?;
        rhs += multi_agent_advantage(tables, policy, (&before, &pick(&order[..l])), (&me, &[actions[order[l]]]), s)?;
    }
    Ok((lhs, rhs))
}

/// All assignments of actions to `agents`, with their product probability.
fn assignments(space: &JointActionSpace, probs: &[&[f64]], agents: &[usize]) -> Vec<(f64, Vec<usize>)> {
    let mut out = vec![(1.0, Vec::with_capacity(agents.len()))];
    for &i in agents {
        let mut next = Vec::with_capacity(out.len() * space.size(i));
        for (w, acts) in &out {
            for a in 0..space.size(i) {
                let mut acts = acts.clone();
                acts.push(a);
                next.push((w * probs[i][a], acts));
            }
        }
        out = next;
    }
    out
}

fn checked_order(order: &[usize], n: usize) -> Result<()> {
    AgentSubset::new(order.to_vec(), n)?;
    check_len(n, order.len())
}

/// Variance decomposition of the multi-agent advantage, in its strong form:
/// with the actions of `order[..prefix.len()]` fixed to `prefix`,
/// `Var[A^{rest}] = sum_{l} E[Var_{a^l}[A^{order[l]}(s, a^{order[..l]}, a^l)]]`.
///
/// `sabotage` flips the sign of every right-hand term (negative control).
pub fn lemma2(
    tables: &ValueTables,
    policy: &JointPolicy,
    s: usize,
    order: &[usize],
    prefix: &[usize],
    sabotage: bool,
) -> Result<(f64, f64)> {
    let space = tables.space();
    let n = space.n_agents();
    checked_order(order, n)?;
    let k = prefix.len();
    if k > n {
        return Err(Error::LengthMismatch { expected: n, got: k });
    }
    let probs = per_agent_probs(policy, n, s)?;
    let head = AgentSubset::new(order[..k].to_vec(), n)?;
    let base = marginal_q(tables, policy, &head, s, prefix)?;

    let mut full = vec![0; n];
    order[..k].iter().zip(prefix).for_each(|(&i, &a)| full[i] = a);
    let lhs_items: Vec<(f64, f64)> = assignments(space, &probs, &order[k..])
        .into_iter()
        .map(|(w, acts)| {
            order[k..].iter().zip(&acts).for_each(|(&i, &a)| full[i] = a);
            Ok((w, tables.q(s, space.index(&full)?) - base))
        })
        .collect::<Result<_>>()?;
    let lhs = weighted_variance(&lhs_items);

    let prefix_key = order[..k].iter().zip(prefix).fold(0, |key, (&i, &a)| key * space.size(i) + a);
    let mut rhs = 0.0;
    for l in k..n {
        let lower = marginal_table(tables, policy, &AgentSubset::new(order[..l].to_vec(), n)?, s)?;
        let upper = marginal_table(tables, policy, &AgentSubset::new(order[..=l].to_vec(), n)?, s)?;
        let me = order[l];
        let mut term = 0.0;
        for (w, acts) in assignments(space, &probs, &order[k..l]) {
            let key = order[k..l].iter().zip(&acts).fold(prefix_key, |key, (&i, &a)| key * space.size(i) + a);
            let items: Vec<(f64, f64)> = (0..space.size(me))
                .map(|a| (probs[me][a], upper[key * space.size(me) + a] - lower[key]))
                .collect();
            term += w * weighted_variance(&items);
        }
        if sabotage {
            rhs -= term;
        } else {
            rhs += term;
        }
    }
    Ok((lhs, rhs))
}

/// `(Var[A(s, a)], sum_i E[Var[A^i(s, a^{1..i-1}, a^i)]])` in agent-index order.
pub fn lemma2_check(tables: &ValueTables, policy: &JointPolicy, s: usize) -> Result<(f64, f64)> {
    let order: Vec<usize> = (0..tables.space().n_agents()).collect();
    lemma2(tables, policy, s, &order, &[], false)
}

/// Upper bound of the joint advantage variance by the local advantage
/// variances, in its strong form with `order[..prefix.len()]` fixed to `prefix`.
pub fn lemma3(tables: &ValueTables, policy: &JointPolicy, s: usize, order: &[usize], prefix: &[usize]) -> Result<(f64, f64)> {
    let space = tables.space();
    let n = space.n_agents();
    checked_order(order, n)?;
    let k = prefix.len();
    if k > n {
        return Err(Error::LengthMismatch { expected: n, got: k });
    }
    let probs = per_agent_probs(policy, n, s)?;
    let mut full = vec![0; n];
    order[..k].iter().zip(prefix).for_each(|(&i, &a)| full[i] = a);
    let rest = assignments(space, &probs, &order[k..]);
    let mut joints = Vec::with_capacity(rest.len());
    for (w, acts) in &rest {
        order[k..].iter().zip(acts).for_each(|(&i, &a)| full[i] = a);
        joints.push((*w, space.index(&full)?));
    }
    let lhs = weighted_variance(&joints.iter().map(|&(w, j)| (w, tables.q(s, j))).collect::<Vec<_>>());
    let mut rhs = 0.0;
    for &i in &order[k..] {
        let items: Vec<(f64, f64)> = joints
            .iter()
            .map(|&(w, j)| Ok((w, local_advantage(tables, policy, s, j, i)?)))
            .collect::<Result<_>>()?;
        rhs += weighted_variance(&items);
    }
    Ok((lhs, rhs))
}

/// `(Var[A(s, a)], sum_i Var[A^i(s, a^{-i}, a^i)])`.
pub fn lemma3_check(tables: &ValueTables, policy: &JointPolicy, s: usize) -> Result<(f64, f64)> {
    let order: Vec<usize> = (0..tables.space().n_agents()).collect();
    lemma3(tables, policy, s, &order, &[])
}

/// Exact suprema over the finite spaces: `B_i = max ||grad log pi^i||`,
/// `eps_i = max |A^i|`, `eps = max_i eps_i`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundConstants {
    pub grad_bound: Vec<f64>,
    pub advantage_bound: Vec<f64>,
    pub max_advantage_bound: f64,
}

pub fn bound_constants(game: &MarkovGame, policy: &JointPolicy, tables: &ValueTables) -> Result<BoundConstants> {
    tables.check_policy(policy)?;
    let n = game.n_agents();
    let mut grad_bound = vec![0.0f64; n];
    let mut advantage_bound = vec![0.0f64; n];
    for i in 0..n {
        for s in 0..game.n_states() {
            let pi = policy.softmax(i)?.probs(s);
            for a in 0..pi.len() {
                grad_bound[i] = grad_bound[i].max(grad_log_norm_sq(pi, a)?.sqrt());
            }
            for j in 0..game.n_joint_actions() {
                advantage_bound[i] = advantage_bound[i].max(local_advantage(tables, policy, s, j, i)?.abs());
            }
        }
    }
    let max_advantage_bound = advantage_bound.iter().copied().fold(0.0, f64::max);
    Ok(BoundConstants { grad_bound, advantage_bound, max_advantage_bound })
}

/// One bound check: `lhs <= bounds[0] <= bounds[1] <= ...`, each with 1e-9 slack.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundReport {
    pub name: String,
    pub agent: usize,
    pub lhs: f64,
    pub bounds: Vec<f64>,
    pub horizon: usize,
    pub truncation_error: f64,
    pub holds: bool,
}

impl BoundReport {
    fn new(name: &str, agent: usize, lhs: f64, bounds: Vec<f64>, horizon: usize, truncation_error: f64) -> Self {
        let mut chain = vec![lhs];
        chain.extend_from_slice(&bounds);
        let holds = chain.windows(2).all(|w| w[0] <= w[1] + IDENTITY_TOL);
        Self { name: name.to_string(), agent, lhs, bounds, horizon, truncation_error, holds }
    }

    /// Smallest gap along the chain; negative means violated.
    pub fn slack(&self) -> f64 {
        let mut chain = vec![self.lhs];
        chain.extend_from_slice(&self.bounds);
        chain.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
    }
}

/// Discounted-variance gap between two estimator kinds with a horizon that
/// keeps the truncated tail under 1e-10.
fn variance_gap(
    upper: EstimatorKind,
    lower: EstimatorKind,
    agent: usize,
    game: &MarkovGame,
    policy: &JointPolicy,
    tables: &ValueTables,
) -> Result<(f64, usize, f64)> {
    let mu = all_state_moments(upper, agent, game, policy, tables)?;
    let ml = all_state_moments(lower, agent, game, policy, tables)?;
    let scale = mu.iter().chain(&ml).map(|m| m.second).fold(0.0, f64::max);
    let gamma = game.gamma();
    let horizon = variance_horizon(gamma, scale, TRUNCATION_TOL);
    let dists = state_distributions(game, policy, horizon)?;
    let a = discounted_from_moments(&mu, &dists, gamma);
    let b = discounted_from_moments(&ml, &dists, gamma);
    let truncation = if gamma > 0.0 { gamma.powi(2 * horizon as i32) * scale / (1.0 - gamma * gamma) } else { 0.0 };
    Ok((a.aggregate - b.aggregate, horizon, truncation))
}

/// Centralized versus decentralized:
/// `lhs <= B_i^2 / (1 - gamma^2) * sum_{j != i} eps_j^2 <= (n - 1) (eps B_i)^2 / (1 - gamma^2)`.
pub fn theorem1_check(game: &MarkovGame, policy: &JointPolicy, tables: &ValueTables, agent: usize) -> Result<BoundReport> {
    let c = bound_constants(game, policy, tables)?;
    let (lhs, horizon, trunc) =
        variance_gap(EstimatorKind::CentralizedVanilla, EstimatorKind::Decentralized, agent, game, policy, tables)?;
    let g2 = 1.0 - game.gamma() * game.gamma();
    let b = c.grad_bound[agent];
    let others: f64 = c.advantage_bound.iter().enumerate().filter(|&(j, _)| j != agent).map(|(_, e)| e * e).sum();
    let n = game.n_agents() as f64;
    let rhs1 = b * b / g2 * others;
    let rhs2 = (n - 1.0) * (c.max_advantage_bound * b).powi(2) / g2;
    Ok(BoundReport::new("theorem1", agent, lhs, vec![rhs1, rhs2], horizon, trunc))
}

/// COMA versus decentralized: `lhs <= (eps_i B_i)^2 / (1 - gamma^2)`.
pub fn theorem2_check(game: &MarkovGame, policy: &JointPolicy, tables: &ValueTables, agent: usize) -> Result<BoundReport> {
    let c = bound_constants(game, policy, tables)?;
    let (lhs, horizon, trunc) = variance_gap(EstimatorKind::Coma, EstimatorKind::Decentralized, agent, game, policy, tables)?;
    let g2 = 1.0 - game.gamma() * game.gamma();
    let rhs = (c.advantage_bound[agent] * c.grad_bound[agent]).powi(2) / g2;
    Ok(BoundReport::new("theorem2", agent, lhs, vec![rhs], horizon, trunc))
}

fn softmax_grads(pi: &[f64]) -> Result<Vec<Vec<f64>>> {
    (0..pi.len()).map(|a| crate::policy::grad_log_softmax(pi, a)).collect()
}

/// `(b - b*)^2 * E_{a ~ pi}[||grad_psi log pi(a)||^2]`.
pub fn excess_surrogate_variance(b: f64, q_row: &[f64], pi: &[f64]) -> Result<f64> {
    let b_star = ob_surrogate_discrete(q_row, pi)?;
    let mut norm = 0.0;
    for (a, &p) in pi.iter().enumerate() {
        norm += p * grad_log_norm_sq(pi, a)?;
    }
    Ok((b - b_star).powi(2) * norm)
}

/// Excess variance of a baseline computed the long way round.
pub fn excess_by_difference(b: f64, q_row: &[f64], pi: &[f64]) -> Result<f64> {
    let b_star = ob_surrogate_discrete(q_row, pi)?;
    let grads = softmax_grads(pi)?;
    Ok(local_variance(pi, &x_value(q_row, b), &grads)? - local_variance(pi, &x_value(q_row, b_star), &grads)?)
}

/// Excess variances of the vanilla and COMA signals and their upper bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExcessBounds {
    pub optimal_baseline: f64,
    pub counterfactual: f64,
    pub grad_bound: f64,
    pub advantage_variance: f64,
    pub advantage_bound: f64,
    pub excess_vanilla: f64,
    pub vanilla_bound: f64,
    pub excess_coma: f64,
    pub coma_bound: f64,
    pub coma_advantage_bound: f64,
}

impl ExcessBounds {
    pub fn holds(&self) -> bool {
        self.excess_vanilla <= self.vanilla_bound + IDENTITY_TOL
            && self.excess_coma <= self.coma_bound + IDENTITY_TOL
            && self.coma_bound <= self.coma_advantage_bound + IDENTITY_TOL
    }
}

/// `dVar_vanilla <= D^2 (Var[A^i] + (Q^{-i})^2)` and
/// `dVar_coma <= D^2 Var[A^i] <= (eps_i D)^2`, with `D = max_a ||grad_psi log pi(a)||`.
pub fn excess_bounds(q_row: &[f64], pi: &[f64]) -> Result<ExcessBounds> {
    let optimal_baseline = ob_surrogate_discrete(q_row, pi)?;
    let counterfactual: f64 = pi.iter().zip(q_row).map(|(p, q)| p * q).sum();
    let mut grad_bound = 0.0f64;
    for a in 0..pi.len() {
        grad_bound = grad_bound.max(grad_log_norm_sq(pi, a)?.sqrt());
    }
    let items: Vec<(f64, f64)> = pi.iter().zip(q_row).map(|(&p, &q)| (p, q - counterfactual)).collect();
    let advantage_variance = weighted_variance(&items);
    let advantage_bound = q_row.iter().map(|q| (q - counterfactual).abs()).fold(0.0, f64::max);
    let d2 = grad_bound * grad_bound;
    Ok(ExcessBounds {
        optimal_baseline,
        counterfactual,
        grad_bound,
        advantage_variance,
        advantage_bound,
        excess_vanilla: excess_surrogate_variance(0.0, q_row, pi)?,
        vanilla_bound: d2 * (advantage_variance + counterfactual * counterfactual),
        excess_coma: excess_surrogate_variance(counterfactual, q_row, pi)?,
        coma_bound: d2 * advantage_variance,
        coma_advantage_bound: (advantage_bound * grad_bound).powi(2),
    })
}

/// Exact `E[G]` and `Var[G]` of the trajectory estimate `G = sum_{t<H} gamma^t g_t`,
/// cross-timestep correlations included.
pub fn exact_trajectory_variance(
    kind: EstimatorKind,
    agent: usize,
    game: &MarkovGame,
    policy: &JointPolicy,
    tables: &ValueTables,
    horizon: usize,
) -> Result<(Vec<f64>, f64)> {
    let signals = SignalTable::build(kind, agent, tables, policy)?;
    let actor = policy.softmax(agent)?;
    let k = actor.n_actions();
    let dim = actor.param_dim();
    let n_s = game.n_states();
    let gamma = game.gamma();
    let joint: Vec<Vec<f64>> = (0..n_s).map(|s| policy.joint_probs(game, s)).collect::<Result<_>>()?;
    // h[s]: E[tail sum | s_t = s]; m[s]: E[||tail sum||^2 | s_t = s]
    let mut h = vec![vec![0.0; dim]; n_s];
    let mut m = vec![0.0; n_s];
    let mut hn = vec![0.0; dim];
    for _ in 0..horizon {
        let mut h_new = vec![vec![0.0; dim]; n_s];
        let mut m_new = vec![0.0; n_s];
        for s in 0..n_s {
            let pi = actor.probs(s);
            for (j, &pj) in joint[s].iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                let a = game.space().action_of(j, agent);
                let sig = signals.get(s, j);
                hn.iter_mut().for_each(|x| *x = 0.0);
                let mut mn = 0.0;
                for (next, &p) in game.transition_row(s, j).iter().enumerate() {
                    if p != 0.0 {
                        hn.iter_mut().zip(&h[next]).for_each(|(x, y)| *x += p * y);
                        mn += p * m[next];
                    }
                }
                let mut g = vec![0.0; k];
                add_score(&mut g, pi, 0, a, sig);
                let cross: f64 = g.iter().zip(&hn[s * k..(s + 1) * k]).map(|(x, y)| x * y).sum();
                m_new[s] += pj * (norm_sq(&g) + 2.0 * gamma * cross + gamma * gamma * mn);
                let hs = &mut h_new[s];
                hs.iter_mut().zip(&hn).for_each(|(x, y)| *x += pj * gamma * y);
                hs[s * k..(s + 1) * k].iter_mut().zip(&g).for_each(|(x, y)| *x += pj * y);
            }
        }
        h = h_new;
        m = m_new;
    }
    let mut mean = vec![0.0; dim];
    let mut second = 0.0;
    for (s, &d) in game.initial_dist().iter().enumerate() {
        mean.iter_mut().zip(&h[s]).for_each(|(x, y)| *x += d * y);
        second += d * m[s];
    }
    let var = second - norm_sq(&mean);
    Ok((mean, var))
}

/// Monte-Carlo total variance of trajectory gradient draws.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct McEstimate {
    pub n: usize,
    pub estimate: f64,
    pub standard_error: f64,
    pub mean: Vec<f64>,
}

struct ChunkStats {
    count: usize,
    mean: Vec<f64>,
    m2: f64,
    samples: Vec<f64>,
}

fn combine(a: ChunkStats, b: ChunkStats) -> ChunkStats {
    if a.count == 0 {
        return b;
    }
    let n = a.count + b.count;
    let wb = b.count as f64 / n as f64;
    let delta: Vec<f64> = b.mean.iter().zip(&a.mean).map(|(x, y)| x - y).collect();
    let mean = a.mean.iter().zip(&delta).map(|(m, d)| m + d * wb).collect();
    let m2 = a.m2 + b.m2 + norm_sq(&delta) * a.count as f64 * b.count as f64 / n as f64;
    let mut samples = a.samples;
    samples.extend(b.samples);
    ChunkStats { count: n, mean, m2, samples }
}

/// Unbiased sample total variance of `n` trajectory-gradient draws, with
/// standard error `sd(||x_k - mean||^2) / sqrt(n)`.
///
/// Trajectories are drawn in chunks of 4096, chunk `c` on ChaCha8 stream `c`
/// of a seed taken from `rng`; chunks merge in order, so the result does not
/// depend on the thread count.
#[allow(clippy::too_many_arguments)]
pub fn mc_variance<R: Rng + ?Sized>(
    kind: EstimatorKind,
    agent: usize,
    game: &MarkovGame,
    policy: &JointPolicy,
    tables: &ValueTables,
    n: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<McEstimate> {
    if n < 2 {
        return Err(Error::InvalidConfig(format!("need at least 2 trajectories, got {n}")));
    }
    let signals = SignalTable::build(kind, agent, tables, policy)?;
    let dim = policy.softmax(agent)?.param_dim();
    let seed: u64 = rng.random();
    let chunks = n.div_ceil(MC_CHUNK);
    let parts: Vec<ChunkStats> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut local = ChaCha8Rng::seed_from_u64(seed);
            local.set_stream(c as u64);
            let count = MC_CHUNK.min(n - c * MC_CHUNK);
            let mut samples = Vec::with_capacity(count * dim);
            let mut mean = vec![0.0; dim];
            let mut m2 = 0.0;
            for k in 0..count {
                let traj = sample_trajectory(game, policy, horizon, &mut local)?;
                let g = trajectory_gradient(&signals, policy, game, &traj)?;
                let delta: Vec<f64> = g.iter().zip(&mean).map(|(x, m)| x - m).collect();
                mean.iter_mut().zip(&delta).for_each(|(m, d)| *m += d / (k + 1) as f64);
                m2 += delta.iter().zip(g.iter().zip(&mean)).map(|(d, (x, m))| d * (x - m)).sum::<f64>();
                samples.extend_from_slice(&g);
            }
            Ok(ChunkStats { count, mean, m2, samples })
        })
        .collect::<Result<_>>()?;
    let total = parts
        .into_iter()
        .fold(ChunkStats { count: 0, mean: vec![0.0; dim], m2: 0.0, samples: Vec::new() }, combine);
    let estimate = total.m2 / (n - 1) as f64;
    let sq: Vec<f64> = total
        .samples
        .chunks_exact(dim.max(1))
        .map(|x| x.iter().zip(&total.mean).map(|(a, m)| (a - m) * (a - m)).sum())
        .collect();
    let sq_mean = sq.iter().sum::<f64>() / n as f64;
    let sq_var = sq.iter().map(|x| (x - sq_mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(McEstimate { n, estimate, standard_error: (sq_var / n as f64).sqrt(), mean: total.mean })
}

/// Figures for one estimator kind in a [`VarianceReport`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KindFigures {
    pub kind: EstimatorKind,
    /// Decomposition of `Var_t` for the first reported timesteps.
    pub steps: Vec<VarianceTerms>,
    /// `sum_t gamma^{2t} Var_t` over the full horizon.
    pub discounted_sum: f64,
    /// `Var[sum_t gamma^t g_t]` of whole trajectories, correlations included.
    pub trajectory_variance: f64,
    pub mc: Option<McEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceReport {
    pub schema_version: u32,
    pub agent: usize,
    pub gamma: f64,
    pub horizon: usize,
    pub truncation_error: f64,
    pub constants: BoundConstants,
    pub kinds: Vec<KindFigures>,
    pub bounds: Vec<BoundReport>,
}

/// Options for [`variance_report`].
#[derive(Clone, Copy, Debug)]
pub struct ReportOptions {
    /// Timesteps with a per-step decomposition.
    pub steps: usize,
    /// Monte-Carlo trajectories per kind, and the seed that drives them.
    pub mc: Option<(usize, u64)>,
}

impl Default for ReportOptions {
    fn default() -> Self {
        Self { steps: 5, mc: None }
    }
}

pub fn variance_report(game: &MarkovGame, policy: &JointPolicy, agent: usize, options: ReportOptions) -> Result<VarianceReport> {
    if agent >= game.n_agents() {
        return Err(Error::InvalidSubset(format!("agent {agent} out of range")));
    }
    let tables = solve_values(game, policy)?;
    let constants = bound_constants(game, policy, &tables)?;
    let horizon = default_horizon(game.gamma(), game.beta());
    let q_max = tables.q_table().iter().fold(0.0f64, |m, q| m.max(q.abs()));
    let g2 = 1.0 - game.gamma() * game.gamma();
    let truncation_error = game.gamma().powi(2 * horizon as i32) * (q_max * constants.grad_bound[agent]).powi(2) / g2;
    let dists = state_distributions(game, policy, horizon)?;
    let steps = options.steps.clamp(1, horizon);
    let mut kinds = Vec::new();
    for kind in EstimatorKind::ALL {
        let moments = all_state_moments(kind, agent, game, policy, &tables)?;
        let discounted = discounted_from_moments(&moments, &dists, game.gamma());
        let step_terms = dists[..steps]
            .iter()
            .map(|d| decomposition_at(kind, agent, game, policy, &tables, d))
            .collect::<Result<_>>()?;
        let (_, trajectory_variance) = exact_trajectory_variance(kind, agent, game, policy, &tables, horizon)?;
        let mc = match options.mc {
            Some((n, seed)) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                Some(mc_variance(kind, agent, game, policy, &tables, n, horizon, &mut rng)?)
            }
            None => None,
        };
        kinds.push(KindFigures {
            kind,
            steps: step_terms,
            discounted_sum: discounted.aggregate,
            trajectory_variance,
            mc,
        });
    }
    let bounds = vec![
        theorem1_check(game, policy, &tables, agent)?,
        theorem2_check(game, policy, &tables, agent)?,
    ];
    Ok(VarianceReport {
        schema_version: crate::SCHEMA_VERSION,
        agent,
        gamma: game.gamma(),
        horizon,
        truncation_error,
        constants,
        kinds,
        bounds,
    })
}

impl VarianceReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Flat CSV, one row per `(kind, t, term)`; `t` is empty for whole-horizon figures.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,agent,kind,t,term,value\n");
        let mut row = |kind: &str, t: Option<usize>, term: &str, value: f64| {
            let t = t.map(|t| t.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{kind},{t},{term},{value}\n", self.schema_version, self.agent));
        };
        for k in &self.kinds {
            let name = k.kind.name();
            for (t, terms) in k.steps.iter().enumerate() {
                row(name, Some(t), "state", terms.state);
                row(name, Some(t), "others", terms.others);
                row(name, Some(t), "own", terms.own);
                row(name, Some(t), "total", terms.total);
            }
            row(name, None, "discounted-sum", k.discounted_sum);
            row(name, None, "trajectory", k.trajectory_variance);
            if let Some(mc) = &k.mc {
                row(name, None, "mc", mc.estimate);
                row(name, None, "mc-se", mc.standard_error);
            }
        }
        for b in &self.bounds {
            row(&b.name, None, "lhs", b.lhs);
            for (r, v) in b.bounds.iter().enumerate() {
                row(&b.name, None, &format!("bound{}", r + 1), *v);
            }
            row(&b.name, None, "truncation-error", b.truncation_error);
        }
        row("constants", None, "grad-bound", self.constants.grad_bound[self.agent]);
        row("constants", None, "advantage-bound", self.constants.advantage_bound[self.agent]);
        row("constants", None, "max-advantage-bound", self.constants.max_advantage_bound);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::game::{random_game, OneStepGame};
    use crate::policy::SoftmaxPolicy;
    use proptest::prelude::*;

    fn toy() -> (MarkovGame, JointPolicy) {
        let game = OneStepGame::new(vec![3], vec![2.0, 1.0, 100.0]).unwrap().to_markov_game(0.0).unwrap();
        let policy = JointPolicy::from_softmax(vec![SoftmaxPolicy::new(vec![vec![8f64.ln(), 0.0, 0.0]]).unwrap()]).unwrap();
        (game, policy)
    }

    fn random_pair(n: usize, s: usize, k: usize, seed: u64) -> (MarkovGame, JointPolicy, ValueTables) {
        let game = random_game(n, s, k, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let policy = JointPolicy::random_softmax(&game, 1.5, &mut rng);
        let tables = solve_values(&game, &policy).unwrap();
        (game, policy, tables)
    }

    #[test]
    fn toy_local_variances() {
        let pi = [0.8, 0.1, 0.1];
        let q = [2.0, 1.0, 100.0];
        let grads = softmax_grads(&pi).unwrap();
        let vanilla = local_variance(&pi, &q, &grads).unwrap();
        assert!((vanilla - 1321.007).abs() < 0.5);
        let coma = local_variance(&pi, &x_value(&q, 11.7), &grads).unwrap();
        assert!((coma - 1020.2464).abs() < 1e-3);
        let ob = local_variance(&pi, &x_value(&q, ob_surrogate_discrete(&q, &pi).unwrap()), &grads).unwrap();
        assert!((ob - 673.116).abs() < 0.5);
    }

    #[test]
    fn toy_excess() {
        let pi = [0.8, 0.1, 0.1];
        let q = [2.0, 1.0, 100.0];
        let b_star = ob_surrogate_discrete(&q, &pi).unwrap();
        assert_eq!(excess_surrogate_variance(b_star, &q, &pi).unwrap(), 0.0);
        let vanilla = excess_surrogate_variance(0.0, &q, &pi).unwrap();
        assert!((vanilla - 647.891).abs() < 1.0);
        assert!((vanilla - b_star.powi(2) * 0.34).abs() < 1e-9);
        assert!((vanilla - excess_by_difference(0.0, &q, &pi).unwrap()).abs() < 1e-9);
        assert!(excess_bounds(&q, &pi).unwrap().holds());
    }

    #[test]
    fn local_variance_rejects_bad_lengths() {
        assert!(local_variance(&[0.5, 0.5], &[1.0], &[vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn decomposition_edge_cases() {
        let (game, policy) = toy();
        let tables = solve_values(&game, &policy).unwrap();
        let t = variance_decomposition(EstimatorKind::CentralizedVanilla, 0, &game, &policy, &tables, 0).unwrap();
        assert_eq!(t.state, 0.0);
        assert_eq!(t.others, 0.0);
        assert!((t.sum() - t.total).abs() < 1e-9);
        assert!((t.total - 1321.0066).abs() < 1e-3);
    }

    #[test]
    fn decomposition_sums_to_total() {
        for seed in 0..10 {
            let (game, policy, tables) = random_pair(2, 3, 3, seed);
            for kind in EstimatorKind::ALL {
                for t in [0, 3] {
                    let terms = variance_decomposition(kind, 1, &game, &policy, &tables, t).unwrap();
                    assert!((terms.sum() - terms.total).abs() < 1e-9, "{kind:?} {terms:?}");
                    assert!(terms.state >= -1e-12 && terms.others >= -1e-12 && terms.own >= -1e-12);
                }
            }
        }
    }

    #[test]
    fn lemmas_on_random_games() {
        for seed in 0..10 {
            let (_, policy, tables) = random_pair(3, 2, 2, seed);
            for s in 0..2 {
                let (l, r) = lemma2_check(&tables, &policy, s).unwrap();
                assert!((l - r).abs() < 1e-9);
                let (l3, r3) = lemma3_check(&tables, &policy, s).unwrap();
                assert!(l3 <= r3 + 1e-9);
                assert!((l3 - l).abs() < 1e-9);
                for prefix in [vec![1], vec![0, 1]] {
                    let (l, r) = lemma2(&tables, &policy, s, &[2, 0, 1], &prefix, false).unwrap();
                    assert!((l - r).abs() < 1e-9);
                    let (l, r) = lemma3(&tables, &policy, s, &[1, 2, 0], &prefix, ).unwrap();
                    assert!(l <= r + 1e-9);
                }
                let (l, r) = lemma1(&tables, &policy, s, &[1, 0, 2], 1, 3, &[1, 0, 1]).unwrap();
                assert!((l - r).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sabotage_breaks_lemma2() {
        let (_, policy, tables) = random_pair(3, 2, 2, 3);
        let (l, r) = lemma2(&tables, &policy, 0, &[0, 1, 2], &[], true).unwrap();
        assert!((l - r).abs() > 1e-6);
    }

    #[test]
    fn single_agent_lemma3_is_tight() {
        let (_, policy, tables) = random_pair(1, 2, 3, 8);
        let (l, r) = lemma3_check(&tables, &policy, 1).unwrap();
        assert!((l - r).abs() < 1e-12);
    }

    #[test]
    fn constant_game_bounds() {
        let game = OneStepGame::new(vec![2, 2], vec![0.5; 4]).unwrap().to_markov_game(0.6).unwrap();
        let policy = JointPolicy::uniform(&game);
        let tables = solve_values(&game, &policy).unwrap();
        for s in 0..1 {
            assert_eq!(lemma2_check(&tables, &policy, s).unwrap(), (0.0, 0.0));
        }
        let t1 = theorem1_check(&game, &policy, &tables, 0).unwrap();
        assert!(t1.lhs.abs() < 1e-12 && t1.holds);
        let t2 = theorem2_check(&game, &policy, &tables, 1).unwrap();
        assert!(t2.holds);
    }

    #[test]
    fn theorems_on_random_games() {
        for seed in 0..10 {
            let (game, policy, tables) = random_pair(3, 2, 2, 50 + seed);
            for agent in 0..3 {
                let t1 = theorem1_check(&game, &policy, &tables, agent).unwrap();
                assert!(t1.holds, "{t1:?}");
                assert!(t1.truncation_error < 1e-9);
                let t2 = theorem2_check(&game, &policy, &tables, agent).unwrap();
                assert!(t2.holds, "{t2:?}");
            }
        }
    }

    #[test]
    fn single_agent_theorem1_is_trivial() {
        let (game, policy, tables) = random_pair(1, 3, 3, 1);
        let t1 = theorem1_check(&game, &policy, &tables, 0).unwrap();
        assert_eq!(t1.bounds, vec![0.0, 0.0]);
        assert!(t1.lhs.abs() < 1e-9);
    }

    #[test]
    fn toy_theorem2() {
        let (game, policy) = toy();
        let tables = solve_values(&game, &policy).unwrap();
        let t2 = theorem2_check(&game, &policy, &tables, 0).unwrap();
        assert!(t2.lhs.is_finite() && t2.holds);
        assert_eq!(t2.horizon, 1);
    }

    #[test]
    fn trajectory_variance_one_step_equals_local() {
        let (game, policy) = toy();
        let tables = solve_values(&game, &policy).unwrap();
        let (_, v) = exact_trajectory_variance(EstimatorKind::Coma, 0, &game, &policy, &tables, 1).unwrap();
        assert!((v - 1020.2464).abs() < 1e-3);
    }

    #[test]
    fn trajectory_variance_matches_mc() {
        let (game, policy, tables) = random_pair(2, 2, 2, 12);
        let horizon = 15;
        let (_, exact) = exact_trajectory_variance(EstimatorKind::ObX, 0, &game, &policy, &tables, horizon).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mc = mc_variance(EstimatorKind::ObX, 0, &game, &policy, &tables, 50_000, horizon, &mut rng).unwrap();
        assert!((mc.estimate - exact).abs() < 3.0 * mc.standard_error, "{} vs {exact} (se {})", mc.estimate, mc.standard_error);
    }

    #[test]
    fn mc_is_deterministic_and_collapses_for_deterministic_policy() {
        let (game, policy) = toy();
        let tables = solve_values(&game, &policy).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            mc_variance(EstimatorKind::CentralizedVanilla, 0, &game, &policy, &tables, 10_000, 1, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
        let sharp = JointPolicy::from_softmax(vec![SoftmaxPolicy::new(vec![vec![60.0, 0.0, 0.0]]).unwrap()]).unwrap();
        let tables = solve_values(&game, &sharp).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mc = mc_variance(EstimatorKind::CentralizedVanilla, 0, &game, &sharp, &tables, 5000, 1, &mut rng).unwrap();
        assert!(mc.estimate < 1e-20);
    }

    #[test]
    fn report_serializes() {
        let (game, policy, _) = random_pair(2, 2, 2, 4);
        let report = variance_report(&game, &policy, 1, ReportOptions { steps: 2, mc: Some((2000, 3)) }).unwrap();
        let csv = report.to_csv();
        assert!(csv.starts_with("schema_version,agent,kind,t,term,value\n"));
        assert!(csv.contains(",ob,1,own,"));
        assert!(report.to_json().unwrap().contains("\"schema_version\": 1"));
        assert_eq!(report, variance_report(&game, &policy, 1, ReportOptions { steps: 2, mc: Some((2000, 3)) }).unwrap());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]

        #[test]
        fn excess_closed_form_matches_difference(
            (q, logits) in (2usize..6).prop_flat_map(|k| (
                prop::collection::vec(-20.0f64..20.0, k),
                prop::collection::vec(-2.0f64..2.0, k))),
            b in -50.0f64..50.0,
        ) {
            let pi = crate::policy::softmax_probs(&logits).unwrap();
            let closed = excess_surrogate_variance(b, &q, &pi).unwrap();
            let direct = excess_by_difference(b, &q, &pi).unwrap();
            prop_assert!((closed - direct).abs() < 1e-9 * closed.abs().max(1.0));
            prop_assert!(excess_bounds(&q, &pi).unwrap().holds());
        }
    }
}
