//! Exact value functions of a product policy: `V` by a dense linear solve,
//! `Q` by one Bellman backup, marginal multi-agent `Q^{i1..ik}` by summing
//! out the excluded agents, and multi-agent advantages.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::game::{JointActionSpace, MarkovGame};
use crate::policy::JointPolicy;

const RESIDUAL_TOL: f64 = 1e-9;
const ITERATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    DenseLu,
    ValueIteration,
}

/// Exact `Q(s, a)` and `V(s)` for one game/policy pair.
#[derive(Clone, Debug)]
pub struct ValueTables {
    q: Vec<f64>,
    v: Vec<f64>,
    space: JointActionSpace,
    gamma: f64,
    fingerprint: u64,
    method: SolveMethod,
}

impl ValueTables {
    #[inline]
    pub fn q(&self, s: usize, joint: usize) -> f64 {
        self.q[s * self.space.len() + joint]
    }

    /// `Q(s, .)` over all joint actions.
    pub fn q_state(&self, s: usize) -> &[f64] {
        let n = self.space.len();
        &self.q[s * n..(s + 1) * n]
    }

    pub fn v(&self, s: usize) -> f64 {
        self.v[s]
    }

    pub fn v_table(&self) -> &[f64] {
        &self.v
    }

    pub fn q_table(&self) -> &[f64] {
        &self.q
    }

    pub fn space(&self) -> &JointActionSpace {
        &self.space
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn n_states(&self) -> usize {
        self.v.len()
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn method(&self) -> SolveMethod {
        self.method
    }

    pub fn check_policy(&self, policy: &JointPolicy) -> Result<()> {
        if policy.fingerprint() == self.fingerprint {
            Ok(())
        } else {
            Err(Error::TablesMismatch)
        }
    }

    /// `Q(s, a^{-i}, .)`: the row over agent `agent`'s actions with the other
    /// agents' actions taken from `joint`.
    pub fn q_row(&self, s: usize, joint: usize, agent: usize) -> Vec<f64> {
        (0..self.space.size(agent))
            .map(|b| self.q(s, self.space.with_action(joint, agent, b)))
            .collect()
    }
}

/// Policy-averaged transition matrix and reward vector.
pub fn policy_dynamics(game: &MarkovGame, policy: &JointPolicy) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let n = game.n_states();
    let mut p = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    for s in 0..n {
        let probs = policy.joint_probs(game, s)?;
        for (j, &pj) in probs.iter().enumerate() {
            r[s] += pj * game.reward(s, j);
            for (next, &pt) in game.transition_row(s, j).iter().enumerate() {
                p[(s, next)] += pj * pt;
            }
        }
    }
    Ok((p, r))
}

/// Solves `(I - gamma P_pi) V = r_pi` and backs up `Q = r + gamma P V`.
///
/// Falls back to value iteration (tolerance 1e-12) when the dense solution's
/// Bellman residual exceeds 1e-9; a singular system is an error.
pub fn solve_values(game: &MarkovGame, policy: &JointPolicy) -> Result<ValueTables> {
    policy.check_discrete_for(game)?;
    let n = game.n_states();
    let gamma = game.gamma();
    let (p, r) = policy_dynamics(game, policy)?;
    let a = DMatrix::identity(n, n) - &p * gamma;
    let v = a.clone().lu().solve(&r).ok_or(Error::SingularSystem)?;
    let residual = (&a * &v - &r).amax();
    let (v, method) = if residual.is_finite() && residual <= RESIDUAL_TOL {
        (v, SolveMethod::DenseLu)
    } else {
        (value_iteration(&p, &r, gamma)?, SolveMethod::ValueIteration)
    };
    let v: Vec<f64> = v.iter().copied().collect();
    let n_j = game.n_joint_actions();
    let mut q = Vec::with_capacity(n * n_j);
    for s in 0..n {
        for j in 0..n_j {
            let next: f64 = game.transition_row(s, j).iter().zip(&v).map(|(pt, vn)| pt * vn).sum();
            q.push(game.reward(s, j) + gamma * next);
        }
    }
    Ok(ValueTables {
        q,
        v,
        space: game.space().clone(),
        gamma,
        fingerprint: policy.fingerprint(),
        method,
    })
}

fn value_iteration(p: &DMatrix<f64>, r: &DVector<f64>, gamma: f64) -> Result<DVector<f64>> {
    let mut v = DVector::zeros(r.len());
    for _ in 0..1_000_000 {
        let next = r + (p * &v) * gamma;
        let delta = (&next - &v).amax();
        v = next;
        if delta <= ITERATION_TOL {
            return Ok(v);
        }
    }
    Err(Error::SingularSystem)
}

/// `J(theta) = E_{s ~ d0}[V(s)]`.
pub fn expected_return(game: &MarkovGame, tables: &ValueTables) -> f64 {
    game.initial_dist().iter().zip(tables.v_table()).map(|(d, v)| d * v).sum()
}

/// State distribution one step later: `d P_pi`.
pub fn propagate_state_dist(game: &MarkovGame, policy: &JointPolicy, dist: &[f64]) -> Result<Vec<f64>> {
    let mut next = vec![0.0; game.n_states()];
    for (s, &ds) in dist.iter().enumerate() {
        if ds == 0.0 {
            continue;
        }
        let probs = policy.joint_probs(game, s)?;
        for (j, &pj) in probs.iter().enumerate() {
            for (ns, &pt) in game.transition_row(s, j).iter().enumerate() {
                next[ns] += ds * pj * pt;
            }
        }
    }
    Ok(next)
}

/// `d^0, d^1, ..., d^{horizon-1}`.
pub fn state_distributions(game: &MarkovGame, policy: &JointPolicy, horizon: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(horizon);
    let mut d = game.initial_dist().to_vec();
    for t in 0..horizon {
        if t > 0 {
            d = propagate_state_dist(game, policy, &d)?;
        }
        out.push(d.clone());
    }
    Ok(out)
}

/// An ordered set of distinct agent indices.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct AgentSubset(Vec<usize>);

impl AgentSubset {
    pub fn new(agents: Vec<usize>, n_agents: usize) -> Result<Self> {
        let mut seen = vec![false; n_agents];
        for &i in &agents {
            if i >= n_agents {
                return Err(Error::InvalidSubset(format!("agent {i} out of range for {n_agents} agents")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::InvalidSubset(format!("agent {i} listed twice")));
            }
        }
        Ok(Self(agents))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn all(n_agents: usize) -> Self {
        Self((0..n_agents).collect())
    }

    pub fn agents(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, agent: usize) -> bool {
        self.0.contains(&agent)
    }
}

fn fixed_actions(space: &JointActionSpace, subset: &AgentSubset, actions: &[usize]) -> Result<Vec<Option<usize>>> {
    if actions.len() != subset.len() {
        return Err(Error::LengthMismatch { expected: subset.len(), got: actions.len() });
    }
    let mut fixed = vec![None; space.n_agents()];
    for (&i, &a) in subset.agents().iter().zip(actions) {
        if i >= space.n_agents() {
            return Err(Error::InvalidSubset(format!("agent {i} out of range")));
        }
        if a >= space.size(i) {
            return Err(Error::ActionOutOfRange { index: a, len: space.size(i) });
        }
        fixed[i] = Some(a);
    }
    Ok(fixed)
}

/// `Q^{subset}(s, a^{subset})`: the expectation of `Q(s, .)` over the excluded
/// agents' product policy with the subset's actions held fixed.
///
/// The empty subset gives `V(s)`; the full subset gives `Q(s, a)`.
pub fn marginal_q(
    tables: &ValueTables,
    policy: &JointPolicy,
    subset: &AgentSubset,
    s: usize,
    actions: &[usize],
) -> Result<f64> {
    tables.check_policy(policy)?;
    let space = tables.space();
    let fixed = fixed_actions(space, subset, actions)?;
    let probs: Vec<&[f64]> = (0..space.n_agents()).map(|i| policy.softmax(i).map(|p| p.probs(s))).collect::<Result<_>>()?;
    let mut total = 0.0;
    for j in 0..space.len() {
        let mut w = 1.0;
        let mut matches = true;
        for (i, f) in fixed.iter().enumerate() {
            let a = space.action_of(j, i);
            match f {
                Some(x) if *x != a => {
                    matches = false;
                    break;
                }
                Some(_) => {}
                None => w *= probs[i][a],
            }
        }
        if matches {
            total += w * tables.q(s, j);
        }
    }
    Ok(total)
}

/// Every value of `Q^{subset}(s, .)` in one pass, indexed by the subset's
/// actions in mixed radix (first listed agent most significant).
///
/// Each entry is bit-identical to the corresponding [`marginal_q`] call.
pub fn marginal_table(tables: &ValueTables, policy: &JointPolicy, subset: &AgentSubset, s: usize) -> Result<Vec<f64>> {
    tables.check_policy(policy)?;
    let space = tables.space();
    let probs: Vec<&[f64]> = (0..space.n_agents()).map(|i| policy.softmax(i).map(|p| p.probs(s))).collect::<Result<_>>()?;
    let sizes: Vec<usize> = subset.agents().iter().map(|&i| space.size(i)).collect();
    let len: usize = sizes.iter().product();
    let mut out = vec![0.0; len];
    let mut in_subset = vec![false; space.n_agents()];
    subset.agents().iter().for_each(|&i| in_subset[i] = true);
    for j in 0..space.len() {
        let mut w = 1.0;
        for i in 0..space.n_agents() {
            if !in_subset[i] {
                w *= probs[i][space.action_of(j, i)];
            }
        }
        let mut key = 0;
        for (&i, &k) in subset.agents().iter().zip(&sizes) {
            key = key * k + space.action_of(j, i);
        }
        out[key] += w * tables.q(s, j);
    }
    Ok(out)
}

/// Position of `actions` (for the subset's agents, in order) in a [`marginal_table`].
pub fn marginal_key(space: &JointActionSpace, subset: &AgentSubset, actions: &[usize]) -> usize {
    subset
        .agents()
        .iter()
        .zip(actions)
        .fold(0, |key, (&i, &a)| key * space.size(i) + a)
}

/// `A^{of}(s, a^{given}, a^{of}) = Q^{given ∪ of} - Q^{given}`.
pub fn multi_agent_advantage(
    tables: &ValueTables,
    policy: &JointPolicy,
    given: (&AgentSubset, &[usize]),
    of: (&AgentSubset, &[usize]),
    s: usize,
) -> Result<f64> {
    if let Some(&i) = of.0.agents().iter().find(|&&i| given.0.contains(i)) {
        return Err(Error::OverlappingSubsets(i));
    }
    let n = tables.space().n_agents();
    let mut agents = given.0.agents().to_vec();
    agents.extend_from_slice(of.0.agents());
    let mut actions = given.1.to_vec();
    actions.extend_from_slice(of.1);
    let union = AgentSubset::new(agents, n)?;
    Ok(marginal_q(tables, policy, &union, s, &actions)? - marginal_q(tables, policy, given.0, s, given.1)?)
}

/// The local advantage `A^i(s, a^{-i}, a^i) = Q(s, a) - E_{b ~ pi^i} Q(s, a^{-i}, b)`.
pub fn local_advantage(tables: &ValueTables, policy: &JointPolicy, s: usize, joint: usize, agent: usize) -> Result<f64> {
    let row = tables.q_row(s, joint, agent);
    let pi = policy.softmax(agent)?.probs(s);
    let counterfactual: f64 = pi.iter().zip(&row).map(|(p, q)| p * q).sum();
    Ok(tables.q(s, joint) - counterfactual)
}
