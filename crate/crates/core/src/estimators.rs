//! Per-step MAPG gradient contributions for the four estimator kinds and
//! their discounted aggregation along sampled trajectories.
//!
//! Every contribution is `signal(s, a) * d log pi^i(a^i | s) / d psi^i`,
//! a vector over agent `i`'s tabular logits that is zero outside state `s`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::ob_surrogate_discrete;
use crate::error::{Error, Result};
use crate::game::MarkovGame;
use crate::policy::{sample_discrete, JointPolicy};
use crate::values::{marginal_table, policy_dynamics, state_distributions, AgentSubset, ValueTables};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorKind {
    /// `Q^i(s, a^i)`, the agent's own marginal critic.
    Decentralized,
    /// `Q(s, a)`, the joint critic without a baseline.
    #[serde(rename = "centralized")]
    CentralizedVanilla,
    /// `A^i(s, a^{-i}, a^i)`, the counterfactual advantage.
    Coma,
    /// `X^i = Q - b*`, the optimal-baseline shifted signal.
    #[serde(rename = "ob")]
    ObX,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [Self::Decentralized, Self::CentralizedVanilla, Self::Coma, Self::ObX];

    pub fn name(self) -> &'static str {
        match self {
            Self::Decentralized => "decentralized",
            Self::CentralizedVanilla => "centralized",
            Self::Coma => "coma",
            Self::ObX => "ob",
        }
    }
}

impl std::str::FromStr for EstimatorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown estimator kind {s:?}")))
    }
}

/// One agent's per-step gradient sample.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientContribution {
    pub values: Vec<f64>,
    pub t: usize,
    pub kind: EstimatorKind,
    pub agent: usize,
    pub state: usize,
    pub joint_action: usize,
}

fn check_agent(agent: usize, n_agents: usize) -> Result<()> {
    if agent < n_agents {
        Ok(())
    } else {
        Err(Error::InvalidSubset(format!("agent {agent} out of range for {n_agents} agents")))
    }
}

/// The estimator's signal at state `s` for every joint action.
pub fn signal_row(kind: EstimatorKind, agent: usize, tables: &ValueTables, policy: &JointPolicy, s: usize) -> Result<Vec<f64>> {
    tables.check_policy(policy)?;
    let space = tables.space();
    check_agent(agent, space.n_agents())?;
    let q = tables.q_state(s);
    match kind {
        EstimatorKind::CentralizedVanilla => Ok(q.to_vec()),
        EstimatorKind::Decentralized => {
            let subset = AgentSubset::new(vec![agent], space.n_agents())?;
            let own = marginal_table(tables, policy, &subset, s)?;
            Ok((0..space.len()).map(|j| own[space.action_of(j, agent)]).collect())
        }
        EstimatorKind::Coma | EstimatorKind::ObX => {
            let pi = policy.softmax(agent)?.probs(s);
            (0..space.len())
                .map(|j| {
                    let row = tables.q_row(s, j, agent);
                    let b = if kind == EstimatorKind::Coma {
                        pi.iter().zip(&row).map(|(p, x)| p * x).sum()
                    } else {
                        ob_surrogate_discrete(&row, pi)?
                    };
                    Ok(q[j] - b)
                })
                .collect()
        }
    }
}

/// Signals for every `(s, joint)`, built once and reused along trajectories.
#[derive(Clone, Debug)]
pub struct SignalTable {
    kind: EstimatorKind,
    agent: usize,
    n_joint: usize,
    values: Vec<f64>,
}

impl SignalTable {
    pub fn build(kind: EstimatorKind, agent: usize, tables: &ValueTables, policy: &JointPolicy) -> Result<Self> {
        let mut values = Vec::with_capacity(tables.n_states() * tables.space().len());
        for s in 0..tables.n_states() {
            values.extend(signal_row(kind, agent, tables, policy, s)?);
        }
        Ok(Self { kind, agent, n_joint: tables.space().len(), values })
    }

    pub fn kind(&self) -> EstimatorKind {
        self.kind
    }

    pub fn agent(&self) -> usize {
        self.agent
    }

    #[inline]
    pub fn get(&self, s: usize, joint: usize) -> f64 {
        self.values[s * self.n_joint + joint]
    }

    pub fn state(&self, s: usize) -> &[f64] {
        &self.values[s * self.n_joint..(s + 1) * self.n_joint]
    }
}

/// Adds `scale * (e_a - pi_s)` into the state-`s` block of a flat logit vector.
#[inline]
pub(crate) fn add_score(out: &mut [f64], probs: &[f64], s: usize, action: usize, scale: f64) {
    let k = probs.len();
    let block = &mut out[s * k..(s + 1) * k];
    for (c, (o, p)) in block.iter_mut().zip(probs).enumerate() {
        let e = if c == action { 1.0 } else { 0.0 };
        *o += scale * (e - p);
    }
}

/// The contribution `signal(s, a) * grad log pi^i(a^i | s)` at timestep 0.
pub fn per_step_gradient(
    kind: EstimatorKind,
    agent: usize,
    tables: &ValueTables,
    policy: &JointPolicy,
    s: usize,
    joint: usize,
) -> Result<GradientContribution> {
    let signal = signal_row(kind, agent, tables, policy, s)?[joint];
    let actor = policy.softmax(agent)?;
    let mut values = vec![0.0; actor.param_dim()];
    add_score(&mut values, actor.probs(s), s, tables.space().action_of(joint, agent), signal);
    Ok(GradientContribution { values, t: 0, kind, agent, state: s, joint_action: joint })
}

/// `E_{a ~ pi(s)}[contribution]`, the state-`s` block only.
pub fn expected_contribution(
    kind: EstimatorKind,
    agent: usize,
    tables: &ValueTables,
    policy: &JointPolicy,
    game: &MarkovGame,
    s: usize,
) -> Result<Vec<f64>> {
    let signal = signal_row(kind, agent, tables, policy, s)?;
    let probs = policy.joint_probs(game, s)?;
    let pi = policy.softmax(agent)?.probs(s);
    let mut out = vec![0.0; pi.len()];
    for (j, (&pj, &sig)) in probs.iter().zip(&signal).enumerate() {
        add_score(&mut out, pi, 0, game.space().action_of(j, agent), pj * sig);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub joint: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<Step>,
}

/// Rolls out `horizon` steps from `s_0 ~ d0`.
pub fn sample_trajectory<R: Rng + ?Sized>(
    game: &MarkovGame,
    policy: &JointPolicy,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    let mut steps = Vec::with_capacity(horizon);
    let mut s = sample_discrete(game.initial_dist(), rng);
    for _ in 0..horizon {
        let joint = policy.sample_joint(game, s, rng)?;
        let next_state = sample_discrete(game.transition_row(s, joint), rng);
        steps.push(Step { state: s, joint, reward: game.reward(s, joint), next_state });
        s = next_state;
    }
    Ok(Trajectory { steps })
}

/// `sum_t gamma^t * contribution(s_t, a_t)` over the trajectory.
pub fn trajectory_gradient(
    signals: &SignalTable,
    policy: &JointPolicy,
    game: &MarkovGame,
    trajectory: &Trajectory,
) -> Result<Vec<f64>> {
    let actor = policy.softmax(signals.agent())?;
    let mut out = vec![0.0; actor.param_dim()];
    let mut discount = 1.0;
    for step in &trajectory.steps {
        let a = game.space().action_of(step.joint, signals.agent());
        add_score(&mut out, actor.probs(step.state), step.state, a, discount * signals.get(step.state, step.joint));
        discount *= game.gamma();
    }
    Ok(out)
}

/// Horizon after which the discounted tail `gamma^H * beta / (1 - gamma)` drops below 1e-9.
pub fn default_horizon(gamma: f64, beta: f64) -> usize {
    if gamma <= 0.0 {
        return 1;
    }
    let h = ((1e-9 * (1.0 - gamma) / beta).ln() / gamma.ln()).ceil();
    if h.is_finite() && h >= 1.0 { h as usize } else { 1 }
}

/// Discounted state occupancy `sum_t gamma^t d^t`, exactly (`None`) or truncated.
pub fn discounted_occupancy(game: &MarkovGame, policy: &JointPolicy, horizon: Option<usize>) -> Result<Vec<f64>> {
    match horizon {
        Some(h) => {
            let dists = state_distributions(game, policy, h)?;
            let mut occ = vec![0.0; game.n_states()];
            let mut discount = 1.0;
            for d in &dists {
                occ.iter_mut().zip(d).for_each(|(o, x)| *o += discount * x);
                discount *= game.gamma();
            }
            Ok(occ)
        }
        None => {
            let n = game.n_states();
            let (p, _) = policy_dynamics(game, policy)?;
            let a = DMatrix::identity(n, n) - p.transpose() * game.gamma();
            let d0 = DVector::from_column_slice(game.initial_dist());
            let occ = a.lu().solve(&d0).ok_or(Error::SingularSystem)?;
            Ok(occ.iter().copied().collect())
        }
    }
}

/// `grad_{psi^i} J` by enumeration: `sum_t gamma^t sum_s d^t(s) sum_a pi(a|s) Q(s, a) grad log pi^i(a^i|s)`.
///
/// `horizon = None` uses the exact discounted occupancy.
pub fn exact_policy_gradient(
    game: &MarkovGame,
    policy: &JointPolicy,
    tables: &ValueTables,
    agent: usize,
    horizon: Option<usize>,
) -> Result<Vec<f64>> {
    tables.check_policy(policy)?;
    check_agent(agent, game.n_agents())?;
    let occ = discounted_occupancy(game, policy, horizon)?;
    let actor = policy.softmax(agent)?;
    let k = actor.n_actions();
    let mut out = vec![0.0; actor.param_dim()];
    for (s, &w) in occ.iter().enumerate() {
        let block = expected_contribution(EstimatorKind::CentralizedVanilla, agent, tables, policy, game, s)?;
        out[s * k..(s + 1) * k].iter_mut().zip(&block).for_each(|(o, b)| *o = w * b);
    }
    Ok(out)
}

/// `J = sum_s d0(s) V(s)` for the given policy.
pub fn expected_return_of(game: &MarkovGame, policy: &JointPolicy) -> Result<f64> {
    let tables = crate::values::solve_values(game, policy)?;
    Ok(crate::values::expected_return(game, &tables))
}
