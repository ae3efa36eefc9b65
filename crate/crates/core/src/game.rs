//! Finite Markov games, their joint-action indexing, validation, random
//! generation and the JSON game-spec file format.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default cap on `|S| * prod_i |A^i|` table entries.
pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;

const STOCHASTIC_TOL: f64 = 1e-12;

/// Mixed-radix indexing of joint actions.
///
/// Joint actions are ordered lexicographically by agent index then action
/// index, so agent 0 is the most significant digit: with two binary agents the
/// order is `(0,0), (0,1), (1,0), (1,1)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointActionSpace {
    sizes: Vec<usize>,
    strides: Vec<usize>,
    len: usize,
}

impl JointActionSpace {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidGame("at least one agent is required".into()));
        }
        if let Some(i) = sizes.iter().position(|&k| k == 0) {
            return Err(Error::InvalidGame(format!("agent {i} has an empty action space")));
        }
        let mut strides = vec![1usize; sizes.len()];
        let mut len: usize = 1;
        for i in (0..sizes.len()).rev() {
            strides[i] = len;
            len = len
                .checked_mul(sizes[i])
                .ok_or(Error::CapExceeded { entries: u128::MAX, cap: DEFAULT_ENUMERATION_CAP })?;
        }
        Ok(Self { sizes, strides, len })
    }

    pub fn n_agents(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size(&self, agent: usize) -> usize {
        self.sizes[agent]
    }

    /// Number of joint actions.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn index(&self, actions: &[usize]) -> Result<usize> {
        if actions.len() != self.sizes.len() {
            return Err(Error::LengthMismatch { expected: self.sizes.len(), got: actions.len() });
        }
        let mut idx = 0;
        for (i, (&a, &k)) in actions.iter().zip(&self.sizes).enumerate() {
            if a >= k {
                return Err(Error::ActionOutOfRange { index: a, len: k });
            }
            idx += a * self.strides[i];
        }
        Ok(idx)
    }

    pub fn decode(&self, index: usize) -> Vec<usize> {
        (0..self.sizes.len()).map(|i| self.action_of(index, i)).collect()
    }

    #[inline]
    pub fn action_of(&self, index: usize, agent: usize) -> usize {
        (index / self.strides[agent]) % self.sizes[agent]
    }

    /// Index of the joint action equal to `index` except that `agent` plays `action`.
    #[inline]
    pub fn with_action(&self, index: usize, agent: usize, action: usize) -> usize {
        let current = self.action_of(index, agent);
        index - current * self.strides[agent] + action * self.strides[agent]
    }

    pub fn iter(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        (0..self.len).map(move |j| self.decode(j))
    }
}

/// A finite Markov game `<N, S, A, P, r, gamma>` with initial distribution.
///
/// Tables are flat: `transition[(s * |J| + j) * |S| + s']` and
/// `reward[s * |J| + j]`, where `j` indexes [`JointActionSpace`].
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovGame {
    states: Vec<String>,
    actions: Vec<Vec<String>>,
    space: JointActionSpace,
    transition: Vec<f64>,
    reward: Vec<f64>,
    beta: f64,
    gamma: f64,
    initial_dist: Vec<f64>,
}

impl MarkovGame {
    /// Builds a game after checking table shapes and the enumeration cap.
    ///
    /// Stochasticity, reward bounds and the discount are *not* enforced here;
    /// call [`MarkovGame::validate`] for those.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        states: Vec<String>,
        actions: Vec<Vec<String>>,
        transition: Vec<f64>,
        reward: Vec<f64>,
        beta: f64,
        gamma: f64,
        initial_dist: Vec<f64>,
    ) -> Result<Self> {
        Self::with_cap(states, actions, transition, reward, beta, gamma, initial_dist, DEFAULT_ENUMERATION_CAP)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn with_cap(
        states: Vec<String>,
        actions: Vec<Vec<String>>,
        transition: Vec<f64>,
        reward: Vec<f64>,
        beta: f64,
        gamma: f64,
        initial_dist: Vec<f64>,
        cap: u64,
    ) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::InvalidGame("at least one state is required".into()));
        }
        let sizes: Vec<usize> = actions.iter().map(Vec::len).collect();
        check_cap(states.len(), &sizes, cap)?;
        let space = JointActionSpace::new(sizes)?;
        let n_s = states.len();
        let expect = |name: &str, want: usize, got: usize| {
            if want == got {
                Ok(())
            } else {
                Err(Error::InvalidGame(format!("{name} has {got} entries, expected {want}")))
            }
        };
        expect("transition", n_s * space.len() * n_s, transition.len())?;
        expect("reward", n_s * space.len(), reward.len())?;
        expect("initial_dist", n_s, initial_dist.len())?;
        Ok(Self { states, actions, space, transition, reward, beta, gamma, initial_dist })
    }

    pub fn n_agents(&self) -> usize {
        self.space.n_agents()
    }

    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_joint_actions(&self) -> usize {
        self.space.len()
    }

    pub fn space(&self) -> &JointActionSpace {
        &self.space
    }

    pub fn action_sizes(&self) -> &[usize] {
        self.space.sizes()
    }

    pub fn state_names(&self) -> &[String] {
        &self.states
    }

    pub fn action_names(&self) -> &[Vec<String>] {
        &self.actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn initial_dist(&self) -> &[f64] {
        &self.initial_dist
    }

    #[inline]
    pub fn reward(&self, s: usize, joint: usize) -> f64 {
        self.reward[s * self.space.len() + joint]
    }

    /// Next-state distribution for `(s, joint)`.
    #[inline]
    pub fn transition_row(&self, s: usize, joint: usize) -> &[f64] {
        let n = self.states.len();
        let start = (s * self.space.len() + joint) * n;
        &self.transition[start..start + n]
    }

    pub fn reward_table(&self) -> &[f64] {
        &self.reward
    }

    /// Lists every violated invariant. An empty report means the game is valid.
    pub fn validate(&self) -> ValidationReport {
        let mut violations = Vec::new();
        let n_j = self.space.len();
        for s in 0..self.n_states() {
            for j in 0..n_j {
                let row = self.transition_row(s, j);
                for (next, &p) in row.iter().enumerate() {
                    if p < 0.0 || !p.is_finite() {
                        violations.push(Violation::NegativeProbability {
                            state: s,
                            joint_action: self.space.decode(j),
                            next_state: next,
                            probability: p,
                        });
                    }
                }
                let sum: f64 = row.iter().sum();
                if !((sum - 1.0).abs() <= STOCHASTIC_TOL) {
                    violations.push(Violation::RowSum { state: s, joint_action: self.space.decode(j), sum });
                }
                let r = self.reward(s, j);
                if !(r.abs() <= self.beta) {
                    violations.push(Violation::RewardBound {
                        state: s,
                        joint_action: self.space.decode(j),
                        reward: r,
                        beta: self.beta,
                    });
                }
            }
        }
        for (s, &p) in self.initial_dist.iter().enumerate() {
            if p < 0.0 || !p.is_finite() {
                violations.push(Violation::NegativeInitial { state: s, probability: p });
            }
        }
        let sum: f64 = self.initial_dist.iter().sum();
        if !((sum - 1.0).abs() <= STOCHASTIC_TOL) {
            violations.push(Violation::InitialDistSum { sum });
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            violations.push(Violation::Discount { gamma: self.gamma });
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            violations.push(Violation::RewardBoundNotPositive { beta: self.beta });
        }
        ValidationReport { violations }
    }

    /// Serializes to the JSON game-spec format.
    pub fn to_json(&self) -> Result<String> {
        let n_j = self.space.len();
        let mut transition = BTreeMap::new();
        let mut reward = BTreeMap::new();
        for (s, name) in self.states.iter().enumerate() {
            let mut t_row = BTreeMap::new();
            let mut r_row = BTreeMap::new();
            for j in 0..n_j {
                let key = joint_key(&self.space.decode(j));
                t_row.insert(key.clone(), self.transition_row(s, j).to_vec());
                r_row.insert(key, self.reward(s, j));
            }
            transition.insert(name.clone(), t_row);
            reward.insert(name.clone(), r_row);
        }
        let file = GameFile {
            schema_version: Some(crate::SCHEMA_VERSION),
            n_agents: self.n_agents(),
            states: self.states.clone(),
            actions: self.actions.clone(),
            gamma: self.gamma,
            beta: self.beta,
            initial_dist: self.initial_dist.clone(),
            transition,
            reward,
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses the JSON game-spec format.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: GameFile = serde_json::from_str(text)?;
        if file.actions.len() != file.n_agents {
            return Err(Error::Parse(format!(
                "n_agents = {} but {} action lists were given",
                file.n_agents,
                file.actions.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = file.states.iter().find(|s| !seen.insert(s.as_str())) {
            return Err(Error::Parse(format!("duplicate state name {dup:?}")));
        }
        let sizes: Vec<usize> = file.actions.iter().map(Vec::len).collect();
        check_cap(file.states.len(), &sizes, DEFAULT_ENUMERATION_CAP)?;
        let space = JointActionSpace::new(sizes)?;
        let n_s = file.states.len();
        let mut transition = Vec::with_capacity(n_s * space.len() * n_s);
        let mut reward = Vec::with_capacity(n_s * space.len());
        for name in &file.states {
            let t_rows = file
                .transition
                .get(name)
                .ok_or_else(|| Error::Parse(format!("transition missing state {name:?}")))?;
            let r_rows = file
                .reward
                .get(name)
                .ok_or_else(|| Error::Parse(format!("reward missing state {name:?}")))?;
            if t_rows.len() != space.len() || r_rows.len() != space.len() {
                return Err(Error::Parse(format!(
                    "state {name:?}: expected {} joint actions in transition and reward",
                    space.len()
                )));
            }
            for joint in space.iter() {
                let key = joint_key(&joint);
                let row = t_rows
                    .get(&key)
                    .ok_or_else(|| Error::Parse(format!("transition missing {name:?} {key}")))?;
                if row.len() != n_s {
                    return Err(Error::Parse(format!(
                        "transition row {name:?} {key} has {} entries, expected {n_s}",
                        row.len()
                    )));
                }
                transition.extend_from_slice(row);
                reward.push(
                    *r_rows
                        .get(&key)
                        .ok_or_else(|| Error::Parse(format!("reward missing {name:?} {key}")))?,
                );
            }
        }
        Self::new(file.states, file.actions, transition, reward, file.beta, file.gamma, file.initial_dist)
    }
}

fn check_cap(n_states: usize, sizes: &[usize], cap: u64) -> Result<()> {
    let entries = sizes.iter().fold(n_states as u128, |acc, &k| acc.saturating_mul(k as u128));
    if entries > cap as u128 {
        Err(Error::CapExceeded { entries, cap })
    } else {
        Ok(())
    }
}

/// Key of a joint action in the game-spec file, e.g. `"(0,2)"`.
pub fn joint_key(actions: &[usize]) -> String {
    let parts: Vec<String> = actions.iter().map(usize::to_string).collect();
    format!("({})", parts.join(","))
}

#[derive(Serialize, Deserialize)]
struct GameFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schema_version: Option<u32>,
    n_agents: usize,
    states: Vec<String>,
    actions: Vec<Vec<String>>,
    gamma: f64,
    beta: f64,
    initial_dist: Vec<f64>,
    transition: BTreeMap<String, BTreeMap<String, Vec<f64>>>,
    reward: BTreeMap<String, BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Violation {
    RowSum { state: usize, joint_action: Vec<usize>, sum: f64 },
    NegativeProbability { state: usize, joint_action: Vec<usize>, next_state: usize, probability: f64 },
    RewardBound { state: usize, joint_action: Vec<usize>, reward: f64, beta: f64 },
    NegativeInitial { state: usize, probability: f64 },
    InitialDistSum { sum: f64 },
    Discount { gamma: f64 },
    RewardBoundNotPositive { beta: f64 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RowSum { state, joint_action, sum } => {
                write!(f, "row-sum: P(.|s={state}, a={joint_action:?}) sums to {sum}")
            }
            Violation::NegativeProbability { state, joint_action, next_state, probability } => write!(
                f,
                "negative-probability: P(s'={next_state}|s={state}, a={joint_action:?}) = {probability}"
            ),
            Violation::RewardBound { state, joint_action, reward, beta } => {
                write!(f, "reward-bound: |r(s={state}, a={joint_action:?})| = {} > beta = {beta}", reward.abs())
            }
            Violation::NegativeInitial { state, probability } => {
                write!(f, "negative-initial: d0({state}) = {probability}")
            }
            Violation::InitialDistSum { sum } => write!(f, "initial-dist: sums to {sum}"),
            Violation::Discount { gamma } => write!(f, "discount: gamma = {gamma} not in [0, 1)"),
            Violation::RewardBoundNotPositive { beta } => write!(f, "beta: {beta} is not a positive bound"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Enumerates joint actions in canonical order.
pub fn enumerate_joint_actions(game: &MarkovGame) -> Vec<Vec<usize>> {
    game.space().iter().collect()
}

/// Enumerates the joint actions of raw per-agent action counts, checking `cap`
/// against the number of joint actions.
pub fn enumerate_joint_actions_of(sizes: &[usize], cap: u64) -> Result<Vec<Vec<usize>>> {
    check_cap(1, sizes, cap)?;
    let space = JointActionSpace::new(sizes.to_vec())?;
    Ok(space.iter().collect())
}

/// Random game with uniform reward in `[-1, 1]` (`beta = 1`), Dirichlet(1)
/// transition rows and initial distribution, and `gamma ~ U[0.8, 0.99]`.
pub fn random_game(n_agents: usize, n_states: usize, n_actions: usize, seed: u64) -> Result<MarkovGame> {
    random_game_with_cap(n_agents, n_states, n_actions, seed, DEFAULT_ENUMERATION_CAP)
}

pub fn random_game_with_cap(
    n_agents: usize,
    n_states: usize,
    n_actions: usize,
    seed: u64,
    cap: u64,
) -> Result<MarkovGame> {
    if n_agents == 0 || n_states == 0 || n_actions == 0 {
        return Err(Error::InvalidGame("all sizes must be at least 1".into()));
    }
    let sizes = vec![n_actions; n_agents];
    check_cap(n_states, &sizes, cap)?;
    let n_joint: usize = sizes.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = rng.random_range(0.8..=0.99);
    let beta = 1.0;
    let mut transition = Vec::with_capacity(n_states * n_joint * n_states);
    for _ in 0..n_states * n_joint {
        transition.extend(dirichlet_ones(&mut rng, n_states));
    }
    let reward = (0..n_states * n_joint).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let initial_dist = dirichlet_ones(&mut rng, n_states);
    let states = (0..n_states).map(|s| format!("s{s}")).collect();
    let actions = (0..n_agents)
        .map(|_| (0..n_actions).map(|a| format!("a{a}")).collect())
        .collect();
    MarkovGame::with_cap(states, actions, transition, reward, beta, gamma, initial_dist, cap)
}

/// A flat Dirichlet(1) draw, renormalized so the sum is 1 up to rounding.
fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut w: Vec<f64> = (0..k).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// A stateless game: one payoff per joint action.
#[derive(Clone, Debug, PartialEq)]
pub struct OneStepGame {
    space: JointActionSpace,
    payoff: Vec<f64>,
}

impl OneStepGame {
    pub fn new(action_sizes: Vec<usize>, payoff: Vec<f64>) -> Result<Self> {
        let space = JointActionSpace::new(action_sizes)?;
        if payoff.len() != space.len() {
            return Err(Error::LengthMismatch { expected: space.len(), got: payoff.len() });
        }
        if let Some(j) = payoff.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidGame(format!("payoff at joint action {j} is not finite")));
        }
        Ok(Self { space, payoff })
    }

    pub fn n_agents(&self) -> usize {
        self.space.n_agents()
    }

    pub fn space(&self) -> &JointActionSpace {
        &self.space
    }

    pub fn payoff(&self, actions: &[usize]) -> Result<f64> {
        Ok(self.payoff[self.space.index(actions)?])
    }

    pub fn payoffs(&self) -> &[f64] {
        &self.payoff
    }

    /// Lifts to a single-state Markov game with a self-loop, `gamma` discount
    /// and `beta = max |payoff|` (or 1 for an all-zero payoff).
    pub fn to_markov_game(&self, gamma: f64) -> Result<MarkovGame> {
        let n_j = self.space.len();
        let beta = self.payoff.iter().fold(0.0f64, |m, p| m.max(p.abs()));
        let beta = if beta > 0.0 { beta } else { 1.0 };
        let actions = self
            .space
            .sizes()
            .iter()
            .map(|&k| (0..k).map(|a| format!("a{a}")).collect())
            .collect();
        MarkovGame::new(
            vec!["s0".into()],
            actions,
            vec![1.0; n_j],
            self.payoff.clone(),
            beta,
            gamma,
            vec![1.0],
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> MarkovGame {
        random_game(2, 2, 2, 3).unwrap()
    }

    #[test]
    fn valid_game_has_empty_report() {
        assert!(two_by_two().validate().is_empty());
    }

    #[test]
    fn short_transition_row_is_reported_once() {
        let g = two_by_two();
        let mut transition = g.transition.clone();
        let n = g.n_states();
        // (s=1, j=2): scale the row so it sums to 0.9
        let start = (g.n_joint_actions() + 2) * n;
        for p in &mut transition[start..start + n] {
            *p *= 0.9;
        }
        let bad = MarkovGame::new(
            g.states.clone(),
            g.actions.clone(),
            transition,
            g.reward.clone(),
            g.beta,
            g.gamma,
            g.initial_dist.clone(),
        )
        .unwrap();
        let report = bad.validate();
        assert_eq!(report.violations.len(), 1);
        match &report.violations[0] {
            Violation::RowSum { state, joint_action, sum } => {
                assert_eq!(*state, 1);
                assert_eq!(joint_action, &vec![1, 0]);
                assert!((sum - 0.9).abs() < 1e-12);
            }
            other => panic!("unexpected violation {other}"),
        }
    }

    #[test]
    fn reward_beyond_beta_is_reported() {
        let g = two_by_two();
        let mut reward = g.reward.clone();
        reward[3] = 2.0 * g.beta;
        let bad = MarkovGame::new(
            g.states.clone(),
            g.actions.clone(),
            g.transition.clone(),
            reward,
            g.beta,
            g.gamma,
            g.initial_dist.clone(),
        )
        .unwrap();
        let report = bad.validate();
        assert_eq!(report.violations.len(), 1);
        assert!(matches!(report.violations[0], Violation::RewardBound { state: 0, .. }));
    }

    #[test]
    fn random_game_is_deterministic() {
        let a = random_game(2, 1, 2, 7).unwrap();
        let b = random_game(2, 1, 2, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_ne!(a, random_game(2, 1, 2, 8).unwrap());
    }

    #[test]
    fn random_game_sizes() {
        assert!(random_game(3, 2, 2, 0).unwrap().validate().is_empty());
        assert_eq!(random_game(2, 2, 4, 1).unwrap().n_joint_actions(), 16);
        let g = random_game(2, 2, 2, 11).unwrap();
        assert!((0.8..=0.99).contains(&g.gamma()));
        assert!(random_game(0, 1, 1, 0).is_err());
    }

    #[test]
    fn cap_is_enforced() {
        let err = random_game_with_cap(4, 10, 10, 0, 1000).unwrap_err();
        assert!(matches!(err, Error::CapExceeded { entries: 100_000, cap: 1000 }));
        assert!(enumerate_joint_actions_of(&[10, 10, 10], 999).is_err());
    }

    #[test]
    fn joint_actions_are_lexicographic() {
        let g = random_game(2, 1, 2, 0).unwrap();
        assert_eq!(enumerate_joint_actions(&g), vec![vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]]);
        assert_eq!(enumerate_joint_actions_of(&[3], DEFAULT_ENUMERATION_CAP).unwrap(), vec![vec![0], vec![1], vec![2]]);
        let three = enumerate_joint_actions_of(&[2, 2, 2], DEFAULT_ENUMERATION_CAP).unwrap();
        assert_eq!(three.len(), 8);
        assert_eq!(three[0], vec![0, 0, 0]);
        assert_eq!(three[7], vec![1, 1, 1]);
    }

    #[test]
    fn with_action_replaces_one_digit() {
        let space = JointActionSpace::new(vec![2, 3, 4]).unwrap();
        for j in 0..space.len() {
            let mut a = space.decode(j);
            assert_eq!(space.index(&a).unwrap(), j);
            a[1] = 2;
            assert_eq!(space.with_action(j, 1, 2), space.index(&a).unwrap());
        }
    }

    #[test]
    fn json_round_trip_is_lossless() {
        let g = random_game(3, 2, 2, 5).unwrap();
        let text = g.to_json().unwrap();
        let back = MarkovGame::from_json(&text).unwrap();
        assert_eq!(g, back);
        assert_eq!(text, back.to_json().unwrap());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let g = random_game(2, 2, 2, 5).unwrap();
        let text = g.to_json().unwrap().replace("\"(1,1)\"", "\"(1,7)\"");
        assert!(matches!(MarkovGame::from_json(&text), Err(Error::Parse(_))));
        assert!(MarkovGame::from_json("{\"n_agents\": 1}").is_err());
    }

    #[test]
    fn one_step_lift() {
        let g = OneStepGame::new(vec![3], vec![2.0, 1.0, 100.0]).unwrap();
        let m = g.to_markov_game(0.0).unwrap();
        assert!(m.validate().is_empty());
        assert_eq!(m.beta(), 100.0);
        assert_eq!(m.reward(0, 2), 100.0);
        assert!(OneStepGame::new(vec![2], vec![1.0, f64::NAN]).is_err());
    }
}
