//! Per-agent actors and their score functions with respect to the output
//! layer `psi`: softmax logits for discrete actions, `(mean, std)` for
//! diagonal Gaussians.

use std::hash::{Hash, Hasher};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::MarkovGame;

/// Threshold on `1 - ||pi||^2` below which the x-measure is undefined.
pub const DEGENERATE_TOLERANCE: f64 = 1e-10;

/// Numerically stable softmax.
pub fn softmax_probs(logits: &[f64]) -> Result<Vec<f64>> {
    if let Some(i) = logits.iter().position(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLogit(i));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

fn check_action(probs: &[f64], action: usize) -> Result<()> {
    if action >= probs.len() {
        Err(Error::ActionOutOfRange { index: action, len: probs.len() })
    } else {
        Ok(())
    }
}

/// `d log softmax(psi)(a) / d psi = e_a - pi`.
pub fn grad_log_softmax(probs: &[f64], action: usize) -> Result<Vec<f64>> {
    check_action(probs, action)?;
    let mut g: Vec<f64> = probs.iter().map(|p| -p).collect();
    g[action] += 1.0;
    Ok(g)
}

/// `||e_a - pi||^2 = 1 + ||pi||^2 - 2 pi(a)`.
pub fn grad_log_norm_sq(probs: &[f64], action: usize) -> Result<f64> {
    check_action(probs, action)?;
    Ok(1.0 + norm_sq(probs) - 2.0 * probs[action])
}

pub(crate) fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// The x-measure of a softmax actor:
/// `x(a) = pi(a) (1 + ||pi||^2 - 2 pi(a)) / (1 - ||pi||^2)`.
pub fn x_measure_softmax(probs: &[f64]) -> Result<Vec<f64>> {
    x_measure_softmax_with_tolerance(probs, DEGENERATE_TOLERANCE)
}

pub fn x_measure_softmax_with_tolerance(probs: &[f64], tolerance: f64) -> Result<Vec<f64>> {
    let sq = norm_sq(probs);
    let denom = 1.0 - sq;
    if !(denom > tolerance) {
        return Err(Error::DegeneratePolicy(denom));
    }
    Ok(probs.iter().map(|&p| p * (1.0 + sq - 2.0 * p) / denom).collect())
}

fn check_gaussian(mean: &[f64], std: &[f64], action: Option<&[f64]>) -> Result<()> {
    if std.len() != mean.len() {
        return Err(Error::LengthMismatch { expected: mean.len(), got: std.len() });
    }
    if let Some(a) = action {
        if a.len() != mean.len() {
            return Err(Error::LengthMismatch { expected: mean.len(), got: a.len() });
        }
    }
    if let Some(&s) = std.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::NonPositiveStd(s));
    }
    Ok(())
}

/// Log-density of a diagonal Gaussian.
pub fn gaussian_log_density(mean: &[f64], std: &[f64], action: &[f64]) -> Result<f64> {
    check_gaussian(mean, std, Some(action))?;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    Ok(mean
        .iter()
        .zip(std)
        .zip(action)
        .map(|((&m, &s), &a)| {
            let z = (a - m) / s;
            -0.5 * z * z - s.ln() - 0.5 * ln_2pi
        })
        .sum())
}

/// Gradient of the diagonal-Gaussian log-density with respect to `(mean, std)`,
/// laid out as `[d/d mean..., d/d std...]`.
pub fn gaussian_log_prob_grad(mean: &[f64], std: &[f64], action: &[f64]) -> Result<Vec<f64>> {
    check_gaussian(mean, std, Some(action))?;
    let d = mean.len();
    let mut g = vec![0.0; 2 * d];
    for k in 0..d {
        let diff = action[k] - mean[k];
        let var = std[k] * std[k];
        g[k] = diff / var;
        g[d + k] = (diff * diff - var) / (var * std[k]);
    }
    Ok(g)
}

/// Inverse-CDF draw from a probability vector.
pub fn sample_discrete<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (a, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return a;
        }
    }
    // rounding left u above the final cumulative sum
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(probs.len() - 1)
}

/// `mean + std * z` with `z` standard normal per dimension.
pub fn sample_gaussian<R: Rng + ?Sized>(mean: &[f64], std: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(std)
        .map(|(&m, &s)| {
            let z: f64 = rng.sample(StandardNormal);
            m + s * z
        })
        .collect()
}

/// Tabular softmax actor: one logit vector per state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SoftmaxParams", into = "SoftmaxParams")]
pub struct SoftmaxPolicy {
    logits: Vec<Vec<f64>>,
    probs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SoftmaxParams {
    logits: Vec<Vec<f64>>,
}

impl TryFrom<SoftmaxParams> for SoftmaxPolicy {
    type Error = Error;
    fn try_from(p: SoftmaxParams) -> Result<Self> {
        SoftmaxPolicy::new(p.logits)
    }
}

impl From<SoftmaxPolicy> for SoftmaxParams {
    fn from(p: SoftmaxPolicy) -> Self {
        SoftmaxParams { logits: p.logits }
    }
}

impl SoftmaxPolicy {
    pub fn new(logits: Vec<Vec<f64>>) -> Result<Self> {
        let n_actions = logits.first().map(Vec::len).unwrap_or(0);
        if n_actions == 0 {
            return Err(Error::InvalidPolicy("softmax policy needs at least one state and action".into()));
        }
        if let Some(row) = logits.iter().find(|row| row.len() != n_actions) {
            return Err(Error::LengthMismatch { expected: n_actions, got: row.len() });
        }
        let probs = logits.iter().map(|l| softmax_probs(l)).collect::<Result<_>>()?;
        Ok(Self { logits, probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self::new(vec![vec![0.0; n_actions]; n_states]).expect("uniform logits are finite")
    }

    pub fn n_states(&self) -> usize {
        self.logits.len()
    }

    pub fn n_actions(&self) -> usize {
        self.logits[0].len()
    }

    /// Dimension of the flattened parameter vector, `|S| * |A^i|`.
    pub fn param_dim(&self) -> usize {
        self.n_states() * self.n_actions()
    }

    pub fn logits(&self) -> &[Vec<f64>] {
        &self.logits
    }

    #[inline]
    pub fn probs(&self, s: usize) -> &[f64] {
        &self.probs[s]
    }

    pub fn set_logits(&mut self, s: usize, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.n_actions() {
            return Err(Error::LengthMismatch { expected: self.n_actions(), got: logits.len() });
        }
        self.probs[s] = softmax_probs(&logits)?;
        self.logits[s] = logits;
        Ok(())
    }

    /// Adds `step` (flattened, state-major) to the logits.
    pub fn add_flat(&mut self, step: &[f64]) -> Result<()> {
        if step.len() != self.param_dim() {
            return Err(Error::LengthMismatch { expected: self.param_dim(), got: step.len() });
        }
        let k = self.n_actions();
        for s in 0..self.n_states() {
            let next: Vec<f64> = self.logits[s].iter().zip(&step[s * k..(s + 1) * k]).map(|(l, d)| l + d).collect();
            self.set_logits(s, next)?;
        }
        Ok(())
    }

    /// Score function with respect to the full tabular parameter: `e_a - pi(s)`
    /// in the block of state `s`, zero elsewhere.
    pub fn grad_log(&self, s: usize, action: usize) -> Result<Vec<f64>> {
        let k = self.n_actions();
        let mut g = vec![0.0; self.param_dim()];
        let block = grad_log_softmax(self.probs(s), action)?;
        g[s * k..(s + 1) * k].copy_from_slice(&block);
        Ok(g)
    }

    /// Mean entropy over states, in nats.
    pub fn mean_entropy(&self) -> f64 {
        let total: f64 = self
            .probs
            .iter()
            .map(|p| -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>())
            .sum();
        total / self.n_states() as f64
    }
}

/// Diagonal Gaussian actor with per-state mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    mean: Vec<Vec<f64>>,
    std: Vec<Vec<f64>>,
}

impl GaussianPolicy {
    pub fn new(mean: Vec<Vec<f64>>, std: Vec<Vec<f64>>) -> Result<Self> {
        if mean.is_empty() || mean[0].is_empty() {
            return Err(Error::InvalidPolicy("gaussian policy needs at least one state and dimension".into()));
        }
        if std.len() != mean.len() {
            return Err(Error::LengthMismatch { expected: mean.len(), got: std.len() });
        }
        let d = mean[0].len();
        for (m, s) in mean.iter().zip(&std) {
            if m.len() != d {
                return Err(Error::LengthMismatch { expected: d, got: m.len() });
            }
            check_gaussian(m, s, None)?;
        }
        Ok(Self { mean, std })
    }

    pub fn n_states(&self) -> usize {
        self.mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.mean[0].len()
    }

    pub fn mean(&self, s: usize) -> &[f64] {
        &self.mean[s]
    }

    pub fn std(&self, s: usize) -> &[f64] {
        &self.std[s]
    }

    pub fn set(&mut self, s: usize, mean: Vec<f64>, std: Vec<f64>) -> Result<()> {
        if mean.len() != self.action_dim() {
            return Err(Error::LengthMismatch { expected: self.action_dim(), got: mean.len() });
        }
        check_gaussian(&mean, &std, None)?;
        self.mean[s] = mean;
        self.std[s] = std;
        Ok(())
    }

    pub fn grad_log(&self, s: usize, action: &[f64]) -> Result<Vec<f64>> {
        gaussian_log_prob_grad(&self.mean[s], &self.std[s], action)
    }

    pub fn sample<R: Rng + ?Sized>(&self, s: usize, rng: &mut R) -> Vec<f64> {
        sample_gaussian(&self.mean[s], &self.std[s], rng)
    }
}

/// One agent's actor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AgentPolicy {
    Softmax(SoftmaxPolicy),
    Gaussian(GaussianPolicy),
}

/// Product policy: the joint probability of a joint action is the product of
/// per-agent probabilities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointPolicy {
    agents: Vec<AgentPolicy>,
}

impl JointPolicy {
    pub fn new(agents: Vec<AgentPolicy>) -> Result<Self> {
        if agents.is_empty() {
            return Err(Error::InvalidPolicy("joint policy needs at least one agent".into()));
        }
        Ok(Self { agents })
    }

    pub fn from_softmax(agents: Vec<SoftmaxPolicy>) -> Result<Self> {
        Self::new(agents.into_iter().map(AgentPolicy::Softmax).collect())
    }

    /// Uniform softmax actors for every agent of `game`.
    pub fn uniform(game: &MarkovGame) -> Self {
        let agents = game
            .action_sizes()
            .iter()
            .map(|&k| AgentPolicy::Softmax(SoftmaxPolicy::uniform(game.n_states(), k)))
            .collect();
        Self { agents }
    }

    /// Softmax actors with i.i.d. `N(0, scale^2)` logits.
    pub fn random_softmax<R: Rng + ?Sized>(game: &MarkovGame, scale: f64, rng: &mut R) -> Self {
        let agents = game
            .action_sizes()
            .iter()
            .map(|&k| {
                let logits = (0..game.n_states())
                    .map(|_| {
                        (0..k)
                            .map(|_| {
                                let z: f64 = rng.sample(StandardNormal);
                                scale * z
                            })
                            .collect()
                    })
                    .collect();
                AgentPolicy::Softmax(SoftmaxPolicy::new(logits).expect("finite logits"))
            })
            .collect();
        Self { agents }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn agents(&self) -> &[AgentPolicy] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentPolicy {
        &self.agents[i]
    }

    pub fn agent_mut(&mut self, i: usize) -> &mut AgentPolicy {
        &mut self.agents[i]
    }

    pub fn softmax(&self, i: usize) -> Result<&SoftmaxPolicy> {
        match self.agents.get(i) {
            Some(AgentPolicy::Softmax(p)) => Ok(p),
            _ => Err(Error::NotDiscrete(i)),
        }
    }

    pub fn softmax_mut(&mut self, i: usize) -> Result<&mut SoftmaxPolicy> {
        match self.agents.get_mut(i) {
            Some(AgentPolicy::Softmax(p)) => Ok(p),
            _ => Err(Error::NotDiscrete(i)),
        }
    }

    pub fn is_discrete(&self) -> bool {
        self.agents.iter().all(|a| matches!(a, AgentPolicy::Softmax(_)))
    }

    /// Checks that this is an all-softmax policy shaped for `game`.
    pub fn check_discrete_for(&self, game: &MarkovGame) -> Result<()> {
        if self.n_agents() != game.n_agents() {
            return Err(Error::LengthMismatch { expected: game.n_agents(), got: self.n_agents() });
        }
        for i in 0..self.n_agents() {
            let p = self.softmax(i)?;
            if p.n_states() != game.n_states() {
                return Err(Error::LengthMismatch { expected: game.n_states(), got: p.n_states() });
            }
            if p.n_actions() != game.action_sizes()[i] {
                return Err(Error::LengthMismatch { expected: game.action_sizes()[i], got: p.n_actions() });
            }
        }
        Ok(())
    }

    /// Joint probability of every joint action at state `s`, in canonical order.
    pub fn joint_probs(&self, game: &MarkovGame, s: usize) -> Result<Vec<f64>> {
        let space = game.space();
        let per_agent: Vec<&[f64]> =
            (0..self.n_agents()).map(|i| self.softmax(i).map(|p| p.probs(s))).collect::<Result<_>>()?;
        Ok((0..space.len())
            .map(|j| (0..per_agent.len()).map(|i| per_agent[i][space.action_of(j, i)]).product())
            .collect())
    }

    /// Samples a joint action index at state `s` (agents drawn in index order).
    pub fn sample_joint<R: Rng + ?Sized>(&self, game: &MarkovGame, s: usize, rng: &mut R) -> Result<usize> {
        let mut actions = Vec::with_capacity(self.n_agents());
        for i in 0..self.n_agents() {
            actions.push(sample_discrete(self.softmax(i)?.probs(s), rng));
        }
        game.space().index(&actions)
    }

    /// Hash of all parameters; value tables carry it to detect stale use.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for agent in &self.agents {
            match agent {
                AgentPolicy::Softmax(p) => {
                    0u8.hash(&mut h);
                    for row in &p.logits {
                        row.len().hash(&mut h);
                        row.iter().for_each(|x| x.to_bits().hash(&mut h));
                    }
                }
                AgentPolicy::Gaussian(p) => {
                    1u8.hash(&mut h);
                    for row in p.mean.iter().chain(&p.std) {
                        row.iter().for_each(|x| x.to_bits().hash(&mut h));
                    }
                }
            }
        }
        h.finish()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = PolicyFile { schema_version: crate::SCHEMA_VERSION, agents: self.agents.clone() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: PolicyFile = serde_json::from_str(text)?;
        Self::new(doc.agents)
    }
}

#[derive(Serialize, Deserialize)]
struct PolicyFile {
    #[serde(default = "default_schema")]
    schema_version: u32,
    agents: Vec<AgentPolicy>,
}

fn default_schema() -> u32 {
    crate::SCHEMA_VERSION
}
