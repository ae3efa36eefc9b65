//! Desk-scale actor training: tabular softmax actors on finite Markov games
//! and Gaussian actors on one-step continuous games, with a Q-critic (exact
//! or TD-learned), a selectable baseline, and plain or PPO-clip updates.
//!
//! Each iteration rolls out a batch, looks up `q` in the critic, subtracts
//! the baseline to form `X = q - b`, and ascends
//! `mean_k sum_t gamma^t X * grad log pi` (or its clipped-ratio surrogate)
//! with plain gradient steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{discrete_baseline, weighted_ratio, BaselineKind, GaussianNorm, DEFAULT_OB_SAMPLES};
use crate::error::{Error, Result};
use crate::estimators::{add_score, default_horizon, sample_trajectory, Step, Trajectory};
use crate::game::MarkovGame;
use crate::policy::{gaussian_log_density, gaussian_log_prob_grad, norm_sq, sample_gaussian, AgentPolicy, GaussianPolicy, JointPolicy};
use crate::values::{expected_return, solve_values, ValueTables};

/// Smallest standard deviation a Gaussian update may reach.
pub const MIN_STD: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum CriticMode {
    Exact,
    Td { lr: f64, target_sync: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum PpoMode {
    Off,
    Clip { eps: f64, epochs: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub baseline: BaselineKind,
    pub actor_lr: f64,
    pub critic: CriticMode,
    /// Trajectories per update.
    pub batch_size: usize,
    pub ppo: PpoMode,
    /// Rollout length; `None` picks the horizon whose discounted tail is below 1e-9.
    pub horizon: Option<usize>,
    pub iterations: usize,
    pub seed: u64,
    /// Resampled actions per Gaussian baseline.
    pub ob_n_samples: usize,
    pub gaussian_norm: GaussianNorm,
    pub entropy_coef: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            baseline: BaselineKind::ObSurrogate,
            actor_lr: 1.0,
            critic: CriticMode::Exact,
            batch_size: 16,
            ppo: PpoMode::Off,
            horizon: None,
            iterations: 500,
            seed: 0,
            ob_n_samples: DEFAULT_OB_SAMPLES,
            gaussian_norm: GaussianNorm::MeanAndStd,
            entropy_coef: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.actor_lr > 0.0 && self.actor_lr.is_finite()) {
            return bad(format!("actor_lr must be positive, got {}", self.actor_lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.ob_n_samples < 2 {
            return bad(format!("ob_n_samples must be at least 2, got {}", self.ob_n_samples));
        }
        if !(self.entropy_coef >= 0.0 && self.entropy_coef.is_finite()) {
            return bad(format!("entropy_coef must be non-negative, got {}", self.entropy_coef));
        }
        if self.horizon == Some(0) {
            return bad("horizon must be at least 1".into());
        }
        if let CriticMode::Td { lr, target_sync } = self.critic {
            if !(lr > 0.0 && lr <= 1.0) {
                return bad(format!("critic lr must lie in (0, 1], got {lr}"));
            }
            if target_sync == 0 {
                return bad("target_sync must be at least 1".into());
            }
        }
        if let PpoMode::Clip { eps, epochs } = self.ppo {
            if !(eps > 0.0 && eps < 1.0) {
                return bad(format!("clip eps must lie in (0, 1), got {eps}"));
            }
            if epochs == 0 {
                return bad("ppo epochs must be at least 1".into());
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }
}

/// Tabular Q-critic learned by one-step TD with a periodically synced target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TdCritic {
    n_joint: usize,
    q: Vec<f64>,
    target: Vec<f64>,
    lr: f64,
    target_sync: usize,
    updates: usize,
}

impl TdCritic {
    pub fn new(game: &MarkovGame, lr: f64, target_sync: usize) -> Self {
        Self::with_values(game, vec![0.0; game.n_states() * game.n_joint_actions()], lr, target_sync)
    }

    pub fn with_values(game: &MarkovGame, q: Vec<f64>, lr: f64, target_sync: usize) -> Self {
        debug_assert_eq!(q.len(), game.n_states() * game.n_joint_actions());
        Self { n_joint: game.n_joint_actions(), target: q.clone(), q, lr, target_sync, updates: 0 }
    }

    #[inline]
    pub fn q(&self, s: usize, joint: usize) -> f64 {
        self.q[s * self.n_joint + joint]
    }

    pub fn table(&self) -> &[f64] {
        &self.q
    }

    pub fn updates(&self) -> usize {
        self.updates
    }

    /// `max |Q_TD - Q|` against exact tables.
    pub fn sup_error(&self, tables: &ValueTables) -> f64 {
        self.q.iter().zip(tables.q_table()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    fn bootstrap(&self, game: &MarkovGame, policy: &JointPolicy) -> Result<Vec<f64>> {
        (0..game.n_states())
            .map(|s| {
                let probs = policy.joint_probs(game, s)?;
                Ok(probs.iter().enumerate().map(|(j, p)| p * self.target[s * self.n_joint + j]).sum())
            })
            .collect()
    }

    fn finish_update(&mut self) {
        self.updates += 1;
        if self.updates % self.target_sync == 0 {
            self.target.clone_from(&self.q);
        }
    }
}

/// One synchronous TD update from a batch of transitions: every visited
/// `(s, a)` moves by `lr` times its mean TD error
/// `r + gamma E_{a' ~ pi}[Q_target(s', a')] - Q(s, a)`.
pub fn td_learn_q(game: &MarkovGame, policy: &JointPolicy, batch: &[Step], critic: &mut TdCritic) -> Result<()> {
    let boot = critic.bootstrap(game, policy)?;
    let mut sum = vec![0.0; critic.q.len()];
    let mut count = vec![0usize; critic.q.len()];
    for step in batch {
        let k = step.state * critic.n_joint + step.joint;
        sum[k] += step.reward + game.gamma() * boot[step.next_state] - critic.q[k];
        count[k] += 1;
    }
    for ((q, s), &c) in critic.q.iter_mut().zip(&sum).zip(&count) {
        if c > 0 {
            *q += critic.lr * s / c as f64;
        }
    }
    critic.finish_update();
    Ok(())
}

/// One synchronous expected-TD sweep over every `(s, a)`, weighting next
/// states by the transition kernel.
pub fn td_sweep(game: &MarkovGame, policy: &JointPolicy, critic: &mut TdCritic) -> Result<()> {
    let boot = critic.bootstrap(game, policy)?;
    for s in 0..game.n_states() {
        for j in 0..game.n_joint_actions() {
            let next: f64 = game.transition_row(s, j).iter().zip(&boot).map(|(p, v)| p * v).sum();
            let k = s * critic.n_joint + j;
            critic.q[k] += critic.lr * (game.reward(s, j) + game.gamma() * next - critic.q[k]);
        }
    }
    critic.finish_update();
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iteration: usize,
    /// Exact `J` of the policy that collected the batch.
    pub expected_return: f64,
    /// Total sample variance of the per-trajectory gradient over the batch.
    pub grad_variance: f64,
    /// Norm of the batch-mean gradient.
    pub grad_norm: f64,
    pub entropy: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub schema_version: u32,
    pub rows: Vec<HistoryRow>,
    /// `J` after the last update.
    pub final_return: f64,
}

impl TrainHistory {
    pub fn mean_grad_variance(&self) -> f64 {
        if self.rows.is_empty() {
            return 0.0;
        }
        self.rows.iter().map(|r| r.grad_variance).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let n_agents = self.rows.first().map_or(0, |r| r.entropy.len());
        let mut out = String::from("schema_version,iteration,expected_return,grad_variance,grad_norm");
        for i in 0..n_agents {
            out.push_str(&format!(",entropy_{i}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                self.schema_version, r.iteration, r.expected_return, r.grad_variance, r.grad_norm
            ));
            for e in &r.entropy {
                out.push_str(&format!(",{e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Serializable ChaCha8 position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    fn capture(seed: u64, rng: &ChaCha8Rng) -> Self {
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub iteration: usize,
    pub config: TrainConfig,
    pub policy: JointPolicy,
    pub critic: Option<TdCritic>,
    pub rng: RngState,
    pub history: TrainHistory,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        if c.schema_version != crate::SCHEMA_VERSION {
            return Err(Error::Parse(format!("unsupported checkpoint schema_version {}", c.schema_version)));
        }
        c.config.validate()?;
        Ok(c)
    }
}

/// Softmax trainer on a finite Markov game.
pub struct Trainer<'g> {
    game: &'g MarkovGame,
    policy: JointPolicy,
    config: TrainConfig,
    rng: ChaCha8Rng,
    critic: Option<TdCritic>,
    horizon: usize,
    history: TrainHistory,
}

/// One agent's sample inside a batch.
struct Sample {
    state: usize,
    action: usize,
    signal: f64,
    weight: f64,
    old_prob: f64,
}

fn entropy_gradient(policy: &crate::policy::SoftmaxPolicy) -> Vec<f64> {
    let k = policy.n_actions();
    let n = policy.n_states() as f64;
    let mut g = vec![0.0; policy.param_dim()];
    for s in 0..policy.n_states() {
        let p = policy.probs(s);
        let h: f64 = -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
        for c in 0..k {
            if p[c] > 0.0 {
                g[s * k + c] = -p[c] * (p[c].ln() + h) / n;
            }
        }
    }
    g
}

fn sample_variance(draws: &[Vec<f64>]) -> f64 {
    let n = draws.len();
    if n < 2 {
        return 0.0;
    }
    let dim = draws[0].len();
    let mut mean = vec![0.0; dim];
    for d in draws {
        mean.iter_mut().zip(d).for_each(|(m, x)| *m += x / n as f64);
    }
    draws
        .iter()
        .map(|d| d.iter().zip(&mean).map(|(x, m)| (x - m) * (x - m)).sum::<f64>())
        .sum::<f64>()
        / (n - 1) as f64
}

fn mean_of(draws: &[Vec<f64>], dim: usize) -> Vec<f64> {
    let mut mean = vec![0.0; dim];
    for d in draws {
        mean.iter_mut().zip(d).for_each(|(m, x)| *m += x);
    }
    let n = draws.len().max(1) as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    mean
}

/// Baseline for a softmax actor; where the x-measure is undefined (an
/// essentially deterministic actor) the OB falls back to the counterfactual.
fn baseline_or_fallback(kind: BaselineKind, row: &[f64], pi: &[f64]) -> Result<f64> {
    match discrete_baseline(kind, row, pi) {
        Err(Error::DegeneratePolicy(_)) => discrete_baseline(BaselineKind::Coma, row, pi),
        other => other,
    }
}

impl<'g> Trainer<'g> {
    pub fn new(game: &'g MarkovGame, policy: JointPolicy, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        policy.check_discrete_for(game)?;
        let critic = match config.critic {
            CriticMode::Exact => None,
            CriticMode::Td { lr, target_sync } => Some(TdCritic::new(game, lr, target_sync)),
        };
        let horizon = config.horizon.unwrap_or_else(|| default_horizon(game.gamma(), game.beta()));
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Ok(Self {
            game,
            policy,
            config,
            rng,
            critic,
            horizon,
            history: TrainHistory { schema_version: crate::SCHEMA_VERSION, ..Default::default() },
        })
    }

    pub fn resume(game: &'g MarkovGame, checkpoint: Checkpoint) -> Result<Self> {
        let mut t = Self::new(game, checkpoint.policy, checkpoint.config)?;
        t.critic = checkpoint.critic;
        t.rng = checkpoint.rng.restore();
        t.history = checkpoint.history;
        Ok(t)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: crate::SCHEMA_VERSION,
            iteration: self.history.rows.len(),
            config: self.config.clone(),
            policy: self.policy.clone(),
            critic: self.critic.clone(),
            rng: RngState::capture(self.config.seed, &self.rng),
            history: self.history.clone(),
        }
    }

    pub fn policy(&self) -> &JointPolicy {
        &self.policy
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn critic(&self) -> Option<&TdCritic> {
        self.critic.as_ref()
    }

    fn guard(&self, j: f64) -> Result<()> {
        let limit = 10.0 * self.game.beta() / (1.0 - self.game.gamma());
        if j.is_finite() && j.abs() <= limit {
            Ok(())
        } else {
            Err(Error::Diverged { iteration: self.history.rows.len(), value: j, limit })
        }
    }

    fn rollout(&mut self) -> Result<Vec<Trajectory>> {
        let batch_seed: u64 = self.rng.random();
        let (game, policy, horizon) = (self.game, &self.policy, self.horizon);
        (0..self.config.batch_size)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
                rng.set_stream(k as u64);
                sample_trajectory(game, policy, horizon, &mut rng)
            })
            .collect()
    }

    /// One iteration: rollout, baseline, actor update, critic update.
    pub fn step(&mut self) -> Result<&HistoryRow> {
        let game = self.game;
        let tables = solve_values(game, &self.policy)?;
        let j = expected_return(game, &tables);
        self.guard(j)?;
        let trajectories = self.rollout()?;
        let space = game.space();
        let n_agents = game.n_agents();
        let critic_q = |s: usize, joint: usize| match &self.critic {
            Some(c) => c.q(s, joint),
            None => tables.q(s, joint),
        };

        let mut samples: Vec<Vec<Sample>> = (0..n_agents).map(|_| Vec::new()).collect();
        let mut draws: Vec<Vec<Vec<f64>>> = (0..n_agents).map(|_| Vec::new()).collect();
        for traj in &trajectories {
            for (i, agent_samples) in samples.iter_mut().enumerate() {
                let actor = self.policy.softmax(i)?;
                let mut g = vec![0.0; actor.param_dim()];
                let mut discount = 1.0;
                for step in &traj.steps {
                    let pi = actor.probs(step.state);
                    let row: Vec<f64> =
                        (0..space.size(i)).map(|b| critic_q(step.state, space.with_action(step.joint, i, b))).collect();
                    let b = baseline_or_fallback(self.config.baseline, &row, pi)?;
                    let a = space.action_of(step.joint, i);
                    let x = critic_q(step.state, step.joint) - b;
                    add_score(&mut g, pi, step.state, a, discount * x);
                    agent_samples.push(Sample { state: step.state, action: a, signal: x, weight: discount, old_prob: pi[a] });
                    discount *= game.gamma();
                }
                draws[i].push(g);
            }
        }

        let entropy: Vec<f64> = (0..n_agents).map(|i| self.policy.softmax(i).map(|p| p.mean_entropy())).collect::<Result<_>>()?;
        let grad_variance: f64 = draws.iter().map(|d| sample_variance(d)).sum();
        let means: Vec<Vec<f64>> = (0..n_agents)
            .map(|i| Ok(mean_of(&draws[i], self.policy.softmax(i)?.param_dim())))
            .collect::<Result<_>>()?;
        let grad_norm = means.iter().map(|m| norm_sq(m)).sum::<f64>().sqrt();

        let batch = self.config.batch_size as f64;
        let lr = self.config.actor_lr;
        let ent = self.config.entropy_coef;
        match self.config.ppo {
            PpoMode::Off => {
                for (i, mean) in means.iter().enumerate() {
                    let actor = self.policy.softmax_mut(i)?;
                    let eg = entropy_gradient(actor);
                    let update: Vec<f64> = mean.iter().zip(&eg).map(|(g, e)| lr * (g + ent * e)).collect();
                    actor.add_flat(&update)?;
                }
            }
            PpoMode::Clip { eps, epochs } => {
                for _ in 0..epochs {
                    for (i, agent_samples) in samples.iter().enumerate() {
                        let actor = self.policy.softmax_mut(i)?;
                        let mut grad = entropy_gradient(actor);
                        grad.iter_mut().for_each(|g| *g *= ent);
                        for smp in agent_samples {
                            let pi = actor.probs(smp.state);
                            let ratio = pi[smp.action] / smp.old_prob;
                            let clipped_out = (smp.signal > 0.0 && ratio > 1.0 + eps) || (smp.signal < 0.0 && ratio < 1.0 - eps);
                            if !clipped_out {
                                add_score(&mut grad, pi, smp.state, smp.action, smp.weight * ratio * smp.signal / batch);
                            }
                        }
                        grad.iter_mut().for_each(|g| *g *= lr);
                        actor.add_flat(&grad)?;
                    }
                }
            }
        }

        if let Some(critic) = self.critic.as_mut() {
            let steps: Vec<Step> = trajectories.iter().flat_map(|t| t.steps.iter().copied()).collect();
            td_learn_q(game, &self.policy, &steps, critic)?;
        }

        let row = HistoryRow { iteration: self.history.rows.len(), expected_return: j, grad_variance, grad_norm, entropy };
        self.history.rows.push(row);
        Ok(self.history.rows.last().expect("row just pushed"))
    }

    /// Runs the remaining configured iterations and records the final return.
    pub fn run(&mut self) -> Result<&TrainHistory> {
        while self.history.rows.len() < self.config.iterations {
            self.step()?;
        }
        let j = expected_return(self.game, &solve_values(self.game, &self.policy)?);
        self.guard(j)?;
        self.history.final_return = j;
        Ok(&self.history)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub history: TrainHistory,
    pub policy: JointPolicy,
    pub checkpoint: Checkpoint,
}

/// Trains a softmax joint policy for `config.iterations` iterations.
pub fn train(game: &MarkovGame, initial: &JointPolicy, config: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(game, initial.clone(), config.clone())?;
    trainer.run()?;
    Ok(TrainOutcome {
        history: trainer.history().clone(),
        policy: trainer.policy().clone(),
        checkpoint: trainer.checkpoint(),
    })
}

/// Per-seed outcome of one baseline in a comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mean_grad_variance: f64,
    pub final_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub baseline: BaselineKind,
    pub seeds: Vec<SeedResult>,
    pub mean_variance: f64,
    pub sd_variance: f64,
    pub mean_final_return: f64,
    pub sd_final_return: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub schema_version: u32,
    pub rows: Vec<ComparisonRow>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (mean, sd)
}

impl Comparison {
    pub fn row(&self, baseline: BaselineKind) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.baseline == baseline)
    }

    /// Seeds on which `a` had strictly lower mean gradient variance than `b`.
    pub fn paired_wins(&self, a: BaselineKind, b: BaselineKind) -> usize {
        match (self.row(a), self.row(b)) {
            (Some(ra), Some(rb)) => ra
                .seeds
                .iter()
                .zip(&rb.seeds)
                .filter(|(x, y)| x.mean_grad_variance < y.mean_grad_variance)
                .count(),
            _ => 0,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,baseline,seed,mean_grad_variance,final_return\n");
        for r in &self.rows {
            for s in &r.seeds {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    self.schema_version,
                    r.baseline.name(),
                    s.seed,
                    s.mean_grad_variance,
                    s.final_return
                ));
            }
            out.push_str(&format!("{},{},mean,{},{}\n", self.schema_version, r.baseline.name(), r.mean_variance, r.mean_final_return));
            out.push_str(&format!("{},{},sd,{},{}\n", self.schema_version, r.baseline.name(), r.sd_variance, r.sd_final_return));
        }
        out
    }
}

/// Trains every baseline kind on the same seeds (paired comparison).
pub fn compare_baselines(
    game: &MarkovGame,
    initial: &JointPolicy,
    config: &TrainConfig,
    kinds: &[BaselineKind],
    seeds: &[u64],
) -> Result<Comparison> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("comparison needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &kind in kinds {
        let results: Vec<SeedResult> = seeds
            .iter()
            .map(|&seed| {
                let cfg = TrainConfig { baseline: kind, seed, ..config.clone() };
                let out = train(game, initial, &cfg)?;
                Ok(SeedResult { seed, mean_grad_variance: out.history.mean_grad_variance(), final_return: out.history.final_return })
            })
            .collect::<Result<_>>()?;
        let (mean_variance, sd_variance) = mean_sd(&results.iter().map(|r| r.mean_grad_variance).collect::<Vec<_>>());
        let (mean_final_return, sd_final_return) = mean_sd(&results.iter().map(|r| r.final_return).collect::<Vec<_>>());
        rows.push(ComparisonRow { baseline: kind, seeds: results, mean_variance, sd_variance, mean_final_return, sd_final_return });
    }
    Ok(Comparison { schema_version: crate::SCHEMA_VERSION, rows })
}

/// A one-step game with continuous per-agent actions and a known critic.
pub trait ContinuousGame: Sync {
    fn n_agents(&self) -> usize;
    fn action_dim(&self, agent: usize) -> usize;
    /// `Q(a)`, which for a one-step game is the reward.
    fn reward(&self, actions: &[Vec<f64>]) -> f64;
    /// `J` of independent Gaussian actors with the given means and stds.
    fn expected_reward(&self, means: &[&[f64]], stds: &[&[f64]]) -> f64;
}

/// `r(a) = -||sum_i a^i - target||^2 - penalty * sum_i ||a^i||^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticGame {
    pub n_agents: usize,
    pub target: Vec<f64>,
    pub penalty: f64,
}

impl ContinuousGame for QuadraticGame {
    fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn action_dim(&self, _agent: usize) -> usize {
        self.target.len()
    }

    fn reward(&self, actions: &[Vec<f64>]) -> f64 {
        let d = self.target.len();
        let mut miss = 0.0;
        for k in 0..d {
            let sum: f64 = actions.iter().map(|a| a[k]).sum();
            miss += (sum - self.target[k]).powi(2);
        }
        -miss - self.penalty * actions.iter().map(|a| norm_sq(a)).sum::<f64>()
    }

    fn expected_reward(&self, means: &[&[f64]], stds: &[&[f64]]) -> f64 {
        let d = self.target.len();
        let mut miss = 0.0;
        for k in 0..d {
            let sum: f64 = means.iter().map(|m| m[k]).sum();
            miss += (sum - self.target[k]).powi(2);
        }
        let spread: f64 = stds.iter().map(|s| norm_sq(s)).sum();
        let own: f64 = means.iter().zip(stds).map(|(m, s)| norm_sq(m) + norm_sq(s)).sum();
        -miss - spread - self.penalty * own
    }
}

fn gaussians(policy: &JointPolicy) -> Result<Vec<&GaussianPolicy>> {
    policy
        .agents()
        .iter()
        .map(|a| match a {
            AgentPolicy::Gaussian(g) if g.n_states() == 1 => Ok(g),
            AgentPolicy::Gaussian(_) => Err(Error::InvalidPolicy("continuous games are stateless: use one state".into())),
            AgentPolicy::Softmax(_) => Err(Error::InvalidPolicy("continuous training needs gaussian actors".into())),
        })
        .collect()
}

fn gaussian_entropy(std: &[f64]) -> f64 {
    std.iter().map(|s| 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * s * s).ln()).sum()
}

/// Trains Gaussian actors on a one-step continuous game. Baselines are
/// formed from `ob_n_samples` counterfactual actions per sample, scored by
/// the critic.
pub fn train_gaussian(game: &dyn ContinuousGame, initial: &JointPolicy, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let n = game.n_agents();
    if initial.n_agents() != n {
        return Err(Error::LengthMismatch { expected: n, got: initial.n_agents() });
    }
    for (i, g) in gaussians(initial)?.iter().enumerate() {
        if g.action_dim() != game.action_dim(i) {
            return Err(Error::LengthMismatch { expected: game.action_dim(i), got: g.action_dim() });
        }
    }
    let mut policy = initial.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory { schema_version: crate::SCHEMA_VERSION, ..Default::default() };
    let j_of = |p: &JointPolicy| -> Result<f64> {
        let gs = gaussians(p)?;
        let means: Vec<&[f64]> = gs.iter().map(|g| g.mean(0)).collect();
        let stds: Vec<&[f64]> = gs.iter().map(|g| g.std(0)).collect();
        Ok(game.expected_reward(&means, &stds))
    };
    for iteration in 0..config.iterations {
        let j = j_of(&policy)?;
        if !j.is_finite() {
            return Err(Error::Diverged { iteration, value: j, limit: f64::INFINITY });
        }
        let gs: Vec<GaussianPolicy> = gaussians(&policy)?.into_iter().cloned().collect();
        let batch: Vec<Vec<Vec<f64>>> =
            (0..config.batch_size).map(|_| gs.iter().map(|g| g.sample(0, &mut rng)).collect()).collect();
        let batch_seed: u64 = rng.random();
        // signals[i][k]: X for agent i on joint sample k
        let signals: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                (0..batch.len())
                    .into_par_iter()
                    .map(|k| {
                        let mut local = ChaCha8Rng::seed_from_u64(batch_seed);
                        local.set_stream((i * batch.len() + k) as u64);
                        let q = game.reward(&batch[k]);
                        let (mean, std) = (gs[i].mean(0), gs[i].std(0));
                        let mut counterfactual = batch[k].clone();
                        let mut values = Vec::with_capacity(config.ob_n_samples);
                        let mut weights = Vec::with_capacity(config.ob_n_samples);
                        for _ in 0..config.ob_n_samples {
                            let a = sample_gaussian(mean, std, &mut local);
                            let g = gaussian_log_prob_grad(mean, std, &a)?;
                            weights.push(match config.gaussian_norm {
                                GaussianNorm::MeanAndStd => norm_sq(&g),
                                GaussianNorm::MeanOnly => norm_sq(&g[..mean.len()]),
                            });
                            counterfactual[i] = a;
                            values.push(game.reward(&counterfactual));
                        }
                        let b = match config.baseline {
                            BaselineKind::None => 0.0,
                            BaselineKind::Coma => weighted_ratio(&values, &vec![1.0; values.len()])?.value,
                            BaselineKind::ObExact | BaselineKind::ObSurrogate => weighted_ratio(&values, &weights)?.value,
                        };
                        Ok(q - b)
                    })
                    .collect::<Result<Vec<f64>>>()
            })
            .collect::<Result<_>>()?;

        let mut grad_variance = 0.0;
        let mut grad_norm_sq = 0.0;
        let mut new_agents = Vec::with_capacity(n);
        for i in 0..n {
            let (mean, std) = (gs[i].mean(0).to_vec(), gs[i].std(0).to_vec());
            let draws: Vec<Vec<f64>> = batch
                .iter()
                .zip(&signals[i])
                .map(|(a, x)| Ok(gaussian_log_prob_grad(&mean, &std, &a[i])?.into_iter().map(|g| x * g).collect()))
                .collect::<Result<_>>()?;
            grad_variance += sample_variance(&draws);
            let g_mean = mean_of(&draws, 2 * mean.len());
            grad_norm_sq += norm_sq(&g_mean);
            let (mut m, mut s) = (mean.clone(), std.clone());
            let apply = |m: &mut Vec<f64>, s: &mut Vec<f64>, g: &[f64]| {
                let d = m.len();
                for k in 0..d {
                    m[k] += config.actor_lr * g[k];
                    s[k] = (s[k] + config.actor_lr * (g[d + k] + config.entropy_coef / s[k])).max(MIN_STD);
                }
            };
            match config.ppo {
                PpoMode::Off => apply(&mut m, &mut s, &g_mean),
                PpoMode::Clip { eps, epochs } => {
                    for _ in 0..epochs {
                        let mut g = vec![0.0; 2 * m.len()];
                        for (a, &x) in batch.iter().zip(&signals[i]) {
                            let ratio = (gaussian_log_density(&m, &s, &a[i])? - gaussian_log_density(&mean, &std, &a[i])?).exp();
                            let clipped_out = (x > 0.0 && ratio > 1.0 + eps) || (x < 0.0 && ratio < 1.0 - eps);
                            if !clipped_out {
                                let score = gaussian_log_prob_grad(&m, &s, &a[i])?;
                                g.iter_mut().zip(&score).for_each(|(gk, sk)| *gk += ratio * x * sk / batch.len() as f64);
                            }
                        }
                        apply(&mut m, &mut s, &g);
                    }
                }
            }
            new_agents.push(AgentPolicy::Gaussian(GaussianPolicy::new(vec![m], vec![s])?));
        }
        let entropy = gs.iter().map(|g| gaussian_entropy(g.std(0))).collect();
        history.rows.push(HistoryRow { iteration, expected_return: j, grad_variance, grad_norm: grad_norm_sq.sqrt(), entropy });
        policy = JointPolicy::new(new_agents)?;
    }
    history.final_return = j_of(&policy)?;
    let checkpoint = Checkpoint {
        schema_version: crate::SCHEMA_VERSION,
        iteration: config.iterations,
        config: config.clone(),
        policy: policy.clone(),
        critic: None,
        rng: RngState::capture(config.seed, &rng),
        history: history.clone(),
    };
    Ok(TrainOutcome { history, policy, checkpoint })
}

/// The 2-agent, 3-action one-step game paying 1 when both agents pick the same action.
pub fn coordination_game() -> Result<MarkovGame> {
    let payoff = (0..9).map(|j| if j / 3 == j % 3 { 1.0 } else { 0.0 }).collect();
    crate::game::OneStepGame::new(vec![3, 3], payoff)?.to_markov_game(0.0)
}
