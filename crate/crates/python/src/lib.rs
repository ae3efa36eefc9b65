//! Python bindings: games, policies, exact values, baselines, variance
//! reports, verification and training. Structured results cross the
//! boundary as JSON strings, in the same schemas the CLI writes.

use mapg_core::baselines::{self, BaselineKind};
use mapg_core::estimators::EstimatorKind;
use mapg_core::policy::{softmax_probs, x_measure_softmax};
use mapg_core::trainer::{self, TrainConfig};
use mapg_core::values::{expected_return, solve_values};
use mapg_core::variance::{self, ReportOptions};
use mapg_core::{toy, verify, Error, JointPolicy, MarkovGame, OneStepGame, SoftmaxPolicy};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// A finite Markov game.
#[pyclass(name = "Game", module = "mapg", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyGame(MarkovGame);

#[pymethods]
impl PyGame {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        MarkovGame::from_json(text).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (agents, states, actions, seed=0))]
    fn random(agents: usize, states: usize, actions: usize, seed: u64) -> PyResult<Self> {
        mapg_core::game::random_game(agents, states, actions, seed).map(Self).map_err(err)
    }

    /// Single-state game paying `payoff[joint]`; `payoff` is in joint-action order.
    #[staticmethod]
    #[pyo3(signature = (action_sizes, payoff, gamma=0.0))]
    fn one_step(action_sizes: Vec<usize>, payoff: Vec<f64>, gamma: f64) -> PyResult<Self> {
        OneStepGame::new(action_sizes, payoff).and_then(|g| g.to_markov_game(gamma)).map(Self).map_err(err)
    }

    #[staticmethod]
    fn coordination() -> PyResult<Self> {
        trainer::coordination_game().map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    /// Human-readable invariant violations; empty for a valid game.
    fn validate(&self) -> Vec<String> {
        self.0.validate().violations.iter().map(|v| v.to_string()).collect()
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.0.n_agents()
    }

    #[getter]
    fn n_states(&self) -> usize {
        self.0.n_states()
    }

    #[getter]
    fn n_joint_actions(&self) -> usize {
        self.0.n_joint_actions()
    }

    #[getter]
    fn action_sizes(&self) -> Vec<usize> {
        self.0.action_sizes().to_vec()
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta()
    }

    fn __repr__(&self) -> String {
        format!(
            "Game(agents={}, states={}, actions={:?}, gamma={})",
            self.0.n_agents(),
            self.0.n_states(),
            self.0.action_sizes(),
            self.0.gamma()
        )
    }
}

/// Independent per-agent actors.
#[pyclass(name = "Policy", module = "mapg", frozen, from_py_object)]
#[derive(Clone)]
pub struct PyPolicy(JointPolicy);

#[pymethods]
impl PyPolicy {
    #[staticmethod]
    fn uniform(game: &PyGame) -> Self {
        Self(JointPolicy::uniform(&game.0))
    }

    /// Tabular softmax actors from `logits[agent][state][action]`.
    #[staticmethod]
    fn softmax(logits: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        let agents = logits.into_iter().map(SoftmaxPolicy::new).collect::<mapg_core::Result<Vec<_>>>().map_err(err)?;
        JointPolicy::from_softmax(agents).map(Self).map_err(err)
    }

    #[staticmethod]
    #[pyo3(signature = (game, scale=1.0, seed=0))]
    fn random(game: &PyGame, scale: f64, seed: u64) -> Self {
        Self(JointPolicy::random_softmax(&game.0, scale, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        JointPolicy::from_json(text).map(Self).map_err(err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(err)
    }

    fn probs(&self, agent: usize, state: usize) -> PyResult<Vec<f64>> {
        let actor = self.0.softmax(agent).map_err(err)?;
        if state >= actor.n_states() {
            return Err(PyValueError::new_err(format!("state {state} out of range")));
        }
        Ok(actor.probs(state).to_vec())
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.0.n_agents()
    }

    fn __repr__(&self) -> String {
        format!("Policy(agents={}, fingerprint={:016x})", self.0.n_agents(), self.0.fingerprint())
    }
}

/// Exact `(V, Q)` with `Q` flattened as `[state][joint]`.
#[pyfunction]
fn solve(game: &PyGame, policy: &PyPolicy) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let t = solve_values(&game.0, &policy.0).map_err(err)?;
    Ok((t.v_table().to_vec(), t.q_table().to_vec()))
}

#[pyfunction(name = "expected_return")]
fn expected_return_py(game: &PyGame, policy: &PyPolicy) -> PyResult<f64> {
    let t = solve_values(&game.0, &policy.0).map_err(err)?;
    Ok(expected_return(&game.0, &t))
}

#[pyfunction(name = "softmax")]
fn softmax_py(logits: Vec<f64>) -> PyResult<Vec<f64>> {
    softmax_probs(&logits).map_err(err)
}

#[pyfunction]
fn x_measure(pi: Vec<f64>) -> PyResult<Vec<f64>> {
    x_measure_softmax(&pi).map_err(err)
}

/// Baseline of the given kind (`none`, `coma`, `ob-exact`, `ob`) for a softmax actor.
#[pyfunction]
#[pyo3(signature = (q_row, pi, kind="ob"))]
fn baseline(q_row: Vec<f64>, pi: Vec<f64>, kind: &str) -> PyResult<f64> {
    baselines::discrete_baseline(parse(kind)?, &q_row, &pi).map_err(err)
}

/// `(b - b*)^2 E[||grad log pi||^2]` for a softmax actor.
#[pyfunction]
fn excess_variance(b: f64, q_row: Vec<f64>, pi: Vec<f64>) -> PyResult<f64> {
    variance::excess_surrogate_variance(b, &q_row, &pi).map_err(err)
}

/// Sampled Gaussian OB of `q_fn` around `N(mean, diag(std^2))`; returns `(value, standard_error)`.
#[pyfunction]
#[pyo3(signature = (q_fn, mean, std, n_samples=1000, seed=0))]
fn gaussian_baseline(q_fn: &Bound<'_, PyAny>, mean: Vec<f64>, std: Vec<f64>, n_samples: usize, seed: u64) -> PyResult<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let failure = std::cell::RefCell::new(None);
    let r = baselines::ob_surrogate_gaussian(
        |a| match q_fn.call1((a.to_vec(),)).and_then(|v| v.extract::<f64>()) {
            Ok(v) => v,
            Err(e) => {
                failure.borrow_mut().get_or_insert(e);
                f64::NAN
            }
        },
        &mean,
        &std,
        n_samples,
        baselines::GaussianNorm::MeanAndStd,
        &mut rng,
    );
    if let Some(e) = failure.into_inner() {
        return Err(e);
    }
    let r = r.map_err(err)?;
    Ok((r.value, r.standard_error))
}

/// Variance report for one agent as JSON.
#[pyfunction]
#[pyo3(signature = (game, policy, agent=0, steps=5, mc=None, seed=0))]
fn report(game: &PyGame, policy: &PyPolicy, agent: usize, steps: usize, mc: Option<usize>, seed: u64) -> PyResult<String> {
    let options = ReportOptions { steps, mc: mc.map(|n| (n, seed)) };
    variance::variance_report(&game.0, &policy.0, agent, options).and_then(|r| r.to_json()).map_err(err)
}

/// Monte-Carlo variance of whole-trajectory gradient draws; returns `(estimate, standard_error)`.
#[pyfunction]
#[pyo3(signature = (game, policy, kind, agent=0, n=100_000, horizon=None, seed=0))]
fn mc_variance(
    py: Python<'_>,
    game: &PyGame,
    policy: &PyPolicy,
    kind: &str,
    agent: usize,
    n: usize,
    horizon: Option<usize>,
    seed: u64,
) -> PyResult<(f64, f64)> {
    let kind: EstimatorKind = parse(kind)?;
    let (g, p) = (&game.0, &policy.0);
    py.detach(|| {
        let tables = solve_values(g, p)?;
        let horizon = horizon.unwrap_or_else(|| mapg_core::estimators::default_horizon(g.gamma(), g.beta()));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        variance::mc_variance(kind, agent, g, p, &tables, n, horizon, &mut rng)
    })
    .map(|m| (m.estimate, m.standard_error))
    .map_err(err)
}

/// The three-action worked example as JSON, and whether every golden check passed.
#[pyfunction]
fn toy_report() -> PyResult<(String, bool)> {
    let r = toy::ToyReport::build().map_err(err)?;
    Ok((r.to_json().map_err(err)?, r.all_pass()))
}

/// Runs every verification suite; returns the report as JSON.
#[pyfunction(name = "verify")]
#[pyo3(signature = (games=50, agents=2, seed=0))]
fn verify_py(py: Python<'_>, games: usize, agents: usize, seed: u64) -> PyResult<String> {
    py.detach(|| verify::run_all(games, agents, seed, false).and_then(|r| r.to_json())).map_err(err)
}

/// Trains softmax actors; `config` is a JSON training config. Returns
/// `(history_json, final_policy)`.
#[pyfunction]
#[pyo3(signature = (game, config="{}", policy=None))]
fn train(py: Python<'_>, game: &PyGame, config: &str, policy: Option<&PyPolicy>) -> PyResult<(String, PyPolicy)> {
    let config = TrainConfig::from_json(config).map_err(err)?;
    let initial = policy.map_or_else(|| JointPolicy::uniform(&game.0), |p| p.0.clone());
    let g = &game.0;
    let out = py.detach(|| trainer::train(g, &initial, &config)).map_err(err)?;
    Ok((out.history.to_json().map_err(err)?, PyPolicy(out.policy)))
}

/// Names accepted wherever a baseline kind is expected.
#[pyfunction]
fn baseline_kinds() -> Vec<&'static str> {
    BaselineKind::ALL.iter().map(|k| k.name()).collect()
}

#[pymodule]
fn mapg(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SCHEMA_VERSION", mapg_core::SCHEMA_VERSION)?;
    m.add_class::<PyGame>()?;
    m.add_class::<PyPolicy>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(expected_return_py, m)?)?;
    m.add_function(wrap_pyfunction!(softmax_py, m)?)?;
    m.add_function(wrap_pyfunction!(x_measure, m)?)?;
    m.add_function(wrap_pyfunction!(baseline, m)?)?;
    m.add_function(wrap_pyfunction!(excess_variance, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_baseline, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(mc_variance, m)?)?;
    m.add_function(wrap_pyfunction!(toy_report, m)?)?;
    m.add_function(wrap_pyfunction!(verify_py, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(baseline_kinds, m)?)?;
    Ok(())
}
