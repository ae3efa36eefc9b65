//! Exact variance analysis of multi-agent policy-gradient estimators on
//! finite Markov games, with the optimal baseline (OB) for softmax and
//! Gaussian actors, brute-force verification suites for the variance
//! identities and bounds, and a tabular trainer that substitutes OB-shifted
//! signals into MAPG and PPO-clip updates.
//!
//! Module map:
//! - [`game`]: finite Markov games, joint-action indexing, the game file format.
//! - [`policy`]: softmax and Gaussian actors, score functions, the x-measure.
//! - [`values`]: exact `Q`/`V`, marginal multi-agent `Q` and advantages.
//! - [`baselines`]: zero, COMA, exact OB and surrogate OB baselines.
//! - [`estimators`]: per-step and trajectory gradient contributions.
//! - [`variance`]: exact and Monte-Carlo variances, decompositions, bound checks.
//! - [`trainer`]: desk-scale actor training with exact or TD critics.
//! - [`toy`]: the three-action single-agent worked example.
//! - [`verify`]: randomized identity/bound suites used by the CLI.
//! - [`cli`]: the `mapg` command-line front end.

pub mod baselines;
pub mod cli;
pub mod error;
pub mod estimators;
pub mod game;
pub mod policy;
pub mod toy;
pub mod trainer;
pub mod values;
pub mod variance;
pub mod verify;

pub use error::{Error, Result};
pub use game::{JointActionSpace, MarkovGame, OneStepGame, ValidationReport};
pub use policy::{AgentPolicy, GaussianPolicy, JointPolicy, SoftmaxPolicy};
pub use values::{AgentSubset, ValueTables};

/// Version tag written into every JSON/CSV artifact this crate emits.
pub const SCHEMA_VERSION: u32 = 1;
