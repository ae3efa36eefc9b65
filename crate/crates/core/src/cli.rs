//! The `mapg` command line. Every subcommand writes its artifact into the
//! output directory and a short summary to stdout.
//!
//! Exit codes: 0 success, 1 verification or golden failure (or a diverged
//! run), 2 usage error or invalid input file, 3 I/O error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::baselines::BaselineKind;
use crate::error::{Error, Result};
use crate::game::{random_game, MarkovGame};
use crate::policy::JointPolicy;
use crate::toy::ToyReport;
use crate::trainer::{compare_baselines, coordination_game, Checkpoint, TrainConfig, Trainer};
use crate::variance::{variance_report, ReportOptions};
use crate::verify::run_all;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    fn ext(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "mapg", version, about = "Exact variance analysis and optimal baselines for multi-agent policy gradients")]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if absent.
    #[arg(long, global = true, env = "MAPG_OUT_DIR", default_value = "mapg-out")]
    out: PathBuf,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rebuild the three-action worked example and check it against the reference figures.
    Toy,
    /// Run the identity and bound suites over random games.
    Verify(VerifyArgs),
    /// Exact and Monte-Carlo variance report for one agent.
    Report(ReportArgs),
    /// Train tabular softmax actors.
    Train(TrainArgs),
    /// Write a random game file.
    Gen(GenArgs),
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 50)]
    games: usize,
    #[arg(long, default_value_t = 2)]
    agents: usize,
    /// Negative control: flips a sign inside one identity.
    #[arg(long, hide = true)]
    sabotage: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    game: PathBuf,
    /// Policy file, or `uniform`.
    #[arg(long, default_value = "uniform")]
    policy: String,
    #[arg(long, default_value_t = 0)]
    agent: usize,
    /// Monte-Carlo trajectories per estimator kind.
    #[arg(long)]
    mc: Option<usize>,
    /// Timesteps with a per-step decomposition.
    #[arg(long, default_value_t = 5)]
    steps: usize,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Game file, or `coordination` for the built-in 3-action coordination game.
    #[arg(long)]
    game: String,
    /// JSON training config; omitted fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured baseline. A comma-separated list runs a
    /// paired-seed comparison instead.
    #[arg(long, value_delimiter = ',')]
    baseline: Vec<BaselineKind>,
    /// Seeds in a comparison, starting at the run seed.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
    /// Initial policy file, or `uniform`.
    #[arg(long, default_value = "uniform")]
    policy: String,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, conflicts_with_all = ["config", "policy"])]
    resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    agents: usize,
    #[arg(long)]
    states: usize,
    #[arg(long)]
    actions: usize,
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io(_) => EXIT_IO,
        Error::Diverged { .. } => EXIT_FAILURE,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn execute(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    fs::create_dir_all(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    match &cli.command {
        Command::Toy => {
            let report = ToyReport::build()?;
            write_artifact(cli, "toy", || report.to_json(), || Ok(report.to_csv()))?;
            stdout.write_all(report.render().as_bytes())?;
            Ok(if report.all_pass() { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Verify(a) => {
            let report = run_all(a.games, a.agents, seed, a.sabotage)?;
            write_artifact(cli, "verify", || report.to_json(), || Ok(report.to_csv()))?;
            stdout.write_all(report.render().as_bytes())?;
            Ok(if report.passed { EXIT_OK } else { EXIT_FAILURE })
        }
        Command::Report(a) => {
            let game = read_game(&a.game)?;
            let policy = read_policy(&a.policy, &game)?;
            let options = ReportOptions { steps: a.steps, mc: a.mc.map(|n| (n, seed)) };
            let report = variance_report(&game, &policy, a.agent, options)?;
            write_artifact(cli, "report", || report.to_json(), || Ok(report.to_csv()))?;
            for k in &report.kinds {
                writeln!(stdout, "{:<14} discounted-sum={} trajectory={}", k.kind.name(), k.discounted_sum, k.trajectory_variance)?;
            }
            Ok(EXIT_OK)
        }
        Command::Train(a) => train(cli, a, stdout),
        Command::Gen(a) => {
            let game = random_game(a.agents, a.states, a.actions, seed)?;
            fs::write(cli.out.join("game.json"), game.to_json()?)?;
            writeln!(stdout, "wrote game.json: {} agents, {} states, {} joint actions", a.agents, a.states, game.n_joint_actions())?;
            Ok(EXIT_OK)
        }
    }
}

fn train(cli: &Cli, a: &TrainArgs, stdout: &mut dyn Write) -> Result<i32> {
    let game = if a.game == "coordination" { coordination_game()? } else { read_game(Path::new(&a.game))? };
    let mut trainer = match &a.resume {
        Some(path) => {
            if !a.baseline.is_empty() || cli.seed.is_some() {
                return Err(Error::InvalidConfig("--resume keeps the checkpoint's baseline and seed".into()));
            }
            Trainer::resume(&game, Checkpoint::from_json(&fs::read_to_string(path)?)?)?
        }
        None => {
            let mut config = match &a.config {
                Some(path) => TrainConfig::from_json(&fs::read_to_string(path)?)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = cli.seed {
                config.seed = s;
            }
            let policy = read_policy(&a.policy, &game)?;
            if a.baseline.len() > 1 {
                let seeds: Vec<u64> = (0..a.seeds).map(|k| config.seed + k).collect();
                let comparison = compare_baselines(&game, &policy, &config, &a.baseline, &seeds)?;
                write_artifact(cli, "comparison", || Ok(serde_json::to_string_pretty(&comparison)?), || Ok(comparison.to_csv()))?;
                for r in &comparison.rows {
                    writeln!(
                        stdout,
                        "{:<13} mean-grad-variance={} final-return={}",
                        r.baseline.name(),
                        r.mean_variance,
                        r.mean_final_return
                    )?;
                }
                return Ok(EXIT_OK);
            }
            if let Some(&b) = a.baseline.first() {
                config.baseline = b;
            }
            Trainer::new(&game, policy, config)?
        }
    };
    let history = trainer.run()?.clone();
    write_artifact(cli, "history", || history.to_json(), || Ok(history.to_csv()))?;
    fs::write(cli.out.join("checkpoint.json"), trainer.checkpoint().to_json()?)?;
    writeln!(
        stdout,
        "iterations={} final-return={} mean-grad-variance={}",
        history.rows.len(),
        history.final_return,
        history.mean_grad_variance()
    )?;
    Ok(EXIT_OK)
}

fn write_artifact(
    cli: &Cli,
    stem: &str,
    json: impl FnOnce() -> Result<String>,
    csv: impl FnOnce() -> Result<String>,
) -> Result<()> {
    let mut text = match cli.format {
        Format::Json => json()?,
        Format::Csv => csv()?,
    };
    if !text.ends_with('\n') {
        text.push('\n');
    }
    fs::write(cli.out.join(format!("{stem}.{}", cli.format.ext())), text)?;
    Ok(())
}

fn read_game(path: &Path) -> Result<MarkovGame> {
    let game = MarkovGame::from_json(&fs::read_to_string(path)?)?;
    let report = game.validate();
    if !report.is_empty() {
        return Err(Error::InvalidGame(format!("{}: {report:?}", path.display())));
    }
    Ok(game)
}

fn read_policy(spec: &str, game: &MarkovGame) -> Result<JointPolicy> {
    let policy = if spec == "uniform" { JointPolicy::uniform(game) } else { JointPolicy::from_json(&fs::read_to_string(spec)?)? };
    policy.check_discrete_for(game)?;
    Ok(policy)
}
