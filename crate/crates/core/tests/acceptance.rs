//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use mapg_core::baselines::{ob_surrogate_gaussian, BaselineKind, GaussianNorm};
use mapg_core::cli;
use mapg_core::estimators::EstimatorKind;
use mapg_core::policy::{gaussian_log_density, gaussian_log_prob_grad};
use mapg_core::toy::ToyReport;
use mapg_core::trainer::{compare_baselines, coordination_game, train, TrainConfig};
use mapg_core::values::solve_values;
use mapg_core::variance::{exact_trajectory_variance, mc_variance};
use mapg_core::verify::{self, CorpusSpec, SuiteResult};
use mapg_core::{JointPolicy, MarkovGame};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20240601;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn suites(results: &[SuiteResult]) -> Outcome {
    let pass = results.iter().all(SuiteResult::passed);
    let detail = results
        .iter()
        .map(|r| {
            let mut s = format!("{}: {} cases, {} violations, worst {:e}", r.name, r.cases, r.violations, r.worst);
            if let Some(v) = &r.first_violation {
                s.push_str(&format!(" [{v}]"));
            }
            s
        })
        .collect::<Vec<_>>()
        .join("; ");
    outcome(pass, detail)
}

fn within_budget(mut o: Outcome, elapsed: Duration, budget: Duration) -> Outcome {
    if elapsed > budget {
        o.pass = false;
        o.detail.push_str(&format!("; over budget {budget:?}"));
    }
    o
}

fn c01_toy() -> Outcome {
    let start = Instant::now();
    let report = ToyReport::build().unwrap();
    let elapsed = start.elapsed();
    let failed: Vec<String> = report
        .checks
        .iter()
        .filter(|c| !c.pass)
        .map(|c| format!("{} expected {:?} got {:?}", c.name, c.expected, c.actual))
        .collect();
    let detail = if failed.is_empty() {
        format!("{} golden checks", report.checks.len())
    } else {
        format!("{} of {} golden checks fail: {}", failed.len(), report.checks.len(), failed.join("; "))
    };
    within_budget(outcome(report.all_pass(), detail), elapsed, Duration::from_secs(1))
}

fn mixed_corpus(games: usize) -> CorpusSpec {
    CorpusSpec::new(games, None, SEED)
}

fn c02_advantage_decomposition() -> Outcome {
    let start = Instant::now();
    let r = verify::lemma1_suite(&mixed_corpus(200)).unwrap();
    within_budget(suites(&[r]), start.elapsed(), Duration::from_secs(60))
}

fn c03_variance_decomposition() -> Outcome {
    suites(&[verify::lemma2_suite(&mixed_corpus(200), false).unwrap()])
}

fn c04_local_variance_bound() -> Outcome {
    suites(&[verify::lemma3_suite(&mixed_corpus(500)).unwrap()])
}

fn theorem(which: u8) -> Outcome {
    let corpus = mixed_corpus(200);
    let (r, truncation) = if which == 1 { verify::theorem1_suite(&corpus) } else { verify::theorem2_suite(&corpus) }.unwrap();
    let mut o = suites(&[r]);
    o.detail.push_str(&format!("; max truncation error {truncation:e}"));
    o.pass &= truncation < 1e-9;
    o
}

fn c05_centralized_vs_decentralized() -> Outcome {
    theorem(1)
}

fn c06_coma_vs_decentralized() -> Outcome {
    theorem(2)
}

fn c07_ob_optimality() -> Outcome {
    suites(&[verify::ob_optimality_suite(1000, SEED).unwrap(), verify::excess_identity_suite(1000, SEED).unwrap()])
}

fn c08_excess_bounds() -> Outcome {
    suites(&[verify::excess_bounds_suite(1000, SEED).unwrap()])
}

fn c09_unbiasedness() -> Outcome {
    suites(&[
        verify::unbiasedness_suite(&mixed_corpus(100)).unwrap(),
        verify::gradient_fd_suite(&mixed_corpus(50)).unwrap(),
    ])
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

fn toy_fixtures() -> (MarkovGame, JointPolicy) {
    let game = MarkovGame::from_json(&std::fs::read_to_string(fixtures().join("toy_game.json")).unwrap()).unwrap();
    let policy = JointPolicy::from_json(&std::fs::read_to_string(fixtures().join("toy_policy.json")).unwrap()).unwrap();
    (game, policy)
}

fn c10_monte_carlo() -> Outcome {
    let (game, policy) = toy_fixtures();
    let tables = solve_values(&game, &policy).unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, kind) in [EstimatorKind::CentralizedVanilla, EstimatorKind::Coma, EstimatorKind::ObX].into_iter().enumerate() {
        let (_, exact) = exact_trajectory_variance(kind, 0, &game, &policy, &tables, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + k as u64);
        let big = mc_variance(kind, 0, &game, &policy, &tables, 1_000_000, 1, &mut rng).unwrap();
        let small = mc_variance(kind, 0, &game, &policy, &tables, 250_000, 1, &mut rng).unwrap();
        let z = (big.estimate - exact).abs() / big.standard_error;
        let ratio = big.standard_error / small.standard_error;
        pass &= z <= 3.0 && (0.4..=0.6).contains(&ratio);
        parts.push(format!("{}: exact {exact:.4} mc {:.4} ({z:.2} SE), SE ratio {ratio:.3}", kind.name(), big.estimate));
    }
    outcome(pass, parts.join("; "))
}

fn c11_training() -> Outcome {
    let game = coordination_game().unwrap();
    let policy = JointPolicy::uniform(&game);
    let config = TrainConfig { baseline: BaselineKind::ObSurrogate, iterations: 500, ..Default::default() };
    let run = train(&game, &policy, &config).unwrap();
    let kinds = [BaselineKind::None, BaselineKind::Coma, BaselineKind::ObSurrogate];
    let cmp = compare_baselines(&game, &policy, &config, &kinds, &[0, 1, 2, 3, 4]).unwrap();
    let vs_vanilla = cmp.paired_wins(BaselineKind::ObSurrogate, BaselineKind::None);
    let vs_coma = cmp.paired_wins(BaselineKind::ObSurrogate, BaselineKind::Coma);
    let j = run.history.final_return;
    outcome(
        j >= 0.95 && vs_vanilla >= 4 && vs_coma >= 4,
        format!("final J {j:.4} (optimum 1); OB lower variance than vanilla on {vs_vanilla}/5 seeds, than COMA on {vs_coma}/5"),
    )
}

fn c12_gaussian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let d = rng.random_range(1..=3);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let std: Vec<f64> = (0..d).map(|_| rng.random_range(0.3..2.0)).collect();
        let a: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g = gaussian_log_prob_grad(&mean, &std, &a).unwrap();
        for k in 0..2 * d {
            let bump = |sign: f64| {
                let (mut m, mut s) = (mean.clone(), std.clone());
                if k < d { m[k] += sign * h } else { s[k - d] += sign * h }
                gaussian_log_density(&m, &s, &a).unwrap()
            };
            let fd = (bump(1.0) - bump(-1.0)) / (2.0 * h);
            worst = worst.max((g[k] - fd).abs() / fd.abs().max(1.0));
        }
    }
    let constant = ob_surrogate_gaussian(|_| -3.25, &[0.4, -1.0], &[0.7, 1.3], 1000, GaussianNorm::MeanAndStd, &mut rng).unwrap();
    let q = |a: &[f64]| a[0];
    let small = ob_surrogate_gaussian(q, &[0.5], &[1.5], 1000, GaussianNorm::MeanAndStd, &mut rng).unwrap();
    let oracle = ob_surrogate_gaussian(q, &[0.5], &[1.5], 1_000_000, GaussianNorm::MeanAndStd, &mut rng).unwrap();
    let z = (small.value - oracle.value).abs() / small.standard_error;
    outcome(
        worst <= 1e-6 && constant.value == -3.25 && z <= 3.0,
        format!(
            "score FD worst relative error {worst:e}; constant OB {}; q(a)=a OB {:.4} vs oracle {:.4} ({z:.2} SE)",
            constant.value, small.value, oracle.value
        ),
    )
}

fn run_cli(args: &[&str], out: &Path) -> (i32, Vec<u8>) {
    let mut stdout = Vec::new();
    let mut full = vec!["mapg", "--out", out.to_str().unwrap()];
    full.extend_from_slice(args);
    (cli::run(full, &mut stdout), stdout)
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    files.sort();
    files
}

fn c13_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let game = fixtures().join("toy_game.json");
    let policy = fixtures().join("toy_policy.json");
    let config = tmp.path().join("config.json");
    std::fs::write(&config, r#"{"iterations": 30, "batch_size": 8}"#).unwrap();
    let gen_dir = tmp.path().join("gen");
    run_cli(&["--seed", "5", "gen", "--agents", "2", "--states", "2", "--actions", "2"], &gen_dir);
    let generated = gen_dir.join("game.json");
    let (game, policy, config, generated) =
        (game.to_str().unwrap(), policy.to_str().unwrap(), config.to_str().unwrap(), generated.to_str().unwrap());
    let commands: Vec<Vec<&str>> = vec![
        vec!["toy"],
        vec!["--format", "csv", "toy"],
        vec!["--seed", "3", "verify", "--games", "5", "--agents", "3"],
        vec!["--seed", "3", "report", "--game", game, "--policy", policy, "--mc", "20000"],
        vec!["--seed", "3", "--format", "csv", "report", "--game", generated, "--agent", "1", "--mc", "5000"],
        vec!["--seed", "3", "train", "--game", "coordination", "--config", config],
        vec!["--seed", "3", "--format", "csv", "train", "--game", generated, "--config", config, "--baseline", "none,coma,ob"],
        vec!["--seed", "3", "gen", "--agents", "3", "--states", "2", "--actions", "2"],
    ];
    let mut pass = true;
    let mut bad = Vec::new();
    for (k, args) in commands.iter().enumerate() {
        let a = tmp.path().join(format!("a{k}"));
        let b = tmp.path().join(format!("b{k}"));
        let (ca, sa) = run_cli(args, &a);
        let (cb, sb) = run_cli(args, &b);
        let same = ca == cb && sa == sb && snapshot(&a) == snapshot(&b) && !snapshot(&a).is_empty();
        if !same {
            pass = false;
            bad.push(args.join(" "));
        }
    }
    let detail = if bad.is_empty() { format!("{} commands byte-stable", commands.len()) } else { format!("unstable: {}", bad.join(" | ")) };
    outcome(pass, detail)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 13] = [
        ("toy example golden reproduction", c01_toy),
        ("advantage decomposition identity", c02_advantage_decomposition),
        ("advantage variance decomposition", c03_variance_decomposition),
        ("joint advantage variance bound", c04_local_variance_bound),
        ("centralized vs decentralized variance bound", c05_centralized_vs_decentralized),
        ("COMA vs decentralized variance bound", c06_coma_vs_decentralized),
        ("optimal baseline optimality and excess identity", c07_ob_optimality),
        ("excess variance bounds", c08_excess_bounds),
        ("unbiasedness and gradient check", c09_unbiasedness),
        ("Monte-Carlo consistency", c10_monte_carlo),
        ("training on the coordination game", c11_training),
        ("Gaussian optimal baseline", c12_gaussian),
        ("CLI determinism", c13_determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let id = format!("{:02}", k + 1);
        if !filter.is_empty() && !filter.iter().any(|p| id.contains(p.as_str()) || name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            outcome(false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !o.pass {
            failures += 1;
        }
        println!(
            "{} criterion {id} {name} ({:.2}s): {}",
            if o.pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            o.detail
        );
    }
    println!("acceptance: {failures} failing criteria");
    if failures > 0 {
        std::process::exit(1);
    }
}
