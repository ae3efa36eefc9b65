//! The single-agent, three-action worked example: logits `[ln 8, 0, 0]`,
//! Q-row `[2, 1, 100]`, and the vanilla / COMA / OB variances.
//!
//! Three views are produced:
//! - the table recomputed at full precision by the library;
//! - the same table with the x-measure rounded to two decimals before the
//!   OB dot product, which is how the published figures were obtained;
//! - a literal replay of the published intermediate vectors in exact decimal
//!   arithmetic, plus an audit of every published intermediate against its
//!   recomputation.

use serde::Serialize;

use crate::baselines::{coma_baseline, ob_surrogate_discrete, x_value};
use crate::error::Result;
use crate::game::OneStepGame;
use crate::policy::{grad_log_softmax, x_measure_softmax, JointPolicy, SoftmaxPolicy};
use crate::values::{marginal_q, solve_values, AgentSubset};
use crate::variance::local_variance;

pub const Q_ROW: [f64; 3] = [2.0, 1.0, 100.0];

/// Published figures.
pub mod reference {
    pub const PI: [f64; 3] = [0.8, 0.1, 0.1];
    pub const X: [f64; 3] = [0.1412, 0.4294, 0.4294];
    pub const X_ROUNDED: [f64; 3] = [0.14, 0.43, 0.43];
    pub const COMA_BASELINE: f64 = 11.7;
    pub const OPTIMAL_BASELINE: f64 = 43.71;
    pub const ADVANTAGE: [f64; 3] = [-9.7, -10.7, 88.3];
    pub const X_VALUE: [f64; 3] = [-41.71, -42.71, 56.29];
    pub const VARIANCES: [f64; 3] = [1321.007, 1015.247, 673.116];
}

pub fn toy_game() -> OneStepGame {
    OneStepGame::new(vec![3], Q_ROW.to_vec()).expect("static toy game")
}

pub fn toy_policy() -> JointPolicy {
    JointPolicy::from_softmax(vec![SoftmaxPolicy::new(vec![vec![8f64.ln(), 0.0, 0.0]]).expect("finite logits")])
        .expect("one agent")
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyTable {
    pub label: String,
    pub psi: Vec<f64>,
    pub pi: Vec<f64>,
    pub x: Vec<f64>,
    pub q: Vec<f64>,
    pub advantage: Vec<f64>,
    pub x_value: Vec<f64>,
    pub coma_baseline: f64,
    pub optimal_baseline: f64,
    /// vanilla, COMA, OB
    pub variances: [f64; 3],
}

fn variances(pi: &[f64], q: &[f64], coma: f64, ob: f64) -> Result<[f64; 3]> {
    let grads = (0..pi.len()).map(|a| grad_log_softmax(pi, a)).collect::<Result<Vec<_>>>()?;
    Ok([
        local_variance(pi, q, &grads)?,
        local_variance(pi, &x_value(q, coma), &grads)?,
        local_variance(pi, &x_value(q, ob), &grads)?,
    ])
}

/// The table recomputed end to end through the game, value and baseline code.
pub fn full_precision() -> Result<ToyTable> {
    let game = toy_game().to_markov_game(0.0)?;
    let policy = toy_policy();
    let tables = solve_values(&game, &policy)?;
    let actor = policy.softmax(0)?;
    let pi = actor.probs(0).to_vec();
    let q = tables.q_state(0).to_vec();
    let coma = marginal_q(&tables, &policy, &AgentSubset::empty(), 0, &[])?;
    let ob = ob_surrogate_discrete(&q, &pi)?;
    Ok(ToyTable {
        label: "full-precision".into(),
        psi: actor.logits()[0].clone(),
        x: x_measure_softmax(&pi)?,
        advantage: x_value(&q, coma),
        x_value: x_value(&q, ob),
        coma_baseline: coma,
        optimal_baseline: ob,
        variances: variances(&pi, &q, coma, ob)?,
        pi,
        q,
    })
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    (x * scale).round() / scale
}

/// The table with `x` rounded to two decimals before forming `b*`.
pub fn rounded_pipeline() -> Result<ToyTable> {
    let pi = reference::PI.to_vec();
    let q = Q_ROW.to_vec();
    let x: Vec<f64> = x_measure_softmax(&pi)?.into_iter().map(|v| round_to(v, 2)).collect();
    let coma = coma_baseline(&q, &pi)?;
    let ob: f64 = x.iter().zip(&q).map(|(a, b)| a * b).sum();
    Ok(ToyTable {
        label: "rounded-x".into(),
        psi: vec![8f64.ln(), 0.0, 0.0],
        advantage: x_value(&q, coma),
        x_value: x_value(&q, ob),
        coma_baseline: coma,
        optimal_baseline: ob,
        variances: variances(&pi, &q, coma, ob)?,
        pi,
        q,
        x,
    })
}

/// Fixed-point decimal with eight fractional digits; exact for every
/// published figure and for the sums and squares the replay needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
struct Dec(i128);

const DEC_DIGITS: u32 = 8;

impl Dec {
    fn parse(text: &str) -> (Self, u32) {
        let (neg, body) = text.strip_prefix('-').map_or((false, text), |b| (true, b));
        let (int, frac) = body.split_once('.').unwrap_or((body, ""));
        let mut v: i128 = int.parse().expect("published figure");
        for k in 0..DEC_DIGITS as usize {
            v = v * 10 + frac.as_bytes().get(k).map_or(0, |b| (b - b'0') as i128);
        }
        (Dec(if neg { -v } else { v }), frac.len() as u32)
    }

    fn mul(self, other: Dec) -> Dec {
        let p = self.0 * other.0;
        let scale = 10i128.pow(DEC_DIGITS);
        assert_eq!(p % scale, 0, "product needs more than {DEC_DIGITS} digits");
        Dec(p / scale)
    }

    /// Rounds half away from zero to `decimals` places.
    fn round(self, decimals: u32) -> Dec {
        let unit = 10i128.pow(DEC_DIGITS - decimals);
        let half = unit / 2;
        let r = if self.0 >= 0 { (self.0 + half) / unit } else { -((-self.0 + half) / unit) };
        Dec(r * unit)
    }

    fn to_f64(self) -> f64 {
        self.0 as f64 / 10f64.powi(DEC_DIGITS as i32)
    }
}

impl std::ops::Add for Dec {
    type Output = Dec;
    fn add(self, o: Dec) -> Dec {
        Dec(self.0 + o.0)
    }
}

impl std::ops::Sub for Dec {
    type Output = Dec;
    fn sub(self, o: Dec) -> Dec {
        Dec(self.0 - o.0)
    }
}

struct PublishedMethod {
    name: &'static str,
    /// second-moment contribution of each action, per component
    contributions: [[&'static str; 3]; 3],
    second_moment: [&'static str; 3],
    components: [&'static str; 3],
    total: &'static str,
}

const FIRST_MOMENT: [&str; 3] = ["-7.76", "-1.07", "8.83"];
const FIRST_MOMENT_SQ: [&str; 3] = ["60.2176", "1.1449", "77.9689"];

const PUBLISHED: [PublishedMethod; 3] = [
    PublishedMethod {
        name: "vanilla",
        contributions: [["0.128", "0.032", "0.032"], ["0.064", "0.081", "0.001"], ["640", "10", "810"]],
        second_moment: ["640.192", "10.113", "810.033"],
        components: ["579.9744", "8.968", "732.064"],
        total: "1321.007",
    },
    PublishedMethod {
        name: "coma",
        contributions: [["3.011", "0.753", "0.753"], ["2.327", "9.274", "0.114"], ["499.001", "7.797", "631.548"]],
        second_moment: ["504.339", "17.824", "632.415"],
        components: ["444.1214", "16.6791", "554.4461"],
        total: "1015.2466",
    },
    PublishedMethod {
        name: "ob",
        contributions: [["55.6712", "13.92", "13.92"], ["116.7452", "147.756", "1.824"], ["202.788", "3.169", "256.654"]],
        second_moment: ["375.2044", "164.845", "272.398"],
        components: ["314.987", "163.7", "194.429"],
        total: "673.116",
    },
];

/// The published signal per method, its printed square, and the first-moment
/// summands, for the audit.
const PUBLISHED_SIGNALS: [[&str; 3]; 3] = [["2", "1", "100"], ["-9.7", "-10.7", "88.3"], ["-41.71", "-42.71", "56.29"]];
const PUBLISHED_SIGNAL_SQ: [[&str; 3]; 3] =
    [["4", "1", "10000"], ["94.09", "114.49", "7796.89"], ["1739.724", "1824.144", "3168.564"]];
const PUBLISHED_FIRST_SUMMANDS: [[&str; 3]; 3] =
    [["0.32", "-0.16", "-0.16"], ["-0.08", "0.09", "-0.01"], ["-8", "-1", "9"]];

/// One step of the literal replay: a sum of published numbers against the
/// published result, compared at the published precision.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReplayStep {
    pub label: String,
    pub published: f64,
    pub replayed: f64,
    pub exact: bool,
}

fn replay_step(label: String, replayed: Dec, published: &str) -> ReplayStep {
    let (p, digits) = Dec::parse(published);
    ReplayStep { label, published: p.to_f64(), replayed: replayed.to_f64(), exact: replayed.round(digits) == p }
}

/// Replays the published variance arithmetic in exact decimals.
pub fn replay() -> Vec<ReplayStep> {
    let mut out = Vec::new();
    let first: Vec<Dec> = FIRST_MOMENT.iter().map(|s| Dec::parse(s).0).collect();
    let first_sum = |c: usize| PUBLISHED_FIRST_SUMMANDS.iter().fold(Dec(0), |acc, row| acc + Dec::parse(row[c]).0);
    for c in 0..3 {
        out.push(replay_step(format!("first-moment[{c}]"), first_sum(c), FIRST_MOMENT[c]));
        out.push(replay_step(format!("first-moment-sq[{c}]"), first[c].mul(first[c]), FIRST_MOMENT_SQ[c]));
    }
    for m in &PUBLISHED {
        let mut total = Dec(0);
        for c in 0..3 {
            let second = m.contributions.iter().fold(Dec(0), |acc, row| acc + Dec::parse(row[c]).0);
            out.push(replay_step(format!("{}/second-moment[{c}]", m.name), second, m.second_moment[c]));
            let component = Dec::parse(m.second_moment[c]).0 - Dec::parse(FIRST_MOMENT_SQ[c]).0;
            out.push(replay_step(format!("{}/variance[{c}]", m.name), component, m.components[c]));
            total = total + component;
        }
        out.push(replay_step(format!("{}/variance", m.name), total, m.total));
    }
    out
}

/// One published intermediate against its recomputation from the published
/// inputs; it passes when they agree to half a unit in the last printed digit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditEntry {
    pub label: String,
    pub published: f64,
    pub recomputed: f64,
    pub granularity: f64,
    pub consistent: bool,
}

fn audit_entry(label: String, published: &str, recomputed: f64) -> AuditEntry {
    let (p, digits) = Dec::parse(published);
    let granularity = 10f64.powi(-(digits as i32));
    let published = p.to_f64();
    let consistent = (published - recomputed).abs() <= 0.5 * granularity + 1e-9;
    AuditEntry { label, published, recomputed, granularity, consistent }
}

/// Checks every published intermediate against a recomputation.
pub fn audit() -> Result<Vec<AuditEntry>> {
    let pi = reference::PI;
    let mut out = Vec::new();
    let x = x_measure_softmax(&pi)?;
    for (a, xa) in x.iter().enumerate() {
        out.push(audit_entry(format!("x[{a}]"), ["0.14", "0.43", "0.43"][a], *xa));
    }
    let b: f64 = reference::X_ROUNDED.iter().zip(&Q_ROW).map(|(a, b)| a * b).sum();
    out.push(audit_entry("ob-from-rounded-x".into(), "43.71", b));
    out.push(audit_entry("coma-baseline".into(), "11.7", coma_baseline(&Q_ROW, &pi)?));
    for (a, (&p, &q)) in pi.iter().zip(&Q_ROW).enumerate() {
        let g = grad_log_softmax(&pi, a)?;
        for c in 0..3 {
            out.push(audit_entry(format!("first-summand[{a}][{c}]"), PUBLISHED_FIRST_SUMMANDS[a][c], p * q * g[c]));
        }
    }
    for (m, method) in PUBLISHED.iter().enumerate() {
        for a in 0..3 {
            let sig = Dec::parse(PUBLISHED_SIGNALS[m][a]).0.to_f64();
            out.push(audit_entry(format!("{}/signal-sq[{a}]", method.name), PUBLISHED_SIGNAL_SQ[m][a], sig * sig));
            let sq = Dec::parse(PUBLISHED_SIGNAL_SQ[m][a]).0.to_f64();
            let g = grad_log_softmax(&pi, a)?;
            for c in 0..3 {
                out.push(audit_entry(
                    format!("{}/second-summand[{a}][{c}]", method.name),
                    method.contributions[a][c],
                    pi[a] * sq * g[c] * g[c],
                ));
            }
        }
    }
    Ok(out)
}

/// One acceptance figure with its tolerance.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GoldenCheck {
    pub name: String,
    pub expected: Vec<f64>,
    pub actual: Vec<f64>,
    pub tolerance: f64,
    pub pass: bool,
}

fn golden(name: &str, expected: &[f64], actual: &[f64], tolerance: f64) -> GoldenCheck {
    let pass = expected.len() == actual.len() && expected.iter().zip(actual).all(|(e, a)| (e - a).abs() <= tolerance);
    GoldenCheck { name: name.into(), expected: expected.to_vec(), actual: actual.to_vec(), tolerance, pass }
}

/// The golden checks of the worked example.
pub fn golden_checks(full: &ToyTable, rounded: &ToyTable, replay: &[ReplayStep]) -> Vec<GoldenCheck> {
    let replay_ok = replay.iter().all(|r| r.exact);
    let replayed: Vec<f64> = ["vanilla/variance", "coma/variance", "ob/variance"]
        .iter()
        .filter_map(|l| replay.iter().find(|r| r.label == *l).map(|r| r.replayed))
        .collect();
    vec![
        golden("pi", &reference::PI, &full.pi, 1e-15),
        golden("x", &reference::X, &full.x, 0.005),
        golden("coma-baseline", &[reference::COMA_BASELINE], &[full.coma_baseline], 1e-9),
        golden("ob-baseline", &[reference::OPTIMAL_BASELINE], &[full.optimal_baseline], 0.01),
        golden("ob-baseline-rounded-x", &[reference::OPTIMAL_BASELINE], &[rounded.optimal_baseline], 0.01),
        golden("advantage", &reference::ADVANTAGE, &full.advantage, 1e-9),
        golden("x-value", &reference::X_VALUE, &full.x_value, 0.01),
        golden("x-value-rounded-x", &reference::X_VALUE, &rounded.x_value, 0.01),
        golden("variance-vanilla", &reference::VARIANCES[..1], &full.variances[..1], 0.5),
        golden("variance-coma", &reference::VARIANCES[1..2], &full.variances[1..2], 0.5),
        golden("variance-ob", &reference::VARIANCES[2..], &full.variances[2..], 0.5),
        GoldenCheck {
            name: "published-replay".into(),
            expected: reference::VARIANCES.to_vec(),
            actual: replayed,
            tolerance: 0.0,
            pass: replay_ok,
        },
    ]
}

/// Everything `mapg toy` reports.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyReport {
    pub schema_version: u32,
    pub tables: Vec<ToyTable>,
    pub replay: Vec<ReplayStep>,
    pub audit: Vec<AuditEntry>,
    pub checks: Vec<GoldenCheck>,
}

impl ToyReport {
    pub fn build() -> Result<Self> {
        let full = full_precision()?;
        let rounded = rounded_pipeline()?;
        let replay = replay();
        let checks = golden_checks(&full, &rounded, &replay);
        Ok(Self { schema_version: crate::SCHEMA_VERSION, tables: vec![full, rounded], replay, audit: audit()?, checks })
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per action per table, then the variance triple of each table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,table,action,psi,pi,x,q,advantage,x_value\n");
        for t in &self.tables {
            for a in 0..t.q.len() {
                out.push_str(&format!(
                    "{},{},{a},{},{},{},{},{},{}\n",
                    self.schema_version, t.label, t.psi[a], t.pi[a], t.x[a], t.q[a], t.advantage[a], t.x_value[a]
                ));
            }
        }
        out.push_str("\nschema_version,table,coma_baseline,ob_baseline,var_vanilla,var_coma,var_ob\n");
        for t in &self.tables {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                self.schema_version, t.label, t.coma_baseline, t.optimal_baseline, t.variances[0], t.variances[1], t.variances[2]
            ));
        }
        out
    }

    /// Human-readable table and check list.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for t in &self.tables {
            out.push_str(&format!("[{}]\n", t.label));
            out.push_str(&format!(
                "{:>3} {:>10} {:>6} {:>8} {:>6} {:>8} {:>9}\n",
                "a", "psi", "pi", "x", "Q", "A", "X"
            ));
            for a in 0..t.q.len() {
                out.push_str(&format!(
                    "{:>3} {:>10.6} {:>6.3} {:>8.4} {:>6} {:>8.4} {:>9.4}\n",
                    a + 1,
                    t.psi[a],
                    t.pi[a],
                    t.x[a],
                    t.q[a],
                    t.advantage[a],
                    t.x_value[a]
                ));
            }
            out.push_str(&format!("coma baseline {:.6}  ob baseline {:.6}\n", t.coma_baseline, t.optimal_baseline));
            out.push_str(&format!(
                "variance: vanilla {:.4}  coma {:.4}  ob {:.4}\n\n",
                t.variances[0], t.variances[1], t.variances[2]
            ));
        }
        let inconsistent: Vec<&AuditEntry> = self.audit.iter().filter(|e| !e.consistent).collect();
        out.push_str(&format!(
            "published arithmetic: {} replay steps exact of {}, {} intermediates inconsistent\n",
            self.replay.iter().filter(|r| r.exact).count(),
            self.replay.len(),
            inconsistent.len()
        ));
        for e in inconsistent {
            out.push_str(&format!("  {}: published {} recomputed {}\n", e.label, e.published, e.recomputed));
        }
        out.push('\n');
        for c in &self.checks {
            out.push_str(&format!("{} {}\n", if c.pass { "PASS" } else { "FAIL" }, c.name));
            if !c.pass {
                out.push_str(&format!("  - expected {:?} (tol {})\n  + actual   {:?}\n", c.expected, c.tolerance, c.actual));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_precision_values() {
        let t = full_precision().unwrap();
        assert!((t.coma_baseline - 11.7).abs() < 1e-12);
        assert!((t.optimal_baseline - 14.842 / 0.34).abs() < 1e-12);
        assert!((t.variances[0] - 1321.0066).abs() < 1e-9);
        assert!((t.variances[1] - 1020.2464).abs() < 1e-9);
    }

    #[test]
    fn rounded_pipeline_gives_published_baseline() {
        let t = rounded_pipeline().unwrap();
        assert!((t.optimal_baseline - 43.71).abs() < 1e-12);
        assert!((t.variances[2] - 673.116).abs() < 0.5);
    }

    #[test]
    fn replay_is_exact() {
        let steps = replay();
        assert!(steps.iter().all(|s| s.exact), "{steps:?}");
        assert_eq!(steps.len(), 6 + 3 * 7);
    }

    #[test]
    fn audit_flags_only_the_coma_summand() {
        let bad: Vec<String> = audit().unwrap().into_iter().filter(|e| !e.consistent).map(|e| e.label).collect();
        assert_eq!(bad, vec!["coma/second-summand[1][0]".to_string()]);
    }

    #[test]
    fn decimal_rounding() {
        assert_eq!(Dec::parse("1321.0066").0.round(3), Dec::parse("1321.007").0);
        assert_eq!(Dec::parse("-0.125").0.round(2), Dec::parse("-0.13").0);
        assert_eq!(Dec::parse("-7.76").0.mul(Dec::parse("-7.76").0), Dec::parse("60.2176").0);
    }

    #[test]
    fn report_is_stable() {
        let a = ToyReport::build().unwrap();
        let b = ToyReport::build().unwrap();
        assert_eq!(a.to_json().unwrap(), b.to_json().unwrap());
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.render(), b.render());
    }
}
