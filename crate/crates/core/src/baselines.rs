//! Baselines subtracted from agent `i`'s Q-signal at a fixed `(s, a^{-i})`:
//! none, the COMA counterfactual, the exact optimal baseline and the
//! output-layer (surrogate) optimal baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{gaussian_log_prob_grad, norm_sq, sample_gaussian, x_measure_softmax};

/// Samples per state for the Gaussian OB, matching the reference MuJoCo runs.
pub const DEFAULT_OB_SAMPLES: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    None,
    Coma,
    ObExact,
    ObSurrogate,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [Self::None, Self::Coma, Self::ObExact, Self::ObSurrogate];

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Coma => "coma",
            Self::ObExact => "ob-exact",
            Self::ObSurrogate => "ob-surrogate",
        }
    }
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "vanilla" => Ok(Self::None),
            "coma" => Ok(Self::Coma),
            "ob-exact" => Ok(Self::ObExact),
            "ob" | "ob-surrogate" => Ok(Self::ObSurrogate),
            other => Err(Error::InvalidConfig(format!("unknown baseline {other:?}"))),
        }
    }
}

/// Which components of the Gaussian score enter the OB weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaussianNorm {
    #[default]
    MeanAndStd,
    MeanOnly,
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::LengthMismatch { expected, got })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Q^{-i}(s, a^{-i}) = E_{a ~ pi^i}[Q(s, a^{-i}, a)]`.
pub fn coma_baseline(q_row: &[f64], pi: &[f64]) -> Result<f64> {
    check_len(pi.len(), q_row.len())?;
    Ok(dot(pi, q_row))
}

/// OB for a softmax output layer: the expectation of the Q-row under the x-measure.
pub fn ob_surrogate_discrete(q_row: &[f64], pi: &[f64]) -> Result<f64> {
    check_len(pi.len(), q_row.len())?;
    let x = x_measure_softmax(pi)?;
    Ok(dot(&x, q_row))
}

/// OB for arbitrary score vectors `grad_vectors[a] = d log pi(a) / d theta`:
/// `sum_a pi(a) q(a) ||g_a||^2 / sum_a pi(a) ||g_a||^2`.
pub fn ob_exact(q_row: &[f64], grad_vectors: &[Vec<f64>], pi: &[f64]) -> Result<f64> {
    check_len(pi.len(), q_row.len())?;
    check_len(pi.len(), grad_vectors.len())?;
    let mut num = 0.0;
    let mut den = 0.0;
    for ((&p, &q), g) in pi.iter().zip(q_row).zip(grad_vectors) {
        let w = p * norm_sq(g);
        num += w * q;
        den += w;
    }
    if den > 0.0 {
        Ok(num / den)
    } else {
        Err(Error::ZeroDenominator)
    }
}

/// A sampled Gaussian OB together with its delta-method standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledBaseline {
    pub value: f64,
    pub standard_error: f64,
}

/// Gaussian OB from `n_samples` actions drawn from `N(mean, std)`:
/// `sum_j q(a_j) ||g_j||^2 / sum_j ||g_j||^2`.
pub fn ob_surrogate_gaussian<F, R>(
    q_fn: F,
    mean: &[f64],
    std: &[f64],
    n_samples: usize,
    norm: GaussianNorm,
    rng: &mut R,
) -> Result<SampledBaseline>
where
    F: Fn(&[f64]) -> f64,
    R: Rng + ?Sized,
{
    if n_samples < 2 {
        return Err(Error::InvalidConfig(format!("gaussian OB needs at least 2 samples, got {n_samples}")));
    }
    let d = mean.len();
    let mut weights = Vec::with_capacity(n_samples);
    let mut values = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let a = sample_gaussian(mean, std, rng);
        let g = gaussian_log_prob_grad(mean, std, &a)?;
        let w = match norm {
            GaussianNorm::MeanAndStd => norm_sq(&g),
            GaussianNorm::MeanOnly => norm_sq(&g[..d]),
        };
        weights.push(w);
        values.push(q_fn(&a));
    }
    weighted_ratio(&values, &weights)
}

/// Self-normalized weighted mean `sum w q / sum w` and its delta-method SE.
pub fn weighted_ratio(values: &[f64], weights: &[f64]) -> Result<SampledBaseline> {
    check_len(values.len(), weights.len())?;
    let den: f64 = weights.iter().sum();
    if !(den > 0.0) {
        return Err(Error::ZeroDenominator);
    }
    // centred on the first value so a constant row comes back unchanged
    let origin = values.first().copied().unwrap_or(0.0);
    let num: f64 = weights.iter().zip(values).map(|(w, q)| w * (q - origin)).sum();
    let value = origin + num / den;
    let spread: f64 = weights.iter().zip(values).map(|(w, q)| (w * (q - value)).powi(2)).sum();
    Ok(SampledBaseline { value, standard_error: spread.sqrt() / den })
}

/// `X(a) = q(a) - b`.
pub fn x_value(q_row: &[f64], baseline: f64) -> Vec<f64> {
    q_row.iter().map(|q| q - baseline).collect()
}

/// Baseline of `kind` for a softmax actor, whose output layer is its whole
/// tabular parameter so exact and surrogate OB coincide.
pub fn discrete_baseline(kind: BaselineKind, q_row: &[f64], pi: &[f64]) -> Result<f64> {
    match kind {
        BaselineKind::None => Ok(0.0),
        BaselineKind::Coma => coma_baseline(q_row, pi),
        BaselineKind::ObSurrogate => ob_surrogate_discrete(q_row, pi),
        BaselineKind::ObExact => {
            let grads = (0..pi.len())
                .map(|a| crate::policy::grad_log_softmax(pi, a))
                .collect::<Result<Vec<_>>>()?;
            ob_exact(q_row, &grads, pi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{grad_log_softmax, softmax_probs};
    use crate::variance::local_variance;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const Q: [f64; 3] = [2.0, 1.0, 100.0];
    const PI: [f64; 3] = [0.8, 0.1, 0.1];

    fn softmax_grads(pi: &[f64]) -> Vec<Vec<f64>> {
        (0..pi.len()).map(|a| grad_log_softmax(pi, a).unwrap()).collect()
    }

    #[test]
    fn coma_examples() {
        assert!((coma_baseline(&Q, &PI).unwrap() - 11.7).abs() < 1e-12);
        assert!((coma_baseline(&[4.5; 3], &PI).unwrap() - 4.5).abs() < 1e-12);
        assert_eq!(coma_baseline(&[0.0, 10.0], &[0.5, 0.5]).unwrap(), 5.0);
        assert!(coma_baseline(&Q, &[0.5, 0.5]).is_err());
    }

    #[test]
    fn surrogate_ob_examples() {
        let b = ob_surrogate_discrete(&Q, &PI).unwrap();
        // (0.048*2 + 0.146*1 + 0.146*100) / 0.34
        assert!((b - 14.842 / 0.34).abs() < 1e-12);
        assert!((ob_surrogate_discrete(&[3.0; 3], &PI).unwrap() - 3.0).abs() < 1e-12);
        let u = [0.25; 4];
        let q = [1.0, -2.0, 5.0, 0.5];
        assert!((ob_surrogate_discrete(&q, &u).unwrap() - coma_baseline(&q, &u).unwrap()).abs() < 1e-12);
        assert!(matches!(ob_surrogate_discrete(&[1.0, 2.0], &[1.0, 0.0]), Err(Error::DegeneratePolicy(_))));
    }

    #[test]
    fn exact_ob_examples() {
        let b = ob_exact(&Q, &softmax_grads(&PI), &PI).unwrap();
        assert!((b - ob_surrogate_discrete(&Q, &PI).unwrap()).abs() < 1e-12);
        let equal_norms = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.6, 0.8]];
        assert!((ob_exact(&Q, &equal_norms, &PI).unwrap() - 11.7).abs() < 1e-12);
        assert!((ob_exact(&[7.0; 3], &softmax_grads(&PI), &PI).unwrap() - 7.0).abs() < 1e-12);
        assert!(matches!(ob_exact(&Q, &vec![vec![0.0]; 3], &PI), Err(Error::ZeroDenominator)));
    }

    #[test]
    fn x_value_examples() {
        let ob = x_value(&Q, 43.71);
        for (a, b) in ob.iter().zip([-41.71, -42.71, 56.29]) {
            assert!((a - b).abs() < 1e-9);
        }
        let coma = x_value(&Q, 11.7);
        for (a, b) in coma.iter().zip([-9.7, -10.7, 88.3]) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(x_value(&Q, 0.0), Q.to_vec());
    }

    #[test]
    fn gaussian_ob_of_constant_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 10, 1000] {
            let b = ob_surrogate_gaussian(|_| -3.25, &[0.4, -1.0], &[0.7, 2.0], n, GaussianNorm::MeanAndStd, &mut rng)
                .unwrap();
            assert_eq!(b.value, -3.25);
        }
        assert!(ob_surrogate_gaussian(|_| 0.0, &[0.0], &[1.0], 1, GaussianNorm::MeanAndStd, &mut rng).is_err());
    }

    #[test]
    fn gaussian_ob_is_deterministic_and_order_free() {
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            ob_surrogate_gaussian(|a| a[0] * a[0] + a[0], &[0.3], &[1.2], 500, GaussianNorm::MeanAndStd, &mut rng)
                .unwrap()
        };
        assert_eq!(run(5), run(5));
        let values = [1.0, 4.0, -2.0, 0.5];
        let weights = [0.2, 1.5, 3.0, 0.1];
        let forward = weighted_ratio(&values, &weights).unwrap().value;
        let mut rv = values;
        let mut rw = weights;
        rv.reverse();
        rw.reverse();
        assert!((forward - weighted_ratio(&rv, &rw).unwrap().value).abs() < 1e-12);
    }

    #[test]
    fn gaussian_mean_only_norm_differs() {
        let q = |a: &[f64]| a[0] * a[0];
        let mut r1 = ChaCha8Rng::seed_from_u64(1);
        let mut r2 = ChaCha8Rng::seed_from_u64(1);
        let both = ob_surrogate_gaussian(q, &[0.0], &[1.0], 2000, GaussianNorm::MeanAndStd, &mut r1).unwrap();
        let mean = ob_surrogate_gaussian(q, &[0.0], &[1.0], 2000, GaussianNorm::MeanOnly, &mut r2).unwrap();
        // mean-only weight a^2 gives E[a^4]/E[a^2] = 3,
        // full weight a^2 + (a^2-1)^2 gives 13/3
        assert!((mean.value - 3.0).abs() < 5.0 * mean.standard_error);
        assert!(both.value > mean.value);
    }

    fn row_and_policy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (2usize..6).prop_flat_map(|k| {
            (prop::collection::vec(-50.0f64..50.0, k), prop::collection::vec(-3.0f64..3.0, k))
                .prop_map(|(q, l)| (q, softmax_probs(&l).unwrap()))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn baselines_do_not_bias_the_gradient((q, pi) in row_and_policy()) {
            let grads = softmax_grads(&pi);
            let expect = |b: f64| {
                let mut m = vec![0.0; pi.len()];
                for a in 0..pi.len() {
                    for c in 0..pi.len() { m[c] += pi[a] * (q[a] - b) * grads[a][c]; }
                }
                m
            };
            let reference = expect(0.0);
            for kind in BaselineKind::ALL {
                let b = discrete_baseline(kind, &q, &pi).unwrap();
                for (x, y) in expect(b).iter().zip(&reference) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn exact_and_surrogate_ob_agree((q, pi) in row_and_policy()) {
            let a = ob_exact(&q, &softmax_grads(&pi), &pi).unwrap();
            let b = ob_surrogate_discrete(&q, &pi).unwrap();
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn ob_minimizes_local_variance((q, pi) in row_and_policy(), shifts in prop::collection::vec(-100.0f64..100.0, 20)) {
            let grads = softmax_grads(&pi);
            let b_star = ob_surrogate_discrete(&q, &pi).unwrap();
            let best = local_variance(&pi, &x_value(&q, b_star), &grads).unwrap();
            for delta in shifts {
                let other = local_variance(&pi, &x_value(&q, b_star + delta), &grads).unwrap();
                prop_assert!(best <= other + 1e-9);
            }
        }
    }
}
