use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::error::{Error, Result};

/// Default `u` added to the assignment score of consumed experts.
pub const DEFAULT_PENALTY: f64 = 1e6;
/// Default Dirichlet parameter `e` for consumed experts.
pub const DEFAULT_FLOOR: f64 = 1e-3;
/// ELBOs closer to zero than this are shifted before taking `-1/L`.
pub const ELBO_EPSILON: f64 = 1e-8;

/// `ln(1 - p(c_j))` for one batch of per-expert ELBOs, where
/// `p(c_j) = 1 - (exp(-L_j) + u c'_j) / Σ_i (exp(-L_i) + u c'_i)`.
///
/// The exponentials are divided by their largest member before `u` is
/// added, so `u` acts relative to the strongest exponential term. Working
/// with `ln(1 - p)` keeps experts distinguishable when `p` rounds to 1.
pub fn batch_assignment_log_complements(
    elbos: &[f64],
    previous: &[bool],
    penalty: f64,
) -> Result<Vec<f64>> {
    if elbos.len() != previous.len() {
        return Err(Error::dim(format!(
            "{} ELBOs for {} assignment flags",
            elbos.len(),
            previous.len()
        )));
    }
    if elbos.is_empty() {
        return Err(Error::contract("no experts to score"));
    }
    if let Some(j) = elbos.iter().position(|l| !l.is_finite()) {
        return Err(Error::Scoring {
            expert: j,
            reason: format!("ELBO is {}", elbos[j]),
        });
    }
    let top = elbos.iter().map(|l| -l).fold(f64::NEG_INFINITY, f64::max);
    let ln_u = penalty.ln();
    let log_terms: Vec<f64> = elbos
        .iter()
        .zip(previous)
        .map(|(l, &c)| {
            if c {
                log_sum_exp(&[-l - top, ln_u])
            } else {
                -l - top
            }
        })
        .collect();
    let log_total = log_sum_exp(&log_terms);
    Ok(log_terms.iter().map(|t| t - log_total).collect())
}

/// `p(c_j)` for one batch; see [`batch_assignment_log_complements`].
pub fn batch_assignment_probabilities(
    elbos: &[f64],
    previous: &[bool],
    penalty: f64,
) -> Result<Vec<f64>> {
    Ok(batch_assignment_log_complements(elbos, previous, penalty)?
        .iter()
        .map(|q| -q.exp_m1())
        .collect())
}

/// `ln(1 - p̄_j)` where `p̄` is `p(c)` averaged over batches; `elbos[b][i]` is
/// expert `i` on batch `b`.
pub fn assignment_log_complements(
    elbos: &[Vec<f64>],
    previous: &[bool],
    penalty: f64,
) -> Result<Vec<f64>> {
    if elbos.is_empty() {
        return Err(Error::contract(
            "assignment needs at least one evaluation batch",
        ));
    }
    let per_batch = elbos
        .iter()
        .map(|batch| batch_assignment_log_complements(batch, previous, penalty))
        .collect::<Result<Vec<_>>>()?;
    let ln_n = (elbos.len() as f64).ln();
    Ok((0..previous.len())
        .map(|i| log_sum_exp(&per_batch.iter().map(|q| q[i]).collect::<Vec<_>>()) - ln_n)
        .collect())
}

/// Batch-averaged assignment probabilities.
pub fn assignment_probabilities(
    elbos: &[Vec<f64>],
    previous: &[bool],
    penalty: f64,
) -> Result<Vec<f64>> {
    Ok(assignment_log_complements(elbos, previous, penalty)?
        .iter()
        .map(|q| -q.exp_m1())
        .collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > values[best] { i } else { best })
}

/// The expert picked for the upcoming task: the most probable expert not
/// yet consumed, i.e. the smallest `ln(1 - p)`. Ties go to the lowest index.
pub fn choose_expert(log_complements: &[f64], previous: &[bool]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, (&q, &c)) in log_complements.iter().zip(previous).enumerate() {
        if !c && best.is_none_or(|b| q < log_complements[b]) {
            best = Some(i);
        }
    }
    best.ok_or(Error::CapacityExhausted {
        experts: previous.len(),
    })
}

/// `a_i = e` for consumed experts, `(1 - e K') / (K - K')` otherwise.
pub fn dirichlet_parameters(assignment: &[bool], floor: f64) -> Result<Vec<f64>> {
    let k = assignment.len();
    let consumed = assignment.iter().filter(|&&c| c).count();
    if k == 0 {
        return Err(Error::contract("no experts"));
    }
    if consumed == k {
        return Err(Error::CapacityExhausted { experts: k });
    }
    if !(floor > 0.0) {
        return Err(Error::config(format!(
            "Dirichlet floor must be positive, got {floor}"
        )));
    }
    let mass = 1.0 - floor * consumed as f64;
    if mass <= 0.0 {
        return Err(Error::config(format!(
            "Dirichlet floor {floor} times {consumed} consumed experts leaves no mass"
        )));
    }
    let free = mass / (k - consumed) as f64;
    Ok(assignment
        .iter()
        .map(|&c| if c { floor } else { free })
        .collect())
}

/// Draws `w ~ Dir(a)` from independent `Gamma(a_i, 1)` variables.
///
/// Tiny `a_i` make the gamma draws underflow, so each draw is carried as a
/// logarithm: for `a < 1`, `ln G(a) = ln G(a + 1) + ln(U) / a`.
pub fn sample_mixing_weights<R: Rng + ?Sized>(a: &[f64], rng: &mut R) -> Result<Vec<f64>> {
    if a.is_empty() {
        return Err(Error::contract("no Dirichlet parameters"));
    }
    if a.len() == 1 {
        // A one-component Dirichlet is a point mass; draw nothing.
        return Ok(vec![1.0]);
    }
    let mut logs = Vec::with_capacity(a.len());
    for &ai in a {
        if !(ai > 0.0 && ai.is_finite()) {
            return Err(Error::contract(format!(
                "Dirichlet parameter must be positive, got {ai}"
            )));
        }
        let shape = if ai < 1.0 { ai + 1.0 } else { ai };
        let gamma =
            Gamma::new(shape, 1.0).map_err(|e| Error::contract(format!("gamma({shape}): {e}")))?;
        let mut lg = gamma.sample(rng).ln();
        if ai < 1.0 {
            let u: f64 = 1.0 - rng.random::<f64>();
            lg += u.ln() / ai;
        }
        logs.push(lg);
    }
    let norm = log_sum_exp(&logs);
    let mut w: Vec<f64> = logs.iter().map(|l| (l - norm).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= s);
    Ok(w)
}

/// `v_j = softmax(-1 / L_j)`, with `L` nudged away from zero.
pub fn inference_probabilities(elbos: &[f64]) -> Result<Vec<f64>> {
    if let Some(j) = elbos.iter().position(|l| !l.is_finite()) {
        return Err(Error::Scoring {
            expert: j,
            reason: format!("ELBO is {}", elbos[j]),
        });
    }
    let mut v: Vec<f64> = elbos
        .iter()
        .map(|&l| {
            let l = if l.abs() < ELBO_EPSILON {
                l - ELBO_EPSILON
            } else {
                l
            };
            -1.0 / l
        })
        .collect();
    crate::autodiff::softmax_in_place(&mut v);
    Ok(v)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceMode {
    /// Deploy the most probable expert.
    #[default]
    Deterministic,
    /// Draw the expert from the selection probabilities.
    Sampling,
}

/// Picks an expert from selection probabilities under `mode`.
pub fn pick<R: Rng + ?Sized>(v: &[f64], mode: InferenceMode, rng: &mut R) -> usize {
    match mode {
        InferenceMode::Deterministic => argmax(v),
        InferenceMode::Sampling => {
            let mut r: f64 = rng.random();
            for (i, &p) in v.iter().enumerate() {
                if r < p {
                    return i;
                }
                r -= p;
            }
            v.len() - 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn equal_free_experts_split_evenly() {
        let p = batch_assignment_probabilities(&[-5.0, -5.0], &[false, false], DEFAULT_PENALTY)
            .unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn consumed_expert_is_pushed_below_free_one() {
        // Even with a much better ELBO the consumed expert loses.
        let p = batch_assignment_probabilities(&[-1.0, -900.0], &[true, false], DEFAULT_PENALTY)
            .unwrap();
        assert!(p[0] < 1e-5);
        assert!(p[0] < p[1]);
    }

    #[test]
    fn direct_formula_for_two_free_experts() {
        // 1 - e^10 / (e^10 + e^20) and 1 - e^20 / (e^10 + e^20)
        let p = batch_assignment_probabilities(&[-10.0, -20.0], &[false, false], DEFAULT_PENALTY)
            .unwrap();
        let (a, b) = (10f64.exp(), 20f64.exp());
        assert!((p[0] - (1.0 - a / (a + b))).abs() < 1e-12);
        assert!((p[1] - (1.0 - b / (a + b))).abs() < 1e-12);
    }

    #[test]
    fn huge_negative_elbos_do_not_overflow() {
        let p = batch_assignment_probabilities(
            &[-2000.0, -2001.0, -5000.0],
            &[false; 3],
            DEFAULT_PENALTY,
        )
        .unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert_eq!(argmax(&p), 0);
    }

    #[test]
    fn free_experts_stay_ordered_beside_a_hopeless_consumed_one() {
        // The consumed expert's term dominates; p of both free experts rounds
        // to 1, but their log complements keep the order.
        let flags = [false, false, true];
        let q = batch_assignment_log_complements(&[-900.0, -1.0, -1700.0], &flags, DEFAULT_PENALTY)
            .unwrap();
        assert!(q[1] < q[0]);
        assert_eq!(choose_expert(&q, &flags).unwrap(), 1);
        let p = batch_assignment_probabilities(&[-900.0, -1.0, -1700.0], &flags, DEFAULT_PENALTY)
            .unwrap();
        assert!(p[2] < 1e-5);
    }

    #[test]
    fn batch_average_matches_direct_mean() {
        let batches = vec![vec![-3.0, -4.0], vec![-6.0, -2.5]];
        let p = assignment_probabilities(&batches, &[false; 2], DEFAULT_PENALTY).unwrap();
        let direct: Vec<f64> = (0..2)
            .map(|i| {
                batches
                    .iter()
                    .map(|b| {
                        batch_assignment_probabilities(b, &[false; 2], DEFAULT_PENALTY).unwrap()[i]
                    })
                    .sum::<f64>()
                    / 2.0
            })
            .collect();
        for (a, b) in p.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn non_finite_elbo_names_expert() {
        let err = batch_assignment_probabilities(&[-1.0, f64::NAN], &[false; 2], 1.0).unwrap_err();
        assert!(matches!(err, Error::Scoring { expert: 1, .. }));
    }

    #[test]
    fn choice_skips_consumed_and_breaks_ties_low() {
        assert_eq!(choose_expert(&[-5.0, -0.1], &[true, false]).unwrap(), 1);
        assert_eq!(
            choose_expert(&[-0.1, -2.0, -0.1, -2.0], &[false; 4]).unwrap(),
            1
        );
        assert!(matches!(
            choose_expert(&[-0.5, -0.5], &[true, true]),
            Err(Error::CapacityExhausted { experts: 2 })
        ));
    }

    #[test]
    fn dirichlet_parameter_table() {
        let a = dirichlet_parameters(&[true, false, false, false], 0.001).unwrap();
        assert_eq!(a[0], 0.001);
        for ai in &a[1..] {
            assert!((ai - 0.999 / 3.0).abs() < 1e-15);
        }
        assert_eq!(
            dirichlet_parameters(&[false; 4], 0.001).unwrap(),
            vec![0.25; 4]
        );
        let a = dirichlet_parameters(&[true, true, false, true], 0.001).unwrap();
        assert!((a[2] - 0.997).abs() < 1e-15);
        assert!(matches!(
            dirichlet_parameters(&[true, false], 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn weights_stay_on_simplex_for_tiny_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let w = sample_mixing_weights(&[1e-3, 1e-3, 1e-3, 0.997], &mut rng).unwrap();
            assert!(w.iter().all(|&x| x >= 0.0));
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_dirichlet_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 100_000;
        let mean: f64 = (0..n)
            .map(|_| sample_mixing_weights(&[1.0, 1.0], &mut rng).unwrap()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn inference_probabilities_favour_higher_elbo() {
        let v = inference_probabilities(&[-10.0, -1000.0]).unwrap();
        let expected = 0.1f64.exp() / (0.1f64.exp() + 0.001f64.exp());
        assert!((v[0] - expected).abs() < 1e-12);
        assert_eq!(argmax(&v), 0);
        let same = inference_probabilities(&[-3.0, -3.0, -3.0]).unwrap();
        assert!(same.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-15));
        assert!(inference_probabilities(&[0.0, -1.0])
            .unwrap()
            .iter()
            .all(|p| p.is_finite()));
    }

    #[test]
    fn sampling_mode_follows_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = [0.2, 0.8];
        let hits = (0..20_000)
            .filter(|_| pick(&v, InferenceMode::Sampling, &mut rng) == 1)
            .count();
        assert!((hits as f64 / 20_000.0 - 0.8).abs() < 0.02);
        assert_eq!(pick(&v, InferenceMode::Deterministic, &mut rng), 1);
    }
}
