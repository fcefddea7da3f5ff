//! Combination-based test of the no-effect null.
//!
//! The residual vector stacks the experimental-period estimates ahead of the
//! blank-period placebos. Under the null the two blocks are exchangeable, so
//! the observed test statistic is compared against its value on every
//! `T1`-sized combination of residual coordinates; the p-value is the
//! fraction of combinations whose statistic weakly exceeds the observed one
//! (the comparison is non-strict, which matters under ties).
//!
//! When the combination count is too large to enumerate, a seeded sample of
//! combinations without replacement is used instead. The observed
//! combination is always force-included, which keeps `p̂ >= 1/M` and
//! preserves the super-uniformity of the test; sampling `M = |Π|` therefore
//! reproduces the exact p-value bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::designs::binomial;
use crate::error::{Error, Result};
use crate::estimators::EffectEstimate;

/// Default cap on `|Π|` in exact mode.
pub const DEFAULT_EXACT_CAP: u128 = 10_000_000;

/// Stacked residuals: experimental estimates first, then blank-period
/// placebos in ascending period order.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualVector {
    values: Vec<f64>,
    t1: usize,
    t_b: usize,
}

impl ResidualVector {
    pub fn new(experimental: &[f64], placebo: &[f64]) -> Result<Self> {
        if placebo.is_empty() {
            return Err(Error::NoBlankPeriods);
        }
        if experimental.is_empty() {
            return Err(Error::DimensionMismatch("no experimental estimates".into()));
        }
        let mut values = experimental.to_vec();
        values.extend_from_slice(placebo);
        Ok(ResidualVector { values, t1: experimental.len(), t_b: placebo.len() })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn t1(&self) -> usize {
        self.t1
    }

    pub fn t_b(&self) -> usize {
        self.t_b
    }

    /// Number of combinations `|Π| = C(T1 + T_B, T1)`.
    pub fn n_combinations(&self) -> u128 {
        binomial(self.values.len(), self.t1)
    }
}

/// Build the residual vector from an estimate that carries blank-period
/// placebos.
pub fn build_residuals(est: &EffectEstimate) -> Result<ResidualVector> {
    ResidualVector::new(&est.values, &est.placebo)
}

/// Test statistic family over a combination's residual block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    /// Mean absolute value.
    MeanAbs,
    /// `((1/T1) Σ |e_t|^p)^(1/p)`.
    Lp(f64),
    /// Mean of `e_t` (signed).
    OneSidedPos,
    /// Mean of `-e_t` (signed).
    OneSidedNeg,
}

/// Evaluate the statistic on one residual block.
pub fn test_statistic(e: &[f64], kind: StatisticKind) -> f64 {
    assert!(!e.is_empty(), "statistic needs at least one coordinate");
    let n = e.len() as f64;
    match kind {
        StatisticKind::MeanAbs => e.iter().map(|x| x.abs()).sum::<f64>() / n,
        StatisticKind::Lp(p) => {
            assert!(p > 0.0, "Lp order must be positive");
            (e.iter().map(|x| x.abs().powf(p)).sum::<f64>() / n).powf(1.0 / p)
        }
        StatisticKind::OneSidedPos => e.iter().sum::<f64>() / n,
        StatisticKind::OneSidedNeg => -e.iter().sum::<f64>() / n,
    }
}

/// Exact enumeration or seeded sampling of the combination set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingMode {
    Exact,
    Sampled { m: u64, seed: u64 },
}

/// Outcome of the combination test.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceResult {
    /// Count of combinations with `S(ê_π) >= S(ê)`.
    pub numerator: u64,
    /// `|Π|` in exact mode, the sample size in sampled mode.
    pub denominator: u64,
    /// `numerator / denominator`.
    pub p_value: f64,
    /// Total combination count `|Π|`.
    pub n_combinations: u64,
    pub mode: SamplingMode,
    pub statistic_kind: StatisticKind,
    /// Observed statistic `S(ê)` on the experimental block.
    pub observed: f64,
}

/// Run the combination test with the default exact-mode cap.
pub fn p_value(r: &ResidualVector, kind: StatisticKind, mode: SamplingMode) -> Result<InferenceResult> {
    p_value_with_cap(r, kind, mode, DEFAULT_EXACT_CAP)
}

/// Run the combination test; `exact_cap` bounds the combination count that
/// exact mode is willing to enumerate.
pub fn p_value_with_cap(
    r: &ResidualVector,
    kind: StatisticKind,
    mode: SamplingMode,
    exact_cap: u128,
) -> Result<InferenceResult> {
    let n = r.values.len();
    let t1 = r.t1;
    let total = binomial(n, t1);
    let observed = test_statistic(&r.values[..t1], kind);
    match mode {
        SamplingMode::Exact => {
            if total > exact_cap {
                return Err(Error::CombinationCapExceeded { n_combinations: total, cap: exact_cap });
            }
            let mut numerator = 0u64;
            let mut denominator = 0u64;
            let mut idx: Vec<usize> = (0..t1).collect();
            let mut block = vec![0.0; t1];
            loop {
                for (slot, &i) in block.iter_mut().zip(idx.iter()) {
                    *slot = r.values[i];
                }
                if test_statistic(&block, kind) >= observed {
                    numerator += 1;
                }
                denominator += 1;
                if !advance(&mut idx, n) {
                    break;
                }
            }
            Ok(InferenceResult {
                numerator,
                denominator,
                p_value: numerator as f64 / denominator as f64,
                n_combinations: total as u64,
                mode,
                statistic_kind: kind,
                observed,
            })
        }
        SamplingMode::Sampled { m, seed } => {
            if total > u64::MAX as u128 {
                return Err(Error::CombinationCapExceeded {
                    n_combinations: total,
                    cap: u64::MAX as u128,
                });
            }
            let total = total as u64;
            if m == 0 || m > total {
                return Err(Error::SampleLargerThanPopulation { m: m as u128, population: total as u128 });
            }
            // Floyd's algorithm over ranks 1..total, then force-include the
            // observed combination at rank 0.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chosen: Vec<u64> = Vec::with_capacity(m as usize);
            let population = total - 1;
            let take = m - 1;
            for i in (population - take)..population {
                let draw = rng.gen_range(0..=i);
                if chosen.contains(&(draw + 1)) {
                    chosen.push(i + 1);
                } else {
                    chosen.push(draw + 1);
                }
            }
            chosen.push(0);
            chosen.sort_unstable();
            let mut numerator = 0u64;
            let mut block = vec![0.0; t1];
            let mut idx = vec![0usize; t1];
            for &rank in &chosen {
                unrank(rank, n, t1, &mut idx);
                for (slot, &i) in block.iter_mut().zip(idx.iter()) {
                    *slot = r.values[i];
                }
                if test_statistic(&block, kind) >= observed {
                    numerator += 1;
                }
            }
            Ok(InferenceResult {
                numerator,
                denominator: m,
                p_value: numerator as f64 / m as f64,
                n_combinations: total,
                mode,
                statistic_kind: kind,
                observed,
            })
        }
    }
}

/// Lexicographic successor of a `k`-combination of `0..n`.
fn advance(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for l in i + 1..k {
                idx[l] = idx[l - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Write the combination with the given lexicographic rank into `out`.
fn unrank(rank: u64, n: usize, k: usize, out: &mut [usize]) {
    let mut remaining = rank as u128;
    let mut next = 0usize;
    for slot in 0..k {
        let mut x = next;
        loop {
            let skip = binomial(n - x - 1, k - slot - 1);
            if remaining < skip {
                break;
            }
            remaining -= skip;
            x += 1;
        }
        out[slot] = x;
        next = x + 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::{EffectEstimate, Estimand};
    use approx::assert_relative_eq;
    use itertools::Itertools;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn estimate(values: Vec<f64>, placebo: Vec<f64>) -> EffectEstimate {
        EffectEstimate {
            estimand: Estimand::Ate,
            bias_corrected: false,
            periods: (0..values.len()).collect(),
            values,
            blank_periods: (0..placebo.len()).collect(),
            placebo,
        }
    }

    #[test]
    fn residuals_concatenate_in_order() {
        let r = build_residuals(&estimate(vec![2.0], vec![1.0])).unwrap();
        assert_eq!(r.values(), &[2.0, 1.0]);
        assert_eq!(r.t1(), 1);
        assert_eq!(r.t_b(), 1);
    }

    #[test]
    fn paper_configuration_has_252_combinations() {
        let r = build_residuals(&estimate(vec![0.0; 5], vec![0.0; 5])).unwrap();
        assert_eq!(r.values().len(), 10);
        assert_eq!(r.n_combinations(), 252);
    }

    #[test]
    fn no_blank_periods_is_rejected() {
        let err = build_residuals(&estimate(vec![1.0], vec![])).unwrap_err();
        assert!(matches!(err, Error::NoBlankPeriods));
    }

    #[test]
    fn statistic_examples() {
        assert_relative_eq!(test_statistic(&[-1.0, 2.0, -3.0], StatisticKind::MeanAbs), 2.0);
        assert_eq!(test_statistic(&[0.0, 0.0, 0.0], StatisticKind::MeanAbs), 0.0);
        assert_relative_eq!(
            test_statistic(&[-1.0, 2.0, -3.0], StatisticKind::OneSidedPos),
            -2.0 / 3.0
        );
        assert_relative_eq!(
            test_statistic(&[-1.0, 2.0, -3.0], StatisticKind::OneSidedNeg),
            2.0 / 3.0
        );
        // L2 of (3, 4) is 5/sqrt(2) under the mean convention.
        assert_relative_eq!(
            test_statistic(&[3.0, 4.0], StatisticKind::Lp(2.0)),
            (12.5f64).sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn two_combination_p_value() {
        let r = ResidualVector::new(&[2.0], &[1.0]).unwrap();
        let res = p_value(&r, StatisticKind::MeanAbs, SamplingMode::Exact).unwrap();
        assert_eq!(res.numerator, 1);
        assert_eq!(res.denominator, 2);
        assert_relative_eq!(res.p_value, 0.5);
    }

    #[test]
    fn six_combination_p_value_matches_brute_force() {
        let r = ResidualVector::new(&[3.0, 1.0], &[2.0, 0.5]).unwrap();
        let res = p_value(&r, StatisticKind::MeanAbs, SamplingMode::Exact).unwrap();
        assert_eq!(res.numerator, 2);
        assert_eq!(res.denominator, 6);
        assert_relative_eq!(res.p_value, 1.0 / 3.0);
        // Independent brute force over index pairs.
        let values = r.values();
        let observed = (values[0].abs() + values[1].abs()) / 2.0;
        let count = (0..4)
            .combinations(2)
            .filter(|c| (values[c[0]].abs() + values[c[1]].abs()) / 2.0 >= observed)
            .count();
        assert_eq!(res.numerator as usize, count);
    }

    #[test]
    fn total_tie_gives_p_one() {
        let r = ResidualVector::new(&[1.5, -1.5], &[1.5, -1.5, 1.5]).unwrap();
        let res = p_value(&r, StatisticKind::MeanAbs, SamplingMode::Exact).unwrap();
        assert_relative_eq!(res.p_value, 1.0);
    }

    #[test]
    fn combination_cap_is_enforced() {
        let r = ResidualVector::new(&[1.0; 5], &[2.0; 5]).unwrap();
        let err =
            p_value_with_cap(&r, StatisticKind::MeanAbs, SamplingMode::Exact, 100).unwrap_err();
        assert!(matches!(err, Error::CombinationCapExceeded { n_combinations: 252, cap: 100 }));
    }

    #[test]
    fn sample_larger_than_population_is_rejected() {
        let r = ResidualVector::new(&[1.0], &[2.0]).unwrap();
        let err = p_value(&r, StatisticKind::MeanAbs, SamplingMode::Sampled { m: 5, seed: 1 })
            .unwrap_err();
        assert!(matches!(err, Error::SampleLargerThanPopulation { .. }));
    }

    #[test]
    fn sampled_p_value_is_at_least_one_over_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let exp: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 10.0).collect();
            let blank: Vec<f64> = (0..6).map(|_| rng.gen::<f64>()).collect();
            let r = ResidualVector::new(&exp, &blank).unwrap();
            let res = p_value(&r, StatisticKind::MeanAbs, SamplingMode::Sampled { m: 20, seed: 9 })
                .unwrap();
            assert!(res.p_value >= 1.0 / 20.0);
        }
    }

    #[test]
    fn full_sample_reproduces_exact_mode_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..10 {
            let exp: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let blank: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let r = ResidualVector::new(&exp, &blank).unwrap();
            let total = r.n_combinations() as u64;
            let exact = p_value(&r, StatisticKind::MeanAbs, SamplingMode::Exact).unwrap();
            let sampled =
                p_value(&r, StatisticKind::MeanAbs, SamplingMode::Sampled { m: total, seed })
                    .unwrap();
            assert_eq!(exact.numerator, sampled.numerator);
            assert_eq!(exact.denominator, sampled.denominator);
            assert!(exact.p_value == sampled.p_value);
        }
    }

    #[test]
    fn iid_noise_calibration_on_small_design() {
        // T1 = 2, T_B = 2: p is uniform on {1/6, ..., 6/6} for continuous
        // exchangeable residuals, so Pr(p <= 1/3) = 1/3.
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let reps = 6000;
        let mut hits = 0;
        for _ in 0..reps {
            let exp = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let blank = [rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5];
            let r = ResidualVector::new(&exp, &blank).unwrap();
            let res = p_value(&r, StatisticKind::MeanAbs, SamplingMode::Exact).unwrap();
            if res.p_value <= 1.0 / 3.0 + 1e-12 {
                hits += 1;
            }
        }
        let rate = hits as f64 / reps as f64;
        assert!((rate - 1.0 / 3.0).abs() < 0.03, "rate = {rate}");
    }

    proptest! {
        #[test]
        fn granularity_and_range(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let t1 = rng.gen_range(1..=3usize);
            let t_b = rng.gen_range(1..=4usize);
            let exp: Vec<f64> = (0..t1).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let blank: Vec<f64> = (0..t_b).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let r = ResidualVector::new(&exp, &blank).unwrap();
            let res = p_value(&r, StatisticKind::MeanAbs, SamplingMode::Exact).unwrap();
            prop_assert!(res.numerator >= 1);
            prop_assert_eq!(res.denominator as u128, r.n_combinations());
            prop_assert!(res.p_value > 0.0 && res.p_value <= 1.0);
        }

        #[test]
        fn positive_scaling_preserves_p(seed in 0u64..200, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let exp: Vec<f64> = (0..2).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let blank: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            let scaled_exp: Vec<f64> = exp.iter().map(|x| c * x).collect();
            let scaled_blank: Vec<f64> = blank.iter().map(|x| c * x).collect();
            for kind in [StatisticKind::MeanAbs, StatisticKind::Lp(3.0)] {
                let base = p_value(
                    &ResidualVector::new(&exp, &blank).unwrap(), kind, SamplingMode::Exact,
                ).unwrap();
                let scaled = p_value(
                    &ResidualVector::new(&scaled_exp, &scaled_blank).unwrap(),
                    kind,
                    SamplingMode::Exact,
                ).unwrap();
                prop_assert_eq!(base.numerator, scaled.numerator);
            }
        }
    }
}
