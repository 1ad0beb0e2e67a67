//! Group-comparison tests against exact enumeration oracles.

use poppk_core::stats::{
    compare_groups, fisher_exact, rank_sum_test, welch_t_test, ContingencyTable2x2, Sidedness,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn binomial(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

/// Fisher p-value by exact integer enumeration of the hypergeometric
/// table counts `C(r1, x)·C(r2, c1 − x)`.
fn fisher_oracle(t: &ContingencyTable2x2, side: Sidedness) -> f64 {
    let (r1, r2, c1) = (t.a + t.b, t.c + t.d, t.a + t.c);
    let count = |x: u64| if x > c1 { 0 } else { binomial(r1, x) * binomial(r2, c1 - x) };
    let total: u128 = (0..=r1.min(c1)).map(count).sum();
    let observed = count(t.a);
    let hit: u128 = (0..=r1.min(c1))
        .filter(|&x| match side {
            Sidedness::Greater => x >= t.a,
            Sidedness::Less => x <= t.a,
            Sidedness::TwoSided => count(x) <= observed,
        })
        .map(count)
        .sum();
    hit as f64 / total as f64
}

#[test]
fn sex_by_outcome_table() {
    let t = ContingencyTable2x2::new(11, 1, 16, 12).unwrap();
    let one = fisher_exact(&t, Sidedness::Greater).p_value;
    assert!((one - fisher_oracle(&t, Sidedness::Greater)).abs() < 1e-9);
    assert!((one - 0.0335).abs() < 5e-4, "{one}");
    let two = fisher_exact(&t, Sidedness::TwoSided).p_value;
    assert!((two - fisher_oracle(&t, Sidedness::TwoSided)).abs() < 1e-9);
    assert!(two > one);
}

#[test]
fn separated_table_two_sided() {
    let t = ContingencyTable2x2::new(10, 0, 0, 10).unwrap();
    let p = fisher_exact(&t, Sidedness::TwoSided).p_value;
    let expected = 2.0 / binomial(20, 10) as f64;
    assert!(((p - expected) / expected).abs() < 1e-9);
    assert!((p - 1.083e-5).abs() < 1e-8);
}

/// Two-sided exact rank-sum p by enumerating every subset of pooled ranks.
fn rank_sum_oracle(x: &[f64], y: &[f64]) -> f64 {
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let n = pooled.len();
    let ranks: Vec<f64> = pooled
        .iter()
        .map(|v| {
            let below = pooled.iter().filter(|w| *w < v).count() as f64;
            let equal = pooled.iter().filter(|w| *w == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect();
    let nx = x.len();
    let expected = nx as f64 * (n + 1) as f64 / 2.0;
    let observed: f64 = ranks[..nx].iter().sum::<f64>() - expected;
    let mut subsets = vec![(0usize, 0.0f64)];
    for r in &ranks {
        let extended: Vec<(usize, f64)> = subsets.iter().map(|(k, s)| (k + 1, s + r)).collect();
        subsets.extend(extended);
    }
    let sums: Vec<f64> = subsets.into_iter().filter(|(k, _)| *k == nx).map(|(_, s)| s).collect();
    let extreme = sums.iter().filter(|s| (*s - expected).abs() >= observed.abs() - 1e-9).count();
    extreme as f64 / sums.len() as f64
}

#[test]
fn rank_sum_examples() {
    let r = rank_sum_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
    assert!(r.exact);
    assert_eq!(r.p_value, 0.1);
    assert_eq!(rank_sum_test(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().p_value, 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let x: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng)).collect();
    let y: Vec<f64> = (0..100).map(|_| normal.sample(&mut rng) + 1.0).collect();
    assert!(rank_sum_test(&x, &y).unwrap().p_value < 1e-3);
}

#[test]
fn welch_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let r = welch_t_test(&x, &x).unwrap();
    assert_eq!((r.t, r.p_value), (0.0, 1.0));
    let y: Vec<f64> = x.iter().map(|v| v + 10.0).collect();
    let r = welch_t_test(&x, &y).unwrap();
    // Equal variances 5/3, n = 4: t = −10/√(5/6), df = 6.
    assert!((r.t + 10.0 / (5.0f64 / 6.0).sqrt()).abs() < 1e-12);
    assert!((r.df - 6.0).abs() < 1e-12);
    assert!(r.p_value < 1e-4);
}

#[test]
fn null_calibration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let reps = 400;
    let (mut rank_hits, mut t_hits) = (0, 0);
    for _ in 0..reps {
        let x: Vec<f64> = (0..20).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<f64> = (0..20).map(|_| normal.sample(&mut rng)).collect();
        rank_hits += usize::from(rank_sum_test(&x, &y).unwrap().p_value < 0.05);
        t_hits += usize::from(welch_t_test(&x, &y).unwrap().p_value < 0.05);
    }
    for hits in [rank_hits, t_hits] {
        let rate = hits as f64 / reps as f64;
        assert!((0.02..=0.08).contains(&rate), "rejection rate {rate}");
    }
}

#[test]
fn report_includes_sex_table() {
    // 12 girls (11 successful), 28 boys (16 successful).
    let female: Vec<bool> = (0..40).map(|i| i < 12).collect();
    let success: Vec<bool> = (0..40).map(|i| if i < 12 { i != 0 } else { i >= 24 }).collect();
    let rows = compare_groups(&[], &[("SEX_FEMALE".into(), female)], &success).unwrap();
    let one = rows.iter().find(|r| r.test.starts_with("fisher_one_sided")).unwrap();
    let t = ContingencyTable2x2::new(11, 1, 16, 12).unwrap();
    assert!((one.p_value.unwrap() - fisher_oracle(&t, Sidedness::Greater)).abs() < 1e-9);
    assert!(rows.iter().any(|r| r.test == "fisher_two_sided"));
}

proptest! {
    #[test]
    fn fisher_matches_enumeration(a in 0u64..15, b in 0u64..15, c in 0u64..15, d in 0u64..15) {
        prop_assume!(a + b > 0 && c + d > 0 && a + c > 0 && b + d > 0);
        let t = ContingencyTable2x2::new(a, b, c, d).unwrap();
        for side in [Sidedness::Greater, Sidedness::Less, Sidedness::TwoSided] {
            let p = fisher_exact(&t, side).p_value;
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((p - fisher_oracle(&t, side)).abs() < 1e-9, "{:?} {:?}: {}", t, side, p);
        }
    }

    #[test]
    fn exact_rank_sum_matches_enumeration(
        x in proptest::collection::vec(0u8..6, 1..6),
        y in proptest::collection::vec(0u8..6, 1..6),
    ) {
        let x: Vec<f64> = x.into_iter().map(f64::from).collect();
        let y: Vec<f64> = y.into_iter().map(f64::from).collect();
        let r = rank_sum_test(&x, &y).unwrap();
        prop_assert!(r.exact);
        prop_assert!((r.p_value - rank_sum_oracle(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn rank_sum_is_symmetric(
        x in proptest::collection::vec(-10.0f64..10.0, 2..20),
        y in proptest::collection::vec(-10.0f64..10.0, 2..20),
    ) {
        let a = rank_sum_test(&x, &y).unwrap().p_value;
        let b = rank_sum_test(&y, &x).unwrap().p_value;
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }
}
