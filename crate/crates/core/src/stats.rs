//! Two-group comparisons: Fisher's exact test, the Wilcoxon–Mann–Whitney
//! rank-sum test and Welch's t-test, plus a tabular report comparing
//! exposures between outcome groups.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use statrs::function::factorial::ln_binomial;

use crate::error::{Error, Result};

/// Relative tolerance when comparing table probabilities in the two-sided
/// Fisher test, so tables equal in exact arithmetic are not lost to rounding.
const FISHER_REL_TOL: f64 = 1e-7;
/// Largest pooled sample size with an exact rank-sum distribution.
pub const EXACT_RANK_SUM_MAX: usize = 12;

/// `[[a, b], [c, d]]`: rows are the grouping factor, columns the outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable2x2 {
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
}

impl ContingencyTable2x2 {
    pub fn new(a: u64, b: u64, c: u64, d: u64) -> Result<Self> {
        let t = ContingencyTable2x2 { a, b, c, d };
        if t.total() == 0 {
            return Err(Error::InvalidRequest("contingency table is empty".into()));
        }
        Ok(t)
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }

    /// Sample odds ratio `ad / bc` (infinite or NaN when `bc = 0`).
    pub fn odds_ratio(&self) -> f64 {
        (self.a * self.d) as f64 / (self.b * self.c) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sidedness {
    /// Tables with `a` at least as large as observed.
    Greater,
    /// Tables with `a` at most as large as observed.
    Less,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FisherResult {
    pub p_value: f64,
    /// A row or column margin was zero; `p_value` is 1 by convention.
    pub degenerate: bool,
}

/// Fisher's exact test by enumeration of the hypergeometric distribution of
/// `a` given the margins. The two-sided p-value sums every table no more
/// probable than the observed one.
pub fn fisher_exact(t: &ContingencyTable2x2, sidedness: Sidedness) -> FisherResult {
    let (r1, r2) = (t.a + t.b, t.c + t.d);
    let (c1, c2) = (t.a + t.c, t.b + t.d);
    if r1 == 0 || r2 == 0 || c1 == 0 || c2 == 0 {
        return FisherResult { p_value: 1.0, degenerate: true };
    }
    let n = r1 + r2;
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let ln_total = ln_binomial(n, c1);
    let pmf = |x: u64| (ln_binomial(r1, x) + ln_binomial(r2, c1 - x) - ln_total).exp();
    let p = match sidedness {
        Sidedness::Greater => (t.a..=hi).map(pmf).sum::<f64>(),
        Sidedness::Less => (lo..=t.a).map(pmf).sum::<f64>(),
        Sidedness::TwoSided => {
            let p_obs = pmf(t.a);
            (lo..=hi).map(pmf).filter(|p| *p <= p_obs * (1.0 + FISHER_REL_TOL)).sum::<f64>()
        }
    };
    FisherResult { p_value: p.clamp(0.0, 1.0), degenerate: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RankSumResult {
    /// Rank sum of the first sample (mid-ranks for ties).
    pub w: f64,
    /// Mann–Whitney `U = W − n_x(n_x+1)/2`.
    pub u: f64,
    pub p_value: f64,
    pub exact: bool,
}

/// Mid-ranks (1-based) of `values`.
fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Two-sided Wilcoxon–Mann–Whitney rank-sum test. Exact (enumerating every
/// split of the pooled mid-ranks) when `n_x + n_y ≤ 12`; otherwise the
/// normal approximation with tie and continuity corrections.
pub fn rank_sum_test(x: &[f64], y: &[f64]) -> Result<RankSumResult> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidRequest("rank-sum test needs two non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidRequest("rank-sum test needs finite values".into()));
    }
    let (nx, ny) = (x.len(), y.len());
    let n = nx + ny;
    let pooled: Vec<f64> = x.iter().chain(y).copied().collect();
    let ranks = mid_ranks(&pooled);
    let w: f64 = ranks[..nx].iter().sum();
    let u = w - (nx * (nx + 1)) as f64 / 2.0;
    let expected = nx as f64 * (n + 1) as f64 / 2.0;

    if pooled.iter().all(|v| *v == pooled[0]) {
        return Ok(RankSumResult { w, u, p_value: 1.0, exact: n <= EXACT_RANK_SUM_MAX });
    }

    if n <= EXACT_RANK_SUM_MAX {
        let observed = (w - expected).abs();
        let (mut extreme, mut total) = (0u64, 0u64);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != nx {
                continue;
            }
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            total += 1;
            if (s - expected).abs() >= observed - 1e-9 {
                extreme += 1;
            }
        }
        return Ok(RankSumResult { w, u, p_value: extreme as f64 / total as f64, exact: true });
    }

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|v| **v == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let (nxf, nyf, nf) = (nx as f64, ny as f64, n as f64);
    let var = nxf * nyf / 12.0 * ((nf + 1.0) - tie_term / (nf * (nf - 1.0)));
    let z = (((w - expected).abs() - 0.5).max(0.0)) / var.sqrt();
    let normal = Normal::standard();
    let p = (2.0 * normal.sf(z)).min(1.0);
    Ok(RankSumResult { w, u, p_value: p, exact: false })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TTestResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    /// Both samples have zero variance but different means; `p_value` is
    /// the limiting value 0.
    pub degenerate: bool,
}

/// Two-sided Welch t-test with Satterthwaite degrees of freedom.
pub fn welch_t_test(x: &[f64], y: &[f64]) -> Result<TTestResult> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidRequest("Welch t-test needs at least two values per sample".into()));
    }
    let moments = |s: &[f64]| {
        let n = s.len() as f64;
        let m = s.iter().sum::<f64>() / n;
        let v = s.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
        (n, m, v)
    };
    let (nx, mx, vx) = moments(x);
    let (ny, my, vy) = moments(y);
    let (ax, ay) = (vx / nx, vy / ny);
    let se2 = ax + ay;
    if se2 == 0.0 {
        return Ok(if mx == my {
            TTestResult { t: 0.0, df: f64::NAN, p_value: 1.0, degenerate: false }
        } else {
            TTestResult { t: (mx - my).signum() * f64::INFINITY, df: f64::NAN, p_value: 0.0, degenerate: true }
        });
    }
    let t = (mx - my) / se2.sqrt();
    let df = se2 * se2 / (ax * ax / (nx - 1.0) + ay * ay / (ny - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Evaluation(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(TTestResult { t, df, p_value: p, degenerate: false })
}

/// One line of a group-comparison report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub variable: String,
    pub test: String,
    pub statistic: Option<f64>,
    pub p_value: Option<f64>,
    pub note: String,
}

impl ReportRow {
    fn skipped(variable: &str, note: &str) -> Self {
        ReportRow { variable: variable.into(), test: "none".into(), statistic: None, p_value: None, note: note.into() }
    }
}

/// Compare two outcome groups (`success[i]` true for "successful").
///
/// Each numeric variable gets a rank-sum and a Welch test (success minus
/// failure); each binary variable gets Fisher's exact test on the table
/// `[[level & success, level & failure], [other & success, other & failure]]`,
/// reported one-sided in the observed direction and two-sided.
pub fn compare_groups(
    numeric: &[(String, Vec<f64>)],
    binary: &[(String, Vec<bool>)],
    success: &[bool],
) -> Result<Vec<ReportRow>> {
    let n = success.len();
    for (name, len) in numeric.iter().map(|(n, v)| (n, v.len())).chain(binary.iter().map(|(n, v)| (n, v.len()))) {
        if len != n {
            return Err(Error::InvalidRequest(format!("{name}: {len} values for {n} group labels")));
        }
    }
    let n_success = success.iter().filter(|s| **s).count();
    let n_failure = n - n_success;
    let mut rows = Vec::new();

    if n_success == 0 || n_failure == 0 {
        for name in numeric.iter().map(|v| &v.0).chain(binary.iter().map(|v| &v.0)) {
            rows.push(ReportRow::skipped(name, "single group; no tests"));
        }
        return Ok(rows);
    }
    let small = n_success < 2 || n_failure < 2;

    for (name, values) in numeric {
        if small {
            rows.push(ReportRow::skipped(name, "a group has fewer than 2 subjects"));
            continue;
        }
        let (xs, ys): (Vec<f64>, Vec<f64>) = {
            let xs = values.iter().zip(success).filter(|(_, s)| **s).map(|(v, _)| *v).collect();
            let ys = values.iter().zip(success).filter(|(_, s)| !**s).map(|(v, _)| *v).collect();
            (xs, ys)
        };
        rows.push(match rank_sum_test(&xs, &ys) {
            Ok(r) => ReportRow {
                variable: name.clone(),
                test: "rank_sum".into(),
                statistic: Some(r.w),
                p_value: Some(r.p_value),
                note: if r.exact { "exact".into() } else { "normal approximation".into() },
            },
            Err(e) => ReportRow::skipped(name, &e.to_string()),
        });
        rows.push(match welch_t_test(&xs, &ys) {
            Ok(r) => ReportRow {
                variable: name.clone(),
                test: "welch_t".into(),
                statistic: Some(r.t),
                p_value: Some(r.p_value),
                note: if r.degenerate { "zero variance in both groups".into() } else { format!("df={:.2}", r.df) },
            },
            Err(e) => ReportRow::skipped(name, &e.to_string()),
        });
    }

    for (name, level) in binary {
        let count = |lv: bool, ok: bool| level.iter().zip(success).filter(|(l, s)| **l == lv && **s == ok).count() as u64;
        let table = ContingencyTable2x2 { a: count(true, true), b: count(true, false), c: count(false, true), d: count(false, false) };
        let rate = |s: u64, f: u64| if s + f == 0 { 0.0 } else { s as f64 / (s + f) as f64 };
        let (side, label) = if rate(table.a, table.b) >= rate(table.c, table.d) {
            (Sidedness::Greater, "fisher_one_sided_greater")
        } else {
            (Sidedness::Less, "fisher_one_sided_less")
        };
        let table_note = format!("table [[{}; {}]; [{}; {}]]", table.a, table.b, table.c, table.d);
        for (test, sided) in [(label, side), ("fisher_two_sided", Sidedness::TwoSided)] {
            let r = fisher_exact(&table, sided);
            rows.push(ReportRow {
                variable: name.clone(),
                test: test.into(),
                statistic: Some(table.odds_ratio()),
                p_value: Some(r.p_value),
                note: if r.degenerate { format!("{table_note} zero margin") } else { table_note.clone() },
            });
        }
    }
    Ok(rows)
}

pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("VARIABLE,TEST,STATISTIC,P_VALUE,NOTE\n");
    let num = |v: Option<f64>| v.map_or_else(|| ".".to_string(), |x| x.to_string());
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.variable,
            r.test,
            num(r.statistic),
            num(r.p_value),
            r.note.replace(',', ";")
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_table_two_sided_is_one() {
        let t = ContingencyTable2x2::new(5, 5, 5, 5).unwrap();
        assert!((fisher_exact(&t, Sidedness::TwoSided).p_value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_separation() {
        let t = ContingencyTable2x2::new(10, 0, 0, 10).unwrap();
        let p = fisher_exact(&t, Sidedness::TwoSided).p_value;
        assert!((p - 2.0 / 184_756.0).abs() < 1e-15);
    }

    #[test]
    fn zero_margin_is_flagged() {
        let t = ContingencyTable2x2::new(0, 0, 3, 4).unwrap();
        let r = fisher_exact(&t, Sidedness::Greater);
        assert!(r.degenerate);
        assert_eq!(r.p_value, 1.0);
        assert!(ContingencyTable2x2::new(0, 0, 0, 0).is_err());
    }

    #[test]
    fn exact_rank_sum() {
        let r = rank_sum_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert!(r.exact);
        assert_eq!(r.w, 6.0);
        assert_eq!(r.p_value, 0.1);
    }

    #[test]
    fn identical_samples() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rank_sum_test(&x, &x).unwrap().p_value, 1.0);
        let t = welch_t_test(&x, &x).unwrap();
        assert_eq!((t.t, t.p_value), (0.0, 1.0));
        assert_eq!(rank_sum_test(&[2.0; 3], &[2.0; 20]).unwrap().p_value, 1.0);
    }

    #[test]
    fn mid_ranks_average_ties() {
        assert_eq!(mid_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn welch_shift() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [11.0, 12.0, 13.0, 14.0];
        let r = welch_t_test(&x, &y).unwrap();
        assert!(r.p_value < 1e-4);
        assert!((r.df - 6.0).abs() < 1e-12);
        let d = welch_t_test(&[1.0, 1.0], &[2.0, 2.0]).unwrap();
        assert!(d.degenerate && d.p_value == 0.0);
    }

    #[test]
    fn single_group_report() {
        let rows = compare_groups(&[("AUC".into(), vec![1.0, 2.0])], &[], &[true, true]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].test, "none");
    }
}
