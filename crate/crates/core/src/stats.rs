//! Rank tests, false discovery rate control and selection-set overlap.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{contract, Result};

/// Largest `n * m` for which the exact null distribution is used.
pub const EXACT_LIMIT: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UMethod {
    Exact,
    NormalApprox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    /// `U` for the first sample: pairs with `a > b` plus half the ties.
    pub u_statistic: f64,
    pub p_two_sided: f64,
    pub method: UMethod,
    pub n: usize,
    pub m: usize,
}

/// Number of arrangements giving each value of `U` for sample sizes
/// `(n, m)` without ties; index is `U`.
fn u_null_counts(n: usize, m: usize) -> Vec<f64> {
    // f[i][j][u] = f[i-1][j][u-j] + f[i][j-1][u]
    let max_u = n * m;
    let mut table = vec![vec![Vec::<f64>::new(); m + 1]; n + 1];
    for i in 0..=n {
        for j in 0..=m {
            let mut row = vec![0.0; i * j + 1];
            if i == 0 || j == 0 {
                row[0] = 1.0;
            } else {
                for (u, slot) in row.iter_mut().enumerate() {
                    let mut c = 0.0;
                    if u >= j {
                        c += table[i - 1][j].get(u - j).copied().unwrap_or(0.0);
                    }
                    c += table[i][j - 1].get(u).copied().unwrap_or(0.0);
                    *slot = c;
                }
            }
            table[i][j] = row;
        }
    }
    let out = std::mem::take(&mut table[n][m]);
    debug_assert_eq!(out.len(), max_u + 1);
    out
}

/// Two-sided exact p-value from the tie-free null distribution.
fn exact_p(u: usize, n: usize, m: usize) -> f64 {
    let counts = u_null_counts(n, m);
    let total: f64 = counts.iter().sum();
    let lower: f64 = counts[..=u].iter().sum();
    let upper: f64 = counts[u..].iter().sum();
    (2.0 * lower.min(upper) / total).min(1.0)
}

pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<TestResult> {
    let (n, m) = (a.len(), b.len());
    if n == 0 || m == 0 {
        return Err(contract("Mann-Whitney U needs two non-empty samples"));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(contract("Mann-Whitney U got a NaN observation"));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = crate::metrics::average_ranks(&pooled);
    let rank_sum_a: f64 = ranks[..n].iter().sum();
    let u = rank_sum_a - (n * (n + 1)) as f64 / 2.0;

    // tie groups
    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut has_ties = false;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j + 1 < sorted.len() && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        if t > 1.0 {
            has_ties = true;
            tie_term += t * t * t - t;
        }
        i = j + 1;
    }

    if n * m <= EXACT_LIMIT && !has_ties {
        return Ok(TestResult {
            u_statistic: u,
            p_two_sided: exact_p(u as usize, n, m),
            method: UMethod::Exact,
            n,
            m,
        });
    }
    let total = (n + m) as f64;
    let mean = (n * m) as f64 / 2.0;
    let var = (n * m) as f64 / 12.0 * ((total + 1.0) - tie_term / (total * (total - 1.0)));
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mean).abs() - 0.5).max(0.0) / var.sqrt();
        erfc(z / std::f64::consts::SQRT_2).min(1.0)
    };
    Ok(TestResult {
        u_statistic: u,
        p_two_sided: p,
        method: UMethod::NormalApprox,
        n,
        m,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdrResult {
    pub raw_p: Vec<f64>,
    pub adjusted_p: Vec<f64>,
    pub rejected: Vec<bool>,
}

/// Benjamini-Hochberg step-up adjustment.
pub fn benjamini_hochberg(raw_p: &[f64], alpha: f64) -> Result<FdrResult> {
    if let Some(p) = raw_p.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(contract(format!("p-value {p} outside [0, 1]")));
    }
    let m = raw_p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&x, &y| raw_p[x].total_cmp(&raw_p[y]).then(x.cmp(&y)));
    let mut adjusted = vec![0.0; m];
    let mut running = 1.0f64;
    for (pos, &idx) in order.iter().enumerate().rev() {
        let rank = (pos + 1) as f64;
        running = running.min(raw_p[idx] * m as f64 / rank);
        // m / rank >= 1; the max only undoes rounding in p * m / m
        adjusted[idx] = running.max(raw_p[idx]).min(1.0);
    }
    let rejected = adjusted.iter().map(|&q| q <= alpha).collect();
    Ok(FdrResult {
        raw_p: raw_p.to_vec(),
        adjusted_p: adjusted,
        rejected,
    })
}

/// Table marker for an FDR-adjusted p-value: one dagger below 0.01, two
/// below 0.05, three below 0.1.
pub fn significance_marker(adjusted_p: f64) -> &'static str {
    if adjusted_p < 0.01 {
        "\u{2020}"
    } else if adjusted_p < 0.05 {
        "\u{2020}\u{2020}"
    } else if adjusted_p < 0.1 {
        "\u{2020}\u{2020}\u{2020}"
    } else {
        ""
    }
}

/// `|A ∩ B| / |A ∪ B|`, or `None` when both sets are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Option<f64> {
    let union = a.union(b).count();
    if union == 0 {
        return None;
    }
    Some(a.intersection(b).count() as f64 / union as f64)
}

/// The `n` most frequent candidates; ties go to the smaller index.
/// Candidates never selected are left out.
pub fn top_n(counts: &BTreeMap<usize, u64>, n: usize) -> BTreeSet<usize> {
    let mut items: Vec<(usize, u64)> = counts
        .iter()
        .filter(|(_, &c)| c > 0)
        .map(|(&k, &c)| (k, c))
        .collect();
    items.sort_by(|x, y| y.1.cmp(&x.1).then(x.0.cmp(&y.0)));
    items.into_iter().take(n).map(|(k, _)| k).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JaccardMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl JaccardMatrix {
    /// Mean of the strictly upper triangle.
    pub fn off_diagonal_mean(&self) -> f64 {
        let k = self.labels.len();
        let mut s = 0.0;
        let mut c = 0usize;
        for i in 0..k {
            for j in i + 1..k {
                s += self.values[i][j];
                c += 1;
            }
        }
        if c == 0 {
            0.0
        } else {
            s / c as f64
        }
    }

    pub fn off_diagonal_max(&self) -> f64 {
        let k = self.labels.len();
        (0..k)
            .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
            .map(|(i, j)| self.values[i][j])
            .fold(0.0, f64::max)
    }
}

/// Cell type -> perturbation -> selected-candidate set.
pub type SelectionSets = BTreeMap<String, BTreeMap<String, BTreeSet<usize>>>;

/// Mean pairwise Jaccard overlap between cell types, averaged over the
/// perturbations they share. Pairs where both sets are empty are skipped.
pub fn jaccard_overlap(selections: &SelectionSets) -> Result<JaccardMatrix> {
    let labels: Vec<String> = selections.keys().cloned().collect();
    let k = labels.len();
    if k == 0 {
        return Err(contract("jaccard overlap needs at least one cell type"));
    }
    let reference: BTreeSet<&String> = selections[&labels[0]].keys().collect();
    for l in &labels[1..] {
        let other: BTreeSet<&String> = selections[l].keys().collect();
        if other != reference {
            return Err(contract(format!(
                "cell types `{}` and `{l}` cover different perturbations",
                labels[0]
            )));
        }
    }
    let mut values = vec![vec![0.0; k]; k];
    let mut any = k == 1;
    for i in 0..k {
        values[i][i] = 1.0;
        for j in i + 1..k {
            let (a, b) = (&selections[&labels[i]], &selections[&labels[j]]);
            let scores: Vec<f64> = reference
                .iter()
                .filter_map(|p| jaccard(&a[*p], &b[*p]))
                .collect();
            let v = if scores.is_empty() {
                0.0
            } else {
                any = true;
                scores.iter().sum::<f64>() / scores.len() as f64
            };
            values[i][j] = v;
            values[j][i] = v;
        }
    }
    if !any {
        return Err(contract("every selection set pair is empty"));
    }
    Ok(JaccardMatrix { labels, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn combinations(total: usize, n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        if total < n {
            return vec![];
        }
        let mut out = combinations(total - 1, n);
        for mut c in combinations(total - 1, n - 1) {
            c.push(total - 1);
            out.push(c);
        }
        out
    }

    /// Two-sided p by listing every assignment of ranks to the first sample.
    fn enumerate_p(u_obs: f64, n: usize, m: usize) -> f64 {
        let us: Vec<f64> = combinations(n + m, n)
            .iter()
            .map(|c| c.iter().map(|&r| (r + 1) as f64).sum::<f64>() - (n * (n + 1)) as f64 / 2.0)
            .collect();
        let total = us.len() as f64;
        let lower = us.iter().filter(|&&u| u <= u_obs).count() as f64;
        let upper = us.iter().filter(|&&u| u >= u_obs).count() as f64;
        (2.0 * lower.min(upper) / total).min(1.0)
    }

    #[test]
    fn two_by_two_example() {
        let r = mann_whitney_u(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(r.u_statistic, 0.0);
        assert_eq!(r.method, UMethod::Exact);
        assert!((r.p_two_sided - 2.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn exact_matches_enumeration() {
        let mut rng = SplitMix64::new(31);
        for n in 1..=5 {
            for m in 1..=5 {
                for _ in 0..10 {
                    let mut vals: Vec<f64> = (0..n + m).map(|i| i as f64).collect();
                    rng.shuffle(&mut vals);
                    let r = mann_whitney_u(&vals[..n], &vals[n..]).unwrap();
                    assert_eq!(r.method, UMethod::Exact);
                    let want = enumerate_p(r.u_statistic, n, m);
                    assert!((r.p_two_sided - want).abs() < 1e-12, "n={n} m={m}");
                }
            }
        }
    }

    #[test]
    fn identical_samples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let r = mann_whitney_u(&a, &a).unwrap();
        assert_eq!(r.u_statistic, 8.0);
        assert_eq!(r.method, UMethod::NormalApprox);
        assert!(r.p_two_sided > 0.99);
    }

    #[test]
    fn u_is_bounded() {
        let r = mann_whitney_u(&[10.0, 11.0, 12.0], &[1.0, 2.0]).unwrap();
        assert_eq!(r.u_statistic, 6.0);
        assert!(mann_whitney_u(&[], &[1.0]).is_err());
    }

    #[test]
    fn calibrated_under_the_null() {
        let mut rng = SplitMix64::new(32);
        let trials = 1000;
        let mut hits = 0;
        for _ in 0..trials {
            let a: Vec<f64> = (0..30).map(|_| rng.next_f64()).collect();
            let b: Vec<f64> = (0..30).map(|_| rng.next_f64()).collect();
            let r = mann_whitney_u(&a, &b).unwrap();
            assert_eq!(r.method, UMethod::NormalApprox);
            if r.p_two_sided < 0.05 {
                hits += 1;
            }
        }
        let frac = hits as f64 / trials as f64;
        assert!((0.03..=0.07).contains(&frac), "{frac}");
    }

    #[test]
    fn bh_worked_example() {
        let r = benjamini_hochberg(&[0.005, 0.01, 0.03, 0.04], 0.05).unwrap();
        let want = [0.02, 0.02, 0.04, 0.04];
        for (got, w) in r.adjusted_p.iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
        assert!(r.rejected.iter().all(|&x| x));
    }

    #[test]
    fn bh_edge_cases() {
        let r = benjamini_hochberg(&[1.0, 1.0, 1.0], 0.05).unwrap();
        assert_eq!(r.adjusted_p, vec![1.0; 3]);
        assert!(r.rejected.iter().all(|&x| !x));
        assert_eq!(
            benjamini_hochberg(&[0.37], 0.05).unwrap().adjusted_p,
            vec![0.37]
        );
        assert!(benjamini_hochberg(&[1.2], 0.05).is_err());
    }

    #[test]
    fn bh_properties() {
        let mut rng = SplitMix64::new(33);
        for _ in 0..200 {
            let m = 1 + rng.below(30);
            let raw: Vec<f64> = (0..m).map(|_| rng.next_f64().powi(3)).collect();
            let r = benjamini_hochberg(&raw, 0.05).unwrap();
            let mut order: Vec<usize> = (0..m).collect();
            order.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]));
            for w in order.windows(2) {
                assert!(r.adjusted_p[w[0]] <= r.adjusted_p[w[1]]);
            }
            for i in 0..m {
                assert!(r.adjusted_p[i] >= raw[i] && r.adjusted_p[i] <= 1.0);
                if raw[i] * m as f64 <= 0.05 {
                    assert!(r.rejected[i], "bonferroni rejection must survive");
                }
            }
        }
        let tiny = benjamini_hochberg(&[0.001, 0.002, 0.0005], 0.05).unwrap();
        assert!(tiny.rejected.iter().all(|&x| x));
    }

    #[test]
    fn markers() {
        assert_eq!(significance_marker(0.005), "\u{2020}");
        assert_eq!(significance_marker(0.03), "\u{2020}\u{2020}");
        assert_eq!(significance_marker(0.07), "\u{2020}\u{2020}\u{2020}");
        assert_eq!(significance_marker(0.2), "");
    }

    #[test]
    fn jaccard_examples() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
        assert_eq!(jaccard(&s(&[1, 2]), &s(&[1, 2])), Some(1.0));
        assert!((jaccard(&s(&[0, 1]), &s(&[1, 2])).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(jaccard(&s(&[0]), &s(&[1])), Some(0.0));
        assert_eq!(jaccard::<usize>(&s(&[]), &s(&[])), None);
    }

    #[test]
    fn top_n_breaks_ties_by_index() {
        let counts: BTreeMap<usize, u64> = [(5, 3), (2, 3), (9, 7), (1, 1), (4, 0)]
            .into_iter()
            .collect();
        assert_eq!(top_n(&counts, 3), [9, 2, 5].into_iter().collect());
        assert_eq!(top_n(&counts, 10).len(), 4);
    }

    #[test]
    fn overlap_matrix() {
        let s = |v: &[usize]| v.iter().copied().collect::<BTreeSet<usize>>();
        let mut sel = SelectionSets::new();
        sel.insert(
            "a".into(),
            [("p".to_string(), s(&[0, 1])), ("q".to_string(), s(&[3]))].into(),
        );
        sel.insert(
            "b".into(),
            [("p".to_string(), s(&[1, 2])), ("q".to_string(), s(&[3]))].into(),
        );
        sel.insert(
            "c".into(),
            [("p".to_string(), s(&[])), ("q".to_string(), s(&[]))].into(),
        );
        let j = jaccard_overlap(&sel).unwrap();
        assert_eq!(j.values[0][0], 1.0);
        assert!((j.values[0][1] - (1.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
        assert_eq!(j.values[0][1], j.values[1][0]);
        assert_eq!(j.values[0][2], 0.0);
        let mut empty = SelectionSets::new();
        empty.insert("a".into(), [("p".to_string(), s(&[]))].into());
        empty.insert("b".into(), [("p".to_string(), s(&[]))].into());
        assert!(jaccard_overlap(&empty).is_err());
    }
}
