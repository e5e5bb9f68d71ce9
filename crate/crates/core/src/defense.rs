//! Robust aggregation rules for flattened client updates.
//!
//! All rules take one dense vector per participant (same length) and return
//! a single aggregate. Coordinate-wise rules sum in sorted order, so their
//! output does not depend on participant order at all.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DefenseError {
    #[error("no updates to aggregate")]
    Empty,
    #[error("update {index} has length {got}, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("{rule} needs {requirement} participants, got n = {n}")]
    Infeasible {
        rule: &'static str,
        requirement: String,
        n: usize,
    },
}

pub type Result<T> = std::result::Result<T, DefenseError>;

fn check_shapes(vectors: &[Vec<f64>]) -> Result<usize> {
    let first = vectors.first().ok_or(DefenseError::Empty)?;
    let len = first.len();
    for (index, v) in vectors.iter().enumerate() {
        if v.len() != len {
            return Err(DefenseError::LengthMismatch {
                index,
                expected: len,
                got: v.len(),
            });
        }
    }
    Ok(len)
}

/// Plain average, summed in participant order.
pub fn mean(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = check_shapes(vectors)?;
    let mut out = vec![0.0; len];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

/// Coordinate-wise trimmed mean: drop the `beta` largest and `beta` smallest
/// values of each coordinate and average the rest.
pub fn trimmed_mean(vectors: &[Vec<f64>], beta: usize) -> Result<Vec<f64>> {
    let len = check_shapes(vectors)?;
    let n = vectors.len();
    if n <= 2 * beta {
        return Err(DefenseError::Infeasible {
            rule: "trimmed mean",
            requirement: format!("n > 2 * beta = {}", 2 * beta),
            n,
        });
    }
    let kept = (n - 2 * beta) as f64;
    let mut column = vec![0.0; n];
    Ok((0..len)
        .map(|c| {
            for (slot, v) in column.iter_mut().zip(vectors) {
                *slot = v[c];
            }
            column.sort_by(f64::total_cmp);
            column[beta..n - beta].iter().sum::<f64>() / kept
        })
        .collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn distance_matrix(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = vectors.len();
    let mut d = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = squared_distance(&vectors[i], &vectors[j]);
            d[i][j] = v;
            d[j][i] = v;
        }
    }
    d
}

/// Krum score of each member of `members`: the sum of squared distances to
/// its `neighbours` nearest other members.
fn scores_within(dist: &[Vec<f64>], members: &[usize], neighbours: usize) -> Vec<f64> {
    members
        .iter()
        .map(|&i| {
            let mut ds: Vec<f64> = members
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| dist[i][j])
                .collect();
            ds.sort_by(f64::total_cmp);
            ds.iter().take(neighbours).sum()
        })
        .collect()
}

/// Krum scores with `n - f - 2` neighbours. Lower means more central.
pub fn krum_scores(vectors: &[Vec<f64>], f: usize) -> Result<Vec<f64>> {
    check_shapes(vectors)?;
    let n = vectors.len();
    if n < f + 3 {
        return Err(DefenseError::Infeasible {
            rule: "krum",
            requirement: format!("n >= f + 3 = {}", f + 3),
            n,
        });
    }
    let dist = distance_matrix(vectors);
    let members: Vec<usize> = (0..n).collect();
    Ok(scores_within(&dist, &members, n - f - 2))
}

/// Indices chosen by Bulyan's first stage, in selection order.
///
/// Repeatedly takes the Krum-minimal vector among those not yet selected,
/// rescoring after every removal; equal scores are broken by vector
/// content. With `m` vectors left the score uses
/// `m - f - 2` neighbours, floored at one so late rounds stay informative.
pub fn bulyan_selection(vectors: &[Vec<f64>], f: usize) -> Result<Vec<usize>> {
    check_shapes(vectors)?;
    let n = vectors.len();
    if n < 4 * f + 3 {
        return Err(DefenseError::Infeasible {
            rule: "bulyan",
            requirement: format!("n >= 4f + 3 = {}", 4 * f + 3),
            n,
        });
    }
    let dist = distance_matrix(vectors);
    let mut remaining: Vec<usize> = (0..n).collect();
    let mut selected = Vec::with_capacity(n - 2 * f);
    while selected.len() < n - 2 * f {
        let m = remaining.len();
        let neighbours = (m.saturating_sub(f + 2)).max(1).min(m - 1);
        let scores = scores_within(&dist, &remaining, neighbours);
        let best = (0..m)
            .min_by(|&a, &b| {
                scores[a]
                    .total_cmp(&scores[b])
                    .then_with(|| lex_cmp(&vectors[remaining[a]], &vectors[remaining[b]]))
            })
            .expect("remaining is non-empty");
        selected.push(remaining.remove(best));
    }
    Ok(selected)
}

// Tie-break on content rather than position keeps selection order-free.
fn lex_cmp(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

/// Bulyan: Krum-based selection of `n - 2f` vectors, then per coordinate the
/// mean of the `n - 4f` selected values closest to the selected median.
pub fn bulyan(vectors: &[Vec<f64>], f: usize) -> Result<Vec<f64>> {
    let selected = bulyan_selection(vectors, f)?;
    let len = vectors[0].len();
    let n = vectors.len();
    let keep = n - 4 * f;
    let mut column = vec![0.0; selected.len()];
    Ok((0..len)
        .map(|c| {
            for (slot, &i) in column.iter_mut().zip(&selected) {
                *slot = vectors[i][c];
            }
            column.sort_by(f64::total_cmp);
            let s = column.len();
            let median = if s % 2 == 1 {
                column[s / 2]
            } else {
                0.5 * (column[s / 2 - 1] + column[s / 2])
            };
            let mut by_gap: Vec<f64> = column.clone();
            by_gap.sort_by(|a, b| {
                (a - median)
                    .abs()
                    .total_cmp(&(b - median).abs())
                    .then(a.total_cmp(b))
            });
            by_gap[..keep].iter().sum::<f64>() / keep as f64
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    Mean,
    TrimmedMean,
    Bulyan,
}

impl std::fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AggregationRule::Mean => "mean",
            AggregationRule::TrimmedMean => "trimmed_mean",
            AggregationRule::Bulyan => "bulyan",
        })
    }
}

/// A rule plus its robustness parameters.
///
/// When `trim` / `byzantine` are unset they resolve per round to
/// `round(assumed_fraction * n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aggregator {
    pub rule: AggregationRule,
    #[serde(default)]
    pub trim: Option<usize>,
    #[serde(default)]
    pub byzantine: Option<usize>,
    #[serde(default)]
    pub assumed_fraction: f64,
}

impl Aggregator {
    pub fn mean() -> Self {
        Self {
            rule: AggregationRule::Mean,
            trim: None,
            byzantine: None,
            assumed_fraction: 0.0,
        }
    }

    fn resolve(&self, explicit: Option<usize>, n: usize) -> usize {
        explicit.unwrap_or_else(|| (self.assumed_fraction * n as f64).round() as usize)
    }

    pub fn aggregate(&self, vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
        let n = vectors.len();
        match self.rule {
            AggregationRule::Mean => mean(vectors),
            AggregationRule::TrimmedMean => trimmed_mean(vectors, self.resolve(self.trim, n)),
            AggregationRule::Bulyan => bulyan(vectors, self.resolve(self.byzantine, n)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_column(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn trimmed_mean_cases() {
        let vs = scalar_column(&[1.0, 2.0, 3.0, 100.0]);
        assert_eq!(trimmed_mean(&vs, 1).unwrap(), vec![2.5]);
        assert_eq!(trimmed_mean(&vs, 0).unwrap(), mean(&vs).unwrap());
        assert!(matches!(trimmed_mean(&vs, 2), Err(DefenseError::Infeasible { .. })));
        let same = vec![vec![0.5, -1.0]; 5];
        assert_eq!(trimmed_mean(&same, 2).unwrap(), vec![0.5, -1.0]);
    }

    #[test]
    fn krum_flags_outlier() {
        let vs = vec![vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![9.0, -4.0]];
        let s = krum_scores(&vs, 1).unwrap();
        // n - f - 2 = 1 neighbour: identical vectors score 0, the outlier its
        // squared distance to them: 8^2 + 5^2 = 89.
        assert_eq!(s, vec![0.0, 0.0, 0.0, 89.0]);
        assert_eq!(krum_scores(&vec![vec![2.0]; 5], 1).unwrap(), vec![0.0; 5]);
        assert!(krum_scores(&vs, 2).is_err());
    }

    #[test]
    fn bulyan_degenerate_and_unanimous() {
        let vs = vec![vec![1.0, 2.0], vec![3.0, -1.0], vec![0.0, 0.5]];
        let b = bulyan(&vs, 0).unwrap();
        let m = mean(&vs).unwrap();
        for (x, y) in b.iter().zip(&m) {
            assert!((x - y).abs() < 1e-12);
        }
        let same = vec![vec![0.25, -3.0, 7.0]; 7];
        assert_eq!(bulyan(&same, 1).unwrap(), vec![0.25, -3.0, 7.0]);
    }

    #[test]
    fn bulyan_bound_message_names_requirement() {
        let err = bulyan(&vec![vec![0.0]; 6], 1).unwrap_err();
        assert!(err.to_string().contains("4f + 3 = 7"), "{err}");
    }

    #[test]
    fn bulyan_ignores_distant_outlier() {
        let benign: Vec<Vec<f64>> = vec![
            vec![1.0, 0.0],
            vec![1.2, 0.1],
            vec![0.9, -0.1],
            vec![1.1, 0.2],
            vec![0.95, 0.05],
            vec![1.05, -0.05],
        ];
        let mut vs = benign.clone();
        vs.push(vec![100.0, 0.0]);
        let sel = bulyan_selection(&vs, 1).unwrap();
        assert!(!sel.contains(&6));
        let out = bulyan(&vs, 1).unwrap();
        for c in 0..2 {
            let lo = benign.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
            let hi = benign.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
            assert!(out[c] >= lo && out[c] <= hi);
        }
    }

    #[test]
    fn aggregator_resolves_fraction() {
        let agg = Aggregator {
            rule: AggregationRule::TrimmedMean,
            trim: None,
            byzantine: None,
            assumed_fraction: 0.25,
        };
        // n = 4 -> beta = 1
        let vs = scalar_column(&[1.0, 2.0, 3.0, 100.0]);
        assert_eq!(agg.aggregate(&vs).unwrap(), vec![2.5]);
    }

    fn vectors_strategy() -> impl Strategy<Value = Vec<Vec<f64>>> {
        (7usize..12, 1usize..5).prop_flat_map(|(n, d)| {
            prop::collection::vec(prop::collection::vec(-10.0f64..10.0, d), n)
        })
    }

    proptest! {
        #[test]
        fn trimmed_within_column_range(vs in vectors_strategy(), beta in 0usize..3) {
            let out = trimmed_mean(&vs, beta).unwrap();
            for (c, &o) in out.iter().enumerate() {
                let lo = vs.iter().map(|v| v[c]).fold(f64::INFINITY, f64::min);
                let hi = vs.iter().map(|v| v[c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }

        #[test]
        fn bulyan_within_selected_range(vs in vectors_strategy()) {
            let sel = bulyan_selection(&vs, 1).unwrap();
            let out = bulyan(&vs, 1).unwrap();
            for (c, &o) in out.iter().enumerate() {
                let lo = sel.iter().map(|&i| vs[i][c]).fold(f64::INFINITY, f64::min);
                let hi = sel.iter().map(|&i| vs[i][c]).fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(o >= lo - 1e-12 && o <= hi + 1e-12);
            }
        }

        #[test]
        fn permutation_invariant(vs in vectors_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let mut perm = vs.clone();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(trimmed_mean(&vs, 2).unwrap(), trimmed_mean(&perm, 2).unwrap());
            prop_assert_eq!(bulyan(&vs, 1).unwrap(), bulyan(&perm, 1).unwrap());
            let a = mean(&vs).unwrap();
            let b = mean(&perm).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let mut ks = krum_scores(&vs, 1).unwrap();
            let mut kp = krum_scores(&perm, 1).unwrap();
            ks.sort_by(f64::total_cmp);
            kp.sort_by(f64::total_cmp);
            for (x, y) in ks.iter().zip(&kp) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn all_rules_agree_without_trimming(vs in vectors_strategy()) {
            let m = mean(&vs).unwrap();
            let t = trimmed_mean(&vs, 0).unwrap();
            let b = bulyan(&vs, 0).unwrap();
            for c in 0..m.len() {
                prop_assert!((m[c] - t[c]).abs() < 1e-12);
                prop_assert!((m[c] - b[c]).abs() < 1e-12);
            }
        }
    }
}
