//! Attack-efficacy and recommendation-quality metrics.

use std::collections::BTreeSet;
use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{self, EstimatorSettings, PopularityEstimator};
use crate::data::{PopularityLabels, UserData};
use crate::model::{self, GlobalParams, ItemScorer, ModelError};
use crate::nn::Tensor2D;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// A user as seen by the evaluator: local data plus private embedding.
#[derive(Debug, Clone, Copy)]
pub struct EvalUser<'a> {
    pub data: &'a UserData,
    pub embedding: &'a [f64],
}

/// Top-`k` list of one user over all items except its training positives.
fn top_k_for(scorer: &ItemScorer<'_>, user: &EvalUser<'_>, k: usize) -> Result<Vec<usize>> {
    let logits = scorer.logits(user.embedding)?;
    let excluded: BTreeSet<usize> = user.data.positives.iter().copied().collect();
    Ok(model::top_k_from_scores(&logits, k, &excluded))
}

/// Exposure rate and hit ratio from one ranking pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankingMetrics {
    pub exposure_rate: f64,
    pub hit_ratio: f64,
}

/// Computes ER@`k_exposure` for `target` and HR@`k_hit` in one pass.
///
/// Candidates for every user are all items except its training positives,
/// so the held-out item competes against every non-interacted item. Users
/// without a held-out item count for ER but are skipped for HR.
pub fn ranking_metrics(
    global: &GlobalParams,
    users: &[EvalUser<'_>],
    k_exposure: usize,
    k_hit: usize,
    target: usize,
) -> Result<RankingMetrics> {
    if k_exposure == 0 || k_hit == 0 {
        return Err(EvalError::InvalidArgument("K must be >= 1".into()));
    }
    if users.is_empty() {
        return Ok(RankingMetrics {
            exposure_rate: 0.0,
            hit_ratio: 0.0,
        });
    }
    let k = k_exposure.max(k_hit);
    let scorer = ItemScorer::new(global);
    let per_user: Vec<(bool, Option<bool>)> = users
        .par_iter()
        .map(|u| {
            let top = top_k_for(&scorer, u, k)?;
            let exposed = top.iter().take(k_exposure).any(|&i| i == target);
            let hit = u.data.holdout.map(|h| top.iter().take(k_hit).any(|&i| i == h));
            Ok((exposed, hit))
        })
        .collect::<Result<_>>()?;
    let exposed = per_user.iter().filter(|(e, _)| *e).count();
    let with_holdout = per_user.iter().filter(|(_, h)| h.is_some()).count();
    if with_holdout < users.len() {
        warn!("{} users without a held-out item skipped for HR", users.len() - with_holdout);
    }
    let hits = per_user.iter().filter(|(_, h)| *h == Some(true)).count();
    Ok(RankingMetrics {
        exposure_rate: exposed as f64 / users.len() as f64,
        hit_ratio: if with_holdout == 0 {
            0.0
        } else {
            hits as f64 / with_holdout as f64
        },
    })
}

/// Fraction of `users` whose top-`k` list contains `target`.
pub fn exposure_rate(global: &GlobalParams, users: &[EvalUser<'_>], k: usize, target: usize) -> Result<f64> {
    Ok(ranking_metrics(global, users, k, k, target)?.exposure_rate)
}

/// Fraction of users whose held-out item is in their top-`k` list.
pub fn hit_ratio(global: &GlobalParams, users: &[EvalUser<'_>], k: usize) -> Result<f64> {
    Ok(ranking_metrics(global, users, k, k, usize::MAX)?.hit_ratio)
}

/// Macro-averaged F1. A class with no support and no predictions scores 0.
pub fn macro_f1(predicted: &[usize], actual: &[usize], num_classes: usize) -> Result<f64> {
    if predicted.len() != actual.len() || predicted.is_empty() || num_classes == 0 {
        return Err(EvalError::InvalidArgument(
            "need equal-length, non-empty prediction and label lists".into(),
        ));
    }
    let mut total = 0.0;
    for c in 0..num_classes {
        let tp = predicted.iter().zip(actual).filter(|(&p, &a)| p == c && a == c).count() as f64;
        let fp = predicted.iter().zip(actual).filter(|(&p, &a)| p == c && a != c).count() as f64;
        let fn_ = predicted.iter().zip(actual).filter(|(&p, &a)| p != c && a == c).count() as f64;
        if tp + fn_ == 0.0 {
            warn!("class {c} absent from evaluation split; its F1 counts as 0");
        }
        let denom = 2.0 * tp + fp + fn_;
        total += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    Ok(total / num_classes as f64)
}

/// Macro F1 of `estimator` on the embedding rows listed in `items`.
pub fn classifier_f1(
    estimator: &PopularityEstimator,
    embeddings: &Tensor2D,
    labels: &PopularityLabels,
    items: &[usize],
) -> Result<f64> {
    let mut predicted = Vec::with_capacity(items.len());
    for &i in items {
        predicted.push(
            estimator
                .predict_class(embeddings.row(i))
                .map_err(|e| EvalError::InvalidArgument(e.to_string()))?,
        );
    }
    let actual: Vec<usize> = items.iter().map(|&i| labels.classes[i]).collect();
    macro_f1(&predicted, &actual, labels.num_classes)
}

/// Stratified `folds`-fold estimate of held-out macro F1.
///
/// Items of each class are dealt round-robin (in index order) into folds;
/// each fold is predicted by an estimator trained on the others, and F1 is
/// computed over the pooled held-out predictions.
pub fn cross_validated_f1(
    embeddings: &Tensor2D,
    labels: &PopularityLabels,
    items: &[usize],
    folds: usize,
    settings: &EstimatorSettings,
) -> Result<f64> {
    if folds < 2 || items.len() < folds {
        return Err(EvalError::InvalidArgument("need folds >= 2 and at least one item per fold".into()));
    }
    let mut fold_of = vec![0usize; items.len()];
    for c in 0..labels.num_classes {
        for (rank, k) in (0..items.len()).filter(|&k| labels.classes[items[k]] == c).enumerate() {
            fold_of[k] = rank % folds;
        }
    }
    let mut predicted = Vec::with_capacity(items.len());
    let mut actual = Vec::with_capacity(items.len());
    for f in 0..folds {
        let train: Vec<usize> = (0..items.len()).filter(|&k| fold_of[k] != f).map(|k| items[k]).collect();
        let test: Vec<usize> = (0..items.len()).filter(|&k| fold_of[k] == f).map(|k| items[k]).collect();
        let est = attack::train_estimator_on(embeddings, labels, &train, settings)
            .map_err(|e| EvalError::InvalidArgument(e.to_string()))?;
        for &i in &test {
            predicted.push(
                est.predict_class(embeddings.row(i))
                    .map_err(|e| EvalError::InvalidArgument(e.to_string()))?,
            );
            actual.push(labels.classes[i]);
        }
    }
    macro_f1(&predicted, &actual, labels.num_classes)
}

fn average(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let len = vectors
        .first()
        .map(Vec::len)
        .ok_or_else(|| EvalError::InvalidArgument("no updates on one side".into()))?;
    if vectors.iter().any(|v| v.len() != len) {
        return Err(EvalError::InvalidArgument("update lengths differ".into()));
    }
    let mut out = vec![0.0; len];
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= vectors.len() as f64);
    Ok(out)
}

/// KL(benign ‖ malicious) between value histograms of the two sides'
/// averaged updates.
///
/// Both averages are binned over their common `[min, max]` with `bins`
/// equal-width bins; counts get add-one smoothing. A zero-width range gives 0.
pub fn grad_kl_divergence(benign: &[Vec<f64>], malicious: &[Vec<f64>], bins: usize) -> Result<f64> {
    if bins == 0 {
        return Err(EvalError::InvalidArgument("bins must be >= 1".into()));
    }
    let p = average(benign)?;
    let q = average(malicious)?;
    let lo = p.iter().chain(&q).cloned().fold(f64::INFINITY, f64::min);
    let hi = p.iter().chain(&q).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Ok(0.0);
    }
    let histogram = |values: &[f64]| {
        let mut counts = vec![1.0; bins];
        for &v in values {
            let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
            counts[b.min(bins - 1)] += 1.0;
        }
        let total: f64 = counts.iter().sum();
        counts.into_iter().map(|c| c / total).collect::<Vec<f64>>()
    };
    let hp = histogram(&p);
    let hq = histogram(&q);
    Ok(hp
        .iter()
        .zip(&hq)
        .map(|(a, b)| a * (a / b).ln())
        .sum::<f64>()
        .max(0.0))
}

/// One row of the per-epoch metric log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub er_at_k: f64,
    pub hr_at_k: f64,
    pub kl: Option<f64>,
    pub f1: Option<f64>,
    pub aggregate_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSeries {
    pub rows: Vec<MetricRow>,
}

pub const METRIC_CSV_HEADER: &str = "epoch,er_at_k,hr_at_k,kl,f1,aggregate_norm";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricSeries {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn write_csv_header<W: Write>(mut out: W) -> std::io::Result<()> {
        writeln!(out, "{METRIC_CSV_HEADER}")
    }

    pub fn write_csv_row<W: Write>(mut out: W, r: &MetricRow) -> std::io::Result<()> {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.epoch,
            r.er_at_k,
            r.hr_at_k,
            opt(r.kl),
            opt(r.f1),
            opt(r.aggregate_norm)
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        Self::write_csv_header(&mut out)?;
        for r in &self.rows {
            Self::write_csv_row(&mut out, r)?;
        }
        Ok(())
    }

    /// First epoch whose ER reaches `threshold`, if any.
    pub fn first_epoch_reaching(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.er_at_k >= threshold).map(|r| r.epoch)
    }
}

/// `item_id,popularity_class,is_target,e0..e{d-1}` for external plotting.
pub fn write_embeddings_csv<W: Write>(
    mut out: W,
    embeddings: &Tensor2D,
    labels: &PopularityLabels,
    target: Option<usize>,
) -> std::io::Result<()> {
    let header: Vec<String> = (0..embeddings.cols()).map(|k| format!("e{k}")).collect();
    writeln!(out, "item_id,popularity_class,is_target,{}", header.join(","))?;
    for i in 0..embeddings.rows() {
        let values: Vec<String> = embeddings.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(
            out,
            "{i},{},{},{}",
            labels.classes[i],
            u8::from(target == Some(i)),
            values.join(",")
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FfnInit, ModelShape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fixture() -> (GlobalParams, Vec<UserData>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let shape = ModelShape {
            num_items: 6,
            dim: 3,
            towers: vec![4, 2],
        };
        let g = GlobalParams::random(&shape, 1.0, FfnInit::Gaussian { std: 0.8 }, &mut rng).unwrap();
        let users = vec![
            UserData {
                user: 0,
                positives: vec![0, 1],
                negatives: vec![4],
                holdout: Some(2),
            },
            UserData {
                user: 1,
                positives: vec![3],
                negatives: vec![],
                holdout: Some(5),
            },
            UserData {
                user: 2,
                positives: vec![2, 5],
                negatives: vec![],
                holdout: Some(0),
            },
        ];
        let embs: Vec<Vec<f64>> = (0..3)
            .map(|_| Tensor2D::gaussian(1, 3, 1.0, &mut rng).values().to_vec())
            .collect();
        (g, users, embs)
    }

    fn eval_users<'a>(users: &'a [UserData], embs: &'a [Vec<f64>]) -> Vec<EvalUser<'a>> {
        users
            .iter()
            .zip(embs)
            .map(|(data, e)| EvalUser { data, embedding: e })
            .collect()
    }

    /// Full-sort oracle using per-pair scores.
    fn brute_top(g: &GlobalParams, u: &EvalUser<'_>, k: usize) -> Vec<usize> {
        let mut c: Vec<(f64, usize)> = (0..g.num_items())
            .filter(|i| !u.data.positives.contains(i))
            .map(|i| (g.logit(u.embedding, i).unwrap(), i))
            .collect();
        c.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        c.into_iter().take(k).map(|(_, i)| i).collect()
    }

    #[test]
    fn metrics_match_full_sort_oracle() {
        let (g, users, embs) = fixture();
        let eu = eval_users(&users, &embs);
        for k in 1..=6 {
            for target in 0..6 {
                let er = exposure_rate(&g, &eu, k, target).unwrap();
                let expect = eu.iter().filter(|u| brute_top(&g, u, k).contains(&target)).count() as f64 / 3.0;
                assert_eq!(er, expect, "k={k} target={target}");
            }
            let hr = hit_ratio(&g, &eu, k).unwrap();
            let expect = eu
                .iter()
                .filter(|u| brute_top(&g, u, k).contains(&u.data.holdout.unwrap()))
                .count() as f64
                / 3.0;
            assert_eq!(hr, expect);
        }
    }

    #[test]
    fn k_equal_n_exposes_everything() {
        let (g, users, embs) = fixture();
        let eu = eval_users(&users, &embs);
        // item 4 is nobody's training positive
        assert_eq!(exposure_rate(&g, &eu, 6, 4).unwrap(), 1.0);
        assert_eq!(hit_ratio(&g, &eu, 6).unwrap(), 1.0);
    }

    #[test]
    fn target_in_every_profile_is_never_exposed() {
        let (g, mut users, embs) = fixture();
        for u in &mut users {
            if !u.positives.contains(&4) {
                u.positives.push(4);
            }
        }
        let eu = eval_users(&users, &embs);
        assert_eq!(exposure_rate(&g, &eu, 6, 4).unwrap(), 0.0);
    }

    #[test]
    fn metrics_monotone_in_k() {
        let (g, users, embs) = fixture();
        let eu = eval_users(&users, &embs);
        let mut last = (0.0, 0.0);
        for k in 1..=6 {
            let m = ranking_metrics(&g, &eu, k, k, 3).unwrap();
            assert!(m.exposure_rate >= last.0 && m.hit_ratio >= last.1);
            last = (m.exposure_rate, m.hit_ratio);
        }
    }

    #[test]
    fn f1_cases() {
        assert_eq!(macro_f1(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap(), 1.0);
        // everything predicted as class 0 on a balanced 3-class split:
        // class 0 has tp=2, fp=4, fn=0 -> 4/8 = 0.5; others 0.
        let actual = [0, 0, 1, 1, 2, 2];
        let f1 = macro_f1(&[0; 6], &actual, 3).unwrap();
        assert!((f1 - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn f1_matches_confusion_matrix_oracle() {
        let predicted = [0, 2, 1, 1, 0, 2, 2, 1, 0, 0];
        let actual = [0, 2, 2, 1, 1, 2, 0, 1, 0, 2];
        // confusion (rows actual, cols predicted):
        // a0: p0=2, p2=1 ; a1: p0=1, p1=2 ; a2: p0=1, p1=1, p2=2
        // class0: tp2 fp2 fn1 -> 4/7 ; class1: tp2 fp1 fn1 -> 4/6 ; class2: tp2 fp1 fn2 -> 4/7
        let expected = (4.0 / 7.0 + 4.0 / 6.0 + 4.0 / 7.0) / 3.0;
        assert!((macro_f1(&predicted, &actual, 3).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn kl_identical_is_zero_and_never_negative() {
        let a = vec![vec![0.1, -0.4, 2.0, 0.0], vec![0.3, 0.0, 1.0, -1.0]];
        assert_eq!(grad_kl_divergence(&a, &a, 50).unwrap(), 0.0);
        let b = vec![vec![5.0, 5.0, 5.0, -3.0]];
        assert!(grad_kl_divergence(&a, &b, 50).unwrap() > 0.0);
        assert_eq!(grad_kl_divergence(&[vec![1.0; 3]], &[vec![1.0; 3]], 10).unwrap(), 0.0);
        assert!(grad_kl_divergence(&a, &[], 10).is_err());
    }

    #[test]
    fn csv_rows_render_missing_as_empty() {
        let mut s = MetricSeries::default();
        s.push(MetricRow {
            epoch: 1,
            er_at_k: 0.0,
            hr_at_k: 0.25,
            kl: None,
            f1: None,
            aggregate_norm: Some(1.5),
        });
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{METRIC_CSV_HEADER}\n1,0,0.25,,,1.5\n"));
    }
}
