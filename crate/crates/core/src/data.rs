//! Rating ingestion, implicit-feedback datasets and item popularity labels.
//!
//! Raw ratings are binarised: any rating counts as a positive interaction.
//! Each user keeps one held-out positive for evaluation, the remaining
//! positives for training, and `q` sampled negatives per training positive.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use log::warn;
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed::{self, stream};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("no ratings found in input")]
    Empty,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// One rating with dense 0-based ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub timestamp: Option<i64>,
}

/// Parsed ratings plus the raw-id tables used to densify them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingTable {
    pub records: Vec<RatingRecord>,
    /// `user_ids[dense] = raw id`.
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
}

impl RatingTable {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    /// Number of distinct users that interacted with each item.
    pub fn item_counts(&self) -> Vec<usize> {
        let mut seen = BTreeSet::new();
        let mut counts = vec![0usize; self.num_items()];
        for r in &self.records {
            if seen.insert((r.user, r.item)) {
                counts[r.item] += 1;
            }
        }
        counts
    }
}

/// Parses delimiter-separated `user, item, rating[, timestamp]` rows.
///
/// Raw ids must be integers; they are remapped to dense indices in order of
/// first appearance. Blank lines are skipped.
pub fn load_ratings<R: BufRead>(reader: R, separator: &str) -> Result<RatingTable> {
    if separator.is_empty() {
        return Err(DataError::InvalidParameter("empty separator".into()));
    }
    let mut users: HashMap<u64, usize> = HashMap::new();
    let mut items: HashMap<u64, usize> = HashMap::new();
    let mut table = RatingTable {
        records: Vec::new(),
        user_ids: Vec::new(),
        item_ids: Vec::new(),
    };
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(separator).map(str::trim).collect();
        if fields.len() < 3 || fields.len() > 4 {
            return Err(DataError::Parse {
                line: line_no,
                reason: format!("expected 3 or 4 fields, found {}", fields.len()),
            });
        }
        let parse_id = |s: &str, what: &str| {
            s.parse::<u64>().map_err(|_| DataError::Parse {
                line: line_no,
                reason: format!("{what} id {s:?} is not a non-negative integer"),
            })
        };
        let raw_user = parse_id(fields[0], "user")?;
        let raw_item = parse_id(fields[1], "item")?;
        let rating: f64 = fields[2].parse().map_err(|_| DataError::Parse {
            line: line_no,
            reason: format!("rating {:?} is not a number", fields[2]),
        })?;
        let timestamp = match fields.get(3) {
            Some(t) => Some(t.parse::<i64>().map_err(|_| DataError::Parse {
                line: line_no,
                reason: format!("timestamp {t:?} is not an integer"),
            })?),
            None => None,
        };
        let user = *users.entry(raw_user).or_insert_with(|| {
            table.user_ids.push(raw_user);
            table.user_ids.len() - 1
        });
        let item = *items.entry(raw_item).or_insert_with(|| {
            table.item_ids.push(raw_item);
            table.item_ids.len() - 1
        });
        table.records.push(RatingRecord {
            user,
            item,
            rating,
            timestamp,
        });
    }
    if table.records.is_empty() {
        return Err(DataError::Empty);
    }
    Ok(table)
}

/// Writes ratings with raw ids, one row per record.
pub fn write_ratings<W: Write>(mut out: W, table: &RatingTable, separator: &str) -> Result<()> {
    for r in &table.records {
        let u = table.user_ids[r.user];
        let i = table.item_ids[r.item];
        match r.timestamp {
            Some(t) => writeln!(out, "{u}{separator}{i}{separator}{}{separator}{t}", r.rating)?,
            None => writeln!(out, "{u}{separator}{i}{separator}{}", r.rating)?,
        }
    }
    Ok(())
}

/// Everything one client device holds locally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserData {
    pub user: usize,
    /// Training positives. Sorted and distinct for genuine users; fake
    /// profiles may repeat fillers when sampling had to use replacement.
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
    pub holdout: Option<usize>,
}

impl UserData {
    /// `(item, label)` pairs: positives first, then negatives.
    pub fn training_pairs(&self) -> Vec<(usize, f64)> {
        self.positives
            .iter()
            .map(|&i| (i, 1.0))
            .chain(self.negatives.iter().map(|&i| (i, 0.0)))
            .collect()
    }

    /// Items this user interacted with (training positives and holdout).
    pub fn interacted(&self) -> BTreeSet<usize> {
        let mut s: BTreeSet<usize> = self.positives.iter().copied().collect();
        s.extend(self.holdout);
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionDataset {
    pub num_users: usize,
    pub num_items: usize,
    pub q: usize,
    /// Kept users in ascending user index.
    pub users: Vec<UserData>,
}

impl InteractionDataset {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn mean_profile_len(&self) -> f64 {
        if self.users.is_empty() {
            return 0.0;
        }
        self.users.iter().map(|u| u.positives.len()).sum::<usize>() as f64 / self.users.len() as f64
    }
}

/// Samples `count` items outside `exclude`, without replacement when enough
/// candidates exist and with replacement otherwise.
pub fn sample_negatives<R: Rng + ?Sized>(
    exclude: &BTreeSet<usize>,
    count: usize,
    num_items: usize,
    rng: &mut R,
) -> Vec<usize> {
    let candidates: Vec<usize> = (0..num_items).filter(|i| !exclude.contains(i)).collect();
    if count == 0 || candidates.is_empty() {
        return Vec::new();
    }
    if count <= candidates.len() {
        index::sample(rng, candidates.len(), count)
            .into_iter()
            .map(|k| candidates[k])
            .collect()
    } else {
        (0..count)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    }
}

/// Builds per-user leave-one-out datasets with `q` negatives per positive.
///
/// The held-out item is the record with the latest timestamp (ties go to the
/// later row); users whose rows lack timestamps hold out their last row.
/// Users with fewer than two distinct items are dropped.
pub fn build_dataset(table: &RatingTable, q: usize, seed: u64) -> Result<InteractionDataset> {
    if q == 0 {
        return Err(DataError::InvalidParameter("q must be >= 1".into()));
    }
    if table.records.is_empty() {
        return Err(DataError::Empty);
    }
    let num_users = table.num_users();
    let num_items = table.num_items();
    let mut per_user: Vec<Vec<&RatingRecord>> = vec![Vec::new(); num_users];
    for r in &table.records {
        per_user[r.user].push(r);
    }

    let mut users = Vec::new();
    for (user, rows) in per_user.into_iter().enumerate() {
        let distinct: BTreeSet<usize> = rows.iter().map(|r| r.item).collect();
        if distinct.len() < 2 {
            warn!("dropping user {user}: {} distinct item(s), need 2", distinct.len());
            continue;
        }
        let all_timed = rows.iter().all(|r| r.timestamp.is_some());
        let holdout = if all_timed {
            // max_by_key keeps the last maximum, i.e. the later row on ties.
            rows.iter().max_by_key(|r| r.timestamp).map(|r| r.item)
        } else {
            rows.last().map(|r| r.item)
        }
        .expect("user has rows");
        let positives: Vec<usize> = distinct.iter().copied().filter(|&i| i != holdout).collect();

        let needed = q * positives.len();
        let available = num_items - distinct.len();
        if needed > available {
            warn!("user {user}: {needed} negatives requested but only {available} candidates; sampling with replacement");
        }
        let mut rng = seed::rng_for(seed, &[stream::NEGATIVES, user as u64]);
        let negatives = sample_negatives(&distinct, needed, num_items, &mut rng);
        users.push(UserData {
            user,
            positives,
            negatives,
            holdout: Some(holdout),
        });
    }
    Ok(InteractionDataset {
        num_users,
        num_items,
        q,
        users,
    })
}

pub const NUM_POPULARITY_CLASSES: usize = 3;
pub const DEFAULT_POPULARITY_CUTOFFS: [f64; 2] = [0.10, 0.45];

/// Per-item popularity class: 0 = low, 1 = medium, 2 = high.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityLabels {
    pub classes: Vec<usize>,
    pub counts: Vec<usize>,
    pub num_classes: usize,
}

impl PopularityLabels {
    pub fn top_class(&self) -> usize {
        self.num_classes - 1
    }

    pub fn items_in_class(&self, class: usize) -> Vec<usize> {
        (0..self.classes.len()).filter(|&i| self.classes[i] == class).collect()
    }
}

/// Labels items by interaction count. With cutoffs `(a, b)` the top
/// `ceil(a N)` items are high, the next `ceil(b N) - ceil(a N)` medium and the
/// rest low. Ties in count go to the lower item index.
pub fn assign_popularity_labels(table: &RatingTable, cutoffs: [f64; 2]) -> Result<PopularityLabels> {
    if table.records.is_empty() {
        return Err(DataError::Empty);
    }
    labels_from_counts(table.item_counts(), cutoffs)
}

pub fn labels_from_counts(counts: Vec<usize>, cutoffs: [f64; 2]) -> Result<PopularityLabels> {
    let [lo, hi] = cutoffs;
    if !(lo > 0.0 && lo < hi && hi < 1.0) {
        return Err(DataError::InvalidParameter(format!(
            "cutoffs must satisfy 0 < a < b < 1, got ({lo}, {hi})"
        )));
    }
    let n = counts.len();
    if n == 0 {
        return Err(DataError::Empty);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| counts[b].cmp(&counts[a]).then(a.cmp(&b)));
    let high = ((lo * n as f64).ceil() as usize).min(n);
    let medium_end = ((hi * n as f64).ceil() as usize).clamp(high, n);
    let mut classes = vec![0usize; n];
    for (pos, &item) in order.iter().enumerate() {
        classes[item] = if pos < high {
            2
        } else if pos < medium_end {
            1
        } else {
            0
        };
    }
    Ok(PopularityLabels {
        classes,
        counts,
        num_classes: NUM_POPULARITY_CLASSES,
    })
}

/// The least-interacted item, lowest index on ties.
pub fn select_target_item(labels: &PopularityLabels) -> Result<usize> {
    labels
        .counts
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .ok_or(DataError::Empty)
}

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    /// Total distinct user-item interactions.
    pub interactions: usize,
    /// Zipf exponent of item popularity; 0 gives uniform popularity.
    pub skew: f64,
    pub clusters: usize,
    /// Weight multiplier for items in the user's own preference cluster.
    pub affinity: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 500,
            items: 200,
            interactions: 12_500,
            skew: 1.5,
            clusters: 8,
            affinity: 4.0,
            seed: 0,
        }
    }
}

/// Power-law popularity with clustered user preferences.
///
/// Items get a random popularity rank `r` and weight `(r + 1)^-skew`; users
/// and items are assigned to preference clusters and a user draws its
/// profile (without replacement) with item weights multiplied by `affinity`
/// inside its own cluster. Profile lengths vary uniformly in ±50% of the mean
/// and sum to exactly `interactions`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<RatingTable> {
    let SyntheticSpec {
        users,
        items,
        interactions,
        skew,
        clusters,
        affinity,
        seed,
    } = *spec;
    if users == 0 || items < 2 || clusters == 0 {
        return Err(DataError::InvalidParameter(
            "need users >= 1, items >= 2 and clusters >= 1".into(),
        ));
    }
    if !(skew >= 0.0 && skew.is_finite()) || !(affinity > 0.0 && affinity.is_finite()) {
        return Err(DataError::InvalidParameter("skew must be >= 0 and affinity > 0".into()));
    }
    if interactions > users * items {
        return Err(DataError::InvalidParameter(format!(
            "{interactions} interactions exceed users x items = {}",
            users * items
        )));
    }
    if interactions < 2 * users {
        return Err(DataError::InvalidParameter(format!(
            "{interactions} interactions cannot give each of {users} users two items"
        )));
    }

    let mut rng = seed::rng_for(seed, &[]);
    let ranks = index::sample(&mut rng, items, items).into_vec();
    let weight: Vec<f64> = ranks.iter().map(|&r| ((r + 1) as f64).powf(-skew)).collect();
    let item_cluster: Vec<usize> = (0..items).map(|_| rng.random_range(0..clusters)).collect();

    let mean = interactions as f64 / users as f64;
    let mut lengths: Vec<usize> = (0..users)
        .map(|_| ((mean * rng.random_range(0.5..1.5)).round() as usize).clamp(2, items))
        .collect();
    let mut total: usize = lengths.iter().sum();
    while total != interactions {
        let u = rng.random_range(0..users);
        if total < interactions && lengths[u] < items {
            lengths[u] += 1;
            total += 1;
        } else if total > interactions && lengths[u] > 2 {
            lengths[u] -= 1;
            total -= 1;
        }
    }

    let mut records = Vec::with_capacity(interactions);
    let mut clock: i64 = 978_300_000;
    for (user, &len) in lengths.iter().enumerate() {
        let cluster = rng.random_range(0..clusters);
        let picked = index::sample_weighted(
            &mut rng,
            items,
            |j| {
                if item_cluster[j] == cluster {
                    weight[j] * affinity
                } else {
                    weight[j]
                }
            },
            len,
        )
        .map_err(|e| DataError::InvalidParameter(format!("weighted sampling failed: {e}")))?;
        for j in picked.into_iter() {
            clock += 1;
            records.push(RatingRecord {
                user,
                item: j,
                rating: rng.random_range(1..=5) as f64,
                timestamp: Some(clock),
            });
        }
    }

    // Re-densify so items nobody picked disappear, as they would from a file.
    let mut item_map: HashMap<usize, usize> = HashMap::new();
    let mut item_ids = Vec::new();
    for r in &mut records {
        let next = item_map.len();
        let dense = *item_map.entry(r.item).or_insert_with(|| {
            item_ids.push(r.item as u64 + 1);
            next
        });
        r.item = dense;
    }
    Ok(RatingTable {
        records,
        user_ids: (1..=users as u64).collect(),
        item_ids,
    })
}
