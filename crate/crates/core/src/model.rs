//! Neural collaborative filtering with federated parameter split.
//!
//! A score is `sigmoid(h · FFN(u ⊕ v))` where `u` is the private user
//! embedding, `v` an item embedding row, `FFN` a ReLU tower and `h` the
//! output projection. Item embeddings, the tower and `h` are shared through
//! the server; `u` never leaves the client.

use std::collections::{BTreeMap, BTreeSet};

use log::debug;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{self, Activation, MlpGrads, MlpParams, NnError, Tensor2D};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("item {item} out of range (N = {num_items})")]
    ItemOutOfRange { item: usize, num_items: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid model configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// How shared parameters are initialised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FfnInit {
    /// Every weight from `N(0, std^2)`.
    Gaussian { std: f64 },
    /// Weights from `N(0, 2 / fan_in)`.
    FanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_items: usize,
    pub dim: usize,
    /// Output sizes of the FFN layers; the input is `2 * dim`.
    pub towers: Vec<usize>,
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.num_items == 0 {
            return Err(ModelError::InvalidConfig("dim and num_items must be > 0".into()));
        }
        if self.towers.is_empty() || self.towers.contains(&0) {
            return Err(ModelError::InvalidConfig("towers must be non-empty and positive".into()));
        }
        Ok(())
    }

    fn ffn_dims(&self) -> Vec<usize> {
        std::iter::once(2 * self.dim).chain(self.towers.iter().copied()).collect()
    }
}

/// Parameters shared through the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalParams {
    pub item_embeddings: Tensor2D,
    pub ffn: MlpParams,
    pub projection: Vec<f64>,
}

impl GlobalParams {
    pub fn zeros(shape: &ModelShape) -> Result<Self> {
        shape.validate()?;
        let ffn = MlpParams::zeros(&shape.ffn_dims(), Activation::Relu, Activation::Relu)?;
        Ok(Self {
            item_embeddings: Tensor2D::zeros(shape.num_items, shape.dim),
            projection: vec![0.0; ffn.output_dim()],
            ffn,
        })
    }

    /// Embeddings and the projection from `N(0, embedding_std^2)`; the tower per `ffn_init`.
    pub fn random<R: Rng + ?Sized>(
        shape: &ModelShape,
        embedding_std: f64,
        ffn_init: FfnInit,
        rng: &mut R,
    ) -> Result<Self> {
        shape.validate()?;
        let item_embeddings = Tensor2D::gaussian(shape.num_items, shape.dim, embedding_std, rng);
        let dims = shape.ffn_dims();
        let ffn = match ffn_init {
            FfnInit::Gaussian { std } => {
                MlpParams::gaussian(&dims, Activation::Relu, Activation::Relu, std, rng)?
            }
            FfnInit::FanIn => MlpParams::fan_in_gaussian(&dims, Activation::Relu, Activation::Relu, 2.0, rng)?,
        };
        let projection_std = match ffn_init {
            FfnInit::Gaussian { std } => std,
            FfnInit::FanIn => (1.0 / ffn.output_dim() as f64).sqrt(),
        };
        let projection = Tensor2D::gaussian(1, ffn.output_dim(), projection_std, rng)
            .values()
            .to_vec();
        Self::new(item_embeddings, ffn, projection)
    }

    pub fn new(item_embeddings: Tensor2D, ffn: MlpParams, projection: Vec<f64>) -> Result<Self> {
        if ffn.input_dim() != 2 * item_embeddings.cols() {
            return Err(ModelError::Shape(format!(
                "ffn input {} != 2 * dim {}",
                ffn.input_dim(),
                item_embeddings.cols()
            )));
        }
        if projection.len() != ffn.output_dim() {
            return Err(ModelError::Shape(format!(
                "projection length {} != ffn output {}",
                projection.len(),
                ffn.output_dim()
            )));
        }
        Ok(Self {
            item_embeddings,
            ffn,
            projection,
        })
    }

    #[inline]
    pub fn num_items(&self) -> usize {
        self.item_embeddings.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.item_embeddings.cols()
    }

    pub fn is_finite(&self) -> bool {
        self.item_embeddings.is_finite()
            && self.ffn.is_finite()
            && self.projection.iter().all(|v| v.is_finite())
    }

    /// `self -= lr * update`.
    pub fn apply_update(&mut self, update: &GradientUpdate, lr: f64) -> Result<()> {
        update.check_against(self)?;
        for (&item, row) in &update.item_rows {
            nn::axpy(self.item_embeddings.row_mut(item), -lr, row);
        }
        self.ffn.sgd_apply(&update.ffn, lr)?;
        nn::axpy(&mut self.projection, -lr, &update.projection);
        Ok(())
    }

    fn check_item(&self, item: usize) -> Result<()> {
        if item >= self.num_items() {
            return Err(ModelError::ItemOutOfRange {
                item,
                num_items: self.num_items(),
            });
        }
        Ok(())
    }

    fn check_user(&self, user_embedding: &[f64]) -> Result<()> {
        if user_embedding.len() != self.dim() {
            return Err(ModelError::Shape(format!(
                "user embedding length {} != dim {}",
                user_embedding.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Pre-sigmoid score `h · FFN(u ⊕ v)`.
    pub fn logit(&self, user_embedding: &[f64], item: usize) -> Result<f64> {
        self.check_item(item)?;
        self.check_user(user_embedding)?;
        let input = concat(user_embedding, self.item_embeddings.row(item));
        let out = self.ffn.predict(&input)?;
        Ok(nn::dot(&self.projection, &out))
    }

    /// Predicted interaction probability in `[0, 1]`.
    pub fn score(&self, user_embedding: &[f64], item: usize) -> Result<f64> {
        Ok(nn::sigmoid(self.logit(user_embedding, item)?))
    }

    /// Forward and backward for one `(user, item)` pair given `d loss / d logit`
    /// as a function of the logit. Gradients are added into `grads` and
    /// `user_grad`; returns the loss.
    pub fn accumulate_pair<F>(
        &self,
        user_embedding: &[f64],
        item: usize,
        loss_fn: F,
        grads: &mut GradientUpdate,
        user_grad: &mut [f64],
    ) -> Result<f64>
    where
        F: FnOnce(f64) -> (f64, f64),
    {
        self.check_item(item)?;
        self.check_user(user_embedding)?;
        let d = self.dim();
        let input = concat(user_embedding, self.item_embeddings.row(item));
        let (out, cache) = self.ffn.forward(&input)?;
        let logit = nn::dot(&self.projection, &out);
        let (loss, dlogit) = loss_fn(logit);
        if dlogit != 0.0 {
            nn::axpy(&mut grads.projection, dlogit, &out);
            let upstream: Vec<f64> = self.projection.iter().map(|h| dlogit * h).collect();
            let dinput = self.ffn.backward_accumulate(&cache, &upstream, 1.0, &mut grads.ffn)?;
            nn::axpy(user_grad, 1.0, &dinput[..d]);
            let row = grads.item_rows.entry(item).or_insert_with(|| vec![0.0; d]);
            nn::axpy(row, 1.0, &dinput[d..]);
        }
        Ok(loss)
    }
}

fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// What a client uploads: gradients of shared parameters only.
///
/// Item-embedding gradients are sparse over the rows the client touched.
/// There is deliberately no field for the user embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradientUpdate {
    pub item_rows: BTreeMap<usize, Vec<f64>>,
    pub ffn: MlpGrads,
    pub projection: Vec<f64>,
}

impl GradientUpdate {
    pub fn zeros_like(global: &GlobalParams) -> Self {
        Self {
            item_rows: BTreeMap::new(),
            ffn: MlpGrads::zeros_like(&global.ffn),
            projection: vec![0.0; global.projection.len()],
        }
    }

    pub fn check_against(&self, global: &GlobalParams) -> Result<()> {
        for (&item, row) in &self.item_rows {
            global.check_item(item)?;
            if row.len() != global.dim() {
                return Err(ModelError::Shape(format!("item row {item} has length {}", row.len())));
            }
        }
        if self.projection.len() != global.projection.len()
            || self.ffn.layers.len() != global.ffn.layers.len()
            || self
                .ffn
                .layers
                .iter()
                .zip(&global.ffn.layers)
                .any(|(g, p)| g.weight.shape() != p.weight.shape() || g.bias.len() != p.bias.len())
        {
            return Err(ModelError::Shape("update does not match global parameters".into()));
        }
        Ok(())
    }

    pub fn add_scaled(&mut self, other: &GradientUpdate, scale: f64) -> Result<()> {
        if self.projection.len() != other.projection.len() {
            return Err(ModelError::Shape("projection length differs".into()));
        }
        for (&item, row) in &other.item_rows {
            let dst = self
                .item_rows
                .entry(item)
                .or_insert_with(|| vec![0.0; row.len()]);
            if dst.len() != row.len() {
                return Err(ModelError::Shape(format!("item row {item} length differs")));
            }
            nn::axpy(dst, scale, row);
        }
        self.ffn.add_scaled(&other.ffn, scale)?;
        nn::axpy(&mut self.projection, scale, &other.projection);
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for row in self.item_rows.values_mut() {
            row.iter_mut().for_each(|v| *v *= s);
        }
        self.ffn.scale(s);
        self.projection.iter_mut().for_each(|v| *v *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.item_rows.values().all(|r| r.iter().all(|v| v.is_finite()))
            && self.ffn.is_finite()
            && self.projection.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        let rows: f64 = self.item_rows.values().flatten().map(|v| v * v).sum();
        let ffn: f64 = self
            .ffn
            .layers
            .iter()
            .flat_map(|l| l.weight.values().iter().chain(&l.bias))
            .map(|v| v * v)
            .sum();
        let proj: f64 = self.projection.iter().map(|v| v * v).sum();
        (rows + ffn + proj).sqrt()
    }
}

/// Dense coordinate system over a subset of item rows plus all dense
/// shared parameters: `[rows..., ffn (layer-major), projection]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamLayout {
    rows: Vec<usize>,
    dim: usize,
    ffn_len: usize,
    projection_len: usize,
}

impl ParamLayout {
    pub fn new(rows: impl IntoIterator<Item = usize>, global: &GlobalParams) -> Self {
        let rows: BTreeSet<usize> = rows.into_iter().collect();
        Self {
            rows: rows.into_iter().collect(),
            dim: global.dim(),
            ffn_len: global.ffn.num_params(),
            projection_len: global.projection.len(),
        }
    }

    /// Rows touched by any of `updates`.
    pub fn union_of<'a>(updates: impl IntoIterator<Item = &'a GradientUpdate>, global: &GlobalParams) -> Self {
        let rows: BTreeSet<usize> = updates
            .into_iter()
            .flat_map(|u| u.item_rows.keys().copied())
            .collect();
        Self::new(rows, global)
    }

    pub fn rows(&self) -> &[usize] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.dim + self.ffn_len + self.projection_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Rows outside the layout are an error; rows inside it but absent from
    /// the update are zero.
    pub fn flatten_update(&self, update: &GradientUpdate) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows.len() * self.dim];
        for (&item, row) in &update.item_rows {
            let slot = self.rows.binary_search(&item).map_err(|_| {
                ModelError::Shape(format!("update row {item} is outside the layout"))
            })?;
            out[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(row);
        }
        update.ffn.extend_flat(&mut out);
        out.extend_from_slice(&update.projection);
        if out.len() != self.len() {
            return Err(ModelError::Shape("update shape differs from layout".into()));
        }
        Ok(out)
    }

    /// Every layout row is emitted, including all-zero ones.
    pub fn unflatten_update(&self, flat: &[f64], global: &GlobalParams) -> Result<GradientUpdate> {
        if flat.len() != self.len() {
            return Err(ModelError::Shape(format!(
                "flat length {} != layout length {}",
                flat.len(),
                self.len()
            )));
        }
        let mut update = GradientUpdate::zeros_like(global);
        let d = self.dim;
        for (slot, &item) in self.rows.iter().enumerate() {
            update.item_rows.insert(item, flat[slot * d..(slot + 1) * d].to_vec());
        }
        let off = self.rows.len() * d;
        let used = update.ffn.read_flat(&flat[off..])?;
        update.projection.copy_from_slice(&flat[off + used..]);
        Ok(update)
    }

    pub fn flatten_params(&self, global: &GlobalParams) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for &item in &self.rows {
            out.extend_from_slice(global.item_embeddings.row(item));
        }
        global.ffn.extend_flat(&mut out);
        out.extend_from_slice(&global.projection);
        out
    }

    pub fn write_params(&self, flat: &[f64], global: &mut GlobalParams) -> Result<()> {
        if flat.len() != self.len() {
            return Err(ModelError::Shape("flat parameter length differs from layout".into()));
        }
        let d = self.dim;
        for (slot, &item) in self.rows.iter().enumerate() {
            global
                .item_embeddings
                .row_mut(item)
                .copy_from_slice(&flat[slot * d..(slot + 1) * d]);
        }
        let off = self.rows.len() * d;
        let used = global.ffn.read_flat(&flat[off..])?;
        global.projection.copy_from_slice(&flat[off + used..]);
        Ok(())
    }
}

/// One user's device: private embedding plus a copy of the shared model.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalClientState {
    pub user: usize,
    pub user_embedding: Vec<f64>,
    pub shared: GlobalParams,
}

impl LocalClientState {
    pub fn score(&self, item: usize) -> Result<f64> {
        self.shared.score(&self.user_embedding, item)
    }

    pub fn loss_and_grads(&self, batch: &[(usize, f64)]) -> Result<(f64, GradientUpdate, Vec<f64>)> {
        local_loss_and_grads(&self.shared, &self.user_embedding, batch)
    }

    pub fn recommend_top_k(&self, k: usize, excluded: &BTreeSet<usize>) -> Result<Vec<usize>> {
        recommend_top_k(&self.shared, &self.user_embedding, k, excluded)
    }
}

/// Summed binary cross-entropy over `batch` and its gradients.
///
/// Returns `(loss, shared-parameter gradients, user-embedding gradient)`.
pub fn local_loss_and_grads(
    global: &GlobalParams,
    user_embedding: &[f64],
    batch: &[(usize, f64)],
) -> Result<(f64, GradientUpdate, Vec<f64>)> {
    let mut grads = GradientUpdate::zeros_like(global);
    let mut user_grad = vec![0.0; global.dim()];
    let mut loss = 0.0;
    for &(item, label) in batch {
        if label != 0.0 && label != 1.0 {
            return Err(ModelError::InvalidConfig(format!("label {label} is not 0 or 1")));
        }
        loss += global.accumulate_pair(
            user_embedding,
            item,
            |z| nn::bce_with_logit(z, label),
            &mut grads,
            &mut user_grad,
        )?;
    }
    Ok((loss, grads, user_grad))
}

/// Result of one pass of local SGD.
#[derive(Debug, Clone)]
pub struct LocalPass {
    /// Sum of the batch gradients, i.e. `(θ_downloaded - θ_after) / lr`.
    pub update: GradientUpdate,
    pub user_embedding: Vec<f64>,
    pub loss: f64,
}

/// Runs `epochs` shuffled mini-batch SGD passes over `pairs` on a private
/// copy of `global`.
pub fn local_train<R: Rng + ?Sized>(
    global: &GlobalParams,
    user_embedding: &[f64],
    pairs: &[(usize, f64)],
    batch_size: usize,
    epochs: usize,
    lr: f64,
    rng: &mut R,
) -> Result<LocalPass> {
    if batch_size == 0 {
        return Err(ModelError::InvalidConfig("batch size must be > 0".into()));
    }
    let mut local = global.clone();
    let mut user = user_embedding.to_vec();
    let mut total = GradientUpdate::zeros_like(global);
    let mut order: Vec<(usize, f64)> = pairs.to_vec();
    let mut loss = 0.0;
    for _ in 0..epochs {
        order.shuffle(rng);
        for batch in order.chunks(batch_size) {
            let (l, g, ug) = local_loss_and_grads(&local, &user, batch)?;
            loss += l;
            local.apply_update(&g, lr)?;
            nn::axpy(&mut user, -lr, &ug);
            total.add_scaled(&g, 1.0)?;
        }
    }
    Ok(LocalPass {
        update: total,
        user_embedding: user,
        loss,
    })
}

/// Orders `(logit, item)` by descending score then ascending item.
fn rank_cmp(a: &(f64, usize), b: &(f64, usize)) -> std::cmp::Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

/// The `k` best-scoring items not in `excluded`, best first.
///
/// Ranking uses the logit, which orders items exactly as `r̂` does but
/// stays discriminative where the sigmoid saturates to 1.0 in `f64`.
pub fn recommend_top_k(
    global: &GlobalParams,
    user_embedding: &[f64],
    k: usize,
    excluded: &BTreeSet<usize>,
) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(ModelError::InvalidConfig("k must be >= 1".into()));
    }
    let scorer = ItemScorer::new(global);
    let logits = scorer.logits(user_embedding)?;
    Ok(top_k_from_scores(&logits, k, excluded))
}

pub fn top_k_from_scores(scores: &[f64], k: usize, excluded: &BTreeSet<usize>) -> Vec<usize> {
    let mut cands: Vec<(f64, usize)> = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| !excluded.contains(i))
        .map(|(i, &s)| (s, i))
        .collect();
    if cands.len() < k {
        debug!("only {} candidates for top-{k}", cands.len());
    }
    let k = k.min(cands.len());
    if k == 0 {
        return Vec::new();
    }
    if k < cands.len() {
        cands.select_nth_unstable_by(k - 1, rank_cmp);
        cands.truncate(k);
    }
    cands.sort_by(rank_cmp);
    cands.into_iter().map(|(_, i)| i).collect()
}

/// Scores every item for a user, reusing the item half of the first layer.
///
/// The first layer computes `W [u; v] + b = W_u u + (W_v v + b)`; the
/// bracketed term is computed once per item per snapshot.
pub struct ItemScorer<'a> {
    global: &'a GlobalParams,
    /// `item_pre[j] = W_v v_j + b`, row-major `N x out0`.
    item_pre: Vec<f64>,
    out0: usize,
}

impl<'a> ItemScorer<'a> {
    pub fn new(global: &'a GlobalParams) -> Self {
        let first = &global.ffn.layers[0];
        let d = global.dim();
        let out0 = first.out_dim();
        let n = global.num_items();
        let mut item_pre = vec![0.0; n * out0];
        for j in 0..n {
            let v = global.item_embeddings.row(j);
            for r in 0..out0 {
                let w = &first.weight.row(r)[d..];
                item_pre[j * out0 + r] = nn::dot(w, v) + first.bias[r];
            }
        }
        Self {
            global,
            item_pre,
            out0,
        }
    }

    pub fn logits(&self, user_embedding: &[f64]) -> Result<Vec<f64>> {
        self.global.check_user(user_embedding)?;
        let d = self.global.dim();
        let layers = &self.global.ffn.layers;
        let first = &layers[0];
        let user_pre: Vec<f64> = (0..self.out0)
            .map(|r| nn::dot(&first.weight.row(r)[..d], user_embedding))
            .collect();
        let n = self.global.num_items();
        let mut out = Vec::with_capacity(n);
        let mut x = vec![0.0; self.out0];
        for j in 0..n {
            let pre = &self.item_pre[j * self.out0..(j + 1) * self.out0];
            for r in 0..self.out0 {
                x[r] = first.activation.apply(user_pre[r] + pre[r]);
            }
            let mut h = x.clone();
            for layer in &layers[1..] {
                let mut z = vec![0.0; layer.out_dim()];
                layer.weight.matvec_into(&h, &mut z);
                for (zi, b) in z.iter_mut().zip(&layer.bias) {
                    *zi = layer.activation.apply(*zi + b);
                }
                h = z;
            }
            out.push(nn::dot(&self.global.projection, &h));
        }
        Ok(out)
    }
}
