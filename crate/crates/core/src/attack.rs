//! Item-promotion adversary and its baselines.
//!
//! The adversary controls a set of malicious clients. When one of them is
//! sampled it either uploads a crafted update (PipAttack and explicit
//! boosting) or trains genuinely on a fake profile (popular and random
//! attacks). Crafting minimises
//!
//! ```text
//! L = L_exp + alpha * L_pop + gamma * L_dis
//! ```
//!
//! on a private copy of the shared parameters, and uploads the parameter
//! displacement divided by the server learning rate.

use std::collections::BTreeSet;

use log::{debug, warn};
use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, PopularityLabels, UserData};
use crate::model::{GlobalParams, GradientUpdate, ModelError, ParamLayout};
use crate::nn::{self, Activation, Adam, MlpGrads, MlpParams, NnError, Tensor2D};
use crate::seed::{self, stream};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("estimator training needs all {expected} popularity classes, found {found}")]
    MissingClasses { expected: usize, found: usize },
    #[error("invalid adversary configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    None,
    Pipattack,
    /// Explicit boosting: crafting with `alpha = gamma = 0`.
    Eb,
    /// Fake profiles with popular fillers.
    Pa,
    /// Fake profiles with random fillers.
    Ra,
}

impl AttackMode {
    /// Whether malicious clients upload crafted rather than genuine updates.
    pub fn crafts(self) -> bool {
        matches!(self, Self::Pipattack | Self::Eb)
    }

    pub fn poisons_data(self) -> bool {
        matches!(self, Self::Pa | Self::Ra)
    }
}

impl std::fmt::Display for AttackMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Pipattack => "pipattack",
            Self::Eb => "eb",
            Self::Pa => "pa",
            Self::Ra => "ra",
        })
    }
}

/// Coefficients and optimiser settings for crafting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CraftSettings {
    pub target: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub epochs: usize,
    pub lr: f64,
    /// Order of the distance norm; `>= 1`.
    pub p_norm: f64,
}

impl CraftSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.gamma >= 0.0) {
            return Err(AttackError::InvalidConfig("alpha and gamma must be >= 0".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(AttackError::InvalidConfig("craft lr must be > 0".into()));
        }
        if !(self.p_norm >= 1.0) {
            return Err(AttackError::InvalidConfig("p_norm must be >= 1".into()));
        }
        Ok(())
    }
}

/// Training settings for the popularity estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        Self {
            hidden: vec![32, 16, 8],
            epochs: 400,
            lr: 0.01,
            seed: 0,
        }
    }
}

/// Frozen classifier from item embedding to popularity-class probabilities.
///
/// Inputs are standardised with the per-dimension mean and spread of the
/// training embeddings. There is no way to modify a trained estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityEstimator {
    net: MlpParams,
    shift: Vec<f64>,
    scale: Vec<f64>,
    num_classes: usize,
}

impl PopularityEstimator {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn top_class(&self) -> usize {
        self.num_classes - 1
    }

    fn normalise(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.shift.len() {
            return Err(AttackError::Shape(format!(
                "embedding length {} != estimator input {}",
                v.len(),
                self.shift.len()
            )));
        }
        Ok(v.iter()
            .zip(&self.shift)
            .zip(&self.scale)
            .map(|((x, m), s)| (x - m) / s)
            .collect())
    }

    fn logits(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(self.net.predict(&self.normalise(v)?)?)
    }

    pub fn probabilities(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(nn::softmax(&self.logits(v)?))
    }

    /// Most probable class, lowest index on ties.
    pub fn predict_class(&self, v: &[f64]) -> Result<usize> {
        let p = self.logits(v)?;
        let mut best = 0;
        for (c, &x) in p.iter().enumerate() {
            if x > p[best] {
                best = c;
            }
        }
        Ok(best)
    }

    /// `-log f(v)[class]` and its gradient with respect to `v`.
    pub fn nll_and_grad(&self, v: &[f64], class: usize) -> Result<(f64, Vec<f64>)> {
        if class >= self.num_classes {
            return Err(AttackError::Shape(format!("class {class} >= {}", self.num_classes)));
        }
        let (logits, cache) = self.net.forward(&self.normalise(v)?)?;
        let (loss, dlogits) = nn::softmax_nll(&logits, class);
        let mut scratch = MlpGrads::zeros_like(&self.net);
        let dx = self.net.backward_accumulate(&cache, &dlogits, 0.0, &mut scratch)?;
        Ok((loss, dx.iter().zip(&self.scale).map(|(g, s)| g / s).collect()))
    }
}

/// Trains the estimator on `(embedding row, class)` for every item in
/// `items`, using full-batch Adam on the mean cross-entropy.
pub fn train_estimator_on(
    embeddings: &Tensor2D,
    labels: &PopularityLabels,
    items: &[usize],
    settings: &EstimatorSettings,
) -> Result<PopularityEstimator> {
    let c = labels.num_classes;
    let present: BTreeSet<usize> = items.iter().map(|&i| labels.classes[i]).collect();
    if present.len() < c {
        return Err(AttackError::MissingClasses {
            expected: c,
            found: present.len(),
        });
    }
    if settings.hidden.contains(&0) || !(settings.lr > 0.0) {
        return Err(AttackError::InvalidConfig("bad estimator settings".into()));
    }
    let d = embeddings.cols();
    let n = items.len() as f64;
    let mut shift = vec![0.0; d];
    for &i in items {
        nn::axpy(&mut shift, 1.0 / n, embeddings.row(i));
    }
    let mut scale = vec![0.0; d];
    for &i in items {
        for (k, x) in embeddings.row(i).iter().enumerate() {
            scale[k] += (x - shift[k]).powi(2) / n;
        }
    }
    for s in &mut scale {
        *s = s.sqrt().max(1e-8);
    }

    let mut rng = seed::rng_for(settings.seed, &[stream::ESTIMATOR]);
    let dims: Vec<usize> = std::iter::once(d)
        .chain(settings.hidden.iter().copied())
        .chain(std::iter::once(c))
        .collect();
    let net = MlpParams::fan_in_gaussian(&dims, Activation::Relu, Activation::Linear, 2.0, &mut rng)?;
    let mut est = PopularityEstimator {
        net,
        shift,
        scale,
        num_classes: c,
    };
    let inputs: Vec<(Vec<f64>, usize)> = items
        .iter()
        .map(|&i| Ok((est.normalise(embeddings.row(i))?, labels.classes[i])))
        .collect::<Result<_>>()?;

    let mut flat = est.net.to_flat();
    let mut adam = Adam::new(flat.len(), settings.lr);
    for epoch in 0..settings.epochs {
        let mut grads = MlpGrads::zeros_like(&est.net);
        let mut loss = 0.0;
        for (x, y) in &inputs {
            let (logits, cache) = est.net.forward(x)?;
            let (l, dl) = nn::softmax_nll(&logits, *y);
            loss += l / n;
            est.net.backward_accumulate(&cache, &dl, 1.0 / n, &mut grads)?;
        }
        if epoch % 100 == 0 {
            debug!("estimator epoch {epoch}: loss {loss:.5}");
        }
        adam.step(&mut flat, &grads.to_flat());
        est.net.read_flat(&flat)?;
    }
    Ok(est)
}

/// Trains the estimator on every item except `target`.
pub fn train_popularity_estimator(
    embeddings: &Tensor2D,
    labels: &PopularityLabels,
    target: usize,
    settings: &EstimatorSettings,
) -> Result<PopularityEstimator> {
    let items: Vec<usize> = (0..embeddings.rows()).filter(|&i| i != target).collect();
    train_estimator_on(embeddings, labels, &items, settings)
}

/// `-Σ log r̂(u, target)` over `users`, with gradients of the shared
/// parameters and of each user embedding.
pub fn loss_exp(
    global: &GlobalParams,
    users: &[&[f64]],
    target: usize,
) -> Result<(f64, GradientUpdate, Vec<Vec<f64>>)> {
    let mut grads = GradientUpdate::zeros_like(global);
    let mut user_grads = Vec::with_capacity(users.len());
    let mut loss = 0.0;
    for u in users {
        let mut ug = vec![0.0; global.dim()];
        loss += global.accumulate_pair(u, target, |z| nn::bce_with_logit(z, 1.0), &mut grads, &mut ug)?;
        user_grads.push(ug);
    }
    Ok((loss, grads, user_grads))
}

/// `-log f_est(v*)[c_top]` and its gradient with respect to `v*`.
pub fn loss_pop(estimator: &PopularityEstimator, target_embedding: &[f64]) -> Result<(f64, Vec<f64>)> {
    estimator.nll_and_grad(target_embedding, estimator.top_class())
}

/// `‖x‖_p` and its gradient; the gradient is zero at the origin.
pub fn p_norm_and_grad(x: &[f64], p: f64) -> (f64, Vec<f64>) {
    if p == 1.0 {
        let norm = x.iter().map(|v| v.abs()).sum();
        return (norm, x.iter().map(|v| v.signum() * f64::from(*v != 0.0)).collect());
    }
    let norm = if p == 2.0 {
        nn::l2_norm(x)
    } else {
        x.iter().map(|v| v.abs().powf(p)).sum::<f64>().powf(1.0 / p)
    };
    if norm < 1e-12 {
        return (norm, vec![0.0; x.len()]);
    }
    let grad = if p == 2.0 {
        x.iter().map(|v| v / norm).collect()
    } else {
        x.iter()
            .map(|v| v.signum() * (v.abs() / norm).powf(p - 1.0))
            .collect()
    };
    (norm, grad)
}

fn mean_vector(vectors: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| AttackError::Shape("no genuine updates".into()))?;
    let mut out = vec![0.0; first.len()];
    for v in vectors {
        if v.len() != out.len() {
            return Err(AttackError::Shape("update lengths differ".into()));
        }
        nn::axpy(&mut out, 1.0 / vectors.len() as f64, v);
    }
    Ok(out)
}

/// `Σ_i ‖crafted_i - mean(genuine)‖_p` over flattened updates, with the
/// gradient with respect to each crafted vector.
pub fn loss_dis(crafted: &[Vec<f64>], genuine: &[Vec<f64>], p: f64) -> Result<(f64, Vec<Vec<f64>>)> {
    let centre = mean_vector(genuine)?;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(crafted.len());
    for c in crafted {
        if c.len() != centre.len() {
            return Err(AttackError::Shape(format!(
                "crafted length {} != genuine length {}",
                c.len(),
                centre.len()
            )));
        }
        let diff: Vec<f64> = c.iter().zip(&centre).map(|(a, b)| a - b).collect();
        let (norm, g) = p_norm_and_grad(&diff, p);
        total += norm;
        grads.push(g);
    }
    Ok((total, grads))
}

/// Per-term values of the joint objective at one point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JointLoss {
    pub exp: f64,
    pub pop: f64,
    pub dis: f64,
    pub total: f64,
}

/// Gradients of the joint objective for one malicious client.
#[derive(Debug, Clone)]
pub struct JointGrads {
    /// Over `layout` coordinates of the adversarial parameter copy.
    pub params: Vec<f64>,
    pub user: Vec<f64>,
}

/// The single-client objective
/// `-log r̂(u, v*) + alpha * L_pop(v*) + gamma * ‖(θ_down - θ_adv)/lr_server - ḡ‖_p`
/// together with the per-term gradients.
pub struct JointObjective<'a> {
    pub settings: &'a CraftSettings,
    pub estimator: Option<&'a PopularityEstimator>,
    pub layout: &'a ParamLayout,
    /// `θ_down` flattened over `layout`.
    pub downloaded: &'a [f64],
    /// Mean genuine update flattened over `layout`.
    pub genuine_mean: &'a [f64],
    pub server_lr: f64,
}

impl JointObjective<'_> {
    /// The displacement-encoded update for the parameters `adv`.
    pub fn encode(&self, adv: &[f64]) -> Vec<f64> {
        self.downloaded
            .iter()
            .zip(adv)
            .map(|(d, a)| (d - a) / self.server_lr)
            .collect()
    }

    fn distance_residual(&self, adv: &[f64]) -> Vec<f64> {
        self.encode(adv)
            .iter()
            .zip(self.genuine_mean)
            .map(|(c, g)| c - g)
            .collect()
    }

    /// Smooth part `L_exp + alpha * L_pop` with gradients, evaluated on the
    /// parameter copy `adv`.
    fn smooth(&self, adv: &GlobalParams, user: &[f64]) -> Result<(f64, f64, GradientUpdate, Vec<f64>)> {
        let target = self.settings.target;
        let (exp, mut grads, ug) = loss_exp(adv, &[user], target)?;
        let mut pop = 0.0;
        if self.settings.alpha > 0.0 {
            let est = self
                .estimator
                .ok_or_else(|| AttackError::InvalidConfig("alpha > 0 needs an estimator".into()))?;
            let (l, gv) = loss_pop(est, adv.item_embeddings.row(target))?;
            pop = l;
            let row = grads.item_rows.entry(target).or_insert_with(|| vec![0.0; adv.dim()]);
            nn::axpy(row, self.settings.alpha, &gv);
        }
        Ok((exp, pop, grads, ug.into_iter().next().unwrap_or_default()))
    }

    /// Loss and full gradient at `(adv, user)`. `adv` must carry the
    /// parameters in `flat` over `layout`.
    pub fn loss_and_grads(&self, adv: &GlobalParams, flat: &[f64], user: &[f64]) -> Result<(JointLoss, JointGrads)> {
        let (exp, pop, grads, ug) = self.smooth(adv, user)?;
        let mut params = self.layout.flatten_update(&grads)?;
        let (dis, gd) = p_norm_and_grad(&self.distance_residual(flat), self.settings.p_norm);
        // d residual / d adv = -1 / server_lr
        nn::axpy(&mut params, -self.settings.gamma / self.server_lr, &gd);
        let total = exp + self.settings.alpha * pop + self.settings.gamma * dis;
        Ok((JointLoss { exp, pop, dis, total }, JointGrads { params, user: ug }))
    }

    /// Loss at `(adv, user)` without gradients.
    pub fn loss(&self, adv: &GlobalParams, flat: &[f64], user: &[f64]) -> Result<JointLoss> {
        let target = self.settings.target;
        let exp = nn::softplus(-adv.logit(user, target)?);
        let pop = match (self.settings.alpha > 0.0, self.estimator) {
            (true, Some(est)) => loss_pop(est, adv.item_embeddings.row(target))?.0,
            (true, None) => return Err(AttackError::InvalidConfig("alpha > 0 needs an estimator".into())),
            (false, _) => 0.0,
        };
        let dis = p_norm_and_grad(&self.distance_residual(flat), self.settings.p_norm).0;
        Ok(JointLoss {
            exp,
            pop,
            dis,
            total: exp + self.settings.alpha * pop + self.settings.gamma * dis,
        })
    }

    /// Proximal step on the distance term: moves the residual
    /// `(θ_down - adv)/lr_server - ḡ` toward zero by the exact minimiser of
    /// `gamma ‖r‖_p + ‖adv - y‖^2 / (2 lr)`. Falls back to a subgradient step
    /// for orders other than 1 and 2.
    fn distance_step(&self, flat: &mut [f64]) {
        let gamma = self.settings.gamma;
        if gamma == 0.0 {
            return;
        }
        let eta = self.server_lr;
        let lr = self.settings.lr;
        let mut r = self.distance_residual(flat);
        let t = gamma * lr / (eta * eta);
        let p = self.settings.p_norm;
        if p == 2.0 {
            let norm = nn::l2_norm(&r);
            let shrink = if norm > t { 1.0 - t / norm } else { 0.0 };
            r.iter_mut().for_each(|x| *x *= shrink);
        } else if p == 1.0 {
            r.iter_mut().for_each(|x| *x = x.signum() * (x.abs() - t).max(0.0));
        } else {
            let (_, g) = p_norm_and_grad(&r, p);
            nn::axpy(&mut r, -t, &g);
        }
        for ((a, d), (ri, g)) in flat
            .iter_mut()
            .zip(self.downloaded)
            .zip(r.iter().zip(self.genuine_mean))
        {
            *a = d - eta * (ri + g);
        }
    }
}

/// A malicious client's crafted upload.
#[derive(Debug, Clone)]
pub struct CraftedUpdate {
    pub update: GradientUpdate,
    pub user_embedding: Vec<f64>,
    /// Joint loss before each crafting epoch and after the last one.
    pub loss_trace: Vec<f64>,
    /// The last evaluated loss terms.
    pub final_loss: JointLoss,
}

/// Crafts one client's update starting from the downloaded model.
///
/// Each epoch takes a gradient step on `L_exp + alpha * L_pop` for the shared
/// copy and the user embedding, then a proximal step on `gamma * L_dis`. The
/// update covers the rows of `genuine_mean` plus the target row. Returns
/// `None` when the loss stops being finite.
pub fn craft_one(
    global: &GlobalParams,
    user_embedding: &[f64],
    genuine_mean: &GradientUpdate,
    estimator: Option<&PopularityEstimator>,
    settings: &CraftSettings,
    server_lr: f64,
) -> Result<Option<CraftedUpdate>> {
    settings.validate()?;
    if !(server_lr > 0.0) {
        return Err(AttackError::InvalidConfig("server lr must be > 0".into()));
    }
    let rows = genuine_mean
        .item_rows
        .keys()
        .copied()
        .chain(std::iter::once(settings.target));
    let layout = ParamLayout::new(rows, global);
    let downloaded = layout.flatten_params(global);
    let gbar = layout.flatten_update(genuine_mean)?;
    let objective = JointObjective {
        settings,
        estimator,
        layout: &layout,
        downloaded: &downloaded,
        genuine_mean: &gbar,
        server_lr,
    };

    let mut adv = global.clone();
    let mut flat = downloaded.clone();
    let mut user = user_embedding.to_vec();
    let mut trace = Vec::with_capacity(settings.epochs + 1);
    for _ in 0..settings.epochs {
        let (exp, pop, smooth, ug) = objective.smooth(&adv, &user)?;
        let dis = p_norm_and_grad(&objective.distance_residual(&flat), settings.p_norm).0;
        let total = exp + settings.alpha * pop + settings.gamma * dis;
        if !total.is_finite() {
            return Ok(None);
        }
        trace.push(total);
        let smooth_flat = layout.flatten_update(&smooth)?;
        nn::axpy(&mut flat, -settings.lr, &smooth_flat);
        objective.distance_step(&mut flat);
        nn::axpy(&mut user, -settings.lr, &ug);
        layout.write_params(&flat, &mut adv)?;
    }
    let final_loss = objective.loss(&adv, &flat, &user)?;
    if !final_loss.total.is_finite() || !flat.iter().all(|v| v.is_finite()) {
        return Ok(None);
    }
    trace.push(final_loss.total);
    let update = layout.unflatten_update(&objective.encode(&flat), global)?;
    Ok(Some(CraftedUpdate {
        update,
        user_embedding: user,
        loss_trace: trace,
        final_loss,
    }))
}

/// Mean of the given updates; rows absent from an update count as zero.
pub fn mean_update(updates: &[&GradientUpdate], global: &GlobalParams) -> Result<GradientUpdate> {
    let mut out = GradientUpdate::zeros_like(global);
    if updates.is_empty() {
        return Ok(out);
    }
    for u in updates {
        out.add_scaled(u, 1.0 / updates.len() as f64)?;
    }
    Ok(out)
}

/// Builds fake profiles for the data-poisoning baselines.
///
/// Each profile is the target plus `fillers` items, drawn from the
/// high-popularity class (`Pa`) or uniformly (`Ra`), never the target
/// itself, with `q` negatives per positive. Fillers are drawn with
/// replacement when there are not enough candidates.
pub fn data_poison_profiles(
    mode: AttackMode,
    malicious: &[usize],
    labels: &PopularityLabels,
    target: usize,
    fillers: usize,
    q: usize,
    seed: u64,
) -> Result<Vec<UserData>> {
    let num_items = labels.classes.len();
    if target >= num_items {
        return Err(AttackError::InvalidConfig(format!("target {target} out of range")));
    }
    let candidates: Vec<usize> = match mode {
        AttackMode::Pa => labels
            .items_in_class(labels.top_class())
            .into_iter()
            .filter(|&i| i != target)
            .collect(),
        AttackMode::Ra => (0..num_items).filter(|&i| i != target).collect(),
        other => {
            return Err(AttackError::InvalidConfig(format!(
                "mode {other} does not build fake profiles"
            )))
        }
    };
    if fillers > 0 && candidates.is_empty() {
        return Err(AttackError::InvalidConfig("no filler candidates".into()));
    }
    if fillers > candidates.len() {
        warn!(
            "{fillers} fillers requested but only {} candidates; sampling with replacement",
            candidates.len()
        );
    }
    let mut out = Vec::with_capacity(malicious.len());
    for &client in malicious {
        let mut rng = seed::rng_for(seed, &[stream::POISON, client as u64]);
        let mut positives = vec![target];
        if fillers <= candidates.len() {
            positives.extend(index::sample(&mut rng, candidates.len(), fillers).into_iter().map(|k| candidates[k]));
        } else {
            positives.extend((0..fillers).map(|_| candidates[rng.random_range(0..candidates.len())]));
        }
        let exclude: BTreeSet<usize> = positives.iter().copied().collect();
        let negatives = data::sample_negatives(&exclude, q * positives.len(), num_items, &mut rng);
        out.push(UserData {
            user: client,
            positives,
            negatives,
            holdout: None,
        });
    }
    Ok(out)
}
