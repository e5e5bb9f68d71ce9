//! Server-client protocol: sampling, local training, aggregation, update.

use std::collections::BTreeSet;

use log::{debug, info, warn};
use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{
    self, AttackError, AttackMode, CraftSettings, EstimatorSettings, PopularityEstimator,
};
use crate::data::{self, InteractionDataset, PopularityLabels, UserData};
use crate::defense::{Aggregator, DefenseError};
use crate::eval::{self, EvalError, EvalUser, MetricRow, MetricSeries, RankingMetrics};
use crate::model::{self, GlobalParams, GradientUpdate, LocalPass, ModelError, ParamLayout};
use crate::nn;
use crate::seed::{self, stream};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("aggregation failed in round {round}: {source}")]
    Aggregation { round: usize, source: DefenseError },
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid federation setting: {0}")]
    InvalidConfig(String),
    #[error("global parameters became non-finite in round {0}")]
    NonFinite(usize),
}

pub type Result<T> = std::result::Result<T, FederationError>;

/// One simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Client {
    pub data: UserData,
    pub embedding: Vec<f64>,
}

/// What the server receives from one participant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Submission {
    pub client: usize,
    pub update: GradientUpdate,
}

/// `round(fraction * m)` distinct ids in ascending order, at least one.
pub fn sample_clients(m: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(FederationError::InvalidConfig(format!(
            "client fraction {fraction} is outside (0, 1]"
        )));
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let size = ((fraction * m as f64).round() as usize).clamp(1, m);
    let mut rng = seed::rng_for(seed, &[stream::SAMPLING]);
    let mut ids = index::sample(&mut rng, m, size).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Per-round protocol settings.
#[derive(Debug, Clone)]
pub struct RoundConfig {
    pub round: usize,
    pub fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub aggregator: Aggregator,
    pub seed: u64,
    /// Clients added to every round regardless of sampling.
    pub always_include: Vec<usize>,
    pub resample_negatives: Option<ResampleNegatives>,
    pub kl_bins: usize,
    pub record_traffic: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct ResampleNegatives {
    pub q: usize,
    pub num_items: usize,
}

/// The adversary as seen by one round: which clients craft, and how.
#[derive(Debug, Clone, Copy)]
pub struct RoundAdversary<'a> {
    pub malicious: &'a BTreeSet<usize>,
    /// `None` when malicious clients train genuinely (data poisoning).
    pub craft: Option<&'a CraftSettings>,
    pub estimator: Option<&'a PopularityEstimator>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub malicious_participants: Vec<usize>,
    pub aggregate_norm: f64,
    /// Mean local training loss of benign participants.
    pub benign_loss: f64,
    /// KL(benign ‖ malicious) over the round's averaged updates.
    pub kl: Option<f64>,
    /// Joint crafting loss per crafting epoch, one trace per crafted client.
    pub craft_traces: Vec<Vec<f64>>,
    /// Mean `‖crafted - mean genuine‖` over crafted clients.
    pub craft_distance: Option<f64>,
    pub craft_fallbacks: usize,
    /// Server-visible submissions, when recording is enabled.
    pub traffic: Option<Vec<Submission>>,
}

fn local_pass(client: &Client, global: &GlobalParams, cfg: &RoundConfig, id: usize) -> Result<LocalPass> {
    let mut rng = seed::rng_for(cfg.seed, &[stream::SHUFFLE, cfg.round as u64, id as u64]);
    let pairs = match cfg.resample_negatives {
        Some(r) => {
            let mut neg_rng = seed::rng_for(cfg.seed, &[stream::NEGATIVES, cfg.round as u64, id as u64]);
            let exclude = client.data.interacted();
            let negatives =
                data::sample_negatives(&exclude, r.q * client.data.positives.len(), r.num_items, &mut neg_rng);
            UserData {
                negatives,
                ..client.data.clone()
            }
            .training_pairs()
        }
        None => client.data.training_pairs(),
    };
    Ok(model::local_train(
        global,
        &client.embedding,
        &pairs,
        cfg.batch_size,
        cfg.local_epochs,
        cfg.lr,
        &mut rng,
    )?)
}

/// Runs one federated round and returns the new global model.
///
/// Sampled clients train on a private copy of `global`; sampled malicious
/// clients then replace their update with a crafted one when the adversary
/// crafts. Updates are densified over the union of touched rows, aggregated
/// in ascending client order and applied as `θ - lr * agg`. Participants'
/// user embeddings are updated in place.
pub fn run_round(
    global: &GlobalParams,
    clients: &mut [Client],
    cfg: &RoundConfig,
    adversary: Option<RoundAdversary<'_>>,
) -> Result<(GlobalParams, RoundReport)> {
    if !(cfg.lr > 0.0) {
        return Err(FederationError::InvalidConfig("learning rate must be > 0".into()));
    }
    let round_seed = seed::derive_seed(cfg.seed, &[cfg.round as u64]);
    let mut ids: BTreeSet<usize> = sample_clients(clients.len(), cfg.fraction, round_seed)?
        .into_iter()
        .collect();
    ids.extend(cfg.always_include.iter().copied().filter(|&c| c < clients.len()));
    let participants: Vec<usize> = ids.into_iter().collect();

    let passes: Vec<LocalPass> = participants
        .par_iter()
        .map(|&c| local_pass(&clients[c], global, cfg, c))
        .collect::<Result<_>>()?;

    let malicious_set = adversary.map(|a| a.malicious);
    let is_malicious = |c: usize| malicious_set.is_some_and(|m| m.contains(&c));
    let malicious_participants: Vec<usize> =
        participants.iter().copied().filter(|&c| is_malicious(c)).collect();

    let mut updates: Vec<GradientUpdate> = passes.iter().map(|p| p.update.clone()).collect();
    let mut embeddings: Vec<Vec<f64>> = passes.iter().map(|p| p.user_embedding.clone()).collect();
    let mut craft_traces = Vec::new();
    let mut craft_distance = None;
    let mut craft_fallbacks = 0;

    if let Some(RoundAdversary {
        craft: Some(craft),
        estimator,
        ..
    }) = adversary
    {
        let slots: Vec<usize> = (0..participants.len())
            .filter(|&k| is_malicious(participants[k]))
            .collect();
        if !slots.is_empty() {
            let genuine: Vec<&GradientUpdate> = slots.iter().map(|&k| &passes[k].update).collect();
            let gbar = attack::mean_update(&genuine, global)?;
            let crafted: Vec<_> = slots
                .par_iter()
                .map(|&k| {
                    attack::craft_one(
                        global,
                        &clients[participants[k]].embedding,
                        &gbar,
                        estimator,
                        craft,
                        cfg.lr,
                    )
                })
                .collect::<std::result::Result<_, _>>()?;
            let mut distances = Vec::new();
            for (&k, out) in slots.iter().zip(crafted) {
                match out {
                    Some(c) => {
                        distances.push(c.final_loss.dis);
                        craft_traces.push(c.loss_trace);
                        updates[k] = c.update;
                        embeddings[k] = c.user_embedding;
                    }
                    None => {
                        warn!(
                            "round {}: crafting for client {} diverged; uploading its genuine update",
                            cfg.round, participants[k]
                        );
                        craft_fallbacks += 1;
                    }
                }
            }
            if !distances.is_empty() {
                craft_distance = Some(distances.iter().sum::<f64>() / distances.len() as f64);
            }
        }
    }

    let layout = ParamLayout::union_of(&updates, global);
    let flat: Vec<Vec<f64>> = updates
        .iter()
        .map(|u| layout.flatten_update(u))
        .collect::<std::result::Result<_, _>>()?;
    let agg = cfg
        .aggregator
        .aggregate(&flat)
        .map_err(|source| FederationError::Aggregation {
            round: cfg.round,
            source,
        })?;
    let agg_update = layout.unflatten_update(&agg, global)?;
    let mut next = global.clone();
    next.apply_update(&agg_update, cfg.lr)?;
    if !next.is_finite() {
        return Err(FederationError::NonFinite(cfg.round));
    }

    let kl = if adversary.is_some() && !malicious_participants.is_empty() {
        let (mal, ben): (Vec<_>, Vec<_>) = participants
            .iter()
            .zip(&flat)
            .partition(|(c, _)| is_malicious(**c));
        if ben.is_empty() {
            None
        } else {
            let ben: Vec<Vec<f64>> = ben.into_iter().map(|(_, v)| v.clone()).collect();
            let mal: Vec<Vec<f64>> = mal.into_iter().map(|(_, v)| v.clone()).collect();
            Some(eval::grad_kl_divergence(&ben, &mal, cfg.kl_bins)?)
        }
    } else {
        None
    };

    let benign: Vec<f64> = participants
        .iter()
        .zip(&passes)
        .filter(|(c, _)| !is_malicious(**c))
        .map(|(_, p)| p.loss)
        .collect();
    let benign_loss = if benign.is_empty() {
        0.0
    } else {
        benign.iter().sum::<f64>() / benign.len() as f64
    };

    let traffic = cfg.record_traffic.then(|| {
        participants
            .iter()
            .zip(&updates)
            .map(|(&client, u)| Submission {
                client,
                update: u.clone(),
            })
            .collect()
    });

    for (&c, e) in participants.iter().zip(embeddings) {
        clients[c].embedding = e;
    }

    Ok((
        next,
        RoundReport {
            round: cfg.round,
            participants,
            malicious_participants,
            aggregate_norm: nn::l2_norm(&agg),
            benign_loss,
            kl,
            craft_traces,
            craft_distance,
            craft_fallbacks,
            traffic,
        },
    ))
}

/// Protocol and evaluation settings shared by every round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSettings {
    pub client_fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub round_seed: u64,
    pub force_include_malicious: bool,
    pub resample_negatives: bool,
    pub k_exposure: usize,
    pub k_hit: usize,
    pub eval_every: usize,
    pub kl_bins: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self {
            client_fraction: 0.1,
            lr: 0.01,
            batch_size: 64,
            local_epochs: 1,
            round_seed: 0,
            force_include_malicious: false,
            resample_negatives: false,
            k_exposure: 5,
            k_hit: 10,
            eval_every: 1,
            kl_bins: 50,
        }
    }
}

/// Everything the adversary is configured with before the attack starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversarySetup {
    pub mode: AttackMode,
    pub malicious: BTreeSet<usize>,
    /// First epoch (1-based) in which malicious clients attack.
    pub start_epoch: usize,
    pub craft: CraftSettings,
    pub estimator: EstimatorSettings,
    /// Filler items per fake profile for the data-poisoning baselines.
    pub fillers: usize,
    pub poison_seed: u64,
}

/// Adversary setup plus what it learns once the attack starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdversaryState {
    pub setup: AdversarySetup,
    pub estimator: Option<PopularityEstimator>,
    pub active: bool,
}

/// Picks `round(fraction * m)` malicious client ids.
pub fn choose_malicious(m: usize, fraction: f64, seed: u64) -> Result<BTreeSet<usize>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(FederationError::InvalidConfig(format!(
            "malicious fraction {fraction} is outside [0, 1)"
        )));
    }
    let size = ((fraction * m as f64).round() as usize).min(m);
    let mut rng = seed::rng_for(seed, &[stream::MALICIOUS]);
    Ok(index::sample(&mut rng, m, size).into_iter().collect())
}

/// A complete federated training run that can be stepped, cloned and
/// serialised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub global: GlobalParams,
    pub clients: Vec<Client>,
    pub settings: TrainSettings,
    pub aggregator: Aggregator,
    pub labels: PopularityLabels,
    pub target: usize,
    pub q: usize,
    pub adversary: Option<AdversaryState>,
    /// Completed rounds; the next round is `round + 1`.
    pub round: usize,
    pub metrics: MetricSeries,
}

impl Simulation {
    /// Pairs every dataset user with an initial embedding row.
    pub fn new(
        global: GlobalParams,
        dataset: &InteractionDataset,
        user_embeddings: Vec<Vec<f64>>,
        settings: TrainSettings,
        aggregator: Aggregator,
        labels: PopularityLabels,
        target: usize,
    ) -> Result<Self> {
        if user_embeddings.len() != dataset.users.len() {
            return Err(FederationError::InvalidConfig(format!(
                "{} embeddings for {} users",
                user_embeddings.len(),
                dataset.users.len()
            )));
        }
        if dataset.num_items != global.num_items() || labels.classes.len() != global.num_items() {
            return Err(FederationError::InvalidConfig("item counts disagree".into()));
        }
        if settings.k_exposure == 0 || settings.k_hit == 0 || settings.eval_every == 0 {
            return Err(FederationError::InvalidConfig("K and eval_every must be >= 1".into()));
        }
        let clients = dataset
            .users
            .iter()
            .cloned()
            .zip(user_embeddings)
            .map(|(data, embedding)| Client { data, embedding })
            .collect();
        Ok(Self {
            global,
            clients,
            settings,
            aggregator,
            labels,
            target,
            q: dataset.q,
            adversary: None,
            round: 0,
            metrics: MetricSeries::default(),
        })
    }

    /// Installs or replaces the adversary. Its malicious set also defines
    /// who is excluded from evaluation.
    pub fn set_adversary(&mut self, setup: AdversarySetup) -> Result<()> {
        if setup.malicious.iter().any(|&c| c >= self.clients.len()) {
            return Err(FederationError::InvalidConfig("malicious id out of range".into()));
        }
        setup.craft.validate()?;
        self.adversary = Some(AdversaryState {
            setup,
            estimator: None,
            active: false,
        });
        Ok(())
    }

    fn is_malicious(&self, c: usize) -> bool {
        self.adversary
            .as_ref()
            .is_some_and(|a| a.setup.malicious.contains(&c))
    }

    pub fn benign_users(&self) -> Vec<EvalUser<'_>> {
        self.clients
            .iter()
            .enumerate()
            .filter(|(c, _)| !self.is_malicious(*c))
            .map(|(_, cl)| EvalUser {
                data: &cl.data,
                embedding: &cl.embedding,
            })
            .collect()
    }

    /// ER@K of the target and HR@K over benign users.
    pub fn evaluate(&self) -> Result<RankingMetrics> {
        Ok(eval::ranking_metrics(
            &self.global,
            &self.benign_users(),
            self.settings.k_exposure,
            self.settings.k_hit,
            self.target,
        )?)
    }

    /// Starts the attack: trains the estimator or swaps in fake profiles.
    fn activate(&mut self, epoch: usize) -> Result<Option<f64>> {
        let Some(state) = self.adversary.as_mut() else {
            return Ok(None);
        };
        state.active = true;
        let setup = &state.setup;
        let mut f1 = None;
        match setup.mode {
            AttackMode::Pipattack => {
                let est = attack::train_popularity_estimator(
                    &self.global.item_embeddings,
                    &self.labels,
                    self.target,
                    &setup.estimator,
                )?;
                let items: Vec<usize> = (0..self.global.num_items()).filter(|&i| i != self.target).collect();
                let score = eval::classifier_f1(&est, &self.global.item_embeddings, &self.labels, &items)?;
                info!("epoch {epoch}: popularity estimator trained, training macro F1 {score:.3}");
                f1 = Some(score);
                state.estimator = Some(est);
            }
            AttackMode::Pa | AttackMode::Ra => {
                let ids: Vec<usize> = setup.malicious.iter().copied().collect();
                let fake = attack::data_poison_profiles(
                    setup.mode,
                    &ids,
                    &self.labels,
                    self.target,
                    setup.fillers,
                    self.q,
                    setup.poison_seed,
                )?;
                for (c, mut d) in ids.into_iter().zip(fake) {
                    d.user = self.clients[c].data.user;
                    self.clients[c].data = d;
                }
                info!("epoch {epoch}: {} fake profiles installed", setup.malicious.len());
            }
            AttackMode::Eb | AttackMode::None => {}
        }
        Ok(f1)
    }

    fn craft_settings(state: &AdversaryState) -> Option<CraftSettings> {
        match state.setup.mode {
            AttackMode::Pipattack => Some(state.setup.craft.clone()),
            AttackMode::Eb => Some(CraftSettings {
                alpha: 0.0,
                gamma: 0.0,
                ..state.setup.craft.clone()
            }),
            _ => None,
        }
    }

    /// Runs the next round, evaluates when due and returns the round report.
    pub fn step(&mut self, record_traffic: bool) -> Result<RoundReport> {
        let epoch = self.round + 1;
        let mut f1 = None;
        let starts = self
            .adversary
            .as_ref()
            .is_some_and(|a| !a.active && epoch >= a.setup.start_epoch && a.setup.mode != AttackMode::None);
        if starts {
            f1 = self.activate(epoch)?;
        }

        let active = self.adversary.as_ref().filter(|a| a.active);
        let craft = active.and_then(Self::craft_settings);
        let always_include = match active {
            Some(a) if self.settings.force_include_malicious => a.setup.malicious.iter().copied().collect(),
            _ => Vec::new(),
        };
        let cfg = RoundConfig {
            round: epoch,
            fraction: self.settings.client_fraction,
            lr: self.settings.lr,
            batch_size: self.settings.batch_size,
            local_epochs: self.settings.local_epochs,
            aggregator: self.aggregator.clone(),
            seed: self.settings.round_seed,
            always_include,
            resample_negatives: self.settings.resample_negatives.then_some(ResampleNegatives {
                q: self.q,
                num_items: self.global.num_items(),
            }),
            kl_bins: self.settings.kl_bins,
            record_traffic,
        };
        let adversary = active.map(|a| RoundAdversary {
            malicious: &a.setup.malicious,
            craft: craft.as_ref(),
            estimator: a.estimator.as_ref(),
        });
        let (next, report) = run_round(&self.global, &mut self.clients, &cfg, adversary)?;
        self.global = next;
        self.round = epoch;
        debug!(
            "epoch {epoch}: {} participants ({} malicious), |agg| = {:.4}",
            report.participants.len(),
            report.malicious_participants.len(),
            report.aggregate_norm
        );

        if epoch % self.settings.eval_every == 0 {
            let m = self.evaluate()?;
            self.metrics.push(MetricRow {
                epoch,
                er_at_k: m.exposure_rate,
                hr_at_k: m.hit_ratio,
                kl: report.kl,
                f1,
                aggregate_norm: Some(report.aggregate_norm),
            });
        }
        Ok(report)
    }

    /// Steps until `total` rounds have completed.
    pub fn run_until(&mut self, total: usize) -> Result<Vec<RoundReport>> {
        let mut reports = Vec::new();
        while self.round < total {
            reports.push(self.step(false)?);
        }
        Ok(reports)
    }
}
