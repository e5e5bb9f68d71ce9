//! Declarative experiment configuration, checkpoints and the end-to-end runner.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackMode, CraftSettings, EstimatorSettings};
use crate::data::{self, InteractionDataset, PopularityLabels, RatingTable, SyntheticSpec};
use crate::defense::{AggregationRule, Aggregator};
use crate::eval::{self, MetricSeries};
use crate::federation::{self, AdversarySetup, FederationError, Simulation, TrainSettings};
use crate::model::{FfnInit, GlobalParams, ModelShape};
use crate::nn::Tensor2D;
use crate::seed;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] data::DataError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl ExperimentError {
    /// Whether the failure is a configuration problem rather than a runtime one.
    pub fn is_config(&self) -> bool {
        matches!(self, Self::Config(_))
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Ratings file; when unset the `synthetic` generator is used.
    pub path: Option<PathBuf>,
    pub separator: String,
    pub synthetic: SyntheticSpec,
    pub q: usize,
    pub popularity_cutoffs: [f64; 2],
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            separator: "::".into(),
            synthetic: SyntheticSpec::default(),
            q: 4,
            popularity_cutoffs: data::DEFAULT_POPULARITY_CUTOFFS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitScheme {
    Gaussian,
    FanIn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub dim: usize,
    pub towers: Vec<usize>,
    /// Standard deviation of item and user embeddings.
    pub embedding_std: f64,
    pub init: InitScheme,
    /// Weight standard deviation for `init = "gaussian"`.
    pub init_std: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            towers: vec![64, 32, 16],
            embedding_std: 0.01,
            init: InitScheme::FanIn,
            init_std: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub rounds: usize,
    pub client_fraction: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub resample_negatives: bool,
    pub force_include_malicious: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            client_fraction: 0.1,
            lr: 0.01,
            batch_size: 64,
            local_epochs: 1,
            resample_negatives: false,
            force_include_malicious: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k_exposure: usize,
    pub k_hit: usize,
    pub every: usize,
    pub kl_bins: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k_exposure: 5,
            k_hit: 10,
            every: 1,
            kl_bins: 50,
        }
    }
}

/// Which item the adversary promotes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", untagged)]
pub enum TargetChoice {
    Item(usize),
    Named(TargetRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    LeastPopular,
}

/// Which dataset family the default `alpha` follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlphaProfile {
    /// 60 at a malicious fraction below 15%, else 20.
    Movielens,
    /// 10 at every malicious fraction.
    Amazon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub malicious_fraction: f64,
    pub target: TargetChoice,
    pub start_epoch: usize,
    pub alpha: Option<f64>,
    pub alpha_profile: AlphaProfile,
    pub gamma: f64,
    pub craft_epochs: usize,
    pub craft_lr: f64,
    pub p_norm: f64,
    /// Filler items per fake profile; defaults to the mean profile length.
    pub fillers: Option<usize>,
    pub estimator_epochs: usize,
    pub estimator_lr: f64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            mode: AttackMode::None,
            malicious_fraction: 0.1,
            target: TargetChoice::Named(TargetRule::LeastPopular),
            start_epoch: 1,
            alpha: None,
            alpha_profile: AlphaProfile::Movielens,
            gamma: 0.0005,
            craft_epochs: 30,
            craft_lr: 0.01,
            p_norm: 2.0,
            fillers: None,
            estimator_epochs: 400,
            estimator_lr: 0.01,
        }
    }
}

impl AttackConfig {
    pub fn resolved_alpha(&self) -> f64 {
        self.alpha.unwrap_or(match self.alpha_profile {
            AlphaProfile::Amazon => 10.0,
            AlphaProfile::Movielens if self.malicious_fraction < 0.15 => 60.0,
            AlphaProfile::Movielens => 20.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub rule: AggregationRule,
    /// Trimmed-mean `beta`; defaults to `round(malicious_fraction * n)`.
    pub trim: Option<usize>,
    /// Bulyan `f`; defaults to `round(malicious_fraction * n)`.
    pub byzantine: Option<usize>,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            rule: AggregationRule::Mean,
            trim: None,
            byzantine: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Epochs after which item embeddings are exported.
    pub export_embeddings_at: Vec<usize>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            export_embeddings_at: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub eval: EvalConfig,
    pub attack: AttackConfig,
    pub defense: DefenseConfig,
    pub output: OutputConfig,
}

fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies a `section.key=value` override to a raw config table. Values are
/// parsed as TOML and fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::Config(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(ExperimentError::Config(format!("bad override key `{path}`")));
    }
    let mut node = table;
    for k in &keys[..keys.len() - 1] {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::Config(format!("`{k}` in `{path}` is not a section")))?;
    }
    node.insert(keys[keys.len() - 1].to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides (later wins) and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(io_err(p))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(ExperimentError::Config(format!("{field}: {why}")));
        if self.data.q == 0 {
            return bad("data.q", "must be >= 1");
        }
        if self.model.dim == 0 || self.model.towers.is_empty() || self.model.towers.contains(&0) {
            return bad("model", "dim and towers must be positive");
        }
        if !(self.model.embedding_std > 0.0 && self.model.init_std > 0.0) {
            return bad("model", "standard deviations must be > 0");
        }
        let t = &self.training;
        if !(t.client_fraction > 0.0 && t.client_fraction <= 1.0) {
            return bad("training.client_fraction", "must be in (0, 1]");
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad("training.lr", "must be > 0");
        }
        if t.batch_size == 0 || t.local_epochs == 0 {
            return bad("training", "batch_size and local_epochs must be >= 1");
        }
        let e = &self.eval;
        if e.k_exposure == 0 || e.k_hit == 0 || e.every == 0 || e.kl_bins == 0 {
            return bad("eval", "K values, every and kl_bins must be >= 1");
        }
        let a = &self.attack;
        if !(0.0..1.0).contains(&a.malicious_fraction) {
            return bad("attack.malicious_fraction", "must be in [0, 1)");
        }
        if a.start_epoch == 0 {
            return bad("attack.start_epoch", "epochs are 1-based");
        }
        if a.alpha.is_some_and(|x| !(x >= 0.0)) || !(a.gamma >= 0.0) {
            return bad("attack", "alpha and gamma must be >= 0");
        }
        if !(a.craft_lr > 0.0) || !(a.p_norm >= 1.0) || !(a.estimator_lr > 0.0) {
            return bad("attack", "craft_lr and estimator_lr must be > 0, p_norm >= 1");
        }
        let [lo, hi] = self.data.popularity_cutoffs;
        if !(lo > 0.0 && lo < hi && hi < 1.0) {
            return bad("data.popularity_cutoffs", "need 0 < a < b < 1");
        }
        Ok(())
    }

    /// The configuration with every derived default written out.
    pub fn resolved(&self, mean_profile_len: f64) -> Self {
        let mut out = self.clone();
        out.attack.alpha = Some(self.attack.resolved_alpha());
        out.attack.fillers = Some(self.attack.fillers.unwrap_or(mean_profile_len.round() as usize));
        out
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn aggregator(&self) -> Aggregator {
        Aggregator {
            rule: self.defense.rule,
            trim: self.defense.trim,
            byzantine: self.defense.byzantine,
            assumed_fraction: self.attack.malicious_fraction,
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            client_fraction: self.training.client_fraction,
            lr: self.training.lr,
            batch_size: self.training.batch_size,
            local_epochs: self.training.local_epochs,
            round_seed: self.training.seed,
            force_include_malicious: self.training.force_include_malicious,
            resample_negatives: self.training.resample_negatives,
            k_exposure: self.eval.k_exposure,
            k_hit: self.eval.k_hit,
            eval_every: self.eval.every,
            kl_bins: self.eval.kl_bins,
        }
    }
}

/// Data, labels and the initial simulation for a configuration.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub table: RatingTable,
    pub dataset: InteractionDataset,
    pub labels: PopularityLabels,
    pub target: usize,
    pub simulation: Simulation,
}

pub fn load_table(cfg: &DataConfig) -> Result<RatingTable> {
    match &cfg.path {
        Some(p) => {
            let f = File::open(p).map_err(io_err(p))?;
            Ok(data::load_ratings(BufReader::new(f), &cfg.separator)?)
        }
        None => Ok(data::generate_synthetic(&cfg.synthetic)?),
    }
}

/// Loads data, labels items, picks the target and initialises the model.
/// The adversary is installed but only acts from `attack.start_epoch`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let table = load_table(&cfg.data)?;
    let dataset = data::build_dataset(&table, cfg.data.q, cfg.data.seed)?;
    let labels = data::assign_popularity_labels(&table, cfg.data.popularity_cutoffs)?;
    let target = match cfg.attack.target {
        TargetChoice::Named(TargetRule::LeastPopular) => data::select_target_item(&labels)?,
        TargetChoice::Item(i) if i < table.num_items() => i,
        TargetChoice::Item(i) => {
            return Err(ExperimentError::Config(format!(
                "attack.target: item {i} out of range (N = {})",
                table.num_items()
            )))
        }
    };

    let shape = ModelShape {
        num_items: table.num_items(),
        dim: cfg.model.dim,
        towers: cfg.model.towers.clone(),
    };
    let init = match cfg.model.init {
        InitScheme::Gaussian => FfnInit::Gaussian {
            std: cfg.model.init_std,
        },
        InitScheme::FanIn => FfnInit::FanIn,
    };
    let mut rng = seed::rng_for(cfg.model.seed, &[0]);
    let global = GlobalParams::random(&shape, cfg.model.embedding_std, init, &mut rng)?;
    let users = Tensor2D::gaussian(dataset.users.len(), cfg.model.dim, cfg.model.embedding_std, &mut rng);
    let embeddings = (0..users.rows()).map(|r| users.row(r).to_vec()).collect();

    let mut simulation = Simulation::new(
        global,
        &dataset,
        embeddings,
        cfg.train_settings(),
        cfg.aggregator(),
        labels.clone(),
        target,
    )?;
    simulation.set_adversary(adversary_setup(cfg, &dataset, target)?)?;
    Ok(Prepared {
        table,
        dataset,
        labels,
        target,
        simulation,
    })
}

/// The adversary described by `cfg` for clients of `dataset`.
pub fn adversary_setup(cfg: &ExperimentConfig, dataset: &InteractionDataset, target: usize) -> Result<AdversarySetup> {
    let a = &cfg.attack;
    let malicious = federation::choose_malicious(dataset.users.len(), a.malicious_fraction, cfg.data.seed)?;
    Ok(AdversarySetup {
        mode: a.mode,
        malicious,
        start_epoch: a.start_epoch,
        craft: CraftSettings {
            target,
            alpha: a.resolved_alpha(),
            gamma: a.gamma,
            epochs: a.craft_epochs,
            lr: a.craft_lr,
            p_norm: a.p_norm,
        },
        estimator: EstimatorSettings {
            hidden: vec![32, 16, 8],
            epochs: a.estimator_epochs,
            lr: a.estimator_lr,
            seed: cfg.model.seed,
        },
        fillers: a.fillers.unwrap_or(dataset.mean_profile_len().round() as usize),
        poison_seed: cfg.data.seed,
    })
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    simulation: Simulation,
}

pub fn save_checkpoint(sim: &Simulation, path: &Path) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    let f = File::create(&tmp).map_err(io_err(&tmp))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer(
        &mut w,
        &CheckpointFile {
            version: CHECKPOINT_VERSION,
            simulation: sim.clone(),
        },
    )
    .map_err(|e| ExperimentError::Checkpoint(e.to_string()))?;
    w.flush().map_err(io_err(&tmp))?;
    drop(w);
    fs::rename(&tmp, path).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Simulation> {
    let f = File::open(path).map_err(io_err(path))?;
    let file: CheckpointFile =
        serde_json::from_reader(BufReader::new(f)).map_err(|e| ExperimentError::Checkpoint(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(ExperimentError::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    Ok(file.simulation)
}

/// Paths of the artifacts a run writes.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub metrics_csv: PathBuf,
    pub resolved_config: PathBuf,
    pub final_checkpoint: PathBuf,
}

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub artifacts: RunArtifacts,
    pub metrics: MetricSeries,
    pub target: usize,
}

pub fn write_embeddings(sim: &Simulation, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    eval::write_embeddings_csv(&mut w, &sim.global.item_embeddings, &sim.labels, Some(sim.target))
        .and_then(|_| w.flush())
        .map_err(io_err(path))
}

/// Runs `cfg` end to end, or continues `resume` when given, writing metrics,
/// checkpoints, embedding exports and the resolved configuration under
/// `output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig, resume: Option<Simulation>) -> Result<RunSummary> {
    let out = &cfg.output.dir;
    fs::create_dir_all(out).map_err(io_err(out))?;
    let mut sim = match resume {
        Some(s) => s,
        None => {
            let prepared = prepare(cfg)?;
            let mean_len = prepared.dataset.mean_profile_len();
            let resolved = cfg.resolved(mean_len);
            let path = out.join("resolved_config.toml");
            fs::write(&path, resolved.to_toml()?).map_err(io_err(&path))?;
            info!(
                "{} users, {} items, target item {} ({} interactions)",
                prepared.dataset.users.len(),
                prepared.dataset.num_items,
                prepared.target,
                prepared.labels.counts[prepared.target]
            );
            prepared.simulation
        }
    };
    let metrics_csv = out.join("metrics.csv");
    let final_checkpoint = out.join("checkpoint_final.json");
    let mut csv = BufWriter::new(File::create(&metrics_csv).map_err(io_err(&metrics_csv))?);
    sim.metrics.write_csv(&mut csv).map_err(io_err(&metrics_csv))?;

    while sim.round < cfg.training.rounds {
        let started = Instant::now();
        let before = sim.metrics.rows.len();
        if let Err(e) = sim.step(false) {
            let path = out.join("checkpoint_failed.json");
            warn!("round {} failed; flushing checkpoint to {}", sim.round + 1, path.display());
            let _ = csv.flush();
            save_checkpoint(&sim, &path)?;
            return Err(e.into());
        }
        for row in &sim.metrics.rows[before..] {
            MetricSeries::write_csv_row(&mut csv, row).map_err(io_err(&metrics_csv))?;
            info!(
                "epoch {}: ER@{} {:.4} HR@{} {:.4} ({:.2}s)",
                row.epoch,
                cfg.eval.k_exposure,
                row.er_at_k,
                cfg.eval.k_hit,
                row.hr_at_k,
                started.elapsed().as_secs_f64()
            );
        }
        csv.flush().map_err(io_err(&metrics_csv))?;
        let epoch = sim.round;
        if cfg.output.checkpoint_every > 0 && epoch % cfg.output.checkpoint_every == 0 {
            save_checkpoint(&sim, &out.join(format!("checkpoint_{epoch:05}.json")))?;
        }
        if cfg.output.export_embeddings_at.contains(&epoch) {
            write_embeddings(&sim, &out.join(format!("embeddings_{epoch:05}.csv")))?;
        }
    }
    save_checkpoint(&sim, &final_checkpoint)?;
    Ok(RunSummary {
        artifacts: RunArtifacts {
            metrics_csv,
            resolved_config: out.join("resolved_config.toml"),
            final_checkpoint,
        },
        metrics: sim.metrics.clone(),
        target: sim.target,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_resolves_to_defaults() {
        let cfg = ExperimentConfig::from_toml_with_overrides("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.model.dim, 64);
        assert_eq!(cfg.model.towers, vec![64, 32, 16]);
        assert_eq!(cfg.attack.craft_epochs, 30);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_with_overrides("[training]\nrouns = 3\n", &[]).unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("rouns"), "{err}");
        assert!(ExperimentConfig::from_toml_with_overrides("[nope]\n", &[]).is_err());
    }

    #[test]
    fn overrides_beat_file_values() {
        let text = "[training]\nrounds = 3\n[attack]\nmode = \"eb\"\n";
        let cfg = ExperimentConfig::from_toml_with_overrides(
            text,
            &["training.rounds=7".into(), "attack.mode=pipattack".into(), "defense.rule=bulyan".into()],
        )
        .unwrap();
        assert_eq!(cfg.training.rounds, 7);
        assert_eq!(cfg.attack.mode, AttackMode::Pipattack);
        assert_eq!(cfg.defense.rule, AggregationRule::Bulyan);
        assert!(ExperimentConfig::from_toml_with_overrides("", &["training.rounds".into()]).is_err());
    }

    #[test]
    fn range_checks_name_the_field() {
        let err = ExperimentConfig::from_toml_with_overrides("", &["training.client_fraction=0".into()]).unwrap_err();
        assert!(err.to_string().contains("training.client_fraction"));
    }

    #[test]
    fn alpha_defaults_follow_fraction_and_profile() {
        let mut a = AttackConfig::default();
        assert_eq!(a.resolved_alpha(), 60.0);
        a.malicious_fraction = 0.2;
        assert_eq!(a.resolved_alpha(), 20.0);
        a.alpha_profile = AlphaProfile::Amazon;
        assert_eq!(a.resolved_alpha(), 10.0);
        a.alpha = Some(3.0);
        assert_eq!(a.resolved_alpha(), 3.0);
    }

    #[test]
    fn target_accepts_index_or_rule() {
        let cfg = ExperimentConfig::from_toml_with_overrides("[attack]\ntarget = 7\n", &[]).unwrap();
        assert_eq!(cfg.attack.target, TargetChoice::Item(7));
        let cfg = ExperimentConfig::from_toml_with_overrides("[attack]\ntarget = \"least_popular\"\n", &[]).unwrap();
        assert_eq!(cfg.attack.target, TargetChoice::Named(TargetRule::LeastPopular));
    }

    #[test]
    fn resolved_snapshot_round_trips() {
        let cfg = ExperimentConfig::default().resolved(24.6);
        assert_eq!(cfg.attack.fillers, Some(25));
        let back = ExperimentConfig::from_toml_with_overrides(&cfg.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, cfg);
    }
}
