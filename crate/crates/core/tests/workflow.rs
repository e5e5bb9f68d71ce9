use std::fs;
use std::path::Path;

use fedrec_sim::data::{self, SyntheticSpec};
use fedrec_sim::experiment::{self, ExperimentConfig};

fn config(dir: &Path, extra: &[&str]) -> ExperimentConfig {
    let mut overrides: Vec<String> = [
        "data.synthetic.users=100",
        "data.synthetic.items=50",
        "data.synthetic.interactions=2000",
        "model.dim=16",
        "model.towers=[16, 8]",
        "training.client_fraction=0.3",
        "attack.malicious_fraction=0.1",
        "attack.estimator_epochs=60",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    overrides.push(format!("output.dir={:?}", dir.display().to_string()));
    ExperimentConfig::from_toml_with_overrides("", &overrides).unwrap()
}

#[test]
fn benign_run_writes_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), &["training.rounds=2", "attack.mode=\"none\""]);
    let summary = experiment::run_experiment(&cfg, None).unwrap();
    assert_eq!(summary.metrics.rows.len(), 2);
    for row in &summary.metrics.rows {
        assert!(row.er_at_k.is_finite() && row.hr_at_k.is_finite());
        assert!(row.kl.is_none());
    }
    let csv = fs::read_to_string(&summary.artifacts.metrics_csv).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let resolved = fs::read_to_string(&summary.artifacts.resolved_config).unwrap();
    let reloaded = ExperimentConfig::from_toml_with_overrides(&resolved, &[]).unwrap();
    assert_eq!(reloaded.training.rounds, 2);
    assert!(summary.artifacts.final_checkpoint.exists());
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let straight = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let extra = ["attack.mode=\"pipattack\"", "attack.start_epoch=3", "attack.craft_epochs=5"];

    let full = config(straight.path(), &[&extra[..], &["training.rounds=6"]].concat());
    experiment::run_experiment(&full, None).unwrap();

    let first = config(split.path(), &[&extra[..], &["training.rounds=4"]].concat());
    let head = experiment::run_experiment(&first, None).unwrap();
    let sim = experiment::load_checkpoint(&head.artifacts.final_checkpoint).unwrap();
    let rest = config(split.path(), &[&extra[..], &["training.rounds=6"]].concat());
    experiment::run_experiment(&rest, Some(sim)).unwrap();

    let a = fs::read(straight.path().join("metrics.csv")).unwrap();
    let b = fs::read(split.path().join("metrics.csv")).unwrap();
    assert_eq!(a, b);
    let ga = experiment::load_checkpoint(&straight.path().join("checkpoint_final.json")).unwrap();
    let gb = experiment::load_checkpoint(&split.path().join("checkpoint_final.json")).unwrap();
    assert_eq!(ga.global, gb.global);
}

#[test]
fn unknown_section_key_is_a_config_error() {
    let err = ExperimentConfig::from_toml_with_overrides("[defense]\nbeta = 2\n", &[]).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("beta"));
}

fn top_decile_share(skew: f64) -> f64 {
    let spec = SyntheticSpec {
        users: 200,
        items: 100,
        interactions: 4000,
        skew,
        seed: 3,
        ..SyntheticSpec::default()
    };
    let table = data::generate_synthetic(&spec).unwrap();
    let mut counts = table.item_counts();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let total: usize = counts.iter().sum();
    counts.iter().take(counts.len() / 10).sum::<usize>() as f64 / total as f64
}

#[test]
fn synthetic_popularity_is_long_tailed() {
    assert!(top_decile_share(1.0) > 0.30);
    let flat = top_decile_share(0.0);
    assert!(flat < 0.16, "top decile share {flat} at skew 0");
}

#[test]
fn crafting_lowers_its_loss() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(
        tmp.path(),
        &[
            "attack.mode=\"pipattack\"",
            "attack.malicious_fraction=0.2",
            "training.force_include_malicious=true",
        ],
    );
    let mut sim = experiment::prepare(&cfg).unwrap().simulation;
    let (mut descended, mut total) = (0, 0);
    for _ in 0..10 {
        let report = sim.step(false).unwrap();
        for trace in &report.craft_traces {
            total += 1;
            if trace.last() < trace.first() {
                descended += 1;
            }
        }
    }
    assert!(total > 0);
    assert!(descended as f64 >= 0.95 * total as f64, "{descended}/{total}");
}
