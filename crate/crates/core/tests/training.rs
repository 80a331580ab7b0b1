use autofis::config::RunConfig;
use autofis::data::{enumerate_interactions, Order};
use autofis::interaction::{ArchitectureParams, Coverage, GateSet};
use autofis::persistence::Checkpoint;
use autofis::pipeline::{prepare_data, random_gates, retrain_with_gates, run_pipeline, StagePlan, Trainer};
use autofis::Error;

const SMALL: &str = r#"
[run]
seed = 9

[synthetic]
n_train = 1500
n_test = 400
fields = 5
categories = 6
planted = ["0,1"]
calibration_samples = 1000

[model]
embed_dim = 4

[grda]
lr = 10.0

[search]
epochs = 2
batch_size = 64

[retrain]
epochs = 2
batch_size = 64

[eval]
batch_size = 500
per_epoch = false
"#;

fn small() -> RunConfig {
    RunConfig::from_toml(SMALL).unwrap()
}

fn fresh(plan: StagePlan, cfg: &RunConfig) -> (Trainer, autofis::pipeline::Prepared) {
    let data = prepare_data(cfg).unwrap();
    let m = data.schema.field_count();
    let alpha = ArchitectureParams::uniform(m, Coverage::Pair, 0.7);
    let trainer = Trainer::new(plan, &data.schema, &alpha, &GateSet::all_open(m, Coverage::Pair)).unwrap();
    (trainer, data)
}

#[test]
fn mid_epoch_resume_from_disk_is_bit_identical() {
    let cfg = small();
    let (mut full, data) = fresh(StagePlan::search(&cfg), &cfg);
    let mut part = full.clone();
    full.run(&data.train, None).unwrap();

    part.run_steps(&data.train, 30).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    part.to_checkpoint(&cfg.hash()).unwrap().save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let mut resumed = Trainer::restore(StagePlan::search(&cfg), &data.schema, &loaded, &cfg.hash()).unwrap();
    assert_eq!((resumed.cursor.epoch, resumed.cursor.batch), (1, 6));
    resumed.run(&data.train, None).unwrap();
    assert_eq!(resumed.model, full.model);
    assert_eq!(resumed.optimizer, full.optimizer);
}

#[test]
fn restore_under_another_config_fails_fast() {
    let cfg = small();
    let (mut t, data) = fresh(StagePlan::search(&cfg), &cfg);
    t.run_steps(&data.train, 3).unwrap();
    let ckpt = t.to_checkpoint(&cfg.hash()).unwrap();
    let other = RunConfig::from_toml_with(SMALL, &["grda.c=0.01".into()]).unwrap();
    let err = Trainer::restore(StagePlan::search(&other), &data.schema, &ckpt, &other.hash()).unwrap_err();
    assert!(matches!(err, Error::ConfigHashMismatch { .. }), "{err}");
    let err = Trainer::restore(StagePlan::retrain(&cfg), &data.schema, &ckpt, &cfg.hash()).unwrap_err();
    assert!(!matches!(err, Error::ConfigHashMismatch { .. }), "{err}");
}

#[test]
fn kept_share_counts_nonzero_alpha_and_retrain_keeps_gates() {
    let cfg = small();
    let data = prepare_data(&cfg).unwrap();
    let out = run_pipeline(&cfg, &data).unwrap();
    let alpha = out.manifest.alpha.values();
    let nonzero = alpha.iter().filter(|&&a| a != 0.0).count();
    let search = out.report.stage("search").unwrap();
    assert_eq!(
        search.kept_pairs,
        nonzero as f64 / enumerate_interactions(5, Order::Pair).len() as f64
    );
    assert_eq!(out.manifest.kept_fraction(Order::Pair), search.kept_pairs);
    let retrained = out.model.gates();
    assert_eq!(retrained.flags(), out.manifest.gates.flags());
    for (k, &open) in out.manifest.gates.flags().iter().enumerate() {
        if !open {
            assert_eq!(out.model.pairs.alpha[k], 0.0);
        }
    }
}

#[test]
fn random_gate_retrain_respects_its_gates() {
    let cfg = small();
    let data = prepare_data(&cfg).unwrap();
    let ids = enumerate_interactions(5, Order::Pair);
    let gates = random_gates(&ids, 4, 1, 0).unwrap();
    let (model, report) = retrain_with_gates(&cfg, &data, &gates, "random-gates").unwrap();
    assert_eq!(model.gates(), gates);
    assert!(report.kept_pairs <= 0.4);
    assert!(report.test.unwrap().auc > 0.5);
}
