//! End-to-end: generate, split, train, checkpoint, score.

use pkpd_core::dataset::{load_cohort, save_cohort, train_test_split};
use pkpd_core::eval::{forecast, is_nll_cohort, nelbo_suite, pairwise_models, per_feature_report, ForecastSpec};
use pkpd_core::models::{load_checkpoint, ModelKind};
use pkpd_core::syndata::{generate_cohort, SynthConfig};
use pkpd_core::training::{train, train_to, TrainConfig};

fn config(kind: ModelKind) -> TrainConfig {
    TrainConfig {
        epochs: 20,
        seed: 4,
        ..TrainConfig::preset(kind)
    }
}

#[test]
fn generate_train_checkpoint_score() {
    let dir = tempfile::tempdir().unwrap();
    let (cohort, _) = generate_cohort(&SynthConfig { n_patients: 30, t: 12, seed: 8, ..SynthConfig::default() }).unwrap();
    let path = dir.path().join("cohort.jsonl");
    save_cohort(&cohort, &path).unwrap();
    assert_eq!(load_cohort(&path).unwrap(), cohort);

    let (train_set, held_out) = train_test_split(&cohort, 0.7, 1).unwrap();
    let (pkpd, record) = train_to(&config(ModelKind::SsmPkpd), &train_set, &dir.path().join("pkpd")).unwrap();
    let (linear, _) = train(&config(ModelKind::SsmLinear), &train_set).unwrap();
    assert_eq!(held_out.reads(), 0);
    assert_eq!(record.loss_trace.len(), 20);

    let test = held_out.cohort();
    let reloaded = load_checkpoint(&dir.path().join("pkpd")).unwrap();
    let direct = nelbo_suite(&pkpd, test, 2, 1).unwrap();
    assert_eq!(nelbo_suite(&reloaded, test, 2, 1).unwrap(), direct);
    assert!(direct.mean.is_finite());
    assert_eq!(direct.per_patient.len(), test.len());

    let pw = pairwise_models(&pkpd, &linear, test, 2).unwrap();
    assert!((0.0..=1.0).contains(&pw.fraction));
    assert_eq!(pw.deltas.len(), test.len());

    let is = is_nll_cohort(&pkpd, test, 8, 2).unwrap();
    assert!(is.iter().all(|e| e.estimate.is_finite() && e.std_err >= 0.0));

    let fc = forecast(&reloaded, test, ForecastSpec::new(3, 6), 2).unwrap();
    assert!(fc.mean_l1().is_finite());
    let report = per_feature_report(&reloaded, test, 2).unwrap();
    assert_eq!(report.rows.len(), cohort.dims.m);
}
