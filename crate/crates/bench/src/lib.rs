//! Shared fixtures for the benchmarks.

use pkpd_core::dataset::Cohort;
use pkpd_core::models::{Model, ModelKind};
use pkpd_core::syndata::{generate_cohort, SynthConfig};
use pkpd_core::training::TrainConfig;

/// A seeded synthetic cohort of `n` patients.
pub fn cohort(n: usize) -> Cohort {
    let cfg = SynthConfig { n_patients: n, ..SynthConfig::train_small(7) };
    generate_cohort(&cfg).expect("valid synthetic config").0
}

/// A freshly initialized model with the kind's preset settings.
pub fn preset_model(kind: ModelKind, cohort: &Cohort) -> (TrainConfig, Model) {
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::preset(kind) };
    let model = Model::new(cfg.model_config(cohort.dims, cohort.layout), 0).expect("valid preset");
    (cfg, model)
}
