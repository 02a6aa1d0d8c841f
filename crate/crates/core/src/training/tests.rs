use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::dataset::{train_test_split, Batch};
use crate::diffcore::ATTENTION_GROUP;
use crate::models::tests::{tiny_dims, tiny_layout, tiny_records};

fn tiny_cohort(n: usize, t: usize, seed: u64) -> Cohort {
    Cohort::new("tiny", tiny_dims(t), tiny_layout(), tiny_records(n, t, seed)).unwrap()
}

fn tiny_train(kind: ModelKind, epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        model: kind,
        latent_dim: 3,
        hidden: Some(4),
        inference_hidden: 3,
        epochs,
        seed,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_traces() {
    let cohort = tiny_cohort(10, 5, 1);
    for kind in [ModelKind::SsmPkpd, ModelKind::FommNl, ModelKind::Gru] {
        let cfg = tiny_train(kind, 5, 7);
        let (a, ra) = train(&cfg, &cohort).unwrap();
        let (b, rb) = train(&cfg, &cohort).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.params.to_bytes(), b.params.to_bytes());
    }
}

#[test]
fn minibatch_traces_are_seeded() {
    let cohort = tiny_cohort(10, 5, 2);
    let cfg = TrainConfig {
        batch_size: Some(3),
        ..tiny_train(ModelKind::SsmLinear, 3, 4)
    };
    assert_eq!(train(&cfg, &cohort).unwrap().1, train(&cfg, &cohort).unwrap().1);
    let other = TrainConfig { seed: 5, ..cfg };
    assert_ne!(train(&other, &cohort).unwrap().1.loss_trace, train(&TrainConfig { seed: 4, ..other.clone() }, &cohort).unwrap().1.loss_trace);
}

/// Loss of `model` on the full cohort with the noise stream `fit` uses.
fn loss_at(model: &Model, cfg: &TrainConfig, cohort: &Cohort) -> f64 {
    let mut g = Graph::new();
    let inputs = BatchInputs::new(&mut g, &Batch::from_cohort(cohort));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let obj = model.objective(&mut g, &inputs, &mut rng).unwrap();
    let nll = g.mean(obj.nll).unwrap();
    let pen = regularization_penalty(&mut g, &model.params, cfg.penalty, cfg.strength, cfg.scope).unwrap();
    let loss = g.add(nll, pen).unwrap();
    g.value(loss).item()
}

#[test]
fn one_small_step_lowers_the_loss_under_fixed_noise() {
    let cohort = tiny_cohort(12, 5, 3);
    let mut descended = 0;
    for seed in 0..10 {
        let cfg = TrainConfig {
            lr: 1e-4,
            ..tiny_train(ModelKind::SsmPkpd, 1, seed)
        };
        let mut model = Model::new(cfg.model_config(cohort.dims, cohort.layout), seed).unwrap();
        let before = loss_at(&model, &cfg, &cohort);
        fit(&mut model, &cfg, &cohort).unwrap();
        if loss_at(&model, &cfg, &cohort) < before {
            descended += 1;
        }
    }
    assert!(descended >= 9, "{descended} of 10");
}

#[test]
fn first_trace_entry_is_nelbo_plus_penalty() {
    let cohort = tiny_cohort(8, 4, 4);
    let cfg = TrainConfig {
        penalty: PenaltyMode::L1,
        scope: PenaltyScope::ExcludeAttention,
        strength: 0.5,
        ..tiny_train(ModelKind::SsmPkpd, 1, 9)
    };
    let model = Model::new(cfg.model_config(cohort.dims, cohort.layout), cfg.seed).unwrap();
    // Manual penalty over every parameter outside the attention group.
    let manual: f64 = model
        .params
        .ids()
        .filter(|&id| model.params.group(id) != ATTENTION_GROUP)
        .map(|id| model.params.value(id).data().iter().map(|v| v.abs()).sum::<f64>())
        .sum::<f64>()
        * 0.5;
    let all: f64 = model.params.ids().map(|id| model.params.value(id).data().iter().map(|v| v.abs()).sum::<f64>()).sum::<f64>() * 0.5;
    assert!(all > manual);
    let mut g = Graph::new();
    let inputs = BatchInputs::new(&mut g, &Batch::from_cohort(&cohort));
    let obj = model.objective(&mut g, &inputs, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
    let nelbo = g.value(obj.nll).data().iter().sum::<f64>() / 8.0;
    let (_, rec) = train(&cfg, &cohort).unwrap();
    assert!((rec.loss_trace[0] - (nelbo + manual)).abs() < 1e-9 * nelbo.abs().max(1.0));
}

#[test]
fn zero_strength_matches_no_penalty() {
    let cohort = tiny_cohort(8, 4, 5);
    let a = TrainConfig {
        strength: 0.0,
        penalty: PenaltyMode::L1,
        ..tiny_train(ModelKind::SsmNl, 3, 2)
    };
    let b = TrainConfig {
        penalty: PenaltyMode::L2,
        scope: PenaltyScope::ExcludeAttention,
        ..a.clone()
    };
    assert_eq!(train(&a, &cohort).unwrap().1.loss_trace, train(&b, &cohort).unwrap().1.loss_trace);
}

#[test]
fn nan_parameters_abort_with_divergence() {
    let cohort = tiny_cohort(6, 4, 6);
    let cfg = tiny_train(ModelKind::SsmLinear, 3, 1);
    let mut model = Model::new(cfg.model_config(cohort.dims, cohort.layout), 1).unwrap();
    let id = model.params.ids().next().unwrap();
    model.params.value_mut(id).data_mut()[0] = f64::NAN;
    match fit(&mut model, &cfg, &cohort) {
        Err(Error::Divergence { epoch, .. }) => assert_eq!(epoch, 0),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let cohort = tiny_cohort(4, 3, 7);
    for bad in [
        TrainConfig { lr: 0.0, ..tiny_train(ModelKind::Gru, 1, 0) },
        TrainConfig { strength: -1.0, ..tiny_train(ModelKind::Gru, 1, 0) },
        TrainConfig { latent_dim: 0, ..tiny_train(ModelKind::Gru, 1, 0) },
        TrainConfig { batch_size: Some(0), ..tiny_train(ModelKind::Gru, 1, 0) },
        TrainConfig { clip_norm: Some(0.0), ..tiny_train(ModelKind::Gru, 1, 0) },
    ] {
        assert!(train(&bad, &cohort).is_err());
    }
}

#[test]
fn clipping_bounds_the_first_update() {
    let cohort = tiny_cohort(6, 4, 8);
    let cfg = TrainConfig {
        clip_norm: Some(1e-3),
        ..tiny_train(ModelKind::FommNl, 2, 3)
    };
    let (_, rec) = train(&cfg, &cohort).unwrap();
    assert!(rec.loss_trace.iter().all(|v| v.is_finite()));
}

#[test]
fn config_json_rejects_unknown_fields_and_fills_defaults() {
    let cfg: TrainConfig = serde_json::from_str(r#"{"model":"gru","epochs":5}"#).unwrap();
    assert_eq!(cfg.epochs, 5);
    assert_eq!(cfg.lr, TrainConfig::default().lr);
    assert!(serde_json::from_str::<TrainConfig>(r#"{"epochz":5}"#).is_err());
    let back: TrainConfig = serde_json::from_str(&serde_json::to_string(&cfg).unwrap()).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn presets_cover_every_kind() {
    for kind in ModelKind::ALL {
        let p = TrainConfig::preset(kind);
        assert_eq!(p.model, kind);
        p.validate().unwrap();
    }
    assert_eq!(TrainConfig::preset(ModelKind::SsmPkpd).scope, PenaltyScope::ExcludeAttention);
}

#[test]
fn full_grid_enumerates_every_point() {
    let ssm = Grid::full().configs(&TrainConfig::default());
    assert_eq!(ssm.len(), 4 * 2 * 2 * 4);
    let qs: std::collections::BTreeSet<usize> = ssm.iter().map(|c| c.latent_dim).collect();
    assert_eq!(qs.into_iter().collect::<Vec<_>>(), GRID_LATENT);
    let fomm = Grid::full().configs(&TrainConfig::preset(ModelKind::FommLinear));
    assert_eq!(fomm.len(), 2 * 2 * 4);
}

#[test]
fn singleton_grid_reproduces_direct_training() {
    let cohort = tiny_cohort(9, 4, 9);
    let cfg = tiny_train(ModelKind::SsmAttnhist, 3, 5);
    let res = grid_search(&cfg, &Grid::singleton(&cfg), &cohort, 3, 1).unwrap();
    assert_eq!(res.table.len(), 1);
    assert_eq!(res.best.config, cfg);
    let folds = k_folds(&cohort, 3, cfg.seed).unwrap();
    let (model, rec) = train(&cfg, &folds[0].train).unwrap();
    assert_eq!(res.best.loss_trace, rec.loss_trace);
    let v = -cohort_elbo(&model, &folds[0].validation, eval_seed(cfg.seed), 1).unwrap().total;
    assert_eq!(res.best.validation_nelbo[0], v);
}

#[test]
fn injected_fixed_model_can_win() {
    let cohort = tiny_cohort(9, 4, 10);
    let trained = tiny_train(ModelKind::SsmLinear, 1, 6);
    // Fit a second model for many epochs and inject it as a fixed entry.
    let strong_cfg = TrainConfig { epochs: 150, ..trained.clone() };
    let (strong, _) = train(&strong_cfg, &cohort).unwrap();
    let candidates = vec![
        Candidate::Train(trained),
        Candidate::Fixed {
            label: "injected".into(),
            config: strong_cfg,
            model: Box::new(strong),
        },
    ];
    let res = grid_search_candidates(candidates, &cohort, 3, 0, 2).unwrap();
    assert_eq!(res.best.label, "injected");
    assert!(res.table[1].final_train_nelbo.is_finite());
}

#[test]
fn diverged_grid_cells_lose_selection() {
    let cohort = tiny_cohort(8, 4, 12);
    let base = TrainConfig {
        penalty: PenaltyMode::L1,
        ..tiny_train(ModelKind::FommLinear, 2, 3)
    };
    // An overflowing penalty makes the loss infinite at the first epoch.
    let grid = Grid {
        strengths: vec![1e308, 0.01],
        ..Grid::singleton(&base)
    };
    let res = grid_search(&base, &grid, &cohort, 2, 1).unwrap();
    assert_eq!(res.best.config.strength, 0.01);
    assert!(res.table[0].validation_nelbo.iter().all(|v| *v == f64::INFINITY));
    let all_bad = Grid {
        strengths: vec![1e308],
        ..Grid::singleton(&base)
    };
    assert!(matches!(grid_search(&base, &all_bad, &cohort, 2, 1), Err(Error::Divergence { .. })));
}

#[test]
fn grid_results_do_not_depend_on_thread_count() {
    let cohort = tiny_cohort(8, 4, 11);
    let base = tiny_train(ModelKind::FommLinear, 2, 3);
    let grid = Grid {
        latent_dims: vec![3],
        penalties: vec![PenaltyMode::L1, PenaltyMode::L2],
        scopes: vec![PenaltyScope::All],
        strengths: vec![0.01, 1.0],
    };
    let a = grid_search(&base, &grid, &cohort, 2, 1).unwrap();
    let b = grid_search(&base, &grid, &cohort, 2, 3).unwrap();
    assert_eq!(a.table, b.table);
    assert_eq!(a.best, b.best);
}

#[test]
fn selection_breaks_ties_by_size_then_strength() {
    let rec = |q: usize, s: f64| RunRecord {
        label: String::new(),
        config: TrainConfig { latent_dim: q, strength: s, ..TrainConfig::default() },
        final_train_nelbo: 0.0,
        validation_nelbo: vec![1.0],
        loss_trace: Vec::new(),
        checkpoint: None,
    };
    let mut v = [rec(48, 0.1), rec(16, 1.0), rec(16, 0.01)];
    v.sort_by(selection_order);
    assert_eq!((v[0].config.latent_dim, v[0].config.strength), (16, 0.01));
    assert_eq!(v[2].config.latent_dim, 48);
}

#[test]
fn training_never_reads_the_held_out_split() {
    let cohort = tiny_cohort(12, 4, 12);
    let (train_set, held_out) = train_test_split(&cohort, 0.75, 1).unwrap();
    let cfg = tiny_train(ModelKind::SsmPkpd, 2, 0);
    train(&cfg, &train_set).unwrap();
    grid_search(&cfg, &Grid::singleton(&cfg), &train_set, 3, 1).unwrap();
    assert_eq!(held_out.reads(), 0);
}

#[test]
fn checkpointed_training_round_trips() {
    let cohort = tiny_cohort(6, 4, 13);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_train(ModelKind::SsmPkpd, 2, 0);
    let (model, rec) = train_to(&cfg, &cohort, dir.path()).unwrap();
    assert_eq!(rec.checkpoint.as_deref(), Some(dir.path()));
    let back = crate::models::load_checkpoint(dir.path()).unwrap();
    assert_eq!(back.params.to_bytes(), model.params.to_bytes());
}

#[test]
fn run_table_has_one_row_per_record() {
    let cohort = tiny_cohort(6, 4, 14);
    let (_, rec) = train(&tiny_train(ModelKind::Gru, 1, 0), &cohort).unwrap();
    let mut buf = Vec::new();
    write_run_table(&[rec.clone(), rec], &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert!(text.lines().nth(1).unwrap().starts_with("gru,"));
}
