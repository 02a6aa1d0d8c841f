use proptest::prelude::*;

use super::*;
use crate::dataset::{Batch, Cohort};
use crate::inference::elbo;
use crate::models::tests::{tiny_config, tiny_dims, tiny_layout, tiny_records};
use crate::models::ModelKind;

fn tiny_cohort(n: usize, t: usize, seed: u64) -> Cohort {
    Cohort::new("tiny", tiny_dims(t), tiny_layout(), tiny_records(n, t, seed)).unwrap()
}

fn tiny_model(kind: ModelKind, t: usize, seed: u64) -> Model {
    Model::new(tiny_config(kind, t), seed).unwrap()
}

#[test]
fn pairwise_counts_strict_wins_only() {
    let r = pairwise(&[1.0, 2.0, 3.0, 4.0], &[2.0, 2.0, 1.0, 5.0]).unwrap();
    assert_eq!(r.deltas, vec![1, 0, 0, 1]);
    assert_eq!(r.fraction, 0.5);
    assert!((r.std - 0.25f64.sqrt() / 2.0).abs() < 1e-15);
}

#[test]
fn pairwise_rejects_mismatched_lists() {
    assert!(pairwise(&[1.0], &[1.0, 2.0]).is_err());
    assert!(pairwise(&[], &[]).is_err());
}

#[test]
fn pairwise_of_identical_lists_is_zero() {
    let v = [0.5, 1.0, -3.0];
    assert_eq!(pairwise(&v, &v).unwrap().fraction, 0.0);
}

proptest! {
    #[test]
    fn pairwise_fractions_partition_patients(
        pairs in prop::collection::vec((-5i32..5, -5i32..5), 1..60)
    ) {
        let a: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let b: Vec<f64> = pairs.iter().map(|p| p.1 as f64).collect();
        let ab = pairwise(&a, &b).unwrap().fraction;
        let ba = pairwise(&b, &a).unwrap().fraction;
        let ties = a.iter().zip(&b).filter(|(x, y)| x == y).count() as f64 / a.len() as f64;
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((ab + ba + ties - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_mean_exp_matches_direct_sum(lw in prop::collection::vec(-30.0f64..30.0, 1..40)) {
        let est = log_mean_exp_estimate(&lw);
        let direct = -(lw.iter().map(|v| v.exp()).sum::<f64>() / lw.len() as f64).ln();
        prop_assert!((est.estimate - direct).abs() < 1e-9 * direct.abs().max(1.0));
        prop_assert!(est.std_err >= 0.0);
        // Never above the mean of the negated weights.
        let avg = -lw.iter().sum::<f64>() / lw.len() as f64;
        prop_assert!(est.estimate <= avg + 1e-9);
    }
}

#[test]
fn ten_nat_counts_use_a_strict_margin() {
    let a = [0.0, 0.0, 20.0, 5.0];
    let b = [10.0, 10.5, 0.0, 5.0];
    assert_eq!(counts_10nats(&a, &b).unwrap(), (1, 1));
    assert!(counts_10nats(&a, &b[..3]).is_err());
}

#[test]
fn single_sample_has_zero_standard_error() {
    let e = log_mean_exp_estimate(&[-4.0]);
    assert_eq!(e.estimate, 4.0);
    assert_eq!(e.std_err, 0.0);
}

#[test]
fn equal_weights_have_zero_standard_error() {
    let e = log_mean_exp_estimate(&[-2.5; 8]);
    assert!((e.estimate - 2.5).abs() < 1e-14);
    assert!(e.std_err.abs() < 1e-14);
}

#[test]
fn standard_error_matches_delta_method() {
    let lw = [-1.0, -2.0, -0.5, -3.0];
    let w: Vec<f64> = lw.iter().map(|v: &f64| v.exp()).collect();
    let m = w.iter().sum::<f64>() / 4.0;
    let sd = (w.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt();
    let e = log_mean_exp_estimate(&lw);
    assert!((e.std_err - sd / (2.0 * m)).abs() < 1e-14);
}

#[test]
fn nelbo_suite_normalizations_agree() {
    let cohort = tiny_cohort(7, 5, 1);
    let model = tiny_model(ModelKind::SsmPkpd, 5, 2);
    let r = nelbo_suite(&model, &cohort, 3, 1).unwrap();
    let observed: usize = cohort.patients().iter().map(|p| p.observed_count()).sum();
    assert_eq!(r.per_patient.len(), 7);
    assert!((r.mean * 7.0 - r.per_observed_entry * observed as f64).abs() < 1e-9);
    let direct = elbo(&model, &Batch::from_cohort(&cohort), chunk_seed(3, 0), 1).unwrap();
    assert!((r.mean + direct.total).abs() < 1e-9);
}

#[test]
fn importance_sampling_is_exact_without_latents() {
    let cohort = tiny_cohort(6, 5, 4);
    let batch = Batch::from_cohort(&cohort);
    for kind in [ModelKind::FommNl, ModelKind::Gru] {
        let model = tiny_model(kind, 5, 5);
        let est = is_nll(&model, &batch, 10, 6, Proposal::InferenceNet).unwrap();
        let exact = elbo(&model, &batch, 6, 1).unwrap();
        for (e, ll) in est.iter().zip(&exact.per_patient) {
            assert!((e.estimate + ll).abs() < 1e-12);
            assert_eq!(e.std_err, 0.0);
        }
    }
}

#[test]
fn single_prior_sample_scores_reconstruction_only() {
    let cohort = tiny_cohort(5, 4, 7);
    let batch = Batch::from_cohort(&cohort);
    let model = tiny_model(ModelKind::SsmNl, 4, 8);
    let est = is_nll(&model, &batch, 1, 9, Proposal::Prior).unwrap();
    let mut g = Graph::new();
    let inputs = BatchInputs::new(&mut g, &batch);
    let net = ssm_net(&model).unwrap();
    let e = elbo_graph(&mut g, &model, net, &inputs, &mut ChaCha8Rng::seed_from_u64(9), Proposal::Prior).unwrap();
    for (a, r) in est.iter().zip(g.value(e.recon).data()) {
        assert!((a.estimate + r).abs() < 1e-12);
    }
}

#[test]
fn importance_sampled_nll_does_not_exceed_nelbo() {
    let cohort = tiny_cohort(8, 5, 10);
    let model = tiny_model(ModelKind::SsmPkpd, 5, 11);
    let is = is_nll_cohort(&model, &cohort, 200, 12).unwrap();
    let nelbo = nelbo_suite(&model, &cohort, 13, 200).unwrap();
    let a = is.iter().map(|e| e.estimate).sum::<f64>();
    let b = nelbo.per_patient.iter().sum::<f64>();
    assert!(a <= b + 1e-6, "{a} > {b}");
}

#[test]
fn importance_sampling_is_seeded_and_rejects_zero_samples() {
    let cohort = tiny_cohort(4, 4, 14);
    let model = tiny_model(ModelKind::SsmLinear, 4, 15);
    assert_eq!(is_nll_cohort(&model, &cohort, 5, 1).unwrap(), is_nll_cohort(&model, &cohort, 5, 1).unwrap());
    assert!(is_nll_cohort(&model, &cohort, 0, 1).is_err());
}

/// Replays the recorded observations; unobserved targets get `fill`.
struct Oracle<'a> {
    cohort: &'a Cohort,
    fill: f64,
}

impl Forecaster for Oracle<'_> {
    fn predict(&self, batch: &Batch, c: usize, f: usize, _: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        let m = self.cohort.dims.m;
        // Match batch rows to cohort records by baseline covariates.
        let rows: Vec<&PatientRecord> = (0..batch.len())
            .map(|i| {
                let b = batch.b.row(i);
                self.cohort.patients().iter().find(|p| p.b == b).unwrap()
            })
            .collect();
        (c..c + f)
            .map(|t| {
                let data = rows
                    .iter()
                    .flat_map(|r| (0..m).map(move |j| if r.m[t][j] == 1 { r.x[t][j] } else { self.fill }))
                    .collect();
                Tensor::new(vec![rows.len(), m], data)
            })
            .collect()
    }
}

struct Constant(f64);

impl Forecaster for Constant {
    fn predict(&self, batch: &Batch, _: usize, f: usize, _: &mut ChaCha8Rng) -> Result<Vec<Tensor>> {
        Ok((0..f).map(|_| Tensor::new(vec![batch.len(), 2], vec![self.0; batch.len() * 2]).unwrap()).collect())
    }
}

#[test]
fn ground_truth_forecast_has_zero_error() {
    let cohort = tiny_cohort(10, 6, 16);
    let res = forecast(&Oracle { cohort: &cohort, fill: 99.0 }, &cohort, ForecastSpec::new(2, 3), 0).unwrap();
    assert!(!res.included.is_empty());
    assert!(res.l1.iter().all(|v| *v == 0.0));
    assert_eq!(res.mean_l1(), 0.0);
}

#[test]
fn forecast_error_matches_hand_computation() {
    let cohort = tiny_cohort(10, 6, 17);
    let spec = ForecastSpec::new(1, 2);
    let res = forecast(&Constant(0.25), &cohort, spec, 0).unwrap();
    for (row, &i) in res.included.iter().enumerate() {
        let p = &cohort.patients()[i];
        let want: f64 = (1..3)
            .flat_map(|t| (0..2).map(move |j| (t, j)))
            .filter(|&(t, j)| p.m[t][j] == 1)
            .map(|(t, j)| (p.x[t][j] - 0.25).abs())
            .sum();
        assert!((res.l1[row] - want).abs() < 1e-12);
    }
    let total: f64 = res.l1.iter().sum();
    assert!((res.l1_per_feature.iter().sum::<f64>() - total).abs() < 1e-10);
}

#[test]
fn short_patients_are_skipped_and_reported() {
    let cohort = tiny_cohort(20, 6, 18);
    let spec = ForecastSpec::new(2, 3);
    let res = forecast(&Constant(0.0), &cohort, spec, 0).unwrap();
    for &i in &res.skipped {
        assert!(cohort.patients()[i].length < 5);
    }
    for &i in &res.included {
        assert!(cohort.patients()[i].length >= 5);
    }
    assert_eq!(res.included.len() + res.skipped.len(), 20);
    assert!(!res.skipped.is_empty());
}

#[test]
fn empty_horizon_gives_empty_forecast() {
    let cohort = tiny_cohort(5, 4, 19);
    let model = tiny_model(ModelKind::SsmPkpd, 4, 20);
    let res = forecast(&model, &cohort, ForecastSpec::new(2, 0), 0).unwrap();
    assert!(res.trajectories.iter().all(|t| t.is_empty()));
    assert_eq!(res.mean_l1(), 0.0);
}

#[test]
fn model_forecasts_are_seeded_for_every_family() {
    let cohort = tiny_cohort(8, 6, 21);
    for kind in [ModelKind::SsmPkpd, ModelKind::FommPkpd, ModelKind::Gru] {
        let model = tiny_model(kind, 6, 22);
        for (c, f) in [(0, 4), (2, 3)] {
            let spec = ForecastSpec::new(c, f);
            let a = forecast(&model, &cohort, spec, 5).unwrap();
            assert_eq!(a, forecast(&model, &cohort, spec, 5).unwrap());
            assert_eq!(a.trajectories[0].len(), f);
            assert!(a.l1.iter().all(|v| v.is_finite() && *v >= 0.0));
        }
    }
}

#[test]
fn forecast_csv_has_one_row_per_step() {
    let cohort = tiny_cohort(6, 5, 23);
    let res = forecast(&Constant(1.0), &cohort, ForecastSpec::new(1, 2), 0).unwrap();
    let mut buf = Vec::new();
    write_trajectories_csv(&res, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().next().unwrap(), "patient,t,x0,x1");
    assert_eq!(text.lines().count(), 1 + 2 * res.included.len());
}

#[test]
fn forecast_presets_are_named() {
    let p = ForecastSpec::presets();
    assert_eq!(p.len(), 3);
    assert_eq!(p[0].1, ForecastSpec::new(3, 12));
    assert_eq!(p[2].1.c, 0);
}

#[test]
fn per_feature_terms_sum_to_reconstruction() {
    let cohort = tiny_cohort(9, 6, 24);
    for kind in [ModelKind::SsmPkpd, ModelKind::SsmMoe, ModelKind::FommLinear, ModelKind::GruPkpd] {
        let model = tiny_model(kind, 6, 25);
        let r = per_feature_report(&model, &cohort, 26).unwrap();
        assert_eq!(r.rows.len(), 2);
        let sum: f64 = r.rows.iter().map(|row| row.nll).sum();
        assert!((sum + r.recon).abs() < 1e-9, "{kind:?}: {sum} vs {}", r.recon);
    }
}

#[test]
fn feature_csv_has_one_row_per_feature() {
    let cohort = tiny_cohort(6, 15, 27);
    let model = tiny_model(ModelKind::SsmLinear, 15, 28);
    let r = per_feature_report(&model, &cohort, 0).unwrap();
    let mut buf = Vec::new();
    write_feature_csv(&r, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert_eq!(text.lines().count(), 3);
    assert_eq!(text.lines().next().unwrap(), "feature,nll,l1_c0-f2y,l1_c1y-f1y,l1_c6m-f2y");
}

#[test]
fn attention_summary_rows_are_distributions() {
    let cohort = tiny_cohort(8, 5, 29);
    let model = tiny_model(ModelKind::SsmPkpd, 5, 30);
    let table = attention_summary(&model, &cohort, 0).unwrap();
    assert_eq!(table.shape(), [3, 3]);
    for row in table.data().chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(attention_summary(&tiny_model(ModelKind::SsmNl, 5, 30), &cohort, 0).is_err());
    assert!(attention_summary(&tiny_model(ModelKind::Gru, 5, 30), &cohort, 0).is_err());
}

#[test]
fn semi_synthetic_cohort_is_fully_observed_and_seeded() {
    let cohort = tiny_cohort(5, 4, 31);
    let model = tiny_model(ModelKind::SsmPkpd, 4, 32);
    let a = semi_synthetic(&model, &cohort, 2, 3).unwrap();
    assert_eq!(a.len(), 10);
    assert_eq!(a.patients(), semi_synthetic(&model, &cohort, 2, 3).unwrap().patients());
    for p in a.patients() {
        assert_eq!(p.observed_count(), p.length * 2);
    }
}

#[test]
fn ablation_compares_the_nested_variants() {
    let cohort = tiny_cohort(12, 4, 33);
    let base = TrainConfig {
        latent_dim: 3,
        inference_hidden: 3,
        epochs: 2,
        ..TrainConfig::default()
    };
    let rows = ablation_suite(&base, &cohort, 2, 1).unwrap();
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2].variant, "linear+log-cell+te");
    for r in &rows {
        assert_eq!(r.fold_nelbo.len(), 2);
        assert!((r.mean - mean(&r.fold_nelbo)).abs() < 1e-12);
    }
    let mut buf = Vec::new();
    write_ablation_csv(&rows, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("variant,fold1,fold2,mean\n"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn metrics_json_round_trips() {
    let mut report = MetricsReport::new();
    report.insert("nelbo".into(), Metric { value: 12.5, std: 0.25 });
    let mut buf = Vec::new();
    write_metrics_json(&report, &mut buf).unwrap();
    let back: MetricsReport = serde_json::from_slice(&buf).unwrap();
    assert_eq!(back, report);
}
