use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use pkpd_core::dataset::{load_cohort, save_cohort, Cohort};
use pkpd_core::eval::{
    ablation_suite, attention_summary, counts_10nats, forecast, is_nll_cohort, nelbo_suite, pairwise, per_feature_report, write_ablation_csv,
    write_feature_csv, write_metrics_json, write_trajectories_csv, ForecastSpec, Metric, MetricsReport, DEFAULT_IS_SAMPLES,
};
use pkpd_core::mechanisms::write_attention_csv;
use pkpd_core::models::{load_checkpoint, save_checkpoint, Family, Model};
use pkpd_core::syndata::{generate_cohort, write_truth, SynthConfig};
use pkpd_core::training::{grid_search, train_with, write_run_table, Grid, RunRecord, TrainConfig};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::args::{AblateArgs, Cli, Command, Common, EvaluateArgs, ForecastArgs, GenDataArgs, TrainArgs, TrainOverrides};
use crate::exit::{CliError, CliResult};

pub const COHORT_FILE: &str = "cohort.jsonl";
pub const TRUTH_FILE: &str = "truth.jsonl";
pub const SNAPSHOT_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const REPORT_FILE: &str = "report.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const WEIGHTS_DIR: &str = "weights";
pub const ATTENTION_FILE: &str = "attention.csv";

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Forecast(a) => run_forecast(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> CliResult<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
        }
    }
}

fn create(out: &Path, name: &str) -> CliResult<BufWriter<File>> {
    let path = out.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| CliError::io(&path, e))
}

fn prepare_out(common: &Common) -> CliResult<()> {
    fs::create_dir_all(&common.out).map_err(|e| CliError::io(&common.out, e))
}

fn write_snapshot<T: Serialize>(out: &Path, command: &str, resolved: &T) -> CliResult<()> {
    #[derive(Serialize)]
    struct Snapshot<'a, T> {
        command: &'a str,
        version: &'a str,
        resolved: &'a T,
    }
    let mut w = create(out, SNAPSHOT_FILE)?;
    let snap = Snapshot {
        command,
        version: env!("CARGO_PKG_VERSION"),
        resolved,
    };
    serde_json::to_writer_pretty(&mut w, &snap)?;
    writeln!(w).map_err(|e| CliError::io(&out.join(SNAPSHOT_FILE), e))
}

fn write_metrics(out: &Path, report: &MetricsReport) -> CliResult<()> {
    let mut w = create(out, METRICS_FILE)?;
    write_metrics_json(report, &mut w)?;
    writeln!(w).map_err(|e| CliError::io(&out.join(METRICS_FILE), e))
}

fn load_data(path: &Path) -> CliResult<Cohort> {
    if !path.exists() {
        return Err(CliError::io(path, "no such file"));
    }
    Ok(load_cohort(path)?)
}

fn load_model(path: &Path, cohort: &Cohort) -> CliResult<Model> {
    if !path.is_dir() {
        return Err(CliError::io(path, "no such checkpoint directory"));
    }
    let model = load_checkpoint(path)?;
    let (want, got) = (model.config.dims, cohort.dims);
    if (want.j, want.m, want.l, want.k) != (got.j, got.m, got.l, got.k) || model.config.layout != cohort.layout {
        return Err(CliError::config(format!(
            "{} was trained on dims {want:?} but the cohort has {got:?}",
            path.display()
        )));
    }
    Ok(model)
}

fn metric(value: f64, std: f64) -> Metric {
    Metric { value, std }
}

fn std_err(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / ((v.len() - 1) * v.len()) as f64).sqrt()
}

fn gen_data(a: GenDataArgs) -> CliResult<()> {
    let mut cfg: SynthConfig = read_config(a.common.config.as_deref())?;
    if let Some(n) = a.n {
        cfg.n_patients = n;
    }
    if let Some(t) = a.t {
        cfg.t = t;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    prepare_out(&a.common)?;
    let (cohort, truth) = generate_cohort(&cfg)?;
    save_cohort(&cohort, &a.common.out.join(COHORT_FILE))?;
    if a.truth {
        write_truth(&truth, create(&a.common.out, TRUTH_FILE)?)?;
    }
    if a.common.verbose > 0 {
        eprintln!("wrote {} patients to {}", cohort.len(), a.common.out.join(COHORT_FILE).display());
    }
    write_snapshot(&a.common.out, "gen-data", &cfg)
}

fn resolve_train(common: &Common, o: &TrainOverrides) -> CliResult<TrainConfig> {
    let mut cfg: TrainConfig = match (&common.config, o.preset) {
        (Some(_), true) => return Err(CliError::config("--preset and --config are exclusive")),
        (_, true) => TrainConfig::preset(o.model.unwrap_or(TrainConfig::default().model)),
        (path, false) => read_config(path.as_deref())?,
    };
    if let Some(v) = o.model {
        cfg.model = v;
    }
    if let Some(v) = o.latent_dim {
        cfg.latent_dim = v;
    }
    if o.hidden.is_some() {
        cfg.hidden = o.hidden;
    }
    if let Some(v) = o.inference_hidden {
        cfg.inference_hidden = v;
    }
    if let Some(v) = o.penalty {
        cfg.penalty = v;
    }
    if let Some(v) = o.scope {
        cfg.scope = v;
    }
    if let Some(v) = o.strength {
        cfg.strength = v;
    }
    if let Some(v) = o.lr {
        cfg.lr = v;
    }
    if let Some(v) = o.epochs {
        cfg.epochs = v;
    }
    if o.batch_size.is_some() {
        cfg.batch_size = o.batch_size;
    }
    if o.clip_norm.is_some() {
        cfg.clip_norm = o.clip_norm;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    data: &'a Path,
    train: &'a TrainConfig,
    grid: Option<&'a Grid>,
    folds: usize,
    jobs: usize,
}

fn train(a: TrainArgs) -> CliResult<()> {
    let base = resolve_train(&a.common, &a.train)?;
    let cohort = load_data(&a.data)?;
    prepare_out(&a.common)?;
    let out = &a.common.out;
    let verbose = a.common.verbose;
    let grid = match a.grid.as_deref() {
        None => None,
        Some("") => Some(Grid::full()),
        Some(p) => Some(read_config_required::<Grid>(Path::new(p))?),
    };
    write_snapshot(
        out,
        "train",
        &TrainSnapshot {
            data: &a.data,
            train: &base,
            grid: grid.as_ref(),
            folds: a.folds,
            jobs: a.jobs,
        },
    )?;
    let mut metrics = MetricsReport::new();
    let (cfg, table) = match &grid {
        None => (base, Vec::new()),
        Some(g) => {
            let res = grid_search(&base, g, &cohort, a.folds, a.jobs)?;
            if verbose > 0 {
                eprintln!("selected {} (validation NELBO {:.4})", describe(&res.best.config), res.best.mean_validation());
            }
            let folds = &res.best.validation_nelbo;
            metrics.insert("best_validation_nelbo".into(), metric(res.best.mean_validation(), std_err(folds)));
            (res.best.config.clone(), res.table)
        }
    };
    let every = (cfg.epochs / 20).max(1);
    let (model, mut record) = train_with(&cfg, &cohort, |epoch, loss, _| {
        if verbose > 1 || (verbose > 0 && (epoch + 1) % every == 0) {
            eprintln!("epoch {:>6} loss {loss:.6}", epoch + 1);
        }
    })?;
    let weights = out.join(WEIGHTS_DIR);
    save_checkpoint(&model, &weights)?;
    record.checkpoint = Some(PathBuf::from(WEIGHTS_DIR));
    let mut trace = create(out, TRACE_FILE)?;
    write_trace(&record, &mut trace).map_err(|e| CliError::io(&out.join(TRACE_FILE), e))?;
    let mut rows = table;
    rows.push(record.clone());
    write_run_table(&rows, create(out, REPORT_FILE)?)?;
    metrics.insert("final_train_nelbo".into(), metric(record.final_train_nelbo, 0.0));
    metrics.insert("param_count".into(), metric(model.param_count() as f64, 0.0));
    write_metrics(out, &metrics)
}

fn read_config_required<T: DeserializeOwned>(p: &Path) -> CliResult<T> {
    let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
}

fn describe(cfg: &TrainConfig) -> String {
    format!("{} Q={} {:?}/{:?} strength={}", cfg.model, cfg.latent_dim, cfg.penalty, cfg.scope, cfg.strength)
}

fn write_trace(record: &RunRecord, w: &mut impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,loss")?;
    for (i, l) in record.loss_trace.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1)?;
    }
    w.flush()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EvalConfig {
    /// Importance samples per patient; 0 skips the estimate.
    is_samples: usize,
    /// Posterior samples averaged in the bound.
    elbo_samples: usize,
    seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            is_samples: DEFAULT_IS_SAMPLES,
            elbo_samples: 1,
            seed: 0,
        }
    }
}

#[derive(Serialize)]
struct EvalSnapshot<'a> {
    data: &'a Path,
    weights: &'a Path,
    baseline: Option<&'a Path>,
    eval: &'a EvalConfig,
}

fn evaluate(a: EvaluateArgs) -> CliResult<()> {
    let mut cfg: EvalConfig = read_config(a.common.config.as_deref())?;
    if let Some(v) = a.is_samples {
        cfg.is_samples = v;
    }
    if let Some(v) = a.elbo_samples {
        cfg.elbo_samples = v;
    }
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    if cfg.elbo_samples == 0 {
        return Err(CliError::config("elbo_samples must be positive"));
    }
    let cohort = load_data(&a.data)?;
    let model = load_model(&a.weights, &cohort)?;
    let baseline = a.baseline.as_deref().map(|p| load_model(p, &cohort)).transpose()?;
    prepare_out(&a.common)?;
    let out = &a.common.out;
    write_snapshot(
        out,
        "evaluate",
        &EvalSnapshot {
            data: &a.data,
            weights: &a.weights,
            baseline: a.baseline.as_deref(),
            eval: &cfg,
        },
    )?;

    let mut metrics = MetricsReport::new();
    let nelbo = nelbo_suite(&model, &cohort, cfg.seed, cfg.elbo_samples)?;
    metrics.insert("nelbo".into(), metric(nelbo.mean, nelbo.std_err));
    metrics.insert("nelbo_per_observed_entry".into(), metric(nelbo.per_observed_entry, 0.0));
    let is = if cfg.is_samples > 0 {
        let est: Vec<f64> = is_nll_cohort(&model, &cohort, cfg.is_samples, cfg.seed)?.iter().map(|e| e.estimate).collect();
        metrics.insert("is_nll".into(), metric(est.iter().sum::<f64>() / est.len() as f64, std_err(&est)));
        Some(est)
    } else {
        None
    };
    if let Some(base) = &baseline {
        let nb = nelbo_suite(base, &cohort, cfg.seed, cfg.elbo_samples)?;
        metrics.insert("baseline_nelbo".into(), metric(nb.mean, nb.std_err));
        let pw = pairwise(&nelbo.per_patient, &nb.per_patient)?;
        metrics.insert("pairwise_fraction".into(), metric(pw.fraction, pw.std));
        if let Some(est) = &is {
            let eb: Vec<f64> = is_nll_cohort(base, &cohort, cfg.is_samples, cfg.seed)?.iter().map(|e| e.estimate).collect();
            metrics.insert("baseline_is_nll".into(), metric(eb.iter().sum::<f64>() / eb.len() as f64, std_err(&eb)));
            let (ca, cb) = counts_10nats(est, &eb)?;
            metrics.insert("better_by_10_nats".into(), metric(ca as f64, 0.0));
            metrics.insert("baseline_better_by_10_nats".into(), metric(cb as f64, 0.0));
        }
    }
    if a.common.verbose > 0 {
        eprintln!("NELBO {:.4} ± {:.4} over {} patients", nelbo.mean, nelbo.std_err, cohort.len());
    }
    let report = per_feature_report(&model, &cohort, cfg.seed)?;
    write_feature_csv(&report, create(out, REPORT_FILE)?)?;
    if model.kind().family() == Family::Ssm {
        if let Some(labels) = model.mechanism_labels() {
            let table = attention_summary(&model, &cohort, cfg.seed)?;
            write_attention_csv(&table, &labels, create(out, ATTENTION_FILE)?)?;
        }
    }
    write_metrics(out, &metrics)
}

#[derive(Serialize)]
struct ForecastSnapshot<'a> {
    data: &'a Path,
    weights: &'a Path,
    seed: u64,
    specs: &'a [(String, ForecastSpec)],
}

fn run_forecast(a: ForecastArgs) -> CliResult<()> {
    let file: Option<ForecastSpec> = match &a.common.config {
        Some(p) => Some(read_config_required(p)?),
        None => None,
    };
    let mut specs: Vec<(String, ForecastSpec)> = match (a.c, a.f, file) {
        (Some(c), Some(f), _) => vec![(format!("c{c}-f{f}"), ForecastSpec::new(c, f))],
        (_, _, Some(s)) => vec![(format!("c{}-f{}", s.c, s.f), s)],
        _ => ForecastSpec::presets().into_iter().map(|(n, s)| (n.to_string(), s)).collect(),
    };
    if let Some(r) = a.rollouts {
        specs.iter_mut().for_each(|(_, s)| s.n_rollouts = r);
    }
    let seed = a.common.seed.unwrap_or(0);
    let cohort = load_data(&a.data)?;
    let model = load_model(&a.weights, &cohort)?;
    prepare_out(&a.common)?;
    let out = &a.common.out;
    write_snapshot(
        out,
        "forecast",
        &ForecastSnapshot {
            data: &a.data,
            weights: &a.weights,
            seed,
            specs: &specs,
        },
    )?;
    let mut metrics = MetricsReport::new();
    let mut report = create(out, REPORT_FILE)?;
    let io = |e: std::io::Error| CliError::io(&out.join(REPORT_FILE), e);
    writeln!(report, "forecast,C,F,rollouts,included,skipped,mean_l1").map_err(io)?;
    for (name, spec) in &specs {
        let res = forecast(&model, &cohort, *spec, seed)?;
        write_trajectories_csv(&res, create(out, &format!("trajectories_{name}.csv"))?)?;
        metrics.insert(format!("l1_{name}"), metric(res.mean_l1(), std_err(&res.l1)));
        writeln!(
            report,
            "{name},{},{},{},{},{},{}",
            spec.c,
            spec.f,
            spec.n_rollouts,
            res.included.len(),
            res.skipped.len(),
            res.mean_l1()
        )
        .map_err(io)?;
        if a.common.verbose > 0 {
            eprintln!("{name}: {} patients, {} skipped, L1 {:.4}", res.included.len(), res.skipped.len(), res.mean_l1());
        }
    }
    report.flush().map_err(io)?;
    write_metrics(out, &metrics)
}

#[derive(Serialize)]
struct AblateSnapshot<'a> {
    data: &'a Path,
    train: &'a TrainConfig,
    folds: usize,
    jobs: usize,
}

fn ablate(a: AblateArgs) -> CliResult<()> {
    let base = resolve_train(&a.common, &a.train)?;
    let cohort = load_data(&a.data)?;
    prepare_out(&a.common)?;
    let out = &a.common.out;
    write_snapshot(
        out,
        "ablate",
        &AblateSnapshot {
            data: &a.data,
            train: &base,
            folds: a.folds,
            jobs: a.jobs,
        },
    )?;
    let rows = ablation_suite(&base, &cohort, a.folds, a.jobs)?;
    write_ablation_csv(&rows, create(out, REPORT_FILE)?)?;
    let metrics = rows
        .iter()
        .map(|r| (format!("nelbo_{}", r.variant), metric(r.mean, std_err(&r.fold_nelbo))))
        .collect();
    write_metrics(out, &metrics)
}
