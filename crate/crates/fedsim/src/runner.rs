//! Experiment runners behind the CLI: `federation`, `centralized`, and
//! `clients-only`, plus round-log emission in stdout, CSV, or JSON form.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::algorithms::{Registry, ResolvedAlgorithm};
use crate::config::{
    AlgorithmConfig, DatasetSource, ExperimentConfig, LogFormat,
};
use crate::data::{self, Dataset, Partition, PartitionSpec, PartitionStrategy};
use crate::error::{Error, Result};
use crate::evaluation::{combine_client_scores, metrics, EvalSchedule, MetricScope};
use crate::models::{self, ModelParams};
use crate::protocol::{
    build_federation, train_on, EvalScope, EvalSettings, FederationConfig, FederationResult,
    FitOptions, LocalWorkSpec, RoundRecord, WorkMode,
};
use crate::rng;

/// Which experiment the CLI runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentType {
    Federation,
    Centralized,
    ClientsOnly,
}

impl ExperimentType {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentType::Federation => "federation",
            ExperimentType::Centralized => "centralized",
            ExperimentType::ClientsOnly => "clients-only",
        }
    }
}

fn build_dataset(exp: &ExperimentConfig) -> Result<Dataset> {
    match exp.dataset.source {
        DatasetSource::Blobs => data::generate_blobs(
            exp.dataset.n_samples,
            exp.dataset.n_features,
            exp.dataset.n_classes,
            exp.dataset.separation,
            exp.seed,
        ),
        DatasetSource::Csv => data::load_csv(
            exp.dataset.path.as_ref().expect("validated"),
            exp.dataset.label_column.as_ref().expect("validated"),
        ),
    }
}

fn check_model_matches(alg: &AlgorithmConfig, dataset: &Dataset) -> Result<()> {
    if alg.model.input_size() != dataset.n_features() {
        return Err(Error::config(
            "model.layer_sizes",
            format!(
                "model input size {} does not match the {} dataset features",
                alg.model.input_size(),
                dataset.n_features()
            ),
        ));
    }
    if alg.model.output_size() != dataset.n_classes {
        return Err(Error::config(
            "model.layer_sizes",
            format!(
                "model output size {} does not match the {} dataset classes",
                alg.model.output_size(),
                dataset.n_classes
            ),
        ));
    }
    Ok(())
}

fn eval_settings(exp: &ExperimentConfig) -> Result<EvalSettings> {
    Ok(EvalSettings {
        schedule: EvalSchedule::new(exp.eval.frequency)?,
        scope: exp.eval.scope,
        client_mean_weighted: exp.eval.client_mean_weighted,
    })
}

/// IID slices of the shared test set, one per client.
fn client_test_slices(test: &Dataset, n_clients: usize, seed: u64) -> Result<Vec<Option<Dataset>>> {
    use rand::Rng;
    let slice_seed = rng::stream(seed, "client-test-split").gen::<u64>();
    let part = data::partition(
        test,
        n_clients,
        &PartitionSpec {
            strategy: PartitionStrategy::Iid,
            seed: slice_seed,
        },
    )?;
    (0..n_clients)
        .map(|c| part.client_dataset(test, c).map(Some))
        .collect()
}

fn warn_if_device_set(exp: &ExperimentConfig) {
    if let Some(device) = &exp.device {
        log::warn!("`device: {device}` is accepted for compatibility and ignored");
    }
}

/// The `federation` experiment: partition, federate, aggregate per round.
pub fn run_federation(
    exp: &ExperimentConfig,
    resolved: &ResolvedAlgorithm,
    alg: &AlgorithmConfig,
) -> Result<FederationResult> {
    warn_if_device_set(exp);
    let dataset = build_dataset(exp)?;
    check_model_matches(alg, &dataset)?;
    let (train, test) = data::train_test_split(
        &dataset,
        exp.dataset.test_fraction,
        exp.dataset.stratified,
        exp.seed,
    )?;
    let spec = exp.distribution.to_spec(exp.seed)?;
    let partition = data::partition(&train, exp.n_clients, &spec)?;

    let eval = eval_settings(exp)?;
    let client_tests = if matches!(eval.scope, EvalScope::Clients | EvalScope::Both) {
        client_test_slices(&test, exp.n_clients, exp.seed)?
    } else {
        Vec::new()
    };
    let fed = FederationConfig {
        arch: alg.model.clone(),
        work: alg.client.local,
        opt: alg.client.optimizer,
        eligibility: exp.eligibility,
        weighting: alg.weighting(),
        eval,
        seed: exp.seed,
    };
    let mut server = build_federation(
        &fed,
        &train,
        &partition,
        Some(test),
        client_tests,
        resolved.make_server(alg)?,
        |index| {
            resolved
                .make_client(alg, index)
                .expect("client factories are infallible for built-ins")
        },
    )?;
    server.fit(exp.n_rounds)
}

/// One independently training model.
struct Trainee {
    model: ModelParams,
    train: Dataset,
    test: Option<Dataset>,
    rng: rand_chacha::ChaCha20Rng,
}

/// Train isolated models for `units` work units and evaluate on schedule.
/// A unit is one epoch in epochs mode, or `amount` steps in steps mode.
fn run_isolated(
    alg: &AlgorithmConfig,
    trainees: &mut [Trainee],
    units: usize,
    schedule: EvalSchedule,
    scope: MetricScope,
    client_mean_weighted: bool,
) -> Result<Vec<RoundRecord>> {
    let unit_work = match alg.client.local.mode {
        WorkMode::Epochs => LocalWorkSpec {
            mode: WorkMode::Epochs,
            amount: 1,
            batch_size: alg.client.local.batch_size,
        },
        WorkMode::Steps => alg.client.local,
    };
    let mut records = Vec::new();
    for unit in 1..=units {
        for trainee in trainees.iter_mut() {
            let (next, _) = train_on(
                &alg.model,
                trainee.model.clone(),
                &trainee.train,
                &unit_work,
                &alg.client.optimizer,
                &mut trainee.rng,
                FitOptions::default(),
            )?;
            trainee.model = next;
        }
        if !schedule.due(unit, units) {
            continue;
        }
        let mut scores = Vec::new();
        for trainee in trainees.iter() {
            if let Some(test) = &trainee.test {
                let preds = models::predict(&alg.model, &trainee.model, &test.features.view())?;
                scores.push(metrics(&test.labels, &preds, test.n_classes)?);
            }
        }
        let combined = combine_client_scores(&scores, client_mean_weighted)
            .map(|s| s.into_report(unit, scope));
        let (server_metrics, client_metrics) = match scope {
            MetricScope::ServerGlobal => (combined, None),
            MetricScope::ClientMean => (None, combined),
        };
        records.push(RoundRecord {
            round: unit,
            selected: Vec::new(),
            server_metrics,
            client_metrics,
            bytes_down: 0,
            bytes_up: 0,
        });
    }
    Ok(records)
}

fn isolated_result(records: Vec<RoundRecord>, trainees: Vec<Trainee>) -> FederationResult {
    FederationResult {
        rounds: records,
        final_model: trainees.into_iter().next().expect("at least one trainee").model,
        traffic: Default::default(),
    }
}

/// The `centralized` experiment: one model on the whole training set for
/// n_rounds x per-round local work; the data distribution is ignored.
pub fn run_centralized(exp: &ExperimentConfig, alg: &AlgorithmConfig) -> Result<FederationResult> {
    warn_if_device_set(exp);
    log::warn!("centralized run: the `distribution` section is ignored");
    let dataset = build_dataset(exp)?;
    check_model_matches(alg, &dataset)?;
    let (train, test) = data::train_test_split(
        &dataset,
        exp.dataset.test_fraction,
        exp.dataset.stratified,
        exp.seed,
    )?;

    let units = match alg.client.local.mode {
        WorkMode::Epochs => exp.n_rounds * alg.client.local.amount,
        WorkMode::Steps => exp.n_rounds,
    };
    let mut trainees = vec![Trainee {
        model: models::init_params(&alg.model, exp.seed)?,
        train,
        test: Some(test),
        rng: rng::indexed_stream(exp.seed, "client-batching", 0),
    }];
    let records = run_isolated(
        alg,
        &mut trainees,
        units,
        EvalSchedule::new(exp.eval.frequency)?,
        MetricScope::ServerGlobal,
        exp.eval.client_mean_weighted,
    )?;
    Ok(isolated_result(records, trainees))
}

/// The `clients-only` experiment: every client trains alone on its own
/// partition shard for ceil(n_rounds x eligibility x per-round work) units;
/// no communication happens, so traffic is all zeros.
pub fn run_clients_only(exp: &ExperimentConfig, alg: &AlgorithmConfig) -> Result<FederationResult> {
    warn_if_device_set(exp);
    let dataset = build_dataset(exp)?;
    check_model_matches(alg, &dataset)?;
    let (train, test) = data::train_test_split(
        &dataset,
        exp.dataset.test_fraction,
        exp.dataset.stratified,
        exp.seed,
    )?;
    let spec = exp.distribution.to_spec(exp.seed)?;
    let partition: Partition = data::partition(&train, exp.n_clients, &spec)?;
    let client_tests = client_test_slices(&test, exp.n_clients, exp.seed)?;

    // expected number of rounds a client participates in, times local work
    let units = (exp.n_rounds as f64 * exp.eligibility).ceil() as usize
        * alg.client.local.amount;
    let units = match alg.client.local.mode {
        WorkMode::Epochs => units,
        // steps mode: units of `amount` steps each
        WorkMode::Steps => (exp.n_rounds as f64 * exp.eligibility).ceil() as usize,
    };
    let init = models::init_params(&alg.model, exp.seed)?;
    let mut trainees = Vec::with_capacity(exp.n_clients);
    for (index, test) in (0..exp.n_clients).zip(client_tests) {
        trainees.push(Trainee {
            model: init.clone(),
            train: partition.client_dataset(&train, index)?,
            test,
            rng: rng::indexed_stream(exp.seed, "client-batching", index),
        });
    }
    let records = run_isolated(
        alg,
        &mut trainees,
        units,
        EvalSchedule::new(exp.eval.frequency)?,
        MetricScope::ClientMean,
        exp.eval.client_mean_weighted,
    )?;
    Ok(isolated_result(records, trainees))
}

/// One emitted log row; the CSV columns use exactly these names.
#[derive(Debug, Serialize)]
pub struct LogRow {
    pub round: usize,
    pub accuracy: f64,
    pub precision_micro: f64,
    pub precision_macro: f64,
    pub recall_micro: f64,
    pub recall_macro: f64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
}

/// Rows for every evaluated round. When both scopes were evaluated the
/// server row is logged; the full result keeps both.
pub fn log_rows(result: &FederationResult) -> Vec<LogRow> {
    result
        .rounds
        .iter()
        .filter_map(|r| {
            let report = r.server_metrics.or(r.client_metrics)?;
            let s = report.scores;
            Some(LogRow {
                round: r.round,
                accuracy: s.accuracy,
                precision_micro: s.precision_micro,
                precision_macro: s.precision_macro,
                recall_micro: s.recall_micro,
                recall_macro: s.recall_macro,
                f1_micro: s.f1_micro,
                f1_macro: s.f1_macro,
                bytes_down: r.bytes_down,
                bytes_up: r.bytes_up,
            })
        })
        .collect()
}

fn write_csv_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

fn write_json_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(rows)
        .map_err(|e| Error::Protocol(format!("log serialization failed: {e}")))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn print_stdout_log(rows: &[LogRow]) {
    println!(
        "{:>6} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9} {:>12} {:>12}",
        "round",
        "accuracy",
        "prec_mic",
        "prec_mac",
        "rec_mic",
        "rec_mac",
        "f1_mic",
        "f1_mac",
        "bytes_down",
        "bytes_up"
    );
    for r in rows {
        println!(
            "{:>6} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>12} {:>12}",
            r.round,
            r.accuracy,
            r.precision_micro,
            r.precision_macro,
            r.recall_micro,
            r.recall_macro,
            r.f1_micro,
            r.f1_macro,
            r.bytes_down,
            r.bytes_up
        );
    }
}

/// Emit the round log per the logger configuration. `override_path` (the
/// CLI `--log` flag) forces a file and infers the format from the
/// extension (.json for JSON, anything else CSV).
pub fn emit_logs(
    result: &FederationResult,
    exp: &ExperimentConfig,
    override_path: Option<&Path>,
) -> Result<()> {
    let rows = log_rows(result);
    if let Some(path) = override_path {
        if path.extension().is_some_and(|e| e == "json") {
            write_json_log(&rows, path)?;
        } else {
            write_csv_log(&rows, path)?;
        }
        return Ok(());
    }
    match exp.logger.format {
        LogFormat::Stdout => print_stdout_log(&rows),
        LogFormat::Csv => {
            let path = exp.logger.path.as_ref().ok_or_else(|| {
                Error::config("logger.path", "required for the csv logger (or pass --log)")
            })?;
            write_csv_log(&rows, path)?;
        }
        LogFormat::Json => {
            let path = exp.logger.path.as_ref().ok_or_else(|| {
                Error::config("logger.path", "required for the json logger (or pass --log)")
            })?;
            write_json_log(&rows, path)?;
        }
    }
    Ok(())
}

/// Options carried from the command line into a run.
#[derive(Debug, Default)]
pub struct RunOptions {
    pub plugins_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub seed_override: Option<u64>,
}

/// Full CLI entry: parse both configs, resolve the algorithm, run the
/// experiment, and emit logs.
pub fn execute_run(
    exp_path: &Path,
    exp_type: ExperimentType,
    alg_path: &Path,
    options: &RunOptions,
) -> Result<()> {
    let mut exp = crate::config::parse_experiment_config(exp_path)?;
    if let Some(seed) = options.seed_override {
        exp.seed = seed;
    }
    let raw = crate::config::read_algorithm_value(alg_path)?;
    let name = raw
        .get("name")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::config("name", "algorithm file needs a `name` key"))?
        .to_string();
    let registry = Registry::with_builtins();
    let resolved = registry.resolve_with_plugins(&name, options.plugins_dir.as_deref())?;
    let alg = resolved.build_config(raw)?;

    let result = match exp_type {
        ExperimentType::Federation => run_federation(&exp, &resolved, &alg)?,
        ExperimentType::Centralized => run_centralized(&exp, &alg)?,
        ExperimentType::ClientsOnly => run_clients_only(&exp, &alg)?,
    };
    emit_logs(&result, &exp, options.log_path.as_deref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ClientHyperparams, DistributionConfig, ServerHyperparams, StrategyName};
    use crate::models::{max_abs_diff, ModelArchitecture, OptimizerSpec};

    fn test_exp(n_clients: usize, n_rounds: usize, eligibility: f64) -> ExperimentConfig {
        let yaml = format!(
            "dataset:\n  source: blobs\n  n_samples: 200\n  n_features: 4\n  n_classes: 2\n  separation: 6.0\ndistribution:\n  strategy: iid\nn_clients: {n_clients}\nn_rounds: {n_rounds}\neligibility: {eligibility}\nseed: 5\n"
        );
        serde_yaml::from_str(&yaml).unwrap()
    }

    fn test_alg(name: &str, mode: WorkMode, amount: usize) -> AlgorithmConfig {
        AlgorithmConfig {
            name: name.into(),
            model: ModelArchitecture::linear(4, 2),
            client: ClientHyperparams {
                local: LocalWorkSpec {
                    mode,
                    amount,
                    batch_size: 16,
                },
                optimizer: OptimizerSpec {
                    learning_rate: 0.1,
                    ..Default::default()
                },
                mu: None,
            },
            server: ServerHyperparams::default(),
        }
    }

    fn federate(exp: &ExperimentConfig, alg: &AlgorithmConfig) -> FederationResult {
        let registry = Registry::with_builtins();
        let resolved = registry.resolve(&alg.name).unwrap();
        run_federation(exp, &resolved, alg).unwrap()
    }

    #[test]
    fn centralized_equals_single_client_federation() {
        let exp = test_exp(1, 5, 1.0);
        let alg = test_alg("fedavg", WorkMode::Epochs, 2);
        let fed = federate(&exp, &alg);
        let central = run_centralized(&exp, &alg).unwrap();
        let diff = max_abs_diff(&fed.final_model, &central.final_model).unwrap();
        assert!(diff <= 1e-9, "diff {diff}");
        // 5 rounds x 2 epochs = 10 centralized epoch rows
        assert_eq!(central.rounds.len(), 10);
    }

    #[test]
    fn clients_only_budget_and_zero_traffic() {
        let mut exp = test_exp(5, 100, 0.2);
        exp.eval.frequency = 5;
        let alg = test_alg("fedavg", WorkMode::Epochs, 1);
        let result = run_clients_only(&exp, &alg).unwrap();
        // ceil(100 x 0.2) x 1 epoch = 20 units, evaluated at 5,10,15,20
        let evaluated: Vec<usize> = result.rounds.iter().map(|r| r.round).collect();
        assert_eq!(evaluated, vec![5, 10, 15, 20]);
        assert_eq!(result.traffic.totals.total_sent(), 0);
        assert!(result.rounds.iter().all(|r| r.bytes_down == 0 && r.bytes_up == 0));
        assert!(result
            .rounds
            .iter()
            .all(|r| r.client_metrics.is_some() && r.server_metrics.is_none()));
    }

    #[test]
    fn single_client_clients_only_equals_centralized_budget() {
        let exp = test_exp(1, 10, 1.0);
        let alg = test_alg("fedavg", WorkMode::Epochs, 1);
        let solo = run_clients_only(&exp, &alg).unwrap();
        let central = run_centralized(&exp, &alg).unwrap();
        let diff = max_abs_diff(&solo.final_model, &central.final_model).unwrap();
        assert!(diff <= 1e-12, "diff {diff}");
    }

    #[test]
    fn centralized_ignores_the_distribution_section() {
        let mut exp = test_exp(4, 3, 1.0);
        exp.distribution = DistributionConfig {
            strategy: StrategyName::DirichletLabel,
            alpha: Some(0.1),
            beta: None,
            k: None,
            sigma: None,
            seed: None,
        };
        let alg = test_alg("fedavg", WorkMode::Epochs, 1);
        assert!(run_centralized(&exp, &alg).is_ok());
    }

    #[test]
    fn schema_is_identical_across_algorithms() {
        let exp = test_exp(4, 3, 0.5);
        let fedavg_rows = log_rows(&federate(&exp, &test_alg("fedavg", WorkMode::Steps, 2)));
        let mut prox = test_alg("fedprox", WorkMode::Steps, 2);
        prox.client.mu = Some(0.1);
        let fedprox_rows = log_rows(&federate(&exp, &prox));
        assert_eq!(fedavg_rows.len(), fedprox_rows.len());
        for (a, b) in fedavg_rows.iter().zip(&fedprox_rows) {
            assert_eq!(a.round, b.round);
        }
    }

    #[test]
    fn log_row_count_follows_the_schedule() {
        let mut exp = test_exp(4, 12, 0.5);
        exp.eval.frequency = 5;
        let rows = log_rows(&federate(&exp, &test_alg("fedavg", WorkMode::Steps, 1)));
        let rounds: Vec<usize> = rows.iter().map(|r| r.round).collect();
        assert_eq!(rounds, vec![5, 10, 12]);
    }

    #[test]
    fn model_dataset_mismatch_is_a_config_error() {
        let exp = test_exp(2, 2, 1.0);
        let mut alg = test_alg("fedavg", WorkMode::Epochs, 1);
        alg.model = ModelArchitecture::linear(7, 2);
        let registry = Registry::with_builtins();
        let resolved = registry.resolve("fedavg").unwrap();
        let err = run_federation(&exp, &resolved, &alg).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("input size"), "{err}");
    }
}
