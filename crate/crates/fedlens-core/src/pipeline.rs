//! End-to-end experiment orchestration: materialize partitions, run the
//! analytics queries, select the training cohort, train both arms (selected
//! cohort and all-clients baseline) from bit-identical initial parameters,
//! and emit a replayable report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{gen_synthetic, load_csv, DataError, PartitionSpec, SyntheticSpec};
use crate::federation::{
    run_client, standardized_trainset, Federation, FederationError, StandardizeStats,
};
use crate::fl::{evaluate_mae, fedavg, FlError, Loss, ModelParams, TrainConfig};
use crate::model::{ClientDataset, Schema};
use crate::query::{
    execute_query, Aggregation, FeatureSelection, Kernel, QueryCategory, QueryError, QuerySpec,
    QueryValue,
};
use crate::rng::{fnv1a, mix};
use crate::selection::{
    build_selection_matrix, select, selected_ids, SelectionCriteria, SelectionError,
    SelectionMatrix, SelectionVerdict,
};
use crate::stats::SkewnessConvention;
use crate::transport::sim::{sim_pair, Latency, LinkModel};
use crate::transport::tcp::{TcpAcceptor, TcpConn};
use crate::transport::Connection;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("feature {0:?} has zero pooled variance")]
    DegenerateFeature(String),
    #[error("selection criteria rejected every client")]
    EmptySelection,
    #[error("configuration: {0}")]
    Config(String),
    #[error("replay mismatch: {0}")]
    ReplayMismatch(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Selection(#[from] SelectionError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error(transparent)]
    Federation(#[from] FederationError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum DataSource {
    Csv {
        path: String,
        #[serde(default)]
        schema_path: Option<String>,
        partition: PartitionSpec,
    },
    Synthetic {
        #[serde(default = "SyntheticSpec::default_firewall")]
        spec: SyntheticSpec,
    },
}

fn default_hidden() -> Vec<usize> {
    vec![24, 12, 6]
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "TrainSection::default_rounds")]
    pub rounds: usize,
    #[serde(default = "TrainSection::default_local_epochs")]
    pub local_epochs: usize,
    #[serde(default = "TrainSection::default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "TrainSection::default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "TrainSection::default_loss")]
    pub loss: Loss,
    /// Defaults to a stream derived from the experiment seed.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TrainSection {
    fn default_rounds() -> usize {
        50
    }
    fn default_local_epochs() -> usize {
        2
    }
    fn default_batch_size() -> usize {
        32
    }
    fn default_learning_rate() -> f64 {
        0.01
    }
    fn default_loss() -> Loss {
        Loss::L1
    }

    fn validate(&self) -> Result<(), PipelineError> {
        if self.rounds == 0 || self.local_epochs == 0 || self.batch_size == 0 {
            return Err(PipelineError::Config("train counts must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(PipelineError::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            rounds: Self::default_rounds(),
            local_epochs: Self::default_local_epochs(),
            batch_size: Self::default_batch_size(),
            learning_rate: Self::default_learning_rate(),
            loss: Self::default_loss(),
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSection {
    #[serde(default = "SelectionSection::default_min_samples")]
    pub min_samples: u64,
    #[serde(default = "SelectionSection::default_skew_low")]
    pub skew_low: f64,
    #[serde(default = "SelectionSection::default_skew_high")]
    pub skew_high: f64,
    #[serde(default)]
    pub features_considered: crate::selection::FeatureFilter,
    #[serde(default = "SelectionSection::default_convention")]
    pub skew_convention: SkewnessConvention,
}

impl SelectionSection {
    fn default_min_samples() -> u64 {
        300
    }
    fn default_skew_low() -> f64 {
        -1.0
    }
    fn default_skew_high() -> f64 {
        1.0
    }
    fn default_convention() -> SkewnessConvention {
        SkewnessConvention::Adjusted
    }

    fn criteria(&self) -> Result<SelectionCriteria, PipelineError> {
        let mut criteria = SelectionCriteria::new(self.min_samples, self.skew_low, self.skew_high)?;
        criteria.features_considered = self.features_considered.clone();
        Ok(criteria)
    }
}

impl Default for SelectionSection {
    fn default() -> Self {
        SelectionSection {
            min_samples: Self::default_min_samples(),
            skew_low: Self::default_skew_low(),
            skew_high: Self::default_skew_high(),
            features_considered: Default::default(),
            skew_convention: Self::default_convention(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportSection {
    #[serde(default = "TransportSection::default_latency")]
    pub latency: Latency,
    #[serde(default)]
    pub drop_probability: f64,
    #[serde(default = "default_timeout_ms")]
    pub query_timeout_ms: u64,
    /// Listen address for TCP servers.
    #[serde(default)]
    pub bind: Option<String>,
    /// Server address for TCP clients.
    #[serde(default)]
    pub connect: Option<String>,
}

impl TransportSection {
    fn default_latency() -> Latency {
        Latency::FixedMs(0)
    }
}

impl Default for TransportSection {
    fn default() -> Self {
        TransportSection {
            latency: Self::default_latency(),
            drop_probability: 0.0,
            query_timeout_ms: default_timeout_ms(),
            bind: None,
            connect: None,
        }
    }
}

/// Fully describes one experiment; embedded verbatim in the report so a run
/// can be replayed from its own output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// CLI log verbosity; the --log-level flag overrides it.
    #[serde(default)]
    pub log_level: Option<String>,
    #[serde(default = "default_true")]
    pub baseline: bool,
    #[serde(default)]
    pub secure_aggregation: bool,
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    pub data: DataSource,
    #[serde(default)]
    pub selection: SelectionSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub transport: TransportSection,
}

impl ExperimentConfig {
    /// The default desk-scale synthetic experiment.
    pub fn default_synthetic(seed: u64) -> Self {
        ExperimentConfig {
            seed,
            out_dir: None,
            log_level: None,
            baseline: true,
            secure_aggregation: false,
            hidden_layers: default_hidden(),
            data: DataSource::Synthetic { spec: SyntheticSpec::default_firewall() },
            selection: SelectionSection::default(),
            train: TrainSection::default(),
            transport: TransportSection::default(),
        }
    }

    /// Fills derived defaults (train seed) and validates.
    pub fn resolve(mut self) -> Result<Self, PipelineError> {
        self.train.validate()?;
        if self.train.seed.is_none() {
            self.train.seed = Some(mix(self.seed, &[0x7261696e]));
        }
        if self.hidden_layers.is_empty() {
            return Err(PipelineError::Config("need at least one hidden layer".into()));
        }
        if !(0.0..1.0).contains(&self.transport.drop_probability) {
            return Err(PipelineError::Config("drop probability must be in [0, 1)".into()));
        }
        self.selection.criteria()?;
        Ok(self)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            rounds: self.train.rounds,
            local_epochs: self.train.local_epochs,
            batch_size: self.train.batch_size,
            learning_rate: self.train.learning_rate,
            seed: self.train.seed.expect("resolved"),
            loss: self.train.loss,
        }
    }

    pub fn schema(&self) -> Result<Schema, PipelineError> {
        match &self.data {
            DataSource::Synthetic { spec } => Ok(spec.schema.clone()),
            DataSource::Csv { schema_path, .. } => match schema_path {
                None => Ok(Schema::firewall()),
                Some(path) => {
                    let text = std::fs::read_to_string(path)?;
                    Ok(serde_json::from_str(&text)?)
                }
            },
        }
    }
}

/// Builds the client partitions and the server-held holdout for a config.
/// Both federation modes call this: in sim mode the spawner hands each actor
/// its partition, in TCP mode each client process derives its own from the
/// shared config and its assigned id.
pub fn materialize_data(
    cfg: &ExperimentConfig,
) -> Result<(Vec<ClientDataset>, ClientDataset), PipelineError> {
    let (clients, holdout) = match &cfg.data {
        DataSource::Synthetic { spec } => gen_synthetic(spec, cfg.seed)?,
        DataSource::Csv { path, partition, .. } => {
            let schema = cfg.schema()?;
            let pooled = load_csv(path, &schema)?;
            crate::data::partition(&pooled, partition)?
        }
    };
    check_holdout_disjoint(&clients, &holdout)?;
    Ok((clients, holdout))
}

fn row_hash(row: &[f64]) -> u64 {
    let bytes: Vec<u8> = row.iter().flat_map(|v| v.to_le_bytes()).collect();
    fnv1a(&bytes)
}

fn check_holdout_disjoint(
    clients: &[ClientDataset],
    holdout: &ClientDataset,
) -> Result<(), PipelineError> {
    let held: std::collections::BTreeSet<u64> = holdout.rows.iter().map(|r| row_hash(r)).collect();
    for ds in clients {
        for row in &ds.rows {
            if held.contains(&row_hash(row)) {
                return Err(PipelineError::Config(format!(
                    "holdout row leaked into client {}",
                    ds.client_id
                )));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeCurves {
    pub fa_assisted_raw: Vec<f64>,
    pub fa_assisted_normalized: Vec<f64>,
    #[serde(default)]
    pub baseline_raw: Vec<f64>,
    #[serde(default)]
    pub baseline_normalized: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub epoch: u64,
    pub total_samples: f64,
    pub standardization: StandardizeStats,
    pub selection_matrix: SelectionMatrix,
    pub verdicts: Vec<SelectionVerdict>,
    pub selected: Vec<u64>,
    pub curves: MaeCurves,
    pub final_fa_assisted_mae: f64,
    pub final_baseline_mae: Option<f64>,
    /// SHA-256 over the deterministic sections; replay re-derives it.
    pub digest: String,
    pub timings_ms: BTreeMap<String, f64>,
    pub created_unix_ms: u64,
}

/// Key-sorted JSON of the deterministic report sections. The output
/// directory is an artifact location, not an experiment parameter, so it is
/// volatile like the timings.
fn deterministic_json(report: &ExperimentReport) -> Result<String, PipelineError> {
    let mut value = serde_json::to_value(report)?;
    let obj = value.as_object_mut().expect("report is an object");
    obj.remove("timings_ms");
    obj.remove("created_unix_ms");
    obj.remove("digest");
    if let Some(config) = obj.get_mut("config").and_then(|c| c.as_object_mut()) {
        config.remove("out_dir");
        config.remove("log_level");
    }
    Ok(serde_json::to_string(&value)?)
}

fn digest_of(report: &ExperimentReport) -> Result<String, PipelineError> {
    let json = deterministic_json(report)?;
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

struct StageClock {
    timings: BTreeMap<String, f64>,
    started: Instant,
}

impl StageClock {
    fn new() -> Self {
        StageClock { timings: BTreeMap::new(), started: Instant::now() }
    }

    fn stage<T>(
        &mut self,
        name: &str,
        f: impl FnOnce() -> Result<T, PipelineError>,
    ) -> Result<T, PipelineError> {
        let begin = Instant::now();
        let out = f()?;
        self.timings
            .insert(name.to_string(), begin.elapsed().as_secs_f64() * 1e3);
        Ok(out)
    }

    fn finish(mut self) -> BTreeMap<String, f64> {
        self.timings
            .insert("total".into(), self.started.elapsed().as_secs_f64() * 1e3);
        self.timings
    }
}

fn scalar_of(value: &QueryValue) -> Result<f64, PipelineError> {
    match value {
        QueryValue::Scalar(x) => Ok(*x),
        QueryValue::Vector(v) if v.len() == 1 => Ok(v[0]),
        other => Err(PipelineError::Config(format!(
            "expected scalar query answer, got {other:?}"
        ))),
    }
}

/// Pooled per-feature standardization statistics from a merged moments
/// query; population std, target split out from the predictors.
fn standardize_from_bundle(
    schema: &Schema,
    bundle: &[crate::stats::FeatureStats],
) -> Result<StandardizeStats, PipelineError> {
    let mut means = BTreeMap::new();
    let mut stds = BTreeMap::new();
    for fs in bundle {
        let variance = fs.sketch.variance_population();
        if variance <= 0.0 {
            return Err(PipelineError::DegenerateFeature(fs.feature.clone()));
        }
        means.insert(fs.feature.clone(), fs.sketch.mean);
        stds.insert(fs.feature.clone(), variance.sqrt());
    }
    let fetch = |name: &str| -> Result<(f64, f64), PipelineError> {
        match (means.get(name), stds.get(name)) {
            (Some(&m), Some(&s)) => Ok((m, s)),
            _ => Err(PipelineError::DegenerateFeature(name.to_string())),
        }
    };
    let mut predictor_means = Vec::new();
    let mut predictor_stds = Vec::new();
    for (_, name) in schema.numeric_predictors() {
        let (m, s) = fetch(name)?;
        predictor_means.push(m);
        predictor_stds.push(s);
    }
    let (target_mean, target_std) = fetch(schema.target())?;
    Ok(StandardizeStats { predictor_means, predictor_stds, target_mean, target_std })
}

fn run_arm(
    federation: &mut Federation,
    cohort: &[u64],
    initial: &ModelParams,
    train: &TrainConfig,
    standardize: &StandardizeStats,
    holdout: &crate::fl::TrainSet,
) -> Result<(Vec<f64>, Vec<f64>), PipelineError> {
    let mut params = initial.clone();
    let mut normalized = Vec::with_capacity(train.rounds);
    let mut raw = Vec::with_capacity(train.rounds);
    for round in 0..train.rounds {
        let round_cfg = TrainConfig {
            seed: mix(train.seed, &[round as u64]),
            ..train.clone()
        };
        let updates =
            federation.training_round(round as u64, cohort, &params, &round_cfg, standardize)?;
        params = fedavg(&updates)?;
        let mae = evaluate_mae(&params, holdout)?;
        normalized.push(mae);
        raw.push(mae * standardize.target_std);
    }
    Ok((normalized, raw))
}

/// Drives every stage over an already-formed federation. The holdout stays
/// on the server and is standardized with the broadcast statistics.
pub fn run_experiment_over(
    federation: &mut Federation,
    holdout: &ClientDataset,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport, PipelineError> {
    let schema = cfg.schema()?;
    if schema.target_column().is_none() {
        return Err(PipelineError::Config(format!(
            "target {:?} must be a numeric feature",
            schema.target()
        )));
    }
    let all_clients = federation.client_ids();
    let mut clock = StageClock::new();

    // Pooled moments for standardization; merged, never per-client.
    let standardization = {
        let spec = QuerySpec {
            query_id: "standardize-moments".into(),
            category: QueryCategory::StatisticalTesting,
            kernel: Kernel::Moments { features: FeatureSelection::All },
            aggregation: Aggregation::Addition,
            cohort: all_clients.clone(),
            secure: false,
        };
        let result = clock.stage("standardize", || Ok(execute_query(&spec, federation)?))?;
        match &result.aggregated {
            QueryValue::Bundle(bundle) => standardize_from_bundle(&schema, bundle)?,
            other => {
                return Err(PipelineError::Config(format!(
                    "moments query returned {other:?}"
                )))
            }
        }
    };

    // Federation-wide sample count; masked when secure aggregation is on.
    let total_samples = {
        let spec = QuerySpec {
            query_id: "total-count".into(),
            category: QueryCategory::StatisticalTesting,
            kernel: Kernel::Count,
            aggregation: Aggregation::Addition,
            cohort: all_clients.clone(),
            secure: cfg.secure_aggregation && all_clients.len() >= 2,
        };
        let result = clock.stage("count", || Ok(execute_query(&spec, federation)?))?;
        scalar_of(&result.aggregated)?
    };

    // Per-client analytics matrix on raw units.
    let (selection_matrix, verdicts, selected) = {
        let spec = QuerySpec {
            query_id: "selection-profile".into(),
            category: QueryCategory::StatisticalTesting,
            kernel: Kernel::StatsProfile { convention: cfg.selection.skew_convention },
            aggregation: Aggregation::Cumulative,
            cohort: all_clients.clone(),
            secure: false,
        };
        let result = clock.stage("fa_query", || Ok(execute_query(&spec, federation)?))?;
        let matrix = build_selection_matrix(&result)?;
        let criteria = cfg.selection.criteria()?;
        let verdicts = clock.stage("selection", || Ok(select(&matrix, &criteria)?))?;
        let selected = selected_ids(&verdicts);
        if selected.is_empty() {
            return Err(PipelineError::EmptySelection);
        }
        (matrix, verdicts, selected)
    };

    // Both arms start from bit-identical parameters.
    let predictors = schema.numeric_predictors().len();
    let mut layout = vec![predictors];
    layout.extend(&cfg.hidden_layers);
    layout.push(1);
    let initial = ModelParams::init(mix(cfg.seed, &[0x696e6974]), &layout)?;
    let train = cfg.train_config();
    let holdout_set = standardized_trainset(holdout, &standardization)?;
    if holdout_set.is_empty() {
        return Err(PipelineError::Fl(FlError::EmptyEvalSet));
    }

    let (fa_norm, fa_raw) = clock.stage("fl_fa_assisted", || {
        run_arm(federation, &selected, &initial, &train, &standardization, &holdout_set)
    })?;
    let (base_norm, base_raw) = if cfg.baseline {
        clock.stage("fl_baseline", || {
            run_arm(federation, &all_clients, &initial, &train, &standardization, &holdout_set)
        })?
    } else {
        (Vec::new(), Vec::new())
    };

    let final_fa = *fa_raw.last().expect("rounds >= 1");
    let final_base = base_raw.last().copied();
    let mut report = ExperimentReport {
        config: cfg.clone(),
        epoch: federation.epoch_value(),
        total_samples,
        standardization,
        selection_matrix,
        verdicts,
        selected,
        curves: MaeCurves {
            fa_assisted_raw: fa_raw,
            fa_assisted_normalized: fa_norm,
            baseline_raw: base_raw,
            baseline_normalized: base_norm,
        },
        final_fa_assisted_mae: final_fa,
        final_baseline_mae: final_base,
        digest: String::new(),
        timings_ms: BTreeMap::new(),
        created_unix_ms: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    };
    report.digest = digest_of(&report)?;
    report.timings_ms = clock.finish();
    Ok(report)
}

fn link_for(cfg: &ExperimentConfig, index: u64, to_client: bool) -> LinkModel {
    LinkModel {
        latency: cfg.transport.latency,
        drop_probability: cfg.transport.drop_probability,
        seed: mix(cfg.seed, &[0x6c696e6b, index, to_client as u64]),
    }
}

/// Runs the whole experiment in-process: client actors on threads, messages
/// over seeded simulated links.
pub fn run_experiment_sim(cfg: &ExperimentConfig) -> Result<ExperimentReport, PipelineError> {
    let cfg = cfg.clone().resolve()?;
    let (datasets, holdout) = materialize_data(&cfg)?;
    let shared = Arc::new(datasets);

    let mut server_conns: Vec<Box<dyn Connection>> = Vec::new();
    let mut handles = Vec::new();
    for i in 0..shared.len() {
        let (server_end, client_end) = sim_pair(
            link_for(&cfg, i as u64, true),
            link_for(&cfg, i as u64, false),
        );
        server_conns.push(Box::new(server_end));
        let data = shared.clone();
        handles.push(std::thread::spawn(move || {
            let _ = run_client(client_end, "intra", move |id| {
                data.iter()
                    .find(|d| d.client_id == id)
                    .cloned()
                    .ok_or_else(|| FederationError::Protocol(format!("no partition for {id}")))
            });
        }));
    }

    let timeout = Duration::from_millis(cfg.transport.query_timeout_ms);
    let mut federation = Federation::form(server_conns, cfg.seed, timeout)?;
    let report = run_experiment_over(&mut federation, &holdout, &cfg);
    federation.shutdown();
    for handle in handles {
        let _ = handle.join();
    }
    report
}

/// TCP-mode server: accepts one connection per expected client, then runs
/// the same stages as sim mode.
pub fn serve_experiment_tcp(
    cfg: &ExperimentConfig,
    bind: &str,
) -> Result<ExperimentReport, PipelineError> {
    let acceptor =
        TcpAcceptor::bind(bind).map_err(|e| PipelineError::Federation(e.into()))?;
    serve_experiment_on(acceptor, cfg)
}

/// TCP-mode server over an already-bound listener.
pub fn serve_experiment_on(
    acceptor: TcpAcceptor,
    cfg: &ExperimentConfig,
) -> Result<ExperimentReport, PipelineError> {
    let cfg = cfg.clone().resolve()?;
    let (datasets, holdout) = materialize_data(&cfg)?;
    log::info!(
        "listening on {} for {} clients",
        acceptor.local_addr().map(|a| a.to_string()).unwrap_or_default(),
        datasets.len()
    );
    let mut conns: Vec<Box<dyn Connection>> = Vec::new();
    for _ in 0..datasets.len() {
        let conn = acceptor
            .accept()
            .map_err(|e| PipelineError::Federation(e.into()))?;
        conns.push(Box::new(conn));
    }
    let timeout = Duration::from_millis(cfg.transport.query_timeout_ms);
    let mut federation = Federation::form(conns, cfg.seed, timeout)?;
    let report = run_experiment_over(&mut federation, &holdout, &cfg);
    federation.shutdown();
    report
}

/// TCP-mode client: registers, derives its partition from the shared config
/// and the assigned id, then serves queries and training rounds until BYE.
pub fn run_client_tcp(cfg: &ExperimentConfig, connect: &str) -> Result<(), PipelineError> {
    let cfg = cfg.clone().resolve()?;
    let conn = TcpConn::connect(connect).map_err(|e| PipelineError::Federation(e.into()))?;
    run_client(conn, "intra", move |id| {
        let (datasets, _) = materialize_data(&cfg)
            .map_err(|e| FederationError::Protocol(format!("cannot build partition: {e}")))?;
        datasets
            .into_iter()
            .find(|d| d.client_id == id)
            .ok_or_else(|| FederationError::Protocol(format!("no partition for client {id}")))
    })?;
    Ok(())
}

/// Pretty, key-sorted JSON rendering of a report.
pub fn report_to_json(report: &ExperimentReport) -> Result<String, PipelineError> {
    let value = serde_json::to_value(report)?;
    Ok(serde_json::to_string_pretty(&value)?)
}

/// Writes `report.json` and `metrics.csv` into a directory.
pub fn write_report(dir: impl AsRef<Path>, report: &ExperimentReport) -> Result<PathBuf, PipelineError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let report_path = dir.join("report.json");
    std::fs::write(&report_path, report_to_json(report)?)?;

    let mut csv = String::from("round,fa_assisted_mae,baseline_mae\n");
    for (i, fa) in report.curves.fa_assisted_raw.iter().enumerate() {
        let base = report
            .curves
            .baseline_raw
            .get(i)
            .map(|b| b.to_string())
            .unwrap_or_default();
        csv.push_str(&format!("{},{},{}\n", i + 1, fa, base));
    }
    std::fs::write(dir.join("metrics.csv"), csv)?;
    Ok(report_path)
}

pub fn load_report(path: impl AsRef<Path>) -> Result<ExperimentReport, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

/// Re-runs an experiment from a report's embedded config and verifies the
/// deterministic sections are byte-identical.
pub fn replay(report: &ExperimentReport) -> Result<(), PipelineError> {
    let stored_digest = digest_of(report)?;
    if stored_digest != report.digest {
        return Err(PipelineError::ReplayMismatch(
            "report digest does not match its own contents (tampered?)".into(),
        ));
    }
    let rerun = run_experiment_sim(&report.config)?;
    if rerun.digest != report.digest {
        let detail = first_difference(report, &rerun);
        return Err(PipelineError::ReplayMismatch(format!(
            "re-executed digest {} != stored {} ({detail})",
            rerun.digest, report.digest
        )));
    }
    Ok(())
}

fn first_difference(a: &ExperimentReport, b: &ExperimentReport) -> String {
    if a.selected != b.selected {
        return format!("selected set {:?} vs {:?}", a.selected, b.selected);
    }
    for (i, (x, y)) in a
        .curves
        .fa_assisted_raw
        .iter()
        .zip(&b.curves.fa_assisted_raw)
        .enumerate()
    {
        if x != y {
            return format!("fa_assisted curve diverges at round {}: {x} vs {y}", i + 1);
        }
    }
    for (i, (x, y)) in a
        .curves
        .baseline_raw
        .iter()
        .zip(&b.curves.baseline_raw)
        .enumerate()
    {
        if x != y {
            return format!("baseline curve diverges at round {}: {x} vs {y}", i + 1);
        }
    }
    "sections differ outside the curves".into()
}
