//! Deterministic discrete-time simulator of a three-tier deployment:
//! one aggregation server, a layer of clients, and the endpoints that
//! report to them. Months advance in lockstep. Every random draw flows
//! from the config seed through tagged derivations, so a simulation
//! report is a pure function of its config.
//!
//! Month ordering:
//! 1. Retraining deferred from last month's detections runs first, so
//!    the redeployed model serves this month's traffic.
//! 2. Endpoints draw their monthly batch, record F1 with the deployed
//!    model, and feed raw confidences (never labels) to their sentinel.
//!    Detections ship the batch upward and schedule a retrain for the
//!    following month.
//! 3. Periodic strategies retrain at the end of their k-th month using
//!    the batches already evaluated, redeploying in the same month.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ExperimentConfig, StrategyKind};
use crate::detectors::{DetectorError, DriftDetector};
use crate::flame::{
    build_retention_dataset, stability_gradient, stability_static, ConceptStore, FlameError,
    MonitorDecision, MonitorState, StabilityParams, StabilityState, StabilityVariant,
    ThresholdMode,
};
use crate::model::{
    f1_score, init_model, predict_batch, ModelError, ModelParams, TrainHyper, Trainer,
};
use crate::seed;
use crate::stream::{generate_month, ConceptSchedule, LabeledBatch, StreamError};

use rand::seq::SliceRandom;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flame(#[from] FlameError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error("invalid simulation state: {0}")]
    Invalid(String),
}

// =======================================================================
// Topology
// =======================================================================

/// Fixed endpoint-to-client assignment for one run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub n_clients: usize,
    pub n_endpoints: usize,
    /// `endpoint_to_client[e]` is the client endpoint `e` reports to.
    pub endpoint_to_client: Vec<usize>,
}

impl Topology {
    /// Round-robin assignment: endpoint `e` reports to client
    /// `e % n_clients`, so endpoints spread as evenly as possible.
    pub fn round_robin(n_clients: usize, n_endpoints: usize) -> Result<Topology, SimError> {
        if n_clients == 0 {
            return Err(SimError::Invalid("topology needs at least one client".into()));
        }
        let t = Topology {
            n_clients,
            n_endpoints,
            endpoint_to_client: (0..n_endpoints).map(|e| e % n_clients).collect(),
        };
        t.validate()?;
        Ok(t)
    }

    /// Every endpoint maps to an existing client and every client keeps
    /// at least one endpoint.
    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_clients == 0 {
            return Err(SimError::Invalid("topology needs at least one client".into()));
        }
        if self.endpoint_to_client.len() != self.n_endpoints {
            return Err(SimError::Invalid(format!(
                "assignment covers {} endpoints, topology declares {}",
                self.endpoint_to_client.len(),
                self.n_endpoints
            )));
        }
        let mut seen = vec![false; self.n_clients];
        for (e, &c) in self.endpoint_to_client.iter().enumerate() {
            if c >= self.n_clients {
                return Err(SimError::Invalid(format!(
                    "endpoint {e} assigned to unknown client {c}"
                )));
            }
            seen[c] = true;
        }
        if let Some(orphan) = seen.iter().position(|&s| !s) {
            return Err(SimError::Invalid(format!(
                "client {orphan} has no endpoints"
            )));
        }
        Ok(())
    }

    /// Endpoints of one client, ascending.
    pub fn endpoints_of(&self, client: usize) -> Vec<usize> {
        self.endpoint_to_client
            .iter()
            .enumerate()
            .filter(|&(_, &c)| c == client)
            .map(|(e, _)| e)
            .collect()
    }
}

// =======================================================================
// Byte ledger
// =======================================================================

/// A party in the deployment, used as ledger sender/receiver.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Role {
    Server,
    Client(usize),
    Endpoint(usize),
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Role::Server => write!(f, "server"),
            Role::Client(i) => write!(f, "client:{i}"),
            Role::Endpoint(i) => write!(f, "endpoint:{i}"),
        }
    }
}

impl From<Role> for String {
    fn from(r: Role) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Role {
    type Error = String;
    fn try_from(s: String) -> Result<Role, String> {
        if s == "server" {
            return Ok(Role::Server);
        }
        if let Some(i) = s.strip_prefix("client:") {
            return i.parse().map(Role::Client).map_err(|e| e.to_string());
        }
        if let Some(i) = s.strip_prefix("endpoint:") {
            return i.parse().map(Role::Endpoint).map_err(|e| e.to_string());
        }
        Err(format!("unknown role `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferKind {
    /// Server ships model weights down to an endpoint.
    ModelDown,
    /// Endpoint ships a month of raw samples up to its client.
    DataUp,
    /// Client ships trained weights up to the server.
    WeightsUp,
}

impl TransferKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TransferKind::ModelDown => "model_down",
            TransferKind::DataUp => "data_up",
            TransferKind::WeightsUp => "weights_up",
        }
    }
}

/// Weights travel as f32, so a model message is 4 bytes per parameter.
pub fn model_message_bytes(param_count: usize) -> u64 {
    (param_count * 4) as u64
}

/// A data message is 8 bytes per feature plus one label byte per sample.
pub fn data_message_bytes(samples: usize, feature_dim: usize) -> u64 {
    (samples * (feature_dim * 8 + 1)) as u64
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub month: u32,
    pub sender: Role,
    pub receiver: Role,
    pub kind: TransferKind,
    pub bytes: u64,
}

/// Append-only record of every transfer in a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ByteLedger {
    pub entries: Vec<LedgerEntry>,
}

impl ByteLedger {
    pub fn new() -> Self {
        ByteLedger::default()
    }

    pub fn record(&mut self, month: u32, sender: Role, receiver: Role, kind: TransferKind, bytes: u64) {
        debug_assert!(bytes > 0, "zero-byte transfers are never recorded");
        self.entries.push(LedgerEntry {
            month,
            sender,
            receiver,
            kind,
            bytes,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|e| e.bytes).sum()
    }

    pub fn total_of(&self, kind: TransferKind) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.kind == kind)
            .map(|e| e.bytes)
            .sum()
    }

    /// Totals keyed by kind name, for report summaries.
    pub fn totals_by_kind(&self) -> BTreeMap<String, u64> {
        let mut map = BTreeMap::new();
        for k in [TransferKind::DataUp, TransferKind::ModelDown, TransferKind::WeightsUp] {
            map.insert(k.as_str().to_string(), self.total_of(k));
        }
        map
    }
}

// =======================================================================
// Federated averaging
// =======================================================================

/// Sample-count-weighted average of client models. Accumulation runs in
/// client index order so results are bit-reproducible.
pub fn fed_avg(models: &[ModelParams], counts: &[usize]) -> Result<ModelParams, SimError> {
    if models.is_empty() {
        return Err(SimError::Invalid("fed_avg over zero models".into()));
    }
    if models.len() != counts.len() {
        return Err(SimError::Invalid(format!(
            "fed_avg got {} models but {} counts",
            models.len(),
            counts.len()
        )));
    }
    let first = &models[0];
    for m in &models[1..] {
        if m.arch != first.arch || m.dim != first.dim {
            return Err(SimError::Invalid(
                "fed_avg requires identical architectures".into(),
            ));
        }
    }
    if counts.contains(&0) {
        return Err(SimError::Invalid("fed_avg weight of zero samples".into()));
    }
    let total: f64 = counts.iter().map(|&c| c as f64).sum();
    let mut weights = vec![0.0; first.weights.len()];
    for (m, &c) in models.iter().zip(counts) {
        let w = c as f64;
        for (acc, &p) in weights.iter_mut().zip(&m.weights) {
            *acc += w * p;
        }
    }
    for w in &mut weights {
        *w /= total;
    }
    Ok(ModelParams {
        arch: first.arch,
        dim: first.dim,
        weights,
    })
}

// =======================================================================
// Simulation state
// =======================================================================

/// What an endpoint runs against the confidence stream.
enum Sentinel {
    /// `none` and periodic strategies never watch the stream.
    Passive,
    Detector(Box<dyn DriftDetector>),
    Monitor(MonitorState),
}

struct EndpointState {
    client: usize,
    deployed: ModelParams,
    sentinel: Sentinel,
}

struct ClientState {
    params: ModelParams,
    store: ConceptStore,
    /// Training-set size of the latest local fit; the FedAvg weight.
    train_count: usize,
    /// Held-out split of the latest local fit; source of monitor
    /// reference confidences.
    val_set: Option<LabeledBatch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonthRecord {
    pub month: u32,
    pub mean_f1: f64,
    pub endpoint_f1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub month: u32,
    pub endpoint: usize,
    /// Which sentinel fired: a detector name or a monitor mode.
    pub signal: String,
}

/// Everything a run produces; serialized verbatim into `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationReport {
    pub strategy: String,
    pub seed: u64,
    pub months: u32,
    pub train_months: u32,
    pub monthly: Vec<MonthRecord>,
    pub drift_events: Vec<DriftEvent>,
    pub retraining_months: Vec<u32>,
    pub ledger_total_bytes: u64,
    pub ledger_totals: BTreeMap<String, u64>,
    pub ledger: ByteLedger,
    pub warnings: Vec<String>,
    pub config: ExperimentConfig,
}

impl SimulationReport {
    /// Mean of the monthly endpoint-mean F1 over a month range.
    pub fn mean_f1_over(&self, months: std::ops::Range<u32>) -> f64 {
        let vals: Vec<f64> = self
            .monthly
            .iter()
            .filter(|r| months.contains(&r.month))
            .map(|r| r.mean_f1)
            .collect();
        assert!(!vals.is_empty(), "no recorded months in {months:?}");
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// Mean F1 over the whole inference range.
    pub fn mean_f1_inference(&self) -> f64 {
        self.mean_f1_over(self.train_months..self.months)
    }

    /// Mean F1 over the final `k` months (clipped to inference months).
    pub fn mean_f1_final(&self, k: u32) -> f64 {
        let start = self.months.saturating_sub(k).max(self.train_months);
        self.mean_f1_over(start..self.months)
    }
}

pub struct Simulation {
    config: ExperimentConfig,
    strategy: StrategyKind,
    schedule: ConceptSchedule,
    topology: Topology,
    root: u64,
    dim: usize,
    global: ModelParams,
    clients: Vec<ClientState>,
    endpoints: Vec<EndpointState>,
    ledger: ByteLedger,
    /// Uploads received this month, retrained at the start of the next.
    pending: BTreeMap<usize, Vec<LabeledBatch>>,
    monthly: Vec<MonthRecord>,
    drift_events: Vec<DriftEvent>,
    retraining_months: Vec<u32>,
    warnings: Vec<String>,
    month: u32,
    trained: bool,
    /// Audit hook: invert labels before F1 scoring. Decisions must not
    /// change because no strategy component may read labels.
    label_audit: bool,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig, strategy: &StrategyKind) -> Result<Simulation, SimError> {
        let schedule = config
            .validate()
            .map_err(|e| SimError::Invalid(e.to_string()))?;
        let topology = Topology::round_robin(config.topology.n_clients, config.topology.n_endpoints)?;
        let dim = schedule.feature_dim();
        let root = config.seed;
        // The server initializes one model and every party starts from it.
        let init = init_model(config.arch, dim, seed::derive(root, "model-init", &[]));
        let clients = (0..topology.n_clients)
            .map(|_| ClientState {
                params: init.clone(),
                store: ConceptStore::new(),
                train_count: 0,
                val_set: None,
            })
            .collect();
        let endpoints = (0..topology.n_endpoints)
            .map(|e| EndpointState {
                client: topology.endpoint_to_client[e],
                deployed: init.clone(),
                sentinel: Sentinel::Passive,
            })
            .collect();
        Ok(Simulation {
            config: config.clone(),
            strategy: strategy.clone(),
            schedule,
            topology,
            root,
            dim,
            global: init,
            clients,
            endpoints,
            ledger: ByteLedger::new(),
            pending: BTreeMap::new(),
            monthly: Vec::new(),
            drift_events: Vec::new(),
            retraining_months: Vec::new(),
            warnings: Vec::new(),
            month: 0,
            trained: false,
            label_audit: false,
        })
    }

    /// Enable the label-inversion audit (testing hook).
    pub fn set_label_audit(&mut self, on: bool) {
        self.label_audit = on;
    }

    pub fn current_month(&self) -> u32 {
        self.month
    }

    pub fn ledger(&self) -> &ByteLedger {
        &self.ledger
    }

    pub fn global_model(&self) -> &ModelParams {
        &self.global
    }

    fn param_count(&self) -> usize {
        self.config.arch.param_count(self.dim)
    }

    fn stability_variant(&self) -> StabilityVariant {
        match self.strategy {
            StrategyKind::FlameAdaptive => StabilityVariant::Gradient,
            _ => StabilityVariant::Static,
        }
    }

    /// Train every client on its first `train_months` of data, aggregate,
    /// and deploy to all endpoints. All initial transfers are stamped with
    /// the final training month.
    pub fn initial_training(&mut self) -> Result<(), SimError> {
        if self.trained {
            return Err(SimError::Invalid("initial training already ran".into()));
        }
        let tm = self.config.train_months;
        let stamp = tm - 1;
        for c in 0..self.topology.n_clients {
            let mut all: Option<LabeledBatch> = None;
            for m in 0..tm {
                let batch = generate_month(
                    &self.schedule,
                    m,
                    self.config.client_samples_per_month,
                    seed::derive(self.root, "client-data", &[c as u64]),
                )?;
                match &mut all {
                    None => all = Some(batch),
                    Some(acc) => acc.merge(&batch),
                }
            }
            let all = all.expect("train_months >= 1");
            self.clients[c].store.push_concept(all.clone());
            let (train, val) = split_train_val(&all, seed::derive(self.root, "split", &[c as u64, u64::from(stamp)]))?;
            let hyper = TrainHyper {
                seed: seed::derive(self.root, "train", &[c as u64, u64::from(stamp)]),
                ..self.config.hyper
            };
            let (params, _epochs, stable) = train_to_stability(
                &self.clients[c].params,
                &train,
                &val,
                &hyper,
                self.config.weighted_loss,
                self.config.flame.stability,
                self.stability_variant(),
            )?;
            if !stable {
                self.warnings.push(format!(
                    "client {c}: stability not reached within {} epochs (initial training)",
                    hyper.max_epochs
                ));
            }
            self.clients[c].params = params;
            self.clients[c].train_count = train.len();
            self.clients[c].val_set = Some(val);
            self.ledger.record(
                stamp,
                Role::Client(c),
                Role::Server,
                TransferKind::WeightsUp,
                model_message_bytes(self.param_count()),
            );
        }
        let models: Vec<ModelParams> = self.clients.iter().map(|c| c.params.clone()).collect();
        let counts: Vec<usize> = self.clients.iter().map(|c| c.train_count).collect();
        self.global = fed_avg(&models, &counts)?;

        for e in 0..self.topology.n_endpoints {
            self.endpoints[e].deployed = self.global.clone();
            self.ledger.record(
                stamp,
                Role::Server,
                Role::Endpoint(e),
                TransferKind::ModelDown,
                model_message_bytes(self.param_count()),
            );
            self.endpoints[e].sentinel = self.make_sentinel(e)?;
        }
        self.trained = true;
        self.month = tm;
        Ok(())
    }

    /// Build the strategy's per-endpoint watcher against the current
    /// global model.
    fn make_sentinel(&self, endpoint: usize) -> Result<Sentinel, SimError> {
        Ok(match &self.strategy {
            StrategyKind::None | StrategyKind::Periodic { .. } => Sentinel::Passive,
            StrategyKind::Detector { detector } => Sentinel::Detector(
                detector.build(seed::derive(self.root, "detector", &[endpoint as u64]))?,
            ),
            StrategyKind::FlameStatic | StrategyKind::FlameAdaptive => {
                let mode = if matches!(self.strategy, StrategyKind::FlameAdaptive) {
                    ThresholdMode::Adaptive
                } else {
                    ThresholdMode::Static
                };
                let client = self.endpoints[endpoint].client;
                let val = self.clients[client]
                    .val_set
                    .as_ref()
                    .expect("clients are trained before sentinels exist");
                let reference = predict_batch(&self.global, val);
                Sentinel::Monitor(MonitorState::new(reference, self.config.flame.monitor, mode)?)
            }
        })
    }

    /// Advance one month. See the module docs for the phase ordering.
    pub fn simulate_month(&mut self) -> Result<(), SimError> {
        if !self.trained {
            return Err(SimError::Invalid(
                "simulate_month called before initial_training".into(),
            ));
        }
        let m = self.month;
        if m >= self.config.months() {
            return Err(SimError::Invalid(format!(
                "month {m} is past the {}-month schedule",
                self.config.months()
            )));
        }

        // Phase 1: retraining owed from last month's detections.
        if !self.pending.is_empty() {
            let pending = std::mem::take(&mut self.pending);
            let due: Vec<usize> = pending.keys().copied().collect();
            for (c, batches) in pending {
                let mut merged = batches[0].clone();
                for b in &batches[1..] {
                    merged.merge(b);
                }
                self.clients[c].store.push_concept(merged);
                self.retrain_client(c, m)?;
            }
            self.aggregate_and_redeploy(&due, m)?;
            self.retraining_months.push(m);
        }

        // Phase 2: draw, evaluate, monitor.
        let strategy_name = self.strategy.name();
        let mut batches = Vec::with_capacity(self.topology.n_endpoints);
        let mut f1s = Vec::with_capacity(self.topology.n_endpoints);
        for e in 0..self.topology.n_endpoints {
            let batch = generate_month(
                &self.schedule,
                m,
                self.config.endpoint_samples_per_month,
                seed::derive(self.root, "endpoint-data", &[e as u64]),
            )?;
            let confs = predict_batch(&self.endpoints[e].deployed, &batch);
            let f1 = if self.label_audit {
                let flipped: Vec<u8> = batch.labels.iter().map(|&l| 1 - l).collect();
                f1_score(&confs, &flipped)
            } else {
                f1_score(&confs, &batch.labels)
            };
            f1s.push(f1);

            // Sentinels see confidences only; labels stay on the endpoint.
            let signal: Option<String> = match &mut self.endpoints[e].sentinel {
                Sentinel::Passive => None,
                Sentinel::Detector(d) => {
                    let mut hit = false;
                    for &p in &confs {
                        if d.update(p) {
                            hit = true;
                        }
                    }
                    hit.then(|| d.name().to_string())
                }
                Sentinel::Monitor(mon) => (mon.update(&confs)? == MonitorDecision::Drift)
                    .then(|| strategy_name.clone()),
            };
            if let Some(signal) = signal {
                self.drift_events.push(DriftEvent {
                    month: m,
                    endpoint: e,
                    signal,
                });
                // The upload feeds next month's retraining; a detection in
                // the final month has no next month, so nothing ships.
                if m + 1 < self.config.months() {
                    let c = self.endpoints[e].client;
                    self.ledger.record(
                        m,
                        Role::Endpoint(e),
                        Role::Client(c),
                        TransferKind::DataUp,
                        data_message_bytes(batch.len(), self.dim),
                    );
                    self.pending.entry(c).or_default().push(batch.clone());
                }
            }
            batches.push(batch);
        }
        let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
        self.monthly.push(MonthRecord {
            month: m,
            mean_f1: mean,
            endpoint_f1: f1s,
        });

        // Phase 3: scheduled retraining, same-month redeploy.
        let periodic_k = match &self.strategy {
            StrategyKind::Periodic { k } => Some(*k),
            _ => None,
        };
        if let Some(k) = periodic_k {
            if (m - self.config.train_months) % k == k - 1 {
                for (e, batch) in batches.iter().enumerate() {
                    self.ledger.record(
                        m,
                        Role::Endpoint(e),
                        Role::Client(self.endpoints[e].client),
                        TransferKind::DataUp,
                        data_message_bytes(batch.len(), self.dim),
                    );
                }
                for c in 0..self.topology.n_clients {
                    let eps = self.topology.endpoints_of(c);
                    let mut merged = batches[eps[0]].clone();
                    for &e in &eps[1..] {
                        merged.merge(&batches[e]);
                    }
                    self.clients[c].store.push_concept(merged);
                    self.retrain_client(c, m)?;
                }
                let all: Vec<usize> = (0..self.topology.n_clients).collect();
                self.aggregate_and_redeploy(&all, m)?;
                self.retraining_months.push(m);
            }
        }

        self.month = m + 1;
        Ok(())
    }

    /// Rebuild a client's model from its retention dataset, warm-starting
    /// from the current local parameters.
    fn retrain_client(&mut self, c: usize, month: u32) -> Result<(), SimError> {
        let retention = build_retention_dataset(
            &self.clients[c].store,
            seed::derive(self.root, "retention", &[c as u64, u64::from(month)]),
        )?;
        let (train, val) = split_train_val(
            &retention,
            seed::derive(self.root, "split", &[c as u64, u64::from(month)]),
        )?;
        let hyper = TrainHyper {
            seed: seed::derive(self.root, "train", &[c as u64, u64::from(month)]),
            ..self.config.hyper
        };
        let (params, _epochs, stable) = train_to_stability(
            &self.clients[c].params,
            &train,
            &val,
            &hyper,
            self.config.weighted_loss,
            self.config.flame.stability,
            self.stability_variant(),
        )?;
        if !stable {
            self.warnings.push(format!(
                "client {c}: stability not reached within {} epochs (month {month})",
                hyper.max_epochs
            ));
        }
        self.clients[c].params = params;
        self.clients[c].train_count = train.len();
        self.clients[c].val_set = Some(val);
        self.ledger.record(
            month,
            Role::Client(c),
            Role::Server,
            TransferKind::WeightsUp,
            model_message_bytes(self.param_count()),
        );
        Ok(())
    }

    /// FedAvg over all clients, then push the new global model to the
    /// endpoints of the clients that retrained. Their monitors rebase
    /// onto fresh reference confidences; their detectors reset.
    fn aggregate_and_redeploy(&mut self, retrained: &[usize], month: u32) -> Result<(), SimError> {
        let models: Vec<ModelParams> = self.clients.iter().map(|c| c.params.clone()).collect();
        let counts: Vec<usize> = self.clients.iter().map(|c| c.train_count).collect();
        self.global = fed_avg(&models, &counts)?;
        for &c in retrained {
            let val = self.clients[c]
                .val_set
                .as_ref()
                .expect("retrained clients hold a val split");
            let reference = predict_batch(&self.global, val);
            for e in self.topology.endpoints_of(c) {
                self.endpoints[e].deployed = self.global.clone();
                self.ledger.record(
                    month,
                    Role::Server,
                    Role::Endpoint(e),
                    TransferKind::ModelDown,
                    model_message_bytes(self.param_count()),
                );
                match &mut self.endpoints[e].sentinel {
                    Sentinel::Passive => {}
                    Sentinel::Detector(d) => d.reset(),
                    Sentinel::Monitor(mon) => mon.rebase(reference.clone())?,
                }
            }
        }
        Ok(())
    }

    /// Run initial training plus every inference month.
    pub fn run(&mut self) -> Result<(), SimError> {
        self.initial_training()?;
        while self.month < self.config.months() {
            self.simulate_month()?;
        }
        Ok(())
    }

    pub fn into_report(self) -> SimulationReport {
        SimulationReport {
            strategy: self.strategy.name(),
            seed: self.root,
            months: self.config.months(),
            train_months: self.config.train_months,
            monthly: self.monthly,
            drift_events: self.drift_events,
            retraining_months: self.retraining_months,
            ledger_total_bytes: self.ledger.total(),
            ledger_totals: self.ledger.totals_by_kind(),
            ledger: self.ledger,
            warnings: self.warnings,
            config: self.config,
        }
    }
}

/// Run one strategy end to end.
pub fn run_strategy(
    config: &ExperimentConfig,
    strategy: &StrategyKind,
) -> Result<SimulationReport, SimError> {
    let mut sim = Simulation::new(config, strategy)?;
    sim.run()?;
    Ok(sim.into_report())
}

/// Run every strategy in the config on identically seeded data.
pub fn run_all(config: &ExperimentConfig) -> Result<Vec<SimulationReport>, SimError> {
    config
        .strategies
        .iter()
        .map(|s| run_strategy(config, s))
        .collect()
}

// =======================================================================
// Training helpers
// =======================================================================

/// Deterministic 80/20 split: a seeded shuffle picks the held-out fifth
/// (at least one sample), then each side is restored to original order.
pub fn split_train_val(
    batch: &LabeledBatch,
    split_seed: u64,
) -> Result<(LabeledBatch, LabeledBatch), SimError> {
    let n = batch.len();
    if n < 2 {
        return Err(SimError::Invalid(
            "need at least 2 samples to carve out a validation split".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seed::stream_rng(split_seed, "train-val-split", &[]));
    let n_val = (n / 5).max(1);
    let mut val_idx: Vec<usize> = idx[..n_val].to_vec();
    let mut train_idx: Vec<usize> = idx[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((subset(batch, &train_idx), subset(batch, &val_idx)))
}

fn subset(batch: &LabeledBatch, rows: &[usize]) -> LabeledBatch {
    let d = batch.feature_dim;
    let mut features = Vec::with_capacity(rows.len() * d);
    let mut labels = Vec::with_capacity(rows.len());
    for &i in rows {
        features.extend_from_slice(batch.row(i));
        labels.push(batch.labels[i]);
    }
    LabeledBatch {
        features,
        feature_dim: d,
        labels,
        month: batch.month,
        true_concept: batch.true_concept.clone(),
    }
}

/// Train until the stability rule reports stable or `max_epochs` runs
/// out. Returns `(params, epochs_run, reached_stability)`.
pub fn train_to_stability(
    start: &ModelParams,
    train: &LabeledBatch,
    val: &LabeledBatch,
    hyper: &TrainHyper,
    weighted: bool,
    stab_params: StabilityParams,
    variant: StabilityVariant,
) -> Result<(ModelParams, usize, bool), SimError> {
    let mut trainer = Trainer::new(start.clone(), *hyper, weighted)?;
    let mut stab = StabilityState::new(stab_params)?;
    for epoch in 1..=hyper.max_epochs {
        trainer.step_epoch(train, val)?;
        let stable = match variant {
            StabilityVariant::Static => stability_static(&mut stab, trainer.trace()),
            StabilityVariant::Gradient => {
                stab.record_sigma(trainer.trace());
                stability_gradient(&stab)
            }
        };
        if stable {
            return Ok((trainer.into_params(), epoch, true));
        }
    }
    let epochs = trainer.epochs_run();
    Ok((trainer.into_params(), epochs, false))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;
    use proptest::prelude::*;

    fn flat(arch: Arch, dim: usize, value: f64) -> ModelParams {
        let n = arch.param_count(dim);
        ModelParams {
            arch,
            dim,
            weights: vec![value; n],
        }
    }

    // -------------------------------------------------------------------
    // Topology
    // -------------------------------------------------------------------

    #[test]
    fn round_robin_assignment() {
        let t = Topology::round_robin(2, 5).unwrap();
        assert_eq!(t.endpoint_to_client, vec![0, 1, 0, 1, 0]);
        assert_eq!(t.endpoints_of(0), vec![0, 2, 4]);
        assert_eq!(t.endpoints_of(1), vec![1, 3]);
    }

    #[test]
    fn topology_rejects_bad_shapes() {
        assert!(Topology::round_robin(0, 3).is_err());
        assert!(Topology::round_robin(4, 3).is_err(), "a client would starve");
        let t = Topology {
            n_clients: 2,
            n_endpoints: 2,
            endpoint_to_client: vec![0, 5],
        };
        assert!(t.validate().is_err());
    }

    // -------------------------------------------------------------------
    // Ledger
    // -------------------------------------------------------------------

    #[test]
    fn role_strings_round_trip() {
        for r in [Role::Server, Role::Client(3), Role::Endpoint(12)] {
            let s: String = r.into();
            assert_eq!(Role::try_from(s).unwrap(), r);
        }
        assert!(Role::try_from("model:1".to_string()).is_err());
    }

    #[test]
    fn message_byte_sizes() {
        // 145 parameters at 4 bytes each.
        assert_eq!(model_message_bytes(145), 580);
        // 1000 samples, 16 features: 1000 * (16 * 8 + 1).
        assert_eq!(data_message_bytes(1000, 16), 129_000);
        assert_eq!(
            data_message_bytes(600, 16) + data_message_bytes(400, 16),
            data_message_bytes(1000, 16),
            "byte accounting is additive in sample count"
        );
    }

    #[test]
    fn ledger_totals() {
        let mut l = ByteLedger::new();
        l.record(0, Role::Client(0), Role::Server, TransferKind::WeightsUp, 100);
        l.record(1, Role::Server, Role::Endpoint(0), TransferKind::ModelDown, 40);
        l.record(1, Role::Endpoint(0), Role::Client(0), TransferKind::DataUp, 7);
        assert_eq!(l.total(), 147);
        assert_eq!(l.total_of(TransferKind::WeightsUp), 100);
        assert_eq!(l.total_of(TransferKind::ModelDown), 40);
        assert_eq!(l.totals_by_kind()["data_up"], 7);
        assert_eq!(l.len(), 3);
    }

    // -------------------------------------------------------------------
    // FedAvg
    // -------------------------------------------------------------------

    #[test]
    fn fed_avg_weighted_example() {
        // Counts 1 and 3: (1*1 + 3*3) / 4 = 2.5 in every coordinate.
        let a = flat(Arch::Logistic, 1, 1.0);
        let b = flat(Arch::Logistic, 1, 3.0);
        let avg = fed_avg(&[a, b], &[1, 3]).unwrap();
        assert_eq!(avg.weights, vec![2.5, 2.5]);
    }

    #[test]
    fn fed_avg_singleton_is_identity() {
        let a = ModelParams {
            arch: Arch::Logistic,
            dim: 2,
            weights: vec![0.25, -1.5, 3.0],
        };
        let avg = fed_avg(std::slice::from_ref(&a), &[17]).unwrap();
        assert_eq!(avg, a);
    }

    #[test]
    fn fed_avg_opposites_cancel() {
        let a = flat(Arch::Logistic, 3, 2.0);
        let b = flat(Arch::Logistic, 3, -2.0);
        let avg = fed_avg(&[a, b], &[5, 5]).unwrap();
        assert!(avg.weights.iter().all(|&w| w == 0.0));
    }

    #[test]
    fn fed_avg_rejects_mismatches() {
        let a = flat(Arch::Logistic, 3, 1.0);
        let b = flat(Arch::Mlp { hidden: 2 }, 3, 1.0);
        assert!(fed_avg(&[a.clone(), b], &[1, 1]).is_err());
        let c = flat(Arch::Logistic, 4, 1.0);
        assert!(fed_avg(&[a.clone(), c], &[1, 1]).is_err());
        assert!(fed_avg(std::slice::from_ref(&a), &[0]).is_err(), "zero weight");
        assert!(fed_avg(&[a], &[1, 2]).is_err(), "count length mismatch");
        assert!(fed_avg(&[], &[]).is_err());
    }

    proptest! {
        // Oracle: per-coordinate weighted mean computed independently.
        #[test]
        fn fed_avg_matches_scalar_oracle(
            vals in proptest::collection::vec(-10.0f64..10.0, 2..5),
            counts in proptest::collection::vec(1usize..50, 2..5),
        ) {
            let k = vals.len().min(counts.len());
            let models: Vec<ModelParams> =
                vals[..k].iter().map(|&v| flat(Arch::Logistic, 2, v)).collect();
            let counts = &counts[..k];
            let avg = fed_avg(&models, counts).unwrap();
            let total: f64 = counts.iter().map(|&c| c as f64).sum();
            let expect: f64 = vals[..k]
                .iter()
                .zip(counts)
                .map(|(&v, &c)| v * c as f64)
                .sum::<f64>()
                / total;
            for &w in &avg.weights {
                prop_assert!((w - expect).abs() < 1e-12);
            }
        }
    }

    // -------------------------------------------------------------------
    // Split and stability-gated training
    // -------------------------------------------------------------------

    fn toy_batch(n: usize) -> LabeledBatch {
        // One feature; positives sit at +2, negatives at -2.
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let y = (i % 4 == 0) as u8;
            labels.push(y);
            features.push(if y == 1 { 2.0 } else { -2.0 });
        }
        LabeledBatch {
            features,
            feature_dim: 1,
            labels,
            month: 0,
            true_concept: "c0".into(),
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let batch = toy_batch(100);
        let (tr1, va1) = split_train_val(&batch, 9).unwrap();
        let (tr2, va2) = split_train_val(&batch, 9).unwrap();
        assert_eq!(tr1, tr2);
        assert_eq!(va1, va2);
        assert_eq!(tr1.len(), 80);
        assert_eq!(va1.len(), 20);
        let (tr3, _) = split_train_val(&batch, 10).unwrap();
        assert_ne!(tr1.features, tr3.features, "different seeds differ");
        assert!(split_train_val(&toy_batch(1), 0).is_err());
    }

    #[test]
    fn split_preserves_sample_multiset() {
        let batch = toy_batch(50);
        let (tr, va) = split_train_val(&batch, 3).unwrap();
        let mut all: Vec<(u64, u8)> = tr
            .features
            .iter()
            .zip(&tr.labels)
            .chain(va.features.iter().zip(&va.labels))
            .map(|(f, &l)| (f.to_bits(), l))
            .collect();
        let mut orig: Vec<(u64, u8)> = batch
            .features
            .iter()
            .zip(&batch.labels)
            .map(|(f, &l)| (f.to_bits(), l))
            .collect();
        all.sort_unstable();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn training_stops_at_stability_on_easy_data() {
        let batch = toy_batch(200);
        let (train, val) = split_train_val(&batch, 1).unwrap();
        let start = init_model(Arch::Logistic, 1, 42);
        let hyper = TrainHyper::default();
        for variant in [StabilityVariant::Static, StabilityVariant::Gradient] {
            let (_, epochs, stable) = train_to_stability(
                &start,
                &train,
                &val,
                &hyper,
                true,
                StabilityParams::default(),
                variant,
            )
            .unwrap();
            assert!(stable, "{variant:?} should stabilize");
            assert!(
                epochs < hyper.max_epochs,
                "{variant:?} stopped only at the cap ({epochs})"
            );
        }
    }

    // -------------------------------------------------------------------
    // Simulation protocol
    // -------------------------------------------------------------------

    #[test]
    fn simulate_before_training_is_an_error() {
        let cfg = crate::config::tests::minimal_config();
        let mut sim = Simulation::new(&cfg, &StrategyKind::None).unwrap();
        assert!(matches!(sim.simulate_month(), Err(SimError::Invalid(_))));
        assert!(sim.initial_training().is_ok());
        assert!(
            sim.initial_training().is_err(),
            "initial training must not run twice"
        );
    }
}
