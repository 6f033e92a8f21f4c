//! End, edge and cloud participants and the synchronous round loop.
//!
//! Every participant keeps a running estimate `A` of the global gradient.
//! In round `r` it:
//!
//! 1. receives `ΔG` (the initial model in round 0), forms the compensated
//!    update `M = β·R + (1−β)·ΔG` from its last record `R`, steps
//!    `W ← W − η(M + A)` and sets `A ← A + M`;
//! 2. computes its local gradient `G` and the delta `G − A`, recording it
//!    as `R` before any privacy operation touches it;
//! 3. privatizes and uploads the delta.
//!
//! With `β = 0` this is delta-coded FedSGD/FedAvg: all participants hold the
//! same `A` and step by the aggregated gradient.

use std::fmt;

use log::debug;
use rand::seq::index;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ExperimentConfig;
use crate::data::{DataError, DatasetShard};
use crate::grad::{GradError, GradientVector, SparseUpdate};
use crate::model::{MlpModel, ModelError};
use crate::privacy::{apply_stages, PipelineTrace, PrivacyError, PrivacyParams, Stages};
use crate::seed::{derive_seed, stream_rng, SimRng, Stream};
use crate::telemetry::{BytesLedger, LinkBytes};
use crate::transport::{transmit, Encoding, Link, Payload, Transmission};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("update has dimension {found} but the model has {expected} parameters")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cloud received no edge uplinks")]
    NoUplinks,
    #[error("participant {0} has no training data")]
    EmptyShard(usize),
    #[error("{0}")]
    Config(String),
    #[error("round {round} failed: {source}")]
    Round { round: u64, source: Box<EngineError> },
}

pub type Result<T> = std::result::Result<T, EngineError>;

/// Which protocol variant runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Scheme {
    /// Full pipeline on every uplink and on the edge's broadcast; sparse
    /// links in both directions.
    #[default]
    #[serde(rename = "pa-imfl")]
    PaImfl,
    /// Clip + Laplace + subsample on uplinks only, dense downlinks, no sign
    /// reset.
    #[serde(rename = "unidirectional-sample-baseline")]
    UnidirectionalSample,
    /// Plain FedAvg: dense links, no privacy operations, no compensation.
    #[serde(rename = "no-defense-fedavg")]
    NoDefenseFedAvg,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::PaImfl, Scheme::UnidirectionalSample, Scheme::NoDefenseFedAvg];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::PaImfl => "pa-imfl",
            Scheme::UnidirectionalSample => "unidirectional-sample-baseline",
            Scheme::NoDefenseFedAvg => "no-defense-fedavg",
        }
    }

    /// Privacy stages on end and edge uplinks (`None`: sent as computed).
    pub fn uplink_stages(self) -> Option<Stages> {
        match self {
            Scheme::PaImfl => Some(Stages::ALL),
            Scheme::UnidirectionalSample => Some(Stages::LDP_SUBSAMPLE),
            Scheme::NoDefenseFedAvg => None,
        }
    }

    /// Privacy stages on the edge's broadcast to end devices.
    pub fn broadcast_stages(self) -> Option<Stages> {
        match self {
            Scheme::PaImfl => Some(Stages::ALL),
            _ => None,
        }
    }

    pub fn uplink_encoding(self) -> Encoding {
        match self {
            Scheme::NoDefenseFedAvg => Encoding::Dense,
            _ => Encoding::Sparse,
        }
    }

    pub fn downlink_encoding(self) -> Encoding {
        match self {
            Scheme::PaImfl => Encoding::Sparse,
            _ => Encoding::Dense,
        }
    }

    pub fn compensates(self) -> bool {
        self != Scheme::NoDefenseFedAvg
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Local optimization settings shared by all participants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingParams {
    pub eta: f64,
    /// Inverse-time decay: `η_r = η / (1 + decay·r)`.
    pub decay: f64,
    pub batch_size: usize,
    /// Minibatch steps per round. The local gradient is the sum of the
    /// gradients along this trajectory; 1 gives a single `∇l(W)`.
    pub local_steps: usize,
}

impl Default for TrainingParams {
    fn default() -> Self {
        Self { eta: 0.01, decay: 1e-4, batch_size: 50, local_steps: 1 }
    }
}

impl TrainingParams {
    pub fn learning_rate(&self, round: u64) -> f64 {
        self.eta / (1.0 + self.decay * round as f64)
    }
}

/// Everything a participant needs to execute a round besides its own state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundConfig {
    pub scheme: Scheme,
    pub privacy: PrivacyParams,
    pub training: TrainingParams,
}

impl RoundConfig {
    fn beta(&self) -> f64 {
        if self.scheme.compensates() {
            self.privacy.beta
        } else {
            0.0
        }
    }
}

/// What a participant receives at the start of a round.
#[derive(Debug, Clone, PartialEq)]
pub enum GlobalUpdate {
    /// Round 0: the full initial model, adopted verbatim.
    InitialModel(Vec<f64>),
    /// Later rounds: the aggregated update `ΔG` of the previous round.
    Update(GradientVector),
}

/// Model replica plus the bookkeeping behind compensation.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    pub seed: u64,
    model: MlpModel,
    /// `R`: this round's delta before any privacy operation.
    pub record: GradientVector,
    /// `A`: running global-gradient estimate.
    pub global_grad_accum: GradientVector,
    /// `M`: the compensated update used in the latest weight step.
    pub momentum_update: GradientVector,
}

impl ClientState {
    pub fn new(client_id: usize, seed: u64, layer_dims: Vec<usize>) -> Result<Self> {
        let model = MlpModel::zeros(layer_dims)?;
        let d = model.param_count();
        Ok(Self {
            client_id,
            seed,
            model,
            record: GradientVector::zeros(d),
            global_grad_accum: GradientVector::zeros(d),
            momentum_update: GradientVector::zeros(d),
        })
    }

    pub fn weights(&self) -> &[f64] {
        self.model.weights()
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn dim(&self) -> usize {
        self.model.param_count()
    }
}

/// The edge device: a participant that also aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeState {
    pub participant: ClientState,
    /// End-device updates received in the latest round.
    pub received_updates: Vec<SparseUpdate>,
}

/// Per-participant statistics of one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalReport {
    pub loss: f64,
    pub trace: Option<PipelineTrace>,
    /// Rows of the participant's shard used in local training, in order.
    pub rows_used: Vec<usize>,
}

/// `β·record + (1−β)·global_update`.
pub fn compensate(record: &GradientVector, global_update: &GradientVector, beta: f64) -> Result<GradientVector> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(EngineError::Config(format!("beta ∈ [0,1] required, got {beta}")));
    }
    if record.dim() != global_update.dim() {
        return Err(EngineError::DimensionMismatch { expected: record.dim(), found: global_update.dim() });
    }
    // exact at the boundaries
    if beta == 0.0 {
        return Ok(global_update.clone());
    }
    if beta == 1.0 {
        return Ok(record.clone());
    }
    Ok(record.blend(beta, global_update, 1.0 - beta)?)
}

fn apply_global_update(state: &mut ClientState, update: &GlobalUpdate, round: u64, cfg: &RoundConfig) -> Result<()> {
    let d = state.dim();
    match update {
        GlobalUpdate::InitialModel(w0) => {
            if w0.len() != d {
                return Err(EngineError::DimensionMismatch { expected: d, found: w0.len() });
            }
            state.model.set_weights(w0.clone())?;
        }
        GlobalUpdate::Update(delta) => {
            if delta.dim() != d {
                return Err(EngineError::DimensionMismatch { expected: d, found: delta.dim() });
            }
            let m = compensate(&state.record, delta, cfg.beta())?;
            let step = m.add(&state.global_grad_accum)?;
            let lr = cfg.training.learning_rate(round);
            let w: Vec<f64> = state.model.weights().iter().zip(step.values()).map(|(w, s)| w - lr * s).collect();
            state.model.set_weights(w)?;
            state.global_grad_accum = step;
            state.momentum_update = m;
        }
    }
    Ok(())
}

/// Runs `local_steps` of minibatch SGD from the current weights without
/// committing them; returns (mean loss, summed gradient, rows used).
fn local_gradient(
    state: &ClientState,
    data: &DatasetShard,
    round: u64,
    training: &TrainingParams,
) -> Result<(f64, GradientVector, Vec<usize>)> {
    if data.is_empty() {
        return Err(EngineError::EmptyShard(state.client_id));
    }
    let mut rng: SimRng = stream_rng(state.seed, Stream::LocalTraining, &[round]);
    let lr = training.learning_rate(round);
    let batch = training.batch_size.clamp(1, data.len());
    let mut model = state.model.clone();
    let mut sum = vec![0.0; state.dim()];
    let mut loss = 0.0;
    let mut rows_used = Vec::with_capacity(batch * training.local_steps);
    for step in 0..training.local_steps.max(1) {
        let rows = index::sample(&mut rng, data.len(), batch).into_vec();
        let shard = data.select(&rows);
        let (l, g) = model.forward_backward(shard.view())?;
        loss += l;
        sum.iter_mut().zip(g.values()).for_each(|(s, v)| *s += v);
        if step + 1 < training.local_steps {
            let w = model.weights().iter().zip(g.values()).map(|(w, v)| w - lr * v).collect();
            model.set_weights(w)?;
        }
        rows_used.extend(rows);
    }
    Ok((loss / training.local_steps.max(1) as f64, GradientVector::new(sum)?, rows_used))
}

/// Steps 1 of both layers: apply the received update, compute the local
/// delta `G − A`, and record it.
fn train_and_record(
    state: &mut ClientState,
    update: &GlobalUpdate,
    round: u64,
    cfg: &RoundConfig,
    data: &DatasetShard,
) -> Result<(GradientVector, f64, Vec<usize>)> {
    apply_global_update(state, update, round, cfg)?;
    let (loss, local, rows) = local_gradient(state, data, round, &cfg.training)?;
    let delta = local.sub(&state.global_grad_accum)?;
    state.record = delta.clone();
    Ok((delta, loss, rows))
}

fn privatize(
    g: &GradientVector,
    stages: Option<Stages>,
    params: &PrivacyParams,
    round: u64,
    rng: &mut SimRng,
) -> Result<(GradientVector, Option<PipelineTrace>)> {
    match stages {
        Some(stages) => {
            let (out, trace) = apply_stages(g, params, stages, round, rng)?;
            Ok((out, Some(trace)))
        }
        None => Ok((g.clone(), None)),
    }
}

/// One end-device round; returns the payload it uploads to the edge.
pub fn end_local_round(
    mut state: ClientState,
    global_update: &GlobalUpdate,
    round: u64,
    cfg: &RoundConfig,
    data: &DatasetShard,
) -> Result<(Payload, ClientState, LocalReport)> {
    let (delta, loss, rows_used) = train_and_record(&mut state, global_update, round, cfg, data)?;
    let mut rng = stream_rng(state.seed, Stream::Uplink, &[round]);
    let (out, trace) = privatize(&delta, cfg.scheme.uplink_stages(), &cfg.privacy, round, &mut rng)?;
    let payload = Payload::from_vector(out, cfg.scheme.uplink_encoding());
    Ok((payload, state, LocalReport { loss, trace, rows_used }))
}

/// `(Σ densify(endᵢ) + edge_update) / (m + 1)`.
pub fn edge_aggregate(end_updates: &[SparseUpdate], edge_update: &GradientVector) -> Result<GradientVector> {
    let payloads: Vec<Payload> = end_updates.iter().cloned().map(Payload::Sparse).collect();
    edge_aggregate_payloads(&payloads, edge_update)
}

/// [`edge_aggregate`] over payloads of either encoding.
pub fn edge_aggregate_payloads(end_updates: &[Payload], edge_update: &GradientVector) -> Result<GradientVector> {
    let d = edge_update.dim();
    let mut acc = vec![0.0; d];
    for u in end_updates {
        if u.dim() != d {
            return Err(EngineError::DimensionMismatch { expected: d, found: u.dim() });
        }
        u.add_into(&mut acc)?;
    }
    acc.iter_mut().zip(edge_update.values()).for_each(|(a, e)| *a += e);
    let parties = (end_updates.len() + 1) as f64;
    Ok(GradientVector::new(acc.into_iter().map(|v| v / parties).collect())?)
}

/// Mean of the densified edge uplinks.
pub fn cloud_aggregate(edge_uplinks: &[SparseUpdate]) -> Result<GradientVector> {
    let payloads: Vec<Payload> = edge_uplinks.iter().cloned().map(Payload::Sparse).collect();
    cloud_aggregate_payloads(&payloads)
}

pub fn cloud_aggregate_payloads(edge_uplinks: &[Payload]) -> Result<GradientVector> {
    let first = edge_uplinks.first().ok_or(EngineError::NoUplinks)?;
    let d = first.dim();
    let mut acc = vec![0.0; d];
    for u in edge_uplinks {
        if u.dim() != d {
            return Err(EngineError::DimensionMismatch { expected: d, found: u.dim() });
        }
        u.add_into(&mut acc)?;
    }
    let n = edge_uplinks.len() as f64;
    Ok(GradientVector::new(acc.into_iter().map(|v| v / n).collect())?)
}

/// Outcome of the edge's round, including the cloud exchange.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeRoundOutput {
    pub uplink: Payload,
    /// What the cloud sent back (the edge's next global update).
    pub cloud_downlink: Payload,
    /// What the edge forwards to end devices for the next round.
    pub broadcast: Payload,
    pub state: EdgeState,
    pub report: LocalReport,
    pub transmissions: Vec<Transmission>,
}

/// Edge round: local training and record, aggregation with the end-device
/// updates, uplink privatization, the cloud exchange, and the second
/// privatization for the broadcast.
pub fn edge_round(
    mut state: EdgeState,
    end_updates: &[Payload],
    global_update: &GlobalUpdate,
    round: u64,
    cfg: &RoundConfig,
    data: &DatasetShard,
) -> Result<EdgeRoundOutput> {
    let (own_delta, loss, rows_used) = train_and_record(&mut state.participant, global_update, round, cfg, data)?;
    state.received_updates = end_updates.iter().map(Payload::to_sparse).collect();
    let aggregate = edge_aggregate_payloads(end_updates, &own_delta)?;

    let seed = state.participant.seed;
    let mut rng = stream_rng(seed, Stream::Uplink, &[round]);
    let (up, trace) = privatize(&aggregate, cfg.scheme.uplink_stages(), &cfg.privacy, round, &mut rng)?;
    let uplink = Payload::from_vector(up, cfg.scheme.uplink_encoding());
    let mut transmissions = Vec::with_capacity(3);

    let (at_cloud, bytes) = transmit(&uplink)?;
    transmissions.push(Transmission { link: Link::EdgeToCloud, payload: uplink.clone(), copies: 1, bytes_per_copy: bytes });
    let global = cloud_aggregate_payloads(std::slice::from_ref(&at_cloud))?;
    let down = Payload::from_vector(global, cfg.scheme.downlink_encoding());
    let (cloud_downlink, bytes) = transmit(&down)?;
    transmissions.push(Transmission { link: Link::CloudToEdge, payload: down, copies: 1, bytes_per_copy: bytes });

    let broadcast = edge_broadcast(&state, &cloud_downlink.to_dense(), round, cfg)?;
    Ok(EdgeRoundOutput {
        uplink,
        cloud_downlink,
        broadcast,
        state,
        report: LocalReport { loss, trace, rows_used },
        transmissions,
    })
}

/// Second privatization: the cloud's global update as forwarded to end devices.
pub fn edge_broadcast(state: &EdgeState, cloud_update: &GradientVector, round: u64, cfg: &RoundConfig) -> Result<Payload> {
    let mut rng = stream_rng(state.participant.seed, Stream::Broadcast, &[round]);
    let (out, _) = privatize(cloud_update, cfg.scheme.broadcast_stages(), &cfg.privacy, round, &mut rng)?;
    Ok(Payload::from_vector(out, cfg.scheme.downlink_encoding()))
}

/// Order in which end devices execute within a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExecutionOrder {
    #[default]
    Ascending,
    Descending,
    Shuffled(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub order: ExecutionOrder,
    /// Run end devices on the rayon pool instead of sequentially.
    pub parallel: bool,
    /// Keep every transmitted payload in the results.
    pub capture_payloads: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { order: ExecutionOrder::Ascending, parallel: true, capture_payloads: false }
    }
}

/// Telemetry of one synchronous round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub round: u64,
    /// The cloud's aggregate as a sparse update.
    pub global_update: SparseUpdate,
    pub link_bytes: LinkBytes,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    /// Mean local training loss over all participants.
    pub train_loss: f64,
    /// Test accuracy of the edge model after it applies this round's
    /// global update.
    pub test_accuracy: f64,
    pub transmissions: Option<Vec<Transmission>>,
    pub end_reports: Option<Vec<LocalReport>>,
}

/// Datasets and initial state for one run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub round_config: RoundConfig,
    pub layer_dims: Vec<usize>,
    /// End-device shards followed by the edge's shard.
    pub shards: Vec<DatasetShard>,
    pub test: DatasetShard,
}

impl Experiment {
    pub fn prepare(config: &ExperimentConfig) -> Result<Experiment> {
        config.validate().map_err(|e| EngineError::Config(e.to_string()))?;
        let (train, test) = config.load_datasets()?;
        Self::from_datasets(config, train, test)
    }

    pub fn from_datasets(config: &ExperimentConfig, train: DatasetShard, test: DatasetShard) -> Result<Experiment> {
        let layer_dims = config.layer_dims_for(train.feature_dim(), train.classes());
        let participants = config.clients + 1;
        // a lone edge (or very few participants) must still cover every class
        let per_client = config.classes_per_client.max(train.classes().div_ceil(participants));
        if per_client != config.classes_per_client {
            debug!("raising classes_per_client to {per_client} so {participants} participants cover all classes");
        }
        let shards = crate::data::partition_noniid(&train, participants, per_client, config.master_seed)?;
        Ok(Experiment { config: config.clone(), round_config: config.round_config(), layer_dims, shards, test })
    }

    pub fn dim(&self) -> usize {
        crate::model::param_count(&self.layer_dims)
    }

    pub fn run(&self, options: RunOptions) -> Result<(Vec<RoundResult>, BytesLedger)> {
        let cfg = &self.round_config;
        let m = self.config.clients;
        let master = self.config.master_seed;
        let d = self.dim();
        cfg.privacy.validate_for_dim(d)?;

        let init = MlpModel::init(self.layer_dims.clone(), derive_seed(master, &[Stream::ModelInit as u64]))?;
        let participant_seed = |id: usize| derive_seed(master, &[Stream::Participant as u64, id as u64]);
        let mut ends: Vec<ClientState> = (0..m)
            .map(|i| ClientState::new(i, participant_seed(i), self.layer_dims.clone()))
            .collect::<Result<_>>()?;
        let mut edge = EdgeState {
            participant: ClientState::new(m, participant_seed(m), self.layer_dims.clone())?,
            received_updates: Vec::new(),
        };

        let mut ledger = BytesLedger::default();
        let mut results = Vec::with_capacity(self.config.rounds as usize);
        let mut end_downlink: Option<Payload> = None;
        let mut edge_downlink: Option<GlobalUpdate> = None;

        for round in 0..self.config.rounds {
            let mut step = || -> Result<RoundResult> {
                let mut transmissions = Vec::new();
                let (end_global, edge_global) = match (&end_downlink, &edge_downlink) {
                    (Some(p), Some(e)) => (GlobalUpdate::Update(p.to_dense()), e.clone()),
                    _ => {
                        // initial model: cloud → edge → every end device
                        let w0 = Payload::Dense(GradientVector::new(init.weights().to_vec())?);
                        let (at_edge, bytes) = transmit(&w0)?;
                        transmissions.push(Transmission { link: Link::CloudToEdge, payload: w0.clone(), copies: 1, bytes_per_copy: bytes });
                        let (at_end, bytes) = transmit(&at_edge)?;
                        if m > 0 {
                            transmissions.push(Transmission { link: Link::EdgeToEnd, payload: at_edge.clone(), copies: m, bytes_per_copy: bytes });
                        }
                        (
                            GlobalUpdate::InitialModel(at_end.to_dense().into_values()),
                            GlobalUpdate::InitialModel(at_edge.to_dense().into_values()),
                        )
                    }
                };

                let order = execution_order(m, options.order);
                let run_end = |id: usize| -> Result<(usize, Payload, ClientState, LocalReport)> {
                    let (payload, state, report) =
                        end_local_round(ends[id].clone(), &end_global, round, cfg, &self.shards[id])?;
                    Ok((id, payload, state, report))
                };
                let mut outcomes: Vec<_> = if options.parallel {
                    order.par_iter().map(|&id| run_end(id)).collect::<Result<Vec<_>>>()?
                } else {
                    order.iter().map(|&id| run_end(id)).collect::<Result<Vec<_>>>()?
                };
                // barrier: from here on everything is in client-id order
                outcomes.sort_by_key(|o| o.0);

                let mut received = Vec::with_capacity(m);
                let mut reports = Vec::with_capacity(m);
                let mut loss_sum = 0.0;
                for (id, payload, state, report) in outcomes {
                    let (rx, bytes) = transmit(&payload)?;
                    transmissions.push(Transmission { link: Link::EndToEdge, payload, copies: 1, bytes_per_copy: bytes });
                    received.push(rx);
                    loss_sum += report.loss;
                    ends[id] = state;
                    reports.push(report);
                }

                let out = edge_round(edge.clone(), &received, &edge_global, round, cfg, &self.shards[m])?;
                loss_sum += out.report.loss;
                transmissions.extend(out.transmissions.iter().cloned());
                edge = out.state;

                // forwarded to end devices at the start of the next round
                let (at_end, bytes) = transmit(&out.broadcast)?;
                if m > 0 {
                    transmissions.push(Transmission { link: Link::EdgeToEnd, payload: out.broadcast.clone(), copies: m, bytes_per_copy: bytes });
                }
                end_downlink = Some(at_end);
                edge_downlink = Some(GlobalUpdate::Update(out.cloud_downlink.to_dense()));

                let link_bytes = LinkBytes::from_transmissions(&transmissions);
                // the edge model once this round's global update is applied
                let mut evaluated = edge.participant.clone();
                apply_global_update(&mut evaluated, edge_downlink.as_ref().expect("set above"), round + 1, cfg)?;
                let test_accuracy = self.evaluate(&evaluated)?;
                Ok(RoundResult {
                    round,
                    global_update: out.cloud_downlink.to_sparse(),
                    link_bytes,
                    uplink_bytes: link_bytes.uplink(),
                    downlink_bytes: link_bytes.downlink(),
                    train_loss: loss_sum / (m + 1) as f64,
                    test_accuracy,
                    transmissions: options.capture_payloads.then_some(transmissions),
                    end_reports: options.capture_payloads.then_some(reports),
                })
            };
            let result = step().map_err(|e| EngineError::Round { round, source: Box::new(e) })?;
            debug!(
                "round {round}: loss {:.4} accuracy {:.4} bytes up {} down {}",
                result.train_loss, result.test_accuracy, result.uplink_bytes, result.downlink_bytes
            );
            ledger.record(result.round, result.link_bytes);
            results.push(result);
        }
        Ok((results, ledger))
    }

    fn evaluate(&self, state: &ClientState) -> Result<f64> {
        if self.test.is_empty() {
            return Ok(0.0);
        }
        Ok(state.model().accuracy(self.test.view())?)
    }
}

fn execution_order(m: usize, order: ExecutionOrder) -> Vec<usize> {
    let mut ids: Vec<usize> = (0..m).collect();
    match order {
        ExecutionOrder::Ascending => {}
        ExecutionOrder::Descending => ids.reverse(),
        ExecutionOrder::Shuffled(seed) => ids.shuffle(&mut stream_rng(seed, Stream::Participant, &[])),
    }
    ids
}

/// Runs every round of `config` with default options.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RoundResult>> {
    Ok(Experiment::prepare(config)?.run(RunOptions::default())?.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_gaussian, SyntheticSpec};

    fn gv(values: &[f64]) -> GradientVector {
        GradientVector::new(values.to_vec()).unwrap()
    }

    fn sparse(values: &[f64]) -> SparseUpdate {
        gv(values).sparsify()
    }

    fn degenerate() -> RoundConfig {
        RoundConfig {
            scheme: Scheme::PaImfl,
            privacy: PrivacyParams { epsilon: f64::INFINITY, gamma: 1.0, t: 0, beta: 0.0, ..PrivacyParams::default() },
            training: TrainingParams { eta: 0.1, decay: 0.0, batch_size: 4, local_steps: 1 },
        }
    }

    fn toy_shard() -> DatasetShard {
        synthetic_gaussian(SyntheticSpec { classes: 3, per_class: 6, feature_dim: 4, separation: 3.0, seed: 2 }).unwrap()
    }

    #[test]
    fn compensate_boundaries_and_mix() {
        let r = gv(&[2.0, 0.0]);
        let g = gv(&[0.0, 2.0]);
        assert_eq!(compensate(&r, &g, 0.0).unwrap(), g);
        assert_eq!(compensate(&r, &g, 1.0).unwrap(), r);
        assert_eq!(compensate(&r, &g, 0.5).unwrap(), gv(&[1.0, 1.0]));
        assert!(matches!(compensate(&r, &gv(&[1.0]), 0.5), Err(EngineError::DimensionMismatch { .. })));
    }

    #[test]
    fn edge_aggregate_examples() {
        assert_eq!(edge_aggregate(&[sparse(&[2.0, 4.0])], &gv(&[0.0, 0.0])).unwrap(), gv(&[1.0, 2.0]));
        assert_eq!(edge_aggregate(&[], &gv(&[3.0, 3.0])).unwrap(), gv(&[3.0, 3.0]));
        let u = sparse(&[0.5, -1.5, 0.0]);
        assert_eq!(edge_aggregate(&[u.clone(), u.clone(), u], &gv(&[0.5, -1.5, 0.0])).unwrap(), gv(&[0.5, -1.5, 0.0]));
        assert!(edge_aggregate(&[sparse(&[1.0, 2.0, 3.0])], &gv(&[0.0, 0.0])).is_err());
    }

    #[test]
    fn cloud_aggregate_examples() {
        let u = sparse(&[2.0, 0.0]);
        assert_eq!(cloud_aggregate(std::slice::from_ref(&u)).unwrap(), u.densify());
        assert_eq!(cloud_aggregate(&[u.clone(), u.clone()]).unwrap(), u.densify());
        assert_eq!(cloud_aggregate(&[u, sparse(&[0.0, 2.0])]).unwrap(), gv(&[1.0, 1.0]));
        assert!(matches!(cloud_aggregate(&[]), Err(EngineError::NoUplinks)));
    }

    #[test]
    fn round_zero_adopts_initial_model() {
        let dims = vec![4, 3, 3];
        let w0 = MlpModel::init(dims.clone(), 9).unwrap().weights().to_vec();
        let state = ClientState::new(0, 1, dims).unwrap();
        let (_, state, _) =
            end_local_round(state, &GlobalUpdate::InitialModel(w0.clone()), 0, &degenerate(), &toy_shard()).unwrap();
        assert_eq!(state.weights(), &w0[..]);
    }

    #[test]
    fn degenerate_pipeline_uploads_clipped_delta() {
        let dims = vec![4, 3, 3];
        let shard = toy_shard();
        let cfg = degenerate();
        let w0 = MlpModel::init(dims.clone(), 9).unwrap().weights().to_vec();
        let state = ClientState::new(0, 1, dims).unwrap();
        let (_, state, _) = end_local_round(state, &GlobalUpdate::InitialModel(w0), 0, &cfg, &shard).unwrap();

        let d = state.dim();
        let global = GradientVector::new((0..d).map(|i| (i as f64 * 0.37).sin() * 0.01).collect()).unwrap();
        let (payload, after, _) =
            end_local_round(state.clone(), &GlobalUpdate::Update(global.clone()), 1, &cfg, &shard).unwrap();
        // independently: step the weights, take the local gradient, subtract ΔG
        let mut manual = state.clone();
        apply_global_update(&mut manual, &GlobalUpdate::Update(global.clone()), 1, &cfg).unwrap();
        let (_, grad, _) = local_gradient(&manual, &shard, 1, &cfg.training).unwrap();
        let expected = grad.sub(&global).unwrap().clip_l2(1.0).unwrap();
        assert_eq!(payload.to_dense(), expected);
        // the record holds the unclipped delta
        assert_eq!(after.record, grad.sub(&global).unwrap());
    }

    #[test]
    fn zero_updates_leave_weights_unchanged() {
        let dims = vec![4, 3, 3];
        let mut state = ClientState::new(0, 1, dims).unwrap();
        let before = state.weights().to_vec();
        let d = state.dim();
        apply_global_update(&mut state, &GlobalUpdate::Update(GradientVector::zeros(d)), 3, &degenerate()).unwrap();
        assert_eq!(state.weights(), &before[..]);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let state = ClientState::new(0, 1, vec![4, 3]).unwrap();
        let err = end_local_round(state, &GlobalUpdate::Update(GradientVector::zeros(2)), 1, &degenerate(), &toy_shard());
        assert!(matches!(err, Err(EngineError::DimensionMismatch { .. })));
    }

    #[test]
    fn record_is_pre_pipeline() {
        let cfg = RoundConfig { privacy: PrivacyParams { t: 1, ..PrivacyParams::default() }, ..degenerate() };
        let dims = vec![4, 3, 3];
        let w0 = MlpModel::init(dims.clone(), 9).unwrap().weights().to_vec();
        let state = ClientState::new(0, 1, dims).unwrap();
        let (payload, state, report) =
            end_local_round(state, &GlobalUpdate::InitialModel(w0), 0, &cfg, &toy_shard()).unwrap();
        assert_ne!(payload.to_dense(), state.record);
        assert_eq!(report.trace.unwrap().pre_norm, state.record.l2_norm());
    }

    #[test]
    fn broadcast_is_identity_for_degenerate_pipeline() {
        let edge = EdgeState { participant: ClientState::new(0, 5, vec![2, 2]).unwrap(), received_updates: vec![] };
        let g = gv(&[0.1, -0.2, 0.0, 0.3, 0.05, 0.0]);
        let out = edge_broadcast(&edge, &g, 3, &degenerate()).unwrap();
        assert_eq!(out.to_dense(), g);
    }

    #[test]
    fn edge_alone_uplinks_its_own_delta() {
        let cfg = degenerate();
        let dims = vec![4, 3, 3];
        let w0 = MlpModel::init(dims.clone(), 9).unwrap().weights().to_vec();
        let edge = EdgeState { participant: ClientState::new(0, 5, dims).unwrap(), received_updates: vec![] };
        let out = edge_round(edge, &[], &GlobalUpdate::InitialModel(w0), 0, &cfg, &toy_shard()).unwrap();
        assert_eq!(out.uplink.to_dense(), out.state.participant.record.clip_l2(1.0).unwrap());
    }

    #[test]
    fn lr_decays_inverse_time() {
        let t = TrainingParams { eta: 0.01, decay: 1e-4, ..TrainingParams::default() };
        assert_eq!(t.learning_rate(0), 0.01);
        assert!((t.learning_rate(100) - 0.01 / 1.01).abs() < 1e-15);
    }
}
