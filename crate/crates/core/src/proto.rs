//! Server and client state machines for residual-pooling federated learning,
//! plus a FedAvg baseline that exchanges full models.
//!
//! Every simulated transfer is a real encoded frame; the byte counts in
//! [`RoundMetrics`] and the [`Transfer`] log are lengths of those frames.
//!
//! A round is transactional: [`server_round`] borrows the current state and
//! returns a fresh one, so a failed round leaves nothing half-applied.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{
    self, add_deltas, aggregate_weighted, apply_delta, compute_residual, filter_select, identity_pooled, pool_residual,
    CodecError, FilterPolicy, PooledDelta, WireError,
};
use crate::data::{Dataset, PartitionPlan};
use crate::nn::{train_local, Architecture, Evaluation, Hyperparams, NnError};
use crate::params::ModelParams;
use crate::rng::{stream, Purpose};

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("cannot select {m} of {n} clients")]
    Selection { n: usize, m: usize },
    #[error("client {client} is synced to round {synced}, so round {round} needs a catch-up through round {required}, got one through round {through}")]
    StaleCatchUp { client: usize, synced: usize, round: usize, through: usize, required: usize },
    #[error("round {round} is outside 1..={rounds}")]
    RoundOutOfRange { round: usize, rounds: usize },
    #[error("client {client} failed in round {round}")]
    ClientFailed { client: usize, round: usize },
    #[error("expected {expected} clients, got {actual}")]
    ClientCount { expected: usize, actual: usize },
}

/// `m` distinct client ids drawn uniformly without replacement, sorted.
/// The draw depends only on `(seed, round)`.
pub fn select_clients(n: usize, m: usize, round: usize, seed: u64) -> Result<Vec<usize>, ProtoError> {
    if m == 0 || m > n {
        return Err(ProtoError::Selection { n, m });
    }
    let mut rng = stream(seed, Purpose::Selection, round as u64, 0);
    let mut ids = index::sample(&mut rng, n, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// How client contributions are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Uniform,
    DatasetSize,
}

/// Codec and aggregation settings of the residual-pooling pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RpnOptions {
    /// `false` sends raw residuals (identity codec).
    pub pooling: bool,
    pub filter: FilterPolicy,
    pub weighting: Weighting,
}

impl Default for RpnOptions {
    fn default() -> Self {
        RpnOptions { pooling: true, filter: FilterPolicy::All, weighting: Weighting::Uniform }
    }
}

/// Everything a round needs that does not change between rounds.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub arch: &'a Architecture,
    pub train: &'a Dataset,
    pub hp: Hyperparams,
}

/// Clients whose update fails in a given round (fail-stop).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FaultPlan {
    failures: BTreeSet<(usize, usize)>,
}

impl FaultPlan {
    pub fn none() -> Self {
        FaultPlan::default()
    }

    pub fn fail(mut self, round: usize, client: usize) -> Self {
        self.failures.insert((round, client));
        self
    }

    pub fn fails(&self, round: usize, client: usize) -> bool {
        self.failures.contains(&(round, client))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    /// Server to client.
    Download,
    /// Client to server.
    Upload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Payload {
    FullModel,
    Delta,
}

/// One encoded frame that crossed the simulated network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transfer {
    pub round: usize,
    pub client: usize,
    pub direction: Direction,
    pub payload: Payload,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientBytes {
    pub client: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// Global model on the held-out set, when one was supplied.
    pub eval: Option<Evaluation>,
    pub uploads: Vec<ClientBytes>,
    pub downloads: Vec<ClientBytes>,
    pub wall_time_secs: f64,
}

impl RoundMetrics {
    fn from_transfers(round: usize, transfers: &[Transfer], eval: Option<Evaluation>, started: Instant) -> Self {
        let pick = |dir| {
            transfers
                .iter()
                .filter(|t| t.direction == dir)
                .map(|t| ClientBytes { client: t.client, bytes: t.bytes })
                .collect()
        };
        RoundMetrics {
            round,
            eval,
            uploads: pick(Direction::Upload),
            downloads: pick(Direction::Download),
            wall_time_secs: started.elapsed().as_secs_f64(),
        }
    }

    pub fn upload_bytes(&self) -> usize {
        self.uploads.iter().map(|c| c.bytes).sum()
    }

    pub fn download_bytes(&self) -> usize {
        self.downloads.iter().map(|c| c.bytes).sum()
    }
}

fn evaluate(
    arch: &Architecture,
    model: &ModelParams,
    eval: Option<&Dataset>,
) -> Result<Option<Evaluation>, ProtoError> {
    eval.map(|d| arch.evaluate(model, d)).transpose().map_err(Into::into)
}

/// A client of the residual-pooling pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Sample indices of this client's local data in the training set.
    pub indices: Vec<usize>,
    pub base: ModelParams,
    /// Last round whose aggregate is folded into `current`.
    pub synced_round: usize,
    /// Cached `G⁰ + expand(Σ aggregates of rounds 1..=synced_round)`.
    pub current: ModelParams,
}

/// What the server sends a selected client: the sum of every aggregated
/// delta of rounds `1..=through_round`, folded oldest first.
///
/// Rebuilding from `G⁰` with the full sum (rather than adding only the
/// missed rounds to the cached model) makes every client's recovered model
/// bitwise identical to the server's global model, whatever its gap.
#[derive(Debug, Clone, PartialEq)]
pub struct CatchUp {
    pub through_round: usize,
    pub cumulative: PooledDelta,
}

/// One client's part of round `round`: recover `G^{round−1}`, train locally,
/// and return the compressed residual together with the updated state.
///
/// The returned state caches the recovered model, not the locally trained
/// one; the client's own update only comes back through the aggregate.
pub fn client_update(
    client: &ClientState,
    round: usize,
    catch_up: &CatchUp,
    fed: &Federation<'_>,
    opts: &RpnOptions,
) -> Result<(PooledDelta, ClientState), ProtoError> {
    if round == 0 || catch_up.through_round + 1 != round || client.synced_round > catch_up.through_round {
        return Err(ProtoError::StaleCatchUp {
            client: client.id,
            synced: client.synced_round,
            round,
            through: catch_up.through_round,
            required: round.saturating_sub(1),
        });
    }
    let recovered = apply_delta(&client.base, &catch_up.cumulative)?;
    let mut rng = stream(fed.hp.seed, Purpose::Shuffle, client.id as u64, round as u64);
    let trained = train_local(fed.arch, &recovered, fed.train, &client.indices, &fed.hp.local(), &mut rng)?;
    let mut residual = compute_residual(&trained, &recovered)?;
    if opts.filter != FilterPolicy::All {
        residual = filter_select(&residual, opts.filter)?;
    }
    let delta = if opts.pooling { pool_residual(&residual)? } else { identity_pooled(&residual) };
    let next = ClientState {
        id: client.id,
        indices: client.indices.clone(),
        base: client.base.clone(),
        synced_round: round - 1,
        current: recovered,
    };
    Ok((delta, next))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    pub round: usize,
    pub initial: ModelParams,
    /// Aggregate of round `j + 1` at index `j`.
    pub history: Vec<PooledDelta>,
    /// Oldest-first fold of `history`.
    pub cumulative: PooledDelta,
    pub seed: u64,
}

impl ServerState {
    pub fn new(initial: ModelParams, seed: u64, opts: &RpnOptions) -> Self {
        let cumulative =
            if opts.pooling { PooledDelta::zeros_for(&initial) } else { PooledDelta::zeros_unpooled(&initial) };
        ServerState { round: 0, initial, history: Vec::new(), cumulative, seed }
    }

    /// `G⁰ + expand(cumulative)`.
    pub fn global_model(&self) -> Result<ModelParams, ProtoError> {
        Ok(apply_delta(&self.initial, &self.cumulative)?)
    }

    /// Recomputes the fold of `history` and compares it bitwise with `cumulative`.
    pub fn history_consistent(&self) -> Result<bool, ProtoError> {
        let zero = PooledDelta { entries: self.cumulative.entries.clone() };
        let fold = codec::cumulative_catch_up(&zero, &self.history)?;
        Ok(self.history.len() == self.round && fold.to_bits() == self.cumulative.to_bits())
    }

    /// The catch-up frame content for the next round.
    pub fn catch_up(&self) -> CatchUp {
        CatchUp { through_round: self.round, cumulative: self.cumulative.clone() }
    }
}

/// Initial state of an RPN run: every client receives `G⁰` as a full frame.
pub fn setup_rpn(
    fed: &Federation<'_>,
    plan: &PartitionPlan,
    opts: &RpnOptions,
) -> Result<(ServerState, Vec<ClientState>, Vec<Transfer>), ProtoError> {
    fed.hp.validate()?;
    if plan.clients() != fed.hp.total_clients {
        return Err(ProtoError::ClientCount { expected: fed.hp.total_clients, actual: plan.clients() });
    }
    let initial = fed.arch.init_params(fed.hp.seed);
    let frame = codec::encode_full(0, &initial)?;
    let mut transfers = Vec::new();
    let clients = plan
        .assignments
        .iter()
        .enumerate()
        .map(|(id, indices)| {
            transfers.push(Transfer {
                round: 0,
                client: id,
                direction: Direction::Download,
                payload: Payload::FullModel,
                bytes: frame.len(),
            });
            let base = codec::decode(&frame)?.into_params()?;
            Ok(ClientState { id, indices: indices.clone(), current: base.clone(), base, synced_round: 0 })
        })
        .collect::<Result<Vec<_>, ProtoError>>()?;
    Ok((ServerState::new(initial, fed.hp.seed, opts), clients, transfers))
}

/// Result of one successful round.
#[derive(Debug, Clone)]
pub struct RoundOutcome<S, C> {
    pub state: S,
    pub clients: C,
    pub metrics: RoundMetrics,
    pub transfers: Vec<Transfer>,
    pub selected: Vec<usize>,
}

/// One round of the residual-pooling server.
///
/// Selected clients get the catch-up frame, train and upload their pooled
/// residual; the server averages the uploads in ascending client order and
/// appends the aggregate to its history. Any client failure aborts the round
/// with `state` and `clients` untouched.
pub fn server_round(
    state: &ServerState,
    clients: &[ClientState],
    fed: &Federation<'_>,
    opts: &RpnOptions,
    faults: &FaultPlan,
    eval: Option<&Dataset>,
) -> Result<RoundOutcome<ServerState, Vec<ClientState>>, ProtoError> {
    let started = Instant::now();
    let hp = &fed.hp;
    let round = state.round + 1;
    if round > hp.rounds {
        return Err(ProtoError::RoundOutOfRange { round, rounds: hp.rounds });
    }
    if clients.len() != hp.total_clients {
        return Err(ProtoError::ClientCount { expected: hp.total_clients, actual: clients.len() });
    }
    let selected = select_clients(hp.total_clients, hp.clients_per_round, round, state.seed)?;
    let down = codec::encode(state.round as u32, &state.cumulative)?;

    let results = selected
        .par_iter()
        .map(|&id| {
            let received = codec::decode(&down)?.into_delta();
            let catch_up = CatchUp { through_round: state.round, cumulative: received };
            if faults.fails(round, id) {
                return Err(ProtoError::ClientFailed { client: id, round });
            }
            let (delta, next) = client_update(&clients[id], round, &catch_up, fed, opts)?;
            let up = codec::encode(round as u32, &delta)?;
            Ok((id, next, up))
        })
        .collect::<Result<Vec<_>, ProtoError>>()?;

    let mut transfers = Vec::with_capacity(2 * selected.len());
    let mut uploads = Vec::with_capacity(selected.len());
    let mut weights = Vec::with_capacity(selected.len());
    let mut next_clients = clients.to_vec();
    for (id, next, up) in results {
        transfers.push(Transfer {
            round,
            client: id,
            direction: Direction::Download,
            payload: Payload::Delta,
            bytes: down.len(),
        });
        transfers.push(Transfer {
            round,
            client: id,
            direction: Direction::Upload,
            payload: Payload::Delta,
            bytes: up.len(),
        });
        uploads.push(codec::decode(&up)?.into_delta());
        weights.push(match opts.weighting {
            Weighting::Uniform => 1.0,
            Weighting::DatasetSize => next.indices.len() as f64,
        });
        next_clients[id] = next;
    }
    let aggregate = aggregate_weighted(&uploads, &weights)?;
    let mut cumulative = add_deltas(&state.cumulative, &aggregate)?;
    cumulative.entries.iter_mut().for_each(|e| e.mask = None);
    let mut history = state.history.clone();
    history.push(aggregate);
    let next_state = ServerState { round, initial: state.initial.clone(), history, cumulative, seed: state.seed };
    let eval = evaluate(fed.arch, &next_state.global_model()?, eval)?;
    let metrics = RoundMetrics::from_transfers(round, &transfers, eval, started);
    Ok(RoundOutcome { state: next_state, clients: next_clients, metrics, transfers, selected })
}

/// Round-0 metrics of an RPN run (initial broadcast plus evaluation of `G⁰`).
pub fn initial_metrics(
    arch: &Architecture,
    model: &ModelParams,
    transfers: &[Transfer],
    eval: Option<&Dataset>,
) -> Result<RoundMetrics, ProtoError> {
    let started = Instant::now();
    let e = evaluate(arch, model, eval)?;
    Ok(RoundMetrics::from_transfers(0, transfers, e, started))
}

/// Server state of the full-model FedAvg baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct FedAvgState {
    pub round: usize,
    pub global: ModelParams,
    pub seed: u64,
}

impl FedAvgState {
    pub fn new(fed: &Federation<'_>) -> Result<Self, ProtoError> {
        fed.hp.validate()?;
        Ok(FedAvgState { round: 0, global: fed.arch.init_params(fed.hp.seed), seed: fed.hp.seed })
    }
}

/// One FedAvg round: selected clients download the full global model, train,
/// and upload their full parameters, which the server averages.
///
/// Selection and shuffling draw from the same streams as [`server_round`],
/// so paired runs see the same clients and minibatches.
pub fn fedavg_round(
    state: &FedAvgState,
    plan: &PartitionPlan,
    fed: &Federation<'_>,
    weighting: Weighting,
    faults: &FaultPlan,
    eval: Option<&Dataset>,
) -> Result<RoundOutcome<FedAvgState, ()>, ProtoError> {
    let started = Instant::now();
    let hp = &fed.hp;
    let round = state.round + 1;
    if round > hp.rounds {
        return Err(ProtoError::RoundOutOfRange { round, rounds: hp.rounds });
    }
    if plan.clients() != hp.total_clients {
        return Err(ProtoError::ClientCount { expected: hp.total_clients, actual: plan.clients() });
    }
    let selected = select_clients(hp.total_clients, hp.clients_per_round, round, state.seed)?;
    let down = codec::encode_full(state.round as u32, &state.global)?;

    let results = selected
        .par_iter()
        .map(|&id| {
            let received = codec::decode(&down)?.into_params()?;
            if faults.fails(round, id) {
                return Err(ProtoError::ClientFailed { client: id, round });
            }
            let mut rng = stream(state.seed, Purpose::Shuffle, id as u64, round as u64);
            let trained = train_local(fed.arch, &received, fed.train, &plan.assignments[id], &hp.local(), &mut rng)?;
            Ok((id, codec::encode_full(round as u32, &trained)?))
        })
        .collect::<Result<Vec<_>, ProtoError>>()?;

    let mut transfers = Vec::with_capacity(2 * selected.len());
    let mut models = Vec::with_capacity(selected.len());
    let mut weights = Vec::with_capacity(selected.len());
    for (id, up) in results {
        transfers.push(Transfer {
            round,
            client: id,
            direction: Direction::Download,
            payload: Payload::FullModel,
            bytes: down.len(),
        });
        transfers.push(Transfer {
            round,
            client: id,
            direction: Direction::Upload,
            payload: Payload::FullModel,
            bytes: up.len(),
        });
        models.push(PooledDelta::from_params(&codec::decode(&up)?.into_params()?));
        weights.push(match weighting {
            Weighting::Uniform => 1.0,
            Weighting::DatasetSize => plan.assignments[id].len() as f64,
        });
    }
    let mean = aggregate_weighted(&models, &weights)?;
    let global = mean.into_params()?;
    let next = FedAvgState { round, global, seed: state.seed };
    let eval = evaluate(fed.arch, &next.global, eval)?;
    let metrics = RoundMetrics::from_transfers(round, &transfers, eval, started);
    Ok(RoundOutcome { state: next, clients: (), metrics, transfers, selected })
}
