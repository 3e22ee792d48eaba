//! FedAvg aggregation, the global objective, client selection, and the
//! synchronous round state machine.
//!
//! A round is broadcast → local training → barrier → aggregate → evaluate →
//! publish. Clients and the server communicate only through the transport;
//! the orchestrator owns the round state exclusively. Client RNG streams are
//! derived from (seed, round, client, epoch), so concurrent and sequential
//! execution produce identical results, and aggregation always consumes
//! contributions in client-id order.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::datashard::ClientShard;
use crate::error::{Error, Result, RoundPhase};
use crate::metrics::{
    evaluate, profile_inference, profile_round, EvalReport, RoundTimers, TimeProfile,
    INFERENCE_PROFILE_SAMPLES,
};
use crate::rng;
use crate::seqnet::{
    init_parameters, loss_and_gradients, train_local_epoch, ArchitectureSpec, EncodedBatch,
    ForwardMode, LocalTrainConfig, ModelParameters,
};
use crate::textproc::{EmbeddingMatrix, EncodedSample};
use crate::transport::{
    deserialize_params, serialize_params, BlobKey, Endpoint, EndpointTransport, MessageFilter,
    MessageKind, Transport,
};

/// Everything that parameterizes one federation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// Rounds T.
    pub total_rounds: usize,
    /// Clients N.
    pub total_clients: usize,
    /// Participants per round K.
    pub participants_per_round: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub arch: ArchitectureSpec,
    /// A client excluded from every round (the drop-one scenario). When set,
    /// K must be N−1.
    pub dropout_client: Option<usize>,
    pub seed: u64,
    pub barrier_timeout_secs: u64,
    pub poll_interval_ms: u64,
}

impl Default for FederationConfig {
    fn default() -> FederationConfig {
        FederationConfig {
            total_rounds: 10,
            total_clients: 5,
            participants_per_round: 5,
            learning_rate: 0.001,
            batch_size: 32,
            local_epochs: 1,
            arch: ArchitectureSpec::new(crate::seqnet::CellKind::Gru),
            dropout_client: None,
            seed: 0,
            barrier_timeout_secs: 300,
            poll_interval_ms: 200,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.total_clients == 0 {
            return Err(Error::config("clients", "must be at least 1"));
        }
        if self.participants_per_round == 0 || self.participants_per_round > self.total_clients {
            return Err(Error::config(
                "participants_per_round",
                format!(
                    "must be in 1..={}, got {}",
                    self.total_clients, self.participants_per_round
                ),
            ));
        }
        match self.dropout_client {
            Some(c) if c >= self.total_clients => {
                return Err(Error::config(
                    "dropout_client",
                    format!("client {c} does not exist (N = {})", self.total_clients),
                ));
            }
            Some(_) if self.participants_per_round != self.total_clients - 1 => {
                return Err(Error::config(
                    "participants_per_round",
                    "must be N−1 when dropout_client is set",
                ));
            }
            None if self.participants_per_round != self.total_clients => {
                return Err(Error::config(
                    "participants_per_round",
                    "must equal clients unless dropout_client is set",
                ));
            }
            _ => {}
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.local_epochs == 0 {
            return Err(Error::config("local_epochs", "must be positive"));
        }
        Ok(())
    }
}

/// The RNG stream seed a client uses for one local epoch of one round.
/// Centralized training uses the same derivation with client 0, which is
/// what makes the single-client federation equal a centralized run.
pub fn client_stream_seed(seed: u64, round: usize, client_id: usize, epoch: usize) -> u64 {
    rng::mix(&[seed, round as u64, client_id as u64, epoch as u64])
}

/// Size-weighted mean of parameter contributions: each tensor entry becomes
/// Σ (|D_k| / |D|) · w_k, with |D| the total over the contributing subset.
pub fn fedavg(contributions: &[(ModelParameters, usize)]) -> Result<ModelParameters> {
    let Some(((first, _), rest)) = contributions.split_first() else {
        return Err(Error::NoContributions);
    };
    for (params, _) in rest {
        if !first.same_layout(params) {
            return Err(Error::LayoutMismatch(
                "fedavg contributions disagree on layout".into(),
            ));
        }
    }
    let total: usize = contributions.iter().map(|(_, size)| size).sum();
    if total == 0 {
        return Err(Error::ZeroTotalSize);
    }

    let values = first
        .layers()
        .iter()
        .enumerate()
        .map(|(idx, layer)| {
            let mut acc = ndarray::ArrayD::<f64>::zeros(layer.values.raw_dim());
            for (params, size) in contributions {
                let weight = *size as f64 / total as f64;
                acc.zip_mut_with(&params.layers()[idx].values, |a, &v| *a += weight * v);
            }
            acc
        })
        .collect();
    Ok(first.with_values(values))
}

/// Mean loss of one shard under the current parameters (Eval mode).
fn shard_loss(
    shard: &ClientShard,
    params: &ModelParameters,
    embedding: &EmbeddingMatrix,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in shard.samples.chunks(64) {
        let members: Vec<&EncodedSample> = chunk.iter().collect();
        let batch = EncodedBatch::from_samples(&members, params.arch().num_classes)?;
        let (loss, _) = loss_and_gradients(params, embedding, &batch, ForwardMode::Eval)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / shard.len() as f64)
}

/// The federation objective: Σ (|D_k| / |D|) · L_k(W) over the given shards.
pub fn global_objective(
    shards: &[&ClientShard],
    params: &ModelParameters,
    embedding: &EmbeddingMatrix,
) -> Result<f64> {
    let total: usize = shards.iter().map(|s| s.len()).sum();
    if total == 0 {
        return Err(Error::EmptyShard);
    }
    let mut objective = 0.0;
    for shard in shards {
        if shard.is_empty() {
            continue;
        }
        let weight = shard.len() as f64 / total as f64;
        objective += weight * shard_loss(shard, params, embedding)?;
    }
    Ok(objective)
}

/// Deterministic participant selection: everyone, or everyone except the
/// configured dropout client. Always returns K ids, ascending.
pub fn select_clients(_round: usize, config: &FederationConfig) -> Vec<usize> {
    (0..config.total_clients)
        .filter(|&k| config.dropout_client != Some(k))
        .collect()
}

/// One client's shard plus the embedding table it trains with. In common
/// tokenizer mode every client shares the server's table.
#[derive(Clone)]
pub struct ClientData {
    pub shard: ClientShard,
    pub embedding: Arc<EmbeddingMatrix>,
}

/// Everything the orchestrator holds for a run.
#[derive(Clone)]
pub struct FederationData {
    /// Indexed by client id.
    pub clients: Vec<ClientData>,
    pub testset: Vec<EncodedSample>,
    pub server_embedding: Arc<EmbeddingMatrix>,
}

/// State of the round in flight.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round: usize,
    pub global_params: ModelParameters,
    pub participants: Vec<usize>,
    pub received: BTreeMap<usize, ModelParameters>,
    pub phase: RoundPhase,
}

impl RoundState {
    /// Pre-round state holding the freshly initialized global model.
    pub fn initial(global_params: ModelParameters) -> RoundState {
        RoundState {
            round: 0,
            global_params,
            participants: Vec::new(),
            received: BTreeMap::new(),
            phase: RoundPhase::Published,
        }
    }

    /// Advances to the broadcast phase of the next round.
    pub fn next_round(self, round: usize, participants: Vec<usize>) -> RoundState {
        RoundState {
            round,
            global_params: self.global_params,
            participants,
            received: BTreeMap::new(),
            phase: RoundPhase::Broadcast,
        }
    }
}

/// Per-client evaluation embedded in a round record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEval {
    pub client: usize,
    pub report: EvalReport,
}

/// Byte counters of one endpoint for one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointBytes {
    pub endpoint: String,
    pub transmitted_bytes: u64,
    pub received_bytes: u64,
    pub poll_count: u64,
    pub poll_overhead_bytes: u64,
}

/// Everything recorded about one round: global and per-client metrics, the
/// byte ledger, and the timing profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub global: EvalReport,
    pub locals: Vec<LocalEval>,
    pub global_objective: f64,
    pub bytes: Vec<EndpointBytes>,
    pub timing: TimeProfile,
}

impl RoundRecord {
    pub fn summary(&self) -> String {
        let tx: u64 = self.bytes.iter().map(|b| b.transmitted_bytes).sum();
        let rx: u64 = self.bytes.iter().map(|b| b.received_bytes).sum();
        format!(
            "round {:>3}: acc {:.4} prec {:.4} rec {:.4} obj {:.4} | tx {:.3} MB rx {:.3} MB | train {:.0} ms",
            self.round,
            self.global.accuracy,
            self.global.macro_precision,
            self.global.macro_recall,
            self.global_objective,
            tx as f64 / 1e6,
            rx as f64 / 1e6,
            self.timing.training_ms,
        )
    }
}

/// How long to keep polling before giving up. `None` means poll exactly
/// once and expect the condition to already hold (the in-process case).
#[derive(Debug, Clone, Copy)]
pub struct WaitParams {
    pub timeout: Duration,
    pub interval: Duration,
}

impl WaitParams {
    fn from_config(config: &FederationConfig) -> WaitParams {
        WaitParams {
            timeout: Duration::from_secs(config.barrier_timeout_secs),
            interval: Duration::from_millis(config.poll_interval_ms.max(1)),
        }
    }
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let value = f();
    (value, start.elapsed())
}

/// The client half of one round: wait for the previous global model, train
/// locally, upload, announce completion, then probe once for the next
/// global model (the early-finisher check that inflates received bytes).
pub fn client_round_step(
    transport: &Transport,
    client_id: usize,
    round: usize,
    client: &ClientData,
    config: &FederationConfig,
    wait: Option<WaitParams>,
    mut timers: Option<&mut RoundTimers>,
) -> Result<()> {
    let samples = &client.shard.samples;
    let embedding = &client.embedding;
    let mut handle = transport.endpoint(Endpoint::Client(client_id as u32));
    handle.set_round(round as u32);
    let prev = (round - 1) as u32;

    let ready_filter = MessageFilter::kind_round(MessageKind::GlobalPublished, prev);
    let (ready, poll_time) = timed(|| poll_messages(&handle, &ready_filter, 1, wait));
    if let Some(t) = timers.as_deref_mut() {
        t.add_download(poll_time);
    }
    if ready?.is_empty() {
        return Err(Error::Protocol(format!(
            "global model for round {prev} never appeared on the board"
        )));
    }

    let (payload, dl) = timed(|| handle.blob_get(&BlobKey::Global { round: prev }));
    if let Some(t) = timers.as_deref_mut() {
        t.add_download(dl);
    }
    let (restored, de) = timed(|| deserialize_params(&payload?, &config.arch));
    if let Some(t) = timers.as_deref_mut() {
        t.add_overhead(de);
    }
    let mut params = restored?;

    for epoch in 0..config.local_epochs {
        let cfg = LocalTrainConfig {
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            seed: client_stream_seed(config.seed, round, client_id, epoch),
        };
        let (trained, tt) = timed(|| train_local_epoch(&params, embedding, samples, &cfg));
        if let Some(t) = timers.as_deref_mut() {
            t.add_training(tt);
        }
        params = trained?;
    }

    let (bytes, ser) = timed(|| serialize_params(&params));
    if let Some(t) = timers.as_deref_mut() {
        t.add_overhead(ser);
    }
    let bytes = bytes?;
    let key = BlobKey::Local {
        round: round as u32,
        client_id: client_id as u32,
    };
    let (put, ul) = timed(|| {
        handle.blob_put(&key, &bytes)?;
        handle.post_now(MessageKind::ClientDone, round as u32)
    });
    if let Some(t) = timers.as_deref_mut() {
        t.add_upload(ul);
    }
    put?;

    // has the server finished already? (it has not; this is the polling
    // the communication-cost analysis attributes the received-byte
    // asymmetry to)
    let next_filter = MessageFilter::kind_round(MessageKind::GlobalPublished, round as u32);
    let (_, probe) = timed(|| handle.board_poll(&next_filter));
    if let Some(t) = timers {
        t.add_download(probe);
    }
    Ok(())
}

fn poll_messages(
    handle: &EndpointTransport,
    filter: &MessageFilter,
    min_count: usize,
    wait: Option<WaitParams>,
) -> Result<Vec<crate::transport::SyncMessage>> {
    let deadline = wait.map(|w| Instant::now() + w.timeout);
    loop {
        let msgs = handle.board_poll(filter)?;
        if msgs.len() >= min_count {
            return Ok(msgs);
        }
        match (wait, deadline) {
            (Some(w), Some(d)) if Instant::now() < d => std::thread::sleep(w.interval),
            _ => return Ok(msgs),
        }
    }
}

/// Executes one full synchronous round and returns the published state plus
/// its record. With `simulate_clients`, the participants run in-process
/// through the same transport calls a remote agent would make; otherwise
/// the server waits at the barrier for external agents.
pub fn run_round(
    state: RoundState,
    data: &FederationData,
    transport: &Transport,
    config: &FederationConfig,
    simulate_clients: bool,
) -> Result<(RoundState, RoundRecord)> {
    let round = state.round;
    let phase_err = |phase: RoundPhase| move |e: Error| e.in_phase(round, phase);
    if state.phase != RoundPhase::Broadcast {
        return Err(Error::Protocol(format!(
            "run_round expects Broadcast phase, found {}",
            state.phase
        )));
    }

    let mut server = transport.endpoint(Endpoint::Server);
    server.set_round(round as u32);
    let mut timers = RoundTimers::default();
    let prev = (round - 1) as u32;

    // Broadcast: make sure the input global model is out there. Rounds after
    // the first find it already published by the previous round.
    let published = server
        .board_poll(&MessageFilter::kind_round(MessageKind::GlobalPublished, prev))
        .map_err(phase_err(RoundPhase::Broadcast))?;
    if published.is_empty() {
        let (payload, ser) = timed(|| serialize_params(&state.global_params));
        timers.add_overhead(ser);
        let payload = payload.map_err(phase_err(RoundPhase::Broadcast))?;
        let (sent, ul) = timed(|| {
            server.blob_put(&BlobKey::Global { round: prev }, &payload)?;
            server.post_now(MessageKind::GlobalPublished, prev)
        });
        timers.add_upload(ul);
        sent.map_err(phase_err(RoundPhase::Broadcast))?;
    }

    // Local training: in-process participants execute sequentially in id
    // order; determinism does not depend on this order because every client
    // stream is derived from (seed, round, client).
    if simulate_clients {
        for &client_id in &state.participants {
            client_round_step(
                transport,
                client_id,
                round,
                &data.clients[client_id],
                config,
                None,
                Some(&mut timers),
            )
            .map_err(phase_err(RoundPhase::LocalTraining))?;
        }
    }

    // Barrier: wait until every participant has posted completion.
    let wait = if simulate_clients {
        None
    } else {
        Some(WaitParams::from_config(config))
    };
    let done_filter = MessageFilter::kind_round(MessageKind::ClientDone, round as u32);
    let (done, dl) = timed(|| poll_messages(&server, &done_filter, state.participants.len(), wait));
    timers.add_download(dl);
    let done = done.map_err(phase_err(RoundPhase::Aggregating))?;
    let senders: BTreeSet<usize> = done
        .iter()
        .filter_map(|m| match m.sender {
            Endpoint::Client(id) => Some(id as usize),
            Endpoint::Server => None,
        })
        .collect();
    let missing: Vec<usize> = state
        .participants
        .iter()
        .copied()
        .filter(|k| !senders.contains(k))
        .collect();
    if !missing.is_empty() {
        return Err(Error::BarrierTimeout { round, missing }.in_phase(round, RoundPhase::Aggregating));
    }

    // Collect local models in client-id order.
    let mut received = BTreeMap::new();
    for &client_id in &state.participants {
        let key = BlobKey::Local {
            round: round as u32,
            client_id: client_id as u32,
        };
        let (payload, dl) = timed(|| server.blob_get(&key));
        timers.add_download(dl);
        let payload = payload.map_err(phase_err(RoundPhase::Aggregating))?;
        let (params, de) = timed(|| deserialize_params(&payload, &config.arch));
        timers.add_overhead(de);
        received.insert(client_id, params.map_err(phase_err(RoundPhase::Aggregating))?);
    }

    let contributions: Vec<(ModelParameters, usize)> = received
        .iter()
        .map(|(&k, params)| (params.clone(), data.clients[k].shard.len()))
        .collect();
    let aggregate = fedavg(&contributions).map_err(phase_err(RoundPhase::Aggregating))?;

    // The round's global model is the published artifact, so the state
    // carries the f32-quantized form the blob store will hold. Everyone
    // downstream (evaluation included) sees exactly those values.
    let (payload, ser) = timed(|| serialize_params(&aggregate));
    timers.add_overhead(ser);
    let payload = payload.map_err(phase_err(RoundPhase::Aggregating))?;
    let new_global =
        deserialize_params(&payload, &config.arch).map_err(phase_err(RoundPhase::Aggregating))?;

    // Server-side evaluation of the new global and every local model.
    let global_report = evaluate(&new_global, &data.server_embedding, &data.testset)
        .map_err(phase_err(RoundPhase::Aggregating))?;
    let mut locals = Vec::with_capacity(received.len());
    for (&client, params) in &received {
        let report = evaluate(params, &data.server_embedding, &data.testset)
            .map_err(phase_err(RoundPhase::Aggregating))?;
        locals.push(LocalEval { client, report });
    }
    // Each per-client loss term is computed with that client's own
    // embedding table; the two coincide in common tokenizer mode.
    let total_size: usize = state
        .participants
        .iter()
        .map(|&k| data.clients[k].shard.len())
        .sum();
    let mut objective = 0.0;
    for &k in &state.participants {
        let client = &data.clients[k];
        let weight = client.shard.len() as f64 / total_size as f64;
        objective += weight
            * global_objective(&[&client.shard], &new_global, &client.embedding)
                .map_err(phase_err(RoundPhase::Aggregating))?;
    }

    // Publish the aggregated model for the next round.
    let (sent, ul) = timed(|| {
        server.blob_put(&BlobKey::Global { round: round as u32 }, &payload)?;
        server.post_now(MessageKind::GlobalPublished, round as u32)
    });
    timers.add_upload(ul);
    sent.map_err(phase_err(RoundPhase::Published))?;

    if data.testset.len() >= INFERENCE_PROFILE_SAMPLES {
        timers.inference_us_per_sample = profile_inference(
            &new_global,
            &data.server_embedding,
            &data.testset[..INFERENCE_PROFILE_SAMPLES],
        )
        .map_err(phase_err(RoundPhase::Published))?;
    }

    let ledger = transport.ledger_snapshot();
    let bytes = ledger
        .round_entries(round as u32)
        .into_iter()
        .map(|(endpoint, c)| EndpointBytes {
            endpoint: endpoint.to_string(),
            transmitted_bytes: c.transmitted_bytes,
            received_bytes: c.received_bytes,
            poll_count: c.poll_count,
            poll_overhead_bytes: c.poll_overhead_bytes,
        })
        .collect();

    let record = RoundRecord {
        round,
        global: global_report,
        locals,
        global_objective: objective,
        bytes,
        timing: profile_round(&timers),
    };
    let next_state = RoundState {
        round,
        global_params: new_global,
        participants: state.participants,
        received,
        phase: RoundPhase::Published,
    };
    Ok((next_state, record))
}

/// Outcome of a full run: one record per round plus the final global model.
pub struct FederationOutcome {
    pub records: Vec<RoundRecord>,
    pub final_global: ModelParameters,
}

/// Initializes W⁰, then executes T rounds. Fully deterministic for a fixed
/// seed on the in-memory transport (timings aside).
pub fn run_federation(
    config: &FederationConfig,
    data: &FederationData,
    transport: &Transport,
    simulate_clients: bool,
) -> Result<FederationOutcome> {
    config.validate()?;
    if data.clients.len() != config.total_clients {
        return Err(Error::config(
            "clients",
            format!(
                "config names {} clients but {} shards were prepared",
                config.total_clients,
                data.clients.len()
            ),
        ));
    }
    if data.testset.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    for &k in &select_clients(1, config) {
        if data.clients[k].shard.is_empty() {
            return Err(Error::config(
                "shard_plan",
                format!("client {k} received an empty shard"),
            ));
        }
    }

    let mut state = RoundState::initial(init_parameters(&config.arch, config.seed)?);
    let mut records = Vec::with_capacity(config.total_rounds);
    for round in 1..=config.total_rounds {
        let participants = select_clients(round, config);
        let (next, record) = run_round(
            state.next_round(round, participants),
            data,
            transport,
            config,
            simulate_clients,
        )?;
        log::info!("{}", record.summary());
        records.push(record);
        state = next;
    }
    Ok(FederationOutcome {
        final_global: state.global_params,
        records,
    })
}

/// One centralized epoch with the same checkpoint discipline as the
/// federated path: parameters pass through the f32 wire format both when
/// restored and when saved, exactly as a round restores a downloaded global
/// model and publishes the result. This is what makes a single-client
/// federation and a centralized run coincide parameter-for-parameter.
pub fn centralized_epoch(
    params: &ModelParameters,
    embedding: &EmbeddingMatrix,
    samples: &[EncodedSample],
    config: &FederationConfig,
    round: usize,
) -> Result<ModelParameters> {
    let mut current = deserialize_params(&serialize_params(params)?, params.arch())?;
    for epoch in 0..config.local_epochs {
        let cfg = LocalTrainConfig {
            learning_rate: config.learning_rate,
            batch_size: config.batch_size,
            seed: client_stream_seed(config.seed, round, 0, epoch),
        };
        current = train_local_epoch(&current, embedding, samples, &cfg)?;
    }
    deserialize_params(&serialize_params(&current)?, current.arch())
}

/// Centralized baseline: the whole training set on one node, one record per
/// epoch, no transport traffic.
pub fn run_centralized(
    config: &FederationConfig,
    train: &[EncodedSample],
    testset: &[EncodedSample],
    embedding: &EmbeddingMatrix,
) -> Result<FederationOutcome> {
    config.arch.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyShard);
    }
    if testset.is_empty() {
        return Err(Error::EmptyTestSet);
    }
    let full_shard = ClientShard::new(0, train.to_vec());

    let mut params = init_parameters(&config.arch, config.seed)?;
    let mut records = Vec::with_capacity(config.total_rounds);
    for epoch in 1..=config.total_rounds {
        let mut timers = RoundTimers::default();
        let (trained, tt) = timed(|| centralized_epoch(&params, embedding, train, config, epoch));
        timers.add_training(tt);
        params = trained?;

        let report = evaluate(&params, embedding, testset)?;
        let objective = global_objective(&[&full_shard], &params, embedding)?;
        if testset.len() >= INFERENCE_PROFILE_SAMPLES {
            timers.inference_us_per_sample =
                profile_inference(&params, embedding, &testset[..INFERENCE_PROFILE_SAMPLES])?;
        }
        let record = RoundRecord {
            round: epoch,
            global: report,
            locals: Vec::new(),
            global_objective: objective,
            bytes: Vec::new(),
            timing: profile_round(&timers),
        };
        log::info!("{}", record.summary());
        records.push(record);
    }
    Ok(FederationOutcome {
        records,
        final_global: params,
    })
}
