//! Federation runtime: the server session and client actor that speak the
//! wire protocol over any [`Connection`].
//!
//! The server registers clients (ids assigned monotonically from 1), then
//! drives queries and training rounds; clients execute kernels and local
//! training against their private partition and upload only abstracted
//! payloads. The same actor code runs over simulated links and TCP sockets.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::fl::{local_train, ClientUpdate, FlError, ModelParams, TrainConfig, TrainSet};
use crate::model::{validate_dataset, ClientDataset, ClientDescriptor, ModelError};
use crate::query::{
    kernels::execute_kernel, ClientResponse, QueryCohort, QueryError, QuerySpec,
};
use crate::transport::{Connection, Envelope, MsgKind, TransportError};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Fl(#[from] FlError),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("clients {0:?} missed the training round deadline")]
    MissingUpdates(Vec<u64>),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn bad_payload(e: impl std::fmt::Display) -> FederationError {
    FederationError::Protocol(format!("bad payload: {e}"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegisterPayload {
    domain_tag: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegisterAckPayload {
    client_id: u64,
    epoch: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ErrorPayload {
    code: String,
    message: String,
}

/// Pooled feature statistics broadcast for local standardization: predictor
/// columns in schema order, target separate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizeStats {
    pub predictor_means: Vec<f64>,
    pub predictor_stds: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

/// Builds the standardized training view of a client partition.
pub fn standardized_trainset(
    ds: &ClientDataset,
    stats: &StandardizeStats,
) -> Result<TrainSet, FederationError> {
    let predictors = ds.schema.numeric_predictors();
    if predictors.len() != stats.predictor_means.len() {
        return Err(FederationError::Protocol(
            "standardization width does not match schema".into(),
        ));
    }
    let target_col = ds
        .schema
        .target_column()
        .ok_or_else(|| FederationError::Protocol("target is not numeric".into()))?;
    let mut set = TrainSet::default();
    for row in &ds.rows {
        let input: Vec<f64> = predictors
            .iter()
            .enumerate()
            .map(|(k, (col, _))| (row[*col] - stats.predictor_means[k]) / stats.predictor_stds[k])
            .collect();
        set.inputs.push(input);
        set.targets
            .push((row[target_col] - stats.target_mean) / stats.target_std);
    }
    Ok(set)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BroadcastPayload {
    round: u64,
    model: String,
    train: TrainConfig,
    standardize: StandardizeStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct UpdatePayload {
    round: u64,
    model: String,
    k_n: u64,
    train_loss: f64,
}

/// Runs the client side of the protocol until BYE or disconnect.
///
/// The dataset is built after registration so it can depend on the assigned
/// client id (TCP-mode clients derive their partition from it).
pub fn run_client<C, F>(mut conn: C, domain_tag: &str, build: F) -> Result<(), FederationError>
where
    C: Connection,
    F: FnOnce(u64) -> Result<ClientDataset, FederationError>,
{
    let mut counter = 0u64;
    let mut next_id = || {
        counter += 1;
        format!("c-{counter}")
    };

    conn.send(&Envelope::new(
        MsgKind::Register,
        next_id(),
        serde_json::to_value(RegisterPayload { domain_tag: domain_tag.into() }).unwrap(),
    ))?;
    let ack = conn.recv()?;
    if ack.kind != MsgKind::RegisterAck {
        return Err(FederationError::Protocol(format!(
            "expected REGISTER_ACK, got {:?}",
            ack.kind
        )));
    }
    let ack: RegisterAckPayload = serde_json::from_value(ack.payload).map_err(bad_payload)?;
    let dataset = validate_dataset(build(ack.client_id)?)?;
    if dataset.client_id != ack.client_id {
        return Err(FederationError::Protocol("dataset id mismatch".into()));
    }
    let epoch = ack.epoch;

    loop {
        let envelope = match conn.recv() {
            Ok(env) => env,
            Err(TransportError::Closed) => return Ok(()),
            Err(e) => return Err(e.into()),
        };
        match envelope.kind {
            MsgKind::Query => {
                let spec: QuerySpec =
                    serde_json::from_value(envelope.payload).map_err(bad_payload)?;
                match execute_kernel(&dataset, &spec, epoch) {
                    Ok(response) => conn.send(&Envelope::reply(
                        MsgKind::Response,
                        next_id(),
                        envelope.msg_id,
                        serde_json::to_value(&response).unwrap(),
                    ))?,
                    Err(e) => conn.send(&Envelope::reply(
                        MsgKind::Error,
                        next_id(),
                        envelope.msg_id,
                        serde_json::to_value(ErrorPayload {
                            code: "query".into(),
                            message: e.to_string(),
                        })
                        .unwrap(),
                    ))?,
                }
            }
            MsgKind::ModelBroadcast => {
                let payload: BroadcastPayload =
                    serde_json::from_value(envelope.payload).map_err(bad_payload)?;
                let result = ModelParams::from_base64(&payload.model)
                    .map_err(FederationError::from)
                    .and_then(|params| {
                        let set = standardized_trainset(&dataset, &payload.standardize)?;
                        local_train(&params, &set, &payload.train, dataset.client_id)
                            .map_err(FederationError::from)
                    });
                match result {
                    Ok(update) => conn.send(&Envelope::reply(
                        MsgKind::ModelUpdate,
                        next_id(),
                        envelope.msg_id,
                        serde_json::to_value(UpdatePayload {
                            round: payload.round,
                            model: update.params.to_base64(),
                            k_n: update.k_n,
                            train_loss: update.local_train_loss,
                        })
                        .unwrap(),
                    ))?,
                    Err(e) => conn.send(&Envelope::reply(
                        MsgKind::Error,
                        next_id(),
                        envelope.msg_id,
                        serde_json::to_value(ErrorPayload {
                            code: "train".into(),
                            message: e.to_string(),
                        })
                        .unwrap(),
                    ))?,
                }
            }
            MsgKind::Bye => return Ok(()),
            other => {
                return Err(FederationError::Protocol(format!(
                    "unexpected {other:?} on client"
                )))
            }
        }
    }
}

struct Member {
    client_id: u64,
    descriptor: ClientDescriptor,
    conn: Box<dyn Connection>,
}

/// Server side of a formed federation.
pub struct Federation {
    members: Vec<Member>,
    epoch: u64,
    timeout: Duration,
    counter: u64,
}

impl Federation {
    /// Accepts one registration per connection, assigning client ids 1..=N
    /// in connection order.
    pub fn form(
        conns: Vec<Box<dyn Connection>>,
        epoch: u64,
        timeout: Duration,
    ) -> Result<Self, FederationError> {
        let mut members = Vec::with_capacity(conns.len());
        let mut counter = 0u64;
        for (index, mut conn) in conns.into_iter().enumerate() {
            let client_id = index as u64 + 1;
            let register = conn
                .try_recv(timeout)?
                .ok_or_else(|| FederationError::Protocol("registration timed out".into()))?;
            if register.kind != MsgKind::Register {
                return Err(FederationError::Protocol(format!(
                    "expected REGISTER, got {:?}",
                    register.kind
                )));
            }
            let payload: RegisterPayload =
                serde_json::from_value(register.payload.clone()).map_err(bad_payload)?;
            counter += 1;
            conn.send(&Envelope::reply(
                MsgKind::RegisterAck,
                format!("s-{counter}"),
                register.msg_id,
                serde_json::to_value(RegisterAckPayload { client_id, epoch }).unwrap(),
            ))?;
            members.push(Member {
                client_id,
                descriptor: ClientDescriptor {
                    client_id,
                    domain_tag: payload.domain_tag,
                    address: format!("conn-{index}"),
                },
                conn,
            });
        }
        Ok(Federation { members, epoch, timeout, counter })
    }

    pub fn client_ids(&self) -> Vec<u64> {
        self.members.iter().map(|m| m.client_id).collect()
    }

    /// Registration metadata of every member, in client-id order.
    pub fn descriptors(&self) -> Vec<ClientDescriptor> {
        self.members.iter().map(|m| m.descriptor.clone()).collect()
    }

    pub fn epoch_value(&self) -> u64 {
        self.epoch
    }

    fn next_msg_id(&mut self) -> String {
        self.counter += 1;
        format!("s-{}", self.counter)
    }

    fn member_mut(&mut self, client_id: u64) -> Result<&mut Member, FederationError> {
        self.members
            .iter_mut()
            .find(|m| m.client_id == client_id)
            .ok_or(FederationError::Query(QueryError::UnknownClient(client_id)))
    }

    /// Sends one request to every cohort member, then polls the connections
    /// round-robin for correlated replies until the deadline. Returns
    /// (client, reply) pairs; silent members are simply absent.
    fn round_trip(
        &mut self,
        cohort: &[u64],
        kind: MsgKind,
        payload: &Value,
    ) -> Result<Vec<(u64, Envelope)>, FederationError> {
        let mut pending: Vec<(u64, String)> = Vec::with_capacity(cohort.len());
        for &id in cohort {
            let msg_id = self.next_msg_id();
            let env = Envelope::new(kind, msg_id.clone(), payload.clone());
            self.member_mut(id)?.conn.send(&env)?;
            pending.push((id, msg_id));
        }
        let deadline = Instant::now() + self.timeout;
        let slice = Duration::from_millis(5);
        let mut replies = Vec::with_capacity(cohort.len());
        let mut out_of_time = false;
        while !pending.is_empty() && !out_of_time {
            out_of_time = Instant::now() >= deadline;
            let mut still_pending = Vec::with_capacity(pending.len());
            'clients: for (id, msg_id) in pending {
                let member = self.member_mut(id)?;
                // After the deadline one last non-blocking-ish drain poll
                // picks up replies that already arrived.
                let wait = if out_of_time {
                    Duration::from_millis(1)
                } else {
                    slice.min(deadline.saturating_duration_since(Instant::now()) + slice)
                };
                loop {
                    match member.conn.try_recv(wait) {
                        Ok(Some(env)) if env.correlates.as_deref() == Some(&msg_id) => {
                            replies.push((id, env));
                            continue 'clients;
                        }
                        // Stale reply to an earlier, timed-out request.
                        Ok(Some(_)) => continue,
                        Ok(None) => break,
                        Err(TransportError::Closed) => continue 'clients,
                        Err(e) => return Err(e.into()),
                    }
                }
                still_pending.push((id, msg_id));
            }
            pending = still_pending;
        }
        replies.sort_by_key(|(id, _)| cohort.iter().position(|c| c == id));
        Ok(replies)
    }

    /// One synchronous FedAvg round over the cohort: broadcast, local train,
    /// collect. Every cohort member must report back.
    pub fn training_round(
        &mut self,
        round: u64,
        cohort: &[u64],
        params: &ModelParams,
        train: &TrainConfig,
        standardize: &StandardizeStats,
    ) -> Result<Vec<ClientUpdate>, FederationError> {
        let payload = serde_json::to_value(BroadcastPayload {
            round,
            model: params.to_base64(),
            train: train.clone(),
            standardize: standardize.clone(),
        })
        .unwrap();
        let replies = self.round_trip(cohort, MsgKind::ModelBroadcast, &payload)?;
        let mut updates = Vec::with_capacity(replies.len());
        for (client_id, env) in replies {
            match env.kind {
                MsgKind::ModelUpdate => {
                    let p: UpdatePayload =
                        serde_json::from_value(env.payload).map_err(bad_payload)?;
                    updates.push(ClientUpdate {
                        client_id,
                        params: ModelParams::from_base64(&p.model)?,
                        k_n: p.k_n,
                        local_train_loss: p.train_loss,
                    });
                }
                MsgKind::Error => {
                    let e: ErrorPayload =
                        serde_json::from_value(env.payload).map_err(bad_payload)?;
                    return Err(FederationError::Protocol(format!(
                        "client {client_id} failed to train: {}",
                        e.message
                    )));
                }
                other => {
                    return Err(FederationError::Protocol(format!(
                        "unexpected {other:?} in training round"
                    )))
                }
            }
        }
        let missing: Vec<u64> = cohort
            .iter()
            .copied()
            .filter(|id| !updates.iter().any(|u| u.client_id == *id))
            .collect();
        if !missing.is_empty() {
            return Err(FederationError::MissingUpdates(missing));
        }
        updates.sort_by_key(|u| u.client_id);
        Ok(updates)
    }

    /// Disconnects every client. Send failures are ignored: the peer may
    /// already be gone.
    pub fn shutdown(mut self) {
        let msg_id = self.next_msg_id();
        for member in &mut self.members {
            let _ = member
                .conn
                .send(&Envelope::new(MsgKind::Bye, msg_id.clone(), json!(null)));
        }
    }
}

impl QueryCohort for Federation {
    fn epoch(&self) -> u64 {
        self.epoch
    }

    fn registered(&self) -> Vec<u64> {
        self.client_ids()
    }

    fn dispatch(&mut self, spec: &QuerySpec) -> Result<Vec<ClientResponse>, QueryError> {
        let payload = serde_json::to_value(spec).expect("query spec serializes");
        let replies = self
            .round_trip(&spec.cohort, MsgKind::Query, &payload)
            .map_err(|e| match e {
                FederationError::Query(q) => q,
                other => QueryError::ClientFailure { client_id: 0, message: other.to_string() },
            })?;
        let mut responses = Vec::with_capacity(replies.len());
        for (client_id, env) in replies {
            match env.kind {
                MsgKind::Response => {
                    let r: ClientResponse = serde_json::from_value(env.payload).map_err(|e| {
                        QueryError::ClientFailure { client_id, message: e.to_string() }
                    })?;
                    responses.push(r);
                }
                MsgKind::Error => {
                    let e: ErrorPayload = serde_json::from_value(env.payload).map_err(|e| {
                        QueryError::ClientFailure { client_id, message: e.to_string() }
                    })?;
                    return Err(QueryError::ClientFailure { client_id, message: e.message });
                }
                other => {
                    return Err(QueryError::ClientFailure {
                        client_id,
                        message: format!("unexpected {other:?}"),
                    })
                }
            }
        }
        Ok(responses)
    }
}
