//! Dataspace connector: contract negotiation and transfer process state
//! machines plus the provider-side data-plane gate.
//!
//! Connectors talk only through a [`Transport`]. Every inbound envelope is
//! signature-checked against the sender's registered key, deduplicated on
//! `(sender, correlationId, messageType)`, and applied only if it is legal in
//! the current state. A side waiting on its peer re-sends its last message on
//! [`Connector::tick`]; replays are answered from the idempotency cache.

pub mod message;
pub mod state;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use thiserror::Error;

use crate::clearinghouse::{ClearingClient, Payload, RecordType};
use crate::clock::Clock;
use crate::datalake::{DataLake, ObjectStore};
use crate::identity::{
    issue_token, verify_credential, verify_token, AccessToken, Credential, InvalidReason, KeyPair, PublicKey, TrustStore,
};
use crate::model::{digest_of, Digest, ParticipantId, SelfDescription};
use crate::policy::{check_well_formed, evaluate, Action, Decision, EvaluationContext, UsagePolicy};

pub use message::*;
pub use state::*;

pub const CHUNK_SIZE: usize = 64 * 1024;
pub const DEFAULT_TRANSFER_TOKEN_TTL: i64 = 300;

pub fn transfer_scope(agreement_id: &str) -> String {
    format!("transfer:pull:{agreement_id}")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConnectorError {
    #[error("unknown provider {0}")]
    UnknownProvider(ParticipantId),
    #[error("transport failure: {0}")]
    TransportFailure(String),
    #[error("{id} is {state}, operation not allowed")]
    WrongState { id: String, state: String },
    #[error("unknown negotiation {0}")]
    UnknownNegotiation(String),
    #[error("unknown agreement {0}")]
    UnknownAgreement(String),
    #[error("unknown transfer {0}")]
    UnknownTransfer(String),
    #[error("negotiation {0} has no consumer countersignature")]
    MissingCountersignature(String),
    #[error("transfer token rejected: {0}")]
    TokenInvalid(String),
    #[error("payload digest {actual} does not match expected {expected}")]
    DigestMismatch { expected: String, actual: String },
    #[error("own credential not valid: {0}")]
    CredentialInvalid(InvalidReason),
    #[error("envelope signature invalid")]
    BadSignature,
    #[error("sender {0} has no registered key")]
    UnknownSender(ParticipantId),
    #[error(transparent)]
    Message(#[from] MessageError),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    #[error("no route to {0}")]
    UnknownPeer(ParticipantId),
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DataPlaneError {
    #[error("token invalid: {0}")]
    TokenInvalid(String),
    #[error("transfer {0} is not active")]
    NotActive(String),
    #[error("asset has no payload")]
    NoPayload,
    #[error("transient failure: {0}")]
    Transient(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub index: u64,
    pub total_chunks: u64,
    pub total_size: u64,
    pub data: Vec<u8>,
}

/// Message delivery and data-plane access between connectors.
pub trait Transport: Send + Sync {
    fn send(&self, to: &ParticipantId, env: &Envelope) -> Result<(), TransportError>;
    fn fetch_chunk(
        &self,
        provider: &ParticipantId,
        transfer_id: &str,
        token: &AccessToken,
        index: u64,
    ) -> Result<Chunk, DataPlaneError>;
}

/// Where a provider reads asset bytes from.
pub trait PayloadSource: Send + Sync {
    fn payload(&self, digest: &Digest) -> Option<Vec<u8>>;
}

impl PayloadSource for ObjectStore {
    fn payload(&self, digest: &Digest) -> Option<Vec<u8>> {
        self.get_object(digest).ok()
    }
}

impl PayloadSource for DataLake {
    fn payload(&self, digest: &Digest) -> Option<Vec<u8>> {
        self.store().get_object(digest).ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProviderMode {
    /// Agree iff the requested policy equals the advertised offer verbatim.
    AutoAccept,
    /// Queue every request for an explicit [`Connector::decide_pending`].
    Manual,
}

#[derive(Debug, Clone)]
pub struct ConnectorConfig {
    pub mode: ProviderMode,
    pub auto_finalize: bool,
    pub transfer_token_ttl: i64,
}

impl Default for ConnectorConfig {
    fn default() -> Self {
        ConnectorConfig {
            mode: ProviderMode::AutoAccept,
            auto_finalize: true,
            transfer_token_ttl: DEFAULT_TRANSFER_TOKEN_TTL,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProviderDecision {
    Accept,
    Counter(UsagePolicy),
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HandleOutcome {
    Processed,
    Duplicate,
    Ignored(&'static str),
}

/// What the consumer asks for when opening a negotiation.
#[derive(Debug, Clone, PartialEq)]
pub struct NegotiationRequest {
    pub provider: ParticipantId,
    pub asset_id: String,
    pub offer_id: String,
    pub policy: UsagePolicy,
    /// Expected payload digest, from the catalogue.
    pub content_digest: Option<Digest>,
    /// Caller-chosen id; reusing one makes the call idempotent.
    pub negotiation_id: Option<String>,
}

impl NegotiationRequest {
    /// Request for an advertised offer, proposing its policy unchanged.
    pub fn for_offer(sd: &SelfDescription, offer_id: &str) -> Self {
        NegotiationRequest {
            provider: sd.provider_id().clone(),
            asset_id: sd.asset_id().to_string(),
            offer_id: offer_id.to_string(),
            policy: sd.offer(offer_id).map(|o| o.policy.clone()).unwrap_or_default(),
            content_digest: sd.content_digest().cloned(),
            negotiation_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PulledPayload {
    pub bytes: Vec<u8>,
    pub digest: Digest,
}

struct Seen {
    digest: Digest,
    response: Option<Envelope>,
}

type SeenKey = (ParticipantId, MessageType);

struct NegotiationRecord {
    view: NegotiationState,
    requested_policy: UsagePolicy,
    content_digest: Option<Digest>,
    agreement: Option<Agreement>,
    counter_sent: bool,
    last_sent: Option<Envelope>,
    seen: BTreeMap<SeenKey, Seen>,
}

impl NegotiationRecord {
    fn peer(&self) -> &ParticipantId {
        match self.view.role {
            Role::Consumer => &self.view.provider,
            Role::Provider => &self.view.consumer,
        }
    }

    fn awaiting_peer(&self) -> bool {
        use NegotiationPhase::*;
        match (self.view.role, self.view.state) {
            (Role::Consumer, Requested | Accepted | Agreed) => true,
            (Role::Provider, Offered) => true,
            (Role::Provider, Agreed) => self.agreement.as_ref().is_some_and(|a| a.signatures.consumer.is_none()),
            _ => false,
        }
    }
}

struct TransferRecord {
    view: TransferState,
    purpose: String,
    token: Option<AccessToken>,
    content_digest: Option<Digest>,
    last_sent: Option<Envelope>,
    awaiting_ack: bool,
    seen: BTreeMap<SeenKey, Seen>,
}

impl TransferRecord {
    fn peer(&self) -> &ParticipantId {
        match self.view.role {
            Role::Consumer => &self.view.provider,
            Role::Provider => &self.view.consumer,
        }
    }
}

enum Replay {
    Fresh,
    Duplicate(Option<Envelope>),
    Conflict,
}

fn check_replay(seen: &BTreeMap<SeenKey, Seen>, env: &Envelope, kind: MessageType) -> Replay {
    match seen.get(&(env.sender_id.clone(), kind)) {
        None => Replay::Fresh,
        Some(s) if s.digest == env.content_digest() => Replay::Duplicate(s.response.clone()),
        Some(_) => Replay::Conflict,
    }
}

fn payload(pairs: &[(&str, &str)]) -> Payload {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn lower(phase: impl std::fmt::Display) -> String {
    phase.to_string().to_lowercase()
}

pub struct Connector {
    id: ParticipantId,
    keys: KeyPair,
    credential: Credential,
    trust: Arc<TrustStore>,
    clock: Arc<dyn Clock>,
    clearing: Arc<dyn ClearingClient>,
    transport: OnceLock<Arc<dyn Transport>>,
    payloads: Option<Arc<dyn PayloadSource>>,
    config: ConnectorConfig,
    assets: RwLock<BTreeMap<String, SelfDescription>>,
    negotiations: Mutex<BTreeMap<String, Arc<Mutex<NegotiationRecord>>>>,
    transfers: Mutex<BTreeMap<String, Arc<Mutex<TransferRecord>>>>,
    agreements: RwLock<BTreeMap<String, Agreement>>,
    transitions: Mutex<Vec<Transition>>,
    next_id: AtomicU64,
    ignored: AtomicU64,
    audit_failures: AtomicU64,
}

impl Connector {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: ParticipantId,
        keys: KeyPair,
        credential: Credential,
        trust: Arc<TrustStore>,
        clock: Arc<dyn Clock>,
        clearing: Arc<dyn ClearingClient>,
        payloads: Option<Arc<dyn PayloadSource>>,
        config: ConnectorConfig,
    ) -> Self {
        Connector {
            id,
            keys,
            credential,
            trust,
            clock,
            clearing,
            transport: OnceLock::new(),
            payloads,
            config,
            assets: RwLock::new(BTreeMap::new()),
            negotiations: Mutex::new(BTreeMap::new()),
            transfers: Mutex::new(BTreeMap::new()),
            agreements: RwLock::new(BTreeMap::new()),
            transitions: Mutex::new(Vec::new()),
            next_id: AtomicU64::new(1),
            ignored: AtomicU64::new(0),
            audit_failures: AtomicU64::new(0),
        }
    }

    /// Attaches the transport; connectors and networks reference each
    /// other, so this happens after construction. Later calls are ignored.
    pub fn attach_transport(&self, transport: Arc<dyn Transport>) {
        let _ = self.transport.set(transport);
    }

    pub fn id(&self) -> &ParticipantId {
        &self.id
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public_key()
    }

    pub fn credential(&self) -> &Credential {
        &self.credential
    }

    pub fn config(&self) -> &ConnectorConfig {
        &self.config
    }

    /// Makes an asset's offers negotiable at this (provider) connector.
    pub fn publish_asset(&self, sd: SelfDescription) {
        self.assets.write().expect("assets lock").insert(sd.asset_id().to_string(), sd);
    }

    pub fn asset(&self, asset_id: &str) -> Option<SelfDescription> {
        self.assets.read().expect("assets lock").get(asset_id).cloned()
    }

    pub fn assets(&self) -> Vec<SelfDescription> {
        self.assets.read().expect("assets lock").values().cloned().collect()
    }

    pub fn negotiation(&self, id: &str) -> Option<NegotiationState> {
        let arc = self.negotiations.lock().expect("negotiations lock").get(id).cloned()?;
        let rec = arc.lock().expect("negotiation lock");
        Some(rec.view.clone())
    }

    pub fn negotiations(&self) -> Vec<NegotiationState> {
        let arcs: Vec<_> = self.negotiations.lock().expect("negotiations lock").values().cloned().collect();
        arcs.iter().map(|a| a.lock().expect("negotiation lock").view.clone()).collect()
    }

    pub fn transfer(&self, id: &str) -> Option<TransferState> {
        let arc = self.transfers.lock().expect("transfers lock").get(id).cloned()?;
        let rec = arc.lock().expect("transfer lock");
        Some(rec.view.clone())
    }

    pub fn transfers(&self) -> Vec<TransferState> {
        let arcs: Vec<_> = self.transfers.lock().expect("transfers lock").values().cloned().collect();
        arcs.iter().map(|a| a.lock().expect("transfer lock").view.clone()).collect()
    }

    /// Finalized agreements this connector is party to.
    pub fn agreement(&self, agreement_id: &str) -> Option<Agreement> {
        self.agreements.read().expect("agreements lock").get(agreement_id).cloned()
    }

    pub fn agreements(&self) -> Vec<Agreement> {
        self.agreements.read().expect("agreements lock").values().cloned().collect()
    }

    /// Provider negotiations waiting for [`Connector::decide_pending`].
    pub fn pending_decisions(&self) -> Vec<NegotiationState> {
        self.negotiations()
            .into_iter()
            .filter(|n| n.role == Role::Provider && n.pending_decision)
            .collect()
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.transitions.lock().expect("transitions lock").clone()
    }

    /// Inbound messages dropped because they did not fit the current state.
    pub fn ignored_messages(&self) -> u64 {
        self.ignored.load(Ordering::SeqCst)
    }

    pub fn audit_failures(&self) -> u64 {
        self.audit_failures.load(Ordering::SeqCst)
    }

    fn fresh_id(&self, prefix: &str) -> String {
        let n = self.next_id.fetch_add(1, Ordering::SeqCst);
        format!("{prefix}-{}-{n:04}", self.id.file_stem())
    }

    fn transport(&self) -> Result<&Arc<dyn Transport>, ConnectorError> {
        self.transport
            .get()
            .ok_or_else(|| ConnectorError::TransportFailure("no transport attached".into()))
    }

    fn seal(&self, correlation_id: &str, msg: &Message) -> Envelope {
        Envelope::seal(&self.keys, &self.id, correlation_id, msg)
    }

    /// Best-effort send; lost messages are recovered by retransmission.
    fn emit(&self, to: &ParticipantId, env: &Envelope) {
        if let Ok(t) = self.transport() {
            let _ = t.send(to, env);
        }
    }

    fn audit(&self, record_type: RecordType, subject: &str, payload: Payload) {
        if self.clearing.append(record_type, subject, payload).is_err() {
            self.audit_failures.fetch_add(1, Ordering::SeqCst);
        }
    }

    fn record_transition(&self, process: ProcessKind, id: &str, from: &str, to: &str) {
        self.transitions.lock().expect("transitions lock").push(Transition {
            process,
            id: id.to_string(),
            from: from.to_string(),
            to: to.to_string(),
        });
    }

    fn ignore(&self, why: &'static str) -> HandleOutcome {
        self.ignored.fetch_add(1, Ordering::SeqCst);
        HandleOutcome::Ignored(why)
    }

    fn move_negotiation(&self, rec: &mut NegotiationRecord, to: NegotiationPhase, reason: Option<&str>) -> bool {
        let from = rec.view.state;
        if !from.can_become(to) {
            self.ignored.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        rec.view.state = to;
        if to == NegotiationPhase::Terminated {
            rec.view.termination_reason = Some(reason.unwrap_or("terminated").to_string());
        }
        if to.is_terminal() {
            rec.view.pending_decision = false;
        }
        self.record_transition(ProcessKind::Negotiation, &rec.view.negotiation_id, from.as_str(), to.as_str());
        true
    }

    fn move_transfer(&self, rec: &mut TransferRecord, to: TransferPhase, reason: Option<&str>) -> bool {
        let from = rec.view.state;
        if !from.can_become(to) {
            self.ignored.fetch_add(1, Ordering::SeqCst);
            return false;
        }
        rec.view.state = to;
        if to == TransferPhase::Terminated {
            rec.view.termination_reason = Some(reason.unwrap_or("terminated").to_string());
        }
        self.record_transition(ProcessKind::Transfer, &rec.view.transfer_id, from.as_str(), to.as_str());
        true
    }

    fn audit_negotiation(&self, rec: &NegotiationRecord) {
        let v = &rec.view;
        let role = match v.role {
            Role::Consumer => "consumer",
            Role::Provider => "provider",
        };
        let mut p = payload(&[
            ("outcome", &lower(v.state)),
            ("role", role),
            ("assetId", &v.asset_id),
            ("offerId", &v.offer_id),
            ("peer", rec.peer().as_str()),
        ]);
        if let Some(r) = &v.termination_reason {
            p.insert("reason".into(), r.clone());
        }
        if let Some(a) = &v.agreement_id {
            p.insert("agreementId".into(), a.clone());
        }
        self.audit(RecordType::NegotiationEvent, &v.negotiation_id, p);
    }

    // ---- consumer operations -------------------------------------------

    pub fn start_negotiation(&self, req: NegotiationRequest) -> Result<NegotiationState, ConnectorError> {
        if let Some(id) = &req.negotiation_id {
            if let Some(existing) = self.negotiation(id) {
                return Ok(existing);
            }
        }
        if self.trust.participant_key(&req.provider).is_none() {
            return Err(ConnectorError::UnknownProvider(req.provider));
        }
        verify_credential(&self.credential, &self.trust, self.clock.now())
            .into_result()
            .map_err(ConnectorError::CredentialInvalid)?;
        let transport = self.transport()?.clone();

        let id = req.negotiation_id.clone().unwrap_or_else(|| self.fresh_id("neg"));
        let msg = Message::ContractRequest(ContractRequest {
            asset_id: req.asset_id.clone(),
            offer_id: req.offer_id.clone(),
            policy: req.policy.clone(),
            credential: self.credential.clone(),
        });
        let env = self.seal(&id, &msg);

        let mut map = self.negotiations.lock().expect("negotiations lock");
        if let Some(existing) = map.get(&id) {
            return Ok(existing.lock().expect("negotiation lock").view.clone());
        }
        match transport.send(&req.provider, &env) {
            Ok(()) => {}
            Err(TransportError::UnknownPeer(p)) => return Err(ConnectorError::UnknownProvider(p)),
            Err(TransportError::Failed(e)) => return Err(ConnectorError::TransportFailure(e)),
        }
        let view = NegotiationState {
            negotiation_id: id.clone(),
            asset_id: req.asset_id,
            offer_id: req.offer_id,
            consumer: self.id.clone(),
            provider: req.provider,
            state: NegotiationPhase::Requested,
            counter_offer: None,
            termination_reason: None,
            agreement_id: None,
            role: Role::Consumer,
            pending_decision: false,
        };
        map.insert(
            id.clone(),
            Arc::new(Mutex::new(NegotiationRecord {
                view: view.clone(),
                requested_policy: req.policy,
                content_digest: req.content_digest,
                agreement: None,
                counter_sent: false,
                last_sent: Some(env),
                seen: BTreeMap::new(),
            })),
        );
        self.record_transition(ProcessKind::Negotiation, &id, "-", NegotiationPhase::Requested.as_str());
        Ok(view)
    }

    fn consumer_negotiation(&self, id: &str) -> Result<Arc<Mutex<NegotiationRecord>>, ConnectorError> {
        self.negotiations
            .lock()
            .expect("negotiations lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ConnectorError::UnknownNegotiation(id.to_string()))
    }

    pub fn respond_to_offer(&self, negotiation_id: &str, accept: bool) -> Result<NegotiationState, ConnectorError> {
        let arc = self.consumer_negotiation(negotiation_id)?;
        let mut rec = arc.lock().expect("negotiation lock");
        if rec.view.role != Role::Consumer || rec.view.state != NegotiationPhase::Offered {
            return Err(ConnectorError::WrongState {
                id: negotiation_id.to_string(),
                state: rec.view.state.to_string(),
            });
        }
        rec.view.pending_decision = false;
        let env = if accept {
            self.move_negotiation(&mut rec, NegotiationPhase::Accepted, None);
            self.seal(
                negotiation_id,
                &Message::NegotiationEvent(NegotiationEvent {
                    event_type: NegotiationEventType::Accepted,
                    agreement_id: None,
                }),
            )
        } else {
            self.move_negotiation(&mut rec, NegotiationPhase::Terminated, Some("offer-rejected"));
            self.audit_negotiation(&rec);
            self.seal(
                negotiation_id,
                &Message::NegotiationTermination(Termination {
                    reason: "offer-rejected".into(),
                }),
            )
        };
        let provider = rec.view.provider.clone();
        if let Some(s) = rec.seen.get_mut(&(provider.clone(), MessageType::ContractOfferMessage)) {
            s.response = Some(env.clone());
        }
        rec.last_sent = Some(env.clone());
        self.emit(&provider, &env);
        Ok(rec.view.clone())
    }

    pub fn request_transfer(
        &self,
        agreement_id: &str,
        purpose: &str,
        transfer_id: Option<String>,
    ) -> Result<TransferState, ConnectorError> {
        if let Some(id) = &transfer_id {
            if let Some(existing) = self.transfer(id) {
                return Ok(existing);
            }
        }
        let agreement = self
            .agreement(agreement_id)
            .filter(|a| a.consumer == self.id)
            .ok_or_else(|| ConnectorError::UnknownAgreement(agreement_id.to_string()))?;
        let content_digest = self
            .negotiations
            .lock()
            .expect("negotiations lock")
            .get(&agreement.negotiation_id)
            .cloned()
            .and_then(|a| a.lock().expect("negotiation lock").content_digest.clone());
        let transport = self.transport()?.clone();
        let id = transfer_id.unwrap_or_else(|| self.fresh_id("xfer"));
        let env = self.seal(
            &id,
            &Message::TransferRequest(TransferRequest {
                agreement_id: agreement_id.to_string(),
                purpose: purpose.to_string(),
                credential: self.credential.clone(),
            }),
        );
        let mut map = self.transfers.lock().expect("transfers lock");
        if let Some(existing) = map.get(&id) {
            return Ok(existing.lock().expect("transfer lock").view.clone());
        }
        match transport.send(&agreement.provider, &env) {
            Ok(()) => {}
            Err(TransportError::UnknownPeer(p)) => return Err(ConnectorError::UnknownProvider(p)),
            Err(TransportError::Failed(e)) => return Err(ConnectorError::TransportFailure(e)),
        }
        let view = TransferState {
            transfer_id: id.clone(),
            agreement_id: agreement_id.to_string(),
            state: TransferPhase::Requested,
            bytes_moved: 0,
            payload_digest: None,
            termination_reason: None,
            consumer: self.id.clone(),
            provider: agreement.provider.clone(),
            role: Role::Consumer,
        };
        map.insert(
            id.clone(),
            Arc::new(Mutex::new(TransferRecord {
                view: view.clone(),
                purpose: purpose.to_string(),
                token: None,
                content_digest,
                last_sent: Some(env),
                awaiting_ack: false,
                seen: BTreeMap::new(),
            })),
        );
        self.record_transition(ProcessKind::Transfer, &id, "-", TransferPhase::Requested.as_str());
        Ok(view)
    }

    fn end_transfer(&self, rec: &mut TransferRecord, msg: Message) {
        let env = self.seal(&rec.view.transfer_id, &msg);
        rec.last_sent = Some(env.clone());
        rec.awaiting_ack = true;
        let peer = rec.peer().clone();
        self.emit(&peer, &env);
    }

    fn fail_pull(&self, rec: &mut TransferRecord, reason: &str) {
        if self.move_transfer(rec, TransferPhase::Terminated, Some(reason)) {
            self.end_transfer(
                rec,
                Message::TransferTermination(Termination {
                    reason: reason.to_string(),
                }),
            );
        }
    }

    /// Pulls the payload chunk by chunk and checks it against the catalogued digest.
    pub fn pull_payload(&self, transfer_id: &str) -> Result<PulledPayload, ConnectorError> {
        let arc = self
            .transfers
            .lock()
            .expect("transfers lock")
            .get(transfer_id)
            .cloned()
            .ok_or_else(|| ConnectorError::UnknownTransfer(transfer_id.to_string()))?;
        let mut rec = arc.lock().expect("transfer lock");
        if rec.view.role != Role::Consumer || rec.view.state != TransferPhase::Started {
            return Err(ConnectorError::WrongState {
                id: transfer_id.to_string(),
                state: rec.view.state.to_string(),
            });
        }
        let token = rec.token.clone().expect("started transfers hold a token");
        let transport = self.transport()?.clone();
        let provider = rec.view.provider.clone();

        let mut bytes = Vec::new();
        let mut index = 0u64;
        loop {
            let mut attempt = transport.fetch_chunk(&provider, transfer_id, &token, index);
            if matches!(attempt, Err(DataPlaneError::Transient(_))) {
                attempt = transport.fetch_chunk(&provider, transfer_id, &token, index);
            }
            match attempt {
                Ok(chunk) if chunk.index == index => {
                    bytes.extend_from_slice(&chunk.data);
                    rec.view.bytes_moved = bytes.len() as u64;
                    index += 1;
                    if index >= chunk.total_chunks {
                        break;
                    }
                }
                Ok(_) => {
                    self.fail_pull(&mut rec, "transfer-failed");
                    return Err(ConnectorError::TransportFailure("chunk out of order".into()));
                }
                Err(DataPlaneError::TokenInvalid(why)) => {
                    self.fail_pull(&mut rec, "token-invalid");
                    return Err(ConnectorError::TokenInvalid(why));
                }
                Err(e) => {
                    self.fail_pull(&mut rec, "transfer-failed");
                    return Err(ConnectorError::TransportFailure(e.to_string()));
                }
            }
        }

        let digest = digest_of(&bytes);
        if let Some(expected) = rec.content_digest.clone() {
            if expected != digest {
                self.fail_pull(&mut rec, "digest-mismatch");
                return Err(ConnectorError::DigestMismatch {
                    expected: expected.hex().to_string(),
                    actual: digest.hex().to_string(),
                });
            }
        }
        self.move_transfer(&mut rec, TransferPhase::Completed, None);
        rec.view.payload_digest = Some(digest.clone());
        let bytes_moved = rec.view.bytes_moved;
        self.end_transfer(
            &mut rec,
            Message::TransferCompletion(TransferCompletion {
                payload_digest: digest.clone(),
                bytes_moved,
            }),
        );
        Ok(PulledPayload { bytes, digest })
    }

    // ---- provider operations -------------------------------------------

    pub fn decide_pending(&self, negotiation_id: &str, decision: ProviderDecision) -> Result<NegotiationState, ConnectorError> {
        let arc = self.consumer_negotiation(negotiation_id)?;
        let mut rec = arc.lock().expect("negotiation lock");
        if rec.view.role != Role::Provider || rec.view.state != NegotiationPhase::Requested || !rec.view.pending_decision {
            return Err(ConnectorError::WrongState {
                id: negotiation_id.to_string(),
                state: rec.view.state.to_string(),
            });
        }
        rec.view.pending_decision = false;
        let env = match decision {
            ProviderDecision::Accept => {
                let policy = rec.requested_policy.clone();
                if check_well_formed(&policy).is_empty() {
                    self.agree(&mut rec, policy)
                } else {
                    let advertised = self
                        .asset(&rec.view.asset_id)
                        .and_then(|sd| sd.offer(&rec.view.offer_id).map(|o| o.policy.clone()))
                        .unwrap_or_default();
                    self.counter(&mut rec, advertised)
                }
            }
            ProviderDecision::Counter(p) => self.counter(&mut rec, p),
            ProviderDecision::Reject => self.terminate_negotiation(&mut rec, "rejected-by-provider"),
        };
        let consumer = rec.view.consumer.clone();
        if let Some(s) = rec.seen.get_mut(&(consumer, MessageType::ContractRequestMessage)) {
            s.response = Some(env);
        }
        Ok(rec.view.clone())
    }

    /// Provider side: records the countersigned agreement and closes the negotiation.
    pub fn finalize(&self, negotiation_id: &str) -> Result<Agreement, ConnectorError> {
        let arc = self.consumer_negotiation(negotiation_id)?;
        let mut rec = arc.lock().expect("negotiation lock");
        self.finalize_locked(&mut rec).map(|(a, _)| a)
    }

    fn finalize_locked(&self, rec: &mut NegotiationRecord) -> Result<(Agreement, Envelope), ConnectorError> {
        let id = rec.view.negotiation_id.clone();
        if rec.view.role != Role::Provider {
            return Err(ConnectorError::WrongState {
                id,
                state: rec.view.state.to_string(),
            });
        }
        let agreement = rec.agreement.clone();
        match rec.view.state {
            NegotiationPhase::Finalized => {
                let a = agreement.expect("finalized negotiations hold an agreement");
                let env = rec.last_sent.clone().expect("finalize sent an event");
                return Ok((a, env));
            }
            NegotiationPhase::Agreed => {}
            other => {
                return Err(ConnectorError::WrongState {
                    id,
                    state: other.to_string(),
                })
            }
        }
        let agreement = agreement.expect("agreed negotiations hold an agreement");
        if agreement.signatures.consumer.is_none() {
            return Err(ConnectorError::MissingCountersignature(id));
        }
        self.move_negotiation(rec, NegotiationPhase::Finalized, None);
        self.agreements
            .write()
            .expect("agreements lock")
            .insert(agreement.agreement_id.clone(), agreement.clone());
        self.audit(
            RecordType::AgreementRecorded,
            &id,
            payload(&[
                ("agreementId", &agreement.agreement_id),
                ("assetId", &agreement.asset_id),
                ("consumer", agreement.consumer.as_str()),
                ("provider", agreement.provider.as_str()),
                ("policyDigest", digest_of(&crate::canonical::to_canonical_bytes(&agreement.policy).expect("policy")).hex()),
            ]),
        );
        let env = self.seal(
            &id,
            &Message::NegotiationEvent(NegotiationEvent {
                event_type: NegotiationEventType::Finalized,
                agreement_id: Some(agreement.agreement_id.clone()),
            }),
        );
        rec.last_sent = Some(env.clone());
        if let Some(s) = rec
            .seen
            .get_mut(&(rec.view.consumer.clone(), MessageType::ContractAgreementVerificationMessage))
        {
            s.response = Some(env.clone());
        }
        self.emit(&rec.view.consumer.clone(), &env);
        Ok((agreement, env))
    }

    fn agree(&self, rec: &mut NegotiationRecord, policy: UsagePolicy) -> Envelope {
        let mut agreement = Agreement {
            agreement_id: format!("agr-{}", rec.view.negotiation_id),
            negotiation_id: rec.view.negotiation_id.clone(),
            asset_id: rec.view.asset_id.clone(),
            consumer: rec.view.consumer.clone(),
            provider: self.id.clone(),
            policy,
            agreed_at: self.clock.now(),
            signatures: AgreementSignatures {
                provider: None,
                consumer: None,
            },
        };
        agreement.signatures.provider = Some(self.keys.sign(&agreement.signing_bytes()));
        self.move_negotiation(rec, NegotiationPhase::Agreed, None);
        rec.view.agreement_id = Some(agreement.agreement_id.clone());
        rec.agreement = Some(agreement.clone());
        self.audit_negotiation(rec);
        let env = self.seal(
            &rec.view.negotiation_id,
            &Message::ContractAgreement(ContractAgreement { agreement }),
        );
        rec.last_sent = Some(env.clone());
        self.emit(&rec.view.consumer.clone(), &env);
        env
    }

    fn counter(&self, rec: &mut NegotiationRecord, policy: UsagePolicy) -> Envelope {
        if rec.counter_sent {
            return self.terminate_negotiation(rec, "negotiation-depth-exceeded");
        }
        rec.counter_sent = true;
        rec.view.counter_offer = Some(policy.clone());
        self.move_negotiation(rec, NegotiationPhase::Offered, None);
        self.audit_negotiation(rec);
        let env = self.seal(
            &rec.view.negotiation_id,
            &Message::ContractOffer(ContractOffer {
                asset_id: rec.view.asset_id.clone(),
                offer_id: rec.view.offer_id.clone(),
                policy,
            }),
        );
        rec.last_sent = Some(env.clone());
        self.emit(&rec.view.consumer.clone(), &env);
        env
    }

    fn terminate_negotiation(&self, rec: &mut NegotiationRecord, reason: &str) -> Envelope {
        self.move_negotiation(rec, NegotiationPhase::Terminated, Some(reason));
        self.audit_negotiation(rec);
        let env = self.seal(
            &rec.view.negotiation_id,
            &Message::NegotiationTermination(Termination {
                reason: reason.to_string(),
            }),
        );
        rec.last_sent = Some(env.clone());
        let peer = rec.peer().clone();
        self.emit(&peer, &env);
        env
    }

    /// Message a terminal side repeats when a peer is still talking to it.
    fn terminal_reply(&self, rec: &NegotiationRecord) -> Option<Envelope> {
        match (rec.view.state, rec.view.role) {
            (NegotiationPhase::Terminated, _) => Some(self.seal(
                &rec.view.negotiation_id,
                &Message::NegotiationTermination(Termination {
                    reason: rec.view.termination_reason.clone().unwrap_or_default(),
                }),
            )),
            (NegotiationPhase::Finalized, Role::Provider) => rec.last_sent.clone(),
            _ => None,
        }
    }

    // ---- inbound --------------------------------------------------------

    /// Entry point for every envelope delivered to this connector.
    pub fn handle(&self, env: &Envelope) -> Result<HandleOutcome, ConnectorError> {
        let kind = env.kind()?;
        let Some(key) = self.trust.participant_key(&env.sender_id) else {
            self.audit(
                RecordType::AccessDenied,
                &env.correlation_id,
                payload(&[
                    ("reason", "unknown-sender"),
                    ("sender", env.sender_id.as_str()),
                    ("messageType", kind.as_str()),
                ]),
            );
            return Err(ConnectorError::UnknownSender(env.sender_id.clone()));
        };
        if !env.verify(&key) {
            self.audit(
                RecordType::AccessDenied,
                &env.correlation_id,
                payload(&[
                    ("reason", "bad-signature"),
                    ("sender", env.sender_id.as_str()),
                    ("messageType", kind.as_str()),
                ]),
            );
            return Err(ConnectorError::BadSignature);
        }
        let msg = env.decode()?;
        if kind.is_transfer() {
            Ok(self.on_transfer_message(env, kind, msg))
        } else {
            Ok(self.on_negotiation_message(env, kind, msg))
        }
    }

    fn on_negotiation_message(&self, env: &Envelope, kind: MessageType, msg: Message) -> HandleOutcome {
        if let Message::ContractRequest(req) = msg {
            return self.on_contract_request(env, req);
        }
        let Some(arc) = self
            .negotiations
            .lock()
            .expect("negotiations lock")
            .get(&env.correlation_id)
            .cloned()
        else {
            return self.ignore("unknown-negotiation");
        };
        let mut rec = arc.lock().expect("negotiation lock");
        if env.sender_id != *rec.peer() {
            return self.ignore("not-a-party");
        }
        let seen_key = (env.sender_id.clone(), kind);
        match check_replay(&rec.seen, env, kind) {
            Replay::Duplicate(resp) => {
                if let Some(r) = resp {
                    self.emit(&env.sender_id, &r);
                }
                return HandleOutcome::Duplicate;
            }
            Replay::Conflict => {
                // A second, different counter-offer.
                if kind == MessageType::ContractOfferMessage
                    && rec.view.role == Role::Consumer
                    && !rec.view.state.is_terminal()
                {
                    let resp = self.terminate_negotiation(&mut rec, "negotiation-depth-exceeded");
                    if let Some(s) = rec.seen.get_mut(&seen_key) {
                        s.digest = env.content_digest();
                        s.response = Some(resp);
                    }
                    return HandleOutcome::Processed;
                }
                return self.ignore("conflicting-replay");
            }
            Replay::Fresh => {}
        }

        if rec.view.state.is_terminal() {
            if matches!(
                msg,
                Message::NegotiationTermination(_)
                    | Message::NegotiationEvent(NegotiationEvent {
                        event_type: NegotiationEventType::Finalized,
                        ..
                    })
            ) {
                return self.ignore("already-terminal");
            }
            let resp = self.terminal_reply(&rec);
            if let Some(r) = &resp {
                self.emit(&env.sender_id, r);
            }
            rec.seen.insert(
                seen_key,
                Seen {
                    digest: env.content_digest(),
                    response: resp,
                },
            );
            return HandleOutcome::Processed;
        }

        let response = match (rec.view.role, msg) {
            (_, Message::NegotiationTermination(t)) => {
                self.move_negotiation(&mut rec, NegotiationPhase::Terminated, Some(&t.reason));
                self.audit_negotiation(&rec);
                None
            }
            (Role::Consumer, Message::ContractOffer(offer)) if rec.view.state == NegotiationPhase::Requested => {
                if offer.asset_id != rec.view.asset_id || offer.offer_id != rec.view.offer_id {
                    return self.ignore("offer-mismatch");
                }
                rec.view.counter_offer = Some(offer.policy);
                rec.view.pending_decision = true;
                self.move_negotiation(&mut rec, NegotiationPhase::Offered, None);
                None
            }
            (Role::Consumer, Message::ContractOffer(_)) => {
                // a further counter-offer after the first one
                Some(self.terminate_negotiation(&mut rec, "negotiation-depth-exceeded"))
            }
            (Role::Consumer, Message::ContractAgreement(ContractAgreement { agreement }))
                if matches!(rec.view.state, NegotiationPhase::Requested | NegotiationPhase::Accepted) =>
            {
                Some(self.on_agreement(&mut rec, agreement))
            }
            (Role::Consumer, Message::NegotiationEvent(ev))
                if ev.event_type == NegotiationEventType::Finalized && rec.view.state == NegotiationPhase::Agreed =>
            {
                let agreement = rec.agreement.clone().expect("agreed negotiations hold an agreement");
                if ev.agreement_id.as_deref() != Some(agreement.agreement_id.as_str()) {
                    return self.ignore("agreement-mismatch");
                }
                self.move_negotiation(&mut rec, NegotiationPhase::Finalized, None);
                self.agreements
                    .write()
                    .expect("agreements lock")
                    .insert(agreement.agreement_id.clone(), agreement);
                self.audit_negotiation(&rec);
                None
            }
            (Role::Provider, Message::NegotiationEvent(ev))
                if ev.event_type == NegotiationEventType::Accepted && rec.view.state == NegotiationPhase::Offered =>
            {
                self.move_negotiation(&mut rec, NegotiationPhase::Accepted, None);
                let policy = rec.view.counter_offer.clone().expect("offered negotiations hold a counter-offer");
                Some(self.agree(&mut rec, policy))
            }
            (Role::Provider, Message::AgreementVerification(v)) if rec.view.state == NegotiationPhase::Agreed => {
                let consumer_key = self.trust.participant_key(&rec.view.consumer);
                let mut agreement = rec.agreement.clone().expect("agreed negotiations hold an agreement");
                if v.agreement_id != agreement.agreement_id {
                    return self.ignore("agreement-mismatch");
                }
                agreement.signatures.consumer = Some(v.consumer_signature);
                if !consumer_key.is_some_and(|k| agreement.consumer_signature_valid(&k)) {
                    Some(self.terminate_negotiation(&mut rec, "invalid-countersignature"))
                } else {
                    rec.agreement = Some(agreement);
                    if self.config.auto_finalize {
                        self.finalize_locked(&mut rec).ok().map(|(_, env)| env)
                    } else {
                        None
                    }
                }
            }
            _ => return self.ignore("unexpected-message"),
        };
        rec.seen.insert(
            seen_key,
            Seen {
                digest: env.content_digest(),
                response,
            },
        );
        HandleOutcome::Processed
    }

    fn on_agreement(&self, rec: &mut NegotiationRecord, mut agreement: Agreement) -> Envelope {
        let expected_policy = match rec.view.state {
            NegotiationPhase::Accepted => rec.view.counter_offer.clone(),
            _ => Some(rec.requested_policy.clone()),
        };
        let provider_key = self.trust.participant_key(&rec.view.provider);
        let valid = agreement.negotiation_id == rec.view.negotiation_id
            && agreement.asset_id == rec.view.asset_id
            && agreement.consumer == self.id
            && agreement.provider == rec.view.provider
            && Some(&agreement.policy) == expected_policy.as_ref()
            && check_well_formed(&agreement.policy).is_empty()
            && agreement.signatures.consumer.is_none()
            && provider_key.is_some_and(|k| agreement.provider_signature_valid(&k));
        if !valid {
            return self.terminate_negotiation(rec, "invalid-agreement");
        }
        let sig = self.keys.sign(&agreement.signing_bytes());
        agreement.signatures.consumer = Some(sig.clone());
        self.move_negotiation(rec, NegotiationPhase::Agreed, None);
        rec.view.agreement_id = Some(agreement.agreement_id.clone());
        let env = self.seal(
            &rec.view.negotiation_id,
            &Message::AgreementVerification(AgreementVerification {
                agreement_id: agreement.agreement_id.clone(),
                consumer_signature: sig,
            }),
        );
        rec.agreement = Some(agreement);
        rec.last_sent = Some(env.clone());
        self.emit(&rec.view.provider.clone(), &env);
        env
    }

    fn on_contract_request(&self, env: &Envelope, req: ContractRequest) -> HandleOutcome {
        let kind = MessageType::ContractRequestMessage;
        let mut map = self.negotiations.lock().expect("negotiations lock");
        if let Some(arc) = map.get(&env.correlation_id).cloned() {
            drop(map);
            let rec = arc.lock().expect("negotiation lock");
            if *rec.peer() != env.sender_id || rec.view.role != Role::Provider {
                return self.ignore("not-a-party");
            }
            return match check_replay(&rec.seen, env, kind) {
                Replay::Duplicate(resp) => {
                    if let Some(r) = resp {
                        self.emit(&env.sender_id, &r);
                    }
                    HandleOutcome::Duplicate
                }
                _ => self.ignore("conflicting-replay"),
            };
        }
        let arc = Arc::new(Mutex::new(NegotiationRecord {
            view: NegotiationState {
                negotiation_id: env.correlation_id.clone(),
                asset_id: req.asset_id.clone(),
                offer_id: req.offer_id.clone(),
                consumer: env.sender_id.clone(),
                provider: self.id.clone(),
                state: NegotiationPhase::Requested,
                counter_offer: None,
                termination_reason: None,
                agreement_id: None,
                role: Role::Provider,
                pending_decision: false,
            },
            requested_policy: req.policy.clone(),
            content_digest: None,
            agreement: None,
            counter_sent: false,
            last_sent: None,
            seen: BTreeMap::new(),
        }));
        map.insert(env.correlation_id.clone(), arc.clone());
        let mut rec = arc.lock().expect("negotiation lock");
        drop(map);
        self.record_transition(ProcessKind::Negotiation, &env.correlation_id, "-", NegotiationPhase::Requested.as_str());

        let now = self.clock.now();
        let credential_ok = req.credential.subject == env.sender_id
            && verify_credential(&req.credential, &self.trust, now).is_valid();
        let offer = self
            .asset(&req.asset_id)
            .and_then(|sd| sd.offer(&req.offer_id).map(|o| o.policy.clone()));
        rec.content_digest = self.asset(&req.asset_id).and_then(|sd| sd.content_digest().cloned());

        let response = if !credential_ok {
            Some(self.terminate_negotiation(&mut rec, "credential-invalid"))
        } else {
            match offer {
                None => Some(self.terminate_negotiation(&mut rec, "unknown-offer")),
                Some(_) if self.config.mode == ProviderMode::Manual => {
                    rec.view.pending_decision = true;
                    self.audit_negotiation(&rec);
                    None
                }
                Some(advertised) if advertised == req.policy => Some(self.agree(&mut rec, advertised)),
                Some(advertised) => Some(self.counter(&mut rec, advertised)),
            }
        };
        rec.seen.insert(
            (env.sender_id.clone(), kind),
            Seen {
                digest: env.content_digest(),
                response,
            },
        );
        HandleOutcome::Processed
    }

    fn on_transfer_message(&self, env: &Envelope, kind: MessageType, msg: Message) -> HandleOutcome {
        if let Message::TransferRequest(req) = msg {
            return self.on_transfer_request(env, req);
        }
        let Some(arc) = self.transfers.lock().expect("transfers lock").get(&env.correlation_id).cloned() else {
            return self.ignore("unknown-transfer");
        };
        let mut rec = arc.lock().expect("transfer lock");
        if env.sender_id != *rec.peer() {
            return self.ignore("not-a-party");
        }
        let seen_key = (env.sender_id.clone(), kind);
        match check_replay(&rec.seen, env, kind) {
            Replay::Duplicate(resp) => {
                if let Some(r) = resp {
                    self.emit(&env.sender_id, &r);
                }
                return HandleOutcome::Duplicate;
            }
            Replay::Conflict => return self.ignore("conflicting-replay"),
            Replay::Fresh => {}
        }

        let state = rec.view.state;
        let response = match (rec.view.role, msg) {
            // acknowledgements of our own terminal message
            (_, Message::TransferCompletion(_)) if state == TransferPhase::Completed && rec.awaiting_ack => {
                rec.awaiting_ack = false;
                None
            }
            (_, Message::TransferTermination(_)) if state == TransferPhase::Terminated && rec.awaiting_ack => {
                rec.awaiting_ack = false;
                None
            }
            (_, Message::TransferTermination(_) | Message::TransferCompletion(_)) if state.is_terminal() => {
                return self.ignore("already-terminal");
            }
            (_, _) if state.is_terminal() => rec.last_sent.clone().inspect(|r| self.emit(&env.sender_id, r)),
            (Role::Consumer, Message::TransferStart(start)) if state == TransferPhase::Requested => {
                if start.agreement_id != rec.view.agreement_id {
                    return self.ignore("agreement-mismatch");
                }
                rec.token = Some(start.token);
                self.move_transfer(&mut rec, TransferPhase::Started, None);
                None
            }
            (role, Message::TransferTermination(t)) => {
                self.move_transfer(&mut rec, TransferPhase::Terminated, Some(&t.reason));
                if role == Role::Provider {
                    self.audit_transfer_end(&rec);
                }
                let echo = self.seal(&rec.view.transfer_id, &Message::TransferTermination(t));
                rec.last_sent = Some(echo.clone());
                self.emit(&env.sender_id, &echo);
                Some(echo)
            }
            (Role::Provider, Message::TransferCompletion(c)) if state == TransferPhase::Started => {
                self.move_transfer(&mut rec, TransferPhase::Completed, None);
                rec.view.payload_digest = Some(c.payload_digest.clone());
                rec.view.bytes_moved = c.bytes_moved;
                self.audit_transfer_end(&rec);
                let echo = self.seal(&rec.view.transfer_id, &Message::TransferCompletion(c));
                rec.last_sent = Some(echo.clone());
                self.emit(&env.sender_id, &echo);
                Some(echo)
            }
            _ => return self.ignore("unexpected-message"),
        };
        rec.seen.insert(
            seen_key,
            Seen {
                digest: env.content_digest(),
                response,
            },
        );
        HandleOutcome::Processed
    }

    fn audit_transfer_end(&self, rec: &TransferRecord) {
        let v = &rec.view;
        let mut p = payload(&[
            ("outcome", &lower(v.state)),
            ("agreementId", &v.agreement_id),
            ("consumer", v.consumer.as_str()),
            ("bytesMoved", &v.bytes_moved.to_string()),
        ]);
        if let Some(d) = &v.payload_digest {
            p.insert("payloadDigest".into(), d.hex().to_string());
        }
        if let Some(r) = &v.termination_reason {
            p.insert("reason".into(), r.clone());
        }
        self.audit(RecordType::TransferEvent, &v.transfer_id, p);
    }

    fn on_transfer_request(&self, env: &Envelope, req: TransferRequest) -> HandleOutcome {
        let kind = MessageType::TransferRequestMessage;
        let mut map = self.transfers.lock().expect("transfers lock");
        if let Some(arc) = map.get(&env.correlation_id).cloned() {
            drop(map);
            let rec = arc.lock().expect("transfer lock");
            if *rec.peer() != env.sender_id || rec.view.role != Role::Provider {
                return self.ignore("not-a-party");
            }
            return match check_replay(&rec.seen, env, kind) {
                Replay::Duplicate(resp) => {
                    if let Some(r) = resp {
                        self.emit(&env.sender_id, &r);
                    }
                    HandleOutcome::Duplicate
                }
                _ => self.ignore("conflicting-replay"),
            };
        }
        let agreement = self
            .agreement(&req.agreement_id)
            .filter(|a| a.provider == self.id && a.consumer == env.sender_id);
        let arc = Arc::new(Mutex::new(TransferRecord {
            view: TransferState {
                transfer_id: env.correlation_id.clone(),
                agreement_id: req.agreement_id.clone(),
                state: TransferPhase::Requested,
                bytes_moved: 0,
                payload_digest: None,
                termination_reason: None,
                consumer: env.sender_id.clone(),
                provider: self.id.clone(),
                role: Role::Provider,
            },
            purpose: req.purpose.clone(),
            token: None,
            content_digest: agreement
                .as_ref()
                .and_then(|a| self.asset(&a.asset_id))
                .and_then(|sd| sd.content_digest().cloned()),
            last_sent: None,
            awaiting_ack: false,
            seen: BTreeMap::new(),
        }));
        map.insert(env.correlation_id.clone(), arc.clone());
        let mut rec = arc.lock().expect("transfer lock");
        drop(map);
        self.record_transition(ProcessKind::Transfer, &env.correlation_id, "-", TransferPhase::Requested.as_str());

        let now = self.clock.now();
        let decision: Result<(Agreement, AccessToken), String> = (|| {
            if req.credential.subject != env.sender_id || !verify_credential(&req.credential, &self.trust, now).is_valid() {
                return Err("credential-invalid".to_string());
            }
            let agreement = agreement.clone().ok_or_else(|| "unknown-agreement".to_string())?;
            let prior = self
                .clearing
                .completed_transfers(&agreement.agreement_id)
                .map_err(|_| "clearing-unavailable".to_string())?;
            let ctx = EvaluationContext {
                requester: env.sender_id.clone(),
                action: Action::Transfer,
                purpose: req.purpose.clone(),
                now,
                prior_use_count: prior,
            };
            match evaluate(&agreement.policy, &ctx) {
                Decision::Permit => {}
                Decision::Deny(r) => return Err(format!("deny:{}", r.as_str())),
            }
            let token = issue_token(
                &self.keys,
                &req.credential,
                &self.trust,
                self.id.as_str(),
                vec![transfer_scope(&agreement.agreement_id)],
                self.config.transfer_token_ttl,
                now,
            )
            .map_err(|e| format!("token-issuance-failed:{e}"))?;
            Ok((agreement, token))
        })();

        let response = match decision {
            Ok((agreement, token)) => {
                self.move_transfer(&mut rec, TransferPhase::Started, None);
                self.audit(
                    RecordType::TransferEvent,
                    &rec.view.transfer_id,
                    payload(&[
                        ("outcome", "started"),
                        ("agreementId", &agreement.agreement_id),
                        ("consumer", env.sender_id.as_str()),
                        ("purpose", &rec.purpose),
                        ("decision", "permit"),
                    ]),
                );
                let reply = self.seal(
                    &rec.view.transfer_id,
                    &Message::TransferStart(TransferStart {
                        agreement_id: agreement.agreement_id,
                        token,
                    }),
                );
                rec.last_sent = Some(reply.clone());
                self.emit(&env.sender_id, &reply);
                reply
            }
            Err(reason) => {
                self.move_transfer(&mut rec, TransferPhase::Terminated, Some(&reason));
                self.audit(
                    RecordType::AccessDenied,
                    &rec.view.transfer_id,
                    payload(&[
                        ("outcome", "terminated"),
                        ("agreementId", &req.agreement_id),
                        ("consumer", env.sender_id.as_str()),
                        ("purpose", &rec.purpose),
                        ("reason", &reason),
                    ]),
                );
                let reply = self.seal(&rec.view.transfer_id, &Message::TransferTermination(Termination { reason }));
                rec.last_sent = Some(reply.clone());
                rec.awaiting_ack = true;
                self.emit(&env.sender_id, &reply);
                reply
            }
        };
        rec.seen.insert(
            (env.sender_id.clone(), kind),
            Seen {
                digest: env.content_digest(),
                response: Some(response),
            },
        );
        HandleOutcome::Processed
    }

    /// Provider data plane: serves one 64 KiB chunk after re-checking the token.
    pub fn serve_chunk(&self, transfer_id: &str, token: &AccessToken, index: u64) -> Result<Chunk, DataPlaneError> {
        let arc = self
            .transfers
            .lock()
            .expect("transfers lock")
            .get(transfer_id)
            .cloned()
            .ok_or_else(|| DataPlaneError::NotActive(transfer_id.to_string()))?;
        let mut rec = arc.lock().expect("transfer lock");
        if rec.view.role != Role::Provider || rec.view.state != TransferPhase::Started {
            return Err(DataPlaneError::NotActive(transfer_id.to_string()));
        }
        let scope = transfer_scope(&rec.view.agreement_id);
        verify_token(token, &self.keys.public_key(), &scope, self.clock.now())
            .into_result()
            .map_err(|r| DataPlaneError::TokenInvalid(r.to_string()))?;
        if token.subject != rec.view.consumer {
            return Err(DataPlaneError::TokenInvalid("subject-mismatch".into()));
        }
        let digest = rec.content_digest.clone().ok_or(DataPlaneError::NoPayload)?;
        let bytes = self
            .payloads
            .as_ref()
            .and_then(|p| p.payload(&digest))
            .ok_or(DataPlaneError::NoPayload)?;
        let total_size = bytes.len() as u64;
        let total_chunks = (bytes.len().div_ceil(CHUNK_SIZE)).max(1) as u64;
        if index >= total_chunks {
            return Err(DataPlaneError::NotActive(format!("{transfer_id} has no chunk {index}")));
        }
        let start = index as usize * CHUNK_SIZE;
        let end = (start + CHUNK_SIZE).min(bytes.len());
        rec.view.bytes_moved = rec.view.bytes_moved.max(end as u64);
        Ok(Chunk {
            index,
            total_chunks,
            total_size,
            data: bytes[start..end].to_vec(),
        })
    }

    /// Re-sends the last message of every process still waiting on its peer.
    /// Returns how many envelopes were sent.
    pub fn tick(&self) -> usize {
        let mut sent = 0;
        let negs: Vec<_> = self.negotiations.lock().expect("negotiations lock").values().cloned().collect();
        for arc in negs {
            let rec = arc.lock().expect("negotiation lock");
            if rec.awaiting_peer() {
                if let Some(env) = &rec.last_sent {
                    self.emit(rec.peer(), env);
                    sent += 1;
                }
            }
        }
        let xfers: Vec<_> = self.transfers.lock().expect("transfers lock").values().cloned().collect();
        for arc in xfers {
            let rec = arc.lock().expect("transfer lock");
            let waiting = rec.awaiting_ack || (rec.view.role == Role::Consumer && rec.view.state == TransferPhase::Requested);
            if waiting {
                if let Some(env) = &rec.last_sent {
                    self.emit(rec.peer(), env);
                    sent += 1;
                }
            }
        }
        sent
    }

    /// True when no process is waiting on a peer or a missing acknowledgement.
    pub fn is_quiescent(&self) -> bool {
        let negs: Vec<_> = self.negotiations.lock().expect("negotiations lock").values().cloned().collect();
        let xfers: Vec<_> = self.transfers.lock().expect("transfers lock").values().cloned().collect();
        negs.iter().all(|a| !a.lock().expect("negotiation lock").awaiting_peer())
            && xfers.iter().all(|a| {
                let r = a.lock().expect("transfer lock");
                !r.awaiting_ack && !(r.view.role == Role::Consumer && r.view.state == TransferPhase::Requested)
            })
    }
}

/// Signs an agreement on behalf of `keys` (used by tests and tooling that
/// need to forge or re-sign agreements).
pub fn sign_agreement(keys: &KeyPair, agreement: &Agreement) -> crate::identity::SignatureBytes {
    keys.sign(&agreement.signing_bytes())
}

/// Every process id mentioned by a transition log.
pub fn process_ids(transitions: &[Transition]) -> BTreeSet<String> {
    transitions.iter().map(|t| t.id.clone()).collect()
}
