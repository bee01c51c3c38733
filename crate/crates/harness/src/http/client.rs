//! Blocking HTTP clients for the federation services and the management API.

use std::collections::BTreeMap;
use std::io::Read;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dali_core::catalogue::{CatalogueEntry, CatalogueError, PeerCatalogue, Query, SearchResult, SyncReport};
use dali_core::clearinghouse::{AuditRecord, ChainVerdict, ClearingClient, ClearingError, Payload, RecordType, SCOPE_CLEARING_APPEND, SCOPE_CLEARING_READ};
use dali_core::connector::{
    Agreement, Chunk, DataPlaneError, Envelope, MessageType, NegotiationState, PayloadSource, TransferState, Transport,
    TransportError,
};
use dali_core::datalake::{DataRequest, IngestOutcome};
use dali_core::identity::{AccessToken, Credential, IdentityError, KeyPair, TokenSource};
use dali_core::model::digest_of;
use dali_core::policy::UsagePolicy;
use dali_core::{Clock, Digest, ParticipantId, SelfDescription};

use super::{
    TokenRequest, HEADER_CHUNK_INDEX, HEADER_CHUNK_TOTAL, HEADER_PAYLOAD_DIGEST, HEADER_TOTAL_SIZE,
    HEADER_TRANSFER_TOKEN, SCOPE_LAKE_READ,
};
use crate::HarnessError;

const TIMEOUT: Duration = Duration::from_secs(30);
/// Tokens are reused until this close to expiry.
const TOKEN_MARGIN_SECS: i64 = 30;

pub fn agent() -> ureq::Agent {
    ureq::AgentBuilder::new().timeout(TIMEOUT).build()
}

/// Error body of every service: `{"error": ..., "detail": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(default)]
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ClientError {
    /// The service answered with an error status.
    Status { status: u16, body: ErrorBody },
    /// No usable answer (connection, timeout, undecodable body).
    Transport(String),
}

impl std::fmt::Display for ClientError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ClientError::Status { status, body } => write!(f, "{status} {}: {}", body.error, body.detail),
            ClientError::Transport(m) => write!(f, "{m}"),
        }
    }
}

impl From<ClientError> for HarnessError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Status { .. } => HarnessError::Domain(e.to_string()),
            ClientError::Transport(m) => HarnessError::Http(m),
        }
    }
}

fn classify(e: ureq::Error) -> ClientError {
    match e {
        ureq::Error::Status(status, resp) => {
            let text = resp.into_string().unwrap_or_default();
            let body = serde_json::from_str(&text).unwrap_or(ErrorBody {
                error: "http-error".into(),
                detail: text,
            });
            ClientError::Status { status, body }
        }
        ureq::Error::Transport(t) => ClientError::Transport(t.to_string()),
    }
}

fn json<T: DeserializeOwned>(r: Result<ureq::Response, ureq::Error>) -> Result<T, ClientError> {
    r.map_err(classify)?
        .into_json()
        .map_err(|e| ClientError::Transport(format!("undecodable response: {e}")))
}

fn bytes(resp: ureq::Response) -> Result<Vec<u8>, ClientError> {
    let mut out = Vec::new();
    resp.into_reader()
        .read_to_end(&mut out)
        .map_err(|e| ClientError::Transport(e.to_string()))?;
    Ok(out)
}

fn bearer(t: &AccessToken) -> String {
    format!("Bearer {}", t.to_header_value())
}

fn query_pairs(q: &Query) -> Vec<(&'static str, String)> {
    let mut out = vec![("limit", q.limit.to_string()), ("offset", q.offset.to_string())];
    if let Some(k) = q.kind {
        out.push(("kind", k.as_str().to_string()));
    }
    if let Some(p) = &q.provider {
        out.push(("provider", p.to_string()));
    }
    if let Some(t) = &q.text {
        out.push(("text", t.clone()));
    }
    out
}

fn with_query(mut req: ureq::Request, q: &Query) -> ureq::Request {
    for (k, v) in query_pairs(q) {
        req = req.query(k, &v);
    }
    req
}

/// Resolves participants to base URLs and speaks the DSP binding.
pub struct HttpTransport {
    book: BTreeMap<ParticipantId, String>,
    agent: ureq::Agent,
}

impl HttpTransport {
    pub fn new(book: BTreeMap<ParticipantId, String>) -> Self {
        HttpTransport { book, agent: agent() }
    }

    fn base(&self, p: &ParticipantId) -> Result<&str, TransportError> {
        self.book
            .get(p)
            .map(String::as_str)
            .ok_or_else(|| TransportError::UnknownPeer(p.clone()))
    }
}

/// Path a message is posted to.
pub fn dsp_path(env: &Envelope) -> Option<String> {
    let kind = MessageType::parse(&env.message_type)?;
    Some(match kind {
        MessageType::ContractRequestMessage => "/dsp/negotiations".to_string(),
        MessageType::TransferRequestMessage => "/dsp/transfers".to_string(),
        k if k.is_transfer() => format!("/dsp/transfers/{}/events", env.correlation_id),
        _ => format!("/dsp/negotiations/{}/events", env.correlation_id),
    })
}

impl Transport for HttpTransport {
    fn send(&self, to: &ParticipantId, env: &Envelope) -> Result<(), TransportError> {
        let base = self.base(to)?;
        let path = dsp_path(env).ok_or_else(|| TransportError::Failed(format!("unknown type {}", env.message_type)))?;
        self.agent
            .post(&format!("{base}{path}"))
            .send_json(env)
            .map(|_| ())
            .map_err(|e| TransportError::Failed(classify(e).to_string()))
    }

    fn fetch_chunk(
        &self,
        provider: &ParticipantId,
        transfer_id: &str,
        token: &AccessToken,
        index: u64,
    ) -> Result<Chunk, DataPlaneError> {
        let base = self
            .base(provider)
            .map_err(|_| DataPlaneError::Transient(format!("no route to {provider}")))?;
        let resp = self
            .agent
            .get(&format!("{base}/dsp/transfers/{transfer_id}/payload"))
            .query("chunk", &index.to_string())
            .set(HEADER_TRANSFER_TOKEN, &token.to_header_value())
            .call();
        let resp = match resp {
            Ok(r) => r,
            Err(e) => {
                return Err(match classify(e) {
                    ClientError::Status { status: 401, body } => DataPlaneError::TokenInvalid(body.detail),
                    ClientError::Status { status: 409, body } => DataPlaneError::NotActive(body.detail),
                    ClientError::Status { status: 404, .. } => DataPlaneError::NoPayload,
                    other => DataPlaneError::Transient(other.to_string()),
                })
            }
        };
        let num = |h: &str| resp.header(h).and_then(|v| v.parse::<u64>().ok());
        let (Some(idx), Some(total_chunks), Some(total_size)) =
            (num(HEADER_CHUNK_INDEX), num(HEADER_CHUNK_TOTAL), num(HEADER_TOTAL_SIZE))
        else {
            return Err(DataPlaneError::Transient("chunk headers missing".into()));
        };
        let data = bytes(resp).map_err(|e| DataPlaneError::Transient(e.to_string()))?;
        Ok(Chunk {
            index: idx,
            total_chunks,
            total_size,
            data,
        })
    }
}

/// Obtains tokens from the identity service, proving key possession.
pub struct HttpTokenSource {
    url: String,
    keys: KeyPair,
    credential: Credential,
    clock: Arc<dyn Clock>,
    ttl_secs: i64,
    agent: ureq::Agent,
    cache: Mutex<BTreeMap<String, AccessToken>>,
}

impl HttpTokenSource {
    pub fn new(url: &str, keys: KeyPair, credential: Credential, clock: Arc<dyn Clock>, ttl_secs: i64) -> Self {
        HttpTokenSource {
            url: url.to_string(),
            keys,
            credential,
            clock,
            ttl_secs,
            agent: agent(),
            cache: Mutex::new(BTreeMap::new()),
        }
    }
}

impl TokenSource for HttpTokenSource {
    fn token(&self, scopes: &[&str]) -> Result<AccessToken, IdentityError> {
        let key = scopes.join(" ");
        let now = self.clock.now();
        if let Some(t) = self.cache.lock().expect("token cache lock").get(&key) {
            if t.expires_at.unix() - now.unix() > TOKEN_MARGIN_SECS && t.issued_at <= now {
                return Ok(t.clone());
            }
        }
        let req = TokenRequest::signed(
            &self.keys,
            self.credential.clone(),
            scopes.iter().map(|s| s.to_string()).collect(),
            self.ttl_secs,
            now,
        );
        let token: AccessToken = json(self.agent.post(&format!("{}/identity/tokens", self.url)).send_json(&req))
            .map_err(|e| IdentityError::Io(std::io::Error::other(e.to_string())))?;
        self.cache.lock().expect("token cache lock").insert(key, token.clone());
        Ok(token)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AppendRequest {
    pub record_type: RecordType,
    pub subject_id: String,
    pub payload: Payload,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct UsageReport {
    pub agreement_id: String,
    pub completed_transfers: u64,
}

pub struct HttpClearingClient {
    url: String,
    tokens: Arc<dyn TokenSource>,
    agent: ureq::Agent,
}

impl HttpClearingClient {
    pub fn new(url: &str, tokens: Arc<dyn TokenSource>) -> Self {
        HttpClearingClient {
            url: url.to_string(),
            tokens,
            agent: agent(),
        }
    }

    fn token(&self, scope: &str) -> Result<AccessToken, ClearingError> {
        self.tokens
            .token(&[scope])
            .map_err(|e| ClearingError::Unavailable(e.to_string()))
    }

    pub fn records(&self, filter: &[(&str, String)]) -> Result<Vec<AuditRecord>, ClearingError> {
        let t = self.token(SCOPE_CLEARING_READ)?;
        let mut req = self.agent.get(&format!("{}/clearing/records", self.url)).set("authorization", &bearer(&t));
        for (k, v) in filter {
            req = req.query(k, v);
        }
        json(req.call()).map_err(|e| ClearingError::Unavailable(e.to_string()))
    }
}

impl ClearingClient for HttpClearingClient {
    fn append(&self, record_type: RecordType, subject_id: &str, payload: Payload) -> Result<AuditRecord, ClearingError> {
        let t = self.token(SCOPE_CLEARING_APPEND)?;
        let body = AppendRequest {
            record_type,
            subject_id: subject_id.to_string(),
            payload,
        };
        json(
            self.agent
                .post(&format!("{}/clearing/records", self.url))
                .set("authorization", &bearer(&t))
                .send_json(&body),
        )
        .map_err(|e| ClearingError::Unavailable(e.to_string()))
    }

    fn completed_transfers(&self, agreement_id: &str) -> Result<u64, ClearingError> {
        let t = self.token(SCOPE_CLEARING_READ)?;
        let r: UsageReport = json(
            self.agent
                .get(&format!("{}/clearing/usage/{agreement_id}", self.url))
                .set("authorization", &bearer(&t))
                .call(),
        )
        .map_err(|e| ClearingError::Unavailable(e.to_string()))?;
        Ok(r.completed_transfers)
    }
}

/// Reads payloads from the federation data lake.
pub struct HttpPayloadSource {
    url: String,
    tokens: Arc<dyn TokenSource>,
    agent: ureq::Agent,
}

impl HttpPayloadSource {
    pub fn new(url: &str, tokens: Arc<dyn TokenSource>) -> Self {
        HttpPayloadSource {
            url: url.to_string(),
            tokens,
            agent: agent(),
        }
    }
}

impl PayloadSource for HttpPayloadSource {
    fn payload(&self, digest: &Digest) -> Option<Vec<u8>> {
        let t = self.tokens.token(&[SCOPE_LAKE_READ]).ok()?;
        let resp = self
            .agent
            .get(&format!("{}/lake/objects/{}", self.url, digest.hex()))
            .set("authorization", &bearer(&t))
            .call()
            .ok()?;
        let data = bytes(resp).ok()?;
        (digest_of(&data) == *digest).then_some(data)
    }
}

pub struct HttpPeerCatalogue {
    url: String,
    agent: ureq::Agent,
}

impl HttpPeerCatalogue {
    pub fn new(url: &str) -> Self {
        HttpPeerCatalogue {
            url: url.to_string(),
            agent: agent(),
        }
    }
}

impl PeerCatalogue for HttpPeerCatalogue {
    fn endpoint(&self) -> String {
        self.url.clone()
    }

    fn search(&self, q: &Query, token: &AccessToken) -> Result<SearchResult, CatalogueError> {
        let req = self
            .agent
            .get(&format!("{}/catalogue/assets", self.url))
            .set("authorization", &bearer(token));
        json(with_query(req, q).call()).map_err(|e| CatalogueError::PeerUnreachable {
            peer: self.url.clone(),
            reason: e.to_string(),
        })
    }
}

// ---- management API --------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StartNegotiation {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider_id: Option<ParticipantId>,
    pub asset_id: String,
    pub offer_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<UsagePolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub content_digest: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negotiation_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RespondRequest {
    pub accept: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DecisionRequest {
    /// `accept`, `counter` or `reject`.
    pub decision: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<UsagePolicy>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StartTransfer {
    pub agreement_id: String,
    pub purpose: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_id: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestRequest {
    pub request: DataRequest,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeStatus {
    pub participant_id: ParticipantId,
    pub role: String,
    pub quiescent: bool,
    pub inbox: u64,
    pub negotiations: u64,
    pub transfers: u64,
    pub assets: u64,
}

/// Client for one node's `/mgmt` API (plus the public audit verification).
pub struct MgmtClient {
    url: String,
    agent: ureq::Agent,
}

impl MgmtClient {
    pub fn new(url: &str) -> Self {
        MgmtClient {
            url: url.trim_end_matches('/').to_string(),
            agent: agent(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn at(&self, path: &str) -> String {
        format!("{}{path}", self.url)
    }

    pub fn start_negotiation(&self, req: &StartNegotiation) -> Result<NegotiationState, ClientError> {
        json(self.agent.post(&self.at("/mgmt/negotiations")).send_json(req))
    }

    pub fn negotiations(&self) -> Result<Vec<NegotiationState>, ClientError> {
        json(self.agent.get(&self.at("/mgmt/negotiations")).call())
    }

    pub fn negotiation(&self, id: &str) -> Result<NegotiationState, ClientError> {
        json(self.agent.get(&self.at(&format!("/mgmt/negotiations/{id}"))).call())
    }

    pub fn respond(&self, id: &str, accept: bool) -> Result<NegotiationState, ClientError> {
        json(
            self.agent
                .post(&self.at(&format!("/mgmt/negotiations/{id}/respond")))
                .send_json(RespondRequest { accept }),
        )
    }

    pub fn decide(&self, id: &str, req: &DecisionRequest) -> Result<NegotiationState, ClientError> {
        json(self.agent.post(&self.at(&format!("/mgmt/negotiations/{id}/decision"))).send_json(req))
    }

    pub fn finalize(&self, id: &str) -> Result<Agreement, ClientError> {
        json(self.agent.post(&self.at(&format!("/mgmt/negotiations/{id}/finalize"))).call())
    }

    pub fn agreements(&self) -> Result<Vec<Agreement>, ClientError> {
        json(self.agent.get(&self.at("/mgmt/agreements")).call())
    }

    pub fn start_transfer(&self, req: &StartTransfer) -> Result<TransferState, ClientError> {
        json(self.agent.post(&self.at("/mgmt/transfers")).send_json(req))
    }

    pub fn transfers(&self) -> Result<Vec<TransferState>, ClientError> {
        json(self.agent.get(&self.at("/mgmt/transfers")).call())
    }

    pub fn transfer(&self, id: &str) -> Result<TransferState, ClientError> {
        json(self.agent.get(&self.at(&format!("/mgmt/transfers/{id}"))).call())
    }

    /// Pulls the payload; returns the bytes and the digest the node reported.
    pub fn pull(&self, id: &str) -> Result<(Vec<u8>, Digest), ClientError> {
        let resp = self
            .agent
            .post(&self.at(&format!("/mgmt/transfers/{id}/pull")))
            .call()
            .map_err(classify)?;
        let digest = resp
            .header(HEADER_PAYLOAD_DIGEST)
            .and_then(|h| Digest::from_hex(h).ok())
            .ok_or_else(|| ClientError::Transport("payload digest header missing".into()))?;
        Ok((bytes(resp)?, digest))
    }

    pub fn search(&self, q: &Query) -> Result<SearchResult, ClientError> {
        json(with_query(self.agent.get(&self.at("/mgmt/catalogue")), q).call())
    }

    pub fn federate(&self, peer_url: &str) -> Result<SyncReport, ClientError> {
        json(
            self.agent
                .post(&self.at("/mgmt/catalogue/federate"))
                .send_json(serde_json::json!({ "peer": peer_url })),
        )
    }

    pub fn publish(&self, sd: &SelfDescription) -> Result<CatalogueEntry, ClientError> {
        json(self.agent.post(&self.at("/mgmt/assets")).send_json(sd))
    }

    pub fn upload_payload(&self, asset_id: &str, data: &[u8]) -> Result<serde_json::Value, ClientError> {
        json(
            self.agent
                .put(&self.at(&format!("/mgmt/assets/{asset_id}/payload")))
                .set("content-type", "application/octet-stream")
                .send_bytes(data),
        )
    }

    pub fn ingest(&self, request: &DataRequest, seed: u64) -> Result<IngestOutcome, ClientError> {
        json(self.agent.post(&self.at("/mgmt/ingest")).send_json(IngestRequest {
            request: request.clone(),
            seed,
        }))
    }

    pub fn status(&self) -> Result<NodeStatus, ClientError> {
        json(self.agent.get(&self.at("/mgmt/status")).call())
    }

    pub fn tick(&self) -> Result<serde_json::Value, ClientError> {
        json(self.agent.post(&self.at("/mgmt/tick")).call())
    }

    /// A token for the node's own subject; returns the token JSON and header value.
    pub fn token(&self, scopes: &[String]) -> Result<serde_json::Value, ClientError> {
        json(
            self.agent
                .post(&self.at("/mgmt/token"))
                .send_json(serde_json::json!({ "scopes": scopes })),
        )
    }

    pub fn audit_verify(&self) -> Result<ChainVerdict, ClientError> {
        json(self.agent.get(&self.at("/clearing/verify")).call())
    }
}
