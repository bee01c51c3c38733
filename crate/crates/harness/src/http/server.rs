//! Routes of a node service. Protocol messages are queued for the node's
//! worker and answered with 202; everything else runs on the blocking pool.

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::extract::{DefaultBodyLimit, Path, Query as QueryParams, State};
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use dali_core::catalogue::{CatalogueError, Query, MAX_QUERY_LIMIT, SCOPE_CATALOGUE_FEDERATE, SCOPE_CATALOGUE_READ, SCOPE_CATALOGUE_WRITE};
use dali_core::clearinghouse::{ClearingError, RecordFilter, RecordType, SCOPE_CLEARING_READ};
use dali_core::connector::{
    ConnectorError, DataPlaneError, Envelope, MessageType, NegotiationRequest, ProviderDecision,
};
use dali_core::datalake::{place_asset, BackendKind, LakeError};
use dali_core::identity::AccessToken;
use dali_core::model::digest_of;
use dali_core::vocabulary::{ConceptScheme, MetadataSchema, VocabularyError};
use dali_core::{AssetKind, Digest, ParticipantId, SelfDescription};

use super::client::{
    agent, AppendRequest, DecisionRequest, ErrorBody, HttpPeerCatalogue, IngestRequest, NodeStatus, RespondRequest,
    StartNegotiation, StartTransfer, UsageReport,
};
use super::{
    Hub, NodeService, TokenRequest, HEADER_CHUNK_INDEX, HEADER_CHUNK_TOTAL, HEADER_PAYLOAD_DIGEST,
    HEADER_TOTAL_SIZE, HEADER_TRANSFER_TOKEN, MAX_BODY_BYTES, PROOF_WINDOW_SECS, SCOPE_LAKE_INGEST, SCOPE_LAKE_READ,
    SCOPE_LAKE_WRITE,
};

type Svc = State<Arc<NodeService>>;

pub fn router(svc: Arc<NodeService>) -> Router {
    Router::new()
        .route("/dsp/negotiations", post(dsp_negotiation_request))
        .route("/dsp/negotiations/{id}/events", post(dsp_negotiation_event))
        .route("/dsp/transfers", post(dsp_transfer_request))
        .route("/dsp/transfers/{id}/events", post(dsp_transfer_event))
        .route("/dsp/transfers/{id}/payload", get(dsp_payload))
        .route("/identity/tokens", post(identity_token))
        .route("/clearing/records", post(clearing_append).get(clearing_records))
        .route("/clearing/verify", get(clearing_verify))
        .route("/clearing/usage/{agreement}", get(clearing_usage))
        .route("/catalogue/assets", post(catalogue_register).get(catalogue_search))
        .route("/catalogue/federate", post(catalogue_federate))
        .route("/vocabulary/schemes/{id}", put(vocab_put_scheme).get(vocab_get_scheme))
        .route("/vocabulary/schemas/{kind}", put(vocab_put_schema).get(vocab_get_schema))
        .route("/vocabulary/validate", post(vocab_validate))
        .route("/lake/objects/{digest}", put(lake_put).get(lake_get))
        .route("/lake/ingest", post(lake_ingest))
        .route("/lake/manifests/{asset}", get(lake_manifest))
        .route("/mgmt/negotiations", post(mgmt_negotiate).get(mgmt_negotiations))
        .route("/mgmt/negotiations/{id}", get(mgmt_negotiation))
        .route("/mgmt/negotiations/{id}/respond", post(mgmt_respond))
        .route("/mgmt/negotiations/{id}/decision", post(mgmt_decide))
        .route("/mgmt/negotiations/{id}/finalize", post(mgmt_finalize))
        .route("/mgmt/agreements", get(mgmt_agreements))
        .route("/mgmt/agreements/{id}", get(mgmt_agreement))
        .route("/mgmt/transfers", post(mgmt_transfer).get(mgmt_transfers))
        .route("/mgmt/transfers/{id}", get(mgmt_transfer_state))
        .route("/mgmt/transfers/{id}/pull", post(mgmt_pull))
        .route("/mgmt/assets", post(mgmt_publish).get(mgmt_assets))
        .route("/mgmt/assets/{id}/payload", put(mgmt_upload))
        .route("/mgmt/catalogue", get(mgmt_catalogue))
        .route("/mgmt/catalogue/federate", post(mgmt_federate))
        .route("/mgmt/ingest", post(mgmt_ingest))
        .route("/mgmt/tick", post(mgmt_tick))
        .route("/mgmt/status", get(mgmt_status))
        .route("/mgmt/token", post(mgmt_token))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(svc)
}

// ---- plumbing --------------------------------------------------------------

fn fail(status: StatusCode, error: &str, detail: impl ToString) -> Response {
    (
        status,
        Json(ErrorBody {
            error: error.to_string(),
            detail: detail.to_string(),
        }),
    )
        .into_response()
}

fn ok<T: Serialize>(status: StatusCode, value: &T) -> Response {
    (status, Json(value)).into_response()
}

async fn blocking<F>(f: F) -> Response
where
    F: FnOnce() -> Response + Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .unwrap_or_else(|e| fail(StatusCode::INTERNAL_SERVER_ERROR, "internal", e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(body: &[u8]) -> Result<T, Response> {
    serde_json::from_slice(body).map_err(|e| fail(StatusCode::BAD_REQUEST, "malformed-body", e))
}

fn bearer(headers: &HeaderMap) -> Result<AccessToken, Response> {
    let raw = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .ok_or_else(|| fail(StatusCode::UNAUTHORIZED, "missing-token", "bearer token required"))?;
    AccessToken::from_header_value(raw)
        .ok_or_else(|| fail(StatusCode::UNAUTHORIZED, "malformed-token", "bearer token does not decode"))
}

fn hub(svc: &NodeService) -> Result<&Hub, Response> {
    svc.hub
        .as_ref()
        .ok_or_else(|| fail(StatusCode::NOT_FOUND, "not-federator", "this node does not run federation services"))
}

fn authorize(hub: &Hub, token: &AccessToken, scope: &str) -> Result<(), Response> {
    hub.identity
        .verifier()
        .verify(token, scope)
        .into_result()
        .map_err(|r| fail(StatusCode::FORBIDDEN, "scope-denied", r))
}

fn connector_error(e: ConnectorError) -> Response {
    let (status, code) = match &e {
        ConnectorError::UnknownNegotiation(_) | ConnectorError::UnknownAgreement(_) | ConnectorError::UnknownTransfer(_) => {
            (StatusCode::NOT_FOUND, "not-found")
        }
        ConnectorError::UnknownProvider(_) => (StatusCode::NOT_FOUND, "unknown-provider"),
        ConnectorError::WrongState { .. } => (StatusCode::CONFLICT, "wrong-state"),
        ConnectorError::TransportFailure(_) => (StatusCode::BAD_GATEWAY, "transport-failure"),
        ConnectorError::DigestMismatch { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "digest-mismatch"),
        ConnectorError::TokenInvalid(_) => (StatusCode::FORBIDDEN, "token-invalid"),
        ConnectorError::MissingCountersignature(_) => (StatusCode::CONFLICT, "missing-countersignature"),
        ConnectorError::CredentialInvalid(_) => (StatusCode::FORBIDDEN, "credential-invalid"),
        ConnectorError::BadSignature | ConnectorError::UnknownSender(_) => (StatusCode::UNAUTHORIZED, "bad-signature"),
        ConnectorError::Message(_) => (StatusCode::BAD_REQUEST, "malformed-message"),
    };
    fail(status, code, e)
}

fn catalogue_error(e: CatalogueError) -> Response {
    let (status, code) = match &e {
        CatalogueError::ScopeDenied(_) => (StatusCode::FORBIDDEN, "scope-denied"),
        CatalogueError::SubjectMismatch { .. } => (StatusCode::FORBIDDEN, "subject-mismatch"),
        CatalogueError::InvalidQuery(_) => (StatusCode::BAD_REQUEST, "invalid-query"),
        CatalogueError::PeerUnreachable { .. } => (StatusCode::BAD_GATEWAY, "peer-unreachable"),
    };
    fail(status, code, e)
}

fn clearing_error(e: ClearingError) -> Response {
    let (status, code) = match &e {
        ClearingError::ScopeDenied(_) => (StatusCode::FORBIDDEN, "scope-denied"),
        ClearingError::ActorMismatch { .. } => (StatusCode::FORBIDDEN, "actor-mismatch"),
        ClearingError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
        ClearingError::Io(_) | ClearingError::Serialization(_) => (StatusCode::INTERNAL_SERVER_ERROR, "storage-failure"),
    };
    fail(status, code, e)
}

fn lake_error(e: LakeError) -> Response {
    let (status, code) = match &e {
        LakeError::StorageFull { .. } => (StatusCode::INSUFFICIENT_STORAGE, "storage-full"),
        LakeError::IoFailure(_) => (StatusCode::INTERNAL_SERVER_ERROR, "io-failure"),
        LakeError::NoPayloadBackend(_) => (StatusCode::UNPROCESSABLE_ENTITY, "no-payload-backend"),
        LakeError::NoCapableTestbed => (StatusCode::UNPROCESSABLE_ENTITY, "no-capable-testbed"),
        LakeError::MalformedCsv(_) => (StatusCode::UNPROCESSABLE_ENTITY, "malformed-csv"),
        LakeError::NotFound(_) => (StatusCode::NOT_FOUND, "not-found"),
        LakeError::InvalidRequest(_) => (StatusCode::BAD_REQUEST, "invalid-request"),
        LakeError::PublishFailed(_) => (StatusCode::BAD_GATEWAY, "publish-failed"),
    };
    fail(status, code, e)
}

fn vocabulary_error(e: VocabularyError) -> Response {
    let (status, code) = match &e {
        VocabularyError::ScopeDenied(_) => (StatusCode::FORBIDDEN, "scope-denied"),
        VocabularyError::UnknownScheme(_) | VocabularyError::UnknownConcept { .. } => (StatusCode::NOT_FOUND, "not-found"),
        _ => (StatusCode::UNPROCESSABLE_ENTITY, "invalid-vocabulary"),
    };
    fail(status, code, e)
}

fn digest_param(raw: &str) -> Result<Digest, Response> {
    let hex = raw.strip_prefix("sha256:").unwrap_or(raw);
    Digest::from_hex(hex).map_err(|e| fail(StatusCode::BAD_REQUEST, "bad-digest", e))
}

fn service_token(svc: &NodeService, scope: &str) -> Result<AccessToken, Response> {
    svc.tokens
        .token(&[scope])
        .map_err(|e| fail(StatusCode::SERVICE_UNAVAILABLE, "no-token", e))
}

// ---- DSP -------------------------------------------------------------------

#[derive(Clone, Copy, PartialEq)]
enum Expect {
    NegotiationRequest,
    NegotiationEvent,
    TransferRequest,
    TransferEvent,
}

fn accept_message(svc: &NodeService, body: &[u8], expect: Expect, id: Option<&str>) -> Response {
    if svc.connector.is_none() {
        return fail(StatusCode::NOT_FOUND, "no-connector", "this node runs no connector");
    }
    let env: Envelope = match parse_json(body) {
        Ok(e) => e,
        Err(r) => return r,
    };
    let Some(kind) = MessageType::parse(&env.message_type) else {
        return fail(StatusCode::BAD_REQUEST, "unknown-message-type", &env.message_type);
    };
    let fits = match expect {
        Expect::NegotiationRequest => kind == MessageType::ContractRequestMessage,
        Expect::NegotiationEvent => kind.is_negotiation() && kind != MessageType::ContractRequestMessage,
        Expect::TransferRequest => kind == MessageType::TransferRequestMessage,
        Expect::TransferEvent => kind.is_transfer() && kind != MessageType::TransferRequestMessage,
    };
    if !fits {
        return fail(StatusCode::BAD_REQUEST, "wrong-endpoint", format!("{} not accepted here", env.message_type));
    }
    if id.is_some_and(|id| id != env.correlation_id) {
        return fail(StatusCode::BAD_REQUEST, "id-mismatch", "path id differs from correlation id");
    }
    if !svc.enqueue(env) {
        return fail(StatusCode::SERVICE_UNAVAILABLE, "shutting-down", "node is stopping");
    }
    StatusCode::ACCEPTED.into_response()
}

async fn dsp_negotiation_request(State(svc): Svc, body: Bytes) -> Response {
    accept_message(&svc, &body, Expect::NegotiationRequest, None)
}

async fn dsp_negotiation_event(State(svc): Svc, Path(id): Path<String>, body: Bytes) -> Response {
    accept_message(&svc, &body, Expect::NegotiationEvent, Some(&id))
}

async fn dsp_transfer_request(State(svc): Svc, body: Bytes) -> Response {
    accept_message(&svc, &body, Expect::TransferRequest, None)
}

async fn dsp_transfer_event(State(svc): Svc, Path(id): Path<String>, body: Bytes) -> Response {
    accept_message(&svc, &body, Expect::TransferEvent, Some(&id))
}

#[derive(Deserialize)]
struct ChunkParams {
    chunk: Option<u64>,
}

fn data_plane_error(e: DataPlaneError) -> Response {
    let (status, code) = match &e {
        DataPlaneError::TokenInvalid(_) => (StatusCode::UNAUTHORIZED, "token-invalid"),
        DataPlaneError::NotActive(_) => (StatusCode::CONFLICT, "not-active"),
        DataPlaneError::NoPayload => (StatusCode::NOT_FOUND, "no-payload"),
        DataPlaneError::Transient(_) => (StatusCode::SERVICE_UNAVAILABLE, "transient"),
    };
    fail(status, code, e)
}

/// One chunk with `?chunk=i`, otherwise the whole payload streamed chunk by chunk.
async fn dsp_payload(
    State(svc): Svc,
    Path(id): Path<String>,
    QueryParams(p): QueryParams<ChunkParams>,
    headers: HeaderMap,
) -> Response {
    let Some(connector) = svc.connector.clone() else {
        return fail(StatusCode::NOT_FOUND, "no-connector", "this node runs no connector");
    };
    let Some(token) = headers
        .get(HEADER_TRANSFER_TOKEN)
        .and_then(|v| v.to_str().ok())
        .and_then(AccessToken::from_header_value)
    else {
        return fail(StatusCode::UNAUTHORIZED, "token-invalid", "transfer token missing or malformed");
    };
    let first = p.chunk.unwrap_or(0);
    let (c, t, i) = (connector.clone(), token.clone(), id.clone());
    let chunk = match tokio::task::spawn_blocking(move || c.serve_chunk(&i, &t, first)).await {
        Ok(Ok(chunk)) => chunk,
        Ok(Err(e)) => return data_plane_error(e),
        Err(e) => return fail(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
    };
    let mut resp_headers = HeaderMap::new();
    let num = |n: u64| HeaderValue::from_str(&n.to_string()).expect("digits are a valid header");
    resp_headers.insert(HEADER_TOTAL_SIZE, num(chunk.total_size));
    resp_headers.insert(HEADER_CHUNK_TOTAL, num(chunk.total_chunks));
    if p.chunk.is_some() {
        resp_headers.insert(HEADER_CHUNK_INDEX, num(chunk.index));
        return (StatusCode::OK, resp_headers, chunk.data).into_response();
    }
    let total = chunk.total_chunks;
    let (tx, rx) = tokio::sync::mpsc::channel::<Result<Vec<u8>, std::io::Error>>(2);
    tokio::task::spawn_blocking(move || {
        if tx.blocking_send(Ok(chunk.data)).is_err() {
            return;
        }
        for index in 1..total {
            let item = connector
                .serve_chunk(&id, &token, index)
                .map(|c| c.data)
                .map_err(|e| std::io::Error::other(e.to_string()));
            let stop = item.is_err();
            if tx.blocking_send(item).is_err() || stop {
                return;
            }
        }
    });
    let stream = futures_util::stream::unfold(rx, |mut rx| async move { rx.recv().await.map(|item| (item, rx)) });
    (StatusCode::OK, resp_headers, Body::from_stream(stream)).into_response()
}

// ---- identity --------------------------------------------------------------

async fn identity_token(State(svc): Svc, body: Bytes) -> Response {
    blocking(move || {
        let hub = match hub(&svc) {
            Ok(h) => h,
            Err(r) => return r,
        };
        let req: TokenRequest = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        let subject = &req.credential.subject;
        let Some(key) = hub.trust.participant_key(subject) else {
            return fail(StatusCode::UNAUTHORIZED, "unknown-participant", subject);
        };
        let msg = TokenRequest::proof_bytes(subject, &req.scopes, req.ttl_secs, req.requested_at);
        if !key.verify(&msg, &req.proof) {
            return fail(StatusCode::UNAUTHORIZED, "bad-proof", "proof of possession does not verify");
        }
        let skew = (svc.clock.now().unix() - req.requested_at.unix()).abs();
        if skew > PROOF_WINDOW_SECS {
            return fail(StatusCode::UNAUTHORIZED, "stale-proof", format!("request is {skew}s off the service clock"));
        }
        match hub.identity.issue(&req.credential, req.scopes, req.ttl_secs) {
            Ok(t) => ok(StatusCode::CREATED, &t),
            Err(e) => fail(StatusCode::FORBIDDEN, "credential-rejected", e),
        }
    })
    .await
}

// ---- clearing house --------------------------------------------------------

async fn clearing_append(State(svc): Svc, headers: HeaderMap, body: Bytes) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        let req: AppendRequest = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        match hub
            .clearing
            .append(req.record_type, &token.subject.clone(), &req.subject_id, req.payload, &token)
        {
            Ok(rec) => ok(StatusCode::CREATED, &rec),
            Err(e) => clearing_error(e),
        }
    })
    .await
}

#[derive(Deserialize)]
struct RecordParams {
    #[serde(rename = "type")]
    record_type: Option<String>,
    actor: Option<String>,
    subject: Option<String>,
    from: Option<u64>,
    to: Option<u64>,
}

async fn clearing_records(State(svc): Svc, headers: HeaderMap, QueryParams(p): QueryParams<RecordParams>) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        let record_type = match p.record_type.as_deref().map(RecordType::parse) {
            Some(None) => return fail(StatusCode::BAD_REQUEST, "bad-filter", "unknown record type"),
            Some(t) => t,
            None => None,
        };
        let actor = match p.actor.as_deref().map(ParticipantId::parse).transpose() {
            Ok(a) => a,
            Err(e) => return fail(StatusCode::BAD_REQUEST, "bad-filter", e),
        };
        let seq_range = match (p.from, p.to) {
            (None, None) => None,
            (f, t) => Some((f.unwrap_or(0), t.unwrap_or(u64::MAX))),
        };
        let filter = RecordFilter {
            record_type,
            actor,
            subject_id: p.subject,
            seq_range,
        };
        match hub.clearing.query_records(&filter, &token) {
            Ok(recs) => ok(StatusCode::OK, &recs),
            Err(e) => clearing_error(e),
        }
    })
    .await
}

async fn clearing_verify(State(svc): Svc) -> Response {
    blocking(move || match hub(&svc) {
        Ok(h) => ok(StatusCode::OK, &h.clearing.verify_chain()),
        Err(r) => r,
    })
    .await
}

async fn clearing_usage(State(svc): Svc, headers: HeaderMap, Path(agreement): Path<String>) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        if let Err(r) = authorize(hub, &token, SCOPE_CLEARING_READ) {
            return r;
        }
        let n = hub.clearing.count_completed_transfers(&agreement);
        ok(
            StatusCode::OK,
            &UsageReport {
                agreement_id: agreement,
                completed_transfers: n,
            },
        )
    })
    .await
}

// ---- catalogue -------------------------------------------------------------

async fn catalogue_register(State(svc): Svc, headers: HeaderMap, body: Bytes) -> Response {
    blocking(move || {
        let token = match bearer(&headers) {
            Ok(t) => t,
            Err(r) => return r,
        };
        let sd: SelfDescription = match parse_json(&body) {
            Ok(s) => s,
            Err(r) => return r,
        };
        match svc.catalogue.register(sd, &token) {
            Ok(entry) => ok(StatusCode::CREATED, &entry),
            Err(e) => catalogue_error(e),
        }
    })
    .await
}

#[derive(Deserialize)]
struct SearchParams {
    kind: Option<String>,
    provider: Option<String>,
    text: Option<String>,
    limit: Option<u32>,
    offset: Option<u32>,
}

fn to_query(p: SearchParams) -> Result<Query, Response> {
    let bad = |e: String| fail(StatusCode::BAD_REQUEST, "invalid-query", e);
    let kind = p
        .kind
        .map(|k| k.parse::<AssetKind>().map_err(|e| bad(e.to_string())))
        .transpose()?;
    let provider = p
        .provider
        .map(|k| ParticipantId::parse(&k).map_err(|e| bad(e.to_string())))
        .transpose()?;
    Ok(Query {
        kind,
        provider,
        text: p.text,
        metadata_filters: Vec::new(),
        limit: p.limit.unwrap_or(MAX_QUERY_LIMIT),
        offset: p.offset.unwrap_or(0),
    })
}

async fn catalogue_search(State(svc): Svc, headers: HeaderMap, QueryParams(p): QueryParams<SearchParams>) -> Response {
    blocking(move || {
        let token = match bearer(&headers) {
            Ok(t) => t,
            Err(r) => return r,
        };
        let q = match to_query(p) {
            Ok(q) => q,
            Err(r) => return r,
        };
        match svc.catalogue.search(&q, &token) {
            Ok(res) => ok(StatusCode::OK, &res),
            Err(e) => catalogue_error(e),
        }
    })
    .await
}

#[derive(Deserialize)]
struct FederateRequest {
    peer: String,
}

async fn catalogue_federate(State(svc): Svc, headers: HeaderMap, body: Bytes) -> Response {
    blocking(move || {
        let token = match bearer(&headers) {
            Ok(t) => t,
            Err(r) => return r,
        };
        let req: FederateRequest = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        match svc.catalogue.federate_from(&HttpPeerCatalogue::new(&req.peer), &token) {
            Ok(rep) => ok(StatusCode::OK, &rep),
            Err(e) => catalogue_error(e),
        }
    })
    .await
}

// ---- vocabulary ------------------------------------------------------------

async fn vocab_put_scheme(State(svc): Svc, headers: HeaderMap, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        let scheme: ConceptScheme = match parse_json(&body) {
            Ok(s) => s,
            Err(r) => return r,
        };
        if scheme.scheme_id != id {
            return fail(StatusCode::BAD_REQUEST, "id-mismatch", "path id differs from scheme id");
        }
        match hub.vocabulary.register_scheme(scheme.clone(), &token) {
            Ok(()) => ok(StatusCode::OK, &scheme),
            Err(e) => vocabulary_error(e),
        }
    })
    .await
}

async fn vocab_get_scheme(State(svc): Svc, Path(id): Path<String>) -> Response {
    blocking(move || {
        let hub = match hub(&svc) {
            Ok(h) => h,
            Err(r) => return r,
        };
        match hub.vocabulary.scheme(&id) {
            Some(s) => ok(StatusCode::OK, &s),
            None => fail(StatusCode::NOT_FOUND, "not-found", format!("scheme {id}")),
        }
    })
    .await
}

async fn vocab_put_schema(State(svc): Svc, headers: HeaderMap, Path(kind): Path<String>, body: Bytes) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        let schema: MetadataSchema = match parse_json(&body) {
            Ok(s) => s,
            Err(r) => return r,
        };
        if schema.kind.as_str() != kind {
            return fail(StatusCode::BAD_REQUEST, "kind-mismatch", "path kind differs from schema kind");
        }
        match hub.vocabulary.register_schema(schema.clone(), &token) {
            Ok(()) => ok(StatusCode::OK, &schema),
            Err(e) => vocabulary_error(e),
        }
    })
    .await
}

async fn vocab_get_schema(State(svc): Svc, Path(kind): Path<String>) -> Response {
    blocking(move || {
        let hub = match hub(&svc) {
            Ok(h) => h,
            Err(r) => return r,
        };
        let Ok(k) = kind.parse::<AssetKind>() else {
            return fail(StatusCode::BAD_REQUEST, "unknown-kind", kind);
        };
        match hub.vocabulary.schema(k) {
            Some(s) => ok(StatusCode::OK, &s),
            None => fail(StatusCode::NOT_FOUND, "not-found", format!("schema {kind}")),
        }
    })
    .await
}

#[derive(Deserialize)]
struct ValidateRequest {
    kind: AssetKind,
    metadata: BTreeMap<String, String>,
}

async fn vocab_validate(State(svc): Svc, body: Bytes) -> Response {
    blocking(move || {
        let hub = match hub(&svc) {
            Ok(h) => h,
            Err(r) => return r,
        };
        let req: ValidateRequest = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        let violations = hub.vocabulary.validate_kind(req.kind, &req.metadata);
        ok(
            StatusCode::OK,
            &serde_json::json!({ "valid": violations.is_empty(), "violations": violations }),
        )
    })
    .await
}

// ---- data lake -------------------------------------------------------------

#[derive(Deserialize)]
struct BackendParams {
    backend: Option<String>,
}

async fn lake_put(
    State(svc): Svc,
    headers: HeaderMap,
    Path(digest): Path<String>,
    QueryParams(p): QueryParams<BackendParams>,
    body: Bytes,
) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        if let Err(r) = authorize(hub, &token, SCOPE_LAKE_WRITE) {
            return r;
        }
        let expected = match digest_param(&digest) {
            Ok(d) => d,
            Err(r) => return r,
        };
        let backend = match p.backend.as_deref().map(BackendKind::parse) {
            None => BackendKind::DataLake,
            Some(Some(b)) => b,
            Some(None) => return fail(StatusCode::BAD_REQUEST, "unknown-backend", p.backend.unwrap_or_default()),
        };
        let actual = digest_of(&body);
        if actual != expected {
            return fail(
                StatusCode::UNPROCESSABLE_ENTITY,
                "digest-mismatch",
                format!("body hashes to {actual}"),
            );
        }
        match hub.lake.store().put_object(&body, backend) {
            Ok(obj) => ok(StatusCode::CREATED, &obj),
            Err(e) => lake_error(e),
        }
    })
    .await
}

async fn lake_get(State(svc): Svc, headers: HeaderMap, Path(digest): Path<String>) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        if let Err(r) = authorize(hub, &token, SCOPE_LAKE_READ) {
            return r;
        }
        let d = match digest_param(&digest) {
            Ok(d) => d,
            Err(r) => return r,
        };
        match hub.lake.store().get_object(&d) {
            Ok(bytes) => (StatusCode::OK, bytes).into_response(),
            Err(e) => lake_error(e),
        }
    })
    .await
}

async fn lake_ingest(State(svc): Svc, headers: HeaderMap, body: Bytes) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        if let Err(r) = authorize(hub, &token, SCOPE_LAKE_INGEST) {
            return r;
        }
        run_ingest(hub, &body)
    })
    .await
}

fn run_ingest(hub: &Hub, body: &[u8]) -> Response {
    let req: IngestRequest = match parse_json(body) {
        Ok(r) => r,
        Err(r) => return r,
    };
    match hub.pipeline.ingest(&req.request, req.seed) {
        Ok(out) => ok(StatusCode::OK, &out),
        Err(e) => lake_error(e),
    }
}

async fn lake_manifest(State(svc): Svc, headers: HeaderMap, Path(asset): Path<String>) -> Response {
    blocking(move || {
        let (hub, token) = match (hub(&svc), bearer(&headers)) {
            (Ok(h), Ok(t)) => (h, t),
            (Err(r), _) | (_, Err(r)) => return r,
        };
        if let Err(r) = authorize(hub, &token, SCOPE_LAKE_READ) {
            return r;
        }
        match hub.lake.manifest(&asset) {
            Some(m) => ok(StatusCode::OK, &m),
            None => fail(StatusCode::NOT_FOUND, "not-found", format!("manifest {asset}")),
        }
    })
    .await
}

// ---- management ------------------------------------------------------------

fn with_connector<F>(svc: Arc<NodeService>, f: F) -> impl std::future::Future<Output = Response>
where
    F: FnOnce(&NodeService, &dali_core::connector::Connector) -> Response + Send + 'static,
{
    blocking(move || match &svc.connector {
        Some(c) => f(&svc, c),
        None => fail(StatusCode::NOT_FOUND, "no-connector", "this node runs no connector"),
    })
}

/// Resolves a negotiation request; without a policy the offer is looked up
/// in the node's catalogue.
fn resolve_request(svc: &NodeService, req: StartNegotiation) -> Result<NegotiationRequest, Response> {
    if let (Some(provider), Some(policy)) = (&req.provider_id, &req.policy) {
        return Ok(NegotiationRequest {
            provider: provider.clone(),
            asset_id: req.asset_id,
            offer_id: req.offer_id,
            policy: policy.clone(),
            content_digest: req.content_digest,
            negotiation_id: req.negotiation_id,
        });
    }
    let matches: Vec<SelfDescription> = svc
        .catalogue
        .visible_descriptions()
        .into_iter()
        .filter(|sd| sd.asset_id() == req.asset_id && req.provider_id.as_ref().is_none_or(|p| p == sd.provider_id()))
        .collect();
    let sd = match matches.as_slice() {
        [one] => one,
        [] => return Err(fail(StatusCode::NOT_FOUND, "unknown-asset", &req.asset_id)),
        _ => return Err(fail(StatusCode::CONFLICT, "ambiguous-asset", "several providers list this asset; name one")),
    };
    if sd.offer(&req.offer_id).is_none() && req.policy.is_none() {
        return Err(fail(StatusCode::NOT_FOUND, "unknown-offer", &req.offer_id));
    }
    let mut r = NegotiationRequest::for_offer(sd, &req.offer_id);
    if let Some(p) = req.policy {
        r.policy = p;
    }
    if req.content_digest.is_some() {
        r.content_digest = req.content_digest;
    }
    r.negotiation_id = req.negotiation_id;
    Ok(r)
}

async fn mgmt_negotiate(State(svc): Svc, body: Bytes) -> Response {
    with_connector(svc, move |svc, c| {
        let req: StartNegotiation = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        let req = match resolve_request(svc, req) {
            Ok(r) => r,
            Err(r) => return r,
        };
        match c.start_negotiation(req) {
            Ok(v) => ok(StatusCode::CREATED, &v),
            Err(e) => connector_error(e),
        }
    })
    .await
}

async fn mgmt_negotiations(State(svc): Svc) -> Response {
    with_connector(svc, |_, c| ok(StatusCode::OK, &c.negotiations())).await
}

async fn mgmt_negotiation(State(svc): Svc, Path(id): Path<String>) -> Response {
    with_connector(svc, move |_, c| match c.negotiation(&id) {
        Some(v) => ok(StatusCode::OK, &v),
        None => fail(StatusCode::NOT_FOUND, "not-found", format!("negotiation {id}")),
    })
    .await
}

async fn mgmt_respond(State(svc): Svc, Path(id): Path<String>, body: Bytes) -> Response {
    with_connector(svc, move |_, c| {
        let req: RespondRequest = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        match c.respond_to_offer(&id, req.accept) {
            Ok(v) => ok(StatusCode::OK, &v),
            Err(e) => connector_error(e),
        }
    })
    .await
}

async fn mgmt_decide(State(svc): Svc, Path(id): Path<String>, body: Bytes) -> Response {
    with_connector(svc, move |_, c| {
        let req: DecisionRequest = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        let decision = match (req.decision.as_str(), req.policy) {
            ("accept", _) => ProviderDecision::Accept,
            ("reject", _) => ProviderDecision::Reject,
            ("counter", Some(p)) => ProviderDecision::Counter(p),
            ("counter", None) => return fail(StatusCode::BAD_REQUEST, "policy-required", "a counter needs a policy"),
            (other, _) => return fail(StatusCode::BAD_REQUEST, "unknown-decision", other),
        };
        match c.decide_pending(&id, decision) {
            Ok(v) => ok(StatusCode::OK, &v),
            Err(e) => connector_error(e),
        }
    })
    .await
}

async fn mgmt_finalize(State(svc): Svc, Path(id): Path<String>) -> Response {
    with_connector(svc, move |_, c| match c.finalize(&id) {
        Ok(a) => ok(StatusCode::OK, &a),
        Err(e) => connector_error(e),
    })
    .await
}

async fn mgmt_agreements(State(svc): Svc) -> Response {
    with_connector(svc, |_, c| ok(StatusCode::OK, &c.agreements())).await
}

async fn mgmt_agreement(State(svc): Svc, Path(id): Path<String>) -> Response {
    with_connector(svc, move |_, c| match c.agreement(&id) {
        Some(a) => ok(StatusCode::OK, &a),
        None => fail(StatusCode::NOT_FOUND, "not-found", format!("agreement {id}")),
    })
    .await
}

async fn mgmt_transfer(State(svc): Svc, body: Bytes) -> Response {
    with_connector(svc, move |_, c| {
        let req: StartTransfer = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        match c.request_transfer(&req.agreement_id, &req.purpose, req.transfer_id) {
            Ok(v) => ok(StatusCode::CREATED, &v),
            Err(e) => connector_error(e),
        }
    })
    .await
}

async fn mgmt_transfers(State(svc): Svc) -> Response {
    with_connector(svc, |_, c| ok(StatusCode::OK, &c.transfers())).await
}

async fn mgmt_transfer_state(State(svc): Svc, Path(id): Path<String>) -> Response {
    with_connector(svc, move |_, c| match c.transfer(&id) {
        Some(v) => ok(StatusCode::OK, &v),
        None => fail(StatusCode::NOT_FOUND, "not-found", format!("transfer {id}")),
    })
    .await
}

async fn mgmt_pull(State(svc): Svc, Path(id): Path<String>) -> Response {
    with_connector(svc, move |_, c| match c.pull_payload(&id) {
        Ok(p) => {
            let mut h = HeaderMap::new();
            h.insert(
                HEADER_PAYLOAD_DIGEST,
                HeaderValue::from_str(p.digest.hex()).expect("hex is a valid header"),
            );
            (StatusCode::OK, h, p.bytes).into_response()
        }
        Err(e) => connector_error(e),
    })
    .await
}

/// Registers in the node's catalogue and, when visible, offers it for negotiation.
async fn mgmt_publish(State(svc): Svc, body: Bytes) -> Response {
    blocking(move || {
        let sd: SelfDescription = match parse_json(&body) {
            Ok(s) => s,
            Err(r) => return r,
        };
        let token = match service_token(&svc, SCOPE_CATALOGUE_WRITE) {
            Ok(t) => t,
            Err(r) => return r,
        };
        match svc.catalogue.register(sd.clone(), &token) {
            Ok(entry) => {
                if entry.is_visible() {
                    if let Some(c) = &svc.connector {
                        c.publish_asset(sd);
                    }
                }
                ok(StatusCode::CREATED, &entry)
            }
            Err(e) => catalogue_error(e),
        }
    })
    .await
}

async fn mgmt_assets(State(svc): Svc) -> Response {
    with_connector(svc, |_, c| ok(StatusCode::OK, &c.assets())).await
}

/// Stores an asset's payload in the federation lake, on the backend its kind
/// maps to. The asset must be published by this node first.
async fn mgmt_upload(State(svc): Svc, Path(id): Path<String>, body: Bytes) -> Response {
    blocking(move || {
        let Some(sd) = svc.catalogue.lookup(&svc.id, &id).map(|e| e.self_description) else {
            return fail(StatusCode::NOT_FOUND, "unknown-asset", format!("{id} is not published by this node"));
        };
        let backend = match place_asset(sd.kind()) {
            Ok(b) => b,
            Err(e) => return lake_error(e),
        };
        let digest = digest_of(&body);
        if let Some(expected) = sd.content_digest() {
            if *expected != digest {
                return fail(
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "digest-mismatch",
                    format!("payload hashes to {digest}, description says {expected}"),
                );
            }
        }
        let token = match service_token(&svc, SCOPE_LAKE_WRITE) {
            Ok(t) => t,
            Err(r) => return r,
        };
        let url = format!("{}/lake/objects/{}", svc.federator_url, digest.hex());
        match agent()
            .put(&url)
            .query("backend", backend.as_str())
            .set("authorization", &format!("Bearer {}", token.to_header_value()))
            .send_bytes(&body)
        {
            Ok(resp) => match resp.into_json::<serde_json::Value>() {
                Ok(v) => ok(StatusCode::CREATED, &v),
                Err(e) => fail(StatusCode::BAD_GATEWAY, "lake-unreachable", e),
            },
            Err(ureq::Error::Status(code, resp)) => {
                let body = resp.into_json::<ErrorBody>().unwrap_or(ErrorBody {
                    error: "lake-error".into(),
                    detail: String::new(),
                });
                fail(StatusCode::from_u16(code).unwrap_or(StatusCode::BAD_GATEWAY), &body.error, body.detail)
            }
            Err(e) => fail(StatusCode::BAD_GATEWAY, "lake-unreachable", e),
        }
    })
    .await
}

async fn mgmt_catalogue(State(svc): Svc, QueryParams(p): QueryParams<SearchParams>) -> Response {
    blocking(move || {
        let q = match to_query(p) {
            Ok(q) => q,
            Err(r) => return r,
        };
        let token = match service_token(&svc, SCOPE_CATALOGUE_READ) {
            Ok(t) => t,
            Err(r) => return r,
        };
        match svc.catalogue.search(&q, &token) {
            Ok(res) => ok(StatusCode::OK, &res),
            Err(e) => catalogue_error(e),
        }
    })
    .await
}

async fn mgmt_federate(State(svc): Svc, body: Bytes) -> Response {
    blocking(move || {
        let req: FederateRequest = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        let token = match service_token(&svc, SCOPE_CATALOGUE_FEDERATE) {
            Ok(t) => t,
            Err(r) => return r,
        };
        match svc.catalogue.federate_from(&HttpPeerCatalogue::new(&req.peer), &token) {
            Ok(rep) => ok(StatusCode::OK, &rep),
            Err(e) => catalogue_error(e),
        }
    })
    .await
}

async fn mgmt_ingest(State(svc): Svc, body: Bytes) -> Response {
    blocking(move || match hub(&svc) {
        Ok(h) => run_ingest(h, &body),
        Err(r) => r,
    })
    .await
}

async fn mgmt_tick(State(svc): Svc) -> Response {
    blocking(move || {
        let resent = svc.connector.as_ref().map(|c| c.tick()).unwrap_or(0);
        ok(StatusCode::OK, &serde_json::json!({ "resent": resent }))
    })
    .await
}

async fn mgmt_status(State(svc): Svc) -> Response {
    blocking(move || {
        let c = svc.connector.as_ref();
        let status = NodeStatus {
            participant_id: svc.id.clone(),
            role: match svc.role {
                crate::topology::NodeRole::Provider => "provider",
                crate::topology::NodeRole::Consumer => "consumer",
                crate::topology::NodeRole::Federator => "federator",
            }
            .to_string(),
            quiescent: c.is_none_or(|c| c.is_quiescent()) && svc.inbox_len() == 0,
            inbox: svc.inbox_len() as u64,
            negotiations: c.map_or(0, |c| c.negotiations().len() as u64),
            transfers: c.map_or(0, |c| c.transfers().len() as u64),
            assets: c.map_or(0, |c| c.assets().len() as u64),
        };
        ok(StatusCode::OK, &status)
    })
    .await
}

#[derive(Deserialize)]
struct NodeTokenRequest {
    scopes: Vec<String>,
}

/// A token for this node's own subject, for operator tools.
async fn mgmt_token(State(svc): Svc, body: Bytes) -> Response {
    blocking(move || {
        let req: NodeTokenRequest = match parse_json(&body) {
            Ok(r) => r,
            Err(r) => return r,
        };
        let scopes: Vec<&str> = req.scopes.iter().map(String::as_str).collect();
        match svc.tokens.token(&scopes) {
            Ok(t) => ok(
                StatusCode::OK,
                &serde_json::json!({ "token": t, "header": format!("Bearer {}", t.to_header_value()) }),
            ),
            Err(e) => fail(StatusCode::BAD_REQUEST, "token-refused", e),
        }
    })
    .await
}
