//! HTTP deployment: one axum service per node on loopback, blocking
//! clients that plug the federation's traits into those services, and the
//! scenario driver that runs over them.

pub mod client;
pub mod server;

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use dali_core::catalogue::{CatalogueEntry, Catalogue, Query};
use dali_core::clearinghouse::ClearingHouse;
use dali_core::connector::{Connector, ConnectorConfig, Envelope, NegotiationRequest, NegotiationState, TransferState};
use dali_core::datalake::{DataLake, DataRequest, IngestOutcome, Pipeline};
use dali_core::identity::{signing_payload, Credential, KeyPair, SignatureBytes, TokenService, TokenSource, TrustStore};
use dali_core::vocabulary::VocabularyHub;
use dali_core::{Clock, Digest, LogicalClock, ParticipantId, SelfDescription, Timestamp};

use crate::eventlog::{Chooser, LogEvent, Recorder};
use crate::federation::{Federation, RemoteWiring, Wiring, SERVICE_TOKEN_TTL_SECS};
use crate::scenario::{header, play, Driver, Ops, ScenarioRun};
use crate::sim::Script;
use crate::topology::{FederationTopology, NodeRole};
use crate::HarnessError;

use client::{
    HttpClearingClient, HttpPayloadSource, HttpPeerCatalogue, HttpTokenSource, HttpTransport, MgmtClient,
    StartNegotiation, StartTransfer,
};

pub const SCOPE_LAKE_READ: &str = "lake:read";
pub const SCOPE_LAKE_WRITE: &str = "lake:write";
pub const SCOPE_LAKE_INGEST: &str = "lake:ingest";

pub const HEADER_TRANSFER_TOKEN: &str = "x-dali-transfer-token";
pub const HEADER_CHUNK_INDEX: &str = "x-dali-chunk-index";
pub const HEADER_CHUNK_TOTAL: &str = "x-dali-chunk-total";
pub const HEADER_TOTAL_SIZE: &str = "x-dali-total-size";
pub const HEADER_PAYLOAD_DIGEST: &str = "x-dali-payload-digest";

/// Allowed distance between a token request's timestamp and the service clock.
pub const PROOF_WINDOW_SECS: i64 = 300;
/// Request bodies up to this size are accepted (payload uploads).
pub const MAX_BODY_BYTES: usize = 64 * 1024 * 1024;

const SETTLE_TIMEOUT: Duration = Duration::from_secs(60);
const IDLE_TICK_EVERY: Duration = Duration::from_millis(250);

/// Body of `POST /identity/tokens`. `proof` is the participant's signature
/// over the canonical JSON of `{requestedAt, scopes, subject, ttlSecs}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TokenRequest {
    pub credential: Credential,
    pub scopes: Vec<String>,
    pub ttl_secs: i64,
    pub requested_at: Timestamp,
    pub proof: SignatureBytes,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ProofBody<'a> {
    subject: &'a ParticipantId,
    scopes: &'a [String],
    ttl_secs: i64,
    requested_at: Timestamp,
}

impl TokenRequest {
    pub fn signed(keys: &KeyPair, credential: Credential, scopes: Vec<String>, ttl_secs: i64, now: Timestamp) -> Self {
        let proof = keys.sign(&Self::proof_bytes(&credential.subject, &scopes, ttl_secs, now));
        TokenRequest {
            credential,
            scopes,
            ttl_secs,
            requested_at: now,
            proof,
        }
    }

    pub fn proof_bytes(subject: &ParticipantId, scopes: &[String], ttl_secs: i64, requested_at: Timestamp) -> Vec<u8> {
        signing_payload(&ProofBody {
            subject,
            scopes,
            ttl_secs,
            requested_at,
        })
        .expect("proof body serializes")
    }
}

/// Services that only the federator runs.
pub struct Hub {
    pub identity: Arc<TokenService>,
    pub trust: Arc<TrustStore>,
    pub clearing: Arc<ClearingHouse>,
    pub vocabulary: Arc<VocabularyHub>,
    pub lake: Arc<DataLake>,
    pub pipeline: Arc<Pipeline>,
}

/// Everything one node's HTTP service needs.
pub struct NodeService {
    pub id: ParticipantId,
    pub role: NodeRole,
    pub url: String,
    pub federator_url: String,
    pub connector: Option<Arc<Connector>>,
    pub catalogue: Arc<Catalogue>,
    pub tokens: Arc<dyn TokenSource>,
    pub hub: Option<Hub>,
    pub clock: Arc<dyn Clock>,
    inbox: Mutex<Option<mpsc::Sender<Envelope>>>,
    pending: AtomicUsize,
}

impl NodeService {
    /// Queues an inbound protocol message for the node's worker.
    pub fn enqueue(&self, env: Envelope) -> bool {
        let guard = self.inbox.lock().expect("inbox lock");
        let Some(tx) = guard.as_ref() else { return false };
        self.pending.fetch_add(1, Ordering::SeqCst);
        if tx.send(env).is_err() {
            self.pending.fetch_sub(1, Ordering::SeqCst);
            return false;
        }
        true
    }

    /// Messages received but not yet handled.
    pub fn inbox_len(&self) -> usize {
        self.pending.load(Ordering::SeqCst)
    }

    fn close_inbox(&self) {
        self.inbox.lock().expect("inbox lock").take();
    }
}

/// A running set of node services on loopback.
pub struct HttpCluster {
    pub endpoints: BTreeMap<ParticipantId, String>,
    pub federator_url: String,
    services: Vec<Arc<NodeService>>,
    workers: Vec<JoinHandle<()>>,
    shutdown: Vec<tokio::sync::oneshot::Sender<()>>,
    runtime: Option<tokio::runtime::Runtime>,
}

impl HttpCluster {
    /// Binds one listener per node (ports `base_port + i`, or ephemeral),
    /// assembles the federation over HTTP clients and starts the services.
    pub fn start(
        topology: &FederationTopology,
        clock: Arc<dyn Clock>,
        logical: Option<LogicalClock>,
        state_dir: Option<&Path>,
        base_port: Option<u16>,
    ) -> Result<(Federation, HttpCluster), HarnessError> {
        topology.check()?;
        let mut listeners = Vec::new();
        let mut endpoints = BTreeMap::new();
        for (i, spec) in topology.nodes.iter().enumerate() {
            let port = match base_port {
                Some(b) => b
                    .checked_add(i as u16)
                    .ok_or_else(|| HarnessError::Io("port range overflows".into()))?,
                None => 0,
            };
            let l = TcpListener::bind(("127.0.0.1", port))?;
            l.set_nonblocking(true)?;
            let url = format!("http://{}", l.local_addr()?);
            endpoints.insert(spec.participant_id.clone(), url);
            listeners.push((spec.participant_id.clone(), l));
        }
        let federator_url = endpoints[&topology.federator().participant_id].clone();

        let wiring = {
            let fed_url = federator_url.clone();
            let token_url = federator_url.clone();
            let payload_url = federator_url.clone();
            let token_clock = clock.clone();
            RemoteWiring {
                endpoints: endpoints.clone(),
                transport: Arc::new(HttpTransport::new(endpoints.clone())),
                clearing: Box::new(move |_, tokens| Arc::new(HttpClearingClient::new(&fed_url, tokens))),
                tokens: Box::new(move |_, keys, cred| {
                    Arc::new(HttpTokenSource::new(
                        &token_url,
                        keys.clone(),
                        cred.clone(),
                        token_clock.clone(),
                        SERVICE_TOKEN_TTL_SECS,
                    ))
                }),
                payloads: Box::new(move |tokens| Arc::new(HttpPayloadSource::new(&payload_url, tokens))),
                peer: Box::new(|url| Box::new(HttpPeerCatalogue::new(url))),
            }
        };
        let fed = Federation::assemble(
            topology,
            clock.clone(),
            logical,
            Wiring::Remote(wiring),
            state_dir,
            ConnectorConfig::default(),
        )?;

        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let mut cluster = HttpCluster {
            endpoints: endpoints.clone(),
            federator_url: federator_url.clone(),
            services: Vec::new(),
            workers: Vec::new(),
            shutdown: Vec::new(),
            runtime: None,
        };
        for (id, listener) in listeners {
            let node = fed.node(&id)?;
            let (tx, rx) = mpsc::channel::<Envelope>();
            let hub = (node.spec.role == NodeRole::Federator).then(|| Hub {
                identity: fed.identity.clone(),
                trust: fed.trust.clone(),
                clearing: fed.clearing.clone(),
                vocabulary: fed.vocabulary.clone(),
                lake: fed.lake.clone(),
                pipeline: fed.pipeline.clone(),
            });
            let svc = Arc::new(NodeService {
                id: id.clone(),
                role: node.spec.role,
                url: endpoints[&id].clone(),
                federator_url: federator_url.clone(),
                connector: node.connector.clone(),
                catalogue: node.catalogue.clone(),
                tokens: node.tokens.clone(),
                hub,
                clock: clock.clone(),
                inbox: Mutex::new(Some(tx)),
                pending: AtomicUsize::new(0),
            });
            let worker_svc = svc.clone();
            cluster.workers.push(std::thread::spawn(move || {
                while let Ok(env) = rx.recv() {
                    if let Some(c) = &worker_svc.connector {
                        let _ = c.handle(&env);
                    }
                    worker_svc.pending.fetch_sub(1, Ordering::SeqCst);
                }
            }));
            let (stop_tx, stop_rx) = tokio::sync::oneshot::channel::<()>();
            cluster.shutdown.push(stop_tx);
            let router = server::router(svc.clone());
            runtime.spawn(async move {
                let Ok(l) = tokio::net::TcpListener::from_std(listener) else { return };
                let _ = axum::serve(l, router)
                    .with_graceful_shutdown(async {
                        let _ = stop_rx.await;
                    })
                    .await;
            });
            cluster.services.push(svc);
        }
        cluster.runtime = Some(runtime);
        Ok((fed, cluster))
    }

    pub fn url(&self, id: &ParticipantId) -> Result<&str, HarnessError> {
        self.endpoints
            .get(id)
            .map(String::as_str)
            .ok_or_else(|| HarnessError::Domain(format!("unknown node {id}")))
    }

    pub fn mgmt(&self, id: &ParticipantId) -> Result<MgmtClient, HarnessError> {
        Ok(MgmtClient::new(self.url(id)?))
    }

    /// No node has an unhandled inbound message.
    pub fn inboxes_empty(&self) -> bool {
        self.services.iter().all(|s| s.inbox_len() == 0)
    }

    pub fn tick(&self) -> usize {
        self.services.iter().filter_map(|s| s.connector.as_ref()).map(|c| c.tick()).sum()
    }

    pub fn is_settled(&self) -> bool {
        self.inboxes_empty()
            && self
                .services
                .iter()
                .filter_map(|s| s.connector.as_ref())
                .all(|c| c.is_quiescent())
    }
}

impl Drop for HttpCluster {
    fn drop(&mut self) {
        for s in self.shutdown.drain(..) {
            let _ = s.send(());
        }
        for s in &self.services {
            s.close_inbox();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_timeout(Duration::from_secs(2));
        }
    }
}

/// Scenario operations through the nodes' management API.
pub struct HttpOps<'a> {
    pub cluster: &'a HttpCluster,
}

impl HttpOps<'_> {
    fn client(&self, id: &ParticipantId) -> Result<MgmtClient, String> {
        self.cluster.mgmt(id).map_err(|e| e.to_string())
    }
}

impl Ops for HttpOps<'_> {
    fn negotiate(
        &self,
        consumer: &ParticipantId,
        sd: &SelfDescription,
        offer_id: &str,
    ) -> Result<NegotiationState, String> {
        let r = NegotiationRequest::for_offer(sd, offer_id);
        self.client(consumer)?
            .start_negotiation(&StartNegotiation {
                provider_id: Some(r.provider),
                asset_id: r.asset_id,
                offer_id: r.offer_id,
                policy: Some(r.policy),
                content_digest: r.content_digest,
                negotiation_id: None,
            })
            .map_err(|e| e.to_string())
    }

    fn negotiation(&self, consumer: &ParticipantId, id: &str) -> Option<NegotiationState> {
        self.client(consumer).ok()?.negotiation(id).ok()
    }

    fn respond(&self, consumer: &ParticipantId, id: &str, accept: bool) -> Result<NegotiationState, String> {
        self.client(consumer)?.respond(id, accept).map_err(|e| e.to_string())
    }

    fn transfer(&self, consumer: &ParticipantId, agreement_id: &str, purpose: &str) -> Result<TransferState, String> {
        self.client(consumer)?
            .start_transfer(&StartTransfer {
                agreement_id: agreement_id.to_string(),
                purpose: purpose.to_string(),
                transfer_id: None,
            })
            .map_err(|e| e.to_string())
    }

    fn transfer_state(&self, consumer: &ParticipantId, id: &str) -> Option<TransferState> {
        self.client(consumer).ok()?.transfer(id).ok()
    }

    fn pull(&self, consumer: &ParticipantId, id: &str) -> Result<Digest, String> {
        self.client(consumer)?.pull(id).map(|(_, d)| d).map_err(|e| e.to_string())
    }

    fn search(&self, node: &ParticipantId, q: &Query) -> Result<Vec<CatalogueEntry>, String> {
        self.client(node)?.search(q).map(|r| r.entries).map_err(|e| e.to_string())
    }

    fn ingest(&self, req: &DataRequest, seed: u64) -> Result<IngestOutcome, String> {
        MgmtClient::new(&self.cluster.federator_url)
            .ingest(req, seed)
            .map_err(|e| e.to_string())
    }
}

/// Runs scripts against a live cluster: performs the first enabled
/// operation, otherwise waits for inboxes to drain and connectors to settle.
pub struct HttpDriver<'a> {
    pub ops: HttpOps<'a>,
    pub recorder: Arc<Mutex<Recorder>>,
}

impl Driver for HttpDriver<'_> {
    fn ops(&self) -> &dyn Ops {
        &self.ops
    }

    fn settle(&self, script: &mut dyn Script) -> Result<(), HarnessError> {
        let started = Instant::now();
        let mut last_progress = Instant::now();
        loop {
            if started.elapsed() > SETTLE_TIMEOUT {
                return Err(HarnessError::Diverged(format!(
                    "no quiescence within {}s",
                    SETTLE_TIMEOUT.as_secs()
                )));
            }
            if let Some(label) = script.enabled().into_iter().next() {
                let outcome = script.perform(&label);
                self.recorder.lock().expect("recorder lock").push(&LogEvent::Op {
                    node: String::new(),
                    op: label,
                    target: String::new(),
                    outcome,
                });
                last_progress = Instant::now();
                continue;
            }
            if self.ops.cluster.is_settled() {
                return Ok(());
            }
            if last_progress.elapsed() > IDLE_TICK_EVERY && self.ops.cluster.inboxes_empty() {
                self.ops.cluster.tick();
                last_progress = Instant::now();
            }
            std::thread::sleep(Duration::from_millis(2));
        }
    }

    fn note(&self, text: String) {
        self.recorder.lock().expect("recorder lock").push(&LogEvent::Note { text });
    }
}

/// Runs a scenario with one HTTP service per node on loopback. Fault rules
/// apply to the simulated network only and are ignored here.
pub fn run_scenario_http(topology: &FederationTopology, name: &str) -> Result<ScenarioRun, HarnessError> {
    let recorder = Arc::new(Mutex::new(Recorder::new(Chooser::seeded(topology.seed))));
    recorder.lock().expect("recorder lock").push(&header(topology, name, None));
    if !topology.faults.is_empty() {
        recorder.lock().expect("recorder lock").push(&LogEvent::Note {
            text: format!("{} fault rules ignored over http", topology.faults.len()),
        });
    }
    let clock = LogicalClock::default();
    let (mut fed, cluster) = HttpCluster::start(topology, Arc::new(clock.clone()), Some(clock), None, None)?;
    fed.seed_assets()?;
    let driver = HttpDriver {
        ops: HttpOps { cluster: &cluster },
        recorder: recorder.clone(),
    };
    driver.settle(&mut crate::sim::Idle)?;
    let result = play(name, &fed, &driver)?;
    drop(cluster);
    let mut rec = recorder.lock().expect("recorder lock");
    rec.push(&LogEvent::End { result: result.clone() });
    Ok(ScenarioRun {
        result,
        log: rec.to_bytes(),
    })
}
