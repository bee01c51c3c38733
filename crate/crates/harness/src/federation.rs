//! Assembles a federation from a topology: trust anchor and identity
//! service, clearing house, vocabulary hub and data lake on the federator,
//! a catalogue on every node, and a connector on every provider and consumer.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest as _, Sha256};

use dali_core::catalogue::{
    Catalogue, CatalogueEntry, PeerCatalogue, Query, SyncReport, SCOPE_CATALOGUE_FEDERATE, SCOPE_CATALOGUE_READ,
    SCOPE_CATALOGUE_WRITE,
};
use dali_core::clearinghouse::{ClearingClient, ClearingHouse, LocalClearingClient};
use dali_core::connector::{Connector, ConnectorConfig, PayloadSource, Transport};
use dali_core::datalake::{
    place_asset, run_experiment, transform, AssetPublisher, DataLake, DataRequest, DatasetDirectory, Pipeline,
    TestbedAdapter, TestbedProfile, DEFAULT_QUOTA_BYTES,
};
use dali_core::identity::{
    issue_credential, Credential, KeyPair, LocalTokenSource, TokenService, TokenSource, TrustStore,
};
use dali_core::model::{AssetKind, Offer, SelfDescriptionParts, Temperature};
use dali_core::policy::{Action, Constraint, LeftOperand, Operator, Rule, UsagePolicy};
use dali_core::vocabulary::VocabularyHub;
use dali_core::{Clock, Digest, LogicalClock, ParticipantId, SelfDescription};

use crate::eventlog::Recorder;
use crate::sim::SimNet;
use crate::topology::{FederationTopology, NodeRole, NodeSpec};
use crate::HarnessError;

pub const IDENTITY_AUDIENCE: &str = "dali-federation";
pub const CREDENTIAL_TTL_SECS: i64 = 30 * 24 * 3_600;
pub const SERVICE_TOKEN_TTL_SECS: i64 = 3_600;
pub const SEEDED_ASSET_COUNT: usize = 10;
/// Offer id used by every seeded asset.
pub const SEEDED_OFFER: &str = "research";

/// Deterministic key material for a participant (or a federation role).
pub fn derive_keys(seed: u64, label: &str) -> KeyPair {
    let mut h = Sha256::new();
    h.update(b"dali-key");
    h.update(seed.to_be_bytes());
    h.update(label.as_bytes());
    KeyPair::from_seed(h.finalize().into())
}

pub struct NodeHandle {
    pub spec: NodeSpec,
    pub keys: KeyPair,
    pub credential: Credential,
    pub tokens: Arc<dyn TokenSource>,
    pub catalogue: Arc<Catalogue>,
    pub connector: Option<Arc<Connector>>,
}

impl NodeHandle {
    pub fn id(&self) -> &ParticipantId {
        &self.spec.participant_id
    }

    pub fn connector(&self) -> Result<&Arc<Connector>, HarnessError> {
        self.connector
            .as_ref()
            .ok_or_else(|| HarnessError::Domain(format!("{} runs no connector", self.spec.participant_id)))
    }
}

/// How connectors and services reach each other.
pub enum Wiring {
    InProcess(Arc<SimNet>),
    Remote(RemoteWiring),
}

/// Clients used when every node sits behind its own HTTP service.
pub struct RemoteWiring {
    pub endpoints: BTreeMap<ParticipantId, String>,
    pub transport: Arc<dyn Transport>,
    pub clearing: Box<dyn Fn(&ParticipantId, Arc<dyn TokenSource>) -> Arc<dyn ClearingClient>>,
    pub tokens: Box<dyn Fn(&ParticipantId, &KeyPair, &Credential) -> Arc<dyn TokenSource>>,
    pub payloads: Box<dyn Fn(Arc<dyn TokenSource>) -> Arc<dyn PayloadSource>>,
    pub peer: Box<dyn Fn(&str) -> Box<dyn PeerCatalogue>>,
}

#[derive(Debug, Clone)]
pub struct SeededAsset {
    pub description: SelfDescription,
    pub payload_digest: Digest,
    pub size_bytes: u64,
}

pub struct Federation {
    pub topology: FederationTopology,
    pub clock: Arc<dyn Clock>,
    pub logical: Option<LogicalClock>,
    pub trust: Arc<TrustStore>,
    pub anchor_id: ParticipantId,
    anchor_keys: KeyPair,
    pub identity: Arc<TokenService>,
    pub clearing: Arc<ClearingHouse>,
    pub vocabulary: Arc<VocabularyHub>,
    pub lake: Arc<DataLake>,
    pub pipeline: Arc<Pipeline>,
    pub nodes: BTreeMap<ParticipantId, NodeHandle>,
    pub federator: ParticipantId,
    pub sim: Option<Arc<SimNet>>,
    peer: Option<Box<dyn Fn(&str) -> Box<dyn PeerCatalogue>>>,
    pub seeded: Vec<SeededAsset>,
}

struct CatalogueDirectory(Arc<Catalogue>);

impl DatasetDirectory for CatalogueDirectory {
    fn datasets(&self) -> Result<Vec<SelfDescription>, String> {
        Ok(self
            .0
            .visible_descriptions()
            .into_iter()
            .filter(|sd| sd.kind() == AssetKind::Dataset)
            .collect())
    }
}

/// Registers ingested datasets in the provider's own catalogue and makes
/// them negotiable at its connector.
struct ProviderPublisher {
    catalogue: Arc<Catalogue>,
    connector: Arc<Connector>,
    tokens: Arc<dyn TokenSource>,
}

impl AssetPublisher for ProviderPublisher {
    fn publish(&self, sd: SelfDescription) -> Result<(), String> {
        let token = self.tokens.token(&[SCOPE_CATALOGUE_WRITE]).map_err(|e| e.to_string())?;
        self.catalogue.register(sd.clone(), &token).map_err(|e| e.to_string())?;
        self.connector.publish_asset(sd);
        Ok(())
    }
}

impl Federation {
    /// In-process federation on a seeded simulated network.
    pub fn in_process(topology: &FederationTopology, recorder: Arc<Mutex<Recorder>>) -> Result<Self, HarnessError> {
        let clock = LogicalClock::default();
        let sim = Arc::new(SimNet::new(recorder, topology.faults.clone(), clock.clone()));
        Self::assemble(
            topology,
            Arc::new(clock.clone()),
            Some(clock),
            Wiring::InProcess(sim),
            None,
            ConnectorConfig::default(),
        )
    }

    pub fn assemble(
        topology: &FederationTopology,
        clock: Arc<dyn Clock>,
        logical: Option<LogicalClock>,
        wiring: Wiring,
        state_dir: Option<&Path>,
        config: ConnectorConfig,
    ) -> Result<Self, HarnessError> {
        topology.check()?;
        let seed = topology.seed;
        let federator = topology.federator().participant_id.clone();
        let trust = Arc::new(TrustStore::new());
        let anchor_id = federator.clone();
        let anchor_keys = derive_keys(seed, "trust-anchor");
        trust.register_anchor(anchor_id.clone(), anchor_keys.public_key());
        let identity = Arc::new(TokenService::new(
            IDENTITY_AUDIENCE,
            derive_keys(seed, "identity-service"),
            trust.clone(),
            clock.clone(),
        ));
        let clearing = Arc::new(match state_dir {
            Some(dir) => ClearingHouse::open(&dir.join("clearing"), identity.verifier(), clock.clone())
                .map_err(|e| HarnessError::Io(e.to_string()))?,
            None => ClearingHouse::in_memory(identity.verifier(), clock.clone()),
        });
        let vocabulary = Arc::new(VocabularyHub::with_builtins(identity.verifier()));
        let lake = Arc::new(match state_dir {
            Some(dir) => DataLake::open(&dir.join("lake"), DEFAULT_QUOTA_BYTES).map_err(|e| HarnessError::Io(e.to_string()))?,
            None => DataLake::in_memory(),
        });

        let (sim, remote) = match wiring {
            Wiring::InProcess(s) => (Some(s), None),
            Wiring::Remote(r) => (None, Some(r)),
        };

        let mut nodes = BTreeMap::new();
        for spec in &topology.nodes {
            let id = spec.participant_id.clone();
            let keys = derive_keys(seed, id.as_str());
            trust.register_participant(id.clone(), keys.public_key());
            let claims: BTreeMap<String, String> = [(
                "role".to_string(),
                match spec.role {
                    NodeRole::Provider => "provider",
                    NodeRole::Consumer => "consumer",
                    NodeRole::Federator => "federator",
                }
                .to_string(),
            )]
            .into();
            let credential = issue_credential(
                &trust,
                &anchor_id,
                &anchor_keys,
                id.clone(),
                claims,
                CREDENTIAL_TTL_SECS,
                clock.now(),
            )
            .map_err(|e| HarnessError::Domain(e.to_string()))?;
            let tokens: Arc<dyn TokenSource> = match &remote {
                Some(r) => (r.tokens)(&id, &keys, &credential),
                None => Arc::new(LocalTokenSource::new(
                    identity.clone(),
                    credential.clone(),
                    SERVICE_TOKEN_TTL_SECS,
                )),
            };
            let endpoint = match &remote {
                Some(r) => r.endpoints.get(&id).cloned().unwrap_or_default(),
                None => format!("inproc://{}", id.file_stem()),
            };
            let catalogue = Arc::new(Catalogue::new(
                endpoint,
                vocabulary.clone(),
                identity.verifier(),
                clock.clone(),
            ));
            let connector = if spec.role == NodeRole::Federator {
                None
            } else {
                let (clearing_client, payloads): (Arc<dyn ClearingClient>, Arc<dyn PayloadSource>) = match &remote {
                    Some(r) => ((r.clearing)(&id, tokens.clone()), (r.payloads)(tokens.clone())),
                    None => (
                        Arc::new(LocalClearingClient::new(clearing.clone(), id.clone(), tokens.clone())),
                        lake.clone(),
                    ),
                };
                let c = Arc::new(Connector::new(
                    id.clone(),
                    keys.clone(),
                    credential.clone(),
                    trust.clone(),
                    clock.clone(),
                    clearing_client,
                    Some(payloads),
                    config.clone(),
                ));
                match (&sim, &remote) {
                    (Some(s), _) => {
                        c.attach_transport(s.clone());
                        s.register(c.clone());
                    }
                    (None, Some(r)) => c.attach_transport(r.transport.clone()),
                    (None, None) => unreachable!("wiring is one of the two"),
                }
                Some(c)
            };
            nodes.insert(
                id,
                NodeHandle {
                    spec: spec.clone(),
                    keys,
                    credential,
                    tokens,
                    catalogue,
                    connector,
                },
            );
        }

        let directory = Arc::new(CatalogueDirectory(nodes[&federator].catalogue.clone()));
        let adapters = topology
            .providers()
            .filter_map(|spec| {
                let node = &nodes[&spec.participant_id];
                let profile = spec.testbed_profile.clone()?;
                Some(TestbedAdapter {
                    provider: spec.participant_id.clone(),
                    profile,
                    publisher: Arc::new(ProviderPublisher {
                        catalogue: node.catalogue.clone(),
                        connector: node.connector.clone().expect("providers run connectors"),
                        tokens: node.tokens.clone(),
                    }),
                })
            })
            .collect();
        let pipeline = Arc::new(Pipeline::new(lake.clone(), directory, adapters));

        Ok(Federation {
            topology: topology.clone(),
            clock,
            logical,
            trust,
            anchor_id,
            anchor_keys,
            identity,
            clearing,
            vocabulary,
            lake,
            pipeline,
            nodes,
            federator,
            sim,
            peer: remote.map(|r| r.peer),
            seeded: Vec::new(),
        })
    }

    pub fn node(&self, id: &ParticipantId) -> Result<&NodeHandle, HarnessError> {
        self.nodes
            .get(id)
            .ok_or_else(|| HarnessError::Domain(format!("unknown node {id}")))
    }

    pub fn federator_node(&self) -> &NodeHandle {
        &self.nodes[&self.federator]
    }

    pub fn providers(&self) -> Vec<&NodeHandle> {
        self.nodes.values().filter(|n| n.spec.role == NodeRole::Provider).collect()
    }

    pub fn consumers(&self) -> Vec<&NodeHandle> {
        self.nodes.values().filter(|n| n.spec.role == NodeRole::Consumer).collect()
    }

    pub fn connectors(&self) -> Vec<Arc<Connector>> {
        self.nodes.values().filter_map(|n| n.connector.clone()).collect()
    }

    /// Issues a fresh credential (e.g. for an onboarding participant).
    pub fn issue_credential(&self, subject: ParticipantId) -> Result<Credential, HarnessError> {
        issue_credential(
            &self.trust,
            &self.anchor_id,
            &self.anchor_keys,
            subject,
            BTreeMap::new(),
            CREDENTIAL_TTL_SECS,
            self.clock.now(),
        )
        .map_err(|e| HarnessError::Domain(e.to_string()))
    }

    /// Stores the payload (if any), registers the description in the
    /// provider's catalogue and offers it at the provider's connector.
    pub fn publish(&self, sd: SelfDescription, payload: Option<&[u8]>) -> Result<CatalogueEntry, HarnessError> {
        let node = self.node(sd.provider_id())?;
        if node.spec.role != NodeRole::Provider {
            return Err(HarnessError::Domain(format!("{} is not a provider", sd.provider_id())));
        }
        if let Some(bytes) = payload {
            let backend = place_asset(sd.kind()).map_err(|e| HarnessError::Domain(e.to_string()))?;
            let stored = self
                .lake
                .store()
                .put_object(bytes, backend)
                .map_err(|e| HarnessError::Domain(e.to_string()))?;
            if sd.content_digest() != Some(&stored.digest) {
                return Err(HarnessError::Domain(format!(
                    "payload digest {} does not match contentDigest of {}",
                    stored.digest.hex(),
                    sd.asset_id()
                )));
            }
        }
        let token = node
            .tokens
            .token(&[SCOPE_CATALOGUE_WRITE])
            .map_err(|e| HarnessError::Domain(e.to_string()))?;
        let entry = node
            .catalogue
            .register(sd.clone(), &token)
            .map_err(|e| HarnessError::Domain(e.to_string()))?;
        if entry.is_visible() {
            node.connector()?.publish_asset(sd);
        }
        Ok(entry)
    }

    /// `node` pulls from the catalogue at `peer`.
    pub fn federate(&self, node: &ParticipantId, peer: &ParticipantId) -> Result<SyncReport, HarnessError> {
        let n = self.node(node)?;
        let token = n
            .tokens
            .token(&[SCOPE_CATALOGUE_FEDERATE, SCOPE_CATALOGUE_READ])
            .map_err(|e| HarnessError::Domain(e.to_string()))?;
        let p = self.node(peer)?;
        let report = match &self.peer {
            Some(make) => n.catalogue.federate_from(make(p.catalogue.endpoint()).as_ref(), &token),
            None => n.catalogue.federate_from(p.catalogue.as_ref(), &token),
        };
        report.map_err(|e| HarnessError::Domain(e.to_string()))
    }

    /// Federator pulls from every provider, then every consumer pulls from
    /// the federator.
    pub fn sync_catalogues(&self) -> Result<(), HarnessError> {
        let providers: Vec<ParticipantId> = self.providers().iter().map(|n| n.id().clone()).collect();
        for p in &providers {
            self.federate(&self.federator, p)?;
        }
        let consumers: Vec<ParticipantId> = self.consumers().iter().map(|n| n.id().clone()).collect();
        for c in &consumers {
            self.federate(c, &self.federator)?;
        }
        Ok(())
    }

    /// Catalogue search on `node` with its own read token.
    pub fn search(&self, node: &ParticipantId, q: &Query) -> Result<Vec<CatalogueEntry>, HarnessError> {
        let n = self.node(node)?;
        let token = n
            .tokens
            .token(&[SCOPE_CATALOGUE_READ])
            .map_err(|e| HarnessError::Domain(e.to_string()))?;
        n.catalogue
            .search(q, &token)
            .map(|r| r.entries)
            .map_err(|e| HarnessError::Domain(e.to_string()))
    }

    /// Publishes the ten demo assets, spread round-robin over the providers.
    pub fn seed_assets(&mut self) -> Result<(), HarnessError> {
        let providers: Vec<NodeSpec> = self.topology.providers().cloned().collect();
        if providers.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.topology.seed);
        let created = self.clock.now();
        let mut seeded = Vec::new();
        for (i, template) in TEMPLATES.iter().enumerate().take(SEEDED_ASSET_COUNT) {
            let provider = &providers[i % providers.len()];
            let origin = provider
                .testbed_profile
                .as_ref()
                .map(|p| p.testbed_id.clone())
                .unwrap_or_else(|| provider.participant_id.org().to_string());
            let (payload, mut metadata) = template.materialize(&origin, self.topology.seed + i as u64, &mut rng);
            metadata.insert("description".into(), template.title.to_string());
            let asset_id = format!("{}-{}", origin, template.slug);
            let digest = dali_core::model::digest_of(&payload);
            let sd = SelfDescription::new(SelfDescriptionParts {
                asset_id: asset_id.clone(),
                provider_id: provider.participant_id.clone(),
                kind: template.kind,
                title: format!("{} ({})", template.title, origin.to_uppercase()),
                metadata,
                offers: vec![Offer {
                    offer_id: SEEDED_OFFER.into(),
                    policy: seeded_policy(template.kind),
                    license_tag: "research-only".into(),
                }],
                content_digest: Some(digest.clone()),
                temperature: Temperature::Cold,
                created_at: created,
            })
            .map_err(|e| HarnessError::Domain(e.to_string()))?;
            if template.kind == AssetKind::Dataset {
                self.lake
                    .store_cold_dataset(&asset_id, &provider.participant_id, &payload)
                    .map_err(|e| HarnessError::Domain(e.to_string()))?;
            }
            self.publish(sd.clone(), Some(&payload))?;
            seeded.push(SeededAsset {
                description: sd,
                payload_digest: digest,
                size_bytes: payload.len() as u64,
            });
        }
        self.seeded = seeded;
        Ok(())
    }
}

/// Offer attached to the demo assets: research use and at most two pulls.
pub fn seeded_policy(kind: AssetKind) -> UsagePolicy {
    let purpose = || Constraint::new(LeftOperand::Purpose, Operator::Eq, "research");
    let mut transfer = vec![purpose()];
    if kind == AssetKind::Dataset {
        transfer.push(Constraint::new(LeftOperand::UseCount, Operator::Lt, 2));
    }
    UsagePolicy {
        permissions: vec![Rule::with(Action::Use, vec![purpose()]), Rule::with(Action::Transfer, transfer)],
        prohibitions: vec![Rule::unconditional(Action::ReShare)],
    }
}

struct Template {
    slug: &'static str,
    title: &'static str,
    kind: AssetKind,
    /// Dataset capabilities, or the fixed metadata of other kinds.
    caps: &'static [&'static str],
    meta: &'static [(&'static str, &'static str)],
    /// Rows for datasets, bytes otherwise.
    size: u32,
}

const TEMPLATES: [Template; SEEDED_ASSET_COUNT] = [
    Template {
        slug: "beam-sweep",
        title: "mmWave beam sweep measurements",
        kind: AssetKind::Dataset,
        caps: &["mmWave", "mobility"],
        meta: &[],
        size: 26_000,
    },
    Template {
        slug: "beam-predictor",
        title: "Beam prediction model",
        kind: AssetKind::MlModel,
        caps: &[],
        meta: &[("task", "beam-prediction"), ("input-schema", "Beam-RSRP-dBm,UE-Speed-kmh"), ("framework", "onnx")],
        size: 180_000,
    },
    Template {
        slug: "energy-traces",
        title: "Base station energy traces",
        kind: AssetKind::Dataset,
        caps: &["sub-6", "energy"],
        meta: &[],
        size: 2_000,
    },
    Template {
        slug: "mac-scheduler",
        title: "MAC scheduler policy model",
        kind: AssetKind::RanModel,
        caps: &[],
        meta: &[("ran-layer", "mac"), ("framework", "pytorch")],
        size: 96_000,
    },
    Template {
        slug: "mimo-channel",
        title: "Massive MIMO channel snapshots",
        kind: AssetKind::Dataset,
        caps: &["mmWave", "massive-mimo"],
        meta: &[],
        size: 4_000,
    },
    Template {
        slug: "traffic-forecaster",
        title: "Cell traffic forecaster",
        kind: AssetKind::MlModel,
        caps: &[],
        meta: &[("task", "traffic-forecasting"), ("input-schema", "Slice-Throughput-Mbps")],
        size: 64_000,
    },
    Template {
        slug: "drive-test",
        title: "Urban drive test",
        kind: AssetKind::Dataset,
        caps: &["sub-6", "mobility", "urban-macro"],
        meta: &[],
        size: 3_000,
    },
    Template {
        slug: "slice-orchestrator",
        title: "Slice orchestrator configuration",
        kind: AssetKind::Application,
        caps: &[],
        meta: &[("version", "1.2.0")],
        size: 12_000,
    },
    Template {
        slug: "channel-estimator",
        title: "PHY channel estimator",
        kind: AssetKind::RanModel,
        caps: &[],
        meta: &[("ran-layer", "phy")],
        size: 150_000,
    },
    Template {
        slug: "slicing-kpis",
        title: "RAN slicing KPIs",
        kind: AssetKind::Dataset,
        caps: &["sub-6", "ran-slicing"],
        meta: &[],
        size: 1_500,
    },
];

impl Template {
    fn materialize(&self, origin: &str, seed: u64, rng: &mut ChaCha8Rng) -> (Vec<u8>, BTreeMap<String, String>) {
        let mut metadata: BTreeMap<String, String> =
            self.meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if self.kind != AssetKind::Dataset {
            let mut bytes = vec![0u8; self.size as usize];
            rng.fill(&mut bytes[..]);
            return (bytes, metadata);
        }
        let profile = TestbedProfile::new(origin, self.caps, 1.0).expect("static capabilities");
        let req = DataRequest::new(self.caps, self.size, "research");
        let raw = run_experiment(&profile, &req, seed);
        let clean = transform(&raw.payload).expect("generated telemetry parses");
        let band = if self.caps.contains(&"mmWave") { "mmWave" } else { "sub-6" };
        metadata.insert("frequency-band".into(), band.into());
        metadata.insert("testbed-origin".into(), origin.into());
        metadata.insert("sample-count".into(), clean.row_count.to_string());
        metadata.insert("capabilities".into(), self.caps.join(","));
        (clean.payload, metadata)
    }
}
