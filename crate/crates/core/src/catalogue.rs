//! Federated catalogue of self-descriptions.
//!
//! Each node's catalogue is authoritative for the assets registered there by
//! their providers. Other nodes learn about them by pulling
//! ([`Catalogue::federate_from`]); copies never override the origin's version.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::identity::{AccessToken, InvalidReason, TokenVerifier};
use crate::model::{AssetKind, ParticipantId, SelfDescription, Timestamp};
use crate::vocabulary::{Violation, VocabularyHub};

pub const SCOPE_CATALOGUE_READ: &str = "catalogue:read";
pub const SCOPE_CATALOGUE_WRITE: &str = "catalogue:write";
pub const SCOPE_CATALOGUE_FEDERATE: &str = "catalogue:federate";
pub const SCOPE_CATALOGUE_ADMIN: &str = "catalogue:admin";

pub const MAX_QUERY_LIMIT: u32 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CatalogueError {
    #[error("token rejected: {0}")]
    ScopeDenied(InvalidReason),
    #[error("token subject {subject} may not register assets of {provider}")]
    SubjectMismatch { subject: ParticipantId, provider: ParticipantId },
    #[error("invalid query: {0}")]
    InvalidQuery(String),
    #[error("peer catalogue {peer} unreachable: {reason}")]
    PeerUnreachable { peer: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CatalogueEntry {
    pub self_description: SelfDescription,
    pub registered_at: Timestamp,
    /// Catalogue the entry was obtained from (this node for local registrations).
    pub source_connector: String,
    pub validation_report: Vec<Violation>,
    /// Catalogue where the provider registered the entry.
    pub origin_connector: String,
    /// Registration counter at the origin; grows with every re-registration.
    pub revision: u64,
}

impl CatalogueEntry {
    pub fn is_visible(&self) -> bool {
        self.validation_report.is_empty()
    }

    fn key(&self) -> EntryKey {
        (
            self.self_description.provider_id().clone(),
            self.self_description.asset_id().to_string(),
        )
    }
}

type EntryKey = (ParticipantId, String);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Query {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<AssetKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<ParticipantId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default)]
    pub metadata_filters: Vec<(String, String)>,
    pub limit: u32,
    #[serde(default)]
    pub offset: u32,
}

impl Default for Query {
    fn default() -> Self {
        Query {
            kind: None,
            provider: None,
            text: None,
            metadata_filters: Vec::new(),
            limit: 100,
            offset: 0,
        }
    }
}

impl Query {
    pub fn all() -> Self {
        Query {
            limit: MAX_QUERY_LIMIT,
            ..Default::default()
        }
    }

    pub fn matches(&self, sd: &SelfDescription) -> bool {
        if self.kind.is_some_and(|k| k != sd.kind()) {
            return false;
        }
        if self.provider.as_ref().is_some_and(|p| p != sd.provider_id()) {
            return false;
        }
        if let Some(text) = &self.text {
            if !sd.title().to_lowercase().contains(&text.to_lowercase()) {
                return false;
            }
        }
        self.metadata_filters
            .iter()
            .all(|(k, v)| sd.metadata().get(k) == Some(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SearchResult {
    pub entries: Vec<CatalogueEntry>,
    pub total_count: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyncReport {
    pub added: u32,
    pub updated: u32,
    pub removed: u32,
}

impl SyncReport {
    pub fn is_quiet(&self) -> bool {
        self.added == 0 && self.updated == 0 && self.removed == 0
    }
}

/// Something federation can pull entries from.
pub trait PeerCatalogue: Send + Sync {
    fn endpoint(&self) -> String;
    fn search(&self, q: &Query, token: &AccessToken) -> Result<SearchResult, CatalogueError>;
}

/// Newest registrations first, then asset id, then provider.
fn display_order(a: &CatalogueEntry, b: &CatalogueEntry) -> std::cmp::Ordering {
    b.registered_at
        .cmp(&a.registered_at)
        .then_with(|| a.self_description.asset_id().cmp(b.self_description.asset_id()))
        .then_with(|| a.self_description.provider_id().cmp(b.self_description.provider_id()))
}

pub struct Catalogue {
    endpoint: String,
    entries: RwLock<BTreeMap<EntryKey, CatalogueEntry>>,
    vocabulary: Arc<VocabularyHub>,
    verifier: TokenVerifier,
    clock: Arc<dyn Clock>,
}

impl Catalogue {
    pub fn new(
        endpoint: impl Into<String>,
        vocabulary: Arc<VocabularyHub>,
        verifier: TokenVerifier,
        clock: Arc<dyn Clock>,
    ) -> Self {
        Catalogue {
            endpoint: endpoint.into(),
            entries: RwLock::new(BTreeMap::new()),
            vocabulary,
            verifier,
            clock,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    fn authorize(&self, token: &AccessToken, scope: &str) -> Result<(), CatalogueError> {
        self.verifier
            .verify(token, scope)
            .into_result()
            .map_err(CatalogueError::ScopeDenied)
    }

    /// Registers (or atomically replaces) a provider's self-description.
    /// Descriptions failing vocabulary validation are kept but quarantined.
    pub fn register(&self, sd: SelfDescription, token: &AccessToken) -> Result<CatalogueEntry, CatalogueError> {
        self.authorize(token, SCOPE_CATALOGUE_WRITE)?;
        if token.subject != *sd.provider_id() {
            return Err(CatalogueError::SubjectMismatch {
                subject: token.subject.clone(),
                provider: sd.provider_id().clone(),
            });
        }
        let report = self.vocabulary.validate_kind(sd.kind(), sd.metadata());
        let key = (sd.provider_id().clone(), sd.asset_id().to_string());
        let mut entries = self.entries.write().expect("catalogue lock");
        let revision = entries.get(&key).map_or(0, |e| e.revision) + 1;
        let entry = CatalogueEntry {
            self_description: sd,
            registered_at: self.clock.now(),
            source_connector: self.endpoint.clone(),
            validation_report: report,
            origin_connector: self.endpoint.clone(),
            revision,
        };
        entries.insert(key, entry.clone());
        Ok(entry)
    }

    pub fn search(&self, q: &Query, token: &AccessToken) -> Result<SearchResult, CatalogueError> {
        self.authorize(token, SCOPE_CATALOGUE_READ)?;
        if q.limit == 0 || q.limit > MAX_QUERY_LIMIT {
            return Err(CatalogueError::InvalidQuery(format!(
                "limit must be within 1..={MAX_QUERY_LIMIT}, got {}",
                q.limit
            )));
        }
        let entries = self.entries.read().expect("catalogue lock");
        let mut hits: Vec<&CatalogueEntry> = entries
            .values()
            .filter(|e| e.is_visible() && q.matches(&e.self_description))
            .collect();
        hits.sort_by(|a, b| display_order(a, b));
        let total_count = hits.len() as u64;
        let page = hits
            .into_iter()
            .skip(q.offset as usize)
            .take(q.limit as usize)
            .cloned()
            .collect();
        Ok(SearchResult {
            entries: page,
            total_count,
        })
    }

    /// Visible entry for `(provider, asset_id)`, if any.
    pub fn lookup(&self, provider: &ParticipantId, asset_id: &str) -> Option<CatalogueEntry> {
        self.entries
            .read()
            .expect("catalogue lock")
            .get(&(provider.clone(), asset_id.to_string()))
            .filter(|e| e.is_visible())
            .cloned()
    }

    /// Entries held back by validation, for administrators.
    pub fn quarantined(&self, token: &AccessToken) -> Result<Vec<CatalogueEntry>, CatalogueError> {
        self.authorize(token, SCOPE_CATALOGUE_ADMIN)?;
        let entries = self.entries.read().expect("catalogue lock");
        let mut out: Vec<_> = entries.values().filter(|e| !e.is_visible()).cloned().collect();
        out.sort_by(display_order);
        Ok(out)
    }

    /// Every visible self-description, in display order (no authorization;
    /// used for in-process inspection).
    pub fn visible_descriptions(&self) -> Vec<SelfDescription> {
        let entries = self.entries.read().expect("catalogue lock");
        let mut out: Vec<&CatalogueEntry> = entries.values().filter(|e| e.is_visible()).collect();
        out.sort_by(|a, b| display_order(a, b));
        out.into_iter().map(|e| e.self_description.clone()).collect()
    }

    /// Pulls the peer's visible entries and merges them. The token must
    /// carry `catalogue:federate` here and `catalogue:read` at the peer.
    pub fn federate_from(&self, peer: &dyn PeerCatalogue, token: &AccessToken) -> Result<SyncReport, CatalogueError> {
        self.authorize(token, SCOPE_CATALOGUE_FEDERATE)?;
        let peer_endpoint = peer.endpoint();
        let mut pulled = Vec::new();
        let mut q = Query::all();
        loop {
            let page = peer.search(&q, token).map_err(|e| match e {
                CatalogueError::PeerUnreachable { .. } => e,
                other => CatalogueError::PeerUnreachable {
                    peer: peer_endpoint.clone(),
                    reason: other.to_string(),
                },
            })?;
            let n = page.entries.len() as u32;
            pulled.extend(page.entries);
            if n == 0 || pulled.len() as u64 >= page.total_count {
                break;
            }
            q.offset += n;
        }

        let mut report = SyncReport::default();
        let mut entries = self.entries.write().expect("catalogue lock");
        let peer_keys: BTreeSet<EntryKey> = pulled.iter().map(CatalogueEntry::key).collect();
        for remote in pulled {
            let key = remote.key();
            let incoming = CatalogueEntry {
                validation_report: self
                    .vocabulary
                    .validate_kind(remote.self_description.kind(), remote.self_description.metadata()),
                source_connector: peer_endpoint.clone(),
                ..remote
            };
            match entries.get(&key) {
                None => {
                    entries.insert(key, incoming);
                    report.added += 1;
                }
                Some(local) => {
                    let take = if local.origin_connector == self.endpoint {
                        false
                    } else if local.origin_connector == incoming.origin_connector {
                        incoming.revision > local.revision
                    } else {
                        incoming.origin_connector == peer_endpoint
                    };
                    if take && (local.self_description != incoming.self_description || local.revision != incoming.revision) {
                        entries.insert(key, incoming);
                        report.updated += 1;
                    }
                }
            }
        }
        let gone: Vec<EntryKey> = entries
            .iter()
            .filter(|(k, e)| {
                e.source_connector == peer_endpoint && e.origin_connector == peer_endpoint && !peer_keys.contains(*k)
            })
            .map(|(k, _)| k.clone())
            .collect();
        for k in gone {
            entries.remove(&k);
            report.removed += 1;
        }
        Ok(report)
    }
}

impl PeerCatalogue for Catalogue {
    fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    fn search(&self, q: &Query, token: &AccessToken) -> Result<SearchResult, CatalogueError> {
        Catalogue::search(self, q, token)
    }
}

/// A peer that cannot be reached; handy for failure paths.
pub struct UnreachablePeer(pub String);

impl PeerCatalogue for UnreachablePeer {
    fn endpoint(&self) -> String {
        self.0.clone()
    }

    fn search(&self, _q: &Query, _token: &AccessToken) -> Result<SearchResult, CatalogueError> {
        Err(CatalogueError::PeerUnreachable {
            peer: self.0.clone(),
            reason: "connection refused".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use crate::identity::{issue_credential, issue_token, Credential, KeyPair, TrustStore};
    use crate::model::{digest_of, Offer, SelfDescriptionParts, Temperature};
    use crate::policy::{Action, Rule, UsagePolicy};

    pub(crate) struct Fx {
        pub clock: LogicalClock,
        trust: TrustStore,
        sk: KeyPair,
        creds: BTreeMap<String, Credential>,
        pub hub: Arc<VocabularyHub>,
    }

    impl Fx {
        fn new() -> Self {
            let clock = LogicalClock::default();
            let trust = TrustStore::new();
            let anchor = ParticipantId::parse("did:dali:dali:federator").unwrap();
            let ak = KeyPair::from_seed([1; 32]);
            trust.register_anchor(anchor.clone(), ak.public_key());
            let sk = KeyPair::from_seed([2; 32]);
            let mut creds = BTreeMap::new();
            for who in ["did:dali:eur:testbed", "did:dali:isi:testbed", "did:dali:lab:consumer", "did:dali:dali:federator"] {
                let c = issue_credential(
                    &trust,
                    &anchor,
                    &ak,
                    ParticipantId::parse(who).unwrap(),
                    BTreeMap::new(),
                    86_400,
                    clock.now(),
                )
                .unwrap();
                creds.insert(who.to_string(), c);
            }
            let hub = Arc::new(VocabularyHub::with_builtins(TokenVerifier::new(
                sk.public_key(),
                Arc::new(clock.clone()),
            )));
            Fx { clock, trust, sk, creds, hub }
        }

        fn token(&self, who: &str, scopes: &[&str]) -> AccessToken {
            issue_token(
                &self.sk,
                &self.creds[who],
                &self.trust,
                "catalogue",
                scopes.iter().map(|s| s.to_string()).collect(),
                3600,
                self.clock.now(),
            )
            .unwrap()
        }

        fn catalogue(&self, endpoint: &str) -> Catalogue {
            Catalogue::new(
                endpoint,
                self.hub.clone(),
                TokenVerifier::new(self.sk.public_key(), Arc::new(self.clock.clone())),
                Arc::new(self.clock.clone()),
            )
        }
    }

    fn sd(provider: &str, asset: &str, kind: AssetKind, title: &str, meta: &[(&str, &str)]) -> SelfDescription {
        SelfDescription::new(SelfDescriptionParts {
            asset_id: asset.into(),
            provider_id: ParticipantId::parse(provider).unwrap(),
            kind,
            title: title.into(),
            metadata: meta.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
            offers: vec![Offer {
                offer_id: "default".into(),
                policy: UsagePolicy {
                    permissions: vec![Rule::unconditional(Action::Use)],
                    prohibitions: vec![Rule::unconditional(Action::ReShare)],
                },
                license_tag: "research".into(),
            }],
            content_digest: Some(digest_of(asset.as_bytes())),
            temperature: Temperature::Cold,
            created_at: LogicalClock::DEFAULT_START,
        })
        .unwrap()
    }

    const EUR: &str = "did:dali:eur:testbed";
    const ISI: &str = "did:dali:isi:testbed";
    const DATASET_META: &[(&str, &str)] = &[("frequency-band", "mmWave"), ("testbed-origin", "eur"), ("sample-count", "10")];

    #[test]
    fn register_then_search() {
        let f = Fx::new();
        let cat = f.catalogue("cat-eur");
        let read = f.token("did:dali:lab:consumer", &[SCOPE_CATALOGUE_READ]);
        assert_eq!(cat.search(&Query::default(), &read).unwrap().total_count, 0);

        let write = f.token(EUR, &[SCOPE_CATALOGUE_WRITE]);
        let e = cat
            .register(sd(EUR, "ds-1", AssetKind::Dataset, "Channel sounding", DATASET_META), &write)
            .unwrap();
        assert!(e.is_visible());
        let r = cat.search(&Query::default(), &read).unwrap();
        assert_eq!(r.total_count, 1);
        assert_eq!(r.entries[0].self_description.asset_id(), "ds-1");
    }

    #[test]
    fn invalid_metadata_is_quarantined() {
        let f = Fx::new();
        let cat = f.catalogue("cat-eur");
        let write = f.token(EUR, &[SCOPE_CATALOGUE_WRITE]);
        let e = cat
            .register(
                sd(EUR, "ds-2", AssetKind::Dataset, "No band", &[("testbed-origin", "eur"), ("sample-count", "3")]),
                &write,
            )
            .unwrap();
        assert_eq!(e.validation_report.len(), 1);
        let read = f.token(ISI, &[SCOPE_CATALOGUE_READ]);
        assert_eq!(cat.search(&Query::default(), &read).unwrap().total_count, 0);
        assert!(cat.lookup(&ParticipantId::parse(EUR).unwrap(), "ds-2").is_none());
        let admin = f.token("did:dali:dali:federator", &[SCOPE_CATALOGUE_ADMIN]);
        assert_eq!(cat.quarantined(&admin).unwrap().len(), 1);
        assert!(cat.quarantined(&read).is_err());
    }

    #[test]
    fn registration_authorization() {
        let f = Fx::new();
        let cat = f.catalogue("cat-eur");
        let isi_write = f.token(ISI, &[SCOPE_CATALOGUE_WRITE]);
        assert!(matches!(
            cat.register(sd(EUR, "ds-1", AssetKind::Dataset, "x", DATASET_META), &isi_write),
            Err(CatalogueError::SubjectMismatch { .. })
        ));
        let eur_read = f.token(EUR, &[SCOPE_CATALOGUE_READ]);
        assert!(matches!(
            cat.register(sd(EUR, "ds-1", AssetKind::Dataset, "x", DATASET_META), &eur_read),
            Err(CatalogueError::ScopeDenied(InvalidReason::MissingScope))
        ));
        assert!(matches!(
            cat.search(&Query::default(), &f.token(EUR, &[SCOPE_CATALOGUE_WRITE])),
            Err(CatalogueError::ScopeDenied(_))
        ));
    }

    #[test]
    fn filters_and_ordering() {
        let f = Fx::new();
        let cat = f.catalogue("cat");
        let eur = f.token(EUR, &[SCOPE_CATALOGUE_WRITE]);
        let isi = f.token(ISI, &[SCOPE_CATALOGUE_WRITE]);
        cat.register(sd(EUR, "b", AssetKind::Dataset, "Urban CHANNEL traces", DATASET_META), &eur)
            .unwrap();
        cat.register(sd(EUR, "a", AssetKind::Dataset, "Mobility", DATASET_META), &eur)
            .unwrap();
        f.clock.advance(10);
        cat.register(
            sd(ISI, "m", AssetKind::MlModel, "Beam predictor", &[("task", "beam-prediction"), ("input-schema", "csv")]),
            &isi,
        )
        .unwrap();
        let read = f.token(ISI, &[SCOPE_CATALOGUE_READ]);
        let ids = |q: &Query| -> Vec<String> {
            cat.search(q, &read)
                .unwrap()
                .entries
                .iter()
                .map(|e| e.self_description.asset_id().to_string())
                .collect()
        };
        assert_eq!(ids(&Query::default()), vec!["m", "a", "b"]);
        assert_eq!(
            ids(&Query {
                kind: Some(AssetKind::MlModel),
                ..Default::default()
            }),
            vec!["m"]
        );
        assert_eq!(
            ids(&Query {
                text: Some("channel".into()),
                ..Default::default()
            }),
            vec!["b"]
        );
        assert_eq!(
            ids(&Query {
                provider: Some(ParticipantId::parse(EUR).unwrap()),
                limit: 1,
                offset: 1,
                ..Default::default()
            }),
            vec!["b"]
        );
        assert_eq!(
            ids(&Query {
                metadata_filters: vec![("task".into(), "beam-prediction".into())],
                ..Default::default()
            }),
            vec!["m"]
        );
        for limit in [0, 1001] {
            assert!(matches!(
                cat.search(&Query { limit, ..Default::default() }, &read),
                Err(CatalogueError::InvalidQuery(_))
            ));
        }
    }

    #[test]
    fn federation_examples() {
        let f = Fx::new();
        let local = f.catalogue("cat-fed");
        let peer = f.catalogue("cat-eur");
        let eur = f.token(EUR, &[SCOPE_CATALOGUE_WRITE]);
        peer.register(sd(EUR, "a", AssetKind::Dataset, "A", DATASET_META), &eur).unwrap();
        peer.register(sd(EUR, "b", AssetKind::Dataset, "B", DATASET_META), &eur).unwrap();
        let fed = f.token("did:dali:dali:federator", &[SCOPE_CATALOGUE_FEDERATE, SCOPE_CATALOGUE_READ]);
        let r = local.federate_from(&peer, &fed).unwrap();
        assert_eq!(r, SyncReport { added: 2, updated: 0, removed: 0 });
        assert!(local.federate_from(&peer, &fed).unwrap().is_quiet());
        let e = local.lookup(&ParticipantId::parse(EUR).unwrap(), "a").unwrap();
        assert_eq!(e.source_connector, "cat-eur");
        assert_eq!(e.origin_connector, "cat-eur");

        // re-registration at the origin propagates
        peer.register(sd(EUR, "a", AssetKind::Dataset, "A v2", DATASET_META), &eur).unwrap();
        assert_eq!(local.federate_from(&peer, &fed).unwrap().updated, 1);
        assert_eq!(
            local.lookup(&ParticipantId::parse(EUR).unwrap(), "a").unwrap().self_description.title(),
            "A v2"
        );

        let unreachable = UnreachablePeer("cat-gone".into());
        let before = local.visible_descriptions();
        assert!(matches!(
            local.federate_from(&unreachable, &fed),
            Err(CatalogueError::PeerUnreachable { .. })
        ));
        assert_eq!(local.visible_descriptions(), before);
        assert!(matches!(
            local.federate_from(&peer, &f.token(EUR, &[SCOPE_CATALOGUE_READ])),
            Err(CatalogueError::ScopeDenied(_))
        ));
    }

    #[test]
    fn provider_authoritative_conflicts() {
        let f = Fx::new();
        let own = f.catalogue("cat-eur");
        let other = f.catalogue("cat-isi");
        let eur = f.token(EUR, &[SCOPE_CATALOGUE_WRITE]);
        let fed = f.token("did:dali:dali:federator", &[SCOPE_CATALOGUE_FEDERATE, SCOPE_CATALOGUE_READ]);
        own.register(sd(EUR, "a", AssetKind::Dataset, "v1", DATASET_META), &eur).unwrap();
        other.federate_from(&own, &fed).unwrap();
        own.register(sd(EUR, "a", AssetKind::Dataset, "v2", DATASET_META), &eur).unwrap();
        // the peer's copy is stale; the provider's own catalogue keeps v2
        let r = own.federate_from(&other, &fed).unwrap();
        assert_eq!(r.updated, 0);
        assert_eq!(
            own.lookup(&ParticipantId::parse(EUR).unwrap(), "a").unwrap().self_description.title(),
            "v2"
        );
    }
}
