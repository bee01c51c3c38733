//! Shared domain vocabulary: participant identifiers, asset kinds, digests,
//! timestamps and the self-descriptions published to catalogues.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDateTime};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::policy::{check_well_formed, UsagePolicy};

/// Maximum number of offers a single asset may carry.
pub const MAX_OFFERS_PER_ASSET: usize = 32;

const DID_PREFIX: &str = "did:dali:";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModelError {
    #[error("malformed participant id {0:?}")]
    MalformedId(String),
    #[error("unknown asset kind {0:?}")]
    UnknownKind(String),
    #[error("malformed digest: {0}")]
    MalformedDigest(String),
    #[error("malformed timestamp {0:?}")]
    MalformedTimestamp(String),
    #[error("invalid self-description: {0}")]
    InvalidSelfDescription(String),
}

/// Decentralized-style participant identifier, `did:dali:<org>:<name>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParticipantId(String);

fn is_id_segment(s: &str) -> bool {
    !s.is_empty()
        && s
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'-')
}

/// Parses and validates a participant identifier.
pub fn parse_participant_id(raw: &str) -> Result<ParticipantId, ModelError> {
    let rest = raw
        .strip_prefix(DID_PREFIX)
        .ok_or_else(|| ModelError::MalformedId(raw.to_string()))?;
    let mut parts = rest.split(':');
    match (parts.next(), parts.next(), parts.next()) {
        (Some(org), Some(name), None) if is_id_segment(org) && is_id_segment(name) => {
            Ok(ParticipantId(raw.to_string()))
        }
        _ => Err(ModelError::MalformedId(raw.to_string())),
    }
}

impl ParticipantId {
    pub fn parse(raw: &str) -> Result<Self, ModelError> {
        parse_participant_id(raw)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// The `<org>` segment.
    pub fn org(&self) -> &str {
        self.0[DID_PREFIX.len()..].split(':').next().unwrap_or("")
    }

    /// The `<name>` segment.
    pub fn name(&self) -> &str {
        self.0.rsplit(':').next().unwrap_or("")
    }

    /// Filesystem-safe rendering used for key files.
    pub fn file_stem(&self) -> String {
        format!("{}-{}", self.org(), self.name())
    }
}

impl fmt::Display for ParticipantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for ParticipantId {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_participant_id(s)
    }
}

impl Serialize for ParticipantId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for ParticipantId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        parse_participant_id(&raw).map_err(serde::de::Error::custom)
    }
}

/// What a catalogued asset is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AssetKind {
    Dataset,
    Service,
    MlModel,
    RanModel,
    Application,
}

impl AssetKind {
    pub const ALL: [AssetKind; 5] = [
        AssetKind::Dataset,
        AssetKind::Service,
        AssetKind::MlModel,
        AssetKind::RanModel,
        AssetKind::Application,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AssetKind::Dataset => "dataset",
            AssetKind::Service => "service",
            AssetKind::MlModel => "ml-model",
            AssetKind::RanModel => "ran-model",
            AssetKind::Application => "application",
        }
    }
}

/// Maps one of the five canonical kind strings onto [`AssetKind`].
pub fn classify_asset_kind(raw: &str) -> Result<AssetKind, ModelError> {
    AssetKind::ALL
        .into_iter()
        .find(|k| k.as_str() == raw)
        .ok_or_else(|| ModelError::UnknownKind(raw.to_string()))
}

impl fmt::Display for AssetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AssetKind {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        classify_asset_kind(s)
    }
}

/// SHA-256 content digest.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawDigest")]
pub struct Digest {
    algorithm: String,
    hex: String,
}

#[derive(Deserialize)]
struct RawDigest {
    algorithm: String,
    hex: String,
}

impl TryFrom<RawDigest> for Digest {
    type Error = ModelError;
    fn try_from(raw: RawDigest) -> Result<Self, Self::Error> {
        if raw.algorithm != Digest::ALGORITHM {
            return Err(ModelError::MalformedDigest(format!(
                "unsupported algorithm {:?}",
                raw.algorithm
            )));
        }
        Digest::from_hex(&raw.hex)
    }
}

impl Digest {
    pub const ALGORITHM: &'static str = "sha-256";

    pub fn from_hex(hex: &str) -> Result<Self, ModelError> {
        if hex.len() != 64 || !hex.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
            return Err(ModelError::MalformedDigest(format!(
                "expected 64 lowercase hex chars, got {hex:?}"
            )));
        }
        Ok(Digest {
            algorithm: Self::ALGORITHM.to_string(),
            hex: hex.to_string(),
        })
    }

    pub fn algorithm(&self) -> &str {
        &self.algorithm
    }

    pub fn hex(&self) -> &str {
        &self.hex
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.algorithm, self.hex)
    }
}

/// SHA-256 of `bytes`.
pub fn digest_of(bytes: &[u8]) -> Digest {
    Digest {
        algorithm: Digest::ALGORITHM.to_string(),
        hex: hex::encode(Sha256::digest(bytes)),
    }
}

/// Incremental digest computation for streamed payloads.
#[derive(Default)]
pub struct DigestBuilder(Sha256);

impl DigestBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, bytes: &[u8]) {
        self.0.update(bytes);
    }

    pub fn finish(self) -> Digest {
        Digest {
            algorithm: Digest::ALGORITHM.to_string(),
            hex: hex::encode(self.0.finalize()),
        }
    }
}

/// UTC instant with whole-second precision, serialized as `YYYY-MM-DDThh:mm:ssZ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

const TIMESTAMP_FORMAT: &str = "%Y-%m-%dT%H:%M:%SZ";

impl Timestamp {
    pub const fn from_unix(secs: i64) -> Self {
        Timestamp(secs)
    }

    pub const fn unix(self) -> i64 {
        self.0
    }

    pub fn plus_secs(self, secs: i64) -> Self {
        Timestamp(self.0.saturating_add(secs))
    }

    pub fn parse(raw: &str) -> Result<Self, ModelError> {
        NaiveDateTime::parse_from_str(raw, TIMESTAMP_FORMAT)
            .map(|dt| Timestamp(dt.and_utc().timestamp()))
            .map_err(|_| ModelError::MalformedTimestamp(raw.to_string()))
    }

    pub fn to_iso(self) -> String {
        match DateTime::from_timestamp(self.0, 0) {
            Some(dt) => dt.format(TIMESTAMP_FORMAT).to_string(),
            None => format!("@{}", self.0),
        }
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_iso())
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_iso())
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Timestamp::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Whether an asset exists already or can be produced on demand by a testbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Temperature {
    Cold,
    HotCapable,
}

/// A priced/licensed way to obtain an asset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Offer {
    pub offer_id: String,
    pub policy: UsagePolicy,
    pub license_tag: String,
}

/// Catalogued description of a dataset, service, model or application.
///
/// Construct through [`SelfDescription::new`] (or deserialize); both paths
/// enforce the structural invariants. Metadata is validated separately
/// against the vocabulary schema for `kind` when the description is
/// registered in a catalogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", try_from = "RawSelfDescription")]
pub struct SelfDescription {
    asset_id: String,
    provider_id: ParticipantId,
    kind: AssetKind,
    title: String,
    metadata: BTreeMap<String, String>,
    offers: Vec<Offer>,
    #[serde(skip_serializing_if = "Option::is_none")]
    content_digest: Option<Digest>,
    temperature: Temperature,
    created_at: Timestamp,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawSelfDescription {
    asset_id: String,
    provider_id: ParticipantId,
    kind: AssetKind,
    title: String,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
    #[serde(default)]
    offers: Vec<Offer>,
    #[serde(default)]
    content_digest: Option<Digest>,
    temperature: Temperature,
    created_at: Timestamp,
}

impl TryFrom<RawSelfDescription> for SelfDescription {
    type Error = ModelError;
    fn try_from(r: RawSelfDescription) -> Result<Self, Self::Error> {
        SelfDescription::new(SelfDescriptionParts {
            asset_id: r.asset_id,
            provider_id: r.provider_id,
            kind: r.kind,
            title: r.title,
            metadata: r.metadata,
            offers: r.offers,
            content_digest: r.content_digest,
            temperature: r.temperature,
            created_at: r.created_at,
        })
    }
}

/// Unvalidated field bundle accepted by [`SelfDescription::new`].
#[derive(Debug, Clone)]
pub struct SelfDescriptionParts {
    pub asset_id: String,
    pub provider_id: ParticipantId,
    pub kind: AssetKind,
    pub title: String,
    pub metadata: BTreeMap<String, String>,
    pub offers: Vec<Offer>,
    pub content_digest: Option<Digest>,
    pub temperature: Temperature,
    pub created_at: Timestamp,
}

impl SelfDescription {
    pub fn new(parts: SelfDescriptionParts) -> Result<Self, ModelError> {
        let bad = |m: String| Err(ModelError::InvalidSelfDescription(m));
        if parts.asset_id.is_empty() {
            return bad("assetId must be non-empty".into());
        }
        if parts.offers.len() > MAX_OFFERS_PER_ASSET {
            return bad(format!(
                "{} offers exceeds the limit of {MAX_OFFERS_PER_ASSET}",
                parts.offers.len()
            ));
        }
        let mut seen = std::collections::BTreeSet::new();
        for offer in &parts.offers {
            if offer.offer_id.is_empty() {
                return bad("offerId must be non-empty".into());
            }
            if !seen.insert(offer.offer_id.as_str()) {
                return bad(format!("duplicate offerId {:?}", offer.offer_id));
            }
            if offer.policy.permissions.is_empty() {
                return bad(format!("offer {:?} grants no permission", offer.offer_id));
            }
            let violations = check_well_formed(&offer.policy);
            if !violations.is_empty() {
                return bad(format!(
                    "offer {:?} policy is malformed: {}",
                    offer.offer_id,
                    violations
                        .iter()
                        .map(|v| v.to_string())
                        .collect::<Vec<_>>()
                        .join("; ")
                ));
            }
        }
        if parts.temperature == Temperature::Cold && parts.content_digest.is_none() {
            return bad("cold assets must carry a contentDigest".into());
        }
        Ok(SelfDescription {
            asset_id: parts.asset_id,
            provider_id: parts.provider_id,
            kind: parts.kind,
            title: parts.title,
            metadata: parts.metadata,
            offers: parts.offers,
            content_digest: parts.content_digest,
            temperature: parts.temperature,
            created_at: parts.created_at,
        })
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }
    pub fn provider_id(&self) -> &ParticipantId {
        &self.provider_id
    }
    pub fn kind(&self) -> AssetKind {
        self.kind
    }
    pub fn title(&self) -> &str {
        &self.title
    }
    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }
    pub fn offers(&self) -> &[Offer] {
        &self.offers
    }
    pub fn offer(&self, offer_id: &str) -> Option<&Offer> {
        self.offers.iter().find(|o| o.offer_id == offer_id)
    }
    pub fn content_digest(&self) -> Option<&Digest> {
        self.content_digest.as_ref()
    }
    pub fn temperature(&self) -> Temperature {
        self.temperature
    }
    pub fn created_at(&self) -> Timestamp {
        self.created_at
    }

    pub fn into_parts(self) -> SelfDescriptionParts {
        SelfDescriptionParts {
            asset_id: self.asset_id,
            provider_id: self.provider_id,
            kind: self.kind,
            title: self.title,
            metadata: self.metadata,
            offers: self.offers,
            content_digest: self.content_digest,
            temperature: self.temperature,
            created_at: self.created_at,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{Action, Rule};
    use proptest::prelude::*;

    fn policy() -> UsagePolicy {
        UsagePolicy {
            permissions: vec![Rule::unconditional(Action::Use)],
            prohibitions: vec![],
        }
    }

    fn parts() -> SelfDescriptionParts {
        SelfDescriptionParts {
            asset_id: "ds-1".into(),
            provider_id: "did:dali:eur:testbed".parse().unwrap(),
            kind: AssetKind::Dataset,
            title: "Channel measurements".into(),
            metadata: BTreeMap::new(),
            offers: vec![Offer {
                offer_id: "o-1".into(),
                policy: policy(),
                license_tag: "cc-by".into(),
            }],
            content_digest: Some(digest_of(b"x")),
            temperature: Temperature::Cold,
            created_at: Timestamp::from_unix(1_767_225_600),
        }
    }

    #[test]
    fn participant_id_examples() {
        let id = parse_participant_id("did:dali:eur:testbed-1").unwrap();
        assert_eq!(id.org(), "eur");
        assert_eq!(id.name(), "testbed-1");
        assert!(matches!(
            parse_participant_id("DID:dali:EUR:x"),
            Err(ModelError::MalformedId(_))
        ));
        let id = parse_participant_id("did:dali:isi:testbed").unwrap();
        assert_eq!(id.to_string(), "did:dali:isi:testbed");
        for bad in ["", "did:dali:", "did:dali:a", "did:dali:a:", "did:dali:a:b:c", "did:dali:a_b:c"] {
            assert!(parse_participant_id(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn asset_kind_examples() {
        assert_eq!(classify_asset_kind("ran-model").unwrap(), AssetKind::RanModel);
        assert_eq!(classify_asset_kind("dataset").unwrap(), AssetKind::Dataset);
        assert!(matches!(classify_asset_kind("blob"), Err(ModelError::UnknownKind(_))));
        assert!(classify_asset_kind("Dataset").is_err());
        let json = serde_json::to_string(&AssetKind::MlModel).unwrap();
        assert_eq!(json, "\"ml-model\"");
        assert!(serde_json::from_str::<AssetKind>("\"blob\"").is_err());
    }

    #[test]
    fn digest_examples() {
        assert_eq!(
            digest_of(b"").hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        // reference value from coreutils `sha256sum`
        assert_eq!(
            digest_of(b"dali").hex(),
            "27b50557de800b45f61e54fa4d748dd890a18592dfd53480523886802bce92ab"
        );
        assert_eq!(digest_of(b"dali"), digest_of(b"dali"));
        let mut b = DigestBuilder::new();
        b.update(b"da");
        b.update(b"li");
        assert_eq!(b.finish(), digest_of(b"dali"));
        assert!(Digest::from_hex("ABC").is_err());
        assert!(Digest::from_hex(&"A".repeat(64)).is_err());
    }

    #[test]
    fn timestamp_iso_format() {
        let t = Timestamp::from_unix(1_767_225_600);
        assert_eq!(t.to_iso(), "2026-01-01T00:00:00Z");
        assert_eq!(Timestamp::parse("2026-01-01T00:00:00Z").unwrap(), t);
        assert!(Timestamp::parse("2026-01-01 00:00:00").is_err());
    }

    #[test]
    fn cold_without_digest_is_unconstructible() {
        let mut p = parts();
        p.content_digest = None;
        assert!(SelfDescription::new(p.clone()).is_err());
        p.temperature = Temperature::HotCapable;
        assert!(SelfDescription::new(p).is_ok());

        let sd = SelfDescription::new(parts()).unwrap();
        let mut json: serde_json::Value = serde_json::to_value(&sd).unwrap();
        json.as_object_mut().unwrap().remove("contentDigest");
        assert!(serde_json::from_value::<SelfDescription>(json).is_err());
    }

    #[test]
    fn offer_limits() {
        let mut p = parts();
        let offer = p.offers[0].clone();
        p.offers = (0..33)
            .map(|i| Offer {
                offer_id: format!("o-{i}"),
                ..offer.clone()
            })
            .collect();
        assert!(SelfDescription::new(p.clone()).is_err());
        p.offers.truncate(32);
        assert!(SelfDescription::new(p.clone()).is_ok());
        p.offers[1].offer_id = "o-0".into();
        assert!(SelfDescription::new(p.clone()).is_err());
        p.offers.truncate(1);
        p.offers[0].policy.permissions.clear();
        assert!(SelfDescription::new(p).is_err());
    }

    fn segment() -> impl Strategy<Value = String> {
        "[a-z0-9-]{1,12}"
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn participant_id_round_trips(org in segment(), name in segment()) {
            let raw = format!("did:dali:{org}:{name}");
            let id = parse_participant_id(&raw).unwrap();
            prop_assert_eq!(id.to_string(), raw.clone());
            prop_assert_eq!(parse_participant_id(&id.to_string()).unwrap(), id);
        }

        #[test]
        fn kind_classification_is_closed(raw in "[a-z-]{0,12}") {
            let canonical = AssetKind::ALL.iter().any(|k| k.as_str() == raw);
            prop_assert_eq!(classify_asset_kind(&raw).is_ok(), canonical);
        }

        #[test]
        fn self_description_serde_round_trip(
            asset in "[a-z0-9-]{1,10}",
            title in ".{0,20}",
            meta in proptest::collection::btree_map("[a-z-]{1,8}", ".{0,8}", 0..4),
            secs in 0i64..4_000_000_000,
            cold in any::<bool>(),
            payload in proptest::collection::vec(any::<u8>(), 0..16),
        ) {
            let mut p = parts();
            p.asset_id = asset;
            p.title = title;
            p.metadata = meta;
            p.created_at = Timestamp::from_unix(secs);
            p.temperature = if cold { Temperature::Cold } else { Temperature::HotCapable };
            p.content_digest = if cold { Some(digest_of(&payload)) } else { None };
            let sd = SelfDescription::new(p).unwrap();
            let json = serde_json::to_string(&sd).unwrap();
            prop_assert_eq!(serde_json::from_str::<SelfDescription>(&json).unwrap(), sd);
        }
    }
}
