//! Federated identity: trust anchors issue participant credentials, services
//! mint short-lived scoped access tokens, and every signed artefact is signed
//! with Ed25519 over its canonical JSON (minus the `sig` field).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use base64::engine::general_purpose::URL_SAFE_NO_PAD;
use base64::Engine as _;
use ed25519_dalek::{Signer, SigningKey, VerifyingKey};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::canonical::to_canonical_bytes;
use crate::clock::Clock;
use crate::model::{ParticipantId, Timestamp};

#[derive(Debug, Error)]
pub enum IdentityError {
    #[error("unknown trust anchor {0}")]
    UnknownAnchor(ParticipantId),
    #[error("ttl must be positive, got {0}")]
    InvalidTtl(i64),
    #[error("subject holds no currently valid credential: {0}")]
    NoValidCredential(InvalidReason),
    #[error("token scopes must be non-empty")]
    EmptyScopes,
    #[error("malformed key material: {0}")]
    MalformedKey(String),
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("key file i/o: {0}")]
    Io(#[from] std::io::Error),
}

/// 32-byte Ed25519 verification key; hex on the wire.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct PublicKey([u8; 32]);

impl PublicKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        PublicKey(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self, IdentityError> {
        let raw = hex::decode(s.trim()).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
        let bytes: [u8; 32] = raw
            .try_into()
            .map_err(|_| IdentityError::MalformedKey("public key must be 32 bytes".into()))?;
        Ok(PublicKey(bytes))
    }

    /// Checks `sig` over `message`. Malformed keys or signatures simply fail.
    pub fn verify(&self, message: &[u8], sig: &SignatureBytes) -> bool {
        let Ok(vk) = VerifyingKey::from_bytes(&self.0) else {
            return false;
        };
        let Ok(bytes) = <[u8; 64]>::try_from(sig.0.as_slice()) else {
            return false;
        };
        vk.verify_strict(message, &ed25519_dalek::Signature::from_bytes(&bytes))
            .is_ok()
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", self.to_hex())
    }
}

impl Serialize for PublicKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for PublicKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        PublicKey::from_hex(&raw).map_err(serde::de::Error::custom)
    }
}

/// Raw signature bytes, base64url (unpadded) on the wire.
#[derive(Clone, PartialEq, Eq, Hash, Default)]
pub struct SignatureBytes(pub Vec<u8>);

impl fmt::Debug for SignatureBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Sig({})", URL_SAFE_NO_PAD.encode(&self.0))
    }
}

impl Serialize for SignatureBytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&URL_SAFE_NO_PAD.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for SignatureBytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        URL_SAFE_NO_PAD
            .decode(raw.as_bytes())
            .map(SignatureBytes)
            .map_err(serde::de::Error::custom)
    }
}

/// Ed25519 signing key with its public half. The private half is never
/// serialized except through [`write_key_files`].
#[derive(Clone)]
pub struct KeyPair {
    signing: SigningKey,
}

impl KeyPair {
    pub fn generate<R: rand::CryptoRng + rand::RngCore>(rng: &mut R) -> Self {
        KeyPair {
            signing: SigningKey::generate(rng),
        }
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        KeyPair {
            signing: SigningKey::from_bytes(&seed),
        }
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(self.signing.verifying_key().to_bytes())
    }

    pub fn sign(&self, message: &[u8]) -> SignatureBytes {
        SignatureBytes(self.signing.sign(message).to_bytes().to_vec())
    }

    fn seed(&self) -> [u8; 32] {
        self.signing.to_bytes()
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyPair")
            .field("public", &self.public_key())
            .finish_non_exhaustive()
    }
}

/// Canonical bytes of `value` with its top-level `sig` field removed.
pub fn signing_payload<T: Serialize>(value: &T) -> Result<Vec<u8>, serde_json::Error> {
    let mut v = serde_json::to_value(value)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("sig");
    }
    to_canonical_bytes(&v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InvalidReason {
    BadSignature,
    UnknownIssuer,
    Expired,
    NotYetValid,
    MissingScope,
}

impl fmt::Display for InvalidReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InvalidReason::BadSignature => "bad-signature",
            InvalidReason::UnknownIssuer => "unknown-issuer",
            InvalidReason::Expired => "expired",
            InvalidReason::NotYetValid => "not-yet-valid",
            InvalidReason::MissingScope => "missing-scope",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "verdict", content = "reason")]
pub enum Verdict {
    Valid,
    Invalid(InvalidReason),
}

impl Verdict {
    pub fn is_valid(self) -> bool {
        self == Verdict::Valid
    }

    pub fn into_result(self) -> Result<(), InvalidReason> {
        match self {
            Verdict::Valid => Ok(()),
            Verdict::Invalid(r) => Err(r),
        }
    }
}

/// Participant credential signed by a trust anchor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Credential {
    pub subject: ParticipantId,
    pub issuer: ParticipantId,
    pub claims: BTreeMap<String, String>,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub sig: SignatureBytes,
}

impl Credential {
    pub fn role(&self) -> Option<&str> {
        self.claims.get("role").map(String::as_str)
    }
}

/// Bearer token minted by a service for one subject and a fixed scope list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AccessToken {
    pub subject: ParticipantId,
    pub audience: String,
    pub scopes: Vec<String>,
    pub issued_at: Timestamp,
    pub expires_at: Timestamp,
    pub sig: SignatureBytes,
}

impl AccessToken {
    /// Compact header form: base64url of the canonical JSON.
    pub fn to_header_value(&self) -> String {
        let json = to_canonical_bytes(self).expect("token serializes");
        URL_SAFE_NO_PAD.encode(json)
    }

    pub fn from_header_value(raw: &str) -> Option<Self> {
        let bytes = URL_SAFE_NO_PAD.decode(raw.trim().as_bytes()).ok()?;
        serde_json::from_slice(&bytes).ok()
    }
}

#[derive(Debug, Default, Clone, Serialize, Deserialize)]
pub struct TrustSnapshot {
    pub anchors: BTreeMap<ParticipantId, PublicKey>,
    pub participants: BTreeMap<ParticipantId, PublicKey>,
}

/// Registry of anchor and participant keys. Anchors are always also
/// participants. Reads are concurrent, mutations serialized.
#[derive(Debug, Default)]
pub struct TrustStore {
    inner: RwLock<TrustSnapshot>,
}

impl TrustStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_snapshot(mut snap: TrustSnapshot) -> Self {
        for (id, key) in &snap.anchors {
            snap.participants.insert(id.clone(), *key);
        }
        TrustStore {
            inner: RwLock::new(snap),
        }
    }

    pub fn register_anchor(&self, id: ParticipantId, key: PublicKey) {
        let mut g = self.inner.write().expect("trust store lock");
        g.participants.insert(id.clone(), key);
        g.anchors.insert(id, key);
    }

    pub fn register_participant(&self, id: ParticipantId, key: PublicKey) {
        self.inner
            .write()
            .expect("trust store lock")
            .participants
            .insert(id, key);
    }

    pub fn anchor_key(&self, id: &ParticipantId) -> Option<PublicKey> {
        self.inner.read().expect("trust store lock").anchors.get(id).copied()
    }

    pub fn participant_key(&self, id: &ParticipantId) -> Option<PublicKey> {
        self.inner
            .read()
            .expect("trust store lock")
            .participants
            .get(id)
            .copied()
    }

    pub fn snapshot(&self) -> TrustSnapshot {
        self.inner.read().expect("trust store lock").clone()
    }
}

/// Issues a credential for `subject` signed by the registered anchor `anchor_id`.
pub fn issue_credential(
    trust: &TrustStore,
    anchor_id: &ParticipantId,
    anchor_keys: &KeyPair,
    subject: ParticipantId,
    claims: BTreeMap<String, String>,
    ttl_secs: i64,
    now: Timestamp,
) -> Result<Credential, IdentityError> {
    if ttl_secs <= 0 {
        return Err(IdentityError::InvalidTtl(ttl_secs));
    }
    match trust.anchor_key(anchor_id) {
        Some(k) if k == anchor_keys.public_key() => {}
        _ => return Err(IdentityError::UnknownAnchor(anchor_id.clone())),
    }
    let mut cred = Credential {
        subject,
        issuer: anchor_id.clone(),
        claims,
        issued_at: now,
        expires_at: now.plus_secs(ttl_secs),
        sig: SignatureBytes::default(),
    };
    cred.sig = anchor_keys.sign(&signing_payload(&cred)?);
    Ok(cred)
}

pub fn verify_credential(c: &Credential, trust: &TrustStore, now: Timestamp) -> Verdict {
    let Some(key) = trust.anchor_key(&c.issuer) else {
        return Verdict::Invalid(InvalidReason::UnknownIssuer);
    };
    let Ok(payload) = signing_payload(c) else {
        return Verdict::Invalid(InvalidReason::BadSignature);
    };
    if !key.verify(&payload, &c.sig) {
        return Verdict::Invalid(InvalidReason::BadSignature);
    }
    if now < c.issued_at {
        return Verdict::Invalid(InvalidReason::NotYetValid);
    }
    if now >= c.expires_at {
        return Verdict::Invalid(InvalidReason::Expired);
    }
    Verdict::Valid
}

/// Mints a token for the holder of `credential`.
pub fn issue_token(
    service_keys: &KeyPair,
    credential: &Credential,
    trust: &TrustStore,
    audience: &str,
    scopes: Vec<String>,
    ttl_secs: i64,
    now: Timestamp,
) -> Result<AccessToken, IdentityError> {
    if scopes.is_empty() {
        return Err(IdentityError::EmptyScopes);
    }
    if ttl_secs <= 0 {
        return Err(IdentityError::InvalidTtl(ttl_secs));
    }
    verify_credential(credential, trust, now)
        .into_result()
        .map_err(IdentityError::NoValidCredential)?;
    let mut token = AccessToken {
        subject: credential.subject.clone(),
        audience: audience.to_string(),
        scopes,
        issued_at: now,
        expires_at: now.plus_secs(ttl_secs),
        sig: SignatureBytes::default(),
    };
    token.sig = service_keys.sign(&signing_payload(&token)?);
    Ok(token)
}

/// Checks a token against the issuing service's key. Scope match is exact.
pub fn verify_token(t: &AccessToken, service_key: &PublicKey, required_scope: &str, now: Timestamp) -> Verdict {
    let Ok(payload) = signing_payload(t) else {
        return Verdict::Invalid(InvalidReason::BadSignature);
    };
    if !service_key.verify(&payload, &t.sig) {
        return Verdict::Invalid(InvalidReason::BadSignature);
    }
    if now >= t.expires_at {
        return Verdict::Invalid(InvalidReason::Expired);
    }
    if !t.scopes.iter().any(|s| s == required_scope) {
        return Verdict::Invalid(InvalidReason::MissingScope);
    }
    Verdict::Valid
}

/// A service identity able to mint tokens for credentialed participants.
pub struct TokenService {
    audience: String,
    keys: KeyPair,
    trust: Arc<TrustStore>,
    clock: Arc<dyn Clock>,
}

impl TokenService {
    pub fn new(audience: impl Into<String>, keys: KeyPair, trust: Arc<TrustStore>, clock: Arc<dyn Clock>) -> Self {
        TokenService {
            audience: audience.into(),
            keys,
            trust,
            clock,
        }
    }

    pub fn audience(&self) -> &str {
        &self.audience
    }

    pub fn public_key(&self) -> PublicKey {
        self.keys.public_key()
    }

    pub fn issue(&self, credential: &Credential, scopes: Vec<String>, ttl_secs: i64) -> Result<AccessToken, IdentityError> {
        issue_token(
            &self.keys,
            credential,
            &self.trust,
            &self.audience,
            scopes,
            ttl_secs,
            self.clock.now(),
        )
    }

    pub fn verifier(&self) -> TokenVerifier {
        TokenVerifier::new(self.public_key(), self.clock.clone())
    }
}

/// Verifies tokens of one issuing service against the injected clock.
#[derive(Clone)]
pub struct TokenVerifier {
    key: PublicKey,
    clock: Arc<dyn Clock>,
}

impl TokenVerifier {
    pub fn new(key: PublicKey, clock: Arc<dyn Clock>) -> Self {
        TokenVerifier { key, clock }
    }

    pub fn verify(&self, token: &AccessToken, required_scope: &str) -> Verdict {
        verify_token(token, &self.key, required_scope, self.clock.now())
    }

    pub fn key(&self) -> PublicKey {
        self.key
    }
}

/// Source of fresh tokens for a participant's outbound calls.
pub trait TokenSource: Send + Sync {
    fn token(&self, scopes: &[&str]) -> Result<AccessToken, IdentityError>;
}

/// Token source backed directly by a [`TokenService`] (in-process federations).
pub struct LocalTokenSource {
    service: Arc<TokenService>,
    credential: Credential,
    ttl_secs: i64,
}

impl LocalTokenSource {
    pub fn new(service: Arc<TokenService>, credential: Credential, ttl_secs: i64) -> Self {
        LocalTokenSource {
            service,
            credential,
            ttl_secs,
        }
    }
}

impl TokenSource for LocalTokenSource {
    fn token(&self, scopes: &[&str]) -> Result<AccessToken, IdentityError> {
        self.service
            .issue(&self.credential, scopes.iter().map(|s| s.to_string()).collect(), self.ttl_secs)
    }
}

pub fn public_key_path(dir: &Path, id: &ParticipantId) -> PathBuf {
    dir.join(format!("{}.pub", id.file_stem()))
}

pub fn private_key_path(dir: &Path, id: &ParticipantId) -> PathBuf {
    dir.join(format!("{}.key", id.file_stem()))
}

/// Writes `<participant>.pub` (hex public key) and `<participant>.key`
/// (hex seed, mode 0600 on unix).
pub fn write_key_files(dir: &Path, id: &ParticipantId, keys: &KeyPair) -> Result<(), IdentityError> {
    fs::create_dir_all(dir)?;
    fs::write(public_key_path(dir, id), keys.public_key().to_hex())?;
    let mut opts = fs::OpenOptions::new();
    opts.write(true).create(true).truncate(true);
    #[cfg(unix)]
    {
        use std::os::unix::fs::OpenOptionsExt;
        opts.mode(0o600);
    }
    let mut f = opts.open(private_key_path(dir, id))?;
    f.write_all(hex::encode(keys.seed()).as_bytes())?;
    Ok(())
}

pub fn read_key_pair(dir: &Path, id: &ParticipantId) -> Result<KeyPair, IdentityError> {
    let raw = fs::read_to_string(private_key_path(dir, id))?;
    let seed = hex::decode(raw.trim()).map_err(|e| IdentityError::MalformedKey(e.to_string()))?;
    let seed: [u8; 32] = seed
        .try_into()
        .map_err(|_| IdentityError::MalformedKey("private key must be 32 bytes".into()))?;
    Ok(KeyPair::from_seed(seed))
}

pub fn read_public_key(dir: &Path, id: &ParticipantId) -> Result<PublicKey, IdentityError> {
    PublicKey::from_hex(&fs::read_to_string(public_key_path(dir, id))?)
}
