//! Clearing house: an append-only, hash-chained audit log.
//!
//! Each record's `recordHash` is the SHA-256 of its canonical JSON without
//! the `recordHash` field, and each `prevHash` points at the previous
//! record's hash. The genesis `prevHash` is SHA-256 of the empty input. On
//! disk the log is JSON Lines, one canonical record per line, so the bytes
//! that are hashed are exactly the bytes that are stored.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonical::to_canonical_bytes;
use crate::clock::Clock;
use crate::identity::{AccessToken, InvalidReason, TokenSource, TokenVerifier};
use crate::model::{digest_of, Digest, ParticipantId, Timestamp};

pub const SCOPE_CLEARING_APPEND: &str = "clearing:append";
pub const SCOPE_CLEARING_READ: &str = "clearing:read";

#[derive(Debug, Error)]
pub enum ClearingError {
    #[error("token rejected: {0}")]
    ScopeDenied(InvalidReason),
    #[error("actor {actor} does not match token subject {subject}")]
    ActorMismatch { actor: ParticipantId, subject: ParticipantId },
    #[error("audit log i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error("clearing house unavailable: {0}")]
    Unavailable(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RecordType {
    NegotiationEvent,
    AgreementRecorded,
    TransferEvent,
    AccessDenied,
}

impl RecordType {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordType::NegotiationEvent => "NegotiationEvent",
            RecordType::AgreementRecorded => "AgreementRecorded",
            RecordType::TransferEvent => "TransferEvent",
            RecordType::AccessDenied => "AccessDenied",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        [
            RecordType::NegotiationEvent,
            RecordType::AgreementRecorded,
            RecordType::TransferEvent,
            RecordType::AccessDenied,
        ]
        .into_iter()
        .find(|t| t.as_str() == raw)
    }
}

pub type Payload = BTreeMap<String, String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct AuditRecord {
    pub seq: u64,
    pub record_type: RecordType,
    pub actor: ParticipantId,
    pub subject_id: String,
    pub payload: Payload,
    pub timestamp: Timestamp,
    pub prev_hash: Digest,
    pub record_hash: Digest,
}

impl AuditRecord {
    /// Hash over every field except `recordHash`.
    pub fn compute_hash(&self) -> Digest {
        let mut v = serde_json::to_value(self).expect("audit record serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("recordHash");
        }
        digest_of(&to_canonical_bytes(&v).expect("audit record serializes"))
    }

    pub fn payload_value(&self, key: &str) -> Option<&str> {
        self.payload.get(key).map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ChainVerdict {
    pub valid: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub first_bad_seq: Option<u64>,
}

impl ChainVerdict {
    pub const VALID: ChainVerdict = ChainVerdict {
        valid: true,
        first_bad_seq: None,
    };

    fn bad(seq: u64) -> Self {
        ChainVerdict {
            valid: false,
            first_bad_seq: Some(seq),
        }
    }
}

pub fn genesis_hash() -> Digest {
    digest_of(&[])
}

/// Verifies a JSON Lines audit log byte-for-byte.
///
/// A line is good when it parses, re-serializes to exactly the same bytes,
/// carries the expected `seq`, links to its predecessor and its hash
/// recomputes.
pub fn verify_log_bytes(bytes: &[u8]) -> ChainVerdict {
    if bytes.is_empty() {
        return ChainVerdict::VALID;
    }
    let body = match bytes.strip_suffix(b"\n") {
        Some(b) => b,
        // a missing final newline means the last line was damaged
        None => bytes,
    };
    let mut prev = genesis_hash();
    let lines: Vec<&[u8]> = body.split(|b| *b == b'\n').collect();
    let unterminated = !bytes.ends_with(b"\n");
    for (i, line) in lines.iter().enumerate() {
        let seq = i as u64;
        if unterminated && i + 1 == lines.len() {
            return ChainVerdict::bad(seq);
        }
        let Ok(rec) = serde_json::from_slice::<AuditRecord>(line) else {
            return ChainVerdict::bad(seq);
        };
        let canonical = match to_canonical_bytes(&rec) {
            Ok(c) => c,
            Err(_) => return ChainVerdict::bad(seq),
        };
        if canonical != *line || rec.seq != seq || rec.prev_hash != prev || rec.compute_hash() != rec.record_hash {
            return ChainVerdict::bad(seq);
        }
        prev = rec.record_hash;
    }
    ChainVerdict::VALID
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RecordFilter {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub record_type: Option<RecordType>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub actor: Option<ParticipantId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_id: Option<String>,
    /// Inclusive `[from, to]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq_range: Option<(u64, u64)>,
}

impl RecordFilter {
    pub fn matches(&self, r: &AuditRecord) -> bool {
        self.record_type.is_none_or(|t| t == r.record_type)
            && self.actor.as_ref().is_none_or(|a| *a == r.actor)
            && self.subject_id.as_ref().is_none_or(|s| *s == r.subject_id)
            && self.seq_range.is_none_or(|(lo, hi)| lo <= r.seq && r.seq <= hi)
    }
}

struct Writer {
    file: Option<File>,
    next_seq: u64,
    last_hash: Digest,
}

#[derive(Default)]
struct Snapshot {
    records: Vec<AuditRecord>,
    lines: Vec<Vec<u8>>,
}

/// The federation's clearing house. Appends go through a single writer;
/// readers see a prefix-consistent snapshot.
pub struct ClearingHouse {
    writer: Mutex<Writer>,
    snapshot: RwLock<Snapshot>,
    path: Option<PathBuf>,
    verifier: TokenVerifier,
    clock: Arc<dyn Clock>,
}

impl ClearingHouse {
    /// Volatile clearing house (simulations and tests).
    pub fn in_memory(verifier: TokenVerifier, clock: Arc<dyn Clock>) -> Self {
        ClearingHouse {
            writer: Mutex::new(Writer {
                file: None,
                next_seq: 0,
                last_hash: genesis_hash(),
            }),
            snapshot: RwLock::new(Snapshot::default()),
            path: None,
            verifier,
            clock,
        }
    }

    /// Opens (or creates) `audit.log` inside `dir`, loading existing records.
    pub fn open(dir: &Path, verifier: TokenVerifier, clock: Arc<dyn Clock>) -> Result<Self, ClearingError> {
        fs::create_dir_all(dir)?;
        let path = dir.join("audit.log");
        let mut snap = Snapshot::default();
        if path.exists() {
            let bytes = fs::read(&path)?;
            for line in bytes.split(|b| *b == b'\n').filter(|l| !l.is_empty()) {
                if let Ok(rec) = serde_json::from_slice::<AuditRecord>(line) {
                    snap.records.push(rec);
                    snap.lines.push(line.to_vec());
                }
            }
        }
        let (next_seq, last_hash) = match snap.records.last() {
            Some(r) => (r.seq + 1, r.record_hash.clone()),
            None => (0, genesis_hash()),
        };
        let file = OpenOptions::new().create(true).append(true).open(&path)?;
        Ok(ClearingHouse {
            writer: Mutex::new(Writer {
                file: Some(file),
                next_seq,
                last_hash,
            }),
            snapshot: RwLock::new(snap),
            path: Some(path),
            verifier,
            clock,
        })
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn append(
        &self,
        record_type: RecordType,
        actor: &ParticipantId,
        subject_id: &str,
        payload: Payload,
        token: &AccessToken,
    ) -> Result<AuditRecord, ClearingError> {
        self.verifier
            .verify(token, SCOPE_CLEARING_APPEND)
            .into_result()
            .map_err(ClearingError::ScopeDenied)?;
        if token.subject != *actor {
            return Err(ClearingError::ActorMismatch {
                actor: actor.clone(),
                subject: token.subject.clone(),
            });
        }
        let mut w = self.writer.lock().expect("clearing writer lock");
        let mut rec = AuditRecord {
            seq: w.next_seq,
            record_type,
            actor: actor.clone(),
            subject_id: subject_id.to_string(),
            payload,
            timestamp: self.clock.now(),
            prev_hash: w.last_hash.clone(),
            record_hash: genesis_hash(),
        };
        rec.record_hash = rec.compute_hash();
        let line = to_canonical_bytes(&rec)?;
        if let Some(f) = w.file.as_mut() {
            let mut buf = line.clone();
            buf.push(b'\n');
            f.write_all(&buf)?;
            f.sync_data()?;
        }
        w.next_seq += 1;
        w.last_hash = rec.record_hash.clone();
        let mut snap = self.snapshot.write().expect("clearing snapshot lock");
        snap.records.push(rec.clone());
        snap.lines.push(line);
        Ok(rec)
    }

    /// The persisted log bytes (file contents, or the in-memory equivalent).
    pub fn export_log(&self) -> Result<Vec<u8>, ClearingError> {
        if let Some(p) = &self.path {
            return Ok(fs::read(p)?);
        }
        let snap = self.snapshot.read().expect("clearing snapshot lock");
        let mut out = Vec::new();
        for l in &snap.lines {
            out.extend_from_slice(l);
            out.push(b'\n');
        }
        Ok(out)
    }

    pub fn verify_chain(&self) -> ChainVerdict {
        match self.export_log() {
            Ok(bytes) => verify_log_bytes(&bytes),
            Err(_) => ChainVerdict::bad(0),
        }
    }

    pub fn len(&self) -> usize {
        self.snapshot.read().expect("clearing snapshot lock").records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn count_completed_transfers(&self, agreement_id: &str) -> u64 {
        self.snapshot
            .read()
            .expect("clearing snapshot lock")
            .records
            .iter()
            .filter(|r| {
                r.record_type == RecordType::TransferEvent
                    && r.payload_value("outcome") == Some("completed")
                    && r.payload_value("agreementId") == Some(agreement_id)
            })
            .count() as u64
    }

    pub fn query_records(&self, filter: &RecordFilter, token: &AccessToken) -> Result<Vec<AuditRecord>, ClearingError> {
        self.verifier
            .verify(token, SCOPE_CLEARING_READ)
            .into_result()
            .map_err(ClearingError::ScopeDenied)?;
        Ok(self.records_matching(filter))
    }

    /// Unauthenticated read for in-process inspection (harness reconciliation).
    pub fn records_matching(&self, filter: &RecordFilter) -> Vec<AuditRecord> {
        self.snapshot
            .read()
            .expect("clearing snapshot lock")
            .records
            .iter()
            .filter(|r| filter.matches(r))
            .cloned()
            .collect()
    }
}

/// A participant's handle on the clearing house. The actor is always the
/// participant the client belongs to.
pub trait ClearingClient: Send + Sync {
    fn append(&self, record_type: RecordType, subject_id: &str, payload: Payload) -> Result<AuditRecord, ClearingError>;
    fn completed_transfers(&self, agreement_id: &str) -> Result<u64, ClearingError>;
}

pub struct LocalClearingClient {
    house: Arc<ClearingHouse>,
    actor: ParticipantId,
    tokens: Arc<dyn TokenSource>,
}

impl LocalClearingClient {
    pub fn new(house: Arc<ClearingHouse>, actor: ParticipantId, tokens: Arc<dyn TokenSource>) -> Self {
        LocalClearingClient { house, actor, tokens }
    }
}

impl ClearingClient for LocalClearingClient {
    fn append(&self, record_type: RecordType, subject_id: &str, payload: Payload) -> Result<AuditRecord, ClearingError> {
        let token = self
            .tokens
            .token(&[SCOPE_CLEARING_APPEND])
            .map_err(|e| ClearingError::Unavailable(e.to_string()))?;
        self.house.append(record_type, &self.actor, subject_id, payload, &token)
    }

    fn completed_transfers(&self, agreement_id: &str) -> Result<u64, ClearingError> {
        Ok(self.house.count_completed_transfers(agreement_id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::LogicalClock;
    use crate::identity::{issue_credential, issue_token, KeyPair, TrustStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use sha2::{Digest as _, Sha256};

    struct Fx {
        clock: LogicalClock,
        verifier: TokenVerifier,
        actor: ParticipantId,
        append: AccessToken,
        read: AccessToken,
    }

    fn fx() -> Fx {
        let clock = LogicalClock::default();
        let trust = TrustStore::new();
        let anchor = ParticipantId::parse("did:dali:dali:federator").unwrap();
        let ak = KeyPair::from_seed([1; 32]);
        trust.register_anchor(anchor.clone(), ak.public_key());
        let sk = KeyPair::from_seed([2; 32]);
        let actor = ParticipantId::parse("did:dali:eur:testbed").unwrap();
        let cred = issue_credential(&trust, &anchor, &ak, actor.clone(), BTreeMap::new(), 3600, clock.now()).unwrap();
        let tok = |s: &str| issue_token(&sk, &cred, &trust, "clearing", vec![s.into()], 3000, clock.now()).unwrap();
        Fx {
            verifier: TokenVerifier::new(sk.public_key(), Arc::new(clock.clone())),
            actor,
            append: tok(SCOPE_CLEARING_APPEND),
            read: tok(SCOPE_CLEARING_READ),
            clock,
        }
    }

    fn house(f: &Fx) -> ClearingHouse {
        ClearingHouse::in_memory(f.verifier.clone(), Arc::new(f.clock.clone()))
    }

    fn payload(pairs: &[(&str, &str)]) -> Payload {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    fn fill(h: &ClearingHouse, f: &Fx, n: usize) {
        for i in 0..n {
            h.append(
                RecordType::NegotiationEvent,
                &f.actor,
                &format!("neg-{i}"),
                payload(&[("state", "REQUESTED"), ("i", &i.to_string())]),
                &f.append,
            )
            .unwrap();
        }
    }

    #[test]
    fn genesis_and_linking() {
        let f = fx();
        let h = house(&f);
        let r0 = h
            .append(RecordType::NegotiationEvent, &f.actor, "neg-1", Payload::new(), &f.append)
            .unwrap();
        assert_eq!(r0.seq, 0);
        assert_eq!(
            r0.prev_hash.hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        f.clock.advance(5);
        let r1 = h
            .append(RecordType::AgreementRecorded, &f.actor, "neg-1", payload(&[("agreementId", "ag-1")]), &f.append)
            .unwrap();
        assert_eq!(r1.seq, 1);
        assert_eq!(r1.prev_hash, r0.record_hash);

        // recompute both hashes with a separately configured sha256 over the
        // stored line minus its recordHash member
        let log = h.export_log().unwrap();
        let lines: Vec<&[u8]> = log.split(|b| *b == b'\n').filter(|l| !l.is_empty()).collect();
        for (line, rec) in lines.iter().zip([&r0, &r1]) {
            let text = std::str::from_utf8(line).unwrap();
            let marker = ",\"recordHash\":";
            let start = text.find(marker).unwrap();
            let end = start + text[start + 1..].find('}').unwrap() + 2;
            let stripped = format!("{}{}", &text[..start], &text[end..]);
            assert_eq!(hex::encode(Sha256::digest(stripped.as_bytes())), rec.record_hash.hex());
        }
    }

    #[test]
    fn append_authorization() {
        let f = fx();
        let h = house(&f);
        let other = ParticipantId::parse("did:dali:isi:testbed").unwrap();
        assert!(matches!(
            h.append(RecordType::TransferEvent, &other, "t", Payload::new(), &f.append),
            Err(ClearingError::ActorMismatch { .. })
        ));
        assert!(matches!(
            h.append(RecordType::TransferEvent, &f.actor, "t", Payload::new(), &f.read),
            Err(ClearingError::ScopeDenied(InvalidReason::MissingScope))
        ));
        assert!(h.is_empty());
    }

    #[test]
    fn verify_examples() {
        let f = fx();
        let h = house(&f);
        assert_eq!(h.verify_chain(), ChainVerdict::VALID);
        fill(&h, &f, 100);
        assert_eq!(h.verify_chain(), ChainVerdict::VALID);
    }

    #[test]
    fn tampering_on_disk_is_located() {
        let f = fx();
        let dir = tempfile::tempdir().unwrap();
        let h = ClearingHouse::open(dir.path(), f.verifier.clone(), Arc::new(f.clock.clone())).unwrap();
        fill(&h, &f, 100);
        assert!(h.verify_chain().valid);
        let path = h.log_path().unwrap().to_path_buf();
        let original = fs::read(&path).unwrap();

        // flip a byte inside record 42's payload
        let lines: Vec<usize> = std::iter::once(0)
            .chain(original.iter().enumerate().filter(|(_, b)| **b == b'\n').map(|(i, _)| i + 1))
            .collect();
        let line42 = &original[lines[42]..lines[43]];
        let offset = lines[42] + line42.windows(4).position(|w| w == b"REQU").unwrap();
        let mut bytes = original.clone();
        bytes[offset] ^= 0x01;
        fs::write(&path, &bytes).unwrap();
        assert_eq!(
            h.verify_chain(),
            ChainVerdict {
                valid: false,
                first_bad_seq: Some(42)
            }
        );
        fs::write(&path, &original).unwrap();
        assert!(h.verify_chain().valid);
    }

    #[test]
    fn random_mutations_never_escape() {
        let f = fx();
        let h = house(&f);
        fill(&h, &f, 20);
        let log = h.export_log().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let pos = rng.gen_range(0..log.len());
            let mut bytes = log.clone();
            let delta: u8 = rng.gen_range(1..=255);
            bytes[pos] ^= delta;
            let line_index = log[..pos].iter().filter(|b| **b == b'\n').count() as u64;
            let v = verify_log_bytes(&bytes);
            assert!(!v.valid);
            assert!(v.first_bad_seq.unwrap() <= line_index);
        }
    }

    #[test]
    fn reopen_continues_chain() {
        let f = fx();
        let dir = tempfile::tempdir().unwrap();
        {
            let h = ClearingHouse::open(dir.path(), f.verifier.clone(), Arc::new(f.clock.clone())).unwrap();
            fill(&h, &f, 3);
        }
        let h = ClearingHouse::open(dir.path(), f.verifier.clone(), Arc::new(f.clock.clone())).unwrap();
        assert_eq!(h.len(), 3);
        fill(&h, &f, 2);
        assert_eq!(h.len(), 5);
        assert!(h.verify_chain().valid);
    }

    #[test]
    fn usage_counting() {
        let f = fx();
        let h = house(&f);
        assert_eq!(h.count_completed_transfers("ag-1"), 0);
        for (i, (ag, outcome)) in [
            ("ag-1", "completed"),
            ("ag-1", "completed"),
            ("ag-1", "terminated"),
            ("ag-1", "completed"),
            ("ag-2", "completed"),
        ]
        .iter()
        .enumerate()
        {
            h.append(
                RecordType::TransferEvent,
                &f.actor,
                &format!("tr-{i}"),
                payload(&[("agreementId", ag), ("outcome", outcome)]),
                &f.append,
            )
            .unwrap();
        }
        h.append(
            RecordType::NegotiationEvent,
            &f.actor,
            "x",
            payload(&[("agreementId", "ag-1"), ("outcome", "completed")]),
            &f.append,
        )
        .unwrap();
        assert_eq!(h.count_completed_transfers("ag-1"), 3);
        assert_eq!(h.count_completed_transfers("ag-2"), 1);
        assert_eq!(h.count_completed_transfers("ag-3"), 0);
    }

    #[test]
    fn query_examples() {
        let f = fx();
        let h = house(&f);
        fill(&h, &f, 10);
        let all = h.query_records(&RecordFilter::default(), &f.read).unwrap();
        assert_eq!(all.len(), 10);
        let five = h
            .query_records(
                &RecordFilter {
                    seq_range: Some((5, 5)),
                    ..Default::default()
                },
                &f.read,
            )
            .unwrap();
        assert_eq!(five.len(), 1);
        assert_eq!(five[0].seq, 5);
        let by_subject = h
            .query_records(
                &RecordFilter {
                    subject_id: Some("neg-3".into()),
                    record_type: Some(RecordType::NegotiationEvent),
                    ..Default::default()
                },
                &f.read,
            )
            .unwrap();
        assert_eq!(by_subject.len(), 1);
        assert!(matches!(
            h.query_records(&RecordFilter::default(), &f.append),
            Err(ClearingError::ScopeDenied(_))
        ));

        // brute-force scan over random filters
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let lo = rng.gen_range(0..12);
            let hi = rng.gen_range(0..12);
            let filter = RecordFilter {
                record_type: rng.gen_bool(0.3).then_some(RecordType::NegotiationEvent),
                actor: None,
                subject_id: rng.gen_bool(0.3).then(|| format!("neg-{}", rng.gen_range(0..12))),
                seq_range: rng.gen_bool(0.5).then_some((lo, hi)),
            };
            let got = h.query_records(&filter, &f.read).unwrap();
            let mut expected = Vec::new();
            for r in &all {
                let mut keep = true;
                if let Some(t) = filter.record_type {
                    keep &= r.record_type == t;
                }
                if let Some(s) = &filter.subject_id {
                    keep &= &r.subject_id == s;
                }
                if let Some((a, b)) = filter.seq_range {
                    keep &= r.seq >= a && r.seq <= b;
                }
                if keep {
                    expected.push(r.clone());
                }
            }
            assert_eq!(got, expected);
        }
    }

    #[test]
    fn concurrent_appends_are_gapless() {
        let f = fx();
        let h = Arc::new(house(&f));
        let threads: Vec<_> = (0..8)
            .map(|t| {
                let h = h.clone();
                let actor = f.actor.clone();
                let tok = f.append.clone();
                std::thread::spawn(move || {
                    for i in 0..100 {
                        h.append(
                            RecordType::TransferEvent,
                            &actor,
                            &format!("w{t}-{i}"),
                            Payload::new(),
                            &tok,
                        )
                        .unwrap();
                    }
                })
            })
            .collect();
        for t in threads {
            t.join().unwrap();
        }
        let recs = h.records_matching(&RecordFilter::default());
        assert_eq!(recs.len(), 800);
        for (i, r) in recs.iter().enumerate() {
            assert_eq!(r.seq, i as u64);
        }
        let subjects: std::collections::BTreeSet<_> = recs.iter().map(|r| r.subject_id.clone()).collect();
        assert_eq!(subjects.len(), 800);
        assert!(h.verify_chain().valid);
    }
}
