//! Data lake: content-addressed object store, dataset manifests, placement
//! and the extract/load/transform pipeline backed by simulated testbeds.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::model::{digest_of, AssetKind, Digest, Offer, ParticipantId, SelfDescription, SelfDescriptionParts, Temperature, Timestamp};
use crate::policy::{Action, Constraint, LeftOperand, Operator, Rule, UsagePolicy};

pub const DEFAULT_QUOTA_BYTES: u64 = 1 << 30;
pub const STEP_NORMALIZE_HEADERS: &str = "normalize-headers";
pub const STEP_DROP_INCOMPLETE_ROWS: &str = "drop-incomplete-rows";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum LakeError {
    #[error("backend {backend} is full ({used} of {quota} bytes used, {needed} more requested)")]
    StorageFull { backend: BackendKind, used: u64, quota: u64, needed: u64 },
    #[error("storage failure: {0}")]
    IoFailure(String),
    #[error("{0} assets have no payload backend")]
    NoPayloadBackend(AssetKind),
    #[error("no testbed offers any of the wanted capabilities")]
    NoCapableTestbed,
    #[error("malformed CSV: {0}")]
    MalformedCsv(String),
    #[error("object {0} not found")]
    NotFound(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("publication failed: {0}")]
    PublishFailed(String),
}

impl From<std::io::Error> for LakeError {
    fn from(e: std::io::Error) -> Self {
        LakeError::IoFailure(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    DataLake,
    MlModel,
    Application,
    Metadata,
}

impl BackendKind {
    pub const ALL: [BackendKind; 4] = [
        BackendKind::DataLake,
        BackendKind::MlModel,
        BackendKind::Application,
        BackendKind::Metadata,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::DataLake => "data-lake",
            BackendKind::MlModel => "ml-model",
            BackendKind::Application => "application",
            BackendKind::Metadata => "metadata",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.as_str() == raw)
    }
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

pub fn place_asset(kind: AssetKind) -> Result<BackendKind, LakeError> {
    match kind {
        AssetKind::Dataset => Ok(BackendKind::DataLake),
        AssetKind::MlModel | AssetKind::RanModel => Ok(BackendKind::MlModel),
        AssetKind::Application => Ok(BackendKind::Application),
        AssetKind::Service => Err(LakeError::NoPayloadBackend(kind)),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct StoredObject {
    pub digest: Digest,
    pub size_bytes: u64,
    pub backend: BackendKind,
}

enum Blobs {
    Memory(BTreeMap<(BackendKind, String), Arc<Vec<u8>>>),
    Disk(PathBuf),
}

struct StoreState {
    blobs: Blobs,
    used: BTreeMap<BackendKind, u64>,
    sizes: BTreeMap<(BackendKind, String), u64>,
}

/// Content-addressed blobs, partitioned by backend, each with a byte quota.
pub struct ObjectStore {
    quota: u64,
    state: Mutex<StoreState>,
}

impl ObjectStore {
    pub fn in_memory(quota: u64) -> Self {
        ObjectStore {
            quota,
            state: Mutex::new(StoreState {
                blobs: Blobs::Memory(BTreeMap::new()),
                used: BTreeMap::new(),
                sizes: BTreeMap::new(),
            }),
        }
    }

    /// Opens (or creates) `root/objects/<backend>/<2 hex>/<digest>`.
    pub fn open(root: &Path, quota: u64) -> Result<Self, LakeError> {
        let objects = root.join("objects");
        let mut used = BTreeMap::new();
        let mut sizes = BTreeMap::new();
        for backend in BackendKind::ALL {
            let dir = objects.join(backend.as_str());
            fs::create_dir_all(&dir)?;
            for shard in fs::read_dir(&dir)? {
                let shard = shard?;
                if !shard.file_type()?.is_dir() {
                    continue;
                }
                for obj in fs::read_dir(shard.path())? {
                    let obj = obj?;
                    let name = obj.file_name().to_string_lossy().into_owned();
                    if name.len() != 64 {
                        continue;
                    }
                    let len = obj.metadata()?.len();
                    *used.entry(backend).or_insert(0) += len;
                    sizes.insert((backend, name), len);
                }
            }
        }
        Ok(ObjectStore {
            quota,
            state: Mutex::new(StoreState {
                blobs: Blobs::Disk(objects),
                used,
                sizes,
            }),
        })
    }

    fn blob_path(objects: &Path, backend: BackendKind, hex: &str) -> PathBuf {
        objects.join(backend.as_str()).join(&hex[..2]).join(hex)
    }

    pub fn put_object(&self, bytes: &[u8], backend: BackendKind) -> Result<StoredObject, LakeError> {
        let digest = digest_of(bytes);
        let size = bytes.len() as u64;
        let key = (backend, digest.hex().to_string());
        let mut st = self.state.lock().expect("object store lock");
        if st.sizes.contains_key(&key) {
            return Ok(StoredObject { digest, size_bytes: size, backend });
        }
        let used = st.used.get(&backend).copied().unwrap_or(0);
        if used + size > self.quota {
            return Err(LakeError::StorageFull {
                backend,
                used,
                quota: self.quota,
                needed: size,
            });
        }
        match &mut st.blobs {
            Blobs::Memory(m) => {
                m.insert(key.clone(), Arc::new(bytes.to_vec()));
            }
            Blobs::Disk(objects) => {
                let path = Self::blob_path(objects, backend, digest.hex());
                let dir = path.parent().expect("shard dir");
                fs::create_dir_all(dir)?;
                let tmp = dir.join(format!(".{}.tmp", digest.hex()));
                let mut f = fs::File::create(&tmp)?;
                f.write_all(bytes)?;
                f.sync_data()?;
                fs::rename(&tmp, &path)?;
            }
        }
        *st.used.entry(backend).or_insert(0) += size;
        st.sizes.insert(key, size);
        Ok(StoredObject { digest, size_bytes: size, backend })
    }

    pub fn get_object_in(&self, backend: BackendKind, digest: &Digest) -> Result<Vec<u8>, LakeError> {
        let key = (backend, digest.hex().to_string());
        let st = self.state.lock().expect("object store lock");
        if !st.sizes.contains_key(&key) {
            return Err(LakeError::NotFound(digest.hex().to_string()));
        }
        match &st.blobs {
            Blobs::Memory(m) => Ok(m[&key].as_ref().clone()),
            Blobs::Disk(objects) => Ok(fs::read(Self::blob_path(objects, backend, digest.hex()))?),
        }
    }

    /// Looks the digest up in every backend.
    pub fn get_object(&self, digest: &Digest) -> Result<Vec<u8>, LakeError> {
        for backend in BackendKind::ALL {
            if self.contains(backend, digest) {
                return self.get_object_in(backend, digest);
            }
        }
        Err(LakeError::NotFound(digest.hex().to_string()))
    }

    pub fn contains(&self, backend: BackendKind, digest: &Digest) -> bool {
        self.state
            .lock()
            .expect("object store lock")
            .sizes
            .contains_key(&(backend, digest.hex().to_string()))
    }

    pub fn used_bytes(&self, backend: BackendKind) -> u64 {
        self.state
            .lock()
            .expect("object store lock")
            .used
            .get(&backend)
            .copied()
            .unwrap_or(0)
    }

    pub fn object_count(&self) -> usize {
        self.state.lock().expect("object store lock").sizes.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldType {
    Integer,
    Number,
    Timestamp,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SchemaField {
    pub name: String,
    pub value_type: FieldType,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataTemperature {
    Cold,
    Hot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Provenance {
    pub temperature: DataTemperature,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub testbed_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub experiment_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", try_from = "RawManifest")]
pub struct DatasetManifest {
    pub asset_id: String,
    pub provider_id: ParticipantId,
    pub object_digest: Digest,
    pub row_count: u64,
    pub schema_fields: Vec<SchemaField>,
    pub provenance: Provenance,
    pub transform_log: Vec<String>,
    /// Set when the pipeline published the dataset with the default offer.
    #[serde(default)]
    pub auto_published: bool,
}

#[derive(Deserialize)]
#[serde(rename_all = "camelCase")]
struct RawManifest {
    asset_id: String,
    provider_id: ParticipantId,
    object_digest: Digest,
    row_count: u64,
    schema_fields: Vec<SchemaField>,
    provenance: Provenance,
    transform_log: Vec<String>,
    #[serde(default)]
    auto_published: bool,
}

impl TryFrom<RawManifest> for DatasetManifest {
    type Error = String;

    fn try_from(r: RawManifest) -> Result<Self, String> {
        let m = DatasetManifest {
            asset_id: r.asset_id,
            provider_id: r.provider_id,
            object_digest: r.object_digest,
            row_count: r.row_count,
            schema_fields: r.schema_fields,
            provenance: r.provenance,
            transform_log: r.transform_log,
            auto_published: r.auto_published,
        };
        m.check()?;
        Ok(m)
    }
}

impl DatasetManifest {
    pub fn check(&self) -> Result<(), String> {
        if self.asset_id.is_empty() {
            return Err("assetId must be non-empty".into());
        }
        if self.provenance.temperature == DataTemperature::Hot
            && (self.provenance.testbed_id.is_none() || self.provenance.experiment_seed.is_none())
        {
            return Err("hot manifests need testbedId and experimentSeed".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TestbedProfile {
    pub testbed_id: String,
    pub capabilities: BTreeSet<String>,
    pub cost_weight: f64,
}

impl TestbedProfile {
    pub fn new(id: &str, capabilities: &[&str], cost_weight: f64) -> Result<Self, LakeError> {
        let p = TestbedProfile {
            testbed_id: id.into(),
            capabilities: capabilities.iter().map(|c| c.to_string()).collect(),
            cost_weight,
        };
        p.check()?;
        Ok(p)
    }

    pub fn check(&self) -> Result<(), LakeError> {
        if self.capabilities.is_empty() {
            return Err(LakeError::InvalidRequest(format!("testbed {} has no capabilities", self.testbed_id)));
        }
        if !(self.cost_weight.is_finite() && self.cost_weight > 0.0) {
            return Err(LakeError::InvalidRequest(format!(
                "testbed {} needs a positive cost weight",
                self.testbed_id
            )));
        }
        Ok(())
    }

    pub fn score(&self, wanted: &BTreeSet<String>) -> f64 {
        self.capabilities.intersection(wanted).count() as f64 / self.cost_weight
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct DataRequest {
    pub wanted_capabilities: BTreeSet<String>,
    pub sample_count: u32,
    pub purpose: String,
}

impl DataRequest {
    pub fn new(wanted: &[&str], sample_count: u32, purpose: &str) -> Self {
        DataRequest {
            wanted_capabilities: wanted.iter().map(|c| c.to_string()).collect(),
            sample_count,
            purpose: purpose.into(),
        }
    }

    pub fn check(&self) -> Result<(), LakeError> {
        if self.sample_count == 0 {
            return Err(LakeError::InvalidRequest("sampleCount must be at least 1".into()));
        }
        Ok(())
    }
}

pub fn select_testbed<'a>(req: &DataRequest, profiles: &'a [TestbedProfile]) -> Result<&'a TestbedProfile, LakeError> {
    let mut best: Option<(&TestbedProfile, f64)> = None;
    for p in profiles {
        let s = p.score(&req.wanted_capabilities);
        if s <= 0.0 {
            continue;
        }
        best = match best {
            Some((b, bs)) if bs > s || (bs == s && b.testbed_id <= p.testbed_id) => Some((b, bs)),
            _ => Some((p, s)),
        };
    }
    best.map(|(p, _)| p).ok_or(LakeError::NoCapableTestbed)
}

/// Header as emitted by the simulated testbed firmware, before normalization.
pub fn metric_column(capability: &str) -> String {
    match capability {
        "mmWave" => "Beam-RSRP-dBm".into(),
        "sub-6" => "RSRP-dBm".into(),
        "mobility" => "UE-Speed-kmh".into(),
        "urban-macro" => "Path-Loss-dB".into(),
        "massive-mimo" => "Spectral-Efficiency".into(),
        "ran-slicing" => "Slice-Throughput-Mbps".into(),
        "energy" => "Power-W".into(),
        other => format!("{other}-Value"),
    }
}

fn metric_range(capability: &str) -> (f64, f64) {
    match capability {
        "mmWave" => (-120.0, -60.0),
        "sub-6" => (-110.0, -50.0),
        "mobility" => (0.0, 130.0),
        "urban-macro" => (80.0, 160.0),
        "massive-mimo" => (0.5, 30.0),
        "ran-slicing" => (1.0, 900.0),
        "energy" => (50.0, 800.0),
        _ => (0.0, 1.0),
    }
}

pub const EXPERIMENT_EPOCH: Timestamp = Timestamp::from_unix(1_767_225_600);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Experiment {
    pub payload: Vec<u8>,
    pub row_count: u64,
    /// Capabilities that produced a metric column.
    pub covered: BTreeSet<String>,
}

/// Deterministic synthetic telemetry for `(testbed, req, seed)`.
pub fn run_experiment(testbed: &TestbedProfile, req: &DataRequest, seed: u64) -> Experiment {
    let mut h = Sha256::new();
    h.update(testbed.testbed_id.as_bytes());
    h.update([0]);
    h.update(seed.to_be_bytes());
    let mut rng = ChaCha8Rng::from_seed(h.finalize().into());

    let covered: BTreeSet<String> = testbed
        .capabilities
        .intersection(&req.wanted_capabilities)
        .cloned()
        .collect();
    let mut header = vec![" Timestamp".to_string(), "Cell-ID ".to_string()];
    header.extend(covered.iter().map(|c| metric_column(c)));
    let mut out = header.join(",");
    out.push_str("\r\n");
    for i in 0..req.sample_count {
        let ts = EXPERIMENT_EPOCH.plus_secs(i as i64).to_iso();
        let cell = rng.gen_range(1..=16u32);
        out.push_str(&format!("{ts},cell-{cell:02}"));
        for c in &covered {
            let (lo, hi) = metric_range(c);
            let v: f64 = rng.gen_range(lo..hi);
            out.push_str(&format!(",{v:.2}"));
        }
        out.push_str("\r\n");
    }
    Experiment {
        payload: out.into_bytes(),
        row_count: req.sample_count as u64,
        covered,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Transformed {
    pub payload: Vec<u8>,
    pub header: Vec<String>,
    pub row_count: u64,
    pub transform_log: Vec<String>,
}

fn read_table(raw: &[u8]) -> Result<(Vec<String>, Vec<Vec<String>>), LakeError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(raw);
    let mut rows = rdr.records();
    let header: Vec<String> = match rows.next() {
        Some(r) => r.map_err(|e| LakeError::MalformedCsv(e.to_string()))?.iter().map(str::to_string).collect(),
        None => return Err(LakeError::MalformedCsv("missing header".into())),
    };
    let mut body = Vec::new();
    for r in rows {
        let r = r.map_err(|e| LakeError::MalformedCsv(e.to_string()))?;
        body.push(r.iter().map(str::to_string).collect());
    }
    Ok((header, body))
}

fn write_table(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

pub fn transform(raw: &[u8]) -> Result<Transformed, LakeError> {
    let (header, rows) = read_table(raw)?;
    let header: Vec<String> = header.iter().map(|h| h.trim().to_lowercase()).collect();
    let kept: Vec<Vec<String>> = rows
        .into_iter()
        .filter(|r| r.iter().all(|f| !f.trim().is_empty()))
        .collect();
    Ok(Transformed {
        payload: write_table(&header, &kept),
        row_count: kept.len() as u64,
        header,
        transform_log: vec![STEP_NORMALIZE_HEADERS.into(), STEP_DROP_INCOMPLETE_ROWS.into()],
    })
}

fn infer_type(values: impl Iterator<Item = String> + Clone) -> FieldType {
    let all = |f: &dyn Fn(&str) -> bool| values.clone().all(|v| f(&v));
    if all(&|v| v.parse::<i64>().is_ok()) {
        FieldType::Integer
    } else if all(&|v| v.parse::<f64>().is_ok()) {
        FieldType::Number
    } else if all(&|v| Timestamp::parse(v).is_ok()) {
        FieldType::Timestamp
    } else {
        FieldType::Text
    }
}

/// Column names and inferred value types of a CSV payload.
pub fn infer_schema(payload: &[u8]) -> Result<(Vec<SchemaField>, u64), LakeError> {
    let (header, rows) = read_table(payload)?;
    let fields = header
        .iter()
        .enumerate()
        .map(|(i, name)| SchemaField {
            name: name.clone(),
            value_type: if rows.is_empty() {
                FieldType::Text
            } else {
                infer_type(rows.iter().map(move |r| r[i].clone()))
            },
        })
        .collect();
    Ok((fields, rows.len() as u64))
}

/// Object store plus the manifest registry (`manifests/<assetId>.json`).
pub struct DataLake {
    store: ObjectStore,
    manifest_dir: Option<PathBuf>,
    manifests: RwLock<BTreeMap<String, DatasetManifest>>,
}

impl DataLake {
    pub fn in_memory() -> Self {
        DataLake {
            store: ObjectStore::in_memory(DEFAULT_QUOTA_BYTES),
            manifest_dir: None,
            manifests: RwLock::new(BTreeMap::new()),
        }
    }

    pub fn open(root: &Path, quota: u64) -> Result<Self, LakeError> {
        let store = ObjectStore::open(root, quota)?;
        let dir = root.join("manifests");
        fs::create_dir_all(&dir)?;
        let mut manifests = BTreeMap::new();
        for f in fs::read_dir(&dir)? {
            let path = f?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            let m: DatasetManifest =
                serde_json::from_slice(&fs::read(&path)?).map_err(|e| LakeError::IoFailure(e.to_string()))?;
            manifests.insert(m.asset_id.clone(), m);
        }
        Ok(DataLake {
            store,
            manifest_dir: Some(dir),
            manifests: RwLock::new(manifests),
        })
    }

    pub fn store(&self) -> &ObjectStore {
        &self.store
    }

    pub fn register_manifest(&self, m: DatasetManifest) -> Result<(), LakeError> {
        m.check().map_err(LakeError::InvalidRequest)?;
        if !m.asset_id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)) || m.asset_id.starts_with('.') {
            return Err(LakeError::InvalidRequest(format!("asset id {:?} is not a safe file name", m.asset_id)));
        }
        let mut manifests = self.manifests.write().expect("manifest lock");
        if let Some(dir) = &self.manifest_dir {
            let body = serde_json::to_vec_pretty(&m).map_err(|e| LakeError::IoFailure(e.to_string()))?;
            let tmp = dir.join(format!(".{}.tmp", m.asset_id));
            fs::write(&tmp, body)?;
            fs::rename(&tmp, dir.join(format!("{}.json", m.asset_id)))?;
        }
        manifests.insert(m.asset_id.clone(), m);
        Ok(())
    }

    pub fn manifest(&self, asset_id: &str) -> Option<DatasetManifest> {
        self.manifests.read().expect("manifest lock").get(asset_id).cloned()
    }

    pub fn manifests(&self) -> Vec<DatasetManifest> {
        self.manifests.read().expect("manifest lock").values().cloned().collect()
    }

    /// Stores an at-rest CSV dataset as-is and records a cold manifest.
    pub fn store_cold_dataset(
        &self,
        asset_id: &str,
        provider: &ParticipantId,
        csv: &[u8],
    ) -> Result<DatasetManifest, LakeError> {
        let (schema_fields, row_count) = infer_schema(csv)?;
        let obj = self.store.put_object(csv, BackendKind::DataLake)?;
        let m = DatasetManifest {
            asset_id: asset_id.into(),
            provider_id: provider.clone(),
            object_digest: obj.digest,
            row_count,
            schema_fields,
            provenance: Provenance {
                temperature: DataTemperature::Cold,
                testbed_id: None,
                experiment_seed: None,
            },
            transform_log: Vec::new(),
            auto_published: false,
        };
        self.register_manifest(m.clone())?;
        Ok(m)
    }
}

/// Read side of the catalogue, as seen by the pipeline.
pub trait DatasetDirectory: Send + Sync {
    fn datasets(&self) -> Result<Vec<SelfDescription>, String>;
}

/// Publishes a freshly ingested dataset on behalf of a testbed provider.
pub trait AssetPublisher: Send + Sync {
    fn publish(&self, sd: SelfDescription) -> Result<(), String>;
}

pub struct TestbedAdapter {
    pub provider: ParticipantId,
    pub profile: TestbedProfile,
    pub publisher: Arc<dyn AssetPublisher>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IngestPath {
    Cold,
    Hot,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct IngestOutcome {
    pub path: IngestPath,
    pub manifest: DatasetManifest,
    /// Raw experiment object (hot path only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_digest: Option<Digest>,
}

/// Purpose the auto-published default offer is restricted to.
pub const DEFAULT_OFFER_PURPOSE: &str = "research";

pub fn research_only_policy() -> UsagePolicy {
    UsagePolicy {
        permissions: [Action::Use, Action::Transfer]
            .into_iter()
            .map(|a| Rule::with(a, vec![Constraint::new(LeftOperand::Purpose, Operator::Eq, DEFAULT_OFFER_PURPOSE)]))
            .collect(),
        prohibitions: vec![Rule::unconditional(Action::ReShare)],
    }
}

/// Parses the comma-separated `capabilities` metadata value.
pub fn parse_capabilities(raw: &str) -> BTreeSet<String> {
    raw.split(',').map(str::trim).filter(|c| !c.is_empty()).map(str::to_string).collect()
}

pub struct Pipeline {
    lake: Arc<DataLake>,
    directory: Arc<dyn DatasetDirectory>,
    testbeds: Vec<TestbedAdapter>,
    experiments: AtomicU64,
    created_at: Timestamp,
}

impl Pipeline {
    pub fn new(lake: Arc<DataLake>, directory: Arc<dyn DatasetDirectory>, testbeds: Vec<TestbedAdapter>) -> Self {
        Pipeline {
            lake,
            directory,
            testbeds,
            experiments: AtomicU64::new(0),
            created_at: EXPERIMENT_EPOCH,
        }
    }

    pub fn experiments_run(&self) -> u64 {
        self.experiments.load(Ordering::SeqCst)
    }

    pub fn lake(&self) -> &Arc<DataLake> {
        &self.lake
    }

    pub fn profiles(&self) -> Vec<TestbedProfile> {
        self.testbeds.iter().map(|t| t.profile.clone()).collect()
    }

    fn find_cold(&self, req: &DataRequest) -> Result<Option<DatasetManifest>, LakeError> {
        let mut sds = self.directory.datasets().map_err(LakeError::IoFailure)?;
        sds.sort_by(|a, b| (a.asset_id(), a.provider_id()).cmp(&(b.asset_id(), b.provider_id())));
        for sd in sds {
            if sd.kind() != AssetKind::Dataset {
                continue;
            }
            let caps = sd.metadata().get("capabilities").map(|c| parse_capabilities(c)).unwrap_or_default();
            if !req.wanted_capabilities.is_subset(&caps) {
                continue;
            }
            if let Some(m) = self.lake.manifest(sd.asset_id()) {
                if m.provider_id == *sd.provider_id() && m.row_count >= req.sample_count as u64 {
                    return Ok(Some(m));
                }
            }
        }
        Ok(None)
    }

    pub fn ingest(&self, req: &DataRequest, seed: u64) -> Result<IngestOutcome, LakeError> {
        req.check()?;
        if let Some(manifest) = self.find_cold(req)? {
            return Ok(IngestOutcome {
                path: IngestPath::Cold,
                manifest,
                raw_digest: None,
            });
        }
        let profiles = self.profiles();
        let chosen = select_testbed(req, &profiles)?;
        let adapter = self
            .testbeds
            .iter()
            .find(|t| t.profile.testbed_id == chosen.testbed_id)
            .expect("selected profile comes from an adapter");

        let exp = run_experiment(&adapter.profile, req, seed);
        self.experiments.fetch_add(1, Ordering::SeqCst);
        let raw = self.lake.store().put_object(&exp.payload, BackendKind::DataLake)?;
        let cleaned = transform(&exp.payload)?;
        let stored = self.lake.store().put_object(&cleaned.payload, BackendKind::DataLake)?;
        let (schema_fields, row_count) = infer_schema(&cleaned.payload)?;

        let asset_id = format!("hot-{}-{}", adapter.profile.testbed_id, &stored.digest.hex()[..12]);
        let manifest = DatasetManifest {
            asset_id: asset_id.clone(),
            provider_id: adapter.provider.clone(),
            object_digest: stored.digest.clone(),
            row_count,
            schema_fields,
            provenance: Provenance {
                temperature: DataTemperature::Hot,
                testbed_id: Some(adapter.profile.testbed_id.clone()),
                experiment_seed: Some(seed),
            },
            transform_log: cleaned.transform_log,
            auto_published: true,
        };
        self.lake.register_manifest(manifest.clone())?;

        let covered: Vec<&str> = exp.covered.iter().map(String::as_str).collect();
        let band = if exp.covered.contains("mmWave") { "mmWave" } else { "sub-6" };
        let metadata: BTreeMap<String, String> = [
            ("frequency-band", band.to_string()),
            ("testbed-origin", adapter.profile.testbed_id.clone()),
            ("sample-count", row_count.to_string()),
            ("capabilities", covered.join(",")),
            ("description", format!("Generated on demand (seed {seed})")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let sd = SelfDescription::new(SelfDescriptionParts {
            asset_id,
            provider_id: adapter.provider.clone(),
            kind: AssetKind::Dataset,
            title: format!("{} telemetry: {}", adapter.profile.testbed_id, covered.join(", ")),
            metadata,
            offers: vec![Offer {
                offer_id: "research-only".into(),
                policy: research_only_policy(),
                license_tag: "research-only".into(),
            }],
            content_digest: Some(stored.digest),
            temperature: Temperature::Cold,
            created_at: self.created_at,
        })
        .map_err(|e| LakeError::PublishFailed(e.to_string()))?;
        adapter.publisher.publish(sd).map_err(LakeError::PublishFailed)?;

        Ok(IngestOutcome {
            path: IngestPath::Hot,
            manifest,
            raw_digest: Some(raw.digest),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop, prop_assert_eq, proptest, ProptestConfig};

    #[test]
    fn placement() {
        assert_eq!(place_asset(AssetKind::MlModel), Ok(BackendKind::MlModel));
        assert_eq!(place_asset(AssetKind::Dataset), Ok(BackendKind::DataLake));
        assert_eq!(place_asset(AssetKind::RanModel), Ok(BackendKind::MlModel));
        assert_eq!(place_asset(AssetKind::Application), Ok(BackendKind::Application));
        assert_eq!(
            place_asset(AssetKind::Service),
            Err(LakeError::NoPayloadBackend(AssetKind::Service))
        );
    }

    #[test]
    fn put_is_content_addressed() {
        let store = ObjectStore::in_memory(DEFAULT_QUOTA_BYTES);
        let payload = vec![7u8; 1024];
        let a = store.put_object(&payload, BackendKind::DataLake).unwrap();
        let used = store.used_bytes(BackendKind::DataLake);
        let b = store.put_object(&payload, BackendKind::DataLake).unwrap();
        assert_eq!(a, b);
        assert_eq!(store.used_bytes(BackendKind::DataLake), used);
        assert_eq!(store.object_count(), 1);

        let empty = store.put_object(b"", BackendKind::Metadata).unwrap();
        assert_eq!(
            empty.digest.hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(empty.size_bytes, 0);
    }

    #[test]
    fn quota_enforced() {
        let store = ObjectStore::in_memory(100);
        store.put_object(&[1; 60], BackendKind::DataLake).unwrap();
        assert!(matches!(
            store.put_object(&[2; 60], BackendKind::DataLake),
            Err(LakeError::StorageFull { used: 60, quota: 100, needed: 60, .. })
        ));
        // quotas are per backend
        store.put_object(&[2; 60], BackendKind::MlModel).unwrap();
        // re-putting stored bytes never needs quota
        store.put_object(&[1; 60], BackendKind::DataLake).unwrap();
    }

    #[test]
    fn disk_layout_and_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let obj = {
            let store = ObjectStore::open(dir.path(), DEFAULT_QUOTA_BYTES).unwrap();
            store.put_object(b"dali", BackendKind::DataLake).unwrap()
        };
        let hex = "27b50557de800b45f61e54fa4d748dd890a18592dfd53480523886802bce92ab";
        assert_eq!(obj.digest.hex(), hex);
        let path = dir.path().join("objects/data-lake/27").join(hex);
        assert_eq!(fs::read(path).unwrap(), b"dali");
        let store = ObjectStore::open(dir.path(), DEFAULT_QUOTA_BYTES).unwrap();
        assert_eq!(store.used_bytes(BackendKind::DataLake), 4);
        assert_eq!(store.get_object(&obj.digest).unwrap(), b"dali");
    }

    #[test]
    fn manifests_persist() {
        let dir = tempfile::tempdir().unwrap();
        let provider = ParticipantId::parse("did:dali:eur:testbed").unwrap();
        let m = {
            let lake = DataLake::open(dir.path(), DEFAULT_QUOTA_BYTES).unwrap();
            lake.store_cold_dataset("ds-1", &provider, b"a,b\n1,x\n2,y\n").unwrap()
        };
        assert_eq!(m.row_count, 2);
        assert_eq!(
            m.schema_fields,
            vec![
                SchemaField { name: "a".into(), value_type: FieldType::Integer },
                SchemaField { name: "b".into(), value_type: FieldType::Text },
            ]
        );
        assert!(dir.path().join("manifests/ds-1.json").exists());
        let lake = DataLake::open(dir.path(), DEFAULT_QUOTA_BYTES).unwrap();
        assert_eq!(lake.manifest("ds-1"), Some(m));
    }

    #[test]
    fn hot_manifest_needs_provenance() {
        let json = r#"{"assetId":"x","providerId":"did:dali:eur:testbed","objectDigest":{"algorithm":"sha-256","hex":"27b50557de800b45f61e54fa4d748dd890a18592dfd53480523886802bce92ab"},"rowCount":1,"schemaFields":[],"provenance":{"temperature":"hot"},"transformLog":[]}"#;
        assert!(serde_json::from_str::<DatasetManifest>(json).is_err());
        let ok = json.replace(r#""hot""#, r#""hot","testbedId":"t","experimentSeed":4"#);
        assert!(serde_json::from_str::<DatasetManifest>(&ok).is_ok());
    }

    #[test]
    fn select_testbed_examples() {
        let a = TestbedProfile::new("A", &["mmWave"], 1.0).unwrap();
        let b = TestbedProfile::new("B", &["mmWave", "mobility"], 1.0).unwrap();
        let req = DataRequest::new(&["mmWave", "mobility"], 10, "research");
        let profiles = [a.clone(), b];
        assert_eq!(select_testbed(&req, &profiles).unwrap().testbed_id, "B");
        assert_eq!(select_testbed(&req, &[a.clone()]).unwrap().testbed_id, "A");
        let sat = DataRequest::new(&["satellite"], 10, "research");
        assert_eq!(select_testbed(&sat, &profiles), Err(LakeError::NoCapableTestbed));
        assert!(TestbedProfile::new("C", &[], 1.0).is_err());
        assert!(TestbedProfile::new("C", &["x"], 0.0).is_err());
    }

    /// Exhaustive argmax over all profiles with the lexicographic tie-break.
    fn brute_force(req: &DataRequest, profiles: &[TestbedProfile]) -> Option<String> {
        let scored: Vec<(f64, &str)> = profiles
            .iter()
            .map(|p| {
                let hits = p.capabilities.iter().filter(|c| req.wanted_capabilities.contains(*c)).count();
                (hits as f64 / p.cost_weight, p.testbed_id.as_str())
            })
            .filter(|(s, _)| *s > 0.0)
            .collect();
        let max = scored.iter().map(|(s, _)| *s).fold(f64::NEG_INFINITY, f64::max);
        scored.iter().filter(|(s, _)| *s == max).map(|(_, id)| id.to_string()).min()
    }

    #[test]
    fn select_testbed_matches_brute_force() {
        const CAPS: [&str; 6] = ["mmWave", "sub-6", "mobility", "urban-macro", "massive-mimo", "energy"];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=6);
            let profiles: Vec<TestbedProfile> = (0..n)
                .map(|i| {
                    let caps: Vec<&str> = CAPS.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
                    let caps = if caps.is_empty() { vec![CAPS[rng.gen_range(0..6)]] } else { caps };
                    let cost = [0.5, 1.0, 1.5, 2.0, 3.0][rng.gen_range(0..5)];
                    TestbedProfile::new(&format!("tb-{}", (b'a' + rng.gen_range(0..4u8) + i as u8) as char), &caps, cost)
                        .unwrap()
                })
                .collect();
            let wanted: Vec<&str> = CAPS.iter().copied().filter(|_| rng.gen_bool(0.3)).collect();
            let req = DataRequest::new(&wanted, 5, "research");
            let got = select_testbed(&req, &profiles).ok().map(|p| p.testbed_id.clone());
            assert_eq!(got, brute_force(&req, &profiles));
        }
    }

    #[test]
    fn experiment_shape_and_determinism() {
        let tb = TestbedProfile::new("eur-mmw", &["mmWave", "mobility", "urban-macro"], 1.0).unwrap();
        let req = DataRequest::new(&["mmWave", "mobility"], 100, "research");
        let a = run_experiment(&tb, &req, 42);
        let b = run_experiment(&tb, &req, 42);
        assert_eq!(a, b);
        let text = String::from_utf8(a.payload.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 101);
        assert_eq!(lines[0], " Timestamp,Cell-ID ,Beam-RSRP-dBm,UE-Speed-kmh");
        assert_eq!(a.row_count, 100);

        let one = run_experiment(&tb, &DataRequest::new(&["mmWave"], 1, "research"), 42);
        assert_eq!(String::from_utf8(one.payload).unwrap().lines().count(), 2);

        let digests: BTreeSet<String> = (0..100u64)
            .map(|s| digest_of(&run_experiment(&tb, &req, s).payload).hex().to_string())
            .collect();
        assert_eq!(digests.len(), 100);
    }

    #[test]
    fn transform_examples() {
        let raw = b" Cell-ID ,RSRP\r\ncell-1,-80\r\ncell-2,\r\ncell-3,-90\r\n";
        let t = transform(raw).unwrap();
        assert_eq!(t.payload, b"cell-id,rsrp\ncell-1,-80\ncell-3,-90\n");
        assert_eq!(t.row_count, 2);
        assert_eq!(t.transform_log, vec!["normalize-headers", "drop-incomplete-rows"]);

        let clean = b"a,b\n1,2\n";
        assert_eq!(transform(clean).unwrap().payload, clean);

        for bad in [&b"\xff\xfe\x00\x01garbage"[..], b"", b"a,b\n1,2,3\n"] {
            assert!(matches!(transform(bad), Err(LakeError::MalformedCsv(_))), "{bad:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn put_get_round_trip(bytes in prop::collection::vec(any::<u8>(), 0..=4 << 20)) {
            let store = ObjectStore::in_memory(DEFAULT_QUOTA_BYTES);
            let obj = store.put_object(&bytes, BackendKind::DataLake).unwrap();
            prop_assert_eq!(obj.size_bytes, bytes.len() as u64);
            prop_assert_eq!(store.get_object(&obj.digest).unwrap(), bytes);
        }
    }

    proptest! {
        #[test]
        fn transform_is_idempotent(
            header in prop::collection::vec("[ A-Za-z-]{1,8}", 1..5),
            rows in prop::collection::vec(prop::collection::vec("[a-z0-9 ]{0,4}", 5), 0..20),
        ) {
            let width = header.len();
            let mut raw = header.join(",");
            raw.push('\n');
            for r in &rows {
                raw.push_str(&r[..width].join(","));
                raw.push('\n');
            }
            let once = transform(raw.as_bytes()).unwrap();
            let twice = transform(&once.payload).unwrap();
            prop_assert_eq!(&twice.payload, &once.payload);
        }
    }
}
