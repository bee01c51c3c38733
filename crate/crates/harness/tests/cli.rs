use std::path::{Path, PathBuf};
use std::sync::Arc;

use dali_core::clearinghouse::{RecordType, SCOPE_CLEARING_APPEND};
use dali_core::clock::SystemClock;
use dali_core::datalake::DataRequest;
use dali_core::model::AssetKind;
use dali_harness::cli::{main_with, ClusterFile, ClusterNode};
use dali_harness::federation::{Federation, SEEDED_OFFER};
use dali_harness::http::HttpCluster;
use dali_harness::scenario::{self, HOT_REQUEST_CAPS, HOT_REQUEST_SAMPLES, PURPOSE};
use dali_harness::topology::FederationTopology;
use serde_json::Value;

struct Run {
    code: i32,
    out: String,
    err: String,
}

fn dali(args: &[&str]) -> Run {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("dali").chain(args.iter().copied());
    let code = main_with(argv, &mut out, &mut err);
    Run {
        code,
        out: String::from_utf8(out).unwrap(),
        err: String::from_utf8(err).unwrap(),
    }
}

fn json(r: &Run) -> Value {
    serde_json::from_str(&r.out).unwrap_or_else(|e| panic!("{e}: {}", r.out))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(dali(&[]).code, 2);
    assert_eq!(dali(&["frobnicate"]).code, 2);
    assert_eq!(dali(&["transfer", "--agreement", "a"]).code, 2);
    let r = dali(&["scenario", "run", "no-such-scenario"]);
    assert_eq!(r.code, 2);
    assert!(r.err.contains("no-such-scenario"));
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("absent.json");
    assert_eq!(dali(&["--cluster", path_str(&missing), "query"]).code, 2);
    let bad_topology = dir.path().join("topo.yaml");
    std::fs::write(&bad_topology, "nodes: []\ntransport: in-process\nseed: 1\n").unwrap();
    assert_eq!(
        dali(&["scenario", "run", "publish-discover", "--topology", path_str(&bad_topology)]).code,
        2
    );
}

#[test]
fn help_and_version_exit_0() {
    let r = dali(&["--help"]);
    assert_eq!(r.code, 0);
    assert!(r.out.contains("scenario"));
    assert_eq!(dali(&["--version"]).code, 0);
}

#[test]
fn scenario_list_and_run() {
    let r = dali(&["--json", "scenario", "list"]);
    assert_eq!(r.code, 0);
    assert_eq!(json(&r).as_array().unwrap().len(), scenario::SHIPPED.len());

    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("run.jsonl");
    let r = dali(&["scenario", "run", "negotiate-transfer", "--seed", "4", "--json", "--log", path_str(&log)]);
    assert_eq!(r.code, 0, "{}", r.err);
    let v = json(&r);
    assert_eq!(v["scenario"], "negotiate-transfer");
    assert_eq!(v["seed"], 4);
    assert_eq!(v["digestsMatch"], true);
    assert_eq!(v["auditVerdict"]["valid"], true);

    let r = dali(&["--json", "scenario", "replay", path_str(&log)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(json(&r), v);

    let r = dali(&["scenario", "run", "negotiate-transfer", "--seed", "4"]);
    assert_eq!(r.code, 0);
    assert!(r.out.contains("audit: VALID"), "{}", r.out);
}

#[test]
fn fuzz_with_a_small_budget() {
    let r = dali(&["--json", "scenario", "run", "fuzz-protocol", "--schedules", "20", "--seed", "2"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let v = json(&r);
    assert_eq!(v["stats"]["schedules"], 20);
    assert_eq!(v["stats"]["failures"], 0);
}

#[test]
fn offline_audit_verify() {
    let dir = tempfile::tempdir().unwrap();
    let (fed, cluster) = start_cluster(&FederationTopology::default_federation());
    let node = fed.federator_node();
    let token = node.tokens.token(&[SCOPE_CLEARING_APPEND]).unwrap();
    for i in 0..5 {
        let payload = [("outcome".to_string(), "completed".to_string())].into();
        fed.clearing
            .append(RecordType::TransferEvent, node.id(), &format!("x-{i}"), payload, &token)
            .unwrap();
    }
    let good = dir.path().join("audit.jsonl");
    std::fs::write(&good, fed.clearing.export_log().unwrap()).unwrap();
    drop(cluster);
    let r = dali(&["audit", "verify", "--log", path_str(&good)]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert!(r.out.contains("VALID"));

    let mut bytes = std::fs::read(&good).unwrap();
    let at = bytes.iter().position(|b| *b == b'\n').unwrap() + 10;
    bytes[at] ^= 0x20;
    let bad = dir.path().join("tampered.jsonl");
    std::fs::write(&bad, bytes).unwrap();
    let r = dali(&["--json", "audit", "verify", "--log", path_str(&bad)]);
    assert_eq!(r.code, 1);
    let v = json(&r);
    assert_eq!(v["valid"], false);
    assert_eq!(v["firstBadSeq"], 1);
}

fn start_cluster(topology: &FederationTopology) -> (Federation, HttpCluster) {
    let (mut fed, cluster) = HttpCluster::start(topology, Arc::new(SystemClock), None, None, None).unwrap();
    fed.seed_assets().unwrap();
    fed.sync_catalogues().unwrap();
    (fed, cluster)
}

fn cluster_file(dir: &Path, topology: &FederationTopology, cluster: &HttpCluster) -> PathBuf {
    let file = ClusterFile {
        federator: cluster.federator_url.clone(),
        nodes: topology
            .nodes
            .iter()
            .map(|n| ClusterNode {
                participant_id: n.participant_id.clone(),
                role: n.role,
                url: cluster.endpoints[&n.participant_id].clone(),
            })
            .collect(),
    };
    let path = dir.join("cluster.json");
    std::fs::write(&path, serde_json::to_string(&file).unwrap()).unwrap();
    path
}

#[test]
fn operator_workflow_against_a_running_cluster() {
    let dir = tempfile::tempdir().unwrap();
    let topology = FederationTopology::default_federation();
    let (fed, cluster) = start_cluster(&topology);
    let cf = cluster_file(dir.path(), &topology, &cluster);
    let cf = path_str(&cf);

    // query
    let r = dali(&["--cluster", cf, "--json", "query", "--kind", "dataset"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let hits = json(&r);
    let datasets = fed.seeded.iter().filter(|a| a.description.kind() == AssetKind::Dataset).count();
    assert_eq!(hits["totalCount"], datasets as u64);

    // negotiate then transfer a seeded dataset
    let asset = fed
        .seeded
        .iter()
        .find(|a| a.description.kind() == AssetKind::Dataset)
        .unwrap();
    let id = asset.description.asset_id().to_string();
    let r = dali(&["--cluster", cf, "--json", "negotiate", "--asset", &id, "--offer", SEEDED_OFFER]);
    assert_eq!(r.code, 0, "{}", r.err);
    let neg = json(&r);
    assert_eq!(neg["state"], "FINALIZED");
    let agreement = neg["agreementId"].as_str().unwrap().to_string();

    let out = dir.path().join("payload.bin");
    let r = dali(&[
        "--cluster",
        cf,
        "--json",
        "transfer",
        "--agreement",
        &agreement,
        "--purpose",
        PURPOSE,
        "--out",
        path_str(&out),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(json(&r)["state"], "COMPLETED");
    let pulled = std::fs::read(&out).unwrap();
    assert_eq!(dali_core::model::digest_of(&pulled), asset.payload_digest);

    // wrong purpose is a domain failure
    let r = dali(&["--cluster", cf, "transfer", "--agreement", &agreement, "--purpose", "commercial"]);
    assert_eq!(r.code, 1);

    // unknown offer fails the negotiation
    let r = dali(&["--cluster", cf, "negotiate", "--asset", &id, "--offer", "nope"]);
    assert_eq!(r.code, 1);

    // publish a new description with its payload
    let provider = fed.providers()[0].id().clone();
    let payload = b"t,rsrp\n0,-80\n1,-81\n".to_vec();
    let sd = dali_core::model::SelfDescription::new(dali_core::model::SelfDescriptionParts {
        asset_id: "cli-trace".into(),
        provider_id: provider.clone(),
        kind: AssetKind::Dataset,
        title: "CLI trace".into(),
        metadata: [("frequency-band", "sub-6"), ("testbed-origin", "eur"), ("sample-count", "2")]
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
        offers: asset.description.offers().to_vec(),
        content_digest: Some(dali_core::model::digest_of(&payload)),
        temperature: dali_core::model::Temperature::Cold,
        created_at: dali_core::model::Timestamp::from_unix(1_767_225_600),
    })
    .unwrap();
    let sd_path = dir.path().join("sd.json");
    std::fs::write(&sd_path, serde_json::to_string(&sd).unwrap()).unwrap();
    let payload_path = dir.path().join("trace.csv");
    std::fs::write(&payload_path, &payload).unwrap();
    let r = dali(&[
        "--cluster",
        cf,
        "--json",
        "publish",
        "--node",
        provider.as_str(),
        "--asset",
        path_str(&sd_path),
        "--payload",
        path_str(&payload_path),
    ]);
    assert_eq!(r.code, 0, "{}", r.err);
    let v = json(&r);
    assert!(v["entry"]["validationReport"].as_array().unwrap().is_empty());
    assert_eq!(v["stored"]["digest"], serde_json::to_value(sd.content_digest()).unwrap());
    let r = dali(&["--cluster", cf, "--json", "query", "--node", provider.as_str(), "--text", "CLI trace"]);
    assert_eq!(json(&r)["totalCount"], 1);

    // ingest through the federator
    let req = DataRequest::new(&HOT_REQUEST_CAPS, HOT_REQUEST_SAMPLES, PURPOSE);
    let req_path = dir.path().join("req.json");
    std::fs::write(&req_path, serde_json::to_string(&req).unwrap()).unwrap();
    let r = dali(&["--cluster", cf, "--json", "ingest", "--request", path_str(&req_path), "--seed", "42"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(json(&r)["path"], "hot");

    // tokens and the live audit chain
    let consumer = fed.consumers()[0].id().clone();
    let r = dali(&["--cluster", cf, "--json", "token", "--node", consumer.as_str(), "--scope", "catalogue:read"]);
    assert_eq!(r.code, 0, "{}", r.err);
    let r = dali(&["--cluster", cf, "--json", "audit", "verify"]);
    assert_eq!(r.code, 0, "{}", r.err);
    assert_eq!(json(&r)["valid"], true);
    drop(cluster);
}
