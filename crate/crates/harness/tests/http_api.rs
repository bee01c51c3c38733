use std::sync::Arc;
use std::time::{Duration, Instant};

use dali_core::clock::{Clock, SystemClock};
use dali_core::connector::{transfer_scope, TransferPhase};
use dali_core::identity::{issue_token, AccessToken, KeyPair};
use dali_core::model::{digest_of, AssetKind, ParticipantId};
use dali_harness::federation::{Federation, SEEDED_OFFER};
use dali_harness::http::client::{MgmtClient, StartNegotiation, StartTransfer};
use dali_harness::http::{
    HttpCluster, TokenRequest, HEADER_CHUNK_INDEX, HEADER_CHUNK_TOTAL, HEADER_TOTAL_SIZE,
    HEADER_TRANSFER_TOKEN, PROOF_WINDOW_SECS,
};
use dali_harness::scenario::PURPOSE;
use dali_harness::topology::FederationTopology;
use serde_json::{json, Value};

struct Net {
    fed: Federation,
    cluster: HttpCluster,
}

fn start() -> Net {
    let topology = FederationTopology::default_federation();
    let (mut fed, cluster) = HttpCluster::start(&topology, Arc::new(SystemClock), None, None, None).unwrap();
    fed.seed_assets().unwrap();
    fed.sync_catalogues().unwrap();
    Net { fed, cluster }
}

impl Net {
    fn hub(&self) -> String {
        self.cluster.federator_url.clone()
    }

    fn url(&self, id: &ParticipantId) -> String {
        self.cluster.endpoints[id].clone()
    }

    fn consumer(&self) -> ParticipantId {
        self.fed.consumers()[0].id().clone()
    }

    fn provider(&self) -> ParticipantId {
        self.fed.providers()[0].id().clone()
    }

    /// Bearer header for a node's own subject.
    fn bearer(&self, node: &ParticipantId, scopes: &[&str]) -> String {
        let (status, v) = send("POST", &format!("{}/mgmt/token", self.url(node)), None, Some(json!({ "scopes": scopes })));
        assert_eq!(status, 200, "{v}");
        v["header"].as_str().unwrap().to_string()
    }
}

/// Status and JSON body (Null when the body is not JSON).
fn send(method: &str, url: &str, auth: Option<&str>, body: Option<Value>) -> (u16, Value) {
    let mut req = ureq::request(method, url);
    if let Some(a) = auth {
        req = req.set("authorization", a);
    }
    let res = match body {
        Some(b) => req.send_json(b),
        None => req.call(),
    };
    let resp = match res {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("{method} {url}: {e}"),
    };
    let status = resp.status();
    let text = resp.into_string().unwrap();
    (status, serde_json::from_str(&text).unwrap_or(Value::Null))
}

#[test]
fn identity_requires_proof_of_possession() {
    let net = start();
    let node = net.fed.node(&net.consumer()).unwrap();
    let url = format!("{}/identity/tokens", net.hub());
    let now = SystemClock.now();
    let scopes = vec!["catalogue:read".to_string()];

    let good = TokenRequest::signed(&node.keys, node.credential.clone(), scopes.clone(), 600, now);
    let (status, v) = send("POST", &url, None, Some(serde_json::to_value(&good).unwrap()));
    assert_eq!(status, 201, "{v}");
    let token: AccessToken = serde_json::from_value(v).unwrap();
    assert_eq!(&token.subject, node.id());
    assert_eq!(token.scopes, scopes);

    let stranger = KeyPair::from_seed([99; 32]);
    let forged = TokenRequest::signed(&stranger, node.credential.clone(), scopes.clone(), 600, now);
    let (status, v) = send("POST", &url, None, Some(serde_json::to_value(&forged).unwrap()));
    assert_eq!((status, v["error"].as_str()), (401, Some("bad-proof")));

    let mut widened = good.clone();
    widened.scopes.push("catalogue:admin".into());
    let (status, _) = send("POST", &url, None, Some(serde_json::to_value(&widened).unwrap()));
    assert_eq!(status, 401);

    let stale = TokenRequest::signed(&node.keys, node.credential.clone(), scopes, 600, now.plus_secs(-PROOF_WINDOW_SECS - 60));
    let (status, v) = send("POST", &url, None, Some(serde_json::to_value(&stale).unwrap()));
    assert_eq!((status, v["error"].as_str()), (401, Some("stale-proof")));

    let (status, v) = send("POST", &url, None, Some(json!({ "nope": 1 })));
    assert_eq!((status, v["error"].as_str()), (400, Some("malformed-body")));

    // only the federator runs the identity service
    let (status, _) = send("POST", &format!("{}/identity/tokens", net.url(node.id())), None, Some(json!({})));
    assert_eq!(status, 404);
}

#[test]
fn clearing_house_endpoints() {
    let net = start();
    let provider = net.provider();
    let url = format!("{}/clearing/records", net.hub());
    let body = json!({ "recordType": "TransferEvent", "subjectId": "x-1", "payload": { "outcome": "completed", "agreementId": "agr-9" } });

    let (status, _) = send("POST", &url, None, Some(body.clone()));
    assert_eq!(status, 401);
    let reader = net.bearer(&provider, &["clearing:read"]);
    let (status, v) = send("POST", &url, Some(&reader), Some(body.clone()));
    assert_eq!((status, v["error"].as_str()), (403, Some("scope-denied")));

    let writer = net.bearer(&provider, &["clearing:append"]);
    let (status, rec) = send("POST", &url, Some(&writer), Some(body));
    assert_eq!(status, 201, "{rec}");
    assert_eq!(rec["actor"], provider.as_str());

    let (status, recs) = send("GET", &format!("{url}?subject=x-1&type=TransferEvent"), Some(&reader), None);
    assert_eq!(status, 200);
    assert_eq!(recs.as_array().unwrap().len(), 1);
    assert_eq!(recs[0]["seq"], rec["seq"]);
    let (status, _) = send("GET", &format!("{url}?type=Bogus"), Some(&reader), None);
    assert_eq!(status, 400);

    let (status, usage) = send("GET", &format!("{}/clearing/usage/agr-9", net.hub()), Some(&reader), None);
    assert_eq!(status, 200);
    assert_eq!(usage["completedTransfers"], 1);

    let (status, verdict) = send("GET", &format!("{}/clearing/verify", net.hub()), None, None);
    assert_eq!(status, 200);
    assert_eq!(verdict["valid"], true);
}

#[test]
fn catalogue_endpoints() {
    let net = start();
    let consumer = net.consumer();
    let read = net.bearer(&consumer, &["catalogue:read"]);

    let (status, _) = send("GET", &format!("{}/catalogue/assets", net.url(&consumer)), None, None);
    assert_eq!(status, 401);
    let (status, res) = send("GET", &format!("{}/catalogue/assets?kind=dataset&limit=100", net.url(&consumer)), Some(&read), None);
    assert_eq!(status, 200);
    let datasets = net.fed.seeded.iter().filter(|a| a.description.kind() == AssetKind::Dataset).count();
    assert_eq!(res["totalCount"], datasets as u64);
    let (status, v) = send("GET", &format!("{}/catalogue/assets?limit=0", net.url(&consumer)), Some(&read), None);
    assert_eq!((status, v["error"].as_str()), (400, Some("invalid-query")));
    let (status, _) = send("GET", &format!("{}/catalogue/assets?kind=spaceship", net.url(&consumer)), Some(&read), None);
    assert_eq!(status, 400);

    // a consumer cannot register a provider's description
    let sd = serde_json::to_value(&net.fed.seeded[0].description).unwrap();
    let write = net.bearer(&consumer, &["catalogue:write"]);
    let (status, v) = send("POST", &format!("{}/catalogue/assets", net.url(&consumer)), Some(&write), Some(sd.clone()));
    assert_eq!((status, v["error"].as_str()), (403, Some("subject-mismatch")));
    let owner = net.fed.seeded[0].description.provider_id().clone();
    let own = net.bearer(&owner, &["catalogue:write"]);
    let (status, entry) = send("POST", &format!("{}/catalogue/assets", net.url(&owner)), Some(&own), Some(sd));
    assert_eq!(status, 201);
    assert_eq!(entry["revision"], 2);

    let fed_token = net.bearer(&consumer, &["catalogue:federate", "catalogue:read"]);
    let (status, report) = send(
        "POST",
        &format!("{}/catalogue/federate", net.url(&consumer)),
        Some(&fed_token),
        Some(json!({ "peer": net.hub() })),
    );
    assert_eq!(status, 200, "{report}");
    assert_eq!(report["added"], 0);
}

#[test]
fn vocabulary_endpoints() {
    let net = start();
    let (status, scheme) = send("GET", &format!("{}/vocabulary/schemes/bands", net.hub()), None, None);
    assert_eq!(status, 200);
    assert_eq!(scheme["schemeId"], "bands");
    let (status, _) = send("GET", &format!("{}/vocabulary/schemes/colours", net.hub()), None, None);
    assert_eq!(status, 404);
    let (status, schema) = send("GET", &format!("{}/vocabulary/schemas/ran-model", net.hub()), None, None);
    assert_eq!(status, 200);
    assert_eq!(schema["kind"], "ran-model");

    let (status, v) = send(
        "POST",
        &format!("{}/vocabulary/validate", net.hub()),
        None,
        Some(json!({ "kind": "ran-model", "metadata": { "ran-layer": "l2" } })),
    );
    assert_eq!(status, 200);
    assert_eq!(v["valid"], false);
    assert_eq!(v["violations"].as_array().unwrap().len(), 1);

    let scheme = json!({ "schemeId": "colours", "concepts": [{ "conceptId": "red", "label": "Red" }] });
    let (status, _) = send("PUT", &format!("{}/vocabulary/schemes/colours", net.hub()), None, Some(scheme.clone()));
    assert_eq!(status, 401);
    let operator = net.fed.federator.clone();
    let admin = net.bearer(&operator, &["vocabulary:write"]);
    let (status, v) = send("PUT", &format!("{}/vocabulary/schemes/colours", net.hub()), Some(&admin), Some(scheme));
    assert_eq!(status, 200, "{v}");
    let (status, _) = send("GET", &format!("{}/vocabulary/schemes/colours", net.hub()), None, None);
    assert_eq!(status, 200);
}

#[test]
fn lake_endpoints() {
    let net = start();
    let provider = net.provider();
    let write = net.bearer(&provider, &["lake:write"]);
    let read = net.bearer(&provider, &["lake:read"]);
    let bytes = b"t,v\n0,1\n".to_vec();
    let d = digest_of(&bytes);
    let obj_url = format!("{}/lake/objects/{}", net.hub(), d.hex());

    let put = |auth: &str, url: &str, body: &[u8]| match ureq::put(url).set("authorization", auth).send_bytes(body) {
        Ok(r) => r.status(),
        Err(ureq::Error::Status(s, _)) => s,
        Err(e) => panic!("{e}"),
    };
    assert_eq!(put(&read, &obj_url, &bytes), 403);
    assert_eq!(put(&write, &obj_url, b"other bytes"), 422);
    assert_eq!(put(&write, &format!("{obj_url}?backend=tape"), &bytes), 400);
    assert_eq!(put(&write, &obj_url, &bytes), 201);
    assert_eq!(put(&write, &obj_url, &bytes), 201);

    let got = ureq::get(&obj_url).set("authorization", &read).call().unwrap();
    let mut body = Vec::new();
    std::io::Read::read_to_end(&mut got.into_reader(), &mut body).unwrap();
    assert_eq!(body, bytes);
    let (status, _) = send("GET", &format!("{}/lake/objects/{}", net.hub(), "ab".repeat(32)), Some(&read), None);
    assert_eq!(status, 404);

    let ingest = net.bearer(&provider, &["lake:ingest"]);
    let req = json!({ "request": { "wantedCapabilities": ["mmWave", "ran-slicing"], "sampleCount": 500, "purpose": PURPOSE }, "seed": 42 });
    let (status, _) = send("POST", &format!("{}/lake/ingest", net.hub()), Some(&read), Some(req.clone()));
    assert_eq!(status, 403);
    let (status, out) = send("POST", &format!("{}/lake/ingest", net.hub()), Some(&ingest), Some(req));
    assert_eq!(status, 200, "{out}");
    let asset = out["manifest"]["assetId"].as_str().unwrap();
    let (status, m) = send("GET", &format!("{}/lake/manifests/{asset}", net.hub()), Some(&read), None);
    assert_eq!(status, 200);
    assert_eq!(m["objectDigest"], out["manifest"]["objectDigest"]);
}

fn wait_for<T>(mut f: impl FnMut() -> Option<T>) -> T {
    let started = Instant::now();
    loop {
        if let Some(v) = f() {
            return v;
        }
        assert!(started.elapsed() < Duration::from_secs(30), "timed out");
        std::thread::sleep(Duration::from_millis(20));
    }
}

#[test]
fn management_flow_and_payload_streaming() {
    let net = start();
    let consumer = net.consumer();
    let mgmt = MgmtClient::new(&net.url(&consumer));
    let asset = net
        .fed
        .seeded
        .iter()
        .find(|a| a.description.kind() == AssetKind::Dataset)
        .unwrap();
    let provider = asset.description.provider_id().clone();

    let status = mgmt.status().unwrap();
    assert_eq!(status.participant_id, consumer);

    let neg = mgmt
        .start_negotiation(&StartNegotiation {
            asset_id: asset.description.asset_id().into(),
            offer_id: SEEDED_OFFER.into(),
            ..Default::default()
        })
        .unwrap();
    let agreement = wait_for(|| {
        let n = mgmt.negotiation(&neg.negotiation_id).ok()?;
        n.agreement_id.filter(|_| n.state.as_str() == "FINALIZED")
    });
    assert!(mgmt.agreements().unwrap().iter().any(|a| a.agreement_id == agreement));

    let x = mgmt
        .start_transfer(&StartTransfer {
            agreement_id: agreement.clone(),
            purpose: PURPOSE.into(),
            transfer_id: None,
        })
        .unwrap();
    wait_for(|| (mgmt.transfer(&x.transfer_id).ok()?.state == TransferPhase::Started).then_some(()));

    // the data plane at the provider, with a token minted by the provider
    let pnode = net.fed.node(&provider).unwrap();
    let cnode = net.fed.node(&consumer).unwrap();
    let payload_url = format!("{}/dsp/transfers/{}/payload", net.url(&provider), x.transfer_id);
    let (status, _) = send("GET", &payload_url, None, None);
    assert_eq!(status, 401);
    let wrong = issue_token(
        &pnode.keys,
        &cnode.credential,
        &net.fed.trust,
        "data-plane",
        vec![transfer_scope("agr-other")],
        60,
        SystemClock.now(),
    )
    .unwrap();
    let denied = ureq::get(&payload_url).set(HEADER_TRANSFER_TOKEN, &wrong.to_header_value()).call();
    assert!(matches!(denied, Err(ureq::Error::Status(401, _))));

    let token = issue_token(
        &pnode.keys,
        &cnode.credential,
        &net.fed.trust,
        "data-plane",
        vec![transfer_scope(&agreement)],
        60,
        SystemClock.now(),
    )
    .unwrap();
    let streamed = ureq::get(&payload_url)
        .set(HEADER_TRANSFER_TOKEN, &token.to_header_value())
        .call()
        .unwrap();
    assert_eq!(streamed.header(HEADER_TOTAL_SIZE).unwrap(), asset.size_bytes.to_string());
    let chunks: u64 = streamed.header(HEADER_CHUNK_TOTAL).unwrap().parse().unwrap();
    assert!(chunks >= 1);
    let mut body = Vec::new();
    std::io::Read::read_to_end(&mut streamed.into_reader(), &mut body).unwrap();
    assert_eq!(digest_of(&body), asset.payload_digest);

    let first = ureq::get(&format!("{payload_url}?chunk=0"))
        .set(HEADER_TRANSFER_TOKEN, &token.to_header_value())
        .call()
        .unwrap();
    assert_eq!(first.header(HEADER_CHUNK_INDEX), Some("0"));

    // the consumer pulls through its management API and completes
    let (bytes, digest) = mgmt.pull(&x.transfer_id).unwrap();
    assert_eq!(digest, asset.payload_digest);
    assert_eq!(digest_of(&bytes), digest);
    let done = wait_for(|| {
        let t = mgmt.transfer(&x.transfer_id).ok()?;
        t.state.is_terminal().then_some(t)
    });
    assert_eq!(done.state, TransferPhase::Completed);

    let raw = ureq::post(&format!("{}/mgmt/transfers/{}/pull", net.url(&consumer), x.transfer_id)).call();
    assert!(matches!(raw, Err(ureq::Error::Status(409, _))));

    let (status, _) = send("GET", &format!("{}/mgmt/negotiations/nope", net.url(&consumer)), None, None);
    assert_eq!(status, 404);
    let (status, v) = send("POST", &format!("{}/dsp/negotiations", net.url(&provider)), None, Some(json!({ "x": 1 })));
    assert_eq!((status, v["error"].as_str()), (400, Some("malformed-body")));
}
