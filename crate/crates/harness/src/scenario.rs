//! Built-in scenarios, the drivers that run them, and the oracles that
//! check a finished run.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use dali_core::catalogue::{CatalogueEntry, Query};
use dali_core::clearinghouse::{verify_log_bytes, ChainVerdict, RecordFilter, RecordType};
use dali_core::connector::{
    Connector, NegotiationPhase, NegotiationRequest, NegotiationState, ProcessKind, Role, TransferPhase,
    TransferState,
};
use dali_core::datalake::{DataRequest, IngestOutcome};
use dali_core::model::{Offer, SelfDescriptionParts};
use dali_core::policy::{Action, Rule, UsagePolicy};
use dali_core::{AssetKind, Digest, ParticipantId, SelfDescription, Temperature};

use crate::eventlog::{parse_log, Chooser, LogEvent, ParsedLog, Recorder};
use crate::federation::{Federation, SEEDED_OFFER};
use crate::sim::{Script, SimNet};
use crate::topology::{FederationTopology, TransportKind};
use crate::HarnessError;

pub const PUBLISH_DISCOVER: &str = "publish-discover";
pub const NEGOTIATE_TRANSFER: &str = "negotiate-transfer";
pub const HOT_INGEST: &str = "hot-ingest";
pub const AUDIT_TAMPER: &str = "audit-tamper";
pub const FUZZ_PROTOCOL: &str = "fuzz-protocol";
pub const SHIPPED: [&str; 5] = [PUBLISH_DISCOVER, NEGOTIATE_TRANSFER, HOT_INGEST, AUDIT_TAMPER, FUZZ_PROTOCOL];

pub const PURPOSE: &str = "research";
/// Capabilities of the hot-ingest request; no seeded dataset covers both.
pub const HOT_REQUEST_CAPS: [&str; 2] = ["mmWave", "ran-slicing"];
pub const HOT_REQUEST_SAMPLES: u32 = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ScenarioResult {
    pub scenario: String,
    pub seed: u64,
    pub events: Vec<String>,
    pub terminal_states: BTreeMap<String, String>,
    pub audit_verdict: ChainVerdict,
    pub digests_match: bool,
    #[serde(default)]
    pub stats: BTreeMap<String, u64>,
}

/// A finished run with its event log.
#[derive(Debug, Clone)]
pub struct ScenarioRun {
    pub result: ScenarioResult,
    pub log: Vec<u8>,
}

/// Operations a scenario performs against the federation, either by direct
/// calls or through the nodes' HTTP management API.
pub trait Ops {
    fn negotiate(&self, consumer: &ParticipantId, sd: &SelfDescription, offer_id: &str)
        -> Result<NegotiationState, String>;
    fn negotiation(&self, consumer: &ParticipantId, id: &str) -> Option<NegotiationState>;
    fn respond(&self, consumer: &ParticipantId, id: &str, accept: bool) -> Result<NegotiationState, String>;
    fn transfer(&self, consumer: &ParticipantId, agreement_id: &str, purpose: &str) -> Result<TransferState, String>;
    fn transfer_state(&self, consumer: &ParticipantId, id: &str) -> Option<TransferState>;
    fn pull(&self, consumer: &ParticipantId, id: &str) -> Result<Digest, String>;
    fn search(&self, node: &ParticipantId, q: &Query) -> Result<Vec<CatalogueEntry>, String>;
    fn ingest(&self, req: &DataRequest, seed: u64) -> Result<IngestOutcome, String>;
}

/// Runs a script to quiescence.
pub trait Driver {
    fn ops(&self) -> &dyn Ops;
    fn settle(&self, script: &mut dyn Script) -> Result<(), HarnessError>;
    fn note(&self, text: String);
}

/// Direct calls on an in-process federation, scheduled by its [`SimNet`].
pub struct SimDriver<'a> {
    pub fed: &'a Federation,
    pub sim: Arc<SimNet>,
}

fn connector<'f>(fed: &'f Federation, id: &ParticipantId) -> Result<&'f Arc<Connector>, String> {
    fed.node(id).and_then(|n| n.connector()).map_err(|e| e.to_string())
}

impl Ops for SimDriver<'_> {
    fn negotiate(
        &self,
        consumer: &ParticipantId,
        sd: &SelfDescription,
        offer_id: &str,
    ) -> Result<NegotiationState, String> {
        connector(self.fed, consumer)?
            .start_negotiation(NegotiationRequest::for_offer(sd, offer_id))
            .map_err(|e| e.to_string())
    }

    fn negotiation(&self, consumer: &ParticipantId, id: &str) -> Option<NegotiationState> {
        connector(self.fed, consumer).ok()?.negotiation(id)
    }

    fn respond(&self, consumer: &ParticipantId, id: &str, accept: bool) -> Result<NegotiationState, String> {
        connector(self.fed, consumer)?
            .respond_to_offer(id, accept)
            .map_err(|e| e.to_string())
    }

    fn transfer(&self, consumer: &ParticipantId, agreement_id: &str, purpose: &str) -> Result<TransferState, String> {
        connector(self.fed, consumer)?
            .request_transfer(agreement_id, purpose, None)
            .map_err(|e| e.to_string())
    }

    fn transfer_state(&self, consumer: &ParticipantId, id: &str) -> Option<TransferState> {
        connector(self.fed, consumer).ok()?.transfer(id)
    }

    fn pull(&self, consumer: &ParticipantId, id: &str) -> Result<Digest, String> {
        connector(self.fed, consumer)?
            .pull_payload(id)
            .map(|p| p.digest)
            .map_err(|e| e.to_string())
    }

    fn search(&self, node: &ParticipantId, q: &Query) -> Result<Vec<CatalogueEntry>, String> {
        self.fed.search(node, q).map_err(|e| e.to_string())
    }

    fn ingest(&self, req: &DataRequest, seed: u64) -> Result<IngestOutcome, String> {
        self.fed.pipeline.ingest(req, seed).map_err(|e| e.to_string())
    }
}

impl Driver for SimDriver<'_> {
    fn ops(&self) -> &dyn Ops {
        self
    }

    fn settle(&self, script: &mut dyn Script) -> Result<(), HarnessError> {
        self.sim.run(script).map(|_| ())
    }

    fn note(&self, text: String) {
        self.sim.recorder().lock().expect("recorder lock").push(&LogEvent::Note { text });
    }
}

// ---- negotiate/transfer plan ---------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
enum Stage {
    Start,
    Negotiating,
    Transferring,
    Done,
}

struct Item {
    sd: SelfDescription,
    offer_id: String,
    purpose: String,
    /// Transfers to run once the agreement is finalized.
    transfers: u32,
    accept_counter: bool,
    stage: Stage,
    negotiation: Option<String>,
    agreement: Option<String>,
    transfer_ids: Vec<String>,
    pulled: Vec<Option<Digest>>,
}

/// Negotiates every listed asset for one consumer, then transfers and pulls.
/// Every step is a script decision, so the in-process scheduler interleaves
/// them with message deliveries.
pub struct Plan<'a> {
    ops: &'a dyn Ops,
    consumer: ParticipantId,
    items: Vec<Item>,
    pub events: Vec<String>,
}

impl<'a> Plan<'a> {
    pub fn new(ops: &'a dyn Ops, consumer: ParticipantId) -> Self {
        Plan {
            ops,
            consumer,
            items: Vec::new(),
            events: Vec::new(),
        }
    }

    pub fn add(&mut self, sd: SelfDescription, offer_id: &str, purpose: &str, transfers: u32, accept_counter: bool) {
        self.items.push(Item {
            sd,
            offer_id: offer_id.into(),
            purpose: purpose.into(),
            transfers,
            accept_counter,
            stage: Stage::Start,
            negotiation: None,
            agreement: None,
            transfer_ids: Vec::new(),
            pulled: Vec::new(),
        });
    }

    fn item_mut(&mut self, asset: &str) -> Option<&mut Item> {
        self.items.iter_mut().find(|i| i.sd.asset_id() == asset)
    }

    /// Terminal states keyed by asset, as seen by the consumer.
    pub fn terminal_states(&self) -> BTreeMap<String, String> {
        let mut out = BTreeMap::new();
        for it in &self.items {
            let asset = it.sd.asset_id();
            let neg = it
                .negotiation
                .as_ref()
                .and_then(|n| self.ops.negotiation(&self.consumer, n))
                .map(|v| phase_text(v.state.as_str(), v.termination_reason.as_deref()))
                .unwrap_or_else(|| "NOT-STARTED".into());
            out.insert(format!("negotiation:{asset}"), neg);
            for (k, x) in it.transfer_ids.iter().enumerate() {
                let st = self
                    .ops
                    .transfer_state(&self.consumer, x)
                    .map(|v| phase_text(v.state.as_str(), v.termination_reason.as_deref()))
                    .unwrap_or_else(|| "UNKNOWN".into());
                out.insert(transfer_key(asset, k), st);
            }
        }
        out
    }

    /// True when every pulled payload matches the catalogued digest.
    pub fn digests_match(&self) -> bool {
        self.items.iter().all(|it| {
            it.pulled
                .iter()
                .all(|d| d.is_none() || d.as_ref() == it.sd.content_digest())
        })
    }

    pub fn pulled_count(&self) -> u64 {
        self.items.iter().map(|i| i.pulled.iter().filter(|d| d.is_some()).count() as u64).sum()
    }

    pub fn is_done(&self) -> bool {
        self.items.iter().all(|i| i.stage == Stage::Done)
    }
}

fn transfer_key(asset: &str, k: usize) -> String {
    if k == 0 {
        format!("transfer:{asset}")
    } else {
        format!("transfer:{asset}#{}", k + 1)
    }
}

pub fn phase_text(state: &str, reason: Option<&str>) -> String {
    match reason {
        Some(r) => format!("{state}:{r}"),
        None => state.to_string(),
    }
}

impl Script for Plan<'_> {
    fn enabled(&mut self) -> Vec<String> {
        let mut out = Vec::new();
        let ops = self.ops;
        let consumer = self.consumer.clone();
        for it in &mut self.items {
            let asset = it.sd.asset_id().to_string();
            match it.stage {
                Stage::Start => out.push(format!("negotiate:{asset}")),
                Stage::Negotiating => {
                    let Some(v) = it.negotiation.as_ref().and_then(|n| ops.negotiation(&consumer, n)) else {
                        continue;
                    };
                    match v.state {
                        NegotiationPhase::Offered if v.pending_decision => out.push(format!("respond:{asset}")),
                        NegotiationPhase::Finalized => {
                            it.agreement = v.agreement_id.clone();
                            it.stage = if it.transfers == 0 { Stage::Done } else { Stage::Transferring };
                            if it.transfers > 0 {
                                out.push(format!("transfer:{asset}"));
                            }
                        }
                        NegotiationPhase::Terminated => it.stage = Stage::Done,
                        _ => {}
                    }
                }
                Stage::Transferring => {
                    let Some(x) = it.transfer_ids.last() else {
                        out.push(format!("transfer:{asset}"));
                        continue;
                    };
                    let Some(v) = ops.transfer_state(&consumer, x) else {
                        continue;
                    };
                    match v.state {
                        TransferPhase::Started => out.push(format!("pull:{asset}")),
                        s if s.is_terminal() => {
                            if (it.transfer_ids.len() as u32) < it.transfers {
                                out.push(format!("transfer:{asset}"));
                            } else {
                                it.stage = Stage::Done;
                            }
                        }
                        _ => {}
                    }
                }
                Stage::Done => {}
            }
        }
        out
    }

    fn perform(&mut self, label: &str) -> String {
        let Some((op, asset)) = label.split_once(':') else {
            return format!("bad-op:{label}");
        };
        let ops = self.ops;
        let consumer = self.consumer.clone();
        let Some(it) = self.item_mut(asset) else {
            return format!("unknown-asset:{asset}");
        };
        let outcome = match op {
            "negotiate" => match ops.negotiate(&consumer, &it.sd, &it.offer_id) {
                Ok(v) => {
                    it.negotiation = Some(v.negotiation_id.clone());
                    it.stage = Stage::Negotiating;
                    format!("{} {}", v.negotiation_id, v.state)
                }
                Err(e) => {
                    it.stage = Stage::Done;
                    format!("error {e}")
                }
            },
            "respond" => {
                let id = it.negotiation.clone().unwrap_or_default();
                match ops.respond(&consumer, &id, it.accept_counter) {
                    Ok(v) => format!("{id} {}", v.state),
                    Err(e) => format!("error {e}"),
                }
            }
            "transfer" => {
                let agr = it.agreement.clone().unwrap_or_default();
                match ops.transfer(&consumer, &agr, &it.purpose) {
                    Ok(v) => {
                        it.transfer_ids.push(v.transfer_id.clone());
                        it.pulled.push(None);
                        format!("{} {}", v.transfer_id, v.state)
                    }
                    Err(e) => {
                        it.stage = Stage::Done;
                        format!("error {e}")
                    }
                }
            }
            "pull" => {
                let id = it.transfer_ids.last().cloned().unwrap_or_default();
                match ops.pull(&consumer, &id) {
                    Ok(d) => {
                        if let Some(slot) = it.pulled.last_mut() {
                            *slot = Some(d.clone());
                        }
                        format!("{id} {}", d.hex())
                    }
                    Err(e) => format!("{id} error {e}"),
                }
            }
            other => format!("bad-op:{other}"),
        };
        self.events.push(format!("{label} -> {outcome}"));
        outcome
    }
}

// ---- oracles ---------------------------------------------------------------

fn negotiation_legal(from: &str, to: &str) -> bool {
    let parse = |s: &str| {
        [
            NegotiationPhase::Requested,
            NegotiationPhase::Offered,
            NegotiationPhase::Accepted,
            NegotiationPhase::Agreed,
            NegotiationPhase::Finalized,
            NegotiationPhase::Terminated,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    };
    match (from, parse(to)) {
        ("-", Some(NegotiationPhase::Requested)) => true,
        (f, Some(t)) => parse(f).is_some_and(|f| f.can_become(t)),
        _ => false,
    }
}

fn transfer_legal(from: &str, to: &str) -> bool {
    let parse = |s: &str| {
        [
            TransferPhase::Requested,
            TransferPhase::Started,
            TransferPhase::Completed,
            TransferPhase::Terminated,
        ]
        .into_iter()
        .find(|p| p.as_str() == s)
    };
    match (from, parse(to)) {
        ("-", Some(TransferPhase::Requested)) => true,
        (f, Some(t)) => parse(f).is_some_and(|f| f.can_become(t)),
        _ => false,
    }
}

/// Transitions that break a state machine, or a process history that does
/// not chain (each step must start where the previous one ended).
pub fn illegal_transitions(connectors: &[Arc<Connector>]) -> Vec<String> {
    let mut bad = Vec::new();
    for c in connectors {
        let mut last: BTreeMap<(bool, String), String> = BTreeMap::new();
        for t in c.transitions() {
            let neg = t.process == ProcessKind::Negotiation;
            let legal = if neg {
                negotiation_legal(&t.from, &t.to)
            } else {
                transfer_legal(&t.from, &t.to)
            };
            let key = (neg, t.id.clone());
            let chained = match last.get(&key) {
                None => t.from == "-",
                Some(prev) => *prev == t.from,
            };
            if !legal || !chained {
                bad.push(format!("{} {} {} -> {}", c.id(), t.id, t.from, t.to));
            }
            last.insert(key, t.to.clone());
        }
    }
    bad
}

/// Both parties of every process must have ended in the same state with the
/// same reason; nothing may be left non-terminal.
pub fn peer_mismatches(connectors: &[Arc<Connector>]) -> Vec<String> {
    let mut bad = Vec::new();
    let mut negs: BTreeMap<(ParticipantId, String), Vec<NegotiationState>> = BTreeMap::new();
    let mut xfers: BTreeMap<(ParticipantId, String), Vec<TransferState>> = BTreeMap::new();
    for c in connectors {
        for n in c.negotiations() {
            negs.entry((n.consumer.clone(), n.negotiation_id.clone())).or_default().push(n);
        }
        for t in c.transfers() {
            xfers.entry((t.consumer.clone(), t.transfer_id.clone())).or_default().push(t);
        }
    }
    for ((_, id), views) in negs {
        if views.iter().any(|v| !v.state.is_terminal()) {
            bad.push(format!("negotiation {id} unfinished: {:?}", views.iter().map(|v| v.state).collect::<Vec<_>>()));
            continue;
        }
        if views.len() == 2 && (views[0].state, &views[0].termination_reason) != (views[1].state, &views[1].termination_reason) {
            bad.push(format!(
                "negotiation {id}: {} vs {}",
                phase_text(views[0].state.as_str(), views[0].termination_reason.as_deref()),
                phase_text(views[1].state.as_str(), views[1].termination_reason.as_deref())
            ));
        }
        if views.len() == 1 && views[0].role == Role::Consumer && views[0].state == NegotiationPhase::Finalized {
            bad.push(format!("negotiation {id} finalized without a provider record"));
        }
    }
    for ((_, id), views) in xfers {
        if views.iter().any(|v| !v.state.is_terminal()) {
            bad.push(format!("transfer {id} unfinished: {:?}", views.iter().map(|v| v.state).collect::<Vec<_>>()));
            continue;
        }
        if views.len() == 2 && (views[0].state, &views[0].termination_reason) != (views[1].state, &views[1].termination_reason) {
            bad.push(format!(
                "transfer {id}: {} vs {}",
                phase_text(views[0].state.as_str(), views[0].termination_reason.as_deref()),
                phase_text(views[1].state.as_str(), views[1].termination_reason.as_deref())
            ));
        }
    }
    bad
}

/// One-to-one match between terminal connector events and terminal audit
/// records: every negotiation end on both sides, every transfer end on the
/// provider side.
pub fn reconcile(fed: &Federation) -> Vec<String> {
    let records = fed.clearing.records_matching(&RecordFilter::default());
    let mut bad = Vec::new();
    let mut expected: BTreeSet<(String, String, String)> = BTreeSet::new();
    for c in fed.connectors() {
        for n in c.negotiations().into_iter().filter(|n| n.state.is_terminal()) {
            expected.insert((
                c.id().to_string(),
                n.negotiation_id.clone(),
                phase_text(&n.state.as_str().to_lowercase(), n.termination_reason.as_deref()),
            ));
        }
        for t in c.transfers().into_iter().filter(|t| t.state.is_terminal() && t.role == Role::Provider) {
            expected.insert((
                c.id().to_string(),
                t.transfer_id.clone(),
                phase_text(&t.state.as_str().to_lowercase(), t.termination_reason.as_deref()),
            ));
        }
    }
    let mut seen: BTreeMap<(String, String, String), u32> = BTreeMap::new();
    for r in &records {
        let mut outcome = r.payload_value("outcome").unwrap_or_default();
        let terminal = match r.record_type {
            RecordType::NegotiationEvent => matches!(outcome, "finalized" | "terminated"),
            RecordType::TransferEvent => matches!(outcome, "completed" | "terminated"),
            RecordType::AccessDenied => true,
            // The provider's finalization is the recorded agreement.
            RecordType::AgreementRecorded => {
                outcome = "finalized";
                true
            }
        };
        if !terminal {
            continue;
        }
        let key = (
            r.actor.to_string(),
            r.subject_id.clone(),
            phase_text(outcome, r.payload_value("reason")),
        );
        *seen.entry(key).or_insert(0) += 1;
    }
    for k in &expected {
        match seen.get(k) {
            Some(1) => {}
            Some(n) => bad.push(format!("{} {} {}: {n} audit records", k.0, k.1, k.2)),
            None => bad.push(format!("{} {} {}: not audited", k.0, k.1, k.2)),
        }
    }
    for k in seen.keys() {
        if !expected.contains(k) {
            bad.push(format!("{} {} {}: audited without a terminal event", k.0, k.1, k.2));
        }
    }
    bad
}

// ---- running ---------------------------------------------------------------

struct Ctx<'a> {
    fed: &'a Federation,
    driver: &'a dyn Driver,
    events: Vec<String>,
    terminal: BTreeMap<String, String>,
    stats: BTreeMap<String, u64>,
    digests_match: bool,
    verdict: Option<ChainVerdict>,
}

impl Ctx<'_> {
    fn event(&mut self, text: String) {
        self.driver.note(text.clone());
        self.events.push(text);
    }

    fn consumer(&self) -> Result<ParticipantId, HarnessError> {
        self.fed
            .consumers()
            .first()
            .map(|n| n.id().clone())
            .ok_or_else(|| HarnessError::TopologyInvalid("no consumer".into()))
    }

    fn run_plan(&mut self, assets: Vec<(SelfDescription, String)>, transfers: u32) -> Result<(), HarnessError> {
        let consumer = self.consumer()?;
        let mut plan = Plan::new(self.driver.ops(), consumer);
        for (sd, offer) in assets {
            plan.add(sd, &offer, PURPOSE, transfers, true);
        }
        self.driver.settle(&mut plan)?;
        self.events.append(&mut plan.events);
        self.terminal.extend(plan.terminal_states());
        self.digests_match &= plan.digests_match();
        *self.stats.entry("payloadsPulled".into()).or_insert(0) += plan.pulled_count();
        Ok(())
    }

    fn seeded(&self) -> Vec<(SelfDescription, String)> {
        self.fed
            .seeded
            .iter()
            .map(|a| (a.description.clone(), SEEDED_OFFER.to_string()))
            .collect()
    }
}

/// Runs a named scenario. In-process topologies run on the seeded
/// scheduler; HTTP topologies start one service per node.
pub fn run_scenario(topology: &FederationTopology, name: &str) -> Result<ScenarioRun, HarnessError> {
    check_request(topology, name)?;
    if name == FUZZ_PROTOCOL {
        return crate::fuzz::run(topology, crate::fuzz::DEFAULT_SCHEDULES);
    }
    match topology.transport {
        TransportKind::InProcess => run_in_process(topology, name, Chooser::seeded(topology.seed)),
        TransportKind::Http => crate::http::run_scenario_http(topology, name),
    }
}

fn check_request(topology: &FederationTopology, name: &str) -> Result<(), HarnessError> {
    if !SHIPPED.contains(&name) {
        return Err(HarnessError::ScriptUnknown(name.to_string()));
    }
    topology.check()?;
    if name != PUBLISH_DISCOVER {
        topology.check_end_to_end()?;
    }
    Ok(())
}

pub fn header(topology: &FederationTopology, name: &str, schedules: Option<u64>) -> LogEvent {
    LogEvent::Header {
        scenario: name.to_string(),
        seed: topology.seed,
        topology: topology.clone(),
        schedules,
    }
}

fn run_in_process(topology: &FederationTopology, name: &str, chooser: Chooser) -> Result<ScenarioRun, HarnessError> {
    let recorder = Arc::new(Mutex::new(Recorder::new(chooser)));
    recorder.lock().expect("recorder lock").push(&header(topology, name, None));
    let mut fed = Federation::in_process(topology, recorder.clone())?;
    fed.seed_assets()?;
    let sim = fed.sim.clone().expect("in-process federations run on a simulated network");
    sim.flush();
    let driver = SimDriver { fed: &fed, sim };
    let result = play(name, &fed, &driver)?;
    let mut rec = recorder.lock().expect("recorder lock");
    if let Some(e) = rec.take_error() {
        return Err(e);
    }
    rec.push(&LogEvent::End { result: result.clone() });
    Ok(ScenarioRun {
        result,
        log: rec.to_bytes(),
    })
}

/// Scenario body shared by every transport. The federation must already
/// hold its seeded assets.
pub fn play(name: &str, fed: &Federation, driver: &dyn Driver) -> Result<ScenarioResult, HarnessError> {
    let mut ctx = Ctx {
        fed,
        driver,
        events: Vec::new(),
        terminal: BTreeMap::new(),
        stats: BTreeMap::new(),
        digests_match: true,
        verdict: None,
    };
    ctx.event(format!("seeded {} assets", fed.seeded.len()));
    match name {
        PUBLISH_DISCOVER => publish_discover(&mut ctx)?,
        NEGOTIATE_TRANSFER => {
            fed.sync_catalogues()?;
            let assets = ctx.seeded();
            ctx.run_plan(assets, 1)?;
        }
        HOT_INGEST => hot_ingest(&mut ctx)?,
        AUDIT_TAMPER => audit_tamper(&mut ctx)?,
        other => return Err(HarnessError::ScriptUnknown(other.to_string())),
    }
    let connectors = fed.connectors();
    let illegal = illegal_transitions(&connectors);
    let mismatched = peer_mismatches(&connectors);
    let unreconciled = reconcile(fed);
    for p in illegal.iter().chain(&mismatched).chain(&unreconciled) {
        ctx.event(format!("oracle: {p}"));
    }
    ctx.stats.insert("illegalTransitions".into(), illegal.len() as u64);
    ctx.stats.insert("peerMismatches".into(), mismatched.len() as u64);
    ctx.stats.insert("unreconciled".into(), unreconciled.len() as u64);
    ctx.stats.insert("auditRecords".into(), fed.clearing.len() as u64);
    if let Some(sim) = &fed.sim {
        let s = sim.stats();
        ctx.stats.insert("dropped".into(), s.dropped);
        ctx.stats.insert("duplicated".into(), s.duplicated);
        ctx.stats.insert("corrupted".into(), s.corrupted);
        ctx.stats.insert("clockJumps".into(), s.clock_jumps);
    }
    let verdict = ctx.verdict.unwrap_or_else(|| fed.clearing.verify_chain());
    Ok(ScenarioResult {
        scenario: name.to_string(),
        seed: fed.topology.seed,
        events: ctx.events,
        terminal_states: ctx.terminal,
        audit_verdict: verdict,
        digests_match: ctx.digests_match,
        stats: ctx.stats,
    })
}

/// A self-description that fails its schema: an ml-model without
/// `input-schema`.
pub fn invalid_description(fed: &Federation, provider: &ParticipantId) -> Result<SelfDescription, HarnessError> {
    let metadata = [("task".to_string(), "anomaly-detection".to_string())].into();
    SelfDescription::new(SelfDescriptionParts {
        asset_id: "unlabelled-model".into(),
        provider_id: provider.clone(),
        kind: AssetKind::MlModel,
        title: "Model without input schema".into(),
        metadata,
        offers: vec![Offer {
            offer_id: SEEDED_OFFER.into(),
            policy: UsagePolicy {
                permissions: vec![Rule::unconditional(Action::Use)],
                prohibitions: vec![],
            },
            license_tag: "research-only".into(),
        }],
        content_digest: None,
        temperature: Temperature::HotCapable,
        created_at: fed.clock.now(),
    })
    .map_err(|e| HarnessError::Domain(e.to_string()))
}

fn publish_discover(ctx: &mut Ctx) -> Result<(), HarnessError> {
    let fed = ctx.fed;
    for a in &fed.seeded {
        ctx.terminal
            .insert(format!("publish:{}", a.description.asset_id()), "VISIBLE".into());
    }
    let provider = fed
        .providers()
        .first()
        .map(|n| n.id().clone())
        .ok_or_else(|| HarnessError::TopologyInvalid("no provider".into()))?;
    let bad = invalid_description(fed, &provider)?;
    let entry = fed.publish(bad.clone(), None)?;
    let status = if entry.is_visible() { "VISIBLE" } else { "QUARANTINED" };
    ctx.terminal.insert(format!("publish:{}", bad.asset_id()), status.into());
    ctx.event(format!(
        "published {} -> {status} ({})",
        bad.asset_id(),
        entry
            .validation_report
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("; ")
    ));
    fed.sync_catalogues()?;

    let ops = ctx.driver.ops();
    let mut agreeing = true;
    for node in fed.nodes.values() {
        if node.spec.role == crate::topology::NodeRole::Provider {
            continue;
        }
        let found = ops.search(node.id(), &Query::all()).map_err(HarnessError::Domain)?;
        ctx.stats.insert(format!("entries:{}", node.id()), found.len() as u64);
        for e in &found {
            let sd = &e.self_description;
            let origin = fed.node(sd.provider_id())?.catalogue.lookup(sd.provider_id(), sd.asset_id());
            if origin.map(|o| o.self_description) != Some(sd.clone()) {
                agreeing = false;
                ctx.event(format!("{} holds a stale {}", node.id(), sd.asset_id()));
            }
        }
    }
    ctx.stats.insert("providerAuthoritative".into(), agreeing as u64);

    let consumer = ctx.consumer()?;
    let visible: BTreeSet<String> = ops
        .search(&consumer, &Query::all())
        .map_err(HarnessError::Domain)?
        .into_iter()
        .map(|e| e.self_description.asset_id().to_string())
        .collect();
    let mut ids: Vec<String> = fed.seeded.iter().map(|a| a.description.asset_id().to_string()).collect();
    ids.push(bad.asset_id().to_string());
    for id in ids {
        let state = if visible.contains(&id) { "DISCOVERED" } else { "NOT-FOUND" };
        ctx.terminal.insert(format!("discover:{id}"), state.into());
    }
    for kind in AssetKind::ALL {
        let q = Query {
            kind: Some(kind),
            ..Query::all()
        };
        let n = ops.search(&consumer, &q).map_err(HarnessError::Domain)?.len();
        ctx.event(format!("query kind={kind} -> {n}"));
        ctx.terminal.insert(format!("query:{kind}"), n.to_string());
    }
    Ok(())
}

fn hot_ingest(ctx: &mut Ctx) -> Result<(), HarnessError> {
    let fed = ctx.fed;
    let seed = fed.topology.seed;
    let ops = ctx.driver.ops();
    fed.sync_catalogues()?;
    let req = DataRequest::new(&HOT_REQUEST_CAPS, HOT_REQUEST_SAMPLES, PURPOSE);
    let before = fed.pipeline.experiments_run();
    let first = ops.ingest(&req, seed).map_err(HarnessError::Domain)?;
    let m = &first.manifest;
    ctx.event(format!(
        "ingest {:?} -> {:?} {} {} rows from {}",
        HOT_REQUEST_CAPS,
        first.path,
        m.asset_id,
        m.row_count,
        m.provenance.testbed_id.as_deref().unwrap_or("-")
    ));
    ctx.terminal.insert(
        "ingest:first".into(),
        format!("{}:{}", path_text(&first), m.object_digest.hex()),
    );
    fed.sync_catalogues()?;
    let mid = fed.pipeline.experiments_run();
    let again = ops.ingest(&req, seed).map_err(HarnessError::Domain)?;
    let after = fed.pipeline.experiments_run();
    ctx.event(format!("repeat ingest -> {:?} {}", again.path, again.manifest.asset_id));
    ctx.terminal.insert(
        "ingest:repeat".into(),
        format!("{}:{}", path_text(&again), again.manifest.object_digest.hex()),
    );
    ctx.stats.insert("experimentsFirst".into(), mid - before);
    ctx.stats.insert("experimentsRepeat".into(), after - mid);

    let consumer = ctx.consumer()?;
    let hot = ops
        .search(&consumer, &Query::all())
        .map_err(HarnessError::Domain)?
        .into_iter()
        .map(|e| e.self_description)
        .find(|sd| sd.asset_id() == m.asset_id)
        .ok_or_else(|| HarnessError::Domain(format!("{} was not discovered by {consumer}", m.asset_id)))?;
    let offer = hot
        .offers()
        .first()
        .map(|o| o.offer_id.clone())
        .ok_or_else(|| HarnessError::Domain("auto-published asset has no offer".into()))?;
    ctx.run_plan(vec![(hot, offer)], 1)
}

fn path_text(o: &IngestOutcome) -> &'static str {
    match o.path {
        dali_core::datalake::IngestPath::Cold => "cold",
        dali_core::datalake::IngestPath::Hot => "hot",
    }
}

/// Where the tamper step flips a byte: a record index and an offset inside
/// that line, drawn from a stream of its own so every transport agrees.
pub fn tamper_position(seed: u64, lines: &[&[u8]]) -> (usize, usize, u8) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7A3_9E11);
    let line = rng.gen_range(0..lines.len());
    let offset = rng.gen_range(0..lines[line].len());
    let mask = rng.gen_range(1..=255u8);
    (line, offset, mask)
}

fn audit_tamper(ctx: &mut Ctx) -> Result<(), HarnessError> {
    let fed = ctx.fed;
    fed.sync_catalogues()?;
    let assets: Vec<_> = ctx.seeded().into_iter().take(3).collect();
    ctx.run_plan(assets, 1)?;
    let log = fed.clearing.export_log().map_err(|e| HarnessError::Domain(e.to_string()))?;
    let untampered = verify_log_bytes(&log);
    ctx.terminal.insert("chain:untampered".into(), verdict_text(untampered));
    let lines: Vec<&[u8]> = log.strip_suffix(b"\n").unwrap_or(&log).split(|b| *b == b'\n').collect();
    if lines.is_empty() || lines[0].is_empty() {
        return Err(HarnessError::Domain("audit log is empty".into()));
    }
    let (line, offset, mask) = tamper_position(fed.topology.seed, &lines);
    let at: usize = lines[..line].iter().map(|l| l.len() + 1).sum::<usize>() + offset;
    let mut tampered = log.clone();
    tampered[at] ^= mask;
    let verdict = verify_log_bytes(&tampered);
    ctx.event(format!("flipped byte {at} (record {line}) with mask {mask:#04x}"));
    ctx.terminal.insert("chain:tampered".into(), verdict_text(verdict));
    ctx.stats.insert("tamperedRecord".into(), line as u64);
    ctx.stats.insert(
        "tamperDetected".into(),
        (!verdict.valid && verdict.first_bad_seq.is_some_and(|s| s <= line as u64)) as u64,
    );
    ctx.verdict = Some(verdict);
    Ok(())
}

pub fn verdict_text(v: ChainVerdict) -> String {
    match (v.valid, v.first_bad_seq) {
        (true, _) => "VALID".into(),
        (false, Some(s)) => format!("INVALID:firstBadSeq={s}"),
        (false, None) => "INVALID".into(),
    }
}

// ---- replay ----------------------------------------------------------------

pub fn replay(path: &Path) -> Result<ScenarioResult, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::LogCorrupt(format!("{}: {e}", path.display())))?;
    replay_bytes(&bytes)
}

/// Re-executes a recorded run. In-process logs are replayed draw by draw and
/// must reproduce the recorded result exactly; HTTP logs are re-run and
/// must reach the same terminal states.
pub fn replay_bytes(bytes: &[u8]) -> Result<ScenarioResult, HarnessError> {
    let parsed = parse_log(bytes)?;
    check_request(&parsed.topology, &parsed.scenario).map_err(|e| HarnessError::LogCorrupt(e.to_string()))?;
    if parsed.scenario == FUZZ_PROTOCOL {
        return crate::fuzz::replay(&parsed);
    }
    match parsed.topology.transport {
        TransportKind::InProcess => replay_in_process(parsed),
        TransportKind::Http => {
            let again = crate::http::run_scenario_http(&parsed.topology, &parsed.scenario)?.result;
            if again.terminal_states != parsed.result.terminal_states {
                return Err(HarnessError::Diverged("terminal states differ from the recorded run".into()));
            }
            Ok(again)
        }
    }
}

fn replay_in_process(parsed: ParsedLog) -> Result<ScenarioResult, HarnessError> {
    let run = run_in_process(&parsed.topology, &parsed.scenario, Chooser::Replay(parsed.draws.clone()))
        .map_err(|e| match e {
            HarnessError::Diverged(m) => HarnessError::Diverged(m),
            HarnessError::LogCorrupt(m) => HarnessError::LogCorrupt(m),
            other => HarnessError::Diverged(other.to_string()),
        })?;
    let replayed = parse_log(&run.log)?;
    if replayed.draws.len() != parsed.draws.len() {
        return Err(HarnessError::Diverged(format!(
            "replay used {} draws, the log records {}",
            replayed.draws.len(),
            parsed.draws.len()
        )));
    }
    if run.result != parsed.result {
        return Err(HarnessError::Diverged("result differs from the recorded run".into()));
    }
    Ok(run.result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_script_is_rejected() {
        let t = FederationTopology::default_federation();
        assert!(matches!(run_scenario(&t, "teleport"), Err(HarnessError::ScriptUnknown(_))));
    }

    #[test]
    fn end_to_end_needs_a_consumer() {
        let mut t = FederationTopology::default_federation();
        t.nodes.retain(|n| n.role != crate::topology::NodeRole::Consumer);
        assert!(matches!(
            run_scenario(&t, NEGOTIATE_TRANSFER),
            Err(HarnessError::TopologyInvalid(_))
        ));
    }

    #[test]
    fn transition_tables() {
        assert!(negotiation_legal("-", "REQUESTED"));
        assert!(!negotiation_legal("-", "AGREED"));
        assert!(negotiation_legal("AGREED", "FINALIZED"));
        assert!(!negotiation_legal("FINALIZED", "TERMINATED"));
        assert!(transfer_legal("STARTED", "COMPLETED"));
        assert!(!transfer_legal("REQUESTED", "COMPLETED"));
    }

    #[test]
    fn tamper_position_stays_in_bounds() {
        let lines: Vec<&[u8]> = vec![b"abc", b"de", b"f"];
        for seed in 0..200 {
            let (l, o, m) = tamper_position(seed, &lines);
            assert!(o < lines[l].len() && m != 0);
        }
    }
}
