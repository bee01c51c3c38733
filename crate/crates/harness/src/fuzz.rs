//! Protocol fuzzing: many short seeded schedules on a one-provider,
//! one-consumer federation with random provider behaviour, consumer
//! choices and drop/duplicate faults. Each schedule is checked by the
//! state-machine, peer-consistency, audit and round-count oracles.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dali_core::clearinghouse::ChainVerdict;
use dali_core::connector::{ConnectorConfig, ProviderDecision, ProviderMode};
use dali_core::model::{digest_of, Offer, SelfDescriptionParts};
use dali_core::policy::LeftOperand;
use dali_core::{AssetKind, LogicalClock, ParticipantId, SelfDescription, Temperature};

use crate::eventlog::{Chooser, LogEvent, ParsedLog, Recorder};
use crate::federation::{seeded_policy, Federation, Wiring, SEEDED_OFFER};
use crate::scenario::{
    header, illegal_transitions, peer_mismatches, phase_text, reconcile, verdict_text, Plan, ScenarioResult,
    ScenarioRun, SimDriver, FUZZ_PROTOCOL,
};
use crate::sim::{Script, SimNet};
use crate::topology::{FaultKind, FaultSpec, FederationTopology, NodeRole, NodeSpec};
use crate::HarnessError;

pub const DEFAULT_SCHEDULES: u64 = 10_000;
/// Longest causal message chain allowed per process on loss-free links.
pub const MAX_RELIABLE_ROUNDS: u32 = 6;
pub const DROP_RATES: [f64; 3] = [0.0, 0.1, 0.3];
pub const DUPLICATE_RATES: [f64; 3] = [0.0, 0.2, 0.5];
const REPORTED_FAILURES: usize = 50;

/// Random choices of one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleParams {
    pub seed: u64,
    pub manual: bool,
    pub decision: u8,
    pub assets: u8,
    pub proposal: u8,
    pub accept_counter: bool,
    pub transfers: u32,
    pub purpose: &'static str,
    pub drop: f64,
    pub duplicate: f64,
}

impl ScheduleParams {
    pub fn draw(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ScheduleParams {
            seed,
            manual: rng.gen_bool(0.3),
            decision: rng.gen_range(0..3),
            assets: rng.gen_range(1..=2),
            proposal: rng.gen_range(0..10),
            accept_counter: rng.gen_bool(0.7),
            transfers: rng.gen_range(1..=3),
            purpose: if rng.gen_bool(0.85) { "research" } else { "marketing" },
            drop: DROP_RATES[rng.gen_range(0..DROP_RATES.len())],
            duplicate: DUPLICATE_RATES[rng.gen_range(0..DUPLICATE_RATES.len())],
        }
    }

    pub fn reliable(&self) -> bool {
        self.drop == 0.0
    }
}

/// Outcome of one schedule.
#[derive(Debug, Clone, Default)]
pub struct ScheduleReport {
    pub failures: Vec<String>,
    pub terminal: Vec<String>,
    pub max_rounds: u32,
    pub illegal: u64,
    pub mismatched: u64,
    pub unreconciled: u64,
    pub stuck: bool,
    pub digests_match: bool,
    pub verdict: Option<ChainVerdict>,
    pub dropped: u64,
    pub duplicated: u64,
    pub delivered: u64,
}

fn schedule_topology(base: &FederationTopology, p: &ScheduleParams) -> FederationTopology {
    let pick = |role: NodeRole, fallback: &str| {
        base.nodes
            .iter()
            .find(|n| n.role == role)
            .cloned()
            .unwrap_or_else(|| NodeSpec {
                participant_id: ParticipantId::parse(fallback).expect("static id"),
                role,
                testbed_profile: None,
            })
    };
    let mut faults = base.faults.clone();
    if p.drop > 0.0 {
        faults.push(FaultSpec::with_probability(FaultKind::DropMessage, p.drop));
    }
    if p.duplicate > 0.0 {
        faults.push(FaultSpec::with_probability(FaultKind::DuplicateMessage, p.duplicate));
    }
    FederationTopology {
        nodes: vec![
            pick(NodeRole::Provider, "did:dali:eur:testbed"),
            pick(NodeRole::Consumer, "did:dali:lab:consumer"),
            pick(NodeRole::Federator, "did:dali:dali:federator"),
        ],
        transport: base.transport,
        seed: p.seed,
        faults,
    }
}

fn fuzz_asset(fed: &Federation, provider: &ParticipantId, index: u8, payload: &[u8]) -> SelfDescription {
    let metadata = [
        ("task".to_string(), "traffic-forecasting".to_string()),
        ("input-schema".to_string(), "Slice-Throughput-Mbps".to_string()),
    ]
    .into();
    SelfDescription::new(SelfDescriptionParts {
        asset_id: format!("fuzz-model-{index}"),
        provider_id: provider.clone(),
        kind: AssetKind::MlModel,
        title: format!("Fuzz model {index}"),
        metadata,
        offers: vec![Offer {
            offer_id: SEEDED_OFFER.into(),
            policy: seeded_policy(AssetKind::Dataset),
            license_tag: "research-only".into(),
        }],
        content_digest: Some(digest_of(payload)),
        temperature: Temperature::Cold,
        created_at: fed.clock.now(),
    })
    .expect("fuzz asset is well formed")
}

/// Plan plus the provider's manual decisions.
struct FuzzScript<'a> {
    plan: Plan<'a>,
    fed: &'a Federation,
    provider: ParticipantId,
    decision: ProviderDecision,
}

impl Script for FuzzScript<'_> {
    fn enabled(&mut self) -> Vec<String> {
        let mut ops = self.plan.enabled();
        if let Ok(c) = self.fed.node(&self.provider).and_then(|n| n.connector()) {
            ops.extend(c.pending_decisions().into_iter().map(|n| format!("decide:{}", n.negotiation_id)));
        }
        ops
    }

    fn perform(&mut self, label: &str) -> String {
        match label.strip_prefix("decide:") {
            Some(id) => match self.fed.node(&self.provider).and_then(|n| n.connector()) {
                Ok(c) => match c.decide_pending(id, self.decision.clone()) {
                    Ok(v) => format!("{id} {}", v.state),
                    Err(e) => format!("{id} error {e}"),
                },
                Err(e) => e.to_string(),
            },
            None => self.plan.perform(label),
        }
    }
}

/// Runs one schedule and applies every oracle.
pub fn run_schedule(base: &FederationTopology, p: &ScheduleParams) -> Result<ScheduleReport, HarnessError> {
    let topology = schedule_topology(base, p);
    let recorder = Arc::new(Mutex::new(Recorder::new(Chooser::seeded(p.seed))));
    let clock = LogicalClock::default();
    let sim = Arc::new(SimNet::new(recorder, topology.faults.clone(), clock.clone()));
    let config = ConnectorConfig {
        mode: if p.manual { ProviderMode::Manual } else { ProviderMode::AutoAccept },
        ..ConnectorConfig::default()
    };
    let fed = Federation::assemble(
        &topology,
        Arc::new(clock.clone()),
        Some(clock),
        Wiring::InProcess(sim.clone()),
        None,
        config,
    )?;
    let provider = topology.nodes[0].participant_id.clone();
    let consumer = topology.nodes[1].participant_id.clone();

    let mut payload_rng = ChaCha8Rng::seed_from_u64(p.seed ^ 0x5EED);
    let driver = SimDriver {
        fed: &fed,
        sim: sim.clone(),
    };
    let mut plan = Plan::new(&driver, consumer);
    for i in 0..p.assets {
        let mut payload = vec![0u8; payload_rng.gen_range(1..150_000)];
        payload_rng.fill(&mut payload[..]);
        let sd = fuzz_asset(&fed, &provider, i, &payload);
        fed.publish(sd.clone(), Some(&payload))?;
        let advertised = sd.offers()[0].policy.clone();
        let (sd, offer) = match p.proposal {
            // propose something else: the provider counters with its offer
            0..=2 => {
                let mut parts = sd.into_parts();
                let mut relaxed = advertised;
                relaxed.permissions[1].constraints.retain(|c| c.left != LeftOperand::UseCount);
                parts.offers[0].policy = relaxed;
                (SelfDescription::new(parts).expect("still well formed"), SEEDED_OFFER)
            }
            3 => (sd, "no-such-offer"),
            _ => (sd, SEEDED_OFFER),
        };
        plan.add(sd, offer, p.purpose, p.transfers, p.accept_counter);
    }
    let advertised_policy = seeded_policy(AssetKind::Dataset);
    let decision = match p.decision {
        0 => ProviderDecision::Accept,
        1 => ProviderDecision::Counter(advertised_policy),
        _ => ProviderDecision::Reject,
    };
    let mut script = FuzzScript {
        plan,
        fed: &fed,
        provider,
        decision,
    };
    let mut report = ScheduleReport {
        digests_match: true,
        ..ScheduleReport::default()
    };
    if let Err(e) = sim.run(&mut script) {
        report.stuck = true;
        report.failures.push(format!("schedule {}: {e}", p.seed));
    }
    let connectors = fed.connectors();
    let illegal = illegal_transitions(&connectors);
    let mismatched = peer_mismatches(&connectors);
    let unreconciled = reconcile(&fed);
    report.illegal = illegal.len() as u64;
    report.mismatched = mismatched.len() as u64;
    report.unreconciled = unreconciled.len() as u64;
    for f in illegal.iter().chain(&mismatched).chain(&unreconciled) {
        report.failures.push(format!("schedule {}: {f}", p.seed));
    }
    report.max_rounds = sim.max_depth();
    if p.reliable() && report.max_rounds > MAX_RELIABLE_ROUNDS {
        report.failures.push(format!(
            "schedule {}: {} rounds on a loss-free link",
            p.seed, report.max_rounds
        ));
    }
    for c in &connectors {
        for n in c.negotiations() {
            report.terminal.push(format!(
                "negotiation:{}:{}",
                role_text(n.role),
                phase_text(n.state.as_str(), n.termination_reason.as_deref())
            ));
        }
        for t in c.transfers() {
            report.terminal.push(format!(
                "transfer:{}:{}",
                role_text(t.role),
                phase_text(t.state.as_str(), t.termination_reason.as_deref())
            ));
        }
    }
    report.digests_match = script.plan.digests_match();
    let verdict = fed.clearing.verify_chain();
    if !verdict.valid {
        report.failures.push(format!("schedule {}: audit chain {}", p.seed, verdict_text(verdict)));
    }
    report.verdict = Some(verdict);
    let s = sim.stats();
    report.dropped = s.dropped;
    report.duplicated = s.duplicated;
    report.delivered = s.delivered;
    Ok(report)
}

fn role_text(r: dali_core::connector::Role) -> &'static str {
    match r {
        dali_core::connector::Role::Consumer => "consumer",
        dali_core::connector::Role::Provider => "provider",
    }
}

/// Per-schedule seeds derived from the topology seed.
pub fn schedule_seeds(seed: u64, schedules: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..schedules).map(|_| rng.gen()).collect()
}

/// Runs `schedules` schedules. The log records each schedule's seed, which
/// is all a replay needs.
pub fn run(topology: &FederationTopology, schedules: u64) -> Result<ScenarioRun, HarnessError> {
    topology.check_end_to_end()?;
    let mut log = Recorder::new(Chooser::seeded(topology.seed));
    log.push(&header(topology, FUZZ_PROTOCOL, Some(schedules)));
    let mut terminal: BTreeMap<String, u64> = BTreeMap::new();
    let mut stats: BTreeMap<String, u64> = BTreeMap::new();
    let mut events = Vec::new();
    let mut failures = 0usize;
    let mut digests_match = true;
    let mut verdict = ChainVerdict::VALID;
    let mut max_reliable = 0u32;
    for (index, seed) in schedule_seeds(topology.seed, schedules).into_iter().enumerate() {
        let p = ScheduleParams::draw(seed);
        let r = run_schedule(topology, &p)?;
        for t in &r.terminal {
            *terminal.entry(t.clone()).or_insert(0) += 1;
        }
        let mut add = |k: &str, v: u64| *stats.entry(k.to_string()).or_insert(0) += v;
        add("schedules", 1);
        add("illegalTransitions", r.illegal);
        add("peerMismatches", r.mismatched);
        add("unreconciled", r.unreconciled);
        add("stuck", r.stuck as u64);
        add("dropped", r.dropped);
        add("duplicated", r.duplicated);
        add("delivered", r.delivered);
        if p.reliable() {
            add("reliableSchedules", 1);
            max_reliable = max_reliable.max(r.max_rounds);
            if r.max_rounds > MAX_RELIABLE_ROUNDS {
                add("roundViolations", 1);
            }
        }
        digests_match &= r.digests_match;
        if let Some(v) = r.verdict {
            if verdict.valid && !v.valid {
                verdict = v;
            }
        }
        let outcome = if r.failures.is_empty() { "ok".to_string() } else { format!("fail: {}", r.failures[0]) };
        for f in r.failures {
            failures += 1;
            if events.len() < REPORTED_FAILURES {
                events.push(f);
            }
        }
        log.push(&LogEvent::Schedule {
            index: index as u64,
            seed,
            outcome,
        });
    }
    stats.insert("maxReliableRounds".into(), max_reliable as u64);
    stats.entry("roundViolations".into()).or_insert(0);
    stats.insert("failures".into(), failures as u64);
    events.push(format!("{schedules} schedules, {failures} oracle failures"));
    let result = ScenarioResult {
        scenario: FUZZ_PROTOCOL.to_string(),
        seed: topology.seed,
        events,
        terminal_states: terminal.into_iter().map(|(k, v)| (k, v.to_string())).collect(),
        audit_verdict: verdict,
        digests_match,
        stats,
    };
    log.push(&LogEvent::End { result: result.clone() });
    Ok(ScenarioRun {
        result,
        log: log.to_bytes(),
    })
}

pub fn replay(parsed: &ParsedLog) -> Result<ScenarioResult, HarnessError> {
    let schedules = parsed
        .schedules
        .ok_or_else(|| HarnessError::LogCorrupt("fuzz log without a schedule count".into()))?;
    if parsed.fuzz_seeds.len() as u64 != schedules {
        return Err(HarnessError::LogCorrupt(format!(
            "log lists {} of {schedules} schedules",
            parsed.fuzz_seeds.len()
        )));
    }
    if parsed.fuzz_seeds != schedule_seeds(parsed.seed, schedules) {
        return Err(HarnessError::Diverged("schedule seeds do not follow from the header seed".into()));
    }
    let run = run(&parsed.topology, schedules)?;
    if run.result != parsed.result {
        return Err(HarnessError::Diverged("fuzz result differs from the recorded run".into()));
    }
    Ok(run.result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use dali_core::policy::{Action, Constraint, Operator, Rule};

    #[test]
    fn params_cover_the_fault_mix() {
        let ps: Vec<_> = schedule_seeds(1, 400).into_iter().map(ScheduleParams::draw).collect();
        for d in DROP_RATES {
            assert!(ps.iter().any(|p| p.drop == d));
        }
        for d in DUPLICATE_RATES {
            assert!(ps.iter().any(|p| p.duplicate == d));
        }
        assert!(ps.iter().any(|p| p.manual) && ps.iter().any(|p| !p.manual));
    }

    #[test]
    fn small_campaign_is_clean_and_replays() {
        let t = FederationTopology::default_federation();
        let run = run(&t, 40).unwrap();
        assert_eq!(run.result.stats["failures"], 0, "{:?}", run.result.events);
        let parsed = crate::eventlog::parse_log(&run.log).unwrap();
        assert_eq!(replay(&parsed).unwrap(), run.result);
    }

    #[test]
    fn reliable_happy_path_fits_the_round_budget() {
        let t = FederationTopology::default_federation();
        let mut p = ScheduleParams::draw(3);
        p.drop = 0.0;
        p.duplicate = 0.0;
        p.manual = false;
        p.proposal = 0;
        p.accept_counter = true;
        p.purpose = "research";
        let r = run_schedule(&t, &p).unwrap();
        assert!(r.failures.is_empty(), "{:?}", r.failures);
        assert_eq!(r.max_rounds, MAX_RELIABLE_ROUNDS);
    }

    #[test]
    fn use_constraint_type_is_checked() {
        let p = seeded_policy(AssetKind::Dataset);
        assert!(p.permissions[1]
            .constraints
            .contains(&Constraint::new(LeftOperand::UseCount, Operator::Lt, 2)));
        assert_eq!(p.prohibitions, vec![Rule::unconditional(Action::ReShare)]);
    }
}
