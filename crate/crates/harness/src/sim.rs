//! Deterministic in-process network and scheduler.
//!
//! Sends land in a pending pool; the scheduler repeatedly picks (with the
//! seeded [`Recorder`]) either one pending message to deliver or one enabled
//! local decision of the running script. Drop and duplicate faults are
//! applied at send time, payload corruption when a chunk is served, clock
//! jumps between steps. When nothing is pending and no decision is enabled,
//! every connector gets a retransmission tick.

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex, RwLock};

use dali_core::connector::{Chunk, Connector, DataPlaneError, Envelope, HandleOutcome, Transport, TransportError};
use dali_core::identity::AccessToken;
use dali_core::{LogicalClock, ParticipantId};

use crate::eventlog::{LogEvent, Recorder};
use crate::topology::{FaultKind, FaultSpec};
use crate::HarnessError;

/// Upper bound on retransmission rounds before a run is declared stuck.
pub const MAX_TICK_ROUNDS: u64 = 200;
pub const MAX_STEPS: u64 = 200_000;
pub const DEFAULT_CLOCK_JUMP_SECS: i64 = 3_600;

#[derive(Debug, Clone)]
struct Pending {
    seq: u64,
    to: ParticipantId,
    env: Envelope,
    depth: u32,
}

#[derive(Default)]
struct NetState {
    pending: Vec<Pending>,
    next_seq: u64,
    /// Causal depth of the message currently being delivered.
    delivering: Option<u32>,
    /// Deepest message seen per correlation id.
    depth: BTreeMap<String, u32>,
    sends: u64,
    chunks: u64,
    steps: u64,
    dropped: u64,
    duplicated: u64,
    corrupted: u64,
    clock_jumps: u64,
}

pub struct SimNet {
    nodes: RwLock<BTreeMap<ParticipantId, Arc<Connector>>>,
    state: Mutex<NetState>,
    recorder: Arc<Mutex<Recorder>>,
    faults: Vec<FaultSpec>,
    clock: LogicalClock,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct NetStats {
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    pub corrupted: u64,
    pub clock_jumps: u64,
    pub tick_rounds: u64,
}

/// Local decisions a scenario may take between deliveries.
pub trait Script {
    /// Currently enabled decisions, in a stable order.
    fn enabled(&mut self) -> Vec<String>;
    /// Performs one; the returned text is logged.
    fn perform(&mut self, label: &str) -> String;
}

/// A script with no decisions of its own.
pub struct Idle;

impl Script for Idle {
    fn enabled(&mut self) -> Vec<String> {
        Vec::new()
    }

    fn perform(&mut self, _label: &str) -> String {
        String::new()
    }
}

impl SimNet {
    pub fn new(recorder: Arc<Mutex<Recorder>>, faults: Vec<FaultSpec>, clock: LogicalClock) -> Self {
        SimNet {
            nodes: RwLock::new(BTreeMap::new()),
            state: Mutex::new(NetState::default()),
            recorder,
            faults,
            clock,
        }
    }

    pub fn register(&self, c: Arc<Connector>) {
        self.nodes.write().expect("sim nodes lock").insert(c.id().clone(), c);
    }

    fn node(&self, id: &ParticipantId) -> Option<Arc<Connector>> {
        self.nodes.read().expect("sim nodes lock").get(id).cloned()
    }

    pub fn recorder(&self) -> &Arc<Mutex<Recorder>> {
        &self.recorder
    }

    fn log(&self, e: LogEvent) {
        self.recorder.lock().expect("recorder lock").push(&e);
    }

    pub fn pending_len(&self) -> usize {
        self.state.lock().expect("sim state lock").pending.len()
    }

    /// Deepest causal chain observed for a correlation id.
    pub fn depth_of(&self, correlation_id: &str) -> u32 {
        self.state
            .lock()
            .expect("sim state lock")
            .depth
            .get(correlation_id)
            .copied()
            .unwrap_or(0)
    }

    /// Deepest causal chain over all correlation ids.
    pub fn max_depth(&self) -> u32 {
        self.state
            .lock()
            .expect("sim state lock")
            .depth
            .values()
            .copied()
            .max()
            .unwrap_or(0)
    }

    pub fn stats(&self) -> NetStats {
        let s = self.state.lock().expect("sim state lock");
        NetStats {
            delivered: s.next_seq.saturating_sub(s.dropped),
            dropped: s.dropped,
            duplicated: s.duplicated,
            corrupted: s.corrupted,
            clock_jumps: s.clock_jumps,
            tick_rounds: 0,
        }
    }

    /// Whether a fault rule fires for the `index`-th eligible event.
    fn fires(&self, f: &FaultSpec, index: u64) -> bool {
        match (f.probability, f.trigger_index) {
            (Some(p), _) => self.recorder.lock().expect("recorder lock").chance(p),
            (None, Some(t)) => t == index,
            (None, None) => false,
        }
    }

    fn copies_for(&self, from: &ParticipantId, to: &ParticipantId, index: u64) -> u32 {
        let mut copies = 1;
        for f in &self.faults {
            if !f.covers(from, to) {
                continue;
            }
            match f.kind {
                FaultKind::DropMessage if copies > 0 && self.fires(f, index) => copies = 0,
                FaultKind::DuplicateMessage if copies > 0 && self.fires(f, index) => copies += 1,
                _ => {}
            }
        }
        copies
    }

    /// Runs the scheduler until every message is delivered, the script has
    /// nothing left to do and every connector is quiescent.
    pub fn run(&self, script: &mut dyn Script) -> Result<NetStats, HarnessError> {
        let mut rounds = 0u64;
        loop {
            if let Some(e) = self.recorder.lock().expect("recorder lock").take_error() {
                return Err(e);
            }
            let step = {
                let mut s = self.state.lock().expect("sim state lock");
                s.steps += 1;
                s.steps
            };
            if step > MAX_STEPS {
                return Err(HarnessError::Diverged(format!("no quiescence after {MAX_STEPS} steps")));
            }
            self.maybe_jump_clock(step);

            let ops = script.enabled();
            let pending = self.pending_len();
            let choices = pending + ops.len();
            if choices == 0 {
                let nodes: Vec<_> = self.nodes.read().expect("sim nodes lock").values().cloned().collect();
                if nodes.iter().all(|n| n.is_quiescent()) {
                    let mut st = self.stats();
                    st.tick_rounds = rounds;
                    return Ok(st);
                }
                rounds += 1;
                if rounds > MAX_TICK_ROUNDS {
                    return Err(HarnessError::Diverged(format!("still waiting after {MAX_TICK_ROUNDS} rounds")));
                }
                let resent: usize = nodes.iter().map(|n| n.tick()).sum();
                self.log(LogEvent::Tick {
                    round: rounds,
                    resent: resent as u64,
                });
                continue;
            }
            let pick = self.recorder.lock().expect("recorder lock").pick(choices as u64) as usize;
            if pick < pending {
                self.deliver(pick);
            } else {
                let label = &ops[pick - pending];
                let outcome = script.perform(label);
                self.log(LogEvent::Op {
                    node: String::new(),
                    op: label.clone(),
                    target: String::new(),
                    outcome,
                });
            }
        }
    }

    fn maybe_jump_clock(&self, step: u64) {
        for f in self.faults.iter().filter(|f| f.kind == FaultKind::ClockJump) {
            if self.fires(f, step) {
                let secs = f.jump_secs.unwrap_or(DEFAULT_CLOCK_JUMP_SECS);
                self.clock.advance(secs);
                self.state.lock().expect("sim state lock").clock_jumps += 1;
                self.log(LogEvent::Fault {
                    kind: "clock-jump".into(),
                    detail: format!("+{secs}s at step {step}"),
                });
            }
        }
    }

    fn deliver(&self, index: usize) {
        let msg = {
            let mut s = self.state.lock().expect("sim state lock");
            let m = s.pending.remove(index);
            s.delivering = Some(m.depth);
            let d = s.depth.entry(m.env.correlation_id.clone()).or_insert(0);
            *d = (*d).max(m.depth);
            m
        };
        let outcome = match self.node(&msg.to) {
            Some(n) => match n.handle(&msg.env) {
                Ok(HandleOutcome::Processed) => "processed".to_string(),
                Ok(HandleOutcome::Duplicate) => "duplicate".to_string(),
                Ok(HandleOutcome::Ignored(why)) => format!("ignored:{why}"),
                Err(e) => format!("rejected:{e}"),
            },
            None => "no-such-node".to_string(),
        };
        self.state.lock().expect("sim state lock").delivering = None;
        self.log(LogEvent::Deliver {
            seq: msg.seq,
            from: msg.env.sender_id.to_string(),
            to: msg.to.to_string(),
            message_type: msg.env.message_type.clone(),
            correlation_id: msg.env.correlation_id.clone(),
            outcome,
        });
    }

    /// Delivers everything in FIFO order without faults or draws; used by
    /// setup phases that are not part of the recorded schedule.
    pub fn flush(&self) {
        loop {
            let next = {
                let mut s = self.state.lock().expect("sim state lock");
                if s.pending.is_empty() {
                    None
                } else {
                    Some(s.pending.remove(0))
                }
            };
            let Some(m) = next else { break };
            if let Some(n) = self.node(&m.to) {
                let _ = n.handle(&m.env);
            }
        }
    }
}

impl Transport for SimNet {
    fn send(&self, to: &ParticipantId, env: &Envelope) -> Result<(), TransportError> {
        if self.node(to).is_none() {
            return Err(TransportError::UnknownPeer(to.clone()));
        }
        let index = {
            let mut s = self.state.lock().expect("sim state lock");
            s.sends += 1;
            s.sends - 1
        };
        let copies = self.copies_for(&env.sender_id, to, index);
        let mut s = self.state.lock().expect("sim state lock");
        let depth = match s.delivering {
            Some(d) => d + 1,
            None => s.depth.get(&env.correlation_id).copied().unwrap_or(0) + 1,
        };
        if copies == 0 {
            s.dropped += 1;
            drop(s);
            self.log(LogEvent::Fault {
                kind: "drop-message".into(),
                detail: format!("{} {}", env.message_type, env.correlation_id),
            });
            return Ok(());
        }
        if copies > 1 {
            s.duplicated += (copies - 1) as u64;
        }
        for _ in 0..copies {
            let seq = s.next_seq;
            s.next_seq += 1;
            s.pending.push(Pending {
                seq,
                to: to.clone(),
                env: env.clone(),
                depth,
            });
        }
        Ok(())
    }

    fn fetch_chunk(
        &self,
        provider: &ParticipantId,
        transfer_id: &str,
        token: &AccessToken,
        index: u64,
    ) -> Result<Chunk, DataPlaneError> {
        let node = self
            .node(provider)
            .ok_or_else(|| DataPlaneError::Transient(format!("no route to {provider}")))?;
        let mut chunk = node.serve_chunk(transfer_id, token, index)?;
        let n = {
            let mut s = self.state.lock().expect("sim state lock");
            s.chunks += 1;
            s.chunks - 1
        };
        for f in self.faults.iter().filter(|f| f.kind == FaultKind::CorruptPayloadByte) {
            if chunk.data.is_empty() || !self.fires(f, n) {
                continue;
            }
            let at = self.recorder.lock().expect("recorder lock").pick(chunk.data.len() as u64) as usize;
            chunk.data[at] ^= 0x01;
            self.state.lock().expect("sim state lock").corrupted += 1;
            self.log(LogEvent::Fault {
                kind: "corrupt-payload-byte".into(),
                detail: format!("{transfer_id} chunk {index} byte {at}"),
            });
        }
        Ok(chunk)
    }
}
