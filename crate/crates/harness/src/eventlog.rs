//! Scenario event logs: JSON Lines with a header, every seeded draw, the
//! observable events, and an end marker carrying the result.

use std::collections::VecDeque;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scenario::ScenarioResult;
use crate::topology::FederationTopology;
use crate::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case", rename_all_fields = "camelCase")]
pub enum LogEvent {
    Header {
        scenario: String,
        seed: u64,
        topology: FederationTopology,
        #[serde(default)]
        schedules: Option<u64>,
    },
    Draw {
        bound: u64,
        value: u64,
    },
    Op {
        node: String,
        op: String,
        target: String,
        outcome: String,
    },
    Deliver {
        seq: u64,
        from: String,
        to: String,
        message_type: String,
        correlation_id: String,
        outcome: String,
    },
    Fault {
        kind: String,
        detail: String,
    },
    Tick {
        round: u64,
        resent: u64,
    },
    Schedule {
        index: u64,
        seed: u64,
        outcome: String,
    },
    Note {
        text: String,
    },
    End {
        result: ScenarioResult,
    },
}

/// Source of every nondeterministic choice in a run. Live runs draw from a
/// seeded ChaCha8 stream; replays read the draws back from a log.
pub enum Chooser {
    Live(ChaCha8Rng),
    Replay(VecDeque<(u64, u64)>),
}

impl Chooser {
    pub fn seeded(seed: u64) -> Self {
        Chooser::Live(ChaCha8Rng::seed_from_u64(seed))
    }
}

/// Event log plus the chooser that feeds it.
pub struct Recorder {
    chooser: Chooser,
    lines: Vec<String>,
    error: Option<HarnessError>,
}

impl Recorder {
    pub fn new(chooser: Chooser) -> Self {
        Recorder {
            chooser,
            lines: Vec::new(),
            error: None,
        }
    }

    pub fn push(&mut self, e: &LogEvent) {
        self.lines.push(serde_json::to_string(e).expect("log events serialize"));
    }

    /// Uniform draw in `0..bound` (bound > 0). On a replay mismatch the
    /// recorder latches `LogCorrupt` and returns 0.
    pub fn pick(&mut self, bound: u64) -> u64 {
        debug_assert!(bound > 0);
        let value = match &mut self.chooser {
            Chooser::Live(rng) => rng.gen_range(0..bound),
            Chooser::Replay(draws) => match draws.pop_front() {
                Some((b, v)) if b == bound && v < bound => v,
                Some((b, _)) => {
                    self.fail(format!("recorded draw bound {b} does not match {bound}"));
                    0
                }
                None => {
                    self.fail("log ends before the recorded schedule does".into());
                    0
                }
            },
        };
        self.push(&LogEvent::Draw { bound, value });
        value
    }

    /// True with probability `p`, at a resolution of one in a million.
    pub fn chance(&mut self, p: f64) -> bool {
        if p <= 0.0 {
            return false;
        }
        if p >= 1.0 {
            return true;
        }
        self.pick(1_000_000) < (p * 1_000_000.0) as u64
    }

    fn fail(&mut self, why: String) {
        if self.error.is_none() {
            self.error = Some(HarnessError::LogCorrupt(why));
        }
    }

    pub fn error(&self) -> Option<&HarnessError> {
        self.error.as_ref()
    }

    pub fn take_error(&mut self) -> Option<HarnessError> {
        self.error.take()
    }

    pub fn replay_exhausted(&self) -> bool {
        match &self.chooser {
            Chooser::Live(_) => true,
            Chooser::Replay(d) => d.is_empty(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for l in &self.lines {
            out.extend_from_slice(l.as_bytes());
            out.push(b'\n');
        }
        out
    }
}

/// A parsed log: its header, recorded draws, and final result.
#[derive(Debug, Clone)]
pub struct ParsedLog {
    pub scenario: String,
    pub seed: u64,
    pub topology: FederationTopology,
    pub schedules: Option<u64>,
    pub draws: VecDeque<(u64, u64)>,
    pub fuzz_seeds: Vec<u64>,
    pub result: ScenarioResult,
}

pub fn parse_log(bytes: &[u8]) -> Result<ParsedLog, HarnessError> {
    let corrupt = |m: String| HarnessError::LogCorrupt(m);
    let text = std::str::from_utf8(bytes).map_err(|e| corrupt(e.to_string()))?;
    if !text.is_empty() && !text.ends_with('\n') {
        return Err(corrupt("last line is truncated".into()));
    }
    let mut header = None;
    let mut draws = VecDeque::new();
    let mut fuzz_seeds = Vec::new();
    let mut result = None;
    for (i, line) in text.lines().enumerate() {
        let ev: LogEvent = serde_json::from_str(line).map_err(|e| corrupt(format!("line {}: {e}", i + 1)))?;
        if result.is_some() {
            return Err(corrupt(format!("line {}: event after end marker", i + 1)));
        }
        match ev {
            LogEvent::Header {
                scenario,
                seed,
                topology,
                schedules,
            } if i == 0 => header = Some((scenario, seed, topology, schedules)),
            LogEvent::Header { .. } => return Err(corrupt(format!("line {}: unexpected header", i + 1))),
            _ if header.is_none() => return Err(corrupt("missing header".into())),
            LogEvent::Draw { bound, value } => draws.push_back((bound, value)),
            LogEvent::Schedule { seed, .. } => fuzz_seeds.push(seed),
            LogEvent::End { result: r } => result = Some(r),
            _ => {}
        }
    }
    let (scenario, seed, topology, schedules) = header.ok_or_else(|| corrupt("empty log".into()))?;
    let result = result.ok_or_else(|| corrupt("missing end marker".into()))?;
    Ok(ParsedLog {
        scenario,
        seed,
        topology,
        schedules,
        draws,
        fuzz_seeds,
        result,
    })
}

pub fn read_log(path: &Path) -> Result<ParsedLog, HarnessError> {
    let bytes = std::fs::read(path).map_err(|e| HarnessError::LogCorrupt(format!("{}: {e}", path.display())))?;
    parse_log(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn replay_reproduces_draws() {
        let mut live = Recorder::new(Chooser::seeded(9));
        let a: Vec<u64> = (1..50).map(|b| live.pick(b)).collect();
        let draws = live
            .lines
            .iter()
            .map(|l| match serde_json::from_str::<LogEvent>(l).unwrap() {
                LogEvent::Draw { bound, value } => (bound, value),
                _ => unreachable!(),
            })
            .collect();
        let mut replay = Recorder::new(Chooser::Replay(draws));
        let b: Vec<u64> = (1..50).map(|b| replay.pick(b)).collect();
        assert_eq!(a, b);
        assert_eq!(live.to_bytes(), replay.to_bytes());
        assert!(replay.error().is_none() && replay.replay_exhausted());
        replay.pick(3);
        assert!(matches!(replay.error(), Some(HarnessError::LogCorrupt(_))));
    }

    #[test]
    fn chance_extremes() {
        let mut r = Recorder::new(Chooser::seeded(1));
        assert!(!r.chance(0.0));
        assert!(r.chance(1.0));
        let hits = (0..10_000).filter(|_| r.chance(0.25)).count();
        assert!((2_200..2_800).contains(&hits), "{hits}");
    }
}
