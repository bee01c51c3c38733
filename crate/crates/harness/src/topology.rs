//! Federation topology files.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use dali_core::datalake::TestbedProfile;
use dali_core::ParticipantId;

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRole {
    Provider,
    Consumer,
    Federator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NodeSpec {
    pub participant_id: ParticipantId,
    pub role: NodeRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub testbed_profile: Option<TestbedProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransportKind {
    InProcess,
    Http,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultKind {
    DropMessage,
    DuplicateMessage,
    CorruptPayloadByte,
    ClockJump,
}

/// One fault rule. `target` is `*`, a participant id (messages to or from
/// it), or a directed link `from->to`. A rule fires either with
/// `probability` per eligible event or exactly once at event `triggerIndex`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FaultSpec {
    pub kind: FaultKind,
    #[serde(default = "any_target")]
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trigger_index: Option<u64>,
    /// Seconds added by a clock jump.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jump_secs: Option<i64>,
}

fn any_target() -> String {
    "*".into()
}

impl FaultSpec {
    pub fn with_probability(kind: FaultKind, probability: f64) -> Self {
        FaultSpec {
            kind,
            target: any_target(),
            probability: Some(probability),
            trigger_index: None,
            jump_secs: None,
        }
    }

    /// Whether the rule covers a message from `from` to `to`.
    pub fn covers(&self, from: &ParticipantId, to: &ParticipantId) -> bool {
        let t = self.target.as_str();
        if t == "*" {
            return true;
        }
        match t.split_once("->") {
            Some((a, b)) => a.trim() == from.as_str() && b.trim() == to.as_str(),
            None => t == from.as_str() || t == to.as_str(),
        }
    }

    fn check(&self) -> Result<(), String> {
        match (self.probability, self.trigger_index) {
            (Some(p), None) if (0.0..=1.0).contains(&p) => {}
            (Some(p), None) => return Err(format!("fault probability {p} outside [0,1]")),
            (None, Some(_)) => {}
            _ => return Err("fault needs exactly one of probability or triggerIndex".into()),
        }
        if let Some((a, b)) = self.target.split_once("->") {
            for side in [a, b] {
                ParticipantId::parse(side.trim()).map_err(|e| format!("fault target: {e}"))?;
            }
        } else if self.target != "*" {
            ParticipantId::parse(&self.target).map_err(|e| format!("fault target: {e}"))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct FederationTopology {
    pub nodes: Vec<NodeSpec>,
    pub transport: TransportKind,
    pub seed: u64,
    #[serde(default)]
    pub faults: Vec<FaultSpec>,
}

impl FederationTopology {
    /// The four testbed providers, one consumer and the federator.
    pub fn default_federation() -> Self {
        let provider = |id: &str, tb: &str, caps: &[&str], cost: f64| NodeSpec {
            participant_id: ParticipantId::parse(id).expect("static id"),
            role: NodeRole::Provider,
            testbed_profile: Some(TestbedProfile::new(tb, caps, cost).expect("static profile")),
        };
        FederationTopology {
            nodes: vec![
                provider("did:dali:eur:testbed", "eur", &["mmWave", "mobility", "urban-macro"], 1.0),
                provider("did:dali:isi:testbed", "isi", &["sub-6", "massive-mimo", "energy"], 1.2),
                provider("did:dali:kul:testbed", "kul", &["mmWave", "massive-mimo", "ran-slicing"], 1.5),
                provider("did:dali:dt:testbed", "dt", &["sub-6", "mobility", "ran-slicing", "urban-macro"], 0.8),
                NodeSpec {
                    participant_id: ParticipantId::parse("did:dali:lab:consumer").expect("static id"),
                    role: NodeRole::Consumer,
                    testbed_profile: None,
                },
                NodeSpec {
                    participant_id: ParticipantId::parse("did:dali:dali:federator").expect("static id"),
                    role: NodeRole::Federator,
                    testbed_profile: None,
                },
            ],
            transport: TransportKind::InProcess,
            seed: 42,
            faults: Vec::new(),
        }
    }

    pub fn from_yaml(text: &str) -> Result<Self, HarnessError> {
        let t: FederationTopology =
            serde_yaml::from_str(text).map_err(|e| HarnessError::TopologyInvalid(e.to_string()))?;
        t.check()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::TopologyInvalid(format!("{}: {e}", path.display())))?;
        Self::from_yaml(&text)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("topology serializes")
    }

    pub fn check(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::TopologyInvalid(m));
        let federators = self.nodes.iter().filter(|n| n.role == NodeRole::Federator).count();
        if federators != 1 {
            return bad(format!("expected exactly one federator, found {federators}"));
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(&n.participant_id) {
                return bad(format!("duplicate participant {}", n.participant_id));
            }
            if let Some(p) = &n.testbed_profile {
                if n.role != NodeRole::Provider {
                    return bad(format!("{} has a testbed profile but is not a provider", n.participant_id));
                }
                p.check().map_err(|e| HarnessError::TopologyInvalid(e.to_string()))?;
            }
        }
        for f in &self.faults {
            f.check().map_err(HarnessError::TopologyInvalid)?;
        }
        Ok(())
    }

    /// Extra requirement of scenarios that move data end to end.
    pub fn check_end_to_end(&self) -> Result<(), HarnessError> {
        self.check()?;
        if self.providers().next().is_none() || self.consumers().next().is_none() {
            return Err(HarnessError::TopologyInvalid(
                "end-to-end scenarios need at least one provider and one consumer".into(),
            ));
        }
        Ok(())
    }

    pub fn providers(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.role == NodeRole::Provider)
    }

    pub fn consumers(&self) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(|n| n.role == NodeRole::Consumer)
    }

    pub fn federator(&self) -> &NodeSpec {
        self.nodes
            .iter()
            .find(|n| n.role == NodeRole::Federator)
            .expect("checked topologies have a federator")
    }
}
