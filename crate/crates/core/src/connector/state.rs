//! Negotiation and transfer state machines.

use serde::{Deserialize, Serialize};

use crate::model::{Digest, ParticipantId};
use crate::policy::UsagePolicy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NegotiationPhase {
    Requested,
    Offered,
    Accepted,
    Agreed,
    Finalized,
    Terminated,
}

impl NegotiationPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            NegotiationPhase::Requested => "REQUESTED",
            NegotiationPhase::Offered => "OFFERED",
            NegotiationPhase::Accepted => "ACCEPTED",
            NegotiationPhase::Agreed => "AGREED",
            NegotiationPhase::Finalized => "FINALIZED",
            NegotiationPhase::Terminated => "TERMINATED",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, NegotiationPhase::Finalized | NegotiationPhase::Terminated)
    }

    pub fn can_become(self, next: NegotiationPhase) -> bool {
        use NegotiationPhase::*;
        matches!(
            (self, next),
            (Requested, Offered | Agreed | Terminated)
                | (Offered, Accepted | Terminated)
                | (Accepted, Agreed | Terminated)
                | (Agreed, Finalized | Terminated)
        )
    }
}

impl std::fmt::Display for NegotiationPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TransferPhase {
    Requested,
    Started,
    Completed,
    Terminated,
}

impl TransferPhase {
    pub fn as_str(self) -> &'static str {
        match self {
            TransferPhase::Requested => "REQUESTED",
            TransferPhase::Started => "STARTED",
            TransferPhase::Completed => "COMPLETED",
            TransferPhase::Terminated => "TERMINATED",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, TransferPhase::Completed | TransferPhase::Terminated)
    }

    pub fn can_become(self, next: TransferPhase) -> bool {
        use TransferPhase::*;
        matches!(
            (self, next),
            (Requested, Started | Terminated) | (Started, Completed | Terminated)
        )
    }
}

impl std::fmt::Display for TransferPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Consumer,
    Provider,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NegotiationState {
    pub negotiation_id: String,
    pub asset_id: String,
    pub offer_id: String,
    pub consumer: ParticipantId,
    pub provider: ParticipantId,
    pub state: NegotiationPhase,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counter_offer: Option<UsagePolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination_reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement_id: Option<String>,
    pub role: Role,
    /// A local decision is outstanding (consumer on OFFERED, provider on its pending queue).
    #[serde(default)]
    pub pending_decision: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransferState {
    pub transfer_id: String,
    pub agreement_id: String,
    pub state: TransferPhase,
    pub bytes_moved: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payload_digest: Option<Digest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination_reason: Option<String>,
    pub consumer: ParticipantId,
    pub provider: ParticipantId,
    pub role: Role,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessKind {
    Negotiation,
    Transfer,
}

/// One performed state change, as recorded for inspection and fuzz oracles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Transition {
    pub process: ProcessKind,
    pub id: String,
    pub from: String,
    pub to: String,
}
