//! Core of the DALI data-space federation: participants, usage policies,
//! identity, catalogue, vocabulary, clearing house, data lake and connectors.

pub mod canonical;
pub mod catalogue;
pub mod clearinghouse;
pub mod clock;
pub mod connector;
pub mod datalake;
pub mod identity;
pub mod model;
pub mod policy;
pub mod vocabulary;

pub use clock::{Clock, LogicalClock, SystemClock};
pub use model::{AssetKind, Digest, ParticipantId, SelfDescription, Temperature, Timestamp};
