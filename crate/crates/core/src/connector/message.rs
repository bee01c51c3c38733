//! Signed protocol envelopes and their typed bodies.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::canonical::to_canonical_bytes;
use crate::identity::{AccessToken, Credential, KeyPair, PublicKey, SignatureBytes};
use crate::model::{digest_of, Digest, ParticipantId, Timestamp};
use crate::policy::UsagePolicy;

pub const PROTOCOL_VERSION: &str = "dali/1.0";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MessageError {
    #[error("unknown message type {0:?}")]
    UnknownMessageType(String),
    #[error("unsupported protocol version {0:?}")]
    UnsupportedVersion(String),
    #[error("malformed {message_type} body: {detail}")]
    MalformedBody { message_type: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MessageType {
    ContractRequestMessage,
    ContractOfferMessage,
    ContractAgreementMessage,
    ContractAgreementVerificationMessage,
    ContractNegotiationEventMessage,
    ContractNegotiationTerminationMessage,
    TransferRequestMessage,
    TransferStartMessage,
    TransferCompletionMessage,
    TransferTerminationMessage,
}

impl MessageType {
    pub const ALL: [MessageType; 10] = [
        MessageType::ContractRequestMessage,
        MessageType::ContractOfferMessage,
        MessageType::ContractAgreementMessage,
        MessageType::ContractAgreementVerificationMessage,
        MessageType::ContractNegotiationEventMessage,
        MessageType::ContractNegotiationTerminationMessage,
        MessageType::TransferRequestMessage,
        MessageType::TransferStartMessage,
        MessageType::TransferCompletionMessage,
        MessageType::TransferTerminationMessage,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageType::ContractRequestMessage => "ContractRequestMessage",
            MessageType::ContractOfferMessage => "ContractOfferMessage",
            MessageType::ContractAgreementMessage => "ContractAgreementMessage",
            MessageType::ContractAgreementVerificationMessage => "ContractAgreementVerificationMessage",
            MessageType::ContractNegotiationEventMessage => "ContractNegotiationEventMessage",
            MessageType::ContractNegotiationTerminationMessage => "ContractNegotiationTerminationMessage",
            MessageType::TransferRequestMessage => "TransferRequestMessage",
            MessageType::TransferStartMessage => "TransferStartMessage",
            MessageType::TransferCompletionMessage => "TransferCompletionMessage",
            MessageType::TransferTerminationMessage => "TransferTerminationMessage",
        }
    }

    pub fn parse(raw: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == raw)
    }

    pub fn is_negotiation(self) -> bool {
        !self.is_transfer()
    }

    pub fn is_transfer(self) -> bool {
        matches!(
            self,
            MessageType::TransferRequestMessage
                | MessageType::TransferStartMessage
                | MessageType::TransferCompletionMessage
                | MessageType::TransferTerminationMessage
        )
    }
}

impl std::fmt::Display for MessageType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AgreementSignatures {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provider: Option<SignatureBytes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub consumer: Option<SignatureBytes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Agreement {
    pub agreement_id: String,
    pub negotiation_id: String,
    pub asset_id: String,
    pub consumer: ParticipantId,
    pub provider: ParticipantId,
    pub policy: UsagePolicy,
    pub agreed_at: Timestamp,
    pub signatures: AgreementSignatures,
}

impl Agreement {
    /// Canonical bytes both parties sign: everything except `signatures`.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_value(self).expect("agreement serializes");
        v.as_object_mut().expect("agreement is an object").remove("signatures");
        to_canonical_bytes(&v).expect("canonical agreement")
    }

    pub fn provider_signature_valid(&self, key: &PublicKey) -> bool {
        self.signatures
            .provider
            .as_ref()
            .is_some_and(|s| key.verify(&self.signing_bytes(), s))
    }

    pub fn consumer_signature_valid(&self, key: &PublicKey) -> bool {
        self.signatures
            .consumer
            .as_ref()
            .is_some_and(|s| key.verify(&self.signing_bytes(), s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContractRequest {
    pub asset_id: String,
    pub offer_id: String,
    pub policy: UsagePolicy,
    pub credential: Credential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContractOffer {
    pub asset_id: String,
    pub offer_id: String,
    pub policy: UsagePolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ContractAgreement {
    pub agreement: Agreement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct AgreementVerification {
    pub agreement_id: String,
    pub consumer_signature: SignatureBytes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegotiationEventType {
    Accepted,
    Finalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct NegotiationEvent {
    pub event_type: NegotiationEventType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agreement_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Termination {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransferRequest {
    pub agreement_id: String,
    pub purpose: String,
    pub credential: Credential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransferStart {
    pub agreement_id: String,
    pub token: AccessToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TransferCompletion {
    pub payload_digest: Digest,
    pub bytes_moved: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ContractRequest(ContractRequest),
    ContractOffer(ContractOffer),
    ContractAgreement(ContractAgreement),
    AgreementVerification(AgreementVerification),
    NegotiationEvent(NegotiationEvent),
    NegotiationTermination(Termination),
    TransferRequest(TransferRequest),
    TransferStart(TransferStart),
    TransferCompletion(TransferCompletion),
    TransferTermination(Termination),
}

impl Message {
    pub fn message_type(&self) -> MessageType {
        match self {
            Message::ContractRequest(_) => MessageType::ContractRequestMessage,
            Message::ContractOffer(_) => MessageType::ContractOfferMessage,
            Message::ContractAgreement(_) => MessageType::ContractAgreementMessage,
            Message::AgreementVerification(_) => MessageType::ContractAgreementVerificationMessage,
            Message::NegotiationEvent(_) => MessageType::ContractNegotiationEventMessage,
            Message::NegotiationTermination(_) => MessageType::ContractNegotiationTerminationMessage,
            Message::TransferRequest(_) => MessageType::TransferRequestMessage,
            Message::TransferStart(_) => MessageType::TransferStartMessage,
            Message::TransferCompletion(_) => MessageType::TransferCompletionMessage,
            Message::TransferTermination(_) => MessageType::TransferTerminationMessage,
        }
    }

    fn body(&self) -> Value {
        let v = match self {
            Message::ContractRequest(b) => serde_json::to_value(b),
            Message::ContractOffer(b) => serde_json::to_value(b),
            Message::ContractAgreement(b) => serde_json::to_value(b),
            Message::AgreementVerification(b) => serde_json::to_value(b),
            Message::NegotiationEvent(b) => serde_json::to_value(b),
            Message::NegotiationTermination(b) | Message::TransferTermination(b) => serde_json::to_value(b),
            Message::TransferRequest(b) => serde_json::to_value(b),
            Message::TransferStart(b) => serde_json::to_value(b),
            Message::TransferCompletion(b) => serde_json::to_value(b),
        };
        v.expect("message bodies serialize")
    }
}

/// Wire envelope. `signature` covers the canonical JSON of all other fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Envelope {
    pub message_type: String,
    pub protocol_version: String,
    pub sender_id: ParticipantId,
    pub correlation_id: String,
    pub body: Value,
    pub signature: SignatureBytes,
}

impl Envelope {
    pub fn seal(keys: &KeyPair, sender: &ParticipantId, correlation_id: &str, msg: &Message) -> Envelope {
        let mut env = Envelope {
            message_type: msg.message_type().as_str().to_string(),
            protocol_version: PROTOCOL_VERSION.to_string(),
            sender_id: sender.clone(),
            correlation_id: correlation_id.to_string(),
            body: msg.body(),
            signature: SignatureBytes(Vec::new()),
        };
        env.signature = keys.sign(&env.signing_bytes());
        env
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_value(self).expect("envelope serializes");
        v.as_object_mut().expect("envelope is an object").remove("signature");
        to_canonical_bytes(&v).expect("canonical envelope")
    }

    pub fn verify(&self, key: &PublicKey) -> bool {
        key.verify(&self.signing_bytes(), &self.signature)
    }

    /// Digest of the signed content; distinguishes replays from new messages
    /// that reuse an idempotency key.
    pub fn content_digest(&self) -> Digest {
        digest_of(&self.signing_bytes())
    }

    pub fn kind(&self) -> Result<MessageType, MessageError> {
        MessageType::parse(&self.message_type).ok_or_else(|| MessageError::UnknownMessageType(self.message_type.clone()))
    }

    pub fn decode(&self) -> Result<Message, MessageError> {
        let kind = self.kind()?;
        if self.protocol_version != PROTOCOL_VERSION {
            return Err(MessageError::UnsupportedVersion(self.protocol_version.clone()));
        }
        fn body<T: DeserializeOwned>(kind: MessageType, v: &Value) -> Result<T, MessageError> {
            serde_json::from_value(v.clone()).map_err(|e| MessageError::MalformedBody {
                message_type: kind.as_str().to_string(),
                detail: e.to_string(),
            })
        }
        let b = &self.body;
        Ok(match kind {
            MessageType::ContractRequestMessage => Message::ContractRequest(body(kind, b)?),
            MessageType::ContractOfferMessage => Message::ContractOffer(body(kind, b)?),
            MessageType::ContractAgreementMessage => Message::ContractAgreement(body(kind, b)?),
            MessageType::ContractAgreementVerificationMessage => Message::AgreementVerification(body(kind, b)?),
            MessageType::ContractNegotiationEventMessage => Message::NegotiationEvent(body(kind, b)?),
            MessageType::ContractNegotiationTerminationMessage => Message::NegotiationTermination(body(kind, b)?),
            MessageType::TransferRequestMessage => Message::TransferRequest(body(kind, b)?),
            MessageType::TransferStartMessage => Message::TransferStart(body(kind, b)?),
            MessageType::TransferCompletionMessage => Message::TransferCompletion(body(kind, b)?),
            MessageType::TransferTerminationMessage => Message::TransferTermination(body(kind, b)?),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (KeyPair, Envelope) {
        let keys = KeyPair::from_seed([9; 32]);
        let env = Envelope::seal(
            &keys,
            &ParticipantId::parse("did:dali:lab:consumer").unwrap(),
            "neg-1",
            &Message::NegotiationTermination(Termination {
                reason: "offer-rejected".into(),
            }),
        );
        (keys, env)
    }

    #[test]
    fn seal_and_verify() {
        let (keys, env) = sample();
        assert!(env.verify(&keys.public_key()));
        assert!(!env.verify(&KeyPair::from_seed([8; 32]).public_key()));
        assert_eq!(env.protocol_version, "dali/1.0");
        let json = serde_json::to_value(&env).unwrap();
        for field in ["messageType", "protocolVersion", "senderId", "correlationId", "body", "signature"] {
            assert!(json.get(field).is_some(), "{field}");
        }
        assert_eq!(
            env.decode().unwrap(),
            Message::NegotiationTermination(Termination {
                reason: "offer-rejected".into()
            })
        );
    }

    #[test]
    fn every_field_is_signed() {
        let (keys, env) = sample();
        let pk = keys.public_key();
        let mut e = env.clone();
        e.correlation_id = "neg-2".into();
        assert!(!e.verify(&pk));
        let mut e = env.clone();
        e.body["reason"] = "x".into();
        assert!(!e.verify(&pk));
        let mut e = env.clone();
        e.message_type = "TransferTerminationMessage".into();
        assert!(!e.verify(&pk));
        let mut e = env;
        e.protocol_version = "dali/2.0".into();
        assert!(!e.verify(&pk));
    }

    #[test]
    fn unknown_type_and_bad_body_rejected() {
        let (_, mut env) = sample();
        env.message_type = "ContractGossipMessage".into();
        assert_eq!(
            env.decode(),
            Err(MessageError::UnknownMessageType("ContractGossipMessage".into()))
        );
        let (_, mut env) = sample();
        env.body = serde_json::json!({"nope": 1});
        assert!(matches!(env.decode(), Err(MessageError::MalformedBody { .. })));
    }
}
