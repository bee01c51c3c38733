//! Vocabulary hub: SKOS-like concept schemes plus per-kind metadata schemas
//! used to validate catalogue metadata.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::RwLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{InvalidReason, TokenVerifier, AccessToken};
use crate::model::{AssetKind, Timestamp};

pub const SCOPE_VOCABULARY_WRITE: &str = "vocabulary:write";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VocabularyError {
    #[error("token rejected: {0}")]
    ScopeDenied(InvalidReason),
    #[error("concept {concept:?} is part of a broader cycle")]
    CyclicBroader { concept: String },
    #[error("concept {concept:?} has unresolved broader {broader:?}")]
    DanglingBroader { concept: String, broader: String },
    #[error("duplicate concept id {0:?}")]
    DuplicateConcept(String),
    #[error("duplicate property {0:?}")]
    DuplicateProperty(String),
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
    #[error("unknown concept {concept:?} in scheme {scheme:?}")]
    UnknownConcept { scheme: String, concept: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Concept {
    pub concept_id: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub broader: Option<String>,
}

impl Concept {
    pub fn new(id: &str, label: &str, broader: Option<&str>) -> Self {
        Concept {
            concept_id: id.to_string(),
            label: label.to_string(),
            broader: broader.map(str::to_string),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ConceptScheme {
    pub scheme_id: String,
    pub concepts: Vec<Concept>,
}

impl ConceptScheme {
    fn get(&self, id: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.concept_id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.get(id).is_some()
    }

    /// Checks id uniqueness, broader resolution and acyclicity.
    pub fn check(&self) -> Result<(), VocabularyError> {
        let mut ids = BTreeSet::new();
        for c in &self.concepts {
            if !ids.insert(c.concept_id.as_str()) {
                return Err(VocabularyError::DuplicateConcept(c.concept_id.clone()));
            }
        }
        let parent: BTreeMap<&str, &str> = self
            .concepts
            .iter()
            .filter_map(|c| c.broader.as_deref().map(|b| (c.concept_id.as_str(), b)))
            .collect();
        for (child, broader) in &parent {
            if !ids.contains(broader) {
                return Err(VocabularyError::DanglingBroader {
                    concept: child.to_string(),
                    broader: broader.to_string(),
                });
            }
        }
        // each concept has at most one broader, so walking up more than
        // |concepts| steps means we are going round a cycle
        for start in &ids {
            let mut cur = *start;
            for _ in 0..=ids.len() {
                match parent.get(cur) {
                    Some(next) => cur = next,
                    None => break,
                }
                if cur == *start {
                    return Err(VocabularyError::CyclicBroader {
                        concept: start.to_string(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueType {
    FreeText,
    /// Value must be a concept id of the named scheme.
    ConceptRef(String),
    IntegerString,
    TimestampString,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PropertySpec {
    pub name: String,
    pub required: bool,
    pub value_type: ValueType,
}

impl PropertySpec {
    pub fn required(name: &str, value_type: ValueType) -> Self {
        PropertySpec {
            name: name.into(),
            required: true,
            value_type,
        }
    }

    pub fn optional(name: &str, value_type: ValueType) -> Self {
        PropertySpec {
            name: name.into(),
            required: false,
            value_type,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetadataSchema {
    pub kind: AssetKind,
    pub properties: Vec<PropertySpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationCode {
    MissingRequired,
    UnknownConcept,
    BadValueType,
    UnknownProperty,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Violation {
    pub property: String,
    pub code: ViolationCode,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?} ({})", self.property, self.code, self.detail)
    }
}

fn is_integer_string(s: &str) -> bool {
    let digits = s.strip_prefix('-').unwrap_or(s);
    !digits.is_empty() && digits.bytes().all(|b| b.is_ascii_digit())
}

/// Registry of concept schemes and metadata schemas. Reads are concurrent,
/// registrations serialized.
pub struct VocabularyHub {
    schemes: RwLock<BTreeMap<String, ConceptScheme>>,
    schemas: RwLock<BTreeMap<AssetKind, MetadataSchema>>,
    verifier: TokenVerifier,
}

impl VocabularyHub {
    /// Empty hub.
    pub fn new(verifier: TokenVerifier) -> Self {
        VocabularyHub {
            schemes: RwLock::new(BTreeMap::new()),
            schemas: RwLock::new(BTreeMap::new()),
            verifier,
        }
    }

    /// Hub preloaded with the shipped schemes and the five per-kind schemas.
    pub fn with_builtins(verifier: TokenVerifier) -> Self {
        let hub = Self::new(verifier);
        for s in builtin_schemes() {
            s.check().expect("built-in scheme is valid");
            hub.schemes.write().unwrap().insert(s.scheme_id.clone(), s);
        }
        for s in builtin_schemas() {
            hub.schemas.write().unwrap().insert(s.kind, s);
        }
        hub
    }

    fn authorize(&self, token: &AccessToken) -> Result<(), VocabularyError> {
        self.verifier
            .verify(token, SCOPE_VOCABULARY_WRITE)
            .into_result()
            .map_err(VocabularyError::ScopeDenied)
    }

    pub fn register_scheme(&self, scheme: ConceptScheme, token: &AccessToken) -> Result<(), VocabularyError> {
        self.authorize(token)?;
        scheme.check()?;
        self.schemes
            .write()
            .unwrap()
            .insert(scheme.scheme_id.clone(), scheme);
        Ok(())
    }

    pub fn scheme(&self, id: &str) -> Option<ConceptScheme> {
        self.schemes.read().unwrap().get(id).cloned()
    }

    pub fn register_schema(&self, schema: MetadataSchema, token: &AccessToken) -> Result<(), VocabularyError> {
        self.authorize(token)?;
        let mut names = BTreeSet::new();
        let schemes = self.schemes.read().unwrap();
        for p in &schema.properties {
            if !names.insert(p.name.as_str()) {
                return Err(VocabularyError::DuplicateProperty(p.name.clone()));
            }
            if let ValueType::ConceptRef(s) = &p.value_type {
                if !schemes.contains_key(s) {
                    return Err(VocabularyError::UnknownScheme(s.clone()));
                }
            }
        }
        drop(schemes);
        self.schemas.write().unwrap().insert(schema.kind, schema);
        Ok(())
    }

    pub fn schema(&self, kind: AssetKind) -> Option<MetadataSchema> {
        self.schemas.read().unwrap().get(&kind).cloned()
    }

    /// Validates `metadata` against `schema`. Output is sorted, so it does
    /// not depend on map or property order.
    pub fn validate(&self, metadata: &BTreeMap<String, String>, schema: &MetadataSchema) -> Vec<Violation> {
        let schemes = self.schemes.read().unwrap();
        let mut out = Vec::new();
        let mut known = BTreeSet::new();
        for prop in &schema.properties {
            known.insert(prop.name.as_str());
            let Some(value) = metadata.get(&prop.name) else {
                if prop.required {
                    out.push(Violation {
                        property: prop.name.clone(),
                        code: ViolationCode::MissingRequired,
                        detail: "required property is absent".into(),
                    });
                }
                continue;
            };
            match &prop.value_type {
                ValueType::FreeText => {}
                ValueType::IntegerString if is_integer_string(value) => {}
                ValueType::IntegerString => out.push(Violation {
                    property: prop.name.clone(),
                    code: ViolationCode::BadValueType,
                    detail: format!("{value:?} is not an integer"),
                }),
                ValueType::TimestampString if Timestamp::parse(value).is_ok() => {}
                ValueType::TimestampString => out.push(Violation {
                    property: prop.name.clone(),
                    code: ViolationCode::BadValueType,
                    detail: format!("{value:?} is not a YYYY-MM-DDThh:mm:ssZ timestamp"),
                }),
                ValueType::ConceptRef(scheme_id) => {
                    let found = schemes.get(scheme_id).is_some_and(|s| s.contains(value));
                    if !found {
                        out.push(Violation {
                            property: prop.name.clone(),
                            code: ViolationCode::UnknownConcept,
                            detail: format!("{value:?} is not a concept of scheme {scheme_id:?}"),
                        });
                    }
                }
            }
        }
        for name in metadata.keys() {
            if !known.contains(name.as_str()) {
                out.push(Violation {
                    property: name.clone(),
                    code: ViolationCode::UnknownProperty,
                    detail: format!("schema for {} has no such property", schema.kind),
                });
            }
        }
        out.sort();
        out
    }

    /// Validates against whatever schema is registered for `kind`.
    pub fn validate_kind(&self, kind: AssetKind, metadata: &BTreeMap<String, String>) -> Vec<Violation> {
        match self.schema(kind) {
            Some(schema) => self.validate(metadata, &schema),
            None => vec![Violation {
                property: String::new(),
                code: ViolationCode::UnknownProperty,
                detail: format!("no schema registered for kind {kind}"),
            }],
        }
    }

    /// Ancestors of `concept_id`, nearest first, excluding the concept itself.
    pub fn expand_concept(&self, scheme_id: &str, concept_id: &str) -> Result<Vec<String>, VocabularyError> {
        let schemes = self.schemes.read().unwrap();
        let scheme = schemes
            .get(scheme_id)
            .ok_or_else(|| VocabularyError::UnknownScheme(scheme_id.to_string()))?;
        let mut cur = scheme.get(concept_id).ok_or_else(|| VocabularyError::UnknownConcept {
            scheme: scheme_id.to_string(),
            concept: concept_id.to_string(),
        })?;
        let mut out = Vec::new();
        // registration guarantees acyclicity; the bound keeps this total anyway
        while let Some(b) = cur.broader.as_deref() {
            if out.len() > scheme.concepts.len() {
                break;
            }
            out.push(b.to_string());
            match scheme.get(b) {
                Some(next) => cur = next,
                None => break,
            }
        }
        Ok(out)
    }
}

pub const SCHEME_BANDS: &str = "bands";
pub const SCHEME_ML_TASKS: &str = "ml-tasks";
pub const SCHEME_RAN_LAYERS: &str = "ran-layers";

pub fn builtin_schemes() -> Vec<ConceptScheme> {
    vec![
        ConceptScheme {
            scheme_id: SCHEME_BANDS.into(),
            concepts: vec![
                Concept::new("sub-6", "Sub-6 GHz (FR1)", None),
                Concept::new("mmWave", "Millimetre wave (FR2)", None),
            ],
        },
        ConceptScheme {
            scheme_id: SCHEME_ML_TASKS.into(),
            concepts: vec![
                Concept::new("regression", "Regression", None),
                Concept::new("classification", "Classification", None),
                Concept::new("forecasting", "Time-series forecasting", Some("regression")),
                Concept::new("traffic-forecasting", "Traffic forecasting", Some("forecasting")),
                Concept::new("beam-prediction", "Beam prediction", Some("classification")),
                Concept::new("anomaly-detection", "Anomaly detection", Some("classification")),
            ],
        },
        ConceptScheme {
            scheme_id: SCHEME_RAN_LAYERS.into(),
            concepts: vec![
                Concept::new("phy", "Physical layer", None),
                Concept::new("mac", "Medium access control", None),
                Concept::new("rlc", "Radio link control", None),
                Concept::new("pdcp", "Packet data convergence protocol", None),
                Concept::new("rrc", "Radio resource control", None),
            ],
        },
    ]
}

pub fn builtin_schemas() -> Vec<MetadataSchema> {
    use ValueType::*;
    let description = PropertySpec::optional("description", FreeText);
    vec![
        MetadataSchema {
            kind: AssetKind::Dataset,
            properties: vec![
                PropertySpec::required("frequency-band", ConceptRef(SCHEME_BANDS.into())),
                PropertySpec::required("testbed-origin", FreeText),
                PropertySpec::required("sample-count", IntegerString),
                PropertySpec::optional("capabilities", FreeText),
                PropertySpec::optional("collected-at", TimestampString),
                description.clone(),
            ],
        },
        MetadataSchema {
            kind: AssetKind::MlModel,
            properties: vec![
                PropertySpec::required("task", ConceptRef(SCHEME_ML_TASKS.into())),
                PropertySpec::required("input-schema", FreeText),
                PropertySpec::optional("framework", FreeText),
                description.clone(),
            ],
        },
        MetadataSchema {
            kind: AssetKind::RanModel,
            properties: vec![
                PropertySpec::required("ran-layer", ConceptRef(SCHEME_RAN_LAYERS.into())),
                PropertySpec::optional("framework", FreeText),
                description.clone(),
            ],
        },
        MetadataSchema {
            kind: AssetKind::Service,
            properties: vec![PropertySpec::optional("endpoint", FreeText), description.clone()],
        },
        MetadataSchema {
            kind: AssetKind::Application,
            properties: vec![PropertySpec::optional("version", FreeText), description],
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, LogicalClock};
    use crate::identity::{issue_credential, issue_token, KeyPair, TrustStore};
    use crate::model::ParticipantId;
    use proptest::prelude::*;
    use std::sync::Arc;

    struct Fx {
        hub: VocabularyHub,
        writer: AccessToken,
        reader: AccessToken,
    }

    fn fx() -> Fx {
        let clock = LogicalClock::default();
        let trust = TrustStore::new();
        let anchor = ParticipantId::parse("did:dali:dali:federator").unwrap();
        let ak = KeyPair::from_seed([1; 32]);
        trust.register_anchor(anchor.clone(), ak.public_key());
        let sk = KeyPair::from_seed([2; 32]);
        let cred = issue_credential(
            &trust,
            &anchor,
            &ak,
            ParticipantId::parse("did:dali:dali:admin").unwrap(),
            BTreeMap::new(),
            3600,
            clock.now(),
        )
        .unwrap();
        let tok = |s: &str| issue_token(&sk, &cred, &trust, "vocabulary", vec![s.into()], 600, clock.now()).unwrap();
        Fx {
            hub: VocabularyHub::with_builtins(TokenVerifier::new(sk.public_key(), Arc::new(clock.clone()))),
            writer: tok(SCOPE_VOCABULARY_WRITE),
            reader: tok("vocabulary:read"),
        }
    }

    fn scheme(concepts: &[(&str, Option<&str>)]) -> ConceptScheme {
        ConceptScheme {
            scheme_id: "s".into(),
            concepts: concepts.iter().map(|(id, b)| Concept::new(id, id, *b)).collect(),
        }
    }

    fn meta(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn register_scheme_examples() {
        let f = fx();
        f.hub
            .register_scheme(scheme(&[("a", None), ("b", Some("a"))]), &f.writer)
            .unwrap();
        assert_eq!(f.hub.scheme("s").unwrap().concepts.len(), 2);
        assert!(matches!(
            f.hub.register_scheme(scheme(&[("a", Some("b")), ("b", Some("a"))]), &f.writer),
            Err(VocabularyError::CyclicBroader { .. })
        ));
        assert!(matches!(
            f.hub.register_scheme(scheme(&[("a", Some("a"))]), &f.writer),
            Err(VocabularyError::CyclicBroader { .. })
        ));
        assert!(matches!(
            f.hub.register_scheme(scheme(&[("a", Some("zz"))]), &f.writer),
            Err(VocabularyError::DanglingBroader { .. })
        ));
        assert!(matches!(
            f.hub.register_scheme(scheme(&[("a", None)]), &f.reader),
            Err(VocabularyError::ScopeDenied(InvalidReason::MissingScope))
        ));
        // failed registrations leave the earlier version in place
        assert_eq!(f.hub.scheme("s").unwrap().concepts.len(), 2);
        f.hub.register_scheme(scheme(&[("x", None)]), &f.writer).unwrap();
        assert_eq!(f.hub.scheme("s").unwrap().concepts[0].concept_id, "x");
    }

    #[test]
    fn validate_examples() {
        let f = fx();
        let empty = MetadataSchema {
            kind: AssetKind::Service,
            properties: vec![],
        };
        assert!(f.hub.validate(&BTreeMap::new(), &empty).is_empty());

        let ds = f.hub.schema(AssetKind::Dataset).unwrap();
        let base = [("testbed-origin", "eur"), ("sample-count", "100")];
        let v = f.hub.validate(&meta(&base), &ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, ViolationCode::MissingRequired);
        assert_eq!(v[0].property, "frequency-band");

        let mut with_thz = base.to_vec();
        with_thz.push(("frequency-band", "thz"));
        let v = f.hub.validate(&meta(&with_thz), &ds);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].code, ViolationCode::UnknownConcept);

        let mut good = base.to_vec();
        good.push(("frequency-band", "mmWave"));
        assert!(f.hub.validate(&meta(&good), &ds).is_empty());

        good.push(("sample-count", "1e3"));
        good.push(("colour", "red"));
        good.push(("collected-at", "yesterday"));
        let got: Vec<_> = f
            .hub
            .validate(&meta(&good), &ds)
            .into_iter()
            .map(|v| (v.property, v.code))
            .collect();
        assert_eq!(
            got,
            vec![
                ("collected-at".to_string(), ViolationCode::BadValueType),
                ("colour".to_string(), ViolationCode::UnknownProperty),
                ("sample-count".to_string(), ViolationCode::BadValueType),
            ]
        );
    }

    #[test]
    fn register_schema_checks_references() {
        let f = fx();
        let bad = MetadataSchema {
            kind: AssetKind::Service,
            properties: vec![PropertySpec::required("x", ValueType::ConceptRef("nope".into()))],
        };
        assert!(matches!(
            f.hub.register_schema(bad, &f.writer),
            Err(VocabularyError::UnknownScheme(_))
        ));
        let dup = MetadataSchema {
            kind: AssetKind::Service,
            properties: vec![
                PropertySpec::optional("x", ValueType::FreeText),
                PropertySpec::optional("x", ValueType::FreeText),
            ],
        };
        assert!(matches!(
            f.hub.register_schema(dup, &f.writer),
            Err(VocabularyError::DuplicateProperty(_))
        ));
        let ok = MetadataSchema {
            kind: AssetKind::Service,
            properties: vec![PropertySpec::required("endpoint", ValueType::FreeText)],
        };
        f.hub.register_schema(ok.clone(), &f.writer).unwrap();
        assert_eq!(f.hub.schema(AssetKind::Service).unwrap(), ok);
    }

    #[test]
    fn expand_examples() {
        let f = fx();
        assert!(f.hub.expand_concept(SCHEME_BANDS, "sub-6").unwrap().is_empty());
        assert_eq!(
            f.hub.expand_concept(SCHEME_ML_TASKS, "traffic-forecasting").unwrap(),
            vec!["forecasting", "regression"]
        );
        f.hub
            .register_scheme(scheme(&[("a", None), ("b", Some("a")), ("c", Some("b"))]), &f.writer)
            .unwrap();
        assert_eq!(f.hub.expand_concept("s", "c").unwrap(), vec!["b", "a"]);
        assert!(matches!(
            f.hub.expand_concept("nope", "c"),
            Err(VocabularyError::UnknownScheme(_))
        ));
        assert!(matches!(
            f.hub.expand_concept("s", "zz"),
            Err(VocabularyError::UnknownConcept { .. })
        ));
    }

    #[test]
    fn schema_json_shape() {
        let p = PropertySpec::required("frequency-band", ValueType::ConceptRef("bands".into()));
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"name":"frequency-band","required":true,"valueType":{"concept-ref":"bands"}}"#
        );
        let p = PropertySpec::optional("n", ValueType::IntegerString);
        assert_eq!(
            serde_json::to_string(&p).unwrap(),
            r#"{"name":"n","required":false,"valueType":"integer-string"}"#
        );
    }

    /// Random forest over `n` nodes: each node may point at an earlier one.
    fn arb_forest() -> impl Strategy<Value = Vec<Option<usize>>> {
        (1usize..12).prop_flat_map(|n| {
            (0..n)
                .map(|i| {
                    if i == 0 {
                        Just(None).boxed()
                    } else {
                        proptest::option::of(0..i).boxed()
                    }
                })
                .collect::<Vec<_>>()
        })
    }

    fn dfs_ancestors(parent: &[Option<usize>], node: usize) -> Vec<usize> {
        // independent recursive walk over the adjacency list
        fn go(parent: &[Option<usize>], n: usize, acc: &mut Vec<usize>) {
            if let Some(p) = parent[n] {
                acc.push(p);
                go(parent, p, acc);
            }
        }
        let mut acc = Vec::new();
        go(parent, node, &mut acc);
        acc
    }

    proptest! {
        #[test]
        fn expansion_matches_dfs(forest in arb_forest(), shuffle_seed in any::<u64>()) {
            let f = fx();
            let name = |i: usize| format!("c{i}");
            let mut concepts: Vec<Concept> = forest
                .iter()
                .enumerate()
                .map(|(i, p)| Concept { concept_id: name(i), label: name(i), broader: p.map(name) })
                .collect();
            // registration must not depend on concept order
            let k = (shuffle_seed as usize) % concepts.len();
            concepts.rotate_left(k);
            f.hub.register_scheme(ConceptScheme { scheme_id: "g".into(), concepts }, &f.writer).unwrap();
            for i in 0..forest.len() {
                let expected: Vec<String> = dfs_ancestors(&forest, i).into_iter().map(name).collect();
                prop_assert_eq!(f.hub.expand_concept("g", &name(i)).unwrap(), expected);
            }
        }

        #[test]
        fn validation_is_order_independent(
            entries in proptest::collection::vec(
                (prop_oneof![Just("frequency-band"), Just("testbed-origin"), Just("sample-count"), Just("bogus"), Just("collected-at")],
                 prop_oneof![Just("mmWave"), Just("12"), Just("x"), Just("2026-01-01T00:00:00Z")]),
                0..6),
            rot in 0usize..6,
        ) {
            let f = fx();
            let schema = f.hub.schema(AssetKind::Dataset).unwrap();
            let md: BTreeMap<String, String> = entries.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
            let mut permuted = schema.clone();
            let len = permuted.properties.len();
            permuted.properties.rotate_left(rot % len);
            permuted.properties.reverse();
            prop_assert_eq!(f.hub.validate(&md, &schema), f.hub.validate(&md, &permuted));
        }
    }
}
