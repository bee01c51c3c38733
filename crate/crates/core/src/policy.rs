//! Usage policies (an ODRL-flavoured subset) and their evaluation.
//!
//! A policy permits an action when at least one permission for that action
//! has all of its constraints satisfied and no prohibition for that action
//! has all of its constraints satisfied. Prohibitions always win.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::model::{ParticipantId, Timestamp};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    Use,
    Transfer,
    ReShare,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Use, Action::Transfer, Action::ReShare];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum LeftOperand {
    Purpose,
    Participant,
    DateTime,
    UseCount,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operator {
    Eq,
    Neq,
    Lt,
    Lteq,
    Gt,
    Gteq,
    In,
}

impl Operator {
    fn is_ordering(self) -> bool {
        matches!(self, Operator::Lt | Operator::Lteq | Operator::Gt | Operator::Gteq)
    }

    fn compare(self, ord: Ordering) -> bool {
        match self {
            Operator::Eq => ord == Ordering::Equal,
            Operator::Neq => ord != Ordering::Equal,
            Operator::Lt => ord == Ordering::Less,
            Operator::Lteq => ord != Ordering::Greater,
            Operator::Gt => ord == Ordering::Greater,
            Operator::Gteq => ord != Ordering::Less,
            Operator::In => false,
        }
    }
}

/// Right-hand side of a constraint. Date-times travel as ISO-8601 strings.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RightOperand {
    Integer(i64),
    Text(String),
    List(Vec<String>),
}

impl From<&str> for RightOperand {
    fn from(s: &str) -> Self {
        RightOperand::Text(s.to_string())
    }
}

impl From<i64> for RightOperand {
    fn from(n: i64) -> Self {
        RightOperand::Integer(n)
    }
}

impl From<Timestamp> for RightOperand {
    fn from(t: Timestamp) -> Self {
        RightOperand::Text(t.to_iso())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraint {
    pub left: LeftOperand,
    pub op: Operator,
    pub right: RightOperand,
}

impl Constraint {
    pub fn new(left: LeftOperand, op: Operator, right: impl Into<RightOperand>) -> Self {
        Constraint {
            left,
            op,
            right: right.into(),
        }
    }
}

/// One permission or prohibition. Constraints are conjunctive; an empty list
/// makes the rule unconditional.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub action: Action,
    #[serde(default)]
    pub constraints: Vec<Constraint>,
}

impl Rule {
    pub fn unconditional(action: Action) -> Self {
        Rule {
            action,
            constraints: Vec::new(),
        }
    }

    pub fn with(action: Action, constraints: Vec<Constraint>) -> Self {
        Rule { action, constraints }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct UsagePolicy {
    #[serde(default)]
    pub permissions: Vec<Rule>,
    #[serde(default)]
    pub prohibitions: Vec<Rule>,
}

/// Everything the engine needs to know about a single access attempt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EvaluationContext {
    pub requester: ParticipantId,
    pub action: Action,
    pub purpose: String,
    pub now: Timestamp,
    pub prior_use_count: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DenyReason {
    NoMatchingPermission,
    Prohibited,
}

impl DenyReason {
    pub fn as_str(self) -> &'static str {
        match self {
            DenyReason::NoMatchingPermission => "no-matching-permission",
            DenyReason::Prohibited => "prohibited",
        }
    }
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "decision", content = "reason")]
pub enum Decision {
    Permit,
    Deny(DenyReason),
}

impl Decision {
    pub fn is_permit(self) -> bool {
        self == Decision::Permit
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    TypeMismatch,
    IncompatibleOperator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyViolation {
    /// Path of the offending constraint, e.g. `permissions[0].constraints[1]`.
    pub location: String,
    pub kind: ViolationKind,
    pub detail: String,
}

impl fmt::Display for PolicyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {:?}: {}", self.location, self.kind, self.detail)
    }
}

fn constraint_violation(c: &Constraint) -> Option<(ViolationKind, String)> {
    use LeftOperand::*;
    use RightOperand::*;
    match c.left {
        Purpose | Participant => match (c.op, &c.right) {
            (op, _) if op.is_ordering() => Some((
                ViolationKind::IncompatibleOperator,
                format!("{:?} cannot be compared with {:?}", c.left, op),
            )),
            (Operator::In, List(items)) => {
                if c.left == Participant {
                    items
                        .iter()
                        .find(|i| ParticipantId::parse(i).is_err())
                        .map(|bad| (ViolationKind::TypeMismatch, format!("{bad:?} is not a participant id")))
                } else {
                    None
                }
            }
            (Operator::In, _) => Some((ViolationKind::TypeMismatch, "`in` expects a list of strings".into())),
            (_, Text(s)) => {
                if c.left == Participant && ParticipantId::parse(s).is_err() {
                    Some((ViolationKind::TypeMismatch, format!("{s:?} is not a participant id")))
                } else {
                    None
                }
            }
            (op, _) => Some((ViolationKind::TypeMismatch, format!("{op:?} expects a string"))),
        },
        DateTime | UseCount => {
            if c.op == Operator::In {
                return Some((
                    ViolationKind::IncompatibleOperator,
                    format!("{:?} does not support `in`", c.left),
                ));
            }
            match (c.left, &c.right) {
                (DateTime, Text(s)) if Timestamp::parse(s).is_ok() => None,
                (DateTime, _) => Some((
                    ViolationKind::TypeMismatch,
                    "dateTime expects an ISO-8601 timestamp".into(),
                )),
                (_, Integer(n)) if *n >= 0 => None,
                _ => Some((
                    ViolationKind::TypeMismatch,
                    "useCount expects a non-negative integer".into(),
                )),
            }
        }
    }
}

/// Lists every operator/operand incompatibility in `policy`.
pub fn check_well_formed(policy: &UsagePolicy) -> Vec<PolicyViolation> {
    let mut out = Vec::new();
    for (section, rules) in [("permissions", &policy.permissions), ("prohibitions", &policy.prohibitions)] {
        for (ri, rule) in rules.iter().enumerate() {
            for (ci, c) in rule.constraints.iter().enumerate() {
                if let Some((kind, detail)) = constraint_violation(c) {
                    out.push(PolicyViolation {
                        location: format!("{section}[{ri}].constraints[{ci}]"),
                        kind,
                        detail,
                    });
                }
            }
        }
    }
    out
}

fn match_string(op: Operator, right: &RightOperand, actual: &str) -> bool {
    match (op, right) {
        (Operator::Eq, RightOperand::Text(s)) => actual == s,
        (Operator::Neq, RightOperand::Text(s)) => actual != s,
        (Operator::In, RightOperand::List(items)) => items.iter().any(|i| i == actual),
        _ => false,
    }
}

/// Evaluates one constraint. Total: ill-typed constraints evaluate to `false`.
pub fn evaluate_constraint(c: &Constraint, ctx: &EvaluationContext) -> bool {
    match c.left {
        LeftOperand::Purpose => match_string(c.op, &c.right, &ctx.purpose),
        LeftOperand::Participant => match_string(c.op, &c.right, ctx.requester.as_str()),
        LeftOperand::DateTime => match &c.right {
            RightOperand::Text(s) => match Timestamp::parse(s) {
                Ok(bound) => c.op.compare(ctx.now.cmp(&bound)),
                Err(_) => false,
            },
            _ => false,
        },
        LeftOperand::UseCount => match c.right {
            RightOperand::Integer(n) if n >= 0 => c.op.compare(ctx.prior_use_count.cmp(&(n as u64))),
            _ => false,
        },
    }
}

fn rule_applies(rule: &Rule, ctx: &EvaluationContext) -> bool {
    rule.action == ctx.action && rule.constraints.iter().all(|c| evaluate_constraint(c, ctx))
}

/// Decides whether `ctx` is allowed under `policy`.
pub fn evaluate(policy: &UsagePolicy, ctx: &EvaluationContext) -> Decision {
    if policy.prohibitions.iter().any(|r| rule_applies(r, ctx)) {
        return Decision::Deny(DenyReason::Prohibited);
    }
    if policy.permissions.iter().any(|r| rule_applies(r, ctx)) {
        Decision::Permit
    } else {
        Decision::Deny(DenyReason::NoMatchingPermission)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pid(s: &str) -> ParticipantId {
        ParticipantId::parse(s).unwrap()
    }

    fn ctx(action: Action, purpose: &str) -> EvaluationContext {
        EvaluationContext {
            requester: pid("did:dali:lab:consumer"),
            action,
            purpose: purpose.into(),
            now: Timestamp::from_unix(1_767_225_600),
            prior_use_count: 0,
        }
    }

    #[test]
    fn well_formedness_examples() {
        let unconditional = UsagePolicy {
            permissions: vec![Rule::unconditional(Action::Use)],
            prohibitions: vec![],
        };
        assert!(check_well_formed(&unconditional).is_empty());

        let bad_type = UsagePolicy {
            permissions: vec![Rule::with(
                Action::Use,
                vec![Constraint::new(LeftOperand::UseCount, Operator::Eq, "three")],
            )],
            prohibitions: vec![],
        };
        let v = check_well_formed(&bad_type);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::TypeMismatch);
        assert_eq!(v[0].location, "permissions[0].constraints[0]");

        let bad_op = UsagePolicy {
            permissions: vec![],
            prohibitions: vec![Rule::with(
                Action::Use,
                vec![Constraint::new(LeftOperand::Purpose, Operator::Lt, "research")],
            )],
        };
        let v = check_well_formed(&bad_op);
        assert_eq!(v.len(), 1);
        assert_eq!(v[0].kind, ViolationKind::IncompatibleOperator);
        assert_eq!(v[0].location, "prohibitions[0].constraints[0]");
    }

    #[test]
    fn well_formedness_covers_every_operand() {
        let ok = [
            Constraint::new(LeftOperand::Purpose, Operator::Neq, "x"),
            Constraint {
                left: LeftOperand::Purpose,
                op: Operator::In,
                right: RightOperand::List(vec!["a".into()]),
            },
            Constraint::new(LeftOperand::Participant, Operator::Eq, "did:dali:a:b"),
            Constraint::new(LeftOperand::DateTime, Operator::Lt, "2027-01-01T00:00:00Z"),
            Constraint::new(LeftOperand::UseCount, Operator::Gteq, 0),
        ];
        let bad = [
            Constraint::new(LeftOperand::Purpose, Operator::In, "x"),
            Constraint::new(LeftOperand::Purpose, Operator::Eq, 3),
            Constraint::new(LeftOperand::Participant, Operator::Eq, "not-a-did"),
            Constraint::new(LeftOperand::DateTime, Operator::Lt, "tomorrow"),
            Constraint::new(LeftOperand::DateTime, Operator::In, "2027-01-01T00:00:00Z"),
            Constraint::new(LeftOperand::UseCount, Operator::Lt, -1),
            Constraint::new(LeftOperand::UseCount, Operator::In, 2),
        ];
        for c in ok {
            assert!(constraint_violation(&c).is_none(), "{c:?}");
        }
        for c in bad {
            assert!(constraint_violation(&c).is_some(), "{c:?}");
        }
    }

    #[test]
    fn constraint_examples() {
        let c = ctx(Action::Transfer, "research");
        assert!(evaluate_constraint(
            &Constraint::new(LeftOperand::Purpose, Operator::Eq, "research"),
            &c
        ));
        let mut c3 = c.clone();
        c3.prior_use_count = 3;
        assert!(!evaluate_constraint(
            &Constraint::new(LeftOperand::UseCount, Operator::Lt, 3),
            &c3
        ));
        let mut kul = c.clone();
        kul.requester = pid("did:dali:kul:tb1");
        let membership = Constraint {
            left: LeftOperand::Participant,
            op: Operator::In,
            right: RightOperand::List(vec!["did:dali:eur:tb1".into(), "did:dali:isi:tb1".into()]),
        };
        assert!(!evaluate_constraint(&membership, &kul));
        kul.requester = pid("did:dali:isi:tb1");
        assert!(evaluate_constraint(&membership, &kul));
    }

    #[test]
    fn date_time_compares_against_now() {
        let c = ctx(Action::Use, "x");
        let before = Constraint::new(LeftOperand::DateTime, Operator::Lt, "2026-06-01T00:00:00Z");
        let after = Constraint::new(LeftOperand::DateTime, Operator::Gteq, "2026-01-01T00:00:00Z");
        assert!(evaluate_constraint(&before, &c));
        assert!(evaluate_constraint(&after, &c));
        let mut late = c;
        late.now = Timestamp::parse("2026-06-01T00:00:00Z").unwrap();
        assert!(!evaluate_constraint(&before, &late));
    }

    #[test]
    fn evaluation_examples() {
        let empty = UsagePolicy::default();
        for a in Action::ALL {
            assert_eq!(
                evaluate(&empty, &ctx(a, "research")),
                Decision::Deny(DenyReason::NoMatchingPermission)
            );
        }

        let research = UsagePolicy {
            permissions: vec![Rule::with(
                Action::Transfer,
                vec![Constraint::new(LeftOperand::Purpose, Operator::Eq, "research")],
            )],
            prohibitions: vec![],
        };
        assert_eq!(evaluate(&research, &ctx(Action::Transfer, "research")), Decision::Permit);
        assert_eq!(
            evaluate(&research, &ctx(Action::Transfer, "commercial")),
            Decision::Deny(DenyReason::NoMatchingPermission)
        );

        let x = pid("did:dali:lab:consumer");
        let blocked = UsagePolicy {
            permissions: vec![Rule::unconditional(Action::Transfer)],
            prohibitions: vec![Rule::with(
                Action::Transfer,
                vec![Constraint::new(LeftOperand::Participant, Operator::Eq, x.as_str())],
            )],
        };
        assert_eq!(
            evaluate(&blocked, &ctx(Action::Transfer, "research")),
            Decision::Deny(DenyReason::Prohibited)
        );
    }

    #[test]
    fn use_count_is_monotone() {
        for n in 0..=10i64 {
            let p = UsagePolicy {
                permissions: vec![Rule::with(
                    Action::Transfer,
                    vec![Constraint::new(LeftOperand::UseCount, Operator::Lt, n)],
                )],
                prohibitions: vec![],
            };
            for prior in 0..=12u64 {
                let mut c = ctx(Action::Transfer, "research");
                c.prior_use_count = prior;
                assert_eq!(evaluate(&p, &c).is_permit(), (prior as i64) < n, "n={n} prior={prior}");
            }
        }
    }

    #[test]
    fn policy_json_format_is_bit_exact() {
        let json = r#"{"permissions":[{"action":"transfer","constraints":[{"left":"purpose","op":"eq","right":"research"}]}],"prohibitions":[]}"#;
        let p: UsagePolicy = serde_json::from_str(json).unwrap();
        assert_eq!(p.permissions[0].action, Action::Transfer);
        assert_eq!(serde_json::to_string(&p).unwrap(), json);
        let p2: UsagePolicy = serde_json::from_str(
            r#"{"permissions":[{"action":"re-share"}],"prohibitions":[{"action":"use","constraints":[{"left":"useCount","op":"lteq","right":4},{"left":"participant","op":"in","right":["did:dali:a:b"]}]}]}"#,
        )
        .unwrap();
        assert_eq!(p2.permissions[0].action, Action::ReShare);
        assert_eq!(p2.prohibitions[0].constraints[0].right, RightOperand::Integer(4));
    }

    fn arb_policy() -> impl Strategy<Value = UsagePolicy> {
        let constraint = prop_oneof![
            Just(Constraint::new(LeftOperand::Purpose, Operator::Eq, "research")),
            Just(Constraint::new(LeftOperand::UseCount, Operator::Lt, 2)),
            Just(Constraint::new(LeftOperand::DateTime, Operator::Gt, "2026-01-01T00:00:00Z")),
        ];
        let rule = (
            prop_oneof![Just(Action::Use), Just(Action::Transfer)],
            proptest::collection::vec(constraint, 0..3),
        )
            .prop_map(|(a, cs)| Rule::with(a, cs));
        (
            proptest::collection::vec(rule.clone(), 0..3),
            proptest::collection::vec(rule, 0..2),
        )
            .prop_map(|(permissions, prohibitions)| UsagePolicy { permissions, prohibitions })
    }

    proptest! {
        #[test]
        fn adding_a_prohibition_never_grants(
            p in arb_policy(),
            extra in arb_policy(),
            purpose in prop_oneof![Just("research"), Just("commercial")],
            prior in 0u64..4,
            use_action in any::<bool>(),
        ) {
            let mut c = ctx(if use_action { Action::Use } else { Action::Transfer }, purpose);
            c.prior_use_count = prior;
            let before = evaluate(&p, &c);
            let mut stricter = p.clone();
            stricter.prohibitions.extend(extra.permissions);
            let after = evaluate(&stricter, &c);
            prop_assert!(before.is_permit() || !after.is_permit());
            prop_assert_eq!(evaluate(&p, &c), before);
        }

        #[test]
        fn policy_serde_round_trip(p in arb_policy()) {
            let json = serde_json::to_string(&p).unwrap();
            prop_assert_eq!(serde_json::from_str::<UsagePolicy>(&json).unwrap(), p);
        }
    }
}
