//! Independent checks used by the test suites.
//!
//! Nothing here goes through the member or leader key paths of [`crate::gka`]; keys are
//! recomputed straight from the exponent `r_l·(1 + Σ r_i) mod q` and hashed with a local
//! KDF.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use num_bigint::BigUint;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsm::{Destination, DrawnSecret, SecretRole};
use crate::gka::NodeId;
use crate::group::{ExpCounter, GroupElement, GroupParams, Scalar};
use crate::messages::{Message, MessageKind};
use crate::sim::{EventKind, MessageId, Transcript};
use crate::time::Time;

/// `g^{r_l(1+Σr_i)}` with the exponent reduced mod q first.
pub fn oracle_key(leader_secret: &Scalar, member_secrets: &[Scalar], params: &GroupParams) -> GroupElement {
    let q = params.order();
    let sum = member_secrets
        .iter()
        .fold(BigUint::from(1u32), |acc, s| (acc + s.value()) % q);
    let exponent = (leader_secret.value() * sum) % q;
    let value = params.generator().value().modpow(&exponent, params.modulus());
    params
        .element(value)
        .expect("powers of the generator stay in the subgroup")
}

/// `base^e` by repeated multiplication. Only sensible for tiny exponents.
pub fn naive_pow(base: &BigUint, e: u64, modulus: &BigUint) -> BigUint {
    let mut acc = BigUint::from(1u32) % modulus;
    for _ in 0..e {
        acc = acc * base % modulus;
    }
    acc
}

/// SHA-256 over the element encoding and the big-endian epoch.
pub fn oracle_kdf(key: &GroupElement, epoch: u64, params: &GroupParams) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(params.encode_element(key));
    h.update(epoch.to_be_bytes());
    h.finalize().into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Finding {
    /// A node's key differs from the recomputation.
    KeyMismatch {
        at: Time,
        node: NodeId,
        epoch: u64,
        detail: String,
    },
    /// A key could not be traced back to known secrets.
    Untraceable {
        at: Time,
        node: NodeId,
        epoch: u64,
        detail: String,
    },
    /// A node acted in the step that handled an unauthenticated message.
    UnverifiedAction { at: Time, node: NodeId, msg: MessageId },
    /// Secret scalar bytes appear inside a sent message.
    SecretLeak {
        msg: MessageId,
        sender: NodeId,
        owner: NodeId,
    },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::KeyMismatch {
                at,
                node,
                epoch,
                detail,
            } => {
                write!(f, "key-mismatch {} node={node} epoch={epoch} {detail}", at.as_micros())
            }
            Finding::Untraceable {
                at,
                node,
                epoch,
                detail,
            } => {
                write!(f, "untraceable {} node={node} epoch={epoch} {detail}", at.as_micros())
            }
            Finding::UnverifiedAction { at, node, msg } => {
                write!(f, "unverified-action {} node={node} m{msg}", at.as_micros())
            }
            Finding::SecretLeak { msg, sender, owner } => write!(f, "secret-leak m{msg} sender={sender} owner={owner}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AuditReport {
    pub keys_checked: usize,
    pub deliveries_checked: usize,
    pub messages_scanned: usize,
    pub findings: Vec<Finding>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "keys_checked {}", self.keys_checked);
        let _ = writeln!(s, "deliveries_checked {}", self.deliveries_checked);
        let _ = writeln!(s, "messages_scanned {}", self.messages_scanned);
        let _ = writeln!(s, "findings {}", self.findings.len());
        for f in &self.findings {
            let _ = writeln!(s, "{f}");
        }
        let _ = writeln!(s, "result {}", if self.is_clean() { "clean" } else { "dirty" });
        s
    }
}

struct Ledger<'a> {
    params: &'a GroupParams,
    /// Member secrets by (owner, encoded blinded value).
    members: BTreeMap<(NodeId, Vec<u8>), &'a Scalar>,
    leaders: BTreeMap<NodeId, Vec<&'a Scalar>>,
    /// (leader, epoch) → leader secret
    solved: BTreeMap<(NodeId, u64), Option<Scalar>>,
}

impl<'a> Ledger<'a> {
    fn new(secrets: &'a [DrawnSecret], params: &'a GroupParams) -> Self {
        let mut members = BTreeMap::new();
        let mut leaders: BTreeMap<NodeId, Vec<&Scalar>> = BTreeMap::new();
        for d in secrets {
            match d.role {
                SecretRole::Member => {
                    members.insert((d.node, params.encode_element(&d.blinded)), &d.secret);
                }
                SecretRole::Leader => leaders.entry(d.node).or_default().push(&d.secret),
            }
        }
        Self {
            params,
            members,
            leaders,
            solved: BTreeMap::new(),
        }
    }

    /// The leader secret behind an announcement, found from its own responses (or from the
    /// key itself when it has no entries).
    fn leader_secret(&mut self, msg: &Message, key: &GroupElement) -> Option<Scalar> {
        let params = self.params;
        let candidates = self.leaders.get(&msg.sender).cloned().unwrap_or_default();
        self.solved
            .entry((msg.sender, msg.epoch))
            .or_insert_with(|| {
                let mut scratch = ExpCounter::new();
                let first = msg.entries.first();
                candidates
                    .into_iter()
                    .find(|s| match first {
                        Some(e) => e.blinded_response.as_ref() == Some(&params.exp(&e.blinded_secret, s, &mut scratch)),
                        None => &oracle_key(s, &[], params) == key,
                    })
                    .cloned()
            })
            .clone()
    }
}

/// Recomputes every key every node ever installed, flags actions taken on unauthenticated
/// input and scans sent bytes for secret scalars.
pub fn audit_transcript(transcript: &Transcript, secrets: &[DrawnSecret], params: &GroupParams) -> AuditReport {
    let mut report = AuditReport::default();
    let mut ledger = Ledger::new(secrets, params);
    let mut decoded: BTreeMap<MessageId, Option<Message>> = BTreeMap::new();

    for e in transcript.iter() {
        let EventKind::Key {
            epoch,
            leader,
            group_key,
            derived,
            via,
        } = &e.kind
        else {
            continue;
        };
        report.keys_checked += 1;
        let untraceable = |detail: String| Finding::Untraceable {
            at: e.at,
            node: e.node,
            epoch: *epoch,
            detail,
        };
        let Some(via) = *via else {
            report.findings.push(untraceable("no announcement".into()));
            continue;
        };
        let msg = decoded
            .entry(via)
            .or_insert_with(|| transcript.sent_bytes(via).and_then(|b| Message::decode(b, params).ok()))
            .clone();
        let Some(msg) = msg.filter(|m| m.kind.is_group_announcement()) else {
            report
                .findings
                .push(untraceable(format!("m{via} is not an announcement")));
            continue;
        };
        if msg.sender != *leader || msg.epoch != *epoch {
            report.findings.push(Finding::KeyMismatch {
                at: e.at,
                node: e.node,
                epoch: *epoch,
                detail: format!("announcement m{via} is from {} at epoch {}", msg.sender, msg.epoch),
            });
            continue;
        }
        let mut member_secrets = Vec::with_capacity(msg.entries.len());
        let mut missing = None;
        for entry in &msg.entries {
            match ledger
                .members
                .get(&(entry.participant, params.encode_element(&entry.blinded_secret)))
            {
                Some(s) => member_secrets.push((*s).clone()),
                None => {
                    missing = Some(entry.participant);
                    break;
                }
            }
        }
        if let Some(p) = missing {
            report
                .findings
                .push(untraceable(format!("no secret for participant {p}")));
            continue;
        }
        let Some(r_l) = ledger.leader_secret(&msg, group_key) else {
            report
                .findings
                .push(untraceable(format!("no leader secret for {}", msg.sender)));
            continue;
        };
        let expected = oracle_key(&r_l, &member_secrets, params);
        if &expected != group_key {
            report.findings.push(Finding::KeyMismatch {
                at: e.at,
                node: e.node,
                epoch: *epoch,
                detail: "group element".into(),
            });
            continue;
        }
        if oracle_kdf(&expected, *epoch, params) != *derived {
            report.findings.push(Finding::KeyMismatch {
                at: e.at,
                node: e.node,
                epoch: *epoch,
                detail: "derived key".into(),
            });
        }
    }

    // Events of one node step share a step number.
    let mut acted: BTreeSet<(NodeId, u64)> = BTreeSet::new();
    for e in transcript.iter() {
        if matches!(
            e.kind,
            EventKind::Send { .. } | EventKind::Key { .. } | EventKind::Mode { .. }
        ) {
            acted.insert((e.node, e.step));
        }
    }
    for e in transcript.iter() {
        if let EventKind::Deliver { msg, auth_ok, .. } = &e.kind {
            report.deliveries_checked += 1;
            if !auth_ok && acted.contains(&(e.node, e.step)) {
                report.findings.push(Finding::UnverifiedAction {
                    at: e.at,
                    node: e.node,
                    msg: *msg,
                });
            }
        }
    }

    // Small scalars match by accident everywhere; only scan when they are wide enough.
    if params.order().bits() >= 64 {
        let needles: Vec<(NodeId, Vec<u8>)> = secrets
            .iter()
            .map(|d| (d.node, params.encode_scalar(&d.secret)))
            .collect();
        for e in transcript.iter() {
            let EventKind::Send { msg, bytes, .. } = &e.kind else {
                continue;
            };
            report.messages_scanned += 1;
            for (owner, needle) in &needles {
                if bytes.windows(needle.len()).any(|w| w == needle.as_slice()) {
                    report.findings.push(Finding::SecretLeak {
                        msg: *msg,
                        sender: e.node,
                        owner: *owner,
                    });
                }
            }
        }
    }
    report
}

/// The leader secret behind every non-empty announcement, keyed by (leader, epoch).
pub fn leader_secrets(
    transcript: &Transcript,
    secrets: &[DrawnSecret],
    params: &GroupParams,
) -> BTreeMap<(NodeId, u64), Scalar> {
    let mut ledger = Ledger::new(secrets, params);
    let mut out = BTreeMap::new();
    for e in transcript.iter() {
        let EventKind::Send { msg, kind, entries, .. } = &e.kind else {
            continue;
        };
        if !kind.is_group_announcement() || *entries == 0 {
            continue;
        }
        let Some(m) = transcript
            .sent_bytes(*msg)
            .and_then(|b| Message::decode(b, params).ok())
        else {
            continue;
        };
        if let Some(s) = ledger.leader_secret(&m, &params.identity()) {
            out.insert((m.sender, m.epoch), s);
        }
    }
    out
}

/// Offset of the first entry's nonce: kind, sender, sender nonce, epoch, entry count, id.
const ENTRY_NONCE: usize = 1 + 4 + 16 + 8 + 2 + 4;

/// One row of the per-establishment cost table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub m: usize,
    pub leader: NodeId,
    pub epoch: u64,
    pub member_exps: BTreeMap<NodeId, u64>,
    pub leader_exps: u64,
    pub messages: u64,
    pub broadcasts: u64,
    pub rounds: u64,
}

impl CostRow {
    pub fn render(&self) -> String {
        let per_member: BTreeSet<u64> = self.member_exps.values().copied().collect();
        let per_member: Vec<String> = per_member.iter().map(u64::to_string).collect();
        format!(
            "m={} member_exps={} leader_exps={} messages={} broadcasts={} rounds={}",
            self.m,
            per_member.join("/"),
            self.leader_exps,
            self.messages,
            self.broadcasts,
            self.rounds
        )
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CostError {
    #[error("no establishment of size {0} in the transcript")]
    NotFound(usize),
    #[error("{field}: expected {expected}, measured {actual}")]
    CountMismatch { field: String, expected: u64, actual: u64 },
}

/// Measures the first establishment of an `m`-party key (leader plus `m-1` members) and
/// checks it against the expected row: members 2 exponentiations each, the leader `m`,
/// `m` messages of which one broadcast, two rounds.
pub fn cost_table(transcript: &Transcript, m: usize) -> Result<CostRow, CostError> {
    let row = measure_establishment(transcript, m)?;
    let mismatch = |field: &str, expected: u64, actual: u64| {
        (expected != actual).then(|| CostError::CountMismatch {
            field: field.to_string(),
            expected,
            actual,
        })
    };
    let m64 = m as u64;
    for (id, &n) in &row.member_exps {
        if let Some(e) = mismatch(&format!("member {id} exponentiations"), 2, n) {
            return Err(e);
        }
    }
    let checks = [
        mismatch("leader exponentiations", m64, row.leader_exps),
        mismatch("messages", m64, row.messages),
        mismatch("broadcasts", 1, row.broadcasts),
        mismatch("rounds", 2, row.rounds),
    ];
    match checks.into_iter().flatten().next() {
        Some(e) => Err(e),
        None => Ok(row),
    }
}

/// Raw counts for the first announcement carrying `m-1` entries, without checking them.
pub fn measure_establishment(transcript: &Transcript, m: usize) -> Result<CostRow, CostError> {
    let events = &transcript.events;
    let mut kinds: BTreeMap<MessageId, (NodeId, MessageKind, Destination)> = BTreeMap::new();
    let mut target = None;
    for (i, e) in events.iter().enumerate() {
        if let EventKind::Send {
            msg, kind, to, entries, ..
        } = &e.kind
        {
            kinds.insert(*msg, (e.node, *kind, *to));
            if target.is_none() && kind.is_group_announcement() && *entries + 1 == m && *entries > 0 {
                target = Some((i, *msg, e.node));
            }
        }
    }
    let Some((idx, announce, leader)) = target else {
        return Err(CostError::NotFound(m));
    };
    let epoch = match &events[idx].kind {
        EventKind::Send { epoch, .. } => *epoch,
        _ => unreachable!(),
    };

    // Leader work since its previous announcement, up to and including the build step.
    let window_start = events[..idx]
        .iter()
        .rposition(|e| {
            e.node == leader && matches!(&e.kind, EventKind::Send { kind, .. } if kind.is_group_announcement())
        })
        .map_or(0, |p| p + 1);
    let leader_exps: u64 = events[window_start..=idx]
        .iter()
        .filter(|e| e.node == leader)
        .filter_map(|e| match e.kind {
            EventKind::Exp { count } => Some(count),
            _ => None,
        })
        .sum();

    // Each member's causal IREPLY: the last one the leader accepted before building.
    let mut causal: BTreeMap<NodeId, (MessageId, u64)> = BTreeMap::new();
    for e in &events[window_start..idx] {
        if e.node != leader {
            continue;
        }
        if let EventKind::Deliver {
            msg,
            from,
            auth_ok: true,
            ..
        } = &e.kind
        {
            if let Some((_, MessageKind::IReply, _)) = kinds.get(msg) {
                causal.insert(*from, (*msg, e.step));
            }
        }
    }
    // Steps in which each reply was sent.
    let send_step: BTreeMap<MessageId, u64> = events
        .iter()
        .filter_map(|e| match &e.kind {
            EventKind::Send { msg, .. } => Some((*msg, e.step)),
            _ => None,
        })
        .collect();
    let exps_in = |node: NodeId, step: u64| -> u64 {
        events
            .iter()
            .filter(|e| e.node == node && e.step == step)
            .filter_map(|e| match e.kind {
                EventKind::Exp { count } => Some(count),
                _ => None,
            })
            .sum()
    };

    // The contribution in a reply may have been blinded for an earlier send.
    let reply_nonce = |msg: MessageId| -> Option<[u8; 16]> {
        let bytes = transcript.sent_bytes(msg)?;
        bytes.get(ENTRY_NONCE..ENTRY_NONCE + 16)?.try_into().ok()
    };
    let blinded_in = |node: NodeId, msg: MessageId| -> Option<u64> {
        let nonce = reply_nonce(msg)?;
        events.iter().find_map(|e| match &e.kind {
            EventKind::Send {
                msg: m,
                kind: MessageKind::IReply,
                ..
            } if e.node == node && reply_nonce(*m) == Some(nonce) => Some(e.step),
            _ => None,
        })
    };

    let mut member_exps = BTreeMap::new();
    for e in &events[idx..] {
        if let EventKind::Key {
            epoch: k, leader: l, ..
        } = e.kind
        {
            if k == epoch && l == leader && e.node != leader && !member_exps.contains_key(&e.node) {
                let blind = causal
                    .get(&e.node)
                    .and_then(|(msg, _)| blinded_in(e.node, *msg))
                    .map_or(0, |s| exps_in(e.node, s));
                member_exps.insert(e.node, blind + exps_in(e.node, e.step));
            }
        }
    }

    // Rounds: depth in the delivery graph. Announcements from before the window (INIT and
    // beacons) sit at depth zero.
    let mut depth: BTreeMap<MessageId, u64> = BTreeMap::new();
    let trigger_depth = |node: NodeId, step: u64, depth: &BTreeMap<MessageId, u64>| -> u64 {
        events
            .iter()
            .filter(|e| e.node == node && e.step == step)
            .filter_map(|e| match &e.kind {
                EventKind::Deliver { msg, .. } => Some(depth.get(msg).copied().unwrap_or(0)),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    };
    for (msg, _) in causal.values() {
        let (sender, _, _) = kinds[msg];
        let d = 1 + trigger_depth(sender, send_step[msg], &depth);
        depth.insert(*msg, d);
    }
    let rounds = 1 + causal.values().map(|(msg, _)| depth[msg]).max().unwrap_or(0);
    let broadcasts = u64::from(matches!(kinds.get(&announce), Some((_, _, Destination::Broadcast))));
    Ok(CostRow {
        m,
        leader,
        epoch,
        member_exps,
        leader_exps,
        messages: causal.len() as u64 + 1,
        broadcasts,
        rounds,
    })
}
