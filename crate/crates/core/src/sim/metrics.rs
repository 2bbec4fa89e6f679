use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::gka::NodeId;
use crate::messages::MessageKind;
use crate::time::Time;

use super::transcript::MessageId;

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct NodeMetrics {
    pub sent_by_kind: BTreeMap<MessageKind, u64>,
    pub broadcasts: u64,
    pub unicasts: u64,
    pub received: u64,
    pub rejected: u64,
    pub exps: u64,
    pub key_changes: u64,
}

/// What happened to the copies of one message.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MessageFate {
    pub targets: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub suppressed: u64,
    /// Still travelling when the run ended.
    pub in_flight: u64,
}

impl MessageFate {
    pub fn is_conserved(&self) -> bool {
        self.targets == self.delivered + self.dropped + self.suppressed + self.in_flight
    }
}

/// Cluster-wide agreement: exactly one node leads and every live node holds that leader's
/// current key (a lone node needs no key).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Agreement {
    pub leader: NodeId,
    pub epoch: Option<u64>,
    pub derived: Option<[u8; 32]>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Metrics {
    pub per_node: BTreeMap<NodeId, NodeMetrics>,
    pub messages: u64,
    pub broadcasts: u64,
    pub deliveries: u64,
    pub drops_loss: u64,
    pub drops_dead: u64,
    pub suppressed: u64,
    pub in_flight: u64,
    pub fates: BTreeMap<MessageId, MessageFate>,
    /// Changes of the agreement state; `None` while not in agreement.
    pub convergence: Vec<(Time, Option<Agreement>)>,
    pub key_changes: Vec<(Time, NodeId, u64)>,
}

impl Metrics {
    pub fn node(&mut self, id: NodeId) -> &mut NodeMetrics {
        self.per_node.entry(id).or_default()
    }

    pub fn is_conserved(&self) -> bool {
        self.fates.values().all(MessageFate::is_conserved)
    }

    /// Earliest instant at or after `from` at which agreement holds.
    pub fn converged_since(&self, from: Time) -> Option<(Time, Agreement)> {
        if let Some(a) = self.agreement_at(from) {
            return Some((from, a));
        }
        self.convergence
            .iter()
            .find_map(|&(t, s)| if t > from { s.map(|a| (t, a)) } else { None })
    }

    /// Agreement state at the end of the run.
    pub fn final_agreement(&self) -> Option<Agreement> {
        self.convergence.last().and_then(|(_, s)| *s)
    }

    /// Agreement in force at `at`.
    pub fn agreement_at(&self, at: Time) -> Option<Agreement> {
        self.convergence
            .iter()
            .take_while(|(t, _)| *t <= at)
            .last()
            .and_then(|(_, s)| *s)
    }

    pub fn total_exps(&self) -> u64 {
        self.per_node.values().map(|n| n.exps).sum()
    }

    pub fn render_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "messages {}", self.messages);
        let _ = writeln!(s, "broadcasts {}", self.broadcasts);
        let _ = writeln!(s, "deliveries {}", self.deliveries);
        let _ = writeln!(s, "drops_loss {}", self.drops_loss);
        let _ = writeln!(s, "drops_dead {}", self.drops_dead);
        let _ = writeln!(s, "suppressed {}", self.suppressed);
        let _ = writeln!(s, "in_flight {}", self.in_flight);
        let _ = writeln!(s, "exps {}", self.total_exps());
        let _ = writeln!(s, "key_changes {}", self.key_changes.len());
        let _ = writeln!(s, "conserved {}", self.is_conserved());
        for (id, n) in &self.per_node {
            let kinds: Vec<String> = n.sent_by_kind.iter().map(|(k, c)| format!("{k}={c}")).collect();
            let _ = writeln!(
                s,
                "node {id} sent[{}] bcast={} ucast={} recv={} rejected={} exps={} keys={}",
                kinds.join(","),
                n.broadcasts,
                n.unicasts,
                n.received,
                n.rejected,
                n.exps,
                n.key_changes
            );
        }
        for (at, state) in &self.convergence {
            match state {
                Some(a) => {
                    let key = a.derived.map(hex::encode).unwrap_or_else(|| "-".into());
                    let epoch = a.epoch.map(|e| e.to_string()).unwrap_or_else(|| "-".into());
                    let _ = writeln!(
                        s,
                        "converged {} leader={} epoch={epoch} key={key}",
                        at.as_micros(),
                        a.leader
                    );
                }
                None => {
                    let _ = writeln!(s, "diverged {}", at.as_micros());
                }
            }
        }
        s
    }
}
