use std::fmt::Write as _;
use std::sync::Arc;

use crate::fsm::{Destination, Disposition, Mode};
use crate::gka::NodeId;
use crate::group::GroupElement;
use crate::messages::MessageKind;
use crate::time::Time;

pub type MessageId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DropReason {
    Loss,
    /// Receiver was not running when the message arrived.
    Dead,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Send {
        msg: MessageId,
        kind: MessageKind,
        to: Destination,
        epoch: u64,
        entries: usize,
        bytes: Arc<Vec<u8>>,
    },
    Deliver {
        msg: MessageId,
        from: NodeId,
        auth_ok: bool,
        disposition: Disposition,
    },
    Drop {
        msg: MessageId,
        reason: DropReason,
    },
    Suppress {
        msg: MessageId,
    },
    Timer,
    Mode {
        from: Mode,
        to: Mode,
    },
    Key {
        epoch: u64,
        leader: NodeId,
        group_key: GroupElement,
        derived: [u8; 32],
        via: Option<MessageId>,
    },
    Exp {
        count: u64,
    },
    Degenerate {
        excluded: NodeId,
    },
    Join {
        incarnation: u32,
    },
    Leave {
        graceful: bool,
    },
    Partition {
        sides: Vec<Vec<NodeId>>,
    },
    Heal,
    Inject {
        msg: MessageId,
        bytes: Arc<Vec<u8>>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEvent {
    pub at: Time,
    /// Node step that produced the event; events of one step share it.
    pub step: u64,
    pub node: NodeId,
    pub kind: EventKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub events: Vec<TranscriptEvent>,
}

fn disposition_label(d: Disposition) -> String {
    match d {
        Disposition::None => "none".into(),
        Disposition::Accepted => "accepted".into(),
        Disposition::Ignored => "ignored".into(),
        Disposition::Rejected(r) => format!("rejected:{r}"),
    }
}

impl TranscriptEvent {
    pub fn render(&self) -> String {
        let mut s = format!("{} ", self.at.as_micros());
        let n = self.node;
        let _ = match &self.kind {
            EventKind::Send {
                msg,
                kind,
                to,
                epoch,
                entries,
                bytes,
            } => {
                let to = match to {
                    Destination::Broadcast => "bcast".to_string(),
                    Destination::Unicast(id) => id.to_string(),
                };
                write!(
                    s,
                    "send {n} m{msg} {kind} to={to} epoch={epoch} entries={entries} len={}",
                    bytes.len()
                )
            }
            EventKind::Deliver {
                msg,
                from,
                auth_ok,
                disposition,
            } => write!(
                s,
                "deliver {n} m{msg} from={from} auth={} result={}",
                if *auth_ok { "ok" } else { "bad" },
                disposition_label(*disposition)
            ),
            EventKind::Drop { msg, reason } => write!(
                s,
                "drop {n} m{msg} {}",
                match reason {
                    DropReason::Loss => "loss",
                    DropReason::Dead => "dead",
                }
            ),
            EventKind::Suppress { msg } => write!(s, "suppress {n} m{msg}"),
            EventKind::Timer => write!(s, "timer {n}"),
            EventKind::Mode { from, to } => write!(s, "mode {n} {from}->{to}"),
            EventKind::Key {
                epoch, leader, derived, ..
            } => {
                write!(s, "key {n} epoch={epoch} leader={leader} key={}", hex::encode(derived))
            }
            EventKind::Exp { count } => write!(s, "exp {n} n={count}"),
            EventKind::Degenerate { excluded } => write!(s, "degenerate {n} excluded={excluded}"),
            EventKind::Join { incarnation } => write!(s, "join {n} incarnation={incarnation}"),
            EventKind::Leave { graceful } => {
                write!(s, "leave {n} {}", if *graceful { "graceful" } else { "crash" })
            }
            EventKind::Partition { sides } => {
                let sides: Vec<String> = sides
                    .iter()
                    .map(|side| side.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(","))
                    .collect();
                write!(s, "partition {n} {}", sides.join("|"))
            }
            EventKind::Heal => write!(s, "heal {n}"),
            EventKind::Inject { msg, bytes } => write!(s, "inject {n} m{msg} len={}", bytes.len()),
        };
        s
    }
}

impl Transcript {
    pub fn push(&mut self, event: TranscriptEvent) {
        self.events.push(event);
    }

    /// One line per event, newline terminated.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&e.render());
            out.push('\n');
        }
        out
    }

    pub fn iter(&self) -> impl Iterator<Item = &TranscriptEvent> {
        self.events.iter()
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn sent_bytes(&self, msg: MessageId) -> Option<&Arc<Vec<u8>>> {
        self.events.iter().find_map(|e| match &e.kind {
            EventKind::Send { msg: m, bytes, .. } | EventKind::Inject { msg: m, bytes } if *m == msg => Some(bytes),
            _ => None,
        })
    }
}
