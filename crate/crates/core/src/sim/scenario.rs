//! Scenario files.
//!
//! One action per line, `<time> <verb> <args>`:
//!
//! ```text
//! # comment
//! 30s leave 1 crash
//! 45s join 11
//! 60s leave 4 graceful
//! 70s partition 1,2,3|4,5,6
//! 100s heal
//! ```
//!
//! Times take a unit suffix (`us`, `ms`, `s`, `m`/`min`). Blank lines and everything after
//! `#` are ignored. Lines must appear in non-decreasing time order.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::gka::NodeId;
use crate::time::{parse_duration, Time};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Join(NodeId),
    Leave { id: NodeId, graceful: bool },
    Partition(Vec<Vec<NodeId>>),
    Heal,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Join(id) => write!(f, "join {id}"),
            Action::Leave { id, graceful } => {
                write!(f, "leave {id} {}", if *graceful { "graceful" } else { "crash" })
            }
            Action::Partition(sides) => {
                let sides: Vec<String> = sides
                    .iter()
                    .map(|s| s.iter().map(|id| id.to_string()).collect::<Vec<_>>().join(","))
                    .collect();
                write!(f, "partition {}", sides.join("|"))
            }
            Action::Heal => f.write_str("heal"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TimedAction {
    pub at: Time,
    pub action: Action,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Scenario {
    pub actions: Vec<TimedAction>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ScenarioError {
    pub line: usize,
    pub message: String,
}

fn parse_id(token: &str) -> Result<NodeId, String> {
    token.parse().map_err(|_| format!("invalid node id {token:?}"))
}

fn parse_action(verb: &str, args: &[&str]) -> Result<Action, String> {
    match (verb, args) {
        ("join", [id]) => Ok(Action::Join(parse_id(id)?)),
        ("leave", [id, mode]) => {
            let graceful = match *mode {
                "graceful" => true,
                "crash" => false,
                other => return Err(format!("leave mode must be graceful or crash, got {other:?}")),
            };
            Ok(Action::Leave {
                id: parse_id(id)?,
                graceful,
            })
        }
        ("partition", [sides]) => {
            let sides = sides
                .split('|')
                .map(|side| side.split(',').map(parse_id).collect::<Result<Vec<_>, _>>())
                .collect::<Result<Vec<_>, _>>()?;
            Ok(Action::Partition(sides))
        }
        ("heal", []) => Ok(Action::Heal),
        ("join" | "leave" | "partition" | "heal", _) => Err(format!("wrong number of arguments for {verb}")),
        _ => Err(format!("unknown verb {verb:?}")),
    }
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut actions: Vec<TimedAction> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ScenarioError { line: i + 1, message };
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let [time, verb, args @ ..] = tokens.as_slice() else {
                return Err(err("expected <time> <verb> <args>".into()));
            };
            let at = parse_duration(time)
                .map(Time::from_duration)
                .ok_or_else(|| err(format!("invalid time {time:?}")))?;
            if actions.last().is_some_and(|prev| prev.at > at) {
                return Err(err("actions out of time order".into()));
            }
            let action = parse_action(verb, args).map_err(err)?;
            actions.push(TimedAction { at, action });
        }
        Ok(Self { actions })
    }

    pub fn render(&self) -> String {
        self.actions
            .iter()
            .map(|a| format!("{}us {}\n", a.at.as_micros(), a.action))
            .collect()
    }
}

impl FromStr for Scenario {
    type Err = ScenarioError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::parse(s)
    }
}
