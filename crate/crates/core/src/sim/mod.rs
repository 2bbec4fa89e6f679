//! Deterministic discrete-event network simulator driving [`Node`] state machines.
//!
//! Broadcasts reach every other running node on the sender's side of the current
//! partition; each copy is lost independently with the configured probability and
//! otherwise arrives after a uniformly drawn latency. Events are processed in
//! (time, insertion order), so a seed fixes the whole run.

mod metrics;
mod scenario;
mod transcript;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fsm::{ConfigError, Destination, DrawnSecret, Event, FsmOutput, Mode, Node, NodeConfig, NodeSnapshot};
use crate::gka::NodeId;
use crate::group::GroupParams;
use crate::messages::{verify_bytes, KeyRing, SignedParts};
use crate::time::{duration_micros, Time};

pub use metrics::{Agreement, MessageFate, Metrics, NodeMetrics};
pub use scenario::{Action, Scenario, ScenarioError, TimedAction};
pub use transcript::{DropReason, EventKind, MessageId, Transcript, TranscriptEvent};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("partition sides overlap on node {0}")]
    Overlap(NodeId),
    #[error("node {0} is not running")]
    UnknownNode(NodeId),
    #[error("node {0} is already running")]
    AlreadyRunning(NodeId),
}

/// Raw bytes handed to a node as if they came off the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Injection {
    pub at: Time,
    pub to: NodeId,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    /// Nodes `1..=node_count` start at time zero.
    pub node_count: u32,
    pub loss: f64,
    pub latency_min: Duration,
    pub latency_max: Duration,
    pub seed: u64,
    pub duration: Duration,
    pub schedule: Vec<TimedAction>,
    pub injections: Vec<Injection>,
    /// Nodes that accept messages without checking signatures (fault injection).
    pub unverified: BTreeSet<NodeId>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            node_count: 10,
            loss: 0.0,
            latency_min: Duration::from_millis(10),
            latency_max: Duration::from_millis(50),
            seed: 0,
            duration: Duration::from_secs(120),
            schedule: Vec::new(),
            injections: Vec::new(),
            unverified: BTreeSet::new(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(0.0..=1.0).contains(&self.loss) {
            return Err(ConfigError(format!("loss probability {} outside [0, 1]", self.loss)));
        }
        if self.latency_min > self.latency_max {
            return Err(ConfigError("latency_min exceeds latency_max".into()));
        }
        if self.node_count == 0 && !self.schedule.iter().any(|a| matches!(a.action, Action::Join(_))) {
            return Err(ConfigError("no nodes".into()));
        }
        Ok(())
    }

    /// Every id that can appear during the run.
    pub fn participants(&self) -> BTreeSet<NodeId> {
        let mut ids: BTreeSet<NodeId> = (1..=self.node_count).collect();
        for a in &self.schedule {
            match &a.action {
                Action::Join(id) | Action::Leave { id, .. } => {
                    ids.insert(*id);
                }
                Action::Partition(sides) => ids.extend(sides.iter().flatten()),
                Action::Heal => {}
            }
        }
        ids
    }
}

/// Everything a finished run produced.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub transcript: Transcript,
    pub metrics: Metrics,
    /// Every secret any node drew, in draw order.
    pub secrets: Vec<DrawnSecret>,
    /// Nodes still running at the end.
    pub final_nodes: BTreeMap<NodeId, NodeSnapshot>,
}

#[derive(Debug)]
enum Pending {
    Deliver {
        msg: MessageId,
        to: NodeId,
        bytes: Arc<Vec<u8>>,
    },
    Timer {
        node: NodeId,
        generation: u64,
    },
    Action(Action),
    Inject {
        to: NodeId,
        bytes: Arc<Vec<u8>>,
    },
}

struct Slot {
    node: Node,
    incarnation: u32,
    timer_generation: u64,
}

pub struct Simulation {
    config: SimConfig,
    node_config: NodeConfig,
    params: Arc<GroupParams>,
    ring: Arc<KeyRing>,
    rng: ChaCha8Rng,
    queue: BTreeMap<(Time, u64), Pending>,
    sequence: u64,
    now: Time,
    step: u64,
    next_msg: MessageId,
    nodes: BTreeMap<NodeId, Slot>,
    incarnations: BTreeMap<NodeId, u32>,
    partition: Vec<BTreeSet<NodeId>>,
    transcript: Transcript,
    metrics: Metrics,
    secrets: Vec<DrawnSecret>,
    agreement: Option<Option<Agreement>>,
}

fn node_seed(seed: u64, id: NodeId, incarnation: u32) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((u64::from(id) << 32) | u64::from(incarnation));
    rng.next_u64()
}

/// Runs a whole simulation.
pub fn run(config: SimConfig, node_config: NodeConfig, params: Arc<GroupParams>) -> Result<SimOutcome, SimError> {
    let mut sim = Simulation::new(config, node_config, params)?;
    sim.run_to_end()?;
    Ok(sim.finish())
}

impl Simulation {
    pub fn new(config: SimConfig, node_config: NodeConfig, params: Arc<GroupParams>) -> Result<Self, SimError> {
        config.validate()?;
        node_config.validate()?;
        let ring = Arc::new(KeyRing::provision(config.participants(), config.seed));
        let mut sim = Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            node_config,
            params,
            ring,
            queue: BTreeMap::new(),
            sequence: 0,
            now: Time::ZERO,
            step: 0,
            next_msg: 0,
            nodes: BTreeMap::new(),
            incarnations: BTreeMap::new(),
            partition: Vec::new(),
            transcript: Transcript::default(),
            metrics: Metrics::default(),
            secrets: Vec::new(),
            agreement: None,
        };
        for id in 1..=sim.config.node_count {
            sim.start_node(id)?;
        }
        for a in sim.config.schedule.clone() {
            sim.schedule(a.at, Pending::Action(a.action));
        }
        for inj in sim.config.injections.clone() {
            sim.schedule(
                inj.at,
                Pending::Inject {
                    to: inj.to,
                    bytes: Arc::new(inj.bytes),
                },
            );
        }
        sim.observe_agreement();
        Ok(sim)
    }

    pub fn params(&self) -> &Arc<GroupParams> {
        &self.params
    }

    pub fn keyring(&self) -> &Arc<KeyRing> {
        &self.ring
    }

    pub fn now(&self) -> Time {
        self.now
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id).map(|s| &s.node)
    }

    pub fn live_nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values().map(|s| &s.node)
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    fn schedule(&mut self, at: Time, p: Pending) {
        self.queue.insert((at, self.sequence), p);
        self.sequence += 1;
    }

    fn record(&mut self, node: NodeId, kind: EventKind) {
        self.transcript.push(TranscriptEvent {
            at: self.now,
            step: self.step,
            node,
            kind,
        });
    }

    fn start_node(&mut self, id: NodeId) -> Result<(), SimError> {
        if self.nodes.contains_key(&id) {
            return Err(SimError::AlreadyRunning(id));
        }
        let incarnation = self.incarnations.get(&id).map_or(0, |i| i + 1);
        self.incarnations.insert(id, incarnation);
        let mut node = Node::new(
            id,
            self.node_config.clone(),
            Arc::clone(&self.params),
            self.ring.clone(),
            node_seed(self.config.seed, id, incarnation),
            self.now,
        )?;
        node.set_skip_verification(self.config.unverified.contains(&id));
        self.nodes.insert(
            id,
            Slot {
                node,
                incarnation,
                timer_generation: u64::MAX,
            },
        );
        self.metrics.node(id);
        self.record(id, EventKind::Join { incarnation });
        self.rearm(id);
        Ok(())
    }

    /// Generations come from the global event sequence so that timers left behind by an
    /// earlier incarnation can never match.
    fn rearm(&mut self, id: NodeId) {
        let generation = self.sequence;
        let Some(slot) = self.nodes.get_mut(&id) else {
            return;
        };
        slot.timer_generation = generation;
        match slot.node.next_deadline() {
            Some(at) => {
                let at = at.max(self.now);
                self.schedule(at, Pending::Timer { node: id, generation });
            }
            None => self.sequence += 1,
        }
    }

    fn side_of(&self, id: NodeId) -> usize {
        self.partition
            .iter()
            .position(|s| s.contains(&id))
            .unwrap_or(self.partition.len())
    }

    fn latency(&mut self) -> Duration {
        let lo = duration_micros(self.config.latency_min);
        let hi = duration_micros(self.config.latency_max);
        Duration::from_micros(self.rng.gen_range(lo..=hi))
    }

    fn transmit(&mut self, from: NodeId, msg: MessageId, to: NodeId, bytes: &Arc<Vec<u8>>) {
        self.metrics.fates.entry(msg).or_default().targets += 1;
        if self.side_of(from) != self.side_of(to) {
            self.metrics.fates.entry(msg).or_default().suppressed += 1;
            self.metrics.suppressed += 1;
            self.record(to, EventKind::Suppress { msg });
            return;
        }
        if !self.nodes.contains_key(&to) {
            self.metrics.fates.entry(msg).or_default().dropped += 1;
            self.metrics.drops_dead += 1;
            self.record(
                to,
                EventKind::Drop {
                    msg,
                    reason: DropReason::Dead,
                },
            );
            return;
        }
        if self.config.loss > 0.0 && self.rng.gen_bool(self.config.loss) {
            self.metrics.fates.entry(msg).or_default().dropped += 1;
            self.metrics.drops_loss += 1;
            self.record(
                to,
                EventKind::Drop {
                    msg,
                    reason: DropReason::Loss,
                },
            );
            return;
        }
        let at = self.now + self.latency();
        self.schedule(
            at,
            Pending::Deliver {
                msg,
                to,
                bytes: Arc::clone(bytes),
            },
        );
    }

    /// Records a node step's output, sends its messages and rearms its timer.
    fn apply(&mut self, id: NodeId, out: FsmOutput, trigger: Option<MessageId>) {
        if out.exps > 0 {
            self.record(id, EventKind::Exp { count: out.exps });
            self.metrics.node(id).exps += out.exps;
        }
        if let Some((from, to)) = out.mode_change {
            self.record(id, EventKind::Mode { from, to });
        }
        for &excluded in &out.degenerate {
            self.record(id, EventKind::Degenerate { excluded });
        }
        self.secrets.extend(out.drawn);
        let mut announced = None;
        for o in out.outgoing {
            let msg = self.next_msg;
            self.next_msg += 1;
            let bytes = Arc::new(o.bytes);
            self.record(
                id,
                EventKind::Send {
                    msg,
                    kind: o.message.kind,
                    to: o.destination,
                    epoch: o.message.epoch,
                    entries: o.message.entries.len(),
                    bytes: Arc::clone(&bytes),
                },
            );
            self.metrics.messages += 1;
            let nm = self.metrics.node(id);
            *nm.sent_by_kind.entry(o.message.kind).or_default() += 1;
            self.metrics.fates.entry(msg).or_default();
            if o.message.kind.is_group_announcement() {
                announced = Some(msg);
            }
            match o.destination {
                Destination::Broadcast => {
                    self.metrics.broadcasts += 1;
                    self.metrics.node(id).broadcasts += 1;
                    let targets: Vec<NodeId> = self.nodes.keys().copied().filter(|&t| t != id).collect();
                    for to in targets {
                        self.transmit(id, msg, to, &bytes);
                    }
                }
                Destination::Unicast(to) => {
                    self.metrics.node(id).unicasts += 1;
                    self.transmit(id, msg, to, &bytes);
                }
            }
        }
        if let Some(k) = out.key_change {
            self.metrics.node(id).key_changes += 1;
            self.metrics.key_changes.push((self.now, id, k.epoch));
            self.record(
                id,
                EventKind::Key {
                    epoch: k.epoch,
                    leader: k.leader,
                    group_key: k.group_key,
                    derived: k.derived,
                    via: announced.or(trigger),
                },
            );
        }
        if out.stop {
            self.nodes.remove(&id);
        } else {
            self.rearm(id);
        }
    }

    fn deliver(&mut self, msg: MessageId, to: NodeId, bytes: Arc<Vec<u8>>) {
        if !self.nodes.contains_key(&to) {
            self.metrics.fates.entry(msg).or_default().dropped += 1;
            self.metrics.drops_dead += 1;
            self.record(
                to,
                EventKind::Drop {
                    msg,
                    reason: DropReason::Dead,
                },
            );
            return;
        }
        self.metrics.fates.entry(msg).or_default().delivered += 1;
        self.metrics.deliveries += 1;
        let from = SignedParts::split(&bytes, &self.params).map_or(0, |p| p.sender);
        let auth_ok = verify_bytes(&bytes, self.ring.as_ref(), &self.params);
        let slot = self.nodes.get_mut(&to).expect("checked above");
        let out = slot.node.on_event(Event::Message(bytes.to_vec()), self.now);
        let nm = self.metrics.node(to);
        nm.received += 1;
        if matches!(out.disposition, crate::fsm::Disposition::Rejected(_)) {
            nm.rejected += 1;
        }
        self.record(
            to,
            EventKind::Deliver {
                msg,
                from,
                auth_ok,
                disposition: out.disposition,
            },
        );
        self.apply(to, out, Some(msg));
    }

    fn act(&mut self, action: Action) -> Result<(), SimError> {
        match action {
            Action::Join(id) => self.start_node(id),
            Action::Leave { id, graceful } => {
                if !self.nodes.contains_key(&id) {
                    return Err(SimError::UnknownNode(id));
                }
                self.record(id, EventKind::Leave { graceful });
                if graceful {
                    let slot = self.nodes.get_mut(&id).expect("checked above");
                    let out = slot.node.on_event(Event::LeaveRequest, self.now);
                    self.apply(id, out, None);
                }
                self.nodes.remove(&id);
                Ok(())
            }
            Action::Partition(sides) => {
                let mut seen = BTreeSet::new();
                for &id in sides.iter().flatten() {
                    if !seen.insert(id) {
                        return Err(SimError::Overlap(id));
                    }
                }
                if seen.is_empty() {
                    return Ok(());
                }
                self.record(0, EventKind::Partition { sides: sides.clone() });
                self.partition = sides.into_iter().map(|s| s.into_iter().collect()).collect();
                Ok(())
            }
            Action::Heal => {
                self.record(0, EventKind::Heal);
                self.partition.clear();
                Ok(())
            }
        }
    }

    fn observe_agreement(&mut self) {
        let state = self.current_agreement();
        if self.agreement != Some(state) {
            self.agreement = Some(state);
            self.metrics.convergence.push((self.now, state));
        }
    }

    fn current_agreement(&self) -> Option<Agreement> {
        let mut leaders = self.nodes.values().filter(|s| s.node.mode() == Mode::Leader);
        let leader = leaders.next()?;
        if leaders.next().is_some() {
            return None;
        }
        let lid = leader.node.id();
        let session = leader
            .node
            .session()
            .filter(|_| leader.node.session_leader() == Some(lid));
        if self.nodes.len() == 1 {
            return Some(Agreement {
                leader: lid,
                epoch: session.map(|s| s.epoch),
                derived: session.map(|s| s.derived),
            });
        }
        let session = session?;
        let all_same = self.nodes.values().all(|s| {
            s.node.session_leader() == Some(lid) && s.node.session().is_some_and(|k| k.derived == session.derived)
        });
        all_same.then_some(Agreement {
            leader: lid,
            epoch: Some(session.epoch),
            derived: Some(session.derived),
        })
    }

    /// Processes one queued event. Returns false once the queue is exhausted or the
    /// budget is spent.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let end = Time::from_duration(self.config.duration);
        let Some((&(at, _), _)) = self.queue.first_key_value() else {
            return Ok(false);
        };
        if at > end {
            return Ok(false);
        }
        let (_, pending) = self.queue.pop_first().expect("non-empty queue");
        self.now = at;
        self.step += 1;
        match pending {
            Pending::Deliver { msg, to, bytes } => self.deliver(msg, to, bytes),
            Pending::Timer { node, generation } => {
                let Some(slot) = self.nodes.get_mut(&node) else {
                    return Ok(true);
                };
                if slot.timer_generation != generation {
                    return Ok(true);
                }
                let out = slot.node.on_event(Event::Timer, at);
                if !out.is_quiet() || out.exps > 0 {
                    self.record(node, EventKind::Timer);
                }
                self.apply(node, out, None);
            }
            Pending::Action(action) => self.act(action)?,
            Pending::Inject { to, bytes } => {
                let msg = self.next_msg;
                self.next_msg += 1;
                self.record(
                    to,
                    EventKind::Inject {
                        msg,
                        bytes: Arc::clone(&bytes),
                    },
                );
                let fate = self.metrics.fates.entry(msg).or_default();
                fate.targets += 1;
                self.deliver(msg, to, bytes);
            }
        }
        self.observe_agreement();
        Ok(true)
    }

    pub fn run_until(&mut self, t: Time) -> Result<(), SimError> {
        while self.queue.first_key_value().is_some_and(|(&(at, _), _)| at <= t) {
            if !self.step()? {
                break;
            }
        }
        Ok(())
    }

    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        while self.step()? {}
        self.now = Time::from_duration(self.config.duration).max(self.now);
        Ok(())
    }

    pub fn incarnation(&self, id: NodeId) -> Option<u32> {
        self.nodes.get(&id).map(|s| s.incarnation)
    }

    pub fn finish(mut self) -> SimOutcome {
        for pending in self.queue.values() {
            if let Pending::Deliver { msg, .. } = pending {
                self.metrics.fates.entry(*msg).or_default().in_flight += 1;
                self.metrics.in_flight += 1;
            }
        }
        SimOutcome {
            final_nodes: self.nodes.iter().map(|(&id, s)| (id, s.node.snapshot())).collect(),
            transcript: self.transcript,
            metrics: self.metrics,
            secrets: self.secrets,
        }
    }
}
