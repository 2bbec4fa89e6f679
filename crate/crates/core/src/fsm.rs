//! Per-node protocol state machine: member, candidate and leader modes, periodic
//! beacons and replies, randomized election, departure detection, merge handling and
//! contribution renewal.
//!
//! A [`Node`] is owned by whoever drives it. Every input arrives through
//! [`Node::on_event`] together with the current simulated time; the node never reads a
//! clock and reports the next instant it wants to be woken at via
//! [`Node::next_deadline`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gka::{self, Contribution, GkaError, LeaderBatch, NodeId, Nonce, SessionKey};
use crate::group::{ExpCounter, GroupElement, GroupParams, Scalar};
use crate::messages::{self, GroupEntry, Message, MessageKind, SignatureScheme};
use crate::time::{duration_micros, Time};

/// Older contributions a member keeps around so that an announcement still carrying one
/// of them can be used.
const RETAINED_CONTRIBUTIONS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeConfig {
    /// Beacon period `T`.
    pub period: Duration,
    /// Contribution renewal period `P`.
    pub renew_period: Duration,
    /// Missed beacons `k` before a leader or member is presumed gone.
    pub miss_k: u32,
    /// Election backoff window `l`, in slots.
    pub backoff_window: u32,
    /// Election slot `t_rtd`.
    pub slot: Duration,
    pub jitter_max: Duration,
    /// Rekey as soon as a new contribution arrives instead of at the next beacon.
    pub eager_rekey: bool,
}

impl Default for NodeConfig {
    fn default() -> Self {
        Self {
            period: Duration::from_secs(5),
            renew_period: Duration::from_secs(20 * 60),
            miss_k: 3,
            backoff_window: 20,
            slot: Duration::from_millis(100),
            jitter_max: Duration::from_millis(500),
            eager_rekey: false,
        }
    }
}

impl NodeConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.miss_k < 2 {
            return Err(ConfigError(format!("miss_k must be at least 2, got {}", self.miss_k)));
        }
        if self.backoff_window == 0 {
            return Err(ConfigError("backoff window must be positive".into()));
        }
        for (name, d) in [
            ("period", self.period),
            ("renew_period", self.renew_period),
            ("slot", self.slot),
        ] {
            if d.is_zero() {
                return Err(ConfigError(format!("{name} must be positive")));
            }
        }
        if self.renew_period < self.period * 10 {
            return Err(ConfigError("renew_period must be at least ten beacon periods".into()));
        }
        Ok(())
    }

    /// `k·T`.
    pub fn silence_threshold(&self) -> Duration {
        self.period * self.miss_k
    }

    /// Longest possible election backoff, `l·t_rtd`.
    pub fn max_backoff(&self) -> Duration {
        self.slot * self.backoff_window
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Member,
    Candidate,
    Leader,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Member => "member",
            Mode::Candidate => "candidate",
            Mode::Leader => "leader",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Message(Vec<u8>),
    Timer,
    LeaveRequest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Destination {
    Broadcast,
    Unicast(NodeId),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outgoing {
    pub destination: Destination,
    pub message: Message,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    Malformed,
    BadSignature,
    Shape,
    StaleEpoch,
    WrongNonce,
    Tombstoned,
}

impl fmt::Display for RejectReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RejectReason::Malformed => "malformed",
            RejectReason::BadSignature => "bad-signature",
            RejectReason::Shape => "shape",
            RejectReason::StaleEpoch => "stale-epoch",
            RejectReason::WrongNonce => "wrong-nonce",
            RejectReason::Tombstoned => "tombstoned",
        })
    }
}

/// What became of an incoming message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Disposition {
    #[default]
    None,
    Accepted,
    /// Authentic and well formed but of no use in the current state.
    Ignored,
    Rejected(RejectReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecretRole {
    Leader,
    Member,
}

/// Every scalar a node draws, kept so that tests can recompute keys independently.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrawnSecret {
    pub node: NodeId,
    pub role: SecretRole,
    pub secret: Scalar,
    pub blinded: GroupElement,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyChange {
    pub old_epoch: Option<u64>,
    pub epoch: u64,
    pub leader: NodeId,
    pub group_key: GroupElement,
    pub derived: [u8; 32],
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FsmOutput {
    pub outgoing: Vec<Outgoing>,
    pub key_change: Option<KeyChange>,
    pub mode_change: Option<(Mode, Mode)>,
    pub disposition: Disposition,
    /// Exponentiations performed during this step.
    pub exps: u64,
    pub drawn: Vec<DrawnSecret>,
    /// Participants excluded because their contribution made the key degenerate.
    pub degenerate: Vec<NodeId>,
    /// Own entry in an announcement did not match any retained contribution.
    pub echo_mismatch: bool,
    pub stop: bool,
}

impl FsmOutput {
    /// Whether the step had any externally visible effect.
    pub fn is_quiet(&self) -> bool {
        self.outgoing.is_empty()
            && self.key_change.is_none()
            && self.mode_change.is_none()
            && self.degenerate.is_empty()
            && !self.stop
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct Timers {
    silence: Option<Time>,
    reply: Option<Time>,
    beacon: Option<Time>,
    backoff: Option<Time>,
    renewal: Option<Time>,
}

impl Timers {
    fn next(&self) -> Option<Time> {
        [self.silence, self.reply, self.beacon, self.backoff, self.renewal]
            .into_iter()
            .flatten()
            .min()
    }
}

#[derive(Debug, Clone, Default)]
struct MemberState {
    leader: Option<(NodeId, Nonce)>,
    /// Oldest first.
    contributions: VecDeque<(Scalar, Contribution)>,
    /// Last epoch whose key we computed, tagged with that leader's tenure.
    synced: Option<(NodeId, Nonce, u64)>,
    replied_epoch: Option<u64>,
    replied_at: Option<Time>,
}

impl MemberState {
    fn synced_epoch(&self) -> Option<u64> {
        match (self.leader, self.synced) {
            (Some(tenure), Some((id, nonce, epoch))) if tenure == (id, nonce) => Some(epoch),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
struct LeaderState {
    nonce: Nonce,
    epoch: u64,
    secret: Option<Scalar>,
    included: BTreeMap<NodeId, Contribution>,
    pending: BTreeMap<NodeId, Contribution>,
    last_heard: BTreeMap<NodeId, Time>,
    next_batch: Option<LeaderBatch>,
    beacon: Option<Outgoing>,
    needs_rebuild: bool,
    blocked: BTreeSet<(NodeId, Vec<u8>)>,
}

/// Comparable summary of a node's logical state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSnapshot {
    pub id: NodeId,
    pub mode: Mode,
    pub leader: Option<NodeId>,
    pub session: Option<SessionKey>,
    pub session_leader: Option<NodeId>,
    pub max_epoch_seen: u64,
    pub view: Vec<NodeId>,
    pub pending: Vec<(NodeId, Nonce)>,
    pub contributions: Vec<Nonce>,
    pub next_deadline: Option<Time>,
    pub rng_position: u128,
    pub exps: u64,
}

pub struct Node {
    id: NodeId,
    config: NodeConfig,
    params: Arc<GroupParams>,
    signer: Arc<dyn SignatureScheme>,
    rng: ChaCha8Rng,
    ctr: ExpCounter,
    skip_verification: bool,
    mode: Mode,
    session: Option<SessionKey>,
    session_leader: Option<NodeId>,
    max_epoch_seen: u64,
    sender_epochs: BTreeMap<NodeId, u64>,
    tombstones: BTreeSet<(NodeId, Nonce)>,
    member: MemberState,
    leader: Option<LeaderState>,
    timers: Timers,
}

impl fmt::Debug for Node {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Node")
            .field("id", &self.id)
            .field("mode", &self.mode)
            .field("leader", &self.leader_id())
            .field("epoch", &self.session.as_ref().map(|s| s.epoch))
            .finish()
    }
}

impl Node {
    /// A fresh node starts as a member without a leader and waits `k·T` for an
    /// announcement before standing for election.
    pub fn new(
        id: NodeId,
        config: NodeConfig,
        params: Arc<GroupParams>,
        signer: Arc<dyn SignatureScheme>,
        rng_seed: u64,
        now: Time,
    ) -> Result<Self, ConfigError> {
        config.validate()?;
        let timers = Timers {
            silence: Some(now + config.silence_threshold()),
            renewal: Some(now + config.renew_period),
            ..Timers::default()
        };
        Ok(Self {
            id,
            config,
            params,
            signer,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
            ctr: ExpCounter::new(),
            skip_verification: false,
            mode: Mode::Member,
            session: None,
            session_leader: None,
            max_epoch_seen: 0,
            sender_epochs: BTreeMap::new(),
            tombstones: BTreeSet::new(),
            member: MemberState::default(),
            leader: None,
            timers,
        })
    }

    /// Test hook: accept messages without checking their signature.
    pub fn set_skip_verification(&mut self, skip: bool) {
        self.skip_verification = skip;
    }

    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn config(&self) -> &NodeConfig {
        &self.config
    }

    pub fn leader_id(&self) -> Option<NodeId> {
        match self.mode {
            Mode::Leader => Some(self.id),
            Mode::Member => self.member.leader.map(|(id, _)| id),
            Mode::Candidate => None,
        }
    }

    pub fn session(&self) -> Option<&SessionKey> {
        self.session.as_ref()
    }

    pub fn session_leader(&self) -> Option<NodeId> {
        self.session_leader
    }

    /// Members folded into the current key, leader excluded. Empty unless leading.
    pub fn view(&self) -> Vec<NodeId> {
        self.leader
            .as_ref()
            .map(|l| l.included.keys().copied().collect())
            .unwrap_or_default()
    }

    pub fn exp_count(&self) -> u64 {
        self.ctr.count()
    }

    pub fn next_deadline(&self) -> Option<Time> {
        self.timers.next()
    }

    pub fn snapshot(&self) -> NodeSnapshot {
        NodeSnapshot {
            id: self.id,
            mode: self.mode,
            leader: self.leader_id(),
            session: self.session.clone(),
            session_leader: self.session_leader,
            max_epoch_seen: self.max_epoch_seen,
            view: self.view(),
            pending: self
                .leader
                .as_ref()
                .map(|l| l.pending.iter().map(|(id, c)| (*id, c.nonce)).collect())
                .unwrap_or_default(),
            contributions: self.member.contributions.iter().map(|(_, c)| c.nonce).collect(),
            next_deadline: self.next_deadline(),
            rng_position: self.rng.get_word_pos(),
            exps: self.ctr.count(),
        }
    }

    pub fn on_event(&mut self, event: Event, now: Time) -> FsmOutput {
        let exps_before = self.ctr.count();
        let mode_before = self.mode;
        let mut out = FsmOutput::default();
        match event {
            Event::Message(bytes) => self.on_message(&bytes, now, &mut out),
            Event::Timer => self.on_timer(now, &mut out),
            Event::LeaveRequest => self.on_leave(&mut out),
        }
        out.exps = self.ctr.count() - exps_before;
        if self.mode != mode_before {
            out.mode_change = Some((mode_before, self.mode));
        }
        out
    }

    fn jitter(&mut self) -> Duration {
        let max = duration_micros(self.config.jitter_max);
        Duration::from_micros(self.rng.gen_range(0..=max))
    }

    fn emit(&self, destination: Destination, message: Message, out: &mut FsmOutput) {
        // Our own key is provisioned with the ring; a node without one simply stays mute.
        if let Ok(message) = messages::sign(message, self.signer.as_ref(), &self.params) {
            let bytes = message.encode(&self.params);
            out.outgoing.push(Outgoing {
                destination,
                message,
                bytes,
            });
        }
    }

    fn set_session(&mut self, key: GroupElement, epoch: u64, leader: NodeId, out: &mut FsmOutput) {
        let Ok(session) = SessionKey::new(key, epoch, &self.params) else {
            return;
        };
        if self.session.as_ref() == Some(&session) && self.session_leader == Some(leader) {
            return;
        }
        out.key_change = Some(KeyChange {
            old_epoch: self.session.as_ref().map(|s| s.epoch),
            epoch,
            leader,
            group_key: session.group_key.clone(),
            derived: session.derived,
        });
        self.session = Some(session);
        self.session_leader = Some(leader);
    }

    fn draw_contribution(&mut self, out: &mut FsmOutput) -> Contribution {
        let secret = self.params.random_scalar(&mut self.rng);
        let nonce = Nonce::random(&mut self.rng);
        let blinded = gka::blind(&secret, &self.params, &mut self.ctr).expect("random scalars are nonzero");
        out.drawn.push(DrawnSecret {
            node: self.id,
            role: SecretRole::Member,
            secret: secret.clone(),
            blinded: blinded.clone(),
        });
        let c = Contribution {
            participant: self.id,
            nonce,
            blinded_secret: blinded,
        };
        self.member.contributions.push_back((secret, c.clone()));
        while self.member.contributions.len() > RETAINED_CONTRIBUTIONS {
            self.member.contributions.pop_front();
        }
        c
    }

    fn latest_contribution(&mut self, out: &mut FsmOutput) -> Contribution {
        match self.member.contributions.back() {
            Some((_, c)) => c.clone(),
            None => self.draw_contribution(out),
        }
    }

    // ---------------------------------------------------------------- messages

    fn on_message(&mut self, bytes: &[u8], now: Time, out: &mut FsmOutput) {
        let Ok(msg) = Message::decode(bytes, &self.params) else {
            out.disposition = Disposition::Rejected(RejectReason::Malformed);
            return;
        };
        if !self.skip_verification && !messages::verify(&msg, self.signer.as_ref(), &self.params) {
            out.disposition = Disposition::Rejected(RejectReason::BadSignature);
            return;
        }
        if msg.validate_shape().is_err() {
            out.disposition = Disposition::Rejected(RejectReason::Shape);
            return;
        }
        if msg.sender == self.id {
            out.disposition = Disposition::Ignored;
            return;
        }
        out.disposition = match msg.kind {
            k if k.is_group_announcement() => self.on_announcement(&msg, now, out),
            MessageKind::IReply => self.on_reply(&msg, true, now, out),
            MessageKind::Join => self.on_reply(&msg, false, now, out),
            MessageKind::Del => self.on_del(&msg, now, out),
            _ => Disposition::Ignored,
        };
    }

    fn on_announcement(&mut self, msg: &Message, now: Time, out: &mut FsmOutput) -> Disposition {
        if self.sender_epochs.get(&msg.sender).is_some_and(|&e| msg.epoch < e) {
            return Disposition::Rejected(RejectReason::StaleEpoch);
        }
        let adopt = match self.mode {
            Mode::Leader | Mode::Candidate => msg.sender < self.id,
            Mode::Member => match self.member.leader {
                None => true,
                Some((l, _)) => msg.sender <= l,
            },
        };
        if !adopt {
            return Disposition::Ignored;
        }
        self.sender_epochs.insert(msg.sender, msg.epoch);
        self.max_epoch_seen = self.max_epoch_seen.max(msg.epoch);

        if self.mode == Mode::Leader {
            // Yield to the smaller id with a contribution it has never seen.
            self.leader = None;
            self.timers.beacon = None;
            self.draw_contribution(out);
        }
        if self.mode != Mode::Member {
            self.mode = Mode::Member;
            self.timers.backoff = None;
        }
        let same_tenure = self.member.leader == Some((msg.sender, msg.sender_nonce));
        if !same_tenure {
            self.member.leader = Some((msg.sender, msg.sender_nonce));
            self.member.replied_epoch = None;
        }
        self.timers.silence = Some(now + self.config.silence_threshold());
        let sent = out.outgoing.len();
        self.member_process(msg, now, out);
        if out.outgoing.len() == sent {
            // Land the next reply mid-period, well clear of the leader's sweep.
            self.timers.reply = Some(now + self.config.period / 2 + self.jitter());
        }
        Disposition::Accepted
    }

    fn member_process(&mut self, msg: &Message, now: Time, out: &mut FsmOutput) {
        let Some(own) = msg.entry(self.id) else {
            match self.member.replied_epoch.max(self.member.synced_epoch()) {
                None => {}
                Some(e) if msg.epoch > e => {
                    if self.member.replied_at.is_some_and(|t| now < t + self.config.slot) {
                        // Built before our reply could have arrived.
                        return;
                    }
                    // Left out of a newer announcement: start over with a fresh contribution.
                    self.draw_contribution(out);
                }
                Some(_) => return,
            }
            self.member.replied_epoch = Some(msg.epoch);
            self.send_reply(now, out);
            return;
        };
        let matched = self
            .member
            .contributions
            .iter()
            .position(|(_, c)| c.nonce == own.nonce && c.blinded_secret == own.blinded_secret);
        let Some(idx) = matched else {
            out.echo_mismatch = true;
            self.member.replied_epoch = Some(msg.epoch);
            self.send_reply(now, out);
            return;
        };
        let tag = (msg.sender, msg.sender_nonce, msg.epoch);
        let current =
            self.session_leader == Some(msg.sender) && self.session.as_ref().is_some_and(|s| s.epoch == msg.epoch);
        if current || self.member.synced == Some(tag) {
            self.member.synced = Some(tag);
            return;
        }
        let response = own.blinded_response.as_ref().expect("shape checked");
        let secret = self.member.contributions[idx].0.clone();
        let Ok(leader_blind) = gka::recover_leader_blind(response, &secret, &self.params, &mut self.ctr) else {
            return;
        };
        let responses: Vec<_> = msg
            .entries
            .iter()
            .map(|e| gka::BlindedResponse {
                participant: e.participant,
                response: e.blinded_response.clone().expect("shape checked"),
            })
            .collect();
        let Ok(key) = gka::compute_key_member(&leader_blind, &responses, &self.params) else {
            return;
        };
        self.member.contributions.drain(..idx);
        self.member.synced = Some(tag);
        self.set_session(key, msg.epoch, msg.sender, out);
    }

    fn send_reply(&mut self, now: Time, out: &mut FsmOutput) {
        let Some((leader, leader_nonce)) = self.member.leader else {
            return;
        };
        let c = self.latest_contribution(out);
        let msg = messages::build_ireply(&c, leader_nonce, self.member.synced_epoch().unwrap_or(0));
        self.emit(Destination::Unicast(leader), msg, out);
        self.member.replied_at = Some(now);
        self.timers.reply = Some(now + self.config.period + self.jitter());
    }

    fn on_reply(&mut self, msg: &Message, echo: bool, now: Time, out: &mut FsmOutput) -> Disposition {
        let Some(ls) = self.leader.as_mut() else {
            return Disposition::Ignored;
        };
        if echo && msg.sender_nonce != ls.nonce {
            return Disposition::Rejected(RejectReason::WrongNonce);
        }
        let c = msg.entries[0].contribution();
        if self.tombstones.contains(&(c.participant, c.nonce)) {
            return Disposition::Rejected(RejectReason::Tombstoned);
        }
        let id = c.participant;
        if let Some(prev) = ls.pending.get(&id) {
            if prev.nonce != c.nonce {
                self.tombstones.insert((id, prev.nonce));
            }
        }
        ls.last_heard.insert(id, now);
        ls.pending.insert(id, c.clone());
        let blocked = ls
            .blocked
            .contains(&(id, self.params.encode_element(&c.blinded_secret)));
        if blocked {
            return Disposition::Accepted;
        }
        // Epoch zero means the sender never held a key under this tenure.
        let arrival = match ls.included.get(&id) {
            None => true,
            Some(inc) => inc != &c && msg.epoch == 0,
        };
        if let (false, true, Some(beacon)) = (arrival, echo && msg.epoch != ls.epoch, &ls.beacon) {
            out.outgoing.push(Outgoing {
                destination: Destination::Unicast(id),
                ..beacon.clone()
            });
        }
        self.preabsorb(c, out);
        if arrival {
            if self.config.eager_rekey {
                self.rebuild(MessageKind::JGroup, now, out);
            } else if let Some(ls) = self.leader.as_mut() {
                ls.needs_rebuild = true;
            }
        }
        Disposition::Accepted
    }

    fn new_batch(&mut self, out: &mut FsmOutput) -> LeaderBatch {
        let previous = self.leader.as_ref().and_then(|l| l.secret.clone());
        let secret = loop {
            let s = self.params.random_scalar(&mut self.rng);
            if Some(&s) != previous.as_ref() {
                break s;
            }
        };
        let batch = LeaderBatch::new(secret.clone(), &self.params, &mut self.ctr).expect("random scalars are nonzero");
        out.drawn.push(DrawnSecret {
            node: self.id,
            role: SecretRole::Leader,
            secret,
            blinded: batch.leader_blind().clone(),
        });
        batch
    }

    fn preabsorb(&mut self, c: Contribution, out: &mut FsmOutput) {
        let mut batch = match self.leader.as_mut().and_then(|l| l.next_batch.take()) {
            Some(b) => b,
            None => self.new_batch(out),
        };
        // Identity contributions never pass the shape check, so refresh cannot fail.
        let _ = batch.refresh(c, &self.params, &mut self.ctr);
        if let Some(ls) = self.leader.as_mut() {
            ls.next_batch = Some(batch);
        }
    }

    fn on_del(&mut self, msg: &Message, now: Time, out: &mut FsmOutput) -> Disposition {
        match self.mode {
            Mode::Leader => {
                let ls = self.leader.as_mut().expect("leader state");
                let id = msg.sender;
                let known = [ls.pending.get(&id), ls.included.get(&id)]
                    .into_iter()
                    .flatten()
                    .any(|c| c.nonce == msg.sender_nonce);
                if !known {
                    return Disposition::Ignored;
                }
                for c in [ls.pending.remove(&id), ls.included.get(&id).cloned()]
                    .into_iter()
                    .flatten()
                {
                    self.tombstones.insert((id, c.nonce));
                }
                ls.last_heard.remove(&id);
                let was_included = ls.included.contains_key(&id);
                if was_included {
                    self.rebuild(MessageKind::DGroup, now, out);
                }
                Disposition::Accepted
            }
            Mode::Member if self.member.leader == Some((msg.sender, msg.sender_nonce)) => {
                self.start_candidacy(now);
                Disposition::Accepted
            }
            _ => Disposition::Ignored,
        }
    }

    // ---------------------------------------------------------------- timers

    fn due(deadline: Option<Time>, now: Time) -> bool {
        deadline.is_some_and(|d| d <= now)
    }

    fn on_timer(&mut self, now: Time, out: &mut FsmOutput) {
        if Self::due(self.timers.renewal, now) {
            self.timers.renewal = Some(now + self.config.renew_period);
            match self.mode {
                Mode::Leader => self.rebuild(MessageKind::IGroup, now, out),
                _ if !self.member.contributions.is_empty() => {
                    self.draw_contribution(out);
                }
                _ => {}
            }
        }
        if self.mode == Mode::Member && Self::due(self.timers.silence, now) {
            self.start_candidacy(now);
        }
        if self.mode == Mode::Candidate && Self::due(self.timers.backoff, now) {
            self.become_leader(now, out);
        }
        if self.mode == Mode::Leader && Self::due(self.timers.beacon, now) {
            self.beacon_tick(now, out);
        }
        if self.mode == Mode::Member && Self::due(self.timers.reply, now) {
            self.send_reply(now, out);
        }
    }

    fn start_candidacy(&mut self, now: Time) {
        self.mode = Mode::Candidate;
        self.member.leader = None;
        self.member.replied_epoch = None;
        self.timers.silence = None;
        self.timers.reply = None;
        let slots = self.rng.gen_range(1..=self.config.backoff_window);
        self.timers.backoff = Some(now + self.config.slot * slots);
    }

    fn become_leader(&mut self, now: Time, out: &mut FsmOutput) {
        self.mode = Mode::Leader;
        self.timers.backoff = None;
        let epoch = self.max_epoch_seen + 1;
        self.max_epoch_seen = epoch;
        let nonce = Nonce::random(&mut self.rng);
        let init = messages::build_init(self.id, nonce, epoch);
        self.emit(Destination::Broadcast, init, out);
        let mut scratch = FsmOutput::default();
        let beacon = messages::build_igroup(self.id, nonce, epoch, Vec::new()).expect("empty announcement");
        self.emit(Destination::Broadcast, beacon, &mut scratch);
        let beacon = scratch.outgoing.pop();
        self.leader = Some(LeaderState {
            nonce,
            epoch,
            secret: None,
            included: BTreeMap::new(),
            pending: BTreeMap::new(),
            last_heard: BTreeMap::new(),
            next_batch: None,
            beacon,
            needs_rebuild: false,
            blocked: BTreeSet::new(),
        });
        self.timers.beacon = Some(now + self.config.period + self.jitter());
    }

    fn beacon_tick(&mut self, now: Time, out: &mut FsmOutput) {
        let threshold = self.config.silence_threshold();
        let ls = self.leader.as_mut().expect("leader state");
        let expired: Vec<NodeId> = ls
            .last_heard
            .iter()
            .filter(|(_, &t)| now.saturating_since(t) > threshold)
            .map(|(&id, _)| id)
            .collect();
        let mut changed = ls.needs_rebuild;
        for id in expired {
            ls.last_heard.remove(&id);
            ls.pending.remove(&id);
            changed |= ls.included.contains_key(&id);
        }
        if changed {
            self.rebuild(MessageKind::IGroup, now, out);
        } else {
            out.outgoing.extend(ls.beacon.clone());
            self.timers.beacon = Some(now + self.config.period + self.jitter());
        }
    }

    /// New leader secret, every live and unblocked pending contribution folded in, new
    /// epoch, announcement broadcast.
    fn rebuild(&mut self, kind: MessageKind, now: Time, out: &mut FsmOutput) {
        let mut batch = match self.leader.as_mut().and_then(|l| l.next_batch.take()) {
            Some(b) => b,
            None => self.new_batch(out),
        };
        let params = Arc::clone(&self.params);
        let ls = self.leader.as_mut().expect("leader state");
        let usable = |ls: &LeaderState, c: &Contribution| {
            !ls.blocked
                .contains(&(c.participant, params.encode_element(&c.blinded_secret)))
        };
        let view: Vec<Contribution> = ls.pending.values().filter(|c| usable(ls, c)).cloned().collect();
        let ids: BTreeSet<NodeId> = view.iter().map(|c| c.participant).collect();
        batch.retain(|id| ids.contains(&id), &params);
        for c in view {
            let _ = batch.refresh(c, &params, &mut self.ctr);
        }
        let (key, responses) = loop {
            match batch.finalize(&params) {
                Ok(done) => break done,
                Err(GkaError::DegenerateKey { culprit: Some(id) }) => {
                    let c = batch.contribution(id).expect("culprit was absorbed").clone();
                    ls.blocked.insert((id, params.encode_element(&c.blinded_secret)));
                    batch.remove(id, &params);
                    out.degenerate.push(id);
                }
                // The leader blind alone is never the identity.
                Err(_) => unreachable!("degenerate key without contributions"),
            }
        };
        ls.epoch = ls.epoch.max(self.max_epoch_seen) + 1;
        self.max_epoch_seen = ls.epoch;
        let entries: Vec<GroupEntry> = responses
            .into_iter()
            .map(|r| {
                let c = batch
                    .contribution(r.participant)
                    .expect("response for absorbed contribution");
                GroupEntry {
                    participant: r.participant,
                    nonce: c.nonce,
                    blinded_secret: c.blinded_secret.clone(),
                    blinded_response: Some(r.response),
                }
            })
            .collect();
        ls.included = entries.iter().map(|e| (e.participant, e.contribution())).collect();
        ls.secret = Some(batch.leader_secret().clone());
        ls.needs_rebuild = false;
        let epoch = ls.epoch;
        let msg = messages::build_group(kind, self.id, ls.nonce, epoch, entries).expect("well-formed announcement");
        let sent = out.outgoing.len();
        self.emit(Destination::Broadcast, msg, out);
        if let Some(ls) = self.leader.as_mut() {
            ls.beacon = out.outgoing.get(sent).cloned();
        }
        self.set_session(key, epoch, self.id, out);
        self.timers.beacon = Some(now + self.config.period + self.jitter());
    }

    fn on_leave(&mut self, out: &mut FsmOutput) {
        match self.mode {
            Mode::Leader => {
                let ls = self.leader.as_ref().expect("leader state");
                let del = messages::build_del(self.id, ls.nonce, ls.epoch);
                self.emit(Destination::Broadcast, del, out);
            }
            Mode::Member => {
                if let (Some((leader, _)), Some((_, c))) = (self.member.leader, self.member.contributions.back()) {
                    let del = messages::build_del(self.id, c.nonce, self.member.synced_epoch().unwrap_or(0));
                    self.emit(Destination::Unicast(leader), del, out);
                }
            }
            Mode::Candidate => {}
        }
        self.timers = Timers::default();
        out.stop = true;
    }
}

#[cfg(test)]
mod tests;
