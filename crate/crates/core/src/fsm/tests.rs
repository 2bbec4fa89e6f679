use super::*;
use crate::messages::KeyRing;

struct Bed {
    params: Arc<GroupParams>,
    ring: Arc<KeyRing>,
}

impl Bed {
    fn new() -> Self {
        Self {
            params: Arc::new(GroupParams::modp_1024_160()),
            ring: Arc::new(KeyRing::provision(1..=20, 99)),
        }
    }

    fn node(&self, id: NodeId) -> Node {
        self.node_with(id, NodeConfig::default())
    }

    fn node_with(&self, id: NodeId, config: NodeConfig) -> Node {
        Node::new(
            id,
            config,
            self.params.clone(),
            self.ring.clone(),
            1000 + u64::from(id),
            Time::ZERO,
        )
        .unwrap()
    }

    /// Fires timers until the node leads; returns the step that made it leader.
    fn elect(&self, n: &mut Node) -> FsmOutput {
        loop {
            let at = n.next_deadline().unwrap();
            let out = n.on_event(Event::Timer, at);
            if n.mode() == Mode::Leader {
                return out;
            }
        }
    }

    fn sign(&self, m: Message) -> Vec<u8> {
        messages::sign(m, self.ring.as_ref(), &self.params)
            .unwrap()
            .encode(&self.params)
    }
}

fn deliver(n: &mut Node, o: &Outgoing, now: Time) -> FsmOutput {
    n.on_event(Event::Message(o.bytes.clone()), now)
}

fn secs(s: u64) -> Time {
    Time::from_micros(s * 1_000_000)
}

fn tick(n: &mut Node) -> (Time, FsmOutput) {
    let at = n.next_deadline().unwrap();
    (at, n.on_event(Event::Timer, at))
}

/// Leader 1 with members 2 and 3 and an established key.
fn established(bed: &Bed) -> (Node, Node, Node, Time) {
    let mut l = bed.node(1);
    let mut a = bed.node(2);
    let mut b = bed.node(3);
    let init = bed.elect(&mut l);
    let now = Time::from_micros(l.next_deadline().unwrap().as_micros() - 1_000_000);
    let ra = deliver(&mut a, &init.outgoing[0], now);
    let rb = deliver(&mut b, &init.outgoing[0], now);
    deliver(&mut l, &ra.outgoing[0], now);
    deliver(&mut l, &rb.outgoing[0], now);
    let (at, built) = tick(&mut l);
    deliver(&mut a, &built.outgoing[0], at);
    deliver(&mut b, &built.outgoing[0], at);
    (l, a, b, at)
}

#[test]
fn config_defaults_and_validation() {
    let c = NodeConfig::default();
    assert_eq!(c.silence_threshold(), Duration::from_secs(15));
    assert_eq!(c.max_backoff(), Duration::from_secs(2));
    assert!(c.validate().is_ok());
    assert!(NodeConfig { miss_k: 1, ..c.clone() }.validate().is_err());
    assert!(NodeConfig {
        period: Duration::ZERO,
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(NodeConfig {
        renew_period: Duration::from_secs(10),
        ..c.clone()
    }
    .validate()
    .is_err());
    assert!(NodeConfig { backoff_window: 0, ..c }.validate().is_err());
}

#[test]
fn silence_leads_to_candidacy_then_leadership() {
    let bed = Bed::new();
    let mut n = bed.node(4);
    assert_eq!(n.next_deadline(), Some(secs(15)));
    let (_, out) = tick(&mut n);
    assert_eq!(out.mode_change, Some((Mode::Member, Mode::Candidate)));
    assert!(out.outgoing.is_empty());
    let backoff = n.next_deadline().unwrap() - secs(15);
    assert!(backoff >= Duration::from_millis(100) && backoff <= Duration::from_secs(2));
    assert_eq!(backoff.as_micros() % 100_000, 0);

    let (_, out) = tick(&mut n);
    assert_eq!(out.mode_change, Some((Mode::Candidate, Mode::Leader)));
    assert_eq!(out.outgoing.len(), 1);
    let init = &out.outgoing[0];
    assert_eq!(init.destination, Destination::Broadcast);
    assert_eq!(init.message.kind, MessageKind::Init);
    assert!(init.message.entries.is_empty());
    assert_eq!(out.exps, 0);
}

#[test]
fn backoff_draws_cover_the_window() {
    let bed = Bed::new();
    let mut seen = BTreeSet::new();
    for id in 1..=20 {
        for round in 0..10u64 {
            let mut n = Node::new(
                id,
                NodeConfig::default(),
                bed.params.clone(),
                bed.ring.clone(),
                u64::from(id) * 100 + round,
                Time::ZERO,
            )
            .unwrap();
            tick(&mut n);
            let slots = (n.next_deadline().unwrap() - secs(15)).as_millis() / 100;
            seen.insert(slots);
        }
    }
    assert_eq!(seen.first(), Some(&1));
    assert_eq!(seen.last(), Some(&20));
}

#[test]
fn lone_leader_beacons_identical_empty_announcements() {
    let bed = Bed::new();
    let mut l = bed.node(1);
    bed.elect(&mut l);
    let (t1, first) = tick(&mut l);
    let (t2, second) = tick(&mut l);
    assert!(t2 - t1 >= Duration::from_secs(5) && t2 - t1 <= Duration::from_millis(5500));
    assert_eq!(first.outgoing[0].message.kind, MessageKind::IGroup);
    assert!(first.outgoing[0].message.entries.is_empty());
    assert_eq!(first.outgoing[0].bytes, second.outgoing[0].bytes);
    assert!(l.session().is_none());
}

#[test]
fn initial_key_agreement_costs() {
    let bed = Bed::new();
    let mut l = bed.node(1);
    let mut a = bed.node(2);
    let mut b = bed.node(3);
    let init = bed.elect(&mut l);
    let now = secs(16);

    let ra = deliver(&mut a, &init.outgoing[0], now);
    assert_eq!(ra.disposition, Disposition::Accepted);
    assert_eq!(ra.exps, 1);
    assert_eq!(ra.outgoing.len(), 1);
    let reply = &ra.outgoing[0];
    assert_eq!(reply.destination, Destination::Unicast(1));
    assert_eq!(reply.message.kind, MessageKind::IReply);
    assert_eq!(reply.message.sender_nonce, init.outgoing[0].message.sender_nonce);
    assert_eq!(a.leader_id(), Some(1));

    let rb = deliver(&mut b, &init.outgoing[0], now);
    let la = deliver(&mut l, &ra.outgoing[0], now);
    assert_eq!(la.exps, 2, "leader blind plus first response");
    assert!(la.outgoing.is_empty(), "inclusion waits for the beacon");
    let lb = deliver(&mut l, &rb.outgoing[0], now);
    assert_eq!(lb.exps, 1);

    let (at, built) = tick(&mut l);
    assert_eq!(built.exps, 0, "batched leader finalizes without exponentiation");
    let ann = &built.outgoing[0];
    assert_eq!(ann.message.kind, MessageKind::IGroup);
    assert_eq!(ann.message.entries.len(), 2);
    let lk = built.key_change.clone().unwrap();
    assert_eq!(lk.leader, 1);

    let ka = deliver(&mut a, ann, at);
    let kb = deliver(&mut b, ann, at);
    assert_eq!(ka.exps, 1);
    assert_eq!(ka.key_change.as_ref().unwrap().derived, lk.derived);
    assert_eq!(kb.key_change.as_ref().unwrap().derived, lk.derived);
    assert!(ka.outgoing.is_empty());

    // Repeat beacon: identical bytes, no work anywhere.
    let (at2, again) = tick(&mut l);
    assert_eq!(again.outgoing[0].bytes, ann.bytes);
    let quiet = deliver(&mut a, &again.outgoing[0], at2);
    assert_eq!(quiet.exps, 0);
    assert!(quiet.is_quiet());
}

#[test]
fn member_replies_periodically() {
    let bed = Bed::new();
    let (_, mut a, _, _) = established(&bed);
    let (t1, r1) = tick(&mut a);
    let (t2, r2) = tick(&mut a);
    assert_eq!(r1.outgoing[0].message.kind, MessageKind::IReply);
    assert_eq!(r1.outgoing[0].message.epoch, a.session().unwrap().epoch);
    assert_eq!(r2.outgoing[0].destination, Destination::Unicast(1));
    assert!(t2 - t1 >= Duration::from_secs(5));
}

#[test]
fn member_without_leader_stays_silent() {
    let bed = Bed::new();
    let mut n = bed.node(5);
    let (_, out) = tick(&mut n);
    assert!(out.outgoing.is_empty());
    assert_eq!(n.mode(), Mode::Candidate);
}

#[test]
fn leader_conflict_smaller_id_survives() {
    let bed = Bed::new();
    let mut l7 = bed.node(7);
    let mut l12 = bed.node(12);
    let i7 = bed.elect(&mut l7);
    let i12 = bed.elect(&mut l12);
    let now = secs(17);

    let ignored = deliver(&mut l7, &i12.outgoing[0], now);
    assert_eq!(ignored.disposition, Disposition::Ignored);
    assert!(ignored.is_quiet());
    assert_eq!(l7.mode(), Mode::Leader);

    let yielded = deliver(&mut l12, &i7.outgoing[0], now);
    assert_eq!(yielded.mode_change, Some((Mode::Leader, Mode::Member)));
    assert_eq!(yielded.exps, 1, "fresh contribution");
    assert_eq!(yielded.outgoing.len(), 1);
    assert_eq!(yielded.outgoing[0].destination, Destination::Unicast(7));
    assert_eq!(l12.leader_id(), Some(7));
}

#[test]
fn member_follows_only_smaller_leaders() {
    let bed = Bed::new();
    let mut l7 = bed.node(7);
    let mut l12 = bed.node(12);
    let i7 = bed.elect(&mut l7);
    let i12 = bed.elect(&mut l12);

    let mut m = bed.node(15);
    deliver(&mut m, &i7.outgoing[0], secs(17));
    let out = deliver(&mut m, &i12.outgoing[0], secs(17));
    assert_eq!(out.disposition, Disposition::Ignored);
    assert!(out.outgoing.is_empty());
    assert_eq!(m.leader_id(), Some(7));

    let mut m2 = bed.node(16);
    deliver(&mut m2, &i12.outgoing[0], secs(17));
    let out = deliver(&mut m2, &i7.outgoing[0], secs(17));
    assert_eq!(out.outgoing.len(), 1);
    assert_eq!(out.outgoing[0].destination, Destination::Unicast(7));
    assert_eq!(m2.leader_id(), Some(7));
}

#[test]
fn candidate_reverts_on_smaller_announcement() {
    let bed = Bed::new();
    let mut l = bed.node(2);
    let init = bed.elect(&mut l);
    let mut c = bed.node(9);
    tick(&mut c);
    assert_eq!(c.mode(), Mode::Candidate);
    let out = deliver(&mut c, &init.outgoing[0], secs(15));
    assert_eq!(out.mode_change, Some((Mode::Candidate, Mode::Member)));
    assert!(out.outgoing.iter().all(|o| o.message.kind == MessageKind::IReply));
    // The backoff is cancelled: the next deadline is the reply timer.
    let (_, next) = tick(&mut c);
    assert_eq!(c.mode(), Mode::Member);
    assert_eq!(next.outgoing[0].message.kind, MessageKind::IReply);
}

#[test]
fn candidate_ignores_larger_announcement() {
    let bed = Bed::new();
    let mut l = bed.node(9);
    let init = bed.elect(&mut l);
    let mut c = bed.node(2);
    tick(&mut c);
    let out = deliver(&mut c, &init.outgoing[0], secs(15));
    assert_eq!(out.disposition, Disposition::Ignored);
    assert_eq!(c.mode(), Mode::Candidate);
    bed.elect(&mut c);
    assert_eq!(c.mode(), Mode::Leader);
}

#[test]
fn rejections_leave_state_untouched() {
    let bed = Bed::new();
    let (mut l, mut a, _, at) = established(&bed);
    let (_, reply) = tick(&mut a);
    let reply = &reply.outgoing[0];

    let mut flipped = reply.bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 1;
    let mut wrong_sender = reply.message.clone();
    wrong_sender.sender = 3;
    wrong_sender.entries[0].participant = 3;
    let wrong_sender = wrong_sender.encode(&bed.params);
    let mut wrong_nonce = reply.message.clone();
    wrong_nonce.sender_nonce = Nonce([0x55; 16]);
    let wrong_nonce = bed.sign(wrong_nonce);

    let cases = [
        (flipped, RejectReason::BadSignature),
        (wrong_sender, RejectReason::BadSignature),
        (wrong_nonce, RejectReason::WrongNonce),
        (vec![0x09, 0, 0], RejectReason::Malformed),
    ];
    for (bytes, reason) in cases {
        let before = l.snapshot();
        let out = l.on_event(Event::Message(bytes), at);
        assert_eq!(out.disposition, Disposition::Rejected(reason));
        assert!(out.is_quiet());
        assert_eq!(out.exps, 0);
        assert_eq!(l.snapshot(), before);
    }
}

#[test]
fn stale_announcement_replay_is_rejected() {
    let bed = Bed::new();
    let (mut l, mut a, _, at) = established(&bed);
    let old = l.leader.as_ref().unwrap().beacon.as_ref().unwrap().bytes.clone();
    l.on_event(Event::Timer, l.timers.renewal.unwrap());
    let fresh = l.leader.as_ref().unwrap().beacon.as_ref().unwrap().bytes.clone();
    let out = a.on_event(Event::Message(fresh), at);
    assert!(out.key_change.is_some());

    let before = a.snapshot();
    let out = a.on_event(Event::Message(old), at);
    assert_eq!(out.disposition, Disposition::Rejected(RejectReason::StaleEpoch));
    assert!(out.is_quiet());
    assert_eq!(a.snapshot(), before);
}

#[test]
fn shape_violation_is_rejected() {
    let bed = Bed::new();
    let (mut l, _, _, at) = established(&bed);
    let bad = Message {
        kind: MessageKind::IReply,
        sender: 2,
        sender_nonce: Nonce::default(),
        epoch: 0,
        entries: vec![],
        signature: vec![],
    };
    let out = l.on_event(Event::Message(bed.sign(bad)), at);
    assert_eq!(out.disposition, Disposition::Rejected(RejectReason::Shape));
}

#[test]
fn skip_verification_hook_accepts_forgeries() {
    let bed = Bed::new();
    let mut l = bed.node(1);
    let init = bed.elect(&mut l);
    let mut forged = init.outgoing[0].message.clone();
    forged.signature = vec![0; 32];
    let bytes = forged.encode(&bed.params);
    let mut m = bed.node(2);
    assert_eq!(
        m.on_event(Event::Message(bytes.clone()), secs(16)).disposition,
        Disposition::Rejected(RejectReason::BadSignature)
    );
    m.set_skip_verification(true);
    assert_eq!(
        m.on_event(Event::Message(bytes), secs(16)).disposition,
        Disposition::Accepted
    );
}

#[test]
fn echo_mismatch_triggers_rejoin_without_key() {
    let bed = Bed::new();
    let (l, mut a, _, at) = established(&bed);
    let mut ann = Message::decode(&l.leader.as_ref().unwrap().beacon.as_ref().unwrap().bytes, &bed.params).unwrap();
    ann.epoch += 1;
    let own = ann.entries.iter_mut().find(|e| e.participant == 2).unwrap();
    own.nonce = Nonce([0xee; 16]);
    let out = a.on_event(Event::Message(bed.sign(ann)), at);
    assert!(out.echo_mismatch);
    assert!(out.key_change.is_none());
    assert_eq!(out.outgoing.len(), 1);
    assert_eq!(out.outgoing[0].message.kind, MessageKind::IReply);
}

#[test]
fn silent_member_expires_with_rekey() {
    let bed = Bed::new();
    let (mut l, _, _, _) = established(&bed);
    let epoch = l.session().unwrap().epoch;
    let key = l.session().unwrap().derived;
    let secret = l.leader.as_ref().unwrap().secret.clone();
    // Neither member replies any more.
    let mut rekey = None;
    for _ in 0..5 {
        let (at, out) = tick(&mut l);
        if let Some(k) = out.key_change {
            rekey = Some((at, k, out.outgoing[0].message.clone()));
            break;
        }
    }
    let (_, k, msg) = rekey.expect("expiry rekey");
    assert_eq!(k.epoch, epoch + 1);
    assert_ne!(k.derived, key);
    assert!(msg.entries.is_empty(), "both expired in one sweep");
    assert_ne!(l.leader.as_ref().unwrap().secret, secret);
    assert!(l.view().is_empty());
}

#[test]
fn del_removes_member_immediately() {
    let bed = Bed::new();
    let (mut l, mut a, mut b, at) = established(&bed);
    let (_, stale_reply) = tick(&mut a);
    let leave = a.on_event(Event::LeaveRequest, at);
    assert!(leave.stop);
    assert_eq!(leave.outgoing[0].message.kind, MessageKind::Del);
    assert_eq!(leave.outgoing[0].destination, Destination::Unicast(1));
    assert_eq!(a.next_deadline(), None);

    let epoch = l.session().unwrap().epoch;
    let out = deliver(&mut l, &leave.outgoing[0], at);
    let ann = &out.outgoing[0];
    assert_eq!(ann.message.kind, MessageKind::DGroup);
    assert_eq!(ann.message.epoch, epoch + 1);
    assert_eq!(l.view(), vec![3]);
    let kb = deliver(&mut b, ann, at);
    assert_eq!(kb.key_change.unwrap().derived, out.key_change.unwrap().derived);

    let replay = deliver(&mut l, &stale_reply.outgoing[0], at);
    assert_eq!(replay.disposition, Disposition::Rejected(RejectReason::Tombstoned));
    assert!(replay.is_quiet());
}

#[test]
fn del_with_unknown_nonce_is_ignored() {
    let bed = Bed::new();
    let (mut l, _, _, at) = established(&bed);
    let del = bed.sign(messages::build_del(2, Nonce([7; 16]), 0));
    let out = l.on_event(Event::Message(del), at);
    assert_eq!(out.disposition, Disposition::Ignored);
    assert_eq!(l.view(), vec![2, 3]);
}

#[test]
fn leader_leave_sends_del_and_members_stand_for_election() {
    let bed = Bed::new();
    let (mut l, mut a, _, at) = established(&bed);
    let out = l.on_event(Event::LeaveRequest, at);
    assert_eq!(out.outgoing[0].destination, Destination::Broadcast);
    let m = deliver(&mut a, &out.outgoing[0], at);
    assert_eq!(m.mode_change, Some((Mode::Member, Mode::Candidate)));
}

#[test]
fn member_renewal_is_deferred_until_leader_renewal() {
    let bed = Bed::new();
    let (mut l, mut a, mut b, at) = established(&bed);
    let key = l.session().unwrap().derived;
    let old_blinded = a.member.contributions.back().unwrap().1.blinded_secret.clone();

    // Member renewal fires before the leader's.
    let t = |s: u64| at + Duration::from_secs(s);
    a.timers.renewal = Some(t(1));
    let out = a.on_event(Event::Timer, t(1));
    assert_eq!(out.drawn.len(), 1);
    assert!(out.key_change.is_none());
    a.timers.reply = Some(t(2));
    let r = a.on_event(Event::Timer, t(2));
    let reply = &r.outgoing[0];
    assert_ne!(reply.message.entries[0].blinded_secret, old_blinded);

    deliver(&mut l, reply, t(2));
    l.timers.beacon = Some(t(2));
    let beacon = l.on_event(Event::Timer, t(2));
    assert!(beacon.key_change.is_none(), "refresh waits for the leader's renewal");
    assert_eq!(l.session().unwrap().derived, key);

    l.timers.renewal = Some(t(3));
    let lr = l.on_event(Event::Timer, t(3));
    let ann = &lr.outgoing[0];
    assert_eq!(
        ann.message.entry(2).unwrap().blinded_secret,
        reply.message.entries[0].blinded_secret
    );
    let lk = lr.key_change.unwrap();
    assert_ne!(lk.derived, key);
    let at = t(3);
    assert_eq!(deliver(&mut a, ann, at).key_change.unwrap().derived, lk.derived);
    assert_eq!(deliver(&mut b, ann, at).key_change.unwrap().derived, lk.derived);
}

#[test]
fn renewal_with_unchanged_membership_changes_key() {
    let bed = Bed::new();
    let (mut l, _, _, _) = established(&bed);
    let before = l.session().cloned().unwrap();
    let secret = l.leader.as_ref().unwrap().secret.clone();
    let out = l.on_event(Event::Timer, l.timers.renewal.unwrap());
    let after = out.key_change.unwrap();
    assert_eq!(after.epoch, before.epoch + 1);
    assert_ne!(after.derived, before.derived);
    assert_ne!(l.leader.as_ref().unwrap().secret, secret);
    assert_eq!(l.view(), vec![2, 3]);
}

#[test]
fn eager_rekey_announces_immediately() {
    let bed = Bed::new();
    let config = NodeConfig {
        eager_rekey: true,
        ..NodeConfig::default()
    };
    let mut l = bed.node_with(1, config);
    let mut a = bed.node(2);
    let init = bed.elect(&mut l);
    let r = deliver(&mut a, &init.outgoing[0], secs(16));
    let out = deliver(&mut l, &r.outgoing[0], secs(16));
    assert_eq!(out.outgoing.len(), 1);
    assert_eq!(out.outgoing[0].message.kind, MessageKind::JGroup);
    let k = deliver(&mut a, &out.outgoing[0], secs(16));
    assert_eq!(k.key_change.unwrap().derived, out.key_change.unwrap().derived);
}

#[test]
fn excluded_member_refreshes_and_rejoins() {
    let bed = Bed::new();
    let (mut l, mut a, _, at) = established(&bed);
    // Leader forgets member 2, as after an expiry, and rebuilds.
    {
        let ls = l.leader.as_mut().unwrap();
        ls.pending.remove(&2);
        ls.last_heard.remove(&2);
    }
    let out = l.on_event(Event::Timer, l.timers.renewal.unwrap());
    let before = a.member.contributions.back().unwrap().1.nonce;
    let r = deliver(&mut a, &out.outgoing[0], at);
    assert_eq!(r.exps, 1, "fresh contribution");
    assert_ne!(r.outgoing[0].message.entries[0].nonce, before);
    deliver(&mut l, &r.outgoing[0], at);
    assert!(l.leader.as_ref().unwrap().needs_rebuild);
}

#[test]
fn degenerate_contribution_is_excluded() {
    // On the toy group a leader secret is found that makes the key the identity.
    let params = Arc::new(GroupParams::toy());
    let ring = Arc::new(KeyRing::provision(1..=3, 5));
    let mut found = false;
    for seed in 0..200u64 {
        let mut l = Node::new(1, NodeConfig::default(), params.clone(), ring.clone(), seed, Time::ZERO).unwrap();
        let mut a = Node::new(
            2,
            NodeConfig::default(),
            params.clone(),
            ring.clone(),
            seed + 7,
            Time::ZERO,
        )
        .unwrap();
        let init = Bed {
            params: params.clone(),
            ring: ring.clone(),
        }
        .elect(&mut l);
        let r = deliver(&mut a, &init.outgoing[0], secs(16));
        deliver(&mut l, &r.outgoing[0], secs(16));
        let (_, out) = tick(&mut l);
        if out.degenerate == vec![2] {
            assert!(out.outgoing[0].message.entries.is_empty());
            let k = out.key_change.unwrap();
            assert!(!k.group_key.is_identity());
            found = true;
            break;
        }
    }
    assert!(found, "no degenerate draw in 200 seeds");
}

#[test]
fn deterministic_given_seed() {
    let bed = Bed::new();
    let run = || {
        let (l, a, b, _) = established(&bed);
        (l.snapshot(), a.snapshot(), b.snapshot())
    };
    assert_eq!(run(), run());
}
