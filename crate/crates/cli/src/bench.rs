//! Wall-clock numbers for blindings and for the leader's work after the last contribution.
//! Reported, never asserted.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use agdh::gka::{self, Contribution, LeaderBatch, Nonce};
use agdh::messages::{self, GroupEntry};
use agdh::{ExpCounter, GroupParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::BenchArgs;

fn blindings_per_sec(params: &GroupParams, iterations: u32, rng: &mut ChaCha8Rng) -> f64 {
    let secrets: Vec<_> = (0..iterations).map(|_| params.random_scalar(rng)).collect();
    let mut ctr = ExpCounter::new();
    let start = Instant::now();
    for s in &secrets {
        let _ = gka::blind(s, params, &mut ctr);
    }
    f64::from(iterations) / start.elapsed().as_secs_f64().max(1e-9)
}

fn contributions(params: &GroupParams, m: usize, rng: &mut ChaCha8Rng) -> Vec<Contribution> {
    let mut ctr = ExpCounter::new();
    (0..m)
        .map(|i| Contribution {
            participant: i as u32 + 2,
            nonce: Nonce::random(rng),
            blinded_secret: gka::blind(&params.random_scalar(rng), params, &mut ctr).expect("nonzero"),
        })
        .collect()
}

fn encode_igroup(params: &GroupParams, entries: Vec<GroupEntry>) -> usize {
    messages::build_igroup(1, Nonce([0; 16]), 1, entries)
        .expect("well-formed")
        .encode(params)
        .len()
}

fn entries(cs: &[Contribution], responses: &[gka::BlindedResponse]) -> Vec<GroupEntry> {
    cs.iter()
        .zip(responses)
        .map(|(c, r)| GroupEntry {
            blinded_response: Some(r.response.clone()),
            ..GroupEntry::request(c)
        })
        .collect()
}

struct Critical {
    exps: u64,
    elapsed: Duration,
}

/// Everything but the last contribution absorbed ahead of time.
fn batched(params: &GroupParams, cs: &[Contribution], rng: &mut ChaCha8Rng) -> (Critical, u64) {
    let mut ctr = ExpCounter::new();
    let mut batch = LeaderBatch::new(params.random_scalar(rng), params, &mut ctr).expect("nonzero");
    let (last, early) = cs.split_last().expect("at least one contribution");
    for c in early {
        batch.absorb(c.clone(), params, &mut ctr).expect("valid contribution");
    }
    let before = ctr.count();
    let start = Instant::now();
    batch
        .absorb(last.clone(), params, &mut ctr)
        .expect("valid contribution");
    let at_finalize = ctr.count();
    let (_, responses) = batch.finalize(params).expect("nondegenerate");
    encode_igroup(params, entries(cs, &responses));
    let elapsed = start.elapsed();
    (
        Critical {
            exps: ctr.count() - before,
            elapsed,
        },
        ctr.count() - at_finalize,
    )
}

/// Nothing done until the last contribution is in.
fn unbatched(params: &GroupParams, cs: &[Contribution], rng: &mut ChaCha8Rng) -> Critical {
    let mut ctr = ExpCounter::new();
    let secret = params.random_scalar(rng);
    let start = Instant::now();
    let (_, responses) = gka::compute_key_leader(&secret, cs, params, &mut ctr).expect("nondegenerate");
    encode_igroup(params, entries(cs, &responses));
    Critical {
        exps: ctr.count(),
        elapsed: start.elapsed(),
    }
}

pub fn run(args: &BenchArgs) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut s = String::new();
    for params in [GroupParams::toy(), GroupParams::modp_1024_160()] {
        let rate = blindings_per_sec(&params, args.iterations, &mut rng);
        let _ = writeln!(s, "blindings group={} per_sec={rate:.0}", params.name());
    }
    let params = GroupParams::modp_1024_160();
    let m = args.members.max(1);
    let cs = contributions(&params, m, &mut rng);
    let (b, finalize_exps) = batched(&params, &cs, &mut rng);
    let u = unbatched(&params, &cs, &mut rng);
    let _ = writeln!(
        s,
        "leader batched m={m} exps_after_last={} exps_at_finalize={finalize_exps} latency_us={}",
        b.exps,
        b.elapsed.as_micros()
    );
    let _ = writeln!(
        s,
        "leader unbatched m={m} exps_after_last={} latency_us={}",
        u.exps,
        u.elapsed.as_micros()
    );
    s
}
