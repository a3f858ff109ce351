//! Deterministic discrete-event transport.
//!
//! Messages and timers are delivered in `(tick, sequence)` order. Delays and
//! drops come from one seeded generator, so a run is a pure function of its
//! inputs. Every delivery and drop is folded into a running trace digest.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};

use crate::hash::Digest;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Addr {
    Client(u32),
    Miner(u32),
}

impl fmt::Display for Addr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Addr::Client(i) => write!(f, "c{i}"),
            Addr::Miner(i) => write!(f, "m{i}"),
        }
    }
}

/// Short description of a message for the trace.
pub trait Traced {
    fn label(&self) -> String;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Inclusive bounds on per-message delay, in ticks.
    pub delay_min: u64,
    pub delay_max: u64,
    /// Probability that a message sent by a Byzantine actor is dropped.
    #[serde(default)]
    pub byzantine_drop_rate: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { delay_min: 1, delay_max: 3, byzantine_drop_rate: 0.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload<M> {
    Message(M),
    Timer(u64),
}

#[derive(Clone, Debug)]
pub struct Event<M> {
    pub tick: u64,
    pub seq: u64,
    pub from: Addr,
    pub to: Addr,
    pub payload: Payload<M>,
}

struct Queued<M>(Event<M>);

impl<M> PartialEq for Queued<M> {
    fn eq(&self, other: &Self) -> bool {
        (self.0.tick, self.0.seq) == (other.0.tick, other.0.seq)
    }
}

impl<M> Eq for Queued<M> {}

impl<M> PartialOrd for Queued<M> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<M> Ord for Queued<M> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.0.tick, self.0.seq).cmp(&(other.0.tick, other.0.seq))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct NetStats {
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub timers_set: u64,
    pub timers_fired: u64,
}

pub struct Network<M> {
    cfg: NetConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Queued<M>>>,
    rng: ChaCha8Rng,
    byzantine: BTreeSet<Addr>,
    stats: NetStats,
    trace: Sha256,
    log: Option<Vec<String>>,
}

impl<M: Traced> Network<M> {
    pub fn new(cfg: NetConfig, seed: u64) -> Self {
        assert!(cfg.delay_min <= cfg.delay_max, "delay bounds");
        Self {
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            byzantine: BTreeSet::new(),
            stats: NetStats::default(),
            trace: Sha256::new(),
            log: None,
        }
    }

    /// Keeps every trace line in memory as well as hashing it.
    pub fn keep_log(&mut self) {
        self.log.get_or_insert_with(Vec::new);
    }

    pub fn mark_byzantine(&mut self, a: Addr) {
        self.byzantine.insert(a);
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        self.stats
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    /// Adds a line for an event that is not a message, such as a commit.
    pub fn note(&mut self, what: &str) {
        let line = format!("{} note {what}", self.now);
        self.record(line);
    }

    fn record(&mut self, line: String) {
        self.trace.update(line.as_bytes());
        self.trace.update(b"\n");
        if let Some(log) = &mut self.log {
            log.push(line);
        }
    }

    fn push(&mut self, tick: u64, from: Addr, to: Addr, payload: Payload<M>) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Queued(Event { tick, seq, from, to, payload })));
    }

    /// Sends with a delay drawn from the configured range.
    pub fn send(&mut self, from: Addr, to: Addr, msg: M) {
        let d = self.rng.random_range(self.cfg.delay_min..=self.cfg.delay_max);
        self.send_after(from, to, msg, d);
    }

    pub fn send_after(&mut self, from: Addr, to: Addr, msg: M, delay: u64) {
        self.stats.sent += 1;
        let drop_rate = self.cfg.byzantine_drop_rate;
        if drop_rate > 0.0 && self.byzantine.contains(&from) && self.rng.random_bool(drop_rate.min(1.0)) {
            self.stats.dropped += 1;
            let line = format!("{} drop {from}->{to} {}", self.now, msg.label());
            self.record(line);
            return;
        }
        self.push(self.now + delay, from, to, Payload::Message(msg));
    }

    pub fn set_timer(&mut self, owner: Addr, delay: u64, token: u64) {
        self.stats.timers_set += 1;
        self.push(self.now + delay, owner, owner, Payload::Timer(token));
    }

    /// Pops the next event and advances the clock to it.
    pub fn next_event(&mut self) -> Option<Event<M>> {
        let Reverse(Queued(ev)) = self.queue.pop()?;
        self.now = ev.tick;
        let line = match &ev.payload {
            Payload::Message(m) => {
                self.stats.delivered += 1;
                format!("{} {}->{} {}", ev.tick, ev.from, ev.to, m.label())
            }
            Payload::Timer(t) => {
                self.stats.timers_fired += 1;
                format!("{} timer {} {t}", ev.tick, ev.to)
            }
        };
        self.record(line);
        Some(ev)
    }

    /// Messages (not timers) still queued.
    pub fn pending_messages(&self) -> u64 {
        self.queue.iter().filter(|q| matches!(q.0 .0.payload, Payload::Message(_))).count() as u64
    }

    pub fn is_idle(&self) -> bool {
        self.queue.is_empty()
    }

    /// Every sent message was delivered, dropped by policy, or is still queued.
    pub fn conserved(&self) -> bool {
        self.stats.sent == self.stats.delivered + self.stats.dropped + self.pending_messages()
    }

    pub fn trace_digest(&self) -> Digest {
        Digest(self.trace.clone().finalize().into())
    }

    pub fn trace_log(&self) -> Option<&[String]> {
        self.log.as_deref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone)]
    struct Ping(u32);

    impl Traced for Ping {
        fn label(&self) -> String {
            format!("ping {}", self.0)
        }
    }

    fn run(seed: u64) -> (Digest, Vec<(u64, u32)>) {
        let mut net = Network::new(NetConfig { delay_min: 0, delay_max: 5, byzantine_drop_rate: 0.5 }, seed);
        net.mark_byzantine(Addr::Miner(2));
        for i in 0..30 {
            net.send(Addr::Miner(i % 3), Addr::Client(0), Ping(i));
        }
        net.set_timer(Addr::Client(0), 2, 7);
        let mut order = Vec::new();
        while let Some(ev) = net.next_event() {
            if let Payload::Message(Ping(i)) = ev.payload {
                order.push((ev.tick, i));
            }
        }
        assert!(net.conserved());
        (net.trace_digest(), order)
    }

    #[test]
    fn same_seed_same_trace() {
        assert_eq!(run(4), run(4));
        assert_ne!(run(4).0, run(5).0);
    }

    #[test]
    fn delivery_is_ordered_by_tick_then_send_order() {
        let (_, order) = run(9);
        for w in order.windows(2) {
            assert!(w[0].0 < w[1].0 || (w[0].0 == w[1].0 && w[0].1 < w[1].1));
        }
    }

    #[test]
    fn conservation_with_pending_messages() {
        let mut net = Network::new(NetConfig::default(), 1);
        for i in 0..5 {
            net.send(Addr::Client(0), Addr::Miner(0), Ping(i));
        }
        net.next_event();
        assert_eq!(net.pending_messages(), 4);
        assert!(net.conserved());
        assert_eq!(net.stats().dropped, 0);
    }
}
