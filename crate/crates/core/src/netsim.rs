//! Deterministic discrete-event network simulator.
//!
//! `W` workers are star-connected to one switch. Every directed link has a
//! base latency, an optional line rate and independent per-transmission
//! drop, duplicate and jitter draws from one seeded RNG. Packets travel as
//! encoded bytes. In the in-switch topology the switch runs the aggregation
//! state machine; in the endhost topology it only forwards, and an extra
//! host behind it runs the same state machine.
//!
//! A [`Driver`] supplies the workload. The simulator keeps a ground-truth
//! record of every partial activation so it can check each delivered full
//! activation and every accepted contribution at the aggregator.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::switch_agg::{Mutation, SwitchState};
use crate::wire::{decode_packet, encode_packet, wire_len};
use crate::worker_proto::{SendOutcome, TimerArm, TimerId, WorkerProto};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultModel {
    pub drop_prob: f64,
    pub dup_prob: f64,
    pub latency_ns: u64,
    pub jitter_ns: u64,
    pub seed: u64,
}

impl Default for FaultModel {
    fn default() -> Self {
        FaultModel { drop_prob: 0.0, dup_prob: 0.0, latency_ns: 500, jitter_ns: 0, seed: 0 }
    }
}

impl FaultModel {
    pub fn lossless(latency_ns: u64) -> Self {
        FaultModel { latency_ns, ..FaultModel::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("drop_prob", self.drop_prob), ("dup_prob", self.dup_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} = {p} is not a probability")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    InSwitch,
    /// Aggregation on a host behind the switch, with a fixed processing delay.
    Endhost { host_proc_ns: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NetConfig {
    pub workers: usize,
    pub slots: usize,
    pub mb: usize,
    pub fault: FaultModel,
    pub switch_proc_ns: u64,
    /// Line rate in Gbit/s (bits per ns); `None` means zero serialization time.
    pub link_gbps: Option<f64>,
    /// Retransmission timeout; defaults to twice the worst-case round trip.
    pub rto_ns: Option<u64>,
    pub horizon_ns: u64,
    pub topology: Topology,
    pub record_trace: bool,
    /// Check every state machine invariant after every event.
    pub paranoid: bool,
    pub mutation: Option<Mutation>,
}

impl NetConfig {
    pub fn new(workers: usize, slots: usize, mb: usize) -> Self {
        NetConfig {
            workers,
            slots,
            mb,
            fault: FaultModel::default(),
            switch_proc_ns: 100,
            link_gbps: None,
            rto_ns: None,
            horizon_ns: u64::MAX,
            topology: Topology::InSwitch,
            record_trace: false,
            paranoid: false,
            mutation: None,
        }
    }

    fn serialization_ns(&self) -> u64 {
        match self.link_gbps {
            Some(gbps) => ((wire_len(self.mb) * 8) as f64 / gbps).ceil() as u64,
            None => 0,
        }
    }

    /// Worst-case request/response time for one aggregation round without loss.
    pub fn worst_round_trip_ns(&self) -> u64 {
        let hop = self.fault.latency_ns + self.fault.jitter_ns + self.serialization_ns();
        match self.topology {
            Topology::InSwitch => 2 * hop + self.switch_proc_ns + self.workers as u64 * self.serialization_ns(),
            Topology::Endhost { host_proc_ns } => {
                4 * hop + 2 * self.switch_proc_ns + host_proc_ns + 2 * self.workers as u64 * self.serialization_ns()
            }
        }
    }

    /// Largest reordering between two packets on the same path.
    pub fn path_jitter_ns(&self) -> u64 {
        match self.topology {
            Topology::InSwitch => self.fault.jitter_ns,
            Topology::Endhost { .. } => 2 * self.fault.jitter_ns,
        }
    }

    /// Worker guard time: strictly more than the path jitter, zero on in-order links.
    pub fn guard_ns(&self) -> u64 {
        match self.path_jitter_ns() {
            0 => 0,
            j => j + 1,
        }
    }

    /// Fastest possible request/response time.
    pub fn min_round_trip_ns(&self) -> u64 {
        match self.topology {
            Topology::InSwitch => 2 * self.fault.latency_ns + self.switch_proc_ns,
            Topology::Endhost { host_proc_ns } => 4 * self.fault.latency_ns + 2 * self.switch_proc_ns + host_proc_ns,
        }
    }

    pub fn rto(&self) -> u64 {
        self.rto_ns.unwrap_or(2 * self.worst_round_trip_ns()).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        self.fault.validate()?;
        if self.mb == 0 {
            return Err(Error::Config("micro-batch must be positive".into()));
        }
        if self.guard_ns() >= self.min_round_trip_ns() {
            return Err(Error::Config(format!(
                "jitter {} ns reorders packets by more than the {} ns minimum round trip",
                self.fault.jitter_ns,
                self.min_round_trip_ns()
            )));
        }
        if let Some(g) = self.link_gbps {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("link rate {g} Gbit/s must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Node {
    Worker(usize),
    Switch,
    Host,
}

impl std::fmt::Display for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Node::Worker(w) => write!(f, "worker{w}"),
            Node::Switch => f.write_str("switch"),
            Node::Host => f.write_str("host"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Send,
    Deliver,
    Drop,
    Duplicate,
    Timeout,
    FaDelivered,
    SlotFreed,
}

impl EventKind {
    fn as_str(self) -> &'static str {
        match self {
            EventKind::Send => "send",
            EventKind::Deliver => "deliver",
            EventKind::Drop => "drop",
            EventKind::Duplicate => "duplicate",
            EventKind::Timeout => "timeout",
            EventKind::FaDelivered => "fa_delivered",
            EventKind::SlotFreed => "slot_freed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TraceEvent {
    pub time_ns: u64,
    pub kind: EventKind,
    pub node: Node,
    pub slot: u16,
    pub detail: String,
}

/// Timing of one aggregation round across all workers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RoundRecord {
    pub slot: u16,
    pub first_send_ns: u64,
    pub last_fa_ns: u64,
    pub fa_count: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Trace {
    pub workers: usize,
    pub events: Vec<TraceEvent>,
    pub rounds: Vec<RoundRecord>,
}

impl Trace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("time_ns,event_kind,node,slot,detail\n");
        for e in &self.events {
            let _ = writeln!(out, "{},{},{},{},{}", e.time_ns, e.kind.as_str(), e.node, e.slot, e.detail);
        }
        out
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct NetStats {
    /// Link transmissions, including forwarding hops and retransmissions.
    pub sent: u64,
    pub bytes: u64,
    /// Packets arriving at their next hop, duplicates included.
    pub delivered: u64,
    pub dropped: u64,
    pub duplicated: u64,
    /// Deliveries overtaken by a later transmission on the same link.
    pub reordered: u64,
    pub retransmissions: u64,
    pub ignored_at_workers: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum Anomaly {
    /// A worker received a full activation different from the true sum.
    FaMismatch { worker: usize, slot: u16, round: u64, time_ns: u64 },
    /// A full activation arrived before every worker sent its contribution.
    PrematureFa { worker: usize, slot: u16, round: u64, time_ns: u64 },
    /// The aggregator accepted contributions from two rounds into one slot.
    MixedRounds { slot: u16, rounds: (u64, u64), time_ns: u64 },
    /// A state machine invariant check failed.
    Invariant { node: Node, message: String, time_ns: u64 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct LatencyStats {
    pub complete: usize,
    pub incomplete: usize,
    pub min_ns: u64,
    pub p50_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

/// Nearest-rank percentile of sorted data.
pub fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Per-round latency from the first worker's send to the last worker's
/// full-activation receipt. Rounds some worker never completed are counted
/// separately and excluded.
pub fn measure_allreduce_latency(trace: &Trace) -> LatencyStats {
    let mut lat: Vec<u64> = trace
        .rounds
        .iter()
        .filter(|r| r.fa_count == trace.workers)
        .map(|r| r.last_fa_ns - r.first_send_ns)
        .collect();
    let incomplete = trace.rounds.len() - lat.len();
    lat.sort_unstable();
    LatencyStats {
        complete: lat.len(),
        incomplete,
        min_ns: lat.first().copied().unwrap_or(0),
        p50_ns: percentile(&lat, 50.0),
        p99_ns: percentile(&lat, 99.0),
        max_ns: lat.last().copied().unwrap_or(0),
    }
}

/// Outcome of a finished simulation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RunReport {
    pub end_ns: u64,
    pub stats: NetStats,
    pub anomalies: Vec<Anomaly>,
    pub trace: Trace,
}

/// A partial activation accepted for transmission.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SentPa {
    pub slot: u16,
    pub round: u64,
}

/// Workload callbacks. All times are virtual nanoseconds.
pub trait Driver {
    fn start(&mut self, net: &mut Network) -> Result<()>;
    fn on_fa(&mut self, net: &mut Network, worker: usize, sent: SentPa, fa: &[i32]) -> Result<()>;
    fn on_slot_freed(&mut self, _net: &mut Network, _worker: usize, _slot: u16) -> Result<()> {
        Ok(())
    }
    fn on_wake(&mut self, _net: &mut Network, _worker: usize, _token: u64) -> Result<()> {
        Ok(())
    }
    fn is_done(&self) -> bool;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Link {
    Up(usize),
    Down(usize),
    ToHost,
    FromHost,
}

#[derive(Clone, Debug)]
struct Envelope {
    bytes: Vec<u8>,
    /// Final destination worker for downstream packets.
    dst: Option<usize>,
    /// Originating worker and its round number, for partial activations.
    origin: Option<(usize, u64)>,
}

#[derive(Clone, Debug)]
enum Event {
    Deliver { to: Node, env: Envelope, link: Link, order: u64 },
    Transmit { link: Link, env: Envelope },
    Timer { worker: usize, slot: u16, id: TimerId },
    Release { worker: usize, slot: u16 },
    Wake { worker: usize, token: u64 },
}

struct Scheduled {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct Truth {
    sum: Vec<i32>,
    contributed: usize,
    delivered: usize,
}

/// Simulator state visible to a [`Driver`].
pub struct Network {
    cfg: NetConfig,
    now: u64,
    queue: BinaryHeap<Scheduled>,
    seq: u64,
    rng: ChaCha8Rng,
    busy_until: HashMap<Link, u64>,
    /// Per link: transmissions so far and the highest transmission index delivered.
    link_order: HashMap<Link, (u64, Option<u64>)>,
    workers: Vec<WorkerProto>,
    aggregator: SwitchState,
    /// Round carried by each worker's occupied slot.
    slot_round: Vec<Vec<u64>>,
    next_round: Vec<u64>,
    truth: HashMap<u64, Truth>,
    /// Round currently accumulating in each aggregator slot.
    shadow_round: Vec<Option<u64>>,
    trace: Trace,
    stats: NetStats,
    anomalies: Vec<Anomaly>,
}

impl Network {
    pub fn new(cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let rto = cfg.rto();
        let workers = (0..cfg.workers)
            .map(|w| WorkerProto::new(cfg.slots, cfg.workers, w, cfg.mb, rto).map(|p| p.with_guard(cfg.guard_ns())))
            .collect::<Result<Vec<_>>>()?;
        let aggregator = SwitchState::new(cfg.slots, cfg.workers, cfg.mb)?.with_mutation(cfg.mutation);
        Ok(Network {
            now: 0,
            queue: BinaryHeap::new(),
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.fault.seed),
            busy_until: HashMap::new(),
            link_order: HashMap::new(),
            workers,
            aggregator,
            slot_round: vec![vec![0; cfg.slots]; cfg.workers],
            next_round: vec![0; cfg.workers],
            truth: HashMap::new(),
            shadow_round: vec![None; cfg.slots],
            trace: Trace { workers: cfg.workers, ..Trace::default() },
            stats: NetStats::default(),
            anomalies: Vec::new(),
            cfg,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn stats(&self) -> NetStats {
        let mut s = self.stats.clone();
        s.retransmissions = self.workers.iter().map(|w| w.retransmissions()).sum();
        s
    }

    pub fn anomalies(&self) -> &[Anomaly] {
        &self.anomalies
    }

    pub fn worker(&self, w: usize) -> &WorkerProto {
        &self.workers[w]
    }

    /// Rounds each worker has sent so far.
    pub fn rounds_sent(&self, w: usize) -> u64 {
        self.next_round[w]
    }


    /// Timing records indexed by round number.
    pub fn round_records(&self) -> &[RoundRecord] {
        &self.trace.rounds
    }

    /// True when no worker has an occupied slot.
    pub fn quiescent(&self) -> bool {
        self.workers.iter().all(|w| w.outstanding() == 0)
    }

    fn stuck(&self) -> Vec<(usize, u16)> {
        self.workers
            .iter()
            .enumerate()
            .flat_map(|(i, w)| w.outstanding_slots().into_iter().map(move |s| (i, s)))
            .collect()
    }

    fn schedule(&mut self, time: u64, event: Event) {
        self.queue.push(Scheduled { time, seq: self.seq, event });
        self.seq += 1;
    }

    fn record(&mut self, kind: EventKind, node: Node, slot: u16, detail: impl FnOnce() -> String) {
        if self.cfg.record_trace {
            self.trace.events.push(TraceEvent { time_ns: self.now, kind, node, slot, detail: detail() });
        }
    }

    fn anomaly(&mut self, a: Anomaly) {
        self.anomalies.push(a);
    }

    /// Schedules [`Driver::on_wake`] for `worker` at `time` (or now, if earlier).
    pub fn wake_at(&mut self, worker: usize, time: u64, token: u64) {
        self.schedule(time.max(self.now), Event::Wake { worker, token });
    }

    /// Sends a partial activation from `worker`, or returns `None` if its
    /// next slot is still occupied.
    pub fn send_pa(&mut self, worker: usize, pa: Vec<i32>) -> Result<Option<SentPa>> {
        let SendOutcome::Sent { packet, timer } = self.workers[worker].send_pa(pa, self.now)? else {
            return Ok(None);
        };
        let round = self.next_round[worker];
        self.next_round[worker] += 1;
        let slot = packet.seq;
        self.slot_round[worker][slot as usize] = round;

        let truth = self.truth.entry(round).or_insert_with(|| Truth {
            sum: vec![0; packet.payload.len()],
            contributed: 0,
            delivered: 0,
        });
        for (s, p) in truth.sum.iter_mut().zip(&packet.payload) {
            *s = s.wrapping_add(*p);
        }
        truth.contributed += 1;
        if self.trace.rounds.len() as u64 == round {
            self.trace.rounds.push(RoundRecord { slot, first_send_ns: self.now, last_fa_ns: 0, fa_count: 0 });
        }

        let env = Envelope { bytes: encode_packet(&packet), dst: None, origin: Some((worker, round)) };
        self.record(EventKind::Send, Node::Worker(worker), slot, || format!("pa round={round}"));
        self.transmit(Link::Up(worker), env);
        self.arm_timer(worker, timer);
        Ok(Some(SentPa { slot, round }))
    }

    fn arm_timer(&mut self, worker: usize, arm: TimerArm) {
        self.schedule(arm.deadline, Event::Timer { worker, slot: arm.slot, id: arm.id });
    }

    fn link_target(link: Link) -> Node {
        match link {
            Link::Up(_) | Link::FromHost => Node::Switch,
            Link::Down(w) => Node::Worker(w),
            Link::ToHost => Node::Host,
        }
    }

    fn link_source(link: Link) -> Node {
        match link {
            Link::Up(w) => Node::Worker(w),
            Link::Down(_) | Link::ToHost => Node::Switch,
            Link::FromHost => Node::Host,
        }
    }

    /// Puts one packet on a link at the current time, drawing its faults.
    fn transmit(&mut self, link: Link, env: Envelope) {
        let len = env.bytes.len() as u64;
        self.stats.sent += 1;
        self.stats.bytes += len;
        let ser = self.cfg.serialization_ns();
        let busy = self.busy_until.entry(link).or_insert(0);
        let start = (*busy).max(self.now);
        *busy = start + ser;
        let arrival = start + ser + self.cfg.fault.latency_ns;
        let counter = &mut self.link_order.entry(link).or_insert((0, None)).0;
        let order = *counter;
        *counter += 1;

        let seq = env.bytes.get(2..4).map(|b| u16::from_le_bytes([b[0], b[1]])).unwrap_or(0);
        let src = Self::link_source(link);
        let to = Self::link_target(link);
        if self.rng.gen::<f64>() < self.cfg.fault.drop_prob {
            self.stats.dropped += 1;
            self.record(EventKind::Drop, src, seq, || format!("to={to} bytes={len}"));
            return;
        }
        let dup = self.rng.gen::<f64>() < self.cfg.fault.dup_prob;
        let j = self.cfg.fault.jitter_ns;
        let first = arrival + self.rng.gen_range(0..=j);
        self.stats.delivered += 1;
        if dup {
            let second = arrival + self.rng.gen_range(0..=j);
            self.stats.duplicated += 1;
            self.stats.delivered += 1;
            self.record(EventKind::Duplicate, src, seq, || format!("to={to} arrivals={first}/{second}"));
            self.schedule(second, Event::Deliver { to, env: env.clone(), link, order });
        }
        self.schedule(first, Event::Deliver { to, env, link, order });
    }

    fn dispatch(&mut self, event: Event, driver: &mut dyn Driver) -> Result<()> {
        match event {
            Event::Transmit { link, env } => {
                self.transmit(link, env);
                Ok(())
            }
            Event::Deliver { to, env, link, order } => {
                let highest = &mut self.link_order.entry(link).or_insert((0, None)).1;
                match *highest {
                    Some(h) if order < h => self.stats.reordered += 1,
                    _ => *highest = Some(order),
                }
                match to {
                    Node::Worker(w) => self.at_worker(w, env, driver),
                    Node::Switch => self.at_switch(env),
                    Node::Host => self.aggregate(Node::Host, env),
                }
            }
            Event::Timer { worker, slot, id } => {
                if !self.workers[worker].is_armed(slot, id) {
                    return Ok(());
                }
                let (pkt, arm) = self.workers[worker].on_timeout(slot, self.now)?;
                let origin = pkt.is_agg.then(|| (worker, self.slot_round[worker][slot as usize]));
                self.record(EventKind::Timeout, Node::Worker(worker), slot, || {
                    format!("resend {}", if pkt.is_agg { "pa" } else { "ack" })
                });
                self.transmit(Link::Up(worker), Envelope { bytes: encode_packet(&pkt), dst: None, origin });
                self.arm_timer(worker, arm);
                Ok(())
            }
            Event::Release { worker, slot } => {
                self.workers[worker].release(slot, self.now)?;
                self.record(EventKind::SlotFreed, Node::Worker(worker), slot, String::new);
                driver.on_slot_freed(self, worker, slot)
            }
            Event::Wake { worker, token } => driver.on_wake(self, worker, token),
        }
    }

    fn at_switch(&mut self, env: Envelope) -> Result<()> {
        match (self.cfg.topology, env.dst) {
            (Topology::InSwitch, _) => self.aggregate(Node::Switch, env),
            (Topology::Endhost { .. }, None) => {
                self.schedule(self.now + self.cfg.switch_proc_ns, Event::Transmit { link: Link::ToHost, env });
                Ok(())
            }
            (Topology::Endhost { .. }, Some(w)) => {
                self.schedule(self.now + self.cfg.switch_proc_ns, Event::Transmit { link: Link::Down(w), env });
                Ok(())
            }
        }
    }

    fn aggregate(&mut self, node: Node, env: Envelope) -> Result<()> {
        let pkt = decode_packet(&env.bytes, self.cfg.mb)?;
        let s = pkt.seq;
        let before = self.aggregator.slot(s).agg_count;
        let outputs = self.aggregator.receive(&pkt)?;
        let after = self.aggregator.slot(s).agg_count;
        self.record(EventKind::Deliver, node, s, || {
            format!("{} bm={:#x} agg_count={after}", if pkt.is_agg { "pa" } else { "ack" }, pkt.bm)
        });

        if pkt.is_agg && after > before {
            if let Some((_, round)) = env.origin {
                match self.shadow_round[s as usize] {
                    Some(current) if before > 0 && current != round => {
                        self.anomaly(Anomaly::MixedRounds { slot: s, rounds: (current, round), time_ns: self.now });
                    }
                    _ if before == 0 => self.shadow_round[s as usize] = Some(round),
                    _ => {}
                }
            }
        }
        if self.cfg.paranoid {
            if let Err(e) = self.aggregator.check_invariants() {
                self.anomaly(Anomaly::Invariant { node, message: e.to_string(), time_ns: self.now });
            }
        }

        let (link_for, delay): (fn(usize) -> Link, u64) = match self.cfg.topology {
            Topology::InSwitch => (Link::Down, self.cfg.switch_proc_ns),
            Topology::Endhost { host_proc_ns } => (|_| Link::FromHost, host_proc_ns),
        };
        for (dst, out) in outputs {
            let env = Envelope { bytes: encode_packet(&out), dst: Some(dst), origin: None };
            self.schedule(self.now + delay, Event::Transmit { link: link_for(dst), env });
        }
        Ok(())
    }

    fn at_worker(&mut self, w: usize, env: Envelope, driver: &mut dyn Driver) -> Result<()> {
        let pkt = decode_packet(&env.bytes, self.cfg.mb)?;
        let slot = pkt.seq;
        let receipt = self.workers[w].receive(&pkt, self.now)?;
        self.record(EventKind::Deliver, Node::Worker(w), slot, || {
            let kind = if pkt.is_agg { "fa" } else { "confirm" };
            format!("{kind}{}", if receipt.ignored { " ignored" } else { "" })
        });
        if receipt.ignored {
            self.stats.ignored_at_workers += 1;
        }
        if self.cfg.paranoid {
            if let Err(e) = self.workers[w].check_invariants() {
                self.anomaly(Anomaly::Invariant { node: Node::Worker(w), message: e.to_string(), time_ns: self.now });
            }
        }
        if let Some(reply) = receipt.reply {
            let env = Envelope { bytes: encode_packet(&reply.packet), dst: None, origin: None };
            if reply.send_at > self.now {
                self.schedule(reply.send_at, Event::Transmit { link: Link::Up(w), env });
            } else {
                self.transmit(Link::Up(w), env);
            }
            self.arm_timer(w, reply.timer);
        }
        if let Some(at) = receipt.release_at {
            self.schedule(at, Event::Release { worker: w, slot });
        }
        if let Some(fa) = receipt.delivered {
            let round = self.slot_round[w][slot as usize];
            self.check_fa(w, slot, round, &fa);
            let rec = &mut self.trace.rounds[round as usize];
            rec.fa_count += 1;
            rec.last_fa_ns = rec.last_fa_ns.max(self.now);
            self.record(EventKind::FaDelivered, Node::Worker(w), slot, || format!("round={round}"));
            driver.on_fa(self, w, SentPa { slot, round }, &fa)?;
        }
        if receipt.freed {
            self.record(EventKind::SlotFreed, Node::Worker(w), slot, String::new);
            driver.on_slot_freed(self, w, slot)?;
        }
        Ok(())
    }

    fn check_fa(&mut self, worker: usize, slot: u16, round: u64, fa: &[i32]) {
        let now = self.now;
        let workers = self.cfg.workers;
        let Some(truth) = self.truth.get_mut(&round) else {
            self.anomalies.push(Anomaly::FaMismatch { worker, slot, round, time_ns: now });
            return;
        };
        if truth.contributed < workers {
            self.anomalies.push(Anomaly::PrematureFa { worker, slot, round, time_ns: now });
            return;
        }
        if truth.sum != fa {
            self.anomalies.push(Anomaly::FaMismatch { worker, slot, round, time_ns: now });
        }
        truth.delivered += 1;
        if truth.delivered == workers {
            self.truth.remove(&round);
        }
    }

    fn into_report(self) -> RunReport {
        let stats = self.stats();
        RunReport { end_ns: self.now, stats, anomalies: self.anomalies, trace: self.trace }
    }
}

/// A finished run together with the error that stopped it, if any.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub report: RunReport,
    pub error: Option<Error>,
}

/// Drives the network until the workload is done and every slot is free.
pub fn run_collect(cfg: NetConfig, driver: &mut dyn Driver) -> Result<RunOutcome> {
    let horizon = cfg.horizon_ns;
    let mut net = Network::new(cfg)?;
    let error = drive(&mut net, driver, horizon).err();
    Ok(RunOutcome { report: net.into_report(), error })
}

/// Like [`run_collect`], turning a stopped run into an error.
pub fn run(cfg: NetConfig, driver: &mut dyn Driver) -> Result<RunReport> {
    let out = run_collect(cfg, driver)?;
    match out.error {
        Some(e) => Err(e),
        None => Ok(out.report),
    }
}

fn drive(net: &mut Network, driver: &mut dyn Driver, horizon: u64) -> Result<()> {
    driver.start(net)?;
    loop {
        if driver.is_done() && net.quiescent() {
            return Ok(());
        }
        let Some(next) = net.queue.pop() else {
            return Err(Error::Deadlock(net.now));
        };
        if next.time > horizon {
            return Err(Error::Liveness { horizon_ns: horizon, stuck: net.stuck() });
        }
        net.now = next.time;
        net.dispatch(next.event, driver)?;
    }
}

/// Sends `rounds` partial activations per worker as fast as slots allow.
pub struct FuzzDriver {
    rounds: u64,
    mb: usize,
    rngs: Vec<ChaCha8Rng>,
    pending: Vec<Option<Vec<i32>>>,
    fa_seen: u64,
    workers: usize,
}

impl FuzzDriver {
    pub fn new(workers: usize, mb: usize, rounds: u64, seed: u64) -> Self {
        FuzzDriver {
            rounds,
            mb,
            rngs: (0..workers).map(|w| ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0000 ^ (w as u64) << 32)).collect(),
            pending: vec![None; workers],
            fa_seen: 0,
            workers,
        }
    }

    fn pump(&mut self, net: &mut Network, w: usize) -> Result<()> {
        while net.rounds_sent(w) < self.rounds {
            let pa = match self.pending[w].take() {
                Some(pa) => pa,
                None => (0..self.mb).map(|_| self.rngs[w].gen()).collect(),
            };
            if net.send_pa(w, pa.clone())?.is_none() {
                self.pending[w] = Some(pa);
                break;
            }
        }
        Ok(())
    }
}

impl Driver for FuzzDriver {
    fn start(&mut self, net: &mut Network) -> Result<()> {
        (0..self.workers).try_for_each(|w| self.pump(net, w))
    }

    fn on_fa(&mut self, _net: &mut Network, _worker: usize, _sent: SentPa, _fa: &[i32]) -> Result<()> {
        self.fa_seen += 1;
        Ok(())
    }

    fn on_slot_freed(&mut self, net: &mut Network, worker: usize, _slot: u16) -> Result<()> {
        self.pump(net, worker)
    }

    fn is_done(&self) -> bool {
        self.fa_seen == self.rounds * self.workers as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FuzzReport {
    pub seed: u64,
    pub passed: bool,
    pub rounds_complete: usize,
    pub rounds_expected: u64,
    pub anomalies: Vec<Anomaly>,
    pub failure: Option<String>,
    pub stats: NetStats,
    pub latency: LatencyStats,
    #[serde(skip)]
    pub trace: Trace,
}

/// Runs the exactly-once/liveness checker for one seed.
pub fn fuzz_protocol(cfg: &NetConfig, rounds: u64) -> Result<FuzzReport> {
    let mut cfg = cfg.clone();
    cfg.paranoid = true;
    let seed = cfg.fault.seed;
    let mut driver = FuzzDriver::new(cfg.workers, cfg.mb, rounds, seed);
    let out = run_collect(cfg, &mut driver)?;
    let latency = measure_allreduce_latency(&out.report.trace);
    let complete = out.report.trace.rounds.iter().filter(|r| r.fa_count == out.report.trace.workers).count();
    let passed = out.error.is_none() && out.report.anomalies.is_empty() && complete as u64 == rounds;
    Ok(FuzzReport {
        seed,
        passed,
        rounds_complete: complete,
        rounds_expected: rounds,
        anomalies: out.report.anomalies,
        failure: out.error.map(|e| e.to_string()),
        stats: out.report.stats,
        latency,
        trace: out.report.trace,
    })
}

/// Runs one AllReduce at a time: every worker sends, and the next round
/// starts once every worker's slot has been released.
pub struct LockstepDriver {
    rounds: u64,
    mb: usize,
    freed: usize,
    started: u64,
    workers: usize,
}

impl LockstepDriver {
    pub fn new(workers: usize, mb: usize, rounds: u64) -> Self {
        LockstepDriver { rounds, mb, freed: 0, started: 0, workers }
    }

    fn launch(&mut self, net: &mut Network) -> Result<()> {
        if self.started == self.rounds {
            return Ok(());
        }
        self.started += 1;
        self.freed = 0;
        for w in 0..self.workers {
            let pa = vec![(w as i32 + 1) * (self.started as i32); self.mb];
            if net.send_pa(w, pa)?.is_none() {
                return Err(Error::Consistency(format!("worker {w} has no free slot between rounds")));
            }
        }
        Ok(())
    }
}

impl Driver for LockstepDriver {
    fn start(&mut self, net: &mut Network) -> Result<()> {
        self.launch(net)
    }

    fn on_fa(&mut self, _net: &mut Network, _worker: usize, _sent: SentPa, _fa: &[i32]) -> Result<()> {
        Ok(())
    }

    fn on_slot_freed(&mut self, net: &mut Network, _worker: usize, _slot: u16) -> Result<()> {
        self.freed += 1;
        if self.freed == self.workers {
            self.launch(net)?;
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.started == self.rounds && self.freed == self.workers
    }
}

/// AllReduce latency over `rounds` lock-step rounds.
pub fn allreduce_latency(cfg: &NetConfig, rounds: u64) -> Result<(LatencyStats, RunReport)> {
    let mut driver = LockstepDriver::new(cfg.workers, cfg.mb, rounds);
    let report = run(cfg.clone(), &mut driver)?;
    Ok((measure_allreduce_latency(&report.trace), report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lossy(seed: u64) -> NetConfig {
        let mut cfg = NetConfig::new(4, 8, 4);
        cfg.fault = FaultModel { drop_prob: 0.1, dup_prob: 0.05, latency_ns: 500, jitter_ns: 400, seed };
        cfg.horizon_ns = 1_000_000_000;
        cfg
    }

    #[test]
    fn lossless_in_switch_latency_is_two_hops_plus_processing() {
        let cfg = NetConfig::new(8, 16, 8);
        let (lat, report) = allreduce_latency(&cfg, 20).unwrap();
        assert_eq!(lat.complete, 20);
        assert_eq!((lat.min_ns, lat.p50_ns, lat.p99_ns, lat.max_ns), (1100, 1100, 1100, 1100));
        assert_eq!(report.stats.retransmissions, 0);
        assert!(report.anomalies.is_empty());
    }

    #[test]
    fn endhost_latency_adds_two_hops_and_host_time() {
        let mut cfg = NetConfig::new(8, 16, 8);
        cfg.topology = Topology::Endhost { host_proc_ns: 2000 };
        let (lat, _) = allreduce_latency(&cfg, 5).unwrap();
        assert_eq!((lat.p50_ns, lat.p99_ns), (4200, 4200));
        cfg.topology = Topology::Endhost { host_proc_ns: 0 };
        let (lat, _) = allreduce_latency(&cfg, 5).unwrap();
        assert_eq!(lat.p50_ns, 2200);
    }

    #[test]
    fn serialization_delays_broadcast_copies() {
        let mut cfg = NetConfig::new(2, 4, 8);
        // 40-byte packets at 3.2 Gbit/s take 100 ns each.
        cfg.link_gbps = Some(3.2);
        let (lat, _) = allreduce_latency(&cfg, 1).unwrap();
        // PA: 100 ser + 500; FA: 100 proc + 100 ser + 500 on each downlink.
        assert_eq!(lat.p50_ns, 1300);
    }

    #[test]
    fn same_seed_same_trace() {
        let mut cfg = lossy(42);
        cfg.record_trace = true;
        let a = fuzz_protocol(&cfg, 100).unwrap();
        let b = fuzz_protocol(&cfg, 100).unwrap();
        assert!(a.passed, "{:?}", a.anomalies);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.to_csv(), b.trace.to_csv());
        cfg.fault.seed = 43;
        assert_ne!(fuzz_protocol(&cfg, 100).unwrap().trace, a.trace);
    }

    #[test]
    fn trace_clock_is_monotonic_and_packets_are_conserved() {
        let mut cfg = lossy(7);
        cfg.record_trace = true;
        let r = fuzz_protocol(&cfg, 200).unwrap();
        assert!(r.trace.events.windows(2).all(|w| w[0].time_ns <= w[1].time_ns));
        let s = &r.stats;
        assert!(s.dropped > 0 && s.duplicated > 0);
        assert_eq!(s.sent, s.delivered - s.duplicated + s.dropped);
    }

    #[test]
    fn lossy_rounds_all_complete_exactly_once() {
        for seed in 0..4 {
            let r = fuzz_protocol(&lossy(seed), 300).unwrap();
            assert!(r.passed, "seed {seed}: {:?} {:?}", r.anomalies, r.failure);
            assert!(r.stats.retransmissions > 0);
            assert!(r.stats.reordered > 0);
        }
    }

    #[test]
    fn lossless_run_never_retransmits() {
        let mut cfg = lossy(1);
        cfg.fault.drop_prob = 0.0;
        cfg.fault.dup_prob = 0.0;
        let r = fuzz_protocol(&cfg, 200).unwrap();
        assert!(r.passed);
        assert_eq!(r.stats.retransmissions, 0);
    }

    #[test]
    fn total_loss_reports_stuck_slots() {
        let mut cfg = lossy(1);
        cfg.fault.drop_prob = 1.0;
        cfg.horizon_ns = 100_000;
        let err = run(cfg, &mut FuzzDriver::new(4, 4, 3, 1)).unwrap_err();
        match err {
            Error::Liveness { horizon_ns, stuck } => {
                assert_eq!(horizon_ns, 100_000);
                assert_eq!(stuck.len(), 4 * 3);
            }
            other => panic!("unexpected {other:?}"),
        }
        let r = fuzz_protocol(&NetConfig { horizon_ns: 100_000, ..lossy_total() }, 3).unwrap();
        assert!(!r.passed);
        assert_eq!(r.rounds_complete, 0);
    }

    fn lossy_total() -> NetConfig {
        let mut cfg = lossy(2);
        cfg.fault.drop_prob = 1.0;
        cfg
    }

    #[test]
    fn checker_catches_double_counting() {
        let mut cfg = lossy(3);
        cfg.fault.dup_prob = 0.3;
        cfg.mutation = Some(Mutation::SkipAggDuplicateCheck);
        cfg.horizon_ns = 5_000_000;
        let r = fuzz_protocol(&cfg, 200).unwrap();
        assert!(!r.passed);
        assert!(r.anomalies.iter().any(|a| matches!(a, Anomaly::FaMismatch { .. } | Anomaly::PrematureFa { .. })));
    }

    #[test]
    fn percentile_nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
    }

    #[test]
    fn in_order_links_use_no_guard() {
        let cfg = NetConfig::new(2, 2, 2);
        assert_eq!(cfg.guard_ns(), 0);
        let mut j = cfg.clone();
        j.fault.jitter_ns = 300;
        assert_eq!(j.guard_ns(), 301);
        j.topology = Topology::Endhost { host_proc_ns: 0 };
        assert_eq!(j.guard_ns(), 601);
        j.fault.jitter_ns = 5000;
        assert!(matches!(Network::new(j), Err(Error::Config(_))));
    }

    #[test]
    fn endhost_topology_survives_loss_and_reordering() {
        let mut cfg = lossy(11);
        cfg.topology = Topology::Endhost { host_proc_ns: 500 };
        let r = fuzz_protocol(&cfg, 200).unwrap();
        assert!(r.passed, "{:?} {:?}", r.anomalies, r.failure);
    }
}
