//! Worker side of the aggregation protocol.
//!
//! Each send occupies the slot under the cursor until the switch confirms
//! that every worker has acknowledged the slot's full activation. Every
//! outstanding slot has exactly one armed retransmission timer; timers are
//! identified by a [`TimerId`] so the event loop can discard fired timers
//! that were cancelled or re-armed in the meantime.
//!
//! Packets carry no round number, so a copy delayed past the end of its
//! round could be mistaken for the slot's next round. When links reorder
//! packets by at most `guard` nanoseconds the worker closes those windows
//! with three guard times:
//!
//! * a confirmed slot is held for `guard` before it can be reused;
//! * an acknowledgement leaves no earlier than `guard` after the slot's last
//!   partial-activation transmission;
//! * confirmations arriving within `guard` of the full activation are stale.
//!
//! With `guard = 0` none of these delays apply.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::switch_agg::MAX_WORKERS;
use crate::wire::Packet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct TimerId(pub u64);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Phase {
    AwaitingFa,
    AwaitingConfirm,
    /// Confirmed; the slot is released at the given time.
    Draining { until: u64 },
}

/// A timer the caller must schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TimerArm {
    pub slot: u16,
    pub id: TimerId,
    pub deadline: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Inflight {
    /// Last packet sent for this slot, resent verbatim on timeout.
    pub packet: Packet,
    pub timer: TimerId,
    pub deadline: u64,
    pub phase: Phase,
    /// Time of the last partial-activation transmission.
    pub last_pa_ns: u64,
    /// Time the full activation was delivered.
    pub fa_ns: Option<u64>,
}

/// An acknowledgement to transmit at `send_at`, with its timer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reply {
    pub packet: Packet,
    pub send_at: u64,
    pub timer: TimerArm,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SendOutcome {
    Sent { packet: Packet, timer: TimerArm },
    /// The slot under the cursor is still in use; retry later.
    Busy,
}

/// What a received packet produced.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Receipt {
    /// Full activation to hand to backward propagation (first copy only).
    pub delivered: Option<Vec<i32>>,
    /// Acknowledgement to send.
    pub reply: Option<Reply>,
    /// The slot became free.
    pub freed: bool,
    /// The slot was confirmed and must be released with [`WorkerProto::release`] at this time.
    pub release_at: Option<u64>,
    /// The packet was stale and ignored.
    pub ignored: bool,
}

#[derive(Clone, Debug)]
pub struct WorkerProto {
    slots: usize,
    index: usize,
    mb: usize,
    rto_ns: u64,
    guard_ns: u64,
    unused: Vec<bool>,
    cursor: u16,
    bm: u32,
    inflight: Vec<Option<Inflight>>,
    next_timer: u64,
    retransmissions: u64,
}

impl WorkerProto {
    pub fn new(slots: usize, workers: usize, index: usize, mb: usize, rto_ns: u64) -> Result<Self> {
        if workers == 0 || workers > MAX_WORKERS {
            return Err(Error::Capacity(format!("worker count {workers} not in 1..={MAX_WORKERS}")));
        }
        if index >= workers {
            return Err(Error::Config(format!("worker index {index} >= W = {workers}")));
        }
        if slots == 0 || slots > u16::MAX as usize + 1 {
            return Err(Error::Capacity(format!("slot count {slots} not in 1..=65536")));
        }
        if rto_ns == 0 {
            return Err(Error::Config("retransmission timeout must be positive".into()));
        }
        Ok(WorkerProto {
            slots,
            index,
            mb,
            rto_ns,
            guard_ns: 0,
            unused: vec![true; slots],
            cursor: 0,
            bm: 1 << index,
            inflight: vec![None; slots],
            next_timer: 0,
            retransmissions: 0,
        })
    }

    /// Sets the reordering guard time.
    pub fn with_guard(mut self, guard_ns: u64) -> Self {
        self.guard_ns = guard_ns;
        self
    }

    pub fn guard(&self) -> u64 {
        self.guard_ns
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn bitmap(&self) -> u32 {
        self.bm
    }

    pub fn cursor(&self) -> u16 {
        self.cursor
    }

    pub fn is_unused(&self, slot: u16) -> bool {
        self.unused[slot as usize]
    }

    pub fn inflight(&self, slot: u16) -> Option<&Inflight> {
        self.inflight[slot as usize].as_ref()
    }

    pub fn outstanding(&self) -> usize {
        self.inflight.iter().filter(|e| e.is_some()).count()
    }

    pub fn outstanding_slots(&self) -> Vec<u16> {
        (0..self.slots as u16).filter(|&s| self.inflight[s as usize].is_some()).collect()
    }

    pub fn retransmissions(&self) -> u64 {
        self.retransmissions
    }

    /// True if `id` is the timer currently armed for `slot`.
    pub fn is_armed(&self, slot: u16, id: TimerId) -> bool {
        matches!(&self.inflight[slot as usize], Some(e) if e.timer == id)
    }

    fn reply(&mut self, slot: u16, packet: Packet, now: u64) -> Reply {
        let last_pa = self.inflight[slot as usize].as_ref().map_or(0, |e| e.last_pa_ns);
        let send_at = now.max(last_pa + self.guard_ns);
        let timer = self.arm(slot, send_at);
        Reply { packet, send_at, timer }
    }

    fn arm(&mut self, slot: u16, now: u64) -> TimerArm {
        let id = TimerId(self.next_timer);
        self.next_timer += 1;
        let deadline = now + self.rto_ns;
        if let Some(e) = self.inflight[slot as usize].as_mut() {
            e.timer = id;
            e.deadline = deadline;
        }
        TimerArm { slot, id, deadline }
    }

    /// Sends a partial activation on the slot under the cursor.
    pub fn send_pa(&mut self, pa: Vec<i32>, now: u64) -> Result<SendOutcome> {
        if pa.len() != self.mb {
            return Err(Error::Config(format!("PA length {} differs from MB = {}", pa.len(), self.mb)));
        }
        let seq = self.cursor;
        if !self.unused[seq as usize] {
            return Ok(SendOutcome::Busy);
        }
        self.unused[seq as usize] = false;
        let packet = Packet { is_agg: true, acked: false, seq, bm: self.bm, payload: pa };
        self.cursor = if seq as usize + 1 == self.slots { 0 } else { seq + 1 };
        self.inflight[seq as usize] = Some(Inflight {
            packet: packet.clone(),
            timer: TimerId(u64::MAX),
            deadline: 0,
            phase: Phase::AwaitingFa,
            last_pa_ns: now,
            fa_ns: None,
        });
        let timer = self.arm(seq, now);
        Ok(SendOutcome::Sent { packet, timer })
    }

    /// Handles a full-activation broadcast or a confirmation from the switch.
    pub fn receive(&mut self, pkt: &Packet, now: u64) -> Result<Receipt> {
        if pkt.seq as usize >= self.slots {
            return Err(Error::ProtocolViolation(format!("seq {} out of range (N = {})", pkt.seq, self.slots)));
        }
        let slot = pkt.seq;
        let Some(entry) = self.inflight[slot as usize].as_mut() else {
            return Ok(Receipt { ignored: true, ..Receipt::default() });
        };

        if !pkt.is_agg && !pkt.acked {
            return Err(Error::ProtocolViolation(format!("unconfirmed acknowledgement for slot {slot} at worker")));
        }
        let ignored = Ok(Receipt { ignored: true, ..Receipt::default() });
        match (pkt.is_agg, entry.phase) {
            (_, Phase::Draining { .. }) => ignored,
            (true, Phase::AwaitingFa) => {
                let ack = Packet { is_agg: false, bm: self.bm, ..pkt.clone() };
                entry.packet = ack.clone();
                entry.phase = Phase::AwaitingConfirm;
                entry.fa_ns = Some(now);
                let reply = self.reply(slot, ack, now);
                Ok(Receipt { delivered: Some(pkt.payload.clone()), reply: Some(reply), ..Receipt::default() })
            }
            (true, Phase::AwaitingConfirm) => {
                // FA already delivered this round: only re-acknowledge.
                let ack = entry.packet.clone();
                let reply = self.reply(slot, ack, now);
                Ok(Receipt { reply: Some(reply), ..Receipt::default() })
            }
            // A confirmation can only answer this worker's own ack, so one
            // arriving before the FA belongs to the slot's previous round.
            (false, Phase::AwaitingFa) => ignored,
            (false, Phase::AwaitingConfirm) => {
                if now < entry.fa_ns.unwrap_or(0) + self.guard_ns {
                    return ignored;
                }
                if self.guard_ns == 0 {
                    self.inflight[slot as usize] = None;
                    self.unused[slot as usize] = true;
                    return Ok(Receipt { freed: true, ..Receipt::default() });
                }
                let until = now + self.guard_ns;
                entry.phase = Phase::Draining { until };
                entry.timer = TimerId(u64::MAX);
                Ok(Receipt { release_at: Some(until), ..Receipt::default() })
            }
        }
    }

    /// Frees a confirmed slot once its guard time has passed.
    pub fn release(&mut self, slot: u16, now: u64) -> Result<()> {
        match self.inflight.get(slot as usize).and_then(|e| e.as_ref()).map(|e| e.phase) {
            Some(Phase::Draining { until }) if now >= until => {
                self.inflight[slot as usize] = None;
                self.unused[slot as usize] = true;
                Ok(())
            }
            _ => Err(Error::Consistency(format!("slot {slot} on worker {} is not ready for release", self.index))),
        }
    }

    /// Retransmits the last packet of `slot` and re-arms its timer.
    pub fn on_timeout(&mut self, slot: u16, now: u64) -> Result<(Packet, TimerArm)> {
        let Some(entry) = self.inflight.get_mut(slot as usize).and_then(|e| e.as_mut()) else {
            return Err(Error::Consistency(format!("timer fired for free slot {slot} on worker {}", self.index)));
        };
        if matches!(entry.phase, Phase::Draining { .. }) {
            return Err(Error::Consistency(format!("timer fired for draining slot {slot} on worker {}", self.index)));
        }
        if entry.packet.is_agg {
            entry.last_pa_ns = now;
        }
        let packet = entry.packet.clone();
        self.retransmissions += 1;
        let timer = self.arm(slot, now);
        Ok((packet, timer))
    }

    /// Checks that slot occupancy and in-flight bookkeeping agree.
    pub fn check_invariants(&self) -> Result<()> {
        for s in 0..self.slots {
            if self.unused[s] == self.inflight[s].is_some() {
                return Err(Error::Consistency(format!("worker {}: slot {s} occupancy disagrees", self.index)));
            }
        }
        Ok(())
    }
}
