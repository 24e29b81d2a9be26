//! Switch data-plane aggregation with duplicate detection and a second
//! acknowledgement round that gates register clearing.
//!
//! The switch keeps exactly one copy of each slot's running sum. A slot is
//! cleared only after every worker has acknowledged the full activation,
//! so a lost broadcast can always be recovered by a worker retransmitting
//! its partial activation.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::wire::Packet;

/// Maximum worker count, bounded by the width of the bitmaps.
pub const MAX_WORKERS: usize = 32;

/// Deliberate faults for checking that the fuzz harness notices corruption.
/// Never enable outside of tests and the fuzz self-check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Mutation {
    /// Accept every aggregation packet as if it were new.
    SkipAggDuplicateCheck,
    /// Accept every acknowledgement as if it were new.
    SkipAckDuplicateCheck,
}

/// Read-only view of one slot's registers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SlotView<'a> {
    pub agg: &'a [i32],
    pub agg_count: u32,
    pub agg_bm: u32,
    pub ack_count: u32,
    pub ack_bm: u32,
}

#[derive(Clone, Debug)]
pub struct SwitchState {
    slots: usize,
    workers: usize,
    mb: usize,
    agg: Vec<i32>,
    agg_count: Vec<u32>,
    agg_bm: Vec<u32>,
    ack_count: Vec<u32>,
    ack_bm: Vec<u32>,
    lenient: bool,
    mutation: Option<Mutation>,
}

impl SwitchState {
    /// Fresh switch with `slots` aggregation slots for `workers` workers and
    /// payloads of `mb` words.
    pub fn new(slots: usize, workers: usize, mb: usize) -> Result<Self> {
        if workers == 0 || workers > MAX_WORKERS {
            return Err(Error::Capacity(format!("worker count {workers} not in 1..={MAX_WORKERS}")));
        }
        if slots == 0 || slots > u16::MAX as usize + 1 {
            return Err(Error::Capacity(format!("slot count {slots} not in 1..=65536")));
        }
        if mb == 0 {
            return Err(Error::Capacity("payload length must be positive".into()));
        }
        Ok(SwitchState {
            slots,
            workers,
            mb,
            agg: vec![0; slots * mb],
            agg_count: vec![0; slots],
            agg_bm: vec![0; slots],
            ack_count: vec![0; slots],
            ack_bm: vec![0; slots],
            lenient: false,
            mutation: None,
        })
    }

    /// Drop invalid packets instead of failing.
    pub fn with_lenient(mut self, lenient: bool) -> Self {
        self.lenient = lenient;
        self
    }

    pub fn with_mutation(mut self, mutation: Option<Mutation>) -> Self {
        self.mutation = mutation;
        self
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    pub fn payload_len(&self) -> usize {
        self.mb
    }

    pub fn slot(&self, seq: u16) -> SlotView<'_> {
        let s = seq as usize;
        SlotView {
            agg: &self.agg[s * self.mb..(s + 1) * self.mb],
            agg_count: self.agg_count[s],
            agg_bm: self.agg_bm[s],
            ack_count: self.ack_count[s],
            ack_bm: self.ack_bm[s],
        }
    }

    fn full_mask(&self) -> u32 {
        if self.workers == 32 {
            u32::MAX
        } else {
            (1u32 << self.workers) - 1
        }
    }

    fn validate(&self, pkt: &Packet) -> Result<()> {
        if pkt.seq as usize >= self.slots {
            return Err(Error::ProtocolViolation(format!("seq {} out of range (N = {})", pkt.seq, self.slots)));
        }
        if pkt.bm.count_ones() != 1 || pkt.bm & !self.full_mask() != 0 {
            return Err(Error::ProtocolViolation(format!(
                "bitmap {:#x} is not a single worker bit below W = {}",
                pkt.bm, self.workers
            )));
        }
        if pkt.payload.len() != self.mb {
            return Err(Error::ProtocolViolation(format!(
                "payload length {} differs from MB = {}",
                pkt.payload.len(),
                self.mb
            )));
        }
        Ok(())
    }

    /// Processes one packet and returns the `(worker, packet)` pairs to emit.
    pub fn receive(&mut self, pkt: &Packet) -> Result<Vec<(usize, Packet)>> {
        if let Err(e) = self.validate(pkt) {
            return if self.lenient { Ok(Vec::new()) } else { Err(e) };
        }
        let s = pkt.seq as usize;
        let w = self.workers as u32;
        let bm = pkt.bm;

        if pkt.is_agg {
            let fresh = self.agg_bm[s] & bm == 0 || self.mutation == Some(Mutation::SkipAggDuplicateCheck);
            if fresh {
                self.agg_count[s] += 1;
                self.agg_bm[s] |= bm;
                let acc = &mut self.agg[s * self.mb..(s + 1) * self.mb];
                for (a, p) in acc.iter_mut().zip(&pkt.payload) {
                    *a = a.wrapping_add(*p);
                }
                if self.agg_count[s] == w {
                    self.ack_count[s] = 0;
                    self.ack_bm[s] = 0;
                }
            }
            if self.agg_count[s] == w {
                let fa = Packet {
                    payload: self.agg[s * self.mb..(s + 1) * self.mb].to_vec(),
                    ..pkt.clone()
                };
                return Ok(self.broadcast(fa));
            }
        } else {
            let fresh = self.ack_bm[s] & bm == 0 || self.mutation == Some(Mutation::SkipAckDuplicateCheck);
            if fresh {
                self.ack_count[s] += 1;
                self.ack_bm[s] |= bm;
                if self.ack_count[s] == w {
                    self.agg_count[s] = 0;
                    self.agg_bm[s] = 0;
                    self.agg[s * self.mb..(s + 1) * self.mb].fill(0);
                }
            }
            if self.ack_count[s] == w {
                let confirm = Packet { acked: true, ..pkt.clone() };
                return Ok(self.broadcast(confirm));
            }
        }
        Ok(Vec::new())
    }

    fn broadcast(&self, pkt: Packet) -> Vec<(usize, Packet)> {
        (0..self.workers).map(|dst| (dst, pkt.clone())).collect()
    }

    /// Checks the per-slot counter/bitmap invariants.
    pub fn check_invariants(&self) -> Result<()> {
        let w = self.workers as u32;
        for s in 0..self.slots {
            if self.agg_bm[s].count_ones() != self.agg_count[s] || self.ack_bm[s].count_ones() != self.ack_count[s] {
                return Err(Error::Consistency(format!(
                    "slot {s}: counters ({}, {}) disagree with bitmaps ({:#x}, {:#x})",
                    self.agg_count[s], self.ack_count[s], self.agg_bm[s], self.ack_bm[s]
                )));
            }
            if self.agg_count[s] > w || self.ack_count[s] > w {
                return Err(Error::Consistency(format!("slot {s}: counter exceeds W = {w}")));
            }
        }
        Ok(())
    }
}
