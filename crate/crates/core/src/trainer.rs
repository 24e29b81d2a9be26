//! Distributed training on the simulated network.
//!
//! Model-parallel training splits the features across `M` workers of
//! `N_engines` engines each. For every micro-batch each worker computes its
//! partial activations, the switch sums them, and every worker runs backward
//! propagation on the full activations. Forward passes of one mini-batch are
//! pipelined against communication and backward passes; the update waits for
//! all of them and the next mini-batch waits for every worker's update.
//!
//! Data-parallel training splits each mini-batch's samples across workers,
//! which AllReduce their full-length gradients through the same switch.
//!
//! Both paths reproduce [`reference_sgd`](crate::glm::reference_sgd) bit for
//! bit. Compute time is modelled per engine: a micro-batch takes
//! `ceil(MB / banks) * chunks * s` cycles, where `chunks` is the engine's
//! share of 64-feature chunks.

use std::collections::{HashMap, VecDeque};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{
    backward_accumulate, batch_shift, bit_serial_dot, df, model_update, training_loss, LossKind, ModelPartition,
    SgdConfig, WovenMatrix, LANES,
};
use crate::ingest::{plan_partitions, PartitionMode};
use crate::netsim::{percentile, run, Driver, FaultModel, NetConfig, NetStats, Network, SentPa};
use crate::wire::{wire_len, Q16};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Forward, communication and backward of micro-batches overlap.
    Pipelined,
    /// All forwards, then all communication, then all backwards.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub workers: usize,
    pub engines: usize,
    pub banks: usize,
    pub batch: usize,
    pub micro_batch: usize,
    pub precision: u32,
    pub learning_rate: Q16,
    pub epochs: usize,
    pub loss: LossKind,
    pub slots: usize,
    pub fault: FaultModel,
    pub switch_proc_ns: u64,
    pub link_gbps: Option<f64>,
    pub cycle_ns: u64,
    /// Overrides the modelled forward time of one micro-batch.
    pub forward_ns: Option<u64>,
    /// Overrides the modelled backward time of one micro-batch.
    pub backward_ns: Option<u64>,
    pub schedule: Schedule,
    pub horizon_ns: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            workers: 1,
            engines: 1,
            banks: 8,
            batch: 64,
            micro_batch: 8,
            precision: 4,
            learning_rate: Q16(64),
            epochs: 1,
            loss: LossKind::Squared,
            slots: 64,
            fault: FaultModel::default(),
            switch_proc_ns: 100,
            link_gbps: None,
            cycle_ns: 4,
            forward_ns: None,
            backward_ns: None,
            schedule: Schedule::Pipelined,
            horizon_ns: 10_000_000_000,
        }
    }
}

impl TrainingConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            batch: self.batch,
            precision: self.precision,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            loss: self.loss,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sgd().validate()?;
        if self.workers == 0 || self.engines == 0 || self.banks == 0 || self.cycle_ns == 0 {
            return Err(Error::Config("workers, engines, banks and cycle_ns must be positive".into()));
        }
        if self.micro_batch == 0 || !self.batch.is_multiple_of(self.micro_batch) {
            return Err(Error::Config(format!(
                "micro-batch {} does not divide mini-batch {}",
                self.micro_batch, self.batch
            )));
        }
        self.net().validate()
    }

    pub fn net(&self) -> NetConfig {
        let mut net = NetConfig::new(self.workers, self.slots, self.micro_batch);
        net.fault = self.fault.clone();
        net.switch_proc_ns = self.switch_proc_ns;
        net.link_gbps = self.link_gbps;
        net.horizon_ns = self.horizon_ns;
        net
    }

    /// Serialization time of one packet, zero without a line rate.
    pub fn packet_ns(&self) -> f64 {
        match self.link_gbps {
            Some(g) => ((wire_len(self.micro_batch) * 8) as f64 / g).ceil(),
            None => 0.0,
        }
    }

    /// Compute time for `samples` samples over `chunks` feature chunks.
    pub fn compute_ns(&self, samples: usize, chunks: usize) -> u64 {
        (samples.div_ceil(self.banks) * chunks) as u64 * self.precision as u64 * self.cycle_ns
    }
}

/// Inputs to the closed-form iteration time equations.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingParams {
    /// Model-parallel forward time of a whole mini-batch.
    pub t_f_mp: f64,
    pub t_b_mp: f64,
    /// Data-parallel forward and backward time of one worker's share.
    pub t_f_dp: f64,
    pub t_b_dp: f64,
    pub batch: f64,
    pub micro_batch: f64,
    pub features: f64,
    /// Elements per time unit; infinite when serialization is free.
    pub bandwidth: f64,
    /// One-way network latency term.
    pub t_l: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationTimes {
    pub dp: f64,
    pub vanilla_mp: f64,
    pub pipelined_mp: f64,
}

pub fn simulate_iteration_time(p: &TimingParams) -> IterationTimes {
    IterationTimes {
        dp: p.t_f_dp + p.t_b_dp / p.batch + p.features / p.bandwidth + p.t_l,
        vanilla_mp: p.t_f_mp + p.t_b_mp + p.batch / p.bandwidth + p.t_l,
        pipelined_mp: (p.micro_batch / p.batch) * p.t_f_mp + p.t_b_mp + p.micro_batch / p.bandwidth + p.t_l,
    }
}

/// Timing equation inputs matching what the event-driven trainer simulates
/// for `features` features.
pub fn timing_params(cfg: &TrainingConfig, features: usize) -> Result<TimingParams> {
    let mp = model_plan(cfg, features)?;
    let n = (cfg.batch / cfg.micro_batch) as f64;
    let (fwd, bwd) = micro_batch_times(cfg, &mp, 0);
    let worst = (0..cfg.workers).map(|m| micro_batch_times(cfg, &mp, m)).max().unwrap_or((fwd, bwd));
    let chunks_dp = features.div_ceil(LANES).div_ceil(cfg.engines);
    let share = cfg.batch.div_ceil(cfg.workers);
    let packet = cfg.packet_ns();
    Ok(TimingParams {
        t_f_mp: n * worst.0 as f64,
        t_b_mp: n * worst.1 as f64,
        t_f_dp: cfg.compute_ns(share, chunks_dp) as f64,
        t_b_dp: cfg.compute_ns(share, chunks_dp) as f64,
        batch: cfg.batch as f64,
        micro_batch: cfg.micro_batch as f64,
        features: features as f64,
        bandwidth: if packet == 0.0 { f64::INFINITY } else { cfg.micro_batch as f64 / packet },
        t_l: 2.0 * cfg.fault.latency_ns as f64 + cfg.switch_proc_ns as f64 + packet,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencySummary {
    pub p50_ns: u64,
    pub p99_ns: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub virtual_time_ns: u64,
    pub pkts: u64,
    pub bytes: u64,
    pub retx: u64,
    pub allreduce: LatencySummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainMetrics {
    /// Loss of the zero model.
    pub initial_loss: f64,
    pub epochs: Vec<EpochMetrics>,
    /// Virtual duration of every mini-batch iteration.
    pub iteration_ns: Vec<u64>,
    /// Network traffic between consecutive iteration ends. Acknowledgements of
    /// an iteration's last rounds can land in the next one.
    pub iteration_bytes: Vec<u64>,
    pub iteration_pkts: Vec<u64>,
    pub totals: NetStats,
}

impl TrainMetrics {
    /// Loss before training followed by the loss after every epoch.
    pub fn loss_curve(&self) -> Vec<f64> {
        std::iter::once(self.initial_loss).chain(self.epochs.iter().map(|e| e.loss)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,virtual_time_ns,pkts,bytes,retx,allreduce_p50_ns,allreduce_p99_ns\n");
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{:.9},{},{},{},{},{},{}\n",
                e.epoch, e.loss, e.virtual_time_ns, e.pkts, e.bytes, e.retx, e.allreduce.p50_ns, e.allreduce.p99_ns
            ));
        }
        out
    }
}

/// When each worker finished an update and started the following forward pass.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LockstepLog {
    /// `updates[i][m]`: time worker `m` applied mini-batch `i`'s update.
    pub updates: Vec<Vec<u64>>,
    /// `forward_starts[i][m]`: time worker `m` began mini-batch `i`'s forward pass.
    pub forward_starts: Vec<Vec<u64>>,
}

impl LockstepLog {
    /// No worker starts mini-batch `i + 1` before every worker updated for `i`.
    pub fn holds(&self) -> bool {
        self.updates.iter().zip(self.forward_starts.iter().skip(1)).all(|(upd, next)| {
            let last_update = upd.iter().copied().max().unwrap_or(0);
            next.iter().all(|&t| t >= last_update)
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    /// Final model, one weight per feature.
    pub model: Vec<Q16>,
    pub metrics: TrainMetrics,
    pub lockstep: LockstepLog,
}

fn model_plan(cfg: &TrainingConfig, features: usize) -> Result<Vec<Vec<Range<usize>>>> {
    let plan = plan_partitions(features, 0, cfg.workers, cfg.engines, PartitionMode::Model)?;
    Ok((0..cfg.workers).map(|m| plan.spans[m * cfg.engines..(m + 1) * cfg.engines].to_vec()).collect())
}

fn micro_batch_times(cfg: &TrainingConfig, plan: &[Vec<Range<usize>>], m: usize) -> (u64, u64) {
    let chunks = plan[m].iter().map(|s| s.len().div_ceil(LANES)).max().unwrap_or(0);
    let modelled = cfg.compute_ns(cfg.micro_batch, chunks);
    (cfg.forward_ns.unwrap_or(modelled), cfg.backward_ns.unwrap_or(modelled))
}

const FORWARD_DONE: u64 = 0;
const BACKWARD_DONE: u64 = 1;
const COMPUTE_DONE: u64 = 2;

fn token(kind: u64, index: usize) -> u64 {
    kind << 32 | index as u64
}

fn untoken(t: u64) -> (u64, usize) {
    (t >> 32, (t & 0xFFFF_FFFF) as usize)
}

/// Mini-batch bookkeeping shared by both training modes.
struct Progress<'a> {
    woven: &'a WovenMatrix,
    labels: &'a [Q16],
    cfg: &'a TrainingConfig,
    epoch: usize,
    batch_start: usize,
    iteration_started_ns: u64,
    at_barrier: usize,
    metrics: TrainMetrics,
    lockstep: LockstepLog,
    epoch_start: (NetStats, u64),
    iteration_start_stats: NetStats,
    done: bool,
}

impl<'a> Progress<'a> {
    fn new(woven: &'a WovenMatrix, labels: &'a [Q16], cfg: &'a TrainingConfig) -> Self {
        Progress {
            woven,
            labels,
            cfg,
            epoch: 0,
            batch_start: 0,
            iteration_started_ns: 0,
            at_barrier: 0,
            metrics: TrainMetrics::default(),
            lockstep: LockstepLog::default(),
            epoch_start: (NetStats::default(), 0),
            iteration_start_stats: NetStats::default(),
            done: cfg.epochs == 0,
        }
    }

    fn batch(&self) -> Range<usize> {
        self.batch_start..(self.batch_start + self.cfg.batch).min(self.woven.samples())
    }

    fn begin_iteration(&mut self, net: &Network) {
        self.iteration_started_ns = net.now();
        self.iteration_start_stats = net.stats();
        self.lockstep.forward_starts.push(vec![net.now(); self.cfg.workers]);
        self.lockstep.updates.push(vec![0; self.cfg.workers]);
    }

    fn record_update(&mut self, m: usize, now: u64) {
        if let Some(u) = self.lockstep.updates.last_mut() {
            u[m] = now;
        }
    }

    /// Closes the iteration. Returns true if another one should start.
    fn finish_iteration(&mut self, net: &Network, model: impl FnOnce() -> Vec<Q16>) -> bool {
        let stats = net.stats();
        self.metrics.iteration_ns.push(net.now() - self.iteration_started_ns);
        self.metrics.iteration_bytes.push(stats.bytes - self.iteration_start_stats.bytes);
        self.metrics.iteration_pkts.push(stats.sent - self.iteration_start_stats.sent);
        self.batch_start += self.cfg.batch;
        if self.batch_start < self.woven.samples() {
            return true;
        }
        let (start, first_round) = std::mem::replace(&mut self.epoch_start, (stats.clone(), net.rounds_sent(0)));
        let mut lat: Vec<u64> = net.round_records()[first_round as usize..]
            .iter()
            .filter(|r| r.fa_count == self.cfg.workers)
            .map(|r| r.last_fa_ns - r.first_send_ns)
            .collect();
        lat.sort_unstable();
        let model = model();
        self.metrics.epochs.push(EpochMetrics {
            epoch: self.epoch + 1,
            loss: training_loss(self.woven, self.labels, &model, self.cfg.precision, self.cfg.loss),
            virtual_time_ns: net.now(),
            pkts: stats.sent - start.sent,
            bytes: stats.bytes - start.bytes,
            retx: stats.retransmissions - start.retransmissions,
            allreduce: LatencySummary { p50_ns: percentile(&lat, 50.0), p99_ns: percentile(&lat, 99.0) },
        });
        self.epoch += 1;
        self.batch_start = 0;
        if self.epoch == self.cfg.epochs {
            self.done = true;
            return false;
        }
        true
    }
}

struct MpWorker {
    engines: Vec<ModelPartition>,
    grads: Vec<Vec<Q16>>,
    forward_ns: u64,
    backward_ns: u64,
    next_forward: usize,
    held: Vec<(usize, Vec<i32>)>,
    waiting: VecDeque<(usize, Vec<i32>)>,
    round_to_mb: HashMap<u64, usize>,
    fas: VecDeque<(usize, Vec<i32>)>,
    fa_received: usize,
    backward_busy: bool,
    backward_done: usize,
}

struct MpDriver<'a> {
    progress: Progress<'a>,
    workers: Vec<MpWorker>,
    micro_batches: usize,
}

impl<'a> MpDriver<'a> {
    fn micro_batch(&self, j: usize) -> Range<usize> {
        let b = self.progress.batch();
        let start = b.start + j * self.progress.cfg.micro_batch;
        start..(start + self.progress.cfg.micro_batch).min(b.end)
    }

    fn micro_batches_now(&self) -> usize {
        self.progress.batch().len().div_ceil(self.progress.cfg.micro_batch)
    }

    fn start_iteration(&mut self, net: &mut Network) {
        self.progress.begin_iteration(net);
        self.micro_batches = self.micro_batches_now();
        for (m, w) in self.workers.iter_mut().enumerate() {
            w.next_forward = 0;
            w.fa_received = 0;
            w.backward_done = 0;
            w.held.clear();
            net.wake_at(m, net.now() + w.forward_ns, token(FORWARD_DONE, 0));
        }
    }

    fn partial_activation(&self, m: usize, j: usize) -> Result<Vec<i32>> {
        let p = &self.progress;
        let mut pa = vec![0i32; p.cfg.micro_batch];
        for (k, t) in self.micro_batch(j).enumerate() {
            let mut acc = Q16::ZERO;
            for part in &self.workers[m].engines {
                acc += bit_serial_dot(p.woven, t, part, p.cfg.precision)?;
            }
            pa[k] = acc.0;
        }
        Ok(pa)
    }

    fn send(&mut self, net: &mut Network, m: usize, j: usize, pa: Vec<i32>) -> Result<()> {
        let w = &mut self.workers[m];
        if !w.waiting.is_empty() {
            w.waiting.push_back((j, pa));
            return Ok(());
        }
        match net.send_pa(m, pa.clone())? {
            Some(SentPa { round, .. }) => {
                w.round_to_mb.insert(round, j);
            }
            None => w.waiting.push_back((j, pa)),
        }
        Ok(())
    }

    fn flush(&mut self, net: &mut Network, m: usize) -> Result<()> {
        while let Some((j, pa)) = self.workers[m].waiting.pop_front() {
            match net.send_pa(m, pa.clone())? {
                Some(SentPa { round, .. }) => {
                    self.workers[m].round_to_mb.insert(round, j);
                }
                None => {
                    self.workers[m].waiting.push_front((j, pa));
                    break;
                }
            }
        }
        Ok(())
    }

    fn maybe_start_backward(&mut self, net: &mut Network, m: usize) {
        let vanilla = self.progress.cfg.schedule == Schedule::Vanilla;
        let w = &mut self.workers[m];
        if w.backward_busy || w.fas.is_empty() || (vanilla && w.fa_received < self.micro_batches) {
            return;
        }
        w.backward_busy = true;
        let j = w.fas.front().map(|f| f.0).unwrap_or(0);
        net.wake_at(m, net.now() + w.backward_ns, token(BACKWARD_DONE, j));
    }

    fn backward(&mut self, m: usize, j: usize, fa: &[i32]) -> Result<()> {
        let samples = self.micro_batch(j);
        let p = &self.progress;
        let w = &mut self.workers[m];
        for (k, t) in samples.enumerate() {
            let scale = p.cfg.learning_rate.wrapping_mul(df(p.cfg.loss, Q16(fa[k]), p.labels[t]));
            for (part, g) in w.engines.iter().zip(w.grads.iter_mut()) {
                backward_accumulate(g, part.start, p.woven, t, scale, p.cfg.precision)?;
            }
        }
        Ok(())
    }

    fn assembled_model(&self) -> Vec<Q16> {
        self.workers.iter().flat_map(|w| w.engines.iter().flat_map(|e| e.weights.iter().copied())).collect()
    }
}

impl Driver for MpDriver<'_> {
    fn start(&mut self, net: &mut Network) -> Result<()> {
        if !self.progress.done {
            self.start_iteration(net);
        }
        Ok(())
    }

    fn on_fa(&mut self, net: &mut Network, worker: usize, sent: SentPa, fa: &[i32]) -> Result<()> {
        let j = self.workers[worker]
            .round_to_mb
            .remove(&sent.round)
            .ok_or_else(|| Error::Consistency(format!("worker {worker} got an FA for unknown round {}", sent.round)))?;
        let w = &mut self.workers[worker];
        w.fas.push_back((j, fa.to_vec()));
        w.fa_received += 1;
        self.maybe_start_backward(net, worker);
        Ok(())
    }

    fn on_slot_freed(&mut self, net: &mut Network, worker: usize, _slot: u16) -> Result<()> {
        self.flush(net, worker)
    }

    fn on_wake(&mut self, net: &mut Network, m: usize, tok: u64) -> Result<()> {
        let (kind, j) = untoken(tok);
        match kind {
            FORWARD_DONE => {
                let pa = self.partial_activation(m, j)?;
                self.workers[m].next_forward = j + 1;
                match self.progress.cfg.schedule {
                    Schedule::Pipelined => self.send(net, m, j, pa)?,
                    Schedule::Vanilla => self.workers[m].held.push((j, pa)),
                }
                if j + 1 < self.micro_batches {
                    net.wake_at(m, net.now() + self.workers[m].forward_ns, token(FORWARD_DONE, j + 1));
                } else if self.progress.cfg.schedule == Schedule::Vanilla {
                    for (j, pa) in std::mem::take(&mut self.workers[m].held) {
                        self.send(net, m, j, pa)?;
                    }
                }
            }
            BACKWARD_DONE => {
                let (jj, fa) = self.workers[m]
                    .fas
                    .pop_front()
                    .ok_or_else(|| Error::Consistency(format!("worker {m} finished a backward pass it never started")))?;
                debug_assert_eq!(jj, j);
                self.backward(m, jj, &fa)?;
                let w = &mut self.workers[m];
                w.backward_busy = false;
                w.backward_done += 1;
                if w.backward_done < self.micro_batches {
                    self.maybe_start_backward(net, m);
                    return Ok(());
                }
                let batch = self.progress.cfg.batch;
                for (part, g) in w.engines.iter_mut().zip(w.grads.iter_mut()) {
                    model_update(&mut part.weights, g, batch)?;
                    g.fill(Q16::ZERO);
                }
                self.progress.record_update(m, net.now());
                self.progress.at_barrier += 1;
                if self.progress.at_barrier == self.workers.len() {
                    self.progress.at_barrier = 0;
                    let model = self.assembled_model();
                    if self.progress.finish_iteration(net, || model) {
                        self.start_iteration(net);
                    }
                }
            }
            other => return Err(Error::Consistency(format!("unexpected wake kind {other}"))),
        }
        Ok(())
    }

    fn is_done(&self) -> bool {
        self.progress.done
    }
}

fn check_inputs(woven: &WovenMatrix, labels: &[Q16], cfg: &TrainingConfig) -> Result<()> {
    cfg.validate()?;
    if labels.len() != woven.samples() {
        return Err(Error::Data(format!("{} labels for {} samples", labels.len(), woven.samples())));
    }
    if woven.samples() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(())
}

/// Model-parallel training over the simulated switch.
pub fn train_model_parallel(woven: &WovenMatrix, labels: &[Q16], cfg: &TrainingConfig) -> Result<TrainOutcome> {
    check_inputs(woven, labels, cfg)?;
    let plan = model_plan(cfg, woven.features())?;
    let workers = plan
        .iter()
        .enumerate()
        .map(|(m, spans)| {
            let (forward_ns, backward_ns) = micro_batch_times(cfg, &plan, m);
            MpWorker {
                engines: spans.iter().map(|s| ModelPartition::zeros(s.clone())).collect(),
                grads: spans.iter().map(|s| vec![Q16::ZERO; s.len()]).collect(),
                forward_ns,
                backward_ns,
                next_forward: 0,
                held: Vec::new(),
                waiting: VecDeque::new(),
                round_to_mb: HashMap::new(),
                fas: VecDeque::new(),
                fa_received: 0,
                backward_busy: false,
                backward_done: 0,
            }
        })
        .collect();
    let mut driver = MpDriver { progress: Progress::new(woven, labels, cfg), workers, micro_batches: 0 };
    let zero = vec![Q16::ZERO; woven.features()];
    driver.progress.metrics.initial_loss = training_loss(woven, labels, &zero, cfg.precision, cfg.loss);
    let report = run(cfg.net(), &mut driver)?;
    if let Some(a) = report.anomalies.first() {
        return Err(Error::Consistency(format!("network delivered a wrong aggregate: {a:?}")));
    }
    driver.progress.metrics.totals = report.stats;
    let model = driver.assembled_model();
    Ok(TrainOutcome { model, metrics: driver.progress.metrics, lockstep: driver.progress.lockstep })
}

struct DpWorker {
    model: ModelPartition,
    grad: Vec<Q16>,
    sum: Vec<Q16>,
    compute_ns: u64,
    next_packet: usize,
    round_to_packet: HashMap<u64, usize>,
    received: usize,
}

struct DpDriver<'a> {
    progress: Progress<'a>,
    workers: Vec<DpWorker>,
    packets: usize,
    chunks_per_engine: usize,
}

impl<'a> DpDriver<'a> {
    fn start_iteration(&mut self, net: &mut Network) -> Result<()> {
        self.progress.begin_iteration(net);
        let batch = self.progress.batch();
        let plan = plan_partitions(0, batch.len(), self.workers.len(), 1, PartitionMode::Data)?;
        for (m, span) in plan.spans.iter().enumerate() {
            let samples = batch.start + span.start..batch.start + span.end;
            self.local_gradient(m, samples.clone())?;
            let cfg = self.progress.cfg;
            let ns = cfg.forward_ns.unwrap_or(cfg.compute_ns(samples.len(), self.chunks_per_engine))
                + cfg.backward_ns.unwrap_or(cfg.compute_ns(samples.len(), self.chunks_per_engine));
            let w = &mut self.workers[m];
            w.compute_ns = ns;
            w.next_packet = 0;
            w.received = 0;
            net.wake_at(m, net.now() + ns, token(COMPUTE_DONE, 0));
        }
        Ok(())
    }

    fn local_gradient(&mut self, m: usize, samples: Range<usize>) -> Result<()> {
        let p = &self.progress;
        let w = &mut self.workers[m];
        for t in samples {
            let a = bit_serial_dot(p.woven, t, &w.model, p.cfg.precision)?;
            let scale = p.cfg.learning_rate.wrapping_mul(df(p.cfg.loss, a, p.labels[t]));
            backward_accumulate(&mut w.grad, 0, p.woven, t, scale, p.cfg.precision)?;
        }
        Ok(())
    }

    fn pump(&mut self, net: &mut Network, m: usize) -> Result<()> {
        let mb = self.progress.cfg.micro_batch;
        while self.workers[m].next_packet < self.packets {
            let w = &mut self.workers[m];
            let i = w.next_packet;
            let mut payload = vec![0i32; mb];
            for (dst, g) in payload.iter_mut().zip(w.grad.iter().skip(i * mb)) {
                *dst = g.0;
            }
            match net.send_pa(m, payload)? {
                Some(SentPa { round, .. }) => {
                    w.round_to_packet.insert(round, i);
                    w.next_packet += 1;
                }
                None => break,
            }
        }
        Ok(())
    }
}

impl Driver for DpDriver<'_> {
    fn start(&mut self, net: &mut Network) -> Result<()> {
        if !self.progress.done {
            self.start_iteration(net)?;
        }
        Ok(())
    }

    fn on_fa(&mut self, net: &mut Network, m: usize, sent: SentPa, fa: &[i32]) -> Result<()> {
        let mb = self.progress.cfg.micro_batch;
        let w = &mut self.workers[m];
        let i = w
            .round_to_packet
            .remove(&sent.round)
            .ok_or_else(|| Error::Consistency(format!("worker {m} got an FA for unknown round {}", sent.round)))?;
        for (dst, v) in w.sum.iter_mut().skip(i * mb).zip(fa) {
            *dst = Q16(*v);
        }
        w.received += 1;
        if w.received < self.packets {
            return Ok(());
        }
        let batch = self.progress.cfg.batch;
        model_update(&mut w.model.weights, &w.sum, batch)?;
        w.grad.fill(Q16::ZERO);
        self.progress.record_update(m, net.now());
        self.progress.at_barrier += 1;
        if self.progress.at_barrier < self.workers.len() {
            return Ok(());
        }
        self.progress.at_barrier = 0;
        let reference = &self.workers[0].model.weights;
        if let Some(bad) = self.workers.iter().position(|w| &w.model.weights != reference) {
            return Err(Error::Consistency(format!("replica on worker {bad} diverged from worker 0")));
        }
        let model = reference.clone();
        if self.progress.finish_iteration(net, || model) {
            self.start_iteration(net)?;
        }
        Ok(())
    }

    fn on_slot_freed(&mut self, net: &mut Network, worker: usize, _slot: u16) -> Result<()> {
        self.pump(net, worker)
    }

    fn on_wake(&mut self, net: &mut Network, m: usize, tok: u64) -> Result<()> {
        match untoken(tok) {
            (COMPUTE_DONE, _) => self.pump(net, m),
            (other, _) => Err(Error::Consistency(format!("unexpected wake kind {other}"))),
        }
    }

    fn is_done(&self) -> bool {
        self.progress.done
    }
}

/// Data-parallel training: gradients are AllReduced through the switch in
/// `ceil(D / MB)` packets per mini-batch.
pub fn train_data_parallel(woven: &WovenMatrix, labels: &[Q16], cfg: &TrainingConfig) -> Result<TrainOutcome> {
    check_inputs(woven, labels, cfg)?;
    if !cfg.workers.is_power_of_two() {
        return Err(Error::Config(format!("data-parallel worker count {} is not a power of two", cfg.workers)));
    }
    batch_shift(cfg.batch)?;
    if cfg.batch < cfg.workers {
        return Err(Error::Config(format!("mini-batch {} is smaller than {} workers", cfg.batch, cfg.workers)));
    }
    if !woven.samples().is_multiple_of(cfg.batch) && woven.samples() % cfg.batch < cfg.workers {
        return Err(Error::Config(format!(
            "trailing mini-batch of {} samples cannot be split across {} workers",
            woven.samples() % cfg.batch,
            cfg.workers
        )));
    }
    let d = woven.features();
    let workers = (0..cfg.workers)
        .map(|_| DpWorker {
            model: ModelPartition::zeros(0..d),
            grad: vec![Q16::ZERO; d],
            sum: vec![Q16::ZERO; d],
            compute_ns: 0,
            next_packet: 0,
            round_to_packet: HashMap::new(),
            received: 0,
        })
        .collect();
    let mut driver = DpDriver {
        progress: Progress::new(woven, labels, cfg),
        workers,
        packets: d.div_ceil(cfg.micro_batch),
        chunks_per_engine: d.div_ceil(LANES).div_ceil(cfg.engines),
    };
    driver.progress.metrics.initial_loss = training_loss(woven, labels, &vec![Q16::ZERO; d], cfg.precision, cfg.loss);
    let report = run(cfg.net(), &mut driver)?;
    if let Some(a) = report.anomalies.first() {
        return Err(Error::Consistency(format!("network delivered a wrong aggregate: {a:?}")));
    }
    driver.progress.metrics.totals = report.stats;
    let model = driver.workers[0].model.weights.clone();
    Ok(TrainOutcome { model, metrics: driver.progress.metrics, lockstep: driver.progress.lockstep })
}

/// Closed-form bytes on the wire per model-parallel iteration without loss:
/// every round moves `W` partial activations, `W` full activations, `W`
/// acknowledgements and `W` confirmations.
pub fn mp_bytes_per_iteration(cfg: &TrainingConfig) -> u64 {
    ((cfg.batch / cfg.micro_batch) * 4 * cfg.workers * wire_len(cfg.micro_batch)) as u64
}

/// The same for data parallelism over `features` features.
pub fn dp_bytes_per_iteration(cfg: &TrainingConfig, features: usize) -> u64 {
    (features.div_ceil(cfg.micro_batch) * 4 * cfg.workers * wire_len(cfg.micro_batch)) as u64
}
