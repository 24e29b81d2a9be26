//! Acceptance criteria. Each test prints one `criterion N: PASS|FAIL` line
//! straight to stderr so it shows up even when output is captured.

use std::io::Write;
use std::time::{Duration, Instant};

use innet_sgd::costmodel::{th_all, th_comp, th_mem, CostParams};
use innet_sgd::glm::{
    backward_accumulate, bit_serial_dot, df, reference_sgd, reference_sgd_silent, weave, LossKind, ModelPartition, WovenMatrix, LANES,
};
use innet_sgd::ingest::{normalize_quantize, synthetic_blobs, Dataset};
use innet_sgd::netsim::{allreduce_latency, fuzz_protocol, FaultModel, NetConfig, Topology};
use innet_sgd::trainer::{
    simulate_iteration_time, timing_params, train_data_parallel, train_model_parallel, Schedule, TrainOutcome,
    TrainingConfig,
};
use innet_sgd::wire::{Feature, Q16};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(n: u32, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} | {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn blobs() -> Dataset {
    normalize_quantize(&synthetic_blobs(1024, 4096, 10.0, 7), LossKind::Squared).unwrap()
}

fn base_cfg(epochs: usize) -> TrainingConfig {
    TrainingConfig { batch: 64, micro_batch: 8, precision: 4, learning_rate: Q16(64), epochs, ..Default::default() }
}

#[derive(Clone)]
enum Run {
    Mp { workers: usize, engines: usize, lossy: bool },
    Dp { workers: usize },
}

impl Run {
    fn label(&self) -> String {
        match self {
            Run::Mp { workers, engines, lossy } => {
                format!("mp M={workers} N={engines}{}", if *lossy { " drop=0.1" } else { "" })
            }
            Run::Dp { workers } => format!("dp M={workers}"),
        }
    }

    fn train(&self, woven: &WovenMatrix, labels: &[Q16], epochs: usize) -> TrainOutcome {
        let mut cfg = base_cfg(epochs);
        match *self {
            Run::Mp { workers, engines, lossy } => {
                cfg.workers = workers;
                cfg.engines = engines;
                if lossy {
                    cfg.fault = FaultModel { drop_prob: 0.1, dup_prob: 0.05, latency_ns: 500, jitter_ns: 200, seed: 11 };
                }
                train_model_parallel(woven, labels, &cfg).unwrap()
            }
            Run::Dp { workers } => {
                cfg.workers = workers;
                train_data_parallel(woven, labels, &cfg).unwrap()
            }
        }
    }
}

fn synchronous_runs() -> Vec<Run> {
    let mut runs = Vec::new();
    for workers in [1, 2, 4, 8] {
        for engines in [1, 8] {
            runs.push(Run::Mp { workers, engines, lossy: false });
        }
    }
    runs.push(Run::Mp { workers: 8, engines: 1, lossy: true });
    for workers in [1, 2, 4] {
        runs.push(Run::Dp { workers });
    }
    runs
}

fn train_all(woven: &WovenMatrix, labels: &[Q16], epochs: usize) -> Vec<(String, TrainOutcome)> {
    let runs = synchronous_runs();
    std::thread::scope(|scope| {
        let handles: Vec<_> = runs
            .iter()
            .map(|r| scope.spawn(move || (r.label(), r.train(woven, labels, epochs))))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

#[test]
fn criterion_1_exactly_once_under_loss() {
    let start = Instant::now();
    let mut failures = Vec::new();
    let (mut retx, mut reordered) = (0, 0);
    for seed in 0..10 {
        let mut cfg = NetConfig::new(8, 16, 8);
        cfg.fault = FaultModel { drop_prob: 0.1, dup_prob: 0.05, latency_ns: 500, jitter_ns: 500, seed };
        cfg.horizon_ns = 1_000_000_000;
        let r = fuzz_protocol(&cfg, 1000).unwrap();
        retx += r.stats.retransmissions;
        reordered += r.stats.reordered;
        if !(r.passed && r.rounds_complete == 1000 && r.anomalies.is_empty()) {
            failures.push((seed, r.failure, r.anomalies.len()));
        }
    }
    let elapsed = start.elapsed();
    report(
        1,
        failures.is_empty() && reordered > 0 && retx > 0 && elapsed < Duration::from_secs(60),
        format!(
            "10 seeds x 1000 rounds, W=8 N=16 MB=8 drop=0.1 dup=0.05 jitter=500ns: failures {failures:?}, \
             {retx} retransmissions, {reordered} reordered deliveries, {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_2_strong_scaling_equivalence() {
    let start = Instant::now();
    let data = blobs();
    let woven = data.weave();
    let reference = reference_sgd_silent(&woven, &data.labels, &base_cfg(5).sgd()).unwrap();
    let results = train_all(&woven, &data.labels, 5);
    let differing: Vec<&str> =
        results.iter().filter(|(_, o)| o.model != reference.model).map(|(l, _)| l.as_str()).collect();
    let lockstep_ok = results.iter().all(|(_, o)| o.lockstep.holds());
    let elapsed = start.elapsed();
    report(
        2,
        differing.is_empty() && lockstep_ok && elapsed < Duration::from_secs(300),
        format!(
            "{} distributed runs vs reference after 5 epochs, differing: {differing:?}, lock-step held: {lockstep_ok}, {:.1}s",
            results.len(),
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn criterion_3_convergence() {
    let data = blobs();
    let woven = data.weave();
    let reference = reference_sgd(&woven, &data.labels, &base_cfg(50).sgd()).unwrap();
    let results = train_all(&woven, &data.labels, 50);
    let curve = reference.losses.clone();
    let (initial, last) = (curve[0], *curve.last().unwrap());
    let differing: Vec<&str> =
        results.iter().filter(|(_, o)| o.metrics.loss_curve() != curve).map(|(l, _)| l.as_str()).collect();
    report(
        3,
        curve.len() == 51 && last < 0.5 * initial && differing.is_empty(),
        format!(
            "loss {initial:.4} -> {last:.4} (ratio {:.3}) over 50 epochs; curves differing from reference: {differing:?}",
            last / initial
        ),
    );
}

#[test]
fn criterion_4_cost_model_golden_values() {
    let table = [(1, 10.2), (2, 13.3), (3, 13.8), (4, 14.8), (8, 14.8)];
    let mem_ok = table.iter().all(|&(s, v)| th_mem(s).unwrap() == v);
    let comp = th_comp(&CostParams::new(1, 1, 65536, 64, 4)).unwrap();
    let comp_ok = (comp - 18.605).abs() <= 0.001;
    let base = th_all(&CostParams::new(1, 1, 1_000_000, 16, 4)).unwrap();
    let ratios: Vec<(u64, f64)> =
        [2, 4, 8].iter().map(|&f| (f, th_all(&CostParams::new(f, 1, 1_000_000, 16, 4)).unwrap() / base)).collect();
    let linear_ok = ratios.iter().all(|&(f, r)| r >= 0.9 * f as f64);
    report(
        4,
        mem_ok && comp_ok && linear_ok,
        format!("th_mem table exact: {mem_ok}; th_comp = {comp:.4}; th_all(F)/th_all(1) at G=1: {ratios:?}"),
    );
}

#[test]
fn criterion_5_timing_equation_fidelity() {
    let mut cells = Vec::new();
    let mut ok = true;
    let mut speedups = std::collections::BTreeMap::<usize, Vec<f64>>::new();
    for batch in [32, 64, 128] {
        for mb in [4, 8, 16] {
            let data = normalize_quantize(&synthetic_blobs(2 * batch, 4096, 10.0, 7), LossKind::Squared).unwrap();
            let woven = data.weave();
            let cfg = TrainingConfig {
                workers: 4,
                batch,
                micro_batch: mb,
                link_gbps: Some(10.0),
                ..base_cfg(1)
            };
            let eq = simulate_iteration_time(&timing_params(&cfg, 4096).unwrap());
            let measure = |schedule| {
                let out = train_model_parallel(&woven, &data.labels, &TrainingConfig { schedule, ..cfg.clone() }).unwrap();
                out.metrics.iteration_ns.iter().map(|&t| t as f64).fold(0.0, f64::max)
            };
            let (pipe, van) = (measure(Schedule::Pipelined), measure(Schedule::Vanilla));
            let pipe_err = (pipe - eq.pipelined_mp).abs() / eq.pipelined_mp;
            let van_err = (van - eq.vanilla_mp).abs() / eq.vanilla_mp;
            ok &= pipe_err <= 0.05 && van_err <= 0.05 && pipe <= van;
            speedups.entry(mb).or_default().push(van / pipe);
            cells.push(format!("B={batch} MB={mb}: pipe {pipe}/{:.0} vanilla {van}/{:.0}", eq.pipelined_mp, eq.vanilla_mp));
        }
    }
    let trend_ok = speedups.values().all(|s| s.windows(2).all(|w| w[1] >= w[0]));
    let trend: Vec<String> =
        speedups.iter().map(|(mb, s)| format!("MB={mb}: {}", s.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" "))).collect();
    report(
        5,
        ok && trend_ok,
        format!("measured/equation ns: [{}]; speedup over B=32,64,128: [{}]", cells.join("; "), trend.join("; ")),
    );
}

#[test]
fn criterion_6_sub_rtt_latency() {
    let mut lines = Vec::new();
    let mut ok = true;
    for host_proc_ns in [2000, 0] {
        let base = NetConfig::new(8, 16, 8);
        let (sw, _) = allreduce_latency(&base, 50).unwrap();
        let mut eh_cfg = base.clone();
        eh_cfg.topology = Topology::Endhost { host_proc_ns };
        let (eh, _) = allreduce_latency(&eh_cfg, 50).unwrap();
        ok &= sw.p50_ns as f64 <= 0.55 * eh.p50_ns as f64 && sw.p99_ns == sw.p50_ns && eh.p99_ns == eh.p50_ns;
        lines.push(format!(
            "host proc {host_proc_ns}ns: in-switch p50/p99 {}/{} endhost {}/{} ratio {:.3}",
            sw.p50_ns,
            sw.p99_ns,
            eh.p50_ns,
            eh.p99_ns,
            sw.p50_ns as f64 / eh.p50_ns as f64
        ));
    }
    report(6, ok, lines.join("; "));
}

#[test]
fn criterion_7_wire_traffic_ratio() {
    let data = blobs();
    let woven = data.weave();
    let cfg = TrainingConfig { workers: 4, ..base_cfg(1) };
    let per_iter = |o: &TrainOutcome| o.metrics.totals.bytes as f64 / o.metrics.iteration_ns.len() as f64;
    let mp = per_iter(&train_model_parallel(&woven, &data.labels, &cfg).unwrap());
    let dp = per_iter(&train_data_parallel(&woven, &data.labels, &cfg).unwrap());
    let expected = 4096.0 / 64.0;
    let ratio = dp / mp;
    report(
        7,
        (ratio - expected).abs() <= 0.1 * expected,
        format!("bytes/iteration dp {dp:.0} mp {mp:.0}, ratio {ratio:.3} vs D/B = {expected}"),
    );
}

fn direct_dot(weights: &[i32], features: &[u8]) -> i32 {
    weights.iter().zip(features).fold(0i32, |acc, (&w, &f)| acc.wrapping_add(((w as i64 * f as i64) >> 8) as i32))
}

#[test]
fn criterion_8_numeric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let mut dot_mismatch = 0;
    for _ in 0..10_000 {
        let d = rng.gen_range(1..=200);
        let f: Vec<u8> = (0..d).map(|_| rng.gen()).collect();
        let w: Vec<i32> = (0..d).map(|_| rng.gen()).collect();
        let woven = weave(&f.iter().map(|&v| Feature(v)).collect::<Vec<_>>(), 1, d);
        let part = ModelPartition { start: 0, weights: w.iter().map(|&v| Q16(v)).collect() };
        if bit_serial_dot(&woven, 0, &part, 8).unwrap().0 != direct_dot(&w, &f) {
            dot_mismatch += 1;
        }
    }

    let mut additivity_failures = 0;
    let mut splits = 0;
    for _ in 0..300 {
        let ways = [2usize, 4, 8][rng.gen_range(0..3)];
        let chunks = rng.gen_range(ways..=ways * 3);
        let d = chunks * LANES - rng.gen_range(0..LANES);
        let samples = 3;
        let rows: Vec<Feature> = (0..samples * d).map(|_| Feature(rng.gen())).collect();
        let woven = weave(&rows, samples, d);
        let weights: Vec<Q16> = (0..d).map(|_| Q16(rng.gen())).collect();
        let mut cuts: Vec<usize> = rand::seq::index::sample(&mut rng, chunks - 1, ways - 1).into_iter().map(|c| (c + 1) * LANES).collect();
        cuts.sort_unstable();
        let bounds: Vec<usize> = std::iter::once(0).chain(cuts).chain(std::iter::once(d)).collect();
        let s = rng.gen_range(1..=8);
        for t in 0..samples {
            let whole = bit_serial_dot(&woven, t, &ModelPartition { start: 0, weights: weights.clone() }, s).unwrap();
            let sum = bounds.windows(2).fold(Q16::ZERO, |acc, b| {
                let part = ModelPartition { start: b[0], weights: weights[b[0]..b[1]].to_vec() };
                acc + bit_serial_dot(&woven, t, &part, s).unwrap()
            });
            splits += 1;
            if sum != whole {
                additivity_failures += 1;
            }
        }
    }

    let tolerance = 1.0 / 256.0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = rng.gen_range(1..=64);
        let b = 1usize << rng.gen_range(0..=3);
        let rows: Vec<Feature> = (0..b * d).map(|_| Feature(rng.gen())).collect();
        let woven = weave(&rows, b, d);
        let model: Vec<Q16> = (0..d).map(|_| Q16::from_real(rng.gen_range(-1.0..1.0)).unwrap()).collect();
        let labels: Vec<Q16> = (0..b).map(|_| Q16::from_real(rng.gen_range(-1.0..1.0)).unwrap()).collect();
        let part = ModelPartition { start: 0, weights: model.clone() };
        let mut grad = vec![Q16::ZERO; d];
        let mut real = vec![0.0f64; d];
        for t in 0..b {
            let a = bit_serial_dot(&woven, t, &part, 8).unwrap();
            backward_accumulate(&mut grad, 0, &woven, t, df(LossKind::Squared, a, labels[t]), 8).unwrap();
            let x: Vec<f64> = rows[t * d..(t + 1) * d].iter().map(|f| f.to_real()).collect();
            let a_real: f64 = x.iter().zip(&model).map(|(x, w)| x * w.to_real()).sum();
            let residual = a_real - labels[t].to_real();
            for (g, x) in real.iter_mut().zip(&x) {
                *g += residual * x / b as f64;
            }
        }
        for (g, r) in grad.iter().zip(&real) {
            worst = worst.max((g.shr(b.trailing_zeros()).to_real() - r).abs());
        }
    }

    report(
        8,
        dot_mismatch == 0 && additivity_failures == 0 && worst <= tolerance,
        format!(
            "s=8 dot mismatches {dot_mismatch}/10000; additivity failures {additivity_failures}/{splits}; \
             worst gradient error {worst:.2e} (bound {tolerance:.2e})"
        ),
    );
}
