//! Fuzz the aggregation protocol under loss, duplication and reordering and
//! check exactly-once delivery against the ground-truth sums.

use innet_sgd::netsim::{fuzz_protocol, FaultModel, NetConfig};

fn main() -> innet_sgd::Result<()> {
    for seed in 0..5 {
        let mut cfg = NetConfig::new(8, 16, 8);
        cfg.fault = FaultModel { drop_prob: 0.1, dup_prob: 0.05, latency_ns: 500, jitter_ns: 500, seed };
        cfg.horizon_ns = 1_000_000_000;
        let r = fuzz_protocol(&cfg, 1000)?;
        println!(
            "seed {seed}: passed={} rounds={}/{} sent={} dropped={} duplicated={} reordered={} retx={} p50={}ns p99={}ns",
            r.passed,
            r.rounds_complete,
            r.rounds_expected,
            r.stats.sent,
            r.stats.dropped,
            r.stats.duplicated,
            r.stats.reordered,
            r.stats.retransmissions,
            r.latency.p50_ns,
            r.latency.p99_ns
        );
    }
    Ok(())
}
