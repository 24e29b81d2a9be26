use innet_sgd::netsim::{fuzz_protocol, FaultModel, NetConfig, Topology};
use innet_sgd::switch_agg::Mutation;
use proptest::prelude::*;

fn lossy(workers: usize, slots: usize, mb: usize, seed: u64) -> NetConfig {
    let mut cfg = NetConfig::new(workers, slots, mb);
    cfg.fault = FaultModel { drop_prob: 0.15, dup_prob: 0.1, latency_ns: 400, jitter_ns: 300, seed };
    cfg.horizon_ns = 2_000_000_000;
    cfg
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn every_round_delivers_the_exact_sum_once(
        workers in 1usize..=12,
        slots in 1usize..=24,
        mb in 1usize..=16,
        drop in 0.0f64..0.3,
        dup in 0.0f64..0.2,
        jitter in 0u64..=600,
        endhost in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut cfg = lossy(workers, slots, mb, seed);
        cfg.fault.drop_prob = drop;
        cfg.fault.dup_prob = dup;
        cfg.fault.jitter_ns = jitter;
        cfg.fault.latency_ns = 500;
        if endhost {
            cfg.topology = Topology::Endhost { host_proc_ns: 300 };
        }
        let r = fuzz_protocol(&cfg, 150).unwrap();
        prop_assert!(r.passed, "{:?} {:?}", r.failure, r.anomalies.first());
        prop_assert_eq!(r.rounds_complete, 150);
        prop_assert!(r.stats.delivered + r.stats.dropped >= r.stats.sent);
    }
}

#[test]
fn both_checker_mutations_are_caught() {
    for mutation in [Mutation::SkipAggDuplicateCheck, Mutation::SkipAckDuplicateCheck] {
        let caught = (0..5).any(|seed| {
            let mut cfg = lossy(4, 8, 4, seed);
            cfg.mutation = Some(mutation);
            cfg.horizon_ns = 5_000_000;
            !fuzz_protocol(&cfg, 300).unwrap().passed
        });
        assert!(caught, "{mutation:?} went unnoticed");
    }
}

#[test]
fn fuzzing_is_reproducible_per_seed() {
    let a = fuzz_protocol(&lossy(6, 8, 8, 42), 200).unwrap();
    let b = fuzz_protocol(&lossy(6, 8, 8, 42), 200).unwrap();
    assert_eq!(a.stats, b.stats);
    assert_eq!(a.latency, b.latency);
    let c = fuzz_protocol(&lossy(6, 8, 8, 43), 200).unwrap();
    assert_ne!(a.stats, c.stats);
}
