use innet_sgd::glm::{reference_sgd, LossKind};
use innet_sgd::ingest::{normalize_quantize, synthetic_blobs};
use innet_sgd::netsim::FaultModel;
use innet_sgd::trainer::{train_data_parallel, train_model_parallel, Schedule, TrainingConfig};
use innet_sgd::wire::Q16;
use proptest::prelude::*;

fn cfg(loss: LossKind) -> TrainingConfig {
    TrainingConfig { batch: 16, micro_batch: 4, epochs: 2, learning_rate: Q16(512), loss, ..Default::default() }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn model_is_invariant_to_workers_engines_and_faults(
        workers in 1usize..=4,
        engines in 1usize..=2,
        features in 512usize..700,
        drop in 0.0f64..0.2,
        jitter in 0u64..300,
        seed in any::<u64>(),
        logistic in any::<bool>(),
        vanilla in any::<bool>(),
    ) {
        let loss = if logistic { LossKind::Logistic } else { LossKind::Squared };
        let data = normalize_quantize(&synthetic_blobs(40, features, 5.0, seed), loss).unwrap();
        let woven = data.weave();
        let mut c = cfg(loss);
        let reference = reference_sgd(&woven, &data.labels, &c.sgd()).unwrap();
        c.workers = workers;
        c.engines = engines;
        c.schedule = if vanilla { Schedule::Vanilla } else { Schedule::Pipelined };
        c.fault = FaultModel { drop_prob: drop, dup_prob: drop / 2.0, latency_ns: 500, jitter_ns: jitter, seed };
        let out = train_model_parallel(&woven, &data.labels, &c).unwrap();
        prop_assert_eq!(&out.model, &reference.model);
        prop_assert_eq!(out.metrics.loss_curve(), reference.losses.clone());
        prop_assert!(out.lockstep.holds());
        let times: Vec<u64> = out.metrics.epochs.iter().map(|e| e.virtual_time_ns).collect();
        prop_assert!(times.windows(2).all(|w| w[0] < w[1]));

        c.workers = 1 << (workers - 1).min(2);
        let dp = train_data_parallel(&woven, &data.labels, &c).unwrap();
        prop_assert_eq!(&dp.model, &reference.model);
    }
}

#[test]
fn trailing_partial_mini_batch_matches_reference() {
    let data = normalize_quantize(&synthetic_blobs(45, 256, 5.0, 1), LossKind::Squared).unwrap();
    let woven = data.weave();
    let c = TrainingConfig { workers: 2, ..cfg(LossKind::Squared) };
    let reference = reference_sgd(&woven, &data.labels, &c.sgd()).unwrap();
    assert_eq!(train_model_parallel(&woven, &data.labels, &c).unwrap().model, reference.model);
    assert_eq!(train_data_parallel(&woven, &data.labels, &c).unwrap().model, reference.model);
}

#[test]
fn small_slot_pool_throttles_but_stays_exact() {
    let data = normalize_quantize(&synthetic_blobs(64, 256, 5.0, 2), LossKind::Squared).unwrap();
    let woven = data.weave();
    let roomy = TrainingConfig { workers: 2, ..cfg(LossKind::Squared) };
    let tight = TrainingConfig { slots: 2, ..roomy.clone() };
    let reference = reference_sgd(&woven, &data.labels, &roomy.sgd()).unwrap();
    let a = train_model_parallel(&woven, &data.labels, &roomy).unwrap();
    let b = train_model_parallel(&woven, &data.labels, &tight).unwrap();
    assert_eq!(a.model, reference.model);
    assert_eq!(b.model, reference.model);
    assert!(b.metrics.iteration_ns.iter().sum::<u64>() > a.metrics.iteration_ns.iter().sum::<u64>());
    let dp = train_data_parallel(&woven, &data.labels, &tight).unwrap();
    assert_eq!(dp.model, reference.model);
}
