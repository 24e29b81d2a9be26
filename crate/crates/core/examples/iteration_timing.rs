//! Closed-form iteration times next to the event-driven measurement for a
//! grid of mini-batch and micro-batch sizes.

use innet_sgd::glm::LossKind;
use innet_sgd::ingest::{normalize_quantize, synthetic_blobs};
use innet_sgd::trainer::{simulate_iteration_time, timing_params, train_model_parallel, Schedule, TrainingConfig};

fn main() -> innet_sgd::Result<()> {
    println!("B,MB,pipelined_eq,pipelined_sim,vanilla_eq,vanilla_sim,speedup");
    for batch in [32, 64, 128, 256] {
        let data = normalize_quantize(&synthetic_blobs(batch, 4096, 10.0, 7), LossKind::Squared)?;
        let woven = data.weave();
        for mb in [4, 8, 16] {
            let cfg = TrainingConfig { workers: 4, batch, micro_batch: mb, link_gbps: Some(10.0), ..Default::default() };
            let eq = simulate_iteration_time(&timing_params(&cfg, 4096)?);
            let sim = |schedule| -> innet_sgd::Result<u64> {
                let c = TrainingConfig { schedule, ..cfg.clone() };
                Ok(train_model_parallel(&woven, &data.labels, &c)?.metrics.iteration_ns[0])
            };
            let (p, v) = (sim(Schedule::Pipelined)?, sim(Schedule::Vanilla)?);
            println!("{batch},{mb},{:.0},{p},{:.0},{v},{:.2}", eq.pipelined_mp, eq.vanilla_mp, v as f64 / p as f64);
        }
    }
    Ok(())
}
