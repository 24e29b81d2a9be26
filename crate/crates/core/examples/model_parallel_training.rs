//! Model-parallel training over a lossy simulated network, checked bit for bit
//! against the sequential reference.

use innet_sgd::glm::{reference_sgd_silent, LossKind};
use innet_sgd::ingest::{normalize_quantize, synthetic_blobs};
use innet_sgd::netsim::FaultModel;
use innet_sgd::trainer::{train_model_parallel, TrainingConfig};
use innet_sgd::wire::Q16;

fn main() -> innet_sgd::Result<()> {
    let data = normalize_quantize(&synthetic_blobs(1024, 4096, 10.0, 7), LossKind::Squared)?;
    let woven = data.weave();
    let cfg = TrainingConfig {
        workers: 4,
        engines: 2,
        learning_rate: Q16(64),
        epochs: 5,
        fault: FaultModel { drop_prob: 0.1, dup_prob: 0.05, latency_ns: 500, jitter_ns: 200, seed: 3 },
        ..Default::default()
    };
    let out = train_model_parallel(&woven, &data.labels, &cfg)?;
    print!("{}", out.metrics.to_csv());
    let reference = reference_sgd_silent(&woven, &data.labels, &cfg.sgd())?;
    println!("bit-identical to the sequential reference: {}", out.model == reference.model);
    println!("lock-step between mini-batches held: {}", out.lockstep.holds());
    Ok(())
}
