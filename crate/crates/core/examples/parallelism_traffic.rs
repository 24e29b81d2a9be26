//! Data-parallel versus model-parallel training: same model, different traffic.

use innet_sgd::glm::LossKind;
use innet_sgd::ingest::{normalize_quantize, synthetic_blobs};
use innet_sgd::trainer::{dp_bytes_per_iteration, mp_bytes_per_iteration, train_data_parallel, train_model_parallel, TrainingConfig};
use innet_sgd::wire::Q16;

fn main() -> innet_sgd::Result<()> {
    let (samples, features) = (512, 4096);
    let data = normalize_quantize(&synthetic_blobs(samples, features, 10.0, 7), LossKind::Squared)?;
    let woven = data.weave();
    let cfg = TrainingConfig { workers: 4, learning_rate: Q16(64), epochs: 1, ..Default::default() };
    let mp = train_model_parallel(&woven, &data.labels, &cfg)?;
    let dp = train_data_parallel(&woven, &data.labels, &cfg)?;
    let iters = mp.metrics.iteration_ns.len() as u64;
    println!("identical models: {}", mp.model == dp.model);
    println!(
        "model-parallel: {} bytes/iteration (closed form {}), {:.0} ns/iteration",
        mp.metrics.totals.bytes / iters,
        mp_bytes_per_iteration(&cfg),
        mp.metrics.iteration_ns.iter().sum::<u64>() as f64 / iters as f64
    );
    println!(
        "data-parallel:  {} bytes/iteration (closed form {}), {:.0} ns/iteration",
        dp.metrics.totals.bytes / iters,
        dp_bytes_per_iteration(&cfg, features),
        dp.metrics.iteration_ns.iter().sum::<u64>() as f64 / iters as f64
    );
    println!("traffic ratio {:.1} (D/B = {})", dp.metrics.totals.bytes as f64 / mp.metrics.totals.bytes as f64, features / cfg.batch);
    Ok(())
}
