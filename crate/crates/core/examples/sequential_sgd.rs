//! Sequential fixed-point mini-batch SGD on a synthetic dataset at several precisions.

use innet_sgd::glm::{reference_sgd, LossKind, SgdConfig};
use innet_sgd::ingest::{normalize_quantize, synthetic_blobs};
use innet_sgd::wire::Q16;

fn main() -> innet_sgd::Result<()> {
    for loss in [LossKind::Squared, LossKind::Logistic] {
        let data = normalize_quantize(&synthetic_blobs(512, 1024, 10.0, 7), loss)?;
        let woven = data.weave();
        for precision in [1, 2, 4, 8] {
            let cfg = SgdConfig { batch: 64, precision, learning_rate: Q16(256), epochs: 10, loss };
            let out = reference_sgd(&woven, &data.labels, &cfg)?;
            let curve: Vec<String> = out.losses.iter().step_by(2).map(|l| format!("{l:.4}")).collect();
            println!("{loss} s={precision}: loss every 2 epochs {}", curve.join(" "));
        }
    }
    Ok(())
}
