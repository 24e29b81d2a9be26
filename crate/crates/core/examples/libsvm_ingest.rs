//! Parse LIBSVM text, quantize to 8-bit features, weave into bit planes and
//! plan model partitions.

use innet_sgd::glm::LossKind;
use innet_sgd::ingest::{normalize_quantize, parse_libsvm_str, plan_partitions, PartitionMode};

const DATA: &str = "\
+1 1:0.7 3:2.5 130:1
-1 2:1.5 3:-0.5
+1 1:0.1 130:0.25 # comment
-1 1:0.9 2:0.3
";

fn main() -> innet_sgd::Result<()> {
    let sparse = parse_libsvm_str(DATA)?;
    println!("{} samples, {} features", sparse.samples(), sparse.features);
    let data = normalize_quantize(&sparse, LossKind::Logistic)?;
    for t in 0..data.samples {
        let nz: Vec<(usize, u8)> = data.row(t).iter().enumerate().filter(|(_, f)| f.0 != 0).map(|(j, f)| (j, f.0)).collect();
        println!("sample {t}: label {:.1}, non-zero quantized features {nz:?}", data.labels[t].to_real());
    }
    let woven = data.weave();
    println!("woven: {} chunks of 64 features, plane words for sample 0 chunk 0: {:016x?}", woven.chunks(), woven.chunk_planes(0, 0));
    let plan = plan_partitions(data.features, data.samples, 2, 1, PartitionMode::Model)?;
    println!("model partitions for 2 workers: {:?}", plan.spans);
    Ok(())
}
