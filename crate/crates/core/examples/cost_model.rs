//! Throughput predictions of the analytic cost model.

use innet_sgd::costmodel::{predict, CostParams};

fn main() -> innet_sgd::Result<()> {
    println!("precision sweep, one engine, 65536 features, B = 64");
    for s in 1..=8 {
        let p = predict(&CostParams::new(1, 1, 65536, 64, s))?;
        println!("  s={s}: th_comp {:.3} th_mem {:.1} th_engine {:.3} GB/s", p.th_comp, p.th_mem, p.th_engine);
    }
    for engines in [1, 8] {
        println!("scaling with FPGAs, {engines} engine(s) each, 1e6 features, B = 16, s = 4");
        let base = predict(&CostParams::new(1, engines, 1_000_000, 16, 4))?.th_all;
        for f in [1, 2, 4, 8] {
            let p = predict(&CostParams::new(f, engines, 1_000_000, 16, 4))?;
            println!("  F={f}: th_all {:.2} GB/s, speedup {:.2}", p.th_all, p.th_all / base);
        }
    }
    Ok(())
}
