//! AllReduce latency with aggregation in the switch versus on a host behind it.

use innet_sgd::netsim::{allreduce_latency, NetConfig, Topology};

fn main() -> innet_sgd::Result<()> {
    let base = NetConfig::new(8, 16, 8);
    let (switch, _) = allreduce_latency(&base, 100)?;
    println!("in-switch: p50 {} ns, p99 {} ns", switch.p50_ns, switch.p99_ns);
    for host_proc_ns in [0, 500, 2000, 10_000] {
        let cfg = NetConfig { topology: Topology::Endhost { host_proc_ns }, ..base.clone() };
        let (host, _) = allreduce_latency(&cfg, 100)?;
        println!(
            "end-host ({host_proc_ns:>5} ns processing): p50 {} ns, in-switch/end-host = {:.3}",
            host.p50_ns,
            switch.p50_ns as f64 / host.p50_ns as f64
        );
    }
    Ok(())
}
