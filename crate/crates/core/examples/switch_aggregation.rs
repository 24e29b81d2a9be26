//! Drive the switch state machine by hand through one AllReduce round,
//! including a duplicated partial activation and the acknowledgement phase.

use innet_sgd::switch_agg::SwitchState;
use innet_sgd::wire::Packet;

fn main() -> innet_sgd::Result<()> {
    let workers = 3;
    let mut switch = SwitchState::new(4, workers, 2)?;
    let pa = |w: usize, v: i32| Packet { is_agg: true, acked: false, seq: 1, bm: 1 << w, payload: vec![v, -v] };

    for (w, v) in [(0, 10), (1, 20)] {
        let out = switch.receive(&pa(w, v))?;
        println!("PA from worker {w}: {} packets out, slot {:?}", out.len(), switch.slot(1));
    }
    let dup = switch.receive(&pa(1, 20))?;
    println!("duplicate PA from worker 1 is absorbed: {} packets out", dup.len());

    let fa = switch.receive(&pa(2, 30))?;
    println!("last PA completes the round, broadcast to {} workers: {:?}", fa.len(), fa[0].1.payload);

    for w in 0..workers {
        let ack = Packet { is_agg: false, acked: false, seq: 1, bm: 1 << w, payload: vec![0, 0] };
        let out = switch.receive(&ack)?;
        if !out.is_empty() {
            println!("ack from worker {w} frees the slot; confirmation acked={}", out[0].1.acked);
        }
    }
    println!("slot after the round: {:?}", switch.slot(1));
    switch.check_invariants()
}
