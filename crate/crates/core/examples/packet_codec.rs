//! Encode and decode an aggregation packet and show Q16.16 conversions.

use innet_sgd::wire::{decode_packet, encode_packet, wire_len, Feature, Packet, Q16};

fn main() -> innet_sgd::Result<()> {
    let payload: Vec<i32> = [0.5, -1.25, 3.0, 0.0].iter().map(|&r| Q16::from_real(r).map(|q| q.0)).collect::<Result<_, _>>()?;
    let pkt = Packet { is_agg: true, acked: false, seq: 7, bm: 1 << 2, payload };
    let bytes = encode_packet(&pkt);
    println!("{} bytes on the wire (8 header + 4 x MB = {})", bytes.len(), wire_len(4));
    println!("header: {:02x?}", &bytes[..8]);
    let back = decode_packet(&bytes, 4)?;
    assert_eq!(back, pkt);
    let reals: Vec<f64> = back.payload.iter().map(|&r| Q16(r).to_real()).collect();
    println!("payload round-trips to {reals:?}");

    let f = Feature(0b1011_0110);
    for s in [1, 2, 4, 8] {
        println!("feature {:.4} truncated to {s} bits: {:.4}", f.to_real(), f.truncate(s).to_real());
    }
    let w = Q16::from_real(0.75)?;
    println!("0.75 x {:.4} = {:.6}", f.to_real(), w.mul_feature(f).to_real());
    Ok(())
}
