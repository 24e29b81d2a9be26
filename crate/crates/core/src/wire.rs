//! Packet header codec and the fixed-point number formats shared by the
//! switch, the workers and the numeric layer.
//!
//! Wire layout (little-endian, `8 + 4 * MB` bytes):
//!
//! ```text
//! byte 0      flags: bit0 = is_agg, bit1 = acked, bits 2..7 zero
//! byte 1      reserved, zero
//! bytes 2..4  seq   (u16)
//! bytes 4..8  bm    (u32)
//! bytes 8..   MB payload words (i32)
//! ```

use std::fmt;
use std::ops::{Add, AddAssign, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Header length in bytes.
pub const HEADER_LEN: usize = 8;

const FLAG_AGG: u8 = 0b01;
const FLAG_ACKED: u8 = 0b10;

/// Number of fractional bits in [`Q16`].
pub const FRAC_BITS: u32 = 16;

/// Signed Q16.16 fixed point: `raw / 2^16`.
///
/// Addition and subtraction wrap modulo 2^32. Multiplication forms the full
/// 64-bit product and shifts right arithmetically, truncating toward −∞.
#[derive(Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Q16(pub i32);

impl Q16 {
    pub const ZERO: Q16 = Q16(0);
    pub const ONE: Q16 = Q16(1 << FRAC_BITS);
    pub const HALF: Q16 = Q16(1 << (FRAC_BITS - 1));

    pub const fn from_raw(raw: i32) -> Self {
        Q16(raw)
    }

    pub const fn raw(self) -> i32 {
        self.0
    }

    /// Rounds to the nearest representable value, ties away from zero.
    pub fn from_real(r: f64) -> Result<Self> {
        if !r.is_finite() || r.abs() >= 32768.0 {
            return Err(Error::Overflow(r));
        }
        let scaled = (r * (1u64 << FRAC_BITS) as f64).round();
        if scaled > i32::MAX as f64 || scaled < i32::MIN as f64 {
            return Err(Error::Overflow(r));
        }
        Ok(Q16(scaled as i32))
    }

    pub fn to_real(self) -> f64 {
        self.0 as f64 / (1u64 << FRAC_BITS) as f64
    }

    pub fn wrapping_mul(self, rhs: Q16) -> Q16 {
        Q16(((self.0 as i64 * rhs.0 as i64) >> FRAC_BITS) as i32)
    }

    /// Arithmetic right shift (floor division by `2^k`).
    pub fn shr(self, k: u32) -> Q16 {
        Q16(self.0 >> k)
    }

    /// Product with a UQ0.8 feature.
    pub fn mul_feature(self, f: Feature) -> Q16 {
        Q16(((self.0 as i64 * f.0 as i64) >> Feature::BITS) as i32)
    }
}

impl Add for Q16 {
    type Output = Q16;
    fn add(self, rhs: Q16) -> Q16 {
        Q16(self.0.wrapping_add(rhs.0))
    }
}

impl AddAssign for Q16 {
    fn add_assign(&mut self, rhs: Q16) {
        self.0 = self.0.wrapping_add(rhs.0);
    }
}

impl Sub for Q16 {
    type Output = Q16;
    fn sub(self, rhs: Q16) -> Q16 {
        Q16(self.0.wrapping_sub(rhs.0))
    }
}

impl SubAssign for Q16 {
    fn sub_assign(&mut self, rhs: Q16) {
        self.0 = self.0.wrapping_sub(rhs.0);
    }
}

impl Neg for Q16 {
    type Output = Q16;
    fn neg(self) -> Q16 {
        Q16(self.0.wrapping_neg())
    }
}

impl std::iter::Sum for Q16 {
    fn sum<I: Iterator<Item = Q16>>(iter: I) -> Q16 {
        iter.fold(Q16::ZERO, |a, b| a + b)
    }
}

impl fmt::Debug for Q16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Q16({} = {})", self.0, self.to_real())
    }
}

impl fmt::Display for Q16 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.to_real())
    }
}

/// Unsigned UQ0.8 feature value in `[0, 1 - 2^-8]`.
#[derive(Clone, Copy, Default, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Feature(pub u8);

impl Feature {
    pub const BITS: u32 = 8;

    pub fn to_real(self) -> f64 {
        self.0 as f64 / 256.0
    }

    /// Keeps only the `s` most significant bits.
    pub fn truncate(self, s: u32) -> Feature {
        debug_assert!((1..=8).contains(&s));
        Feature(self.0 & (0xFFu8 << (8 - s)))
    }
}

/// One header plus payload as exchanged between workers and the aggregator.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Packet {
    pub is_agg: bool,
    pub acked: bool,
    pub seq: u16,
    pub bm: u32,
    /// PA on worker-to-switch aggregation packets, FA on broadcasts.
    pub payload: Vec<i32>,
}

impl Packet {
    pub fn wire_len(&self) -> usize {
        wire_len(self.payload.len())
    }
}

pub const fn wire_len(mb: usize) -> usize {
    HEADER_LEN + 4 * mb
}

pub fn encode_packet(pkt: &Packet) -> Vec<u8> {
    let mut out = Vec::with_capacity(pkt.wire_len());
    let mut flags = 0u8;
    if pkt.is_agg {
        flags |= FLAG_AGG;
    }
    if pkt.acked {
        flags |= FLAG_ACKED;
    }
    out.push(flags);
    out.push(0);
    out.extend_from_slice(&pkt.seq.to_le_bytes());
    out.extend_from_slice(&pkt.bm.to_le_bytes());
    for w in &pkt.payload {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode_packet(bytes: &[u8], mb: usize) -> Result<Packet> {
    let expected = wire_len(mb);
    if bytes.len() != expected {
        return Err(Error::MalformedPacket(format!(
            "expected {expected} bytes for MB={mb}, got {}",
            bytes.len()
        )));
    }
    let flags = bytes[0];
    if flags & !(FLAG_AGG | FLAG_ACKED) != 0 {
        return Err(Error::MalformedPacket(format!("reserved flag bits set: {flags:#04x}")));
    }
    if bytes[1] != 0 {
        return Err(Error::MalformedPacket(format!("reserved byte is {:#04x}", bytes[1])));
    }
    let seq = u16::from_le_bytes([bytes[2], bytes[3]]);
    let bm = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
    let payload = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Packet {
        is_agg: flags & FLAG_AGG != 0,
        acked: flags & FLAG_ACKED != 0,
        seq,
        bm,
        payload,
    })
}

/// Convenience wrappers matching the free-function naming of the codec.
pub fn fx_from_real(r: f64) -> Result<Q16> {
    Q16::from_real(r)
}

pub fn fx_to_real(f: Q16) -> f64 {
    f.to_real()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn golden_bytes_agg_packet() {
        let pkt = Packet { is_agg: true, acked: false, seq: 5, bm: 0x4, payload: vec![1] };
        assert_eq!(
            encode_packet(&pkt),
            vec![0x01, 0x00, 0x05, 0x00, 0x04, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00]
        );
        assert_eq!(decode_packet(&encode_packet(&pkt), 1).unwrap(), pkt);
    }

    #[test]
    fn golden_bytes_ack_packet() {
        let pkt = Packet { is_agg: false, acked: false, seq: 0, bm: 0x1, payload: vec![0] };
        assert_eq!(
            encode_packet(&pkt),
            vec![0x00, 0x00, 0x00, 0x00, 0x01, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00]
        );
    }

    #[test]
    fn golden_bytes_multibyte_fields() {
        let pkt = Packet { is_agg: true, acked: true, seq: 0x1234, bm: 0x8000_0001, payload: vec![-2, 0x0102_0304] };
        assert_eq!(
            encode_packet(&pkt),
            vec![
                0x03, 0x00, 0x34, 0x12, 0x01, 0x00, 0x00, 0x80, 0xFE, 0xFF, 0xFF, 0xFF, 0x04, 0x03, 0x02,
                0x01
            ]
        );
    }

    #[test]
    fn decode_rejects_short_input() {
        assert!(matches!(decode_packet(&[0u8; 7], 1), Err(Error::MalformedPacket(_))));
    }

    #[test]
    fn decode_rejects_reserved_flag_bits() {
        let mut bytes = encode_packet(&Packet { is_agg: true, acked: false, seq: 5, bm: 4, payload: vec![1] });
        bytes[0] = 0x04;
        assert!(matches!(decode_packet(&bytes, 1), Err(Error::MalformedPacket(_))));
    }

    #[test]
    fn decode_rejects_reserved_byte() {
        let mut bytes = encode_packet(&Packet { is_agg: true, acked: false, seq: 5, bm: 4, payload: vec![1] });
        bytes[1] = 1;
        assert!(matches!(decode_packet(&bytes, 1), Err(Error::MalformedPacket(_))));
    }

    #[test]
    fn fixed_point_conversions() {
        assert_eq!(Q16::from_real(1.0).unwrap().raw(), 65536);
        assert_eq!(Q16::from_real(-0.5).unwrap().raw(), -32768);
        // round(0.1 * 65536) = round(6553.6)
        assert_eq!(Q16::from_real(0.1).unwrap().raw(), 6554);
        // ties away from zero
        assert_eq!(Q16::from_real(1.5 / 65536.0).unwrap().raw(), 2);
        assert_eq!(Q16::from_real(-1.5 / 65536.0).unwrap().raw(), -2);
        assert!(matches!(Q16::from_real(32768.0), Err(Error::Overflow(_))));
        assert!(matches!(Q16::from_real(-40000.0), Err(Error::Overflow(_))));
        assert!(Q16::from_real(f64::NAN).is_err());
    }

    #[test]
    fn multiplication_truncates_toward_negative_infinity() {
        // 1 raw * 0.5 = 0.5 raw -> 0
        assert_eq!(Q16(1).wrapping_mul(Q16::HALF), Q16(0));
        // -1 raw * 0.5 = -0.5 raw -> -1
        assert_eq!(Q16(-1).wrapping_mul(Q16::HALF), Q16(-1));
        assert_eq!(Q16::from_real(1.5).unwrap().wrapping_mul(Q16::from_real(2.0).unwrap()), Q16::from_real(3.0).unwrap());
    }

    #[test]
    fn addition_wraps() {
        assert_eq!(Q16(i32::MAX) + Q16(1), Q16(i32::MIN));
        assert_eq!(Q16(i32::MIN) - Q16(1), Q16(i32::MAX));
    }

    #[test]
    fn feature_truncation() {
        assert_eq!(Feature(0b1100_0000).truncate(1), Feature(0b1000_0000));
        assert_eq!(Feature(0b1011_0111).truncate(4), Feature(0b1011_0000));
        assert_eq!(Feature(0xFF).truncate(8), Feature(0xFF));
    }

    fn arb_packet() -> impl Strategy<Value = Packet> {
        (any::<bool>(), any::<bool>(), any::<u16>(), 0u32..32, prop::collection::vec(any::<i32>(), 1..16))
            .prop_map(|(is_agg, acked, seq, bit, payload)| Packet { is_agg, acked, seq, bm: 1 << bit, payload })
    }

    proptest! {
        #[test]
        fn packet_round_trip(pkt in arb_packet()) {
            let bytes = encode_packet(&pkt);
            prop_assert_eq!(bytes.len(), 8 + 4 * pkt.payload.len());
            prop_assert_eq!(decode_packet(&bytes, pkt.payload.len()).unwrap(), pkt);
        }

        #[test]
        fn real_round_trip_within_half_ulp(r in -32767.0f64..32767.0) {
            let q = Q16::from_real(r).unwrap();
            prop_assert!((q.to_real() - r).abs() <= 1.0 / 131072.0);
        }

        #[test]
        fn wrapping_addition_is_associative_and_commutative(a in any::<i32>(), b in any::<i32>(), c in any::<i32>()) {
            let (a, b, c) = (Q16(a), Q16(b), Q16(c));
            prop_assert_eq!((a + b) + c, a + (b + c));
            prop_assert_eq!(a + b, b + a);
        }
    }
}
