//! Counter-based randomness.
//!
//! Every random draw in a run is a pure function of `(stream key, counter)`,
//! computed with Philox4x32-10. Noise for an item is keyed by the item id and
//! the shuffle for a user by the user id, so results do not depend on how work
//! is split across threads or on input order.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::calibration::std_normal_inv_cdf_lower;

const PHILOX_M0: u32 = 0xD251_1F53;
const PHILOX_M1: u32 = 0xCD9E_8D57;
const PHILOX_W0: u32 = 0x9E37_79B9;
const PHILOX_W1: u32 = 0xBB67_AE85;

#[inline]
fn mulhilo(a: u32, b: u32) -> (u32, u32) {
    let p = (a as u64) * (b as u64);
    ((p >> 32) as u32, p as u32)
}

/// Philox4x32 with 10 rounds.
#[inline]
pub fn philox4x32_10(mut ctr: [u32; 4], key: [u32; 2]) -> [u32; 4] {
    let (mut k0, mut k1) = (key[0], key[1]);
    for round in 0..10 {
        if round > 0 {
            k0 = k0.wrapping_add(PHILOX_W0);
            k1 = k1.wrapping_add(PHILOX_W1);
        }
        let (hi0, lo0) = mulhilo(PHILOX_M0, ctr[0]);
        let (hi1, lo1) = mulhilo(PHILOX_M1, ctr[2]);
        ctr = [hi1 ^ ctr[1] ^ k0, lo1, hi0 ^ ctr[3] ^ k1, lo0];
    }
    ctr
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// What a substream is used for. Distinct purposes never share draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Purpose {
    Capping,
    /// Gaussian noise of the given round (1-based).
    Noise(u32),
    UserOrder,
    Synthetic,
    /// Monte Carlo trials of the verification harnesses.
    Trial(u64),
}

impl Purpose {
    fn tag(self) -> u64 {
        match self {
            Purpose::Capping => 0x01,
            Purpose::Noise(r) => 0x02 | ((r as u64) << 8),
            Purpose::UserOrder => 0x03,
            Purpose::Synthetic => 0x04,
            Purpose::Trial(t) => 0x05 ^ t.wrapping_mul(0x100).wrapping_add(0x9E37_79B9),
        }
    }
}

/// Master seed of a run; substreams are derived per [`Purpose`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RunSeed(pub u64);

impl RunSeed {
    pub fn stream(self, purpose: Purpose) -> StreamKey {
        let k = splitmix64(self.0 ^ splitmix64(purpose.tag()));
        StreamKey([k as u32, (k >> 32) as u32])
    }
}

/// Key of one substream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey(pub [u32; 2]);

impl StreamKey {
    /// 128 random bits for the counter `(a, b)`.
    #[inline]
    pub fn block(self, a: u64, b: u64) -> [u32; 4] {
        philox4x32_10([a as u32, (a >> 32) as u32, b as u32, (b >> 32) as u32], self.0)
    }

    /// Uniform draw in the open interval (0, 1).
    #[inline]
    pub fn uniform(self, a: u64, b: u64) -> f64 {
        let w = self.block(a, b);
        open_unit(((w[0] as u64) << 32) | w[1] as u64)
    }

    /// Standard normal draw for the counter `(a, b)`.
    ///
    /// One uniform picks the magnitude through the lower-tail inverse CDF,
    /// the other the sign, so both tails keep full resolution.
    #[inline]
    pub fn normal(self, a: u64, b: u64) -> f64 {
        let w = self.block(a, b);
        let u = open_unit(((w[0] as u64) << 32) | w[1] as u64);
        let magnitude = -std_normal_inv_cdf_lower(0.5 * u);
        if w[2] & 1 == 1 {
            magnitude
        } else {
            -magnitude
        }
    }

    /// Sequential generator over counters `(a, 0), (a, 1), ...`.
    pub fn rng(self, a: u64) -> CounterRng {
        CounterRng {
            key: self,
            lane: a,
            next_block: 0,
            buf: [0; 4],
            used: 4,
        }
    }
}

#[inline]
fn open_unit(x: u64) -> f64 {
    ((x >> 12) as f64 + 0.5) * (1.0 / (1u64 << 52) as f64)
}

/// A `RngCore` view over one lane of a counter-based stream.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: StreamKey,
    lane: u64,
    next_block: u64,
    buf: [u32; 4],
    used: usize,
}

impl RngCore for CounterRng {
    fn next_u32(&mut self) -> u32 {
        if self.used == 4 {
            self.buf = self.key.block(self.lane, self.next_block);
            self.next_block += 1;
            self.used = 0;
        }
        let x = self.buf[self.used];
        self.used += 1;
        x
    }

    fn next_u64(&mut self) -> u64 {
        let lo = self.next_u32() as u64;
        let hi = self.next_u32() as u64;
        (hi << 32) | lo
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(4) {
            let x = self.next_u32().to_le_bytes();
            chunk.copy_from_slice(&x[..chunk.len()]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Known-answer vectors from the Random123 distribution (philox4x32, 10 rounds).
    #[test]
    fn philox_known_answers() {
        assert_eq!(
            philox4x32_10([0, 0, 0, 0], [0, 0]),
            [0x6627_e8d5, 0xe169_c58d, 0xbc57_ac4c, 0x9b00_dbd8]
        );
        assert_eq!(
            philox4x32_10([u32::MAX; 4], [u32::MAX; 2]),
            [0x408f_276d, 0x41c8_3b0e, 0xa20b_c7c6, 0x6d54_51fd]
        );
        assert_eq!(
            philox4x32_10(
                [0x243f_6a88, 0x85a3_08d3, 0x1319_8a2e, 0x0370_7344],
                [0xa409_3822, 0x299f_31d0]
            ),
            [0xd16c_fe09, 0x94fd_cceb, 0x5001_e420, 0x2412_6ea1]
        );
    }

    #[test]
    fn substreams_differ() {
        let s = RunSeed(7);
        assert_ne!(s.stream(Purpose::Noise(1)), s.stream(Purpose::Noise(2)));
        assert_ne!(s.stream(Purpose::Noise(1)), s.stream(Purpose::Capping));
        assert_ne!(s.stream(Purpose::Trial(0)), s.stream(Purpose::Trial(1)));
        assert_eq!(s.stream(Purpose::Capping), RunSeed(7).stream(Purpose::Capping));
    }

    #[test]
    fn keyed_normal_is_deterministic() {
        let k = RunSeed(42).stream(Purpose::Noise(1));
        assert_eq!(k.normal(17, 0).to_bits(), k.normal(17, 0).to_bits());
        assert_ne!(k.normal(17, 0), k.normal(18, 0));
    }

    #[test]
    fn uniform_is_in_open_interval() {
        assert!(open_unit(0) > 0.0);
        assert!(open_unit(u64::MAX) < 1.0);
    }

    #[test]
    fn normal_moments() {
        let k = RunSeed(3).stream(Purpose::Noise(1));
        let n = 200_000u64;
        let (mut s1, mut s2, mut pos) = (0.0, 0.0, 0u64);
        for i in 0..n {
            let z = k.normal(i, 0);
            s1 += z;
            s2 += z * z;
            if z > 0.0 {
                pos += 1;
            }
        }
        let mean = s1 / n as f64;
        let var = s2 / n as f64 - mean * mean;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
        assert!(((pos as f64 / n as f64) - 0.5).abs() < 0.01);
    }
}
