//! Small numeric helpers shared by the executors and tests.

/// FNV-1a, 64 bit. Used for plan/layer fingerprints, not for security.
#[derive(Debug, Clone, Copy)]
pub struct Fnv64(u64);

impl Default for Fnv64 {
    fn default() -> Self {
        Fnv64(0xcbf2_9ce4_8422_2325)
    }
}

impl Fnv64 {
    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn write_u64(&mut self, v: u64) {
        self.write(&v.to_le_bytes());
    }

    pub fn write_f32s(&mut self, vals: &[f32]) {
        for v in vals {
            self.write(&v.to_bits().to_le_bytes());
        }
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

/// Largest absolute difference divided by the largest magnitude of `reference`.
///
/// This is the "relative tolerance" used throughout the oracle comparisons:
/// a single scale for the whole tensor, so entries that happen to cancel to
/// near zero do not blow up the ratio.
pub fn max_rel_diff(actual: &[f32], reference: &[f32]) -> f64 {
    assert_eq!(actual.len(), reference.len(), "length mismatch");
    let scale = reference.iter().fold(0.0f64, |m, &v| m.max(f64::from(v).abs()));
    let diff = actual.iter().zip(reference).fold(0.0f64, |m, (&a, &b)| m.max((f64::from(a) - f64::from(b)).abs()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}
