//! FNV-1a digests used for parameter-layout stamps, payload tagging in
//! isolation tests, and trajectory byte-stream comparison.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over a byte slice.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    fnv1a_with(FNV_OFFSET, bytes)
}

/// Continue an FNV-1a chain from a previous digest.
pub fn fnv1a_with(seed: u64, bytes: &[u8]) -> u64 {
    let mut h = seed;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Digest a slice of f64 values by their IEEE-754 bit patterns.
pub fn fnv1a_f64(values: &[f64]) -> u64 {
    let mut h = FNV_OFFSET;
    for v in values {
        h = fnv1a_with(h, &v.to_le_bytes());
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_vector() {
        // FNV-1a("") is the offset basis; FNV-1a("a") is a published value.
        assert_eq!(fnv1a(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a(b"a"), 0xaf63_dc4c_8601_ec8c);
    }

    #[test]
    fn distinguishes_neighbors() {
        assert_ne!(fnv1a(b"slot0"), fnv1a(b"slot1"));
        assert_ne!(fnv1a_f64(&[1.0, 2.0]), fnv1a_f64(&[2.0, 1.0]));
    }
}
