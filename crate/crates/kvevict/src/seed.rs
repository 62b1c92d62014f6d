/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives an independent seed for `(layer, head)` from a root seed.
pub fn derive_seed(root: u64, layer: usize, head: usize) -> u64 {
    mix(mix(mix(root) ^ layer as u64) ^ (head as u64).rotate_left(32))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distinct_per_head() {
        let mut seen = std::collections::HashSet::new();
        for l in 0..8 {
            for h in 0..8 {
                assert!(seen.insert(derive_seed(7, l, h)));
            }
        }
        assert_eq!(derive_seed(7, 3, 4), derive_seed(7, 3, 4));
    }
}
