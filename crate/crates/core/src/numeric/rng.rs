/// FNV-1a over bytes; stable across platforms and compiler versions.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[inline]
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stateless generator: the `i`-th draw depends only on `(key, i)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CounterRng {
    key: u64,
}

impl CounterRng {
    pub fn new(key: u64) -> Self {
        CounterRng { key }
    }

    pub fn u64(&self, i: u64) -> u64 {
        splitmix64(self.key ^ splitmix64(i))
    }

    /// Uniform in `[0, 1)` with 53 bits.
    pub fn uniform(&self, i: u64) -> f64 {
        (self.u64(i) >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }
}

/// Identifies one dropout site at one training step.
///
/// Two runs that share `(seed, step, site)` draw the same mask, which lets
/// both training phases replay identical noise.
#[derive(Clone, Copy, Debug)]
pub struct DropoutKey<'a> {
    pub seed: u64,
    pub step: u64,
    pub site: &'a str,
}

impl DropoutKey<'_> {
    pub fn rng(&self) -> CounterRng {
        let site = fnv1a(self.site.as_bytes());
        CounterRng::new(splitmix64(
            self.seed ^ splitmix64(self.step ^ splitmix64(site)),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
    }

    #[test]
    fn keys_separate_streams() {
        let a = DropoutKey {
            seed: 1,
            step: 2,
            site: "x",
        }
        .rng();
        let b = DropoutKey {
            seed: 1,
            step: 2,
            site: "y",
        }
        .rng();
        let c = DropoutKey {
            seed: 1,
            step: 3,
            site: "x",
        }
        .rng();
        assert_eq!(
            a,
            DropoutKey {
                seed: 1,
                step: 2,
                site: "x"
            }
            .rng()
        );
        assert_ne!(a.u64(0), b.u64(0));
        assert_ne!(a.u64(0), c.u64(0));
        let mean: f64 = (0..10_000).map(|i| a.uniform(i)).sum::<f64>() / 10_000.0;
        assert!((mean - 0.5).abs() < 0.02);
    }
}
