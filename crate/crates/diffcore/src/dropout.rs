//! Counter-based dropout masks.
//!
//! A mask element depends only on `(seed, site, step, element index)`, so
//! masks are reproducible regardless of evaluation order or worker count.

/// Identifies one dropout application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    /// Stable identifier of the call site, see [`site_id`].
    pub site: u64,
    /// Usually the global step mixed with the sample index.
    pub step: u64,
}

#[inline]
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// FNV-1a hash of a call-site name.
pub fn site_id(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Uniform draw in `[0, 1)` for element `index` of the mask keyed by `key`.
pub fn uniform(key: DropoutKey, index: u64) -> f64 {
    let h = splitmix64(key.seed ^ splitmix64(key.site ^ splitmix64(key.step ^ splitmix64(index))));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// `true` where the element is kept.
pub fn keep_mask(key: DropoutKey, len: usize, p: f64) -> Vec<bool> {
    (0..len as u64).map(|i| uniform(key, i) >= p).collect()
}
