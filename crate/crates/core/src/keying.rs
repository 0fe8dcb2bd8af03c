//! Key derivation and the keyed index/content mappings.
//!
//! Keys are a pure function of the thread ID and a per-device secret. The
//! program counter never enters the key itself; it enters through the keyed
//! index mapping and through the content cipher applied to tags, counter
//! states and targets.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

/// Per-thread keys for every skew of both structures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KeyBundle {
    pub pht_index_keys: [u64; 3],
    pub pht_content_keys: [u64; 3],
    /// Key0 / Key1, one per BTB skew.
    pub btb_index_keys: [u64; 2],
    /// Keyc, shared by tag and target encryption (domain separated).
    pub btb_content_key: u64,
}

impl KeyBundle {
    /// All nine keys in derivation-slot order.
    pub fn all(&self) -> [u64; 9] {
        let mut out = [0u64; 9];
        out[..3].copy_from_slice(&self.pht_index_keys);
        out[3..6].copy_from_slice(&self.pht_content_keys);
        out[6..8].copy_from_slice(&self.btb_index_keys);
        out[8] = self.btb_content_key;
        out
    }
}

/// How a folded input is mapped onto an index under a key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingMode {
    /// `folded ^ key`, the literal form of the load-balancing index algorithm.
    XorFold,
    /// Fixed-round keyed permutation of the folded domain.
    #[default]
    MixedPermutation,
    /// Keyed random function over the full (pc, ghr); not a bijection.
    IdealOracle,
}

const DERIVE_DOMAIN: &[u8] = b"cibpu/key-derivation/v1";

/// Keyed PRF over `tid || slot`. Retries with a counter until non-zero.
pub(crate) fn derive_slot(device_secret: u64, thread_id: u32, slot: u32) -> u64 {
    let mut counter = 0u32;
    loop {
        let mut h = Sha256::new();
        h.update(DERIVE_DOMAIN);
        h.update(device_secret.to_le_bytes());
        h.update(thread_id.to_le_bytes());
        h.update(slot.to_le_bytes());
        h.update(counter.to_le_bytes());
        let digest = h.finalize();
        let mut word = [0u8; 8];
        word.copy_from_slice(&digest[..8]);
        let key = u64::from_le_bytes(word);
        if key != 0 {
            return key;
        }
        counter += 1;
    }
}

pub fn derive_keys(thread_id: u32, device_secret: u64) -> Result<KeyBundle> {
    if device_secret == 0 {
        return Err(Error::Config("device secret must be non-zero".into()));
    }
    let k = |slot| derive_slot(device_secret, thread_id, slot);
    Ok(KeyBundle {
        pht_index_keys: [k(0), k(1), k(2)],
        pht_content_keys: [k(3), k(4), k(5)],
        btb_index_keys: [k(6), k(7)],
        btb_content_key: k(8),
    })
}

/// murmur3 64-bit finalizer. A bijection on u64 with `fmix64(0) == 0`.
#[inline]
pub fn fmix64(mut x: u64) -> u64 {
    x ^= x >> 33;
    x = x.wrapping_mul(0xff51_afd7_ed55_8ccd);
    x ^= x >> 33;
    x = x.wrapping_mul(0xc4ce_b9fe_1a85_ec53);
    x ^= x >> 33;
    x
}

#[inline]
pub fn low_mask(bits: u32) -> u64 {
    if bits >= 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// XOR-fold a 64-bit value into `bits` bits.
#[inline]
pub fn fold(mut value: u64, bits: u32) -> u64 {
    if bits == 0 {
        return 0;
    }
    if bits >= 64 {
        return value;
    }
    let mask = low_mask(bits);
    let mut acc = 0;
    while value != 0 {
        acc ^= value & mask;
        value >>= bits;
    }
    acc
}

/// Derive an independent key for a separate content domain.
#[inline]
pub fn subkey(key: u64, domain: u64) -> u64 {
    fmix64(key ^ domain.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Bind a content key to the branch address, so entries written for one pc
/// decrypt to independent noise under any other pc.
#[inline]
pub fn address_tweak(key: u64, pc: u64) -> u64 {
    key ^ fmix64(pc ^ 0x632b_e59b_d9b4_e019)
}

pub(crate) const DOMAIN_PHT_STATE: u64 = 0x0053_5441_5445;
pub(crate) const DOMAIN_BTB_TARGET: u64 = 0x5441_5247_4554;

const PERMUTATION_ROUNDS: u64 = 4;
const ROUND_MULTIPLIERS: [u64; PERMUTATION_ROUNDS as usize] = [
    0x9e37_79b9_7f4a_7c15,
    0xbf58_476d_1ce4_e5b9,
    0x94d0_49bb_1331_11eb,
    0xd6e8_feb8_6659_fd93,
];

#[inline]
fn rotl_bits(x: u64, r: u32, bits: u32) -> u64 {
    if r == 0 || bits <= 1 {
        return x;
    }
    let mask = low_mask(bits);
    ((x << r) | (x >> (bits - r))) & mask
}

/// Keyed permutation of `[0, 2^bits)`. Every round step (xor with a round
/// key, odd multiply modulo 2^bits, in-domain rotation, right xorshift) is a
/// bijection, so the composition is too.
pub fn permute(mut x: u64, key: u64, bits: u32) -> u64 {
    if bits == 0 {
        return 0;
    }
    let mask = low_mask(bits);
    x &= mask;
    let shift = bits.div_ceil(2);
    for round in 0..PERMUTATION_ROUNDS {
        let rk = fmix64(key.wrapping_add(round.wrapping_mul(0x632b_e59b_d9b4_e019)));
        x ^= rk & mask;
        x = x.wrapping_mul(ROUND_MULTIPLIERS[round as usize] | 1) & mask;
        x = rotl_bits(x, ((rk >> 32) % bits as u64) as u32, bits);
        if shift < 64 {
            x ^= x >> shift;
        }
    }
    x
}

/// Encrypted index for a (pc, ghr) pair.
///
/// GHR is xor-folded into the folded PC before keying. The result is always
/// below `2^index_bits`.
#[inline]
pub fn enc_index(pc: u64, ghr: u64, key: u64, index_bits: u32, mode: MappingMode) -> u64 {
    let mask = low_mask(index_bits);
    match mode {
        MappingMode::XorFold => (fold(pc, index_bits) ^ fold(ghr, index_bits) ^ fold(key, index_bits)) & mask,
        MappingMode::MixedPermutation => permute(fold(pc, index_bits) ^ fold(ghr, index_bits), key, index_bits),
        MappingMode::IdealOracle => {
            let h = fmix64(pc ^ fmix64(key ^ 0x2545_f491_4f6c_dd1d));
            let h = fmix64(h ^ ghr.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ key);
            h & mask
        }
    }
}

/// XOR the payload with a keystream derived from `key`. A zero key is the
/// identity, and the operation is its own inverse.
pub fn enc_content(payload: u64, width: u32, key: u64) -> Result<u64> {
    if width > 64 {
        return Err(Error::Config(format!("payload width {width} exceeds the 64-bit keystream")));
    }
    if payload & !low_mask(width) != 0 {
        return Err(Error::Config(format!("payload {payload:#x} does not fit in {width} bits")));
    }
    Ok(payload ^ (fmix64(key) & low_mask(width)))
}

pub fn dec_content(cipher: u64, width: u32, key: u64) -> Result<u64> {
    enc_content(cipher, width, key)
}

/// Unchecked content cipher for hot paths where the width is validated once
/// up front.
#[inline]
pub(crate) fn xor_content(payload: u64, width: u32, key: u64) -> u64 {
    (payload ^ fmix64(key)) & low_mask(width)
}

/// Per-thread key cache over a fixed device secret.
///
/// Models the hardware key generator: bundles are derived on first use of a
/// thread ID and then reused. Lookups scan a short vector since traces carry
/// few threads.
#[derive(Debug, Clone)]
pub struct KeyStore {
    device_secret: u64,
    bundles: Vec<(u32, KeyBundle)>,
}

impl KeyStore {
    pub fn new(device_secret: u64) -> Result<Self> {
        if device_secret == 0 {
            return Err(Error::Config("device secret must be non-zero".into()));
        }
        Ok(Self {
            device_secret,
            bundles: Vec::new(),
        })
    }

    pub fn device_secret(&self) -> u64 {
        self.device_secret
    }

    #[inline]
    pub fn bundle(&mut self, tid: u32) -> KeyBundle {
        if let Some((_, b)) = self.bundles.iter().find(|(t, _)| *t == tid) {
            return *b;
        }
        let b = derive_keys(tid, self.device_secret).expect("secret validated at construction");
        self.bundles.push((tid, b));
        b
    }

    /// Bundle for a thread that has already been seen.
    pub fn cached(&self, tid: u32) -> Option<&KeyBundle> {
        self.bundles.iter().find(|(t, _)| *t == tid).map(|(_, b)| b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn derivation_is_deterministic() {
        let s = 0xdead_beef_u64;
        assert_eq!(derive_keys(7, s).unwrap(), derive_keys(7, s).unwrap());
    }

    #[test]
    fn zero_secret_rejected() {
        assert!(matches!(derive_keys(3, 0), Err(Error::Config(_))));
        assert!(KeyStore::new(0).is_err());
    }

    #[test]
    fn distinct_threads_differ_in_every_key() {
        // Reference: SHA-256 over the domain string, secret, tid and slot,
        // written out here independently of `derive_slot`.
        let secret = crate::DEFAULT_DEVICE_SECRET;
        let reference = |tid: u32, slot: u32| {
            let mut bytes = Vec::new();
            bytes.extend_from_slice(b"cibpu/key-derivation/v1");
            bytes.extend_from_slice(&secret.to_le_bytes());
            bytes.extend_from_slice(&tid.to_le_bytes());
            bytes.extend_from_slice(&slot.to_le_bytes());
            bytes.extend_from_slice(&0u32.to_le_bytes());
            let d = Sha256::digest(&bytes);
            u64::from_le_bytes(d[..8].try_into().unwrap())
        };
        let a = derive_keys(0, secret).unwrap().all();
        let b = derive_keys(1, secret).unwrap().all();
        for slot in 0..9 {
            assert_eq!(a[slot], reference(0, slot as u32));
            assert_eq!(b[slot], reference(1, slot as u32));
            assert_ne!(a[slot], b[slot], "slot {slot}");
            assert_ne!(a[slot], 0);
        }
    }

    #[test]
    fn xor_fold_examples() {
        assert_eq!(enc_index(0x5, 0, 0x3, 4, MappingMode::XorFold), 0x6);
        for pc in [0u64, 1, 0xabc, 0xffff_ffff] {
            assert_eq!(enc_index(pc, 0, 0, 12, MappingMode::XorFold), fold(pc, 12));
        }
    }

    #[test]
    fn mixed_permutation_reference_value_and_bijection() {
        let bits = 12;
        let v = enc_index(0x1A2B, 0x0F, 0x7C1, bits, MappingMode::MixedPermutation);
        assert_eq!(v, 0x400);
        // Enumerate every folded input.
        let mut seen = vec![false; 1 << bits];
        for x in 0..(1u64 << bits) {
            let y = enc_index(x, 0, 0x7C1, bits, MappingMode::MixedPermutation) as usize;
            assert!(!seen[y], "collision at {x:#x}");
            seen[y] = true;
        }
    }

    #[test]
    fn keyed_maps_are_injective_on_folded_domain() {
        for bits in [1u32, 2, 5, 8, 11, 13, 16] {
            for key in [0u64, 1, 0x7C1, 0xdead_beef_cafe_f00d] {
                for mode in [MappingMode::XorFold, MappingMode::MixedPermutation] {
                    let mut seen = vec![false; 1 << bits];
                    for x in 0..(1u64 << bits) {
                        let y = enc_index(x, 0, key, bits, mode) as usize;
                        assert!(!seen[y], "bits {bits} key {key:#x} mode {mode:?}");
                        seen[y] = true;
                    }
                }
            }
        }
    }

    #[test]
    fn ideal_oracle_spreads_uniformly() {
        let bits = 6;
        let mut counts = [0u32; 64];
        let n = 64_000u64;
        for pc in 0..n {
            counts[enc_index(pc * 4, 0, 0x1234, bits, MappingMode::IdealOracle) as usize] += 1;
        }
        let expected = n as f64 / 64.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 63 degrees of freedom, 99.9th percentile is about 103.4.
        assert!(chi2 < 103.4, "chi2 {chi2}");
    }

    #[test]
    fn content_zero_key_identity_and_width_errors() {
        assert_eq!(enc_content(0b10, 2, 0).unwrap(), 0b10);
        assert!(enc_content(0b100, 2, 5).is_err());
        assert!(enc_content(1, 65, 5).is_err());
    }

    #[test]
    fn cross_thread_state_ciphertexts_mostly_differ() {
        // Two independent 2-bit keystreams collide with probability 1/4.
        let n = 10_000u64;
        let mut differ = 0u64;
        for i in 0..n {
            let secret = fmix64(i + 1) | 1;
            let k0 = derive_keys(0, secret).unwrap().pht_content_keys[0];
            let k1 = derive_keys(1, secret).unwrap().pht_content_keys[0];
            if enc_content(0b11, 2, k0).unwrap() != enc_content(0b11, 2, k1).unwrap() {
                differ += 1;
            }
        }
        let frac = differ as f64 / n as f64;
        let se = (0.75f64 * 0.25 / n as f64).sqrt();
        assert!((frac - 0.75).abs() <= 3.0 * se, "fraction {frac}");
    }

    #[test]
    fn key_store_caches_bundles() {
        let mut ks = KeyStore::new(9).unwrap();
        assert!(ks.cached(4).is_none());
        let b = ks.bundle(4);
        assert_eq!(ks.cached(4), Some(&b));
        assert_eq!(b, derive_keys(4, 9).unwrap());
    }

    proptest! {
        #[test]
        fn content_round_trip(x in any::<u64>(), k in any::<u64>(), width in prop::sample::select(vec![2u32, 12, 13, 48, 64])) {
            let x = x & low_mask(width);
            let c = enc_content(x, width, k).unwrap();
            prop_assert!(c <= low_mask(width));
            prop_assert_eq!(dec_content(c, width, k).unwrap(), x);
            prop_assert_eq!(xor_content(x, width, k), c);
        }

        #[test]
        fn index_in_range(pc in any::<u64>(), ghr in any::<u64>(), key in any::<u64>(), bits in 1u32..=24) {
            for mode in [MappingMode::XorFold, MappingMode::MixedPermutation, MappingMode::IdealOracle] {
                prop_assert!(enc_index(pc, ghr, key, bits, mode) < (1u64 << bits));
            }
        }
    }
}
