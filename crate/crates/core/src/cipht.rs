//! Replicated, encrypted pattern history table.
//!
//! Every entry is stored once per skew at an independently encrypted index,
//! with tag and 2-bit state encrypted under a per-skew content key bound to
//! the branch address. A lookup
//! hits only when all skews agree; a miss rewrites the entry in all skews.

use std::collections::BTreeMap;

use crate::config::SimConfig;
use crate::keying::{
    address_tweak, enc_index, fold, low_mask, subkey, xor_content, KeyBundle, KeyStore, MappingMode, DOMAIN_PHT_STATE,
};
use crate::metrics::RunMetrics;
use crate::{Error, Result};

pub const MAX_PHT_SKEWS: usize = 3;

/// Saturating 2-bit counter step.
#[inline]
pub fn counter_step(state: u8, taken: bool) -> u8 {
    debug_assert!(state <= 3);
    if taken {
        (state + 1).min(3)
    } else {
        state.saturating_sub(1)
    }
}

/// Counter value written on a miss: weakly toward the resolved direction.
#[inline]
pub fn initial_state(taken: bool) -> u8 {
    if taken {
        2
    } else {
        1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PhtEntry {
    pub tag_cipher: u32,
    pub state_cipher: u8,
    pub valid: bool,
    // Simulator bookkeeping, not hardware state: the writing thread and pc
    // (needed to decrypt during audits) and a write stamp shared by the
    // replicas of one logical entry.
    owner: u32,
    pc: u64,
    stamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhtLookup {
    pub hit: bool,
    /// Predicted direction, present only on a hit.
    pub taken: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PhtUpdate {
    pub hit: bool,
    /// Valid entries overwritten by a miss-replacement, summed over skews.
    pub overwritten_valid: usize,
}

/// What one skew holds at a thread's index for a pc, decrypted with that
/// thread's keys.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SkewProbe {
    pub index: usize,
    pub valid: bool,
    pub tag_match: bool,
    pub state: u8,
}

#[derive(Debug, Clone)]
pub struct CiphtState {
    index_bits: u32,
    tag_bits: u32,
    ghr_bits: u32,
    mapping: MappingMode,
    skews: Vec<Vec<PhtEntry>>,
    ghr: u64,
    keys: KeyStore,
    next_stamp: u64,
    metrics: RunMetrics,
}

impl CiphtState {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_params(
            cfg.pht_index_bits,
            cfg.pht_tag_bits,
            cfg.pht_skews,
            cfg.ghr_bits,
            cfg.mapping,
            cfg.device_secret,
        )
    }

    pub fn with_params(
        index_bits: u32,
        tag_bits: u32,
        skews: usize,
        ghr_bits: u32,
        mapping: MappingMode,
        device_secret: u64,
    ) -> Result<Self> {
        if !(1..=MAX_PHT_SKEWS).contains(&skews) {
            return Err(Error::Config(format!("pht skew count {skews} not in 1..=3")));
        }
        if index_bits == 0 || index_bits > 24 || tag_bits == 0 || tag_bits > 32 || ghr_bits > 63 {
            return Err(Error::Config("pht widths out of range".into()));
        }
        Ok(Self {
            index_bits,
            tag_bits,
            ghr_bits,
            mapping,
            skews: vec![vec![PhtEntry::default(); 1 << index_bits]; skews],
            ghr: 0,
            keys: KeyStore::new(device_secret)?,
            next_stamp: 1,
            metrics: RunMetrics::default(),
        })
    }

    pub fn skew_count(&self) -> usize {
        self.skews.len()
    }

    pub fn ghr(&self) -> u64 {
        self.ghr
    }

    pub fn set_ghr(&mut self, ghr: u64) {
        self.ghr = ghr & low_mask(self.ghr_bits);
    }

    pub fn metrics(&self) -> RunMetrics {
        self.metrics
    }

    pub fn entries(&self, skew: usize) -> &[PhtEntry] {
        &self.skews[skew]
    }

    /// Plaintext tag: the pc bits above the index, folded.
    #[inline]
    pub fn tag_of(&self, pc: u64) -> u32 {
        fold(pc >> self.index_bits, self.tag_bits) as u32
    }

    #[inline]
    fn slot(&self, keys: &KeyBundle, skew: usize, pc: u64) -> usize {
        enc_index(pc, self.ghr, keys.pht_index_keys[skew], self.index_bits, self.mapping) as usize
    }

    #[inline]
    fn decrypt(&self, keys: &KeyBundle, skew: usize, e: &PhtEntry, pc: u64) -> (u32, u8) {
        let ck = address_tweak(keys.pht_content_keys[skew], pc);
        let tag = xor_content(e.tag_cipher as u64, self.tag_bits, ck) as u32;
        let state = xor_content(e.state_cipher as u64, 2, subkey(ck, DOMAIN_PHT_STATE)) as u8;
        (tag, state)
    }

    #[inline]
    fn encrypt(&self, keys: &KeyBundle, skew: usize, tag: u32, state: u8, pc: u64) -> (u32, u8) {
        let ck = address_tweak(keys.pht_content_keys[skew], pc);
        (
            xor_content(tag as u64, self.tag_bits, ck) as u32,
            xor_content(state as u64, 2, subkey(ck, DOMAIN_PHT_STATE)) as u8,
        )
    }

    /// Per-skew view of a pc under `tid`'s keys at the current GHR.
    pub fn probe(&mut self, pc: u64, tid: u32) -> Vec<SkewProbe> {
        let keys = self.keys.bundle(tid);
        let tag = self.tag_of(pc);
        (0..self.skews.len())
            .map(|k| {
                let index = self.slot(&keys, k, pc);
                let e = self.skews[k][index];
                let (t, s) = self.decrypt(&keys, k, &e, pc);
                SkewProbe {
                    index,
                    valid: e.valid,
                    tag_match: e.valid && t == tag,
                    state: s,
                }
            })
            .collect()
    }

    fn find(&mut self, pc: u64, tid: u32) -> (KeyBundle, [usize; MAX_PHT_SKEWS], bool) {
        let keys = self.keys.bundle(tid);
        let tag = self.tag_of(pc);
        let mut idx = [0usize; MAX_PHT_SKEWS];
        let mut hit = true;
        for k in 0..self.skews.len() {
            idx[k] = self.slot(&keys, k, pc);
            let e = &self.skews[k][idx[k]];
            hit &= e.valid && self.decrypt(&keys, k, e, pc).0 == tag;
        }
        (keys, idx, hit)
    }

    pub fn lookup(&mut self, pc: u64, tid: u32) -> PhtLookup {
        let (keys, idx, hit) = self.find(pc, tid);
        self.metrics.pht_lookups += 1;
        if !hit {
            return PhtLookup { hit: false, taken: None };
        }
        self.metrics.pht_hits += 1;
        let (_, state) = self.decrypt(&keys, 0, &self.skews[0][idx[0]], pc);
        PhtLookup {
            hit: true,
            taken: Some(state >= 2),
        }
    }

    /// Train on a resolved conditional branch and shift the outcome into GHR.
    pub fn update(&mut self, pc: u64, tid: u32, taken: bool) -> PhtUpdate {
        let (keys, idx, hit) = self.find(pc, tid);
        let tag = self.tag_of(pc);
        let new_state = if hit {
            counter_step(self.decrypt(&keys, 0, &self.skews[0][idx[0]], pc).1, taken)
        } else {
            initial_state(taken)
        };
        let stamp = self.next_stamp;
        self.next_stamp += 1;
        let mut overwritten_valid = 0;
        for k in 0..self.skews.len() {
            let (tag_cipher, state_cipher) = self.encrypt(&keys, k, tag, new_state, pc);
            let e = &mut self.skews[k][idx[k]];
            if !hit && e.valid {
                overwritten_valid += 1;
            }
            *e = PhtEntry {
                tag_cipher,
                state_cipher,
                valid: true,
                owner: tid,
                pc,
                stamp,
            };
        }
        self.ghr = ((self.ghr << 1) | taken as u64) & low_mask(self.ghr_bits);
        PhtUpdate { hit, overwritten_valid }
    }

    /// Count replication-coherence violations: replicas of one logical entry
    /// (same write stamp) that decrypt to different (tag, state) pairs.
    pub fn coherence_violations(&self) -> usize {
        let mut groups: BTreeMap<u64, Vec<(u32, u8)>> = BTreeMap::new();
        for (k, skew) in self.skews.iter().enumerate() {
            for e in skew.iter().filter(|e| e.valid) {
                let Some(keys) = self.keys.cached(e.owner) else {
                    return usize::MAX;
                };
                groups.entry(e.stamp).or_default().push(self.decrypt(keys, k, e, e.pc));
            }
        }
        groups
            .values()
            .filter(|g| g.iter().any(|x| *x != g[0]))
            .count()
    }

    /// Whether `pc` (as seen by `tid` at the current GHR) is present in every
    /// skew with a single shared stamp and identical decrypted content.
    pub fn replicas_coherent(&mut self, pc: u64, tid: u32) -> bool {
        let (keys, idx, hit) = self.find(pc, tid);
        if !hit {
            return false;
        }
        let first = self.skews[0][idx[0]];
        let want = self.decrypt(&keys, 0, &first, pc);
        (0..self.skews.len()).all(|k| {
            let e = &self.skews[k][idx[k]];
            e.stamp == first.stamp && self.decrypt(&keys, k, e, pc) == want
        })
    }
}
