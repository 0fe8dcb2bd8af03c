//! Decoupled two-skew branch target buffer.
//!
//! Tags live in a Tag-Store of `sets x (W + E)` slots split across two
//! skews; targets live in a smaller Target-Store. A tag points at its target
//! through FPTR and every live target points back through RPTR. Lookups
//! index one set per skew with independent keys and, on a miss, pick the
//! less-loaded set. Replacement draws two random targets and evicts the one
//! whose owning set holds more valid tags, so evictions are usually global
//! (SE). Only when the chosen set is still full does an in-set victim get
//! displaced (DE).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::SimConfig;
use crate::keying::{
    address_tweak, enc_index, fold, subkey, xor_content, KeyBundle, KeyStore, MappingMode, DOMAIN_BTB_TARGET,
};
use crate::metrics::RunMetrics;
use crate::{seeded_rng, Error, Result};

const NIL: u32 = u32::MAX;

/// Flat set identifier: `skew * sets_per_skew + set`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SetId(pub u32);

/// Flat Tag-Store slot: `set_id * slots_per_set + way`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TagId(pub u32);

/// Target-Store slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TargetId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TagEntry {
    pub tag_cipher: u32,
    fptr: u32,
    pub valid: bool,
}

impl TagEntry {
    const EMPTY: TagEntry = TagEntry {
        tag_cipher: 0,
        fptr: NIL,
        valid: false,
    };

    pub fn fptr(&self) -> Option<TargetId> {
        (self.fptr != NIL).then_some(TargetId(self.fptr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetEntry {
    pub target_cipher: u64,
    rptr: u32,
    pub live: bool,
}

impl TargetEntry {
    const EMPTY: TargetEntry = TargetEntry {
        target_cipher: 0,
        rptr: NIL,
        live: false,
    };

    pub fn rptr(&self) -> Option<TagId> {
        (self.rptr != NIL).then_some(TagId(self.rptr))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvictionKind {
    /// No valid entry was displaced.
    None,
    /// A target was reclaimed from some other set through Algorithm-2 style
    /// global replacement.
    Se,
    /// A valid tag of the newly indexed set was displaced.
    De,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BtbLookup {
    pub hit: bool,
    pub target: Option<u64>,
    /// Set selected for insertion on a miss.
    pub chosen_set: Option<SetId>,
    pub hit_slot: Option<TagId>,
    /// Candidate set per skew.
    pub candidates: [SetId; 2],
}

/// Structural parameters of a [`CibtbState`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CibtbParams {
    pub sets: usize,
    pub ways: usize,
    pub extra_tags: usize,
    pub targets: usize,
    pub tag_bits: u32,
    pub target_bits: u32,
    pub mapping: MappingMode,
    pub device_secret: u64,
    pub seed: u64,
}

impl CibtbParams {
    pub fn from_config(cfg: &SimConfig) -> Self {
        Self {
            sets: cfg.btb_sets(),
            ways: cfg.btb_ways,
            extra_tags: cfg.btb_extra_tags,
            targets: cfg.btb_targets,
            tag_bits: cfg.btb_tag_bits,
            target_bits: cfg.btb_target_bits,
            mapping: cfg.mapping,
            device_secret: cfg.device_secret,
            seed: cfg.seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CibtbState {
    sets_per_skew: usize,
    skew_index_bits: u32,
    ways: usize,
    slots: usize,
    tag_bits: u32,
    target_bits: u32,
    mapping: MappingMode,
    tags: Vec<TagEntry>,
    valid_count: Vec<u8>,
    targets: Vec<TargetEntry>,
    free_targets: Vec<u32>,
    rng: ChaCha8Rng,
    keys: KeyStore,
    metrics: RunMetrics,
}

impl CibtbState {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_params(CibtbParams::from_config(cfg))
    }

    pub fn with_params(p: CibtbParams) -> Result<Self> {
        if p.sets < 2 || !p.sets.is_power_of_two() {
            return Err(Error::Config(format!("set count {} must be a power of two >= 2", p.sets)));
        }
        let slots = p.ways + p.extra_tags;
        if p.ways == 0 || slots > 255 {
            return Err(Error::Config("ways + extra tags must be in 1..=255".into()));
        }
        if p.targets == 0 || p.targets >= p.sets * slots || p.targets >= NIL as usize {
            return Err(Error::Config(format!(
                "target count {} must be positive and below the {} tag slots",
                p.targets,
                p.sets * slots
            )));
        }
        if p.tag_bits == 0 || p.tag_bits > 32 || p.target_bits == 0 || p.target_bits > 64 {
            return Err(Error::Config("tag/target widths out of range".into()));
        }
        let sets_per_skew = p.sets / 2;
        Ok(Self {
            sets_per_skew,
            skew_index_bits: sets_per_skew.trailing_zeros(),
            ways: p.ways,
            slots,
            tag_bits: p.tag_bits,
            target_bits: p.target_bits,
            mapping: p.mapping,
            tags: vec![TagEntry::EMPTY; p.sets * slots],
            valid_count: vec![0; p.sets],
            targets: vec![TargetEntry::EMPTY; p.targets],
            // Popped from the back, so slot 0 is handed out first.
            free_targets: (0..p.targets as u32).rev().collect(),
            rng: seeded_rng(p.seed),
            keys: KeyStore::new(p.device_secret)?,
            metrics: RunMetrics::default(),
        })
    }

    pub fn sets(&self) -> usize {
        self.valid_count.len()
    }

    pub fn sets_per_skew(&self) -> usize {
        self.sets_per_skew
    }

    pub fn slots_per_set(&self) -> usize {
        self.slots
    }

    pub fn base_ways(&self) -> usize {
        self.ways
    }

    pub fn target_count(&self) -> usize {
        self.targets.len()
    }

    pub fn free_target_count(&self) -> usize {
        self.free_targets.len()
    }

    /// Valid-tag count of every set, skew 0 first.
    pub fn occupancy(&self) -> &[u8] {
        &self.valid_count
    }

    pub fn tag_entry(&self, id: TagId) -> &TagEntry {
        &self.tags[id.0 as usize]
    }

    pub fn target_entry(&self, id: TargetId) -> &TargetEntry {
        &self.targets[id.0 as usize]
    }

    pub fn set_of(&self, id: TagId) -> SetId {
        SetId(id.0 / self.slots as u32)
    }

    pub fn skew_of(&self, set: SetId) -> usize {
        set.0 as usize / self.sets_per_skew
    }

    /// Counters: hits, misses, insertions, SE and DE counts.
    pub fn btb_metrics(&self) -> RunMetrics {
        self.metrics
    }

    pub fn bundle(&mut self, tid: u32) -> KeyBundle {
        self.keys.bundle(tid)
    }

    #[inline]
    fn candidate_sets(&self, keys: &KeyBundle, pc: u64) -> [SetId; 2] {
        let i0 = enc_index(pc, 0, keys.btb_index_keys[0], self.skew_index_bits, self.mapping);
        let i1 = enc_index(pc, 0, keys.btb_index_keys[1], self.skew_index_bits, self.mapping);
        [SetId(i0 as u32), SetId((self.sets_per_skew as u64 + i1) as u32)]
    }

    /// Encrypted tag: folded upper pc bits xor an address-bound keystream.
    #[inline]
    pub fn tag_cipher(&self, keys: &KeyBundle, pc: u64) -> u32 {
        let plain = fold(pc >> self.skew_index_bits, self.tag_bits);
        xor_content(plain, self.tag_bits, address_tweak(keys.btb_content_key, pc)) as u32
    }

    #[inline]
    fn target_key(keys: &KeyBundle, pc: u64) -> u64 {
        subkey(address_tweak(keys.btb_content_key, pc), DOMAIN_BTB_TARGET)
    }

    #[inline]
    fn set_range(&self, set: SetId) -> std::ops::Range<usize> {
        let start = set.0 as usize * self.slots;
        start..start + self.slots
    }

    fn find_tag(&self, set: SetId, tag: u32) -> Option<usize> {
        let r = self.set_range(set);
        let start = r.start;
        self.tags[r].iter().position(|e| e.valid && e.tag_cipher == tag).map(|w| start + w)
    }

    pub fn btb_lookup(&mut self, pc: u64, tid: u32) -> Result<BtbLookup> {
        let keys = self.keys.bundle(tid);
        let candidates = self.candidate_sets(&keys, pc);
        let tag = self.tag_cipher(&keys, pc);
        self.metrics.btb_lookups += 1;

        let slot = self.find_tag(candidates[0], tag).or_else(|| self.find_tag(candidates[1], tag));
        if let Some(slot) = slot {
            let entry = self.tags[slot];
            let target = entry
                .fptr()
                .filter(|t| {
                    let te = &self.targets[t.0 as usize];
                    te.live && te.rptr == slot as u32
                })
                .ok_or_else(|| Error::Invariant(format!("tag slot {slot} has a broken forward pointer")))?;
            let plain = xor_content(
                self.targets[target.0 as usize].target_cipher,
                self.target_bits,
                Self::target_key(&keys, pc),
            );
            self.metrics.btb_hits += 1;
            return Ok(BtbLookup {
                hit: true,
                target: Some(plain),
                chosen_set: None,
                hit_slot: Some(TagId(slot as u32)),
                candidates,
            });
        }

        self.metrics.btb_misses += 1;
        let n0 = self.valid_count[candidates[0].0 as usize];
        let n1 = self.valid_count[candidates[1].0 as usize];
        let chosen = if n0 <= n1 { candidates[0] } else { candidates[1] };
        Ok(BtbLookup {
            hit: false,
            target: None,
            chosen_set: Some(chosen),
            hit_slot: None,
            candidates,
        })
    }

    /// Invalidate the tag that `slot` points back to and return the slot to
    /// the free list.
    pub fn btb_invalidate_via_rptr(&mut self, slot: TargetId) -> Result<()> {
        let t = self.targets[slot.0 as usize];
        if !t.live {
            return Err(Error::Invariant(format!("target slot {} is not live", slot.0)));
        }
        let tag_slot = t.rptr as usize;
        match self.tags.get(tag_slot) {
            Some(e) if e.valid && e.fptr == slot.0 => {}
            _ => {
                return Err(Error::Invariant(format!(
                    "target slot {} has a dangling back pointer",
                    slot.0
                )))
            }
        }
        self.tags[tag_slot] = TagEntry::EMPTY;
        self.valid_count[tag_slot / self.slots] -= 1;
        self.targets[slot.0 as usize] = TargetEntry::EMPTY;
        self.free_targets.push(slot.0);
        Ok(())
    }

    /// Global replacement: of two random target slots, reclaim the one whose
    /// owning set holds more valid tags (ties go to the first draw).
    fn reclaim_target(&mut self) -> Result<()> {
        let n = self.targets.len() as u32;
        let r0 = self.rng.random_range(0..n);
        let r1 = self.rng.random_range(0..n);
        let m0 = self.owner_load(r0)?;
        let m1 = self.owner_load(r1)?;
        let victim = if m0 >= m1 { r0 } else { r1 };
        self.btb_invalidate_via_rptr(TargetId(victim))
    }

    #[inline]
    fn owner_load(&self, target: u32) -> Result<u8> {
        let t = &self.targets[target as usize];
        if !t.live || t.rptr == NIL {
            return Err(Error::Invariant(format!("target slot {target} not live with a full pool")));
        }
        Ok(self.valid_count[t.rptr as usize / self.slots])
    }

    /// Install `pc -> target` into `chosen_set` after a miss.
    pub fn btb_insert(&mut self, pc: u64, tid: u32, target: u64, chosen_set: SetId) -> Result<EvictionKind> {
        if chosen_set.0 as usize >= self.valid_count.len() {
            return Err(Error::Invariant(format!("set {} out of range", chosen_set.0)));
        }
        let keys = self.keys.bundle(tid);
        let mut kind = EvictionKind::None;
        if self.free_targets.is_empty() {
            self.reclaim_target()?;
            kind = EvictionKind::Se;
        }
        let slot = self.free_targets.pop().expect("free target available after reclaim");

        let range = self.set_range(chosen_set);
        let way = match self.tags[range.clone()].iter().position(|e| !e.valid) {
            Some(w) => range.start + w,
            None => {
                let victim = range.start + self.rng.random_range(0..self.slots);
                let fptr = self.tags[victim].fptr;
                self.btb_invalidate_via_rptr(TargetId(fptr))?;
                kind = EvictionKind::De;
                victim
            }
        };

        self.tags[way] = TagEntry {
            tag_cipher: self.tag_cipher(&keys, pc),
            fptr: slot,
            valid: true,
        };
        self.valid_count[chosen_set.0 as usize] += 1;
        self.targets[slot as usize] = TargetEntry {
            target_cipher: xor_content(target, self.target_bits, Self::target_key(&keys, pc)),
            rptr: way as u32,
            live: true,
        };

        self.metrics.insertions += 1;
        match kind {
            EvictionKind::Se => self.metrics.se_count += 1,
            EvictionKind::De => self.metrics.de_count += 1,
            EvictionKind::None => {}
        }
        Ok(kind)
    }

    /// Rewrite the target of an existing entry (indirect-branch retarget).
    pub fn btb_update_target(&mut self, slot: TagId, pc: u64, tid: u32, target: u64) -> Result<()> {
        let keys = self.keys.bundle(tid);
        let e = self.tags[slot.0 as usize];
        let fptr = e
            .fptr()
            .filter(|_| e.valid)
            .ok_or_else(|| Error::Invariant(format!("tag slot {} not valid", slot.0)))?;
        self.targets[fptr.0 as usize].target_cipher =
            xor_content(target, self.target_bits, Self::target_key(&keys, pc));
        Ok(())
    }

    /// Lookup followed by insertion on a miss. Returns the lookup result and
    /// the eviction kind of the insertion, if one happened.
    pub fn access(&mut self, pc: u64, tid: u32, target: u64) -> Result<(BtbLookup, Option<EvictionKind>)> {
        let l = self.btb_lookup(pc, tid)?;
        match l.chosen_set {
            Some(set) => {
                let k = self.btb_insert(pc, tid, target, set)?;
                Ok((l, Some(k)))
            }
            None => Ok((l, None)),
        }
    }

    /// Walk both stores and report every pointer or bookkeeping violation.
    pub fn audit(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut counts = vec![0u8; self.valid_count.len()];
        for (i, e) in self.tags.iter().enumerate() {
            if !e.valid {
                if e.fptr != NIL {
                    out.push(format!("invalid tag {i} keeps fptr {}", e.fptr));
                }
                continue;
            }
            counts[i / self.slots] += 1;
            match self.targets.get(e.fptr as usize) {
                Some(t) if t.live && t.rptr == i as u32 => {}
                _ => out.push(format!("tag {i} fptr {} does not point back", e.fptr)),
            }
        }
        if counts != self.valid_count {
            out.push("valid-tag counters disagree with the tag store".into());
        }
        for (s, &c) in self.valid_count.iter().enumerate() {
            if c as usize > self.slots {
                out.push(format!("set {s} holds {c} valid tags"));
            }
        }
        let mut is_free = vec![false; self.targets.len()];
        for &f in &self.free_targets {
            if is_free[f as usize] {
                out.push(format!("target {f} on the free list twice"));
            }
            is_free[f as usize] = true;
        }
        for (j, t) in self.targets.iter().enumerate() {
            if t.live {
                if is_free[j] {
                    out.push(format!("live target {j} is on the free list"));
                }
                match self.tags.get(t.rptr as usize) {
                    Some(e) if e.valid && e.fptr == j as u32 => {}
                    _ => out.push(format!("target {j} rptr {} does not point back", t.rptr)),
                }
            } else if !is_free[j] {
                out.push(format!("dead target {j} leaked from the free list"));
            }
        }
        out
    }

    #[cfg(test)]
    pub(crate) fn corrupt_fptr(&mut self, tag: TagId, fptr: u32) {
        self.tags[tag.0 as usize].fptr = fptr;
    }
}
