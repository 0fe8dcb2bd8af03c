//! Unprotected set-associative BTB and gshare-style PHT.
//!
//! Index and tag are plain folds of the pc; nothing is keyed per thread.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cipht::{counter_step, initial_state};
use crate::config::SimConfig;
use crate::keying::{fold, low_mask};
use crate::metrics::RunMetrics;
use crate::{seeded_rng, Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    #[default]
    Random,
    Lru,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct BtbWay {
    tag: u32,
    target: u64,
    valid: bool,
    last_use: u64,
    // Simulator bookkeeping: the pc that installed the way.
    pc: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvBtbAccess {
    pub hit: bool,
    pub target: Option<u64>,
    pub evicted_way: Option<usize>,
    pub evicted_pc: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct ConvBtbState {
    index_bits: u32,
    tag_bits: u32,
    ways: usize,
    replacement: Replacement,
    table: Vec<BtbWay>,
    clock: u64,
    rng: ChaCha8Rng,
    metrics: RunMetrics,
}

impl ConvBtbState {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_params(cfg.btb_index_bits, cfg.btb_tag_bits, cfg.btb_ways, Replacement::Random, cfg.seed)
    }

    pub fn with_params(index_bits: u32, tag_bits: u32, ways: usize, replacement: Replacement, seed: u64) -> Result<Self> {
        if index_bits > 24 || tag_bits == 0 || tag_bits > 32 || ways == 0 {
            return Err(Error::Config(format!(
                "conventional btb geometry ({index_bits}, {tag_bits}, {ways}) out of range"
            )));
        }
        Ok(Self {
            index_bits,
            tag_bits,
            ways,
            replacement,
            table: vec![BtbWay::default(); (1usize << index_bits) * ways],
            clock: 0,
            rng: seeded_rng(seed),
            metrics: RunMetrics::default(),
        })
    }

    pub fn sets(&self) -> usize {
        1 << self.index_bits
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn metrics(&self) -> RunMetrics {
        self.metrics
    }

    #[inline]
    pub fn set_index(&self, pc: u64) -> usize {
        fold(pc, self.index_bits) as usize
    }

    #[inline]
    pub fn tag_of(&self, pc: u64) -> u32 {
        fold(pc >> self.index_bits, self.tag_bits) as u32
    }

    /// Pcs currently resident in `set`, in way order.
    pub fn resident(&self, set: usize) -> Vec<u64> {
        self.table[set * self.ways..(set + 1) * self.ways]
            .iter()
            .filter(|w| w.valid)
            .map(|w| w.pc)
            .collect()
    }

    /// True when an entry with `pc`'s tag sits in `pc`'s set. Does not touch
    /// replacement state or counters.
    pub fn contains(&self, pc: u64) -> bool {
        let base = self.set_index(pc) * self.ways;
        let tag = self.tag_of(pc);
        self.table[base..base + self.ways].iter().any(|w| w.valid && w.tag == tag)
    }

    /// Look up `pc`; with `is_update` a miss installs `target`, replacing an
    /// invalid way first and otherwise a way chosen by the replacement policy.
    pub fn access(&mut self, pc: u64, target: u64, is_update: bool) -> ConvBtbAccess {
        self.clock += 1;
        self.metrics.btb_lookups += 1;
        let base = self.set_index(pc) * self.ways;
        let tag = self.tag_of(pc);
        let set = &mut self.table[base..base + self.ways];
        if let Some(w) = set.iter_mut().find(|w| w.valid && w.tag == tag) {
            w.last_use = self.clock;
            let found = w.target;
            if is_update {
                w.target = target;
            }
            self.metrics.btb_hits += 1;
            return ConvBtbAccess {
                hit: true,
                target: Some(found),
                evicted_way: None,
                evicted_pc: None,
            };
        }
        self.metrics.btb_misses += 1;
        if !is_update {
            return ConvBtbAccess {
                hit: false,
                target: None,
                evicted_way: None,
                evicted_pc: None,
            };
        }
        let (way, evicted) = match set.iter().position(|w| !w.valid) {
            Some(w) => (w, false),
            None => {
                let w = match self.replacement {
                    Replacement::Random => self.rng.random_range(0..self.ways),
                    Replacement::Lru => (0..self.ways).min_by_key(|&w| set[w].last_use).unwrap_or(0),
                };
                (w, true)
            }
        };
        let old_pc = set[way].pc;
        set[way] = BtbWay {
            tag,
            target,
            valid: true,
            last_use: self.clock,
            pc,
        };
        self.metrics.insertions += 1;
        ConvBtbAccess {
            hit: false,
            target: None,
            evicted_way: evicted.then_some(way),
            evicted_pc: evicted.then_some(old_pc),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct PhtSlot {
    tag: u32,
    state: u8,
    valid: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvPhtAccess {
    pub hit: bool,
    pub taken: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct ConvPhtState {
    index_bits: u32,
    tag_bits: u32,
    ghr_bits: u32,
    ghr: u64,
    table: Vec<PhtSlot>,
    metrics: RunMetrics,
}

impl ConvPhtState {
    pub fn new(cfg: &SimConfig) -> Result<Self> {
        cfg.validate()?;
        Self::with_params(cfg.pht_index_bits, cfg.pht_tag_bits, cfg.ghr_bits)
    }

    pub fn with_params(index_bits: u32, tag_bits: u32, ghr_bits: u32) -> Result<Self> {
        if index_bits > 24 || tag_bits > 32 || ghr_bits > 64 {
            return Err(Error::Config(format!(
                "conventional pht geometry ({index_bits}, {tag_bits}, {ghr_bits}) out of range"
            )));
        }
        Ok(Self {
            index_bits,
            tag_bits,
            ghr_bits,
            ghr: 0,
            table: vec![PhtSlot::default(); 1usize << index_bits],
            metrics: RunMetrics::default(),
        })
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

    #[inline]
    fn slot(&self, pc: u64) -> usize {
        (fold(pc, self.index_bits) ^ fold(self.ghr, self.index_bits)) as usize
    }

    #[inline]
    fn tag_of(&self, pc: u64) -> u32 {
        fold(pc >> self.index_bits, self.tag_bits) as u32
    }

    /// Predict without side effects on the table. With `taken = Some(_)` the
    /// resolved outcome trains the entry and shifts into the GHR.
    pub fn access(&mut self, pc: u64, taken: Option<bool>) -> ConvPhtAccess {
        let i = self.slot(pc);
        let tag = self.tag_of(pc);
        let e = self.table[i];
        let hit = e.valid && e.tag == tag;
        self.metrics.pht_lookups += 1;
        if hit {
            self.metrics.pht_hits += 1;
        }
        let predicted = hit.then_some(e.state >= 2);
        if let Some(t) = taken {
            let state = if hit { counter_step(e.state, t) } else { initial_state(t) };
            self.table[i] = PhtSlot { tag, state, valid: true };
            self.ghr = ((self.ghr << 1) | t as u64) & low_mask(self.ghr_bits);
        }
        ConvPhtAccess { hit, taken: predicted }
    }

    /// Counter value of `pc`'s entry at the current GHR, if it hits.
    pub fn state_of(&self, pc: u64) -> Option<u8> {
        let e = self.table[self.slot(pc)];
        (e.valid && e.tag == self.tag_of(pc)).then_some(e.state)
    }
}
