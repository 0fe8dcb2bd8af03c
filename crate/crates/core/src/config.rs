use serde::{Deserialize, Serialize};

use crate::keying::MappingMode;
use crate::{Error, Result, DEFAULT_DEVICE_SECRET, DEFAULT_SEED};

/// Structural parameters of the modelled predictor.
///
/// Field names double as the keys accepted in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub pht_index_bits: u32,
    pub pht_tag_bits: u32,
    pub pht_skews: usize,
    pub ghr_bits: u32,
    /// log2 of the total BTB set count across all skews.
    pub btb_index_bits: u32,
    pub btb_tag_bits: u32,
    pub btb_target_bits: u32,
    /// Base associativity W.
    pub btb_ways: usize,
    /// Extra invalid-able tags per set (E); a set holds W + E tag slots.
    pub btb_extra_tags: usize,
    /// Number of target-store slots (balls).
    pub btb_targets: usize,
    pub btb_skews: usize,
    pub mapping: MappingMode,
    pub device_secret: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pht_index_bits: 13,
            pht_tag_bits: 12,
            pht_skews: 3,
            ghr_bits: 16,
            btb_index_bits: 12,
            btb_tag_bits: 12,
            btb_target_bits: 48,
            btb_ways: 8,
            btb_extra_tags: 5,
            btb_targets: 4096 * 8,
            btb_skews: 2,
            mapping: MappingMode::MixedPermutation,
            device_secret: DEFAULT_DEVICE_SECRET,
            seed: DEFAULT_SEED,
        }
    }
}

impl SimConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SimConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn btb_sets(&self) -> usize {
        1usize << self.btb_index_bits
    }

    pub fn btb_sets_per_skew(&self) -> usize {
        self.btb_sets() / self.btb_skews
    }

    /// Tag slots per set, W + E.
    pub fn btb_slots_per_set(&self) -> usize {
        self.btb_ways + self.btb_extra_tags
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.pht_index_bits == 0 || self.pht_index_bits > 24 {
            return bad("pht_index_bits must be in 1..=24");
        }
        if self.pht_tag_bits == 0 || self.pht_tag_bits > 32 {
            return bad("pht_tag_bits must be in 1..=32");
        }
        if !(1..=3).contains(&self.pht_skews) {
            return bad("pht_skews must be in 1..=3");
        }
        if self.ghr_bits > 63 {
            return bad("ghr_bits must be at most 63");
        }
        if self.btb_skews != 2 {
            return bad("btb_skews must be 2");
        }
        if self.btb_index_bits < 1 || self.btb_index_bits > 24 {
            return bad("btb_index_bits must be in 1..=24");
        }
        if self.btb_tag_bits == 0 || self.btb_tag_bits > 32 {
            return bad("btb_tag_bits must be in 1..=32");
        }
        if self.btb_target_bits == 0 || self.btb_target_bits > 64 {
            return bad("btb_target_bits must be in 1..=64");
        }
        if self.btb_ways == 0 {
            return bad("btb_ways must be positive");
        }
        if self.btb_slots_per_set() > 255 {
            return bad("btb_ways + btb_extra_tags must be at most 255");
        }
        if self.btb_targets == 0 || self.btb_targets >= u32::MAX as usize {
            return bad("btb_targets out of range");
        }
        if self.btb_targets >= self.btb_sets() * self.btb_slots_per_set() {
            return bad("btb_targets must be smaller than the number of tag slots");
        }
        if self.device_secret == 0 {
            return bad("device_secret must be non-zero");
        }
        Ok(())
    }
}
