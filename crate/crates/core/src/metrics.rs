use serde::{Deserialize, Serialize};

/// Event counters collected by the predictor structures and the trace loop.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub conditional_count: u64,
    pub mispredictions: u64,
    pub pht_lookups: u64,
    pub pht_hits: u64,
    pub btb_lookups: u64,
    pub btb_hits: u64,
    pub btb_misses: u64,
    pub insertions: u64,
    pub se_count: u64,
    pub de_count: u64,
    pub attacker_accesses: u64,
}

impl RunMetrics {
    pub fn misprediction_rate(&self) -> f64 {
        if self.conditional_count == 0 {
            0.0
        } else {
            self.mispredictions as f64 / self.conditional_count as f64
        }
    }
}
