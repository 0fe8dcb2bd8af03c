//! Fast structural self-checks runnable from the command line.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{reuse_attempts_btb, reuse_attempts_pht, solve_first_de_accesses};
use crate::cibtb::CibtbState;
use crate::cipht::CiphtState;
use crate::config::SimConfig;
use crate::keying::{dec_content, derive_keys, enc_content, low_mask, MappingMode};
use crate::{seeded_rng, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelftestReport {
    pub checks: Vec<Check>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn check(name: &str, pass: bool, detail: String) -> Check {
    Check {
        name: name.into(),
        pass,
        detail,
    }
}

pub fn run(cfg: &SimConfig) -> Result<SelftestReport> {
    cfg.validate()?;
    let mut checks = Vec::new();
    let mut rng = seeded_rng(cfg.seed);

    let a = derive_keys(1, cfg.device_secret)?;
    let b = derive_keys(1, cfg.device_secret)?;
    let c = derive_keys(2, cfg.device_secret)?;
    checks.push(check(
        "key_derivation",
        a == b && a.all().iter().zip(c.all()).all(|(x, y)| *x != y),
        "deterministic per thread, distinct across threads".into(),
    ));

    let mut bad = 0u32;
    for width in [2u32, cfg.pht_tag_bits, cfg.btb_tag_bits, cfg.btb_target_bits] {
        for _ in 0..1000 {
            let v = rng.random::<u64>() & low_mask(width);
            let k = rng.random::<u64>();
            if dec_content(enc_content(v, width, k)?, width, k)? != v {
                bad += 1;
            }
        }
    }
    checks.push(check("content_round_trip", bad == 0, format!("{bad} failures")));

    let mut violations = 0usize;
    for mode in [MappingMode::XorFold, MappingMode::MixedPermutation, MappingMode::IdealOracle] {
        let mut p = CiphtState::with_params(6, 4, 3, 8, mode, cfg.device_secret)?;
        for _ in 0..2000 {
            p.update(rng.random_range(0..512u64) << 2, rng.random_range(0..3), rng.random_bool(0.7));
            violations += p.coherence_violations();
        }
    }
    checks.push(check("pht_coherence", violations == 0, format!("{violations} violations")));

    let mut btb = CibtbState::new(cfg)?;
    for _ in 0..100_000 {
        let pc = rng.random::<u64>() & low_mask(48);
        btb.access(pc, rng.random_range(0..4), pc)?;
    }
    let audit = btb.audit();
    checks.push(check("btb_pointer_audit", audit.is_empty(), format!("{} violations", audit.len())));

    let l1 = solve_first_de_accesses(4096.0, 8, 0.5)?;
    checks.push(check("first_de_solver", (7600.0..=7800.0).contains(&l1), format!("L1 = {l1:.1}")));
    let exact = reuse_attempts_pht(13, 12).bits() == 82 && reuse_attempts_btb(12, 12, 48).bits() == 73;
    checks.push(check("reuse_counts", exact, "2^81 and 2^72".into()));

    Ok(SelftestReport { checks })
}
