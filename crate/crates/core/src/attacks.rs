//! Executable attacker strategies.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::{big_to_f64, reuse_attempts_btb, reuse_attempts_pht_skews};
use crate::baseline::{ConvBtbState, Replacement};
use crate::binsballs::mean_se;
use crate::cibtb::{CibtbParams, CibtbState, EvictionKind};
use crate::cipht::{initial_state, CiphtState};
use crate::config::SimConfig;
use crate::keying::{low_mask, MappingMode};
use crate::{seeded_rng, Error, Result};

const VICTIM: u32 = 0;
const ATTACKER: u32 = 1;
const PC_BITS: u32 = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    ReusePht,
    ReuseBtb,
    GemEviction,
    DeProbe,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackScenario {
    pub kind: AttackKind,
    pub config: SimConfig,
    pub trial_count: u64,
    pub seed: u64,
    /// Attempt cap per trial.
    pub per_trial_budget: u64,
    /// Cap on `expected attempts x trial_count`.
    pub total_budget: u64,
}

impl AttackScenario {
    pub fn new(kind: AttackKind, config: SimConfig, trial_count: u64, seed: u64) -> Self {
        Self {
            kind,
            config,
            trial_count,
            seed,
            per_trial_budget: 1 << 24,
            total_budget: 1 << 34,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub kind: AttackKind,
    /// Attempts of every trial, successful or not.
    pub samples: Vec<u64>,
    pub success: Vec<bool>,
    /// Mean over successful trials.
    pub mean: f64,
    pub std_dev: f64,
    pub std_error: f64,
    pub total_accesses: u64,
    /// Closed-form expectation for the scenario.
    pub expected: String,
    pub expected_approx: f64,
}

fn summarize(kind: AttackKind, samples: Vec<u64>, success: Vec<bool>, expected: String, expected_approx: f64) -> AttackResult {
    let ok = samples.iter().zip(&success).filter(|(_, &s)| s).map(|(&x, _)| x as f64);
    let (mean, std_error) = mean_se(ok.clone());
    let n = ok.count() as f64;
    AttackResult {
        kind,
        total_accesses: samples.iter().sum(),
        samples,
        success,
        mean,
        std_dev: std_error * n.sqrt(),
        std_error,
        expected,
        expected_approx,
    }
}

/// Reuse attack: the victim installs one entry, the attacker probes fresh
/// pcs under its own keys until an entry decrypts consistently.
///
/// PHT success needs every skew to hold a valid entry whose tag and 2-bit
/// state decrypt to the attacker's tag and the victim's state. BTB success
/// needs a hit whose target decrypts to the victim's target.
pub fn simulate_reuse(s: &AttackScenario) -> Result<AttackResult> {
    let c = &s.config;
    let expected = match s.kind {
        AttackKind::ReusePht => reuse_attempts_pht_skews(c.pht_index_bits, c.pht_tag_bits, c.pht_skews as u32),
        AttackKind::ReuseBtb => {
            reuse_attempts_btb(c.btb_index_bits - 1, c.btb_tag_bits, c.btb_target_bits)
        }
        _ => return Err(Error::Config("simulate_reuse needs a reuse scenario".into())),
    };
    let expected_f = big_to_f64(&expected);
    let budget = s.trial_count as f64 * expected_f;
    if !(budget <= s.total_budget as f64) {
        return Err(Error::BudgetExceeded {
            expected: expected.to_string(),
            trials: s.trial_count,
            budget: s.total_budget,
        });
    }
    let mut rng = seeded_rng(s.seed);
    let mut samples = Vec::with_capacity(s.trial_count as usize);
    let mut success = Vec::with_capacity(s.trial_count as usize);
    for _ in 0..s.trial_count {
        // Fresh device secret per trial gives fresh, independent keys.
        let secret = rng.random::<u64>() | 1;
        let (n, ok) = match s.kind {
            AttackKind::ReusePht => reuse_pht_trial(c, secret, s.per_trial_budget, &mut rng)?,
            _ => reuse_btb_trial(c, secret, s.per_trial_budget, &mut rng)?,
        };
        samples.push(n);
        success.push(ok);
    }
    Ok(summarize(s.kind, samples, success, expected.to_string(), expected_f))
}

fn reuse_pht_trial(c: &SimConfig, secret: u64, budget: u64, rng: &mut impl Rng) -> Result<(u64, bool)> {
    let mut pht = CiphtState::with_params(c.pht_index_bits, c.pht_tag_bits, c.pht_skews, c.ghr_bits, c.mapping, secret)?;
    let victim_pc = rng.random::<u64>() & low_mask(PC_BITS);
    let taken = rng.random_bool(0.5);
    pht.update(victim_pc, VICTIM, taken);
    pht.set_ghr(0);
    let state = initial_state(taken);
    let mut pc = rng.random::<u64>() & low_mask(PC_BITS);
    for n in 1..=budget {
        pc = (pc + 4) & low_mask(PC_BITS);
        if pc == victim_pc {
            pc = (pc + 4) & low_mask(PC_BITS);
        }
        if pht.probe(pc, ATTACKER).iter().all(|p| p.tag_match && p.state == state) {
            return Ok((n, true));
        }
    }
    Ok((budget, false))
}

fn reuse_btb_trial(c: &SimConfig, secret: u64, budget: u64, rng: &mut impl Rng) -> Result<(u64, bool)> {
    let mut p = CibtbParams::from_config(c);
    p.device_secret = secret;
    p.seed = rng.random();
    let mut btb = CibtbState::with_params(p)?;
    let victim_pc = rng.random::<u64>() & low_mask(PC_BITS);
    let target = rng.random::<u64>() & low_mask(c.btb_target_bits);
    btb.access(victim_pc, VICTIM, target)?;
    let mut pc = rng.random::<u64>() & low_mask(PC_BITS);
    for n in 1..=budget {
        pc = (pc + 4) & low_mask(PC_BITS);
        if pc == victim_pc {
            pc = (pc + 4) & low_mask(PC_BITS);
        }
        let l = btb.btb_lookup(pc, ATTACKER)?;
        if l.hit && l.target == Some(target) {
            return Ok((n, true));
        }
    }
    Ok((budget, false))
}

/// Reduced geometry for reuse Monte Carlo: widths shrunk to the given bits,
/// ideal keyed hashing for the index.
pub fn reduced_reuse_config(i_bits: u32, t_bits: u32, skews: usize, btb_target_bits: u32) -> SimConfig {
    SimConfig {
        pht_index_bits: i_bits,
        pht_tag_bits: t_bits,
        pht_skews: skews,
        ghr_bits: 0,
        btb_index_bits: i_bits + 1,
        btb_tag_bits: t_bits,
        btb_target_bits,
        btb_ways: 2,
        btb_extra_tags: 1,
        btb_targets: 2 << i_bits,
        mapping: MappingMode::IdealOracle,
        ..SimConfig::default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GemOutcome {
    pub accesses: u64,
    pub eviction_set: Vec<u64>,
    pub tests: u64,
    pub rounds: u64,
}

/// Victim still present after accessing it and then every pc of `group`.
fn gem_test(btb: &mut ConvBtbState, victim: u64, group: &[u64], accesses: &mut u64) -> bool {
    btb.access(victim, victim, true);
    for &pc in group {
        btb.access(pc, pc, true);
    }
    *accesses += 1 + group.len() as u64 + 1;
    !btb.contains(victim)
}

/// Group elimination: split the pool into `group_count` groups and drop any
/// group whose removal still evicts the victim, until `W` pcs remain.
pub fn gem_find_eviction_set(
    btb: &mut ConvBtbState,
    victim_pc: u64,
    group_count: usize,
    pool: Vec<u64>,
) -> Result<GemOutcome> {
    if !btb.contains(victim_pc) {
        return Err(Error::Gem("victim entry is not installed".into()));
    }
    let w = btb.ways();
    if group_count < 2 {
        return Err(Error::Gem("need at least two groups".into()));
    }
    let mut accesses = 0u64;
    let (mut tests, mut rounds) = (0u64, 0u64);
    let mut set = pool;
    tests += 1;
    if !gem_test(btb, victim_pc, &set, &mut accesses) {
        return Err(Error::Gem(format!("pool of {} pcs does not evict the victim", set.len())));
    }
    while set.len() > w {
        rounds += 1;
        let k = set.len();
        let bounds: Vec<usize> = (0..=group_count).map(|g| g * k / group_count).collect();
        let mut reduced = None;
        for g in 0..group_count {
            if bounds[g] == bounds[g + 1] {
                continue;
            }
            let rest: Vec<u64> = set[..bounds[g]].iter().chain(&set[bounds[g + 1]..]).copied().collect();
            tests += 1;
            if gem_test(btb, victim_pc, &rest, &mut accesses) {
                reduced = Some(rest);
                break;
            }
        }
        set = reduced.ok_or_else(|| Error::Gem(format!("no removable group among {k} candidates")))?;
    }
    Ok(GemOutcome {
        accesses,
        eviction_set: set,
        tests,
        rounds,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GemTrial {
    pub victim_pc: u64,
    pub discovery_accesses: u64,
    pub pool_size: usize,
    pub outcome: GemOutcome,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GemResult {
    pub trials: Vec<GemTrial>,
    pub mean_accesses: f64,
    pub std_error: f64,
    pub mean_pool: f64,
}

/// Full eviction-set search: access fresh random pcs until the first
/// self-eviction, take the evicted pc as the victim and the rest as the
/// pool, then run group elimination with `W + 1` groups. Accesses of both
/// phases are counted.
pub fn simulate_gem(index_bits: u32, ways: usize, trials: u32, seed: u64) -> Result<GemResult> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::with_capacity(trials as usize);
    for _ in 0..trials {
        let mut btb = ConvBtbState::with_params(index_bits, 12, ways, Replacement::Lru, rng.random())?;
        let mut pool = Vec::new();
        let victim = loop {
            let pc = rng.random::<u64>() & low_mask(PC_BITS) & !3;
            if btb.contains(pc) {
                continue;
            }
            let a = btb.access(pc, pc, true);
            pool.push(pc);
            if let Some(ev) = a.evicted_pc {
                break ev;
            }
        };
        pool.retain(|&p| p != victim);
        let discovery = pool.len() as u64 + 1;
        btb.access(victim, victim, true);
        let mut outcome = gem_find_eviction_set(&mut btb, victim, ways + 1, pool.clone())?;
        outcome.accesses += discovery + 1;
        out.push(GemTrial {
            victim_pc: victim,
            discovery_accesses: discovery,
            pool_size: pool.len(),
            outcome,
        });
    }
    let (mean, se) = mean_se(out.iter().map(|t| t.outcome.accesses as f64));
    let mean_pool = out.iter().map(|t| t.pool_size as f64).sum::<f64>() / out.len().max(1) as f64;
    Ok(GemResult {
        trials: out,
        mean_accesses: mean,
        std_error: se,
        mean_pool,
    })
}

/// Replay `set` against a fresh BTB of the same geometry: the victim must be
/// evicted by the full set and survive once any single member is removed.
pub fn gem_set_is_minimal(index_bits: u32, ways: usize, victim: u64, set: &[u64]) -> Result<bool> {
    let fresh = || ConvBtbState::with_params(index_bits, 12, ways, Replacement::Lru, 0);
    let mut n = 0;
    if !gem_test(&mut fresh()?, victim, set, &mut n) {
        return Ok(false);
    }
    for i in 0..set.len() {
        let rest: Vec<u64> = set.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &p)| p).collect();
        if gem_test(&mut fresh()?, victim, &rest, &mut n) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeProbeResult {
    pub insertions: u64,
    pub de_count: u64,
    pub se_count: u64,
    /// 1-based insertion index of the first DE.
    pub first_de_at: Option<u64>,
    pub attacks_per_de: Option<f64>,
}

/// Insert `budget_insertions` random attacker pcs into `btb` and count DEs.
pub fn de_probe(btb: &mut CibtbState, budget_insertions: u64, seed: u64) -> Result<DeProbeResult> {
    let mut rng = seeded_rng(seed);
    let before = btb.btb_metrics();
    let mut first = None;
    let mut done = 0u64;
    while done < budget_insertions {
        let pc = rng.random::<u64>() & low_mask(PC_BITS);
        let l = btb.btb_lookup(pc, ATTACKER)?;
        if let Some(set) = l.chosen_set {
            done += 1;
            if btb.btb_insert(pc, ATTACKER, pc, set)? == EvictionKind::De && first.is_none() {
                first = Some(done);
            }
        }
    }
    let m = btb.btb_metrics();
    let de = m.de_count - before.de_count;
    Ok(DeProbeResult {
        insertions: done,
        de_count: de,
        se_count: m.se_count - before.se_count,
        first_de_at: first,
        attacks_per_de: (de > 0).then(|| done as f64 / de as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{gem_eviction_set_cost, solve_first_de_accesses};

    #[test]
    fn single_skew_pht_reuse_mean() {
        let s = AttackScenario::new(AttackKind::ReusePht, reduced_reuse_config(2, 2, 1, 4), 10_000, 5);
        let r = simulate_reuse(&s).unwrap();
        assert!(r.success.iter().all(|&x| x));
        assert!((r.mean / 64.0 - 1.0).abs() < 0.1, "{}", r.mean);
        // Geometric: standard deviation tracks the mean.
        assert!((r.std_dev / r.mean - 1.0).abs() < 0.1, "{} {}", r.std_dev, r.mean);
    }

    #[test]
    fn full_width_reuse_is_rejected() {
        let s = AttackScenario::new(AttackKind::ReusePht, SimConfig::default(), 10, 1);
        match simulate_reuse(&s) {
            Err(Error::BudgetExceeded { expected, .. }) => assert_eq!(expected, "2417851639229258349412352"),
            other => panic!("{other:?}"),
        }
        let s = AttackScenario::new(AttackKind::GemEviction, SimConfig::default(), 10, 1);
        assert!(simulate_reuse(&s).is_err());
    }

    #[test]
    fn exhausted_trials_are_excluded_from_mean() {
        let mut s = AttackScenario::new(AttackKind::ReusePht, reduced_reuse_config(2, 2, 1, 4), 2000, 9);
        s.per_trial_budget = 30;
        let r = simulate_reuse(&s).unwrap();
        assert!(r.success.iter().any(|&x| !x));
        assert!(r.mean <= 30.0);
        assert_eq!(r.samples.len(), 2000);
    }

    #[test]
    fn gem_returns_conflicting_minimal_set() {
        let r = simulate_gem(6, 4, 20, 3).unwrap();
        for t in &r.trials {
            let b = ConvBtbState::with_params(6, 12, 4, Replacement::Lru, 0).unwrap();
            let set = &t.outcome.eviction_set;
            assert_eq!(set.len(), 4);
            assert!(set.iter().all(|&p| b.set_index(p) == b.set_index(t.victim_pc)));
            assert!(gem_set_is_minimal(6, 4, t.victim_pc, set).unwrap());
        }
    }

    #[test]
    fn gem_cost_tracks_formula() {
        let r = simulate_gem(6, 4, 400, 11).unwrap();
        let f = gem_eviction_set_cost(4.0, solve_first_de_accesses(64.0, 4, 0.5).unwrap());
        let ratio = r.mean_accesses / f;
        assert!((0.5..=2.0).contains(&ratio), "{} vs {f}", r.mean_accesses);
    }

    #[test]
    fn gem_needs_installed_victim() {
        let mut b = ConvBtbState::with_params(4, 12, 2, Replacement::Lru, 0).unwrap();
        assert!(matches!(gem_find_eviction_set(&mut b, 0x40, 3, vec![0x80, 0xc0]), Err(Error::Gem(_))));
        b.access(0x40, 0, true);
        // Pool without any conflicting pc never evicts.
        let pool: Vec<u64> = (1..=3).map(|k| 0x40 + k * 4).filter(|&p| b.set_index(p) != b.set_index(0x40)).collect();
        assert!(matches!(gem_find_eviction_set(&mut b, 0x40, 3, pool), Err(Error::Gem(_))));
    }

    #[test]
    fn de_probe_zero_budget() {
        let mut b = CibtbState::new(&SimConfig::default()).unwrap();
        let r = de_probe(&mut b, 0, 1).unwrap();
        assert_eq!((r.de_count, r.first_de_at), (0, None));
    }

    #[test]
    fn de_probe_reduced_capacity_sees_des() {
        let cfg = SimConfig {
            btb_index_bits: 8,
            btb_ways: 4,
            btb_extra_tags: 2,
            btb_targets: 1024,
            ..SimConfig::default()
        };
        let mut b = CibtbState::new(&cfg).unwrap();
        let r = de_probe(&mut b, 200_000, 2).unwrap();
        assert!(r.de_count > 0);
        assert!(r.first_de_at.unwrap() <= r.insertions);
        assert!(b.audit().is_empty());
    }
}
